//! The full pipeline a `train` run performs, driven from a config string:
//! synthetic data, split, standardisation, padding, training with early
//! stopping and evaluation.

use prectime::cli::{run_training, RunConfig};

const CONFIG: &str = r#"
seed = 3

[model]
window_length = 10
cnn_channels = 8
cnn_kernel = 3
lstm1_hidden = 12
lstm2_hidden = 12
refine_channels = 8

[train]
lr = 0.01
max_epochs = 40
patience = 5

[data]
synthetic = true
tolerance = 5

[synth]
cycles = 20
duration_range = [10, 30]
"#;

fn main() -> prectime::Result<()> {
    let run = RunConfig::from_toml(CONFIG)?;
    run.validate()?;
    let outcome = run_training(&run)?;
    print!("{}", outcome.log.without_timing().to_csv());
    println!("best epoch {} (val accuracy {:.4})", outcome.log.best_epoch, outcome.log.best_val_acc);
    if let Some(test) = &outcome.test_report {
        println!(
            "test: accuracy {:.4}, macro-F1 {:.4}, CP precision {:.3}, CP recall {:.3}",
            test.accuracy, test.macro_f1, test.cp_precision, test.cp_recall
        );
    }
    Ok(())
}
