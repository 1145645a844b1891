//! Saves a checkpoint, reloads it and checks that predictions are
//! bit-identical.

use prectime::data::{Alphabet, Cycle, NormStats};
use prectime::model::{ModelConfig, PrecTime};
use prectime::substrate::Tensor;
use prectime::train::{load_checkpoint, save_checkpoint, Checkpoint};

fn main() -> prectime::Result<()> {
    let cfg = ModelConfig {
        sensors: 2,
        num_classes: 3,
        window_length: 10,
        cnn_channels: 8,
        cnn_kernel: 3,
        dilation_high: 2,
        lstm1_hidden: 8,
        lstm2_hidden: 8,
        refine_channels: 8,
        ..ModelConfig::default()
    };
    let mut ckpt = Checkpoint::new(PrecTime::new(cfg, 42)?, Alphabet::from_codes([3, 7, 11]));
    ckpt.normalization = Some(NormStats { mean: vec![1.5, -0.25], std: vec![0.8, 2.0] });

    let path = std::env::temp_dir().join(format!("prectime_demo_{}.ckpt", std::process::id()));
    save_checkpoint(&ckpt, &path)?;
    let loaded = load_checkpoint(&path)?;
    println!("{} bytes written to {}", std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0), path.display());
    std::fs::remove_file(&path).ok();

    // a 23-step raw cycle is normalised and padded to 30 before prediction
    let x = Tensor::new(&[2, 23], (0..46).map(|i| (i as f64 * 0.37).sin()).collect())?;
    let cycle = Cycle::new("raw", x, vec![3; 23], 100.0)?;
    let a = ckpt.model.predict(&ckpt.prepare_cycle(&cycle)?.sensors)?;
    let b = loaded.model.predict(&loaded.prepare_cycle(&cycle)?.sensors)?;
    assert_eq!(a, b);
    let labels: Vec<i64> = b.decoding().argmax_rows()[..23].iter().map(|&c| loaded.alphabet.code(c)).collect();
    println!("predictions match; labels {labels:?}");
    Ok(())
}
