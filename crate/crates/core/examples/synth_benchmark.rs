//! Trains the full model and the dense-context ablation on the mirrored-state
//! benchmark and compares them on the mirrored timesteps.
//!
//! ```text
//! cargo run --release --example synth_benchmark -- [lr] [max_epochs] [seed]
//! ```

use std::time::Instant;

use prectime::data::{pad_split, split_dataset, synth_generate, zscore_normalize, PadMode, SynthSpec};
use prectime::metrics::MetricOptions;
use prectime::model::{ModelConfig, PrecTime, Variant};
use prectime::train::{evaluate, prepare_samples, train, Sample, TrainConfig};

fn mirrored_accuracy(model: &PrecTime, samples: &[Sample], mirrored: &[usize]) -> f64 {
    let (mut hit, mut total) = (0, 0);
    for s in samples {
        let pred = model.predict(&s.input).unwrap().decoding().argmax_rows();
        for ((p, t), m) in pred.iter().zip(&s.classes).zip(&s.mask) {
            if *m && mirrored.contains(t) {
                total += 1;
                hit += usize::from(p == t);
            }
        }
    }
    hit as f64 / total as f64
}

fn main() -> prectime::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let lr: f64 = args.first().map_or(0.001, |a| a.parse().unwrap());
    let max_epochs: usize = args.get(1).map_or(200, |a| a.parse().unwrap());
    let seed: u64 = args.get(2).map_or(7, |a| a.parse().unwrap());

    let spec = SynthSpec { seed, ..SynthSpec::mirror_v1() };
    let split = zscore_normalize(split_dataset(synth_generate(&spec)?, [0.6, 0.2, 0.2], seed)?)?;
    let padded = pad_split(split, 50, PadMode::CycleMin)?;
    let split = padded.split;
    let alphabet = split.alphabet.clone();
    let tr = prepare_samples(&split.train, &alphabet, true)?;
    let va = prepare_samples(&split.val, &alphabet, true)?;
    let te = prepare_samples(&split.test, &alphabet, true)?;
    let mirrored: Vec<usize> = [1, 2, 3, 4].iter().filter_map(|&c| alphabet.index(c)).collect();
    println!("padded length {}, {} classes", padded.padded_length, alphabet.len());

    let config = ModelConfig {
        sensors: 3,
        num_classes: alphabet.len(),
        window_length: 50,
        cnn_channels: 32,
        lstm1_hidden: 32,
        lstm2_hidden: 32,
        refine_channels: 32,
        ..ModelConfig::default()
    };
    let cfg = TrainConfig { lr, max_epochs, seed, ..TrainConfig::default() };
    for variant in [Variant::Full, Variant::A2] {
        let started = Instant::now();
        let model = PrecTime::with_variant(config.clone(), variant, seed)?;
        let (model, log) = train(model, &tr, &va, &cfg)?;
        for r in log.records.iter().step_by(10) {
            println!(
                "  epoch {:3} loss {:.4} val {:.4} acc_i {:.3} acc_f {:?}",
                r.epoch, r.train_loss, r.val_loss, r.val_acc_intermediate, r.val_acc_final
            );
        }
        let report = evaluate(&model, &te, &alphabet, MetricOptions { tolerance: 5, ..MetricOptions::default() })?;
        println!(
            "{variant}: {} epochs (best {}) in {:.1}s, test acc {:.4}, cp recall@5 {:.3}, cp precision@5 {:.3}, mirrored acc {:.4}",
            log.len(),
            log.best_epoch,
            started.elapsed().as_secs_f64(),
            report.accuracy,
            report.cp_recall,
            report.cp_precision,
            mirrored_accuracy(&model, &te, &mirrored)
        );
    }
    Ok(())
}
