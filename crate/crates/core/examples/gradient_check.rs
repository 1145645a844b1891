//! Central-difference check of the full training loss of a small model,
//! against the input and every parameter tensor.

use prectime::data::{pad_min_value, Alphabet, Cycle};
use prectime::model::{split_windows, ModelConfig, PrecTime, Variant};
use prectime::substrate::seed::{fork, Stream};
use prectime::substrate::{grad_check, Graph, NodeId, Tensor, DEFAULT_FD_EPSILON};
use prectime::train::{total_loss_node, Sample, TrainConfig};
use rand::Rng;

fn main() -> prectime::Result<()> {
    let cfg = ModelConfig {
        sensors: 2,
        num_classes: 3,
        window_length: 8,
        cnn_channels: 4,
        cnn_kernel: 3,
        dilation_high: 2,
        lstm1_hidden: 5,
        lstm2_hidden: 6,
        refine_channels: 4,
        ..ModelConfig::default()
    };
    let mut r = fork(1, Stream::Synth);
    let x = Tensor::new(&[2, 22], (0..44).map(|_| r.random_range(-1.0..1.0)).collect())?;
    let labels = (0..22).map(|t| (t / 8) as i64).collect();
    let cycle = pad_min_value(&Cycle::new("demo", x, labels, 100.0)?, 24)?;
    let sample = Sample::new(&cycle, &Alphabet::from_codes([0, 1, 2]), true)?;
    let windows = split_windows(&sample.input, 8)?.windows;
    let train = TrainConfig::default();

    for variant in [Variant::Full, Variant::A1, Variant::A2, Variant::A3] {
        let mut model = PrecTime::with_variant(cfg.clone(), variant, 3)?;
        // zero biases put dead conv outputs exactly on the ReLU kink
        for p in model.params_mut().iter_mut().filter(|p| p.name.ends_with(".bias")) {
            p.value = Tensor::new(p.value.shape(), (0..p.value.numel()).map(|_| r.random_range(-0.1..0.1)).collect())?;
        }
        let loss = |g: &mut Graph<'_>, slot: Option<usize>, leaf: NodeId| -> prectime::Result<NodeId> {
            let mut p: Vec<NodeId> = model.params().iter().map(|q| g.input(q.value.clone())).collect();
            let w = match slot {
                Some(i) => {
                    p[i] = leaf;
                    g.input(windows.clone())
                }
                None => leaf,
            };
            let heads = model.build(g, &p, w, true, &mut fork(3, Stream::Dropout))?;
            total_loss_node(g, &heads, &sample, &train)
        };
        let mut worst = ("input".to_string(), grad_check(|g, l| loss(g, None, l), &windows, DEFAULT_FD_EPSILON)?);
        for (i, p) in model.params().iter().enumerate() {
            let e = grad_check(|g, l| loss(g, Some(i), l), &p.value, DEFAULT_FD_EPSILON)?;
            if e > worst.1 {
                worst = (p.name.clone(), e);
            }
        }
        println!("{variant:>4}: max relative error {:.2e} ({})", worst.1, worst.0);
    }
    Ok(())
}
