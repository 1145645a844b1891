#![allow(dead_code)]

use prectime::data::{pad_min_value, pad_split, split_dataset, synth_generate, zscore_normalize, Alphabet, Cycle, PadMode, SynthSpec};
use prectime::model::{split_windows, ModelConfig, PrecTime, Variant};
use prectime::substrate::seed::{fork, Stream};
use prectime::substrate::{grad_check, ConvSpec, Graph, Merge, NodeId, Padding, Tensor, DEFAULT_FD_EPSILON};
use prectime::train::{total_loss_node, Sample, TrainConfig};
use prectime::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRAD_TOL: f64 = 1e-4;
pub const INSTANCES: u64 = 20;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], r: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Entries with magnitude in [0.1, 1], so a finite-difference step never
/// crosses a ReLU kink.
fn away_from_zero(shape: &[usize], r: &mut impl Rng) -> Tensor {
    random(shape, r).map(|v| if v >= 0.0 { 0.1 + 0.9 * v } else { -0.1 + 0.9 * v })
}

/// Distinct values at least 0.01 apart, so pooling never ties.
fn distinct(shape: &[usize], r: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - 1.0).collect();
    for i in (1..n).rev() {
        v.swap(i, r.random_range(0..=i));
    }
    Tensor::new(shape, v.into_iter().map(|x| x + r.random_range(0.0..0.01)).collect()).unwrap()
}

/// Reduces any node to a scalar through a fixed random linear functional.
pub fn project(g: &mut Graph<'_>, y: NodeId, seed: u64) -> Result<NodeId> {
    let n = g.value(y).numel();
    let flat = g.reshape(y, &[1, n])?;
    let w = g.input(random(&[n, 1], &mut rng(seed ^ 0x5eed)));
    let b = g.input(Tensor::zeros(&[1]));
    g.dense(flat, w, b)
}

type Check = fn(u64) -> Result<f64>;

fn conv_case(seed: u64) -> (Tensor, Tensor, Tensor, ConvSpec) {
    let mut r = rng(seed);
    let (ci, co, k) = (r.random_range(1..4), r.random_range(1..4), r.random_range(1..4));
    let dilation = r.random_range(1..3);
    let spec = match r.random_range(0..3) {
        0 => ConvSpec::same(dilation),
        1 => ConvSpec { stride: r.random_range(1..3), dilation, padding: Padding::Valid },
        _ => ConvSpec { stride: r.random_range(1..3), dilation, padding: Padding::Explicit(r.random_range(0..3)) },
    };
    let len = (k - 1) * dilation + 1 + r.random_range(0..5);
    let shape: Vec<usize> = if r.random_bool(0.5) { vec![ci, len] } else { vec![2, ci, len] };
    (random(&shape, &mut r), random(&[co, ci, k], &mut r), random(&[co], &mut r), spec)
}

fn lstm_case(seed: u64) -> (Tensor, Tensor, Tensor, Tensor, bool) {
    let mut r = rng(seed);
    let (n, d, h) = (r.random_range(1..5), r.random_range(1..4), r.random_range(1..4));
    (
        random(&[n, d], &mut r),
        random(&[d, 4 * h], &mut r),
        random(&[h, 4 * h], &mut r),
        random(&[4 * h], &mut r),
        r.random_bool(0.5),
    )
}

fn dense_case(seed: u64) -> (Tensor, Tensor, Tensor) {
    let mut r = rng(seed);
    let (rows, di, dout) = (r.random_range(1..4), r.random_range(1..5), r.random_range(1..5));
    (random(&[rows, di], &mut r), random(&[di, dout], &mut r), random(&[dout], &mut r))
}

/// One gradient check per differentiable operation and operand.
pub fn op_checks() -> Vec<(&'static str, Check)> {
    vec![
        ("conv1d/input", |s| {
            let (x, w, b, spec) = conv_case(s);
            grad_check(|g, l| { let (w, b) = (g.input(w.clone()), g.input(b.clone())); let y = g.conv1d(l, w, b, spec)?; project(g, y, s) }, &x, DEFAULT_FD_EPSILON)
        }),
        ("conv1d/weight", |s| {
            let (x, w, b, spec) = conv_case(s);
            grad_check(|g, l| { let (x, b) = (g.input(x.clone()), g.input(b.clone())); let y = g.conv1d(x, l, b, spec)?; project(g, y, s) }, &w, DEFAULT_FD_EPSILON)
        }),
        ("conv1d/bias", |s| {
            let (x, w, b, spec) = conv_case(s);
            grad_check(|g, l| { let (x, w) = (g.input(x.clone()), g.input(w.clone())); let y = g.conv1d(x, w, l, spec)?; project(g, y, s) }, &b, DEFAULT_FD_EPSILON)
        }),
        ("maxpool1d", |s| {
            let mut r = rng(s);
            let m = r.random_range(1..4);
            let x = distinct(&[r.random_range(1..3), r.random_range(1..3), m * r.random_range(1..4)], &mut r);
            grad_check(|g, l| { let y = g.maxpool1d(l, m)?; project(g, y, s) }, &x, DEFAULT_FD_EPSILON)
        }),
        ("repeat_axis", |s| {
            let mut r = rng(s);
            let x = random(&[r.random_range(1..4), r.random_range(1..4), r.random_range(1..4)], &mut r);
            let (axis, f) = (r.random_range(0..3), r.random_range(1..4));
            grad_check(|g, l| { let y = g.repeat_axis(l, axis, f)?; project(g, y, s) }, &x, DEFAULT_FD_EPSILON)
        }),
        ("upsample_nearest", |s| {
            let mut r = rng(s);
            let x = random(&[r.random_range(1..4), r.random_range(1..4), r.random_range(1..5)], &mut r);
            let f = r.random_range(1..4);
            grad_check(|g, l| { let y = g.upsample_nearest(l, f)?; project(g, y, s) }, &x, DEFAULT_FD_EPSILON)
        }),
        ("dense/input", |s| {
            let (x, w, b) = dense_case(s);
            grad_check(|g, l| { let (w, b) = (g.input(w.clone()), g.input(b.clone())); let y = g.dense(l, w, b)?; project(g, y, s) }, &x, DEFAULT_FD_EPSILON)
        }),
        ("dense/weight", |s| {
            let (x, w, b) = dense_case(s);
            grad_check(|g, l| { let (x, b) = (g.input(x.clone()), g.input(b.clone())); let y = g.dense(x, l, b)?; project(g, y, s) }, &w, DEFAULT_FD_EPSILON)
        }),
        ("dense/bias", |s| {
            let (x, w, b) = dense_case(s);
            grad_check(|g, l| { let (x, w) = (g.input(x.clone()), g.input(w.clone())); let y = g.dense(x, w, l)?; project(g, y, s) }, &b, DEFAULT_FD_EPSILON)
        }),
        ("lstm/input", |s| {
            let (x, wi, wh, b, rev) = lstm_case(s);
            grad_check(|g, l| { let (wi, wh, b) = (g.input(wi.clone()), g.input(wh.clone()), g.input(b.clone())); let y = g.lstm(l, wi, wh, b, rev)?; project(g, y, s) }, &x, DEFAULT_FD_EPSILON)
        }),
        ("lstm/w_ih", |s| {
            let (x, wi, wh, b, rev) = lstm_case(s);
            grad_check(|g, l| { let (x, wh, b) = (g.input(x.clone()), g.input(wh.clone()), g.input(b.clone())); let y = g.lstm(x, l, wh, b, rev)?; project(g, y, s) }, &wi, DEFAULT_FD_EPSILON)
        }),
        ("lstm/w_hh", |s| {
            let (x, wi, wh, b, rev) = lstm_case(s);
            grad_check(|g, l| { let (x, wi, b) = (g.input(x.clone()), g.input(wi.clone()), g.input(b.clone())); let y = g.lstm(x, wi, l, b, rev)?; project(g, y, s) }, &wh, DEFAULT_FD_EPSILON)
        }),
        ("lstm/bias", |s| {
            let (x, wi, wh, b, rev) = lstm_case(s);
            grad_check(|g, l| { let (x, wi, wh) = (g.input(x.clone()), g.input(wi.clone()), g.input(wh.clone())); let y = g.lstm(x, wi, wh, l, rev)?; project(g, y, s) }, &b, DEFAULT_FD_EPSILON)
        }),
        ("bilstm", |s| {
            let mut r = rng(s);
            let (n, d, h) = (r.random_range(1..5), r.random_range(1..4), r.random_range(1..4));
            let x = random(&[n, d], &mut r);
            let dirs: Vec<Tensor> = (0..2).flat_map(|_| [random(&[d, 4 * h], &mut r), random(&[h, 4 * h], &mut r), random(&[4 * h], &mut r)]).collect();
            let merge = if r.random_bool(0.5) { Merge::Sum } else { Merge::Concat };
            grad_check(|g, l| {
                let p: Vec<NodeId> = dirs.iter().map(|t| g.input(t.clone())).collect();
                let y = g.bilstm(l, [p[0], p[1], p[2]], [p[3], p[4], p[5]], merge)?;
                project(g, y, s)
            }, &x, DEFAULT_FD_EPSILON)
        }),
        ("dropout", |s| {
            let mut r = rng(s);
            let x = random(&[r.random_range(1..5), r.random_range(1..5)], &mut r);
            grad_check(|g, l| { let y = g.dropout(l, 0.3, &mut fork(s, Stream::Dropout), true)?; project(g, y, s) }, &x, DEFAULT_FD_EPSILON)
        }),
        ("relu", |s| {
            let mut r = rng(s);
            let x = away_from_zero(&[r.random_range(1..5), r.random_range(1..5)], &mut r);
            grad_check(|g, l| { let y = g.relu(l); project(g, y, s) }, &x, DEFAULT_FD_EPSILON)
        }),
        ("tanh", |s| {
            let mut r = rng(s);
            let x = random(&[r.random_range(1..5), r.random_range(1..5)], &mut r).map(|v| 2.0 * v);
            grad_check(|g, l| { let y = g.tanh(l); project(g, y, s) }, &x, DEFAULT_FD_EPSILON)
        }),
        ("softmax", |s| {
            let mut r = rng(s);
            let x = random(&[r.random_range(1..5), r.random_range(2..6)], &mut r).map(|v| 3.0 * v);
            grad_check(|g, l| { let y = g.softmax(l)?; project(g, y, s) }, &x, DEFAULT_FD_EPSILON)
        }),
        ("cross_entropy", |s| {
            let mut r = rng(s);
            let (rows, c) = (r.random_range(1..6), r.random_range(2..5));
            let probs = random(&[rows, c], &mut r).map(|v| 0.55 + 0.45 * v);
            let mut target = Tensor::zeros(&[rows, c]);
            for row in 0..rows {
                target.set(&[row, r.random_range(0..c)], 1.0);
            }
            let weights: Option<Vec<f64>> = r.random_bool(0.5).then(|| (0..rows).map(|_| r.random_range(0.0..1.0)).collect());
            grad_check(|g, l| g.cross_entropy(l, target.clone(), weights.clone()), &probs, DEFAULT_FD_EPSILON)
        }),
        ("softmax+cross_entropy", |s| {
            let mut r = rng(s);
            let (rows, c) = (r.random_range(1..6), r.random_range(2..5));
            let logits = random(&[rows, c], &mut r).map(|v| 4.0 * v);
            let mut target = Tensor::zeros(&[rows, c]);
            for row in 0..rows {
                target.set(&[row, r.random_range(0..c)], 1.0);
            }
            grad_check(|g, l| { let p = g.softmax(l)?; g.cross_entropy(p, target.clone(), None) }, &logits, DEFAULT_FD_EPSILON)
        }),
        ("concat", |s| {
            let mut r = rng(s);
            let axis = r.random_range(0..3);
            let mut shape = vec![r.random_range(1..4), r.random_range(1..4), r.random_range(1..4)];
            let a = random(&shape, &mut r);
            shape[axis] = r.random_range(1..4);
            let b = random(&shape, &mut r);
            let first = r.random_bool(0.5);
            grad_check(|g, l| { let o = g.input(b.clone()); let parts = if first { [l, o] } else { [o, l] }; let y = g.concat(&parts, axis)?; project(g, y, s) }, &a, DEFAULT_FD_EPSILON)
        }),
        ("reshape", |s| {
            let mut r = rng(s);
            let (a, b) = (r.random_range(1..5), r.random_range(1..5));
            let x = random(&[a, b], &mut r);
            grad_check(|g, l| { let y = g.reshape(l, &[b, a])?; let y = g.tanh(y); project(g, y, s) }, &x, DEFAULT_FD_EPSILON)
        }),
        ("transpose_last2", |s| {
            let mut r = rng(s);
            let x = random(&[r.random_range(1..3), r.random_range(1..5), r.random_range(1..5)], &mut r);
            grad_check(|g, l| { let y = g.transpose_last2(l)?; let y = g.tanh(y); project(g, y, s) }, &x, DEFAULT_FD_EPSILON)
        }),
        ("add", |s| {
            let mut r = rng(s);
            let shape = [r.random_range(1..4), r.random_range(1..4)];
            let (x, other) = (random(&shape, &mut r), random(&shape, &mut r));
            grad_check(|g, l| { let o = g.input(other.clone()); let y = g.add(l, o)?; let y = g.add(y, l)?; let y = g.tanh(y); project(g, y, s) }, &x, DEFAULT_FD_EPSILON)
        }),
        ("scale", |s| {
            let mut r = rng(s);
            let x = random(&[r.random_range(1..4), r.random_range(1..4)], &mut r);
            let f = r.random_range(-3.0..3.0);
            grad_check(|g, l| { let y = g.scale(l, f); let y = g.tanh(y); project(g, y, s) }, &x, DEFAULT_FD_EPSILON)
        }),
    ]
}

/// S=2, L=8, pool 2, upsample 2, C=3, 4 channels, hidden 5/6, k=3,
/// dilations 1 and 2.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        sensors: 2,
        num_classes: 3,
        window_length: 8,
        cnn_channels: 4,
        cnn_kernel: 3,
        dilation_low: 1,
        dilation_high: 2,
        dropout: 0.2,
        pool: 2,
        lstm1_hidden: 5,
        lstm2_hidden: 6,
        refine_channels: 4,
        upsample_factor: 2,
        ..ModelConfig::default()
    }
}

/// Gradient of window `i`'s loss (both heads) with respect to every input
/// window.
pub fn window_gradients(model: &PrecTime, x: &Tensor, i: usize) -> Vec<Vec<f64>> {
    let l = model.config().window_length;
    let batch = split_windows(x, l).unwrap();
    let n = batch.n;
    let mut g = Graph::new();
    let p = model.bind(&mut g);
    let w = g.input(batch.windows);
    let heads = model.build(&mut g, &p, w, false, &mut fork(0, Stream::Dropout)).unwrap();
    let mut target = Tensor::zeros(&[n * l, 3]);
    let mut weights = vec![0.0; n * l];
    for t in 0..n * l {
        target.set(&[t, t % 3], 1.0);
        if t / l == i {
            weights[t] = 1.0;
        }
    }
    let mut loss = g.cross_entropy(heads.intermediate, target.clone(), Some(weights.clone())).unwrap();
    if let Some(f) = heads.final_ {
        let lf = g.cross_entropy(f, target, Some(weights)).unwrap();
        loss = g.add(loss, lf).unwrap();
    }
    let grads = g.backward(loss).unwrap();
    let dx = grads.get(w).unwrap();
    (0..n).map(|j| dx.data()[j * 2 * l..(j + 1) * 2 * l].to_vec()).collect()
}

/// A random 3-window cycle with two padded timesteps, labelled 0..3.
pub fn micro_sample(seed: u64) -> Sample {
    let mut r = rng(seed);
    let len = 22;
    let sensors = random(&[2, len], &mut r);
    let labels = (0..len).map(|_| r.random_range(0..3)).collect();
    let cycle = Cycle::new("micro", sensors, labels, 100.0).unwrap();
    let padded = pad_min_value(&cycle, 24).unwrap();
    Sample::new(&padded, &Alphabet::from_codes([0, 1, 2]), true).unwrap()
}

/// Biases start at zero, so a conv whose receptive field is entirely dead
/// after the previous ReLU sits exactly on the ReLU kink. Checking at random
/// biases moves the evaluation point off it.
pub fn randomize_biases(model: &mut PrecTime, seed: u64) {
    let mut r = rng(seed ^ 0xb1a5);
    for p in model.params_mut().iter_mut().filter(|p| p.name.ends_with(".bias")) {
        p.value = random(p.value.shape(), &mut r).map(|v| 0.1 * v);
    }
}

/// Worst relative gradient error of the micro model's training loss over
/// every parameter tensor and the input, with dropout active.
pub fn micro_model_check(seed: u64, variant: Variant) -> Result<f64> {
    let mut model = PrecTime::with_variant(micro_config(), variant, seed)?;
    randomize_biases(&mut model, seed);
    let sample = micro_sample(seed);
    let windows = split_windows(&sample.input, 8)?.windows;
    let cfg = TrainConfig::default();
    let loss = |g: &mut Graph<'_>, target: Option<usize>, leaf: NodeId| -> Result<NodeId> {
        let mut p: Vec<NodeId> = model.params().iter().map(|q| g.input(q.value.clone())).collect();
        let w = match target {
            Some(i) => {
                p[i] = leaf;
                g.input(windows.clone())
            }
            None => leaf,
        };
        let heads = model.build(g, &p, w, true, &mut fork(seed, Stream::Dropout))?;
        total_loss_node(g, &heads, &sample, &cfg)
    };
    let mut worst = grad_check(|g, l| loss(g, None, l), &windows, DEFAULT_FD_EPSILON)?;
    for (i, p) in model.params().iter().enumerate() {
        worst = worst.max(grad_check(|g, l| loss(g, Some(i), l), &p.value, DEFAULT_FD_EPSILON)?);
    }
    Ok(worst)
}

/// Brute-force metric implementations written directly from the metric
/// definitions, sharing no code with the library.
pub mod oracle {
    pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
        let mut correct = 0;
        for i in 0..truth.len() {
            if pred[i] == truth[i] {
                correct += 1;
            }
        }
        correct as f64 / truth.len() as f64
    }

    pub fn macro_f1(pred: &[usize], truth: &[usize], classes: usize) -> f64 {
        let mut total = 0.0;
        for c in 0..classes {
            let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
            for i in 0..truth.len() {
                match (pred[i] == c, truth[i] == c) {
                    (true, true) => tp += 1.0,
                    (true, false) => fp += 1.0,
                    (false, true) => fn_ += 1.0,
                    _ => {}
                }
            }
            if tp + fp + fn_ > 0.0 {
                total += tp / (tp + 0.5 * (fp + fn_));
            }
        }
        total / classes as f64
    }

    pub fn changepoints(labels: &[usize]) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for t in 1..labels.len() {
            if labels[t] != labels[t - 1] {
                out.push((t, labels[t - 1], labels[t]));
            }
        }
        out
    }

    fn matched_fraction(side: &[(usize, usize, usize)], other: &[(usize, usize, usize)], tol: i64) -> f64 {
        let mut hits = 0;
        for a in side {
            let mut found = false;
            for b in other {
                if a.1 == b.1 && a.2 == b.2 && (a.0 as i64 - b.0 as i64).abs() <= tol {
                    found = true;
                }
            }
            if found {
                hits += 1;
            }
        }
        hits as f64 / side.len() as f64
    }

    pub fn cp_precision(pred: &[usize], truth: &[usize], tol: i64) -> f64 {
        let (p, g) = (changepoints(pred), changepoints(truth));
        if p.is_empty() {
            0.0
        } else {
            matched_fraction(&p, &g, tol)
        }
    }

    pub fn cp_recall(pred: &[usize], truth: &[usize], tol: i64) -> f64 {
        let (p, g) = (changepoints(pred), changepoints(truth));
        if g.is_empty() {
            1.0
        } else {
            matched_fraction(&g, &p, tol)
        }
    }
}

/// Random segment-structured label sequence (runs of random length) so
/// changepoints are neither absent nor on every step.
pub fn random_segments(r: &mut impl Rng, len: usize, classes: usize, mean_run: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(len);
    while out.len() < len {
        let c = r.random_range(0..classes);
        let run = r.random_range(1..=2 * mean_run);
        out.extend(std::iter::repeat_n(c, run.min(len - out.len())));
    }
    out
}

/// Learning rate and seed of the reference synthetic run.
pub const BENCH_LR: f64 = 0.001;
pub const BENCH_SEED: u64 = 7;
pub const BENCH_WINDOW: usize = 50;

pub struct Benchmark {
    pub alphabet: Alphabet,
    pub config: ModelConfig,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    /// Dense indices of the mirrored states.
    pub mirrored: Vec<usize>,
}

/// The default mirrored-state benchmark split 24/8/8, standardised and
/// padded, with the reduced model (L=50, 32 channels, hidden 32/32).
pub fn benchmark(spec: SynthSpec) -> Benchmark {
    let seed = spec.seed;
    let pairs: Vec<i64> = spec.mirrored_pairs.iter().flatten().map(|&s| s as i64).collect();
    let split = split_dataset(synth_generate(&spec).unwrap(), [0.6, 0.2, 0.2], seed).unwrap();
    let split = pad_split(zscore_normalize(split).unwrap(), BENCH_WINDOW, PadMode::CycleMin).unwrap().split;
    let alphabet = split.alphabet.clone();
    let samples = |cs: &[Cycle]| prectime::train::prepare_samples(cs, &alphabet, true).unwrap();
    let config = ModelConfig {
        sensors: spec.sensors,
        num_classes: alphabet.len(),
        window_length: BENCH_WINDOW,
        cnn_channels: 32,
        lstm1_hidden: 32,
        lstm2_hidden: 32,
        refine_channels: 32,
        ..ModelConfig::default()
    };
    Benchmark {
        train: samples(&split.train),
        val: samples(&split.val),
        test: samples(&split.test),
        mirrored: pairs.iter().filter_map(|&c| alphabet.index(c)).collect(),
        alphabet,
        config,
    }
}

pub fn bench_train_config() -> TrainConfig {
    TrainConfig {
        lr: BENCH_LR,
        seed: BENCH_SEED,
        ..TrainConfig::default()
    }
}

/// Decoding-head accuracy restricted to timesteps whose true class is in
/// `classes`.
pub fn accuracy_on(model: &PrecTime, samples: &[Sample], classes: &[usize]) -> f64 {
    let (mut hit, mut total) = (0usize, 0usize);
    for s in samples {
        let pred = model.predict(&s.input).unwrap().decoding().argmax_rows();
        for ((p, t), &m) in pred.iter().zip(&s.classes).zip(&s.mask) {
            if m && classes.contains(t) {
                total += 1;
                hit += usize::from(p == t);
            }
        }
    }
    hit as f64 / total as f64
}

/// Compares every library metric with [`oracle`] on `cases` random label
/// pairs (T ≤ 500, C ≤ 6), a fifth of them degenerate. Returns the largest
/// absolute difference seen, or the first disagreement beyond 1e-12.
pub fn metric_oracle(cases: u64) -> std::result::Result<f64, String> {
    use prectime::metrics::{accuracy, cp_precision, cp_recall, evaluate_labels, extract_changepoints, macro_f1, MetricOptions};
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let mut r = rng(0xacc0 + case);
        let len = r.random_range(1..=500);
        let classes = r.random_range(1..=6);
        let run = r.random_range(1..40);
        let mut truth = random_segments(&mut r, len, classes, run);
        let mut pred = match r.random_range(0..3) {
            0 => truth.clone(),
            _ => random_segments(&mut r, len, classes, run),
        };
        match case % 10 {
            0 => {
                let c = pred[0];
                pred.fill(c);
            }
            1 => {
                let c = truth[0];
                truth.fill(c);
            }
            2 => {
                pred.fill(0);
                truth.fill(0);
            }
            3 => {
                // jitter the truth's changepoints by up to ±25 steps
                pred = truth.clone();
                for t in 1..len {
                    if truth[t] != truth[t - 1] {
                        let shift = r.random_range(-25i64..=25);
                        let to = (t as i64 + shift).clamp(1, len as i64 - 1) as usize;
                        let (lo, hi) = if to < t { (to, t) } else { (t, to) };
                        let fill = if to < t { truth[t] } else { truth[t - 1] };
                        pred[lo..hi].fill(fill);
                    }
                }
            }
            _ => {}
        }
        let tol = if case % 7 == 0 { 20 } else { r.random_range(0..=30) };
        let (pc, gc) = (extract_changepoints(&pred, None), extract_changepoints(&truth, None));
        let opts = MetricOptions { tolerance: tol, ..MetricOptions::default() };
        let report = evaluate_labels(&pred, &truth, None, classes, opts).map_err(|e| e.to_string())?;
        let pairs = [
            ("accuracy", accuracy(&pred, &truth, None).unwrap(), oracle::accuracy(&pred, &truth)),
            ("macro_f1", macro_f1(&pred, &truth, None, classes).unwrap().0, oracle::macro_f1(&pred, &truth, classes)),
            ("cp_precision", cp_precision(&pc, &gc, tol).unwrap(), oracle::cp_precision(&pred, &truth, tol)),
            ("cp_recall", cp_recall(&pc, &gc, tol).unwrap(), oracle::cp_recall(&pred, &truth, tol)),
            ("report.accuracy", report.accuracy, oracle::accuracy(&pred, &truth)),
            ("report.macro_f1", report.macro_f1, oracle::macro_f1(&pred, &truth, classes)),
            ("report.cp_precision", report.cp_precision, oracle::cp_precision(&pred, &truth, tol)),
            ("report.cp_recall", report.cp_recall, oracle::cp_recall(&pred, &truth, tol)),
        ];
        for (name, got, want) in pairs {
            let d = (got - want).abs();
            if !(d <= 1e-12) {
                return Err(format!("case {case}: {name} = {got}, oracle {want}"));
            }
            worst = worst.max(d);
        }
    }
    Ok(worst)
}
