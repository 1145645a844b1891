//! Forward and adjoint kernels for the primitive operation set.
//!
//! The free functions here work on plain tensors and are what the
//! [`Graph`](super::Graph) records. Each forward kernel has a matching
//! `*_backward` that maps an output adjoint to input adjoints.

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Lower clip applied to probabilities before taking logarithms.
pub const LOG_CLIP: f64 = 1e-12;

// ── dense linear algebra ────────────────────────────────────────────

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[k×n] += aᵀ · b` with `a[m×k]`, `b[m×n]`.
pub(crate) fn gemm_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×k] += a · bᵀ` with `a[m×n]`, `b[k×n]`.
pub(crate) fn gemm_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            c[i * k + p] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

// ── convolution ─────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// No padding.
    Valid,
    /// Zero padding that keeps the output length equal to the input length
    /// (stride 1 only). Odd totals put the extra zero on the right.
    Same,
    /// Symmetric zero padding of the given width on both ends.
    Explicit(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub dilation: usize,
    pub padding: Padding,
}

impl ConvSpec {
    pub fn same(dilation: usize) -> Self {
        Self {
            stride: 1,
            dilation,
            padding: Padding::Same,
        }
    }

    pub fn valid() -> Self {
        Self {
            stride: 1,
            dilation: 1,
            padding: Padding::Valid,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    batch: usize,
    c_in: usize,
    c_out: usize,
    len_in: usize,
    len_out: usize,
    kernel: usize,
    stride: usize,
    dilation: usize,
    pad_left: usize,
}

fn conv_geom(input: &Tensor, weight: &Tensor, bias: &Tensor, spec: ConvSpec) -> Result<ConvGeom> {
    let (batch, c_in, len_in) = match *input.shape() {
        [c, l] => (1, c, l),
        [b, c, l] => (b, c, l),
        ref s => return Err(Error::shape(format!("conv1d input must be [C×L] or [B×C×L], got {s:?}"))),
    };
    let [c_out, w_in, kernel] = *weight.shape() else {
        return Err(Error::shape(format!(
            "conv1d weight must be [C_out×C_in×k], got {:?}",
            weight.shape()
        )));
    };
    if w_in != c_in {
        return Err(Error::shape(format!(
            "conv1d weight expects {w_in} input channels, input has {c_in}"
        )));
    }
    if bias.shape() != [c_out] {
        return Err(Error::shape(format!(
            "conv1d bias must be [{c_out}], got {:?}",
            bias.shape()
        )));
    }
    if spec.stride == 0 || spec.dilation == 0 {
        return Err(Error::arg("conv1d stride and dilation must be >= 1"));
    }
    let field = spec.dilation * (kernel - 1) + 1;
    let (pad_left, pad_total) = match spec.padding {
        Padding::Valid => (0, 0),
        Padding::Explicit(p) => (p, 2 * p),
        Padding::Same => {
            if spec.stride != 1 {
                return Err(Error::arg("conv1d \"same\" padding requires stride 1"));
            }
            let total = field - 1;
            (total / 2, total)
        }
    };
    let padded = len_in + pad_total;
    if field > padded {
        return Err(Error::shape(format!(
            "conv1d receptive field {field} exceeds padded length {padded}"
        )));
    }
    let len_out = (padded - field) / spec.stride + 1;
    Ok(ConvGeom {
        batch,
        c_in,
        c_out,
        len_in,
        len_out,
        kernel,
        stride: spec.stride,
        dilation: spec.dilation,
        pad_left,
    })
}

impl ConvGeom {
    /// Output positions `t` for which tap `kk` reads inside the input, and the
    /// matching input offset for `t = 0` (may be negative).
    fn tap_range(&self, kk: usize) -> (usize, usize, isize) {
        let shift = (kk * self.dilation) as isize - self.pad_left as isize;
        let s = self.stride as isize;
        // smallest t with t*s + shift >= 0
        let lo = if shift >= 0 { 0 } else { ((-shift) + s - 1) / s };
        // largest t with t*s + shift <= len_in - 1
        let max_pos = self.len_in as isize - 1 - shift;
        let hi = if max_pos < 0 { 0 } else { (max_pos / s + 1).min(self.len_out as isize) };
        (lo as usize, (hi.max(lo)) as usize, shift)
    }
}

/// 1-D convolution (cross-correlation) over `[C×L]` or batched `[B×C×L]` input.
pub fn conv1d(input: &Tensor, weight: &Tensor, bias: &Tensor, spec: ConvSpec) -> Result<Tensor> {
    input.check_finite("conv1d input")?;
    let g = conv_geom(input, weight, bias, spec)?;
    let (x, w, b) = (input.data(), weight.data(), bias.data());
    let mut out = vec![0.0; g.batch * g.c_out * g.len_out];
    for bi in 0..g.batch {
        for co in 0..g.c_out {
            let orow = &mut out[(bi * g.c_out + co) * g.len_out..][..g.len_out];
            orow.fill(b[co]);
            for ci in 0..g.c_in {
                let xrow = &x[(bi * g.c_in + ci) * g.len_in..][..g.len_in];
                let wrow = &w[(co * g.c_in + ci) * g.kernel..][..g.kernel];
                for (kk, &wv) in wrow.iter().enumerate() {
                    let (lo, hi, shift) = g.tap_range(kk);
                    if g.stride == 1 {
                        let start = (lo as isize + shift) as usize;
                        for (o, &xv) in orow[lo..hi].iter_mut().zip(&xrow[start..]) {
                            *o += wv * xv;
                        }
                    } else {
                        for t in lo..hi {
                            orow[t] += wv * xrow[(t as isize * g.stride as isize + shift) as usize];
                        }
                    }
                }
            }
        }
    }
    let shape: Vec<usize> = if input.rank() == 2 {
        vec![g.c_out, g.len_out]
    } else {
        vec![g.batch, g.c_out, g.len_out]
    };
    Tensor::new(&shape, out)
}

/// Returns adjoints for `(input, weight, bias)`.
pub(crate) fn conv1d_backward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    spec: ConvSpec,
    d_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let g = conv_geom(input, weight, bias, spec)?;
    let (x, w, dy) = (input.data(), weight.data(), d_out.data());
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; g.c_out];
    for bi in 0..g.batch {
        for co in 0..g.c_out {
            let dyrow = &dy[(bi * g.c_out + co) * g.len_out..][..g.len_out];
            db[co] += dyrow.iter().sum::<f64>();
            for ci in 0..g.c_in {
                let xoff = (bi * g.c_in + ci) * g.len_in;
                let woff = (co * g.c_in + ci) * g.kernel;
                for kk in 0..g.kernel {
                    let (lo, hi, shift) = g.tap_range(kk);
                    let wv = w[woff + kk];
                    let mut acc = 0.0;
                    for t in lo..hi {
                        let pos = xoff + (t as isize * g.stride as isize + shift) as usize;
                        acc += dyrow[t] * x[pos];
                        dx[pos] += wv * dyrow[t];
                    }
                    dw[woff + kk] += acc;
                }
            }
        }
    }
    Ok((
        Tensor::new(input.shape(), dx)?,
        Tensor::new(weight.shape(), dw)?,
        Tensor::new(bias.shape(), db)?,
    ))
}

// ── pooling and resampling ──────────────────────────────────────────

/// Non-overlapping max pooling along the last axis. Also returns the flat
/// input index chosen for every output element (first maximum on ties).
pub fn maxpool1d_with_indices(input: &Tensor, m: usize) -> Result<(Tensor, Vec<usize>)> {
    if m == 0 {
        return Err(Error::arg("max pooling size must be >= 1"));
    }
    let len = input.trailing();
    if m > len {
        return Err(Error::shape(format!("pool size {m} exceeds length {len}")));
    }
    let out_len = len / m;
    let rows = input.numel() / len;
    let mut out = Vec::with_capacity(rows * out_len);
    let mut idx = Vec::with_capacity(rows * out_len);
    for r in 0..rows {
        let row = &input.data()[r * len..(r + 1) * len];
        for j in 0..out_len {
            let mut best = j * m;
            for p in j * m + 1..(j + 1) * m {
                if row[p] > row[best] {
                    best = p;
                }
            }
            out.push(row[best]);
            idx.push(r * len + best);
        }
    }
    let mut shape = input.shape().to_vec();
    *shape.last_mut().unwrap() = out_len;
    Ok((Tensor::new(&shape, out)?, idx))
}

pub fn maxpool1d(input: &Tensor, m: usize) -> Result<Tensor> {
    maxpool1d_with_indices(input, m).map(|(t, _)| t)
}

pub(crate) fn maxpool1d_backward(input_shape: &[usize], indices: &[usize], d_out: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(input_shape);
    let buf = dx.data_mut();
    for (&i, &g) in indices.iter().zip(d_out.data()) {
        buf[i] += g;
    }
    dx
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Repeats every slice along `axis` `factor` consecutive times.
pub fn repeat_axis(input: &Tensor, axis: usize, factor: usize) -> Result<Tensor> {
    if factor == 0 {
        return Err(Error::arg("repeat factor must be >= 1"));
    }
    if axis >= input.rank() {
        return Err(Error::shape(format!("axis {axis} out of range for rank {}", input.rank())));
    }
    let (outer, len, inner) = axis_split(input.shape(), axis);
    let x = input.data();
    let mut out = Vec::with_capacity(input.numel() * factor);
    for o in 0..outer {
        for i in 0..len {
            let slice = &x[(o * len + i) * inner..][..inner];
            for _ in 0..factor {
                out.extend_from_slice(slice);
            }
        }
    }
    let mut shape = input.shape().to_vec();
    shape[axis] *= factor;
    Tensor::new(&shape, out)
}

pub(crate) fn repeat_axis_backward(input_shape: &[usize], axis: usize, factor: usize, d_out: &Tensor) -> Tensor {
    let (outer, len, inner) = axis_split(input_shape, axis);
    let dy = d_out.data();
    let mut dx = vec![0.0; outer * len * inner];
    for o in 0..outer {
        for i in 0..len {
            let dst = &mut dx[(o * len + i) * inner..][..inner];
            for r in 0..factor {
                let src = &dy[((o * len + i) * factor + r) * inner..][..inner];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
    }
    Tensor::new(input_shape, dx).expect("shape preserved")
}

/// Nearest-neighbour upsampling along the time (last) axis.
pub fn upsample_nearest(input: &Tensor, factor: usize) -> Result<Tensor> {
    repeat_axis(input, input.rank() - 1, factor)
}

// ── dense ───────────────────────────────────────────────────────────

fn dense_dims(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize)> {
    let [d_in, d_out] = *weight.shape() else {
        return Err(Error::shape(format!("dense weight must be 2-D, got {:?}", weight.shape())));
    };
    if input.trailing() != d_in {
        return Err(Error::shape(format!(
            "dense expects trailing extent {d_in}, input shape {:?}",
            input.shape()
        )));
    }
    if bias.shape() != [d_out] {
        return Err(Error::shape(format!("dense bias must be [{d_out}], got {:?}", bias.shape())));
    }
    Ok((input.numel() / d_in, d_in, d_out))
}

/// Affine map along the trailing axis.
pub fn dense(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (rows, d_in, d_out) = dense_dims(input, weight, bias)?;
    let mut out: Vec<f64> = bias.data().iter().copied().cycle().take(rows * d_out).collect();
    gemm_acc(input.data(), weight.data(), &mut out, rows, d_in, d_out);
    let mut shape = input.shape().to_vec();
    *shape.last_mut().unwrap() = d_out;
    Tensor::new(&shape, out)
}

pub(crate) fn dense_backward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    d_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (rows, d_in, d_outw) = dense_dims(input, weight, bias)?;
    let dy = d_out.data();
    let mut dx = vec![0.0; input.numel()];
    gemm_nt_acc(dy, weight.data(), &mut dx, rows, d_outw, d_in);
    let mut dw = vec![0.0; weight.numel()];
    gemm_tn_acc(input.data(), dy, &mut dw, rows, d_in, d_outw);
    let mut db = vec![0.0; d_outw];
    for row in dy.chunks(d_outw) {
        for (b, g) in db.iter_mut().zip(row) {
            *b += g;
        }
    }
    Ok((
        Tensor::new(input.shape(), dx)?,
        Tensor::new(weight.shape(), dw)?,
        Tensor::new(bias.shape(), db)?,
    ))
}

// ── dropout ─────────────────────────────────────────────────────────

/// Inverted-dropout multiplier mask: each entry is 0 with probability `p`
/// and `1/(1-p)` otherwise.
pub fn dropout_mask<R: Rng + ?Sized>(numel: usize, p: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::arg(format!("dropout probability must be in [0, 1), got {p}")));
    }
    let keep = 1.0 / (1.0 - p);
    Ok((0..numel)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect())
}

pub fn dropout<R: Rng + ?Sized>(input: &Tensor, p: f64, rng: &mut R, training: bool) -> Result<Tensor> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::arg(format!("dropout probability must be in [0, 1), got {p}")));
    }
    if !training || p == 0.0 {
        return Ok(input.clone());
    }
    let mask = dropout_mask(input.numel(), p, rng)?;
    let data = input.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
    Tensor::new(input.shape(), data)
}

// ── activations ─────────────────────────────────────────────────────

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax along the trailing axis, stabilised by subtracting the row maximum.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    logits.check_finite("softmax logits")?;
    let c = logits.trailing();
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(c) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Tensor::new(logits.shape(), out)
}

pub(crate) fn softmax_backward(probs: &Tensor, d_out: &Tensor) -> Tensor {
    let c = probs.trailing();
    let mut dx = Vec::with_capacity(probs.numel());
    for (p, g) in probs.data().chunks(c).zip(d_out.data().chunks(c)) {
        let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        dx.extend(p.iter().zip(g).map(|(pi, gi)| pi * (gi - dot)));
    }
    Tensor::new(probs.shape(), dx).expect("shape preserved")
}

// ── loss ────────────────────────────────────────────────────────────

fn ce_check(probs: &Tensor, target: &Tensor, weights: Option<&[f64]>) -> Result<usize> {
    if probs.shape() != target.shape() || probs.rank() != 2 {
        return Err(Error::shape(format!(
            "cross entropy needs matching [T×C] tensors, got {:?} and {:?}",
            probs.shape(),
            target.shape()
        )));
    }
    let rows = probs.shape()[0];
    if let Some(w) = weights {
        if w.len() != rows {
            return Err(Error::shape(format!("{} row weights for {rows} rows", w.len())));
        }
    }
    Ok(rows)
}

/// Weighted sum over rows of `-Σ_c target·log(clip(prob))`.
///
/// With `weights = None` every row has weight `1/T`, giving the mean over
/// timesteps.
pub fn cross_entropy_weighted(probs: &Tensor, target: &Tensor, weights: Option<&[f64]>) -> Result<f64> {
    let rows = ce_check(probs, target, weights)?;
    let c = probs.trailing();
    let uniform = 1.0 / rows as f64;
    let mut loss = 0.0;
    for r in 0..rows {
        let w = weights.map_or(uniform, |w| w[r]);
        if w == 0.0 {
            continue;
        }
        let row: f64 = probs.data()[r * c..(r + 1) * c]
            .iter()
            .zip(&target.data()[r * c..(r + 1) * c])
            .filter(|(_, &t)| t != 0.0)
            .map(|(&p, &t)| -t * p.max(LOG_CLIP).ln())
            .sum();
        loss += w * row;
    }
    Ok(loss)
}

/// Mean over timesteps of the negative log-probability of the true class.
pub fn cross_entropy(probs: &Tensor, target_onehot: &Tensor) -> Result<f64> {
    cross_entropy_weighted(probs, target_onehot, None)
}

pub(crate) fn cross_entropy_backward(probs: &Tensor, target: &Tensor, weights: Option<&[f64]>, d_loss: f64) -> Tensor {
    let rows = probs.shape()[0];
    let c = probs.trailing();
    let uniform = 1.0 / rows as f64;
    let mut dx = vec![0.0; probs.numel()];
    for r in 0..rows {
        let w = weights.map_or(uniform, |w| w[r]);
        for j in r * c..(r + 1) * c {
            let (p, t) = (probs.data()[j], target.data()[j]);
            if t != 0.0 && p > LOG_CLIP {
                dx[j] = -d_loss * w * t / p;
            }
        }
    }
    Tensor::new(probs.shape(), dx).expect("shape preserved")
}

// ── LSTM ────────────────────────────────────────────────────────────

/// Per-step activations kept for backpropagation through time.
#[derive(Clone, Debug)]
pub(crate) struct LstmCache {
    /// Gate activations `[N × 4H]` in processing order: i, f, g, o.
    gates: Vec<f64>,
    /// Cell states `[N × H]` in processing order.
    cells: Vec<f64>,
    /// Hidden states `[N × H]` in processing order.
    hiddens: Vec<f64>,
}

fn lstm_dims(input: &Tensor, w_ih: &Tensor, w_hh: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize)> {
    let [n, d_in] = *input.shape() else {
        return Err(Error::shape(format!("lstm input must be [N×D], got {:?}", input.shape())));
    };
    let [wd, four_h] = *w_ih.shape() else {
        return Err(Error::shape("lstm input weight must be 2-D"));
    };
    let h = four_h / 4;
    if wd != d_in || four_h % 4 != 0 || w_hh.shape() != [h, four_h] || bias.shape() != [four_h] {
        return Err(Error::shape(format!(
            "lstm weights {:?}/{:?}/{:?} do not fit input width {d_in}",
            w_ih.shape(),
            w_hh.shape(),
            bias.shape()
        )));
    }
    Ok((n, d_in, h))
}

/// One LSTM direction over an `[N × D]` sequence. `reverse` processes the
/// sequence from the last step to the first; output rows stay in input order.
///
/// Weights use fused gate blocks `[i | f | g | o]` along the last axis:
/// `w_ih: [D × 4H]`, `w_hh: [H × 4H]`, `bias: [4H]`.
pub(crate) fn lstm_forward(
    input: &Tensor,
    w_ih: &Tensor,
    w_hh: &Tensor,
    bias: &Tensor,
    reverse: bool,
) -> Result<(Tensor, LstmCache)> {
    let (n, d_in, h) = lstm_dims(input, w_ih, w_hh, bias)?;
    let g4 = 4 * h;
    let mut pre: Vec<f64> = bias.data().iter().copied().cycle().take(n * g4).collect();
    gemm_acc(input.data(), w_ih.data(), &mut pre, n, d_in, g4);

    let mut cache = LstmCache {
        gates: vec![0.0; n * g4],
        cells: vec![0.0; n * h],
        hiddens: vec![0.0; n * h],
    };
    let mut out = vec![0.0; n * h];
    let mut h_prev = vec![0.0; h];
    let mut c_prev = vec![0.0; h];
    for step in 0..n {
        let t = if reverse { n - 1 - step } else { step };
        let z = &mut pre[t * g4..(t + 1) * g4];
        gemm_acc(&h_prev, w_hh.data(), z, 1, h, g4);
        let gates = &mut cache.gates[step * g4..(step + 1) * g4];
        for j in 0..h {
            let i = sigmoid(z[j]);
            let f = sigmoid(z[h + j]);
            let g = z[2 * h + j].tanh();
            let o = sigmoid(z[3 * h + j]);
            gates[j] = i;
            gates[h + j] = f;
            gates[2 * h + j] = g;
            gates[3 * h + j] = o;
            let c = f * c_prev[j] + i * g;
            c_prev[j] = c;
            h_prev[j] = o * c.tanh();
        }
        cache.cells[step * h..(step + 1) * h].copy_from_slice(&c_prev);
        cache.hiddens[step * h..(step + 1) * h].copy_from_slice(&h_prev);
        out[t * h..(t + 1) * h].copy_from_slice(&h_prev);
    }
    Ok((Tensor::new(&[n, h], out)?, cache))
}

/// Backpropagation through time; returns adjoints for `(input, w_ih, w_hh, bias)`.
pub(crate) fn lstm_backward(
    input: &Tensor,
    w_ih: &Tensor,
    w_hh: &Tensor,
    bias: &Tensor,
    reverse: bool,
    cache: &LstmCache,
    d_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
    let (n, d_in, h) = lstm_dims(input, w_ih, w_hh, bias)?;
    let g4 = 4 * h;
    let dy = d_out.data();
    let mut dpre = vec![0.0; n * g4];
    let mut dw_hh = vec![0.0; h * g4];
    let mut dh_next = vec![0.0; h];
    let mut dc_next = vec![0.0; h];
    let zeros = vec![0.0; h];
    for step in (0..n).rev() {
        let t = if reverse { n - 1 - step } else { step };
        let gates = &cache.gates[step * g4..(step + 1) * g4];
        let c = &cache.cells[step * h..(step + 1) * h];
        let c_prev = if step == 0 { &zeros[..] } else { &cache.cells[(step - 1) * h..step * h] };
        let h_prev = if step == 0 { &zeros[..] } else { &cache.hiddens[(step - 1) * h..step * h] };
        let dz = &mut dpre[t * g4..(t + 1) * g4];
        for j in 0..h {
            let (i, f, g, o) = (gates[j], gates[h + j], gates[2 * h + j], gates[3 * h + j]);
            let tc = c[j].tanh();
            let dh = dy[t * h + j] + dh_next[j];
            let dc = dc_next[j] + dh * o * (1.0 - tc * tc);
            dz[j] = dc * g * i * (1.0 - i);
            dz[h + j] = dc * c_prev[j] * f * (1.0 - f);
            dz[2 * h + j] = dc * i * (1.0 - g * g);
            dz[3 * h + j] = dh * tc * o * (1.0 - o);
            dc_next[j] = dc * f;
        }
        gemm_tn_acc(h_prev, dz, &mut dw_hh, 1, h, g4);
        dh_next.fill(0.0);
        gemm_nt_acc(dz, w_hh.data(), &mut dh_next, 1, g4, h);
    }
    let mut dx = vec![0.0; n * d_in];
    gemm_nt_acc(&dpre, w_ih.data(), &mut dx, n, g4, d_in);
    let mut dw_ih = vec![0.0; d_in * g4];
    gemm_tn_acc(input.data(), &dpre, &mut dw_ih, n, d_in, g4);
    let mut db = vec![0.0; g4];
    for row in dpre.chunks(g4) {
        for (b, g) in db.iter_mut().zip(row) {
            *b += g;
        }
    }
    Ok((
        Tensor::new(input.shape(), dx)?,
        Tensor::new(w_ih.shape(), dw_ih)?,
        Tensor::new(w_hh.shape(), dw_hh)?,
        Tensor::new(bias.shape(), db)?,
    ))
}

/// Trainable element count of one LSTM direction with a single fused bias.
pub fn lstm_param_count(d_in: usize, hidden: usize) -> usize {
    4 * ((d_in + hidden) * hidden + hidden)
}

// ── shape plumbing ──────────────────────────────────────────────────

pub fn concat(inputs: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = inputs.first().ok_or_else(|| Error::arg("concat of zero tensors"))?;
    if axis >= first.rank() {
        return Err(Error::shape(format!("concat axis {axis} out of range")));
    }
    for t in inputs {
        let ok = t.rank() == first.rank()
            && t.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(Error::shape(format!(
                "cannot concat {:?} with {:?} on axis {axis}",
                t.shape(),
                first.shape()
            )));
        }
    }
    let (outer, _, inner) = axis_split(first.shape(), axis);
    let total: usize = inputs.iter().map(|t| t.shape()[axis]).sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for t in inputs {
            let chunk = t.shape()[axis] * inner;
            out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Tensor::new(&shape, out)
}

pub(crate) fn concat_backward(shapes: &[Vec<usize>], axis: usize, d_out: &Tensor) -> Vec<Tensor> {
    let (outer, _, inner) = axis_split(&shapes[0], axis);
    let total: usize = shapes.iter().map(|s| s[axis]).sum();
    let dy = d_out.data();
    shapes
        .iter()
        .scan(0, |offset, shape| {
            let chunk = shape[axis] * inner;
            let mut buf = Vec::with_capacity(outer * chunk);
            for o in 0..outer {
                let start = o * total * inner + *offset;
                buf.extend_from_slice(&dy[start..start + chunk]);
            }
            *offset += chunk;
            Some(Tensor::new(shape, buf).expect("shape preserved"))
        })
        .collect()
}

/// Swaps the last two axes.
pub fn transpose_last2(input: &Tensor) -> Result<Tensor> {
    let r = input.rank();
    if r < 2 {
        return Err(Error::shape("transpose needs rank >= 2"));
    }
    let (a, b) = (input.shape()[r - 2], input.shape()[r - 1]);
    let batch = input.numel() / (a * b);
    let x = input.data();
    let mut out = vec![0.0; x.len()];
    for n in 0..batch {
        let off = n * a * b;
        for i in 0..a {
            for j in 0..b {
                out[off + j * a + i] = x[off + i * b + j];
            }
        }
    }
    let mut shape = input.shape().to_vec();
    shape.swap(r - 2, r - 1);
    Tensor::new(&shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t1(v: &[f64]) -> Tensor {
        Tensor::new(&[1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let w = Tensor::new(&[1, 1, 1], vec![1.0]).unwrap();
        let b = Tensor::vector(&[0.0]);
        let y = conv1d(&t1(&[1.0, 2.0, 3.0, 4.0]), &w, &b, ConvSpec::valid()).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn conv_valid_and_dilated() {
        let w = Tensor::new(&[1, 1, 2], vec![1.0, 1.0]).unwrap();
        let b = Tensor::vector(&[0.0]);
        let y = conv1d(&t1(&[1.0, 2.0, 3.0, 4.0]), &w, &b, ConvSpec::valid()).unwrap();
        assert_eq!(y.data(), &[3.0, 5.0, 7.0]);
        let spec = ConvSpec { dilation: 2, ..ConvSpec::valid() };
        let y = conv1d(&t1(&[1.0, 2.0, 3.0, 4.0, 5.0]), &w, &b, spec).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0, 8.0]);
    }

    #[test]
    fn conv_stride_and_explicit_padding_follow_length_formula() {
        let w = Tensor::new(&[1, 1, 3], vec![1.0, 1.0, 1.0]).unwrap();
        let b = Tensor::vector(&[0.5]);
        let spec = ConvSpec { stride: 2, dilation: 1, padding: Padding::Explicit(1) };
        let y = conv1d(&t1(&[1.0, 2.0, 3.0, 4.0, 5.0]), &w, &b, spec).unwrap();
        // L_out = floor((5 + 2 - 2 - 1)/2) + 1 = 3; windows [0,1,2], [2,3,4], [4,5,0]
        assert_eq!(y.data(), &[3.5, 9.5, 9.5]);
    }

    #[test]
    fn conv_rejects_bad_geometry() {
        let w = Tensor::new(&[1, 1, 3], vec![1.0; 3]).unwrap();
        let b = Tensor::vector(&[0.0]);
        let spec = ConvSpec { dilation: 2, ..ConvSpec::valid() };
        assert!(matches!(conv1d(&t1(&[1.0, 2.0, 3.0, 4.0]), &w, &b, spec), Err(Error::Shape(_))));
        let strided_same = ConvSpec { stride: 2, dilation: 1, padding: Padding::Same };
        assert!(matches!(conv1d(&t1(&[1.0; 8]), &w, &b, strided_same), Err(Error::Argument(_))));
        assert!(matches!(
            conv1d(&t1(&[1.0, f64::NAN, 1.0]), &w, &b, ConvSpec::valid()),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn pooling_examples() {
        assert_eq!(maxpool1d(&t1(&[5.0; 4]), 2).unwrap().data(), &[5.0, 5.0]);
        assert_eq!(maxpool1d(&t1(&[1.0, 3.0, 2.0, 5.0]), 2).unwrap().data(), &[3.0, 5.0]);
        let x = t1(&[0.3, -1.0, 2.0]);
        assert_eq!(maxpool1d(&x, 1).unwrap(), x);
        assert!(maxpool1d(&x, 4).is_err());
        let (_, idx) = maxpool1d_with_indices(&t1(&[2.0, 2.0]), 2).unwrap();
        assert_eq!(idx, vec![0]);
    }

    #[test]
    fn upsample_examples() {
        assert_eq!(
            upsample_nearest(&t1(&[1.0, 2.0]), 3).unwrap().data(),
            &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]
        );
        let x = t1(&[0.1, 0.2]);
        assert_eq!(upsample_nearest(&x, 1).unwrap(), x);
        assert!(matches!(upsample_nearest(&x, 0), Err(Error::Argument(_))));
        let block = t1(&[4.0, 4.0, -1.0, -1.0]);
        let base = t1(&[4.0, -1.0]);
        assert_eq!(maxpool1d(&upsample_nearest(&base, 2).unwrap(), 2).unwrap(), base);
        assert_eq!(upsample_nearest(&maxpool1d(&block, 2).unwrap(), 2).unwrap(), block);
    }

    #[test]
    fn dense_examples() {
        let w = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let b = Tensor::vector(&[1.0, 1.0]);
        assert_eq!(dense(&Tensor::vector(&[1.0, 2.0]), &w, &b).unwrap().data(), &[2.0, 5.0]);
        let bad = Tensor::vector(&[1.0, 2.0, 3.0]);
        assert!(matches!(dense(&bad, &w, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::full(&[100], 2.0);
        assert_eq!(dropout(&x, 0.0, &mut rng, true).unwrap(), x);
        assert_eq!(dropout(&x, 0.7, &mut rng, false).unwrap(), x);
        assert!(matches!(dropout(&x, 1.0, &mut rng, true), Err(Error::Argument(_))));
    }

    #[test]
    fn dropout_preserves_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = Tensor::full(&[1_000_000], 1.0);
        let y = dropout(&x, 0.5, &mut rng, true).unwrap();
        let mean = y.sum() / y.numel() as f64;
        assert!((0.99..=1.01).contains(&mean), "mean {mean}");
    }

    #[test]
    fn softmax_examples() {
        let u = softmax(&Tensor::full(&[2, 4], 3.0)).unwrap();
        assert!(u.data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
        let p = softmax(&Tensor::vector(&[0.0, 2f64.ln()])).unwrap();
        assert!((p.data()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((p.data()[1] - 2.0 / 3.0).abs() < 1e-15);
        let x = Tensor::vector(&[0.3, -1.2, 4.0]);
        let a = softmax(&x).unwrap();
        let b = softmax(&x.map(|v| v + 123.0)).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12);
        }
        assert!(matches!(softmax(&Tensor::vector(&[f64::INFINITY])), Err(Error::Numeric(_))));
    }

    #[test]
    fn cross_entropy_examples() {
        let target = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert!(cross_entropy(&target, &target).unwrap() <= 1e-11);
        let uniform = Tensor::full(&[3, 4], 0.25);
        let t4 = Tensor::from_rows(&[
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0],
        ])
        .unwrap();
        assert!((cross_entropy(&uniform, &t4).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!(matches!(cross_entropy(&uniform, &target), Err(Error::Shape(_))));
        // saturated wrong prediction is finite because of the clip
        let wrong = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let l = cross_entropy(&wrong, &target).unwrap();
        assert!((l + LOG_CLIP.ln()).abs() < 1e-9);
    }

    #[test]
    fn lstm_zero_weights_fixed_point() {
        let x = Tensor::new(&[4, 3], vec![0.7; 12]).unwrap();
        let (y, _) = lstm_forward(
            &x,
            &Tensor::zeros(&[3, 8]),
            &Tensor::zeros(&[2, 8]),
            &Tensor::zeros(&[8]),
            false,
        )
        .unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_single_step_matches_gate_equations() {
        // D_in = 1, H = 1
        let x = 0.8;
        let (wi, wf, wg, wo) = (0.5, -0.3, 0.9, 0.2);
        let (bi, bf, bg, bo) = (0.1, 1.0, -0.2, 0.0);
        let w_ih = Tensor::new(&[1, 4], vec![wi, wf, wg, wo]).unwrap();
        let w_hh = Tensor::new(&[1, 4], vec![0.4, 0.4, 0.4, 0.4]).unwrap();
        let b = Tensor::vector(&[bi, bf, bg, bo]);
        let (y, _) = lstm_forward(&Tensor::new(&[1, 1], vec![x]).unwrap(), &w_ih, &w_hh, &b, false).unwrap();
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let i = sig(wi * x + bi);
        let g = (wg * x + bg).tanh();
        let o = sig(wo * x + bo);
        let c = i * g; // previous cell is zero
        let expected = o * c.tanh();
        assert!((y.item() - expected).abs() < 1e-15);
    }

    #[test]
    fn lstm_count_formula() {
        assert_eq!(lstm_param_count(12_900, 100), 5_200_400);
        assert_eq!(lstm_param_count(200, 200), 320_800);
    }

    #[test]
    fn concat_and_transpose() {
        let a = Tensor::new(&[2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(&[2, 2, 2], vec![5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3, 2]);
        assert_eq!(c.data(), &[1.0, 2.0, 5.0, 6.0, 7.0, 8.0, 3.0, 4.0, 9.0, 10.0, 11.0, 12.0]);
        let parts = concat_backward(&[a.shape().to_vec(), b.shape().to_vec()], 1, &c);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
        let t = transpose_last2(&Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap()).unwrap();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }
}
