use crate::error::{Error, Result};
use crate::substrate::Tensor;

/// A cycle cut into `n` non-overlapping windows, stored as `[N × S × L]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowBatch {
    pub windows: Tensor,
    pub n: usize,
    pub origin_length: usize,
}

impl WindowBatch {
    pub fn window_length(&self) -> usize {
        self.windows.shape()[2]
    }
}

/// Splits an `[S × T]` cycle into windows of length `l`. `T` must already be
/// a multiple of `l`.
pub fn split_windows(cycle: &Tensor, l: usize) -> Result<WindowBatch> {
    let [s, t] = *cycle.shape() else {
        return Err(Error::shape(format!("cycle must be [S×T], got {:?}", cycle.shape())));
    };
    if l == 0 || t % l != 0 {
        return Err(Error::shape(format!(
            "cycle length {t} is not a multiple of window length {l}; pad the cycle first"
        )));
    }
    let n = t / l;
    let x = cycle.data();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..n {
        for sensor in 0..s {
            out.extend_from_slice(&x[sensor * t + i * l..sensor * t + (i + 1) * l]);
        }
    }
    Ok(WindowBatch {
        windows: Tensor::new(&[n, s, l], out)?,
        n,
        origin_length: t,
    })
}

/// Inverse of [`split_windows`] on the sensor axis: `[N × S × L] → [S × T]`.
pub fn unsplit_windows(batch: &WindowBatch) -> Result<Tensor> {
    let [n, s, l] = *batch.windows.shape() else {
        return Err(Error::shape("window batch must be rank 3"));
    };
    let t = n * l;
    let mut out = vec![0.0; s * t];
    for (chunk_idx, chunk) in batch.windows.data().chunks(l).enumerate() {
        let (i, sensor) = (chunk_idx / s, chunk_idx % s);
        out[sensor * t + i * l..sensor * t + (i + 1) * l].copy_from_slice(chunk);
    }
    Tensor::new(&[s, t], out)
}

/// Concatenates per-window predictions `[N × L × C]` along time into `[T × C]`.
pub fn merge_windows(window_preds: &Tensor) -> Result<Tensor> {
    let [n, l, c] = *window_preds.shape() else {
        return Err(Error::shape(format!(
            "window predictions must be [N×L×C], got {:?}",
            window_preds.shape()
        )));
    };
    window_preds.reshape(&[n * l, c])
}
