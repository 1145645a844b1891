//! Closed-form trainable parameter counts.

use serde::Serialize;

use super::config::{MergeMode, ModelConfig, Variant};
use crate::substrate::ops::lstm_param_count;

/// The dimensions that determine parameter counts. Normally derived from a
/// [`ModelConfig`], but every field may be overridden to reproduce a
/// reference table whose geometry differs from the derived one.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerDims {
    pub sensors: usize,
    pub cnn_channels: usize,
    pub kernel: usize,
    /// Width of the flattened per-window feature vector.
    pub flat_features: usize,
    pub lstm1_hidden: usize,
    pub lstm2_hidden: usize,
    pub lstm2_merge: MergeMode,
    pub num_classes: usize,
    pub refine_channels: usize,
    /// Input channels of the first refinement convolution
    /// (unflattened features + context).
    pub refine_input: usize,
}

impl LayerDims {
    pub fn from_config(cfg: &ModelConfig, variant: Variant) -> Self {
        let (flat, unflat_channels) = if variant.has_feature_extractor() {
            (2 * cfg.cnn_channels * cfg.pooled_length(), 2 * cfg.cnn_channels)
        } else {
            (cfg.sensors * cfg.window_length, cfg.sensors)
        };
        Self {
            sensors: cfg.sensors,
            cnn_channels: cfg.cnn_channels,
            kernel: cfg.cnn_kernel,
            flat_features: flat,
            lstm1_hidden: cfg.lstm1_hidden,
            lstm2_hidden: cfg.lstm2_hidden,
            lstm2_merge: cfg.lstm2_merge,
            num_classes: cfg.num_classes,
            refine_channels: cfg.refine_channels,
            refine_input: unflat_channels + cfg.context_width(),
        }
    }

    /// Dimensions of the published reference network: nine sensors, a
    /// 12,900-wide feature vector, LSTM 100 / 200 (sum), 42 classes and a
    /// 328-channel refinement input.
    pub fn reference() -> Self {
        Self {
            sensors: 9,
            cnn_channels: 128,
            kernel: 5,
            flat_features: 12_900,
            lstm1_hidden: 100,
            lstm2_hidden: 200,
            lstm2_merge: MergeMode::Sum,
            num_classes: 42,
            refine_channels: 128,
            refine_input: 328,
        }
    }

    pub fn context_width(&self) -> usize {
        match self.lstm2_merge {
            MergeMode::Sum => self.lstm2_hidden,
            MergeMode::Concat => 2 * self.lstm2_hidden,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerCount {
    /// Parameter-name prefix of the layer in a constructed model.
    pub name: String,
    /// Human-readable layer description.
    pub kind: String,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub layers: Vec<LayerCount>,
    pub total: usize,
}

impl ParamCount {
    pub fn get(&self, name: &str) -> Option<usize> {
        self.layers.iter().find(|l| l.name == name).map(|l| l.count)
    }
}

fn conv(c_in: usize, c_out: usize, k: usize) -> usize {
    k * c_in * c_out + c_out
}

fn dense(d_in: usize, d_out: usize) -> usize {
    (d_in + 1) * d_out
}

/// Per-layer and total trainable parameter counts for a variant.
pub fn count_params(dims: &LayerDims, variant: Variant) -> ParamCount {
    let mut layers = Vec::new();
    let mut push = |name: String, kind: String, count: usize| layers.push(LayerCount { name, kind, count });
    let (ch, k) = (dims.cnn_channels, dims.kernel);

    if variant.has_feature_extractor() {
        for stream in ["a", "b"] {
            push(format!("fe.{stream}.conv0"), format!("Conv(ch={ch},k={k})"), conv(dims.sensors, ch, k));
            for i in 1..4 {
                push(format!("fe.{stream}.conv{i}"), format!("Conv(ch={ch},k={k})"), conv(ch, ch, k));
            }
        }
    }

    let ctx = dims.context_width();
    if variant.has_recurrent_context() {
        let l1 = dims.lstm1_hidden;
        for dir in ["fwd", "bwd"] {
            push(format!("ctx.l1.{dir}"), format!("LSTM({l1})"), lstm_param_count(dims.flat_features, l1));
        }
        let l2 = dims.lstm2_hidden;
        for dir in ["fwd", "bwd"] {
            push(format!("ctx.l2.{dir}"), format!("LSTM({l2})"), lstm_param_count(2 * l1, l2));
        }
    } else {
        push("ctx.dense".into(), format!("Dense({ctx})"), dense(dims.flat_features, ctx));
    }

    push("head.inter".into(), format!("Dense({})", dims.num_classes), dense(ctx, dims.num_classes));

    if variant.has_refinement() {
        let rc = dims.refine_channels;
        push("refine.conv0".into(), format!("Conv(ch={rc},k={k})"), conv(dims.refine_input, rc, k));
        push("refine.conv1".into(), format!("Conv(ch={rc},k={k})"), conv(rc, rc, k));
        push("head.final".into(), format!("Dense({})", dims.num_classes), dense(rc, dims.num_classes));
    }

    let total = layers.iter().map(|l| l.count).sum();
    ParamCount { layers, total }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_table_reproduced() {
        let c = count_params(&LayerDims::reference(), Variant::Full);
        let counts: Vec<usize> = c.layers.iter().map(|l| l.count).collect();
        assert_eq!(
            counts,
            vec![
                5_888, 82_048, 82_048, 82_048, 5_888, 82_048, 82_048, 82_048, 5_200_400, 5_200_400, 320_800,
                320_800, 8_442, 210_048, 82_048, 5_418
            ]
        );
        assert_eq!(c.total, 11_852_420);
    }

    #[test]
    fn doubling_classes_touches_only_heads() {
        let base = LayerDims::reference();
        let doubled = LayerDims { num_classes: 84, ..base.clone() };
        let a = count_params(&base, Variant::Full);
        let b = count_params(&doubled, Variant::Full);
        for (x, y) in a.layers.iter().zip(&b.layers) {
            let is_head = x.name.starts_with("head.");
            assert_eq!(x.count != y.count, is_head, "{}", x.name);
        }
    }

    #[test]
    fn a3_drops_refinement() {
        let c = count_params(&LayerDims::reference(), Variant::A3);
        assert!(c.layers.iter().all(|l| !l.name.starts_with("refine") && l.name != "head.final"));
        assert_eq!(c.total, 11_852_420 - 210_048 - 82_048 - 5_418);
    }
}
