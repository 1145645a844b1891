use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::substrate::Merge;

/// Which parts of the network are present.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[default]
    #[serde(rename = "full")]
    Full,
    /// Feature extraction replaced by flattening the raw window.
    A1,
    /// Recurrent context replaced by a per-window dense layer.
    A2,
    /// No refinement head; only the window-level prediction is trained.
    A3,
}

impl Variant {
    pub fn has_feature_extractor(self) -> bool {
        self != Variant::A1
    }

    pub fn has_recurrent_context(self) -> bool {
        self != Variant::A2
    }

    pub fn has_refinement(self) -> bool {
        self != Variant::A3
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "A1" | "a1" => Ok(Variant::A1),
            "A2" | "a2" => Ok(Variant::A2),
            "A3" | "a3" => Ok(Variant::A3),
            other => Err(Error::arg(format!("unknown variant {other:?} (expected full, A1, A2 or A3)"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Full => "full",
            Variant::A1 => "A1",
            Variant::A2 => "A2",
            Variant::A3 => "A3",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeMode {
    Concat,
    Sum,
}

impl From<MergeMode> for Merge {
    fn from(m: MergeMode) -> Self {
        match m {
            MergeMode::Concat => Merge::Concat,
            MergeMode::Sum => Merge::Sum,
        }
    }
}

/// Network geometry and hyperparameters.
///
/// Defaults reproduce the published per-layer parameter table: 128 CNN
/// channels, kernel 5, window 100, LSTM widths 100 / 200 with the second
/// layer sum-merged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub sensors: usize,
    pub num_classes: usize,
    pub window_length: usize,
    pub cnn_channels: usize,
    pub cnn_kernel: usize,
    pub dilation_low: usize,
    pub dilation_high: usize,
    pub dropout: f64,
    pub pool: usize,
    pub lstm1_hidden: usize,
    pub lstm2_hidden: usize,
    pub lstm2_merge: MergeMode,
    pub refine_channels: usize,
    pub upsample_factor: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            sensors: 9,
            num_classes: 42,
            window_length: 100,
            cnn_channels: 128,
            cnn_kernel: 5,
            dilation_low: 1,
            dilation_high: 4,
            dropout: 0.2,
            pool: 2,
            lstm1_hidden: 100,
            lstm2_hidden: 200,
            lstm2_merge: MergeMode::Sum,
            refine_channels: 128,
            upsample_factor: 2,
        }
    }
}

impl ModelConfig {
    /// The alternative widths from the hyperparameter search (256 CNN
    /// channels, 200 LSTM units in both layers).
    pub fn searched_best() -> Self {
        Self {
            cnn_channels: 256,
            lstm1_hidden: 200,
            lstm2_hidden: 200,
            ..Self::default()
        }
    }

    pub fn pooled_length(&self) -> usize {
        self.window_length / self.pool.max(1)
    }

    /// Width of the context vector per window.
    pub fn context_width(&self) -> usize {
        match self.lstm2_merge {
            MergeMode::Sum => self.lstm2_hidden,
            MergeMode::Concat => 2 * self.lstm2_hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.sensors < 1 {
            return bad("sensors must be >= 1".into());
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        for (name, v) in [
            ("window_length", self.window_length),
            ("cnn_channels", self.cnn_channels),
            ("cnn_kernel", self.cnn_kernel),
            ("dilation_low", self.dilation_low),
            ("dilation_high", self.dilation_high),
            ("pool", self.pool),
            ("lstm1_hidden", self.lstm1_hidden),
            ("lstm2_hidden", self.lstm2_hidden),
            ("refine_channels", self.refine_channels),
            ("upsample_factor", self.upsample_factor),
        ] {
            if v == 0 {
                return bad(format!("{name} must be >= 1"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.window_length < self.pool || !self.window_length.is_multiple_of(self.pool) {
            return bad(format!(
                "window_length {} must be a positive multiple of pool {}",
                self.window_length, self.pool
            ));
        }
        if self.upsample_factor * self.pooled_length() != self.window_length {
            return bad(format!(
                "upsample_factor {} times pooled length {} must equal window_length {}",
                self.upsample_factor,
                self.pooled_length(),
                self.window_length
            ));
        }
        let widest = self.dilation_low.max(self.dilation_high);
        let field = widest * (self.cnn_kernel - 1) + 1;
        if field > self.window_length {
            return bad(format!(
                "receptive field {field} of the first convolution exceeds window_length {}",
                self.window_length
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::searched_best().validate().unwrap();
    }

    #[test]
    fn rejects_inconsistent_geometry() {
        let c = ModelConfig { window_length: 99, ..ModelConfig::default() };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = ModelConfig { upsample_factor: 3, ..ModelConfig::default() };
        assert!(c.validate().is_err());
        let c = ModelConfig { window_length: 8, dilation_high: 4, ..ModelConfig::default() };
        assert!(c.validate().is_err());
        let c = ModelConfig { num_classes: 1, ..ModelConfig::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn variant_parsing() {
        assert_eq!("A2".parse::<Variant>().unwrap(), Variant::A2);
        assert!(matches!("A4".parse::<Variant>(), Err(Error::Argument(_))));
    }
}
