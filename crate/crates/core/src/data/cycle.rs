use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::substrate::Tensor;

/// Label code reserved for padded timesteps. Never part of a learned alphabet
/// unless padding is deliberately left unmasked.
pub const PAD_LABEL: i64 = -1;

/// One recorded process cycle: `S` sensor channels over `T` timesteps with a
/// raw integer label per timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct Cycle {
    pub id: String,
    /// `[S × T]`
    pub sensors: Tensor,
    pub labels: Vec<i64>,
    pub sample_rate_hz: f64,
    /// `true` for recorded timesteps, `false` for padding.
    pub mask: Vec<bool>,
}

impl Cycle {
    pub fn new(id: impl Into<String>, sensors: Tensor, labels: Vec<i64>, sample_rate_hz: f64) -> Result<Self> {
        let id = id.into();
        if sensors.rank() != 2 || sensors.shape()[1] != labels.len() {
            return Err(Error::Data(format!(
                "cycle {id}: sensors {:?} do not match {} labels",
                sensors.shape(),
                labels.len()
            )));
        }
        let mask = vec![true; labels.len()];
        Ok(Self {
            id,
            sensors,
            labels,
            sample_rate_hz,
            mask,
        })
    }

    pub fn num_sensors(&self) -> usize {
        self.sensors.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Number of recorded (unpadded) timesteps.
    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn sensor(&self, s: usize) -> &[f64] {
        self.sensors.row(s)
    }
}

/// Dense class indices for raw label codes. Codes are kept sorted so the
/// mapping is independent of the order in which labels were seen.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alphabet {
    codes: Vec<i64>,
}

impl Alphabet {
    pub fn from_codes(codes: impl IntoIterator<Item = i64>) -> Self {
        let mut codes: Vec<i64> = codes.into_iter().collect();
        codes.sort_unstable();
        codes.dedup();
        Self { codes }
    }

    /// Alphabet of every non-padding label in `cycles`.
    pub fn from_cycles<'a>(cycles: impl IntoIterator<Item = &'a Cycle>) -> Self {
        Self::from_codes(
            cycles
                .into_iter()
                .flat_map(|c| c.labels.iter().copied())
                .filter(|&l| l != PAD_LABEL),
        )
    }

    /// Copy that also treats [`PAD_LABEL`] as an ordinary class.
    pub fn with_pad(&self) -> Self {
        Self::from_codes(self.codes.iter().copied().chain([PAD_LABEL]))
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn codes(&self) -> &[i64] {
        &self.codes
    }

    pub fn index(&self, code: i64) -> Option<usize> {
        self.codes.binary_search(&code).ok()
    }

    pub fn code(&self, index: usize) -> i64 {
        self.codes[index]
    }

    pub fn contains(&self, code: i64) -> bool {
        self.index(code).is_some()
    }

    /// Dense indices for a label sequence. Padding maps to class 0 and must
    /// be masked by the caller.
    pub fn encode(&self, labels: &[i64]) -> Result<Vec<usize>> {
        labels
            .iter()
            .map(|&l| match self.index(l) {
                Some(i) => Ok(i),
                None if l == PAD_LABEL => Ok(0),
                None => Err(Error::Data(format!("label {l} is not in the alphabet"))),
            })
            .collect()
    }
}
