use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::cycle::{Alphabet, Cycle, PAD_LABEL};
use crate::error::{Error, Result};
use crate::substrate::seed::{fork, Stream};
use crate::substrate::Tensor;

/// Standard deviations below this are treated as constant sensors.
const MIN_STD: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Per-sensor mean and population standard deviation over the recorded
    /// timesteps of `cycles`.
    pub fn fit(cycles: &[Cycle]) -> Result<Self> {
        let first = cycles
            .first()
            .ok_or_else(|| Error::arg("normalisation statistics need at least one training cycle"))?;
        let s = first.num_sensors();
        let mut sum = vec![0.0; s];
        let mut count = 0usize;
        for c in cycles {
            if c.num_sensors() != s {
                return Err(Error::Data(format!("cycle {} has {} sensors, expected {s}", c.id, c.num_sensors())));
            }
            for (sensor, acc) in sum.iter_mut().enumerate() {
                *acc += c.sensor(sensor).iter().zip(&c.mask).filter(|(_, &m)| m).map(|(v, _)| v).sum::<f64>();
            }
            count += c.real_len();
        }
        if count == 0 {
            return Err(Error::arg("training cycles contain no recorded timesteps"));
        }
        let mean: Vec<f64> = sum.iter().map(|v| v / count as f64).collect();
        let mut sq = vec![0.0; s];
        for c in cycles {
            for (sensor, acc) in sq.iter_mut().enumerate() {
                *acc += c
                    .sensor(sensor)
                    .iter()
                    .zip(&c.mask)
                    .filter(|(_, &m)| m)
                    .map(|(v, _)| (v - mean[sensor]).powi(2))
                    .sum::<f64>();
            }
        }
        let std = sq.iter().map(|v| (v / count as f64).sqrt()).collect();
        Ok(Self { mean, std })
    }

    /// `(x - mean) / std`; sensors with (near) zero spread map to 0.
    pub fn apply(&self, cycle: &Cycle) -> Result<Cycle> {
        if cycle.num_sensors() != self.mean.len() {
            return Err(Error::Data(format!(
                "cycle {} has {} sensors, statistics cover {}",
                cycle.id,
                cycle.num_sensors(),
                self.mean.len()
            )));
        }
        let t = cycle.len();
        let mut out = cycle.clone();
        for (s, chunk) in out.sensors.data_mut().chunks_mut(t).enumerate() {
            let (m, sd) = (self.mean[s], self.std[s]);
            for v in chunk {
                *v = if sd < MIN_STD { 0.0 } else { (*v - m) / sd };
            }
        }
        Ok(out)
    }
}

/// Cycles partitioned into training, validation and test sets.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Cycle>,
    pub val: Vec<Cycle>,
    pub test: Vec<Cycle>,
    pub alphabet: Alphabet,
    /// Set once [`zscore_normalize`] has been applied.
    pub stats: Option<NormStats>,
}

impl DatasetSplit {
    /// Builds a split from explicit partitions; the alphabet covers all of them.
    pub fn from_parts(train: Vec<Cycle>, val: Vec<Cycle>, test: Vec<Cycle>) -> Self {
        let alphabet = Alphabet::from_cycles(train.iter().chain(&val).chain(&test));
        Self {
            train,
            val,
            test,
            alphabet,
            stats: None,
        }
    }

    pub fn all(&self) -> impl Iterator<Item = &Cycle> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }

    pub fn map_cycles(self, mut f: impl FnMut(Cycle) -> Result<Cycle>) -> Result<Self> {
        let mut apply = |v: Vec<Cycle>| v.into_iter().map(&mut f).collect::<Result<Vec<_>>>();
        Ok(Self {
            train: apply(self.train)?,
            val: apply(self.val)?,
            test: apply(self.test)?,
            alphabet: self.alphabet,
            stats: self.stats,
        })
    }
}

/// Sizes `(train, val, test)` for `n` cycles. Validation and test sizes are
/// rounded down (at least one each when their ratio is positive); the
/// remainder goes to training.
pub fn split_sizes(n: usize, ratios: [f64; 3]) -> Result<(usize, usize, usize)> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::arg(format!("split ratios {ratios:?} must be in [0, 1] and sum to 1")));
    }
    let parts = ratios.iter().filter(|&&r| r > 0.0).count();
    if n < parts {
        return Err(Error::arg(format!("{n} cycles cannot fill {parts} split parts")));
    }
    let part = |r: f64| if r > 0.0 { ((n as f64 * r + 1e-9).floor() as usize).max(1) } else { 0 };
    let (val, test) = (part(ratios[1]), part(ratios[2]));
    if val + test >= n && ratios[0] > 0.0 {
        return Err(Error::arg(format!("{n} cycles leave no training data")));
    }
    Ok((n - val - test, val, test))
}

/// Seeded shuffle of `cycles` into train / val / test.
pub fn split_dataset(cycles: Vec<Cycle>, ratios: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    let mut seen = std::collections::HashSet::new();
    if let Some(dup) = cycles.iter().find(|c| !seen.insert(c.id.as_str())) {
        return Err(Error::Data(format!("duplicate cycle id {:?}", dup.id)));
    }
    let (n_train, n_val, _) = split_sizes(cycles.len(), ratios)?;
    let mut cycles = cycles;
    cycles.shuffle(&mut fork(seed, Stream::Split));
    let test = cycles.split_off(n_train + n_val);
    let val = cycles.split_off(n_train);
    Ok(DatasetSplit::from_parts(cycles, val, test))
}

/// Standardises every split with statistics computed on the training split only.
pub fn zscore_normalize(split: DatasetSplit) -> Result<DatasetSplit> {
    if split.train.is_empty() {
        return Err(Error::arg("cannot normalise without training cycles"));
    }
    let stats = NormStats::fit(&split.train)?;
    let mut out = split.map_cycles(|c| stats.apply(&c))?;
    out.stats = Some(stats);
    Ok(out)
}

/// Smallest multiple of `window` that is at least `len`.
pub fn padded_length(len: usize, window: usize) -> usize {
    len.div_ceil(window) * window
}

/// Extends each sensor with the given values up to `target_len` timesteps.
/// Appended steps get the [`PAD_LABEL`] and a `false` mask.
pub fn pad_with_values(cycle: &Cycle, target_len: usize, values: &[f64]) -> Result<Cycle> {
    let t = cycle.len();
    if target_len < t {
        return Err(Error::arg(format!(
            "cycle {} has {t} timesteps, more than the padding target {target_len}",
            cycle.id
        )));
    }
    if values.len() != cycle.num_sensors() {
        return Err(Error::shape("one padding value per sensor is required"));
    }
    let s = cycle.num_sensors();
    let mut data = Vec::with_capacity(s * target_len);
    for (sensor, &fill) in values.iter().enumerate() {
        data.extend_from_slice(cycle.sensor(sensor));
        data.extend(std::iter::repeat_n(fill, target_len - t));
    }
    let mut labels = cycle.labels.clone();
    labels.resize(target_len, PAD_LABEL);
    let mut mask = cycle.mask.clone();
    mask.resize(target_len, false);
    Ok(Cycle {
        id: cycle.id.clone(),
        sensors: Tensor::new(&[s, target_len], data)?,
        labels,
        sample_rate_hz: cycle.sample_rate_hz,
        mask,
    })
}

/// Pads with each sensor's own minimum over this cycle.
pub fn pad_min_value(cycle: &Cycle, target_len: usize) -> Result<Cycle> {
    let minima: Vec<f64> = (0..cycle.num_sensors())
        .map(|s| cycle.sensor(s).iter().copied().fold(f64::INFINITY, f64::min))
        .collect();
    pad_with_values(cycle, target_len, &minima)
}

/// Per-sensor minima over a set of cycles (for global-minimum padding).
pub fn global_minima<'a>(cycles: impl IntoIterator<Item = &'a Cycle>) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::new();
    for c in cycles {
        if out.is_empty() {
            out = vec![f64::INFINITY; c.num_sensors()];
        }
        for (s, m) in out.iter_mut().enumerate() {
            *m = c.sensor(s).iter().copied().fold(*m, f64::min);
        }
    }
    out
}

/// Padding value per sensor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadMode {
    /// Each cycle's own minimum.
    #[default]
    CycleMin,
    /// Minimum over the training split.
    GlobalMin,
}

/// A split whose cycles all share one length, a multiple of the window.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedSplit {
    pub split: DatasetSplit,
    pub padded_length: usize,
    /// Fixed padding values used ([`PadMode::GlobalMin`] only).
    pub pad_values: Option<Vec<f64>>,
}

/// Pads every cycle of `split` to the longest cycle rounded up to `window`.
pub fn pad_split(split: DatasetSplit, window: usize, mode: PadMode) -> Result<PaddedSplit> {
    if window == 0 {
        return Err(Error::arg("window length must be positive"));
    }
    let longest = split.all().map(Cycle::len).max().unwrap_or(0);
    let target = padded_length(longest, window);
    let pad_values = match mode {
        PadMode::CycleMin => None,
        PadMode::GlobalMin => Some(global_minima(&split.train)),
    };
    let split = split.map_cycles(|c| match &pad_values {
        Some(v) => pad_with_values(&c, target, v),
        None => pad_min_value(&c, target),
    })?;
    Ok(PaddedSplit {
        split,
        padded_length: target,
        pad_values,
    })
}

/// One-hot `[T × C]` encoding. Padding rows are all zero (they are masked
/// out of every loss and metric).
pub fn one_hot(labels: &[i64], alphabet: &Alphabet) -> Result<Tensor> {
    if alphabet.is_empty() || labels.is_empty() {
        return Err(Error::arg("one-hot encoding needs labels and a non-empty alphabet"));
    }
    let c = alphabet.len();
    let mut data = vec![0.0; labels.len() * c];
    for (t, &l) in labels.iter().enumerate() {
        match alphabet.index(l) {
            Some(i) => data[t * c + i] = 1.0,
            None if l == PAD_LABEL => {}
            None => return Err(Error::Data(format!("label code {l} at timestep {t} is not in the alphabet"))),
        }
    }
    Tensor::new(&[labels.len(), c], data)
}

/// Raw label codes from the row-wise argmax of a `[T × C]` distribution.
pub fn decode(probs: &Tensor, alphabet: &Alphabet) -> Vec<i64> {
    probs.argmax_rows().into_iter().map(|i| alphabet.code(i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cycle(id: &str, rows: &[&[f64]], labels: &[i64]) -> Cycle {
        let t = labels.len();
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Cycle::new(id, Tensor::new(&[rows.len(), t], data).unwrap(), labels.to_vec(), 100.0).unwrap()
    }

    fn ids(v: &[Cycle]) -> Vec<String> {
        v.iter().map(|c| c.id.clone()).collect()
    }

    fn many(n: usize) -> Vec<Cycle> {
        (0..n).map(|i| cycle(&format!("c{i}"), &[&[i as f64, 1.0]], &[1, (i % 3) as i64 + 1])).collect()
    }

    #[test]
    fn forty_cycles_split_24_8_8() {
        let s = split_dataset(many(40), [0.6, 0.2, 0.2], 7).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (24, 8, 8));
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let a = split_dataset(many(17), [0.6, 0.2, 0.2], 3).unwrap();
        let b = split_dataset(many(17), [0.6, 0.2, 0.2], 3).unwrap();
        assert_eq!(a, b);
        let mut all: Vec<String> = ids(&a.train).into_iter().chain(ids(&a.val)).chain(ids(&a.test)).collect();
        all.sort();
        let mut expected: Vec<String> = (0..17).map(|i| format!("c{i}")).collect();
        expected.sort();
        assert_eq!(all, expected);
        assert_eq!(a.alphabet.codes(), &[1, 2, 3]);
    }

    #[test]
    fn too_few_cycles() {
        assert!(matches!(split_dataset(many(2), [0.6, 0.2, 0.2], 0), Err(Error::Argument(_))));
        assert!(split_sizes(10, [0.5, 0.2, 0.2]).is_err());
    }

    #[test]
    fn normalisation_uses_train_statistics() {
        let train = vec![cycle("a", &[&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]], &[1, 1, 2])];
        let val = vec![cycle("b", &[&[4.0, 4.0, 4.0], &[7.0, 5.0, 3.0]], &[1, 1, 1])];
        let s = zscore_normalize(DatasetSplit::from_parts(train, val, vec![])).unwrap();
        let sd = (2.0f64 / 3.0).sqrt();
        assert!((s.val[0].sensor(0)[0] - 2.0 / sd).abs() < 1e-12);
        // constant training sensor maps to zero everywhere
        assert!(s.train[0].sensor(1).iter().chain(s.val[0].sensor(1)).all(|&v| v == 0.0));
        let stats = s.stats.as_ref().unwrap();
        assert_eq!(stats.mean, vec![2.0, 5.0]);
    }

    #[test]
    fn empty_training_split_is_rejected() {
        let s = DatasetSplit::from_parts(vec![], many(2), vec![]);
        assert!(matches!(zscore_normalize(s), Err(Error::Argument(_))));
    }

    #[test]
    fn padding_with_cycle_minimum() {
        let c = cycle("p", &[&[3.0, 1.0, 2.0]], &[4, 4, 5]);
        let p = pad_min_value(&c, 5).unwrap();
        assert_eq!(p.sensor(0), &[3.0, 1.0, 2.0, 1.0, 1.0]);
        assert_eq!(p.labels, vec![4, 4, 5, PAD_LABEL, PAD_LABEL]);
        assert_eq!(p.real_len(), 3);
        assert_eq!(pad_min_value(&c, 3).unwrap(), c);
        assert!(matches!(pad_min_value(&c, 2), Err(Error::Argument(_))));
        assert_eq!(padded_length(1101, 50), 1150);
        assert_eq!(padded_length(1100, 50), 1100);
    }

    #[test]
    fn one_hot_examples() {
        let a = Alphabet::from_codes([0, 1, 2]);
        let t = one_hot(&[0, 2], &a).unwrap();
        assert_eq!(t.data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert!(matches!(one_hot(&[9], &a), Err(Error::Data(_))));
        let padded = one_hot(&[1, PAD_LABEL], &a).unwrap();
        assert_eq!(padded.row(1), &[0.0, 0.0, 0.0]);
    }

    proptest! {
        #[test]
        fn one_hot_decodes_back(labels in proptest::collection::vec(prop::sample::select(vec![3i64, 8, 11, 40]), 1..60)) {
            let a = Alphabet::from_codes([3, 8, 11, 40]);
            let t = one_hot(&labels, &a).unwrap();
            prop_assert!((0..labels.len()).all(|r| t.row(r).iter().sum::<f64>() == 1.0));
            prop_assert_eq!(decode(&t, &a), labels);
        }

        #[test]
        fn normalisation_is_idempotent(vals in proptest::collection::vec(-50.0f64..50.0, 6..40)) {
            let n = vals.len() / 2;
            let c = cycle("x", &[&vals[..n], &vals[n..2 * n]], &vec![1; n]);
            let once = zscore_normalize(DatasetSplit::from_parts(vec![c], vec![], vec![])).unwrap();
            let twice = zscore_normalize(once.clone()).unwrap();
            for (a, b) in once.train[0].sensors.data().iter().zip(twice.train[0].sensors.data()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
            let stats = NormStats::fit(&once.train).unwrap();
            for s in 0..2 {
                if once.stats.as_ref().unwrap().std[s] >= 1e-12 {
                    prop_assert!(stats.mean[s].abs() < 1e-9);
                    prop_assert!((stats.std[s] - 1.0).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn padding_keeps_the_recorded_prefix(vals in proptest::collection::vec(-5.0f64..5.0, 1..30), extra in 0usize..20) {
            let c = cycle("q", &[&vals], &vec![1; vals.len()]);
            let p = pad_min_value(&c, vals.len() + extra).unwrap();
            prop_assert_eq!(&p.sensor(0)[..vals.len()], &vals[..]);
            prop_assert_eq!(p.real_len(), vals.len());
        }
    }
}
