//! Synthetic multi-phase cycles with mirrored states.
//!
//! A mirrored pair is two states that emit from identical generating
//! parameters. Only their order inside the cycle tells them apart.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::cycle::Cycle;
use crate::error::{Error, Result};
use crate::substrate::seed::{fork_indexed, Stream};
use crate::substrate::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateSignature {
    /// Per-sensor mean level.
    pub mean: Vec<f64>,
    /// Per-sensor rise over one segment; empty means flat.
    #[serde(default)]
    pub slope: Vec<f64>,
}

impl StateSignature {
    pub fn flat(mean: Vec<f64>) -> Self {
        Self { mean, slope: Vec::new() }
    }

    fn slope(&self, s: usize) -> f64 {
        self.slope.get(s).copied().unwrap_or(0.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub sensors: usize,
    pub states: usize,
    /// `(first, second)`: the template must visit `first` before `second`.
    pub mirrored_pairs: Vec<[usize; 2]>,
    pub signatures: Vec<StateSignature>,
    /// Inclusive segment length range in timesteps.
    pub duration_range: [usize; 2],
    /// Optional per-state override of `duration_range`.
    pub state_durations: Vec<[usize; 2]>,
    pub noise_std: f64,
    pub cycles: usize,
    /// State index of each segment.
    pub template: Vec<usize>,
    /// How many times the template is played back to back.
    pub repeats: usize,
    pub sample_rate_hz: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self::mirror_v1()
    }
}

impl SynthSpec {
    /// The default benchmark: three sensors, six states, mirrored pairs
    /// (1, 2) and (3, 4). Every transition into or out of a mirrored state
    /// also exists for its twin, so a window-local model cannot tell them
    /// apart.
    pub fn mirror_v1() -> Self {
        let sig = |mean: [f64; 3], slope: [f64; 3]| StateSignature {
            mean: mean.to_vec(),
            slope: slope.to_vec(),
        };
        let pair_a = sig([1.0, -0.5, 0.5], [0.0; 3]);
        let pair_b = sig([-1.0, 1.0, 0.0], [0.0, 0.0, 0.8]);
        Self {
            sensors: 3,
            states: 6,
            mirrored_pairs: vec![[1, 2], [3, 4]],
            signatures: vec![
                sig([0.0; 3], [0.0; 3]),
                pair_a.clone(),
                pair_a,
                pair_b.clone(),
                pair_b,
                sig([0.5, 0.5, -1.0], [0.0; 3]),
            ],
            duration_range: [40, 120],
            state_durations: Vec::new(),
            noise_std: 0.1,
            cycles: 40,
            template: vec![0, 1, 5, 3, 0, 2, 5, 4, 0, 5],
            repeats: 1,
            sample_rate_hz: 100.0,
            seed: 0,
        }
    }

    pub fn durations(&self, state: usize) -> [usize; 2] {
        self.state_durations.get(state).copied().unwrap_or(self.duration_range)
    }

    /// Segment states in playback order.
    pub fn sequence(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.repeats).flat_map(move |_| self.template.iter().copied())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.sensors == 0 || self.states == 0 || self.cycles == 0 || self.repeats == 0 {
            return bad("sensors, states, cycles and repeats must be positive".into());
        }
        if self.signatures.len() != self.states {
            return bad(format!("{} signatures for {} states", self.signatures.len(), self.states));
        }
        for (k, sig) in self.signatures.iter().enumerate() {
            if sig.mean.len() != self.sensors || !(sig.slope.is_empty() || sig.slope.len() == self.sensors) {
                return bad(format!("signature of state {k} does not have {} sensors", self.sensors));
            }
            if sig.mean.iter().chain(&sig.slope).any(|v| !v.is_finite()) {
                return bad(format!("signature of state {k} is not finite"));
            }
        }
        if !(self.state_durations.is_empty() || self.state_durations.len() == self.states) {
            return bad("state_durations must be empty or list every state".into());
        }
        for k in 0..self.states {
            let [lo, hi] = self.durations(k);
            if lo == 0 || lo > hi {
                return bad(format!("duration range [{lo}, {hi}] of state {k} is invalid"));
            }
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return bad(format!("noise_std {} must be finite and non-negative", self.noise_std));
        }
        if !(self.sample_rate_hz.is_finite() && self.sample_rate_hz > 0.0) {
            return bad("sample_rate_hz must be positive".into());
        }
        if self.template.is_empty() {
            return bad("template is empty".into());
        }
        if let Some(&s) = self.template.iter().find(|&&s| s >= self.states) {
            return bad(format!("template references undefined state {s}"));
        }
        let seq: Vec<usize> = self.sequence().collect();
        if seq.windows(2).any(|w| w[0] == w[1]) {
            return bad("template repeats a state in consecutive segments".into());
        }
        for &[a, b] in &self.mirrored_pairs {
            if a >= self.states || b >= self.states || a == b {
                return bad(format!("mirrored pair ({a}, {b}) is invalid"));
            }
            if self.signatures[a] != self.signatures[b] || self.durations(a) != self.durations(b) {
                return bad(format!("mirrored pair ({a}, {b}) must share generating parameters"));
            }
            let first = |s| self.template.iter().position(|&x| x == s);
            match (first(a), first(b)) {
                (Some(pa), Some(pb)) if pa < pb => {}
                _ => return bad(format!("template must visit state {a} before state {b}")),
            }
        }
        Ok(())
    }
}

/// Generates `spec.cycles` labelled cycles; label codes are state indices.
/// Cycle `i` draws from its own random stream, so it does not depend on how
/// many cycles are generated.
pub fn synth_generate(spec: &SynthSpec) -> Result<Vec<Cycle>> {
    spec.validate()?;
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let width = (spec.cycles - 1).to_string().len();
    (0..spec.cycles)
        .map(|i| {
            let mut rng = fork_indexed(spec.seed, Stream::Synth, i as u64);
            let mut columns = vec![Vec::new(); spec.sensors];
            let mut labels = Vec::new();
            for state in spec.sequence() {
                let [lo, hi] = spec.durations(state);
                let len = rng.random_range(lo..=hi);
                let sig = &spec.signatures[state];
                for (s, col) in columns.iter_mut().enumerate() {
                    for t in 0..len {
                        let mut v = sig.mean[s] + sig.slope(s) * (t as f64 / len as f64);
                        if spec.noise_std > 0.0 {
                            v += noise.sample(&mut rng);
                        }
                        col.push(v);
                    }
                }
                labels.extend(std::iter::repeat_n(state as i64, len));
            }
            let t = labels.len();
            let sensors = Tensor::new(&[spec.sensors, t], columns.concat())?;
            Cycle::new(format!("synth_{i:0width$}"), sensors, labels, spec.sample_rate_hz)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn runs(labels: &[i64]) -> Vec<(i64, usize, usize)> {
        let mut out: Vec<(i64, usize, usize)> = Vec::new();
        for (t, &l) in labels.iter().enumerate() {
            match out.last_mut() {
                Some((prev, _, len)) if *prev == l => *len += 1,
                _ => out.push((l, t, 1)),
            }
        }
        out
    }

    #[test]
    fn default_spec_is_valid() {
        let spec = SynthSpec::mirror_v1();
        spec.validate().unwrap();
        let cycles = synth_generate(&spec).unwrap();
        assert_eq!(cycles.len(), 40);
        assert!(cycles.iter().all(|c| c.num_sensors() == 3));
    }

    #[test]
    fn deterministic_for_a_seed() {
        let spec = SynthSpec { cycles: 3, ..SynthSpec::mirror_v1() };
        assert_eq!(synth_generate(&spec).unwrap(), synth_generate(&spec).unwrap());
        let other = SynthSpec { seed: 1, ..spec.clone() };
        assert_ne!(synth_generate(&spec).unwrap(), synth_generate(&other).unwrap());
    }

    #[test]
    fn run_lengths_follow_template_and_range() {
        let spec = SynthSpec::mirror_v1();
        for c in synth_generate(&spec).unwrap() {
            let r = runs(&c.labels);
            assert_eq!(r.iter().map(|x| x.0 as usize).collect::<Vec<_>>(), spec.template);
            assert!(r.iter().all(|&(_, _, len)| (40..=120).contains(&len)));
        }
    }

    #[test]
    fn noiseless_single_state_is_constant() {
        let spec = SynthSpec {
            sensors: 2,
            states: 1,
            mirrored_pairs: vec![],
            signatures: vec![StateSignature::flat(vec![0.25, -3.0])],
            noise_std: 0.0,
            cycles: 2,
            template: vec![0],
            ..SynthSpec::mirror_v1()
        };
        for c in synth_generate(&spec).unwrap() {
            assert!(c.sensor(0).iter().all(|&v| v == 0.25));
            assert!(c.sensor(1).iter().all(|&v| v == -3.0));
        }
    }

    #[test]
    fn noiseless_mirrored_segments_are_identical() {
        let spec = SynthSpec {
            noise_std: 0.0,
            duration_range: [60, 60],
            cycles: 2,
            ..SynthSpec::mirror_v1()
        };
        for c in synth_generate(&spec).unwrap() {
            let r = runs(&c.labels);
            for &[a, b] in &spec.mirrored_pairs {
                let seg = |state: usize| {
                    let &(_, start, len) = r.iter().find(|x| x.0 == state as i64).unwrap();
                    (0..3).map(|s| c.sensor(s)[start..start + len].to_vec()).collect::<Vec<_>>()
                };
                assert_eq!(seg(a), seg(b));
            }
        }
    }

    #[test]
    fn invalid_specs_are_config_errors() {
        let base = SynthSpec::mirror_v1();
        let mut undefined = base.clone();
        undefined.template.push(6);
        let mut reversed = base.clone();
        reversed.mirrored_pairs = vec![[2, 1]];
        let mut unequal = base.clone();
        unequal.signatures[2].mean[0] = 1.5;
        let mut repeated = base.clone();
        repeated.template = vec![0, 0, 1];
        for spec in [undefined, reversed, unequal, repeated] {
            assert!(matches!(synth_generate(&spec), Err(Error::Config(_))));
        }
    }

    #[test]
    fn spec_from_toml() {
        let spec: SynthSpec = toml::from_str("noise_std = 0.5\ncycles = 4\nseed = 9\n").unwrap();
        assert_eq!(spec.cycles, 4);
        assert_eq!(spec.template, SynthSpec::mirror_v1().template);
        assert!(toml::from_str::<SynthSpec>("nosie = 1").is_err());
    }
}
