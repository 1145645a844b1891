//! Segmentation metrics: timestep accuracy, macro-F1 and changepoint
//! precision / recall with a proximity tolerance.
//!
//! Labels are dense class indices `0..C`. A mask selects the timesteps that
//! are evaluated (`true` = real data); `None` evaluates every timestep.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default proximity tolerance in timesteps.
pub const DEFAULT_TOLERANCE: i64 = 20;

/// A transition between two distinct classes; `t` is the first timestep of
/// the new segment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Changepoint {
    pub t: usize,
    pub from: usize,
    pub to: usize,
}

impl Changepoint {
    fn equivalent(&self, other: &Changepoint) -> bool {
        self.from == other.from && self.to == other.to
    }

    fn distance(&self, other: &Changepoint) -> usize {
        self.t.abs_diff(other.t)
    }
}

/// How predicted and ground-truth changepoints are paired.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Matching {
    /// Each side counts a changepoint as matched if any equivalent
    /// counterpart lies within the tolerance; counterparts may be shared.
    #[default]
    Independent,
    /// One-to-one pairing, greedily taking the closest pairs first.
    Exclusive,
}

/// F1 assigned to a class that appears in neither prediction nor truth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AbsentClass {
    #[default]
    Zero,
    One,
    /// Leave the class out of the macro average.
    Exclude,
}

/// How dataset-level rates are formed from several cycles.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Sum counts over cycles, then compute rates.
    #[default]
    Pooled,
    /// Compute rates per cycle and average them.
    PerCycle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricOptions {
    pub tolerance: i64,
    pub matching: Matching,
    pub absent_class: AbsentClass,
    pub aggregation: Aggregation,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self {
            tolerance: DEFAULT_TOLERANCE,
            matching: Matching::Independent,
            absent_class: AbsentClass::Zero,
            aggregation: Aggregation::Pooled,
        }
    }
}

fn check_lengths(pred: &[usize], truth: &[usize], mask: Option<&[bool]>) -> Result<()> {
    if pred.len() != truth.len() || mask.is_some_and(|m| m.len() != truth.len()) {
        return Err(Error::shape(format!(
            "label sequences of different lengths ({} predicted, {} true)",
            pred.len(),
            truth.len()
        )));
    }
    Ok(())
}

fn evaluated(mask: Option<&[bool]>, i: usize) -> bool {
    mask.is_none_or(|m| m[i])
}

fn correct_and_total(pred: &[usize], truth: &[usize], mask: Option<&[bool]>) -> (usize, usize) {
    (0..truth.len())
        .filter(|&i| evaluated(mask, i))
        .fold((0, 0), |(c, n), i| (c + usize::from(pred[i] == truth[i]), n + 1))
}

/// Fraction of evaluated timesteps labelled correctly.
pub fn accuracy(pred: &[usize], truth: &[usize], mask: Option<&[bool]>) -> Result<f64> {
    check_lengths(pred, truth, mask)?;
    let (correct, total) = correct_and_total(pred, truth, mask);
    if total == 0 {
        return Err(Error::Data("accuracy is undefined without evaluated timesteps".into()));
    }
    Ok(correct as f64 / total as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub class: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ClassCounts {
    fn f1(&self, absent: AbsentClass) -> Option<f64> {
        let denom = self.tp as f64 + 0.5 * (self.fp + self.fn_) as f64;
        if denom == 0.0 {
            match absent {
                AbsentClass::Zero => Some(0.0),
                AbsentClass::One => Some(1.0),
                AbsentClass::Exclude => None,
            }
        } else {
            Some(self.tp as f64 / denom)
        }
    }
}

/// Per-class true positive / false positive / false negative tallies.
pub fn class_counts(pred: &[usize], truth: &[usize], mask: Option<&[bool]>, num_classes: usize) -> Result<Vec<ClassCounts>> {
    check_lengths(pred, truth, mask)?;
    let mut counts: Vec<ClassCounts> = (0..num_classes).map(|class| ClassCounts { class, ..Default::default() }).collect();
    for i in (0..truth.len()).filter(|&i| evaluated(mask, i)) {
        let (p, t) = (pred[i], truth[i]);
        if p >= num_classes || t >= num_classes {
            return Err(Error::Data(format!(
                "label {} outside alphabet of {num_classes} classes at timestep {i}",
                p.max(t)
            )));
        }
        if p == t {
            counts[t].tp += 1;
        } else {
            counts[p].fp += 1;
            counts[t].fn_ += 1;
        }
    }
    Ok(counts)
}

fn f1_from_counts(counts: &[ClassCounts], absent: AbsentClass) -> Result<(f64, Vec<Option<f64>>)> {
    if counts.is_empty() {
        return Err(Error::arg("macro-F1 needs a non-empty alphabet"));
    }
    let per_class: Vec<Option<f64>> = counts.iter().map(|c| c.f1(absent)).collect();
    let used: Vec<f64> = per_class.iter().flatten().copied().collect();
    let macro_f1 = if used.is_empty() { 0.0 } else { used.iter().sum::<f64>() / used.len() as f64 };
    Ok((macro_f1, per_class))
}

/// Unweighted mean of per-class F1 over the alphabet `0..num_classes`.
/// Classes absent from both sides contribute 0.
pub fn macro_f1(pred: &[usize], truth: &[usize], mask: Option<&[bool]>, num_classes: usize) -> Result<(f64, Vec<f64>)> {
    macro_f1_with(pred, truth, mask, num_classes, AbsentClass::Zero)
}

/// [`macro_f1`] with an explicit convention for absent classes. Excluded
/// classes report NaN in the per-class list.
pub fn macro_f1_with(
    pred: &[usize],
    truth: &[usize],
    mask: Option<&[bool]>,
    num_classes: usize,
    absent: AbsentClass,
) -> Result<(f64, Vec<f64>)> {
    if num_classes == 0 {
        return Err(Error::arg("macro-F1 needs a non-empty alphabet"));
    }
    let counts = class_counts(pred, truth, mask, num_classes)?;
    let (m, per) = f1_from_counts(&counts, absent)?;
    Ok((m, per.into_iter().map(|v| v.unwrap_or(f64::NAN)).collect()))
}

/// Changepoints between adjacent evaluated timesteps with differing labels.
pub fn extract_changepoints(labels: &[usize], mask: Option<&[bool]>) -> Vec<Changepoint> {
    (1..labels.len())
        .filter(|&t| evaluated(mask, t) && evaluated(mask, t - 1) && labels[t] != labels[t - 1])
        .map(|t| Changepoint {
            t,
            from: labels[t - 1],
            to: labels[t],
        })
        .collect()
}

fn check_tolerance(tolerance: i64) -> Result<usize> {
    usize::try_from(tolerance).map_err(|_| Error::arg(format!("tolerance must be >= 0, got {tolerance}")))
}

/// For every changepoint on `side`, whether an equivalent changepoint on
/// `other` lies within `tolerance` (independent matching).
fn matched_flags(side: &[Changepoint], other: &[Changepoint], tolerance: usize) -> Vec<bool> {
    // `other` is ordered by t; scan the window [t - tol, t + tol].
    side.iter()
        .map(|cp| {
            let lo = cp.t.saturating_sub(tolerance);
            let start = other.partition_point(|o| o.t < lo);
            other[start..]
                .iter()
                .take_while(|o| o.t <= cp.t + tolerance)
                .any(|o| o.equivalent(cp))
        })
        .collect()
}

/// One-to-one pairing; returns matched flags for `(pred, truth)`.
fn exclusive_flags(pred: &[Changepoint], truth: &[Changepoint], tolerance: usize) -> (Vec<bool>, Vec<bool>) {
    let mut pairs = Vec::new();
    for (i, p) in pred.iter().enumerate() {
        for (j, g) in truth.iter().enumerate() {
            if p.equivalent(g) && p.distance(g) <= tolerance {
                pairs.push((p.distance(g), i, j));
            }
        }
    }
    pairs.sort_unstable();
    let mut pm = vec![false; pred.len()];
    let mut tm = vec![false; truth.len()];
    for (_, i, j) in pairs {
        if !pm[i] && !tm[j] {
            pm[i] = true;
            tm[j] = true;
        }
    }
    (pm, tm)
}

fn sorted(cps: &[Changepoint]) -> Vec<Changepoint> {
    let mut v = cps.to_vec();
    v.sort_by_key(|c| c.t);
    v
}

/// Matched flags for predicted and ground-truth changepoints.
pub fn match_changepoints(
    pred: &[Changepoint],
    truth: &[Changepoint],
    tolerance: i64,
    matching: Matching,
) -> Result<(Vec<bool>, Vec<bool>)> {
    let tol = check_tolerance(tolerance)?;
    Ok(match matching {
        Matching::Independent => (matched_flags(pred, &sorted(truth), tol), matched_flags(truth, &sorted(pred), tol)),
        Matching::Exclusive => exclusive_flags(pred, truth, tol),
    })
}

/// Fraction of predicted changepoints with an equivalent ground-truth
/// changepoint within `tolerance` (inclusive). No predictions gives 0.
pub fn cp_precision(pred: &[Changepoint], truth: &[Changepoint], tolerance: i64) -> Result<f64> {
    let tol = check_tolerance(tolerance)?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    let hits = matched_flags(pred, &sorted(truth), tol).into_iter().filter(|&m| m).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Fraction of ground-truth changepoints with an equivalent predicted
/// changepoint within `tolerance` (inclusive). No ground truth gives 1.
pub fn cp_recall(pred: &[Changepoint], truth: &[Changepoint], tolerance: i64) -> Result<f64> {
    let tol = check_tolerance(tolerance)?;
    if truth.is_empty() {
        return Ok(1.0);
    }
    let hits = matched_flags(truth, &sorted(pred), tol).into_iter().filter(|&m| m).count();
    Ok(hits as f64 / truth.len() as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportCounts {
    pub evaluated_timesteps: usize,
    pub correct_timesteps: usize,
    pub per_class: Vec<ClassCounts>,
    pub predicted_changepoints: usize,
    pub predicted_matched: usize,
    pub true_changepoints: usize,
    pub true_matched: usize,
}

/// Dataset- or cycle-level evaluation summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    /// Keyed by raw label code.
    pub per_class_f1: BTreeMap<i64, f64>,
    pub cp_precision: f64,
    pub cp_recall: f64,
    pub counts: ReportCounts,
    pub tolerance: i64,
}

impl SegmentationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }
}

/// One row of the per-changepoint match detail.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ChangepointDetail {
    pub cycle_id: String,
    pub t: usize,
    pub from: i64,
    pub to: i64,
    pub side: &'static str,
    pub matched: bool,
}

/// Accumulates predictions for several cycles and produces one report.
#[derive(Clone, Debug)]
pub struct Evaluator {
    options: MetricOptions,
    /// Raw label code for each dense class index.
    codes: Vec<i64>,
    totals: ReportCounts,
    per_cycle: Vec<SegmentationReport>,
    detail: Vec<ChangepointDetail>,
}

impl Evaluator {
    pub fn new(num_classes: usize, options: MetricOptions) -> Result<Self> {
        Self::with_codes((0..num_classes as i64).collect(), options)
    }

    pub fn with_codes(codes: Vec<i64>, options: MetricOptions) -> Result<Self> {
        if codes.is_empty() {
            return Err(Error::arg("empty label alphabet"));
        }
        check_tolerance(options.tolerance)?;
        let per_class = (0..codes.len()).map(|class| ClassCounts { class, ..Default::default() }).collect();
        Ok(Self {
            options,
            codes,
            totals: ReportCounts {
                per_class,
                ..Default::default()
            },
            per_cycle: Vec::new(),
            detail: Vec::new(),
        })
    }

    fn counts_for(&self, pred: &[usize], truth: &[usize], mask: Option<&[bool]>, cycle_id: &str) -> Result<(ReportCounts, Vec<ChangepointDetail>)> {
        let per_class = class_counts(pred, truth, mask, self.codes.len())?;
        let (correct, total) = correct_and_total(pred, truth, mask);
        let pcp = extract_changepoints(pred, mask);
        let tcp = extract_changepoints(truth, mask);
        let (pm, tm) = match_changepoints(&pcp, &tcp, self.options.tolerance, self.options.matching)?;
        let mut detail = Vec::with_capacity(pcp.len() + tcp.len());
        for (side, cps, flags) in [("predicted", &pcp, &pm), ("true", &tcp, &tm)] {
            for (cp, &matched) in cps.iter().zip(flags) {
                detail.push(ChangepointDetail {
                    cycle_id: cycle_id.to_string(),
                    t: cp.t,
                    from: self.codes[cp.from],
                    to: self.codes[cp.to],
                    side,
                    matched,
                });
            }
        }
        Ok((
            ReportCounts {
                evaluated_timesteps: total,
                correct_timesteps: correct,
                per_class,
                predicted_changepoints: pcp.len(),
                predicted_matched: pm.iter().filter(|&&m| m).count(),
                true_changepoints: tcp.len(),
                true_matched: tm.iter().filter(|&&m| m).count(),
            },
            detail,
        ))
    }

    /// Adds one cycle of dense-index predictions and labels.
    pub fn add(&mut self, cycle_id: &str, pred: &[usize], truth: &[usize], mask: Option<&[bool]>) -> Result<()> {
        let (c, detail) = self.counts_for(pred, truth, mask, cycle_id)?;
        if c.evaluated_timesteps == 0 {
            return Err(Error::Data(format!("cycle {cycle_id} has no evaluated timesteps")));
        }
        let t = &mut self.totals;
        t.evaluated_timesteps += c.evaluated_timesteps;
        t.correct_timesteps += c.correct_timesteps;
        for (acc, cc) in t.per_class.iter_mut().zip(&c.per_class) {
            acc.tp += cc.tp;
            acc.fp += cc.fp;
            acc.fn_ += cc.fn_;
        }
        t.predicted_changepoints += c.predicted_changepoints;
        t.predicted_matched += c.predicted_matched;
        t.true_changepoints += c.true_changepoints;
        t.true_matched += c.true_matched;
        if self.options.aggregation == Aggregation::PerCycle {
            self.per_cycle.push(self.report_from(c)?);
        }
        self.detail.extend(detail);
        Ok(())
    }

    fn report_from(&self, counts: ReportCounts) -> Result<SegmentationReport> {
        if counts.evaluated_timesteps == 0 {
            return Err(Error::Data("no evaluated timesteps".into()));
        }
        let (macro_f1, per) = f1_from_counts(&counts.per_class, self.options.absent_class)?;
        let per_class_f1 = self
            .codes
            .iter()
            .zip(per)
            .filter_map(|(&code, f)| f.map(|f| (code, f)))
            .collect();
        let cp_precision = if counts.predicted_changepoints == 0 {
            0.0
        } else {
            counts.predicted_matched as f64 / counts.predicted_changepoints as f64
        };
        let cp_recall = if counts.true_changepoints == 0 {
            1.0
        } else {
            counts.true_matched as f64 / counts.true_changepoints as f64
        };
        Ok(SegmentationReport {
            accuracy: counts.correct_timesteps as f64 / counts.evaluated_timesteps as f64,
            macro_f1,
            per_class_f1,
            cp_precision,
            cp_recall,
            counts,
            tolerance: self.options.tolerance,
        })
    }

    pub fn report(&self) -> Result<SegmentationReport> {
        let mut pooled = self.report_from(self.totals.clone())?;
        if self.options.aggregation == Aggregation::PerCycle {
            let n = self.per_cycle.len() as f64;
            let mean = |f: fn(&SegmentationReport) -> f64| self.per_cycle.iter().map(f).sum::<f64>() / n;
            pooled.accuracy = mean(|r| r.accuracy);
            pooled.macro_f1 = mean(|r| r.macro_f1);
            pooled.cp_precision = mean(|r| r.cp_precision);
            pooled.cp_recall = mean(|r| r.cp_recall);
        }
        Ok(pooled)
    }

    pub fn detail(&self) -> &[ChangepointDetail] {
        &self.detail
    }

    /// Writes the detail rows as CSV `cycle_id,t,from,to,side,matched`.
    pub fn write_detail_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| Error::Data(format!("writing changepoint detail: {e}"));
        for row in &self.detail {
            w.serialize(row).map_err(err)?;
        }
        w.flush().map_err(|e| Error::Data(e.to_string()))?;
        Ok(())
    }
}

/// Single-cycle report.
pub fn evaluate_labels(pred: &[usize], truth: &[usize], mask: Option<&[bool]>, num_classes: usize, options: MetricOptions) -> Result<SegmentationReport> {
    let mut e = Evaluator::new(num_classes, options)?;
    e.add("cycle", pred, truth, mask)?;
    e.report()
}
