//! Segmentation metrics on hand-made label sequences.

use prectime::metrics::{cp_precision, cp_recall, evaluate_labels, extract_changepoints, macro_f1, Evaluator, MetricOptions};

fn main() -> prectime::Result<()> {
    let (m, per_class) = macro_f1(&[0, 1, 1, 1], &[0, 0, 1, 1], None, 2)?;
    println!("macro-F1 {m:.4} (per class {per_class:?})");

    let truth: Vec<usize> = [0; 40].into_iter().chain([1; 30]).chain([2; 30]).collect();
    let mut pred = truth.clone();
    // late by 4 steps on the first transition, plus a spurious blip
    pred[40..44].fill(0);
    pred[80..82].fill(0);
    let (p, g) = (extract_changepoints(&pred, None), extract_changepoints(&truth, None));
    println!("predicted changepoints {p:?}");
    println!("true changepoints      {g:?}");
    for tol in [0, 3, 5] {
        println!("tolerance {tol}: precision {:.3} recall {:.3}", cp_precision(&p, &g, tol)?, cp_recall(&p, &g, tol)?);
    }

    let opts = MetricOptions { tolerance: 5, ..MetricOptions::default() };
    println!("{}", evaluate_labels(&pred, &truth, None, 3, opts)?.to_json());

    // dataset-level report keyed by raw label codes, with padded steps masked
    let mut ev = Evaluator::with_codes(vec![10, 20, 30], opts)?;
    let mask: Vec<bool> = (0..100).map(|t| t < 95).collect();
    ev.add("cycle_a", &pred, &truth, Some(&mask))?;
    ev.add("cycle_b", &truth, &truth, None)?;
    let report = ev.report()?;
    println!("pooled accuracy {:.4}, per-class F1 {:?}", report.accuracy, report.per_class_f1);
    ev.write_detail_csv(std::io::stdout())?;
    Ok(())
}
