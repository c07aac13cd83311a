//! Word-level scoring under the top-word/`UNK` protocol and the one-tailed
//! pooled-variance t-test.
//!
//! A position is correct when the reference is a top word and the prediction
//! equals it, or when the reference is rare and the prediction passes the input
//! word through unchanged. Two F1 figures are reported:
//!
//! * `f1_weighted`: per-class F1 over the output classes present in the
//!   references (`UNK` included), averaged with support weights;
//! * correction P/R/F1: over positions the model changed vs positions whose
//!   reference differs from the input.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::textpipe::Vocab;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub f1_weighted: f64,
    pub correction_precision: f64,
    pub correction_recall: f64,
    pub correction_f1: f64,
    pub total: usize,
    pub correct: usize,
    /// Positions where the prediction differs from the input.
    pub changed: usize,
    /// Positions where the reference differs from the input.
    pub should_change: usize,
    /// Changed positions that needed a change and got the right word.
    pub fixed: usize,
}

impl EvalResult {
    /// Fixed-order human-readable table.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let rows: [(&str, String); 10] = [
            ("accuracy", format!("{:.6}", self.accuracy)),
            ("f1_weighted", format!("{:.6}", self.f1_weighted)),
            ("correction_precision", format!("{:.6}", self.correction_precision)),
            ("correction_recall", format!("{:.6}", self.correction_recall)),
            ("correction_f1", format!("{:.6}", self.correction_f1)),
            ("positions", self.total.to_string()),
            ("correct", self.correct.to_string()),
            ("changed", self.changed.to_string()),
            ("should_change", self.should_change.to_string()),
            ("fixed", self.fixed.to_string()),
        ];
        for (k, v) in rows {
            let _ = writeln!(s, "{k:<22}{v}");
        }
        s
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Class id outside the output space, for rare-reference positions whose
/// prediction would otherwise be counted as an `UNK` hit.
const WRONG: u64 = u64::MAX;

/// Scores sentences given as word lists. All three streams must agree in
/// sentence count and per-sentence word count.
pub fn score<S: AsRef<str>>(
    inputs: &[Vec<S>],
    predictions: &[Vec<S>],
    references: &[Vec<S>],
    vocab: &Vocab,
) -> Result<EvalResult> {
    if inputs.len() != predictions.len() || inputs.len() != references.len() {
        return Err(Error::shape(format!(
            "sentence counts differ: {} inputs, {} predictions, {} references",
            inputs.len(),
            predictions.len(),
            references.len()
        )));
    }
    let unk = vocab.unk_id() as u64;
    let (mut total, mut correct, mut changed, mut should_change, mut fixed) = (0, 0, 0, 0, 0);
    // class -> (support, predicted, true positives)
    let mut classes: BTreeMap<u64, [usize; 3]> = BTreeMap::new();
    for (s, ((inp, pred), refs)) in inputs.iter().zip(predictions).zip(references).enumerate() {
        if inp.len() != pred.len() || inp.len() != refs.len() {
            return Err(Error::shape(format!(
                "sentence {s}: {} input, {} predicted, {} reference words",
                inp.len(),
                pred.len(),
                refs.len()
            )));
        }
        for ((i, p), r) in inp.iter().zip(pred).zip(refs) {
            let (i, p, r) = (i.as_ref(), p.as_ref(), r.as_ref());
            let ref_class = vocab.class_of(r) as u64;
            let ok = if ref_class == unk { p == i } else { p == r };
            let pred_class = if ok {
                ref_class
            } else {
                match vocab.class_of(p) as u64 {
                    c if c == ref_class => WRONG,
                    c => c,
                }
            };
            total += 1;
            correct += ok as usize;
            classes.entry(ref_class).or_default()[0] += 1;
            classes.entry(pred_class).or_default()[1] += 1;
            if ok {
                classes.entry(ref_class).or_default()[2] += 1;
            }
            let ch = p != i;
            let need = r != i;
            changed += ch as usize;
            should_change += need as usize;
            fixed += (ch && need && ok) as usize;
        }
    }
    if total == 0 {
        return Err(Error::Empty("no word positions to score".into()));
    }
    let mut f1_weighted = 0.0;
    for &[support, predicted, tp] in classes.values() {
        if support == 0 {
            continue;
        }
        let p = if predicted == 0 { 0.0 } else { tp as f64 / predicted as f64 };
        let r = tp as f64 / support as f64;
        f1_weighted += support as f64 / total as f64 * harmonic(p, r);
    }
    // With nothing to change (or nothing changed) the corresponding rate is vacuously perfect.
    let correction_precision = if changed == 0 { 1.0 } else { fixed as f64 / changed as f64 };
    let correction_recall = if should_change == 0 { 1.0 } else { fixed as f64 / should_change as f64 };
    Ok(EvalResult {
        accuracy: correct as f64 / total as f64,
        f1_weighted: f1_weighted.min(1.0),
        correction_precision,
        correction_recall,
        correction_f1: harmonic(correction_precision, correction_recall),
        total,
        correct,
        changed,
        should_change,
        fixed,
    })
}

/// Result of a one-tailed test of `mean(a) > mean(b)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    /// `P(T > t)` under the null.
    pub p: f64,
}

impl TTest {
    pub fn significant(&self, alpha: f64) -> bool {
        self.p < alpha
    }
}

pub const SIGNIFICANCE: f64 = 0.05;

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let ss = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
    (m, ss)
}

/// Pooled-variance independent two-sample t-test, one-tailed.
pub fn t_test_one_tailed(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid("each sample needs at least two values"));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("t-test sample".into()));
    }
    let (ma, ssa) = mean_var(a);
    let (mb, ssb) = mean_var(b);
    let df = (a.len() + b.len() - 2) as f64;
    let pooled = (ssa + ssb) / df;
    let se = (pooled * (1.0 / a.len() as f64 + 1.0 / b.len() as f64)).sqrt();
    let diff = ma - mb;
    if se == 0.0 {
        let (t, p) = if diff == 0.0 {
            (0.0, 0.5)
        } else if diff > 0.0 {
            (f64::INFINITY, 0.0)
        } else {
            (f64::NEG_INFINITY, 1.0)
        };
        return Ok(TTest { t, df, p });
    }
    let t = diff / se;
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::invalid(e.to_string()))?;
    Ok(TTest { t, df, p: dist.sf(t) })
}
