//! Saliency evaluation: adaptive-threshold F-measure, MAE and PR curves.
//!
//! Zero-denominator conventions: precision is 1 when nothing is predicted
//! positive, recall is 1 when the ground truth has no positives, and F is 0
//! when both precision and recall are 0. Binarization uses a strict `>`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BETA2: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrF {
    pub precision: f64,
    pub recall: f64,
    pub f_beta: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub t_adp: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_beta: f64,
    pub mae: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    /// `(threshold, precision, recall)` for thresholds `0..=255`.
    pub points: Vec<(u8, f64, f64)>,
}

fn check_len(a: usize, b: usize, op: &'static str) -> Result<()> {
    if a != b {
        return Err(Error::Shape {
            op,
            expected: vec![b],
            actual: vec![a],
        });
    }
    Ok(())
}

/// Twice the mean saliency; not clipped.
pub fn adaptive_threshold(s: &[f64]) -> f64 {
    if s.is_empty() {
        return 0.0;
    }
    2.0 * s.iter().sum::<f64>() / s.len() as f64
}

/// Weighted harmonic mean; returns `precision` unchanged when it equals
/// `recall`, so the identity holds without rounding.
pub fn f_beta(precision: f64, recall: f64) -> f64 {
    if precision == recall {
        return precision;
    }
    let den = BETA2 * precision + recall;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + BETA2) * precision * recall / den
    }
}

fn prf(tp: usize, predicted: usize, positives: usize) -> PrF {
    let precision = if predicted == 0 {
        1.0
    } else {
        tp as f64 / predicted as f64
    };
    let recall = if positives == 0 {
        1.0
    } else {
        tp as f64 / positives as f64
    };
    PrF {
        precision,
        recall,
        f_beta: f_beta(precision, recall),
    }
}

/// Precision, recall and F-beta of `s > threshold` against binary `g`.
pub fn f_measure(s: &[f64], g: &[u8], threshold: f64) -> Result<PrF> {
    check_len(s.len(), g.len(), "f_measure")?;
    let (mut tp, mut predicted, mut positives) = (0, 0, 0);
    for (&v, &gt) in s.iter().zip(g) {
        let p = v > threshold;
        predicted += p as usize;
        positives += (gt != 0) as usize;
        tp += (p && gt != 0) as usize;
    }
    Ok(prf(tp, predicted, positives))
}

pub fn mae(s: &[f64], g: &[u8]) -> Result<f64> {
    check_len(s.len(), g.len(), "mae")?;
    if s.is_empty() {
        return Ok(0.0);
    }
    Ok(s.iter()
        .zip(g)
        .map(|(&v, &gt)| (v - gt as f64).abs())
        .sum::<f64>()
        / s.len() as f64)
}

/// Map `[0, 1]` to `0..=255` by rounding.
pub fn quantize_8bit(s: &[f64]) -> Vec<u8> {
    s.iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

/// PR points for every threshold from one 256-bin histogram pass.
pub fn pr_curve(s8: &[u8], g: &[u8]) -> Result<PrCurve> {
    check_len(s8.len(), g.len(), "pr_curve")?;
    let mut pos = [0usize; 256];
    let mut neg = [0usize; 256];
    for (&v, &gt) in s8.iter().zip(g) {
        if gt != 0 {
            pos[v as usize] += 1;
        } else {
            neg[v as usize] += 1;
        }
    }
    let positives: usize = pos.iter().sum();
    let (mut tp, mut fp) = (0, 0);
    let mut points = vec![(0u8, 0.0, 0.0); 256];
    // predicted positive at threshold t means value > t
    for t in (0..256).rev() {
        let r = prf(tp, tp + fp, positives);
        points[t] = (t as u8, r.precision, r.recall);
        tp += pos[t];
        fp += neg[t];
    }
    Ok(PrCurve { points })
}

/// Adaptive-threshold F-measure and MAE of one map.
pub fn evaluate_map(s: &[f64], g: &[u8]) -> Result<EvalReport> {
    let t_adp = adaptive_threshold(s);
    let r = f_measure(s, g, t_adp)?;
    Ok(EvalReport {
        t_adp,
        precision: r.precision,
        recall: r.recall,
        f_beta: r.f_beta,
        mae: mae(s, g)?,
    })
}

/// Field-wise mean over images.
pub fn mean_report(reports: &[EvalReport]) -> Result<EvalReport> {
    if reports.is_empty() {
        return Err(Error::contract("cannot average an empty set of reports"));
    }
    let n = reports.len() as f64;
    let avg = |f: fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    Ok(EvalReport {
        t_adp: avg(|r| r.t_adp),
        precision: avg(|r| r.precision),
        recall: avg(|r| r.recall),
        f_beta: avg(|r| r.f_beta),
        mae: avg(|r| r.mae),
    })
}

/// Point-wise mean of per-image curves.
pub fn mean_curve(curves: &[PrCurve]) -> Result<PrCurve> {
    if curves.is_empty() {
        return Err(Error::contract("cannot average an empty set of curves"));
    }
    let n = curves.len() as f64;
    let points = (0..256)
        .map(|t| {
            let p = curves.iter().map(|c| c.points[t].1).sum::<f64>() / n;
            let r = curves.iter().map(|c| c.points[t].2).sum::<f64>() / n;
            (t as u8, p, r)
        })
        .collect();
    Ok(PrCurve { points })
}

impl PrCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,precision,recall\n");
        for (t, p, r) in &self.points {
            s.push_str(&format!("{t},{p},{r}\n"));
        }
        s
    }
}
