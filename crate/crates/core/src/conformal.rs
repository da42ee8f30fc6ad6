//! Split conformal prediction with HPS, APS, and RAPS nonconformity scores.
//! The APS/RAPS variants are deterministic (no tie randomization), trading a
//! little over-coverage for reproducible attack evaluations.

use crate::error::{Error, Result};
use crate::uq::ProbVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ScoreKind {
    Hps,
    Aps,
    Raps,
}

impl ScoreKind {
    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "hps" => Ok(ScoreKind::Hps),
            "aps" => Ok(ScoreKind::Aps),
            "raps" => Ok(ScoreKind::Raps),
            other => Err(Error::Config(format!("unknown conformal score '{other}'"))),
        }
    }
}

/// A calibrated split-conformal predictor.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ConformalPredictor {
    pub kind: ScoreKind,
    pub qhat: f64,
    pub alpha: f64,
    pub k_reg: usize,
    pub lambda_reg: f64,
}

/// Classes sorted by descending probability, ties to the lower class index.
fn descending_order(p: &ProbVector) -> Vec<usize> {
    let mut order: Vec<usize> = (0..p.class_count()).collect();
    order.sort_by(|&a, &b| {
        p.probs()[b]
            .partial_cmp(&p.probs()[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    order
}

/// Nonconformity of `label` under `p`.
///
/// HPS: 1 - p[label]. APS: cumulative probability down the descending order
/// up to and including the label. RAPS adds `lambda_reg * max(0, rank - k_reg)`
/// on top of APS, with rank counted from 1.
pub fn nonconformity_score(
    kind: ScoreKind,
    p: &ProbVector,
    label: usize,
    k_reg: usize,
    lambda_reg: f64,
) -> Result<f64> {
    if label >= p.class_count() {
        return Err(Error::Index(format!(
            "label {label} out of range for {} classes",
            p.class_count()
        )));
    }
    match kind {
        ScoreKind::Hps => Ok(1.0 - p.probs()[label]),
        ScoreKind::Aps | ScoreKind::Raps => {
            let order = descending_order(p);
            let mut cum = 0.0;
            let mut rank = 0;
            for (pos, &c) in order.iter().enumerate() {
                cum += p.probs()[c];
                if c == label {
                    rank = pos + 1;
                    break;
                }
            }
            let mut score = cum;
            if kind == ScoreKind::Raps {
                score += lambda_reg * (rank.saturating_sub(k_reg)) as f64;
            }
            Ok(score)
        }
    }
}

/// Finite-sample-corrected quantile: the ceil((n+1)(1-alpha))-th smallest
/// calibration score.
pub fn conformal_calibrate(scores: &[f64], alpha: f64) -> Result<f64> {
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(Error::Config(format!("alpha {alpha} outside (0,1)")));
    }
    let n = scores.len();
    if n == 0 {
        return Err(Error::CalibrationSize("no calibration scores".into()));
    }
    let k = (((n + 1) as f64) * (1.0 - alpha)).ceil() as usize;
    if k > n {
        return Err(Error::CalibrationSize(format!(
            "corrected quantile index {k} exceeds {n} calibration scores; need n >= (1-alpha)/alpha"
        )));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(sorted[k - 1])
}

impl ConformalPredictor {
    /// Calibrate on held-out probability vectors and true labels.
    pub fn fit(
        kind: ScoreKind,
        probs: &[ProbVector],
        labels: &[usize],
        alpha: f64,
        k_reg: usize,
        lambda_reg: f64,
    ) -> Result<Self> {
        if probs.len() != labels.len() {
            return Err(Error::Shape("probs/labels length mismatch".into()));
        }
        let scores: Result<Vec<f64>> = probs
            .iter()
            .zip(labels)
            .map(|(p, &y)| nonconformity_score(kind, p, y, k_reg, lambda_reg))
            .collect();
        let qhat = conformal_calibrate(&scores?, alpha)?;
        Ok(ConformalPredictor {
            kind,
            qhat,
            alpha,
            k_reg,
            lambda_reg,
        })
    }

    /// All labels whose score is within the calibrated threshold.
    pub fn predict_set(&self, p: &ProbVector) -> Vec<usize> {
        (0..p.class_count())
            .filter(|&c| {
                nonconformity_score(self.kind, p, c, self.k_reg, self.lambda_reg)
                    .map(|s| s <= self.qhat)
                    .unwrap_or(false)
            })
            .collect()
    }

    /// (empirical coverage, mean set size) over an evaluation batch.
    pub fn evaluate(&self, probs: &[ProbVector], labels: &[usize]) -> Result<(f64, f64)> {
        if probs.is_empty() {
            return Err(Error::Empty("no evaluation samples".into()));
        }
        if probs.len() != labels.len() {
            return Err(Error::Shape("probs/labels length mismatch".into()));
        }
        let mut covered = 0usize;
        let mut size_total = 0usize;
        for (p, &y) in probs.iter().zip(labels) {
            let set = self.predict_set(p);
            size_total += set.len();
            if set.contains(&y) {
                covered += 1;
            }
        }
        Ok((
            covered as f64 / probs.len() as f64,
            size_total as f64 / probs.len() as f64,
        ))
    }
}
