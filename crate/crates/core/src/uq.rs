//! Uncertainty estimators: softmax, deep ensembles, and MC dropout.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exec;
use crate::grad::softmax;
use crate::model::{forward_traced, ModelParams};
use crate::stats::argmax;
use crate::tensor::Tensor;

/// A per-class probability distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector {
    probs: Vec<f64>,
}

impl ProbVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Empty("probability vector is empty".into()));
        }
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::Config("probabilities must be finite and nonnegative".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(ProbVector { probs })
    }

    pub fn from_logits(logits: &[f64]) -> Self {
        ProbVector {
            probs: softmax(logits),
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn class_count(&self) -> usize {
        self.probs.len()
    }

    /// Predicted label: argmax with ties to the lower index.
    pub fn predicted(&self) -> usize {
        argmax(&self.probs)
    }

    /// Top-class probability.
    pub fn confidence(&self) -> f64 {
        self.probs[self.predicted()]
    }

    /// Gap between the top class and the best other class.
    pub fn margin_for(&self, label: usize) -> f64 {
        let runner = self
            .probs
            .iter()
            .enumerate()
            .filter(|(c, _)| *c != label)
            .map(|(_, &p)| p)
            .fold(f64::NEG_INFINITY, f64::max);
        self.probs[label] - runner
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum EstimatorKind {
    Softmax,
    Ensemble,
    McDropout,
}

impl EstimatorKind {
    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "softmax" => Ok(EstimatorKind::Softmax),
            "ensemble" => Ok(EstimatorKind::Ensemble),
            "mc_dropout" => Ok(EstimatorKind::McDropout),
            other => Err(Error::Config(format!("unknown estimator kind '{other}'"))),
        }
    }
}

/// An uncertainty estimator bound to one or more models.
#[derive(Debug, Clone)]
pub struct Estimator {
    kind: EstimatorKind,
    models: Vec<ModelParams>,
    mc_samples: usize,
    mc_seed: u64,
}

impl Estimator {
    pub fn softmax(model: ModelParams) -> Self {
        Estimator {
            kind: EstimatorKind::Softmax,
            models: vec![model],
            mc_samples: 1,
            mc_seed: 0,
        }
    }

    pub fn ensemble(models: Vec<ModelParams>) -> Result<Self> {
        if models.len() < 2 {
            return Err(Error::Config("an ensemble needs at least two members".into()));
        }
        Ok(Estimator {
            kind: EstimatorKind::Ensemble,
            models,
            mc_samples: 1,
            mc_seed: 0,
        })
    }

    pub fn mc_dropout(model: ModelParams, mc_samples: usize, mc_seed: u64) -> Result<Self> {
        if mc_samples < 1 {
            return Err(Error::Config("mc_samples must be at least 1".into()));
        }
        if model.dropout_rate() == 0.0 {
            return Err(Error::Config("mc dropout needs a model with a nonzero dropout rate".into()));
        }
        Ok(Estimator {
            kind: EstimatorKind::McDropout,
            models: vec![model],
            mc_samples,
            mc_seed,
        })
    }

    pub fn kind(&self) -> EstimatorKind {
        self.kind
    }

    pub fn models(&self) -> &[ModelParams] {
        &self.models
    }

    /// The model differentiated by white-box crafting code.
    pub fn primary(&self) -> &ModelParams {
        &self.models[0]
    }

    pub fn mc_samples(&self) -> usize {
        self.mc_samples
    }

    pub fn mc_seed(&self) -> u64 {
        self.mc_seed
    }

    /// Same estimator configuration over replacement models (e.g. after
    /// unlearning). Member count must be preserved.
    pub fn with_models(&self, models: Vec<ModelParams>) -> Result<Self> {
        if models.len() != self.models.len() {
            return Err(Error::Config(format!(
                "estimator has {} members, got {}",
                self.models.len(),
                models.len()
            )));
        }
        Ok(Estimator {
            kind: self.kind,
            models,
            mc_samples: self.mc_samples,
            mc_seed: self.mc_seed,
        })
    }

    /// Replace only the primary member.
    pub fn with_primary(&self, model: ModelParams) -> Self {
        let mut models = self.models.clone();
        models[0] = model;
        Estimator {
            kind: self.kind,
            models,
            mc_samples: self.mc_samples,
            mc_seed: self.mc_seed,
        }
    }

    fn estimate_slice(&self, x: &[f64]) -> Result<ProbVector> {
        let probs = match self.kind {
            EstimatorKind::Softmax => {
                let trace = forward_traced(&self.models[0], x, None)?;
                softmax(trace.logits())
            }
            EstimatorKind::Ensemble => {
                let c = self.models[0].class_count();
                let mut acc = vec![0.0; c];
                for m in &self.models {
                    let trace = forward_traced(m, x, None)?;
                    for (a, p) in acc.iter_mut().zip(softmax(trace.logits())) {
                        *a += p;
                    }
                }
                let inv = 1.0 / self.models.len() as f64;
                acc.iter_mut().for_each(|a| *a *= inv);
                acc
            }
            EstimatorKind::McDropout => {
                let c = self.models[0].class_count();
                let mut acc = vec![0.0; c];
                for k in 0..self.mc_samples {
                    let seed = self.mc_seed.wrapping_add(k as u64);
                    let trace = forward_traced(&self.models[0], x, Some(seed))?;
                    for (a, p) in acc.iter_mut().zip(softmax(trace.logits())) {
                        *a += p;
                    }
                }
                let inv = 1.0 / self.mc_samples as f64;
                acc.iter_mut().for_each(|a| *a *= inv);
                acc
            }
        };
        ProbVector::new(probs)
    }

    /// E(x; theta): the estimator's probability distribution for one input.
    pub fn estimate(&self, x: &Tensor) -> Result<ProbVector> {
        self.estimate_slice(x.data())
    }

    /// Estimates for a batch of dataset rows, in index order.
    pub fn estimate_rows(&self, ds: &Dataset, idx: &[usize]) -> Result<Vec<ProbVector>> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= ds.len()) {
            return Err(Error::Index(format!("row {bad} out of range")));
        }
        let out = exec::map(idx, |&i| {
            self.estimate_slice(ds.row(i)).expect("validated rows")
        });
        Ok(out)
    }

    /// Raw logits of the primary model for a batch of rows (softmax-family
    /// calibrators operate on these).
    pub fn primary_logits(&self, ds: &Dataset, idx: &[usize]) -> Result<Vec<Vec<f64>>> {
        let model = self.primary();
        let out = exec::map(idx, |&i| {
            forward_traced(model, ds.row(i), None)
                .map(|t| t.logits().to_vec())
                .expect("validated rows")
        });
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelParams;
    use crate::train::init_params;

    #[test]
    fn softmax_of_zero_logits_is_uniform() {
        let m = ModelParams::zeros(vec![3, 4, 4]).unwrap();
        let est = Estimator::softmax(m);
        let p = est
            .estimate(&Tensor::vector(vec![0.5, -0.5, 2.0]).unwrap())
            .unwrap();
        for &v in p.probs() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn ensemble_of_identical_members_equals_single_softmax() {
        let m = init_params(&[3, 5, 4], 3, 0.0).unwrap();
        let x = Tensor::vector(vec![0.2, -0.7, 1.0]).unwrap();
        let single = Estimator::softmax(m.clone()).estimate(&x).unwrap();
        let ens = Estimator::ensemble(vec![m.clone(), m.clone(), m]).unwrap();
        let avg = ens.estimate(&x).unwrap();
        for (a, b) in avg.probs().iter().zip(single.probs()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mc_dropout_matches_explicit_per_pass_average() {
        let m = init_params(&[4, 16, 3], 5, 0.3).unwrap();
        let x = Tensor::vector(vec![0.4, -0.2, 0.9, 0.1]).unwrap();
        let mc_samples = 30;
        let mc_seed = 1000;
        let est = Estimator::mc_dropout(m.clone(), mc_samples, mc_seed).unwrap();
        let got = est.estimate(&x).unwrap();
        // Oracle: independently computed average of the 30 seeded passes.
        let mut acc = vec![0.0; 3];
        for k in 0..mc_samples {
            let logits = crate::model::forward(&m, &x, Some(mc_seed + k as u64)).unwrap();
            for (a, p) in acc.iter_mut().zip(softmax(logits.data())) {
                *a += p;
            }
        }
        for a in &mut acc {
            *a /= mc_samples as f64;
        }
        for (g, o) in got.probs().iter().zip(&acc) {
            assert!((g - o).abs() < 1e-12);
        }
        // Determinism given (seed, M).
        let again = est.estimate(&x).unwrap();
        assert_eq!(got.probs(), again.probs());
    }

    #[test]
    fn ensemble_requires_two_members() {
        let m = init_params(&[2, 3, 2], 0, 0.0).unwrap();
        assert!(Estimator::ensemble(vec![m]).is_err());
    }

    #[test]
    fn estimator_outputs_are_valid_distributions() {
        let m = init_params(&[4, 8, 5], 11, 0.2).unwrap();
        let ds = crate::data::gen_blobs(40, 4, 5, 3.0, 8).unwrap();
        let idx: Vec<usize> = (0..ds.len()).collect();
        for est in [
            Estimator::softmax(m.clone()),
            Estimator::ensemble(vec![m.clone(), init_params(&[4, 8, 5], 12, 0.2).unwrap()]).unwrap(),
            Estimator::mc_dropout(m, 10, 3).unwrap(),
        ] {
            for p in est.estimate_rows(&ds, &idx).unwrap() {
                let sum: f64 = p.probs().iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
                assert!(p.probs().iter().all(|&v| v >= 0.0));
            }
        }
    }
}
