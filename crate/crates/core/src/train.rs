//! Mini-batch SGD training with fixed seeds; bit-reproducible given
//! (init seed, data, config). Also hosts the optional adversarial-training
//! defense used by the experiment harness.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::grad::{backward, loss_and_dlogits, sample_loss_grad, LossFn};
use crate::model::{forward_traced, Activation, ModelParams};
use crate::rng;
use rand::Rng;

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub weight_decay: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning rate must be finite and nonnegative".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be nonnegative".into()));
        }
        Ok(())
    }
}

/// L-infinity projected-gradient adversarial training (the defense baseline).
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct AdversarialTraining {
    pub epsilon: f64,
    pub steps: usize,
}

impl Default for AdversarialTraining {
    fn default() -> Self {
        AdversarialTraining {
            epsilon: 0.1,
            steps: 5,
        }
    }
}

/// He-uniform weights, zero biases, drawn in flat layout order.
pub fn init_params(arch: &[usize], seed: u64, dropout_rate: f64) -> Result<ModelParams> {
    let mut r = rng::rng(seed);
    let mut params = Vec::with_capacity(crate::model::param_count(arch));
    for w in arch.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let limit = (6.0 / fan_in as f64).sqrt();
        for _ in 0..fan_in * fan_out {
            params.push((r.gen::<f64>() * 2.0 - 1.0) * limit);
        }
        for _ in 0..fan_out {
            params.push(0.0);
        }
    }
    ModelParams::new(arch.to_vec(), Activation::Relu, params, dropout_rate)
}

/// Train a fresh model: He-uniform init from `init_seed`, then SGD on
/// cross-entropy with optional L2 weight decay.
pub fn train(
    arch: &[usize],
    dropout_rate: f64,
    init_seed: u64,
    ds: &Dataset,
    cfg: &TrainConfig,
) -> Result<ModelParams> {
    let init = init_params(arch, init_seed, dropout_rate)?;
    train_from(&init, ds, cfg, None)
}

/// Continue SGD from existing parameters. The shuffle stream is seeded from
/// `cfg.seed` alone, so identical (start, data, config) always reproduce the
/// same trajectory.
pub fn train_from(
    init: &ModelParams,
    ds: &Dataset,
    cfg: &TrainConfig,
    adversarial: Option<&AdversarialTraining>,
) -> Result<ModelParams> {
    cfg.validate()?;
    if ds.dim() != init.input_dim() {
        return Err(Error::Shape(format!(
            "data dim {} does not match model input {}",
            ds.dim(),
            init.input_dim()
        )));
    }
    if ds.labels().iter().any(|&l| l as usize >= init.class_count()) {
        return Err(Error::Config("label out of range for model output width".into()));
    }
    let mut model = init.clone();
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut shuffle_rng = rng::rng(rng::mix(cfg.seed, 0x5155_4646)); // shuffle stream
    let mut adv_rng = rng::rng(rng::mix(cfg.seed, 0x5144_5645)); // adversarial noise stream

    for epoch in 0..cfg.epochs {
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = vec![0.0; model.params().len()];
            let mut loss_acc = 0.0;
            for &i in batch {
                let (loss, g) = match adversarial {
                    None => sample_loss_grad(&model, ds.row(i), ds.label(i), LossFn::CrossEntropy)?,
                    Some(adv) => {
                        let x_adv = perturb(&model, ds.row(i), ds.label(i), adv, &mut adv_rng)?;
                        sample_loss_grad(&model, &x_adv, ds.label(i), LossFn::CrossEntropy)?
                    }
                };
                loss_acc += loss;
                for (gm, gi) in grad.iter_mut().zip(&g) {
                    *gm += gi;
                }
            }
            if !loss_acc.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            let inv = 1.0 / batch.len() as f64;
            let lr = cfg.learning_rate;
            let wd = cfg.weight_decay;
            let params = model.params_mut();
            for (p, g) in params.iter_mut().zip(&grad) {
                *p -= lr * (g * inv + wd * *p);
            }
        }
    }
    Ok(model)
}

/// One PGD perturbation in the L-infinity ball: uniform start, sign steps of
/// 2.5*eps/steps, box projection after each step.
fn perturb(
    model: &ModelParams,
    x: &[f64],
    label: usize,
    adv: &AdversarialTraining,
    r: &mut impl Rng,
) -> Result<Vec<f64>> {
    let eps = adv.epsilon;
    let step = 2.5 * eps / adv.steps.max(1) as f64;
    let mut delta: Vec<f64> = (0..x.len()).map(|_| (r.gen::<f64>() * 2.0 - 1.0) * eps).collect();
    for _ in 0..adv.steps {
        let x_cur: Vec<f64> = x.iter().zip(&delta).map(|(a, b)| a + b).collect();
        let trace = forward_traced(model, &x_cur, None)?;
        let (_, dlogits) = loss_and_dlogits(LossFn::CrossEntropy, trace.logits(), label);
        let (_, dx) = backward(model, &trace, &dlogits);
        for (dv, g) in delta.iter_mut().zip(&dx) {
            *dv = (*dv + step * g.signum()).clamp(-eps, eps);
        }
    }
    Ok(x.iter().zip(&delta).map(|(a, b)| a + b).collect())
}

/// Fraction of rows whose argmax logit matches the label.
pub fn accuracy(model: &ModelParams, ds: &Dataset, idx: &[usize]) -> Result<f64> {
    if idx.is_empty() {
        return Err(Error::Empty("accuracy over empty index set".into()));
    }
    let hits = crate::exec::map(idx, |&i| {
        let trace = forward_traced(model, ds.row(i), None).expect("validated rows");
        (crate::stats::argmax(trace.logits()) == ds.label(i)) as usize
    });
    Ok(hits.iter().sum::<usize>() as f64 / idx.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_blobs;

    fn cfg(epochs: usize, lr: f64, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 16,
            learning_rate: lr,
            seed,
            weight_decay: 0.0,
        }
    }

    #[test]
    fn zero_epochs_is_rejected() {
        let ds = gen_blobs(10, 3, 2, 2.0, 0).unwrap();
        assert!(matches!(
            train(&[3, 4, 2], 0.0, 0, &ds, &cfg(0, 0.1, 1)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_learning_rate_keeps_init_params() {
        let ds = gen_blobs(10, 3, 2, 2.0, 0).unwrap();
        let init = init_params(&[3, 4, 2], 5, 0.0).unwrap();
        let out = train_from(&init, &ds, &cfg(1, 0.0, 1), None).unwrap();
        assert_eq!(out.params(), init.params());
    }

    #[test]
    fn training_is_bit_reproducible() {
        let ds = gen_blobs(64, 4, 3, 3.0, 2).unwrap();
        let a = train(&[4, 8, 3], 0.0, 7, &ds, &cfg(5, 0.05, 3)).unwrap();
        let b = train(&[4, 8, 3], 0.0, 7, &ds, &cfg(5, 0.05, 3)).unwrap();
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn separable_blobs_train_to_high_accuracy() {
        let ds = gen_blobs(200, 4, 2, 4.0, 12).unwrap();
        let m = train(&[4, 8, 2], 0.0, 1, &ds, &cfg(50, 0.1, 2)).unwrap();
        let idx: Vec<usize> = (0..ds.len()).collect();
        let acc = accuracy(&m, &ds, &idx).unwrap();
        assert!(acc >= 0.95, "train accuracy {acc}");
    }

    #[test]
    fn adversarial_training_still_learns() {
        let ds = gen_blobs(120, 4, 2, 4.0, 12).unwrap();
        let init = init_params(&[4, 8, 2], 1, 0.0).unwrap();
        let adv = AdversarialTraining::default();
        let m = train_from(&init, &ds, &cfg(30, 0.1, 2), Some(&adv)).unwrap();
        let idx: Vec<usize> = (0..ds.len()).collect();
        let acc = accuracy(&m, &ds, &idx).unwrap();
        assert!(acc >= 0.9, "adversarially trained accuracy {acc}");
    }
}
