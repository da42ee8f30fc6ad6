//! Unlearning methods: given a trained model and a deletion request over the
//! adversary-visible pool, produce the post-deletion model. The first- and
//! second-order methods are also exposed as a differentiable update operator
//! over continuous deletion weights, which is what mask crafting runs on.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::grad::{hvp, per_sample_grads, LossFn};
use crate::model::ModelParams;
use crate::rng;
use rand::Rng;
use rand_distr::StandardNormal;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum UnlearnMethod {
    FirstOrder,
    SecondOrder,
    Unrolling,
    Fisher,
    Ssd,
    Sisa,
}

impl UnlearnMethod {
    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "first_order" => Ok(UnlearnMethod::FirstOrder),
            "second_order" => Ok(UnlearnMethod::SecondOrder),
            "unrolling" => Ok(UnlearnMethod::Unrolling),
            "fisher" => Ok(UnlearnMethod::Fisher),
            "ssd" => Ok(UnlearnMethod::Ssd),
            "sisa" => Ok(UnlearnMethod::Sisa),
            other => Err(Error::Config(format!("unknown unlearn method '{other}'"))),
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            UnlearnMethod::FirstOrder => "first_order",
            UnlearnMethod::SecondOrder => "second_order",
            UnlearnMethod::Unrolling => "unrolling",
            UnlearnMethod::Fisher => "fisher",
            UnlearnMethod::Ssd => "ssd",
            UnlearnMethod::Sisa => "sisa",
        }
    }
}

/// Deletion weights over the adversary-visible pool. Continuous in [0,1]
/// while a mask is being optimized; exactly `min(budget, len)` ones after
/// rounding.
#[derive(Debug, Clone, PartialEq)]
pub struct ForgetMask {
    weights: Vec<f64>,
    budget: usize,
}

impl ForgetMask {
    pub fn new(weights: Vec<f64>, budget: usize) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Empty("mask over an empty pool".into()));
        }
        if budget > weights.len() {
            return Err(Error::Config(format!(
                "budget {budget} exceeds pool size {}",
                weights.len()
            )));
        }
        if weights.iter().any(|&w| !(0.0..=1.0).contains(&w)) {
            return Err(Error::Config("mask weights must lie in [0,1]".into()));
        }
        Ok(ForgetMask { weights, budget })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn is_binary(&self) -> bool {
        self.weights.iter().all(|&w| w == 0.0 || w == 1.0)
    }

    /// Positions set to one. Only meaningful on a binary mask.
    pub fn selected(&self) -> Vec<usize> {
        self.weights
            .iter()
            .enumerate()
            .filter(|(_, &w)| w == 1.0)
            .map(|(i, _)| i)
            .collect()
    }

    /// Set the `budget` largest weights to one (ties to the lower index),
    /// everything else to zero.
    pub fn rounded(&self) -> ForgetMask {
        let mut order: Vec<usize> = (0..self.weights.len()).collect();
        order.sort_by(|&a, &b| {
            self.weights[b]
                .partial_cmp(&self.weights[a])
                .unwrap()
                .then(a.cmp(&b))
        });
        let mut weights = vec![0.0; self.weights.len()];
        for &i in order.iter().take(self.budget) {
            weights[i] = 1.0;
        }
        ForgetMask {
            weights,
            budget: self.budget,
        }
    }

    fn require_binary(&self, dt_len: usize) -> Result<Vec<usize>> {
        if self.weights.len() != dt_len {
            return Err(Error::Shape(format!(
                "mask covers {} entries but the pool has {dt_len}",
                self.weights.len()
            )));
        }
        if !self.is_binary() {
            return Err(Error::Config("mask must be rounded to binary first".into()));
        }
        Ok(self.selected())
    }
}

/// Write one line per pool entry: `<dataset index> <weight> <bit>`.
pub fn write_mask(path: &Path, dt: &[usize], mask: &ForgetMask) -> Result<()> {
    if dt.len() != mask.len() {
        return Err(Error::Shape("pool/mask length mismatch".into()));
    }
    let rounded = mask.rounded();
    let mut out = BufWriter::new(File::create(path)?);
    for ((&idx, &w), &bit) in dt.iter().zip(mask.weights()).zip(rounded.weights()) {
        writeln!(out, "{idx} {w} {}", bit as u8)?;
    }
    out.flush()?;
    Ok(())
}

/// Read a mask file back as (pool indices, binary mask).
pub fn read_mask(path: &Path) -> Result<(Vec<usize>, ForgetMask)> {
    let file = BufReader::new(File::open(path)?);
    let mut dt = Vec::new();
    let mut weights = Vec::new();
    let mut budget = 0usize;
    for (lineno, line) in file.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = t.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::Config(format!(
                "mask line {}: wanted 'index weight bit', got {} fields",
                lineno + 1,
                fields.len()
            )));
        }
        let idx: usize = fields[0]
            .parse()
            .map_err(|e| Error::Config(format!("mask line {}: {e}", lineno + 1)))?;
        let _weight: f64 = fields[1]
            .parse()
            .map_err(|e| Error::Config(format!("mask line {}: {e}", lineno + 1)))?;
        let bit: u8 = fields[2]
            .parse()
            .map_err(|e| Error::Config(format!("mask line {}: {e}", lineno + 1)))?;
        dt.push(idx);
        weights.push(bit as f64);
        budget += (bit == 1) as usize;
    }
    let mask = ForgetMask::new(weights, budget)?;
    Ok((dt, mask))
}

fn forget_indices(dt: &[usize], mask: &ForgetMask) -> Result<Vec<usize>> {
    let selected = mask.require_binary(dt.len())?;
    Ok(selected.into_iter().map(|p| dt[p]).collect())
}

fn add_scaled(base: &[f64], delta: &[f64], scale: f64) -> Vec<f64> {
    base.iter().zip(delta).map(|(b, d)| b + scale * d).collect()
}

/// Sum of per-sample cross-entropy gradients at the given rows.
fn grad_sum(model: &ModelParams, ds: &Dataset, rows: &[usize]) -> Result<Vec<f64>> {
    let grads = per_sample_grads(model, ds, rows, LossFn::CrossEntropy)?;
    let mut sum = vec![0.0; model.params().len()];
    for g in &grads {
        for (s, v) in sum.iter_mut().zip(g) {
            *s += v;
        }
    }
    Ok(sum)
}

/// One closed-form gradient-ascent step on the forgotten points:
/// theta_u = theta* + tau * sum of their per-sample gradients.
pub fn unlearn_first_order(
    theta_star: &ModelParams,
    ds: &Dataset,
    dt: &[usize],
    mask: &ForgetMask,
    tau: f64,
) -> Result<ModelParams> {
    let forget = forget_indices(dt, mask)?;
    if forget.is_empty() {
        return Ok(theta_star.clone());
    }
    let g = grad_sum(theta_star, ds, &forget)?;
    theta_star.with_params(add_scaled(theta_star.params(), &g, tau))
}

#[derive(Debug, Clone, Copy)]
pub struct CgInfo {
    pub converged: bool,
    pub residual: f64,
    pub iterations: usize,
}

/// Conjugate-gradient solve of (H + damping I) x = b where H v is evaluated
/// by `hv`. Returns the final iterate even when tolerance was not reached.
fn conjugate_gradient(
    hv: impl Fn(&[f64]) -> Result<Vec<f64>>,
    b: &[f64],
    damping: f64,
    max_iters: usize,
    tol: f64,
) -> Result<(Vec<f64>, CgInfo)> {
    let n = b.len();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut rs: f64 = r.iter().map(|v| v * v).sum();
    let mut info = CgInfo {
        converged: rs.sqrt() < tol,
        residual: rs.sqrt(),
        iterations: 0,
    };
    for it in 0..max_iters {
        if rs.sqrt() < tol {
            info.converged = true;
            break;
        }
        let mut ap = hv(&p)?;
        for (a, &pi) in ap.iter_mut().zip(&p) {
            *a += damping * pi;
        }
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if pap <= 0.0 || !pap.is_finite() {
            // Indefinite curvature direction; stop with the best iterate.
            break;
        }
        let alpha = rs / pap;
        for ((xi, &pi), (ri, &ai)) in x.iter_mut().zip(&p).zip(r.iter_mut().zip(&ap)) {
            *xi += alpha * pi;
            *ri -= alpha * ai;
        }
        let rs_new: f64 = r.iter().map(|v| v * v).sum();
        let beta = rs_new / rs;
        for (pi, &ri) in p.iter_mut().zip(&r) {
            *pi = ri + beta * *pi;
        }
        rs = rs_new;
        info.iterations = it + 1;
        info.residual = rs.sqrt();
        info.converged = info.residual < tol;
    }
    Ok((x, info))
}

/// Influence-style update: theta_u = theta* + (H_retained + damping I)^-1 g,
/// with g the summed gradient of the forgotten points and H the Hessian of
/// the mean retained loss, applied through CG on Hessian-vector products.
pub fn unlearn_second_order(
    theta_star: &ModelParams,
    ds: &Dataset,
    train_idx: &[usize],
    dt: &[usize],
    mask: &ForgetMask,
    damping: f64,
    cg_iters: usize,
    cg_tol: f64,
) -> Result<(ModelParams, CgInfo)> {
    let forget = forget_indices(dt, mask)?;
    if forget.is_empty() {
        return Ok((
            theta_star.clone(),
            CgInfo {
                converged: true,
                residual: 0.0,
                iterations: 0,
            },
        ));
    }
    let forget_set: std::collections::HashSet<usize> = forget.iter().copied().collect();
    let retained: Vec<usize> = train_idx
        .iter()
        .copied()
        .filter(|i| !forget_set.contains(i))
        .collect();
    if retained.is_empty() {
        return Err(Error::Config("second-order unlearning needs a nonempty retained set".into()));
    }
    let g = grad_sum(theta_star, ds, &forget)?;
    let hv = |v: &[f64]| hvp(theta_star, ds, &retained, v, LossFn::CrossEntropy);
    let (x, info) = conjugate_gradient(hv, &g, damping, cg_iters, cg_tol)?;
    let params = add_scaled(theta_star.params(), &x, 1.0);
    Ok((theta_star.with_params(params)?, info))
}

/// First-order unrolled-SGD correction: add back lr * epochs times the
/// forgotten points' gradients evaluated at the recorded initialization.
pub fn unlearn_unrolling(
    theta_star: &ModelParams,
    theta_init: &ModelParams,
    ds: &Dataset,
    dt: &[usize],
    mask: &ForgetMask,
    lr: f64,
    epochs: usize,
) -> Result<ModelParams> {
    let forget = forget_indices(dt, mask)?;
    if forget.is_empty() {
        return Ok(theta_star.clone());
    }
    if theta_init.params().len() != theta_star.params().len() {
        return Err(Error::Shape("init/trained parameter lengths differ".into()));
    }
    let g = grad_sum(theta_init, ds, &forget)?;
    theta_star.with_params(add_scaled(theta_star.params(), &g, lr * epochs as f64))
}

/// Diagonal empirical Fisher: mean of squared per-sample cross-entropy
/// gradients over the given rows.
pub fn diag_fisher(model: &ModelParams, ds: &Dataset, rows: &[usize]) -> Result<Vec<f64>> {
    if rows.is_empty() {
        return Err(Error::Empty("fisher over an empty set".into()));
    }
    let grads = per_sample_grads(model, ds, rows, LossFn::CrossEntropy)?;
    let mut acc = vec![0.0; model.params().len()];
    for g in &grads {
        for (a, v) in acc.iter_mut().zip(g) {
            *a += v * v;
        }
    }
    let inv = 1.0 / rows.len() as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    Ok(acc)
}

/// Fisher-noise forgetting: add zero-mean Gaussian noise with per-parameter
/// variance noise_scale^2 / (F_i + damping), F the retained-data Fisher.
pub fn unlearn_fisher(
    theta_star: &ModelParams,
    ds: &Dataset,
    train_idx: &[usize],
    dt: &[usize],
    mask: &ForgetMask,
    noise_scale: f64,
    damping: f64,
    seed: u64,
) -> Result<ModelParams> {
    let forget = forget_indices(dt, mask)?;
    let forget_set: std::collections::HashSet<usize> = forget.iter().copied().collect();
    let retained: Vec<usize> = train_idx
        .iter()
        .copied()
        .filter(|i| !forget_set.contains(i))
        .collect();
    if retained.is_empty() {
        return Err(Error::Config("fisher forgetting needs a nonempty retained set".into()));
    }
    if noise_scale == 0.0 {
        return Ok(theta_star.clone());
    }
    let f = diag_fisher(theta_star, ds, &retained)?;
    let mut r = rng::rng(seed);
    let params: Vec<f64> = theta_star
        .params()
        .iter()
        .zip(&f)
        .map(|(&p, &fi)| {
            let sd = (noise_scale * noise_scale / (fi + damping)).sqrt();
            let z: f64 = r.sample(StandardNormal);
            p + sd * z
        })
        .collect();
    theta_star.with_params(params)
}

/// Selective synaptic dampening: parameters whose forget-set Fisher exceeds
/// alpha times the full-data Fisher are shrunk by min(lambda * F_D / F_f, 1).
pub fn unlearn_ssd(
    theta_star: &ModelParams,
    ds: &Dataset,
    train_idx: &[usize],
    dt: &[usize],
    mask: &ForgetMask,
    alpha: f64,
    lambda_s: f64,
) -> Result<ModelParams> {
    let forget = forget_indices(dt, mask)?;
    if forget.is_empty() {
        return Err(Error::Empty("ssd needs a nonempty forget set".into()));
    }
    let f_forget = diag_fisher(theta_star, ds, &forget)?;
    let f_full = diag_fisher(theta_star, ds, train_idx)?;
    let params: Vec<f64> = theta_star
        .params()
        .iter()
        .zip(f_forget.iter().zip(&f_full))
        .map(|(&p, (&ff, &fd))| {
            if ff > alpha * fd {
                p * (lambda_s * fd / ff).min(1.0)
            } else {
                p
            }
        })
        .collect();
    theta_star.with_params(params)
}

/// How the differentiable model-update operator is parameterized.
#[derive(Debug, Clone)]
pub enum PsiSpec<'a> {
    /// Update = tau * sum_t w_t * grad_t; linear in the weights.
    FirstOrder { tau: f64 },
    /// Update = (H_train + damping I)^-1 sum_t w_t grad_t. The Hessian is
    /// taken over the full training set so the operator stays linear in w.
    SecondOrder {
        train_idx: &'a [usize],
        damping: f64,
        cg_iters: usize,
        cg_tol: f64,
    },
}

impl<'a> PsiSpec<'a> {
    pub fn for_method(
        method: UnlearnMethod,
        tau: f64,
        train_idx: &'a [usize],
        damping: f64,
        cg_iters: usize,
        cg_tol: f64,
    ) -> Result<Self> {
        match method {
            UnlearnMethod::FirstOrder => Ok(PsiSpec::FirstOrder { tau }),
            UnlearnMethod::SecondOrder => Ok(PsiSpec::SecondOrder {
                train_idx,
                damping,
                cg_iters,
                cg_tol,
            }),
            other => Err(Error::Config(format!(
                "unlearn method '{}' is not differentiable in the deletion weights; craft with first_order and transfer instead",
                other.tag()
            ))),
        }
    }
}

/// The model update induced by continuous deletion weights over the pool.
pub fn model_update_psi(
    theta_star: &ModelParams,
    ds: &Dataset,
    dt: &[usize],
    weights: &[f64],
    spec: &PsiSpec,
) -> Result<Vec<f64>> {
    if weights.len() != dt.len() {
        return Err(Error::Shape("weights/pool length mismatch".into()));
    }
    let grads = per_sample_grads(theta_star, ds, dt, LossFn::CrossEntropy)?;
    let mut weighted = vec![0.0; theta_star.params().len()];
    for (g, &w) in grads.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        for (acc, v) in weighted.iter_mut().zip(g) {
            *acc += w * v;
        }
    }
    match spec {
        PsiSpec::FirstOrder { tau } => {
            weighted.iter_mut().for_each(|v| *v *= tau);
            Ok(weighted)
        }
        PsiSpec::SecondOrder {
            train_idx,
            damping,
            cg_iters,
            cg_tol,
        } => {
            let hv = |v: &[f64]| hvp(theta_star, ds, train_idx, v, LossFn::CrossEntropy);
            let (x, _) = conjugate_gradient(hv, &weighted, *damping, *cg_iters, *cg_tol)?;
            Ok(x)
        }
    }
}

/// Per-sample gradient table for the pool, reused across optimizer steps.
pub fn pool_gradients(theta_star: &ModelParams, ds: &Dataset, dt: &[usize]) -> Result<Vec<Vec<f64>>> {
    per_sample_grads(theta_star, ds, dt, LossFn::CrossEntropy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_blobs;
    use crate::grad::softmax;
    use crate::model::{Activation, ModelParams};

    /// arch [1,1,C] with the hidden unit dead everywhere: logits == b2, so
    /// Fisher diagonals and Hessian blocks have closed forms.
    fn dead_relu_model(b2: &[f64]) -> ModelParams {
        let c = b2.len();
        let mut params = vec![0.0; crate::model::param_count(&[1, 1, c])];
        params[1] = -10.0;
        let n = params.len();
        params[n - c..].copy_from_slice(b2);
        ModelParams::new(vec![1, 1, c], Activation::Relu, params, 0.0).unwrap()
    }

    fn all_zero_mask(len: usize) -> ForgetMask {
        ForgetMask::new(vec![0.0; len], 0).unwrap()
    }

    fn one_hot_mask(len: usize, at: usize) -> ForgetMask {
        let mut w = vec![0.0; len];
        w[at] = 1.0;
        ForgetMask::new(w, 1).unwrap()
    }

    #[test]
    fn rounding_keeps_exactly_budget_ones_with_low_index_ties() {
        let m = ForgetMask::new(vec![0.5, 0.9, 0.5, 0.1], 2).unwrap();
        let r = m.rounded();
        assert_eq!(r.weights(), &[1.0, 1.0, 0.0, 0.0]);
        assert_eq!(r.selected(), vec![0, 1]);
    }

    #[test]
    fn first_order_empty_mask_or_zero_tau_is_identity() {
        let ds = gen_blobs(12, 3, 2, 3.0, 1).unwrap();
        let m = crate::train::init_params(&[3, 4, 2], 0, 0.0).unwrap();
        let dt: Vec<usize> = (0..6).collect();
        let out = unlearn_first_order(&m, &ds, &dt, &all_zero_mask(6), 0.1).unwrap();
        assert_eq!(out.params(), m.params());
        let out = unlearn_first_order(&m, &ds, &dt, &one_hot_mask(6, 2), 0.0).unwrap();
        assert_eq!(out.params(), m.params());
    }

    #[test]
    fn first_order_single_point_matches_hand_gradient() {
        // Dead-ReLU binary model: per-sample CE gradient on the b2 block is
        // softmax(b2) - onehot(y); everything else is zero.
        let b2 = [0.4, -0.3];
        let m = dead_relu_model(&b2);
        let ds = crate::data::Dataset::new(3, 1, 2, vec![0.1, 0.2, 0.3], vec![0, 1, 0]).unwrap();
        let dt = vec![0usize, 1, 2];
        let tau = 0.05;
        let out = unlearn_first_order(&m, &ds, &dt, &one_hot_mask(3, 1), tau).unwrap();
        let p = softmax(&b2);
        let n = m.params().len();
        let mut want = m.params().to_vec();
        want[n - 2] += tau * p[0];
        want[n - 1] += tau * (p[1] - 1.0);
        for (a, b) in out.params().iter().zip(&want) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn second_order_empty_forget_set_is_identity() {
        let ds = gen_blobs(10, 3, 2, 3.0, 2).unwrap();
        let m = crate::train::init_params(&[3, 4, 2], 1, 0.0).unwrap();
        let train: Vec<usize> = (0..10).collect();
        let dt: Vec<usize> = (0..5).collect();
        let (out, info) =
            unlearn_second_order(&m, &ds, &train, &dt, &all_zero_mask(5), 1e-3, 30, 1e-9).unwrap();
        assert_eq!(out.params(), m.params());
        assert!(info.converged);
    }

    #[test]
    fn second_order_matches_analytic_solve_on_quadratic_block() {
        // Dead-ReLU model: the CE Hessian w.r.t. b2 is diag(p) - p p^T for
        // every sample, zero elsewhere, so (H + damping I)^-1 g is closed form.
        let b2 = [0.4, -0.3];
        let m = dead_relu_model(&b2);
        let ds = crate::data::Dataset::new(4, 1, 2, vec![0.1, 0.2, 0.3, 0.4], vec![0, 1, 0, 1]).unwrap();
        let train: Vec<usize> = vec![0, 1, 2, 3];
        let dt = vec![3usize];
        let mask = one_hot_mask(1, 0);
        let damping = 1e-2;
        let (out, info) =
            unlearn_second_order(&m, &ds, &train, &dt, &mask, damping, 100, 1e-12).unwrap();
        assert!(info.converged, "cg residual {}", info.residual);
        let p = softmax(&b2);
        // g on b2 block for the forgotten sample (label 1).
        let g = [p[0], p[1] - 1.0];
        // H + damping I on the block.
        let h = [
            p[0] * (1.0 - p[0]) + damping,
            -p[0] * p[1],
            -p[0] * p[1],
            p[1] * (1.0 - p[1]) + damping,
        ];
        let det = h[0] * h[3] - h[1] * h[2];
        let x = [
            (h[3] * g[0] - h[1] * g[1]) / det,
            (-h[2] * g[0] + h[0] * g[1]) / det,
        ];
        let n = m.params().len();
        assert!((out.params()[n - 2] - (m.params()[n - 2] + x[0])).abs() < 1e-6);
        assert!((out.params()[n - 1] - (m.params()[n - 1] + x[1])).abs() < 1e-6);
        // Dead block: gradient zero there, solution zero there.
        for j in 0..n - 2 {
            assert!((out.params()[j] - m.params()[j]).abs() < 1e-6);
        }
    }

    #[test]
    fn second_order_huge_damping_freezes_the_model() {
        let ds = gen_blobs(20, 3, 2, 3.0, 3).unwrap();
        let m = crate::train::init_params(&[3, 5, 2], 2, 0.0).unwrap();
        let train: Vec<usize> = (0..20).collect();
        let dt: Vec<usize> = (0..8).collect();
        let mask = one_hot_mask(8, 3);
        let (out, _) =
            unlearn_second_order(&m, &ds, &train, &dt, &mask, 1e9, 50, 1e-12).unwrap();
        let dist: f64 = out
            .params()
            .iter()
            .zip(m.params())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(dist <= 1e-6, "moved {dist}");
    }

    #[test]
    fn unrolling_identities_and_single_sample_recovery() {
        let ds = gen_blobs(8, 3, 2, 3.0, 4).unwrap();
        let m = crate::train::init_params(&[3, 4, 2], 3, 0.0).unwrap();
        let init = crate::train::init_params(&[3, 4, 2], 3, 0.0).unwrap();
        let dt: Vec<usize> = (0..4).collect();
        let out = unlearn_unrolling(&m, &init, &ds, &dt, &all_zero_mask(4), 0.1, 3).unwrap();
        assert_eq!(out.params(), m.params());
        let out = unlearn_unrolling(&m, &init, &ds, &dt, &one_hot_mask(4, 1), 0.0, 3).unwrap();
        assert_eq!(out.params(), m.params());

        // One sample, one epoch, batch of one: theta* = init - lr g(init);
        // adding lr * g(init) back must recover the initialization.
        let one = ds.gather(&[2]).unwrap();
        let cfg = crate::train::TrainConfig {
            epochs: 1,
            batch_size: 1,
            learning_rate: 0.3,
            seed: 9,
            weight_decay: 0.0,
        };
        let theta_init = crate::train::init_params(&[3, 4, 2], 17, 0.0).unwrap();
        let theta_star = crate::train::train_from(&theta_init, &one, &cfg, None).unwrap();
        let recovered =
            unlearn_unrolling(&theta_star, &theta_init, &one, &[0], &one_hot_mask(1, 0), 0.3, 1)
                .unwrap();
        for (a, b) in recovered.params().iter().zip(theta_init.params()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fisher_zero_noise_is_identity_and_seeded_draws_repeat() {
        let ds = gen_blobs(10, 3, 2, 3.0, 5).unwrap();
        let m = crate::train::init_params(&[3, 4, 2], 4, 0.0).unwrap();
        let train: Vec<usize> = (0..10).collect();
        let dt: Vec<usize> = (0..4).collect();
        let mask = one_hot_mask(4, 0);
        let out = unlearn_fisher(&m, &ds, &train, &dt, &mask, 0.0, 1e-3, 7).unwrap();
        assert_eq!(out.params(), m.params());
        let a = unlearn_fisher(&m, &ds, &train, &dt, &mask, 0.05, 1e-3, 7).unwrap();
        let b = unlearn_fisher(&m, &ds, &train, &dt, &mask, 0.05, 1e-3, 7).unwrap();
        let c = unlearn_fisher(&m, &ds, &train, &dt, &mask, 0.05, 1e-3, 8).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn fisher_noise_variance_tracks_inverse_fisher() {
        // Dead-ReLU model: Fisher on b2 is computable, and large-Fisher
        // coordinates must receive stochastically smaller noise.
        let b2 = [0.9, -0.9];
        let m = dead_relu_model(&b2);
        let ds =
            crate::data::Dataset::new(6, 1, 2, vec![0.1; 6], vec![0, 0, 0, 0, 1, 1]).unwrap();
        let train: Vec<usize> = (0..6).collect();
        let dt = vec![5usize];
        let mask = one_hot_mask(1, 0);
        let noise_scale = 0.1;
        let damping = 1e-3;
        let f = diag_fisher(&m, &ds, &train[..5]).unwrap();
        let n = m.params().len();
        let draws = 10_000;
        let mut acc = vec![0.0f64; 2];
        let mut acc2 = vec![0.0f64; 2];
        for seed in 0..draws {
            let out = unlearn_fisher(&m, &ds, &train, &dt, &mask, noise_scale, damping, seed).unwrap();
            for k in 0..2 {
                let eps = out.params()[n - 2 + k] - m.params()[n - 2 + k];
                acc[k] += eps;
                acc2[k] += eps * eps;
            }
        }
        for k in 0..2 {
            let mean = acc[k] / draws as f64;
            let var = acc2[k] / draws as f64 - mean * mean;
            let want = noise_scale * noise_scale / (f[n - 2 + k] + damping);
            let rel = (var - want).abs() / want;
            assert!(rel <= 0.05, "coordinate {k}: var {var} vs {want} (rel {rel})");
        }
    }

    #[test]
    fn ssd_sentinel_alpha_leaves_model_unchanged() {
        let ds = gen_blobs(10, 3, 2, 3.0, 6).unwrap();
        let m = crate::train::init_params(&[3, 4, 2], 5, 0.0).unwrap();
        let train: Vec<usize> = (0..10).collect();
        let dt: Vec<usize> = (0..4).collect();
        let out = unlearn_ssd(&m, &ds, &train, &dt, &one_hot_mask(4, 1), f64::INFINITY, 1.0).unwrap();
        assert_eq!(out.params(), m.params());
    }

    #[test]
    fn ssd_equal_fishers_mean_unit_dampening_factor() {
        // Forget set == full data makes F_f == F_D exactly; with lambda 1 the
        // factor is min(1,1) = 1 everywhere.
        let ds = gen_blobs(6, 3, 2, 3.0, 7).unwrap();
        let m = crate::train::init_params(&[3, 4, 2], 6, 0.0).unwrap();
        let train: Vec<usize> = (0..6).collect();
        let dt: Vec<usize> = (0..6).collect();
        let mask = ForgetMask::new(vec![1.0; 6], 6).unwrap();
        let out = unlearn_ssd(&m, &ds, &train, &dt, &mask, 0.5, 1.0).unwrap();
        assert_eq!(out.params(), m.params());
    }

    #[test]
    fn ssd_factors_match_hand_computed_fishers() {
        // Dead-ReLU model, three classes: per-sample gradient on b2 is
        // p - onehot(y) with p = softmax(b2) shared by every sample.
        let b2 = [0.4, -0.3, 0.1];
        let m = dead_relu_model(&b2);
        let p = softmax(&b2);
        let ds = crate::data::Dataset::new(3, 1, 3, vec![0.5, 0.5, 0.5], vec![0, 1, 1]).unwrap();
        let train = vec![0usize, 1, 2];
        let dt = vec![0usize];
        let mask = one_hot_mask(1, 0);
        let alpha = 1.0;
        let lambda_s = 1.0;
        // Hand Fishers on the b2 block.
        let sq = |v: f64| v * v;
        let f_d: Vec<f64> = (0..3)
            .map(|i| {
                let mut s = 0.0;
                for &y in &[0usize, 1, 1] {
                    let t = if i == y { 1.0 } else { 0.0 };
                    s += sq(p[i] - t);
                }
                s / 3.0
            })
            .collect();
        let f_f: Vec<f64> = (0..3)
            .map(|i| {
                let t = if i == 0 { 1.0 } else { 0.0 };
                sq(p[i] - t)
            })
            .collect();
        let out = unlearn_ssd(&m, &ds, &train, &dt, &mask, alpha, lambda_s).unwrap();
        let n = m.params().len();
        for i in 0..3 {
            let want = if f_f[i] > alpha * f_d[i] {
                b2[i] * (lambda_s * f_d[i] / f_f[i]).min(1.0)
            } else {
                b2[i]
            };
            let got = out.params()[n - 3 + i];
            assert!((got - want).abs() < 1e-12, "coord {i}: {got} vs {want}");
        }
        // At least one coordinate must actually be dampened for this fixture.
        assert!((0..3).any(|i| f_f[i] > alpha * f_d[i]));
    }

    #[test]
    fn psi_zero_weights_give_zero_update() {
        let ds = gen_blobs(8, 3, 2, 3.0, 8).unwrap();
        let m = crate::train::init_params(&[3, 4, 2], 7, 0.0).unwrap();
        let dt: Vec<usize> = (0..4).collect();
        let psi = model_update_psi(&m, &ds, &dt, &[0.0; 4], &PsiSpec::FirstOrder { tau: 0.1 }).unwrap();
        assert!(psi.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn psi_one_hot_weight_matches_scaled_sample_gradient() {
        let ds = gen_blobs(8, 3, 2, 3.0, 9).unwrap();
        let m = crate::train::init_params(&[3, 4, 2], 8, 0.0).unwrap();
        let dt: Vec<usize> = vec![1, 3, 5, 7];
        let tau = 0.2;
        let mut w = vec![0.0; 4];
        w[2] = 1.0;
        let psi = model_update_psi(&m, &ds, &dt, &w, &PsiSpec::FirstOrder { tau }).unwrap();
        let g = per_sample_grads(&m, &ds, &[5], LossFn::CrossEntropy).unwrap();
        for (a, b) in psi.iter().zip(&g[0]) {
            assert!((a - tau * b).abs() < 1e-15);
        }
    }

    #[test]
    fn psi_is_linear_in_the_weights() {
        let ds = gen_blobs(10, 3, 2, 3.0, 10).unwrap();
        let m = crate::train::init_params(&[3, 4, 2], 9, 0.0).unwrap();
        let dt: Vec<usize> = (0..5).collect();
        let w1 = [0.2, 0.0, 0.7, 0.1, 0.4];
        let w2 = [0.3, 0.5, 0.1, 0.0, 0.2];
        let spec = PsiSpec::FirstOrder { tau: 0.05 };
        let a = model_update_psi(&m, &ds, &dt, &w1, &spec).unwrap();
        let b = model_update_psi(&m, &ds, &dt, &w2, &spec).unwrap();
        let sum_w: Vec<f64> = w1.iter().zip(&w2).map(|(x, y)| x + y).collect();
        let ab = model_update_psi(&m, &ds, &dt, &sum_w, &spec).unwrap();
        for ((x, y), z) in a.iter().zip(&b).zip(&ab) {
            assert!((x + y - z).abs() <= 1e-10);
        }
    }

    #[test]
    fn psi_rejects_non_differentiable_methods() {
        let train: Vec<usize> = (0..4).collect();
        assert!(PsiSpec::for_method(UnlearnMethod::Ssd, 0.1, &train, 1e-3, 10, 1e-6).is_err());
        assert!(PsiSpec::for_method(UnlearnMethod::FirstOrder, 0.1, &train, 1e-3, 10, 1e-6).is_ok());
    }

    #[test]
    fn mask_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.txt");
        let dt = vec![10usize, 20, 30, 40];
        let mask = ForgetMask::new(vec![0.9, 0.1, 0.8, 0.3], 2).unwrap();
        write_mask(&path, &dt, &mask).unwrap();
        let (dt_back, mask_back) = read_mask(&path).unwrap();
        assert_eq!(dt_back, dt);
        assert_eq!(mask_back.weights(), mask.rounded().weights());
        assert_eq!(mask_back.budget(), 2);
    }

    #[test]
    fn sum_of_weights_lengths_must_match_pool() {
        let ds = gen_blobs(8, 3, 2, 3.0, 11).unwrap();
        let m = crate::train::init_params(&[3, 4, 2], 10, 0.0).unwrap();
        let dt: Vec<usize> = (0..4).collect();
        let bad = ForgetMask::new(vec![1.0, 0.0], 1).unwrap();
        assert!(unlearn_first_order(&m, &ds, &dt, &bad, 0.1).is_err());
    }
}
