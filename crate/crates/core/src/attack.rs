//! Crafting deletion requests that corrupt predictive uncertainty.
//!
//! The attack fixes a set of victim inputs, freezes their predicted labels,
//! and scores candidate deletions by how well the induced model update lines
//! up with the direction that drives the victims' confidence margins where
//! the adversary wants them (down for underconfidence, up to a margin target
//! for overconfidence) while a KL regularizer keeps each victim's probability
//! vector close to the mean of same-class reference samples, so the damaged
//! predictions still look like natural ones.
//!
//! Deletion weights are relaxed to [0,1], optimized by projected gradient
//! ascent on the alignment objective with random restarts, and rounded to the
//! budget largest weights.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exec;
use crate::grad::{hvp, softmax, LossFn};
use crate::model::{forward_traced, hidden_rep, ModelParams};
use crate::rng;
use crate::stats::{argmax, dot, norm2, spearman};
use crate::tensor::Tensor;
use crate::unlearn::{pool_gradients, ForgetMask, PsiSpec};
use crate::uq::Estimator;
use rand::Rng;

const PROB_FLOOR: f64 = 1e-12;
const TAG_RESTART: u64 = 0x5245_5354;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum AttackMode {
    Under,
    Over,
    OvUn,
}

impl AttackMode {
    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "under" => Ok(AttackMode::Under),
            "over" => Ok(AttackMode::Over),
            "ov_un" => Ok(AttackMode::OvUn),
            other => Err(Error::Config(format!("unknown attack mode '{other}'"))),
        }
    }
}

/// Per-victim objective: push the margin to zero, or up to a target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VictimMode {
    Under,
    Over { margin_target: f64 },
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AttackConfig {
    pub mode: AttackMode,
    pub lambda: f64,
    pub k_neighbors: usize,
    pub xi_percentile: f64,
    pub margin_target: f64,
    pub budget: usize,
    pub restarts: usize,
    pub ascent_steps: usize,
    pub ascent_lr: f64,
    pub tau: f64,
    pub unlearn_method: crate::unlearn::UnlearnMethod,
    pub seed: u64,
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::Config("lambda must be nonnegative".into()));
        }
        if self.k_neighbors < 1 {
            return Err(Error::Config("k_neighbors must be at least 1".into()));
        }
        if !(0.0..100.0).contains(&self.xi_percentile) {
            return Err(Error::Config("xi percentile must lie in [0,100)".into()));
        }
        if !(0.0..=1.0).contains(&self.margin_target) || self.margin_target == 0.0 {
            return Err(Error::Config("margin target must lie in (0,1]".into()));
        }
        if self.restarts < 1 {
            return Err(Error::Config("need at least one restart".into()));
        }
        Ok(())
    }
}

/// Frozen per-victim state: predicted labels under the pre-attack model, the
/// objective mode, and the same-class reference pool drawn from the holdout.
#[derive(Debug, Clone)]
pub struct VictimState {
    pub victims: Vec<usize>,
    pub y_hat: Vec<usize>,
    pub modes: Vec<VictimMode>,
    /// Per victim: holdout rows (dataset indices) whose mean distribution the
    /// regularizer matches.
    pub ref_sets: Vec<Vec<usize>>,
    pub warnings: Vec<String>,
}

/// Proximity of `x` to the pool: exp of the negative mean hidden-space
/// distance to its K nearest pool members (ties by lower pool position).
/// When `x` itself is a pool member, its zero self-distance counts.
pub fn proximity(model: &ModelParams, x: &Tensor, pool: &Dataset, k: usize) -> Result<f64> {
    if k < 1 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if pool.len() < k {
        return Err(Error::Config(format!(
            "pool of {} cannot supply {k} neighbors",
            pool.len()
        )));
    }
    let rep = hidden_rep(model, x)?;
    let pool_idx: Vec<usize> = (0..pool.len()).collect();
    let reps = hidden_reps(model, pool, &pool_idx)?;
    Ok(gpr_from_reps(rep.data(), &reps, k))
}

fn hidden_reps(model: &ModelParams, ds: &Dataset, idx: &[usize]) -> Result<Vec<Vec<f64>>> {
    if let Some(&bad) = idx.iter().find(|&&i| i >= ds.len()) {
        return Err(Error::Index(format!("row {bad} out of range")));
    }
    Ok(exec::map(idx, |&i| {
        let trace = forward_traced(model, ds.row(i), None).expect("validated rows");
        trace.post.last().unwrap().clone()
    }))
}

fn gpr_from_reps(x: &[f64], pool: &[Vec<f64>], k: usize) -> f64 {
    let mut dists: Vec<(f64, usize)> = pool
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let d2: f64 = x.iter().zip(r).map(|(a, b)| (a - b) * (a - b)).sum();
            (d2.sqrt(), i)
        })
        .collect();
    dists.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let mean: f64 = dists[..k].iter().map(|(d, _)| d).sum::<f64>() / k as f64;
    (-mean).exp()
}

/// Proximity scores of every `pool_idx` row, each against the whole pool.
pub fn gpr_scores(model: &ModelParams, ds: &Dataset, pool_idx: &[usize], k: usize) -> Result<Vec<f64>> {
    if k < 1 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if pool_idx.len() < k {
        return Err(Error::Config(format!(
            "pool of {} cannot supply {k} neighbors",
            pool_idx.len()
        )));
    }
    let reps = hidden_reps(model, ds, pool_idx)?;
    Ok(exec::map_range(reps.len(), |i| gpr_from_reps(&reps[i], &reps, k)))
}

/// Reference rows for one victim: same-class holdout rows in the requested
/// proximity band. Under-mode keeps proximity at or above the xi-th
/// percentile; over-mode keeps the complementary low-proximity band.
/// Falls back to the single best-ranked row if the band is empty.
pub fn high_proximity_set(
    model: &ModelParams,
    ds: &Dataset,
    holdout: &[usize],
    y_hat: usize,
    k: usize,
    xi_percentile: f64,
    mode: VictimMode,
) -> Result<(Vec<usize>, bool)> {
    if !(0.0..100.0).contains(&xi_percentile) {
        return Err(Error::Config("xi percentile must lie in [0,100)".into()));
    }
    let same_class: Vec<usize> = holdout
        .iter()
        .copied()
        .filter(|&i| ds.label(i) == y_hat)
        .collect();
    if same_class.is_empty() {
        return Err(Error::Degenerate(format!(
            "holdout has no sample of class {y_hat}"
        )));
    }
    // Proximity is measured against the full holdout pool; the percentile
    // threshold is taken within the same-class scores.
    let all_scores = gpr_scores(model, ds, holdout, k.min(holdout.len()))?;
    let score_of: std::collections::HashMap<usize, f64> = holdout
        .iter()
        .copied()
        .zip(all_scores.iter().copied())
        .collect();
    let class_scores: Vec<f64> = same_class.iter().map(|i| score_of[i]).collect();
    let mut sorted = class_scores.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = sorted.len();
    let selected: Vec<usize> = match mode {
        VictimMode::Under => {
            let idx = ((xi_percentile / 100.0 * m as f64).floor() as usize).min(m - 1);
            let xi = sorted[idx];
            same_class
                .iter()
                .copied()
                .zip(class_scores.iter())
                .filter(|(_, &s)| s >= xi)
                .map(|(i, _)| i)
                .collect()
        }
        VictimMode::Over { .. } => {
            let keep = ((100.0 - xi_percentile) / 100.0 * m as f64).ceil() as usize;
            let idx = keep.max(1).min(m) - 1;
            let xi = sorted[idx];
            same_class
                .iter()
                .copied()
                .zip(class_scores.iter())
                .filter(|(_, &s)| s <= xi)
                .map(|(i, _)| i)
                .collect()
        }
    };
    if selected.is_empty() {
        // Single best-ranked fallback.
        let best = match mode {
            VictimMode::Under => {
                let mut best = (0usize, f64::NEG_INFINITY);
                for (pos, &s) in class_scores.iter().enumerate() {
                    if s > best.1 {
                        best = (pos, s);
                    }
                }
                same_class[best.0]
            }
            VictimMode::Over { .. } => {
                let mut best = (0usize, f64::INFINITY);
                for (pos, &s) in class_scores.iter().enumerate() {
                    if s < best.1 {
                        best = (pos, s);
                    }
                }
                same_class[best.0]
            }
        };
        return Ok((vec![best], true));
    }
    Ok((selected, false))
}

/// Freeze predicted labels, per-victim modes, and reference pools under the
/// current model. Victim labels come from the primary model's softmax.
pub fn build_victim_state(
    est: &Estimator,
    ds: &Dataset,
    victims: &[usize],
    holdout: &[usize],
    cfg: &AttackConfig,
) -> Result<VictimState> {
    cfg.validate()?;
    if victims.is_empty() {
        return Err(Error::Empty("no victims".into()));
    }
    let model = est.primary();
    let mut y_hat = Vec::with_capacity(victims.len());
    let mut modes = Vec::with_capacity(victims.len());
    for &v in victims {
        let trace = forward_traced(model, ds.row(v), None)?;
        let probs = softmax(trace.logits());
        let pred = argmax(&probs);
        y_hat.push(pred);
        let mode = match cfg.mode {
            AttackMode::Under => VictimMode::Under,
            AttackMode::Over => VictimMode::Over {
                margin_target: cfg.margin_target,
            },
            AttackMode::OvUn => {
                if pred == ds.label(v) {
                    VictimMode::Under
                } else {
                    VictimMode::Over {
                        margin_target: cfg.margin_target,
                    }
                }
            }
        };
        modes.push(mode);
    }
    // Reference pools depend only on (class, mode); cache per key.
    let mut cache: std::collections::HashMap<(usize, bool), (Vec<usize>, bool)> =
        std::collections::HashMap::new();
    let mut ref_sets = Vec::with_capacity(victims.len());
    let mut warnings = Vec::new();
    for (&yh, &mode) in y_hat.iter().zip(&modes) {
        let key = (yh, matches!(mode, VictimMode::Under));
        if !cache.contains_key(&key) {
            let (set, fell_back) =
                high_proximity_set(model, ds, holdout, yh, cfg.k_neighbors, cfg.xi_percentile, mode)?;
            if fell_back {
                warnings.push(format!(
                    "empty proximity band for class {yh}; fell back to the best-ranked holdout row"
                ));
            }
            cache.insert(key, (set, fell_back));
        }
        ref_sets.push(cache[&key].0.clone());
    }
    Ok(VictimState {
        victims: victims.to_vec(),
        y_hat,
        modes,
        ref_sets,
        warnings,
    })
}

fn margin(probs: &[f64], label: usize) -> f64 {
    let mut runner = f64::NEG_INFINITY;
    for (c, &p) in probs.iter().enumerate() {
        if c != label && p > runner {
            runner = p;
        }
    }
    probs[label] - runner
}

/// Runner-up class: argmax over classes other than `label`.
fn runner_up(probs: &[f64], label: usize) -> usize {
    let mut best = usize::MAX;
    let mut best_p = f64::NEG_INFINITY;
    for (c, &p) in probs.iter().enumerate() {
        if c != label && p > best_p {
            best_p = p;
            best = c;
        }
    }
    best
}

/// Hinge attack loss over the victims under the frozen labels.
pub fn attack_loss(est: &Estimator, ds: &Dataset, vs: &VictimState) -> Result<f64> {
    let probs = est.estimate_rows(ds, &vs.victims)?;
    let mut total = 0.0;
    for ((p, &yh), &mode) in probs.iter().zip(&vs.y_hat).zip(&vs.modes) {
        let m = margin(p.probs(), yh);
        total += match mode {
            VictimMode::Under => m.max(0.0),
            VictimMode::Over { margin_target } => (margin_target - m).max(0.0),
        };
    }
    Ok(total)
}

fn kl_floored(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| {
            let pf = pi.max(PROB_FLOOR);
            let qf = qi.max(PROB_FLOOR);
            pf * (pf / qf).ln()
        })
        .sum()
}

/// Mean reference distribution for each victim.
fn reference_means(est: &Estimator, ds: &Dataset, vs: &VictimState) -> Result<Vec<Vec<f64>>> {
    let mut means = Vec::with_capacity(vs.victims.len());
    for refs in &vs.ref_sets {
        if refs.is_empty() {
            return Err(Error::Empty("victim has an empty reference set".into()));
        }
        let probs = est.estimate_rows(ds, refs)?;
        let c = probs[0].class_count();
        let mut mean = vec![0.0; c];
        for p in &probs {
            for (m, &v) in mean.iter_mut().zip(p.probs()) {
                *m += v;
            }
        }
        let inv = 1.0 / refs.len() as f64;
        mean.iter_mut().for_each(|m| *m *= inv);
        means.push(mean);
    }
    Ok(means)
}

/// KL stealth regularizer: victims' distributions against their reference
/// means, probabilities floored before logs.
pub fn regularizer_kl(est: &Estimator, ds: &Dataset, vs: &VictimState) -> Result<f64> {
    let probs = est.estimate_rows(ds, &vs.victims)?;
    let means = reference_means(est, ds, vs)?;
    Ok(probs
        .iter()
        .zip(&means)
        .map(|(p, q)| kl_floored(p.probs(), q))
        .sum())
}

/// Total crafting loss: hinge term plus lambda times the KL regularizer.
/// With lambda zero the regularizer (and its reference pools) is not touched.
pub fn total_attack_loss(est: &Estimator, ds: &Dataset, vs: &VictimState, lambda: f64) -> Result<f64> {
    let l1 = attack_loss(est, ds, vs)?;
    if lambda == 0.0 {
        return Ok(l1);
    }
    Ok(l1 + lambda * regularizer_kl(est, ds, vs)?)
}

/// softmax vector-Jacobian product.
fn softmax_vjp(p: &[f64], upstream: &[f64]) -> Vec<f64> {
    let d = dot(p, upstream);
    p.iter().zip(upstream).map(|(&pi, &ui)| pi * (ui - d)).collect()
}

/// Gradient of the estimator output contracted with `upstream`, taken with
/// respect to the primary model's parameters. Exact for all three kinds: the
/// ensemble and MC-dropout means are differentiated through the primary
/// member and the fixed seeded passes respectively.
fn backprop_estimator(est: &Estimator, x: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
    let model = est.primary();
    match est.kind() {
        crate::uq::EstimatorKind::Softmax => {
            let trace = forward_traced(model, x, None)?;
            let p = softmax(trace.logits());
            let dlogits = softmax_vjp(&p, upstream);
            Ok(crate::grad::backward(model, &trace, &dlogits).0)
        }
        crate::uq::EstimatorKind::Ensemble => {
            let scale = 1.0 / est.models().len() as f64;
            let trace = forward_traced(model, x, None)?;
            let p = softmax(trace.logits());
            let scaled: Vec<f64> = upstream.iter().map(|u| u * scale).collect();
            let dlogits = softmax_vjp(&p, &scaled);
            Ok(crate::grad::backward(model, &trace, &dlogits).0)
        }
        crate::uq::EstimatorKind::McDropout => {
            let m = est.mc_samples();
            let scale = 1.0 / m as f64;
            let scaled: Vec<f64> = upstream.iter().map(|u| u * scale).collect();
            let mut acc = vec![0.0; model.params().len()];
            for k in 0..m {
                let seed = est.mc_seed().wrapping_add(k as u64);
                let trace = forward_traced(model, x, Some(seed))?;
                let p = softmax(trace.logits());
                let dlogits = softmax_vjp(&p, &scaled);
                let (g, _) = crate::grad::backward(model, &trace, &dlogits);
                for (a, v) in acc.iter_mut().zip(&g) {
                    *a += v;
                }
            }
            Ok(acc)
        }
    }
}

/// Gradient of the total crafting loss with respect to the primary model's
/// parameters, with every term evaluated at the current model.
pub fn grad_total_attack_loss(
    est: &Estimator,
    ds: &Dataset,
    vs: &VictimState,
    lambda: f64,
) -> Result<Vec<f64>> {
    let victim_probs = est.estimate_rows(ds, &vs.victims)?;
    let means = if lambda > 0.0 {
        reference_means(est, ds, vs)?
    } else {
        vec![Vec::new(); vs.victims.len()]
    };
    let model = est.primary();
    let mut grad = vec![0.0; model.params().len()];
    // Upstream gradients accumulated per reference row (sets overlap).
    let mut ref_upstream: std::collections::HashMap<usize, Vec<f64>> =
        std::collections::HashMap::new();
    for (vpos, ((p, &yh), &mode)) in victim_probs.iter().zip(&vs.y_hat).zip(&vs.modes).enumerate() {
        let probs = p.probs();
        let c = probs.len();
        let mut upstream = vec![0.0; c];
        // Hinge term.
        let m = margin(probs, yh);
        let active = match mode {
            VictimMode::Under => m > 0.0,
            VictimMode::Over { margin_target } => margin_target - m > 0.0,
        };
        if active {
            let r = runner_up(probs, yh);
            let sign = match mode {
                VictimMode::Under => 1.0,
                VictimMode::Over { .. } => -1.0,
            };
            upstream[yh] += sign;
            upstream[r] -= sign;
        }
        // KL term, floored.
        if lambda > 0.0 {
            let q = &means[vpos];
            for j in 0..c {
                if probs[j] > PROB_FLOOR {
                    let pf = probs[j].max(PROB_FLOOR);
                    let qf = q[j].max(PROB_FLOOR);
                    upstream[j] += lambda * ((pf / qf).ln() + 1.0);
                }
            }
            let refs = &vs.ref_sets[vpos];
            let inv = 1.0 / refs.len() as f64;
            for &i in refs {
                let entry = ref_upstream.entry(i).or_insert_with(|| vec![0.0; c]);
                for j in 0..c {
                    if q[j] > PROB_FLOOR {
                        let pf = probs[j].max(PROB_FLOOR);
                        let qf = q[j].max(PROB_FLOOR);
                        entry[j] += lambda * inv * (-pf / qf);
                    }
                }
            }
        }
        if upstream.iter().any(|&u| u != 0.0) {
            let g = backprop_estimator(est, ds.row(vs.victims[vpos]), &upstream)?;
            for (a, v) in grad.iter_mut().zip(&g) {
                *a += v;
            }
        }
    }
    let mut ref_rows: Vec<usize> = ref_upstream.keys().copied().collect();
    ref_rows.sort_unstable();
    let ref_grads = exec::map(&ref_rows, |&i| {
        backprop_estimator(est, ds.row(i), &ref_upstream[&i]).expect("validated rows")
    });
    for g in &ref_grads {
        for (a, v) in grad.iter_mut().zip(g) {
            *a += v;
        }
    }
    Ok(grad)
}

/// Cosine similarity between the crafting-loss gradient and the update the
/// deletion weights would induce; zero when either side is numerically null.
pub fn alignment_objective(
    est: &Estimator,
    ds: &Dataset,
    dt: &[usize],
    weights: &[f64],
    vs: &VictimState,
    lambda: f64,
    psi: &PsiSpec,
) -> Result<f64> {
    let g = grad_total_attack_loss(est, ds, vs, lambda)?;
    let update = crate::unlearn::model_update_psi(est.primary(), ds, dt, weights, psi)?;
    Ok(cosine(&g, &update))
}

pub(crate) fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = norm2(a);
    let nb = norm2(b);
    if na < 1e-12 || nb < 1e-12 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

/// Outcome of mask optimization: the rounded mask, the best continuous
/// weights, per-restart objectives, and a degeneracy flag (no usable
/// gradient anywhere).
#[derive(Debug, Clone)]
pub struct MaskOutcome {
    pub mask: ForgetMask,
    pub weights: Vec<f64>,
    pub objective: f64,
    pub per_restart: Vec<f64>,
    pub degenerate: bool,
}

/// The crafting direction: the induced update must *descend* the total
/// attack loss, so masks are optimized to align the update with the negated
/// loss gradient. The traditional label attack instead ascends the victims'
/// cross-entropy, so its direction enters un-negated.
fn craft_direction(est: &Estimator, ds: &Dataset, vs: &VictimState, lambda: f64) -> Result<Vec<f64>> {
    let g = grad_total_attack_loss(est, ds, vs, lambda)?;
    Ok(g.iter().map(|v| -v).collect())
}

/// Gradient of the victims' mean cross-entropy against the given labels.
fn grad_victim_ce(est: &Estimator, ds: &Dataset, victims: &[usize], labels: &[usize]) -> Result<Vec<f64>> {
    let probs = est.estimate_rows(ds, victims)?;
    let model = est.primary();
    let mut grad = vec![0.0; model.params().len()];
    let inv = 1.0 / victims.len() as f64;
    for ((&v, p), &y) in victims.iter().zip(&probs).zip(labels) {
        let mut upstream = vec![0.0; p.class_count()];
        upstream[y] = -inv / p.probs()[y].max(PROB_FLOOR);
        let g = backprop_estimator(est, ds.row(v), &upstream)?;
        for (a, x) in grad.iter_mut().zip(&g) {
            *a += x;
        }
    }
    Ok(grad)
}

/// Maximize cos(direction, psi(w)) over w in [0,1]^T by projected gradient
/// ascent with seeded random restarts; ties across restarts go to the lowest
/// restart index. Weights are rounded to the budget largest at the end.
fn optimize_direction(
    theta_star: &ModelParams,
    ds: &Dataset,
    dt: &[usize],
    direction: &[f64],
    cfg: &AttackConfig,
    psi: &PsiSpec,
) -> Result<MaskOutcome> {
    if dt.len() < cfg.budget {
        return Err(Error::Config(format!(
            "budget {} exceeds the adversary pool of {}",
            cfg.budget,
            dt.len()
        )));
    }
    let t = dt.len();
    let grads = pool_gradients(theta_star, ds, dt)?;
    let dir_norm = norm2(direction);
    // dir^T g_t per candidate, reused every step.
    let dir_dot: Vec<f64> = grads.iter().map(|g| dot(direction, g)).collect();

    // For the second-order operator, psi(w) = S (G w) with S symmetric, so
    // grad_w cos = G^T S dir / (..) - cos * G^T S psi / |psi|^2 needs one
    // extra solve per step; S dir is precomputed.
    let s_dir: Option<Vec<f64>> = match psi {
        PsiSpec::FirstOrder { .. } => None,
        PsiSpec::SecondOrder { .. } => {
            let solved = solve_psi(theta_star, ds, direction, psi)?;
            Some(solved)
        }
    };
    let dir_dot_solved: Option<Vec<f64>> = s_dir
        .as_ref()
        .map(|sd| grads.iter().map(|g| dot(sd, g)).collect());

    // Restart 0 warm-starts at weights proportional to each candidate's raw
    // alignment with the direction (clipped at zero); the cosine landscape
    // has a flat plateau wherever the weighted update is anti-parallel to
    // the direction, and a purely random start can sit on it. Remaining
    // restarts draw uniform random weights.
    let greedy_init: Option<Vec<f64>> = {
        let scores: Vec<f64> = match dir_dot_solved.as_deref() {
            Some(ds_) => ds_.iter().map(|&v| v.max(0.0)).collect(),
            None => dir_dot.iter().map(|&v| v.max(0.0)).collect(),
        };
        let max = scores.iter().cloned().fold(0.0f64, f64::max);
        if max > 0.0 {
            Some(scores.iter().map(|&v| v / max).collect())
        } else {
            None
        }
    };

    let runs = exec::map_range(cfg.restarts, |r| -> Result<(f64, Vec<f64>, bool)> {
        let mut rng = rng::rng(rng::mix2(cfg.seed, TAG_RESTART, r as u64));
        let mut w: Vec<f64> = match (r, &greedy_init) {
            (0, Some(init)) => init.clone(),
            _ => (0..t).map(|_| rng.gen::<f64>()).collect(),
        };
        let mut saw_gradient = false;
        for _ in 0..cfg.ascent_steps {
            let (_, grad_w) = objective_and_grad(
                theta_star,
                ds,
                &grads,
                &dir_dot,
                dir_norm,
                direction,
                dir_dot_solved.as_deref(),
                &w,
                psi,
            )?;
            if norm2(&grad_w) > 1e-12 {
                saw_gradient = true;
            }
            for (wi, gi) in w.iter_mut().zip(&grad_w) {
                *wi = (*wi + cfg.ascent_lr * gi).clamp(0.0, 1.0);
            }
        }
        let (obj, _) = objective_and_grad(
            theta_star,
            ds,
            &grads,
            &dir_dot,
            dir_norm,
            direction,
            dir_dot_solved.as_deref(),
            &w,
            psi,
        )?;
        Ok((obj, w, saw_gradient))
    });

    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut per_restart = Vec::with_capacity(cfg.restarts);
    let mut any_gradient = false;
    for run in runs {
        let (obj, w, saw) = run?;
        per_restart.push(obj);
        any_gradient |= saw;
        let better = match &best {
            None => true,
            Some((b, _)) => obj > *b,
        };
        if better {
            best = Some((obj, w));
        }
    }
    let (objective, weights) = best.expect("at least one restart");
    let mask = ForgetMask::new(weights.clone(), cfg.budget)?.rounded();
    Ok(MaskOutcome {
        mask,
        weights,
        objective,
        per_restart,
        degenerate: !any_gradient,
    })
}

fn solve_psi(theta_star: &ModelParams, ds: &Dataset, rhs: &[f64], psi: &PsiSpec) -> Result<Vec<f64>> {
    match psi {
        PsiSpec::FirstOrder { .. } => Ok(rhs.to_vec()),
        PsiSpec::SecondOrder {
            train_idx,
            damping,
            cg_iters,
            cg_tol,
        } => {
            let hv = |v: &[f64]| hvp(theta_star, ds, train_idx, v, LossFn::CrossEntropy);
            let mut x = vec![0.0; rhs.len()];
            let mut r = rhs.to_vec();
            let mut p = r.clone();
            let mut rs: f64 = dot(&r, &r);
            for _ in 0..*cg_iters {
                if rs.sqrt() < *cg_tol {
                    break;
                }
                let mut ap = hv(&p)?;
                for (a, &pi) in ap.iter_mut().zip(&p) {
                    *a += damping * pi;
                }
                let pap = dot(&p, &ap);
                if pap <= 0.0 || !pap.is_finite() {
                    break;
                }
                let alpha = rs / pap;
                for ((xi, &pi), (ri, &ai)) in x.iter_mut().zip(&p).zip(r.iter_mut().zip(&ap)) {
                    *xi += alpha * pi;
                    *ri -= alpha * ai;
                }
                let rs_new = dot(&r, &r);
                let beta = rs_new / rs;
                for (pi, &ri) in p.iter_mut().zip(&r) {
                    *pi = ri + beta * *pi;
                }
                rs = rs_new;
            }
            Ok(x)
        }
    }
}

/// Objective cos(direction, psi(w)) and its gradient in w. For first order
/// psi(w) = tau * G w; tau cancels in the cosine. For second order
/// psi(w) = S G w with S the damped inverse-Hessian operator.
#[allow(clippy::too_many_arguments)]
fn objective_and_grad(
    theta_star: &ModelParams,
    ds: &Dataset,
    grads: &[Vec<f64>],
    dir_dot: &[f64],
    dir_norm: f64,
    direction: &[f64],
    dir_dot_solved: Option<&[f64]>,
    w: &[f64],
    psi: &PsiSpec,
) -> Result<(f64, Vec<f64>)> {
    let p = grads.first().map(|g| g.len()).unwrap_or(0);
    let mut y = vec![0.0; p];
    for (g, &wi) in grads.iter().zip(w) {
        if wi != 0.0 {
            for (a, &v) in y.iter_mut().zip(g) {
                *a += wi * v;
            }
        }
    }
    let update = solve_psi(theta_star, ds, &y, psi)?; // psi up to the tau scale
    let ny = norm2(&update);
    if dir_norm < 1e-12 || ny < 1e-12 {
        // Degenerate point: no usable objective; push towards candidates
        // whose gradients align with the direction at all.
        let grad_w: Vec<f64> = match dir_dot_solved {
            Some(ds_) => ds_.to_vec(),
            None => dir_dot.to_vec(),
        };
        return Ok((0.0, grad_w));
    }
    let s = dot(direction, &update);
    let obj = s / (dir_norm * ny);
    // d obj / d w_t = (dir^T S g_t) / (|dir||psi|) - s * (psi^T S g_t) / (|dir||psi|^3)
    let coef1 = 1.0 / (dir_norm * ny);
    let coef2 = s / (dir_norm * ny * ny * ny);
    let grad_w: Vec<f64> = match psi {
        PsiSpec::FirstOrder { .. } => grads
            .iter()
            .zip(dir_dot)
            .map(|(g, &dg)| coef1 * dg - coef2 * dot(&update, g))
            .collect(),
        PsiSpec::SecondOrder { .. } => {
            let s_update = solve_psi(theta_star, ds, &update, psi)?;
            let dds = dir_dot_solved.expect("solved direction present for second order");
            grads
                .iter()
                .zip(dds)
                .map(|(g, &dg)| coef1 * dg - coef2 * dot(&s_update, g))
                .collect()
        }
    };
    Ok((obj, grad_w))
}

/// Craft a deletion mask whose induced update drives the victims' total
/// attack loss down.
pub fn optimize_mask(
    est: &Estimator,
    ds: &Dataset,
    dt: &[usize],
    vs: &VictimState,
    cfg: &AttackConfig,
    psi: &PsiSpec,
) -> Result<MaskOutcome> {
    cfg.validate()?;
    let direction = craft_direction(est, ds, vs, cfg.lambda)?;
    optimize_direction(est.primary(), ds, dt, &direction, cfg, psi)
}

#[derive(Debug, Clone)]
pub enum BaselineKind {
    /// Uniformly random budget-sized deletion.
    Random,
    /// Traditional label attack: align the update with rising victim
    /// cross-entropy (optionally towards attacker-chosen labels).
    LabelAttack { targets: Option<Vec<usize>> },
}

/// Baseline deletion masks.
pub fn baseline_mask(
    kind: &BaselineKind,
    est: &Estimator,
    ds: &Dataset,
    dt: &[usize],
    vs: &VictimState,
    cfg: &AttackConfig,
    psi: &PsiSpec,
) -> Result<MaskOutcome> {
    cfg.validate()?;
    match kind {
        BaselineKind::Random => {
            if dt.len() < cfg.budget {
                return Err(Error::Config(format!(
                    "budget {} exceeds the adversary pool of {}",
                    cfg.budget,
                    dt.len()
                )));
            }
            let mut order: Vec<usize> = (0..dt.len()).collect();
            let mut r = rng::rng(rng::mix(cfg.seed, 0x5241_4e44));
            for i in (1..order.len()).rev() {
                let j = r.gen_range(0..=i);
                order.swap(i, j);
            }
            let mut weights = vec![0.0; dt.len()];
            for &i in order.iter().take(cfg.budget) {
                weights[i] = 1.0;
            }
            let mask = ForgetMask::new(weights.clone(), cfg.budget)?;
            Ok(MaskOutcome {
                mask,
                weights,
                objective: 0.0,
                per_restart: vec![],
                degenerate: false,
            })
        }
        BaselineKind::LabelAttack { targets } => {
            let direction = match targets {
                None => grad_victim_ce(est, ds, &vs.victims, &vs.y_hat)?,
                Some(t) => {
                    if t.len() != vs.victims.len() {
                        return Err(Error::Shape("one target label per victim required".into()));
                    }
                    let g = grad_victim_ce(est, ds, &vs.victims, t)?;
                    g.iter().map(|v| -v).collect()
                }
            };
            optimize_direction(est.primary(), ds, dt, &direction, cfg, psi)
        }
    }
}

/// Average the continuous weights of per-surrogate optimizations and round to
/// the budget. The target model is never touched while crafting.
pub fn transfer_attack(
    surrogates: &[ModelParams],
    ds: &Dataset,
    dt: &[usize],
    victims: &[usize],
    holdout: &[usize],
    cfg: &AttackConfig,
    psi: &PsiSpec,
) -> Result<MaskOutcome> {
    if surrogates.is_empty() {
        return Err(Error::Empty("transfer needs at least one surrogate".into()));
    }
    // Every surrogate runs the same seeded optimization schedule; the
    // surrogates themselves provide the diversity, and a single-surrogate
    // transfer degenerates to the white-box attack exactly.
    let outcomes = exec::map_range(surrogates.len(), |s| -> Result<MaskOutcome> {
        let est = Estimator::softmax(surrogates[s].clone());
        let vs = build_victim_state(&est, ds, victims, holdout, cfg)?;
        optimize_mask(&est, ds, dt, &vs, cfg, psi)
    });
    let mut avg = vec![0.0; dt.len()];
    let mut per_restart = Vec::new();
    let mut degenerate = true;
    for o in outcomes {
        let o = o?;
        for (a, &w) in avg.iter_mut().zip(&o.weights) {
            *a += w;
        }
        per_restart.push(o.objective);
        degenerate &= o.degenerate;
    }
    let inv = 1.0 / surrogates.len() as f64;
    avg.iter_mut().for_each(|a| *a *= inv);
    let mask = ForgetMask::new(avg.clone(), cfg.budget)?.rounded();
    let objective = per_restart.iter().sum::<f64>() * inv;
    Ok(MaskOutcome {
        mask,
        weights: avg,
        objective,
        per_restart,
        degenerate,
    })
}

/// Averaging-and-rounding helper shared by the transfer path (exposed for
/// direct testing of tie behavior).
pub fn average_and_round(weight_sets: &[Vec<f64>], budget: usize) -> Result<ForgetMask> {
    if weight_sets.is_empty() {
        return Err(Error::Empty("no weight sets".into()));
    }
    let t = weight_sets[0].len();
    if weight_sets.iter().any(|w| w.len() != t) {
        return Err(Error::Shape("ragged weight sets".into()));
    }
    let mut avg = vec![0.0; t];
    for ws in weight_sets {
        for (a, &w) in avg.iter_mut().zip(ws) {
            *a += w;
        }
    }
    let inv = 1.0 / weight_sets.len() as f64;
    avg.iter_mut().for_each(|a| *a *= inv);
    Ok(ForgetMask::new(avg, budget)?.rounded())
}

/// Spearman correlation between holdout proximity scores and the estimator's
/// confidence; the stealth regularizer leans on this being negative for
/// trained models.
pub fn proximity_confidence_spearman(
    est: &Estimator,
    ds: &Dataset,
    holdout: &[usize],
    k: usize,
) -> Result<f64> {
    let scores = gpr_scores(est.primary(), ds, holdout, k)?;
    let probs = est.estimate_rows(ds, holdout)?;
    let conf: Vec<f64> = probs.iter().map(|p| p.confidence()).collect();
    Ok(spearman(&scores, &conf))
}
