//! Exact reverse-mode gradients for the flat-parameter MLP, plus
//! Hessian-vector products via central differences of those gradients.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exec;
use crate::model::{forward_traced, ModelParams, Trace};

/// Training/evaluation losses on logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossFn {
    CrossEntropy,
    SquaredError,
}

impl LossFn {
    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "cross_entropy" => Ok(LossFn::CrossEntropy),
            "squared_error" => Ok(LossFn::SquaredError),
            other => Err(Error::Config(format!("unknown loss tag '{other}'"))),
        }
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// log softmax(logits)[label], computed without exponent underflow.
pub fn log_softmax_at(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    logits[label] - lse
}

/// Loss value and its gradient with respect to the logits for one sample.
pub fn loss_and_dlogits(loss: LossFn, logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    match loss {
        LossFn::CrossEntropy => {
            let p = softmax(logits);
            let value = -log_softmax_at(logits, label);
            let mut d = p;
            d[label] -= 1.0;
            (value, d)
        }
        LossFn::SquaredError => {
            let mut value = 0.0;
            let mut d = Vec::with_capacity(logits.len());
            for (c, &z) in logits.iter().enumerate() {
                let t = if c == label { 1.0 } else { 0.0 };
                value += (z - t) * (z - t);
                d.push(2.0 * (z - t));
            }
            (value, d)
        }
    }
}

/// Backpropagate an upstream logit gradient through a recorded trace.
/// Returns the flat parameter gradient and the input gradient.
pub fn backward(model: &ModelParams, trace: &Trace, dlogits: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let layers = model.layer_count();
    let mut dparams = vec![0.0; model.params().len()];
    let mut delta = dlogits.to_vec();
    for l in (0..layers).rev() {
        let (start, rows, cols) = model.layer_extent(l);
        let (w, _) = model.layer(l);
        let below: &[f64] = if l == 0 { &trace.input } else { &trace.post[l - 1] };
        // dW, db
        for r in 0..rows {
            let dr = delta[r];
            let w_row = &mut dparams[start + r * cols..start + (r + 1) * cols];
            for (dw, &a) in w_row.iter_mut().zip(below.iter()) {
                *dw += dr * a;
            }
        }
        let b_off = start + rows * cols;
        for r in 0..rows {
            dparams[b_off + r] += delta[r];
        }
        // d(input of this layer)
        let mut dbelow = vec![0.0; cols];
        for r in 0..rows {
            let dr = delta[r];
            let w_row = &w[r * cols..(r + 1) * cols];
            for (db, &wv) in dbelow.iter_mut().zip(w_row.iter()) {
                *db += dr * wv;
            }
        }
        if l > 0 {
            // through dropout scaling and the ReLU gate
            let pre = &trace.pre[l - 1];
            let scale = &trace.drop_scale[l - 1];
            for ((dv, &z), &s) in dbelow.iter_mut().zip(pre.iter()).zip(scale.iter()) {
                *dv *= s * if z > 0.0 { 1.0 } else { 0.0 };
            }
        }
        delta = dbelow;
    }
    (dparams, delta)
}

/// Loss value and flat parameter gradient for one sample.
pub fn sample_loss_grad(
    model: &ModelParams,
    x: &[f64],
    label: usize,
    loss: LossFn,
) -> Result<(f64, Vec<f64>)> {
    let trace = forward_traced(model, x, None)?;
    let (value, dlogits) = loss_and_dlogits(loss, trace.logits(), label);
    let (dparams, _) = backward(model, &trace, &dlogits);
    Ok((value, dparams))
}

/// Per-sample parameter gradients for the given dataset rows, in row order.
pub fn per_sample_grads(
    model: &ModelParams,
    ds: &Dataset,
    idx: &[usize],
    loss: LossFn,
) -> Result<Vec<Vec<f64>>> {
    if idx.iter().any(|&i| i >= ds.len()) {
        return Err(Error::Index("gradient row out of range".into()));
    }
    let grads = exec::map(idx, |&i| {
        sample_loss_grad(model, ds.row(i), ds.label(i), loss)
            .map(|(_, g)| g)
            .expect("validated rows")
    });
    Ok(grads)
}

/// Exact gradient of the mean loss over a batch.
pub fn grad_params(model: &ModelParams, ds: &Dataset, idx: &[usize], loss: LossFn) -> Result<Vec<f64>> {
    if idx.is_empty() {
        return Err(Error::Empty("gradient batch is empty".into()));
    }
    let grads = per_sample_grads(model, ds, idx, loss)?;
    let mut mean = vec![0.0; model.params().len()];
    for g in &grads {
        for (m, v) in mean.iter_mut().zip(g) {
            *m += v;
        }
    }
    let inv = 1.0 / idx.len() as f64;
    for m in &mut mean {
        *m *= inv;
    }
    Ok(mean)
}

/// Mean loss over a batch.
pub fn batch_loss(model: &ModelParams, ds: &Dataset, idx: &[usize], loss: LossFn) -> Result<f64> {
    if idx.is_empty() {
        return Err(Error::Empty("loss batch is empty".into()));
    }
    let vals = exec::map(idx, |&i| {
        let trace = forward_traced(model, ds.row(i), None).expect("validated rows");
        loss_and_dlogits(loss, trace.logits(), ds.label(i)).0
    });
    Ok(vals.iter().sum::<f64>() / idx.len() as f64)
}

/// Hessian-vector product of the mean batch loss, via central differences of
/// the analytic gradient. Step size scales inversely with the perturbation
/// magnitude so the probe stays in the quadratic regime.
pub fn hvp(model: &ModelParams, ds: &Dataset, idx: &[usize], v: &[f64], loss: LossFn) -> Result<Vec<f64>> {
    if v.len() != model.params().len() {
        return Err(Error::Shape(format!(
            "hvp direction has {} entries, model has {}",
            v.len(),
            model.params().len()
        )));
    }
    let vmax = v.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    if vmax == 0.0 {
        return Ok(vec![0.0; v.len()]);
    }
    let h = 1e-4 / (1.0 + vmax);
    let mut plus = model.params().to_vec();
    let mut minus = model.params().to_vec();
    for ((p, m), &vi) in plus.iter_mut().zip(minus.iter_mut()).zip(v) {
        *p += h * vi;
        *m -= h * vi;
    }
    let gp = grad_params(&model.with_params(plus)?, ds, idx, loss)?;
    let gm = grad_params(&model.with_params(minus)?, ds, idx, loss)?;
    Ok(gp
        .iter()
        .zip(gm.iter())
        .map(|(a, b)| (a - b) / (2.0 * h))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_blobs;
    use crate::train::init_params;

    /// Independent oracle: central finite difference of the batch loss.
    fn fd_grad(model: &ModelParams, ds: &Dataset, idx: &[usize], loss: LossFn, h: f64) -> Vec<f64> {
        let base = model.params().to_vec();
        (0..base.len())
            .map(|j| {
                let mut p = base.clone();
                p[j] += h;
                let lp = batch_loss(&model.with_params(p).unwrap(), ds, idx, loss).unwrap();
                let mut m = base.clone();
                m[j] -= h;
                let lm = batch_loss(&model.with_params(m).unwrap(), ds, idx, loss).unwrap();
                (lp - lm) / (2.0 * h)
            })
            .collect()
    }

    fn rel_inf_err(a: &[f64], b: &[f64]) -> f64 {
        let num = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        let den = 1.0 + a.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        num / den
    }

    /// Model whose hidden unit is dead for every input here (b1 very negative),
    /// so the logits equal the output bias exactly and the loss is a function
    /// of b2 alone.
    fn dead_relu_model(c: usize, b2: &[f64]) -> ModelParams {
        // layout: W1 (1), b1 (1), W2 (c), b2 (c)
        let mut params = vec![0.0; crate::model::param_count(&[1, 1, c])];
        params[1] = -10.0; // b1: hidden unit never fires
        let n = params.len();
        params[n - c..].copy_from_slice(b2);
        ModelParams::new(vec![1, 1, c], crate::model::Activation::Relu, params, 0.0).unwrap()
    }

    #[test]
    fn gradient_vanishes_at_an_exact_minimum() {
        // logits == one-hot target exactly, squared error => loss 0, grad 0.
        let m = dead_relu_model(2, &[1.0, 0.0]);
        let ds = Dataset::new(1, 1, 2, vec![0.5], vec![0]).unwrap();
        let g = grad_params(&m, &ds, &[0], LossFn::SquaredError).unwrap();
        assert!(g.iter().all(|v| v.abs() <= 1e-10), "grad {g:?}");
        assert!(batch_loss(&m, &ds, &[0], LossFn::SquaredError).unwrap() <= 1e-30);
    }

    /// Smallest |pre-activation| of any hidden unit over the batch. The FD
    /// oracle is only trustworthy when no ReLU kink sits within the probe
    /// distance; the analytic gradient itself has no such restriction.
    pub(crate) fn kink_margin(model: &ModelParams, ds: &Dataset, idx: &[usize]) -> f64 {
        let mut margin = f64::INFINITY;
        for &i in idx {
            let trace = forward_traced(model, ds.row(i), None).unwrap();
            for layer in &trace.pre[..trace.pre.len() - 1] {
                for &z in layer {
                    margin = margin.min(z.abs());
                }
            }
        }
        margin
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let ds = gen_blobs(24, 5, 3, 2.5, 1).unwrap();
        let idx: Vec<usize> = (0..ds.len()).collect();
        let mut checked = 0;
        let mut seed = 0u64;
        while checked < 4 {
            let m = init_params(&[5, 6, 4, 3], seed, 0.0).unwrap();
            seed += 1;
            if kink_margin(&m, &ds, &idx) < 1e-3 {
                continue; // FD probe would cross a ReLU kink
            }
            checked += 1;
            for loss in [LossFn::CrossEntropy, LossFn::SquaredError] {
                let g = grad_params(&m, &ds, &idx, loss).unwrap();
                let fd = fd_grad(&m, &ds, &idx, loss, 1e-5);
                let err = rel_inf_err(&g, &fd);
                assert!(err <= 1e-4, "seed {seed} loss {loss:?}: rel err {err}");
            }
        }
    }

    #[test]
    fn duplicated_batch_leaves_mean_gradient_unchanged() {
        let ds = gen_blobs(10, 3, 2, 2.0, 4).unwrap();
        let m = init_params(&[3, 5, 2], 2, 0.0).unwrap();
        let idx: Vec<usize> = (0..10).collect();
        let doubled: Vec<usize> = idx.iter().chain(idx.iter()).copied().collect();
        let a = grad_params(&m, &ds, &idx, LossFn::CrossEntropy).unwrap();
        let b = grad_params(&m, &ds, &doubled, LossFn::CrossEntropy).unwrap();
        assert!(rel_inf_err(&a, &b) <= 1e-12);
    }

    #[test]
    fn unknown_loss_tag_is_a_config_error() {
        assert!(LossFn::from_tag("cross_entropy").is_ok());
        assert!(matches!(LossFn::from_tag("focal"), Err(Error::Config(_))));
    }

    #[test]
    fn hvp_of_zero_vector_is_zero() {
        let ds = gen_blobs(6, 2, 2, 2.0, 0).unwrap();
        let m = init_params(&[2, 3, 2], 0, 0.0).unwrap();
        let v = vec![0.0; m.params().len()];
        let hv = hvp(&m, &ds, &[0, 1, 2], &v, LossFn::CrossEntropy).unwrap();
        assert!(hv.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn hvp_matches_known_hessian_on_logit_bias_block() {
        // Dead hidden unit: loss depends only on b2 and the cross-entropy
        // Hessian w.r.t. logits is diag(p) - p p^T, independent of labels.
        let b2 = [0.4, -0.3];
        let m = dead_relu_model(2, &b2);
        let ds = Dataset::new(2, 1, 2, vec![0.3, 0.9], vec![0, 1]).unwrap();
        let p = softmax(&b2);
        let n = m.params().len();
        let mut v = vec![0.0; n];
        v[n - 2] = 0.7; // direction in the b2 block
        v[n - 1] = -0.2;
        let hv = hvp(&m, &ds, &[0, 1], &v, LossFn::CrossEntropy).unwrap();
        let h00 = p[0] * (1.0 - p[0]);
        let h01 = -p[0] * p[1];
        let h11 = p[1] * (1.0 - p[1]);
        let want0 = h00 * v[n - 2] + h01 * v[n - 1];
        let want1 = h01 * v[n - 2] + h11 * v[n - 1];
        assert!((hv[n - 2] - want0).abs() <= 1e-6, "{} vs {want0}", hv[n - 2]);
        assert!((hv[n - 1] - want1).abs() <= 1e-6, "{} vs {want1}", hv[n - 1]);
        for j in 0..n - 2 {
            assert!(hv[j].abs() <= 1e-6, "dead block should stay zero, got {}", hv[j]);
        }
    }

    #[test]
    fn hvp_is_symmetric_as_a_bilinear_form() {
        use rand::Rng;
        let ds = gen_blobs(12, 4, 3, 2.0, 6).unwrap();
        let idx: Vec<usize> = (0..ds.len()).collect();
        let m = init_params(&[4, 5, 3], 3, 0.0).unwrap();
        let mut r = crate::rng::rng(99);
        let n = m.params().len();
        for _ in 0..3 {
            let u: Vec<f64> = (0..n).map(|_| r.gen::<f64>() - 0.5).collect();
            let v: Vec<f64> = (0..n).map(|_| r.gen::<f64>() - 0.5).collect();
            let hu = hvp(&m, &ds, &idx, &u, LossFn::CrossEntropy).unwrap();
            let hv = hvp(&m, &ds, &idx, &v, LossFn::CrossEntropy).unwrap();
            let uhv: f64 = u.iter().zip(&hv).map(|(a, b)| a * b).sum();
            let vhu: f64 = v.iter().zip(&hu).map(|(a, b)| a * b).sum();
            assert!(
                (uhv - vhu).abs() <= 1e-6 * (1.0 + uhv.abs()),
                "asymmetry: {uhv} vs {vhu}"
            );
        }
    }
}
