//! Monte-Carlo check that the high-dimensional logistic fit is overconfident,
//! with a calibration gap that grows linearly in the dimension-to-sample
//! ratio. Binary labels follow sigma(t) = 1 - 1/(1+e^-t) applied to a fixed
//! ground-truth direction (note the flipped convention: sigma is decreasing),
//! the fit is unregularized log-loss minimization by gradient descent, and
//! the gap at level p is p minus the empirical positive rate inside a band
//! around p.

use crate::error::{Error, Result};
use crate::exec;
use crate::rng;
use crate::stats::{mean, spearman};
use rand::Rng;
use rand_distr::StandardNormal;

/// The label activation: sigma(t) = 1 - logistic(t) = 1/(1+e^t).
pub fn sigma(t: f64) -> f64 {
    1.0 - 1.0 / (1.0 + (-t).exp())
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TheoryConfig {
    pub d: usize,
    pub kappas: Vec<f64>,
    pub trials: usize,
    pub p_grid: Vec<f64>,
    pub bin_halfwidth: f64,
    pub seed: u64,
    pub test_points: usize,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        TheoryConfig {
            d: 40,
            kappas: vec![0.02, 0.05, 0.1],
            trials: 200,
            p_grid: vec![0.6, 0.7, 0.8],
            bin_halfwidth: 0.05,
            seed: 1,
            test_points: 10_000,
        }
    }
}

impl TheoryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials < 1 {
            return Err(Error::Config("need at least one trial".into()));
        }
        if self.kappas.is_empty() || self.kappas.iter().any(|&k| k <= 0.0) {
            return Err(Error::Config("every kappa must be positive".into()));
        }
        for &k in &self.kappas {
            let n = (self.d as f64 / k).round() as usize;
            if n < self.d {
                return Err(Error::Config(format!(
                    "kappa {k} gives n={n} below d={}",
                    self.d
                )));
            }
        }
        if self.p_grid.iter().any(|&p| !(0.5..1.0).contains(&p)) {
            return Err(Error::Config("p grid entries must lie in (0.5, 1)".into()));
        }
        if self.bin_halfwidth <= 0.0 {
            return Err(Error::Config("bin halfwidth must be positive".into()));
        }
        if self.test_points < 1 {
            return Err(Error::Config("need at least one test point".into()));
        }
        Ok(())
    }
}

/// One sweep cell: mean calibration gap at level p for one kappa.
/// `delta` is None when every trial's band was empty.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CalCell {
    pub kappa: f64,
    pub p: f64,
    pub delta: Option<f64>,
    pub n_in_bin: usize,
}

/// Signal scale of the ground-truth coefficient vector (first axis).
const SIGNAL_SCALE: f64 = 2.0;

struct TrialOutcome {
    /// Per p-grid entry: (band count, positives in band).
    band: Vec<(usize, usize)>,
}

fn run_trial(d: usize, n: usize, test_points: usize, p_grid: &[f64], h: f64, seed: u64) -> TrialOutcome {
    let mut r = rng::rng(seed);
    let mut xs = vec![0.0f64; n * d];
    for v in xs.iter_mut() {
        *v = r.sample(StandardNormal);
    }
    // theta_star = (s, 0, .., 0): only the first feature carries signal.
    let ys: Vec<f64> = (0..n)
        .map(|i| {
            let t = SIGNAL_SCALE * xs[i * d];
            (r.gen::<f64>() < sigma(t)) as usize as f64
        })
        .collect();

    // Unregularized logistic ERM under the flipped activation:
    // P(Y=1|x) = sigma(theta^T x) = logistic(-theta^T x), so the per-sample
    // gradient in t is (y - p) and in theta it is (y - p) x.
    // Nesterov-accelerated gradient descent at a fixed step below 1/L, with
    // L = lambda_max(X^T X / n) / 4 from a short power iteration. Stops at
    // gradient norm 1e-6; near-separable draws hit the iteration cap with a
    // saturated but usable fit.
    let grad_at = |theta: &[f64]| -> Vec<f64> {
        let mut grad = vec![0.0; d];
        for i in 0..n {
            let row = &xs[i * d..(i + 1) * d];
            let t: f64 = row.iter().zip(theta).map(|(a, b)| a * b).sum();
            let p = sigma(t);
            let dt = ys[i] - p;
            for (g, &x) in grad.iter_mut().zip(row) {
                *g += dt * x;
            }
        }
        let inv = 1.0 / n as f64;
        grad.iter_mut().for_each(|g| *g *= inv);
        grad
    };
    let lambda_max = {
        let mut v = vec![1.0 / (d as f64).sqrt(); d];
        let mut lam = 1.0;
        for _ in 0..30 {
            let mut xv = vec![0.0; n];
            for i in 0..n {
                xv[i] = xs[i * d..(i + 1) * d].iter().zip(&v).map(|(a, b)| a * b).sum();
            }
            let mut next = vec![0.0; d];
            for i in 0..n {
                let row = &xs[i * d..(i + 1) * d];
                for (nj, &x) in next.iter_mut().zip(row) {
                    *nj += xv[i] * x;
                }
            }
            next.iter_mut().for_each(|x| *x /= n as f64);
            lam = next.iter().map(|x| x * x).sum::<f64>().sqrt();
            let inv = 1.0 / lam.max(1e-12);
            v = next.iter().map(|x| x * inv).collect();
        }
        lam
    };
    let step = 1.0 / (lambda_max / 4.0 + 1e-9);
    let mut theta = vec![0.0f64; d];
    let mut prev = theta.clone();
    for it in 0..5_000usize {
        let momentum = it as f64 / (it + 3) as f64;
        let look: Vec<f64> = theta
            .iter()
            .zip(&prev)
            .map(|(t, p)| t + momentum * (t - p))
            .collect();
        let grad = grad_at(&look);
        let gnorm: f64 = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if gnorm < 1e-6 {
            break;
        }
        prev = theta;
        theta = look.iter().zip(&grad).map(|(t, g)| t - step * g).collect();
    }

    // Fresh test points; count positives within each probability band.
    let mut band = vec![(0usize, 0usize); p_grid.len()];
    for _ in 0..test_points {
        let mut t_hat = 0.0;
        let mut t_true = 0.0;
        for j in 0..d {
            let x: f64 = r.sample(StandardNormal);
            t_hat += theta[j] * x;
            if j == 0 {
                t_true = SIGNAL_SCALE * x;
            }
        }
        let p_hat = sigma(t_hat);
        let y = (r.gen::<f64>() < sigma(t_true)) as usize;
        for (slot, &p) in band.iter_mut().zip(p_grid) {
            if (p_hat - p).abs() <= h {
                slot.0 += 1;
                slot.1 += y;
            }
        }
    }
    TrialOutcome { band }
}

/// Sweep the kappa grid: for each (kappa, p) cell, average the per-trial
/// calibration gaps p - P(Y=1 | p_hat in [p-h, p+h]). The flipped sign
/// convention makes overconfidence show up as a positive gap for p > 0.5.
pub fn simulate_calibration(cfg: &TheoryConfig) -> Result<Vec<CalCell>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(cfg.kappas.len() * cfg.p_grid.len());
    for (ki, &kappa) in cfg.kappas.iter().enumerate() {
        let n = (cfg.d as f64 / kappa).round() as usize;
        let outcomes = exec::map_range(cfg.trials, |t| {
            run_trial(
                cfg.d,
                n,
                cfg.test_points,
                &cfg.p_grid,
                cfg.bin_halfwidth,
                rng::mix2(cfg.seed, ki as u64, t as u64),
            )
        });
        for (pi, &p) in cfg.p_grid.iter().enumerate() {
            let mut deltas = Vec::new();
            let mut total = 0usize;
            for o in &outcomes {
                let (count, pos) = o.band[pi];
                total += count;
                if count > 0 {
                    deltas.push(p - pos as f64 / count as f64);
                }
            }
            out.push(CalCell {
                kappa,
                p,
                delta: if deltas.is_empty() {
                    None
                } else {
                    Some(mean(&deltas))
                },
                n_in_bin: total,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
pub struct SlopeFit {
    pub slope: f64,
    pub spearman: f64,
    pub r2: f64,
}

/// Through-origin least squares of delta against kappa, plus the Spearman
/// rank correlation of the sweep.
pub fn fit_slope(points: &[(f64, f64)]) -> Result<SlopeFit> {
    if points.len() < 3 {
        return Err(Error::Config("need at least three kappa cells".into()));
    }
    let deltas: Vec<f64> = points.iter().map(|&(_, d)| d).collect();
    let kappas: Vec<f64> = points.iter().map(|&(k, _)| k).collect();
    if deltas.windows(2).all(|w| w[0] == w[1]) {
        return Err(Error::ZeroVariance("all calibration gaps are equal".into()));
    }
    let dbar = mean(&deltas);
    let ss_tot: f64 = deltas.iter().map(|d| (d - dbar) * (d - dbar)).sum();
    let num: f64 = points.iter().map(|&(k, d)| k * d).sum();
    let den: f64 = points.iter().map(|&(k, _)| k * k).sum();
    let slope = num / den;
    let ss_res: f64 = points.iter().map(|&(k, d)| (d - slope * k) * (d - slope * k)).sum();
    Ok(SlopeFit {
        slope,
        spearman: spearman(&kappas, &deltas),
        r2: 1.0 - ss_res / ss_tot,
    })
}

/// CSV rows for the sweep: kappa, p, delta_cal, n_in_bin. Missing cells keep
/// an empty delta field.
pub fn sweep_csv(cells: &[CalCell]) -> String {
    let mut s = String::from("kappa,p,delta_cal,n_in_bin\n");
    for c in cells {
        match c.delta {
            Some(d) => s.push_str(&format!("{},{},{},{}\n", c.kappa, c.p, d, c.n_in_bin)),
            None => s.push_str(&format!("{},{},,{}\n", c.kappa, c.p, c.n_in_bin)),
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigma_at_zero_is_exactly_half() {
        assert_eq!(sigma(0.0), 0.5);
        assert!(sigma(5.0) < 0.01);
        assert!(sigma(-5.0) > 0.99);
    }

    #[test]
    fn tiny_kappa_proxy_is_nearly_calibrated() {
        // d=5, n=50000: kappa = 1e-4; the fit is essentially exact and the
        // band around p=0.7 must contain close to 70% positives.
        let cfg = TheoryConfig {
            d: 5,
            kappas: vec![1e-4],
            trials: 3,
            p_grid: vec![0.7],
            bin_halfwidth: 0.05,
            seed: 5,
            test_points: 40_000,
        };
        let cells = simulate_calibration(&cfg).unwrap();
        let delta = cells[0].delta.expect("band must be populated");
        assert!(delta.abs() <= 0.02, "delta {delta}");
    }

    #[test]
    fn gap_grows_with_kappa() {
        let cfg = TheoryConfig {
            d: 30,
            kappas: vec![0.02, 0.1],
            trials: 24,
            p_grid: vec![0.7],
            bin_halfwidth: 0.05,
            seed: 9,
            test_points: 4_000,
        };
        let cells = simulate_calibration(&cfg).unwrap();
        let small = cells[0].delta.unwrap();
        let large = cells[1].delta.unwrap();
        assert!(small > 0.0, "kappa 0.02 gap {small}");
        assert!(large > small, "gaps {small} vs {large}");
    }

    #[test]
    fn slope_fit_recovers_exact_linearity() {
        let pts = [(0.02, 0.04), (0.05, 0.10), (0.1, 0.2)];
        let fit = fit_slope(&pts).unwrap();
        assert!((fit.slope - 2.0).abs() < 1e-12);
        assert!((fit.r2 - 1.0).abs() < 1e-12);
        assert!((fit.spearman - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_gaps_are_a_zero_variance_error() {
        let pts = [(0.02, 0.1), (0.05, 0.1), (0.1, 0.1)];
        assert!(matches!(fit_slope(&pts), Err(Error::ZeroVariance(_))));
    }

    #[test]
    fn simulation_is_deterministic_per_seed() {
        let cfg = TheoryConfig {
            d: 10,
            kappas: vec![0.1],
            trials: 4,
            p_grid: vec![0.7],
            bin_halfwidth: 0.05,
            seed: 3,
            test_points: 2_000,
        };
        let a = simulate_calibration(&cfg).unwrap();
        let b = simulate_calibration(&cfg).unwrap();
        assert_eq!(a[0].delta, b[0].delta);
        assert_eq!(a[0].n_in_bin, b[0].n_in_bin);
    }

    #[test]
    fn csv_has_header_and_blank_missing_cells() {
        let cells = vec![
            CalCell {
                kappa: 0.1,
                p: 0.7,
                delta: Some(0.05),
                n_in_bin: 100,
            },
            CalCell {
                kappa: 0.2,
                p: 0.9,
                delta: None,
                n_in_bin: 0,
            },
        ];
        let csv = sweep_csv(&cells);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "kappa,p,delta_cal,n_in_bin");
        assert_eq!(lines[1], "0.1,0.7,0.05,100");
        assert_eq!(lines[2], "0.2,0.9,,0");
    }
}
