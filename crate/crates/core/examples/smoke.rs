//! Diagnostic sweeps for pinning the reference configuration: training
//! convergence, frozen-label victim margins, Rand inertness, set-size
//! direction, and the proximity-confidence correlation.

use uulab_core::attack::proximity_confidence_spearman;
use uulab_core::config::{ExperimentConfig, MaskSource};
use uulab_core::harness::{Deployed, Pipeline};
use uulab_core::train::accuracy;

fn frozen_margin(p: &Pipeline, d: &Deployed, victims: &[usize], y_hat: &[usize]) -> f64 {
    let probs = p.probs_for(d, victims).unwrap();
    probs
        .iter()
        .zip(y_hat)
        .map(|(pv, &y)| pv.margin_for(y))
        .sum::<f64>()
        / victims.len() as f64
}

fn main() {
    for (wd, epochs) in [(1e-3, 100), (3e-3, 150), (1e-2, 150), (1e-2, 250)] {
        let mut base = ExperimentConfig::default();
        base.train.weight_decay = wd;
        base.train.epochs = epochs;
        let p = Pipeline::build(&base).unwrap();
        let all_train: Vec<usize> = (0..p.ds_train.len()).collect();
        let train_acc = accuracy(&p.theta_star, &p.ds_train, &all_train).unwrap();
        let rho = proximity_confidence_spearman(&p.estimator, &p.ds, &p.splits.holdout, 10).unwrap();
        let vs = p.victim_state().unwrap();
        let pre_dep = p.deployed_pre();
        let m_pre = frozen_margin(&p, &pre_dep, &vs.victims, &vs.y_hat);
        println!(
            "wd {wd:<6} ep {epochs:<4}: train_acc {train_acc:.3} | victim margin {m_pre:.3} | spearman {rho:.3}"
        );
        for tau in [0.005, 0.01, 0.02, 0.05] {
            let mut under = base.clone();
            under.attack.mode = uulab_core::attack::AttackMode::Under;
            under.attack.tau = tau;
            under.unlearn.tau = tau;
            for source in [MaskSource::Optimized, MaskSource::Random] {
                let mut c = under.clone();
                c.baseline = source;
                let p = Pipeline::build(&c).unwrap();
                let vs = p.victim_state().unwrap();
                let outcome = p.craft(&vs).unwrap();
                let pre_dep = p.deployed_pre();
                let pre = p.report_for(&pre_dep, None).unwrap();
                let pre_labels = p.predicted_labels(&pre_dep, p.eval_indices()).unwrap();
                let (post_dep, _) = p.apply_unlearning(&outcome.mask).unwrap();
                let post = p.report_for(&post_dep, Some(&pre_labels)).unwrap();
                let m0 = frozen_margin(&p, &pre_dep, &vs.victims, &vs.y_hat);
                let m1 = frozen_margin(&p, &post_dep, &vs.victims, &vs.y_hat);
                println!(
                    "  tau {tau:<6} {source:?}: ece {:.3}->{:.3} ({:.2}x) | frozen margin {m0:.3}->{m1:.3} | preserve {:.2} | sets {:.2}->{:.2} | obj {:.2}",
                    pre.ece,
                    post.ece,
                    post.ece / pre.ece,
                    post.label_preservation,
                    pre.avg_set_size,
                    post.avg_set_size,
                    outcome.objective,
                );
            }
        }
    }
}
