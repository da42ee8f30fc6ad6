//! Experiment orchestration: train, craft a deletion mask, unlearn, and
//! score the damage, with machine-readable JSON reports and CSV plot data.
//! Reruns of the same config are byte-identical except the timing block.

use crate::attack::{
    baseline_mask, build_victim_state, optimize_mask, transfer_attack, BaselineKind, MaskOutcome,
    VictimState,
};
use crate::calibrate::{apply_calibrator, fit_calibrator, CalibratorParams};
use crate::config::{DefenseKind, EstimatorConfig, EvalSet, ExperimentConfig, MaskSource};
use crate::conformal::ConformalPredictor;
use crate::data::{gen_blobs, split, Dataset, Splits};
use crate::error::{Error, Result};
use crate::metrics::{accuracy_of, ace, brier, ece, label_preservation, reliability_bins, Report};
use crate::model::{save_model, ModelParams};
use crate::rng;
use crate::sisa::ShardedModel;
use crate::theory::{fit_slope, simulate_calibration, sweep_csv, CalCell, SlopeFit};
use crate::train::{init_params, train_from, AdversarialTraining, TrainConfig};
use crate::unlearn::{
    unlearn_first_order, unlearn_fisher, unlearn_second_order, unlearn_ssd, unlearn_unrolling,
    ForgetMask, PsiSpec, UnlearnMethod,
};
use crate::uq::{Estimator, EstimatorKind, ProbVector};
use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

/// Seeds echoed into the report for reproducibility.
#[derive(Debug, Clone, serde::Serialize)]
pub struct Seeds {
    pub data: u64,
    pub split: u64,
    pub train: u64,
    pub estimator: u64,
    pub attack: u64,
    pub unlearn: u64,
}

/// The report pair plus bookkeeping, serialized as the experiment's JSON
/// artifact. Timings sit last so everything above them is rerun-stable.
#[derive(Debug, Clone, serde::Serialize)]
pub struct FullReport {
    pub config_hash: String,
    pub seeds: Seeds,
    pub pre: Report,
    pub post: Report,
    pub increments: BTreeMap<String, f64>,
    pub mask_path: String,
    pub warnings: Vec<String>,
    pub timings: BTreeMap<String, f64>,
}

impl FullReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// JSON with the timing block blanked, for byte-comparing reruns.
    pub fn to_json_without_timings(&self) -> String {
        let mut clone = self.clone();
        clone.timings = BTreeMap::new();
        serde_json::to_string_pretty(&clone).expect("report serializes") + "\n"
    }
}

/// Prediction source for evaluation: a (possibly calibrated) estimator or a
/// sharded ensemble.
#[derive(Debug, Clone)]
pub enum Deployed {
    Single(Estimator),
    Sharded(ShardedModel),
}

/// Everything the pre-attack stage produces.
pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub ds: Dataset,
    pub splits: Splits,
    pub ds_train: Dataset,
    /// Dataset index -> position in the training split.
    pub train_pos: std::collections::HashMap<usize, usize>,
    pub theta_init: ModelParams,
    pub theta_star: ModelParams,
    pub estimator: Estimator,
    pub calibrator: Option<CalibratorParams>,
    pub conformal: ConformalPredictor,
    pub sisa_pre: Option<ShardedModel>,
    pub warnings: Vec<String>,
}

fn build_estimator(
    cfg: &EstimatorConfig,
    arch: &[usize],
    dropout_rate: f64,
    theta_star: ModelParams,
    theta_init_seed: u64,
    ds_train: &Dataset,
    tc: &TrainConfig,
    adv: Option<&AdversarialTraining>,
) -> Result<Estimator> {
    match cfg.kind {
        EstimatorKind::Softmax => Ok(Estimator::softmax(theta_star)),
        EstimatorKind::McDropout => {
            if dropout_rate == 0.0 {
                return Err(Error::Config(
                    "mc_dropout estimator needs model.dropout_rate > 0".into(),
                ));
            }
            Estimator::mc_dropout(theta_star, cfg.mc_samples, cfg.mc_seed)
        }
        EstimatorKind::Ensemble => {
            if cfg.ensemble_size < 2 {
                return Err(Error::Config("ensemble_size must be at least 2".into()));
            }
            let mut members = vec![theta_star];
            for k in 1..cfg.ensemble_size {
                let seed = rng::mix(theta_init_seed, 1000 + k as u64);
                let init = init_params(arch, seed, dropout_rate)?;
                let tc_k = TrainConfig {
                    seed: rng::mix(tc.seed, 1000 + k as u64),
                    ..*tc
                };
                members.push(train_from(&init, ds_train, &tc_k, adv)?);
            }
            Estimator::ensemble(members)
        }
    }
}

impl Pipeline {
    /// Generate data, split it, train the deployed model(s), fit the
    /// calibrator and the conformal threshold on the holdout.
    pub fn build(cfg: &ExperimentConfig) -> Result<Pipeline> {
        cfg.validate()?;
        let mut warnings = Vec::new();
        let ds = gen_blobs(
            cfg.data.n,
            cfg.data.d,
            cfg.data.classes,
            cfg.data.spread,
            cfg.data.seed,
        )?;
        let splits = split(
            &ds,
            cfg.split.fractions,
            cfg.split.adversary_fraction,
            cfg.split.victim_count,
            cfg.split.seed,
        )?;
        let ds_train = ds.gather(&splits.train)?;
        let train_pos: std::collections::HashMap<usize, usize> = splits
            .train
            .iter()
            .enumerate()
            .map(|(pos, &g)| (g, pos))
            .collect();
        let arch = cfg.arch();
        let adv = AdversarialTraining::from_defense(&cfg.defense);
        if cfg.defense.kind == DefenseKind::AdversarialTraining {
            warnings.push("adversarial-training defense enabled".into());
        }
        let theta_init = init_params(&arch, cfg.train.seed, cfg.model.dropout_rate)?;
        let theta_star = train_from(&theta_init, &ds_train, &cfg.train, adv.as_ref())?;
        let estimator = build_estimator(
            &cfg.estimator,
            &arch,
            cfg.model.dropout_rate,
            theta_star.clone(),
            cfg.train.seed,
            &ds_train,
            &cfg.train,
            adv.as_ref(),
        )?;
        if cfg.calibrator.is_some() && cfg.estimator.kind != EstimatorKind::Softmax {
            return Err(Error::Config(
                "post-hoc calibrators operate on the softmax estimator's logits".into(),
            ));
        }
        let calibrator = match cfg.calibrator {
            None => None,
            Some(kind) => {
                let logits = estimator.primary_logits(&ds, &splits.holdout)?;
                let labels: Vec<usize> = splits.holdout.iter().map(|&i| ds.label(i)).collect();
                Some(fit_calibrator(kind, &logits, &labels)?)
            }
        };
        let sisa_pre = if cfg.unlearn.method == UnlearnMethod::Sisa {
            if cfg.estimator.kind != EstimatorKind::Softmax {
                return Err(Error::Config(
                    "sisa deployment replaces the estimator; use estimator.kind = softmax".into(),
                ));
            }
            Some(ShardedModel::train(
                &ds_train,
                cfg.unlearn.sisa_shards,
                cfg.unlearn.sisa_slices,
                &arch,
                cfg.model.dropout_rate,
                &cfg.train,
                cfg.unlearn.seed,
            )?)
        } else {
            None
        };
        // Conformal threshold from the holdout, under the deployed pre-attack
        // prediction source.
        let mut pipeline = Pipeline {
            cfg: cfg.clone(),
            ds,
            splits,
            ds_train,
            train_pos,
            theta_init,
            theta_star,
            estimator,
            calibrator,
            conformal: ConformalPredictor {
                kind: cfg.conformal.kind,
                qhat: f64::INFINITY,
                alpha: cfg.conformal.alpha,
                k_reg: cfg.conformal.k_reg,
                lambda_reg: cfg.conformal.lambda_reg,
            },
            sisa_pre,
            warnings,
        };
        let pre = pipeline.deployed_pre();
        let cal_probs = pipeline.probs_for(&pre, &pipeline.splits.holdout)?;
        let cal_labels: Vec<usize> = pipeline
            .splits
            .holdout
            .iter()
            .map(|&i| pipeline.ds.label(i))
            .collect();
        pipeline.conformal = ConformalPredictor::fit(
            cfg.conformal.kind,
            &cal_probs,
            &cal_labels,
            cfg.conformal.alpha,
            cfg.conformal.k_reg,
            cfg.conformal.lambda_reg,
        )?;
        Ok(pipeline)
    }

    pub fn deployed_pre(&self) -> Deployed {
        match &self.sisa_pre {
            Some(sm) => Deployed::Sharded(sm.clone()),
            None => Deployed::Single(self.estimator.clone()),
        }
    }

    /// Probability vectors for dataset rows under a prediction source,
    /// routed through the calibrator when one is configured.
    pub fn probs_for(&self, deployed: &Deployed, idx: &[usize]) -> Result<Vec<ProbVector>> {
        match deployed {
            Deployed::Sharded(sm) => sm.predict_rows(&self.ds, idx),
            Deployed::Single(est) => match &self.calibrator {
                None => est.estimate_rows(&self.ds, idx),
                Some(cal) => {
                    let logits = est.primary_logits(&self.ds, idx)?;
                    logits.iter().map(|z| apply_calibrator(cal, z)).collect()
                }
            },
        }
    }

    pub fn eval_indices(&self) -> &[usize] {
        match self.cfg.eval_set {
            EvalSet::Victims => &self.splits.victims,
            EvalSet::Test => &self.splits.test,
            EvalSet::Holdout => &self.splits.holdout,
        }
    }

    /// Frozen victim state under the pre-attack model.
    pub fn victim_state(&self) -> Result<VictimState> {
        build_victim_state(
            &self.estimator,
            &self.ds,
            &self.splits.victims,
            &self.splits.holdout,
            &self.cfg.attack,
        )
    }

    pub fn psi_spec(&self) -> PsiSpec<'_> {
        match self.cfg.attack.unlearn_method {
            UnlearnMethod::SecondOrder => PsiSpec::SecondOrder {
                train_idx: &self.splits.train,
                damping: self.cfg.unlearn.damping,
                cg_iters: self.cfg.unlearn.cg_iters,
                cg_tol: self.cfg.unlearn.cg_tol,
            },
            _ => PsiSpec::FirstOrder {
                tau: self.cfg.attack.tau,
            },
        }
    }

    /// Craft the configured mask (optimized attack or a baseline).
    pub fn craft(&self, vs: &VictimState) -> Result<MaskOutcome> {
        let psi = self.psi_spec();
        match self.cfg.baseline {
            MaskSource::Optimized => optimize_mask(
                &self.estimator,
                &self.ds,
                &self.splits.adversary,
                vs,
                &self.cfg.attack,
                &psi,
            ),
            MaskSource::Random => baseline_mask(
                &BaselineKind::Random,
                &self.estimator,
                &self.ds,
                &self.splits.adversary,
                vs,
                &self.cfg.attack,
                &psi,
            ),
            MaskSource::LabelAttack => baseline_mask(
                &BaselineKind::LabelAttack { targets: None },
                &self.estimator,
                &self.ds,
                &self.splits.adversary,
                vs,
                &self.cfg.attack,
                &psi,
            ),
        }
    }

    /// Craft a transfer mask from surrogate models (width-scaled, reseeded)
    /// without touching the deployed model.
    pub fn craft_transfer(&self) -> Result<MaskOutcome> {
        let arch = self.cfg.arch();
        let mut surrogates = Vec::with_capacity(self.cfg.transfer.surrogates);
        for k in 0..self.cfg.transfer.surrogates {
            let scale = self.cfg.transfer.width_scales
                [k % self.cfg.transfer.width_scales.len()];
            let mut s_arch = arch.clone();
            for w in &mut s_arch[1..arch.len() - 1] {
                *w = ((*w as f64 * scale).round() as usize).max(2);
            }
            let init = init_params(
                &s_arch,
                rng::mix(self.cfg.train.seed, 7000 + k as u64),
                self.cfg.model.dropout_rate,
            )?;
            let tc = TrainConfig {
                seed: rng::mix(self.cfg.train.seed, 9000 + k as u64),
                ..self.cfg.train
            };
            surrogates.push(train_from(&init, &self.ds_train, &tc, None)?);
        }
        let psi = PsiSpec::FirstOrder {
            tau: self.cfg.attack.tau,
        };
        transfer_attack(
            &surrogates,
            &self.ds,
            &self.splits.adversary,
            &self.splits.victims,
            &self.splits.holdout,
            &self.cfg.attack,
            &psi,
        )
    }

    /// Apply the configured unlearning method to the deployed model(s).
    /// An empty mask leaves the deployment untouched.
    pub fn apply_unlearning(&self, mask: &ForgetMask) -> Result<(Deployed, Vec<String>)> {
        self.apply_unlearning_with(self.cfg.unlearn.method, mask)
    }

    /// Same, but forcing the evaluation-time unlearning method (used by the
    /// cross-method transfer study).
    pub fn apply_unlearning_with(
        &self,
        method: UnlearnMethod,
        mask: &ForgetMask,
    ) -> Result<(Deployed, Vec<String>)> {
        let mut warnings = Vec::new();
        let dt = &self.splits.adversary;
        let rounded = mask.rounded();
        if rounded.selected().is_empty() {
            return Ok((self.deployed_pre(), warnings));
        }
        if method == UnlearnMethod::Sisa {
            let sm = self
                .sisa_pre
                .clone()
                .map(Ok)
                .unwrap_or_else(|| {
                    ShardedModel::train(
                        &self.ds_train,
                        self.cfg.unlearn.sisa_shards,
                        self.cfg.unlearn.sisa_slices,
                        &self.cfg.arch(),
                        self.cfg.model.dropout_rate,
                        &self.cfg.train,
                        self.cfg.unlearn.seed,
                    )
                })?;
            let forget_rows: Vec<usize> = rounded
                .selected()
                .iter()
                .map(|&pos| {
                    self.train_pos
                        .get(&dt[pos])
                        .copied()
                        .ok_or_else(|| Error::Index(format!("row {} not in the training split", dt[pos])))
                })
                .collect::<Result<_>>()?;
            let post = sm.unlearn(&self.ds_train, &forget_rows)?;
            return Ok((Deployed::Sharded(post), warnings));
        }
        let u = &self.cfg.unlearn;
        let mut members = Vec::with_capacity(self.estimator.models().len());
        for (m, model) in self.estimator.models().iter().enumerate() {
            let updated = match method {
                UnlearnMethod::FirstOrder => {
                    unlearn_first_order(model, &self.ds, dt, &rounded, u.tau)?
                }
                UnlearnMethod::SecondOrder => {
                    let (out, info) = unlearn_second_order(
                        model,
                        &self.ds,
                        &self.splits.train,
                        dt,
                        &rounded,
                        u.damping,
                        u.cg_iters,
                        u.cg_tol,
                    )?;
                    if !info.converged {
                        warnings.push(format!(
                            "second-order cg stopped at residual {:.3e} after {} iterations (member {m})",
                            info.residual, info.iterations
                        ));
                    }
                    out
                }
                UnlearnMethod::Unrolling => unlearn_unrolling(
                    model,
                    &self.theta_init,
                    &self.ds,
                    dt,
                    &rounded,
                    u.unroll_lr,
                    u.unroll_epochs,
                )?,
                UnlearnMethod::Fisher => unlearn_fisher(
                    model,
                    &self.ds,
                    &self.splits.train,
                    dt,
                    &rounded,
                    u.noise_scale,
                    u.damping,
                    rng::mix(u.seed, m as u64),
                )?,
                UnlearnMethod::Ssd => unlearn_ssd(
                    model,
                    &self.ds,
                    &self.splits.train,
                    dt,
                    &rounded,
                    u.ssd_alpha,
                    u.ssd_lambda,
                )?,
                UnlearnMethod::Sisa => unreachable!("handled above"),
            };
            members.push(updated);
        }
        Ok((
            Deployed::Single(self.estimator.with_models(members)?),
            warnings,
        ))
    }

    pub fn predicted_labels(&self, deployed: &Deployed, idx: &[usize]) -> Result<Vec<usize>> {
        Ok(self
            .probs_for(deployed, idx)?
            .iter()
            .map(|p| p.predicted())
            .collect())
    }

    /// Metrics bundle on the configured evaluation set. `pre_labels` carries
    /// the pre-attack predicted labels for the preservation rate.
    pub fn report_for(&self, deployed: &Deployed, pre_labels: Option<&[usize]>) -> Result<Report> {
        let idx = self.eval_indices();
        let probs = self.probs_for(deployed, idx)?;
        let labels: Vec<usize> = idx.iter().map(|&i| self.ds.label(i)).collect();
        let (coverage, avg_set_size) = self.conformal.evaluate(&probs, &labels)?;
        let predicted: Vec<usize> = probs.iter().map(|p| p.predicted()).collect();
        let preservation = match pre_labels {
            Some(before) => label_preservation(before, &predicted)?,
            None => 1.0,
        };
        Ok(Report {
            ece: ece(&probs, &labels, self.cfg.bins)?,
            ace: ace(&probs, &labels, self.cfg.bins.min(probs.len()))?,
            brier: brier(&probs, &labels)?,
            accuracy: accuracy_of(&probs, &labels)?,
            coverage,
            avg_set_size,
            label_preservation: preservation,
        })
    }

    /// Reliability-diagram rows (confidence, accuracy, count) per bin.
    pub fn reliability_csv(&self, deployed: &Deployed) -> Result<String> {
        let idx = self.eval_indices();
        let probs = self.probs_for(deployed, idx)?;
        let labels: Vec<usize> = idx.iter().map(|&i| self.ds.label(i)).collect();
        let bins = reliability_bins(&probs, &labels, self.cfg.bins)?;
        let mut s = String::from("bin,mean_confidence,accuracy,count\n");
        for (b, (conf, acc, count)) in bins.iter().enumerate() {
            s.push_str(&format!("{b},{conf},{acc},{count}\n"));
        }
        Ok(s)
    }
}

fn increments(pre: &Report, post: &Report) -> BTreeMap<String, f64> {
    let ratio = |a: f64, b: f64| (b - a) / a;
    let mut m = BTreeMap::new();
    m.insert("ece".into(), ratio(pre.ece, post.ece));
    m.insert("ace".into(), ratio(pre.ace, post.ace));
    m.insert("brier".into(), ratio(pre.brier, post.brier));
    m.insert("avg_set_size".into(), ratio(pre.avg_set_size, post.avg_set_size));
    m
}

/// Full train -> craft -> unlearn -> evaluate pipeline. When `out_dir` is
/// given, writes model checkpoints, the mask file, reliability CSVs, the
/// canonical config echo, and `report.json`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<FullReport> {
    let t0 = Instant::now();
    let mut timings = BTreeMap::new();

    let t = Instant::now();
    let pipeline = Pipeline::build(cfg)?;
    timings.insert("train_s".into(), t.elapsed().as_secs_f64());

    let t = Instant::now();
    let vs = pipeline.victim_state()?;
    let outcome = pipeline.craft(&vs)?;
    timings.insert("craft_s".into(), t.elapsed().as_secs_f64());

    let mut warnings = pipeline.warnings.clone();
    warnings.extend(vs.warnings.iter().cloned());
    if outcome.degenerate {
        warnings.push("mask optimization saw no usable gradient".into());
    }

    let pre_deployed = pipeline.deployed_pre();
    let t = Instant::now();
    let pre = pipeline.report_for(&pre_deployed, None)?;
    let pre_labels = pipeline.predicted_labels(&pre_deployed, pipeline.eval_indices())?;
    timings.insert("eval_pre_s".into(), t.elapsed().as_secs_f64());

    let t = Instant::now();
    let (post_deployed, unlearn_warnings) = pipeline.apply_unlearning(&outcome.mask)?;
    warnings.extend(unlearn_warnings);
    timings.insert("unlearn_s".into(), t.elapsed().as_secs_f64());

    let t = Instant::now();
    let post = pipeline.report_for(&post_deployed, Some(&pre_labels))?;
    timings.insert("eval_post_s".into(), t.elapsed().as_secs_f64());

    let mask_path = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let mp = dir.join("mask.txt");
            crate::unlearn::write_mask(&mp, &pipeline.splits.adversary, &outcome.mask)?;
            save_model(&pipeline.theta_init, &dir.join("model_init.uulm"))?;
            save_model(&pipeline.theta_star, &dir.join("model.uulm"))?;
            match &post_deployed {
                Deployed::Single(est) => {
                    for (k, m) in est.models().iter().enumerate() {
                        let name = if k == 0 {
                            "model_unlearned.uulm".to_string()
                        } else {
                            format!("model_unlearned_member{k}.uulm")
                        };
                        save_model(m, &dir.join(name))?;
                    }
                }
                Deployed::Sharded(sm) => {
                    sm.save_dir(&dir.join("sisa_unlearned"))?;
                }
            }
            std::fs::write(
                dir.join("reliability_pre.csv"),
                pipeline.reliability_csv(&pre_deployed)?,
            )?;
            std::fs::write(
                dir.join("reliability_post.csv"),
                pipeline.reliability_csv(&post_deployed)?,
            )?;
            std::fs::write(dir.join("config.cfg"), crate::config::emit_config(cfg))?;
            mp.display().to_string()
        }
        None => "mask.txt".into(),
    };

    timings.insert("total_s".into(), t0.elapsed().as_secs_f64());
    let report = FullReport {
        config_hash: crate::config::config_hash(cfg),
        seeds: Seeds {
            data: cfg.data.seed,
            split: cfg.split.seed,
            train: cfg.train.seed,
            estimator: cfg.estimator.mc_seed,
            attack: cfg.attack.seed,
            unlearn: cfg.unlearn.seed,
        },
        increments: increments(&pre, &post),
        pre,
        post,
        mask_path,
        warnings,
        timings,
    };
    if let Some(dir) = out_dir {
        std::fs::write(dir.join("report.json"), report.to_json())?;
    }
    Ok(report)
}

/// Theory sweep: CSV plus a through-origin fit per probability level.
pub fn run_theory(
    cfg: &ExperimentConfig,
    out_dir: Option<&Path>,
) -> Result<(Vec<CalCell>, Vec<(f64, SlopeFit)>)> {
    let cells = simulate_calibration(&cfg.theory)?;
    let mut fits = Vec::new();
    for &p in &cfg.theory.p_grid {
        let pts: Vec<(f64, f64)> = cells
            .iter()
            .filter(|c| c.p == p)
            .filter_map(|c| c.delta.map(|d| (c.kappa, d)))
            .collect();
        if pts.len() >= 3 {
            fits.push((p, fit_slope(&pts)?));
        }
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("theory.csv"), sweep_csv(&cells))?;
    }
    Ok((cells, fits))
}

/// Transfer study: white-box vs surrogate-crafted masks on the same target,
/// plus the first-order-crafted mask evaluated under every unlearning method.
#[derive(Debug, Clone, serde::Serialize)]
pub struct TransferReport {
    pub pre_ece: f64,
    pub whitebox_post_ece: f64,
    pub transfer_post_ece: f64,
    /// (transfer ECE increase) / (white-box ECE increase).
    pub transfer_ratio: f64,
    /// Per evaluation-method post-attack ECE for the white-box mask.
    pub per_method_post_ece: BTreeMap<String, f64>,
}

pub fn run_transfer(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<TransferReport> {
    let mut cfg = cfg.clone();
    cfg.unlearn.method = UnlearnMethod::FirstOrder;
    let pipeline = Pipeline::build(&cfg)?;
    let vs = pipeline.victim_state()?;
    let pre_deployed = pipeline.deployed_pre();
    let pre = pipeline.report_for(&pre_deployed, None)?;

    let white = pipeline.craft(&vs)?;
    let (white_post, _) = pipeline.apply_unlearning(&white.mask)?;
    let white_report = pipeline.report_for(&white_post, None)?;

    let transfer = pipeline.craft_transfer()?;
    let (trans_post, _) = pipeline.apply_unlearning(&transfer.mask)?;
    let trans_report = pipeline.report_for(&trans_post, None)?;

    let mut per_method = BTreeMap::new();
    for method in [
        UnlearnMethod::SecondOrder,
        UnlearnMethod::Ssd,
        UnlearnMethod::Fisher,
        UnlearnMethod::Unrolling,
        UnlearnMethod::Sisa,
    ] {
        let (post, _) = pipeline.apply_unlearning_with(method, &white.mask)?;
        let report = pipeline.report_for(&post, None)?;
        per_method.insert(method.tag().to_string(), report.ece);
    }

    let out = TransferReport {
        pre_ece: pre.ece,
        whitebox_post_ece: white_report.ece,
        transfer_post_ece: trans_report.ece,
        transfer_ratio: (trans_report.ece - pre.ece) / (white_report.ece - pre.ece),
        per_method_post_ece: per_method,
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(
            dir.join("transfer.json"),
            serde_json::to_string_pretty(&out)? + "\n",
        )?;
        let mut csv = String::from("method,post_ece\n");
        csv.push_str(&format!("first_order_whitebox,{}\n", out.whitebox_post_ece));
        csv.push_str(&format!("first_order_transfer,{}\n", out.transfer_post_ece));
        for (m, e) in &out.per_method_post_ece {
            csv.push_str(&format!("{m},{e}\n"));
        }
        std::fs::write(dir.join("transfer_matrix.csv"), csv)?;
    }
    Ok(out)
}
