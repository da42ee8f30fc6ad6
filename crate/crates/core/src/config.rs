//! Experiment configuration: a line-oriented `section.key = value` text
//! format over a fully-specified reference default, re-emitted canonically
//! for hashing.

use crate::attack::{AttackConfig, AttackMode};
use crate::calibrate::CalibratorKind;
use crate::conformal::ScoreKind;
use crate::data::SplitFractions;
use crate::error::{Error, Result};
use crate::rng;
use crate::train::{AdversarialTraining, TrainConfig};
use crate::unlearn::UnlearnMethod;
use crate::uq::EstimatorKind;

#[derive(Debug, Clone, serde::Serialize)]
pub struct DataConfig {
    pub n: usize,
    pub d: usize,
    pub classes: usize,
    pub spread: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct SplitConfig {
    pub fractions: SplitFractions,
    pub adversary_fraction: f64,
    pub victim_count: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub dropout_rate: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct EstimatorConfig {
    pub kind: EstimatorKind,
    pub mc_samples: usize,
    pub mc_seed: u64,
    pub ensemble_size: usize,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct ConformalConfig {
    pub kind: ScoreKind,
    pub alpha: f64,
    pub k_reg: usize,
    pub lambda_reg: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct UnlearnConfig {
    pub method: UnlearnMethod,
    pub tau: f64,
    pub damping: f64,
    pub cg_iters: usize,
    pub cg_tol: f64,
    pub unroll_lr: f64,
    pub unroll_epochs: usize,
    pub noise_scale: f64,
    pub ssd_alpha: f64,
    pub ssd_lambda: f64,
    pub sisa_shards: usize,
    pub sisa_slices: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum DefenseKind {
    None,
    AdversarialTraining,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct DefenseConfig {
    pub kind: DefenseKind,
    pub epsilon: f64,
    pub steps: usize,
}

/// Which mask generator the experiment runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum MaskSource {
    Optimized,
    Random,
    LabelAttack,
}

impl MaskSource {
    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "optimized" => Ok(MaskSource::Optimized),
            "random" => Ok(MaskSource::Random),
            "label_attack" => Ok(MaskSource::LabelAttack),
            other => Err(Error::Config(format!("unknown mask source '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum EvalSet {
    Victims,
    Test,
    Holdout,
}

impl EvalSet {
    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "victims" => Ok(EvalSet::Victims),
            "test" => Ok(EvalSet::Test),
            "holdout" => Ok(EvalSet::Holdout),
            other => Err(Error::Config(format!("unknown eval set '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct TransferConfig {
    pub surrogates: usize,
    /// Per-surrogate hidden-width scale factors, cycled.
    pub width_scales: Vec<f64>,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub estimator: EstimatorConfig,
    pub calibrator: Option<CalibratorKind>,
    pub conformal: ConformalConfig,
    pub attack: AttackConfig,
    pub unlearn: UnlearnConfig,
    pub defense: DefenseConfig,
    pub baseline: MaskSource,
    pub eval_set: EvalSet,
    pub bins: usize,
    pub transfer: TransferConfig,
    pub theory: crate::theory::TheoryConfig,
}

impl Default for ExperimentConfig {
    /// The desk-scale reference configuration.
    fn default() -> Self {
        ExperimentConfig {
            data: DataConfig {
                n: 2000,
                d: 16,
                classes: 10,
                spread: 3.0,
                seed: 7,
            },
            split: SplitConfig {
                fractions: SplitFractions {
                    train: 0.7,
                    holdout: 0.15,
                    test: 0.15,
                },
                adversary_fraction: 0.25,
                victim_count: 20,
                seed: 11,
            },
            model: ModelConfig {
                hidden: vec![32, 32],
                dropout_rate: 0.1,
            },
            train: TrainConfig {
                epochs: 60,
                batch_size: 32,
                learning_rate: 0.05,
                seed: 13,
                weight_decay: 1e-4,
            },
            estimator: EstimatorConfig {
                kind: EstimatorKind::Softmax,
                mc_samples: 30,
                mc_seed: 17,
                ensemble_size: 5,
            },
            calibrator: None,
            conformal: ConformalConfig {
                kind: ScoreKind::Aps,
                alpha: 0.1,
                k_reg: 2,
                lambda_reg: 0.1,
            },
            attack: AttackConfig {
                mode: AttackMode::OvUn,
                lambda: 1.0,
                k_neighbors: 10,
                xi_percentile: 75.0,
                margin_target: 0.9,
                budget: 50,
                restarts: 5,
                ascent_steps: 200,
                ascent_lr: 0.1,
                tau: 0.0025,
                unlearn_method: UnlearnMethod::FirstOrder,
                seed: 19,
            },
            unlearn: UnlearnConfig {
                method: UnlearnMethod::FirstOrder,
                tau: 0.0025,
                damping: 1e-3,
                cg_iters: 50,
                cg_tol: 1e-8,
                unroll_lr: 0.0025,
                unroll_epochs: 1,
                noise_scale: 0.02,
                ssd_alpha: 10.0,
                ssd_lambda: 1.0,
                sisa_shards: 5,
                sisa_slices: 2,
                seed: 23,
            },
            defense: DefenseConfig {
                kind: DefenseKind::None,
                epsilon: 0.1,
                steps: 5,
            },
            baseline: MaskSource::Optimized,
            eval_set: EvalSet::Victims,
            bins: 15,
            transfer: TransferConfig {
                surrogates: 3,
                width_scales: vec![0.75, 1.0, 1.5],
            },
            theory: crate::theory::TheoryConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Layer widths including input and output.
    pub fn arch(&self) -> Vec<usize> {
        let mut arch = Vec::with_capacity(self.model.hidden.len() + 2);
        arch.push(self.data.d);
        arch.extend_from_slice(&self.model.hidden);
        arch.push(self.data.classes);
        arch
    }

    /// Re-derive every stream seed from one master seed.
    pub fn override_master_seed(&mut self, master: u64) {
        self.data.seed = rng::mix(master, 1);
        self.split.seed = rng::mix(master, 2);
        self.train.seed = rng::mix(master, 3);
        self.estimator.mc_seed = rng::mix(master, 4);
        self.attack.seed = rng::mix(master, 5);
        self.unlearn.seed = rng::mix(master, 6);
        self.theory.seed = rng::mix(master, 7);
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.attack.validate()?;
        if self.model.hidden.is_empty() {
            return Err(Error::Config("need at least one hidden layer".into()));
        }
        if self.bins < 1 {
            return Err(Error::Config("bins must be at least 1".into()));
        }
        if self.transfer.surrogates < 1 {
            return Err(Error::Config("need at least one surrogate".into()));
        }
        Ok(())
    }
}

fn parse_bool(v: &str, key: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true/false, got '{v}'"))),
    }
}

fn parse_num<T: std::str::FromStr>(v: &str, key: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse()
        .map_err(|e| Error::Config(format!("{key}: {e} (value '{v}')")))
}

fn parse_list(v: &str, key: &str) -> Result<Vec<f64>> {
    v.split(',')
        .map(|p| parse_num::<f64>(p.trim(), key))
        .collect()
}

fn parse_usize_list(v: &str, key: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|p| parse_num::<usize>(p.trim(), key))
        .collect()
}

/// Parse `section.key = value` lines over the reference defaults.
/// `#` starts a comment; blank lines are skipped; unknown keys error.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected 'section.key = value'", lineno + 1))
        })?;
        let key = key.trim();
        let v = value.trim();
        apply_key(&mut cfg, key, v)
            .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &std::path::Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text)
}

fn apply_key(cfg: &mut ExperimentConfig, key: &str, v: &str) -> Result<()> {
    match key {
        "data.n" => cfg.data.n = parse_num(v, key)?,
        "data.d" => cfg.data.d = parse_num(v, key)?,
        "data.classes" => cfg.data.classes = parse_num(v, key)?,
        "data.spread" => cfg.data.spread = parse_num(v, key)?,
        "data.seed" => cfg.data.seed = parse_num(v, key)?,
        "split.train" => cfg.split.fractions.train = parse_num(v, key)?,
        "split.holdout" => cfg.split.fractions.holdout = parse_num(v, key)?,
        "split.test" => cfg.split.fractions.test = parse_num(v, key)?,
        "split.adversary_fraction" => cfg.split.adversary_fraction = parse_num(v, key)?,
        "split.victims" => cfg.split.victim_count = parse_num(v, key)?,
        "split.seed" => cfg.split.seed = parse_num(v, key)?,
        "model.hidden" => cfg.model.hidden = parse_usize_list(v, key)?,
        "model.dropout_rate" => cfg.model.dropout_rate = parse_num(v, key)?,
        "train.epochs" => cfg.train.epochs = parse_num(v, key)?,
        "train.batch_size" => cfg.train.batch_size = parse_num(v, key)?,
        "train.learning_rate" => cfg.train.learning_rate = parse_num(v, key)?,
        "train.weight_decay" => cfg.train.weight_decay = parse_num(v, key)?,
        "train.seed" => cfg.train.seed = parse_num(v, key)?,
        "estimator.kind" => cfg.estimator.kind = EstimatorKind::from_tag(v)?,
        "estimator.mc_samples" => cfg.estimator.mc_samples = parse_num(v, key)?,
        "estimator.mc_seed" => cfg.estimator.mc_seed = parse_num(v, key)?,
        "estimator.ensemble_size" => cfg.estimator.ensemble_size = parse_num(v, key)?,
        "calibrator.kind" => {
            cfg.calibrator = match v {
                "none" => None,
                tag => Some(CalibratorKind::from_tag(tag)?),
            }
        }
        "conformal.kind" => cfg.conformal.kind = ScoreKind::from_tag(v)?,
        "conformal.alpha" => cfg.conformal.alpha = parse_num(v, key)?,
        "conformal.k_reg" => cfg.conformal.k_reg = parse_num(v, key)?,
        "conformal.lambda_reg" => cfg.conformal.lambda_reg = parse_num(v, key)?,
        "attack.mode" => cfg.attack.mode = AttackMode::from_tag(v)?,
        "attack.lambda" => cfg.attack.lambda = parse_num(v, key)?,
        "attack.k_neighbors" => cfg.attack.k_neighbors = parse_num(v, key)?,
        "attack.xi_percentile" => cfg.attack.xi_percentile = parse_num(v, key)?,
        "attack.margin_target" => cfg.attack.margin_target = parse_num(v, key)?,
        "attack.budget" => cfg.attack.budget = parse_num(v, key)?,
        "attack.restarts" => cfg.attack.restarts = parse_num(v, key)?,
        "attack.ascent_steps" => cfg.attack.ascent_steps = parse_num(v, key)?,
        "attack.ascent_lr" => cfg.attack.ascent_lr = parse_num(v, key)?,
        "attack.tau" => cfg.attack.tau = parse_num(v, key)?,
        "attack.unlearn_method" => cfg.attack.unlearn_method = UnlearnMethod::from_tag(v)?,
        "attack.seed" => cfg.attack.seed = parse_num(v, key)?,
        "attack.baseline" => cfg.baseline = MaskSource::from_tag(v)?,
        "unlearn.method" => cfg.unlearn.method = UnlearnMethod::from_tag(v)?,
        "unlearn.tau" => cfg.unlearn.tau = parse_num(v, key)?,
        "unlearn.damping" => cfg.unlearn.damping = parse_num(v, key)?,
        "unlearn.cg_iters" => cfg.unlearn.cg_iters = parse_num(v, key)?,
        "unlearn.cg_tol" => cfg.unlearn.cg_tol = parse_num(v, key)?,
        "unlearn.unroll_lr" => cfg.unlearn.unroll_lr = parse_num(v, key)?,
        "unlearn.unroll_epochs" => cfg.unlearn.unroll_epochs = parse_num(v, key)?,
        "unlearn.noise_scale" => cfg.unlearn.noise_scale = parse_num(v, key)?,
        "unlearn.ssd_alpha" => cfg.unlearn.ssd_alpha = parse_num(v, key)?,
        "unlearn.ssd_lambda" => cfg.unlearn.ssd_lambda = parse_num(v, key)?,
        "unlearn.sisa_shards" => cfg.unlearn.sisa_shards = parse_num(v, key)?,
        "unlearn.sisa_slices" => cfg.unlearn.sisa_slices = parse_num(v, key)?,
        "unlearn.seed" => cfg.unlearn.seed = parse_num(v, key)?,
        "defense.kind" => {
            cfg.defense.kind = match v {
                "none" => DefenseKind::None,
                "adversarial_training" => DefenseKind::AdversarialTraining,
                other => return Err(Error::Config(format!("unknown defense '{other}'"))),
            }
        }
        "defense.epsilon" => cfg.defense.epsilon = parse_num(v, key)?,
        "defense.steps" => cfg.defense.steps = parse_num(v, key)?,
        "eval.set" => cfg.eval_set = EvalSet::from_tag(v)?,
        "eval.bins" => cfg.bins = parse_num(v, key)?,
        "transfer.surrogates" => cfg.transfer.surrogates = parse_num(v, key)?,
        "transfer.width_scales" => cfg.transfer.width_scales = parse_list(v, key)?,
        "theory.d" => cfg.theory.d = parse_num(v, key)?,
        "theory.kappas" => cfg.theory.kappas = parse_list(v, key)?,
        "theory.trials" => cfg.theory.trials = parse_num(v, key)?,
        "theory.p_grid" => cfg.theory.p_grid = parse_list(v, key)?,
        "theory.bin_halfwidth" => cfg.theory.bin_halfwidth = parse_num(v, key)?,
        "theory.test_points" => cfg.theory.test_points = parse_num(v, key)?,
        "theory.seed" => cfg.theory.seed = parse_num(v, key)?,
        // reserved for forward compatibility
        "eval.strict" => {
            let _ = parse_bool(v, key)?;
        }
        other => return Err(Error::Config(format!("unknown config key '{other}'"))),
    }
    Ok(())
}

fn fmt_f64(v: f64) -> String {
    // Shortest round-trip representation keeps the canonical form stable.
    format!("{v}")
}

/// Canonical re-emission of a config, used for hashing and for the artifact
/// dumps the harness writes next to reports.
pub fn emit_config(cfg: &ExperimentConfig) -> String {
    let mut s = String::new();
    let mut kv = |k: &str, v: String| {
        s.push_str(k);
        s.push_str(" = ");
        s.push_str(&v);
        s.push('\n');
    };
    kv("data.n", cfg.data.n.to_string());
    kv("data.d", cfg.data.d.to_string());
    kv("data.classes", cfg.data.classes.to_string());
    kv("data.spread", fmt_f64(cfg.data.spread));
    kv("data.seed", cfg.data.seed.to_string());
    kv("split.train", fmt_f64(cfg.split.fractions.train));
    kv("split.holdout", fmt_f64(cfg.split.fractions.holdout));
    kv("split.test", fmt_f64(cfg.split.fractions.test));
    kv("split.adversary_fraction", fmt_f64(cfg.split.adversary_fraction));
    kv("split.victims", cfg.split.victim_count.to_string());
    kv("split.seed", cfg.split.seed.to_string());
    kv(
        "model.hidden",
        cfg.model
            .hidden
            .iter()
            .map(|w| w.to_string())
            .collect::<Vec<_>>()
            .join(","),
    );
    kv("model.dropout_rate", fmt_f64(cfg.model.dropout_rate));
    kv("train.epochs", cfg.train.epochs.to_string());
    kv("train.batch_size", cfg.train.batch_size.to_string());
    kv("train.learning_rate", fmt_f64(cfg.train.learning_rate));
    kv("train.weight_decay", fmt_f64(cfg.train.weight_decay));
    kv("train.seed", cfg.train.seed.to_string());
    kv(
        "estimator.kind",
        match cfg.estimator.kind {
            EstimatorKind::Softmax => "softmax".into(),
            EstimatorKind::Ensemble => "ensemble".into(),
            EstimatorKind::McDropout => "mc_dropout".into(),
        },
    );
    kv("estimator.mc_samples", cfg.estimator.mc_samples.to_string());
    kv("estimator.mc_seed", cfg.estimator.mc_seed.to_string());
    kv("estimator.ensemble_size", cfg.estimator.ensemble_size.to_string());
    kv(
        "calibrator.kind",
        match cfg.calibrator {
            None => "none".into(),
            Some(CalibratorKind::Ts) => "ts".into(),
            Some(CalibratorKind::Ets) => "ets".into(),
            Some(CalibratorKind::Ir) => "ir".into(),
        },
    );
    kv(
        "conformal.kind",
        match cfg.conformal.kind {
            ScoreKind::Hps => "hps".into(),
            ScoreKind::Aps => "aps".into(),
            ScoreKind::Raps => "raps".into(),
        },
    );
    kv("conformal.alpha", fmt_f64(cfg.conformal.alpha));
    kv("conformal.k_reg", cfg.conformal.k_reg.to_string());
    kv("conformal.lambda_reg", fmt_f64(cfg.conformal.lambda_reg));
    kv(
        "attack.mode",
        match cfg.attack.mode {
            AttackMode::Under => "under".into(),
            AttackMode::Over => "over".into(),
            AttackMode::OvUn => "ov_un".into(),
        },
    );
    kv("attack.lambda", fmt_f64(cfg.attack.lambda));
    kv("attack.k_neighbors", cfg.attack.k_neighbors.to_string());
    kv("attack.xi_percentile", fmt_f64(cfg.attack.xi_percentile));
    kv("attack.margin_target", fmt_f64(cfg.attack.margin_target));
    kv("attack.budget", cfg.attack.budget.to_string());
    kv("attack.restarts", cfg.attack.restarts.to_string());
    kv("attack.ascent_steps", cfg.attack.ascent_steps.to_string());
    kv("attack.ascent_lr", fmt_f64(cfg.attack.ascent_lr));
    kv("attack.tau", fmt_f64(cfg.attack.tau));
    kv("attack.unlearn_method", cfg.attack.unlearn_method.tag().into());
    kv("attack.seed", cfg.attack.seed.to_string());
    kv(
        "attack.baseline",
        match cfg.baseline {
            MaskSource::Optimized => "optimized".into(),
            MaskSource::Random => "random".into(),
            MaskSource::LabelAttack => "label_attack".into(),
        },
    );
    kv("unlearn.method", cfg.unlearn.method.tag().into());
    kv("unlearn.tau", fmt_f64(cfg.unlearn.tau));
    kv("unlearn.damping", fmt_f64(cfg.unlearn.damping));
    kv("unlearn.cg_iters", cfg.unlearn.cg_iters.to_string());
    kv("unlearn.cg_tol", fmt_f64(cfg.unlearn.cg_tol));
    kv("unlearn.unroll_lr", fmt_f64(cfg.unlearn.unroll_lr));
    kv("unlearn.unroll_epochs", cfg.unlearn.unroll_epochs.to_string());
    kv("unlearn.noise_scale", fmt_f64(cfg.unlearn.noise_scale));
    kv("unlearn.ssd_alpha", fmt_f64(cfg.unlearn.ssd_alpha));
    kv("unlearn.ssd_lambda", fmt_f64(cfg.unlearn.ssd_lambda));
    kv("unlearn.sisa_shards", cfg.unlearn.sisa_shards.to_string());
    kv("unlearn.sisa_slices", cfg.unlearn.sisa_slices.to_string());
    kv("unlearn.seed", cfg.unlearn.seed.to_string());
    kv(
        "defense.kind",
        match cfg.defense.kind {
            DefenseKind::None => "none".into(),
            DefenseKind::AdversarialTraining => "adversarial_training".into(),
        },
    );
    kv("defense.epsilon", fmt_f64(cfg.defense.epsilon));
    kv("defense.steps", cfg.defense.steps.to_string());
    kv(
        "eval.set",
        match cfg.eval_set {
            EvalSet::Victims => "victims".into(),
            EvalSet::Test => "test".into(),
            EvalSet::Holdout => "holdout".into(),
        },
    );
    kv("eval.bins", cfg.bins.to_string());
    kv("transfer.surrogates", cfg.transfer.surrogates.to_string());
    kv(
        "transfer.width_scales",
        cfg.transfer
            .width_scales
            .iter()
            .map(|w| fmt_f64(*w))
            .collect::<Vec<_>>()
            .join(","),
    );
    kv("theory.d", cfg.theory.d.to_string());
    kv(
        "theory.kappas",
        cfg.theory
            .kappas
            .iter()
            .map(|k| fmt_f64(*k))
            .collect::<Vec<_>>()
            .join(","),
    );
    kv("theory.trials", cfg.theory.trials.to_string());
    kv(
        "theory.p_grid",
        cfg.theory
            .p_grid
            .iter()
            .map(|p| fmt_f64(*p))
            .collect::<Vec<_>>()
            .join(","),
    );
    kv("theory.bin_halfwidth", fmt_f64(cfg.theory.bin_halfwidth));
    kv("theory.test_points", cfg.theory.test_points.to_string());
    kv("theory.seed", cfg.theory.seed.to_string());
    s
}

/// Hex SHA-256 of the canonical config text.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(emit_config(cfg).as_bytes());
    let out = h.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

impl crate::train::AdversarialTraining {
    pub fn from_defense(d: &DefenseConfig) -> Option<AdversarialTraining> {
        match d.kind {
            DefenseKind::None => None,
            DefenseKind::AdversarialTraining => Some(AdversarialTraining {
                epsilon: d.epsilon,
                steps: d.steps,
            }),
        }
    }
}
