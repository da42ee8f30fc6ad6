//! Sharded-slice training with checkpoints: deletion retrains only the
//! affected shard from the checkpoint before the earliest affected slice,
//! which is exactly equivalent to retraining that shard from scratch.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exec;
use crate::grad::softmax;
use crate::model::{forward_traced, load_model, save_model, ModelParams};
use crate::rng;
use crate::train::{init_params, train_from, TrainConfig};
use crate::uq::ProbVector;
use std::path::Path;

const TAG_SHARD: u64 = 0x53_48_41_52;
const TAG_SLICE: u64 = 0x53_4c_49_43;
const TAG_INIT: u64 = 0x49_4e_49_54;
const TAG_STAGE: u64 = 0x53_54_41_47;

#[derive(Debug, Clone)]
pub struct ShardedModel {
    shards: usize,
    slices: usize,
    seed: u64,
    cfg: TrainConfig,
    arch: Vec<usize>,
    dropout_rate: f64,
    /// Training row -> (shard, slice).
    assignment: Vec<(usize, usize)>,
    /// Rows deleted so far.
    removed: Vec<bool>,
    /// checkpoints[s][t]: parameters after stage t; index 0 is the init.
    checkpoints: Vec<Vec<ModelParams>>,
}

fn stage_cfg(base: &TrainConfig, seed: u64, shard: usize, stage: usize) -> TrainConfig {
    TrainConfig {
        seed: rng::mix2(rng::mix(seed, TAG_STAGE), shard as u64, stage as u64),
        ..*base
    }
}

impl ShardedModel {
    /// Hash-assign rows to (shard, slice) and train every shard through its
    /// slice stages, checkpointing after each stage. Shards train in
    /// parallel; each consumes only its own seeded streams.
    pub fn train(
        ds: &Dataset,
        shards: usize,
        slices: usize,
        arch: &[usize],
        dropout_rate: f64,
        cfg: &TrainConfig,
        seed: u64,
    ) -> Result<Self> {
        if shards < 1 || slices < 1 {
            return Err(Error::Config("need at least one shard and one slice".into()));
        }
        if shards * slices > ds.len() {
            return Err(Error::Config(format!(
                "{shards} shards x {slices} slices exceeds {} training rows",
                ds.len()
            )));
        }
        cfg.validate()?;
        let assignment: Vec<(usize, usize)> = (0..ds.len())
            .map(|i| {
                let s = (rng::mix2(seed, TAG_SHARD, i as u64) % shards as u64) as usize;
                let r = (rng::mix2(seed, TAG_SLICE, i as u64) % slices as u64) as usize;
                (s, r)
            })
            .collect();
        let removed = vec![false; ds.len()];
        let checkpoints = Self::build_shards(
            ds,
            slices,
            arch,
            dropout_rate,
            cfg,
            seed,
            &assignment,
            &removed,
            &(0..shards).collect::<Vec<_>>(),
            None,
        )?;
        Ok(ShardedModel {
            shards,
            slices,
            seed,
            cfg: *cfg,
            arch: arch.to_vec(),
            dropout_rate,
            assignment,
            removed,
            checkpoints,
        })
    }

    /// Train (or retrain) the listed shards, returning one checkpoint chain
    /// per entry of `rebuild`, in order. When `resume` holds the existing
    /// chains plus a start stage per shard, training restarts from that
    /// stage; otherwise it runs from the seeded init.
    #[allow(clippy::too_many_arguments)]
    fn build_shards(
        ds: &Dataset,
        slices: usize,
        arch: &[usize],
        dropout_rate: f64,
        cfg: &TrainConfig,
        seed: u64,
        assignment: &[(usize, usize)],
        removed: &[bool],
        rebuild: &[usize],
        resume: Option<(&[Vec<ModelParams>], &std::collections::HashMap<usize, usize>)>,
    ) -> Result<Vec<Vec<ModelParams>>> {
        let chains = exec::map(rebuild, |&s| -> Result<Vec<ModelParams>> {
            let start_stage = match resume {
                Some((_, starts)) => *starts.get(&s).unwrap_or(&1),
                None => 1,
            };
            let mut chain: Vec<ModelParams> = match resume {
                Some((old, _)) => old[s][..start_stage].to_vec(),
                None => vec![init_params(arch, rng::mix2(seed, TAG_INIT, s as u64), dropout_rate)?],
            };
            for t in start_stage..=slices {
                // Rows of shard s in slices 0..t, ascending row order.
                let rows: Vec<usize> = (0..ds.len())
                    .filter(|&i| {
                        !removed[i] && assignment[i].0 == s && assignment[i].1 < t
                    })
                    .collect();
                let prev = chain.last().unwrap();
                let next = if rows.is_empty() {
                    prev.clone()
                } else {
                    let sub = ds.gather(&rows)?;
                    train_from(prev, &sub, &stage_cfg(cfg, seed, s, t), None)?
                };
                chain.push(next);
            }
            Ok(chain)
        });
        chains.into_iter().collect()
    }

    pub fn shard_count(&self) -> usize {
        self.shards
    }

    pub fn slice_count(&self) -> usize {
        self.slices
    }

    pub fn assignment(&self) -> &[(usize, usize)] {
        &self.assignment
    }

    pub fn removed(&self) -> &[bool] {
        &self.removed
    }

    /// Final parameters of each shard.
    pub fn members(&self) -> Vec<&ModelParams> {
        self.checkpoints.iter().map(|c| c.last().unwrap()).collect()
    }

    pub fn checkpoint(&self, shard: usize, stage: usize) -> &ModelParams {
        &self.checkpoints[shard][stage]
    }

    /// Delete the given training rows: affected shards resume from the
    /// checkpoint preceding their earliest affected slice, other shards are
    /// untouched.
    pub fn unlearn(&self, ds: &Dataset, forget_rows: &[usize]) -> Result<ShardedModel> {
        for &i in forget_rows {
            if i >= self.assignment.len() {
                return Err(Error::Index(format!(
                    "forget row {i} is not a training row (have {})",
                    self.assignment.len()
                )));
            }
            if self.removed[i] {
                return Err(Error::Index(format!("row {i} was already deleted")));
            }
        }
        if forget_rows.is_empty() {
            return Ok(self.clone());
        }
        let mut removed = self.removed.clone();
        let mut starts: std::collections::HashMap<usize, usize> = std::collections::HashMap::new();
        for &i in forget_rows {
            removed[i] = true;
            let (s, r) = self.assignment[i];
            // Stage r+1 is the first one that saw slice r.
            let entry = starts.entry(s).or_insert(r + 1);
            *entry = (*entry).min(r + 1);
        }
        let rebuild: Vec<usize> = {
            let mut v: Vec<usize> = starts.keys().copied().collect();
            v.sort_unstable();
            v
        };
        let rebuilt = Self::build_shards(
            ds,
            self.slices,
            &self.arch,
            self.dropout_rate,
            &self.cfg,
            self.seed,
            &self.assignment,
            &removed,
            &rebuild,
            Some((&self.checkpoints, &starts)),
        )?;
        let mut checkpoints = self.checkpoints.clone();
        for (&s, chain) in rebuild.iter().zip(rebuilt) {
            checkpoints[s] = chain;
        }
        Ok(ShardedModel {
            removed,
            checkpoints,
            cfg: self.cfg,
            arch: self.arch.clone(),
            assignment: self.assignment.clone(),
            ..*self
        })
    }

    /// Mean of the shard softmax outputs.
    pub fn predict(&self, x: &[f64]) -> Result<ProbVector> {
        let c = self.checkpoints[0].last().unwrap().class_count();
        let mut acc = vec![0.0; c];
        for chain in &self.checkpoints {
            let trace = forward_traced(chain.last().unwrap(), x, None)?;
            for (a, p) in acc.iter_mut().zip(softmax(trace.logits())) {
                *a += p;
            }
        }
        let inv = 1.0 / self.shards as f64;
        acc.iter_mut().for_each(|a| *a *= inv);
        ProbVector::new(acc)
    }

    /// Predictions for dataset rows, in index order.
    pub fn predict_rows(&self, ds: &Dataset, idx: &[usize]) -> Result<Vec<ProbVector>> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= ds.len()) {
            return Err(Error::Index(format!("row {bad} out of range")));
        }
        Ok(exec::map(idx, |&i| {
            self.predict(ds.row(i)).expect("validated rows")
        }))
    }

    /// Write `shard{i}/slice{j}.uulm` checkpoints plus a JSON manifest.
    /// Checkpoints are stored at f32 precision.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (s, chain) in self.checkpoints.iter().enumerate() {
            let sub = dir.join(format!("shard{s}"));
            std::fs::create_dir_all(&sub)?;
            for (t, m) in chain.iter().enumerate() {
                save_model(m, &sub.join(format!("slice{t}.uulm")))?;
            }
        }
        let manifest = serde_json::json!({
            "shards": self.shards,
            "slices": self.slices,
            "seed": self.seed,
            "arch": self.arch,
            "dropout_rate": self.dropout_rate,
            "train": self.cfg,
            "assignment": self.assignment,
            "removed": self.removed,
        });
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<ShardedModel> {
        let raw = std::fs::read_to_string(dir.join("manifest.json"))?;
        let v: serde_json::Value = serde_json::from_str(&raw)?;
        let shards = v["shards"].as_u64().ok_or_else(|| Error::Config("manifest: shards".into()))? as usize;
        let slices = v["slices"].as_u64().ok_or_else(|| Error::Config("manifest: slices".into()))? as usize;
        let seed = v["seed"].as_u64().ok_or_else(|| Error::Config("manifest: seed".into()))?;
        let arch: Vec<usize> = serde_json::from_value(v["arch"].clone())?;
        let dropout_rate = v["dropout_rate"].as_f64().unwrap_or(0.0);
        let cfg: TrainConfig = serde_json::from_value(v["train"].clone())?;
        let assignment: Vec<(usize, usize)> = serde_json::from_value(v["assignment"].clone())?;
        let removed: Vec<bool> = serde_json::from_value(v["removed"].clone())?;
        let mut checkpoints = Vec::with_capacity(shards);
        for s in 0..shards {
            let mut chain = Vec::with_capacity(slices + 1);
            for t in 0..=slices {
                let m = load_model(&dir.join(format!("shard{s}/slice{t}.uulm")))?
                    .with_dropout_rate(dropout_rate)?;
                chain.push(m);
            }
            checkpoints.push(chain);
        }
        Ok(ShardedModel {
            shards,
            slices,
            seed,
            cfg,
            arch,
            dropout_rate,
            assignment,
            removed,
            checkpoints,
        })
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Config(format!("json: {e}"))
    }
}
