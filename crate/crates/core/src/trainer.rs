//! Mini-batch training with AdamW, JSONL step logs and resumable checkpoints.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::grammar::{strip_special, CommSequence, Vocab};
use crate::model::{Covlm, ModelConfig, ModelError};
use crate::numerics::{read_checkpoint, write_checkpoint, AdamW, AdamWConfig, Checkpoint, NumericsError, ParamId, Tape};
use crate::pipeline::{item_rng, Example};
use crate::raster::Image;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("{path}: {reason}")]
    File { path: PathBuf, reason: String },
    #[error("invalid training config: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    /// Weight of the detection loss.
    pub lambda: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f32,
    /// Linear warmup length in steps.
    pub warmup: u64,
    /// Decoupled weight decay applied to detector parameters only.
    pub detector_weight_decay: f32,
    pub seed: u64,
    /// Train on the plain captions with every communication token removed.
    pub no_comm: bool,
    pub log_every: u64,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            lambda: 0.025,
            steps: 5000,
            batch_size: 32,
            lr: 1e-4,
            warmup: 0,
            detector_weight_decay: 0.05,
            seed: 0,
            no_comm: false,
            log_every: 1,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(TrainError::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        Ok(())
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: vec![("detector.".into(), self.detector_weight_decay)],
            ..AdamWConfig::default()
        }
    }

    fn lr_at(&self, step: u64) -> f32 {
        if self.warmup == 0 || step >= self.warmup {
            self.lr
        } else {
            self.lr * (step + 1) as f32 / self.warmup as f32
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub lm_loss: f64,
    pub det_loss: f64,
    pub total_loss: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

/// What the batch gradient differentiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// `lm + lambda * det`.
    Full,
    /// Token loss alone; detection is never built.
    LmOnly,
}

/// Batch-mean losses; examples without communication contribute zero
/// detection loss.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchLosses {
    pub lm: f64,
    pub det: f64,
    pub total: f64,
}

/// Gradient of the batch-mean objective for every parameter (zeros where a
/// parameter is unused), plus the batch-mean losses.
pub fn batch_gradients(
    model: &Covlm,
    batch: &[(&Image, &CommSequence)],
    lambda: f64,
    objective: Objective,
) -> Result<(Vec<Vec<f32>>, BatchLosses), ModelError> {
    let mut grads: Vec<Vec<f32>> = model.params.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
    let mut losses = BatchLosses::default();
    let inv = 1.0 / batch.len() as f32;
    for &(image, seq) in batch {
        let mut tape = Tape::<f32>::new();
        let vars = model.params.bind(&mut tape);
        let (loss, lm, det) = match objective {
            Objective::Full => {
                let parts = model.arch.example_loss(&mut tape, &vars, image, seq, lambda)?;
                (parts.total, parts.lm, parts.det)
            }
            Objective::LmOnly => {
                let fwd = model.arch.forward(&mut tape, &vars, image, seq)?;
                let targets = crate::lm::lm_targets(model.arch.n_patches(), seq, true);
                let lm = crate::lm::lm_loss(&mut tape, &fwd.out, targets)?;
                (lm, lm, None)
            }
        };
        let scalar = |tape: &Tape<f32>, v| tape.value(v)[0] as f64;
        losses.lm += scalar(&tape, lm);
        losses.total += scalar(&tape, loss);
        if let Some(d) = det {
            losses.det += scalar(&tape, d);
        }
        let mut g = tape.backward(loss)?;
        for (acc, &v) in grads.iter_mut().zip(&vars) {
            if let Some(gv) = g.take(v) {
                for (a, x) in acc.iter_mut().zip(gv) {
                    *a += x * inv;
                }
            }
        }
    }
    let n = batch.len() as f64;
    losses.lm /= n;
    losses.det /= n;
    losses.total /= n;
    Ok((grads, losses))
}

/// A training example as seen by the optimizer.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub image: Image,
    pub sequence: CommSequence,
}

/// Training items from corpus examples; `no_comm` strips every communication
/// token and slot.
pub fn train_items(examples: &[Example], no_comm: bool) -> Vec<TrainItem> {
    examples
        .iter()
        .map(|e| TrainItem {
            image: e.image.clone(),
            sequence: if no_comm { CommSequence::from_words(&strip_special(&e.sequence)) } else { e.sequence.clone() },
        })
        .collect()
}

pub struct Trainer {
    pub model: Covlm,
    pub opt: AdamW,
    pub cfg: TrainConfig,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, vocab: Vocab) -> Result<Self, TrainError> {
        cfg.check()?;
        let model = Covlm::new(cfg.model, vocab, cfg.seed)?;
        let opt = AdamW::new(cfg.adamw(), &model.params);
        Ok(Self { model, opt, cfg })
    }

    /// Resumes from a checkpoint written by [`Trainer::checkpoint`]; `steps`
    /// and logging settings may differ from the original run.
    pub fn resume(path: &Path, overrides: Option<TrainConfig>) -> Result<Self, TrainError> {
        let file = |reason: String| TrainError::File { path: path.to_path_buf(), reason };
        let ck = read_checkpoint(path).map_err(|e| file(e.to_string()))?;
        let model = Covlm::from_checkpoint(&ck).map_err(|e| file(e.to_string()))?;
        let saved: TrainConfig = serde_json::from_value(ck.config_snapshot.clone()).map_err(|e| file(format!("config: {e}")))?;
        let cfg = match overrides {
            Some(o) => TrainConfig { steps: o.steps, log_every: o.log_every, checkpoint_every: o.checkpoint_every, ..saved },
            None => saved,
        };
        let step = ck.meta["train_step"].as_u64().ok_or_else(|| file("no optimizer state".into()))?;
        let mut opt = AdamW::new(cfg.adamw(), &model.params);
        let load = |kind: &str| -> Result<Vec<Vec<f32>>, TrainError> {
            model
                .params
                .names()
                .iter()
                .map(|n| Ok(ck.tensor(&format!("{}{kind}/{n}", Checkpoint::AUX_PREFIX)).map_err(|e| file(e.to_string()))?.data().to_vec()))
                .collect()
        };
        opt.restore(step, load("adam_m")?, load("adam_v")?)?;
        Ok(Self { model, opt, cfg })
    }

    pub fn step(&self) -> u64 {
        self.opt.step_count()
    }

    /// Dataset indices for `step`: consecutive slices of per-epoch permutations.
    pub fn batch_indices(&self, step: u64, n: usize) -> Vec<usize> {
        let b = self.cfg.batch_size as u64;
        let mut perm_epoch = u64::MAX;
        let mut perm: Vec<usize> = Vec::new();
        (step * b..(step + 1) * b)
            .map(|k| {
                let epoch = k / n as u64;
                if epoch != perm_epoch {
                    perm = (0..n).collect();
                    perm.shuffle(&mut item_rng(self.cfg.seed ^ 0xba7c_4000, epoch));
                    perm_epoch = epoch;
                }
                perm[(k % n as u64) as usize]
            })
            .collect()
    }

    pub fn train_step(&mut self, data: &[TrainItem]) -> Result<StepLog, TrainError> {
        if data.is_empty() {
            return Err(TrainError::Config("empty training set".into()));
        }
        let start = Instant::now();
        let step = self.step();
        let batch: Vec<(&Image, &CommSequence)> =
            self.batch_indices(step, data.len()).into_iter().map(|i| (&data[i].image, &data[i].sequence)).collect();
        let (grads, losses) = batch_gradients(&self.model, &batch, self.cfg.lambda, Objective::Full)?;
        let grad_norm = grads.iter().flatten().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt();
        for (i, g) in grads.into_iter().enumerate() {
            self.model.params.get_mut(ParamId(i)).set_grad(g)?;
        }
        self.opt.config.lr = self.cfg.lr_at(step);
        self.opt.step(&mut self.model.params)?;
        Ok(StepLog {
            step: step + 1,
            lm_loss: losses.lm,
            det_loss: losses.det,
            total_loss: losses.total,
            grad_norm,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Model parameters, optimizer moments and the run config.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_params(&self.model.params, serde_json::to_value(&self.cfg).expect("config serializes"));
        let (m, v) = self.opt.moments();
        for (kind, moments) in [("adam_m", m), ("adam_v", v)] {
            for ((_, name, t), data) in self.model.params.iter().zip(moments) {
                ck.push(&format!("{}{kind}/{name}", Checkpoint::AUX_PREFIX), t.shape(), data);
            }
        }
        let mut meta = self.model.meta();
        meta["train_step"] = json!(self.step());
        ck.meta = meta;
        ck
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        write_checkpoint(&self.checkpoint(), path).map_err(|e| TrainError::File { path: path.to_path_buf(), reason: e.to_string() })
    }

    /// Trains until `cfg.steps`, appending log lines to `log` and writing
    /// periodic checkpoints to `ckpt` when given.
    pub fn run(
        &mut self,
        data: &[TrainItem],
        mut log: Option<&mut dyn Write>,
        ckpt: Option<&Path>,
    ) -> Result<Vec<StepLog>, TrainError> {
        let mut logs = Vec::new();
        while self.step() < self.cfg.steps {
            let entry = self.train_step(data)?;
            if self.cfg.log_every > 0 && (entry.step % self.cfg.log_every == 0 || entry.step == self.cfg.steps) {
                if let Some(w) = log.as_mut() {
                    let line = serde_json::to_string(&entry).expect("log serializes");
                    writeln!(w, "{line}").map_err(|e| TrainError::File { path: "train log".into(), reason: e.to_string() })?;
                }
                log::info!(
                    "step {} total {:.4} lm {:.4} det {:.4} |g| {:.3}",
                    entry.step,
                    entry.total_loss,
                    entry.lm_loss,
                    entry.det_loss,
                    entry.grad_norm
                );
            }
            if let Some(p) = ckpt {
                if self.cfg.checkpoint_every > 0 && entry.step % self.cfg.checkpoint_every == 0 {
                    self.save(p)?;
                }
            }
            logs.push(entry);
        }
        if let Some(p) = ckpt {
            self.save(p)?;
        }
        Ok(logs)
    }
}
