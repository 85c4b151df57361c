//! Mini-batch training of the full objective
//! `L = L0 + alpha*Le + beta*Lc + gamma*Ld`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datacube::{HyperspectralCube, SampleSet};
use crate::error::{Error, Result};
use crate::losses::{LossBreakdown, LossConfig};
use crate::network::{self, checkpoint, Gradients, ModelState, Param};
use crate::pseudo_env::PseudoLabeling;
use crate::rng;

pub const LOG_FILE: &str = "train.log";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    SgdMomentum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    /// Gradients whose global L2 norm exceeds this are rescaled to it
    /// before the update. 0 disables clipping.
    pub max_grad_norm: f64,
    pub seed: u64,
    /// Write `ckpt_<epoch>.bin` every this many epochs; the last epoch is
    /// always written. 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            epochs: 500,
            batch_size: 64,
            optimizer: OptimizerKind::SgdMomentum,
            momentum: 0.9,
            max_grad_norm: 5.0,
            seed: 0,
            checkpoint_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !(self.max_grad_norm >= 0.0 && self.max_grad_norm.is_finite()) {
            return Err(Error::invalid(format!(
                "max_grad_norm {} must be finite and non-negative",
                self.max_grad_norm
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!(
                "momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        Ok(())
    }
}

/// Shuffled index batches for one epoch. The order is keyed by
/// `(seed, epoch)`; the final batch may be short.
pub fn make_batches(n_samples: usize, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if n_samples == 0 {
        return Err(Error::invalid("cannot batch an empty sample set"));
    }
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..n_samples).collect();
    order.shuffle(&mut rng::keyed(seed, epoch as u64));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// First-order update rule. Momentum follows `v <- mu*v + g; p <- p - lr*v`.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    momentum: f64,
    max_grad_norm: f64,
    velocity: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(cfg: &TrainConfig, params: &[Param]) -> Self {
        Self {
            kind: cfg.optimizer,
            learning_rate: cfg.learning_rate,
            momentum: cfg.momentum,
            max_grad_norm: cfg.max_grad_norm,
            velocity: params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Param], grads: &Gradients) {
        let lr = self.learning_rate;
        let scale = clip_scale(grads, self.max_grad_norm);
        for ((p, g), v) in params.iter_mut().zip(&grads.arrays).zip(&mut self.velocity) {
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, &dw) in p.data.iter_mut().zip(g) {
                        *w -= lr * (scale * dw);
                    }
                }
                OptimizerKind::SgdMomentum => {
                    for ((w, &dw), vel) in p.data.iter_mut().zip(g).zip(v.iter_mut()) {
                        *vel = self.momentum * *vel + scale * dw;
                        *w -= lr * *vel;
                    }
                }
            }
        }
    }
}

pub fn global_norm(grads: &Gradients) -> f64 {
    grads.arrays.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Multiplier that brings the global gradient norm down to `max_norm`.
fn clip_scale(grads: &Gradients, max_norm: f64) -> f64 {
    if max_norm <= 0.0 {
        return 1.0;
    }
    let norm = global_norm(grads);
    if norm > max_norm {
        max_norm / norm
    } else {
        1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Per-epoch sums of the per-step loss breakdowns.
    pub epochs: Vec<LossBreakdown>,
    pub steps: usize,
    pub final_checkpoint: Option<PathBuf>,
    pub wall_seconds: f64,
    pub seed: u64,
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("ckpt_{epoch}.bin"))
}

/// Trains `model` in place. With `out_dir`, writes `ckpt_0.bin` (the
/// starting point), the step log, and the scheduled checkpoints.
pub fn train(
    model: &mut ModelState,
    cube: &HyperspectralCube,
    train_set: &SampleSet,
    pseudo: &PseudoLabeling,
    loss: &LossConfig,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    loss.validate()?;
    train_set.validate(cube)?;
    if pseudo.labels.len() != train_set.len() {
        return Err(Error::invalid(format!(
            "{} pseudo labels for {} training samples",
            pseudo.labels.len(),
            train_set.len()
        )));
    }
    if train_set.patch_size != model.spec.patch_size
        || cube.bands != model.spec.bands
        || cube.num_classes() != model.spec.num_classes
    {
        return Err(Error::invalid(
            "network spec does not match the data (patch size, bands or classes)",
        ));
    }
    let started = Instant::now();
    let patches = train_set.patches(cube)?;
    let labels: Vec<usize> = train_set.labels.iter().map(|&l| l as usize).collect();

    let mut log = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            checkpoint::save(&checkpoint_path(dir, 0), model, cfg.seed, 0)?;
            let path = dir.join(LOG_FILE);
            Some((BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?), path))
        }
        None => None,
    };
    let mut last_checkpoint = out_dir.map(|d| checkpoint_path(d, 0));

    let mut optimizer = Optimizer::new(cfg, &model.params);
    let mut report = TrainReport {
        epochs: Vec::with_capacity(cfg.epochs),
        steps: 0,
        final_checkpoint: None,
        wall_seconds: 0.0,
        seed: cfg.seed,
    };
    for epoch in 1..=cfg.epochs {
        let mut epoch_sum = LossBreakdown::default();
        for (step, batch) in make_batches(patches.len(), cfg.batch_size, cfg.seed, epoch)?.into_iter().enumerate() {
            let diverged = |detail: String| Error::Diverged {
                epoch,
                step,
                detail: match &last_checkpoint {
                    Some(p) => format!("{detail}; last good checkpoint {}", p.display()),
                    None => detail,
                },
            };
            let xs: Vec<_> = batch.iter().map(|&i| patches[i].clone()).collect();
            let ys: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let zs: Vec<usize> = batch.iter().map(|&i| pseudo.labels[i]).collect();
            let (breakdown, grads) =
                network::gradient(model, &xs, &zs, &ys, loss).map_err(|e| diverged(e.to_string()))?;
            if !breakdown.is_finite() {
                return Err(diverged("non-finite loss".into()));
            }
            if let Some((w, path)) = log.as_mut() {
                writeln!(w, "{}", breakdown.log_line(epoch, step)).map_err(|e| Error::io(path.as_path(), e))?;
            }
            optimizer.step(&mut model.params, &grads);
            if !model.all_finite() {
                return Err(diverged("non-finite parameters after update".into()));
            }
            epoch_sum.accumulate(&breakdown);
            report.steps += 1;
        }
        report.epochs.push(epoch_sum);

        if let Some(dir) = out_dir {
            let scheduled = cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0;
            if scheduled || epoch == cfg.epochs {
                if let Some((w, path)) = log.as_mut() {
                    w.flush().map_err(|e| Error::io(path.as_path(), e))?;
                }
                let path = checkpoint_path(dir, epoch);
                checkpoint::save(&path, model, cfg.seed, epoch)?;
                last_checkpoint = Some(path);
            }
        }
    }
    if let Some((mut w, path)) = log {
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    report.final_checkpoint = last_checkpoint.filter(|_| out_dir.is_some());
    report.wall_seconds = started.elapsed().as_secs_f64();
    Ok(report)
}
