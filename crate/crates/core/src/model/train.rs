//! AdamW training loop over packed sequences.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::checkpoint::{save_checkpoint, CheckpointError, CheckpointHeader};
use super::forward::{backward, forward_with_cache};
use super::loss::{masked_loss_grad, LossParts};
use super::schedule::{lr_at_step, TrainConfig};
use super::{ModelConfig, ModelError, ModelParams};
use crate::packing::PackedSequence;

/// Standard deviation used for fresh weights.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite loss {loss} at step {step} (batch sequences {batch:?})")]
    NonFinite { step: usize, batch: Vec<usize>, loss: f64 },
    #[error("no training sequences")]
    EmptyData,
    #[error("training data ran out before step {step}")]
    DataExhausted { step: usize },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// One line of the loss log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    /// Mean loss over segments without images.
    pub text_loss: Option<f64>,
    /// Mean loss over segments that contain an image.
    pub vision_loss: Option<f64>,
}

/// Loss and gradient for a batch; the loss is the mean over every active
/// position in the batch.
pub fn batch_gradients(
    params: &ModelParams,
    cfg: &ModelConfig,
    batch: &[&PackedSequence],
) -> Result<(LossParts, ModelParams), ModelError> {
    let mut grads = ModelParams::zeros(cfg);
    let mut parts = LossParts::default();
    let mut runs = Vec::with_capacity(batch.len());
    for seq in batch {
        let (logits, cache) = forward_with_cache(seq, params, cfg)?;
        parts.merge(&LossParts::of(&logits, seq));
        runs.push((logits, cache));
    }
    let denom = parts.count as f64;
    if parts.count > 0 {
        for (seq, (logits, cache)) in batch.iter().zip(&runs) {
            let dlogits = masked_loss_grad(logits, seq, denom);
            backward(params, cfg, cache, &dlogits, &mut grads);
        }
    }
    Ok((parts, grads))
}

pub struct Trainer {
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    params: ModelParams,
    first_moment: ModelParams,
    second_moment: ModelParams,
    step: usize,
}

impl Trainer {
    pub fn new(model_cfg: ModelConfig, train_cfg: TrainConfig, seed: u64) -> Result<Self, ModelError> {
        model_cfg.validate()?;
        let params = ModelParams::init(&model_cfg, seed, INIT_STD);
        Self::from_params(model_cfg, train_cfg, params)
    }

    pub fn from_params(model_cfg: ModelConfig, train_cfg: TrainConfig, params: ModelParams) -> Result<Self, ModelError> {
        model_cfg.validate()?;
        train_cfg.validate()?;
        params.check_shapes(&model_cfg)?;
        Ok(Self {
            first_moment: ModelParams::zeros(&model_cfg),
            second_moment: ModelParams::zeros(&model_cfg),
            model_cfg,
            train_cfg,
            params,
            step: 0,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            model: self.model_cfg.clone(),
            train: self.train_cfg.clone(),
            step: self.step,
        }
    }

    /// One optimizer step. `provenance` identifies the batch in errors.
    pub fn step(&mut self, batch: &[&PackedSequence], provenance: &[usize]) -> Result<LossRecord, TrainError> {
        let step = self.step + 1;
        let lr = lr_at_step(step, &self.train_cfg)?;
        let (parts, grads) = batch_gradients(&self.params, &self.model_cfg, batch)?;
        let loss = parts.mean();
        let grads_finite = grads.is_finite();
        if !loss.is_finite() || !grads_finite {
            return Err(TrainError::NonFinite {
                step,
                batch: provenance.to_vec(),
                loss,
            });
        }
        self.apply_adamw(&grads, lr, step);
        self.step = step;
        Ok(LossRecord {
            step,
            lr,
            loss,
            text_loss: parts.text_mean(),
            vision_loss: parts.vision_mean(),
        })
    }

    /// Decoupled weight decay applies to matrices only, not to norm gains or
    /// biases.
    fn apply_adamw(&mut self, grads: &ModelParams, lr: f64, step: usize) {
        let TrainConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.train_cfg;
        let c1 = 1.0 - beta1.powi(step as i32);
        let c2 = 1.0 - beta2.powi(step as i32);
        let params = self.params.tensors_mut();
        let m = self.first_moment.tensors_mut();
        let v = self.second_moment.tensors_mut();
        let g = grads.tensors();
        for (((p, m), v), g) in params.into_iter().zip(m).zip(v).zip(g) {
            let decay = if p.shape.len() == 2 { weight_decay } else { 0.0 };
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = beta1 * m.data[i] + (1.0 - beta1) * gi;
                v.data[i] = beta2 * v.data[i] + (1.0 - beta2) * gi * gi;
                let update = (m.data[i] / c1) / ((v.data[i] / c2).sqrt() + eps);
                p.data[i] -= lr * (update + decay * p.data[i]);
            }
        }
    }
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<LossRecord>,
}

/// Sequences for one optimizer step and where they came from.
#[derive(Debug, Clone)]
pub struct Batch {
    pub sequences: Vec<PackedSequence>,
    /// Record indices in the source, reported on failure.
    pub provenance: Vec<usize>,
}

/// Runs `train_cfg.total_steps` steps, cycling through `sequences` in order.
pub fn train(
    sequences: &[PackedSequence],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    if sequences.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let b = train_cfg.batch_size;
    let batches = (0..train_cfg.total_steps).map(|s| {
        let provenance: Vec<usize> = (0..b).map(|i| (s * b + i) % sequences.len()).collect();
        Batch {
            sequences: provenance.iter().map(|&i| sequences[i].clone()).collect(),
            provenance,
        }
    });
    train_batches(batches, model_cfg, train_cfg, seed, out_dir)
}

/// Runs one step per batch for `train_cfg.total_steps` steps.
///
/// With `out_dir`, the loss log is written to `loss.jsonl`, periodic
/// checkpoints to `step-<n>.sckp` and the final weights to `model.sckp`.
pub fn train_batches<I>(
    batches: I,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError>
where
    I: IntoIterator<Item = Batch>,
{
    let mut trainer = Trainer::new(model_cfg.clone(), train_cfg.clone(), seed)?;
    let log_path = out_dir.map(|d| d.join("loss.jsonl"));
    let io_err = |source| TrainError::Io {
        path: log_path.clone().unwrap_or_default(),
        source,
    };
    let mut log_file = match &log_path {
        Some(path) => Some(BufWriter::new(File::create(path).map_err(io_err)?)),
        None => None,
    };
    let mut log = Vec::with_capacity(train_cfg.total_steps);
    let mut batches = batches.into_iter();
    for step in 1..=train_cfg.total_steps {
        let batch = batches.next().ok_or(TrainError::DataExhausted { step })?;
        if batch.sequences.is_empty() {
            return Err(TrainError::EmptyData);
        }
        let refs: Vec<&PackedSequence> = batch.sequences.iter().collect();
        let record = trainer.step(&refs, &batch.provenance)?;
        log::debug!("step {} lr {:.3e} loss {:.5}", record.step, record.lr, record.loss);
        if let (Some(w), Some(dir)) = (log_file.as_mut(), out_dir) {
            let line = serde_json::to_string(&record).expect("loss record serializes");
            writeln!(w, "{line}").map_err(io_err)?;
            let every = train_cfg.checkpoint_every;
            if every > 0 && record.step % every == 0 {
                w.flush().map_err(io_err)?;
                let path = dir.join(format!("step-{}.sckp", record.step));
                save_checkpoint(&path, &trainer.header(), trainer.params())?;
            }
        }
        log.push(record);
    }
    if let (Some(mut w), Some(dir)) = (log_file, out_dir) {
        w.flush().map_err(io_err)?;
        save_checkpoint(&dir.join("model.sckp"), &trainer.header(), trainer.params())?;
    }
    Ok(TrainOutcome {
        params: trainer.into_params(),
        log,
    })
}
