use log::{debug, info};
use serde::{Deserialize, Serialize};

use super::checkpoint::{data_hash, Checkpoint, EarlyStopping, EpochProgress};
use super::optim::{noam_learning_rate, Adam};
use super::TrainConfig;
use crate::corpus::{slice_right_to_left, InteractionSequence, SplitKind, SplitSet};
use crate::encoder::{backward, forward_peer_cached, parameter_class, DualModel, PeerCache};
use crate::error::{HailError, Result};
use crate::eval::evaluate_split;
use crate::losses::{batch_objective, LossBreakdown, PeerDistributions};
use crate::masking::{make_batches, mask_corpus, MaskedBatch, MaskedSample};
use crate::seed::{rng_for, Stream};

/// Attention caches above this many bytes per step are recomputed in the
/// backward pass instead of kept.
const CACHE_BUDGET_BYTES: usize = 768 << 20;

/// One line of the metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 0-based.
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    /// Per-peer means over the epoch's batches.
    pub sk: Vec<f64>,
    pub med_pos: Vec<f64>,
    pub med_neg: Vec<f64>,
    pub total: f64,
    /// Mean number of coordinates per batch whose MED terms were dropped.
    pub truncated: f64,
    pub valid_peer: usize,
    pub valid_hr1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Finished,
    StoppedEarly,
    /// The step budget ran out at a batch boundary.
    Paused,
}

fn estimated_cache_bytes(batch: &MaskedBatch, cfg: &TrainConfig) -> usize {
    let per_row: usize = batch
        .lengths
        .iter()
        .map(|&n| n * n * cfg.heads + n * (6 * cfg.d + 2 * cfg.d_hidden))
        .sum();
    per_row * cfg.layers * cfg.peers * 8
}

/// Forward all peers, form the objective, backpropagate and take one Adam
/// step at 1-based `step`.
pub fn train_step(
    model: &mut DualModel,
    adam: &mut Adam,
    batch: &MaskedBatch,
    cfg: &TrainConfig,
    step: u64,
) -> Result<LossBreakdown> {
    if batch.masked_count() == 0 {
        return Err(HailError::contract("batch has no masked coordinates"));
    }
    if batch.max_len > model.shape.max_len {
        return Err(HailError::contract(format!(
            "batch max_len {} exceeds model max_len {}",
            batch.max_len, model.shape.max_len
        )));
    }
    let keep = estimated_cache_bytes(batch, cfg) <= CACHE_BUDGET_BYTES;
    let mut rows = Vec::with_capacity(model.peers());
    let mut caches: Vec<PeerCache> = Vec::with_capacity(model.peers());
    for j in 0..model.peers() {
        let (r, c) = forward_peer_cached(model, j, batch, keep)?;
        rows.push(r);
        caches.push(c);
    }
    let dists = PeerDistributions::new(rows, batch.labels.clone())?;
    let names = |i: usize| {
        let (r, c) = batch.mask_index[i];
        format!("(row {r}, position {c})")
    };
    let out = batch_objective(&dists, &cfg.objective(), &names)?;

    let mut grads = model.params.zeros_like();
    for (j, cache) in caches.iter().enumerate() {
        backward(model, j, batch, cache, &out.dlogits[j], &mut grads)?;
    }
    drop(caches);
    for (name, m) in grads.blocks() {
        if let Some(k) = m.data.iter().position(|x| !x.is_finite()) {
            return Err(HailError::Numeric(format!(
                "non-finite gradient in {name} ({}) at flat index {k}",
                parameter_class(&name)
            )));
        }
    }
    let lr = noam_learning_rate(step, cfg.d, cfg.warmup_steps);
    adam.update(&mut model.params, &grads, lr, step)?;
    Ok(out.breakdown)
}

/// Cuts train sequences longer than `max_len` into right-aligned windows.
fn fit_to_length(train: &[InteractionSequence], max_len: usize) -> Vec<InteractionSequence> {
    let mut out = Vec::with_capacity(train.len());
    for s in train {
        if s.elements.len() <= max_len {
            out.push(s.clone());
        } else {
            let windows = slice_right_to_left(&s.elements, max_len, 2);
            out.extend(windows.into_iter().rev().map(|w| InteractionSequence {
                generator: s.generator,
                elements: w.to_vec(),
            }));
        }
    }
    out
}

/// Resumable training loop over a fixed set of masked samples.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    split: &'a SplitSet,
    samples: Vec<MaskedSample>,
    model: DualModel,
    adam: Adam,
    step: u64,
    epoch: usize,
    batch_in_epoch: usize,
    progress: EpochProgress,
    early: EarlyStopping,
    log: Vec<EpochMetrics>,
    config_hash: String,
    data_hash: String,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, split: &'a SplitSet, vocab_rows: usize) -> Result<Self> {
        cfg.validate()?;
        let model = DualModel::new(cfg.shape(vocab_rows), cfg.seed)?;
        let adam = Adam::new(&model.params);
        Self::assemble(cfg, split, model, adam)
    }

    /// Continues from a checkpoint. The trajectory-shaping part of `cfg` and
    /// the data must match what the checkpoint was trained with.
    pub fn resume(cfg: TrainConfig, split: &'a SplitSet, ckpt: Checkpoint) -> Result<Self> {
        cfg.validate()?;
        if cfg.config_hash() != ckpt.config_hash {
            return Err(HailError::Incompatible(format!(
                "config hash {} differs from the checkpoint's {}; refusing to resume",
                cfg.config_hash(),
                ckpt.config_hash
            )));
        }
        let dh = data_hash(split);
        if dh != ckpt.data_hash {
            return Err(HailError::Incompatible(format!(
                "data hash {dh} differs from the checkpoint's {}; refusing to resume",
                ckpt.data_hash
            )));
        }
        let model = ckpt.model();
        let mut t = Self::assemble(cfg, split, model, ckpt.adam)?;
        t.step = ckpt.step;
        t.epoch = ckpt.epoch;
        t.batch_in_epoch = ckpt.batch_in_epoch;
        t.progress = ckpt.progress;
        t.early = ckpt.early;
        t.log = ckpt.log;
        Ok(t)
    }

    fn assemble(cfg: TrainConfig, split: &'a SplitSet, model: DualModel, adam: Adam) -> Result<Self> {
        if split.train.is_empty() {
            return Err(HailError::contract("train split is empty"));
        }
        let train = fit_to_length(&split.train, cfg.max_len);
        let mut rng = rng_for(cfg.seed, Stream::Masking);
        let samples = mask_corpus(&train, model.shape.vocab_rows as u32 - 1, cfg.mask_ratio, cfg.duplication, &mut rng)?;
        if samples.is_empty() {
            return Err(HailError::contract("no trainable sequences (all shorter than 2)"));
        }
        let progress = EpochProgress {
            sk: vec![0.0; cfg.peers],
            med_pos: vec![0.0; cfg.peers],
            med_neg: vec![0.0; cfg.peers],
            ..EpochProgress::default()
        };
        Ok(Trainer {
            config_hash: cfg.config_hash(),
            data_hash: data_hash(split),
            cfg,
            split,
            samples,
            model,
            adam,
            step: 0,
            epoch: 0,
            batch_in_epoch: 0,
            progress,
            early: EarlyStopping::default(),
            log: Vec::new(),
        })
    }

    pub fn model(&self) -> &DualModel {
        &self.model
    }

    pub fn log(&self) -> &[EpochMetrics] {
        &self.log
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn samples(&self) -> usize {
        self.samples.len()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            config_hash: self.config_hash.clone(),
            data_hash: self.data_hash.clone(),
            shape: self.model.shape,
            params: self.model.params.clone(),
            adam: self.adam.clone(),
            step: self.step,
            epoch: self.epoch,
            batch_in_epoch: self.batch_in_epoch,
            progress: self.progress.clone(),
            early: self.early.clone(),
            log: self.log.clone(),
        }
    }

    pub fn run(&mut self, max_steps: Option<u64>) -> Result<RunStatus> {
        self.run_with(max_steps, |_, _| Ok(()))
    }

    /// Trains until the epoch budget is spent, early stopping fires or
    /// `max_steps` more steps have run. `on_epoch` sees each finished epoch.
    pub fn run_with<F>(&mut self, max_steps: Option<u64>, mut on_epoch: F) -> Result<RunStatus>
    where
        F: FnMut(&Trainer<'a>, &EpochMetrics) -> Result<()>,
    {
        let mut budget = max_steps;
        while self.epoch < self.cfg.epochs {
            if self.early.stopped {
                return Ok(RunStatus::StoppedEarly);
            }
            let mut rng = rng_for(self.cfg.seed, Stream::Epoch(self.epoch as u64));
            let batches = make_batches(&self.samples, self.cfg.batch_size, self.cfg.max_len, 0, &mut rng)?;
            while self.batch_in_epoch < batches.len() {
                if budget == Some(0) {
                    return Ok(RunStatus::Paused);
                }
                self.step += 1;
                let lb = train_step(&mut self.model, &mut self.adam, &batches[self.batch_in_epoch], &self.cfg, self.step)?;
                self.accumulate(&lb);
                self.batch_in_epoch += 1;
                budget = budget.map(|b| b - 1);
                debug!("step {} loss {:.6}", self.step, lb.grand_total);
            }
            let metrics = self.finish_epoch()?;
            on_epoch(self, &metrics)?;
        }
        Ok(if self.early.stopped {
            RunStatus::StoppedEarly
        } else {
            RunStatus::Finished
        })
    }

    fn accumulate(&mut self, lb: &LossBreakdown) {
        let p = &mut self.progress;
        p.batches += 1;
        for (j, peer) in lb.peers.iter().enumerate() {
            p.sk[j] += peer.sk;
            p.med_pos[j] += peer.med_pos;
            p.med_neg[j] += peer.med_neg;
        }
        p.total += lb.grand_total;
        p.truncated += lb.peers.first().map_or(0, |x| x.truncated_count);
    }

    fn finish_epoch(&mut self) -> Result<EpochMetrics> {
        let peer = self.cfg.peer_index;
        let report = evaluate_split(&self.model, peer, self.split, SplitKind::Valid, &self.cfg.eval_config())?;
        let p = std::mem::take(&mut self.progress);
        let n = p.batches.max(1) as f64;
        let mean = |v: &[f64]| v.iter().map(|x| x / n).collect::<Vec<_>>();
        let metrics = EpochMetrics {
            epoch: self.epoch,
            step: self.step,
            lr: noam_learning_rate(self.step.max(1), self.cfg.d, self.cfg.warmup_steps),
            sk: mean(&p.sk),
            med_pos: mean(&p.med_pos),
            med_neg: mean(&p.med_neg),
            total: p.total / n,
            truncated: p.truncated as f64 / n,
            valid_peer: peer,
            valid_hr1: report.hr_1,
        };
        info!(
            "epoch {} step {} sk {:?} total {:.5} valid hr@1 {:.4}",
            metrics.epoch, metrics.step, metrics.sk, metrics.total, metrics.valid_hr1
        );

        let e = &mut self.early;
        if e.best_hr1.is_none_or(|b| report.hr_1 > b) {
            e.best_hr1 = Some(report.hr_1);
            e.best_epoch = Some(self.epoch);
            e.bad_epochs = 0;
        } else {
            e.bad_epochs += 1;
            if self.cfg.patience > 0 && e.bad_epochs >= self.cfg.patience {
                e.stopped = true;
                info!("early stopping after epoch {}: no valid HR@1 gain for {} epochs", self.epoch, e.bad_epochs);
            }
        }

        self.progress = EpochProgress {
            sk: vec![0.0; self.cfg.peers],
            med_pos: vec![0.0; self.cfg.peers],
            med_neg: vec![0.0; self.cfg.peers],
            ..EpochProgress::default()
        };
        self.log.push(metrics.clone());
        self.epoch += 1;
        self.batch_in_epoch = 0;
        Ok(metrics)
    }
}

/// Trains from scratch; returns the final checkpoint and the metric log.
pub fn train(cfg: &TrainConfig, split: &SplitSet, vocab_rows: usize) -> Result<(Checkpoint, Vec<EpochMetrics>)> {
    let mut t = Trainer::new(cfg.clone(), split, vocab_rows)?;
    t.run(None)?;
    Ok((t.checkpoint(), t.log.clone()))
}
