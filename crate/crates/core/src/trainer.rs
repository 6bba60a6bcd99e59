//! Two-stage training loop with early stopping.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{ModelSpec, ModelState};
use crate::config::RunConfig;
use crate::data::{Dataset, SplitPlan};
use crate::error::{Error, Result};
use crate::eval::evaluate_retrieval;
use crate::model::{compute_gradients, BatchSample, Model, ModelDims, ObjectiveSpec};
use crate::objectives::lambda_at;
use crate::optim::adamw_step;
use crate::rng::{self, Stream};
use crate::target::draw_masks;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: u8,
    pub lambda: f64,
    pub lr: f64,
    /// Batch means of the optimized objective and its two parts.
    pub loss_total: f64,
    pub loss_ret: f64,
    pub loss_mmd: f64,
    pub batches: usize,
    pub skipped_batches: usize,
    pub shared_frozen: bool,
    /// Hash of the shared-encoder parameters at the end of the epoch.
    pub shared_fingerprint: String,
    pub val_top1: Option<f64>,
}

/// Loop bookkeeping needed to resume exactly.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_top1: Option<f64>,
    pub evals_since_best: usize,
    pub stopped_early: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best-validation state (the last state when there is no validation set).
    pub best: ModelState,
    pub last: ModelState,
    pub progress: Progress,
}

pub fn model_dims(dataset: &Dataset) -> ModelDims {
    let m = &dataset.manifest;
    ModelDims {
        signal_len: m.signal_len(),
        layer_dims: m.layers.iter().map(|l| l.dim).collect(),
        subjects: m.subjects,
    }
}

pub fn model_spec(config: &RunConfig, dataset: &Dataset) -> ModelSpec {
    ModelSpec {
        dims: model_dims(dataset),
        model: config.model.clone(),
        router: config.router.clone(),
        tau_init: config.loss.tau_init,
    }
}

pub fn shared_fingerprint(model: &Model) -> String {
    let mut h = Sha256::new();
    for v in model.shared.linear.weight.data.iter().chain(&model.shared.linear.bias) {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

pub struct TrainSession<'a> {
    dataset: &'a Dataset,
    plan: SplitPlan,
    config: RunConfig,
    state: ModelState,
    best: Option<ModelState>,
    progress: Progress,
}

impl<'a> TrainSession<'a> {
    pub fn new(dataset: &'a Dataset, plan: SplitPlan, config: RunConfig) -> Result<Self> {
        let state = ModelState::new(model_spec(&config, dataset), config.seed)?;
        Self::resume(dataset, plan, config, state, None, Progress::default())
    }

    /// Continues from a saved state; `best` and `progress` come from the
    /// same point of the interrupted run.
    pub fn resume(
        dataset: &'a Dataset,
        plan: SplitPlan,
        config: RunConfig,
        state: ModelState,
        best: Option<ModelState>,
        progress: Progress,
    ) -> Result<Self> {
        config.schedule().validate()?;
        config.mmd().validate()?;
        if config.train.batch_size < 2 {
            return Err(Error::config("train.batch_size", "must be at least 2"));
        }
        if config.train.eval_every == 0 {
            return Err(Error::config("train.eval_every", "must be positive"));
        }
        if state.spec.dims != model_dims(dataset) {
            return Err(Error::Checkpoint {
                path: Default::default(),
                reason: format!(
                    "shape mismatch: state built for {:?}, dataset has {:?}",
                    state.spec.dims,
                    model_dims(dataset)
                ),
            });
        }
        if state.epoch as usize != progress.history.len() {
            return Err(Error::config(
                "resume",
                format!("state is at epoch {} but progress has {} epochs", state.epoch, progress.history.len()),
            ));
        }
        Ok(TrainSession {
            dataset,
            plan,
            config,
            state,
            best,
            progress,
        })
    }

    pub fn state(&self) -> &ModelState {
        &self.state
    }

    pub fn best(&self) -> Option<&ModelState> {
        self.best.as_ref()
    }

    pub fn progress(&self) -> &Progress {
        &self.progress
    }

    pub fn is_finished(&self) -> bool {
        self.progress.stopped_early || self.state.epoch as usize >= self.config.train.epochs
    }

    /// Runs the next epoch and returns its record.
    pub fn run_epoch(&mut self) -> Result<&EpochRecord> {
        let epoch = self.state.epoch as usize + 1;
        let schedule = self.config.schedule();
        let train_cfg = &self.config.train;
        let stage_one = schedule.in_stage_one(epoch);
        if !stage_one && train_cfg.freeze_shared_stage2 {
            self.state.model.shared.frozen = true;
        }
        let lambda = lambda_at(&schedule, epoch);
        let lr = if stage_one {
            train_cfg.lr
        } else {
            train_cfg.lr * train_cfg.stage2_lr_multiplier
        };
        let objective = ObjectiveSpec {
            lambda: stage_one.then_some(lambda),
            mmd: self.config.mmd(),
            bandwidth: None,
        };

        let mut order = self.plan.train.clone();
        let mut shuffle = rng::stream(self.config.seed, Stream::Shuffle, &[epoch as u64]);
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut shuffle);

        let (mut sum_total, mut sum_ret, mut sum_mmd) = (0.0, 0.0, 0.0);
        let (mut batches, mut skipped) = (0usize, 0usize);
        for (b, chunk) in order.chunks(train_cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                log::warn!("epoch {epoch}: skipping batch {b} of size {}", chunk.len());
                skipped += 1;
                continue;
            }
            let batch: Vec<BatchSample<'_>> = chunk
                .iter()
                .map(|&t| {
                    let trial = &self.dataset.trials[t];
                    let mut drop_rng = rng::stream(self.config.seed, Stream::Dropout, &[epoch as u64, t as u64]);
                    let (keep_subject, layer_mask) = draw_masks(&self.state.model.router, &mut drop_rng);
                    BatchSample {
                        signal: &trial.signal,
                        subject: trial.subject,
                        features: &self.dataset.features[trial.image],
                        keep_subject,
                        layer_mask,
                    }
                })
                .collect();
            let at = |e: Error| Error::Numeric(format!("epoch {epoch}, batch {b}: {e}"));
            let mut out = compute_gradients(&self.state.model, &batch, &objective).map_err(at)?;
            adamw_step(
                &mut self.state.model,
                &mut out.grads,
                &mut self.state.optimizer,
                lr,
                train_cfg.weight_decay,
            )
            .map_err(at)?;
            sum_total += out.loss;
            sum_ret += out.loss_ret;
            sum_mmd += out.loss_mmd;
            batches += 1;
        }
        if batches == 0 {
            return Err(Error::config(
                "train.batch_size",
                format!("epoch {epoch} produced no batch of at least 2 trials"),
            ));
        }
        self.state.epoch = epoch as u64;

        let evaluate = !self.plan.val.is_empty() && (epoch.is_multiple_of(train_cfg.eval_every) || epoch == train_cfg.epochs);
        let val_top1 = if evaluate {
            Some(evaluate_retrieval(&self.state.model, self.dataset, &self.plan.val, &[1])?.top1())
        } else {
            None
        };
        let n = batches as f64;
        let record = EpochRecord {
            epoch,
            stage: if stage_one { 1 } else { 2 },
            lambda,
            lr,
            loss_total: sum_total / n,
            loss_ret: sum_ret / n,
            loss_mmd: sum_mmd / n,
            batches,
            skipped_batches: skipped,
            shared_frozen: self.state.model.shared.frozen,
            shared_fingerprint: shared_fingerprint(&self.state.model),
            val_top1,
        };
        log::info!(
            "epoch {epoch} stage {} loss {:.5} (ret {:.5}, mmd {:.5}) lambda {lambda:.3} lr {lr:.2e} val_top1 {:?}",
            record.stage,
            record.loss_total,
            record.loss_ret,
            record.loss_mmd,
            val_top1
        );

        if let Some(v) = val_top1 {
            let improved = self.progress.best_val_top1.is_none_or(|best| v > best);
            if improved {
                self.progress.best_val_top1 = Some(v);
                self.progress.best_epoch = Some(epoch);
                self.progress.evals_since_best = 0;
                self.best = Some(self.state.clone());
            } else {
                self.progress.evals_since_best += 1;
                let patience = train_cfg.patience;
                if patience > 0 && self.progress.evals_since_best >= patience {
                    log::info!("early stop at epoch {epoch} (best epoch {:?})", self.progress.best_epoch);
                    self.progress.stopped_early = true;
                }
            }
        }
        self.progress.history.push(record);
        Ok(self.progress.history.last().expect("just pushed"))
    }

    pub fn run(mut self) -> Result<TrainOutcome> {
        while !self.is_finished() {
            self.run_epoch()?;
        }
        Ok(self.finish())
    }

    pub fn finish(self) -> TrainOutcome {
        let last = self.state;
        let best = self.best.unwrap_or_else(|| last.clone());
        TrainOutcome {
            best,
            last,
            progress: self.progress,
        }
    }
}

/// Trains from scratch on `plan` and returns the best and last states.
pub fn train(dataset: &Dataset, plan: SplitPlan, config: &RunConfig) -> Result<TrainOutcome> {
    TrainSession::new(dataset, plan, config.clone())?.run()
}
