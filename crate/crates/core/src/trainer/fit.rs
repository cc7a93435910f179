use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::{derive_seed, epoch_batches};
use super::optim::{clip_global_norm, Adam};
use super::{TrainConfig, TrainError};
use crate::graph::Gradients;
use crate::model::{Bound, ParamSet};

/// One row of a loss trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub step: String,
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    /// Best validation loss so far within the step.
    pub best_valid: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: String,
    pub records: Vec<EpochRecord>,
    pub best_valid: f64,
    pub best_epoch: usize,
}

/// Observer verdict after each epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Abort,
}

/// A differentiable training problem over a list of parameter sets.
pub(crate) trait Objective: Sync {
    fn num_items(&self) -> usize;

    /// Per-item loss and gradients for one batch of item indices. The batch
    /// is passed whole because remixing transforms it jointly.
    fn batch_items(
        &self,
        params: &[ParamSet],
        batch: &[usize],
        epoch: usize,
        batch_no: usize,
    ) -> Result<Vec<(f64, Vec<ParamSet>)>, TrainError>;

    fn valid_loss(&self, params: &[ParamSet]) -> Result<f64, TrainError>;
}

/// Gradients of `bound`'s tensors, zero where the loss did not reach them.
pub(crate) fn collect_grads(grads: &mut Gradients, bound: &Bound, like: &ParamSet) -> ParamSet {
    let mut out = ParamSet::new();
    for (name, t) in like.iter() {
        let g = grads
            .take(bound.var(name))
            .unwrap_or_else(|| crate::graph::Tensor::zeros(t.dim()));
        out.insert(name.clone(), g);
    }
    out
}

pub(crate) fn step_stream(step: &str) -> u64 {
    step.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Mean of `f(i)` over `0..n`, evaluated in parallel and summed in order.
pub(crate) fn parallel_mean<F>(n: usize, f: F) -> Result<f64, TrainError>
where
    F: Fn(usize) -> Result<f64, TrainError> + Sync + Send,
{
    let vals = (0..n).into_par_iter().map(f).collect::<Result<Vec<f64>, _>>()?;
    Ok(vals.iter().sum::<f64>() / n.max(1) as f64)
}

fn mean_grads(items: Vec<(f64, Vec<ParamSet>)>) -> (f64, Vec<ParamSet>) {
    let n = items.len() as f64;
    let mut iter = items.into_iter();
    let (mut loss, mut acc) = iter.next().expect("non-empty batch");
    for (l, gs) in iter {
        loss += l;
        for (a, g) in acc.iter_mut().zip(gs) {
            for (name, t) in a.iter_mut() {
                *t += g.get(name).expect("same layout");
            }
        }
    }
    for a in acc.iter_mut() {
        for (_, t) in a.iter_mut() {
            t.mapv_inplace(|v| v / n);
        }
    }
    (loss / n, acc)
}

/// Adam with clipping and plateau decay, early-stopped on validation loss.
/// On return `params` hold the best-validation parameters.
pub(crate) fn fit(
    cfg: &TrainConfig,
    step: &str,
    params: &mut [ParamSet],
    obj: &dyn Objective,
    observer: &mut dyn FnMut(&EpochRecord) -> Control,
) -> Result<StepReport, TrainError> {
    let stream = step_stream(step);
    let mut opt = Adam::new(cfg.learning_rate, params);
    let mut best = f64::INFINITY;
    let mut best_epoch = 0;
    let mut best_params = params.to_vec();
    let mut stale = 0;
    // Halve the step size every `plateau` stale epochs.
    let plateau = (cfg.patience / 2).max(1);
    let mut records = Vec::new();
    let non_finite = |epoch| TrainError::NonFinite {
        step: step.to_string(),
        epoch,
    };
    for epoch in 1..=cfg.max_epochs {
        let batches = epoch_batches(
            obj.num_items(),
            cfg.batch_size,
            derive_seed(cfg.seed, &[stream, epoch as u64]),
        );
        let mut train_sum = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            let items = obj.batch_items(params, batch, epoch, b)?;
            let (loss, mut grads) = mean_grads(items);
            if !loss.is_finite() {
                return Err(non_finite(epoch));
            }
            clip_global_norm(&mut grads, cfg.clip_norm);
            opt.step(params, &grads);
            train_sum += loss * batch.len() as f64;
        }
        let train_loss = train_sum / obj.num_items() as f64;
        let valid_loss = obj.valid_loss(params)?;
        if !valid_loss.is_finite() {
            return Err(non_finite(epoch));
        }
        if valid_loss < best - cfg.tolerance || best_epoch == 0 {
            best = best.min(valid_loss);
            best_epoch = epoch;
            best_params = params.to_vec();
            stale = 0;
        } else {
            stale += 1;
            if stale % plateau == 0 {
                opt.lr *= cfg.lr_decay;
            }
        }
        let rec = EpochRecord {
            step: step.to_string(),
            epoch,
            train_loss,
            valid_loss,
            best_valid: best,
            lr: opt.lr,
        };
        log::info!(
            "{step} epoch {epoch}: train {train_loss:.4} valid {valid_loss:.4} best {best:.4}"
        );
        records.push(rec.clone());
        if observer(&rec) == Control::Abort {
            return Err(TrainError::Aborted {
                step: step.to_string(),
                epoch,
            });
        }
        if stale >= cfg.patience {
            break;
        }
    }
    params.clone_from_slice(&best_params);
    Ok(StepReport {
        step: step.to_string(),
        records,
        best_valid: best,
        best_epoch,
    })
}

/// Runs `f` on a pool of `workers` threads (0: the global pool).
pub(crate) fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> T {
    if workers == 0 {
        return f();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(pool) => pool.install(f),
        Err(e) => {
            log::warn!("cannot build a {workers}-thread pool ({e}); using the global pool");
            f()
        }
    }
}
