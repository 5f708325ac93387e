use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{dfm_gradients, DfmParams, DfmSample};
use crate::error::{Error, Result};

/// SGD with momentum; the learning rate warms up linearly, then decays
/// log-linearly to `lr_final` at the last epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdSchedule {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub lr_final: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SgdSchedule {
    fn default() -> Self {
        SgdSchedule {
            epochs: 20,
            warmup_epochs: 5,
            lr_start: 0.001,
            lr_peak: 0.005,
            lr_final: 0.00005,
            momentum: 0.9,
            weight_decay: 0.0001,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl SgdSchedule {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Train(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be positive".into());
        }
        if !(self.lr_start > 0.0 && self.lr_peak > 0.0 && self.lr_final > 0.0) {
            return bad(format!(
                "learning rates must be positive (start {}, peak {}, final {})",
                self.lr_start, self.lr_peak, self.lr_final
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad(format!("momentum {} / weight decay {} out of range", self.momentum, self.weight_decay));
        }
        Ok(())
    }

    pub fn learning_rate(&self, epoch: usize) -> f64 {
        if epoch <= self.warmup_epochs {
            if self.warmup_epochs == 0 {
                return self.lr_peak;
            }
            let t = epoch as f64 / self.warmup_epochs as f64;
            return self.lr_start + (self.lr_peak - self.lr_start) * t;
        }
        let last = self.epochs.saturating_sub(1);
        if last <= self.warmup_epochs {
            return self.lr_peak;
        }
        let t = (epoch - self.warmup_epochs) as f64 / (last - self.warmup_epochs) as f64;
        self.lr_peak * (self.lr_final / self.lr_peak).powf(t.min(1.0))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    pub positive: f64,
    pub negative: f64,
}

/// Trains only the fusion parameters. Batches are drawn from a seeded
/// shuffle, so equal inputs give identical results for any thread count.
pub fn train_dfm(data: &[DfmSample], schedule: &SgdSchedule, mut params: DfmParams) -> Result<(DfmParams, Vec<EpochLog>)> {
    schedule.validate()?;
    if data.is_empty() {
        return Err(Error::Train("no training samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut theta = params.flatten();
    let mut velocity = vec![0.0; theta.len()];
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut logs = Vec::with_capacity(schedule.epochs);

    for epoch in 0..schedule.epochs {
        let lr = schedule.learning_rate(epoch);
        order.shuffle(&mut rng);
        let (mut loss, mut pos, mut neg, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(schedule.batch_size) {
            params.unflatten(&theta)?;
            // per-sample gradients in parallel, summed in a fixed order
            let parts = chunk
                .par_iter()
                .map(|&i| dfm_gradients(std::slice::from_ref(&data[i]), &params))
                .collect::<Result<Vec<_>>>()?;
            let k = chunk.len() as f64;
            let mut grad = vec![0.0; theta.len()];
            for (l, g) in &parts {
                loss += l.total / k;
                pos += l.positive / k;
                neg += l.negative / k;
                for (a, b) in grad.iter_mut().zip(g) {
                    *a += b / k;
                }
            }
            batches += 1;
            for ((t, v), g) in theta.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
                let g = g + schedule.weight_decay * *t;
                *v = schedule.momentum * *v + g;
                *t -= lr * *v;
            }
            if !theta.iter().all(|v| v.is_finite()) {
                return Err(Error::Train(format!("non-finite parameters at epoch {epoch}")));
            }
        }
        let b = batches as f64;
        logs.push(EpochLog {
            epoch,
            lr,
            loss: loss / b,
            positive: pos / b,
            negative: neg / b,
        });
    }
    params.unflatten(&theta)?;
    Ok((params, logs))
}
