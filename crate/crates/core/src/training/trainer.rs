use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::{adam_step, AdamConfig, AdamState};
use crate::data::{EncodedDataset, EncodedSample};
use crate::error::{Error, Result};
use crate::model::{BatchStats, Model};

const SHUFFLE_KEY: u64 = 0x7368_7566_666c_6521;

/// Per-epoch means over all training samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_ce: f64,
    pub loss_cca: f64,
    pub train_acc: f64,
}

pub const LOG_HEADER: &str = "epoch,loss_total,loss_ce,loss_cca,train_acc";

/// CSV with [`LOG_HEADER`] and one row per epoch.
pub fn log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for e in log {
        out.push_str(&format!(
            "{},{:.12},{:.12},{:.12},{:.6}\n",
            e.epoch, e.loss_total, e.loss_ce, e.loss_cca, e.train_acc
        ));
    }
    out
}

/// Visiting order for `epoch` (0-based): a ChaCha8 stream keyed by the run
/// seed with the epoch as stream id, so any epoch can be regenerated
/// without replaying the earlier ones.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SHUFFLE_KEY);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Consecutive chunks of `batch`; a trailing single sample joins the
/// previous chunk since the correlation loss needs two rows.
pub fn batches(order: &[usize], batch: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(batch).collect();
    if out.len() > 1 && out.last().map_or(false, |c| c.len() == 1) {
        out.pop();
        let start = (out.len() - 1) * batch;
        *out.last_mut().expect("at least one chunk") = &order[start..];
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub model: Model,
    pub adam: AdamState,
    pub log: Vec<EpochLog>,
}

impl Trainer {
    pub fn new(model: Model) -> Self {
        let adam = AdamState::new(&model.store);
        Self {
            model,
            adam,
            log: Vec::new(),
        }
    }

    pub fn adam_config(&self) -> AdamConfig {
        let c = &self.model.config;
        AdamConfig {
            learning_rate: c.learning_rate,
            beta1: c.adam_beta1,
            beta2: c.adam_beta2,
            eps: c.adam_eps,
            grad_clip: c.grad_clip,
        }
    }

    pub fn epochs_done(&self) -> usize {
        self.log.len()
    }

    /// One optimizer step on `batch`; the statistics are taken before the
    /// update.
    pub fn step(&mut self, batch: &[&EncodedSample]) -> Result<BatchStats> {
        let (stats, grads) = self.model.batch_gradients(batch)?;
        let cfg = self.adam_config();
        adam_step(&mut self.model.store, &mut self.adam, &grads, &cfg)?;
        Ok(stats)
    }

    pub fn run_epoch(&mut self, data: &EncodedDataset) -> Result<EpochLog> {
        if data.len() < 2 {
            return Err(Error::Contract(format!("training needs at least 2 samples, got {}", data.len())));
        }
        let epoch = self.log.len();
        let order = epoch_order(self.model.config.seed, epoch, data.len());
        let mut sums = BatchStats::default();
        for chunk in batches(&order, self.model.config.batch_size) {
            let batch: Vec<&EncodedSample> = chunk.iter().map(|&i| &data.samples[i]).collect();
            let s = self.step(&batch)?;
            let w = s.count as f64;
            sums.loss_total += s.loss_total * w;
            sums.loss_ce += s.loss_ce * w;
            sums.loss_cca += s.loss_cca * w;
            sums.correct += s.correct;
            sums.count += s.count;
        }
        let n = sums.count as f64;
        let entry = EpochLog {
            epoch: epoch + 1,
            loss_total: sums.loss_total / n,
            loss_ce: sums.loss_ce / n,
            loss_cca: sums.loss_cca / n,
            train_acc: sums.correct as f64 / n,
        };
        self.log.push(entry);
        Ok(entry)
    }

    /// Trains until `config.epochs` epochs are logged.
    pub fn run(&mut self, data: &EncodedDataset) -> Result<&[EpochLog]> {
        while self.log.len() < self.model.config.epochs {
            self.run_epoch(data)?;
        }
        Ok(&self.log)
    }
}

/// Trains a fresh model for the configured number of epochs.
pub fn train(model: Model, data: &EncodedDataset) -> Result<Trainer> {
    let mut t = Trainer::new(model);
    t.run(data)?;
    Ok(t)
}
