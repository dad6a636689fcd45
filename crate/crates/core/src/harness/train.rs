//! Mini-batch training with Adam or plain SGD.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::metrics::exact_match;
use crate::autodiff::{ParamStore, Tape};
use crate::captioner::{CaptionSample, Captioner};
use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Optimizer {
    Sgd,
    Adam,
}

impl FromStr for Optimizer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            _ => Err(Error::Parse(format!("unknown optimizer `{s}`"))),
        }
    }
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sgd => "sgd",
            Self::Adam => "adam",
        })
    }
}

/// Stop once the epoch's teacher-forced accuracy and the greedy exact match
/// on the training set both reach these values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StopTarget {
    pub token_accuracy: f64,
    pub exact_match: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub seed: u64,
    pub stop: Option<StopTarget>,
    /// Threads for the early-stopping evaluation.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 1e-3,
            optimizer: Optimizer::Adam,
            batch_size: 1,
            clip_norm: 5.0,
            seed: 0,
            stop: None,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return invalid(format!("learning rate must be a finite value >= 0, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return invalid("batch_size must be at least 1");
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return invalid("clip_norm must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub total_loss: f64,
    pub cap_loss: f64,
    pub concept_loss: f64,
    pub token_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub stopped_early: bool,
}

impl TrainLog {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "epoch,total_loss,cap_loss,concept_loss,token_acc")?;
        for e in &self.epochs {
            writeln!(
                w,
                "{},{:.8},{:.8},{:.8},{:.6}",
                e.epoch, e.total_loss, e.cap_loss, e.concept_loss, e.token_acc
            )?;
        }
        Ok(())
    }

    pub fn last(&self) -> Option<&EpochLog> {
        self.epochs.last()
    }
}

/// Adam with the usual moment decay rates.
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One update from the gradients held in `store`, each multiplied by
    /// `scale` first.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64, scale: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for ((p, m), v) in store.tensors_mut().zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = p.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            for (((x, g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g * scale;
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *x -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

fn sgd_step(store: &mut ParamStore, lr: f64, scale: f64) {
    for p in store.tensors_mut() {
        let Some(g) = p.grad().map(<[f64]>::to_vec) else {
            continue;
        };
        for (x, g) in p.data_mut().iter_mut().zip(g) {
            *x -= lr * g * scale;
        }
    }
}

/// Trains `model` on `data` and returns per-epoch mean losses.
pub fn train(model: &mut Captioner, data: &[CaptionSample], cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&model.store);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = TrainLog::default();
    let mut step = 0usize;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut cap, mut concept) = (0.0, 0.0, 0.0);
        let (mut correct, mut count) = (0usize, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            model.store.zero_grad();
            for &i in batch {
                let mut tape = Tape::new();
                let out = match model.forward_train(&mut tape, &data[i]) {
                    Ok(o) => o,
                    Err(Error::NonFinite(_)) => {
                        return Err(Error::Diverged { epoch, step, loss: f64::NAN })
                    }
                    Err(e) => return Err(e),
                };
                if !out.total.is_finite() {
                    return Err(Error::Diverged { epoch, step, loss: out.total });
                }
                total += out.total;
                cap += out.cap;
                concept += out.concept;
                correct += out.correct;
                count += out.count;
                tape.backward_into(out.loss, &mut model.store)?;
            }
            let scale = 1.0 / batch.len() as f64;
            let norm = model.store.grad_norm() * scale;
            if !norm.is_finite() {
                return Err(Error::Diverged { epoch, step, loss: norm });
            }
            let scale = if norm > cfg.clip_norm { scale * cfg.clip_norm / norm } else { scale };
            match cfg.optimizer {
                Optimizer::Adam => adam.step(&mut model.store, cfg.lr, scale),
                Optimizer::Sgd => sgd_step(&mut model.store, cfg.lr, scale),
            }
            step += 1;
        }
        let n = data.len() as f64;
        let entry = EpochLog {
            epoch,
            total_loss: total / n,
            cap_loss: cap / n,
            concept_loss: concept / n,
            token_acc: if count == 0 { 0.0 } else { correct as f64 / count as f64 },
        };
        log::info!(
            "epoch {epoch}: loss {:.4} (cap {:.4}, concept {:.4}) token acc {:.4}",
            entry.total_loss,
            entry.cap_loss,
            entry.concept_loss,
            entry.token_acc
        );
        let acc = entry.token_acc;
        log.epochs.push(entry);
        if let Some(target) = cfg.stop {
            if acc >= target.token_accuracy
                && exact_match(model, data, cfg.threads)? >= target.exact_match
            {
                log.stopped_early = epoch < cfg.epochs;
                break;
            }
        }
    }
    model.store.zero_grad();
    Ok(log)
}
