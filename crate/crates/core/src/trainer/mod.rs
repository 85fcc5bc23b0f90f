//! Distillation training of the translator parameters on fixed, exported features.
//!
//! Adam with decoupled weight decay, warmup-cosine schedules for both learning
//! rate and weight decay, and an exponential moving average of the weights.

mod gradient;
mod schedule;

pub use gradient::{loss_gradient, loss_gradient_with_plan};
pub use schedule::{schedule, WarmupCosine};

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel::Workers;
use crate::rng::substream;
use crate::tensor_store::{FeaturePyramid, Grid};
use crate::translator::{
    distillation_loss, ChainPlan, ChannelDifferentialConfig, TranslatorParams, Variant,
};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    pub epochs: usize,
    pub warmup_iters: usize,
    pub lr_max: f64,
    pub wd_max: f64,
    pub ema_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Resampler switching band around a resize factor of 1.
    pub delta: f64,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Linear3x3,
            epochs: 50,
            warmup_iters: 1000,
            lr_max: 1e-3,
            wd_max: 1e-4,
            ema_decay: 0.999,
            batch_size: 16,
            seed: 0,
            delta: crate::translator::DEFAULT_DELTA,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_max > 0.0 && self.lr_max.is_finite()) {
            return Err(Error::Config(format!(
                "lr_max must be positive, got {}",
                self.lr_max
            )));
        }
        if !(self.wd_max >= 0.0 && self.wd_max.is_finite()) {
            return Err(Error::Config(format!(
                "wd_max must be non-negative, got {}",
                self.wd_max
            )));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!(
                "ema_decay {} outside [0, 1]",
                self.ema_decay
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch size must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.delta) {
            return Err(Error::Config(format!(
                "delta {} outside [0, 1)",
                self.delta
            )));
        }
        Ok(())
    }

    pub fn total_iters(&self, samples: usize) -> usize {
        self.epochs * samples.div_ceil(self.batch_size)
    }
}

/// One training pair: detector pyramid and the oracle features of the same image.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub pyramid: FeaturePyramid<f64>,
    pub oracle: Grid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iter: usize,
    pub lr: f64,
    pub wd: f64,
    /// Mean loss of the batch before the update.
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    /// Mean dataset loss of the final raw weights.
    pub final_loss: f64,
    /// Mean dataset loss of the final EMA weights.
    pub final_ema_loss: f64,
    pub raw: TranslatorParams,
    pub ema: TranslatorParams,
    pub trace: Vec<TraceEntry>,
}

impl TrainReport {
    /// Writes `raw.json`/`ema.json` parameter containers, `trace.csv` (per
    /// iteration) and `epochs.csv` (per epoch) into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        self.raw.save(dir, "raw")?;
        self.ema.save(dir, "ema")?;
        let mut trace = String::from("iter,lr,wd,loss\n");
        for t in &self.trace {
            let _ = writeln!(trace, "{},{:e},{:e},{:.9e}", t.iter, t.lr, t.wd, t.loss);
        }
        let p = dir.join("trace.csv");
        fs::write(&p, trace).map_err(|e| Error::io(&p, e))?;
        let mut epochs = String::from("epoch,mean_loss\n");
        for (i, l) in self.epoch_losses.iter().enumerate() {
            let _ = writeln!(epochs, "{},{:.9e}", i + 1, l);
        }
        let p = dir.join("epochs.csv");
        fs::write(&p, epochs).map_err(|e| Error::io(&p, e))
    }
}

/// Adam state over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    /// Decoupled decay `θ ← θ·(1 − lr·wd)` followed by the Adam update.
    pub fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64, wd: f64) {
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step);
        let decay = 1.0 - lr * wd;
        for (((p, g), m), v) in theta.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p *= decay;
            *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
}

/// `ema ← d·ema + (1 − d)·raw`.
pub fn ema_update(ema: &mut [f64], raw: &[f64], decay: f64) {
    for (e, r) in ema.iter_mut().zip(raw) {
        *e = decay * *e + (1.0 - decay) * r;
    }
}

fn check_dataset(dataset: &[TrainingSample]) -> Result<()> {
    let first = dataset
        .first()
        .ok_or_else(|| Error::Config("training dataset is empty".into()))?;
    let shapes = |s: &TrainingSample| {
        (
            s.pyramid
                .levels()
                .iter()
                .map(|l| l.shape())
                .collect::<Vec<_>>(),
            s.oracle.shape(),
        )
    };
    let reference = shapes(first);
    for (i, s) in dataset.iter().enumerate().skip(1) {
        if shapes(s) != reference {
            return Err(Error::Shape(format!(
                "sample {i} shapes differ from sample 0"
            )));
        }
    }
    Ok(())
}

/// Mean per-sample loss of `params` over the dataset.
pub fn dataset_loss(
    plan: &ChainPlan,
    params: &TranslatorParams,
    dataset: &[TrainingSample],
) -> Result<f64> {
    let mut sum = 0.0;
    for s in dataset {
        sum += distillation_loss(&plan.residuals(&s.pyramid, params)?, &s.oracle)?.total;
    }
    Ok(sum / dataset.len() as f64)
}

/// Trains from a seeded fan-in initialisation.
pub fn train(config: &TrainConfig, dataset: &[TrainingSample]) -> Result<TrainReport> {
    config.validate()?;
    check_dataset(dataset)?;
    let first = &dataset[0];
    let cd = ChannelDifferentialConfig {
        variant: config.variant,
        input_channels: first.pyramid.channel_depths(),
        output_channels: first.oracle.channels(),
    };
    let init = TranslatorParams::init(&cd, &mut substream(config.seed, "init"))?;
    train_from(config, dataset, init)
}

/// Trains starting from `init`.
pub fn train_from(
    config: &TrainConfig,
    dataset: &[TrainingSample],
    init: TranslatorParams,
) -> Result<TrainReport> {
    config.validate()?;
    check_dataset(dataset)?;
    let plan =
        ChainPlan::for_pyramid(&dataset[0].pyramid, dataset[0].oracle.shape(), config.delta)?;
    plan.check(&init, &dataset[0].pyramid.channel_depths())?;

    let n = dataset.len();
    let total = config.total_iters(n);
    let sched = WarmupCosine::new(config.warmup_iters, total)?;
    let workers = Workers::new(config.threads)?;
    let mut shuffle_rng = substream(config.seed, "shuffle");

    let mut template = init;
    let mut theta = template.flatten();
    let mut ema = theta.clone();
    let mut adam = Adam::new(theta.len());
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut trace = Vec::with_capacity(total);
    let mut iter = 0;

    for _ in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            template.set_flat(&theta)?;
            let params = &template;
            let results = workers.map(batch, |&i| {
                let s = &dataset[i];
                let (loss, grad) = loss_gradient_with_plan(&plan, params, &s.pyramid, &s.oracle)?;
                Ok((loss.total, grad.flatten()))
            })?;
            let mut grad = vec![0.0; theta.len()];
            let mut batch_loss = 0.0;
            for (loss, g) in &results {
                batch_loss += loss;
                for (a, b) in grad.iter_mut().zip(g) {
                    *a += b;
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::Divergence {
                    iteration: iter,
                    loss: batch_loss,
                });
            }
            let inv = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= inv);
            let f = sched.factor(iter)?;
            let (lr, wd) = (config.lr_max * f, config.wd_max * f);
            adam.step(&mut theta, &grad, lr, wd);
            ema_update(&mut ema, &theta, config.ema_decay);
            if theta.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence {
                    iteration: iter,
                    loss: f64::NAN,
                });
            }
            trace.push(TraceEntry {
                iter,
                lr,
                wd,
                loss: batch_loss * inv,
            });
            epoch_sum += batch_loss;
            iter += 1;
        }
        epoch_losses.push(epoch_sum / n as f64);
    }

    let raw = template.with_flat(&theta)?;
    let ema = template.with_flat(&ema)?;
    let final_loss = dataset_loss(&plan, &raw, dataset)?;
    let final_ema_loss = dataset_loss(&plan, &ema, dataset)?;
    Ok(TrainReport {
        epoch_losses,
        final_loss,
        final_ema_loss,
        raw,
        ema,
        trace,
    })
}
