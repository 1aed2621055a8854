//! Mini-batch SGD over per-video graphs.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Scope};
use crate::data::VideoSample;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip, off when `None`.
    pub grad_clip: Option<f64>,
    /// Seeds batch shuffling.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 128,
            learning_rate: 0.005,
            momentum: 0.0,
            weight_decay: 0.0,
            grad_clip: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight decay must be ≥ 0"));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::config("gradient clip must be positive"));
        }
        Ok(())
    }
}

/// Mean losses over one epoch's videos.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mil: f64,
    pub tcc: f64,
    pub total: f64,
}

pub const LOSS_CSV_HEADER: &str = "epoch,mil,tcc,total";

pub fn write_loss_csv<W: Write>(mut w: W, log: &[EpochLog]) -> std::io::Result<()> {
    writeln!(w, "{LOSS_CSV_HEADER}")?;
    for e in log {
        writeln!(w, "{},{},{},{}", e.epoch, e.mil, e.tcc, e.total)?;
    }
    Ok(())
}

/// Losses and summed parameter gradients of a set of videos.
pub struct BatchGrad<S> {
    /// Indexed like the model's parameters.
    pub grads: Vec<Tensor<S>>,
    pub mil: f64,
    pub tcc: f64,
    pub total: f64,
}

/// Forward and backward on each video in its own graph, summing gradients in order.
pub fn batch_gradients<S: Scalar>(model: &Model<S>, videos: &[&VideoSample]) -> Result<BatchGrad<S>> {
    let mut grads: Vec<Tensor<S>> = model
        .params
        .iter()
        .map(|(_, _, t)| Tensor::zeros(t.shape().to_vec()))
        .collect();
    let (mut mil, mut tcc, mut total) = (0.0, 0.0, 0.0);
    for v in videos {
        let g = Graph::new();
        let scope = Scope::new(&g, &model.params);
        let fwd = model.forward_video(&scope, v)?;
        let loss = model.video_loss(&fwd, v.label)?;
        g.backward(loss.total)?;
        for (id, grad) in g.param_grads() {
            grads[id.index()].add_assign(&grad);
        }
        mil += loss.mil.value().item().to_f64_lossy();
        tcc += loss.tcc.value().item().to_f64_lossy();
        total += loss.total.value().item().to_f64_lossy();
    }
    Ok(BatchGrad { grads, mil, tcc, total })
}

/// Optimizer state carried across steps.
#[derive(Clone, Debug)]
pub struct Sgd<S> {
    pub config: TrainConfig,
    velocity: Vec<Tensor<S>>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(config: TrainConfig, model: &Model<S>) -> Result<Self> {
        config.validate()?;
        let velocity = model
            .params
            .iter()
            .map(|(_, _, t)| Tensor::zeros(t.shape().to_vec()))
            .collect();
        Ok(Self { config, velocity })
    }

    /// One update from gradients summed over `count` videos.
    pub fn step(&mut self, model: &mut Model<S>, mut grads: Vec<Tensor<S>>, count: usize) -> Result<()> {
        let inv = S::one() / S::from_usize_lossy(count.max(1));
        for g in &mut grads {
            g.data_mut().iter_mut().for_each(|v| *v *= inv);
        }
        if let Some(clip) = self.config.grad_clip {
            let norm = grads
                .iter()
                .flat_map(|g| g.data().iter())
                .map(|&v| v * v)
                .sum::<S>()
                .sqrt();
            let clip = S::lit(clip);
            if norm > clip {
                let f = clip / norm;
                grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= f));
            }
        }
        let lr = S::lit(self.config.learning_rate);
        let mu = S::lit(self.config.momentum);
        let wd = S::lit(self.config.weight_decay);
        let ids: Vec<_> = model.params.ids().collect();
        for ((id, g), vel) in ids.into_iter().zip(grads.iter_mut()).zip(self.velocity.iter_mut()) {
            let p = model.params.get_mut(id);
            if wd > S::zero() {
                g.axpy(wd, p);
            }
            if mu > S::zero() {
                vel.data_mut().iter_mut().for_each(|v| *v *= mu);
                vel.add_assign(g);
                p.axpy(-lr, vel);
            } else {
                p.axpy(-lr, g);
            }
            if !p.all_finite() {
                return Err(Error::Domain(format!(
                    "parameter `{}` became non-finite",
                    model.params.name(id)
                )));
            }
        }
        Ok(())
    }
}

/// Trains `model` in place and returns per-epoch mean losses.
///
/// `on_epoch` sees each log entry as it is produced.
pub fn train_with<S: Scalar>(
    model: &mut Model<S>,
    data: &[VideoSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    if data.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    let positives = data.iter().filter(|v| v.label).count();
    if positives == 0 || positives == data.len() {
        log::warn!("training set has a single class ({positives} of {} anomalous)", data.len());
    }
    let mut opt = Sgd::new(cfg.clone(), model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let (mut mil, mut tcc, mut total) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&VideoSample> = chunk.iter().map(|&i| &data[i]).collect();
            let bg = batch_gradients(model, &batch)?;
            mil += bg.mil;
            tcc += bg.tcc;
            total += bg.total;
            opt.step(model, bg.grads, batch.len())?;
        }
        let n = data.len() as f64;
        let entry = EpochLog {
            epoch,
            mil: mil / n,
            tcc: tcc / n,
            total: total / n,
        };
        log::info!(
            "epoch {epoch}: mil {:.5} tcc {:.5} total {:.5} ({:.1}s)",
            entry.mil,
            entry.tcc,
            entry.total,
            started.elapsed().as_secs_f64()
        );
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(log)
}

pub fn train<S: Scalar>(model: &mut Model<S>, data: &[VideoSample], cfg: &TrainConfig) -> Result<Vec<EpochLog>> {
    train_with(model, data, cfg, |_| {})
}
