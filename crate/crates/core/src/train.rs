//! SGD training on the summed multi-level loss, with validation after every
//! epoch and a checkpoint of the best validation mIoU.

use std::collections::HashMap;
use std::fmt;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::data::{augment, collate, SampleRecord};
use crate::error::{Error, Result};
use crate::loss::total_loss;
use crate::metrics::{ConfusionMatrix, EvalReport};
use crate::network::MipaNet;
use crate::nn::{Module, ParamKind};
use crate::tensor::Tensor;

/// Momentum SGD with L2 weight decay folded into the gradient:
/// `v = mu * v + (g + wd * p)`, `p = p - lr * v`.
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: HashMap<String, Vec<f32>>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32, weight_decay: f32) -> Self {
        Sgd { lr, momentum, weight_decay, velocity: HashMap::new() }
    }

    /// Updates every trainable tensor that received a gradient, replacing
    /// it with a fresh leaf.
    pub fn step<M: Module<f32>>(&mut self, model: &mut M) {
        let (lr, mu, wd) = (self.lr, self.momentum, self.weight_decay);
        let velocity = &mut self.velocity;
        model.visit("", &mut |name, kind, t| {
            if kind != ParamKind::Trainable {
                return;
            }
            let Some(g) = t.grad() else { return };
            let v = velocity.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
            let mut p = t.to_vec();
            for ((p, v), g) in p.iter_mut().zip(v.iter_mut()).zip(&g) {
                *v = mu * *v + g + wd * *p;
                *p -= lr * *v;
            }
            *t = Tensor::parameter(p, t.shape()).expect("same shape");
        });
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub seed: u64,
    pub augment: bool,
    /// Directory receiving the best checkpoint, if any.
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 60,
            batch_size: 4,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            augment: true,
            checkpoint: None,
        }
    }
}

impl TrainOptions {
    /// Applies one `key = value` setting; returns `false` for keys that are
    /// not training options.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let bad = || Error::Config(format!("invalid value {value:?} for {key}"));
        match key {
            "epochs" => self.epochs = value.parse().map_err(|_| bad())?,
            "batch_size" => self.batch_size = value.parse().map_err(|_| bad())?,
            "lr" => self.lr = value.parse().map_err(|_| bad())?,
            "momentum" => self.momentum = value.parse().map_err(|_| bad())?,
            "weight_decay" => self.weight_decay = value.parse().map_err(|_| bad())?,
            "augment" => self.augment = value.parse().map_err(|_| bad())?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("invalid training options {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val: EvalReport,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} loss={:.6} val_miou={:.6} val_pixel_acc={:.6}",
            self.epoch, self.mean_loss, self.val.miou, self.val.pixel_acc
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub epochs: Vec<EpochLog>,
    /// Epoch (1-based) of the best validation mIoU.
    pub best_epoch: usize,
    pub best: EvalReport,
}

/// Confusion statistics of the evaluation-mode prediction over `samples`.
pub fn evaluate(net: &MipaNet<f32>, samples: &[SampleRecord], batch_size: usize) -> Result<EvalReport> {
    let mut cm = ConfusionMatrix::new(net.cfg.num_classes);
    let refs: Vec<&SampleRecord> = samples.iter().collect();
    for chunk in refs.chunks(batch_size.max(1)) {
        let (rgb, depth, labels) = collate(chunk)?;
        for (p, t) in net.predict(&rgb, &depth)?.iter().zip(&labels) {
            cm.accumulate(p, t)?;
        }
    }
    cm.report()
}

/// Loss of one training-mode forward pass over `samples`, without updates.
pub fn batch_loss(net: &MipaNet<f32>, samples: &[&SampleRecord]) -> Result<f64> {
    let (rgb, depth, labels) = collate(samples)?;
    let out = net.forward(&rgb, &depth, true)?;
    Ok(total_loss(&out, &labels)?.item()? as f64)
}

/// Runs the whole schedule. `on_epoch` sees every log line as it is
/// produced. Deterministic for a fixed seed.
pub fn train(
    net: &mut MipaNet<f32>,
    train_set: &[SampleRecord],
    val_set: &[SampleRecord],
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainSummary> {
    opts.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::InvalidArgument("training and validation sets must be non-empty".into()));
    }
    let k = net.cfg.num_classes;
    for s in train_set.iter().chain(val_set) {
        s.labels.check_classes(k)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut sgd = Sgd::new(opts.lr, opts.momentum, opts.weight_decay);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut logs = Vec::with_capacity(opts.epochs);
    let mut best: Option<(usize, EvalReport)> = None;

    for epoch in 1..=opts.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut batches) = (0.0f64, 0usize);
        for idx in order.chunks(opts.batch_size) {
            let batch: Vec<SampleRecord> = idx
                .iter()
                .map(|&i| if opts.augment { augment(&train_set[i], &mut rng) } else { train_set[i].clone() })
                .collect();
            let refs: Vec<&SampleRecord> = batch.iter().collect();
            let (rgb, depth, labels) = collate(&refs)?;
            let out = net.forward(&rgb, &depth, true)?;
            let loss = total_loss(&out, &labels);
            let loss = match loss {
                Ok(l) => l,
                // a batch whose pixels were all padded away carries no signal
                Err(Error::Label(_)) => continue,
                Err(e) => return Err(e),
            };
            let value = loss.item()?;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("training loss {value} at epoch {epoch}, batch {}", batches + 1)));
            }
            loss.backward()?;
            sgd.step(net);
            sum += value as f64;
            batches += 1;
        }
        let val = evaluate(net, val_set, opts.batch_size)?;
        let log = EpochLog { epoch, mean_loss: sum / batches.max(1) as f64, val };
        on_epoch(&log);
        if best.as_ref().is_none_or(|(_, b)| log.val.miou > b.miou) {
            if let Some(dir) = &opts.checkpoint {
                checkpoint::save(dir, net, Some(&log.val))?;
            }
            best = Some((epoch, log.val.clone()));
        }
        logs.push(log);
    }
    let (best_epoch, best) = match best {
        Some(b) => b,
        None => {
            // zero epochs: record the untrained model
            let val = evaluate(net, val_set, opts.batch_size)?;
            if let Some(dir) = &opts.checkpoint {
                checkpoint::save(dir, net, Some(&val))?;
            }
            (0, val)
        }
    };
    Ok(TrainSummary { epochs: logs, best_epoch, best })
}
