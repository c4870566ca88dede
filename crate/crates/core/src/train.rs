//! Supervised training on fixed-length crops with SGD, momentum and a
//! plateau-driven learning-rate schedule.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::Network;
use crate::checkpoint::{load_into, network_from_container, network_to_container, Container};
use crate::error::{Error, Result};
use crate::frontend::{crop_segment, FeatureMatrix};
use crate::param::Module;
use crate::real::Real;
use crate::tensor::Tensor3;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub momentum: f64,
    pub lr_init: f64,
    pub lr_decay_factor: f64,
    pub lr_floor: f64,
    pub plateau_patience: usize,
    pub max_epochs: usize,
    pub val_fraction: f64,
    pub crop_frames: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            momentum: 0.9,
            lr_init: 0.01,
            lr_decay_factor: 10.0,
            lr_floor: 1e-6,
            plateau_patience: 3,
            max_epochs: 30,
            val_fraction: 0.1,
            crop_frames: 200,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 10] = [
        "batch_size",
        "momentum",
        "lr_init",
        "lr_decay_factor",
        "lr_floor",
        "plateau_patience",
        "max_epochs",
        "val_fraction",
        "crop_frames",
        "seed",
    ];

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::config("batch_size must be at least 2"));
        }
        if !(self.lr_init > self.lr_floor && self.lr_floor > 0.0) {
            return Err(Error::config("lr_init must exceed lr_floor > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.lr_decay_factor <= 1.0 {
            return Err(Error::config("momentum must lie in [0, 1) and lr_decay_factor must exceed 1"));
        }
        if !(0.0..0.5).contains(&self.val_fraction) || self.crop_frames == 0 || self.max_epochs == 0 {
            return Err(Error::config("val_fraction must lie in [0, 0.5); crop_frames and max_epochs must be positive"));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let num = || v.parse::<f64>().map_err(|_| Error::config(format!("{key}: '{v}' is not a number")));
        let int = || v.parse::<usize>().map_err(|_| Error::config(format!("{key}: '{v}' is not an integer")));
        match key {
            "batch_size" => self.batch_size = int()?,
            "momentum" => self.momentum = num()?,
            "lr_init" => self.lr_init = num()?,
            "lr_decay_factor" => self.lr_decay_factor = num()?,
            "lr_floor" => self.lr_floor = num()?,
            "plateau_patience" => self.plateau_patience = int()?,
            "max_epochs" => self.max_epochs = int()?,
            "val_fraction" => self.val_fraction = num()?,
            "crop_frames" => self.crop_frames = int()?,
            "seed" => self.seed = v.parse().map_err(|_| Error::config(format!("seed: '{v}' is not an integer")))?,
            _ => return Err(Error::config(format!("unknown train key '{key}'"))),
        }
        Ok(())
    }
}

/// Divides the rate by `factor` once `patience` consecutive observations
/// fail to improve on the best loss so far.
#[derive(Debug, Clone, PartialEq)]
pub struct Plateau {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub best: f64,
    pub bad: usize,
}

impl Plateau {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        Self { lr, factor, patience, best: f64::INFINITY, bad: 0 }
    }

    /// Records one loss and returns the rate for the next epoch.
    pub fn step(&mut self, loss: f64) -> f64 {
        if loss < self.best {
            self.best = loss;
            self.bad = 0;
        } else {
            self.bad += 1;
            if self.bad >= self.patience {
                self.lr /= self.factor;
                self.bad = 0;
            }
        }
        self.lr
    }
}

/// Heavy-ball SGD: `v <- mu v - lr g`, `w <- w + v`.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    pub momentum: f64,
    /// One buffer per trainable parameter, in visiting order. Values are kept
    /// at the parameter precision so checkpoints restore them exactly.
    pub velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Self { momentum, velocity: Vec::new() }
    }

    pub fn step<T: Real>(&mut self, m: &mut impl Module<T>, lr: f64) {
        let mut i = 0;
        let mu = self.momentum;
        let vel = &mut self.velocity;
        m.visit_mut("", &mut |_, p| {
            if !p.kind.trainable() {
                return;
            }
            if vel.len() == i {
                vel.push(vec![0.0; p.numel()]);
            }
            for ((w, g), v) in p.value.iter_mut().zip(&p.grad).zip(vel[i].iter_mut()) {
                *v = T::of(mu * *v - lr * g.as_f64()).as_f64();
                *w = T::of(w.as_f64() + *v);
            }
            i += 1;
        });
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub label: usize,
    pub features: FeatureMatrix,
}

/// Per-speaker split: each speaker contributes `round(fraction * n)` of its
/// utterances (at least one when it has two or more) to validation.
pub fn split_validation(labels: &[usize], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.shuffle(&mut rng);
        let k = if fraction > 0.0 && idx.len() >= 2 { ((fraction * idx.len() as f64).round() as usize).max(1) } else { 0 };
        val.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Number of completed epochs.
    pub epoch: usize,
    pub plateau: Plateau,
    pub loss_history: Vec<f64>,
    pub val_history: Vec<f64>,
    /// Rate used during each completed epoch.
    pub lr_history: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub next_lr: f64,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub net: Network<f32>,
    pub sgd: Sgd,
    pub state: TrainState,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

fn crops(data: &[Example], idx: &[usize], len: usize, rng: &mut ChaCha8Rng) -> Result<(Vec<Tensor3<f32>>, Vec<usize>)> {
    let mut xs = Vec::with_capacity(idx.len());
    let mut ys = Vec::with_capacity(idx.len());
    for &i in idx {
        xs.push(crop_segment(&data[i].features, len, rng)?.to_tensor());
        ys.push(data[i].label);
    }
    Ok((xs, ys))
}

impl Trainer {
    pub fn new(net: Network<f32>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let plateau = Plateau::new(cfg.lr_init, cfg.lr_decay_factor, cfg.plateau_patience);
        let state = TrainState { epoch: 0, plateau, loss_history: vec![], val_history: vec![], lr_history: vec![] };
        Ok(Self { sgd: Sgd::new(cfg.momentum), cfg, net, state })
    }

    pub fn finished(&self) -> bool {
        self.state.epoch >= self.cfg.max_epochs || self.state.plateau.lr < self.cfg.lr_floor
    }

    fn split(&self, data: &[Example]) -> (Vec<usize>, Vec<usize>) {
        let labels: Vec<usize> = data.iter().map(|e| e.label).collect();
        split_validation(&labels, self.cfg.val_fraction, self.cfg.seed)
    }

    fn check_labels(&self, data: &[Example]) -> Result<()> {
        let k = self.net.classifier.classes();
        match data.iter().find(|e| e.label >= k) {
            Some(e) => Err(Error::config(format!("utterance {} has label {} but the model has {k} classes", e.id, e.label))),
            None if data.is_empty() => Err(Error::Empty("training set")),
            None => Ok(()),
        }
    }

    /// Mean loss over fixed validation crops, in inference mode.
    pub fn validation_loss(&self, data: &[Example], val: &[usize]) -> Result<f64> {
        let mut rng = epoch_rng(self.cfg.seed, usize::MAX);
        let mut total = 0.0;
        for chunk in val.chunks(self.cfg.batch_size) {
            let (xs, ys) = crops(data, chunk, self.cfg.crop_frames, &mut rng)?;
            total += self.net.eval_loss(&xs, &ys)? * chunk.len() as f64;
        }
        Ok(total / val.len() as f64)
    }

    pub fn run_epoch(&mut self, data: &[Example]) -> Result<EpochStats> {
        self.check_labels(data)?;
        let (mut train, val) = self.split(data);
        if train.len() < 2 {
            return Err(Error::config("fewer than 2 training utterances after the validation split"));
        }
        let epoch = self.state.epoch;
        let lr = self.state.plateau.lr;
        let mut rng = epoch_rng(self.cfg.seed, epoch);
        train.shuffle(&mut rng);
        let mut total = 0.0;
        let mut seen = 0usize;
        for chunk in train.chunks(self.cfg.batch_size).filter(|c| c.len() >= 2) {
            let (xs, ys) = crops(data, chunk, self.cfg.crop_frames, &mut rng)?;
            self.net.zero_grad();
            let loss = self.net.train_step(&xs, &ys)?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("epoch {}: loss became {loss}", epoch + 1)));
            }
            self.sgd.step(&mut self.net, lr);
            total += loss * chunk.len() as f64;
            seen += chunk.len();
        }
        let train_loss = total / seen as f64;
        let val_loss = if val.is_empty() { train_loss } else { self.validation_loss(data, &val)? };
        if !val_loss.is_finite() {
            return Err(Error::Numerical(format!("epoch {}: validation loss became {val_loss}", epoch + 1)));
        }
        let next_lr = self.state.plateau.step(val_loss);
        self.state.epoch += 1;
        self.state.loss_history.push(train_loss);
        self.state.val_history.push(val_loss);
        self.state.lr_history.push(lr);
        Ok(EpochStats { epoch: epoch + 1, lr, train_loss, val_loss, next_lr })
    }

    /// Trains until the schedule stops, writing `epoch-NNN.ckpt` into
    /// `checkpoint_dir` after every epoch when given.
    pub fn run(
        &mut self,
        data: &[Example],
        checkpoint_dir: Option<&Path>,
        mut on_epoch: impl FnMut(&EpochStats),
    ) -> Result<Vec<PathBuf>> {
        let mut written = Vec::new();
        while !self.finished() {
            let stats = self.run_epoch(data)?;
            on_epoch(&stats);
            if let Some(dir) = checkpoint_dir {
                std::fs::create_dir_all(dir)?;
                let p = dir.join(format!("epoch-{:03}.ckpt", stats.epoch));
                self.to_container().save(&p)?;
                written.push(p);
            }
        }
        Ok(written)
    }

    pub fn to_container(&self) -> Container {
        let mut c = network_to_container(&self.net);
        let s = &self.state;
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
        for (k, v) in [
            ("train.batch_size", self.cfg.batch_size.to_string()),
            ("train.momentum", format!("{:?}", self.cfg.momentum)),
            ("train.lr_init", format!("{:?}", self.cfg.lr_init)),
            ("train.lr_decay_factor", format!("{:?}", self.cfg.lr_decay_factor)),
            ("train.lr_floor", format!("{:?}", self.cfg.lr_floor)),
            ("train.plateau_patience", self.cfg.plateau_patience.to_string()),
            ("train.max_epochs", self.cfg.max_epochs.to_string()),
            ("train.val_fraction", format!("{:?}", self.cfg.val_fraction)),
            ("train.crop_frames", self.cfg.crop_frames.to_string()),
            ("train.seed", self.cfg.seed.to_string()),
            ("state.epoch", s.epoch.to_string()),
            ("state.lr", format!("{:?}", s.plateau.lr)),
            ("state.best", format!("{:?}", s.plateau.best)),
            ("state.bad", s.plateau.bad.to_string()),
            ("state.loss_history", join(&s.loss_history)),
            ("state.val_history", join(&s.val_history)),
            ("state.lr_history", join(&s.lr_history)),
        ] {
            c.set_meta(k, v);
        }
        let mut i = 0;
        self.net.visit("", &mut |path, p| {
            if p.kind.trainable() {
                if let Some(v) = self.sgd.velocity.get(i) {
                    c.push(format!("velocity.{path}"), p.shape.clone(), v.iter().map(|&x| x as f32).collect());
                }
                i += 1;
            }
        });
        c
    }

    /// Restores network, optimizer and schedule from a checkpoint.
    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("checkpoint")?;
        let net = network_from_container(c)?;
        let mut cfg = TrainConfig::default();
        for k in TrainConfig::KEYS {
            cfg.set(k, c.meta(&format!("train.{k}"))?)?;
        }
        let mut t = Self::new(net, cfg)?;
        let num = |k: &str| -> Result<f64> {
            c.meta(k)?.parse().map_err(|_| Error::format(format!("metadata '{k}' is not a number")))
        };
        let list = |k: &str| -> Result<Vec<f64>> {
            let v = c.meta(k)?;
            if v.is_empty() {
                return Ok(vec![]);
            }
            v.split(',').map(|x| x.parse().map_err(|_| Error::format(format!("bad value in '{k}'")))).collect()
        };
        t.state.epoch = num("state.epoch")? as usize;
        t.state.plateau.lr = num("state.lr")?;
        t.state.plateau.best = num("state.best")?;
        t.state.plateau.bad = num("state.bad")? as usize;
        t.state.loss_history = list("state.loss_history")?;
        t.state.val_history = list("state.val_history")?;
        t.state.lr_history = list("state.lr_history")?;
        let mut velocity = Vec::new();
        let mut missing = None;
        t.net.visit("", &mut |path, p| {
            if p.kind.trainable() {
                match c.record(&format!("velocity.{path}")) {
                    Some(r) if r.data.len() == p.numel() => velocity.push(r.data.iter().map(|&x| x as f64).collect()),
                    _ => missing = Some(path.to_string()),
                }
            }
        });
        if t.state.epoch > 0 {
            if let Some(p) = missing {
                return Err(Error::format(format!("checkpoint lacks optimizer state for '{p}'")));
            }
            t.sgd.velocity = velocity;
        }
        Ok(t)
    }

    pub fn load_weights(&mut self, c: &Container) -> Result<()> {
        load_into(&mut self.net, c)
    }
}
