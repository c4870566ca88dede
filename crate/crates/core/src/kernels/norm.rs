//! Batch normalization over all positions of all samples in a batch.

use crate::error::{Error, Result};
use crate::param::{join, Module, Param, ParamKind};
use crate::real::Real;
use crate::tensor::Tensor3;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Per-channel affine normalization with running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub eps: f64,
    pub momentum: f64,
}

/// Saved activations for the train-mode backward pass.
#[derive(Debug)]
pub struct BnCache<T> {
    xhat: Vec<Tensor3<T>>,
    inv_std: Vec<f64>,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::filled(ParamKind::Bn, vec![channels], T::one()),
            beta: Param::filled(ParamKind::Bn, vec![channels], T::zero()),
            running_mean: Param::filled(ParamKind::BnStat, vec![channels], T::zero()),
            running_var: Param::filled(ParamKind::BnStat, vec![channels], T::one()),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    fn check(&self, xs: &[Tensor3<T>]) -> Result<()> {
        if let Some(x) = xs.iter().find(|x| x.c() != self.channels()) {
            return Err(Error::shape(format!(
                "batch norm over {} channels got {}",
                self.channels(),
                x.c()
            )));
        }
        Ok(())
    }

    /// Normalizes with the running statistics.
    pub fn infer(&self, xs: &[Tensor3<T>]) -> Result<Vec<Tensor3<T>>> {
        self.check(xs)?;
        let c = self.channels();
        let (scale, shift): (Vec<T>, Vec<T>) = (0..c)
            .map(|k| {
                let inv = 1.0 / (self.running_var.value[k].as_f64() + self.eps).sqrt();
                let g = self.gamma.value[k].as_f64() * inv;
                (T::of(g), T::of(self.beta.value[k].as_f64() - g * self.running_mean.value[k].as_f64()))
            })
            .unzip();
        Ok(xs
            .iter()
            .map(|x| {
                let mut y = x.clone();
                for row in y.data_mut().chunks_exact_mut(c) {
                    for k in 0..c {
                        row[k] = row[k] * scale[k] + shift[k];
                    }
                }
                y
            })
            .collect())
    }

    /// Normalizes with batch statistics and updates the running estimates.
    pub fn forward_train(&mut self, xs: &[Tensor3<T>]) -> Result<(Vec<Tensor3<T>>, BnCache<T>)> {
        self.check(xs)?;
        let c = self.channels();
        let n: usize = xs.iter().map(Tensor3::positions).sum();
        if n == 0 {
            return Err(Error::Empty("batch norm input"));
        }
        let mut sum = vec![0.0f64; c];
        for x in xs {
            for row in x.data().chunks_exact(c) {
                for k in 0..c {
                    sum[k] += row[k].as_f64();
                }
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let mut sq = vec![0.0f64; c];
        for x in xs {
            for row in x.data().chunks_exact(c) {
                for k in 0..c {
                    let d = row[k].as_f64() - mean[k];
                    sq[k] += d * d;
                }
            }
        }
        let var: Vec<f64> = sq.iter().map(|s| s / n as f64).collect();
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();

        let unbias = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
        for k in 0..c {
            let rm = self.running_mean.value[k].as_f64();
            let rv = self.running_var.value[k].as_f64();
            self.running_mean.value[k] = T::of((1.0 - self.momentum) * rm + self.momentum * mean[k]);
            self.running_var.value[k] = T::of((1.0 - self.momentum) * rv + self.momentum * var[k] * unbias);
        }

        let mean_t: Vec<T> = mean.iter().map(|&m| T::of(m)).collect();
        let inv_t: Vec<T> = inv_std.iter().map(|&v| T::of(v)).collect();
        let gamma = &self.gamma.value;
        let beta = &self.beta.value;
        let mut xhat = Vec::with_capacity(xs.len());
        let mut ys = Vec::with_capacity(xs.len());
        for x in xs {
            let mut h = x.clone();
            let mut y = x.clone();
            for (hr, yr) in h.data_mut().chunks_exact_mut(c).zip(y.data_mut().chunks_exact_mut(c)) {
                for k in 0..c {
                    let v = (hr[k] - mean_t[k]) * inv_t[k];
                    hr[k] = v;
                    yr[k] = gamma[k] * v + beta[k];
                }
            }
            xhat.push(h);
            ys.push(y);
        }
        Ok((ys, BnCache { xhat, inv_std }))
    }

    pub fn forward(&mut self, xs: &[Tensor3<T>], mode: Mode) -> Result<(Vec<Tensor3<T>>, Option<BnCache<T>>)> {
        match mode {
            Mode::Train => self.forward_train(xs).map(|(y, c)| (y, Some(c))),
            Mode::Infer => self.infer(xs).map(|y| (y, None)),
        }
    }

    pub fn backward(&mut self, cache: &BnCache<T>, dys: &[Tensor3<T>]) -> Result<Vec<Tensor3<T>>> {
        let c = self.channels();
        if dys.len() != cache.xhat.len() || dys.iter().zip(&cache.xhat).any(|(a, b)| !a.same_shape(b)) {
            return Err(Error::shape("batch norm gradient does not match cached activations"));
        }
        let n: usize = dys.iter().map(Tensor3::positions).sum();
        let mut dbeta = vec![0.0f64; c];
        let mut dgamma = vec![0.0f64; c];
        for (dy, xh) in dys.iter().zip(&cache.xhat) {
            for (dr, hr) in dy.data().chunks_exact(c).zip(xh.data().chunks_exact(c)) {
                for k in 0..c {
                    let d = dr[k].as_f64();
                    dbeta[k] += d;
                    dgamma[k] += d * hr[k].as_f64();
                }
            }
        }
        for k in 0..c {
            self.beta.grad[k] = T::of(self.beta.grad[k].as_f64() + dbeta[k]);
            self.gamma.grad[k] = T::of(self.gamma.grad[k].as_f64() + dgamma[k]);
        }
        let nf = n as f64;
        let coef: Vec<f64> = (0..c).map(|k| self.gamma.value[k].as_f64() * cache.inv_std[k] / nf).collect();
        let a: Vec<T> = (0..c).map(|k| T::of(coef[k] * nf)).collect();
        let b: Vec<T> = (0..c).map(|k| T::of(coef[k] * dbeta[k])).collect();
        let g: Vec<T> = (0..c).map(|k| T::of(coef[k] * dgamma[k])).collect();
        Ok(dys
            .iter()
            .zip(&cache.xhat)
            .map(|(dy, xh)| {
                let mut dx = dy.clone();
                for (dr, hr) in dx.data_mut().chunks_exact_mut(c).zip(xh.data().chunks_exact(c)) {
                    for k in 0..c {
                        dr[k] = a[k] * dr[k] - b[k] - g[k] * hr[k];
                    }
                }
                dx
            })
            .collect())
    }
}

impl<T: Real> Module<T> for BatchNorm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}
