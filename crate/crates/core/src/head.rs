//! Embedding projection (full or rank-factorized) and the additive-margin
//! softmax objective.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::activation::log_sum_exp;
use crate::layers::{uniform_init, Linear};
use crate::param::{join, Module, Param, ParamKind};
use crate::real::Real;

pub const AM_SCALE: f64 = 30.0;
pub const AM_MARGIN: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HeadKind {
    Full,
    LowRank(usize),
}

impl HeadKind {
    /// Weight count of the projection, excluding the bias.
    pub fn weight_count(self, m: usize, n: usize) -> usize {
        match self {
            HeadKind::Full => n * m,
            HeadKind::LowRank(p) => n * p + p * m,
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HeadKind::Full => f.write_str("full"),
            HeadKind::LowRank(p) => write!(f, "low_rank:{p}"),
        }
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    /// Accepts `full`, `low_rank:<p>` and `low_rank(<p>)`.
    fn from_str(s: &str) -> Result<Self> {
        if s == "full" || s == "full_fc" {
            return Ok(HeadKind::Full);
        }
        let rank = s
            .strip_prefix("low_rank")
            .map(|r| r.trim_start_matches([':', '(']).trim_end_matches(')'))
            .ok_or_else(|| Error::config(format!("unknown head '{s}' (expected full or low_rank:<p>)")))?;
        rank.parse()
            .map(HeadKind::LowRank)
            .map_err(|_| Error::config(format!("low-rank constant '{rank}' is not a positive integer")))
    }
}

pub fn validate_rank(p: usize, m: usize, n: usize) -> Result<()> {
    if p <= 1 || p >= m.min(n) {
        return Err(Error::config(format!("low-rank constant {p} must satisfy 1 < p < min({m}, {n})")));
    }
    Ok(())
}

/// Maps a pooled vector to the embedding; no activation follows.
#[derive(Debug, Clone)]
pub enum EmbeddingHead<T> {
    Full(Linear<T>),
    /// `y = W2 (W3 e) + b`, with `W3: p x m` bias-free and `W2: n x p` carrying `b`.
    LowRank { w3: Linear<T>, w2: Linear<T> },
}

pub struct HeadCache<T> {
    mid: Option<Vec<T>>,
}

impl<T: Real> EmbeddingHead<T> {
    pub fn new(kind: HeadKind, m: usize, n: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(match kind {
            HeadKind::Full => EmbeddingHead::Full(Linear::new(m, n, true, ParamKind::Linear, rng)),
            HeadKind::LowRank(p) => {
                validate_rank(p, m, n)?;
                EmbeddingHead::LowRank {
                    w3: Linear::new(m, p, false, ParamKind::Linear, rng),
                    w2: Linear::new(p, n, true, ParamKind::Linear, rng),
                }
            }
        })
    }

    pub fn kind(&self) -> HeadKind {
        match self {
            EmbeddingHead::Full(_) => HeadKind::Full,
            EmbeddingHead::LowRank { w3, .. } => HeadKind::LowRank(w3.out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        match self {
            EmbeddingHead::Full(l) => l.in_dim,
            EmbeddingHead::LowRank { w3, .. } => w3.in_dim,
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            EmbeddingHead::Full(l) => l.out_dim,
            EmbeddingHead::LowRank { w2, .. } => w2.out_dim,
        }
    }

    /// Embeds `rows` stacked pooled vectors.
    pub fn forward(&self, xs: &[T], rows: usize) -> Result<Vec<T>> {
        match self {
            EmbeddingHead::Full(l) => l.forward(xs, rows),
            EmbeddingHead::LowRank { w3, w2 } => w2.forward(&w3.forward(xs, rows)?, rows),
        }
    }

    pub fn forward_train(&self, xs: &[T], rows: usize) -> Result<(Vec<T>, HeadCache<T>)> {
        match self {
            EmbeddingHead::Full(l) => Ok((l.forward(xs, rows)?, HeadCache { mid: None })),
            EmbeddingHead::LowRank { w3, w2 } => {
                let mid = w3.forward(xs, rows)?;
                Ok((w2.forward(&mid, rows)?, HeadCache { mid: Some(mid) }))
            }
        }
    }

    pub fn backward(&mut self, xs: &[T], rows: usize, cache: HeadCache<T>, dys: &[T]) -> Result<Vec<T>> {
        match (self, cache.mid) {
            (EmbeddingHead::Full(l), None) => l.backward(xs, rows, dys),
            (EmbeddingHead::LowRank { w3, w2 }, Some(mid)) => {
                let dmid = w2.backward(&mid, rows, dys)?;
                w3.backward(xs, rows, &dmid)
            }
            _ => Err(Error::shape("head cache does not match head kind")),
        }
    }
}

impl<T: Real> Module<T> for EmbeddingHead<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        match self {
            EmbeddingHead::Full(l) => l.visit(prefix, f),
            EmbeddingHead::LowRank { w3, w2 } => {
                w3.visit(&join(prefix, "w3"), f);
                w2.visit(&join(prefix, "w2"), f);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        match self {
            EmbeddingHead::Full(l) => l.visit_mut(prefix, f),
            EmbeddingHead::LowRank { w3, w2 } => {
                w3.visit_mut(&join(prefix, "w3"), f);
                w2.visit_mut(&join(prefix, "w2"), f);
            }
        }
    }
}

/// Cosine classifier trained with an additive margin on the target class.
#[derive(Debug, Clone)]
pub struct AmSoftmax<T> {
    /// `classes x dim`, rows are class prototypes.
    pub weight: Param<T>,
    pub scale: f64,
    pub margin: f64,
}

fn unit(v: impl Iterator<Item = f64>, what: &str) -> Result<(Vec<f64>, f64)> {
    let v: Vec<f64> = v.collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::Degenerate(format!("{what} has zero or non-finite norm")));
    }
    Ok((v.iter().map(|x| x / norm).collect(), norm))
}

struct Normalized {
    f: Vec<Vec<f64>>,
    f_norm: Vec<f64>,
    w: Vec<Vec<f64>>,
    w_norm: Vec<f64>,
    cos: Vec<f64>,
}

impl<T: Real> AmSoftmax<T> {
    pub fn new(classes: usize, dim: usize, scale: f64, margin: f64, rng: &mut impl Rng) -> Result<Self> {
        if scale <= 0.0 || !(0.0..1.0).contains(&margin) {
            return Err(Error::config(format!("AM-Softmax needs s > 0 and 0 <= m < 1, got s={scale} m={margin}")));
        }
        if classes < 2 || dim == 0 {
            return Err(Error::config(format!("AM-Softmax needs at least 2 classes, got {classes}")));
        }
        let value = uniform_init(rng, classes * dim, dim);
        Ok(Self { weight: Param::new(ParamKind::Classifier, vec![classes, dim], value), scale, margin })
    }

    pub fn classes(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn dim(&self) -> usize {
        self.weight.shape[1]
    }

    fn normalize(&self, emb: &[T], labels: &[usize]) -> Result<Normalized> {
        let (k, d) = (self.classes(), self.dim());
        let rows = labels.len();
        if rows == 0 {
            return Err(Error::Empty("AM-Softmax batch"));
        }
        if emb.len() != rows * d {
            return Err(Error::shape(format!("{} embedding values for {rows} rows of {d}", emb.len())));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::config(format!("label {y} outside [0, {k})")));
        }
        let mut out = Normalized { f: vec![], f_norm: vec![], w: vec![], w_norm: vec![], cos: vec![] };
        for (j, row) in self.weight.value.chunks_exact(d).enumerate() {
            let (u, n) = unit(row.iter().map(|v| v.as_f64()), &format!("class weight {j}"))?;
            out.w.push(u);
            out.w_norm.push(n);
        }
        for (i, row) in emb.chunks_exact(d).enumerate() {
            let (u, n) = unit(row.iter().map(|v| v.as_f64()), &format!("embedding {i}"))?;
            out.cos.extend(out.w.iter().map(|w| w.iter().zip(&u).map(|(a, b)| a * b).sum::<f64>()));
            out.f.push(u);
            out.f_norm.push(n);
        }
        Ok(out)
    }

    fn logits(&self, cos: &[f64], y: usize) -> Vec<f64> {
        cos.iter()
            .enumerate()
            .map(|(j, &c)| self.scale * (c - if j == y { self.margin } else { 0.0 }))
            .collect()
    }

    /// Cosine similarity of each embedding to each class, `rows x classes`.
    pub fn cosines(&self, emb: &[T], rows: usize) -> Result<Vec<f64>> {
        Ok(self.normalize(emb, &vec![0; rows])?.cos)
    }

    /// Mean loss over the batch.
    pub fn loss(&self, emb: &[T], labels: &[usize]) -> Result<f64> {
        let nz = self.normalize(emb, labels)?;
        let k = self.classes();
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| {
                let z = self.logits(&nz.cos[i * k..(i + 1) * k], y);
                log_sum_exp(&z) - z[y]
            })
            .sum();
        Ok(total / labels.len() as f64)
    }

    /// Mean loss and its gradient with respect to the embeddings; the class
    /// weight gradient accumulates into `self.weight.grad`.
    pub fn loss_and_grad(&mut self, emb: &[T], labels: &[usize]) -> Result<(f64, Vec<T>)> {
        let nz = self.normalize(emb, labels)?;
        let (k, d) = (self.classes(), self.dim());
        let rows = labels.len() as f64;
        let mut total = 0.0;
        let mut dw_hat = vec![vec![0.0f64; d]; k];
        let mut demb = Vec::with_capacity(emb.len());
        for (i, &y) in labels.iter().enumerate() {
            let z = self.logits(&nz.cos[i * k..(i + 1) * k], y);
            let lse = log_sum_exp(&z);
            total += lse - z[y];
            let f = &nz.f[i];
            let mut df_hat = vec![0.0f64; d];
            for j in 0..k {
                let p = (z[j] - lse).exp();
                let dcos = self.scale * (p - if j == y { 1.0 } else { 0.0 }) / rows;
                for ((a, b), (wv, fv)) in df_hat.iter_mut().zip(dw_hat[j].iter_mut()).zip(nz.w[j].iter().zip(f)) {
                    *a += dcos * wv;
                    *b += dcos * fv;
                }
            }
            let proj: f64 = f.iter().zip(&df_hat).map(|(a, b)| a * b).sum();
            demb.extend(f.iter().zip(&df_hat).map(|(fv, g)| T::of((g - fv * proj) / nz.f_norm[i])));
        }
        for (j, g) in dw_hat.iter().enumerate() {
            let w = &nz.w[j];
            let proj: f64 = w.iter().zip(g).map(|(a, b)| a * b).sum();
            for ((wv, gv), acc) in w.iter().zip(g).zip(&mut self.weight.grad[j * d..(j + 1) * d]) {
                *acc = *acc + T::of((gv - wv * proj) / nz.w_norm[j]);
            }
        }
        Ok((total / rows, demb))
    }
}

impl<T: Real> Module<T> for AmSoftmax<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
    }
}
