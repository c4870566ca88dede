//! Time-axis aggregation of stage outputs into fixed-length utterance vectors.
//!
//! A stage output `T x F x C` is viewed as a `T x (F*C)` matrix whose columns
//! run frequency-major (frequency outer, channel inner). Because `Tensor3`
//! stores channel fastest, that view is the tensor's own buffer.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kernels::pool::{global_avg_pool, global_avg_pool_backward};
use crate::real::Real;
use crate::tensor::Tensor3;

/// Variances at or below this are treated as zero spread.
pub const VAR_FLOOR: f64 = 1e-10;

fn clamped_std(var: f64) -> f64 {
    if var > VAR_FLOOR {
        var.sqrt()
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PoolKind {
    /// Statistics of every stage, concatenated in stage order.
    Mtsp,
    /// Statistics of the last stage only.
    Sp,
    /// Channel means of the last stage.
    Gap,
}

impl PoolKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PoolKind::Mtsp => "mtsp",
            PoolKind::Sp => "sp",
            PoolKind::Gap => "gap",
        }
    }

    /// Pooled length for stage shapes `(freq, channels)`.
    pub fn output_dim(self, stages: &[(usize, usize)]) -> usize {
        let stat = |&(f, c): &(usize, usize)| 2 * f * c;
        match self {
            PoolKind::Mtsp => stages.iter().map(stat).sum(),
            PoolKind::Sp => stages.last().map_or(0, stat),
            PoolKind::Gap => stages.last().map_or(0, |s| s.1),
        }
    }
}

impl fmt::Display for PoolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PoolKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mtsp" => Ok(PoolKind::Mtsp),
            "sp" => Ok(PoolKind::Sp),
            "gap" => Ok(PoolKind::Gap),
            _ => Err(Error::config(format!("unknown pooling '{s}' (expected mtsp, sp or gap)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Mean,
    Std,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    /// Zero-based stage index.
    pub stage: usize,
    pub component: Component,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PooledVector<T> {
    pub data: Vec<T>,
    pub layout: Vec<Segment>,
}

impl<T: Real> PooledVector<T> {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Entries belonging to one segment of the layout.
    pub fn segment(&self, index: usize) -> &[T] {
        let start: usize = self.layout[..index].iter().map(|s| s.len).sum();
        &self.data[start..start + self.layout[index].len]
    }
}

/// Row-major `T x (F*C)` view of a stage output.
pub fn flatten_time<T: Real>(x: &Tensor3<T>) -> (Vec<T>, usize, usize) {
    (x.data().to_vec(), x.t(), x.f() * x.c())
}

pub fn unflatten_time<T: Real>(m: Vec<T>, f: usize, c: usize) -> Result<Tensor3<T>> {
    let n = f * c;
    if n == 0 || !m.len().is_multiple_of(n) {
        return Err(Error::shape(format!("{} values do not form rows of {f}x{c}", m.len())));
    }
    Tensor3::from_vec(m.len() / n, f, c, m)
}

/// Column means followed by column population standard deviations.
///
/// Columns whose variance does not exceed `VAR_FLOOR` report a deviation of
/// zero and pass no gradient through it.
pub fn stats_pool<T: Real>(x: &[T], t: usize, n: usize) -> Result<Vec<T>> {
    if t == 0 || n == 0 {
        return Err(Error::Empty("statistics pooling input"));
    }
    if x.len() != t * n {
        return Err(Error::shape(format!("{} values for a {t}x{n} matrix", x.len())));
    }
    let (mean, var) = moments(x, n);
    let mut out: Vec<T> = mean.iter().map(|&m| T::of(m)).collect();
    out.extend(var.iter().map(|&v| T::of(clamped_std(v))));
    Ok(out)
}

fn moments<T: Real>(x: &[T], n: usize) -> (Vec<f64>, Vec<f64>) {
    let t = (x.len() / n) as f64;
    let mut mean = vec![0.0f64; n];
    for row in x.chunks_exact(n) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v.as_f64();
        }
    }
    mean.iter_mut().for_each(|m| *m /= t);
    let mut var = vec![0.0f64; n];
    for row in x.chunks_exact(n) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            let d = v.as_f64() - m;
            *s += d * d;
        }
    }
    var.iter_mut().for_each(|s| *s /= t);
    (mean, var)
}

/// Gradient of `stats_pool` with respect to its input matrix.
pub fn stats_pool_backward<T: Real>(x: &[T], t: usize, n: usize, dout: &[T]) -> Result<Vec<T>> {
    if dout.len() != 2 * n || x.len() != t * n || t == 0 {
        return Err(Error::shape("statistics pooling gradient does not match its input"));
    }
    let (mean, var) = moments(x, n);
    let tf = t as f64;
    let coef: Vec<(f64, f64)> = (0..n)
        .map(|j| {
            let dmu = dout[j].as_f64() / tf;
            let dsd = if var[j] > VAR_FLOOR { dout[n + j].as_f64() / (tf * var[j].sqrt()) } else { 0.0 };
            (dmu, dsd)
        })
        .collect();
    let mut dx = Vec::with_capacity(x.len());
    for row in x.chunks_exact(n) {
        for j in 0..n {
            let (dmu, dsd) = coef[j];
            dx.push(T::of(dmu + dsd * (row[j].as_f64() - mean[j])));
        }
    }
    Ok(dx)
}

fn stage_stats<T: Real>(x: &Tensor3<T>, stage: usize, data: &mut Vec<T>, layout: &mut Vec<Segment>) -> Result<()> {
    let (m, t, n) = flatten_time(x);
    data.extend(stats_pool(&m, t, n)?);
    layout.push(Segment { stage, component: Component::Mean, len: n });
    layout.push(Segment { stage, component: Component::Std, len: n });
    Ok(())
}

fn last<T>(stages: &[Tensor3<T>]) -> Result<&Tensor3<T>> {
    stages.last().ok_or(Error::Empty("stage outputs"))
}

/// `[mu_1, sigma_1, ..., mu_k, sigma_k]` over every stage output.
pub fn mtsp<T: Real>(stages: &[Tensor3<T>]) -> Result<PooledVector<T>> {
    if stages.len() != 4 {
        return Err(Error::shape(format!("multi-scale pooling needs 4 stage outputs, got {}", stages.len())));
    }
    let mut data = Vec::new();
    let mut layout = Vec::new();
    for (i, x) in stages.iter().enumerate() {
        stage_stats(x, i, &mut data, &mut layout)?;
    }
    Ok(PooledVector { data, layout })
}

pub fn sp_pool<T: Real>(stages: &[Tensor3<T>]) -> Result<PooledVector<T>> {
    let x = last(stages)?;
    let mut data = Vec::new();
    let mut layout = Vec::new();
    stage_stats(x, stages.len() - 1, &mut data, &mut layout)?;
    Ok(PooledVector { data, layout })
}

pub fn gap_pool<T: Real>(stages: &[Tensor3<T>]) -> Result<PooledVector<T>> {
    let x = last(stages)?;
    let data = global_avg_pool(x)?;
    let layout = vec![Segment { stage: stages.len() - 1, component: Component::Mean, len: data.len() }];
    Ok(PooledVector { data, layout })
}

pub fn pool<T: Real>(kind: PoolKind, stages: &[Tensor3<T>]) -> Result<PooledVector<T>> {
    match kind {
        PoolKind::Mtsp => mtsp(stages),
        PoolKind::Sp => sp_pool(stages),
        PoolKind::Gap => gap_pool(stages),
    }
}

/// Gradient of `pool` with respect to each stage output; stages the pooling
/// ignores receive zero tensors.
pub fn pool_backward<T: Real>(kind: PoolKind, stages: &[Tensor3<T>], dout: &[T]) -> Result<Vec<Tensor3<T>>> {
    let mut grads: Vec<Tensor3<T>> = stages.iter().map(|x| Tensor3::zeros(x.t(), x.f(), x.c())).collect();
    let used: Vec<usize> = match kind {
        PoolKind::Mtsp => (0..stages.len()).collect(),
        PoolKind::Sp | PoolKind::Gap => vec![stages.len().checked_sub(1).ok_or(Error::Empty("stage outputs"))?],
    };
    let mut offset = 0;
    for i in used {
        let x = &stages[i];
        if kind == PoolKind::Gap {
            let c = x.c();
            grads[i] = global_avg_pool_backward(&dout[offset..offset + c], x.t(), x.f());
            offset += c;
            continue;
        }
        let n = x.f() * x.c();
        let end = offset + 2 * n;
        if end > dout.len() {
            return Err(Error::shape("pooled gradient shorter than the pooled layout"));
        }
        let dx = stats_pool_backward(x.data(), x.t(), n, &dout[offset..end])?;
        grads[i] = Tensor3::from_vec(x.t(), x.f(), x.c(), dx)?;
        offset = end;
    }
    if offset != dout.len() {
        return Err(Error::shape("pooled gradient longer than the pooled layout"));
    }
    Ok(grads)
}
