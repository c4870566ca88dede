use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor3;

/// Channel means over every `(t, f)` position.
pub fn global_avg_pool<T: Real>(x: &Tensor3<T>) -> Result<Vec<T>> {
    let c = x.c();
    if x.positions() == 0 || c == 0 {
        return Err(Error::Empty("global average pooling input"));
    }
    let mut acc = vec![0.0f64; c];
    for row in x.data().chunks_exact(c) {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v.as_f64();
        }
    }
    let n = x.positions() as f64;
    Ok(acc.into_iter().map(|s| T::of(s / n)).collect())
}

/// Spreads a per-channel gradient uniformly over a `t x f` map.
pub fn global_avg_pool_backward<T: Real>(ds: &[T], t: usize, f: usize) -> Tensor3<T> {
    let c = ds.len();
    let scale = 1.0 / (t * f) as f64;
    let row: Vec<T> = ds.iter().map(|&d| T::of(d.as_f64() * scale)).collect();
    let mut dx = Tensor3::zeros(t, f, c);
    for r in dx.data_mut().chunks_exact_mut(c) {
        r.copy_from_slice(&row);
    }
    dx
}
