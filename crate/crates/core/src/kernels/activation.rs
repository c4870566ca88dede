use crate::real::Real;
use crate::tensor::Tensor3;

pub fn relu<T: Real>(x: &Tensor3<T>) -> Tensor3<T> {
    x.map(|v| v.max(T::zero()))
}

pub fn relu_slice<T: Real>(x: &mut [T]) {
    x.iter_mut().for_each(|v| *v = v.max(T::zero()));
}

/// Gradient through a ReLU given its output: passes where `y > 0`.
pub fn relu_backward<T: Real>(y: &Tensor3<T>, dy: &Tensor3<T>) -> Tensor3<T> {
    let mut dx = dy.clone();
    for (d, &o) in dx.data_mut().iter_mut().zip(y.data()) {
        if o <= T::zero() {
            *d = T::zero();
        }
    }
    dx
}

pub fn relu_backward_slice<T: Real>(y: &[T], dy: &mut [T]) {
    for (d, &o) in dy.iter_mut().zip(y) {
        if o <= T::zero() {
            *d = T::zero();
        }
    }
}

/// Numerically stable softmax of each `cols`-wide row.
pub fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    assert!(cols > 0 && x.len().is_multiple_of(cols));
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(cols) {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut sum = 0.0;
        for &v in row {
            let e = (v - mx).exp();
            sum += e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|e| *e /= sum);
    }
    out
}

/// `log Σ exp(x)` with max shifting.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let mx = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + x.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
}
