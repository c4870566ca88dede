//! Affine maps on row-stacked batches of vectors.

use crate::error::{Error, Result};
use crate::real::{gemm, MatMut, MatRef, Real};

/// `y = W x + b` for a single vector; `w` is `n x m` row-major.
pub fn linear<T: Real>(x: &[T], w: &[T], b: Option<&[T]>, n: usize) -> Result<Vec<T>> {
    linear_batch(x, 1, w, b, n)
}

/// Row-stacked batch: `xs` is `rows x m`, output is `rows x n`.
pub fn linear_batch<T: Real>(xs: &[T], rows: usize, w: &[T], b: Option<&[T]>, n: usize) -> Result<Vec<T>> {
    let m = check(xs, rows, w, b, n)?;
    let mut y = vec![T::zero(); rows * n];
    if let Some(b) = b {
        for row in y.chunks_exact_mut(n) {
            row.copy_from_slice(b);
        }
    }
    let beta = if b.is_some() { T::one() } else { T::zero() };
    gemm(
        T::one(),
        MatRef::row_major(xs, rows, m),
        MatRef::row_major(w, n, m).t(),
        beta,
        MatMut::row_major(&mut y, rows, n),
    );
    Ok(y)
}

fn check<T>(xs: &[T], rows: usize, w: &[T], b: Option<&[T]>, n: usize) -> Result<usize> {
    if rows == 0 || n == 0 {
        return Err(Error::Empty("linear map"));
    }
    if !xs.len().is_multiple_of(rows) {
        return Err(Error::shape("linear input is not a whole number of rows"));
    }
    let m = xs.len() / rows;
    if w.len() != n * m {
        return Err(Error::shape(format!("linear weight {} != {n}x{m}", w.len())));
    }
    if b.is_some_and(|b| b.len() != n) {
        return Err(Error::shape("linear bias length"));
    }
    Ok(m)
}

/// Accumulates `dW += dYᵀ X` and `db += Σ dY`; returns `dX = dY W`.
pub fn linear_backward<T: Real>(
    xs: &[T],
    rows: usize,
    w: &[T],
    dys: &[T],
    n: usize,
    dw: &mut [T],
    db: Option<&mut [T]>,
) -> Result<Vec<T>> {
    let m = check(xs, rows, w, None, n)?;
    if dys.len() != rows * n || dw.len() != w.len() {
        return Err(Error::shape("linear backward buffers"));
    }
    gemm(
        T::one(),
        MatRef::row_major(dys, rows, n).t(),
        MatRef::row_major(xs, rows, m),
        T::one(),
        MatMut::row_major(dw, n, m),
    );
    if let Some(db) = db {
        for row in dys.chunks_exact(n) {
            for (d, &g) in db.iter_mut().zip(row) {
                *d = *d + g;
            }
        }
    }
    let mut dx = vec![T::zero(); rows * m];
    gemm(
        T::one(),
        MatRef::row_major(dys, rows, n),
        MatRef::row_major(w, n, m),
        T::zero(),
        MatMut::row_major(&mut dx, rows, m),
    );
    Ok(dx)
}
