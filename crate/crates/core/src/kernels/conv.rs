//! Bias-free 2-D convolution over `(time, frequency, channel)` maps.
//!
//! Padding is always "same": output extents are `ceil(input / stride)` on
//! both spatial axes and zeros are padded on both sides, with any odd
//! remainder going after the data. Stride and dilation apply jointly to the
//! time and frequency axes.
//!
//! The implementation lowers each group to a GEMM over an im2col matrix whose
//! columns are ordered `(group, kh, kw, in_channel_within_group)`. Weights are
//! stored as `[group][kh][kw][in_per_group][out_per_group]` so each group's
//! slice is directly the right-hand GEMM operand.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::real::{gemm, MatMut, MatRef, Real};
use crate::tensor::Tensor3;

/// im2col elements materialized per GEMM call.
const COL_TILE: usize = 1 << 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(
        kernel: usize,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        dilation: usize,
        groups: usize,
    ) -> Result<Self> {
        let spec = Self { kernel_h: kernel, kernel_w: kernel, in_ch, out_ch, stride, dilation, groups };
        spec.validate()?;
        Ok(spec)
    }

    pub fn standard(kernel: usize, in_ch: usize, out_ch: usize) -> Result<Self> {
        Self::new(kernel, in_ch, out_ch, 1, 1, 1)
    }

    pub fn depthwise(kernel: usize, channels: usize) -> Result<Self> {
        Self::new(kernel, channels, channels, 1, 1, channels)
    }

    pub fn pointwise(in_ch: usize, out_ch: usize) -> Result<Self> {
        Self::new(1, in_ch, out_ch, 1, 1, 1)
    }

    pub fn with_stride(mut self, stride: usize) -> Result<Self> {
        self.stride = stride;
        self.validate()?;
        Ok(self)
    }

    pub fn with_dilation(mut self, dilation: usize) -> Result<Self> {
        self.dilation = dilation;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_h == 0 || self.kernel_w == 0 {
            return Err(Error::config("kernel extents must be positive"));
        }
        if self.stride == 0 || self.dilation == 0 || self.groups == 0 {
            return Err(Error::config("stride, dilation and groups must be >= 1"));
        }
        if self.in_ch == 0 || self.out_ch == 0 {
            return Err(Error::config("channel counts must be positive"));
        }
        if !self.in_ch.is_multiple_of(self.groups) || !self.out_ch.is_multiple_of(self.groups) {
            return Err(Error::config(format!(
                "channels {}->{} not divisible by {} groups",
                self.in_ch, self.out_ch, self.groups
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn in_per_group(&self) -> usize {
        self.in_ch / self.groups
    }

    #[inline]
    pub fn out_per_group(&self) -> usize {
        self.out_ch / self.groups
    }

    /// Im2col row length of one group.
    #[inline]
    fn group_k(&self) -> usize {
        self.kernel_h * self.kernel_w * self.in_per_group()
    }

    pub fn weight_len(&self) -> usize {
        self.kernel_h * self.kernel_w * self.in_per_group() * self.out_ch
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.groups, self.kernel_h, self.kernel_w, self.in_per_group(), self.out_per_group()]
    }

    pub fn fan_in(&self) -> usize {
        self.group_k()
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups == self.in_ch && self.in_ch == self.out_ch && self.groups > 1
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.groups == 1
    }

    /// Receptive span along one axis: `dilation * (kernel - 1) + 1`.
    pub fn span(&self, kernel: usize) -> usize {
        self.dilation * (kernel - 1) + 1
    }

    pub fn output_dims(&self, t: usize, f: usize) -> (usize, usize) {
        (t.div_ceil(self.stride), f.div_ceil(self.stride))
    }

    /// Zeros padded before the first element along one axis.
    fn pad_before(&self, len: usize, kernel: usize) -> usize {
        let out = len.div_ceil(self.stride);
        let needed = (out.saturating_sub(1)) * self.stride + self.span(kernel);
        needed.saturating_sub(len) / 2
    }

    /// Weight offset of `(kh, kw, in_channel, out_channel)` in absolute channel indices.
    pub fn weight_index(&self, kh: usize, kw: usize, ci: usize, co: usize) -> usize {
        let ipg = self.in_per_group();
        let opg = self.out_per_group();
        let g = co / opg;
        debug_assert_eq!(g, ci / ipg, "input channel outside the output channel's group");
        (((g * self.kernel_h + kh) * self.kernel_w + kw) * ipg + (ci - g * ipg)) * opg + (co - g * opg)
    }
}

/// Geometry of one sample inside a chunk.
struct Geometry {
    t: usize,
    f: usize,
    ot: usize,
    of: usize,
    pad_t: usize,
    pad_f: usize,
}

impl Geometry {
    fn new(spec: &ConvSpec, t: usize, f: usize) -> Self {
        let (ot, of) = spec.output_dims(t, f);
        Self {
            t,
            f,
            ot,
            of,
            pad_t: spec.pad_before(t, spec.kernel_h),
            pad_f: spec.pad_before(f, spec.kernel_w),
        }
    }

    fn rows(&self) -> usize {
        self.ot * self.of
    }

    /// Input coordinate for output index `o` and tap `k`, if inside the map.
    #[inline]
    fn source(o: usize, k: usize, stride: usize, dilation: usize, pad: usize, len: usize) -> Option<usize> {
        let pos = o * stride + k * dilation;
        if pos < pad {
            return None;
        }
        let pos = pos - pad;
        (pos < len).then_some(pos)
    }
}

fn check_input<T: Real>(x: &Tensor3<T>, spec: &ConvSpec) -> Result<()> {
    if x.c() != spec.in_ch {
        return Err(Error::shape(format!("conv expects {} input channels, got {}", spec.in_ch, x.c())));
    }
    if x.t() == 0 || x.f() == 0 {
        return Err(Error::Empty("convolution input"));
    }
    Ok(())
}

/// Output rows `rows` of one sample's im2col matrix.
fn im2col<T: Real>(x: &Tensor3<T>, spec: &ConvSpec, geo: &Geometry, rows: Range<usize>, col: &mut [T]) {
    let ktot = spec.group_k() * spec.groups;
    let ipg = spec.in_per_group();
    let gk = spec.group_k();
    let xd = x.data();
    for (r, row) in rows.zip(col.chunks_exact_mut(ktot)) {
        let (ot, of) = (r / geo.of, r % geo.of);
        for kh in 0..spec.kernel_h {
            let src_t = Geometry::source(ot, kh, spec.stride, spec.dilation, geo.pad_t, geo.t);
            for kw in 0..spec.kernel_w {
                let src_f = Geometry::source(of, kw, spec.stride, spec.dilation, geo.pad_f, geo.f);
                let tap = (kh * spec.kernel_w + kw) * ipg;
                match (src_t, src_f) {
                    (Some(it), Some(jf)) => {
                        let base = (it * geo.f + jf) * spec.in_ch;
                        if spec.groups == 1 {
                            row[tap..tap + ipg].copy_from_slice(&xd[base..base + ipg]);
                        } else {
                            for g in 0..spec.groups {
                                let dst = g * gk + tap;
                                row[dst..dst + ipg].copy_from_slice(&xd[base + g * ipg..base + (g + 1) * ipg]);
                            }
                        }
                    }
                    _ => {
                        for g in 0..spec.groups {
                            let dst = g * gk + tap;
                            row[dst..dst + ipg].fill(T::zero());
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], spec: &ConvSpec, geo: &Geometry, rows: Range<usize>, dx: &mut Tensor3<T>) {
    let ktot = spec.group_k() * spec.groups;
    let ipg = spec.in_per_group();
    let gk = spec.group_k();
    let f = geo.f;
    let cin = spec.in_ch;
    let dxd = dx.data_mut();
    for (r, row) in rows.zip(col.chunks_exact(ktot)) {
        let (ot, of) = (r / geo.of, r % geo.of);
        for kh in 0..spec.kernel_h {
            let Some(it) = Geometry::source(ot, kh, spec.stride, spec.dilation, geo.pad_t, geo.t) else {
                continue;
            };
            for kw in 0..spec.kernel_w {
                let Some(jf) = Geometry::source(of, kw, spec.stride, spec.dilation, geo.pad_f, f) else {
                    continue;
                };
                let base = (it * f + jf) * cin;
                let tap = (kh * spec.kernel_w + kw) * ipg;
                for g in 0..spec.groups {
                    let src = &row[g * gk + tap..g * gk + tap + ipg];
                    for (d, &s) in dxd[base + g * ipg..base + (g + 1) * ipg].iter_mut().zip(src) {
                        *d = *d + s;
                    }
                }
            }
        }
    }
}

/// Splits a sample's output rows into tiles whose im2col block stays cache resident.
fn tiles(spec: &ConvSpec, rows: usize) -> impl Iterator<Item = Range<usize>> {
    let step = (COL_TILE / (spec.group_k() * spec.groups)).max(1);
    (0..rows).step_by(step).map(move |r| r..(r + step).min(rows))
}

fn check_weights<T>(spec: &ConvSpec, w: &[T]) -> Result<()> {
    spec.validate()?;
    if w.len() != spec.weight_len() {
        return Err(Error::shape(format!(
            "conv weight needs {} values, got {}",
            spec.weight_len(),
            w.len()
        )));
    }
    Ok(())
}

pub fn conv2d<T: Real>(x: &Tensor3<T>, spec: &ConvSpec, w: &[T]) -> Result<Tensor3<T>> {
    Ok(conv2d_batch(std::slice::from_ref(x), spec, w)?.pop().expect("one output per input"))
}

/// Convolves every sample of a batch with shared weights.
pub fn conv2d_batch<T: Real>(xs: &[Tensor3<T>], spec: &ConvSpec, w: &[T]) -> Result<Vec<Tensor3<T>>> {
    check_weights(spec, w)?;
    for x in xs {
        check_input(x, spec)?;
    }
    let gk = spec.group_k();
    let ktot = gk * spec.groups;
    let opg = spec.out_per_group();
    let mut col = Vec::new();
    let mut outputs = Vec::with_capacity(xs.len());
    for x in xs {
        let geo = Geometry::new(spec, x.t(), x.f());
        let mut out = vec![T::zero(); geo.rows() * spec.out_ch];
        for tile in tiles(spec, geo.rows()) {
            let n = tile.len();
            col.resize(n * ktot, T::zero());
            im2col(x, spec, &geo, tile.clone(), &mut col);
            let dst = &mut out[tile.start * spec.out_ch..tile.end * spec.out_ch];
            for g in 0..spec.groups {
                let a = MatRef::strided(&col[g * gk..], n, gk, ktot);
                let b = MatRef::row_major(&w[g * gk * opg..(g + 1) * gk * opg], gk, opg);
                let c = MatMut::strided(&mut dst[g * opg..], n, opg, spec.out_ch);
                gemm(T::one(), a, b, T::zero(), c);
            }
        }
        outputs.push(Tensor3::from_vec(geo.ot, geo.of, spec.out_ch, out)?);
    }
    Ok(outputs)
}

/// Backward pass. Accumulates the weight gradient into `dw` and returns the
/// input gradients when `input_grad` is set.
pub fn conv2d_backward<T: Real>(
    xs: &[Tensor3<T>],
    spec: &ConvSpec,
    w: &[T],
    dys: &[Tensor3<T>],
    dw: &mut [T],
    input_grad: bool,
) -> Result<Option<Vec<Tensor3<T>>>> {
    check_weights(spec, w)?;
    if dw.len() != w.len() {
        return Err(Error::shape("conv weight gradient length"));
    }
    if xs.len() != dys.len() {
        return Err(Error::shape("conv backward batch sizes differ"));
    }
    let gk = spec.group_k();
    let ktot = gk * spec.groups;
    let opg = spec.out_per_group();
    let mut dxs = input_grad.then(|| Vec::with_capacity(xs.len()));
    let mut col = Vec::new();
    for (x, dy) in xs.iter().zip(dys) {
        check_input(x, spec)?;
        let geo = Geometry::new(spec, x.t(), x.f());
        if dy.dims() != (geo.ot, geo.of, spec.out_ch) {
            return Err(Error::shape(format!(
                "conv output gradient {:?} does not match {:?}",
                dy.dims(),
                (geo.ot, geo.of, spec.out_ch)
            )));
        }
        let mut dx = input_grad.then(|| Tensor3::zeros(geo.t, geo.f, spec.in_ch));
        for tile in tiles(spec, geo.rows()) {
            let n = tile.len();
            col.resize(n * ktot, T::zero());
            im2col(x, spec, &geo, tile.clone(), &mut col);
            let dyt = &dy.data()[tile.start * spec.out_ch..tile.end * spec.out_ch];
            for g in 0..spec.groups {
                let a = MatRef::strided(&col[g * gk..], n, gk, ktot).t();
                let b = MatRef::strided(&dyt[g * opg..], n, opg, spec.out_ch);
                let c = MatMut::row_major(&mut dw[g * gk * opg..(g + 1) * gk * opg], gk, opg);
                gemm(T::one(), a, b, T::one(), c);
            }
            if let Some(dx) = dx.as_mut() {
                // col is reused as dcol.
                for g in 0..spec.groups {
                    let a = MatRef::strided(&dyt[g * opg..], n, opg, spec.out_ch);
                    let b = MatRef::row_major(&w[g * gk * opg..(g + 1) * gk * opg], gk, opg).t();
                    let c = MatMut::strided(&mut col[g * gk..], n, gk, ktot);
                    gemm(T::one(), a, b, T::zero(), c);
                }
                col2im(&col, spec, &geo, tile, dx);
            }
        }
        if let (Some(dxs), Some(dx)) = (dxs.as_mut(), dx) {
            dxs.push(dx);
        }
    }
    Ok(dxs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct six-loop convolution with explicit same-padding arithmetic.
    pub(crate) fn reference_conv(x: &Tensor3<f64>, spec: &ConvSpec, w: &[f64]) -> Tensor3<f64> {
        let (t, f, _) = x.dims();
        let ot = t.div_ceil(spec.stride);
        let of = f.div_ceil(spec.stride);
        let span_t = spec.dilation * (spec.kernel_h - 1) + 1;
        let span_f = spec.dilation * (spec.kernel_w - 1) + 1;
        let pad_t = (((ot - 1) * spec.stride + span_t).saturating_sub(t) / 2) as isize;
        let pad_f = (((of - 1) * spec.stride + span_f).saturating_sub(f) / 2) as isize;
        let ipg = spec.in_ch / spec.groups;
        let opg = spec.out_ch / spec.groups;
        let mut y = Tensor3::zeros(ot, of, spec.out_ch);
        for a in 0..ot {
            for b in 0..of {
                for co in 0..spec.out_ch {
                    let g = co / opg;
                    let mut acc = 0.0;
                    for i in 0..spec.kernel_h {
                        for j in 0..spec.kernel_w {
                            for cl in 0..ipg {
                                let ti = (a * spec.stride + i * spec.dilation) as isize - pad_t;
                                let fj = (b * spec.stride + j * spec.dilation) as isize - pad_f;
                                if ti < 0 || fj < 0 || ti >= t as isize || fj >= f as isize {
                                    continue;
                                }
                                let ci = g * ipg + cl;
                                acc += x.get(ti as usize, fj as usize, ci) * w[spec.weight_index(i, j, ci, co)];
                            }
                        }
                    }
                    y.set(a, b, co, acc);
                }
            }
        }
        y
    }

    fn random_tensor(rng: &mut ChaCha8Rng, t: usize, f: usize, c: usize) -> Tensor3<f64> {
        Tensor3::from_fn(t, f, c, |_, _, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_scale() {
        let spec = ConvSpec::standard(1, 1, 1).unwrap();
        let x = Tensor3::from_vec(1, 1, 1, vec![3.0f64]).unwrap();
        let y = conv2d(&x, &spec, &[2.5]).unwrap();
        assert_eq!(y.data(), &[7.5]);
    }

    #[test]
    fn ones_kernel_same_padding() {
        let spec = ConvSpec::standard(3, 1, 1).unwrap();
        let x = Tensor3::filled(5, 5, 1, 1.0f64);
        let y = conv2d(&x, &spec, &[1.0; 9]).unwrap();
        assert_eq!(y.dims(), (5, 5, 1));
        assert_eq!(y.get(2, 2, 0), 9.0);
        assert_eq!(y.get(0, 0, 0), 4.0);
        assert_eq!(y.get(4, 4, 0), 4.0);
        assert_eq!(y.get(0, 2, 0), 6.0);
    }

    #[test]
    fn strided_dilated_grouped_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let spec = ConvSpec::new(3, 4, 6, 2, 2, 2).unwrap();
        let x = random_tensor(&mut rng, 8, 8, 4);
        let w: Vec<f64> = (0..spec.weight_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = conv2d(&x, &spec, &w).unwrap();
        let r = reference_conv(&x, &spec, &w);
        assert_eq!(y.dims(), (4, 4, 6));
        for (a, b) in y.data().iter().zip(r.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn batch_with_mixed_lengths_matches_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = ConvSpec::new(3, 3, 5, 1, 2, 1).unwrap();
        let xs = vec![random_tensor(&mut rng, 7, 6, 3), random_tensor(&mut rng, 4, 6, 3)];
        let w: Vec<f64> = (0..spec.weight_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let batch = conv2d_batch(&xs, &spec, &w).unwrap();
        for (x, y) in xs.iter().zip(&batch) {
            assert_eq!(&conv2d(x, &spec, &w).unwrap(), y);
        }
    }

    #[test]
    fn rejects_channel_mismatch_and_bad_groups() {
        let spec = ConvSpec::standard(3, 2, 2).unwrap();
        let x = Tensor3::<f32>::zeros(4, 4, 3);
        assert!(matches!(conv2d(&x, &spec, &[0.0; 36]), Err(Error::Shape(_))));
        assert!(matches!(ConvSpec::new(3, 6, 4, 1, 1, 4), Err(Error::Config(_))));
    }

    #[test]
    fn depthwise_then_pointwise_equals_composed_full_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (cin, cout) = (3, 4);
        let dw_spec = ConvSpec::depthwise(3, cin).unwrap().with_stride(2).unwrap();
        let pw_spec = ConvSpec::pointwise(cin, cout).unwrap();
        let full_spec = ConvSpec::new(3, cin, cout, 2, 1, 1).unwrap();
        let dw: Vec<f64> = (0..dw_spec.weight_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pw: Vec<f64> = (0..pw_spec.weight_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        // full[i][j][ci][co] = dw[i][j][ci] * pw[ci][co]
        let mut full = vec![0.0; full_spec.weight_len()];
        for i in 0..3 {
            for j in 0..3 {
                for ci in 0..cin {
                    for co in 0..cout {
                        full[full_spec.weight_index(i, j, ci, co)] =
                            dw[dw_spec.weight_index(i, j, ci, ci)] * pw[pw_spec.weight_index(0, 0, ci, co)];
                    }
                }
            }
        }
        let x = random_tensor(&mut rng, 9, 7, cin);
        let sep = conv2d(&conv2d(&x, &dw_spec, &dw).unwrap(), &pw_spec, &pw).unwrap();
        let direct = conv2d(&x, &full_spec, &full).unwrap();
        for (a, b) in sep.data().iter().zip(direct.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn receptive_span() {
        let spec = ConvSpec::standard(3, 1, 1).unwrap();
        assert_eq!(spec.span(3), 3);
        assert_eq!(spec.with_dilation(2).unwrap().span(3), 5);
    }
}
