//! Selective-kernel convolution and the residual block built from it.
//!
//! An SK unit runs a 3x3 convolution and a dilation-2 3x3 convolution in
//! parallel (each followed by BN and ReLU), sums the two maps, squeezes the
//! sum to a channel descriptor by global average pooling, projects it to a
//! compact vector `z = relu(BN(W s))`, and derives per-channel two-way softmax
//! weights from `A z` and `B z`. The output mixes the branches channel-wise
//! with those convex weights.

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::activation::{relu_backward, relu_backward_slice, relu_slice};
use crate::kernels::norm::{BatchNorm, BnCache};
use crate::kernels::pool::global_avg_pool;
use crate::layers::{ConvBn, ConvBnCache, ConvKind, ConvOp};
use crate::param::{join, Module, Param, ParamKind};
use crate::layers::Linear;
use crate::real::Real;
use crate::tensor::Tensor3;

pub const SK_REDUCTION: usize = 16;
pub const SK_MIN_HIDDEN: usize = 32;
pub const SK_DILATION: usize = 2;

/// Width of the squeezed descriptor, `max(C / r, L)` with floor division.
pub fn hidden_dim(channels: usize, reduction: usize, min_hidden: usize) -> usize {
    (channels / reduction).max(min_hidden)
}

/// Two-way softmax of `(alpha, beta)` per channel.
pub fn attention_weights(alpha: &[f64], beta: &[f64]) -> (Vec<f64>, Vec<f64>) {
    alpha
        .iter()
        .zip(beta)
        .map(|(&x, &y)| {
            let m = x.max(y);
            let (ex, ey) = ((x - m).exp(), (y - m).exp());
            (ex / (ex + ey), ey / (ex + ey))
        })
        .unzip()
}

#[derive(Debug, Clone)]
pub struct SkConv<T> {
    pub branch_std: ConvBn<T>,
    pub branch_dil: ConvBn<T>,
    pub squeeze: Linear<T>,
    pub bn_z: BatchNorm<T>,
    pub attn_a: Linear<T>,
    pub attn_b: Linear<T>,
}

pub struct SkConvCache<T> {
    std: ConvBnCache<T>,
    dil: ConvBnCache<T>,
    s: Vec<T>,
    bn_z: BnCache<T>,
    z: Vec<T>,
    a: Vec<f64>,
    b: Vec<f64>,
}

impl<T: Real> SkConv<T> {
    pub fn new(kind: ConvKind, in_ch: usize, channels: usize, stride: usize, rng: &mut impl Rng) -> Result<Self> {
        let g = hidden_dim(channels, SK_REDUCTION, SK_MIN_HIDDEN);
        Ok(Self {
            branch_std: ConvBn::new(ConvOp::build(kind, 3, in_ch, channels, stride, 1, rng)?, true),
            branch_dil: ConvBn::new(ConvOp::build(kind, 3, in_ch, channels, stride, SK_DILATION, rng)?, true),
            squeeze: Linear::new(channels, g, false, ParamKind::Attention, rng),
            bn_z: BatchNorm::new(g),
            attn_a: Linear::new(g, channels, false, ParamKind::Attention, rng),
            attn_b: Linear::new(g, channels, false, ParamKind::Attention, rng),
        })
    }

    pub fn channels(&self) -> usize {
        self.attn_a.out_dim
    }

    pub fn hidden(&self) -> usize {
        self.squeeze.out_dim
    }

    fn descriptor(&self, u_std: &[Tensor3<T>], u_dil: &[Tensor3<T>]) -> Result<Vec<T>> {
        let c = self.channels();
        let mut s = Vec::with_capacity(u_std.len() * c);
        for (p, q) in u_std.iter().zip(u_dil) {
            if p.c() != c {
                return Err(Error::shape(format!("attention over {c} channels got {}", p.c())));
            }
            let mut u = p.clone();
            u.add_assign(q)?;
            s.extend(global_avg_pool(&u)?);
        }
        Ok(s)
    }

    fn as_vectors(z: &[T], rows: usize) -> Vec<Tensor3<T>> {
        let g = z.len() / rows;
        z.chunks_exact(g).map(|r| Tensor3::from_vec(1, 1, g, r.to_vec()).expect("row length")).collect()
    }

    fn logits_to_weights(&self, z: &[T], rows: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let alpha: Vec<f64> = self.attn_a.forward(z, rows)?.iter().map(|v| v.as_f64()).collect();
        let beta: Vec<f64> = self.attn_b.forward(z, rows)?.iter().map(|v| v.as_f64()).collect();
        Ok(attention_weights(&alpha, &beta))
    }

    /// Channel attention of one fused map `U` using running BN statistics.
    pub fn sk_attention(&self, u: &Tensor3<T>) -> Result<(Vec<f64>, Vec<f64>)> {
        if u.c() != self.channels() {
            return Err(Error::shape(format!(
                "attention over {} channels got {}",
                self.channels(),
                u.c()
            )));
        }
        let s = global_avg_pool(u)?;
        let h = self.squeeze.forward(&s, 1)?;
        let mut z = self.bn_z.infer(&Self::as_vectors(&h, 1))?.remove(0).into_vec();
        relu_slice(&mut z);
        self.logits_to_weights(&z, 1)
    }

    fn fuse(u_std: &[Tensor3<T>], u_dil: &[Tensor3<T>], a: &[f64], b: &[f64], c: usize) -> Vec<Tensor3<T>> {
        u_std
            .iter()
            .zip(u_dil)
            .enumerate()
            .map(|(n, (p, q))| {
                let (a, b) = (&a[n * c..(n + 1) * c], &b[n * c..(n + 1) * c]);
                let mut v = p.clone();
                for (vr, qr) in v.data_mut().chunks_exact_mut(c).zip(q.data().chunks_exact(c)) {
                    for k in 0..c {
                        vr[k] = T::of(a[k] * vr[k].as_f64() + b[k] * qr[k].as_f64());
                    }
                }
                v
            })
            .collect()
    }

    pub fn forward(&self, xs: &[Tensor3<T>]) -> Result<Vec<Tensor3<T>>> {
        let u_std = self.branch_std.forward(xs)?;
        let u_dil = self.branch_dil.forward(xs)?;
        let rows = xs.len();
        let s = self.descriptor(&u_std, &u_dil)?;
        let h = self.squeeze.forward(&s, rows)?;
        let mut z: Vec<T> = self.bn_z.infer(&Self::as_vectors(&h, rows))?.into_iter().flat_map(Tensor3::into_vec).collect();
        relu_slice(&mut z);
        let (a, b) = self.logits_to_weights(&z, rows)?;
        Ok(Self::fuse(&u_std, &u_dil, &a, &b, self.channels()))
    }

    pub fn forward_train(&mut self, xs: &[Tensor3<T>]) -> Result<(Vec<Tensor3<T>>, SkConvCache<T>)> {
        let (u_std, std) = self.branch_std.forward_train(xs)?;
        let (u_dil, dil) = self.branch_dil.forward_train(xs)?;
        let rows = xs.len();
        let s = self.descriptor(&u_std, &u_dil)?;
        let h = self.squeeze.forward(&s, rows)?;
        let (zs, bn_z) = self.bn_z.forward_train(&Self::as_vectors(&h, rows))?;
        let mut z: Vec<T> = zs.into_iter().flat_map(Tensor3::into_vec).collect();
        relu_slice(&mut z);
        let (a, b) = self.logits_to_weights(&z, rows)?;
        let v = Self::fuse(&u_std, &u_dil, &a, &b, self.channels());
        Ok((v, SkConvCache { std, dil, s, bn_z, z, a, b }))
    }

    pub fn backward(&mut self, xs: &[Tensor3<T>], cache: SkConvCache<T>, dvs: Vec<Tensor3<T>>) -> Result<Vec<Tensor3<T>>> {
        let c = self.channels();
        let rows = xs.len();
        let u_std = cache.std.output().ok_or_else(|| Error::shape("SK branch cache lacks output"))?;
        let u_dil = cache.dil.output().ok_or_else(|| Error::shape("SK branch cache lacks output"))?;

        let mut du_std = Vec::with_capacity(rows);
        let mut du_dil = Vec::with_capacity(rows);
        let mut dalpha = vec![T::zero(); rows * c];
        for (n, dv) in dvs.iter().enumerate() {
            let (a, b) = (&cache.a[n * c..(n + 1) * c], &cache.b[n * c..(n + 1) * c]);
            let mut da = vec![0.0f64; c];
            let mut db = vec![0.0f64; c];
            let mut dp = dv.clone();
            let mut dq = dv.clone();
            for (((dr, pr), qr), (dpr, dqr)) in dv
                .data()
                .chunks_exact(c)
                .zip(u_std[n].data().chunks_exact(c))
                .zip(u_dil[n].data().chunks_exact(c))
                .zip(dp.data_mut().chunks_exact_mut(c).zip(dq.data_mut().chunks_exact_mut(c)))
            {
                for k in 0..c {
                    let g = dr[k].as_f64();
                    da[k] += g * pr[k].as_f64();
                    db[k] += g * qr[k].as_f64();
                    dpr[k] = T::of(a[k] * g);
                    dqr[k] = T::of(b[k] * g);
                }
            }
            for k in 0..c {
                dalpha[n * c + k] = T::of(a[k] * b[k] * (da[k] - db[k]));
            }
            du_std.push(dp);
            du_dil.push(dq);
        }
        let dbeta: Vec<T> = dalpha.iter().map(|&v| -v).collect();
        let mut dz = self.attn_a.backward(&cache.z, rows, &dalpha)?;
        for (d, e) in dz.iter_mut().zip(self.attn_b.backward(&cache.z, rows, &dbeta)?) {
            *d = *d + e;
        }
        relu_backward_slice(&cache.z, &mut dz);
        let dh: Vec<T> = self
            .bn_z
            .backward(&cache.bn_z, &Self::as_vectors(&dz, rows))?
            .into_iter()
            .flat_map(Tensor3::into_vec)
            .collect();
        let ds = self.squeeze.backward(&cache.s, rows, &dh)?;
        for n in 0..rows {
            let scale = 1.0 / u_std[n].positions() as f64;
            let row: Vec<T> = ds[n * c..(n + 1) * c].iter().map(|&v| T::of(v.as_f64() * scale)).collect();
            for t in [&mut du_std[n], &mut du_dil[n]] {
                for r in t.data_mut().chunks_exact_mut(c) {
                    for k in 0..c {
                        r[k] = r[k] + row[k];
                    }
                }
            }
        }
        let mut dx = self.branch_std.backward(xs, cache.std, du_std, true)?.expect("input gradient");
        let dx_dil = self.branch_dil.backward(xs, cache.dil, du_dil, true)?.expect("input gradient");
        for (a, b) in dx.iter_mut().zip(&dx_dil) {
            a.add_assign(b)?;
        }
        Ok(dx)
    }
}

impl<T: Real> Module<T> for SkConv<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.branch_std.visit(&join(prefix, "branch_std"), f);
        self.branch_dil.visit(&join(prefix, "branch_dil"), f);
        self.squeeze.visit(&join(prefix, "squeeze"), f);
        self.bn_z.visit(&join(prefix, "bn_z"), f);
        self.attn_a.visit(&join(prefix, "attn_a"), f);
        self.attn_b.visit(&join(prefix, "attn_b"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.branch_std.visit_mut(&join(prefix, "branch_std"), f);
        self.branch_dil.visit_mut(&join(prefix, "branch_dil"), f);
        self.squeeze.visit_mut(&join(prefix, "squeeze"), f);
        self.bn_z.visit_mut(&join(prefix, "bn_z"), f);
        self.attn_a.visit_mut(&join(prefix, "attn_a"), f);
        self.attn_b.visit_mut(&join(prefix, "attn_b"), f);
    }
}

/// Two SK units, a 1x1 conv with BN, a shortcut, and a final ReLU.
///
/// Downsampling happens in both branches of the first SK unit and in the
/// projection shortcut; the shortcut exists iff the channel count or the
/// spatial extent changes.
#[derive(Debug, Clone)]
pub struct RskBlock<T> {
    pub sk1: SkConv<T>,
    pub sk2: SkConv<T>,
    pub out: ConvBn<T>,
    pub shortcut: Option<ConvBn<T>>,
}

pub struct RskBlockCache<T> {
    v1: Vec<Tensor3<T>>,
    v2: Vec<Tensor3<T>>,
    sk1: SkConvCache<T>,
    sk2: SkConvCache<T>,
    out: ConvBnCache<T>,
    shortcut: Option<ConvBnCache<T>>,
    y: Vec<Tensor3<T>>,
}

pub(crate) fn projection<T: Real>(in_ch: usize, out_ch: usize, stride: usize, rng: &mut impl Rng) -> Result<Option<ConvBn<T>>> {
    if in_ch == out_ch && stride == 1 {
        return Ok(None);
    }
    Ok(Some(ConvBn::new(ConvOp::build(ConvKind::Standard, 1, in_ch, out_ch, stride, 1, rng)?, false)))
}

pub(crate) fn residual_sum<T: Real>(main: &mut [Tensor3<T>], skip: &[Tensor3<T>]) -> Result<()> {
    for (m, s) in main.iter_mut().zip(skip) {
        m.add_assign(s).map_err(|_| {
            Error::shape(format!("residual sum of {:?} and shortcut {:?}", m.dims(), s.dims()))
        })?;
        relu_slice(m.data_mut());
    }
    Ok(())
}

impl<T: Real> RskBlock<T> {
    pub fn new(kind: ConvKind, in_ch: usize, channels: usize, stride: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            sk1: SkConv::new(kind, in_ch, channels, stride, rng)?,
            sk2: SkConv::new(kind, channels, channels, 1, rng)?,
            out: ConvBn::new(ConvOp::build(ConvKind::Standard, 1, channels, channels, 1, 1, rng)?, false),
            shortcut: projection(in_ch, channels, stride, rng)?,
        })
    }

    pub fn forward(&self, xs: &[Tensor3<T>]) -> Result<Vec<Tensor3<T>>> {
        let v = self.sk2.forward(&self.sk1.forward(xs)?)?;
        let mut y = self.out.forward(&v)?;
        match &self.shortcut {
            Some(sc) => residual_sum(&mut y, &sc.forward(xs)?)?,
            None => residual_sum(&mut y, xs)?,
        }
        Ok(y)
    }

    pub fn forward_train(&mut self, xs: &[Tensor3<T>]) -> Result<(Vec<Tensor3<T>>, RskBlockCache<T>)> {
        let (v1, sk1) = self.sk1.forward_train(xs)?;
        let (v2, sk2) = self.sk2.forward_train(&v1)?;
        let (mut y, out) = self.out.forward_train(&v2)?;
        let shortcut = match &mut self.shortcut {
            Some(sc) => {
                let (s, cache) = sc.forward_train(xs)?;
                residual_sum(&mut y, &s)?;
                Some(cache)
            }
            None => {
                residual_sum(&mut y, xs)?;
                None
            }
        };
        let cache = RskBlockCache { v1, v2, sk1, sk2, out, shortcut, y: y.clone() };
        Ok((y, cache))
    }

    pub fn backward(&mut self, xs: &[Tensor3<T>], cache: RskBlockCache<T>, dys: Vec<Tensor3<T>>) -> Result<Vec<Tensor3<T>>> {
        let dpre: Vec<Tensor3<T>> = cache.y.iter().zip(&dys).map(|(y, d)| relu_backward(y, d)).collect();
        let dv2 = self.out.backward(&cache.v2, cache.out, dpre.clone(), true)?.expect("input gradient");
        let dv1 = self.sk2.backward(&cache.v1, cache.sk2, dv2)?;
        let mut dx = self.sk1.backward(xs, cache.sk1, dv1)?;
        let dskip = match (&mut self.shortcut, cache.shortcut) {
            (Some(sc), Some(c)) => sc.backward(xs, c, dpre, true)?.expect("input gradient"),
            (None, None) => dpre,
            _ => return Err(Error::shape("shortcut cache does not match block configuration")),
        };
        for (a, b) in dx.iter_mut().zip(&dskip) {
            a.add_assign(b)?;
        }
        Ok(dx)
    }
}

impl<T: Real> Module<T> for RskBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.sk1.visit(&join(prefix, "sk1"), f);
        self.sk2.visit(&join(prefix, "sk2"), f);
        self.out.visit(&join(prefix, "out"), f);
        if let Some(sc) = &self.shortcut {
            sc.visit(&join(prefix, "shortcut"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.sk1.visit_mut(&join(prefix, "sk1"), f);
        self.sk2.visit_mut(&join(prefix, "sk2"), f);
        self.out.visit_mut(&join(prefix, "out"), f);
        if let Some(sc) = &mut self.shortcut {
            sc.visit_mut(&join(prefix, "shortcut"), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::conv::conv2d;
    use crate::kernels::norm::BN_EPS;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    #[test]
    fn hidden_width_rule() {
        assert_eq!(hidden_dim(64, 16, 32), 32);
        assert_eq!(hidden_dim(512, 16, 32), 32);
        assert_eq!(hidden_dim(1024, 16, 32), 64);
        assert_eq!(hidden_dim(527, 16, 32), 32);
    }

    #[test]
    fn identical_attention_matrices_split_evenly() {
        let mut sk = SkConv::<f64>::new(ConvKind::Standard, 4, 8, 1, &mut rng()).unwrap();
        sk.attn_b.weight.value = sk.attn_a.weight.value.clone();
        let u = Tensor3::from_fn(5, 4, 8, |t, f, c| (t * 3 + f + c) as f64 * 0.1);
        let (a, b) = sk.sk_attention(&u).unwrap();
        assert!(a.iter().chain(&b).all(|&v| v == 0.5));
    }

    #[test]
    fn equal_attention_averages_branches() {
        let mut sk = SkConv::<f64>::new(ConvKind::Standard, 3, 8, 1, &mut rng()).unwrap();
        sk.attn_b.weight.value = sk.attn_a.weight.value.clone();
        let x = Tensor3::from_fn(6, 5, 3, |t, f, c| ((t * 7 + f * 3 + c) % 5) as f64 - 2.0);
        let v = sk.forward(std::slice::from_ref(&x)).unwrap().remove(0);
        let p = sk.branch_std.forward(std::slice::from_ref(&x)).unwrap().remove(0);
        let q = sk.branch_dil.forward(std::slice::from_ref(&x)).unwrap().remove(0);
        for ((v, p), q) in v.data().iter().zip(p.data()).zip(q.data()) {
            assert!((v - 0.5 * (p + q)).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let sk = SkConv::<f64>::new(ConvKind::Standard, 4, 8, 2, &mut rng()).unwrap();
        let v = sk.forward(&[Tensor3::zeros(8, 6, 4)]).unwrap().remove(0);
        assert_eq!(v.dims(), (4, 3, 8));
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn identity_configured_block_is_relu() {
        let mut block = RskBlock::<f64>::new(ConvKind::Standard, 4, 4, 1, &mut rng()).unwrap();
        for sk in [&mut block.sk1, &mut block.sk2] {
            for branch in [&mut sk.branch_std, &mut sk.branch_dil] {
                branch.conv.visit_mut("", &mut |_, p| p.value.iter_mut().for_each(|w| *w = 0.0));
            }
        }
        if let ConvOp::Single(c) = &mut block.out.conv {
            c.weight.value.iter_mut().for_each(|w| *w = 0.0);
            for k in 0..4 {
                let i = c.spec.weight_index(0, 0, k, k);
                c.weight.value[i] = 1.0;
            }
        }
        block.out.bn.running_var.value = vec![1.0 - BN_EPS; 4];
        assert!(block.shortcut.is_none());
        let x = Tensor3::from_fn(5, 5, 4, |t, f, c| (t as f64 - 2.0) * (f as f64 - 1.5) + c as f64 * 0.3 - 1.0);
        let y = block.forward(std::slice::from_ref(&x)).unwrap().remove(0);
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b.max(0.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn stride_two_block_shape() {
        let block = RskBlock::<f32>::new(ConvKind::Standard, 32, 64, 2, &mut rng()).unwrap();
        assert!(block.shortcut.is_some());
        let y = block.forward(&[Tensor3::zeros(16, 16, 32)]).unwrap().remove(0);
        assert_eq!(y.dims(), (8, 8, 64));
    }

    #[test]
    fn dilated_branch_reaches_five_taps() {
        // A single interior impulse spreads over a 3x3 footprint through the
        // standard branch and a 5x5 footprint through the dilated branch.
        let spec_std = crate::kernels::conv::ConvSpec::standard(3, 1, 1).unwrap();
        let spec_dil = spec_std.with_dilation(2).unwrap();
        let w = vec![1.0f64; 9];
        let mut x = Tensor3::zeros(11, 11, 1);
        x.set(5, 5, 0, 1.0);
        let extent = |y: &Tensor3<f64>| {
            let rows: Vec<usize> = (0..11).filter(|&t| (0..11).any(|f| y.get(t, f, 0) != 0.0)).collect();
            rows.last().unwrap() - rows.first().unwrap() + 1
        };
        assert_eq!(extent(&conv2d(&x, &spec_std, &w).unwrap()), 3);
        assert_eq!(extent(&conv2d(&x, &spec_dil, &w).unwrap()), 5);
    }

    #[test]
    fn attention_mismatch_is_an_error() {
        let sk = SkConv::<f64>::new(ConvKind::Standard, 4, 8, 1, &mut rng()).unwrap();
        assert!(sk.sk_attention(&Tensor3::zeros(2, 2, 4)).is_err());
    }
}
