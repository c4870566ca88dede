//! Finite-difference gradient checks for every trainable layer type, run in
//! f64 on small random instances.
//!
//! Each case turns a layer into a scalar function of its inputs and
//! parameters. Tensor-valued layers are reduced with a fixed random
//! projection `sum(r * y)` so every output coordinate contributes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::head::{AmSoftmax, EmbeddingHead, HeadKind};
use crate::kernels::conv::ConvSpec;
use crate::kernels::gradcheck::{grad_check, Differentiable, GradCheckReport};
use crate::kernels::norm::BatchNorm;
use crate::layers::{Conv, ConvKind, ConvOp, Linear};
use crate::param::{Module, ParamKind};
use crate::pooling::{pool, pool_backward, stats_pool, stats_pool_backward, PoolKind};
use crate::sk::{RskBlock, SkConv};
use crate::tensor::Tensor3;

/// Largest relative error a layer may show.
pub const GRAD_TOL: f64 = 1e-4;

fn trainable_values<M: Module<f64>>(m: &M) -> Vec<f64> {
    let mut v = Vec::new();
    m.visit("", &mut |_, p| {
        if p.kind.trainable() {
            v.extend_from_slice(&p.value);
        }
    });
    v
}

fn set_trainable<M: Module<f64>>(m: &mut M, x: &[f64]) {
    let mut at = 0;
    m.visit_mut("", &mut |_, p| {
        if p.kind.trainable() {
            let n = p.numel();
            p.value.copy_from_slice(&x[at..at + n]);
            at += n;
        }
    });
}

fn trainable_grads<M: Module<f64>>(m: &M) -> Vec<f64> {
    let mut g = Vec::new();
    m.visit("", &mut |_, p| {
        if p.kind.trainable() {
            g.extend_from_slice(&p.grad);
        }
    });
    g
}

fn random_tensor(rng: &mut ChaCha8Rng, (t, f, c): (usize, usize, usize)) -> Tensor3<f64> {
    Tensor3::from_fn(t, f, c, |_, _, _| rng.random_range(-1.0..1.0))
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A layer mapping a batch of tensors to a batch of tensors.
pub trait TensorLayer: Module<f64> + Clone {
    fn run(&mut self, xs: &[Tensor3<f64>]) -> Result<Vec<Tensor3<f64>>>;

    /// Train-mode forward then backward with output gradient `dys`; returns
    /// the input gradient and leaves parameter gradients in the layer.
    fn run_grad(&mut self, xs: &[Tensor3<f64>], dys: Vec<Tensor3<f64>>) -> Result<Vec<Tensor3<f64>>>;
}

impl TensorLayer for Conv<f64> {
    fn run(&mut self, xs: &[Tensor3<f64>]) -> Result<Vec<Tensor3<f64>>> {
        self.forward(xs)
    }

    fn run_grad(&mut self, xs: &[Tensor3<f64>], dys: Vec<Tensor3<f64>>) -> Result<Vec<Tensor3<f64>>> {
        Ok(self.backward(xs, &dys, true)?.expect("input gradient"))
    }
}

impl TensorLayer for ConvOp<f64> {
    fn run(&mut self, xs: &[Tensor3<f64>]) -> Result<Vec<Tensor3<f64>>> {
        self.forward(xs)
    }

    fn run_grad(&mut self, xs: &[Tensor3<f64>], dys: Vec<Tensor3<f64>>) -> Result<Vec<Tensor3<f64>>> {
        let (_, cache) = self.forward_train(xs)?;
        Ok(self.backward(xs, cache, &dys, true)?.expect("input gradient"))
    }
}

impl TensorLayer for BatchNorm<f64> {
    fn run(&mut self, xs: &[Tensor3<f64>]) -> Result<Vec<Tensor3<f64>>> {
        Ok(self.forward_train(xs)?.0)
    }

    fn run_grad(&mut self, xs: &[Tensor3<f64>], dys: Vec<Tensor3<f64>>) -> Result<Vec<Tensor3<f64>>> {
        let (_, cache) = self.forward_train(xs)?;
        self.backward(&cache, &dys)
    }
}

impl TensorLayer for SkConv<f64> {
    fn run(&mut self, xs: &[Tensor3<f64>]) -> Result<Vec<Tensor3<f64>>> {
        Ok(self.forward_train(xs)?.0)
    }

    fn run_grad(&mut self, xs: &[Tensor3<f64>], dys: Vec<Tensor3<f64>>) -> Result<Vec<Tensor3<f64>>> {
        let (_, cache) = self.forward_train(xs)?;
        self.backward(xs, cache, dys)
    }
}

impl TensorLayer for RskBlock<f64> {
    fn run(&mut self, xs: &[Tensor3<f64>]) -> Result<Vec<Tensor3<f64>>> {
        Ok(self.forward_train(xs)?.0)
    }

    fn run_grad(&mut self, xs: &[Tensor3<f64>], dys: Vec<Tensor3<f64>>) -> Result<Vec<Tensor3<f64>>> {
        let (_, cache) = self.forward_train(xs)?;
        self.backward(xs, cache, dys)
    }
}

/// `sum(r * layer(xs))` as a function of the inputs followed by the trainable
/// parameters.
pub struct TensorCase<L> {
    layer: L,
    inputs: Vec<Tensor3<f64>>,
    proj: Vec<Tensor3<f64>>,
}

impl<L: TensorLayer> TensorCase<L> {
    pub fn new(mut layer: L, inputs: Vec<Tensor3<f64>>, rng: &mut ChaCha8Rng) -> Result<Self> {
        let ys = layer.clone().run(&inputs)?;
        let proj = ys.iter().map(|y| random_tensor(rng, y.dims())).collect();
        layer.zero_grad();
        Ok(Self { layer, inputs, proj })
    }

    fn load(&self, x: &[f64]) -> (L, Vec<Tensor3<f64>>) {
        let mut at = 0;
        let xs = self
            .inputs
            .iter()
            .map(|t| {
                let n = t.len();
                let v = Tensor3::from_vec(t.t(), t.f(), t.c(), x[at..at + n].to_vec()).expect("input shape");
                at += n;
                v
            })
            .collect();
        let mut layer = self.layer.clone();
        set_trainable(&mut layer, &x[at..]);
        (layer, xs)
    }
}

impl<L: TensorLayer> Differentiable for TensorCase<L> {
    fn point(&self) -> Vec<f64> {
        let mut p: Vec<f64> = self.inputs.iter().flat_map(|t| t.data().iter().copied()).collect();
        p.extend(trainable_values(&self.layer));
        p
    }

    fn value(&mut self, x: &[f64]) -> Result<f64> {
        let (mut layer, xs) = self.load(x);
        let ys = layer.run(&xs)?;
        Ok(ys.iter().zip(&self.proj).map(|(y, r)| dot(y.data(), r.data())).sum())
    }

    fn gradient(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        let (mut layer, xs) = self.load(x);
        let dxs = layer.run_grad(&xs, self.proj.clone())?;
        let mut g: Vec<f64> = dxs.iter().flat_map(|t| t.data().iter().copied()).collect();
        g.extend(trainable_grads(&layer));
        Ok(g)
    }
}

/// Row-batched vector layers.
pub trait VectorLayer: Module<f64> + Clone {
    fn run(&self, xs: &[f64], rows: usize) -> Result<Vec<f64>>;

    fn run_grad(&mut self, xs: &[f64], rows: usize, dys: &[f64]) -> Result<Vec<f64>>;
}

impl VectorLayer for Linear<f64> {
    fn run(&self, xs: &[f64], rows: usize) -> Result<Vec<f64>> {
        self.forward(xs, rows)
    }

    fn run_grad(&mut self, xs: &[f64], rows: usize, dys: &[f64]) -> Result<Vec<f64>> {
        self.backward(xs, rows, dys)
    }
}

impl VectorLayer for EmbeddingHead<f64> {
    fn run(&self, xs: &[f64], rows: usize) -> Result<Vec<f64>> {
        self.forward(xs, rows)
    }

    fn run_grad(&mut self, xs: &[f64], rows: usize, dys: &[f64]) -> Result<Vec<f64>> {
        let (_, cache) = self.forward_train(xs, rows)?;
        self.backward(xs, rows, cache, dys)
    }
}

pub struct VectorCase<L> {
    layer: L,
    inputs: Vec<f64>,
    rows: usize,
    proj: Vec<f64>,
}

impl<L: VectorLayer> VectorCase<L> {
    pub fn new(mut layer: L, inputs: Vec<f64>, rows: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let n = layer.run(&inputs, rows)?.len();
        layer.zero_grad();
        Ok(Self { layer, inputs, rows, proj: random_vec(rng, n) })
    }

    fn load(&self, x: &[f64]) -> L {
        let mut layer = self.layer.clone();
        set_trainable(&mut layer, &x[self.inputs.len()..]);
        layer
    }
}

impl<L: VectorLayer> Differentiable for VectorCase<L> {
    fn point(&self) -> Vec<f64> {
        let mut p = self.inputs.clone();
        p.extend(trainable_values(&self.layer));
        p
    }

    fn value(&mut self, x: &[f64]) -> Result<f64> {
        let layer = self.load(x);
        Ok(dot(&layer.run(&x[..self.inputs.len()], self.rows)?, &self.proj))
    }

    fn gradient(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        let mut layer = self.load(x);
        let mut g = layer.run_grad(&x[..self.inputs.len()], self.rows, &self.proj)?;
        g.extend(trainable_grads(&layer));
        Ok(g)
    }
}

/// Mean and standard deviation pooling of one `t x n` matrix.
pub struct StatsPoolCase {
    x: Vec<f64>,
    t: usize,
    n: usize,
    proj: Vec<f64>,
}

impl Differentiable for StatsPoolCase {
    fn point(&self) -> Vec<f64> {
        self.x.clone()
    }

    fn value(&mut self, x: &[f64]) -> Result<f64> {
        Ok(dot(&stats_pool(x, self.t, self.n)?, &self.proj))
    }

    fn gradient(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        stats_pool_backward(x, self.t, self.n, &self.proj)
    }
}

/// Multi-stage pooling over four stage outputs of different shapes.
pub struct MtspCase {
    stages: Vec<Tensor3<f64>>,
    proj: Vec<f64>,
}

impl MtspCase {
    fn stages(&self, x: &[f64]) -> Vec<Tensor3<f64>> {
        let mut at = 0;
        self.stages
            .iter()
            .map(|s| {
                let v = Tensor3::from_vec(s.t(), s.f(), s.c(), x[at..at + s.len()].to_vec()).expect("stage shape");
                at += s.len();
                v
            })
            .collect()
    }
}

impl Differentiable for MtspCase {
    fn point(&self) -> Vec<f64> {
        self.stages.iter().flat_map(|s| s.data().iter().copied()).collect()
    }

    fn value(&mut self, x: &[f64]) -> Result<f64> {
        Ok(dot(&pool(PoolKind::Mtsp, &self.stages(x))?.data, &self.proj))
    }

    fn gradient(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        let grads = pool_backward(PoolKind::Mtsp, &self.stages(x), &self.proj)?;
        Ok(grads.iter().flat_map(|g| g.data().iter().copied()).collect())
    }
}

/// The margin loss itself, over embeddings and class prototypes.
pub struct AmSoftmaxCase {
    head: AmSoftmax<f64>,
    emb: Vec<f64>,
    labels: Vec<usize>,
}

impl AmSoftmaxCase {
    fn load(&self, x: &[f64]) -> AmSoftmax<f64> {
        let mut head = self.head.clone();
        head.weight.value.copy_from_slice(&x[self.emb.len()..]);
        head.weight.zero_grad();
        head
    }
}

impl Differentiable for AmSoftmaxCase {
    fn point(&self) -> Vec<f64> {
        let mut p = self.emb.clone();
        p.extend_from_slice(&self.head.weight.value);
        p
    }

    fn value(&mut self, x: &[f64]) -> Result<f64> {
        self.load(x).loss(&x[..self.emb.len()], &self.labels)
    }

    fn gradient(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        let mut head = self.load(x);
        let (_, mut g) = head.loss_and_grad(&x[..self.emb.len()], &self.labels)?;
        g.extend_from_slice(&head.weight.grad);
        Ok(g)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub name: &'static str,
    pub report: GradCheckReport,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < GRAD_TOL
    }
}

fn conv_case(name: &'static str, spec: ConvSpec, dims: (usize, usize), rng: &mut ChaCha8Rng) -> Result<(&'static str, Box<dyn Differentiable>)> {
    let layer = Conv::<f64>::new(spec, rng)?;
    let xs = (0..2).map(|_| random_tensor(rng, (dims.0, dims.1, spec.in_ch))).collect();
    Ok((name, Box::new(TensorCase::new(layer, xs, rng)?)))
}

/// Builds every case of the suite from one seed.
pub fn build_cases(seed: u64) -> Result<Vec<(&'static str, Box<dyn Differentiable>)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let mut cases: Vec<(&'static str, Box<dyn Differentiable>)> = vec![
        conv_case("conv_standard", ConvSpec::new(3, 3, 4, 1, 1, 1)?, (5, 6), rng)?,
        conv_case("conv_strided", ConvSpec::new(3, 3, 4, 2, 1, 1)?, (5, 6), rng)?,
        conv_case("conv_dilated", ConvSpec::new(3, 3, 4, 1, 2, 1)?, (6, 7), rng)?,
        conv_case("conv_grouped", ConvSpec::new(3, 4, 6, 1, 1, 2)?, (5, 5), rng)?,
        conv_case("conv_depthwise", ConvSpec::new(3, 4, 4, 1, 1, 4)?, (5, 6), rng)?,
    ];

    let sep = ConvOp::<f64>::build(ConvKind::DepthwiseSeparable, 3, 3, 5, 1, 1, rng)?;
    let xs = (0..2).map(|_| random_tensor(rng, (4, 5, 3))).collect();
    cases.push(("conv_separable", Box::new(TensorCase::new(sep, xs, rng)?)));

    let mut bn = BatchNorm::<f64>::new(3);
    bn.gamma.value = random_vec(rng, 3).iter().map(|g| 1.0 + 0.5 * g).collect();
    bn.beta.value = random_vec(rng, 3);
    let xs = (0..3).map(|_| random_tensor(rng, (3, 2, 3))).collect();
    cases.push(("batch_norm", Box::new(TensorCase::new(bn, xs, rng)?)));

    let lin = Linear::<f64>::new(6, 4, true, ParamKind::Linear, rng);
    let xs = random_vec(rng, 3 * 6);
    cases.push(("linear", Box::new(VectorCase::new(lin, xs, 3, rng)?)));

    let sk = SkConv::<f64>::new(ConvKind::Standard, 3, 4, 1, rng)?;
    let xs = (0..3).map(|_| random_tensor(rng, (4, 4, 3))).collect();
    cases.push(("sk_attention", Box::new(TensorCase::new(sk, xs, rng)?)));

    let block = RskBlock::<f64>::new(ConvKind::Standard, 3, 4, 2, rng)?;
    let xs = (0..3).map(|_| random_tensor(rng, (4, 4, 3))).collect();
    cases.push(("rsk_block", Box::new(TensorCase::new(block, xs, rng)?)));

    let (t, n) = (7, 5);
    let x = random_vec(rng, t * n);
    let proj = random_vec(rng, 2 * n);
    cases.push(("stats_pool", Box::new(StatsPoolCase { x, t, n, proj })));

    let stages: Vec<Tensor3<f64>> =
        [(8, 4, 2), (4, 2, 3), (2, 1, 4), (2, 1, 5)].into_iter().map(|d| random_tensor(rng, d)).collect();
    let dim = PoolKind::Mtsp.output_dim(&stages.iter().map(|s| (s.f(), s.c())).collect::<Vec<_>>());
    let proj = random_vec(rng, dim);
    cases.push(("mtsp_pool", Box::new(MtspCase { stages, proj })));

    let am = AmSoftmax::<f64>::new(5, 4, 30.0, 0.2, rng)?;
    let emb = random_vec(rng, 3 * 4);
    cases.push(("am_softmax", Box::new(AmSoftmaxCase { head: am, emb, labels: vec![0, 3, 1] })));

    let head = EmbeddingHead::<f64>::new(HeadKind::LowRank(3), 8, 5, rng)?;
    let xs = random_vec(rng, 2 * 8);
    cases.push(("low_rank_head", Box::new(VectorCase::new(head, xs, 2, rng)?)));

    Ok(cases)
}

/// Runs the whole suite, in case order.
pub fn run_suite(seed: u64) -> Result<Vec<CaseResult>> {
    build_cases(seed)?
        .into_iter()
        .map(|(name, mut case)| {
            let report = grad_check(case.as_mut())
                .map_err(|e| Error::Numerical(format!("gradient check '{name}' failed to run: {e}")))?;
            Ok(CaseResult { name, report })
        })
        .collect()
}
