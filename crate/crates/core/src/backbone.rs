//! Full networks: a stem, four residual stages, pooling, the embedding head
//! and the training classifier.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::head::{validate_rank, AmSoftmax, EmbeddingHead, HeadKind, AM_MARGIN, AM_SCALE};
use crate::layers::{ConvBn, ConvBnCache, ConvKind, ConvOp};
use crate::param::{join, Module, Param};
use crate::pooling::{pool, pool_backward, PoolKind};
use crate::real::Real;
use crate::sk::{projection, residual_sum, RskBlock, RskBlockCache};
use crate::tensor::Tensor3;

/// Shortest input that the three stride-2 stages accept.
pub const MIN_FRAMES: usize = 16;
pub const DEFAULT_FREQ_BINS: usize = 40;
pub const DEFAULT_CLASSES: usize = 5994;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Arch {
    RskNet,
    ResNet34,
    /// Dilation 2 in every block.
    DResNet34V1,
    /// Dilation 2 in stage 3 and 4 in stage 4.
    DResNet34V2,
}

impl Arch {
    pub fn as_str(self) -> &'static str {
        match self {
            Arch::RskNet => "rsknet",
            Arch::ResNet34 => "resnet34",
            Arch::DResNet34V1 => "dresnet34_1",
            Arch::DResNet34V2 => "dresnet34_2",
        }
    }

    fn stage_dilation(self, stage: usize) -> usize {
        match (self, stage) {
            (Arch::DResNet34V1, _) => 2,
            (Arch::DResNet34V2, 2) => 2,
            (Arch::DResNet34V2, 3) => 4,
            _ => 1,
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rsknet" => Ok(Arch::RskNet),
            "resnet34" => Ok(Arch::ResNet34),
            "dresnet34_1" => Ok(Arch::DResNet34V1),
            "dresnet34_2" => Ok(Arch::DResNet34V2),
            _ => Err(Error::config(format!(
                "unknown arch '{s}' (expected rsknet, resnet34, dresnet34_1 or dresnet34_2)"
            ))),
        }
    }
}

impl fmt::Display for ConvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConvKind::Standard => f.write_str("standard"),
            ConvKind::DepthwiseSeparable => f.write_str("depthwise_separable"),
            ConvKind::Grouped(g) => write!(f, "grouped:{g}"),
        }
    }
}

impl FromStr for ConvKind {
    type Err = Error;

    /// Accepts `standard`, `depthwise_separable` (or `dsc`) and `grouped:<g>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => return Ok(ConvKind::Standard),
            "depthwise_separable" | "dsc" => return Ok(ConvKind::DepthwiseSeparable),
            _ => {}
        }
        let g = s
            .strip_prefix("grouped")
            .map(|r| r.trim_start_matches([':', '(']).trim_end_matches(')'))
            .ok_or_else(|| Error::config(format!("unknown conv kind '{s}'")))?;
        match g.parse::<usize>() {
            Ok(g) if g >= 1 => Ok(ConvKind::Grouped(g)),
            _ => Err(Error::config(format!("group count '{g}' is not a positive integer"))),
        }
    }
}

fn parse_list(key: &str, v: &str) -> Result<[usize; 4]> {
    let xs: Vec<usize> = v
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::config(format!("{key}: '{v}' is not a list of integers")))?;
    xs.try_into().map_err(|_| Error::config(format!("{key}: expected 4 comma-separated values")))
}

fn parse_num(key: &str, v: &str) -> Result<usize> {
    v.trim().parse().map_err(|_| Error::config(format!("{key}: '{v}' is not a non-negative integer")))
}

/// Declarative description of a network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub arch: Arch,
    pub stage_depths: [usize; 4],
    pub stage_widths: [usize; 4],
    pub conv_kind: ConvKind,
    pub pooling: PoolKind,
    pub head: HeadKind,
    pub embed_dim: usize,
    pub num_classes: usize,
    pub freq_bins: usize,
    pub am_scale: f64,
    pub am_margin: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::rsknet_mtsp()
    }
}

impl ModelConfig {
    pub const KEYS: [&'static str; 11] = [
        "arch",
        "stage_depths",
        "stage_widths",
        "conv_kind",
        "pooling",
        "head",
        "embed_dim",
        "num_classes",
        "freq_bins",
        "am_scale",
        "am_margin",
    ];

    pub fn rsknet_mtsp() -> Self {
        Self {
            arch: Arch::RskNet,
            stage_depths: [3, 4, 6, 3],
            stage_widths: [32, 64, 128, 256],
            conv_kind: ConvKind::Standard,
            pooling: PoolKind::Mtsp,
            head: HeadKind::Full,
            embed_dim: 256,
            num_classes: DEFAULT_CLASSES,
            freq_bins: DEFAULT_FREQ_BINS,
            am_scale: AM_SCALE,
            am_margin: AM_MARGIN,
        }
    }

    pub fn resnet34_sp() -> Self {
        Self { arch: Arch::ResNet34, pooling: PoolKind::Sp, ..Self::rsknet_mtsp() }
    }

    /// The light model: separable convolutions with a rank-150 head.
    pub fn rsknet_mtsp_l() -> Self {
        Self { conv_kind: ConvKind::DepthwiseSeparable, head: HeadKind::LowRank(150), ..Self::rsknet_mtsp() }
    }

    pub const PRESETS: [&'static str; 4] = ["rsknet_mtsp", "resnet34_sp", "rsknet_mtsp_l", "rsknet_mtsp_lite"];

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "rsknet_mtsp" => Ok(Self::rsknet_mtsp()),
            "resnet34_sp" => Ok(Self::resnet34_sp()),
            "rsknet_mtsp_l" => Ok(Self::rsknet_mtsp_l()),
            "rsknet_mtsp_lite" => Ok(Self::rsknet_mtsp().lite()),
            _ => Err(Error::config(format!("unknown model preset '{name}' (expected one of {})", Self::PRESETS.join(", ")))),
        }
    }

    /// Every stage width halved.
    pub fn lite(mut self) -> Self {
        self.stage_widths = self.stage_widths.map(|w| w / 2);
        self
    }

    pub fn stage_freqs(&self) -> [usize; 4] {
        let mut f = self.freq_bins;
        let mut out = [0; 4];
        for (i, o) in out.iter_mut().enumerate() {
            if i > 0 {
                f = f.div_ceil(2);
            }
            *o = f;
        }
        out
    }

    pub fn pooled_dim(&self) -> usize {
        let shapes: Vec<(usize, usize)> = self.stage_freqs().into_iter().zip(self.stage_widths).collect();
        self.pooling.output_dim(&shapes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_depths.contains(&0) {
            return Err(Error::config("every stage needs at least one block"));
        }
        if self.stage_widths[0] == 0 || self.stage_widths.windows(2).any(|w| w[1] != 2 * w[0]) {
            return Err(Error::config(format!(
                "stage widths {:?} must double from stage to stage",
                self.stage_widths
            )));
        }
        if let ConvKind::Grouped(g) = self.conv_kind {
            if g == 0 || self.stage_widths.iter().any(|w| w % g != 0) {
                return Err(Error::config(format!("{g} groups do not divide widths {:?}", self.stage_widths)));
            }
        }
        if self.freq_bins == 0 || self.embed_dim == 0 {
            return Err(Error::config("freq_bins and embed_dim must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be at least 2"));
        }
        if let HeadKind::LowRank(p) = self.head {
            validate_rank(p, self.pooled_dim(), self.embed_dim)?;
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let list = |xs: [usize; 4]| xs.map(|x| x.to_string()).join(",");
        let vals = [
            self.arch.to_string(),
            list(self.stage_depths),
            list(self.stage_widths),
            self.conv_kind.to_string(),
            self.pooling.to_string(),
            self.head.to_string(),
            self.embed_dim.to_string(),
            self.num_classes.to_string(),
            self.freq_bins.to_string(),
            self.am_scale.to_string(),
            self.am_margin.to_string(),
        ];
        Self::KEYS.iter().map(|k| k.to_string()).zip(vals).collect()
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "arch" => self.arch = v.parse()?,
            "stage_depths" => self.stage_depths = parse_list(key, v)?,
            "stage_widths" => self.stage_widths = parse_list(key, v)?,
            "conv_kind" => self.conv_kind = v.parse()?,
            "pooling" => self.pooling = v.parse()?,
            "head" => self.head = v.parse()?,
            "embed_dim" => self.embed_dim = parse_num(key, v)?,
            "num_classes" => self.num_classes = parse_num(key, v)?,
            "freq_bins" => self.freq_bins = parse_num(key, v)?,
            "am_scale" | "am_margin" => {
                let x: f64 = v.parse().map_err(|_| Error::config(format!("{key}: '{v}' is not a number")))?;
                if key == "am_scale" {
                    self.am_scale = x
                } else {
                    self.am_margin = x
                }
            }
            _ => return Err(Error::config(format!("unknown model key '{key}'"))),
        }
        Ok(())
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut cfg = Self::rsknet_mtsp();
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Two 3x3 convolutions with a residual connection.
#[derive(Debug, Clone)]
pub struct BasicBlock<T> {
    pub conv1: ConvBn<T>,
    pub conv2: ConvBn<T>,
    pub shortcut: Option<ConvBn<T>>,
}

pub struct BasicBlockCache<T> {
    h: Vec<Tensor3<T>>,
    c1: ConvBnCache<T>,
    c2: ConvBnCache<T>,
    shortcut: Option<ConvBnCache<T>>,
    y: Vec<Tensor3<T>>,
}

impl<T: Real> BasicBlock<T> {
    pub fn new(kind: ConvKind, in_ch: usize, out_ch: usize, stride: usize, dilation: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            conv1: ConvBn::new(ConvOp::build(kind, 3, in_ch, out_ch, stride, dilation, rng)?, true),
            conv2: ConvBn::new(ConvOp::build(kind, 3, out_ch, out_ch, 1, dilation, rng)?, false),
            shortcut: projection(in_ch, out_ch, stride, rng)?,
        })
    }

    pub fn forward(&self, xs: &[Tensor3<T>]) -> Result<Vec<Tensor3<T>>> {
        let mut y = self.conv2.forward(&self.conv1.forward(xs)?)?;
        match &self.shortcut {
            Some(sc) => residual_sum(&mut y, &sc.forward(xs)?)?,
            None => residual_sum(&mut y, xs)?,
        }
        Ok(y)
    }

    pub fn forward_train(&mut self, xs: &[Tensor3<T>]) -> Result<(Vec<Tensor3<T>>, BasicBlockCache<T>)> {
        let (h, c1) = self.conv1.forward_train(xs)?;
        let (mut y, c2) = self.conv2.forward_train(&h)?;
        let shortcut = match &mut self.shortcut {
            Some(sc) => {
                let (s, c) = sc.forward_train(xs)?;
                residual_sum(&mut y, &s)?;
                Some(c)
            }
            None => {
                residual_sum(&mut y, xs)?;
                None
            }
        };
        Ok((y.clone(), BasicBlockCache { h, c1, c2, shortcut, y }))
    }

    pub fn backward(&mut self, xs: &[Tensor3<T>], cache: BasicBlockCache<T>, dys: Vec<Tensor3<T>>) -> Result<Vec<Tensor3<T>>> {
        let dpre: Vec<Tensor3<T>> =
            cache.y.iter().zip(&dys).map(|(y, d)| crate::kernels::activation::relu_backward(y, d)).collect();
        let dh = self.conv2.backward(&cache.h, cache.c2, dpre.clone(), true)?.expect("input gradient");
        let mut dx = self.conv1.backward(xs, cache.c1, dh, true)?.expect("input gradient");
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

impl<T: Real> Module<T> for BasicBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        if let Some(sc) = &self.shortcut {
            sc.visit(&join(prefix, "shortcut"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        if let Some(sc) = &mut self.shortcut {
            sc.visit_mut(&join(prefix, "shortcut"), f);
        }
    }
}

#[derive(Debug, Clone)]
pub enum Block<T> {
    Rsk(RskBlock<T>),
    Basic(BasicBlock<T>),
}

pub enum BlockCache<T> {
    Rsk(RskBlockCache<T>),
    Basic(BasicBlockCache<T>),
}

impl<T: Real> Block<T> {
    pub fn forward(&self, xs: &[Tensor3<T>]) -> Result<Vec<Tensor3<T>>> {
        match self {
            Block::Rsk(b) => b.forward(xs),
            Block::Basic(b) => b.forward(xs),
        }
    }

    pub fn forward_train(&mut self, xs: &[Tensor3<T>]) -> Result<(Vec<Tensor3<T>>, BlockCache<T>)> {
        Ok(match self {
            Block::Rsk(b) => {
                let (y, c) = b.forward_train(xs)?;
                (y, BlockCache::Rsk(c))
            }
            Block::Basic(b) => {
                let (y, c) = b.forward_train(xs)?;
                (y, BlockCache::Basic(c))
            }
        })
    }

    pub fn backward(&mut self, xs: &[Tensor3<T>], cache: BlockCache<T>, dys: Vec<Tensor3<T>>) -> Result<Vec<Tensor3<T>>> {
        match (self, cache) {
            (Block::Rsk(b), BlockCache::Rsk(c)) => b.backward(xs, c, dys),
            (Block::Basic(b), BlockCache::Basic(c)) => b.backward(xs, c, dys),
            _ => Err(Error::shape("block cache does not match block type")),
        }
    }
}

impl<T: Real> Module<T> for Block<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        match self {
            Block::Rsk(b) => b.visit(prefix, f),
            Block::Basic(b) => b.visit(prefix, f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        match self {
            Block::Rsk(b) => b.visit_mut(prefix, f),
            Block::Basic(b) => b.visit_mut(prefix, f),
        }
    }
}

/// Output of each residual stage, in stage order.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOutputs<T> {
    pub stages: Vec<Tensor3<T>>,
}

impl<T> StageOutputs<T> {
    /// One-based stage accessor.
    pub fn x(&self, i: usize) -> &Tensor3<T> {
        &self.stages[i - 1]
    }
}

#[derive(Debug, Clone)]
pub struct Network<T> {
    pub config: ModelConfig,
    pub stem: ConvBn<T>,
    pub stages: Vec<Vec<Block<T>>>,
    pub head: EmbeddingHead<T>,
    pub classifier: AmSoftmax<T>,
}

/// Builds a network with parameters drawn from `seed`.
pub fn build_network<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<Network<T>> {
    Network::new(cfg.clone(), seed)
}

struct TrainTrace<T> {
    stem: ConvBnCache<T>,
    /// `acts[s][b]` is the input of block `b` in stage `s`; the final entry of
    /// each stage is that stage's output.
    acts: Vec<Vec<Vec<Tensor3<T>>>>,
    caches: Vec<Vec<BlockCache<T>>>,
}

impl<T: Real> Network<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = config.stage_widths;
        let stem = ConvBn::new(ConvOp::build(ConvKind::Standard, 3, 1, w[0], 1, 1, &mut rng)?, true);
        let mut stages = Vec::with_capacity(4);
        let mut in_ch = w[0];
        for s in 0..4 {
            let mut blocks = Vec::with_capacity(config.stage_depths[s]);
            for b in 0..config.stage_depths[s] {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                let block = match config.arch {
                    Arch::RskNet => Block::Rsk(RskBlock::new(config.conv_kind, in_ch, w[s], stride, &mut rng)?),
                    arch => Block::Basic(BasicBlock::new(
                        config.conv_kind,
                        in_ch,
                        w[s],
                        stride,
                        arch.stage_dilation(s),
                        &mut rng,
                    )?),
                };
                blocks.push(block);
                in_ch = w[s];
            }
            stages.push(blocks);
        }
        let head = EmbeddingHead::new(config.head, config.pooled_dim(), config.embed_dim, &mut rng)?;
        let classifier = AmSoftmax::new(config.num_classes, config.embed_dim, config.am_scale, config.am_margin, &mut rng)?;
        Ok(Self { config, stem, stages, head, classifier })
    }

    fn check_input(&self, xs: &[Tensor3<T>]) -> Result<()> {
        if xs.is_empty() {
            return Err(Error::Empty("feature batch"));
        }
        for x in xs {
            if x.c() != 1 || x.f() != self.config.freq_bins {
                return Err(Error::shape(format!(
                    "features must be T x {} x 1, got {:?}",
                    self.config.freq_bins,
                    x.dims()
                )));
            }
            if x.t() < MIN_FRAMES {
                return Err(Error::shape(format!("{} frames is shorter than the minimum {MIN_FRAMES}", x.t())));
            }
        }
        Ok(())
    }

    /// Stage outputs of a batch in inference mode, indexed `[stage][sample]`.
    pub fn forward_stages(&self, xs: &[Tensor3<T>]) -> Result<Vec<Vec<Tensor3<T>>>> {
        self.check_input(xs)?;
        let mut h = self.stem.forward(xs)?;
        let mut out = Vec::with_capacity(4);
        for blocks in &self.stages {
            for b in blocks {
                h = b.forward(&h)?;
            }
            out.push(h.clone());
        }
        Ok(out)
    }

    pub fn forward_features(&self, x: &Tensor3<T>) -> Result<StageOutputs<T>> {
        let stages = self.forward_stages(std::slice::from_ref(x))?.into_iter().map(|mut s| s.remove(0)).collect();
        Ok(StageOutputs { stages })
    }

    fn pool_batch(&self, stages: &[Vec<Tensor3<T>>], rows: usize) -> Result<Vec<T>> {
        let mut pooled = Vec::with_capacity(rows * self.head.in_dim());
        for n in 0..rows {
            let per: Vec<Tensor3<T>> = stages.iter().map(|s| s[n].clone()).collect();
            pooled.extend(pool(self.config.pooling, &per)?.data);
        }
        Ok(pooled)
    }

    /// Embeddings of a batch, `rows x embed_dim`, in inference mode.
    pub fn embed_batch(&self, xs: &[Tensor3<T>]) -> Result<Vec<T>> {
        let stages = self.forward_stages(xs)?;
        let pooled = self.pool_batch(&stages, xs.len())?;
        self.head.forward(&pooled, xs.len())
    }

    pub fn embed(&self, x: &Tensor3<T>) -> Result<Vec<T>> {
        self.embed_batch(std::slice::from_ref(x))
    }

    /// Mean classification loss in inference mode.
    pub fn eval_loss(&self, xs: &[Tensor3<T>], labels: &[usize]) -> Result<f64> {
        self.classifier.loss(&self.embed_batch(xs)?, labels)
    }

    fn forward_train_trace(&mut self, xs: &[Tensor3<T>]) -> Result<(Vec<Tensor3<T>>, TrainTrace<T>)> {
        self.check_input(xs)?;
        let (mut h, stem) = self.stem.forward_train(xs)?;
        let mut acts = Vec::with_capacity(4);
        let mut caches = Vec::with_capacity(4);
        for blocks in &mut self.stages {
            let mut stage_acts = Vec::with_capacity(blocks.len() + 1);
            let mut stage_caches = Vec::with_capacity(blocks.len());
            for b in blocks.iter_mut() {
                let (y, c) = b.forward_train(&h)?;
                stage_acts.push(std::mem::replace(&mut h, y));
                stage_caches.push(c);
            }
            stage_acts.push(h.clone());
            acts.push(stage_acts);
            caches.push(stage_caches);
        }
        Ok((h, TrainTrace { stem, acts, caches }))
    }

    /// One training forward/backward pass; returns the mean loss and
    /// accumulates gradients into every parameter.
    pub fn train_step(&mut self, xs: &[Tensor3<T>], labels: &[usize]) -> Result<f64> {
        let rows = xs.len();
        if labels.len() != rows {
            return Err(Error::shape(format!("{rows} inputs but {} labels", labels.len())));
        }
        let (_, mut trace) = self.forward_train_trace(xs)?;
        let stage_outs: Vec<Vec<Tensor3<T>>> = trace.acts.iter().map(|a| a.last().expect("stage output").clone()).collect();
        let pooled = self.pool_batch(&stage_outs, rows)?;
        let (emb, head_cache) = self.head.forward_train(&pooled, rows)?;
        let (loss, demb) = self.classifier.loss_and_grad(&emb, labels)?;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("non-finite training loss {loss}")));
        }
        let dpooled = self.head.backward(&pooled, rows, head_cache, &demb)?;
        let width = self.head.in_dim();
        let mut dstage: Vec<Vec<Tensor3<T>>> = (0..4).map(|_| Vec::with_capacity(rows)).collect();
        for n in 0..rows {
            let per: Vec<Tensor3<T>> = stage_outs.iter().map(|s| s[n].clone()).collect();
            for (s, g) in pool_backward(self.config.pooling, &per, &dpooled[n * width..(n + 1) * width])?.into_iter().enumerate() {
                dstage[s].push(g);
            }
        }
        drop(stage_outs);
        let mut carry: Option<Vec<Tensor3<T>>> = None;
        for s in (0..4).rev() {
            let mut d = std::mem::take(&mut dstage[s]);
            if let Some(c) = carry.take() {
                for (a, b) in d.iter_mut().zip(&c) {
                    a.add_assign(b)?;
                }
            }
            let caches = std::mem::take(&mut trace.caches[s]);
            let acts = std::mem::take(&mut trace.acts[s]);
            for (b, cache) in caches.into_iter().enumerate().rev() {
                d = self.stages[s][b].backward(&acts[b], cache, d)?;
            }
            carry = Some(d);
        }
        self.stem.backward(xs, trace.stem, carry.expect("stem gradient"), false)?;
        Ok(loss)
    }

    /// Parameters of the embedding extractor, excluding the classifier.
    pub fn visit_extractor(&self, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.stem.visit("stem", f);
        for (s, blocks) in self.stages.iter().enumerate() {
            for (b, block) in blocks.iter().enumerate() {
                block.visit(&format!("stage{}.block{}", s + 1, b + 1), f);
            }
        }
        self.head.visit("head", f);
    }
}

impl<T: Real> Module<T> for Network<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.stem.visit(&join(prefix, "stem"), f);
        for (s, blocks) in self.stages.iter().enumerate() {
            for (b, block) in blocks.iter().enumerate() {
                block.visit(&join(prefix, &format!("stage{}.block{}", s + 1, b + 1)), f);
            }
        }
        self.head.visit(&join(prefix, "head"), f);
        self.classifier.visit(&join(prefix, "classifier"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.stem.visit_mut(&join(prefix, "stem"), f);
        for (s, blocks) in self.stages.iter_mut().enumerate() {
            for (b, block) in blocks.iter_mut().enumerate() {
                block.visit_mut(&join(prefix, &format!("stage{}.block{}", s + 1, b + 1)), f);
            }
        }
        self.head.visit_mut(&join(prefix, "head"), f);
        self.classifier.visit_mut(&join(prefix, "classifier"), f);
    }
}
