//! Learnable parameter storage and the path-addressed layer registry.

use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamKind {
    Conv,
    Bn,
    Linear,
    Attention,
    Classifier,
    /// Batch-norm running statistics: checkpointed, never counted or trained.
    BnStat,
}

impl ParamKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamKind::Conv => "conv",
            ParamKind::Bn => "bn",
            ParamKind::Linear => "linear",
            ParamKind::Attention => "attention",
            ParamKind::Classifier => "classifier",
            ParamKind::BnStat => "bn_stat",
        }
    }

    pub fn trainable(self) -> bool {
        self != ParamKind::BnStat
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn new(kind: ParamKind, shape: Vec<usize>, value: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = if kind.trainable() { vec![T::zero(); value.len()] } else { Vec::new() };
        Self { kind, shape, value, grad }
    }

    pub fn filled(kind: ParamKind, shape: Vec<usize>, v: T) -> Self {
        let n = shape.iter().product();
        Self::new(kind, shape, vec![v; n])
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Anything that owns parameters. Visiting order is fixed and defines the
/// checkpoint record order and the optimizer's state layout.
pub trait Module<T: Real> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>));

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| {
            if p.kind.trainable() {
                n += p.numel()
            }
        });
        n
    }
}
