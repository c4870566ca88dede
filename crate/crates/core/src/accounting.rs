//! Parameter counting over the layer registry.

use std::fmt::Write as _;

use num_rational::Ratio;

use crate::backbone::{ModelConfig, Network};
use crate::head::HeadKind;
use crate::layers::ConvKind;
use crate::error::{Error, Result};
use crate::param::{Module, ParamKind};
use crate::real::Real;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamRow {
    pub path: String,
    pub shape: Vec<usize>,
    pub count: usize,
    pub kind: ParamKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Totals {
    /// Convolution, attention and embedding-head weights.
    pub core: usize,
    pub core_bn: usize,
    pub core_bn_classifier: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Convention {
    Core,
    CoreBn,
    CoreBnClassifier,
}

impl Convention {
    pub const ALL: [Convention; 3] = [Convention::Core, Convention::CoreBn, Convention::CoreBnClassifier];

    pub fn label(self) -> &'static str {
        match self {
            Convention::Core => "core",
            Convention::CoreBn => "core+bn",
            Convention::CoreBnClassifier => "core+bn+classifier",
        }
    }
}

impl Totals {
    pub fn get(&self, c: Convention) -> usize {
        match c {
            Convention::Core => self.core,
            Convention::CoreBn => self.core_bn,
            Convention::CoreBnClassifier => self.core_bn_classifier,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamReport {
    pub rows: Vec<ParamRow>,
    pub totals: Totals,
}

impl ParamReport {
    pub fn from_module<T: Real>(m: &impl Module<T>) -> Self {
        let mut rows = Vec::new();
        m.visit("", &mut |path, p| {
            if p.kind.trainable() {
                rows.push(ParamRow { path: path.to_string(), shape: p.shape.clone(), count: p.numel(), kind: p.kind });
            }
        });
        let mut totals = Totals::default();
        for r in &rows {
            match r.kind {
                ParamKind::Bn => totals.core_bn += r.count,
                ParamKind::Classifier => totals.core_bn_classifier += r.count,
                _ => totals.core += r.count,
            }
        }
        totals.core_bn += totals.core;
        totals.core_bn_classifier += totals.core_bn;
        Self { rows, totals }
    }

    /// Sum of rows whose path starts with `prefix`.
    pub fn count_under(&self, prefix: &str) -> usize {
        self.rows.iter().filter(|r| r.path.starts_with(prefix)).map(|r| r.count).sum()
    }

    pub fn to_text(&self, per_layer: bool) -> String {
        let mut s = String::new();
        if per_layer {
            let w = self.rows.iter().map(|r| r.path.len()).max().unwrap_or(4).max(4);
            let _ = writeln!(s, "{:<w$}  {:<18} {:>10}  kind", "path", "shape", "count");
            for r in &self.rows {
                let _ = writeln!(s, "{:<w$}  {:<18} {:>10}  {}", r.path, shape_str(&r.shape), r.count, r.kind.as_str());
            }
            s.push('\n');
        }
        for c in Convention::ALL {
            let n = self.totals.get(c);
            let _ = writeln!(s, "{:<20} {:>12}  {:>7.2}M", c.label(), n, n as f64 / 1e6);
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("path,shape,count,kind\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.path, shape_str(&r.shape), r.count, r.kind.as_str());
        }
        for c in Convention::ALL {
            let _ = writeln!(s, "total:{},,{},", c.label(), self.totals.get(c));
        }
        s
    }
}

fn shape_str(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

pub fn count_params(cfg: &ModelConfig) -> Result<ParamReport> {
    Ok(ParamReport::from_module(&Network::<f32>::new(cfg.clone(), 0)?))
}

/// Separable over standard parameter ratio, `(jki + io) / (jkio)`.
pub fn dsc_ratio(j: u64, k: u64, i: u64, o: u64) -> Result<Ratio<u64>> {
    if [j, k, i, o].contains(&0) {
        return Err(Error::config("separable ratio needs positive j, k, i, o"));
    }
    Ok(Ratio::new(j * k * i + i * o, j * k * i * o))
}

/// Relative deviation of `count` from `target`.
pub fn relative_gap(count: usize, target: f64) -> f64 {
    (count as f64 - target) / target
}

/// A reported model size for one configuration.
#[derive(Debug, Clone)]
pub struct Reference {
    pub name: &'static str,
    pub config: ModelConfig,
    pub millions: f64,
}

/// The reference configurations with their reported sizes in millions.
pub fn reference_table() -> Vec<Reference> {
    let base = ModelConfig::rsknet_mtsp();
    let r = |name, config, millions| Reference { name, config, millions };
    vec![
        r("rsknet_mtsp", base.clone(), 13.9),
        r("resnet34_sp", ModelConfig::resnet34_sp(), 6.0),
        r("rsknet_mtsp_dsc", ModelConfig { conv_kind: ConvKind::DepthwiseSeparable, ..base.clone() }, 4.9),
        r("rsknet_mtsp_gc4", ModelConfig { conv_kind: ConvKind::Grouped(4), ..base.clone() }, 6.0),
        r("resnet34_dsc", ModelConfig { conv_kind: ConvKind::DepthwiseSeparable, ..ModelConfig::resnet34_sp() }, 1.7),
        r("rsknet_mtsp_p100", ModelConfig { head: HeadKind::LowRank(100), ..base.clone() }, 12.3),
        r("rsknet_mtsp_p150", ModelConfig { head: HeadKind::LowRank(150), ..base.clone() }, 12.9),
        r("rsknet_mtsp_p200", ModelConfig { head: HeadKind::LowRank(200), ..base.clone() }, 13.4),
        r("rsknet_mtsp_l", ModelConfig::rsknet_mtsp_l(), 3.8),
        r("rsknet_mtsp_lite", base.lite(), 3.5),
    ]
}

/// Measured totals and relative gaps of every reference row under one convention.
pub fn table_gaps(rows: &[(Reference, Totals)], c: Convention) -> Vec<f64> {
    rows.iter().map(|(r, t)| relative_gap(t.get(c), r.millions * 1e6)).collect()
}
