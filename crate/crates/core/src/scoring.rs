//! Cosine scoring backend and detection metrics.
//!
//! A trial is accepted iff its score is at least the threshold. Sweeping the
//! threshold over the sorted unique scores and then `+inf` visits every
//! distinct operating point, from accept-all to reject-all.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::checkpoint::Container;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trial {
    pub enroll: String,
    pub test: String,
    pub target: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Score {
    pub enroll: String,
    pub test: String,
    pub score: f64,
    /// Present when the score line carries a fourth label column.
    pub target: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub p_fa: f64,
    pub p_fr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DcfParams {
    pub c_fr: f64,
    pub c_fa: f64,
    pub p_target: f64,
}

impl Default for DcfParams {
    fn default() -> Self {
        Self { c_fr: 1.0, c_fa: 1.0, p_target: 0.01 }
    }
}

impl DcfParams {
    pub fn c_default(&self) -> f64 {
        (self.c_fr * self.p_target).min(self.c_fa * (1.0 - self.p_target))
    }

    pub fn c_det(&self, p: &OperatingPoint) -> f64 {
        self.c_fr * self.p_target * p.p_fr + self.c_fa * (1.0 - self.p_target) * p.p_fa
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Percent.
    pub eer: f64,
    pub min_dcf: f64,
    pub det: Vec<OperatingPoint>,
    pub params: DcfParams,
}

fn unit(v: &[f64], what: &str) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::Degenerate(format!("{what} has zero or non-finite norm")));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

pub fn mean_embedding(embs: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = embs.first().ok_or(Error::Empty("embeddings for the centering mean"))?;
    let mut m = vec![0.0; first.len()];
    for e in embs {
        if e.len() != m.len() {
            return Err(Error::shape("embeddings differ in dimension"));
        }
        m.iter_mut().zip(e).for_each(|(a, b)| *a += b);
    }
    m.iter_mut().for_each(|a| *a /= embs.len() as f64);
    Ok(m)
}

/// Centers by `mean` and scales to unit length.
pub fn postprocess(e: &[f64], mean: &[f64]) -> Result<Vec<f64>> {
    if e.len() != mean.len() {
        return Err(Error::shape(format!("embedding of {} against mean of {}", e.len(), mean.len())));
    }
    let c: Vec<f64> = e.iter().zip(mean).map(|(a, b)| a - b).collect();
    unit(&c, "centered embedding")
}

pub fn cosine_score(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine of vectors with different lengths"));
    }
    let (ua, ub) = (unit(a, "enrollment embedding")?, unit(b, "test embedding")?);
    Ok(ua.iter().zip(&ub).map(|(x, y)| x * y).sum::<f64>().clamp(-1.0, 1.0))
}

fn counts(labels: &[bool]) -> Result<(usize, usize)> {
    let nt = labels.iter().filter(|&&l| l).count();
    let nn = labels.len() - nt;
    if nt == 0 || nn == 0 {
        return Err(Error::Degenerate(format!("metrics need both trial kinds, got {nt} target and {nn} nontarget")));
    }
    Ok((nt, nn))
}

/// One operating point per unique score (ascending), followed by the
/// reject-all point at `+inf`.
pub fn operating_points(scores: &[f64], labels: &[bool]) -> Result<Vec<OperatingPoint>> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Degenerate(format!("non-finite score {s}")));
    }
    let (nt, nn) = counts(labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut points = Vec::new();
    let (mut tgt_below, mut non_below) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        points.push(OperatingPoint {
            threshold: s,
            p_fa: (nn - non_below) as f64 / nn as f64,
            p_fr: tgt_below as f64 / nt as f64,
        });
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tgt_below += 1;
            } else {
                non_below += 1;
            }
            i += 1;
        }
    }
    points.push(OperatingPoint { threshold: f64::INFINITY, p_fa: 0.0, p_fr: 1.0 });
    Ok(points)
}

/// Crossing of the miss and false-alarm curves, interpolated linearly between
/// the two operating points that bracket it.
pub fn eer_from_points(points: &[OperatingPoint]) -> f64 {
    let d = |p: &OperatingPoint| p.p_fr - p.p_fa;
    let i = points.iter().position(|p| d(p) >= 0.0).expect("reject-all point has p_fr - p_fa = 1");
    let cur = &points[i];
    if d(cur) == 0.0 || i == 0 {
        return 100.0 * cur.p_fr;
    }
    let prev = &points[i - 1];
    let lambda = -d(prev) / (d(cur) - d(prev));
    100.0 * (prev.p_fr + lambda * (cur.p_fr - prev.p_fr))
}

pub fn min_dcf_from_points(points: &[OperatingPoint], params: &DcfParams) -> f64 {
    points.iter().map(|p| params.c_det(p)).fold(f64::INFINITY, f64::min) / params.c_default()
}

pub fn compute_eer(scores: &[f64], labels: &[bool]) -> Result<f64> {
    Ok(eer_from_points(&operating_points(scores, labels)?))
}

pub fn compute_min_dcf(scores: &[f64], labels: &[bool], params: &DcfParams) -> Result<f64> {
    if !(params.p_target > 0.0 && params.p_target < 1.0 && params.c_fr > 0.0 && params.c_fa > 0.0) {
        return Err(Error::config("detection cost needs 0 < p_target < 1 and positive costs"));
    }
    Ok(min_dcf_from_points(&operating_points(scores, labels)?, params))
}

/// Operating points at each unique score.
pub fn det_points(scores: &[f64], labels: &[bool]) -> Result<Vec<OperatingPoint>> {
    let mut p = operating_points(scores, labels)?;
    p.pop();
    Ok(p)
}

pub fn evaluate(scores: &[f64], labels: &[bool], params: &DcfParams) -> Result<EvalReport> {
    let points = operating_points(scores, labels)?;
    let eer = eer_from_points(&points);
    let min_dcf = compute_min_dcf(scores, labels, params)?;
    let mut det = points;
    det.pop();
    Ok(EvalReport { eer, min_dcf, det, params: *params })
}

pub fn det_csv(points: &[OperatingPoint]) -> String {
    let mut s = String::from("threshold,p_fa,p_fr\n");
    for p in points {
        let _ = writeln!(s, "{},{},{}", p.threshold, p.p_fa, p.p_fr);
    }
    s
}

fn parse_label(tok: &str, line: usize) -> Result<bool> {
    match tok {
        "target" => Ok(true),
        "nontarget" => Ok(false),
        _ => Err(Error::format(format!("line {line}: label '{tok}' is neither target nor nontarget"))),
    }
}

fn fields(line: &str) -> Vec<&str> {
    line.split_whitespace().collect()
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

pub fn parse_trials(text: &str) -> Result<Vec<Trial>> {
    content_lines(text)
        .map(|(n, l)| match fields(l).as_slice() {
            [e, t, lab] => Ok(Trial { enroll: e.to_string(), test: t.to_string(), target: parse_label(lab, n)? }),
            f => Err(Error::format(format!("line {n}: expected '<enroll> <test> <target|nontarget>', got {} fields", f.len()))),
        })
        .collect()
}

pub fn parse_scores(text: &str) -> Result<Vec<Score>> {
    content_lines(text)
        .map(|(n, l)| {
            let f = fields(l);
            if f.len() != 3 && f.len() != 4 {
                return Err(Error::format(format!("line {n}: expected '<enroll> <test> <score>', got {} fields", f.len())));
            }
            let score: f64 = f[2].parse().map_err(|_| Error::format(format!("line {n}: score '{}' is not a number", f[2])))?;
            if !score.is_finite() {
                return Err(Error::format(format!("line {n}: score is not finite")));
            }
            let target = f.get(3).map(|t| parse_label(t, n)).transpose()?;
            Ok(Score { enroll: f[0].to_string(), test: f[1].to_string(), score, target })
        })
        .collect()
}

pub fn format_scores(scores: &[Score]) -> String {
    let mut s = String::new();
    for x in scores {
        let _ = writeln!(s, "{} {} {}", x.enroll, x.test, x.score);
    }
    s
}

/// Pairs each score with its label, taken from `trials` when given and from
/// the score file's own label column otherwise.
pub fn label_scores(scores: &[Score], trials: Option<&[Trial]>) -> Result<(Vec<f64>, Vec<bool>)> {
    let lookup: Option<HashMap<(&str, &str), bool>> =
        trials.map(|ts| ts.iter().map(|t| ((t.enroll.as_str(), t.test.as_str()), t.target)).collect());
    let mut xs = Vec::with_capacity(scores.len());
    let mut ys = Vec::with_capacity(scores.len());
    for s in scores {
        let label = match &lookup {
            Some(m) => *m.get(&(s.enroll.as_str(), s.test.as_str())).ok_or_else(|| {
                Error::format(format!("score for ({}, {}) has no matching trial", s.enroll, s.test))
            })?,
            None => s.target.ok_or_else(|| {
                Error::format(format!("score for ({}, {}) carries no label and no trial list was given", s.enroll, s.test))
            })?,
        };
        xs.push(s.score);
        ys.push(label);
    }
    Ok((xs, ys))
}

/// Embedding archive: one record per utterance id.
pub fn embeddings_to_container<'a>(items: impl IntoIterator<Item = (&'a str, &'a [f32])>) -> Container {
    let mut c = Container::new("embeddings");
    for (id, e) in items {
        c.push(id, vec![e.len()], e.to_vec());
    }
    c
}

pub fn embeddings_from_container(c: &Container) -> Result<HashMap<String, Vec<f64>>> {
    c.expect_kind("embeddings")?;
    let mut out = HashMap::with_capacity(c.records.len());
    for r in &c.records {
        if r.shape.len() != 1 {
            return Err(Error::format(format!("embedding '{}' is not a vector", r.path)));
        }
        if out.insert(r.path.clone(), r.data.iter().map(|&v| v as f64).collect()).is_some() {
            return Err(Error::format(format!("duplicate embedding '{}'", r.path)));
        }
    }
    Ok(out)
}

/// Reads a plain-text mean vector (whitespace separated) or a one-record
/// container.
pub fn read_mean(path: &Path) -> Result<Vec<f64>> {
    if let Ok(c) = Container::load(path) {
        let r = c.records.first().ok_or_else(|| Error::format("mean file holds no vector"))?;
        return Ok(r.data.iter().map(|&v| v as f64).collect());
    }
    let text = std::fs::read_to_string(path)?;
    text.split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| Error::format(format!("mean value '{t}' is not a number"))))
        .collect()
}
