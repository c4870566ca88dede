//! PCM audio to normalized log mel features: framing and filterbank, energy
//! VAD, sliding mean normalization and fixed-length crops.

pub mod fbank;
pub mod wav;

use std::path::Path;

use rand::Rng;

use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::tensor::Tensor3;

pub use fbank::Fbank;
pub use wav::{read_wav, write_wav, Waveform, SAMPLE_RATE};

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub frame_len_ms: f64,
    pub frame_shift_ms: f64,
    pub n_mels: usize,
    pub preemph: f64,
    pub log_floor: f64,
    /// Frames more than this many dB below the loudest frame are dropped.
    pub vad_threshold_db: f64,
    /// Mean-square energy a frame must exceed regardless of the loudest frame.
    pub vad_floor: f64,
    pub cmn_window: usize,
    pub crop_frames: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate: SAMPLE_RATE,
            frame_len_ms: 25.0,
            frame_shift_ms: 10.0,
            n_mels: 40,
            preemph: 0.97,
            log_floor: 1e-10,
            vad_threshold_db: 30.0,
            vad_floor: 1e-10,
            cmn_window: 300,
            crop_frames: 200,
        }
    }
}

impl FeatureConfig {
    pub const KEYS: [&'static str; 10] = [
        "sample_rate",
        "frame_len_ms",
        "frame_shift_ms",
        "n_mels",
        "preemph",
        "log_floor",
        "vad_threshold_db",
        "vad_floor",
        "cmn_window",
        "crop_frames",
    ];

    pub fn window_samples(&self) -> usize {
        (self.sample_rate as f64 * self.frame_len_ms / 1000.0).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.sample_rate as f64 * self.frame_shift_ms / 1000.0).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate < 8000 {
            return Err(Error::config(format!("sample rate {} is below 8000 Hz", self.sample_rate)));
        }
        if self.window_samples() < 2 || self.hop_samples() == 0 {
            return Err(Error::config("frame length and shift must cover at least one sample"));
        }
        if self.n_mels == 0 || self.cmn_window == 0 || self.crop_frames == 0 {
            return Err(Error::config("n_mels, cmn_window and crop_frames must be positive"));
        }
        if !(self.log_floor > 0.0 && self.vad_floor > 0.0 && self.vad_threshold_db >= 0.0) {
            return Err(Error::config("log_floor and vad_floor must be positive"));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let num = || v.parse::<f64>().map_err(|_| Error::config(format!("{key}: '{v}' is not a number")));
        let int = || v.parse::<usize>().map_err(|_| Error::config(format!("{key}: '{v}' is not an integer")));
        match key {
            "sample_rate" => {
                self.sample_rate = v.parse().map_err(|_| Error::config(format!("{key}: '{v}' is not an integer")))?
            }
            "frame_len_ms" => self.frame_len_ms = num()?,
            "frame_shift_ms" => self.frame_shift_ms = num()?,
            "n_mels" => self.n_mels = int()?,
            "preemph" => self.preemph = num()?,
            "log_floor" => self.log_floor = num()?,
            "vad_threshold_db" => self.vad_threshold_db = num()?,
            "vad_floor" => self.vad_floor = num()?,
            "cmn_window" => self.cmn_window = int()?,
            "crop_frames" => self.crop_frames = int()?,
            _ => return Err(Error::config(format!("unknown features key '{key}'"))),
        }
        Ok(())
    }
}

/// Row-major `frames x bins` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(frames: usize, bins: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != frames * bins {
            return Err(Error::shape(format!("{} values for {frames}x{bins} features", data.len())));
        }
        Ok(Self { frames, bins, data })
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub fn is_empty(&self) -> bool {
        self.frames == 0
    }

    pub fn to_tensor(&self) -> Tensor3<f32> {
        Tensor3::from_features(self.frames, self.bins, &self.data).expect("matrix shape")
    }

    /// Keeps the frames whose mask entry is set.
    pub fn select(&self, mask: &[bool]) -> Self {
        let mut data = Vec::new();
        for (t, _) in mask.iter().enumerate().filter(|(_, &k)| k) {
            data.extend_from_slice(self.row(t));
        }
        let frames = data.len() / self.bins.max(1);
        Self { frames, bins: self.bins, data }
    }
}

/// Keep-mask from per-frame natural-log energies: a frame survives iff its
/// energy exceeds both the loudest frame minus `threshold_db` and `ln(floor)`.
pub fn energy_vad(log_energy: &[f64], threshold_db: f64, floor: f64) -> Vec<bool> {
    let max = log_energy.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let thr = (max - threshold_db / 10.0 * std::f64::consts::LN_10).max(floor.ln());
    log_energy.iter().map(|&e| e > thr).collect()
}

/// Bounds `[start, end)` of the normalization window for frame `t`.
///
/// The window is centered where possible and slid inward near the edges so it
/// keeps `min(window, frames)` frames.
pub fn cmn_window_bounds(t: usize, frames: usize, window: usize) -> (usize, usize) {
    if frames <= window {
        return (0, frames);
    }
    let start = t.saturating_sub(window / 2).min(frames - window);
    (start, start + window)
}

/// Subtracts from each frame the mean of its normalization window.
pub fn cmn_sliding(f: &FeatureMatrix, window: usize) -> FeatureMatrix {
    let (t_n, b) = (f.frames, f.bins);
    let mut prefix = vec![0.0f64; (t_n + 1) * b];
    for t in 0..t_n {
        for k in 0..b {
            prefix[(t + 1) * b + k] = prefix[t * b + k] + f.data[t * b + k] as f64;
        }
    }
    let mut data = Vec::with_capacity(f.data.len());
    for t in 0..t_n {
        let (s, e) = cmn_window_bounds(t, t_n, window);
        let n = (e - s) as f64;
        for k in 0..b {
            let mean = (prefix[e * b + k] - prefix[s * b + k]) / n;
            data.push((f.data[t * b + k] as f64 - mean) as f32);
        }
    }
    FeatureMatrix { frames: t_n, bins: b, data }
}

/// Fixed-length training segment: a uniformly placed window of a longer
/// utterance, or a cyclic tiling of a shorter one.
pub fn crop_segment(f: &FeatureMatrix, len: usize, rng: &mut impl Rng) -> Result<FeatureMatrix> {
    if f.is_empty() {
        return Err(Error::Empty("feature matrix to crop"));
    }
    let start = if f.frames > len { rng.random_range(0..=f.frames - len) } else { 0 };
    let mut data = Vec::with_capacity(len * f.bins);
    for i in 0..len {
        data.extend_from_slice(f.row((start + i) % f.frames));
    }
    FeatureMatrix::new(len, f.bins, data)
}

/// The full extraction pipeline: filterbank, VAD, then mean normalization.
pub struct Frontend {
    pub cfg: FeatureConfig,
    fbank: Fbank,
}

impl Frontend {
    pub fn new(cfg: &FeatureConfig) -> Result<Self> {
        Ok(Self { cfg: cfg.clone(), fbank: Fbank::new(cfg)? })
    }

    pub fn process(&self, w: &Waveform) -> Result<FeatureMatrix> {
        let (raw, energy) = self.fbank.compute(w)?;
        let voiced = raw.select(&energy_vad(&energy, self.cfg.vad_threshold_db, self.cfg.vad_floor));
        if voiced.is_empty() {
            return Err(Error::Empty("utterance has no frames above the VAD threshold"));
        }
        Ok(cmn_sliding(&voiced, self.cfg.cmn_window))
    }

    pub fn process_file(&self, path: &Path) -> Result<FeatureMatrix> {
        self.process(&read_wav(path)?)
    }
}

/// Stores feature matrices keyed by utterance id.
pub fn features_to_container<'a>(items: impl IntoIterator<Item = (&'a str, &'a FeatureMatrix)>) -> Container {
    let mut c = Container::new("features");
    for (id, f) in items {
        c.push(id, vec![f.frames, f.bins], f.data.clone());
    }
    c
}

pub fn features_from_container(c: &Container) -> Result<Vec<(String, FeatureMatrix)>> {
    c.expect_kind("features")?;
    c.records
        .iter()
        .map(|r| match r.shape.as_slice() {
            &[t, b] => Ok((r.path.clone(), FeatureMatrix::new(t, b, r.data.clone())?)),
            _ => Err(Error::format(format!("feature record '{}' is not two-dimensional", r.path))),
        })
        .collect()
}
