//! Log mel filterbank energies.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::wav::Waveform;
use super::{FeatureConfig, FeatureMatrix};
use crate::error::{Error, Result};

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Number of whole frames that fit in `n` samples.
pub fn frame_count(n: usize, win: usize, hop: usize) -> usize {
    if n < win {
        0
    } else {
        (n - win) / hop + 1
    }
}

/// Triangular filters evenly spaced on the mel scale from 0 Hz to Nyquist,
/// `n_mels` rows of `n_fft / 2 + 1` weights.
pub fn mel_bank(n_mels: usize, n_fft: usize, sample_rate: u32) -> Vec<Vec<f64>> {
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    let edges: Vec<f64> = (0..n_mels + 2).map(|i| top * i as f64 / (n_mels + 1) as f64).collect();
    let bins = n_fft / 2 + 1;
    let bin_mel: Vec<f64> = (0..bins).map(|k| hz_to_mel(k as f64 * sample_rate as f64 / n_fft as f64)).collect();
    (0..n_mels)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            bin_mel
                .iter()
                .map(|&x| {
                    if x <= lo || x >= hi {
                        0.0
                    } else if x <= mid {
                        (x - lo) / (mid - lo)
                    } else {
                        (hi - x) / (hi - mid)
                    }
                })
                .collect()
        })
        .collect()
}

pub struct Fbank {
    cfg: FeatureConfig,
    win: usize,
    hop: usize,
    n_fft: usize,
    window: Vec<f64>,
    bank: Vec<Vec<f64>>,
    fft: Arc<dyn Fft<f64>>,
}

impl Fbank {
    pub fn new(cfg: &FeatureConfig) -> Result<Self> {
        cfg.validate()?;
        let win = cfg.window_samples();
        let hop = cfg.hop_samples();
        let n_fft = win.next_power_of_two();
        let window = (0..win).map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / (win - 1) as f64).cos()).collect();
        let bank = mel_bank(cfg.n_mels, n_fft, cfg.sample_rate);
        let fft = FftPlanner::new().plan_fft_forward(n_fft);
        Ok(Self { cfg: cfg.clone(), win, hop, n_fft, window, bank, fft })
    }

    pub fn n_fft(&self) -> usize {
        self.n_fft
    }

    /// Features and per-frame log energies (log mean square of the raw frame).
    pub fn compute(&self, w: &Waveform) -> Result<(FeatureMatrix, Vec<f64>)> {
        if w.sample_rate != self.cfg.sample_rate {
            return Err(Error::config(format!(
                "waveform at {} Hz, features configured for {} Hz",
                w.sample_rate, self.cfg.sample_rate
            )));
        }
        let frames = frame_count(w.samples.len(), self.win, self.hop);
        if frames == 0 {
            return Err(Error::Empty("waveform shorter than one analysis window"));
        }
        let floor = self.cfg.log_floor;
        let mut data = Vec::with_capacity(frames * self.cfg.n_mels);
        let mut energies = Vec::with_capacity(frames);
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        let mut power = vec![0.0f64; self.n_fft / 2 + 1];
        for i in 0..frames {
            let x = &w.samples[i * self.hop..i * self.hop + self.win];
            let ms = x.iter().map(|v| v * v).sum::<f64>() / self.win as f64;
            energies.push(ms.max(floor).ln());
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for n in 0..self.win {
                let prev = if n == 0 { x[0] } else { x[n - 1] };
                buf[n].re = (x[n] - self.cfg.preemph * prev) * self.window[n];
            }
            self.fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            for filt in &self.bank {
                let e: f64 = filt.iter().zip(&power).map(|(a, b)| a * b).sum();
                data.push(e.max(floor).ln() as f32);
            }
        }
        Ok((FeatureMatrix::new(frames, self.cfg.n_mels, data)?, energies))
    }
}
