//! Synthetic multi-speaker corpus for desk-scale training and evaluation.
//!
//! Each speaker owns a pitch, a spectral tilt and a few vowel-like formant
//! sets. An utterance is a run of voiced syllables separated by short pauses;
//! each syllable is a harmonic series at the speaker's pitch shaped by one of
//! the speaker's formant sets. Per-utterance jitter and additive noise scale
//! with the corpus noise level. Utterances are synthesized on demand from a
//! per-utterance seed, so the corpus is fully determined by its config.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::frontend::{write_wav, Waveform, SAMPLE_RATE};

const VOWELS: usize = 3;
const TABLE: usize = 2048;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    /// Extra utterances per speaker kept out of training for trials.
    pub heldout_per_speaker: usize,
    pub n_trials: usize,
    pub noise: f64,
    pub min_secs: f64,
    pub max_secs: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            n_speakers: 20,
            utts_per_speaker: 50,
            heldout_per_speaker: 6,
            n_trials: 500,
            noise: 1.0,
            min_secs: 1.0,
            max_secs: 4.0,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Speaker {
    pub f0: f64,
    /// Spectral slope in dB per octave above 200 Hz.
    pub tilt_db: f64,
    /// `(center_hz, bandwidth_hz, gain_db)` triples per vowel.
    pub vowels: Vec<Vec<(f64, f64, f64)>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UttSpec {
    pub id: String,
    pub speaker: usize,
    pub heldout: bool,
    pub seed: u64,
    pub secs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyCorpus {
    pub config: ToyConfig,
    pub speakers: Vec<Speaker>,
    pub utterances: Vec<UttSpec>,
}

pub fn speaker_id(s: usize) -> String {
    format!("spk{s:03}")
}

fn make_speaker(s: usize, n: usize, rng: &mut ChaCha8Rng) -> Speaker {
    let frac = if n > 1 { s as f64 / (n - 1) as f64 } else { 0.5 };
    let f0 = 90.0 + 170.0 * frac + rng.random_range(-4.0..4.0);
    let vowels = (0..VOWELS)
        .map(|_| {
            vec![
                (rng.random_range(300.0..900.0), rng.random_range(60.0..120.0), 0.0),
                (rng.random_range(900.0..2400.0), rng.random_range(80.0..160.0), rng.random_range(-8.0..-2.0)),
                (rng.random_range(2400.0..3600.0), rng.random_range(120.0..220.0), rng.random_range(-16.0..-8.0)),
                (rng.random_range(3600.0..6500.0), rng.random_range(200.0..400.0), rng.random_range(-24.0..-14.0)),
            ]
        })
        .collect();
    Speaker { f0, tilt_db: rng.random_range(-9.0..-3.0), vowels }
}

pub fn gen_toy_corpus(cfg: &ToyConfig) -> Result<ToyCorpus> {
    if cfg.n_speakers < 2 {
        return Err(Error::config("a toy corpus needs at least 2 speakers"));
    }
    if cfg.utts_per_speaker == 0 || !(cfg.min_secs > 0.1 && cfg.max_secs >= cfg.min_secs) || cfg.noise < 0.0 {
        return Err(Error::config("toy corpus needs utterances, 0.1 < min_secs <= max_secs and noise >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let speakers: Vec<Speaker> = (0..cfg.n_speakers).map(|s| make_speaker(s, cfg.n_speakers, &mut rng)).collect();
    let mut utterances = Vec::new();
    for s in 0..cfg.n_speakers {
        let total = cfg.utts_per_speaker + cfg.heldout_per_speaker;
        for u in 0..total {
            let heldout = u >= cfg.utts_per_speaker;
            let id = if heldout {
                format!("{}-eval{:03}", speaker_id(s), u - cfg.utts_per_speaker)
            } else {
                format!("{}-utt{u:03}", speaker_id(s))
            };
            utterances.push(UttSpec {
                id,
                speaker: s,
                heldout,
                seed: rng.random(),
                secs: rng.random_range(cfg.min_secs..=cfg.max_secs),
            });
        }
    }
    Ok(ToyCorpus { config: cfg.clone(), speakers, utterances })
}

fn envelope_db(hz: f64, sp: &Speaker, formants: &[(f64, f64, f64)]) -> f64 {
    let tilt = sp.tilt_db * (hz.max(200.0) / 200.0).log2();
    let peaks = formants
        .iter()
        .map(|&(c, bw, g)| 10f64.powf(g / 20.0) / (1.0 + ((hz - c) / bw).powi(2)))
        .sum::<f64>();
    tilt + 20.0 * (peaks + 1e-3).log10()
}

impl ToyCorpus {
    pub fn train(&self) -> impl Iterator<Item = &UttSpec> {
        self.utterances.iter().filter(|u| !u.heldout)
    }

    pub fn heldout(&self) -> impl Iterator<Item = &UttSpec> {
        self.utterances.iter().filter(|u| u.heldout)
    }

    pub fn synthesize(&self, u: &UttSpec) -> Result<Waveform> {
        let sp = &self.speakers[u.speaker];
        let noise = self.config.noise;
        let mut rng = ChaCha8Rng::seed_from_u64(u.seed);
        let gauss = Normal::new(0.0, 1.0).expect("unit normal");
        let sr = SAMPLE_RATE as f64;
        let n = (u.secs * sr).round() as usize;
        let f0 = sp.f0 * (1.0 + 0.03 * noise * gauss.sample(&mut rng));
        let shift = 1.0 + 0.02 * noise * gauss.sample(&mut rng);
        let gain = 0.3 * (1.0 + 0.2 * noise * gauss.sample(&mut rng)).abs().max(0.2);
        let mut samples = vec![0.0f64; n];
        let mut pos = (rng.random_range(0.05..0.2) * sr) as usize;
        let mut vowel = rng.random_range(0..VOWELS);
        let mut phase = 0.0f64;
        while pos < n {
            let len = ((rng.random_range(0.15..0.35)) * sr) as usize;
            let end = (pos + len).min(n);
            let formants: Vec<(f64, f64, f64)> = sp.vowels[vowel].iter().map(|&(c, b, g)| (c * shift, b, g)).collect();
            let sf0 = f0 * (1.0 + 0.01 * noise * gauss.sample(&mut rng));
            let mut table = vec![0.0f64; TABLE];
            let mut h = 1;
            while h as f64 * sf0 < 0.47 * sr {
                let amp = 10f64.powf(envelope_db(h as f64 * sf0, sp, &formants) / 20.0);
                let ph: f64 = rng.random_range(0.0..2.0 * PI);
                for (i, v) in table.iter_mut().enumerate() {
                    *v += amp * (2.0 * PI * h as f64 * i as f64 / TABLE as f64 + ph).sin();
                }
                h += 1;
            }
            let peak = table.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
            let step = sf0 / sr * TABLE as f64;
            for (k, s) in samples[pos..end].iter_mut().enumerate() {
                let ramp = (PI * k as f64 / (end - pos) as f64).sin().powf(0.5);
                let i = phase as usize;
                let frac = phase - i as f64;
                let v = table[i] * (1.0 - frac) + table[(i + 1) % TABLE] * frac;
                *s = gain * ramp * v / peak;
                phase = (phase + step) % TABLE as f64;
            }
            vowel = (vowel + 1) % VOWELS;
            pos = end + (rng.random_range(0.04..0.15) * sr) as usize;
        }
        let floor = 1e-3 * (0.5 + noise);
        for s in &mut samples {
            *s = (*s + floor * gauss.sample(&mut rng)).clamp(-0.999, 0.999);
        }
        Waveform::new(samples, SAMPLE_RATE)
    }

    /// Deterministic verification trials over held-out utterances, alternating
    /// target and nontarget pairs.
    pub fn trials(&self) -> Result<Vec<(String, String, bool)>> {
        let mut by_spk: Vec<Vec<&str>> = vec![Vec::new(); self.speakers.len()];
        for u in self.heldout() {
            by_spk[u.speaker].push(&u.id);
        }
        if by_spk.iter().any(|v| v.len() < 2) {
            return Err(Error::config("trials need at least 2 held-out utterances per speaker"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x7472_6961_6c73);
        let ns = self.speakers.len();
        let mut out = Vec::with_capacity(self.config.n_trials);
        for i in 0..self.config.n_trials {
            if i % 2 == 0 {
                let s = rng.random_range(0..ns);
                let mut pair = by_spk[s].clone();
                pair.shuffle(&mut rng);
                out.push((pair[0].to_string(), pair[1].to_string(), true));
            } else {
                let a = rng.random_range(0..ns);
                let b = (a + rng.random_range(1..ns)) % ns;
                let ea = by_spk[a][rng.random_range(0..by_spk[a].len())];
                let eb = by_spk[b][rng.random_range(0..by_spk[b].len())];
                out.push((ea.to_string(), eb.to_string(), false));
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct CorpusPaths {
    pub train_manifest: PathBuf,
    pub heldout_manifest: PathBuf,
    pub trials: PathBuf,
}

/// Writes WAVs under `dir/wav/<speaker>/`, the training and held-out
/// manifests, and the trial list.
pub fn write_corpus(corpus: &ToyCorpus, dir: &Path) -> Result<CorpusPaths> {
    let mut train = String::new();
    let mut heldout = String::new();
    for u in &corpus.utterances {
        let spk = speaker_id(u.speaker);
        let rel = Path::new("wav").join(&spk).join(format!("{}.wav", u.id));
        let full = dir.join(&rel);
        fs::create_dir_all(full.parent().expect("speaker directory"))?;
        write_wav(&full, &corpus.synthesize(u)?)?;
        let line = if u.heldout { &mut heldout } else { &mut train };
        let _ = writeln!(line, "{} {} {}", u.id, spk, full.display());
    }
    let mut trials = String::new();
    for (a, b, target) in corpus.trials()? {
        let _ = writeln!(trials, "{a} {b} {}", if target { "target" } else { "nontarget" });
    }
    let paths = CorpusPaths {
        train_manifest: dir.join("train.lst"),
        heldout_manifest: dir.join("heldout.lst"),
        trials: dir.join("trials.txt"),
    };
    fs::write(&paths.train_manifest, train)?;
    fs::write(&paths.heldout_manifest, heldout)?;
    fs::write(&paths.trials, trials)?;
    Ok(paths)
}
