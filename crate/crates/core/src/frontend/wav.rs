use std::path::Path;

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    /// Samples scaled to `[-1, 1]`.
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty("waveform"));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::Degenerate("waveform contains non-finite samples".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Reads 16-bit mono PCM at 16 kHz.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let reader = hound::WavReader::open(path).map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::format(format!(
            "{}: expected 16-bit mono PCM, found {} channel(s) of {}-bit {:?}",
            path.display(),
            spec.channels,
            spec.bits_per_sample,
            spec.sample_format
        )));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::format(format!(
            "{}: sample rate {} Hz is not supported (expected {SAMPLE_RATE})",
            path.display(),
            spec.sample_rate
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    Waveform::new(samples, spec.sample_rate)
}

/// Writes 16-bit mono PCM, clipping to the representable range.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let err = |e: hound::Error| Error::format(format!("{}: {e}", path.display()));
    let mut writer = hound::WavWriter::create(path, spec).map_err(err)?;
    for &s in &w.samples {
        writer.write_sample((s * 32768.0).round().clamp(-32768.0, 32767.0) as i16).map_err(err)?;
    }
    writer.finalize().map_err(err)
}
