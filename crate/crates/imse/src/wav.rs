//! 16-bit PCM WAV files with samples normalized by 1/32768.

use std::path::Path;

use crate::error::{CliError, Result};

const SCALE: f64 = 32768.0;

#[derive(Debug, Clone, PartialEq)]
pub struct WavFile {
    pub sample_rate: u32,
    pub channels: u16,
    /// Interleaved, in `[-1, 1)`.
    pub samples: Vec<f64>,
}

impl WavFile {
    pub fn mono(sample_rate: u32, samples: Vec<f64>) -> Self {
        Self {
            sample_rate,
            channels: 1,
            samples,
        }
    }

    pub fn frames(&self) -> usize {
        self.samples.len() / self.channels.max(1) as usize
    }

    /// Channel average per frame; a mono file is returned unchanged.
    pub fn downmix(&self) -> Vec<f64> {
        let c = self.channels.max(1) as usize;
        if c == 1 {
            return self.samples.clone();
        }
        self.samples
            .chunks_exact(c)
            .map(|f| f.iter().sum::<f64>() / c as f64)
            .collect()
    }
}

fn wav_error(path: &Path, e: hound::Error) -> CliError {
    match e {
        hound::Error::IoError(source) => CliError::Io {
            path: path.to_path_buf(),
            source,
        },
        hound::Error::Unsupported => CliError::UnsupportedWav {
            path: path.to_path_buf(),
            reason: "feature not supported by the reader".into(),
        },
        other => CliError::Wav {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    }
}

/// Reads a RIFF/WAVE PCM16 file. Any decoding failure, including a data
/// chunk shorter than its header claims, is an error: no partial result is
/// returned.
pub fn wav_read(path: impl AsRef<Path>) -> Result<WavFile> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| wav_error(path, e))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(CliError::UnsupportedWav {
            path: path.to_path_buf(),
            reason: format!("{:?} {}-bit (only 16-bit PCM is read)", spec.sample_format, spec.bits_per_sample),
        });
    }
    if !(1..=2).contains(&spec.channels) {
        return Err(CliError::UnsupportedWav {
            path: path.to_path_buf(),
            reason: format!("{} channels (mono or stereo only)", spec.channels),
        });
    }
    let expected = reader.len() as usize;
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / SCALE))
        .collect::<std::result::Result<Vec<f64>, _>>()
        .map_err(|e| wav_error(path, e))?;
    if samples.len() != expected {
        return Err(CliError::Wav {
            path: path.to_path_buf(),
            reason: format!("data chunk holds {} of {expected} samples", samples.len()),
        });
    }
    Ok(WavFile {
        sample_rate: spec.sample_rate,
        channels: spec.channels,
        samples,
    })
}

/// Quantizes to 16 bits with rounding and saturation. Samples read by
/// [`wav_read`] are written back bit-exactly.
pub fn wav_write(path: impl AsRef<Path>, wav: &WavFile) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: wav.channels,
        sample_rate: wav.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| wav_error(path, e))?;
    for &x in &wav.samples {
        let q = (x * SCALE).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
        w.write_sample(q).map_err(|e| wav_error(path, e))?;
    }
    w.finalize().map_err(|e| wav_error(path, e))
}
