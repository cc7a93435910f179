//! Waveform type, 16-bit PCM WAV I/O, power/gain arithmetic and fixed-length
//! segmentation.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Default corpus sample rate in Hz.
pub const DEFAULT_SAMPLE_RATE: u32 = 8000;

/// Full-scale divisor for 16-bit PCM.
const PCM_SCALE: f64 = 32768.0;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("multi-channel unsupported: {path} has {channels} channels")]
    MultiChannel { path: PathBuf, channels: u16 },
    #[error("unsupported encoding in {path}: {detail}")]
    UnsupportedEncoding { path: PathBuf, detail: String },
    #[error("cannot write {path}: {detail}")]
    Unwritable { path: PathBuf, detail: String },
    #[error("malformed wav {path}: {detail}")]
    Malformed { path: PathBuf, detail: String },
    #[error("empty waveform")]
    Empty,
    #[error("non-positive power (signal {signal}, reference {reference})")]
    NonPositivePower { signal: f64, reference: f64 },
    #[error("invalid length {0}")]
    InvalidLength(usize),
    #[error("cannot crop {len} samples to {target}")]
    TooShortToCrop { len: usize, target: usize },
    #[error("sample rate must be positive")]
    ZeroSampleRate,
    #[error("non-finite sample at index {0}")]
    NonFinite(usize),
}

/// Single-channel audio with amplitudes nominally in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, AudioError> {
        if sample_rate == 0 {
            return Err(AudioError::ZeroSampleRate);
        }
        if let Some(i) = samples.iter().position(|x| !x.is_finite()) {
            return Err(AudioError::NonFinite(i));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|x| x * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }

    pub fn truncated(&self, len: usize) -> Self {
        Self {
            samples: self.samples[..len.min(self.samples.len())].to_vec(),
            sample_rate: self.sample_rate,
        }
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0f64, |m, x| m.max(x.abs()))
    }
}

/// Sample-wise sum of equal-length waveforms, accumulated in list order.
pub fn sum_waveforms(parts: &[Waveform]) -> Option<Waveform> {
    let first = parts.first()?;
    let mut acc = first.samples.clone();
    for p in &parts[1..] {
        if p.len() != acc.len() {
            return None;
        }
        for (a, x) in acc.iter_mut().zip(&p.samples) {
            *a += x;
        }
    }
    Some(Waveform {
        samples: acc,
        sample_rate: first.sample_rate,
    })
}

pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform, AudioError> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(AudioError::MissingFile(path.to_path_buf()));
    }
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) if io.kind() == std::io::ErrorKind::NotFound => {
            AudioError::MissingFile(path.to_path_buf())
        }
        hound::Error::Unsupported => AudioError::UnsupportedEncoding {
            path: path.to_path_buf(),
            detail: "unsupported wav format".into(),
        },
        other => AudioError::Malformed {
            path: path.to_path_buf(),
            detail: other.to_string(),
        },
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(AudioError::MultiChannel {
            path: path.to_path_buf(),
            channels: spec.channels,
        });
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(AudioError::UnsupportedEncoding {
            path: path.to_path_buf(),
            detail: format!("{:?} {}-bit", spec.sample_format, spec.bits_per_sample),
        });
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / PCM_SCALE))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| AudioError::Malformed {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
    Waveform::new(samples, spec.sample_rate)
}

/// Writes 16-bit PCM mono. Returns the number of samples that had to be
/// clipped into the representable range.
pub fn save_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<usize, AudioError> {
    let path = path.as_ref();
    let unwritable = |e: &dyn std::fmt::Display| AudioError::Unwritable {
        path: path.to_path_buf(),
        detail: e.to_string(),
    };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| unwritable(&e))?;
    let mut clipped = 0usize;
    for &x in &w.samples {
        let (q, clip) = quantize(x);
        clipped += clip as usize;
        writer.write_sample(q).map_err(|e| unwritable(&e))?;
    }
    writer.finalize().map_err(|e| unwritable(&e))?;
    if clipped > 0 {
        log::warn!("{}: clipped {clipped} samples", path.display());
    }
    Ok(clipped)
}

fn quantize(x: f64) -> (i16, bool) {
    let scaled = (x * PCM_SCALE).round();
    if scaled > i16::MAX as f64 {
        (i16::MAX, true)
    } else if scaled < i16::MIN as f64 {
        (i16::MIN, true)
    } else {
        (scaled as i16, false)
    }
}

/// Mean-square amplitude.
pub fn power(w: &Waveform) -> Result<f64, AudioError> {
    if w.is_empty() {
        return Err(AudioError::Empty);
    }
    Ok(w.samples.iter().map(|x| x * x).sum::<f64>() / w.len() as f64)
}

/// Amplitude gain `g` with `10·log10(g²·signal_power / reference_power) == target_snr_db`.
pub fn gain_for_snr(
    signal_power: f64,
    reference_power: f64,
    target_snr_db: f64,
) -> Result<f64, AudioError> {
    if !(signal_power > 0.0 && reference_power > 0.0) {
        return Err(AudioError::NonPositivePower {
            signal: signal_power,
            reference: reference_power,
        });
    }
    Ok((reference_power / signal_power * 10f64.powf(target_snr_db / 10.0)).sqrt())
}

pub fn snr_db(signal_power: f64, reference_power: f64) -> f64 {
    10.0 * (signal_power / reference_power).log10()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FixMode {
    PadZeros,
    RandomCrop,
}

/// Pads with trailing zeros (or truncates) in `PadZeros` mode; in
/// `RandomCrop` mode picks a seed-determined window of `n_samples`.
pub fn fix_length(
    w: &Waveform,
    n_samples: usize,
    mode: FixMode,
    seed: u64,
) -> Result<Waveform, AudioError> {
    if n_samples == 0 {
        return Err(AudioError::InvalidLength(0));
    }
    let samples = match mode {
        FixMode::PadZeros => {
            let mut s = w.samples[..w.len().min(n_samples)].to_vec();
            s.resize(n_samples, 0.0);
            s
        }
        FixMode::RandomCrop => {
            if w.len() < n_samples {
                return Err(AudioError::TooShortToCrop {
                    len: w.len(),
                    target: n_samples,
                });
            }
            let slack = w.len() - n_samples;
            let offset = if slack == 0 {
                0
            } else {
                ChaCha8Rng::seed_from_u64(seed).random_range(0..=slack)
            };
            w.samples[offset..offset + n_samples].to_vec()
        }
    };
    Ok(Waveform {
        samples,
        sample_rate: w.sample_rate,
    })
}
