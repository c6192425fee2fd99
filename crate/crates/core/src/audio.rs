//! Mono waveform ingestion, resampling and windowing.
//!
//! The sound encoder consumes raw waveforms, so this module stays close to the
//! samples: WAV decoding, linear-interpolation resampling and fixed-length
//! windows with zero padding outside the clip.

use std::path::Path;

use crate::error::{Error, Result};

/// Default corpus sample rate in Hz.
pub const DEFAULT_SAMPLE_RATE: u32 = 22_050;

/// Default training window length in seconds.
pub const DEFAULT_WINDOW_SECONDS: f64 = 20.0;

/// A mono waveform with samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(Error::Empty("audio clip has no samples".into()));
        }
        if let Some(bad) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("audio sample {bad}")));
        }
        if let Some(bad) = samples.iter().position(|s| s.abs() > 1.0) {
            return Err(Error::InvalidArgument(format!(
                "audio sample {bad} = {} lies outside [-1, 1]",
                samples[bad]
            )));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    /// A clip of `len` zero samples.
    pub fn silence(len: usize, sample_rate: u32) -> Result<Self> {
        Self::new(vec![0.0; len], sample_rate)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// A fixed-length excerpt of a clip, centered on a timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveformWindow {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub center_time_s: f64,
    pub duration_s: f64,
}

impl WaveformWindow {
    /// Wraps an arbitrary sample buffer, e.g. for feeding a synthetic signal
    /// straight to the encoder.
    pub fn from_samples(samples: Vec<f64>, sample_rate: u32) -> Self {
        let duration_s = samples.len() as f64 / sample_rate as f64;
        Self {
            samples,
            sample_rate,
            center_time_s: duration_s / 2.0,
            duration_s,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Decodes a linear-PCM WAV file and averages its channels to mono.
pub fn load_audio(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let unsupported = |reason: String| Error::UnsupportedCodec {
        path: path.to_path_buf(),
        reason,
    };
    let mut reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::Io(io),
        other => unsupported(other.to_string()),
    })?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(unsupported("zero channels".into()));
    }

    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Int => {
            if !matches!(spec.bits_per_sample, 8 | 16 | 24 | 32) {
                return Err(unsupported(format!(
                    "{}-bit integer samples",
                    spec.bits_per_sample
                )));
            }
            let scale = (1u64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| unsupported(e.to_string()))?
        }
        hound::SampleFormat::Float => {
            if spec.bits_per_sample != 32 {
                return Err(unsupported(format!(
                    "{}-bit float samples",
                    spec.bits_per_sample
                )));
            }
            reader
                .samples::<f32>()
                .map(|s| s.map(|v| (v as f64).clamp(-1.0, 1.0)))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| unsupported(e.to_string()))?
        }
    };

    if interleaved.len() < channels {
        return Err(Error::EmptyAudio(path.to_path_buf()));
    }
    let mono: Vec<f64> = interleaved
        .chunks_exact(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect();
    AudioClip::new(mono, spec.sample_rate)
}

/// Writes a clip as 16-bit mono PCM.
pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let to_io = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::Io(io),
        other => Error::InvalidArgument(other.to_string()),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(to_io)?;
    for &s in &clip.samples {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(q).map_err(to_io)?;
    }
    writer.finalize().map_err(to_io)
}

/// Linear-interpolation resampling.
///
/// Output sample `k` sits at time `k / target_rate`; times past the last input
/// sample hold the final value.
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip> {
    if target_rate == 0 {
        return Err(Error::InvalidArgument(
            "target sample rate must be positive".into(),
        ));
    }
    if target_rate == clip.sample_rate {
        return Ok(clip.clone());
    }
    let src = &clip.samples;
    let ratio = clip.sample_rate as f64 / target_rate as f64;
    let out_len = ((src.len() as f64 / ratio).round() as usize).max(1);
    let last = src.len() - 1;
    let samples = (0..out_len)
        .map(|k| {
            let pos = k as f64 * ratio;
            let i = pos.floor() as usize;
            if i >= last {
                return src[last];
            }
            let frac = pos - i as f64;
            if frac == 0.0 {
                src[i]
            } else {
                src[i] + (src[i + 1] - src[i]) * frac
            }
        })
        .collect();
    AudioClip::new(samples, target_rate)
}

/// Cuts `round(duration_s * rate)` samples centered on `center_time_s`,
/// zero-padding wherever the window leaves the clip.
pub fn extract_window(
    clip: &AudioClip,
    center_time_s: f64,
    duration_s: f64,
) -> Result<WaveformWindow> {
    if !(duration_s > 0.0) || !duration_s.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "window duration must be positive, got {duration_s}"
        )));
    }
    if !(0.0..=clip.duration_s()).contains(&center_time_s) {
        return Err(Error::InvalidArgument(format!(
            "window center {center_time_s}s lies outside the clip [0, {}]",
            clip.duration_s()
        )));
    }
    let rate = clip.sample_rate as f64;
    let n = (duration_s * rate).round() as usize;
    if n == 0 {
        return Err(Error::InvalidArgument(
            "window shorter than one sample".into(),
        ));
    }
    let start = (center_time_s * rate - n as f64 / 2.0).round() as i64;
    let src = &clip.samples;
    let samples = (0..n as i64)
        .map(|k| {
            let idx = start + k;
            if idx < 0 || idx >= src.len() as i64 {
                0.0
            } else {
                src[idx as usize]
            }
        })
        .collect();
    Ok(WaveformWindow {
        samples,
        sample_rate: clip.sample_rate,
        center_time_s,
        duration_s,
    })
}
