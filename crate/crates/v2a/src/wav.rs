//! WAV file I/O for PCM 16-bit and 32-bit float, mono or stereo.

use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

/// Multi-channel sampled audio, `samples[time, channel]` in [-1, 1].
#[derive(Debug, Clone)]
pub struct Waveform {
    pub samples: Array2<f64>,
    pub rate: u32,
}

impl Waveform {
    pub fn new(samples: Array2<f64>, rate: u32) -> Result<Self> {
        if samples.nrows() == 0 {
            return Err(Error::InvalidArgument("waveform needs at least 1 sample".into()));
        }
        let channels = samples.ncols();
        if channels == 0 || channels > 2 {
            return Err(Error::InvalidArgument(format!(
                "waveform supports 1 or 2 channels, got {channels}"
            )));
        }
        if !samples.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("waveform contains non-finite samples".into()));
        }
        Ok(Waveform { samples, rate })
    }

    pub fn mono(samples: Vec<f64>, rate: u32) -> Result<Self> {
        let n = samples.len();
        Self::new(Array2::from_shape_vec((n, 1), samples).unwrap(), rate)
    }

    pub fn num_samples(&self) -> usize {
        self.samples.nrows()
    }

    pub fn channels(&self) -> usize {
        self.samples.ncols()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.num_samples() as f64 / self.rate as f64
    }

    pub fn clipped(mut self) -> Self {
        self.samples.mapv_inplace(|v| v.clamp(-1.0, 1.0));
        self
    }

    /// Keep only the first `n` samples.
    pub fn trimmed(mut self, n: usize) -> Self {
        if n < self.num_samples() {
            self.samples = self.samples.slice(ndarray::s![..n, ..]).to_owned();
        }
        self
    }

    /// Append another waveform sample-exactly; rates and channels must match.
    pub fn concat(&self, other: &Waveform) -> Result<Waveform> {
        if self.rate != other.rate || self.channels() != other.channels() {
            return Err(Error::InvalidArgument(
                "cannot concatenate waveforms with different rate or channels".into(),
            ));
        }
        let mut joined =
            Array2::zeros((self.num_samples() + other.num_samples(), self.channels()));
        joined
            .slice_mut(ndarray::s![..self.num_samples(), ..])
            .assign(&self.samples);
        joined
            .slice_mut(ndarray::s![self.num_samples().., ..])
            .assign(&other.samples);
        Waveform::new(joined, self.rate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleFormat {
    Pcm16,
    Float32,
}

pub fn write_wav(path: &Path, wav: &Waveform, format: SampleFormat) -> Result<()> {
    let spec = hound::WavSpec {
        channels: wav.channels() as u16,
        sample_rate: wav.rate,
        bits_per_sample: match format {
            SampleFormat::Pcm16 => 16,
            SampleFormat::Float32 => 32,
        },
        sample_format: match format {
            SampleFormat::Pcm16 => hound::SampleFormat::Int,
            SampleFormat::Float32 => hound::SampleFormat::Float,
        },
    };
    let mut writer =
        hound::WavWriter::create(path, spec).map_err(|e| wav_err(path, e))?;
    match format {
        SampleFormat::Pcm16 => {
            for row in wav.samples.rows() {
                for &v in row {
                    let q = (v.clamp(-1.0, 1.0) * 32767.0).round() as i16;
                    writer.write_sample(q).map_err(|e| wav_err(path, e))?;
                }
            }
        }
        SampleFormat::Float32 => {
            for row in wav.samples.rows() {
                for &v in row {
                    writer
                        .write_sample(v.clamp(-1.0, 1.0) as f32)
                        .map_err(|e| wav_err(path, e))?;
                }
            }
        }
    }
    writer.finalize().map_err(|e| wav_err(path, e))
}

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 || channels > 2 {
        return Err(Error::format(path, format!("unsupported channel count {channels}")));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32767.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_err(path, e))?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_err(path, e))?,
        (fmt, bits) => {
            return Err(Error::format(path, format!("unsupported wav format {fmt:?}/{bits}")))
        }
    };
    let frames = interleaved.len() / channels;
    if frames == 0 {
        return Err(Error::format(path, "empty wav"));
    }
    let samples = Array2::from_shape_vec((frames, channels), interleaved)
        .map_err(|e| Error::format(path, e.to_string()))?;
    Waveform::new(samples, spec.sample_rate)
}

fn wav_err(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    }
}
