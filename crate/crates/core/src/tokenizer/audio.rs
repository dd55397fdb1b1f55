//! Log Mel filterbank features.

use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct AudioInput {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioInput {
    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Reads 16-bit PCM mono WAV.
    pub fn load_wav(path: &Path) -> Result<Self> {
        let mut reader = hound::WavReader::open(path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let spec = reader.spec();
        if spec.channels != 1
            || spec.bits_per_sample != 16
            || spec.sample_format != hound::SampleFormat::Int
        {
            return Err(Error::Data(format!(
                "{}: expected 16-bit PCM mono, got {} channel(s) at {} bits",
                path.display(),
                spec.channels,
                spec.bits_per_sample
            )));
        }
        let samples = reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Ok(Self {
            samples,
            sample_rate: spec.sample_rate,
        })
    }

    pub fn save_wav(&self, path: &Path) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let io = |e: hound::Error| Error::Data(format!("{}: {e}", path.display()));
        let mut w = hound::WavWriter::create(path, spec).map_err(io)?;
        for &s in &self.samples {
            w.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)
                .map_err(io)?;
        }
        w.finalize().map_err(io)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectrogramSpec {
    pub window_secs: f64,
    pub stride_secs: f64,
    pub mel_bins: usize,
}

impl Default for SpectrogramSpec {
    fn default() -> Self {
        Self {
            window_secs: 0.025,
            stride_secs: 0.010,
            mel_bins: 128,
        }
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Center frequencies (Hz) of the triangular filters, lowest first.
pub fn mel_centers(mel_bins: usize, sample_rate: u32) -> Vec<f64> {
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    (1..=mel_bins)
        .map(|m| mel_to_hz(top * m as f64 / (mel_bins + 1) as f64))
        .collect()
}

/// Triangular filters over FFT bins `0..=n_fft/2`, peak weight 1.
pub fn mel_filterbank(mel_bins: usize, n_fft: usize, sample_rate: u32) -> Vec<Vec<f64>> {
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    let edges: Vec<f64> = (0..mel_bins + 2)
        .map(|m| mel_to_hz(top * m as f64 / (mel_bins + 1) as f64))
        .collect();
    let n_bins = n_fft / 2 + 1;
    let bin_hz = sample_rate as f64 / n_fft as f64;
    (0..mel_bins)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..n_bins)
                .map(|b| {
                    let f = b as f64 * bin_hz;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= mid {
                        (f - lo) / (mid - lo)
                    } else {
                        (hi - f) / (hi - mid)
                    }
                })
                .collect()
        })
        .collect()
}

/// Reusable spectrogram front end for one sample rate.
pub struct MelFrontEnd {
    spec: SpectrogramSpec,
    sample_rate: u32,
    window: Vec<f64>,
    hop: usize,
    n_fft: usize,
    filters: Vec<Vec<f64>>,
    fft: Arc<dyn Fft<f64>>,
}

impl MelFrontEnd {
    pub fn new(spec: SpectrogramSpec, sample_rate: u32) -> Result<Self> {
        let win = (spec.window_secs * sample_rate as f64).round() as usize;
        let hop = (spec.stride_secs * sample_rate as f64).round() as usize;
        if win < 2 || hop == 0 || spec.mel_bins == 0 {
            return Err(Error::Argument(format!(
                "degenerate spectrogram settings: window {win} samples, hop {hop}, {} Mel bins",
                spec.mel_bins
            )));
        }
        let window = (0..win)
            .map(|n| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (win - 1) as f64).cos())
            .collect();
        let n_fft = win.next_power_of_two();
        let filters = mel_filterbank(spec.mel_bins, n_fft, sample_rate);
        let fft = FftPlanner::new().plan_fft_forward(n_fft);
        Ok(Self {
            spec,
            sample_rate,
            window,
            hop,
            n_fft,
            filters,
            fft,
        })
    }

    pub fn spec(&self) -> &SpectrogramSpec {
        &self.spec
    }

    /// Frame count `floor(len / hop)`.
    pub fn frame_count(&self, samples: usize) -> usize {
        samples / self.hop
    }

    /// `T×F` log Mel energies. Frames that run past the end are zero padded.
    pub fn compute(&self, audio: &AudioInput) -> Result<Tensor> {
        if audio.samples.is_empty() {
            return Err(Error::Data("empty waveform".into()));
        }
        if audio.sample_rate != self.sample_rate {
            return Err(Error::Data(format!(
                "sample rate {} does not match front end rate {}",
                audio.sample_rate, self.sample_rate
            )));
        }
        if audio.samples.len() < self.window.len() {
            return Err(Error::Data(format!(
                "waveform of {} samples is shorter than one {}-sample window",
                audio.samples.len(),
                self.window.len()
            )));
        }
        let frames = self.frame_count(audio.samples.len());
        let mut out = Vec::with_capacity(frames * self.spec.mel_bins);
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        let mut power = vec![0.0; self.n_fft / 2 + 1];
        for t in 0..frames {
            let start = t * self.hop;
            for (i, slot) in buf.iter_mut().enumerate() {
                let s = if i < self.window.len() {
                    audio.samples.get(start + i).copied().unwrap_or(0.0) * self.window[i]
                } else {
                    0.0
                };
                *slot = Complex::new(s, 0.0);
            }
            self.fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            for filt in &self.filters {
                let e: f64 = filt.iter().zip(&power).map(|(w, p)| w * p).sum();
                out.push((e + LOG_FLOOR).ln());
            }
        }
        Tensor::new(vec![frames, self.spec.mel_bins], out)
    }
}

pub fn compute_log_mel_spectrogram(audio: &AudioInput, spec: &SpectrogramSpec) -> Result<Tensor> {
    MelFrontEnd::new(spec.clone(), audio.sample_rate)?.compute(audio)
}
