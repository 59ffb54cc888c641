use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::Waveform;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Short-time Fourier and mel-filterbank settings.
///
/// Defaults reproduce a 128×313 log-mel spectrogram for a 10-s clip at
/// 16 kHz (n_fft 1024, hop 512, center padding).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig {
            sample_rate: 16_000,
            n_fft: 1024,
            hop: 512,
            n_mels: 128,
            fmin: 0.0,
            fmax: 8000.0,
            log_floor: 1e-10,
        }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive".into());
        }
        if self.n_fft < 2 || self.n_fft % 2 != 0 {
            return bad(format!("n_fft {} must be even and at least 2", self.n_fft));
        }
        if self.hop == 0 || self.hop > self.n_fft {
            return bad(format!("hop {} must be in (0, n_fft]", self.hop));
        }
        if self.n_mels == 0 {
            return bad("n_mels must be at least 1".into());
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if !(0.0 <= self.fmin && self.fmin < self.fmax && self.fmax <= nyquist) {
            return bad(format!(
                "need 0 <= fmin < fmax <= {nyquist}, got fmin {} fmax {}",
                self.fmin, self.fmax
            ));
        }
        if !(self.log_floor > 0.0 && self.log_floor.is_finite()) {
            return bad(format!("log_floor {} must be positive", self.log_floor));
        }
        Ok(())
    }

    /// Number of frames produced for `samples` input samples.
    pub fn frames(&self, samples: usize) -> usize {
        samples / self.hop + 1
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Corner frequencies of the filterbank: `n_mels + 2` points equally spaced
/// on the mel scale. Filter `m` rises over `[f[m], f[m+1]]` and falls over
/// `[f[m+1], f[m+2]]`.
fn corner_frequencies(cfg: &MelConfig) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
    let n = cfg.n_mels + 1;
    (0..=n)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / n as f64))
        .collect()
}

/// Peak frequency of each mel filter.
pub fn mel_center_frequencies(cfg: &MelConfig) -> Vec<f64> {
    corner_frequencies(cfg)[1..=cfg.n_mels].to_vec()
}

/// Triangular HTK-scale filters, each scaled by `2 / bandwidth` so that all
/// filters have equal area. Returns an `n_mels × (n_fft/2 + 1)` matrix.
pub fn mel_filterbank(cfg: &MelConfig) -> Result<Tensor> {
    cfg.validate()?;
    let bins = cfg.n_bins();
    let corners = corner_frequencies(cfg);
    let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
    let mut data = vec![0.0; cfg.n_mels * bins];
    for m in 0..cfg.n_mels {
        let (left, center, right) = (corners[m], corners[m + 1], corners[m + 2]);
        let norm = 2.0 / (right - left);
        let row = &mut data[m * bins..(m + 1) * bins];
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            let rising = (f - left) / (center - left);
            let falling = (right - f) / (right - center);
            *w = rising.min(falling).max(0.0) * norm;
        }
        if row.iter().all(|&w| w == 0.0) {
            return Err(Error::Config(format!(
                "mel filter {m} ({left:.1}-{right:.1} Hz) covers no FFT bin; \
                 n_mels {} is too large for n_fft {}",
                cfg.n_mels, cfg.n_fft
            )));
        }
    }
    Tensor::new(vec![cfg.n_mels, bins], data)
}

/// A log-mel spectrogram: `values` is `n_mels × frames`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub values: Tensor,
    pub config: MelConfig,
}

impl Spectrogram {
    pub fn n_mels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[1]
    }
}

/// Precomputed window, filterbank and FFT plan for one [`MelConfig`].
pub struct MelExtractor {
    config: MelConfig,
    window: Vec<f64>,
    filterbank: Tensor,
    fft: std::sync::Arc<dyn rustfft::Fft<f64>>,
}

impl MelExtractor {
    pub fn new(config: MelConfig) -> Result<Self> {
        let filterbank = mel_filterbank(&config)?;
        let n = config.n_fft;
        // periodic Hann
        let window = (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(n);
        Ok(MelExtractor {
            config,
            window,
            filterbank,
            fft,
        })
    }

    pub fn config(&self) -> &MelConfig {
        &self.config
    }

    pub fn filterbank(&self) -> &Tensor {
        &self.filterbank
    }

    /// Power spectrogram, `(n_fft/2 + 1) × frames`, with reflect padding of
    /// `n_fft/2` on both ends.
    pub fn power_spectrogram(&self, w: &Waveform) -> Result<Tensor> {
        let cfg = &self.config;
        if w.sample_rate() != cfg.sample_rate {
            return Err(Error::Config(format!(
                "waveform sample rate {} differs from the configured {} Hz (resampling is not supported)",
                w.sample_rate(),
                cfg.sample_rate
            )));
        }
        let x = w.samples();
        if x.len() < cfg.n_fft {
            return Err(Error::Config(format!(
                "waveform has {} samples, fewer than n_fft {}",
                x.len(),
                cfg.n_fft
            )));
        }
        let pad = cfg.n_fft / 2;
        let padded = reflect_pad(x, pad);
        let frames = cfg.frames(x.len());
        let bins = cfg.n_bins();
        let mut power = vec![0.0; bins * frames];
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
        for t in 0..frames {
            let frame = &padded[t * cfg.hop..t * cfg.hop + cfg.n_fft];
            for ((b, &s), &win) in buf.iter_mut().zip(frame).zip(&self.window) {
                *b = Complex::new(s * win, 0.0);
            }
            self.fft.process(&mut buf);
            for (k, c) in buf[..bins].iter().enumerate() {
                power[k * frames + t] = c.norm_sqr();
            }
        }
        Tensor::new(vec![bins, frames], power)
    }

    pub fn log_mel(&self, w: &Waveform) -> Result<Spectrogram> {
        let power = self.power_spectrogram(w)?;
        let frames = power.shape()[1];
        let bins = self.config.n_bins();
        let n_mels = self.config.n_mels;
        let mut mel = vec![0.0; n_mels * frames];
        let fb = self.filterbank.data();
        let p = power.data();
        for m in 0..n_mels {
            let out = &mut mel[m * frames..(m + 1) * frames];
            for k in 0..bins {
                let weight = fb[m * bins + k];
                if weight == 0.0 {
                    continue;
                }
                for (o, &pk) in out.iter_mut().zip(&p[k * frames..(k + 1) * frames]) {
                    *o += weight * pk;
                }
            }
        }
        let floor = self.config.log_floor;
        for v in &mut mel {
            *v = (*v + floor).ln();
        }
        Ok(Spectrogram {
            values: Tensor::new(vec![n_mels, frames], mel)?,
            config: self.config.clone(),
        })
    }
}

fn reflect_pad(x: &[f64], pad: usize) -> Vec<f64> {
    let n = x.len();
    let mut out = Vec::with_capacity(n + 2 * pad);
    // numpy "reflect": the edge sample is not repeated
    let reflect = |i: isize| -> f64 {
        let period = 2 * (n as isize - 1);
        let mut j = i.rem_euclid(period.max(1));
        if j >= n as isize {
            j = period - j;
        }
        x[j as usize]
    };
    for i in -(pad as isize)..(n + pad) as isize {
        out.push(reflect(i));
    }
    out
}

/// Log-mel spectrogram of `w`: Hann-windowed power STFT with reflect
/// center padding, HTK mel filterbank, then `ln(power + log_floor)`.
pub fn log_mel(w: &Waveform, cfg: &MelConfig) -> Result<Spectrogram> {
    MelExtractor::new(cfg.clone())?.log_mel(w)
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    shape: Vec<usize>,
    dtype: String,
    config: MelConfig,
}

/// Write `<stem>.f32` (little-endian float32, row-major) and `<stem>.json`.
pub fn export_spectrogram(spec: &Spectrogram, stem: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
    let stem = stem.as_ref();
    let raw = stem.with_extension("f32");
    let json = stem.with_extension("json");
    let bytes: Vec<u8> = spec
        .values
        .data()
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect();
    fs::write(&raw, bytes).map_err(|e| Error::io(&raw, e))?;
    let sidecar = Sidecar {
        shape: spec.values.shape().to_vec(),
        dtype: "float32-le".into(),
        config: spec.config.clone(),
    };
    fs::write(&json, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| Error::io(&json, e))?;
    Ok((raw, json))
}

pub fn import_spectrogram(stem: impl AsRef<Path>) -> Result<Spectrogram> {
    let stem = stem.as_ref();
    let raw = stem.with_extension("f32");
    let json = stem.with_extension("json");
    let sidecar: Sidecar =
        serde_json::from_slice(&fs::read(&json).map_err(|e| Error::io(&json, e))?)?;
    let bytes = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Config(format!("{} is not a float32 file", raw.display())));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Ok(Spectrogram {
        values: Tensor::new(sidecar.shape, data)?,
        config: sidecar.config,
    })
}
