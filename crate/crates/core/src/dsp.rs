//! STFT analysis / iSTFT synthesis and waveform I/O.
//!
//! Analysis reflect-pads the signal by `win / 2` on both sides, frames it with
//! a periodic Hann window and keeps the one-sided spectrum (`win / 2 + 1`
//! bins). Synthesis applies the same window again, overlap-adds and divides by
//! the summed squared window, so `istft(stft(x)) == x` up to rounding.
//!
//! Spectrogram values are stored as a `[2, frames, bins]` tensor holding the
//! real and imaginary parts, which is also the layout fed to the separator.

use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

pub const SAMPLE_RATE: u32 = 16_000;

/// Frame layout shared by analysis and synthesis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StftConfig {
    pub win: usize,
    pub hop: usize,
}

impl StftConfig {
    pub const STANDARD: StftConfig = StftConfig { win: 128, hop: 64 };

    pub fn bins(&self) -> usize {
        self.win / 2 + 1
    }

    /// Frame count for a signal of `len` samples.
    pub fn frames(&self, len: usize) -> usize {
        1 + (len + 2 * (self.win / 2) - self.win) / self.hop
    }

    pub fn validate(&self) -> Result<()> {
        if self.win < 2 || self.win % 2 != 0 || self.hop == 0 || self.hop > self.win {
            return Err(Error::Config(format!("invalid STFT layout win={} hop={}", self.win, self.hop)));
        }
        Ok(())
    }
}

/// One-sided complex spectrogram.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram<S> {
    /// `[2, frames, bins]`: real part then imaginary part.
    pub values: Tensor<S>,
    pub config: StftConfig,
    pub sample_rate: u32,
    /// Length of the analysed waveform, restored by [`istft`].
    pub signal_len: usize,
}

impl<S: Scalar> Spectrogram<S> {
    pub fn bins(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn zeros(config: StftConfig, signal_len: usize) -> Self {
        Self {
            values: Tensor::zeros(&[2, config.frames(signal_len), config.bins()]),
            config,
            sample_rate: SAMPLE_RATE,
            signal_len,
        }
    }

    /// Energy of the windowed frames via Parseval on the one-sided spectrum.
    pub fn energy(&self) -> f64 {
        let (t, f) = (self.frames(), self.bins());
        let n = self.config.win as f64;
        let d = self.values.data();
        let mut e = 0.0;
        for ti in 0..t {
            for k in 0..f {
                let re = d[ti * f + k].to_f64_lossy();
                let im = d[t * f + ti * f + k].to_f64_lossy();
                let w = if k == 0 || k == f - 1 { 1.0 } else { 2.0 };
                e += w * (re * re + im * im);
            }
        }
        e / n
    }

    /// Raw little-endian `f32` (re, im) pairs, frame-major then bin.
    pub fn dump_raw(&self) -> Vec<u8> {
        let (t, f) = (self.frames(), self.bins());
        let d = self.values.data();
        let mut out = Vec::with_capacity(t * f * 8);
        for i in 0..t * f {
            out.extend_from_slice(&(d[i].to_f64_lossy() as f32).to_le_bytes());
            out.extend_from_slice(&(d[t * f + i].to_f64_lossy() as f32).to_le_bytes());
        }
        out
    }
}

/// Periodic Hann window.
pub fn hann<S: Scalar>(n: usize) -> Vec<S> {
    (0..n)
        .map(|i| {
            let v = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos();
            S::from_f64_lossy(v)
        })
        .collect()
}

fn reflect_pad<S: Scalar>(x: &[S], pad: usize) -> Vec<S> {
    let n = x.len();
    let mut out = Vec::with_capacity(n + 2 * pad);
    out.extend((0..pad).map(|i| x[pad - i]));
    out.extend_from_slice(x);
    out.extend((0..pad).map(|i| x[n - 2 - i]));
    out
}

fn plan<S: Scalar>(n: usize, inverse: bool) -> Arc<dyn Fft<S>> {
    let mut p = FftPlanner::new();
    if inverse {
        p.plan_fft_inverse(n)
    } else {
        p.plan_fft_forward(n)
    }
}

pub fn stft<S: Scalar>(x: &[S], config: StftConfig) -> Result<Spectrogram<S>> {
    config.validate()?;
    if x.len() < config.win {
        return Err(Error::TooShort { needed: config.win, got: x.len() });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("waveform contains non-finite samples".into()));
    }
    let (win, hop, bins) = (config.win, config.hop, config.bins());
    let padded = reflect_pad(x, win / 2);
    let frames = config.frames(x.len());
    let window = hann::<S>(win);
    let fft = plan::<S>(win, false);
    let mut values = vec![S::zero(); 2 * frames * bins];
    let mut buf = vec![Complex::new(S::zero(), S::zero()); win];
    for t in 0..frames {
        let seg = &padded[t * hop..t * hop + win];
        for ((b, s), w) in buf.iter_mut().zip(seg).zip(&window) {
            *b = Complex::new(*s * *w, S::zero());
        }
        fft.process(&mut buf);
        for k in 0..bins {
            values[t * bins + k] = buf[k].re;
            values[frames * bins + t * bins + k] = buf[k].im;
        }
    }
    Ok(Spectrogram {
        values: Tensor::new(&[2, frames, bins], values)?,
        config,
        sample_rate: SAMPLE_RATE,
        signal_len: x.len(),
    })
}

/// Summed squared synthesis window over the padded timeline.
fn window_power<S: Scalar>(window: &[S], frames: usize, hop: usize) -> Vec<S> {
    let win = window.len();
    let mut p = vec![S::zero(); (frames - 1) * hop + win];
    for t in 0..frames {
        for (i, w) in window.iter().enumerate() {
            p[t * hop + i] = p[t * hop + i] + *w * *w;
        }
    }
    p
}

fn norm_floor<S: Scalar>() -> S {
    S::from_f64_lossy(1e-10)
}

/// Inverse transform of raw `[2, frames, bins]` data back to `signal_len` samples.
fn synthesize<S: Scalar>(values: &[S], frames: usize, config: StftConfig, signal_len: usize) -> Vec<S> {
    let (win, hop, bins) = (config.win, config.hop, config.bins());
    let window = hann::<S>(win);
    let ifft = plan::<S>(win, true);
    let power = window_power(&window, frames, hop);
    let mut acc = vec![S::zero(); power.len()];
    let mut buf = vec![Complex::new(S::zero(), S::zero()); win];
    let inv_n = S::one() / S::from_usize_lossy(win);
    for t in 0..frames {
        for k in 0..bins {
            let re = values[t * bins + k];
            let im = if k == 0 || k == bins - 1 { S::zero() } else { values[frames * bins + t * bins + k] };
            buf[k] = Complex::new(re, im);
            if k != 0 && k != bins - 1 {
                buf[win - k] = Complex::new(re, -im);
            }
        }
        ifft.process(&mut buf);
        for i in 0..win {
            acc[t * hop + i] = acc[t * hop + i] + buf[i].re * inv_n * window[i];
        }
    }
    let pad = win / 2;
    (0..signal_len)
        .map(|n| {
            let p = power[n + pad];
            if p > norm_floor() {
                acc[n + pad] / p
            } else {
                S::zero()
            }
        })
        .collect()
}

fn check_consistent<S: Scalar>(values: &Tensor<S>, config: StftConfig, signal_len: usize) -> Result<()> {
    config.validate()?;
    let s = values.shape();
    if s.len() != 3 || s[0] != 2 || s[2] != config.bins() || s[1] != config.frames(signal_len) {
        return Err(Error::shape(
            "istft",
            format!(
                "spectrogram {s:?} inconsistent with win={} hop={} length {signal_len} (expected [2, {}, {}])",
                config.win,
                config.hop,
                config.frames(signal_len),
                config.bins()
            ),
        ));
    }
    Ok(())
}

pub fn istft<S: Scalar>(spec: &Spectrogram<S>) -> Result<Vec<S>> {
    check_consistent(&spec.values, spec.config, spec.signal_len)?;
    Ok(synthesize(spec.values.data(), spec.frames(), spec.config, spec.signal_len))
}

impl<S: Scalar> Graph<S> {
    /// Differentiable inverse STFT of a `[2, frames, bins]` node; the result
    /// is a `[signal_len]` waveform node.
    pub fn istft(&mut self, spec: Var, config: StftConfig, signal_len: usize) -> Result<Var> {
        check_consistent(self.value(spec), config, signal_len)?;
        let frames = self.shape(spec)[1];
        let y = synthesize(self.value(spec).data(), frames, config, signal_len);
        let out = Tensor::new(&[signal_len], y)?;
        Ok(self.push_op(
            out,
            &[spec],
            Box::new(move |ctx| vec![Some(synthesize_adjoint(ctx.grad, frames, config))]),
        ))
    }
}

/// Adjoint of [`synthesize`] with respect to the spectrogram values.
fn synthesize_adjoint<S: Scalar>(gy: &[S], frames: usize, config: StftConfig) -> Vec<S> {
    let (win, hop, bins) = (config.win, config.hop, config.bins());
    let window = hann::<S>(win);
    let fft = plan::<S>(win, false);
    let power = window_power(&window, frames, hop);
    let pad = win / 2;
    let mut gz = vec![S::zero(); power.len()];
    for (n, g) in gy.iter().enumerate() {
        let p = power[n + pad];
        if p > norm_floor() {
            gz[n + pad] = *g / p;
        }
    }
    let inv_n = S::one() / S::from_usize_lossy(win);
    let two = S::one() + S::one();
    let mut out = vec![S::zero(); 2 * frames * bins];
    let mut buf = vec![Complex::new(S::zero(), S::zero()); win];
    for t in 0..frames {
        for i in 0..win {
            buf[i] = Complex::new(gz[t * hop + i] * window[i], S::zero());
        }
        fft.process(&mut buf);
        for k in 0..bins {
            let edge = k == 0 || k == bins - 1;
            let c = if edge { inv_n } else { two * inv_n };
            out[t * bins + k] = c * buf[k].re;
            out[frames * bins + t * bins + k] = if edge { S::zero() } else { c * buf[k].im };
        }
    }
    out
}

/// Reads a 16-bit PCM mono WAV file as samples in [-1, 1).
pub fn read_wav(path: &Path) -> Result<(Vec<f32>, u32)> {
    let mut reader = hound::WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::Format(format!(
            "{}: expected 16-bit PCM mono, got {} ch / {} bit",
            path.display(),
            spec.channels,
            spec.bits_per_sample
        )));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| wav_err(path, e))?;
    Ok((samples, spec.sample_rate))
}

/// Writes samples as 16-bit PCM mono, clipping to the representable range.
pub fn write_wav(path: &Path, samples: &[f32], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| wav_err(path, e))?;
    for s in samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(v).map_err(|e| wav_err(path, e))?;
    }
    w.finalize().map_err(|e| wav_err(path, e))
}

fn wav_err(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}
