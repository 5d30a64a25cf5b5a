//! Short-time objective intelligibility at 16 kHz.
//!
//! Follows the classic algorithm: drop frames more than 40 dB below the
//! loudest clean frame, take a Hann-windowed STFT, pool power into 15
//! one-third-octave bands starting at 150 Hz, and correlate clean and
//! processed band envelopes over 30-frame segments after normalising the
//! processed envelope and clipping it at -15 dB SDR.
//!
//! The time constants are kept (25.6 ms frames, 50 % overlap, 384 ms
//! segments), so at 16 kHz a frame is 410 samples zero-padded to a 512-point
//! FFT.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug)]
pub struct StoiParams {
    pub frame_len: usize,
    pub hop: usize,
    pub nfft: usize,
    pub bands: usize,
    pub min_freq: f64,
    pub segment: usize,
    pub beta_db: f64,
    pub dyn_range_db: f64,
}

impl Default for StoiParams {
    fn default() -> Self {
        Self {
            frame_len: 410,
            hop: 205,
            nfft: 512,
            bands: 15,
            min_freq: 150.0,
            segment: 30,
            beta_db: -15.0,
            dyn_range_db: 40.0,
        }
    }
}

impl StoiParams {
    /// Shortest input yielding one full analysis segment.
    pub fn min_len(&self) -> usize {
        self.frame_len + self.segment * self.hop + 1
    }
}

const EPS: f64 = f64::EPSILON;

/// Hann window of `n + 2` points with the zero end-points removed.
fn window(n: usize) -> Vec<f64> {
    (1..=n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n + 1) as f64).cos())
        .collect()
}

fn frame_starts(len: usize, p: &StoiParams) -> impl Iterator<Item = usize> {
    (0..len.saturating_sub(p.frame_len)).step_by(p.hop)
}

/// Removes frames of `x` (and the matching frames of `y`) that are more than
/// `dyn_range_db` below the loudest frame of `x`, then overlap-adds the rest.
fn remove_silent_frames(x: &[f64], y: &[f64], p: &StoiParams) -> (Vec<f64>, Vec<f64>) {
    let w = window(p.frame_len);
    let starts: Vec<usize> = frame_starts(x.len(), p).collect();
    let energy = |s: usize| -> f64 {
        let e: f64 = (0..p.frame_len).map(|i| (w[i] * x[s + i]).powi(2)).sum();
        20.0 * (e.sqrt() + EPS).log10()
    };
    let energies: Vec<f64> = starts.iter().map(|&s| energy(s)).collect();
    let max = energies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let kept: Vec<usize> = starts
        .iter()
        .zip(&energies)
        .filter(|(_, e)| max - p.dyn_range_db - **e < 0.0)
        .map(|(s, _)| *s)
        .collect();
    let out_len = if kept.is_empty() { 0 } else { (kept.len() - 1) * p.hop + p.frame_len };
    let mut xo = vec![0.0; out_len];
    let mut yo = vec![0.0; out_len];
    for (k, &s) in kept.iter().enumerate() {
        for i in 0..p.frame_len {
            xo[k * p.hop + i] += w[i] * x[s + i];
            yo[k * p.hop + i] += w[i] * y[s + i];
        }
    }
    (xo, yo)
}

/// Band-pooled magnitudes, `[bands][frames]`.
fn third_octave_envelopes(x: &[f64], p: &StoiParams, sample_rate: f64) -> Vec<Vec<f64>> {
    let w = window(p.frame_len);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(p.nfft);
    let nbins = p.nfft / 2 + 1;
    let freqs: Vec<f64> = (0..nbins).map(|k| k as f64 * sample_rate / p.nfft as f64).collect();
    let nearest = |f: f64| -> usize {
        let mut best = 0;
        for (i, v) in freqs.iter().enumerate() {
            if (v - f).powi(2) < (freqs[best] - f).powi(2) {
                best = i;
            }
        }
        best
    };
    let bands: Vec<(usize, usize)> = (0..p.bands)
        .map(|k| {
            let k = k as f64;
            let lo = p.min_freq * 2f64.powf((2.0 * k - 1.0) / 6.0);
            let hi = p.min_freq * 2f64.powf((2.0 * k + 1.0) / 6.0);
            (nearest(lo), nearest(hi))
        })
        .collect();
    let starts: Vec<usize> = frame_starts(x.len(), p).collect();
    let mut env = vec![Vec::with_capacity(starts.len()); p.bands];
    let mut buf = vec![Complex::new(0.0, 0.0); p.nfft];
    for s in starts {
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for i in 0..p.frame_len {
            buf[i] = Complex::new(w[i] * x[s + i], 0.0);
        }
        fft.process(&mut buf);
        for (b, &(lo, hi)) in bands.iter().enumerate() {
            let power: f64 = buf[lo..hi].iter().map(|c| c.norm_sqr()).sum();
            env[b].push(power.sqrt());
        }
    }
    env
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Intelligibility score of `est` against the clean `reference`, in [0, 1].
///
/// If silence removal leaves fewer frames than one segment needs, the score is
/// computed on the unpruned signals instead.
pub fn stoi<S: Scalar>(est: &[S], reference: &[S], sample_rate: u32) -> Result<f64> {
    stoi_with(est, reference, sample_rate, &StoiParams::default())
}

pub fn stoi_with<S: Scalar>(est: &[S], reference: &[S], sample_rate: u32, p: &StoiParams) -> Result<f64> {
    if sample_rate != crate::dsp::SAMPLE_RATE {
        return Err(Error::UnsupportedRate(sample_rate));
    }
    if est.len() != reference.len() {
        return Err(Error::shape(
            "stoi",
            format!("estimate has {} samples, reference {}", est.len(), reference.len()),
        ));
    }
    if reference.len() < p.min_len() {
        return Err(Error::TooShort { needed: p.min_len(), got: reference.len() });
    }
    let x: Vec<f64> = reference.iter().map(|v| v.to_f64_lossy()).collect();
    let y: Vec<f64> = est.iter().map(|v| v.to_f64_lossy()).collect();
    let (xs, ys) = remove_silent_frames(&x, &y, p);
    let (xs, ys) = if xs.len() >= p.min_len() { (xs, ys) } else { (x, y) };
    let fs = sample_rate as f64;
    let xe = third_octave_envelopes(&xs, p, fs);
    let ye = third_octave_envelopes(&ys, p, fs);
    let frames = xe[0].len();
    if frames < p.segment {
        return Err(Error::TooShort { needed: p.min_len(), got: reference.len() });
    }
    let clip = 1.0 + 10f64.powf(-p.beta_db / 20.0);
    let n = p.segment;
    let mut total = 0.0;
    let mut count = 0usize;
    for m in n..=frames {
        for b in 0..p.bands {
            let xseg = &xe[b][m - n..m];
            let yseg = &ye[b][m - n..m];
            let alpha = norm(xseg) / (norm(yseg) + EPS);
            let yp: Vec<f64> = yseg
                .iter()
                .zip(xseg)
                .map(|(yv, xv)| (yv * alpha).min(xv * clip))
                .collect();
            let xm = xseg.iter().sum::<f64>() / n as f64;
            let ym = yp.iter().sum::<f64>() / n as f64;
            let xc: Vec<f64> = xseg.iter().map(|v| v - xm).collect();
            let yc: Vec<f64> = yp.iter().map(|v| v - ym).collect();
            let (nx, ny) = (norm(&xc) + EPS, norm(&yc) + EPS);
            total += xc.iter().zip(&yc).map(|(a, b)| (a / nx) * (b / ny)).sum::<f64>();
        }
        count += p.bands;
    }
    Ok((total / count as f64).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Amplitude-modulated harmonic tone with pauses: enough envelope
    /// structure for the band correlations to mean something.
    fn speechlike(len: usize) -> Vec<f64> {
        (0..len)
            .map(|n| {
                let t = n as f64 / 16000.0;
                let env = (2.0 * std::f64::consts::PI * 3.0 * t).sin().max(0.0);
                let f0 = 140.0 + 20.0 * (2.0 * std::f64::consts::PI * 1.3 * t).sin();
                let mut v = 0.0;
                for h in 1..20 {
                    v += (2.0 * std::f64::consts::PI * f0 * h as f64 * t).sin() / h as f64;
                }
                env * v
            })
            .collect()
    }

    fn with_noise(x: &[f64], snr_db: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise: Vec<f64> = x.iter().map(|_| rng.gen_range(-1.0..1.0)).collect();
        let px = x.iter().map(|v| v * v).sum::<f64>();
        let pn = noise.iter().map(|v| v * v).sum::<f64>();
        let g = (px / pn / 10f64.powf(snr_db / 10.0)).sqrt();
        x.iter().zip(&noise).map(|(a, b)| a + g * b).collect()
    }

    #[test]
    fn self_score_is_one() {
        let x = speechlike(16000);
        assert!(stoi(&x, &x, 16000).unwrap() >= 0.999);
    }

    #[test]
    fn errors() {
        let x = speechlike(16000);
        assert!(matches!(stoi(&x, &x, 8000), Err(Error::UnsupportedRate(8000))));
        assert!(matches!(stoi(&x[..3000], &x[..3000], 16000), Err(Error::TooShort { .. })));
    }

    #[test]
    fn falls_with_noise() {
        let x = speechlike(16000);
        for seed in 0..3 {
            let scores: Vec<f64> = [20.0, 10.0, 0.0, -10.0]
                .iter()
                .map(|snr| stoi(&with_noise(&x, *snr, seed), &x, 16000).unwrap())
                .collect();
            for w in scores.windows(2) {
                assert!(w[1] <= w[0], "{scores:?}");
            }
        }
    }

    #[test]
    fn gain_invariant() {
        let x = speechlike(12000);
        let y = with_noise(&x, 5.0, 1);
        let base = stoi(&y, &x, 16000).unwrap();
        for g in [0.1, 10.0] {
            let xs: Vec<f64> = x.iter().map(|v| v * g).collect();
            let ys: Vec<f64> = y.iter().map(|v| v * g).collect();
            assert!((stoi(&ys, &xs, 16000).unwrap() - base).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_estimate_scores_zero() {
        let x = speechlike(16000);
        assert_eq!(stoi(&vec![0.0; 16000], &x, 16000).unwrap(), 0.0);
    }
}
