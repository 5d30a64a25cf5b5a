//! Training loss and evaluation metrics.
//!
//! * [`si_sdr`]: scale-invariant SDR in dB, both signals mean-centred first,
//!   clamped to `±SDR_CAP_DB`.
//! * [`loss_sisdr_se_mc`]: negative SI-SDR plus the mixture-consistency L1
//!   term `(1/N) ||a * est - ref||_1`, where `a = <est, ref> / ||est||^2` is the
//!   least-squares gain of the (single-channel) estimate.
//! * [`stoi`]: short-time objective intelligibility.

mod stoi;

pub use stoi::{stoi, StoiParams};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::scenes::Scene;
use crate::tensor::{Graph, Tensor, Var};

pub const SDR_CAP_DB: f64 = 60.0;

const DB: f64 = 10.0 / std::f64::consts::LN_10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricResult {
    /// SI-SDR of the estimate against the clean target, in dB.
    pub si_snr: f64,
    pub stoi: f64,
}

fn check_pair<S: Scalar>(est: &[S], reference: &[S]) -> Result<()> {
    if est.len() != reference.len() {
        return Err(Error::shape(
            "si_sdr",
            format!("estimate has {} samples, reference {}", est.len(), reference.len()),
        ));
    }
    if est.is_empty() {
        return Err(Error::Input("empty signals".into()));
    }
    Ok(())
}

fn centered<S: Scalar>(x: &[S]) -> Vec<f64> {
    let mean = x.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / x.len() as f64;
    x.iter().map(|v| v.to_f64_lossy() - mean).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Projection of the centred estimate onto the centred reference:
/// returns (target component, error component, uncapped SDR in dB).
fn projection(x: &[f64], s: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
    let scale = dot(x, s) / dot(s, s);
    let target: Vec<f64> = s.iter().map(|v| scale * v).collect();
    let err: Vec<f64> = x.iter().zip(&target).map(|(a, b)| a - b).collect();
    let sdr = DB * (dot(&target, &target).ln() - dot(&err, &err).ln());
    (target, err, sdr)
}

fn cap(sdr: f64) -> (f64, bool) {
    if sdr.is_nan() {
        // 0/0: all-zero estimate
        (-SDR_CAP_DB, true)
    } else if sdr >= SDR_CAP_DB {
        (SDR_CAP_DB, true)
    } else if sdr <= -SDR_CAP_DB {
        (-SDR_CAP_DB, true)
    } else {
        (sdr, false)
    }
}

/// Scale-invariant SDR in dB, capped at `±60`.
pub fn si_sdr<S: Scalar>(est: &[S], reference: &[S]) -> Result<f64> {
    check_pair(est, reference)?;
    let s = centered(reference);
    if dot(&s, &s) == 0.0 {
        return Err(Error::UndefinedReference);
    }
    let x = centered(est);
    let (_, _, sdr) = projection(&x, &s);
    Ok(cap(sdr).0)
}

/// Mixture-consistency term and its gradient with respect to `est`.
fn mc_term(est: &[f64], reference: &[f64]) -> (f64, Vec<f64>) {
    let n = est.len() as f64;
    let ee = dot(est, est);
    if ee == 0.0 {
        return (reference.iter().map(|r| r.abs()).sum::<f64>() / n, vec![0.0; est.len()]);
    }
    let alpha = dot(est, reference) / ee;
    let sgn: Vec<f64> = est
        .iter()
        .zip(reference)
        .map(|(e, r)| {
            let u = alpha * e - r;
            if u > 0.0 {
                1.0
            } else if u < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
        .collect();
    let value = est
        .iter()
        .zip(reference)
        .map(|(e, r)| (alpha * e - r).abs())
        .sum::<f64>()
        / n;
    let se = dot(&sgn, est);
    let grad = est
        .iter()
        .zip(reference)
        .zip(&sgn)
        .map(|((e, r), s)| (alpha * s + se * (r - 2.0 * alpha * e) / ee) / n)
        .collect();
    (value, grad)
}

/// Loss value and gradient with respect to the estimate.
fn loss_and_grad(est: &[f64], reference: &[f64]) -> Result<(f64, Vec<f64>)> {
    let s = centered(reference);
    if dot(&s, &s) == 0.0 {
        return Err(Error::UndefinedReference);
    }
    let x = centered(est);
    let (target, err, sdr) = projection(&x, &s);
    let (sdr, capped) = cap(sdr);
    let mut grad = vec![0.0; est.len()];
    if !capped {
        // d SDR / dx = (20 / ln 10) (t / |t|^2 - e / |e|^2); centring projects out the mean
        let (tt, ee) = (dot(&target, &target), dot(&err, &err));
        for ((g, t), e) in grad.iter_mut().zip(&target).zip(&err) {
            *g = -2.0 * DB * (t / tt - e / ee);
        }
        let mean = grad.iter().sum::<f64>() / grad.len() as f64;
        grad.iter_mut().for_each(|g| *g -= mean);
    }
    let (mc, mc_grad) = mc_term(est, reference);
    grad.iter_mut().zip(&mc_grad).for_each(|(g, m)| *g += m);
    Ok((-sdr + mc, grad))
}

/// Training objective for one single-channel estimate. The mixture is only
/// length-checked: with one channel the consistency sum runs over the
/// estimate alone.
pub fn loss_sisdr_se_mc<S: Scalar>(est: &[S], reference: &[S], mix: &[S]) -> Result<f64> {
    check_pair(est, reference)?;
    check_pair(mix, reference)?;
    let est: Vec<f64> = est.iter().map(|v| v.to_f64_lossy()).collect();
    let reference: Vec<f64> = reference.iter().map(|v| v.to_f64_lossy()).collect();
    Ok(loss_and_grad(&est, &reference)?.0)
}

impl<S: Scalar> Graph<S> {
    /// Differentiable [`loss_sisdr_se_mc`] of a waveform node.
    pub fn sisdr_se_mc_loss(&mut self, est: Var, reference: &[S], mix: &[S]) -> Result<Var> {
        let est_vals = self.value(est).data();
        check_pair(est_vals, reference)?;
        check_pair(mix, reference)?;
        if self.shape(est).len() != 1 {
            return Err(Error::shape("loss", format!("estimate must be 1-D, got {:?}", self.shape(est))));
        }
        let x: Vec<f64> = est_vals.iter().map(|v| v.to_f64_lossy()).collect();
        let r: Vec<f64> = reference.iter().map(|v| v.to_f64_lossy()).collect();
        let (value, grad) = loss_and_grad(&x, &r)?;
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {value}")));
        }
        let grad: Vec<S> = grad.into_iter().map(S::from_f64_lossy).collect();
        Ok(self.push_op(
            Tensor::scalar(S::from_f64_lossy(value)),
            &[est],
            Box::new(move |ctx| vec![Some(grad.iter().map(|g| *g * ctx.grad[0]).collect())]),
        ))
    }
}

/// SI-SNR and STOI of an estimate against a scene's clean target.
pub fn evaluate_scene(est: &[f32], scene: &Scene) -> Result<MetricResult> {
    evaluate_signals(est, &scene.target)
}

pub fn evaluate_signals(est: &[f32], target: &[f32]) -> Result<MetricResult> {
    Ok(MetricResult {
        si_snr: si_sdr(est, target)?,
        stoi: stoi(est, target, crate::dsp::SAMPLE_RATE)?,
    })
}
