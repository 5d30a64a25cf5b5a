//! Central finite-difference gradient oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Denominator floor of the relative error, so entries whose true gradient is
/// zero do not turn rounding noise into huge ratios.
const REL_FLOOR: f64 = 1e-6;

/// Entries smaller than this fraction of the largest gradient in the check are
/// compared against that scale instead of their own magnitude. Structurally
/// near-zero entries (a time-constant stream feeding a time-normalised layer)
/// otherwise measure only the rounding noise of the function value.
const SCALE_FLOOR: f64 = 1e-4;

fn worst_rel_err(pairs: &[(f64, f64)]) -> f64 {
    let scale = pairs.iter().fold(0.0f64, |m, &(a, _)| m.max(a.abs()));
    let floor = REL_FLOOR.max(SCALE_FLOOR * scale);
    pairs
        .iter()
        .map(|&(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Fourth-order central difference with step `eps`.
fn central_diff(mut f: impl FnMut(f64) -> Result<f64>, eps: f64) -> Result<f64> {
    let d1 = f(eps)? - f(-eps)?;
    let d2 = f(2.0 * eps)? - f(-2.0 * eps)?;
    Ok((8.0 * d1 - d2) / (12.0 * eps))
}

fn scalar_output(g: &Graph<f64>, y: Var) -> Result<f64> {
    let v = g.value(y);
    if v.numel() != 1 {
        return Err(Error::shape("grad_check", format!("output must be scalar, got {:?}", v.shape())));
    }
    let out = v.data()[0];
    if !out.is_finite() {
        return Err(Error::Numeric(format!("non-finite function value {out}")));
    }
    Ok(out)
}

/// Worst relative error between autodiff and central differences of a
/// scalar function of one tensor.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.leaf(point.clone());
    let y = f(&mut g, x)?;
    scalar_output(&g, y)?;
    let grads = g.backward(y)?;
    let analytic = grads.get(x).expect("leaf gradient").to_vec();
    if analytic.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite analytic gradient".into()));
    }
    let eval = |p: Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.leaf(p);
        let y = f(&mut g, x)?;
        scalar_output(&g, y)
    };
    let mut pairs = Vec::with_capacity(point.numel());
    for i in 0..point.numel() {
        let numeric = central_diff(
            |d| {
                let mut p = point.clone();
                p.data_mut()[i] += d;
                eval(p)
            },
            eps,
        )?;
        pairs.push((analytic[i], numeric));
    }
    Ok(worst_rel_err(&pairs))
}

/// Same check against every parameter of a store. At most `max_entries`
/// entries per parameter are probed (evenly strided), which keeps checks of
/// large blocks tractable.
pub fn grad_check_params<F>(
    store: &mut ParamStore<f64>,
    f: F,
    eps: f64,
    max_entries: usize,
) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    store.zero_grad();
    let mut g = Graph::new();
    let y = f(&mut g, store)?;
    scalar_output(&g, y)?;
    let grads = g.backward(y)?;
    grads.accumulate_into(&g, store);
    let ids: Vec<_> = store.ids().collect();
    let mut pairs = Vec::new();
    for id in ids {
        let analytic = store.grad(id).to_vec();
        if analytic.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient for {}", store.name(id))));
        }
        let n = analytic.len();
        let stride = n.div_ceil(max_entries.max(1)).max(1);
        for i in (0..n).step_by(stride) {
            let orig = store.value(id).data()[i];
            let numeric = central_diff(
                |d| {
                    store.value_mut(id).data_mut()[i] = orig + d;
                    let mut g = Graph::new();
                    let y = f(&mut g, store)?;
                    scalar_output(&g, y)
                },
                eps,
            );
            store.value_mut(id).data_mut()[i] = orig;
            pairs.push((analytic[i], numeric?));
        }
    }
    store.zero_grad();
    Ok(worst_rel_err(&pairs))
}

/// Uniform(-1, 1) tensor from a seed; test and benchmark helper.
pub fn random_tensor<S: Scalar>(shape: &[usize], seed: u64) -> Tensor<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| S::from_f64_lossy(rng.gen_range(-1.0..1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `x^3` whose backward drops a small fraction of the true derivative on
    /// one entry.
    fn cube_with_error(g: &mut Graph<f64>, x: Var, bad: usize, err: f64) -> Var {
        let vx = g.value(x).clone();
        let out = Tensor::from_fn(vx.shape(), |i| vx.data()[i].powi(3));
        g.push_op(
            out,
            &[x],
            Box::new(move |ctx| {
                let d = ctx
                    .grad
                    .iter()
                    .enumerate()
                    .map(|(i, gr)| gr * 3.0 * vx.data()[i].powi(2) * if i == bad { 1.0 - err } else { 1.0 })
                    .collect();
                vec![Some(d)]
            }),
        )
    }

    #[test]
    fn exact_gradient_passes() {
        let x = random_tensor::<f64>(&[6], 1);
        let e = grad_check(|g, x| { let y = cube_with_error(g, x, 0, 0.0); Ok(g.sum_all(y)) }, &x, 1e-5).unwrap();
        assert!(e < 1e-9, "{e}");
    }

    #[test]
    fn wrong_gradient_is_reported() {
        let x = Tensor::new(&[4], vec![0.9, -0.7, 0.5, 0.8]).unwrap();
        for bad in 0..4 {
            let e = grad_check(|g, x| { let y = cube_with_error(g, x, bad, 1e-3); Ok(g.sum_all(y)) }, &x, 1e-5).unwrap();
            assert!(e > 5e-4, "entry {bad}: {e}");
        }
    }

    #[test]
    fn tiny_entries_are_judged_against_the_gradient_scale() {
        // an error of 1e-9 on a 1e-7 gradient is noise when others are O(1)
        assert!(worst_rel_err(&[(1.0, 1.0), (1e-7, 1.01e-7)]) < 2e-5);
        // but not when the tiny entry is all there is
        assert!(worst_rel_err(&[(1e-4, 1.01e-4)]) > 5e-3);
        // and not when the error is large on the check's own scale
        assert!(worst_rel_err(&[(1.0, 1.0), (1e-7, 1e-3)]) > 0.5);
    }
}
