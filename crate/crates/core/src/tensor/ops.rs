//! Core differentiable operations: elementwise maps, products, shape algebra,
//! reductions, softmax and layer normalisation.
//!
//! There is no implicit broadcasting. Scalar constants are applied with
//! [`Graph::scale`] and [`Graph::add_scalar`]; everything else has to match
//! exactly or go through [`Graph::repeat`].

use super::{numel, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::blas;
use crate::scalar::Scalar;

/// `[outer, axis, inner]` factorisation of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::shape(op, format!("axis {axis} out of range for {shape:?}")));
    }
    Ok(())
}

/// Strided gather used by `permute`: `out[i] = src[offset(i)]`.
fn permute_copy<S: Scalar>(src: &[S], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<S>) {
    let nd = shape.len();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total = src.len();
    let mut out = Vec::with_capacity(total);
    if nd == 0 {
        return (out_shape, src.to_vec());
    }
    let last = nd - 1;
    let (last_ext, last_stride) = (out_shape[last], strides[last]);
    let mut idx = vec![0usize; nd];
    let mut base = 0usize;
    while out.len() < total {
        let mut off = base;
        for _ in 0..last_ext {
            out.push(src[off]);
            off += last_stride;
        }
        // advance the odometer over all but the last axis
        let mut d = last;
        loop {
            if d == 0 {
                break;
            }
            d -= 1;
            idx[d] += 1;
            base += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            base -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

impl<S: Scalar> Graph<S> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| *x + *y).collect();
        let out = Tensor::new(va.shape(), data)?;
        Ok(self.push_op(
            out,
            &[a, b],
            Box::new(|ctx| vec![Some(ctx.grad.to_vec()), Some(ctx.grad.to_vec())]),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| *x - *y).collect();
        let out = Tensor::new(va.shape(), data)?;
        Ok(self.push_op(
            out,
            &[a, b],
            Box::new(|ctx| {
                vec![
                    Some(ctx.grad.to_vec()),
                    Some(ctx.grad.iter().map(|g| -*g).collect()),
                ]
            }),
        ))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| *x * *y).collect();
        let out = Tensor::new(va.shape(), data)?;
        Ok(self.push_op(
            out,
            &[a, b],
            Box::new(|ctx| {
                let (a, b) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let ga = ctx.needs[0].then(|| ctx.grad.iter().zip(b).map(|(g, y)| *g * *y).collect());
                let gb = ctx.needs[1].then(|| ctx.grad.iter().zip(a).map(|(g, x)| *g * *x).collect());
                vec![ga, gb]
            }),
        ))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = S::from_f64_lossy(c);
        let vx = self.value(x);
        let out = Tensor::from_fn(vx.shape(), |i| vx.data()[i] * c);
        self.push_op(
            out,
            &[x],
            Box::new(move |ctx| vec![Some(ctx.grad.iter().map(|g| *g * c).collect())]),
        )
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = S::from_f64_lossy(c);
        let vx = self.value(x);
        let out = Tensor::from_fn(vx.shape(), |i| vx.data()[i] + c);
        self.push_op(out, &[x], Box::new(|ctx| vec![Some(ctx.grad.to_vec())]))
    }

    /// Pointwise map with derivative expressed through input and output.
    fn unary(&mut self, x: Var, f: fn(S) -> S, df: fn(S, S) -> S) -> Var {
        let vx = self.value(x);
        let out = Tensor::from_fn(vx.shape(), |i| f(vx.data()[i]));
        self.push_op(
            out,
            &[x],
            Box::new(move |ctx| {
                let xs = ctx.inputs[0].data();
                let ys = ctx.output.data();
                vec![Some(
                    ctx.grad
                        .iter()
                        .zip(xs.iter().zip(ys))
                        .map(|(g, (x, y))| *g * df(*x, *y))
                        .collect(),
                )]
            }),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, |_, y| y * (S::one() - y))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, tanh, |_, y| S::one() - y * y)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| v.max(S::zero()),
            |x, _| if x > S::zero() { S::one() } else { S::zero() },
        )
    }

    /// ELU with unit scale; continuously differentiable at zero.
    pub fn elu(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| if v > S::zero() { v } else { v.exp_m1() },
            |x, y| if x > S::zero() { S::one() } else { y + S::one() },
        )
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), |_, y| y)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, |x, _| x + x)
    }

    /// `[M,K] x [K,N] -> [M,N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::zero(); m * n];
        blas::gemm(false, false, m, k, n, self.value(a).data(), self.value(b).data(), &mut out, false);
        let out = Tensor::new(&[m, n], out)?;
        Ok(self.push_op(
            out,
            &[a, b],
            Box::new(move |ctx| {
                let (a, b) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let ga = ctx.needs[0].then(|| {
                    let mut ga = vec![S::zero(); m * k];
                    blas::gemm(false, true, m, n, k, ctx.grad, b, &mut ga, false);
                    ga
                });
                let gb = ctx.needs[1].then(|| {
                    let mut gb = vec![S::zero(); k * n];
                    blas::gemm(true, false, k, m, n, a, ctx.grad, &mut gb, false);
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    /// `x [N,Din] * w [Din,Dout] (+ b [Dout])`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] {
            return Err(Error::shape("linear", format!("{sx:?} x {sw:?}")));
        }
        let (n, din, dout) = (sx[0], sx[1], sw[1]);
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(Error::shape(
                    "linear",
                    format!("bias {:?} for output width {dout}", self.shape(b)),
                ));
            }
        }
        let mut out = vec![S::zero(); n * dout];
        if let Some(b) = b {
            let bv = self.value(b).data();
            out.chunks_mut(dout).for_each(|row| row.copy_from_slice(bv));
        }
        blas::gemm(false, false, n, din, dout, self.value(x).data(), self.value(w).data(), &mut out, true);
        let out = Tensor::new(&[n, dout], out)?;
        let parents: Vec<Var> = std::iter::once(x).chain(std::iter::once(w)).chain(b).collect();
        Ok(self.push_op(
            out,
            &parents,
            Box::new(move |ctx| {
                let (x, w) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let mut res = Vec::with_capacity(3);
                res.push(ctx.needs[0].then(|| {
                    let mut gx = vec![S::zero(); n * din];
                    blas::gemm(false, true, n, dout, din, ctx.grad, w, &mut gx, false);
                    gx
                }));
                res.push(ctx.needs[1].then(|| {
                    let mut gw = vec![S::zero(); din * dout];
                    blas::gemm(true, false, din, n, dout, x, ctx.grad, &mut gw, false);
                    gw
                }));
                if ctx.inputs.len() == 3 {
                    res.push(ctx.needs[2].then(|| {
                        let mut gb = vec![S::zero(); dout];
                        for row in ctx.grad.chunks(dout) {
                            gb.iter_mut().zip(row).for_each(|(a, g)| *a = *a + *g);
                        }
                        gb
                    }));
                }
                res
            }),
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        Ok(self.push_op(out, &[x], Box::new(|ctx| vec![Some(ctx.grad.to_vec())])))
    }

    /// General axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape("permute", format!("axes {axes:?} for {shape:?}")));
        }
        let (out_shape, data) = permute_copy(self.value(x).data(), &shape, axes);
        let out = Tensor::new(&out_shape, data)?;
        let mut inverse = vec![0usize; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Ok(self.push_op(
            out,
            &[x],
            Box::new(move |ctx| {
                let (_, g) = permute_copy(ctx.grad, ctx.output.shape(), &inverse);
                vec![Some(g)]
            }),
        ))
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 2 {
            return Err(Error::shape("transpose", format!("{:?} is not 2-D", self.shape(x))));
        }
        self.permute(x, &[1, 0])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        check_axis("concat", &base, axis)?;
        let mut extents = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            extents.push(s[axis]);
        }
        let total: usize = extents.iter().sum();
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &e) in xs.iter().zip(&extents) {
                let src = self.value(v).data();
                data.extend_from_slice(&src[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let out = Tensor::new(&out_shape, data)?;
        Ok(self.push_op(
            out,
            xs,
            Box::new(move |ctx| {
                let mut grads: Vec<Vec<S>> = extents
                    .iter()
                    .map(|e| Vec::with_capacity(outer * e * inner))
                    .collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (g, &e) in grads.iter_mut().zip(&extents) {
                        g.extend_from_slice(&ctx.grad[off..off + e * inner]);
                        off += e * inner;
                    }
                }
                grads.into_iter().map(Some).collect()
            }),
        ))
    }

    /// `len` consecutive entries along `axis`, starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("slice", &shape, axis)?;
        if len == 0 || start + len > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {}) outside axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, ext, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let b = (o * ext + start) * inner;
            data.extend_from_slice(&src[b..b + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let out = Tensor::new(&out_shape, data)?;
        Ok(self.push_op(
            out,
            &[x],
            Box::new(move |ctx| {
                let mut g = vec![S::zero(); outer * ext * inner];
                for o in 0..outer {
                    let b = (o * ext + start) * inner;
                    g[b..b + len * inner]
                        .copy_from_slice(&ctx.grad[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Tiles the tensor `times` times along `axis`.
    pub fn repeat(&mut self, x: Var, axis: usize, times: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("repeat", &shape, axis)?;
        if times == 0 {
            return Err(Error::shape("repeat", "zero repetitions"));
        }
        let (outer, ext, inner) = split_axis(&shape, axis);
        let block = ext * inner;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * block * times);
        for o in 0..outer {
            for _ in 0..times {
                data.extend_from_slice(&src[o * block..(o + 1) * block]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = ext * times;
        let out = Tensor::new(&out_shape, data)?;
        Ok(self.push_op(
            out,
            &[x],
            Box::new(move |ctx| {
                let mut g = vec![S::zero(); outer * block];
                for o in 0..outer {
                    for r in 0..times {
                        let src = &ctx.grad[(o * times + r) * block..(o * times + r + 1) * block];
                        g[o * block..(o + 1) * block]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, b)| *a = *a + *b);
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: S = self.value(x).data().iter().copied().sum();
        let n = self.value(x).numel();
        self.push_op(
            Tensor::scalar(s),
            &[x],
            Box::new(move |ctx| vec![Some(vec![ctx.grad[0]; n])]),
        )
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Mean over the last axis; `[.., n] -> [..]` (`[1]` for 1-D input).
    pub fn mean_last(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| Error::shape("mean_last", "empty shape"))?;
        let rows = numel(&shape) / n;
        let inv = S::one() / S::from_usize_lossy(n);
        let data = self
            .value(x)
            .data()
            .chunks(n)
            .map(|r| r.iter().copied().sum::<S>() * inv)
            .collect();
        let out_shape = if shape.len() > 1 { shape[..shape.len() - 1].to_vec() } else { vec![1] };
        let out = Tensor::new(&out_shape, data)?;
        Ok(self.push_op(
            out,
            &[x],
            Box::new(move |ctx| {
                let mut g = Vec::with_capacity(rows * n);
                for gi in ctx.grad {
                    g.extend(std::iter::repeat(*gi * inv).take(n));
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| Error::shape("softmax", "empty shape"))?;
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            let m = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut z = S::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z = z + *v;
            }
            row.iter_mut().for_each(|v| *v = *v / z);
        }
        let out = Tensor::new(&shape, data)?;
        Ok(self.push_op(
            out,
            &[x],
            Box::new(move |ctx| {
                let y = ctx.output.data();
                let mut g = vec![S::zero(); y.len()];
                for ((gr, yr), outr) in ctx.grad.chunks(n).zip(y.chunks(n)).zip(g.chunks_mut(n)) {
                    let dot: S = gr.iter().zip(yr).map(|(a, b)| *a * *b).sum();
                    for ((o, gi), yi) in outr.iter_mut().zip(gr).zip(yr) {
                        *o = *yi * (*gi - dot);
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Layer normalisation over the last axis with learned gain and shift.
    pub fn layer_norm_last(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| Error::shape("layer_norm", "empty shape"))?;
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "gain {:?} / shift {:?} for feature width {n}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let eps = S::from_f64_lossy(eps);
        let nn = S::from_usize_lossy(n);
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut data = Vec::with_capacity(numel(&shape));
        for row in self.value(x).data().chunks(n) {
            let (mu, inv) = moments(row, nn, eps);
            for j in 0..n {
                data.push((row[j] - mu) * inv * gv[j] + bv[j]);
            }
        }
        let out = Tensor::new(&shape, data)?;
        Ok(self.push_op(
            out,
            &[x, gamma, beta],
            Box::new(move |ctx| {
                let (x, gam) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let mut gx = vec![S::zero(); x.len()];
                let mut ggam = vec![S::zero(); n];
                let mut gbet = vec![S::zero(); n];
                let mut xhat = vec![S::zero(); n];
                let mut dxhat = vec![S::zero(); n];
                for ((row, grow), gxrow) in x.chunks(n).zip(ctx.grad.chunks(n)).zip(gx.chunks_mut(n)) {
                    let (mu, inv) = moments(row, nn, eps);
                    let mut m1 = S::zero();
                    let mut m2 = S::zero();
                    for j in 0..n {
                        xhat[j] = (row[j] - mu) * inv;
                        dxhat[j] = grow[j] * gam[j];
                        ggam[j] = ggam[j] + grow[j] * xhat[j];
                        gbet[j] = gbet[j] + grow[j];
                        m1 = m1 + dxhat[j];
                        m2 = m2 + dxhat[j] * xhat[j];
                    }
                    m1 = m1 / nn;
                    m2 = m2 / nn;
                    for j in 0..n {
                        gxrow[j] = inv * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                vec![Some(gx), Some(ggam), Some(gbet)]
            }),
        ))
    }
}

fn moments<S: Scalar>(row: &[S], n: S, eps: S) -> (S, S) {
    let mu = row.iter().copied().sum::<S>() / n;
    let var = row.iter().map(|v| (*v - mu) * (*v - mu)).sum::<S>() / n;
    (mu, S::one() / (var + eps).sqrt())
}

/// `tanh` through one `exp` call (libm's tanh is several times slower); a
/// short odd series covers |v| < 1e-2 where `1 - e` would cancel.
pub(crate) fn tanh<S: Scalar>(v: S) -> S {
    let a = v.abs();
    if a < S::from_f64_lossy(1e-2) {
        let v2 = v * v;
        let c = |x: f64| S::from_f64_lossy(x);
        return v * (S::one() - v2 * (c(1.0 / 3.0) - v2 * (c(2.0 / 15.0) - v2 * c(17.0 / 315.0))));
    }
    let e = (a * S::from_f64_lossy(-2.0)).exp();
    let t = (S::one() - e) / (S::one() + e);
    if v < S::zero() { -t } else { t }
}

pub(crate) fn sigmoid<S: Scalar>(v: S) -> S {
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut g = Graph::<f64>::new();
        let eye = g.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let x = g.constant(Tensor::from_fn(&[3, 2], |i| i as f64 * 0.5 - 1.0));
        let y = g.matmul(eye, x).unwrap();
        assert_eq!(g.value(y), g.value(x));

        let a = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = g.constant(t(&[2, 1], &[1., 1.]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] x [2, 3]"), "{err}");
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let x = Tensor::<f64>::from_fn(&[3, 4], |i| i as f64);
        // power-of-two step keeps the difference quotient exact
        let err = grad_check(|g, x| Ok(g.sum_all(x)), &x, 1.0 / 1024.0).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn fast_tanh_matches_libm() {
        for i in -4000..=4000 {
            let v = i as f64 / 200.0;
            let t = tanh(v);
            assert!((t - v.tanh()).abs() <= 1e-15 * (1.0 + v.tanh().abs()) + 1e-16, "{v}");
            let t32 = tanh(v as f32);
            assert!((t32 - (v as f32).tanh()).abs() < 3e-7, "{v}");
        }
        for v in [1e-9, -3e-5, 9.9e-3, 1e-2, 40.0, -400.0] {
            let t: f64 = tanh(v);
            assert!(((t - f64::tanh(v)) / f64::tanh(v)).abs() < 1e-14, "{v}");
        }
    }

    #[test]
    fn sigmoid_derivative_at_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(0.0));
        let y = g.sigmoid(x);
        let grads = g.backward(y).unwrap();
        assert!((grads.get(x).unwrap()[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn permute_round_trip_and_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
        let y = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(y), &[4, 2, 3]);
        assert_eq!(g.value(y).at(&[3, 1, 2]), g.value(x).at(&[1, 2, 3]));
        let z = g.permute(y, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(z), g.value(x));
        assert!(g.permute(x, &[0, 0, 1]).is_err());
    }

    #[test]
    fn concat_slice_repeat_values() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2, 1], &[1., 2.]));
        let b = g.constant(t(&[2, 2], &[3., 4., 5., 6.]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1., 3., 4., 2., 5., 6.]);
        let s = g.slice(c, 1, 1, 2).unwrap();
        assert_eq!(g.value(s), g.value(b));
        let r = g.repeat(a, 1, 3).unwrap();
        assert_eq!(g.value(r).data(), &[1., 1., 1., 2., 2., 2.]);
        assert!(g.concat(&[a, b], 0).is_err());
        assert!(g.slice(c, 1, 2, 2).is_err());
    }

    #[test]
    fn unused_input_gets_exact_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_fn(&[3], |i| i as f64 + 1.0));
        let unused = g.leaf(Tensor::from_fn(&[3], |i| i as f64 - 4.0));
        let _ = g.square(unused);
        let y = g.square(x);
        let loss = g.sum_all(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(unused).unwrap(), &[0.0, 0.0, 0.0]);
        assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn elementwise_ops_pass_grad_check() {
        for seed in 0..3u64 {
            let x = crate::tensor::gradcheck::random_tensor::<f64>(&[3, 5], seed);
            let ops: Vec<fn(&mut Graph<f64>, Var) -> Result<Var>> = vec![
                |g, x| Ok(g.sigmoid(x)),
                |g, x| Ok(g.tanh(x)),
                |g, x| Ok(g.elu(x)),
                |g, x| Ok(g.exp(x)),
                |g, x| g.softmax_last(x),
                |g, x| g.mean_last(x),
                |g, x| g.permute(x, &[1, 0]),
                |g, x| g.repeat(x, 0, 2),
                |g, x| g.slice(x, 1, 1, 3),
                |g, x| {
                    let y = g.scale(x, -0.5);
                    let z = g.add_scalar(y, 0.25);
                    let p = g.mul(z, x)?;
                    g.sub(p, x)
                },
                |g, x| {
                    let gam = g.leaf(Tensor::from_fn(&[5], |i| 0.5 + i as f64 * 0.1));
                    let bet = g.leaf(Tensor::from_fn(&[5], |i| i as f64 * 0.05));
                    g.layer_norm_last(x, gam, bet, 1e-5)
                },
            ];
            for (i, op) in ops.iter().enumerate() {
                let err = grad_check(
                    |g, x| {
                        let y = op(g, x)?;
                        // weight outputs so the check sees non-symmetric cotangents
                        let n = g.value(y).numel();
                        let w = g.constant(Tensor::from_fn(g.shape(y), |j| ((j * 7 + 3) % 11) as f64 / n as f64));
                        let p = g.mul(y, w)?;
                        Ok(g.sum_all(p))
                    },
                    &x,
                    1e-5,
                )
                .unwrap();
                assert!(err < 1e-4, "op {i} seed {seed}: rel err {err}");
            }
        }
    }

    #[test]
    fn matmul_and_linear_pass_grad_check() {
        use crate::tensor::gradcheck::random_tensor;
        for seed in 0..3u64 {
            let a = random_tensor::<f64>(&[5, 4], seed);
            let b = random_tensor::<f64>(&[4, 3], seed + 100);
            let err = grad_check(
                |g, a| {
                    let b = g.leaf(b.clone());
                    let c = g.matmul(a, b)?;
                    let c2 = g.square(c);
                    Ok(g.sum_all(c2))
                },
                &a,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "seed {seed}: {err}");
            let bias = random_tensor::<f64>(&[3], seed + 7);
            let err = grad_check(
                |g, w| {
                    let x = g.constant(a.clone());
                    let bb = g.leaf(bias.clone());
                    let y = g.linear(x, w, Some(bb))?;
                    let y = g.tanh(y);
                    Ok(g.sum_all(y))
                },
                &b,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "seed {seed}: {err}");
        }
    }
}
