//! Convolution and transposed convolution over 1, 2 or 3 spatial axes.
//!
//! Inputs carry no batch axis: `[C_in, *spatial]`. Convolution weights are
//! `[C_out, C_in, *kernel]`; transposed convolution weights are
//! `[C_in, C_out, *kernel]`. Both lower to im2col plus one matrix product.
//!
//! Output extent per axis, with `e = dilation * (kernel - 1) + 1`:
//! - convolution: `(in + 2 * pad - e) / stride + 1`
//! - transposed:  `(in - 1) * stride - 2 * pad + e`

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::blas;
use crate::scalar::Scalar;

/// Stride, zero padding and dilation per spatial axis.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: Vec<usize>,
    pub padding: Vec<usize>,
    pub dilation: Vec<usize>,
}

impl ConvSpec {
    pub fn new(stride: &[usize], padding: &[usize]) -> Self {
        Self {
            stride: stride.to_vec(),
            padding: padding.to_vec(),
            dilation: vec![1; stride.len()],
        }
    }

    /// Stride 1 and no padding over `rank` axes.
    pub fn unit(rank: usize) -> Self {
        Self::new(&vec![1; rank], &vec![0; rank])
    }

    /// Stride 1 with "same" padding for an odd kernel size.
    pub fn same(kernel: &[usize]) -> Self {
        Self::new(&vec![1; kernel.len()], &kernel.iter().map(|k| k / 2).collect::<Vec<_>>())
    }

    pub fn with_dilation(mut self, dilation: &[usize]) -> Self {
        self.dilation = dilation.to_vec();
        self
    }

    pub fn rank(&self) -> usize {
        self.stride.len()
    }
}

/// Geometry padded to three spatial axes.
#[derive(Clone, Copy, Debug)]
struct Geom {
    channels: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
    dil: [usize; 3],
    output: [usize; 3],
}

impl Geom {
    fn kvol(&self) -> usize {
        self.kernel.iter().product()
    }
    fn in_vol(&self) -> usize {
        self.input.iter().product()
    }
    fn out_vol(&self) -> usize {
        self.output.iter().product()
    }
}

fn pad3(v: &[usize], fill: usize) -> [usize; 3] {
    let mut out = [fill; 3];
    out[3 - v.len()..].copy_from_slice(v);
    out
}

/// Builds the convolution geometry mapping `input` extents to output extents.
fn conv_geom(
    op: &'static str,
    channels: usize,
    input: &[usize],
    kernel: &[usize],
    spec: &ConvSpec,
) -> Result<Geom> {
    let r = input.len();
    if !(1..=3).contains(&r)
        || kernel.len() != r
        || spec.stride.len() != r
        || spec.padding.len() != r
        || spec.dilation.len() != r
    {
        return Err(Error::shape(
            op,
            format!("rank mismatch: input {input:?}, kernel {kernel:?}, spec {spec:?}"),
        ));
    }
    if spec.stride.iter().chain(&spec.dilation).any(|&v| v == 0) {
        return Err(Error::shape(op, "stride and dilation must be positive"));
    }
    let mut output = Vec::with_capacity(r);
    for i in 0..r {
        let span = spec.dilation[i] * (kernel[i] - 1) + 1;
        let padded = input[i] + 2 * spec.padding[i];
        if padded < span {
            return Err(Error::shape(
                op,
                format!("input {input:?} too small for kernel {kernel:?} with padding {:?}", spec.padding),
            ));
        }
        output.push((padded - span) / spec.stride[i] + 1);
    }
    Ok(Geom {
        channels,
        input: pad3(input, 1),
        kernel: pad3(kernel, 1),
        stride: pad3(&spec.stride, 1),
        pad: pad3(&spec.padding, 0),
        dil: pad3(&spec.dilation, 1),
        output: pad3(&output, 1),
    })
}

/// Source index along one axis, `None` when it falls in the padding.
#[inline]
fn src(o: usize, k: usize, g: &Geom, axis: usize) -> Option<usize> {
    let pos = (o * g.stride[axis] + k * g.dil[axis]) as isize - g.pad[axis] as isize;
    (pos >= 0 && (pos as usize) < g.input[axis]).then_some(pos as usize)
}

/// `cols[(c, k), o] = x[c, o * stride + k * dil - pad]`.
fn im2col<S: Scalar>(x: &[S], g: &Geom) -> Vec<S> {
    let (kv, ov) = (g.kvol(), g.out_vol());
    let mut cols = vec![S::zero(); g.channels * kv * ov];
    let [i0, i1, i2] = g.input;
    for c in 0..g.channels {
        let xc = &x[c * i0 * i1 * i2..(c + 1) * i0 * i1 * i2];
        for k0 in 0..g.kernel[0] {
            for k1 in 0..g.kernel[1] {
                for k2 in 0..g.kernel[2] {
                    let row = (c * kv) + (k0 * g.kernel[1] + k1) * g.kernel[2] + k2;
                    let dst = &mut cols[row * ov..(row + 1) * ov];
                    let mut o = 0;
                    for o0 in 0..g.output[0] {
                        let s0 = src(o0, k0, g, 0);
                        for o1 in 0..g.output[1] {
                            let s1 = src(o1, k1, g, 1);
                            match (s0, s1) {
                                (Some(a), Some(b)) => {
                                    let base = (a * i1 + b) * i2;
                                    for o2 in 0..g.output[2] {
                                        if let Some(c2) = src(o2, k2, g, 2) {
                                            dst[o] = xc[base + c2];
                                        }
                                        o += 1;
                                    }
                                }
                                _ => o += g.output[2],
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back onto the input grid.
fn col2im<S: Scalar>(cols: &[S], g: &Geom) -> Vec<S> {
    let (kv, ov) = (g.kvol(), g.out_vol());
    let [i0, i1, i2] = g.input;
    let mut x = vec![S::zero(); g.channels * g.in_vol()];
    for c in 0..g.channels {
        let xc = &mut x[c * i0 * i1 * i2..(c + 1) * i0 * i1 * i2];
        for k0 in 0..g.kernel[0] {
            for k1 in 0..g.kernel[1] {
                for k2 in 0..g.kernel[2] {
                    let row = (c * kv) + (k0 * g.kernel[1] + k1) * g.kernel[2] + k2;
                    let srcrow = &cols[row * ov..(row + 1) * ov];
                    let mut o = 0;
                    for o0 in 0..g.output[0] {
                        let s0 = src(o0, k0, g, 0);
                        for o1 in 0..g.output[1] {
                            let s1 = src(o1, k1, g, 1);
                            match (s0, s1) {
                                (Some(a), Some(b)) => {
                                    let base = (a * i1 + b) * i2;
                                    for o2 in 0..g.output[2] {
                                        if let Some(c2) = src(o2, k2, g, 2) {
                                            xc[base + c2] = xc[base + c2] + srcrow[o];
                                        }
                                        o += 1;
                                    }
                                }
                                _ => o += g.output[2],
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

fn add_channel_bias<S: Scalar>(y: &mut [S], bias: &[S]) {
    let per = y.len() / bias.len();
    for (chunk, b) in y.chunks_mut(per).zip(bias) {
        chunk.iter_mut().for_each(|v| *v = *v + *b);
    }
}

fn channel_sums<S: Scalar>(g: &[S], channels: usize) -> Vec<S> {
    let per = g.len() / channels;
    g.chunks(per).map(|c| c.iter().copied().sum()).collect()
}

impl<S: Scalar> Graph<S> {
    fn check_bias(&self, op: &'static str, b: Option<Var>, channels: usize) -> Result<()> {
        if let Some(b) = b {
            if self.shape(b) != [channels] {
                return Err(Error::shape(
                    op,
                    format!("bias {:?} for {channels} output channels", self.shape(b)),
                ));
            }
        }
        Ok(())
    }

    /// Convolution; the spatial rank is taken from the weight.
    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if ws.len() < 3 || xs.len() != ws.len() - 1 || xs[0] != ws[1] {
            return Err(Error::shape("conv", format!("input {xs:?} vs weight {ws:?}")));
        }
        let (cout, cin) = (ws[0], ws[1]);
        self.check_bias("conv", b, cout)?;
        let geom = conv_geom("conv", cin, &xs[1..], &ws[2..], spec)?;
        let (ck, ov) = (cin * geom.kvol(), geom.out_vol());
        let cols = im2col(self.value(x).data(), &geom);
        let mut y = vec![S::zero(); cout * ov];
        blas::gemm(false, false, cout, ck, ov, self.value(w).data(), &cols, &mut y, false);
        drop(cols);
        if let Some(b) = b {
            add_channel_bias(&mut y, self.value(b).data());
        }
        let mut out_shape = vec![cout];
        out_shape.extend_from_slice(&geom.output[3 - (xs.len() - 1)..]);
        let out = Tensor::new(&out_shape, y)?;
        let parents: Vec<Var> = [x, w].into_iter().chain(b).collect();
        Ok(self.push_op(
            out,
            &parents,
            Box::new(move |ctx| {
                let (x, w) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let gy = ctx.grad;
                let mut res = vec![None, None];
                if ctx.needs[1] {
                    let cols = im2col(x, &geom);
                    let mut gw = vec![S::zero(); cout * ck];
                    blas::gemm(false, true, cout, ov, ck, gy, &cols, &mut gw, false);
                    res[1] = Some(gw);
                }
                if ctx.needs[0] {
                    let mut gcols = vec![S::zero(); ck * ov];
                    blas::gemm(true, false, ck, cout, ov, w, gy, &mut gcols, false);
                    res[0] = Some(col2im(&gcols, &geom));
                }
                if ctx.inputs.len() == 3 {
                    res.push(ctx.needs[2].then(|| channel_sums(gy, cout)));
                }
                res
            }),
        ))
    }

    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        self.expect_rank("conv1d", w, 3)?;
        self.conv(x, w, b, spec)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        self.expect_rank("conv2d", w, 4)?;
        self.conv(x, w, b, spec)
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        self.expect_rank("conv3d", w, 5)?;
        self.conv(x, w, b, spec)
    }

    /// Transposed convolution (the adjoint of [`Graph::conv`] in its input).
    pub fn conv_transpose(&mut self, x: Var, w: Var, b: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if ws.len() < 3 || xs.len() != ws.len() - 1 || xs[0] != ws[0] {
            return Err(Error::shape("conv_transpose", format!("input {xs:?} vs weight {ws:?}")));
        }
        let (cin, cout) = (ws[0], ws[1]);
        self.check_bias("conv_transpose", b, cout)?;
        let r = xs.len() - 1;
        if spec.rank() != r || spec.padding.len() != r || spec.dilation.len() != r {
            return Err(Error::shape("conv_transpose", format!("spec {spec:?} for rank {r}")));
        }
        let mut out_ext = Vec::with_capacity(r);
        for i in 0..r {
            let span = spec.dilation[i] * (ws[2 + i] - 1) + 1;
            let full = (xs[1 + i] - 1) * spec.stride[i] + span;
            if full <= 2 * spec.padding[i] {
                return Err(Error::shape(
                    "conv_transpose",
                    format!("non-positive output extent on axis {i} for input {xs:?}"),
                ));
            }
            out_ext.push(full - 2 * spec.padding[i]);
        }
        // Geometry of the forward convolution whose adjoint this is.
        let geom = conv_geom("conv_transpose", cout, &out_ext, &ws[2..], spec)?;
        debug_assert_eq!(&geom.output[3 - r..], &xs[1..]);
        let (ck, nin) = (cout * geom.kvol(), geom.out_vol());
        let mut cols = vec![S::zero(); ck * nin];
        blas::gemm(true, false, ck, cin, nin, self.value(w).data(), self.value(x).data(), &mut cols, false);
        let mut y = col2im(&cols, &geom);
        drop(cols);
        if let Some(b) = b {
            add_channel_bias(&mut y, self.value(b).data());
        }
        let mut out_shape = vec![cout];
        out_shape.extend_from_slice(&out_ext);
        let out = Tensor::new(&out_shape, y)?;
        let parents: Vec<Var> = [x, w].into_iter().chain(b).collect();
        Ok(self.push_op(
            out,
            &parents,
            Box::new(move |ctx| {
                let (x, w) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let gcols = im2col(ctx.grad, &geom);
                let mut res = vec![None, None];
                if ctx.needs[0] {
                    let mut gx = vec![S::zero(); cin * nin];
                    blas::gemm(false, false, cin, ck, nin, w, &gcols, &mut gx, false);
                    res[0] = Some(gx);
                }
                if ctx.needs[1] {
                    let mut gw = vec![S::zero(); cin * ck];
                    blas::gemm(false, true, cin, nin, ck, x, &gcols, &mut gw, false);
                    res[1] = Some(gw);
                }
                if ctx.inputs.len() == 3 {
                    res.push(ctx.needs[2].then(|| channel_sums(ctx.grad, cout)));
                }
                res
            }),
        ))
    }

    pub fn conv_transpose1d(&mut self, x: Var, w: Var, b: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        self.expect_rank("conv_transpose1d", w, 3)?;
        self.conv_transpose(x, w, b, spec)
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        self.expect_rank("conv_transpose2d", w, 4)?;
        self.conv_transpose(x, w, b, spec)
    }

    fn expect_rank(&self, op: &'static str, w: Var, rank: usize) -> Result<()> {
        if self.shape(w).len() != rank {
            return Err(Error::shape(op, format!("weight {:?} must have rank {rank}", self.shape(w))));
        }
        Ok(())
    }
}
