//! Parameterised convolution and normalisation layers.

use rand::Rng;

use super::{ConvSpec, Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Convolution with weight `[C_out, C_in, *kernel]` and a bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
}

impl Conv {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: &[usize],
        spec: ConvSpec,
        rng: &mut R,
    ) -> Result<Self> {
        if spec.rank() != kernel.len() {
            return Err(Error::Config(format!("{name}: kernel {kernel:?} vs spec rank {}", spec.rank())));
        }
        let fan_in = cin * kernel.iter().product::<usize>();
        let mut shape = vec![cout, cin];
        shape.extend_from_slice(kernel);
        Ok(Self {
            weight: store.add_uniform(format!("{name}.weight"), &shape, fan_in, rng)?,
            bias: Some(store.add_uniform(format!("{name}.bias"), &[cout], fan_in, rng)?),
            spec,
        })
    }

    /// Convolution without a bias term.
    pub fn without_bias<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: &[usize],
        spec: ConvSpec,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = cin * kernel.iter().product::<usize>();
        let mut shape = vec![cout, cin];
        shape.extend_from_slice(kernel);
        Ok(Self {
            weight: store.add_uniform(format!("{name}.weight"), &shape, fan_in, rng)?,
            bias: None,
            spec,
        })
    }

    /// Same layer with weight and bias set to zero.
    pub fn zeroed<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: &[usize],
        spec: ConvSpec,
        rng: &mut R,
    ) -> Result<Self> {
        let layer = Self::new(store, name, cin, cout, kernel, spec, rng)?;
        store.value_mut(layer.weight).data_mut().fill(S::zero());
        if let Some(b) = layer.bias {
            store.value_mut(b).data_mut().fill(S::zero());
        }
        Ok(layer)
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.conv(x, w, b, &self.spec)
    }
}

/// Transposed convolution with weight `[C_in, C_out, *kernel]` and a bias.
#[derive(Clone, Debug)]
pub struct ConvTranspose {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: ConvSpec,
}

impl ConvTranspose {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: &[usize],
        spec: ConvSpec,
        rng: &mut R,
    ) -> Result<Self> {
        if spec.rank() != kernel.len() {
            return Err(Error::Config(format!("{name}: kernel {kernel:?} vs spec rank {}", spec.rank())));
        }
        let fan_in = cin * kernel.iter().product::<usize>();
        let mut shape = vec![cin, cout];
        shape.extend_from_slice(kernel);
        Ok(Self {
            weight: store.add_uniform(format!("{name}.weight"), &shape, fan_in, rng)?,
            bias: store.add_uniform(format!("{name}.bias"), &[cout], fan_in, rng)?,
            spec,
        })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv_transpose(x, w, Some(b), &self.spec)
    }
}

/// Layer normalisation over a feature axis of width `dim`.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add_full(format!("{name}.gamma"), &[dim], 1.0)?,
            beta: store.add_full(format!("{name}.beta"), &[dim], 0.0)?,
            dim,
        })
    }

    /// Normalises the last axis.
    pub fn forward_last<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm_last(x, gamma, beta, LN_EPS)
    }

    /// Normalises the leading (channel) axis of `[C, ...]`.
    pub fn forward_channels<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let rest: usize = shape[1..].iter().product();
        let flat = g.reshape(x, &[shape[0], rest])?;
        let t = g.transpose(flat)?;
        let y = self.forward_last(g, store, t)?;
        let back = g.transpose(y)?;
        g.reshape(back, &shape)
    }
}

