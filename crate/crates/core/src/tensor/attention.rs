use rand::Rng;

use super::{Graph, Linear, ParamStore, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

impl<S: Scalar> Graph<S> {
    /// `softmax(q k^T / sqrt(d)) v` for `q [Tq, d]`, `k [Tk, d]`, `v [Tk, dv]`.
    pub fn scaled_dot_attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let d = self.shape(q)[1];
        let kt = self.transpose(k)?;
        let scores = self.matmul(q, kt)?;
        let scores = self.scale(scores, 1.0 / (d as f64).sqrt());
        let w = self.softmax_last(scores)?;
        self.matmul(w, v)
    }
}

/// Multi-head attention with learned input and output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q_proj: Linear,
    pub k_proj: Linear,
    pub v_proj: Linear,
    pub out_proj: Linear,
    pub dim: usize,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "{name}: model width {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q_proj: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng)?,
            // a key bias only shifts each score row, which softmax ignores
            k_proj: Linear::new(store, &format!("{name}.k"), dim, dim, false, rng)?,
            v_proj: Linear::new(store, &format!("{name}.v"), dim, dim, true, rng)?,
            out_proj: Linear::new(store, &format!("{name}.out"), dim, dim, true, rng)?,
            dim,
            heads,
        })
    }

    /// `q [Tq, D]`, `k, v [Tk, D]` -> `[Tq, D]`; the output follows the query length.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        q: Var,
        k: Var,
        v: Var,
    ) -> Result<Var> {
        for (role, x) in [("query", q), ("key", k), ("value", v)] {
            let s = g.shape(x);
            if s.len() != 2 || s[1] != self.dim {
                return Err(Error::shape(
                    "multihead_attention",
                    format!("{role} {s:?} does not have width {}", self.dim),
                ));
            }
        }
        if g.shape(k)[0] != g.shape(v)[0] {
            return Err(Error::shape(
                "multihead_attention",
                format!("key {:?} and value {:?} lengths differ", g.shape(k), g.shape(v)),
            ));
        }
        let qp = self.q_proj.forward(g, store, q)?;
        let kp = self.k_proj.forward(g, store, k)?;
        let vp = self.v_proj.forward(g, store, v)?;
        let dh = self.dim / self.heads;
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice(qp, 1, h * dh, dh)?;
            let kh = g.slice(kp, 1, h * dh, dh)?;
            let vh = g.slice(vp, 1, h * dh, dh)?;
            outs.push(g.scaled_dot_attention(qh, kh, vh)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 1)? };
        self.out_proj.forward(g, store, cat)
    }
}
