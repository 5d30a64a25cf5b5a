//! Fused LSTM recurrence with hand-written backpropagation through time.
//!
//! Gate layout in every `4H` block is `[input, forget, cell, output]`;
//! `i, f, o` use the logistic sigmoid and the cell candidate uses tanh.
//! No peepholes. The forget-gate bias starts at 1.0, everything else at
//! uniform(-1/sqrt(H), 1/sqrt(H)).

use rand::Rng;

use super::ops::{sigmoid, tanh};
use super::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::blas;
use crate::scalar::Scalar;

impl<S: Scalar> Graph<S> {
    /// One-directional LSTM over `x [B, L, Din]` (B independent sequences of
    /// length L), returning hidden states `[B, L, H]`. With `reverse` the
    /// recurrence runs from the last step to the first.
    pub fn lstm(&mut self, x: Var, w_ih: Var, w_hh: Var, bias: Var, reverse: bool) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (wis, whs, bs) = (self.shape(w_ih), self.shape(w_hh), self.shape(bias));
        if xs.len() != 3 || wis.len() != 2 || whs.len() != 2 || bs.len() != 1 {
            return Err(Error::shape("lstm", format!("x {xs:?}, w_ih {wis:?}, w_hh {whs:?}, bias {bs:?}")));
        }
        let (b, l, din) = (xs[0], xs[1], xs[2]);
        let h = whs[0];
        let g4 = 4 * h;
        if wis[0] != din || wis[1] != g4 || whs[1] != g4 || bs[0] != g4 {
            return Err(Error::shape("lstm", format!("x {xs:?}, w_ih {wis:?}, w_hh {whs:?}, bias {bs:?}")));
        }
        let (wih, whh, bv) = (self.value(w_ih).data(), self.value(w_hh).data(), self.value(bias).data());

        // input projections for every (sequence, step)
        let mut xg = vec![S::zero(); b * l * g4];
        xg.chunks_mut(g4).for_each(|r| r.copy_from_slice(bv));
        blas::gemm(false, false, b * l, din, g4, self.value(x).data(), wih, &mut xg, true);

        // per-step caches in step order
        let mut acts = vec![S::zero(); l * b * g4];
        let mut cells = vec![S::zero(); l * b * h];
        let mut cell_tanh = vec![S::zero(); l * b * h];
        let mut hidden = vec![S::zero(); l * b * h];
        let mut y = vec![S::zero(); b * l * h];
        for s in 0..l {
            let t = if reverse { l - 1 - s } else { s };
            let a = &mut acts[s * b * g4..(s + 1) * b * g4];
            for bi in 0..b {
                a[bi * g4..(bi + 1) * g4].copy_from_slice(&xg[(bi * l + t) * g4..(bi * l + t + 1) * g4]);
            }
            if s > 0 {
                let hp = &hidden[(s - 1) * b * h..s * b * h];
                blas::gemm(false, false, b, h, g4, hp, whh, a, true);
            }
            for bi in 0..b {
                let ar = &mut a[bi * g4..(bi + 1) * g4];
                for j in 0..h {
                    ar[j] = sigmoid(ar[j]);
                    ar[h + j] = sigmoid(ar[h + j]);
                    ar[2 * h + j] = tanh(ar[2 * h + j]);
                    ar[3 * h + j] = sigmoid(ar[3 * h + j]);
                }
                for j in 0..h {
                    let cp = if s > 0 { cells[((s - 1) * b + bi) * h + j] } else { S::zero() };
                    let c = ar[h + j] * cp + ar[j] * ar[2 * h + j];
                    let tc = tanh(c);
                    let hv = ar[3 * h + j] * tc;
                    cells[(s * b + bi) * h + j] = c;
                    cell_tanh[(s * b + bi) * h + j] = tc;
                    hidden[(s * b + bi) * h + j] = hv;
                    y[(bi * l + t) * h + j] = hv;
                }
            }
        }
        drop(xg);
        let out = Tensor::new(&[b, l, h], y)?;
        Ok(self.push_op(
            out,
            &[x, w_ih, w_hh, bias],
            Box::new(move |ctx| {
                let (x, wih, whh) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.inputs[2].data());
                let gy = ctx.grad;
                // dA in [B, L, 4H] layout so the input-side products are single GEMMs
                let mut da_all = vec![S::zero(); b * l * g4];
                let mut gwhh = vec![S::zero(); h * g4];
                let mut dh_next = vec![S::zero(); b * h];
                let mut dc_next = vec![S::zero(); b * h];
                let mut da = vec![S::zero(); b * g4];
                for s in (0..l).rev() {
                    let t = if reverse { l - 1 - s } else { s };
                    let a = &acts[s * b * g4..(s + 1) * b * g4];
                    for bi in 0..b {
                        let ar = &a[bi * g4..(bi + 1) * g4];
                        let dar = &mut da[bi * g4..(bi + 1) * g4];
                        for j in 0..h {
                            let k = bi * h + j;
                            let dh = gy[(bi * l + t) * h + j] + dh_next[k];
                            let cp = if s > 0 { cells[(s - 1) * b * h + k] } else { S::zero() };
                            let (ig, fg, cg, og) = (ar[j], ar[h + j], ar[2 * h + j], ar[3 * h + j]);
                            let tc = cell_tanh[s * b * h + k];
                            let d_o = dh * tc;
                            let dc = dh * og * (S::one() - tc * tc) + dc_next[k];
                            dar[j] = dc * cg * ig * (S::one() - ig);
                            dar[h + j] = dc * cp * fg * (S::one() - fg);
                            dar[2 * h + j] = dc * ig * (S::one() - cg * cg);
                            dar[3 * h + j] = d_o * og * (S::one() - og);
                            dc_next[k] = dc * fg;
                        }
                        da_all[(bi * l + t) * g4..(bi * l + t + 1) * g4].copy_from_slice(dar);
                    }
                    if s > 0 {
                        let hp = &hidden[(s - 1) * b * h..s * b * h];
                        blas::gemm(true, false, h, b, g4, hp, &da, &mut gwhh, true);
                        blas::gemm(false, true, b, g4, h, &da, whh, &mut dh_next, false);
                    } else {
                        dh_next.iter_mut().for_each(|v| *v = S::zero());
                    }
                }
                let gx = ctx.needs[0].then(|| {
                    let mut gx = vec![S::zero(); b * l * din];
                    blas::gemm(false, true, b * l, g4, din, &da_all, wih, &mut gx, false);
                    gx
                });
                let gwih = ctx.needs[1].then(|| {
                    let mut gw = vec![S::zero(); din * g4];
                    blas::gemm(true, false, din, b * l, g4, x, &da_all, &mut gw, false);
                    gw
                });
                let gb = ctx.needs[3].then(|| {
                    let mut gb = vec![S::zero(); g4];
                    for r in da_all.chunks(g4) {
                        gb.iter_mut().zip(r).for_each(|(a, v)| *a = *a + *v);
                    }
                    gb
                });
                vec![gx, gwih, Some(gwhh), gb]
            }),
        ))
    }
}

#[derive(Clone, Debug)]
struct Direction {
    w_ih: ParamId,
    w_hh: ParamId,
    bias: ParamId,
}

/// Bidirectional LSTM; output is `[forward | backward]` on the feature axis.
#[derive(Clone, Debug)]
pub struct BiLstm {
    fwd: Direction,
    bwd: Direction,
    pub input_dim: usize,
    pub hidden: usize,
}

impl BiLstm {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        name: &str,
        input_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::Config(format!("{name}: LSTM hidden size must be positive")));
        }
        if input_dim == 0 {
            return Err(Error::Config(format!("{name}: LSTM input size must be positive")));
        }
        let mut dir = |tag: &str| -> Result<Direction> {
            let w_ih = store.add_uniform(format!("{name}.{tag}.w_ih"), &[input_dim, 4 * hidden], hidden, rng)?;
            let w_hh = store.add_uniform(format!("{name}.{tag}.w_hh"), &[hidden, 4 * hidden], hidden, rng)?;
            let bound = 1.0 / (hidden as f64).sqrt();
            let b = Tensor::from_fn(&[4 * hidden], |i| {
                if (hidden..2 * hidden).contains(&i) {
                    S::one()
                } else {
                    S::from_f64_lossy(rng.gen_range(-bound..=bound))
                }
            });
            let bias = store.add(format!("{name}.{tag}.bias"), b)?;
            Ok(Direction { w_ih, w_hh, bias })
        };
        let fwd = dir("fwd")?;
        let bwd = dir("bwd")?;
        Ok(Self {
            fwd,
            bwd,
            input_dim,
            hidden,
        })
    }

    pub fn output_dim(&self) -> usize {
        2 * self.hidden
    }

    /// `x [B, L, Din] -> [B, L, 2H]`.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let run = |g: &mut Graph<S>, d: &Direction, reverse: bool| -> Result<Var> {
            let (wi, wh, b) = (g.param(store, d.w_ih), g.param(store, d.w_hh), g.param(store, d.bias));
            g.lstm(x, wi, wh, b, reverse)
        };
        let f = run(g, &self.fwd, false)?;
        let b = run(g, &self.bwd, true)?;
        g.concat(&[f, b], 2)
    }

    /// Single sequence `x [T, Din] -> [T, 2H]`.
    pub fn forward_seq<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 2 || s[0] == 0 {
            return Err(Error::shape("lstm_bidirectional", format!("expected [T, Din], got {s:?}")));
        }
        let x3 = g.reshape(x, &[1, s[0], s[1]])?;
        let y = self.forward(g, store, x3)?;
        g.reshape(y, &[s[0], 2 * self.hidden])
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::gradcheck::random_tensor;
    use crate::tensor::{grad_check, grad_check_params};

    /// Unfused single-sequence LSTM step loop, used as a forward oracle.
    fn reference_lstm(x: &Tensor<f64>, wih: &[f64], whh: &[f64], b: &[f64], h: usize, reverse: bool) -> Vec<f64> {
        let (l, din) = (x.shape()[0], x.shape()[1]);
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut hs = vec![0.0; h];
        let mut cs = vec![0.0; h];
        let mut out = vec![0.0; l * h];
        for s in 0..l {
            let t = if reverse { l - 1 - s } else { s };
            let mut a = b.to_vec();
            for (k, av) in a.iter_mut().enumerate() {
                for d in 0..din {
                    *av += x.at(&[t, d]) * wih[d * 4 * h + k];
                }
                for j in 0..h {
                    *av += hs[j] * whh[j * 4 * h + k];
                }
            }
            for j in 0..h {
                let (i, f, g, o) = (sig(a[j]), sig(a[h + j]), a[2 * h + j].tanh(), sig(a[3 * h + j]));
                cs[j] = f * cs[j] + i * g;
                hs[j] = o * cs[j].tanh();
                out[t * h + j] = hs[j];
            }
        }
        out
    }

    #[test]
    fn full_width_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let lstm = BiLstm::new(&mut store, "l", 128, 240, &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3, 128]));
        let y = lstm.forward_seq(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(y), &[3, 480]);
    }

    #[test]
    fn zero_hidden_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        assert!(matches!(BiLstm::new(&mut store, "l", 4, 0, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn zero_weights_and_input_give_zero_output() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[2, 4, 3]));
        let wi = g.constant(Tensor::zeros(&[3, 8]));
        let wh = g.constant(Tensor::zeros(&[2, 8]));
        let b = g.constant(Tensor::zeros(&[8]));
        for reverse in [false, true] {
            let y = g.lstm(x, wi, wh, b, reverse).unwrap();
            assert!(g.value(y).data().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn fused_matches_reference_loop() {
        let (l, din, h) = (5, 3, 4);
        let x = random_tensor::<f64>(&[2, l, din], 1);
        let wih = random_tensor::<f64>(&[din, 4 * h], 2);
        let whh = random_tensor::<f64>(&[h, 4 * h], 3);
        let b = random_tensor::<f64>(&[4 * h], 4);
        for reverse in [false, true] {
            let mut g = Graph::new();
            let (xv, a, c, d) = (g.constant(x.clone()), g.constant(wih.clone()), g.constant(whh.clone()), g.constant(b.clone()));
            let y = g.lstm(xv, a, c, d, reverse).unwrap();
            for bi in 0..2 {
                let xb = Tensor::new(&[l, din], x.data()[bi * l * din..(bi + 1) * l * din].to_vec()).unwrap();
                let oracle = reference_lstm(&xb, wih.data(), whh.data(), b.data(), h, reverse);
                let got = &g.value(y).data()[bi * l * h..(bi + 1) * l * h];
                for (a, o) in got.iter().zip(&oracle) {
                    assert!((a - o).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn all_weights_pass_grad_check() {
        // T=3, Din=2, H=2: every weight and bias of both directions
        for seed in 0..3u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::<f64>::new();
            let lstm = BiLstm::new(&mut store, "l", 2, 2, &mut rng).unwrap();
            let x = random_tensor::<f64>(&[3, 2], seed + 10);
            let w = random_tensor::<f64>(&[3, 4], seed + 20);
            let err = grad_check_params(
                &mut store,
                |g, s| {
                    let xv = g.constant(x.clone());
                    let y = lstm.forward_seq(g, s, xv)?;
                    let wv = g.constant(w.clone());
                    let p = g.mul(y, wv)?;
                    Ok(g.sum_all(p))
                },
                1e-5,
                usize::MAX,
            )
            .unwrap();
            assert!(err < 1e-5, "seed {seed}: {err}");
            let ex = grad_check(
                |g, xv| {
                    let y = lstm.forward_seq(g, &store, xv)?;
                    let wv = g.constant(w.clone());
                    let p = g.mul(y, wv)?;
                    Ok(g.sum_all(p))
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(ex < 1e-5, "seed {seed}: {ex}");
        }
    }
}
