//! Cue fusion, the GridBlock stack and the spectrogram decoder.
//!
//! Tensors inside the separator are `[C, T, F]`. A GridBlock runs three
//! residual sub-modules in order:
//!
//! 1. intra-frame: channel layer norm, bi-LSTM across frequency for every
//!    frame, transposed conv (kernel 1x3) from `2H` back to `C`,
//! 2. sub-band: the same along time for every frequency bin (kernel 3x1),
//! 3. cross-frame attention: per-head 1x1 projections to `E` (query, key)
//!    and `C / heads` (value) channels, each frame flattened over channel and
//!    frequency, attention across frames, 1x1 output projection.
//!
//! The fused input is a 3x3 conv over the spectrogram's real/imag channels
//! stacked with every cue stream tiled along frequency. Because a tiled cue
//! is constant along frequency, its part of the conv reduces to three 1-D
//! convs over time (first bin, interior bins, last bin), which is what
//! [`Separator::fuse`] computes; [`Separator::fuse_tiled`] is the literal
//! version.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cues::{CueDims, CueEncoders, CueInputs, CueKind};
use crate::dsp::{self, StftConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::scenes::{MissingMask, Scene};
use crate::tensor::{BiLstm, Conv, ConvSpec, ConvTranspose, Graph, LayerNorm, Linear, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub preset: String,
    pub fusion_channels: usize,
    pub lstm_hidden: usize,
    /// LSTM input width; a linear map from `fusion_channels` is added when
    /// they differ.
    pub lstm_feature: usize,
    pub n_blocks: usize,
    pub heads: usize,
    /// Query/key channels per attention head.
    pub attn_dim: usize,
    pub active_cues: Vec<CueKind>,
    pub cues: CueDims,
    pub stft_win: usize,
    pub stft_hop: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk(&[CueKind::Lip])
    }
}

impl ModelConfig {
    pub fn desk(active_cues: &[CueKind]) -> Self {
        Self {
            preset: "desk".into(),
            fusion_channels: 16,
            lstm_hidden: 24,
            lstm_feature: 16,
            n_blocks: 2,
            heads: 2,
            attn_dim: 4,
            active_cues: active_cues.to_vec(),
            cues: CueDims::desk(),
            stft_win: 128,
            stft_hop: 64,
        }
    }

    pub fn full(active_cues: &[CueKind]) -> Self {
        Self {
            preset: "full".into(),
            fusion_channels: 128,
            lstm_hidden: 240,
            lstm_feature: 128,
            n_blocks: 6,
            heads: 4,
            attn_dim: 4,
            active_cues: active_cues.to_vec(),
            cues: CueDims::full(),
            stft_win: 128,
            stft_hop: 64,
        }
    }

    pub fn stft(&self) -> StftConfig {
        StftConfig { win: self.stft_win, hop: self.stft_hop }
    }

    /// Active cues in fusion order, deduplicated.
    pub fn ordered_cues(&self) -> Vec<CueKind> {
        CueKind::ALL.into_iter().filter(|k| self.active_cues.contains(k)).collect()
    }

    pub fn is_active(&self, kind: CueKind) -> bool {
        self.active_cues.contains(&kind)
    }

    pub fn fusion_input_channels(&self) -> usize {
        2 + self.ordered_cues().iter().map(|&k| self.cues.dim(k)).sum::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        if !self.is_active(CueKind::Lip) {
            return Err(Error::Config("the lip cue must always be active".into()));
        }
        self.validate_structure()
    }

    /// Every rule except the lip requirement.
    fn validate_structure(&self) -> Result<()> {
        if self.n_blocks == 0 {
            return Err(Error::Config("n_blocks must be at least 1".into()));
        }
        let positive = [
            ("fusion_channels", self.fusion_channels),
            ("lstm_hidden", self.lstm_hidden),
            ("lstm_feature", self.lstm_feature),
            ("attn_dim", self.attn_dim),
            ("heads", self.heads),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.fusion_channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "fusion_channels {} not divisible by {} heads",
                self.fusion_channels, self.heads
            )));
        }
        for k in self.ordered_cues() {
            if self.cues.dim(k) == 0 {
                return Err(Error::Config(format!("{} cue dimension must be positive", k.label())));
            }
        }
        self.stft().validate()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }
}

/// Bi-LSTM path along one axis of `[C, T, F]`.
#[derive(Clone, Debug)]
struct DualPathModule {
    norm: LayerNorm,
    proj: Option<Linear>,
    lstm: BiLstm,
    out: ConvTranspose,
    /// True: sequences run along frequency (one per frame).
    along_freq: bool,
}

impl DualPathModule {
    fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        name: &str,
        config: &ModelConfig,
        along_freq: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let c = config.fusion_channels;
        let proj = (config.lstm_feature != c)
            .then(|| Linear::new(store, &format!("{name}.proj"), c, config.lstm_feature, false, rng))
            .transpose()?;
        let (kernel, spec) = if along_freq {
            ([1, 3], ConvSpec::new(&[1, 1], &[0, 1]))
        } else {
            ([3, 1], ConvSpec::new(&[1, 1], &[1, 0]))
        };
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), c)?,
            proj,
            lstm: BiLstm::new(store, &format!("{name}.lstm"), config.lstm_feature, config.lstm_hidden, rng)?,
            out: ConvTranspose::new(store, &format!("{name}.out"), 2 * config.lstm_hidden, c, &kernel, spec, rng)?,
            along_freq,
        })
    }

    fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (c, t, f) = (s[0], s[1], s[2]);
        // sequences [B, L, C]
        let (perm, b, l) = if self.along_freq { ([1, 2, 0], t, f) } else { ([2, 1, 0], f, t) };
        let seq = g.permute(x, &perm)?;
        let seq = self.norm.forward_last(g, store, seq)?;
        let seq = match &self.proj {
            Some(p) => {
                let flat = g.reshape(seq, &[b * l, c])?;
                let y = p.forward(g, store, flat)?;
                g.reshape(y, &[b, l, p.out_dim])?
            }
            None => seq,
        };
        let h = self.lstm.forward(g, store, seq)?;
        // back to [2H, T, F]
        let back = if self.along_freq { [2, 0, 1] } else { [2, 1, 0] };
        let h = g.permute(h, &back)?;
        let y = self.out.forward(g, store, h)?;
        g.add(x, y)
    }
}

/// Cross-frame self-attention over `[C, T, F]`.
#[derive(Clone, Debug)]
struct FrameAttention {
    norm: LayerNorm,
    heads: Vec<(Conv, Conv, Conv)>,
    out: Conv,
}

impl FrameAttention {
    fn new<S: Scalar, R: Rng>(store: &mut ParamStore<S>, name: &str, config: &ModelConfig, rng: &mut R) -> Result<Self> {
        let c = config.fusion_channels;
        let dv = c / config.heads;
        let pw = || ConvSpec::unit(2);
        let heads = (0..config.heads)
            .map(|h| {
                Ok((
                    Conv::new(store, &format!("{name}.h{h}.q"), c, config.attn_dim, &[1, 1], pw(), rng)?,
                    Conv::without_bias(store, &format!("{name}.h{h}.k"), c, config.attn_dim, &[1, 1], pw(), rng)?,
                    Conv::new(store, &format!("{name}.h{h}.v"), c, dv, &[1, 1], pw(), rng)?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), c)?,
            heads,
            out: Conv::new(store, &format!("{name}.out"), c, c, &[1, 1], pw(), rng)?,
        })
    }

    fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (t, f) = (s[1], s[2]);
        let n = self.norm.forward_channels(g, store, x)?;
        // [E, T, F] -> [T, E * F]
        let frames = |g: &mut Graph<S>, v: Var| -> Result<Var> {
            let e = g.shape(v)[0];
            let p = g.permute(v, &[1, 0, 2])?;
            g.reshape(p, &[t, e * f])
        };
        let mut outs = Vec::with_capacity(self.heads.len());
        for (qc, kc, vc) in &self.heads {
            let q = qc.forward(g, store, n)?;
            let q = frames(g, q)?;
            let k = kc.forward(g, store, n)?;
            let k = frames(g, k)?;
            let v = vc.forward(g, store, n)?;
            let dv = g.shape(v)[0];
            let v = frames(g, v)?;
            let a = g.scaled_dot_attention(q, k, v)?;
            let a = g.reshape(a, &[t, dv, f])?;
            outs.push(g.permute(a, &[1, 0, 2])?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 0)? };
        let y = self.out.forward(g, store, cat)?;
        g.add(x, y)
    }
}

#[derive(Clone, Debug)]
pub struct GridBlock {
    intra: DualPathModule,
    inter: DualPathModule,
    attention: FrameAttention,
}

impl GridBlock {
    pub fn new<S: Scalar, R: Rng>(store: &mut ParamStore<S>, name: &str, config: &ModelConfig, rng: &mut R) -> Result<Self> {
        Ok(Self {
            intra: DualPathModule::new(store, &format!("{name}.intra"), config, true, rng)?,
            inter: DualPathModule::new(store, &format!("{name}.inter"), config, false, rng)?,
            attention: FrameAttention::new(store, &format!("{name}.attn"), config, rng)?,
        })
    }

    /// `[C, T, F] -> [C, T, F]`.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[0] != self.intra.norm.dim {
            return Err(Error::shape("gridblock", format!("expected [{}, T, F], got {s:?}", self.intra.norm.dim)));
        }
        let x = self.intra.forward(g, store, x)?;
        let x = self.inter.forward(g, store, x)?;
        self.attention.forward(g, store, x)
    }
}

/// Everything the model reads for one utterance, already normalised.
#[derive(Clone, Debug)]
pub struct ModelInput<S> {
    /// Mixture scaled to unit RMS.
    pub mixture: Vec<S>,
    /// Factor that undoes the normalisation.
    pub mixture_rms: f64,
    pub lip_frames: Tensor<S>,
    pub expr_frames: Tensor<S>,
    pub face_image: Tensor<S>,
    /// `[2, Te, F]` spectrogram of the unit-RMS enrollment.
    pub enrollment: Tensor<S>,
    pub mask: Vec<u8>,
}

fn unit_rms<S: Scalar>(x: &[f32]) -> (Vec<S>, f64) {
    let rms = (x.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / x.len().max(1) as f64).sqrt();
    let k = if rms > 0.0 { 1.0 / rms } else { 1.0 };
    (x.iter().map(|&v| S::from_f64_lossy(v as f64 * k)).collect(), rms)
}

impl<S: Scalar> ModelInput<S> {
    /// Inputs for a scene whose temporal cues have already been masked (see
    /// [`crate::scenes::apply_missing`]); `mask` additionally zeroes the
    /// embedding columns of missing frames.
    pub fn from_scene(scene: &Scene, mask: &MissingMask, stft: StftConfig) -> Result<Self> {
        if mask.len() != scene.video_frames() {
            return Err(Error::shape(
                "forward",
                format!("mask has {} frames, scene {}", mask.len(), scene.video_frames()),
            ));
        }
        let (mixture, mixture_rms) = unit_rms::<S>(&scene.mixture);
        let (enroll, _) = unit_rms::<S>(&scene.enrollment.samples);
        if enroll.is_empty() {
            return Err(Error::Input("empty enrollment".into()));
        }
        Ok(Self {
            mixture,
            mixture_rms,
            lip_frames: scene.lip_frames.cast(),
            expr_frames: scene.expr_frames.cast(),
            face_image: scene.face_image.cast(),
            enrollment: dsp::stft(&enroll, stft)?.values,
            mask: mask.frames.clone(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct Separator {
    pub config: ModelConfig,
    pub cues: CueEncoders,
    fusion_weight: ParamId,
    fusion_bias: ParamId,
    pub blocks: Vec<GridBlock>,
    decoder: ConvTranspose,
}

impl Separator {
    pub fn new<S: Scalar, R: Rng>(config: &ModelConfig, store: &mut ParamStore<S>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        Self::build(config, store, rng)
    }

    /// Test-harness model that may run without any cue (spectrogram-only
    /// fusion).
    pub fn new_harness<S: Scalar, R: Rng>(config: &ModelConfig, store: &mut ParamStore<S>, rng: &mut R) -> Result<Self> {
        config.validate_structure()?;
        Self::build(config, store, rng)
    }

    fn build<S: Scalar, R: Rng>(config: &ModelConfig, store: &mut ParamStore<S>, rng: &mut R) -> Result<Self> {
        let bins = config.stft().bins();
        let cues = CueEncoders::new(store, &config.cues, &config.ordered_cues(), bins, rng)?;
        let cin = config.fusion_input_channels();
        let c = config.fusion_channels;
        let fusion_weight = store.add_uniform("fusion.weight", &[c, cin, 3, 3], cin * 9, rng)?;
        let fusion_bias = store.add_uniform("fusion.bias", &[c], cin * 9, rng)?;
        let blocks = (0..config.n_blocks)
            .map(|i| GridBlock::new(store, &format!("block{i}"), config, rng))
            .collect::<Result<_>>()?;
        let decoder = ConvTranspose::new(store, "decoder", c, 2, &[3, 3], ConvSpec::same(&[3, 3]), rng)?;
        Ok(Self { config: config.clone(), cues, fusion_weight, fusion_bias, blocks, decoder })
    }

    fn check_cues<S: Scalar>(&self, g: &Graph<S>, spec: Var, cues: &[Var]) -> Result<(usize, usize)> {
        let s = g.shape(spec).to_vec();
        if s.len() != 3 || s[0] != 2 {
            return Err(Error::shape("fuse", format!("spectrogram must be [2, T, F], got {s:?}")));
        }
        let order = self.config.ordered_cues();
        let dims: usize = cues.iter().map(|&c| g.shape(c)[0]).sum();
        if 2 + dims != self.config.fusion_input_channels() || cues.len() != order.len() {
            return Err(Error::Config(format!(
                "fusion expects {} cue streams with {} channels in total",
                order.len(),
                self.config.fusion_input_channels() - 2
            )));
        }
        for (&c, kind) in cues.iter().zip(&order) {
            let cs = g.shape(c);
            if cs.len() != 2 || cs[1] != s[1] || cs[0] != self.config.cues.dim(*kind) {
                return Err(Error::shape(
                    "fuse",
                    format!("{} cue {cs:?} does not match {} frames", kind.label(), s[1]),
                ));
            }
        }
        Ok((s[1], s[2]))
    }

    /// Literal fusion: tile every cue over frequency, concatenate, 3x3 conv.
    pub fn fuse_tiled<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, spec: Var, cues: &[Var]) -> Result<Var> {
        let (t, f) = self.check_cues(g, spec, cues)?;
        let mut parts = vec![spec];
        for &c in cues {
            let d = g.shape(c)[0];
            let col = g.reshape(c, &[d, t, 1])?;
            parts.push(g.repeat(col, 2, f)?);
        }
        let x = if parts.len() == 1 { spec } else { g.concat(&parts, 0)? };
        let w = g.param(store, self.fusion_weight);
        let b = g.param(store, self.fusion_bias);
        g.conv2d(x, w, Some(b), &ConvSpec::same(&[3, 3]))
    }

    /// Fusion conv `[2, T, F]` + cue streams `[D_i, T]` -> `[C, T, F]`.
    pub fn fuse<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, spec: Var, cues: &[Var]) -> Result<Var> {
        let (t, f) = self.check_cues(g, spec, cues)?;
        if cues.is_empty() || f < 2 {
            return self.fuse_tiled(g, store, spec, cues);
        }
        let c = self.config.fusion_channels;
        let w = g.param(store, self.fusion_weight);
        let b = g.param(store, self.fusion_bias);
        let cin = g.shape(w)[1];
        let w_spec = g.slice(w, 1, 0, 2)?;
        let y = g.conv2d(spec, w_spec, Some(b), &ConvSpec::same(&[3, 3]))?;
        let w_cue = g.slice(w, 1, 2, cin - 2)?;
        let taps: Vec<Var> = (0..3).map(|k| g.slice(w_cue, 3, k, 1)).collect::<Result<_>>()?;
        let kshape = [c, cin - 2, 3];
        let kernel = |g: &mut Graph<S>, idx: &[usize]| -> Result<Var> {
            let mut acc = taps[idx[0]];
            for &i in &idx[1..] {
                acc = g.add(acc, taps[i])?;
            }
            g.reshape(acc, &kshape)
        };
        // frequency tap k reads bin f + k - 1; edge bins miss one tap
        let k_first = kernel(g, &[1, 2])?;
        let k_mid = kernel(g, &[0, 1, 2])?;
        let k_last = kernel(g, &[0, 1])?;
        let u = if cues.len() == 1 { cues[0] } else { g.concat(cues, 0)? };
        let spec1 = ConvSpec::same(&[3]);
        let col = |g: &mut Graph<S>, k: Var, width: usize| -> Result<Var> {
            let v = g.conv1d(u, k, None, &spec1)?;
            let v = g.reshape(v, &[c, t, 1])?;
            if width == 1 { Ok(v) } else { g.repeat(v, 2, width) }
        };
        let first = col(g, k_first, 1)?;
        let last = col(g, k_last, 1)?;
        let cue_part = if f == 2 {
            g.concat(&[first, last], 2)?
        } else {
            let mid = col(g, k_mid, f - 2)?;
            g.concat(&[first, mid, last], 2)?
        };
        g.add(y, cue_part)
    }

    /// GridBlocks then the decoding transposed conv: `[C, T, F] -> [2, T, F]`.
    pub fn separate<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, fused: Var) -> Result<Var> {
        let s = g.shape(fused).to_vec();
        if s.len() != 3 || s[0] != self.config.fusion_channels {
            return Err(Error::Config(format!(
                "fused feature {s:?} does not have {} channels",
                self.config.fusion_channels
            )));
        }
        let mut x = fused;
        for block in &self.blocks {
            x = block.forward(g, store, x)?;
        }
        self.decoder.forward(g, store, x)
    }

    /// Full pipeline on a graph; returns the estimate at unit-RMS mixture
    /// scale as a `[N]` node.
    pub fn forward_graph<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, input: &ModelInput<S>) -> Result<Var> {
        let stft = self.config.stft();
        let spec = dsp::stft(&input.mixture, stft)?;
        let t = spec.frames();
        let n = input.mixture.len();
        let spec_var = g.constant(spec.values);
        let cue_inputs = CueInputs {
            lip_frames: Some(&input.lip_frames),
            expr_frames: Some(&input.expr_frames),
            face_image: Some(&input.face_image),
            enrollment: Some(&input.enrollment),
            mask: Some(&input.mask),
        };
        let streams = self.cues.encode(g, store, &cue_inputs, spec_var, t)?;
        let fused = self.fuse(g, store, spec_var, &streams)?;
        let est = self.separate(g, store, fused)?;
        g.istft(est, stft, n)
    }

    /// Inference: estimated target waveform at the mixture's scale.
    pub fn forward<S: Scalar>(&self, store: &ParamStore<S>, input: &ModelInput<S>) -> Result<Vec<f32>> {
        let mut g = Graph::new();
        let y = self.forward_graph(&mut g, store, input)?;
        let k = input.mixture_rms;
        Ok(g.value(y).data().iter().map(|v| (v.to_f64_lossy() * k) as f32).collect())
    }
}

/// Separates one scene with its temporal cues masked by `mask`.
pub fn forward<S: Scalar>(
    model: &Separator,
    store: &ParamStore<S>,
    scene: &Scene,
    mask: &MissingMask,
) -> Result<Vec<f32>> {
    let masked = crate::scenes::apply_missing(scene, mask)?;
    let input = ModelInput::<S>::from_scene(&masked, mask, model.config.stft())?;
    model.forward(store, &input)
}
