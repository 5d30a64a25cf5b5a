//! Reference-cue encoders and the V-TCN adapter.
//!
//! Every encoder yields a `[D, T_audio]` stream aligned with the mixture's
//! STFT frames:
//!
//! * lip: 3-D conv over (time, H, W), four residual stride-2 spatial stages,
//!   spatial average pooling, one embedding column per video frame,
//! * expression: the same kind of stack with purely per-frame kernels,
//! * face: 2-D conv stack on the still image pooled to one vector, tiled over
//!   time,
//! * voice: enrollment and mixture STFT frames projected to `D`, then
//!   cross-attention with the enrollment frames as queries.
//!
//! Video-rate and enrollment-rate streams are brought to the mixture frame
//! count by linear interpolation. Missing video frames zero the corresponding
//! embedding columns before interpolation and V-TCN.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Conv, ConvSpec, Graph, LayerNorm, Linear, MultiHeadAttention, ParamStore, Tensor, Var};

/// Smallest lip/expression/face frame side the frontends accept.
pub const MIN_FRAME_SIDE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CueKind {
    Lip,
    #[serde(rename = "expr")]
    Expression,
    Face,
    #[serde(rename = "aux")]
    Voice,
}

impl CueKind {
    /// Fusion order.
    pub const ALL: [CueKind; 4] = [CueKind::Lip, CueKind::Expression, CueKind::Face, CueKind::Voice];

    pub fn label(self) -> &'static str {
        match self {
            CueKind::Lip => "lip",
            CueKind::Expression => "expr",
            CueKind::Face => "face",
            CueKind::Voice => "aux",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "lip" => Ok(CueKind::Lip),
            "expr" | "expression" => Ok(CueKind::Expression),
            "face" => Ok(CueKind::Face),
            "aux" | "voice" => Ok(CueKind::Voice),
            other => Err(Error::Config(format!("unknown cue {other:?} (expected lip, expr, face, aux)"))),
        }
    }

    /// Whether the stream follows the video timeline and can go missing.
    pub fn is_temporal(self) -> bool {
        matches!(self, CueKind::Lip | CueKind::Expression)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CueDims {
    pub lip: usize,
    pub face: usize,
    pub expr: usize,
    pub voice: usize,
    pub voice_heads: usize,
    /// Channel width of the conv frontends.
    pub frontend_channels: usize,
    /// Start every V-TCN residual branch at zero.
    pub vtcn_zero_init: bool,
}

impl Default for CueDims {
    fn default() -> Self {
        Self::desk()
    }
}

impl CueDims {
    pub fn desk() -> Self {
        Self {
            lip: 32,
            face: 32,
            expr: 32,
            voice: 32,
            voice_heads: 4,
            frontend_channels: 8,
            vtcn_zero_init: true,
        }
    }

    pub fn full() -> Self {
        Self {
            lip: 256,
            face: 256,
            expr: 256,
            voice: 256,
            voice_heads: 8,
            frontend_channels: 64,
            vtcn_zero_init: true,
        }
    }

    pub fn dim(&self, kind: CueKind) -> usize {
        match kind {
            CueKind::Lip => self.lip,
            CueKind::Expression => self.expr,
            CueKind::Face => self.face,
            CueKind::Voice => self.voice,
        }
    }
}

/// `[src, dst]` matrix of linear-interpolation weights; first and last
/// columns map onto each other.
pub fn interpolation_matrix(src: usize, dst: usize) -> Result<Vec<f64>> {
    if dst == 0 {
        return Err(Error::Input("interpolation target length is zero".into()));
    }
    if src == 0 {
        return Err(Error::Input("cannot interpolate an empty stream".into()));
    }
    let mut m = vec![0.0; src * dst];
    for j in 0..dst {
        let pos = if dst == 1 || src == 1 {
            0.0
        } else {
            j as f64 * (src - 1) as f64 / (dst - 1) as f64
        };
        let i0 = (pos.floor() as usize).min(src - 1);
        let frac = pos - i0 as f64;
        m[i0 * dst + j] += 1.0 - frac;
        if frac > 0.0 {
            m[(i0 + 1) * dst + j] += frac;
        }
    }
    Ok(m)
}

impl<S: Scalar> Graph<S> {
    /// Linear interpolation of `x [D, T_in]` along time to `t_out` columns.
    pub fn interpolate_time(&mut self, x: Var, t_out: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("interpolate_time", format!("expected [D, T], got {s:?}")));
        }
        if s[1] == t_out {
            return Ok(x);
        }
        let m = interpolation_matrix(s[1], t_out)?;
        let m = self.constant(Tensor::from_f64(&[s[1], t_out], &m)?);
        self.matmul(x, m)
    }
}

/// Five residual dilated conv layers (kernel 3, dilations 1..16), each
/// `x + W_out elu(LN(conv(x)))`.
#[derive(Clone, Debug)]
pub struct Vtcn {
    layers: Vec<(Conv, LayerNorm, Conv)>,
    pub dim: usize,
}

pub const VTCN_DILATIONS: [usize; 5] = [1, 2, 4, 8, 16];

impl Vtcn {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        zero_init: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layers = Vec::new();
        for (i, &d) in VTCN_DILATIONS.iter().enumerate() {
            let spec = ConvSpec::new(&[1], &[d]).with_dilation(&[d]);
            let conv = Conv::new(store, &format!("{name}.{i}.conv"), dim, dim, &[3], spec, rng)?;
            let norm = LayerNorm::new(store, &format!("{name}.{i}.norm"), dim)?;
            let out_name = format!("{name}.{i}.out");
            let out = if zero_init {
                Conv::zeroed(store, &out_name, dim, dim, &[1], ConvSpec::unit(1), rng)?
            } else {
                Conv::new(store, &out_name, dim, dim, &[1], ConvSpec::unit(1), rng)?
            };
            layers.push((conv, norm, out));
        }
        Ok(Self { layers, dim })
    }

    /// `x [D, T] -> [D, T]`.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 2 || s[0] != self.dim {
            return Err(Error::shape("vtcn", format!("expected [{}, T], got {s:?}", self.dim)));
        }
        let mut h = x;
        for (conv, norm, out) in &self.layers {
            let y = conv.forward(g, store, h)?;
            let y = norm.forward_channels(g, store, y)?;
            let y = g.elu(y);
            let y = out.forward(g, store, y)?;
            h = g.add(h, y)?;
        }
        Ok(h)
    }
}

fn check_frames(op: &'static str, shape: &[usize]) -> Result<()> {
    if shape.len() != 4 || shape[1] == 0 {
        return Err(Error::shape(op, format!("expected [C, Tv, H, W], got {shape:?}")));
    }
    if shape[2] < MIN_FRAME_SIDE || shape[3] < MIN_FRAME_SIDE {
        return Err(Error::Input(format!(
            "{op}: frames {}x{} are below the {MIN_FRAME_SIDE}x{MIN_FRAME_SIDE} minimum",
            shape[2], shape[3]
        )));
    }
    Ok(())
}

/// Spatial mean of `[C, ..., H, W]` folded to `[C, ...]` (last two axes pooled).
fn pool_hw<S: Scalar>(g: &mut Graph<S>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let n = s.len();
    let mut flat: Vec<usize> = s[..n - 2].to_vec();
    flat.push(s[n - 2] * s[n - 1]);
    let r = g.reshape(x, &flat)?;
    g.mean_last(r)
}

/// Residual stride-2 stage: `d = elu(down(x)); elu(d + conv(d))`.
#[derive(Clone, Debug)]
struct DownStage {
    down: Conv,
    conv: Conv,
}

impl DownStage {
    fn new<S: Scalar, R: Rng>(store: &mut ParamStore<S>, name: &str, c: usize, video: bool, rng: &mut R) -> Result<Self> {
        let (kernel, down, same): (Vec<usize>, ConvSpec, ConvSpec) = if video {
            (vec![1, 3, 3], ConvSpec::new(&[1, 2, 2], &[0, 1, 1]), ConvSpec::new(&[1, 1, 1], &[0, 1, 1]))
        } else {
            (vec![3, 3], ConvSpec::new(&[2, 2], &[1, 1]), ConvSpec::same(&[3, 3]))
        };
        Ok(Self {
            down: Conv::new(store, &format!("{name}.down"), c, c, &kernel, down, rng)?,
            conv: Conv::new(store, &format!("{name}.conv"), c, c, &kernel, same, rng)?,
        })
    }

    fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let d = self.down.forward(g, store, x)?;
        let d = g.elu(d);
        let r = self.conv.forward(g, store, d)?;
        let s = g.add(d, r)?;
        Ok(g.elu(s))
    }
}

/// Conv frontend over video frames `[C, Tv, H, W] -> [D, Tv]`.
#[derive(Clone, Debug)]
pub struct VideoFrontend {
    stem: Conv,
    stages: Vec<DownStage>,
    head: Conv,
    pub dim: usize,
    op: &'static str,
}

impl VideoFrontend {
    /// `temporal_stem` selects a 3x3x3 stem (lip) instead of a per-frame
    /// 1x3x3 stem (expression).
    fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        name: &str,
        in_channels: usize,
        channels: usize,
        dim: usize,
        stages: usize,
        temporal_stem: bool,
        op: &'static str,
        rng: &mut R,
    ) -> Result<Self> {
        let (k, spec) = if temporal_stem {
            (vec![3, 3, 3], ConvSpec::same(&[3, 3, 3]))
        } else {
            (vec![1, 3, 3], ConvSpec::new(&[1, 1, 1], &[0, 1, 1]))
        };
        let stem = Conv::new(store, &format!("{name}.stem"), in_channels, channels, &k, spec, rng)?;
        let stages = (0..stages)
            .map(|i| DownStage::new(store, &format!("{name}.stage{i}"), channels, true, rng))
            .collect::<Result<_>>()?;
        let head = Conv::new(store, &format!("{name}.head"), channels, dim, &[1], ConvSpec::unit(1), rng)?;
        Ok(Self { stem, stages, head, dim, op })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, frames: Var) -> Result<Var> {
        check_frames(self.op, g.shape(frames))?;
        let x = self.stem.forward(g, store, frames)?;
        let mut x = g.elu(x);
        for stage in &self.stages {
            x = stage.forward(g, store, x)?;
        }
        let pooled = pool_hw(g, x)?;
        self.head.forward(g, store, pooled)
    }
}

pub fn lip_frontend<S: Scalar, R: Rng>(store: &mut ParamStore<S>, dims: &CueDims, rng: &mut R) -> Result<VideoFrontend> {
    VideoFrontend::new(store, "lip.frontend", 1, dims.frontend_channels, dims.lip, 4, true, "encode_lip", rng)
}

pub fn expression_frontend<S: Scalar, R: Rng>(
    store: &mut ParamStore<S>,
    dims: &CueDims,
    rng: &mut R,
) -> Result<VideoFrontend> {
    VideoFrontend::new(store, "expr.frontend", 1, dims.frontend_channels, dims.expr, 3, false, "encode_expression", rng)
}

/// Still-image encoder `[C, H, W] -> [D, 1]`.
#[derive(Clone, Debug)]
pub struct FaceFrontend {
    stem: Conv,
    stages: Vec<DownStage>,
    head: Conv,
    pub dim: usize,
}

impl FaceFrontend {
    pub fn new<S: Scalar, R: Rng>(store: &mut ParamStore<S>, dims: &CueDims, rng: &mut R) -> Result<Self> {
        let c = dims.frontend_channels;
        Ok(Self {
            stem: Conv::new(store, "face.frontend.stem", 1, c, &[3, 3], ConvSpec::same(&[3, 3]), rng)?,
            stages: (0..3)
                .map(|i| DownStage::new(store, &format!("face.frontend.stage{i}"), c, false, rng))
                .collect::<Result<_>>()?,
            head: Conv::new(store, "face.frontend.head", c, dims.face, &[1], ConvSpec::unit(1), rng)?,
            dim: dims.face,
        })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, image: Var) -> Result<Var> {
        let s = g.shape(image).to_vec();
        if s.len() != 3 {
            return Err(Error::shape("encode_face", format!("expected [C, H, W], got {s:?}")));
        }
        if s[1] < MIN_FRAME_SIDE || s[2] < MIN_FRAME_SIDE {
            return Err(Error::Input(format!("encode_face: image {}x{} too small", s[1], s[2])));
        }
        let x = self.stem.forward(g, store, image)?;
        let mut x = g.elu(x);
        for stage in &self.stages {
            x = stage.forward(g, store, x)?;
        }
        let pooled = pool_hw(g, x)?;
        let c = g.shape(pooled)[0];
        let col = g.reshape(pooled, &[c, 1])?;
        self.head.forward(g, store, col)
    }
}

/// Flattens a `[2, T, F]` spectrogram to per-frame features `[T, 2F]`.
pub fn spectrogram_frames<S: Scalar>(g: &mut Graph<S>, spec: Var) -> Result<Var> {
    let s = g.shape(spec).to_vec();
    if s.len() != 3 || s[0] != 2 {
        return Err(Error::shape("voice_cross_attention", format!("expected [2, T, F], got {s:?}")));
    }
    let p = g.permute(spec, &[1, 0, 2])?;
    g.reshape(p, &[s[1], 2 * s[2]])
}

/// Enrollment-as-query cross-attention over the mixture's STFT frames.
#[derive(Clone, Debug)]
pub struct VoiceAttention {
    proj: Linear,
    attention: MultiHeadAttention,
    pub dim: usize,
}

impl VoiceAttention {
    pub fn new<S: Scalar, R: Rng>(store: &mut ParamStore<S>, dims: &CueDims, bins: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(store, "voice.proj", 2 * bins, dims.voice, true, rng)?,
            attention: MultiHeadAttention::new(store, "voice.attention", dims.voice, dims.voice_heads, rng)?,
            dim: dims.voice,
        })
    }

    /// `enroll [2, Te, F]`, `mix [2, T, F]` -> `[D, Te]` (enrollment length).
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, enroll: Var, mix: Var) -> Result<Var> {
        if g.shape(enroll).len() == 3 && g.shape(enroll)[1] == 0 {
            return Err(Error::Input("empty enrollment".into()));
        }
        let e = spectrogram_frames(g, enroll)?;
        let m = spectrogram_frames(g, mix)?;
        let q = self.proj.forward(g, store, e)?;
        let kv = self.proj.forward(g, store, m)?;
        let a = self.attention.forward(g, store, q, kv, kv)?;
        g.transpose(a)
    }
}

/// Per-call inputs to [`CueEncoders::encode`]. Absent entries are only
/// allowed for cues the encoders were not built with.
pub struct CueInputs<'a, S> {
    pub lip_frames: Option<&'a Tensor<S>>,
    pub expr_frames: Option<&'a Tensor<S>>,
    pub face_image: Option<&'a Tensor<S>>,
    /// Enrollment spectrogram values `[2, Te, F]`.
    pub enrollment: Option<&'a Tensor<S>>,
    /// Video-frame availability; `None` means all present.
    pub mask: Option<&'a [u8]>,
}

/// The encoders and V-TCN adapters of the active cue set.
#[derive(Clone, Debug)]
pub struct CueEncoders {
    pub lip: Option<(VideoFrontend, Vtcn)>,
    pub expr: Option<(VideoFrontend, Vtcn)>,
    pub face: Option<(FaceFrontend, Vtcn)>,
    pub voice: Option<(VoiceAttention, Vtcn)>,
}

impl CueEncoders {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        dims: &CueDims,
        active: &[CueKind],
        bins: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let has = |k| active.contains(&k);
        let z = dims.vtcn_zero_init;
        let mut enc = Self { lip: None, expr: None, face: None, voice: None };
        if has(CueKind::Lip) {
            let f = lip_frontend(store, dims, rng)?;
            enc.lip = Some((f, Vtcn::new(store, "lip.vtcn", dims.lip, z, rng)?));
        }
        if has(CueKind::Expression) {
            let f = expression_frontend(store, dims, rng)?;
            enc.expr = Some((f, Vtcn::new(store, "expr.vtcn", dims.expr, z, rng)?));
        }
        if has(CueKind::Face) {
            let f = FaceFrontend::new(store, dims, rng)?;
            enc.face = Some((f, Vtcn::new(store, "face.vtcn", dims.face, z, rng)?));
        }
        if has(CueKind::Voice) {
            let f = VoiceAttention::new(store, dims, bins, rng)?;
            enc.voice = Some((f, Vtcn::new(store, "voice.vtcn", dims.voice, z, rng)?));
        }
        Ok(enc)
    }

    /// Streams in fusion order, each `[D, t_audio]`.
    pub fn encode<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        inputs: &CueInputs<'_, S>,
        mix_spec: Var,
        t_audio: usize,
    ) -> Result<Vec<Var>> {
        let missing = |k: CueKind| Error::Input(format!("{} cue is active but no input was given", k.label()));
        let mut out = Vec::new();
        for (kind, slot, frames) in [
            (CueKind::Lip, &self.lip, inputs.lip_frames),
            (CueKind::Expression, &self.expr, inputs.expr_frames),
        ] {
            if let Some((frontend, vtcn)) = slot {
                let frames = frames.ok_or_else(|| missing(kind))?;
                let x = g.constant(frames.clone());
                let emb = frontend.forward(g, store, x)?;
                let emb = apply_mask(g, emb, inputs.mask)?;
                let emb = g.interpolate_time(emb, t_audio)?;
                out.push(vtcn.forward(g, store, emb)?);
            }
        }
        if let Some((frontend, vtcn)) = &self.face {
            let image = inputs.face_image.ok_or_else(|| missing(CueKind::Face))?;
            let x = g.constant(image.clone());
            let col = frontend.forward(g, store, x)?;
            let tiled = g.repeat(col, 1, t_audio)?;
            out.push(vtcn.forward(g, store, tiled)?);
        }
        if let Some((attention, vtcn)) = &self.voice {
            let enroll = inputs.enrollment.ok_or_else(|| missing(CueKind::Voice))?;
            let e = g.constant(enroll.clone());
            let emb = attention.forward(g, store, e, mix_spec)?;
            let emb = g.interpolate_time(emb, t_audio)?;
            out.push(vtcn.forward(g, store, emb)?);
        }
        Ok(out)
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = Vec::new();
        if let Some((f, _)) = &self.lip {
            d.push(f.dim);
        }
        if let Some((f, _)) = &self.expr {
            d.push(f.dim);
        }
        if let Some((f, _)) = &self.face {
            d.push(f.dim);
        }
        if let Some((f, _)) = &self.voice {
            d.push(f.dim);
        }
        d
    }
}

/// Zeroes embedding columns of missing video frames.
pub fn apply_mask<S: Scalar>(g: &mut Graph<S>, emb: Var, mask: Option<&[u8]>) -> Result<Var> {
    let Some(mask) = mask else { return Ok(emb) };
    let s = g.shape(emb).to_vec();
    if mask.len() != s[1] {
        return Err(Error::shape("cue mask", format!("mask of {} frames for stream {s:?}", mask.len())));
    }
    if mask.iter().all(|&m| m != 0) {
        return Ok(emb);
    }
    let m = Tensor::from_fn(&s, |i| if mask[i % s[1]] != 0 { S::one() } else { S::zero() });
    let m = g.constant(m);
    g.mul(emb, m)
}
