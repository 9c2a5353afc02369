//! Building blocks of the video denoiser: the per-frame adaptor, directed
//! (causal) temporal attention, spatial self/cross attention, their
//! parallel combination, and the sinusoidal timestep / FPS embeddings.
//!
//! Each block has a graph-level form working on a [`Binding`] under a
//! name prefix (used by the models and for training) and, where useful, a
//! tensor-level convenience wrapper.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{ensure, Result};
use crate::params::{Binding, ParamSet};
use crate::tensor::{Scalar, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Base of the sinusoidal frequency ladder.
pub const SINUSOID_BASE: f64 = 10_000.0;

fn name(prefix: &str, leaf: &str) -> String {
    if prefix.is_empty() {
        leaf.to_string()
    } else {
        format!("{prefix}.{leaf}")
    }
}

// ---------------------------------------------------------------------
// initialisation helpers

/// Normal weights with standard deviation `gain / sqrt(fan_in)`.
pub(crate) fn init_weight<T: Scalar, R: Rng>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut R) -> Tensor<T> {
    Tensor::randn(shape, gain / (fan_in.max(1) as f64).sqrt(), rng)
}

pub(crate) fn init_linear<T: Scalar, R: Rng>(
    params: &mut ParamSet<T>,
    prefix: &str,
    out_dim: usize,
    in_dim: usize,
    zero: bool,
    rng: &mut R,
) {
    let w = if zero { Tensor::zeros(&[out_dim, in_dim]) } else { init_weight(&[out_dim, in_dim], in_dim, 1.0, rng) };
    params.insert(name(prefix, "weight"), w);
    params.insert(name(prefix, "bias"), Tensor::zeros(&[out_dim]));
}

pub(crate) fn init_conv<T: Scalar, R: Rng>(
    params: &mut ParamSet<T>,
    prefix: &str,
    out_ch: usize,
    in_ch: usize,
    kernel: usize,
    zero: bool,
    rng: &mut R,
) {
    let shape = [out_ch, in_ch, kernel, kernel];
    let w = if zero { Tensor::zeros(&shape) } else { init_weight(&shape, in_ch * kernel * kernel, 1.0, rng) };
    params.insert(name(prefix, "weight"), w);
    params.insert(name(prefix, "bias"), Tensor::zeros(&[out_ch]));
}

pub(crate) fn init_norm<T: Scalar>(params: &mut ParamSet<T>, prefix: &str, channels: usize) {
    params.insert(name(prefix, "gamma"), Tensor::ones(&[channels]));
    params.insert(name(prefix, "beta"), Tensor::zeros(&[channels]));
}

/// Conv with weight/bias under `prefix`.
pub(crate) fn conv<T: Scalar>(b: &Binding<T>, prefix: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let w = b.var(&name(prefix, "weight"))?;
    let bias = b.opt_var(&name(prefix, "bias"))?;
    b.graph().conv2d(x, w, bias, stride, pad)
}

pub(crate) fn linear<T: Scalar>(b: &Binding<T>, prefix: &str, x: Var) -> Result<Var> {
    let w = b.var(&name(prefix, "weight"))?;
    let bias = b.opt_var(&name(prefix, "bias"))?;
    b.graph().linear(x, w, bias)
}

/// Group norm over `[N, C, ...]` with a per-channel affine.
pub(crate) fn group_norm<T: Scalar>(b: &Binding<T>, prefix: &str, x: Var, groups: usize) -> Result<Var> {
    let g = b.graph();
    let shape = g.shape(x);
    let c = shape[1];
    ensure!(groups > 0 && c.is_multiple_of(groups), Shape, "{c} channels in {groups} groups");
    let row: usize = (c / groups) * shape[2..].iter().product::<usize>();
    let n = g.normalize(x, row, LAYER_NORM_EPS)?;
    g.affine(n, Some(b.var(&name(prefix, "gamma"))?), Some(b.var(&name(prefix, "beta"))?))
}

/// Layer norm over the last axis of `[N, C]` tokens.
pub(crate) fn layer_norm<T: Scalar>(b: &Binding<T>, prefix: &str, x: Var) -> Result<Var> {
    let g = b.graph();
    let c = g.shape(x)[1];
    let n = g.normalize(x, c, LAYER_NORM_EPS)?;
    g.affine(n, Some(b.var(&name(prefix, "gamma"))?), Some(b.var(&name(prefix, "beta"))?))
}

/// Largest group count out of {8, 4, 2, 1} dividing `channels`.
pub fn norm_groups(channels: usize) -> usize {
    [8, 4, 2, 1].into_iter().find(|g| channels.is_multiple_of(*g) && channels / g >= 2).unwrap_or(1)
}

// ---------------------------------------------------------------------
// adaptor

/// Per-frame, per-channel scale and shift, both `[F, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptorParams<T> {
    pub scale: Tensor<T>,
    pub shift: Tensor<T>,
}

impl<T: Scalar> AdaptorParams<T> {
    /// `S = 1`, `B = 0`.
    pub fn identity(frames: usize, channels: usize) -> Self {
        Self { scale: Tensor::ones(&[frames, channels]), shift: Tensor::zeros(&[frames, channels]) }
    }

    pub fn new(scale: Tensor<T>, shift: Tensor<T>) -> Result<Self> {
        ensure!(scale.rank() == 2, Shape, "adaptor scale must be [F, C], got {:?}", scale.shape());
        scale.expect_same_shape(&shift, "adaptor")?;
        Ok(Self { scale, shift })
    }

    pub fn frames(&self) -> usize {
        self.scale.dim(0)
    }

    pub fn channels(&self) -> usize {
        self.scale.dim(1)
    }

    pub fn num_params(&self) -> usize {
        self.scale.len() + self.shift.len()
    }

    pub fn insert_into(&self, params: &mut ParamSet<T>, prefix: &str) {
        params.insert(name(prefix, "scale"), self.scale.clone());
        params.insert(name(prefix, "shift"), self.shift.clone());
    }

    pub fn from_params(params: &ParamSet<T>, prefix: &str) -> Result<Self> {
        Self::new(params.get(&name(prefix, "scale"))?.clone(), params.get(&name(prefix, "shift"))?.clone())
    }
}

/// `out[i, c] = S[i, c] * h[i, c] + B[i, c]`, broadcast over space.
pub fn adaptor_apply<T: Scalar>(h: &Tensor<T>, params: &AdaptorParams<T>) -> Result<Tensor<T>> {
    let g = Graph::new();
    let mut ps = ParamSet::new();
    params.insert_into(&mut ps, "adaptor");
    let b = Binding::new(&g, &ps, false);
    let x = g.constant(h.clone());
    let out = adaptor(&b, "adaptor", x)?;
    Ok((*g.value(out)).clone())
}

/// Graph form. Inputs with fewer frames than the adaptor use its leading rows.
pub fn adaptor<T: Scalar>(b: &Binding<T>, prefix: &str, h: Var) -> Result<Var> {
    let g = b.graph();
    let shape = g.shape(h);
    let scale = b.var(&name(prefix, "scale"))?;
    let shift = b.var(&name(prefix, "shift"))?;
    let pshape = g.shape(scale);
    ensure!(shape.len() >= 2, Shape, "adaptor input must be [F, C, ...], got {shape:?}");
    ensure!(
        pshape.len() == 2 && pshape[1] == shape[1] && shape[0] <= pshape[0],
        Shape,
        "adaptor [F={}, C={}] cannot modulate input {shape:?}",
        pshape.first().copied().unwrap_or(0),
        pshape.get(1).copied().unwrap_or(0)
    );
    let (scale, shift) = if shape[0] < pshape[0] {
        let take = |v: Var| -> Result<Var> {
            let r = g.reshape(v, &[1, pshape[0], pshape[1]])?;
            let s = g.slice_channels(r, 0, shape[0])?;
            g.reshape(s, &[shape[0], pshape[1]])
        };
        (take(scale)?, take(shift)?)
    } else {
        (scale, shift)
    };
    g.affine(h, Some(scale), Some(shift))
}

// ---------------------------------------------------------------------
// attention

/// Projection matrices of one attention layer, stored `[out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub heads: usize,
}

impl<T: Scalar> AttentionParams<T> {
    /// Random projections; `wo` zeroed when `zero_out`. `kv_width` is the
    /// key/value input width (the channel count for self-attention).
    pub fn init<R: Rng>(channels: usize, kv_width: usize, heads: usize, zero_out: bool, rng: &mut R) -> Result<Self> {
        ensure!(heads > 0 && channels.is_multiple_of(heads), InvalidArgument, "{heads} heads do not divide {channels} channels");
        let wo = if zero_out {
            Tensor::zeros(&[channels, channels])
        } else {
            init_weight(&[channels, channels], channels, 1.0, rng)
        };
        Ok(Self {
            wq: init_weight(&[channels, channels], channels, 1.0, rng),
            wk: init_weight(&[channels, kv_width], kv_width, 1.0, rng),
            wv: init_weight(&[channels, kv_width], kv_width, 1.0, rng),
            wo,
            heads,
        })
    }

    pub fn channels(&self) -> usize {
        self.wq.dim(0)
    }

    pub fn insert_into(&self, params: &mut ParamSet<T>, prefix: &str) {
        params.insert(name(prefix, "wq"), self.wq.clone());
        params.insert(name(prefix, "wk"), self.wk.clone());
        params.insert(name(prefix, "wv"), self.wv.clone());
        params.insert(name(prefix, "wo"), self.wo.clone());
    }

    pub fn from_params(params: &ParamSet<T>, prefix: &str, heads: usize) -> Result<Self> {
        Ok(Self {
            wq: params.get(&name(prefix, "wq"))?.clone(),
            wk: params.get(&name(prefix, "wk"))?.clone(),
            wv: params.get(&name(prefix, "wv"))?.clone(),
            wo: params.get(&name(prefix, "wo"))?.clone(),
            heads,
        })
    }
}

/// Multi-head attention where queries, keys and values share the batch:
/// `q: [B, Lq, C]`, `k, v: [B, Lk, C]`.
fn batched_attention<T: Scalar>(g: &Graph<T>, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Result<Var> {
    let qs = g.shape(q);
    let ks = g.shape(k);
    let (bsz, lq, c) = (qs[0], qs[1], qs[2]);
    let lk = ks[1];
    ensure!(heads > 0 && c % heads == 0, Shape, "{heads} heads do not divide {c} channels");
    let d = c / heads;
    let split = |x: Var, len: usize| -> Result<Var> {
        let r = g.reshape(x, &[bsz, len, heads, d])?;
        let p = g.permute(r, &[0, 2, 1, 3])?;
        g.reshape(p, &[bsz * heads, len, d])
    };
    let (qh, kh, vh) = (split(q, lq)?, split(k, lk)?, split(v, lk)?);
    let logits = g.matmul(qh, kh, false, true)?;
    let logits = g.scale(logits, T::from_f64_lossy(1.0 / (d as f64).sqrt()));
    let weights = g.softmax(logits, causal)?;
    let out = g.matmul(weights, vh, false, false)?;
    let out = g.reshape(out, &[bsz, heads, lq, d])?;
    let out = g.permute(out, &[0, 2, 1, 3])?;
    g.reshape(out, &[bsz, lq, c])
}

/// Multi-head attention against a key/value sequence shared by the whole
/// batch: `q: [B, Lq, C]`, `k, v: [Lk, C]`.
fn shared_kv_attention<T: Scalar>(g: &Graph<T>, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let qs = g.shape(q);
    let (bsz, lq, c) = (qs[0], qs[1], qs[2]);
    let lk = g.shape(k)[0];
    ensure!(heads > 0 && c % heads == 0, Shape, "{heads} heads do not divide {c} channels");
    let d = c / heads;
    let qh = g.reshape(q, &[bsz, lq, heads, d])?;
    let qh = g.permute(qh, &[2, 0, 1, 3])?;
    let qh = g.reshape(qh, &[heads, bsz * lq, d])?;
    let kv = |x: Var| -> Result<Var> {
        let r = g.reshape(x, &[lk, heads, d])?;
        g.permute(r, &[1, 0, 2])
    };
    let (kh, vh) = (kv(k)?, kv(v)?);
    let logits = g.matmul(qh, kh, false, true)?;
    let logits = g.scale(logits, T::from_f64_lossy(1.0 / (d as f64).sqrt()));
    let weights = g.softmax(logits, false)?;
    let out = g.matmul(weights, vh, false, false)?;
    let out = g.reshape(out, &[heads, bsz, lq, d])?;
    let out = g.permute(out, &[1, 2, 0, 3])?;
    g.reshape(out, &[bsz, lq, c])
}

fn project<T: Scalar>(b: &Binding<T>, weight: &str, tokens: Var) -> Result<Var> {
    b.graph().linear(tokens, b.var(weight)?, None)
}

/// Directed temporal attention on `z: [F, C, H, W]`.
///
/// Every spatial location is an independent length-`F` token sequence;
/// frame `p` attends to frames `q <= p` only. The output projection is
/// added back onto `z`.
pub fn directed_temporal_attention_graph<T: Scalar>(b: &Binding<T>, prefix: &str, z: Var, heads: usize) -> Result<Var> {
    let g = b.graph();
    let shape = g.shape(z);
    ensure!(shape.len() == 4, Shape, "temporal attention needs [F, C, H, W], got {shape:?}");
    let (f, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let wq_shape = b.params().get(&name(prefix, "wq"))?.shape().to_vec();
    ensure!(wq_shape == [c, c], Shape, "temporal attention weights {wq_shape:?} for {c} channels");
    let hw = h * w;
    let tokens = g.reshape(z, &[f, c, hw])?;
    let tokens = g.permute(tokens, &[2, 0, 1])?;
    let tokens = g.reshape(tokens, &[hw * f, c])?;
    let q = g.reshape(project(b, &name(prefix, "wq"), tokens)?, &[hw, f, c])?;
    let k = g.reshape(project(b, &name(prefix, "wk"), tokens)?, &[hw, f, c])?;
    let v = g.reshape(project(b, &name(prefix, "wv"), tokens)?, &[hw, f, c])?;
    let attn = batched_attention(g, q, k, v, heads, true)?;
    let attn = g.reshape(attn, &[hw * f, c])?;
    let out = project(b, &name(prefix, "wo"), attn)?;
    let out = g.reshape(out, &[hw, f, c])?;
    let out = g.permute(out, &[1, 2, 0])?;
    let out = g.reshape(out, &[f, c, h, w])?;
    g.add(z, out)
}

pub fn directed_temporal_attention<T: Scalar>(z: &Tensor<T>, params: &AttentionParams<T>) -> Result<Tensor<T>> {
    let g = Graph::new();
    let mut ps = ParamSet::new();
    params.insert_into(&mut ps, "t");
    let b = Binding::new(&g, &ps, false);
    let x = g.constant(z.clone());
    let out = directed_temporal_attention_graph(&b, "t", x, params.heads)?;
    Ok((*g.value(out)).clone())
}

/// Attention weights `[H*W, heads, F, F]` of the temporal layer, for inspection.
pub fn temporal_attention_weights<T: Scalar>(z: &Tensor<T>, params: &AttentionParams<T>) -> Result<Tensor<T>> {
    ensure!(z.rank() == 4, Shape, "temporal attention needs [F, C, H, W], got {:?}", z.shape());
    let (f, c, hw) = (z.dim(0), z.dim(1), z.dim(2) * z.dim(3));
    let heads = params.heads;
    ensure!(heads > 0 && c % heads == 0, Shape, "{heads} heads do not divide {c} channels");
    let d = c / heads;
    let g = Graph::new();
    let x = g.constant(z.clone());
    let tokens = g.reshape(x, &[f, c, hw])?;
    let tokens = g.permute(tokens, &[2, 0, 1])?;
    let tokens = g.reshape(tokens, &[hw * f, c])?;
    let split = |w: &Tensor<T>| -> Result<Var> {
        let p = g.linear(tokens, g.constant(w.clone()), None)?;
        let p = g.reshape(p, &[hw, f, heads, d])?;
        let p = g.permute(p, &[0, 2, 1, 3])?;
        g.reshape(p, &[hw * heads, f, d])
    };
    let (q, k) = (split(&params.wq)?, split(&params.wk)?);
    let logits = g.scale(g.matmul(q, k, false, true)?, T::from_f64_lossy(1.0 / (d as f64).sqrt()));
    let weights = g.softmax(logits, true)?;
    (*g.value(weights)).clone().reshape(&[hw, heads, f, f])
}

/// Spatial branch: per frame, pre-norm self-attention over the `H*W`
/// tokens, then pre-norm cross-attention to the condition tokens, each
/// with a residual connection.
pub fn spatial_attention_graph<T: Scalar>(
    b: &Binding<T>,
    prefix: &str,
    z: Var,
    cond: Var,
    heads: usize,
) -> Result<Var> {
    let g = b.graph();
    let shape = g.shape(z);
    ensure!(shape.len() == 4, Shape, "spatial attention needs [F, C, H, W], got {shape:?}");
    let (f, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let cshape = g.shape(cond);
    let kv_shape = b.params().get(&name(prefix, "cross.wk"))?.shape().to_vec();
    ensure!(
        cshape.len() == 2 && kv_shape == [c, cshape[1]],
        Shape,
        "condition tokens {cshape:?} do not fit cross-attention keys {kv_shape:?}"
    );
    let hw = h * w;
    let x = g.reshape(z, &[f, c, hw])?;
    let x = g.permute(x, &[0, 2, 1])?;
    let x = g.reshape(x, &[f * hw, c])?;

    let h1 = layer_norm(b, &name(prefix, "norm1"), x)?;
    let q = g.reshape(project(b, &name(prefix, "self.wq"), h1)?, &[f, hw, c])?;
    let k = g.reshape(project(b, &name(prefix, "self.wk"), h1)?, &[f, hw, c])?;
    let v = g.reshape(project(b, &name(prefix, "self.wv"), h1)?, &[f, hw, c])?;
    let sa = batched_attention(g, q, k, v, heads, false)?;
    let sa = project(b, &name(prefix, "self.wo"), g.reshape(sa, &[f * hw, c])?)?;
    let x = g.add(x, sa)?;

    let h2 = layer_norm(b, &name(prefix, "norm2"), x)?;
    let q = g.reshape(project(b, &name(prefix, "cross.wq"), h2)?, &[f, hw, c])?;
    let k = project(b, &name(prefix, "cross.wk"), cond)?;
    let v = project(b, &name(prefix, "cross.wv"), cond)?;
    let ca = shared_kv_attention(g, q, k, v, heads)?;
    let ca = project(b, &name(prefix, "cross.wo"), g.reshape(ca, &[f * hw, c])?)?;
    let x = g.add(x, ca)?;

    let x = g.reshape(x, &[f, hw, c])?;
    let x = g.permute(x, &[0, 2, 1])?;
    g.reshape(x, &[f, c, h, w])
}

/// Parameters of the spatial branch.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialAttentionParams<T> {
    pub norm1_gamma: Tensor<T>,
    pub norm1_beta: Tensor<T>,
    pub attn: AttentionParams<T>,
    pub norm2_gamma: Tensor<T>,
    pub norm2_beta: Tensor<T>,
    pub cross: AttentionParams<T>,
}

impl<T: Scalar> SpatialAttentionParams<T> {
    /// Identity layer norms, random self-attention, zero cross-attention output.
    pub fn init<R: Rng>(channels: usize, cond_width: usize, heads: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            norm1_gamma: Tensor::ones(&[channels]),
            norm1_beta: Tensor::zeros(&[channels]),
            attn: AttentionParams::init(channels, channels, heads, false, rng)?,
            norm2_gamma: Tensor::ones(&[channels]),
            norm2_beta: Tensor::zeros(&[channels]),
            cross: AttentionParams::init(channels, cond_width, heads, true, rng)?,
        })
    }

    pub fn insert_into(&self, params: &mut ParamSet<T>, prefix: &str) {
        params.insert(name(prefix, "norm1.gamma"), self.norm1_gamma.clone());
        params.insert(name(prefix, "norm1.beta"), self.norm1_beta.clone());
        self.attn.insert_into(params, &name(prefix, "self"));
        params.insert(name(prefix, "norm2.gamma"), self.norm2_gamma.clone());
        params.insert(name(prefix, "norm2.beta"), self.norm2_beta.clone());
        self.cross.insert_into(params, &name(prefix, "cross"));
    }
}

pub fn spatial_self_attention<T: Scalar>(
    z: &Tensor<T>,
    params: &SpatialAttentionParams<T>,
    cond: &ConditionEmbedding<T>,
) -> Result<Tensor<T>> {
    let g = Graph::new();
    let mut ps = ParamSet::new();
    params.insert_into(&mut ps, "s");
    let b = Binding::new(&g, &ps, false);
    let x = g.constant(z.clone());
    let c = g.constant(cond.tokens.clone());
    let out = spatial_attention_graph(&b, "s", x, c, params.attn.heads)?;
    Ok((*g.value(out)).clone())
}

/// Raw branch outputs `(S-Attn(z), T-Attn(z))`, both including the input
/// residual. Without temporal parameters the temporal branch is `None`.
pub fn st_attn_branches<T: Scalar>(
    b: &Binding<T>,
    prefix: &str,
    z: Var,
    cond: Var,
    heads: usize,
) -> Result<(Var, Option<Var>)> {
    let s = spatial_attention_graph(b, &name(prefix, "spatial"), z, cond, heads)?;
    let t = if b.has(&name(prefix, "temporal.wq")) {
        Some(directed_temporal_attention_graph(b, &name(prefix, "temporal"), z, heads)?)
    } else {
        None
    };
    Ok((s, t))
}

/// Parallel spatial + directed temporal attention, `½ (S(z) + T(z))`.
///
/// Both branches carry the residual, so the halving keeps a block with
/// zeroed output projections an exact identity. When the temporal
/// parameters are absent (image model) the temporal branch is the
/// identity, matching a zero-projection temporal layer exactly.
pub fn st_attn_block_graph<T: Scalar>(b: &Binding<T>, prefix: &str, z: Var, cond: Var, heads: usize) -> Result<Var> {
    let g = b.graph();
    let (s, t) = st_attn_branches(b, prefix, z, cond, heads)?;
    let sum = g.add(s, t.unwrap_or(z))?;
    Ok(g.scale(sum, T::from_f64_lossy(0.5)))
}

/// Parameters of one ST-Attn block.
#[derive(Clone, Debug, PartialEq)]
pub struct StAttnParams<T> {
    pub spatial: SpatialAttentionParams<T>,
    pub temporal: Option<AttentionParams<T>>,
}

impl<T: Scalar> StAttnParams<T> {
    pub fn insert_into(&self, params: &mut ParamSet<T>, prefix: &str) {
        self.spatial.insert_into(params, &name(prefix, "spatial"));
        if let Some(t) = &self.temporal {
            t.insert_into(params, &name(prefix, "temporal"));
        }
    }
}

pub fn st_attn_block<T: Scalar>(
    z: &Tensor<T>,
    params: &StAttnParams<T>,
    cond: &ConditionEmbedding<T>,
) -> Result<Tensor<T>> {
    let g = Graph::new();
    let mut ps = ParamSet::new();
    params.insert_into(&mut ps, "st");
    let b = Binding::new(&g, &ps, false);
    let x = g.constant(z.clone());
    let c = g.constant(cond.tokens.clone());
    let out = st_attn_block_graph(&b, "st", x, c, params.spatial.attn.heads)?;
    Ok((*g.value(out)).clone())
}

// ---------------------------------------------------------------------
// conditioning

/// Where a condition embedding came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionSource {
    TextProxy,
    FrameProxy,
    Null,
}

/// `[L, D]` token sequence consumed by cross-attention.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionEmbedding<T> {
    pub tokens: Tensor<T>,
    pub source: ConditionSource,
}

impl<T: Scalar> ConditionEmbedding<T> {
    pub fn new(tokens: Tensor<T>, source: ConditionSource) -> Result<Self> {
        ensure!(
            tokens.rank() == 2 && tokens.dim(0) >= 1,
            Shape,
            "condition tokens must be [L >= 1, D], got {:?}",
            tokens.shape()
        );
        Ok(Self { tokens, source })
    }

    /// A single all-zero token: the unconditional case.
    pub fn null(width: usize) -> Self {
        Self { tokens: Tensor::zeros(&[1, width]), source: ConditionSource::Null }
    }

    pub fn width(&self) -> usize {
        self.tokens.dim(1)
    }

    pub fn len(&self) -> usize {
        self.tokens.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cast<U: Scalar>(&self) -> ConditionEmbedding<U> {
        ConditionEmbedding { tokens: self.tokens.cast(), source: self.source }
    }

    /// Stacks token sequences of equal width.
    pub fn concat(parts: &[Self], source: ConditionSource) -> Result<Self> {
        let tokens: Vec<Tensor<T>> = parts.iter().map(|p| p.tokens.clone()).collect();
        Self::new(Tensor::stack_outer(&tokens)?, source)
    }
}

/// `[sin(x w_0) .. sin(x w_{h-1}), cos(x w_0) .. cos(x w_{h-1})]` with
/// `w_i = base^(-i/h)` and `h = width / 2`; odd widths end in a zero.
pub fn sinusoidal_encoding(x: f64, width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut out = vec![0.0; width];
    for i in 0..half {
        let freq = (-(SINUSOID_BASE.ln()) * i as f64 / half as f64).exp();
        out[i] = (x * freq).sin();
        out[half + i] = (x * freq).cos();
    }
    out
}

/// `Linear(SiLU(Linear(x)))` weights.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMlp<T> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

impl<T: Scalar> EmbeddingMlp<T> {
    pub fn init<R: Rng>(in_width: usize, hidden: usize, out_width: usize, zero_out: bool, rng: &mut R) -> Self {
        let mut ps = ParamSet::new();
        init_linear(&mut ps, "l1", hidden, in_width, false, rng);
        init_linear(&mut ps, "l2", out_width, hidden, zero_out, rng);
        Self::from_params(&ps, "").expect("freshly built")
    }

    pub fn zeros(in_width: usize, hidden: usize, out_width: usize) -> Self {
        Self {
            w1: Tensor::zeros(&[hidden, in_width]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[out_width, hidden]),
            b2: Tensor::zeros(&[out_width]),
        }
    }

    pub fn in_width(&self) -> usize {
        self.w1.dim(1)
    }

    pub fn insert_into(&self, params: &mut ParamSet<T>, prefix: &str) {
        params.insert(name(prefix, "l1.weight"), self.w1.clone());
        params.insert(name(prefix, "l1.bias"), self.b1.clone());
        params.insert(name(prefix, "l2.weight"), self.w2.clone());
        params.insert(name(prefix, "l2.bias"), self.b2.clone());
    }

    pub fn from_params(params: &ParamSet<T>, prefix: &str) -> Result<Self> {
        Ok(Self {
            w1: params.get(&name(prefix, "l1.weight"))?.clone(),
            b1: params.get(&name(prefix, "l1.bias"))?.clone(),
            w2: params.get(&name(prefix, "l2.weight"))?.clone(),
            b2: params.get(&name(prefix, "l2.bias"))?.clone(),
        })
    }
}

/// Graph form of the embedding perceptron over an encoded scalar.
pub fn embedding_mlp_graph<T: Scalar>(b: &Binding<T>, prefix: &str, value: f64) -> Result<Var> {
    let g = b.graph();
    let width = b.params().get(&name(prefix, "l1.weight"))?.dim(1);
    let enc: Vec<T> = sinusoidal_encoding(value, width).into_iter().map(T::from_f64_lossy).collect();
    let x = g.constant(Tensor::from_vec(&[1, width], enc)?);
    let h = linear(b, &name(prefix, "l1"), x)?;
    let h = g.silu(h);
    let out = linear(b, &name(prefix, "l2"), h)?;
    let w = g.shape(out)[1];
    g.reshape(out, &[w])
}

fn run_embedding<T: Scalar>(value: f64, mlp: &EmbeddingMlp<T>) -> Result<Tensor<T>> {
    let g = Graph::new();
    let mut ps = ParamSet::new();
    mlp.insert_into(&mut ps, "e");
    let b = Binding::new(&g, &ps, false);
    let out = embedding_mlp_graph(&b, "e", value)?;
    Ok((*g.value(out)).clone())
}

/// `Linear(SiLU(Linear(Sin(nu))))` for the effective frame rate `nu > 0`.
pub fn fps_embedding<T: Scalar>(nu: f64, mlp: &EmbeddingMlp<T>) -> Result<Tensor<T>> {
    ensure!(nu > 0.0 && nu.is_finite(), InvalidArgument, "frame rate must be positive, got {nu}");
    run_embedding(nu, mlp)
}

/// Sinusoidal encoding of the diffusion step followed by the same perceptron shape.
pub fn timestep_embedding<T: Scalar>(t: usize, max_step: usize, mlp: &EmbeddingMlp<T>) -> Result<Tensor<T>> {
    ensure!(t <= max_step, InvalidArgument, "step {t} outside 0..={max_step}");
    run_embedding(t as f64, mlp)
}
