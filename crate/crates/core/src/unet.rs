//! The latent video denoiser: a small U-Net whose 2-D convolutions are
//! shared by all frames, followed by per-frame adaptors, with ST-Attn
//! blocks below full resolution.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::blocks::{
    self, conv, embedding_mlp_graph, group_norm, init_conv, init_linear, init_norm, linear, norm_groups,
    st_attn_block_graph, AdaptorParams, AttentionParams, ConditionEmbedding, EmbeddingMlp, SpatialAttentionParams,
};
use crate::error::{ensure, Result};
use crate::params::{Binding, ParamSet};
use crate::schedule::PredictionTarget;
use crate::tensor::{Scalar, Tensor};

/// Architecture of a denoiser. Serialized into checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    /// Latent channels `C`; also the output width.
    pub in_channels: usize,
    /// Extra conditioning channels concatenated to the input (interpolation).
    pub extra_in_channels: usize,
    pub base_width: usize,
    pub channel_multipliers: Vec<usize>,
    /// Adaptor table length; inputs may use up to this many frames.
    pub frames: usize,
    /// Downsampling factors (1, 2, 4, ...) whose level gets an ST-Attn block.
    pub attn_levels: Vec<usize>,
    pub heads: usize,
    /// Condition token width `D`.
    pub cond_width: usize,
    /// Largest diffusion step the timestep embedding accepts.
    pub max_timestep: usize,
    /// Video model (adaptors, temporal attention, FPS embedding) or image model.
    pub video: bool,
    pub prediction_target: PredictionTarget,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 4,
            extra_in_channels: 0,
            base_width: 32,
            channel_multipliers: vec![1, 2, 4],
            frames: 16,
            attn_levels: vec![2, 4],
            heads: 4,
            cond_width: 32,
            max_timestep: 50,
            video: true,
            prediction_target: PredictionTarget::Epsilon,
        }
    }
}

impl UNetConfig {
    pub fn levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.base_width * self.channel_multipliers[level]
    }

    /// Width of the timestep / FPS embedding vector.
    pub fn embed_width(&self) -> usize {
        4 * self.base_width
    }

    pub fn has_attention(&self, level: usize) -> bool {
        self.attn_levels.contains(&(1usize << level))
    }

    /// Same layout with the temporal parts removed.
    pub fn image(&self) -> Self {
        Self { video: false, frames: 1, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.in_channels > 0, InvalidArgument, "in_channels must be positive");
        ensure!(
            self.base_width >= 2 && self.base_width.is_multiple_of(2),
            InvalidArgument,
            "base_width must be even and >= 2, got {}",
            self.base_width
        );
        ensure!(
            !self.channel_multipliers.is_empty() && self.channel_multipliers.iter().all(|&m| m > 0),
            InvalidArgument,
            "channel_multipliers must be a non-empty list of positive integers"
        );
        ensure!(self.frames >= 1, InvalidArgument, "frames must be at least 1");
        ensure!(self.heads >= 1, InvalidArgument, "heads must be at least 1");
        ensure!(self.cond_width >= 1, InvalidArgument, "cond_width must be at least 1");
        ensure!(self.max_timestep >= 1, InvalidArgument, "max_timestep must be at least 1");
        for &f in &self.attn_levels {
            ensure!(
                f.is_power_of_two() && f.trailing_zeros() < self.levels() as u32,
                InvalidArgument,
                "attention level {f} is not one of the available downsampling factors"
            );
        }
        for l in 0..self.levels() {
            let c = self.level_channels(l);
            let needs_heads = self.has_attention(l) || l + 1 == self.levels();
            ensure!(
                !needs_heads || c.is_multiple_of(self.heads),
                InvalidArgument,
                "{} heads do not divide {c} channels at level {l}",
                self.heads
            );
        }
        Ok(())
    }

    /// Required divisor of the latent height and width.
    pub fn spatial_divisor(&self) -> usize {
        1 << (self.levels() - 1)
    }

    /// Adaptor sites, each holding `2 * frames * channels` scalars.
    pub fn adaptor_sites(&self) -> Vec<(String, usize)> {
        let mut sites = Vec::new();
        let mut res = |prefix: String, ch: usize| {
            sites.push((format!("{prefix}.adaptor1"), ch));
            sites.push((format!("{prefix}.adaptor2"), ch));
        };
        for l in 0..self.levels() {
            res(format!("down.{l}.res"), self.level_channels(l));
        }
        let top = self.level_channels(self.levels() - 1);
        res("mid.res1".into(), top);
        res("mid.res2".into(), top);
        for l in (0..self.levels()).rev() {
            res(format!("up.{l}.res"), self.level_channels(l));
        }
        sites
    }
}

/// Parameters whose absence turns a video model into an image model.
pub fn is_temporal_param(name: &str) -> bool {
    name.contains(".adaptor") || name.contains(".temporal.") || name.starts_with("fps_mlp.")
}

fn res_block_init<T: Scalar, R: Rng>(
    ps: &mut ParamSet<T>,
    prefix: &str,
    cfg: &UNetConfig,
    ch_in: usize,
    ch_out: usize,
    rng: &mut R,
) {
    init_norm(ps, &format!("{prefix}.norm1"), ch_in);
    init_conv(ps, &format!("{prefix}.conv1"), ch_out, ch_in, 3, false, rng);
    init_linear(ps, &format!("{prefix}.emb_proj"), ch_out, cfg.embed_width(), false, rng);
    init_norm(ps, &format!("{prefix}.norm2"), ch_out);
    init_conv(ps, &format!("{prefix}.conv2"), ch_out, ch_out, 3, false, rng);
    if ch_in != ch_out {
        init_conv(ps, &format!("{prefix}.skip"), ch_out, ch_in, 1, false, rng);
    }
    if cfg.video {
        AdaptorParams::identity(cfg.frames, ch_out).insert_into(ps, &format!("{prefix}.adaptor1"));
        AdaptorParams::identity(cfg.frames, ch_out).insert_into(ps, &format!("{prefix}.adaptor2"));
    }
}

fn st_block_init<T: Scalar, R: Rng>(
    ps: &mut ParamSet<T>,
    prefix: &str,
    cfg: &UNetConfig,
    ch: usize,
    rng: &mut R,
) -> Result<()> {
    SpatialAttentionParams::init(ch, cfg.cond_width, cfg.heads, rng)?.insert_into(ps, &format!("{prefix}.spatial"));
    if cfg.video {
        AttentionParams::init(ch, ch, cfg.heads, true, rng)?.insert_into(ps, &format!("{prefix}.temporal"));
    }
    Ok(())
}

/// Fresh weights: random convolutions and spatial attention, identity
/// adaptors, zero temporal / cross-attention output projections and a
/// zero FPS embedding output layer.
pub fn init_denoiser<T: Scalar, R: Rng>(cfg: &UNetConfig, rng: &mut R) -> Result<ParamSet<T>> {
    cfg.validate()?;
    let mut ps = ParamSet::new();
    let e = cfg.embed_width();
    EmbeddingMlp::<T>::init(cfg.base_width, e, e, false, rng).insert_into(&mut ps, "time_mlp");
    if cfg.video {
        EmbeddingMlp::<T>::init(cfg.base_width, e, e, true, rng).insert_into(&mut ps, "fps_mlp");
    }
    init_conv(&mut ps, "conv_in", cfg.base_width, cfg.in_channels + cfg.extra_in_channels, 3, false, rng);
    let mut ch = cfg.base_width;
    let levels = cfg.levels();
    for l in 0..levels {
        let out = cfg.level_channels(l);
        res_block_init(&mut ps, &format!("down.{l}.res"), cfg, ch, out, rng);
        if cfg.has_attention(l) {
            st_block_init(&mut ps, &format!("down.{l}.attn"), cfg, out, rng)?;
        }
        if l + 1 < levels {
            init_conv(&mut ps, &format!("down.{l}.downsample"), out, out, 3, false, rng);
        }
        ch = out;
    }
    res_block_init(&mut ps, "mid.res1", cfg, ch, ch, rng);
    st_block_init(&mut ps, "mid.attn", cfg, ch, rng)?;
    res_block_init(&mut ps, "mid.res2", cfg, ch, ch, rng);
    for l in (0..levels).rev() {
        let out = cfg.level_channels(l);
        res_block_init(&mut ps, &format!("up.{l}.res"), cfg, ch + out, out, rng);
        if cfg.has_attention(l) {
            st_block_init(&mut ps, &format!("up.{l}.attn"), cfg, out, rng)?;
        }
        if l > 0 {
            init_conv(&mut ps, &format!("up.{l}.upsample"), out, out, 3, false, rng);
        }
        ch = out;
    }
    init_norm(&mut ps, "out.norm", ch);
    init_conv(&mut ps, "out.conv", cfg.in_channels, ch, 3, false, rng);
    Ok(ps)
}

fn res_block<T: Scalar>(b: &Binding<T>, prefix: &str, x: Var, emb_act: Var) -> Result<Var> {
    let g = b.graph();
    let ch_in = g.shape(x)[1];
    let ch_out = b.params().get(&format!("{prefix}.conv1.weight"))?.dim(0);
    let h = group_norm(b, &format!("{prefix}.norm1"), x, norm_groups(ch_in))?;
    let h = g.silu(h);
    let h = conv(b, &format!("{prefix}.conv1"), h, 1, 1)?;
    let h = adaptor_if_present(b, &format!("{prefix}.adaptor1"), h)?;
    let e = linear(b, &format!("{prefix}.emb_proj"), emb_act)?;
    let e = g.reshape(e, &[ch_out])?;
    let h = g.affine(h, None, Some(e))?;
    let h = group_norm(b, &format!("{prefix}.norm2"), h, norm_groups(ch_out))?;
    let h = g.silu(h);
    let h = conv(b, &format!("{prefix}.conv2"), h, 1, 1)?;
    let h = adaptor_if_present(b, &format!("{prefix}.adaptor2"), h)?;
    let skip = if b.has(&format!("{prefix}.skip.weight")) { conv(b, &format!("{prefix}.skip"), x, 1, 0)? } else { x };
    g.add(h, skip)
}

fn adaptor_if_present<T: Scalar>(b: &Binding<T>, prefix: &str, h: Var) -> Result<Var> {
    if b.has(&format!("{prefix}.scale")) {
        blocks::adaptor(b, prefix, h)
    } else {
        Ok(h)
    }
}

/// Checks a latent against the configuration, returning `(F, H, W)`.
pub fn check_input(cfg: &UNetConfig, shape: &[usize]) -> Result<(usize, usize, usize)> {
    let want_c = cfg.in_channels + cfg.extra_in_channels;
    ensure!(shape.len() == 4, Shape, "denoiser input must be [F, C, H, W], got {shape:?}");
    let (f, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    ensure!(c == want_c, Shape, "denoiser expects {want_c} input channels, got {c}");
    ensure!(f >= 1, Shape, "denoiser input has no frames");
    ensure!(
        !cfg.video || f <= cfg.frames,
        Shape,
        "{f} frames exceed the configured {} frames",
        cfg.frames
    );
    let d = cfg.spatial_divisor();
    ensure!(h > 0 && w > 0 && h % d == 0 && w % d == 0, Shape, "latent {h}x{w} is not divisible by {d}");
    Ok((f, h, w))
}

/// Graph form of the denoiser `eps_theta(z_t, t, tau(y), nu)`.
///
/// The timestep and FPS embeddings are summed and injected into every
/// residual block after its first convolution and adaptor.
pub fn denoiser_graph<T: Scalar>(
    b: &Binding<T>,
    cfg: &UNetConfig,
    zt: Var,
    t: usize,
    cond: Var,
    nu: Option<f64>,
) -> Result<Var> {
    let g = b.graph();
    check_input(cfg, &g.shape(zt))?;
    ensure!(t <= cfg.max_timestep, InvalidArgument, "step {t} outside 0..={}", cfg.max_timestep);
    let cshape = g.shape(cond);
    ensure!(
        cshape.len() == 2 && cshape[1] == cfg.cond_width,
        Shape,
        "condition tokens must be [L, {}], got {cshape:?}",
        cfg.cond_width
    );

    let mut emb = embedding_mlp_graph(b, "time_mlp", t as f64)?;
    if b.has("fps_mlp.l1.weight") {
        let nu = nu.ok_or_else(|| crate::Error::InvalidArgument("video denoiser needs a frame rate".into()))?;
        ensure!(nu > 0.0 && nu.is_finite(), InvalidArgument, "frame rate must be positive, got {nu}");
        emb = g.add(emb, embedding_mlp_graph(b, "fps_mlp", nu)?)?;
    }
    let e = cfg.embed_width();
    let emb_act = g.silu(g.reshape(emb, &[1, e])?);

    let levels = cfg.levels();
    let mut h = conv(b, "conv_in", zt, 1, 1)?;
    let mut skips = Vec::with_capacity(levels);
    for l in 0..levels {
        h = res_block(b, &format!("down.{l}.res"), h, emb_act)?;
        if cfg.has_attention(l) {
            h = st_attn_block_graph(b, &format!("down.{l}.attn"), h, cond, cfg.heads)?;
        }
        skips.push(h);
        if l + 1 < levels {
            h = conv(b, &format!("down.{l}.downsample"), h, 2, 1)?;
        }
    }
    h = res_block(b, "mid.res1", h, emb_act)?;
    h = st_attn_block_graph(b, "mid.attn", h, cond, cfg.heads)?;
    h = res_block(b, "mid.res2", h, emb_act)?;
    for l in (0..levels).rev() {
        h = g.concat_channels(h, skips[l])?;
        h = res_block(b, &format!("up.{l}.res"), h, emb_act)?;
        if cfg.has_attention(l) {
            h = st_attn_block_graph(b, &format!("up.{l}.attn"), h, cond, cfg.heads)?;
        }
        if l > 0 {
            h = g.upsample2x(h)?;
            h = conv(b, &format!("up.{l}.upsample"), h, 1, 1)?;
        }
    }
    let ch = g.shape(h)[1];
    h = group_norm(b, "out.norm", h, norm_groups(ch))?;
    h = g.silu(h);
    conv(b, "out.conv", h, 1, 1)
}

/// Inference-only forward pass; no backward closures are recorded.
pub fn denoise_predict<T: Scalar>(
    zt: &Tensor<T>,
    t: usize,
    cond: &ConditionEmbedding<T>,
    nu: Option<f64>,
    weights: &ParamSet<T>,
    cfg: &UNetConfig,
) -> Result<Tensor<T>> {
    let g = Graph::new();
    let b = Binding::new(&g, weights, false);
    let z = g.constant(zt.clone());
    let c = g.constant(cond.tokens.clone());
    let out = denoiser_graph(&b, cfg, z, t, c, nu)?;
    drop(b);
    Ok(Graph::into_value(g, out))
}

/// A configuration together with its weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser<T> {
    pub config: UNetConfig,
    pub weights: ParamSet<T>,
}

impl<T: Scalar> Denoiser<T> {
    pub fn init<R: Rng>(config: UNetConfig, rng: &mut R) -> Result<Self> {
        let weights = init_denoiser(&config, rng)?;
        Ok(Self { config, weights })
    }

    pub fn predict(&self, zt: &Tensor<T>, t: usize, cond: &ConditionEmbedding<T>, nu: Option<f64>) -> Result<Tensor<T>> {
        denoise_predict(zt, t, cond, nu, &self.weights, &self.config)
    }

    pub fn num_params(&self) -> usize {
        self.weights.num_elements()
    }
}

/// Turns image-model weights into a video model: shared weights are
/// copied, adaptors start at identity and temporal attention / FPS
/// embedding outputs at zero, so the video model reproduces the image
/// model frame by frame.
pub fn videofy_image_weights<T: Scalar, R: Rng>(
    image_weights: &ParamSet<T>,
    video_cfg: &UNetConfig,
    rng: &mut R,
) -> Result<ParamSet<T>> {
    ensure!(video_cfg.video, InvalidArgument, "videofy needs a video configuration");
    let template = init_denoiser::<T, R>(video_cfg, rng)?;
    for (name, t) in image_weights.iter() {
        ensure!(!is_temporal_param(name), InvalidArgument, "image weights already contain temporal tensor `{name}`");
        let slot = template
            .get(name)
            .map_err(|_| crate::Error::InvalidArgument(format!("image tensor `{name}` has no place in the video model")))?;
        ensure!(
            slot.shape() == t.shape(),
            Shape,
            "image tensor `{name}` is {:?}, video model expects {:?}",
            t.shape(),
            slot.shape()
        );
    }
    template
        .into_iter()
        .map(|(name, t)| {
            if is_temporal_param(&name) {
                Ok((name, t))
            } else {
                let w = image_weights.get(&name)?.clone();
                Ok((name, w))
            }
        })
        .collect()
}

/// Drops every temporal tensor, leaving image-model weights.
pub fn strip_temporal<T: Scalar>(weights: &ParamSet<T>) -> ParamSet<T> {
    weights.filtered(|n| !is_temporal_param(n))
}

/// Scalar count of all adaptor tables: `2 * F * C` per site.
pub fn adaptor_param_count(cfg: &UNetConfig) -> usize {
    if !cfg.video {
        return 0;
    }
    cfg.adaptor_sites().iter().map(|(_, c)| 2 * cfg.frames * c).sum()
}
