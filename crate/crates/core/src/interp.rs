//! Frame interpolation: a denoiser over short mid-frame sequences whose
//! input channels are `[noisy_mid | prev | next]`, initialised from the
//! keyframe model with the extra input channels at zero.

use crate::autograd::{Graph, Var};
use crate::blocks::{ConditionEmbedding, ConditionSource};
use crate::data::frame_proxy_tokens;
use crate::error::{ensure, Result};
use crate::params::{Binding, ParamSet};
use crate::tensor::{Scalar, Tensor};
use crate::unet::{denoiser_graph, UNetConfig};

/// Intermediate frames generated between two keyframes.
pub const MID_FRAMES: usize = 3;

/// One interpolation problem.
#[derive(Clone, Debug, PartialEq)]
pub struct InterpBatch<T> {
    /// `[1, C, H, W]`.
    pub prev_latent: Tensor<T>,
    /// `[1, C, H, W]`.
    pub next_latent: Tensor<T>,
    /// `[M, C, H, W]`.
    pub noisy_mid: Tensor<T>,
    pub cond: ConditionEmbedding<T>,
}

impl<T: Scalar> InterpBatch<T> {
    fn check(&self) -> Result<()> {
        let s = self.noisy_mid.shape();
        ensure!(s.len() == 4 && s[0] >= 1, Shape, "noisy mid-frames must be [M, C, H, W], got {s:?}");
        for (what, t) in [("previous", &self.prev_latent), ("next", &self.next_latent)] {
            ensure!(
                t.shape() == [1, s[1], s[2], s[3]],
                Shape,
                "{what} keyframe latent {:?} does not match mid-frames {s:?}",
                t.shape()
            );
        }
        Ok(())
    }

    /// `[M, 3C, H, W]` with the neighbours repeated at every mid position.
    pub fn model_input(&self) -> Result<Tensor<T>> {
        self.check()?;
        let s = self.noisy_mid.shape();
        let (m, plane) = (s[0], s[1] * s[2] * s[3]);
        let mut data = Vec::with_capacity(3 * m * plane);
        for i in 0..m {
            data.extend_from_slice(&self.noisy_mid.data()[i * plane..(i + 1) * plane]);
            data.extend_from_slice(self.prev_latent.data());
            data.extend_from_slice(self.next_latent.data());
        }
        Tensor::from_vec(&[m, 3 * s[1], s[2], s[3]], data)
    }
}

/// Keyframe configuration with room for the two neighbour latents.
pub fn interp_config(key: &UNetConfig) -> UNetConfig {
    UNetConfig { extra_in_channels: 2 * key.in_channels, ..key.clone() }
}

/// Frame rate seen by the interpolation model: `(M + 1)` times the keyframe rate.
pub fn interp_fps(key_nu: f64, mid_frames: usize) -> f64 {
    key_nu * (mid_frames + 1) as f64
}

/// Copies every keyframe tensor; `conv_in.weight` grows zero input-channel
/// slices for the neighbour latents.
pub fn init_interp_from_keyframe<T: Scalar>(
    key_weights: &ParamSet<T>,
    key_cfg: &UNetConfig,
) -> Result<(ParamSet<T>, UNetConfig)> {
    ensure!(key_cfg.extra_in_channels == 0, InvalidArgument, "keyframe model already has extra input channels");
    ensure!(key_cfg.video, InvalidArgument, "interpolation starts from a video model");
    let cfg = interp_config(key_cfg);
    let w = key_weights.get("conv_in.weight")?;
    let c = key_cfg.in_channels;
    ensure!(
        w.shape() == [key_cfg.base_width, c, 3, 3],
        Shape,
        "conv_in.weight {:?} does not match the keyframe configuration",
        w.shape()
    );
    let (out, k2) = (w.dim(0), 9);
    let cin = c + cfg.extra_in_channels;
    let mut data = vec![T::zero(); out * cin * k2];
    for o in 0..out {
        data[o * cin * k2..(o * cin + c) * k2].copy_from_slice(&w.data()[o * c * k2..(o + 1) * c * k2]);
    }
    let mut weights = key_weights.clone();
    weights.insert("conv_in.weight", Tensor::from_vec(&[out, cin, 3, 3], data)?);
    Ok((weights, cfg))
}

/// Frame-proxy condition: one token per neighbour latent.
pub fn interp_condition<T: Scalar>(prev: &Tensor<T>, next: &Tensor<T>, width: usize) -> Result<ConditionEmbedding<T>> {
    ensure!(prev.rank() == 4 && prev.dim(0) == 1, Shape, "neighbour latent must be [1, C, H, W]");
    prev.expect_same_shape(next, "neighbour latents")?;
    let (c, h, w) = (prev.dim(1), prev.dim(2), prev.dim(3));
    let mut data = Vec::with_capacity(2 * width);
    for t in [prev, next] {
        let frame: Vec<f32> = t.data().iter().map(|v| v.to_f32().unwrap_or(0.0)).collect();
        data.extend(frame_proxy_tokens(&frame, c, h, w, width, 1).into_iter().map(|v| T::from_f64_lossy(v as f64)));
    }
    ConditionEmbedding::new(Tensor::from_vec(&[2, width], data)?, ConditionSource::FrameProxy)
}

/// Graph form; `noisy` is the `[M, C, H, W]` variable being denoised.
pub fn interp_graph<T: Scalar>(
    b: &Binding<T>,
    cfg: &UNetConfig,
    noisy: Var,
    prev: &Tensor<T>,
    next: &Tensor<T>,
    t: usize,
    cond: Var,
    nu: f64,
) -> Result<Var> {
    let g = b.graph();
    let m = g.shape(noisy)[0];
    let mut ctx = Vec::with_capacity(m * 2 * prev.len());
    for _ in 0..m {
        ctx.extend_from_slice(prev.data());
        ctx.extend_from_slice(next.data());
    }
    let s = prev.shape();
    let ctx = g.constant(Tensor::from_vec(&[m, 2 * s[1], s[2], s[3]], ctx)?);
    let input = g.concat_channels(noisy, ctx)?;
    denoiser_graph(b, cfg, input, t, cond, Some(nu))
}

/// Prediction for the `M` mid-frames.
pub fn interp_predict<T: Scalar>(
    batch: &InterpBatch<T>,
    t: usize,
    nu: f64,
    weights: &ParamSet<T>,
    cfg: &UNetConfig,
) -> Result<Tensor<T>> {
    ensure!(
        cfg.extra_in_channels == 2 * cfg.in_channels,
        Shape,
        "interpolation model needs {} extra input channels, has {}",
        2 * cfg.in_channels,
        cfg.extra_in_channels
    );
    batch.check()?;
    let g = Graph::new();
    let b = Binding::new(&g, weights, false);
    let noisy = g.constant(batch.noisy_mid.clone());
    let cond = g.constant(batch.cond.tokens.clone());
    let out = interp_graph(&b, cfg, noisy, &batch.prev_latent, &batch.next_latent, t, cond, nu)?;
    drop(b);
    Ok(Graph::into_value(g, out))
}

/// Interleaves keyframes with `M` generated frames per gap:
/// `k0 m m m k1 ... k_{K-1}`.
pub fn assemble_interpolated_video<T: Scalar>(
    keyframes: &Tensor<T>,
    mids: &Tensor<T>,
    mid_frames: usize,
) -> Result<Tensor<T>> {
    ensure!(keyframes.rank() >= 2 && keyframes.dim(0) >= 1, Shape, "no keyframes");
    let k = keyframes.dim(0);
    ensure!(
        mids.rank() == keyframes.rank() && mids.shape()[1..] == keyframes.shape()[1..],
        Shape,
        "mid-frames {:?} do not match keyframes {:?}",
        mids.shape(),
        keyframes.shape()
    );
    ensure!(
        mids.dim(0) == (k - 1) * mid_frames,
        InvalidArgument,
        "{k} keyframes need {} mid-frames, got {}",
        (k - 1) * mid_frames,
        mids.dim(0)
    );
    let mut parts = Vec::with_capacity(2 * k);
    for i in 0..k {
        parts.push(keyframes.narrow_outer(i, 1)?);
        if i + 1 < k {
            parts.push(mids.narrow_outer(i * mid_frames, mid_frames)?);
        }
    }
    Tensor::stack_outer(&parts)
}
