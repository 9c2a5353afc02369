//! Frame autoencoder mapping RGB frames to the diffusion latent space.
//!
//! The encoder and the base decoder act on every frame independently.
//! The video decoder is the same stack with two directed temporal
//! attention layers after its two lowest-resolution stages; with their
//! output projections at zero it is exactly the frame-wise decoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::blocks::{conv, directed_temporal_attention_graph, init_conv, AttentionParams};
use crate::error::{ensure, Result};
use crate::params::{Binding, ParamSet};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeConfig {
    pub image_channels: usize,
    pub latent_channels: usize,
    pub base_width: usize,
    /// Spatial reduction factor `f`, 4 or 8.
    pub downsample: usize,
    pub heads: usize,
    /// Weight of the KL term.
    pub beta_kl: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self { image_channels: 3, latent_channels: 4, base_width: 16, downsample: 4, heads: 2, beta_kl: 1e-4 }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.downsample == 4 || self.downsample == 8,
            InvalidArgument,
            "downsample factor must be 4 or 8, got {}",
            self.downsample
        );
        ensure!(self.image_channels > 0 && self.latent_channels > 0, InvalidArgument, "channel counts must be positive");
        ensure!(self.base_width > 0, InvalidArgument, "base_width must be positive");
        ensure!(
            self.heads > 0 && self.inner_width().is_multiple_of(self.heads),
            InvalidArgument,
            "{} heads do not divide {} channels",
            self.heads,
            self.inner_width()
        );
        ensure!(self.beta_kl >= 0.0 && self.beta_kl.is_finite(), InvalidArgument, "beta_kl must be >= 0");
        Ok(())
    }

    /// Number of stride-2 stages, `log2 f`.
    pub fn stages(&self) -> usize {
        self.downsample.trailing_zeros() as usize
    }

    /// Channel width below full resolution.
    pub fn inner_width(&self) -> usize {
        2 * self.base_width
    }
}

/// Initial bias of the log-variance head.
pub const LOGVAR_INIT: f64 = -6.0;

/// Names of the two decoder temporal layers.
pub fn temporal_layer_names() -> [&'static str; 2] {
    ["dec.temporal.0", "dec.temporal.1"]
}

pub fn is_decoder_temporal(name: &str) -> bool {
    name.starts_with("dec.temporal.")
}

/// Random convolutions; temporal output projections start at zero.
pub fn init_vae<T: Scalar, R: Rng>(cfg: &VaeConfig, rng: &mut R) -> Result<ParamSet<T>> {
    cfg.validate()?;
    let (b, w) = (cfg.base_width, cfg.inner_width());
    let mut ps = ParamSet::new();
    init_conv(&mut ps, "enc.conv_in", b, cfg.image_channels, 3, false, rng);
    for s in 0..cfg.stages() {
        let cin = if s == 0 { b } else { w };
        init_conv(&mut ps, &format!("enc.down.{s}"), w, cin, 3, false, rng);
        init_conv(&mut ps, &format!("enc.conv.{s}"), w, w, 3, false, rng);
    }
    init_conv(&mut ps, "enc.out", 2 * cfg.latent_channels, w, 1, false, rng);
    // start with a narrow posterior so sampling noise does not drown the means
    let bias = ps.get_mut("enc.out.bias")?;
    for v in &mut bias.data_mut()[cfg.latent_channels..] {
        *v = T::from_f64_lossy(LOGVAR_INIT);
    }

    init_conv(&mut ps, "dec.conv_in", w, cfg.latent_channels, 3, false, rng);
    for s in 0..cfg.stages() {
        init_conv(&mut ps, &format!("dec.conv.{s}"), w, w, 3, false, rng);
        if s < 2 {
            AttentionParams::<T>::init(w, w, cfg.heads, true, rng)?.insert_into(&mut ps, &format!("dec.temporal.{s}"));
        }
        let cout = if s + 1 == cfg.stages() { b } else { w };
        init_conv(&mut ps, &format!("dec.up.{s}"), cout, w, 3, false, rng);
    }
    init_conv(&mut ps, "dec.out", cfg.image_channels, b, 3, false, rng);
    Ok(ps)
}

fn check_frames(cfg: &VaeConfig, shape: &[usize]) -> Result<()> {
    ensure!(shape.len() == 4, Shape, "expected [F, C, H, W], got {shape:?}");
    ensure!(shape[1] == cfg.image_channels, Shape, "expected {} image channels, got {}", cfg.image_channels, shape[1]);
    let f = cfg.downsample;
    ensure!(
        shape[2] > 0 && shape[3] > 0 && shape[2].is_multiple_of(f) && shape[3].is_multiple_of(f),
        Shape,
        "frame size {}x{} is not divisible by {f}",
        shape[2],
        shape[3]
    );
    Ok(())
}

/// Returns `(mu, logvar)`, each `[F, C, H/f, W/f]`.
pub fn encoder_graph<T: Scalar>(b: &Binding<T>, cfg: &VaeConfig, x: Var) -> Result<(Var, Var)> {
    let g = b.graph();
    check_frames(cfg, &g.shape(x))?;
    let mut h = g.silu(conv(b, "enc.conv_in", x, 1, 1)?);
    for s in 0..cfg.stages() {
        h = g.silu(conv(b, &format!("enc.down.{s}"), h, 2, 1)?);
        h = g.silu(conv(b, &format!("enc.conv.{s}"), h, 1, 1)?);
    }
    let out = conv(b, "enc.out", h, 1, 0)?;
    let c = cfg.latent_channels;
    Ok((g.slice_channels(out, 0, c)?, g.slice_channels(out, c, c)?))
}

/// Decoder; `temporal` enables the two directed temporal attention layers.
pub fn decoder_graph<T: Scalar>(b: &Binding<T>, cfg: &VaeConfig, z: Var, temporal: bool) -> Result<Var> {
    let g = b.graph();
    let shape = g.shape(z);
    ensure!(
        shape.len() == 4 && shape[1] == cfg.latent_channels,
        Shape,
        "expected latent [F, {}, H, W], got {shape:?}",
        cfg.latent_channels
    );
    let mut h = g.silu(conv(b, "dec.conv_in", z, 1, 1)?);
    for s in 0..cfg.stages() {
        h = g.silu(conv(b, &format!("dec.conv.{s}"), h, 1, 1)?);
        if temporal && s < 2 {
            h = directed_temporal_attention_graph(b, &format!("dec.temporal.{s}"), h, cfg.heads)?;
        }
        h = g.upsample2x(h)?;
        h = g.silu(conv(b, &format!("dec.up.{s}"), h, 1, 1)?);
    }
    conv(b, "dec.out", h, 1, 1)
}

fn run<T: Scalar>(weights: &ParamSet<T>, input: &Tensor<T>, f: impl FnOnce(&Binding<T>, Var) -> Result<Var>) -> Result<Tensor<T>> {
    let g = Graph::new();
    let b = Binding::new(&g, weights, false);
    let x = g.constant(input.clone());
    let out = f(&b, x)?;
    drop(b);
    Ok(Graph::into_value(g, out))
}

/// Posterior means of every frame, encoded independently.
pub fn encode_frames<T: Scalar>(x: &Tensor<T>, weights: &ParamSet<T>, cfg: &VaeConfig) -> Result<Tensor<T>> {
    run(weights, x, |b, v| Ok(encoder_graph(b, cfg, v)?.0))
}

/// Frame-by-frame reconstruction, no cross-frame interaction.
pub fn decode_frames_independent<T: Scalar>(z: &Tensor<T>, weights: &ParamSet<T>, cfg: &VaeConfig) -> Result<Tensor<T>> {
    run(weights, z, |b, v| decoder_graph(b, cfg, v, false))
}

/// Reconstruction through the decoder with temporal attention.
pub fn decode_frames_video<T: Scalar>(z: &Tensor<T>, weights: &ParamSet<T>, cfg: &VaeConfig) -> Result<Tensor<T>> {
    run(weights, z, |b, v| decoder_graph(b, cfg, v, true))
}

/// `MSE(x, recon) + beta_kl * mean KL(N(mu, exp(logvar)) || N(0, 1))`.
pub fn vae_training_loss<T: Scalar>(
    x: &Tensor<T>,
    reconstruction: &Tensor<T>,
    mu: &Tensor<T>,
    logvar: &Tensor<T>,
    beta_kl: f64,
) -> Result<T> {
    x.expect_same_shape(reconstruction, "reconstruction")?;
    mu.expect_same_shape(logvar, "logvar")?;
    let g = Graph::new();
    let (xv, rv) = (g.constant(x.clone()), g.constant(reconstruction.clone()));
    let (mv, lv) = (g.constant(mu.clone()), g.constant(logvar.clone()));
    let mse = g.mse(rv, xv)?;
    let kl = g.kl_standard_normal(mv, lv)?;
    let loss = g.add(mse, g.scale(kl, T::from_f64_lossy(beta_kl)))?;
    Ok(g.value(loss).data()[0])
}

/// Training objective on a graph with reparameterised latents.
pub fn vae_loss_graph<T: Scalar>(b: &Binding<T>, cfg: &VaeConfig, x: Var, noise: &Tensor<T>) -> Result<Var> {
    let g = b.graph();
    let (mu, logvar) = encoder_graph(b, cfg, x)?;
    let z = g.reparameterize(mu, logvar, noise)?;
    let recon = decoder_graph(b, cfg, z, false)?;
    let mse = g.mse(recon, x)?;
    let kl = g.kl_standard_normal(mu, logvar)?;
    g.add(mse, g.scale(kl, T::from_f64_lossy(cfg.beta_kl)))
}
