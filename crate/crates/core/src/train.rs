//! Training loops for the VAE, the keyframe (or image) denoiser and the
//! interpolation denoiser.
//!
//! Every loop is a pure function of the corpus, the configuration and the
//! seed: all random draws come from one ChaCha stream in a fixed order, and
//! per-sample gradients (computed in parallel) are summed in sample order.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::blocks::ConditionEmbedding;
use crate::checkpoint::{Checkpoint, CheckpointMeta, ModelKind, EMA_PREFIX, MOMENTUM_PREFIX};
use crate::data::{
    draw_window_length, effective_fps, encode_condition_text, encode_condition_unsupervised, window_indices, Corpus,
};
use crate::error::{ensure, Error, Result};
use crate::interp::{init_interp_from_keyframe, interp_condition, interp_graph, MID_FRAMES};
use crate::params::{Binding, ParamSet};
use crate::schedule::{forward_diffuse, NoiseSchedule, PredictionTarget, ScheduleConfig};
use crate::tensor::Tensor;
use crate::unet::{denoiser_graph, init_denoiser, UNetConfig};
use crate::vae::{decoder_graph, encode_frames, init_vae, vae_loss_graph, VaeConfig};

/// Which stand-in encoder supplies the condition tokens.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CondMode {
    #[default]
    TextProxy,
    FrameProxy,
    Null,
}

impl std::str::FromStr for CondMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "text_proxy" | "text" => Ok(Self::TextProxy),
            "frame_proxy" | "frame" => Ok(Self::FrameProxy),
            "null" => Ok(Self::Null),
            other => Err(format!("unknown condition mode `{other}` (expected text_proxy, frame_proxy or null)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub ema_decay: Option<f64>,
    /// A trace line is written every this many steps (and at the first and last).
    pub log_every: usize,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
    /// Draw the training windows once and reuse them every step.
    pub fixed_batch: bool,
    pub window_lengths: Vec<usize>,
    /// Condition sequence length `L`.
    pub cond_tokens: usize,
    pub cond_mode: CondMode,
    /// Samples in the fixed-noise probe evaluated before and after training.
    pub probe_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.02,
            momentum: 0.9,
            batch_size: 4,
            steps: 1000,
            seed: 0,
            ema_decay: None,
            log_every: 10,
            grad_clip: Some(1.0),
            fixed_batch: false,
            window_lengths: crate::data::WINDOW_LENGTHS.to_vec(),
            cond_tokens: 6,
            cond_mode: CondMode::TextProxy,
            probe_samples: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.learning_rate >= 0.0 && self.learning_rate.is_finite(),
            InvalidArgument,
            "learning rate must be >= 0, got {}",
            self.learning_rate
        );
        ensure!((0.0..1.0).contains(&self.momentum), InvalidArgument, "momentum must be in [0, 1)");
        ensure!(self.steps >= 1, InvalidArgument, "steps must be at least 1");
        ensure!(self.batch_size >= 1, InvalidArgument, "batch_size must be at least 1");
        ensure!(self.log_every >= 1, InvalidArgument, "log_every must be at least 1");
        ensure!(self.cond_tokens >= 1, InvalidArgument, "cond_tokens must be at least 1");
        if let Some(d) = self.ema_decay {
            ensure!((0.0..=1.0).contains(&d), InvalidArgument, "ema_decay must be in [0, 1], got {d}");
        }
        if let Some(c) = self.grad_clip {
            ensure!(c > 0.0, InvalidArgument, "grad_clip must be positive");
        }
        Ok(())
    }
}

/// SGD with heavy-ball momentum: `v = mu v + g`, `w -= lr v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub learning_rate: f32,
    pub momentum: f32,
    pub grad_clip: Option<f64>,
    pub velocity: ParamSet<f32>,
}

impl Sgd {
    pub fn new(cfg: &TrainConfig, weights: &ParamSet<f32>) -> Self {
        Self {
            learning_rate: cfg.learning_rate as f32,
            momentum: cfg.momentum as f32,
            grad_clip: cfg.grad_clip,
            velocity: weights.zeros_like(),
        }
    }

    /// Applies one update and returns the (pre-clip) gradient norm.
    pub fn step(&mut self, weights: &mut ParamSet<f32>, grads: &ParamSet<f32>) -> Result<f64> {
        let norm = (grads.iter().map(|(_, g)| g.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>()).sum::<f64>())
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::Divergence(format!("gradient norm is {norm}")));
        }
        let scale = match self.grad_clip {
            Some(c) if norm > c => (c / norm) as f32,
            _ => 1.0,
        };
        for (name, g) in grads.iter() {
            let v = self.velocity.get_mut(name)?;
            for (vi, &gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = self.momentum * *vi + scale * gi;
            }
            let v = self.velocity.get(name)?.clone();
            weights.get_mut(name)?.axpy(-self.learning_rate, &v);
        }
        Ok(norm)
    }
}

/// Exponential moving average `e = d e + (1 - d) w`.
#[derive(Clone, Debug)]
pub struct Ema {
    pub decay: f32,
    pub weights: ParamSet<f32>,
}

impl Ema {
    pub fn new(decay: f64, weights: &ParamSet<f32>) -> Self {
        Self { decay: decay as f32, weights: weights.clone() }
    }

    pub fn update(&mut self, weights: &ParamSet<f32>) -> Result<()> {
        let d = self.decay;
        for (name, w) in weights.iter() {
            let e = self.weights.get_mut(name)?;
            if d == 0.0 {
                e.data_mut().copy_from_slice(w.data());
            } else if d != 1.0 {
                for (ei, &wi) in e.data_mut().iter_mut().zip(w.data()) {
                    *ei = d * *ei + (1.0 - d) * wi;
                }
            }
        }
        Ok(())
    }
}

/// `(step, loss)` pairs, written as one `step value` line each.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossTrace {
    pub entries: Vec<(usize, f64)>,
}

impl LossTrace {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (step, v) in &self.entries {
            let _ = writeln!(s, "{step} {v:e}");
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn first(&self) -> Option<f64> {
        self.entries.first().map(|e| e.1)
    }

    pub fn last(&self) -> Option<f64> {
        self.entries.last().map(|e| e.1)
    }
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub trace: LossTrace,
    /// Mean loss on the fixed-noise probe set before the first update.
    pub initial_probe: f64,
    /// The same probe after the last update.
    pub final_probe: f64,
}

/// Mean loss and mean gradient over `samples`.
///
/// Per-sample tapes are independent and run in parallel; the reduction
/// happens afterwards in sample order, so the result does not depend on
/// the thread count.
pub fn batch_gradients<S: Sync>(
    weights: &ParamSet<f32>,
    samples: &[S],
    loss: &(dyn Fn(&Binding<f32>, &S) -> Result<Var> + Sync),
) -> Result<(f64, ParamSet<f32>)> {
    ensure!(!samples.is_empty(), InvalidArgument, "empty batch");
    let per: Vec<(f64, ParamSet<f32>)> = samples
        .par_iter()
        .map(|s| {
            let g = Graph::new();
            let b = Binding::new(&g, weights, true);
            let l = loss(&b, s)?;
            let value = g.value(l).data()[0] as f64;
            let grads = b.gradients(&g.backward(l)?);
            Ok((value, grads))
        })
        .collect::<Result<_>>()?;
    let inv = 1.0 / samples.len() as f32;
    let mut total = weights.zeros_like();
    let mut loss_sum = 0.0;
    for (l, g) in &per {
        loss_sum += l;
        total.axpy(inv, g)?;
    }
    Ok((loss_sum / samples.len() as f64, total))
}

/// Mean loss without gradients.
pub fn batch_loss<S: Sync>(
    weights: &ParamSet<f32>,
    samples: &[S],
    loss: &(dyn Fn(&Binding<f32>, &S) -> Result<Var> + Sync),
) -> Result<f64> {
    ensure!(!samples.is_empty(), InvalidArgument, "empty batch");
    let vals: Vec<f64> = samples
        .par_iter()
        .map(|s| {
            let g = Graph::new();
            let b = Binding::new(&g, weights, false);
            let l = loss(&b, s)?;
            Ok(g.value(l).data()[0] as f64)
        })
        .collect::<Result<_>>()?;
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

struct LoopState {
    trace: LossTrace,
    sgd: Sgd,
    ema: Option<Ema>,
    initial_probe: f64,
    final_probe: f64,
}

/// The shared optimisation loop. `draw` produces each step's batch.
fn optimise<S: Sync>(
    weights: &mut ParamSet<f32>,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    mut draw: impl FnMut(&mut ChaCha8Rng) -> Result<Vec<S>>,
    loss: &(dyn Fn(&Binding<f32>, &S) -> Result<Var> + Sync),
    probe: &[S],
) -> Result<LoopState> {
    let initial_probe = if probe.is_empty() { f64::NAN } else { batch_loss(weights, probe, loss)? };
    let mut sgd = Sgd::new(cfg, weights);
    let mut ema = cfg.ema_decay.map(|d| Ema::new(d, weights));
    let mut trace = LossTrace::default();
    for step in 1..=cfg.steps {
        let batch = draw(rng)?;
        let (value, grads) = batch_gradients(weights, &batch, loss)?;
        if !value.is_finite() {
            return Err(Error::Divergence(format!("loss became {value} at step {step}")));
        }
        if step == 1 || step % cfg.log_every == 0 || step == cfg.steps {
            trace.entries.push((step, value));
        }
        sgd.step(weights, &grads)?;
        if let Some(e) = ema.as_mut() {
            e.update(weights)?;
        }
    }
    if !weights.all_finite() {
        return Err(Error::Divergence("weights contain non-finite values".into()));
    }
    let final_probe = if probe.is_empty() { f64::NAN } else { batch_loss(weights, probe, loss)? };
    Ok(LoopState { trace, sgd, ema, initial_probe, final_probe })
}

fn assemble_checkpoint(meta: CheckpointMeta, weights: ParamSet<f32>, state: &LoopState) -> Checkpoint {
    let mut tensors = weights;
    for (n, v) in state.sgd.velocity.iter() {
        tensors.insert(format!("{MOMENTUM_PREFIX}{n}"), v.clone());
    }
    if let Some(e) = &state.ema {
        for (n, w) in e.weights.iter() {
            tensors.insert(format!("{EMA_PREFIX}{n}"), w.clone());
        }
    }
    Checkpoint::new(meta, tensors)
}

// ---------------------------------------------------------------------
// VAE

struct FrameSample {
    frame: Tensor<f32>,
    noise: Tensor<f32>,
}

fn random_frame(corpus: &Corpus, rng: &mut ChaCha8Rng) -> Result<Tensor<f32>> {
    let c = rng.random_range(0..corpus.len());
    let clip = &corpus.clips[c];
    clip.narrow_outer(rng.random_range(0..clip.dim(0)), 1)
}

/// Trains the frame autoencoder; also measures the latent scale factor
/// (reciprocal standard deviation of encoder means).
pub fn train_vae(corpus: &Corpus, vae_cfg: &VaeConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    vae_cfg.validate()?;
    ensure!(!corpus.is_empty(), InvalidArgument, "empty corpus");
    let res = corpus.render.resolution;
    ensure!(res.is_multiple_of(vae_cfg.downsample), InvalidArgument, "resolution {res} not divisible by {}", vae_cfg.downsample);
    let lat = res / vae_cfg.downsample;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut weights = init_vae::<f32, _>(vae_cfg, &mut rng)?;
    let noise_shape = [1, vae_cfg.latent_channels, lat, lat];

    let draw_frames = |rng: &mut ChaCha8Rng| -> Result<Vec<Tensor<f32>>> {
        (0..cfg.batch_size).map(|_| random_frame(corpus, rng)).collect()
    };
    let fixed = if cfg.fixed_batch { Some(draw_frames(&mut rng)?) } else { None };
    let mut probe_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ PROBE_SALT);
    let probe_frames = match &fixed {
        Some(f) => f.clone(),
        None => (0..cfg.probe_samples).map(|_| random_frame(corpus, &mut probe_rng)).collect::<Result<_>>()?,
    };
    let probe: Vec<FrameSample> = probe_frames
        .into_iter()
        .map(|frame| FrameSample { frame, noise: Tensor::randn(&noise_shape, 1.0, &mut probe_rng) })
        .collect();

    let loss = |b: &Binding<f32>, s: &FrameSample| -> Result<Var> {
        let x = b.graph().constant(s.frame.clone());
        vae_loss_graph(b, vae_cfg, x, &s.noise)
    };
    let state = optimise(
        &mut weights,
        cfg,
        &mut rng,
        |rng| {
            let frames = match &fixed {
                Some(f) => f.clone(),
                None => draw_frames(rng)?,
            };
            Ok(frames.into_iter().map(|frame| FrameSample { frame, noise: Tensor::randn(&noise_shape, 1.0, rng) }).collect())
        },
        &loss,
        &probe,
    )?;

    let mut scale_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SCALE_SALT);
    let sample: Vec<Tensor<f32>> = (0..64.min(corpus.len() * 8)).map(|_| random_frame(corpus, &mut scale_rng)).collect::<Result<_>>()?;
    let z = encode_frames(&Tensor::stack_outer(&sample)?, &weights, vae_cfg)?;
    let n = z.len() as f64;
    let mean = z.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let std = (z.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
    let mut meta = CheckpointMeta::new(ModelKind::Vae);
    meta.step = cfg.steps as u64;
    meta.vae = Some(vae_cfg.clone());
    meta.latent_scale = Some(if std > 1e-8 { 1.0 / std } else { 1.0 });
    let checkpoint = assemble_checkpoint(meta, weights, &state);
    Ok(TrainOutcome { checkpoint, trace: state.trace, initial_probe: state.initial_probe, final_probe: state.final_probe })
}

const PROBE_SALT: u64 = 0x70f0_be5a_17;
const SCALE_SALT: u64 = 0x5ca1_e000;

/// Mean reconstruction MSE of the deterministic (posterior mean) path.
pub fn reconstruction_mse(frames: &Tensor<f32>, weights: &ParamSet<f32>, cfg: &VaeConfig) -> Result<f64> {
    let z = encode_frames(frames, weights, cfg)?;
    let r = crate::vae::decode_frames_independent(&z, weights, cfg)?;
    Ok(r.data().iter().zip(frames.data()).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum::<f64>() / frames.len() as f64)
}

/// Decoder fine-tuning on jittered latents of `window`-frame clips.
///
/// The encoder is frozen; each latent element receives independent
/// Gaussian jitter so the decoder must suppress frame-to-frame noise.
/// With `temporal` the decoder's directed temporal attention is used.
pub fn finetune_vae_decoder(
    corpus: &Corpus,
    vae: &Checkpoint,
    cfg: &TrainConfig,
    temporal: bool,
    window: usize,
    jitter: f64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let vae_cfg = vae.meta.vae.clone().ok_or_else(|| Error::InvalidArgument("checkpoint has no VAE configuration".into()))?;
    let mut weights = vae.weights();
    ensure!(window >= 1, InvalidArgument, "window must hold at least one frame");
    let latents = encode_corpus_raw(corpus, &weights, &vae_cfg)?;
    struct Clip {
        frames: Tensor<f32>,
        latents: Tensor<f32>,
    }
    let draw_clip = |rng: &mut ChaCha8Rng| -> Result<(Tensor<f32>, Tensor<f32>)> {
        let c = rng.random_range(0..corpus.len());
        let len = corpus.clips[c].dim(0);
        ensure!(len >= window, InvalidArgument, "clip {c} is shorter than {window} frames");
        let s = rng.random_range(0..=len - window);
        Ok((corpus.clips[c].narrow_outer(s, window)?, latents[c].narrow_outer(s, window)?))
    };
    let jittered = |(frames, z): (Tensor<f32>, Tensor<f32>), rng: &mut ChaCha8Rng| -> Clip {
        let n = Tensor::randn(z.shape(), jitter, rng);
        Clip { frames, latents: z.zip_map(&n, |a, b| a + b).expect("same shape") }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let fixed: Option<Vec<(Tensor<f32>, Tensor<f32>)>> =
        if cfg.fixed_batch { Some((0..cfg.batch_size).map(|_| draw_clip(&mut rng)).collect::<Result<_>>()?) } else { None };
    let mut probe_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ PROBE_SALT);
    let probe: Vec<Clip> = (0..cfg.probe_samples)
        .map(|_| draw_clip(&mut probe_rng).map(|p| jittered(p, &mut probe_rng)))
        .collect::<Result<_>>()?;
    let loss = |b: &Binding<f32>, s: &Clip| -> Result<Var> {
        let g = b.graph();
        let z = g.constant(s.latents.clone());
        let out = decoder_graph(b, &vae_cfg, z, temporal)?;
        g.mse(out, g.constant(s.frames.clone()))
    };
    let state = optimise(
        &mut weights,
        cfg,
        &mut rng,
        |rng| {
            let pairs = match &fixed {
                Some(f) => f.clone(),
                None => (0..cfg.batch_size).map(|_| draw_clip(rng)).collect::<Result<_>>()?,
            };
            Ok(pairs.into_iter().map(|p| jittered(p, rng)).collect())
        },
        &loss,
        &probe,
    )?;
    let mut meta = vae.meta.clone();
    meta.step += cfg.steps as u64;
    let checkpoint = assemble_checkpoint(meta, weights, &state);
    Ok(TrainOutcome { checkpoint, trace: state.trace, initial_probe: state.initial_probe, final_probe: state.final_probe })
}

/// Unscaled encoder means of every clip.
fn encode_corpus_raw(corpus: &Corpus, weights: &ParamSet<f32>, cfg: &VaeConfig) -> Result<Vec<Tensor<f32>>> {
    corpus.clips.par_iter().map(|c| encode_frames(c, weights, cfg)).collect()
}

/// Scaled latents of every clip, as used for diffusion training.
pub fn encode_corpus(corpus: &Corpus, vae: &Checkpoint) -> Result<Vec<Tensor<f32>>> {
    let cfg = vae.meta.vae.clone().ok_or_else(|| Error::InvalidArgument("checkpoint has no VAE configuration".into()))?;
    let scale = vae.meta.latent_scale.unwrap_or(1.0) as f32;
    let weights = vae.inference_weights();
    Ok(encode_corpus_raw(corpus, &weights, &cfg)?.into_iter().map(|z| z.scale(scale)).collect())
}

// ---------------------------------------------------------------------
// diffusion

/// Everything a diffusion loss needs for one training example.
#[derive(Clone, Debug)]
pub struct DiffusionSample {
    pub z0: Tensor<f32>,
    pub cond: ConditionEmbedding<f32>,
    pub nu: Option<f64>,
    pub t: usize,
    pub eps: Tensor<f32>,
}

#[derive(Clone, Debug)]
struct Window {
    z0: Tensor<f32>,
    cond: ConditionEmbedding<f32>,
    nu: Option<f64>,
}

fn condition_for(
    mode: CondMode,
    corpus: &Corpus,
    clip: usize,
    frames: impl FnOnce() -> Result<Tensor<f32>>,
    width: usize,
    tokens: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ConditionEmbedding<f32>> {
    match mode {
        CondMode::TextProxy => encode_condition_text(&corpus.params[clip], width, tokens),
        CondMode::FrameProxy => encode_condition_unsupervised(&frames()?, width, tokens, rng.random()),
        CondMode::Null => Ok(ConditionEmbedding::null(width)),
    }
}

fn draw_keyframe_window(
    corpus: &Corpus,
    latents: &[Tensor<f32>],
    ucfg: &UNetConfig,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Window> {
    let c = rng.random_range(0..corpus.len());
    let total = latents[c].dim(0);
    let fps = corpus.params[c].fps;
    if !ucfg.video {
        let i = rng.random_range(0..total);
        let z0 = latents[c].narrow_outer(i, 1)?;
        let cond = condition_for(cfg.cond_mode, corpus, c, || corpus.clips[c].narrow_outer(i, 1), ucfg.cond_width, cfg.cond_tokens, rng)?;
        return Ok(Window { z0, cond, nu: None });
    }
    let ls = draw_window_length(&cfg.window_lengths, total, rng)?;
    let start = rng.random_range(0..=total - ls);
    let idx = window_indices(start, ls);
    let pick = |src: &Tensor<f32>| -> Result<Tensor<f32>> {
        let parts: Vec<Tensor<f32>> = idx.iter().map(|&i| src.narrow_outer(i, 1)).collect::<Result<_>>()?;
        Tensor::stack_outer(&parts)
    };
    let z0 = pick(&latents[c])?;
    ensure!(
        z0.dim(0) <= ucfg.frames,
        InvalidArgument,
        "windows have {} frames but the model holds {}",
        z0.dim(0),
        ucfg.frames
    );
    let cond = condition_for(cfg.cond_mode, corpus, c, || pick(&corpus.clips[c]), ucfg.cond_width, cfg.cond_tokens, rng)?;
    Ok(Window { z0, cond, nu: Some(effective_fps(fps, ls)) })
}

fn noised(w: Window, steps: usize, rng: &mut ChaCha8Rng) -> DiffusionSample {
    let t = rng.random_range(1..=steps);
    let eps = Tensor::randn(w.z0.shape(), 1.0, rng);
    DiffusionSample { z0: w.z0, cond: w.cond, nu: w.nu, t, eps }
}

/// Denoising loss of one sample on a graph.
pub fn diffusion_loss_graph(
    b: &Binding<f32>,
    ucfg: &UNetConfig,
    sched: &NoiseSchedule,
    s: &DiffusionSample,
) -> Result<Var> {
    let g = b.graph();
    let zt = forward_diffuse(&s.z0, s.t, &s.eps, sched)?;
    let pred = denoiser_graph(b, ucfg, g.constant(zt), s.t, g.constant(s.cond.tokens.clone()), s.nu)?;
    let target = match ucfg.prediction_target {
        PredictionTarget::Epsilon => &s.eps,
        PredictionTarget::X0 => &s.z0,
    };
    g.mse(pred, g.constant(target.clone()))
}

/// Trains a keyframe (video) or image denoiser on VAE latents.
///
/// `init` continues from existing weights (e.g. text-proxy fine-tuning
/// after frame-proxy pretraining, or a videofied image model).
pub fn train_keyframe(
    corpus: &Corpus,
    latents: &[Tensor<f32>],
    ucfg: &UNetConfig,
    schedule: &ScheduleConfig,
    cfg: &TrainConfig,
    init: Option<ParamSet<f32>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    ucfg.validate()?;
    ensure!(!corpus.is_empty() && corpus.len() == latents.len(), InvalidArgument, "corpus and latents disagree");
    ensure!(schedule.steps <= ucfg.max_timestep, InvalidArgument, "schedule has {} steps but the model embeds at most {}", schedule.steps, ucfg.max_timestep);
    let sched = schedule.build()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut weights = match init {
        Some(w) => w,
        None => init_denoiser::<f32, _>(ucfg, &mut rng)?,
    };
    let steps = sched.steps();
    let fixed: Option<Vec<Window>> = if cfg.fixed_batch {
        Some((0..cfg.batch_size).map(|_| draw_keyframe_window(corpus, latents, ucfg, cfg, &mut rng)).collect::<Result<_>>()?)
    } else {
        None
    };
    let mut probe_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ PROBE_SALT);
    let probe_windows: Vec<Window> = match &fixed {
        Some(f) => (0..cfg.probe_samples.max(1)).map(|i| f[i % f.len()].clone()).collect(),
        None => (0..cfg.probe_samples)
            .map(|_| draw_keyframe_window(corpus, latents, ucfg, cfg, &mut probe_rng))
            .collect::<Result<_>>()?,
    };
    let probe: Vec<DiffusionSample> = probe_windows.into_iter().map(|w| noised(w, steps, &mut probe_rng)).collect();
    let loss = |b: &Binding<f32>, s: &DiffusionSample| diffusion_loss_graph(b, ucfg, &sched, s);
    let state = optimise(
        &mut weights,
        cfg,
        &mut rng,
        |rng| {
            let windows = match &fixed {
                Some(f) => f.clone(),
                None => (0..cfg.batch_size)
                    .map(|_| draw_keyframe_window(corpus, latents, ucfg, cfg, rng))
                    .collect::<Result<_>>()?,
            };
            Ok(windows.into_iter().map(|w| noised(w, steps, rng)).collect())
        },
        &loss,
        &probe,
    )?;
    let mut meta = CheckpointMeta::new(if ucfg.video { ModelKind::Keyframe } else { ModelKind::Image });
    meta.step = cfg.steps as u64;
    meta.prediction_target = Some(ucfg.prediction_target);
    meta.schedule = Some(*schedule);
    meta.unet = Some(ucfg.clone());
    let checkpoint = assemble_checkpoint(meta, weights, &state);
    Ok(TrainOutcome { checkpoint, trace: state.trace, initial_probe: state.initial_probe, final_probe: state.final_probe })
}

/// One interpolation training example.
#[derive(Clone, Debug)]
pub struct InterpSample {
    pub prev: Tensor<f32>,
    pub next: Tensor<f32>,
    pub mids: DiffusionSample,
}

fn draw_interp(corpus: &Corpus, latents: &[Tensor<f32>], width: usize, steps: usize, rng: &mut ChaCha8Rng) -> Result<InterpSample> {
    let c = rng.random_range(0..corpus.len());
    let total = latents[c].dim(0);
    let span = MID_FRAMES + 1;
    let max_stride = ((total - 1) / span).clamp(1, 3);
    let stride = rng.random_range(1..=max_stride);
    ensure!(span * stride < total, InvalidArgument, "clip {c} is too short for interpolation");
    let start = rng.random_range(0..total - span * stride);
    let at = |j: usize| latents[c].narrow_outer(start + j * stride, 1);
    let prev = at(0)?;
    let next = at(span)?;
    let mids: Vec<Tensor<f32>> = (1..span).map(at).collect::<Result<_>>()?;
    let cond = interp_condition(&prev, &next, width)?;
    let w = Window { z0: Tensor::stack_outer(&mids)?, cond, nu: Some(corpus.params[c].fps / stride as f64) };
    Ok(InterpSample { prev, next, mids: noised(w, steps, rng) })
}

fn interp_loss_graph(b: &Binding<f32>, ucfg: &UNetConfig, sched: &NoiseSchedule, s: &InterpSample) -> Result<Var> {
    let g = b.graph();
    let m = &s.mids;
    let zt = forward_diffuse(&m.z0, m.t, &m.eps, sched)?;
    let nu = m.nu.unwrap_or(1.0);
    let pred = interp_graph(b, ucfg, g.constant(zt), &s.prev, &s.next, m.t, g.constant(m.cond.tokens.clone()), nu)?;
    let target = match ucfg.prediction_target {
        PredictionTarget::Epsilon => &m.eps,
        PredictionTarget::X0 => &m.z0,
    };
    g.mse(pred, g.constant(target.clone()))
}

/// Trains the interpolation model, starting from a keyframe checkpoint.
pub fn train_interp(corpus: &Corpus, latents: &[Tensor<f32>], key: &Checkpoint, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let key_cfg = key.meta.unet.clone().ok_or_else(|| Error::InvalidArgument("keyframe checkpoint has no model configuration".into()))?;
    let schedule = key.meta.schedule.unwrap_or_default();
    let sched = schedule.build()?;
    ensure!(!corpus.is_empty() && corpus.len() == latents.len(), InvalidArgument, "corpus and latents disagree");
    let (mut weights, ucfg) = init_interp_from_keyframe(&key.inference_weights(), &key_cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let steps = sched.steps();
    let width = ucfg.cond_width;
    let fixed: Option<Vec<InterpSample>> = if cfg.fixed_batch {
        Some((0..cfg.batch_size).map(|_| draw_interp(corpus, latents, width, steps, &mut rng)).collect::<Result<_>>()?)
    } else {
        None
    };
    let mut probe_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ PROBE_SALT);
    let probe: Vec<InterpSample> =
        (0..cfg.probe_samples).map(|_| draw_interp(corpus, latents, width, steps, &mut probe_rng)).collect::<Result<_>>()?;
    let loss = |b: &Binding<f32>, s: &InterpSample| interp_loss_graph(b, &ucfg, &sched, s);
    let state = optimise(
        &mut weights,
        cfg,
        &mut rng,
        |rng| match &fixed {
            Some(f) => Ok(f
                .iter()
                .map(|s| {
                    let w = Window { z0: s.mids.z0.clone(), cond: s.mids.cond.clone(), nu: s.mids.nu };
                    InterpSample { prev: s.prev.clone(), next: s.next.clone(), mids: noised(w, steps, rng) }
                })
                .collect()),
            None => (0..cfg.batch_size).map(|_| draw_interp(corpus, latents, width, steps, rng)).collect(),
        },
        &loss,
        &probe,
    )?;
    let mut meta = CheckpointMeta::new(ModelKind::Interp);
    meta.step = cfg.steps as u64;
    meta.prediction_target = Some(ucfg.prediction_target);
    meta.schedule = Some(schedule);
    meta.unet = Some(ucfg);
    meta.latent_scale = key.meta.latent_scale;
    let checkpoint = assemble_checkpoint(meta, weights, &state);
    Ok(TrainOutcome { checkpoint, trace: state.trace, initial_probe: state.initial_probe, final_probe: state.final_probe })
}
