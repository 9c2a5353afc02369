//! End-to-end pipeline: run configuration, on-disk intermediates and one
//! entry point per CLI command.
//!
//! Inference order is keyframes in latent space, then interpolation, then
//! decoding to RGB.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::ConditionEmbedding;
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, ModelKind};
use crate::data::{
    corpus_params, effective_fps, encode_condition_text, read_json, read_raw_f32, write_json, write_raw_f32, ClipParams,
    Corpus, CorpusConfig, ShapeKind,
};
use crate::error::{ensure, Error, Result};
use crate::interp::{assemble_interpolated_video, interp_condition, interp_fps, interp_predict, InterpBatch, MID_FRAMES};
use crate::metrics::{eval_metrics, EvalMetrics};
use crate::params::ParamSet;
use crate::schedule::{sample_loop, NoiseSchedule, Sampler, ScheduleConfig};
use crate::tensor::Tensor;
use crate::train::{encode_corpus, finetune_vae_decoder, train_interp, train_keyframe, train_vae, TrainConfig, TrainOutcome};
use crate::unet::{denoise_predict, videofy_image_weights, UNetConfig};
use crate::vae::{decode_frames_video, VaeConfig};

/// Decoder fine-tuning with directed temporal attention after VAE training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderFinetuneConfig {
    pub train: TrainConfig,
    /// Frames per training clip.
    pub window: usize,
    /// Standard deviation of per-element latent jitter.
    pub jitter: f64,
}

impl Default for DecoderFinetuneConfig {
    fn default() -> Self {
        Self { train: TrainConfig { batch_size: 2, steps: 200, ..TrainConfig::default() }, window: 8, jitter: 0.1 }
    }
}

/// Sampling defaults; `--sampler` and `--steps` override them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub sampler: Sampler,
    pub ddim_steps: usize,
    pub num_samples: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { sampler: Sampler::Ddim, ddim_steps: 50, num_samples: 1 }
    }
}

/// The JSON document passed as `--config`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    /// Corpus directory read by the training and eval commands; relative
    /// paths are resolved against the config file's directory.
    pub corpus_dir: Option<PathBuf>,
    pub vae: VaeConfig,
    pub vae_train: TrainConfig,
    pub decoder_finetune: Option<DecoderFinetuneConfig>,
    pub unet: UNetConfig,
    pub schedule: ScheduleConfig,
    pub keyframe_train: TrainConfig,
    pub interp_train: TrainConfig,
    pub sample: SampleConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusConfig::default(),
            corpus_dir: None,
            vae: VaeConfig::default(),
            vae_train: TrainConfig { batch_size: 8, steps: 500, ..TrainConfig::default() },
            decoder_finetune: None,
            unet: UNetConfig::default(),
            schedule: ScheduleConfig::default(),
            keyframe_train: TrainConfig::default(),
            interp_train: TrainConfig::default(),
            sample: SampleConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses and validates a config file, resolving relative paths.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: RunConfig = read_json(path)?;
        if let Some(dir) = cfg.corpus_dir.as_mut() {
            if dir.is_relative() {
                *dir = path.parent().unwrap_or(Path::new(".")).join(&*dir);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.vae.validate()?;
        self.unet.validate()?;
        self.schedule.build()?;
        for t in [&self.vae_train, &self.keyframe_train, &self.interp_train] {
            t.validate()?;
        }
        if let Some(d) = &self.decoder_finetune {
            d.train.validate()?;
        }
        ensure!(self.sample.num_samples >= 1, InvalidArgument, "sample.num_samples must be at least 1");
        ensure!(self.sample.ddim_steps >= 1, InvalidArgument, "sample.ddim_steps must be at least 1");
        Ok(())
    }

    /// The corpus directory, which must exist.
    pub fn corpus_path(&self) -> Result<&Path> {
        let dir = self
            .corpus_dir
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument("config has no corpus_dir".into()))?;
        require_dir(dir)?;
        Ok(dir)
    }
}

fn require_dir(dir: &Path) -> Result<()> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(Error::io(dir, std::io::Error::new(std::io::ErrorKind::NotFound, "directory not found")))
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

// ---------------------------------------------------------------------
// clip sets on disk

/// Sidecar of a raw tensor file holding `N` clips of shape `[F, C, H, W]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipSetMeta {
    /// `[N, F, C, H, W]`.
    pub shape: Vec<usize>,
    /// Frame rate of the stored frames.
    pub nu: Option<f64>,
    /// Conditioned velocity of each clip, when known.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub velocities: Vec<[f32; 2]>,
}

/// A batch of clips plus their sidecar.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipSet {
    pub clips: Vec<Tensor<f32>>,
    pub nu: Option<f64>,
    pub velocities: Vec<[f32; 2]>,
}

impl ClipSet {
    /// Writes `{stem}.bin` and `{stem}.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        ensure!(!self.clips.is_empty(), InvalidArgument, "no clips to write");
        let shape = self.clips[0].shape().to_vec();
        ensure!(shape.len() == 4, Shape, "clips must be [F, C, H, W], got {shape:?}");
        let mut data = Vec::with_capacity(self.clips.len() * self.clips[0].len());
        for c in &self.clips {
            ensure!(c.shape() == shape.as_slice(), Shape, "clips differ in shape");
            data.extend_from_slice(c.data());
        }
        create_dir(dir)?;
        write_raw_f32(&dir.join(format!("{stem}.bin")), &data)?;
        let mut full = vec![self.clips.len()];
        full.extend(shape);
        write_json(&dir.join(format!("{stem}.json")), &ClipSetMeta { shape: full, nu: self.nu, velocities: self.velocities.clone() })
    }

    pub fn read(dir: &Path, stem: &str) -> Result<Self> {
        let meta: ClipSetMeta = read_json(&dir.join(format!("{stem}.json")))?;
        let path = dir.join(format!("{stem}.bin"));
        ensure!(meta.shape.len() == 5, Shape, "{}: shape must be [N, F, C, H, W]", path.display());
        let data = read_raw_f32(&path)?;
        let per: usize = meta.shape[1..].iter().product();
        ensure!(
            data.len() == meta.shape[0] * per,
            InvalidArgument,
            "{}: holds {} values, sidecar implies {}",
            path.display(),
            data.len(),
            meta.shape[0] * per
        );
        ensure!(
            meta.velocities.is_empty() || meta.velocities.len() == meta.shape[0],
            InvalidArgument,
            "{} velocities for {} clips",
            meta.velocities.len(),
            meta.shape[0]
        );
        let clips = data.chunks_exact(per.max(1)).map(|c| Tensor::from_vec(&meta.shape[1..], c.to_vec())).collect::<Result<_>>()?;
        Ok(Self { clips, nu: meta.nu, velocities: meta.velocities })
    }
}

pub const LATENTS_STEM: &str = "latents";
pub const VIDEO_STEM: &str = "video";

/// Binary PPM (P6) of a `[3, H, W]` frame in `[0, 1]`.
pub fn ppm_bytes(frame: &[f32], h: usize, w: usize) -> Vec<u8> {
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    for p in 0..plane {
        for c in 0..3 {
            out.push((frame[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

// ---------------------------------------------------------------------
// inference

/// Attributes used to build a text-proxy condition at sampling time.
#[derive(Clone, Debug, PartialEq)]
pub struct CondRequest {
    pub kind: ShapeKind,
    pub color: [f32; 3],
    pub velocity: [f32; 2],
    /// Source frame rate.
    pub fps: f64,
    /// Window length `L_s`; with `fps` it fixes `nu`.
    pub window_length: usize,
}

impl Default for CondRequest {
    fn default() -> Self {
        Self { kind: ShapeKind::Square, color: [1.0, 1.0, 1.0], velocity: [1.0, 0.0], fps: 24.0, window_length: 16 }
    }
}

impl CondRequest {
    pub fn nu(&self) -> f64 {
        effective_fps(self.fps, self.window_length)
    }

    pub fn embedding(&self, width: usize, tokens: usize) -> Result<ConditionEmbedding<f32>> {
        let p = ClipParams {
            kind: self.kind,
            color: self.color,
            velocity: self.velocity,
            start: [0.0, 0.0],
            fps: self.fps,
            length: self.window_length,
            seed: 0,
        };
        encode_condition_text(&p, width, tokens)
    }
}

/// Model configuration and schedule of a denoiser checkpoint of an expected kind.
fn model_config(ckpt: &Checkpoint, expect: &[ModelKind]) -> Result<(UNetConfig, NoiseSchedule)> {
    ensure!(
        expect.contains(&ckpt.meta.kind),
        InvalidArgument,
        "expected a {:?} checkpoint, got {:?}",
        expect,
        ckpt.meta.kind
    );
    let ucfg = ckpt.meta.unet.clone().ok_or_else(|| Error::InvalidArgument("checkpoint has no model configuration".into()))?;
    let sched = ckpt.meta.schedule.unwrap_or_default().build()?;
    Ok((ucfg, sched))
}

/// Samples one keyframe clip `[F, C, h, w]` (or `[1, C, h, w]` for an image model).
pub fn sample_keyframes(
    weights: &ParamSet<f32>,
    ucfg: &UNetConfig,
    sched: &NoiseSchedule,
    sampler: Sampler,
    ddim_steps: usize,
    cond: &ConditionEmbedding<f32>,
    nu: f64,
    latent_hw: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<f32>> {
    let frames = if ucfg.video { ucfg.frames } else { 1 };
    let nu = ucfg.video.then_some(nu);
    let shape = [frames, ucfg.in_channels, latent_hw, latent_hw];
    sample_loop(&shape, sched, sampler, ddim_steps, ucfg.prediction_target, rng, |z, t| {
        denoise_predict(z, t, cond, nu, weights, ucfg)
    })
}

/// Fills every keyframe gap with `MID_FRAMES` sampled frames.
pub fn interpolate_latents(
    weights: &ParamSet<f32>,
    ucfg: &UNetConfig,
    sched: &NoiseSchedule,
    sampler: Sampler,
    ddim_steps: usize,
    keyframes: &Tensor<f32>,
    key_nu: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<f32>> {
    ensure!(keyframes.rank() == 4 && keyframes.dim(0) >= 2, Shape, "need at least two [C, H, W] keyframes");
    let k = keyframes.dim(0);
    let s = keyframes.shape();
    let nu = interp_fps(key_nu, MID_FRAMES);
    let mut mids = Vec::with_capacity(k - 1);
    for i in 0..k - 1 {
        let prev = keyframes.narrow_outer(i, 1)?;
        let next = keyframes.narrow_outer(i + 1, 1)?;
        let cond = interp_condition(&prev, &next, ucfg.cond_width)?;
        let shape = [MID_FRAMES, s[1], s[2], s[3]];
        let m = sample_loop(&shape, sched, sampler, ddim_steps, ucfg.prediction_target, rng, |z, t| {
            let batch = InterpBatch { prev_latent: prev.clone(), next_latent: next.clone(), noisy_mid: z.clone(), cond: cond.clone() };
            interp_predict(&batch, t, nu, weights, ucfg)
        })?;
        mids.push(m);
    }
    assemble_interpolated_video(keyframes, &Tensor::stack_outer(&mids)?, MID_FRAMES)
}

/// Latents back to RGB with the video decoder.
pub fn decode_latents(weights: &ParamSet<f32>, cfg: &VaeConfig, latent_scale: f64, z: &Tensor<f32>) -> Result<Tensor<f32>> {
    decode_frames_video(&z.scale((1.0 / latent_scale) as f32), weights, cfg)
}

// ---------------------------------------------------------------------
// commands

fn checked_seed(cfg: &TrainConfig, seed: Option<u64>, steps: Option<usize>) -> TrainConfig {
    let mut c = cfg.clone();
    if let Some(s) = seed {
        c.seed = s;
    }
    if let Some(s) = steps {
        c.steps = s;
    }
    c
}

fn finish_training(out: &Path, outcome: &TrainOutcome) -> Result<()> {
    create_dir(out)?;
    save_checkpoint(&outcome.checkpoint, out)?;
    outcome.trace.write(&out.join("loss_trace.txt"))
}

/// `gen-data`: renders the configured corpus into `out`.
pub fn run_gen_data(cfg: &RunConfig, out: &Path, seed: Option<u64>) -> Result<Corpus> {
    let mut c = cfg.corpus.clone();
    if let Some(s) = seed {
        c.seed = s;
    }
    let corpus = Corpus::generate(corpus_params(&c)?, c.render)?;
    corpus.write(out)?;
    Ok(corpus)
}

/// `train-vae`: trains the autoencoder, then optionally fine-tunes the
/// decoder's temporal layers.
pub fn run_train_vae(cfg: &RunConfig, out: &Path, seed: Option<u64>, steps: Option<usize>) -> Result<TrainOutcome> {
    let corpus = Corpus::read(cfg.corpus_path()?)?;
    let tc = checked_seed(&cfg.vae_train, seed, steps);
    let mut outcome = train_vae(&corpus, &cfg.vae, &tc)?;
    if let Some(ft) = &cfg.decoder_finetune {
        let ftc = checked_seed(&ft.train, seed, None);
        let second = finetune_vae_decoder(&corpus, &outcome.checkpoint, &ftc, true, ft.window, ft.jitter)?;
        let offset = tc.steps;
        outcome.trace.entries.extend(second.trace.entries.iter().map(|&(s, v)| (s + offset, v)));
        outcome.checkpoint = second.checkpoint;
        outcome.final_probe = second.final_probe;
    }
    finish_training(out, &outcome)?;
    Ok(outcome)
}

/// `train-keyframe`: trains on VAE latents. With `init` it continues from
/// an existing checkpoint; an image checkpoint is videofied first.
pub fn run_train_keyframe(
    cfg: &RunConfig,
    vae: &Path,
    init: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    steps: Option<usize>,
) -> Result<TrainOutcome> {
    let corpus_dir = cfg.corpus_path()?;
    let vae = load_checkpoint(vae)?;
    ensure!(vae.meta.kind == ModelKind::Vae, InvalidArgument, "--vae must point at a VAE checkpoint");
    let init = init.map(load_checkpoint).transpose()?;
    let corpus = Corpus::read(corpus_dir)?;
    let latents = encode_corpus(&corpus, &vae)?;
    let tc = checked_seed(&cfg.keyframe_train, seed, steps);
    let init_weights = match init {
        None => None,
        Some(ck) if ck.meta.kind == ModelKind::Image && cfg.unet.video => {
            let image_cfg = ck.meta.unet.clone().ok_or_else(|| Error::InvalidArgument("image checkpoint has no model configuration".into()))?;
            ensure!(image_cfg == cfg.unet.image(), InvalidArgument, "image checkpoint does not match the configured model");
            let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
            Some(videofy_image_weights(&ck.inference_weights(), &cfg.unet, &mut rng)?)
        }
        Some(ck) => {
            ensure!(ck.meta.unet.as_ref() == Some(&cfg.unet), InvalidArgument, "--init checkpoint does not match the configured model");
            Some(ck.inference_weights())
        }
    };
    let mut outcome = train_keyframe(&corpus, &latents, &cfg.unet, &cfg.schedule, &tc, init_weights)?;
    outcome.checkpoint.meta.latent_scale = vae.meta.latent_scale;
    finish_training(out, &outcome)?;
    Ok(outcome)
}

/// `train-interp`: trains the interpolation model from a keyframe checkpoint.
pub fn run_train_interp(
    cfg: &RunConfig,
    vae: &Path,
    keyframe: &Path,
    out: &Path,
    seed: Option<u64>,
    steps: Option<usize>,
) -> Result<TrainOutcome> {
    let corpus_dir = cfg.corpus_path()?;
    let vae = load_checkpoint(vae)?;
    let key = load_checkpoint(keyframe)?;
    model_config(&key, &[ModelKind::Keyframe])?;
    let corpus = Corpus::read(corpus_dir)?;
    let latents = encode_corpus(&corpus, &vae)?;
    let outcome = train_interp(&corpus, &latents, &key, &checked_seed(&cfg.interp_train, seed, steps))?;
    finish_training(out, &outcome)?;
    Ok(outcome)
}

/// Options shared by the sampling commands.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleOptions {
    pub seed: u64,
    pub sampler: Sampler,
    pub ddim_steps: usize,
    pub num_samples: usize,
}

impl SampleOptions {
    pub fn from_config(cfg: &RunConfig, seed: u64) -> Self {
        Self { seed, sampler: cfg.sample.sampler, ddim_steps: cfg.sample.ddim_steps, num_samples: cfg.sample.num_samples }
    }
}

/// `sample`: keyframe latents for `num_samples` clips under one condition.
///
/// The latent spatial size follows from the corpus resolution and the
/// VAE downsampling factor recorded in the config.
pub fn run_sample(cfg: &RunConfig, ckpt: &Path, cond: &CondRequest, opts: &SampleOptions, out: &Path) -> Result<ClipSet> {
    let key = load_checkpoint(ckpt)?;
    let (ucfg, sched) = model_config(&key, &[ModelKind::Keyframe, ModelKind::Image])?;
    let res = cfg.corpus.render.resolution;
    ensure!(res.is_multiple_of(cfg.vae.downsample), InvalidArgument, "resolution {res} not divisible by {}", cfg.vae.downsample);
    let hw = res / cfg.vae.downsample;
    let embedding = cond.embedding(ucfg.cond_width, cfg.keyframe_train.cond_tokens)?;
    let weights = key.inference_weights();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let clips = (0..opts.num_samples)
        .map(|_| sample_keyframes(&weights, &ucfg, &sched, opts.sampler, opts.ddim_steps, &embedding, cond.nu(), hw, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    for c in &clips {
        if !c.all_finite() {
            return Err(Error::Divergence("sampled latents contain non-finite values".into()));
        }
    }
    let set = ClipSet { clips, nu: Some(cond.nu()), velocities: vec![cond.velocity; opts.num_samples] };
    set.write(out, LATENTS_STEM)?;
    Ok(set)
}

/// `interpolate`: `K` keyframes per clip become `K + (K - 1) * 3` frames.
pub fn run_interpolate(ckpt: &Path, input: &Path, opts: &SampleOptions, out: &Path) -> Result<ClipSet> {
    let model = load_checkpoint(ckpt)?;
    let (ucfg, sched) = model_config(&model, &[ModelKind::Interp])?;
    let keys = ClipSet::read(input, LATENTS_STEM)?;
    let key_nu = keys.nu.ok_or_else(|| Error::InvalidArgument("keyframe latents carry no frame rate".into()))?;
    let weights = model.inference_weights();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let clips = keys
        .clips
        .iter()
        .map(|k| interpolate_latents(&weights, &ucfg, &sched, opts.sampler, opts.ddim_steps, k, key_nu, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    for c in &clips {
        if !c.all_finite() {
            return Err(Error::Divergence("interpolated latents contain non-finite values".into()));
        }
    }
    let set = ClipSet { clips, nu: Some(interp_fps(key_nu, MID_FRAMES)), velocities: keys.velocities };
    set.write(out, LATENTS_STEM)?;
    Ok(set)
}

/// `decode`: latents to `video.bin` plus numbered PPM frames
/// (`clip_NNN/frame_NNNN.ppm`).
pub fn run_decode(ckpt: &Path, input: &Path, out: &Path) -> Result<ClipSet> {
    let vae = load_checkpoint(ckpt)?;
    ensure!(vae.meta.kind == ModelKind::Vae, InvalidArgument, "decode needs a VAE checkpoint");
    let cfg = vae.meta.vae.clone().ok_or_else(|| Error::InvalidArgument("checkpoint has no VAE configuration".into()))?;
    let latents = ClipSet::read(input, LATENTS_STEM)?;
    let weights = vae.inference_weights();
    let scale = vae.meta.latent_scale.unwrap_or(1.0);
    let clips = latents.clips.iter().map(|z| decode_latents(&weights, &cfg, scale, z)).collect::<Result<Vec<_>>>()?;
    create_dir(out)?;
    for (i, clip) in clips.iter().enumerate() {
        if !clip.all_finite() {
            return Err(Error::Divergence("decoded frames contain non-finite values".into()));
        }
        let dir = out.join(format!("clip_{i:03}"));
        create_dir(&dir)?;
        let (h, w) = (clip.dim(2), clip.dim(3));
        let per = 3 * h * w;
        for f in 0..clip.dim(0) {
            let path = dir.join(format!("frame_{f:04}.ppm"));
            fs::write(&path, ppm_bytes(&clip.data()[f * per..(f + 1) * per], h, w)).map_err(|e| Error::io(&path, e))?;
        }
    }
    let set = ClipSet { clips, nu: latents.nu, velocities: latents.velocities };
    set.write(out, VIDEO_STEM)?;
    Ok(set)
}

/// Reference clips for evaluation: the first `frames` frames of every
/// corpus clip long enough to provide them.
pub fn reference_clips(corpus: &Corpus, frames: usize) -> Result<Vec<Tensor<f32>>> {
    let refs: Vec<Tensor<f32>> =
        corpus.clips.iter().filter(|c| c.dim(0) >= frames).map(|c| c.narrow_outer(0, frames)).collect::<Result<_>>()?;
    ensure!(!refs.is_empty(), InvalidArgument, "no corpus clip has {frames} frames");
    Ok(refs)
}

/// `eval`: scores decoded clips against the corpus; writes `metrics.json`.
///
/// Generated clips longer than every corpus clip (interpolated videos) are
/// scored on their leading frames only.
pub fn run_eval(cfg: &RunConfig, input: &Path, out: &Path) -> Result<EvalMetrics> {
    let corpus_dir = cfg.corpus_path()?;
    let video = ClipSet::read(input, VIDEO_STEM)?;
    let corpus = Corpus::read(corpus_dir)?;
    let longest = corpus.clips.iter().map(|c| c.dim(0)).max().unwrap_or(0);
    let frames = video.clips[0].dim(0).min(longest);
    let refs = reference_clips(&corpus, frames)?;
    let clips: Vec<Tensor<f32>> = video.clips.iter().map(|c| c.narrow_outer(0, frames)).collect::<Result<_>>()?;
    let dirs: Vec<f32> = video.velocities.iter().map(|v| v[0]).collect();
    let metrics = eval_metrics(&clips, &refs, (!dirs.is_empty()).then_some(dirs.as_slice()))?;
    create_dir(out)?;
    write_json(&out.join("metrics.json"), &metrics)?;
    Ok(metrics)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_header_and_pixels() {
        let frame = [1.0f32, 0.0, 0.0, 0.5, 0.0, 2.0];
        let b = ppm_bytes(&frame, 1, 2);
        assert!(b.starts_with(b"P6\n2 1\n255\n"));
        assert_eq!(&b[b.len() - 6..], &[255, 0, 0, 0, 128, 255]);
    }

    #[test]
    fn clip_set_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let set = ClipSet {
            clips: vec![Tensor::from_vec(&[2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(); 2],
            nu: Some(24.0),
            velocities: vec![[1.0, 0.0], [-1.0, 0.0]],
        };
        set.write(dir.path(), "x").unwrap();
        assert_eq!(ClipSet::read(dir.path(), "x").unwrap(), set);
        fs::write(dir.path().join("x.bin"), [0u8; 12]).unwrap();
        assert!(ClipSet::read(dir.path(), "x").is_err());
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"unet": {"base_width": 8, "colour": 1}}"#).unwrap();
        assert!(RunConfig::load(&p).is_err());
        fs::write(&p, r#"{"corpus_dir": "data"}"#).unwrap();
        let cfg = RunConfig::load(&p).unwrap();
        assert_eq!(cfg.corpus_dir.as_deref(), Some(dir.path().join("data").as_path()));
        assert!(cfg.corpus_path().is_err());
    }

    #[test]
    fn cond_request_nu() {
        let c = CondRequest { fps: 30.0, window_length: 48, ..CondRequest::default() };
        assert_eq!(c.nu(), 10.0);
    }
}
