//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines are always printed.
//! Arguments that do not start with `-` select criteria by id
//! (`cargo test --test acceptance -- A4 A9`).

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use magicvid_core::blocks::{
    adaptor, directed_temporal_attention, directed_temporal_attention_graph, embedding_mlp_graph,
    spatial_attention_graph, st_attn_block_graph, AdaptorParams, AttentionParams, ConditionEmbedding, ConditionSource,
    EmbeddingMlp, SpatialAttentionParams, StAttnParams,
};
use magicvid_core::checkpoint::{load_checkpoint, save_checkpoint, MANIFEST_FILE, WEIGHTS_FILE};
use magicvid_core::data::{corpus_params, Corpus, CorpusConfig, ShapeKind};
use magicvid_core::gradcheck::{check_input_gradient, check_param_gradients, GradCheckReport};
use magicvid_core::interp::{init_interp_from_keyframe, interp_graph};
use magicvid_core::metrics::{eval_metrics, flicker, horizontal_motion};
use magicvid_core::pipeline::{decode_latents, interpolate_latents, reference_clips, sample_keyframes, CondRequest};
use magicvid_core::schedule::sample_loop;
use magicvid_core::train::{encode_corpus, finetune_vae_decoder, train_keyframe, train_vae, TrainConfig};
use magicvid_core::unet::{denoise_predict, denoiser_graph, init_denoiser, videofy_image_weights, UNetConfig};
use magicvid_core::vae::{
    decode_frames_independent, decode_frames_video, decoder_graph, encode_frames, init_vae, vae_loss_graph, VaeConfig,
};
use magicvid_core::{Binding, Error, Graph, NoiseSchedule, ParamSet, PredictionTarget, Sampler, ScheduleConfig, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit: Duration, what: &str) -> Outcome {
    check(elapsed <= limit, format!("{what} took {elapsed:.1?} (limit {limit:?})"))
}

fn corpus(cfg: &CorpusConfig) -> Corpus {
    Corpus::generate(corpus_params(cfg).unwrap(), cfg.render).unwrap()
}

fn trace_text(entries: &[(usize, f64)]) -> String {
    entries.iter().map(|(s, l)| format!("{s}:{l:.4}")).collect::<Vec<_>>().join(" ")
}

// ---------------------------------------------------------------------

fn a1_causality() -> Outcome {
    let start = Instant::now();
    let mut r = rng(101);
    let mut worst = 0.0f32;
    for instance in 0..100u64 {
        let frames = 2 + (instance as usize % 7);
        let heads = 1 + (instance as usize % 2);
        let channels = heads * (2 + 2 * (instance as usize % 3));
        let p = AttentionParams::<f32>::init(channels, channels, heads, false, &mut r).unwrap();
        let z = Tensor::<f32>::randn(&[frames, channels, 3, 2], 1.0, &mut r);
        let j = 1 + instance as usize % (frames - 1);
        let mut moved = z.clone();
        let per = channels * 6;
        let noise = Tensor::<f32>::randn(&[(frames - j) * per], 2.0, &mut r);
        for (v, n) in moved.data_mut()[j * per..].iter_mut().zip(noise.data()) {
            *v += n;
        }
        let a = directed_temporal_attention(&z, &p).unwrap();
        let b = directed_temporal_attention(&moved, &p).unwrap();
        let past = a.narrow_outer(0, j).unwrap().max_abs_diff(&b.narrow_outer(0, j).unwrap());
        worst = worst.max(past);
    }
    let elapsed = start.elapsed();
    check(worst <= 1e-6, format!("max change of earlier frames {worst:e} over 100 instances (<= 1e-6)"))?;
    within(elapsed, Duration::from_secs(10), "100 instances").map(|t| format!("max change {worst:e}; {t}"))
}

fn a2_videofication() -> Outcome {
    let start = Instant::now();
    let ccfg = CorpusConfig { clips: 4, seed: 5, length: 16, ..CorpusConfig::default() };
    let data = corpus(&ccfg);
    let vae = train_vae(&data, &VaeConfig::default(), &TrainConfig { steps: 1, batch_size: 1, ..TrainConfig::default() })
        .map_err(|e| e.to_string())?;
    let latents = encode_corpus(&data, &vae.checkpoint).map_err(|e| e.to_string())?;
    let video_cfg = UNetConfig { base_width: 8, heads: 2, cond_width: 8, frames: 4, ..UNetConfig::default() };
    let image_cfg = video_cfg.image();
    let schedule = ScheduleConfig::default();
    let tc = TrainConfig { steps: 20, batch_size: 2, learning_rate: 0.05, cond_tokens: 2, ..TrainConfig::default() };
    let image = train_keyframe(&data, &latents, &image_cfg, &schedule, &tc, None).map_err(|e| e.to_string())?;
    let image_w = image.checkpoint.weights();
    let video_w = videofy_image_weights(&image_w, &video_cfg, &mut rng(7)).map_err(|e| e.to_string())?;

    let frame = latents[0].narrow_outer(3, 1).unwrap();
    let stacked = Tensor::stack_outer(&[frame.clone(), frame.clone(), frame.clone(), frame.clone()]).unwrap();
    let cond = ConditionEmbedding::new(Tensor::randn(&[2, 8], 1.0, &mut rng(8)), ConditionSource::TextProxy).unwrap();
    let mut worst = 0.0f32;
    for t in [1, 17, 50] {
        let one = denoise_predict(&frame, t, &cond, None, &image_w, &image_cfg).unwrap();
        let many = denoise_predict(&stacked, t, &cond, Some(24.0), &video_w, &video_cfg).unwrap();
        for i in 0..4 {
            worst = worst.max(many.narrow_outer(i, 1).unwrap().max_abs_diff(&one));
        }
    }
    let moved = image.final_probe < image.initial_probe;
    check(moved, format!("image model did not train: probe {} -> {}", image.initial_probe, image.final_probe))?;
    check(worst <= 1e-6, format!("max per-frame difference {worst:e} (<= 1e-6)"))?;
    within(start.elapsed(), Duration::from_secs(60), "training and comparison")
        .map(|t| format!("max per-frame difference {worst:e} on F=4 copies; {t}"))
}

fn randomize(ps: &mut ParamSet<f64>, seed: u64, std: f64) {
    let mut r = rng(seed);
    for (_, t) in ps.iter_mut() {
        *t = t.zip_map(&Tensor::randn(t.shape(), std, &mut r), |a, b| a + b).unwrap();
    }
}

fn a3_gradients() -> Outcome {
    const STEP: f64 = 1e-4;
    let start = Instant::now();
    let mut rows: Vec<(String, f64, usize)> = Vec::new();
    let mut params = |name: &str, ps: &ParamSet<f64>, per: usize, f: &dyn Fn(&Binding<f64>) -> magicvid_core::Result<Var>| {
        let GradCheckReport { max_relative_error, checked, .. } = check_param_gradients(ps, f, STEP, per, 17).unwrap();
        rows.push((name.to_string(), max_relative_error, checked));
    };
    let mut inputs: Vec<(String, f64)> = Vec::new();
    let mut input = |name: &str, x: &Tensor<f64>, f: &dyn Fn(&Graph<f64>, Var) -> Var| {
        inputs.push((name.to_string(), check_input_gradient(x, f, STEP, 23).unwrap()));
    };
    let mut r = rng(1);

    let a = AdaptorParams::new(Tensor::randn(&[3, 4], 1.0, &mut r), Tensor::randn(&[3, 4], 1.0, &mut r)).unwrap();
    let mut ps = ParamSet::new();
    a.insert_into(&mut ps, "a");
    let x = Tensor::<f64>::randn(&[3, 4, 2, 2], 1.0, &mut r);
    params("adaptor", &ps, usize::MAX, &|b| adaptor(b, "a", b.graph().constant(x.clone())));
    input("adaptor", &x, &|g, v| adaptor(&Binding::new(g, &ps, false), "a", v).unwrap());

    let mut ps = ParamSet::new();
    AttentionParams::<f64>::init(4, 4, 2, false, &mut r).unwrap().insert_into(&mut ps, "t");
    randomize(&mut ps, 3, 0.4);
    let x = Tensor::<f64>::randn(&[4, 4, 2, 2], 1.0, &mut r);
    params("temporal attention", &ps, usize::MAX, &|b| directed_temporal_attention_graph(b, "t", b.graph().constant(x.clone()), 2));
    input("temporal attention", &x, &|g, v| directed_temporal_attention_graph(&Binding::new(g, &ps, false), "t", v, 2).unwrap());

    let mut ps = ParamSet::new();
    SpatialAttentionParams::<f64>::init(4, 3, 2, &mut r).unwrap().insert_into(&mut ps, "s");
    randomize(&mut ps, 5, 0.4);
    let x = Tensor::<f64>::randn(&[2, 4, 2, 3], 1.0, &mut r);
    let cond = Tensor::<f64>::randn(&[3, 3], 1.0, &mut r);
    params("spatial attention", &ps, usize::MAX, &|b| {
        let g = b.graph();
        spatial_attention_graph(b, "s", g.constant(x.clone()), g.constant(cond.clone()), 2)
    });
    input("spatial attention (condition)", &cond, &|g, c| {
        spatial_attention_graph(&Binding::new(g, &ps, false), "s", g.constant(x.clone()), c, 2).unwrap()
    });

    let st = StAttnParams {
        spatial: SpatialAttentionParams::<f64>::init(4, 2, 1, &mut r).unwrap(),
        temporal: Some(AttentionParams::init(4, 4, 1, true, &mut r).unwrap()),
    };
    let mut ps = ParamSet::new();
    st.insert_into(&mut ps, "st");
    randomize(&mut ps, 7, 0.4);
    let x = Tensor::<f64>::randn(&[3, 4, 2, 2], 1.0, &mut r);
    let cond = Tensor::<f64>::randn(&[2, 2], 1.0, &mut r);
    params("spatial-temporal block", &ps, usize::MAX, &|b| {
        let g = b.graph();
        st_attn_block_graph(b, "st", g.constant(x.clone()), g.constant(cond.clone()), 1)
    });

    let mut ps = ParamSet::new();
    EmbeddingMlp::<f64>::init(8, 6, 5, false, &mut r).insert_into(&mut ps, "e");
    params("fps embedding", &ps, usize::MAX, &|b| embedding_mlp_graph(b, "e", 30.0));

    let vcfg = VaeConfig { base_width: 1, latent_channels: 2, heads: 1, beta_kl: 0.5, ..VaeConfig::default() };
    let mut vp = init_vae::<f64, _>(&vcfg, &mut rng(35)).unwrap();
    randomize(&mut vp, 36, 0.4);
    let frames = Tensor::<f64>::randn(&[2, 3, 4, 4], 0.5, &mut r);
    let noise = Tensor::<f64>::randn(&[2, 2, 1, 1], 1.0, &mut r);
    let z = Tensor::<f64>::randn(&[3, 2, 1, 1], 1.0, &mut r);
    params("vae loss", &vp, usize::MAX, &|b| vae_loss_graph(b, &vcfg, b.graph().constant(frames.clone()), &noise));
    params("video decoder", &vp, usize::MAX, &|b| decoder_graph(b, &vcfg, b.graph().constant(z.clone()), true));

    // Whole denoisers exceed 1e3 parameters at any width whose layer
    // norms are smooth, so they are checked on sampled entries. Inputs are
    // fixed: at a 1e-4 step some random inputs put a kink-like curvature
    // close enough to dominate the central difference.
    let ucfg = UNetConfig {
        in_channels: 2,
        base_width: 4,
        channel_multipliers: vec![1, 2],
        attn_levels: vec![2],
        heads: 2,
        cond_width: 3,
        frames: 3,
        max_timestep: 10,
        ..UNetConfig::default()
    };
    let mut up = init_denoiser::<f64, _>(&ucfg, &mut rng(9)).unwrap();
    randomize(&mut up, 10, 0.4);
    let mut r = rng(11);
    let x = Tensor::<f64>::randn(&[3, 2, 4, 4], 1.0, &mut r);
    let cond = Tensor::<f64>::randn(&[2, 3], 1.0, &mut r);
    params("keyframe unet (sampled)", &up, 4, &|b| {
        let g = b.graph();
        denoiser_graph(b, &ucfg, g.constant(x.clone()), 7, g.constant(cond.clone()), Some(6.0))
    });
    let (mut ip, icfg) = init_interp_from_keyframe(&init_denoiser::<f64, _>(&ucfg, &mut rng(12)).unwrap(), &ucfg).unwrap();
    randomize(&mut ip, 14, 0.4);
    let mut r = rng(15);
    let noisy = Tensor::<f64>::randn(&[3, 2, 4, 4], 1.0, &mut r);
    let (prev, next) = (Tensor::<f64>::randn(&[1, 2, 4, 4], 1.0, &mut r), Tensor::<f64>::randn(&[1, 2, 4, 4], 1.0, &mut r));
    let cond = Tensor::<f64>::randn(&[2, 3], 1.0, &mut r);
    params("interpolation unet (sampled)", &ip, 3, &|b| {
        let g = b.graph();
        interp_graph(b, &icfg, g.constant(noisy.clone()), &prev, &next, 4, g.constant(cond.clone()), 24.0)
    });

    let worst = rows.iter().map(|r| r.1).chain(inputs.iter().map(|r| r.1)).fold(0.0, f64::max);
    let checked: usize = rows.iter().map(|r| r.2).sum();
    let failing: Vec<String> = rows
        .iter()
        .map(|(n, e, _)| (n, *e))
        .chain(inputs.iter().map(|(n, e)| (n, *e)))
        .filter(|(_, e)| *e > 1e-3)
        .map(|(n, e)| format!("{n} {e:e}"))
        .collect();
    check(failing.is_empty(), format!("relative error above 1e-3: {}", failing.join(", ")))?;
    within(start.elapsed(), Duration::from_secs(300), "checks")
        .map(|t| format!("{} blocks, {checked} parameter entries, worst relative error {worst:e}; {t}", rows.len()))
}

fn a4_schedule() -> Outcome {
    let s = NoiseSchedule::linear(1000, 1e-4, 0.02).map_err(|e| e.to_string())?;
    let monotone = s.alpha_bars().windows(2).all(|w| w[1] < w[0]);
    check(monotone, "alpha_bar is not strictly decreasing".into())?;

    // Double-double running product: error-free transforms via fused multiply-add.
    let (mut hi, mut lo) = (1.0f64, 0.0f64);
    let mut worst = 0.0f64;
    for t in 1..=1000 {
        let beta = 1e-4 + (0.02 - 1e-4) * (t - 1) as f64 / 999.0;
        let a_hi = 1.0 - beta;
        let a_lo = (1.0 - a_hi) - beta;
        let p = hi * a_hi;
        let p_err = hi.mul_add(a_hi, -p);
        let cross = hi * a_lo + lo * a_hi + p_err;
        hi = p + cross;
        lo = cross - (hi - p);
        let exact = hi + lo;
        worst = worst.max((s.alpha_bar(t) - exact).abs() / exact);
    }
    check(worst <= 1e-10, format!("alpha_bar relative error {worst:e} against extended-precision product"))?;

    let mut chain_worst = 0.0f64;
    for (i, z0) in [-1.7, 0.0, 0.3, 2.5].into_iter().enumerate() {
        for ddim_steps in [50, 1000] {
            let out = sample_loop(&[1], &s, Sampler::Ddim, ddim_steps, PredictionTarget::Epsilon, &mut rng(i as u64), |zt: &Tensor<f64>, t| {
                let ab = s.alpha_bar(t);
                Ok(zt.map(|z| (z - ab.sqrt() * z0) / (1.0 - ab).sqrt()))
            })
            .map_err(|e| e.to_string())?;
            chain_worst = chain_worst.max((out.data()[0] - z0).abs());
        }
    }
    check(chain_worst <= 1e-4, format!("oracle DDIM chain error {chain_worst:e} (<= 1e-4)"))?;
    Ok(format!(
        "alpha_bar[1000] = {:.12e}, rel. error {worst:e}; oracle DDIM chains recover z0 to {chain_worst:e}",
        s.alpha_bar(1000)
    ))
}

fn a5_overfit() -> Outcome {
    let start = Instant::now();
    let ccfg = CorpusConfig { clips: 4, seed: 3, length: 16, ..CorpusConfig::default() };
    let data = corpus(&ccfg);
    let vae = train_vae(&data, &VaeConfig::default(), &TrainConfig { steps: 1, batch_size: 1, ..TrainConfig::default() })
        .map_err(|e| e.to_string())?;
    let latents = encode_corpus(&data, &vae.checkpoint).map_err(|e| e.to_string())?;
    let shape = latents[0].shape().to_vec();
    check(shape == [16, 4, 8, 8], format!("latent clips are {shape:?}, expected [16, 4, 8, 8]"))?;
    let ucfg = UNetConfig { base_width: 16, heads: 2, prediction_target: PredictionTarget::X0, ..UNetConfig::default() };
    let schedule = ScheduleConfig { steps: 50, beta_start: 1e-4, beta_end: 0.02 };
    let cfg = TrainConfig {
        steps: 2000,
        batch_size: 4,
        learning_rate: 0.1,
        fixed_batch: true,
        window_lengths: vec![16],
        log_every: 250,
        grad_clip: Some(1.0),
        ..TrainConfig::default()
    };
    let out = train_keyframe(&data, &latents, &ucfg, &schedule, &cfg, None).map_err(|e| e.to_string())?;
    let ratio = out.final_probe / out.initial_probe;
    let detail = format!(
        "loss {:.5} -> {:.5} ({:.2}% of initial) after 2000 steps; trace {}",
        out.initial_probe,
        out.final_probe,
        100.0 * ratio,
        trace_text(&out.trace.entries)
    );
    check(ratio <= 0.01, detail.clone())?;
    within(start.elapsed(), Duration::from_secs(600), "training").map(|t| format!("{detail}; {t}"))
}

/// Two-class (left / right) corpus: one white square moving at one pixel
/// per frame, never touching a border.
fn a6_corpus() -> CorpusConfig {
    CorpusConfig {
        clips: 512,
        seed: 11,
        length: 16,
        horizontal_only: true,
        speed_min: 1.0,
        speed_max: 1.0,
        kinds: vec![ShapeKind::Square],
        palette: vec![[1.0, 1.0, 1.0]],
        fps_choices: vec![24.0],
        ..CorpusConfig::default()
    }
}

fn a6_generation() -> Outcome {
    let start = Instant::now();
    let ccfg = a6_corpus();
    let data = corpus(&ccfg);
    let vcfg = VaeConfig::default();
    let vtc = TrainConfig { steps: 600, batch_size: 8, learning_rate: 0.3, grad_clip: Some(10.0), log_every: 100, ..TrainConfig::default() };
    let vae = train_vae(&data, &vcfg, &vtc).map_err(|e| e.to_string())?;
    let latents = encode_corpus(&data, &vae.checkpoint).map_err(|e| e.to_string())?;
    let ucfg = UNetConfig { base_width: 16, heads: 2, prediction_target: PredictionTarget::X0, ..UNetConfig::default() };
    let schedule = ScheduleConfig::default();
    let tc = TrainConfig {
        steps: 3000,
        batch_size: 4,
        learning_rate: 0.1,
        window_lengths: vec![16],
        ema_decay: Some(0.995),
        log_every: 250,
        ..TrainConfig::default()
    };
    let out = train_keyframe(&data, &latents, &ucfg, &schedule, &tc, None).map_err(|e| e.to_string())?;
    let weights = out.checkpoint.inference_weights();
    let sched = schedule.build().map_err(|e| e.to_string())?;
    let vae_w = vae.checkpoint.inference_weights();
    let scale = vae.checkpoint.meta.latent_scale.unwrap_or(1.0);
    let mut r = rng(5);
    let (mut clips, mut dirs) = (Vec::new(), Vec::new());
    for i in 0..20 {
        let dx = if i % 2 == 0 { 1.0 } else { -1.0 };
        let req = CondRequest { velocity: [dx, 0.0], color: [1.0, 1.0, 1.0], kind: ShapeKind::Square, ..CondRequest::default() };
        let cond = req.embedding(ucfg.cond_width, tc.cond_tokens).map_err(|e| e.to_string())?;
        let z = sample_keyframes(&weights, &ucfg, &sched, Sampler::Ddim, 50, &cond, req.nu(), 8, &mut r).map_err(|e| e.to_string())?;
        clips.push(decode_latents(&vae_w, &vcfg, scale, &z).map_err(|e| e.to_string())?);
        dirs.push(dx);
    }
    let refs = reference_clips(&data, 16).map_err(|e| e.to_string())?;
    let m = eval_metrics(&clips, &refs, Some(&dirs)).map_err(|e| e.to_string())?;
    let agreement = m.condition_agreement.unwrap_or(0.0);
    let slopes: Vec<String> = clips.iter().map(|c| horizontal_motion(c).map_or("-".into(), |s| format!("{s:+.2}"))).collect();
    check(
        agreement >= 0.7,
        format!(
            "condition_agreement {agreement:.2} (>= 0.7) over 20 DDIM-50 samples; probe loss {:.4} -> {:.4}; slopes {}; trace {}; {:.0?}",
            out.initial_probe,
            out.final_probe,
            slopes.join(" "),
            trace_text(&out.trace.entries),
            start.elapsed()
        ),
    )
}

fn a7_interpolation() -> Outcome {
    let key_cfg = UNetConfig { base_width: 8, heads: 2, cond_width: 8, ..UNetConfig::default() };
    let key_w = init_denoiser::<f32, _>(&key_cfg, &mut rng(70)).unwrap();
    let (interp_w, interp_cfg) = init_interp_from_keyframe(&key_w, &key_cfg).map_err(|e| e.to_string())?;
    let sched = ScheduleConfig::default().build().unwrap();
    let keys = Tensor::<f32>::randn(&[16, 4, 8, 8], 1.0, &mut rng(71));
    let video = interpolate_latents(&interp_w, &interp_cfg, &sched, Sampler::Ddim, 5, &keys, 6.0, &mut rng(72))
        .map_err(|e| e.to_string())?;
    check(video.dim(0) == 61, format!("16 keyframes gave {} frames", video.dim(0)))?;
    let bitwise = (0..16).all(|i| {
        let (a, b) = (video.index_outer(4 * i).unwrap(), keys.index_outer(i).unwrap());
        a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
    });
    check(bitwise, "a keyframe changed in the interpolated video".into())?;
    Ok("16 keyframes -> 61 frames; keyframes bitwise identical at positions 4i".into())
}

fn a8_video_vae() -> Outcome {
    let start = Instant::now();
    let vcfg = VaeConfig::default();
    let fresh = init_vae::<f32, _>(&vcfg, &mut rng(80)).unwrap();
    let z = Tensor::<f32>::randn(&[6, 4, 8, 8], 1.0, &mut rng(81));
    let eq = decode_frames_video(&z, &fresh, &vcfg)
        .unwrap()
        .max_abs_diff(&decode_frames_independent(&z, &fresh, &vcfg).unwrap());
    check(eq <= 1e-7, format!("zero-projection video decoder differs by {eq:e}"))?;

    let ccfg = CorpusConfig { clips: 64, seed: 21, length: 16, ..CorpusConfig::default() };
    let data = corpus(&ccfg);
    let vtc = TrainConfig { steps: 400, batch_size: 8, learning_rate: 0.3, grad_clip: Some(10.0), ..TrainConfig::default() };
    let vae = train_vae(&data, &vcfg, &vtc).map_err(|e| e.to_string())?;
    let jitter = 0.1;
    let ft = TrainConfig { steps: 150, batch_size: 2, learning_rate: 0.1, grad_clip: Some(10.0), ..TrainConfig::default() };
    let video = finetune_vae_decoder(&data, &vae.checkpoint, &ft, true, 8, jitter).map_err(|e| e.to_string())?;
    let indep = finetune_vae_decoder(&data, &vae.checkpoint, &ft, false, 8, jitter).map_err(|e| e.to_string())?;

    let scfg = CorpusConfig { clips: 8, seed: 99, length: 16, speed_min: 0.0, speed_max: 0.0, ..CorpusConfig::default() };
    let statics = corpus(&scfg);
    let enc = vae.checkpoint.weights();
    let (wv, wi) = (video.checkpoint.weights(), indep.checkpoint.weights());
    let mut r = rng(3);
    let (mut fv, mut fi) = (0.0, 0.0);
    for clip in &statics.clips {
        let z = encode_frames(clip, &enc, &vcfg).unwrap();
        let z = z.zip_map(&Tensor::randn(z.shape(), jitter, &mut r), |a, b| a + b).unwrap();
        fv += flicker(&decode_frames_video(&z, &wv, &vcfg).unwrap());
        fi += flicker(&decode_frames_independent(&z, &wi, &vcfg).unwrap());
    }
    let n = statics.len() as f64;
    let (fv, fi) = (fv / n, fi / n);
    check(
        fv <= fi,
        format!("static-scene flicker: video decoder {fv:.6}, frame-independent {fi:.6}; zero-projection difference {eq:e}; {:.0?}", start.elapsed()),
    )
}

fn first_tensor(v: &mut serde_json::Value) -> &mut serde_json::Value {
    v["tensors"].as_object_mut().unwrap().values_mut().next().unwrap()
}

fn a9_persistence() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = corpus(&CorpusConfig { clips: 2, seed: 9, length: 16, ..CorpusConfig::default() });
    let vae = train_vae(&data, &VaeConfig { base_width: 8, ..VaeConfig::default() }, &TrainConfig { steps: 3, batch_size: 2, ..TrainConfig::default() })
        .map_err(|e| e.to_string())?;
    let good = dir.path().join("good");
    save_checkpoint(&vae.checkpoint, &good).map_err(|e| e.to_string())?;
    let back = load_checkpoint(&good).map_err(|e| e.to_string())?;
    let bitwise = back.meta == vae.checkpoint.meta
        && vae.checkpoint.tensors.iter().all(|(n, t)| {
            back.tensors.get(n).is_ok_and(|b| b.shape() == t.shape() && b.data().iter().zip(t.data()).all(|(x, y)| x.to_bits() == y.to_bits()))
        })
        && back.tensors.len() == vae.checkpoint.tensors.len();
    check(bitwise, "reloaded checkpoint differs".into())?;

    let manifest = fs::read_to_string(good.join(MANIFEST_FILE)).unwrap();
    let json: serde_json::Value = serde_json::from_str(&manifest).map_err(|e| e.to_string())?;
    let edit = |f: &dyn Fn(&mut serde_json::Value)| {
        let mut v = json.clone();
        f(&mut v);
        serde_json::to_string_pretty(&v).unwrap()
    };
    let corruptions: Vec<(&str, String)> = vec![
        ("truncated manifest", manifest[..manifest.len() / 2].to_string()),
        ("unknown field", edit(&|v| v["bogus"] = 1.into())),
        ("wrong dtype", edit(&|v| first_tensor(v)["dtype"] = "f16".into())),
        ("bad length", edit(&|v| {
            let t = first_tensor(v);
            t["length"] = (t["length"].as_u64().unwrap() + 4).into();
        })),
        ("offset past the blob", edit(&|v| first_tensor(v)["offset"] = 1_000_000_000u64.into())),
        ("format version", edit(&|v| v["format_version"] = 9.into())),
    ];
    let mut rejected = Vec::new();
    for (what, text) in &corruptions {
        check(text != &manifest, format!("corruption `{what}` did not change the manifest"))?;
        let bad = dir.path().join(what.replace(' ', "_"));
        fs::create_dir_all(&bad).unwrap();
        fs::write(bad.join(MANIFEST_FILE), text).unwrap();
        fs::copy(good.join(WEIGHTS_FILE), bad.join(WEIGHTS_FILE)).unwrap();
        match load_checkpoint(&bad) {
            Err(Error::Checkpoint { path, reason }) if path.starts_with(&bad) && !reason.is_empty() => rejected.push(*what),
            Err(other) => return Err(format!("{what}: wrong error kind: {other}")),
            Ok(_) => return Err(format!("{what}: corrupted manifest was accepted")),
        }
    }
    Ok(format!(
        "{} tensors round-trip bitwise; rejected with diagnostics: {}",
        vae.checkpoint.tensors.len(),
        rejected.join(", ")
    ))
}

const A10_CONFIG: &str = r#"{
  "corpus": { "clips": 6, "seed": 4, "render": { "resolution": 16, "shape_size": 5.0 }, "horizontal_only": true, "length": 32 },
  "corpus_dir": "data",
  "vae": { "base_width": 4, "latent_channels": 4, "downsample": 4 },
  "vae_train": { "steps": 6, "batch_size": 2 },
  "decoder_finetune": { "train": { "steps": 3, "batch_size": 1 }, "window": 4 },
  "unet": { "base_width": 4, "channel_multipliers": [1, 2], "attn_levels": [2], "heads": 2, "cond_width": 8, "frames": 16 },
  "schedule": { "steps": 20, "beta_start": 0.002, "beta_end": 0.4 },
  "keyframe_train": { "steps": 3, "batch_size": 2, "window_lengths": [16, 32], "ema_decay": 0.9 },
  "interp_train": { "steps": 3, "batch_size": 2 },
  "sample": { "sampler": "ddim", "ddim_steps": 4, "num_samples": 2 }
}"#;

fn run_cli_pipeline(root: &Path) -> Result<(), String> {
    let config = root.join("config.json");
    fs::write(&config, A10_CONFIG).unwrap();
    let p = |n: &str| root.join(n).to_str().unwrap().to_string();
    let steps: Vec<Vec<String>> = vec![
        vec!["gen-data".into(), "--out".into(), p("data")],
        vec!["train-vae".into(), "--out".into(), p("vae")],
        vec!["train-keyframe".into(), "--vae".into(), p("vae"), "--out".into(), p("key")],
        vec!["train-interp".into(), "--vae".into(), p("vae"), "--ckpt".into(), p("key"), "--out".into(), p("interp")],
        vec!["sample".into(), "--ckpt".into(), p("key"), "--out".into(), p("lat"), "--cond-velocity".into(), "-1,0".into()],
        vec!["interpolate".into(), "--ckpt".into(), p("interp"), "--input".into(), p("lat"), "--out".into(), p("full")],
        vec!["decode".into(), "--ckpt".into(), p("vae"), "--input".into(), p("full"), "--out".into(), p("video")],
        vec!["eval".into(), "--input".into(), p("video"), "--out".into(), p("eval")],
    ];
    let mut log = String::new();
    for args in steps {
        let out = Command::new(env!("CARGO_BIN_EXE_magicvid"))
            .args(&args)
            .args(["--config", config.to_str().unwrap(), "--seed", "7", "--threads", "1"])
            .env_remove("MAGICVID_SEED")
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("{} failed: {}", args[0], String::from_utf8_lossy(&out.stderr).trim()));
        }
        log.push_str(&String::from_utf8_lossy(&out.stdout));
    }
    fs::write(root.join("stdout.txt"), log).unwrap();
    Ok(())
}

fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(base: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                walk(base, &path, out);
            } else {
                out.insert(path.strip_prefix(base).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn a10_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path().join("run");
    fs::create_dir_all(&root).unwrap();
    run_cli_pipeline(&root)?;
    let first = snapshot(&root);
    fs::remove_dir_all(&root).unwrap();
    fs::create_dir_all(&root).unwrap();
    run_cli_pipeline(&root)?;
    let second = snapshot(&root);
    let differing: Vec<String> = first
        .keys()
        .chain(second.keys())
        .filter(|k| first.get(*k) != second.get(*k))
        .map(|k| k.display().to_string())
        .collect();
    check(differing.is_empty(), format!("files differ between reruns: {}", differing.join(", ")))?;
    let bytes: usize = first.values().map(Vec::len).sum();
    Ok(format!("8-command pipeline rerun: {} files, {bytes} bytes, all byte-identical", first.len()))
}

// ---------------------------------------------------------------------

struct Criterion {
    id: &'static str,
    name: &'static str,
    /// Soft criteria are reported but do not fail the suite.
    soft: bool,
    run: fn() -> Outcome,
}

const CRITERIA: [Criterion; 10] = [
    Criterion { id: "A1", name: "causality", soft: false, run: a1_causality },
    Criterion { id: "A2", name: "identity videofication", soft: false, run: a2_videofication },
    Criterion { id: "A3", name: "gradient correctness", soft: false, run: a3_gradients },
    Criterion { id: "A4", name: "schedule fidelity", soft: false, run: a4_schedule },
    Criterion { id: "A5", name: "overfit convergence", soft: false, run: a5_overfit },
    Criterion { id: "A6", name: "end-to-end generation", soft: true, run: a6_generation },
    Criterion { id: "A7", name: "interpolation arithmetic", soft: false, run: a7_interpolation },
    Criterion { id: "A8", name: "video VAE", soft: false, run: a8_video_vae },
    Criterion { id: "A9", name: "persistence", soft: false, run: a9_persistence },
    Criterion { id: "A10", name: "determinism", soft: false, run: a10_determinism },
];

fn main() -> ExitCode {
    let selected: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut hard_failures = 0;
    for c in CRITERIA.iter().filter(|c| selected.is_empty() || selected.iter().any(|s| s.eq_ignore_ascii_case(c.id))) {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("{} PASS {} ({secs:.1}s): {detail}", c.id, c.name),
            Err(detail) => {
                let tag = if c.soft { "FAIL (soft criterion)" } else { "FAIL" };
                println!("{} {tag} {} ({secs:.1}s): {detail}", c.id, c.name);
                if !c.soft {
                    hard_failures += 1;
                }
            }
        }
    }
    if hard_failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
