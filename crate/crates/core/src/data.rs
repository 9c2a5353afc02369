//! Synthetic moving-shape videos, training-window sampling with the
//! effective frame rate, and the frozen stand-in condition encoders.

use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::blocks::{ConditionEmbedding, ConditionSource};
use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

/// Frames per training window.
pub const WINDOW_FRAMES: usize = 16;

/// Default window lengths `L_s`.
pub const WINDOW_LENGTHS: [usize; 4] = [16, 24, 32, 48];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Square,
    Circle,
}

impl ShapeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Circle => "circle",
        }
    }
}

impl std::str::FromStr for ShapeKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "square" => Ok(Self::Square),
            "circle" => Ok(Self::Circle),
            other => Err(format!("unknown shape `{other}` (expected square or circle)")),
        }
    }
}

/// One synthetic clip. Field names are the corpus manifest format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipParams {
    pub kind: ShapeKind,
    /// RGB in `[0, 1]`.
    pub color: [f32; 3],
    /// Pixels per frame, `(dx, dy)`.
    pub velocity: [f32; 2],
    /// Top-left corner of the shape's bounding box at frame 0.
    pub start: [f32; 2],
    pub fps: f64,
    pub length: usize,
    pub seed: u64,
}

/// Rendering settings shared by a whole corpus.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub resolution: usize,
    /// Side length (square) or diameter (circle), in pixels.
    pub shape_size: f32,
    /// Standard deviation of seeded background noise.
    pub background_noise: f32,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { resolution: 32, shape_size: 8.0, background_noise: 0.0 }
    }
}

impl ClipParams {
    pub fn validate(&self, render: &RenderConfig) -> Result<()> {
        ensure!(
            self.length >= WINDOW_FRAMES,
            InvalidArgument,
            "clip length {} is shorter than {WINDOW_FRAMES} frames",
            self.length
        );
        ensure!(self.fps > 0.0 && self.fps.is_finite(), InvalidArgument, "fps must be positive, got {}", self.fps);
        ensure!(
            self.color.iter().all(|c| (0.0..=1.0).contains(c)),
            InvalidArgument,
            "color {:?} outside [0, 1]",
            self.color
        );
        ensure!(
            self.velocity.iter().chain(&self.start).all(|v| v.is_finite()),
            InvalidArgument,
            "non-finite velocity or start"
        );
        ensure!(
            render.shape_size > 0.0 && render.shape_size <= render.resolution as f32,
            InvalidArgument,
            "shape size {} does not fit a {}-pixel frame",
            render.shape_size,
            render.resolution
        );
        ensure!(render.background_noise >= 0.0, InvalidArgument, "background noise must be >= 0");
        Ok(())
    }

    /// Top-left corner at frame `i`, reflected at the frame borders.
    pub fn position(&self, i: usize, render: &RenderConfig) -> [f32; 2] {
        let range = render.resolution as f32 - render.shape_size;
        let mut out = [0.0; 2];
        for a in 0..2 {
            out[a] = reflect(self.start[a] + self.velocity[a] * i as f32, range);
        }
        out
    }
}

/// Triangle-wave fold of `x` into `[0, range]`.
fn reflect(x: f32, range: f32) -> f32 {
    if range <= 0.0 {
        return 0.0;
    }
    let period = 2.0 * range;
    let m = x.rem_euclid(period);
    if m > range {
        period - m
    } else {
        m
    }
}

/// Length of `[a, a + 1) ∩ [lo, hi)`.
fn overlap(a: f32, lo: f32, hi: f32) -> f32 {
    ((a + 1.0).min(hi) - a.max(lo)).max(0.0)
}

const CIRCLE_SUBSAMPLES: usize = 4;

fn coverage(kind: ShapeKind, px: usize, py: usize, pos: [f32; 2], size: f32) -> f32 {
    let (x, y) = (px as f32, py as f32);
    match kind {
        ShapeKind::Square => overlap(x, pos[0], pos[0] + size) * overlap(y, pos[1], pos[1] + size),
        ShapeKind::Circle => {
            let r = size / 2.0;
            let (cx, cy) = (pos[0] + r, pos[1] + r);
            if (x + 0.5 - cx).abs() > r + 1.0 || (y + 0.5 - cy).abs() > r + 1.0 {
                return 0.0;
            }
            let n = CIRCLE_SUBSAMPLES;
            let mut hits = 0;
            for sy in 0..n {
                for sx in 0..n {
                    let dx = x + (sx as f32 + 0.5) / n as f32 - cx;
                    let dy = y + (sy as f32 + 0.5) / n as f32 - cy;
                    if dx * dx + dy * dy <= r * r {
                        hits += 1;
                    }
                }
            }
            hits as f32 / (n * n) as f32
        }
    }
}

/// Renders `[length, 3, R, R]` frames with values in `[0, 1]`.
pub fn generate_clip(params: &ClipParams, render: &RenderConfig) -> Result<Tensor<f32>> {
    params.validate(render)?;
    let res = render.resolution;
    let plane = res * res;
    let mut data = vec![0.0f32; params.length * 3 * plane];
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    for i in 0..params.length {
        let pos = params.position(i, render);
        let frame = &mut data[i * 3 * plane..(i + 1) * 3 * plane];
        for py in 0..res {
            for px in 0..res {
                let cov = coverage(params.kind, px, py, pos, render.shape_size);
                for c in 0..3 {
                    frame[c * plane + py * res + px] = cov * params.color[c];
                }
            }
        }
        if render.background_noise > 0.0 {
            for v in frame.iter_mut() {
                let n: f32 = rng.sample(StandardNormal);
                *v = (*v + render.background_noise * n).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::from_vec(&[params.length, 3, res, res], data)
}

/// Intensity-weighted centroid `(x, y)` of one `[C, H, W]` frame.
pub fn centroid(frame: &[f32], channels: usize, h: usize, w: usize) -> Option<[f64; 2]> {
    let (mut m, mut mx, mut my) = (0.0f64, 0.0f64, 0.0f64);
    for c in 0..channels {
        for y in 0..h {
            for x in 0..w {
                let v = frame[(c * h + y) * w + x].max(0.0) as f64;
                m += v;
                mx += v * (x as f64 + 0.5);
                my += v * (y as f64 + 0.5);
            }
        }
    }
    (m > 1e-9).then(|| [mx / m, my / m])
}

/// Sixteen frames spread uniformly over a window, with their frame rate.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingWindow {
    /// `[16, 3, H, W]`.
    pub frames: Tensor<f32>,
    /// Effective frame rate `16 / L_s * FPS`.
    pub nu: f64,
    pub start: usize,
    pub window_length: usize,
    pub cond: Option<ConditionEmbedding<f32>>,
}

/// Clip frame indices of a window: `start + floor(i * L_s / 16)`.
pub fn window_indices(start: usize, window_length: usize) -> Vec<usize> {
    (0..WINDOW_FRAMES).map(|i| start + i * window_length / WINDOW_FRAMES).collect()
}

/// `nu = 16 * FPS / L_s`.
pub fn effective_fps(fps: f64, window_length: usize) -> f64 {
    WINDOW_FRAMES as f64 * fps / window_length as f64
}

/// Picks a contiguous window of `L_s` frames uniformly and takes 16 frames from it.
pub fn sample_training_window<R: Rng>(
    clip: &Tensor<f32>,
    fps: f64,
    window_length: usize,
    rng: &mut R,
) -> Result<TrainingWindow> {
    ensure!(clip.rank() == 4, Shape, "clip must be [L, C, H, W], got {:?}", clip.shape());
    let total = clip.dim(0);
    ensure!(
        (WINDOW_FRAMES..=total).contains(&window_length),
        InvalidArgument,
        "window length {window_length} outside {WINDOW_FRAMES}..={total}"
    );
    ensure!(fps > 0.0 && fps.is_finite(), InvalidArgument, "fps must be positive, got {fps}");
    let start = rng.random_range(0..=total - window_length);
    let frames: Vec<Tensor<f32>> = window_indices(start, window_length)
        .into_iter()
        .map(|i| clip.narrow_outer(i, 1))
        .collect::<Result<_>>()?;
    Ok(TrainingWindow {
        frames: Tensor::stack_outer(&frames)?,
        nu: effective_fps(fps, window_length),
        start,
        window_length,
        cond: None,
    })
}

/// Draws `L_s` uniformly from the choices that fit a clip of `total` frames.
pub fn draw_window_length<R: Rng>(choices: &[usize], total: usize, rng: &mut R) -> Result<usize> {
    let fitting: Vec<usize> = choices.iter().copied().filter(|&l| (WINDOW_FRAMES..=total).contains(&l)).collect();
    fitting
        .choose(rng)
        .copied()
        .ok_or_else(|| Error::InvalidArgument(format!("no window length in {choices:?} fits {total} frames")))
}

// ---------------------------------------------------------------------
// condition encoders

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn sign_word(v: f32) -> &'static str {
    if v > 0.05 {
        "+"
    } else if v < -0.05 {
        "-"
    } else {
        "0"
    }
}

/// Quantised attribute words standing in for a caption.
pub fn caption_words(params: &ClipParams) -> Vec<String> {
    let bucket = |c: f32| (c * 2.0).round() as u8;
    let speed = (params.velocity[0].hypot(params.velocity[1]) * 2.0).round() as u32;
    vec![
        format!("shape:{}", params.kind.as_str()),
        format!("color:{}{}{}", bucket(params.color[0]), bucket(params.color[1]), bucket(params.color[2])),
        format!("dx:{}", sign_word(params.velocity[0])),
        format!("dy:{}", sign_word(params.velocity[1])),
        format!("speed:{speed}"),
    ]
}

fn word_vector(word: &str, width: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(word.as_bytes()));
    (0..width).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

/// Text-proxy tokens `[L, D]`: each caption word hashes to a fixed random
/// vector; word `k` lands in token `k mod L`, unused tokens stay zero.
pub fn encode_condition_text(params: &ClipParams, width: usize, tokens: usize) -> Result<ConditionEmbedding<f32>> {
    ensure!(width > 0 && tokens > 0, InvalidArgument, "condition must have positive width and length");
    let mut data = vec![0.0f32; tokens * width];
    for (k, word) in caption_words(params).iter().enumerate() {
        let row = &mut data[(k % tokens) * width..(k % tokens + 1) * width];
        for (d, v) in row.iter_mut().zip(word_vector(word, width)) {
            *d += v;
        }
    }
    ConditionEmbedding::new(Tensor::from_vec(&[tokens, width], data)?, ConditionSource::TextProxy)
}

const FRAME_PROXY_SEED: u64 = 0x5eed_f4a3_e000;

/// Pooled statistics of a `[C, H, W]` frame: the mean of each of the four
/// quadrants per channel, then each channel's standard deviation.
pub fn frame_statistics(frame: &[f32], channels: usize, h: usize, w: usize) -> Vec<f32> {
    let mut feats = Vec::with_capacity(5 * channels);
    let (hh, hw) = (h.div_ceil(2), w.div_ceil(2));
    for c in 0..channels {
        let plane = &frame[c * h * w..(c + 1) * h * w];
        for (y0, y1) in [(0, hh), (hh, h)] {
            for (x0, x1) in [(0, hw), (hw, w)] {
                let mut s = 0.0f64;
                let n = ((y1 - y0) * (x1 - x0)).max(1);
                for y in y0..y1 {
                    for x in x0..x1 {
                        s += plane[y * w + x] as f64;
                    }
                }
                feats.push((s / n as f64) as f32);
            }
        }
    }
    for c in 0..channels {
        let plane = &frame[c * h * w..(c + 1) * h * w];
        let n = plane.len().max(1) as f64;
        let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = plane.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        feats.push(var.sqrt() as f32);
    }
    feats
}

/// Fixed random projection of frame statistics into `[L, D]` tokens.
pub fn frame_proxy_tokens(frame: &[f32], channels: usize, h: usize, w: usize, width: usize, tokens: usize) -> Vec<f32> {
    let feats = frame_statistics(frame, channels, h, w);
    let mut rng = ChaCha8Rng::seed_from_u64(FRAME_PROXY_SEED ^ ((channels as u64) << 32) ^ width as u64);
    let scale = 1.0 / (feats.len() as f32).sqrt();
    let mut out = vec![0.0f32; tokens * width];
    for o in out.iter_mut() {
        let mut acc = 0.1 * rng.sample::<f32, _>(StandardNormal);
        for f in &feats {
            acc += rng.sample::<f32, _>(StandardNormal) * scale * 4.0 * f;
        }
        *o = acc;
    }
    out
}

/// Frame-proxy condition from one seeded, uniformly chosen frame of `[F, C, H, W]`.
pub fn encode_condition_unsupervised(
    frames: &Tensor<f32>,
    width: usize,
    tokens: usize,
    seed: u64,
) -> Result<ConditionEmbedding<f32>> {
    ensure!(frames.rank() == 4, Shape, "frames must be [F, C, H, W], got {:?}", frames.shape());
    ensure!(frames.dim(0) > 0, InvalidArgument, "cannot embed an empty clip");
    ensure!(width > 0 && tokens > 0, InvalidArgument, "condition must have positive width and length");
    let (c, h, w) = (frames.dim(1), frames.dim(2), frames.dim(3));
    let pick = ChaCha8Rng::seed_from_u64(seed).random_range(0..frames.dim(0));
    let frame = &frames.data()[pick * c * h * w..(pick + 1) * c * h * w];
    let data = frame_proxy_tokens(frame, c, h, w, width, tokens);
    ConditionEmbedding::new(Tensor::from_vec(&[tokens, width], data)?, ConditionSource::FrameProxy)
}

// ---------------------------------------------------------------------
// corpus

/// How clips are drawn for a generated corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub clips: usize,
    pub seed: u64,
    pub render: RenderConfig,
    pub kinds: Vec<ShapeKind>,
    pub palette: Vec<[f32; 3]>,
    pub speed_min: f32,
    pub speed_max: f32,
    /// Only left/right motion when set; starts are then chosen so the
    /// shape does not reach a border (when the clip is short enough).
    pub horizontal_only: bool,
    pub fps_choices: Vec<f64>,
    pub length: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            clips: 64,
            seed: 0,
            render: RenderConfig::default(),
            kinds: vec![ShapeKind::Square, ShapeKind::Circle],
            palette: vec![[1.0, 0.2, 0.2], [0.2, 1.0, 0.2], [0.3, 0.4, 1.0], [1.0, 1.0, 0.2], [1.0, 1.0, 1.0]],
            speed_min: 0.25,
            speed_max: 1.0,
            horizontal_only: false,
            fps_choices: vec![8.0, 12.0, 24.0, 30.0],
            length: 48,
        }
    }
}

/// Deterministic clip parameters for a corpus.
pub fn corpus_params(cfg: &CorpusConfig) -> Result<Vec<ClipParams>> {
    ensure!(!cfg.kinds.is_empty() && !cfg.palette.is_empty() && !cfg.fps_choices.is_empty(), InvalidArgument,
        "kinds, palette and fps_choices must be non-empty");
    ensure!(
        cfg.speed_min >= 0.0 && cfg.speed_min <= cfg.speed_max,
        InvalidArgument,
        "speed range {}..{} is empty",
        cfg.speed_min,
        cfg.speed_max
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let range = cfg.render.resolution as f32 - cfg.render.shape_size;
    let mut out = Vec::with_capacity(cfg.clips);
    for _ in 0..cfg.clips {
        let kind = *cfg.kinds.choose(&mut rng).expect("non-empty");
        let color = *cfg.palette.choose(&mut rng).expect("non-empty");
        let speed = if cfg.speed_max > cfg.speed_min { rng.random_range(cfg.speed_min..=cfg.speed_max) } else { cfg.speed_min };
        let velocity = if cfg.horizontal_only {
            [if rng.random_bool(0.5) { speed } else { -speed }, 0.0]
        } else {
            let angle = rng.random_range(0.0..std::f32::consts::TAU);
            [speed * angle.cos(), speed * angle.sin()]
        };
        let mut start = [rng.random_range(0.0..=range.max(0.0)), rng.random_range(0.0..=range.max(0.0))];
        let travel = velocity[0].abs() * (cfg.length - 1) as f32;
        if cfg.horizontal_only && travel <= range {
            // keep the whole clip clear of the borders so the direction never flips
            let x = start[0] / range.max(f32::EPSILON) * (range - travel);
            start[0] = if velocity[0] >= 0.0 { x } else { x + travel };
        }
        let fps = *cfg.fps_choices.choose(&mut rng).expect("non-empty");
        let params = ClipParams { kind, color, velocity, start, fps, length: cfg.length, seed: rng.random() };
        params.validate(&cfg.render)?;
        out.push(params);
    }
    Ok(out)
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RENDER_FILE: &str = "render.json";

pub fn clip_file_name(index: usize) -> String {
    format!("clip_{index:05}.bin")
}

/// Writes little-endian `f32` values.
pub fn write_raw_f32(path: &Path, data: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_raw_f32(path: &Path) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    ensure!(bytes.len() % 4 == 0, InvalidArgument, "{}: size {} is not a multiple of 4", path.display(), bytes.len());
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

pub(crate) fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<S: for<'de> Deserialize<'de>>(path: &Path) -> Result<S> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// A loaded corpus: parameters, render settings and every clip's frames.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub render: RenderConfig,
    pub params: Vec<ClipParams>,
    pub clips: Vec<Tensor<f32>>,
}

impl Corpus {
    pub fn generate(params: Vec<ClipParams>, render: RenderConfig) -> Result<Self> {
        let clips = params.iter().map(|p| generate_clip(p, &render)).collect::<Result<_>>()?;
        Ok(Self { render, params, clips })
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// `manifest.json`, `render.json` and one raw file per clip.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join(MANIFEST_FILE), &self.params)?;
        write_json(&dir.join(RENDER_FILE), &self.render)?;
        for (i, clip) in self.clips.iter().enumerate() {
            write_raw_f32(&dir.join(clip_file_name(i)), clip.data())?;
        }
        Ok(())
    }

    /// Loads a corpus directory, checking each clip file's size.
    pub fn read(dir: &Path) -> Result<Self> {
        let params: Vec<ClipParams> = read_json(&dir.join(MANIFEST_FILE))?;
        let render: RenderConfig = read_json(&dir.join(RENDER_FILE))?;
        let res = render.resolution;
        let mut clips = Vec::with_capacity(params.len());
        for (i, p) in params.iter().enumerate() {
            p.validate(&render)?;
            let path = dir.join(clip_file_name(i));
            let data = read_raw_f32(&path)?;
            let want = p.length * 3 * res * res;
            ensure!(
                data.len() == want,
                InvalidArgument,
                "{}: holds {} values, manifest implies {want}",
                path.display(),
                data.len()
            );
            clips.push(Tensor::from_vec(&[p.length, 3, res, res], data)?);
        }
        Ok(Self { render, params, clips })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(velocity: [f32; 2], start: [f32; 2]) -> ClipParams {
        ClipParams { kind: ShapeKind::Square, color: [1.0, 0.5, 0.0], velocity, start, fps: 30.0, length: 24, seed: 3 }
    }

    #[test]
    fn static_clip_has_identical_frames() {
        let c = generate_clip(&clip([0.0, 0.0], [5.0, 7.0]), &RenderConfig::default()).unwrap();
        let per = c.len() / 24;
        for i in 1..24 {
            assert_eq!(&c.data()[i * per..(i + 1) * per], &c.data()[..per]);
        }
    }

    #[test]
    fn same_seed_same_pixels() {
        let r = RenderConfig { background_noise: 0.05, ..RenderConfig::default() };
        let p = clip([0.7, -0.3], [3.0, 9.0]);
        assert_eq!(generate_clip(&p, &r).unwrap(), generate_clip(&p, &r).unwrap());
        let q = ClipParams { seed: 4, ..p.clone() };
        assert_ne!(generate_clip(&p, &r).unwrap(), generate_clip(&q, &r).unwrap());
    }

    #[test]
    fn centroid_moves_one_pixel_per_frame_until_reflection() {
        let r = RenderConfig::default();
        let p = ClipParams { length: 40, ..clip([1.0, 0.0], [0.0, 4.0]) };
        let c = generate_clip(&p, &r).unwrap();
        let per = 3 * 32 * 32;
        let xs: Vec<f64> = (0..40).map(|i| centroid(&c.data()[i * per..(i + 1) * per], 3, 32, 32).unwrap()[0]).collect();
        // range = 32 - 8 = 24 pixels of travel before the bounce
        for i in 0..24 {
            assert!((xs[i + 1] - xs[i] - 1.0).abs() < 1e-9, "frame {i}");
            assert!((xs[i] - (i as f64 + 4.0)).abs() < 1e-9);
        }
        assert!(xs[25] < xs[24]);
    }

    #[test]
    fn pixels_in_unit_range_and_shape_stays_inside() {
        let r = RenderConfig::default();
        let p = ClipParams { kind: ShapeKind::Circle, length: 64, ..clip([2.3, -1.7], [20.0, 3.0]) };
        let c = generate_clip(&p, &r).unwrap();
        assert!(c.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let per = 3 * 32 * 32;
        for i in 0..64 {
            let mass: f32 = c.data()[i * per..i * per + 1024].iter().sum();
            let want = std::f32::consts::PI * 16.0;
            assert!((mass - want).abs() < 2.0, "frame {i}: mass {mass}");
        }
    }

    #[test]
    fn rejects_bad_params() {
        let r = RenderConfig::default();
        assert!(generate_clip(&ClipParams { length: 15, ..clip([0.0, 0.0], [0.0, 0.0]) }, &r).is_err());
        assert!(generate_clip(&ClipParams { fps: 0.0, ..clip([0.0, 0.0], [0.0, 0.0]) }, &r).is_err());
        assert!(generate_clip(&ClipParams { color: [1.5, 0.0, 0.0], ..clip([0.0, 0.0], [0.0, 0.0]) }, &r).is_err());
        let big = RenderConfig { shape_size: 40.0, ..r };
        assert!(generate_clip(&clip([0.0, 0.0], [0.0, 0.0]), &big).is_err());
    }

    #[test]
    fn window_examples() {
        let c = generate_clip(&ClipParams { length: 64, ..clip([0.5, 0.25], [1.0, 1.0]) }, &RenderConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = sample_training_window(&c, 30.0, 16, &mut rng).unwrap();
        assert_eq!(w.nu, 30.0);
        assert_eq!(w.frames, c.narrow_outer(w.start, 16).unwrap());
        assert_eq!(sample_training_window(&c, 30.0, 32, &mut rng).unwrap().nu, 15.0);
        assert_eq!(sample_training_window(&c, 24.0, 64, &mut rng).unwrap().nu, 6.0);
        assert!(sample_training_window(&c, 24.0, 65, &mut rng).is_err());
        assert!(sample_training_window(&c, 24.0, 15, &mut rng).is_err());
    }

    #[test]
    fn window_indices_span_the_window() {
        assert_eq!(window_indices(3, 16), (3..19).collect::<Vec<_>>());
        let idx = window_indices(0, 48);
        assert_eq!(idx[1], 3);
        assert_eq!(*idx.last().unwrap(), 45);
    }

    #[test]
    fn text_proxy_examples() {
        let p = clip([0.5, 0.0], [0.0, 0.0]);
        let a = encode_condition_text(&p, 16, 6).unwrap();
        assert_eq!(a, encode_condition_text(&p, 16, 6).unwrap());
        assert_eq!(a.source, ConditionSource::TextProxy);
        let q = clip([-0.5, 0.0], [0.0, 0.0]);
        let b = encode_condition_text(&q, 16, 6).unwrap();
        let differ = (0..6).filter(|&l| a.tokens.data()[l * 16..(l + 1) * 16] != b.tokens.data()[l * 16..(l + 1) * 16]).count();
        assert!(differ >= 1);
        // start position, fps and seed are not part of the caption
        let r = ClipParams { start: [9.0, 2.0], fps: 8.0, seed: 99, ..p.clone() };
        assert_eq!(encode_condition_text(&r, 16, 6).unwrap(), a);
    }

    #[test]
    fn frame_proxy_zero_frames_give_bias_only() {
        let zeros = Tensor::zeros(&[4, 3, 8, 8]);
        let a = encode_condition_unsupervised(&zeros, 8, 2, 5).unwrap();
        let b = encode_condition_unsupervised(&Tensor::zeros(&[1, 3, 8, 8]), 8, 2, 11).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert!(a.tokens.sq_norm() > 0.0);
        assert!(encode_condition_unsupervised(&Tensor::zeros(&[0, 3, 8, 8]), 8, 2, 5).is_err());
    }

    #[test]
    fn frame_statistics_oracle() {
        let frame: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let s = frame_statistics(&frame, 1, 4, 4);
        assert_eq!(&s[..4], &[2.5, 4.5, 10.5, 12.5]);
        let var: f64 = (0..16).map(|v| (v as f64 - 7.5).powi(2)).sum::<f64>() / 16.0;
        assert!((s[4] as f64 - var.sqrt()).abs() < 1e-5);
    }

    #[test]
    fn corpus_round_trip() {
        let cfg = CorpusConfig { clips: 3, length: 16, ..CorpusConfig::default() };
        let corpus = Corpus::generate(corpus_params(&cfg).unwrap(), cfg.render).unwrap();
        let dir = tempfile::tempdir().unwrap();
        corpus.write(dir.path()).unwrap();
        let back = Corpus::read(dir.path()).unwrap();
        assert_eq!(back.params, corpus.params);
        assert_eq!(back.clips, corpus.clips);
        let text = std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        for key in ["kind", "color", "velocity", "start", "fps", "length", "seed"] {
            assert!(text.contains(&format!("\"{key}\"")));
        }
        std::fs::write(dir.path().join(clip_file_name(1)), [0u8; 12]).unwrap();
        assert!(Corpus::read(dir.path()).is_err());
    }

    #[test]
    fn horizontal_corpus_has_no_vertical_motion() {
        let cfg = CorpusConfig { clips: 40, horizontal_only: true, ..CorpusConfig::default() };
        let ps = corpus_params(&cfg).unwrap();
        assert!(ps.iter().all(|p| p.velocity[1] == 0.0 && p.velocity[0] != 0.0));
        assert!(ps.iter().any(|p| p.velocity[0] > 0.0) && ps.iter().any(|p| p.velocity[0] < 0.0));
    }

    #[test]
    fn horizontal_clips_never_reverse() {
        let cfg = CorpusConfig { clips: 30, length: 24, horizontal_only: true, ..CorpusConfig::default() };
        let render = cfg.render;
        for p in corpus_params(&cfg).unwrap() {
            let xs: Vec<f32> = (0..p.length).map(|i| p.position(i, &render)[0]).collect();
            for w in xs.windows(2) {
                assert!((w[1] - w[0]) * p.velocity[0] > 0.0, "{p:?}");
            }
        }
    }
}
