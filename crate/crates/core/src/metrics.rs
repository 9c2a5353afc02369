//! Desk-scale evaluation of generated clips.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Mean, over generated clips, of the MSE to the nearest reference clip.
    pub per_frame_mse: f64,
    /// Mean generated flicker minus mean reference flicker.
    pub temporal_flicker: f64,
    /// Fraction of clips whose horizontal motion matches the conditioned direction.
    pub condition_agreement: Option<f64>,
}

fn mse(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum::<f64>() / a.len().max(1) as f64
}

/// Mean squared difference between consecutive frames of `[F, C, H, W]`.
pub fn flicker(clip: &Tensor<f32>) -> f64 {
    let f = clip.dim(0);
    if f < 2 {
        return 0.0;
    }
    let per = clip.len() / f;
    let d = clip.data();
    (0..f - 1).map(|i| mse(&d[i * per..(i + 1) * per], &d[(i + 1) * per..(i + 2) * per])).sum::<f64>() / (f - 1) as f64
}

/// Centroid of the above-average intensity of one `[C, H, W]` frame.
fn foreground_centroid(frame: &[f32], c: usize, h: usize, w: usize) -> Option<[f64; 2]> {
    let plane = h * w;
    let lum: Vec<f64> = (0..plane).map(|p| (0..c).map(|ch| frame[ch * plane + p] as f64).sum::<f64>()).collect();
    let mean = lum.iter().sum::<f64>() / plane as f64;
    let (mut m, mut mx, mut my) = (0.0, 0.0, 0.0);
    for (p, &l) in lum.iter().enumerate() {
        let v = (l - mean).max(0.0);
        m += v;
        mx += v * ((p % w) as f64 + 0.5);
        my += v * ((p / w) as f64 + 0.5);
    }
    (m > 1e-9).then(|| [mx / m, my / m])
}

/// Least-squares slope of the foreground centroid's `x` over frame index.
pub fn horizontal_motion(clip: &Tensor<f32>) -> Option<f64> {
    let (f, c, h, w) = (clip.dim(0), clip.dim(1), clip.dim(2), clip.dim(3));
    let per = c * h * w;
    let pts: Vec<(f64, f64)> = (0..f)
        .filter_map(|i| foreground_centroid(&clip.data()[i * per..(i + 1) * per], c, h, w).map(|p| (i as f64, p[0])))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let (mt, mx) = (pts.iter().map(|p| p.0).sum::<f64>() / n, pts.iter().map(|p| p.1).sum::<f64>() / n);
    let sxx: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - mx)).sum();
    Some(sxy / sxx)
}

/// Scores generated clips against a reference set.
///
/// `directions` optionally gives the conditioned horizontal velocity of
/// each generated clip; only its sign matters.
pub fn eval_metrics(generated: &[Tensor<f32>], references: &[Tensor<f32>], directions: Option<&[f32]>) -> Result<EvalMetrics> {
    ensure!(!generated.is_empty(), InvalidArgument, "no generated clips to evaluate");
    ensure!(!references.is_empty(), InvalidArgument, "no reference clips");
    for g in generated {
        ensure!(g.rank() == 4, Shape, "clips must be [F, C, H, W], got {:?}", g.shape());
    }
    let mut total = 0.0;
    for g in generated {
        let best = references
            .iter()
            .filter(|r| r.shape() == g.shape())
            .map(|r| mse(g.data(), r.data()))
            .fold(f64::INFINITY, f64::min);
        ensure!(best.is_finite(), Shape, "no reference clip has shape {:?}", g.shape());
        total += best;
    }
    let mean_flicker = |set: &[Tensor<f32>]| set.iter().map(flicker).sum::<f64>() / set.len() as f64;
    let condition_agreement = match directions {
        None => None,
        Some(dirs) => {
            ensure!(dirs.len() == generated.len(), InvalidArgument, "{} directions for {} clips", dirs.len(), generated.len());
            let hits = generated
                .iter()
                .zip(dirs)
                .filter(|(g, &d)| horizontal_motion(g).is_some_and(|s| s != 0.0 && d != 0.0 && s.signum() == d.signum() as f64))
                .count();
            Some(hits as f64 / generated.len() as f64)
        }
    };
    Ok(EvalMetrics {
        per_frame_mse: total / generated.len() as f64,
        temporal_flicker: mean_flicker(generated) - mean_flicker(references),
        condition_agreement,
    })
}
