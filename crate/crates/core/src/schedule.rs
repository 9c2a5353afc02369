//! Gaussian diffusion: linear beta schedule, forward corruption, the
//! frame-wise reconstruction loss and the DDPM / DDIM reverse steps.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::tensor::{Scalar, Tensor};

/// What the denoiser is trained to output.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictionTarget {
    /// The injected noise.
    #[default]
    Epsilon,
    /// The clean latent.
    X0,
}

impl PredictionTarget {
    pub fn as_str(self) -> &'static str {
        match self {
            PredictionTarget::Epsilon => "epsilon",
            PredictionTarget::X0 => "x0",
        }
    }
}

impl std::str::FromStr for PredictionTarget {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "epsilon" => Ok(Self::Epsilon),
            "x0" => Ok(Self::X0),
            other => Err(format!("unknown prediction target `{other}` (expected epsilon or x0)")),
        }
    }
}

/// Construction parameters, persisted with every diffusion checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    /// Fifty steps with the 1000-step noise budget rescaled, so the last
    /// step is still (almost) pure noise.
    fn default() -> Self {
        Self { steps: 50, beta_start: 0.002, beta_end: 0.4 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

/// `beta`, `alpha = 1 - beta` and the running product `alpha_bar`.
///
/// Step indices run `1..=T`; `alpha_bar(0) == 1` exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced betas from `beta_start` to `beta_end`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        ensure!(steps >= 1, InvalidArgument, "schedule needs at least one step");
        ensure!(
            beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0,
            InvalidArgument,
            "betas must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
        );
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        ensure!(!betas.is_empty(), InvalidArgument, "schedule needs at least one step");
        ensure!(
            betas.iter().all(|&b| b > 0.0 && b < 1.0),
            InvalidArgument,
            "every beta must lie in (0, 1)"
        );
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alphas, alpha_bars })
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    /// `T + 1` entries, index 0 is 1.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_step(&self, t: usize, allow_zero: bool) -> Result<()> {
        let lo = if allow_zero { 0 } else { 1 };
        ensure!(
            t >= lo && t <= self.steps(),
            InvalidArgument,
            "step {t} outside {lo}..={}",
            self.steps()
        );
        Ok(())
    }

    /// Noise estimate implied by a prediction of either kind.
    pub fn epsilon_from_prediction<T: Scalar>(
        &self,
        zt: &Tensor<T>,
        t: usize,
        prediction: &Tensor<T>,
        target: PredictionTarget,
    ) -> Result<Tensor<T>> {
        zt.expect_same_shape(prediction, "prediction")?;
        match target {
            PredictionTarget::Epsilon => Ok(prediction.clone()),
            PredictionTarget::X0 => {
                let ab = self.alpha_bar(t);
                let a = T::from_f64_lossy(ab.sqrt());
                let inv = T::from_f64_lossy(1.0 / (1.0 - ab).sqrt());
                zt.zip_map(prediction, |z, x0| (z - a * x0) * inv)
            }
        }
    }

    /// Clean-latent estimate implied by a prediction of either kind.
    pub fn x0_from_prediction<T: Scalar>(
        &self,
        zt: &Tensor<T>,
        t: usize,
        prediction: &Tensor<T>,
        target: PredictionTarget,
    ) -> Result<Tensor<T>> {
        zt.expect_same_shape(prediction, "prediction")?;
        match target {
            PredictionTarget::X0 => Ok(prediction.clone()),
            PredictionTarget::Epsilon => {
                let ab = self.alpha_bar(t);
                let s = T::from_f64_lossy((1.0 - ab).sqrt());
                let inv = T::from_f64_lossy(1.0 / ab.sqrt());
                zt.zip_map(prediction, |z, e| (z - s * e) * inv)
            }
        }
    }
}

/// `sqrt(alpha_bar_t) * z0 + sqrt(1 - alpha_bar_t) * eps`.
///
/// `t = 0` is accepted as the uncorrupted identity case.
pub fn forward_diffuse<T: Scalar>(
    z0: &Tensor<T>,
    t: usize,
    eps: &Tensor<T>,
    schedule: &NoiseSchedule,
) -> Result<Tensor<T>> {
    z0.expect_same_shape(eps, "forward_diffuse noise")?;
    schedule.check_step(t, true)?;
    if t == 0 {
        return Ok(z0.clone());
    }
    let ab = schedule.alpha_bar(t);
    let a = T::from_f64_lossy(ab.sqrt());
    let s = T::from_f64_lossy((1.0 - ab).sqrt());
    z0.zip_map(eps, |z, e| a * z + s * e)
}

/// Frame-wise reconstruction loss: squared error against `eps` or `z0`
/// summed over frames and elements, normalised by the element count.
pub fn training_loss<T: Scalar>(
    z0: &Tensor<T>,
    eps: &Tensor<T>,
    prediction: &Tensor<T>,
    target: PredictionTarget,
) -> Result<T> {
    z0.expect_same_shape(eps, "training_loss noise")?;
    z0.expect_same_shape(prediction, "training_loss prediction")?;
    let reference = match target {
        PredictionTarget::Epsilon => eps,
        PredictionTarget::X0 => z0,
    };
    let n = T::from_usize(z0.len().max(1)).unwrap();
    let total: T = prediction.data().iter().zip(reference.data()).map(|(&p, &r)| (p - r) * (p - r)).sum();
    Ok(total / n)
}

/// Ancestral DDPM step `t -> t-1` with `sigma_t^2 = beta_t` and no noise at `t = 1`.
pub fn denoise_step_ddpm<T: Scalar>(
    zt: &Tensor<T>,
    t: usize,
    prediction: &Tensor<T>,
    target: PredictionTarget,
    schedule: &NoiseSchedule,
    xi: &Tensor<T>,
) -> Result<Tensor<T>> {
    schedule.check_step(t, false)?;
    zt.expect_same_shape(xi, "ddpm noise")?;
    let eps = schedule.epsilon_from_prediction(zt, t, prediction, target)?;
    let beta = schedule.beta(t);
    let inv_sqrt_alpha = T::from_f64_lossy(1.0 / schedule.alpha(t).sqrt());
    let coef = T::from_f64_lossy(beta / (1.0 - schedule.alpha_bar(t)).sqrt());
    let sigma = T::from_f64_lossy(if t > 1 { beta.sqrt() } else { 0.0 });
    let mean = zt.zip_map(&eps, |z, e| inv_sqrt_alpha * (z - coef * e))?;
    mean.zip_map(xi, |m, x| m + sigma * x)
}

/// Deterministic DDIM step (eta = 0) from `t` to `t_prev`.
///
/// `t_prev == t` is the fixed point and returns `zt` unchanged.
pub fn denoise_step_ddim<T: Scalar>(
    zt: &Tensor<T>,
    t: usize,
    t_prev: usize,
    prediction: &Tensor<T>,
    target: PredictionTarget,
    schedule: &NoiseSchedule,
) -> Result<Tensor<T>> {
    schedule.check_step(t, false)?;
    ensure!(t_prev <= t, InvalidArgument, "ddim needs t_prev <= t, got {t_prev} > {t}");
    if t_prev == t {
        zt.expect_same_shape(prediction, "prediction")?;
        return Ok(zt.clone());
    }
    let eps = schedule.epsilon_from_prediction(zt, t, prediction, target)?;
    let ab = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t_prev);
    let s = T::from_f64_lossy((1.0 - ab).sqrt());
    let inv = T::from_f64_lossy(1.0 / ab.sqrt());
    let a_prev = T::from_f64_lossy(ab_prev.sqrt());
    let s_prev = T::from_f64_lossy((1.0 - ab_prev).sqrt());
    let x0 = zt.zip_map(&eps, |z, e| (z - s * e) * inv)?;
    x0.zip_map(&eps, |x, e| a_prev * x + s_prev * e)
}

/// Reverse-process sampler.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampler {
    Ddpm,
    Ddim,
}

impl std::str::FromStr for Sampler {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "ddpm" => Ok(Self::Ddpm),
            "ddim" => Ok(Self::Ddim),
            other => Err(format!("unknown sampler `{other}` (expected ddpm or ddim)")),
        }
    }
}

/// Descending, evenly spaced DDIM steps from `T` down to 1, then 0.
pub fn ddim_timesteps(total: usize, steps: usize) -> Vec<usize> {
    let steps = steps.clamp(1, total);
    let mut ts: Vec<usize> = (0..steps)
        .map(|i| total - (i * total) / steps)
        .collect();
    ts.dedup();
    ts.push(0);
    ts
}

/// Runs the reverse process from unit Gaussian noise.
///
/// `denoise(zt, t)` returns the model prediction at step `t`. DDPM always
/// walks all `T` steps; DDIM uses `ddim_steps` evenly spaced ones.
pub fn sample_loop<T: Scalar, R: Rng>(
    shape: &[usize],
    schedule: &NoiseSchedule,
    sampler: Sampler,
    ddim_steps: usize,
    target: PredictionTarget,
    rng: &mut R,
    mut denoise: impl FnMut(&Tensor<T>, usize) -> Result<Tensor<T>>,
) -> Result<Tensor<T>> {
    let mut z = Tensor::randn(shape, 1.0, rng);
    match sampler {
        Sampler::Ddpm => {
            for t in (1..=schedule.steps()).rev() {
                let pred = denoise(&z, t)?;
                let xi = Tensor::randn(shape, 1.0, rng);
                z = denoise_step_ddpm(&z, t, &pred, target, schedule, &xi)?;
            }
        }
        Sampler::Ddim => {
            let ts = ddim_timesteps(schedule.steps(), ddim_steps);
            for pair in ts.windows(2) {
                let pred = denoise(&z, pair[0])?;
                z = denoise_step_ddim(&z, pair[0], pair[1], &pred, target, schedule)?;
            }
        }
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t64(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::linear(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bars(), &[1.0, 0.5]);
    }

    #[test]
    fn two_step_schedule() {
        let s = NoiseSchedule::linear(2, 0.1, 0.2).unwrap();
        assert_eq!(s.betas(), &[0.1, 0.2]);
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_schedules() {
        assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::from_betas(vec![0.1, 1.5]).is_err());
    }

    #[test]
    fn forward_diffuse_special_cases() {
        let s = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        let z0 = t64(&[4], &[1.0, -2.0, 0.5, 3.0]);
        let eps = t64(&[4], &[0.3, 0.1, -0.7, 0.2]);
        assert_eq!(forward_diffuse(&z0, 0, &eps, &s).unwrap(), z0);
        let zero = Tensor::zeros(&[4]);
        let out = forward_diffuse(&zero, 7, &eps, &s).unwrap();
        let k = (1.0 - s.alpha_bar(7)).sqrt();
        for (o, e) in out.data().iter().zip(eps.data()) {
            assert!((o - k * e).abs() < 1e-15);
        }
        // nearly destroyed signal
        let harsh = NoiseSchedule::linear(200, 0.5, 0.9).unwrap();
        let out = forward_diffuse(&z0, 200, &eps, &harsh).unwrap();
        assert!(out.max_abs_diff(&eps) < 1e-12);
        assert!(forward_diffuse(&z0, 11, &eps, &s).is_err());
        assert!(forward_diffuse(&z0, 3, &Tensor::zeros(&[3]), &s).is_err());
    }

    #[test]
    fn loss_examples() {
        let a = t64(&[2, 1, 1, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(training_loss(&a, &a, &a, PredictionTarget::Epsilon).unwrap(), 0.0);
        let zeros = Tensor::zeros(&[3, 2, 2, 2]);
        let ones = Tensor::ones(&[3, 2, 2, 2]);
        assert_eq!(training_loss(&ones, &zeros, &ones, PredictionTarget::Epsilon).unwrap(), 1.0);
        assert_eq!(training_loss(&zeros, &ones, &ones, PredictionTarget::X0).unwrap(), 1.0);
        assert!(training_loss(&a, &zeros, &a, PredictionTarget::X0).is_err());
    }

    #[test]
    fn loss_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shape = [2, 1, 2, 2];
        let z0 = Tensor::<f64>::randn(&shape, 1.0, &mut rng);
        let eps = Tensor::<f64>::randn(&shape, 1.0, &mut rng);
        let pred = Tensor::<f64>::randn(&shape, 1.0, &mut rng);
        for target in [PredictionTarget::Epsilon, PredictionTarget::X0] {
            let reference = if target == PredictionTarget::Epsilon { &eps } else { &z0 };
            let mut acc = 0.0;
            let mut count = 0;
            for f in 0..2 {
                for y in 0..2 {
                    for x in 0..2 {
                        let i = f * 4 + y * 2 + x;
                        let d = pred.data()[i] - reference.data()[i];
                        acc += d * d;
                        count += 1;
                    }
                }
            }
            let got = training_loss(&z0, &eps, &pred, target).unwrap();
            assert!((got - acc / count as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn ddpm_final_step_recovers_z0_with_exact_noise() {
        let s = NoiseSchedule::linear(50, 0.002, 0.4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z0 = Tensor::<f64>::randn(&[2, 3, 2, 2], 1.0, &mut rng);
        let eps = Tensor::<f64>::randn(&[2, 3, 2, 2], 1.0, &mut rng);
        let xi = Tensor::<f64>::randn(&[2, 3, 2, 2], 1.0, &mut rng);
        let z1 = forward_diffuse(&z0, 1, &eps, &s).unwrap();
        let out = denoise_step_ddpm(&z1, 1, &eps, PredictionTarget::Epsilon, &s, &xi).unwrap();
        assert!(out.max_abs_diff(&z0) < 1e-6);
        let out = denoise_step_ddpm(&z1, 1, &z0, PredictionTarget::X0, &s, &xi).unwrap();
        assert!(out.max_abs_diff(&z0) < 1e-6);
    }

    #[test]
    fn ddpm_linearity_and_determinism() {
        let s = NoiseSchedule::linear(20, 0.01, 0.2).unwrap();
        let zero = Tensor::<f32>::zeros(&[3, 2]);
        let out = denoise_step_ddpm(&zero, 5, &zero, PredictionTarget::Epsilon, &s, &zero).unwrap();
        assert_eq!(out, zero);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let zt = Tensor::<f32>::randn(&[3, 2], 1.0, &mut rng);
        let pred = Tensor::<f32>::randn(&[3, 2], 1.0, &mut rng);
        let xi = Tensor::<f32>::randn(&[3, 2], 1.0, &mut rng);
        let a = denoise_step_ddpm(&zt, 5, &pred, PredictionTarget::Epsilon, &s, &xi).unwrap();
        let b = denoise_step_ddpm(&zt, 5, &pred, PredictionTarget::Epsilon, &s, &xi).unwrap();
        assert_eq!(a, b);
        assert!(denoise_step_ddpm(&zt, 0, &pred, PredictionTarget::Epsilon, &s, &xi).is_err());
        assert!(denoise_step_ddpm(&zt, 21, &pred, PredictionTarget::Epsilon, &s, &xi).is_err());
    }

    #[test]
    fn ddim_examples() {
        let s = NoiseSchedule::linear(50, 0.002, 0.4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z0 = Tensor::<f64>::randn(&[4, 2], 1.0, &mut rng);
        let eps = Tensor::<f64>::randn(&[4, 2], 1.0, &mut rng);
        let zt = forward_diffuse(&z0, 30, &eps, &s).unwrap();
        assert_eq!(denoise_step_ddim(&zt, 30, 30, &eps, PredictionTarget::Epsilon, &s).unwrap(), zt);
        let back = denoise_step_ddim(&zt, 30, 0, &eps, PredictionTarget::Epsilon, &s).unwrap();
        assert!(back.max_abs_diff(&z0) < 1e-6);
        let a = denoise_step_ddim(&zt, 30, 12, &eps, PredictionTarget::Epsilon, &s).unwrap();
        let b = denoise_step_ddim(&zt, 30, 12, &eps, PredictionTarget::Epsilon, &s).unwrap();
        assert_eq!(a, b);
        assert!(denoise_step_ddim(&zt, 30, 31, &eps, PredictionTarget::Epsilon, &s).is_err());
    }

    #[test]
    fn ddim_timesteps_cover_range() {
        assert_eq!(ddim_timesteps(50, 50), (0..=50).rev().collect::<Vec<_>>());
        let ts = ddim_timesteps(1000, 50);
        assert_eq!(ts.len(), 51);
        assert_eq!(ts[0], 1000);
        assert_eq!(*ts.last().unwrap(), 0);
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn prediction_target_parses() {
        assert_eq!("x0".parse::<PredictionTarget>().unwrap(), PredictionTarget::X0);
        assert!("v".parse::<PredictionTarget>().is_err());
        assert_eq!(serde_json::to_string(&PredictionTarget::Epsilon).unwrap(), "\"epsilon\"");
    }
}
