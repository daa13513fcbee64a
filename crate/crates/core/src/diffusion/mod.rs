//! Denoising diffusion: noise schedule, forward corruption, the reverse
//! update and the ε-prediction networks.
//!
//! Indices follow the usual convention: `t` runs from 1 to `T`, and
//! `alpha_bar(0) = 1` so that `q_sample(x0, 0, ·) = x0`.

mod backbones;

pub use backbones::{sinusoidal_embedding, Backbone, Denoiser, DenoiserConfig, DenoiserOutput, Parameterization};

use fundus_nn::Tensor;
use ndarray::Zip;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, invalid, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: ScheduleKind,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            kind: ScheduleKind::Linear,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.beta_start, self.beta_end, self.kind)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if steps < 1 {
        return Err(invalid("schedule needs T >= 1"));
    }
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(invalid(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let beta = match kind {
        ScheduleKind::Linear if steps == 1 => vec![beta_start],
        ScheduleKind::Linear => (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect(),
    };
    NoiseSchedule::from_betas(beta)
}

impl NoiseSchedule {
    /// Any sequence of betas in (0, 1), `betas[0]` being β_1.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() || beta.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(invalid("every beta must lie in (0, 1)"));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len() + 1);
        alpha_bar.push(1.0);
        for a in &alpha {
            let prev = *alpha_bar.last().expect("seeded with 1");
            alpha_bar.push(prev * a);
        }
        Ok(NoiseSchedule { beta, alpha, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    /// β_t for 1 <= t <= T.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// ᾱ_t for 0 <= t <= T.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_t(&self, t: usize, allow_zero: bool) -> Result<()> {
        if t > self.steps() || (!allow_zero && t == 0) {
            let lo = if allow_zero { 0 } else { 1 };
            return Err(invalid(format!("t = {t} outside [{lo}, {}]", self.steps())));
        }
        Ok(())
    }
}

/// `x_t = sqrt(ᾱ_t) x0 + sqrt(1 - ᾱ_t) eps`, unclamped.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check_t(t, true)?;
    if x0.shape() != eps.shape() {
        return Err(invalid(format!("x0 {:?} vs eps {:?}", x0.shape(), eps.shape())));
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(Zip::from(x0).and(eps).map_collect(|&x, &e| a * x + b * e))
}

/// One reverse update
/// `(x - (1 - α_t) / sqrt(1 - ᾱ_t) * eps_theta) / sqrt(α_t) + sqrt(β_t) * eps`;
/// the last term is dropped when `noise_on` is false.
pub fn reverse_step(
    x: &Tensor,
    t: usize,
    eps_theta: &Tensor,
    schedule: &NoiseSchedule,
    eps: &Tensor,
    noise_on: bool,
) -> Result<Tensor> {
    schedule.check_t(t, false)?;
    if x.shape() != eps_theta.shape() || (noise_on && x.shape() != eps.shape()) {
        return Err(invalid("reverse_step: shape mismatch"));
    }
    let (alpha, ab) = (schedule.alpha(t), schedule.alpha_bar(t));
    let coef = (1.0 - alpha) / (1.0 - ab).sqrt();
    let inv = 1.0 / alpha.sqrt();
    let mut out = Zip::from(x).and(eps_theta).map_collect(|&x, &e| inv * (x - coef * e));
    if noise_on {
        let sigma = schedule.beta(t).sqrt();
        out.zip_mut_with(eps, |o, &e| *o += sigma * e);
    }
    Ok(out)
}

/// Mean squared error between predicted and true noise.
pub fn noise_mse_loss(eps_theta: &Tensor, eps: &Tensor) -> Result<f64> {
    if eps_theta.shape() != eps.shape() {
        return Err(invalid("noise_mse_loss: shape mismatch"));
    }
    ensure_finite("predicted noise", eps_theta.iter())?;
    ensure_finite("noise", eps.iter())?;
    Ok(Zip::from(eps_theta)
        .and(eps)
        .fold(0.0, |acc, &a, &b| acc + (a - b) * (a - b))
        / eps.len() as f64)
}

pub fn gaussian_like<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
}

/// Runs the reverse chain from `x_start` at `t = T` down to `t = 1`.
/// `eps_model(x_t, t)` predicts the noise in `x_t`. With `stochastic` the
/// `sqrt(β_t)` noise term is drawn from `rng` for every `t > 1`; otherwise
/// the chain is deterministic.
pub fn sample_restore<R, F>(
    x_start: &Tensor,
    mut eps_model: F,
    schedule: &NoiseSchedule,
    rng: &mut R,
    stochastic: bool,
) -> Result<Tensor>
where
    R: Rng + ?Sized,
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    let mut x = x_start.clone();
    let zeros = Tensor::zeros(x.raw_dim());
    for t in (1..=schedule.steps()).rev() {
        let eps_theta = eps_model(&x, t)?;
        let noise_on = stochastic && t > 1;
        let eps = if noise_on { gaussian_like(x.shape(), rng) } else { zeros.clone() };
        x = reverse_step(&x, t, &eps_theta, schedule, &eps, noise_on)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t1(v: f64) -> Tensor {
        Tensor::from_elem(IxDyn(&[1]), v)
    }

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1, 0.5, 0.5, ScheduleKind::Linear).unwrap();
        assert_eq!(s.betas(), &[0.5]);
        assert_eq!(s.alpha(1), 0.5);
        assert_eq!(s.alpha_bars(), &[1.0, 0.5]);
    }

    #[test]
    fn default_schedule_invariants() {
        let s = ScheduleConfig::default().build().unwrap();
        assert_eq!(s.steps(), 1000);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        let last = s.alpha_bar(1000);
        assert!(last > 0.0 && last < 0.01, "{last}");
        // independent evaluation of the product
        let direct: f64 = (0..1000).map(|i| 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0)).product();
        assert!((direct - last).abs() < 1e-15);
        for t in 0..1000 {
            assert!((s.alpha_bar(t) * s.alpha(t + 1) - s.alpha_bar(t + 1)).abs() < 1e-12);
        }
    }

    #[test]
    fn schedule_argument_errors() {
        assert!(make_schedule(0, 1e-4, 0.02, ScheduleKind::Linear).is_err());
        assert!(make_schedule(10, 0.0, 0.02, ScheduleKind::Linear).is_err());
        assert!(make_schedule(10, 0.03, 0.02, ScheduleKind::Linear).is_err());
        assert!(make_schedule(10, 0.01, 1.0, ScheduleKind::Linear).is_err());
    }

    #[test]
    fn q_sample_spot_values() {
        let s = NoiseSchedule::from_betas(vec![0.25]).unwrap();
        let x0 = Tensor::zeros(IxDyn(&[2, 2]));
        let eps = Tensor::ones(IxDyn(&[2, 2]));
        assert!(q_sample(&x0, 1, &eps, &s).unwrap().iter().all(|&v| v == 0.5));
        let x = Tensor::from_elem(IxDyn(&[3]), 0.7);
        assert_eq!(q_sample(&x, 0, &Tensor::ones(IxDyn(&[3])), &s).unwrap(), x);
        assert!(q_sample(&x, 2, &x, &s).is_err());
    }

    #[test]
    fn reverse_step_spot_values() {
        // α_2 = 0.99, ᾱ_2 = 0.9
        let s = NoiseSchedule::from_betas(vec![1.0 - 0.9 / 0.99, 0.01]).unwrap();
        assert!((s.alpha_bar(2) - 0.9).abs() < 1e-15);
        let out = reverse_step(&t1(1.0), 2, &t1(0.5), &s, &t1(0.0), false).unwrap();
        let expected = (1.0 - 0.01 / 0.1f64.sqrt() * 0.5) / 0.99f64.sqrt();
        assert!((out[[0]] - expected).abs() < 1e-12);
        assert!((out[[0]] - 0.989147).abs() < 1e-6);
        assert!(reverse_step(&t1(1.0), 0, &t1(0.5), &s, &t1(0.0), false).is_err());
    }

    #[test]
    fn one_step_identity() {
        let s = ScheduleConfig { steps: 50, ..ScheduleConfig::default() }.build().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = gaussian_like(&[3, 8, 8], &mut rng);
        let eps = gaussian_like(&[3, 8, 8], &mut rng);
        let x1 = q_sample(&x0, 1, &eps, &s).unwrap();
        let back = reverse_step(&x1, 1, &eps, &s, &eps, false).unwrap();
        assert!(back.iter().zip(x0.iter()).all(|(a, b)| (a - b).abs() < 1e-10));
    }

    #[test]
    fn noise_mse_values() {
        let a = Tensor::from_elem(IxDyn(&[4, 4]), 0.3);
        assert_eq!(noise_mse_loss(&a, &a).unwrap(), 0.0);
        assert!((noise_mse_loss(&(&a + 0.5), &a).unwrap() - 0.25).abs() < 1e-15);
        let mut nan = a.clone();
        nan[[1, 1]] = f64::NAN;
        assert!(noise_mse_loss(&nan, &a).is_err());
    }

    #[test]
    fn one_step_chain_is_one_reverse_step() {
        let s = NoiseSchedule::from_betas(vec![0.3]).unwrap();
        let x = t1(0.8);
        let eps_theta = t1(-0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let chain = sample_restore(&x, |_, _| Ok(eps_theta.clone()), &s, &mut rng, true).unwrap();
        let step = reverse_step(&x, 1, &eps_theta, &s, &t1(0.0), false).unwrap();
        assert_eq!(chain, step);
    }
}
