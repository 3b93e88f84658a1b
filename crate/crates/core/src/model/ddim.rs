//! Deterministic (eta = 0) DDIM sampling over a linear beta schedule.
//!
//! Sampler steps are numbered `1..=steps` from the noisiest. Step `s` works
//! on the training timestep `(steps - s) * ratio + 1` and moves the latent to
//! the next step's timestep, or to a clean sample (alpha bar = 1) after the
//! last step.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const TRAIN_TIMESTEPS: usize = 1000;
pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct DdimSchedule {
    steps: usize,
    step_ratio: usize,
    alphas_cumprod: Vec<f64>,
}

impl DdimSchedule {
    pub fn linear(steps: usize) -> Result<Self> {
        if steps == 0 || steps > TRAIN_TIMESTEPS {
            return Err(Error::Input(format!(
                "sampler steps must be in 1..={TRAIN_TIMESTEPS}, got {steps}"
            )));
        }
        let mut alphas_cumprod = Vec::with_capacity(TRAIN_TIMESTEPS);
        let mut acc = 1.0;
        for k in 0..TRAIN_TIMESTEPS {
            let beta = BETA_START + (BETA_END - BETA_START) * k as f64 / (TRAIN_TIMESTEPS - 1) as f64;
            acc *= 1.0 - beta;
            alphas_cumprod.push(acc);
        }
        Ok(Self {
            steps,
            step_ratio: TRAIN_TIMESTEPS / steps,
            alphas_cumprod,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    fn check(&self, step: usize) -> Result<()> {
        if step == 0 || step > self.steps {
            return Err(Error::Contract(format!(
                "sampler step {step} outside 1..={}",
                self.steps
            )));
        }
        Ok(())
    }

    pub fn train_timestep(&self, step: usize) -> Result<usize> {
        self.check(step)?;
        Ok((self.steps - step) * self.step_ratio + 1)
    }

    pub fn alpha_bar(&self, step: usize) -> Result<f64> {
        Ok(self.alphas_cumprod[self.train_timestep(step)?])
    }

    /// Alpha bar the latent is moved to by step `step`.
    pub fn alpha_bar_next(&self, step: usize) -> Result<f64> {
        self.check(step)?;
        if step == self.steps {
            Ok(1.0)
        } else {
            self.alpha_bar(step + 1)
        }
    }
}

/// Noisy latent `[F, C, h, w]` plus the index of the next timestep to run
/// (`steps - s` for sampler step `s`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    pub z: Tensor,
    pub timestep_index: usize,
}

impl LatentState {
    /// Standard-normal starting latent for a run of `steps` steps.
    pub fn from_seed(shape: &[usize], steps: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            z: Tensor::randn(shape, 1.0, &mut rng),
            timestep_index: steps.saturating_sub(1),
        }
    }

    /// Sampler step this latent is waiting for.
    pub fn step(&self, schedule: &DdimSchedule) -> usize {
        schedule.steps() - self.timestep_index
    }
}

/// `x0 = (z - sqrt(1 - a) eps) / sqrt(a)`.
pub fn predict_x0(z: &Tensor, noise_pred: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    let (sa, sb) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    z.zip_map(noise_pred, "predict_x0", |zv, e| (zv - sb * e) / sa)
}

/// One deterministic DDIM update for sampler step `step`.
pub fn ddim_step(
    latent: &LatentState,
    noise_pred: &Tensor,
    step: usize,
    schedule: &DdimSchedule,
) -> Result<LatentState> {
    let a_t = schedule.alpha_bar(step)?;
    let a_next = schedule.alpha_bar_next(step)?;
    if latent.step(schedule) != step {
        return Err(Error::Contract(format!(
            "latent is at step {}, asked to run step {step}",
            latent.step(schedule)
        )));
    }
    if latent.z.shape() != noise_pred.shape() {
        return Err(Error::dim("ddim_step", latent.z.shape(), noise_pred.shape()));
    }
    let x0 = predict_x0(&latent.z, noise_pred, a_t)?;
    let (sa, sb) = (a_next.sqrt(), (1.0 - a_next).sqrt());
    let z = x0.zip_map(noise_pred, "ddim_step", |x, e| sa * x + sb * e)?;
    Ok(LatentState {
        z,
        timestep_index: latent.timestep_index.saturating_sub(1),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_indexing() {
        let s = DdimSchedule::linear(50).unwrap();
        assert_eq!(s.train_timestep(1).unwrap(), 981);
        assert_eq!(s.train_timestep(50).unwrap(), 1);
        assert_eq!(s.alpha_bar_next(50).unwrap(), 1.0);
        assert!(s.alpha_bar(1).unwrap() < s.alpha_bar(2).unwrap());
        assert!(matches!(s.alpha_bar(0), Err(Error::Contract(_))));
        assert!(s.alpha_bar(51).is_err());
        assert!(DdimSchedule::linear(0).is_err());
    }

    #[test]
    fn zero_noise_prediction_rescales_analytically() {
        let s = DdimSchedule::linear(50).unwrap();
        let start = LatentState::from_seed(&[2, 3, 4, 4], 50, 7);
        let zero = Tensor::zeros(start.z.shape());
        let mut z = start.clone();
        for step in 1..=50 {
            z = ddim_step(&z, &zero, step, &s).unwrap();
        }
        // with eps = 0 every step multiplies by sqrt(a_next / a_t); the product telescopes
        let factor = (1.0 / s.alpha_bar(1).unwrap()).sqrt();
        let expected = start.z.scale(factor);
        let rel = z.z.max_abs_diff(&expected).unwrap() / expected.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(rel < 1e-12, "{rel}");
    }

    #[test]
    fn predicted_x0_is_preserved_by_a_step() {
        let s = DdimSchedule::linear(50).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let latent = LatentState {
            z: Tensor::randn(&[2, 2, 3, 3], 1.0, &mut rng),
            timestep_index: 50 - 12,
        };
        let eps = Tensor::randn(&[2, 2, 3, 3], 1.0, &mut rng);
        let before = predict_x0(&latent.z, &eps, s.alpha_bar(12).unwrap()).unwrap();
        let next = ddim_step(&latent, &eps, 12, &s).unwrap();
        assert_eq!(next.timestep_index, 50 - 13);
        let after = predict_x0(&next.z, &eps, s.alpha_bar(13).unwrap()).unwrap();
        assert!(before.max_abs_diff(&after).unwrap() < 1e-10);
    }

    #[test]
    fn step_mismatch_is_a_contract_error() {
        let s = DdimSchedule::linear(10).unwrap();
        let latent = LatentState::from_seed(&[1, 1, 2, 2], 10, 0);
        let eps = Tensor::zeros(latent.z.shape());
        assert!(matches!(ddim_step(&latent, &eps, 2, &s), Err(Error::Contract(_))));
        assert!(ddim_step(&latent, &Tensor::zeros(&[1]), 1, &s).is_err());
    }

    #[test]
    fn deterministic() {
        let s = DdimSchedule::linear(50).unwrap();
        let a = LatentState::from_seed(&[2, 2, 4, 4], 50, 11);
        let b = LatentState::from_seed(&[2, 2, 4, 4], 50, 11);
        assert_eq!(a, b);
        let eps = a.z.scale(0.3);
        assert_eq!(ddim_step(&a, &eps, 1, &s).unwrap(), ddim_step(&b, &eps, 1, &s).unwrap());
    }
}
