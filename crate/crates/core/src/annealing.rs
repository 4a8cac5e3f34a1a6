//! Semi-deterministic inverse-temperature schedule.
//!
//! Each quantizer layer owns an [`AnnealingState`]. The ceiling `beta_max`
//! grows by `K * E_t`, where `E_t` is the gap between the hard and relaxed
//! quantization errors, and each step's `beta` is drawn uniformly below it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Default velocity factor.
pub const DEFAULT_VELOCITY: f64 = 15.0;

/// `| ||y_hard - y||^2 - ||y_soft - y||^2 |` over the whole batch.
pub fn quantization_gap(y: &Tensor, y_soft: &Tensor, y_hard: &Tensor) -> Result<f64> {
    let soft = y_soft.squared_distance(y)?;
    let hard = y_hard.squared_distance(y)?;
    Ok((hard - soft).abs())
}

#[derive(Clone, Debug)]
pub struct AnnealingState {
    step: u64,
    beta_max: f64,
    velocity: f64,
    beta: f64,
    rng: ChaCha8Rng,
}

impl AnnealingState {
    pub fn new(velocity: f64, seed: u64) -> Self {
        Self::resume(velocity, 1.0, seed)
    }

    /// Continues from an existing ceiling, e.g. when refining a trained
    /// layer. The first step returns 1 and keeps the ceiling.
    pub fn resume(velocity: f64, beta_max: f64, seed: u64) -> Self {
        Self {
            step: 0,
            beta_max: beta_max.max(1.0),
            velocity,
            beta: 1.0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn beta_max(&self) -> f64 {
        self.beta_max
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn velocity(&self) -> f64 {
        self.velocity
    }

    pub fn double_velocity(&mut self) {
        self.velocity *= 2.0;
    }

    /// Advances one training step with the latest gap and returns the
    /// inverse temperature to use.
    pub fn step(&mut self, gap: f64) -> Result<f64> {
        if !(gap >= 0.0) || !gap.is_finite() {
            return Err(Error::InvalidArgument(format!("quantization gap {gap} must be finite and >= 0")));
        }
        self.step += 1;
        if self.step == 1 {
            self.beta = 1.0;
            return Ok(1.0);
        }
        self.beta_max += self.velocity * gap;
        self.beta = self.rng.gen_range(1.0..=self.beta_max);
        Ok(self.beta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::{hard_quantize, soft_quantize_values, StanhLayer};

    #[test]
    fn gap_examples() {
        let y = Tensor::scalar(0.0);
        let s = Tensor::scalar(0.1);
        let h = Tensor::scalar(0.3);
        assert!((quantization_gap(&y, &s, &h).unwrap() - 0.08).abs() < 1e-15);
        assert_eq!(quantization_gap(&y, &h, &h).unwrap(), 0.0);
        let bad = Tensor::from_vec(vec![0.0, 1.0]);
        assert!(quantization_gap(&y, &bad, &h).is_err());
    }

    #[test]
    fn gap_shrinks_with_beta() {
        let layer = StanhLayer::init_uniform(9, -4.0, 4.0).unwrap();
        let y = Tensor::from_vec((0..200).map(|i| -4.3 + 0.0431 * i as f64).collect());
        let (hard, _) = hard_quantize(&y, &layer);
        let gap = |beta| quantization_gap(&y, &soft_quantize_values(&y, &layer, beta), &hard).unwrap();
        assert!(gap(100.0) <= gap(1.0));
    }

    #[test]
    fn first_step_is_one() {
        let mut s = AnnealingState::new(DEFAULT_VELOCITY, 3);
        assert_eq!(s.step(0.7).unwrap(), 1.0);
        assert_eq!(s.beta_max(), 1.0);
    }

    #[test]
    fn ceiling_update() {
        let mut s = AnnealingState::new(15.0, 3);
        s.step(0.0).unwrap();
        let beta = s.step(0.02).unwrap();
        assert!((s.beta_max() - 1.3).abs() < 1e-12);
        assert!((1.0..=1.3).contains(&beta));
        s.step(0.0).unwrap();
        assert!((s.beta_max() - 1.3).abs() < 1e-12);
    }

    #[test]
    fn negative_gap_rejected() {
        let mut s = AnnealingState::new(15.0, 3);
        assert!(s.step(-1.0).is_err());
        assert!(s.step(f64::NAN).is_err());
    }

    #[test]
    fn reproducible() {
        let gaps = [0.0, 0.3, 0.1, 2.0, 0.0, 0.5];
        let run = |seed| {
            let mut s = AnnealingState::new(15.0, seed);
            gaps.iter().map(|&e| s.step(e).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(11), run(11));
        assert_ne!(run(11), run(12));
    }
}
