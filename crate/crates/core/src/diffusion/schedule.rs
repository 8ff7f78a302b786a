use crate::error::{invalid, Error, Result};
use crate::numerics::{Real, Tensor};

/// β_t and ᾱ_t = Π_{s≤t}(1 − β_s) for t = 1..=T (stored 0-based).
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// β linearly spaced from `beta_start` to `beta_end`, endpoints included.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(invalid("schedule needs at least one timestep"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(invalid(format!(
                "linear schedule needs 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let beta: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let mut acc = 1.0;
        let alpha_bar = beta
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { beta, alpha_bar })
    }

    /// The standard 1000-step schedule with β ∈ [1e-4, 0.02].
    pub fn standard() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("valid constants")
    }

    /// `steps`-step linear schedule with the standard endpoints scaled by
    /// `1000 / steps`, which keeps ᾱ_T near zero for short chains.
    pub fn scaled(steps: usize) -> Result<Self> {
        let s = 1000.0 / steps.max(1) as f64;
        Self::linear(steps, 1e-4 * s, (0.02 * s).min(0.999))
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::TimestepOutOfRange {
                t,
                max: self.steps(),
            });
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.beta[self.check(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bar[self.check(t)?])
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }
}

/// `√ᾱ·x0 + √(1 − ᾱ)·eps` for an explicit ᾱ.
pub fn noise_with_alpha_bar<T: Real>(alpha_bar: f64, x0: &Tensor<T>, eps: &Tensor<T>) -> Result<Tensor<T>> {
    if x0.shape() != eps.shape() {
        return Err(Error::ShapeMismatch {
            op: "forward_noise",
            left: x0.shape().to_vec(),
            right: eps.shape().to_vec(),
        });
    }
    let a = T::of(alpha_bar.sqrt());
    let b = T::of((1.0 - alpha_bar).sqrt());
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &e)| a * x + b * e)
        .collect();
    Tensor::new(x0.shape().to_vec(), data)
}

/// Forward-process sample `x_t` for timestep `t` in `1..=T`.
pub fn forward_noise<T: Real>(
    schedule: &NoiseSchedule,
    x0: &Tensor<T>,
    t: usize,
    eps: &Tensor<T>,
) -> Result<Tensor<T>> {
    noise_with_alpha_bar(schedule.alpha_bar(t)?, x0, eps)
}
