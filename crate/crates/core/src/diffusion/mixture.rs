use rand::Rng;

use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixtureComponent {
    pub weight: f64,
    pub lower: usize,
    pub upper: usize,
}

/// Mixture of discrete uniforms `Σ w_i U[l_i, u_i]` over timesteps, with
/// ordered, non-overlapping-interior components.
#[derive(Clone, Debug, PartialEq)]
pub struct TimestepMixture {
    components: Vec<MixtureComponent>,
    max_timestep: usize,
}

impl TimestepMixture {
    pub fn new(components: Vec<MixtureComponent>, max_timestep: usize) -> Result<Self> {
        if components.is_empty() {
            return Err(invalid("timestep mixture needs at least one component"));
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 || components.iter().any(|c| !(c.weight >= 0.0)) {
            return Err(invalid(format!(
                "mixture weights must be non-negative and sum to 1, got {total}"
            )));
        }
        for (i, c) in components.iter().enumerate() {
            if c.lower > c.upper {
                return Err(invalid(format!(
                    "component {i}: lower {} > upper {}",
                    c.lower, c.upper
                )));
            }
            if i > 0 && components[i - 1].upper > c.lower {
                return Err(invalid(format!(
                    "component {i} starts at {} before previous upper {}",
                    c.lower,
                    components[i - 1].upper
                )));
            }
        }
        let last = components.last().expect("non-empty").upper;
        if last > max_timestep {
            return Err(invalid(format!(
                "mixture upper bound {last} exceeds T = {max_timestep}"
            )));
        }
        Ok(Self {
            components,
            max_timestep,
        })
    }

    /// Builds from weights and the shared boundaries `l_1, u_1 = l_2, ..., u_K`.
    pub fn from_boundaries(weights: &[f64], bounds: &[usize], max_timestep: usize) -> Result<Self> {
        if bounds.len() != weights.len() + 1 {
            return Err(invalid(format!(
                "{} weights need {} boundaries, got {}",
                weights.len(),
                weights.len() + 1,
                bounds.len()
            )));
        }
        let comps = weights
            .iter()
            .enumerate()
            .map(|(i, &w)| MixtureComponent {
                weight: w,
                lower: bounds[i],
                upper: bounds[i + 1],
            })
            .collect();
        Self::new(comps, max_timestep)
    }

    pub fn uniform(max_timestep: usize) -> Self {
        Self::from_boundaries(&[1.0], &[0, max_timestep], max_timestep).expect("valid")
    }

    /// 0.015 / 0.785 / 0.2 over [0, 30] / [30, 600] / [600, 1000].
    pub fn natural_images() -> Self {
        Self::from_boundaries(&[0.015, 0.785, 0.2], &[0, 30, 600, 1000], 1000).expect("valid")
    }

    /// 0.05 / 0.9 / 0.05 over [0, 200] / [200, 800] / [800, 1000].
    pub fn digits() -> Self {
        Self::from_boundaries(&[0.05, 0.9, 0.05], &[0, 200, 800, 1000], 1000).expect("valid")
    }

    /// Same weights with bounds mapped proportionally onto `0..=max_timestep`.
    pub fn rescaled(&self, max_timestep: usize) -> Result<Self> {
        let s = max_timestep as f64 / self.max_timestep as f64;
        let comps = self
            .components
            .iter()
            .map(|c| MixtureComponent {
                weight: c.weight,
                lower: (c.lower as f64 * s).round() as usize,
                upper: (c.upper as f64 * s).round() as usize,
            })
            .collect();
        Self::new(comps, max_timestep)
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    pub fn max_timestep(&self) -> usize {
        self.max_timestep
    }

    /// Picks component `i` with probability `w_i`, then a uniform integer in
    /// `[l_i, u_i]`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = self.components.last().expect("non-empty");
        for c in &self.components {
            acc += c.weight;
            if u < acc && c.weight > 0.0 {
                chosen = c;
                break;
            }
        }
        rng.random_range(chosen.lower..=chosen.upper)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn invariants_are_enforced() {
        assert!(TimestepMixture::from_boundaries(&[0.5, 0.4], &[0, 5, 10], 10).is_err());
        assert!(TimestepMixture::new(
            vec![
                MixtureComponent { weight: 0.5, lower: 0, upper: 6 },
                MixtureComponent { weight: 0.5, lower: 5, upper: 10 },
            ],
            10
        )
        .is_err());
        assert!(TimestepMixture::from_boundaries(&[1.0], &[0, 11], 10).is_err());
    }

    #[test]
    fn degenerate_mixture_covers_full_range() {
        let m = TimestepMixture::uniform(4);
        let mut rng = stream(3, Stream::Timestep);
        let mut seen = [0usize; 5];
        for _ in 0..5000 {
            seen[m.sample(&mut rng)] += 1;
        }
        assert!(seen.iter().all(|&c| c > 800), "{seen:?}");
    }

    #[test]
    fn rescaling_keeps_weights() {
        let m = TimestepMixture::natural_images().rescaled(100).unwrap();
        let b: Vec<_> = m.components().iter().map(|c| (c.lower, c.upper)).collect();
        assert_eq!(b, vec![(0, 3), (3, 60), (60, 100)]);
        assert_eq!(m.components()[1].weight, 0.785);
    }
}
