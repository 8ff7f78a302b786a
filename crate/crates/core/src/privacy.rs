//! Rényi-DP accounting for the Poisson-subsampled Gaussian mechanism.
//!
//! Orders are the integers 2..=256, where the subsampled Gaussian RDP has an
//! exact binomial expansion. Conversion to (ε, δ) uses the classic bound
//! `ε = min_α ε_α + log(1/δ)/(α − 1)`.

use crate::error::{invalid, Error, Result};

pub const MIN_ORDER: u32 = 2;
pub const MAX_ORDER: u32 = 256;

/// Bisection bracket for [`calibrate_sigma`].
pub const SIGMA_BRACKET: (f64, f64) = (0.3, 100.0);

/// An (ε, δ) budget.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrivacySpend {
    pub epsilon: f64,
    pub delta: f64,
}

impl PrivacySpend {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        if epsilon.is_nan() || epsilon < 0.0 {
            return Err(invalid(format!("epsilon must be >= 0, got {epsilon}")));
        }
        check_delta(delta)?;
        Ok(Self { epsilon, delta })
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(invalid(format!("delta must lie in (0, 1), got {delta}")));
    }
    Ok(())
}

/// `(order, ε_α)` pairs with strictly increasing orders.
#[derive(Clone, Debug, PartialEq)]
pub struct RdpCurve {
    pub points: Vec<(u32, f64)>,
}

impl RdpCurve {
    pub fn orders() -> impl Iterator<Item = u32> {
        MIN_ORDER..=MAX_ORDER
    }
}

/// Noise multiplier, Poisson sampling rate and step count of a training run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MechanismSpec {
    pub noise_multiplier: f64,
    pub sampling_rate: f64,
    pub steps: u64,
}

impl MechanismSpec {
    pub fn new(noise_multiplier: f64, sampling_rate: f64, steps: u64) -> Result<Self> {
        if noise_multiplier.is_nan() || noise_multiplier < 0.0 {
            return Err(invalid(format!(
                "noise multiplier must be >= 0, got {noise_multiplier}"
            )));
        }
        if !(sampling_rate > 0.0 && sampling_rate <= 1.0) {
            return Err(invalid(format!(
                "sampling rate must lie in (0, 1], got {sampling_rate}"
            )));
        }
        Ok(Self {
            noise_multiplier,
            sampling_rate,
            steps,
        })
    }

    /// Per-step curve over the integer order grid.
    pub fn step_curve(&self) -> RdpCurve {
        RdpCurve {
            points: RdpCurve::orders()
                .map(|a| {
                    let e = if self.noise_multiplier == 0.0 {
                        f64::INFINITY
                    } else {
                        subsampled_gaussian_rdp(self.noise_multiplier, self.sampling_rate, a)
                            .expect("validated")
                    };
                    (a, e)
                })
                .collect(),
        }
    }

    pub fn curve(&self) -> RdpCurve {
        compose(&self.step_curve(), self.steps)
    }

    /// `(ε, optimal order)` at `delta`.
    pub fn epsilon(&self, delta: f64) -> Result<(f64, u32)> {
        rdp_to_dp(&self.curve(), delta)
    }
}

/// RDP of the unsubsampled Gaussian mechanism with unit sensitivity: `α / (2σ²)`.
pub fn gaussian_rdp(sigma: f64, order: f64) -> Result<f64> {
    if !(sigma > 0.0) || !(order > 1.0) {
        return Err(invalid(format!(
            "gaussian_rdp needs sigma > 0 and order > 1, got sigma={sigma}, order={order}"
        )));
    }
    Ok(order / (2.0 * sigma * sigma))
}

fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        hi
    } else {
        hi + (lo - hi).exp().ln_1p()
    }
}

/// Exact integer-order RDP of the Poisson-subsampled Gaussian:
///
/// `ε_α = log Σ_k C(α,k) (1−q)^(α−k) q^k exp(k(k−1)/(2σ²)) / (α − 1)`,
/// accumulated in log space.
pub fn subsampled_gaussian_rdp(sigma: f64, q: f64, order: u32) -> Result<f64> {
    if !(sigma > 0.0) || !(q > 0.0 && q <= 1.0) || order < 2 {
        return Err(invalid(format!(
            "subsampled_gaussian_rdp needs sigma > 0, q in (0, 1], integer order >= 2; \
             got sigma={sigma}, q={q}, order={order}"
        )));
    }
    if q == 1.0 {
        return gaussian_rdp(sigma, order as f64);
    }
    let a = order as f64;
    let (log_q, log_1mq) = (q.ln(), (-q).ln_1p());
    let mut log_binom = 0.0f64;
    let mut acc = f64::NEG_INFINITY;
    for k in 0..=order {
        if k > 0 {
            log_binom += ((order - k + 1) as f64).ln() - (k as f64).ln();
        }
        let kf = k as f64;
        let term = log_binom
            + (a - kf) * log_1mq
            + kf * log_q
            + kf * (kf - 1.0) / (2.0 * sigma * sigma);
        acc = log_add(acc, term);
    }
    // The sum is >= 1 analytically; rounding can push the log slightly negative.
    Ok((acc / (a - 1.0)).max(0.0))
}

/// RDP composition over `steps` identical steps.
pub fn compose(step: &RdpCurve, steps: u64) -> RdpCurve {
    let s = steps as f64;
    RdpCurve {
        points: step
            .points
            .iter()
            .map(|&(a, e)| (a, if steps == 0 { 0.0 } else { e * s }))
            .collect(),
    }
}

/// `(ε, minimising order)` for the given δ.
pub fn rdp_to_dp(curve: &RdpCurve, delta: f64) -> Result<(f64, u32)> {
    check_delta(delta)?;
    let log_inv_delta = -delta.ln();
    curve
        .points
        .iter()
        .map(|&(a, e)| (e + log_inv_delta / (a as f64 - 1.0), a))
        .fold(None, |best: Option<(f64, u32)>, cand| match best {
            Some(b) if b.0 <= cand.0 => Some(b),
            _ => Some(cand),
        })
        .ok_or_else(|| invalid("rdp_to_dp: empty curve"))
}

/// Smallest-error noise multiplier in [`SIGMA_BRACKET`] meeting `target` for
/// `steps` steps at sampling rate `q`, by bisection on the monotone ε(σ).
pub fn calibrate_sigma(q: f64, steps: u64, target: PrivacySpend) -> Result<f64> {
    if !(target.epsilon > 0.0) {
        return Err(invalid("calibration target epsilon must be > 0"));
    }
    let eps_at = |sigma: f64| -> Result<f64> {
        Ok(MechanismSpec::new(sigma, q, steps)?.epsilon(target.delta)?.0)
    };
    let (mut lo, mut hi) = SIGMA_BRACKET;
    let tol = 1e-3 * target.epsilon;
    let (e_lo, e_hi) = (eps_at(lo)?, eps_at(hi)?);
    let unreachable = Error::CalibrationUnreachable {
        target: target.epsilon,
        low: lo,
        high: hi,
    };
    if e_hi > target.epsilon + tol || e_lo < target.epsilon - tol {
        return Err(unreachable);
    }
    if (e_lo - target.epsilon).abs() <= tol {
        return Ok(lo);
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let e = eps_at(mid)?;
        if (e - target.epsilon).abs() <= tol {
            return Ok(mid);
        }
        if e > target.epsilon {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_closed_form() {
        assert_eq!(gaussian_rdp(1.0, 2.0).unwrap(), 1.0);
        assert!((gaussian_rdp(1000.0, 2.0).unwrap() - 1e-6).abs() < 1e-18);
        assert!((gaussian_rdp(2.852, 8.0).unwrap() - 0.4918).abs() < 1e-4);
        assert!(gaussian_rdp(0.0, 2.0).is_err());
        assert!(gaussian_rdp(1.0, 1.0).is_err());
    }

    #[test]
    fn full_sampling_reduces_to_gaussian() {
        for a in [2u32, 5, 32] {
            let s = subsampled_gaussian_rdp(1.3, 1.0, a).unwrap();
            assert!((s - gaussian_rdp(1.3, a as f64).unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn vanishing_sampling_rate() {
        assert!(subsampled_gaussian_rdp(1.0, 1e-9, 2).unwrap() < 1e-12);
    }

    #[test]
    fn composition_is_linear() {
        let step = MechanismSpec::new(1.1, 0.01, 1).unwrap().step_curve();
        assert_eq!(compose(&step, 1), step);
        let two = compose(&step, 2);
        for (p, q) in step.points.iter().zip(&two.points) {
            assert_eq!(q.1, 2.0 * p.1);
        }
    }

    #[test]
    fn conversion_edge_cases() {
        let c = RdpCurve {
            points: vec![(2, 0.0)],
        };
        let (e, a) = rdp_to_dp(&c, (-1.0f64).exp()).unwrap();
        assert!((e - 1.0).abs() < 1e-12 && a == 2);
        let flat = RdpCurve {
            points: RdpCurve::orders().map(|a| (a, 0.0)).collect(),
        };
        let (e, a) = rdp_to_dp(&flat, 0.5).unwrap();
        assert_eq!(a, MAX_ORDER);
        assert!((e - 2f64.ln() / 255.0).abs() < 1e-15);
        assert!(rdp_to_dp(&RdpCurve { points: vec![] }, 0.5).is_err());
    }

    #[test]
    fn calibration_round_trip() {
        let target = PrivacySpend::new(3.0, 1e-5).unwrap();
        let sigma = calibrate_sigma(0.02, 500, target).unwrap();
        let (e, _) = MechanismSpec::new(sigma, 0.02, 500)
            .unwrap()
            .epsilon(1e-5)
            .unwrap();
        assert!((e - 3.0).abs() <= 3e-3, "{e}");
    }

    #[test]
    fn unreachable_target_reports_bracket() {
        let target = PrivacySpend::new(1e-6, 1e-5).unwrap();
        let err = calibrate_sigma(0.5, 10_000, target).unwrap_err().to_string();
        assert!(err.contains("0.3") && err.contains("100"), "{err}");
    }
}
