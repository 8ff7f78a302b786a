//! Independent oracles and harnesses shared by the integration tests.
#![allow(dead_code)]

use dpdm_core::numerics::{gradient, Bound, Graph, ParameterSet, Tensor, Var};
use dpdm_core::Result;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

/// Values with magnitude in `[0.1, 1]` and random sign: clear of ReLU's kink.
pub fn away_from_zero(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = r.random_range(0.1..1.0);
        if r.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Denominator floor for per-coordinate relative errors of near-zero gradients.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Largest per-coordinate relative error between autodiff and a sixth-order
/// central difference, over every coordinate of every tensor in `params`.
pub fn gradient_check<F>(params: &ParameterSet<f64>, build: F) -> f64
where
    F: Fn(&mut Graph<f64>, &Bound) -> Result<Var>,
{
    let (_, grads) = gradient(params, |g, p| build(g, p)).expect("autodiff");
    let eval = |ps: &ParameterSet<f64>| {
        let mut g = Graph::new();
        let b = g.bind(ps);
        let root = build(&mut g, &b).expect("forward");
        g.value(root).item().expect("scalar")
    };
    let h = 1e-3;
    let mut worst: f64 = 0.0;
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let len = params.get(&name).unwrap().len();
        for i in 0..len {
            let at = |delta: f64| {
                let mut p = params.clone();
                p.get_mut(&name).unwrap().data_mut()[i] += delta;
                eval(&p)
            };
            let numeric = (45.0 * (at(h) - at(-h)) - 9.0 * (at(2.0 * h) - at(-2.0 * h))
                + (at(3.0 * h) - at(-3.0 * h)))
                / (60.0 * h);
            let analytic = grads.get(&name).unwrap().data()[i];
            worst = worst.max(rel_error(analytic, numeric));
        }
    }
    worst
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// eigenvalues and the matrix whose columns are the eigenvectors.
pub fn jacobi_eigen(a: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i][j] * m[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k][p], v[k][q]);
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| m[i][i]).collect(), v)
}

pub fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    (0..n)
        .map(|i| (0..m).map(|j| (0..k).map(|l| a[i][l] * b[l][j]).sum()).collect())
        .collect()
}

fn sqrt_psd(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (vals, vecs) = jacobi_eigen(a);
    let n = a.len();
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| (0..n).map(|k| vecs[i][k] * vals[k].max(0.0).sqrt() * vecs[j][k]).sum())
                .collect()
        })
        .collect()
}

/// Fréchet distance via Jacobi, with the square root taken on the
/// `Σb^½ Σa Σb^½` ordering.
pub fn frechet_oracle(mu_a: &[f64], cov_a: &[Vec<f64>], mu_b: &[f64], cov_b: &[Vec<f64>]) -> f64 {
    let sb = sqrt_psd(cov_b);
    let inner = matmul(&matmul(&sb, cov_a), &sb);
    let (vals, _) = jacobi_eigen(&inner);
    let tr_sqrt: f64 = vals.iter().map(|v| v.max(0.0).sqrt()).sum();
    let mean: f64 = mu_a.iter().zip(mu_b).map(|(a, b)| (a - b) * (a - b)).sum();
    let tr: f64 = (0..mu_a.len()).map(|i| cov_a[i][i] + cov_b[i][i]).sum();
    mean + tr - 2.0 * tr_sqrt
}

/// Random SPD matrix `A Aᵀ + 0.1 I`.
pub fn random_spd(n: usize, r: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let a: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..n).map(|_| r.random_range(-1.0..1.0)).collect())
        .collect();
    let mut m = matmul(&a, &(0..n).map(|i| (0..n).map(|j| a[j][i]).collect()).collect::<Vec<_>>());
    for (i, row) in m.iter_mut().enumerate() {
        row[i] += 0.1;
    }
    m
}

/// Spearman ρ for lists without ties: `1 − 6Σd²/(n(n²−1))`, ranks by counting.
pub fn spearman_brute(a: &[f64], b: &[f64]) -> f64 {
    let rank = |v: &[f64], i: usize| 1 + v.iter().filter(|&&x| x < v[i]).count();
    let n = a.len() as f64;
    let d2: f64 = (0..a.len())
        .map(|i| {
            let d = rank(a, i) as f64 - rank(b, i) as f64;
            d * d
        })
        .sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}

/// RDP of the Poisson-subsampled Gaussian by direct numerical integration of
/// `E_{x~N(0,σ²)}[((1−q) + q·exp((2x−1)/(2σ²)))^α]`, in log space.
pub fn rdp_by_quadrature(sigma: f64, q: f64, alpha: u32) -> f64 {
    let a = alpha as f64;
    let (lo, hi) = (-60.0 * sigma, 60.0 * sigma + a);
    let steps = 400_000usize;
    let dx = (hi - lo) / steps as f64;
    let log_terms: Vec<f64> = (0..=steps)
        .map(|i| {
            let x = lo + i as f64 * dx;
            let log_ratio = (2.0 * x - 1.0) / (2.0 * sigma * sigma);
            // log((1 − q) + q·e^r), computed stably.
            let mix = if log_ratio > 0.0 {
                log_ratio + ((1.0 - q) * (-log_ratio).exp() + q).ln()
            } else {
                ((1.0 - q) + q * log_ratio.exp()).ln()
            };
            let log_density = -x * x / (2.0 * sigma * sigma)
                - (sigma * (2.0 * std::f64::consts::PI).sqrt()).ln();
            let w = if i == 0 || i == steps {
                0.5
            } else {
                1.0
            };
            a * mix + log_density + (w * dx).ln()
        })
        .collect();
    let m = log_terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_integral = m + log_terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln();
    log_integral / (a - 1.0)
}



/// Largest coordinate difference relative to the largest coordinate magnitude.
pub fn max_rel_diff(a: &ParameterSet<f64>, b: &ParameterSet<f64>) -> f64 {
    let (fa, fb) = (a.flatten(), b.flatten());
    assert_eq!(fa.len(), fb.len());
    let scale = fa.iter().chain(&fb).fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = fa.iter().zip(&fb).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}
pub mod grad_suite;
