use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::data::LabeledImageSet;
use crate::error::{invalid, Error, Result};
use crate::eval::classifier::TrainedClassifier;

/// Ridge added to covariances estimated from fewer than `F + 1` samples.
pub const COVARIANCE_RIDGE: f64 = 1e-6;

/// Frozen classifier whose penultimate activations serve as the embedding.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    pub classifier: TrainedClassifier,
}

impl FeatureExtractor {
    pub fn new(classifier: TrainedClassifier) -> Self {
        Self { classifier }
    }

    pub fn dim(&self) -> usize {
        self.classifier.arch.feature_dim
    }

    pub fn embed(&self, data: &LabeledImageSet) -> Result<Vec<Vec<f64>>> {
        self.classifier.embed(data)
    }
}

/// Mean and covariance of a set of feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianFit {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// Set when the covariance needed the ridge because samples were scarce.
    pub regularized: bool,
}

impl GaussianFit {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::ShapeMismatch {
                op: "gaussian_fit",
                left: vec![mean.len()],
                right: vec![cov.nrows(), cov.ncols()],
            });
        }
        let cov = (&cov + cov.transpose()) * 0.5;
        Ok(Self {
            mean,
            cov,
            regularized: false,
        })
    }

    /// Unbiased sample covariance; ridge-regularised when `n < F + 1`.
    pub fn fit(features: &[Vec<f64>]) -> Result<Self> {
        let n = features.len();
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        let f = features[0].len();
        if features.iter().any(|v| v.len() != f) {
            return Err(invalid("feature vectors have differing lengths"));
        }
        let x = DMatrix::from_fn(n, f, |i, j| features[i][j]);
        let mean = DVector::from_fn(f, |j, _| x.column(j).mean());
        let mut centered = x;
        for j in 0..f {
            let m = mean[j];
            centered.column_mut(j).add_scalar_mut(-m);
        }
        let denom = n.saturating_sub(1).max(1) as f64;
        let mut cov = centered.transpose() * &centered / denom;
        let regularized = n < f + 1;
        if regularized {
            cov += DMatrix::identity(f, f) * COVARIANCE_RIDGE;
        }
        let mut fit = Self::new(mean, cov)?;
        fit.regularized = regularized;
        Ok(fit)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Square root of a symmetric PSD matrix; negative eigenvalues are clipped to 0.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let d = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// `‖μa − μb‖² + Tr(Σa + Σb − 2(ΣaΣb)^½)`.
///
/// The trace of `(ΣaΣb)^½` is taken from the eigenvalues of the symmetric
/// matrix `Σa^½ Σb Σa^½`, which has the same spectrum.
pub fn frechet_distance(a: &GaussianFit, b: &GaussianFit) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            op: "frechet_distance",
            left: vec![a.dim()],
            right: vec![b.dim()],
        });
    }
    let diff = &a.mean - &b.mean;
    let sa = psd_sqrt(&a.cov);
    let inner = &sa * &b.cov * &sa;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    let d = diff.norm_squared() + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt;
    Ok(d.max(0.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FidReport {
    pub score: f64,
    /// Per-class distances; `None` where a class is missing from either set.
    pub per_class: Vec<Option<f64>>,
    /// Some fit (overall or per-class) had fewer than `F + 1` samples.
    pub regularized: bool,
}

fn class_rows(features: &[Vec<f64>], labels: &[usize], class: usize) -> Vec<Vec<f64>> {
    features
        .iter()
        .zip(labels)
        .filter(|(_, &y)| y == class)
        .map(|(f, _)| f.clone())
        .collect()
}

/// Fréchet distance between the embeddings of `real` and `synth`, overall
/// and per class.
pub fn fid_like_score(
    real: &LabeledImageSet,
    synth: &LabeledImageSet,
    extractor: &FeatureExtractor,
) -> Result<FidReport> {
    if real.is_empty() || synth.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if real.image_shape() != synth.image_shape() {
        return Err(Error::ShapeMismatch {
            op: "fid_like_score",
            left: real.image_shape().to_vec(),
            right: synth.image_shape().to_vec(),
        });
    }
    let fr = extractor.embed(real)?;
    let fs = extractor.embed(synth)?;
    let a = GaussianFit::fit(&fr)?;
    let b = GaussianFit::fit(&fs)?;
    let mut regularized = a.regularized || b.regularized;
    let score = frechet_distance(&a, &b)?;
    let classes = real.num_classes.max(synth.num_classes);
    let mut per_class = Vec::with_capacity(classes);
    for c in 0..classes {
        let rc = class_rows(&fr, &real.labels, c);
        let sc = class_rows(&fs, &synth.labels, c);
        if rc.is_empty() || sc.is_empty() {
            per_class.push(None);
            continue;
        }
        let (ga, gb) = (GaussianFit::fit(&rc)?, GaussianFit::fit(&sc)?);
        regularized |= ga.regularized || gb.regularized;
        per_class.push(Some(frechet_distance(&ga, &gb)?));
    }
    Ok(FidReport {
        score,
        per_class,
        regularized,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fit(mean: &[f64], cov: &[f64]) -> GaussianFit {
        let n = mean.len();
        GaussianFit::new(
            DVector::from_column_slice(mean),
            DMatrix::from_row_slice(n, n, cov),
        )
        .unwrap()
    }

    #[test]
    fn identical_fits_are_at_distance_zero() {
        let a = fit(&[0.3, -1.0], &[2.0, 0.5, 0.5, 1.0]);
        assert!(frechet_distance(&a, &a).unwrap() < 1e-9);
    }

    #[test]
    fn one_dimensional_cases() {
        let d = frechet_distance(&fit(&[0.0], &[1.0]), &fit(&[1.0], &[1.0])).unwrap();
        assert!((d - 1.0).abs() < 1e-12);
        // (σa − σb)² for variances 4 and 1.
        let d = frechet_distance(&fit(&[0.0], &[4.0]), &fit(&[0.0], &[1.0])).unwrap();
        assert!((d - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        assert!(frechet_distance(&fit(&[0.0], &[1.0]), &fit(&[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0])).is_err());
    }

    #[test]
    fn scarce_samples_are_regularized() {
        let f = GaussianFit::fit(&[vec![1.0, 2.0], vec![3.0, 5.0]]).unwrap();
        assert!(f.regularized);
        assert!((f.cov[(0, 0)] - (2.0 + COVARIANCE_RIDGE)).abs() < 1e-12);
        let g = GaussianFit::fit(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!(!g.regularized);
    }
}
