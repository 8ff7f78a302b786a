use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::{Domain, LabeledImageSet, Split};
use crate::diffusion::model::DenoiserModel;
use crate::diffusion::schedule::{forward_noise, NoiseSchedule};
use crate::error::Result;
use crate::numerics::{ParameterSet, Real, Tensor};

/// Anything that predicts the noise component of a batch `x_t: [N, ...]`.
pub trait NoisePredictor<T: Real> {
    fn predict_noise(&self, x_t: &Tensor<T>, timesteps: &[usize], labels: &[usize])
        -> Result<Tensor<T>>;
}

/// A denoiser bound to a parameter set.
pub struct Conditioned<'a, T> {
    pub model: &'a DenoiserModel,
    pub params: &'a ParameterSet<T>,
}

impl<T: Real> NoisePredictor<T> for Conditioned<'_, T> {
    fn predict_noise(
        &self,
        x_t: &Tensor<T>,
        timesteps: &[usize],
        labels: &[usize],
    ) -> Result<Tensor<T>> {
        self.model.predict(self.params, x_t, timesteps, labels)
    }
}

/// `‖eps − ε(x_t, t, y)‖²` for one draw, with any predictor.
pub fn single_draw_loss<T: Real, P: NoisePredictor<T> + ?Sized>(
    predictor: &P,
    schedule: &NoiseSchedule,
    x0: &Tensor<T>,
    label: usize,
    t: usize,
    eps: &Tensor<T>,
) -> Result<T> {
    let xt = forward_noise(schedule, x0, t, eps)?;
    let mut shape = vec![1];
    shape.extend_from_slice(x0.shape());
    let pred = predictor.predict_noise(&xt.reshape(&shape)?, &[t], &[label])?;
    Ok(pred
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&p, &e)| (e - p) * (e - p))
        .sum())
}

fn gaussian<T: Real, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.sample::<f64, _>(StandardNormal)))
}

/// Ancestral sampling with reverse variance β_t, one image per label.
///
/// Starts from `x_T ~ N(0, I)` and applies
/// `x_{t−1} = (x_t − β_t/√(1−ᾱ_t)·ε(x_t, t)) / √α_t + √β_t·z` for
/// `t = T..1` (`z = 0` at `t = 1`), then clamps to `[−1, 1]`.
pub fn ancestral_sample<T: Real, P: NoisePredictor<T> + ?Sized, R: Rng + ?Sized>(
    predictor: &P,
    schedule: &NoiseSchedule,
    image_shape: &[usize],
    labels: &[usize],
    rng: &mut R,
) -> Result<Tensor<T>> {
    let mut shape = vec![labels.len()];
    shape.extend_from_slice(image_shape);
    let mut x: Tensor<T> = gaussian(&shape, rng);
    for t in (1..=schedule.steps()).rev() {
        let beta = schedule.beta(t)?;
        let ab = schedule.alpha_bar(t)?;
        let ts = vec![t; labels.len()];
        let eps = predictor.predict_noise(&x, &ts, labels)?;
        let inv_sqrt_alpha = T::of(1.0 / (1.0 - beta).sqrt());
        let coef = T::of(beta / (1.0 - ab).sqrt());
        let sigma = T::of(beta.sqrt());
        let data = x.data_mut();
        for (v, &e) in data.iter_mut().zip(eps.data()) {
            *v = inv_sqrt_alpha * (*v - coef * e);
        }
        if t > 1 {
            for v in data.iter_mut() {
                *v += sigma * T::of(rng.sample::<f64, _>(StandardNormal));
            }
        }
    }
    Ok(x.map(|v| v.max(-T::one()).min(T::one())))
}

/// `n` synthetic images from a trained denoiser, generated in chunks.
///
/// With `balanced`, labels cycle through the classes (`i % classes`);
/// otherwise they are drawn uniformly.
pub fn sample_dataset<T: Real, R: Rng + ?Sized>(
    model: &DenoiserModel,
    params: &ParameterSet<T>,
    schedule: &NoiseSchedule,
    n: usize,
    balanced: bool,
    rng: &mut R,
) -> Result<LabeledImageSet> {
    let a = &model.arch;
    let labels: Vec<usize> = (0..n)
        .map(|i| {
            if balanced {
                i % a.num_classes
            } else {
                rng.random_range(0..a.num_classes)
            }
        })
        .collect();
    let predictor = Conditioned { model, params };
    let shape = [a.height, a.width, a.channels];
    let mut data = Vec::with_capacity(n * a.pixels());
    for chunk in labels.chunks(256) {
        let x = ancestral_sample(&predictor, schedule, &shape, chunk, rng)?;
        data.extend(x.data().iter().map(|v| v.as_f64() as f32));
    }
    let images = Tensor::new(vec![n, a.height, a.width, a.channels], data)?;
    LabeledImageSet::new(images, labels, a.num_classes, Domain::Finetune, Split::Train)
}
