//! Private optimisation of the denoiser.
//!
//! Each example contributes the mean gradient over `K` augmented views
//! (image transform, timestep, noise draw), clipped to `C` as a whole. The
//! clipped contributions are summed, perturbed with `N(0, σ²C²)` per
//! coordinate and divided by the nominal batch size `B`.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

pub use crate::data::AugmentationPolicy;
use crate::data::{augment, LabeledImageSet};
use crate::diffusion::{DenoiserModel, EmaTracker, NoiseSchedule, TimestepMixture};
use crate::error::{invalid, Error, Result};
use crate::numerics::{gradient, Checkpoint, Graph, ParameterSet, Real, Tensor};
use crate::optim::{Optimizer, OptimizerKind};
use crate::privacy::{MechanismSpec, RdpCurve};
use crate::rng::{self, Stream, StreamRng, TrainStreams};

#[derive(Clone, Debug, PartialEq)]
pub struct DpTrainConfig {
    /// Per-example clipping bound; `f64::INFINITY` disables clipping.
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    /// Expected (Poisson) batch size, also the gradient normaliser.
    pub batch_size: usize,
    /// Examples processed per accumulation slice.
    pub microbatch_size: usize,
    pub steps: usize,
    /// Augmentation multiplicity `K`.
    pub augmult: usize,
    pub optimizer: OptimizerKind,
    pub ema_decay: f64,
    pub delta: f64,
    /// Stop before any step that would exceed this ε.
    pub max_epsilon: Option<f64>,
}

impl DpTrainConfig {
    /// Non-private configuration: no clipping, no noise.
    pub fn non_private(batch_size: usize, steps: usize, optimizer: OptimizerKind) -> Self {
        Self {
            clip_norm: f64::INFINITY,
            noise_multiplier: 0.0,
            batch_size,
            microbatch_size: batch_size,
            steps,
            augmult: 1,
            optimizer,
            ema_decay: 0.999,
            delta: 1e-5,
            max_epsilon: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.clip_norm > 0.0) {
            return Err(invalid(format!("clip_norm must be > 0, got {}", self.clip_norm)));
        }
        if !(self.noise_multiplier >= 0.0) || !self.noise_multiplier.is_finite() {
            return Err(invalid(format!(
                "noise_multiplier must be finite and >= 0, got {}",
                self.noise_multiplier
            )));
        }
        if self.noise_multiplier > 0.0 && !self.clip_norm.is_finite() {
            return Err(invalid("noise requires a finite clip_norm"));
        }
        if self.batch_size == 0 || self.microbatch_size == 0 || self.microbatch_size > self.batch_size {
            return Err(invalid(format!(
                "need 1 <= microbatch_size ({}) <= batch_size ({})",
                self.microbatch_size, self.batch_size
            )));
        }
        if self.augmult == 0 {
            return Err(invalid("augmult must be at least 1"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(invalid(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(invalid("ema_decay must lie in [0, 1]"));
        }
        self.optimizer.validate()
    }

    pub fn is_private(&self) -> bool {
        self.clip_norm.is_finite() || self.noise_multiplier > 0.0
    }
}

/// Everything except data and seed that a training run needs.
#[derive(Clone, Debug)]
pub struct TrainSetup {
    pub model: DenoiserModel,
    pub schedule: NoiseSchedule,
    pub mixture: TimestepMixture,
    pub policy: AugmentationPolicy,
    pub config: DpTrainConfig,
}

impl TrainSetup {
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.policy.validate(self.config.augmult)?;
        if self.mixture.components().last().map(|c| c.upper) > Some(self.schedule.steps()) {
            return Err(invalid("timestep mixture exceeds the schedule length"));
        }
        Ok(())
    }
}

/// One augmented view of an example.
#[derive(Clone, Debug, PartialEq)]
pub struct Draw<T> {
    /// `[H, W, C]`.
    pub image: Tensor<T>,
    pub timestep: usize,
    pub eps: Tensor<T>,
}

/// `min(1, C/‖v‖)·v` over the flattened vector.
pub fn clip<T: Real>(v: &ParameterSet<T>, clip_norm: f64) -> ParameterSet<T> {
    let mut out = v.clone();
    clip_in_place(&mut out, clip_norm);
    out
}

/// Clips in place and returns the resulting norm.
pub fn clip_in_place<T: Real>(v: &mut ParameterSet<T>, clip_norm: f64) -> f64 {
    let norm = v.l2_norm().as_f64();
    if norm > clip_norm && clip_norm.is_finite() {
        v.scale(T::of(clip_norm / norm));
        v.l2_norm().as_f64()
    } else {
        norm
    }
}

fn gaussian_tensor<T: Real>(shape: &[usize], rng: &mut StreamRng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.sample::<f64, _>(StandardNormal)))
}

/// Draws `k` views of `image`. Timesteps drawn as 0 are mapped to 1, the
/// first step of the chain.
pub fn draw_views<T: Real>(
    image: &Tensor<T>,
    policy: &AugmentationPolicy,
    k: usize,
    mixture: &TimestepMixture,
    streams: &mut TrainStreams,
) -> Vec<Draw<T>> {
    let shared_t = mixture.sample(&mut streams.timestep).max(1);
    (0..k)
        .map(|i| {
            let timestep = if policy.resample_timesteps && i > 0 {
                mixture.sample(&mut streams.timestep).max(1)
            } else {
                shared_t
            };
            Draw {
                image: augment(image, policy, &mut streams.augment),
                timestep,
                eps: gaussian_tensor(image.shape(), &mut streams.eps),
            }
        })
        .collect()
}

/// Mean loss and mean gradient over the given views of one example, from a
/// single batched backward pass.
pub fn augmented_gradient<T: Real>(
    model: &DenoiserModel,
    params: &ParameterSet<T>,
    schedule: &NoiseSchedule,
    label: usize,
    draws: &[Draw<T>],
) -> Result<(f64, ParameterSet<T>)> {
    if draws.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let images: Vec<Tensor<T>> = draws.iter().map(|d| d.image.clone()).collect();
    let eps: Vec<Tensor<T>> = draws.iter().map(|d| d.eps.clone()).collect();
    let ts: Vec<usize> = draws.iter().map(|d| d.timestep).collect();
    let labels = vec![label; draws.len()];
    let (loss, grad) = gradient(params, |g: &mut Graph<T>, p| {
        let x0 = g.input(Tensor::stack(&images)?);
        let e = g.input(Tensor::stack(&eps)?);
        model.loss_graph(g, p, schedule, x0, e, &ts, &labels)
    })?;
    Ok((loss.as_f64(), grad))
}

/// Draws `K` views and returns their mean gradient, not yet clipped.
#[allow(clippy::too_many_arguments)]
pub fn per_example_augmented_gradient<T: Real>(
    model: &DenoiserModel,
    params: &ParameterSet<T>,
    image: &Tensor<T>,
    label: usize,
    policy: &AugmentationPolicy,
    k: usize,
    mixture: &TimestepMixture,
    schedule: &NoiseSchedule,
    streams: &mut TrainStreams,
) -> Result<ParameterSet<T>> {
    policy.validate(k)?;
    let draws = draw_views(image, policy, k, mixture, streams);
    augmented_gradient(model, params, schedule, label, &draws).map(|(_, g)| g)
}

/// Statistics of one step. Clipped norms stay in memory; only their
/// quantiles are ever logged.
#[derive(Clone, Debug, Default)]
pub struct StepStats {
    pub realized_batch: usize,
    pub mean_loss: Option<f64>,
    pub clipped_norms: Vec<f64>,
}

impl StepStats {
    pub fn clipped_quantile(&self, q: f64) -> Option<f64> {
        quantile(&self.clipped_norms, q)
    }
}

fn quantile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

/// The privatised gradient `ĝ = (Σ clip_C(g_i) + σC·ξ) / B` for one sampled batch.
///
/// Per-example gradients are formed in slices of `microbatch_size` and
/// reduced in batch order, so the result does not depend on the slice size
/// or on the number of worker threads.
pub fn privatized_gradient<T: Real>(
    setup: &TrainSetup,
    params: &ParameterSet<T>,
    data: &LabeledImageSet,
    batch: &[usize],
    streams: &mut TrainStreams,
) -> Result<(ParameterSet<T>, StepStats)> {
    let cfg = &setup.config;
    let mut sum = params.zeros_like();
    let mut stats = StepStats {
        realized_batch: batch.len(),
        ..StepStats::default()
    };
    let mut loss_total = 0.0;
    for chunk in batch.chunks(cfg.microbatch_size) {
        let views: Vec<(usize, Vec<Draw<T>>)> = chunk
            .iter()
            .map(|&i| {
                let img = data.image(i).cast::<T>();
                (
                    data.labels[i],
                    draw_views(&img, &setup.policy, cfg.augmult, &setup.mixture, streams),
                )
            })
            .collect();
        if cfg.is_private() {
            let grads: Vec<Result<(f64, ParameterSet<T>, f64)>> = views
                .par_iter()
                .map(|(label, draws)| {
                    let (loss, mut g) =
                        augmented_gradient(&setup.model, params, &setup.schedule, *label, draws)?;
                    if let Some(name) = g.first_non_finite() {
                        return Err(Error::NonFiniteGradient(name.to_string()));
                    }
                    let norm = clip_in_place(&mut g, cfg.clip_norm);
                    Ok((loss, g, norm))
                })
                .collect();
            for r in grads {
                let (loss, g, norm) = r?;
                sum.add_scaled(&g, T::one())?;
                loss_total += loss;
                stats.clipped_norms.push(norm);
            }
        } else {
            let (loss, g) = batched_gradient(setup, params, &views)?;
            if let Some(name) = g.first_non_finite() {
                return Err(Error::NonFiniteGradient(name.to_string()));
            }
            sum.add_scaled(&g, T::one())?;
            loss_total += loss;
        }
    }
    if cfg.noise_multiplier > 0.0 {
        let std = cfg.noise_multiplier * cfg.clip_norm;
        for (_, t) in sum.iter_mut() {
            for v in t.data_mut() {
                *v += T::of(std * streams.noise.sample::<f64, _>(StandardNormal));
            }
        }
    }
    sum.scale(T::of(1.0 / cfg.batch_size as f64));
    stats.mean_loss = (!batch.is_empty()).then(|| loss_total / batch.len() as f64);
    Ok((sum, stats))
}

/// Sum over examples of each example's mean-over-views gradient, from one
/// backward pass over all views. Returns the summed loss as well.
fn batched_gradient<T: Real>(
    setup: &TrainSetup,
    params: &ParameterSet<T>,
    views: &[(usize, Vec<Draw<T>>)],
) -> Result<(f64, ParameterSet<T>)> {
    let mut images = Vec::new();
    let mut eps = Vec::new();
    let mut ts = Vec::new();
    let mut labels = Vec::new();
    for (label, draws) in views {
        for d in draws {
            images.push(d.image.clone());
            eps.push(d.eps.clone());
            ts.push(d.timestep);
            labels.push(*label);
        }
    }
    let (loss, mut grad) = gradient(params, |g: &mut Graph<T>, p| {
        let x0 = g.input(Tensor::stack(&images)?);
        let e = g.input(Tensor::stack(&eps)?);
        setup
            .model
            .loss_graph(g, p, &setup.schedule, x0, e, &ts, &labels)
    })?;
    let n = T::of(views.len() as f64);
    grad.scale(n);
    Ok((loss.as_f64() * views.len() as f64, grad))
}

/// Computes `ĝ` for `batch` and applies one optimiser update.
pub fn private_step<T: Real>(
    setup: &TrainSetup,
    params: &mut ParameterSet<T>,
    optimizer: &mut Optimizer<T>,
    data: &LabeledImageSet,
    batch: &[usize],
    streams: &mut TrainStreams,
) -> Result<StepStats> {
    let (g, stats) = privatized_gradient(setup, params, data, batch, streams)?;
    optimizer.step(params, &g)?;
    Ok(stats)
}

/// Poisson subsample: each index kept independently with probability `q`.
pub fn poisson_batch(n: usize, q: f64, rng: &mut StreamRng) -> Vec<usize> {
    (0..n).filter(|_| rng.random::<f64>() < q).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss: Option<f64>,
    pub epsilon_spent: Option<f64>,
    pub grad_norm_median_clipped: Option<f64>,
    pub grad_norm_p95_clipped: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainStatus {
    Completed,
    BudgetExhausted { steps_done: usize },
}

#[derive(Clone, Debug)]
pub struct TrainOutput<T> {
    pub params: ParameterSet<T>,
    pub ema: ParameterSet<T>,
    pub log: Vec<LogRecord>,
    pub status: TrainStatus,
    /// Accounted ε after the last completed step; `None` when non-private.
    pub epsilon: Option<f64>,
    pub steps_done: usize,
}

impl<T: Real> TrainOutput<T> {
    pub fn checkpoint(&self, model: &DenoiserModel) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.set_arch(&model.arch.to_kv());
        ck.put_params("raw/", &self.params);
        ck.put_params("ema/", &self.ema);
        ck
    }
}

/// Writes one JSON object per line.
pub fn write_log(records: &[LogRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(f, "{line}")?;
    }
    Ok(())
}

/// ε after `steps` steps from a precomputed per-step curve.
fn epsilon_after(step_curve: &RdpCurve, steps: usize, delta: f64) -> f64 {
    let log_inv = -delta.ln();
    step_curve
        .points
        .iter()
        .map(|&(a, e)| e * steps as f64 + log_inv / (a as f64 - 1.0))
        .fold(f64::INFINITY, f64::min)
}

/// Runs `config.steps` steps on Poisson batches of expected size `B`,
/// tracking an EMA of the parameters and the privacy spent so far.
pub fn train<T: Real>(
    setup: &TrainSetup,
    data: &LabeledImageSet,
    seed: u64,
    init: Option<ParameterSet<T>>,
) -> Result<TrainOutput<T>> {
    setup.validate()?;
    if data.is_empty() {
        return Err(invalid("training set is empty"));
    }
    let cfg = &setup.config;
    let mut params = match init {
        Some(p) => p,
        None => setup.model.init(&mut rng::stream(seed, Stream::Init))?,
    };
    let mut ema = EmaTracker::new(cfg.ema_decay, params.clone())?;
    let mut optimizer = Optimizer::new(cfg.optimizer);
    let mut streams = TrainStreams::new(seed);
    let q = (cfg.batch_size as f64 / data.len() as f64).min(1.0);
    let step_curve = if cfg.noise_multiplier > 0.0 {
        Some(MechanismSpec::new(cfg.noise_multiplier, q, 1)?.step_curve())
    } else {
        None
    };

    let mut log = Vec::with_capacity(cfg.steps);
    let mut status = TrainStatus::Completed;
    let mut epsilon = step_curve.as_ref().map(|_| 0.0);
    let mut steps_done = 0;
    for step in 1..=cfg.steps {
        let eps_next = step_curve
            .as_ref()
            .map(|c| epsilon_after(c, step, cfg.delta));
        if let (Some(cap), Some(e)) = (cfg.max_epsilon, eps_next) {
            if e > cap {
                status = TrainStatus::BudgetExhausted { steps_done };
                break;
            }
        }
        let batch = poisson_batch(data.len(), q, &mut streams.batch);
        let stats = private_step(setup, &mut params, &mut optimizer, data, &batch, &mut streams)?;
        ema.update(&params)?;
        steps_done = step;
        epsilon = eps_next;
        log.push(LogRecord {
            step,
            loss: stats.mean_loss,
            epsilon_spent: epsilon,
            grad_norm_median_clipped: stats.clipped_quantile(0.5),
            grad_norm_p95_clipped: stats.clipped_quantile(0.95),
        });
    }
    Ok(TrainOutput {
        params,
        ema: ema.shadow,
        log,
        status,
        epsilon,
        steps_done,
    })
}
