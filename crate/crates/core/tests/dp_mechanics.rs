mod support;

use dpdm_core::data::{generate_toy, ToyDomainSpec};
use dpdm_core::diffusion::{DenoiserArch, DenoiserModel, NoiseSchedule, TimestepMixture};
use dpdm_core::dp_train::{
    augmented_gradient, clip, draw_views, per_example_augmented_gradient, poisson_batch,
    private_step, privatized_gradient, train, Draw, TrainStatus,
};
use dpdm_core::optim::Optimizer;
use dpdm_core::rng::{stream, Stream, TrainStreams};
use dpdm_core::{
    AugmentationPolicy, DpTrainConfig, LabeledImageSet, MechanismSpec, OptimizerKind, ParameterSet,
    Real, TrainSetup,
};
use rand::Rng;
use support::max_rel_diff;

const T_STEPS: usize = 20;

fn data(n: usize) -> LabeledImageSet {
    generate_toy(&ToyDomainSpec::finetune(3).with_size(4, 4, 1), n).unwrap()
}

fn setup(config: DpTrainConfig, policy: AugmentationPolicy) -> TrainSetup {
    let mut arch = DenoiserArch::new(4, 4, 1, 4);
    arch.hidden = vec![12, 8];
    arch.time_dim = 4;
    arch.conv_channels = 2;
    TrainSetup {
        model: DenoiserModel::new(arch).unwrap(),
        schedule: NoiseSchedule::scaled(T_STEPS).unwrap(),
        mixture: TimestepMixture::uniform(T_STEPS),
        policy,
        config,
    }
}

fn private_config(clip_norm: f64, sigma: f64, batch: usize, k: usize) -> DpTrainConfig {
    DpTrainConfig {
        clip_norm,
        noise_multiplier: sigma,
        microbatch_size: batch,
        augmult: k,
        ..DpTrainConfig::non_private(batch, 1, OptimizerKind::sgd(0.1))
    }
}

fn init<T: Real>(s: &TrainSetup, seed: u64) -> ParameterSet<T> {
    s.model.init(&mut stream(seed, Stream::Init)).unwrap()
}

fn single_gradient(s: &TrainSetup, p: &ParameterSet<f64>, label: usize, d: &Draw<f64>) -> ParameterSet<f64> {
    augmented_gradient(&s.model, p, &s.schedule, label, std::slice::from_ref(d)).unwrap().1
}

fn mean(grads: &[ParameterSet<f64>]) -> ParameterSet<f64> {
    let mut m = grads[0].zeros_like();
    for g in grads {
        m.add_scaled(g, 1.0 / grads.len() as f64).unwrap();
    }
    m
}

#[test]
fn clipped_contributions_stay_in_the_ball() {
    let d = data(64);
    let mut r = support::rng(11);
    let mut worst = 0.0f64;
    for step in 0..100u64 {
        let c = [1e-3, 1e-2, 0.3, 1.0, 10.0][step as usize % 5];
        let k = 1 + (step as usize % 4);
        let b = r.random_range(4..24);
        let mut cfg = private_config(c, 0.0, b, k);
        cfg.microbatch_size = r.random_range(1..=b);
        let s = setup(cfg, AugmentationPolicy::timesteps_and_flip());
        let mut params: ParameterSet<f32> = init(&s, step);
        for (_, t) in params.iter_mut() {
            for v in t.data_mut() {
                *v += r.random_range(-0.5f32..0.5);
            }
        }
        let mut streams = TrainStreams::new(step);
        let batch = poisson_batch(d.len(), b as f64 / d.len() as f64, &mut streams.batch);
        let (g, stats) = privatized_gradient(&s, &params, &d, &batch, &mut streams).unwrap();
        assert_eq!(stats.clipped_norms.len(), batch.len());
        for &n in &stats.clipped_norms {
            assert!(n <= c * (1.0 + 1e-6), "step {step}: norm {n} exceeds {c}");
            worst = worst.max(n / c);
        }
        // Without noise the sum of contributions is bounded by the triangle inequality.
        let total = g.l2_norm().as_f64() * b as f64;
        assert!(total <= batch.len() as f64 * c * (1.0 + 1e-5));
    }
    // The fuzz must actually exercise clipping.
    assert!(worst > 1.0 - 1e-6);
}

#[test]
fn noise_scale_on_zero_gradients() {
    let (c, sigma, b) = (0.5, 1.7, 32usize);
    let s = setup(private_config(c, sigma, b, 1), AugmentationPolicy::NONE);
    let params: ParameterSet<f64> = init(&s, 0);
    let d = data(8);
    let mut streams = TrainStreams::new(5);
    let steps = 10_000;
    let coords = params.numel();
    let mut sum_sq = vec![0.0f64; coords];
    let mut sum = vec![0.0f64; coords];
    for _ in 0..steps {
        // An empty Poisson batch: every per-example contribution is zero.
        let (g, _) = privatized_gradient(&s, &params, &d, &[], &mut streams).unwrap();
        for (i, v) in g.flatten().into_iter().enumerate() {
            sum[i] += v;
            sum_sq[i] += v * v;
        }
    }
    let expected = sigma * c / b as f64;
    let n = steps as f64;
    let std_of = |i: usize| ((sum_sq[i] - sum[i] * sum[i] / n) / (n - 1.0)).sqrt();
    let pooled = ((0..coords).map(|i| std_of(i).powi(2)).sum::<f64>() / coords as f64).sqrt();
    assert!((pooled / expected - 1.0).abs() < 0.02, "pooled std {pooled} vs {expected}");
    for i in [0, coords / 2, coords - 1] {
        assert!((std_of(i) / expected - 1.0).abs() < 0.02, "coordinate {i}: {}", std_of(i));
    }
}

#[test]
fn identical_seeds_give_identical_noise() {
    let s = setup(private_config(1.0, 1.0, 4, 1), AugmentationPolicy::NONE);
    let params: ParameterSet<f64> = init(&s, 0);
    let d = data(8);
    let run = |seed| {
        let mut st = TrainStreams::new(seed);
        (0..3)
            .map(|_| privatized_gradient(&s, &params, &d, &[], &mut st).unwrap().0)
            .collect::<Vec<_>>()
    };
    assert_eq!(run(1), run(1));
    assert_ne!(run(1)[0], run(2)[0]);
    let seq = run(1);
    assert_ne!(seq[0], seq[1]);
}

#[test]
fn microbatch_size_does_not_change_the_gradient() {
    let d = data(40);
    let b = 16;
    for (c, sigma) in [(0.05, 0.8), (f64::INFINITY, 0.0)] {
        let mut outs = Vec::new();
        for m in [1, b / 2, b] {
            let mut cfg = private_config(c, sigma, b, 3);
            cfg.microbatch_size = m;
            let s = setup(cfg, AugmentationPolicy::timesteps_and_flip());
            let params: ParameterSet<f64> = init(&s, 4);
            let mut streams = TrainStreams::new(9);
            let batch: Vec<usize> = (0..b).map(|i| (3 * i) % d.len()).collect();
            outs.push(privatized_gradient(&s, &params, &d, &batch, &mut streams).unwrap().0);
        }
        for o in &outs[1..] {
            let e = max_rel_diff(&outs[0], o);
            assert!(e < 1e-6, "clip {c}: relative difference {e}");
        }
    }
}

#[test]
fn views_are_averaged_before_clipping() {
    let c = 1e-3;
    let s = setup(private_config(c, 0.0, 1, 2), AugmentationPolicy::timesteps_and_flip());
    let params: ParameterSet<f64> = init(&s, 2);
    let d = data(4);
    let streams = TrainStreams::new(21);
    let img = d.image(1).cast::<f64>();
    let draws = draw_views(&img, &s.policy, 2, &s.mixture, &mut streams.clone());
    assert_ne!(draws[0].timestep, draws[1].timestep, "pick a seed with distinct views");
    let per_draw: Vec<_> = draws.iter().map(|dr| single_gradient(&s, &params, d.labels[1], dr)).collect();
    assert!(per_draw.iter().all(|g| g.l2_norm() > c));

    let average_then_clip = clip(&mean(&per_draw), c);
    let clip_then_average = mean(&per_draw.iter().map(|g| clip(g, c)).collect::<Vec<_>>());
    assert!(max_rel_diff(&average_then_clip, &clip_then_average) > 1e-3);

    let (g, _) = privatized_gradient(&s, &params, &d, &[1], &mut streams.clone()).unwrap();
    assert!(max_rel_diff(&g, &average_then_clip) < 1e-9);
}

#[test]
fn multiplicity_oracles() {
    let s = setup(private_config(1.0, 0.0, 1, 1), AugmentationPolicy::NONE);
    let params: ParameterSet<f64> = init(&s, 6);
    let d = data(4);
    let img = d.image(2).cast::<f64>();
    let label = d.labels[2];

    // K = 1 without augmentation is the plain single-draw gradient.
    let streams = TrainStreams::new(3);
    let got = per_example_augmented_gradient(
        &s.model, &params, &img, label, &s.policy, 1, &s.mixture, &s.schedule, &mut streams.clone(),
    )
    .unwrap();
    let draw = draw_views(&img, &s.policy, 1, &s.mixture, &mut streams.clone()).remove(0);
    assert_eq!(draw.image, img);
    let plain = single_gradient(&s, &params, label, &draw);
    assert!(max_rel_diff(&got, &plain) < 1e-12);

    // K = 2 duplicates average to the K = 1 gradient.
    let (_, dup) = augmented_gradient(&s.model, &params, &s.schedule, label, &[draw.clone(), draw.clone()]).unwrap();
    assert!(max_rel_diff(&dup, &plain) < 1e-12);

    // K = 4 enumerated draws: the mean of four separate gradients.
    let mut r = support::rng(8);
    let draws: Vec<Draw<f64>> = (0..4)
        .map(|i| Draw {
            image: if i % 2 == 0 { img.clone() } else { dpdm_core::data::augment_with(&img, true, 0, 0) },
            timestep: 1 + 5 * i,
            eps: support::uniform(img.shape(), -2.0, 2.0, &mut r),
        })
        .collect();
    let (_, joint) = augmented_gradient(&s.model, &params, &s.schedule, label, &draws).unwrap();
    let separate: Vec<_> = draws.iter().map(|dr| single_gradient(&s, &params, label, dr)).collect();
    assert!(max_rel_diff(&joint, &mean(&separate)) < 1e-6);
}

#[test]
fn noiseless_singleton_step_is_clipped_sgd() {
    let (c, lr) = (0.01, 0.3);
    let mut cfg = private_config(c, 0.0, 1, 1);
    cfg.optimizer = OptimizerKind::sgd(lr);
    let s = setup(cfg, AugmentationPolicy::NONE);
    let d = data(4);
    let before: ParameterSet<f64> = init(&s, 1);
    let streams = TrainStreams::new(4);
    let draw = draw_views(&d.image(0).cast::<f64>(), &s.policy, 1, &s.mixture, &mut streams.clone()).remove(0);
    let g = single_gradient(&s, &before, d.labels[0], &draw);
    assert!(g.l2_norm() > c);
    let mut expected = before.clone();
    expected.add_scaled(&clip(&g, c), -lr).unwrap();

    let mut params = before.clone();
    let mut opt = Optimizer::new(s.config.optimizer);
    private_step(&s, &mut params, &mut opt, &d, &[0], &mut streams.clone()).unwrap();
    assert!(max_rel_diff(&params, &expected) < 1e-12);
}

/// Plain minibatch SGD written against the public per-draw pieces only.
fn non_private_oracle(s: &TrainSetup, d: &LabeledImageSet, seed: u64, lr: f64) -> ParameterSet<f64> {
    let cfg = &s.config;
    let mut params: ParameterSet<f64> = init(s, seed);
    let mut streams = TrainStreams::new(seed);
    let q = cfg.batch_size as f64 / d.len() as f64;
    for _ in 0..cfg.steps {
        let batch = poisson_batch(d.len(), q, &mut streams.batch);
        let mut sum = params.zeros_like();
        for &i in &batch {
            let draw = draw_views(&d.image(i).cast::<f64>(), &s.policy, 1, &s.mixture, &mut streams).remove(0);
            sum.add_scaled(&single_gradient(s, &params, d.labels[i], &draw), 1.0).unwrap();
        }
        params.add_scaled(&sum, -lr / cfg.batch_size as f64).unwrap();
    }
    params
}

#[test]
fn noiseless_unclipped_training_matches_plain_sgd() {
    let d = data(24);
    let lr = 0.05;
    let base = DpTrainConfig::non_private(6, 12, OptimizerKind::sgd(lr));
    // Both the batched non-private path and the per-example path with a
    // clip bound that never binds.
    for clip_norm in [f64::INFINITY, 1e12] {
        let cfg = DpTrainConfig { clip_norm, microbatch_size: 4, ..base.clone() };
        let s = setup(cfg, AugmentationPolicy::NONE);
        let out = train::<f64>(&s, &d, 17, None).unwrap();
        let oracle = non_private_oracle(&s, &d, 17, lr);
        let e = max_rel_diff(&out.params, &oracle);
        assert!(e < 1e-9, "clip {clip_norm}: {e}");
    }
}

#[test]
fn zero_steps_return_the_initialization() {
    let mut cfg = private_config(1.0, 1.0, 4, 2);
    cfg.steps = 0;
    let s = setup(cfg, AugmentationPolicy::timesteps_and_flip());
    let out = train::<f32>(&s, &data(8), 5, None).unwrap();
    let init: ParameterSet<f32> = init(&s, 5);
    assert_eq!(out.params, init);
    assert_eq!(out.ema, init);
    assert!(out.log.is_empty());
    assert_eq!(out.status, TrainStatus::Completed);
    assert_eq!(out.epsilon, Some(0.0));
}

#[test]
fn budget_cap_stops_at_the_last_affordable_step() {
    let d = data(20);
    let mut cfg = private_config(1.0, 0.9, 5, 1);
    cfg.steps = 50;
    cfg.delta = 1e-3;
    let q = 5.0 / 20.0;
    let mech = |steps| MechanismSpec::new(0.9, q, steps).unwrap().epsilon(1e-3).unwrap().0;
    let cap = 0.5 * (mech(7) + mech(8));
    cfg.max_epsilon = Some(cap);
    let s = setup(cfg.clone(), AugmentationPolicy::NONE);
    let out = train::<f64>(&s, &d, 2, None).unwrap();
    assert_eq!(out.status, TrainStatus::BudgetExhausted { steps_done: 7 });
    assert_eq!(out.log.len(), 7);
    let spent = out.epsilon.unwrap();
    assert!(spent <= cap && (spent - mech(7)).abs() < 1e-9 * spent);

    // The returned parameters are those of an uncapped seven-step run.
    let seven = setup(DpTrainConfig { steps: 7, max_epsilon: None, ..cfg }, AugmentationPolicy::NONE);
    assert_eq!(train::<f64>(&seven, &d, 2, None).unwrap().params, out.params);
}

#[test]
fn non_finite_gradients_name_the_parameter() {
    let s = setup(private_config(1.0, 0.0, 2, 1), AugmentationPolicy::NONE);
    let mut params: ParameterSet<f64> = init(&s, 0);
    params.get_mut("out.weight").expect("output layer").data_mut()[0] = f64::NAN;
    let err = privatized_gradient(&s, &params, &data(4), &[0, 1], &mut TrainStreams::new(0)).unwrap_err();
    let msg = err.to_string();
    assert!(params.names().any(|n| msg.contains(&format!("`{n}`"))), "{msg}");
}

#[test]
fn mnist_scale_configuration_is_accepted() {
    let cfg = DpTrainConfig {
        clip_norm: 1e-3,
        noise_multiplier: 2.852,
        batch_size: 4096,
        microbatch_size: 64,
        steps: 4000,
        augmult: 128,
        delta: 1e-5,
        ..DpTrainConfig::non_private(4096, 4000, OptimizerKind::sgd(1e-3))
    };
    assert!(cfg.validate().is_ok());
    let eps = MechanismSpec::new(2.852, 4096.0 / 60000.0, 4000).unwrap().epsilon(1e-5).unwrap().0;
    assert!((8.0..=13.0).contains(&eps));
}
