use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dpdm_core::diffusion::sample_dataset;
use dpdm_core::dp_train::{train, write_log, DpTrainConfig, TrainOutput, TrainSetup, TrainStatus};
use dpdm_core::eval::{
    domain_discriminator, ensemble_accuracy, fid_like_score, model_selection_study,
    train_classifier, train_downstream, write_fid_tsv, write_selection_tsv, write_tsv,
    ClassifierKind, FeatureExtractor, SelectionConfig,
};
use dpdm_core::privacy::{calibrate_sigma, MechanismSpec, PrivacySpend};
use dpdm_core::rng::{self, Stream};
use dpdm_core::data::write_idx;
use dpdm_core::{
    Checkpoint, DenoiserArch, DenoiserModel, Domain, LabeledImageSet, ParameterSet, Split,
};

use crate::config::Config;
use crate::settings::{self, DataSource, ImageSettings, ScheduleSettings};

/// Offset of the default real test split inside the toy index space.
const TEST_OFFSET: usize = 1_000_000;

pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        for sub in ["checkpoints", "samples", "logs", "reports"] {
            fs::create_dir_all(root.join(sub))
                .with_context(|| format!("creating {}", root.join(sub).display()))?;
        }
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    pub fn file(&self, sub: &str, name: &str) -> PathBuf {
        self.root.join(sub).join(name)
    }

    fn write_resolved(&self, command: &str, cfg: &Config) -> Result<()> {
        let text = format!("# dpdm {command}\n{}", cfg.resolved_text());
        fs::write(self.root.join("config.resolved"), text)?;
        Ok(())
    }
}

/// Validates the configuration and records it before any work starts.
fn begin(command: &str, cfg: &Config, run: &RunDir) -> Result<()> {
    cfg.finish()?;
    run.write_resolved(command, cfg)
}

fn real_test(cfg: &mut Config) -> Result<DataSource> {
    DataSource::resolve(cfg, "real_", Domain::Finetune, TEST_OFFSET, 1000, Split::Test)
}

fn arch_text(arch: &DenoiserArch, schedule: &ScheduleSettings) -> String {
    format!("{}{}", arch.to_kv(), schedule.to_kv())
}

struct TrainRun {
    setup: TrainSetup,
    schedule: ScheduleSettings,
    data: LabeledImageSet,
    seed: u64,
}

fn resolve_train(
    cfg: &mut Config,
    domain: Domain,
    defaults: &DpTrainConfig,
) -> Result<(TrainRun, DataSource, ImageSettings)> {
    let seed = cfg.get("seed", 0u64)?;
    let image = ImageSettings::resolve(cfg)?;
    let source = DataSource::resolve(cfg, "", domain, 0, 4000, Split::Train)?;
    let classes = cfg.get("num_classes", 4usize)?;
    let arch = settings::denoiser_arch(cfg, &image, classes)?;
    let schedule = ScheduleSettings::resolve(cfg)?;
    let mixture = settings::mixture(cfg, schedule.steps)?;
    let policy = settings::policy(cfg)?;
    let lr = match defaults.optimizer {
        dpdm_core::OptimizerKind::Adam(h) => h.lr,
        dpdm_core::OptimizerKind::Sgd { lr, .. } => lr,
    };
    let config = DpTrainConfig {
        batch_size: cfg.get("batch_size", defaults.batch_size)?,
        steps: cfg.get("steps", defaults.steps)?,
        augmult: cfg.get("augmult", defaults.augmult)?,
        optimizer: settings::optimizer(cfg, lr)?,
        ema_decay: cfg.get("ema_decay", defaults.ema_decay)?,
        ..defaults.clone()
    };
    let microbatch = cfg.get("microbatch_size", config.batch_size)?;
    let data = source.load(&image)?;
    if data.num_classes > classes {
        bail!(
            "dataset has {} classes but `num_classes` is {classes}",
            data.num_classes
        );
    }
    let data = data.with_labels(data.labels.clone(), classes)?;
    let run = TrainRun {
        setup: TrainSetup {
            model: DenoiserModel::new(arch)?,
            schedule: schedule.build()?,
            mixture,
            policy,
            config: DpTrainConfig {
                microbatch_size: microbatch,
                ..config
            },
        },
        schedule,
        data,
        seed,
    };
    Ok((run, source, image))
}

fn save_training(run: &RunDir, tr: &TrainRun, out: &TrainOutput<f32>) -> Result<()> {
    let mut ck = out.checkpoint(&tr.setup.model);
    ck.set_arch(&arch_text(&tr.setup.model.arch, &tr.schedule));
    ck.save(run.file("checkpoints", "model.ckpt"))?;
    write_log(&out.log, run.file("logs", "train.ndjson"))?;
    Ok(())
}

pub fn pretrain(cfg: &mut Config, run: &RunDir) -> Result<()> {
    let defaults = DpTrainConfig {
        ema_decay: 0.999,
        ..DpTrainConfig::non_private(
            128,
            2000,
            dpdm_core::OptimizerKind::Adam(dpdm_core::AdamHyper::with_lr(1e-3)),
        )
    };
    let (tr, _, _) = resolve_train(cfg, Domain::Pretrain, &defaults)?;
    begin("pretrain", cfg, run)?;
    let out = train::<f32>(&tr.setup, &tr.data, tr.seed, None)?;
    save_training(run, &tr, &out)?;
    println!(
        "pretrain: {} steps, final loss {}",
        out.steps_done,
        out.log
            .last()
            .and_then(|r| r.loss)
            .map_or("n/a".into(), |l| format!("{l:.4}"))
    );
    Ok(())
}

fn load_init(path: &Path, arch: &DenoiserArch, schedule: &ScheduleSettings) -> Result<ParameterSet<f32>> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let text = ck.arch()?;
    let stored = DenoiserArch::from_kv(&text)?;
    if &stored != arch {
        bail!(
            "architecture mismatch: checkpoint has {:?}, config has {:?}",
            stored,
            arch
        );
    }
    let stored_schedule = ScheduleSettings::from_kv(&text)?;
    if stored_schedule.to_kv() != schedule.to_kv() {
        bail!("noise schedule mismatch between checkpoint and config");
    }
    Ok(ck.params("raw/")?)
}

pub fn finetune(cfg: &mut Config, run: &RunDir) -> Result<()> {
    let defaults = DpTrainConfig {
        clip_norm: 1.0,
        noise_multiplier: 0.0,
        batch_size: 256,
        microbatch_size: 256,
        steps: 150,
        augmult: 4,
        optimizer: dpdm_core::OptimizerKind::Adam(dpdm_core::AdamHyper::with_lr(1e-3)),
        ema_decay: 0.9,
        delta: 1e-5,
        max_epsilon: None,
    };
    let (mut tr, _, _) = resolve_train(cfg, Domain::Finetune, &defaults)?;
    let init: Option<String> = cfg.opt("init")?;
    let n = tr.data.len();
    let c = &mut tr.setup.config;
    c.clip_norm = cfg.get("clip_norm", defaults.clip_norm)?;
    c.delta = cfg.get("delta", 1.0 / n as f64)?;
    c.max_epsilon = cfg.opt("max_epsilon")?;
    let target: Option<f64> = cfg.opt("target_epsilon")?;
    let sigma: Option<f64> = cfg.opt("noise_multiplier")?;
    // Present when replaying a resolved config; recalibrated below.
    let _: Option<f64> = cfg.opt("calibrated_noise_multiplier")?;
    let q = (c.batch_size as f64 / n as f64).min(1.0);
    c.noise_multiplier = match (target, sigma) {
        (Some(eps), None) => {
            let s = calibrate_sigma(q, c.steps as u64, PrivacySpend::new(eps, c.delta)?)?;
            cfg.record("calibrated_noise_multiplier", s);
            s
        }
        (None, Some(s)) => s,
        _ => bail!("set exactly one of `target_epsilon` and `noise_multiplier`"),
    };
    tr.setup.validate()?;
    let init = match &init {
        Some(p) => Some(load_init(Path::new(p), &tr.setup.model.arch, &tr.schedule)?),
        None => None,
    };
    begin("finetune", cfg, run)?;
    let out = train::<f32>(&tr.setup, &tr.data, tr.seed, init)?;
    save_training(run, &tr, &out)?;
    let c = &tr.setup.config;
    let status = match out.status {
        TrainStatus::Completed => "completed".to_string(),
        TrainStatus::BudgetExhausted { steps_done } => format!("budget_exhausted_after_{steps_done}"),
    };
    let eps = out.epsilon.map_or("inf".to_string(), |e| e.to_string());
    let report = format!(
        "epsilon = {eps}\ndelta = {}\nnoise_multiplier = {}\nsampling_rate = {q}\nsteps_done = {}\nstatus = {status}\n",
        c.delta, c.noise_multiplier, out.steps_done
    );
    fs::write(run.file("reports", "privacy.txt"), &report)?;
    println!("finetune: ({eps}, {})-DP after {} steps [{status}]", c.delta, out.steps_done);
    Ok(())
}

pub fn sample(cfg: &mut Config, run: &RunDir) -> Result<()> {
    let seed = cfg.get("seed", 0u64)?;
    let path: String = cfg.require("checkpoint")?;
    let n = cfg.get("n", 1000usize)?;
    let balanced = cfg.get("balanced", true)?;
    let use_ema = cfg.get("use_ema", true)?;
    let ck = Checkpoint::load(&path).with_context(|| format!("loading {path}"))?;
    let text = ck.arch()?;
    let model = DenoiserModel::new(DenoiserArch::from_kv(&text)?)?;
    let schedule = ScheduleSettings::from_kv(&text)?.build()?;
    let params: ParameterSet<f32> = ck.params(if use_ema { "ema/" } else { "raw/" })?;
    begin("sample", cfg, run)?;
    let mut rng = rng::stream(seed, Stream::Sampling);
    let set = sample_dataset(&model, &params, &schedule, n, balanced, &mut rng)?;
    write_idx(&set, run.file("samples", "images.idx"), run.file("samples", "labels.idx"))?;
    println!("sample: wrote {n} images");
    Ok(())
}

pub fn calibrate(cfg: &mut Config, run: &RunDir) -> Result<()> {
    let dataset_size: Option<usize> = cfg.opt("dataset_size")?;
    let q = match cfg.opt::<f64>("sampling_rate")? {
        Some(q) => q,
        None => {
            let b: usize = cfg.require("batch_size")?;
            let n = dataset_size.context("set `sampling_rate` or both `batch_size` and `dataset_size`")?;
            b as f64 / n as f64
        }
    };
    let steps: u64 = cfg.require("steps")?;
    let target: f64 = cfg.require("target_epsilon")?;
    let delta = match dataset_size {
        Some(n) => cfg.get("delta", 1.0 / n as f64)?,
        None => cfg.require("delta")?,
    };
    begin("calibrate", cfg, run)?;
    let sigma = calibrate_sigma(q, steps, PrivacySpend::new(target, delta)?)?;
    let mech = MechanismSpec::new(sigma, q, steps)?;
    let (eps, order) = mech.epsilon(delta)?;
    let mut text = format!(
        "sigma = {sigma}\nepsilon = {eps}\norder = {order}\ndelta = {delta}\nsampling_rate = {q}\nsteps = {steps}\n"
    );
    for (a, e) in mech.curve().points {
        text.push_str(&format!("rdp.{a} = {e}\n"));
    }
    fs::write(run.file("reports", "calibrate.txt"), &text)?;
    print!("{text}");
    Ok(())
}

/// The feature extractor is trained on the public (pretrain) domain.
fn extractor(
    cfg: &mut Config,
    image: &ImageSettings,
) -> Result<(DataSource, dpdm_core::eval::ClassifierConfig)> {
    let source = DataSource::resolve(cfg, "extractor_", Domain::Pretrain, 0, 4000, Split::Train)?;
    let classes = cfg.get("num_classes", 4usize)?;
    Ok((source, settings::classifier(cfg, image, classes)?))
}

pub fn eval_fid(cfg: &mut Config, run: &RunDir) -> Result<()> {
    let seed = cfg.get("seed", 0u64)?;
    let image = ImageSettings::resolve(cfg)?;
    let real = real_test(cfg)?;
    let synth = DataSource::idx(cfg, "synth_")?;
    let (ext_source, ext_cfg) = extractor(cfg, &image)?;
    begin("eval-fid", cfg, run)?;
    let ext_data = ext_source.load(&image)?;
    let ext = FeatureExtractor::new(train_classifier(&ext_data, &ext_cfg, seed, seed)?);
    let report = fid_like_score(&real.load(&image)?, &synth.load(&image)?, &ext)?;
    write_fid_tsv(run.file("reports", "fid.tsv"), &report)?;
    println!("eval-fid: {:.6}{}", report.score, if report.regularized { " (regularized)" } else { "" });
    Ok(())
}

pub fn eval_downstream(cfg: &mut Config, run: &RunDir) -> Result<()> {
    let seed = cfg.get("seed", 0u64)?;
    let image = ImageSettings::resolve(cfg)?;
    let test = real_test(cfg)?;
    let synth = DataSource::idx(cfg, "synth_")?;
    let classes = cfg.get("num_classes", 4usize)?;
    let ccfg = settings::classifier(cfg, &image, classes)?;
    let members = cfg.get("ensemble_members", 5usize)?;
    let discriminate = cfg.get("discriminator", true)?;
    let disc_sources = if discriminate {
        Some((
            DataSource::resolve(cfg, "disc_pretrain_", Domain::Pretrain, 0, 2000, Split::Train)?,
            DataSource::resolve(cfg, "disc_finetune_", Domain::Finetune, 0, 2000, Split::Train)?,
        ))
    } else {
        None
    };
    begin("eval-downstream", cfg, run)?;
    let test = test.load(&image)?;
    let synth = synth.load(&image)?.with_labels_checked(classes)?;
    let single = train_downstream(&synth, &ccfg, &test, seed)?;
    let ensemble = ensemble_accuracy(&synth, &ccfg, members, &test, seed)?;
    let mut rows = vec![
        vec!["accuracy".into(), format!("{single:.6}")],
        vec![format!("ensemble_{members}_accuracy"), format!("{ensemble:.6}")],
    ];
    if let Some((p, f)) = disc_sources {
        let d = domain_discriminator(&p.load(&image)?, &f.load(&image)?, &synth, &ccfg, seed)?;
        rows.push(vec!["fraction_finetune".into(), format!("{:.6}", d.fraction_finetune)]);
        rows.push(vec!["discriminator_heldout_accuracy".into(), format!("{:.6}", d.heldout_accuracy)]);
        rows.push(vec!["discriminator_reliable".into(), d.reliable.to_string()]);
        for (c, v) in d.per_class.iter().enumerate() {
            rows.push(vec![
                format!("fraction_finetune_class_{c}"),
                v.map_or("NA".into(), |v| format!("{v:.6}")),
            ]);
        }
    }
    write_tsv(run.file("reports", "downstream.tsv"), &["metric", "value"], &rows)?;
    println!("eval-downstream: accuracy {single:.4}, ensemble({members}) {ensemble:.4}");
    Ok(())
}

trait CheckedLabels: Sized {
    fn with_labels_checked(self, classes: usize) -> Result<Self>;
}

impl CheckedLabels for LabeledImageSet {
    /// Widens the label space of a loaded set to `classes`.
    fn with_labels_checked(self, classes: usize) -> Result<Self> {
        if self.num_classes > classes {
            bail!("label space mismatch: data has {} classes, expected {classes}", self.num_classes);
        }
        Ok(self.with_labels(self.labels.clone(), classes)?)
    }
}

pub fn model_select(cfg: &mut Config, run: &RunDir) -> Result<()> {
    let seed = cfg.get("seed", 0u64)?;
    let image = ImageSettings::resolve(cfg)?;
    let test = real_test(cfg)?;
    let synth = DataSource::idx(cfg, "synth_")?;
    let holdout = cfg.get("synth_test_fraction", 0.2f64)?;
    if !(0.0..1.0).contains(&holdout) || holdout == 0.0 {
        bail!("config key `synth_test_fraction` must lie in (0, 1)");
    }
    let real_train = if cfg.get("setting_b", true)? {
        Some(DataSource::resolve(cfg, "real_train_", Domain::Finetune, 0, 1000, Split::Train)?)
    } else {
        None
    };
    let classes = cfg.get("num_classes", 4usize)?;
    let base = settings::classifier(cfg, &image, classes)?;
    let archs: Vec<String> = cfg.list("selection_archs", &["conv".to_string(), "mlp".to_string()])?;
    let lrs: Vec<f64> = cfg.list("selection_lrs", &[0.003, 0.03, 0.3])?;
    let wds: Vec<f64> = cfg.list("selection_weight_decays", &[0.0, 1e-3])?;
    let mut grid = Vec::new();
    for a in &archs {
        let kind = ClassifierKind::parse(a)?;
        for &lr in &lrs {
            for &wd in &wds {
                grid.push(SelectionConfig {
                    kind,
                    learning_rate: lr,
                    weight_decay: wd,
                });
            }
        }
    }
    begin("model-select", cfg, run)?;
    let synth = synth.load(&image)?.with_labels_checked(classes)?;
    let cut = synth.len() - ((synth.len() as f64 * holdout).round() as usize).max(1);
    let (s_train, s_test) = (
        synth.subset(&(0..cut).collect::<Vec<_>>()),
        synth.subset(&(cut..synth.len()).collect::<Vec<_>>()),
    );
    let real_train = match real_train {
        Some(s) => Some(s.load(&image)?),
        None => None,
    };
    let report = model_selection_study(
        &s_train,
        &s_test,
        real_train.as_ref(),
        &test.load(&image)?,
        &base,
        &grid,
        seed,
    )?;
    write_selection_tsv(run.file("reports", "selection.tsv"), &report)?;
    let fmt = |v: Option<f64>| v.map_or("undefined".into(), |v| format!("{v:.4}"));
    println!(
        "model-select: rho_a {}, rho_b {}, best real config in synthetic top 2: {}",
        fmt(report.rho_a),
        fmt(report.rho_b),
        report.best_real_in_top2
    );
    Ok(())
}
