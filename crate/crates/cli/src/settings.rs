//! Typed settings resolved from a [`Config`].

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use dpdm_core::data::{generate_toy_split, load_idx, ToyDomainSpec};
use dpdm_core::eval::{ClassifierArch, ClassifierConfig, ClassifierKind};
use dpdm_core::optim::{AdamHyper, OptimizerKind};
use dpdm_core::{
    AugmentationPolicy, DenoiserArch, Domain, LabeledImageSet, NoiseSchedule, Split,
    TimestepMixture,
};

use crate::config::Config;

/// Image geometry shared by every toy set of a run.
#[derive(Clone, Copy, Debug)]
pub struct ImageSettings {
    pub size: usize,
    pub channels: usize,
    pub toy_seed: u64,
}

impl ImageSettings {
    pub fn resolve(cfg: &mut Config) -> Result<Self> {
        Ok(Self {
            size: cfg.get("image_size", 12)?,
            channels: cfg.get("image_channels", 1)?,
            toy_seed: cfg.get("toy_seed", 0)?,
        })
    }
}

/// Where a labelled image set comes from.
#[derive(Clone, Debug)]
pub enum DataSource {
    Toy {
        domain: Domain,
        offset: usize,
        n: usize,
        split: Split,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        num_classes: Option<usize>,
    },
}

fn parse_domain(s: &str) -> Result<Domain> {
    match s {
        "pretrain" => Ok(Domain::Pretrain),
        "finetune" => Ok(Domain::Finetune),
        _ => bail!("unknown toy domain `{s}` (expected pretrain or finetune)"),
    }
}

impl DataSource {
    /// Reads `{prefix}data` (`toy` or `idx`) and the matching keys.
    pub fn resolve(
        cfg: &mut Config,
        prefix: &str,
        domain: Domain,
        offset: usize,
        n: usize,
        split: Split,
    ) -> Result<Self> {
        let kind: String = cfg.get(&format!("{prefix}data"), "toy".to_string())?;
        match kind.as_str() {
            "toy" => {
                let d: String = cfg.get(&format!("{prefix}toy_domain"), domain.to_string())?;
                Ok(DataSource::Toy {
                    domain: parse_domain(&d)?,
                    offset: cfg.get(&format!("{prefix}toy_offset"), offset)?,
                    n: cfg.get(&format!("{prefix}toy_n"), n)?,
                    split,
                })
            }
            "idx" => Ok(DataSource::Idx {
                images: PathBuf::from(cfg.require::<String>(&format!("{prefix}images"))?),
                labels: PathBuf::from(cfg.require::<String>(&format!("{prefix}labels"))?),
                num_classes: cfg.opt(&format!("{prefix}num_classes"))?,
            }),
            other => bail!("config key `{prefix}data`: unknown source `{other}`"),
        }
    }

    /// An IDX pair given by explicit keys, as produced by `sample`.
    pub fn idx(cfg: &mut Config, prefix: &str) -> Result<Self> {
        Ok(DataSource::Idx {
            images: PathBuf::from(cfg.require::<String>(&format!("{prefix}images"))?),
            labels: PathBuf::from(cfg.require::<String>(&format!("{prefix}labels"))?),
            num_classes: cfg.opt(&format!("{prefix}num_classes"))?,
        })
    }

    pub fn load(&self, image: &ImageSettings) -> Result<LabeledImageSet> {
        match self {
            DataSource::Toy {
                domain,
                offset,
                n,
                split,
            } => {
                let spec = match domain {
                    Domain::Pretrain => ToyDomainSpec::pretrain(image.toy_seed),
                    Domain::Finetune => ToyDomainSpec::finetune(image.toy_seed),
                }
                .with_size(image.size, image.size, image.channels);
                Ok(generate_toy_split(&spec, *split, *offset, *n)?)
            }
            DataSource::Idx {
                images,
                labels,
                num_classes,
            } => {
                let set = load_idx(images, labels)
                    .with_context(|| format!("loading {}", images.display()))?;
                match num_classes {
                    Some(k) => Ok(set.with_labels(set.labels.clone(), *k)?),
                    None => Ok(set),
                }
            }
        }
    }
}

pub fn denoiser_arch(cfg: &mut Config, image: &ImageSettings, classes: usize) -> Result<DenoiserArch> {
    let mut arch = DenoiserArch::new(image.size, image.size, image.channels, classes);
    arch.hidden = cfg.list("hidden", &[256, 256])?;
    arch.time_dim = cfg.get("time_dim", 32)?;
    arch.conv_channels = cfg.get("conv_channels", 16)?;
    arch.validate()?;
    Ok(arch)
}

#[derive(Clone, Copy, Debug)]
pub struct ScheduleSettings {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleSettings {
    /// Defaults stretch the standard 1000-step endpoints to the chain length.
    pub fn resolve(cfg: &mut Config) -> Result<Self> {
        let steps: usize = cfg.get("diffusion_steps", 100)?;
        if steps == 0 {
            bail!("config key `diffusion_steps` must be positive");
        }
        let scale = 1000.0 / steps as f64;
        Ok(Self {
            steps,
            beta_start: cfg.get("beta_start", 1e-4 * scale)?,
            beta_end: cfg.get("beta_end", (0.02 * scale).min(0.999))?,
        })
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        Ok(NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)?)
    }

    pub fn to_kv(&self) -> String {
        format!(
            "diffusion_steps = {}\nbeta_start = {}\nbeta_end = {}\n",
            self.steps, self.beta_start, self.beta_end
        )
    }

    /// Reads the lines written by [`Self::to_kv`] back from checkpoint text.
    pub fn from_kv(text: &str) -> Result<Self> {
        let cfg_text: String = text
            .lines()
            .filter(|l| {
                let k = l.split('=').next().unwrap_or("").trim();
                matches!(k, "diffusion_steps" | "beta_start" | "beta_end")
            })
            .map(|l| format!("{l}\n"))
            .collect();
        let mut c = Config::from_text(&cfg_text)?;
        for k in ["diffusion_steps", "beta_start", "beta_end"] {
            if !c.contains(k) {
                bail!("checkpoint does not record `{k}`");
            }
        }
        Self::resolve(&mut c)
    }
}

pub fn mixture(cfg: &mut Config, steps: usize) -> Result<TimestepMixture> {
    let name: String = cfg.get("mixture", "natural_images".to_string())?;
    let full = match name.as_str() {
        "natural_images" => TimestepMixture::natural_images(),
        "digits" => TimestepMixture::digits(),
        "uniform" => return Ok(TimestepMixture::uniform(steps)),
        "custom" => {
            let weights: Vec<f64> = cfg.list("mixture_weights", &[])?;
            let bounds: Vec<usize> = cfg.list("mixture_bounds", &[])?;
            return Ok(TimestepMixture::from_boundaries(&weights, &bounds, steps)?);
        }
        other => bail!("config key `mixture`: unknown mixture `{other}`"),
    };
    Ok(full.rescaled(steps)?)
}

pub fn policy(cfg: &mut Config) -> Result<AugmentationPolicy> {
    Ok(AugmentationPolicy {
        flip: cfg.get("aug_flip", true)?,
        max_shift: cfg.get("aug_shift", 0)?,
        resample_timesteps: cfg.get("aug_timesteps", true)?,
    })
}

pub fn optimizer(cfg: &mut Config, default_lr: f64) -> Result<OptimizerKind> {
    let kind: String = cfg.get("optimizer", "adam".to_string())?;
    let lr = cfg.get("lr", default_lr)?;
    let opt = match kind.as_str() {
        "adam" => OptimizerKind::Adam(AdamHyper {
            lr,
            beta1: cfg.get("beta1", 0.9)?,
            beta2: cfg.get("beta2", 0.999)?,
            eps: cfg.get("adam_eps", 1e-8)?,
        }),
        "sgd" => OptimizerKind::Sgd {
            lr,
            momentum: cfg.get("momentum", 0.0)?,
            weight_decay: cfg.get("weight_decay", 0.0)?,
        },
        other => bail!("config key `optimizer`: unknown optimizer `{other}`"),
    };
    opt.validate()?;
    Ok(opt)
}

pub fn classifier(cfg: &mut Config, image: &ImageSettings, classes: usize) -> Result<ClassifierConfig> {
    let kind: String = cfg.get("classifier", "conv".to_string())?;
    let mut arch = ClassifierArch::new(
        ClassifierKind::parse(&kind)?,
        [image.size, image.size, image.channels],
        classes,
    );
    arch.feature_dim = cfg.get("feature_dim", arch.feature_dim)?;
    arch.width_factor = cfg.get("classifier_width", arch.width_factor)?;
    let mut c = ClassifierConfig::new(arch);
    c.epochs = cfg.get("classifier_epochs", c.epochs)?;
    c.batch_size = cfg.get("classifier_batch_size", c.batch_size)?;
    c.flip = cfg.get("classifier_flip", c.flip)?;
    let lr = cfg.get("classifier_lr", 0.05)?;
    let wd = cfg.get("classifier_weight_decay", 5e-4)?;
    let momentum = cfg.get("classifier_momentum", 0.9)?;
    c.optimizer = OptimizerKind::Sgd {
        lr,
        momentum,
        weight_decay: wd,
    };
    c.optimizer.validate()?;
    c.arch.validate()?;
    Ok(c)
}
