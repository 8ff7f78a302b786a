//! Differentially private training of small denoising diffusion models and
//! evaluation of the synthetic data they produce.
//!
//! The crate is organised bottom-up: [`numerics`] (tensors, tape autodiff,
//! layers, checkpoints), [`data`] (toy domains, IDX files, augmentation),
//! [`diffusion`], [`privacy`] (RDP accounting), [`dp_train`] and [`eval`].

pub mod data;
pub mod diffusion;
pub mod dp_train;
mod error;
pub mod eval;
pub mod numerics;
pub mod optim;
pub mod privacy;
pub mod rng;

pub use data::{AugmentationPolicy, Domain, LabeledImageSet, Split};
pub use diffusion::{DenoiserArch, DenoiserModel, NoiseSchedule, TimestepMixture};
pub use dp_train::{DpTrainConfig, TrainSetup};
pub use error::{Error, Result};
pub use numerics::{Checkpoint, ParameterSet, Real, Tensor};
pub use optim::{AdamHyper, OptimizerKind};
pub use privacy::{MechanismSpec, PrivacySpend, RdpCurve};
