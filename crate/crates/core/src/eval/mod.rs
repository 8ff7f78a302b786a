//! Synthetic-data evaluation: Fréchet distance on learned features,
//! downstream accuracy, ensembling, domain discrimination and rank agreement
//! between synthetic and real validation.

mod classifier;
mod fid;
mod selection;

use std::fs;
use std::io::Write;
use std::path::Path;

pub use classifier::{
    accuracy_of, train_classifier, ClassifierArch, ClassifierConfig, ClassifierKind,
    TrainedClassifier,
};
pub use fid::{fid_like_score, frechet_distance, FeatureExtractor, FidReport, GaussianFit, COVARIANCE_RIDGE};
pub use selection::{
    model_selection_study, spearman, ModelSelectionRecord, SelectionConfig, SelectionReport,
};

use crate::data::{Domain, LabeledImageSet};
use crate::error::{invalid, Result};
use crate::numerics::Tensor;

fn check_label_space(synth: &LabeledImageSet, test: &LabeledImageSet) -> Result<()> {
    if synth.num_classes != test.num_classes {
        return Err(invalid(format!(
            "label space mismatch: {} vs {} classes",
            synth.num_classes, test.num_classes
        )));
    }
    Ok(())
}

/// Trains a classifier on `synth` and reports its accuracy on `real_test`.
pub fn train_downstream(
    synth: &LabeledImageSet,
    config: &ClassifierConfig,
    real_test: &LabeledImageSet,
    seed: u64,
) -> Result<f64> {
    check_label_space(synth, real_test)?;
    train_classifier(synth, config, seed, seed)?.accuracy(real_test)
}

/// Softmax-averaged ensemble of classifiers that share `init_seed` and differ
/// only in their minibatch seeds.
pub fn ensemble_accuracy_with_seeds(
    synth: &LabeledImageSet,
    config: &ClassifierConfig,
    init_seed: u64,
    batch_seeds: &[u64],
    real_test: &LabeledImageSet,
) -> Result<f64> {
    use rayon::prelude::*;
    check_label_space(synth, real_test)?;
    if batch_seeds.is_empty() {
        return Err(invalid("ensemble needs at least one member"));
    }
    let members: Vec<Vec<Vec<f64>>> = batch_seeds
        .par_iter()
        .map(|&s| train_classifier(synth, config, init_seed, s)?.predict_proba(real_test))
        .collect::<Result<_>>()?;
    let m = members.len() as f64;
    let avg: Vec<Vec<f64>> = (0..real_test.len())
        .map(|i| {
            let k = members[0][i].len();
            (0..k)
                .map(|c| members.iter().map(|p| p[i][c]).sum::<f64>() / m)
                .collect()
        })
        .collect();
    Ok(accuracy_of(&avg, &real_test.labels))
}

/// Ensemble of `m` members with batch seeds `seed, seed + 1, …`; `m = 1`
/// reproduces [`train_downstream`] with the same seed.
pub fn ensemble_accuracy(
    synth: &LabeledImageSet,
    config: &ClassifierConfig,
    m: usize,
    real_test: &LabeledImageSet,
    seed: u64,
) -> Result<f64> {
    let seeds: Vec<u64> = (0..m as u64).map(|j| seed.wrapping_add(j)).collect();
    ensemble_accuracy_with_seeds(synth, config, seed, &seeds, real_test)
}

/// Held-out accuracy the discriminator must reach for its verdict to count.
pub const DISCRIMINATOR_MIN_ACCURACY: f64 = 0.9;

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorReport {
    /// Fraction of synthetic images classified as the fine-tune domain.
    pub fraction_finetune: f64,
    /// The same fraction restricted to each synthetic class label.
    pub per_class: Vec<Option<f64>>,
    pub heldout_accuracy: f64,
    pub pretrain_recall: f64,
    pub finetune_recall: f64,
    /// Held-out accuracy reached [`DISCRIMINATOR_MIN_ACCURACY`].
    pub reliable: bool,
}

fn relabel_domain(set: &LabeledImageSet) -> Result<LabeledImageSet> {
    let y = match set.domain {
        Domain::Pretrain => 0,
        Domain::Finetune => 1,
    };
    set.with_labels(vec![y; set.len()], 2)
}

fn split_fifth(set: &LabeledImageSet) -> (LabeledImageSet, LabeledImageSet) {
    let cut = set.len() - set.len() / 5;
    let train: Vec<usize> = (0..cut).collect();
    let held: Vec<usize> = (cut..set.len()).collect();
    (set.subset(&train), set.subset(&held))
}

/// Trains a pretrain-vs-finetune discriminator on 80% of each real set,
/// checks it on the remaining 20% and applies it to `synth`.
pub fn domain_discriminator(
    pretrain: &LabeledImageSet,
    finetune: &LabeledImageSet,
    synth: &LabeledImageSet,
    config: &ClassifierConfig,
    seed: u64,
) -> Result<DiscriminatorReport> {
    if pretrain.len() < 5 || finetune.len() < 5 || synth.is_empty() {
        return Err(invalid("domain discriminator needs at least 5 images per real domain"));
    }
    let (pt_train, pt_held) = split_fifth(&relabel_domain(pretrain)?);
    let (ft_train, ft_held) = split_fifth(&relabel_domain(finetune)?);
    let mut cfg = config.clone();
    cfg.arch.num_classes = 2;
    let disc = train_classifier(&pt_train.concat(&ft_train)?, &cfg, seed, seed)?;
    let pretrain_recall = disc.accuracy(&pt_held)?;
    let finetune_recall = disc.accuracy(&ft_held)?;
    let heldout_accuracy = (pretrain_recall * pt_held.len() as f64
        + finetune_recall * ft_held.len() as f64)
        / (pt_held.len() + ft_held.len()) as f64;
    let probs = disc.predict_proba(&synth.with_labels(vec![0; synth.len()], 2)?)?;
    let is_ft: Vec<bool> = probs.iter().map(|p| classifier::argmax(p) == 1).collect();
    let frac = |sel: &dyn Fn(usize) -> bool| {
        let (hit, tot) = (0..synth.len())
            .filter(|&i| sel(i))
            .fold((0usize, 0usize), |(h, t), i| (h + is_ft[i] as usize, t + 1));
        (tot > 0).then(|| hit as f64 / tot as f64)
    };
    let per_class = (0..synth.num_classes)
        .map(|c| frac(&|i| synth.labels[i] == c))
        .collect();
    Ok(DiscriminatorReport {
        fraction_finetune: frac(&|_| true).unwrap_or(0.0),
        per_class,
        heldout_accuracy,
        pretrain_recall,
        finetune_recall,
        reliable: heldout_accuracy >= DISCRIMINATOR_MIN_ACCURACY,
    })
}

/// Adds independent `N(0, s²)` noise to every pixel, clamped to `[−1, 1]`.
pub fn add_pixel_noise(set: &LabeledImageSet, s: f64, seed: u64) -> Result<LabeledImageSet> {
    use rand::Rng;
    use rand_distr::StandardNormal;
    let mut rng = crate::rng::stream(seed, crate::rng::Stream::Data);
    let images = Tensor::new(
        set.images.shape().to_vec(),
        set.images
            .data()
            .iter()
            .map(|&v| (v as f64 + s * rng.sample::<f64, _>(StandardNormal)).clamp(-1.0, 1.0) as f32)
            .collect(),
    )?;
    LabeledImageSet::new(images, set.labels.clone(), set.num_classes, set.domain, set.split)
}

/// Writes a tab-separated table with a header row.
pub fn write_tsv(path: impl AsRef<Path>, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "{}", header.join("\t"))?;
    for r in rows {
        if r.len() != header.len() {
            return Err(invalid(format!(
                "row has {} fields, header has {}",
                r.len(),
                header.len()
            )));
        }
        writeln!(f, "{}", r.join("\t"))?;
    }
    Ok(())
}

/// `fid.tsv`: one `all` row followed by one row per class.
pub fn write_fid_tsv(path: impl AsRef<Path>, report: &FidReport) -> Result<()> {
    let mut rows = vec![vec![
        "all".to_string(),
        format!("{:.6}", report.score),
        report.regularized.to_string(),
    ]];
    for (c, v) in report.per_class.iter().enumerate() {
        rows.push(vec![
            c.to_string(),
            v.map_or("NA".into(), |v| format!("{v:.6}")),
            report.regularized.to_string(),
        ]);
    }
    write_tsv(path, &["class", "fid", "regularized"], &rows)
}

/// `selection.tsv`: one row per grid configuration, then the ρ summaries.
pub fn write_selection_tsv(path: impl AsRef<Path>, report: &SelectionReport) -> Result<()> {
    let fmt = |v: Option<f64>| v.map_or("NA".into(), |v| format!("{v:.6}"));
    let mut rows: Vec<Vec<String>> = report
        .records
        .iter()
        .map(|r| {
            vec![
                r.arch.clone(),
                format!("{}", r.learning_rate),
                format!("{}", r.weight_decay),
                format!("{:.6}", r.acc_synthetic),
                format!("{:.6}", r.acc_real),
                fmt(r.acc_real_trained_on_real),
            ]
        })
        .collect();
    for (name, v) in [("rho_a", report.rho_a), ("rho_b", report.rho_b)] {
        rows.push(vec![name.into(), fmt(v), "".into(), "".into(), "".into(), "".into()]);
    }
    rows.push(vec![
        "best_real_in_top2_synthetic".into(),
        report.best_real_in_top2.to_string(),
        "".into(),
        "".into(),
        "".into(),
        "".into(),
    ]);
    write_tsv(
        path,
        &["arch", "lr", "weight_decay", "acc_synthetic", "acc_real", "acc_real_trained_on_real"],
        &rows,
    )
}
