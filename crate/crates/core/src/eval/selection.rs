use rayon::prelude::*;

use crate::data::LabeledImageSet;
use crate::error::{invalid, Result};
use crate::eval::classifier::{train_classifier, ClassifierConfig, ClassifierKind};

/// One grid point of a model-selection study.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SelectionConfig {
    pub kind: ClassifierKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSelectionRecord {
    pub arch: String,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Trained on synthetic data, evaluated on synthetic test data.
    pub acc_synthetic: f64,
    /// Trained on synthetic data, evaluated on real test data.
    pub acc_real: f64,
    /// Trained and evaluated on real data, when a real training set is given.
    pub acc_real_trained_on_real: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionReport {
    pub records: Vec<ModelSelectionRecord>,
    /// Synthetic-test vs real-test accuracy of synthetic-trained models.
    pub rho_a: Option<f64>,
    /// Synthetic-trained/synthetic-tested vs real-trained/real-tested.
    pub rho_b: Option<f64>,
    /// The best configuration on real data ranks first or second on synthetic data.
    pub best_real_in_top2: bool,
}

/// Ranks starting at 1, ties receiving their average rank.
fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation; `None` when either list is constant or the
/// lengths differ or are below 2.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

fn best_in_top2(synthetic: &[f64], real: &[f64]) -> bool {
    let Some(best) = (0..real.len()).max_by(|&a, &b| real[a].total_cmp(&real[b]).then(b.cmp(&a)))
    else {
        return false;
    };
    synthetic.iter().filter(|&&s| s > synthetic[best]).count() < 2
}

/// Trains every grid configuration on synthetic data (and on real data when
/// `real_train` is given) and compares the rankings.
///
/// `base` supplies everything except architecture kind, learning rate and
/// weight decay. Configurations run in parallel, each seeded with `seed`.
pub fn model_selection_study(
    synth_train: &LabeledImageSet,
    synth_test: &LabeledImageSet,
    real_train: Option<&LabeledImageSet>,
    real_test: &LabeledImageSet,
    base: &ClassifierConfig,
    grid: &[SelectionConfig],
    seed: u64,
) -> Result<SelectionReport> {
    let mut kinds: Vec<ClassifierKind> = grid.iter().map(|c| c.kind).collect();
    kinds.sort_by_key(|k| k.name());
    kinds.dedup();
    if grid.len() < 6 || kinds.len() < 2 {
        return Err(invalid(
            "model selection needs at least 6 configurations over at least 2 architectures",
        ));
    }
    let records: Vec<ModelSelectionRecord> = grid
        .par_iter()
        .map(|sc| {
            let mut cfg = base.clone().with_hyper(sc.learning_rate, sc.weight_decay);
            cfg.arch.kind = sc.kind;
            let on_synth = train_classifier(synth_train, &cfg, seed, seed)?;
            let acc_real_trained_on_real = match real_train {
                Some(rt) => Some(train_classifier(rt, &cfg, seed, seed)?.accuracy(real_test)?),
                None => None,
            };
            Ok(ModelSelectionRecord {
                arch: sc.kind.name().to_string(),
                learning_rate: sc.learning_rate,
                weight_decay: sc.weight_decay,
                acc_synthetic: on_synth.accuracy(synth_test)?,
                acc_real: on_synth.accuracy(real_test)?,
                acc_real_trained_on_real,
            })
        })
        .collect::<Result<_>>()?;
    let syn: Vec<f64> = records.iter().map(|r| r.acc_synthetic).collect();
    let real: Vec<f64> = records.iter().map(|r| r.acc_real).collect();
    let rho_b = records
        .iter()
        .map(|r| r.acc_real_trained_on_real)
        .collect::<Option<Vec<f64>>>()
        .and_then(|rr| spearman(&syn, &rr));
    Ok(SelectionReport {
        rho_a: spearman(&syn, &real),
        rho_b,
        best_real_in_top2: best_in_top2(&syn, &real),
        records,
    })
}
