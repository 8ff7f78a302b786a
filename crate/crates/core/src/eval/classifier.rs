//! Small image classifiers used for downstream accuracy, feature embeddings
//! and domain discrimination. Always trained non-privately.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::{augment_with, LabeledImageSet};
use crate::error::{invalid, Result};
use crate::numerics::{
    gradient, softmax_rows, Bound, ConvLayer, DenseLayer, Graph, ParameterSet, Tensor, Var,
};
use crate::optim::{Optimizer, OptimizerKind};
use crate::rng::{self, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ClassifierKind {
    /// Two conv/pool stages, then a dense feature layer.
    Conv,
    /// Two dense hidden layers.
    Mlp,
}

impl ClassifierKind {
    pub fn name(self) -> &'static str {
        match self {
            ClassifierKind::Conv => "conv",
            ClassifierKind::Mlp => "mlp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "conv" => Ok(ClassifierKind::Conv),
            "mlp" => Ok(ClassifierKind::Mlp),
            _ => Err(invalid(format!("unknown classifier architecture `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierArch {
    pub kind: ClassifierKind,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_classes: usize,
    /// Channel widths of the two conv stages (conv) or the first hidden width (mlp).
    pub width_factor: usize,
    /// Penultimate (embedding) dimension.
    pub feature_dim: usize,
}

impl ClassifierArch {
    pub fn new(kind: ClassifierKind, image: [usize; 3], num_classes: usize) -> Self {
        Self {
            kind,
            height: image[0],
            width: image[1],
            channels: image[2],
            num_classes,
            width_factor: 8,
            feature_dim: 64,
        }
    }

    fn convs(&self) -> [ConvLayer; 2] {
        let c = self.width_factor;
        [
            ConvLayer::new("conv0", 3, self.channels, c),
            ConvLayer::new("conv1", 3, c, 2 * c),
        ]
    }

    fn dense(&self) -> [DenseLayer; 2] {
        let flat = match self.kind {
            ClassifierKind::Conv => (self.height / 4) * (self.width / 4) * 2 * self.width_factor,
            ClassifierKind::Mlp => self.height * self.width * self.channels,
        };
        [
            DenseLayer::new("features", flat, self.feature_dim),
            DenseLayer::new("logits", self.feature_dim, self.num_classes),
        ]
    }

    fn mlp_hidden(&self) -> DenseLayer {
        let flat = self.height * self.width * self.channels;
        DenseLayer::new("hidden", flat, flat)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.feature_dim == 0 || self.width_factor == 0 {
            return Err(invalid(format!("invalid classifier architecture {self:?}")));
        }
        if self.kind == ClassifierKind::Conv && (self.height < 4 || self.width < 4) {
            return Err(invalid("conv classifier needs images of at least 4x4"));
        }
        Ok(())
    }

    pub fn init(&self, seed: u64) -> Result<ParameterSet<f32>> {
        self.validate()?;
        let mut rng = rng::stream(seed, Stream::Init);
        let mut p = ParameterSet::new();
        match self.kind {
            ClassifierKind::Conv => {
                for c in self.convs() {
                    c.init(&mut p, &mut rng)?;
                }
            }
            ClassifierKind::Mlp => self.mlp_hidden().init(&mut p, &mut rng)?,
        }
        for d in self.dense() {
            d.init(&mut p, &mut rng)?;
        }
        Ok(p)
    }

    /// Returns `(features, logits)` for a batch `[N, H, W, C]`.
    pub fn graph(&self, g: &mut Graph<f32>, p: &Bound, x: Var) -> Result<(Var, Var)> {
        let mut h = x;
        match self.kind {
            ClassifierKind::Conv => {
                for c in self.convs() {
                    h = c.apply(g, p, h)?;
                    h = g.relu(h);
                    h = g.avg_pool(h, 2)?;
                }
                h = g.flatten_rows(h)?;
            }
            ClassifierKind::Mlp => {
                h = g.flatten_rows(h)?;
                h = self.mlp_hidden().apply(g, p, h)?;
                h = g.relu(h);
            }
        }
        let [feat, out] = self.dense();
        let f = feat.apply(g, p, h)?;
        let f = g.relu(f);
        let logits = out.apply(g, p, f)?;
        Ok((f, logits))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub arch: ClassifierArch,
    pub optimizer: OptimizerKind,
    pub epochs: usize,
    pub batch_size: usize,
    /// Random horizontal flips during training.
    pub flip: bool,
}

impl ClassifierConfig {
    pub fn new(arch: ClassifierArch) -> Self {
        Self {
            arch,
            optimizer: OptimizerKind::Sgd {
                lr: 0.05,
                momentum: 0.9,
                weight_decay: 5e-4,
            },
            epochs: 8,
            batch_size: 32,
            flip: false,
        }
    }

    pub fn with_hyper(mut self, lr: f64, weight_decay: f64) -> Self {
        self.optimizer = match self.optimizer {
            OptimizerKind::Sgd { momentum, .. } => OptimizerKind::Sgd {
                lr,
                momentum,
                weight_decay,
            },
            OptimizerKind::Adam(h) => OptimizerKind::Adam(crate::optim::AdamHyper { lr, ..h }),
        };
        self
    }
}

#[derive(Clone, Debug)]
pub struct TrainedClassifier {
    pub arch: ClassifierArch,
    pub params: ParameterSet<f32>,
}

const EVAL_CHUNK: usize = 256;

impl TrainedClassifier {
    fn run(&self, data: &LabeledImageSet) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        if data.image_shape() != [self.arch.height, self.arch.width, self.arch.channels] {
            return Err(invalid(format!(
                "classifier expects {}x{}x{} images, got {:?}",
                self.arch.height,
                self.arch.width,
                self.arch.channels,
                data.image_shape()
            )));
        }
        let mut feats = Vec::with_capacity(data.len());
        let mut probs = Vec::with_capacity(data.len());
        let idx: Vec<usize> = (0..data.len()).collect();
        for chunk in idx.chunks(EVAL_CHUNK) {
            let mut g = Graph::new();
            let p = g.bind(&self.params);
            let x = g.input(data.images.select_rows(chunk));
            let (f, logits) = self.arch.graph(&mut g, &p, x)?;
            let k = self.arch.num_classes;
            let fd = self.arch.feature_dim;
            let sm = softmax_rows(g.value(logits).data(), k);
            for r in 0..chunk.len() {
                feats.push(
                    g.value(f).data()[r * fd..(r + 1) * fd]
                        .iter()
                        .map(|&v| v as f64)
                        .collect(),
                );
                probs.push(sm[r * k..(r + 1) * k].iter().map(|&v| v as f64).collect());
            }
        }
        Ok((feats, probs))
    }

    /// Class probabilities per image.
    pub fn predict_proba(&self, data: &LabeledImageSet) -> Result<Vec<Vec<f64>>> {
        self.run(data).map(|(_, p)| p)
    }

    /// Penultimate-layer activations per image.
    pub fn embed(&self, data: &LabeledImageSet) -> Result<Vec<Vec<f64>>> {
        self.run(data).map(|(f, _)| f)
    }

    pub fn accuracy(&self, data: &LabeledImageSet) -> Result<f64> {
        let probs = self.predict_proba(data)?;
        Ok(accuracy_of(&probs, &data.labels))
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

/// Top-1 accuracy of probability rows against labels.
pub fn accuracy_of(probs: &[Vec<f64>], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = probs
        .iter()
        .zip(labels)
        .filter(|(p, &y)| argmax(p) == y)
        .count();
    hits as f64 / labels.len() as f64
}

/// Trains a classifier from `init_seed` with minibatch order (and flips)
/// drawn from `batch_seed`.
pub fn train_classifier(
    data: &LabeledImageSet,
    config: &ClassifierConfig,
    init_seed: u64,
    batch_seed: u64,
) -> Result<TrainedClassifier> {
    let arch = &config.arch;
    if data.num_classes != arch.num_classes {
        return Err(invalid(format!(
            "label space mismatch: data has {} classes, classifier {}",
            data.num_classes, arch.num_classes
        )));
    }
    if data.is_empty() {
        return Err(invalid("cannot train a classifier on an empty set"));
    }
    if config.batch_size == 0 {
        return Err(invalid("classifier batch_size must be positive"));
    }
    config.optimizer.validate()?;
    let mut params = arch.init(init_seed)?;
    let mut opt = Optimizer::new(config.optimizer);
    let mut order_rng = rng::stream(batch_seed, Stream::BatchSampling);
    let mut flip_rng = rng::stream(batch_seed, Stream::Augmentation);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut order_rng);
        for batch in order.chunks(config.batch_size) {
            let mut x = data.images.select_rows(batch);
            if config.flip {
                let [h, w, c] = data.image_shape();
                let flipped: Vec<f32> = (0..batch.len())
                    .flat_map(|r| {
                        let img = Tensor::new(vec![h, w, c], x.row(r).to_vec())
                            .expect("row has image size");
                        let f = flip_rng.random_bool(0.5);
                        augment_with(&img, f, 0, 0).into_vec()
                    })
                    .collect();
                x = Tensor::new(x.shape().to_vec(), flipped)?;
            }
            let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
            let (_, grad) = gradient(&params, |g, p| {
                let xv = g.input(x);
                let (_, logits) = arch.graph(g, p, xv)?;
                g.softmax_cross_entropy(logits, &labels)
            })?;
            opt.step(&mut params, &grad)?;
        }
    }
    Ok(TrainedClassifier {
        arch: arch.clone(),
        params,
    })
}
