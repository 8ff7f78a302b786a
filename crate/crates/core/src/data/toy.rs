use rand::Rng;

use crate::data::{Domain, LabeledImageSet, Split};
use crate::error::{invalid, Result};
use crate::numerics::Tensor;
use crate::rng;

/// The four toy classes, assigned round-robin by index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Disc,
    Square,
    Cross,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Disc, Shape::Square, Shape::Cross, Shape::Triangle];

    pub fn of_class(class: usize) -> Shape {
        Self::ALL[class % 4]
    }
}

/// Parameters of one procedural image domain.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyDomainSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub domain: Domain,
    pub foreground: f32,
    pub background: f32,
    /// Stroke thickness range in pixels.
    pub thickness: (f32, f32),
    /// Maximum centre offset in pixels along each axis.
    pub jitter: f32,
    /// Per-channel foreground intensity for colour variants.
    pub tint: [f32; 3],
    pub seed: u64,
}

impl ToyDomainSpec {
    /// Thin bright strokes on a dark background.
    pub fn pretrain(seed: u64) -> Self {
        Self {
            height: 16,
            width: 16,
            channels: 1,
            domain: Domain::Pretrain,
            foreground: 1.0,
            background: -1.0,
            thickness: (1.0, 1.6),
            jitter: 1.0,
            tint: [1.0, 0.7, 0.4],
            seed,
        }
    }

    /// Inverted polarity and thicker strokes relative to [`Self::pretrain`].
    pub fn finetune(seed: u64) -> Self {
        Self {
            domain: Domain::Finetune,
            foreground: -1.0,
            background: 1.0,
            thickness: (1.8, 2.6),
            jitter: 1.5,
            tint: [0.4, 0.8, 1.0],
            ..Self::pretrain(seed)
        }
    }

    pub fn with_size(mut self, height: usize, width: usize, channels: usize) -> Self {
        self.height = height;
        self.width = width;
        self.channels = channels;
        self
    }

    pub fn num_classes(&self) -> usize {
        Shape::ALL.len()
    }

    fn validate(&self) -> Result<()> {
        if self.height < 4 || self.width < 4 || !(self.channels == 1 || self.channels == 3) {
            return Err(invalid(format!(
                "toy images must be at least 4x4 with 1 or 3 channels, got {}x{}x{}",
                self.height, self.width, self.channels
            )));
        }
        let ok = |v: f32| (-1.0..=1.0).contains(&v);
        if !ok(self.foreground) || !ok(self.background) {
            return Err(invalid("toy intensities must lie in [-1, 1]"));
        }
        if !(self.thickness.0 > 0.0 && self.thickness.0 <= self.thickness.1) {
            return Err(invalid("toy thickness range must be positive and ordered"));
        }
        Ok(())
    }

    /// Image `index` as a flat `H * W * C` buffer. Pure in `(self, index)`.
    pub fn render(&self, index: u64) -> Vec<f32> {
        let mut rng = rng::indexed(self.seed ^ domain_salt(self.domain), index);
        let shape = Shape::of_class(index as usize);
        let (h, w) = (self.height as f32, self.width as f32);
        let cx = w / 2.0 + rng.random_range(-self.jitter..=self.jitter);
        let cy = h / 2.0 + rng.random_range(-self.jitter..=self.jitter);
        let radius = h.min(w) * rng.random_range(0.26f32..0.36);
        let thick = rng.random_range(self.thickness.0..=self.thickness.1);

        let mut out = Vec::with_capacity(self.height * self.width * self.channels);
        for y in 0..self.height {
            for x in 0..self.width {
                let px = x as f32 + 0.5 - cx;
                let py = y as f32 + 0.5 - cy;
                let d = stroke_distance(shape, px, py, radius);
                let coverage = (thick / 2.0 - d + 0.5).clamp(0.0, 1.0);
                for c in 0..self.channels {
                    let fg = if self.channels == 1 {
                        self.foreground
                    } else {
                        self.background + (self.foreground - self.background) * self.tint[c]
                    };
                    out.push(self.background + (fg - self.background) * coverage);
                }
            }
        }
        out
    }
}

fn domain_salt(d: Domain) -> u64 {
    match d {
        Domain::Pretrain => 0x5052_4554,
        Domain::Finetune => 0x4649_4e45,
    }
}

fn segment_distance(px: f32, py: f32, a: (f32, f32), b: (f32, f32)) -> f32 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let t = (((px - a.0) * dx + (py - a.1) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
    let (qx, qy) = (a.0 + t * dx - px, a.1 + t * dy - py);
    (qx * qx + qy * qy).sqrt()
}

/// Distance from `(px, py)` (relative to the shape centre) to the shape's stroke.
fn stroke_distance(shape: Shape, px: f32, py: f32, r: f32) -> f32 {
    match shape {
        Shape::Disc => ((px * px + py * py).sqrt() - r).abs(),
        Shape::Square => {
            let s = 0.85 * r;
            (px.abs().max(py.abs()) - s).abs()
        }
        Shape::Cross => segment_distance(px, py, (-r, 0.0), (r, 0.0))
            .min(segment_distance(px, py, (0.0, -r), (0.0, r))),
        Shape::Triangle => {
            let v: Vec<(f32, f32)> = [-90f32, 30.0, 150.0]
                .iter()
                .map(|deg| {
                    let a = deg.to_radians();
                    (r * a.cos(), r * a.sin())
                })
                .collect();
            (0..3)
                .map(|i| segment_distance(px, py, v[i], v[(i + 1) % 3]))
                .fold(f32::INFINITY, f32::min)
        }
    }
}

/// `n` images with labels `i % 4`, indices `0..n`.
pub fn generate_toy(spec: &ToyDomainSpec, n: usize) -> Result<LabeledImageSet> {
    generate_toy_split(spec, Split::Train, 0, n)
}

/// `n` images at indices `offset..offset + n`, so disjoint index ranges give
/// disjoint splits of the same domain.
pub fn generate_toy_split(
    spec: &ToyDomainSpec,
    split: Split,
    offset: usize,
    n: usize,
) -> Result<LabeledImageSet> {
    spec.validate()?;
    if n == 0 {
        return Err(invalid("toy dataset size must be at least 1"));
    }
    let mut data = Vec::with_capacity(n * spec.height * spec.width * spec.channels);
    let mut labels = Vec::with_capacity(n);
    for i in offset..offset + n {
        data.extend(spec.render(i as u64));
        labels.push(i % spec.num_classes());
    }
    let images = Tensor::new(vec![n, spec.height, spec.width, spec.channels], data)?;
    LabeledImageSet::new(images, labels, spec.num_classes(), spec.domain, split)
}
