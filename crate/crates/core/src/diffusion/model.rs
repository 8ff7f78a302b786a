use std::collections::BTreeMap;

use rand::Rng;

use crate::diffusion::schedule::NoiseSchedule;
use crate::error::{invalid, Error, Result};
use crate::numerics::{
    Bound, ConvLayer, DenseLayer, Graph, ParameterSet, Real, Reduction, Tensor, Var,
};

/// Shape of the noise-prediction network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DenoiserArch {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Widths of the conditioned hidden layers.
    pub hidden: Vec<usize>,
    /// Sinusoidal timestep embedding size (even).
    pub time_dim: usize,
    /// Hidden channels of a time-conditioned two-layer 3x3 convolutional
    /// branch whose output is added to the dense prediction; 0 disables it.
    pub conv_channels: usize,
    pub num_classes: usize,
}

impl DenoiserArch {
    pub fn new(height: usize, width: usize, channels: usize, num_classes: usize) -> Self {
        Self {
            height,
            width,
            channels,
            hidden: vec![256, 256],
            time_dim: 32,
            conv_channels: 0,
            num_classes,
        }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.pixels() == 0 || self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(invalid("denoiser needs a non-empty image and hidden layers"));
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return Err(invalid("denoiser time_dim must be even and positive"));
        }
        if self.num_classes == 0 {
            return Err(invalid("denoiser needs at least one class"));
        }
        Ok(())
    }

    /// `key = value` lines.
    pub fn to_kv(&self) -> String {
        let hidden: Vec<String> = self.hidden.iter().map(usize::to_string).collect();
        format!(
            "kind = denoiser\nheight = {}\nwidth = {}\nchannels = {}\nhidden = {}\n\
             time_dim = {}\nconv_channels = {}\nnum_classes = {}\n",
            self.height,
            self.width,
            self.channels,
            hidden.join(","),
            self.time_dim,
            self.conv_channels,
            self.num_classes
        )
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let map: BTreeMap<&str, &str> = text
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.trim(), v.trim()))
            .collect();
        let get = |k: &str| {
            map.get(k)
                .copied()
                .ok_or_else(|| Error::Format(format!("architecture is missing `{k}`")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Format(format!("architecture `{k}` is not an integer")))
        };
        if get("kind")? != "denoiser" {
            return Err(Error::Format("architecture kind is not `denoiser`".into()));
        }
        let hidden = get("hidden")?
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| Error::Format("architecture `hidden` is malformed".into()))?;
        let arch = Self {
            height: num("height")?,
            width: num("width")?,
            channels: num("channels")?,
            hidden,
            time_dim: num("time_dim")?,
            conv_channels: num("conv_channels")?,
            num_classes: num("num_classes")?,
        };
        arch.validate()?;
        Ok(arch)
    }
}

/// Class-conditional noise predictor ε_θ(x_t, t, y).
///
/// Each hidden layer receives `dense(time embedding) + class embedding`
/// added to its pre-activation. The optional convolutional branch sees only
/// the local neighbourhood of each pixel, which is where small-`t` noise is
/// recognisable; a plain dense network fits that regime poorly.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserModel {
    pub arch: DenoiserArch,
}

impl DenoiserModel {
    pub fn new(arch: DenoiserArch) -> Result<Self> {
        arch.validate()?;
        Ok(Self { arch })
    }

    fn local(&self) -> Option<(ConvLayer, DenseLayer, ConvLayer)> {
        let (a, c) = (&self.arch, self.arch.conv_channels);
        (c > 0).then(|| {
            (
                ConvLayer::new("local0", 3, a.channels, c),
                DenseLayer::new("local_time", a.time_dim, c),
                ConvLayer::new("local1", 3, c, a.channels),
            )
        })
    }

    fn layers(&self) -> (Vec<DenseLayer>, Vec<DenseLayer>, DenseLayer) {
        let a = &self.arch;
        let mut width = a.pixels();
        let mut hidden = Vec::new();
        let mut time = Vec::new();
        for (i, &h) in a.hidden.iter().enumerate() {
            hidden.push(DenseLayer::new(format!("hidden{i}"), width, h));
            time.push(DenseLayer::new(format!("time{i}"), a.time_dim, h));
            width = h;
        }
        (hidden, time, DenseLayer::new("out", width, a.pixels()))
    }

    pub fn init<T: Real, R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParameterSet<T>> {
        let mut p = ParameterSet::new();
        if let Some((c0, t, c1)) = self.local() {
            c0.init(&mut p, rng)?;
            t.init(&mut p, rng)?;
            c1.init(&mut p, rng)?;
        }
        let (hidden, time, out) = self.layers();
        for (i, (h, t)) in hidden.iter().zip(&time).enumerate() {
            h.init(&mut p, rng)?;
            t.init(&mut p, rng)?;
            // Class embeddings start small so conditioning is learned, not imposed.
            let table = Tensor::from_fn(&[self.arch.num_classes, h.outputs], |_| {
                T::of(rng.random_range(-0.1..0.1))
            });
            p.insert(format!("class{i}.table"), table)?;
        }
        out.init(&mut p, rng)?;
        Ok(p)
    }

    /// ε prediction for `x: [N, H, W, C]` at per-row timesteps and labels.
    pub fn predict_graph<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        timesteps: &[usize],
        labels: &[usize],
    ) -> Result<Var> {
        let a = &self.arch;
        let n = g.value(x).rows();
        if g.shape(x) != [n, a.height, a.width, a.channels] {
            return Err(Error::ShapeMismatch {
                op: "denoiser",
                left: vec![n, a.height, a.width, a.channels],
                right: g.shape(x).to_vec(),
            });
        }
        if timesteps.len() != n || labels.len() != n {
            return Err(invalid(format!(
                "denoiser: {n} rows but {} timesteps and {} labels",
                timesteps.len(),
                labels.len()
            )));
        }
        let mut h = g.flatten_rows(x)?;
        let t = g.input(Tensor::new(
            vec![n],
            timesteps.iter().map(|&t| T::of(t as f64)).collect(),
        )?);
        let temb = g.time_embedding(t, a.time_dim)?;
        let (hidden, time, out) = self.layers();
        for (i, (hl, tl)) in hidden.iter().zip(&time).enumerate() {
            let pre = hl.apply(g, p, h)?;
            let tc = tl.apply(g, p, temb)?;
            let cc = g.embedding(p.get(&format!("class{i}.table"))?, labels)?;
            let cond = g.add(tc, cc)?;
            let z = g.add(pre, cond)?;
            h = g.silu(z);
        }
        let y = out.apply(g, p, h)?;
        let y = g.reshape(y, &[n, a.height, a.width, a.channels])?;
        match self.local() {
            Some((c0, tl, c1)) => {
                let z = c0.apply(g, p, x)?;
                let tc = tl.apply(g, p, temb)?;
                let z = g.add_channels(z, tc)?;
                let z = g.silu(z);
                let l = c1.apply(g, p, z)?;
                g.add(y, l)
            }
            None => Ok(y),
        }
    }

    /// Mean over rows of `‖eps − ε_θ(√ᾱ_t x0 + √(1−ᾱ_t) eps, t, y)‖²`.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_graph<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        schedule: &NoiseSchedule,
        x0: Var,
        eps: Var,
        timesteps: &[usize],
        labels: &[usize],
    ) -> Result<Var> {
        let mut sa = Vec::with_capacity(timesteps.len());
        let mut sb = Vec::with_capacity(timesteps.len());
        for &t in timesteps {
            let ab = schedule.alpha_bar(t)?;
            sa.push(T::of(ab.sqrt()));
            sb.push(T::of((1.0 - ab).sqrt()));
        }
        let xt = g.row_axpby(x0, eps, &sa, &sb)?;
        let pred = self.predict_graph(g, p, xt, timesteps, labels)?;
        g.squared_error(pred, eps, Reduction::SumPerRow)
    }

    /// Batched ε prediction without gradient bookkeeping.
    pub fn predict<T: Real>(
        &self,
        params: &ParameterSet<T>,
        x: &Tensor<T>,
        timesteps: &[usize],
        labels: &[usize],
    ) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = g.bind(params);
        let xv = g.input(x.clone());
        let y = self.predict_graph(&mut g, &p, xv, timesteps, labels)?;
        Ok(g.value(y).clone())
    }
}

/// Single-draw diffusion loss `‖eps − ε_θ(x_t, t, y)‖²` for one image
/// `x0: [H, W, C]`.
pub fn diffusion_loss<T: Real>(
    model: &DenoiserModel,
    params: &ParameterSet<T>,
    schedule: &NoiseSchedule,
    x0: &Tensor<T>,
    label: usize,
    t: usize,
    eps: &Tensor<T>,
) -> Result<T> {
    let mut shape = vec![1];
    shape.extend_from_slice(x0.shape());
    let mut g = Graph::new();
    let p = g.bind(params);
    let x = g.input(x0.reshape(&shape)?);
    let e = g.input(eps.reshape(&shape)?);
    let loss = model.loss_graph(&mut g, &p, schedule, x, e, &[t], &[label])?;
    g.value(loss).item()
}
