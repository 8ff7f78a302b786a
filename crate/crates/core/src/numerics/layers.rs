use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::graph::{Bound, Graph, Var};
use crate::numerics::params::{uniform_fan_in, ParameterSet};
use crate::numerics::tensor::{Real, Tensor};

/// Affine layer `[N, inputs] -> [N, outputs]`, stored as `{name}.weight`
/// (`[inputs, outputs]`) and `{name}.bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub name: String,
    pub inputs: usize,
    pub outputs: usize,
}

impl DenseLayer {
    pub fn new(name: impl Into<String>, inputs: usize, outputs: usize) -> Self {
        Self {
            name: name.into(),
            inputs,
            outputs,
        }
    }

    pub fn init<T: Real, R: Rng + ?Sized>(
        &self,
        params: &mut ParameterSet<T>,
        rng: &mut R,
    ) -> Result<()> {
        params.insert(
            format!("{}.weight", self.name),
            uniform_fan_in(&[self.inputs, self.outputs], self.inputs, rng),
        )?;
        params.insert(format!("{}.bias", self.name), Tensor::zeros(&[self.outputs]))
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let w = p.get(&format!("{}.weight", self.name))?;
        let b = p.get(&format!("{}.bias", self.name))?;
        g.dense(x, w, b)
    }
}

/// Square-kernel "same" convolution `[N, H, W, inputs] -> [N, H, W, outputs]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub name: String,
    pub kernel: usize,
    pub inputs: usize,
    pub outputs: usize,
}

impl ConvLayer {
    pub fn new(name: impl Into<String>, kernel: usize, inputs: usize, outputs: usize) -> Self {
        Self {
            name: name.into(),
            kernel,
            inputs,
            outputs,
        }
    }

    pub fn init<T: Real, R: Rng + ?Sized>(
        &self,
        params: &mut ParameterSet<T>,
        rng: &mut R,
    ) -> Result<()> {
        let k = self.kernel;
        params.insert(
            format!("{}.weight", self.name),
            uniform_fan_in(&[k, k, self.inputs, self.outputs], k * k * self.inputs, rng),
        )?;
        params.insert(format!("{}.bias", self.name), Tensor::zeros(&[self.outputs]))
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let w = p.get(&format!("{}.weight", self.name))?;
        let b = p.get(&format!("{}.bias", self.name))?;
        g.conv2d(x, w, b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Silu,
}

impl Activation {
    pub fn apply<T: Real>(self, g: &mut Graph<T>, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Silu => g.silu(x),
        }
    }
}

/// A differentiable function of a single input tensor.
pub trait Module<T: Real>: Send + Sync {
    /// Per-example input shape (without the leading batch dimension).
    fn input_shape(&self) -> Vec<usize>;

    fn forward_graph(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var>;
}

/// Passes its input through unchanged.
#[derive(Clone, Debug)]
pub struct Identity {
    pub shape: Vec<usize>,
}

impl<T: Real> Module<T> for Identity {
    fn input_shape(&self) -> Vec<usize> {
        self.shape.clone()
    }

    fn forward_graph(&self, _g: &mut Graph<T>, _p: &Bound, x: Var) -> Result<Var> {
        Ok(x)
    }
}

/// Dense layers with an activation between consecutive layers.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
    pub activation: Activation,
}

impl Mlp {
    pub fn new(prefix: &str, widths: &[usize], activation: Activation) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| DenseLayer::new(format!("{prefix}{i}"), w[0], w[1]))
            .collect();
        Self { layers, activation }
    }

    pub fn init<T: Real, R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParameterSet<T>> {
        let mut p = ParameterSet::new();
        for l in &self.layers {
            l.init(&mut p, rng)?;
        }
        Ok(p)
    }
}

impl<T: Real> Module<T> for Mlp {
    fn input_shape(&self) -> Vec<usize> {
        vec![self.layers.first().map_or(0, |l| l.inputs)]
    }

    fn forward_graph(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.apply(g, p, h)?;
            if i + 1 < self.layers.len() {
                h = self.activation.apply(g, h);
            }
        }
        Ok(h)
    }
}

fn check_input(expected: &[usize], input: &Tensor<impl Real>) -> Result<()> {
    if input.rank() != expected.len() + 1 || &input.shape()[1..] != expected {
        let mut want = vec![input.rows()];
        want.extend_from_slice(expected);
        return Err(Error::ShapeMismatch {
            op: "forward",
            left: want,
            right: input.shape().to_vec(),
        });
    }
    Ok(())
}

/// Evaluates `model` on a batched input without recording gradients for later use.
pub fn forward<T: Real, M: Module<T> + ?Sized>(
    model: &M,
    params: &ParameterSet<T>,
    input: &Tensor<T>,
) -> Result<Tensor<T>> {
    check_input(&model.input_shape(), input)?;
    let mut g = Graph::new();
    let p = g.bind(params);
    let x = g.input(input.clone());
    let y = model.forward_graph(&mut g, &p, x)?;
    Ok(g.value(y).clone())
}

/// Gradient of the scalar produced by `loss` on a fresh graph.
pub fn gradient<T: Real, F>(params: &ParameterSet<T>, loss: F) -> Result<(T, ParameterSet<T>)>
where
    F: FnOnce(&mut Graph<T>, &Bound) -> Result<Var>,
{
    let mut g = Graph::new();
    let p = g.bind(params);
    let root = loss(&mut g, &p)?;
    let value = g.value(root).item()?;
    Ok((value, g.backward(root)?))
}

/// One gradient per example of `batch` (leading dimension), each from a
/// separate backward pass over that example alone.
///
/// `loss` receives the single-example input (leading dimension 1) and the
/// example index. The output order matches the batch order regardless of how
/// many worker threads run.
pub fn per_example_gradients<T: Real, F>(
    params: &ParameterSet<T>,
    batch: &Tensor<T>,
    loss: F,
) -> Result<Vec<ParameterSet<T>>>
where
    F: Fn(&mut Graph<T>, &Bound, Var, usize) -> Result<Var> + Sync,
{
    let n = batch.rows();
    if batch.rank() == 0 || n == 0 {
        return Err(Error::EmptyBatch);
    }
    (0..n)
        .into_par_iter()
        .map(|i| {
            let example = batch.select_rows(&[i]);
            gradient(params, |g, p| {
                let x = g.input(example);
                loss(g, p, x, i)
            })
            .map(|(_, grad)| grad)
        })
        .collect()
}
