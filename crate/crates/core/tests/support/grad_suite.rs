//! Finite-difference checks for every differentiable op and for the full
//! models, each over [`INSTANCES`] random instances.

use dpdm_core::diffusion::{DenoiserArch, DenoiserModel, NoiseSchedule};
use dpdm_core::eval::{ClassifierArch, ClassifierKind};
use dpdm_core::numerics::{Bound, Graph, ParameterSet, Reduction, Tensor, Var};
use dpdm_core::rng::{stream, Stream};
use dpdm_core::Result;
use rand::Rng;
use std::cell::Cell;

use super::{away_from_zero, gradient_check, rng, uniform};

pub const INSTANCES: u64 = 20;

const KINK_MARGIN: f64 = 2e-2;

type Build = Box<dyn Fn(&mut Graph<f64>, &Bound) -> Result<Var>>;

/// `Σ out ⊙ probe`, so every output coordinate carries a distinct weight.
fn probed(g: &mut Graph<f64>, p: &Bound, out: Var) -> Result<Var> {
    let w = p.get("probe")?;
    let m = g.mul(out, w)?;
    Ok(g.sum(m))
}

fn set(entries: Vec<(&str, Tensor<f64>)>) -> ParameterSet<f64> {
    let mut p = ParameterSet::new();
    for (k, v) in entries {
        p.insert(k, v).unwrap();
    }
    p
}

/// One random instance of the named case.
fn instance(case: &str, seed: u64) -> (ParameterSet<f64>, Build) {
    let r = &mut rng(seed * 7919 + case.len() as u64);
    let n = r.random_range(1..4usize);
    match case {
        "dense" => {
            let (i, o) = (r.random_range(1..6), r.random_range(1..6));
            let p = set(vec![
                ("x", uniform(&[n, i], -1.0, 1.0, r)),
                ("w", uniform(&[i, o], -1.0, 1.0, r)),
                ("b", uniform(&[o], -1.0, 1.0, r)),
                ("probe", uniform(&[n, o], -1.0, 1.0, r)),
            ]);
            (p, Box::new(|g, p| {
                let y = g.dense(p.get("x")?, p.get("w")?, p.get("b")?)?;
                probed(g, p, y)
            }))
        }
        "conv2d" => {
            let (h, w) = (r.random_range(2..5), r.random_range(2..5));
            let (ci, co) = (r.random_range(1..3), r.random_range(1..3));
            let k = if r.random_bool(0.5) { 1 } else { 3 };
            let p = set(vec![
                ("x", uniform(&[n, h, w, ci], -1.0, 1.0, r)),
                ("w", uniform(&[k, k, ci, co], -1.0, 1.0, r)),
                ("b", uniform(&[co], -1.0, 1.0, r)),
                ("probe", uniform(&[n, h, w, co], -1.0, 1.0, r)),
            ]);
            (p, Box::new(|g, p| {
                let y = g.conv2d(p.get("x")?, p.get("w")?, p.get("b")?)?;
                probed(g, p, y)
            }))
        }
        "silu" | "relu" => {
            let d = r.random_range(1..8);
            let p = set(vec![
                ("x", away_from_zero(&[n, d], r)),
                ("probe", uniform(&[n, d], -1.0, 1.0, r)),
            ]);
            let relu = case == "relu";
            (p, Box::new(move |g, p| {
                let x = p.get("x")?;
                let y = if relu { g.relu(x) } else { g.silu(x) };
                probed(g, p, y)
            }))
        }
        "time_embedding" => {
            let dim = 2 * r.random_range(1..5);
            let p = set(vec![
                ("t", uniform(&[n], 0.0, 20.0, r)),
                ("probe", uniform(&[n, dim], -1.0, 1.0, r)),
            ]);
            (p, Box::new(move |g, p| {
                let y = g.time_embedding(p.get("t")?, dim)?;
                probed(g, p, y)
            }))
        }
        "embedding" => {
            let (k, d) = (r.random_range(1..5), r.random_range(1..5));
            let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
            let p = set(vec![
                ("table", uniform(&[k, d], -1.0, 1.0, r)),
                ("probe", uniform(&[n, d], -1.0, 1.0, r)),
            ]);
            (p, Box::new(move |g, p| {
                let y = g.embedding(p.get("table")?, &labels)?;
                probed(g, p, y)
            }))
        }
        "add_mul_scale" => {
            let d = r.random_range(1..6);
            let c: f64 = r.random_range(-2.0..2.0);
            let p = set(vec![
                ("a", uniform(&[n, d], -1.0, 1.0, r)),
                ("b", uniform(&[n, d], -1.0, 1.0, r)),
                ("probe", uniform(&[n, d], -1.0, 1.0, r)),
            ]);
            (p, Box::new(move |g, p| {
                let (a, b) = (p.get("a")?, p.get("b")?);
                let s = g.add(a, b)?;
                let m = g.mul(s, a)?;
                let y = g.scale(m, c);
                probed(g, p, y)
            }))
        }
        "add_channels" => {
            let (h, w, c) = (r.random_range(1..4), r.random_range(1..4), r.random_range(1..4));
            let p = set(vec![
                ("x", uniform(&[n, h, w, c], -1.0, 1.0, r)),
                ("c", uniform(&[n, c], -1.0, 1.0, r)),
                ("probe", uniform(&[n, h, w, c], -1.0, 1.0, r)),
            ]);
            (p, Box::new(|g, p| {
                let y = g.add_channels(p.get("x")?, p.get("c")?)?;
                probed(g, p, y)
            }))
        }
        "row_axpby" => {
            let d = r.random_range(1..6);
            let a: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
            let p = set(vec![
                ("x", uniform(&[n, d], -1.0, 1.0, r)),
                ("y", uniform(&[n, d], -1.0, 1.0, r)),
                ("probe", uniform(&[n, d], -1.0, 1.0, r)),
            ]);
            (p, Box::new(move |g, p| {
                let y = g.row_axpby(p.get("x")?, p.get("y")?, &a, &b)?;
                probed(g, p, y)
            }))
        }
        "pooling_and_reshape" => {
            let k = r.random_range(1..3);
            let (h, w, c) = (k * r.random_range(1..3), k * r.random_range(1..3), r.random_range(1..3));
            let p = set(vec![
                ("x", uniform(&[n, h, w, c], -1.0, 1.0, r)),
                ("probe", uniform(&[n, (h / k) * (w / k) * c], -1.0, 1.0, r)),
                ("probe2", uniform(&[n, c], -1.0, 1.0, r)),
            ]);
            (p, Box::new(move |g, p| {
                let x = p.get("x")?;
                let pooled = g.avg_pool(x, k)?;
                let flat = g.flatten_rows(pooled)?;
                let a = probed(g, p, flat)?;
                let gm = g.global_mean_pool(x)?;
                let w2 = p.get("probe2")?;
                let m = g.mul(gm, w2)?;
                let b = g.sum(m);
                g.add(a, b)
            }))
        }
        "squared_error" => {
            let d = r.random_range(1..6);
            let p = set(vec![
                ("pred", uniform(&[n, d], -1.0, 1.0, r)),
                ("target", uniform(&[n, d], -1.0, 1.0, r)),
            ]);
            (p, Box::new(|g, p| {
                let (a, b) = (p.get("pred")?, p.get("target")?);
                let l1 = g.squared_error(a, b, Reduction::Mean)?;
                let l2 = g.squared_error(a, b, Reduction::SumPerRow)?;
                g.add(l1, l2)
            }))
        }
        "softmax_cross_entropy" => {
            let k = r.random_range(2..6);
            let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
            let p = set(vec![("logits", uniform(&[n, k], -3.0, 3.0, r))]);
            (p, Box::new(move |g, p| g.softmax_cross_entropy(p.get("logits")?, &labels)))
        }
        "diffusion_loss" => {
            let mut arch = DenoiserArch::new(4, 4, 1, 3);
            arch.hidden = vec![6, 5];
            arch.time_dim = 4;
            arch.conv_channels = 2;
            let model = DenoiserModel::new(arch).unwrap();
            let mut params: ParameterSet<f64> =
                model.init(&mut stream(seed, Stream::Init)).unwrap();
            // Random (not zero) biases so every path is exercised.
            let names: Vec<String> = params.names().map(str::to_string).collect();
            for name in names {
                let t = params.get_mut(&name).unwrap();
                for v in t.data_mut() {
                    *v += r.random_range(-0.3..0.3);
                }
            }
            let schedule = NoiseSchedule::scaled(20).unwrap();
            let x0 = uniform(&[n, 4, 4, 1], -1.0, 1.0, r);
            let eps = uniform(&[n, 4, 4, 1], -2.0, 2.0, r);
            let ts: Vec<usize> = (0..n).map(|_| r.random_range(1..=20)).collect();
            let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..3)).collect();
            (params, Box::new(move |g, p| {
                let x = g.input(x0.clone());
                let e = g.input(eps.clone());
                model.loss_graph(g, p, &schedule, x, e, &ts, &labels)
            }))
        }
        "classifier_conv" | "classifier_mlp" => {
            let kind = if case == "classifier_conv" { ClassifierKind::Conv } else { ClassifierKind::Mlp };
            let mut arch = ClassifierArch::new(kind, [4, 4, 1], 3);
            arch.width_factor = 2;
            arch.feature_dim = 5;
            // Resample until no ReLU input sits within reach of the difference
            // stencil; the derivative is undefined at the kink.
            let (params, x) = loop {
                let mut params: ParameterSet<f64> = arch.init(r.random()).unwrap().cast();
                let names: Vec<String> = params.names().map(str::to_string).collect();
                for name in names {
                    for v in params.get_mut(&name).unwrap().data_mut() {
                        *v += r.random_range(-0.3..0.3);
                    }
                }
                let x = uniform(&[n, 4, 4, 1], -1.0, 1.0, r);
                let margin = Cell::new(f64::INFINITY);
                let mut g = Graph::new();
                let b = g.bind(&params);
                let xv = g.input(x.clone());
                classifier_graph_f64(&arch, &mut g, &b, xv, Some(&margin)).unwrap();
                if margin.get() > KINK_MARGIN {
                    break (params, x);
                }
            };
            let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..3)).collect();
            (params, Box::new(move |g, p| {
                let xv = g.input(x.clone());
                let (_, logits) = classifier_graph_f64(&arch, g, p, xv, None)?;
                g.softmax_cross_entropy(logits, &labels)
            }))
        }
        other => panic!("unknown case {other}"),
    }
}

/// The classifier forward pass is only defined over `f32`; this mirrors it
/// layer by layer in `f64` for the check.
fn classifier_graph_f64(
    arch: &ClassifierArch,
    g: &mut Graph<f64>,
    p: &Bound,
    x: Var,
    margin: Option<&Cell<f64>>,
) -> Result<(Var, Var)> {
    let relu = |g: &mut Graph<f64>, h: Var| {
        if let Some(m) = margin {
            let closest = g.value(h).data().iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
            m.set(m.get().min(closest));
        }
        g.relu(h)
    };
    let mut h = x;
    match arch.kind {
        ClassifierKind::Conv => {
            for name in ["conv0", "conv1"] {
                h = g.conv2d(h, p.get(&format!("{name}.weight"))?, p.get(&format!("{name}.bias"))?)?;
                h = relu(g, h);
                h = g.avg_pool(h, 2)?;
            }
            h = g.flatten_rows(h)?;
        }
        ClassifierKind::Mlp => {
            h = g.flatten_rows(h)?;
            h = g.dense(h, p.get("hidden.weight")?, p.get("hidden.bias")?)?;
            h = relu(g, h);
        }
    }
    let f = g.dense(h, p.get("features.weight")?, p.get("features.bias")?)?;
    let f = relu(g, f);
    let logits = g.dense(f, p.get("logits.weight")?, p.get("logits.bias")?)?;
    Ok((f, logits))
}

pub const CASES: &[&str] = &[
    "dense",
    "conv2d",
    "silu",
    "relu",
    "time_embedding",
    "embedding",
    "add_mul_scale",
    "add_channels",
    "row_axpby",
    "pooling_and_reshape",
    "squared_error",
    "softmax_cross_entropy",
    "diffusion_loss",
    "classifier_conv",
    "classifier_mlp",
];

/// Worst relative error of `case` over all instances.
pub fn worst_error(case: &str) -> f64 {
    (0..INSTANCES)
        .map(|s| {
            let (p, build) = instance(case, s);
            gradient_check(&p, build)
        })
        .fold(0.0, f64::max)
}
