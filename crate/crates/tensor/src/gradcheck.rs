//! Central finite-difference gradient checking.
//!
//! Used by the test suites of this crate and of downstream crates to compare
//! [`Graph::backward`] against an independent numerical derivative.

use crate::element::Element;
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Outcome of comparing an analytic gradient with finite differences.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// `|analytic - numeric| / max(|analytic|, |numeric|)` over the whole gradient vector.
    pub rel_error: f64,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
}

/// Norm-wise relative error between two gradient vectors.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom < 1e-30 {
        diff
    } else {
        diff / denom
    }
}

/// Evaluate the scalar produced by `build` on `inputs` without recording gradients.
pub fn eval_scalar<T: Element>(
    build: &impl Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
    inputs: &[Tensor<T>],
) -> Result<T> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    Ok(g.value(out).item())
}

/// Compare the backward pass of `build` with central differences of step `step`
/// over every element of every input.
pub fn check_gradients<T: Element>(
    build: impl Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
    inputs: &[Tensor<T>],
    step: f64,
) -> Result<GradCheck> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = build(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let mut analytic = Vec::new();
    for &v in &vars {
        analytic.extend(grads.get_or_zeros(v).data().iter().map(|x| x.as_f64()));
    }
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    for k in 0..inputs.len() {
        for i in 0..inputs[k].numel() {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + T::of(step);
            let plus = eval_scalar(&build, &work)?.as_f64();
            work[k].data_mut()[i] = orig - T::of(step);
            let minus = eval_scalar(&build, &work)?.as_f64();
            work[k].data_mut()[i] = orig;
            numeric.push((plus - minus) / (2.0 * step));
        }
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(GradCheck {
        rel_error: relative_error(&analytic, &numeric),
        analytic_norm: norm(&analytic),
        numeric_norm: norm(&numeric),
    })
}

/// Per-operator result of [`run_op_suite`].
#[derive(Clone, Debug)]
pub struct OpSummary {
    pub op: &'static str,
    pub configs: usize,
    pub max_rel_error: f64,
}

type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

struct Case {
    inputs: Vec<Tensor<f64>>,
    build: Build,
}

mod cases {
    use super::*;
    use crate::{Conv2dSpec, ConvTranspose2dSpec, PadMode, Padding};
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal, Uniform};

    pub fn normal(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
    }

    pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        let d = Uniform::new(lo, hi).expect("valid range");
        Tensor::from_fn(shape, |_| d.sample(rng))
    }

    /// Wraps an op producing a tensor into a scalar loss `sum(op(x) * r)` with a
    /// fixed random projection `r`.
    pub fn projected(
        rng: &mut impl Rng,
        out_shape: &[usize],
        inputs: Vec<Tensor<f64>>,
        op: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static,
    ) -> Case {
        let r = normal(rng, out_shape);
        Case {
            inputs,
            build: Box::new(move |g, v| {
                let y = op(g, v)?;
                let rv = g.constant(r.clone());
                let p = g.mul(y, rv)?;
                Ok(g.sum(p))
            }),
        }
    }

    pub fn conv(rng: &mut impl Rng, variant: usize) -> Case {
        // (in_c, out_c, h, w, k, spec, out spatial)
        let (ic, oc, h, w, k, spec) = match variant {
            0 => (2, 3, 5, 5, 3, Conv2dSpec::new(1, Padding::zero(1))),
            1 => (2, 3, 5, 5, 3, Conv2dSpec::new(2, Padding::reflect(1))),
            2 => (2, 2, 6, 6, 4, Conv2dSpec::new(2, Padding::zero(1))),
            3 => (2, 2, 5, 5, 4, Conv2dSpec::new(1, Padding::same_even(4, PadMode::Zero))),
            _ => (1, 2, 5, 5, 7, Conv2dSpec::new(1, Padding::reflect(3))),
        };
        let (oh, ow) = spec.output_size(h, w, k).expect("valid geometry");
        let inputs = vec![
            normal(rng, &[2, ic, h, w]),
            normal(rng, &[oc, ic, k, k]),
            normal(rng, &[oc]),
        ];
        projected(rng, &[2, oc, oh, ow], inputs, move |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), spec)
        })
    }

    pub fn conv_transpose(rng: &mut impl Rng) -> Case {
        let spec = ConvTranspose2dSpec::UPSAMPLE2;
        let inputs = vec![
            normal(rng, &[2, 2, 3, 3]),
            normal(rng, &[2, 3, 3, 3]),
            normal(rng, &[3]),
        ];
        projected(rng, &[2, 3, 6, 6], inputs, move |g, v| {
            g.conv_transpose2d(v[0], v[1], Some(v[2]), spec)
        })
    }

    pub fn instance_norm(rng: &mut impl Rng) -> Case {
        let inputs = vec![normal(rng, &[2, 3, 4, 4]), normal(rng, &[3]), normal(rng, &[3])];
        projected(rng, &[2, 3, 4, 4], inputs, |g, v| {
            g.instance_norm(v[0], v[1], v[2], crate::INSTANCE_NORM_EPS)
        })
    }

    pub fn unary(rng: &mut impl Rng, name: &str) -> Case {
        let shape = [2, 3, 3, 3];
        let x = match name {
            "log" => uniform(rng, &shape, 0.5, 2.0),
            "acos" => uniform(rng, &shape, -0.95, 0.95),
            _ => normal(rng, &shape),
        };
        let name = name.to_string();
        projected(rng, &shape, vec![x], move |g, v| {
            Ok(match name.as_str() {
                "relu" => g.relu(v[0]),
                "leaky_relu" => g.leaky_relu(v[0], 0.2),
                "sigmoid" => g.sigmoid(v[0]),
                "abs" => g.abs(v[0]),
                "square" => g.square(v[0]),
                "log" => g.log(v[0])?,
                "acos" => g.acos(v[0]),
                "scale" => g.scale(v[0], -1.7),
                "add_scalar" => g.add_scalar(v[0], 0.3),
                other => unreachable!("unknown unary op {other}"),
            })
        })
    }

    pub fn binary(rng: &mut impl Rng, name: &'static str) -> Case {
        let shape = [2, 2, 3, 3];
        let inputs = vec![normal(rng, &shape), normal(rng, &shape)];
        projected(rng, &shape, inputs, move |g, v| match name {
            "add" => g.add(v[0], v[1]),
            "sub" => g.sub(v[0], v[1]),
            _ => g.mul(v[0], v[1]),
        })
    }

    pub fn reduction(rng: &mut impl Rng, mean: bool) -> Case {
        let shape = [2, 2, 3, 3];
        let r = normal(rng, &shape);
        Case {
            inputs: vec![normal(rng, &shape)],
            build: Box::new(move |g, v| {
                let rv = g.constant(r.clone());
                let p = g.mul(v[0], rv)?;
                Ok(if mean { g.mean(p) } else { g.sum(p) })
            }),
        }
    }

    pub fn resize_half(rng: &mut impl Rng) -> Case {
        let x = normal(rng, &[2, 2, 4, 6]);
        projected(rng, &[2, 2, 2, 3], vec![x], |g, v| {
            g.resize_half(v[0])
        })
    }

    pub fn concat(rng: &mut impl Rng) -> Case {
        let inputs = vec![normal(rng, &[2, 1, 3, 3]), normal(rng, &[2, 2, 3, 3])];
        projected(rng, &[2, 3, 3, 3], inputs, |g, v| g.concat_channels(&[v[0], v[1]]))
    }

    pub fn slice(rng: &mut impl Rng) -> Case {
        let x = normal(rng, &[2, 4, 3, 3]);
        projected(rng, &[2, 2, 3, 3], vec![x], |g, v| {
            g.slice_channels(v[0], 1, 2)
        })
    }

    pub fn channel_sum(rng: &mut impl Rng) -> Case {
        let x = normal(rng, &[2, 3, 3, 3]);
        projected(rng, &[2, 1, 3, 3], vec![x], |g, v| {
            g.channel_sum(v[0])
        })
    }

    pub fn normalize(rng: &mut impl Rng) -> Case {
        let x = normal(rng, &[2, 3, 3, 3]);
        projected(rng, &[2, 3, 3, 3], vec![x], |g, v| {
            g.normalize_channels(v[0])
        })
    }
}

/// Names of the operators covered by [`run_op_suite`].
pub const SUITE_OPS: &[&str] = &[
    "conv2d", "conv_transpose2d", "instance_norm", "relu", "leaky_relu", "sigmoid", "abs",
    "square", "log", "acos", "scale", "add_scalar", "add", "sub", "mul", "mean", "sum",
    "resize_half", "concat_channels", "slice_channels", "channel_sum", "normalize_channels",
];

/// Finite-difference check of every graph operator in 64-bit precision over
/// `configs` random configurations each.
pub fn run_op_suite(configs: usize, seed: u64) -> Result<Vec<OpSummary>> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for &op in SUITE_OPS {
        let mut worst: f64 = 0.0;
        for i in 0..configs {
            let case = match op {
                "conv2d" => cases::conv(&mut rng, i % 5),
                "conv_transpose2d" => cases::conv_transpose(&mut rng),
                "instance_norm" => cases::instance_norm(&mut rng),
                "add" | "sub" | "mul" => cases::binary(&mut rng, op),
                "mean" => cases::reduction(&mut rng, true),
                "sum" => cases::reduction(&mut rng, false),
                "resize_half" => cases::resize_half(&mut rng),
                "concat_channels" => cases::concat(&mut rng),
                "slice_channels" => cases::slice(&mut rng),
                "channel_sum" => cases::channel_sum(&mut rng),
                "normalize_channels" => cases::normalize(&mut rng),
                unary => cases::unary(&mut rng, unary),
            };
            let check = check_gradients(&case.build, &case.inputs, 1e-6)?;
            worst = worst.max(check.rel_error);
        }
        out.push(OpSummary {
            op,
            configs,
            max_rel_error: worst,
        });
    }
    Ok(out)
}
