//! Content, adversarial and feature-matching losses.
//!
//! Each loss exists twice: a plain `f64` evaluation on [`SvbrdfMaps`] used for
//! evaluation and checks, and a graph version over packed `[B, 8, H, W]`
//! parameter tensors used for training.

use std::f64::consts::PI;
use std::fmt::Write as _;

use log::warn;
use serde::{Deserialize, Serialize};
use svbrdf_tensor::{CustomOp, Element, Graph, Tensor, Var};

use crate::error::{invalid, Error, Result};
use crate::maps::{SvbrdfMaps, PARAM_CHANNELS};
use crate::math::Vec3;
use crate::networks::DiscOutput;
use crate::render::{render_vjp_with, render_with, LossView, SceneConfig};
use crate::shading::ShadingPoint;

pub const DEFAULT_LAMBDA_F: f64 = 0.01;
pub const DEFAULT_RENDER_VIEWS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub enable_r: bool,
    pub enable_p: bool,
    pub enable_a: bool,
    pub enable_f: bool,
    /// Weight of feature matching in the discriminator objective.
    pub lambda_f_disc: f64,
    pub n_render_views: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            enable_r: true,
            enable_p: true,
            enable_a: true,
            enable_f: true,
            lambda_f_disc: DEFAULT_LAMBDA_F,
            n_render_views: DEFAULT_RENDER_VIEWS,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_f_disc >= 0.0 && self.lambda_f_disc.is_finite()) {
            return Err(invalid(format!("lambda_f_disc must be >= 0, got {}", self.lambda_f_disc)));
        }
        if self.n_render_views % 2 != 0 {
            return Err(invalid(format!("n_render_views must be even, got {}", self.n_render_views)));
        }
        if self.enable_r && self.n_render_views == 0 {
            return Err(invalid("rendering loss enabled with zero views"));
        }
        Ok(())
    }
}

/// Scalar loss values of one training step. Disabled terms are reported as 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_p: f64,
    pub l_r: f64,
    pub l_a_g: f64,
    pub l_a_d: f64,
    pub l_f: f64,
    pub total_g: f64,
    pub total_d: f64,
}

pub const CSV_HEADER: &str = "step,l_p,l_r,l_a_g,l_a_d,l_f,total_g,total_d";

impl LossReport {
    pub fn values(&self) -> [f64; 7] {
        [self.l_p, self.l_r, self.l_a_g, self.l_a_d, self.l_f, self.total_g, self.total_d]
    }

    pub fn is_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }

    pub fn csv_row(&self, step: usize) -> String {
        let mut row = step.to_string();
        for v in self.values() {
            write!(row, ",{v}").expect("writing to a String");
        }
        row
    }
}

/// `(total_g, total_d)`: the generator objective averages the four terms with
/// a fixed divisor of 4, disabled terms contributing 0.
pub fn total_losses(l_p: f64, l_r: f64, l_a_g: f64, l_a_d: f64, l_f: f64, w: &LossWeights) -> (f64, f64) {
    let on = |flag: bool, v: f64| if flag { v } else { 0.0 };
    let total_g = 0.25 * (on(w.enable_a, l_a_g) + on(w.enable_f, l_f) + on(w.enable_p, l_p) + on(w.enable_r, l_r));
    let total_d = on(w.enable_a, l_a_d) + w.lambda_f_disc * on(w.enable_f, l_f);
    (total_g, total_d)
}

pub fn mae(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!("mae: {} vs {} values", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(invalid("mae of empty inputs"));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

fn unit(v: Vec3) -> Vec3 {
    if (v.length() - 1.0).abs() > 1e-5 {
        warn!("angular_loss: normalizing non-unit normal {v:?}");
        v.normalize()
    } else {
        v
    }
}

/// Mean angle between two normal fields (xyz interleaved), in units of pi.
pub fn angular_loss(n1: &[f64], n2: &[f64]) -> Result<f64> {
    if n1.len() != n2.len() || n1.len() % 3 != 0 {
        return Err(Error::ShapeMismatch(format!("angular_loss: {} vs {} values", n1.len(), n2.len())));
    }
    if n1.is_empty() {
        return Err(invalid("angular_loss of empty normal fields"));
    }
    let sum: f64 = n1
        .chunks_exact(3)
        .zip(n2.chunks_exact(3))
        .map(|(a, b)| {
            let a = unit(Vec3::new(a[0], a[1], a[2]));
            let b = unit(Vec3::new(b[0], b[1], b[2]));
            let c = a.cross(b);
            c.length().atan2(a.dot(b)) / PI
        })
        .sum();
    Ok(sum / (n1.len() / 3) as f64)
}

fn same_resolution(a: &SvbrdfMaps, b: &SvbrdfMaps) -> Result<()> {
    if a.resolution() != b.resolution() {
        return Err(Error::ShapeMismatch(format!(
            "maps are {:?} and {:?}",
            a.resolution(),
            b.resolution()
        )));
    }
    Ok(())
}

pub fn parameter_loss(fake: &SvbrdfMaps, real: &SvbrdfMaps) -> Result<f64> {
    same_resolution(fake, real)?;
    let terms = [
        mae(fake.base_color(), real.base_color())?,
        angular_loss(fake.normal(), real.normal())?,
        mae(fake.roughness(), real.roughness())?,
        mae(fake.metallic(), real.metallic())?,
    ];
    Ok(terms.iter().sum::<f64>() / 4.0)
}

pub fn rendering_loss(fake: &SvbrdfMaps, real: &SvbrdfMaps, views: &[LossView], cfg: &SceneConfig) -> Result<f64> {
    same_resolution(fake, real)?;
    if views.is_empty() {
        return Err(invalid("rendering_loss needs at least one view"));
    }
    let (w, h) = fake.resolution();
    let mut total = 0.0;
    for v in views {
        let a = render_with(w, h, cfg, v, |i| fake.point(i));
        let b = render_with(w, h, cfg, v, |i| real.point(i));
        let sum: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x.ln_1p() - y.ln_1p()).abs()).sum();
        total += sum / a.data.len() as f64;
    }
    Ok(total / views.len() as f64)
}

/// Gradient of [`rendering_loss`] with respect to every texel of `fake`,
/// ordered as [`crate::shading::PARAM_NAMES`].
pub fn rendering_loss_grad(
    fake: &SvbrdfMaps,
    real: &SvbrdfMaps,
    views: &[LossView],
    cfg: &SceneConfig,
) -> Result<Vec<[f64; 8]>> {
    same_resolution(fake, real)?;
    if views.is_empty() {
        return Err(invalid("rendering_loss needs at least one view"));
    }
    let (w, h) = fake.resolution();
    let mut grad = vec![[0.0; 8]; w * h];
    for v in views {
        let a = render_with(w, h, cfg, v, |i| fake.point(i));
        let b = render_with(w, h, cfg, v, |i| real.point(i));
        let up = log_mae_upstream(&a.data, &b.data.iter().map(|y| y.ln_1p()).collect::<Vec<_>>(), 1.0 / views.len() as f64);
        let g = render_vjp_with(w, h, cfg, v, |i| fake.point(i), &up)?;
        for (acc, gi) in grad.iter_mut().zip(g) {
            for k in 0..8 {
                acc[k] += gi[k];
            }
        }
    }
    Ok(grad)
}

/// d/d render of `scale * mean|log1p(render) - target|`.
pub(crate) fn log_mae_upstream(render: &[f64], target: &[f64], scale: f64) -> Vec<f64> {
    let s = scale / render.len() as f64;
    render
        .iter()
        .zip(target)
        .map(|(x, t)| {
            let d = x.ln_1p() - t;
            if d == 0.0 {
                0.0
            } else {
                s * d.signum() / (1.0 + x)
            }
        })
        .collect()
}

fn point_from_planes<T: Element>(d: &[T], n: usize, i: usize) -> ShadingPoint {
    ShadingPoint::from_params(std::array::from_fn(|c| d[c * n + i].as_f64()))
}

/// Graph node computing the rendering loss of a `[B, 8, H, W]` prediction
/// against fixed targets, averaged over batch entries and their views.
struct RenderingLossOp {
    cfg: SceneConfig,
    views: Vec<Vec<LossView>>,
    /// `log1p` of the target renders, per batch entry and view.
    targets: Vec<Vec<Vec<f64>>>,
}

impl RenderingLossOp {
    fn dims<T: Element>(&self, t: &Tensor<T>) -> Result<(usize, usize, usize)> {
        let (b, c, h, w) = t.dims4("rendering_loss")?;
        if c != PARAM_CHANNELS || b != self.views.len() {
            return Err(Error::ShapeMismatch(format!(
                "rendering_loss expects [{}, 8, H, W], got {:?}",
                self.views.len(),
                t.shape()
            )));
        }
        Ok((b, h, w))
    }

    fn renders<'a, T: Element>(&'a self, t: &'a Tensor<T>) -> Result<impl Iterator<Item = (usize, usize, Vec<f64>)> + 'a> {
        let (b, h, w) = self.dims(t)?;
        let n = h * w;
        Ok((0..b).flat_map(move |bi| {
            let d = &t.data()[bi * PARAM_CHANNELS * n..(bi + 1) * PARAM_CHANNELS * n];
            self.views[bi]
                .iter()
                .enumerate()
                .map(move |(vi, v)| (bi, vi, render_with(w, h, &self.cfg, v, |i| point_from_planes(d, n, i)).data))
        }))
    }

    fn view_weight(&self, bi: usize) -> f64 {
        1.0 / (self.views.len() * self.views[bi].len()) as f64
    }
}

impl<T: Element> CustomOp<T> for RenderingLossOp {
    fn name(&self) -> &'static str {
        "rendering_loss"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> svbrdf_tensor::Result<Tensor<T>> {
        let mut total = 0.0;
        for (bi, vi, r) in self.renders(inputs[0]).map_err(to_tensor_err)? {
            let target = &self.targets[bi][vi];
            let sum: f64 = r.iter().zip(target).map(|(x, t)| (x.ln_1p() - t).abs()).sum();
            total += self.view_weight(bi) * sum / r.len() as f64;
        }
        Ok(Tensor::scalar(T::of(total)))
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_output: &Tensor<T>,
    ) -> svbrdf_tensor::Result<Vec<Option<Tensor<T>>>> {
        let t = inputs[0];
        let (_, h, w) = self.dims(t).map_err(to_tensor_err)?;
        let n = h * w;
        let go = grad_output.item().as_f64();
        let mut grad = vec![T::zero(); t.numel()];
        for (bi, vi, r) in self.renders(t).map_err(to_tensor_err)? {
            let up = log_mae_upstream(&r, &self.targets[bi][vi], go * self.view_weight(bi));
            let d = &t.data()[bi * PARAM_CHANNELS * n..(bi + 1) * PARAM_CHANNELS * n];
            let g = render_vjp_with(w, h, &self.cfg, &self.views[bi][vi], |i| point_from_planes(d, n, i), &up)
                .map_err(to_tensor_err)?;
            let out = &mut grad[bi * PARAM_CHANNELS * n..(bi + 1) * PARAM_CHANNELS * n];
            for (i, gi) in g.iter().enumerate() {
                for c in 0..PARAM_CHANNELS {
                    out[c * n + i] += T::of(gi[c]);
                }
            }
        }
        Ok(vec![Some(Tensor::new(t.shape(), grad)?)])
    }
}

fn to_tensor_err(e: Error) -> svbrdf_tensor::TensorError {
    match e {
        Error::Tensor(t) => t,
        other => svbrdf_tensor::TensorError::InvalidArgument {
            op: "rendering_loss",
            msg: other.to_string(),
        },
    }
}

/// Graph version of [`rendering_loss`]; `views[b]` are the views of batch entry `b`.
pub fn rendering_loss_graph<T: Element>(
    g: &mut Graph<T>,
    fake: Var,
    real: &Tensor<T>,
    views: Vec<Vec<LossView>>,
    cfg: &SceneConfig,
) -> Result<Var> {
    let (b, c, h, w) = real.dims4("rendering_loss")?;
    if g.value(fake).shape() != real.shape() || c != PARAM_CHANNELS {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} vs target {:?}",
            g.value(fake).shape(),
            real.shape()
        )));
    }
    if views.len() != b || views.iter().any(|v| v.is_empty()) {
        return Err(invalid(format!("need a non-empty view list for each of {b} batch entries")));
    }
    let n = h * w;
    let targets = views
        .iter()
        .enumerate()
        .map(|(bi, vs)| {
            let d = &real.data()[bi * PARAM_CHANNELS * n..(bi + 1) * PARAM_CHANNELS * n];
            vs.iter()
                .map(|v| {
                    render_with(w, h, cfg, v, |i| point_from_planes(d, n, i))
                        .data
                        .iter()
                        .map(|x| x.ln_1p())
                        .collect()
                })
                .collect()
        })
        .collect();
    let op = RenderingLossOp {
        cfg: cfg.clone(),
        views,
        targets,
    };
    Ok(g.custom(&[fake], Box::new(op))?)
}

fn mae_graph<T: Element>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let abs = g.abs(d);
    Ok(g.mean(abs))
}

/// Graph version of [`angular_loss`] over `[B, 3, H, W]` unit normal fields.
pub fn angular_loss_graph<T: Element>(g: &mut Graph<T>, n1: Var, n2: Var) -> Result<Var> {
    let prod = g.mul(n1, n2)?;
    let cos = g.channel_sum(prod)?;
    let angle = g.acos(cos);
    let mean = g.mean(angle);
    Ok(g.scale(mean, 1.0 / PI))
}

/// Graph version of [`parameter_loss`] over packed `[B, 8, H, W]` tensors.
pub fn parameter_loss_graph<T: Element>(g: &mut Graph<T>, fake: Var, real: Var) -> Result<Var> {
    let mut terms = Vec::with_capacity(4);
    for (start, len) in [(0, 3), (3, 3), (6, 1), (7, 1)] {
        let a = g.slice_channels(fake, start, len)?;
        let b = g.slice_channels(real, start, len)?;
        terms.push(if start == 3 {
            angular_loss_graph(g, a, b)?
        } else {
            mae_graph(g, a, b)?
        });
    }
    let sum = sum_vars(g, &terms)?;
    Ok(g.scale(sum, 0.25))
}

fn sum_vars<T: Element>(g: &mut Graph<T>, vars: &[Var]) -> Result<Var> {
    let (first, rest) = vars.split_first().ok_or_else(|| invalid("sum of no terms"))?;
    let mut acc = *first;
    for v in rest {
        acc = g.add(acc, *v)?;
    }
    Ok(acc)
}

fn half_mean_sq_offset<T: Element>(g: &mut Graph<T>, x: Var, target: f64) -> Var {
    let d = g.add_scalar(x, -target);
    let sq = g.square(d);
    let m = g.mean(sq);
    g.scale(m, 0.5)
}

/// Least-squares discriminator loss summed over scales.
pub fn lsgan_d<T: Element>(g: &mut Graph<T>, real: &[DiscOutput], fake: &[DiscOutput]) -> Result<Var> {
    if real.len() != fake.len() {
        return Err(invalid(format!("{} real vs {} fake scales", real.len(), fake.len())));
    }
    let mut terms = Vec::with_capacity(2 * real.len());
    for (r, f) in real.iter().zip(fake) {
        terms.push(half_mean_sq_offset(g, r.score, 1.0));
        terms.push(half_mean_sq_offset(g, f.score, 0.0));
    }
    sum_vars(g, &terms)
}

/// Least-squares generator loss summed over scales.
pub fn lsgan_g<T: Element>(g: &mut Graph<T>, fake: &[DiscOutput]) -> Result<Var> {
    let terms: Vec<Var> = fake.iter().map(|f| half_mean_sq_offset(g, f.score, 1.0)).collect();
    sum_vars(g, &terms)
}

/// Mean squared difference of intermediate discriminator activations, averaged
/// over layers and scales. Real activations are treated as constants.
pub fn feature_matching<T: Element>(g: &mut Graph<T>, real: &[DiscOutput], fake: &[DiscOutput]) -> Result<Var> {
    if real.len() != fake.len() || real.is_empty() {
        return Err(invalid(format!("{} real vs {} fake scales", real.len(), fake.len())));
    }
    let mut per_scale = Vec::with_capacity(real.len());
    for (r, f) in real.iter().zip(fake) {
        if r.features.len() != f.features.len() || r.features.is_empty() {
            return Err(invalid(format!(
                "{} real vs {} fake feature layers",
                r.features.len(),
                f.features.len()
            )));
        }
        let mut layers = Vec::with_capacity(r.features.len());
        for (&rf, &ff) in r.features.iter().zip(&f.features) {
            let target = g.detach(rf);
            let d = g.sub(target, ff)?;
            let sq = g.square(d);
            layers.push(g.mean(sq));
        }
        let s = sum_vars(g, &layers)?;
        per_scale.push(g.scale(s, 1.0 / layers.len() as f64));
    }
    let s = sum_vars(g, &per_scale)?;
    Ok(g.scale(s, 1.0 / real.len() as f64))
}
