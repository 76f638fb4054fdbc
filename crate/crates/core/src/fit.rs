//! Direct per-texel optimization of material maps against a flash photograph.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::image::HdrImage;
use crate::losses::{log_mae_upstream, rendering_loss, rendering_loss_grad, DEFAULT_RENDER_VIEWS};
use crate::maps::{repair_normal, SvbrdfMaps};
use crate::optim::{Adam, AdamConfig};
use crate::render::{render_vjp_with, render_with, sample_loss_views, SceneConfig};
use crate::shading::ShadingPoint;

#[derive(Clone, Debug)]
pub struct FitOptions {
    pub steps: usize,
    pub lr: f64,
    pub adam: AdamConfig,
    /// Views per step for the rendering loss against ground truth.
    pub n_views: usize,
    pub seed: u64,
    pub scene: SceneConfig,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 0.01,
            adam: AdamConfig {
                beta1: 0.9,
                ..AdamConfig::default()
            },
            n_views: DEFAULT_RENDER_VIEWS,
            seed: 0,
            scene: SceneConfig::default(),
        }
    }
}

pub struct FitResult {
    pub maps: SvbrdfMaps,
    /// Objective before each step.
    pub losses: Vec<f64>,
}

fn to_maps(w: usize, h: usize, p: &[f64]) -> Result<SvbrdfMaps> {
    let n = w * h;
    let (mut b, mut nrm, mut r, mut m) = (Vec::with_capacity(3 * n), Vec::with_capacity(3 * n), Vec::with_capacity(n), Vec::with_capacity(n));
    for t in p.chunks_exact(8) {
        b.extend_from_slice(&t[0..3]);
        nrm.extend_from_slice(&t[3..6]);
        r.push(t[6]);
        m.push(t[7]);
    }
    SvbrdfMaps::new(w, h, b, nrm, r, m)
}

/// Clamp scalars into `[0, 1]` and renormalize the normal of each texel.
fn project(p: &mut [f64]) {
    for t in p.chunks_exact_mut(8) {
        for k in [0, 1, 2, 6, 7] {
            t[k] = t[k].clamp(0.0, 1.0);
        }
        let n = repair_normal([t[3], t[4], t[5]]);
        t[3..6].copy_from_slice(&n);
    }
}

/// Fit maps to a linear HDR flash observation `input`, starting from `init`.
///
/// The objective is the mean absolute difference of `log(1 + x)` between the
/// flash render of the estimate and `input`, plus the rendering loss against
/// `gt` under fresh random views each step when `gt` is given.
pub fn fit_inverse(input: &HdrImage, init: &SvbrdfMaps, gt: Option<&SvbrdfMaps>, opts: &FitOptions) -> Result<FitResult> {
    let (w, h) = init.resolution();
    if (input.width, input.height) != (w, h) {
        return Err(Error::ShapeMismatch(format!(
            "input is {}x{}, initial maps are {w}x{h}",
            input.width, input.height
        )));
    }
    if let Some(gt) = gt {
        if gt.resolution() != (w, h) {
            return Err(Error::ShapeMismatch(format!("ground truth is {:?}, initial maps are {w}x{h}", gt.resolution())));
        }
    }
    if input.data.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
        return Err(invalid("input radiance must be finite and non-negative"));
    }
    if !(opts.lr > 0.0) || (gt.is_some() && (opts.n_views == 0 || opts.n_views % 2 != 0)) {
        return Err(invalid("fit needs lr > 0 and an even, positive view count"));
    }
    let n = w * h;
    let target: Vec<f64> = input.data.iter().map(|v| v.ln_1p()).collect();
    let flash = opts.scene.flash_view();
    let mut params: Vec<f64> = (0..n).flat_map(|i| init.point(i).to_params()).collect();
    project(&mut params);
    let mut adam = Adam::<f64>::new([8 * n], opts.adam)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut losses = Vec::with_capacity(opts.steps);
    let point = |p: &[f64], i: usize| ShadingPoint::from_params(std::array::from_fn(|k| p[8 * i + k]));
    for _ in 0..opts.steps {
        let r = render_with(w, h, &opts.scene, &flash, |i| point(&params, i));
        let mut loss = r.data.iter().zip(&target).map(|(x, t)| (x.ln_1p() - t).abs()).sum::<f64>() / r.data.len() as f64;
        let up = log_mae_upstream(&r.data, &target, 1.0);
        let g = render_vjp_with(w, h, &opts.scene, &flash, |i| point(&params, i), &up)?;
        let mut grad: Vec<f64> = g.into_iter().flatten().collect();
        if let Some(gt) = gt {
            let maps = to_maps(w, h, &params)?;
            let views = sample_loss_views(&mut rng, opts.n_views, &opts.scene)?;
            loss += rendering_loss(&maps, gt, &views, &opts.scene)?;
            for (acc, gi) in grad.iter_mut().zip(rendering_loss_grad(&maps, gt, &views, &opts.scene)?.into_iter().flatten()) {
                *acc += gi;
            }
        }
        losses.push(loss);
        adam.step(&mut [&mut params], &[&grad], opts.lr)?;
        project(&mut params);
    }
    Ok(FitResult {
        maps: to_maps(w, h, &params)?,
        losses,
    })
}
