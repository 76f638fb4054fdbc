//! Direct-lighting renderer for a planar material patch lit by point lights.
//!
//! The patch lies in the `z = 0` plane, centered on the origin, with `+x` to
//! the right and `+y` towards the top image row. Image pixels coincide with
//! texels; each pixel is shaded at its texel center with its own view vector
//! towards the camera, so specular highlights show the perspective falloff of
//! a camera held above the patch.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::HdrImage;
use crate::maps::SvbrdfMaps;
use crate::math::Vec3;
use crate::shading::{eval_brdf, eval_brdf_grad, DirectionPair, ShadingPoint};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub patch_size_m: f64,
    pub camera_height_m: f64,
    pub fov_deg: f64,
    pub flash_intensity: [f64; 3],
    pub flash_color_temp_scale: [f64; 3],
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            patch_size_m: 0.30,
            camera_height_m: 0.50,
            fov_deg: 45.0,
            flash_intensity: [1.0; 3],
            flash_color_temp_scale: [1.0; 3],
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.patch_size_m) || !positive(self.camera_height_m) {
            return Err(invalid("patch size and camera height must be positive"));
        }
        if !(self.fov_deg > 10.0 && self.fov_deg < 120.0) {
            return Err(invalid(format!("fov {} outside (10, 120) degrees", self.fov_deg)));
        }
        if !self
            .flash_intensity
            .iter()
            .chain(&self.flash_color_temp_scale)
            .all(|v| positive(*v))
        {
            return Err(invalid("flash intensity and color scale must be positive"));
        }
        Ok(())
    }

    pub fn camera_position(&self) -> Vec3 {
        Vec3::new(0.0, 0.0, self.camera_height_m)
    }

    pub fn flash_light(&self) -> PointLight {
        PointLight {
            position: self.camera_position(),
            color: std::array::from_fn(|c| self.flash_intensity[c] * self.flash_color_temp_scale[c]),
        }
    }

    /// Flash and camera collocated.
    pub fn flash_view(&self) -> LossView {
        LossView {
            light: self.flash_light(),
            view_pos: self.camera_position(),
            mirror_point: None,
        }
    }

    /// World position of the center of texel `(row, col)` in a `width x height` patch.
    /// The patch is `patch_size_m` wide; its height follows the aspect ratio.
    pub fn surface_point(&self, row: usize, col: usize, width: usize, height: usize) -> Vec3 {
        let texel = self.patch_size_m / width as f64;
        Vec3::new(
            (col as f64 + 0.5 - 0.5 * width as f64) * texel,
            (0.5 * height as f64 - row as f64 - 0.5) * texel,
            0.0,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointLight {
    pub position: Vec3,
    pub color: [f64; 3],
}

/// One light/camera placement used by the rendering loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossView {
    pub light: PointLight,
    pub view_pos: Vec3,
    /// Surface point the light was mirrored about, for highlight views.
    pub mirror_point: Option<Vec3>,
}

/// Radiance leaving `x` towards `view` under `light`.
pub fn shade_pixel(p: &ShadingPoint, x: Vec3, light: &PointLight, view: Vec3) -> [f64; 3] {
    let to_light = light.position - x;
    let r2 = to_light.dot(to_light);
    let wi = to_light * (1.0 / r2.sqrt());
    let wo = (view - x).normalize();
    let cos = p.normal.dot(wi);
    if cos <= 0.0 {
        return [0.0; 3];
    }
    let f = eval_brdf(p, &DirectionPair { omega_i: wi, omega_o: wo });
    std::array::from_fn(|c| f[c] * cos * light.color[c] / r2)
}

/// [`shade_pixel`] and its jacobian over the eight parameters.
pub fn shade_pixel_grad(
    p: &ShadingPoint,
    x: Vec3,
    light: &PointLight,
    view: Vec3,
) -> ([f64; 3], [[f64; 8]; 3]) {
    let to_light = light.position - x;
    let r2 = to_light.dot(to_light);
    let wi = to_light * (1.0 / r2.sqrt());
    let wo = (view - x).normalize();
    let cos = p.normal.dot(wi);
    if cos <= 0.0 {
        return ([0.0; 3], [[0.0; 8]; 3]);
    }
    let g = eval_brdf_grad(p, &DirectionPair { omega_i: wi, omega_o: wo });
    let mut value = [0.0; 3];
    let mut jac = [[0.0; 8]; 3];
    let dcos = [0.0, 0.0, 0.0, wi.x, wi.y, wi.z, 0.0, 0.0];
    for c in 0..3 {
        let k = light.color[c] / r2;
        value[c] = g.value[c] * cos * k;
        for j in 0..8 {
            jac[c][j] = (g.jacobian[c][j] * cos + g.value[c] * dcos[j]) * k;
        }
    }
    (value, jac)
}

/// Render a `width x height` patch whose texel `i` has parameters `point(i)`.
pub fn render_with<F>(width: usize, height: usize, cfg: &SceneConfig, view: &LossView, point: F) -> HdrImage
where
    F: Fn(usize) -> ShadingPoint + Sync,
{
    let mut data = vec![0.0; 3 * width * height];
    data.par_chunks_mut(3 * width).enumerate().for_each(|(row, out)| {
        for col in 0..width {
            let x = cfg.surface_point(row, col, width, height);
            let v = shade_pixel(&point(row * width + col), x, &view.light, view.view_pos);
            out[3 * col..3 * col + 3].copy_from_slice(&v);
        }
    });
    HdrImage { width, height, data }
}

/// Per-texel gradient of `<upstream, render_with(..)>`.
pub fn render_vjp_with<F>(
    width: usize,
    height: usize,
    cfg: &SceneConfig,
    view: &LossView,
    point: F,
    upstream: &[f64],
) -> Result<Vec<[f64; 8]>>
where
    F: Fn(usize) -> ShadingPoint + Sync,
{
    if upstream.len() != 3 * width * height {
        return Err(Error::ShapeMismatch(format!(
            "upstream has {} values, render is {width}x{height}x3",
            upstream.len()
        )));
    }
    let mut grad = vec![[0.0; 8]; width * height];
    grad.par_chunks_mut(width).enumerate().for_each(|(row, out)| {
        for (col, g) in out.iter_mut().enumerate() {
            let i = row * width + col;
            let up = &upstream[3 * i..3 * i + 3];
            if up.iter().all(|u| *u == 0.0) {
                continue;
            }
            let x = cfg.surface_point(row, col, width, height);
            let (_, jac) = shade_pixel_grad(&point(i), x, &view.light, view.view_pos);
            for k in 0..8 {
                g[k] = up[0] * jac[0][k] + up[1] * jac[1][k] + up[2] * jac[2][k];
            }
        }
    });
    Ok(grad)
}

pub fn render_view(maps: &SvbrdfMaps, view: &LossView, cfg: &SceneConfig) -> HdrImage {
    render_with(maps.width(), maps.height(), cfg, view, |i| maps.point(i))
}

/// Collocated flash and camera above the patch center.
pub fn render_flash(maps: &SvbrdfMaps, cfg: &SceneConfig) -> HdrImage {
    render_view(maps, &cfg.flash_view(), cfg)
}

/// Distant light; `color` is the irradiance it delivers to a surface facing it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionalLight {
    /// Unit vector towards the light.
    pub direction: Vec3,
    pub color: [f64; 3],
}

pub fn shade_directional(p: &ShadingPoint, x: Vec3, light: &DirectionalLight, view: Vec3) -> [f64; 3] {
    let wi = light.direction;
    let cos = p.normal.dot(wi);
    if cos <= 0.0 {
        return [0.0; 3];
    }
    let f = eval_brdf(p, &DirectionPair { omega_i: wi, omega_o: (view - x).normalize() });
    std::array::from_fn(|c| f[c] * cos * light.color[c])
}

pub fn render_directional(maps: &SvbrdfMaps, light: &DirectionalLight, view_pos: Vec3, cfg: &SceneConfig) -> HdrImage {
    let (width, height) = maps.resolution();
    let mut data = vec![0.0; 3 * width * height];
    data.par_chunks_mut(3 * width).enumerate().for_each(|(row, out)| {
        for col in 0..width {
            let x = cfg.surface_point(row, col, width, height);
            let v = shade_directional(&maps.point(row * width + col), x, light, view_pos);
            out[3 * col..3 * col + 3].copy_from_slice(&v);
        }
    });
    HdrImage { width, height, data }
}

pub fn render_point_light(maps: &SvbrdfMaps, light: &PointLight, view_pos: Vec3, cfg: &SceneConfig) -> HdrImage {
    let view = LossView {
        light: *light,
        view_pos,
        mirror_point: None,
    };
    render_view(maps, &view, cfg)
}

/// Gradient of `<upstream, render_view(maps, view)>` with respect to the maps.
pub fn render_vjp(
    maps: &SvbrdfMaps,
    view: &LossView,
    cfg: &SceneConfig,
    upstream: &HdrImage,
) -> Result<MapsGradient> {
    if (upstream.width, upstream.height) != (maps.width(), maps.height()) {
        return Err(Error::ShapeMismatch(format!(
            "upstream {}x{} vs maps {}x{}",
            upstream.width,
            upstream.height,
            maps.width(),
            maps.height()
        )));
    }
    let per_pixel = render_vjp_with(maps.width(), maps.height(), cfg, view, |i| maps.point(i), &upstream.data)?;
    Ok(MapsGradient {
        width: maps.width(),
        height: maps.height(),
        per_pixel,
    })
}

/// Gradient with respect to every texel's eight parameters, ordered as
/// [`crate::shading::PARAM_NAMES`].
#[derive(Clone, Debug, PartialEq)]
pub struct MapsGradient {
    pub width: usize,
    pub height: usize,
    pub per_pixel: Vec<[f64; 8]>,
}

impl MapsGradient {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            per_pixel: vec![[0.0; 8]; width * height],
        }
    }

    pub fn add_scaled(&mut self, other: &MapsGradient, s: f64) {
        for (a, b) in self.per_pixel.iter_mut().zip(&other.per_pixel) {
            for k in 0..8 {
                a[k] += s * b[k];
            }
        }
    }

    pub fn base_color(&self) -> Vec<f64> {
        self.per_pixel.iter().flat_map(|g| [g[0], g[1], g[2]]).collect()
    }

    pub fn normal(&self) -> Vec<f64> {
        self.per_pixel.iter().flat_map(|g| [g[3], g[4], g[5]]).collect()
    }

    pub fn roughness(&self) -> Vec<f64> {
        self.per_pixel.iter().map(|g| g[6]).collect()
    }

    pub fn metallic(&self) -> Vec<f64> {
        self.per_pixel.iter().map(|g| g[7]).collect()
    }
}

/// Uniform direction on the upper hemisphere with `z > 0`.
pub fn uniform_hemisphere(rng: &mut impl Rng) -> Vec3 {
    let z = 1.0 - rng.random::<f64>();
    let phi = rng.random_range(0.0..std::f64::consts::TAU);
    let s = (1.0 - z * z).max(0.0).sqrt();
    Vec3::new(s * phi.cos(), s * phi.sin(), z)
}

fn light_color(rng: &mut impl Rng) -> [f64; 3] {
    std::array::from_fn(|_| rng.random_range(0.5..=1.5))
}

/// Light/camera placements for the rendering loss.
///
/// The first half places light and camera independently on a hemisphere of
/// radius `2 * patch_size_m`. The second half picks a direction and a point
/// on the patch and places the camera at the mirror image of the light about
/// the plane normal, so each of those views shows a highlight.
pub fn sample_loss_views(rng: &mut impl Rng, count: usize, cfg: &SceneConfig) -> Result<Vec<LossView>> {
    if count % 2 != 0 {
        return Err(invalid(format!("loss view count must be even, got {count}")));
    }
    let radius = 2.0 * cfg.patch_size_m;
    let mut views = Vec::with_capacity(count);
    for _ in 0..count / 2 {
        let light = uniform_hemisphere(rng) * radius;
        let view = uniform_hemisphere(rng) * radius;
        views.push(LossView {
            light: PointLight {
                position: light,
                color: light_color(rng),
            },
            view_pos: view,
            mirror_point: None,
        });
    }
    let half = 0.5 * cfg.patch_size_m;
    for _ in count / 2..count {
        let dir = uniform_hemisphere(rng);
        let at = Vec3::new(rng.random_range(-half..half), rng.random_range(-half..half), 0.0);
        views.push(LossView {
            light: PointLight {
                position: at + dir * radius,
                color: light_color(rng),
            },
            view_pos: at + dir.reflect_z() * radius,
            mirror_point: Some(at),
        });
    }
    Ok(views)
}

/// Element-wise `log(1 + x)`.
pub fn log_tonemap(x: &HdrImage) -> Result<HdrImage> {
    if let Some(v) = x.data.iter().find(|v| !(**v >= 0.0)) {
        return Err(invalid(format!("log_tonemap needs non-negative input, got {v}")));
    }
    HdrImage::new(x.width, x.height, x.data.iter().map(|v| v.ln_1p()).collect())
}
