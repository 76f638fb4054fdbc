//! Procedural materials, crop/rotate/scale augmentation, flash + environment
//! input renders and dataset manifests.

use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::warn;
use noise::{core::worley::ReturnType, Fbm, MultiFractal, NoiseFn, Perlin, Worley};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, Error, Result};
use crate::exposure::{apply_auto_exposure, ExposureParams};
use crate::image::{read_pfm, save_material, write_ldr_png, HdrImage, LdrImage};
use crate::maps::SvbrdfMaps;
use crate::math::{luminance, Vec3};
use crate::render::{render_directional, render_flash, DirectionalLight, SceneConfig};

pub const AUGMENTATIONS: usize = 7;
pub const TRAIN_ENV_DRAWS: usize = 3;
pub const TEST_ENV_DRAWS: usize = 1;
pub const TRAIN_ENV_POOL: usize = 20;
pub const TEST_ENV_POOL: usize = 6;
pub const ENV_LIGHTS: usize = 16;
pub const TRAIN_FRACTION: f64 = 0.8;
pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecipeKind {
    Checker,
    FractalNoise,
    Stripes,
    MetalFlakes,
    BlendOfTwo,
}

impl RecipeKind {
    pub const ALL: [RecipeKind; 5] = [
        RecipeKind::Checker,
        RecipeKind::FractalNoise,
        RecipeKind::Stripes,
        RecipeKind::MetalFlakes,
        RecipeKind::BlendOfTwo,
    ];
}

/// Appearance of one of the two regions a pattern separates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub base_color: [f64; 3],
    pub roughness: f64,
    pub metallic: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaterialRecipe {
    pub kind: RecipeKind,
    pub seed: u64,
    pub phases: [Phase; 2],
    /// Feature size as a fraction of the patch width.
    pub feature_size: f64,
    pub orientation_rad: f64,
    /// Height of the relief as a fraction of the patch width.
    pub height_amplitude: f64,
    /// Amplitude of fine noise added to roughness and albedo.
    pub grain: f64,
    /// The two recipes mixed by [`RecipeKind::BlendOfTwo`].
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub parts: Vec<MaterialRecipe>,
}

fn random_phase(rng: &mut impl Rng, metal_prob: f64) -> Phase {
    let mean: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.05..0.9));
    let jitter = Normal::new(0.0, 0.08).expect("valid sd");
    Phase {
        base_color: std::array::from_fn(|c| (mean[c] + jitter.sample(rng)).clamp(0.02, 0.98)),
        roughness: rng.random_range(0.12..0.95),
        metallic: if rng.random_bool(metal_prob) { 1.0 } else { 0.0 },
    }
}

impl MaterialRecipe {
    pub fn random(kind: RecipeKind, rng: &mut impl Rng) -> Self {
        let mut phases = [random_phase(rng, 0.2), random_phase(rng, 0.2)];
        if kind == RecipeKind::MetalFlakes {
            phases[0].metallic = 0.0;
            phases[1].metallic = 1.0;
            phases[1].roughness = rng.random_range(0.12..0.5);
        }
        let parts = if kind == RecipeKind::BlendOfTwo {
            (0..2)
                .map(|_| {
                    let k = RecipeKind::ALL[rng.random_range(0..4)];
                    MaterialRecipe::random(k, rng)
                })
                .collect()
        } else {
            Vec::new()
        };
        Self {
            kind,
            seed: rng.random(),
            phases,
            feature_size: match kind {
                RecipeKind::MetalFlakes => rng.random_range(0.01..0.04),
                _ => rng.random_range(0.05..0.3),
            },
            orientation_rad: rng.random_range(0.0..PI),
            height_amplitude: rng.random_range(0.0005..0.004),
            grain: rng.random_range(0.0..0.08),
            parts,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        for p in &self.phases {
            if !p.base_color.iter().all(|c| unit(*c)) || !unit(p.roughness) || !unit(p.metallic) {
                return Err(invalid(format!("recipe phase out of range: {p:?}")));
            }
        }
        if !(self.feature_size > 0.0 && self.height_amplitude >= 0.0 && self.grain >= 0.0) {
            return Err(invalid("recipe feature size must be positive, amplitude and grain non-negative"));
        }
        if (self.kind == RecipeKind::BlendOfTwo) != (self.parts.len() == 2) {
            return Err(invalid("blend-of-two recipes need exactly two parts"));
        }
        self.parts.iter().try_for_each(|p| p.validate())
    }
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Scalar fields of a material before normals are derived.
struct Fields {
    base_color: Vec<f64>,
    roughness: Vec<f64>,
    metallic: Vec<f64>,
    height: Vec<f64>,
}

fn seed32(seed: u64, salt: u64) -> u32 {
    (seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15)).wrapping_mul(0xbf58_476d_1ce4_e5b9) as u32
}

fn synthesize_fields(r: &MaterialRecipe, n: usize) -> Fields {
    if r.kind == RecipeKind::BlendOfTwo {
        let a = synthesize_fields(&r.parts[0], n);
        let b = synthesize_fields(&r.parts[1], n);
        let mask_noise = Fbm::<Perlin>::new(seed32(r.seed, 1)).set_octaves(4);
        let mut out = Fields {
            base_color: vec![0.0; 3 * n * n],
            roughness: vec![0.0; n * n],
            metallic: vec![0.0; n * n],
            height: vec![0.0; n * n],
        };
        for i in 0..n * n {
            let (u, v) = texel_uv(i, n);
            let t = smoothstep(-0.15, 0.15, mask_noise.get([u / r.feature_size, v / r.feature_size]));
            let mix = |x: f64, y: f64| x + (y - x) * t;
            for c in 0..3 {
                out.base_color[3 * i + c] = mix(a.base_color[3 * i + c], b.base_color[3 * i + c]);
            }
            out.roughness[i] = mix(a.roughness[i], b.roughness[i]);
            out.metallic[i] = mix(a.metallic[i], b.metallic[i]);
            out.height[i] = mix(a.height[i], b.height[i]);
        }
        return out;
    }
    let fbm = Fbm::<Perlin>::new(seed32(r.seed, 2)).set_octaves(5);
    let grain = Fbm::<Perlin>::new(seed32(r.seed, 3)).set_octaves(3);
    let cells = Worley::new(seed32(r.seed, 4)).set_return_type(ReturnType::Value);
    let (sin_o, cos_o) = r.orientation_rad.sin_cos();
    let threshold = (r.seed % 1000) as f64 / 1000.0 * 0.6 - 0.3;
    let mut out = Fields {
        base_color: Vec::with_capacity(3 * n * n),
        roughness: Vec::with_capacity(n * n),
        metallic: Vec::with_capacity(n * n),
        height: Vec::with_capacity(n * n),
    };
    for i in 0..n * n {
        let (u, v) = texel_uv(i, n);
        let (ru, rv) = (cos_o * u - sin_o * v, sin_o * u + cos_o * v);
        let fs = r.feature_size;
        let (mask, relief) = match r.kind {
            RecipeKind::Checker => {
                let s = (PI * ru / fs).sin() * (PI * rv / fs).sin();
                let m = smoothstep(-0.2, 0.2, s);
                (m, m)
            }
            RecipeKind::Stripes => {
                let s = (2.0 * PI * ru / fs).sin();
                (smoothstep(-0.3, 0.3, s), 0.5 + 0.5 * s)
            }
            RecipeKind::FractalNoise => {
                let h = fbm.get([u / fs, v / fs]);
                (smoothstep(-0.08, 0.08, h - threshold * 0.5), h)
            }
            RecipeKind::MetalFlakes => {
                let c = cells.get([u / fs, v / fs]);
                let m = if c > threshold { 1.0 } else { 0.0 };
                (m, 0.3 * fbm.get([4.0 * u / fs, 4.0 * v / fs]))
            }
            RecipeKind::BlendOfTwo => unreachable!("handled above"),
        };
        let g = r.grain * grain.get([8.0 * u / fs, 8.0 * v / fs]);
        let [a, b] = r.phases;
        for c in 0..3 {
            let col = a.base_color[c] + (b.base_color[c] - a.base_color[c]) * mask;
            out.base_color.push((col * (1.0 + g)).clamp(0.0, 1.0));
        }
        out.roughness
            .push((a.roughness + (b.roughness - a.roughness) * mask + g).clamp(0.05, 1.0));
        out.metallic.push(a.metallic + (b.metallic - a.metallic) * mask);
        out.height.push(relief);
    }
    for h in &mut out.height {
        *h *= r.height_amplitude;
    }
    out
}

/// Normalized coordinates of texel `i` in an `n x n` grid, `v` pointing up.
fn texel_uv(i: usize, n: usize) -> (f64, f64) {
    let (row, col) = (i / n, i % n);
    ((col as f64 + 0.5) / n as f64, (n as f64 - row as f64 - 0.5) / n as f64)
}

/// Unit normals of a height field given in units of the patch width, from
/// central differences (one-sided at the border).
pub fn normals_from_height(height: &[f64], width: usize, rows: usize) -> Result<Vec<f64>> {
    if height.len() != width * rows || height.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "height field has {} values for {width}x{rows}",
            height.len()
        )));
    }
    let texel = 1.0 / width as f64;
    let at = |r: usize, c: usize| height[r * width + c];
    let mut out = Vec::with_capacity(3 * width * rows);
    for r in 0..rows {
        for c in 0..width {
            let (c0, c1) = (c.saturating_sub(1), (c + 1).min(width - 1));
            let (r0, r1) = (r.saturating_sub(1), (r + 1).min(rows - 1));
            let dx = if c1 > c0 { (at(r, c1) - at(r, c0)) / ((c1 - c0) as f64 * texel) } else { 0.0 };
            // rows grow downwards while y grows upwards
            let dy = if r1 > r0 { (at(r0, c) - at(r1, c)) / ((r1 - r0) as f64 * texel) } else { 0.0 };
            out.extend(Vec3::new(-dx, -dy, 1.0).normalize().to_array());
        }
    }
    Ok(out)
}

/// Square material at `resolution`, deterministic in the recipe.
pub fn synthesize_material(recipe: &MaterialRecipe, resolution: usize) -> Result<SvbrdfMaps> {
    recipe.validate()?;
    if resolution < 2 {
        return Err(invalid(format!("resolution {resolution} too small")));
    }
    let f = synthesize_fields(recipe, resolution);
    let normal = normals_from_height(&f.height, resolution, resolution)?;
    SvbrdfMaps::new(resolution, resolution, f.base_color, normal, f.roughness, f.metallic)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    /// Number of quarter turns.
    pub rot90: u8,
    /// Additional free rotation.
    pub angle_deg: f64,
    /// Crop window edge as a fraction of the shorter source edge.
    pub scale: f64,
    /// Crop center in source texels, `x` right and `y` up from the bottom-left corner.
    pub center: [f64; 2],
}

impl AugmentParams {
    pub fn identity(source: (usize, usize), target: usize) -> Self {
        let (w, h) = source;
        Self {
            rot90: 0,
            angle_deg: 0.0,
            scale: target as f64 / w.min(h) as f64,
            center: [0.5 * w as f64, 0.5 * h as f64],
        }
    }

    fn angle_rad(&self) -> f64 {
        (90.0 * self.rot90 as f64 + self.angle_deg).to_radians()
    }
}

pub const MIN_AUGMENT_SCALE: f64 = 0.5;
pub const MAX_FREE_ROTATION_DEG: f64 = 45.0;

/// Random quarter turn, free rotation, scale and crop position.
pub fn sample_augment(rng: &mut impl Rng, source: (usize, usize), target: usize) -> Result<AugmentParams> {
    let short = source.0.min(source.1) as f64;
    let lo = MIN_AUGMENT_SCALE.max(target as f64 / short);
    if lo > 1.0 {
        return Err(invalid(format!(
            "source {}x{} is smaller than the {target} target",
            source.0, source.1
        )));
    }
    let scale = if lo < 1.0 { rng.random_range(lo..=1.0) } else { 1.0 };
    let half = 0.5 * scale * short;
    let pick = |rng: &mut dyn rand::RngCore, extent: usize| {
        let (a, b) = (half, extent as f64 - half);
        if b > a {
            rng.random_range(a..=b)
        } else {
            0.5 * extent as f64
        }
    };
    let cx = pick(rng, source.0);
    let cy = pick(rng, source.1);
    Ok(AugmentParams {
        rot90: rng.random_range(0..4),
        angle_deg: rng.random_range(-MAX_FREE_ROTATION_DEG..MAX_FREE_ROTATION_DEG),
        scale,
        center: [cx, cy],
    })
}

/// Mirror a texel index into `[0, n)`; the flag says whether the image was
/// reflected an odd number of times.
fn reflect_index(i: i64, n: usize) -> (usize, bool) {
    let n = n as i64;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    if m < n {
        (m as usize, false)
    } else {
        ((period - 1 - m) as usize, true)
    }
}

struct Sampler<'a> {
    maps: &'a SvbrdfMaps,
    w: usize,
    h: usize,
}

impl Sampler<'_> {
    /// Bilinear sample at a point in texel units (`y` up), accumulated into `acc`
    /// as `[b0, b1, b2, nx, ny, nz, roughness, metallic]`.
    fn sample(&self, x: f64, y: f64, acc: &mut [f64; 8]) {
        let fx = x - 0.5;
        let fy = self.h as f64 - y - 0.5;
        let (x0, y0) = (fx.floor(), fy.floor());
        let (tx, ty) = (fx - x0, fy - y0);
        for (dy, wy) in [(0, 1.0 - ty), (1, ty)] {
            let (row, flip_y) = reflect_index(y0 as i64 + dy, self.h);
            for (dx, wx) in [(0, 1.0 - tx), (1, tx)] {
                let wgt = wx * wy;
                if wgt == 0.0 {
                    continue;
                }
                let (col, flip_x) = reflect_index(x0 as i64 + dx, self.w);
                let p = self.maps.point(row * self.w + col).to_params();
                for k in 0..8 {
                    let sign = match k {
                        3 if flip_x => -1.0,
                        4 if flip_y => -1.0,
                        _ => 1.0,
                    };
                    acc[k] += wgt * sign * p[k];
                }
            }
        }
    }
}

/// Resample `maps` into a `target x target` crop. Parts of the rotated window
/// outside the source are filled by reflection; normals are rotated with the
/// content.
pub fn apply_augment(maps: &SvbrdfMaps, p: &AugmentParams, target: usize) -> Result<SvbrdfMaps> {
    if target == 0 || !(p.scale > 0.0) {
        return Err(invalid("augmentation needs a positive target size and scale"));
    }
    let (w, h) = maps.resolution();
    let window = p.scale * w.min(h) as f64;
    let step = window / target as f64;
    // supersample when shrinking so thin features do not alias
    let ss = step.ceil().max(1.0) as usize;
    let (sin_t, cos_t) = p.angle_rad().sin_cos();
    let sampler = Sampler { maps, w, h };
    let n = target * target;
    let mut base = Vec::with_capacity(3 * n);
    let mut normal = Vec::with_capacity(3 * n);
    let mut rough = Vec::with_capacity(n);
    let mut metal = Vec::with_capacity(n);
    for r in 0..target {
        for c in 0..target {
            let mut acc = [0.0; 8];
            for sy in 0..ss {
                for sx in 0..ss {
                    let ox = (c as f64 + (sx as f64 + 0.5) / ss as f64 - 0.5 * target as f64) * step;
                    let oy = (0.5 * target as f64 - r as f64 - (sy as f64 + 0.5) / ss as f64) * step;
                    let x = p.center[0] + cos_t * ox - sin_t * oy;
                    let y = p.center[1] + sin_t * ox + cos_t * oy;
                    sampler.sample(x, y, &mut acc);
                }
            }
            let inv = 1.0 / (ss * ss) as f64;
            base.extend(acc[..3].iter().map(|v| v * inv));
            // content rotated by -theta, so tangent-plane normals rotate the same way
            let n = Vec3::new(cos_t * acc[3] + sin_t * acc[4], -sin_t * acc[3] + cos_t * acc[4], acc[5]);
            normal.extend(n.to_array());
            rough.push(acc[6] * inv);
            metal.push(acc[7] * inv);
        }
    }
    SvbrdfMaps::repaired(target, target, base, normal, rough, metal)
}

/// `n` random crops of `maps` at `target` resolution.
pub fn augment(
    maps: &SvbrdfMaps,
    rng: &mut impl Rng,
    n: usize,
    target: usize,
) -> Result<Vec<(AugmentParams, SvbrdfMaps)>> {
    (0..n)
        .map(|_| {
            let p = sample_augment(rng, maps.resolution(), target)?;
            Ok((p, apply_augment(maps, &p, target)?))
        })
        .collect()
}

/// Environment lighting approximated by a few directional lights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvApprox {
    pub lights: Vec<DirectionalLight>,
}

impl EnvApprox {
    /// Importance-sample `m` directions of the upper hemisphere of an
    /// equirectangular radiance map (row 0 looks straight up), stratified by `rng`.
    pub fn from_equirect(env: &HdrImage, m: usize, rng: &mut impl Rng) -> Result<Self> {
        let (w, h) = (env.width, env.height);
        if w == 0 || h < 2 {
            return Err(invalid(format!("environment map {w}x{h} too small")));
        }
        let d_theta = PI / h as f64;
        let d_phi = 2.0 * PI / w as f64;
        let mut cells = Vec::new();
        let mut cdf = Vec::new();
        let mut total = 0.0;
        for r in 0..h / 2 {
            let theta = (r as f64 + 0.5) * d_theta;
            let solid = theta.sin() * d_theta * d_phi;
            for c in 0..w {
                let l = env.at(r, c);
                if l.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                    return Err(invalid(format!("environment radiance {l:?} at ({r}, {c})")));
                }
                let wgt = luminance(l) * solid;
                if wgt > 0.0 {
                    total += wgt;
                    cells.push((r, c, solid));
                    cdf.push(total);
                }
            }
        }
        if total == 0.0 || m == 0 {
            return Ok(Self { lights: Vec::new() });
        }
        let lights = (0..m)
            .map(|k| {
                let u = (k as f64 + rng.random::<f64>()) / m as f64 * total;
                let idx = cdf.partition_point(|v| *v < u).min(cells.len() - 1);
                let (r, c, solid) = cells[idx];
                let l = env.at(r, c);
                let prob = luminance(l) * solid / total;
                let theta = (r as f64 + 0.5) * d_theta;
                let phi = (c as f64 + 0.5) * d_phi;
                DirectionalLight {
                    direction: Vec3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()),
                    color: std::array::from_fn(|ch| l[ch] * solid / (prob * m as f64)),
                }
            })
            .collect();
        Ok(Self { lights })
    }

    /// Clear sky with a sun, rendered into a small equirectangular map and sampled.
    pub fn analytic_sky(seed: u64, m: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (64, 32);
        let sun_elev: f64 = rng.random_range(15f64..70.0).to_radians();
        let sun_az = rng.random_range(0.0..2.0 * PI);
        let sun = Vec3::new(sun_elev.cos() * sun_az.cos(), sun_elev.cos() * sun_az.sin(), sun_elev.sin());
        let sun_strength = rng.random_range(5.0..40.0);
        let zenith = [0.25, 0.4, 0.8];
        let horizon = [0.8, 0.85, 0.9];
        let mut data = Vec::with_capacity(3 * w * h);
        for r in 0..h {
            let theta = (r as f64 + 0.5) * PI / h as f64;
            for c in 0..w {
                let phi = (c as f64 + 0.5) * 2.0 * PI / w as f64;
                let d = Vec3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos());
                let t = d.z.max(0.0).sqrt();
                let lobe = sun_strength * ((d.dot(sun) - 1.0) / 0.01).exp();
                for ch in 0..3 {
                    let sky = horizon[ch] + (zenith[ch] - horizon[ch]) * t;
                    data.push(if d.z > 0.0 { sky + lobe } else { 0.0 });
                }
            }
        }
        let env = HdrImage::new(w, h, data).expect("sky dimensions match");
        Self::from_equirect(&env, m, &mut rng).expect("analytic sky is valid")
    }

    pub fn rotated_z(&self, angle_rad: f64) -> Self {
        Self {
            lights: self
                .lights
                .iter()
                .map(|l| DirectionalLight {
                    direction: l.direction.rotate_z(angle_rad),
                    color: l.color,
                })
                .collect(),
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            lights: self
                .lights
                .iter()
                .map(|l| DirectionalLight {
                    direction: l.direction,
                    color: l.color.map(|c| c * s),
                })
                .collect(),
        }
    }

    /// Luminance of the irradiance on an upward-facing surface.
    pub fn horizontal_irradiance(&self) -> f64 {
        self.lights.iter().map(|l| luminance(l.color) * l.direction.z.max(0.0)).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvSource {
    Sky { seed: u64 },
    File { path: PathBuf },
}

impl EnvSource {
    /// Load and sample the environment; an unreadable file falls back to an
    /// analytic sky.
    pub fn load(&self, m: usize, rng: &mut impl Rng) -> EnvApprox {
        match self {
            EnvSource::Sky { seed } => EnvApprox::analytic_sky(*seed, m),
            EnvSource::File { path } => match read_pfm(path).and_then(|img| EnvApprox::from_equirect(&img, m, rng)) {
                Ok(env) => env,
                Err(e) => {
                    warn!("environment {}: {e}; using an analytic sky", path.display());
                    let seed = path.to_string_lossy().bytes().fold(0u64, |a, b| a.wrapping_mul(31).wrapping_add(b as u64));
                    EnvApprox::analytic_sky(seed, m)
                }
            },
        }
    }
}

/// Disjoint train and test environment pools, from the PFM files in `env_dir`
/// when it holds enough of them and analytic skies otherwise.
pub fn env_pools(env_dir: Option<&Path>, seed: u64) -> Result<(Vec<EnvSource>, Vec<EnvSource>)> {
    if let Some(dir) = env_dir {
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| io_err(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("pfm")))
            .collect();
        files.sort();
        if files.len() >= 2 {
            let n_test = ((files.len() * TEST_ENV_POOL) as f64 / (TRAIN_ENV_POOL + TEST_ENV_POOL) as f64)
                .round()
                .max(1.0) as usize;
            let test = files.split_off(files.len() - n_test);
            let wrap = |v: Vec<PathBuf>| v.into_iter().map(|path| EnvSource::File { path }).collect();
            return Ok((wrap(files), wrap(test)));
        }
        warn!("{}: fewer than two PFM environments, using analytic skies", dir.display());
    }
    let sky = |k: usize| EnvSource::Sky {
        seed: seed.wrapping_mul(1_000_003).wrapping_add(k as u64),
    };
    Ok((
        (0..TRAIN_ENV_POOL).map(sky).collect(),
        (TRAIN_ENV_POOL..TRAIN_ENV_POOL + TEST_ENV_POOL).map(sky).collect(),
    ))
}

/// Linear RGB of a blackbody at `kelvin`, scaled to unit luminance
/// (polynomial fit valid between 1000 K and 40000 K).
pub fn color_temperature_rgb(kelvin: f64) -> [f64; 3] {
    let t = kelvin.clamp(1000.0, 40000.0) / 100.0;
    let srgb = if t <= 66.0 {
        let g = 99.470_802_586_1 * t.ln() - 161.119_568_166_1;
        let b = if t <= 19.0 {
            0.0
        } else {
            138.517_731_223_1 * (t - 10.0).ln() - 305.044_792_730_7
        };
        [255.0, g, b]
    } else {
        [
            329.698_727_446 * (t - 60.0).powf(-0.133_204_759_2),
            288.122_169_528_3 * (t - 60.0).powf(-0.075_514_849_2),
            255.0,
        ]
    };
    let lin = srgb.map(|v| crate::maps::srgb_to_linear((v / 255.0).clamp(0.0, 1.0)));
    let l = luminance(lin);
    lin.map(|v| v / l)
}

/// Per-input jitter of flash and environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderParams {
    pub env: Option<EnvSource>,
    pub env_rotation_deg: f64,
    /// Environment irradiance relative to the flash irradiance at the patch center.
    pub env_ratio: f64,
    pub flash_strength: f64,
    pub color_temp_k: f64,
    /// Seed of the stratified environment sampling.
    pub env_sample_seed: u64,
}

impl RenderParams {
    pub fn sample(rng: &mut impl Rng, pool: &[EnvSource]) -> Self {
        Self {
            env: pool.choose(rng).cloned(),
            env_rotation_deg: rng.random_range(0.0..360.0),
            env_ratio: rng.random_range(0.05..0.4),
            flash_strength: rng.random_range(0.7..1.3),
            color_temp_k: rng.random_range(4500.0..7000.0),
            env_sample_seed: rng.random(),
        }
    }

    pub fn flash_only() -> Self {
        Self {
            env: None,
            env_rotation_deg: 0.0,
            env_ratio: 0.0,
            flash_strength: 1.0,
            color_temp_k: 6500.0,
            env_sample_seed: 0,
        }
    }

    /// Scene with the jittered flash.
    pub fn scene(&self, base: &SceneConfig) -> SceneConfig {
        let mut cfg = base.clone();
        cfg.flash_intensity = base.flash_intensity.map(|v| v * self.flash_strength);
        cfg.flash_color_temp_scale = color_temperature_rgb(self.color_temp_k);
        cfg
    }

    /// Environment rotated and scaled against the flash of `scene`.
    pub fn environment(&self, scene: &SceneConfig, m: usize) -> Option<EnvApprox> {
        let src = self.env.as_ref()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.env_sample_seed);
        let env = src.load(m, &mut rng).rotated_z(self.env_rotation_deg.to_radians());
        let e = env.horizontal_irradiance();
        if e <= 0.0 {
            return Some(env);
        }
        let flash = luminance(scene.flash_light().color) / scene.camera_height_m.powi(2);
        Some(env.scaled(self.env_ratio * flash / e))
    }
}

/// Linear HDR flash render plus the environment lights.
pub fn render_input_hdr(maps: &SvbrdfMaps, env: Option<&EnvApprox>, cfg: &SceneConfig) -> Result<HdrImage> {
    cfg.validate()?;
    let mut img = render_flash(maps, cfg);
    for light in env.map(|e| e.lights.as_slice()).unwrap_or_default() {
        img = img.add(&render_directional(maps, light, cfg.camera_position(), cfg))?;
    }
    Ok(img)
}

/// Flash + environment render mapped to `[0, 1]` by auto exposure.
pub fn render_input(maps: &SvbrdfMaps, env: Option<&EnvApprox>, cfg: &SceneConfig) -> Result<LdrImage> {
    apply_auto_exposure(&render_input_hdr(maps, env, cfg)?, &ExposureParams::default())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One input image with its ground truth. Paths are relative to the dataset root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub material_id: String,
    pub split: Split,
    pub recipe: MaterialRecipe,
    pub aug_idx: usize,
    pub augment: AugmentParams,
    pub input_idx: usize,
    pub render: RenderParams,
    pub input_path: String,
    pub maps_dir: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn material_ids(&self, split: Split) -> Vec<&str> {
        let mut ids: Vec<&str> = self.split(split).map(|r| r.material_id.as_str()).collect();
        ids.dedup();
        ids
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
        let mut w = BufWriter::new(file);
        for r in &self.records {
            let line = serde_json::to_string(r).map_err(|e| Error::Format {
                path: path.display().to_string(),
                msg: e.to_string(),
            })?;
            writeln!(w, "{line}").map_err(|e| io_err(path, e))?;
        }
        w.flush().map_err(|e| io_err(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| io_err(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line).map_err(|e| Error::Format {
                path: path.display().to_string(),
                msg: format!("line {}: {e}", i + 1),
            })?);
        }
        Ok(Self { records })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetOptions {
    pub n_materials: usize,
    pub source_resolution: usize,
    pub resolution: usize,
    pub augmentations: usize,
    pub train_env_draws: usize,
    pub test_env_draws: usize,
    pub env_lights: usize,
    pub env_dir: Option<PathBuf>,
    pub scene: SceneConfig,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        Self {
            n_materials: 10,
            source_resolution: 1024,
            resolution: 512,
            augmentations: AUGMENTATIONS,
            train_env_draws: TRAIN_ENV_DRAWS,
            test_env_draws: TEST_ENV_DRAWS,
            env_lights: ENV_LIGHTS,
            env_dir: None,
            scene: SceneConfig::default(),
        }
    }
}

impl DatasetOptions {
    /// 128 px sources cropped to 64 px.
    pub fn toy(n_materials: usize) -> Self {
        Self {
            n_materials,
            source_resolution: 128,
            resolution: 64,
            ..Self::default()
        }
    }
}

/// Material ids of the training split: a seeded 80 % of all materials.
pub fn split_materials(n: usize, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (TRAIN_FRACTION * n as f64).round() as usize;
    let mut split = vec![Split::Test; n];
    for &i in &order[..n_train] {
        split[i] = Split::Train;
    }
    split
}

pub fn material_id(index: usize) -> String {
    format!("m{index:05}")
}

fn material_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

fn build_material(
    index: usize,
    split: Split,
    opts: &DatasetOptions,
    pool: &[EnvSource],
    out_dir: &Path,
    seed: u64,
) -> Result<Vec<SampleRecord>> {
    let mut rng = material_rng(seed, index);
    let kind = RecipeKind::ALL[rng.random_range(0..RecipeKind::ALL.len())];
    let recipe = MaterialRecipe::random(kind, &mut rng);
    let source = synthesize_material(&recipe, opts.source_resolution)?;
    let id = material_id(index);
    let draws = match split {
        Split::Train => opts.train_env_draws,
        Split::Test => opts.test_env_draws,
    };
    let mut records = Vec::with_capacity(opts.augmentations * draws);
    for (aug_idx, (augment, maps)) in augment(&source, &mut rng, opts.augmentations, opts.resolution)?
        .into_iter()
        .enumerate()
    {
        let rel_dir = format!("{}/{id}/{aug_idx}", split.name());
        let dir = out_dir.join(&rel_dir);
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        save_material(&dir, &maps)?;
        for input_idx in 0..draws {
            let render = RenderParams::sample(&mut rng, pool);
            let scene = render.scene(&opts.scene);
            let env = render.environment(&scene, opts.env_lights);
            let img = render_input(&maps, env.as_ref(), &scene)?;
            let input_path = format!("{rel_dir}/input_{input_idx}.png");
            write_ldr_png(&out_dir.join(&input_path), &img)?;
            records.push(SampleRecord {
                material_id: id.clone(),
                split,
                recipe: recipe.clone(),
                aug_idx,
                augment,
                input_idx,
                render,
                input_path,
                maps_dir: rel_dir.clone(),
            });
        }
    }
    Ok(records)
}

/// Generate, split, augment and render `opts.n_materials` materials under
/// `out_dir` and write `manifest.jsonl` there.
pub fn build_dataset(opts: &DatasetOptions, out_dir: &Path, seed: u64) -> Result<DatasetManifest> {
    if opts.n_materials == 0 || opts.augmentations == 0 {
        return Err(invalid("dataset needs at least one material and one augmentation"));
    }
    opts.scene.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let splits = split_materials(opts.n_materials, seed);
    let (train_pool, test_pool) = env_pools(opts.env_dir.as_deref(), seed)?;
    let per_material: Vec<Vec<SampleRecord>> = (0..opts.n_materials)
        .into_par_iter()
        .map(|i| {
            let pool = match splits[i] {
                Split::Train => &train_pool,
                Split::Test => &test_pool,
            };
            build_material(i, splits[i], opts, pool, out_dir, seed)
        })
        .collect::<Result<_>>()?;
    let mut records: Vec<SampleRecord> = per_material.into_iter().flatten().collect();
    records.sort_by(|a, b| {
        (a.split, &a.material_id, a.aug_idx, a.input_idx).cmp(&(b.split, &b.material_id, b.aug_idx, b.input_idx))
    });
    let manifest = DatasetManifest { records };
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_index_mirrors() {
        assert_eq!(reflect_index(-1, 4), (0, true));
        assert_eq!(reflect_index(4, 4), (3, true));
        assert_eq!(reflect_index(2, 4), (2, false));
        assert_eq!(reflect_index(9, 4), (1, false));
    }

    #[test]
    fn daylight_is_near_white() {
        let c = color_temperature_rgb(6600.0);
        assert!(c.iter().all(|v| (v - 1.0).abs() < 0.05), "{c:?}");
        let warm = color_temperature_rgb(3000.0);
        assert!(warm[0] > warm[2]);
    }

    #[test]
    fn split_is_eighty_percent() {
        let s = split_materials(10, 3);
        assert_eq!(s.iter().filter(|x| **x == Split::Train).count(), 8);
        assert_eq!(split_materials(10, 3), s);
    }
}
