//! Cook-Torrance GGX specular plus Burley diffuse at a single shading point,
//! with an analytic jacobian with respect to the eight per-pixel parameters.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::maps::{split_metallic, DIELECTRIC_F0};
use crate::math::Vec3;

/// Lower bound on `alpha_g` keeping the NDF finite at `n.h = 1`.
pub const MIN_ALPHA: f64 = 1e-3;

/// Products `(n.wo)(n.wi)` below this are treated as below the horizon.
pub const HORIZON_EPS: f64 = 1e-6;

/// Order of the jacobian columns.
pub const PARAM_NAMES: [&str; 8] = [
    "base_r", "base_g", "base_b", "normal_x", "normal_y", "normal_z", "roughness", "metallic",
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShadingPoint {
    pub base_color: [f64; 3],
    pub normal: Vec3,
    pub roughness: f64,
    pub metallic: f64,
}

impl ShadingPoint {
    pub fn to_params(&self) -> [f64; 8] {
        let b = self.base_color;
        let n = self.normal;
        [b[0], b[1], b[2], n.x, n.y, n.z, self.roughness, self.metallic]
    }

    pub fn from_params(p: [f64; 8]) -> Self {
        Self {
            base_color: [p[0], p[1], p[2]],
            normal: Vec3::new(p[3], p[4], p[5]),
            roughness: p[6],
            metallic: p[7],
        }
    }
}

/// `omega_i` points towards the light, `omega_o` towards the viewer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DirectionPair {
    pub omega_i: Vec3,
    pub omega_o: Vec3,
}

impl DirectionPair {
    pub fn swapped(self) -> Self {
        Self {
            omega_i: self.omega_o,
            omega_o: self.omega_i,
        }
    }
}

/// GGX normal distribution `a^2 / (pi ((n.h)^2 (a^2 - 1) + 1)^2)` with `a = max(alpha_g, 1e-3)`.
pub fn ggx_ndf(alpha_g: f64, n_dot_h: f64) -> f64 {
    let a = alpha_g.max(MIN_ALPHA);
    let a2 = a * a;
    let den = n_dot_h * n_dot_h * (a2 - 1.0) + 1.0;
    a2 / (PI * den * den)
}

/// Smith GGX masking for one direction, `2x / (x + sqrt(a2 + (1 - a2) x^2))`.
pub fn smith_g1(alpha_g: f64, x: f64) -> f64 {
    let a = alpha_g.max(MIN_ALPHA);
    let a2 = a * a;
    2.0 * x / (x + (a2 + (1.0 - a2) * x * x).sqrt())
}

/// Schlick Fresnel `f0 + (1 - f0)(1 - cos)^5`.
pub fn schlick_fresnel(f0: f64, cos: f64) -> f64 {
    f0 + (1.0 - f0) * (1.0 - cos).powi(5)
}

/// Burley retro-reflection factor `1 + (fd90 - 1)(1 - cos)^5`.
fn burley_factor(fd90: f64, cos: f64) -> f64 {
    1.0 + (fd90 - 1.0) * (1.0 - cos).powi(5)
}

/// Parameter-independent geometry plus everything derived from it.
struct Setup {
    nl: f64,
    nv: f64,
    nh: f64,
    hl: f64,
    /// Schlick weight `(1 - h.wo)^5`.
    w: f64,
    h: Vec3,
}

fn setup(p: &ShadingPoint, dirs: &DirectionPair) -> Option<Setup> {
    let n = p.normal;
    let nl = n.dot(dirs.omega_i);
    let nv = n.dot(dirs.omega_o);
    if nl <= 0.0 || nv <= 0.0 || nl * nv < HORIZON_EPS {
        return None;
    }
    let h = (dirs.omega_i + dirs.omega_o).normalize();
    let hv = h.dot(dirs.omega_o).clamp(0.0, 1.0);
    Some(Setup {
        nl,
        nv,
        nh: n.dot(h),
        hl: h.dot(dirs.omega_i),
        w: (1.0 - hv).powi(5),
        h,
    })
}

/// Reflectance `f_r = k_s + k_d` per RGB channel; zero below the horizon.
pub fn eval_brdf(p: &ShadingPoint, dirs: &DirectionPair) -> [f64; 3] {
    let Some(g) = setup(p, dirs) else {
        return [0.0; 3];
    };
    let alpha = p.roughness * p.roughness;
    let (d, s) = split_metallic(p.base_color, p.metallic);
    let spec = ggx_ndf(alpha, g.nh) * smith_g1(alpha, g.nl) * smith_g1(alpha, g.nv) / (4.0 * g.nl * g.nv);
    let fd90 = 0.5 + 2.0 * p.roughness * g.hl * g.hl;
    let diff = burley_factor(fd90, g.nl) * burley_factor(fd90, g.nv) / PI;
    std::array::from_fn(|c| spec * (s[c] * (1.0 - g.w) + g.w) + d[c] * diff)
}

/// Value and jacobian `J[c][k] = d f_r[c] / d param[k]`, columns ordered as [`PARAM_NAMES`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BrdfGrad {
    pub value: [f64; 3],
    pub jacobian: [[f64; 8]; 3],
}

/// `g(x) = G1(x) / x = 2 / (x + q)` and its partials in `x` and `a2`.
fn masking_over_cos(a2: f64, x: f64) -> (f64, f64, f64) {
    let q = (a2 + (1.0 - a2) * x * x).sqrt();
    let xq = x + q;
    let g = 2.0 / xq;
    let dg_dx = -2.0 * (1.0 + (1.0 - a2) * x / q) / (xq * xq);
    let dg_da2 = -(1.0 - x * x) / (q * xq * xq);
    (g, dg_dx, dg_da2)
}

pub fn eval_brdf_grad(p: &ShadingPoint, dirs: &DirectionPair) -> BrdfGrad {
    let Some(g) = setup(p, dirs) else {
        return BrdfGrad {
            value: [0.0; 3],
            jacobian: [[0.0; 8]; 3],
        };
    };
    let r = p.roughness;
    let m = p.metallic;
    let b = p.base_color;
    let raw_alpha = r * r;
    let clamped = raw_alpha < MIN_ALPHA;
    let alpha = raw_alpha.max(MIN_ALPHA);
    let a2 = alpha * alpha;
    let da2_dr = if clamped { 0.0 } else { 4.0 * r * r * r };

    // NDF and its partials
    let den = g.nh * g.nh * (a2 - 1.0) + 1.0;
    let ndf = a2 / (PI * den * den);
    let dndf_da2 = (den - 2.0 * a2 * g.nh * g.nh) / (PI * den * den * den);
    let dndf_dnh = -4.0 * a2 * g.nh * (a2 - 1.0) / (PI * den * den * den);

    let (gl, dgl_dx, dgl_da2) = masking_over_cos(a2, g.nl);
    let (gv, dgv_dx, dgv_da2) = masking_over_cos(a2, g.nv);

    // spec = D gl gv / 4 so that k_s = spec * F
    let spec = 0.25 * ndf * gl * gv;
    let dspec_da2 = 0.25 * (dndf_da2 * gl * gv + ndf * (dgl_da2 * gv + gl * dgv_da2));
    let dspec_dr = dspec_da2 * da2_dr;
    let dspec_dn = g.h * (0.25 * dndf_dnh * gl * gv)
        + dirs.omega_i * (0.25 * ndf * dgl_dx * gv)
        + dirs.omega_o * (0.25 * ndf * gl * dgv_dx);

    let fd90 = 0.5 + 2.0 * r * g.hl * g.hl;
    let pl = (1.0 - g.nl).powi(5);
    let pv = (1.0 - g.nv).powi(5);
    let fl = 1.0 + (fd90 - 1.0) * pl;
    let fv = 1.0 + (fd90 - 1.0) * pv;
    let diff = fl * fv / PI;
    let ddiff_dr = 2.0 * g.hl * g.hl * (pl * fv + fl * pv) / PI;
    let dfl_dnl = -5.0 * (fd90 - 1.0) * (1.0 - g.nl).powi(4);
    let dfv_dnv = -5.0 * (fd90 - 1.0) * (1.0 - g.nv).powi(4);
    let ddiff_dn = dirs.omega_i * (dfl_dnl * fv / PI) + dirs.omega_o * (fl * dfv_dnv / PI);

    let mut value = [0.0; 3];
    let mut jacobian = [[0.0; 8]; 3];
    for c in 0..3 {
        let d = b[c] * (1.0 - m);
        let s = DIELECTRIC_F0 * (1.0 - m) + b[c] * m;
        let f = s * (1.0 - g.w) + g.w;
        value[c] = spec * f + d * diff;
        let row = &mut jacobian[c];
        row[c] = spec * (1.0 - g.w) * m + diff * (1.0 - m);
        let dn = dspec_dn * f + ddiff_dn * d;
        row[3] = dn.x;
        row[4] = dn.y;
        row[5] = dn.z;
        row[6] = dspec_dr * f + d * ddiff_dr;
        row[7] = spec * (1.0 - g.w) * (b[c] - DIELECTRIC_F0) - b[c] * diff;
    }
    BrdfGrad { value, jacobian }
}
