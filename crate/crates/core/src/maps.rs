//! Per-pixel material parameters in the metallic workflow and the conversions
//! around them: sRGB transfer, tangent-space normal codec and the
//! base color / metallic split into diffuse and specular albedo.

use log::warn;
use svbrdf_tensor::{Element, Tensor};

use crate::error::{invalid, Error, Result};
use crate::math::Vec3;
use crate::shading::ShadingPoint;

/// Specular reflectance assumed for every dielectric.
pub const DIELECTRIC_F0: f64 = 0.04;

/// Tolerance on `|n| = 1` accepted by [`SvbrdfMaps::validate`].
pub const NORMAL_LENGTH_TOL: f64 = 1e-5;

/// Smallest z component a repaired normal is allowed to have.
pub const MIN_NORMAL_Z: f64 = 1e-4;

/// Number of channels in the packed parameter layout
/// `[base r, base g, base b, normal x, normal y, normal z, roughness, metallic]`.
pub const PARAM_CHANNELS: usize = 8;

fn clamp_unit(c: f64, what: &str) -> f64 {
    if (0.0..=1.0).contains(&c) {
        c
    } else {
        warn!("{what}: input {c} outside [0, 1], clamped");
        if c.is_nan() {
            0.0
        } else {
            c.clamp(0.0, 1.0)
        }
    }
}

/// sRGB electro-optical transfer function.
pub fn srgb_to_linear(c: f64) -> f64 {
    let c = clamp_unit(c, "srgb_to_linear");
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

/// Inverse of [`srgb_to_linear`].
pub fn linear_to_srgb(c: f64) -> f64 {
    let c = clamp_unit(c, "linear_to_srgb");
    if c <= 0.0031308 {
        c * 12.92
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

/// Diffuse and specular albedo from linear base color `b` and metallic `m`:
/// `d = b (1 - m)`, `s = 0.04 (1 - m) + b m`.
pub fn split_metallic(b: [f64; 3], m: f64) -> ([f64; 3], [f64; 3]) {
    let d = b.map(|c| c * (1.0 - m));
    let s = b.map(|c| DIELECTRIC_F0 * (1.0 - m) + c * m);
    (d, s)
}

/// Tangent-space normal from an `[0, 1]` RGB encoding, `normalize(2 rgb - 1)`.
///
/// Zero-length vectors decode to `+z`; normals pointing below the surface
/// have their z component flipped.
pub fn decode_normal(rgb: [f64; 3]) -> [f64; 3] {
    let v = Vec3::from_array(rgb.map(|c| 2.0 * c - 1.0));
    let len = v.length();
    if !(len > 1e-12) {
        return [0.0, 0.0, 1.0];
    }
    let mut n = v * (1.0 / len);
    if n.z < 0.0 {
        n.z = -n.z;
    }
    n.to_array()
}

/// Inverse of [`decode_normal`] for unit normals: `(n + 1) / 2`.
pub fn encode_normal(n: [f64; 3]) -> [f64; 3] {
    n.map(|c| 0.5 * (c + 1.0))
}

pub(crate) fn repair_normal(n: [f64; 3]) -> [f64; 3] {
    let mut v = Vec3::from_array(n);
    if !v.x.is_finite() || !v.y.is_finite() || !v.z.is_finite() || v.length() < 1e-12 {
        return [0.0, 0.0, 1.0];
    }
    if (v.length() - 1.0).abs() > 1e-12 {
        v = v.normalize();
    }
    if v.z < 0.0 {
        v.z = -v.z;
    }
    if v.z < MIN_NORMAL_Z {
        v.z = MIN_NORMAL_Z;
        v = v.normalize();
    }
    v.to_array()
}

/// Base color, normal, roughness and metallic maps of one material.
///
/// Maps are stored interleaved, row-major, top row first.
#[derive(Clone, Debug, PartialEq)]
pub struct SvbrdfMaps {
    width: usize,
    height: usize,
    base_color: Vec<f64>,
    normal: Vec<f64>,
    roughness: Vec<f64>,
    metallic: Vec<f64>,
}

impl SvbrdfMaps {
    /// Build from raw maps, rejecting anything that violates the invariants.
    pub fn new(
        width: usize,
        height: usize,
        base_color: Vec<f64>,
        normal: Vec<f64>,
        roughness: Vec<f64>,
        metallic: Vec<f64>,
    ) -> Result<Self> {
        let maps = Self::unchecked(width, height, base_color, normal, roughness, metallic)?;
        maps.validate()?;
        Ok(maps)
    }

    /// Build from raw maps, clamping scalars into `[0, 1]` and renormalizing normals.
    pub fn repaired(
        width: usize,
        height: usize,
        base_color: Vec<f64>,
        normal: Vec<f64>,
        roughness: Vec<f64>,
        metallic: Vec<f64>,
    ) -> Result<Self> {
        let mut maps = Self::unchecked(width, height, base_color, normal, roughness, metallic)?;
        maps.repair();
        Ok(maps)
    }

    fn unchecked(
        width: usize,
        height: usize,
        base_color: Vec<f64>,
        normal: Vec<f64>,
        roughness: Vec<f64>,
        metallic: Vec<f64>,
    ) -> Result<Self> {
        let n = width * height;
        if n == 0 {
            return Err(invalid("material maps must be non-empty"));
        }
        for (name, len, want) in [
            ("base_color", base_color.len(), 3 * n),
            ("normal", normal.len(), 3 * n),
            ("roughness", roughness.len(), n),
            ("metallic", metallic.len(), n),
        ] {
            if len != want {
                return Err(Error::ShapeMismatch(format!(
                    "{name}: expected {want} values for {width}x{height}, got {len}"
                )));
            }
        }
        Ok(Self {
            width,
            height,
            base_color,
            normal,
            roughness,
            metallic,
        })
    }

    /// Spatially uniform material.
    pub fn uniform(
        width: usize,
        height: usize,
        base_color: [f64; 3],
        normal: [f64; 3],
        roughness: f64,
        metallic: f64,
    ) -> Result<Self> {
        let n = width * height;
        Self::new(
            width,
            height,
            base_color.repeat(n),
            normal.repeat(n),
            vec![roughness; n],
            vec![metallic; n],
        )
    }

    fn repair(&mut self) {
        for v in self
            .base_color
            .iter_mut()
            .chain(self.roughness.iter_mut())
            .chain(self.metallic.iter_mut())
        {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        for px in self.normal.chunks_exact_mut(3) {
            let n = repair_normal([px[0], px[1], px[2]]);
            px.copy_from_slice(&n);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: &f64| v.is_finite() && (0.0..=1.0).contains(v);
        if !self.base_color.iter().all(in_unit) {
            return Err(invalid("base color outside [0, 1]"));
        }
        if !self.roughness.iter().all(in_unit) {
            return Err(invalid("roughness outside [0, 1]"));
        }
        if !self.metallic.iter().all(in_unit) {
            return Err(invalid("metallic outside [0, 1]"));
        }
        for (i, px) in self.normal.chunks_exact(3).enumerate() {
            let len = Vec3::new(px[0], px[1], px[2]).length();
            if !len.is_finite() || (len - 1.0).abs() > NORMAL_LENGTH_TOL || !(px[2] > 0.0) {
                return Err(invalid(format!(
                    "normal at pixel {i} is {px:?} (length {len}); need unit length with z > 0"
                )));
            }
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// `(height, width)`
    pub fn resolution(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn base_color(&self) -> &[f64] {
        &self.base_color
    }

    pub fn normal(&self) -> &[f64] {
        &self.normal
    }

    pub fn roughness(&self) -> &[f64] {
        &self.roughness
    }

    pub fn metallic(&self) -> &[f64] {
        &self.metallic
    }

    pub fn point(&self, i: usize) -> ShadingPoint {
        ShadingPoint {
            base_color: [
                self.base_color[3 * i],
                self.base_color[3 * i + 1],
                self.base_color[3 * i + 2],
            ],
            normal: Vec3::new(self.normal[3 * i], self.normal[3 * i + 1], self.normal[3 * i + 2]),
            roughness: self.roughness[i],
            metallic: self.metallic[i],
        }
    }

    pub fn split(&self) -> DiffuseSpecularMaps {
        let n = self.pixel_count();
        let mut diffuse = Vec::with_capacity(3 * n);
        let mut specular = Vec::with_capacity(3 * n);
        for i in 0..n {
            let p = self.point(i);
            let (d, s) = split_metallic(p.base_color, p.metallic);
            diffuse.extend_from_slice(&d);
            specular.extend_from_slice(&s);
        }
        DiffuseSpecularMaps {
            width: self.width,
            height: self.height,
            diffuse,
            specular,
        }
    }

    /// Packed `[1, 8, H, W]` parameter tensor.
    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        let n = self.pixel_count();
        let mut data = vec![T::zero(); PARAM_CHANNELS * n];
        for i in 0..n {
            for c in 0..3 {
                data[c * n + i] = T::of(self.base_color[3 * i + c]);
                data[(3 + c) * n + i] = T::of(self.normal[3 * i + c]);
            }
            data[6 * n + i] = T::of(self.roughness[i]);
            data[7 * n + i] = T::of(self.metallic[i]);
        }
        Tensor::new(&[1, PARAM_CHANNELS, self.height, self.width], data)
            .expect("length matches shape")
    }

    /// Unpack batch entry `index` of a `[B, 8, H, W]` tensor, repairing values
    /// that fall outside the valid ranges.
    pub fn from_tensor<T: Element>(t: &Tensor<T>, index: usize) -> Result<Self> {
        let (b, c, h, w) = t.dims4("SvbrdfMaps::from_tensor")?;
        if c != PARAM_CHANNELS || index >= b {
            return Err(Error::ShapeMismatch(format!(
                "expected [B, 8, H, W] with B > {index}, got {:?}",
                t.shape()
            )));
        }
        let n = h * w;
        let d = &t.data()[index * PARAM_CHANNELS * n..(index + 1) * PARAM_CHANNELS * n];
        let at = |ch: usize, i: usize| d[ch * n + i].as_f64();
        let mut base_color = Vec::with_capacity(3 * n);
        let mut normal = Vec::with_capacity(3 * n);
        for i in 0..n {
            base_color.extend((0..3).map(|ch| at(ch, i)));
            normal.extend((3..6).map(|ch| at(ch, i)));
        }
        let roughness = (0..n).map(|i| at(6, i)).collect();
        let metallic = (0..n).map(|i| at(7, i)).collect();
        Self::repaired(w, h, base_color, normal, roughness, metallic)
    }

    /// 2x2 box downscale; normals are averaged and renormalized.
    pub fn downsample_half(&self) -> Result<Self> {
        if self.width % 2 != 0 || self.height % 2 != 0 {
            return Err(invalid(format!(
                "cannot halve odd resolution {}x{}",
                self.width, self.height
            )));
        }
        let (w2, h2) = (self.width / 2, self.height / 2);
        let avg = |src: &[f64], ch: usize| -> Vec<f64> {
            let mut out = Vec::with_capacity(w2 * h2 * ch);
            for y in 0..h2 {
                for x in 0..w2 {
                    for c in 0..ch {
                        let at = |yy: usize, xx: usize| src[(yy * self.width + xx) * ch + c];
                        out.push(
                            0.25 * (at(2 * y, 2 * x)
                                + at(2 * y, 2 * x + 1)
                                + at(2 * y + 1, 2 * x)
                                + at(2 * y + 1, 2 * x + 1)),
                        );
                    }
                }
            }
            out
        };
        Self::repaired(
            w2,
            h2,
            avg(&self.base_color, 3),
            avg(&self.normal, 3),
            avg(&self.roughness, 1),
            avg(&self.metallic, 1),
        )
    }

    /// Map every pixel through `f`, producing a new validated material.
    pub fn map_pixels(&self, mut f: impl FnMut(usize, ShadingPoint) -> ShadingPoint) -> Result<Self> {
        let n = self.pixel_count();
        let mut out = self.clone();
        for i in 0..n {
            let p = f(i, self.point(i));
            out.base_color[3 * i..3 * i + 3].copy_from_slice(&p.base_color);
            out.normal[3 * i..3 * i + 3].copy_from_slice(&p.normal.to_array());
            out.roughness[i] = p.roughness;
            out.metallic[i] = p.metallic;
        }
        out.repair();
        Ok(out)
    }
}

/// Diffuse and specular albedo maps derived through [`split_metallic`].
#[derive(Clone, Debug, PartialEq)]
pub struct DiffuseSpecularMaps {
    pub width: usize,
    pub height: usize,
    pub diffuse: Vec<f64>,
    pub specular: Vec<f64>,
}
