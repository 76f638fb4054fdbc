//! RGB float images plus PFM and 8-bit PNG storage, and the on-disk
//! material directory layout.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use log::warn;

use crate::error::{invalid, io_err, Error, Result};
use crate::maps::{decode_normal, encode_normal, linear_to_srgb, srgb_to_linear, SvbrdfMaps};
use crate::math::luminance;

/// Linear radiance, interleaved RGB, row-major, top row first.
#[derive(Clone, Debug, PartialEq)]
pub struct HdrImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl HdrImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} RGB image needs {} values, got {}",
                width,
                height,
                3 * width * height,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; 3 * width * height],
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn pixel(&self, i: usize) -> [f64; 3] {
        [self.data[3 * i], self.data[3 * i + 1], self.data[3 * i + 2]]
    }

    pub fn at(&self, row: usize, col: usize) -> [f64; 3] {
        self.pixel(row * self.width + col)
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// Element-wise sum; sizes must agree.
    pub fn add(&self, other: &HdrImage) -> Result<Self> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} + {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Self::new(self.width, self.height, data)?)
    }

    pub fn luminance_at(&self, i: usize) -> f64 {
        luminance(self.pixel(i))
    }

    /// Index of the pixel with the largest luminance (first on ties).
    pub fn argmax_luminance(&self) -> usize {
        let mut best = 0;
        for i in 1..self.pixel_count() {
            if self.luminance_at(i) > self.luminance_at(best) {
                best = i;
            }
        }
        best
    }
}

/// Display-ready image with every value in `[0, 1]`, stored linearly.
#[derive(Clone, Debug, PartialEq)]
pub struct LdrImage {
    pub width: usize,
    pub height: usize,
    data: Vec<f64>,
}

impl LdrImage {
    /// Clamps into `[0, 1]`; NaN becomes 0.
    pub fn from_clamped(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        let hdr = HdrImage::new(width, height, data)?;
        Ok(Self {
            width,
            height,
            data: hdr
                .data
                .into_iter()
                .map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
                .collect(),
        })
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, i: usize) -> [f64; 3] {
        [self.data[3 * i], self.data[3 * i + 1], self.data[3 * i + 2]]
    }

    pub fn to_hdr(&self) -> HdrImage {
        HdrImage {
            width: self.width,
            height: self.height,
            data: self.data.clone(),
        }
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_png_raw(path: &Path, width: usize, height: usize, channels: usize, bytes: Vec<u8>) -> Result<()> {
    let color = if channels == 1 {
        image::ExtendedColorType::L8
    } else {
        image::ExtendedColorType::Rgb8
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    image::save_buffer_with_format(
        path,
        &bytes,
        width as u32,
        height as u32,
        color,
        image::ImageFormat::Png,
    )
    .map_err(|e| Error::Format {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => io_err(path, io),
        other => Error::Format {
            path: path.display().to_string(),
            msg: other.to_string(),
        },
    })
}

/// Write linear values as 8-bit RGB without any transfer curve.
pub fn write_png_linear(path: &Path, width: usize, height: usize, rgb: &[f64]) -> Result<()> {
    write_png_raw(path, width, height, 3, rgb.iter().map(|v| quantize(*v)).collect())
}

/// Read an 8-bit PNG (any color type) as RGB values in `[0, 1]`, no transfer curve.
pub fn read_png_linear(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let img = open_image(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((w, h, img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect()))
}

fn read_png_gray(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let img = open_image(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((w, h, img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect()))
}

pub fn write_ldr_png(path: &Path, img: &LdrImage) -> Result<()> {
    write_png_linear(path, img.width, img.height, img.data())
}

pub fn read_ldr_png(path: &Path) -> Result<LdrImage> {
    let (w, h, data) = read_png_linear(path)?;
    LdrImage::from_clamped(w, h, data)
}

/// Write a 3-channel little-endian PFM (rows stored bottom to top).
pub fn write_pfm(path: &Path, img: &HdrImage) -> Result<()> {
    let mut out = Vec::with_capacity(32 + 12 * img.pixel_count());
    write!(out, "PF\n{} {}\n-1.0\n", img.width, img.height).expect("write to Vec");
    for row in (0..img.height).rev() {
        for v in &img.data[3 * row * img.width..3 * (row + 1) * img.width] {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

fn pfm_token(reader: &mut impl BufRead, path: &Path) -> Result<String> {
    let mut tok = Vec::new();
    loop {
        let mut byte = [0u8];
        match reader.read(&mut byte) {
            Ok(0) => break,
            Ok(_) if byte[0].is_ascii_whitespace() => {
                if tok.is_empty() {
                    continue;
                }
                break;
            }
            Ok(_) => tok.push(byte[0]),
            Err(e) => return Err(io_err(path, e)),
        }
    }
    String::from_utf8(tok).map_err(|_| Error::Format {
        path: path.display().to_string(),
        msg: "non-ASCII PFM header".into(),
    })
}

/// Read a color (`PF`) or grayscale (`Pf`) PFM of either byte order.
pub fn read_pfm(path: &Path) -> Result<HdrImage> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut reader = BufReader::new(file);
    let fmt_err = |msg: String| Error::Format {
        path: path.display().to_string(),
        msg,
    };
    let magic = pfm_token(&mut reader, path)?;
    let channels = match magic.as_str() {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(fmt_err(format!("bad PFM magic {other:?}"))),
    };
    let mut dim = || -> Result<usize> {
        let t = pfm_token(&mut reader, path)?;
        t.parse().map_err(|_| fmt_err(format!("bad PFM dimension {t:?}")))
    };
    let width = dim()?;
    let height = dim()?;
    let t = pfm_token(&mut reader, path)?;
    let scale: f64 = t.parse().map_err(|_| fmt_err(format!("bad PFM scale {t:?}")))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(fmt_err(format!("bad PFM scale {scale}")));
    }
    let little = scale < 0.0;
    let mut raw = Vec::new();
    reader.read_to_end(&mut raw).map_err(|e| io_err(path, e))?;
    let count = width * height * channels;
    if raw.len() != 4 * count {
        return Err(fmt_err(format!("expected {} payload bytes, got {}", 4 * count, raw.len())));
    }
    let values: Vec<f64> = raw
        .chunks_exact(4)
        .map(|b| {
            let b = [b[0], b[1], b[2], b[3]];
            (if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) }) as f64
        })
        .collect();
    let mut data = vec![0.0; 3 * width * height];
    for row in 0..height {
        let src_row = height - 1 - row;
        for col in 0..width {
            for c in 0..3 {
                let src = (src_row * width + col) * channels + if channels == 3 { c } else { 0 };
                data[3 * (row * width + col) + c] = values[src];
            }
        }
    }
    HdrImage::new(width, height, data)
}

pub const MAP_FILES: [&str; 4] = ["basecolor", "normal", "roughness", "metallic"];

/// Write `basecolor.png` (sRGB), `normal.png`, `roughness.png` and `metallic.png` (linear).
pub fn save_material(dir: &Path, maps: &SvbrdfMaps) -> Result<()> {
    maps.validate()?;
    let (w, h) = (maps.width(), maps.height());
    let base: Vec<u8> = maps.base_color().iter().map(|v| quantize(linear_to_srgb(*v))).collect();
    write_png_raw(&dir.join("basecolor.png"), w, h, 3, base)?;
    let normal: Vec<u8> = maps
        .normal()
        .chunks_exact(3)
        .flat_map(|n| encode_normal([n[0], n[1], n[2]]).map(quantize))
        .collect();
    write_png_raw(&dir.join("normal.png"), w, h, 3, normal)?;
    write_png_raw(&dir.join("roughness.png"), w, h, 1, maps.roughness().iter().map(|v| quantize(*v)).collect())?;
    write_png_raw(&dir.join("metallic.png"), w, h, 1, maps.metallic().iter().map(|v| quantize(*v)).collect())
}

/// Write full-precision PFM variants next to the PNGs.
pub fn save_material_pfm(dir: &Path, maps: &SvbrdfMaps) -> Result<()> {
    let (w, h) = (maps.width(), maps.height());
    let gray = |v: &[f64]| v.iter().flat_map(|x| [*x; 3]).collect::<Vec<_>>();
    write_pfm(&dir.join("basecolor.pfm"), &HdrImage::new(w, h, maps.base_color().to_vec())?)?;
    write_pfm(&dir.join("normal.pfm"), &HdrImage::new(w, h, maps.normal().to_vec())?)?;
    write_pfm(&dir.join("roughness.pfm"), &HdrImage::new(w, h, gray(maps.roughness()))?)?;
    write_pfm(&dir.join("metallic.pfm"), &HdrImage::new(w, h, gray(maps.metallic()))?)
}

/// Load a material directory, preferring `<map>.pfm` over `<map>.png` when present.
pub fn load_material(dir: &Path) -> Result<SvbrdfMaps> {
    let mut dims = None;
    let mut loaded: Vec<Vec<f64>> = Vec::with_capacity(4);
    for name in MAP_FILES {
        let pfm = dir.join(format!("{name}.pfm"));
        let png = dir.join(format!("{name}.png"));
        let scalar = name == "roughness" || name == "metallic";
        let (w, h, values) = if pfm.exists() {
            let img = read_pfm(&pfm)?;
            let data = if scalar {
                img.data.chunks_exact(3).map(|p| p[0]).collect()
            } else if name == "normal" {
                img.data
                    .chunks_exact(3)
                    .flat_map(|p| decode_normal(encode_normal([p[0], p[1], p[2]])))
                    .collect()
            } else {
                img.data
            };
            (img.width, img.height, data)
        } else if scalar {
            read_png_gray(&png)?
        } else {
            let (w, h, raw) = read_png_linear(&png)?;
            let data = if name == "basecolor" {
                raw.into_iter().map(srgb_to_linear).collect()
            } else {
                raw.chunks_exact(3).flat_map(|p| decode_normal([p[0], p[1], p[2]])).collect()
            };
            (w, h, data)
        };
        match dims {
            None => dims = Some((w, h)),
            Some(d) if d != (w, h) => {
                return Err(Error::ShapeMismatch(format!(
                    "{}: {name} is {w}x{h}, expected {}x{}",
                    dir.display(),
                    d.0,
                    d.1
                )))
            }
            _ => {}
        }
        loaded.push(values);
    }
    let (w, h) = dims.ok_or_else(|| invalid("no maps"))?;
    let metallic = loaded.pop().expect("four maps");
    let roughness = loaded.pop().expect("four maps");
    let normal = loaded.pop().expect("four maps");
    let base = loaded.pop().expect("four maps");
    let out_of_range = base
        .iter()
        .chain(&roughness)
        .chain(&metallic)
        .any(|v| !(0.0..=1.0).contains(v));
    if out_of_range {
        warn!("{}: values outside [0, 1] clamped", dir.display());
    }
    SvbrdfMaps::repaired(w, h, base, normal, roughness, metallic)
}
