//! Average-luminance auto exposure mapping linear HDR renders into `[0, 1]`.
//!
//! The image luminance fixes the exposure value at ISO 100,
//! `EV100 = log2(L S / K)`, and the saturation-based maximum luminance
//! `L_max = 78 / (q S) * 2^EV100` then divides the image. At the default
//! constants `78 / (q S) = 1.2`. The result stays linear.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::image::{HdrImage, LdrImage};
use crate::math::luminance;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExposureParams {
    /// Reflected-light meter calibration constant.
    pub k: f64,
    /// Lens and vignetting attenuation.
    pub q: f64,
    /// Sensor sensitivity (ISO).
    pub s: f64,
}

impl Default for ExposureParams {
    fn default() -> Self {
        Self {
            k: 12.5,
            q: 0.65,
            s: 100.0,
        }
    }
}

impl ExposureParams {
    pub fn validate(&self) -> Result<()> {
        if [self.k, self.q, self.s].iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(invalid(format!("exposure constants must be positive: {self:?}")))
        }
    }
}

/// Mean Rec. 709 luminance.
pub fn average_luminance(img: &HdrImage) -> Result<f64> {
    if img.pixel_count() == 0 {
        return Err(invalid("average_luminance of an empty image"));
    }
    if let Some(v) = img.data.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(invalid(format!("HDR image contains {v}")));
    }
    let sum: f64 = (0..img.pixel_count()).map(|i| luminance(img.pixel(i))).sum();
    Ok(sum / img.pixel_count() as f64)
}

pub fn ev100_from_luminance(l_avg: f64, p: &ExposureParams) -> Result<f64> {
    if !(l_avg > 0.0) || !l_avg.is_finite() {
        return Err(invalid(format!("EV100 needs positive luminance, got {l_avg}")));
    }
    p.validate()?;
    Ok((l_avg * p.s / p.k).log2())
}

/// Saturation luminance `78 / (q S) * 2^EV100`.
pub fn max_luminance(ev100: f64, p: &ExposureParams) -> f64 {
    78.0 / (p.q * p.s) * ev100.exp2()
}

/// `L_max` straight from the average luminance, skipping the `log2`/`exp2`
/// round trip so that scaling the image by a power of two scales `L_max` exactly.
pub fn max_luminance_from_average(l_avg: f64, p: &ExposureParams) -> Result<f64> {
    if !(l_avg > 0.0) || !l_avg.is_finite() {
        return Err(invalid(format!("exposure needs positive luminance, got {l_avg}")));
    }
    p.validate()?;
    Ok(78.0 / (p.q * p.s) * (l_avg * p.s / p.k))
}

/// `clamp(img / L_max, 0, 1)`; an all-black image passes through unchanged.
pub fn apply_auto_exposure(img: &HdrImage, p: &ExposureParams) -> Result<LdrImage> {
    let l_avg = average_luminance(img)?;
    if l_avg == 0.0 {
        warn!("auto exposure: image is black, left unchanged");
        return LdrImage::from_clamped(img.width, img.height, img.data.clone());
    }
    let l_max = max_luminance_from_average(l_avg, p)?;
    LdrImage::from_clamped(img.width, img.height, img.data.iter().map(|v| v / l_max).collect())
}
