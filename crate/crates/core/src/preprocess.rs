//! Resampling, center crop + resize, and intensity normalization.

use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::{Kind, Volume, VolumeError};

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("resampling {dims:?} at {from:?} mm to {to:?} mm gives an empty axis")]
    EmptyOutput { dims: (usize, usize, usize), from: [f32; 3], to: [f32; 3] },
    #[error("normalize expects an image volume, got a mask")]
    NormalizeMask,
    #[error("invalid preprocessing config: {0}")]
    Config(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationScope {
    PerVolume,
    Dataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub target_spacing: [f32; 3],
    /// (width, height)
    pub target_size: (usize, usize),
    pub normalization_scope: NormalizationScope,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_spacing: [1.0, 1.0, 1.0],
            target_size: (256, 256),
            normalization_scope: NormalizationScope::PerVolume,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<(), PreprocessError> {
        let (w, h) = self.target_size;
        if w < 8 || h < 8 || w % 2 != 0 || h % 2 != 0 {
            return Err(PreprocessError::Config(format!(
                "target_size {w}x{h} must be even and at least 8"
            )));
        }
        if self.target_spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(PreprocessError::Config(format!(
                "target_spacing {:?} must be positive",
                self.target_spacing
            )));
        }
        Ok(())
    }
}

/// Continuous source coordinate for output index `i` when an axis of
/// `n_in` samples is mapped onto `n_out` samples with centers aligned.
fn source_coord(i: usize, n_in: usize, n_out: usize) -> f64 {
    ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64)
}

fn nearest_index(i: usize, n_in: usize, n_out: usize) -> usize {
    (((i as f64 + 0.5) * n_in as f64 / n_out as f64).floor() as usize).min(n_in - 1)
}

/// Per-axis interpolation taps `(i0, i1, frac)`.
fn linear_taps(n_in: usize, n_out: usize, extent_ratio: f64) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|i| {
            let p = ((i as f64 + 0.5) * extent_ratio - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = p.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, p - i0 as f64)
        })
        .collect()
}

fn nearest_taps(n_in: usize, n_out: usize, extent_ratio: f64) -> Vec<usize> {
    (0..n_out)
        .map(|i| (((i as f64 + 0.5) * extent_ratio).floor().max(0.0) as usize).min(n_in - 1))
        .collect()
}

/// Resample to `target_spacing`. Output dims are
/// `round(dim · spacing / target)` (at least 1); images are interpolated
/// trilinearly, masks by nearest neighbor.
pub fn resample(v: &Volume, target_spacing: [f32; 3]) -> Result<Volume, PreprocessError> {
    let (w, h, c) = v.dims();
    let sp = v.spacing();
    if target_spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
        return Err(PreprocessError::Config(format!("target spacing {target_spacing:?}")));
    }
    let out_dim = |n: usize, s: f32, t: f32| (n as f64 * s as f64 / t as f64).round() as usize;
    let (ow, oh, oc) = (
        out_dim(w, sp[0], target_spacing[0]),
        out_dim(h, sp[1], target_spacing[1]),
        out_dim(c, sp[2], target_spacing[2]),
    );
    if ow == 0 || oh == 0 || oc == 0 {
        return Err(PreprocessError::EmptyOutput {
            dims: (w, h, c),
            from: sp,
            to: target_spacing,
        });
    }
    if (ow, oh, oc) == (w, h, c) && sp == target_spacing {
        return Ok(v.clone());
    }
    // physical step of the output grid measured in input voxels
    let ratio = |t: f32, s: f32| t as f64 / s as f64;
    let (rx, ry, rz) = (
        ratio(target_spacing[0], sp[0]),
        ratio(target_spacing[1], sp[1]),
        ratio(target_spacing[2], sp[2]),
    );
    let src = v.data();
    let data = match v.kind() {
        Kind::Mask => {
            let (tx, ty, tz) = (nearest_taps(w, ow, rx), nearest_taps(h, oh, ry), nearest_taps(c, oc, rz));
            Array3::from_shape_fn((oc, oh, ow), |(z, y, x)| src[[tz[z], ty[y], tx[x]]])
        }
        Kind::Image => {
            let (tx, ty, tz) = (linear_taps(w, ow, rx), linear_taps(h, oh, ry), linear_taps(c, oc, rz));
            Array3::from_shape_fn((oc, oh, ow), |(z, y, x)| {
                let (z0, z1, fz) = tz[z];
                let (y0, y1, fy) = ty[y];
                let (x0, x1, fx) = tx[x];
                let at = |zz: usize, yy: usize, xx: usize| src[[zz, yy, xx]] as f64;
                let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
                let c00 = lerp(at(z0, y0, x0), at(z0, y0, x1), fx);
                let c01 = lerp(at(z0, y1, x0), at(z0, y1, x1), fx);
                let c10 = lerp(at(z1, y0, x0), at(z1, y0, x1), fx);
                let c11 = lerp(at(z1, y1, x0), at(z1, y1, x1), fx);
                lerp(lerp(c00, c01, fy), lerp(c10, c11, fy), fz) as f32
            })
        }
    };
    Ok(Volume::new(data, target_spacing, v.kind())?)
}

/// Crop every slice to its centered min(W, H) square and resize to
/// `target_size` = (width, height). Bilinear for images, nearest for masks.
pub fn center_crop_resize(v: &Volume, target_size: (usize, usize)) -> Result<Volume, PreprocessError> {
    let (w, h, c) = v.dims();
    let (tw, th) = target_size;
    if tw == 0 || th == 0 {
        return Err(PreprocessError::Config(format!("target size {tw}x{th}")));
    }
    let side = w.min(h);
    let (x0, y0) = ((w - side) / 2, (h - side) / 2);
    let src = v.data();
    let data = match v.kind() {
        Kind::Mask => {
            let tx: Vec<usize> = (0..tw).map(|i| x0 + nearest_index(i, side, tw)).collect();
            let ty: Vec<usize> = (0..th).map(|i| y0 + nearest_index(i, side, th)).collect();
            Array3::from_shape_fn((c, th, tw), |(z, y, x)| src[[z, ty[y], tx[x]]])
        }
        Kind::Image => {
            let taps = |n: usize| -> Vec<(usize, usize, f64)> {
                (0..n)
                    .map(|i| {
                        let p = source_coord(i, side, n);
                        let i0 = p.floor() as usize;
                        (i0, (i0 + 1).min(side - 1), p - i0 as f64)
                    })
                    .collect()
            };
            let (tx, ty) = (taps(tw), taps(th));
            Array3::from_shape_fn((c, th, tw), |(z, y, x)| {
                let (ya, yb, fy) = ty[y];
                let (xa, xb, fx) = tx[x];
                let at = |yy: usize, xx: usize| src[[z, y0 + yy, x0 + xx]] as f64;
                let top = at(ya, xa) * (1.0 - fx) + at(ya, xb) * fx;
                let bot = at(yb, xa) * (1.0 - fx) + at(yb, xb) * fx;
                (top * (1.0 - fy) + bot * fy) as f32
            })
        }
    };
    let sp = v.spacing();
    let spacing = [
        (sp[0] as f64 * side as f64 / tw as f64) as f32,
        (sp[1] as f64 * side as f64 / th as f64) as f32,
        sp[2],
    ];
    Ok(Volume::new(data, spacing, v.kind())?)
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntensityStats {
    pub mean: f64,
    pub std: f64,
}

pub const NORM_EPS: f64 = 1e-8;

pub fn intensity_stats<'a>(volumes: impl IntoIterator<Item = &'a Volume>) -> IntensityStats {
    let (mut n, mut sum, mut sq) = (0usize, 0.0f64, 0.0f64);
    let vols: Vec<&Volume> = volumes.into_iter().collect();
    for v in &vols {
        for &x in v.data().iter() {
            n += 1;
            sum += x as f64;
        }
    }
    let mean = if n == 0 { 0.0 } else { sum / n as f64 };
    for v in &vols {
        for &x in v.data().iter() {
            sq += (x as f64 - mean).powi(2);
        }
    }
    IntensityStats {
        mean,
        std: if n == 0 { 0.0 } else { (sq / n as f64).sqrt() },
    }
}

/// Zero-center and scale by the standard deviation of this volume.
pub fn normalize(v: &Volume) -> Result<Volume, PreprocessError> {
    normalize_with(v, intensity_stats([v]))
}

/// Zero-center and scale with externally supplied (e.g. dataset-wide)
/// statistics. The divisor is `std + 1e-8`, so constant input maps to 0.
pub fn normalize_with(v: &Volume, stats: IntensityStats) -> Result<Volume, PreprocessError> {
    if v.kind() != Kind::Image {
        return Err(PreprocessError::NormalizeMask);
    }
    let denom = stats.std + NORM_EPS;
    let data = v.data().mapv(|x| ((x as f64 - stats.mean) / denom) as f32);
    Ok(Volume::new(data, v.spacing(), Kind::Image)?)
}

/// Geometric part of the chain: resample then crop/resize. Applied to
/// images and masks alike.
pub fn geometric(v: &Volume, cfg: &PreprocessConfig) -> Result<Volume, PreprocessError> {
    let r = resample(v, cfg.target_spacing)?;
    center_crop_resize(&r, cfg.target_size)
}

/// Full chain for one image/mask pair with per-volume normalization, or
/// with `stats` when dataset-wide normalization is configured.
pub fn preprocess_pair(
    image: &Volume,
    mask: &Volume,
    cfg: &PreprocessConfig,
    dataset_stats: Option<IntensityStats>,
) -> Result<(Volume, Volume), PreprocessError> {
    let img = geometric(image, cfg)?;
    let img = match (cfg.normalization_scope, dataset_stats) {
        (NormalizationScope::Dataset, Some(stats)) => normalize_with(&img, stats)?,
        (NormalizationScope::Dataset, None) => {
            return Err(PreprocessError::Config("dataset normalization needs dataset statistics".into()))
        }
        (NormalizationScope::PerVolume, _) => normalize(&img)?,
    };
    Ok((img, geometric(mask, cfg)?))
}

/// Per-slice mean over the depth axis; used by summaries and tests.
pub fn slice_means(v: &Volume) -> Vec<f64> {
    v.data()
        .axis_iter(Axis(0))
        .map(|s| s.iter().map(|&x| x as f64).sum::<f64>() / s.len() as f64)
        .collect()
}
