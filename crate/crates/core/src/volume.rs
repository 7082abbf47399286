//! Volumetric grids and the DGMV file format.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "DGMV"
//! 4       1     format version (1)
//! 5       1     kind (0 = image, 1 = mask)
//! 6       4     W  (u32, x extent)
//! 10      4     H  (u32, y extent)
//! 14      4     C  (u32, z extent / slice count)
//! 18      4     sx (f32, mm)
//! 22      4     sy (f32, mm)
//! 26      4     sz (f32, mm)
//! 30      ...   payload
//! ```
//!
//! All fields are little-endian. The payload is W·H·C `f32` values with x
//! varying fastest, then y, then z.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ArrayView2};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"DGMV";
pub const FORMAT_VERSION: u8 = 1;
/// magic(4) + version(1) + kind(1) + 3×u32 + 3×f32.
pub const HEADER_LEN: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Image,
    Mask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    HighContrast,
    LowContrast,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::HighContrast => "high_contrast",
            Modality::LowContrast => "low_contrast",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "high_contrast" => Some(Modality::HighContrast),
            "low_contrast" => Some(Modality::LowContrast),
            _ => None,
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(self.as_str())
    }
}

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic {0:?}, expected \"DGMV\"")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown volume kind byte {0}")]
    BadKind(u8),
    #[error("zero-sized dimension {0:?}")]
    ZeroDim([u32; 3]),
    #[error("spacing must be finite and > 0, got {0:?}")]
    BadSpacing([f32; 3]),
    #[error("truncated file: header declares {expected} payload bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("trailing bytes: header declares {expected} payload bytes, found {actual}")]
    Trailing { expected: usize, actual: usize },
    #[error("mask voxel {value} at index {index} is not 0 or 1")]
    NonBinaryMask { index: usize, value: f32 },
    #[error("{0}")]
    Invalid(String),
}

/// A 3D scalar grid indexed (z, y, x) with physical spacing (sx, sy, sz) in mm.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    data: Array3<f32>,
    spacing: [f32; 3],
    kind: Kind,
}

impl Volume {
    /// Validating constructor.
    pub fn new(data: Array3<f32>, spacing: [f32; 3], kind: Kind) -> Result<Self, VolumeError> {
        let (c, h, w) = data.dim();
        if c == 0 || h == 0 || w == 0 {
            return Err(VolumeError::ZeroDim([w as u32, h as u32, c as u32]));
        }
        if spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(VolumeError::BadSpacing(spacing));
        }
        if kind == Kind::Mask {
            if let Some((index, &value)) = data.iter().enumerate().find(|(_, &v)| v != 0.0 && v != 1.0) {
                return Err(VolumeError::NonBinaryMask { index, value });
            }
        }
        Ok(Self {
            data: data.as_standard_layout().into_owned(),
            spacing,
            kind,
        })
    }

    pub fn zeros(width: usize, height: usize, depth: usize, spacing: [f32; 3], kind: Kind) -> Result<Self, VolumeError> {
        Self::new(Array3::zeros((depth, height, width)), spacing, kind)
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn kind(&self) -> Kind {
        self.kind
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn depth(&self) -> usize {
        self.data.dim().0
    }

    /// (W, H, C)
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.width(), self.height(), self.depth())
    }

    pub fn slice(&self, z: usize) -> ArrayView2<'_, f32> {
        self.data.index_axis(ndarray::Axis(0), z)
    }

    /// Reinterpret with another kind, validating mask values.
    pub fn with_kind(self, kind: Kind) -> Result<Self, VolumeError> {
        Self::new(self.data, self.spacing, kind)
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }

    /// Stack 2D slices (each H×W) into a volume.
    pub fn from_slices(slices: &[Array2<f32>], spacing: [f32; 3], kind: Kind) -> Result<Self, VolumeError> {
        let Some(first) = slices.first() else {
            return Err(VolumeError::ZeroDim([0, 0, 0]));
        };
        let (h, w) = first.dim();
        let mut data = Array3::zeros((slices.len(), h, w));
        for (z, s) in slices.iter().enumerate() {
            if s.dim() != (h, w) {
                return Err(VolumeError::Invalid(format!("slice {z} has shape {:?}, expected {:?}", s.dim(), (h, w))));
            }
            data.index_axis_mut(ndarray::Axis(0), z).assign(s);
        }
        Self::new(data, spacing, kind)
    }
}

/// Pairs a raw image with its ground-truth label map.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseRecord {
    pub case_id: String,
    pub image: Volume,
    pub mask: Volume,
    pub modality: Modality,
}

impl CaseRecord {
    pub fn new(case_id: impl Into<String>, image: Volume, mask: Volume, modality: Modality) -> Result<Self, VolumeError> {
        if image.kind() != Kind::Image || mask.kind() != Kind::Mask {
            return Err(VolumeError::Invalid("case needs an image and a mask volume".into()));
        }
        if image.dims() != mask.dims() || image.spacing() != mask.spacing() {
            return Err(VolumeError::Invalid(format!(
                "image {:?}@{:?} and mask {:?}@{:?} disagree",
                image.dims(),
                image.spacing(),
                mask.dims(),
                mask.spacing()
            )));
        }
        Ok(Self {
            case_id: case_id.into(),
            image,
            mask,
            modality,
        })
    }
}

/// Serialize to the DGMV byte layout.
pub fn encode_volume(v: &Volume) -> Vec<u8> {
    let (w, h, c) = v.dims();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * w * h * c);
    out.extend_from_slice(MAGIC);
    out.push(FORMAT_VERSION);
    out.push(match v.kind {
        Kind::Image => 0,
        Kind::Mask => 1,
    });
    for d in [w, h, c] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in v.spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
    for &x in v.data.iter() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume, VolumeError> {
    if bytes.len() < HEADER_LEN {
        if bytes.len() >= 4 && &bytes[..4] != MAGIC {
            return Err(VolumeError::BadMagic(bytes[..4].try_into().expect("4 bytes")));
        }
        return Err(VolumeError::Truncated {
            expected: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if &magic != MAGIC {
        return Err(VolumeError::BadMagic(magic));
    }
    if bytes[4] != FORMAT_VERSION {
        return Err(VolumeError::UnsupportedVersion(bytes[4]));
    }
    let kind = match bytes[5] {
        0 => Kind::Image,
        1 => Kind::Mask,
        k => return Err(VolumeError::BadKind(k)),
    };
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let dims = [u32_at(6), u32_at(10), u32_at(14)];
    if dims.contains(&0) {
        return Err(VolumeError::ZeroDim(dims));
    }
    let spacing = [f32_at(18), f32_at(22), f32_at(26)];
    if spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
        return Err(VolumeError::BadSpacing(spacing));
    }
    let [w, h, c] = dims.map(|d| d as usize);
    let expected = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(c))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| VolumeError::Invalid(format!("dims {dims:?} overflow")))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < expected {
        return Err(VolumeError::Truncated {
            expected,
            actual: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(VolumeError::Trailing {
            expected,
            actual: payload.len(),
        });
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    let data = Array3::from_shape_vec((c, h, w), data).expect("length checked");
    Volume::new(data, spacing, kind)
}

pub fn write_volume(v: &Volume, path: &Path) -> Result<(), VolumeError> {
    let io = |source| VolumeError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(&encode_volume(v)).map_err(io)?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<Volume, VolumeError> {
    let bytes = fs::read(path).map_err(|source| VolumeError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_volume(&bytes)
}

/// Label map from a probability/intensity image: 1 where the voxel is
/// strictly greater than `threshold`.
pub fn binarize(v: &Volume, threshold: f32) -> Result<Volume, VolumeError> {
    if v.kind != Kind::Image {
        return Err(VolumeError::Invalid("binarize expects an image volume".into()));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(VolumeError::Invalid(format!("threshold {threshold} outside (0, 1)")));
    }
    let data = v.data.mapv(|x| if x > threshold { 1.0 } else { 0.0 });
    Volume::new(data, v.spacing, Kind::Mask)
}
