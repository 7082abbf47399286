//! Synthetic paired phantoms.
//!
//! Each case is a perturbed ellipsoid imaged twice: a high-contrast
//! rendering with mild noise, and a low-contrast rendering with heavier
//! noise, stronger blur and bright point artifacts inside the organ. Both
//! share one mask. Every random draw comes from a stream keyed by
//! (rng_seed, case, purpose), so cases can be generated in any order.

use std::fs;
use std::path::{Path, PathBuf};

use dgmnet_nn::stream_seed;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::{read_volume, write_volume, CaseRecord, Kind, Modality, Volume, VolumeError};

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const CONFIG_FILE: &str = "phantom_config.json";
pub const MANIFEST_HEADER: &str = "case_id,modality,image_path,mask_path,rng_seed,case_index";
const MAX_RETRIES: u64 = 10;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid phantom config: {0}")]
    Config(String),
    #[error("case {case_index}: no valid shape after {MAX_RETRIES} attempts")]
    Degenerate { case_index: usize },
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> PhantomError {
    PhantomError::Io { path: path.to_path_buf(), message: e.to_string() }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.max <= self.min {
            self.min
        } else {
            rng.random_range(self.min..self.max)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeParams {
    /// Semi-axes in voxels along x, y, z.
    pub semi_axis_x: Range,
    pub semi_axis_y: Range,
    pub semi_axis_z: Range,
    /// Maximum center offset from the grid center, voxels, per axis.
    pub center_jitter: [f64; 3],
    /// Relative amplitude of the low-order radial perturbation.
    pub perturbation: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Contrast {
    pub fg_mean: f64,
    pub bg_mean: f64,
    pub noise_std: f64,
    /// In-plane Gaussian blur sigma in voxels applied before noise.
    pub blur_sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedArtifacts {
    pub count_min: usize,
    pub count_max: usize,
    pub intensity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub n_cases: usize,
    /// (W, H, C)
    pub dims: (usize, usize, usize),
    pub spacing: [f32; 3],
    pub shape: ShapeParams,
    pub high: Contrast,
    pub low: Contrast,
    pub seeds: SeedArtifacts,
    pub rng_seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            n_cases: 40,
            dims: (64, 64, 16),
            spacing: [1.0, 1.0, 1.0],
            shape: ShapeParams {
                semi_axis_x: Range::new(10.0, 17.0),
                semi_axis_y: Range::new(8.0, 14.0),
                semi_axis_z: Range::new(3.2, 4.0),
                center_jitter: [6.0, 6.0, 0.6],
                perturbation: 0.15,
            },
            high: Contrast {
                fg_mean: 0.8,
                bg_mean: 0.2,
                noise_std: 0.05,
                blur_sigma: 0.6,
            },
            low: Contrast {
                fg_mean: 0.56,
                bg_mean: 0.44,
                noise_std: 0.1,
                blur_sigma: 1.5,
            },
            seeds: SeedArtifacts {
                count_min: 4,
                count_max: 10,
                intensity: 1.6,
            },
            rng_seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<(), PhantomError> {
        let bad = |m: String| Err(PhantomError::Config(m));
        let (w, h, c) = self.dims;
        if w == 0 || h == 0 || c < 5 {
            return bad(format!("dims {:?} too small (need depth >= 5)", self.dims));
        }
        if self.n_cases == 0 {
            return bad("n_cases must be positive".into());
        }
        if self.spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return bad(format!("spacing {:?} must be positive", self.spacing));
        }
        let sp = &self.shape;
        if !(0.0..1.0).contains(&sp.perturbation) {
            return bad(format!("perturbation {} outside [0, 1)", sp.perturbation));
        }
        let grow = 1.0 + sp.perturbation;
        let axes = [(sp.semi_axis_x, w, 0), (sp.semi_axis_y, h, 1), (sp.semi_axis_z, c, 2)];
        for (r, n, i) in axes {
            if r.min <= 0.0 || r.max < r.min {
                return bad(format!("semi-axis range {r:?} invalid"));
            }
            let reach = r.max * grow + sp.center_jitter[i] + 2.0;
            if reach > (n as f64 - 1.0) / 2.0 {
                return bad(format!("semi-axis {} with jitter leaves < 2 voxels margin on an axis of {n}", r.max));
            }
        }
        if self.seeds.count_max < self.seeds.count_min {
            return bad("seed count range inverted".into());
        }
        for ct in [&self.high, &self.low] {
            if ct.noise_std < 0.0 || ct.blur_sigma < 0.0 {
                return bad("negative noise or blur".into());
            }
        }
        Ok(())
    }

    fn rng(&self, case_index: usize, purpose: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(stream_seed(self.rng_seed, &format!("case{case_index}.{purpose}")))
    }
}

pub fn case_id(case_index: usize) -> String {
    format!("case{case_index:03}")
}

/// Shape draw for one case: center (x, y, z) and semi-axes in voxels, plus
/// perturbation coefficients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
    /// (amplitude, phase) for the 2nd and 3rd in-plane harmonics and a
    /// through-plane taper.
    pub harmonics: [(f64, f64); 3],
}

impl Ellipsoid {
    fn draw(cfg: &PhantomConfig, rng: &mut impl Rng) -> Self {
        let (w, h, c) = cfg.dims;
        let sp = &cfg.shape;
        let mid = [(w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, (c as f64 - 1.0) / 2.0];
        let mut center = [0.0; 3];
        for i in 0..3 {
            let j = sp.center_jitter[i];
            center[i] = mid[i] + if j > 0.0 { rng.random_range(-j..j) } else { 0.0 };
        }
        let semi_axes = [sp.semi_axis_x.sample(rng), sp.semi_axis_y.sample(rng), sp.semi_axis_z.sample(rng)];
        let mut harmonics = [(0.0, 0.0); 3];
        for hm in &mut harmonics {
            *hm = (
                sp.perturbation * rng.random_range(0.3..1.0),
                rng.random_range(0.0..std::f64::consts::TAU),
            );
        }
        Self { center, semi_axes, harmonics }
    }

    /// Boundary radius in normalized coordinates along a direction.
    fn radius(&self, qx: f64, qy: f64, qz: f64) -> f64 {
        let theta = qy.atan2(qx);
        let rho = (qx * qx + qy * qy + qz * qz).sqrt();
        let tz = if rho > 0.0 { qz / rho } else { 0.0 };
        let [(a2, p2), (a3, p3), (at, pt)] = self.harmonics;
        let total = a2 * (2.0 * theta + p2).cos() + a3 * (3.0 * theta + p3).cos() + at * pt.sin() * tz;
        // keep the mean within a third of the amplitude of the unit sphere
        1.0 + total / 3.0
    }

    pub fn contains(&self, x: f64, y: f64, z: f64) -> bool {
        let qx = (x - self.center[0]) / self.semi_axes[0];
        let qy = (y - self.center[1]) / self.semi_axes[1];
        let qz = (z - self.center[2]) / self.semi_axes[2];
        let rho2 = qx * qx + qy * qy + qz * qz;
        let r = self.radius(qx, qy, qz);
        rho2 <= r * r
    }

    pub fn rasterize(&self, dims: (usize, usize, usize)) -> Array3<f32> {
        let (w, h, c) = dims;
        Array3::from_shape_fn((c, h, w), |(z, y, x)| self.contains(x as f64, y as f64, z as f64) as u8 as f32)
    }
}

fn mask_is_valid(mask: &Array3<f32>) -> bool {
    let c = mask.dim().0;
    let present: Vec<bool> = (0..c).map(|z| mask.index_axis(ndarray::Axis(0), z).iter().any(|&v| v != 0.0)).collect();
    if present[0] || present[c - 1] {
        return false;
    }
    let mut run = 0;
    let mut best = 0;
    for &p in &present {
        run = if p { run + 1 } else { 0 };
        best = best.max(run);
    }
    best >= 3
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable in-plane blur with clamped borders.
fn blur_slice(img: &Array2<f64>, sigma: f64) -> Array2<f64> {
    let k = gaussian_kernel(sigma);
    if k.len() == 1 {
        return img.clone();
    }
    let r = (k.len() / 2) as isize;
    let (h, w) = img.dim();
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let tmp = Array2::from_shape_fn((h, w), |(y, x)| {
        k.iter().enumerate().map(|(j, kv)| kv * img[[y, clamp(x as isize + j as isize - r, w)]]).sum::<f64>()
    });
    Array2::from_shape_fn((h, w), |(y, x)| {
        k.iter().enumerate().map(|(j, kv)| kv * tmp[[clamp(y as isize + j as isize - r, h), x]]).sum()
    })
}

fn render(mask: &Array3<f32>, ct: &Contrast, rng: &mut impl Rng) -> Array3<f32> {
    let (c, h, w) = mask.dim();
    let noise = Normal::new(0.0, ct.noise_std.max(0.0)).expect("finite std");
    let mut out = Array3::<f32>::zeros((c, h, w));
    for z in 0..c {
        let clean = Array2::from_shape_fn((h, w), |(y, x)| {
            if mask[[z, y, x]] != 0.0 {
                ct.fg_mean
            } else {
                ct.bg_mean
            }
        });
        let blurred = blur_slice(&clean, ct.blur_sigma);
        for ((y, x), v) in blurred.indexed_iter() {
            out[[z, y, x]] = (v + noise.sample(rng)) as f32;
        }
    }
    out
}

/// Voxels whose six neighbors are all foreground.
fn interior_voxels(mask: &Array3<f32>) -> Vec<(usize, usize, usize)> {
    let (c, h, w) = mask.dim();
    let mut out = Vec::new();
    for z in 1..c.saturating_sub(1) {
        for y in 1..h.saturating_sub(1) {
            for x in 1..w.saturating_sub(1) {
                let on = |z: usize, y: usize, x: usize| mask[[z, y, x]] != 0.0;
                if on(z, y, x) && on(z - 1, y, x) && on(z + 1, y, x) && on(z, y - 1, x) && on(z, y + 1, x) && on(z, y, x - 1) && on(z, y, x + 1) {
                    out.push((z, y, x));
                }
            }
        }
    }
    out
}

/// Seed artifact positions (z, y, x) placed on interior mask voxels.
pub fn seed_positions(cfg: &PhantomConfig, case_index: usize, mask: &Array3<f32>) -> Vec<(usize, usize, usize)> {
    let interior = interior_voxels(mask);
    if interior.is_empty() {
        return Vec::new();
    }
    let mut rng = cfg.rng(case_index, "seeds");
    let n = rng.random_range(cfg.seeds.count_min..=cfg.seeds.count_max);
    (0..n).map(|_| interior[rng.random_range(0..interior.len())]).collect()
}

/// The case's shape, retried with new sub-streams until it is nonempty,
/// clear of the first and last slice, and at least three slices deep.
pub fn phantom_shape(cfg: &PhantomConfig, case_index: usize) -> Result<(Ellipsoid, Array3<f32>), PhantomError> {
    for attempt in 0..MAX_RETRIES {
        let mut rng = cfg.rng(case_index, &format!("shape{attempt}"));
        let e = Ellipsoid::draw(cfg, &mut rng);
        let m = e.rasterize(cfg.dims);
        if mask_is_valid(&m) {
            return Ok((e, m));
        }
    }
    Err(PhantomError::Degenerate { case_index })
}

/// (high-contrast, low-contrast) pair for one case.
pub fn generate_phantom(cfg: &PhantomConfig, case_index: usize) -> Result<(CaseRecord, CaseRecord), PhantomError> {
    cfg.validate()?;
    let (_, mask) = phantom_shape(cfg, case_index)?;
    let high = render(&mask, &cfg.high, &mut cfg.rng(case_index, "high.noise"));
    let mut low = render(&mask, &cfg.low, &mut cfg.rng(case_index, "low.noise"));
    for (z, y, x) in seed_positions(cfg, case_index, &mask) {
        low[[z, y, x]] = cfg.seeds.intensity as f32;
    }
    let mask_vol = Volume::new(mask, cfg.spacing, Kind::Mask)?;
    let id = case_id(case_index);
    Ok((
        CaseRecord::new(&id, Volume::new(high, cfg.spacing, Kind::Image)?, mask_vol.clone(), Modality::HighContrast)?,
        CaseRecord::new(&id, Volume::new(low, cfg.spacing, Kind::Image)?, mask_vol, Modality::LowContrast)?,
    ))
}

/// Contrast-to-noise ratio |μ_fg − μ_bg| / σ_bg of an image against its mask.
pub fn cnr(image: &Volume, mask: &Volume) -> f64 {
    let (mut fg, mut bg) = (Vec::new(), Vec::new());
    for (&v, &m) in image.data().iter().zip(mask.data().iter()) {
        if m != 0.0 {
            fg.push(v as f64)
        } else {
            bg.push(v as f64)
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let (mf, mb) = (mean(&fg), mean(&bg));
    let sd = (bg.iter().map(|v| (v - mb).powi(2)).sum::<f64>() / bg.len().max(1) as f64).sqrt();
    (mf - mb).abs() / sd
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub case_id: String,
    pub modality: Modality,
    /// Relative to the dataset root.
    pub image_path: String,
    pub mask_path: String,
    pub rng_seed: u64,
    pub case_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub root: PathBuf,
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(MANIFEST_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.case_id, r.modality, r.image_path, r.mask_path, r.rng_seed, r.case_index
            ));
        }
        s
    }

    pub fn parse(root: &Path, text: &str) -> Result<Self, PhantomError> {
        let mut lines = text.lines();
        if lines.next() != Some(MANIFEST_HEADER) {
            return Err(PhantomError::Manifest("unexpected header".into()));
        }
        let mut rows = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(PhantomError::Manifest(format!("row `{line}` has {} fields", f.len())));
            }
            let bad = |what: &str| PhantomError::Manifest(format!("bad {what} in `{line}`"));
            rows.push(ManifestRow {
                case_id: f[0].to_string(),
                modality: Modality::parse(f[1]).ok_or_else(|| bad("modality"))?,
                image_path: f[2].to_string(),
                mask_path: f[3].to_string(),
                rng_seed: f[4].parse().map_err(|_| bad("rng_seed"))?,
                case_index: f[5].parse().map_err(|_| bad("case_index"))?,
            });
        }
        Ok(Self { root: root.to_path_buf(), rows })
    }

    pub fn read(root: &Path) -> Result<Self, PhantomError> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        Self::parse(root, &text)
    }

    /// Load all cases of one modality, in manifest order.
    pub fn load(&self, modality: Modality) -> Result<Vec<CaseRecord>, PhantomError> {
        self.rows
            .iter()
            .filter(|r| r.modality == modality)
            .map(|r| {
                let image = read_volume(&self.root.join(&r.image_path))?;
                let mask = read_volume(&self.root.join(&r.mask_path))?;
                Ok(CaseRecord::new(&r.case_id, image, mask, modality)?)
            })
            .collect()
    }

    pub fn case_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.rows.iter().map(|r| r.case_id.clone()).collect();
        ids.dedup();
        ids
    }
}

fn write_case(root: &Path, rec: &CaseRecord, rng_seed: u64, case_index: usize) -> Result<ManifestRow, PhantomError> {
    let dir = root.join(&rec.case_id);
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    let m = rec.modality.as_str();
    let image_path = format!("{}/{m}_image.dgmv", rec.case_id);
    let mask_path = format!("{}/{m}_mask.dgmv", rec.case_id);
    write_volume(&rec.image, &root.join(&image_path))?;
    write_volume(&rec.mask, &root.join(&mask_path))?;
    Ok(ManifestRow {
        case_id: rec.case_id.clone(),
        modality: rec.modality,
        image_path,
        mask_path,
        rng_seed,
        case_index,
    })
}

/// Write every case pair plus `manifest.csv` and the config under `root`.
pub fn generate_dataset(cfg: &PhantomConfig, root: &Path) -> Result<Manifest, PhantomError> {
    cfg.validate()?;
    fs::create_dir_all(root).map_err(|e| io_err(root, e))?;
    let mut rows = Vec::with_capacity(2 * cfg.n_cases);
    for i in 0..cfg.n_cases {
        let (high, low) = generate_phantom(cfg, i)?;
        rows.push(write_case(root, &high, cfg.rng_seed, i)?);
        rows.push(write_case(root, &low, cfg.rng_seed, i)?);
    }
    let manifest = Manifest { root: root.to_path_buf(), rows };
    let path = root.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_csv()).map_err(|e| io_err(&path, e))?;
    let path = root.join(CONFIG_FILE);
    let json = serde_json::to_string_pretty(cfg).expect("config serializes");
    fs::write(&path, json).map_err(|e| io_err(&path, e))?;
    Ok(manifest)
}

/// Regenerate every manifest row from the stored config and compare the
/// files byte for byte. Returns the mismatching paths.
pub fn verify_dataset(root: &Path) -> Result<Vec<PathBuf>, PhantomError> {
    let path = root.join(CONFIG_FILE);
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let base: PhantomConfig = serde_json::from_str(&text).map_err(|e| io_err(&path, e))?;
    let manifest = Manifest::read(root)?;
    let mut bad = Vec::new();
    for row in &manifest.rows {
        let cfg = PhantomConfig { rng_seed: row.rng_seed, ..base.clone() };
        let (high, low) = generate_phantom(&cfg, row.case_index)?;
        let rec = if row.modality == Modality::HighContrast { high } else { low };
        for (rel, vol) in [(&row.image_path, &rec.image), (&row.mask_path, &rec.mask)] {
            let p = root.join(rel);
            let on_disk = fs::read(&p).map_err(|e| io_err(&p, e))?;
            if on_disk != crate::volume::encode_volume(vol) {
                bad.push(p);
            }
        }
    }
    Ok(bad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::landmarks::extract_landmarks;

    fn small() -> PhantomConfig {
        PhantomConfig { n_cases: 3, ..PhantomConfig::default() }
    }

    #[test]
    fn deterministic_and_shared_mask() {
        let cfg = small();
        let (h1, l1) = generate_phantom(&cfg, 1).unwrap();
        let (h2, l2) = generate_phantom(&cfg, 1).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(l1, l2);
        assert_eq!(h1.mask, l1.mask);
        assert_ne!(h1.image, l1.image);
    }

    #[test]
    fn mask_slice_structure() {
        let cfg = PhantomConfig { n_cases: 12, ..PhantomConfig::default() };
        for i in 0..cfg.n_cases {
            let (h, _) = generate_phantom(&cfg, i).unwrap();
            assert!(mask_is_valid(h.mask.data()), "case {i}");
        }
    }

    #[test]
    fn seeds_strictly_inside() {
        let cfg = small();
        for i in 0..cfg.n_cases {
            let (_, mask) = phantom_shape(&cfg, i).unwrap();
            let seeds = seed_positions(&cfg, i, &mask);
            assert!(seeds.len() >= cfg.seeds.count_min);
            for (z, y, x) in seeds {
                for (dz, dy, dx) in [(0, 0, 0), (1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)] {
                    let p = [(z as isize + dz) as usize, (y as isize + dy) as usize, (x as isize + dx) as usize];
                    assert_eq!(mask[p], 1.0);
                }
            }
        }
    }

    #[test]
    fn exact_ellipsoid_matches_analytic_extremes() {
        let mut cfg = small();
        cfg.shape.perturbation = 0.0;
        let (e, mask) = phantom_shape(&cfg, 0).unwrap();
        let (w, h, _) = cfg.dims;
        let vol = Volume::new(mask, cfg.spacing, Kind::Mask).unwrap();
        let ls = extract_landmarks(&vol).unwrap();
        for rec in ls.records.iter().filter(|r| r.present) {
            let dz = (rec.slice_index as f64 - e.center[2]) / e.semi_axes[2];
            let s = (1.0 - dz * dz).sqrt();
            let (ax, ay) = (e.semi_axes[0] * s, e.semi_axes[1] * s);
            let tol = 1.0 + 1e-9;
            let px = |p: f32| p as f64 * (w - 1) as f64;
            let py = |p: f32| p as f64 * (h - 1) as f64;
            assert!((px(rec.left().x) - (e.center[0] - ax)).abs() <= tol);
            assert!((px(rec.right().x) - (e.center[0] + ax)).abs() <= tol);
            assert!((py(rec.top().y) - (e.center[1] - ay)).abs() <= tol);
            assert!((py(rec.bottom().y) - (e.center[1] + ay)).abs() <= tol);
        }
    }

    #[test]
    fn high_contrast_is_much_cleaner() {
        let cfg = small();
        for i in 0..cfg.n_cases {
            let (h, l) = generate_phantom(&cfg, i).unwrap();
            let (ch, cl) = (cnr(&h.image, &h.mask), cnr(&l.image, &l.mask));
            assert!(ch >= 3.0 * cl, "case {i}: {ch} vs {cl}");
        }
    }

    #[test]
    fn margin_validation() {
        let mut cfg = small();
        cfg.shape.semi_axis_x = Range::new(10.0, 40.0);
        assert!(matches!(cfg.validate(), Err(PhantomError::Config(_))));
    }

    #[test]
    fn manifest_round_trip() {
        let m = Manifest {
            root: PathBuf::from("/x"),
            rows: vec![ManifestRow {
                case_id: "case000".into(),
                modality: Modality::LowContrast,
                image_path: "case000/low_contrast_image.dgmv".into(),
                mask_path: "case000/low_contrast_mask.dgmv".into(),
                rng_seed: 7,
                case_index: 0,
            }],
        };
        assert_eq!(Manifest::parse(Path::new("/x"), &m.to_csv()).unwrap(), m);
    }
}
