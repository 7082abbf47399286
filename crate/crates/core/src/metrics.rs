//! Segmentation metrics: Dice, sensitivity, PPV and symmetric average
//! surface distance in millimeters.
//!
//! Surface voxels are foreground voxels with at least one 6-connected
//! neighbor that is background or outside the grid. ASD is the mean of the
//! two directed mean nearest-surface distances. The production path uses
//! an exact separable Euclidean distance transform; [`asd_oracle`] is the
//! all-pairs reference used in tests.

use std::fmt::Write as _;

use log::warn;
use ndarray::Array3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::preprocess::{preprocess_pair, IntensityStats, PreprocessConfig};
use crate::volume::{binarize, CaseRecord, Kind, Volume};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("dimension mismatch: {0:?} vs {1:?}")]
    DimMismatch((usize, usize, usize), (usize, usize, usize)),
    #[error("spacing mismatch: {0:?} vs {1:?}")]
    SpacingMismatch([f32; 3], [f32; 3]),
    #[error("surface distance undefined: {0} mask is empty")]
    EmptyMask(&'static str),
    #[error("metrics need mask volumes")]
    NotAMask,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Overlap {
    pub dsc: f64,
    pub sen: f64,
    pub ppv: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

fn check_pair(pred: &Volume, truth: &Volume) -> Result<(), MetricError> {
    if pred.kind() != Kind::Mask || truth.kind() != Kind::Mask {
        return Err(MetricError::NotAMask);
    }
    if pred.dims() != truth.dims() {
        return Err(MetricError::DimMismatch(pred.dims(), truth.dims()));
    }
    Ok(())
}

pub fn confusion(pred: &Volume, truth: &Volume) -> Result<Confusion, MetricError> {
    check_pair(pred, truth)?;
    let mut c = Confusion { tp: 0, fp: 0, fn_: 0 };
    for (&p, &t) in pred.data().iter().zip(truth.data().iter()) {
        match (p != 0.0, t != 0.0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(c)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// (dsc, sen, ppv). Both masks empty gives (1, 1, 1); otherwise a zero
/// denominator gives 0.
pub fn overlap_metrics(pred: &Volume, truth: &Volume) -> Result<Overlap, MetricError> {
    let c = confusion(pred, truth)?;
    if c.tp + c.fp + c.fn_ == 0 {
        return Ok(Overlap { dsc: 1.0, sen: 1.0, ppv: 1.0 });
    }
    Ok(Overlap {
        dsc: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        sen: ratio(c.tp, c.tp + c.fn_),
        ppv: ratio(c.tp, c.tp + c.fp),
    })
}

/// Surface voxels as (z, y, x).
pub fn surface_voxels(mask: &Volume) -> Vec<(usize, usize, usize)> {
    let d = mask.data();
    let (c, h, w) = d.dim();
    let fg = |z: isize, y: isize, x: isize| {
        z >= 0 && y >= 0 && x >= 0 && (z as usize) < c && (y as usize) < h && (x as usize) < w && d[[z as usize, y as usize, x as usize]] != 0.0
    };
    let mut out = Vec::new();
    for ((z, y, x), &v) in d.indexed_iter() {
        if v == 0.0 {
            continue;
        }
        let (zi, yi, xi) = (z as isize, y as isize, x as isize);
        let border = !fg(zi - 1, yi, xi)
            || !fg(zi + 1, yi, xi)
            || !fg(zi, yi - 1, xi)
            || !fg(zi, yi + 1, xi)
            || !fg(zi, yi, xi - 1)
            || !fg(zi, yi, xi + 1);
        if border {
            out.push((z, y, x));
        }
    }
    out
}

/// Exact 1D squared distance transform (lower envelope of parabolas) on
/// samples spaced `step` apart. `f` holds squared distances, `INF` for
/// "no site".
fn edt_1d(f: &[f64], step: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    let pos = |i: usize| i as f64 * step;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let (xq, xp) = (pos(q), pos(p));
                    let s = ((f[q] + xq * xq) - (f[p] + xp * xp)) / (2.0 * (xq - xp));
                    if s <= *z.last().expect("paired with v") {
                        v.pop();
                        z.pop();
                        if v.is_empty() {
                            continue;
                        }
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (i, o) in out.iter_mut().enumerate() {
        let x = pos(i);
        while k + 1 < v.len() && z[k + 1] < x {
            k += 1;
        }
        let d = x - pos(v[k]);
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance (mm²) from every voxel to the nearest site.
fn squared_edt(sites: &[(usize, usize, usize)], dims: (usize, usize, usize), spacing: [f64; 3]) -> Array3<f64> {
    let (c, h, w) = dims;
    let mut g = Array3::<f64>::from_elem((c, h, w), f64::INFINITY);
    for &(z, y, x) in sites {
        g[[z, y, x]] = 0.0;
    }
    let (mut v, mut zs) = (Vec::new(), Vec::new());
    let mut pass = |g: &mut Array3<f64>, axis: usize, step: f64| {
        let n = g.shape()[axis];
        let mut line = vec![0.0; n];
        let mut out = vec![0.0; n];
        for mut lane in g.lanes_mut(ndarray::Axis(axis)) {
            for (l, &x) in line.iter_mut().zip(lane.iter()) {
                *l = x;
            }
            edt_1d(&line, step, &mut out, &mut v, &mut zs);
            for (x, &o) in lane.iter_mut().zip(out.iter()) {
                *x = o;
            }
        }
    };
    pass(&mut g, 2, spacing[0]);
    pass(&mut g, 1, spacing[1]);
    pass(&mut g, 0, spacing[2]);
    g
}

fn spacing_f64(v: &Volume) -> [f64; 3] {
    v.spacing().map(|s| s as f64)
}

fn check_surface_pair(pred: &Volume, truth: &Volume) -> Result<(), MetricError> {
    check_pair(pred, truth)?;
    if pred.spacing() != truth.spacing() {
        return Err(MetricError::SpacingMismatch(pred.spacing(), truth.spacing()));
    }
    if pred.foreground_count() == 0 {
        return Err(MetricError::EmptyMask("predicted"));
    }
    if truth.foreground_count() == 0 {
        return Err(MetricError::EmptyMask("ground-truth"));
    }
    Ok(())
}

/// Symmetric average surface distance in mm.
pub fn average_surface_distance(pred: &Volume, truth: &Volume) -> Result<f64, MetricError> {
    check_surface_pair(pred, truth)?;
    let sp = spacing_f64(pred);
    let (w, h, c) = pred.dims();
    let sa = surface_voxels(pred);
    let sb = surface_voxels(truth);
    let directed = |from: &[(usize, usize, usize)], to: &[(usize, usize, usize)]| {
        let dt = squared_edt(to, (c, h, w), sp);
        from.iter().map(|&(z, y, x)| dt[[z, y, x]].sqrt()).sum::<f64>() / from.len() as f64
    };
    Ok((directed(&sa, &sb) + directed(&sb, &sa)) / 2.0)
}

/// Same quantity by exhaustive all-pairs minimization.
pub fn asd_oracle(pred: &Volume, truth: &Volume) -> Result<f64, MetricError> {
    check_surface_pair(pred, truth)?;
    let sp = spacing_f64(pred);
    let sa = surface_voxels(pred);
    let sb = surface_voxels(truth);
    let dist = |a: (usize, usize, usize), b: (usize, usize, usize)| {
        let dx = (a.2 as f64 - b.2 as f64) * sp[0];
        let dy = (a.1 as f64 - b.1 as f64) * sp[1];
        let dz = (a.0 as f64 - b.0 as f64) * sp[2];
        (dx * dx + dy * dy + dz * dz).sqrt()
    };
    let directed = |from: &[(usize, usize, usize)], to: &[(usize, usize, usize)]| {
        from.iter()
            .map(|&a| to.iter().map(|&b| dist(a, b)).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / from.len() as f64
    };
    Ok((directed(&sa, &sb) + directed(&sb, &sa)) / 2.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: String,
    pub dsc: f64,
    pub sen: f64,
    pub ppv: f64,
    /// `None` when either mask is empty.
    pub asd_mm: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    /// Population standard deviation (divisor n).
    pub std: f64,
    pub n: usize,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, std: f64::NAN, n };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        Self { mean, std: var.sqrt(), n }
    }

    /// `mean ± std` with two decimals.
    pub fn cell(&self) -> String {
        if self.n == 0 {
            "n/a".to_string()
        } else {
            format!("{:.2} ± {:.2}", self.mean, self.std)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<CaseMetrics>,
    /// Cases that could not be evaluated: (case_id, error).
    pub failures: Vec<(String, String)>,
}

pub const REPORT_HEADER: &str = "case_id,dsc,sen,ppv,asd_mm";
/// Evaluation grid recorded alongside reports.
pub const GRID_NOTE: &str = "metrics computed on the preprocessed grid";

impl MetricReport {
    pub fn from_rows(mut rows: Vec<CaseMetrics>) -> Self {
        rows.sort_by(|a, b| a.case_id.cmp(&b.case_id));
        Self { rows, failures: Vec::new() }
    }

    pub fn dsc(&self) -> Aggregate {
        Aggregate::of(&self.rows.iter().map(|r| r.dsc).collect::<Vec<_>>())
    }
    pub fn sen(&self) -> Aggregate {
        Aggregate::of(&self.rows.iter().map(|r| r.sen).collect::<Vec<_>>())
    }
    pub fn ppv(&self) -> Aggregate {
        Aggregate::of(&self.rows.iter().map(|r| r.ppv).collect::<Vec<_>>())
    }
    /// Mean over cases with a defined ASD.
    pub fn asd(&self) -> Aggregate {
        Aggregate::of(&self.rows.iter().filter_map(|r| r.asd_mm).collect::<Vec<_>>())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(REPORT_HEADER);
        s.push('\n');
        let asd = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"));
        for r in &self.rows {
            let _ = writeln!(s, "{},{:.6},{:.6},{:.6},{}", r.case_id, r.dsc, r.sen, r.ppv, asd(r.asd_mm));
        }
        let (d, se, p, a) = (self.dsc(), self.sen(), self.ppv(), self.asd());
        let fmt = |v: f64| if v.is_finite() { format!("{v:.6}") } else { "NA".into() };
        let _ = writeln!(s, "mean,{},{},{},{}", fmt(d.mean), fmt(se.mean), fmt(p.mean), fmt(a.mean));
        let _ = writeln!(s, "std,{},{},{},{}", fmt(d.std), fmt(se.std), fmt(p.std), fmt(a.std));
        s
    }

    /// Parse the per-case rows of [`MetricReport::to_csv`] output.
    pub fn from_csv(text: &str) -> Result<Self, String> {
        let mut lines = text.lines();
        if lines.next() != Some(REPORT_HEADER) {
            return Err("missing report header".into());
        }
        let mut rows = Vec::new();
        for line in lines {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(format!("bad row `{line}`"));
            }
            if f[0] == "mean" || f[0] == "std" {
                continue;
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| format!("{s}: {e}"));
            rows.push(CaseMetrics {
                case_id: f[0].to_string(),
                dsc: num(f[1])?,
                sen: num(f[2])?,
                ppv: num(f[3])?,
                asd_mm: if f[4] == "NA" { None } else { Some(num(f[4])?) },
            });
        }
        Ok(Self::from_rows(rows))
    }
}

/// Produces a per-voxel foreground probability volume for a preprocessed
/// image.
pub trait CaseSegmenter {
    fn segment(&self, case_id: &str, image: &Volume) -> Result<Volume, String>;
}

/// Metrics for one predicted probability volume against its truth.
pub fn score_case(case_id: &str, prob: &Volume, truth: &Volume) -> Result<CaseMetrics, String> {
    let pred = binarize(prob, 0.5).map_err(|e| e.to_string())?;
    let pred = Volume::new(pred.into_data(), truth.spacing(), Kind::Mask).map_err(|e| e.to_string())?;
    let o = overlap_metrics(&pred, truth).map_err(|e| e.to_string())?;
    let asd_mm = match average_surface_distance(&pred, truth) {
        Ok(v) => Some(v),
        Err(MetricError::EmptyMask(which)) => {
            warn!("{case_id}: {which} mask empty, ASD excluded");
            None
        }
        Err(e) => return Err(e.to_string()),
    };
    Ok(CaseMetrics {
        case_id: case_id.to_string(),
        dsc: o.dsc,
        sen: o.sen,
        ppv: o.ppv,
        asd_mm,
    })
}

/// Preprocess each case, segment it, binarize at 0.5 and score it on the
/// preprocessed grid. Failing cases are recorded and skipped.
pub fn evaluate_cases(
    segmenter: &dyn CaseSegmenter,
    cases: &[CaseRecord],
    cfg: &PreprocessConfig,
    dataset_stats: Option<IntensityStats>,
) -> MetricReport {
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for case in cases {
        let result = preprocess_pair(&case.image, &case.mask, cfg, dataset_stats)
            .map_err(|e| e.to_string())
            .and_then(|(img, mask)| {
                let prob = segmenter.segment(&case.case_id, &img)?;
                score_case(&case.case_id, &prob, &mask)
            });
        match result {
            Ok(r) => rows.push(r),
            Err(e) => {
                warn!("{}: evaluation failed: {e}", case.case_id);
                failures.push((case.case_id.clone(), e));
            }
        }
    }
    let mut report = MetricReport::from_rows(rows);
    report.failures = failures;
    report
}
