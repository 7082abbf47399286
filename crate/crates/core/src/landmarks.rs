//! Per-slice boundary landmarks: the leftmost, rightmost, topmost and
//! bottommost foreground voxel of every slice plus a presence flag, and
//! the flat vector layout consumed by the shape generator.

use std::fmt::Write as _;

use ndarray::ArrayView2;
use thiserror::Error;

use crate::volume::{Kind, Volume};

/// Entries per slice in the flat encoding: presence then 4 (x, y) pairs.
pub const SLICE_STRIDE: usize = 9;
/// Coordinate value stored for absent slices.
pub const SENTINEL: f32 = -1.0;

#[derive(Debug, Error, PartialEq)]
pub enum LandmarkError {
    #[error("landmarks need a mask volume")]
    NotAMask,
    #[error("{slices} slices exceed max_slices = {max}")]
    TooManySlices { slices: usize, max: usize },
    #[error("landmark vector has length {got}, expected a multiple of 9 ({expected})")]
    BadLength { got: usize, expected: usize },
    #[error("malformed landmark csv: {0}")]
    Csv(String),
}

/// A point in normalized in-plane coordinates: x / (W - 1), y / (H - 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f32,
    pub y: f32,
}

impl Point {
    pub const SENTINEL: Point = Point { x: SENTINEL, y: SENTINEL };
}

#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkRecord {
    pub slice_index: usize,
    pub present: bool,
    /// (left, right, top, bottom)
    pub points: [Point; 4],
}

impl LandmarkRecord {
    pub fn absent(slice_index: usize) -> Self {
        Self {
            slice_index,
            present: false,
            points: [Point::SENTINEL; 4],
        }
    }

    pub fn left(&self) -> Point {
        self.points[0]
    }
    pub fn right(&self) -> Point {
        self.points[1]
    }
    pub fn top(&self) -> Point {
        self.points[2]
    }
    pub fn bottom(&self) -> Point {
        self.points[3]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    pub records: Vec<LandmarkRecord>,
    /// (W, H, C) of the source mask.
    pub dims: (usize, usize, usize),
}

fn lower_median(sorted: &[usize]) -> usize {
    sorted[(sorted.len() - 1) / 2]
}

fn norm(v: usize, extent: usize) -> f32 {
    if extent <= 1 {
        0.0
    } else {
        (v as f64 / (extent - 1) as f64) as f32
    }
}

/// Landmarks of one slice, `None` when the slice has no foreground.
pub fn slice_landmarks(slice: ArrayView2<f32>) -> Option<[(usize, usize); 4]> {
    let (h, w) = slice.dim();
    let (mut min_x, mut max_x, mut min_y, mut max_y) = (usize::MAX, 0, usize::MAX, 0);
    let mut any = false;
    for ((y, x), &v) in slice.indexed_iter() {
        if v != 0.0 {
            any = true;
            min_x = min_x.min(x);
            max_x = max_x.max(x);
            min_y = min_y.min(y);
            max_y = max_y.max(y);
        }
    }
    if !any {
        return None;
    }
    // orthogonal coordinates along each extreme column/row, ascending
    let col = |x: usize| -> Vec<usize> { (0..h).filter(|&y| slice[[y, x]] != 0.0).collect() };
    let row = |y: usize| -> Vec<usize> { (0..w).filter(|&x| slice[[y, x]] != 0.0).collect() };
    Some([
        (min_x, lower_median(&col(min_x))),
        (max_x, lower_median(&col(max_x))),
        (lower_median(&row(min_y)), min_y),
        (lower_median(&row(max_y)), max_y),
    ])
}

/// Extract one record per slice of `mask`.
pub fn extract_landmarks(mask: &Volume) -> Result<LandmarkSet, LandmarkError> {
    if mask.kind() != Kind::Mask {
        return Err(LandmarkError::NotAMask);
    }
    let (w, h, c) = mask.dims();
    let records = (0..c)
        .map(|z| match slice_landmarks(mask.slice(z)) {
            None => LandmarkRecord::absent(z),
            Some(pts) => LandmarkRecord {
                slice_index: z,
                present: true,
                points: pts.map(|(x, y)| Point {
                    x: norm(x, w),
                    y: norm(y, h),
                }),
            },
        })
        .collect();
    Ok(LandmarkSet { records, dims: (w, h, c) })
}

/// Flat layout: per slice `[z, xl, yl, xr, yr, xt, yt, xb, yb]`, zero
/// padded to `max_slices`; absent slices are all zeros.
pub fn encode_landmarks(ls: &LandmarkSet, max_slices: usize) -> Result<Vec<f32>, LandmarkError> {
    if ls.records.len() > max_slices {
        return Err(LandmarkError::TooManySlices {
            slices: ls.records.len(),
            max: max_slices,
        });
    }
    let mut out = vec![0.0f32; max_slices * SLICE_STRIDE];
    for (u, r) in ls.records.iter().enumerate() {
        if !r.present {
            continue;
        }
        let o = u * SLICE_STRIDE;
        out[o] = 1.0;
        for (k, p) in r.points.iter().enumerate() {
            out[o + 1 + 2 * k] = p.x;
            out[o + 2 + 2 * k] = p.y;
        }
    }
    Ok(out)
}

/// Inverse of [`encode_landmarks`]; `dims` gives the slice count to
/// recover. Presence is thresholded at 0.5.
pub fn decode_landmarks(vec: &[f32], dims: (usize, usize, usize)) -> Result<LandmarkSet, LandmarkError> {
    let c = dims.2;
    if vec.len() % SLICE_STRIDE != 0 || vec.len() < c * SLICE_STRIDE {
        return Err(LandmarkError::BadLength {
            got: vec.len(),
            expected: c.max(1) * SLICE_STRIDE,
        });
    }
    let records = (0..c)
        .map(|u| {
            let o = u * SLICE_STRIDE;
            if vec[o] > 0.5 {
                let p = |k: usize| Point {
                    x: vec[o + 1 + 2 * k],
                    y: vec[o + 2 + 2 * k],
                };
                LandmarkRecord {
                    slice_index: u,
                    present: true,
                    points: [p(0), p(1), p(2), p(3)],
                }
            } else {
                LandmarkRecord::absent(u)
            }
        })
        .collect();
    Ok(LandmarkSet { records, dims })
}

pub const CSV_HEADER: &str = "slice,z,xl,yl,xr,yr,xt,yt,xb,yb";

pub fn to_csv(ls: &LandmarkSet) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in &ls.records {
        let _ = write!(s, "{},{}", r.slice_index, r.present as u8);
        for p in &r.points {
            let _ = write!(s, ",{},{}", p.x, p.y);
        }
        s.push('\n');
    }
    s
}

pub fn from_csv(text: &str, dims: (usize, usize)) -> Result<LandmarkSet, LandmarkError> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(CSV_HEADER) {
        return Err(LandmarkError::Csv("missing header".into()));
    }
    let mut records = Vec::new();
    for (i, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 10 {
            return Err(LandmarkError::Csv(format!("row {i}: {} fields", f.len())));
        }
        let num = |k: usize| {
            f[k].trim()
                .parse::<f32>()
                .map_err(|e| LandmarkError::Csv(format!("row {i} field {k}: {e}")))
        };
        let slice_index = f[0]
            .trim()
            .parse::<usize>()
            .map_err(|e| LandmarkError::Csv(format!("row {i}: {e}")))?;
        let present = num(1)? > 0.5;
        let mut points = [Point::SENTINEL; 4];
        for (k, p) in points.iter_mut().enumerate() {
            *p = Point {
                x: num(2 + 2 * k)?,
                y: num(3 + 2 * k)?,
            };
        }
        records.push(LandmarkRecord {
            slice_index,
            present,
            points,
        });
    }
    let c = records.len();
    Ok(LandmarkSet {
        records,
        dims: (dims.0, dims.1, c),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use proptest::prelude::*;

    fn mask_from(c: usize, h: usize, w: usize, on: impl Fn(usize, usize, usize) -> bool) -> Volume {
        let d = Array3::from_shape_fn((c, h, w), |(z, y, x)| on(z, y, x) as u8 as f32);
        Volume::new(d, [1.0; 3], Kind::Mask).unwrap()
    }

    #[test]
    fn single_voxel() {
        let m = mask_from(1, 16, 16, |_, y, x| x == 5 && y == 9);
        let ls = extract_landmarks(&m).unwrap();
        let r = &ls.records[0];
        assert!(r.present);
        for p in r.points {
            assert_eq!(p, Point { x: 5.0 / 15.0, y: 9.0 / 15.0 });
        }
    }

    #[test]
    fn empty_slice_gets_sentinels() {
        let m = mask_from(2, 8, 8, |z, y, x| z == 1 && x == 2 && y == 2);
        let ls = extract_landmarks(&m).unwrap();
        assert_eq!(ls.records[0], LandmarkRecord::absent(0));
        assert!(ls.records[1].present);
    }

    #[test]
    fn rectangle_uses_lower_median() {
        let m = mask_from(1, 16, 16, |_, y, x| (4..=8).contains(&x) && (6..=10).contains(&y));
        let r = &extract_landmarks(&m).unwrap().records[0];
        let f = |v: f32| v / 15.0;
        assert_eq!(r.left(), Point { x: f(4.0), y: f(8.0) });
        assert_eq!(r.right(), Point { x: f(8.0), y: f(8.0) });
        assert_eq!(r.top(), Point { x: f(6.0), y: f(6.0) });
        assert_eq!(r.bottom(), Point { x: f(6.0), y: f(10.0) });
    }

    #[test]
    fn rejects_images() {
        let v = Volume::zeros(2, 2, 2, [1.0; 3], Kind::Image).unwrap();
        assert_eq!(extract_landmarks(&v), Err(LandmarkError::NotAMask));
    }

    #[test]
    fn encode_layout() {
        let empty = LandmarkSet { records: vec![], dims: (8, 8, 0) };
        assert_eq!(encode_landmarks(&empty, 4).unwrap(), vec![0.0; 36]);

        let m = mask_from(4, 8, 8, |z, y, x| z == 2 && (2..5).contains(&x) && (3..6).contains(&y));
        let v = encode_landmarks(&extract_landmarks(&m).unwrap(), 4).unwrap();
        assert_eq!(v.len(), 36);
        for (i, &x) in v.iter().enumerate() {
            if !(18..27).contains(&i) {
                assert_eq!(x, 0.0, "entry {i}");
            }
        }
        assert_eq!(v[18], 1.0);
        assert!(matches!(
            encode_landmarks(&extract_landmarks(&m).unwrap(), 3),
            Err(LandmarkError::TooManySlices { slices: 4, max: 3 })
        ));
    }

    #[test]
    fn decode_rules() {
        let ls = decode_landmarks(&[0.0; 27], (8, 8, 3)).unwrap();
        assert!(ls.records.iter().all(|r| !r.present && r.points == [Point::SENTINEL; 4]));
        let mut v = vec![0.0; 9];
        v[0] = 0.7;
        assert!(decode_landmarks(&v, (8, 8, 1)).unwrap().records[0].present);
        assert!(matches!(decode_landmarks(&[0.0; 10], (8, 8, 1)), Err(LandmarkError::BadLength { .. })));
    }

    #[test]
    fn csv_round_trip() {
        let m = mask_from(3, 8, 8, |z, y, x| z > 0 && x + y < 6);
        let ls = extract_landmarks(&m).unwrap();
        let back = from_csv(&to_csv(&ls), (8, 8)).unwrap();
        assert_eq!(back, ls);
    }

    fn arb_mask() -> impl Strategy<Value = Volume> {
        (2usize..12, 2usize..12, 1usize..5).prop_flat_map(|(w, h, c)| {
            prop::collection::vec(prop::bool::weighted(0.3), w * h * c).prop_map(move |bits| {
                let d = Array3::from_shape_vec((c, h, w), bits.iter().map(|&b| b as u8 as f32).collect()).unwrap();
                Volume::new(d, [1.0; 3], Kind::Mask).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn points_lie_on_foreground(m in arb_mask()) {
            let (w, h, _) = m.dims();
            let ls = extract_landmarks(&m).unwrap();
            for r in &ls.records {
                if r.present {
                    prop_assert!(r.left().x <= r.right().x && r.top().y <= r.bottom().y);
                    for p in r.points {
                        let x = (p.x * (w.max(2) - 1) as f32).round() as usize;
                        let y = (p.y * (h.max(2) - 1) as f32).round() as usize;
                        prop_assert_eq!(m.data()[[r.slice_index, y.min(h - 1), x.min(w - 1)]], 1.0);
                    }
                } else {
                    prop_assert_eq!(r.points, [Point::SENTINEL; 4]);
                }
            }
        }

        #[test]
        fn encode_decode_round_trip(m in arb_mask()) {
            let ls = extract_landmarks(&m).unwrap();
            let max = ls.records.len() + 2;
            let v = encode_landmarks(&ls, max).unwrap();
            prop_assert_eq!(v.len(), max * SLICE_STRIDE);
            prop_assert_eq!(decode_landmarks(&v, ls.dims).unwrap(), ls);
        }

        #[test]
        fn interior_fill_is_invisible(m in arb_mask(), seed in any::<u64>()) {
            // add foreground strictly inside each slice's bounding box
            let before = extract_landmarks(&m).unwrap();
            let mut d = m.data().clone();
            let mut s = seed;
            for r in &before.records {
                let Some(pts) = slice_landmarks(m.slice(r.slice_index)) else { continue };
                let (x0, x1, y0, y1) = (pts[0].0, pts[1].0, pts[2].1, pts[3].1);
                for y in y0 + 1..y1 {
                    for x in x0 + 1..x1 {
                        s = dgmnet_nn::mix64(s);
                        if s % 3 == 0 {
                            d[[r.slice_index, y, x]] = 1.0;
                        }
                    }
                }
            }
            let after = extract_landmarks(&Volume::new(d, [1.0; 3], Kind::Mask).unwrap()).unwrap();
            prop_assert_eq!(before, after);
        }
    }
}
