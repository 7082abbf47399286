//! Dense CPU kernels for the tape operations. All tensors are NCHW,
//! row-major, `f32`.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array4, ArrayView1, ArrayView2, ArrayView4, ArrayViewMut2};

/// Unfold one (C, H, W) image into (C·k·k, OH·OW) columns, stride 1.
pub fn im2col(x: &[f32], c: usize, h: usize, w: usize, k: usize, pad: usize, cols: &mut [f32]) {
    let oh = h + 2 * pad + 1 - k;
    let ow = w + 2 * pad + 1 - k;
    debug_assert_eq!(cols.len(), c * k * k * oh * ow);
    let mut row = 0;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = oy as isize + ky as isize - pad as isize;
                    let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst_row.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    // valid ox range: 0 <= ox + kx - pad < w
                    let lo = pad.saturating_sub(kx).min(ow);
                    let hi = (w + pad).saturating_sub(kx).min(ow).max(lo);
                    dst_row[..lo].fill(0.0);
                    dst_row[hi..].fill(0.0);
                    let s0 = lo + kx - pad;
                    dst_row[lo..hi].copy_from_slice(&src_row[s0..s0 + (hi - lo)]);
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into an image.
pub fn col2im(cols: &[f32], c: usize, h: usize, w: usize, k: usize, pad: usize, x: &mut [f32]) {
    let oh = h + 2 * pad + 1 - k;
    let ow = w + 2 * pad + 1 - k;
    let mut row = 0;
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = oy as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let lo = pad.saturating_sub(kx).min(ow);
                    let hi = (w + pad).saturating_sub(kx).min(ow).max(lo);
                    let s0 = lo + kx - pad;
                    let dst_row = &mut plane[iy as usize * w + s0..iy as usize * w + s0 + (hi - lo)];
                    for (d, s) in dst_row.iter_mut().zip(&src[oy * ow + lo..oy * ow + hi]) {
                        *d += *s;
                    }
                }
                row += 1;
            }
        }
    }
}

fn view2(data: &[f32], rows: usize, cols: usize) -> ArrayView2<'_, f32> {
    ArrayView2::from_shape((rows, cols), data).expect("contiguous buffer")
}

fn view2_mut(data: &mut [f32], rows: usize, cols: usize) -> ArrayViewMut2<'_, f32> {
    ArrayViewMut2::from_shape((rows, cols), data).expect("contiguous buffer")
}

/// Stride-1 2D convolution. `w` is (Cout, Cin, k, k).
pub fn conv2d_forward(
    x: ArrayView4<f32>,
    w: ArrayView4<f32>,
    b: Option<ArrayView1<f32>>,
    pad: usize,
) -> Array4<f32> {
    let (n, c, h, wd) = x.dim();
    let (co, ci, k, _) = w.dim();
    assert_eq!(c, ci, "conv2d channel mismatch");
    let oh = h + 2 * pad + 1 - k;
    let ow = wd + 2 * pad + 1 - k;
    let x = x.as_standard_layout();
    let w = w.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let w2 = view2(w.as_slice().expect("standard layout"), co, ci * k * k);
    let mut out = Array4::<f32>::zeros((n, co, oh, ow));
    let mut cols = vec![0.0f32; ci * k * k * oh * ow];
    let plane = c * h * wd;
    {
        let os = out.as_slice_mut().expect("fresh array");
        for s in 0..n {
            let dst = &mut os[s * co * oh * ow..(s + 1) * co * oh * ow];
            if let Some(bias) = &b {
                for (o, chunk) in dst.chunks_mut(oh * ow).enumerate() {
                    chunk.fill(bias[o]);
                }
            }
            let beta = if b.is_some() { 1.0 } else { 0.0 };
            if k == 1 && pad == 0 {
                let xv = view2(&xs[s * plane..(s + 1) * plane], ci, h * wd);
                general_mat_mul(1.0, &w2, &xv, beta, &mut view2_mut(dst, co, oh * ow));
            } else {
                im2col(&xs[s * plane..(s + 1) * plane], c, h, wd, k, pad, &mut cols);
                let cv = view2(&cols, ci * k * k, oh * ow);
                general_mat_mul(1.0, &w2, &cv, beta, &mut view2_mut(dst, co, oh * ow));
            }
        }
    }
    out
}

pub struct ConvGrads {
    pub dx: Option<Array4<f32>>,
    pub dw: Option<Array4<f32>>,
    pub db: Option<ndarray::Array1<f32>>,
}

pub fn conv2d_backward(
    x: ArrayView4<f32>,
    w: ArrayView4<f32>,
    dy: ArrayView4<f32>,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads {
    let (n, c, h, wd) = x.dim();
    let (co, ci, k, _) = w.dim();
    let (_, _, oh, ow) = dy.dim();
    let x = x.as_standard_layout();
    let w = w.as_standard_layout();
    let dy = dy.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let dys = dy.as_slice().expect("standard layout");
    let w2 = view2(w.as_slice().expect("standard layout"), co, ci * k * k);
    let plane = c * h * wd;
    let oplane = co * oh * ow;
    let direct = k == 1 && pad == 0;

    let mut dw = if need_dw {
        Some(Array2::<f32>::zeros((co, ci * k * k)))
    } else {
        None
    };
    let mut dx = if need_dx {
        Some(Array4::<f32>::zeros((n, c, h, wd)))
    } else {
        None
    };
    let mut cols = vec![0.0f32; ci * k * k * oh * ow];
    for s in 0..n {
        let dyv = view2(&dys[s * oplane..(s + 1) * oplane], co, oh * ow);
        if let Some(dw) = dw.as_mut() {
            if direct {
                let xv = view2(&xs[s * plane..(s + 1) * plane], ci, h * wd);
                general_mat_mul(1.0, &dyv, &xv.t(), 1.0, dw);
            } else {
                im2col(&xs[s * plane..(s + 1) * plane], c, h, wd, k, pad, &mut cols);
                let cv = view2(&cols, ci * k * k, oh * ow);
                general_mat_mul(1.0, &dyv, &cv.t(), 1.0, dw);
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = dx.as_slice_mut().expect("fresh array");
            let dst = &mut dxs[s * plane..(s + 1) * plane];
            if direct {
                general_mat_mul(1.0, &w2.t(), &dyv, 0.0, &mut view2_mut(dst, ci, h * wd));
            } else {
                {
                    let mut cv = view2_mut(&mut cols, ci * k * k, oh * ow);
                    general_mat_mul(1.0, &w2.t(), &dyv, 0.0, &mut cv);
                }
                col2im(&cols, c, h, wd, k, pad, dst);
            }
        }
    }
    let db = if need_db {
        let mut db = ndarray::Array1::<f32>::zeros(co);
        for s in 0..n {
            for o in 0..co {
                let base = s * oplane + o * oh * ow;
                db[o] += dys[base..base + oh * ow].iter().sum::<f32>();
            }
        }
        Some(db)
    } else {
        None
    };
    ConvGrads {
        dx,
        dw: dw.map(|d| d.into_shape_with_order((co, ci, k, k)).expect("same size")),
        db,
    }
}

/// 2×2 transposed convolution with stride 2. `w` is (Cin, Cout, 2, 2).
pub fn conv_t2x2_forward(
    x: ArrayView4<f32>,
    w: ArrayView4<f32>,
    b: Option<ArrayView1<f32>>,
) -> Array4<f32> {
    let (n, ci, h, wd) = x.dim();
    let (wci, co, _, _) = w.dim();
    assert_eq!(ci, wci, "conv_t channel mismatch");
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    // (Cout·4, Cin) = transpose of the (Cin, Cout·4) weight matrix.
    let w = w.as_standard_layout();
    let wm = view2(w.as_slice().expect("standard layout"), ci, co * 4);
    let mut out = Array4::<f32>::zeros((n, co, 2 * h, 2 * wd));
    let mut tmp = vec![0.0f32; co * 4 * h * wd];
    let hw = h * wd;
    let ow = 2 * wd;
    let os = out.as_slice_mut().expect("fresh array");
    for s in 0..n {
        let xv = view2(&xs[s * ci * hw..(s + 1) * ci * hw], ci, hw);
        general_mat_mul(1.0, &wm.t(), &xv, 0.0, &mut view2_mut(&mut tmp, co * 4, hw));
        for o in 0..co {
            let bias = b.as_ref().map_or(0.0, |b| b[o]);
            let plane = &mut os[(s * co + o) * 4 * hw..(s * co + o + 1) * 4 * hw];
            for a in 0..2 {
                for bb in 0..2 {
                    let src = &tmp[(o * 4 + a * 2 + bb) * hw..(o * 4 + a * 2 + bb + 1) * hw];
                    for i in 0..h {
                        let row = &mut plane[(2 * i + a) * ow..(2 * i + a + 1) * ow];
                        for (j, &v) in src[i * wd..(i + 1) * wd].iter().enumerate() {
                            row[2 * j + bb] = v + bias;
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn conv_t2x2_backward(
    x: ArrayView4<f32>,
    w: ArrayView4<f32>,
    dy: ArrayView4<f32>,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads {
    let (n, ci, h, wd) = x.dim();
    let (_, co, _, _) = w.dim();
    let hw = h * wd;
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let w = w.as_standard_layout();
    let wm = view2(w.as_slice().expect("standard layout"), ci, co * 4);
    let mut dw = need_dw.then(|| Array2::<f32>::zeros((ci, co * 4)));
    let mut dx = need_dx.then(|| Array4::<f32>::zeros((n, ci, h, wd)));
    let mut db = need_db.then(|| ndarray::Array1::<f32>::zeros(co));
    let mut g = vec![0.0f32; co * 4 * hw];
    let dy = dy.as_standard_layout();
    let dys = dy.as_slice().expect("standard layout");
    let ow = 2 * wd;
    for s in 0..n {
        // gather dy into (Cout·4, HW)
        for o in 0..co {
            let plane = &dys[(s * co + o) * 4 * hw..(s * co + o + 1) * 4 * hw];
            for a in 0..2 {
                for bb in 0..2 {
                    let dst = &mut g[(o * 4 + a * 2 + bb) * hw..(o * 4 + a * 2 + bb + 1) * hw];
                    for i in 0..h {
                        let row = &plane[(2 * i + a) * ow..(2 * i + a + 1) * ow];
                        for (j, d) in dst[i * wd..(i + 1) * wd].iter_mut().enumerate() {
                            *d = row[2 * j + bb];
                        }
                    }
                }
            }
        }
        let gv = view2(&g, co * 4, hw);
        if let Some(db) = db.as_mut() {
            for o in 0..co {
                db[o] += g[o * 4 * hw..(o + 1) * 4 * hw].iter().sum::<f32>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            let xv = view2(&xs[s * ci * hw..(s + 1) * ci * hw], ci, hw);
            general_mat_mul(1.0, &xv, &gv.t(), 1.0, dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = dx.as_slice_mut().expect("fresh array");
            let dst = &mut dxs[s * ci * hw..(s + 1) * ci * hw];
            general_mat_mul(1.0, &wm, &gv, 0.0, &mut view2_mut(dst, ci, hw));
        }
    }
    ConvGrads {
        dx,
        dw: dw.map(|d| d.into_shape_with_order((ci, co, 2, 2)).expect("same size")),
        db,
    }
}

/// 2×2 max pooling, stride 2. Returns the pooled map and, per output
/// element, the flat index (within its plane) of the selected input.
pub fn max_pool2_forward(x: ArrayView4<f32>) -> (Array4<f32>, Vec<u32>) {
    let (n, c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array4::<f32>::zeros((n, c, oh, ow));
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for s in 0..n {
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut bi = 0u32;
                    for a in 0..2 {
                        for b in 0..2 {
                            let (y, xx) = (2 * i + a, 2 * j + b);
                            let v = x[[s, ch, y, xx]];
                            // first maximum wins; NaN propagates
                            if v > best || v.is_nan() && !best.is_nan() {
                                best = v;
                                bi = (y * w + xx) as u32;
                            }
                        }
                    }
                    out[[s, ch, i, j]] = best;
                    arg.push(bi);
                }
            }
        }
    }
    (out, arg)
}

pub fn max_pool2_backward(
    dy: ArrayView4<f32>,
    arg: &[u32],
    input_dim: (usize, usize, usize, usize),
) -> Array4<f32> {
    let (n, c, h, w) = input_dim;
    let mut dx = Array4::<f32>::zeros((n, c, h, w));
    let (oh, ow) = (h / 2, w / 2);
    let mut it = arg.iter();
    for s in 0..n {
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let idx = *it.next().expect("argmax per output") as usize;
                    dx[[s, ch, idx / w, idx % w]] += dy[[s, ch, i, j]];
                }
            }
        }
    }
    dx
}

/// Linear interpolation taps for resizing an axis of length `src` to `dst`
/// with pixel-center alignment and edge clamping.
pub fn linear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, (pos - i0 as f64) as f32)
        })
        .collect()
}

pub fn resize_bilinear_forward(x: ArrayView4<f32>, oh: usize, ow: usize) -> Array4<f32> {
    let (n, c, h, w) = x.dim();
    let ty = linear_taps(h, oh);
    let tx = linear_taps(w, ow);
    let mut out = Array4::<f32>::zeros((n, c, oh, ow));
    for s in 0..n {
        for ch in 0..c {
            for (i, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (j, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let top = x[[s, ch, y0, x0]] * (1.0 - fx) + x[[s, ch, y0, x1]] * fx;
                    let bot = x[[s, ch, y1, x0]] * (1.0 - fx) + x[[s, ch, y1, x1]] * fx;
                    out[[s, ch, i, j]] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
    }
    out
}

pub fn resize_bilinear_backward(dy: ArrayView4<f32>, h: usize, w: usize) -> Array4<f32> {
    let (n, c, oh, ow) = dy.dim();
    let ty = linear_taps(h, oh);
    let tx = linear_taps(w, ow);
    let mut dx = Array4::<f32>::zeros((n, c, h, w));
    for s in 0..n {
        for ch in 0..c {
            for (i, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (j, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let g = dy[[s, ch, i, j]];
                    dx[[s, ch, y0, x0]] += g * (1.0 - fy) * (1.0 - fx);
                    dx[[s, ch, y0, x1]] += g * (1.0 - fy) * fx;
                    dx[[s, ch, y1, x0]] += g * fy * (1.0 - fx);
                    dx[[s, ch, y1, x1]] += g * fy * fx;
                }
            }
        }
    }
    dx
}
