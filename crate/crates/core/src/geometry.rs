//! Index maps between pixel grids and patch sequences.
//!
//! Patch sequences are row-major over the patch grid; within a flattened
//! patch the layout is channel-major, then row, then column.

use std::sync::Arc;

use crate::autodiff::SparseMap;
use crate::error::Result;
use crate::scalar::Scalar;

/// Gather indices turning `[channels, h, w]` into `[(h/p)·(w/p), channels·p·p]`.
pub fn patchify_index(channels: usize, h: usize, w: usize, p: usize) -> Arc<[usize]> {
    let (gh, gw) = (h / p, w / p);
    let mut idx = Vec::with_capacity(channels * h * w);
    for py in 0..gh {
        for px in 0..gw {
            for c in 0..channels {
                for dy in 0..p {
                    for dx in 0..p {
                        idx.push(c * h * w + (py * p + dy) * w + px * p + dx);
                    }
                }
            }
        }
    }
    idx.into()
}

/// Gather indices merging each `r×r` block of a `[side·side, c]` token grid
/// into one token of width `r·r·c`. Block members are ordered row-major.
pub fn merge_index(side: usize, c: usize, r: usize) -> Arc<[usize]> {
    let out_side = side / r;
    let mut idx = Vec::with_capacity(side * side * c);
    for y in 0..out_side {
        for x in 0..out_side {
            for dy in 0..r {
                for dx in 0..r {
                    let token = (y * r + dy) * side + x * r + dx;
                    idx.extend((0..c).map(|k| token * c + k));
                }
            }
        }
    }
    idx.into()
}

/// Gather indices for nearest-neighbour upsampling of a `[side·side, c]`
/// token grid by an integer `factor`.
pub fn upsample_nearest_index(side: usize, c: usize, factor: usize) -> Arc<[usize]> {
    let out_side = side * factor;
    let mut idx = Vec::with_capacity(out_side * out_side * c);
    for y in 0..out_side {
        for x in 0..out_side {
            let token = (y / factor) * side + x / factor;
            idx.extend((0..c).map(|k| token * c + k));
        }
    }
    idx.into()
}

fn bilinear_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize (half-pixel centres, edge clamped) of a single-channel
/// `in_h×in_w` map to `out_h×out_w`, as a sparse linear map.
pub fn bilinear_map<S: Scalar>(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Result<SparseMap<S>> {
    let ty = bilinear_taps(out_h, in_h);
    let tx = bilinear_taps(out_w, in_w);
    let mut rows = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, wy) in &ty {
        for &(x0, x1, wx) in &tx {
            rows.push(vec![
                (y0 * in_w + x0, S::lit((1.0 - wy) * (1.0 - wx))),
                (y0 * in_w + x1, S::lit((1.0 - wy) * wx)),
                (y1 * in_w + x0, S::lit(wy * (1.0 - wx))),
                (y1 * in_w + x1, S::lit(wy * wx)),
            ]);
        }
    }
    SparseMap::from_rows(in_h * in_w, vec![1, out_h, out_w], rows)
}

/// Area-average pooling of a square single-channel map by `factor`; output
/// shape `[1, side/factor · side/factor]`.
pub fn area_pool_map<S: Scalar>(side: usize, factor: usize) -> Result<SparseMap<S>> {
    let out_side = side / factor;
    let w = S::lit(1.0 / (factor * factor) as f64);
    let rows = (0..out_side * out_side)
        .map(|o| {
            let (y, x) = (o / out_side, o % out_side);
            (0..factor * factor)
                .map(|k| ((y * factor + k / factor) * side + x * factor + k % factor, w))
                .collect()
        })
        .collect();
    SparseMap::from_rows(side * side, vec![1, out_side * out_side], rows)
}
