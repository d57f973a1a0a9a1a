//! Bilinear sampling on row-major `h × w` grids.
//!
//! One convention is used everywhere (image resize, pyramid upsampling and
//! RoI Align): grid cell `i` holds the value at continuous coordinate
//! `i + 0.5`, so a destination cell `d` of an `out`-long axis resampled from
//! an `in`-long axis reads source coordinate
//!
//! ```text
//! src = (d + 0.5) * in / out - 0.5
//! ```
//!
//! and sample coordinates are clamped to `[0, extent - 1]` before the two
//! neighbouring cells are blended. This is the `align_corners = false`
//! convention without antialiasing.

use crate::autodiff::SamplePlan;

/// Source coordinate (array units) read by destination index `d`.
pub fn source_coord(d: usize, in_extent: usize, out_extent: usize) -> f64 {
    (d as f64 + 0.5) * in_extent as f64 / out_extent as f64 - 0.5
}

/// Neighbour indices and weights along one axis for array coordinate `c`.
fn axis_taps(c: f64, extent: usize) -> [(usize, f64); 2] {
    let c = c.clamp(0.0, (extent - 1) as f64);
    let lo = c.floor() as usize;
    let hi = (lo + 1).min(extent - 1);
    let frac = c - lo as f64;
    [(lo, 1.0 - frac), (hi, frac)]
}

/// Bilinear taps for array coordinate `(y, x)` on an `h × w` grid, as
/// `(row-major cell index, weight)` pairs. Zero-weight taps are dropped.
pub fn bilinear_taps(y: f64, x: f64, h: usize, w: usize) -> Vec<(usize, f64)> {
    let ys = axis_taps(y, h);
    let xs = axis_taps(x, w);
    let mut taps = Vec::with_capacity(4);
    for &(yi, wy) in &ys {
        for &(xi, wx) in &xs {
            let wgt = wy * wx;
            if wgt != 0.0 {
                taps.push((yi * w + xi, wgt));
            }
        }
    }
    taps
}

/// Plan resampling an `in_h × in_w` grid to `out_h × out_w`.
pub fn resize_plan(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> SamplePlan {
    let mut rows = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let sy = source_coord(oy, in_h, out_h);
        for ox in 0..out_w {
            let sx = source_coord(ox, in_w, out_w);
            rows.push(bilinear_taps(sy, sx, in_h, in_w));
        }
    }
    SamplePlan { rows }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_resize_is_exact() {
        let plan = resize_plan(3, 5, 3, 5);
        for (i, taps) in plan.rows.iter().enumerate() {
            assert_eq!(taps, &vec![(i, 1.0)]);
        }
    }

    #[test]
    fn weights_sum_to_one() {
        let plan = resize_plan(4, 7, 13, 9);
        for taps in &plan.rows {
            let s: f64 = taps.iter().map(|t| t.1).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_by_two_midpoints() {
        // Output 1 of a 2→4 upsample reads source 0.25.
        assert_eq!(source_coord(1, 2, 4), 0.25);
        assert_eq!(source_coord(0, 2, 4), -0.25);
    }
}
