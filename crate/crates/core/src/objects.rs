//! Object-level features: a stride-4 multi-scale pyramid and RoI Align with
//! average pooling, one vector per detection.
//!
//! RoI Align here is quantization-free. A box in image pixels is scaled into
//! continuous pyramid coordinates, split into `bins_h × bins_w` bins, and each
//! bin averages `samples × samples` bilinear reads at regularly spaced
//! interior points. Sampling uses the half-pixel convention of
//! [`crate::sampling`].

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{SamplePlan, Tape, Var};
use crate::boxes::{Detection, DetectionSet};
use crate::encoders::FeatureGrid;
use crate::error::{Error, Result};
use crate::sampling::{bilinear_taps, resize_plan};
use crate::tensor::Tensor;

pub const PYRAMID_STRIDE: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoiConfig {
    pub bins_h: usize,
    pub bins_w: usize,
    pub samples: usize,
}

impl Default for RoiConfig {
    fn default() -> Self {
        Self {
            bins_h: 7,
            bins_w: 7,
            samples: 2,
        }
    }
}

impl RoiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bins_h == 0 || self.bins_w == 0 || self.samples == 0 {
            return Err(Error::Config("roi bins and samples must be positive".into()));
        }
        Ok(())
    }
}

/// All encoder stages resampled to stride 4 and concatenated on channels.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiScalePyramid {
    /// `gh × gw × ΣC_s`.
    pub grid: Tensor,
    /// Extent of the image that box coordinates refer to.
    pub image_width: f64,
    pub image_height: f64,
}

impl MultiScalePyramid {
    pub fn new(grid: Tensor, image_width: f64, image_height: f64) -> Result<Self> {
        grid.dims3()?;
        if !(image_width > 0.0 && image_height > 0.0) {
            return Err(Error::invalid("pyramid", "image extent must be positive"));
        }
        Ok(Self {
            grid,
            image_width,
            image_height,
        })
    }

    /// Re-targets box coordinates to an image of a different extent (the
    /// original image, when encoders saw a resized copy).
    pub fn for_image(mut self, width: f64, height: f64) -> Self {
        self.image_width = width;
        self.image_height = height;
        self
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.grid.dims3().expect("validated at construction")
    }

    pub fn channels(&self) -> usize {
        self.dims().2
    }

    /// `(gh·gw) × C` row view used by the sampling plans.
    pub fn rows(&self) -> Tensor {
        let (h, w, c) = self.dims();
        self.grid.reshape(vec![h * w, c]).expect("same element count")
    }
}

/// Upsamples every stage to the stride-4 grid and concatenates channels in
/// stride order. Stages must have strides 4, 8, 16, … with no gaps.
pub fn build_pyramid(stages: &[FeatureGrid]) -> Result<MultiScalePyramid> {
    let first = stages
        .first()
        .ok_or_else(|| Error::invalid("build_pyramid", "no stages"))?;
    let extent = first.source_extent;
    if extent % PYRAMID_STRIDE != 0 {
        return Err(Error::invalid(
            "build_pyramid",
            format!("source extent {extent} not divisible by {PYRAMID_STRIDE}"),
        ));
    }
    let g = extent / PYRAMID_STRIDE;
    let mut parts = Vec::with_capacity(stages.len());
    for (i, st) in stages.iter().enumerate() {
        let want = PYRAMID_STRIDE << i;
        if st.stride != want {
            return Err(Error::invalid(
                "build_pyramid",
                format!("missing stage: expected stride {want}, found {}", st.stride),
            ));
        }
        let (h, w) = st
            .spatial_dims()
            .ok_or_else(|| Error::invalid("build_pyramid", "stage is not spatial"))?;
        if h * st.stride != extent || w * st.stride != extent || st.source_extent != extent {
            return Err(Error::invalid(
                "build_pyramid",
                format!("stage at stride {} has extent {h}x{w}", st.stride),
            ));
        }
        let rows = st.flat()?;
        let up = if (h, w) == (g, g) {
            rows
        } else {
            resize_plan(h, w, g, g).apply(&rows)?
        };
        parts.push(up);
    }
    let c_total: usize = parts.iter().map(|p| p.shape()[1]).sum();
    let mut data = Vec::with_capacity(g * g * c_total);
    for r in 0..g * g {
        for p in &parts {
            data.extend_from_slice(p.row(r));
        }
    }
    MultiScalePyramid::new(
        Tensor::new(vec![g, g, c_total], data)?,
        extent as f64,
        extent as f64,
    )
}

/// Box clipped to the image, in continuous pyramid coordinates
/// `(y0, x0, y1, x1)`.
fn pyramid_box(pyr: &MultiScalePyramid, det: &Detection, index: usize) -> Result<[f64; 4]> {
    let clipped = det
        .clipped(pyr.image_width, pyr.image_height)
        .ok_or(Error::DegenerateBox { index })?;
    let (gh, gw, _) = pyr.dims();
    let sy = gh as f64 / pyr.image_height;
    let sx = gw as f64 / pyr.image_width;
    Ok([clipped.y0 * sy, clipped.x0 * sx, clipped.y1 * sy, clipped.x1 * sx])
}

/// One plan row per bin (row-major over `bins_h × bins_w`).
pub fn roi_plan(
    pyr: &MultiScalePyramid,
    det: &Detection,
    cfg: &RoiConfig,
    index: usize,
) -> Result<SamplePlan> {
    cfg.validate()?;
    let [y0, x0, y1, x1] = pyramid_box(pyr, det, index)?;
    let (gh, gw, _) = pyr.dims();
    let bin_h = (y1 - y0) / cfg.bins_h as f64;
    let bin_w = (x1 - x0) / cfg.bins_w as f64;
    let s = cfg.samples;
    let norm = 1.0 / (s * s) as f64;
    let mut rows = Vec::with_capacity(cfg.bins_h * cfg.bins_w);
    for by in 0..cfg.bins_h {
        for bx in 0..cfg.bins_w {
            let mut taps = Vec::with_capacity(4 * s * s);
            for iy in 0..s {
                let y = y0 + (by as f64 + (iy as f64 + 0.5) / s as f64) * bin_h;
                for ix in 0..s {
                    let x = x0 + (bx as f64 + (ix as f64 + 0.5) / s as f64) * bin_w;
                    for (cell, w) in bilinear_taps(y - 0.5, x - 0.5, gh, gw) {
                        taps.push((cell, w * norm));
                    }
                }
            }
            rows.push(taps);
        }
    }
    Ok(SamplePlan { rows })
}

/// RoI Align for one box: `bins_h × bins_w × C`.
pub fn roi_align(pyr: &MultiScalePyramid, det: &Detection, cfg: &RoiConfig) -> Result<Tensor> {
    let plan = roi_plan(pyr, det, cfg, 0)?;
    plan.apply(&pyr.rows())?
        .reshape(vec![cfg.bins_h, cfg.bins_w, pyr.channels()])
}

/// Per-object features `E_B` (`k × C`) on the tape: RoI Align, average pool
/// over bins, rows stacked in detection order.
pub fn object_features_var(
    tape: &mut Tape,
    pyramid_rows: Var,
    pyr: &MultiScalePyramid,
    dets: &DetectionSet,
    cfg: &RoiConfig,
) -> Result<Var> {
    if dets.is_empty() {
        return Ok(tape.constant(Tensor::zeros(vec![0, pyr.channels()])));
    }
    let mut rows = Vec::with_capacity(dets.len());
    for (i, det) in dets.detections.iter().enumerate() {
        let plan = roi_plan(pyr, det, cfg, i)?;
        let bins = tape.sample(pyramid_rows, Arc::new(plan))?;
        rows.push(tape.avg_pool_rows(bins)?);
    }
    tape.concat(&rows, 0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectFeatureSet {
    /// `k × C`, row `i` for detection `i`.
    pub features: Tensor,
}

impl ObjectFeatureSet {
    pub fn k(&self) -> usize {
        self.features.shape()[0]
    }
}

pub fn extract_object_features(
    pyr: &MultiScalePyramid,
    dets: &DetectionSet,
    cfg: &RoiConfig,
) -> Result<ObjectFeatureSet> {
    let mut tape = Tape::new();
    let rows = tape.constant(pyr.rows());
    let out = object_features_var(&mut tape, rows, pyr, dets, cfg)?;
    Ok(ObjectFeatureSet {
        features: tape.value(out).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::Provenance;
    use crate::encoders::Layout;
    use crate::rng::{uniform, SeedTree};

    fn stage(h: usize, c: usize, stride: usize, value: impl Fn(usize) -> f64) -> FeatureGrid {
        FeatureGrid {
            tokens: Tensor::from_fn(vec![h, h, c], value),
            stride,
            layout: Layout::Spatial { h, w: h },
            source_extent: h * stride,
        }
    }

    fn det(x0: f64, y0: f64, x1: f64, y1: f64) -> Detection {
        Detection::new(x0, y0, x1, y1, 0.9, "a").unwrap()
    }

    #[test]
    fn single_stride4_stage_is_identity() {
        let s = stage(6, 3, 4, |i| i as f64);
        let pyr = build_pyramid(std::slice::from_ref(&s)).unwrap();
        assert_eq!(pyr.grid, s.tokens);
    }

    #[test]
    fn constant_stages_give_constant_pyramid() {
        let stages = vec![
            stage(8, 2, 4, |_| 0.5),
            stage(4, 3, 8, |_| 0.5),
            stage(2, 1, 16, |_| 0.5),
            stage(1, 4, 32, |_| 0.5),
        ];
        let pyr = build_pyramid(&stages).unwrap();
        assert_eq!(pyr.dims(), (8, 8, 10));
        assert!(pyr.grid.data().iter().all(|v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn missing_stage_rejected() {
        let stages = vec![stage(8, 2, 4, |_| 0.0), stage(2, 1, 16, |_| 0.0)];
        assert!(build_pyramid(&stages).is_err());
        assert!(build_pyramid(&[]).is_err());
    }

    #[test]
    fn box_on_one_cell_reads_that_cell() {
        let s = stage(5, 2, 4, |i| i as f64 * 0.1);
        let pyr = build_pyramid(std::slice::from_ref(&s)).unwrap();
        let cfg = RoiConfig {
            bins_h: 1,
            bins_w: 1,
            samples: 1,
        };
        // Cell (row 2, col 3) spans image pixels [12, 16) × [8, 12).
        let out = roi_align(&pyr, &det(12.0, 8.0, 16.0, 12.0), &cfg).unwrap();
        let cell = (2 * 5 + 3) * 2;
        assert_eq!(out.data(), &s.tokens.data()[cell..cell + 2]);
    }

    #[test]
    fn degenerate_box_error_carries_index() {
        let pyr = build_pyramid(&[stage(4, 1, 4, |_| 1.0)]).unwrap();
        let dets = DetectionSet {
            image_id: "x".into(),
            detections: vec![det(1.0, 1.0, 5.0, 5.0), det(20.0, 20.0, 30.0, 30.0)],
            provenance: Provenance::File,
        };
        let err = extract_object_features(&pyr, &dets, &RoiConfig::default()).unwrap_err();
        assert!(matches!(err, Error::DegenerateBox { index: 1 }));
    }

    #[test]
    fn empty_detections_give_empty_features() {
        let pyr = build_pyramid(&[stage(4, 3, 4, |_| 1.0)]).unwrap();
        let out = extract_object_features(
            &pyr,
            &DetectionSet::empty("x", Provenance::Mock),
            &RoiConfig::default(),
        )
        .unwrap();
        assert_eq!(out.features.shape(), &[0, 3]);
        assert_eq!(out.k(), 0);
    }

    #[test]
    fn full_image_box_on_constant_pyramid() {
        let pyr = build_pyramid(&[stage(6, 4, 4, |_| -2.5)]).unwrap();
        let dets = DetectionSet {
            image_id: "x".into(),
            detections: vec![det(0.0, 0.0, 24.0, 24.0)],
            provenance: Provenance::File,
        };
        let out = extract_object_features(&pyr, &dets, &RoiConfig::default()).unwrap();
        assert_eq!(out.features.shape(), &[1, 4]);
        assert!(out.features.data().iter().all(|v| (v + 2.5).abs() < 1e-12));
    }

    #[test]
    fn pooled_values_within_local_range() {
        let mut rng = SeedTree::new(2).stream("pyr");
        let grid = uniform(&mut rng, vec![10, 10, 1], 1.0);
        let pyr = MultiScalePyramid::new(grid.clone(), 40.0, 40.0).unwrap();
        let b = det(6.0, 10.0, 22.0, 30.0);
        let dets = DetectionSet {
            image_id: "x".into(),
            detections: vec![b],
            provenance: Provenance::File,
        };
        let v = extract_object_features(&pyr, &dets, &RoiConfig::default())
            .unwrap()
            .features
            .data()[0];
        // Samples fall inside cells rows 2..8, cols 1..6 (array coordinates).
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for r in 2..8 {
            for c in 1..6 {
                lo = lo.min(grid.data()[r * 10 + c]);
                hi = hi.max(grid.data()[r * 10 + c]);
            }
        }
        assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
    }
}
