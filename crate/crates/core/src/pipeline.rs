//! Image and video inference: boxes → encoders → pyramid → RoI → assembly →
//! scoring or greedy decoding.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::autodiff::Tape;
use crate::boxes::{
    generate_boxes, BoxConfig, BoxRecord, DetectionSet, Detector, FileDetector, MockDetector, TagSource,
};
use crate::config::RunConfig;
use crate::encoders::SyntheticEncoders;
use crate::error::{Error, Result};
use crate::image::SyntheticImage;
use crate::model::{FrameInputs, ModelParams, SegmentCounts};
use crate::nn::FreezeMask;
use crate::objects::{build_pyramid, extract_object_features, MultiScalePyramid, RoiConfig};

/// Frozen features of one frame together with its boxes and pyramid.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedFrame {
    pub boxes: DetectionSet,
    pub pyramid: MultiScalePyramid,
    pub inputs: FrameInputs,
}

/// Encodes an image at both resolutions and pools one feature row per box.
pub fn encode_frame(
    encoders: &SyntheticEncoders,
    image: &SyntheticImage,
    boxes: DetectionSet,
    roi: &RoiConfig,
) -> Result<EncodedFrame> {
    let low = encoders.encode_low(image).map_err(|e| e.in_stage("encode"))?;
    let stages = encoders.encode_high(image).map_err(|e| e.in_stage("encode"))?;
    let last = stages.last().ok_or(Error::Empty("encoder produced no stages"))?;
    let e_high = last.flat()?;
    let pyramid = build_pyramid(&stages)
        .map_err(|e| e.in_stage("pyramid"))?
        .for_image(image.width() as f64, image.height() as f64);
    let objects = extract_object_features(&pyramid, &boxes, roi)
        .map_err(|e| e.in_stage("roi"))?
        .features;
    Ok(EncodedFrame {
        boxes,
        pyramid,
        inputs: FrameInputs {
            e_low: low.flat()?,
            e_high,
            objects,
        },
    })
}

/// Uniformly spaced frame indices: bin centres of `count` equal bins.
pub fn sample_frames(total: usize, count: usize) -> Vec<usize> {
    if total <= count {
        return (0..total).collect();
    }
    (0..count).map(|i| (2 * i + 1) * total / (2 * count)).collect()
}

/// Runs the box pipeline with either the scene mock or a precomputed set.
pub fn detect_boxes(
    image: &SyntheticImage,
    tags: &dyn TagSource,
    precomputed: Option<&DetectionSet>,
    seed: u64,
    cfg: &BoxConfig,
) -> Result<DetectionSet> {
    let detector: Box<dyn Detector> = match precomputed {
        Some(set) => Box::new(FileDetector::new(set.clone())),
        None => Box::new(MockDetector::new(seed)),
    };
    let mut set = generate_boxes(image, tags, detector.as_ref(), cfg)?;
    if let Some(pre) = precomputed {
        set.image_id = pre.image_id.clone();
    }
    Ok(set)
}

/// One input frame: pixels plus an optional precomputed box set.
#[derive(Clone, Debug)]
pub struct FrameSource {
    pub image: SyntheticImage,
    pub boxes: Option<DetectionSet>,
}

#[derive(Clone, Debug)]
pub enum Query {
    /// Teacher-forced NLL of the given answer.
    Score(Vec<usize>),
    /// Greedy continuation of this many tokens.
    Decode(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrameReport {
    pub image_id: String,
    pub k: usize,
    pub fused_tokens: usize,
    pub object_tokens: usize,
    pub boxes: Vec<BoxRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InferReport {
    pub config_hash: String,
    pub frames: Vec<FrameReport>,
    pub tokens: SegmentCounts,
    pub sequence_length: usize,
    pub degenerate: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nll: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decoded: Option<Vec<usize>>,
    /// SHA-256 of the report with `digest` empty and no timings.
    pub digest: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timings_ms: Option<BTreeMap<&'static str, f64>>,
}

#[derive(Default)]
struct Timer(BTreeMap<&'static str, f64>);

impl Timer {
    fn time<T>(&mut self, stage: &'static str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        *self.0.entry(stage).or_default() += start.elapsed().as_secs_f64() * 1e3;
        out
    }
}

/// Full inference over one or more frames; frames past `cfg.video_frames`
/// are subsampled uniformly.
pub fn infer(
    cfg: &RunConfig,
    params: &ModelParams,
    sources: &[FrameSource],
    tags: &(dyn TagSource + Sync),
    text: &[usize],
    query: &Query,
    timings: bool,
) -> Result<InferReport> {
    if sources.is_empty() {
        return Err(Error::Empty("infer: no input frames"));
    }
    let picked: Vec<&FrameSource> = sample_frames(sources.len(), cfg.video_frames)
        .into_iter()
        .map(|i| &sources[i])
        .collect();
    let mut timer = Timer::default();
    let boxes: Vec<DetectionSet> = timer.time("boxes", || {
        picked
            .par_iter()
            .map(|s| detect_boxes(&s.image, tags, s.boxes.as_ref(), cfg.seed, &cfg.boxes))
            .collect::<Result<_>>()
    })?;
    let encoded: Vec<EncodedFrame> = timer.time("encode", || {
        picked
            .par_iter()
            .zip(boxes)
            .map(|(s, b)| encode_frame(&params.encoders, &s.image, b, &cfg.roi))
            .collect::<Result<_>>()
    })?;
    let inputs: Vec<FrameInputs> = encoded.iter().map(|e| e.inputs.clone()).collect();
    let (seq, nll, decoded) = timer.time("assemble_score", || -> Result<_> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, &FreezeMask::frozen());
        let visual: Vec<_> = inputs.iter().map(|f| f.constant_on(&mut tape)).collect();
        let seq = params
            .prompt(&mut tape, &bound, &visual, text)
            .map_err(|e| e.in_stage("assemble"))?;
        match query {
            Query::Score(answer) => {
                let (nll, full) = params
                    .score_answer(&mut tape, &bound, &seq, answer)
                    .map_err(|e| e.in_stage("score"))?;
                Ok((full, Some(tape.value(nll).item()?), None))
            }
            Query::Decode(n) => {
                let ids = params
                    .greedy_decode(&inputs, text, *n)
                    .map_err(|e| e.in_stage("decode"))?;
                Ok((seq, None, Some(ids)))
            }
        }
    })?;
    let counts = seq.frame_counts();
    let frames = encoded
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let (fused, object) = counts.get(i).copied().unwrap_or_default();
            FrameReport {
                image_id: e.boxes.image_id.clone(),
                k: e.boxes.len(),
                fused_tokens: fused,
                object_tokens: object,
                boxes: e.boxes.to_box_file().detections,
            }
        })
        .collect();
    let mut report = InferReport {
        config_hash: cfg.hash(),
        frames,
        tokens: seq.counts(),
        sequence_length: seq.len(),
        degenerate: seq.degenerate,
        nll,
        decoded,
        digest: String::new(),
        timings_ms: None,
    };
    report.digest = hex::encode(Sha256::digest(serde_json::to_vec(&report)?));
    if timings {
        report.timings_ms = Some(timer.0);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::SceneTags;
    use crate::image::{SceneDescriptor, SceneObject};

    fn scene() -> SceneDescriptor {
        SceneDescriptor {
            seed: 11,
            width: 256,
            height: 256,
            objects: vec![
                SceneObject {
                    x0: 10.0,
                    y0: 10.0,
                    x1: 90.0,
                    y1: 80.0,
                    label: "dog".into(),
                },
                SceneObject {
                    x0: 120.0,
                    y0: 30.0,
                    x1: 240.0,
                    y1: 100.0,
                    label: "car".into(),
                },
                SceneObject {
                    x0: 40.0,
                    y0: 150.0,
                    x1: 200.0,
                    y1: 240.0,
                    label: "lamp".into(),
                },
            ],
        }
    }

    #[test]
    fn frame_sampling() {
        assert_eq!(sample_frames(3, 8), vec![0, 1, 2]);
        assert_eq!(sample_frames(16, 8), vec![1, 3, 5, 7, 9, 11, 13, 15]);
        assert_eq!(sample_frames(8, 8), (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn desk_infer_counts_tokens() {
        let cfg = RunConfig::desk();
        let params = cfg.init_params().unwrap();
        let src = FrameSource {
            image: SyntheticImage::render(&scene()).unwrap(),
            boxes: None,
        };
        let r = infer(
            &cfg,
            &params,
            std::slice::from_ref(&src),
            &SceneTags,
            &[3, 4],
            &Query::Score(vec![5]),
            true,
        )
        .unwrap();
        assert_eq!(r.tokens.fused, 64);
        assert_eq!(r.tokens.object, 3);
        assert_eq!(r.tokens.text, 2);
        assert_eq!(r.frames[0].k, 3);
        assert!(r.nll.unwrap() > 0.0);
        assert!(r.timings_ms.is_some());
        let again = infer(
            &cfg,
            &params,
            &[src],
            &SceneTags,
            &[3, 4],
            &Query::Score(vec![5]),
            false,
        )
        .unwrap();
        assert_eq!(again.digest, r.digest);
    }
}
