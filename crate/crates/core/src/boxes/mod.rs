//! Box generation: tag → detect → score floor → NMS → cap.

mod detection;
mod nms;
mod stats;
mod tagging;

pub use detection::{iou, BoxFile, BoxRecord, Detection, DetectionSet, Provenance};
pub use nms::{nms, nms_indices, priority};
pub use stats::{box_stats, BoxHistogram, BIN_LABELS};
pub use tagging::{
    normalize_tags, Detector, FileDetector, FixedTags, MockDetector, SceneTags, TagSource, TagSpec, COCO80,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::SyntheticImage;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoxConfig {
    pub nms_iou: f64,
    pub score_floor: f64,
    pub max_boxes: usize,
    pub class_aware: bool,
    pub tags: TagSpec,
}

impl Default for BoxConfig {
    fn default() -> Self {
        Self {
            nms_iou: 0.5,
            score_floor: 0.05,
            max_boxes: 100,
            class_aware: true,
            tags: TagSpec::Synthetic,
        }
    }
}

impl BoxConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.nms_iou > 0.0 && self.nms_iou <= 1.0) {
            return Err(Error::Config(format!(
                "boxes.nms_iou {} must lie in (0, 1]",
                self.nms_iou
            )));
        }
        if !(0.0..=1.0).contains(&self.score_floor) {
            return Err(Error::Config(format!(
                "boxes.score_floor {} must lie in [0, 1]",
                self.score_floor
            )));
        }
        Ok(())
    }
}

pub fn image_id(image: &SyntheticImage) -> String {
    match image.scene() {
        Some(s) => format!("scene-{}", s.seed),
        None => "image".to_string(),
    }
}

/// Runs the full box pipeline on one image. Output is score-descending and
/// holds at most `cfg.max_boxes` detections.
pub fn generate_boxes(
    image: &SyntheticImage,
    tags: &dyn TagSource,
    detector: &dyn Detector,
    cfg: &BoxConfig,
) -> Result<DetectionSet> {
    cfg.validate()?;
    let id = image_id(image);
    let labels = tags.tags(image).map_err(|e| e.in_stage("tag"))?;
    if labels.is_empty() {
        return Ok(DetectionSet::empty(id, detector.provenance()));
    }
    let proposals = detector
        .detect(image, &labels)
        .map_err(|e| e.in_stage("detect"))?;
    let (w, h) = (image.width() as f64, image.height() as f64);
    let mut kept = Vec::with_capacity(proposals.len());
    for p in proposals {
        p.validate().map_err(|e| e.in_stage("detect"))?;
        if p.score < cfg.score_floor {
            continue;
        }
        if let Some(c) = p.clipped(w, h) {
            kept.push(c);
        }
    }
    let filtered = DetectionSet {
        image_id: id,
        detections: kept,
        provenance: detector.provenance(),
    };
    let mut out = nms(&filtered, cfg.nms_iou, cfg.class_aware);
    out.detections.truncate(cfg.max_boxes);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{SceneDescriptor, SceneObject};

    struct Failing;

    impl Detector for Failing {
        fn detect(&self, _: &SyntheticImage, _: &[String]) -> Result<Vec<Detection>> {
            Err(Error::Detector("offline".into()))
        }

        fn provenance(&self) -> Provenance {
            Provenance::External
        }
    }

    fn three_object_scene() -> SceneDescriptor {
        SceneDescriptor {
            seed: 21,
            width: 200,
            height: 160,
            objects: vec![
                SceneObject {
                    x0: 5.0,
                    y0: 5.0,
                    x1: 60.0,
                    y1: 50.0,
                    label: "dog".into(),
                },
                SceneObject {
                    x0: 100.0,
                    y0: 20.0,
                    x1: 190.0,
                    y1: 70.0,
                    label: "lamp".into(),
                },
                SceneObject {
                    x0: 30.0,
                    y0: 90.0,
                    x1: 120.0,
                    y1: 150.0,
                    label: "car".into(),
                },
            ],
        }
    }

    #[test]
    fn recovers_ground_truth_boxes() {
        let scene = three_object_scene();
        let img = SyntheticImage::render(&scene).unwrap();
        let set = generate_boxes(&img, &SceneTags, &MockDetector::new(4), &BoxConfig::default()).unwrap();
        assert_eq!(set.len(), 3);
        for obj in &scene.objects {
            let gt = Detection::new(obj.x0, obj.y0, obj.x1, obj.y1, 1.0, obj.label.clone()).unwrap();
            let best = set.detections.iter().map(|d| iou(d, &gt)).fold(0.0, f64::max);
            assert!(best >= 0.99, "{}: {best}", obj.label);
        }
        assert!(set.detections.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn coco_tags_miss_non_coco_objects() {
        let img = SyntheticImage::render(&three_object_scene()).unwrap();
        let set = generate_boxes(
            &img,
            &FixedTags::coco80(),
            &MockDetector::new(4),
            &BoxConfig::default(),
        )
        .unwrap();
        let labels: Vec<&str> = set.detections.iter().map(|d| d.label.as_str()).collect();
        assert_eq!(set.len(), 2);
        assert!(!labels.contains(&"lamp"));
    }

    #[test]
    fn empty_tags_give_empty_set() {
        let img = SyntheticImage::render(&three_object_scene()).unwrap();
        let none = FixedTags::new(Vec::<String>::new());
        let set = generate_boxes(&img, &none, &MockDetector::new(4), &BoxConfig::default()).unwrap();
        assert!(set.is_empty());
    }

    #[test]
    fn detector_failure_names_stage() {
        let img = SyntheticImage::render(&three_object_scene()).unwrap();
        let err = generate_boxes(&img, &SceneTags, &Failing, &BoxConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Stage { stage: "detect", .. }));
        assert!(err.to_string().contains("offline"));
    }

    #[test]
    fn cap_truncates_by_score() {
        let img = SyntheticImage::render(&three_object_scene()).unwrap();
        let cfg = BoxConfig {
            max_boxes: 1,
            ..BoxConfig::default()
        };
        let all = generate_boxes(&img, &SceneTags, &MockDetector::new(4), &BoxConfig::default()).unwrap();
        let one = generate_boxes(&img, &SceneTags, &MockDetector::new(4), &cfg).unwrap();
        assert_eq!(one.detections, all.detections[..1]);
    }
}
