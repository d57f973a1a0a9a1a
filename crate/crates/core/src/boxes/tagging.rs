//! Tag sources and detectors.
//!
//! The tagger decides which labels the detector is asked about; the detector
//! turns (image, labels) into scored proposals. Real taggers and
//! open-vocabulary detectors are out of reach here, so the detector side has a
//! scene-driven mock and a box-file reader.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::detection::{Detection, DetectionSet, Provenance};
use crate::error::{Error, Result};
use crate::image::SyntheticImage;
use crate::rng::SeedTree;

pub const COCO80: [&str; 80] = [
    "person",
    "bicycle",
    "car",
    "motorcycle",
    "airplane",
    "bus",
    "train",
    "truck",
    "boat",
    "traffic light",
    "fire hydrant",
    "stop sign",
    "parking meter",
    "bench",
    "bird",
    "cat",
    "dog",
    "horse",
    "sheep",
    "cow",
    "elephant",
    "bear",
    "zebra",
    "giraffe",
    "backpack",
    "umbrella",
    "handbag",
    "tie",
    "suitcase",
    "frisbee",
    "skis",
    "snowboard",
    "sports ball",
    "kite",
    "baseball bat",
    "baseball glove",
    "skateboard",
    "surfboard",
    "tennis racket",
    "bottle",
    "wine glass",
    "cup",
    "fork",
    "knife",
    "spoon",
    "bowl",
    "banana",
    "apple",
    "sandwich",
    "orange",
    "broccoli",
    "carrot",
    "hot dog",
    "pizza",
    "donut",
    "cake",
    "chair",
    "couch",
    "potted plant",
    "bed",
    "dining table",
    "toilet",
    "tv",
    "laptop",
    "mouse",
    "remote",
    "keyboard",
    "cell phone",
    "microwave",
    "oven",
    "toaster",
    "sink",
    "refrigerator",
    "book",
    "clock",
    "vase",
    "scissors",
    "teddy bear",
    "hair drier",
    "toothbrush",
];

pub trait TagSource {
    /// Labels to query the detector with for this image.
    fn tags(&self, image: &SyntheticImage) -> Result<Vec<String>>;
}

/// Trims, drops empties and removes duplicates keeping first occurrence.
pub fn normalize_tags<I, S>(tags: I) -> Vec<String>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut out: Vec<String> = Vec::new();
    for t in tags {
        let t = t.as_ref().trim();
        if !t.is_empty() && !out.iter().any(|o| o == t) {
            out.push(t.to_string());
        }
    }
    out
}

/// Fixed tag list applied to every image.
#[derive(Clone, Debug, PartialEq)]
pub struct FixedTags {
    tags: Vec<String>,
}

impl FixedTags {
    pub fn new<I, S>(tags: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Self {
            tags: normalize_tags(tags),
        }
    }

    pub fn coco80() -> Self {
        Self::new(COCO80)
    }

    /// One tag per line, or a JSON array of strings.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if text.trim_start().starts_with('[') {
            let tags: Vec<String> = serde_json::from_str(&text).map_err(|e| Error::Data {
                path: path.to_path_buf(),
                line: e.line(),
                msg: e.to_string(),
            })?;
            Ok(Self::new(tags))
        } else {
            Ok(Self::new(text.lines()))
        }
    }
}

impl TagSource for FixedTags {
    fn tags(&self, _image: &SyntheticImage) -> Result<Vec<String>> {
        Ok(self.tags.clone())
    }
}

/// Ground-truth labels from the image's scene descriptor.
#[derive(Clone, Copy, Debug, Default)]
pub struct SceneTags;

impl TagSource for SceneTags {
    fn tags(&self, image: &SyntheticImage) -> Result<Vec<String>> {
        Ok(image
            .scene()
            .map(|s| normalize_tags(s.labels()))
            .unwrap_or_default())
    }
}

/// `--tags` selector: `synthetic`, `coco80` or `file:PATH`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub enum TagSpec {
    #[default]
    Synthetic,
    Coco80,
    File(PathBuf),
}

impl TagSpec {
    pub fn build(&self) -> Result<Box<dyn TagSource + Send + Sync>> {
        Ok(match self {
            TagSpec::Synthetic => Box::new(SceneTags),
            TagSpec::Coco80 => Box::new(FixedTags::coco80()),
            TagSpec::File(p) => Box::new(FixedTags::load(p)?),
        })
    }
}

impl FromStr for TagSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(TagSpec::Synthetic),
            "coco80" => Ok(TagSpec::Coco80),
            _ => match s.strip_prefix("file:") {
                Some(p) if !p.is_empty() => Ok(TagSpec::File(PathBuf::from(p))),
                _ => Err(Error::Config(format!(
                    "unknown tag source `{s}` (expected synthetic, coco80 or file:PATH)"
                ))),
            },
        }
    }
}

impl fmt::Display for TagSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TagSpec::Synthetic => f.write_str("synthetic"),
            TagSpec::Coco80 => f.write_str("coco80"),
            TagSpec::File(p) => write!(f, "file:{}", p.display()),
        }
    }
}

impl Serialize for TagSpec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TagSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub trait Detector {
    fn detect(&self, image: &SyntheticImage, labels: &[String]) -> Result<Vec<Detection>>;

    fn provenance(&self) -> Provenance;
}

/// Scene-driven stand-in for an open-vocabulary detector.
///
/// For every ground-truth object whose label was asked for it emits the exact
/// box, plus `duplicates` jittered copies at lower scores, plus `noise`
/// low-score proposals below the default score floor.
#[derive(Clone, Debug, PartialEq)]
pub struct MockDetector {
    pub seed: u64,
    pub duplicates: usize,
    pub noise: usize,
    /// Maximum edge jitter of duplicates, as a fraction of the box side.
    pub jitter: f64,
}

impl MockDetector {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            duplicates: 2,
            noise: 3,
            jitter: 0.02,
        }
    }
}

impl Detector for MockDetector {
    fn detect(&self, image: &SyntheticImage, labels: &[String]) -> Result<Vec<Detection>> {
        let scene = image
            .scene()
            .ok_or_else(|| Error::Detector("mock detector needs a scene descriptor".into()))?;
        let mut rng = SeedTree::new(self.seed).stream(&format!("detector.mock.{}", scene.seed));
        let (w, h) = (scene.width as f64, scene.height as f64);
        let mut out = Vec::new();
        for obj in scene.objects.iter().filter(|o| labels.contains(&o.label)) {
            let score = rng.gen_range(0.8..0.99);
            let gt = Detection::new(obj.x0, obj.y0, obj.x1, obj.y1, score, obj.label.clone())?;
            let Some(gt) = gt.clipped(w, h) else { continue };
            for _ in 0..self.duplicates {
                let jx = self.jitter * gt.width();
                let jy = self.jitter * gt.height();
                let dup = Detection {
                    x0: gt.x0 + rng.gen_range(-jx..=jx),
                    y0: gt.y0 + rng.gen_range(-jy..=jy),
                    x1: gt.x1 + rng.gen_range(-jx..=jx),
                    y1: gt.y1 + rng.gen_range(-jy..=jy),
                    score: score * rng.gen_range(0.5..0.95),
                    label: gt.label.clone(),
                };
                if let Some(dup) = dup.clipped(w, h) {
                    out.push(dup);
                }
            }
            out.push(gt);
        }
        if !labels.is_empty() {
            for _ in 0..self.noise {
                let bw = rng.gen_range(0.05..0.3) * w;
                let bh = rng.gen_range(0.05..0.3) * h;
                let x0 = rng.gen_range(0.0..w - bw);
                let y0 = rng.gen_range(0.0..h - bh);
                let label = labels[rng.gen_range(0..labels.len())].clone();
                out.push(Detection::new(
                    x0,
                    y0,
                    x0 + bw,
                    y0 + bh,
                    rng.gen_range(0.0..0.04),
                    label,
                )?);
            }
        }
        Ok(out)
    }

    fn provenance(&self) -> Provenance {
        Provenance::Mock
    }
}

/// Detector backed by a precomputed box file; returns the boxes whose label
/// was asked for.
#[derive(Clone, Debug, PartialEq)]
pub struct FileDetector {
    set: DetectionSet,
}

impl FileDetector {
    pub fn new(set: DetectionSet) -> Self {
        Self { set }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::new(DetectionSet::load(path)?))
    }

    pub fn image_id(&self) -> &str {
        &self.set.image_id
    }
}

impl Detector for FileDetector {
    fn detect(&self, _image: &SyntheticImage, labels: &[String]) -> Result<Vec<Detection>> {
        Ok(self
            .set
            .detections
            .iter()
            .filter(|d| labels.contains(&d.label))
            .cloned()
            .collect())
    }

    fn provenance(&self) -> Provenance {
        Provenance::File
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{SceneDescriptor, SceneObject};

    #[test]
    fn tag_spec_parsing() {
        assert_eq!("coco80".parse::<TagSpec>().unwrap(), TagSpec::Coco80);
        assert_eq!(
            "file:/tmp/t.txt".parse::<TagSpec>().unwrap(),
            TagSpec::File("/tmp/t.txt".into())
        );
        assert!("file:".parse::<TagSpec>().is_err());
        assert!("ram".parse::<TagSpec>().is_err());
        let json = serde_json::to_string(&TagSpec::Coco80).unwrap();
        assert_eq!(json, "\"coco80\"");
    }

    #[test]
    fn tags_are_deduplicated() {
        let t = FixedTags::new(["dog", " dog", "", "cat"]);
        let img = SyntheticImage::noise(0, 4, 4).unwrap();
        assert_eq!(t.tags(&img).unwrap(), vec!["dog", "cat"]);
        assert_eq!(FixedTags::coco80().tags(&img).unwrap().len(), 80);
    }

    #[test]
    fn mock_only_emits_requested_labels() {
        let scene = SceneDescriptor {
            seed: 3,
            width: 100,
            height: 100,
            objects: vec![
                SceneObject {
                    x0: 10.0,
                    y0: 10.0,
                    x1: 40.0,
                    y1: 40.0,
                    label: "dog".into(),
                },
                SceneObject {
                    x0: 50.0,
                    y0: 50.0,
                    x1: 90.0,
                    y1: 80.0,
                    label: "lamp".into(),
                },
            ],
        };
        let img = SyntheticImage::render(&scene).unwrap();
        let det = MockDetector::new(1);
        let out = det.detect(&img, &["dog".to_string()]).unwrap();
        assert!(out.iter().all(|d| d.label == "dog"));
        assert!(out.iter().any(|d| d.x0 == 10.0 && d.x1 == 40.0));
        assert!(det.detect(&img, &[]).unwrap().is_empty());
        let plain = SyntheticImage::new(img.pixels().clone()).unwrap();
        assert!(det.detect(&plain, &["dog".to_string()]).is_err());
    }
}
