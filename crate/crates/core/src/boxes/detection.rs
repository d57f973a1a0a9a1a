use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scored, labelled axis-aligned box in original image pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub score: f64,
    pub label: String,
}

impl Detection {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64, score: f64, label: impl Into<String>) -> Result<Self> {
        let d = Self {
            x0,
            y0,
            x1,
            y1,
            score,
            label: label.into(),
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let coords = [self.x0, self.y0, self.x1, self.y1, self.score];
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidDetection("non-finite coordinate or score".into()));
        }
        if !(self.x0 < self.x1 && self.y0 < self.y1) {
            return Err(Error::InvalidDetection(format!(
                "box [{}, {}, {}, {}] is not ordered",
                self.x0, self.y0, self.x1, self.y1
            )));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::InvalidDetection(format!(
                "score {} outside [0, 1]",
                self.score
            )));
        }
        if self.label.trim().is_empty() {
            return Err(Error::InvalidDetection("empty label".into()));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    /// Box clipped to `[0, width] × [0, height]`; `None` when nothing is left.
    pub fn clipped(&self, width: f64, height: f64) -> Option<Detection> {
        let d = Detection {
            x0: self.x0.clamp(0.0, width),
            y0: self.y0.clamp(0.0, height),
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            score: self.score,
            label: self.label.clone(),
        };
        (d.x0 < d.x1 && d.y0 < d.y1).then_some(d)
    }
}

/// Intersection over union; zero when the union is empty.
pub fn iou(a: &Detection, b: &Detection) -> f64 {
    let iw = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let ih = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Mock,
    File,
    External,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionSet {
    pub image_id: String,
    pub detections: Vec<Detection>,
    pub provenance: Provenance,
}

impl DetectionSet {
    pub fn empty(image_id: impl Into<String>, provenance: Provenance) -> Self {
        Self {
            image_id: image_id.into(),
            detections: Vec::new(),
            provenance,
        }
    }

    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }

    pub fn to_box_file(&self) -> BoxFile {
        BoxFile {
            image_id: self.image_id.clone(),
            detections: self
                .detections
                .iter()
                .map(|d| BoxRecord {
                    bbox: [d.x0, d.y0, d.x1, d.y1],
                    score: d.score,
                    label: d.label.clone(),
                })
                .collect(),
        }
    }

    pub fn from_box_file(file: BoxFile) -> Result<Self> {
        let detections = file
            .detections
            .into_iter()
            .map(|r| {
                let [x0, y0, x1, y1] = r.bbox;
                Detection::new(x0, y0, x1, y1, r.score, r.label)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            image_id: file.image_id,
            detections,
            provenance: Provenance::File,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: BoxFile = serde_json::from_str(&text).map_err(|e| Error::Data {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        Self::from_box_file(file).map_err(|e| Error::Data {
            path: path.to_path_buf(),
            line: 0,
            msg: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.to_box_file())?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}

/// On-disk box file: `{"image_id": .., "detections": [{"box": [x0,y0,x1,y1], "score": s, "label": ..}]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxFile {
    pub image_id: String,
    pub detections: Vec<BoxRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxRecord {
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub score: f64,
    pub label: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(x0: f64, y0: f64, x1: f64, y1: f64) -> Detection {
        Detection::new(x0, y0, x1, y1, 0.5, "a").unwrap()
    }

    #[test]
    fn iou_reference_values() {
        let a = d(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &d(5.0, 5.0, 6.0, 6.0)), 0.0);
        let b = d(1.0, 1.0, 3.0, 3.0);
        assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-15);
        assert_eq!(iou(&a, &b), iou(&b, &a));
        // Touching edges share no area.
        assert_eq!(iou(&a, &d(2.0, 0.0, 4.0, 2.0)), 0.0);
    }

    #[test]
    fn rejects_malformed() {
        assert!(Detection::new(1.0, 0.0, 1.0, 2.0, 0.5, "a").is_err());
        assert!(Detection::new(0.0, 0.0, 1.0, 2.0, 1.5, "a").is_err());
        assert!(Detection::new(0.0, 0.0, 1.0, 2.0, 0.5, " ").is_err());
    }

    #[test]
    fn clipping() {
        let a = d(-5.0, 2.0, 12.0, 20.0).clipped(10.0, 10.0).unwrap();
        assert_eq!((a.x0, a.y0, a.x1, a.y1), (0.0, 2.0, 10.0, 10.0));
        assert!(d(11.0, 0.0, 12.0, 1.0).clipped(10.0, 10.0).is_none());
    }

    #[test]
    fn box_file_format() {
        let json = r#"{"image_id":"img-1","detections":[{"box":[1,2,3,4],"score":0.9,"label":"dog"}]}"#;
        let f: BoxFile = serde_json::from_str(json).unwrap();
        let set = DetectionSet::from_box_file(f.clone()).unwrap();
        assert_eq!(set.detections[0].x1, 3.0);
        assert_eq!(set.provenance, Provenance::File);
        assert_eq!(set.to_box_file(), f);
    }
}
