use std::cmp::Ordering;

use super::detection::{iou, Detection, DetectionSet};

/// Priority order: score descending, then `x0`, `y0`, input index ascending.
pub fn priority(dets: &[Detection], a: usize, b: usize) -> Ordering {
    let (da, db) = (&dets[a], &dets[b]);
    db.score
        .total_cmp(&da.score)
        .then(da.x0.total_cmp(&db.x0))
        .then(da.y0.total_cmp(&db.y0))
        .then(a.cmp(&b))
}

/// Greedy non-maximum suppression. Returns surviving input indices in
/// priority order. A candidate is suppressed when its IoU with an already
/// kept box is strictly greater than `iou_threshold`; with `class_aware`
/// only same-label pairs interact.
pub fn nms_indices(dets: &[Detection], iou_threshold: f64, class_aware: bool) -> Vec<usize> {
    debug_assert!(iou_threshold > 0.0 && iou_threshold <= 1.0);
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| priority(dets, a, b));
    let mut suppressed = vec![false; dets.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if suppressed[j] {
                continue;
            }
            if class_aware && dets[i].label != dets[j].label {
                continue;
            }
            if iou(&dets[i], &dets[j]) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}

pub fn nms(set: &DetectionSet, iou_threshold: f64, class_aware: bool) -> DetectionSet {
    let keep = nms_indices(&set.detections, iou_threshold, class_aware);
    DetectionSet {
        image_id: set.image_id.clone(),
        detections: keep.into_iter().map(|i| set.detections[i].clone()).collect(),
        provenance: set.provenance,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::Provenance;

    fn det(x0: f64, y0: f64, x1: f64, y1: f64, score: f64, label: &str) -> Detection {
        Detection::new(x0, y0, x1, y1, score, label).unwrap()
    }

    #[test]
    fn single_and_empty() {
        assert!(nms_indices(&[], 0.5, true).is_empty());
        assert_eq!(
            nms_indices(&[det(0.0, 0.0, 1.0, 1.0, 0.3, "a")], 0.5, true),
            vec![0]
        );
    }

    #[test]
    fn identical_boxes_keep_best() {
        let d = vec![
            det(0.0, 0.0, 4.0, 4.0, 0.8, "a"),
            det(0.0, 0.0, 4.0, 4.0, 0.9, "a"),
        ];
        assert_eq!(nms_indices(&d, 0.5, true), vec![1]);
    }

    #[test]
    fn class_aware_keeps_other_labels() {
        let d = vec![
            det(0.0, 0.0, 4.0, 4.0, 0.9, "a"),
            det(0.0, 0.0, 4.0, 4.0, 0.8, "b"),
        ];
        assert_eq!(nms_indices(&d, 0.5, true), vec![0, 1]);
        assert_eq!(nms_indices(&d, 0.5, false), vec![0]);
    }

    #[test]
    fn ties_break_by_position_then_index() {
        let d = vec![
            det(2.0, 0.0, 6.0, 4.0, 0.5, "a"),
            det(0.0, 0.0, 4.0, 4.0, 0.5, "a"),
            det(0.0, 0.0, 4.0, 4.0, 0.5, "a"),
        ];
        // IoU(0, 1) = 1/3, below the threshold, so box 0 survives too.
        assert_eq!(nms_indices(&d, 0.5, true), vec![1, 0]);
    }

    #[test]
    fn threshold_is_strict() {
        // IoU exactly 0.5: kept.
        let d = vec![
            det(0.0, 0.0, 4.0, 3.0, 0.9, "a"),
            det(0.0, 0.0, 4.0, 1.5, 0.8, "a"),
        ];
        assert_eq!(nms_indices(&d, 0.5, true), vec![0, 1]);
    }

    #[test]
    fn set_wrapper_preserves_metadata() {
        let set = DetectionSet {
            image_id: "x".into(),
            detections: vec![
                det(0.0, 0.0, 1.0, 1.0, 0.2, "a"),
                det(0.0, 0.0, 1.0, 1.0, 0.7, "a"),
            ],
            provenance: Provenance::Mock,
        };
        let out = nms(&set, 0.5, true);
        assert_eq!(out.image_id, "x");
        assert_eq!(out.detections.len(), 1);
        assert_eq!(out.detections[0].score, 0.7);
    }
}
