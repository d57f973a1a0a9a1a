use mgflow::boxes::{iou, nms_indices};
use mgflow::pipeline::sample_frames;
use mgflow::Detection;
use proptest::prelude::*;

fn detection() -> impl Strategy<Value = Detection> {
    (0u8..20, 0u8..20, 1u8..12, 1u8..12, 0u8..5, 0u8..2).prop_map(|(x, y, w, h, s, l)| {
        let (x, y) = (x as f64, y as f64);
        Detection::new(
            x,
            y,
            x + w as f64,
            y + h as f64,
            s as f64 / 4.0,
            ["a", "b"][l as usize],
        )
        .unwrap()
    })
}

proptest! {
    #[test]
    fn iou_symmetric_and_bounded(a in detection(), b in detection()) {
        let (ab, ba) = (iou(&a, &b), iou(&b, &a));
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nms_idempotent_and_suppression_free(
        dets in prop::collection::vec(detection(), 0..60),
        thr in 0.1f64..0.9,
        class_aware: bool,
    ) {
        let kept = nms_indices(&dets, thr, class_aware);
        let survivors: Vec<Detection> = kept.iter().map(|&i| dets[i].clone()).collect();
        for (i, a) in survivors.iter().enumerate() {
            for b in &survivors[i + 1..] {
                if !class_aware || a.label == b.label {
                    prop_assert!(iou(a, b) <= thr);
                }
            }
        }
        let again = nms_indices(&survivors, thr, class_aware);
        prop_assert_eq!(again.len(), survivors.len());
    }

    #[test]
    fn frame_sampling_in_range(total in 1usize..400, count in 1usize..16) {
        let picked = sample_frames(total, count);
        prop_assert_eq!(picked.len(), total.min(count));
        prop_assert!(picked.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(picked.iter().all(|&i| i < total));
    }
}
