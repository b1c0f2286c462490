use cstf_core::Tensor;
use cstf_harness::config::Interp;
use cstf_harness::data::{BBox, Object};
use cstf_harness::detect::{extract_detections, label_components};
use cstf_harness::metrics::{iou, recall_at, voc_average_precision, Detection};
use proptest::prelude::*;

fn bbox() -> impl Strategy<Value = BBox> {
    (0u32..12, 0u32..12, 1u32..6, 1u32..6).prop_map(|(x, y, w, h)| BBox::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64))
}

fn instance() -> impl Strategy<Value = (Vec<Detection>, Vec<Object>)> {
    let gts = prop::collection::vec(bbox().prop_map(|b| Object { bbox: b, class: 1 }), 1..5);
    let dets = prop::collection::vec((bbox(), 0.0f64..1.0), 0..7)
        .prop_map(|v| v.into_iter().map(|(b, s)| Detection { bbox: b, class: 1, score: s }).collect());
    (dets, gts)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn ap_survives_monotone_score_transform((dets, gts) in instance()) {
        let moved: Vec<Detection> = dets.iter().map(|d| Detection { score: d.score.powi(3) * 0.5 + 0.1, ..*d }).collect();
        for interp in [Interp::AllPoints, Interp::ElevenPoint] {
            let a = voc_average_precision(std::slice::from_ref(&dets), std::slice::from_ref(&gts), 0.5, interp).unwrap();
            let b = voc_average_precision(std::slice::from_ref(&moved), std::slice::from_ref(&gts), 0.5, interp).unwrap();
            prop_assert_eq!(a, b);
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }

    #[test]
    fn stricter_iou_never_raises_recall((dets, gts) in instance()) {
        let loose = recall_at(std::slice::from_ref(&dets), std::slice::from_ref(&gts), 0.5).unwrap();
        let strict = recall_at(&[dets], &[gts], 0.7).unwrap();
        prop_assert!(strict <= loose);
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in bbox(), b in bbox()) {
        let v = iou(&a, &b);
        prop_assert_eq!(v, iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(iou(&a, &a), 1.0);
    }

    #[test]
    fn labels_agree_with_pairwise_connectivity(cells in prop::collection::vec(any::<bool>(), 36)) {
        let (h, w) = (6, 6);
        let labels = label_components(&cells, h, w);
        // flood-fill reachability computed independently by repeated relaxation
        let mut reach: Vec<usize> = (0..h * w).collect();
        loop {
            let mut changed = false;
            for p in 0..h * w {
                if !cells[p] {
                    continue;
                }
                let (y, x) = (p / w, p % w);
                let nbrs = [(y > 0).then(|| p - w), (y + 1 < h).then(|| p + w), (x > 0).then(|| p - 1), (x + 1 < w).then(|| p + 1)];
                for q in nbrs.into_iter().flatten() {
                    if cells[q] && reach[q] < reach[p] {
                        reach[p] = reach[q];
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        for p in 0..h * w {
            prop_assert_eq!(labels[p] == 0, !cells[p]);
            for q in 0..h * w {
                if cells[p] && cells[q] {
                    prop_assert_eq!(labels[p] == labels[q], reach[p] == reach[q]);
                }
            }
        }
    }
}

#[test]
fn two_blobs_become_two_tight_boxes() {
    let (h, w) = (10, 12);
    let mut fg = vec![0.0; h * w];
    for y in 1..4 {
        for x in 2..6 {
            fg[y * w + x] = 0.9;
        }
    }
    for y in 6..9 {
        for x in 8..11 {
            fg[y * w + x] = 0.7;
        }
    }
    let mut data: Vec<f64> = fg.iter().map(|p| 1.0 - p).collect();
    data.extend(&fg);
    let map = Tensor::new(&[2, h, w], data).unwrap();
    let dets = extract_detections(&map, 0.5).unwrap();
    assert_eq!(dets.len(), 2);
    assert_eq!(dets[0].bbox, BBox::new(2.0, 1.0, 6.0, 4.0));
    assert_eq!(dets[1].bbox, BBox::new(8.0, 6.0, 11.0, 9.0));
    assert!((dets[0].score - 0.9).abs() < 1e-12 && (dets[1].score - 0.7).abs() < 1e-12);
    assert!(dets.iter().all(|d| d.class == 1 && d.bbox.within(w as f64, h as f64)));
}

#[test]
fn empty_ground_truth_is_rejected() {
    let det = Detection { bbox: BBox::new(0.0, 0.0, 2.0, 2.0), class: 1, score: 0.5 };
    assert!(voc_average_precision(&[vec![det]], &[Vec::new()], 0.5, Interp::AllPoints).is_err());
}
