//! VOC-style box metrics.

use serde::{Deserialize, Serialize};

use crate::config::Interp;
use crate::data::{BBox, Object};
use crate::error::{HarnessError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class: usize,
    pub score: f64,
}

/// Detections of one image.
pub type ImageDetections = Vec<Detection>;
/// Detections of every image, indexed like the ground truth.
pub type DetectionSet = Vec<ImageDetections>;

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let h = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = w * h;
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Outcome of greedy matching for one class, detections sorted by descending score.
struct Ranked {
    /// True-positive flag per ranked detection.
    hits: Vec<bool>,
    positives: usize,
}

fn check_inputs(dets: &[ImageDetections], gts: &[Vec<Object>]) -> Result<()> {
    if dets.len() != gts.len() {
        return Err(HarnessError::Contract(format!(
            "{} detection lists for {} images",
            dets.len(),
            gts.len()
        )));
    }
    if gts.iter().all(|g| g.is_empty()) {
        return Err(HarnessError::Contract("no ground-truth objects".into()));
    }
    for d in dets.iter().flatten() {
        if !d.score.is_finite() || !d.bbox.is_valid() {
            return Err(HarnessError::Contract(format!("invalid detection {d:?}")));
        }
    }
    Ok(())
}

fn classes(gts: &[Vec<Object>]) -> Vec<usize> {
    let mut c: Vec<usize> = gts.iter().flatten().map(|o| o.class).collect();
    c.sort_unstable();
    c.dedup();
    c
}

/// Each detection, highest score first (ties by input order), takes its
/// best-overlapping ground truth of the same class; it is a hit only if that
/// overlap reaches the threshold and the object is still unclaimed.
fn rank(dets: &[ImageDetections], gts: &[Vec<Object>], class: usize, iou_thresh: f64) -> Ranked {
    let mut order: Vec<(usize, &Detection)> = dets
        .iter()
        .enumerate()
        .flat_map(|(img, ds)| ds.iter().filter(|d| d.class == class).map(move |d| (img, d)))
        .collect();
    order.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let hits = order
        .iter()
        .map(|&(img, d)| {
            let best = gts[img]
                .iter()
                .enumerate()
                .filter(|(_, o)| o.class == class)
                .map(|(k, o)| (k, iou(&d.bbox, &o.bbox)))
                .fold(None, |acc: Option<(usize, f64)>, (k, v)| match acc {
                    Some((_, bv)) if bv >= v => acc,
                    _ => Some((k, v)),
                });
            match best {
                Some((k, v)) if v >= iou_thresh && !taken[img][k] => {
                    taken[img][k] = true;
                    true
                }
                _ => false,
            }
        })
        .collect();
    let positives = gts.iter().flatten().filter(|o| o.class == class).count();
    Ranked { hits, positives }
}

/// `(recall, precision)` after each ranked detection.
fn curve(r: &Ranked) -> Vec<(f64, f64)> {
    let mut tp = 0usize;
    r.hits
        .iter()
        .enumerate()
        .map(|(i, &hit)| {
            tp += hit as usize;
            (tp as f64 / r.positives as f64, tp as f64 / (i + 1) as f64)
        })
        .collect()
}

/// Area under a PR curve given as `(recall, precision)` points in ranking order.
pub fn integrate(points: &[(f64, f64)], interp: Interp) -> f64 {
    let envelope = |r: f64| points.iter().filter(|p| p.0 >= r).map(|p| p.1).fold(0.0, f64::max);
    match interp {
        Interp::ElevenPoint => (0..=10).map(|t| envelope(t as f64 / 10.0)).sum::<f64>() / 11.0,
        Interp::AllPoints => {
            let mut ap = 0.0;
            let mut prev = 0.0;
            for &(r, _) in points {
                if r > prev {
                    ap += (r - prev) * envelope(r);
                    prev = r;
                }
            }
            ap
        }
    }
}

/// Precision-recall points of one class.
pub fn pr_curve(dets: &[ImageDetections], gts: &[Vec<Object>], class: usize, iou_thresh: f64) -> Result<Vec<(f64, f64)>> {
    check_inputs(dets, gts)?;
    let r = rank(dets, gts, class, iou_thresh);
    if r.positives == 0 {
        return Err(HarnessError::Contract(format!("no ground truth of class {class}")));
    }
    Ok(curve(&r))
}

/// Mean over ground-truth classes of the per-class average precision.
pub fn voc_average_precision(dets: &[ImageDetections], gts: &[Vec<Object>], iou_thresh: f64, interp: Interp) -> Result<f64> {
    check_inputs(dets, gts)?;
    let cls = classes(gts);
    let total: f64 = cls
        .iter()
        .map(|&c| integrate(&curve(&rank(dets, gts, c, iou_thresh)), interp))
        .sum();
    Ok(total / cls.len() as f64)
}

/// Fraction of ground-truth objects claimed by some detection at the threshold.
pub fn recall_at(dets: &[ImageDetections], gts: &[Vec<Object>], iou_thresh: f64) -> Result<f64> {
    check_inputs(dets, gts)?;
    let mut hit = 0usize;
    let mut all = 0usize;
    for c in classes(gts) {
        let r = rank(dets, gts, c, iou_thresh);
        hit += r.hits.iter().filter(|&&h| h).count();
        all += r.positives;
    }
    Ok(hit as f64 / all as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obj(x0: f64, y0: f64, x1: f64, y1: f64) -> Object {
        Object { bbox: BBox::new(x0, y0, x1, y1), class: 1 }
    }

    fn det(o: Object, score: f64) -> Detection {
        Detection { bbox: o.bbox, class: o.class, score }
    }

    #[test]
    fn iou_hand_values() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(5.0, 5.0, 6.0, 6.0)), 0.0);
        assert_eq!(iou(&a, &BBox::new(2.0, 0.0, 4.0, 2.0)), 0.0);
        assert!((iou(&a, &BBox::new(1.0, 1.0, 3.0, 3.0)) - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_single_detection() {
        let g = obj(1.0, 1.0, 5.0, 5.0);
        for interp in [Interp::ElevenPoint, Interp::AllPoints] {
            assert_eq!(voc_average_precision(&[vec![det(g, 0.9)]], &[vec![g]], 0.5, interp).unwrap(), 1.0);
        }
    }

    #[test]
    fn disjoint_detections_score_zero() {
        let g = obj(0.0, 0.0, 2.0, 2.0);
        let d = det(obj(10.0, 10.0, 12.0, 12.0), 0.9);
        for interp in [Interp::ElevenPoint, Interp::AllPoints] {
            assert_eq!(voc_average_precision(&[vec![d]], &[vec![g]], 0.5, interp).unwrap(), 0.0);
        }
        assert_eq!(recall_at(&[vec![]], &[vec![g]], 0.5).unwrap(), 0.0);
    }

    #[test]
    fn hand_walked_curve() {
        let g1 = obj(0.0, 0.0, 4.0, 4.0);
        let g2 = obj(10.0, 10.0, 14.0, 14.0);
        let miss = obj(20.0, 20.0, 24.0, 24.0);
        let dets = vec![vec![det(g1, 0.9), det(miss, 0.8), det(g2, 0.7)]];
        let ap = voc_average_precision(&dets, &[vec![g1, g2]], 0.5, Interp::AllPoints).unwrap();
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn duplicate_detection_is_false_positive() {
        let g = obj(0.0, 0.0, 4.0, 4.0);
        let dets = vec![vec![det(g, 0.9), det(g, 0.8)]];
        let pr = pr_curve(&dets, &[vec![g]], 1, 0.5).unwrap();
        assert_eq!(pr, vec![(1.0, 1.0), (1.0, 0.5)]);
    }

    #[test]
    fn recall_counts() {
        let gs = vec![obj(0.0, 0.0, 4.0, 4.0), obj(10.0, 0.0, 14.0, 4.0), obj(20.0, 0.0, 24.0, 4.0)];
        let dets = vec![vec![det(gs[0], 0.5), det(gs[2], 0.4)]];
        assert!((recall_at(&dets, std::slice::from_ref(&gs), 0.5).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let all: Vec<Detection> = gs.iter().map(|&g| det(g, 0.3)).collect();
        assert_eq!(recall_at(&[all], &[gs], 0.7).unwrap(), 1.0);
    }

    #[test]
    fn empty_ground_truth_is_contract_error() {
        let r = voc_average_precision(&[vec![]], &[vec![]], 0.5, Interp::AllPoints);
        assert!(matches!(r, Err(HarnessError::Contract(_))));
        assert!(recall_at(&[], &[vec![obj(0.0, 0.0, 1.0, 1.0)]], 0.5).is_err());
    }
}
