//! Boxes from per-pixel class probabilities.

use cstf_core::{Real, Tensor};

use crate::data::BBox;
use crate::error::{HarnessError, Result};
use crate::metrics::{Detection, ImageDetections};

/// Component labels of a boolean `h×w` grid under 4-connectivity, numbered
/// from 1 in raster order of each component's first pixel; 0 marks unset pixels.
pub fn label_components(mask: &[bool], h: usize, w: usize) -> Vec<usize> {
    let mut labels = vec![0usize; h * w];
    let mut next = 0;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (y, x) = (p / w, p % w);
            let mut visit = |q: usize| {
                if mask[q] && labels[q] == 0 {
                    labels[q] = next;
                    stack.push(q);
                }
            };
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
        }
    }
    labels
}

/// Thresholds the foreground probability `1 − P(background)` of a `K×H×W`
/// map, then emits one tight box per 4-connected component. The score is
/// the component's mean foreground probability and the class its most
/// frequent per-pixel argmax among the foreground classes.
pub fn extract_detections<T: Real>(class_map: &Tensor<T>, score_thresh: f64) -> Result<ImageDetections> {
    let &[k, h, w] = class_map.shape() else {
        return Err(HarnessError::Contract(format!("class map must be K×H×W, got {:?}", class_map.shape())));
    };
    if k < 2 {
        return Err(HarnessError::Contract("class map needs a background and a foreground class".into()));
    }
    let d = class_map.data();
    let plane = h * w;
    let fg: Vec<f64> = (0..plane).map(|p| (1.0 - d[p].as_f64()).clamp(0.0, 1.0)).collect();
    let mask: Vec<bool> = fg.iter().map(|&v| v > score_thresh).collect();
    let labels = label_components(&mask, h, w);
    let count = labels.iter().copied().max().unwrap_or(0);

    struct Acc {
        x0: usize,
        y0: usize,
        x1: usize,
        y1: usize,
        sum: f64,
        n: usize,
        votes: Vec<usize>,
    }
    let mut acc: Vec<Acc> = (0..count)
        .map(|_| Acc { x0: w, y0: h, x1: 0, y1: 0, sum: 0.0, n: 0, votes: vec![0; k] })
        .collect();
    for (p, &l) in labels.iter().enumerate() {
        if l == 0 {
            continue;
        }
        let a = &mut acc[l - 1];
        let (y, x) = (p / w, p % w);
        a.x0 = a.x0.min(x);
        a.y0 = a.y0.min(y);
        a.x1 = a.x1.max(x + 1);
        a.y1 = a.y1.max(y + 1);
        a.sum += fg[p];
        a.n += 1;
        let best = (1..k).max_by(|&i, &j| d[i * plane + p].as_f64().total_cmp(&d[j * plane + p].as_f64()).then(j.cmp(&i)));
        a.votes[best.expect("k ≥ 2")] += 1;
    }
    Ok(acc
        .into_iter()
        .map(|a| {
            let class = (1..k).max_by(|&i, &j| a.votes[i].cmp(&a.votes[j]).then(j.cmp(&i))).expect("k ≥ 2");
            Detection {
                bbox: BBox::new(a.x0 as f64, a.y0 as f64, a.x1 as f64, a.y1 as f64),
                class,
                score: a.sum / a.n as f64,
            }
        })
        .collect())
}
