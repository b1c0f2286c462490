//! Synthetic scenes: bright axis-aligned rectangles on a noisy background.

use cstf_core::{Real, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

/// Half-open pixel box `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn is_valid(&self) -> bool {
        self.x0 < self.x1 && self.y0 < self.y1
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x0 >= 0.0 && self.y0 >= 0.0 && self.x1 <= width && self.y1 <= height
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Object {
    pub bbox: BBox,
    pub class: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    /// 1×H×W grayscale intensities in `[0, 1]`.
    pub image: Tensor<f64>,
    pub objects: Vec<Object>,
}

impl SyntheticScene {
    pub fn size(&self) -> usize {
        self.image.shape()[2]
    }

    /// Per-pixel class index, row-major; 0 is background.
    pub fn mask(&self) -> Vec<usize> {
        let s = self.size();
        let mut m = vec![0; s * s];
        for o in &self.objects {
            let b = o.bbox;
            for y in b.y0 as usize..b.y1 as usize {
                for x in b.x0 as usize..b.x1 as usize {
                    m[y * s + x] = o.class;
                }
            }
        }
        m
    }

    pub fn image_as<T: Real>(&self) -> Tensor<T> {
        self.image.cast()
    }
}

pub const MIN_SIDE: usize = 4;
const BACKGROUND_MAX: f64 = 0.35;
const PLACEMENT_ATTEMPTS: usize = 64;

fn max_side(size: usize) -> usize {
    (size / 3).max(MIN_SIDE)
}

/// Largest supported mean object count for `size×size` scenes (objects may cover at most half the area).
pub fn max_density(size: usize) -> f64 {
    let mean_side = (MIN_SIDE + max_side(size)) as f64 / 2.0 + 1.0;
    0.5 * (size * size) as f64 / (mean_side * mean_side)
}

/// Deterministic scenes of side `size`; object counts are Poisson with mean `density`.
///
/// Objects are kept one pixel apart so that each stays a separate connected
/// component; an object that cannot be placed after a bounded number of
/// attempts is dropped.
pub fn gen_synthetic(seed: u64, n_images: usize, size: usize, density: f64) -> Result<Vec<SyntheticScene>> {
    if size < 2 * MIN_SIDE {
        return Err(HarnessError::Config(format!("scene side {size} below {}", 2 * MIN_SIDE)));
    }
    if !density.is_finite() || density < 0.0 || density > max_density(size) {
        return Err(HarnessError::Config(format!(
            "density {density} infeasible for {size}×{size} scenes (max {:.2})",
            max_density(size)
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let counts = (density > 0.0).then(|| Poisson::new(density).expect("positive finite rate"));
    (0..n_images)
        .map(|_| {
            let count = counts.as_ref().map_or(0, |p| p.sample(&mut rng) as usize);
            Ok(scene(&mut rng, size, count))
        })
        .collect()
}

fn scene(rng: &mut ChaCha8Rng, size: usize, count: usize) -> SyntheticScene {
    let mut pixels: Vec<f64> = (0..size * size).map(|_| rng.gen_range(0.0..BACKGROUND_MAX)).collect();
    let mut objects: Vec<Object> = Vec::with_capacity(count);
    let hi = max_side(size);
    for _ in 0..count {
        for _ in 0..PLACEMENT_ATTEMPTS {
            let w = rng.gen_range(MIN_SIDE..=hi);
            let h = rng.gen_range(MIN_SIDE..=hi);
            let x0 = rng.gen_range(0..=size - w);
            let y0 = rng.gen_range(0..=size - h);
            let b = BBox::new(x0 as f64, y0 as f64, (x0 + w) as f64, (y0 + h) as f64);
            let clear = objects.iter().all(|o| {
                let q = o.bbox;
                b.x1 + 1.0 <= q.x0 || q.x1 + 1.0 <= b.x0 || b.y1 + 1.0 <= q.y0 || q.y1 + 1.0 <= b.y0
            });
            if clear {
                let level: f64 = rng.gen_range(0.65..0.95);
                for y in y0..y0 + h {
                    for x in x0..x0 + w {
                        pixels[y * size + x] = (level + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0);
                    }
                }
                objects.push(Object { bbox: b, class: 1 });
                break;
            }
        }
    }
    SyntheticScene {
        image: Tensor::new(&[1, size, size], pixels).expect("scene shape"),
        objects,
    }
}

/// SHA-256 over image bits and boxes, hex encoded; identifies a data split.
pub fn split_hash(scenes: &[SyntheticScene]) -> String {
    let mut h = Sha256::new();
    for s in scenes {
        for v in s.image.data() {
            h.update(v.to_le_bytes());
        }
        for o in &s.objects {
            for v in [o.bbox.x0, o.bbox.y0, o.bbox.x1, o.bbox.y1] {
                h.update(v.to_le_bytes());
            }
            h.update((o.class as u64).to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
