//! Evaluation, the fusion/embedding ablation grid and the patch-size sweep.

use std::time::Instant;

use cstf_core::attention::FusionMode;
use cstf_core::codec::ModelConfig;
use cstf_core::patching::EmbedMode;
use cstf_core::{ParamSet, Real};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{MetricConfig, RunConfig};
use crate::data::{gen_synthetic, split_hash, Object, SyntheticScene};
use crate::detect::extract_detections;
use crate::error::{HarnessError, Result};
use crate::metrics::{pr_curve, recall_at, voc_average_precision, DetectionSet};
use crate::train::{self, predict};

#[derive(Clone, Debug)]
pub struct Split {
    pub train: Vec<SyntheticScene>,
    pub test: Vec<SyntheticScene>,
}

impl Split {
    /// Train and test scenes from independent streams of the run seed.
    pub fn generate(cfg: &RunConfig) -> Result<Self> {
        let side = cfg.model.height;
        Ok(Self {
            train: gen_synthetic(cfg.seed, cfg.data.train_images, side, cfg.data.density)?,
            test: gen_synthetic(cfg.seed.wrapping_add(1), cfg.data.test_images, side, cfg.data.density)?,
        })
    }

    pub fn hash(&self) -> String {
        split_hash(&[self.train.as_slice(), self.test.as_slice()].concat())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub map: f64,
    pub recall: f64,
    /// `(recall, precision)` points of the foreground class.
    pub pr: Vec<(f64, f64)>,
    pub detections: usize,
}

pub fn detect_all<T: Real>(params: &ParamSet<T>, model: &ModelConfig, scenes: &[SyntheticScene], score_thresh: f64) -> Result<DetectionSet> {
    scenes
        .iter()
        .map(|s| extract_detections(&predict(params, model, &s.image_as::<T>())?, score_thresh))
        .collect()
}

pub fn evaluate<T: Real>(params: &ParamSet<T>, model: &ModelConfig, scenes: &[SyntheticScene], metric: &MetricConfig) -> Result<Evaluation> {
    let dets = detect_all(params, model, scenes, metric.score_threshold)?;
    let gts: Vec<Vec<Object>> = scenes.iter().map(|s| s.objects.clone()).collect();
    Ok(Evaluation {
        map: voc_average_precision(&dets, &gts, metric.iou_threshold, metric.interpolation)?,
        recall: recall_at(&dets, &gts, metric.iou_threshold)?,
        pr: pr_curve(&dets, &gts, 1, metric.iou_threshold)?,
        detections: dets.iter().map(Vec::len).sum(),
    })
}

/// Trains on the split and evaluates on its test half at the configured precision.
pub fn train_and_evaluate(cfg: &RunConfig, split: &Split) -> Result<(Evaluation, Vec<f64>)> {
    fn run<T: Real>(cfg: &RunConfig, split: &Split) -> Result<(Evaluation, Vec<f64>)> {
        let out = train::train::<T>(cfg, &split.train)?;
        Ok((evaluate(&out.params, &cfg.model, &split.test, &cfg.metric)?, out.losses))
    }
    match cfg.precision {
        32 => run::<f32>(cfg, split),
        64 => run::<f64>(cfg, split),
        p => Err(HarnessError::Config(format!("precision must be 32 or 64, got {p}"))),
    }
}

/// One ablation variant and its reference numbers (HRSC2016, DOTA mAP).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Variant {
    pub name: &'static str,
    pub fusion: FusionMode,
    pub embed: EmbedMode,
    pub reference: Option<(f64, f64)>,
}

pub const ABLATION_VARIANTS: [Variant; 6] = [
    Variant { name: "CSTF-(CA)", fusion: FusionMode::CaOnly, embed: EmbedMode::AveragePool, reference: Some((89.32, 89.64)) },
    Variant { name: "CSTF-(SCA)", fusion: FusionMode::ScaOnly, embed: EmbedMode::AveragePool, reference: Some((89.86, 90.01)) },
    Variant { name: "CSTF-CA+SCA", fusion: FusionMode::Sum, embed: EmbedMode::AveragePool, reference: Some((91.33, 91.02)) },
    Variant { name: "CSTF-CA||SCA", fusion: FusionMode::Concat, embed: EmbedMode::AveragePool, reference: Some((92.42, 92.16)) },
    Variant { name: "CSTF-Conv", fusion: FusionMode::Concat, embed: EmbedMode::Convolutional, reference: Some((89.31, 89.25)) },
    Variant { name: "CSTF-AP", fusion: FusionMode::Concat, embed: EmbedMode::AveragePool, reference: Some((89.42, 89.31)) },
];

/// Sequential fusion; runnable on request, outside the default table.
pub const SEQUENTIAL_VARIANT: Variant =
    Variant { name: "CSTF-CA-SCA", fusion: FusionMode::Sequential, embed: EmbedMode::AveragePool, reference: None };

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResultRow {
    pub variant: String,
    pub map: f64,
    pub recall: f64,
    /// Reference mAP pair printed next to the row; never compared against.
    pub reference: Option<(f64, f64)>,
    pub final_loss: f64,
    #[serde(skip)]
    pub pr: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResultTable {
    pub split_hash: String,
    pub rows: Vec<ResultRow>,
}

fn run_variants(split: &Split, jobs: Vec<(String, RunConfig, Option<(f64, f64)>)>) -> Result<Vec<ResultRow>> {
    jobs.into_par_iter()
        .map(|(name, vcfg, reference)| {
            let start = Instant::now();
            let (eval, losses) = train_and_evaluate(&vcfg, split)?;
            log::info!("{name}: mAP {:.4} recall {:.4} in {:.1}s", eval.map, eval.recall, start.elapsed().as_secs_f64());
            Ok(ResultRow {
                variant: name,
                map: eval.map,
                recall: eval.recall,
                reference,
                final_loss: losses.last().copied().unwrap_or(f64::NAN),
                pr: eval.pr,
            })
        })
        .collect()
}

/// Trains and evaluates every ablation variant on one shared split.
pub fn run_ablation(cfg: &RunConfig, include_sequential: bool) -> Result<ResultTable> {
    cfg.validate()?;
    let split = Split::generate(cfg)?;
    let mut variants = ABLATION_VARIANTS.to_vec();
    if include_sequential {
        variants.push(SEQUENTIAL_VARIANT);
    }
    let jobs = variants
        .iter()
        .map(|v| {
            let mut c = cfg.clone();
            c.model.fusion = v.fusion;
            c.model.patch.mode = v.embed;
            c.validate()?;
            Ok((v.name.to_string(), c, v.reference))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ResultTable { split_hash: split.hash(), rows: run_variants(&split, jobs)? })
}

/// Reference patch sizes and their mAP (HRSC2016, DOTA).
pub const SWEEP_REFERENCE: [(usize, f64, f64); 4] = [(9, 88.12, 87.64), (13, 89.38, 89.62), (17, 90.12, 90.21), (21, 90.99, 90.86)];

/// Image side the reference patch sizes are scaled against.
pub const SWEEP_REFERENCE_SIDE: f64 = 72.0;

/// Token grid side for base patch size `p`: `round(72 / p)`, so larger patches give coarser grids.
pub fn sweep_grid(patch_size: usize) -> usize {
    (SWEEP_REFERENCE_SIDE / patch_size as f64).round() as usize
}

/// Trains and evaluates one model per patch size; sizes whose grid does not fit the model are skipped.
pub fn patch_size_sweep(cfg: &RunConfig, sizes: &[usize]) -> Result<ResultTable> {
    cfg.validate()?;
    let split = Split::generate(cfg)?;
    let mut jobs = Vec::new();
    for &p in sizes {
        let mut c = cfg.clone();
        c.model.patch.base_patch_size = p;
        c.model.patch.grid = sweep_grid(p);
        if let Err(e) = c.validate() {
            log::warn!("skipping patch size {p}: {e}");
            continue;
        }
        let reference = SWEEP_REFERENCE.iter().find(|r| r.0 == p).map(|r| (r.1, r.2));
        jobs.push((format!("P{p}-g{}", c.model.patch.grid), c, reference));
    }
    Ok(ResultTable { split_hash: split.hash(), rows: run_variants(&split, jobs)? })
}

/// Forward passes per second of the configured model on one synthetic image.
pub fn forward_fps<T: Real>(params: &ParamSet<T>, model: &ModelConfig, iterations: usize) -> Result<f64> {
    let scene = gen_synthetic(0, 1, model.height, 0.0)?;
    let image = scene[0].image_as::<T>();
    let start = Instant::now();
    for _ in 0..iterations.max(1) {
        predict(params, model, &image)?;
    }
    Ok(iterations.max(1) as f64 / start.elapsed().as_secs_f64())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_grid_mapping() {
        let grids: Vec<usize> = SWEEP_REFERENCE.iter().map(|r| sweep_grid(r.0)).collect();
        assert_eq!(grids, vec![8, 6, 4, 3]);
    }

    #[test]
    fn ablation_labels() {
        let names: Vec<&str> = ABLATION_VARIANTS.iter().map(|v| v.name).collect();
        assert_eq!(names, ["CSTF-(CA)", "CSTF-(SCA)", "CSTF-CA+SCA", "CSTF-CA||SCA", "CSTF-Conv", "CSTF-AP"]);
    }
}
