//! Patch tokens from encoder stage features.
//!
//! Every stage is reduced to the same `grid × grid` token layout so that the
//! cross-stage attention in [`crate::attention`] can sum per-stage outputs.
//! Tokens are ordered row-major over the grid.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::params::{fan_in_uniform, Bound, ParamSet};
use crate::tensor::{Real, Tensor};

/// How stage features become tokens before the pointwise projection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedMode {
    /// Adaptive average pooling onto the token grid.
    #[default]
    AveragePool,
    /// Learned non-overlapping `k×k` convolution with `k = side / grid`.
    Convolutional,
}

impl fmt::Display for EmbedMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EmbedMode::AveragePool => "average_pool",
            EmbedMode::Convolutional => "convolutional",
        })
    }
}

impl FromStr for EmbedMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average_pool" | "ap" => Ok(EmbedMode::AveragePool),
            "convolutional" | "conv" => Ok(EmbedMode::Convolutional),
            other => Err(Error::Config(format!("unknown embed mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchConfig {
    /// Base patch side `P^s`; only feeds [`stage_patch_size`] reporting.
    pub base_patch_size: usize,
    /// Token grid side `g`; every stage yields `g²` tokens.
    pub grid: usize,
    pub mode: EmbedMode,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            base_patch_size: 8,
            grid: 4,
            mode: EmbedMode::AveragePool,
        }
    }
}

impl PatchConfig {
    pub fn tokens(&self) -> usize {
        self.grid * self.grid
    }
}

/// Progressive patch size `P^s / 2^((i−1)/2)` for stage `i ≥ 1`, rounded half-up, at least 1.
pub fn stage_patch_size(base: usize, stage: usize) -> usize {
    assert!(stage >= 1, "stages are numbered from 1");
    let exact = base as f64 / 2f64.powf((stage - 1) as f64 / 2.0);
    ((exact + 0.5).floor() as usize).max(1)
}

/// Pools a C×h×w map onto a `grid×grid` layout and flattens it to `g² × C` tokens.
pub fn partition<T: Real>(tape: &mut Tape<T>, features: Var, grid: usize) -> Result<Var> {
    let [c, h, w] = tape.value(features).dims3()?;
    if grid == 0 || grid > h || grid > w {
        return Err(Error::Shape(format!("token grid {grid} exceeds stage map {h}×{w}")));
    }
    let pooled = tape.adaptive_avg_pool2d(features, grid, grid)?;
    grid_to_tokens(tape, pooled, c, grid)
}

fn grid_to_tokens<T: Real>(tape: &mut Tape<T>, map: Var, c: usize, grid: usize) -> Result<Var> {
    let flat = tape.reshape(map, &[c, grid * grid])?;
    tape.transpose(flat)
}

/// Kernel side for the convolutional partition of an `h×w` map, if the grid tiles it exactly.
pub fn conv_patch_kernel(h: usize, w: usize, grid: usize) -> Result<usize> {
    if grid == 0 || !h.is_multiple_of(grid) || !w.is_multiple_of(grid) || h / grid != w / grid {
        return Err(Error::Shape(format!(
            "convolutional patches need a square map divisible by the grid, got {h}×{w} for grid {grid}"
        )));
    }
    Ok(h / grid)
}

/// Convolutional partition: a learned `k×k`, stride-`k` convolution onto the token grid.
pub fn conv_partition<T: Real>(tape: &mut Tape<T>, features: Var, weight: Var, bias: Var, grid: usize) -> Result<Var> {
    let [_, h, w] = tape.value(features).dims3()?;
    let k = conv_patch_kernel(h, w, grid)?;
    let map = tape.conv2d(features, weight, Some(bias), k, 0)?;
    let c = tape.shape(map)[0];
    grid_to_tokens(tape, map, c, grid)
}

/// Pointwise channel-mixing projection `tokens · W + b`, `W: C × E`.
pub fn embed<T: Real>(tape: &mut Tape<T>, tokens: Var, weight: Var, bias: Var) -> Result<Var> {
    let projected = tape.matmul(tokens, weight)?;
    tape.add_bias(projected, bias)
}

/// Partition plus embedding for stage `stage` (1-based) using parameters under `patch.{stage}`.
pub fn embed_stage<T: Real>(
    tape: &mut Tape<T>,
    bound: &Bound,
    stage: usize,
    features: Var,
    cfg: &PatchConfig,
) -> Result<Var> {
    let tokens = match cfg.mode {
        EmbedMode::AveragePool => partition(tape, features, cfg.grid)?,
        EmbedMode::Convolutional => {
            let w = bound.get(&format!("patch.{stage}.conv.w"))?;
            let b = bound.get(&format!("patch.{stage}.conv.b"))?;
            conv_partition(tape, features, w, b, cfg.grid)?
        }
    };
    let w = bound.get(&format!("patch.{stage}.w"))?;
    let b = bound.get(&format!("patch.{stage}.b"))?;
    embed(tape, tokens, w, b)
}

/// Adds the embedding weights for one stage with `channels` wide features on an `side×side` map.
pub fn init_stage_params<T: Real, R: Rng + ?Sized>(
    params: &mut ParamSet<T>,
    rng: &mut R,
    stage: usize,
    channels: usize,
    side: usize,
    cfg: &PatchConfig,
) -> Result<()> {
    if cfg.mode == EmbedMode::Convolutional {
        let k = conv_patch_kernel(side, side, cfg.grid)?;
        params.insert(
            format!("patch.{stage}.conv.w"),
            fan_in_uniform(&[channels, channels, k, k], channels * k * k, rng),
        );
        params.insert(format!("patch.{stage}.conv.b"), Tensor::zeros(&[channels]));
    }
    params.insert(format!("patch.{stage}.w"), fan_in_uniform(&[channels, channels], channels, rng));
    params.insert(format!("patch.{stage}.b"), Tensor::zeros(&[channels]));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn progressive_patch_sizes() {
        assert_eq!(stage_patch_size(21, 1), 21);
        assert_eq!(stage_patch_size(16, 3), 8);
        // 21 / 1.41421356 = 14.849 -> 15
        assert_eq!(stage_patch_size(21, 2), 15);
        assert_eq!(stage_patch_size(1, 9), 1);
        for base in 1..40 {
            for i in 1..8 {
                assert!(stage_patch_size(base, i + 1) <= stage_patch_size(base, i));
            }
        }
    }

    #[test]
    fn partition_of_ramp_matches_window_means() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::from_fn(&[1, 4, 4], |i| i as f64));
        let t = partition(&mut tape, x, 2).unwrap();
        assert_eq!(tape.shape(t), &[4, 1]);
        assert_eq!(tape.value(t).data(), &[2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn partition_edge_cases() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::<f64>::full(&[3, 6, 6], 1.25));
        let t = partition(&mut tape, c, 3).unwrap();
        assert!(tape.value(t).data().iter().all(|&v| v == 1.25));

        let x = tape.constant(Tensor::<f64>::from_fn(&[2, 3, 3], |i| i as f64 * 0.5));
        let t = partition(&mut tape, x, 3).unwrap();
        let expect = channels_last(tape.value(x));
        assert_eq!(tape.value(t).data(), expect.as_slice());

        assert!(partition(&mut tape, x, 4).is_err());
    }

    #[test]
    fn embed_identity_and_zero() {
        let mut tape = Tape::new();
        let tokens = tape.constant(Tensor::<f64>::from_fn(&[4, 3], |i| i as f64 - 5.0));
        let eye = tape.constant(Tensor::eye(3));
        let zb = tape.constant(Tensor::zeros(&[3]));
        let out = embed(&mut tape, tokens, eye, zb).unwrap();
        assert_eq!(tape.value(out), tape.value(tokens));

        let zw = tape.constant(Tensor::zeros(&[3, 5]));
        let zb5 = tape.constant(Tensor::zeros(&[5]));
        let out = embed(&mut tape, tokens, zw, zb5).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));

        let bad = tape.constant(Tensor::zeros(&[4, 5]));
        assert!(embed(&mut tape, tokens, bad, zb5).is_err());
    }

    #[test]
    fn conv_partition_requires_tiling_grid() {
        assert_eq!(conv_patch_kernel(32, 32, 4).unwrap(), 8);
        assert!(conv_patch_kernel(16, 16, 6).is_err());
        assert!(conv_patch_kernel(16, 8, 4).is_err());
    }

    /// C×H×W values re-laid as (H·W) × C.
    fn channels_last(t: &Tensor<f64>) -> Vec<f64> {
        let [c, h, w] = t.dims3().unwrap();
        (0..h * w)
            .flat_map(|p| (0..c).map(move |ch| t.data()[ch * h * w + p]))
            .collect()
    }
}
