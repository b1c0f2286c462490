//! Synthetic correspondence task for the dual-softmax matching head.

use cstf_core::codec::{self, ModelConfig};
use cstf_core::matching::{self, Match};
use cstf_core::{Bound, ParamSet, Real, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::OptimizerConfig;
use crate::error::{HarnessError, Result};
use crate::train::Sgd;

/// Two images where `b` holds the `grid×grid` blocks of `a` in permuted
/// order; block `i` of `a` sits at block `pairs[i].1` of `b`.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchPair {
    pub a: Tensor<f64>,
    pub b: Tensor<f64>,
    pub pairs: Vec<(usize, usize)>,
}

/// Each block gets a distinct brightness level, a brighter inner rectangle and pixel noise.
pub fn gen_match_pair(seed: u64, size: usize, grid: usize) -> Result<MatchPair> {
    if grid == 0 || !size.is_multiple_of(grid) || size / grid < 2 {
        return Err(HarnessError::Config(format!("grid {grid} does not tile a {size}×{size} image")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cell = size / grid;
    let n = grid * grid;
    let mut levels: Vec<f64> = (0..n).map(|k| 0.6 * (k as f64 + 0.5) / n as f64).collect();
    levels.shuffle(&mut rng);
    let blocks: Vec<Vec<f64>> = levels
        .iter()
        .map(|&base| {
            let x0 = rng.gen_range(0..cell - 1);
            let y0 = rng.gen_range(0..cell - 1);
            let x1 = rng.gen_range(x0 + 1..=cell);
            let y1 = rng.gen_range(y0 + 1..=cell);
            (0..cell * cell)
                .map(|p| {
                    let (y, x) = (p / cell, p % cell);
                    let lift = if (x0..x1).contains(&x) && (y0..y1).contains(&y) { 0.4 } else { 0.0 };
                    (base + lift + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0)
                })
                .collect()
        })
        .collect();
    let mut perm: Vec<usize> = (0..grid * grid).collect();
    perm.shuffle(&mut rng);
    let place = |slot_of: &dyn Fn(usize) -> usize| {
        let mut img = vec![0.0; size * size];
        for (k, block) in blocks.iter().enumerate() {
            let slot = slot_of(k);
            let (by, bx) = (slot / grid * cell, slot % grid * cell);
            for (p, &v) in block.iter().enumerate() {
                img[(by + p / cell) * size + bx + p % cell] = v;
            }
        }
        Tensor::new(&[1, size, size], img).expect("image shape")
    };
    let a = place(&|k| k);
    let b = place(&|k| perm[k]);
    Ok(MatchPair { a, b, pairs: (0..grid * grid).map(|k| (k, perm[k])).collect() })
}

/// Matching confidences between the stage-1 descriptors of two images.
pub fn confidence<T: Real>(
    tape: &mut Tape<T>,
    bound: &Bound,
    model: &ModelConfig,
    a: &Tensor<T>,
    b: &Tensor<T>,
    temperature: f64,
) -> Result<Var> {
    let mut describe = |img: &Tensor<T>| -> Result<Var> {
        let x = tape.constant(img.clone());
        let (_, block) = codec::encode_with_cstf(tape, x, bound, model)?;
        Ok(matching::descriptors(tape, block.tokens[0], bound)?)
    };
    let da = describe(a)?;
    let db = describe(b)?;
    let s = matching::similarity_matrix(tape, da, db, T::lit(temperature))?;
    Ok(matching::dual_softmax(tape, s)?)
}

/// Model weights plus the descriptor head on the first stage width.
pub fn init_params<T: Real>(model: &ModelConfig, seed: u64) -> Result<ParamSet<T>> {
    let mut p = model.init_params::<T>(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x6d61_7463));
    matching::init_head_params(&mut p, &mut rng, model.widths[0]);
    Ok(p)
}

#[derive(Clone, Debug)]
pub struct MatchOutcome<T> {
    pub params: ParamSet<T>,
    pub losses: Vec<f64>,
    pub confidence: Tensor<T>,
    pub matches: Vec<Match>,
    /// Fraction of planted pairs among the mutual nearest neighbours.
    pub recovered: f64,
}

/// Fraction of `pairs` present in `matches`.
pub fn recovery(matches: &[Match], pairs: &[(usize, usize)]) -> f64 {
    let hit = pairs
        .iter()
        .filter(|&&(i, j)| matches.iter().any(|m| m.index_a == i && m.index_b == j))
        .count();
    hit as f64 / pairs.len() as f64
}

/// Overfits the matching loss on one pair, then extracts mutual nearest neighbours above `threshold`.
pub fn train_matching<T: Real>(
    model: &ModelConfig,
    opt: &OptimizerConfig,
    seed: u64,
    pair: &MatchPair,
    threshold: f64,
    temperature: f64,
) -> Result<MatchOutcome<T>> {
    if pair.pairs.len() != model.patch.tokens() {
        return Err(HarnessError::Config(format!(
            "pair has {} blocks but the model yields {} tokens",
            pair.pairs.len(),
            model.patch.tokens()
        )));
    }
    let mut params = init_params::<T>(model, seed)?;
    let (a, b) = (pair.a.cast::<T>(), pair.b.cast::<T>());
    let mut sgd = Sgd::new(opt);
    let mut losses = Vec::with_capacity(opt.steps);
    for step in 0..opt.steps {
        let loss = sgd.step(&mut params, |tape, bound| {
            let p = confidence(tape, bound, model, &a, &b, temperature)?;
            Ok(matching::matching_loss(tape, p, &pair.pairs)?)
        })?;
        if !loss.is_finite() {
            return Err(HarnessError::Diverged { step, loss });
        }
        losses.push(loss);
        if opt.target_loss.is_some_and(|t| loss < t) {
            break;
        }
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let p = confidence(&mut tape, &bound, model, &a, &b, temperature)?;
    let conf = tape.value(p).clone();
    let matches = matching::mutual_nn(&conf, threshold)?;
    let recovered = recovery(&matches, &pair.pairs);
    Ok(MatchOutcome { params, losses, confidence: conf, matches, recovered })
}
