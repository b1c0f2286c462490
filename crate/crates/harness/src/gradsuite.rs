//! Backward-mode gradients of every parameterized operation against central differences.

use std::time::Instant;

use cstf_core::attention::{self, FusionMode};
use cstf_core::codec::{self, ModelConfig};
use cstf_core::gradcheck::{check_params_against, default_step};
use cstf_core::matching;
use cstf_core::params::fan_in_uniform;
use cstf_core::patching::{self, EmbedMode, PatchConfig};
use cstf_core::{Bound, ParamSet, Real, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;

/// Operation under test.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Case {
    Embed(EmbedMode),
    ChannelCrossAttention,
    SpatialCrossAttention,
    Fuse(FusionMode),
    Block(FusionMode),
    DecoderStage,
    OutputHead,
    MatchingLoss,
    FullModel,
}

impl Case {
    pub fn all() -> Vec<Case> {
        let mut v = vec![
            Case::Embed(EmbedMode::AveragePool),
            Case::Embed(EmbedMode::Convolutional),
            Case::ChannelCrossAttention,
            Case::SpatialCrossAttention,
        ];
        v.extend(FusionMode::ALL.map(Case::Fuse));
        v.extend(FusionMode::ALL.map(Case::Block));
        v.extend([Case::DecoderStage, Case::OutputHead, Case::MatchingLoss, Case::FullModel]);
        v
    }

    pub fn label(&self) -> String {
        match self {
            Case::Embed(m) => format!("embed/{m}"),
            Case::ChannelCrossAttention => "channel_cross_attention".into(),
            Case::SpatialCrossAttention => "spatial_cross_attention".into(),
            Case::Fuse(m) => format!("fuse/{m}"),
            Case::Block(m) => format!("cstf_block/{m}"),
            Case::DecoderStage => "decoder_stage".into(),
            Case::OutputHead => "output_head".into(),
            Case::MatchingLoss => "matching_loss".into(),
            Case::FullModel => "full_model".into(),
        }
    }
}

/// Tolerance on the relative error for an element width.
pub fn tolerance(bits: u32) -> f64 {
    if bits == 32 {
        1e-3
    } else {
        1e-6
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CaseReport {
    pub case: String,
    pub bits: u32,
    pub seed: u64,
    /// Relative error of the whole gradient: every parameter and input concatenated.
    pub rel_error: f64,
    /// Tensor with the largest own relative error, for diagnostics.
    pub worst: String,
    pub worst_rel_error: f64,
    pub scalars: usize,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.rel_error < tolerance(self.bits)
    }
}

const P: usize = 4;
const WIDTHS: [usize; 2] = [3, 4];
const ATTN: usize = 2;

fn uniform<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    Tensor::uniform(shape, 1.0, rng)
}

/// Fixed random readout `Σ out ⊙ R`, so that sums which are constant by construction
/// (softmax rows) still carry gradient.
fn readout<T: Real>(tape: &mut Tape<T>, out: Var, rng_seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let r = tape.constant(uniform(&mut rng, tape.shape(out)));
    let m = tape.mul(out, r)?;
    Ok(tape.sum(m))
}

fn readout_all<T: Real>(tape: &mut Tape<T>, outs: &[Var], rng_seed: u64) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (i, &o) in outs.iter().enumerate() {
        let r = readout(tape, o, rng_seed.wrapping_add(i as u64))?;
        total = Some(match total {
            Some(t) => tape.add(t, r)?,
            None => r,
        });
    }
    Ok(total.expect("at least one output"))
}

fn block_params<T: Real>(rng: &mut ChaCha8Rng, mode: FusionMode) -> ParamSet<T> {
    let mut p = ParamSet::new();
    attention::init_block_params(&mut p, rng, &WIDTHS, ATTN, mode);
    for (name, t) in p.iter_mut() {
        // perturb LN gains/biases and zero-initialized biases away from their defaults
        if name.contains(".ln") || name.ends_with(".b") {
            for v in t.data_mut() {
                *v += T::lit(rng.gen_range(-0.3..0.3));
            }
        }
    }
    for (i, &c) in WIDTHS.iter().enumerate() {
        p.insert(format!("input.{}", i + 1), uniform(rng, &[P, c]));
    }
    p
}

fn inputs(b: &Bound) -> Result<Vec<Var>> {
    Ok((1..=WIDTHS.len()).map(|s| b.get(&format!("input.{s}"))).collect::<cstf_core::Result<_>>()?)
}

fn tiny_model(mode: FusionMode) -> ModelConfig {
    ModelConfig {
        in_channels: 1,
        widths: vec![3, 4, 4],
        height: 8,
        width: 8,
        classes: 2,
        fusion: mode,
        patch: PatchConfig { base_patch_size: 4, grid: 2, mode: EmbedMode::AveragePool },
        attn_dim: 2,
    }
}

/// Parameters (inputs included) and the scalar loss for one case.
pub type Loss<T> = Box<dyn FnMut(&mut Tape<T>, &Bound) -> cstf_core::Result<Var>>;

pub fn build<T: Real>(case: Case, seed: u64) -> Result<(ParamSet<T>, Loss<T>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probe = seed.wrapping_mul(31).wrapping_add(17);
    let wrap = |r: Result<Var>| r.map_err(|e| match e {
        crate::HarnessError::Model(m) => m,
        other => cstf_core::Error::Contract(other.to_string()),
    });
    Ok(match case {
        Case::Embed(mode) => {
            let cfg = PatchConfig { base_patch_size: 4, grid: 2, mode };
            let mut p = ParamSet::new();
            patching::init_stage_params(&mut p, &mut rng, 1, 3, 4, &cfg)?;
            p.insert("patch.1.b", uniform(&mut rng, &[3]));
            p.insert("input.features", uniform(&mut rng, &[3, 4, 4]));
            let f: Loss<T> = Box::new(move |tape, b| {
                let x = b.get("input.features")?;
                let out = patching::embed_stage(tape, b, 1, x, &cfg)?;
                wrap(readout(tape, out, probe))
            });
            (p, f)
        }
        Case::ChannelCrossAttention => {
            let p = block_params(&mut rng, FusionMode::CaOnly);
            let f: Loss<T> = Box::new(move |tape, b| {
                let x = inputs(b).map_err(|e| cstf_core::Error::Contract(e.to_string()))?;
                let out = attention::channel_cross_attention(tape, &x, b)?;
                wrap(readout_all(tape, &out.enriched, probe))
            });
            (p, f)
        }
        Case::SpatialCrossAttention => {
            let p = block_params(&mut rng, FusionMode::ScaOnly);
            let f: Loss<T> = Box::new(move |tape, b| {
                let x = b.get("input.2")?;
                let out = attention::spatial_cross_attention(tape, x, 2, b)?;
                wrap(readout(tape, out.output, probe))
            });
            (p, f)
        }
        Case::Fuse(mode) => {
            let mut p = ParamSet::new();
            if mode == FusionMode::Concat {
                p.insert("cstf.cat.1.w", fan_in_uniform(&[6, 3], 6, &mut rng));
                p.insert("cstf.cat.1.b", uniform(&mut rng, &[3]));
            }
            for name in ["input.ca", "input.sca", "input.original"] {
                p.insert(name, uniform(&mut rng, &[P, 3]));
            }
            let f: Loss<T> = Box::new(move |tape, b| {
                let ca = mode.uses_ca().then(|| b.get("input.ca")).transpose()?;
                let sca = mode.uses_sca().then(|| b.get("input.sca")).transpose()?;
                let original = b.get("input.original")?;
                let out = attention::fuse(tape, ca, sca, original, mode, 1, b)?;
                wrap(readout(tape, out, probe))
            });
            (p, f)
        }
        Case::Block(mode) => {
            let p = block_params(&mut rng, mode);
            let f: Loss<T> = Box::new(move |tape, b| {
                let x = inputs(b).map_err(|e| cstf_core::Error::Contract(e.to_string()))?;
                let out = attention::cstf_block(tape, &x, b, mode)?;
                wrap(readout_all(tape, &out.tokens, probe))
            });
            (p, f)
        }
        Case::DecoderStage => {
            let mut p = ParamSet::new();
            p.insert("dec.1.conv.w", fan_in_uniform(&[3, 4, 3, 3], 36, &mut rng));
            p.insert("dec.1.conv.b", uniform(&mut rng, &[3]));
            p.insert("dec.1.ln.g", uniform(&mut rng, &[3]));
            p.insert("dec.1.ln.b", uniform(&mut rng, &[3]));
            p.insert("input.d_next", uniform(&mut rng, &[4, 2, 2]));
            p.insert("input.skip", uniform(&mut rng, &[3, 4, 4]));
            let f: Loss<T> = Box::new(move |tape, b| {
                let out = codec::decoder_stage(tape, b.get("input.d_next")?, b.get("input.skip")?, 1, b)?;
                wrap(readout(tape, out, probe))
            });
            (p, f)
        }
        Case::OutputHead => {
            let mut p = ParamSet::new();
            p.insert("head.w", fan_in_uniform(&[3, 2, 1, 1], 2, &mut rng));
            p.insert("head.b", uniform(&mut rng, &[3]));
            p.insert("input.features", uniform(&mut rng, &[2, 3, 3]));
            let f: Loss<T> = Box::new(move |tape, b| {
                let out = codec::output_head(tape, b.get("input.features")?, b)?;
                wrap(readout(tape, out.probs, probe))
            });
            (p, f)
        }
        Case::MatchingLoss => {
            let mut p = ParamSet::new();
            matching::init_head_params(&mut p, &mut rng, 3);
            p.insert("match.b", uniform(&mut rng, &[3]));
            p.insert("input.a", uniform(&mut rng, &[4, 3]));
            p.insert("input.b", uniform(&mut rng, &[5, 3]));
            let pairs = vec![(0, 2), (1, 0), (3, 4)];
            let f: Loss<T> = Box::new(move |tape, b| {
                let da = matching::descriptors(tape, b.get("input.a")?, b)?;
                let db = matching::descriptors(tape, b.get("input.b")?, b)?;
                let s = matching::similarity_matrix(tape, da, db, T::lit(0.5))?;
                let conf = matching::dual_softmax(tape, s)?;
                matching::matching_loss(tape, conf, &pairs)
            });
            (p, f)
        }
        Case::FullModel => {
            let cfg = tiny_model(FusionMode::Concat);
            let mut p = cfg.init_params::<T>(seed)?;
            for (name, t) in p.iter_mut() {
                if name.ends_with(".b") {
                    for v in t.data_mut() {
                        *v = T::lit(rng.gen_range(-0.2..0.2));
                    }
                }
            }
            p.insert("input.image", Tensor::uniform(&[1, 8, 8], 1.0, &mut rng));
            let targets: Vec<usize> = (0..64).map(|_| rng.gen_range(0..2)).collect();
            let f: Loss<T> = Box::new(move |tape, b| {
                let out = codec::model_forward(tape, b.get("input.image")?, b, &cfg)?;
                tape.cross_entropy(out.logits, &targets)
            });
            (p, f)
        }
    })
}

/// Backward pass at `T` against fourth-order central differences of the same
/// loss evaluated in 64-bit arithmetic at the same weight values.
pub fn run_case<T: Real>(case: Case, seed: u64) -> Result<CaseReport> {
    let (params, loss) = build::<T>(case, seed)?;
    let (_, reference) = build::<f64>(case, seed)?;
    let reports = check_params_against(&params, default_step::<f64>(), loss, reference)?;
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    for r in &reports {
        diff += r.diff_sq;
        na += r.analytic_sq;
        nn += r.numeric_sq;
    }
    let scale = na.max(nn).sqrt();
    let rel_error = if scale == 0.0 { 0.0 } else { diff.sqrt() / scale };
    let worst = reports
        .iter()
        .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
        .expect("every case has parameters");
    Ok(CaseReport {
        case: case.label(),
        bits: T::BITS,
        seed,
        rel_error,
        worst: worst.name.clone(),
        worst_rel_error: worst.rel_error,
        scalars: reports.iter().map(|r| r.numel).sum(),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub cases: Vec<CaseReport>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(CaseReport::passed)
    }
}

/// Every case at both precisions for each seed.
pub fn run_suite(seeds: &[u64]) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut cases = Vec::new();
    for case in Case::all() {
        for &seed in seeds {
            cases.push(run_case::<f32>(case, seed)?);
            cases.push(run_case::<f64>(case, seed)?);
        }
    }
    Ok(SuiteReport { cases, seconds: start.elapsed().as_secs_f64() })
}
