//! The cross spatial-temporal fusion block.
//!
//! Channel cross attention (CA) runs single-head attention inside every stage
//! and sums the per-stage results, so each stage receives context from all
//! scales. Spatial cross attention (SCA) refines one stage's tokens and
//! up-projects them back to the stage width. A [`FusionMode`] decides how the
//! two branches are combined with the residual tokens.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::params::{fan_in_uniform, Bound, ParamSet};
use crate::tensor::{Real, Tensor};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    CaOnly,
    ScaOnly,
    /// CA and SCA in parallel, outputs summed.
    Sum,
    /// CA and SCA in parallel, concatenated then projected back to the stage width.
    #[default]
    Concat,
    /// SCA applied to the CA output.
    Sequential,
}

impl FusionMode {
    pub const ALL: [FusionMode; 5] = [
        FusionMode::CaOnly,
        FusionMode::ScaOnly,
        FusionMode::Sum,
        FusionMode::Concat,
        FusionMode::Sequential,
    ];

    pub fn uses_ca(self) -> bool {
        self != FusionMode::ScaOnly
    }

    pub fn uses_sca(self) -> bool {
        self != FusionMode::CaOnly
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::CaOnly => "ca_only",
            FusionMode::ScaOnly => "sca_only",
            FusionMode::Sum => "sum",
            FusionMode::Concat => "concat",
            FusionMode::Sequential => "sequential",
        })
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionMode::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion mode `{s}`")))
    }
}

/// Output of [`scaled_attention`] together with its row-stochastic weight matrix.
#[derive(Clone, Copy, Debug)]
pub struct Attended {
    pub output: Var,
    pub weights: Var,
}

/// `softmax(Q·Kᵀ / √d) · V` for P×d queries and keys.
pub fn scaled_attention<T: Real>(tape: &mut Tape<T>, q: Var, k: Var, v: Var) -> Result<Attended> {
    let [p, d] = tape.value(q).dims2()?;
    let [pk, dk] = tape.value(k).dims2()?;
    let [pv, _] = tape.value(v).dims2()?;
    if d != dk || pk != pv {
        return Err(Error::Dimension {
            op: "scaled_attention",
            lhs: vec![p, d],
            rhs: vec![pk, dk],
        });
    }
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, T::lit(1.0 / (d as f64).sqrt()));
    let weights = tape.softmax(scaled, 1)?;
    let output = tape.matmul(weights, v)?;
    Ok(Attended { output, weights })
}

fn project<T: Real>(tape: &mut Tape<T>, bound: &Bound, x: Var, name: &str) -> Result<Var> {
    let w = bound.get(name)?;
    tape.matmul(x, w)
}

/// Enriched tokens for every stage plus the per-stage attention matrices.
#[derive(Clone, Debug)]
pub struct CrossStage {
    pub enriched: Vec<Var>,
    pub weights: Vec<Var>,
}

/// Channel cross attention over all stages (`cstf.ca.*`).
///
/// Stage `j` attends within itself through `wq.j`, `wk.j`, `wv.j`; the
/// attention outputs are summed over stages and mapped back to each stage's
/// width through `wo.i`.
pub fn channel_cross_attention<T: Real>(tape: &mut Tape<T>, tokens: &[Var], bound: &Bound) -> Result<CrossStage> {
    let first = *tokens
        .first()
        .ok_or_else(|| Error::Contract("channel cross attention needs at least one stage".into()))?;
    let p = tape.shape(first)[0];
    let mut weights = Vec::with_capacity(tokens.len());
    let mut total: Option<Var> = None;
    for (j, &t) in tokens.iter().enumerate() {
        let pj = tape.value(t).dims2()?[0];
        if pj != p {
            return Err(Error::Contract(format!(
                "stage {} has {pj} tokens, stage 1 has {p}; token counts must agree",
                j + 1
            )));
        }
        let s = j + 1;
        let q = project(tape, bound, t, &format!("cstf.ca.wq.{s}"))?;
        let k = project(tape, bound, t, &format!("cstf.ca.wk.{s}"))?;
        let v = project(tape, bound, t, &format!("cstf.ca.wv.{s}"))?;
        let att = scaled_attention(tape, q, k, v)?;
        weights.push(att.weights);
        total = Some(match total {
            None => att.output,
            Some(acc) => tape.add(acc, att.output)?,
        });
    }
    let total = total.expect("at least one stage");
    let enriched = (1..=tokens.len())
        .map(|i| project(tape, bound, total, &format!("cstf.ca.wo.{i}")))
        .collect::<Result<_>>()?;
    Ok(CrossStage { enriched, weights })
}

/// Spatial cross attention for one stage (`cstf.sca.*.{stage}`), up-projected to the stage width.
pub fn spatial_cross_attention<T: Real>(tape: &mut Tape<T>, tokens: Var, stage: usize, bound: &Bound) -> Result<Attended> {
    let q = project(tape, bound, tokens, &format!("cstf.sca.wq.{stage}"))?;
    let k = project(tape, bound, tokens, &format!("cstf.sca.wk.{stage}"))?;
    let v = project(tape, bound, tokens, &format!("cstf.sca.wv.{stage}"))?;
    let att = scaled_attention(tape, q, k, v)?;
    let output = project(tape, bound, att.output, &format!("cstf.sca.up.{stage}"))?;
    Ok(Attended { output, weights: att.weights })
}

/// Residual fusion of the branch outputs onto `original`.
///
/// `sca` is the SCA output appropriate for the mode: for
/// [`FusionMode::Sequential`] it must already be SCA applied to the CA output.
pub fn fuse<T: Real>(
    tape: &mut Tape<T>,
    ca: Option<Var>,
    sca: Option<Var>,
    original: Var,
    mode: FusionMode,
    stage: usize,
    bound: &Bound,
) -> Result<Var> {
    let need = |branch: Option<Var>, what: &str| {
        branch.ok_or_else(|| Error::Contract(format!("fusion mode {mode} requires the {what} branch")))
    };
    match mode {
        FusionMode::CaOnly => {
            let ca = need(ca, "CA")?;
            tape.add(original, ca)
        }
        FusionMode::ScaOnly | FusionMode::Sequential => {
            let sca = need(sca, "SCA")?;
            tape.add(original, sca)
        }
        FusionMode::Sum => {
            let (ca, sca) = (need(ca, "CA")?, need(sca, "SCA")?);
            let with_ca = tape.add(original, ca)?;
            tape.add(with_ca, sca)
        }
        FusionMode::Concat => {
            let (ca, sca) = (need(ca, "CA")?, need(sca, "SCA")?);
            let joined = tape.concat(&[ca, sca])?;
            let w = bound.get(&format!("cstf.cat.{stage}.w"))?;
            let b = bound.get(&format!("cstf.cat.{stage}.b"))?;
            let projected = tape.matmul(joined, w)?;
            let projected = tape.add_bias(projected, b)?;
            tape.add(original, projected)
        }
    }
}

/// Per-stage block outputs and every attention matrix computed on the way.
#[derive(Clone, Debug)]
pub struct BlockOutput {
    pub tokens: Vec<Var>,
    pub attention_weights: Vec<Var>,
}

fn stage_norm<T: Real>(tape: &mut Tape<T>, bound: &Bound, x: Var, name: &str) -> Result<Var> {
    let g = bound.get(&format!("{name}.g"))?;
    let b = bound.get(&format!("{name}.b"))?;
    tape.layer_norm(x, g, b, T::lit(LN_EPS))
}

/// LN → CA/SCA → fuse → LN → GeLU over all stages; output shapes equal input shapes.
pub fn cstf_block<T: Real>(tape: &mut Tape<T>, stages: &[Var], bound: &Bound, mode: FusionMode) -> Result<BlockOutput> {
    let normed = stages
        .iter()
        .enumerate()
        .map(|(i, &t)| stage_norm(tape, bound, t, &format!("cstf.ln1.{}", i + 1)))
        .collect::<Result<Vec<_>>>()?;

    let mut attention_weights = Vec::new();
    let ca = if mode.uses_ca() {
        let cross = channel_cross_attention(tape, &normed, bound)?;
        attention_weights.extend(&cross.weights);
        Some(cross.enriched)
    } else {
        None
    };

    let mut tokens = Vec::with_capacity(stages.len());
    for (i, (&original, &x)) in stages.iter().zip(&normed).enumerate() {
        let stage = i + 1;
        let ca_i = ca.as_ref().map(|c| c[i]);
        let sca_i = if mode.uses_sca() {
            let input = if mode == FusionMode::Sequential { ca_i.expect("sequential uses CA") } else { x };
            let att = spatial_cross_attention(tape, input, stage, bound)?;
            attention_weights.push(att.weights);
            Some(att.output)
        } else {
            None
        };
        let fused = fuse(tape, ca_i, sca_i, original, mode, stage, bound)?;
        let out = stage_norm(tape, bound, fused, &format!("cstf.ln2.{stage}"))?;
        tokens.push(tape.gelu(out));
    }
    Ok(BlockOutput { tokens, attention_weights })
}

/// Weight names that carry the attention branches; zeroing them leaves only the residual path.
pub fn is_attention_path(name: &str) -> bool {
    ["cstf.ca.wv.", "cstf.ca.wo.", "cstf.sca.wv.", "cstf.sca.up.", "cstf.cat."]
        .iter()
        .any(|p| name.starts_with(p))
}

/// Block weights for stages of the given widths with shared attention width `attn_dim`.
pub fn init_block_params<T: Real, R: Rng + ?Sized>(
    params: &mut ParamSet<T>,
    rng: &mut R,
    widths: &[usize],
    attn_dim: usize,
    mode: FusionMode,
) {
    for (i, &c) in widths.iter().enumerate() {
        let s = i + 1;
        for ln in ["ln1", "ln2"] {
            params.insert(format!("cstf.{ln}.{s}.g"), Tensor::ones(&[c]));
            params.insert(format!("cstf.{ln}.{s}.b"), Tensor::zeros(&[c]));
        }
        if mode.uses_ca() {
            for w in ["wq", "wk", "wv"] {
                params.insert(format!("cstf.ca.{w}.{s}"), fan_in_uniform(&[c, attn_dim], c, rng));
            }
            params.insert(format!("cstf.ca.wo.{s}"), fan_in_uniform(&[attn_dim, c], attn_dim, rng));
        }
        if mode.uses_sca() {
            // in sequential mode SCA consumes CA output of the same width
            for w in ["wq", "wk", "wv"] {
                params.insert(format!("cstf.sca.{w}.{s}"), fan_in_uniform(&[c, attn_dim], c, rng));
            }
            params.insert(format!("cstf.sca.up.{s}"), fan_in_uniform(&[attn_dim, c], attn_dim, rng));
        }
        if mode == FusionMode::Concat {
            params.insert(format!("cstf.cat.{s}.w"), fan_in_uniform(&[2 * c, c], 2 * c, rng));
            params.insert(format!("cstf.cat.{s}.b"), Tensor::zeros(&[c]));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(shape, 1.0, &mut rng)
    }

    #[test]
    fn zero_queries_average_values() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::zeros(&[4, 3]));
        let k = tape.constant(rand_tensor(&[4, 3], 1));
        let v = tape.constant(rand_tensor(&[4, 2], 2));
        let att = scaled_attention(&mut tape, q, k, v).unwrap();
        for &w in tape.value(att.weights).data() {
            assert_relative_eq!(w, 0.25, epsilon = 1e-15);
        }
        let vd = tape.value(v).data().to_vec();
        let mean = [(vd[0] + vd[2] + vd[4] + vd[6]) / 4.0, (vd[1] + vd[3] + vd[5] + vd[7]) / 4.0];
        for row in tape.value(att.output).data().chunks(2) {
            assert_relative_eq!(row[0], mean[0], epsilon = 1e-14);
            assert_relative_eq!(row[1], mean[1], epsilon = 1e-14);
        }
    }

    #[test]
    fn saturated_identity_selects_rows() {
        let mut tape = Tape::new();
        let eye = Tensor::<f64>::from_fn(&[3, 3], |i| if i / 3 == i % 3 { 60.0 } else { 0.0 });
        let q = tape.constant(eye.clone());
        let k = tape.constant(eye);
        let v = tape.constant(rand_tensor(&[3, 4], 9));
        let att = scaled_attention(&mut tape, q, k, v).unwrap();
        assert!(tape.value(att.output).max_abs_diff(tape.value(v)) < 1e-12);
    }

    #[test]
    fn attention_rejects_mismatched_inputs() {
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::zeros(&[4, 3]));
        let k = tape.constant(Tensor::zeros(&[4, 2]));
        assert!(scaled_attention(&mut tape, q, k, k).is_err());
    }

    #[test]
    fn fusion_mode_parsing() {
        for m in FusionMode::ALL {
            assert_eq!(m.to_string().parse::<FusionMode>().unwrap(), m);
        }
        assert!(matches!("diagonal".parse::<FusionMode>(), Err(Error::Config(_))));
    }

    #[test]
    fn fuse_reports_missing_branch() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[2, 2]));
        let err = fuse(&mut tape, None, Some(x), x, FusionMode::Sum, 1, &Bound::default()).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn unequal_token_counts_are_rejected() {
        let mut params = ParamSet::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        init_block_params(&mut params, &mut rng, &[2, 2], 2, FusionMode::CaOnly);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let a = tape.constant(Tensor::zeros(&[4, 2]));
        let b = tape.constant(Tensor::zeros(&[9, 2]));
        let err = channel_cross_attention(&mut tape, &[a, b], &bound).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }
}
