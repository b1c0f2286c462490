//! Dual-softmax matching head.
//!
//! Similarities between two descriptor sets are turned into matching
//! confidences by multiplying a row-wise and a column-wise softmax. Training
//! treats every ground-truth pair as a classification target.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::io::{self, BufRead, Write};

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::params::{fan_in_uniform, Bound, ParamSet};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_TEMPERATURE: f64 = 0.1;

/// `S[a, b] = ⟨desc_a[a], desc_b[b]⟩ / τ`.
pub fn similarity_matrix<T: Real>(tape: &mut Tape<T>, desc_a: Var, desc_b: Var, temperature: T) -> Result<Var> {
    if !(temperature > T::zero()) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let [_, ca] = tape.value(desc_a).dims2()?;
    let [_, cb] = tape.value(desc_b).dims2()?;
    if ca != cb {
        return Err(Error::Dimension {
            op: "similarity_matrix",
            lhs: tape.shape(desc_a).to_vec(),
            rhs: tape.shape(desc_b).to_vec(),
        });
    }
    let bt = tape.transpose(desc_b)?;
    let dots = tape.matmul(desc_a, bt)?;
    Ok(tape.scale(dots, temperature.recip()))
}

/// Elementwise product of the softmax over each row and the softmax over each column.
pub fn dual_softmax<T: Real>(tape: &mut Tape<T>, scores: Var) -> Result<Var> {
    tape.value(scores).dims2()?;
    let rows = tape.softmax(scores, 1)?;
    let cols = tape.softmax(scores, 0)?;
    tape.mul(rows, cols)
}

fn check_pairs(pairs: &[(usize, usize)], a: usize, b: usize) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::Contract("matching loss needs at least one ground-truth pair".into()));
    }
    let mut rows = HashSet::new();
    let mut cols = HashSet::new();
    for &(i, j) in pairs {
        if i >= a || j >= b {
            return Err(Error::Shape(format!("pair ({i}, {j}) outside {a}×{b}")));
        }
        if !rows.insert(i) || !cols.insert(j) {
            return Err(Error::Contract(format!("pair ({i}, {j}) reuses a row or column")));
        }
    }
    Ok(())
}

/// Mean `−ln P[a, b]` over the ground-truth pairs.
pub fn matching_loss<T: Real>(tape: &mut Tape<T>, confidence: Var, pairs: &[(usize, usize)]) -> Result<Var> {
    let [a, b] = tape.value(confidence).dims2()?;
    check_pairs(pairs, a, b)?;
    let flat: Vec<usize> = pairs.iter().map(|&(i, j)| i * b + j).collect();
    let picked = tape.pick(confidence, &flat)?;
    let logs = tape.ln(picked);
    let mean = tape.mean(logs);
    Ok(tape.scale(mean, -T::one()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Match {
    pub index_a: usize,
    pub index_b: usize,
    pub confidence: f64,
}

/// Lowest index of the maximum; NaNs never win.
fn argmax(values: impl Iterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.enumerate() {
        if best.map_or(!v.is_nan(), |(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Mutual nearest neighbours of a confidence matrix above `threshold`.
pub fn mutual_nn<T: Real>(confidence: &Tensor<T>, threshold: f64) -> Result<Vec<Match>> {
    if !(0.0..1.0).contains(&threshold) {
        return Err(Error::Config(format!("threshold must lie in [0, 1), got {threshold}")));
    }
    let [a, b] = confidence.dims2()?;
    let d = confidence.data();
    let at = |i: usize, j: usize| d[i * b + j].as_f64();
    let col_best: Vec<Option<usize>> = (0..b).map(|j| argmax((0..a).map(|i| at(i, j)))).collect();
    let mut out = Vec::new();
    for i in 0..a {
        let Some(j) = argmax((0..b).map(|j| at(i, j))) else { continue };
        if col_best[j] == Some(i) && at(i, j) > threshold {
            out.push(Match { index_a: i, index_b: j, confidence: at(i, j) });
        }
    }
    Ok(out)
}

/// Descriptor head: pointwise projection (`match.w`, `match.b`) then unit row norm.
pub fn descriptors<T: Real>(tape: &mut Tape<T>, tokens: Var, bound: &Bound) -> Result<Var> {
    let w = bound.get("match.w")?;
    let b = bound.get("match.b")?;
    let proj = tape.matmul(tokens, w)?;
    let proj = tape.add_bias(proj, b)?;
    Ok(tape.normalize_rows(proj))
}

pub fn init_head_params<T: Real, R: Rng + ?Sized>(params: &mut ParamSet<T>, rng: &mut R, channels: usize) {
    params.insert("match.w", fan_in_uniform(&[channels, channels], channels, rng));
    params.insert("match.b", Tensor::zeros(&[channels]));
}

/// Header line of a match list.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchListHeader {
    pub rows: usize,
    pub cols: usize,
    pub threshold: f64,
    pub temperature: f64,
}

/// Writes `A=..,B=..,theta=..,tau=..` followed by one `index_a,index_b,confidence` line per match.
pub fn write_matches<W: Write>(mut out: W, header: &MatchListHeader, matches: &[Match]) -> io::Result<()> {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "A={},B={},theta={},tau={}",
        header.rows, header.cols, header.threshold, header.temperature
    );
    for m in matches {
        let _ = writeln!(s, "{},{},{}", m.index_a, m.index_b, m.confidence);
    }
    out.write_all(s.as_bytes())
}

pub fn read_matches<R: BufRead>(input: R) -> Result<(MatchListHeader, Vec<Match>)> {
    let bad = |line: &str| Error::Contract(format!("malformed match list line `{line}`"));
    let mut lines = input.lines();
    let head = lines.next().ok_or_else(|| bad(""))??;
    let mut fields = [None; 4];
    for part in head.split(',') {
        let (key, value) = part.split_once('=').ok_or_else(|| bad(&head))?;
        let slot = match key {
            "A" => 0,
            "B" => 1,
            "theta" => 2,
            "tau" => 3,
            _ => return Err(bad(&head)),
        };
        fields[slot] = Some(value.parse::<f64>().map_err(|_| bad(&head))?);
    }
    let [Some(a), Some(b), Some(theta), Some(tau)] = fields else { return Err(bad(&head)) };
    let header = MatchListHeader { rows: a as usize, cols: b as usize, threshold: theta, temperature: tau };
    let mut matches = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        let [ia, ib, c] = parts.as_slice() else { return Err(bad(&line)) };
        matches.push(Match {
            index_a: ia.parse().map_err(|_| bad(&line))?,
            index_b: ib.parse().map_err(|_| bad(&line))?,
            confidence: c.parse().map_err(|_| bad(&line))?,
        });
    }
    Ok((header, matches))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn identity_confidence_matches_diagonal() {
        let eye = Tensor::<f64>::eye(5);
        let m = mutual_nn(&eye, 0.0).unwrap();
        assert_eq!(m.len(), 5);
        assert!(m.iter().all(|m| m.index_a == m.index_b && m.confidence == 1.0));
    }

    #[test]
    fn uniform_confidence_keeps_only_first_pair() {
        let u = Tensor::<f64>::full(&[4, 3], 1.0 / 12.0);
        let m = mutual_nn(&u, 0.0).unwrap();
        assert_eq!(m, vec![Match { index_a: 0, index_b: 0, confidence: 1.0 / 12.0 }]);
    }

    #[test]
    fn threshold_range_is_checked() {
        let u = Tensor::<f64>::eye(2);
        assert!(mutual_nn(&u, 1.0).is_err());
        assert!(mutual_nn(&u, -0.1).is_err());
    }

    #[test]
    fn loss_hand_values() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::<f64>::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
        let l = matching_loss(&mut tape, p, &[(0, 0), (1, 1)]).unwrap();
        assert_eq!(tape.value(l).data()[0], 0.0);

        let p = tape.constant(Tensor::<f64>::from_f64(&[1, 2], &[(-1f64).exp(), 0.5]).unwrap());
        let l = matching_loss(&mut tape, p, &[(0, 0)]).unwrap();
        assert_relative_eq!(tape.value(l).data()[0], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn loss_contract_errors() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::<f64>::full(&[2, 2], 0.25));
        assert!(matches!(matching_loss(&mut tape, p, &[]), Err(Error::Contract(_))));
        assert!(matching_loss(&mut tape, p, &[(0, 2)]).is_err());
        assert!(matches!(matching_loss(&mut tape, p, &[(0, 0), (0, 1)]), Err(Error::Contract(_))));
    }

    #[test]
    fn constant_scores_give_uniform_confidence() {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::<f64>::full(&[3, 4], 2.5));
        let p = dual_softmax(&mut tape, s).unwrap();
        for &v in tape.value(p).data() {
            assert_relative_eq!(v, 1.0 / 12.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn temperature_and_width_are_checked() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[3, 2]));
        let b = tape.constant(Tensor::zeros(&[3, 4]));
        assert!(similarity_matrix(&mut tape, a, a, 0.0).is_err());
        assert!(similarity_matrix(&mut tape, a, b, 0.1).is_err());
        let z = similarity_matrix(&mut tape, a, a, 0.1).unwrap();
        assert!(tape.value(z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn match_list_roundtrip() {
        let header = MatchListHeader { rows: 16, cols: 12, threshold: 0.2, temperature: 0.1 };
        let matches = vec![
            Match { index_a: 0, index_b: 3, confidence: 0.91 },
            Match { index_a: 7, index_b: 1, confidence: 0.2500001 },
        ];
        let mut buf = Vec::new();
        write_matches(&mut buf, &header, &matches).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("A=16,B=12,theta=0.2,tau=0.1\n0,3,0.91\n"));
        let (h, m) = read_matches(buf.as_slice()).unwrap();
        assert_eq!(h, header);
        assert_eq!(m, matches);
    }
}
