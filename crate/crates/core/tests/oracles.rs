//! Forward values checked against brute-force references written here.

use approx::assert_relative_eq;
use cstf_core::attention::{self, FusionMode};
use cstf_core::codec::{self, ModelConfig};
use cstf_core::matching;
use cstf_core::patching;
use cstf_core::{ParamSet, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Plain triple loop, `a: n×k`, `b: k×m`.
fn matmul_ref(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[i * m + j] = (0..k).map(|t| a[i * k + t] * b[t * m + j]).sum();
        }
    }
    out
}

fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    x.chunks(cols)
        .flat_map(|row| {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            row.iter().map(move |v| v.exp() / z).collect::<Vec<_>>()
        })
        .collect()
}

fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    (0..cols * rows).map(|i| x[(i % rows) * cols + i / rows]).collect()
}

#[test]
fn matmul_gradient_of_sum_is_ones_times_bt() {
    let mut r = rng(1);
    let a = Tensor::<f64>::uniform(&[3, 4], 1.0, &mut r).with_requires_grad(true);
    let b = Tensor::<f64>::uniform(&[4, 2], 1.0, &mut r);
    let bt = transpose(b.data(), 4, 2);
    let mut tape = Tape::new();
    let av = tape.leaf(a);
    let bv = tape.constant(b);
    let c = tape.matmul(av, bv).unwrap();
    let s = tape.sum(c);
    tape.backward(s).unwrap();
    let expect = matmul_ref(&[1.0; 6], &bt, 3, 2, 4);
    for (g, e) in tape.grad(av).unwrap().iter().zip(&expect) {
        assert_relative_eq!(*g, *e, epsilon = 1e-12);
    }
}

#[test]
fn gelu_at_one_matches_simpson_integral() {
    // Φ(1) = 1/2 + ∫₀¹ φ by composite Simpson with 2000 panels
    let n = 2000;
    let h = 1.0 / n as f64;
    let phi = |t: f64| (-t * t / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let integral = (0..=n)
        .map(|i| {
            let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
            w * phi(i as f64 * h)
        })
        .sum::<f64>()
        * h
        / 3.0;
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::<f64>::scalar(1.0));
    let y = tape.gelu(x);
    assert_relative_eq!(tape.value(y).data()[0], 0.5 + integral, epsilon = 1e-12);
    assert_relative_eq!(tape.value(y).data()[0], 0.8413, epsilon = 1e-4);
}

#[test]
fn average_pool_partition_matches_brute_force() {
    let mut r = rng(2);
    let (c, side, g) = (3, 8, 4);
    let x = Tensor::<f64>::uniform(&[c, side, side], 1.0, &mut r);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let tokens = patching::partition(&mut tape, xv, g).unwrap();
    assert_eq!(tape.shape(tokens), [g * g, c]);
    let k = side / g;
    for gy in 0..g {
        for gx in 0..g {
            for ch in 0..c {
                let mut s = 0.0;
                for y in gy * k..(gy + 1) * k {
                    for xx in gx * k..(gx + 1) * k {
                        s += x.at(&[ch, y, xx]);
                    }
                }
                let got = tape.value(tokens).at(&[gy * g + gx, ch]);
                assert_relative_eq!(got, s / (k * k) as f64, epsilon = 1e-12);
            }
        }
    }
}

#[test]
fn pool_after_upsample_is_identity() {
    let mut r = rng(3);
    let x = Tensor::<f64>::uniform(&[2, 3, 3], 1.0, &mut r);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let up = tape.upsample_nearest(xv, 4).unwrap();
    let back = tape.avg_pool2d(up, 4, 4).unwrap();
    assert!(tape.value(back).max_abs_diff(&x) < 1e-15);
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut r = rng(4);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::<f64>::uniform(&[5, 7], 30.0, &mut r));
    let s = tape.softmax(x, 1).unwrap();
    for row in tape.value(s).data().chunks(7) {
        assert_relative_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }
}

#[test]
fn scaled_attention_matches_reference() {
    let mut r = rng(5);
    let (p, d, dv) = (4, 3, 2);
    let q = Tensor::<f64>::uniform(&[p, d], 1.0, &mut r);
    let k = Tensor::<f64>::uniform(&[p, d], 1.0, &mut r);
    let v = Tensor::<f64>::uniform(&[p, dv], 1.0, &mut r);
    let scores: Vec<f64> = matmul_ref(q.data(), &transpose(k.data(), p, d), p, d, p)
        .iter()
        .map(|s| s / (d as f64).sqrt())
        .collect();
    let w = softmax_rows(&scores, p);
    let expect = matmul_ref(&w, v.data(), p, p, dv);
    let mut tape = Tape::new();
    let (qv, kv, vv) = (tape.constant(q), tape.constant(k), tape.constant(v));
    let att = attention::scaled_attention(&mut tape, qv, kv, vv).unwrap();
    for (a, b) in tape.value(att.output).data().iter().zip(&expect) {
        assert_relative_eq!(*a, *b, epsilon = 1e-12);
    }
    for (a, b) in tape.value(att.weights).data().iter().zip(&w) {
        assert_relative_eq!(*a, *b, epsilon = 1e-12);
    }
}

fn block_params(widths: &[usize], d: usize, seed: u64) -> ParamSet<f64> {
    let mut p = ParamSet::new();
    attention::init_block_params(&mut p, &mut rng(seed), widths, d, FusionMode::Concat);
    p
}

fn attend_ref(x: &[f64], wq: &[f64], wk: &[f64], wv: &[f64], p: usize, c: usize, d: usize) -> Vec<f64> {
    let q = matmul_ref(x, wq, p, c, d);
    let k = matmul_ref(x, wk, p, c, d);
    let v = matmul_ref(x, wv, p, c, d);
    let s: Vec<f64> = matmul_ref(&q, &transpose(&k, p, d), p, d, p).iter().map(|s| s / (d as f64).sqrt()).collect();
    matmul_ref(&softmax_rows(&s, p), &v, p, p, d)
}

#[test]
fn channel_cross_attention_two_stages_brute_force() {
    let (p, d, widths) = (4, 3, [3usize, 5]);
    let params = block_params(&widths, d, 6);
    let mut r = rng(7);
    let xs: Vec<Tensor<f64>> = widths.iter().map(|&c| Tensor::uniform(&[p, c], 1.0, &mut r)).collect();
    let w = |n: &str| params.get(n).unwrap().data().to_vec();
    let mut total = vec![0.0; p * d];
    for (j, x) in xs.iter().enumerate() {
        let s = j + 1;
        let part = attend_ref(
            x.data(),
            &w(&format!("cstf.ca.wq.{s}")),
            &w(&format!("cstf.ca.wk.{s}")),
            &w(&format!("cstf.ca.wv.{s}")),
            p,
            widths[j],
            d,
        );
        total.iter_mut().zip(part).for_each(|(t, v)| *t += v);
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let vars: Vec<_> = xs.iter().map(|x| tape.constant(x.clone())).collect();
    let out = attention::channel_cross_attention(&mut tape, &vars, &bound).unwrap();
    for (i, &c) in widths.iter().enumerate() {
        let expect = matmul_ref(&total, &w(&format!("cstf.ca.wo.{}", i + 1)), p, d, c);
        for (a, b) in tape.value(out.enriched[i]).data().iter().zip(&expect) {
            assert_relative_eq!(*a, *b, epsilon = 1e-12);
        }
    }
}

#[test]
fn single_stage_channel_attention_is_plain_attention() {
    let (p, c) = (5, 4);
    let mut params = block_params(&[c], c, 8);
    params.insert("cstf.ca.wo.1", Tensor::eye(c));
    let mut r = rng(9);
    let x = Tensor::<f64>::uniform(&[p, c], 1.0, &mut r);
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let xv = tape.constant(x);
    let ca = attention::channel_cross_attention(&mut tape, &[xv], &bound).unwrap();
    let proj = |tape: &mut Tape<f64>, n: &str| {
        let w = bound.get(n).unwrap();
        tape.matmul(xv, w).unwrap()
    };
    let (q, k, v) = (proj(&mut tape, "cstf.ca.wq.1"), proj(&mut tape, "cstf.ca.wk.1"), proj(&mut tape, "cstf.ca.wv.1"));
    let att = attention::scaled_attention(&mut tape, q, k, v).unwrap();
    assert!(tape.value(ca.enriched[0]).max_abs_diff(tape.value(att.output)) < 1e-14);
}

#[test]
fn concat_fusion_matches_reference() {
    let (p, c) = (4, 3);
    let mut params = block_params(&[c], 2, 10);
    let mut r = rng(11);
    params.insert("cstf.cat.1.b", Tensor::uniform(&[c], 1.0, &mut r));
    let [ca, sca, orig] = [0, 1, 2].map(|_| Tensor::<f64>::uniform(&[p, c], 1.0, &mut r));
    let w = params.get("cstf.cat.1.w").unwrap().data().to_vec();
    let b = params.get("cstf.cat.1.b").unwrap().data().to_vec();
    let joined: Vec<f64> = (0..p)
        .flat_map(|i| ca.data()[i * c..(i + 1) * c].iter().chain(&sca.data()[i * c..(i + 1) * c]).copied().collect::<Vec<_>>())
        .collect();
    let proj = matmul_ref(&joined, &w, p, 2 * c, c);
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let (cv, sv, ov) = (tape.constant(ca), tape.constant(sca), tape.constant(orig.clone()));
    let out = attention::fuse(&mut tape, Some(cv), Some(sv), ov, FusionMode::Concat, 1, &bound).unwrap();
    for (idx, got) in tape.value(out).data().iter().enumerate() {
        assert_relative_eq!(*got, orig.data()[idx] + proj[idx] + b[idx % c], epsilon = 1e-12);
    }
}

#[test]
fn model_output_shape_and_zero_weight_uniformity() {
    let cfg = ModelConfig::default();
    let mut params = cfg.init_params::<f64>(12).unwrap();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let x = tape.constant(Tensor::uniform(&[1, 32, 32], 1.0, &mut rng(13)));
    let out = codec::model_forward(&mut tape, x, &bound, &cfg).unwrap();
    assert_eq!(tape.shape(out.probs), [cfg.classes, 32, 32]);
    assert_eq!(out.tokens.len(), cfg.widths.len() - 1);

    params.zero_matching(|n| n.starts_with("head."));
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let x = tape.constant(Tensor::uniform(&[1, 32, 32], 1.0, &mut rng(13)));
    let out = codec::model_forward(&mut tape, x, &bound, &cfg).unwrap();
    for &v in tape.value(out.probs).data() {
        assert_relative_eq!(v, 1.0 / cfg.classes as f64, epsilon = 1e-14);
    }
}

#[test]
fn similarity_matches_brute_force() {
    let mut r = rng(14);
    let a = Tensor::<f64>::uniform(&[3, 2], 1.0, &mut r);
    let b = Tensor::<f64>::uniform(&[4, 2], 1.0, &mut r);
    let mut tape = Tape::new();
    let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let s = matching::similarity_matrix(&mut tape, av, bv, 0.1).unwrap();
    for i in 0..3 {
        for j in 0..4 {
            let dot = a.at(&[i, 0]) * b.at(&[j, 0]) + a.at(&[i, 1]) * b.at(&[j, 1]);
            assert_relative_eq!(tape.value(s).at(&[i, j]), dot / 0.1, epsilon = 1e-12);
        }
    }
}

#[test]
fn mutual_nn_matches_brute_force() {
    let mut r = rng(15);
    for _ in 0..50 {
        let m = Tensor::<f64>::uniform(&[4, 5], 1.0, &mut r);
        let m = Tensor::new(&[4, 5], m.data().iter().map(|v| v.abs()).collect()).unwrap();
        let got = matching::mutual_nn(&m, 0.3).unwrap();
        let mut want = Vec::new();
        for i in 0..4 {
            for j in 0..5 {
                let v = m.at(&[i, j]);
                let row_max = (0..5).all(|k| m.at(&[i, k]) <= v);
                let col_max = (0..4).all(|k| m.at(&[k, j]) <= v);
                if row_max && col_max && v > 0.3 {
                    want.push((i, j));
                }
            }
        }
        let got: Vec<_> = got.iter().map(|m| (m.index_a, m.index_b)).collect();
        assert_eq!(got, want);
    }
}
