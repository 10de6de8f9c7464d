#![allow(dead_code)]

//! Plain-loop reference implementations.

use pointformer::attention::AttentionLayer;
use pointformer::nn::{FeedForward, Linear};
use pointformer::Tensor;

use super::rows_f64;

pub type M = Vec<Vec<f64>>;

pub fn mat(t: &Tensor<f64>) -> M {
    rows_f64(t)
}

pub fn linear(x: &M, l: &Linear<f64>) -> M {
    let w = mat(&l.weight.value());
    let b = l.bias.as_ref().map(|b| b.value().data().to_vec());
    x.iter()
        .map(|row| {
            (0..w[0].len())
                .map(|o| {
                    let s: f64 = row.iter().zip(&w).map(|(v, wr)| v * wr[o]).sum();
                    s + b.as_ref().map_or(0.0, |b| b[o])
                })
                .collect()
        })
        .collect()
}

pub fn ffn(x: &M, f: &FeedForward<f64>) -> M {
    let h: M = linear(x, &f.inner).into_iter().map(|r| r.into_iter().map(|v| v.max(0.0)).collect()).collect();
    linear(&h, &f.outer)
}

pub fn pe_pair(pe: &FeedForward<f64>, a: &[f64], b: &[f64]) -> Vec<f64> {
    let d = vec![(0..3).map(|c| a[c] - b[c]).collect::<Vec<f64>>()];
    ffn(&d, pe).remove(0)
}

/// Straight double loop over queries and keys; returns (attention output
/// with residual, weights[head][row][key]).
pub fn attention_oracle(
    layer: &AttentionLayer<f64>,
    pe: Option<&FeedForward<f64>>,
    q: &M,
    kv: &M,
    xq: &M,
    xk: &M,
    groups: usize,
) -> (M, Vec<M>) {
    let d = q[0].len();
    let heads = layer.heads;
    let dh = d / heads;
    let (nq, nk) = (q.len() / groups, kv.len() / groups);
    let (qq, kk, vv) = (linear(q, &layer.wq), linear(kv, &layer.wk), linear(kv, &layer.wv));
    let mut out = q.clone();
    let mut weights = vec![vec![]; heads];
    for g in 0..groups {
        for i in 0..nq {
            let r = g * nq + i;
            let bias: Vec<Vec<f64>> = (0..nk)
                .map(|j| pe.map_or(vec![0.0; heads], |p| pe_pair(p, &xq[r], &xk[g * nk + j])))
                .collect();
            for m in 0..heads {
                let logits: Vec<f64> = (0..nk)
                    .map(|j| {
                        let dot: f64 = (0..dh).map(|c| qq[r][m * dh + c] * kk[g * nk + j][m * dh + c]).sum();
                        dot / (dh as f64).sqrt() + bias[j][m]
                    })
                    .collect();
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                let a: Vec<f64> = e.iter().map(|v| v / z).collect();
                for c in 0..dh {
                    out[r][m * dh + c] += (0..nk).map(|j| a[j] * vv[g * nk + j][m * dh + c]).sum::<f64>();
                }
                weights[m].push(a);
            }
        }
    }
    (out, weights)
}

pub fn add(a: &M, b: &M) -> M {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect()).collect()
}

pub fn max_diff(a: &M, b: &M) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

