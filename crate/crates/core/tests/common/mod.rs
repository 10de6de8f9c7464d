#![allow(dead_code)]

pub mod oracle;

use pointformer::{PointCloud, Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform<T: Real>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor<T> {
    let data = (0..rows * cols).map(|_| T::from_f64_lossy(rng.gen_range(lo..hi))).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Points in the unit cube with features in [-1, 1].
pub fn cloud<T: Real>(seed: u64, n: usize, channels: usize) -> PointCloud<T> {
    let mut r = rng(seed);
    let coords = uniform(&mut r, n, 3, 0.0, 1.0);
    let feats = uniform(&mut r, n, channels, -1.0, 1.0);
    PointCloud::new(coords, feats).unwrap()
}

pub fn permutation(seed: u64, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut rng(seed));
    p
}

pub fn d2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn rows_f64<T: Real>(t: &Tensor<T>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).iter().map(|v| v.to_f64_lossy()).collect()).collect()
}

/// Pairs each row of `coords` with the same row of `feats`, sorted by
/// coordinate.
pub fn sorted_pairs<T: Real>(coords: &Tensor<T>, feats: &Tensor<T>) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut v: Vec<_> = rows_f64(coords).into_iter().zip(rows_f64(feats)).collect();
    v.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    v
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}
