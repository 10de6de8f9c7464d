//! Point-set primitives: sampling, neighborhoods, grouping and upsampling.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{dim_err, Error, Result};
use crate::nn::{FeedForward, ParamBuilder, RunCtx};
use crate::ops;
use crate::tensor::{Real, Tensor};

/// Coordinates `[N×3]` plus per-point features `[N×C]` (C may be 0).
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud<T: Real> {
    pub coords: Tensor<T>,
    pub feats: Tensor<T>,
}

impl<T: Real> PointCloud<T> {
    pub fn new(coords: Tensor<T>, feats: Tensor<T>) -> Result<Self> {
        if coords.shape().len() != 2 || coords.cols() != 3 {
            return Err(Error::Argument(format!(
                "coordinates must be [N×3], got {:?}",
                coords.shape()
            )));
        }
        let n = coords.rows();
        if n == 0 {
            return Err(Error::Argument("point cloud needs at least one point".into()));
        }
        if feats.shape().len() != 2 || feats.rows() != n {
            return dim_err("point_cloud", coords.shape(), feats.shape());
        }
        if !coords.is_finite() {
            return Err(Error::Argument("coordinates must be finite".into()));
        }
        Ok(Self { coords, feats })
    }

    /// Cloud without feature channels.
    pub fn from_coords(coords: Tensor<T>) -> Result<Self> {
        let n = coords.rows();
        Self::new(coords, Tensor::zeros(&[n, 0]))
    }

    pub fn len(&self) -> usize {
        self.coords.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.feats.cols()
    }

    /// Same points in a different order: row `i` of the result is row `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            coords: self.coords.select_rows(perm),
            feats: self.feats.select_rows(perm),
        }
    }

    pub fn translated(&self, t: [T; 3]) -> Self {
        let mut coords = self.coords.clone();
        for row in coords.data_mut().chunks_mut(3) {
            for (v, d) in row.iter_mut().zip(t) {
                *v = *v + d;
            }
        }
        Self {
            coords,
            feats: self.feats.clone(),
        }
    }
}

/// Where farthest point sampling starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FpsStart {
    /// Lexicographically smallest coordinate (permutation invariant).
    #[default]
    Lexicographic,
    /// Point 0 of the input order.
    FirstIndex,
}

#[inline]
pub(crate) fn dist2<T: Real>(a: &[T], b: &[T]) -> T {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Orders points by (x, y, z), then by index.
pub fn lex_cmp<T: Real>(coords: &Tensor<T>, i: usize, j: usize) -> Ordering {
    let (a, b) = (coords.row(i), coords.row(j));
    for d in 0..3 {
        match a[d].partial_cmp(&b[d]) {
            Some(Ordering::Equal) | None => continue,
            Some(o) => return o,
        }
    }
    i.cmp(&j)
}

/// Iteratively picks the point farthest from everything picked so far.
/// Distance ties go to the lexicographically smaller coordinate, then the
/// smaller index.
pub fn farthest_point_sample<T: Real>(
    coords: &Tensor<T>,
    n_out: usize,
    start: FpsStart,
) -> Result<Vec<usize>> {
    let n = coords.rows();
    if n_out == 0 || n_out > n {
        return Err(Error::Argument(format!(
            "farthest point sampling needs 1 ≤ n_out ≤ {n}, got {n_out}"
        )));
    }
    let first = match start {
        FpsStart::FirstIndex => 0,
        FpsStart::Lexicographic => (1..n).fold(0, |best, i| {
            if lex_cmp(coords, i, best) == Ordering::Less {
                i
            } else {
                best
            }
        }),
    };
    let mut picked = vec![false; n];
    let mut min_d = vec![T::infinity(); n];
    let mut out = Vec::with_capacity(n_out);
    let mut last = first;
    loop {
        picked[last] = true;
        out.push(last);
        if out.len() == n_out {
            break;
        }
        let c = coords.row(last);
        let mut best: Option<usize> = None;
        for i in 0..n {
            let d = dist2(coords.row(i), c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if picked[i] {
                continue;
            }
            best = Some(match best {
                None => i,
                Some(b) => match min_d[i].partial_cmp(&min_d[b]) {
                    Some(Ordering::Greater) => i,
                    Some(Ordering::Equal) if lex_cmp(coords, i, b) == Ordering::Less => i,
                    _ => b,
                },
            });
        }
        last = best.expect("unpicked point remains");
    }
    Ok(out)
}

/// Ball-query neighborhoods, one fixed-length row per centroid.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborhoodIndex {
    pub centroid_ids: Vec<usize>,
    /// Row-major `[N′ × K]`; slot 0 of every row is the centroid.
    pub neighbor_ids: Vec<usize>,
    pub k: usize,
    pub radius: f64,
    /// Distinct in-radius points per row (centroid included), in `1..=K`.
    pub valid_counts: Vec<usize>,
}

impl NeighborhoodIndex {
    pub fn n_groups(&self) -> usize {
        self.centroid_ids.len()
    }

    pub fn row(&self, t: usize) -> &[usize] {
        &self.neighbor_ids[t * self.k..(t + 1) * self.k]
    }

    /// Centroid index repeated K times per group, aligned with `neighbor_ids`.
    pub fn centroid_per_slot(&self) -> Vec<usize> {
        self.centroid_ids
            .iter()
            .flat_map(|&c| std::iter::repeat_n(c, self.k))
            .collect()
    }
}

/// Gathers up to `k` points within `radius` of each centroid. Slot 0 holds
/// the centroid; other in-radius points follow in ascending index order and
/// short rows are padded with the centroid. When more than `k-1` points are
/// in range the nearest ones are kept (ties by coordinate, then index).
pub fn ball_query<T: Real>(
    coords: &Tensor<T>,
    centroid_ids: &[usize],
    radius: f64,
    k: usize,
) -> Result<NeighborhoodIndex> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(Error::Argument(format!("ball query radius must be positive, got {radius}")));
    }
    if k == 0 {
        return Err(Error::Argument("ball query needs K ≥ 1".into()));
    }
    let n = coords.rows();
    if let Some(&bad) = centroid_ids.iter().find(|&&c| c >= n) {
        return Err(Error::Argument(format!("centroid index {bad} out of range for {n} points")));
    }
    let r2 = T::from_f64_lossy(radius * radius);
    let mut neighbor_ids = Vec::with_capacity(centroid_ids.len() * k);
    let mut valid_counts = Vec::with_capacity(centroid_ids.len());
    let mut cand: Vec<(T, usize)> = Vec::new();
    for &c in centroid_ids {
        let cp = coords.row(c);
        cand.clear();
        for i in 0..n {
            if i == c {
                continue;
            }
            let d = dist2(coords.row(i), cp);
            if d <= r2 {
                cand.push((d, i));
            }
        }
        if cand.len() > k - 1 {
            cand.sort_by(|a, b| {
                a.0.partial_cmp(&b.0)
                    .unwrap_or(Ordering::Equal)
                    .then_with(|| lex_cmp(coords, a.1, b.1))
            });
            cand.truncate(k - 1);
            cand.sort_by_key(|&(_, i)| i);
        }
        neighbor_ids.push(c);
        neighbor_ids.extend(cand.iter().map(|&(_, i)| i));
        neighbor_ids.extend(std::iter::repeat_n(c, k - 1 - cand.len()));
        valid_counts.push(1 + cand.len());
    }
    Ok(NeighborhoodIndex {
        centroid_ids: centroid_ids.to_vec(),
        neighbor_ids,
        k,
        radius,
        valid_counts,
    })
}

/// Group tensors, flattened to `[N′·K × ·]` with one row block per centroid.
#[derive(Clone, Debug)]
pub struct Grouped<T: Real> {
    pub coords: Var<T>,
    pub rel_coords: Var<T>,
    pub feats: Var<T>,
}

pub fn group_features<T: Real>(
    coords: &Var<T>,
    feats: &Var<T>,
    nbr: &NeighborhoodIndex,
) -> Result<Grouped<T>> {
    let abs = ops::gather_rows(coords, &nbr.neighbor_ids)?;
    let centers = ops::gather_rows(coords, &nbr.centroid_per_slot())?;
    Ok(Grouped {
        rel_coords: ops::sub(&abs, &centers)?,
        coords: abs,
        feats: ops::gather_rows(feats, &nbr.neighbor_ids)?,
    })
}

/// Up to three nearest low-resolution points for a query, with their
/// inverse-square-distance weights. An exact coordinate match takes all
/// the weight.
pub fn idw_neighbors<T: Real>(low: &Tensor<T>, q: &[T]) -> (Vec<usize>, Vec<T>) {
    let mut d: Vec<(T, usize)> = (0..low.rows()).map(|j| (dist2(low.row(j), q), j)).collect();
    let take = d.len().min(3);
    if d.len() > 3 {
        d.select_nth_unstable_by(2, |a, b| {
            a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1))
        });
    }
    let mut near: Vec<(T, usize)> = d[..take].to_vec();
    near.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));
    let ids: Vec<usize> = near.iter().map(|&(_, j)| j).collect();
    if near[0].0 == T::zero() {
        let mut w = vec![T::zero(); take];
        w[0] = T::one();
        return (ids, w);
    }
    let inv: Vec<T> = near.iter().map(|&(s, _)| T::one() / s).collect();
    let total: T = inv.iter().copied().sum();
    (ids, inv.into_iter().map(|u| u / total).collect())
}

/// Inverse-distance interpolation of `low_feats` onto `high_coords`,
/// differentiable in all three inputs.
pub fn idw_interpolate<T: Real>(
    low_coords: &Var<T>,
    low_feats: &Var<T>,
    high_coords: &Var<T>,
) -> Result<Var<T>> {
    if low_coords.rows() == 0 || low_coords.cols() != 3 || high_coords.cols() != 3 {
        return dim_err("idw_interpolate", low_coords.shape(), high_coords.shape());
    }
    if low_feats.rows() != low_coords.rows() {
        return dim_err("idw_interpolate", low_coords.shape(), low_feats.shape());
    }
    let c = low_feats.cols();
    let h = high_coords.rows();
    let lv = low_feats.value();
    let mut plan = Vec::with_capacity(h);
    let mut out = vec![T::zero(); h * c];
    for i in 0..h {
        let (ids, w) = idw_neighbors(low_coords.value(), high_coords.value().row(i));
        let orow = &mut out[i * c..(i + 1) * c];
        for (&j, &wj) in ids.iter().zip(&w) {
            for (o, &f) in orow.iter_mut().zip(lv.row(j)) {
                *o = *o + wj * f;
            }
        }
        plan.push((ids, w));
    }
    Ok(Var::from_op(
        Tensor::matrix(h, c, out)?,
        vec![low_coords.clone(), low_feats.clone(), high_coords.clone()],
        Box::new(move |g, _, parents, needs| {
            let (lc, lf, hc) = (parents[0].value(), parents[1].value(), parents[2].value());
            let mut g_lc = vec![T::zero(); lc.len()];
            let mut g_lf = vec![T::zero(); lf.len()];
            let mut g_hc = vec![T::zero(); hc.len()];
            let two = T::one() + T::one();
            for (i, (ids, w)) in plan.iter().enumerate() {
                let gi = &g[i * c..(i + 1) * c];
                for (&j, &wj) in ids.iter().zip(w) {
                    for (o, &gv) in g_lf[j * c..(j + 1) * c].iter_mut().zip(gi) {
                        *o = *o + wj * gv;
                    }
                }
                let xq = hc.row(i);
                let s: Vec<T> = ids.iter().map(|&j| dist2(lc.row(j), xq)).collect();
                if s[0] == T::zero() {
                    continue;
                }
                // dL/dw_j, then through w = u/Σu with u = 1/s.
                let a: Vec<T> = ids
                    .iter()
                    .map(|&j| lf.row(j).iter().zip(gi).map(|(&f, &gv)| f * gv).sum())
                    .collect();
                let total: T = s.iter().map(|&sv| T::one() / sv).sum();
                let aw: T = a.iter().zip(w).map(|(&av, &wv)| av * wv).sum();
                for (k, &j) in ids.iter().enumerate() {
                    let dl_du = (a[k] - aw) / total;
                    let dl_ds = -dl_du / (s[k] * s[k]);
                    for d in 0..3 {
                        let diff = two * (xq[d] - lc.row(j)[d]) * dl_ds;
                        g_hc[i * 3 + d] = g_hc[i * 3 + d] + diff;
                        g_lc[j * 3 + d] = g_lc[j * 3 + d] - diff;
                    }
                }
            }
            vec![
                needs[0].then_some(g_lc),
                needs[1].then_some(g_lf),
                needs[2].then_some(g_hc),
            ]
        }),
    ))
}

/// Upsampling stage: interpolate, concatenate skip features, feed forward.
#[derive(Clone, Debug)]
pub struct FeaturePropagation<T: Real> {
    pub ffn: FeedForward<T>,
    pub skip_channels: usize,
}

impl<T: Real> FeaturePropagation<T> {
    pub fn new(
        pb: &mut ParamBuilder<T>,
        name: &str,
        low_channels: usize,
        skip_channels: usize,
        out_channels: usize,
    ) -> Result<Self> {
        Ok(Self {
            ffn: FeedForward::new(
                pb,
                &format!("{name}.ffn"),
                low_channels + skip_channels,
                out_channels,
                out_channels,
                0.0,
            )?,
            skip_channels,
        })
    }

    pub fn forward(
        &self,
        low_coords: &Var<T>,
        low_feats: &Var<T>,
        high_coords: &Var<T>,
        skip_feats: &Var<T>,
        ctx: &RunCtx,
    ) -> Result<Var<T>> {
        let interp = idw_interpolate(low_coords, low_feats, high_coords)?;
        let x = if self.skip_channels == 0 {
            interp
        } else {
            ops::concat_cols(&[interp, skip_feats.clone()])?
        };
        self.ffn.forward(&x, ctx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(rows: &[[f64; 3]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn fps_rejects_too_many() {
        let c = pts(&[[0.0; 3], [1.0, 0.0, 0.0]]);
        assert!(farthest_point_sample(&c, 3, FpsStart::Lexicographic).is_err());
        assert!(farthest_point_sample(&c, 0, FpsStart::Lexicographic).is_err());
    }

    #[test]
    fn fps_square_with_center() {
        let c = pts(&[
            [1.0, 1.0, 0.0],
            [0.5, 0.5, 0.0],
            [0.0, 1.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 0.0, 0.0],
        ]);
        let ids = farthest_point_sample(&c, 2, FpsStart::Lexicographic).unwrap();
        assert_eq!(ids, vec![4, 0]);
    }

    #[test]
    fn fps_all_points_visits_each_once() {
        let c = pts(&[[0.0; 3], [0.0; 3], [1.0, 0.0, 0.0], [0.2, 0.1, 0.0]]);
        let mut ids = farthest_point_sample(&c, 4, FpsStart::Lexicographic).unwrap();
        ids.sort_unstable();
        assert_eq!(ids, vec![0, 1, 2, 3]);
    }

    #[test]
    fn fps_first_index_start() {
        let c = pts(&[[1.0, 0.0, 0.0], [0.0; 3], [3.0, 0.0, 0.0]]);
        let ids = farthest_point_sample(&c, 2, FpsStart::FirstIndex).unwrap();
        assert_eq!(ids, vec![0, 2]);
    }

    #[test]
    fn isolated_centroid_pads_with_itself() {
        let c = pts(&[[0.0; 3], [5.0, 0.0, 0.0], [0.0, 5.0, 0.0]]);
        let nbr = ball_query(&c, &[1], 0.5, 4).unwrap();
        assert_eq!(nbr.row(0), &[1, 1, 1, 1]);
        assert_eq!(nbr.valid_counts, vec![1]);
    }

    #[test]
    fn exactly_k_minus_one_neighbors_no_padding() {
        let c = pts(&[[0.1, 0.0, 0.0], [0.0; 3], [0.0, 0.1, 0.0], [0.0, 0.0, 0.1], [9.0; 3]]);
        let nbr = ball_query(&c, &[1], 0.5, 4).unwrap();
        assert_eq!(nbr.row(0), &[1, 0, 2, 3]);
        assert_eq!(nbr.valid_counts, vec![4]);
    }

    #[test]
    fn overfull_ball_keeps_nearest() {
        let c = pts(&[[0.0; 3], [0.3, 0.0, 0.0], [0.1, 0.0, 0.0], [0.2, 0.0, 0.0]]);
        let nbr = ball_query(&c, &[0], 1.0, 3).unwrap();
        assert_eq!(nbr.row(0), &[0, 2, 3]);
    }

    #[test]
    fn ball_query_argument_errors() {
        let c = pts(&[[0.0; 3]]);
        assert!(ball_query(&c, &[0], 0.0, 2).is_err());
        assert!(ball_query(&c, &[0], 1.0, 0).is_err());
        assert!(ball_query(&c, &[1], 1.0, 1).is_err());
    }

    #[test]
    fn token_zero_relative_coord_is_origin() {
        let c = pts(&[[0.3, 0.1, 0.2], [0.4, 0.1, 0.2], [0.9, 0.9, 0.9]]);
        let nbr = ball_query(&c, &[0, 2], 0.5, 3).unwrap();
        let coords = Var::constant(c.clone());
        let feats = Var::constant(Tensor::zeros(&[3, 1]));
        let g = group_features(&coords, &feats, &nbr).unwrap();
        for t in 0..2 {
            assert_eq!(g.rel_coords.value().row(t * 3), &[0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn idw_exact_match_copies() {
        let low = pts(&[[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        let feats = Tensor::matrix(3, 1, vec![2.0, 5.0, 7.0]).unwrap();
        let high = pts(&[[1.0, 0.0, 0.0]]);
        let out = idw_interpolate(
            &Var::constant(low),
            &Var::constant(feats),
            &Var::constant(high),
        )
        .unwrap();
        assert_eq!(out.value().data(), &[5.0]);
    }

    #[test]
    fn idw_equidistant_is_mean() {
        let low = pts(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [5.0, 5.0, 5.0]]);
        let feats = Tensor::matrix(4, 2, vec![1.0, 0.0, 4.0, 3.0, 7.0, 9.0, 100.0, 100.0]).unwrap();
        let high = pts(&[[0.0; 3]]);
        let out = idw_interpolate(
            &Var::constant(low),
            &Var::constant(feats),
            &Var::constant(high),
        )
        .unwrap();
        let v = out.value().data();
        assert!((v[0] - 4.0).abs() < 1e-12 && (v[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn idw_with_fewer_than_three_points() {
        let low = pts(&[[0.0; 3], [2.0, 0.0, 0.0]]);
        let (ids, w) = idw_neighbors(&low, &[1.0, 0.0, 0.0]);
        assert_eq!(ids, vec![0, 1]);
        assert!((w[0] - 0.5).abs() < 1e-15 && (w[1] - 0.5).abs() < 1e-15);
    }
}
