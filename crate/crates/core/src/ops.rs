//! Differentiable operations on rank-2 [`Var`]s.
//!
//! Batched variants take `groups`: the row axis holds `groups` stacked
//! blocks that are multiplied independently (one block per local region
//! or per attention head).

use std::rc::Rc;

use crate::autograd::Var;
use crate::error::{dim_err, Error, Result};
use crate::tensor::{Real, Tensor};

// Kernels. All accumulate into `out`.

/// out[m×n] += a[m×k] · b[k×n]
pub(crate) fn gemm_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// out[m×n] += a[m×k] · b[n×k]ᵀ
pub(crate) fn gemm_nt_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc = acc + x * y;
            }
            *o = *o + acc;
        }
    }
}

/// out[m×n] += a[k×m]ᵀ · b[k×n]
pub(crate) fn gemm_tn_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

fn mat<T: Real>(rows: usize, cols: usize, data: Vec<T>) -> Tensor<T> {
    Tensor::matrix(rows, cols, data).expect("kernel output size")
}

fn check_groups(op: &'static str, rows: usize, groups: usize, shape: &[usize]) -> Result<usize> {
    if groups == 0 || !rows.is_multiple_of(groups) {
        return Err(Error::Argument(format!(
            "{op}: {rows} rows cannot be split into {groups} groups (shape {shape:?})"
        )));
    }
    Ok(rows / groups)
}

/// Plain matrix product `a · b`.
pub fn matmul<T: Real>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    bmm_named("matmul", a, b, 1)
}

/// Per-group product: `a` is `[g·m × k]`, `b` is `[g·k × n]`.
pub fn bmm<T: Real>(a: &Var<T>, b: &Var<T>, groups: usize) -> Result<Var<T>> {
    bmm_named("bmm", a, b, groups)
}

fn bmm_named<T: Real>(op: &'static str, a: &Var<T>, b: &Var<T>, groups: usize) -> Result<Var<T>> {
    let m = check_groups(op, a.rows(), groups, a.shape())?;
    let k = a.cols();
    if b.rows() != groups * k {
        return dim_err(op, a.shape(), b.shape());
    }
    let n = b.cols();
    let (av, bv) = (a.value().data(), b.value().data());
    let mut out = vec![T::zero(); groups * m * n];
    for g in 0..groups {
        gemm_acc(
            &av[g * m * k..(g + 1) * m * k],
            &bv[g * k * n..(g + 1) * k * n],
            &mut out[g * m * n..(g + 1) * m * n],
            m,
            k,
            n,
        );
    }
    Ok(Var::from_op(
        mat(groups * m, n, out),
        vec![a.clone(), b.clone()],
        Box::new(move |gout, _, parents, needs| {
            let (av, bv) = (parents[0].value().data(), parents[1].value().data());
            let ga = needs[0].then(|| {
                let mut ga = vec![T::zero(); av.len()];
                for g in 0..groups {
                    gemm_nt_acc(
                        &gout[g * m * n..(g + 1) * m * n],
                        &bv[g * k * n..(g + 1) * k * n],
                        &mut ga[g * m * k..(g + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
                ga
            });
            let gb = needs[1].then(|| {
                let mut gb = vec![T::zero(); bv.len()];
                for g in 0..groups {
                    gemm_tn_acc(
                        &av[g * m * k..(g + 1) * m * k],
                        &gout[g * m * n..(g + 1) * m * n],
                        &mut gb[g * k * n..(g + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                }
                gb
            });
            vec![ga, gb]
        }),
    ))
}

/// `a · bᵀ`.
pub fn matmul_nt<T: Real>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    bmm_nt(a, b, 1)
}

/// Per-group `a · bᵀ`: `a` is `[g·m × k]`, `b` is `[g·n × k]`.
pub fn bmm_nt<T: Real>(a: &Var<T>, b: &Var<T>, groups: usize) -> Result<Var<T>> {
    let m = check_groups("bmm_nt", a.rows(), groups, a.shape())?;
    let n = check_groups("bmm_nt", b.rows(), groups, b.shape())?;
    let k = a.cols();
    if b.cols() != k {
        return dim_err("bmm_nt", a.shape(), b.shape());
    }
    let (av, bv) = (a.value().data(), b.value().data());
    let mut out = vec![T::zero(); groups * m * n];
    for g in 0..groups {
        gemm_nt_acc(
            &av[g * m * k..(g + 1) * m * k],
            &bv[g * n * k..(g + 1) * n * k],
            &mut out[g * m * n..(g + 1) * m * n],
            m,
            k,
            n,
        );
    }
    Ok(Var::from_op(
        mat(groups * m, n, out),
        vec![a.clone(), b.clone()],
        Box::new(move |gout, _, parents, needs| {
            let (av, bv) = (parents[0].value().data(), parents[1].value().data());
            let ga = needs[0].then(|| {
                let mut ga = vec![T::zero(); av.len()];
                for g in 0..groups {
                    gemm_acc(
                        &gout[g * m * n..(g + 1) * m * n],
                        &bv[g * n * k..(g + 1) * n * k],
                        &mut ga[g * m * k..(g + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
                ga
            });
            let gb = needs[1].then(|| {
                let mut gb = vec![T::zero(); bv.len()];
                for g in 0..groups {
                    gemm_tn_acc(
                        &gout[g * m * n..(g + 1) * m * n],
                        &av[g * m * k..(g + 1) * m * k],
                        &mut gb[g * n * k..(g + 1) * n * k],
                        m,
                        n,
                        k,
                    );
                }
                gb
            });
            vec![ga, gb]
        }),
    ))
}

/// Applies one `[p × n]` matrix on the left of every `[n × d]` group of `x`.
pub fn left_project<T: Real>(e: &Var<T>, x: &Var<T>, groups: usize) -> Result<Var<T>> {
    let n = check_groups("left_project", x.rows(), groups, x.shape())?;
    if e.cols() != n {
        return dim_err("left_project", e.shape(), x.shape());
    }
    let p = e.rows();
    let d = x.cols();
    let (ev, xv) = (e.value().data(), x.value().data());
    let mut out = vec![T::zero(); groups * p * d];
    for g in 0..groups {
        gemm_acc(
            ev,
            &xv[g * n * d..(g + 1) * n * d],
            &mut out[g * p * d..(g + 1) * p * d],
            p,
            n,
            d,
        );
    }
    Ok(Var::from_op(
        mat(groups * p, d, out),
        vec![e.clone(), x.clone()],
        Box::new(move |gout, _, parents, needs| {
            let (ev, xv) = (parents[0].value().data(), parents[1].value().data());
            let ge = needs[0].then(|| {
                let mut ge = vec![T::zero(); ev.len()];
                for g in 0..groups {
                    gemm_nt_acc(
                        &gout[g * p * d..(g + 1) * p * d],
                        &xv[g * n * d..(g + 1) * n * d],
                        &mut ge,
                        p,
                        d,
                        n,
                    );
                }
                ge
            });
            let gx = needs[1].then(|| {
                let mut gx = vec![T::zero(); xv.len()];
                for g in 0..groups {
                    gemm_tn_acc(
                        ev,
                        &gout[g * p * d..(g + 1) * p * d],
                        &mut gx[g * n * d..(g + 1) * n * d],
                        p,
                        n,
                        d,
                    );
                }
                gx
            });
            vec![ge, gx]
        }),
    ))
}

fn same_shape<T: Real>(op: &'static str, a: &Var<T>, b: &Var<T>) -> Result<()> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return dim_err(op, a.shape(), b.shape());
    }
    Ok(())
}

fn zip_map<T: Real>(a: &Var<T>, b: &Var<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a
        .value()
        .data()
        .iter()
        .zip(b.value().data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    mat(a.rows(), a.cols(), data)
}

pub fn add<T: Real>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    same_shape("add", a, b)?;
    Ok(Var::from_op(
        zip_map(a, b, |x, y| x + y),
        vec![a.clone(), b.clone()],
        Box::new(|g, _, _, needs| vec![needs[0].then(|| g.to_vec()), needs[1].then(|| g.to_vec())]),
    ))
}

pub fn sub<T: Real>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    same_shape("sub", a, b)?;
    Ok(Var::from_op(
        zip_map(a, b, |x, y| x - y),
        vec![a.clone(), b.clone()],
        Box::new(|g, _, _, needs| {
            vec![
                needs[0].then(|| g.to_vec()),
                needs[1].then(|| g.iter().map(|&v| -v).collect()),
            ]
        }),
    ))
}

/// Elementwise product.
pub fn mul<T: Real>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    same_shape("mul", a, b)?;
    Ok(Var::from_op(
        zip_map(a, b, |x, y| x * y),
        vec![a.clone(), b.clone()],
        Box::new(|g, _, parents, needs| {
            let (av, bv) = (parents[0].value().data(), parents[1].value().data());
            vec![
                needs[0].then(|| g.iter().zip(bv).map(|(&g, &b)| g * b).collect()),
                needs[1].then(|| g.iter().zip(av).map(|(&g, &a)| g * a).collect()),
            ]
        }),
    ))
}

/// Elementwise product with a constant tensor (dropout masks, fixed weights).
pub fn mul_const<T: Real>(a: &Var<T>, c: &Tensor<T>) -> Result<Var<T>> {
    if a.value().len() != c.len() {
        return dim_err("mul_const", a.shape(), c.shape());
    }
    let c = Rc::new(c.data().to_vec());
    let data = a.value().data().iter().zip(c.iter()).map(|(&x, &y)| x * y).collect();
    Ok(Var::from_op(
        mat(a.rows(), a.cols(), data),
        vec![a.clone()],
        Box::new(move |g, _, _, _| vec![Some(g.iter().zip(c.iter()).map(|(&g, &c)| g * c).collect())]),
    ))
}

/// Adds a `[1 × n]` row to every row of `a`.
pub fn add_row<T: Real>(a: &Var<T>, row: &Var<T>) -> Result<Var<T>> {
    let n = a.cols();
    if row.value().len() != n {
        return dim_err("add_row", a.shape(), row.shape());
    }
    let rv = row.value().data();
    let data = a
        .value()
        .data()
        .chunks(n)
        .flat_map(|r| r.iter().zip(rv).map(|(&x, &b)| x + b))
        .collect();
    Ok(Var::from_op(
        mat(a.rows(), n, data),
        vec![a.clone(), row.clone()],
        Box::new(move |g, _, _, needs| {
            let gr = needs[1].then(|| {
                let mut acc = vec![T::zero(); n];
                for r in g.chunks(n) {
                    for (a, &v) in acc.iter_mut().zip(r) {
                        *a = *a + v;
                    }
                }
                acc
            });
            vec![needs[0].then(|| g.to_vec()), gr]
        }),
    ))
}

pub fn scale<T: Real>(a: &Var<T>, s: T) -> Var<T> {
    Var::from_op(
        a.value().map(|v| v * s),
        vec![a.clone()],
        Box::new(move |g, _, _, _| vec![Some(g.iter().map(|&v| v * s).collect())]),
    )
}

pub fn relu<T: Real>(a: &Var<T>) -> Var<T> {
    Var::from_op(
        a.value().map(|v| v.max(T::zero())),
        vec![a.clone()],
        Box::new(|g, _, parents, _| {
            let x = parents[0].value().data();
            vec![Some(
                g.iter()
                    .zip(x)
                    .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                    .collect(),
            )]
        }),
    )
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Real>(a: &Var<T>) -> Var<T> {
    let n = a.cols();
    let mut out = a.value().data().to_vec();
    for row in out.chunks_mut(n) {
        softmax_in_place(row);
    }
    Var::from_op(
        mat(a.rows(), n, out),
        vec![a.clone()],
        Box::new(move |g, y, _, _| {
            let mut gx = vec![T::zero(); g.len()];
            for ((gr, yr), out) in g.chunks(n).zip(y.data().chunks(n)).zip(gx.chunks_mut(n)) {
                let dot: T = gr.iter().zip(yr).map(|(&g, &y)| g * y).sum();
                for ((o, &g), &y) in out.iter_mut().zip(gr).zip(yr) {
                    *o = y * (g - dot);
                }
            }
            vec![Some(gx)]
        }),
    )
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

/// Sum of all entries as a `[1 × 1]` value.
pub fn sum<T: Real>(a: &Var<T>) -> Var<T> {
    let len = a.value().len();
    Var::from_op(
        Tensor::scalar(a.value().sum()),
        vec![a.clone()],
        Box::new(move |g, _, _, _| vec![Some(vec![g[0]; len])]),
    )
}

pub fn mean<T: Real>(a: &Var<T>) -> Var<T> {
    let n = T::from_usize(a.value().len().max(1)).unwrap();
    scale(&sum(a), T::one() / n)
}

/// Rows of `a` in the order given by `idx`; gradients scatter-add back.
pub fn gather_rows<T: Real>(a: &Var<T>, idx: &[usize]) -> Result<Var<T>> {
    let rows = a.rows();
    if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
        return Err(Error::Internal(format!(
            "gather_rows: index {bad} out of range for {rows} rows"
        )));
    }
    let c = a.cols();
    let out = a.value().select_rows(idx);
    let idx: Rc<[usize]> = idx.into();
    Ok(Var::from_op(
        out,
        vec![a.clone()],
        Box::new(move |g, _, _, _| {
            let mut gx = vec![T::zero(); rows * c];
            for (k, &i) in idx.iter().enumerate() {
                for (o, &v) in gx[i * c..(i + 1) * c].iter_mut().zip(&g[k * c..(k + 1) * c]) {
                    *o = *o + v;
                }
            }
            vec![Some(gx)]
        }),
    ))
}

pub fn concat_cols<T: Real>(parts: &[Var<T>]) -> Result<Var<T>> {
    let first = parts.first().ok_or_else(|| Error::Argument("concat_cols of nothing".into()))?;
    let rows = first.rows();
    if let Some(p) = parts.iter().find(|p| p.rows() != rows) {
        return dim_err("concat_cols", first.shape(), p.shape());
    }
    let widths: Vec<usize> = parts.iter().map(Var::cols).collect();
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for p in parts {
            out.extend_from_slice(p.value().row(r));
        }
    }
    Ok(Var::from_op(
        mat(rows, total, out),
        parts.to_vec(),
        Box::new(move |g, _, _, needs| {
            let mut offset = 0;
            widths
                .iter()
                .zip(needs)
                .map(|(&w, &need)| {
                    let start = offset;
                    offset += w;
                    need.then(|| {
                        g.chunks(total)
                            .flat_map(|row| row[start..start + w].iter().copied())
                            .collect()
                    })
                })
                .collect()
        }),
    ))
}

pub fn concat_rows<T: Real>(parts: &[Var<T>]) -> Result<Var<T>> {
    let first = parts.first().ok_or_else(|| Error::Argument("concat_rows of nothing".into()))?;
    let cols = first.cols();
    if let Some(p) = parts.iter().find(|p| p.cols() != cols) {
        return dim_err("concat_rows", first.shape(), p.shape());
    }
    let lens: Vec<usize> = parts.iter().map(|p| p.value().len()).collect();
    let mut out = Vec::with_capacity(lens.iter().sum());
    for p in parts {
        out.extend_from_slice(p.value().data());
    }
    let rows = out.len() / cols.max(1);
    Ok(Var::from_op(
        mat(rows, cols, out),
        parts.to_vec(),
        Box::new(move |g, _, _, needs| {
            let mut offset = 0;
            lens.iter()
                .zip(needs)
                .map(|(&len, &need)| {
                    let start = offset;
                    offset += len;
                    need.then(|| g[start..start + len].to_vec())
                })
                .collect()
        }),
    ))
}

pub fn slice_cols<T: Real>(a: &Var<T>, start: usize, len: usize) -> Result<Var<T>> {
    let c = a.cols();
    if start + len > c {
        return Err(Error::Argument(format!(
            "slice_cols {start}..{} out of range for {c} columns",
            start + len
        )));
    }
    let out = a
        .value()
        .data()
        .chunks(c)
        .flat_map(|r| r[start..start + len].iter().copied())
        .collect();
    Ok(Var::from_op(
        mat(a.rows(), len, out),
        vec![a.clone()],
        Box::new(move |g, _, parents, _| {
            let mut gx = vec![T::zero(); parents[0].value().len()];
            for (dst, src) in gx.chunks_mut(c).zip(g.chunks(len.max(1))) {
                dst[start..start + len].copy_from_slice(&src[..len]);
            }
            vec![Some(gx)]
        }),
    ))
}

pub fn slice_rows<T: Real>(a: &Var<T>, start: usize, len: usize) -> Result<Var<T>> {
    let r = a.rows();
    if start + len > r {
        return Err(Error::Argument(format!(
            "slice_rows {start}..{} out of range for {r} rows",
            start + len
        )));
    }
    let c = a.cols();
    let out = a.value().data()[start * c..(start + len) * c].to_vec();
    Ok(Var::from_op(
        mat(len, c, out),
        vec![a.clone()],
        Box::new(move |g, _, parents, _| {
            let mut gx = vec![T::zero(); parents[0].value().len()];
            gx[start * c..(start + len) * c].copy_from_slice(g);
            vec![Some(gx)]
        }),
    ))
}

/// `[R × H·d]` → `[H·R × d]`: head `h` becomes row block `h`.
pub fn split_heads<T: Real>(a: &Var<T>, heads: usize) -> Result<Var<T>> {
    let (r, c) = (a.rows(), a.cols());
    if heads == 0 || c % heads != 0 {
        return Err(Error::Argument(format!("{c} columns do not split into {heads} heads")));
    }
    let d = c / heads;
    Ok(Var::from_op(
        mat(heads * r, d, split_heads_raw(a.value().data(), r, heads, d)),
        vec![a.clone()],
        Box::new(move |g, _, _, _| vec![Some(merge_heads_raw(g, r, heads, d))]),
    ))
}

/// Inverse of [`split_heads`].
pub fn merge_heads<T: Real>(a: &Var<T>, heads: usize) -> Result<Var<T>> {
    if heads == 0 || !a.rows().is_multiple_of(heads) {
        return Err(Error::Argument(format!(
            "{} rows do not merge from {heads} heads",
            a.rows()
        )));
    }
    let (r, d) = (a.rows() / heads, a.cols());
    Ok(Var::from_op(
        mat(r, heads * d, merge_heads_raw(a.value().data(), r, heads, d)),
        vec![a.clone()],
        Box::new(move |g, _, _, _| vec![Some(split_heads_raw(g, r, heads, d))]),
    ))
}

fn split_heads_raw<T: Real>(x: &[T], r: usize, heads: usize, d: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for h in 0..heads {
        for i in 0..r {
            let base = i * heads * d + h * d;
            out.extend_from_slice(&x[base..base + d]);
        }
    }
    out
}

fn merge_heads_raw<T: Real>(x: &[T], r: usize, heads: usize, d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for h in 0..heads {
        for i in 0..r {
            let src = (h * r + i) * d;
            let dst = i * heads * d + h * d;
            out[dst..dst + d].copy_from_slice(&x[src..src + d]);
        }
    }
    out
}

/// Column-wise max over each of `groups` row blocks: `[g·k × d]` → `[g × d]`.
/// Ties resolve to the first row.
pub fn max_pool_groups<T: Real>(a: &Var<T>, groups: usize) -> Result<Var<T>> {
    let k = check_groups("max_pool_groups", a.rows(), groups, a.shape())?;
    let d = a.cols();
    let x = a.value().data();
    let mut out = vec![T::zero(); groups * d];
    let mut arg = vec![0usize; groups * d];
    for g in 0..groups {
        for j in 0..d {
            let mut best = g * k;
            for i in g * k + 1..(g + 1) * k {
                if x[i * d + j] > x[best * d + j] {
                    best = i;
                }
            }
            out[g * d + j] = x[best * d + j];
            arg[g * d + j] = best;
        }
    }
    let len = x.len();
    Ok(Var::from_op(
        mat(groups, d, out),
        vec![a.clone()],
        Box::new(move |gout, _, _, _| {
            let mut gx = vec![T::zero(); len];
            for (o, (&src, &g)) in arg.iter().zip(gout).enumerate() {
                let j = o % d;
                gx[src * d + j] = gx[src * d + j] + g;
            }
            vec![Some(gx)]
        }),
    ))
}

/// Per-row standardization without affine terms.
pub fn layer_norm_rows<T: Real>(a: &Var<T>, eps: T) -> Var<T> {
    let n = a.cols();
    let nf = T::from_usize(n).unwrap();
    let mut out = a.value().data().to_vec();
    let mut inv_std = Vec::with_capacity(a.rows());
    for row in out.chunks_mut(n) {
        let mu = row.iter().copied().sum::<T>() / nf;
        let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / nf;
        let inv = T::one() / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mu) * inv;
        }
        inv_std.push(inv);
    }
    Var::from_op(
        mat(a.rows(), n, out),
        vec![a.clone()],
        Box::new(move |g, y, _, _| {
            let mut gx = vec![T::zero(); g.len()];
            for (((gr, yr), out), &inv) in g
                .chunks(n)
                .zip(y.data().chunks(n))
                .zip(gx.chunks_mut(n))
                .zip(&inv_std)
            {
                let mg = gr.iter().copied().sum::<T>() / nf;
                let mgy = gr.iter().zip(yr).map(|(&g, &y)| g * y).sum::<T>() / nf;
                for ((o, &g), &y) in out.iter_mut().zip(gr).zip(yr) {
                    *o = inv * (g - mg - y * mgy);
                }
            }
            vec![Some(gx)]
        }),
    )
}
