//! Differentiable operations over [`Tensor`].
//!
//! Every function validates shapes up front (errors name the operation and
//! the offending shapes), computes the forward value eagerly, and registers a
//! backward closure that accumulates into tracked parents only.

use crate::error::{Error, Result};
use crate::numerics::tensor::{accum_into, Scalar, Tensor};

fn shape_err<T>(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<T> {
    Err(Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}

fn require_rank2<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    let shape = t.shape();
    if shape.len() != 2 {
        return Err(Error::InvalidShape {
            op,
            msg: format!("expected rank-2 tensor, got shape {shape:?}"),
        });
    }
    Ok((shape[0], shape[1]))
}

fn require_rank1<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<usize> {
    let shape = t.shape();
    if shape.len() != 1 {
        return Err(Error::InvalidShape {
            op,
            msg: format!("expected rank-1 tensor, got shape {shape:?}"),
        });
    }
    Ok(shape[0])
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return shape_err("add", &a.shape(), &b.shape());
    }
    let data = a.with_data(|x| b.with_data(|y| x.iter().zip(y).map(|(&u, &v)| u + v).collect()));
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        data,
        a.shape(),
        vec![a.clone(), b.clone()],
        move |g| {
            accum_into(&pa, || g.to_vec());
            accum_into(&pb, || g.to_vec());
        },
    ))
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return shape_err("sub", &a.shape(), &b.shape());
    }
    let data = a.with_data(|x| b.with_data(|y| x.iter().zip(y).map(|(&u, &v)| u - v).collect()));
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        data,
        a.shape(),
        vec![a.clone(), b.clone()],
        move |g| {
            accum_into(&pa, || g.to_vec());
            accum_into(&pb, || g.iter().map(|&v| -v).collect());
        },
    ))
}

/// Elementwise product.
pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return shape_err("mul", &a.shape(), &b.shape());
    }
    let data = a.with_data(|x| b.with_data(|y| x.iter().zip(y).map(|(&u, &v)| u * v).collect()));
    let (pa, pb) = (a.clone(), b.clone());
    let (av, bv) = (a.value(), b.value());
    Ok(Tensor::from_op(
        data,
        a.shape(),
        vec![a.clone(), b.clone()],
        move |g| {
            accum_into(&pa, || g.iter().zip(&bv).map(|(&gi, &vi)| gi * vi).collect());
            accum_into(&pb, || g.iter().zip(&av).map(|(&gi, &ui)| gi * ui).collect());
        },
    ))
}

pub fn neg<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let data = a.with_data(|x| x.iter().map(|&v| -v).collect());
    let pa = a.clone();
    Tensor::from_op(data, a.shape(), vec![a.clone()], move |g| {
        accum_into(&pa, || g.iter().map(|&v| -v).collect());
    })
}

/// Multiply every element by a constant.
pub fn scale<T: Scalar>(a: &Tensor<T>, c: T) -> Tensor<T> {
    let data = a.with_data(|x| x.iter().map(|&v| v * c).collect());
    let pa = a.clone();
    Tensor::from_op(data, a.shape(), vec![a.clone()], move |g| {
        accum_into(&pa, || g.iter().map(|&v| v * c).collect());
    })
}

/// Add a constant to every element.
pub fn add_scalar<T: Scalar>(a: &Tensor<T>, c: T) -> Tensor<T> {
    let data = a.with_data(|x| x.iter().map(|&v| v + c).collect());
    let pa = a.clone();
    Tensor::from_op(data, a.shape(), vec![a.clone()], move |g| {
        accum_into(&pa, || g.to_vec());
    })
}

/// `m + v` with `v` broadcast over the rows of `m`.
pub fn add_rowvec<T: Scalar>(m: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = require_rank2("add_rowvec", m)?;
    let n = require_rank1("add_rowvec", v)?;
    if n != c {
        return shape_err("add_rowvec", &m.shape(), &v.shape());
    }
    let data = m.with_data(|md| {
        v.with_data(|vd| {
            let mut out = Vec::with_capacity(r * c);
            for row in md.chunks(c) {
                out.extend(row.iter().zip(vd).map(|(&a, &b)| a + b));
            }
            out
        })
    });
    let (pm, pv) = (m.clone(), v.clone());
    Ok(Tensor::from_op(
        data,
        vec![r, c],
        vec![m.clone(), v.clone()],
        move |g| {
            accum_into(&pm, || g.to_vec());
            accum_into(&pv, || {
                let mut dv = vec![T::zero(); c];
                for row in g.chunks(c) {
                    for (d, &gi) in dv.iter_mut().zip(row) {
                        *d = *d + gi;
                    }
                }
                dv
            });
        },
    ))
}

/// `m ⊙ v` with `v` broadcast over the rows of `m`.
pub fn mul_rowvec<T: Scalar>(m: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = require_rank2("mul_rowvec", m)?;
    let n = require_rank1("mul_rowvec", v)?;
    if n != c {
        return shape_err("mul_rowvec", &m.shape(), &v.shape());
    }
    let data = m.with_data(|md| {
        v.with_data(|vd| {
            let mut out = Vec::with_capacity(r * c);
            for row in md.chunks(c) {
                out.extend(row.iter().zip(vd).map(|(&a, &b)| a * b));
            }
            out
        })
    });
    let (pm, pv) = (m.clone(), v.clone());
    let (mv, vv) = (m.value(), v.value());
    Ok(Tensor::from_op(
        data,
        vec![r, c],
        vec![m.clone(), v.clone()],
        move |g| {
            accum_into(&pm, || {
                let mut dm = Vec::with_capacity(r * c);
                for row in g.chunks(c) {
                    dm.extend(row.iter().zip(&vv).map(|(&gi, &vi)| gi * vi));
                }
                dm
            });
            accum_into(&pv, || {
                let mut dv = vec![T::zero(); c];
                for (grow, mrow) in g.chunks(c).zip(mv.chunks(c)) {
                    for ((d, &gi), &mi) in dv.iter_mut().zip(grow).zip(mrow) {
                        *d = *d + gi * mi;
                    }
                }
                dv
            });
        },
    ))
}

// ---------------------------------------------------------------------------
// Matrix ops
// ---------------------------------------------------------------------------

/// Row-major matrix product, ikj loop order.
fn mm<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bpj) in orow.iter_mut().zip(brow) {
                *o = *o + aip * bpj;
            }
        }
    }
    out
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = require_rank2("matmul", a)?;
    let (k2, n) = require_rank2("matmul", b)?;
    if k != k2 {
        return shape_err("matmul", &a.shape(), &b.shape());
    }
    let data = a.with_data(|ad| b.with_data(|bd| mm(ad, bd, m, k, n)));
    let (pa, pb) = (a.clone(), b.clone());
    let (av, bv) = (a.value(), b.value());
    Ok(Tensor::from_op(
        data,
        vec![m, n],
        vec![a.clone(), b.clone()],
        move |g| {
            // da[i,p] = Σ_j g[i,j] · b[p,j]
            accum_into(&pa, || {
                let mut da = vec![T::zero(); m * k];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    let darow = &mut da[i * k..(i + 1) * k];
                    for (p, d) in darow.iter_mut().enumerate() {
                        let brow = &bv[p * n..(p + 1) * n];
                        let mut acc = T::zero();
                        for (&gi, &bi) in grow.iter().zip(brow) {
                            acc = acc + gi * bi;
                        }
                        *d = acc;
                    }
                }
                da
            });
            // db[p,j] = Σ_i a[i,p] · g[i,j]
            accum_into(&pb, || {
                let mut db = vec![T::zero(); k * n];
                for i in 0..m {
                    let arow = &av[i * k..(i + 1) * k];
                    let grow = &g[i * n..(i + 1) * n];
                    for (p, &aip) in arow.iter().enumerate() {
                        if aip == T::zero() {
                            continue;
                        }
                        let dbrow = &mut db[p * n..(p + 1) * n];
                        for (d, &gi) in dbrow.iter_mut().zip(grow) {
                            *d = *d + aip * gi;
                        }
                    }
                }
                db
            });
        },
    ))
}

pub fn transpose<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = require_rank2("transpose", a)?;
    let data = a.with_data(|ad| {
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = ad[i * c + j];
            }
        }
        out
    });
    let pa = a.clone();
    Ok(Tensor::from_op(
        data,
        vec![c, r],
        vec![a.clone()],
        move |g| {
            accum_into(&pa, || {
                let mut da = vec![T::zero(); r * c];
                for j in 0..c {
                    for i in 0..r {
                        da[i * c + j] = g[j * r + i];
                    }
                }
                da
            });
        },
    ))
}

/// View with a new shape; element count must be unchanged.
pub fn reshape<T: Scalar>(a: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    let count: usize = shape.iter().product();
    if count != a.len() {
        return shape_err("reshape", &a.shape(), shape);
    }
    let pa = a.clone();
    Ok(Tensor::from_op(
        a.value(),
        shape.to_vec(),
        vec![a.clone()],
        move |g| {
            accum_into(&pa, || g.to_vec());
        },
    ))
}

pub fn slice_rows<T: Scalar>(a: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let (r, c) = require_rank2("slice_rows", a)?;
    if start + len > r {
        return Err(Error::InvalidShape {
            op: "slice_rows",
            msg: format!("rows {start}..{} out of bounds for {r} rows", start + len),
        });
    }
    let data = a.with_data(|ad| ad[start * c..(start + len) * c].to_vec());
    let pa = a.clone();
    Ok(Tensor::from_op(
        data,
        vec![len, c],
        vec![a.clone()],
        move |g| {
            accum_into(&pa, || {
                let mut da = vec![T::zero(); r * c];
                da[start * c..(start + len) * c].copy_from_slice(g);
                da
            });
        },
    ))
}

pub fn slice_cols<T: Scalar>(a: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let (r, c) = require_rank2("slice_cols", a)?;
    if start + len > c {
        return Err(Error::InvalidShape {
            op: "slice_cols",
            msg: format!("cols {start}..{} out of bounds for {c} cols", start + len),
        });
    }
    let data = a.with_data(|ad| {
        let mut out = Vec::with_capacity(r * len);
        for row in ad.chunks(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        out
    });
    let pa = a.clone();
    Ok(Tensor::from_op(
        data,
        vec![r, len],
        vec![a.clone()],
        move |g| {
            accum_into(&pa, || {
                let mut da = vec![T::zero(); r * c];
                for i in 0..r {
                    da[i * c + start..i * c + start + len]
                        .copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                da
            });
        },
    ))
}

pub fn concat_cols<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ra, ca) = require_rank2("concat_cols", a)?;
    let (rb, cb) = require_rank2("concat_cols", b)?;
    if ra != rb {
        return shape_err("concat_cols", &a.shape(), &b.shape());
    }
    let c = ca + cb;
    let data = a.with_data(|ad| {
        b.with_data(|bd| {
            let mut out = Vec::with_capacity(ra * c);
            for i in 0..ra {
                out.extend_from_slice(&ad[i * ca..(i + 1) * ca]);
                out.extend_from_slice(&bd[i * cb..(i + 1) * cb]);
            }
            out
        })
    });
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        data,
        vec![ra, c],
        vec![a.clone(), b.clone()],
        move |g| {
            accum_into(&pa, || {
                let mut da = Vec::with_capacity(ra * ca);
                for i in 0..ra {
                    da.extend_from_slice(&g[i * c..i * c + ca]);
                }
                da
            });
            accum_into(&pb, || {
                let mut db = Vec::with_capacity(ra * cb);
                for i in 0..ra {
                    db.extend_from_slice(&g[i * c + ca..(i + 1) * c]);
                }
                db
            });
        },
    ))
}

/// Stack rank-2 blocks on top of each other; all must share a column count.
pub fn concat_rows<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    if parts.is_empty() {
        return Err(Error::InvalidShape {
            op: "concat_rows",
            msg: "no parts".into(),
        });
    }
    let (_, c) = require_rank2("concat_rows", parts[0])?;
    let mut rows = 0usize;
    let mut row_counts = Vec::with_capacity(parts.len());
    for p in parts {
        let (r, pc) = require_rank2("concat_rows", p)?;
        if pc != c {
            return shape_err("concat_rows", &parts[0].shape(), &p.shape());
        }
        rows += r;
        row_counts.push(r);
    }
    let mut data = Vec::with_capacity(rows * c);
    for p in parts {
        p.with_data(|pd| data.extend_from_slice(pd));
    }
    let handles: Vec<Tensor<T>> = parts.iter().map(|&p| p.clone()).collect();
    let parents = handles.clone();
    Ok(Tensor::from_op(data, vec![rows, c], parents, move |g| {
        let mut offset = 0usize;
        for (h, &r) in handles.iter().zip(&row_counts) {
            let chunk = &g[offset..offset + r * c];
            accum_into(h, || chunk.to_vec());
            offset += r * c;
        }
    }))
}

/// Stack rank-1 vectors into the rows of a matrix.
pub fn stack_rows<T: Scalar>(vectors: &[&Tensor<T>]) -> Result<Tensor<T>> {
    if vectors.is_empty() {
        return Err(Error::InvalidShape {
            op: "stack_rows",
            msg: "no vectors".into(),
        });
    }
    let c = require_rank1("stack_rows", vectors[0])?;
    for v in vectors {
        let n = require_rank1("stack_rows", v)?;
        if n != c {
            return shape_err("stack_rows", &vectors[0].shape(), &v.shape());
        }
    }
    let n = vectors.len();
    let mut data = Vec::with_capacity(n * c);
    for v in vectors {
        v.with_data(|vd| data.extend_from_slice(vd));
    }
    let handles: Vec<Tensor<T>> = vectors.iter().map(|&v| v.clone()).collect();
    let parents = handles.clone();
    Ok(Tensor::from_op(data, vec![n, c], parents, move |g| {
        for (i, h) in handles.iter().enumerate() {
            accum_into(h, || g[i * c..(i + 1) * c].to_vec());
        }
    }))
}

// ---------------------------------------------------------------------------
// Nonlinearities and normalizations
// ---------------------------------------------------------------------------

fn softmax_row<T: Scalar>(row: &[T]) -> Vec<T> {
    let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
    let sum: T = exps.iter().cloned().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Row-wise softmax of a rank-2 tensor; rows are shifted by their max before
/// exponentiation, so large logits (e.g. similarities divided by a small
/// temperature) do not overflow.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = require_rank2("softmax_rows", x)?;
    let data = x.with_data(|xd| {
        let mut out = Vec::with_capacity(r * c);
        for row in xd.chunks(c) {
            out.extend(softmax_row(row));
        }
        out
    });
    let px = x.clone();
    let y = data.clone();
    Ok(Tensor::from_op(
        data,
        vec![r, c],
        vec![x.clone()],
        move |g| {
            accum_into(&px, || {
                let mut dx = Vec::with_capacity(r * c);
                for (grow, yrow) in g.chunks(c).zip(y.chunks(c)) {
                    let dotp: T = grow.iter().zip(yrow).map(|(&gi, &yi)| gi * yi).sum();
                    dx.extend(grow.iter().zip(yrow).map(|(&gi, &yi)| yi * (gi - dotp)));
                }
                dx
            });
        },
    ))
}

/// Row-wise log-softmax (same max-shift stabilization as [`softmax_rows`]).
pub fn log_softmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = require_rank2("log_softmax_rows", x)?;
    let mut probs = Vec::with_capacity(r * c);
    let data = x.with_data(|xd| {
        let mut out = Vec::with_capacity(r * c);
        for row in xd.chunks(c) {
            let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
            let log_z = max + sum.ln();
            for &v in row {
                let ls = v - log_z;
                out.push(ls);
                probs.push(ls.exp());
            }
        }
        out
    });
    let px = x.clone();
    Ok(Tensor::from_op(
        data,
        vec![r, c],
        vec![x.clone()],
        move |g| {
            accum_into(&px, || {
                let mut dx = Vec::with_capacity(r * c);
                for (grow, prow) in g.chunks(c).zip(probs.chunks(c)) {
                    let gsum: T = grow.iter().cloned().sum();
                    dx.extend(grow.iter().zip(prow).map(|(&gi, &pi)| gi - pi * gsum));
                }
                dx
            });
        },
    ))
}

/// Layer normalization over the feature axis of each row, then per-feature
/// affine. Before the affine, each row has zero mean and (up to `eps`) unit
/// variance.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let (r, c) = require_rank2("layer_norm", x)?;
    let cg = require_rank1("layer_norm", gamma)?;
    let cb = require_rank1("layer_norm", beta)?;
    if cg != c || cb != c {
        return shape_err("layer_norm", &x.shape(), &gamma.shape());
    }
    let count = T::from_f64(c as f64);
    let mut xhat = Vec::with_capacity(r * c);
    let mut inv_std = Vec::with_capacity(r);
    let data = x.with_data(|xd| {
        gamma.with_data(|gd| {
            beta.with_data(|bd| {
                let mut out = Vec::with_capacity(r * c);
                for row in xd.chunks(c) {
                    let mean = row.iter().cloned().sum::<T>() / count;
                    let var = row
                        .iter()
                        .map(|&v| (v - mean) * (v - mean))
                        .sum::<T>()
                        / count;
                    let inv = T::one() / (var + eps).sqrt();
                    inv_std.push(inv);
                    for (j, &v) in row.iter().enumerate() {
                        let h = (v - mean) * inv;
                        xhat.push(h);
                        out.push(gd[j] * h + bd[j]);
                    }
                }
                out
            })
        })
    });
    let (px, pg, pb) = (x.clone(), gamma.clone(), beta.clone());
    let gval = gamma.value();
    Ok(Tensor::from_op(
        data,
        vec![r, c],
        vec![x.clone(), gamma.clone(), beta.clone()],
        move |g| {
            accum_into(&px, || {
                let mut dx = Vec::with_capacity(r * c);
                for i in 0..r {
                    let grow = &g[i * c..(i + 1) * c];
                    let hrow = &xhat[i * c..(i + 1) * c];
                    let inv = inv_std[i];
                    // dxhat = g ⊙ γ
                    let dh: Vec<T> = grow.iter().zip(&gval).map(|(&gi, &gm)| gi * gm).collect();
                    let sum_dh: T = dh.iter().cloned().sum();
                    let sum_dh_h: T = dh.iter().zip(hrow).map(|(&d, &h)| d * h).sum();
                    for (j, &h) in hrow.iter().enumerate() {
                        let v = (count * dh[j] - sum_dh - h * sum_dh_h) * inv / count;
                        dx.push(v);
                    }
                }
                dx
            });
            accum_into(&pg, || {
                let mut dg = vec![T::zero(); c];
                for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                    for ((d, &gi), &h) in dg.iter_mut().zip(grow).zip(hrow) {
                        *d = *d + gi * h;
                    }
                }
                dg
            });
            accum_into(&pb, || {
                let mut db = vec![T::zero(); c];
                for grow in g.chunks(c) {
                    for (d, &gi) in db.iter_mut().zip(grow) {
                        *d = *d + gi;
                    }
                }
                db
            });
        },
    ))
}

/// Gather table rows by token id. The gradient scatters back into the table.
pub fn embedding_lookup<T: Scalar>(table: &Tensor<T>, ids: &[u32]) -> Result<Tensor<T>> {
    let (v, d) = require_rank2("embedding_lookup", table)?;
    for &id in ids {
        if id as usize >= v {
            return Err(Error::TokenOutOfRange { id, vocab: v });
        }
    }
    let data = table.with_data(|td| {
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let row = &td[id as usize * d..(id as usize + 1) * d];
            out.extend_from_slice(row);
        }
        out
    });
    let pt = table.clone();
    let ids_owned: Vec<u32> = ids.to_vec();
    let l = ids.len();
    Ok(Tensor::from_op(
        data,
        vec![l, d],
        vec![table.clone()],
        move |g| {
            accum_into(&pt, || {
                let mut dt = vec![T::zero(); v * d];
                for (slot, &id) in ids_owned.iter().enumerate() {
                    let grow = &g[slot * d..(slot + 1) * d];
                    let trow = &mut dt[id as usize * d..(id as usize + 1) * d];
                    for (t, &gi) in trow.iter_mut().zip(grow) {
                        *t = *t + gi;
                    }
                }
                dt
            });
        },
    ))
}

/// Affine map `x·w + b`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    add_rowvec(&matmul(x, w)?, b)
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/π)
const GELU_A: f64 = 0.044715;

/// GELU activation (tanh form).
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let one = T::one();
    let three_a = T::from_f64(3.0 * GELU_A);
    let data = x.with_data(|xd| {
        xd.iter()
            .map(|&v| {
                let u = c * (v + a * v * v * v);
                half * v * (one + u.tanh())
            })
            .collect()
    });
    let px = x.clone();
    let xv = x.value();
    Tensor::from_op(data, x.shape(), vec![x.clone()], move |g| {
        accum_into(&px, || {
            g.iter()
                .zip(&xv)
                .map(|(&gi, &v)| {
                    let u = c * (v + a * v * v * v);
                    let t = u.tanh();
                    let du = c * (one + three_a * v * v);
                    gi * (half * (one + t) + half * v * (one - t * t) * du)
                })
                .collect()
        });
    })
}

/// Elementwise max(0, x); also the hinge H(α) of the editing objective.
pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let data = x.with_data(|xd| xd.iter().map(|&v| v.max(T::zero())).collect());
    let px = x.clone();
    let xv = x.value();
    Tensor::from_op(data, x.shape(), vec![x.clone()], move |g| {
        accum_into(&px, || {
            g.iter()
                .zip(&xv)
                .map(|(&gi, &v)| if v > T::zero() { gi } else { T::zero() })
                .collect()
        });
    })
}

/// Mean over the rows selected by `mask`. Errors when the mask selects
/// nothing.
pub fn mean_pool_masked<T: Scalar>(x: &Tensor<T>, mask: &[bool]) -> Result<Tensor<T>> {
    let (r, c) = require_rank2("mean_pool_masked", x)?;
    if mask.len() != r {
        return Err(Error::InvalidShape {
            op: "mean_pool_masked",
            msg: format!("mask length {} does not match {} rows", mask.len(), r),
        });
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::InvalidArgument(
            "mean_pool_masked: mask selects no rows".into(),
        ));
    }
    let denom = T::from_f64(count as f64);
    let data = x.with_data(|xd| {
        let mut out = vec![T::zero(); c];
        for (row, &m) in xd.chunks(c).zip(mask) {
            if m {
                for (o, &v) in out.iter_mut().zip(row) {
                    *o = *o + v;
                }
            }
        }
        out.into_iter().map(|v| v / denom).collect()
    });
    let px = x.clone();
    let mask_owned: Vec<bool> = mask.to_vec();
    Ok(Tensor::from_op(
        data,
        vec![c],
        vec![x.clone()],
        move |g| {
            accum_into(&px, || {
                let mut dx = vec![T::zero(); r * c];
                for (i, &m) in mask_owned.iter().enumerate() {
                    if m {
                        for (d, &gi) in dx[i * c..(i + 1) * c].iter_mut().zip(g) {
                            *d = gi / denom;
                        }
                    }
                }
                dx
            });
        },
    ))
}

/// Scale a vector to unit L2 norm. Errors on the zero vector.
pub fn l2_normalize<T: Scalar>(v: &Tensor<T>) -> Result<Tensor<T>> {
    let n = require_rank1("l2_normalize", v)?;
    let norm = v.with_data(|vd| vd.iter().map(|&x| x * x).sum::<T>().sqrt());
    if norm == T::zero() {
        return Err(Error::InvalidArgument(
            "l2_normalize: zero vector has no direction".into(),
        ));
    }
    let data: Vec<T> = v.with_data(|vd| vd.iter().map(|&x| x / norm).collect());
    let pv = v.clone();
    let y = data.clone();
    Ok(Tensor::from_op(
        data,
        vec![n],
        vec![v.clone()],
        move |g| {
            accum_into(&pv, || {
                let gy: T = g.iter().zip(&y).map(|(&gi, &yi)| gi * yi).sum();
                g.iter()
                    .zip(&y)
                    .map(|(&gi, &yi)| (gi - yi * gy) / norm)
                    .collect()
            });
        },
    ))
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

pub fn sum_all<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let total = x.with_data(|xd| xd.iter().cloned().sum::<T>());
    let px = x.clone();
    let n = x.len();
    Ok(Tensor::from_op(
        vec![total],
        vec![],
        vec![x.clone()],
        move |g| {
            accum_into(&px, || vec![g[0]; n]);
        },
    ))
}

pub fn mean_all<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.is_empty() {
        return Err(Error::InvalidShape {
            op: "mean_all",
            msg: "empty tensor".into(),
        });
    }
    let n = x.len();
    let denom = T::from_f64(n as f64);
    let total = x.with_data(|xd| xd.iter().cloned().sum::<T>() / denom);
    let px = x.clone();
    Ok(Tensor::from_op(
        vec![total],
        vec![],
        vec![x.clone()],
        move |g| {
            accum_into(&px, || vec![g[0] / denom; n]);
        },
    ))
}

/// Dot product of two equal-length vectors.
pub fn dot<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let na = require_rank1("dot", a)?;
    let nb = require_rank1("dot", b)?;
    if na != nb {
        return shape_err("dot", &a.shape(), &b.shape());
    }
    let value = a.with_data(|ad| b.with_data(|bd| ad.iter().zip(bd).map(|(&x, &y)| x * y).sum()));
    let (pa, pb) = (a.clone(), b.clone());
    let (av, bv) = (a.value(), b.value());
    Ok(Tensor::from_op(
        vec![value],
        vec![],
        vec![a.clone(), b.clone()],
        move |g| {
            accum_into(&pa, || bv.iter().map(|&v| g[0] * v).collect());
            accum_into(&pb, || av.iter().map(|&v| g[0] * v).collect());
        },
    ))
}

/// Mean over rows of the soft cross entropy −Σ target·log_softmax(logits).
/// Targets are usually constant (one-hot, possibly label-smoothed).
pub fn cross_entropy_with_soft_labels<T: Scalar>(
    logits: &Tensor<T>,
    targets: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (r, _) = require_rank2("cross_entropy_with_soft_labels", logits)?;
    if logits.shape() != targets.shape() {
        return shape_err(
            "cross_entropy_with_soft_labels",
            &logits.shape(),
            &targets.shape(),
        );
    }
    let ls = log_softmax_rows(logits)?;
    let weighted = mul(&ls, targets)?;
    let total = sum_all(&weighted)?;
    Ok(scale(&total, T::from_f64(-1.0 / r as f64)))
}
