//! Differentiable operators.
//!
//! Every operator computes its value eagerly and, when any input is attached
//! to a tape, records a closure that routes the output gradient back to its
//! inputs. Backward functions use plain array math (they are not themselves
//! recorded), so second-order derivatives are out of scope.

use super::{matmul, matmul_into, Elem, GradSink, Var};
use ndarray::{Array1, Array2, Array3, Array4, ArrayD, ArrayView2, Axis, Ix1, Ix2, Ix3, Ix4, IxDyn};
use rayon::prelude::*;

fn unary<F: Elem>(
    x: &Var<F>,
    out: ArrayD<F>,
    back: impl FnOnce(usize) -> Box<dyn FnOnce(&ArrayD<F>, &mut GradSink<F>)>,
) -> Var<F> {
    let mut v = Var::constant(out);
    if let Some((tape, xid)) = &x.node {
        let id = tape.push(back(*xid));
        v.node = Some((tape.clone(), id));
    }
    v
}

/// Elementwise sum of two same-shape tensors.
pub fn add<F: Elem>(a: &Var<F>, b: &Var<F>) -> Var<F> {
    assert_eq!(a.shape(), b.shape(), "add: shape mismatch");
    let out = &*a.data + &*b.data;
    let mut v = Var::constant(out);
    if let Some(tape) = Var::joint_tape(&[a, b]) {
        let aid = a.node_id();
        let bid = b.node_id();
        let id = tape.push(Box::new(move |g, sink| {
            if let Some(i) = aid {
                sink.add(i, g.clone());
            }
            if let Some(i) = bid {
                sink.add(i, g.clone());
            }
        }));
        v.node = Some((tape, id));
    }
    v
}

/// Elementwise difference `a - b`.
pub fn sub<F: Elem>(a: &Var<F>, b: &Var<F>) -> Var<F> {
    assert_eq!(a.shape(), b.shape(), "sub: shape mismatch");
    let out = &*a.data - &*b.data;
    let mut v = Var::constant(out);
    if let Some(tape) = Var::joint_tape(&[a, b]) {
        let aid = a.node_id();
        let bid = b.node_id();
        let id = tape.push(Box::new(move |g, sink| {
            if let Some(i) = aid {
                sink.add(i, g.clone());
            }
            if let Some(i) = bid {
                sink.add(i, g.mapv(|v| -v));
            }
        }));
        v.node = Some((tape, id));
    }
    v
}

/// Multiplication by a constant scalar.
pub fn scale<F: Elem>(x: &Var<F>, c: F) -> Var<F> {
    let out = x.data.mapv(|v| v * c);
    unary(x, out, |xid| {
        Box::new(move |g, sink| sink.add(xid, g.mapv(|v| v * c)))
    })
}

pub fn relu<F: Elem>(x: &Var<F>) -> Var<F> {
    let out = x.data.mapv(|v| if v > F::zero() { v } else { F::zero() });
    let mask = x.data.clone();
    unary(x, out, move |xid| {
        Box::new(move |g, sink| {
            let mut gx = g.clone();
            gx.zip_mut_with(&mask, |gv, &m| {
                if m <= F::zero() {
                    *gv = F::zero();
                }
            });
            sink.add(xid, gx);
        })
    })
}

/// Matrix product of 2-d tensors.
pub fn matmul2<F: Elem>(a: &Var<F>, b: &Var<F>) -> Var<F> {
    let a2 = a.data.view().into_dimensionality::<Ix2>().unwrap();
    let b2 = b.data.view().into_dimensionality::<Ix2>().unwrap();
    let out = matmul(a2, b2).into_dyn();
    let mut v = Var::constant(out);
    if let Some(tape) = Var::joint_tape(&[a, b]) {
        let aid = a.node_id();
        let bid = b.node_id();
        let a_saved = a.data.clone();
        let b_saved = b.data.clone();
        let id = tape.push(Box::new(move |g, sink| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            if let Some(i) = aid {
                let bv = b_saved.view().into_dimensionality::<Ix2>().unwrap();
                sink.add(i, matmul(g2, bv.t()).into_dyn());
            }
            if let Some(i) = bid {
                let av = a_saved.view().into_dimensionality::<Ix2>().unwrap();
                sink.add(i, matmul(av.t(), g2).into_dyn());
            }
        }));
        v.node = Some((tape, id));
    }
    v
}

/// Affine layer `x . w + bias` for `x: (R, D)`, `w: (D, O)`.
pub fn linear<F: Elem>(x: &Var<F>, w: &Var<F>, bias: Option<&Var<F>>) -> Var<F> {
    let x2 = x.data.view().into_dimensionality::<Ix2>().unwrap();
    let w2 = w.data.view().into_dimensionality::<Ix2>().unwrap();
    let mut out = matmul(x2, w2);
    if let Some(b) = bias {
        let b1 = b.data.view().into_dimensionality::<Ix1>().unwrap();
        out += &b1;
    }
    let mut v = Var::constant(out.into_dyn());
    let mut inputs: Vec<&Var<F>> = vec![x, w];
    if let Some(b) = bias {
        inputs.push(b);
    }
    if let Some(tape) = Var::joint_tape(&inputs) {
        let xid = x.node_id();
        let wid = w.node_id();
        let bid = bias.and_then(|b| b.node_id());
        let x_saved = x.data.clone();
        let w_saved = w.data.clone();
        let id = tape.push(Box::new(move |g, sink| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            if let Some(i) = xid {
                let wv = w_saved.view().into_dimensionality::<Ix2>().unwrap();
                sink.add(i, matmul(g2, wv.t()).into_dyn());
            }
            if let Some(i) = wid {
                let xv = x_saved.view().into_dimensionality::<Ix2>().unwrap();
                sink.add(i, matmul(xv.t(), g2).into_dyn());
            }
            if let Some(i) = bid {
                sink.add(i, g2.sum_axis(Axis(0)).into_dyn());
            }
        }));
        v.node = Some((tape, id));
    }
    v
}

/// Softmax over the last axis.
pub fn softmax_lastdim<F: Elem>(x: &Var<F>) -> Var<F> {
    let d = *x.shape().last().expect("softmax needs at least 1 axis");
    let rows = x.data.len() / d;
    let flat = x
        .data
        .to_shape((rows, d))
        .expect("softmax reshape")
        .to_owned();
    let mut out = flat;
    for mut row in out.rows_mut() {
        let m = row.fold(F::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    let out = out.into_shape_with_order(x.data.raw_dim()).unwrap();
    let y_saved = out.clone().into_shared();
    unary(x, out, move |xid| {
        Box::new(move |g, sink| {
            let y2 = y_saved.to_shape((rows, d)).unwrap().to_owned();
            let g2 = g.to_shape((rows, d)).unwrap().to_owned();
            let mut gx = g2;
            for (mut grow, yrow) in gx.rows_mut().into_iter().zip(y2.rows()) {
                let dot = grow
                    .iter()
                    .zip(yrow.iter())
                    .fold(F::zero(), |acc, (&gv, &yv)| acc + gv * yv);
                for (gv, &yv) in grow.iter_mut().zip(yrow.iter()) {
                    *gv = (*gv - dot) * yv;
                }
            }
            sink.add(xid, gx.into_shape_with_order(y_saved.raw_dim()).unwrap().into_dyn());
        })
    })
}

/// Layer normalization over the last axis with affine parameters.
pub fn layernorm_lastdim<F: Elem>(x: &Var<F>, gamma: &Var<F>, beta: &Var<F>, eps: F) -> Var<F> {
    let d = *x.shape().last().unwrap();
    assert_eq!(gamma.data.len(), d);
    assert_eq!(beta.data.len(), d);
    let rows = x.data.len() / d;
    let x2 = x.data.to_shape((rows, d)).unwrap().to_owned();
    let g1 = gamma.data.view().into_dimensionality::<Ix1>().unwrap();
    let b1 = beta.data.view().into_dimensionality::<Ix1>().unwrap();

    let mut xhat = Array2::<F>::zeros((rows, d));
    let mut inv_std = Array1::<F>::zeros(rows);
    let mut out = Array2::<F>::zeros((rows, d));
    let dn = F::of(d as f64);
    {
        let xs = x2.as_slice().unwrap();
        let xh = xhat.as_slice_mut().unwrap();
        let os = out.as_slice_mut().unwrap();
        let gs = g1.as_slice().unwrap();
        let bs = b1.as_slice().unwrap();
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mut mean = F::zero();
            for &v in row {
                mean += v;
            }
            mean /= dn;
            let mut var = F::zero();
            for &v in row {
                var += (v - mean) * (v - mean);
            }
            var /= dn;
            let inv = (var + eps).sqrt().recip();
            inv_std[r] = inv;
            let xh_row = &mut xh[r * d..(r + 1) * d];
            let o_row = &mut os[r * d..(r + 1) * d];
            for c in 0..d {
                let normed = (row[c] - mean) * inv;
                xh_row[c] = normed;
                o_row[c] = normed * gs[c] + bs[c];
            }
        }
    }
    let out = out.into_shape_with_order(x.data.raw_dim()).unwrap();

    let mut v = Var::constant(out);
    if let Some(tape) = Var::joint_tape(&[x, gamma, beta]) {
        let xid = x.node_id();
        let gid = gamma.node_id();
        let bid = beta.node_id();
        let gamma_saved = gamma.data.clone();
        let shape = x.data.raw_dim();
        let id = tape.push(Box::new(move |g, sink| {
            let g2 = g.to_shape((rows, d)).unwrap().to_owned();
            let gam = gamma_saved.view().into_dimensionality::<Ix1>().unwrap();
            if let Some(i) = bid {
                sink.add(i, g2.sum_axis(Axis(0)).into_dyn());
            }
            if let Some(i) = gid {
                let dg = (&g2 * &xhat).sum_axis(Axis(0));
                sink.add(i, dg.into_dyn());
            }
            if let Some(i) = xid {
                let mut gx = Array2::<F>::zeros((rows, d));
                let gxs = gx.as_slice_mut().unwrap();
                let g2s = g2.as_slice().unwrap();
                let xh = xhat.as_slice().unwrap();
                let gam_s = gam.as_slice().unwrap();
                for r in 0..rows {
                    let g_row = &g2s[r * d..(r + 1) * d];
                    let x_row = &xh[r * d..(r + 1) * d];
                    let mut sum_gh = F::zero();
                    let mut sum_gh_xhat = F::zero();
                    for c in 0..d {
                        let gh = g_row[c] * gam_s[c];
                        sum_gh += gh;
                        sum_gh_xhat += gh * x_row[c];
                    }
                    let mean_gh = sum_gh / dn;
                    let mean_gh_xhat = sum_gh_xhat / dn;
                    let out_row = &mut gxs[r * d..(r + 1) * d];
                    for c in 0..d {
                        let gh = g_row[c] * gam_s[c];
                        out_row[c] = (gh - mean_gh - x_row[c] * mean_gh_xhat) * inv_std[r];
                    }
                }
                sink.add(i, gx.into_shape_with_order(shape.clone()).unwrap().into_dyn());
            }
        }));
        v.node = Some((tape, id));
    }
    v
}

/// Mean over all elements, producing a 0-d tensor.
pub fn mean_all<F: Elem>(x: &Var<F>) -> Var<F> {
    let n = F::of(x.data.len() as f64);
    let out = ArrayD::from_elem(IxDyn(&[]), x.data.sum() / n);
    let shape = x.data.raw_dim();
    unary(x, out, move |xid| {
        Box::new(move |g, sink| {
            let gv = g.iter().next().copied().unwrap() / n;
            sink.add(xid, ArrayD::from_elem(shape, gv));
        })
    })
}

/// Sum of all elements, producing a 0-d tensor.
pub fn sum_all<F: Elem>(x: &Var<F>) -> Var<F> {
    let out = ArrayD::from_elem(IxDyn(&[]), x.data.sum());
    let shape = x.data.raw_dim();
    unary(x, out, move |xid| {
        Box::new(move |g, sink| {
            let gv = g.iter().next().copied().unwrap();
            sink.add(xid, ArrayD::from_elem(shape, gv));
        })
    })
}

/// Mean over axis 1 of a `(B, T, D)` tensor, producing `(B, D)`.
pub fn mean_tokens<F: Elem>(x: &Var<F>) -> Var<F> {
    let x3 = x.data.view().into_dimensionality::<Ix3>().unwrap();
    let (b, t, d) = x3.dim();
    let out = x3.mean_axis(Axis(1)).unwrap().into_dyn();
    let tn = F::of(t as f64);
    unary(x, out, move |xid| {
        Box::new(move |g, sink| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let mut gx = Array3::<F>::zeros((b, t, d));
            for bi in 0..b {
                for ti in 0..t {
                    for di in 0..d {
                        gx[[bi, ti, di]] = g2[[bi, di]] / tn;
                    }
                }
            }
            sink.add(xid, gx.into_dyn());
        })
    })
}

/// Reshape to a new shape with the same number of elements. Standard-layout
/// data is reshaped without copying.
pub fn reshape<F: Elem>(x: &Var<F>, shape: &[usize]) -> Var<F> {
    let orig = x.data.raw_dim();
    let reshaped = match x.data.clone().into_shape_with_order(IxDyn(shape)) {
        Ok(s) => s,
        Err(_) => x
            .data
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: incompatible shape")
            .into_shared(),
    };
    let mut v = Var::constant(ArrayD::zeros(IxDyn(&[0])));
    v.data = reshaped;
    if let Some((tape, xid)) = &x.node {
        let xid = *xid;
        let id = tape.push(Box::new(move |g, sink| {
            sink.add(xid, g.to_owned().into_shape_with_order(orig).unwrap());
        }));
        v.node = Some((tape.clone(), id));
    }
    v
}

/// Column `j` of a `(N, K)` tensor as a `(N,)` tensor.
pub fn select_column<F: Elem>(x: &Var<F>, j: usize) -> Var<F> {
    let x2 = x.data.view().into_dimensionality::<Ix2>().unwrap();
    let (n, k) = x2.dim();
    let out = x2.column(j).to_owned().into_dyn();
    unary(x, out, move |xid| {
        Box::new(move |g, sink| {
            let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
            let mut gx = Array2::<F>::zeros((n, k));
            for i in 0..n {
                gx[[i, j]] = g1[i];
            }
            sink.add(xid, gx.into_dyn());
        })
    })
}

/// Rows of `x: (R, D)` selected by index, producing `(M, D)`.
pub fn gather_rows<F: Elem>(x: &Var<F>, idx: &[usize]) -> Var<F> {
    let x2 = x.data.view().into_dimensionality::<Ix2>().unwrap();
    let (r, d) = x2.dim();
    let mut out = Array2::<F>::zeros((idx.len(), d));
    for (o, &i) in idx.iter().enumerate() {
        out.row_mut(o).assign(&x2.row(i));
    }
    let idx = idx.to_vec();
    unary(x, out.into_dyn(), move |xid| {
        Box::new(move |g, sink| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let mut gx = Array2::<F>::zeros((r, d));
            for (o, &i) in idx.iter().enumerate() {
                let mut row = gx.row_mut(i);
                row += &g2.row(o);
            }
            sink.add(xid, gx.into_dyn());
        })
    })
}

/// Mean cross-entropy between logits `(N, K)` and class labels.
pub fn cross_entropy_logits<F: Elem>(logits: &Var<F>, labels: &[usize]) -> Var<F> {
    let l2 = logits.data.view().into_dimensionality::<Ix2>().unwrap();
    let (n, k) = l2.dim();
    assert_eq!(labels.len(), n);
    let mut probs = Array2::<F>::zeros((n, k));
    let mut total = F::zero();
    for (i, row) in l2.rows().into_iter().enumerate() {
        let m = row.fold(F::neg_infinity(), |a, &b| a.max(b));
        let mut z = F::zero();
        for &v in row.iter() {
            z += (v - m).exp();
        }
        let lse = m + z.ln();
        total += lse - row[labels[i]];
        for (j, &v) in row.iter().enumerate() {
            probs[[i, j]] = (v - lse).exp();
        }
    }
    let nn = F::of(n as f64);
    let out = ArrayD::from_elem(IxDyn(&[]), total / nn);
    let labels = labels.to_vec();
    unary(logits, out, move |xid| {
        Box::new(move |g, sink| {
            let gv = g.iter().next().copied().unwrap();
            let mut gx = probs;
            for (i, &lab) in labels.iter().enumerate() {
                gx[[i, lab]] -= F::one();
            }
            gx.mapv_inplace(|v| v * gv / nn);
            sink.add(xid, gx.into_dyn());
        })
    })
}

/// Batched matrix product `(G, T, S) . (G, S, U) -> (G, T, U)`.
/// With `transpose_b`, `b` is `(G, U, S)` and used transposed. The result is
/// scaled by `alpha`.
pub fn bmm<F: Elem>(a: &Var<F>, b: &Var<F>, transpose_b: bool, alpha: F) -> Var<F> {
    let a3 = a.data.view().into_dimensionality::<Ix3>().unwrap();
    let b3 = b.data.view().into_dimensionality::<Ix3>().unwrap();
    let (ga, t, s) = a3.dim();
    let (gb, b_rows, b_cols) = b3.dim();
    assert_eq!(ga, gb, "bmm: batch mismatch");
    let u = if transpose_b { b_rows } else { b_cols };
    if transpose_b {
        assert_eq!(b_cols, s, "bmm: inner dim mismatch");
    } else {
        assert_eq!(b_rows, s, "bmm: inner dim mismatch");
    }
    let mut out = Array3::<F>::zeros((ga, t, u));
    {
        let a_std = a3.as_standard_layout();
        let as_ = a_std.as_slice().unwrap();
        let b_std = b3.as_standard_layout();
        let bs = b_std.as_slice().unwrap();
        out.as_slice_mut()
            .unwrap()
            .par_chunks_mut(t * u)
            .enumerate()
            .for_each(|(g, dst)| {
                let av = ndarray::ArrayView2::from_shape((t, s), &as_[g * t * s..(g + 1) * t * s]).unwrap();
                let bv = ndarray::ArrayView2::from_shape(
                    (b_rows, b_cols),
                    &bs[g * b_rows * b_cols..(g + 1) * b_rows * b_cols],
                )
                .unwrap();
                let mut ov = ndarray::ArrayViewMut2::from_shape((t, u), dst).unwrap();
                if transpose_b {
                    matmul_into(&mut ov, av, bv.t(), alpha, F::zero());
                } else {
                    matmul_into(&mut ov, av, bv, alpha, F::zero());
                }
            });
    }
    let mut v = Var::constant(out.into_dyn());
    if let Some(tape) = Var::joint_tape(&[a, b]) {
        let aid = a.node_id();
        let bid = b.node_id();
        let a_saved = a.data.clone();
        let b_saved = b.data.clone();
        let id = tape.push(Box::new(move |gout, sink| {
            let g3 = gout.view().into_dimensionality::<Ix3>().unwrap();
            let av = a_saved.view().into_dimensionality::<Ix3>().unwrap();
            let bv = b_saved.view().into_dimensionality::<Ix3>().unwrap();
            let (gt, gu) = (g3.dim().1, g3.dim().2);
            let g_std = g3.as_standard_layout();
            let gs = g_std.as_slice().unwrap();
            if let Some(i) = aid {
                let (_, at, as_dim) = av.dim();
                let b_std = bv.as_standard_layout();
                let bs = b_std.as_slice().unwrap();
                let (_, br, bc) = bv.dim();
                let mut ga_arr = Array3::<F>::zeros(av.dim());
                ga_arr
                    .as_slice_mut()
                    .unwrap()
                    .par_chunks_mut(at * as_dim)
                    .enumerate()
                    .for_each(|(g, dst)| {
                        let gg = ndarray::ArrayView2::from_shape((gt, gu), &gs[g * gt * gu..(g + 1) * gt * gu]).unwrap();
                        let bb = ndarray::ArrayView2::from_shape((br, bc), &bs[g * br * bc..(g + 1) * br * bc]).unwrap();
                        let mut dv = ndarray::ArrayViewMut2::from_shape((at, as_dim), dst).unwrap();
                        if transpose_b {
                            // y = alpha a bᵀ  =>  da = alpha g b
                            matmul_into(&mut dv, gg, bb, alpha, F::zero());
                        } else {
                            matmul_into(&mut dv, gg, bb.t(), alpha, F::zero());
                        }
                    });
                sink.add(i, ga_arr.into_dyn());
            }
            if let Some(i) = bid {
                let a_std = av.as_standard_layout();
                let as_ = a_std.as_slice().unwrap();
                let (_, at, ac) = av.dim();
                let (_, br, bc) = bv.dim();
                let mut gb_arr = Array3::<F>::zeros(bv.dim());
                gb_arr
                    .as_slice_mut()
                    .unwrap()
                    .par_chunks_mut(br * bc)
                    .enumerate()
                    .for_each(|(g, dst)| {
                        let gg = ndarray::ArrayView2::from_shape((gt, gu), &gs[g * gt * gu..(g + 1) * gt * gu]).unwrap();
                        let aa = ndarray::ArrayView2::from_shape((at, ac), &as_[g * at * ac..(g + 1) * at * ac]).unwrap();
                        let mut dv = ndarray::ArrayViewMut2::from_shape((br, bc), dst).unwrap();
                        if transpose_b {
                            // db = alpha gᵀ a
                            matmul_into(&mut dv, gg.t(), aa, alpha, F::zero());
                        } else {
                            matmul_into(&mut dv, aa.t(), gg, alpha, F::zero());
                        }
                    });
                sink.add(i, gb_arr.into_dyn());
            }
        }));
        v.node = Some((tape, id));
    }
    v
}

/// `(B*T, D)` token matrix to `(B*H, T, D/H)` per-head layout.
pub fn split_heads<F: Elem>(x: &Var<F>, batch: usize, tokens: usize, heads: usize) -> Var<F> {
    let x2 = x.data.view().into_dimensionality::<Ix2>().unwrap();
    let (rows, d) = x2.dim();
    assert_eq!(rows, batch * tokens);
    assert_eq!(d % heads, 0);
    let dh = d / heads;
    let mut out = Array3::<F>::zeros((batch * heads, tokens, dh));
    {
        let xs = x2.as_standard_layout();
        let xs = xs.as_slice().unwrap();
        let os = out.as_slice_mut().unwrap();
        for b in 0..batch {
            for t in 0..tokens {
                let src = &xs[(b * tokens + t) * d..(b * tokens + t + 1) * d];
                for h in 0..heads {
                    let dst_base = ((b * heads + h) * tokens + t) * dh;
                    os[dst_base..dst_base + dh].copy_from_slice(&src[h * dh..(h + 1) * dh]);
                }
            }
        }
    }
    unary(x, out.into_dyn(), move |xid| {
        Box::new(move |g, sink| {
            let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
            let gs = g3.as_standard_layout();
            let gs = gs.as_slice().unwrap();
            let mut gx = Array2::<F>::zeros((batch * tokens, d));
            let gxs = gx.as_slice_mut().unwrap();
            for b in 0..batch {
                for t in 0..tokens {
                    let dst = &mut gxs[(b * tokens + t) * d..(b * tokens + t + 1) * d];
                    for h in 0..heads {
                        let src_base = ((b * heads + h) * tokens + t) * dh;
                        dst[h * dh..(h + 1) * dh].copy_from_slice(&gs[src_base..src_base + dh]);
                    }
                }
            }
            sink.add(xid, gx.into_dyn());
        })
    })
}

/// Inverse of [`split_heads`]: `(B*H, T, D/H)` back to `(B*T, D)`.
pub fn merge_heads<F: Elem>(x: &Var<F>, batch: usize, heads: usize) -> Var<F> {
    let x3 = x.data.view().into_dimensionality::<Ix3>().unwrap();
    let (bh, tokens, dh) = x3.dim();
    assert_eq!(bh, batch * heads);
    let d = heads * dh;
    let mut out = Array2::<F>::zeros((batch * tokens, d));
    {
        let xs = x3.as_standard_layout();
        let xs = xs.as_slice().unwrap();
        let os = out.as_slice_mut().unwrap();
        for b in 0..batch {
            for t in 0..tokens {
                let dst = &mut os[(b * tokens + t) * d..(b * tokens + t + 1) * d];
                for h in 0..heads {
                    let src_base = ((b * heads + h) * tokens + t) * dh;
                    dst[h * dh..(h + 1) * dh].copy_from_slice(&xs[src_base..src_base + dh]);
                }
            }
        }
    }
    unary(x, out.into_dyn(), move |xid| {
        Box::new(move |g, sink| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let gs = g2.as_standard_layout();
            let gs = gs.as_slice().unwrap();
            let mut gx = Array3::<F>::zeros((batch * heads, tokens, dh));
            let gxs = gx.as_slice_mut().unwrap();
            for b in 0..batch {
                for t in 0..tokens {
                    let src = &gs[(b * tokens + t) * d..(b * tokens + t + 1) * d];
                    for h in 0..heads {
                        let dst_base = ((b * heads + h) * tokens + t) * dh;
                        gxs[dst_base..dst_base + dh].copy_from_slice(&src[h * dh..(h + 1) * dh]);
                    }
                }
            }
            sink.add(xid, gx.into_dyn());
        })
    })
}

/// Per-channel input normalization `(x - mean) / std` for `(N, C, H, W)`.
pub fn normalize_channels<F: Elem>(x: &Var<F>, mean: &[F], std: &[F]) -> Var<F> {
    let x4 = x.data.view().into_dimensionality::<Ix4>().unwrap();
    let (n, c, h, w) = x4.dim();
    assert_eq!(mean.len(), c);
    assert_eq!(std.len(), c);
    let mut out = x4.to_owned();
    for ci in 0..c {
        let m = mean[ci];
        let inv = std[ci].recip();
        out.slice_mut(ndarray::s![.., ci, .., ..])
            .mapv_inplace(|v| (v - m) * inv);
    }
    let inv_std: Vec<F> = std.iter().map(|s| s.recip()).collect();
    unary(x, out.into_dyn(), move |xid| {
        Box::new(move |g, sink| {
            let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
            let mut gx = g4.to_owned();
            let _ = (n, h, w);
            for ci in 0..c {
                let inv = inv_std[ci];
                gx.slice_mut(ndarray::s![.., ci, .., ..])
                    .mapv_inplace(|v| v * inv);
            }
            sink.add(xid, gx.into_dyn());
        })
    })
}

/// One crop-and-resize request against a batched image tensor.
#[derive(Debug, Clone, Copy)]
pub struct CropSpec {
    /// Batch index into the source tensor.
    pub batch: usize,
    pub top: usize,
    pub left: usize,
    pub size: usize,
}

/// Extracts square crops from `(N, C, H, W)` and bilinearly resizes each to
/// `(out, out)`, producing `(P, C, out, out)`. Crop rectangles must lie
/// inside the image; crop coordinates themselves carry no gradient.
pub fn crop_resize_bilinear<F: Elem>(x: &Var<F>, crops: &[CropSpec], out_size: usize) -> Var<F> {
    let x4 = x.data.view().into_dimensionality::<Ix4>().unwrap();
    let (_, c, h, w) = x4.dim();
    for cr in crops {
        assert!(cr.top + cr.size <= h && cr.left + cr.size <= w, "crop out of bounds");
    }
    let p = crops.len();
    let mut out = Array4::<F>::zeros((p, c, out_size, out_size));
    let ratio = |cr: &CropSpec| cr.size as f64 / out_size as f64;
    for (pi, cr) in crops.iter().enumerate() {
        let r = ratio(cr);
        for oy in 0..out_size {
            let sy = ((oy as f64 + 0.5) * r - 0.5).clamp(0.0, cr.size as f64 - 1.0);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(cr.size - 1);
            let fy = F::of(sy - y0 as f64);
            for ox in 0..out_size {
                let sx = ((ox as f64 + 0.5) * r - 0.5).clamp(0.0, cr.size as f64 - 1.0);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(cr.size - 1);
                let fx = F::of(sx - x0 as f64);
                for ci in 0..c {
                    let v00 = x4[[cr.batch, ci, cr.top + y0, cr.left + x0]];
                    let v01 = x4[[cr.batch, ci, cr.top + y0, cr.left + x1]];
                    let v10 = x4[[cr.batch, ci, cr.top + y1, cr.left + x0]];
                    let v11 = x4[[cr.batch, ci, cr.top + y1, cr.left + x1]];
                    let top = v00 + (v01 - v00) * fx;
                    let bot = v10 + (v11 - v10) * fx;
                    out[[pi, ci, oy, ox]] = top + (bot - top) * fy;
                }
            }
        }
    }
    let crops = crops.to_vec();
    let src_dim = x4.raw_dim();
    unary(x, out.into_dyn(), move |xid| {
        Box::new(move |g, sink| {
            let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
            let mut gx = Array4::<F>::zeros(src_dim);
            for (pi, cr) in crops.iter().enumerate() {
                let r = cr.size as f64 / out_size as f64;
                for oy in 0..out_size {
                    let sy = ((oy as f64 + 0.5) * r - 0.5).clamp(0.0, cr.size as f64 - 1.0);
                    let y0 = sy.floor() as usize;
                    let y1 = (y0 + 1).min(cr.size - 1);
                    let fy = sy - y0 as f64;
                    for ox in 0..out_size {
                        let sx = ((ox as f64 + 0.5) * r - 0.5).clamp(0.0, cr.size as f64 - 1.0);
                        let x0 = sx.floor() as usize;
                        let x1 = (x0 + 1).min(cr.size - 1);
                        let fx = sx - x0 as f64;
                        let w00 = F::of((1.0 - fy) * (1.0 - fx));
                        let w01 = F::of((1.0 - fy) * fx);
                        let w10 = F::of(fy * (1.0 - fx));
                        let w11 = F::of(fy * fx);
                        for ci in 0..g4.dim().1 {
                            let gv = g4[[pi, ci, oy, ox]];
                            gx[[cr.batch, ci, cr.top + y0, cr.left + x0]] += gv * w00;
                            gx[[cr.batch, ci, cr.top + y0, cr.left + x1]] += gv * w01;
                            gx[[cr.batch, ci, cr.top + y1, cr.left + x0]] += gv * w10;
                            gx[[cr.batch, ci, cr.top + y1, cr.left + x1]] += gv * w11;
                        }
                    }
                }
            }
            sink.add(xid, gx.into_dyn());
        })
    })
}

fn conv_out_len(inp: usize, k: usize, stride: usize, pad: usize) -> usize {
    (inp + 2 * pad - k) / stride + 1
}

fn im2col<F: Elem>(
    x: &ndarray::ArrayView4<'_, F>,
    n: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array2<F> {
    let (_, c, h, w) = x.dim();
    let oh = conv_out_len(h, k, stride, pad);
    let ow = conv_out_len(w, k, stride, pad);
    let mut col = Array2::<F>::zeros((c * k * k, oh * ow));
    let col_slice = col.as_slice_mut().unwrap();
    let row_len = oh * ow;
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().unwrap();
    let plane = h * w;
    let img_base = n * c * plane;
    col_slice
        .par_chunks_mut(row_len)
        .enumerate()
        .for_each(|(row, dst)| {
            let ci = row / (k * k);
            let ki = (row / k) % k;
            let kj = row % k;
            let chan = &xs[img_base + ci * plane..img_base + (ci + 1) * plane];
            for oy in 0..oh {
                let iy = (oy * stride + ki) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let src_row = &chan[iy as usize * w..(iy as usize + 1) * w];
                let base = oy * ow;
                if stride == 1 {
                    // valid ox span: 0 <= ox + kj - pad < w, contiguous copy
                    let ox_lo = pad.saturating_sub(kj).min(ow);
                    let ox_hi = (w + pad).saturating_sub(kj).min(ow);
                    if ox_hi > ox_lo {
                        let ix_lo = ox_lo + kj - pad;
                        let len = ox_hi - ox_lo;
                        dst[base + ox_lo..base + ox_lo + len]
                            .copy_from_slice(&src_row[ix_lo..ix_lo + len]);
                    }
                } else {
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[base + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        });
    col
}

fn col2im<F: Elem>(
    dcol: &ArrayView2<'_, F>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array3<F> {
    let oh = conv_out_len(h, k, stride, pad);
    let ow = conv_out_len(w, k, stride, pad);
    let mut out = Array3::<F>::zeros((c, h, w));
    let os = out.as_slice_mut().unwrap();
    let ds = dcol.as_standard_layout();
    let ds = ds.as_slice().unwrap();
    let plane = h * w;
    for row in 0..c * k * k {
        let ci = row / (k * k);
        let ki = (row / k) % k;
        let kj = row % k;
        let src = &ds[row * oh * ow..(row + 1) * oh * ow];
        let chan = &mut os[ci * plane..(ci + 1) * plane];
        for oy in 0..oh {
            let iy = (oy * stride + ki) as isize - pad as isize;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            let dst_row = &mut chan[iy as usize * w..(iy as usize + 1) * w];
            let base = oy * ow;
            for ox in 0..ow {
                let ix = (ox * stride + kj) as isize - pad as isize;
                if ix >= 0 && ix < w as isize {
                    dst_row[ix as usize] += src[base + ox];
                }
            }
        }
    }
    out
}

/// 2-d convolution of `(N, C, H, W)` with kernels `(O, C, K, K)`, square
/// stride and zero padding, no bias.
pub fn conv2d<F: Elem>(x: &Var<F>, weight: &Var<F>, stride: usize, pad: usize) -> Var<F> {
    let x4 = x.data.view().into_dimensionality::<Ix4>().unwrap();
    let w4 = weight.data.view().into_dimensionality::<Ix4>().unwrap();
    let (n, c, h, w) = x4.dim();
    let (o, wc, k, k2) = w4.dim();
    assert_eq!(c, wc, "conv2d: channel mismatch");
    assert_eq!(k, k2, "conv2d: kernels are square");
    let oh = conv_out_len(h, k, stride, pad);
    let ow = conv_out_len(w, k, stride, pad);
    let w_flat = weight.data.to_shape((o, c * k * k)).unwrap().to_owned();

    let track = x.node.is_some() || weight.node.is_some();
    let mut out = Array4::<F>::zeros((n, o, oh, ow));
    let mut saved_cols: Vec<Array2<F>> = Vec::new();
    let use_gemm_1x1 = k == 1 && stride == 1 && pad == 0;
    for ni in 0..n {
        if use_gemm_1x1 {
            // 1x1 stride-1 convolution is a plain matrix product.
            let xm = x.data.to_shape((n, c, h * w)).unwrap();
            let xs = xm.index_axis(Axis(0), ni);
            let mut dst = out.index_axis_mut(Axis(0), ni);
            let mut dst2 = dst.view_mut().into_shape_with_order((o, oh * ow)).unwrap();
            matmul_into(&mut dst2, w_flat.view(), xs, F::one(), F::zero());
        } else {
            let col = im2col(&x4, ni, k, stride, pad);
            let mut dst = out.index_axis_mut(Axis(0), ni);
            let mut dst2 = dst.view_mut().into_shape_with_order((o, oh * ow)).unwrap();
            matmul_into(&mut dst2, w_flat.view(), col.view(), F::one(), F::zero());
            if track {
                saved_cols.push(col);
            }
        }
    }

    let mut v = Var::constant(out.into_dyn());
    if let Some(tape) = Var::joint_tape(&[x, weight]) {
        let xid = x.node_id();
        let wid = weight.node_id();
        let x_saved = x.data.clone();
        let w_dim = w4.raw_dim();
        let id = tape.push(Box::new(move |gout, sink| {
            let g4 = gout.view().into_dimensionality::<Ix4>().unwrap();
            if let Some(i) = wid {
                let mut dw = Array2::<F>::zeros((o, c * k * k));
                for ni in 0..n {
                    let gslice = g4.index_axis(Axis(0), ni);
                    let g2 = gslice.to_shape((o, oh * ow)).unwrap();
                    if use_gemm_1x1 {
                        let xm = x_saved.to_shape((n, c, h * w)).unwrap();
                        let xs = xm.index_axis(Axis(0), ni);
                        matmul_into(&mut dw.view_mut(), g2.view(), xs.t(), F::one(), F::one());
                    } else {
                        matmul_into(
                            &mut dw.view_mut(),
                            g2.view(),
                            saved_cols[ni].t(),
                            F::one(),
                            F::one(),
                        );
                    }
                }
                sink.add(i, dw.into_shape_with_order(w_dim.clone()).unwrap().into_dyn());
            }
            if let Some(i) = xid {
                let mut dx = Array4::<F>::zeros((n, c, h, w));
                for ni in 0..n {
                    let gslice = g4.index_axis(Axis(0), ni);
                    let g2 = gslice.to_shape((o, oh * ow)).unwrap();
                    if use_gemm_1x1 {
                        let mut dxn = dx.index_axis_mut(Axis(0), ni);
                        let mut dx2 = dxn.view_mut().into_shape_with_order((c, h * w)).unwrap();
                        matmul_into(&mut dx2, w_flat.t(), g2.view(), F::one(), F::zero());
                    } else {
                        let dcol = matmul(w_flat.t(), g2.view());
                        let dxn = col2im(&dcol.view(), c, h, w, k, stride, pad);
                        dx.index_axis_mut(Axis(0), ni).assign(&dxn);
                    }
                }
                sink.add(i, dx.into_dyn());
            }
        }));
        v.node = Some((tape, id));
    }
    v
}

/// Max pooling with square kernel/stride/padding over `(N, C, H, W)`.
pub fn maxpool2d<F: Elem>(x: &Var<F>, k: usize, stride: usize, pad: usize) -> Var<F> {
    let x4 = x.data.view().into_dimensionality::<Ix4>().unwrap();
    let (n, c, h, w) = x4.dim();
    let oh = conv_out_len(h, k, stride, pad);
    let ow = conv_out_len(w, k, stride, pad);
    let mut out = Array4::<F>::zeros((n, c, oh, ow));
    let mut argmax = vec![0usize; n * c * oh * ow];
    {
        let xs = x4.as_standard_layout();
        let xs = xs.as_slice().unwrap();
        let os = out.as_slice_mut().unwrap();
        let plane = h * w;
        for nc in 0..n * c {
            let chan = &xs[nc * plane..(nc + 1) * plane];
            let out_chan = &mut os[nc * oh * ow..(nc + 1) * oh * ow];
            let arg_chan = &mut argmax[nc * oh * ow..(nc + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = F::neg_infinity();
                    let mut best_idx = 0usize;
                    for ki in 0..k {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &chan[iy as usize * w..(iy as usize + 1) * w];
                        for kj in 0..k {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let v = row[ix as usize];
                            if v > best {
                                best = v;
                                best_idx = iy as usize * w + ix as usize;
                            }
                        }
                    }
                    out_chan[oy * ow + ox] = best;
                    arg_chan[oy * ow + ox] = best_idx;
                }
            }
        }
    }
    unary(x, out.into_dyn(), move |xid| {
        Box::new(move |g, sink| {
            let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
            let gs = g4.as_standard_layout();
            let gs = gs.as_slice().unwrap();
            let mut gx = Array4::<F>::zeros((n, c, h, w));
            let gxs = gx.as_slice_mut().unwrap();
            let plane = h * w;
            for nc in 0..n * c {
                let g_chan = &gs[nc * oh * ow..(nc + 1) * oh * ow];
                let dst = &mut gxs[nc * plane..(nc + 1) * plane];
                for (o, &idx) in argmax[nc * oh * ow..(nc + 1) * oh * ow].iter().enumerate() {
                    dst[idx] += g_chan[o];
                }
            }
            sink.add(xid, gx.into_dyn());
        })
    })
}

/// Global average pooling `(N, C, H, W) -> (N, C)`.
pub fn global_avgpool<F: Elem>(x: &Var<F>) -> Var<F> {
    let x4 = x.data.view().into_dimensionality::<Ix4>().unwrap();
    let (n, c, h, w) = x4.dim();
    let mut out = Array2::<F>::zeros((n, c));
    let m = F::of((h * w) as f64);
    for ni in 0..n {
        for ci in 0..c {
            out[[ni, ci]] = x4.slice(ndarray::s![ni, ci, .., ..]).sum() / m;
        }
    }
    unary(x, out.into_dyn(), move |xid| {
        Box::new(move |g, sink| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let mut gx = Array4::<F>::zeros((n, c, h, w));
            for ni in 0..n {
                for ci in 0..c {
                    let gv = g2[[ni, ci]] / m;
                    gx.slice_mut(ndarray::s![ni, ci, .., ..]).fill(gv);
                }
            }
            sink.add(xid, gx.into_dyn());
        })
    })
}

/// Result of a batch-norm forward in training mode: normalized output plus
/// the batch statistics needed for the running-average update.
pub struct BatchNormOut<F: Elem> {
    pub y: Var<F>,
    pub batch_mean: Array1<F>,
    pub batch_var_biased: Array1<F>,
}

/// Batch normalization over `(N, C, H, W)` using batch statistics.
pub fn batchnorm2d_train<F: Elem>(
    x: &Var<F>,
    gamma: &Var<F>,
    beta: &Var<F>,
    eps: F,
) -> BatchNormOut<F> {
    let x4 = x.data.view().into_dimensionality::<Ix4>().unwrap();
    let (n, c, h, w) = x4.dim();
    let m = F::of((n * h * w) as f64);
    let g1 = gamma.data.view().into_dimensionality::<Ix1>().unwrap();
    let b1 = beta.data.view().into_dimensionality::<Ix1>().unwrap();

    let mut mean = Array1::<F>::zeros(c);
    let mut var = Array1::<F>::zeros(c);
    for ci in 0..c {
        let sl = x4.slice(ndarray::s![.., ci, .., ..]);
        let mu = sl.sum() / m;
        mean[ci] = mu;
        var[ci] = sl.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() / m;
    }
    let inv_std: Array1<F> = var.mapv(|v| (v + eps).sqrt().recip());
    let mut xhat = Array4::<F>::zeros((n, c, h, w));
    let mut out = Array4::<F>::zeros((n, c, h, w));
    for ci in 0..c {
        let mu = mean[ci];
        let inv = inv_std[ci];
        let ga = g1[ci];
        let be = b1[ci];
        let src = x4.slice(ndarray::s![.., ci, .., ..]);
        let mut xh = xhat.slice_mut(ndarray::s![.., ci, .., ..]);
        let mut ov = out.slice_mut(ndarray::s![.., ci, .., ..]);
        ndarray::Zip::from(&mut xh).and(&mut ov).and(&src).for_each(|xh, ov, &v| {
            let normed = (v - mu) * inv;
            *xh = normed;
            *ov = normed * ga + be;
        });
    }

    let mut y = Var::constant(out.into_dyn());
    if let Some(tape) = Var::joint_tape(&[x, gamma, beta]) {
        let xid = x.node_id();
        let gid = gamma.node_id();
        let bid = beta.node_id();
        let gamma_saved = gamma.data.clone();
        let inv_std_saved = inv_std.clone();
        let xhat_saved = xhat;
        let id = tape.push(Box::new(move |gout, sink| {
            let g4 = gout.view().into_dimensionality::<Ix4>().unwrap();
            let gam = gamma_saved.view().into_dimensionality::<Ix1>().unwrap();
            if let Some(i) = bid {
                let mut db = Array1::<F>::zeros(c);
                for ci in 0..c {
                    db[ci] = g4.slice(ndarray::s![.., ci, .., ..]).sum();
                }
                sink.add(i, db.into_dyn());
            }
            if let Some(i) = gid {
                let mut dg = Array1::<F>::zeros(c);
                for ci in 0..c {
                    let gs = g4.slice(ndarray::s![.., ci, .., ..]);
                    let xh = xhat_saved.slice(ndarray::s![.., ci, .., ..]);
                    dg[ci] = ndarray::Zip::from(&gs).and(&xh).fold(F::zero(), |acc, &g, &x| acc + g * x);
                }
                sink.add(i, dg.into_dyn());
            }
            if let Some(i) = xid {
                let mut gx = Array4::<F>::zeros((n, c, h, w));
                for ci in 0..c {
                    let gs = g4.slice(ndarray::s![.., ci, .., ..]);
                    let xh = xhat_saved.slice(ndarray::s![.., ci, .., ..]);
                    let sum_g = gs.sum();
                    let sum_gx = ndarray::Zip::from(&gs).and(&xh).fold(F::zero(), |acc, &g, &x| acc + g * x);
                    let mean_g = sum_g / m;
                    let mean_gx = sum_gx / m;
                    let scale = gam[ci] * inv_std_saved[ci];
                    let mut dst = gx.slice_mut(ndarray::s![.., ci, .., ..]);
                    ndarray::Zip::from(&mut dst).and(&gs).and(&xh).for_each(|d, &g, &x| {
                        *d = scale * (g - mean_g - x * mean_gx);
                    });
                }
                sink.add(i, gx.into_dyn());
            }
        }));
        y.node = Some((tape, id));
    }
    BatchNormOut {
        y,
        batch_mean: mean,
        batch_var_biased: var,
    }
}

/// Batch normalization with frozen running statistics (evaluation mode).
pub fn batchnorm2d_eval<F: Elem>(
    x: &Var<F>,
    gamma: &Var<F>,
    beta: &Var<F>,
    running_mean: &Array1<F>,
    running_var: &Array1<F>,
    eps: F,
) -> Var<F> {
    let x4 = x.data.view().into_dimensionality::<Ix4>().unwrap();
    let (n, c, h, w) = x4.dim();
    let g1 = gamma.data.view().into_dimensionality::<Ix1>().unwrap();
    let b1 = beta.data.view().into_dimensionality::<Ix1>().unwrap();
    let inv_std: Array1<F> = running_var.mapv(|v| (v + eps).sqrt().recip());
    let mut out = Array4::<F>::zeros((n, c, h, w));
    for ci in 0..c {
        let mu = running_mean[ci];
        let scale = g1[ci] * inv_std[ci];
        let shift = b1[ci];
        let src = x4.slice(ndarray::s![.., ci, .., ..]);
        let mut dst = out.slice_mut(ndarray::s![.., ci, .., ..]);
        ndarray::Zip::from(&mut dst).and(&src).for_each(|d, &v| {
            *d = (v - mu) * scale + shift;
        });
    }
    let mut y = Var::constant(out.into_dyn());
    if let Some(tape) = Var::joint_tape(&[x, gamma, beta]) {
        let xid = x.node_id();
        let gid = gamma.node_id();
        let bid = beta.node_id();
        let gamma_saved = gamma.data.clone();
        let x_saved = x.data.clone();
        let rm = running_mean.clone();
        let inv = inv_std.clone();
        let id = tape.push(Box::new(move |gout, sink| {
            let g4 = gout.view().into_dimensionality::<Ix4>().unwrap();
            let gam = gamma_saved.view().into_dimensionality::<Ix1>().unwrap();
            if let Some(i) = bid {
                let mut db = Array1::<F>::zeros(c);
                for ci in 0..c {
                    db[ci] = g4.slice(ndarray::s![.., ci, .., ..]).sum();
                }
                sink.add(i, db.into_dyn());
            }
            if let Some(i) = gid {
                let x4v = x_saved.view().into_dimensionality::<Ix4>().unwrap();
                let mut dg = Array1::<F>::zeros(c);
                for ci in 0..c {
                    let gs = g4.slice(ndarray::s![.., ci, .., ..]);
                    let xs = x4v.slice(ndarray::s![.., ci, .., ..]);
                    let mu = rm[ci];
                    let iv = inv[ci];
                    dg[ci] = ndarray::Zip::from(&gs)
                        .and(&xs)
                        .fold(F::zero(), |acc, &g, &x| acc + g * (x - mu) * iv);
                }
                sink.add(i, dg.into_dyn());
            }
            if let Some(i) = xid {
                let mut gx = Array4::<F>::zeros((n, c, h, w));
                for ci in 0..c {
                    let scale = gam[ci] * inv[ci];
                    let gs = g4.slice(ndarray::s![.., ci, .., ..]);
                    let mut dst = gx.slice_mut(ndarray::s![.., ci, .., ..]);
                    ndarray::Zip::from(&mut dst).and(&gs).for_each(|d, &g| *d = g * scale);
                }
                sink.add(i, gx.into_dyn());
            }
        }));
        y.node = Some((tape, id));
    }
    y
}

/// Per-deep-pixel token sets from a shallow feature map.
///
/// `(N, C, Hl, Wl)` becomes `(N*Hh*Wh, k, C)` where each deep pixel collects
/// the `k = (Hl/Hh)*(Wl/Wh)` shallow pixels of its co-located patch in
/// row-major order.
pub fn shallow_to_tokens<F: Elem>(x: &Var<F>, hh: usize, wh: usize) -> Var<F> {
    let x4 = x.data.view().into_dimensionality::<Ix4>().unwrap();
    let (n, c, hl, wl) = x4.dim();
    assert_eq!(hl % hh, 0, "shallow height not divisible by deep height");
    assert_eq!(wl % wh, 0, "shallow width not divisible by deep width");
    let ph = hl / hh;
    let pw = wl / wh;
    let k = ph * pw;
    let mut out = Array3::<F>::zeros((n * hh * wh, k, c));
    {
        let xs = x4.as_standard_layout();
        let xs = xs.as_slice().unwrap();
        let os = out.as_slice_mut().unwrap();
        let plane = hl * wl;
        for ni in 0..n {
            for dy in 0..hh {
                for dx in 0..wh {
                    let set = (ni * hh + dy) * wh + dx;
                    for py in 0..ph {
                        for px in 0..pw {
                            let tok = py * pw + px;
                            let pix = (dy * ph + py) * wl + dx * pw + px;
                            let dst = &mut os[(set * k + tok) * c..(set * k + tok + 1) * c];
                            let mut src = ni * c * plane + pix;
                            for d in dst.iter_mut() {
                                *d = xs[src];
                                src += plane;
                            }
                        }
                    }
                }
            }
        }
    }
    unary(x, out.into_dyn(), move |xid| {
        Box::new(move |g, sink| {
            let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
            let gs = g3.as_standard_layout();
            let gs = gs.as_slice().unwrap();
            let mut gx = Array4::<F>::zeros((n, c, hl, wl));
            let gxs = gx.as_slice_mut().unwrap();
            let plane = hl * wl;
            for ni in 0..n {
                for dy in 0..hh {
                    for dx in 0..wh {
                        let set = (ni * hh + dy) * wh + dx;
                        for py in 0..ph {
                            for px in 0..pw {
                                let tok = py * pw + px;
                                let pix = (dy * ph + py) * wl + dx * pw + px;
                                let src = &gs[(set * k + tok) * c..(set * k + tok + 1) * c];
                                let mut dst = ni * c * plane + pix;
                                for &s in src.iter() {
                                    gxs[dst] += s;
                                    dst += plane;
                                }
                            }
                        }
                    }
                }
            }
            sink.add(xid, gx.into_dyn());
        })
    })
}

/// Flattens a feature map `(N, C, H, W)` to per-pixel rows `(N*H*W, C)`.
pub fn map_to_tokens<F: Elem>(x: &Var<F>) -> Var<F> {
    let x4 = x.data.view().into_dimensionality::<Ix4>().unwrap();
    let (n, c, h, w) = x4.dim();
    let mut out = Array2::<F>::zeros((n * h * w, c));
    {
        let xs = x4.as_standard_layout();
        let xs = xs.as_slice().unwrap();
        let os = out.as_slice_mut().unwrap();
        let plane = h * w;
        for ni in 0..n {
            for pix in 0..plane {
                let dst = &mut os[(ni * plane + pix) * c..(ni * plane + pix + 1) * c];
                let mut src = ni * c * plane + pix;
                for d in dst.iter_mut() {
                    *d = xs[src];
                    src += plane;
                }
            }
        }
    }
    unary(x, out.into_dyn(), move |xid| {
        Box::new(move |g, sink| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let gs = g2.as_standard_layout();
            let gs = gs.as_slice().unwrap();
            let mut gx = Array4::<F>::zeros((n, c, h, w));
            let gxs = gx.as_slice_mut().unwrap();
            let plane = h * w;
            for ni in 0..n {
                for pix in 0..plane {
                    let src = &gs[(ni * plane + pix) * c..(ni * plane + pix + 1) * c];
                    let mut dst = ni * c * plane + pix;
                    for &s in src.iter() {
                        gxs[dst] = s;
                        dst += plane;
                    }
                }
            }
            sink.add(xid, gx.into_dyn());
        })
    })
}

/// Inverse of [`map_to_tokens`]: per-pixel rows `(N*H*W, C)` to `(N, C, H, W)`.
pub fn tokens_to_map<F: Elem>(x: &Var<F>, n: usize, h: usize, w: usize) -> Var<F> {
    let x2 = x.data.view().into_dimensionality::<Ix2>().unwrap();
    let (rows, c) = x2.dim();
    assert_eq!(rows, n * h * w);
    let mut out = Array4::<F>::zeros((n, c, h, w));
    {
        let xs = x2.as_standard_layout();
        let xs = xs.as_slice().unwrap();
        let os = out.as_slice_mut().unwrap();
        let plane = h * w;
        for ni in 0..n {
            for pix in 0..plane {
                let src = &xs[(ni * plane + pix) * c..(ni * plane + pix + 1) * c];
                let mut dst = ni * c * plane + pix;
                for &s in src.iter() {
                    os[dst] = s;
                    dst += plane;
                }
            }
        }
    }
    unary(x, out.into_dyn(), move |xid| {
        Box::new(move |g, sink| {
            let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
            let gs = g4.as_standard_layout();
            let gs = gs.as_slice().unwrap();
            let mut gx = Array2::<F>::zeros((rows, c));
            let gxs = gx.as_slice_mut().unwrap();
            let plane = h * w;
            for ni in 0..n {
                for pix in 0..plane {
                    let dst = &mut gxs[(ni * plane + pix) * c..(ni * plane + pix + 1) * c];
                    let mut src = ni * c * plane + pix;
                    for d in dst.iter_mut() {
                        *d = gs[src];
                        src += plane;
                    }
                }
            }
            sink.add(xid, gx.into_dyn());
        })
    })
}

/// Builds token sets `(B, 1+K, D)` with the high-level token first.
pub fn concat_token_sets<F: Elem>(high: &Var<F>, lows: &Var<F>) -> Var<F> {
    let h2 = high.data.view().into_dimensionality::<Ix2>().unwrap();
    let l3 = lows.data.view().into_dimensionality::<Ix3>().unwrap();
    let (b, d) = h2.dim();
    let (bl, k, dl) = l3.dim();
    assert_eq!(b, bl, "token set batch mismatch");
    assert_eq!(d, dl, "token width mismatch");
    let mut out = Array3::<F>::zeros((b, k + 1, d));
    for bi in 0..b {
        out.slice_mut(ndarray::s![bi, 0, ..]).assign(&h2.row(bi));
        out.slice_mut(ndarray::s![bi, 1.., ..])
            .assign(&l3.index_axis(Axis(0), bi));
    }
    let mut v = Var::constant(out.into_dyn());
    if let Some(tape) = Var::joint_tape(&[high, lows]) {
        let hid = high.node_id();
        let lid = lows.node_id();
        let id = tape.push(Box::new(move |g, sink| {
            let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
            if let Some(i) = hid {
                sink.add(i, g3.slice(ndarray::s![.., 0, ..]).to_owned().into_dyn());
            }
            if let Some(i) = lid {
                sink.add(i, g3.slice(ndarray::s![.., 1.., ..]).to_owned().into_dyn());
            }
        }));
        v.node = Some((tape, id));
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{backward, gradcheck, Ctx, Params, Tape};
    use ndarray::{ArrayD, IxDyn};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    /// Checks d(sum of squares of op(param)) / d(param) against central
    /// differences for an op driven by a single parameter tensor.
    fn check_unary(
        shape: &[usize],
        seed: u64,
        f: impl Fn(&Ctx<'_, f64>, &Var<f64>) -> Var<f64> + 'static,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::<f64>::new();
        params.add("x", rand_array(&mut rng, shape));
        let err = gradcheck::max_rel_error_for_param(&mut params, "x", 1e-5, &|ctx| {
            let x = ctx.p(crate::tensor::ParamId(0));
            let y = f(ctx, &x);
            let sq = ops_mul_self(&y);
            mean_all(&sq)
        });
        assert!(err < 1e-4, "gradient mismatch: rel err {err}");
    }

    /// y*y through existing ops (scale by itself is not an op; use relu-safe
    /// square via sub/add trickery is awkward, so build it from mul support:
    /// here we simply use `bmm`-free elementwise square by two ops).
    fn ops_mul_self(y: &Var<f64>) -> Var<f64> {
        // square(x) = x * x implemented via a dedicated tiny op for tests
        let out = y.data.mapv(|v| v * v);
        let saved = y.data.clone();
        let mut v = Var::constant(out);
        if let Some((tape, yid)) = &y.node {
            let yid = *yid;
            let id = tape.push(Box::new(move |g, sink| {
                let mut gx = g.clone();
                gx.zip_mut_with(&saved, |gv, &s| *gv *= 2.0 * s);
                sink.add(yid, gx);
            }));
            v.node = Some((tape.clone(), id));
        }
        v
    }

    #[test]
    fn grad_relu() {
        check_unary(&[4, 5], 1, |_, x| relu(x));
    }

    #[test]
    fn grad_softmax() {
        check_unary(&[3, 7], 2, |_, x| softmax_lastdim(x));
    }

    #[test]
    fn grad_reshape_scale_add() {
        check_unary(&[2, 6], 3, |_, x| {
            let a = reshape(x, &[3, 4]);
            let b = scale(&a, 1.7);
            add(&b, &a)
        });
    }

    #[test]
    fn grad_sub_select_gather() {
        check_unary(&[5, 3], 4, |_, x| {
            let c0 = select_column(x, 0);
            let c2 = select_column(x, 2);
            let d = sub(&c0, &c2);
            let g = gather_rows(x, &[4, 1, 1, 0]);
            add(&reshape(&d, &[5]), &reshape(&sum_to_five(&g), &[5]))
        });
    }

    fn sum_to_five(g: &Var<f64>) -> Var<f64> {
        // (4,3) -> take mean to scalar then broadcast-free: just gather rows
        // again to 5 entries via column select; keep simple: mean * ones(5)
        let m = mean_all(g);
        let val = m.scalar();
        let mut v = Var::constant(ArrayD::from_elem(IxDyn(&[5]), val));
        if let Some((tape, mid)) = &m.node {
            let mid = *mid;
            let id = tape.push(Box::new(move |grad, sink| {
                let s: f64 = grad.sum();
                sink.add(mid, ArrayD::from_elem(IxDyn(&[]), s));
            }));
            v.node = Some((tape.clone(), id));
        }
        v
    }

    #[test]
    fn grad_matmul_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = Params::<f64>::new();
        params.add("x", rand_array(&mut rng, &[4, 3]));
        params.add("w", rand_array(&mut rng, &[3, 6]));
        params.add("b", rand_array(&mut rng, &[6]));
        for name in ["x", "w", "b"] {
            let err = gradcheck::max_rel_error_for_param(&mut params, name, 1e-5, &|ctx| {
                let x = ctx.p(crate::tensor::ParamId(0));
                let w = ctx.p(crate::tensor::ParamId(1));
                let b = ctx.p(crate::tensor::ParamId(2));
                let y = linear(&x, &w, Some(&b));
                mean_all(&ops_mul_self(&y))
            });
            assert!(err < 1e-4, "{name}: rel err {err}");
        }
    }

    #[test]
    fn grad_layernorm() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut params = Params::<f64>::new();
        params.add("x", rand_array(&mut rng, &[3, 8]));
        params.add("g", rand_array(&mut rng, &[8]));
        params.add("b", rand_array(&mut rng, &[8]));
        for name in ["x", "g", "b"] {
            let err = gradcheck::max_rel_error_for_param(&mut params, name, 1e-5, &|ctx| {
                let x = ctx.p(crate::tensor::ParamId(0));
                let g = ctx.p(crate::tensor::ParamId(1));
                let b = ctx.p(crate::tensor::ParamId(2));
                let y = layernorm_lastdim(&x, &g, &b, 1e-5);
                mean_all(&ops_mul_self(&y))
            });
            assert!(err < 1e-4, "{name}: rel err {err}");
        }
    }

    #[test]
    fn grad_bmm_both_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &tb in &[false, true] {
            let mut params = Params::<f64>::new();
            params.add("a", rand_array(&mut rng, &[2, 3, 4]));
            params.add(
                "b",
                rand_array(&mut rng, if tb { &[2, 5, 4] } else { &[2, 4, 5] }),
            );
            for name in ["a", "b"] {
                let err = gradcheck::max_rel_error_for_param(&mut params, name, 1e-5, &|ctx| {
                    let a = ctx.p(crate::tensor::ParamId(0));
                    let b = ctx.p(crate::tensor::ParamId(1));
                    let y = bmm(&a, &b, tb, 0.37);
                    mean_all(&ops_mul_self(&y))
                });
                assert!(err < 1e-4, "tb={tb} {name}: rel err {err}");
            }
        }
    }

    #[test]
    fn grad_heads_roundtrip() {
        check_unary(&[6, 8], 8, |_, x| {
            // 6 rows = batch 2 x 3 tokens, 8 dims, 2 heads
            let h = split_heads(x, 2, 3, 2);
            let m = merge_heads(&h, 2, 2);
            m
        });
        // round trip is the identity
        let x = Var::constant(ArrayD::from_shape_fn(IxDyn(&[6, 8]), |ix| {
            (ix[0] * 8 + ix[1]) as f64
        }));
        let h = split_heads(&x, 2, 3, 2);
        let m = merge_heads(&h, 2, 2);
        assert_eq!(m.data, x.data);
    }

    #[test]
    fn grad_conv2d() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for &(k, s, p) in &[(3usize, 1usize, 1usize), (1, 1, 0), (3, 2, 1), (2, 2, 0)] {
            let mut params = Params::<f64>::new();
            params.add("x", rand_array(&mut rng, &[2, 3, 6, 6]));
            params.add("w", rand_array(&mut rng, &[4, 3, k, k]));
            for name in ["x", "w"] {
                let err = gradcheck::max_rel_error_for_param(&mut params, name, 1e-5, &|ctx| {
                    let x = ctx.p(crate::tensor::ParamId(0));
                    let w = ctx.p(crate::tensor::ParamId(1));
                    let y = conv2d(&x, &w, s, p);
                    mean_all(&ops_mul_self(&y))
                });
                assert!(err < 1e-4, "k={k} s={s} p={p} {name}: rel err {err}");
            }
        }
    }

    #[test]
    fn conv2d_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = rand_array(&mut rng, &[2, 3, 7, 7]);
        let w = rand_array(&mut rng, &[4, 3, 3, 3]);
        let y = conv2d(&Var::constant(x.clone()), &Var::constant(w.clone()), 2, 1);
        let x4 = x.view().into_dimensionality::<Ix4>().unwrap();
        let w4 = w.view().into_dimensionality::<Ix4>().unwrap();
        let y4 = y.data.view().into_dimensionality::<Ix4>().unwrap();
        let (oh, ow) = (4usize, 4usize);
        for n in 0..2 {
            for o in 0..4 {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for c in 0..3 {
                            for ki in 0..3 {
                                for kj in 0..3 {
                                    let iy = (oy * 2 + ki) as isize - 1;
                                    let ix = (ox * 2 + kj) as isize - 1;
                                    if iy >= 0 && iy < 7 && ix >= 0 && ix < 7 {
                                        acc += x4[[n, c, iy as usize, ix as usize]]
                                            * w4[[o, c, ki, kj]];
                                    }
                                }
                            }
                        }
                        let got = y4[[n, o, oy, ox]];
                        assert!((got - acc).abs() < 1e-10, "{got} vs {acc}");
                    }
                }
            }
        }
    }

    #[test]
    fn grad_maxpool_avgpool() {
        check_unary(&[2, 3, 6, 6], 11, |_, x| {
            let p = maxpool2d(x, 3, 2, 1);
            let a = global_avgpool(&p);
            reshape(&a, &[6])
        });
    }

    #[test]
    fn grad_batchnorm_train_and_eval() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut params = Params::<f64>::new();
        params.add("x", rand_array(&mut rng, &[3, 2, 4, 4]));
        params.add("g", rand_array(&mut rng, &[2]));
        params.add("b", rand_array(&mut rng, &[2]));
        for name in ["x", "g", "b"] {
            let err = gradcheck::max_rel_error_for_param(&mut params, name, 1e-5, &|ctx| {
                let x = ctx.p(crate::tensor::ParamId(0));
                let g = ctx.p(crate::tensor::ParamId(1));
                let b = ctx.p(crate::tensor::ParamId(2));
                let out = batchnorm2d_train(&x, &g, &b, 1e-5);
                mean_all(&ops_mul_self(&out.y))
            });
            assert!(err < 1e-4, "train {name}: rel err {err}");
        }
        let rm = ndarray::Array1::from_vec(vec![0.2, -0.1]);
        let rv = ndarray::Array1::from_vec(vec![0.9, 1.3]);
        for name in ["x", "g", "b"] {
            let rm = rm.clone();
            let rv = rv.clone();
            let err = gradcheck::max_rel_error_for_param(&mut params, name, 1e-5, &move |ctx| {
                let x = ctx.p(crate::tensor::ParamId(0));
                let g = ctx.p(crate::tensor::ParamId(1));
                let b = ctx.p(crate::tensor::ParamId(2));
                let y = batchnorm2d_eval(&x, &g, &b, &rm, &rv, 1e-5);
                mean_all(&ops_mul_self(&y))
            });
            assert!(err < 1e-4, "eval {name}: rel err {err}");
        }
    }

    #[test]
    fn grad_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut params = Params::<f64>::new();
        params.add("l", rand_array(&mut rng, &[5, 2]));
        let labels = vec![0usize, 1, 1, 0, 1];
        let err = gradcheck::max_rel_error_for_param(&mut params, "l", 1e-6, &|ctx| {
            let l = ctx.p(crate::tensor::ParamId(0));
            cross_entropy_logits(&l, &labels)
        });
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn cross_entropy_uniform_is_ln2() {
        let logits = Var::<f64>::constant(ArrayD::zeros(IxDyn(&[4, 2])));
        let loss = cross_entropy_logits(&logits, &[0, 1, 0, 1]);
        assert!((loss.scalar() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn grad_token_reorders() {
        check_unary(&[2, 3, 4, 4], 14, |_, x| {
            let toks = shallow_to_tokens(x, 2, 2);
            let flat = reshape(&toks, &[2 * 2 * 2 * 4, 3]);
            gather_rows(&flat, &[0, 5, 9])
        });
        check_unary(&[1, 4, 2, 2], 15, |_, x| {
            let t = map_to_tokens(x);
            let m = tokens_to_map(&t, 1, 2, 2);
            map_to_tokens(&m)
        });
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut params = Params::<f64>::new();
        params.add("h", rand_array(&mut rng, &[2, 4]));
        params.add("l", rand_array(&mut rng, &[2, 3, 4]));
        for name in ["h", "l"] {
            let err = gradcheck::max_rel_error_for_param(&mut params, name, 1e-5, &|ctx| {
                let h = ctx.p(crate::tensor::ParamId(0));
                let l = ctx.p(crate::tensor::ParamId(1));
                let ts = concat_token_sets(&h, &l);
                mean_all(&ops_mul_self(&ts))
            });
            assert!(err < 1e-4, "{name}: rel err {err}");
        }
    }

    #[test]
    fn shallow_tokens_row_major_order() {
        // 4x4 shallow over 2x2 deep: the set for deep (0,0) holds shallow
        // pixels (0,0),(0,1),(1,0),(1,1) in that order.
        let x = ArrayD::from_shape_fn(IxDyn(&[1, 1, 4, 4]), |ix| (ix[2] * 4 + ix[3]) as f64);
        let toks = shallow_to_tokens(&Var::constant(x), 2, 2);
        let t3 = toks.data.view().into_dimensionality::<Ix3>().unwrap();
        assert_eq!(
            t3.index_axis(Axis(0), 0)
                .iter()
                .copied()
                .collect::<Vec<_>>(),
            vec![0.0, 1.0, 4.0, 5.0]
        );
        assert_eq!(
            t3.index_axis(Axis(0), 3)
                .iter()
                .copied()
                .collect::<Vec<_>>(),
            vec![10.0, 11.0, 14.0, 15.0]
        );
    }

    #[test]
    fn grad_crop_resize_and_normalize() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut params = Params::<f64>::new();
        params.add("x", rand_array(&mut rng, &[2, 3, 8, 8]));
        let err = gradcheck::max_rel_error_for_param(&mut params, "x", 1e-5, &|ctx| {
            let x = ctx.p(crate::tensor::ParamId(0));
            let crops = [
                CropSpec { batch: 0, top: 1, left: 2, size: 5 },
                CropSpec { batch: 1, top: 0, left: 0, size: 8 },
            ];
            let patches = crop_resize_bilinear(&x, &crops, 4);
            let n = normalize_channels(&patches, &[0.4, 0.5, 0.6], &[0.2, 0.3, 0.25]);
            mean_all(&ops_mul_self(&n))
        });
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn crop_resize_identity_when_same_size() {
        let x = ArrayD::from_shape_fn(IxDyn(&[1, 1, 5, 5]), |ix| (ix[2] * 5 + ix[3]) as f64);
        let c = [CropSpec { batch: 0, top: 0, left: 0, size: 5 }];
        let y = crop_resize_bilinear(&Var::constant(x.clone()), &c, 5);
        for (a, b) in y.data.iter().zip(x.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_tokens_matches_manual() {
        check_unary(&[2, 3, 4], 18, |_, x| mean_tokens(x));
    }

    #[test]
    fn shared_param_grads_accumulate() {
        // Using one parameter twice must add both gradient contributions.
        let mut params = Params::<f64>::new();
        let pid = params.add("w", ArrayD::from_elem(IxDyn(&[2, 2]), 1.5));
        let tape = Tape::new();
        let ctx = Ctx::train(&params, tape);
        let w = ctx.p(pid);
        let w_again = ctx.p(pid);
        let y = matmul2(&w, &w_again);
        let loss = sum_all(&y);
        let grads = backward(&loss);
        let g = grads.for_param(pid).unwrap();
        // d/dW sum(W·W) = (W.sum_axis(cols) style) — check against finite diff
        let mut params2 = params;
        let err = gradcheck::max_rel_error_for_param(&mut params2, "w", 1e-6, &|ctx| {
            let w = ctx.p(pid);
            let w2 = ctx.p(pid);
            sum_all(&matmul2(&w, &w2))
        });
        assert!(err < 1e-5, "rel err {err}");
        assert!(g.iter().all(|v| v.is_finite()));
    }
}

/// Per-head scaled dot-product scores straight from packed token matrices.
///
/// `q: (B*Tq, D)` and `k: (B*Tk, D)` hold all heads side by side; the output
/// is `(B*H, Tq, Tk)` with `h_i` reading columns `i*dh..(i+1)*dh`. Avoids
/// materializing per-head copies.
pub fn attention_scores<F: Elem>(
    q: &Var<F>,
    k: &Var<F>,
    batch: usize,
    t_q: usize,
    t_k: usize,
    heads: usize,
    alpha: F,
) -> Var<F> {
    let q2 = q.data.view().into_dimensionality::<Ix2>().unwrap();
    let k2 = k.data.view().into_dimensionality::<Ix2>().unwrap();
    let (rq, d) = q2.dim();
    let (rk, dk) = k2.dim();
    assert_eq!(rq, batch * t_q);
    assert_eq!(rk, batch * t_k);
    assert_eq!(d, dk);
    assert_eq!(d % heads, 0);
    let dh = d / heads;
    let mut out = Array3::<F>::zeros((batch * heads, t_q, t_k));
    out.as_slice_mut()
        .unwrap()
        .par_chunks_mut(t_q * t_k)
        .enumerate()
        .for_each(|(g, dst)| {
            let (b, h) = (g / heads, g % heads);
            let qs = q2.slice(ndarray::s![b * t_q..(b + 1) * t_q, h * dh..(h + 1) * dh]);
            let ks = k2.slice(ndarray::s![b * t_k..(b + 1) * t_k, h * dh..(h + 1) * dh]);
            let mut ov = ndarray::ArrayViewMut2::from_shape((t_q, t_k), dst).unwrap();
            matmul_into(&mut ov, qs, ks.t(), alpha, F::zero());
        });
    let mut v = Var::constant(out.into_dyn());
    if let Some(tape) = Var::joint_tape(&[q, k]) {
        let qid = q.node_id();
        let kid = k.node_id();
        let q_saved = q.data.clone();
        let k_saved = k.data.clone();
        let id = tape.push(Box::new(move |gout, sink| {
            let g3 = gout.view().into_dimensionality::<Ix3>().unwrap();
            let q2 = q_saved.view().into_dimensionality::<Ix2>().unwrap();
            let k2 = k_saved.view().into_dimensionality::<Ix2>().unwrap();
            if let Some(i) = qid {
                let mut gq = Array2::<F>::zeros((batch * t_q, d));
                for g in 0..batch * heads {
                    let (b, h) = (g / heads, g % heads);
                    let gs = g3.index_axis(Axis(0), g);
                    let ks = k2.slice(ndarray::s![b * t_k..(b + 1) * t_k, h * dh..(h + 1) * dh]);
                    let mut dst = gq.slice_mut(ndarray::s![b * t_q..(b + 1) * t_q, h * dh..(h + 1) * dh]);
                    matmul_into(&mut dst, gs, ks, alpha, F::zero());
                }
                sink.add(i, gq.into_dyn());
            }
            if let Some(i) = kid {
                let mut gk = Array2::<F>::zeros((batch * t_k, d));
                for g in 0..batch * heads {
                    let (b, h) = (g / heads, g % heads);
                    let gs = g3.index_axis(Axis(0), g);
                    let qs = q2.slice(ndarray::s![b * t_q..(b + 1) * t_q, h * dh..(h + 1) * dh]);
                    let mut dst = gk.slice_mut(ndarray::s![b * t_k..(b + 1) * t_k, h * dh..(h + 1) * dh]);
                    matmul_into(&mut dst, gs.t(), qs, alpha, F::zero());
                }
                sink.add(i, gk.into_dyn());
            }
        }));
        v.node = Some((tape, id));
    }
    v
}

/// Applies attention weights to packed values: `(B*H, Tq, Tk) . (B*Tk, D)`
/// per head, producing packed `(B*Tq, D)`.
pub fn attention_apply<F: Elem>(
    attn: &Var<F>,
    values: &Var<F>,
    batch: usize,
    heads: usize,
) -> Var<F> {
    let a3 = attn.data.view().into_dimensionality::<Ix3>().unwrap();
    let v2 = values.data.view().into_dimensionality::<Ix2>().unwrap();
    let (gh, t_q, t_k) = a3.dim();
    let (rv, d) = v2.dim();
    assert_eq!(gh, batch * heads);
    assert_eq!(rv, batch * t_k);
    assert_eq!(d % heads, 0);
    let dh = d / heads;
    let mut out = Array2::<F>::zeros((batch * t_q, d));
    // parallel over batches: each thread owns t_q full rows of the output
    out.as_slice_mut()
        .unwrap()
        .par_chunks_mut(t_q * d)
        .enumerate()
        .for_each(|(b, rows)| {
            let mut block = ndarray::ArrayViewMut2::from_shape((t_q, d), rows).unwrap();
            for h in 0..heads {
                let a_bh = a3.index_axis(Axis(0), b * heads + h);
                let vs = v2.slice(ndarray::s![b * t_k..(b + 1) * t_k, h * dh..(h + 1) * dh]);
                let mut dst = block.slice_mut(ndarray::s![.., h * dh..(h + 1) * dh]);
                matmul_into(&mut dst, a_bh, vs, F::one(), F::zero());
            }
        });
    let mut out_var = Var::constant(out.into_dyn());
    if let Some(tape) = Var::joint_tape(&[attn, values]) {
        let aid = attn.node_id();
        let vid = values.node_id();
        let a_saved = attn.data.clone();
        let v_saved = values.data.clone();
        let id = tape.push(Box::new(move |gout, sink| {
            let g2 = gout.view().into_dimensionality::<Ix2>().unwrap();
            let a3 = a_saved.view().into_dimensionality::<Ix3>().unwrap();
            let v2 = v_saved.view().into_dimensionality::<Ix2>().unwrap();
            if let Some(i) = aid {
                let mut ga = Array3::<F>::zeros((batch * heads, t_q, t_k));
                ga.as_slice_mut()
                    .unwrap()
                    .par_chunks_mut(t_q * t_k)
                    .enumerate()
                    .for_each(|(g, dst)| {
                        let (b, h) = (g / heads, g % heads);
                        let gs = g2.slice(ndarray::s![b * t_q..(b + 1) * t_q, h * dh..(h + 1) * dh]);
                        let vs = v2.slice(ndarray::s![b * t_k..(b + 1) * t_k, h * dh..(h + 1) * dh]);
                        let mut dv = ndarray::ArrayViewMut2::from_shape((t_q, t_k), dst).unwrap();
                        matmul_into(&mut dv, gs, vs.t(), F::one(), F::zero());
                    });
                sink.add(i, ga.into_dyn());
            }
            if let Some(i) = vid {
                let mut gv = Array2::<F>::zeros((batch * t_k, d));
                gv.as_slice_mut()
                    .unwrap()
                    .par_chunks_mut(t_k * d)
                    .enumerate()
                    .for_each(|(b, rows)| {
                        let mut block = ndarray::ArrayViewMut2::from_shape((t_k, d), rows).unwrap();
                        for h in 0..heads {
                            let a_bh = a3.index_axis(Axis(0), b * heads + h);
                            let gs = g2.slice(ndarray::s![b * t_q..(b + 1) * t_q, h * dh..(h + 1) * dh]);
                            let mut dst = block.slice_mut(ndarray::s![.., h * dh..(h + 1) * dh]);
                            matmul_into(&mut dst, a_bh.t(), gs, F::one(), F::zero());
                        }
                    });
                sink.add(i, gv.into_dyn());
            }
        }));
        out_var.node = Some((tape, id));
    }
    out_var
}

#[cfg(test)]
mod attention_op_tests {
    use super::*;
    use crate::tensor::{gradcheck, Params};
    use ndarray::{ArrayD, IxDyn};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn strided_attention_matches_head_split_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (b, tq, tk, h, d) = (3usize, 4usize, 6usize, 2usize, 8usize);
        let q = ArrayD::from_shape_fn(IxDyn(&[b * tq, d]), |_| rng.random_range(-1.0f64..1.0));
        let k = ArrayD::from_shape_fn(IxDyn(&[b * tk, d]), |_| rng.random_range(-1.0f64..1.0));
        let v = ArrayD::from_shape_fn(IxDyn(&[b * tk, d]), |_| rng.random_range(-1.0f64..1.0));

        let qv = Var::constant(q.clone());
        let kv = Var::constant(k.clone());
        let vv = Var::constant(v.clone());
        let scores = attention_scores(&qv, &kv, b, tq, tk, h, 0.5);
        let attn = softmax_lastdim(&scores);
        let out = attention_apply(&attn, &vv, b, h);

        // reference via the copying head-split ops (tq == tk required there,
        // so compare scores directly and apply against a manual loop)
        let dh = d / h;
        let q2 = q.view().into_dimensionality::<Ix2>().unwrap();
        let k2 = k.view().into_dimensionality::<Ix2>().unwrap();
        let s3 = scores.data.view().into_dimensionality::<Ix3>().unwrap();
        for g in 0..b * h {
            let (bi, hi) = (g / h, g % h);
            for i in 0..tq {
                for j in 0..tk {
                    let mut acc = 0.0;
                    for c in 0..dh {
                        acc += q2[[bi * tq + i, hi * dh + c]] * k2[[bi * tk + j, hi * dh + c]];
                    }
                    let expect = acc * 0.5;
                    assert!((s3[[g, i, j]] - expect).abs() < 1e-12);
                }
            }
        }
        let a3 = attn.data.view().into_dimensionality::<Ix3>().unwrap();
        let v2 = v.view().into_dimensionality::<Ix2>().unwrap();
        let o2 = out.data.view().into_dimensionality::<Ix2>().unwrap();
        for bi in 0..b {
            for i in 0..tq {
                for hi in 0..h {
                    for c in 0..dh {
                        let mut acc = 0.0;
                        for j in 0..tk {
                            acc += a3[[bi * h + hi, i, j]] * v2[[bi * tk + j, hi * dh + c]];
                        }
                        assert!((o2[[bi * tq + i, hi * dh + c]] - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn grad_attention_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (b, tq, tk, h, d) = (2usize, 2usize, 3usize, 2usize, 4usize);
        let mut params = Params::<f64>::new();
        params.add("q", ArrayD::from_shape_fn(IxDyn(&[b * tq, d]), |_| rng.random_range(-1.0..1.0)));
        params.add("k", ArrayD::from_shape_fn(IxDyn(&[b * tk, d]), |_| rng.random_range(-1.0..1.0)));
        params.add("v", ArrayD::from_shape_fn(IxDyn(&[b * tk, d]), |_| rng.random_range(-1.0..1.0)));
        for name in ["q", "k", "v"] {
            let err = gradcheck::max_rel_error_for_param(&mut params, name, 1e-6, &move |ctx| {
                let q = ctx.p(crate::tensor::ParamId(0));
                let k = ctx.p(crate::tensor::ParamId(1));
                let v = ctx.p(crate::tensor::ParamId(2));
                let s = attention_scores(&q, &k, b, tq, tk, h, 0.7);
                let a = softmax_lastdim(&s);
                let o = attention_apply(&a, &v, b, h);
                mean_all(&relu(&o))
            });
            assert!(err < 1e-4, "{name}: rel err {err}");
        }
    }
}
