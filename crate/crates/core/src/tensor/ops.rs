use std::rc::Rc;

use super::{check_shape, Result, Scalar, Tensor, TensorError};
use crate::par;

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// `c[m,n] (+)= a[m,k] · b[k,n]` on contiguous row-major slices, with optional
/// transposed views of either operand.
#[allow(clippy::too_many_arguments)]
fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the slices above have exactly the sizes the strides describe and
    // `c` is an exclusive borrow.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Broadcast two batch shapes (right-aligned, size-1 or missing dims stretch).
/// Returns the output batch shape and, per output batch index, the flat batch
/// index into each operand.
fn broadcast_batches(
    ba: &[usize],
    bb: &[usize],
) -> Option<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let rank = ba.len().max(bb.len());
    let pad = |s: &[usize]| {
        let mut v = vec![1; rank - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(ba), pad(bb));
    let mut out = Vec::with_capacity(rank);
    for (&x, &y) in pa.iter().zip(&pb) {
        if x == y || y == 1 {
            out.push(x);
        } else if x == 1 {
            out.push(y);
        } else {
            return None;
        }
    }
    let (sa, sb) = (strides(&pa), strides(&pb));
    let total: usize = out.iter().product();
    let mut ia = Vec::with_capacity(total);
    let mut ib = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    for _ in 0..total {
        let (mut oa, mut ob) = (0, 0);
        for d in 0..rank {
            if pa[d] != 1 {
                oa += idx[d] * sa[d];
            }
            if pb[d] != 1 {
                ob += idx[d] * sb[d];
            }
        }
        ia.push(oa);
        ib.push(ob);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Some((out, ia, ib))
}

/// Group output batch indices by the operand batch they read from.
fn group_by(map: &[usize], count: usize) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); count];
    for (o, &i) in map.iter().enumerate() {
        groups[i].push(o);
    }
    groups
}

fn suffix_of(small: &[usize], large: &[usize]) -> bool {
    small.len() <= large.len() && large[large.len() - small.len()..] == *small
}

/// Sum `g` over leading repetitions into a buffer of size `n`.
fn reduce_reps<T: Scalar>(g: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n];
    for chunk in g.chunks(n) {
        out.iter_mut().zip(chunk).for_each(|(o, v)| *o = *o + *v);
    }
    out
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

impl<T: Scalar> Tensor<T> {
    /// Batched matrix product `[.., m, k] · [.., k, n] -> [.., m, n]` with
    /// broadcasting over the leading batch dimensions.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let n = sb[sb.len() - 1];
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);

        // Weight-style right operand: one flat gemm over all leading rows.
        if bb.is_empty() {
            let rows = self.numel() / k;
            let mut out = vec![T::zero(); rows * n];
            let (a, b) = (self.data(), other.data());
            let rows_per_chunk = rows.div_ceil(16).max(1);
            par::for_each_chunk(&mut out, rows_per_chunk * n, |i, c| {
                let r0 = i * rows_per_chunk;
                let r = c.len() / n;
                gemm(r, k, n, &a[r0 * k..(r0 + r) * k], false, b, false, c, false);
            });
            let mut shape = sa[..sa.len() - 1].to_vec();
            shape.push(n);
            return Ok(Tensor::from_op(
                "matmul",
                out,
                shape,
                vec![self.clone(), other.clone()],
                Box::new(move |g, p| {
                    let (a, b) = (&p[0], &p[1]);
                    let da = a.requires_grad().then(|| {
                        let mut da = vec![T::zero(); rows * k];
                        let bd = b.data();
                        par::for_each_chunk(&mut da, rows_per_chunk * k, |i, c| {
                            let r0 = i * rows_per_chunk;
                            let r = c.len() / k;
                            gemm(r, n, k, &g[r0 * n..(r0 + r) * n], false, bd, true, c, false);
                        });
                        da
                    });
                    let db = b.requires_grad().then(|| {
                        let mut db = vec![T::zero(); k * n];
                        gemm(k, rows, n, a.data(), true, g, false, &mut db, false);
                        db
                    });
                    vec![da, db]
                }),
            ));
        }

        let (out_batch, ia, ib) =
            broadcast_batches(ba, bb).ok_or_else(|| mismatch("matmul", sa, sb))?;
        let nb = ia.len();
        let mut out = vec![T::zero(); nb * m * n];
        {
            let (a, b) = (self.data(), other.data());
            let (ia, ib) = (&ia, &ib);
            par::for_each_chunk(&mut out, m * n, |o, c| {
                let (x, y) = (ia[o], ib[o]);
                gemm(m, k, n, &a[x * m * k..(x + 1) * m * k], false, &b[y * k * n..(y + 1) * k * n], false, c, false);
            });
        }
        let mut shape = out_batch;
        shape.extend_from_slice(&[m, n]);
        let count_a: usize = ba.iter().product();
        let count_b: usize = bb.iter().product();
        let groups_a = group_by(&ia, count_a);
        let groups_b = group_by(&ib, count_b);
        Ok(Tensor::from_op(
            "matmul",
            out,
            shape,
            vec![self.clone(), other.clone()],
            Box::new(move |g, p| {
                let (a, b) = (&p[0], &p[1]);
                let (ad, bd) = (a.data(), b.data());
                let da = a.requires_grad().then(|| {
                    let mut da = vec![T::zero(); count_a * m * k];
                    par::for_each_chunk(&mut da, m * k, |x, c| {
                        for (j, &o) in groups_a[x].iter().enumerate() {
                            let y = ib[o];
                            gemm(m, n, k, &g[o * m * n..(o + 1) * m * n], false, &bd[y * k * n..(y + 1) * k * n], true, c, j > 0);
                        }
                    });
                    da
                });
                let db = b.requires_grad().then(|| {
                    let mut db = vec![T::zero(); count_b * k * n];
                    par::for_each_chunk(&mut db, k * n, |y, c| {
                        for (j, &o) in groups_b[y].iter().enumerate() {
                            let x = ia[o];
                            gemm(k, m, n, &ad[x * m * k..(x + 1) * m * k], true, &g[o * m * n..(o + 1) * m * n], false, c, j > 0);
                        }
                    });
                    db
                });
                vec![da, db]
            }),
        ))
    }

    /// Reorder axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<T>> {
        let shape = self.shape();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(mismatch("permute", shape, perm));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let out = permute_data(self.data(), shape, perm);
        let mut inverse = vec![0; rank];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let out_shape_c = out_shape.clone();
        Ok(Tensor::from_op(
            "permute",
            out,
            out_shape,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(permute_data(g, &out_shape_c, &inverse))]),
        ))
    }

    /// Swap the last two axes.
    pub fn transpose_last2(&self) -> Result<Tensor<T>> {
        let r = self.rank();
        if r < 2 {
            return Err(TensorError::InvalidAxis { axis: 1, rank: r });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        check_shape(shape)?;
        if shape.iter().product::<usize>() != self.numel() {
            return Err(mismatch("reshape", self.shape(), shape));
        }
        let mut t = Tensor::from_op(
            "reshape",
            Vec::new(),
            vec![0],
            vec![self.clone()],
            Box::new(|g, _| vec![Some(g.to_vec())]),
        );
        // share the buffer instead of copying
        let node = Rc::get_mut(&mut t.0).expect("fresh node");
        node.data = self.shared_data();
        node.shape = shape.to_vec();
        Ok(t)
    }

    fn binary(&self, other: &Tensor<T>, kind: Binary) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(), other.shape());
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        let a_large = if suffix_of(sb, sa) {
            true
        } else if suffix_of(sa, sb) {
            false
        } else {
            return Err(mismatch(name, sa, sb));
        };
        let shape = if a_large { sa.to_vec() } else { sb.to_vec() };
        let (na, nb) = (self.numel(), other.numel());
        let n = na.max(nb);
        let (ad, bd) = (self.data(), other.data());
        let f = move |x: T, y: T| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let out: Vec<T> = (0..n).map(|i| f(ad[i % na], bd[i % nb])).collect();
        Ok(Tensor::from_op(
            name,
            out,
            shape,
            vec![self.clone(), other.clone()],
            Box::new(move |g, p| {
                let (a, b) = (&p[0], &p[1]);
                let ga: Option<Vec<T>> = a.requires_grad().then(|| {
                    let full: Vec<T> = match kind {
                        Binary::Add | Binary::Sub => g.to_vec(),
                        Binary::Mul => {
                            let bd = b.data();
                            g.iter().enumerate().map(|(i, &v)| v * bd[i % nb]).collect()
                        }
                    };
                    if na == n { full } else { reduce_reps(&full, na) }
                });
                let gb: Option<Vec<T>> = b.requires_grad().then(|| {
                    let full: Vec<T> = match kind {
                        Binary::Add => g.to_vec(),
                        Binary::Sub => g.iter().map(|&v| -v).collect(),
                        Binary::Mul => {
                            let ad = a.data();
                            g.iter().enumerate().map(|(i, &v)| v * ad[i % na]).collect()
                        }
                    };
                    if nb == n { full } else { reduce_reps(&full, nb) }
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Elementwise sum; the smaller operand may match a trailing suffix of the
    /// larger one's shape and is then repeated over the leading axes.
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, Binary::Add)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, Binary::Sub)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, Binary::Mul)
    }

    pub fn scale(&self, s: T) -> Tensor<T> {
        let out = self.data().iter().map(|&v| v * s).collect();
        Tensor::from_op(
            "scale",
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.iter().map(|&v| v * s).collect())]),
        )
    }

    pub fn square(&self) -> Tensor<T> {
        let out = self.data().iter().map(|&v| v * v).collect();
        Tensor::from_op(
            "square",
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(|g, p| {
                let x = p[0].data();
                vec![Some(g.iter().zip(x).map(|(&g, &x)| (x + x) * g).collect())]
            }),
        )
    }

    pub fn sum(&self) -> Tensor<T> {
        let total = self.data().iter().fold(T::zero(), |acc, &v| acc + v);
        let n = self.numel();
        Tensor::from_op(
            "sum",
            vec![total],
            vec![1],
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor<T> {
        self.sum().scale(T::one() / T::from_f64(self.numel() as f64))
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_lastdim(&self) -> Tensor<T> {
        let d = *self.shape().last().expect("rank >= 1");
        let mut out = vec![T::zero(); self.numel()];
        let x = self.data();
        par::for_each_chunk(&mut out, d, |r, row| {
            let xs = &x[r * d..(r + 1) * d];
            let mx = xs.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for (o, &v) in row.iter_mut().zip(xs) {
                *o = (v - mx).exp();
                s = s + *o;
            }
            let inv = T::one() / s;
            row.iter_mut().for_each(|o| *o = *o * inv);
        });
        let y = Rc::new(out.clone());
        Tensor::from_op(
            "softmax",
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g, _| {
                let y: &[T] = &y;
                let mut dx = vec![T::zero(); g.len()];
                par::for_each_chunk(&mut dx, d, |r, row| {
                    let ys = &y[r * d..(r + 1) * d];
                    let gs = &g[r * d..(r + 1) * d];
                    let dot = ys.iter().zip(gs).fold(T::zero(), |a, (&y, &g)| a + y * g);
                    for ((o, &y), &g) in row.iter_mut().zip(ys).zip(gs) {
                        *o = y * (g - dot);
                    }
                });
                vec![Some(dx)]
            }),
        )
    }

    /// Normalize each last-axis slice to zero mean / unit variance, then apply
    /// `gamma * x + beta`.
    pub fn layer_norm(&self, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        let d = *self.shape().last().expect("rank >= 1");
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(mismatch("layer_norm", self.shape(), gamma.shape()));
        }
        let rows = self.numel() / d;
        let x = self.data();
        let (gm, bt) = (gamma.data(), beta.data());
        let inv_d = T::one() / T::from_f64(d as f64);
        let eps = T::from_f64(eps);
        let mut xhat = vec![T::zero(); self.numel()];
        let mut rstd = vec![T::zero(); rows];
        par::for_each_chunk2(&mut xhat, d, &mut rstd, 1, |r, row, rs| {
            let xs = &x[r * d..(r + 1) * d];
            let mean = xs.iter().fold(T::zero(), |a, &v| a + v) * inv_d;
            let var = xs.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_d;
            let s = T::one() / (var + eps).sqrt();
            rs[0] = s;
            for (o, &v) in row.iter_mut().zip(xs) {
                *o = (v - mean) * s;
            }
        });
        let mut out = vec![T::zero(); self.numel()];
        par::for_each_chunk(&mut out, d, |r, row| {
            for (j, o) in row.iter_mut().enumerate() {
                *o = xhat[r * d + j] * gm[j] + bt[j];
            }
        });
        let (xhat, rstd) = (Rc::new(xhat), Rc::new(rstd));
        Ok(Tensor::from_op(
            "layer_norm",
            out,
            self.shape().to_vec(),
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g, p| {
                let gm = p[1].data();
                let (xhat, rstd): (&[T], &[T]) = (&xhat, &rstd);
                let dx = p[0].requires_grad().then(|| {
                    let mut dx = vec![T::zero(); g.len()];
                    par::for_each_chunk(&mut dx, d, |r, row| {
                        let gs = &g[r * d..(r + 1) * d];
                        let xs = &xhat[r * d..(r + 1) * d];
                        let (mut m1, mut m2) = (T::zero(), T::zero());
                        for j in 0..d {
                            let dxh = gs[j] * gm[j];
                            m1 = m1 + dxh;
                            m2 = m2 + dxh * xs[j];
                        }
                        m1 = m1 * inv_d;
                        m2 = m2 * inv_d;
                        for j in 0..d {
                            row[j] = rstd[r] * (gs[j] * gm[j] - m1 - xs[j] * m2);
                        }
                    });
                    dx
                });
                let dgamma = p[1].requires_grad().then(|| {
                    let mut acc = vec![T::zero(); d];
                    for (gs, xs) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            acc[j] = acc[j] + gs[j] * xs[j];
                        }
                    }
                    acc
                });
                let dbeta = p[2].requires_grad().then(|| reduce_reps(g, d));
                vec![dx, dgamma, dbeta]
            }),
        ))
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&self) -> Tensor<T> {
        let half = T::from_f64(0.5);
        let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
        let cdf = move |x: T| half * (T::one() + (x * inv_sqrt2).erf());
        let mut out = vec![T::zero(); self.numel()];
        let x = self.data();
        par::for_each_chunk(&mut out, 4096, |c, o| {
            let xs = &x[c * 4096..c * 4096 + o.len()];
            for (o, &v) in o.iter_mut().zip(xs) {
                *o = v * cdf(v);
            }
        });
        let inv_sqrt_2pi = T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
        Tensor::from_op(
            "gelu",
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g, p| {
                let x = p[0].data();
                let mut dx = vec![T::zero(); g.len()];
                par::for_each_chunk(&mut dx, 4096, |c, o| {
                    let base = c * 4096;
                    for (j, o) in o.iter_mut().enumerate() {
                        let v = x[base + j];
                        let pdf = (-(v * v) * half).exp() * inv_sqrt_2pi;
                        *o = g[base + j] * (cdf(v) + v * pdf);
                    }
                });
                vec![Some(dx)]
            }),
        )
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis { axis, rank: shape.len() });
        }
        if len == 0 || start + len > shape[axis] {
            return Err(mismatch("narrow", shape, &[start, len]));
        }
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let (src_block, dst_block) = (shape[axis] * inner, len * inner);
        let x = self.data();
        let mut out = Vec::with_capacity(outer * dst_block);
        for o in 0..outer {
            let s = o * src_block + start * inner;
            out.extend_from_slice(&x[s..s + dst_block]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let total = self.numel();
        Ok(Tensor::from_op(
            "narrow",
            out,
            out_shape,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut dx = vec![T::zero(); total];
                for o in 0..outer {
                    let s = o * src_block + start * inner;
                    dx[s..s + dst_block].copy_from_slice(&g[o * dst_block..(o + 1) * dst_block]);
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Repeat along a new leading axis of size `n`.
    pub fn expand_front(&self, n: usize) -> Result<Tensor<T>> {
        if n == 0 {
            return Err(mismatch("expand_front", self.shape(), &[n]));
        }
        let m = self.numel();
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(self.data());
        }
        let mut shape = vec![n];
        shape.extend_from_slice(self.shape());
        Ok(Tensor::from_op(
            "expand_front",
            out,
            shape,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(reduce_reps(g, m))]),
        ))
    }
}

fn permute_data<T: Scalar>(x: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = vec![T::zero(); x.len()];
    let last = out_shape[rank - 1];
    let last_stride = src_strides[rank - 1];
    let outer_shape = &out_shape[..rank - 1];
    let outer_src = &src_strides[..rank - 1];
    let rows_per_chunk = 64usize;
    par::for_each_chunk(&mut out, rows_per_chunk * last, |c, block| {
        let mut idx = vec![0usize; rank - 1];
        let mut row = c * rows_per_chunk;
        for d in (0..rank - 1).rev() {
            idx[d] = row % outer_shape[d];
            row /= outer_shape[d];
        }
        for dst in block.chunks_mut(last) {
            let base: usize = idx.iter().zip(outer_src).map(|(i, s)| i * s).sum();
            if last_stride == 1 {
                dst.copy_from_slice(&x[base..base + last]);
            } else {
                for (j, o) in dst.iter_mut().enumerate() {
                    *o = x[base + j * last_stride];
                }
            }
            for d in (0..rank - 1).rev() {
                idx[d] += 1;
                if idx[d] < outer_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
    });
    out
}

/// Concatenate along `axis`; all other dimensions must agree.
pub fn concat<T: Scalar>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| mismatch("concat", &[], &[]))?;
    let rank = first.rank();
    if axis >= rank {
        return Err(TensorError::InvalidAxis { axis, rank });
    }
    for p in parts {
        let s = p.shape();
        if s.len() != rank || s.iter().zip(first.shape()).enumerate().any(|(i, (a, b))| i != axis && a != b) {
            return Err(mismatch("concat", first.shape(), s));
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let blocks: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
    let row: usize = blocks.iter().sum();
    let mut out = Vec::with_capacity(outer * row);
    for o in 0..outer {
        for (p, &b) in parts.iter().zip(&blocks) {
            out.extend_from_slice(&p.data()[o * b..(o + 1) * b]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
    Ok(Tensor::from_op(
        "concat",
        out,
        shape,
        parts.iter().map(|&p| p.clone()).collect(),
        Box::new(move |g, p| {
            let mut offset = 0;
            let mut grads = Vec::with_capacity(p.len());
            for (t, &b) in p.iter().zip(&blocks) {
                grads.push(t.requires_grad().then(|| {
                    let mut d = Vec::with_capacity(outer * b);
                    for o in 0..outer {
                        let s = o * row + offset;
                        d.extend_from_slice(&g[s..s + b]);
                    }
                    d
                }));
                offset += b;
            }
            grads
        }),
    ))
}

/// Output spatial size of a convolution, `floor((size + 2·pad − k)/stride) + 1`.
pub fn conv_out_dim(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    (size + 2 * pad >= kernel && stride > 0).then(|| (size + 2 * pad - kernel) / stride + 1)
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn im2col<T: Scalar>(&self, x: &[T], col: &mut [T]) {
        let plane = self.oh * self.ow;
        for ci in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let r = (ci * self.kh + ki) * self.kw + kj;
                    let dst = &mut col[r * plane..(r + 1) * plane];
                    for oi in 0..self.oh {
                        let y = (oi * self.stride + ki) as isize - self.pad as isize;
                        for oj in 0..self.ow {
                            let xx = (oj * self.stride + kj) as isize - self.pad as isize;
                            dst[oi * self.ow + oj] = if y >= 0 && (y as usize) < self.h && xx >= 0 && (xx as usize) < self.w {
                                x[(ci * self.h + y as usize) * self.w + xx as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, col: &[T], dx: &mut [T]) {
        let plane = self.oh * self.ow;
        for ci in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let r = (ci * self.kh + ki) * self.kw + kj;
                    let src = &col[r * plane..(r + 1) * plane];
                    for oi in 0..self.oh {
                        let y = (oi * self.stride + ki) as isize - self.pad as isize;
                        if y < 0 || y as usize >= self.h {
                            continue;
                        }
                        for oj in 0..self.ow {
                            let xx = (oj * self.stride + kj) as isize - self.pad as isize;
                            if xx >= 0 && (xx as usize) < self.w {
                                let i = (ci * self.h + y as usize) * self.w + xx as usize;
                                dx[i] = dx[i] + src[oi * self.ow + oj];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2D cross-correlation of `x[b,c,h,w]` with `kernel[o,c,kh,kw]`, plus an
/// optional per-output-channel bias.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    if stride == 0 {
        return Err(TensorError::InvalidStride(stride));
    }
    let (xs, ks) = (x.shape(), kernel.shape());
    if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] {
        return Err(mismatch("conv2d", xs, ks));
    }
    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (o, kh, kw) = (ks[0], ks[2], ks[3]);
    if let Some(bs) = bias {
        if bs.shape() != [o] {
            return Err(mismatch("conv2d", ks, bs.shape()));
        }
    }
    let (Some(oh), Some(ow)) = (conv_out_dim(h, kh, stride, pad), conv_out_dim(w, kw, stride, pad)) else {
        return Err(mismatch("conv2d", xs, ks));
    };
    let geom = Rc::new(ConvGeom { c, h, w, kh, kw, oh, ow, stride, pad });
    let gref: &ConvGeom = &geom;
    let ckk = c * kh * kw;
    let plane = oh * ow;
    let mut cols = vec![T::zero(); b * ckk * plane];
    let xd = x.data();
    par::for_each_chunk(&mut cols, ckk * plane, |i, col| {
        gref.im2col(&xd[i * c * h * w..(i + 1) * c * h * w], col);
    });
    let mut out = vec![T::zero(); b * o * plane];
    let kd = kernel.data();
    let bias_data = bias.map(|t| t.to_vec());
    par::for_each_chunk(&mut out, o * plane, |i, y| {
        gemm(o, ckk, plane, kd, false, &cols[i * ckk * plane..(i + 1) * ckk * plane], false, y, false);
        if let Some(bd) = &bias_data {
            for (ch, row) in y.chunks_mut(plane).enumerate() {
                row.iter_mut().for_each(|v| *v = *v + bd[ch]);
            }
        }
    });
    let mut parents = vec![x.clone(), kernel.clone()];
    if let Some(bs) = bias {
        parents.push(bs.clone());
    }
    let cols = Rc::new(cols);
    Ok(Tensor::from_op(
        "conv2d",
        out,
        vec![b, o, oh, ow],
        parents,
        Box::new(move |g, p| {
            let kd = p[1].data();
            let (geom, cols): (&ConvGeom, &[T]) = (&geom, &cols);
            let dx = p[0].requires_grad().then(|| {
                let mut dx = vec![T::zero(); b * c * h * w];
                par::for_each_chunk(&mut dx, c * h * w, |i, dxi| {
                    let mut dcol = vec![T::zero(); ckk * plane];
                    gemm(ckk, o, plane, kd, true, &g[i * o * plane..(i + 1) * o * plane], false, &mut dcol, false);
                    geom.col2im(&dcol, dxi);
                });
                dx
            });
            let dk = p[1].requires_grad().then(|| {
                let mut dk = vec![T::zero(); o * ckk];
                for i in 0..b {
                    gemm(o, plane, ckk, &g[i * o * plane..(i + 1) * o * plane], false, &cols[i * ckk * plane..(i + 1) * ckk * plane], true, &mut dk, i > 0);
                }
                dk
            });
            let mut grads = vec![dx, dk];
            if p.len() == 3 {
                grads.push(p[2].requires_grad().then(|| {
                    let mut db = vec![T::zero(); o];
                    for gi in g.chunks(o * plane) {
                        for (ch, row) in gi.chunks(plane).enumerate() {
                            db[ch] = row.iter().fold(db[ch], |a, &v| a + v);
                        }
                    }
                    db
                }));
            }
            grads
        }),
    ))
}
