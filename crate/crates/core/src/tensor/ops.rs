//! Differentiable forward ops and their backward rules.

use std::ops::{Add, Mul, Neg, Sub};
use std::sync::Arc;

use super::array::{numel, Float, Tensor};
use super::tape::Var;
use super::TensorError;
use crate::par;

// ---------------------------------------------------------------------------
// Broadcasting helpers
// ---------------------------------------------------------------------------

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    (0..n)
        .map(|i| {
            let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
            let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
            match (da, db) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => panic!("shapes {a:?} and {b:?} do not broadcast"),
            }
        })
        .collect()
}

/// Offsets into a `shape`-array for every element of the broadcast `out` shape.
fn broadcast_offsets(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let pad = out.len() - shape.len();
    let mut strides = vec![0usize; out.len()];
    let mut s = 1;
    for i in (0..shape.len()).rev() {
        strides[i + pad] = if shape[i] == 1 { 0 } else { s };
        s *= shape[i];
    }
    let total = numel(out);
    let mut offsets = Vec::with_capacity(total);
    let mut idx = vec![0usize; out.len()];
    let mut off = 0usize;
    for _ in 0..total {
        offsets.push(off);
        for d in (0..out.len()).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out[d] {
                break;
            }
            off -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    offsets
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

fn zip_broadcast<T: Float>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    let out = broadcast_shape(a.shape(), b.shape());
    let (ad, bd) = (a.data(), b.data());
    if out == a.shape() && is_suffix(b.shape(), a.shape()) {
        let nb = bd.len();
        let data = ad.iter().enumerate().map(|(i, &x)| f(x, bd[i % nb])).collect();
        return Tensor::new(out, data);
    }
    if out == b.shape() && is_suffix(a.shape(), b.shape()) {
        let na = ad.len();
        let data = bd.iter().enumerate().map(|(i, &y)| f(ad[i % na], y)).collect();
        return Tensor::new(out, data);
    }
    let oa = broadcast_offsets(a.shape(), &out);
    let ob = broadcast_offsets(b.shape(), &out);
    let data = oa.iter().zip(&ob).map(|(&i, &j)| f(ad[i], bd[j])).collect();
    Tensor::new(out, data)
}

/// Sums a broadcast gradient back down to `shape`.
pub(crate) fn sum_to<T: Float>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let n = numel(shape);
    let mut out = vec![T::zero(); n];
    if is_suffix(shape, g.shape()) || n == 1 {
        for (i, &x) in g.data().iter().enumerate() {
            out[i % n] += x;
        }
    } else {
        for (&off, &x) in broadcast_offsets(shape, g.shape()).iter().zip(g.data()) {
            out[off] += x;
        }
    }
    Tensor::new(shape.to_vec(), out)
}

fn permute_data<T: Copy>(data: &[T], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<T>) {
    let nd = shape.len();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    if total == 0 {
        return (out_shape, out);
    }
    // innermost output axis is walked as a strided run
    let inner = out_shape[nd - 1];
    let inner_stride = strides[nd - 1];
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    for _ in 0..total / inner {
        for j in 0..inner {
            out.push(data[off + j * inner_stride]);
        }
        for d in (0..nd - 1).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

impl<'t, T: Float> Var<'t, T> {
    fn binary(
        &self,
        other: &Var<'t, T>,
        f: impl Fn(T, T) -> T,
        grads: impl Fn(&Tensor<T>, &Tensor<T>, &Tensor<T>, &[bool]) -> (Option<Tensor<T>>, Option<Tensor<T>>) + 'static,
    ) -> Var<'t, T> {
        let value = zip_broadcast(&self.value, &other.value, f);
        let (a, b) = (self.value.clone(), other.value.clone());
        self.tape.record(value, &[self, other], move |g, _out, needs| {
            let (ga, gb) = grads(g, &a, &b, needs);
            vec![ga.map(|x| sum_to(&x, a.shape())), gb.map(|x| sum_to(&x, b.shape()))]
        })
    }

    pub fn add(&self, other: &Var<'t, T>) -> Var<'t, T> {
        self.binary(other, |x, y| x + y, |g, _, _, needs| (needs[0].then(|| g.clone()), needs[1].then(|| g.clone())))
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Var<'t, T> {
        self.binary(
            other,
            |x, y| x - y,
            |g, _, _, needs| (needs[0].then(|| g.clone()), needs[1].then(|| g.map(|x| -x))),
        )
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Var<'t, T> {
        self.binary(
            other,
            |x, y| x * y,
            |g, a, b, needs| {
                (
                    needs[0].then(|| zip_broadcast(g, b, |x, y| x * y)),
                    needs[1].then(|| zip_broadcast(g, a, |x, y| x * y)),
                )
            },
        )
    }

    /// Elementwise minimum; ties send the gradient to `self`.
    pub fn minimum(&self, other: &Var<'t, T>) -> Var<'t, T> {
        assert_eq!(self.shape(), other.shape(), "minimum needs equal shapes");
        self.binary(
            other,
            |x, y| if x <= y { x } else { y },
            |g, a, b, needs| {
                let pick_a: Vec<bool> = a.data().iter().zip(b.data()).map(|(x, y)| x <= y).collect();
                let ga = needs[0]
                    .then(|| Tensor::from_fn(g.shape().to_vec(), |i| if pick_a[i] { g.data()[i] } else { T::zero() }));
                let gb = needs[1]
                    .then(|| Tensor::from_fn(g.shape().to_vec(), |i| if pick_a[i] { T::zero() } else { g.data()[i] }));
                (ga, gb)
            },
        )
    }

    fn unary(&self, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Var<'t, T> {
        let value = self.value.map(&f);
        let x = self.value.clone();
        self.tape.record(value, &[self], move |g, y, _| {
            let data =
                g.data().iter().zip(x.data().iter().zip(y.data())).map(|(&gi, (&xi, &yi))| gi * df(xi, yi)).collect();
            vec![Some(Tensor::new(g.shape().to_vec(), data))]
        })
    }

    pub fn neg(&self) -> Var<'t, T> {
        self.scale(-T::one())
    }

    pub fn scale(&self, c: T) -> Var<'t, T> {
        let value = self.value.map(|x| x * c);
        self.tape.record(value, &[self], move |g, _out, _| vec![Some(g.map(|x| x * c))])
    }

    pub fn add_scalar(&self, c: T) -> Var<'t, T> {
        let value = self.value.map(|x| x + c);
        self.tape.record(value, &[self], move |g, _out, _| vec![Some(g.clone())])
    }

    pub fn exp(&self) -> Var<'t, T> {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn log(&self) -> Var<'t, T> {
        self.unary(|x| x.ln(), |x, _| T::one() / x)
    }

    pub fn tanh(&self) -> Var<'t, T> {
        self.unary(|x| x.tanh(), |_, y| T::one() - y * y)
    }

    pub fn relu(&self) -> Var<'t, T> {
        self.unary(
            |x| if x > T::zero() { x } else { T::zero() },
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn square(&self) -> Var<'t, T> {
        self.unary(|x| x * x, |x, _| x + x)
    }

    pub fn sqrt(&self) -> Var<'t, T> {
        self.unary(|x| x.sqrt(), |_, y| T::one() / (y + y))
    }

    /// Clamp into `[lo, hi]`; the gradient passes where `lo <= x <= hi`.
    pub fn clamp(&self, lo: T, hi: T) -> Var<'t, T> {
        self.unary(
            |x| x.max(lo).min(hi),
            move |x, _| {
                if x >= lo && x <= hi {
                    T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    /// `c · tanh(x)`: logit clipping into `(-c, c)`.
    pub fn tanh_clip(&self, c: T) -> Var<'t, T> {
        assert!(c > T::zero(), "tanh clipping constant must be positive");
        self.tanh().scale(c)
    }

    /// Replaces entries where `cond` is true by `value`; no gradient flows there.
    pub fn fill_where(&self, cond: &[bool], value: T) -> Var<'t, T> {
        assert_eq!(cond.len(), self.value.len(), "fill_where condition length");
        let cond: Arc<[bool]> = cond.into();
        let data = self.data().iter().zip(cond.iter()).map(|(&x, &c)| if c { value } else { x }).collect();
        let value = Tensor::new(self.shape().to_vec(), data);
        self.tape.record(value, &[self], move |g, _out, _| {
            let data = g.data().iter().zip(cond.iter()).map(|(&x, &c)| if c { T::zero() } else { x }).collect();
            vec![Some(Tensor::new(g.shape().to_vec(), data))]
        })
    }

    /// Broadcasts to a larger shape (numpy rules).
    pub fn broadcast_to(&self, shape: &[usize]) -> Var<'t, T> {
        let out = broadcast_shape(self.shape(), shape);
        assert_eq!(out, shape, "cannot broadcast {:?} to {:?}", self.shape(), shape);
        let zero = Tensor::zeros(shape.to_vec());
        let value = zip_broadcast(&zero, &self.value, |_, y| y);
        let src = self.shape().to_vec();
        self.tape.record(value, &[self], move |g, _out, _| vec![Some(sum_to(g, &src))])
    }

    // -----------------------------------------------------------------------
    // Reductions
    // -----------------------------------------------------------------------

    pub fn sum(&self) -> Var<'t, T> {
        let value = Tensor::scalar(self.value.sum());
        let shape = self.shape().to_vec();
        self.tape.record(value, &[self], move |g, _out, _| vec![Some(Tensor::full(shape.clone(), g.item()))])
    }

    pub fn mean(&self) -> Var<'t, T> {
        let n = T::from_usize_lossy(self.value.len().max(1));
        self.sum().scale(T::one() / n)
    }

    /// Sum over one axis, which is removed from the shape.
    pub fn sum_axis(&self, axis: usize) -> Var<'t, T> {
        let shape = self.shape().to_vec();
        assert!(axis < shape.len());
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![T::zero(); outer * inner];
        let x = self.data();
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += x[base + i];
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        self.tape.record(Tensor::new(out_shape, out), &[self], move |g, _out, _| {
            let gd = g.data();
            let mut gx = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                for _ in 0..len {
                    gx.extend_from_slice(&gd[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(Tensor::new(shape.clone(), gx))]
        })
    }

    pub fn mean_axis(&self, axis: usize) -> Var<'t, T> {
        let n = T::from_usize_lossy(self.shape()[axis]);
        self.sum_axis(axis).scale(T::one() / n)
    }

    // -----------------------------------------------------------------------
    // Shape manipulation
    // -----------------------------------------------------------------------

    pub fn reshape(&self, shape: &[usize]) -> Var<'t, T> {
        assert_eq!(numel(shape), self.value.len(), "reshape {:?} -> {:?}", self.shape(), shape);
        let src = self.shape().to_vec();
        let value = Tensor::new(shape.to_vec(), self.data().to_vec());
        self.tape.record(value, &[self], move |g, _out, _| vec![Some(Tensor::new(src.clone(), g.data().to_vec()))])
    }

    pub fn permute(&self, axes: &[usize]) -> Var<'t, T> {
        assert_eq!(axes.len(), self.shape().len());
        let (shape, data) = permute_data(self.data(), self.shape(), axes);
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.tape.record(Tensor::new(shape, data), &[self], move |g, _out, _| {
            let (s, d) = permute_data(g.data(), g.shape(), &inverse);
            vec![Some(Tensor::new(s, d))]
        })
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Var<'t, T> {
        assert!(!parts.is_empty());
        let tape = parts[0].tape;
        let base = parts[0].shape().to_vec();
        let outer: usize = base[..axis].iter().product();
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let s = p.shape();
                assert_eq!(s.len(), base.len(), "concat rank mismatch");
                assert!(s[..axis] == base[..axis] && s[axis + 1..] == base[axis + 1..], "concat extent mismatch");
                s[axis..].iter().product()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&p.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        let shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape().to_vec()).collect();
        let refs: Vec<&Var<'t, T>> = parts.iter().collect();
        tape.record(Tensor::new(shape, out), &refs, move |g, _out, needs| {
            let gd = g.data();
            let mut offset = 0;
            let mut grads = Vec::with_capacity(widths.len());
            for (k, &w) in widths.iter().enumerate() {
                if needs[k] {
                    let mut d = Vec::with_capacity(outer * w);
                    for o in 0..outer {
                        let start = o * total + offset;
                        d.extend_from_slice(&gd[start..start + w]);
                    }
                    grads.push(Some(Tensor::new(shapes[k].clone(), d)));
                } else {
                    grads.push(None);
                }
                offset += w;
            }
            grads
        })
    }

    /// Rows along axis 0, repeated or reordered by `index`.
    pub fn index_select(&self, index: &[usize]) -> Var<'t, T> {
        let shape = self.shape().to_vec();
        let rows = shape[0];
        let inner = self.value.len() / rows.max(1);
        let mut out = Vec::with_capacity(index.len() * inner);
        for &r in index {
            assert!(r < rows, "index {r} out of range for {rows} rows");
            out.extend_from_slice(&self.data()[r * inner..(r + 1) * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[0] = index.len();
        let index: Arc<[usize]> = index.into();
        self.tape.record(Tensor::new(out_shape, out), &[self], move |g, _out, _| {
            let mut gx = vec![T::zero(); rows * inner];
            for (k, &r) in index.iter().enumerate() {
                let src = &g.data()[k * inner..(k + 1) * inner];
                for (a, &b) in gx[r * inner..(r + 1) * inner].iter_mut().zip(src) {
                    *a += b;
                }
            }
            vec![Some(Tensor::new(shape.clone(), gx))]
        })
    }

    /// `x[b, index[b], :]` for `x: [B, N, D]` → `[B, D]`.
    pub fn gather_nodes(&self, index: &[usize]) -> Var<'t, T> {
        let shape = self.shape().to_vec();
        assert_eq!(shape.len(), 3, "gather_nodes expects [B, N, D]");
        let (b, n, d) = (shape[0], shape[1], shape[2]);
        assert_eq!(index.len(), b);
        let mut out = Vec::with_capacity(b * d);
        for (r, &i) in index.iter().enumerate() {
            assert!(i < n, "node index {i} out of range {n}");
            out.extend_from_slice(&self.data()[(r * n + i) * d..(r * n + i + 1) * d]);
        }
        let index: Arc<[usize]> = index.into();
        self.tape.record(Tensor::new(vec![b, d], out), &[self], move |g, _out, _| {
            let mut gx = vec![T::zero(); b * n * d];
            for (r, &i) in index.iter().enumerate() {
                gx[(r * n + i) * d..(r * n + i + 1) * d].copy_from_slice(&g.data()[r * d..(r + 1) * d]);
            }
            vec![Some(Tensor::new(shape.clone(), gx))]
        })
    }

    /// `x[b, index[b]]` for `x: [B, A]` → `[B]`.
    pub fn gather_last(&self, index: &[usize]) -> Var<'t, T> {
        let shape = self.shape().to_vec();
        assert_eq!(shape.len(), 2, "gather_last expects [B, A]");
        let (b, a) = (shape[0], shape[1]);
        assert_eq!(index.len(), b);
        let out: Vec<T> = index
            .iter()
            .enumerate()
            .map(|(r, &i)| {
                assert!(i < a);
                self.data()[r * a + i]
            })
            .collect();
        let index: Arc<[usize]> = index.into();
        self.tape.record(Tensor::new(vec![b], out), &[self], move |g, _out, _| {
            let mut gx = vec![T::zero(); b * a];
            for (r, &i) in index.iter().enumerate() {
                gx[r * a + i] = g.data()[r];
            }
            vec![Some(Tensor::new(shape.clone(), gx))]
        })
    }

    /// Row `r` of the result is row `r` of `self` when `cond[r]`, else of `other`.
    pub fn select_rows(&self, cond: &[bool], other: &Var<'t, T>) -> Var<'t, T> {
        assert_eq!(self.shape(), other.shape());
        let rows = self.shape()[0];
        assert_eq!(cond.len(), rows);
        let inner = self.value.len() / rows.max(1);
        let mut out = Vec::with_capacity(self.value.len());
        for (r, &c) in cond.iter().enumerate() {
            let src = if c { self.data() } else { other.data() };
            out.extend_from_slice(&src[r * inner..(r + 1) * inner]);
        }
        let cond: Arc<[bool]> = cond.into();
        let shape = self.shape().to_vec();
        self.tape.record(Tensor::new(shape.clone(), out), &[self, other], move |g, _out, needs| {
            let split = |take: bool| {
                let mut d = g.data().to_vec();
                for (r, &c) in cond.iter().enumerate() {
                    if c != take {
                        d[r * inner..(r + 1) * inner].iter_mut().for_each(|x| *x = T::zero());
                    }
                }
                Tensor::new(shape.clone(), d)
            };
            vec![needs[0].then(|| split(true)), needs[1].then(|| split(false))]
        })
    }

    // -----------------------------------------------------------------------
    // Linear algebra
    // -----------------------------------------------------------------------

    /// `self · other` with `self: [.., M, K]` and `other: [K, N]` (shared
    /// across the batch) or `[.., K, N]` (same leading extents).
    pub fn matmul(&self, other: &Var<'t, T>) -> Var<'t, T> {
        self.matmul_impl(other, false)
    }

    /// `self · otherᵀ` with `other: [N, K]` or `[.., N, K]`.
    pub fn matmul_t(&self, other: &Var<'t, T>) -> Var<'t, T> {
        self.matmul_impl(other, true)
    }

    fn matmul_impl(&self, other: &Var<'t, T>, trans_b: bool) -> Var<'t, T> {
        let (ash, bsh) = (self.shape().to_vec(), other.shape().to_vec());
        assert!(ash.len() >= 2 && bsh.len() >= 2, "matmul operands need rank >= 2");
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (bk, n) =
            if trans_b { (bsh[bsh.len() - 1], bsh[bsh.len() - 2]) } else { (bsh[bsh.len() - 2], bsh[bsh.len() - 1]) };
        assert_eq!(k, bk, "matmul inner extents {ash:?} x {bsh:?} (trans_b={trans_b})");
        let shared = bsh.len() == 2;
        let batch: usize = ash[..ash.len() - 2].iter().product();
        if !shared {
            assert_eq!(ash[..ash.len() - 2], bsh[..bsh.len() - 2], "matmul batch extents");
        }
        let mut out_shape = ash[..ash.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let (a, b) = (self.value.clone(), other.value.clone());
        let mut out = vec![T::zero(); batch * m * n];
        if shared {
            gemm_rows(k, n, a.data(), b.data(), trans_b, &mut out);
        } else {
            par::for_each_chunk_mut(&mut out, m * n, |p, c| {
                T::gemm(m, k, n, &a.data()[p * m * k..], false, &b.data()[p * k * n..], trans_b, c, false);
            });
        }
        self.tape.record(Tensor::new(out_shape, out), &[self, other], move |g, _out, needs| {
            let gd = g.data();
            let ga = needs[0].then(|| {
                let mut ga = vec![T::zero(); a.len()];
                if shared {
                    // dA = G · Bᵀ (or G · B when B was used transposed)
                    gemm_rows(n, k, gd, b.data(), !trans_b, &mut ga);
                } else {
                    par::for_each_chunk_mut(&mut ga, m * k, |p, c| {
                        T::gemm(m, n, k, &gd[p * m * n..], false, &b.data()[p * k * n..], !trans_b, c, false);
                    });
                }
                Tensor::new(a.shape().to_vec(), ga)
            });
            let gb = needs[1].then(|| {
                let mut gb = vec![T::zero(); b.len()];
                if shared {
                    let rows = batch * m;
                    if trans_b {
                        T::gemm(n, rows, k, gd, true, a.data(), false, &mut gb, false);
                    } else {
                        T::gemm(k, rows, n, a.data(), true, gd, false, &mut gb, false);
                    }
                } else {
                    par::for_each_chunk_mut(&mut gb, k * n, |p, c| {
                        let gp = &gd[p * m * n..];
                        let ap = &a.data()[p * m * k..];
                        if trans_b {
                            T::gemm(n, m, k, gp, true, ap, false, c, false);
                        } else {
                            T::gemm(k, m, n, ap, true, gp, false, c, false);
                        }
                    });
                }
                Tensor::new(b.shape().to_vec(), gb)
            });
            vec![ga, gb]
        })
    }

    /// Affine map `x · w + b` over the last axis; `w: [in, out]`, `b: [out]`.
    pub fn linear(&self, weight: &Var<'t, T>, bias: Option<&Var<'t, T>>) -> Var<'t, T> {
        let y = self.matmul(weight);
        match bias {
            Some(b) => y.add(b),
            None => y,
        }
    }

    // -----------------------------------------------------------------------
    // Softmax family
    // -----------------------------------------------------------------------

    /// Softmax over the last axis restricted to entries where `mask` is true.
    /// Infeasible entries come out as exactly zero.
    pub fn masked_softmax(&self, mask: &[bool], temperature: T) -> Result<Var<'t, T>, TensorError> {
        let (probs, _) = masked_softmax_rows(&self.value, mask, temperature)?;
        let mask: Arc<[bool]> = mask.into();
        let a = self.value.last_dim();
        Ok(self.tape.record(probs, &[self], move |g, p, _| {
            let mut gx = vec![T::zero(); g.len()];
            for (r, (gr, pr)) in g.data().chunks(a).zip(p.data().chunks(a)).enumerate() {
                let dot: T = gr.iter().zip(pr).map(|(&x, &y)| x * y).sum();
                for j in 0..a {
                    if mask[r * a + j] {
                        gx[r * a + j] = pr[j] * (gr[j] - dot) / temperature;
                    }
                }
            }
            vec![Some(Tensor::new(g.shape().to_vec(), gx))]
        }))
    }

    /// Log of [`Var::masked_softmax`]; infeasible entries are `-inf` and
    /// never receive gradient.
    pub fn masked_log_softmax(&self, mask: &[bool], temperature: T) -> Result<Var<'t, T>, TensorError> {
        let (probs, logp) = masked_softmax_rows(&self.value, mask, temperature)?;
        let mask: Arc<[bool]> = mask.into();
        let a = self.value.last_dim();
        Ok(self.tape.record(logp, &[self], move |g, _out, _| {
            let mut gx = vec![T::zero(); g.len()];
            for (r, (gr, pr)) in g.data().chunks(a).zip(probs.data().chunks(a)).enumerate() {
                let mr = &mask[r * a..(r + 1) * a];
                let total: T = gr.iter().zip(mr).filter(|(_, &m)| m).map(|(&x, _)| x).sum();
                for j in 0..a {
                    if mr[j] {
                        gx[r * a + j] = (gr[j] - pr[j] * total) / temperature;
                    }
                }
            }
            vec![Some(Tensor::new(g.shape().to_vec(), gx))]
        }))
    }

    // -----------------------------------------------------------------------
    // Normalization
    // -----------------------------------------------------------------------

    /// Batch normalization over all leading positions of `[.., D]`.
    ///
    /// With `stats = None` the batch statistics are used and returned as
    /// `(mean, unbiased variance)` for running-average updates; otherwise the
    /// given `(mean, variance)` are treated as constants.
    pub fn batch_norm(
        &self,
        gamma: &Var<'t, T>,
        beta: &Var<'t, T>,
        eps: T,
        stats: Option<(&[T], &[T])>,
    ) -> (Var<'t, T>, Option<(Vec<T>, Vec<T>)>) {
        let d = self.value.last_dim();
        let rows = self.value.len() / d;
        let x = self.data();
        let (mean, var, batch_stats) = match stats {
            Some((m, v)) => (m.to_vec(), v.to_vec(), None),
            None => {
                let nf = T::from_usize_lossy(rows);
                let mut mean = vec![T::zero(); d];
                for row in x.chunks(d) {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= nf);
                let mut var = vec![T::zero(); d];
                for row in x.chunks(d) {
                    for j in 0..d {
                        let c = row[j] - mean[j];
                        var[j] += c * c;
                    }
                }
                let unbiased: Vec<T> = var.iter().map(|&v| v / T::from_usize_lossy(rows.max(2) - 1)).collect();
                var.iter_mut().for_each(|v| *v /= nf);
                (mean.clone(), var, Some((mean, unbiased)))
            }
        };
        let train = stats.is_none();
        let out = normalize_affine(self, gamma, beta, eps, d, 1, rows, &mean, &var, train);
        (out, batch_stats)
    }

    /// Instance normalization of `[B, N, D]` over the node axis, per channel.
    pub fn instance_norm(&self, gamma: &Var<'t, T>, beta: &Var<'t, T>, eps: T) -> Var<'t, T> {
        let shape = self.shape();
        assert_eq!(shape.len(), 3, "instance_norm expects [B, N, D]");
        let (b, n, d) = (shape[0], shape[1], shape[2]);
        let x = self.data();
        let nf = T::from_usize_lossy(n);
        let mut mean = vec![T::zero(); b * d];
        let mut var = vec![T::zero(); b * d];
        for i in 0..b {
            for row in x[i * n * d..(i + 1) * n * d].chunks(d) {
                for j in 0..d {
                    mean[i * d + j] += row[j];
                }
            }
            for j in 0..d {
                mean[i * d + j] /= nf;
            }
            for row in x[i * n * d..(i + 1) * n * d].chunks(d) {
                for j in 0..d {
                    let c = row[j] - mean[i * d + j];
                    var[i * d + j] += c * c;
                }
            }
            for j in 0..d {
                var[i * d + j] /= nf;
            }
        }
        normalize_affine(self, gamma, beta, eps, d, b, n, &mean, &var, true)
    }
}

/// `y = gamma · (x - mean) / sqrt(var + eps) + beta` over `groups` blocks of
/// `rows × d`, with one statistic per (group, channel). When `through_stats`
/// the statistics are functions of `x` and the full normalization backward
/// is used.
#[allow(clippy::too_many_arguments)]
fn normalize_affine<'t, T: Float>(
    x: &Var<'t, T>,
    gamma: &Var<'t, T>,
    beta: &Var<'t, T>,
    eps: T,
    d: usize,
    groups: usize,
    rows: usize,
    mean: &[T],
    var: &[T],
    through_stats: bool,
) -> Var<'t, T> {
    assert_eq!(gamma.value.len(), d);
    assert_eq!(beta.value.len(), d);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let xd = x.data();
    let (gm, bt) = (gamma.data(), beta.data());
    let mut xhat = vec![T::zero(); xd.len()];
    let mut out = vec![T::zero(); xd.len()];
    for gi in 0..groups {
        for r in 0..rows {
            let base = (gi * rows + r) * d;
            for j in 0..d {
                let s = gi * d + j;
                let h = (xd[base + j] - mean[s]) * inv_std[s];
                xhat[base + j] = h;
                out[base + j] = gm[j] * h + bt[j];
            }
        }
    }
    let gamma_v = gamma.value.clone();
    let shape = x.shape().to_vec();
    x.tape.record(Tensor::new(shape.clone(), out), &[x, gamma, beta], move |g, _out, needs| {
        let gd = g.data();
        let gm = gamma_v.data();
        let mut dgamma = vec![T::zero(); d];
        let mut dbeta = vec![T::zero(); d];
        for (i, &gv) in gd.iter().enumerate() {
            let j = i % d;
            dgamma[j] += gv * xhat[i];
            dbeta[j] += gv;
        }
        let dx = needs[0].then(|| {
            let mut dx = vec![T::zero(); gd.len()];
            let nf = T::from_usize_lossy(rows);
            for gi in 0..groups {
                let mut sum_dh = vec![T::zero(); d];
                let mut sum_dh_h = vec![T::zero(); d];
                if through_stats {
                    for r in 0..rows {
                        let base = (gi * rows + r) * d;
                        for j in 0..d {
                            let dh = gd[base + j] * gm[j];
                            sum_dh[j] += dh;
                            sum_dh_h[j] += dh * xhat[base + j];
                        }
                    }
                }
                for r in 0..rows {
                    let base = (gi * rows + r) * d;
                    for j in 0..d {
                        let s = gi * d + j;
                        let dh = gd[base + j] * gm[j];
                        dx[base + j] = if through_stats {
                            inv_std[s] * (dh - sum_dh[j] / nf - xhat[base + j] * sum_dh_h[j] / nf)
                        } else {
                            inv_std[s] * dh
                        };
                    }
                }
            }
            Tensor::new(shape.clone(), dx)
        });
        vec![dx, needs[1].then(|| Tensor::new(vec![d], dgamma)), needs[2].then(|| Tensor::new(vec![d], dbeta))]
    })
}

/// Row-split shared-weight gemm: rows of `a` are independent so chunks give
/// the same bits as one call.
fn gemm_rows<T: Float>(k: usize, n: usize, a: &[T], b: &[T], trans_b: bool, out: &mut [T]) {
    const CHUNK_ROWS: usize = 256;
    if n == 0 {
        return;
    }
    par::for_each_chunk_mut(out, CHUNK_ROWS * n, |c, chunk| {
        let r0 = c * CHUNK_ROWS;
        let m = chunk.len() / n;
        T::gemm(m, k, n, &a[r0 * k..(r0 + m) * k], false, b, trans_b, chunk, false);
    });
}

/// Returns `(probs, log_probs)` of the masked, temperature-scaled softmax.
pub(crate) fn masked_softmax_rows<T: Float>(
    x: &Tensor<T>,
    mask: &[bool],
    temperature: T,
) -> Result<(Tensor<T>, Tensor<T>), TensorError> {
    if !(temperature > T::zero()) {
        return Err(TensorError::NonPositiveTemperature);
    }
    if mask.len() != x.len() {
        return Err(TensorError::ShapeMismatch(format!(
            "mask has {} entries for logits of shape {:?}",
            mask.len(),
            x.shape()
        )));
    }
    let a = x.last_dim();
    let mut probs = vec![T::zero(); x.len()];
    let mut logp = vec![T::neg_infinity(); x.len()];
    for (r, row) in x.data().chunks(a).enumerate() {
        let mr = &mask[r * a..(r + 1) * a];
        let mut max = T::neg_infinity();
        for (&v, &m) in row.iter().zip(mr) {
            if m {
                max = max.max(v / temperature);
            }
        }
        if max == T::neg_infinity() {
            return Err(TensorError::AllMasked(r));
        }
        let mut total = T::zero();
        for j in 0..a {
            if mr[j] {
                let e = (row[j] / temperature - max).exp();
                probs[r * a + j] = e;
                total += e;
            }
        }
        let log_total = total.ln();
        for j in 0..a {
            if mr[j] {
                probs[r * a + j] /= total;
                logp[r * a + j] = row[j] / temperature - max - log_total;
            }
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), probs), Tensor::new(x.shape().to_vec(), logp)))
}

impl<'t, T: Float> Add for &Var<'t, T> {
    type Output = Var<'t, T>;
    fn add(self, rhs: Self) -> Var<'t, T> {
        Var::add(self, rhs)
    }
}

impl<'t, T: Float> Sub for &Var<'t, T> {
    type Output = Var<'t, T>;
    fn sub(self, rhs: Self) -> Var<'t, T> {
        Var::sub(self, rhs)
    }
}

impl<'t, T: Float> Mul for &Var<'t, T> {
    type Output = Var<'t, T>;
    fn mul(self, rhs: Self) -> Var<'t, T> {
        Var::mul(self, rhs)
    }
}

impl<'t, T: Float> Neg for &Var<'t, T> {
    type Output = Var<'t, T>;
    fn neg(self) -> Var<'t, T> {
        Var::neg(self)
    }
}
