//! Wengert-list reverse-mode autodiff over dense row-major tensors.
//!
//! One tape records one forward computation: every operation appends a node
//! and owns its output buffer. `backward` walks the list once in exact
//! reverse recording order, accumulating gradients with `+=` into lazily
//! allocated buffers. A tape is single-threaded at the recording level;
//! kernels may fan work out internally but stay bit-deterministic.

use std::sync::Arc;

use crate::diffcore::array::{as_rows, Array};
use crate::diffcore::kernels as k;
use crate::diffcore::Scalar;
use crate::error::{Error, Result};

/// Handle to a tensor recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Entropy kernels clamp probabilities away from 0/1 so saturated sigmoids
/// cannot produce NaN losses.
const P_CLAMP: f64 = 1e-7;

enum Node<E: Scalar> {
    Leaf { requires_grad: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    AddScalar(Var),
    MulScalar(Var, E),
    AddVec { x: Var, v: Var },
    MulVec { x: Var, v: Var },
    SegAffine { x: Var, scale: Var, shift: Var },
    SegMul { x: Var, s: Var },
    Matmul { a: Var, b: Var },
    MatmulNT { a: Var, b: Var },
    Bmm { a: Var, b: Var, nt: bool },
    Transpose2 { x: Var },
    SoftmaxLast { x: Var },
    LogSoftmaxLast { x: Var },
    Sigmoid { x: Var },
    Silu { x: Var },
    Relu { x: Var },
    Softplus { x: Var },
    Exp { x: Var },
    Ln { x: Var },
    Sqrt { x: Var },
    Square { x: Var },
    BinEntropy { x: Var },
    Clamp { x: Var, lo: E, hi: E },
    SumAll { x: Var },
    MeanAll { x: Var },
    MeanLeading { x: Var },
    MeanAxis1 { x: Var },
    MeanAxis { x: Var, axis: usize },
    VarAxis { x: Var, axis: usize },
    NormalizeLast { x: Var },
    SteSign { x: Var },
    RmsNormLast { x: Var, gamma: Option<Var>, eps: E },
    QkNorm { x: Var, gamma: Var, heads: usize, eps: E },
    Rope { x: Var, cos: Arc<Vec<E>>, sin: Arc<Vec<E>> },
    SplitHeads { x: Var, heads: usize },
    MergeHeads { x: Var, heads: usize },
    ConcatAxis1 { a: Var, b: Var },
    SliceAxis1 { x: Var, start: usize, len: usize },
    Repeat0 { x: Var, n: usize },
    GatherRows { table: Var, ids: Arc<Vec<usize>> },
    MulConst { x: Var, c: Arc<Vec<E>> },
    MulBScalar { x: Var, s: Var },
    Reshape { x: Var },
    Reindex { x: Var, map: Arc<Vec<usize>>, items: usize },
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    AvgPool2d { x: Var, ksize: usize },
}

pub struct Tape<E: Scalar> {
    vals: Vec<Array<E>>,
    nodes: Vec<Node<E>>,
    grads: Vec<Option<Vec<E>>>,
    /// Whether the value at i depends on some requires_grad leaf.
    live: Vec<bool>,
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Tape { vals: Vec::new(), nodes: Vec::new(), grads: Vec::new(), live: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array<E> {
        &self.vals[v.0]
    }

    pub fn grad(&self, v: Var) -> Option<&[E]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient of a leaf as an array shaped like its value (zeros if the
    /// leaf was unreachable from the loss).
    pub fn grad_array(&self, v: Var) -> Array<E> {
        match &self.grads[v.0] {
            Some(g) => Array::from_vec(self.vals[v.0].shape().to_vec(), g.clone()),
            None => Array::zeros(self.vals[v.0].shape().to_vec()),
        }
    }

    fn push(&mut self, value: Array<E>, node: Node<E>, live: bool) -> Var {
        self.vals.push(value);
        self.nodes.push(node);
        self.grads.push(None);
        self.live.push(live);
        Var(self.vals.len() - 1)
    }

    fn is_live(&self, v: Var) -> bool {
        self.live[v.0]
    }

    pub fn leaf(&mut self, value: Array<E>, requires_grad: bool) -> Var {
        self.push(value, Node::Leaf { requires_grad }, requires_grad)
    }

    pub fn constant(&mut self, value: Array<E>) -> Var {
        self.leaf(value, false)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.vals[v.0].shape()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("operands {:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    // -- elementwise binary ------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut out = vec![E::zero(); self.vals[a.0].numel()];
        k::binary_map(self.vals[a.0].data(), self.vals[b.0].data(), &mut out, |x, y| x + y);
        let arr = Array::from_vec(self.shape(a).to_vec(), out);
        let live = self.is_live(a) || self.is_live(b);
        Ok(self.push(arr, Node::Add(a, b), live))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let mut out = vec![E::zero(); self.vals[a.0].numel()];
        k::binary_map(self.vals[a.0].data(), self.vals[b.0].data(), &mut out, |x, y| x - y);
        let arr = Array::from_vec(self.shape(a).to_vec(), out);
        let live = self.is_live(a) || self.is_live(b);
        Ok(self.push(arr, Node::Sub(a, b), live))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let mut out = vec![E::zero(); self.vals[a.0].numel()];
        k::binary_map(self.vals[a.0].data(), self.vals[b.0].data(), &mut out, |x, y| x * y);
        let arr = Array::from_vec(self.shape(a).to_vec(), out);
        let live = self.is_live(a) || self.is_live(b);
        Ok(self.push(arr, Node::Mul(a, b), live))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let arr = self.vals[a.0].map(|x| -x);
        let live = self.is_live(a);
        self.push(arr, Node::Neg(a), live)
    }

    pub fn add_scalar(&mut self, a: Var, c: E) -> Var {
        let arr = self.vals[a.0].map(|x| x + c);
        let live = self.is_live(a);
        self.push(arr, Node::AddScalar(a), live)
    }

    pub fn mul_scalar(&mut self, a: Var, c: E) -> Var {
        let arr = self.vals[a.0].map(|x| x * c);
        let live = self.is_live(a);
        self.push(arr, Node::MulScalar(a, c), live)
    }

    // -- broadcasts ---------------------------------------------------------

    /// x[..., w] + v[w], broadcast over leading axes.
    pub fn add_vec(&mut self, x: Var, v: Var) -> Result<Var> {
        let (_, w) = as_rows(self.shape(x));
        if self.shape(v) != [w] {
            return Err(Error::dim("add_vec", format!("vector {:?} vs width {}", self.shape(v), w)));
        }
        let vv = self.vals[v.0].arc();
        let xs = self.vals[x.0].data();
        let mut out = vec![E::zero(); xs.len()];
        k::map_rows(xs, &mut out, w, w, |_, s, o| {
            for j in 0..w {
                o[j] = s[j] + vv[j];
            }
        });
        let arr = Array::from_vec(self.shape(x).to_vec(), out);
        let live = self.is_live(x) || self.is_live(v);
        Ok(self.push(arr, Node::AddVec { x, v }, live))
    }

    /// x[..., w] * v[w].
    pub fn mul_vec(&mut self, x: Var, v: Var) -> Result<Var> {
        let (_, w) = as_rows(self.shape(x));
        if self.shape(v) != [w] {
            return Err(Error::dim("mul_vec", format!("vector {:?} vs width {}", self.shape(v), w)));
        }
        let vv = self.vals[v.0].arc();
        let xs = self.vals[x.0].data();
        let mut out = vec![E::zero(); xs.len()];
        k::map_rows(xs, &mut out, w, w, |_, s, o| {
            for j in 0..w {
                o[j] = s[j] * vv[j];
            }
        });
        let arr = Array::from_vec(self.shape(x).to_vec(), out);
        let live = self.is_live(x) || self.is_live(v);
        Ok(self.push(arr, Node::MulVec { x, v }, live))
    }

    /// x[B, L, w] * (1 + scale[B, w]) + shift[B, w] — per-item modulation.
    pub fn seg_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || self.shape(scale) != [xs[0], xs[2]] || self.shape(shift) != [xs[0], xs[2]] {
            return Err(Error::dim(
                "seg_affine",
                format!("x {:?}, scale {:?}, shift {:?}", xs, self.shape(scale), self.shape(shift)),
            ));
        }
        let (bsz, l, w) = (xs[0], xs[1], xs[2]);
        let sv = self.vals[scale.0].arc();
        let tv = self.vals[shift.0].arc();
        let mut out = vec![E::zero(); bsz * l * w];
        k::map_rows(self.vals[x.0].data(), &mut out, w, w, |r, s, o| {
            let b = r / l;
            for j in 0..w {
                o[j] = s[j] * (E::one() + sv[b * w + j]) + tv[b * w + j];
            }
        });
        let arr = Array::from_vec(xs, out);
        let live = self.is_live(x) || self.is_live(scale) || self.is_live(shift);
        Ok(self.push(arr, Node::SegAffine { x, scale, shift }, live))
    }

    /// x[B, L, w] * s[B, w] — per-item gating.
    pub fn seg_mul(&mut self, x: Var, s: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || self.shape(s) != [xs[0], xs[2]] {
            return Err(Error::dim("seg_mul", format!("x {:?}, s {:?}", xs, self.shape(s))));
        }
        let (bsz, l, w) = (xs[0], xs[1], xs[2]);
        let sv = self.vals[s.0].arc();
        let mut out = vec![E::zero(); bsz * l * w];
        k::map_rows(self.vals[x.0].data(), &mut out, w, w, |r, src, o| {
            let b = r / l;
            for j in 0..w {
                o[j] = src[j] * sv[b * w + j];
            }
        });
        let arr = Array::from_vec(xs, out);
        let live = self.is_live(x) || self.is_live(s);
        Ok(self.push(arr, Node::SegMul { x, s }, live))
    }

    // -- linear algebra ------------------------------------------------------

    /// a[..., k] x b[k, n] -> [..., n]; leading axes of `a` are collapsed.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = as_rows(self.shape(a));
        let bs = self.shape(b);
        if bs.len() != 2 || bs[0] != ka {
            return Err(Error::dim(
                "matmul",
                format!("{:?} x {:?}: inner dimensions differ", self.shape(a), bs),
            ));
        }
        let n = bs[1];
        let mut out = vec![E::zero(); m * n];
        k::mm_nn(m, ka, n, self.vals[a.0].data(), self.vals[b.0].data(), &mut out, E::zero());
        let mut shape = self.shape(a).to_vec();
        *shape.last_mut().unwrap() = n;
        let arr = Array::from_vec(shape, out);
        let live = self.is_live(a) || self.is_live(b);
        Ok(self.push(arr, Node::Matmul { a, b }, live))
    }

    /// a[m, k] x b[n, k]^T -> [m, n].
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (asp, bsp) = (self.shape(a), self.shape(b));
        if asp.len() != 2 || bsp.len() != 2 || asp[1] != bsp[1] {
            return Err(Error::dim("matmul_nt", format!("{:?} x {:?}^T", asp, bsp)));
        }
        let (m, ka, n) = (asp[0], asp[1], bsp[0]);
        let mut out = vec![E::zero(); m * n];
        k::mm_nt(m, ka, n, self.vals[a.0].data(), self.vals[b.0].data(), &mut out, E::zero());
        let arr = Array::from_vec(vec![m, n], out);
        let live = self.is_live(a) || self.is_live(b);
        Ok(self.push(arr, Node::MatmulNT { a, b }, live))
    }

    /// Batched matmul over the leading axis: [B,m,k] x [B,k,n] (or [B,n,k] if `nt`).
    pub fn bmm(&mut self, a: Var, b: Var, nt: bool) -> Result<Var> {
        let (asp, bsp) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if asp.len() != 3 || bsp.len() != 3 || asp[0] != bsp[0] {
            return Err(Error::dim("bmm", format!("{:?} x {:?}", asp, bsp)));
        }
        let (bt, m, ka) = (asp[0], asp[1], asp[2]);
        let (kb, n) = if nt { (bsp[2], bsp[1]) } else { (bsp[1], bsp[2]) };
        if ka != kb {
            return Err(Error::dim("bmm", format!("{:?} x {:?} (nt={})", asp, bsp, nt)));
        }
        let mut out = vec![E::zero(); bt * m * n];
        k::bmm(bt, m, ka, n, self.vals[a.0].data(), self.vals[b.0].data(), &mut out, nt, E::zero());
        let arr = Array::from_vec(vec![bt, m, n], out);
        let live = self.is_live(a) || self.is_live(b);
        Ok(self.push(arr, Node::Bmm { a, b, nt }, live))
    }

    pub fn transpose2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::dim("transpose2", format!("rank {} input", s.len())));
        }
        let (m, n) = (s[0], s[1]);
        let src = self.vals[x.0].data();
        let mut out = vec![E::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let arr = Array::from_vec(vec![n, m], out);
        let live = self.is_live(x);
        Ok(self.push(arr, Node::Transpose2 { x }, live))
    }

    // -- nonlinearities -------------------------------------------------------

    fn unary<F: Fn(E) -> E + Sync>(&mut self, x: Var, node: Node<E>, f: F) -> Var {
        let src = self.vals[x.0].data();
        let mut out = vec![E::zero(); src.len()];
        k::unary_map(src, &mut out, f);
        let arr = Array::from_vec(self.shape(x).to_vec(), out);
        let live = self.is_live(x);
        self.push(arr, node, live)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Node::Sigmoid { x }, |v| sigmoid(v))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, Node::Silu { x }, |v| v * sigmoid(v))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Node::Relu { x }, |v| if v > E::zero() { v } else { E::zero() })
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Node::Softplus { x }, |v| softplus(v))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Node::Exp { x }, |v| v.exp())
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, Node::Ln { x }, |v| v.ln())
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Node::Sqrt { x }, |v| v.sqrt())
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Node::Square { x }, |v| v * v)
    }

    /// Elementwise binary entropy in nats of probabilities in (0,1).
    pub fn bin_entropy(&mut self, x: Var) -> Var {
        self.unary(x, Node::BinEntropy { x }, |v| {
            let p = clamp_p(v);
            -(p * p.ln() + (E::one() - p) * (E::one() - p).ln())
        })
    }

    pub fn clamp(&mut self, x: Var, lo: E, hi: E) -> Var {
        self.unary(x, Node::Clamp { x, lo, hi }, |v| {
            if v < lo {
                lo
            } else if v > hi {
                hi
            } else {
                v
            }
        })
    }

    pub fn softmax_last(&mut self, x: Var) -> Var {
        let (_, w) = as_rows(self.shape(x));
        let src = self.vals[x.0].data();
        let mut out = vec![E::zero(); src.len()];
        k::map_rows(src, &mut out, w, w, |_, s, o| {
            let mut mx = s[0];
            for &v in &s[1..] {
                if v > mx {
                    mx = v;
                }
            }
            let mut sum = E::zero();
            for j in 0..w {
                let e = (s[j] - mx).fexp();
                o[j] = e;
                sum = sum + e;
            }
            let inv = E::one() / sum;
            for v in o.iter_mut() {
                *v = *v * inv;
            }
        });
        let arr = Array::from_vec(self.shape(x).to_vec(), out);
        let live = self.is_live(x);
        self.push(arr, Node::SoftmaxLast { x }, live)
    }

    pub fn log_softmax_last(&mut self, x: Var) -> Var {
        let (_, w) = as_rows(self.shape(x));
        let src = self.vals[x.0].data();
        let mut out = vec![E::zero(); src.len()];
        k::map_rows(src, &mut out, w, w, |_, s, o| {
            let mut mx = s[0];
            for &v in &s[1..] {
                if v > mx {
                    mx = v;
                }
            }
            let mut sum = E::zero();
            for j in 0..w {
                sum = sum + (s[j] - mx).fexp();
            }
            let lse = mx + sum.ln();
            for j in 0..w {
                o[j] = s[j] - lse;
            }
        });
        let arr = Array::from_vec(self.shape(x).to_vec(), out);
        let live = self.is_live(x);
        self.push(arr, Node::LogSoftmaxLast { x }, live)
    }

    // -- reductions -----------------------------------------------------------

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = k::sum_all(self.vals[x.0].data());
        let live = self.is_live(x);
        self.push(Array::scalar(s), Node::SumAll { x }, live)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.vals[x.0].numel();
        let s = k::sum_all(self.vals[x.0].data()) / E::from_f64(n as f64);
        let live = self.is_live(x);
        self.push(Array::scalar(s), Node::MeanAll { x }, live)
    }

    /// [..., w] -> [w]: mean over all leading rows.
    pub fn mean_leading(&mut self, x: Var) -> Var {
        let (r, w) = as_rows(self.shape(x));
        let src = self.vals[x.0].data();
        let mut out = vec![E::zero(); w];
        for row in src.chunks(w) {
            for j in 0..w {
                out[j] = out[j] + row[j];
            }
        }
        let inv = E::one() / E::from_f64(r as f64);
        for v in out.iter_mut() {
            *v = *v * inv;
        }
        let live = self.is_live(x);
        self.push(Array::from_vec(vec![w], out), Node::MeanLeading { x }, live)
    }

    /// [B, K, C] -> [B, C]: mean over the middle axis.
    pub fn mean_axis1(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::dim("mean_axis1", format!("rank {} input", s.len())));
        }
        let (bsz, kk, c) = (s[0], s[1], s[2]);
        let src = self.vals[x.0].data();
        let mut out = vec![E::zero(); bsz * c];
        let inv = E::one() / E::from_f64(kk as f64);
        for b in 0..bsz {
            for kr in 0..kk {
                let row = &src[(b * kk + kr) * c..(b * kk + kr + 1) * c];
                for j in 0..c {
                    out[b * c + j] = out[b * c + j] + row[j];
                }
            }
            for j in 0..c {
                out[b * c + j] = out[b * c + j] * inv;
            }
        }
        let live = self.is_live(x);
        Ok(self.push(Array::from_vec(vec![bsz, c], out), Node::MeanAxis1 { x }, live))
    }

    fn axis_geometry(&self, x: Var, axis: usize) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if axis >= s.len() || s[axis] == 0 {
            return Err(Error::Contract(format!(
                "axis {} invalid for shape {:?}",
                axis, s
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        Ok((outer, s[axis], inner))
    }

    /// Mean along one axis (keepdim dropped).
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, ext, inner) = self.axis_geometry(x, axis)?;
        let src = self.vals[x.0].data();
        let mut out = vec![E::zero(); outer * inner];
        let inv = E::one() / E::from_f64(ext as f64);
        for o in 0..outer {
            for e in 0..ext {
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + src[(o * ext + e) * inner + i];
                }
            }
            for i in 0..inner {
                out[o * inner + i] = out[o * inner + i] * inv;
            }
        }
        let mut shape = self.shape(x).to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let live = self.is_live(x);
        Ok(self.push(Array::from_vec(shape, out), Node::MeanAxis { x, axis }, live))
    }

    /// Population (biased) variance along one axis.
    pub fn var_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, ext, inner) = self.axis_geometry(x, axis)?;
        let src = self.vals[x.0].data();
        let mut out = vec![E::zero(); outer * inner];
        let inv = E::one() / E::from_f64(ext as f64);
        for o in 0..outer {
            for i in 0..inner {
                let mut mean = E::zero();
                for e in 0..ext {
                    mean = mean + src[(o * ext + e) * inner + i];
                }
                mean = mean * inv;
                let mut var = E::zero();
                for e in 0..ext {
                    let d = src[(o * ext + e) * inner + i] - mean;
                    var = var + d * d;
                }
                out[o * inner + i] = var * inv;
            }
        }
        let mut shape = self.shape(x).to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let live = self.is_live(x);
        Ok(self.push(Array::from_vec(shape, out), Node::VarAxis { x, axis }, live))
    }

    // -- normalization ---------------------------------------------------------

    /// Rowwise L2 normalization over the last axis.
    pub fn normalize_last(&mut self, x: Var) -> Var {
        let (_, w) = as_rows(self.shape(x));
        let src = self.vals[x.0].data();
        let mut out = vec![E::zero(); src.len()];
        k::map_rows(src, &mut out, w, w, |_, s, o| {
            let mut n2 = E::zero();
            for &v in s {
                n2 = n2 + v * v;
            }
            let inv = E::one() / n2.sqrt();
            for j in 0..w {
                o[j] = s[j] * inv;
            }
        });
        let arr = Array::from_vec(self.shape(x).to_vec(), out);
        let live = self.is_live(x);
        self.push(arr, Node::NormalizeLast { x }, live)
    }

    /// Forward sign(x) * scale, backward identity (straight-through).
    pub fn ste_sign(&mut self, x: Var, scale: E) -> Var {
        self.unary(x, Node::SteSign { x }, move |v| {
            if v < E::zero() {
                -scale
            } else {
                scale
            }
        })
    }

    /// RMS normalization over the last axis with optional learnable gain.
    pub fn rms_norm(&mut self, x: Var, gamma: Option<Var>, eps: E) -> Result<Var> {
        let (_, w) = as_rows(self.shape(x));
        if let Some(g) = gamma {
            if self.shape(g) != [w] {
                return Err(Error::dim("rms_norm", format!("gamma {:?} vs width {}", self.shape(g), w)));
            }
        }
        let gv = gamma.map(|g| self.vals[g.0].arc());
        let src = self.vals[x.0].data();
        let mut out = vec![E::zero(); src.len()];
        let inv_w = E::one() / E::from_f64(w as f64);
        k::map_rows(src, &mut out, w, w, |_, s, o| {
            let mut ms = E::zero();
            for &v in s {
                ms = ms + v * v;
            }
            let inv = E::one() / (ms * inv_w + eps).sqrt();
            match &gv {
                Some(g) => {
                    for j in 0..w {
                        o[j] = s[j] * inv * g[j];
                    }
                }
                None => {
                    for j in 0..w {
                        o[j] = s[j] * inv;
                    }
                }
            }
        });
        let arr = Array::from_vec(self.shape(x).to_vec(), out);
        let live = self.is_live(x) || gamma.map(|g| self.is_live(g)).unwrap_or(false);
        Ok(self.push(arr, Node::RmsNormLast { x, gamma, eps }, live))
    }

    /// Per-head RMS normalization of [B*H, L, hd] with one learnable scale per head.
    pub fn qk_norm(&mut self, x: Var, gamma: Var, heads: usize, eps: E) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[0] % heads != 0 {
            return Err(Error::dim("qk_norm", format!("x {:?} with {} heads", s, heads)));
        }
        if self.shape(gamma) != [heads] {
            return Err(Error::dim("qk_norm", format!("gamma {:?}", self.shape(gamma))));
        }
        let hd = s[2];
        let l = s[1];
        let gv = self.vals[gamma.0].arc();
        let src = self.vals[x.0].data();
        let mut out = vec![E::zero(); src.len()];
        let inv_w = E::one() / E::from_f64(hd as f64);
        k::map_rows(src, &mut out, hd, hd, |r, sr, o| {
            let h = (r / l) % heads;
            let mut ms = E::zero();
            for &v in sr {
                ms = ms + v * v;
            }
            let scale = gv[h] / (ms * inv_w + eps).sqrt();
            for j in 0..hd {
                o[j] = sr[j] * scale;
            }
        });
        let arr = Array::from_vec(s, out);
        let live = self.is_live(x) || self.is_live(gamma);
        Ok(self.push(arr, Node::QkNorm { x, gamma, heads, eps }, live))
    }

    /// Rotary embedding on [B*H, L, hd] with precomputed per-position tables
    /// of shape [L, hd/2].
    pub fn rope(&mut self, x: Var, cos: Arc<Vec<E>>, sin: Arc<Vec<E>>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[2] % 2 != 0 {
            return Err(Error::Config(format!("rope requires rank-3 input with even head dim, got {:?}", s)));
        }
        let (l, hd) = (s[1], s[2]);
        let half = hd / 2;
        if cos.len() != l * half || sin.len() != l * half {
            return Err(Error::dim("rope", format!("table len {} vs L*hd/2 = {}", cos.len(), l * half)));
        }
        let src = self.vals[x.0].data();
        let mut out = vec![E::zero(); src.len()];
        let (c, sn) = (Arc::clone(&cos), Arc::clone(&sin));
        k::map_rows(src, &mut out, hd, hd, |r, sr, o| {
            let pos = r % l;
            let tc = &c[pos * half..(pos + 1) * half];
            let ts = &sn[pos * half..(pos + 1) * half];
            for p in 0..half {
                let (x0, x1) = (sr[2 * p], sr[2 * p + 1]);
                o[2 * p] = x0 * tc[p] - x1 * ts[p];
                o[2 * p + 1] = x0 * ts[p] + x1 * tc[p];
            }
        });
        let arr = Array::from_vec(s, out);
        let live = self.is_live(x);
        Ok(self.push(arr, Node::Rope { x, cos, sin }, live))
    }

    // -- layout ops --------------------------------------------------------------

    /// [B, L, H*hd] -> [B*H, L, hd].
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[2] % heads != 0 {
            return Err(Error::dim("split_heads", format!("x {:?} with {} heads", s, heads)));
        }
        let (bsz, l, w) = (s[0], s[1], s[2]);
        let hd = w / heads;
        let src = self.vals[x.0].data();
        let mut out = vec![E::zero(); src.len()];
        for b in 0..bsz {
            for t in 0..l {
                let row = &src[(b * l + t) * w..(b * l + t + 1) * w];
                for h in 0..heads {
                    let dst = ((b * heads + h) * l + t) * hd;
                    out[dst..dst + hd].copy_from_slice(&row[h * hd..(h + 1) * hd]);
                }
            }
        }
        let arr = Array::from_vec(vec![bsz * heads, l, hd], out);
        let live = self.is_live(x);
        Ok(self.push(arr, Node::SplitHeads { x, heads }, live))
    }

    /// [B*H, L, hd] -> [B, L, H*hd].
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[0] % heads != 0 {
            return Err(Error::dim("merge_heads", format!("x {:?} with {} heads", s, heads)));
        }
        let (bh, l, hd) = (s[0], s[1], s[2]);
        let bsz = bh / heads;
        let w = heads * hd;
        let src = self.vals[x.0].data();
        let mut out = vec![E::zero(); src.len()];
        for b in 0..bsz {
            for h in 0..heads {
                for t in 0..l {
                    let sidx = ((b * heads + h) * l + t) * hd;
                    let didx = (b * l + t) * w + h * hd;
                    out[didx..didx + hd].copy_from_slice(&src[sidx..sidx + hd]);
                }
            }
        }
        let arr = Array::from_vec(vec![bsz, l, w], out);
        let live = self.is_live(x);
        Ok(self.push(arr, Node::MergeHeads { x, heads }, live))
    }

    /// Concatenate [B, La, w] and [B, Lb, w] along axis 1.
    pub fn concat_axis1(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(Error::dim("concat_axis1", format!("{:?} ++ {:?}", sa, sb)));
        }
        let (bsz, la, lb, w) = (sa[0], sa[1], sb[1], sa[2]);
        let (av, bv) = (self.vals[a.0].data(), self.vals[b.0].data());
        let mut out = vec![E::zero(); bsz * (la + lb) * w];
        for i in 0..bsz {
            let dst = i * (la + lb) * w;
            out[dst..dst + la * w].copy_from_slice(&av[i * la * w..(i + 1) * la * w]);
            out[dst + la * w..dst + (la + lb) * w].copy_from_slice(&bv[i * lb * w..(i + 1) * lb * w]);
        }
        let arr = Array::from_vec(vec![bsz, la + lb, w], out);
        let live = self.is_live(a) || self.is_live(b);
        Ok(self.push(arr, Node::ConcatAxis1 { a, b }, live))
    }

    /// Slice rows [start, start+len) along axis 1 of [B, L, w].
    pub fn slice_axis1(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || start + len > s[1] {
            return Err(Error::dim("slice_axis1", format!("[{},{}) of {:?}", start, start + len, s)));
        }
        let (bsz, l, w) = (s[0], s[1], s[2]);
        let src = self.vals[x.0].data();
        let mut out = vec![E::zero(); bsz * len * w];
        for i in 0..bsz {
            let sidx = (i * l + start) * w;
            out[i * len * w..(i + 1) * len * w].copy_from_slice(&src[sidx..sidx + len * w]);
        }
        let arr = Array::from_vec(vec![bsz, len, w], out);
        let live = self.is_live(x);
        Ok(self.push(arr, Node::SliceAxis1 { x, start, len }, live))
    }

    /// Replicate the whole tensor n times along a new leading axis.
    pub fn repeat0(&mut self, x: Var, n: usize) -> Var {
        let src = self.vals[x.0].data();
        let mut out = Vec::with_capacity(src.len() * n);
        for _ in 0..n {
            out.extend_from_slice(src);
        }
        let mut shape = vec![n];
        shape.extend_from_slice(self.shape(x));
        let live = self.is_live(x);
        self.push(Array::from_vec(shape, out), Node::Repeat0 { x, n }, live)
    }

    /// Select rows of table[R, w] by index list -> [ids.len(), w].
    pub fn gather_rows(&mut self, table: Var, ids: Arc<Vec<usize>>) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(Error::dim("gather_rows", format!("table {:?}", s)));
        }
        let (r, w) = (s[0], s[1]);
        for &i in ids.iter() {
            if i >= r {
                return Err(Error::Contract(format!("row index {} out of range {}", i, r)));
            }
        }
        let src = self.vals[table.0].data();
        let mut out = vec![E::zero(); ids.len() * w];
        for (j, &i) in ids.iter().enumerate() {
            out[j * w..(j + 1) * w].copy_from_slice(&src[i * w..(i + 1) * w]);
        }
        let arr = Array::from_vec(vec![ids.len(), w], out);
        let live = self.is_live(table);
        Ok(self.push(arr, Node::GatherRows { table, ids }, live))
    }

    /// Elementwise multiply by a constant host buffer (masking).
    pub fn mul_const(&mut self, x: Var, c: Arc<Vec<E>>) -> Result<Var> {
        if c.len() != self.vals[x.0].numel() {
            return Err(Error::dim("mul_const", format!("{} vs {}", c.len(), self.vals[x.0].numel())));
        }
        let src = self.vals[x.0].data();
        let mut out = vec![E::zero(); src.len()];
        for i in 0..out.len() {
            out[i] = src[i] * c[i];
        }
        let arr = Array::from_vec(self.shape(x).to_vec(), out);
        let live = self.is_live(x);
        Ok(self.push(arr, Node::MulConst { x, c }, live))
    }

    /// Multiply by a scalar tensor of shape [1].
    pub fn mul_bscalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.vals[s.0].numel() != 1 {
            return Err(Error::dim("mul_bscalar", format!("scale {:?}", self.shape(s))));
        }
        let c = self.vals[s.0].data()[0];
        let src = self.vals[x.0].data();
        let mut out = vec![E::zero(); src.len()];
        k::unary_map(src, &mut out, |v| v * c);
        let arr = Array::from_vec(self.shape(x).to_vec(), out);
        let live = self.is_live(x) || self.is_live(s);
        Ok(self.push(arr, Node::MulBScalar { x, s }, live))
    }

    /// Zero-copy view with a new shape.
    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let arr = self.vals[x.0].reshaped(shape)?;
        let live = self.is_live(x);
        Ok(self.push(arr, Node::Reshape { x }, live))
    }

    /// Gather within each of `items` equal chunks: out[item][i] = x[item][map[i]].
    pub fn reindex(&mut self, x: Var, map: Arc<Vec<usize>>, items: usize, out_shape: Vec<usize>) -> Result<Var> {
        let n = self.vals[x.0].numel();
        if items == 0 || n % items != 0 {
            return Err(Error::dim("reindex", format!("{} items over {} elements", items, n)));
        }
        let item_len = n / items;
        for &i in map.iter() {
            if i >= item_len {
                return Err(Error::Contract(format!("reindex map entry {} out of {}", i, item_len)));
            }
        }
        let out_numel: usize = out_shape.iter().product();
        if out_numel != items * map.len() {
            return Err(Error::dim("reindex", format!("out shape {:?} vs {}*{}", out_shape, items, map.len())));
        }
        let src = self.vals[x.0].data();
        let mut out = vec![E::zero(); out_numel];
        for it in 0..items {
            let s = &src[it * item_len..(it + 1) * item_len];
            let o = &mut out[it * map.len()..(it + 1) * map.len()];
            for (j, &m) in map.iter().enumerate() {
                o[j] = s[m];
            }
        }
        let arr = Array::from_vec(out_shape, out);
        let live = self.is_live(x);
        Ok(self.push(arr, Node::Reindex { x, map, items }, live))
    }

    // -- conv / pooling ---------------------------------------------------------

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let dims = k::ConvDims::new(self.shape(x), self.shape(w), stride, pad)
            .ok_or_else(|| Error::dim("conv2d", format!("x {:?}, w {:?}", self.shape(x), self.shape(w))))?;
        if let Some(bv) = b {
            if self.shape(bv) != [dims.c_out] {
                return Err(Error::dim("conv2d", format!("bias {:?}", self.shape(bv))));
            }
        }
        let mut out = vec![E::zero(); dims.batch * dims.c_out * dims.h_out * dims.w_out];
        k::conv2d_fwd(
            &dims,
            self.vals[x.0].data(),
            self.vals[w.0].data(),
            b.map(|bv| self.vals[bv.0].data()),
            &mut out,
        );
        let arr = Array::from_vec(vec![dims.batch, dims.c_out, dims.h_out, dims.w_out], out);
        let live = self.is_live(x) || self.is_live(w) || b.map(|bv| self.is_live(bv)).unwrap_or(false);
        Ok(self.push(arr, Node::Conv2d { x, w, b, stride, pad }, live))
    }

    pub fn avg_pool2d(&mut self, x: Var, ksize: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] % ksize != 0 || s[3] % ksize != 0 {
            return Err(Error::dim("avg_pool2d", format!("x {:?}, k {}", s, ksize)));
        }
        let (bsz, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h / ksize, w / ksize);
        let src = self.vals[x.0].data();
        let mut out = vec![E::zero(); bsz * c * ho * wo];
        let inv = E::one() / E::from_f64((ksize * ksize) as f64);
        for bc in 0..bsz * c {
            let plane = &src[bc * h * w..(bc + 1) * h * w];
            let o = &mut out[bc * ho * wo..(bc + 1) * ho * wo];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = E::zero();
                    for ky in 0..ksize {
                        for kx in 0..ksize {
                            acc = acc + plane[(oy * ksize + ky) * w + ox * ksize + kx];
                        }
                    }
                    o[oy * wo + ox] = acc * inv;
                }
            }
        }
        let arr = Array::from_vec(vec![bsz, c, ho, wo], out);
        let live = self.is_live(x);
        Ok(self.push(arr, Node::AvgPool2d { x, ksize }, live))
    }

    // -- backward ---------------------------------------------------------------

    /// Backpropagate from a scalar loss, accumulating into leaf grads.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.vals[loss.0].numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.seed(loss, vec![E::one()]);
        self.run_backward();
        Ok(())
    }

    /// Backpropagate from externally supplied output gradients.
    pub fn backward_seeded(&mut self, seeds: Vec<(Var, Vec<E>)>) -> Result<()> {
        for (v, g) in seeds {
            if g.len() != self.vals[v.0].numel() {
                return Err(Error::dim("backward_seeded", format!("seed len {} vs {}", g.len(), self.vals[v.0].numel())));
            }
            self.seed(v, g);
        }
        self.run_backward();
        Ok(())
    }

    fn seed(&mut self, v: Var, g: Vec<E>) {
        match &mut self.grads[v.0] {
            Some(buf) => {
                for (b, x) in buf.iter_mut().zip(&g) {
                    *b = *b + *x;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn take_or_zero(&mut self, i: usize) -> Option<Vec<E>> {
        if matches!(self.nodes[i], Node::Leaf { .. }) {
            None
        } else {
            self.grads[i].take()
        }
    }

    fn add_into(&mut self, v: Var, contribution: impl FnOnce(&mut [E])) {
        if !self.live[v.0] {
            return;
        }
        let n = self.vals[v.0].numel();
        let buf = self.grads[v.0].get_or_insert_with(|| vec![E::zero(); n]);
        contribution(buf);
    }

    fn run_backward(&mut self) {
        for i in (0..self.nodes.len()).rev() {
            if self.grads[i].is_none() || matches!(self.nodes[i], Node::Leaf { .. }) {
                continue;
            }
            let g = match self.take_or_zero(i) {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(i, &g);
        }
    }

    fn backprop_node(&mut self, i: usize, g: &[E]) {
        // Safety note: we only read vals (immutable) and write grads of inputs,
        // which are distinct indices from i.
        macro_rules! val {
            ($v:expr) => {
                self.vals[$v.0].clone()
            };
        }
        match &self.nodes[i] {
            Node::Leaf { .. } => {}
            &Node::Add(a, b) => {
                self.add_into(a, |buf| k::accumulate(buf, |j| g[j]));
                self.add_into(b, |buf| k::accumulate(buf, |j| g[j]));
            }
            &Node::Sub(a, b) => {
                self.add_into(a, |buf| k::accumulate(buf, |j| g[j]));
                self.add_into(b, |buf| k::accumulate(buf, |j| -g[j]));
            }
            &Node::Mul(a, b) => {
                let (av, bv) = (val!(a), val!(b));
                self.add_into(a, |buf| k::accumulate(buf, |j| g[j] * bv.data()[j]));
                self.add_into(b, |buf| k::accumulate(buf, |j| g[j] * av.data()[j]));
            }
            &Node::Neg(a) => {
                self.add_into(a, |buf| k::accumulate(buf, |j| -g[j]));
            }
            &Node::AddScalar(a) => {
                self.add_into(a, |buf| k::accumulate(buf, |j| g[j]));
            }
            &Node::MulScalar(a, c) => {
                self.add_into(a, |buf| k::accumulate(buf, |j| g[j] * c));
            }
            &Node::AddVec { x, v } => {
                let w = self.vals[v.0].numel();
                self.add_into(x, |buf| k::accumulate(buf, |j| g[j]));
                self.add_into(v, |buf| {
                    for (j, gj) in g.iter().enumerate() {
                        buf[j % w] = buf[j % w] + *gj;
                    }
                });
            }
            &Node::MulVec { x, v } => {
                let w = self.vals[v.0].numel();
                let (xv, vv) = (val!(x), val!(v));
                self.add_into(x, |buf| k::accumulate(buf, |j| g[j] * vv.data()[j % w]));
                self.add_into(v, |buf| {
                    for (j, gj) in g.iter().enumerate() {
                        buf[j % w] = buf[j % w] + *gj * xv.data()[j];
                    }
                });
            }
            &Node::SegAffine { x, scale, shift } => {
                let xs = self.vals[x.0].shape().to_vec();
                let (bsz, l, w) = (xs[0], xs[1], xs[2]);
                let (xv, sv) = (val!(x), val!(scale));
                self.add_into(x, |buf| {
                    k::accumulate(buf, |j| {
                        let b = j / (l * w);
                        let col = j % w;
                        g[j] * (E::one() + sv.data()[b * w + col])
                    })
                });
                self.add_into(scale, |buf| {
                    for b in 0..bsz {
                        for t in 0..l {
                            for jw in 0..w {
                                let j = (b * l + t) * w + jw;
                                buf[b * w + jw] = buf[b * w + jw] + g[j] * xv.data()[j];
                            }
                        }
                    }
                });
                self.add_into(shift, |buf| {
                    for b in 0..bsz {
                        for t in 0..l {
                            for jw in 0..w {
                                buf[b * w + jw] = buf[b * w + jw] + g[(b * l + t) * w + jw];
                            }
                        }
                    }
                });
            }
            &Node::SegMul { x, s } => {
                let xs = self.vals[x.0].shape().to_vec();
                let (bsz, l, w) = (xs[0], xs[1], xs[2]);
                let (xv, sv) = (val!(x), val!(s));
                self.add_into(x, |buf| {
                    k::accumulate(buf, |j| {
                        let b = j / (l * w);
                        g[j] * sv.data()[b * w + j % w]
                    })
                });
                self.add_into(s, |buf| {
                    for b in 0..bsz {
                        for t in 0..l {
                            for jw in 0..w {
                                let j = (b * l + t) * w + jw;
                                buf[b * w + jw] = buf[b * w + jw] + g[j] * xv.data()[j];
                            }
                        }
                    }
                });
            }
            &Node::Matmul { a, b } => {
                let (m, kk) = as_rows(self.vals[a.0].shape());
                let n = self.vals[b.0].shape()[1];
                let (av, bv) = (val!(a), val!(b));
                self.add_into(a, |buf| k::mm_nt(m, n, kk, g, bv.data(), buf, E::one()));
                self.add_into(b, |buf| k::mm_tn(kk, m, n, av.data(), g, buf, E::one()));
            }
            &Node::MatmulNT { a, b } => {
                let s = self.vals[a.0].shape();
                let (m, kk) = (s[0], s[1]);
                let n = self.vals[b.0].shape()[0];
                let (av, bv) = (val!(a), val!(b));
                // C = A B^T: dA = G B ; dB = G^T A
                self.add_into(a, |buf| k::mm_nn(m, n, kk, g, bv.data(), buf, E::one()));
                self.add_into(b, |buf| k::mm_tn(n, m, kk, g, av.data(), buf, E::one()));
            }
            &Node::Bmm { a, b, nt } => {
                let sa = self.vals[a.0].shape().to_vec();
                let sb = self.vals[b.0].shape().to_vec();
                let (bt, m, kk) = (sa[0], sa[1], sa[2]);
                let n = if nt { sb[1] } else { sb[2] };
                let (av, bv) = (val!(a), val!(b));
                if nt {
                    // C_i = A_i B_i^T: dA_i = G_i B_i ; dB_i = G_i^T A_i
                    self.add_into(a, |buf| {
                        for t in 0..bt {
                            k::mm_nn(m, n, kk, &g[t * m * n..(t + 1) * m * n], &bv.data()[t * n * kk..(t + 1) * n * kk], &mut buf[t * m * kk..(t + 1) * m * kk], E::one());
                        }
                    });
                    self.add_into(b, |buf| {
                        for t in 0..bt {
                            k::mm_tn(n, m, kk, &g[t * m * n..(t + 1) * m * n], &av.data()[t * m * kk..(t + 1) * m * kk], &mut buf[t * n * kk..(t + 1) * n * kk], E::one());
                        }
                    });
                } else {
                    // C_i = A_i B_i: dA_i = G_i B_i^T ; dB_i = A_i^T G_i
                    self.add_into(a, |buf| {
                        for t in 0..bt {
                            k::mm_nt(m, n, kk, &g[t * m * n..(t + 1) * m * n], &bv.data()[t * kk * n..(t + 1) * kk * n], &mut buf[t * m * kk..(t + 1) * m * kk], E::one());
                        }
                    });
                    self.add_into(b, |buf| {
                        for t in 0..bt {
                            k::mm_tn(kk, m, n, &av.data()[t * m * kk..(t + 1) * m * kk], &g[t * m * n..(t + 1) * m * n], &mut buf[t * kk * n..(t + 1) * kk * n], E::one());
                        }
                    });
                }
            }
            &Node::Transpose2 { x } => {
                let s = self.vals[x.0].shape().to_vec();
                let (m, n) = (s[0], s[1]);
                self.add_into(x, |buf| {
                    for i in 0..m {
                        for j in 0..n {
                            buf[i * n + j] = buf[i * n + j] + g[j * m + i];
                        }
                    }
                });
            }
            &Node::SoftmaxLast { x } => {
                let y = self.vals[i].clone();
                let (_, w) = as_rows(y.shape());
                self.add_into(x, |buf| {
                    for (r, yrow) in y.data().chunks(w).enumerate() {
                        let grow = &g[r * w..(r + 1) * w];
                        let mut dot = E::zero();
                        for j in 0..w {
                            dot = dot + grow[j] * yrow[j];
                        }
                        let b = &mut buf[r * w..(r + 1) * w];
                        for j in 0..w {
                            b[j] = b[j] + yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            &Node::LogSoftmaxLast { x } => {
                let y = self.vals[i].clone();
                let (_, w) = as_rows(y.shape());
                self.add_into(x, |buf| {
                    for (r, yrow) in y.data().chunks(w).enumerate() {
                        let grow = &g[r * w..(r + 1) * w];
                        let mut gsum = E::zero();
                        for j in 0..w {
                            gsum = gsum + grow[j];
                        }
                        let b = &mut buf[r * w..(r + 1) * w];
                        for j in 0..w {
                            b[j] = b[j] + grow[j] - yrow[j].fexp() * gsum;
                        }
                    }
                });
            }
            &Node::Sigmoid { x } => {
                let y = self.vals[i].clone();
                self.add_into(x, |buf| {
                    k::accumulate(buf, |j| {
                        let yv = y.data()[j];
                        g[j] * yv * (E::one() - yv)
                    })
                });
            }
            &Node::Silu { x } => {
                let xv = val!(x);
                self.add_into(x, |buf| {
                    k::accumulate(buf, |j| {
                        let s = sigmoid(xv.data()[j]);
                        g[j] * s * (E::one() + xv.data()[j] * (E::one() - s))
                    })
                });
            }
            &Node::Relu { x } => {
                let xv = val!(x);
                self.add_into(x, |buf| {
                    k::accumulate(buf, |j| if xv.data()[j] > E::zero() { g[j] } else { E::zero() })
                });
            }
            &Node::Softplus { x } => {
                let xv = val!(x);
                self.add_into(x, |buf| k::accumulate(buf, |j| g[j] * sigmoid(xv.data()[j])));
            }
            &Node::Exp { x } => {
                let y = self.vals[i].clone();
                self.add_into(x, |buf| k::accumulate(buf, |j| g[j] * y.data()[j]));
            }
            &Node::Ln { x } => {
                let xv = val!(x);
                self.add_into(x, |buf| k::accumulate(buf, |j| g[j] / xv.data()[j]));
            }
            &Node::Sqrt { x } => {
                let y = self.vals[i].clone();
                let half = E::from_f64(0.5);
                self.add_into(x, |buf| k::accumulate(buf, |j| g[j] * half / y.data()[j]));
            }
            &Node::Square { x } => {
                let xv = val!(x);
                let two = E::from_f64(2.0);
                self.add_into(x, |buf| k::accumulate(buf, |j| g[j] * two * xv.data()[j]));
            }
            &Node::BinEntropy { x } => {
                let xv = val!(x);
                self.add_into(x, |buf| {
                    k::accumulate(buf, |j| {
                        let p = clamp_p(xv.data()[j]);
                        g[j] * ((E::one() - p).ln() - p.ln())
                    })
                });
            }
            &Node::Clamp { x, lo, hi } => {
                let xv = val!(x);
                self.add_into(x, |buf| {
                    k::accumulate(buf, |j| {
                        let v = xv.data()[j];
                        if v > lo && v < hi {
                            g[j]
                        } else {
                            E::zero()
                        }
                    })
                });
            }
            &Node::SumAll { x } => {
                let g0 = g[0];
                self.add_into(x, |buf| k::accumulate(buf, |_| g0));
            }
            &Node::MeanAll { x } => {
                let n = self.vals[x.0].numel();
                let g0 = g[0] / E::from_f64(n as f64);
                self.add_into(x, |buf| k::accumulate(buf, |_| g0));
            }
            &Node::MeanLeading { x } => {
                let (r, w) = as_rows(self.vals[x.0].shape());
                let inv = E::one() / E::from_f64(r as f64);
                self.add_into(x, |buf| k::accumulate(buf, |j| g[j % w] * inv));
            }
            &Node::MeanAxis1 { x } => {
                let s = self.vals[x.0].shape().to_vec();
                let (kk, c) = (s[1], s[2]);
                let inv = E::one() / E::from_f64(kk as f64);
                self.add_into(x, |buf| {
                    k::accumulate(buf, |j| {
                        let b = j / (kk * c);
                        g[b * c + j % c] * inv
                    })
                });
            }
            &Node::MeanAxis { x, axis } => {
                let s = self.vals[x.0].shape().to_vec();
                let inner: usize = s[axis + 1..].iter().product();
                let ext = s[axis];
                let inv = E::one() / E::from_f64(ext as f64);
                self.add_into(x, |buf| {
                    k::accumulate(buf, |j| {
                        let o = j / (ext * inner);
                        let inn = j % inner;
                        g[o * inner + inn] * inv
                    })
                });
            }
            &Node::VarAxis { x, axis } => {
                let s = self.vals[x.0].shape().to_vec();
                let inner: usize = s[axis + 1..].iter().product();
                let ext = s[axis];
                let xv = val!(x);
                let inv = E::one() / E::from_f64(ext as f64);
                let two = E::from_f64(2.0);
                // mean per (outer, inner) recomputed
                let outer: usize = s[..axis].iter().product();
                let mut means = vec![E::zero(); outer * inner];
                for o in 0..outer {
                    for e in 0..ext {
                        for inn in 0..inner {
                            means[o * inner + inn] = means[o * inner + inn] + xv.data()[(o * ext + e) * inner + inn];
                        }
                    }
                    for inn in 0..inner {
                        means[o * inner + inn] = means[o * inner + inn] * inv;
                    }
                }
                self.add_into(x, |buf| {
                    k::accumulate(buf, |j| {
                        let o = j / (ext * inner);
                        let inn = j % inner;
                        let mu = means[o * inner + inn];
                        g[o * inner + inn] * two * (xv.data()[j] - mu) * inv
                    })
                });
            }
            &Node::NormalizeLast { x } => {
                let xv = val!(x);
                let (_, w) = as_rows(xv.shape());
                self.add_into(x, |buf| {
                    for (r, xrow) in xv.data().chunks(w).enumerate() {
                        let grow = &g[r * w..(r + 1) * w];
                        let mut n2 = E::zero();
                        for &v in xrow {
                            n2 = n2 + v * v;
                        }
                        let norm = n2.sqrt();
                        let mut dot = E::zero();
                        for j in 0..w {
                            dot = dot + grow[j] * xrow[j];
                        }
                        let b = &mut buf[r * w..(r + 1) * w];
                        for j in 0..w {
                            b[j] = b[j] + grow[j] / norm - xrow[j] * dot / (norm * norm * norm);
                        }
                    }
                });
            }
            &Node::SteSign { x } => {
                self.add_into(x, |buf| k::accumulate(buf, |j| g[j]));
            }
            &Node::RmsNormLast { x, gamma, eps } => {
                let xv = val!(x);
                let (_, w) = as_rows(xv.shape());
                let gv = gamma.map(|gm| self.vals[gm.0].clone());
                let inv_w = E::one() / E::from_f64(w as f64);
                self.add_into(x, |buf| {
                    for (r, xrow) in xv.data().chunks(w).enumerate() {
                        let grow = &g[r * w..(r + 1) * w];
                        let mut ms = E::zero();
                        for &v in xrow {
                            ms = ms + v * v;
                        }
                        let rms2 = ms * inv_w + eps;
                        let rinv = E::one() / rms2.sqrt();
                        let mut dot = E::zero();
                        for j in 0..w {
                            let ge = match &gv {
                                Some(ga) => grow[j] * ga.data()[j],
                                None => grow[j],
                            };
                            dot = dot + ge * xrow[j];
                        }
                        let b = &mut buf[r * w..(r + 1) * w];
                        for j in 0..w {
                            let ge = match &gv {
                                Some(ga) => grow[j] * ga.data()[j],
                                None => grow[j],
                            };
                            b[j] = b[j] + rinv * (ge - xrow[j] * dot * inv_w / rms2);
                        }
                    }
                });
                if let Some(gm) = gamma {
                    self.add_into(gm, |buf| {
                        for (r, xrow) in xv.data().chunks(w).enumerate() {
                            let grow = &g[r * w..(r + 1) * w];
                            let mut ms = E::zero();
                            for &v in xrow {
                                ms = ms + v * v;
                            }
                            let rinv = E::one() / (ms * inv_w + eps).sqrt();
                            for j in 0..w {
                                buf[j] = buf[j] + grow[j] * xrow[j] * rinv;
                            }
                        }
                    });
                }
            }
            &Node::QkNorm { x, gamma, heads, eps } => {
                let xv = val!(x);
                let s = xv.shape().to_vec();
                let (l, hd) = (s[1], s[2]);
                let gv = self.vals[gamma.0].clone();
                let inv_w = E::one() / E::from_f64(hd as f64);
                self.add_into(x, |buf| {
                    for (r, xrow) in xv.data().chunks(hd).enumerate() {
                        let h = (r / l) % heads;
                        let gam = gv.data()[h];
                        let grow = &g[r * hd..(r + 1) * hd];
                        let mut ms = E::zero();
                        for &v in xrow {
                            ms = ms + v * v;
                        }
                        let rms2 = ms * inv_w + eps;
                        let rinv = E::one() / rms2.sqrt();
                        let mut dot = E::zero();
                        for j in 0..hd {
                            dot = dot + grow[j] * xrow[j];
                        }
                        let b = &mut buf[r * hd..(r + 1) * hd];
                        for j in 0..hd {
                            b[j] = b[j] + gam * rinv * (grow[j] - xrow[j] * dot * inv_w / rms2);
                        }
                    }
                });
                self.add_into(gamma, |buf| {
                    for (r, xrow) in xv.data().chunks(hd).enumerate() {
                        let h = (r / l) % heads;
                        let grow = &g[r * hd..(r + 1) * hd];
                        let mut ms = E::zero();
                        for &v in xrow {
                            ms = ms + v * v;
                        }
                        let rinv = E::one() / (ms * inv_w + eps).sqrt();
                        let mut acc = E::zero();
                        for j in 0..hd {
                            acc = acc + grow[j] * xrow[j] * rinv;
                        }
                        buf[h] = buf[h] + acc;
                    }
                });
            }
            Node::Rope { x, cos, sin } => {
                let x = *x;
                let (cos, sin) = (Arc::clone(cos), Arc::clone(sin));
                let s = self.vals[x.0].shape().to_vec();
                let (l, hd) = (s[1], s[2]);
                let half = hd / 2;
                self.add_into(x, |buf| {
                    for r in 0..buf.len() / hd {
                        let pos = r % l;
                        let tc = &cos[pos * half..(pos + 1) * half];
                        let ts = &sin[pos * half..(pos + 1) * half];
                        let grow = &g[r * hd..(r + 1) * hd];
                        let b = &mut buf[r * hd..(r + 1) * hd];
                        for p in 0..half {
                            let (g0, g1) = (grow[2 * p], grow[2 * p + 1]);
                            b[2 * p] = b[2 * p] + g0 * tc[p] + g1 * ts[p];
                            b[2 * p + 1] = b[2 * p + 1] - g0 * ts[p] + g1 * tc[p];
                        }
                    }
                });
            }
            &Node::SplitHeads { x, heads } => {
                let s = self.vals[x.0].shape().to_vec();
                let (bsz, l, w) = (s[0], s[1], s[2]);
                let hd = w / heads;
                self.add_into(x, |buf| {
                    for b in 0..bsz {
                        for t in 0..l {
                            for h in 0..heads {
                                let src = ((b * heads + h) * l + t) * hd;
                                let dst = (b * l + t) * w + h * hd;
                                for j in 0..hd {
                                    buf[dst + j] = buf[dst + j] + g[src + j];
                                }
                            }
                        }
                    }
                });
            }
            &Node::MergeHeads { x, heads } => {
                let s = self.vals[x.0].shape().to_vec();
                let (bh, l, hd) = (s[0], s[1], s[2]);
                let bsz = bh / heads;
                let w = heads * hd;
                self.add_into(x, |buf| {
                    for b in 0..bsz {
                        for h in 0..heads {
                            for t in 0..l {
                                let dst = ((b * heads + h) * l + t) * hd;
                                let src = (b * l + t) * w + h * hd;
                                for j in 0..hd {
                                    buf[dst + j] = buf[dst + j] + g[src + j];
                                }
                            }
                        }
                    }
                });
            }
            &Node::ConcatAxis1 { a, b } => {
                let sa = self.vals[a.0].shape().to_vec();
                let sb = self.vals[b.0].shape().to_vec();
                let (bsz, la, lb, w) = (sa[0], sa[1], sb[1], sa[2]);
                self.add_into(a, |buf| {
                    for it in 0..bsz {
                        let src = it * (la + lb) * w;
                        for j in 0..la * w {
                            buf[it * la * w + j] = buf[it * la * w + j] + g[src + j];
                        }
                    }
                });
                self.add_into(b, |buf| {
                    for it in 0..bsz {
                        let src = it * (la + lb) * w + la * w;
                        for j in 0..lb * w {
                            buf[it * lb * w + j] = buf[it * lb * w + j] + g[src + j];
                        }
                    }
                });
            }
            &Node::SliceAxis1 { x, start, len } => {
                let s = self.vals[x.0].shape().to_vec();
                let (bsz, l, w) = (s[0], s[1], s[2]);
                self.add_into(x, |buf| {
                    for it in 0..bsz {
                        let dst = (it * l + start) * w;
                        for j in 0..len * w {
                            buf[dst + j] = buf[dst + j] + g[it * len * w + j];
                        }
                    }
                });
            }
            &Node::Repeat0 { x, n } => {
                let m = self.vals[x.0].numel();
                self.add_into(x, |buf| {
                    for rep in 0..n {
                        for j in 0..m {
                            buf[j] = buf[j] + g[rep * m + j];
                        }
                    }
                });
            }
            Node::GatherRows { table, ids } => {
                let table = *table;
                let ids = Arc::clone(ids);
                let w = self.vals[table.0].shape()[1];
                self.add_into(table, |buf| {
                    for (j, &row) in ids.iter().enumerate() {
                        for c in 0..w {
                            buf[row * w + c] = buf[row * w + c] + g[j * w + c];
                        }
                    }
                });
            }
            Node::MulConst { x, c } => {
                let x = *x;
                let c = Arc::clone(c);
                self.add_into(x, |buf| k::accumulate(buf, |j| g[j] * c[j]));
            }
            &Node::MulBScalar { x, s } => {
                let sc = self.vals[s.0].data()[0];
                let xv = val!(x);
                self.add_into(x, |buf| k::accumulate(buf, |j| g[j] * sc));
                self.add_into(s, |buf| {
                    let mut acc = E::zero();
                    for (j, gj) in g.iter().enumerate() {
                        acc = acc + *gj * xv.data()[j];
                    }
                    buf[0] = buf[0] + acc;
                });
            }
            &Node::Reshape { x } => {
                self.add_into(x, |buf| k::accumulate(buf, |j| g[j]));
            }
            Node::Reindex { x, map, items } => {
                let x = *x;
                let items = *items;
                let map = Arc::clone(map);
                let item_len = self.vals[x.0].numel() / items;
                self.add_into(x, |buf| {
                    for it in 0..items {
                        let go = &g[it * map.len()..(it + 1) * map.len()];
                        let bo = &mut buf[it * item_len..(it + 1) * item_len];
                        for (j, &m) in map.iter().enumerate() {
                            bo[m] = bo[m] + go[j];
                        }
                    }
                });
            }
            &Node::Conv2d { x, w, b, stride, pad } => {
                let dims = k::ConvDims::new(self.vals[x.0].shape(), self.vals[w.0].shape(), stride, pad).unwrap();
                let (xv, wv) = (val!(x), val!(w));
                if self.live[x.0] {
                    self.add_into(x, |buf| {
                        k::conv2d_bwd(&dims, xv.data(), wv.data(), g, Some(buf), None, None)
                    });
                }
                if self.live[w.0] {
                    self.add_into(w, |buf| {
                        k::conv2d_bwd(&dims, xv.data(), wv.data(), g, None, Some(buf), None)
                    });
                }
                if let Some(bv) = b {
                    if self.live[bv.0] {
                        self.add_into(bv, |buf| {
                            k::conv2d_bwd(&dims, xv.data(), wv.data(), g, None, None, Some(buf))
                        });
                    }
                }
            }
            &Node::AvgPool2d { x, ksize } => {
                let s = self.vals[x.0].shape().to_vec();
                let (h, w) = (s[2], s[3]);
                let (ho, wo) = (h / ksize, w / ksize);
                let inv = E::one() / E::from_f64((ksize * ksize) as f64);
                self.add_into(x, |buf| {
                    k::accumulate(buf, |j| {
                        let bc = j / (h * w);
                        let rem = j % (h * w);
                        let (y, xx) = (rem / w, rem % w);
                        g[bc * ho * wo + (y / ksize) * wo + xx / ksize] * inv
                    })
                });
            }
        }
    }
}

#[inline]
fn sigmoid<E: Scalar>(x: E) -> E {
    x.fsigmoid()
}

#[inline]
fn softplus<E: Scalar>(x: E) -> E {
    // ln(1 + e^x) = max(x, 0) + ln(1 + e^{-|x|})
    let m = if x > E::zero() { x } else { E::zero() };
    m + ((-(x.abs())).exp() + E::one()).ln()
}

#[inline]
fn clamp_p<E: Scalar>(p: E) -> E {
    let lo = E::from_f64(P_CLAMP);
    let hi = E::one() - lo;
    if p < lo {
        lo
    } else if p > hi {
        hi
    } else {
        p
    }
}

/// Mean and population variance along `axis`, as a pair of tape values.
pub fn norm_stats<E: Scalar>(tape: &mut Tape<E>, x: Var, axis: usize) -> Result<(Var, Var)> {
    let mean = tape.mean_axis(x, axis)?;
    let var = tape.var_axis(x, axis)?;
    Ok((mean, var))
}
