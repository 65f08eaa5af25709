//! Reverse-mode differentiation over a per-invocation tape.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles.
//! Nodes are appended in evaluation order, so reverse index order is a valid
//! topological order for the backward sweep. Tapes are deliberately `!Sync`:
//! one tape belongs to one thread, and independent evaluations each get their
//! own tape.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{invalid, shape_err, Error, Result};
use crate::ops::{self, ConvSpec};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    id: usize,
    tape: u64,
}

enum Op<T> {
    Leaf,
    Conv {
        x: usize,
        w: usize,
        b: Option<usize>,
        spec: ConvSpec,
    },
    Deconv {
        x: usize,
        w: usize,
        b: Option<usize>,
        spec: ConvSpec,
    },
    AvgPool2(usize),
    Resize(usize),
    Relu(usize),
    Sigmoid(usize),
    Concat(Vec<usize>),
    Slice {
        x: usize,
        start: usize,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Abs(usize),
    Clamp {
        x: usize,
        lo: T,
        hi: T,
    },
    Tonemap {
        x: usize,
        mu: T,
    },
    Sum(usize),
    MaskedMean {
        x: usize,
        mask: Tensor<T>,
        count: T,
    },
    Warp {
        img: usize,
        flow: usize,
    },
    Fuse {
        w: usize,
        cands: Vec<usize>,
        eps: T,
    },
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

pub struct Tape<T: Scalar> {
    id: u64,
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records an input. Gradients are accumulated only for leaves with
    /// `requires_grad` set.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push_node(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        let id = self.index(v).expect("var belongs to another tape");
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub fn dims(&self, v: Var) -> Vec<usize> {
        self.value(v).dims().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.index(v)
            .map(|id| self.nodes.borrow()[id].requires_grad)
            .unwrap_or(false)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let id = self.index(v).ok()?;
        self.nodes.borrow()[id].grad.clone()
    }

    pub fn zero_grads(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    fn index(&self, v: Var) -> Result<usize> {
        if v.tape != self.id {
            return Err(Error::Tape("variable was recorded on a different tape".into()));
        }
        Ok(v.id)
    }

    fn push_node(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
            grad: None,
        });
        Var {
            id: nodes.len() - 1,
            tape: self.id,
        }
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, parents: &[usize], name: &str) -> Result<Var> {
        value.check_finite(name)?;
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].requires_grad)
        };
        Ok(self.push_node(value, op, requires_grad))
    }

    fn val(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let (xi, wi) = (self.index(x)?, self.index(w)?);
        let bi = b.map(|b| self.index(b)).transpose()?;
        let bv = bi.map(|i| self.val(i));
        let out = ops::conv2d(&self.val(xi), &self.val(wi), bv.as_deref(), &spec)?;
        let mut parents = vec![xi, wi];
        parents.extend(bi);
        self.push(out, Op::Conv { x: xi, w: wi, b: bi, spec }, &parents, "conv2d")
    }

    pub fn deconv2d(&self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let (xi, wi) = (self.index(x)?, self.index(w)?);
        let bi = b.map(|b| self.index(b)).transpose()?;
        let bv = bi.map(|i| self.val(i));
        let out = ops::deconv2d(&self.val(xi), &self.val(wi), bv.as_deref(), &spec)?;
        let mut parents = vec![xi, wi];
        parents.extend(bi);
        self.push(out, Op::Deconv { x: xi, w: wi, b: bi, spec }, &parents, "deconv2d")
    }

    pub fn avg_pool2(&self, x: Var) -> Result<Var> {
        let xi = self.index(x)?;
        let out = ops::avg_pool2(&self.val(xi))?;
        self.push(out, Op::AvgPool2(xi), &[xi], "avg_pool2")
    }

    pub fn bilinear_resize(&self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xi = self.index(x)?;
        let out = ops::bilinear_resize(&self.val(xi), out_h, out_w)?;
        self.push(out, Op::Resize(xi), &[xi], "bilinear_resize")
    }

    pub fn relu(&self, x: Var) -> Result<Var> {
        let xi = self.index(x)?;
        let out = self.val(xi).map(|v| v.max(T::zero()));
        self.push(out, Op::Relu(xi), &[xi], "relu")
    }

    pub fn sigmoid(&self, x: Var) -> Result<Var> {
        let xi = self.index(x)?;
        let out = self.val(xi).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push(out, Op::Sigmoid(xi), &[xi], "sigmoid")
    }

    pub fn concat_channels(&self, xs: &[Var]) -> Result<Var> {
        let ids = xs.iter().map(|&v| self.index(v)).collect::<Result<Vec<_>>>()?;
        let vals: Vec<_> = ids.iter().map(|&i| self.val(i)).collect();
        let refs: Vec<&Tensor<T>> = vals.iter().map(|v| v.as_ref()).collect();
        let out = Tensor::concat_channels(&refs)?;
        self.push(out, Op::Concat(ids.clone()), &ids, "concat")
    }

    pub fn slice_channels(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xi = self.index(x)?;
        let out = self.val(xi).slice_channels(start, len)?;
        self.push(out, Op::Slice { x: xi, start }, &[xi], "slice")
    }

    fn binary(&self, a: Var, b: Var, f: impl Fn(T, T) -> T, name: &str) -> Result<(usize, usize, Tensor<T>)> {
        let (ai, bi) = (self.index(a)?, self.index(b)?);
        let out = self.val(ai).zip_map(&self.val(bi), f).map_err(|e| match e {
            Error::Shape(m) => shape_err!("{name}: {m}"),
            e => e,
        })?;
        Ok((ai, bi, out))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, out) = self.binary(a, b, |x, y| x + y, "add")?;
        self.push(out, Op::Add(ai, bi), &[ai, bi], "add")
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, out) = self.binary(a, b, |x, y| x - y, "sub")?;
        self.push(out, Op::Sub(ai, bi), &[ai, bi], "sub")
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, out) = self.binary(a, b, |x, y| x * y, "mul")?;
        self.push(out, Op::Mul(ai, bi), &[ai, bi], "mul")
    }

    pub fn scale(&self, x: Var, s: T) -> Result<Var> {
        let xi = self.index(x)?;
        let out = self.val(xi).map(|v| v * s);
        self.push(out, Op::Scale(xi, s), &[xi], "scale")
    }

    pub fn abs(&self, x: Var) -> Result<Var> {
        let xi = self.index(x)?;
        let out = self.val(xi).map(|v| v.abs());
        self.push(out, Op::Abs(xi), &[xi], "abs")
    }

    pub fn clamp(&self, x: Var, lo: T, hi: T) -> Result<Var> {
        if lo > hi {
            return Err(invalid!("clamp bounds reversed: {lo} > {hi}"));
        }
        let xi = self.index(x)?;
        let out = self.val(xi).map(|v| v.max(lo).min(hi));
        self.push(out, Op::Clamp { x: xi, lo, hi }, &[xi], "clamp")
    }

    /// Elementwise μ-law compression `ln(1 + μx) / ln(1 + μ)`; input must be ≥ 0.
    pub fn tonemap(&self, x: Var, mu: T) -> Result<Var> {
        if mu <= T::zero() {
            return Err(invalid!("mu must be positive, got {mu}"));
        }
        let xi = self.index(x)?;
        let out = crate::hdr::tonemap_mu(&self.val(xi), mu)?;
        self.push(out, Op::Tonemap { x: xi, mu }, &[xi], "tonemap")
    }

    pub fn sum(&self, x: Var) -> Result<Var> {
        let xi = self.index(x)?;
        let out = Tensor::scalar(self.val(xi).sum());
        self.push(out, Op::Sum(xi), &[xi], "sum")
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.sum(x)?;
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// Mean of `x` over the elements selected by a binary per-pixel `mask`
    /// (`[N,1,H,W]`, broadcast across channels). Zero when the mask is empty.
    pub fn masked_mean(&self, x: Var, mask: &Tensor<T>) -> Result<Var> {
        let xi = self.index(x)?;
        let xv = self.val(xi);
        let (n, c, h, w) = xv.nchw()?;
        if mask.dims() != [n, 1, h, w] {
            return Err(shape_err!(
                "mask dims {:?} do not match [{n}, 1, {h}, {w}]",
                mask.dims()
            ));
        }
        let plane = h * w;
        let selected = mask.sum() * T::of(c as f64);
        let mut acc = T::zero();
        for b in 0..n {
            let m = &mask.data()[b * plane..][..plane];
            for ch in 0..c {
                let xs = &xv.data()[(b * c + ch) * plane..][..plane];
                acc += xs.iter().zip(m).map(|(&v, &mv)| v * mv).sum::<T>();
            }
        }
        let value = if selected > T::zero() { acc / selected } else { T::zero() };
        self.push(
            Tensor::scalar(value),
            Op::MaskedMean {
                x: xi,
                mask: mask.clone(),
                count: selected,
            },
            &[xi],
            "masked_mean",
        )
    }

    pub fn warp(&self, img: Var, flow: Var) -> Result<Var> {
        let (ii, fi) = (self.index(img)?, self.index(flow)?);
        let out = ops::warp(&self.val(ii), &self.val(fi))?;
        self.push(out, Op::Warp { img: ii, flow: fi }, &[ii, fi], "warp")
    }

    /// Convex per-pixel blend of `cands` by nonnegative weight maps `w` (`[N,K,H,W]`).
    pub fn fuse(&self, w: Var, cands: &[Var], eps: T) -> Result<Var> {
        let wi = self.index(w)?;
        let ids = cands.iter().map(|&v| self.index(v)).collect::<Result<Vec<_>>>()?;
        let vals: Vec<_> = ids.iter().map(|&i| self.val(i)).collect();
        let refs: Vec<&Tensor<T>> = vals.iter().map(|v| v.as_ref()).collect();
        let out = ops::fuse_weighted(&self.val(wi), &refs, eps)?;
        let mut parents = vec![wi];
        parents.extend(&ids);
        self.push(out, Op::Fuse { w: wi, cands: ids, eps }, &parents, "fuse")
    }

    /// Back-propagates from a scalar `loss`, accumulating into the `grad` of
    /// every reachable leaf created with `requires_grad`.
    pub fn backward(&self, loss: Var) -> Result<()> {
        let li = self.index(loss)?;
        let grads = {
            let nodes = self.nodes.borrow();
            let root = &nodes[li];
            if root.value.numel() != 1 {
                return Err(Error::Tape(format!(
                    "loss must be a scalar, got dims {:?}",
                    root.value.dims()
                )));
            }
            if !root.requires_grad {
                return Err(Error::Tape(
                    "loss does not depend on any tensor that requires grad".into(),
                ));
            }
            let mut grads: Vec<Option<Tensor<T>>> = (0..=li).map(|_| None).collect();
            grads[li] = Some(Tensor::full(root.value.dims().to_vec(), T::one()));
            for i in (0..=li).rev() {
                let Some(g) = grads[i].take() else { continue };
                let node = &nodes[i];
                if matches!(node.op, Op::Leaf) {
                    grads[i] = Some(g);
                    continue;
                }
                for (p, pg) in self.node_backward(&nodes, node, &g)? {
                    if !nodes[p].requires_grad {
                        continue;
                    }
                    match &mut grads[p] {
                        Some(acc) => acc
                            .data_mut()
                            .iter_mut()
                            .zip(pg.data())
                            .for_each(|(a, &b)| *a += b),
                        slot => *slot = Some(pg),
                    }
                }
            }
            grads
        };
        let mut nodes = self.nodes.borrow_mut();
        for (i, g) in grads.into_iter().enumerate() {
            let node = &mut nodes[i];
            let (Some(g), Op::Leaf, true) = (g, &node.op, node.requires_grad) else {
                continue;
            };
            match &mut node.grad {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, &b)| *a += b),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn node_backward(
        &self,
        nodes: &[Node<T>],
        node: &Node<T>,
        g: &Tensor<T>,
    ) -> Result<Vec<(usize, Tensor<T>)>> {
        let needs = |i: usize| nodes[i].requires_grad;
        let val = |i: usize| nodes[i].value.as_ref();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, spec } | Op::Deconv { x, w, b, spec } => {
                let want = [needs(*x), needs(*w), b.is_some_and(needs)];
                let grads = if matches!(node.op, Op::Conv { .. }) {
                    ops::conv2d_backward(val(*x), val(*w), spec, g, want)?
                } else {
                    ops::deconv2d_backward(val(*x), val(*w), spec, g, want)?
                };
                out.extend(grads.dx.map(|d| (*x, d)));
                out.extend(grads.dw.map(|d| (*w, d)));
                if let (Some(b), Some(d)) = (b, grads.db) {
                    out.push((*b, d));
                }
            }
            Op::AvgPool2(x) => out.push((*x, ops::avg_pool2_backward(val(*x).dims(), g)?)),
            Op::Resize(x) => out.push((*x, ops::bilinear_resize_backward(val(*x).dims(), g)?)),
            Op::Relu(x) => {
                out.push((*x, val(*x).zip_map(g, |v, d| if v > T::zero() { d } else { T::zero() })?))
            }
            Op::Sigmoid(x) => {
                out.push((*x, node.value.zip_map(g, |s, d| d * s * (T::one() - s))?))
            }
            Op::Concat(ids) => {
                let mut start = 0;
                for &p in ids {
                    let c = val(p).dims()[1];
                    if needs(p) {
                        out.push((p, g.slice_channels(start, c)?));
                    }
                    start += c;
                }
            }
            Op::Slice { x, start } => {
                let xv = val(*x);
                let (n, c, h, w) = xv.nchw()?;
                let len = g.dims()[1];
                let plane = h * w;
                let mut d = Tensor::zeros(xv.dims().to_vec());
                for b in 0..n {
                    let dst = &mut d.data_mut()[(b * c + start) * plane..][..len * plane];
                    dst.copy_from_slice(&g.data()[b * len * plane..][..len * plane]);
                }
                out.push((*x, d));
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.map(|v| -v)));
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    out.push((*a, g.zip_map(val(*b), |d, v| d * v)?));
                }
                if needs(*b) {
                    out.push((*b, g.zip_map(val(*a), |d, v| d * v)?));
                }
            }
            Op::Scale(x, s) => out.push((*x, g.map(|v| v * *s))),
            Op::Abs(x) => out.push((
                *x,
                val(*x).zip_map(g, |v, d| {
                    if v > T::zero() {
                        d
                    } else if v < T::zero() {
                        -d
                    } else {
                        T::zero()
                    }
                })?,
            )),
            Op::Clamp { x, lo, hi } => out.push((
                *x,
                val(*x).zip_map(g, |v, d| if v >= *lo && v <= *hi { d } else { T::zero() })?,
            )),
            Op::Tonemap { x, mu } => {
                let denom = mu.ln_1p();
                out.push((
                    *x,
                    val(*x).zip_map(g, |v, d| d * *mu / ((T::one() + *mu * v) * denom))?,
                ))
            }
            Op::Sum(x) => {
                let s = g.item()?;
                out.push((*x, Tensor::full(val(*x).dims().to_vec(), s)));
            }
            Op::MaskedMean { x, mask, count } => {
                let xv = val(*x);
                let (n, c, h, w) = xv.nchw()?;
                let plane = h * w;
                let mut d = Tensor::zeros(xv.dims().to_vec());
                if *count > T::zero() {
                    let s = g.item()? / *count;
                    for b in 0..n {
                        let m = &mask.data()[b * plane..][..plane];
                        for ch in 0..c {
                            let dst = &mut d.data_mut()[(b * c + ch) * plane..][..plane];
                            dst.iter_mut().zip(m).for_each(|(o, &mv)| *o = s * mv);
                        }
                    }
                }
                out.push((*x, d));
            }
            Op::Warp { img, flow } => {
                let (di, df) = ops::warp_backward(val(*img), val(*flow), g, [needs(*img), needs(*flow)])?;
                out.extend(di.map(|d| (*img, d)));
                out.extend(df.map(|d| (*flow, d)));
            }
            Op::Fuse { w, cands, eps } => {
                let refs: Vec<&Tensor<T>> = cands.iter().map(|&i| val(i)).collect();
                let (dw, dc) = ops::fuse_backward(val(*w), &refs, *eps, g)?;
                out.push((*w, dw));
                out.extend(cands.iter().copied().zip(dc));
            }
        }
        Ok(out)
    }
}
