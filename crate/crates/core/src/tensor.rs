//! Reverse-mode automatic differentiation over dynamic-rank f64 tensors.
//!
//! A [`Var`] is a node in an implicit computation graph. Every operation
//! records its parents and a backward closure; the closure expresses parent
//! gradients *in terms of further tensor ops*, so the backward pass itself is
//! differentiable. That property is what makes second-order terms (the R1
//! gradient penalty) and gradient-of-gradient checks possible without any
//! special casing.
//!
//! Conventions:
//! - All values are `f64` in C-order (standard layout) `ArrayD`.
//! - Elementwise binary ops broadcast numpy-style; their backward reduces
//!   with [`Var::sum_to`], the exact adjoint of broadcasting.
//! - Convolutions are stride-1 with explicit zero padding. The three conv
//!   primitives (forward, input-gradient, kernel-gradient) are mutually
//!   adjoint and close under differentiation.
//! - Nodes whose inputs all have `requires_grad == false` are constants: no
//!   parents are recorded, so inference-only paths build no graph.

use ndarray::{ArrayD, Axis, IxDyn};
use rayon::prelude::*;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

type BackFn = Box<dyn Fn(&[Var], &Var, &Var) -> Vec<Option<Var>>>;

pub struct VarNode {
    id: u64,
    value: ArrayD<f64>,
    parents: Vec<Var>,
    backward: Option<BackFn>,
    requires: bool,
}

impl Drop for VarNode {
    fn drop(&mut self) {
        // Graphs can be thousands of nodes deep; drop iteratively so the
        // recursive Rc drop cannot overflow the stack.
        let mut stack: Vec<Var> = std::mem::take(&mut self.parents);
        while let Some(var) = stack.pop() {
            if let Ok(mut node) = Rc::try_unwrap(var.0) {
                stack.append(&mut node.parents);
            }
        }
    }
}

/// A value in the computation graph. Cheap to clone (shared node).
#[derive(Clone)]
pub struct Var(Rc<VarNode>);

fn new_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

impl Var {
    /// A constant: participates in computation, receives no gradient.
    pub fn constant(value: ArrayD<f64>) -> Var {
        Var(Rc::new(VarNode {
            id: new_id(),
            value: value.as_standard_layout().to_owned(),
            parents: Vec::new(),
            backward: None,
            requires: false,
        }))
    }

    /// A leaf that gradients flow into.
    pub fn leaf(value: ArrayD<f64>) -> Var {
        Var(Rc::new(VarNode {
            id: new_id(),
            value: value.as_standard_layout().to_owned(),
            parents: Vec::new(),
            backward: None,
            requires: true,
        }))
    }

    pub fn scalar(v: f64) -> Var {
        Var::constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    fn from_op(value: ArrayD<f64>, parents: Vec<Var>, backward: BackFn) -> Var {
        let requires = parents.iter().any(|p| p.requires());
        if !requires {
            return Var::constant(value);
        }
        Var(Rc::new(VarNode {
            id: new_id(),
            value: value.as_standard_layout().to_owned(),
            parents,
            backward: Some(backward),
            requires: true,
        }))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn value(&self) -> &ArrayD<f64> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn len(&self) -> usize {
        self.0.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.value.is_empty()
    }

    pub fn requires(&self) -> bool {
        self.0.requires
    }

    /// The scalar payload of a 1-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on non-scalar of shape {:?}", self.shape());
        *self.0.value.iter().next().unwrap()
    }

    /// Cut the graph: same value, no history, no gradient.
    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }

    pub fn all_finite(&self) -> bool {
        self.0.value.iter().all(|v| v.is_finite())
    }

    // ----- elementwise binary ops (numpy broadcasting) -----

    pub fn add(&self, rhs: &Var) -> Var {
        binary_broadcast(self, rhs, |a, b| a + b, |_, _, g| (g.clone(), g.clone()))
    }

    pub fn sub(&self, rhs: &Var) -> Var {
        binary_broadcast(self, rhs, |a, b| a - b, |_, _, g| (g.clone(), g.neg()))
    }

    pub fn mul(&self, rhs: &Var) -> Var {
        binary_broadcast(
            self,
            rhs,
            |a, b| a * b,
            |a, b, g| (g.mul_raw(b), g.mul_raw(a)),
        )
    }

    pub fn div(&self, rhs: &Var) -> Var {
        binary_broadcast(
            self,
            rhs,
            |a, b| a / b,
            |a, b, g| {
                let da = g.div_raw(b);
                let db = g.mul_raw(a).div_raw(&b.mul_raw(b)).neg();
                (da, db)
            },
        )
    }

    // Raw (non-reducing) helpers used inside backward closures where the
    // broadcast reduction is applied by the caller.
    fn mul_raw(&self, rhs: &Var) -> Var {
        self.mul(rhs)
    }
    fn div_raw(&self, rhs: &Var) -> Var {
        self.div(rhs)
    }

    pub fn neg(&self) -> Var {
        let value = self.value().mapv(|v| -v);
        Var::from_op(value, vec![self.clone()], Box::new(|_, _, g| vec![Some(g.neg())]))
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        let value = self.value().mapv(|v| v + c);
        Var::from_op(value, vec![self.clone()], Box::new(|_, _, g| vec![Some(g.clone())]))
    }

    pub fn scale(&self, c: f64) -> Var {
        let value = self.value().mapv(|v| v * c);
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |_, _, g| vec![Some(g.scale(c))]),
        )
    }

    pub fn square(&self) -> Var {
        self.mul(self)
    }

    // ----- elementwise unary ops -----

    pub fn exp(&self) -> Var {
        let value = self.value().mapv(f64::exp);
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(|_, out, g| vec![Some(g.mul(out))]),
        )
    }

    pub fn ln(&self) -> Var {
        let value = self.value().mapv(f64::ln);
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(|p, _, g| vec![Some(g.div(&p[0]))]),
        )
    }

    pub fn sqrt(&self) -> Var {
        let value = self.value().mapv(f64::sqrt);
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(|_, out, g| vec![Some(g.scale(0.5).div(out))]),
        )
    }

    pub fn abs(&self) -> Var {
        let value = self.value().mapv(f64::abs);
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(|p, _, g| {
                // Subgradient: sign(x), with sign(0) = 0. Piecewise constant,
                // so it enters the graph as a constant mask.
                let mask = Var::constant(p[0].value().mapv(|v| {
                    if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                }));
                vec![Some(g.mul(&mask))]
            }),
        )
    }

    pub fn sigmoid(&self) -> Var {
        let value = self.value().mapv(|v| 1.0 / (1.0 + (-v).exp()));
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(|_, out, g| {
                let one_minus = out.neg().add_scalar(1.0);
                vec![Some(g.mul(out).mul(&one_minus))]
            }),
        )
    }

    /// Numerically stable `ln(1 + exp(x))`.
    pub fn softplus(&self) -> Var {
        let value = self
            .value()
            .mapv(|v| if v > 0.0 { v + (-v).exp().ln_1p() } else { v.exp().ln_1p() });
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(|p, _, g| vec![Some(g.mul(&p[0].sigmoid()))]),
        )
    }

    pub fn leaky_relu(&self, slope: f64) -> Var {
        let value = self.value().mapv(|v| if v >= 0.0 { v } else { slope * v });
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |p, _, g| {
                let mask =
                    Var::constant(p[0].value().mapv(|v| if v >= 0.0 { 1.0 } else { slope }));
                vec![Some(g.mul(&mask))]
            }),
        )
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Var {
        let value = self.value().mapv(|v| v.clamp(lo, hi));
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |p, _, g| {
                let mask = Var::constant(
                    p[0].value().mapv(|v| if v > lo && v < hi { 1.0 } else { 0.0 }),
                );
                vec![Some(g.mul(&mask))]
            }),
        )
    }

    // ----- shape ops -----

    pub fn reshape(&self, shape: &[usize]) -> Var {
        let n: usize = shape.iter().product();
        assert_eq!(self.len(), n, "reshape {:?} -> {:?}", self.shape(), shape);
        let value = self
            .value()
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape");
        let orig: Vec<usize> = self.shape().to_vec();
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |_, _, g| vec![Some(g.reshape(&orig))]),
        )
    }

    /// Broadcast to a larger (numpy-compatible) shape.
    pub fn broadcast_to(&self, shape: &[usize]) -> Var {
        let value = self
            .value()
            .broadcast(IxDyn(shape))
            .unwrap_or_else(|| panic!("cannot broadcast {:?} to {:?}", self.shape(), shape))
            .to_owned();
        let orig: Vec<usize> = self.shape().to_vec();
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |_, _, g| vec![Some(g.sum_to(&orig))]),
        )
    }

    /// Reduce by summation down to `shape` (the adjoint of `broadcast_to`).
    pub fn sum_to(&self, shape: &[usize]) -> Var {
        if self.shape() == shape {
            return self.clone();
        }
        let value = reduce_sum_to(self.value(), shape);
        let big: Vec<usize> = self.shape().to_vec();
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |_, _, g| vec![Some(g.broadcast_to(&big))]),
        )
    }

    pub fn sum_all(&self) -> Var {
        self.sum_to(&[])
    }

    pub fn mean_all(&self) -> Var {
        let n = self.len() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Var {
        let value = self
            .value()
            .slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
            .to_owned();
        let full: Vec<usize> = self.shape().to_vec();
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |_, _, g| {
                let mut padded = ArrayD::zeros(IxDyn(&full));
                padded
                    .slice_axis_mut(Axis(axis), ndarray::Slice::from(start..start + len))
                    .assign(g.value());
                vec![Some(Var::from_op(
                    padded,
                    vec![g.clone()],
                    Box::new(move |_, _, gg| vec![Some(gg.slice_axis(axis, start, len))]),
                ))]
            }),
        )
    }

    pub fn concat(axis: usize, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| p.value().view()).collect();
        let value = ndarray::concatenate(Axis(axis), &views).expect("concat shapes");
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        Var::from_op(
            value,
            parts.to_vec(),
            Box::new(move |_, _, g| {
                let mut out = Vec::with_capacity(lens.len());
                let mut off = 0;
                for &l in &lens {
                    out.push(Some(g.slice_axis(axis, off, l)));
                    off += l;
                }
                out
            }),
        )
    }

    // ----- linear algebra -----

    /// 2-D matrix product.
    pub fn matmul(&self, rhs: &Var) -> Var {
        let a = as_mat(self.value());
        let b = as_mat(rhs.value());
        assert_eq!(a.shape()[1], b.shape()[0], "matmul {:?} x {:?}", a.shape(), b.shape());
        let value = a.dot(&b).into_dyn();
        Var::from_op(
            value,
            vec![self.clone(), rhs.clone()],
            Box::new(|p, _, g| {
                let da = if p[0].requires() { Some(g.matmul(&p[1].t())) } else { None };
                let db = if p[1].requires() { Some(p[0].t().matmul(g)) } else { None };
                vec![da, db]
            }),
        )
    }

    /// 2-D transpose.
    pub fn t(&self) -> Var {
        let value = as_mat(self.value()).t().to_owned().into_dyn();
        Var::from_op(value, vec![self.clone()], Box::new(|_, _, g| vec![Some(g.t())]))
    }

    // ----- convolution family (NCHW, stride 1, zero padding) -----

    /// `x: [N,Cin,H,W]`, `w: [Cout,Cin,kh,kw]` -> `[N,Cout,OH,OW]`.
    pub fn conv2d(&self, weight: &Var, pad: usize) -> Var {
        let value = conv2d_raw(self.value(), weight.value(), pad);
        Var::from_op(
            value,
            vec![self.clone(), weight.clone()],
            Box::new(move |p, _, g| {
                let in_hw = (p[0].shape()[2], p[0].shape()[3]);
                let dx = if p[0].requires() {
                    Some(conv2d_input_grad(g, &p[1], pad, in_hw))
                } else {
                    None
                };
                let dw = if p[1].requires() {
                    let kk = (p[1].shape()[2], p[1].shape()[3]);
                    Some(conv2d_kernel_grad(&p[0], g, pad, kk))
                } else {
                    None
                };
                vec![dx, dw]
            }),
        )
    }

    /// Nearest-neighbour 2x upsampling on `[N,C,H,W]`.
    pub fn upsample2x(&self) -> Var {
        let value = upsample2x_raw(self.value());
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(|_, _, g| vec![Some(g.downsample2x_sum())]),
        )
    }

    /// Sums each 2x2 patch (the exact adjoint of `upsample2x`).
    pub fn downsample2x_sum(&self) -> Var {
        let value = downsample2x_sum_raw(self.value());
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(|_, _, g| vec![Some(g.upsample2x())]),
        )
    }

    /// 2x2 average pooling.
    pub fn avgpool2x(&self) -> Var {
        self.downsample2x_sum().scale(0.25)
    }

    // ----- detached helpers -----

    /// Per-row maximum of a 2-D tensor, detached (constant). Used to
    /// stabilize softmax; subtracting a constant does not change gradients.
    pub fn row_max_detached(&self) -> Var {
        let m = as_mat(self.value());
        let n = m.shape()[0];
        let mut out = ArrayD::zeros(IxDyn(&[n, 1]));
        for i in 0..n {
            let mx = m.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            out[[i, 0]] = mx;
        }
        Var::constant(out)
    }

    /// Row-wise softmax of a 2-D tensor.
    pub fn softmax_rows(&self) -> Var {
        let shifted = self.sub(&self.row_max_detached());
        let e = shifted.exp();
        let denom = e.sum_to(&[self.shape()[0], 1]);
        e.div(&denom)
    }

    /// Rows scaled to unit L2 norm (2-D input).
    pub fn l2_normalize_rows(&self, eps: f64) -> Var {
        let sq = self.square().sum_to(&[self.shape()[0], 1]);
        self.div(&sq.add_scalar(eps).sqrt())
    }
}

// Operator sugar on references.
impl std::ops::Add for &Var {
    type Output = Var;
    fn add(self, rhs: &Var) -> Var {
        Var::add(self, rhs)
    }
}
impl std::ops::Sub for &Var {
    type Output = Var;
    fn sub(self, rhs: &Var) -> Var {
        Var::sub(self, rhs)
    }
}
impl std::ops::Mul for &Var {
    type Output = Var;
    fn mul(self, rhs: &Var) -> Var {
        Var::mul(self, rhs)
    }
}
impl std::ops::Div for &Var {
    type Output = Var;
    fn div(self, rhs: &Var) -> Var {
        Var::div(self, rhs)
    }
}
impl std::ops::Neg for &Var {
    type Output = Var;
    fn neg(self) -> Var {
        Var::neg(self)
    }
}

fn binary_broadcast(
    a: &Var,
    b: &Var,
    f: fn(&ArrayD<f64>, &ArrayD<f64>) -> ArrayD<f64>,
    back: fn(&Var, &Var, &Var) -> (Var, Var),
) -> Var {
    let shape = broadcast_shape(a.shape(), b.shape());
    let av = a.value().broadcast(IxDyn(&shape)).expect("broadcast lhs").to_owned();
    let bv = b.value().broadcast(IxDyn(&shape)).expect("broadcast rhs").to_owned();
    let value = f(&av, &bv);
    Var::from_op(
        value,
        vec![a.clone(), b.clone()],
        Box::new(move |p, _, g| {
            let (da, db) = back(&p[0], &p[1], g);
            let da = if p[0].requires() { Some(da.sum_to(p[0].shape())) } else { None };
            let db = if p[1].requires() { Some(db.sum_to(p[1].shape())) } else { None };
            vec![da, db]
        }),
    )
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "incompatible broadcast {:?} vs {:?}",
            a,
            b
        );
        out[i] = da.max(db);
    }
    out
}

fn reduce_sum_to(value: &ArrayD<f64>, target: &[usize]) -> ArrayD<f64> {
    let mut v = value.clone();
    while v.ndim() > target.len() {
        v = v.sum_axis(Axis(0));
    }
    for ax in 0..target.len() {
        if v.shape()[ax] != target[ax] {
            assert_eq!(target[ax], 1, "sum_to {:?} -> {:?}", value.shape(), target);
            v = v.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    v
}

fn as_mat(a: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    a.view().into_dimensionality::<ndarray::Ix2>().expect("2-D tensor expected")
}

// ----- conv kernels -----

fn im2col(x: &ndarray::ArrayView3<'_, f64>, kh: usize, kw: usize, pad: usize) -> ndarray::Array2<f64> {
    let (c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let oh = h + 2 * pad + 1 - kh;
    let ow = w + 2 * pad + 1 - kw;
    let mut cols = ndarray::Array2::<f64>::zeros((c_in * kh * kw, oh * ow));
    for c in 0..c_in {
        for i in 0..kh {
            for j in 0..kw {
                let row = (c * kh + i) * kw + j;
                for oy in 0..oh {
                    let y = (oy + i) as isize - pad as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let xx = (ox + j) as isize - pad as isize;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        cols[[row, oy * ow + ox]] = x[[c, y as usize, xx as usize]];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    cols: &ndarray::Array2<f64>,
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
) -> ndarray::Array3<f64> {
    let oh = h + 2 * pad + 1 - kh;
    let ow = w + 2 * pad + 1 - kw;
    let mut img = ndarray::Array3::<f64>::zeros((c_in, h, w));
    for c in 0..c_in {
        for i in 0..kh {
            for j in 0..kw {
                let row = (c * kh + i) * kw + j;
                for oy in 0..oh {
                    let y = (oy + i) as isize - pad as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let xx = (ox + j) as isize - pad as isize;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        img[[c, y as usize, xx as usize]] += cols[[row, oy * ow + ox]];
                    }
                }
            }
        }
    }
    img
}

fn conv2d_raw(x: &ArrayD<f64>, w: &ArrayD<f64>, pad: usize) -> ArrayD<f64> {
    let (n, c_in, h, ww) = dims4(x);
    let (c_out, c_in_w, kh, kw) = dims4(w);
    assert_eq!(c_in, c_in_w, "conv2d channel mismatch");
    let oh = h + 2 * pad + 1 - kh;
    let ow = ww + 2 * pad + 1 - kw;
    let w_mat = w
        .view()
        .into_shape_with_order((c_out, c_in * kh * kw))
        .expect("kernel reshape");
    let x4 = x.view().into_dimensionality::<ndarray::Ix4>().unwrap();
    let outs: Vec<ndarray::Array2<f64>> = (0..n)
        .into_par_iter()
        .map(|s| {
            let cols = im2col(&x4.index_axis(Axis(0), s), kh, kw, pad);
            w_mat.dot(&cols)
        })
        .collect();
    let mut out = ndarray::Array4::<f64>::zeros((n, c_out, oh, ow));
    for (s, o) in outs.into_iter().enumerate() {
        out.index_axis_mut(Axis(0), s).assign(
            &o.into_shape_with_order((c_out, oh, ow)).unwrap(),
        );
    }
    out.into_dyn()
}

/// Adjoint of `conv2d` in its first argument: given upstream `g` on the
/// output, produce the gradient w.r.t. the input.
fn conv2d_input_grad(g: &Var, w: &Var, pad: usize, in_hw: (usize, usize)) -> Var {
    let value = conv2d_input_grad_raw(g.value(), w.value(), pad, in_hw);
    Var::from_op(
        value,
        vec![g.clone(), w.clone()],
        Box::new(move |p, _, gg| {
            // Bilinear closure: d/dg is the forward conv, d/dw is the kernel
            // gradient with the roles of (x, g) filled by (gg, g).
            let dg = if p[0].requires() { Some(gg.conv2d(&p[1], pad)) } else { None };
            let dw = if p[1].requires() {
                let kk = (p[1].shape()[2], p[1].shape()[3]);
                Some(conv2d_kernel_grad(gg, &p[0], pad, kk))
            } else {
                None
            };
            vec![dg, dw]
        }),
    )
}

fn conv2d_input_grad_raw(
    g: &ArrayD<f64>,
    w: &ArrayD<f64>,
    pad: usize,
    in_hw: (usize, usize),
) -> ArrayD<f64> {
    let (n, c_out, oh, ow) = dims4(g);
    let (c_out_w, c_in, kh, kw) = dims4(w);
    assert_eq!(c_out, c_out_w, "input_grad channel mismatch");
    let (h, wid) = in_hw;
    let w_mat = w
        .view()
        .into_shape_with_order((c_out, c_in * kh * kw))
        .unwrap();
    let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
    let outs: Vec<ndarray::Array3<f64>> = (0..n)
        .into_par_iter()
        .map(|s| {
            let g_mat = g4
                .index_axis(Axis(0), s)
                .into_shape_with_order((c_out, oh * ow))
                .unwrap()
                .to_owned();
            let cols = w_mat.t().dot(&g_mat);
            col2im(&cols, c_in, h, wid, kh, kw, pad)
        })
        .collect();
    let mut out = ndarray::Array4::<f64>::zeros((n, c_in, h, wid));
    for (s, o) in outs.into_iter().enumerate() {
        out.index_axis_mut(Axis(0), s).assign(&o);
    }
    out.into_dyn()
}

/// Adjoint of `conv2d` in its second argument: gradient w.r.t. the kernel.
fn conv2d_kernel_grad(x: &Var, g: &Var, pad: usize, khw: (usize, usize)) -> Var {
    let value = conv2d_kernel_grad_raw(x.value(), g.value(), pad, khw);
    Var::from_op(
        value,
        vec![x.clone(), g.clone()],
        Box::new(move |p, out, gg| {
            let in_hw = (p[0].shape()[2], p[0].shape()[3]);
            let _ = out;
            let dx = if p[0].requires() {
                Some(conv2d_input_grad(&p[1], gg, pad, in_hw))
            } else {
                None
            };
            let dg = if p[1].requires() { Some(p[0].conv2d(gg, pad)) } else { None };
            vec![dx, dg]
        }),
    )
}

fn conv2d_kernel_grad_raw(
    x: &ArrayD<f64>,
    g: &ArrayD<f64>,
    pad: usize,
    khw: (usize, usize),
) -> ArrayD<f64> {
    let (n, c_in, _h, _w) = dims4(x);
    let (ng, c_out, oh, ow) = dims4(g);
    assert_eq!(n, ng, "kernel_grad batch mismatch");
    let (kh, kw) = khw;
    let x4 = x.view().into_dimensionality::<ndarray::Ix4>().unwrap();
    let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
    let partials: Vec<ndarray::Array2<f64>> = (0..n)
        .into_par_iter()
        .map(|s| {
            let cols = im2col(&x4.index_axis(Axis(0), s), kh, kw, pad);
            let g_mat = g4
                .index_axis(Axis(0), s)
                .into_shape_with_order((c_out, oh * ow))
                .unwrap()
                .to_owned();
            g_mat.dot(&cols.t())
        })
        .collect();
    // Fixed-order reduction keeps the result bit-reproducible.
    let mut acc = ndarray::Array2::<f64>::zeros((c_out, c_in * kh * kw));
    for p in partials {
        acc += &p;
    }
    acc.into_shape_with_order((c_out, c_in, kh, kw)).unwrap().into_dyn()
}

fn upsample2x_raw(x: &ArrayD<f64>) -> ArrayD<f64> {
    let (n, c, h, w) = dims4(x);
    let x4 = x.view().into_dimensionality::<ndarray::Ix4>().unwrap();
    let mut out = ndarray::Array4::<f64>::zeros((n, c, 2 * h, 2 * w));
    for s in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let v = x4[[s, ch, y, xx]];
                    out[[s, ch, 2 * y, 2 * xx]] = v;
                    out[[s, ch, 2 * y, 2 * xx + 1]] = v;
                    out[[s, ch, 2 * y + 1, 2 * xx]] = v;
                    out[[s, ch, 2 * y + 1, 2 * xx + 1]] = v;
                }
            }
        }
    }
    out.into_dyn()
}

fn downsample2x_sum_raw(x: &ArrayD<f64>) -> ArrayD<f64> {
    let (n, c, h, w) = dims4(x);
    assert!(h % 2 == 0 && w % 2 == 0, "downsample2x on odd size {:?}", x.shape());
    let x4 = x.view().into_dimensionality::<ndarray::Ix4>().unwrap();
    let mut out = ndarray::Array4::<f64>::zeros((n, c, h / 2, w / 2));
    for s in 0..n {
        for ch in 0..c {
            for y in 0..h / 2 {
                for xx in 0..w / 2 {
                    out[[s, ch, y, xx]] = x4[[s, ch, 2 * y, 2 * xx]]
                        + x4[[s, ch, 2 * y, 2 * xx + 1]]
                        + x4[[s, ch, 2 * y + 1, 2 * xx]]
                        + x4[[s, ch, 2 * y + 1, 2 * xx + 1]];
                }
            }
        }
    }
    out.into_dyn()
}

fn dims4(a: &ArrayD<f64>) -> (usize, usize, usize, usize) {
    assert_eq!(a.ndim(), 4, "expected 4-D tensor, got {:?}", a.shape());
    (a.shape()[0], a.shape()[1], a.shape()[2], a.shape()[3])
}

// ----- backward pass -----

/// Gradients of a scalar `root` with respect to each of `wrt`.
///
/// The returned gradients are themselves graph nodes, so they can be
/// differentiated again (used by the R1 penalty).
pub fn gradients(root: &Var, wrt: &[&Var]) -> Vec<Option<Var>> {
    assert_eq!(root.len(), 1, "gradients() needs a scalar root");
    let seed = Var::constant(ArrayD::from_elem(IxDyn(root.shape()), 1.0));
    gradients_seeded(root, &seed, wrt)
}

/// Like [`gradients`] but with an explicit seed (vector-Jacobian product).
pub fn gradients_seeded(root: &Var, seed: &Var, wrt: &[&Var]) -> Vec<Option<Var>> {
    use std::collections::HashMap;

    // Collect the requiring ancestry of root.
    let mut nodes: Vec<Var> = Vec::new();
    let mut seen: std::collections::HashSet<u64> = std::collections::HashSet::new();
    let mut stack = vec![root.clone()];
    while let Some(v) = stack.pop() {
        if !v.requires() || !seen.insert(v.id()) {
            continue;
        }
        for p in &v.0.parents {
            stack.push(p.clone());
        }
        nodes.push(v);
    }
    // Creation order is topological: parents always have smaller ids.
    nodes.sort_by(|a, b| b.id().cmp(&a.id()));

    let mut grads: HashMap<u64, Var> = HashMap::new();
    grads.insert(root.id(), seed.clone());

    for node in &nodes {
        let Some(g) = grads.get(&node.id()).cloned() else { continue };
        let Some(back) = node.0.backward.as_ref() else { continue };
        let parent_grads = back(&node.0.parents, node, &g);
        debug_assert_eq!(parent_grads.len(), node.0.parents.len());
        for (p, pg) in node.0.parents.iter().zip(parent_grads) {
            let Some(pg) = pg else { continue };
            if !p.requires() {
                continue;
            }
            debug_assert_eq!(
                pg.shape(),
                p.shape(),
                "gradient shape mismatch for node {}",
                p.id()
            );
            grads
                .entry(p.id())
                .and_modify(|acc| *acc = acc.add(&pg))
                .or_insert(pg);
        }
    }

    wrt.iter().map(|v| grads.get(&v.id()).cloned()).collect()
}

/// Convenience: gradient values (detached), zeros where unreachable.
pub fn grad_values(root: &Var, wrt: &[&Var]) -> Vec<ArrayD<f64>> {
    gradients(root, wrt)
        .into_iter()
        .zip(wrt)
        .map(|(g, v)| match g {
            Some(g) => g.value().clone(),
            None => ArrayD::zeros(IxDyn(v.shape())),
        })
        .collect()
}
