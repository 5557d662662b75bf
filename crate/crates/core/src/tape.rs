//! Reverse-mode differentiation over dynamically shaped f64 tensors.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles and can
//! replay the graph backwards to produce exact analytic gradients. The op set
//! is deliberately small: matrix products (plain and batched), elementwise
//! arithmetic, the activations used by the model, shape plumbing, and two
//! fused per-feature affine maps for the input projection and output head.
//!
//! All stored tensors are standard (row-major contiguous) layout; shape
//! mismatches are programming errors and panic rather than returning errors.

use ndarray::{concatenate, Array, Array2, ArrayD, ArrayView2, Axis, Ix2, Ix3, IxDyn, Slice};

pub type Tensor = ArrayD<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// `[m,k] @ [k,n]`
    Matmul { a: Var, b: Var },
    /// `[B,m,k] @ [B,k,n]`, batched over the leading axis
    Bmm { a: Var, b: Var },
    /// `[B,m,k] @ transpose([B,n,k])`, batched over the leading axis
    BmmT { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: f64 },
    /// `a[..., n] + bias[n]`
    AddBias { a: Var, bias: Var },
    Relu { a: Var },
    Tanh { a: Var },
    /// Row-wise SoftMax along the last axis, with max subtraction.
    SoftmaxLast { a: Var },
    Reshape { a: Var, from: Vec<usize> },
    Permute { a: Var, axes: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    SliceAxis { a: Var, axis: usize, start: usize, len: usize },
    SumAll { a: Var },
    /// `x[N,T,F] * w[F,C] + b[F,C] -> [N,T,F,C]`: per-feature lift of a
    /// scalar signal into C channels.
    ProjFc { x: Var, w: Var, b: Var },
    /// `z[N,T,F,C] . w[F,C] + b[F] -> [N,T,F]`: per-feature readout back to a
    /// scalar signal.
    HeadFc { z: Var, w: Var, b: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by the originating
/// [`Var`]. Vars that gradient flow never reached yield `None`.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

fn as2(t: &Tensor) -> ArrayView2<'_, f64> {
    t.view().into_dimensionality::<Ix2>().expect("rank-2 tensor")
}

fn mm(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    a.dot(&b)
}

fn reshaped(t: &Tensor, shape: &[usize]) -> Tensor {
    let flat: Vec<f64> = t.as_slice().expect("standard layout").to_vec();
    Array::from_shape_vec(IxDyn(shape), flat).expect("element count preserved")
}

fn standardized(t: Tensor) -> Tensor {
    if t.is_standard_layout() {
        t
    } else {
        let shape = t.shape().to_vec();
        let flat: Vec<f64> = t.iter().cloned().collect();
        Array::from_shape_vec(IxDyn(&shape), flat).unwrap()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Extracts a 0-dimensional node's value.
    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert!(t.len() == 1, "scalar() on tensor of {} elements", t.len());
        *t.iter().next().unwrap()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.is_standard_layout());
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Inserts a gradient-bearing leaf (a trainable parameter).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(standardized(value), Op::Leaf, true)
    }

    /// Inserts a constant leaf (inputs, masks, fixed transition matrices).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(standardized(value), Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (as2(self.value(a)), as2(self.value(b)));
        assert_eq!(va.ncols(), vb.nrows(), "matmul inner dimensions");
        let out = mm(va, vb).into_dyn();
        let req = self.requires(a) || self.requires(b);
        self.push(out, Op::Matmul { a, b }, req)
    }

    fn bmm_like(&mut self, a: Var, b: Var, transpose_b: bool) -> Var {
        let va = self.value(a).view().into_dimensionality::<Ix3>().unwrap();
        let vb = self.value(b).view().into_dimensionality::<Ix3>().unwrap();
        assert_eq!(va.shape()[0], vb.shape()[0], "batch sizes");
        let (bsz, m) = (va.shape()[0], va.shape()[1]);
        let n = if transpose_b {
            assert_eq!(va.shape()[2], vb.shape()[2], "bmm_t inner dimensions");
            vb.shape()[1]
        } else {
            assert_eq!(va.shape()[2], vb.shape()[1], "bmm inner dimensions");
            vb.shape()[2]
        };
        let mut out = Array::zeros((bsz, m, n));
        for i in 0..bsz {
            let ai = va.index_axis(Axis(0), i);
            let bi = vb.index_axis(Axis(0), i);
            let prod = if transpose_b {
                ai.dot(&bi.t())
            } else {
                ai.dot(&bi)
            };
            out.index_axis_mut(Axis(0), i).assign(&prod);
        }
        let req = self.requires(a) || self.requires(b);
        let op = if transpose_b {
            Op::BmmT { a, b }
        } else {
            Op::Bmm { a, b }
        };
        self.push(out.into_dyn(), op, req)
    }

    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        self.bmm_like(a, b, false)
    }

    pub fn bmm_t(&mut self, a: Var, b: Var) -> Var {
        self.bmm_like(a, b, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shapes");
        let out = self.value(a) + self.value(b);
        let req = self.requires(a) || self.requires(b);
        self.push(out, Op::Add { a, b }, req)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "sub shapes");
        let out = self.value(a) - self.value(b);
        let req = self.requires(a) || self.requires(b);
        self.push(out, Op::Sub { a, b }, req)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul shapes");
        let out = self.value(a) * self.value(b);
        let req = self.requires(a) || self.requires(b);
        self.push(out, Op::Mul { a, b }, req)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).mapv(|x| x * factor);
        let req = self.requires(a);
        self.push(out, Op::Scale { a, factor }, req)
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let n = *self.value(a).shape().last().expect("non-scalar");
        assert_eq!(self.value(bias).shape(), [n], "bias length");
        let out = self.value(a) + self.value(bias);
        let req = self.requires(a) || self.requires(bias);
        self.push(out, Op::AddBias { a, bias }, req)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(0.0));
        let req = self.requires(a);
        self.push(out, Op::Relu { a }, req)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        let req = self.requires(a);
        self.push(out, Op::Tanh { a }, req)
    }

    /// SoftMax along the last axis. An all-zero row (post max-subtraction all
    /// entries equal) yields the uniform row, never NaN.
    pub fn softmax_last(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let last = out.ndim() - 1;
        for mut lane in out.lanes_mut(Axis(last)) {
            let max = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in lane.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in lane.iter_mut() {
                *x /= sum;
            }
        }
        let req = self.requires(a);
        self.push(out, Op::SoftmaxLast { a }, req)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let from = self.value(a).shape().to_vec();
        assert_eq!(
            from.iter().product::<usize>(),
            shape.iter().product::<usize>(),
            "reshape element count"
        );
        let out = reshaped(self.value(a), shape);
        let req = self.requires(a);
        self.push(out, Op::Reshape { a, from }, req)
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let out = standardized(self.value(a).view().permuted_axes(axes).to_owned());
        let req = self.requires(a);
        self.push(
            out,
            Op::Permute {
                a,
                axes: axes.to_vec(),
            },
            req,
        )
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat of zero parts");
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = standardized(concatenate(Axis(axis), &views).expect("concat shapes"));
        let req = parts.iter().any(|p| self.requires(*p));
        self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            req,
        )
    }

    pub fn slice_axis(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let out = standardized(
            self.value(a)
                .slice_axis(Axis(axis), Slice::from(start..start + len))
                .to_owned(),
        );
        let req = self.requires(a);
        self.push(
            out,
            Op::SliceAxis {
                a,
                axis,
                start,
                len,
            },
            req,
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let out = Array::from_elem(IxDyn(&[]), s);
        let req = self.requires(a);
        self.push(out, Op::SumAll { a }, req)
    }

    pub fn project_fc(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xs, ws, bs) = (
            self.value(x).shape().to_vec(),
            self.value(w).shape().to_vec(),
            self.value(b).shape().to_vec(),
        );
        assert_eq!(xs.len(), 3, "project_fc signal rank");
        let (n, t, f) = (xs[0], xs[1], xs[2]);
        let c = ws[1];
        assert_eq!(ws, [f, c], "project_fc weight shape");
        assert_eq!(bs, [f, c], "project_fc bias shape");
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let mut out = Array::zeros(IxDyn(&[n, t, f, c]));
        for i in 0..n {
            for s in 0..t {
                for j in 0..f {
                    let xval = xv[[i, s, j]];
                    for ch in 0..c {
                        out[[i, s, j, ch]] = xval * wv[[j, ch]] + bv[[j, ch]];
                    }
                }
            }
        }
        let req = self.requires(x) || self.requires(w) || self.requires(b);
        self.push(out, Op::ProjFc { x, w, b }, req)
    }

    pub fn head_fc(&mut self, z: Var, w: Var, b: Var) -> Var {
        let (zs, ws, bs) = (
            self.value(z).shape().to_vec(),
            self.value(w).shape().to_vec(),
            self.value(b).shape().to_vec(),
        );
        assert_eq!(zs.len(), 4, "head_fc input rank");
        let (n, t, f, c) = (zs[0], zs[1], zs[2], zs[3]);
        assert_eq!(ws, [f, c], "head_fc weight shape");
        assert_eq!(bs, [f], "head_fc bias shape");
        let zv = self.value(z);
        let wv = self.value(w);
        let bv = self.value(b);
        let mut out = Array::zeros(IxDyn(&[n, t, f]));
        for i in 0..n {
            for s in 0..t {
                for j in 0..f {
                    let mut acc = bv[[j]];
                    for ch in 0..c {
                        acc += zv[[i, s, j, ch]] * wv[[j, ch]];
                    }
                    out[[i, s, j]] = acc;
                }
            }
        }
        let req = self.requires(z) || self.requires(w) || self.requires(b);
        self.push(out, Op::HeadFc { z, w, b }, req)
    }

    /// Runs the backward sweep from `root` (a 0-dimensional node) and returns
    /// gradients for every reachable grad-bearing node.
    pub fn backward(&self, root: Var) -> Gradients {
        assert!(
            self.value(root).len() == 1,
            "backward root must be a scalar node"
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Array::from_elem(
            self.value(root).raw_dim(),
            1.0,
        ));

        for id in (0..self.nodes.len()).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.requires(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => *g += &delta,
            slot => *slot = Some(delta),
        }
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (va, vb, g2) = (as2(self.value(*a)), as2(self.value(*b)), as2(g));
                if self.requires(*a) {
                    self.acc(grads, *a, mm(g2, vb.t()).into_dyn());
                }
                if self.requires(*b) {
                    self.acc(grads, *b, mm(va.t(), g2).into_dyn());
                }
            }
            Op::Bmm { a, b } => {
                let va = self.value(*a).view().into_dimensionality::<Ix3>().unwrap();
                let vb = self.value(*b).view().into_dimensionality::<Ix3>().unwrap();
                let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                let bsz = va.shape()[0];
                if self.requires(*a) {
                    let mut ga = Array::zeros(va.raw_dim());
                    for i in 0..bsz {
                        let prod = gv
                            .index_axis(Axis(0), i)
                            .dot(&vb.index_axis(Axis(0), i).t());
                        ga.index_axis_mut(Axis(0), i).assign(&prod);
                    }
                    self.acc(grads, *a, ga.into_dyn());
                }
                if self.requires(*b) {
                    let mut gb = Array::zeros(vb.raw_dim());
                    for i in 0..bsz {
                        let prod = va
                            .index_axis(Axis(0), i)
                            .t()
                            .dot(&gv.index_axis(Axis(0), i));
                        gb.index_axis_mut(Axis(0), i).assign(&prod);
                    }
                    self.acc(grads, *b, gb.into_dyn());
                }
            }
            Op::BmmT { a, b } => {
                // y_i = a_i b_i^T  =>  ga_i = g_i b_i, gb_i = g_i^T a_i
                let va = self.value(*a).view().into_dimensionality::<Ix3>().unwrap();
                let vb = self.value(*b).view().into_dimensionality::<Ix3>().unwrap();
                let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                let bsz = va.shape()[0];
                if self.requires(*a) {
                    let mut ga = Array::zeros(va.raw_dim());
                    for i in 0..bsz {
                        let prod = gv.index_axis(Axis(0), i).dot(&vb.index_axis(Axis(0), i));
                        ga.index_axis_mut(Axis(0), i).assign(&prod);
                    }
                    self.acc(grads, *a, ga.into_dyn());
                }
                if self.requires(*b) {
                    let mut gb = Array::zeros(vb.raw_dim());
                    for i in 0..bsz {
                        let prod = gv
                            .index_axis(Axis(0), i)
                            .t()
                            .dot(&va.index_axis(Axis(0), i));
                        gb.index_axis_mut(Axis(0), i).assign(&prod);
                    }
                    self.acc(grads, *b, gb.into_dyn());
                }
            }
            Op::Add { a, b } => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub { a, b } => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.mapv(|x| -x));
            }
            Op::Mul { a, b } => {
                if self.requires(*a) {
                    self.acc(grads, *a, g * self.value(*b));
                }
                if self.requires(*b) {
                    self.acc(grads, *b, g * self.value(*a));
                }
            }
            Op::Scale { a, factor } => {
                self.acc(grads, *a, g.mapv(|x| x * factor));
            }
            Op::AddBias { a, bias } => {
                self.acc(grads, *a, g.clone());
                if self.requires(*bias) {
                    let n = *g.shape().last().unwrap();
                    let rows = g.len() / n;
                    let flat = reshaped(g, &[rows, n]);
                    let gb = flat
                        .view()
                        .into_dimensionality::<Ix2>()
                        .unwrap()
                        .sum_axis(Axis(0));
                    self.acc(grads, *bias, gb.into_dyn());
                }
            }
            Op::Relu { a } => {
                let mask = self.value(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                self.acc(grads, *a, g * &mask);
            }
            Op::Tanh { a } => {
                let y = &self.nodes[id].value;
                self.acc(grads, *a, g * &y.mapv(|t| 1.0 - t * t));
            }
            Op::SoftmaxLast { a } => {
                // gin = y * (g - <g, y>_row)
                let y = &self.nodes[id].value;
                let gy = g * y;
                let last = gy.ndim() - 1;
                let dots = gy.sum_axis(Axis(last));
                let mut out = g.clone();
                for (mut lane, dot) in out.lanes_mut(Axis(last)).into_iter().zip(dots.iter()) {
                    for v in lane.iter_mut() {
                        *v -= dot;
                    }
                }
                self.acc(grads, *a, out * y);
            }
            Op::Reshape { a, from } => {
                self.acc(grads, *a, reshaped(g, from));
            }
            Op::Permute { a, axes } => {
                let mut inverse = vec![0usize; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                let back = standardized(g.view().permuted_axes(&inverse[..]).to_owned());
                self.acc(grads, *a, back);
            }
            Op::Concat { parts, axis } => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).shape()[*axis];
                    let piece = standardized(
                        g.slice_axis(Axis(*axis), Slice::from(offset..offset + len))
                            .to_owned(),
                    );
                    self.acc(grads, *p, piece);
                    offset += len;
                }
            }
            Op::SliceAxis {
                a,
                axis,
                start,
                len,
            } => {
                let mut full = Array::zeros(self.value(*a).raw_dim());
                full.slice_axis_mut(Axis(*axis), Slice::from(*start..*start + *len))
                    .assign(g);
                self.acc(grads, *a, full);
            }
            Op::SumAll { a } => {
                let s = *g.iter().next().unwrap();
                self.acc(grads, *a, Array::from_elem(self.value(*a).raw_dim(), s));
            }
            Op::ProjFc { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let sx = xv.shape().to_vec();
                let (n, t, f) = (sx[0], sx[1], sx[2]);
                let c = wv.shape()[1];
                if self.requires(*x) {
                    let mut gx = Array::zeros(xv.raw_dim());
                    for i in 0..n {
                        for s in 0..t {
                            for j in 0..f {
                                let mut acc = 0.0;
                                for ch in 0..c {
                                    acc += g[[i, s, j, ch]] * wv[[j, ch]];
                                }
                                gx[[i, s, j]] = acc;
                            }
                        }
                    }
                    self.acc(grads, *x, gx);
                }
                if self.requires(*w) {
                    let mut gw = Array::zeros(wv.raw_dim());
                    for i in 0..n {
                        for s in 0..t {
                            for j in 0..f {
                                let xval = xv[[i, s, j]];
                                for ch in 0..c {
                                    gw[[j, ch]] += g[[i, s, j, ch]] * xval;
                                }
                            }
                        }
                    }
                    self.acc(grads, *w, gw);
                }
                if self.requires(*b) {
                    let mut gb = Array::zeros(self.value(*b).raw_dim());
                    for i in 0..n {
                        for s in 0..t {
                            for j in 0..f {
                                for ch in 0..c {
                                    gb[[j, ch]] += g[[i, s, j, ch]];
                                }
                            }
                        }
                    }
                    self.acc(grads, *b, gb);
                }
            }
            Op::HeadFc { z, w, b } => {
                let zv = self.value(*z);
                let wv = self.value(*w);
                let sz = zv.shape().to_vec();
                let (n, t, f, c) = (sz[0], sz[1], sz[2], sz[3]);
                if self.requires(*z) {
                    let mut gz = Array::zeros(zv.raw_dim());
                    for i in 0..n {
                        for s in 0..t {
                            for j in 0..f {
                                let gv = g[[i, s, j]];
                                for ch in 0..c {
                                    gz[[i, s, j, ch]] = gv * wv[[j, ch]];
                                }
                            }
                        }
                    }
                    self.acc(grads, *z, gz);
                }
                if self.requires(*w) {
                    let mut gw = Array::zeros(wv.raw_dim());
                    for i in 0..n {
                        for s in 0..t {
                            for j in 0..f {
                                let gv = g[[i, s, j]];
                                for ch in 0..c {
                                    gw[[j, ch]] += gv * zv[[i, s, j, ch]];
                                }
                            }
                        }
                    }
                    self.acc(grads, *w, gw);
                }
                if self.requires(*b) {
                    let mut gb = Array::zeros(self.value(*b).raw_dim());
                    for i in 0..n {
                        for s in 0..t {
                            for j in 0..f {
                                gb[[j]] += g[[i, s, j]];
                            }
                        }
                    }
                    self.acc(grads, *b, gb);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        Array::from_shape_vec(IxDyn(shape), data).unwrap()
    }

    /// Builds `loss = build(tape, leaves)` and compares analytic gradients of
    /// every leaf against central finite differences.
    fn check_grads(build: impl Fn(&mut Tape, &[Var]) -> Var, inputs: &[Tensor]) {
        let eps = 1e-6;
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = build(&mut tape, &vars);
        let grads = tape.backward(root);

        for (idx, input) in inputs.iter().enumerate() {
            let analytic = grads
                .get(vars[idx])
                .unwrap_or_else(|| panic!("no gradient for input {idx}"));
            for flat in 0..input.len() {
                let eval = |delta: f64| {
                    let mut bumped: Vec<Tensor> = inputs.to_vec();
                    bumped[idx].as_slice_mut().unwrap()[flat] += delta;
                    let mut t2 = Tape::new();
                    let vs: Vec<Var> = bumped.iter().map(|t| t2.leaf(t.clone())).collect();
                    let r = build(&mut t2, &vs);
                    t2.scalar(r)
                };
                let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let a = analytic.as_slice().unwrap()[flat];
                let denom = a.abs().max(fd.abs()).max(1e-4);
                assert!(
                    ((a - fd) / denom).abs() < 1e-6,
                    "input {idx} entry {flat}: analytic {a} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = randn(&mut rng, &[3, 4]);
        let b = randn(&mut rng, &[4, 2]);
        check_grads(
            |t, v| {
                let y = t.matmul(v[0], v[1]);
                t.sum_all(y)
            },
            &[a, b],
        );
    }

    #[test]
    fn batched_matmul_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = randn(&mut rng, &[2, 3, 4]);
        let b = randn(&mut rng, &[2, 4, 3]);
        check_grads(
            |t, v| {
                let y = t.bmm(v[0], v[1]);
                let y = t.tanh(y);
                t.sum_all(y)
            },
            &[a.clone(), b.clone()],
        );
        let bt = randn(&mut rng, &[2, 5, 4]);
        check_grads(
            |t, v| {
                let y = t.bmm_t(v[0], v[1]);
                let y = t.tanh(y);
                t.sum_all(y)
            },
            &[a, bt],
        );
    }

    #[test]
    fn softmax_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = randn(&mut rng, &[4, 5]);
        let w = randn(&mut rng, &[4, 5]);
        check_grads(
            |t, v| {
                let y = t.softmax_last(v[0]);
                let y = t.mul(y, v[1]);
                t.sum_all(y)
            },
            &[a, w],
        );
    }

    #[test]
    fn softmax_of_uniform_row_is_uniform() {
        let mut tape = Tape::new();
        let a = tape.constant(Array::zeros(IxDyn(&[2, 4])));
        let y = tape.softmax_last(a);
        for &v in tape.value(y).iter() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_plumbing_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = randn(&mut rng, &[2, 3, 4]);
        let w = randn(&mut rng, &[4, 6]);
        check_grads(
            |t, v| {
                let p = t.permute(v[0], &[1, 0, 2]);
                let r = t.reshape(p, &[6, 4]);
                let y = t.matmul(r, v[1]);
                let y = t.relu(y);
                t.sum_all(y)
            },
            &[a, w],
        );
    }

    #[test]
    fn concat_slice_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = randn(&mut rng, &[2, 3]);
        let b = randn(&mut rng, &[2, 3]);
        check_grads(
            |t, v| {
                let c = t.concat(&[v[0], v[1]], 1);
                let s = t.slice_axis(c, 1, 1, 4);
                let y = t.tanh(s);
                t.sum_all(y)
            },
            &[a, b],
        );
    }

    #[test]
    fn fused_projection_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = randn(&mut rng, &[2, 3, 2]);
        let w = randn(&mut rng, &[2, 4]);
        let b = randn(&mut rng, &[2, 4]);
        check_grads(
            |t, v| {
                let h = t.project_fc(v[0], v[1], v[2]);
                let h = t.tanh(h);
                t.sum_all(h)
            },
            &[x, w, b],
        );
    }

    #[test]
    fn fused_head_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let z = randn(&mut rng, &[2, 3, 2, 4]);
        let w = randn(&mut rng, &[2, 4]);
        let b = randn(&mut rng, &[2]);
        check_grads(
            |t, v| {
                let y = t.head_fc(v[0], v[1], v[2]);
                let y = t.tanh(y);
                t.sum_all(y)
            },
            &[z, w, b],
        );
    }

    #[test]
    fn gradient_accumulates_over_reused_vars() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = randn(&mut rng, &[3, 3]);
        check_grads(
            |t, v| {
                let sq = t.mul(v[0], v[0]);
                let double = t.add(v[0], v[0]);
                let both = t.add(sq, double);
                t.sum_all(both)
            },
            &[a],
        );
    }

    #[test]
    fn add_bias_broadcasts_over_leading_axes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = randn(&mut rng, &[2, 3, 4]);
        let b = randn(&mut rng, &[4]);
        check_grads(
            |t, v| {
                let y = t.add_bias(v[0], v[1]);
                let y = t.tanh(y);
                t.sum_all(y)
            },
            &[a, b],
        );
    }

    #[test]
    fn constants_do_not_receive_gradients() {
        let mut tape = Tape::new();
        let c = tape.constant(Array::from_elem(IxDyn(&[2, 2]), 3.0));
        let l = tape.leaf(Array::from_elem(IxDyn(&[2, 2]), 2.0));
        let y = tape.mul(c, l);
        let root = tape.sum_all(y);
        let grads = tape.backward(root);
        assert!(grads.get(c).is_none());
        let gl = grads.get(l).unwrap();
        for &v in gl.iter() {
            assert!((v - 3.0).abs() < 1e-15);
        }
    }
}
