//! Dense row-major tensors and a tape for reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive applied to its [`Var`] handles. Leaves
//! are either differentiable parameters ([`Tape::leaf`]) or constants
//! ([`Tape::constant`]). [`Tape::backward`] replays the recorded operations in
//! exact reverse order and returns a [`Gradients`] table keyed by `Var`.
//!
//! Nodes that do not depend on any differentiable leaf are marked as not
//! requiring a gradient and are skipped entirely during the backward sweep, so
//! a frozen first layer costs nothing on the way back.
//!
//! Elementwise binary ops accept equal shapes, or a right operand whose shape
//! equals the left operand's shape without its leading (batch) dimension.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_slice(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), data.to_vec())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Size of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    Sum(Var),
    Mean(Var),
    SumLastAxis(Var),
    Log(Var),
    Exp(Var),
    Relu(Var),
    Scale(Var, f64),
    ClampMin(Var, f64),
    Softmax(Var),
    LayerNorm { input: Var, inv_std: Vec<f64> },
    Rows { input: Var, start: usize },
    StopGradient,
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of operations since the tape was created.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward sweep.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `var`, or `None` if no recorded path reached it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of `var`, with an all-zero buffer when nothing flowed into it.
    pub fn wrt(&self, var: Var) -> Tensor {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a differentiable parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb || (!sa.is_empty() && &sa[1..] == sb) {
            Ok(())
        } else {
            Err(Error::shape(op, sa, sb))
        }
    }

    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.broadcast_check(op_name, a, b)?;
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let inner = bv.numel();
        let data: Vec<f64> = if inner == 0 {
            Vec::new()
        } else {
            av.data
                .chunks(inner)
                .flat_map(|row| row.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)))
                .collect()
        };
        let out = Tensor {
            shape: av.shape.clone(),
            data,
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            &self.nodes[a.0].value.data,
            false,
            &self.nodes[b.0].value.data,
            false,
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMul(a, b),
            rg,
        ))
    }

    /// Sum of every element, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Mean of every element, as a scalar.
    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = v.data.iter().sum::<f64>() / v.numel().max(1) as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    /// Sums the last axis away: `[.., k] -> [..]`.
    pub fn sum_last_axis(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let k = v.last_dim().max(1);
        let data: Vec<f64> = v.data.chunks(k).map(|r| r.iter().sum()).collect();
        let shape = v.shape[..v.shape.len().saturating_sub(1)].to_vec();
        let rg = self.rg(a);
        self.push(Tensor { shape, data }, Op::SumLastAxis(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if let Some(bad) = v.data.iter().find(|x| !(**x > 0.0) || !x.is_finite()) {
            return Err(Error::NumericDomain {
                op: "log",
                detail: format!("non-positive or non-finite input {bad}"),
            });
        }
        let out = map(v, f64::ln);
        let rg = self.rg(a);
        Ok(self.push(out, Op::Log(a), rg))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = map(self.value(a), f64::exp);
        let rg = self.rg(a);
        self.push(out, Op::Exp(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = map(self.value(a), |x| if x > 0.0 { x } else { 0.0 });
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = map(self.value(a), |x| x * factor);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, factor), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// `max(x, floor)` elementwise; the gradient passes only where `x > floor`.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let out = map(self.value(a), |x| if x > floor { x } else { floor });
        let rg = self.rg(a);
        self.push(out, Op::ClampMin(a, floor), rg)
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if !v.is_finite() {
            return Err(Error::NumericDomain {
                op: "softmax",
                detail: "non-finite logits".into(),
            });
        }
        let k = v.last_dim().max(1);
        let mut data = v.data.clone();
        for row in data.chunks_mut(k) {
            softmax_in_place(row);
        }
        let out = Tensor {
            shape: v.shape.clone(),
            data,
        };
        let rg = self.rg(a);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    /// Normalizes each row over the last axis to zero mean and unit variance
    /// (no affine part): `(x - mean) / sqrt(var + eps)`.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let v = self.value(a);
        let k = v.last_dim().max(1);
        let mut data = v.data.clone();
        let mut inv_std = Vec::with_capacity(data.len() / k);
        for row in data.chunks_mut(k) {
            let mean = row.iter().sum::<f64>() / k as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / k as f64;
            let is = 1.0 / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * is;
            }
            inv_std.push(is);
        }
        let out = Tensor {
            shape: v.shape.clone(),
            data,
        };
        let rg = self.rg(a);
        self.push(out, Op::LayerNorm { input: a, inv_std }, rg)
    }

    /// Rows `start..end` along the leading axis.
    pub fn rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(a);
        if v.shape.is_empty() || start > end || end > v.shape[0] {
            return Err(Error::shape("rows", &v.shape, &[start, end]));
        }
        let inner: usize = v.shape[1..].iter().product();
        let mut shape = v.shape.clone();
        shape[0] = end - start;
        let out = Tensor {
            shape,
            data: v.data[start * inner..end * inner].to_vec(),
        };
        let rg = self.rg(a);
        Ok(self.push(out, Op::Rows { input: a, start }, rg))
    }

    /// Identity on the forward pass; blocks all gradient flow on the way back.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let out = self.value(a).clone();
        self.push(out, Op::StopGradient, false)
    }

    /// Reverse sweep from a single-element `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out_val = self.value(output);
        if out_val.numel() != 1 {
            return Err(Error::shape("backward", &out_val.shape, &[]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.rg(output) {
            grads[output.0] = Some(vec![1.0]);
        }
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape.clone()).collect();
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.filter(|_| n.requires_grad).map(|data| Tensor {
                    shape: n.value.shape.clone(),
                    data,
                })
            })
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.rg(v) {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf | Op::Constant | Op::StopGradient => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| {
                    for row in g.chunks(gb.len().max(1)) {
                        for (d, s) in gb.iter_mut().zip(row) {
                            *d += sign * s;
                        }
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = &self.nodes[a.0].value.data;
                let bv = &self.nodes[b.0].value.data;
                let inner = bv.len().max(1);
                self.accumulate(grads, *a, |ga| {
                    for (i, (d, s)) in ga.iter_mut().zip(g).enumerate() {
                        *d += s * bv[i % inner];
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for (i, (s, x)) in g.iter().zip(av).enumerate() {
                        gb[i % inner] += s * x;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let sa = &self.nodes[a.0].value.shape;
                let sb = &self.nodes[b.0].value.shape;
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let av = &self.nodes[a.0].value.data;
                let bv = &self.nodes[b.0].value.data;
                // dA = dC · Bᵀ, dB = Aᵀ · dC
                self.accumulate(grads, *a, |ga| gemm_acc(m, n, k, g, false, bv, true, ga));
                self.accumulate(grads, *b, |gb| gemm_acc(k, m, n, av, true, g, false, gb));
            }
            Op::Sum(a) => {
                let s = g[0];
                self.accumulate(grads, *a, |ga| ga.iter_mut().for_each(|d| *d += s));
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.numel().max(1) as f64;
                let s = g[0] / n;
                self.accumulate(grads, *a, |ga| ga.iter_mut().for_each(|d| *d += s));
            }
            Op::SumLastAxis(a) => {
                let k = self.nodes[a.0].value.last_dim().max(1);
                self.accumulate(grads, *a, |ga| {
                    for (row, s) in ga.chunks_mut(k).zip(g) {
                        row.iter_mut().for_each(|d| *d += s);
                    }
                });
            }
            Op::Log(a) => {
                let x = &self.nodes[a.0].value.data;
                self.accumulate(grads, *a, |ga| {
                    for ((d, s), x) in ga.iter_mut().zip(g).zip(x) {
                        *d += s / x;
                    }
                });
            }
            Op::Exp(a) => {
                let y = &node.value.data;
                self.accumulate(grads, *a, |ga| {
                    for ((d, s), y) in ga.iter_mut().zip(g).zip(y) {
                        *d += s * y;
                    }
                });
            }
            Op::Relu(a) => {
                let x = &self.nodes[a.0].value.data;
                self.accumulate(grads, *a, |ga| {
                    for ((d, s), x) in ga.iter_mut().zip(g).zip(x) {
                        if *x > 0.0 {
                            *d += s;
                        }
                    }
                });
            }
            Op::Scale(a, f) => {
                self.accumulate(grads, *a, |ga| {
                    for (d, s) in ga.iter_mut().zip(g) {
                        *d += s * f;
                    }
                });
            }
            Op::ClampMin(a, floor) => {
                let x = &self.nodes[a.0].value.data;
                self.accumulate(grads, *a, |ga| {
                    for ((d, s), x) in ga.iter_mut().zip(g).zip(x) {
                        if *x > *floor {
                            *d += s;
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let p = &node.value.data;
                let k = node.value.last_dim().max(1);
                self.accumulate(grads, *a, |ga| {
                    for ((gr, pr), dr) in g.chunks(k).zip(p.chunks(k)).zip(ga.chunks_mut(k)) {
                        let dot: f64 = gr.iter().zip(pr).map(|(s, q)| s * q).sum();
                        for ((d, s), q) in dr.iter_mut().zip(gr).zip(pr) {
                            *d += q * (s - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { input, inv_std } => {
                let y = &node.value.data;
                let k = node.value.last_dim().max(1);
                let kf = k as f64;
                self.accumulate(grads, *input, |ga| {
                    for (((gr, yr), dr), is) in g
                        .chunks(k)
                        .zip(y.chunks(k))
                        .zip(ga.chunks_mut(k))
                        .zip(inv_std)
                    {
                        let mean_g = gr.iter().sum::<f64>() / kf;
                        let mean_gy = gr.iter().zip(yr).map(|(s, y)| s * y).sum::<f64>() / kf;
                        for ((d, s), y) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += is * (s - mean_g - y * mean_gy);
                        }
                    }
                });
            }
            Op::Rows { input, start } => {
                let inner: usize = node.value.shape[1..].iter().product();
                let off = start * inner;
                self.accumulate(grads, *input, |ga| add_into(&mut ga[off..off + g.len()], g));
            }
        }
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor {
        shape: t.shape.clone(),
        data: t.data.iter().map(|&x| f(x)).collect(),
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Stable softmax of one row in place.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

/// `out = op(a) · op(b)` where `op(a)` is `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], at: bool, b: &[f64], bt: bool, out: &mut [f64]) {
    gemm_impl(m, k, n, a, at, b, bt, out, 0.0)
}

#[allow(clippy::too_many_arguments)]
fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], at: bool, b: &[f64], bt: bool, out: &mut [f64]) {
    gemm_impl(m, k, n, a, at, b, bt, out, 1.0)
}

#[allow(clippy::too_many_arguments)]
fn gemm_impl(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    at: bool,
    b: &[f64],
    bt: bool,
    out: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(out.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    // Stored row-major as either (m, k) or (k, m) for a transposed operand.
    let (rsa, csa) = if at { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if bt { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices hold exactly m*k, k*n and m*n elements (asserted
    // above) and the strides describe those row-major layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_slice(shape, data).unwrap()
    }

    #[test]
    fn elementwise_mul() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[4.0, 5.0]));
        let c = tape.mul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[4.0, 10.0]);
    }

    #[test]
    fn sum_of_zeros() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[3, 4, 5]));
        let s = tape.sum(z);
        assert_eq!(tape.value(s).item(), 0.0);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4]));
        let err = tape.add(a, b).unwrap_err();
        match err {
            Error::ShapeMismatch { lhs, rhs, .. } => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4]);
            }
            e => panic!("unexpected {e}"),
        }
        let c = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(tape.matmul(a, c).is_err());
    }

    #[test]
    fn broadcast_over_leading_dim() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let b = tape.leaf(t(&[3], &[10., 20., 30.]));
        let c = tape.mul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[10., 40., 90., 40., 100., 180.]);
        let s = tape.sum(c);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(b).data(), &[5., 7., 9.]);
        assert_eq!(g.wrt(a).data(), &[10., 20., 30., 10., 20., 30.]);
    }

    #[test]
    fn softmax_cases() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[4]));
        let p = tape.softmax(z).unwrap();
        assert_eq!(tape.value(p).data(), &[0.25; 4]);

        for c in [-7.5, 0.0, 3.0, 250.0] {
            let z = tape.constant(t(&[2], &[c, c + 3f64.ln()]));
            let p = tape.softmax(z).unwrap();
            let d = tape.value(p).data();
            assert!((d[0] - 0.25).abs() < 1e-12 && (d[1] - 0.75).abs() < 1e-12);
        }

        let z = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let p = tape.softmax(z).unwrap();
        let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|x| x.exp()).collect();
        let total: f64 = e.iter().sum();
        for (got, want) in tape.value(p).data().iter().zip(&e) {
            assert!(((got - want / total) / (want / total)).abs() < 1e-12);
        }

        let bad = tape.constant(t(&[2], &[f64::NAN, 0.0]));
        assert!(matches!(tape.softmax(bad), Err(Error::NumericDomain { .. })));
        let inf = tape.constant(t(&[2], &[f64::INFINITY, 0.0]));
        assert!(tape.softmax(inf).is_err());
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let sg = tape.stop_gradient(x);
        assert_eq!(tape.value(sg).data(), tape.value(x).data());
        let s = tape.sum(sg);
        let g = tape.backward(s).unwrap();
        let gx = g.wrt(x);
        assert!(gx.data().iter().all(|v| v.to_bits() == 0));

        let prod = tape.mul(x, sg).unwrap();
        let s = tape.sum(prod);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0, 2.0]);
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..40).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut tape = Tape::new();
        let x = tape.constant(t(&[4, 10], &data));
        let y = tape.layer_norm(x, 0.0);
        for row in tape.value(y).data().chunks(10) {
            let m = row.iter().sum::<f64>() / 10.0;
            let v = row.iter().map(|r| (r - m) * (r - m)).sum::<f64>() / 10.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_is_repeatable() {
        let mut tape = Tape::new();
        let w = tape.leaf(t(&[3, 2], &[0.1, -0.2, 0.3, 0.4, -0.5, 0.6]));
        let x = tape.constant(t(&[2, 3], &[1., 2., 3., -1., 0.5, 2.]));
        let h = tape.matmul(x, w).unwrap();
        let p = tape.softmax(h).unwrap();
        let l = tape.log(p).unwrap();
        let s = tape.mean(l);
        let g1 = tape.backward(s).unwrap().wrt(w);
        let g2 = tape.backward(s).unwrap().wrt(w);
        let b1: Vec<u64> = g1.data().iter().map(|v| v.to_bits()).collect();
        let b2: Vec<u64> = g2.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(b1, b2);
    }

    #[test]
    fn backward_needs_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn constants_never_get_gradients() {
        let mut tape = Tape::new();
        let c = tape.constant(t(&[2], &[1.0, 2.0]));
        let x = tape.leaf(t(&[2], &[3.0, 4.0]));
        let y = tape.mul(c, x).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.wrt(x).data(), &[1.0, 2.0]);
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[1.0, 0.0]));
        assert!(tape.log(x).is_err());
    }

    #[test]
    fn rows_slices_leading_axis() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3, 2], &[1., 2., 3., 4., 5., 6.]));
        let r = tape.rows(x, 1, 3).unwrap();
        assert_eq!(tape.value(r).data(), &[3., 4., 5., 6.]);
        let s = tape.sum(r);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[0., 0., 1., 1., 1., 1.]);
        assert!(tape.rows(x, 2, 4).is_err());
    }
}
