//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] evaluates eagerly: every op computes its value when it is
//! recorded, and [`Graph::backward`] replays the tape in reverse. Parameters
//! are borrowed from a [`ParamSet`], so a graph is a read-only view of the
//! model and any number of graphs can share one parameter snapshot.

use crate::error::{shape_err, NnError, Result};
use crate::params::{Gradients, ParamSet};
use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Static geometry of a 2-D convolution over NCHW input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_dims(in_h: usize, in_w: usize, kernel: usize, stride: usize, pad: usize) -> Option<(usize, usize)> {
        if stride == 0 || in_h + 2 * pad < kernel || in_w + 2 * pad < kernel {
            return None;
        }
        Some((
            (in_h + 2 * pad - kernel) / stride + 1,
            (in_w + 2 * pad - kernel) / stride + 1,
        ))
    }

    fn out_hw(&self) -> (usize, usize) {
        Self::out_dims(self.in_h, self.in_w, self.kernel, self.stride, self.pad).unwrap()
    }

    fn patch(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }
}

enum Op<T: Scalar> {
    Input,
    Param(usize),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Option<Vec<T>>,
    },
    LeakyRelu(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, T),
    MulConst(Var, Tensor<T>),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Var, Var),
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LnClamped(Var, T),
    RowNorm(Var),
    SumRows(Var),
    PickCols {
        x: Var,
        idx: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    SumSquares(Var),
    Reshape(Var),
    StopGrad,
}

struct Node<T: Scalar> {
    op: Op<T>,
    value: Option<Tensor<T>>,
    requires_grad: bool,
}

pub struct Graph<'p, T: Scalar = f32> {
    params: &'p ParamSet<T>,
    nodes: Vec<Node<T>>,
    no_grad: bool,
}

impl<'p, T: Scalar> Graph<'p, T> {
    /// Graph whose trainable parameters receive gradients.
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            no_grad: false,
        }
    }

    /// Forward-only graph: nothing requires a gradient and no backward caches
    /// are kept.
    pub fn inference(params: &'p ParamSet<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            no_grad: true,
        }
    }

    pub fn params(&self) -> &'p ParamSet<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(i) => &self.params.by_index(i).1.value,
            _ => node.value.as_ref().expect("node value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn item(&self, v: Var) -> T {
        self.value(v).item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value: Some(value),
            requires_grad: requires_grad && !self.no_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Input, value, false)
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        let index = self.params.index_of(name)?;
        let trainable = self.params.by_index(index).1.trainable;
        self.nodes.push(Node {
            op: Op::Param(index),
            value: None,
            requires_grad: trainable && !self.no_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `a [m,k] x b [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err(format!("matmul {sa:?} x {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(vec![m, n]);
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, out.data_mut(), false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul(a, b), out, rg))
    }

    /// Adds a bias vector of length `n` to every row of `x [.., n]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).as_matrix_dims();
        if self.shape(b) != [cols] {
            return shape_err(format!("bias {:?} for rows of width {cols}", self.shape(b)));
        }
        let mut out = self.value(x).clone();
        let bias = self.value(b).data();
        for r in 0..rows {
            for (o, &bv) in out.data_mut()[r * cols..(r + 1) * cols].iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(Op::AddBias(x, b), out, rg))
    }

    /// Affine layer `x w + b` with weights stored `[in, out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    /// Convolution of `x [B,C,H,W]` with `w [O,C,k,k]` and bias `b [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 4 || sw.len() != 4 || sw[2] != sw[3] || sx[1] != sw[1] || sb != [sw[0]] {
            return shape_err(format!("conv2d input {sx:?}, weight {sw:?}, bias {sb:?}"));
        }
        let geom = ConvGeom {
            batch: sx[0],
            in_ch: sx[1],
            in_h: sx[2],
            in_w: sx[3],
            out_ch: sw[0],
            kernel: sw[2],
            stride,
            pad,
        };
        let Some((oh, ow)) = ConvGeom::out_dims(geom.in_h, geom.in_w, geom.kernel, stride, pad) else {
            return shape_err(format!("conv2d kernel {} stride {stride} pad {pad} on {sx:?}", geom.kernel));
        };
        let p = oh * ow;
        let patch = geom.patch();
        let rows = geom.batch * p;
        let mut cols = vec![T::zero(); rows * patch];
        im2col(self.value(x).data(), &geom, &mut cols);
        let mut y = vec![T::zero(); rows * geom.out_ch];
        gemm(rows, patch, geom.out_ch, &cols, false, self.value(w).data(), true, &mut y, false);
        let bias = self.value(b).data();
        let mut out = Tensor::zeros(vec![geom.batch, geom.out_ch, oh, ow]);
        let od = out.data_mut();
        for bi in 0..geom.batch {
            for pi in 0..p {
                let row = &y[(bi * p + pi) * geom.out_ch..(bi * p + pi + 1) * geom.out_ch];
                for (o, &v) in row.iter().enumerate() {
                    od[(bi * geom.out_ch + o) * p + pi] = v + bias[o];
                }
            }
        }
        let keep_cols = self.rg(w) && !self.no_grad;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols: keep_cols.then_some(cols),
            },
            out,
            rg,
        ))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::lit(slope);
        let out = self.value(x).map(|v| if v > T::zero() { v } else { v * s });
        let rg = self.rg(x);
        self.push(Op::LeakyRelu(x, s), out, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.tanh());
        let rg = self.rg(x);
        self.push(Op::Tanh(x), out, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(Op::Sigmoid(x), out, rg)
    }

    fn zip_op(&mut self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return shape_err(format!("{name} {:?} vs {:?}", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_op(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a, b), out, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_op(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Sub(a, b), out, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_op(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mul(a, b), out, rg))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (a, c) = (T::lit(scale), T::lit(shift));
        let out = self.value(x).map(|v| a * v + c);
        let rg = self.rg(x);
        self.push(Op::Affine(x, a), out, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.affine(x, c, 0.0)
    }

    pub fn one_minus(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 1.0)
    }

    /// Elementwise product with a constant tensor (targets, masks).
    pub fn mul_const(&mut self, x: Var, c: Tensor<T>) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return shape_err(format!("mul_const {:?} vs {:?}", self.shape(x), c.shape()));
        }
        let data = self.value(x).data().iter().zip(c.data()).map(|(&a, &b)| a * b).collect();
        let out = Tensor::new(c.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(Op::MulConst(x, c), out, rg))
    }

    /// Columns `start..start+len` of `x [m,n]`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || len == 0 || start + len > s[1] {
            return shape_err(format!("slice_cols {start}+{len} of {s:?}"));
        }
        let (m, n) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        let out = Tensor::new(vec![m, len], data)?;
        let rg = self.rg(x);
        Ok(self.push(Op::SliceCols { x, start }, out, rg))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return shape_err(format!("concat_cols {sa:?} and {sb:?}"));
        }
        let (m, na, nb) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(m * (na + nb));
        for r in 0..m {
            data.extend_from_slice(&da[r * na..(r + 1) * na]);
            data.extend_from_slice(&db[r * nb..(r + 1) * nb]);
        }
        let out = Tensor::new(vec![m, na + nb], data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::ConcatCols(a, b), out, rg))
    }

    /// Embedding lookup: rows `ids` of `table [V,D]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 || ids.is_empty() {
            return shape_err(format!("gather_rows from {s:?}"));
        }
        let (v, d) = (s[0], s[1]);
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return shape_err(format!("row {bad} out of range for table {s:?}"));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        let rg = self.rg(table);
        Ok(self.push(
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            out,
            rg,
        ))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (rows, cols) = v.as_matrix_dims();
        let mut out = v.clone();
        for r in 0..rows {
            softmax_in_place(&mut out.data_mut()[r * cols..(r + 1) * cols]);
        }
        let rg = self.rg(x);
        self.push(Op::SoftmaxRows(x), out, rg)
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (rows, cols) = v.as_matrix_dims();
        let mut out = v.clone();
        for r in 0..rows {
            let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
            row.iter_mut().for_each(|z| *z -= lse);
        }
        let rg = self.rg(x);
        self.push(Op::LogSoftmaxRows(x), out, rg)
    }

    /// `ln(max(x, eps))`; no gradient flows where the clamp is active.
    pub fn ln_clamped(&mut self, x: Var, eps: f64) -> Var {
        let e = T::lit(eps);
        let out = self.value(x).map(|v| v.max(e).ln());
        let rg = self.rg(x);
        self.push(Op::LnClamped(x, e), out, rg)
    }

    /// Euclidean norm of every row: `[m,n] -> [m]`.
    pub fn row_norm(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (rows, cols) = v.as_matrix_dims();
        let data = (0..rows)
            .map(|r| v.data()[r * cols..(r + 1) * cols].iter().map(|&a| a * a).sum::<T>().sqrt())
            .collect();
        let out = Tensor::vector(data);
        let rg = self.rg(x);
        self.push(Op::RowNorm(x), out, rg)
    }

    /// `[m,n] -> [m]`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (rows, cols) = v.as_matrix_dims();
        let data = (0..rows).map(|r| v.data()[r * cols..(r + 1) * cols].iter().copied().sum()).collect();
        let out = Tensor::vector(data);
        let rg = self.rg(x);
        self.push(Op::SumRows(x), out, rg)
    }

    /// Picks `x[r, idx[r]]` for every row: `[m,n] -> [m]`.
    pub fn pick_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let (rows, cols) = v.as_matrix_dims();
        if idx.len() != rows || idx.iter().any(|&i| i >= cols) {
            return shape_err(format!("pick_cols {idx:?} from {:?}", v.shape()));
        }
        let data = idx.iter().enumerate().map(|(r, &c)| v.data()[r * cols + c]).collect();
        let out = Tensor::vector(data);
        let rg = self.rg(x);
        Ok(self.push(Op::PickCols { x, idx: idx.to_vec() }, out, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(Op::Sum(x), out, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::scalar(v.sum() / T::lit(v.len() as f64));
        let rg = self.rg(x);
        self.push(Op::Mean(x), out, rg)
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum_squares());
        let rg = self.rg(x);
        self.push(Op::SumSquares(x), out, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(Op::Reshape(x), out, rg))
    }

    /// Same value, no gradient path.
    pub fn stop_grad(&mut self, x: Var) -> Var {
        let out = self.value(x).clone();
        self.push(Op::StopGrad, out, false)
    }

    /// Sum of a list of single-element vars.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let mut it = terms.iter();
        let Some(&first) = it.next() else {
            return shape_err("add_all of nothing");
        };
        let mut acc = first;
        for &t in it {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    /// Reverse sweep from a single-element `loss`. Only trainable parameters
    /// reachable from the loss get an entry; everything else stays `None`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return shape_err(format!("loss must have one element, got {:?}", lv.shape()));
        }
        if !lv.is_finite() {
            return Err(NnError::NonFinite("loss".into()));
        }
        let mut out = Gradients::zeros_like(self.params);
        if !self.rg(loss) {
            return Ok(out);
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, g, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn backprop_node(
        &self,
        i: usize,
        g: Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        out: &mut Gradients<T>,
    ) -> Result<()> {
        let y = || self.nodes[i].value.as_ref().expect("node value");
        match &self.nodes[i].op {
            Op::Input | Op::StopGrad => {}
            Op::Param(index) => match &mut out.grads[*index] {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            },
            &Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.rg(a) {
                    let mut da = Tensor::zeros(vec![m, k]);
                    gemm(m, n, k, g.data(), false, self.value(b).data(), true, da.data_mut(), false);
                    accum(grads, a, da);
                }
                if self.rg(b) {
                    let mut db = Tensor::zeros(vec![k, n]);
                    gemm(k, m, n, self.value(a).data(), true, g.data(), false, db.data_mut(), false);
                    accum(grads, b, db);
                }
            }
            &Op::AddBias(x, b) => {
                if self.rg(b) {
                    let (rows, cols) = g.as_matrix_dims();
                    let mut db = vec![T::zero(); cols];
                    for r in 0..rows {
                        for (d, &v) in db.iter_mut().zip(&g.data()[r * cols..(r + 1) * cols]) {
                            *d += v;
                        }
                    }
                    accum(grads, b, Tensor::vector(db));
                }
                if self.rg(x) {
                    accum(grads, x, g);
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let (oh, ow) = geom.out_hw();
                let p = oh * ow;
                let rows = geom.batch * p;
                let patch = geom.patch();
                let oc = geom.out_ch;
                // dY laid out as [B*P, O] to match the im2col rows.
                let mut dy = vec![T::zero(); rows * oc];
                let gd = g.data();
                for bi in 0..geom.batch {
                    for o in 0..oc {
                        let src = &gd[(bi * oc + o) * p..(bi * oc + o + 1) * p];
                        for (pi, &v) in src.iter().enumerate() {
                            dy[(bi * p + pi) * oc + o] = v;
                        }
                    }
                }
                if self.rg(*b) {
                    let mut db = vec![T::zero(); oc];
                    for r in 0..rows {
                        for (d, &v) in db.iter_mut().zip(&dy[r * oc..(r + 1) * oc]) {
                            *d += v;
                        }
                    }
                    accum(grads, *b, Tensor::vector(db));
                }
                if self.rg(*w) {
                    let cols = cols.as_ref().expect("conv cols cached for trainable weights");
                    let mut dw = Tensor::zeros(self.shape(*w).to_vec());
                    gemm(oc, rows, patch, &dy, true, cols, false, dw.data_mut(), false);
                    accum(grads, *w, dw);
                }
                if self.rg(*x) {
                    let mut dcols = vec![T::zero(); rows * patch];
                    gemm(rows, oc, patch, &dy, false, self.value(*w).data(), false, &mut dcols, false);
                    let mut dx = Tensor::zeros(self.shape(*x).to_vec());
                    col2im(&dcols, geom, dx.data_mut());
                    accum(grads, *x, dx);
                }
            }
            &Op::LeakyRelu(x, s) => {
                let xv = self.value(x).data();
                let d = zip_map(&g, xv, |gv, v| if v > T::zero() { gv } else { gv * s });
                accum(grads, x, d);
            }
            &Op::Tanh(x) => {
                let d = zip_map(&g, y().data(), |gv, t| gv * (T::one() - t * t));
                accum(grads, x, d);
            }
            &Op::Sigmoid(x) => {
                let d = zip_map(&g, y().data(), |gv, s| gv * s * (T::one() - s));
                accum(grads, x, d);
            }
            &Op::Add(a, b) => {
                if self.rg(a) {
                    accum(grads, a, g.clone());
                }
                if self.rg(b) {
                    accum(grads, b, g);
                }
            }
            &Op::Sub(a, b) => {
                if self.rg(b) {
                    accum(grads, b, g.map(|v| -v));
                }
                if self.rg(a) {
                    accum(grads, a, g);
                }
            }
            &Op::Mul(a, b) => {
                if self.rg(a) {
                    accum(grads, a, zip_map(&g, self.value(b).data(), |gv, v| gv * v));
                }
                if self.rg(b) {
                    accum(grads, b, zip_map(&g, self.value(a).data(), |gv, v| gv * v));
                }
            }
            &Op::Affine(x, a) => accum(grads, x, g.map(|v| v * a)),
            Op::MulConst(x, c) => accum(grads, *x, zip_map(&g, c.data(), |gv, v| gv * v)),
            &Op::SliceCols { x, start } => {
                let (m, n) = (self.shape(x)[0], self.shape(x)[1]);
                let len = g.shape()[1];
                let mut dx = Tensor::zeros(vec![m, n]);
                for r in 0..m {
                    dx.data_mut()[r * n + start..r * n + start + len]
                        .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                accum(grads, x, dx);
            }
            &Op::ConcatCols(a, b) => {
                let m = g.shape()[0];
                let (na, nb) = (self.shape(a)[1], self.shape(b)[1]);
                let n = na + nb;
                if self.rg(a) {
                    let data = (0..m).flat_map(|r| g.data()[r * n..r * n + na].iter().copied()).collect();
                    accum(grads, a, Tensor::new(vec![m, na], data)?);
                }
                if self.rg(b) {
                    let data = (0..m).flat_map(|r| g.data()[r * n + na..(r + 1) * n].iter().copied()).collect();
                    accum(grads, b, Tensor::new(vec![m, nb], data)?);
                }
            }
            Op::GatherRows { table, ids } => {
                let d = self.shape(*table)[1];
                let mut dt = Tensor::zeros(self.shape(*table).to_vec());
                for (r, &id) in ids.iter().enumerate() {
                    for (t, &v) in dt.data_mut()[id * d..(id + 1) * d].iter_mut().zip(&g.data()[r * d..(r + 1) * d]) {
                        *t += v;
                    }
                }
                accum(grads, *table, dt);
            }
            &Op::SoftmaxRows(x) => {
                let yv = y();
                let (rows, cols) = yv.as_matrix_dims();
                let mut dx = g.clone();
                for r in 0..rows {
                    let ys = &yv.data()[r * cols..(r + 1) * cols];
                    let gs = &g.data()[r * cols..(r + 1) * cols];
                    let dot: T = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
                    for (j, d) in dx.data_mut()[r * cols..(r + 1) * cols].iter_mut().enumerate() {
                        *d = ys[j] * (gs[j] - dot);
                    }
                }
                accum(grads, x, dx);
            }
            &Op::LogSoftmaxRows(x) => {
                let yv = y();
                let (rows, cols) = yv.as_matrix_dims();
                let mut dx = g.clone();
                for r in 0..rows {
                    let ys = &yv.data()[r * cols..(r + 1) * cols];
                    let gs = &g.data()[r * cols..(r + 1) * cols];
                    let total: T = gs.iter().copied().sum();
                    for (j, d) in dx.data_mut()[r * cols..(r + 1) * cols].iter_mut().enumerate() {
                        *d = gs[j] - ys[j].exp() * total;
                    }
                }
                accum(grads, x, dx);
            }
            &Op::LnClamped(x, e) => {
                let d = zip_map(&g, self.value(x).data(), |gv, v| if v > e { gv / v } else { T::zero() });
                accum(grads, x, d);
            }
            &Op::RowNorm(x) => {
                let xv = self.value(x);
                let (rows, cols) = xv.as_matrix_dims();
                let norms = y().data();
                let mut dx = Tensor::zeros(xv.shape().to_vec());
                for r in 0..rows {
                    if norms[r] > T::zero() {
                        let c = g.data()[r] / norms[r];
                        for (d, &v) in dx.data_mut()[r * cols..(r + 1) * cols]
                            .iter_mut()
                            .zip(&xv.data()[r * cols..(r + 1) * cols])
                        {
                            *d = c * v;
                        }
                    }
                }
                accum(grads, x, dx);
            }
            &Op::SumRows(x) => {
                let (rows, cols) = self.value(x).as_matrix_dims();
                let dx = Tensor::from_fn(self.shape(x).to_vec(), |j| g.data()[j / cols]);
                debug_assert_eq!(dx.len(), rows * cols);
                accum(grads, x, dx);
            }
            Op::PickCols { x, idx } => {
                let (_, cols) = self.value(*x).as_matrix_dims();
                let mut dx = Tensor::zeros(self.shape(*x).to_vec());
                for (r, &c) in idx.iter().enumerate() {
                    dx.data_mut()[r * cols + c] = g.data()[r];
                }
                accum(grads, *x, dx);
            }
            &Op::Sum(x) => {
                let gv = g.item();
                accum(grads, x, Tensor::full(self.shape(x).to_vec(), gv));
            }
            &Op::Mean(x) => {
                let n = T::lit(self.value(x).len() as f64);
                accum(grads, x, Tensor::full(self.shape(x).to_vec(), g.item() / n));
            }
            &Op::SumSquares(x) => {
                let gv = g.item();
                let two = T::lit(2.0);
                accum(grads, x, self.value(x).map(|v| two * v * gv));
            }
            &Op::Reshape(x) => {
                let shape = self.shape(x).to_vec();
                accum(grads, x, g.reshape(shape)?);
            }
        }
        Ok(())
    }
}

fn accum<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map<T: Scalar>(g: &Tensor<T>, other: &[T], f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = g.data().iter().zip(other).map(|(&a, &b)| f(a, b)).collect();
    Tensor::new(g.shape().to_vec(), data).expect("same shape")
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for z in row.iter_mut() {
        *z = (*z - max).exp();
        total += *z;
    }
    row.iter_mut().for_each(|z| *z /= total);
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (oh, ow) = g.out_hw();
    let k = g.kernel;
    let patch = g.patch();
    for b in 0..g.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &mut cols[((b * oh + oy) * ow + ox) * patch..][..patch];
                let mut j = 0;
                for c in 0..g.in_ch {
                    let plane = &x[(b * g.in_ch + c) * g.in_h * g.in_w..][..g.in_h * g.in_w];
                    for ky in 0..k {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        for kx in 0..k {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            row[j] = if iy >= 0 && ix >= 0 && (iy as usize) < g.in_h && (ix as usize) < g.in_w {
                                plane[iy as usize * g.in_w + ix as usize]
                            } else {
                                T::zero()
                            };
                            j += 1;
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (oh, ow) = g.out_hw();
    let k = g.kernel;
    let patch = g.patch();
    for b in 0..g.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &cols[((b * oh + oy) * ow + ox) * patch..][..patch];
                let mut j = 0;
                for c in 0..g.in_ch {
                    let base = (b * g.in_ch + c) * g.in_h * g.in_w;
                    for ky in 0..k {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        for kx in 0..k {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < g.in_h && (ix as usize) < g.in_w {
                                dx[base + iy as usize * g.in_w + ix as usize] += row[j];
                            }
                            j += 1;
                        }
                    }
                }
            }
        }
    }
}
