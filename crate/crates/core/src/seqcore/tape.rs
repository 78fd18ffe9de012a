//! Reverse-mode differentiation over 2-D matrices.
//!
//! Every node on a [`Tape`] holds a matrix (vectors are `1×n` rows). Nodes are
//! appended in execution order, so replaying the tape backwards from a scalar
//! visits every node after all of its consumers. Parameters are borrowed
//! rather than copied, which lets many short-lived tapes share one
//! [`ParamStore`](super::ParamStore) during a minibatch.

use std::borrow::Cow;

use ndarray::{s, Array2, Axis, Zip};

use super::lstm::{self, LstmCache};
use super::resample::TimeWeights;
use super::Real;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

pub(crate) struct ConvCache<F: Real> {
    x: Var,
    kernel: Var,
    patches: Array2<F>,
    // Input row feeding each (output frame, tap) slot.
    sources: Vec<Option<usize>>,
    taps: usize,
    d_in: usize,
}

pub(crate) struct TConvCache<F: Real> {
    x: Var,
    kernel: Var,
    x_masked: Array2<F>,
    in_valid: Vec<bool>,
    stride: usize,
    taps: usize,
    c_out: usize,
    t_out: usize,
}

pub(crate) enum Op<F: Real> {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Sum(Var),
    Transpose(Var),
    ConcatCols(Var, Var),
    MaskRows(Var, Vec<bool>),
    TimeMix(Var, TimeWeights<F>),
    SelectRow(Var, usize),
    SoftmaxRows(Var),
    Conv(Box<ConvCache<F>>),
    TConv(Box<TConvCache<F>>),
    Lstm(Box<LstmCache<F>>),
}

struct Node<'p, F: Real> {
    value: Cow<'p, Array2<F>>,
    op: Op<F>,
    needs_grad: bool,
}

/// Ordered record of executed operations.
pub struct Tape<'p, F: Real> {
    nodes: Vec<Node<'p, F>>,
}

impl<F: Real> Default for Tape<'_, F> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<F: Real>(op: &'static str, a: &Array2<F>, b: &Array2<F>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::dim(op, format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

impl<'p, F: Real> Tape<'p, F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'p, Array2<F>>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Array2<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(Cow::Owned(value), op, needs_grad)
    }

    /// Borrowed trainable leaf.
    pub fn param(&mut self, value: &'p Array2<F>) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, true)
    }

    /// Owned leaf; `trainable` controls whether it receives a gradient.
    pub fn leaf(&mut self, value: Array2<F>, trainable: bool) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, trainable)
    }

    pub fn constant(&mut self, value: Array2<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Array2<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> F {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(Error::dim("matmul", format!("{:?} x {:?}", va.dim(), vb.dim())));
        }
        let out = va.dot(vb);
        Ok(self.push_op(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `x + b` with the `1×n` row `b` broadcast over every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(b));
        if vb.nrows() != 1 || vb.ncols() != vx.ncols() {
            return Err(Error::dim("add_row", format!("{:?} + {:?}", vx.dim(), vb.dim())));
        }
        let out = vx + vb;
        Ok(self.push_op(out, Op::AddRow(x, b), &[x, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let out = self.value(a) + self.value(b);
        Ok(self.push_op(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let out = self.value(a) - self.value(b);
        Ok(self.push_op(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let out = self.value(a) * self.value(b);
        Ok(self.push_op(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: F) -> Var {
        let out = self.value(a).mapv(|x| x * factor);
        self.push_op(out, Op::Scale(a, factor), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.tanh());
        self.push_op(out, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        self.push_op(out, Op::Sigmoid(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| if x > F::zero() { x } else { F::zero() });
        self.push_op(out, Op::Relu(a), &[a])
    }

    /// Sum of all entries as a `1×1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).sum();
        self.push_op(Array2::from_elem((1, 1), total), Op::Sum(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().to_owned();
        self.push_op(out, Op::Transpose(a), &[a])
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.nrows() != vb.nrows() {
            return Err(Error::dim("concat_cols", format!("{:?} | {:?}", va.dim(), vb.dim())));
        }
        let out = ndarray::concatenate(Axis(1), &[va.view(), vb.view()])
            .expect("row counts checked");
        Ok(self.push_op(out, Op::ConcatCols(a, b), &[a, b]))
    }

    /// Zeroes every row whose mask entry is false.
    pub fn mask_rows(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let mut out = self.value(a).clone();
        if out.nrows() != mask.len() {
            return Err(Error::dim("mask_rows", format!("{} rows, mask {}", out.nrows(), mask.len())));
        }
        for (mut row, &m) in out.rows_mut().into_iter().zip(mask) {
            if !m {
                row.fill(F::zero());
            }
        }
        Ok(self.push_op(out, Op::MaskRows(a, mask.to_vec()), &[a]))
    }

    /// `out[t] = Σ_u w(t,u) · x[u]` with fixed sparse weights.
    pub fn time_mix(&mut self, x: Var, weights: TimeWeights<F>) -> Result<Var> {
        let vx = self.value(x);
        if vx.nrows() != weights.in_len() {
            return Err(Error::dim("time_mix", format!("{} rows, weights expect {}", vx.nrows(), weights.in_len())));
        }
        let out = weights.apply(vx);
        Ok(self.push_op(out, Op::TimeMix(x, weights), &[x]))
    }

    pub fn select_row(&mut self, table: Var, index: usize) -> Result<Var> {
        let vt = self.value(table);
        if index >= vt.nrows() {
            return Err(Error::arg("select_row", format!("row {index} of {}", vt.nrows())));
        }
        let out = vt.slice(s![index..index + 1, ..]).to_owned();
        Ok(self.push_op(out, Op::SelectRow(table, index), &[table]))
    }

    /// Row-wise softmax restricted to the columns where `col_mask` holds.
    /// Masked columns get exactly zero weight.
    pub fn softmax_rows(&mut self, a: Var, col_mask: &[bool]) -> Result<Var> {
        let va = self.value(a);
        if va.ncols() != col_mask.len() {
            return Err(Error::dim("softmax_rows", format!("{} cols, mask {}", va.ncols(), col_mask.len())));
        }
        if !col_mask.iter().any(|&m| m) {
            return Err(Error::EmptyAttentionSupport);
        }
        let mut out = Array2::zeros(va.dim());
        for (row, mut dst) in va.rows().into_iter().zip(out.rows_mut()) {
            let max = row
                .iter()
                .zip(col_mask)
                .filter(|(_, &m)| m)
                .map(|(&x, _)| x)
                .fold(F::neg_infinity(), F::max);
            let mut total = F::zero();
            for ((&x, &m), d) in row.iter().zip(col_mask).zip(dst.iter_mut()) {
                if m {
                    *d = (x - max).exp();
                    total += *d;
                }
            }
            dst.mapv_inplace(|v| v / total);
        }
        Ok(self.push_op(out, Op::SoftmaxRows(a), &[a]))
    }

    /// Strided 1-D convolution over rows via patch extraction.
    ///
    /// `kernel` is `(taps·d_in)×d_out`; tap `j` of output frame `t` reads
    /// input row `t·stride + j − pad_left`. Rows outside the input or with a
    /// false `in_mask` entry contribute zeros.
    pub(crate) fn conv(
        &mut self,
        x: Var,
        kernel: Var,
        in_mask: &[bool],
        stride: usize,
        pad_left: usize,
        out_len: usize,
    ) -> Result<Var> {
        let (vx, vk) = (self.value(x), self.value(kernel));
        let (t_in, d_in) = vx.dim();
        if d_in == 0 || vk.nrows() % d_in != 0 {
            return Err(Error::dim("conv1d", format!("kernel {:?} for input width {d_in}", vk.dim())));
        }
        if in_mask.len() != t_in || stride == 0 {
            return Err(Error::dim("conv1d", format!("{t_in} frames, mask {}, stride {stride}", in_mask.len())));
        }
        let taps = vk.nrows() / d_in;
        let mut patches = Array2::zeros((out_len, taps * d_in));
        let mut sources = Vec::with_capacity(out_len * taps);
        for t in 0..out_len {
            for j in 0..taps {
                let pos = (t * stride + j) as isize - pad_left as isize;
                let src = (pos >= 0 && (pos as usize) < t_in && in_mask[pos as usize]).then_some(pos as usize);
                if let Some(u) = src {
                    patches.slice_mut(s![t, j * d_in..(j + 1) * d_in]).assign(&vx.row(u));
                }
                sources.push(src);
            }
        }
        let out = patches.dot(vk);
        let cache = ConvCache { x, kernel, patches, sources, taps, d_in };
        Ok(self.push_op(out, Op::Conv(Box::new(cache)), &[x, kernel]))
    }

    /// Transposed strided convolution; the exact adjoint of [`Tape::conv`]
    /// with zero padding. `kernel` is `(taps·c_out)×c_in`, laid out like the
    /// conv kernel it transposes. Invalid input rows contribute nothing.
    pub(crate) fn tconv(
        &mut self,
        x: Var,
        kernel: Var,
        in_mask: &[bool],
        stride: usize,
        taps: usize,
    ) -> Result<Var> {
        let (vx, vk) = (self.value(x), self.value(kernel));
        let (t_in, c_in) = vx.dim();
        if vk.ncols() != c_in || taps == 0 || vk.nrows() % taps != 0 {
            return Err(Error::dim("tconv1d", format!("kernel {:?} for input width {c_in}, {taps} taps", vk.dim())));
        }
        if in_mask.len() != t_in || stride == 0 {
            return Err(Error::dim("tconv1d", format!("{t_in} frames, mask {}, stride {stride}", in_mask.len())));
        }
        let c_out = vk.nrows() / taps;
        let t_out = if t_in == 0 { 0 } else { (t_in - 1) * stride + taps };
        let mut x_masked = vx.clone();
        for (mut row, &m) in x_masked.rows_mut().into_iter().zip(in_mask) {
            if !m {
                row.fill(F::zero());
            }
        }
        let z = x_masked.dot(&vk.t());
        let mut out = Array2::zeros((t_out, c_out));
        for t in 0..t_in {
            if !in_mask[t] {
                continue;
            }
            for j in 0..taps {
                let mut dst = out.row_mut(t * stride + j);
                dst += &z.slice(s![t, j * c_out..(j + 1) * c_out]);
            }
        }
        let cache = TConvCache { x, kernel, x_masked, in_valid: in_mask.to_vec(), stride, taps, c_out, t_out };
        Ok(self.push_op(out, Op::TConv(Box::new(cache)), &[x, kernel]))
    }

    /// One LSTM direction over the valid rows of `x`; see [`lstm`].
    pub(crate) fn lstm(
        &mut self,
        x: Var,
        w_ih: Var,
        w_hh: Var,
        bias: Var,
        mask: &[bool],
        reverse: bool,
    ) -> Result<Var> {
        let (out, cache) = lstm::forward(
            self.value(x),
            self.value(w_ih),
            self.value(w_hh),
            self.value(bias),
            mask,
            reverse,
            [x, w_ih, w_hh, bias],
        )?;
        Ok(self.push_op(out, Op::Lstm(Box::new(cache)), &[x, w_ih, w_hh, bias]))
    }

    /// Replays the tape backwards from the `1×1` node `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::dim("backward", format!("loss must be 1x1, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Array2<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, g, &mut grads);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| if matches!(n.op, Op::Leaf) && n.needs_grad { g } else { None })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Array2<F>>], v: Var, g: Array2<F>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: Array2<F>, grads: &mut [Option<Array2<F>>]) {
        let out = &self.nodes[idx].value;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs_grad(*a) {
                    self.accumulate(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.needs_grad(*b) {
                    self.accumulate(grads, *b, self.value(*a).t().dot(&g));
                }
            }
            Op::AddRow(x, b) => {
                if self.needs_grad(*b) {
                    self.accumulate(grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                self.accumulate(grads, *x, g);
            }
            Op::Add(a, b) => {
                if self.needs_grad(*b) {
                    self.accumulate(grads, *b, g.clone());
                }
                self.accumulate(grads, *a, g);
            }
            Op::Sub(a, b) => {
                if self.needs_grad(*b) {
                    self.accumulate(grads, *b, g.mapv(|x| -x));
                }
                self.accumulate(grads, *a, g);
            }
            Op::Mul(a, b) => {
                if self.needs_grad(*a) {
                    self.accumulate(grads, *a, &g * self.value(*b));
                }
                if self.needs_grad(*b) {
                    self.accumulate(grads, *b, &g * self.value(*a));
                }
            }
            Op::Scale(a, factor) => {
                let f = *factor;
                self.accumulate(grads, *a, g.mapv(|x| x * f));
            }
            Op::Tanh(a) => {
                let mut d = g;
                Zip::from(&mut d).and(&**out).for_each(|d, &y| *d = *d * (F::one() - y * y));
                self.accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let mut d = g;
                Zip::from(&mut d).and(&**out).for_each(|d, &y| *d = *d * y * (F::one() - y));
                self.accumulate(grads, *a, d);
            }
            Op::Relu(a) => {
                let mut d = g;
                Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| {
                    if x <= F::zero() {
                        *d = F::zero();
                    }
                });
                self.accumulate(grads, *a, d);
            }
            Op::Sum(a) => {
                let d = Array2::from_elem(self.shape(*a), g[[0, 0]]);
                self.accumulate(grads, *a, d);
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.t().to_owned()),
            Op::ConcatCols(a, b) => {
                let split = self.shape(*a).1;
                if self.needs_grad(*b) {
                    self.accumulate(grads, *b, g.slice(s![.., split..]).to_owned());
                }
                if self.needs_grad(*a) {
                    self.accumulate(grads, *a, g.slice(s![.., ..split]).to_owned());
                }
            }
            Op::MaskRows(a, mask) => {
                let mut d = g;
                for (mut row, &m) in d.rows_mut().into_iter().zip(mask) {
                    if !m {
                        row.fill(F::zero());
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::TimeMix(x, weights) => self.accumulate(grads, *x, weights.apply_transpose(&g)),
            Op::SelectRow(table, index) => {
                let mut d = Array2::zeros(self.shape(*table));
                d.row_mut(*index).assign(&g.row(0));
                self.accumulate(grads, *table, d);
            }
            Op::SoftmaxRows(a) => {
                let mut d = g;
                for (mut drow, arow) in d.rows_mut().into_iter().zip(out.rows()) {
                    let dot = drow.iter().zip(arow.iter()).fold(F::zero(), |acc, (&gi, &ai)| acc + gi * ai);
                    Zip::from(&mut drow).and(&arow).for_each(|gi, &ai| *gi = ai * (*gi - dot));
                }
                self.accumulate(grads, *a, d);
            }
            Op::Conv(cache) => {
                if self.needs_grad(cache.kernel) {
                    self.accumulate(grads, cache.kernel, cache.patches.t().dot(&g));
                }
                if self.needs_grad(cache.x) {
                    let dpatch = g.dot(&self.value(cache.kernel).t());
                    let mut dx = Array2::zeros(self.shape(cache.x));
                    for (slot, src) in cache.sources.iter().enumerate() {
                        if let Some(u) = *src {
                            let (t, j) = (slot / cache.taps, slot % cache.taps);
                            let mut dst = dx.row_mut(u);
                            dst += &dpatch.slice(s![t, j * cache.d_in..(j + 1) * cache.d_in]);
                        }
                    }
                    self.accumulate(grads, cache.x, dx);
                }
            }
            Op::TConv(cache) => {
                let t_in = cache.in_valid.len();
                let c_out = cache.c_out;
                let mut dz = Array2::zeros((t_in, cache.taps * c_out));
                for t in 0..t_in {
                    if !cache.in_valid[t] {
                        continue;
                    }
                    for j in 0..cache.taps {
                        let r = t * cache.stride + j;
                        debug_assert!(r < cache.t_out);
                        dz.slice_mut(s![t, j * c_out..(j + 1) * c_out]).assign(&g.row(r));
                    }
                }
                if self.needs_grad(cache.kernel) {
                    self.accumulate(grads, cache.kernel, dz.t().dot(&cache.x_masked));
                }
                if self.needs_grad(cache.x) {
                    self.accumulate(grads, cache.x, dz.dot(self.value(cache.kernel)));
                }
            }
            Op::Lstm(cache) => {
                let [x, w_ih, w_hh, bias] = cache.inputs;
                let d = lstm::backward(cache, &g, self.value(x), self.value(w_ih), self.value(w_hh));
                self.accumulate(grads, w_ih, d.w_ih);
                self.accumulate(grads, w_hh, d.w_hh);
                self.accumulate(grads, bias, d.bias);
                self.accumulate(grads, x, d.x);
            }
        }
    }
}

/// Gradients of the scalar loss with respect to trainable leaves.
pub struct Gradients<F: Real> {
    grads: Vec<Option<Array2<F>>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient slot of a leaf; `None` for frozen leaves and leaves that
    /// did not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Array2<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}
