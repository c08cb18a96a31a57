//! Reverse-mode differentiation over whole-tensor operations.
//!
//! Every op records its inputs by node index; `backward` walks the nodes in
//! reverse and accumulates vector-Jacobian products. Nodes that cannot reach
//! a parameter are never visited.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{self, layer_norm_stats, matmul, matmul_at, matmul_bt, Real, Tensor};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Matmul(usize, usize),
    MatmulBt(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddRow(usize, usize),
    MulRow(usize, usize),
    AxisMask { x: usize, gates: Vec<Option<usize>> },
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Clamp { x: usize, lo: T, hi: T },
    SoftmaxRows(usize),
    LayerNorm {
        x: usize,
        weights: Option<usize>,
        scale: usize,
        shift: usize,
        normalized: Vec<T>,
        rstd: Vec<T>,
        var: Vec<T>,
    },
    Sum(usize),
    Mse { x: usize, target: Tensor<T> },
    GatherRows { table: usize, ids: Vec<usize> },
    Unfold { x: usize, kernel: usize },
    Reshape(usize),
    Select { x: usize, index: usize },
    ScaleByElem { x: usize, v: usize, index: usize },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    is_param: bool,
}

#[derive(Debug)]
pub struct Tape<T> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "variable used on a foreign tape");
        v.index
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            is_param: false,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn needs(&self, xs: &[usize]) -> bool {
        xs.iter().any(|&i| self.nodes[i].needs_grad)
    }

    /// Registers a tensor whose gradient will be requested.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.index].is_param = true;
        v
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[self.idx(v)].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v).data()[0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let out = matmul(&self.nodes[ia].value, &self.nodes[ib].value)?;
        let ng = self.needs(&[ia, ib]);
        Ok(self.push(out, Op::Matmul(ia, ib), ng))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let out = matmul_bt(&self.nodes[ia].value, &self.nodes[ib].value)?;
        let ng = self.needs(&[ia, ib]);
        Ok(self.push(out, Op::MatmulBt(ia, ib), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let out = self.nodes[ia].value.zip_map(&self.nodes[ib].value, "add", |x, y| x + y)?;
        let ng = self.needs(&[ia, ib]);
        Ok(self.push(out, Op::Add(ia, ib), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let out = self.nodes[ia].value.zip_map(&self.nodes[ib].value, "sub", |x, y| x - y)?;
        let ng = self.needs(&[ia, ib]);
        Ok(self.push(out, Op::Sub(ia, ib), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let out = self.nodes[ia].value.zip_map(&self.nodes[ib].value, "mul", |x, y| x * y)?;
        let ng = self.needs(&[ia, ib]);
        Ok(self.push(out, Op::Mul(ia, ib), ng))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let ia = self.idx(a);
        let out = self.nodes[ia].value.map(|x| x * c);
        let ng = self.needs(&[ia]);
        self.push(out, Op::Scale(ia, c), ng)
    }

    /// Adds a length-n vector to every row of an m×n matrix.
    pub fn add_row(&mut self, x: Var, v: Var) -> Result<Var> {
        self.row_op(x, v, "add_row", false)
    }

    /// Multiplies every row of an m×n matrix elementwise by a length-n vector.
    pub fn mul_row(&mut self, x: Var, v: Var) -> Result<Var> {
        self.row_op(x, v, "mul_row", true)
    }

    fn row_op(&mut self, x: Var, v: Var, op: &'static str, multiply: bool) -> Result<Var> {
        let (ix, iv) = (self.idx(x), self.idx(v));
        let xv = &self.nodes[ix].value;
        let vv = &self.nodes[iv].value;
        let (_, n) = xv.dims2(op)?;
        if vv.shape() != [n] {
            return Err(Error::Shape {
                op,
                lhs: xv.shape().to_vec(),
                rhs: vv.shape().to_vec(),
            });
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            for (o, &b) in row.iter_mut().zip(vv.data()) {
                if multiply {
                    *o *= b;
                } else {
                    *o += b;
                }
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let ng = self.needs(&[ix, iv]);
        let rec = if multiply { Op::MulRow(ix, iv) } else { Op::AddRow(ix, iv) };
        Ok(self.push(out, rec, ng))
    }

    /// `x ⊙ (g₀ ⊗ g₁ ⊗ …)` where each axis may carry a gate vector.
    pub fn axis_mask(&mut self, x: Var, gates: &[Option<Var>]) -> Result<Var> {
        let ix = self.idx(x);
        let shape = self.nodes[ix].value.shape().to_vec();
        if gates.len() != shape.len() {
            return Err(Error::Shape {
                op: "axis_mask",
                lhs: shape,
                rhs: vec![gates.len()],
            });
        }
        let mut idxs = Vec::with_capacity(gates.len());
        for (axis, g) in gates.iter().enumerate() {
            match g {
                Some(g) => {
                    let ig = self.idx(*g);
                    if self.nodes[ig].value.shape() != [shape[axis]] {
                        return Err(Error::Shape {
                            op: "axis_mask",
                            lhs: shape.clone(),
                            rhs: self.nodes[ig].value.shape().to_vec(),
                        });
                    }
                    idxs.push(Some(ig));
                }
                None => idxs.push(None),
            }
        }
        let mask = self.outer_mask(&shape, &idxs);
        let out = self.nodes[ix].value.zip_map(&mask, "axis_mask", |a, b| a * b)?;
        let mut deps = vec![ix];
        deps.extend(idxs.iter().flatten());
        let ng = self.needs(&deps);
        Ok(self.push(out, Op::AxisMask { x: ix, gates: idxs }, ng))
    }

    fn outer_mask(&self, shape: &[usize], gates: &[Option<usize>]) -> Tensor<T> {
        outer_product(shape, |axis| gates[axis].map(|g| self.nodes[g].value.data()))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let ix = self.idx(x);
        let out = self.nodes[ix].value.map(|v| if v > T::zero() { v } else { T::zero() });
        let ng = self.needs(&[ix]);
        self.push(out, Op::Relu(ix), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let ix = self.idx(x);
        let out = self.nodes[ix].value.map(|v| v.tanh());
        let ng = self.needs(&[ix]);
        self.push(out, Op::Tanh(ix), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let ix = self.idx(x);
        let out = self.nodes[ix].value.map(tensor::sigmoid);
        let ng = self.needs(&[ix]);
        self.push(out, Op::Sigmoid(ix), ng)
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let ix = self.idx(x);
        let out = self.nodes[ix].value.map(|v| v.max(lo).min(hi));
        let ng = self.needs(&[ix]);
        self.push(out, Op::Clamp { x: ix, lo, hi }, ng)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x);
        let out = tensor::softmax_rows(&self.nodes[ix].value)?;
        let ng = self.needs(&[ix]);
        Ok(self.push(out, Op::SoftmaxRows(ix), ng))
    }

    /// Layer norm; `weights` (length n) restricts the row statistics to a
    /// weighted subset of channels.
    pub fn layer_norm(
        &mut self,
        x: Var,
        weights: Option<Var>,
        scale: Var,
        shift: Var,
        eps: T,
    ) -> Result<Var> {
        let (ix, is, ib) = (self.idx(x), self.idx(scale), self.idx(shift));
        let iw = weights.map(|w| self.idx(w));
        let xv = &self.nodes[ix].value;
        let (m, n) = xv.dims2("layer_norm")?;
        for i in [Some(is), Some(ib), iw].into_iter().flatten() {
            if self.nodes[i].value.shape() != [n] {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: xv.shape().to_vec(),
                    rhs: self.nodes[i].value.shape().to_vec(),
                });
            }
        }
        let stats = layer_norm_stats(xv, iw.map(|w| self.nodes[w].value.data()), eps)?;
        let g = self.nodes[is].value.data();
        let b = self.nodes[ib].value.data();
        let mut out = stats.normalized.clone();
        for row in out.chunks_mut(n).take(m) {
            for ((o, &gv), &bv) in row.iter_mut().zip(g).zip(b) {
                *o = *o * gv + bv;
            }
        }
        let out = Tensor::new(vec![m, n], out)?;
        let mut deps = vec![ix, is, ib];
        deps.extend(iw);
        let ng = self.needs(&deps);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x: ix,
                weights: iw,
                scale: is,
                shift: ib,
                normalized: stats.normalized,
                rstd: stats.rstd,
                var: stats.var,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let ix = self.idx(x);
        let out = Tensor::scalar(self.nodes[ix].value.sum());
        let ng = self.needs(&[ix]);
        self.push(out, Op::Sum(ix), ng)
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, x: Var, target: &Tensor<T>) -> Result<Var> {
        let ix = self.idx(x);
        let xv = &self.nodes[ix].value;
        xv.same_shape(target, "mse")?;
        let n = T::lit(xv.len() as f64);
        let total: T = xv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        let ng = self.needs(&[ix]);
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::Mse {
                x: ix,
                target: target.clone(),
            },
            ng,
        ))
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let it = self.idx(table);
        let tv = &self.nodes[it].value;
        let (rows, n) = tv.dims2("gather_rows")?;
        if ids.is_empty() {
            return Err(Error::EmptySequence);
        }
        let mut data = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            if id >= rows {
                return Err(Error::InvalidTensor(format!("row {id} out of range for {rows} rows")));
            }
            data.extend_from_slice(&tv.data()[id * n..(id + 1) * n]);
        }
        let out = Tensor::matrix(ids.len(), n, data)?;
        let ng = self.needs(&[it]);
        Ok(self.push(
            out,
            Op::GatherRows {
                table: it,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Time-axis unfold for a zero-padded "same" 1-D convolution:
    /// `out[t, tap·c + j] = x[t + tap − kernel/2, j]`.
    pub fn unfold(&mut self, x: Var, kernel: usize) -> Result<Var> {
        let ix = self.idx(x);
        let xv = &self.nodes[ix].value;
        let (l, c) = xv.dims2("unfold")?;
        if kernel % 2 == 0 {
            return Err(Error::InvalidTensor(format!("kernel size {kernel} must be odd")));
        }
        let pad = kernel / 2;
        let width = kernel * c;
        let mut data = vec![T::zero(); l * width];
        for t in 0..l {
            for tap in 0..kernel {
                let src = t + tap;
                if src < pad || src - pad >= l {
                    continue;
                }
                let s = src - pad;
                data[t * width + tap * c..t * width + (tap + 1) * c]
                    .copy_from_slice(&xv.data()[s * c..(s + 1) * c]);
            }
        }
        let out = Tensor::matrix(l, width, data)?;
        let ng = self.needs(&[ix]);
        Ok(self.push(out, Op::Unfold { x: ix, kernel }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.idx(x);
        let out = self.nodes[ix].value.reshape(shape)?;
        let ng = self.needs(&[ix]);
        Ok(self.push(out, Op::Reshape(ix), ng))
    }

    /// Element `index` of a flat tensor, as a scalar.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let ix = self.idx(x);
        let xv = &self.nodes[ix].value;
        let v = *xv
            .data()
            .get(index)
            .ok_or_else(|| Error::InvalidTensor(format!("index {index} out of range")))?;
        let ng = self.needs(&[ix]);
        Ok(self.push(Tensor::scalar(v), Op::Select { x: ix, index }, ng))
    }

    /// `x · v[index]`.
    pub fn scale_by_elem(&mut self, x: Var, v: Var, index: usize) -> Result<Var> {
        let (ix, iv) = (self.idx(x), self.idx(v));
        let c = *self.nodes[iv]
            .value
            .data()
            .get(index)
            .ok_or_else(|| Error::InvalidTensor(format!("index {index} out of range")))?;
        let out = self.nodes[ix].value.map(|a| a * c);
        let ng = self.needs(&[ix, iv]);
        Ok(self.push(out, Op::ScaleByElem { x: ix, v: iv, index }, ng))
    }

    /// Gradients of the scalar `loss` with respect to each of `params`.
    pub fn grad(&self, loss: Var, params: &[Var]) -> Result<Vec<Tensor<T>>> {
        for p in params {
            if p.tape != self.id || p.index >= self.nodes.len() || !self.nodes[p.index].is_param {
                return Err(Error::NotOnTape);
            }
        }
        let mut grads = self.backward(loss)?;
        Ok(params
            .iter()
            .map(|p| {
                grads[p.index]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[p.index].value.shape()))
            })
            .collect())
    }

    fn backward(&self, loss: Var) -> Result<Vec<Option<Tensor<T>>>> {
        let il = self.idx(loss);
        if self.nodes[il].value.len() != 1 {
            return Err(Error::Shape {
                op: "grad",
                lhs: self.nodes[il].value.shape().to_vec(),
                rhs: vec![1],
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[il] = Some(Tensor::full(self.nodes[il].value.shape(), T::one()));
        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(grads)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], i: usize, g: Tensor<T>) {
        if !self.nodes[i].needs_grad {
            return;
        }
        match &mut grads[i] {
            Some(acc) => {
                for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn want(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let val = |j: usize| &self.nodes[j].value;
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                if self.want(*a) {
                    self.accumulate(grads, *a, matmul_bt(g, val(*b))?);
                }
                if self.want(*b) {
                    self.accumulate(grads, *b, matmul_at(val(*a), g)?);
                }
            }
            Op::MatmulBt(a, b) => {
                if self.want(*a) {
                    self.accumulate(grads, *a, matmul(g, val(*b))?);
                }
                if self.want(*b) {
                    self.accumulate(grads, *b, matmul_at(g, val(*a))?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.want(*a) {
                    self.accumulate(grads, *a, g.zip_map(val(*b), "mul", |x, y| x * y)?);
                }
                if self.want(*b) {
                    self.accumulate(grads, *b, g.zip_map(val(*a), "mul", |x, y| x * y)?);
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, g.map(|v| v * c));
            }
            Op::AddRow(x, v) => {
                self.accumulate(grads, *x, g.clone());
                if self.want(*v) {
                    let (_, n) = g.dims2("add_row")?;
                    let mut gv = vec![T::zero(); n];
                    for row in g.data().chunks(n) {
                        for (o, &r) in gv.iter_mut().zip(row) {
                            *o += r;
                        }
                    }
                    self.accumulate(grads, *v, Tensor::vector(gv)?);
                }
            }
            Op::MulRow(x, v) => {
                let (_, n) = g.dims2("mul_row")?;
                let vd = val(*v).data();
                if self.want(*x) {
                    let mut gx = g.data().to_vec();
                    for row in gx.chunks_mut(n) {
                        for (o, &s) in row.iter_mut().zip(vd) {
                            *o *= s;
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), gx)?);
                }
                if self.want(*v) {
                    let mut gv = vec![T::zero(); n];
                    for (grow, xrow) in g.data().chunks(n).zip(val(*x).data().chunks(n)) {
                        for ((o, &a), &b) in gv.iter_mut().zip(grow).zip(xrow) {
                            *o += a * b;
                        }
                    }
                    self.accumulate(grads, *v, Tensor::vector(gv)?);
                }
            }
            Op::AxisMask { x, gates } => self.axis_mask_backward(*x, gates, g, grads)?,
            Op::Relu(x) => {
                let gx = g.zip_map(val(*x), "relu", |a, b| if b > T::zero() { a } else { T::zero() })?;
                self.accumulate(grads, *x, gx);
            }
            Op::Tanh(x) => {
                let gx = g.zip_map(&node.value, "tanh", |a, y| a * (T::one() - y * y))?;
                self.accumulate(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let gx = g.zip_map(&node.value, "sigmoid", |a, y| a * y * (T::one() - y))?;
                self.accumulate(grads, *x, gx);
            }
            Op::Clamp { x, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                let gx = g.zip_map(val(*x), "clamp", |a, b| if b > lo && b < hi { a } else { T::zero() })?;
                self.accumulate(grads, *x, gx);
            }
            Op::SoftmaxRows(x) => {
                let (_, n) = g.dims2("softmax_rows")?;
                let mut gx = vec![T::zero(); g.len()];
                for ((o, grow), yrow) in gx.chunks_mut(n).zip(g.data().chunks(n)).zip(node.value.data().chunks(n)) {
                    let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for ((o, &a), &y) in o.iter_mut().zip(grow).zip(yrow) {
                        *o = y * (a - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), gx)?);
            }
            Op::LayerNorm {
                x,
                weights,
                scale,
                shift,
                normalized,
                rstd,
                var,
            } => {
                let (m, n) = g.dims2("layer_norm")?;
                let gamma = val(*scale).data();
                let w = weights.map(|w| val(w).data());
                let total_w = match w {
                    Some(w) => w.iter().copied().sum(),
                    None => T::lit(n as f64),
                };
                let mut gscale = vec![T::zero(); n];
                let mut gshift = vec![T::zero(); n];
                let mut gx = vec![T::zero(); m * n];
                let mut gw = vec![T::zero(); n];
                let mut gy = vec![T::zero(); n];
                for r in 0..m {
                    let grow = &g.data()[r * n..(r + 1) * n];
                    let yrow = &normalized[r * n..(r + 1) * n];
                    for j in 0..n {
                        gscale[j] += grow[j] * yrow[j];
                        gshift[j] += grow[j];
                        gy[j] = grow[j] * gamma[j];
                    }
                    let sum_gy: T = gy.iter().copied().sum();
                    let sum_gyy: T = gy.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    let rs = rstd[r];
                    for j in 0..n {
                        let wj = w.map_or(T::one(), |w| w[j]);
                        gx[r * n + j] =
                            rs * (gy[j] - wj / total_w * sum_gy - wj * yrow[j] / total_w * sum_gyy);
                    }
                    if w.is_some() {
                        let vr2 = var[r] * rs * rs;
                        let half = T::lit(0.5);
                        for j in 0..n {
                            gw[j] -= (yrow[j] * sum_gy + half * (yrow[j] * yrow[j] - vr2) * sum_gyy) / total_w;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), gx)?);
                self.accumulate(grads, *scale, Tensor::vector(gscale)?);
                self.accumulate(grads, *shift, Tensor::vector(gshift)?);
                if let Some(wi) = weights {
                    self.accumulate(grads, *wi, Tensor::vector(gw)?);
                }
            }
            Op::Sum(x) => {
                let s = g.data()[0];
                self.accumulate(grads, *x, Tensor::full(val(*x).shape(), s));
            }
            Op::Mse { x, target } => {
                let xv = val(*x);
                let c = g.data()[0] * T::lit(2.0) / T::lit(xv.len() as f64);
                let gx = xv.zip_map(target, "mse", |a, b| c * (a - b))?;
                self.accumulate(grads, *x, gx);
            }
            Op::GatherRows { table, ids } => {
                if self.want(*table) {
                    let tv = val(*table);
                    let (_, n) = tv.dims2("gather_rows")?;
                    let mut gt = vec![T::zero(); tv.len()];
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, &v) in gt[id * n..(id + 1) * n].iter_mut().zip(&g.data()[r * n..(r + 1) * n]) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *table, Tensor::new(tv.shape().to_vec(), gt)?);
                }
            }
            Op::Unfold { x, kernel } => {
                let xv = val(*x);
                let (l, c) = xv.dims2("unfold")?;
                let pad = kernel / 2;
                let width = kernel * c;
                let mut gx = vec![T::zero(); l * c];
                for t in 0..l {
                    for tap in 0..*kernel {
                        let src = t + tap;
                        if src < pad || src - pad >= l {
                            continue;
                        }
                        let s = src - pad;
                        let from = &g.data()[t * width + tap * c..t * width + (tap + 1) * c];
                        for (o, &v) in gx[s * c..(s + 1) * c].iter_mut().zip(from) {
                            *o += v;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), gx)?);
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, g.reshape(val(*x).shape())?);
            }
            Op::Select { x, index } => {
                let mut gx = Tensor::zeros(val(*x).shape());
                gx.data_mut()[*index] = g.data()[0];
                self.accumulate(grads, *x, gx);
            }
            Op::ScaleByElem { x, v, index } => {
                let c = val(*v).data()[*index];
                if self.want(*x) {
                    self.accumulate(grads, *x, g.map(|a| a * c));
                }
                if self.want(*v) {
                    let mut gv = Tensor::zeros(val(*v).shape());
                    gv.data_mut()[*index] = g.data().iter().zip(val(*x).data()).map(|(&a, &b)| a * b).sum();
                    self.accumulate(grads, *v, gv);
                }
            }
        }
        Ok(())
    }

    fn axis_mask_backward(
        &self,
        x: usize,
        gates: &[Option<usize>],
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let xv = &self.nodes[x].value;
        let shape = xv.shape();
        if self.want(x) {
            let mask = self.outer_mask(shape, gates);
            self.accumulate(grads, x, g.zip_map(&mask, "axis_mask", |a, b| a * b)?);
        }
        // g ⊙ x contracted against every gate except the one being differentiated
        let gx = g.zip_map(xv, "axis_mask", |a, b| a * b)?;
        for (axis, gate) in gates.iter().enumerate() {
            let Some(gi) = *gate else { continue };
            if !self.want(gi) {
                continue;
            }
            let others = outer_product(shape, |b| {
                if b == axis {
                    None
                } else {
                    gates[b].map(|o| self.nodes[o].value.data())
                }
            });
            let outer: usize = shape[..axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let extent = shape[axis];
            let mut gz = vec![T::zero(); extent];
            for o in 0..outer {
                for (k, acc) in gz.iter_mut().enumerate() {
                    let start = (o * extent + k) * inner;
                    for e in start..start + inner {
                        *acc += gx.data()[e] * others.data()[e];
                    }
                }
            }
            self.accumulate(grads, gi, Tensor::vector(gz)?);
        }
        Ok(())
    }
}

/// Outer product of per-axis vectors over `shape`; axes without a vector
/// contribute ones.
pub(crate) fn outer_product<'a, T: Real>(
    shape: &[usize],
    axis_vec: impl Fn(usize) -> Option<&'a [T]>,
) -> Tensor<T> {
    let mut mask = Tensor::ones(shape);
    let n = mask.len();
    for axis in 0..shape.len() {
        let Some(v) = axis_vec(axis) else { continue };
        let inner: usize = shape[axis + 1..].iter().product();
        let extent = shape[axis];
        let data = mask.data_mut();
        for (e, m) in data.iter_mut().enumerate().take(n) {
            *m *= v[(e / inner) % extent];
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(Tensor::from_rows(&[&[1.0, -2.0], &[0.5, 3.0]]).unwrap());
        let s = tape.sum(w);
        let g = tape.grad(s, &[w]).unwrap();
        assert_eq!(g[0].data(), &[1.0; 4]);
    }

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let mut tape = Tape::<f64>::new();
        let wv = Tensor::from_rows(&[&[1.0, -2.0, 0.25]]).unwrap();
        let w = tape.param(wv.clone());
        let sq = tape.mul(w, w).unwrap();
        let s = tape.sum(sq);
        let half = tape.scale(s, 0.5);
        let g = tape.grad(half, &[w]).unwrap();
        assert_eq!(g[0], wv);
    }

    #[test]
    fn foreign_or_constant_vars_are_rejected() {
        let mut a = Tape::<f64>::new();
        let mut b = Tape::<f64>::new();
        let wa = a.param(Tensor::ones(&[2]));
        let c = a.constant(Tensor::ones(&[2]));
        let s = a.sum(wa);
        let wb = b.param(Tensor::ones(&[2]));
        assert!(matches!(a.grad(s, &[wb]), Err(Error::NotOnTape)));
        assert!(matches!(a.grad(s, &[c]), Err(Error::NotOnTape)));
    }

    #[test]
    fn replaying_backward_is_identical() {
        let mut tape = Tape::<f32>::new();
        let w = tape.param(Tensor::from_rows(&[&[0.3, -0.7], &[1.1, 0.2]]).unwrap());
        let x = tape.constant(Tensor::from_rows(&[&[1.0, 2.0]]).unwrap());
        let y = tape.matmul(x, w).unwrap();
        let y = tape.tanh(y);
        let l = tape.sum(y);
        let g1 = tape.grad(l, &[w]).unwrap();
        let g2 = tape.grad(l, &[w]).unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn outer_product_matches_loops() {
        let a = [0.5f64, 1.0];
        let b = [1.0f64, 0.0, 2.0];
        let m = outer_product(&[2, 3], |axis| Some(if axis == 0 { &a[..] } else { &b[..] }));
        for i in 0..2 {
            for j in 0..3 {
                assert_eq!(m.at2(i, j), a[i] * b[j]);
            }
        }
    }
}
