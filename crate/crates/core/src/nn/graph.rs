use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Activation applied to the cell state before the output gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellActivation {
    #[default]
    Relu,
    Tanh,
}

impl CellActivation {
    #[inline]
    fn eval(self, c: f64) -> f64 {
        match self {
            CellActivation::Relu => c.max(0.0),
            CellActivation::Tanh => c.tanh(),
        }
    }

    #[inline]
    fn deriv(self, c: f64) -> f64 {
        match self {
            CellActivation::Relu => {
                if c > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            CellActivation::Tanh => {
                let t = c.tanh();
                1.0 - t * t
            }
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(usize, usize),
    AddBias(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Conv3d {
        x: usize,
        w: usize,
        b: usize,
        col: Vec<f64>,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    MaxPool {
        x: usize,
        argmax: Vec<usize>,
    },
    Reshape(usize),
    GatherRows {
        x: usize,
        idx: Vec<usize>,
    },
    SliceCols {
        x: usize,
        start: usize,
    },
    ConcatRows(Vec<usize>),
    LstmCell {
        z: usize,
        c_prev: usize,
        act: CellActivation,
    },
    WeightedL1 {
        pred: usize,
        target: Vec<f64>,
        weight: Vec<f64>,
    },
    SumSquares(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-channel batch statistics from a train-mode batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased variance.
    pub var: Vec<f64>,
}

/// Computation record: nodes in creation order, which is a topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
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

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Parameter `id` of `store`; trainable entries receive gradients.
    pub fn param(&mut self, store: &ParamStore, id: usize) -> Var {
        let e = &store.entries[id];
        self.push(
            Tensor {
                shape: e.shape.clone(),
                data: e.value.clone(),
            },
            Op::Param(id),
            e.trainable,
        )
    }

    /// `a (m x k) · b (k x n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape[1] != tb.shape[0] {
            return Err(Error::shape(
                "matmul",
                format!("(m,k)·(k,n) with k={}", ta.last_dim()),
                format!("{:?}·{:?}", ta.shape, tb.shape),
            ));
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &ta.data, false, &tb.data, false, &mut out, 0.0);
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a.0, b.0), rg))
    }

    /// Adds a vector along the last axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (&self.nodes[x.0].value, &self.nodes[b.0].value);
        let c = tx.last_dim();
        if tb.len() != c {
            return Err(Error::shape("add_bias", c, tb.len()));
        }
        let mut out = tx.clone();
        for row in out.data.chunks_exact_mut(c) {
            for (v, bb) in row.iter_mut().zip(&tb.data) {
                *v += bb;
            }
        }
        let rg = self.rg(&[x.0, b.0]);
        Ok(self.push(out, Op::AddBias(x.0, b.0), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape != tb.shape {
            return Err(Error::shape(
                "add",
                format!("{:?}", ta.shape),
                format!("{:?}", tb.shape),
            ));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape.clone(), data)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(out, Op::Add(a.0, b.0), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape != tb.shape {
            return Err(Error::shape(
                "mul",
                format!("{:?}", ta.shape),
                format!("{:?}", tb.shape),
            ));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape.clone(), data)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(out, Op::Mul(a.0, b.0), rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = &self.nodes[x.0].value;
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&v| f(v)).collect(),
        };
        let rg = self.nodes[x.0].requires_grad;
        self.push(out, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x.0))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x.0))
    }

    /// 3x3x3 convolution, stride 1, zero "same" padding.
    /// `x`: (B, X, Y, Z, Cin); `w`: (3, 3, 3, Cin, Cout); `b`: (Cout).
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (&self.nodes[x.0].value, &self.nodes[w.0].value, &self.nodes[b.0].value);
        if tx.rank() != 5 {
            return Err(Error::shape("conv3d input rank", 5, tx.rank()));
        }
        let cin = tx.shape[4];
        if tw.shape.len() != 5 || tw.shape[..3] != [3, 3, 3] || tw.shape[3] != cin {
            return Err(Error::shape(
                "conv3d kernel",
                format!("[3, 3, 3, {cin}, Cout]"),
                format!("{:?}", tw.shape),
            ));
        }
        let cout = tw.shape[4];
        if tb.len() != cout {
            return Err(Error::shape("conv3d bias", cout, tb.len()));
        }
        let dims = [tx.shape[0], tx.shape[1], tx.shape[2], tx.shape[3]];
        let col = im2col(&tx.data, dims, cin);
        let p = dims.iter().product::<usize>();
        let kk = 27 * cin;
        let mut out = vec![0.0; p * cout];
        gemm(p, kk, cout, &col, false, &tw.data, false, &mut out, 0.0);
        for row in out.chunks_exact_mut(cout) {
            for (v, bb) in row.iter_mut().zip(&tb.data) {
                *v += bb;
            }
        }
        let shape = vec![dims[0], dims[1], dims[2], dims[3], cout];
        let rg = self.rg(&[x.0, w.0, b.0]);
        // The im2col buffer is only needed for the kernel gradient.
        let col = if self.nodes[w.0].requires_grad { col } else { Vec::new() };
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Conv3d {
                x: x.0,
                w: w.0,
                b: b.0,
                col,
            },
            rg,
        ))
    }

    /// Train-mode batch normalization over all axes but the last.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let tx = &self.nodes[x.0].value;
        let c = tx.last_dim();
        let m = tx.rows();
        if m < 2 {
            return Err(Error::invalid(
                "batch normalization in train mode needs at least two values per channel",
            ));
        }
        let mut mean = vec![0.0; c];
        for row in tx.data.chunks_exact(c) {
            for (acc, v) in mean.iter_mut().zip(row) {
                *acc += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= m as f64);
        let mut var = vec![0.0; c];
        for row in tx.data.chunks_exact(c) {
            for ((acc, v), mu) in var.iter_mut().zip(row).zip(&mean) {
                *acc += (v - mu) * (v - mu);
            }
        }
        var.iter_mut().for_each(|v| *v /= m as f64);
        let out = self.batchnorm_apply(x, gamma, beta, &mean, &var, eps, true)?;
        Ok((out, BatchStats { mean, var }))
    }

    /// Infer-mode batch normalization with fixed statistics.
    pub fn batchnorm_infer(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        self.batchnorm_apply(x, gamma, beta, mean, var, eps, false)
    }

    #[allow(clippy::too_many_arguments)]
    fn batchnorm_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
        train: bool,
    ) -> Result<Var> {
        let (tx, tg, tb) = (
            &self.nodes[x.0].value,
            &self.nodes[gamma.0].value,
            &self.nodes[beta.0].value,
        );
        let c = tx.last_dim();
        for (name, len) in [
            ("gamma", tg.len()),
            ("beta", tb.len()),
            ("mean", mean.len()),
            ("var", var.len()),
        ] {
            if len != c {
                return Err(Error::shape("batchnorm", c, format!("{len} ({name})")));
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = Vec::with_capacity(tx.len());
        let mut out = Vec::with_capacity(tx.len());
        for row in tx.data.chunks_exact(c) {
            for ch in 0..c {
                let h = (row[ch] - mean[ch]) * inv_std[ch];
                xhat.push(h);
                out.push(tg.data[ch] * h + tb.data[ch]);
            }
        }
        let shape = tx.shape.clone();
        let rg = self.rg(&[x.0, gamma.0, beta.0]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
                train,
            },
            rg,
        ))
    }

    /// 2x2x2 max pooling, stride 2, on (B, X, Y, Z, C).
    pub fn maxpool3d(&mut self, x: Var) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        if tx.rank() != 5 {
            return Err(Error::shape("maxpool3d input rank", 5, tx.rank()));
        }
        let [b, nx, ny, nz, c] = [tx.shape[0], tx.shape[1], tx.shape[2], tx.shape[3], tx.shape[4]];
        if nx % 2 != 0 || ny % 2 != 0 || nz % 2 != 0 {
            return Err(Error::invalid(format!(
                "max pooling needs even extents, got {nx}x{ny}x{nz}"
            )));
        }
        let (ox, oy, oz) = (nx / 2, ny / 2, nz / 2);
        let mut out = Vec::with_capacity(b * ox * oy * oz * c);
        let mut argmax = Vec::with_capacity(out.capacity());
        let idx = |bb: usize, i: usize, j: usize, k: usize, ch: usize| (((bb * nx + i) * ny + j) * nz + k) * c + ch;
        for bb in 0..b {
            for i in 0..ox {
                for j in 0..oy {
                    for k in 0..oz {
                        for ch in 0..c {
                            let mut best = f64::NEG_INFINITY;
                            let mut best_at = usize::MAX;
                            for di in 0..2 {
                                for dj in 0..2 {
                                    for dk in 0..2 {
                                        let at = idx(bb, 2 * i + di, 2 * j + dj, 2 * k + dk, ch);
                                        let v = tx.data[at];
                                        // Strict comparison: first index wins ties.
                                        if v > best || best_at == usize::MAX {
                                            best = v;
                                            best_at = at;
                                        }
                                    }
                                }
                            }
                            out.push(best);
                            argmax.push(best_at);
                        }
                    }
                }
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(
            Tensor::new(vec![b, ox, oy, oz, c], out)?,
            Op::MaxPool { x: x.0, argmax },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if shape.iter().product::<usize>() != t.len() {
            return Err(Error::shape("reshape", t.len(), format!("{shape:?}")));
        }
        let out = Tensor {
            shape,
            data: t.data.clone(),
        };
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(out, Op::Reshape(x.0), rg))
    }

    /// Rows `idx` of a matrix (rows along the first axis).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if t.rank() != 2 {
            return Err(Error::shape("gather_rows rank", 2, t.rank()));
        }
        let (r, c) = (t.shape[0], t.shape[1]);
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::invalid(format!("gather index {i} out of {r} rows")));
            }
            data.extend_from_slice(&t.data[i * c..(i + 1) * c]);
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(
            Tensor::new(vec![idx.len(), c], data)?,
            Op::GatherRows {
                x: x.0,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if t.rank() != 2 || start + len > t.shape[1] {
            return Err(Error::shape(
                "slice_cols",
                format!("{} columns", start + len),
                format!("{:?}", t.shape),
            ));
        }
        let c = t.shape[1];
        let mut data = Vec::with_capacity(t.shape[0] * len);
        for row in t.data.chunks_exact(c) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(
            Tensor::new(vec![t.shape[0], len], data)?,
            Op::SliceCols { x: x.0, start },
            rg,
        ))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let c = self.nodes[xs[0].0].value.last_dim();
        let mut data = Vec::new();
        let mut rows = 0;
        for x in xs {
            let t = &self.nodes[x.0].value;
            if t.rank() != 2 || t.shape[1] != c {
                return Err(Error::shape("concat_rows", c, format!("{:?}", t.shape)));
            }
            rows += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let ids: Vec<usize> = xs.iter().map(|v| v.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(Tensor::new(vec![rows, c], data)?, Op::ConcatRows(ids), rg))
    }

    /// Fused LSTM cell. `z`: (B, 4N) pre-activations in gate order (f, i, o, g);
    /// `c_prev`: (B, N). Returns (B, 2N) holding `[h | c]`.
    pub fn lstm_cell(&mut self, z: Var, c_prev: Var, act: CellActivation) -> Result<Var> {
        let (tz, tc) = (&self.nodes[z.0].value, &self.nodes[c_prev.0].value);
        if tc.rank() != 2 || tz.rank() != 2 || tz.shape[0] != tc.shape[0] || tz.shape[1] != 4 * tc.shape[1] {
            return Err(Error::shape(
                "lstm_cell",
                format!("z (B, 4N) with c (B, N) = {:?}", tc.shape),
                format!("{:?}", tz.shape),
            ));
        }
        let (b, n) = (tc.shape[0], tc.shape[1]);
        let mut out = vec![0.0; b * 2 * n];
        for r in 0..b {
            let zr = &tz.data[r * 4 * n..(r + 1) * 4 * n];
            let cr = &tc.data[r * n..(r + 1) * n];
            let o = &mut out[r * 2 * n..(r + 1) * 2 * n];
            for j in 0..n {
                let f = sigmoid(zr[j]);
                let i = sigmoid(zr[n + j]);
                let og = sigmoid(zr[2 * n + j]);
                let g = zr[3 * n + j].max(0.0);
                let c = f * cr[j] + i * g;
                o[n + j] = c;
                o[j] = og * act.eval(c);
            }
        }
        let rg = self.rg(&[z.0, c_prev.0]);
        Ok(self.push(
            Tensor::new(vec![b, 2 * n], out)?,
            Op::LstmCell {
                z: z.0,
                c_prev: c_prev.0,
                act,
            },
            rg,
        ))
    }

    /// `Σ weight · |pred - target|` as a scalar.
    pub fn weighted_l1(&mut self, pred: Var, target: Vec<f64>, weight: Vec<f64>) -> Result<Var> {
        let tp = &self.nodes[pred.0].value;
        if target.len() != tp.len() || weight.len() != tp.len() {
            return Err(Error::shape("weighted_l1", tp.len(), target.len().max(weight.len())));
        }
        let loss: f64 = tp
            .data
            .iter()
            .zip(&target)
            .zip(&weight)
            .map(|((p, t), w)| w * (p - t).abs())
            .sum();
        let rg = self.nodes[pred.0].requires_grad;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::WeightedL1 {
                pred: pred.0,
                target,
                weight,
            },
            rg,
        ))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data.iter().map(|v| v * v).sum();
        let rg = self.nodes[x.0].requires_grad;
        self.push(Tensor::scalar(s), Op::SumSquares(x.0), rg)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::invalid("backward needs a scalar loss"));
        }
        let n = self.nodes.len();
        self.grads = (0..n).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            self.backprop_node(id, &g);
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    /// Gradient accumulated at `v` by the last backward pass.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients for every entry of `store` (zeros where none flowed).
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = store.entries.iter().map(|e| vec![0.0; e.value.len()]).collect();
        for (id, node) in self.nodes.iter().enumerate() {
            if let Op::Param(p) = node.op {
                if let Some(g) = self.grads.get(id).and_then(|g| g.as_ref()) {
                    for (acc, v) in out[p].iter_mut().zip(g) {
                        *acc += v;
                    }
                }
            }
        }
        out
    }

    fn accum(&mut self, id: usize, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[id].requires_grad {
            return;
        }
        let len = self.nodes[id].value.shape.iter().product();
        let g = self.grads[id].get_or_insert_with(|| vec![0.0; len]);
        f(g);
    }

    fn backprop_node(&mut self, id: usize, g: &[f64]) {
        // Temporarily take the op so its cached buffers can be read while
        // other nodes' gradients are mutated.
        let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
        match &op {
            Op::Leaf | Op::Param(_) => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a].value.shape[0], self.nodes[a].value.shape[1]);
                let n = self.nodes[b].value.shape[1];
                if self.nodes[a].requires_grad {
                    let bv = std::mem::take(&mut self.nodes[b].value.data);
                    self.accum(a, |ga| gemm(m, n, k, g, false, &bv, true, ga, 1.0));
                    self.nodes[b].value.data = bv;
                }
                if self.nodes[b].requires_grad {
                    let av = std::mem::take(&mut self.nodes[a].value.data);
                    self.accum(b, |gb| gemm(k, m, n, &av, true, g, false, gb, 1.0));
                    self.nodes[a].value.data = av;
                }
            }
            &Op::AddBias(x, b) => {
                self.accum(x, |gx| gx.iter_mut().zip(g).for_each(|(a, v)| *a += v));
                let c = self.nodes[b].value.len();
                self.accum(b, |gb| {
                    for row in g.chunks_exact(c) {
                        gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                });
            }
            &Op::Add(a, b) => {
                self.accum(a, |ga| ga.iter_mut().zip(g).for_each(|(x, v)| *x += v));
                self.accum(b, |gb| gb.iter_mut().zip(g).for_each(|(x, v)| *x += v));
            }
            &Op::Mul(a, b) => {
                if self.nodes[a].requires_grad {
                    let bv = self.nodes[b].value.data.clone();
                    self.accum(a, |ga| {
                        for ((x, v), w) in ga.iter_mut().zip(g).zip(&bv) {
                            *x += v * w;
                        }
                    });
                }
                if self.nodes[b].requires_grad {
                    let av = self.nodes[a].value.data.clone();
                    self.accum(b, |gb| {
                        for ((x, v), w) in gb.iter_mut().zip(g).zip(&av) {
                            *x += v * w;
                        }
                    });
                }
            }
            &Op::Relu(x) => {
                let xv = std::mem::take(&mut self.nodes[x].value.data);
                self.accum(x, |gx| {
                    for ((a, v), xi) in gx.iter_mut().zip(g).zip(&xv) {
                        if *xi > 0.0 {
                            *a += v;
                        }
                    }
                });
                self.nodes[x].value.data = xv;
            }
            &Op::Sigmoid(x) => {
                let y = self.nodes[id].value.data.clone();
                self.accum(x, |gx| {
                    for ((a, v), s) in gx.iter_mut().zip(g).zip(&y) {
                        *a += v * s * (1.0 - s);
                    }
                });
            }
            &Op::Tanh(x) => {
                let y = self.nodes[id].value.data.clone();
                self.accum(x, |gx| {
                    for ((a, v), t) in gx.iter_mut().zip(g).zip(&y) {
                        *a += v * (1.0 - t * t);
                    }
                });
            }
            Op::Conv3d { x, w, b, col } => {
                let (x, w, b) = (*x, *w, *b);
                let sx = self.nodes[x].value.shape.clone();
                let cin = sx[4];
                let cout = self.nodes[w].value.shape[4];
                let p: usize = sx[..4].iter().product();
                let kk = 27 * cin;
                self.accum(b, |gb| {
                    for row in g.chunks_exact(cout) {
                        gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                });
                if self.nodes[w].requires_grad {
                    self.accum(w, |gw| gemm(kk, p, cout, col, true, g, false, gw, 1.0));
                }
                if self.nodes[x].requires_grad {
                    let wv = std::mem::take(&mut self.nodes[w].value.data);
                    let mut dcol = vec![0.0; p * kk];
                    gemm(p, cout, kk, g, false, &wv, true, &mut dcol, 0.0);
                    self.nodes[w].value.data = wv;
                    let dims = [sx[0], sx[1], sx[2], sx[3]];
                    self.accum(x, |gx| col2im_add(&dcol, dims, cin, gx));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (x, gamma, beta, train) = (*x, *gamma, *beta, *train);
                let c = inv_std.len();
                let m = xhat.len() / c;
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (grow, hrow) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for ch in 0..c {
                        dgamma[ch] += grow[ch] * hrow[ch];
                        dbeta[ch] += grow[ch];
                    }
                }
                if self.nodes[x].requires_grad {
                    let gv = self.nodes[gamma].value.data.clone();
                    self.accum(x, |gx| {
                        for ((gxr, grow), hrow) in
                            gx.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(xhat.chunks_exact(c))
                        {
                            for ch in 0..c {
                                let s = gv[ch] * inv_std[ch];
                                if train {
                                    // dxhat = g·gamma; dx = inv_std/m·(m·dxhat − Σdxhat − xhat·Σ(dxhat·xhat)).
                                    let mean_dy = dbeta[ch] / m as f64;
                                    let mean_dyh = dgamma[ch] / m as f64;
                                    gxr[ch] += s * (grow[ch] - mean_dy - hrow[ch] * mean_dyh);
                                } else {
                                    gxr[ch] += s * grow[ch];
                                }
                            }
                        }
                    });
                }
                self.accum(gamma, |gg| gg.iter_mut().zip(&dgamma).for_each(|(a, v)| *a += v));
                self.accum(beta, |gb| gb.iter_mut().zip(&dbeta).for_each(|(a, v)| *a += v));
            }
            Op::MaxPool { x, argmax } => {
                self.accum(*x, |gx| {
                    for (v, &at) in g.iter().zip(argmax) {
                        gx[at] += v;
                    }
                });
            }
            &Op::Reshape(x) => {
                self.accum(x, |gx| gx.iter_mut().zip(g).for_each(|(a, v)| *a += v));
            }
            Op::GatherRows { x, idx } => {
                let c = self.nodes[*x].value.last_dim();
                self.accum(*x, |gx| {
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            gx[i * c + j] += g[r * c + j];
                        }
                    }
                });
            }
            &Op::SliceCols { x, start } => {
                let c = self.nodes[x].value.shape[1];
                let len = self.nodes[id].value.shape[1];
                self.accum(x, |gx| {
                    for (gxr, gr) in gx.chunks_exact_mut(c).zip(g.chunks_exact(len)) {
                        for j in 0..len {
                            gxr[start + j] += gr[j];
                        }
                    }
                });
            }
            Op::ConcatRows(ids) => {
                let mut off = 0;
                for &x in ids {
                    let len = self.nodes[x].value.len();
                    self.accum(x, |gx| {
                        gx.iter_mut().zip(&g[off..off + len]).for_each(|(a, v)| *a += v);
                    });
                    off += len;
                }
            }
            &Op::LstmCell { z, c_prev, act } => {
                let n = self.nodes[c_prev].value.shape[1];
                let b = self.nodes[c_prev].value.shape[0];
                let zv = std::mem::take(&mut self.nodes[z].value.data);
                let cv = std::mem::take(&mut self.nodes[c_prev].value.data);
                let out = &self.nodes[id].value.data;
                let mut dz = vec![0.0; b * 4 * n];
                let mut dc_prev = vec![0.0; b * n];
                for r in 0..b {
                    let zr = &zv[r * 4 * n..(r + 1) * 4 * n];
                    let cr = &cv[r * n..(r + 1) * n];
                    let gr = &g[r * 2 * n..(r + 1) * 2 * n];
                    let orow = &out[r * 2 * n..(r + 1) * 2 * n];
                    for j in 0..n {
                        let f = sigmoid(zr[j]);
                        let i = sigmoid(zr[n + j]);
                        let o = sigmoid(zr[2 * n + j]);
                        let g_in = zr[3 * n + j];
                        let gg = g_in.max(0.0);
                        let c = orow[n + j];
                        let dh = gr[j];
                        let dc = gr[n + j] + dh * o * act.deriv(c);
                        let dzr = &mut dz[r * 4 * n..(r + 1) * 4 * n];
                        dzr[j] = dc * cr[j] * f * (1.0 - f);
                        dzr[n + j] = dc * gg * i * (1.0 - i);
                        dzr[2 * n + j] = dh * act.eval(c) * o * (1.0 - o);
                        dzr[3 * n + j] = if g_in > 0.0 { dc * i } else { 0.0 };
                        dc_prev[r * n + j] = dc * f;
                    }
                }
                self.nodes[z].value.data = zv;
                self.nodes[c_prev].value.data = cv;
                self.accum(z, |gz| gz.iter_mut().zip(&dz).for_each(|(a, v)| *a += v));
                self.accum(c_prev, |gc| gc.iter_mut().zip(&dc_prev).for_each(|(a, v)| *a += v));
            }
            Op::WeightedL1 { pred, target, weight } => {
                let pv = std::mem::take(&mut self.nodes[*pred].value.data);
                let s = g[0];
                self.accum(*pred, |gp| {
                    for (((a, p), t), w) in gp.iter_mut().zip(&pv).zip(target).zip(weight) {
                        let d = p - t;
                        if d > 0.0 {
                            *a += s * w;
                        } else if d < 0.0 {
                            *a -= s * w;
                        }
                    }
                });
                self.nodes[*pred].value.data = pv;
            }
            &Op::SumSquares(x) => {
                let xv = std::mem::take(&mut self.nodes[x].value.data);
                let s = g[0];
                self.accum(x, |gx| gx.iter_mut().zip(&xv).for_each(|(a, v)| *a += 2.0 * s * v));
                self.nodes[x].value.data = xv;
            }
        }
        self.nodes[id].op = op;
    }
}

/// Patches of a (B, X, Y, Z, C) tensor: one row per voxel, 27·C columns
/// ordered (dx, dy, dz, c) with dx slowest; out-of-range taps are zero.
fn im2col(x: &[f64], dims: [usize; 4], c: usize) -> Vec<f64> {
    let [b, nx, ny, nz] = dims;
    let kk = 27 * c;
    let mut col = vec![0.0; b * nx * ny * nz * kk];
    let mut row = 0;
    for bb in 0..b {
        for i in 0..nx {
            for j in 0..ny {
                for k in 0..nz {
                    let base = row * kk;
                    for di in 0..3 {
                        let ii = i + di;
                        if ii == 0 || ii > nx {
                            continue;
                        }
                        for dj in 0..3 {
                            let jj = j + dj;
                            if jj == 0 || jj > ny {
                                continue;
                            }
                            for dk in 0..3 {
                                let kk3 = k + dk;
                                if kk3 == 0 || kk3 > nz {
                                    continue;
                                }
                                let src = (((bb * nx + ii - 1) * ny + jj - 1) * nz + kk3 - 1) * c;
                                let dst = base + ((di * 3 + dj) * 3 + dk) * c;
                                col[dst..dst + c].copy_from_slice(&x[src..src + c]);
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    col
}

fn col2im_add(dcol: &[f64], dims: [usize; 4], c: usize, gx: &mut [f64]) {
    let [b, nx, ny, nz] = dims;
    let kk = 27 * c;
    let mut row = 0;
    for bb in 0..b {
        for i in 0..nx {
            for j in 0..ny {
                for k in 0..nz {
                    let base = row * kk;
                    for di in 0..3 {
                        let ii = i + di;
                        if ii == 0 || ii > nx {
                            continue;
                        }
                        for dj in 0..3 {
                            let jj = j + dj;
                            if jj == 0 || jj > ny {
                                continue;
                            }
                            for dk in 0..3 {
                                let kk3 = k + dk;
                                if kk3 == 0 || kk3 > nz {
                                    continue;
                                }
                                let dst = (((bb * nx + ii - 1) * ny + jj - 1) * nz + kk3 - 1) * c;
                                let src = base + ((di * 3 + dj) * 3 + dk) * c;
                                for ch in 0..c {
                                    gx[dst + ch] += dcol[src + ch];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}
