use super::kernels::{self, ConvGeometry};
use super::{dim_err, softmax_slice, Result, Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    /// `[.., n] + [n]`
    AddRowBias(Var, Var),
    /// `[B×T×n] + [B×n]`, the second operand repeated along `T`.
    AddStepBias(Var, Var),
    Affine(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    ConcatCols(Vec<Var>),
    StackSteps(Vec<Var>),
    Reshape(Var),
    Gather(Var, Vec<usize>),
    Conv1d(Var, Var, ConvGeometry),
    WeightedSum(Var, Var),
    Sum(Var),
    SoftmaxCrossEntropy(Var, Vec<Option<usize>>, Vec<f64>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Define-by-run tape. Nodes are appended in evaluation order, which is a
/// topological order by construction.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every node of a graph.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads[v.0].take() {
            Some(t) => t,
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn last_dim(t: &Tensor) -> usize {
    t.shape()[t.rank() - 1]
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

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Constant,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Param,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(dim_err(
                "matmul",
                format!("cannot multiply {:?} by {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let data = kernels::matmul(ta.data(), tb.data(), m, k, n);
        self.push(Tensor::new(vec![m, n], data)?, Op::MatMul(a, b), "matmul")
    }

    fn zip_with(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let value = if ta.shape() == tb.shape() {
            let data = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(x, y)| f(*x, *y))
                .collect();
            Tensor::new(ta.shape().to_vec(), data)?
        } else if tb.is_scalar() {
            let s = tb.item();
            Tensor::new(
                ta.shape().to_vec(),
                ta.data().iter().map(|x| f(*x, s)).collect(),
            )?
        } else if ta.is_scalar() {
            let s = ta.item();
            Tensor::new(
                tb.shape().to_vec(),
                tb.data().iter().map(|y| f(s, *y)).collect(),
            )?
        } else {
            return Err(dim_err(
                name,
                format!("incompatible shapes {:?} and {:?}", ta.shape(), tb.shape()),
            ));
        };
        self.push(value, op, name)
    }

    /// Elementwise sum; either operand may be a one-element scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    /// Elementwise (Hadamard) product; either operand may be a scalar.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let n = last_dim(tx);
        if tb.rank() != 1 || tb.shape()[0] != n {
            return Err(dim_err(
                "add_row_bias",
                format!(
                    "bias {:?} does not match rows of {:?}",
                    tb.shape(),
                    tx.shape()
                ),
            ));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        self.push(value, Op::AddRowBias(x, bias), "add_row_bias")
    }

    pub fn add_step_bias(&mut self, x: Var, per_row: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(per_row));
        if tx.rank() != 3
            || tb.rank() != 2
            || tx.shape()[0] != tb.shape()[0]
            || tx.shape()[2] != tb.shape()[1]
        {
            return Err(dim_err(
                "add_step_bias",
                format!("cannot add {:?} to {:?}", tb.shape(), tx.shape()),
            ));
        }
        let (b, t, n) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let mut data = tx.data().to_vec();
        for bi in 0..b {
            let bias = tb.row(bi);
            for ti in 0..t {
                let off = (bi * t + ti) * n;
                for (v, bv) in data[off..off + n].iter_mut().zip(bias) {
                    *v += bv;
                }
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        self.push(value, Op::AddStepBias(x, per_row), "add_step_bias")
    }

    /// `scale · x + shift`
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let tx = self.value(x);
        let value = Tensor::new(
            tx.shape().to_vec(),
            tx.data().iter().map(|v| scale * v + shift).collect(),
        )?;
        self.push(value, Op::Affine(x, scale), "affine")
    }

    /// `1 − x`
    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        self.affine(x, -1.0, 1.0)
    }

    fn unary(&mut self, x: Var, name: &'static str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let tx = self.value(x);
        let value = Tensor::new(
            tx.shape().to_vec(),
            tx.data().iter().map(|v| f(*v)).collect(),
        )?;
        self.push(value, op, name)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "tanh", f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "sigmoid", sigmoid, Op::Sigmoid(x))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let n = last_dim(tx);
        let mut data = Vec::with_capacity(tx.numel());
        for row in tx.data().chunks(n) {
            data.extend(softmax_slice(row)?);
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        self.push(value, Op::Softmax(x), "softmax")
    }

    /// Concatenates rank-2 tensors along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| dim_err("concat_cols", "no inputs"))?;
        let rows = self.value(*first).shape()[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 2 || t.shape()[0] != rows {
                return Err(dim_err(
                    "concat_cols",
                    format!("part {:?} does not have {rows} rows", t.shape()),
                ));
            }
            widths.push(t.shape()[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        self.push(
            Tensor::new(vec![rows, total], data)?,
            Op::ConcatCols(parts.to_vec()),
            "concat_cols",
        )
    }

    /// Stacks `T` tensors of shape `[B×n]` into `[B×T×n]`.
    pub fn stack_steps(&mut self, steps: &[Var]) -> Result<Var> {
        let first = steps
            .first()
            .ok_or_else(|| dim_err("stack_steps", "no inputs"))?;
        let shape = self.value(*first).shape().to_vec();
        if shape.len() != 2 {
            return Err(dim_err(
                "stack_steps",
                format!("steps must be rank 2, got {shape:?}"),
            ));
        }
        if steps
            .iter()
            .any(|&s| self.value(s).shape() != shape.as_slice())
        {
            return Err(dim_err("stack_steps", "steps differ in shape"));
        }
        let (b, n, t) = (shape[0], shape[1], steps.len());
        let mut data = vec![0.0; b * t * n];
        for (ti, &s) in steps.iter().enumerate() {
            let v = self.value(s);
            for bi in 0..b {
                data[(bi * t + ti) * n..(bi * t + ti + 1) * n].copy_from_slice(v.row(bi));
            }
        }
        self.push(
            Tensor::new(vec![b, t, n], data)?,
            Op::StackSteps(steps.to_vec()),
            "stack_steps",
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshaped(shape)?;
        self.push(value, Op::Reshape(x), "reshape")
    }

    /// Rows of a `[V×d]` table selected by index, giving `[len(indices)×d]`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(dim_err("gather_rows", "table must be rank 2"));
        }
        let (v, d) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= v {
                return Err(dim_err(
                    "gather_rows",
                    format!("index {i} out of range {v}"),
                ));
            }
            data.extend_from_slice(t.row(i));
        }
        if indices.is_empty() {
            return Err(dim_err("gather_rows", "no indices"));
        }
        self.push(
            Tensor::new(vec![indices.len(), d], data)?,
            Op::Gather(table, indices.to_vec()),
            "gather_rows",
        )
    }

    /// Temporal convolution of `[l×e]` or `[B×l×e]` input with a
    /// `[k×e×F]` filter bank at stride `d`; output `[B×⌊(l−k+1)/d⌋×F]`.
    pub fn conv1d(&mut self, input: Var, filters: Var, stride: usize) -> Result<Var> {
        let (ti, tf) = (self.value(input), self.value(filters));
        let (batch, len, channels) = match ti.shape() {
            [l, e] => (1, *l, *e),
            [b, l, e] => (*b, *l, *e),
            s => {
                return Err(dim_err(
                    "conv1d",
                    format!("input must be rank 2 or 3, got {s:?}"),
                ))
            }
        };
        let [width, fe, maps] = *tf.shape() else {
            return Err(dim_err(
                "conv1d",
                format!("filters must be rank 3, got {:?}", tf.shape()),
            ));
        };
        if fe != channels {
            return Err(dim_err(
                "conv1d",
                format!("filter channels {fe} != input channels {channels}"),
            ));
        }
        if stride == 0 {
            return Err(dim_err("conv1d", "stride must be at least 1"));
        }
        if len < width {
            return Err(dim_err(
                "conv1d",
                format!("input length {len} shorter than kernel {width}"),
            ));
        }
        let geo = ConvGeometry {
            batch,
            len,
            channels,
            width,
            maps,
            stride,
        };
        if geo.out_len() == 0 {
            return Err(dim_err("conv1d", "stride leaves no output positions"));
        }
        let data = kernels::conv1d(ti.data(), tf.data(), geo);
        let value = Tensor::new(vec![batch, geo.out_len(), maps], data)?;
        self.push(value, Op::Conv1d(input, filters, geo), "conv1d")
    }

    /// `c[b,:] = Σ_t α[b,t] · h[b,t,:]` for `α: [B×T]`, `h: [B×T×n]`.
    pub fn weighted_sum(&mut self, weights: Var, seq: Var) -> Result<Var> {
        let (tw, th) = (self.value(weights), self.value(seq));
        if tw.rank() != 2 || th.rank() != 3 || tw.shape() != &th.shape()[..2] {
            return Err(dim_err(
                "weighted_sum",
                format!(
                    "weights {:?} do not match sequence {:?}",
                    tw.shape(),
                    th.shape()
                ),
            ));
        }
        let (b, t, n) = (th.shape()[0], th.shape()[1], th.shape()[2]);
        let mut data = vec![0.0; b * n];
        for bi in 0..b {
            let out = &mut data[bi * n..(bi + 1) * n];
            for ti in 0..t {
                let w = tw.data()[bi * t + ti];
                let h = &th.data()[(bi * t + ti) * n..(bi * t + ti + 1) * n];
                for (o, hv) in out.iter_mut().zip(h) {
                    *o += w * hv;
                }
            }
        }
        self.push(
            Tensor::new(vec![b, n], data)?,
            Op::WeightedSum(weights, seq),
            "weighted_sum",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    /// Summed negative log-likelihood of `targets` under the row-wise softmax
    /// of `logits: [B×V]`. `None` rows are masked and contribute nothing.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let tl = self.value(logits);
        if tl.rank() != 2 || tl.shape()[0] != targets.len() {
            return Err(dim_err(
                "softmax_cross_entropy",
                format!("{} targets for logits {:?}", targets.len(), tl.shape()),
            ));
        }
        let v = tl.shape()[1];
        let mut probs = Vec::with_capacity(tl.numel());
        let mut loss = 0.0;
        for (row, target) in tl.data().chunks(v).zip(targets) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let log_z = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            if let Some(t) = *target {
                if t >= v {
                    return Err(dim_err(
                        "softmax_cross_entropy",
                        format!("target {t} out of range {v}"),
                    ));
                }
                loss += log_z - row[t];
            }
            probs.extend(row.iter().map(|x| (x - log_z).exp()));
        }
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy(logits, targets.to_vec(), probs),
            "softmax_cross_entropy",
        )
    }

    /// Reverse pass from a scalar node. Each node is visited exactly once,
    /// in reverse creation order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(lt.shape()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.wants_grad(*a) {
                    let ga = slot(grads, *a, ta.shape());
                    kernels::matmul_nt_acc(ga.data_mut(), g.data(), tb.data(), m, n, k);
                }
                if self.wants_grad(*b) {
                    let gb = slot(grads, *b, tb.shape());
                    kernels::matmul_tn_acc(gb.data_mut(), ta.data(), g.data(), m, k, n);
                }
            }
            Op::Add(a, b) => {
                for x in [*a, *b] {
                    if self.wants_grad(x) {
                        let shape = val(x).shape().to_vec();
                        accumulate_broadcast(slot(grads, x, &shape), g, |_| 1.0);
                    }
                }
            }
            Op::Mul(a, b) => {
                for (x, other) in [(*a, *b), (*b, *a)] {
                    if !self.wants_grad(x) {
                        continue;
                    }
                    let to = val(other);
                    let shape = val(x).shape().to_vec();
                    let gx = slot(grads, x, &shape);
                    if to.is_scalar() && to.numel() != g.numel() {
                        let s = to.item();
                        accumulate_broadcast(gx, g, |_| s);
                    } else {
                        accumulate_broadcast(gx, g, |i| to.data()[i]);
                    }
                }
            }
            Op::AddRowBias(x, bias) => {
                if self.wants_grad(*x) {
                    add_into(slot(grads, *x, g.shape()), g.data());
                }
                if self.wants_grad(*bias) {
                    let n = last_dim(g);
                    let gb = slot(grads, *bias, &[n]);
                    for row in g.data().chunks(n) {
                        add_into(gb, row);
                    }
                }
            }
            Op::AddStepBias(x, per_row) => {
                if self.wants_grad(*x) {
                    add_into(slot(grads, *x, g.shape()), g.data());
                }
                if self.wants_grad(*per_row) {
                    let (b, t, n) = (g.shape()[0], g.shape()[1], g.shape()[2]);
                    let gb = slot(grads, *per_row, &[b, n]);
                    for bi in 0..b {
                        for ti in 0..t {
                            let src = &g.data()[(bi * t + ti) * n..(bi * t + ti + 1) * n];
                            for (d, s) in gb.data_mut()[bi * n..(bi + 1) * n].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                }
            }
            Op::Affine(x, scale) => {
                if self.wants_grad(*x) {
                    let gx = slot(grads, *x, g.shape());
                    for (d, s) in gx.data_mut().iter_mut().zip(g.data()) {
                        *d += scale * s;
                    }
                }
            }
            Op::Tanh(x) => {
                if self.wants_grad(*x) {
                    let y = &node.value;
                    let gx = slot(grads, *x, g.shape());
                    for ((d, s), yv) in gx.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *d += s * (1.0 - yv * yv);
                    }
                }
            }
            Op::Sigmoid(x) => {
                if self.wants_grad(*x) {
                    let y = &node.value;
                    let gx = slot(grads, *x, g.shape());
                    for ((d, s), yv) in gx.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *d += s * yv * (1.0 - yv);
                    }
                }
            }
            Op::Softmax(x) => {
                if self.wants_grad(*x) {
                    let y = &node.value;
                    let n = last_dim(y);
                    let gx = slot(grads, *x, g.shape());
                    for ((dr, gr), yr) in gx
                        .data_mut()
                        .chunks_mut(n)
                        .zip(g.data().chunks(n))
                        .zip(y.data().chunks(n))
                    {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((d, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = g.shape()[1];
                let rows = g.shape()[0];
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).shape()[1];
                    if self.wants_grad(p) {
                        let gp = slot(grads, p, &[rows, w]);
                        for r in 0..rows {
                            let src = &g.data()[r * total + offset..r * total + offset + w];
                            for (d, s) in gp.data_mut()[r * w..(r + 1) * w].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::StackSteps(steps) => {
                let (b, t, n) = (g.shape()[0], g.shape()[1], g.shape()[2]);
                for (ti, &s) in steps.iter().enumerate() {
                    if !self.wants_grad(s) {
                        continue;
                    }
                    let gs = slot(grads, s, &[b, n]);
                    for bi in 0..b {
                        let src = &g.data()[(bi * t + ti) * n..(bi * t + ti + 1) * n];
                        for (d, v) in gs.data_mut()[bi * n..(bi + 1) * n].iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if self.wants_grad(*x) {
                    let shape = val(*x).shape().to_vec();
                    add_into(slot(grads, *x, &shape), g.data());
                }
            }
            Op::Gather(table, indices) => {
                if self.wants_grad(*table) {
                    let shape = val(*table).shape().to_vec();
                    let d = shape[1];
                    let gt = slot(grads, *table, &shape);
                    for (r, &i) in indices.iter().enumerate() {
                        for (dst, s) in gt.data_mut()[i * d..(i + 1) * d]
                            .iter_mut()
                            .zip(&g.data()[r * d..(r + 1) * d])
                        {
                            *dst += s;
                        }
                    }
                }
            }
            Op::Conv1d(input, filters, geo) => {
                let (ti, tf) = (val(*input), val(*filters));
                let mut gi = self.wants_grad(*input).then(|| Tensor::zeros(ti.shape()));
                let mut gf = self.wants_grad(*filters).then(|| Tensor::zeros(tf.shape()));
                kernels::conv1d_backward(
                    ti.data(),
                    tf.data(),
                    g.data(),
                    *geo,
                    gi.as_mut().map(|t| t.data_mut()),
                    gf.as_mut().map(|t| t.data_mut()),
                );
                if let Some(gi) = gi {
                    add_into(slot(grads, *input, ti.shape()), gi.data());
                }
                if let Some(gf) = gf {
                    add_into(slot(grads, *filters, tf.shape()), gf.data());
                }
            }
            Op::WeightedSum(weights, seq) => {
                let (tw, th) = (val(*weights), val(*seq));
                let (b, t, n) = (th.shape()[0], th.shape()[1], th.shape()[2]);
                if self.wants_grad(*weights) {
                    let gw = slot(grads, *weights, &[b, t]);
                    for bi in 0..b {
                        let gr = &g.data()[bi * n..(bi + 1) * n];
                        for ti in 0..t {
                            let h = &th.data()[(bi * t + ti) * n..(bi * t + ti + 1) * n];
                            gw.data_mut()[bi * t + ti] +=
                                gr.iter().zip(h).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
                if self.wants_grad(*seq) {
                    let gh = slot(grads, *seq, &[b, t, n]);
                    for bi in 0..b {
                        let gr = &g.data()[bi * n..(bi + 1) * n];
                        for ti in 0..t {
                            let w = tw.data()[bi * t + ti];
                            let dst = &mut gh.data_mut()[(bi * t + ti) * n..(bi * t + ti + 1) * n];
                            for (d, s) in dst.iter_mut().zip(gr) {
                                *d += w * s;
                            }
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if self.wants_grad(*x) {
                    let shape = val(*x).shape().to_vec();
                    let s = g.item();
                    for d in slot(grads, *x, &shape).data_mut() {
                        *d += s;
                    }
                }
            }
            Op::SoftmaxCrossEntropy(logits, targets, probs) => {
                if self.wants_grad(*logits) {
                    let shape = val(*logits).shape().to_vec();
                    let v = shape[1];
                    let s = g.item();
                    let gl = slot(grads, *logits, &shape);
                    for (r, target) in targets.iter().enumerate() {
                        let Some(t) = *target else { continue };
                        let row = &mut gl.data_mut()[r * v..(r + 1) * v];
                        for (j, d) in row.iter_mut().enumerate() {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            *d += s * (probs[r * v + j] - onehot);
                        }
                    }
                }
            }
        }
    }

    /// Constants never need gradients; everything else might.
    fn wants_grad(&self, v: Var) -> bool {
        !matches!(self.nodes[v.0].op, Op::Constant)
    }
}

fn slot<'a>(grads: &'a mut [Option<Tensor>], v: Var, shape: &[usize]) -> &'a mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
}

fn add_into(dst: &mut Tensor, src: &[f64]) {
    for (d, s) in dst.data_mut().iter_mut().zip(src) {
        *d += s;
    }
}

/// Adds `g[i] · factor(i)` into `dst`, summing when `dst` is a broadcast scalar.
fn accumulate_broadcast(dst: &mut Tensor, g: &Tensor, factor: impl Fn(usize) -> f64) {
    if dst.numel() == g.numel() {
        for (i, (d, s)) in dst.data_mut().iter_mut().zip(g.data()).enumerate() {
            *d += s * factor(i);
        }
    } else {
        let total: f64 = g
            .data()
            .iter()
            .enumerate()
            .map(|(i, s)| s * factor(i))
            .sum();
        dst.data_mut()[0] += total;
    }
}
