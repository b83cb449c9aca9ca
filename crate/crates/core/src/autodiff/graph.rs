use super::tensor::{gemm, MatRef};
use super::{AutodiffError, Tensor};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    /// Row-wise softmax.
    Softmax,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LossKind {
    Mse,
    /// Binary cross entropy with predictions clamped to `[clamp, 1 - clamp]`.
    Bce {
        clamp: f64,
    },
}

impl LossKind {
    pub const DEFAULT_BCE_CLAMP: f64 = 1e-7;

    pub fn bce() -> Self {
        LossKind::Bce {
            clamp: Self::DEFAULT_BCE_CLAMP,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Act(Activation, Var),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    SelectCols(Var, Vec<usize>),
    Mix { weights: Var, maps: Var },
    Sum(Var),
    SumSquares(Var),
    Loss(LossKind, Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run computation record.
///
/// Every primitive appends one entry whose inputs were recorded earlier, so
/// the entry list is always in topological order. A graph is confined to a
/// single unit of work and dropped (or truncated) after its backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Reverse-mode derivatives of a scalar with respect to every recorded value.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` when the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn finite(op: &'static str, t: Tensor) -> Result<Tensor, AutodiffError> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(AutodiffError::NonFinite { op })
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_rows(x: &Tensor) -> Result<Tensor, AutodiffError> {
    let (r, c) = x.dims2()?;
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Tensor::new(vec![r, c], out)
}

pub(crate) fn apply_activation(kind: Activation, x: &Tensor) -> Result<Tensor, AutodiffError> {
    match kind {
        Activation::Relu => Ok(x.map(|v| v.max(0.0))),
        Activation::Sigmoid => Ok(x.map(sigmoid)),
        Activation::Softmax => softmax_rows(x),
    }
}

fn loss_value(kind: LossKind, pred: &Tensor, target: &Tensor) -> Result<f64, AutodiffError> {
    if pred.shape() != target.shape() {
        return Err(mismatch("loss", pred, target));
    }
    let n = pred.numel() as f64;
    let total: f64 = match kind {
        LossKind::Mse => pred
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum(),
        LossKind::Bce { clamp } => pred
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| {
                let p = p.clamp(clamp, 1.0 - clamp);
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum(),
    };
    Ok(total / n)
}

/// Evaluate a loss without recording it.
pub fn reduce_loss(kind: LossKind, pred: &Tensor, target: &Tensor) -> Result<f64, AutodiffError> {
    let v = loss_value(kind, pred, target)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(AutodiffError::NonFinite { op: "loss" })
    }
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

    /// Current length; pass to [`Graph::truncate`] to discard later entries.
    pub fn mark(&self) -> usize {
        self.nodes.len()
    }

    /// Drop all entries recorded after `mark`. Handles created after the
    /// mark become invalid.
    pub fn truncate(&mut self, mark: usize) {
        self.nodes.truncate(mark);
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(
        &mut self,
        op_name: &'static str,
        value: Tensor,
        op: Op,
        inputs: &[Var],
    ) -> Result<Var, AutodiffError> {
        let value = finite(op_name, value)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let out = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let out = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    /// Adds the row vector `bias` (length `cols`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, AutodiffError> {
        let (r, c) = self.value(a).dims2()?;
        let b = self.value(bias);
        if b.numel() != c {
            return Err(mismatch("add_row", self.value(a), b));
        }
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(c) {
            for (o, bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        let out = Tensor::new(vec![r, c], out)?;
        self.push("add_row", out, Op::AddRow(a, bias), &[a, bias])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, AutodiffError> {
        let out = self.value(a).map(|v| v * factor);
        self.push("scale", out, Op::Scale(a, factor), &[a])
    }

    pub fn activation(&mut self, kind: Activation, x: Var) -> Result<Var, AutodiffError> {
        let out = apply_activation(kind, self.value(x))?;
        self.push("activation", out, Op::Act(kind, x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.activation(Activation::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.activation(Activation::Sigmoid, x)
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.activation(Activation::Softmax, x)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let out = self.value(a).transpose()?;
        self.push("transpose", out, Op::Transpose(a), &[a])
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let first = parts.first().ok_or(AutodiffError::Empty("concat_rows"))?;
        let c = self.value(*first).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let t = self.value(*p);
            let (r, pc) = t.dims2()?;
            if pc != c {
                return Err(mismatch("concat_rows", self.value(*first), t));
            }
            rows += r;
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![rows, c], data)?;
        self.push("concat_rows", out, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Places matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let first = parts.first().ok_or(AutodiffError::Empty("concat_cols"))?;
        let r = self.value(*first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let t = self.value(*p);
            let (pr, pc) = t.dims2()?;
            if pr != r {
                return Err(mismatch("concat_cols", self.value(*first), t));
            }
            widths.push(pc);
        }
        let c: usize = widths.iter().sum();
        let mut data = vec![0.0; r * c];
        let mut offset = 0;
        for (p, w) in parts.iter().zip(&widths) {
            let t = self.value(*p);
            for i in 0..r {
                data[i * c + offset..i * c + offset + w].copy_from_slice(t.row(i));
            }
            offset += w;
        }
        let out = Tensor::new(vec![r, c], data)?;
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Gathers rows by index (indices may repeat).
    pub fn select_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var, AutodiffError> {
        if indices.is_empty() {
            return Err(AutodiffError::Empty("select_rows"));
        }
        let t = self.value(a);
        let (r, c) = t.dims2()?;
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= r {
                return Err(AutodiffError::Index { index: i, size: r });
            }
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(vec![indices.len(), c], data)?;
        self.push(
            "select_rows",
            out,
            Op::SelectRows(a, indices.to_vec()),
            &[a],
        )
    }

    /// Gathers columns by index (indices may repeat).
    pub fn select_cols(&mut self, a: Var, indices: &[usize]) -> Result<Var, AutodiffError> {
        if indices.is_empty() {
            return Err(AutodiffError::Empty("select_cols"));
        }
        let t = self.value(a);
        let (r, c) = t.dims2()?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= c) {
            return Err(AutodiffError::Index {
                index: bad,
                size: c,
            });
        }
        let mut data = Vec::with_capacity(r * indices.len());
        for i in 0..r {
            let row = t.row(i);
            data.extend(indices.iter().map(|&j| row[j]));
        }
        let out = Tensor::new(vec![r, indices.len()], data)?;
        self.push(
            "select_cols",
            out,
            Op::SelectCols(a, indices.to_vec()),
            &[a],
        )
    }

    /// Per-row convex combination of stacked linear-map outputs.
    ///
    /// `weights` is `R × K` and `maps` is `R × (K·d)` where block `k` of row
    /// `r` holds the `d`-vector produced by map `k`. Output row `r` is
    /// `Σ_k weights[r,k] · maps[r, k·d .. (k+1)·d]`.
    pub fn mix(&mut self, weights: Var, maps: Var) -> Result<Var, AutodiffError> {
        let w = self.value(weights);
        let z = self.value(maps);
        let (r, k) = w.dims2()?;
        let (zr, zc) = z.dims2()?;
        if zr != r || zc % k != 0 {
            return Err(mismatch("mix", w, z));
        }
        let d = zc / k;
        let mut out = vec![0.0; r * d];
        for i in 0..r {
            let wr = w.row(i);
            let zrow = z.row(i);
            let orow = &mut out[i * d..(i + 1) * d];
            for (kk, &wk) in wr.iter().enumerate() {
                for (o, zv) in orow.iter_mut().zip(&zrow[kk * d..(kk + 1) * d]) {
                    *o += wk * zv;
                }
            }
        }
        let out = Tensor::new(vec![r, d], out)?;
        self.push("mix", out, Op::Mix { weights, maps }, &[weights, maps])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push("sum", out, Op::Sum(a), &[a])
    }

    /// Sum of squared entries.
    pub fn sum_squares(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let out = Tensor::scalar(self.value(a).data().iter().map(|v| v * v).sum());
        self.push("sum_squares", out, Op::SumSquares(a), &[a])
    }

    pub fn loss(&mut self, kind: LossKind, pred: Var, target: Var) -> Result<Var, AutodiffError> {
        let v = loss_value(kind, self.value(pred), self.value(target))?;
        self.push(
            "loss",
            Tensor::scalar(v),
            Op::Loss(kind, pred, target),
            &[pred, target],
        )
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AutodiffError> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(AutodiffError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Tensor>],
        v: Var,
        g: Tensor,
    ) -> Result<(), AutodiffError> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(
        &self,
        idx: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<(), AutodiffError> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = av.dims2()?;
                let (_, n) = bv.dims2()?;
                if self.wants(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(
                        MatRef::new(g.data(), m, n, false),
                        MatRef::new(bv.data(), k, n, true),
                        &mut ga,
                        false,
                    );
                    self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), ga)?)?;
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(
                        MatRef::new(av.data(), m, k, true),
                        MatRef::new(g.data(), m, n, false),
                        &mut gb,
                        false,
                    );
                    self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), gb)?)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.map(|v| -v))?;
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let ga = g.zip_map(self.value(*b), "mul", |x, y| x * y)?;
                    self.accumulate(grads, *a, ga)?;
                }
                if self.wants(*b) {
                    let gb = g.zip_map(self.value(*a), "mul", |x, y| x * y)?;
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::AddRow(a, bias) => {
                self.accumulate(grads, *a, g.clone())?;
                if self.wants(*bias) {
                    let bshape = self.value(*bias).shape().to_vec();
                    let c = g.cols();
                    let mut gb = vec![0.0; c];
                    for row in g.data().chunks(c) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::new(bshape, gb)?)?;
                }
            }
            Op::Scale(a, f) => {
                let f = *f;
                self.accumulate(grads, *a, g.map(|v| v * f))?;
            }
            Op::Act(kind, x) => {
                let gx = match kind {
                    Activation::Relu => {
                        g.zip_map(
                            self.value(*x),
                            "relu",
                            |gv, xv| if xv > 0.0 { gv } else { 0.0 },
                        )?
                    }
                    Activation::Sigmoid => {
                        g.zip_map(&node.value, "sigmoid", |gv, y| gv * y * (1.0 - y))?
                    }
                    Activation::Softmax => {
                        let y = &node.value;
                        let c = y.cols();
                        let mut out = vec![0.0; y.numel()];
                        for ((orow, yrow), grow) in out
                            .chunks_mut(c)
                            .zip(y.data().chunks(c))
                            .zip(g.data().chunks(c))
                        {
                            let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                            for ((o, yv), gv) in orow.iter_mut().zip(yrow).zip(grow) {
                                *o = yv * (gv - dot);
                            }
                        }
                        Tensor::new(y.shape().to_vec(), out)?
                    }
                };
                self.accumulate(grads, *x, gx)?;
            }
            Op::Transpose(a) => {
                let gt = g.transpose()?.reshape(self.value(*a).shape().to_vec())?;
                self.accumulate(grads, *a, gt)?;
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut offset = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let n = pv.numel();
                    if self.wants(*p) {
                        let slice = g.data()[offset..offset + n].to_vec();
                        self.accumulate(grads, *p, Tensor::new(pv.shape().to_vec(), slice)?)?;
                    }
                    offset += n;
                    debug_assert_eq!(n % c, 0);
                }
            }
            Op::ConcatCols(parts) => {
                let (r, c) = g.dims2()?;
                let mut offset = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let w = pv.cols();
                    if self.wants(*p) {
                        let mut part = Vec::with_capacity(r * w);
                        for i in 0..r {
                            part.extend_from_slice(&g.data()[i * c + offset..i * c + offset + w]);
                        }
                        self.accumulate(grads, *p, Tensor::new(pv.shape().to_vec(), part)?)?;
                    }
                    offset += w;
                }
            }
            Op::SelectRows(a, indices) => {
                let av = self.value(*a);
                let c = av.cols();
                let mut ga = vec![0.0; av.numel()];
                for (k, &i) in indices.iter().enumerate() {
                    for (o, v) in ga[i * c..(i + 1) * c]
                        .iter_mut()
                        .zip(&g.data()[k * c..(k + 1) * c])
                    {
                        *o += v;
                    }
                }
                self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), ga)?)?;
            }
            Op::SelectCols(a, indices) => {
                let av = self.value(*a);
                let c = av.cols();
                let w = indices.len();
                let mut ga = vec![0.0; av.numel()];
                for (i, grow) in g.data().chunks(w).enumerate() {
                    for (&j, v) in indices.iter().zip(grow) {
                        ga[i * c + j] += v;
                    }
                }
                self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), ga)?)?;
            }
            Op::Mix { weights, maps } => {
                let w = self.value(*weights);
                let z = self.value(*maps);
                let (r, k) = w.dims2()?;
                let d = g.cols();
                if self.wants(*weights) {
                    let mut gw = vec![0.0; r * k];
                    for i in 0..r {
                        let grow = g.row(i);
                        let zrow = z.row(i);
                        for kk in 0..k {
                            gw[i * k + kk] = grow
                                .iter()
                                .zip(&zrow[kk * d..(kk + 1) * d])
                                .map(|(a, b)| a * b)
                                .sum();
                        }
                    }
                    self.accumulate(grads, *weights, Tensor::new(w.shape().to_vec(), gw)?)?;
                }
                if self.wants(*maps) {
                    let mut gz = vec![0.0; z.numel()];
                    for i in 0..r {
                        let grow = g.row(i);
                        let wrow = w.row(i);
                        let zc = k * d;
                        for (kk, &wk) in wrow.iter().enumerate() {
                            for (o, gv) in gz[i * zc + kk * d..i * zc + (kk + 1) * d]
                                .iter_mut()
                                .zip(grow)
                            {
                                *o = wk * gv;
                            }
                        }
                    }
                    self.accumulate(grads, *maps, Tensor::new(z.shape().to_vec(), gz)?)?;
                }
            }
            Op::Sum(a) => {
                let s = g.item();
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::full(&shape, s))?;
            }
            Op::SumSquares(a) => {
                let s = 2.0 * g.item();
                self.accumulate(grads, *a, self.value(*a).map(|v| s * v))?;
            }
            Op::Loss(kind, pred, target) => {
                let s = g.item();
                let p = self.value(*pred);
                let t = self.value(*target);
                let n = p.numel() as f64;
                match *kind {
                    LossKind::Mse => {
                        let c = 2.0 * s / n;
                        if self.wants(*pred) {
                            self.accumulate(
                                grads,
                                *pred,
                                p.zip_map(t, "mse", |a, b| c * (a - b))?,
                            )?;
                        }
                        if self.wants(*target) {
                            self.accumulate(
                                grads,
                                *target,
                                p.zip_map(t, "mse", |a, b| c * (b - a))?,
                            )?;
                        }
                    }
                    LossKind::Bce { clamp } => {
                        let c = s / n;
                        if self.wants(*pred) {
                            let gp = p.zip_map(t, "bce", |pv, tv| {
                                if pv < clamp || pv > 1.0 - clamp {
                                    0.0
                                } else {
                                    c * (-tv / pv + (1.0 - tv) / (1.0 - pv))
                                }
                            })?;
                            self.accumulate(grads, *pred, gp)?;
                        }
                        if self.wants(*target) {
                            let gt = p.map(|pv| {
                                let pc = pv.clamp(clamp, 1.0 - clamp);
                                -c * (pc.ln() - (1.0 - pc).ln())
                            });
                            self.accumulate(grads, *target, gt)?;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
