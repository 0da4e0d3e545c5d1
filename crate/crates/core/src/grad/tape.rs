use std::sync::atomic::{AtomicU64, Ordering};

use super::conv::{self, Conv1dSpec, Geometry};
use super::{GradError, Result, Scalar, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    id: usize,
    tape: u64,
}

#[derive(Clone, Copy, Debug)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum UnKind {
    Relu,
    Tanh,
    Sin,
    Cos,
    Acos,
    Square,
    Sqrt,
}

impl UnKind {
    fn name(self) -> &'static str {
        match self {
            UnKind::Relu => "relu",
            UnKind::Tanh => "tanh",
            UnKind::Sin => "sin",
            UnKind::Cos => "cos",
            UnKind::Acos => "acos",
            UnKind::Square => "square",
            UnKind::Sqrt => "sqrt",
        }
    }

    fn apply<S: Scalar>(self, x: S) -> S {
        match self {
            UnKind::Relu => x.max(S::zero()),
            UnKind::Tanh => x.tanh(),
            UnKind::Sin => x.sin(),
            UnKind::Cos => x.cos(),
            UnKind::Acos => x.acos(),
            UnKind::Square => x * x,
            UnKind::Sqrt => x.sqrt(),
        }
    }

    /// Derivative given input `x` and output `y`. Kinks take subgradient 0.
    fn derivative<S: Scalar>(self, x: S, y: S) -> S {
        let two = S::of(2.0);
        match self {
            UnKind::Relu => {
                if x > S::zero() {
                    S::one()
                } else {
                    S::zero()
                }
            }
            UnKind::Tanh => S::one() - y * y,
            UnKind::Sin => x.cos(),
            UnKind::Cos => -x.sin(),
            UnKind::Acos => -(S::one() - x * x).sqrt().recip(),
            UnKind::Square => two * x,
            UnKind::Sqrt => (two * y).recip(),
        }
    }
}

/// `[outer, n, inner]` view of a shape around `axis`.
#[derive(Clone, Copy, Debug)]
struct AxisView {
    outer: usize,
    n: usize,
    inner: usize,
}

impl AxisView {
    fn of(shape: &[usize], axis: usize) -> Self {
        Self {
            outer: shape[..axis].iter().product(),
            n: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        }
    }
}

/// Maps an lhs flat index to the rhs index it pairs with.
#[derive(Clone, Debug)]
enum Bcast {
    /// Equal shapes, a single value, or a trailing suffix.
    Modulo(usize),
    /// Equal rank, rhs dims either 1 or equal to the lhs dim.
    Strided { dims: Vec<usize>, rhs_strides: Vec<usize> },
}

impl Bcast {
    fn resolve(sa: &[usize], sb: &[usize]) -> Option<Self> {
        let nb = sb.iter().product::<usize>();
        if sa == sb || nb == 1 || (sb.len() < sa.len() && sa.ends_with(sb)) {
            return Some(Bcast::Modulo(nb));
        }
        if sa.len() != sb.len() || sa.iter().zip(sb).any(|(&x, &y)| y != 1 && y != x) {
            return None;
        }
        let mut rhs_strides = vec![0; sb.len()];
        let mut acc = 1;
        for d in (0..sb.len()).rev() {
            if sb[d] != 1 {
                rhs_strides[d] = acc;
            }
            acc *= sb[d];
        }
        Some(Bcast::Strided {
            dims: sa.to_vec(),
            rhs_strides,
        })
    }

    #[inline]
    fn map(&self, mut i: usize) -> usize {
        match self {
            Bcast::Modulo(nb) => i % nb,
            Bcast::Strided { dims, rhs_strides } => {
                let mut j = 0;
                for d in (0..dims.len()).rev() {
                    j += (i % dims[d]) * rhs_strides[d];
                    i /= dims[d];
                }
                j
            }
        }
    }
}

enum Op<S> {
    Leaf,
    Binary { kind: BinKind, a: usize, b: usize, bc: Bcast },
    Scale { x: usize, c: S },
    Offset { x: usize },
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Conv { x: usize, w: usize, bias: Option<usize>, geom: Geometry },
    Unary { kind: UnKind, x: usize },
    Clamp { x: usize, lo: S, hi: S },
    Sum { x: usize },
    Mean { x: usize },
    ReduceAxis { x: usize, view: AxisView, mean: bool },
    L2Normalize { x: usize, dim: usize, norms: Vec<S> },
    Concat { parts: Vec<(usize, usize)>, outer: usize, inner: usize },
    Slice { x: usize, view: AxisView, start: usize, len: usize },
    Reshape { x: usize },
    Gather { x: usize, rows: Vec<usize>, row_len: usize },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Records a forward computation for a single reverse pass.
///
/// A tape is confined to one thread; distinct tapes are independent. After
/// [`backward`](Tape::backward) runs, the tape refuses a second pass.
pub struct Tape<S> {
    id: u64,
    nodes: Vec<Node<S>>,
    grads: Option<Vec<Option<Vec<S>>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.id >= self.nodes.len() {
            return Err(GradError::ForeignVar);
        }
        Ok(v.id)
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(GradError::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var {
            id: self.nodes.len() - 1,
            tape: self.id,
        })
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad, "leaf")
    }

    /// Trainable leaf: gradients are collected for it.
    pub fn param(&mut self, value: Tensor<S>) -> Result<Var> {
        self.leaf(value, true)
    }

    /// Frozen leaf: treated as a constant by backward.
    pub fn constant(&mut self, value: Tensor<S>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<S>> {
        let id = self.check(v)?;
        Ok(&self.nodes[id].value)
    }

    pub fn shape(&self, v: Var) -> Result<&[usize]> {
        Ok(self.value(v)?.shape())
    }

    pub fn requires_grad(&self, v: Var) -> Result<bool> {
        let id = self.check(v)?;
        Ok(self.nodes[id].needs_grad)
    }

    fn val(&self, id: usize) -> &[S] {
        self.nodes[id].value.values()
    }

    fn shp(&self, id: usize) -> &[usize] {
        self.nodes[id].value.shape()
    }

    fn ng(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    // ---- elementwise binary (rhs broadcast: equal shape, a single value, a
    // trailing-dimension suffix of the lhs shape, or equal rank with size-1
    // dims) ----

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        let name = match kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
            BinKind::Div => "div",
        };
        let (sa, sb) = (self.shp(a), self.shp(b));
        let Some(bc) = Bcast::resolve(sa, sb) else {
            return Err(GradError::ShapeMismatch {
                op: name,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        };
        let (va, vb) = (self.val(a), self.val(b));
        let values: Vec<S> = va
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = vb[bc.map(i)];
                match kind {
                    BinKind::Add => x + y,
                    BinKind::Sub => x - y,
                    BinKind::Mul => x * y,
                    BinKind::Div => x / y,
                }
            })
            .collect();
        let value = Tensor::from_parts(sa.to_vec(), values);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Binary { kind, a, b, bc }, ng, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Div, a, b)
    }

    pub fn scale(&mut self, x: Var, c: S) -> Result<Var> {
        let x = self.check(x)?;
        let value = Tensor::from_parts(self.shp(x).to_vec(), self.val(x).iter().map(|&v| v * c).collect());
        let ng = self.ng(x);
        self.push(value, Op::Scale { x, c }, ng, "scale")
    }

    /// `x + c` for a constant scalar `c`.
    pub fn offset(&mut self, x: Var, c: S) -> Result<Var> {
        let x = self.check(x)?;
        let value = Tensor::from_parts(self.shp(x).to_vec(), self.val(x).iter().map(|&v| v + c).collect());
        let ng = self.ng(x);
        self.push(value, Op::Offset { x }, ng, "offset")
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.shp(a), self.shp(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(GradError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (va, vb) = (self.val(a), self.val(b));
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = va[i * k + p];
                for (o, &bv) in orow.iter_mut().zip(&vb[p * n..(p + 1) * n]) {
                    *o = *o + av * bv;
                }
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul { a, b, m, k, n }, ng, "matmul")
    }

    /// Cross-correlation of `x: [batch, c_in, len]` with `w: [c_out, c_in, kernel]`
    /// plus an optional per-channel `bias: [c_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, bias: Option<Var>, spec: Conv1dSpec) -> Result<Var> {
        let (x, w) = (self.check(x)?, self.check(w)?);
        let bias = bias.map(|b| self.check(b)).transpose()?;
        let (sx, sw) = (self.shp(x), self.shp(w));
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[1] {
            return Err(GradError::ShapeMismatch {
                op: "conv1d",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        let len_out = conv::conv1d_output_len(sx[2], sw[2], spec).ok_or_else(|| GradError::Invalid {
            op: "conv1d",
            detail: format!("kernel {} does not fit input {:?} with {spec:?}", sw[2], sx),
        })?;
        if let Some(b) = bias {
            if self.shp(b) != [sw[0]] {
                return Err(GradError::ShapeMismatch {
                    op: "conv1d bias",
                    lhs: sw.to_vec(),
                    rhs: self.shp(b).to_vec(),
                });
            }
        }
        let geom = Geometry {
            batch: sx[0],
            c_in: sx[1],
            c_out: sw[0],
            len: sx[2],
            kernel: sw[2],
            len_out,
            spec,
        };
        let out = conv::forward(geom, self.val(x), self.val(w), bias.map(|b| self.val(b)));
        let ng = self.ng(x) || self.ng(w) || bias.is_some_and(|b| self.ng(b));
        let value = Tensor::from_parts(vec![geom.batch, geom.c_out, len_out], out);
        self.push(value, Op::Conv { x, w, bias, geom }, ng, "conv1d")
    }

    fn unary(&mut self, kind: UnKind, x: Var) -> Result<Var> {
        let x = self.check(x)?;
        let value = Tensor::from_parts(self.shp(x).to_vec(), self.val(x).iter().map(|&v| kind.apply(v)).collect());
        let ng = self.ng(x);
        self.push(value, Op::Unary { kind, x }, ng, kind.name())
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnKind::Relu, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(UnKind::Tanh, x)
    }

    pub fn sin(&mut self, x: Var) -> Result<Var> {
        self.unary(UnKind::Sin, x)
    }

    pub fn cos(&mut self, x: Var) -> Result<Var> {
        self.unary(UnKind::Cos, x)
    }

    /// Inputs must lie in `[-1, 1]`; the gradient is infinite at the ends.
    pub fn acos(&mut self, x: Var) -> Result<Var> {
        self.unary(UnKind::Acos, x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(UnKind::Square, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(UnKind::Sqrt, x)
    }

    /// Gradient passes only strictly inside `(lo, hi)`.
    pub fn clamp(&mut self, x: Var, lo: S, hi: S) -> Result<Var> {
        let x = self.check(x)?;
        if lo > hi {
            return Err(GradError::Invalid {
                op: "clamp",
                detail: format!("lower bound {lo} above upper bound {hi}"),
            });
        }
        let value = Tensor::from_parts(self.shp(x).to_vec(), self.val(x).iter().map(|&v| v.max(lo).min(hi)).collect());
        let ng = self.ng(x);
        self.push(value, Op::Clamp { x, lo, hi }, ng, "clamp")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let x = self.check(x)?;
        let total: S = self.val(x).iter().copied().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(total), Op::Sum { x }, ng, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let x = self.check(x)?;
        let v = self.val(x);
        let m = v.iter().copied().sum::<S>() / S::of(v.len() as f64);
        let ng = self.ng(x);
        self.push(Tensor::scalar(m), Op::Mean { x }, ng, "mean")
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let x = self.check(x)?;
        let shape = self.shp(x).to_vec();
        if axis >= shape.len() {
            return Err(GradError::Invalid {
                op: "reduce_axis",
                detail: format!("axis {axis} out of range for {shape:?}"),
            });
        }
        let view = AxisView::of(&shape, axis);
        let v = self.val(x);
        let scale = if mean { S::of(view.n as f64).recip() } else { S::one() };
        let mut out = vec![S::zero(); view.outer * view.inner];
        for o in 0..view.outer {
            for j in 0..view.n {
                let src = &v[(o * view.n + j) * view.inner..][..view.inner];
                for (d, &s) in out[o * view.inner..(o + 1) * view.inner].iter_mut().zip(src) {
                    *d = *d + s;
                }
            }
        }
        if mean {
            out.iter_mut().for_each(|v| *v = *v * scale);
        }
        let mut out_shape: Vec<usize> = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let ng = self.ng(x);
        self.push(Tensor::from_parts(out_shape, out), Op::ReduceAxis { x, view, mean }, ng, "reduce_axis")
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    /// Normalise every vector along the last axis to unit L2 norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let x = self.check(x)?;
        let shape = self.shp(x).to_vec();
        let dim = *shape.last().expect("non-empty shape");
        let v = self.val(x);
        let mut out = Vec::with_capacity(v.len());
        let mut norms = Vec::with_capacity(v.len() / dim);
        for row in v.chunks(dim) {
            let n = row.iter().map(|&a| a * a).sum::<S>().sqrt();
            if n <= S::zero() {
                return Err(GradError::NonFinite { op: "l2_normalize" });
            }
            norms.push(n);
            out.extend(row.iter().map(|&a| a / n));
        }
        let ng = self.ng(x);
        self.push(Tensor::from_parts(shape, out), Op::L2Normalize { x, dim, norms }, ng, "l2_normalize")
    }

    /// Join along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(GradError::Invalid {
                op: "concat",
                detail: "no inputs".into(),
            });
        }
        let ids = parts.iter().map(|&p| self.check(p)).collect::<Result<Vec<_>>>()?;
        let first = self.shp(ids[0]).to_vec();
        if axis >= first.len() {
            return Err(GradError::Invalid {
                op: "concat",
                detail: format!("axis {axis} out of range for {first:?}"),
            });
        }
        for &id in &ids[1..] {
            let s = self.shp(id);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(GradError::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
        }
        let view = AxisView::of(&first, axis);
        let lens: Vec<usize> = ids.iter().map(|&id| self.shp(id)[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(view.outer * total * view.inner);
        for o in 0..view.outer {
            for (&id, &n) in ids.iter().zip(&lens) {
                out.extend_from_slice(&self.val(id)[o * n * view.inner..(o + 1) * n * view.inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let ng = ids.iter().any(|&id| self.ng(id));
        let op = Op::Concat {
            parts: ids.into_iter().zip(lens).collect(),
            outer: view.outer,
            inner: view.inner,
        };
        self.push(Tensor::from_parts(shape, out), op, ng, "concat")
    }

    /// `x[.., start..start + len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let x = self.check(x)?;
        let shape = self.shp(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(GradError::Invalid {
                op: "slice",
                detail: format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            });
        }
        let view = AxisView::of(&shape, axis);
        let v = self.val(x);
        let mut out = Vec::with_capacity(view.outer * len * view.inner);
        for o in 0..view.outer {
            out.extend_from_slice(&v[(o * view.n + start) * view.inner..(o * view.n + start + len) * view.inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let ng = self.ng(x);
        self.push(Tensor::from_parts(out_shape, out), Op::Slice { x, view, start, len }, ng, "slice")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let x = self.check(x)?;
        let value = self.nodes[x].value.clone().reshaped(shape.to_vec())?;
        let ng = self.ng(x);
        self.push(value, Op::Reshape { x }, ng, "reshape")
    }

    /// Select rows along the first axis; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let x = self.check(x)?;
        let shape = self.shp(x).to_vec();
        if rows.is_empty() || rows.iter().any(|&r| r >= shape[0]) {
            return Err(GradError::Invalid {
                op: "gather_rows",
                detail: format!("indices must be non-empty and below {}", shape[0]),
            });
        }
        let row_len: usize = shape[1..].iter().product();
        let v = self.val(x);
        let mut values = Vec::with_capacity(rows.len() * row_len);
        for &r in rows {
            values.extend_from_slice(&v[r * row_len..(r + 1) * row_len]);
        }
        let mut out_shape = shape;
        out_shape[0] = rows.len();
        let ng = self.ng(x);
        self.push(
            Tensor::from_parts(out_shape, values),
            Op::Gather {
                x,
                rows: rows.to_vec(),
                row_len,
            },
            ng,
            "gather_rows",
        )
    }

    // ---- reverse pass ----

    /// Populate gradients of `loss` with respect to every leaf that requires
    /// them. Allowed once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = self.check(loss)?;
        if self.grads.is_some() {
            return Err(GradError::BackwardAlreadyRun);
        }
        if self.nodes[root].value.numel() != 1 {
            return Err(GradError::NonScalarLoss(self.shp(root).to_vec()));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(vec![S::one()]);

        for id in (0..=root).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads)?;
        }
        self.grads = Some(grads);
        Ok(())
    }

    /// Gradient for a leaf after [`backward`](Tape::backward); leaves that did
    /// not participate get zeros.
    pub fn grad(&self, v: Var) -> Result<Vec<S>> {
        let id = self.check(v)?;
        let grads = self.grads.as_ref().ok_or(GradError::NoGradients)?;
        if !matches!(self.nodes[id].op, Op::Leaf) {
            return Err(GradError::Invalid {
                op: "grad",
                detail: "gradients are retained for leaves only".into(),
            });
        }
        Ok(grads[id]
            .clone()
            .unwrap_or_else(|| vec![S::zero(); self.nodes[id].value.numel()]))
    }

    fn accumulate(&self, grads: &mut [Option<Vec<S>>], id: usize, contrib: Vec<S>) -> Result<()> {
        if !self.ng(id) {
            return Ok(());
        }
        if contrib.iter().any(|v| !v.is_finite()) {
            return Err(GradError::NonFinite { op: "backward" });
        }
        match &mut grads[id] {
            Some(existing) => existing.iter_mut().zip(contrib).for_each(|(e, c)| *e = *e + c),
            slot @ None => *slot = Some(contrib),
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[S], grads: &mut [Option<Vec<S>>]) -> Result<()> {
        let out = self.val(id);
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Binary { kind, a, b, bc } => {
                let (a, b) = (*a, *b);
                let (va, vb) = (self.val(a), self.val(b));
                let nb = vb.len();
                if self.ng(a) {
                    let ga = match kind {
                        BinKind::Add | BinKind::Sub => g.to_vec(),
                        BinKind::Mul => g.iter().enumerate().map(|(i, &gi)| gi * vb[bc.map(i)]).collect(),
                        BinKind::Div => g.iter().enumerate().map(|(i, &gi)| gi / vb[bc.map(i)]).collect(),
                    };
                    self.accumulate(grads, a, ga)?;
                }
                if self.ng(b) {
                    let mut gb = vec![S::zero(); nb];
                    for (i, &gi) in g.iter().enumerate() {
                        let j = bc.map(i);
                        let d = match kind {
                            BinKind::Add => gi,
                            BinKind::Sub => -gi,
                            BinKind::Mul => gi * va[i],
                            BinKind::Div => {
                                let y = vb[j];
                                -gi * va[i] / (y * y)
                            }
                        };
                        gb[j] = gb[j] + d;
                    }
                    self.accumulate(grads, b, gb)?;
                }
            }
            Op::Scale { x, c } => self.accumulate(grads, *x, g.iter().map(|&v| v * *c).collect())?,
            Op::Offset { x } => self.accumulate(grads, *x, g.to_vec())?,
            Op::MatMul { a, b, m, k, n } => {
                let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
                if self.ng(a) {
                    let vb = self.val(b);
                    let mut ga = vec![S::zero(); m * k];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            ga[i * k + p] = grow.iter().zip(&vb[p * n..(p + 1) * n]).map(|(&x, &y)| x * y).sum();
                        }
                    }
                    self.accumulate(grads, a, ga)?;
                }
                if self.ng(b) {
                    let va = self.val(a);
                    let mut gb = vec![S::zero(); k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = va[i * k + p];
                            for (o, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o = *o + av * gv;
                            }
                        }
                    }
                    self.accumulate(grads, b, gb)?;
                }
            }
            Op::Conv { x, w, bias, geom } => {
                let need_db = bias.is_some_and(|b| self.ng(b));
                let cg = conv::backward(*geom, self.val(*x), self.val(*w), g, self.ng(*x), self.ng(*w), need_db);
                if let Some(dx) = cg.dx {
                    self.accumulate(grads, *x, dx)?;
                }
                if let Some(dw) = cg.dw {
                    self.accumulate(grads, *w, dw)?;
                }
                if let (Some(db), Some(b)) = (cg.db, bias) {
                    self.accumulate(grads, *b, db)?;
                }
            }
            Op::Unary { kind, x } => {
                let vx = self.val(*x);
                let gx = g
                    .iter()
                    .zip(vx)
                    .zip(out)
                    .map(|((&gi, &xi), &yi)| if gi == S::zero() { gi } else { gi * kind.derivative(xi, yi) })
                    .collect();
                self.accumulate(grads, *x, gx)?;
            }
            Op::Clamp { x, lo, hi } => {
                let vx = self.val(*x);
                let gx = g
                    .iter()
                    .zip(vx)
                    .map(|(&gi, &xi)| if xi > *lo && xi < *hi { gi } else { S::zero() })
                    .collect();
                self.accumulate(grads, *x, gx)?;
            }
            Op::Sum { x } => {
                let n = self.nodes[*x].value.numel();
                self.accumulate(grads, *x, vec![g[0]; n])?;
            }
            Op::Mean { x } => {
                let n = self.nodes[*x].value.numel();
                self.accumulate(grads, *x, vec![g[0] / S::of(n as f64); n])?;
            }
            Op::ReduceAxis { x, view, mean } => {
                let scale = if *mean { S::of(view.n as f64).recip() } else { S::one() };
                let mut gx = Vec::with_capacity(view.outer * view.n * view.inner);
                for o in 0..view.outer {
                    let grow = &g[o * view.inner..(o + 1) * view.inner];
                    for _ in 0..view.n {
                        gx.extend(grow.iter().map(|&v| v * scale));
                    }
                }
                self.accumulate(grads, *x, gx)?;
            }
            Op::L2Normalize { x, dim, norms } => {
                let mut gx = Vec::with_capacity(g.len());
                for ((grow, yrow), &n) in g.chunks(*dim).zip(out.chunks(*dim)).zip(norms) {
                    let gy: S = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    gx.extend(grow.iter().zip(yrow).map(|(&gi, &yi)| (gi - yi * gy) / n));
                }
                self.accumulate(grads, *x, gx)?;
            }
            Op::Concat { parts, outer, inner } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut offset = 0;
                for &(pid, n) in parts {
                    if self.ng(pid) {
                        let mut gp = Vec::with_capacity(outer * n * inner);
                        for o in 0..*outer {
                            let base = (o * total + offset) * inner;
                            gp.extend_from_slice(&g[base..base + n * inner]);
                        }
                        self.accumulate(grads, pid, gp)?;
                    }
                    offset += n;
                }
            }
            Op::Slice { x, view, start, len } => {
                let mut gx = vec![S::zero(); view.outer * view.n * view.inner];
                for o in 0..view.outer {
                    let dst = (o * view.n + start) * view.inner;
                    gx[dst..dst + len * view.inner].copy_from_slice(&g[o * len * view.inner..(o + 1) * len * view.inner]);
                }
                self.accumulate(grads, *x, gx)?;
            }
            Op::Reshape { x } => self.accumulate(grads, *x, g.to_vec())?,
            Op::Gather { x, rows, row_len } => {
                let mut gx = vec![S::zero(); self.val(*x).len()];
                for (k, &r) in rows.iter().enumerate() {
                    let dst = &mut gx[r * row_len..(r + 1) * row_len];
                    dst.iter_mut()
                        .zip(&g[k * row_len..(k + 1) * row_len])
                        .for_each(|(d, &v)| *d = *d + v);
                }
                self.accumulate(grads, *x, gx)?;
            }
        }
        Ok(())
    }
}
