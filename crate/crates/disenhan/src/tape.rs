//! Reverse-mode differentiation over a recorded operation tape.
//!
//! Forward computation allocates values in an arena and records one op per
//! primitive. `backward` replays the tape in reverse, accumulating a vector-
//! Jacobian product into every value that influenced the loss. Values that
//! never touch the loss keep no gradient, so unused parameters read back as
//! exact zeros.
//!
//! A tape is confined to one training step on one thread; tensors themselves
//! are immutable and freely shared.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor, NORM_EPS};

/// Handle to a value in the tape arena.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ValueId(usize);

/// Handle to a trainable tensor in a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named trainable tensors. The order is the canonical
/// parameter order used by the optimizer and by snapshots.
#[derive(Clone, Debug)]
pub struct ParamSet<F> {
    tensors: Vec<Tensor<F>>,
    names: Vec<String>,
}

impl<F: Real> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet { tensors: Vec::new(), names: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> ParamId {
        self.tensors.push(tensor);
        self.names.push(name.into());
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Total scalar count across all tensors.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }
}

impl<F: Real> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone, Debug)]
enum Op<F> {
    /// out = W x, W: [m, n], x: [n]
    MatVec { w: ValueId, x: ValueId, out: ValueId },
    /// out = Wᵀ x, W: [m, n], x: [m]
    MatTVec { w: ValueId, x: ValueId, out: ValueId },
    /// out = A B, A: [m, k], B: [k, n]
    MatMul { a: ValueId, b: ValueId, out: ValueId },
    AddN { xs: Vec<ValueId>, out: ValueId },
    /// out_i = mul * x_i + add; the constant shift vanishes in the VJP
    AffineConst { x: ValueId, mul: F, out: ValueId },
    /// out = s * x with s a tape scalar
    ScaleBy { x: ValueId, s: ValueId, out: ValueId },
    /// out_i = x_i + s with s a tape scalar
    AddScalar { x: ValueId, s: ValueId, out: ValueId },
    /// out = x / s with s a tape scalar
    DivBy { x: ValueId, s: ValueId, out: ValueId },
    Dot { a: ValueId, b: ValueId, out: ValueId },
    Sum { x: ValueId, out: ValueId },
    Relu { x: ValueId, out: ValueId },
    Tanh { x: ValueId, out: ValueId },
    Sigmoid { x: ValueId, out: ValueId },
    Ln { x: ValueId, out: ValueId },
    Clamp { x: ValueId, lo: F, hi: F, out: ValueId },
    /// out = x ⊙ w with a constant weight vector (dropout masks)
    MulConst { x: ValueId, w: Vec<F>, out: ValueId },
    /// Softmax over unmasked entries; masked entries are exactly zero.
    MaskedSoftmax { x: ValueId, mask: Vec<bool>, out: ValueId },
    /// Whole-tensor normalization with a zero-norm guard.
    L2Normalize { x: ValueId, eps: F, out: ValueId },
    /// Row-wise normalization of a matrix, same guard per row.
    L2NormalizeRows { x: ValueId, eps: F, out: ValueId },
    Concat { xs: Vec<ValueId>, out: ValueId },
    Slice { x: ValueId, offset: usize, len: usize, out: ValueId },
}

/// Recording tape. Create one per training step or per forward pass.
pub struct Tape<F: Real> {
    vals: Vec<Tensor<F>>,
    grads: Vec<Option<Vec<F>>>,
    ops: Vec<Op<F>>,
    bindings: HashMap<ParamId, ValueId>,
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { vals: Vec::new(), grads: Vec::new(), ops: Vec::new(), bindings: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    pub fn op_count(&self) -> usize {
        self.ops.len()
    }

    /// Register a leaf value.
    pub fn constant(&mut self, t: Tensor<F>) -> ValueId {
        self.push(t)
    }

    pub fn scalar(&mut self, v: F) -> ValueId {
        self.push(Tensor::scalar(v))
    }

    /// Register a parameter, memoized per tape so every use shares one value
    /// (and therefore one gradient accumulator).
    pub fn param(&mut self, set: &ParamSet<F>, id: ParamId) -> ValueId {
        if let Some(&v) = self.bindings.get(&id) {
            return v;
        }
        let v = self.push(set.get(id).clone());
        self.bindings.insert(id, v);
        v
    }

    pub fn value(&self, id: ValueId) -> &Tensor<F> {
        &self.vals[id.0]
    }

    /// Gradient of the last `backward` target w.r.t. this value, if any
    /// influence was recorded.
    pub fn grad(&self, id: ValueId) -> Option<&[F]> {
        self.grads[id.0].as_deref()
    }

    /// Gradient for a parameter; exact zeros when the parameter was never
    /// bound on this tape or lies on no path to the loss.
    pub fn param_grad(&self, set: &ParamSet<F>, id: ParamId) -> Tensor<F> {
        let shape = set.get(id).shape().to_vec();
        match self.bindings.get(&id).and_then(|v| self.grads[v.0].clone()) {
            Some(g) => Tensor::new(shape, g).expect("gradient shaped like its parameter"),
            None => Tensor::zeros(shape),
        }
    }

    fn push(&mut self, t: Tensor<F>) -> ValueId {
        // Infinities can arise from domain misuse (e.g. ln 0) and are caught
        // by `backward`; a NaN is always a bug.
        debug_assert!(
            !t.data().iter().any(|v| v.is_nan()),
            "NaN tensor entering the tape"
        );
        self.vals.push(t);
        self.grads.push(None);
        ValueId(self.vals.len() - 1)
    }

    fn record(&mut self, out: Tensor<F>, op: impl FnOnce(ValueId) -> Op<F>) -> ValueId {
        let id = self.push(out);
        self.ops.push(op(id));
        id
    }

    // ── primitives ───────────────────────────────────────────────────

    /// Matrix-vector product `W x` with optional bias.
    pub fn affine(&mut self, w: ValueId, x: ValueId, bias: Option<ValueId>) -> Result<ValueId> {
        let wx = self.matvec(w, x)?;
        match bias {
            Some(b) => self.add_n(&[wx, b]),
            None => Ok(wx),
        }
    }

    pub fn matvec(&mut self, w: ValueId, x: ValueId) -> Result<ValueId> {
        let (wt, xt) = (&self.vals[w.0], &self.vals[x.0]);
        if wt.shape().len() != 2 || wt.cols() != xt.len() {
            return Err(Error::ShapeMismatch {
                op: "matvec".into(),
                lhs: wt.shape().to_vec(),
                rhs: xt.shape().to_vec(),
            });
        }
        let (m, n) = (wt.rows(), wt.cols());
        let mut out = vec![F::zero(); m];
        for i in 0..m {
            let row = &wt.data()[i * n..(i + 1) * n];
            out[i] = row.iter().zip(xt.data()).map(|(&a, &b)| a * b).sum();
        }
        Ok(self.record(Tensor::vector(out), |o| Op::MatVec { w, x, out: o }))
    }

    pub fn matvec_t(&mut self, w: ValueId, x: ValueId) -> Result<ValueId> {
        let (wt, xt) = (&self.vals[w.0], &self.vals[x.0]);
        if wt.shape().len() != 2 || wt.rows() != xt.len() {
            return Err(Error::ShapeMismatch {
                op: "matvec_t".into(),
                lhs: wt.shape().to_vec(),
                rhs: xt.shape().to_vec(),
            });
        }
        let (m, n) = (wt.rows(), wt.cols());
        let mut out = vec![F::zero(); n];
        for i in 0..m {
            let xi = xt.data()[i];
            for j in 0..n {
                out[j] = out[j] + wt.data()[i * n + j] * xi;
            }
        }
        Ok(self.record(Tensor::vector(out), |o| Op::MatTVec { w, x, out: o }))
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (at, bt) = (&self.vals[a.0], &self.vals[b.0]);
        if at.shape().len() != 2 || bt.shape().len() != 2 || at.cols() != bt.rows() {
            return Err(Error::ShapeMismatch {
                op: "matmul".into(),
                lhs: at.shape().to_vec(),
                rhs: bt.shape().to_vec(),
            });
        }
        let (m, k, n) = (at.rows(), at.cols(), bt.cols());
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = at.data()[i * k + p];
                for j in 0..n {
                    out[i * n + j] = out[i * n + j] + aip * bt.data()[p * n + j];
                }
            }
        }
        let out = Tensor::matrix(m, n, out)?;
        Ok(self.record(out, |o| Op::MatMul { a, b, out: o }))
    }

    pub fn add_n(&mut self, xs: &[ValueId]) -> Result<ValueId> {
        assert!(!xs.is_empty(), "add_n of nothing");
        let shape = self.vals[xs[0].0].shape().to_vec();
        for &x in &xs[1..] {
            if self.vals[x.0].shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "add_n".into(),
                    lhs: shape,
                    rhs: self.vals[x.0].shape().to_vec(),
                });
            }
        }
        let mut out = self.vals[xs[0].0].data().to_vec();
        for &x in &xs[1..] {
            for (o, &v) in out.iter_mut().zip(self.vals[x.0].data()) {
                *o = *o + v;
            }
        }
        let xs = xs.to_vec();
        let out = Tensor::new(shape, out)?;
        Ok(self.record(out, |o| Op::AddN { xs, out: o }))
    }

    /// Elementwise `mul * x + add` with compile-time constants.
    pub fn affine_const(&mut self, x: ValueId, mul: F, add: F) -> ValueId {
        let out = self.map_unary(x, |v| mul * v + add);
        self.record(out, |o| Op::AffineConst { x, mul, out: o })
    }

    pub fn scale_by(&mut self, x: ValueId, s: ValueId) -> Result<ValueId> {
        self.expect_scalar("scale_by", s)?;
        let sv = self.vals[s.0].item();
        let out = self.map_unary(x, |v| sv * v);
        Ok(self.record(out, |o| Op::ScaleBy { x, s, out: o }))
    }

    pub fn add_scalar(&mut self, x: ValueId, s: ValueId) -> Result<ValueId> {
        self.expect_scalar("add_scalar", s)?;
        let sv = self.vals[s.0].item();
        let out = self.map_unary(x, |v| v + sv);
        Ok(self.record(out, |o| Op::AddScalar { x, s, out: o }))
    }

    pub fn div_by(&mut self, x: ValueId, s: ValueId) -> Result<ValueId> {
        self.expect_scalar("div_by", s)?;
        let sv = self.vals[s.0].item();
        let out = self.map_unary(x, |v| v / sv);
        Ok(self.record(out, |o| Op::DivBy { x, s, out: o }))
    }

    pub fn dot(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (at, bt) = (&self.vals[a.0], &self.vals[b.0]);
        if at.len() != bt.len() {
            return Err(Error::ShapeMismatch {
                op: "dot".into(),
                lhs: at.shape().to_vec(),
                rhs: bt.shape().to_vec(),
            });
        }
        let v = at.data().iter().zip(bt.data()).map(|(&x, &y)| x * y).sum();
        Ok(self.record(Tensor::scalar(v), |o| Op::Dot { a, b, out: o }))
    }

    pub fn sum(&mut self, x: ValueId) -> ValueId {
        let v = self.vals[x.0].data().iter().copied().sum();
        self.record(Tensor::scalar(v), |o| Op::Sum { x, out: o })
    }

    pub fn relu(&mut self, x: ValueId) -> ValueId {
        let out = self.map_unary(x, |v| if v > F::zero() { v } else { F::zero() });
        self.record(out, |o| Op::Relu { x, out: o })
    }

    pub fn tanh(&mut self, x: ValueId) -> ValueId {
        let out = self.map_unary(x, |v| v.tanh());
        self.record(out, |o| Op::Tanh { x, out: o })
    }

    /// Logistic function 1 / (1 + e^{-x}).
    pub fn sigmoid(&mut self, x: ValueId) -> ValueId {
        let out = self.map_unary(x, |v| F::one() / (F::one() + (-v).exp()));
        self.record(out, |o| Op::Sigmoid { x, out: o })
    }

    pub fn ln(&mut self, x: ValueId) -> ValueId {
        let out = self.map_unary(x, |v| v.ln());
        self.record(out, |o| Op::Ln { x, out: o })
    }

    pub fn clamp(&mut self, x: ValueId, lo: F, hi: F) -> ValueId {
        assert!(lo < hi, "clamp bounds out of order");
        let out = self.map_unary(x, |v| if v < lo { lo } else if v > hi { hi } else { v });
        self.record(out, |o| Op::Clamp { x, lo, hi, out: o })
    }

    /// Elementwise product with a fixed (non-differentiated) weight vector.
    pub fn mul_const(&mut self, x: ValueId, w: Vec<F>) -> Result<ValueId> {
        let xt = &self.vals[x.0];
        if xt.len() != w.len() {
            return Err(Error::ShapeMismatch {
                op: "mul_const".into(),
                lhs: xt.shape().to_vec(),
                rhs: vec![w.len()],
            });
        }
        let data = xt.data().iter().zip(&w).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(xt.shape().to_vec(), data)?;
        Ok(self.record(out, |o| Op::MulConst { x, w, out: o }))
    }

    /// Softmax over the unmasked entries of a vector; masked entries receive
    /// weight exactly 0. Stabilized by max subtraction.
    pub fn masked_softmax(&mut self, x: ValueId, mask: &[bool]) -> Result<ValueId> {
        let xt = &self.vals[x.0];
        if xt.len() != mask.len() {
            return Err(Error::ShapeMismatch {
                op: "masked_softmax".into(),
                lhs: xt.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::EmptyGroup);
        }
        let data = xt.data();
        let mut hi = F::neg_infinity();
        for (i, &m) in mask.iter().enumerate() {
            if m && data[i] > hi {
                hi = data[i];
            }
        }
        let mut out = vec![F::zero(); data.len()];
        let mut total = F::zero();
        for (i, &m) in mask.iter().enumerate() {
            if m {
                let e = (data[i] - hi).exp();
                out[i] = e;
                total = total + e;
            }
        }
        for v in out.iter_mut() {
            *v = *v / total;
        }
        let mask = mask.to_vec();
        let out = Tensor::new(xt.shape().to_vec(), out)?;
        Ok(self.record(out, |o| Op::MaskedSoftmax { x, mask, out: o }))
    }

    /// Softmax with every entry live.
    pub fn softmax(&mut self, x: ValueId) -> Result<ValueId> {
        let mask = vec![true; self.vals[x.0].len()];
        self.masked_softmax(x, &mask)
    }

    /// Normalize to unit L2 norm; inputs with norm at or below `eps` pass
    /// through unchanged.
    pub fn l2_normalize(&mut self, x: ValueId) -> ValueId {
        self.l2_normalize_eps(x, F::of(NORM_EPS))
    }

    pub fn l2_normalize_eps(&mut self, x: ValueId, eps: F) -> ValueId {
        let xt = &self.vals[x.0];
        let n = xt.norm2();
        let out = if n <= eps {
            xt.clone()
        } else {
            Tensor::new(xt.shape().to_vec(), xt.data().iter().map(|&v| v / n).collect())
                .expect("same shape")
        };
        self.record(out, |o| Op::L2Normalize { x, eps, out: o })
    }

    /// Normalize each row of a matrix to unit L2 norm with the same guard.
    pub fn l2_normalize_rows(&mut self, x: ValueId) -> Result<ValueId> {
        let xt = &self.vals[x.0];
        if xt.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "l2_normalize_rows".into(),
                lhs: xt.shape().to_vec(),
                rhs: vec![],
            });
        }
        let eps = F::of(NORM_EPS);
        let (rows, cols) = (xt.rows(), xt.cols());
        let mut out = xt.data().to_vec();
        for r in 0..rows {
            let row = &mut out[r * cols..(r + 1) * cols];
            let n = row.iter().map(|&v| v * v).sum::<F>().sqrt();
            if n > eps {
                for v in row.iter_mut() {
                    *v = *v / n;
                }
            }
        }
        let out = Tensor::matrix(rows, cols, out)?;
        Ok(self.record(out, |o| Op::L2NormalizeRows { x, eps, out: o }))
    }

    /// Concatenate values into a flat vector.
    pub fn concat(&mut self, xs: &[ValueId]) -> ValueId {
        assert!(!xs.is_empty(), "concat of nothing");
        let mut data = Vec::new();
        for &x in xs {
            data.extend_from_slice(self.vals[x.0].data());
        }
        let xs = xs.to_vec();
        self.record(Tensor::vector(data), |o| Op::Concat { xs, out: o })
    }

    /// Stack equal-length vectors as the rows of a matrix.
    pub fn stack_rows(&mut self, xs: &[ValueId]) -> Result<ValueId> {
        assert!(!xs.is_empty(), "stack of nothing");
        let cols = self.vals[xs[0].0].len();
        let mut data = Vec::with_capacity(xs.len() * cols);
        for &x in xs {
            if self.vals[x.0].len() != cols {
                return Err(Error::ShapeMismatch {
                    op: "stack_rows".into(),
                    lhs: vec![cols],
                    rhs: self.vals[x.0].shape().to_vec(),
                });
            }
            data.extend_from_slice(self.vals[x.0].data());
        }
        let out = Tensor::matrix(xs.len(), cols, data)?;
        let xs = xs.to_vec();
        Ok(self.record(out, |o| Op::Concat { xs, out: o }))
    }

    pub fn slice(&mut self, x: ValueId, offset: usize, len: usize) -> Result<ValueId> {
        let xt = &self.vals[x.0];
        if offset + len > xt.len() {
            return Err(Error::ShapeMismatch {
                op: "slice".into(),
                lhs: xt.shape().to_vec(),
                rhs: vec![offset, len],
            });
        }
        let data = xt.data()[offset..offset + len].to_vec();
        Ok(self.record(Tensor::vector(data), |o| Op::Slice { x, offset, len, out: o }))
    }

    /// Row `r` of a matrix as a vector.
    pub fn row(&mut self, x: ValueId, r: usize) -> Result<ValueId> {
        let cols = self.vals[x.0].cols();
        self.slice(x, r * cols, cols)
    }

    fn map_unary(&self, x: ValueId, f: impl Fn(F) -> F) -> Tensor<F> {
        let xt = &self.vals[x.0];
        Tensor::new(xt.shape().to_vec(), xt.data().iter().map(|&v| f(v)).collect())
            .expect("same shape")
    }

    fn expect_scalar(&self, op: &str, s: ValueId) -> Result<()> {
        if self.vals[s.0].len() != 1 {
            return Err(Error::ShapeMismatch {
                op: op.into(),
                lhs: self.vals[s.0].shape().to_vec(),
                rhs: vec![],
            });
        }
        Ok(())
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Accumulate gradients of a scalar `loss` into every contributing value.
    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        if self.vals[loss.0].len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "backward".into(),
                lhs: self.vals[loss.0].shape().to_vec(),
                rhs: vec![],
            });
        }
        if !self.vals[loss.0].item().is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        self.grads[loss.0] = Some(vec![F::one()]);
        let Tape { vals, grads, ops, .. } = self;
        for op in ops.iter().rev() {
            backward_op(vals, grads, op);
        }
        Ok(())
    }
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn acc<F: Real>(grads: &mut [Option<Vec<F>>], id: ValueId, delta: &[F]) {
    match &mut grads[id.0] {
        Some(g) => {
            for (gi, &d) in g.iter_mut().zip(delta) {
                *gi = *gi + d;
            }
        }
        None => grads[id.0] = Some(delta.to_vec()),
    }
}

fn backward_op<F: Real>(vals: &[Tensor<F>], grads: &mut [Option<Vec<F>>], op: &Op<F>) {
    match op {
        Op::MatVec { w, x, out } => {
            let Some(g) = grads[out.0].clone() else { return };
            let (wt, xt) = (&vals[w.0], &vals[x.0]);
            let (m, n) = (wt.rows(), wt.cols());
            let mut dw = vec![F::zero(); m * n];
            let mut dx = vec![F::zero(); n];
            for i in 0..m {
                for j in 0..n {
                    dw[i * n + j] = g[i] * xt.data()[j];
                    dx[j] = dx[j] + wt.data()[i * n + j] * g[i];
                }
            }
            acc(grads, *w, &dw);
            acc(grads, *x, &dx);
        }
        Op::MatTVec { w, x, out } => {
            let Some(g) = grads[out.0].clone() else { return };
            let (wt, xt) = (&vals[w.0], &vals[x.0]);
            let (m, n) = (wt.rows(), wt.cols());
            let mut dw = vec![F::zero(); m * n];
            let mut dx = vec![F::zero(); m];
            for i in 0..m {
                for j in 0..n {
                    dw[i * n + j] = xt.data()[i] * g[j];
                    dx[i] = dx[i] + wt.data()[i * n + j] * g[j];
                }
            }
            acc(grads, *w, &dw);
            acc(grads, *x, &dx);
        }
        Op::MatMul { a, b, out } => {
            let Some(g) = grads[out.0].clone() else { return };
            let (at, bt) = (&vals[a.0], &vals[b.0]);
            let (m, k, n) = (at.rows(), at.cols(), bt.cols());
            // dA = G Bᵀ
            let mut da = vec![F::zero(); m * k];
            for i in 0..m {
                for p in 0..k {
                    let mut s = F::zero();
                    for j in 0..n {
                        s = s + g[i * n + j] * bt.data()[p * n + j];
                    }
                    da[i * k + p] = s;
                }
            }
            // dB = Aᵀ G
            let mut db = vec![F::zero(); k * n];
            for p in 0..k {
                for i in 0..m {
                    let aip = at.data()[i * k + p];
                    for j in 0..n {
                        db[p * n + j] = db[p * n + j] + aip * g[i * n + j];
                    }
                }
            }
            acc(grads, *a, &da);
            acc(grads, *b, &db);
        }
        Op::AddN { xs, out } => {
            let Some(g) = grads[out.0].clone() else { return };
            for &x in xs {
                acc(grads, x, &g);
            }
        }
        Op::AffineConst { x, mul, out } => {
            let Some(g) = grads[out.0].clone() else { return };
            let dx: Vec<F> = g.iter().map(|&gi| *mul * gi).collect();
            acc(grads, *x, &dx);
        }
        Op::ScaleBy { x, s, out } => {
            let Some(g) = grads[out.0].clone() else { return };
            let sv = vals[s.0].item();
            let dx: Vec<F> = g.iter().map(|&gi| sv * gi).collect();
            let ds = vals[x.0].data().iter().zip(&g).map(|(&xi, &gi)| xi * gi).sum();
            acc(grads, *x, &dx);
            acc(grads, *s, &[ds]);
        }
        Op::AddScalar { x, s, out } => {
            let Some(g) = grads[out.0].clone() else { return };
            let ds = g.iter().copied().sum();
            acc(grads, *x, &g);
            acc(grads, *s, &[ds]);
        }
        Op::DivBy { x, s, out } => {
            let Some(g) = grads[out.0].clone() else { return };
            let sv = vals[s.0].item();
            let dx: Vec<F> = g.iter().map(|&gi| gi / sv).collect();
            let num: F = vals[x.0].data().iter().zip(&g).map(|(&xi, &gi)| xi * gi).sum();
            let ds = -num / (sv * sv);
            acc(grads, *x, &dx);
            acc(grads, *s, &[ds]);
        }
        Op::Dot { a, b, out } => {
            let Some(g) = grads[out.0].clone() else { return };
            let s = g[0];
            let da: Vec<F> = vals[b.0].data().iter().map(|&v| s * v).collect();
            let db: Vec<F> = vals[a.0].data().iter().map(|&v| s * v).collect();
            acc(grads, *a, &da);
            acc(grads, *b, &db);
        }
        Op::Sum { x, out } => {
            let Some(g) = grads[out.0].clone() else { return };
            let dx = vec![g[0]; vals[x.0].len()];
            acc(grads, *x, &dx);
        }
        Op::Relu { x, out } => {
            let Some(g) = grads[out.0].clone() else { return };
            let dx: Vec<F> = vals[x.0]
                .data()
                .iter()
                .zip(&g)
                .map(|(&xi, &gi)| if xi > F::zero() { gi } else { F::zero() })
                .collect();
            acc(grads, *x, &dx);
        }
        Op::Tanh { x, out } => {
            let Some(g) = grads[out.0].clone() else { return };
            let dx: Vec<F> = vals[out.0]
                .data()
                .iter()
                .zip(&g)
                .map(|(&y, &gi)| gi * (F::one() - y * y))
                .collect();
            acc(grads, *x, &dx);
        }
        Op::Sigmoid { x, out } => {
            let Some(g) = grads[out.0].clone() else { return };
            let dx: Vec<F> = vals[out.0]
                .data()
                .iter()
                .zip(&g)
                .map(|(&y, &gi)| gi * y * (F::one() - y))
                .collect();
            acc(grads, *x, &dx);
        }
        Op::Ln { x, out } => {
            let Some(g) = grads[out.0].clone() else { return };
            let dx: Vec<F> =
                vals[x.0].data().iter().zip(&g).map(|(&xi, &gi)| gi / xi).collect();
            acc(grads, *x, &dx);
        }
        Op::Clamp { x, lo, hi, out } => {
            let Some(g) = grads[out.0].clone() else { return };
            let dx: Vec<F> = vals[x.0]
                .data()
                .iter()
                .zip(&g)
                .map(|(&xi, &gi)| if xi > *lo && xi < *hi { gi } else { F::zero() })
                .collect();
            acc(grads, *x, &dx);
        }
        Op::MulConst { x, w, out } => {
            let Some(g) = grads[out.0].clone() else { return };
            let dx: Vec<F> = g.iter().zip(w).map(|(&gi, &wi)| gi * wi).collect();
            acc(grads, *x, &dx);
        }
        Op::MaskedSoftmax { x, mask, out } => {
            let Some(g) = grads[out.0].clone() else { return };
            let y = vals[out.0].data();
            let inner: F = g.iter().zip(y).map(|(&gi, &yi)| gi * yi).sum();
            let dx: Vec<F> = y
                .iter()
                .zip(&g)
                .zip(mask)
                .map(|((&yi, &gi), &m)| if m { yi * (gi - inner) } else { F::zero() })
                .collect();
            acc(grads, *x, &dx);
        }
        Op::L2Normalize { x, eps, out } => {
            let Some(g) = grads[out.0].clone() else { return };
            let xt = &vals[x.0];
            let n = xt.norm2();
            if n <= *eps {
                acc(grads, *x, &g);
            } else {
                let y = vals[out.0].data();
                let inner: F = g.iter().zip(y).map(|(&gi, &yi)| gi * yi).sum();
                let dx: Vec<F> =
                    y.iter().zip(&g).map(|(&yi, &gi)| (gi - yi * inner) / n).collect();
                acc(grads, *x, &dx);
            }
        }
        Op::L2NormalizeRows { x, eps, out } => {
            let Some(g) = grads[out.0].clone() else { return };
            let xt = &vals[x.0];
            let (rows, cols) = (xt.rows(), xt.cols());
            let y = vals[out.0].data();
            let mut dx = vec![F::zero(); rows * cols];
            for r in 0..rows {
                let lo = r * cols;
                let xr = &xt.data()[lo..lo + cols];
                let n = xr.iter().map(|&v| v * v).sum::<F>().sqrt();
                if n <= *eps {
                    dx[lo..lo + cols].copy_from_slice(&g[lo..lo + cols]);
                } else {
                    let yr = &y[lo..lo + cols];
                    let gr = &g[lo..lo + cols];
                    let inner: F = gr.iter().zip(yr).map(|(&gi, &yi)| gi * yi).sum();
                    for j in 0..cols {
                        dx[lo + j] = (gr[j] - yr[j] * inner) / n;
                    }
                }
            }
            acc(grads, *x, &dx);
        }
        Op::Concat { xs, out } => {
            let Some(g) = grads[out.0].clone() else { return };
            let mut offset = 0;
            for &x in xs {
                let len = vals[x.0].len();
                acc(grads, x, &g[offset..offset + len]);
                offset += len;
            }
        }
        Op::Slice { x, offset, len, out } => {
            let Some(g) = grads[out.0].clone() else { return };
            let mut dx = vec![F::zero(); vals[x.0].len()];
            dx[*offset..*offset + *len].copy_from_slice(&g);
            acc(grads, *x, &dx);
        }
    }
}
