use super::kernels::{gemm, MatRef};
use super::{numel, Result, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    Relu,
    Abs,
    Sigmoid,
    Exp,
    Neg,
    Elu,
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Tanh => x.tanh(),
            Unary::Relu => x.max(0.0),
            Unary::Abs => x.abs(),
            Unary::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Unary::Exp => x.exp(),
            Unary::Neg => -x,
            Unary::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
        }
    }

    /// dy/dx given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Tanh => 1.0 - y * y,
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            // subgradient 0 at the kink
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Exp => y,
            Unary::Neg => -1.0,
            Unary::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
    Max,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Unary(Unary, Var),
    Reduce {
        kind: Reduction,
        x: Var,
        axis: usize,
        argmax: Vec<usize>,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Softmax(Var),
    NormalizeRows {
        x: Var,
        inv_std: Vec<f64>,
    },
    SelectRows {
        x: Var,
        index: Vec<usize>,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    StraightThrough {
        soft: Var,
    },
    MaskedBroadcast {
        mask: Var,
        rows: Var,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    tracked: bool,
}

/// Split `shape` around `axis` into (outer, axis length, inner) block sizes.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

/// Append-only operation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
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

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, tracked: bool) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node {
            shape,
            data,
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// Leaf holding a copy of `t`; participates in backward iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Var> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).data
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.data.clone()).expect("node shape invariant")
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.node(v).tracked
    }

    /// Gradient of the last backward root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Copy of `v` that no longer propagates gradient.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = self.node(v);
        let (shape, data) = (n.shape.clone(), n.data.clone());
        self.push(shape, data, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, p) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * p];
        gemm(
            MatRef::new(self.value(a), m, k),
            MatRef::new(self.value(b), k, p),
            &mut out,
            false,
        );
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(vec![m, p], out, Op::MatMul(a, b), tracked))
    }

    /// Batched matrix product over a leading group axis: `[g,m,k]·[g,k,p]`,
    /// or `[g,m,k]·[g,p,k]ᵀ` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let err = || TensorError::ShapeMismatch {
            op: "bmm",
            left: sa.to_vec(),
            right: sb.to_vec(),
        };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(err());
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, p) = if trans_b {
            (sb[2], sb[1])
        } else {
            (sb[1], sb[2])
        };
        if kb != k {
            return Err(err());
        }
        let mut out = vec![0.0; g * m * p];
        let (av, bv) = (self.value(a), self.value(b));
        for gi in 0..g {
            let am = MatRef::new(&av[gi * m * k..(gi + 1) * m * k], m, k);
            let bm = if trans_b {
                MatRef::new(&bv[gi * p * k..(gi + 1) * p * k], p, k).t()
            } else {
                MatRef::new(&bv[gi * k * p..(gi + 1) * k * p], k, p)
            };
            gemm(am, bm, &mut out[gi * m * p..(gi + 1) * m * p], false);
        }
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(
            vec![g, m, p],
            out,
            Op::BatchMatMul { a, b, trans_b },
            tracked,
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.tracked(&[a, b]);
        self.push(shape, out, op, tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    fn row_check(&self, op: &'static str, x: Var, row: Var) -> Result<usize> {
        let w = last_dim(self.shape(x));
        if self.shape(row) != [w] || self.shape(x).is_empty() {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape(x).to_vec(),
                right: self.shape(row).to_vec(),
            });
        }
        Ok(w)
    }

    /// `x + b` with `b` broadcast along every row of the last axis.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let w = self.row_check("add_row", x, b)?;
        let bv = self.value(b);
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + bv[i % w])
            .collect();
        let shape = self.shape(x).to_vec();
        let tracked = self.tracked(&[x, b]);
        Ok(self.push(shape, out, Op::AddRow(x, b), tracked))
    }

    /// `x ⊙ g` with `g` broadcast along every row of the last axis.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var> {
        let w = self.row_check("mul_row", x, g)?;
        let gv = self.value(g);
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v * gv[i % w])
            .collect();
        let shape = self.shape(x).to_vec();
        let tracked = self.tracked(&[x, g]);
        Ok(self.push(shape, out, Op::MulRow(x, g), tracked))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let tracked = self.tracked(&[x]);
        self.push(shape, out, Op::Scale(x, c), tracked)
    }

    pub fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| kind.apply(v)).collect();
        let shape = self.shape(x).to_vec();
        let tracked = self.tracked(&[x]);
        self.push(shape, out, Op::Unary(kind, x), tracked)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::Tanh, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }

    pub fn elu(&mut self, x: Var) -> Var {
        self.unary(Unary::Elu, x)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(Unary::Abs, x)
    }

    /// Reduce along `axis`, removing it from the shape. `Max` routes the
    /// gradient to the first maximal element.
    pub fn reduce(&mut self, kind: Reduction, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis {
                op: "reduce",
                axis,
                rank: shape.len(),
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        if len == 0 {
            return Err(TensorError::EmptyAxis { op: "reduce", axis });
        }
        let xv = self.value(x);
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        match kind {
            Reduction::Sum | Reduction::Mean => {
                for o in 0..outer {
                    for a in 0..len {
                        let base = (o * len + a) * inner;
                        for i in 0..inner {
                            out[o * inner + i] += xv[base + i];
                        }
                    }
                }
                if kind == Reduction::Mean {
                    out.iter_mut().for_each(|v| *v /= len as f64);
                }
            }
            Reduction::Max => {
                argmax = vec![0; outer * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut best = xv[o * len * inner + i];
                        let mut best_a = 0;
                        for a in 1..len {
                            let v = xv[(o * len + a) * inner + i];
                            if v > best {
                                best = v;
                                best_a = a;
                            }
                        }
                        out[o * inner + i] = best;
                        argmax[o * inner + i] = best_a;
                    }
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let tracked = self.tracked(&[x]);
        Ok(self.push(
            out_shape,
            out,
            Op::Reduce {
                kind,
                x,
                axis,
                argmax,
            },
            tracked,
        ))
    }

    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(Reduction::Sum, x, axis)
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(Reduction::Mean, x, axis)
    }

    pub fn max(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(Reduction::Max, x, axis)
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let n = numel(self.shape(x));
        let flat = self.reshape(x, vec![n])?;
        self.sum(flat, 0)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::InvalidAxis {
                op: "concat",
                axis,
                rank: base.len(),
            });
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    left: base,
                    right: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis];
                let chunk = len * inner;
                out.extend_from_slice(&self.value(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let tracked = self.tracked(xs);
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            tracked,
        ))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis {
                op: "narrow",
                axis,
                rank: shape.len(),
            });
        }
        if start + len > shape[axis] {
            return Err(TensorError::Invalid(format!(
                "narrow: range {start}..{} exceeds axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * full + start) * inner;
            out.extend_from_slice(&xv[from..from + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let tracked = self.tracked(&[x]);
        Ok(self.push(out_shape, out, Op::Narrow { x, axis, start }, tracked))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if numel(&shape) != numel(self.shape(x)) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: self.shape(x).to_vec(),
                right: shape,
            });
        }
        let data = self.value(x).to_vec();
        let tracked = self.tracked(&[x]);
        Ok(self.push(shape, data, Op::Reshape(x), tracked))
    }

    /// Softmax over the last axis, stabilized by subtracting the row max.
    pub fn softmax(&mut self, x: Var) -> Var {
        let w = last_dim(self.shape(x));
        let mut out = self.value(x).to_vec();
        if w > 0 {
            for row in out.chunks_mut(w) {
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    z += *v;
                }
                row.iter_mut().for_each(|v| *v /= z);
            }
        }
        let shape = self.shape(x).to_vec();
        let tracked = self.tracked(&[x]);
        self.push(shape, out, Op::Softmax(x), tracked)
    }

    /// Per-row standardization over the last axis: `(x - mean) / sqrt(var + eps)`.
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let w = last_dim(self.shape(x));
        let mut out = self.value(x).to_vec();
        let mut inv_std = Vec::with_capacity(out.len() / w.max(1));
        if w > 0 {
            for row in out.chunks_mut(w) {
                let mean = row.iter().sum::<f64>() / w as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w as f64;
                let is = 1.0 / (var + eps).sqrt();
                row.iter_mut().for_each(|v| *v = (*v - mean) * is);
                inv_std.push(is);
            }
        }
        let shape = self.shape(x).to_vec();
        let tracked = self.tracked(&[x]);
        self.push(shape, out, Op::NormalizeRows { x, inv_std }, tracked)
    }

    /// Gather rows (first-axis slices) by index; repeats are allowed.
    pub fn select_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rows = *shape
            .first()
            .ok_or_else(|| TensorError::Invalid("select_rows on a scalar".into()))?;
        if let Some(bad) = index.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Invalid(format!(
                "select_rows: index {bad} out of range for {rows} rows"
            )));
        }
        let w = numel(&shape[1..]);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(index.len() * w);
        for &i in index {
            out.extend_from_slice(&xv[i * w..(i + 1) * w]);
        }
        let mut out_shape = shape;
        out_shape[0] = index.len();
        let tracked = self.tracked(&[x]);
        Ok(self.push(
            out_shape,
            out,
            Op::SelectRows {
                x,
                index: index.to_vec(),
            },
            tracked,
        ))
    }

    /// `out[r] = x[r, index[r]]` for a matrix `x`.
    pub fn gather(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let shape = self.shape(x);
        if shape.len() != 2 || shape[0] != index.len() {
            return Err(TensorError::ShapeMismatch {
                op: "gather",
                left: shape.to_vec(),
                right: vec![index.len()],
            });
        }
        let k = shape[1];
        if let Some(bad) = index.iter().find(|&&i| i >= k) {
            return Err(TensorError::Invalid(format!(
                "gather: column {bad} out of range for {k} columns"
            )));
        }
        let xv = self.value(x);
        let out = index
            .iter()
            .enumerate()
            .map(|(r, &c)| xv[r * k + c])
            .collect();
        let tracked = self.tracked(&[x]);
        Ok(self.push(
            vec![index.len()],
            out,
            Op::Gather {
                x,
                index: index.to_vec(),
            },
            tracked,
        ))
    }

    /// Emits `hard` in the forward pass while the backward pass treats the
    /// node as the identity on `soft`.
    pub fn straight_through(&mut self, soft: Var, hard: Vec<f64>) -> Result<Var> {
        if hard.len() != numel(self.shape(soft)) {
            return Err(TensorError::DataLength {
                shape: self.shape(soft).to_vec(),
                len: hard.len(),
            });
        }
        let shape = self.shape(soft).to_vec();
        let tracked = self.tracked(&[soft]);
        Ok(self.push(shape, hard, Op::StraightThrough { soft }, tracked))
    }

    /// `out[b,i,j,:] = mask[b,i,j] * rows[b,j,:]`: every receiver row `i`
    /// gets a masked copy of all sender rows.
    pub fn masked_broadcast(&mut self, mask: Var, rows: Var) -> Result<Var> {
        let (sm, sr) = (self.shape(mask), self.shape(rows));
        if sm.len() != 3 || sr.len() != 3 || sm[0] != sr[0] || sm[1] != sm[2] || sm[2] != sr[1] {
            return Err(TensorError::ShapeMismatch {
                op: "masked_broadcast",
                left: sm.to_vec(),
                right: sr.to_vec(),
            });
        }
        let (b, n, d) = (sr[0], sr[1], sr[2]);
        let (mv, rv) = (self.value(mask), self.value(rows));
        let mut out = vec![0.0; b * n * n * d];
        for bi in 0..b {
            for i in 0..n {
                for j in 0..n {
                    let m = mv[(bi * n + i) * n + j];
                    if m == 0.0 {
                        continue;
                    }
                    let src = &rv[(bi * n + j) * d..(bi * n + j + 1) * d];
                    let dst = &mut out[((bi * n + i) * n + j) * d..((bi * n + i) * n + j + 1) * d];
                    for (o, s) in dst.iter_mut().zip(src) {
                        *o = m * s;
                    }
                }
            }
        }
        let tracked = self.tracked(&[mask, rows]);
        Ok(self.push(
            vec![b, n, n, d],
            out,
            Op::MaskedBroadcast { mask, rows },
            tracked,
        ))
    }

    /// Reverse sweep from a scalar `root`. Gradients accumulate across
    /// fan-out; a tape can be swept only once.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if numel(self.shape(root)) != 1 {
            return Err(TensorError::NonScalarRoot(self.shape(root).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for id in (0..=root.0).rev() {
            if !self.nodes[id].tracked {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let nodes = &self.nodes;
        // Accumulate into input `v` if it participates in differentiation.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].tracked {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].data.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
                let (m, k, p) = (sa[0], sa[1], sb[1]);
                let gm = MatRef::new(g, m, p);
                acc(*a, &mut |ga| {
                    gemm(gm, MatRef::new(&nodes[b.0].data, k, p).t(), ga, true)
                });
                acc(*b, &mut |gb| {
                    gemm(MatRef::new(&nodes[a.0].data, m, k).t(), gm, gb, true)
                });
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = &nodes[a.0].shape;
                let (groups, m, k) = (sa[0], sa[1], sa[2]);
                let p = node.shape[2];
                let (av, bv) = (&nodes[a.0].data, &nodes[b.0].data);
                acc(*a, &mut |ga| {
                    for gi in 0..groups {
                        let gm = MatRef::new(&g[gi * m * p..(gi + 1) * m * p], m, p);
                        let bm = if *trans_b {
                            MatRef::new(&bv[gi * p * k..(gi + 1) * p * k], p, k)
                        } else {
                            MatRef::new(&bv[gi * k * p..(gi + 1) * k * p], k, p).t()
                        };
                        gemm(gm, bm, &mut ga[gi * m * k..(gi + 1) * m * k], true);
                    }
                });
                acc(*b, &mut |gb| {
                    for gi in 0..groups {
                        let gm = MatRef::new(&g[gi * m * p..(gi + 1) * m * p], m, p);
                        let am = MatRef::new(&av[gi * m * k..(gi + 1) * m * k], m, k);
                        let dst = &mut gb[gi * k * p..(gi + 1) * k * p];
                        if *trans_b {
                            gemm(gm.t(), am, dst, true);
                        } else {
                            gemm(am.t(), gm, dst, true);
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y)
                });
                acc(*b, &mut |gb| {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x += y)
                });
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y)
                });
                acc(*b, &mut |gb| {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y)
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].data, &nodes[b.0].data);
                acc(*a, &mut |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::AddRow(x, b) => {
                let w = nodes[b.0].data.len();
                acc(*x, &mut |gx| {
                    gx.iter_mut().zip(g).for_each(|(x, y)| *x += y)
                });
                acc(*b, &mut |gb| {
                    for (i, v) in g.iter().enumerate() {
                        gb[i % w] += v;
                    }
                });
            }
            Op::MulRow(x, r) => {
                let (xv, rv) = (&nodes[x.0].data, &nodes[r.0].data);
                let w = rv.len();
                acc(*x, &mut |gx| {
                    for i in 0..g.len() {
                        gx[i] += g[i] * rv[i % w];
                    }
                });
                acc(*r, &mut |gr| {
                    for i in 0..g.len() {
                        gr[i % w] += g[i] * xv[i];
                    }
                });
            }
            Op::Scale(x, c) => {
                acc(*x, &mut |gx| {
                    gx.iter_mut().zip(g).for_each(|(x, y)| *x += c * y)
                });
            }
            Op::Unary(kind, x) => {
                let xv = &nodes[x.0].data;
                let yv = &node.data;
                acc(*x, &mut |gx| {
                    for i in 0..g.len() {
                        gx[i] += g[i] * kind.derivative(xv[i], yv[i]);
                    }
                });
            }
            Op::Reduce {
                kind,
                x,
                axis,
                argmax,
            } => {
                let (outer, len, inner) = split_axis(&nodes[x.0].shape, *axis);
                acc(*x, &mut |gx| match kind {
                    Reduction::Sum | Reduction::Mean => {
                        let c = if *kind == Reduction::Mean {
                            1.0 / len as f64
                        } else {
                            1.0
                        };
                        for o in 0..outer {
                            for a in 0..len {
                                let base = (o * len + a) * inner;
                                for i in 0..inner {
                                    gx[base + i] += c * g[o * inner + i];
                                }
                            }
                        }
                    }
                    Reduction::Max => {
                        for o in 0..outer {
                            for i in 0..inner {
                                let a = argmax[o * inner + i];
                                gx[(o * len + a) * inner + i] += g[o * inner + i];
                            }
                        }
                    }
                });
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(&node.shape, *axis);
                let mut offset = 0;
                for &v in xs {
                    let len = nodes[v.0].shape[*axis];
                    acc(v, &mut |gv| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            for i in 0..len * inner {
                                gv[dst + i] += g[src + i];
                            }
                        }
                    });
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let (outer, full, inner) = split_axis(&nodes[x.0].shape, *axis);
                let len = node.shape[*axis];
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        let dst = (o * full + start) * inner;
                        let src = o * len * inner;
                        for i in 0..len * inner {
                            gx[dst + i] += g[src + i];
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                acc(*x, &mut |gx| {
                    gx.iter_mut().zip(g).for_each(|(x, y)| *x += y)
                });
            }
            Op::Softmax(x) => {
                let w = last_dim(&node.shape);
                let y = &node.data;
                acc(*x, &mut |gx| {
                    for r in 0..y.len() / w.max(1) {
                        let row = r * w..(r + 1) * w;
                        let dot: f64 = g[row.clone()]
                            .iter()
                            .zip(&y[row.clone()])
                            .map(|(a, b)| a * b)
                            .sum();
                        for i in row {
                            gx[i] += y[i] * (g[i] - dot);
                        }
                    }
                });
            }
            Op::NormalizeRows { x, inv_std } => {
                let w = last_dim(&node.shape);
                let y = &node.data;
                acc(*x, &mut |gx| {
                    for (r, is) in inv_std.iter().enumerate() {
                        let row = r * w..(r + 1) * w;
                        let mg = g[row.clone()].iter().sum::<f64>() / w as f64;
                        let mgy = g[row.clone()]
                            .iter()
                            .zip(&y[row.clone()])
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / w as f64;
                        for i in row {
                            gx[i] += is * (g[i] - mg - y[i] * mgy);
                        }
                    }
                });
            }
            Op::SelectRows { x, index } => {
                let w = numel(&node.shape[1..]);
                acc(*x, &mut |gx| {
                    for (r, &i) in index.iter().enumerate() {
                        for c in 0..w {
                            gx[i * w + c] += g[r * w + c];
                        }
                    }
                });
            }
            Op::Gather { x, index } => {
                let k = nodes[x.0].shape[1];
                acc(*x, &mut |gx| {
                    for (r, &c) in index.iter().enumerate() {
                        gx[r * k + c] += g[r];
                    }
                });
            }
            Op::StraightThrough { soft } => {
                acc(*soft, &mut |gs| {
                    gs.iter_mut().zip(g).for_each(|(x, y)| *x += y)
                });
            }
            Op::MaskedBroadcast { mask, rows } => {
                let sr = &nodes[rows.0].shape;
                let (b, n, d) = (sr[0], sr[1], sr[2]);
                let (mv, rv) = (&nodes[mask.0].data, &nodes[rows.0].data);
                acc(*mask, &mut |gm| {
                    for bi in 0..b {
                        for i in 0..n {
                            for j in 0..n {
                                let o = ((bi * n + i) * n + j) * d;
                                let r = (bi * n + j) * d;
                                let dot: f64 = (0..d).map(|c| g[o + c] * rv[r + c]).sum();
                                gm[(bi * n + i) * n + j] += dot;
                            }
                        }
                    }
                });
                acc(*rows, &mut |gr| {
                    for bi in 0..b {
                        for i in 0..n {
                            for j in 0..n {
                                let m = mv[(bi * n + i) * n + j];
                                if m == 0.0 {
                                    continue;
                                }
                                let o = ((bi * n + i) * n + j) * d;
                                let r = (bi * n + j) * d;
                                for c in 0..d {
                                    gr[r + c] += m * g[o + c];
                                }
                            }
                        }
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(g: &mut Graph, rows: &[Vec<f64>]) -> Var {
        let t = Tensor::from_rows(rows).unwrap().with_grad();
        g.leaf(&t)
    }

    #[test]
    fn matmul_identity_and_zero_row() {
        let mut g = Graph::new();
        let i2 = mat(&mut g, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let m = mat(&mut g, &[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let p = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(p), &[1.0, 2.0, 3.0, 4.0]);

        let a = mat(&mut g, &[vec![1.0, 0.0], vec![0.0, 0.0]]);
        let b = mat(&mut g, &[vec![0.0], vec![5.0]]);
        let p = g.matmul(a, b).unwrap();
        assert_eq!(g.value(p), &[0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error_reports_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = g.constant(vec![2, 2], vec![0.0; 4]).unwrap();
        match g.matmul(a, b) {
            Err(TensorError::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 2]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn elementwise_values() {
        let mut g = Graph::new();
        let x = g.constant(vec![3], vec![0.0, -3.0, 2.0]).unwrap();
        let t = g.tanh(x);
        assert_eq!(g.value(t)[0], 0.0);
        let a = g.abs(x);
        assert_eq!(g.value(a), &[0.0, 3.0, 2.0]);
        let e = g.elu(x);
        assert!((g.value(e)[1] - ((-3.0f64).exp() - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn abs_subgradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::new(vec![2], vec![0.0, -1.0]).unwrap().with_grad());
        let a = g.abs(x);
        let s = g.sum_all(a).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, -1.0]);
    }

    #[test]
    fn reductions() {
        let mut g = Graph::new();
        let x = mat(&mut g, &[vec![1.0, 3.0], vec![3.0, 1.0]]);
        let m = g.mean(x, 0).unwrap();
        assert_eq!(g.value(m), &[2.0, 2.0]);
        let mx = g.max(x, 0).unwrap();
        assert_eq!(g.value(mx), &[3.0, 3.0]);
        let s = g.sum_all(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn max_ties_route_to_first_index() {
        let mut g = Graph::new();
        let x = mat(&mut g, &[vec![2.0, 2.0, 1.0]]);
        let m = g.max(x, 1).unwrap();
        let s = g.sum_all(m).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn reduce_errors() {
        let mut g = Graph::new();
        let x = g.constant(vec![0, 2], vec![]).unwrap();
        assert!(matches!(g.sum(x, 0), Err(TensorError::EmptyAxis { .. })));
        assert!(matches!(g.sum(x, 2), Err(TensorError::InvalidAxis { .. })));
    }

    #[test]
    fn concat_values_and_errors() {
        let mut g = Graph::new();
        let a = g.constant(vec![2], vec![1.0, 2.0]).unwrap();
        let b = g.constant(vec![1], vec![3.0]).unwrap();
        let c = g.concat(&[a, b], 0).unwrap();
        assert_eq!(g.value(c), &[1.0, 2.0, 3.0]);
        let one = g.concat(&[a], 0).unwrap();
        assert_eq!(g.value(one), g.value(a));
        let m = g.constant(vec![1, 2], vec![0.0; 2]).unwrap();
        let n = g.constant(vec![1, 3], vec![0.0; 3]).unwrap();
        assert!(g.concat(&[m, n], 0).is_err());
        let ok = g.concat(&[m, n], 1).unwrap();
        assert_eq!(g.shape(ok), &[1, 5]);
    }

    #[test]
    fn softmax_rows() {
        let mut g = Graph::new();
        let x = g.constant(vec![2, 2], vec![0.0, 0.0, 1.0, 3.0]).unwrap();
        let y = g.softmax(x);
        assert_eq!(&g.value(y)[..2], &[0.5, 0.5]);
        let x2 = g.constant(vec![1, 2], vec![101.0, 103.0]).unwrap();
        let y2 = g.softmax(x2);
        for (a, b) in g.value(y)[2..].to_vec().iter().zip(g.value(y2)) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn product_rule_and_fan_out() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::scalar(2.0).with_grad());
        let y = g.leaf(&Tensor::scalar(3.0).with_grad());
        let p = g.mul(x, y).unwrap();
        g.backward(p).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0]);

        // z = tanh(x) + x*x: dz/dx = 1 - tanh² + 2x
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::scalar(0.5).with_grad());
        let t = g.tanh(x);
        let sq = g.mul(x, x).unwrap();
        let z = g.add(t, sq).unwrap();
        g.backward(z).unwrap();
        let expect = 1.0 - 0.5f64.tanh().powi(2) + 1.0;
        assert!((g.grad(x).unwrap()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn backward_guards() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad());
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarRoot(_))));
        let s = g.sum_all(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.backward(s), Err(TensorError::TapeConsumed));
    }

    #[test]
    fn untracked_inputs_get_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(vec![1], vec![4.0]).unwrap();
        let x = g.leaf(&Tensor::new(vec![1], vec![2.0]).unwrap().with_grad());
        let p = g.mul(c, x).unwrap();
        let s = g.sum_all(p).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap(), &[4.0]);
    }

    #[test]
    fn straight_through_forward_is_hard() {
        let mut g = Graph::new();
        let s = g.leaf(&Tensor::new(vec![2], vec![0.7, 0.3]).unwrap().with_grad());
        let h = g.straight_through(s, vec![1.0, 0.0]).unwrap();
        assert_eq!(g.value(h), &[1.0, 0.0]);
        let w = g.constant(vec![2], vec![2.0, 5.0]).unwrap();
        let p = g.mul(h, w).unwrap();
        let l = g.sum_all(p).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(s).unwrap(), &[2.0, 5.0]);
    }

    #[test]
    fn masked_broadcast_layout() {
        let mut g = Graph::new();
        let mask = g.constant(vec![1, 2, 2], vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        let rows = g.constant(vec![1, 2, 1], vec![7.0, 9.0]).unwrap();
        let out = g.masked_broadcast(mask, rows).unwrap();
        // receiver 0 sees sender 1, receiver 1 sees nothing
        assert_eq!(g.value(out), &[0.0, 9.0, 0.0, 0.0]);
    }
}
