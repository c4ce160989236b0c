//! Tape-based reverse-mode automatic differentiation over dense 2-D tensors.
//!
//! Every value is a row-major `rows × cols` matrix of `f64`; vectors are
//! `1 × d` and scalars `1 × 1`. Operations are recorded on a [`Tape`] in
//! execution order and [`Tape::backward`] replays them in reverse, so a
//! node's gradient is complete by the time its own backward rule runs.
//!
//! Parameters live outside the tape. A training step copies them in with
//! [`Tape::param`] (or [`Tape::constant`] for frozen weights), runs the
//! forward pass, calls `backward`, and reads leaf gradients back out.

use rand::Rng;

use crate::error::{Error, Result};

/// Dense row-major matrix with a same-shape gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    grad: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
            grad: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Shape(format!(
                "tensor data of length {} does not fill a {rows}x{cols} shape",
                values.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            grad: vec![0.0; values.len()],
            values,
        })
    }

    /// A `1 × d` row vector.
    pub fn row(values: Vec<f64>) -> Self {
        let cols = values.len();
        Self {
            rows: 1,
            cols,
            grad: vec![0.0; cols],
            values,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::row(vec![value])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.values[i * n + i] = 1.0;
        }
        t
    }

    /// Uniform(−bound, bound) initialization.
    pub fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Self {
        let values = (0..rows * cols)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Self {
            rows,
            cols,
            values,
            grad: vec![0.0; rows * cols],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut [f64] {
        &mut self.grad
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn item(&self) -> f64 {
        self.values[0]
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().chain(&self.grad).all(|v| v.is_finite())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    SliceCols(Var, usize),
    ConcatCols(Var, Var),
    Gather(Var, Vec<usize>),
    SoftmaxRows(Var),
    SoftmaxXent {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
    },
    CosineRows {
        a: Var,
        b: Var,
        norms: Vec<(f64, f64)>,
    },
    MaskMul(Var, Vec<f64>),
    ScaleRows(Var, Vec<f64>),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Norm below which a cosine input is treated as degenerate.
pub const COSINE_EPS: f64 = 1e-12;

/// Parameter views for one LSTM layer, gate order `i, f, g, o`.
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    /// `d_in × 4h`
    pub w_input: Var,
    /// `h × 4h`
    pub w_hidden: Var,
    /// `1 × 4h`
    pub bias: Var,
}

/// Recording of primitive applications. Not shareable across threads;
/// independent tapes may run concurrently.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    fn push(&mut self, mut value: Tensor, op: Op, requires_grad: bool) -> Var {
        if requires_grad {
            if value.grad.len() != value.values.len() {
                value.grad = vec![0.0; value.values.len()];
            } else {
                value.zero_grad();
            }
        } else {
            value.grad = Vec::new();
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf: value copied in, gradient accumulated on this tape.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.clone(), Op::Leaf, true)
    }

    /// Non-trainable leaf. Gradients never reach it.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.clone(), Op::Leaf, false)
    }

    pub fn constant_owned(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of `v`; all zeros for nodes that do not require one.
    pub fn grad(&self, v: Var) -> Vec<f64> {
        let node = &self.nodes[v.0];
        if node.requires_grad {
            node.value.grad.clone()
        } else {
            vec![0.0; node.value.len()]
        }
    }

    pub fn grad_slice(&self, v: Var) -> Option<&[f64]> {
        let node = &self.nodes[v.0];
        node.requires_grad.then_some(&node.value.grad[..])
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn shape_err(op: &str, a: (usize, usize), b: (usize, usize)) -> Error {
        Error::Shape(format!(
            "{op}: incompatible shapes {}x{} and {}x{}",
            a.0, a.1, b.0, b.1
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        if k != k2 {
            return Err(Self::shape_err("matmul", (n, k), (k2, m)));
        }
        let mut out = vec![0.0; n * m];
        gemm(
            n,
            k,
            m,
            self.value(a).values(),
            (k as isize, 1),
            self.value(b).values(),
            (m as isize, 1),
            &mut out,
            0.0,
        );
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::from_vec(n, m, out)?, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Self::shape_err("add", sa, sb));
        }
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Self::shape_err("sub", sa, sb));
        }
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Self::shape_err("mul", sa, sb));
        }
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds a `1 × m` row to every row of an `n × m` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (n, m) = self.shape(a);
        let sb = self.shape(bias);
        if sb != (1, m) {
            return Err(Self::shape_err("add_row", (n, m), sb));
        }
        let b = self.value(bias).values();
        let mut out = self.value(a).values().to_vec();
        for row in out.chunks_mut(m.max(1)) {
            row.iter_mut().zip(b).for_each(|(o, bi)| *o += bi);
        }
        let rg = self.needs(&[a, bias]);
        Ok(self.push(Tensor::from_vec(n, m, out)?, Op::AddRow(a, bias), rg))
    }

    /// `x·W + b` for `x: n×d_in`, `W: d_in×d_out`, `b: 1×d_out`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.1 != sw.0 {
            return Err(Self::shape_err("affine (input vs weight)", sx, sw));
        }
        if sb != (1, sw.1) {
            return Err(Self::shape_err("affine (weight vs bias)", sw, sb));
        }
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let t = self.value(a);
        let out = map(t, |x| x * k);
        let rg = self.needs(&[a]);
        self.push(out, Op::Scale(a, k), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = map(self.value(a), sigmoid);
        let rg = self.needs(&[a]);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = map(self.value(a), f64::tanh);
        let rg = self.needs(&[a]);
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = map(self.value(a), |x| x.max(0.0));
        let rg = self.needs(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (n, m) = self.shape(a);
        if start > end || end > m {
            return Err(Error::Shape(format!(
                "slice_cols: range {start}..{end} outside {n}x{m}"
            )));
        }
        let w = end - start;
        let src = self.value(a).values();
        let mut out = Vec::with_capacity(n * w);
        for r in 0..n {
            out.extend_from_slice(&src[r * m + start..r * m + end]);
        }
        let rg = self.needs(&[a]);
        Ok(self.push(Tensor::from_vec(n, w, out)?, Op::SliceCols(a, start), rg))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.0 != sb.0 {
            return Err(Self::shape_err("concat_cols", sa, sb));
        }
        let (n, ma, mb) = (sa.0, sa.1, sb.1);
        let (va, vb) = (self.value(a).values(), self.value(b).values());
        let mut out = Vec::with_capacity(n * (ma + mb));
        for r in 0..n {
            out.extend_from_slice(&va[r * ma..(r + 1) * ma]);
            out.extend_from_slice(&vb[r * mb..(r + 1) * mb]);
        }
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::from_vec(n, ma + mb, out)?, Op::ConcatCols(a, b), rg))
    }

    /// Row gather: output row `t` is `table[ids[t]]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.shape(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::OutOfVocabulary { id: bad, vocab: v });
        }
        let src = self.value(table).values();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.needs(&[table]);
        Ok(self.push(
            Tensor::from_vec(ids.len(), d, out)?,
            Op::Gather(table, ids.to_vec()),
            rg,
        ))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (n, m) = t.shape();
        let mut out = t.values().to_vec();
        for row in out.chunks_mut(m.max(1)) {
            softmax_in_place(row);
        }
        let rg = self.needs(&[a]);
        self.push(
            Tensor::from_vec(n, m, out).expect("shape preserved"),
            Op::SoftmaxRows(a),
            rg,
        )
    }

    /// Σ over rows with a target of `−log softmax(row)[target]`.
    /// Rows whose target is `None` are masked out.
    pub fn softmax_xent(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (n, k) = self.shape(logits);
        if targets.len() != n {
            return Err(Error::Shape(format!(
                "softmax_xent: {} targets for {n} logit rows",
                targets.len()
            )));
        }
        if k < 2 {
            return Err(Error::Shape(format!("softmax_xent needs K >= 2, got {k}")));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= k) {
            return Err(Error::TargetOutOfRange { target: *bad, classes: k });
        }
        let mut probs = self.value(logits).values().to_vec();
        let mut loss = 0.0;
        for (r, row) in probs.chunks_mut(k).enumerate() {
            let lse = log_sum_exp(row);
            if let Some(t) = targets[r] {
                loss += lse - row[t];
            }
            row.iter_mut().for_each(|z| *z = (*z - lse).exp());
        }
        let rg = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Row-wise cosine similarity, `n × 1`. A row pair where either norm is
    /// below [`COSINE_EPS`] yields 0 with zero gradient.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Self::shape_err("cosine", sa, sb));
        }
        let (n, d) = sa;
        let (va, vb) = (self.value(a).values(), self.value(b).values());
        let mut out = Vec::with_capacity(n);
        let mut norms = Vec::with_capacity(n);
        for r in 0..n {
            let (ra, rb) = (&va[r * d..(r + 1) * d], &vb[r * d..(r + 1) * d]);
            let na = dot(ra, ra).sqrt();
            let nb = dot(rb, rb).sqrt();
            if na < COSINE_EPS || nb < COSINE_EPS {
                out.push(0.0);
                norms.push((0.0, 0.0));
            } else {
                out.push(dot(ra, rb) / (na * nb));
                norms.push((na, nb));
            }
        }
        let rg = self.needs(&[a, b]);
        Ok(self.push(
            Tensor::from_vec(n, 1, out)?,
            Op::CosineRows { a, b, norms },
            rg,
        ))
    }

    /// Inverted dropout. Identity when not training or when `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..self.value(a).len())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        Ok(self.mask_mul(a, mask))
    }

    /// Elementwise product with a constant mask.
    pub fn mask_mul(&mut self, a: Var, mask: Vec<f64>) -> Var {
        let t = self.value(a);
        debug_assert_eq!(mask.len(), t.len());
        let out: Vec<f64> = t.values().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let shape = t.shape();
        let rg = self.needs(&[a]);
        self.push(
            Tensor::from_vec(shape.0, shape.1, out).expect("shape preserved"),
            Op::MaskMul(a, mask),
            rg,
        )
    }

    /// Multiplies row `r` by the constant `weights[r]`.
    pub fn scale_rows(&mut self, a: Var, weights: Vec<f64>) -> Result<Var> {
        let (n, m) = self.shape(a);
        if weights.len() != n {
            return Err(Error::Shape(format!(
                "scale_rows: {} weights for {n} rows",
                weights.len()
            )));
        }
        let mut out = self.value(a).values().to_vec();
        for (row, w) in out.chunks_mut(m.max(1)).zip(&weights) {
            row.iter_mut().for_each(|x| *x *= w);
        }
        let rg = self.needs(&[a]);
        Ok(self.push(Tensor::from_vec(n, m, out)?, Op::ScaleRows(a, weights), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).values().iter().sum();
        let rg = self.needs(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Sum of several same-shape nodes.
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| Error::Shape("add_all of no terms".into()))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    /// One LSTM step on a batch: `x: n×d_in`, `h, c: n×d_h`.
    ///
    /// `c' = f⊙c + i⊙g`, `h' = o⊙tanh(c')` with `i, f, o` sigmoid gates and
    /// `g` a tanh candidate.
    pub fn lstm_cell(&mut self, x: Var, h: Var, c: Var, p: &LstmVars) -> Result<(Var, Var)> {
        let d_h = self.shape(h).1;
        let (sc, sb) = (self.shape(c), self.shape(p.bias));
        if sc != self.shape(h) {
            return Err(Self::shape_err("lstm_cell (h vs c)", self.shape(h), sc));
        }
        if sb != (1, 4 * d_h) {
            return Err(Self::shape_err("lstm_cell (hidden vs bias)", self.shape(h), sb));
        }
        let zx = self.matmul(x, p.w_input)?;
        let zh = self.matmul(h, p.w_hidden)?;
        let z = self.add(zx, zh)?;
        let z = self.add_row(z, p.bias)?;
        let zi = self.slice_cols(z, 0, d_h)?;
        let zf = self.slice_cols(z, d_h, 2 * d_h)?;
        let zg = self.slice_cols(z, 2 * d_h, 3 * d_h)?;
        let zo = self.slice_cols(z, 3 * d_h, 4 * d_h)?;
        let i = self.sigmoid(zi);
        let f = self.sigmoid(zf);
        let g = self.tanh(zg);
        let o = self.sigmoid(zo);
        let fc = self.mul(f, c)?;
        let ig = self.mul(i, g)?;
        let c_next = self.add(fc, ig)?;
        let tc = self.tanh(c_next);
        let h_next = self.mul(o, tc)?;
        Ok((h_next, c_next))
    }

    /// Reverse sweep from a scalar node. Gradients accumulate additively, so
    /// call [`Tape::zero_grads`] first when reusing a tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shape(loss) != (1, 1) {
            let (r, c) = self.shape(loss);
            return Err(Error::Shape(format!("backward from non-scalar {r}x{c}")));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].value.grad[0] += 1.0;
        for idx in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(idx);
            let node = &rest[0];
            if !node.requires_grad || node.value.grad.iter().all(|&g| g == 0.0) {
                continue;
            }
            backprop(node, before);
        }
        for n in &self.nodes[..=loss.0] {
            if n.requires_grad && n.value.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite("gradient".into()));
            }
        }
        Ok(())
    }
}

fn grad_of(before: &mut [Node], v: Var) -> Option<&mut Vec<f64>> {
    let n = &mut before[v.0];
    n.requires_grad.then_some(&mut n.value.grad)
}

fn take_grad(before: &mut [Node], v: Var) -> Option<Vec<f64>> {
    let n = &mut before[v.0];
    n.requires_grad.then(|| std::mem::take(&mut n.value.grad))
}

fn value_of(before: &[Node], v: Var) -> &Tensor {
    &before[v.0].value
}

fn backprop(node: &Node, before: &mut [Node]) {
    let g = &node.value.grad;
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (n, k) = value_of(before, *a).shape();
            let m = value_of(before, *b).cols();
            if let Some(mut ga) = take_grad(before, *a) {
                // dA += dC · Bᵀ
                let bv = value_of(before, *b).values();
                gemm(n, m, k, g, (m as isize, 1), bv, (1, m as isize), &mut ga, 1.0);
                before[a.0].value.grad = ga;
            }
            if let Some(mut gb) = take_grad(before, *b) {
                // dB += Aᵀ · dC
                let av = value_of(before, *a).values();
                gemm(k, n, m, av, (1, k as isize), g, (m as isize, 1), &mut gb, 1.0);
                before[b.0].value.grad = gb;
            }
        }
        Op::Add(a, b) => {
            for v in [a, b] {
                if let Some(ga) = grad_of(before, *v) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = grad_of(before, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            if let Some(gb) = grad_of(before, *b) {
                gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
            }
        }
        Op::AddRow(a, bias) => {
            if let Some(ga) = grad_of(before, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            let m = out.cols().max(1);
            if let Some(gb) = grad_of(before, *bias) {
                for row in g.chunks(m) {
                    gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::Mul(a, b) => {
            for (this, other) in [(*a, *b), (*b, *a)] {
                if let Some(mut gt) = take_grad(before, this) {
                    let ov = value_of(before, other).values();
                    for ((x, y), z) in gt.iter_mut().zip(g).zip(ov) {
                        *x += y * z;
                    }
                    before[this.0].value.grad = gt;
                }
            }
        }
        Op::Scale(a, k) => {
            if let Some(ga) = grad_of(before, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y * k);
            }
        }
        Op::Sigmoid(a) => {
            if let Some(ga) = grad_of(before, *a) {
                for ((x, y), s) in ga.iter_mut().zip(g).zip(out.values()) {
                    *x += y * s * (1.0 - s);
                }
            }
        }
        Op::Tanh(a) => {
            if let Some(ga) = grad_of(before, *a) {
                for ((x, y), t) in ga.iter_mut().zip(g).zip(out.values()) {
                    *x += y * (1.0 - t * t);
                }
            }
        }
        Op::Relu(a) => {
            if let Some(ga) = grad_of(before, *a) {
                for ((x, y), o) in ga.iter_mut().zip(g).zip(out.values()) {
                    if *o > 0.0 {
                        *x += y;
                    }
                }
            }
        }
        Op::SliceCols(a, start) => {
            let m = value_of(before, *a).cols();
            let w = out.cols();
            if let Some(ga) = grad_of(before, *a) {
                for (r, row) in g.chunks(w.max(1)).enumerate() {
                    let dst = &mut ga[r * m + start..r * m + start + w];
                    dst.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::ConcatCols(a, b) => {
            let ma = value_of(before, *a).cols();
            let mb = value_of(before, *b).cols();
            let m = ma + mb;
            if let Some(ga) = grad_of(before, *a) {
                for (r, row) in g.chunks(m.max(1)).enumerate() {
                    let dst = &mut ga[r * ma..(r + 1) * ma];
                    dst.iter_mut().zip(&row[..ma]).for_each(|(x, y)| *x += y);
                }
            }
            if let Some(gb) = grad_of(before, *b) {
                for (r, row) in g.chunks(m.max(1)).enumerate() {
                    let dst = &mut gb[r * mb..(r + 1) * mb];
                    dst.iter_mut().zip(&row[ma..]).for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::Gather(table, ids) => {
            let d = out.cols();
            if let Some(gt) = grad_of(before, *table) {
                for (t, &i) in ids.iter().enumerate() {
                    let dst = &mut gt[i * d..(i + 1) * d];
                    dst.iter_mut()
                        .zip(&g[t * d..(t + 1) * d])
                        .for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::SoftmaxRows(a) => {
            let m = out.cols().max(1);
            if let Some(ga) = grad_of(before, *a) {
                for ((dst, gr), pr) in ga.chunks_mut(m).zip(g.chunks(m)).zip(out.values().chunks(m)) {
                    let inner = dot(gr, pr);
                    for ((x, gy), p) in dst.iter_mut().zip(gr).zip(pr) {
                        *x += p * (gy - inner);
                    }
                }
            }
        }
        Op::SoftmaxXent {
            logits,
            targets,
            probs,
        } => {
            let k = value_of(before, *logits).cols();
            let up = g[0];
            if let Some(gl) = grad_of(before, *logits) {
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    let dst = &mut gl[r * k..(r + 1) * k];
                    for (j, (x, p)) in dst.iter_mut().zip(&probs[r * k..(r + 1) * k]).enumerate() {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        *x += up * (p - onehot);
                    }
                }
            }
        }
        Op::CosineRows { a, b, norms } => {
            let d = value_of(before, *a).cols();
            let cos = out.values();
            for (this, other, is_a) in [(*a, *b, true), (*b, *a, false)] {
                let Some(mut gt) = take_grad(before, this) else { continue };
                let vs = value_of(before, this).values();
                let vo = value_of(before, other).values();
                for (r, &(na, nb)) in norms.iter().enumerate() {
                    if na == 0.0 {
                        continue;
                    }
                    let n_self = if is_a { na } else { nb };
                    let prod = na * nb;
                    let gy = g[r];
                    let rs = &vs[r * d..(r + 1) * d];
                    let ro = &vo[r * d..(r + 1) * d];
                    let dst = &mut gt[r * d..(r + 1) * d];
                    for ((x, s), o) in dst.iter_mut().zip(rs).zip(ro) {
                        *x += gy * (o / prod - cos[r] * s / (n_self * n_self));
                    }
                }
                before[this.0].value.grad = gt;
            }
        }
        Op::MaskMul(a, mask) => {
            if let Some(ga) = grad_of(before, *a) {
                for ((x, y), m) in ga.iter_mut().zip(g).zip(mask) {
                    *x += y * m;
                }
            }
        }
        Op::ScaleRows(a, weights) => {
            let m = out.cols().max(1);
            if let Some(ga) = grad_of(before, *a) {
                for ((dst, gr), w) in ga.chunks_mut(m).zip(g.chunks(m)).zip(weights) {
                    dst.iter_mut().zip(gr).for_each(|(x, y)| *x += y * w);
                }
            }
        }
        Op::Sum(a) => {
            let up = g[0];
            if let Some(ga) = grad_of(before, *a) {
                ga.iter_mut().for_each(|x| *x += up);
            }
        }
    }
}

/// `C = A·B + beta·C` with `A: m×k`, `B: k×n`, arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    assert!(k == 0 || (a.len() >= m * k && b.len() >= k * n));
    // SAFETY: the asserts above bound every index the kernel reads
    // (row-major or transposed views of fully populated buffers) and writes.
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
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor {
        rows: t.rows,
        cols: t.cols,
        values: t.values.iter().map(|&x| f(x)).collect(),
        grad: Vec::new(),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        rows: a.rows,
        cols: a.cols,
        values: a.values.iter().zip(&b.values).map(|(&x, &y)| f(x, y)).collect(),
        grad: Vec::new(),
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let lse = log_sum_exp(row);
    row.iter_mut().for_each(|z| *z = (*z - lse).exp());
}

/// Analytic vs central-difference gradient comparison.
///
/// `build` maps leaf variables (one per input tensor, all trainable) to a
/// scalar. Returns the maximum over all input elements of
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1)`.
pub fn grad_check<F>(inputs: &[Tensor], h: f64, mut build: F) -> Result<f64>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut eval = |ins: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.param(t)).collect();
        let out = build(&mut tape, &vars)?;
        let val = tape.value(out);
        if val.shape() != (1, 1) || !val.item().is_finite() {
            return Err(Error::NonFinite("grad_check objective".into()));
        }
        Ok((tape, vars, out))
    };
    let (mut tape, vars, out) = eval(inputs)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad(v)).collect();

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut worst = 0.0f64;
    for (ti, grads) in analytic.iter().enumerate() {
        for (ei, &a) in grads.iter().enumerate() {
            let orig = work[ti].values[ei];
            work[ti].values[ei] = orig + h;
            let (t_plus, _, o_plus) = eval(&work)?;
            let f_plus = t_plus.value(o_plus).item();
            work[ti].values[ei] = orig - h;
            let (t_minus, _, o_minus) = eval(&work)?;
            let f_minus = t_minus.value(o_minus).item();
            work[ti].values[ei] = orig;
            let numeric = (f_plus - f_minus) / (2.0 * h);
            if !a.is_finite() || !numeric.is_finite() {
                return Err(Error::NonFinite(format!("gradient of input {ti}[{ei}]")));
            }
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
