//! Reverse-mode automatic differentiation over 2-D `f64` matrices.
//!
//! A [`Tape`] records every operation as a node that references its parents by
//! index. Parents always precede children, so insertion order is a valid
//! topological order and [`Tape::backward`] is a single reverse sweep that
//! visits each node once. Nodes whose inputs do not require gradients are
//! never visited.

use crate::error::{MarioError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    AddScalar(Var),
    Gelu(Var),
    Exp(Var),
    Ln(Var),
    ClampMin(Var, f64),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Transpose(Var),
    SelectRows(Var, Vec<usize>),
    ScatterRows {
        base: Var,
        rows: Vec<usize>,
        src: Var,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Gather(Var, Vec<usize>),
    SumAll(Var),
    L2NormalizeRows(Var, Vec<f64>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        n_seq: usize,
        seq: usize,
        heads: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// `c = alpha * a·b + beta * c` on row-major buffers, with explicit strides so
/// transposed operands need no copy.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.iter_mut().for_each(|x| *x = 0.0);
        }
        return;
    }
    // SAFETY: the buffers hold m*k, k*n and m*n elements laid out with the
    // given strides; every caller derives them from node shapes.
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

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        rows: usize,
        cols: usize,
        value: Vec<f64>,
        requires_grad: bool,
        op: Op,
    ) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(
        &mut self,
        rows: usize,
        cols: usize,
        value: Vec<f64>,
        requires_grad: bool,
    ) -> Result<Var> {
        if rows * cols != value.len() {
            return Err(MarioError::Contract(format!(
                "leaf {}x{} given {} values",
                rows,
                cols,
                value.len()
            )));
        }
        Ok(self.push(rows, cols, value, requires_grad, Op::Leaf))
    }

    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Result<Var> {
        self.leaf(rows, cols, value, false)
    }

    pub fn scalar_const(&mut self, x: f64) -> Var {
        self.push(1, 1, vec![x], false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    fn check_same(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(MarioError::Contract(format!(
                "{what}: shape {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(MarioError::Contract(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a),
            k as isize,
            1,
            self.value(b),
            n as isize,
            1,
            0.0,
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(m, n, out, rg, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return Err(MarioError::Contract(format!(
                "matmul_nt {m}x{k} by ({n}x{k2})^T"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a),
            k as isize,
            1,
            self.value(b),
            1,
            k as isize,
            0.0,
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(m, n, out, rg, Op::MatMulNt(a, b)))
    }

    fn zip(
        &mut self,
        a: Var,
        b: Var,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.check_same(a, b, what)?;
        let (r, c) = self.shape(a);
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(r, c, out, rg, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a 1×n row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(row) != (1, c) {
            return Err(MarioError::Contract(format!(
                "add_row: {r}x{c} with {:?}",
                self.shape(row)
            )));
        }
        let b = self.value(row);
        let out = self
            .value(a)
            .chunks(c.max(1))
            .flat_map(|chunk| chunk.iter().zip(b).map(|(x, y)| x + y))
            .collect::<Vec<_>>();
        let rg = self.rg(&[a, row]);
        Ok(self.push(r, c, out, rg, Op::AddRow(a, row)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|x| x * s).collect();
        let rg = self.rg(&[a]);
        self.push(r, c, out, rg, Op::Scale(a, s))
    }

    /// Multiplies every entry of `a` by the 1×1 variable `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.shape(s) != (1, 1) {
            return Err(MarioError::Contract("scale_by expects a 1x1 scale".into()));
        }
        let k = self.scalar(s);
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|x| x * k).collect();
        let rg = self.rg(&[a, s]);
        Ok(self.push(r, c, out, rg, Op::ScaleBy(a, s)))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|x| x + s).collect();
        let rg = self.rg(&[a]);
        self.push(r, c, out, rg, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let rg = self.rg(&[a]);
        self.push(r, c, out, rg, op)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, gelu_scalar, Op::Gelu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.map(a, f64::ln, Op::Ln(a))
    }

    /// `max(a, floor)` elementwise; clamped entries pass no gradient.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        self.map(a, |x| x.max(floor), Op::ClampMin(a, floor))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(c.max(1)) {
            softmax_in_place(row);
        }
        let rg = self.rg(&[a]);
        self.push(r, c, out, rg, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(c.max(1)) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let rg = self.rg(&[a]);
        self.push(r, c, out, rg, Op::LogSoftmaxRows(a))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(gamma) != (1, c) || self.shape(beta) != (1, c) {
            return Err(MarioError::Contract(
                "layer_norm: gain/bias must be 1 x cols".into(),
            ));
        }
        let xv = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..c {
                let h = (row[j] - mean) * inv;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            r,
            c,
            out,
            rg,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let v = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        let rg = self.rg(&[a]);
        self.push(c, r, out, rg, Op::Transpose(a))
    }

    /// Gathers rows by index (repeats allowed); backward scatter-adds.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(a);
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(MarioError::Contract(format!(
                "select_rows: row {bad} of {r}"
            )));
        }
        let v = self.value(a);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(&v[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(rows.len(), c, out, rg, Op::SelectRows(a, rows.to_vec())))
    }

    /// Copy of `base` with the listed rows replaced by the rows of `src`.
    pub fn scatter_rows(&mut self, base: Var, rows: &[usize], src: Var) -> Result<Var> {
        let (r, c) = self.shape(base);
        if self.shape(src) != (rows.len(), c) {
            return Err(MarioError::Contract(format!(
                "scatter_rows: {} rows of width {c} vs {:?}",
                rows.len(),
                self.shape(src)
            )));
        }
        let mut seen = vec![false; r];
        for &i in rows {
            if i >= r || seen[i] {
                return Err(MarioError::Contract(format!(
                    "scatter_rows: bad or repeated row {i}"
                )));
            }
            seen[i] = true;
        }
        let mut out = self.value(base).to_vec();
        let s = self.value(src);
        for (k, &i) in rows.iter().enumerate() {
            out[i * c..(i + 1) * c].copy_from_slice(&s[k * c..(k + 1) * c]);
        }
        let rg = self.rg(&[base, src]);
        Ok(self.push(
            r,
            c,
            out,
            rg,
            Op::ScatterRows {
                base,
                rows: rows.to_vec(),
                src,
            },
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts
            .first()
            .map(|&p| self.shape(p).1)
            .ok_or_else(|| MarioError::Contract("concat_rows of nothing".into()))?;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.shape(p);
            if pc != c {
                return Err(MarioError::Contract(format!(
                    "concat_rows: width {pc} vs {c}"
                )));
            }
            out.extend_from_slice(self.value(p));
            rows += r;
        }
        let rg = self.rg(parts);
        Ok(self.push(rows, c, out, rg, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts
            .first()
            .map(|&p| self.shape(p).0)
            .ok_or_else(|| MarioError::Contract("concat_cols of nothing".into()))?;
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.shape(p);
            if pr != r {
                return Err(MarioError::Contract(format!(
                    "concat_cols: height {pr} vs {r}"
                )));
            }
            total += pc;
        }
        let mut out = vec![0.0; r * total];
        let mut off = 0;
        for &p in parts {
            let (_, pc) = self.shape(p);
            let v = self.value(p);
            for i in 0..r {
                out[i * total + off..i * total + off + pc]
                    .copy_from_slice(&v[i * pc..(i + 1) * pc]);
            }
            off += pc;
        }
        let rg = self.rg(parts);
        Ok(self.push(r, total, out, rg, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start + len > c {
            return Err(MarioError::Contract(format!(
                "slice_cols {start}+{len} of {c}"
            )));
        }
        let v = self.value(a);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&v[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(r, len, out, rg, Op::SliceCols(a, start)))
    }

    /// Builds an `rows x cols` matrix whose entries are `a.flat[index[i]]`.
    pub fn gather(&mut self, a: Var, index: &[usize], rows: usize, cols: usize) -> Result<Var> {
        let n = self.value(a).len();
        if index.len() != rows * cols {
            return Err(MarioError::Contract(
                "gather: index length != rows*cols".into(),
            ));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(MarioError::Contract(format!("gather: index {bad} of {n}")));
        }
        let v = self.value(a);
        let out = index.iter().map(|&i| v[i]).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(rows, cols, out, rg, Op::Gather(a, index.to_vec())))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push(1, 1, vec![s], rg, Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Divides each row by its Euclidean norm (floored at `eps`).
    pub fn l2_normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let (r, c) = self.shape(a);
        let v = self.value(a);
        let mut norms = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for row in v.chunks(c.max(1)) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(eps);
            norms.push(n);
            out.extend(row.iter().map(|x| x / n));
        }
        let rg = self.rg(&[a]);
        self.push(r, c, out, rg, Op::L2NormalizeRows(a, norms))
    }

    /// Multi-head scaled dot-product attention over `n_seq` independent
    /// sequences of length `seq` stacked along rows of `q`, `k`, `v`
    /// (each `(n_seq*seq) x d`). Head `h` uses columns `h*d/heads..`.
    /// `bias`, when given, is `(heads*seq) x seq` and is added to the scores
    /// of every sequence. With `causal`, position `i` sees only `j <= i`.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        n_seq: usize,
        seq: usize,
        heads: usize,
        causal: bool,
    ) -> Result<Var> {
        let (rows, d) = self.shape(q);
        if self.shape(k) != (rows, d) || self.shape(v) != (rows, d) {
            return Err(MarioError::Contract(
                "attention: q/k/v shapes differ".into(),
            ));
        }
        if rows != n_seq * seq || heads == 0 || d % heads != 0 {
            return Err(MarioError::Contract(format!(
                "attention: {rows}x{d} rows for {n_seq} sequences of {seq}, {heads} heads"
            )));
        }
        if let Some(b) = bias {
            if self.shape(b) != (heads * seq, seq) {
                return Err(MarioError::Contract(format!(
                    "attention bias {:?}, expected {}x{}",
                    self.shape(b),
                    heads * seq,
                    seq
                )));
            }
        }
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        let bv = bias.map(|b| self.value(b));
        let mut probs = vec![0.0; n_seq * heads * seq * seq];
        let mut out = vec![0.0; rows * d];
        for s in 0..n_seq {
            for h in 0..heads {
                let pbase = (s * heads + h) * seq * seq;
                for i in 0..seq {
                    let qi = &qv[(s * seq + i) * d + h * dk..(s * seq + i) * d + (h + 1) * dk];
                    let row = &mut probs[pbase + i * seq..pbase + (i + 1) * seq];
                    let lim = if causal { i + 1 } else { seq };
                    for j in 0..lim {
                        let kj = &kv[(s * seq + j) * d + h * dk..(s * seq + j) * d + (h + 1) * dk];
                        let mut dot = 0.0;
                        for t in 0..dk {
                            dot += qi[t] * kj[t];
                        }
                        let mut sc = dot * scale;
                        if let Some(b) = bv {
                            sc += b[(h * seq + i) * seq + j];
                        }
                        row[j] = sc;
                    }
                    softmax_in_place(&mut row[..lim]);
                    for x in row[lim..].iter_mut() {
                        *x = 0.0;
                    }
                    let o = &mut out[(s * seq + i) * d + h * dk..(s * seq + i) * d + (h + 1) * dk];
                    for j in 0..lim {
                        let p = row[j];
                        let vj = &vv[(s * seq + j) * d + h * dk..(s * seq + j) * d + (h + 1) * dk];
                        for t in 0..dk {
                            o[t] += p * vj[t];
                        }
                    }
                }
            }
        }
        let mut parents = vec![q, k, v];
        if let Some(b) = bias {
            parents.push(b);
        }
        let rg = self.rg(&parents);
        Ok(self.push(
            rows,
            d,
            out,
            rg,
            Op::Attention {
                q,
                k,
                v,
                bias,
                n_seq,
                seq,
                heads,
                probs,
            },
        ))
    }

    /// Gradient accumulated for `v` by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Reverse sweep from a 1×1 `loss`. Only leaf gradients are retained, and
    /// the recorded ops are consumed: a tape supports one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shape(loss) != (1, 1) {
            return Err(MarioError::Contract(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        if !self.scalar(loss).is_finite() {
            return Err(MarioError::Numerical(format!(
                "loss is {}",
                self.scalar(loss)
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backward_node(i, &g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var) -> Option<&mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let n = node.value.len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn acc_with(&mut self, v: Var, f: impl Fn(usize) -> f64) {
        if let Some(buf) = self.acc(v) {
            for (i, x) in buf.iter_mut().enumerate() {
                *x += f(i);
            }
        }
    }

    fn backward_node(&mut self, i: usize, g: &[f64]) {
        // Each node is visited once, so its op can be moved out.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        let (rows, cols) = (self.nodes[i].rows, self.nodes[i].cols);
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(a);
                let n = cols;
                if self.requires_grad(a) {
                    let bv = self.value(b).to_vec();
                    let buf = self.acc(a).unwrap();
                    // dA = dC · Bᵀ
                    gemm(m, n, k, g, n as isize, 1, &bv, 1, n as isize, 1.0, buf);
                }
                if self.requires_grad(b) {
                    let av = self.value(a).to_vec();
                    let buf = self.acc(b).unwrap();
                    // dB = Aᵀ · dC
                    gemm(k, m, n, &av, 1, k as isize, g, n as isize, 1, 1.0, buf);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.shape(a);
                let n = cols;
                if self.requires_grad(a) {
                    let bv = self.value(b).to_vec();
                    let buf = self.acc(a).unwrap();
                    // dA = dC · B
                    gemm(m, n, k, g, n as isize, 1, &bv, k as isize, 1, 1.0, buf);
                }
                if self.requires_grad(b) {
                    let av = self.value(a).to_vec();
                    let buf = self.acc(b).unwrap();
                    // dB = dCᵀ · A
                    gemm(n, m, k, g, 1, n as isize, &av, k as isize, 1, 1.0, buf);
                }
            }
            Op::Add(a, b) => {
                self.acc_with(a, |j| g[j]);
                self.acc_with(b, |j| g[j]);
            }
            Op::Sub(a, b) => {
                self.acc_with(a, |j| g[j]);
                self.acc_with(b, |j| -g[j]);
            }
            Op::Mul(a, b) => {
                let av = self.value(a).to_vec();
                let bv = self.value(b).to_vec();
                self.acc_with(a, |j| g[j] * bv[j]);
                self.acc_with(b, |j| g[j] * av[j]);
            }
            Op::AddRow(a, row) => {
                self.acc_with(a, |j| g[j]);
                if let Some(buf) = self.acc(row) {
                    for chunk in g.chunks(cols.max(1)) {
                        for (x, y) in buf.iter_mut().zip(chunk) {
                            *x += y;
                        }
                    }
                }
            }
            Op::Scale(a, s) => self.acc_with(a, |j| g[j] * s),
            Op::ScaleBy(a, s) => {
                let k = self.scalar(s);
                self.acc_with(a, |j| g[j] * k);
                if self.requires_grad(s) {
                    let d: f64 = self.value(a).iter().zip(g).map(|(x, y)| x * y).sum();
                    self.acc_with(s, |_| d);
                }
            }
            Op::AddScalar(a) => self.acc_with(a, |j| g[j]),
            Op::Gelu(a) => {
                let av = self.value(a).to_vec();
                self.acc_with(a, |j| g[j] * gelu_grad(av[j]));
            }
            Op::Exp(a) => {
                let out = self.nodes[i].value.clone();
                self.acc_with(a, |j| g[j] * out[j]);
            }
            Op::Ln(a) => {
                let av = self.value(a).to_vec();
                self.acc_with(a, |j| g[j] / av[j]);
            }
            Op::ClampMin(a, floor) => {
                let av = self.value(a).to_vec();
                self.acc_with(a, |j| if av[j] > floor { g[j] } else { 0.0 });
            }
            Op::SoftmaxRows(a) => {
                let y = self.nodes[i].value.clone();
                let mut dx = vec![0.0; y.len()];
                for r in 0..rows {
                    let ys = &y[r * cols..(r + 1) * cols];
                    let gs = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        dx[r * cols + j] = ys[j] * (gs[j] - dot);
                    }
                }
                self.acc_with(a, |j| dx[j]);
            }
            Op::LogSoftmaxRows(a) => {
                let y = self.nodes[i].value.clone();
                let mut dx = vec![0.0; y.len()];
                for r in 0..rows {
                    let gs = &g[r * cols..(r + 1) * cols];
                    let total: f64 = gs.iter().sum();
                    for j in 0..cols {
                        dx[r * cols + j] = gs[j] - y[r * cols + j].exp() * total;
                    }
                }
                self.acc_with(a, |j| dx[j]);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gv = self.value(gamma).to_vec();
                if self.requires_grad(x) {
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..cols {
                            let d = g[r * cols + j] * gv[j];
                            mean_d += d;
                            mean_dx += d * xhat[r * cols + j];
                        }
                        mean_d /= cols as f64;
                        mean_dx /= cols as f64;
                        for j in 0..cols {
                            let d = g[r * cols + j] * gv[j];
                            dx[r * cols + j] =
                                inv_std[r] * (d - mean_d - xhat[r * cols + j] * mean_dx);
                        }
                    }
                    self.acc_with(x, |j| dx[j]);
                }
                if let Some(buf) = self.acc(gamma) {
                    for r in 0..rows {
                        for j in 0..cols {
                            buf[j] += g[r * cols + j] * xhat[r * cols + j];
                        }
                    }
                }
                if let Some(buf) = self.acc(beta) {
                    for r in 0..rows {
                        for j in 0..cols {
                            buf[j] += g[r * cols + j];
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                // output is rows x cols = (a.cols x a.rows)
                self.acc_with(a, |j| {
                    let (ar, ac) = (j / rows, j % rows);
                    g[ac * cols + ar]
                });
            }
            Op::SelectRows(a, idx) => {
                if let Some(buf) = self.acc(a) {
                    for (k, &r) in idx.iter().enumerate() {
                        for j in 0..cols {
                            buf[r * cols + j] += g[k * cols + j];
                        }
                    }
                }
            }
            Op::ScatterRows {
                base,
                rows: idx,
                src,
            } => {
                if self.requires_grad(base) {
                    let mut gb = g.to_vec();
                    for &r in &idx {
                        gb[r * cols..(r + 1) * cols]
                            .iter_mut()
                            .for_each(|x| *x = 0.0);
                    }
                    self.acc_with(base, |j| gb[j]);
                }
                if let Some(buf) = self.acc(src) {
                    for (k, &r) in idx.iter().enumerate() {
                        for j in 0..cols {
                            buf[k * cols + j] += g[r * cols + j];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(p).len();
                    self.acc_with(p, |j| g[off + j]);
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let pc = self.shape(p).1;
                    self.acc_with(p, |j| {
                        let (r, c) = (j / pc, j % pc);
                        g[r * cols + off + c]
                    });
                    off += pc;
                }
            }
            Op::SliceCols(a, start) => {
                let ac = self.shape(a).1;
                if let Some(buf) = self.acc(a) {
                    for r in 0..rows {
                        for j in 0..cols {
                            buf[r * ac + start + j] += g[r * cols + j];
                        }
                    }
                }
            }
            Op::Gather(a, idx) => {
                if let Some(buf) = self.acc(a) {
                    for (k, &t) in idx.iter().enumerate() {
                        buf[t] += g[k];
                    }
                }
            }
            Op::SumAll(a) => self.acc_with(a, |_| g[0]),
            Op::L2NormalizeRows(a, norms) => {
                let y = self.nodes[i].value.clone();
                let mut dx = vec![0.0; y.len()];
                for r in 0..rows {
                    let ys = &y[r * cols..(r + 1) * cols];
                    let gs = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        dx[r * cols + j] = (gs[j] - ys[j] * dot) / norms[r];
                    }
                }
                self.acc_with(a, |j| dx[j]);
            }
            Op::Attention {
                q,
                k,
                v,
                bias,
                n_seq,
                seq,
                heads,
                probs,
            } => self.attention_backward(g, q, k, v, bias, n_seq, seq, heads, &probs, cols),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &mut self,
        g: &[f64],
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        n_seq: usize,
        seq: usize,
        heads: usize,
        probs: &[f64],
        d: usize,
    ) {
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let qv = self.value(q).to_vec();
        let kv = self.value(k).to_vec();
        let vv = self.value(v).to_vec();
        let rows = n_seq * seq;
        let mut dq = vec![0.0; rows * d];
        let mut dkm = vec![0.0; rows * d];
        let mut dv = vec![0.0; rows * d];
        let mut dbias = vec![0.0; heads * seq * seq];
        let mut ds = vec![0.0; seq];
        for s in 0..n_seq {
            for h in 0..heads {
                let pbase = (s * heads + h) * seq * seq;
                for i in 0..seq {
                    let p = &probs[pbase + i * seq..pbase + (i + 1) * seq];
                    let go = &g[(s * seq + i) * d + h * dk..(s * seq + i) * d + (h + 1) * dk];
                    // dP_ij = dO_i · V_j ; dV_j += P_ij dO_i
                    let mut dot = 0.0;
                    for j in 0..seq {
                        if p[j] == 0.0 {
                            ds[j] = 0.0;
                            continue;
                        }
                        let base = (s * seq + j) * d + h * dk;
                        let mut dp = 0.0;
                        for t in 0..dk {
                            dp += go[t] * vv[base + t];
                            dv[base + t] += p[j] * go[t];
                        }
                        ds[j] = dp;
                        dot += p[j] * dp;
                    }
                    for j in 0..seq {
                        ds[j] = p[j] * (ds[j] - dot);
                    }
                    let qi = (s * seq + i) * d + h * dk;
                    for j in 0..seq {
                        let sc = ds[j];
                        if sc == 0.0 {
                            continue;
                        }
                        dbias[(h * seq + i) * seq + j] += sc;
                        let kj = (s * seq + j) * d + h * dk;
                        for t in 0..dk {
                            dq[qi + t] += sc * scale * kv[kj + t];
                            dkm[kj + t] += sc * scale * qv[qi + t];
                        }
                    }
                }
            }
        }
        self.acc_with(q, |j| dq[j]);
        self.acc_with(k, |j| dkm[j]);
        self.acc_with(v, |j| dv[j]);
        if let Some(b) = bias {
            self.acc_with(b, |j| dbias[j]);
        }
    }
}

/// Max-subtracted softmax over a slice, in place.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    if row.is_empty() {
        return;
    }
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}
