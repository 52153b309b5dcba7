use crate::error::{Error, Result};

use super::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Gelu(Var),
    Sqrt(Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        // (mean, 1/std) per normalized row
        stats: Vec<(f32, f32)>,
    },
    Transpose(Var),
    Reshape(Var),
    SliceRows { src: Var, start: usize },
    ConcatRows(Vec<Var>),
    SliceCols { src: Var, start: usize },
    ConcatCols(Vec<Var>),
    Gather { table: Var, ids: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f32>,
    op: Op,
    needs_grad: bool,
}

/// Wengert list of recorded operations.
///
/// Nodes are appended in evaluation order, so every op's inputs precede it
/// and a single reverse sweep visits each op exactly once.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;

fn row_len(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

/// `c = beta * c + op(a) * op(b)` with logical shapes a:[m,k], b:[k,n].
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    c: &mut [f32],
    beta: f32,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths match the logical shapes and strides above.
    unsafe {
        matrixmultiply::sgemm(
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

fn check_broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    let nb: usize = b.iter().product();
    let ok = a == b || nb == 1 || (b.len() <= a.len() && a[a.len() - b.len()..] == *b);
    if ok {
        Ok(())
    } else {
        Err(Error::shape(op, a, b))
    }
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

    fn push(&mut self, shape: Vec<usize>, data: Vec<f32>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            op,
            needs_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a copy of `t`; gradients are tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, t.requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.shape, t.data, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f32) -> Var {
        self.push(Vec::new(), vec![value], Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor {
            shape: n.shape.clone(),
            data: n.data.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar_value(&self, v: Var) -> f32 {
        self.nodes[v.0].data[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads[v.0].as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    // ---- linear algebra ------------------------------------------------

    /// `a[m,k] · b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[m,k] · b[n,k]ᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a),
            false,
            self.value(b),
            trans_b,
            &mut out,
            0.0,
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, trans_b }, ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::invalid(format!("transpose needs rank 2, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let ng = self.ng(a);
        Ok(self.push(vec![c, r], out, Op::Transpose(a), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() {
            return Err(Error::shape("reshape", self.shape(a), shape));
        }
        let data = self.value(a).to_vec();
        let ng = self.ng(a);
        Ok(self.push(shape.to_vec(), data, Op::Reshape(a), ng))
    }

    // ---- elementwise ---------------------------------------------------

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f32, f32) -> f32,
        op: Op,
    ) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        check_broadcast(name, &sa, self.shape(b))?;
        let av = self.value(a);
        let bv = self.value(b);
        let nb = bv.len();
        let out: Vec<f32> = if nb == av.len() {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        } else {
            av.iter()
                .enumerate()
                .map(|(i, &x)| f(x, bv[i % nb]))
                .collect()
        };
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(sa, out, op, ng))
    }

    /// `a + b`, with `b` equal-shaped, scalar, or a trailing-axis suffix of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let out = self.value(a).iter().map(|&x| x * c).collect();
        let s = self.shape(a).to_vec();
        let ng = self.ng(a);
        self.push(s, out, Op::Scale(a, c), ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
            .collect();
        let s = self.shape(a).to_vec();
        let ng = self.ng(a);
        self.push(s, out, Op::Gelu(a), ng)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(x) = self.value(a).iter().find(|x| !(**x >= 0.0)) {
            return Err(Error::invalid(format!("sqrt of {x}")));
        }
        let out = self.value(a).iter().map(|x| x.sqrt()).collect();
        let s = self.shape(a).to_vec();
        let ng = self.ng(a);
        Ok(self.push(s, out, Op::Sqrt(a), ng))
    }

    // ---- reductions ----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).iter().map(|&x| x as f64).sum();
        let ng = self.ng(a);
        self.push(Vec::new(), vec![s as f32], Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s: f64 = v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64;
        let ng = self.ng(a);
        self.push(Vec::new(), vec![s as f32], Op::Mean(a), ng)
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mse", self.shape(a), self.shape(b)));
        }
        let av = self.value(a);
        let bv = self.value(b);
        let s: f64 = av
            .iter()
            .zip(bv)
            .map(|(&x, &y)| {
                let d = (x - y) as f64;
                d * d
            })
            .sum::<f64>()
            / av.len() as f64;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Vec::new(), vec![s as f32], Op::Mse(a, b), ng))
    }

    // ---- normalization -------------------------------------------------

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        let n = row_len(&s);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_exact_mut(n) {
            let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut z = 0.0f32;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                z += *x;
            }
            let inv = 1.0 / z;
            row.iter_mut().for_each(|x| *x *= inv);
        }
        let ng = self.ng(a);
        self.push(s, out, Op::Softmax(a), ng)
    }

    /// Normalizes over the last axis with population variance, then applies
    /// `gain` and `bias` (both shaped `[d]`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f32) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::invalid("layer_norm eps must be positive"));
        }
        let s = self.shape(x).to_vec();
        let d = row_len(&s);
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape("layer_norm", &s, self.shape(gain)));
        }
        let g = self.value(gain);
        let b = self.value(bias);
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        let mut stats = Vec::with_capacity(xv.len() / d);
        for (row, o) in xv.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = row
                .iter()
                .map(|&v| {
                    let c = v as f64 - mean;
                    c * c
                })
                .sum::<f64>()
                / d as f64;
            let rstd = (1.0 / (var + eps as f64).sqrt()) as f32;
            let mean = mean as f32;
            for j in 0..d {
                o[j] = (row[j] - mean) * rstd * g[j] + b[j];
            }
            stats.push((mean, rstd));
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            s,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            },
            ng,
        ))
    }

    // ---- structural ----------------------------------------------------

    /// Rows `[start, start+len)` along the first axis.
    pub fn slice_rows(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(src).to_vec();
        if s.is_empty() || start + len > s[0] || len == 0 {
            return Err(Error::shape("slice_rows", &s, &[start, len]));
        }
        let row: usize = s[1..].iter().product();
        let data = self.value(src)[start * row..(start + len) * row].to_vec();
        let mut shape = s.clone();
        shape[0] = len;
        let ng = self.ng(src);
        Ok(self.push(shape, data, Op::SliceRows { src, start }, ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_rows of nothing"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != *tail {
                return Err(Error::shape("concat_rows", s, &tail));
            }
            rows += s[0];
            data.extend_from_slice(self.value(p));
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(shape, data, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Columns `[start, start+len)` of a rank-2 value.
    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(src).to_vec();
        if s.len() != 2 || start + len > s[1] || len == 0 {
            return Err(Error::shape("slice_cols", &s, &[start, len]));
        }
        let (r, c) = (s[0], s[1]);
        let src_v = self.value(src);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src_v[i * c + start..i * c + start + len]);
        }
        let ng = self.ng(src);
        Ok(self.push(vec![r, len], data, Op::SliceCols { src, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_cols of nothing"))?;
        let r = self.shape(*first)[0];
        let mut width = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != r {
                return Err(Error::shape("concat_cols", s, &[r]));
            }
            width += s[1];
        }
        let mut data = vec![0.0; r * width];
        let mut off = 0;
        for &p in parts {
            let c = self.shape(p)[1];
            let v = self.value(p);
            for i in 0..r {
                data[i * width + off..i * width + off + c].copy_from_slice(&v[i * c..(i + 1) * c]);
            }
            off += c;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(vec![r, width], data, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Row lookup `table[ids[i]]`, producing `[ids.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("gather_rows", &s, &[ids.len()]));
        }
        let (v, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::invalid(format!("row id {bad} out of range {v}")));
        }
        let t = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let ng = self.ng(table);
        Ok(self.push(
            vec![ids.len(), d],
            data,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    // ---- reverse sweep -------------------------------------------------

    fn acc(&mut self, v: Var, f: impl FnOnce(&mut [f32])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        // Sized from the shape: the node's data may be temporarily detached.
        let n = self.nodes[v.0].shape.iter().product();
        let g = self.grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(g);
    }

    fn acc_slice(&mut self, v: Var, src: &[f32]) {
        self.acc(v, |g| g.iter_mut().zip(src).for_each(|(a, b)| *a += b));
    }

    /// Clears all gradients held on the tape.
    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Seeds `d loss / d loss = 1` and propagates to every node that needs
    /// a gradient. Gradients accumulate across repeated calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.acc(loss, |g| g[0] += 1.0);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[f32]) {
        // Detach the op so input gradients can be borrowed mutably.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            &Op::MatMul { a, b, trans_b } => {
                let (m, n) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                let k = self.nodes[a.0].shape[1];
                if self.ng(a) {
                    let bv = std::mem::take(&mut self.nodes[b.0].data);
                    self.acc(a, |ga| {
                        // dA[m,k] = dC[m,n] · op(B)ᵀ
                        gemm(m, n, k, g, false, &bv, !trans_b, ga, 1.0);
                    });
                    self.nodes[b.0].data = bv;
                }
                if self.ng(b) {
                    let av = std::mem::take(&mut self.nodes[a.0].data);
                    self.acc(b, |gb| {
                        if trans_b {
                            // dB[n,k] = dCᵀ · A
                            gemm(n, m, k, g, true, &av, false, gb, 1.0);
                        } else {
                            // dB[k,n] = Aᵀ · dC
                            gemm(k, m, n, &av, true, g, false, gb, 1.0);
                        }
                    });
                    self.nodes[a.0].data = av;
                }
            }
            &Op::Add(a, b) | &Op::Sub(a, b) => {
                let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
                self.acc_slice(a, g);
                self.acc(b, |gb| {
                    let nb = gb.len();
                    for (j, &x) in g.iter().enumerate() {
                        gb[j % nb] += sign * x;
                    }
                });
            }
            &Op::Mul(a, b) => {
                if self.ng(a) {
                    let bv = std::mem::take(&mut self.nodes[b.0].data);
                    let nb = bv.len();
                    self.acc(a, |ga| {
                        for (j, x) in ga.iter_mut().enumerate() {
                            *x += g[j] * bv[j % nb];
                        }
                    });
                    self.nodes[b.0].data = bv;
                }
                if self.ng(b) {
                    let av = std::mem::take(&mut self.nodes[a.0].data);
                    self.acc(b, |gb| {
                        let nb = gb.len();
                        for (j, &x) in av.iter().enumerate() {
                            gb[j % nb] += g[j] * x;
                        }
                    });
                    self.nodes[a.0].data = av;
                }
            }
            &Op::Scale(a, c) => self.acc(a, |ga| {
                ga.iter_mut().zip(g).for_each(|(x, &y)| *x += c * y);
            }),
            &Op::Gelu(a) => {
                let xv = std::mem::take(&mut self.nodes[a.0].data);
                self.acc(a, |ga| {
                    for j in 0..ga.len() {
                        let x = xv[j];
                        let u = GELU_C * (x + GELU_A * x * x * x);
                        let th = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        ga[j] += g[j] * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du);
                    }
                });
                self.nodes[a.0].data = xv;
            }
            &Op::Sqrt(a) => {
                let y = std::mem::take(&mut self.nodes[i].data);
                self.acc(a, |ga| {
                    for j in 0..ga.len() {
                        ga[j] += g[j] * 0.5 / y[j];
                    }
                });
                self.nodes[i].data = y;
            }
            &Op::Sum(a) => self.acc(a, |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            &Op::Mean(a) => self.acc(a, |ga| {
                let s = g[0] / ga.len() as f32;
                ga.iter_mut().for_each(|x| *x += s);
            }),
            &Op::Mse(a, b) => {
                let n = self.nodes[a.0].data.len() as f32;
                let diff: Vec<f32> = self.nodes[a.0]
                    .data
                    .iter()
                    .zip(&self.nodes[b.0].data)
                    .map(|(x, y)| 2.0 * (x - y) / n * g[0])
                    .collect();
                self.acc_slice(a, &diff);
                self.acc(b, |gb| gb.iter_mut().zip(&diff).for_each(|(x, d)| *x -= d));
            }
            &Op::Softmax(a) => {
                let y = std::mem::take(&mut self.nodes[i].data);
                let n = row_len(&self.nodes[i].shape);
                self.acc(a, |ga| {
                    for ((yr, gr), out) in y
                        .chunks_exact(n)
                        .zip(g.chunks_exact(n))
                        .zip(ga.chunks_exact_mut(n))
                    {
                        let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            out[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
                self.nodes[i].data = y;
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let d = self.nodes[gain.0].data.len();
                let xv = std::mem::take(&mut self.nodes[x.0].data);
                let gv = self.nodes[gain.0].data.clone();
                let mut dgain = vec![0.0f32; d];
                let mut dbias = vec![0.0f32; d];
                let mut dx = vec![0.0f32; xv.len()];
                let mut xhat = vec![0.0f32; d];
                let mut dxhat = vec![0.0f32; d];
                for (r, &(mean, rstd)) in stats.iter().enumerate() {
                    let xr = &xv[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let mut m1 = 0.0f32;
                    let mut m2 = 0.0f32;
                    for j in 0..d {
                        xhat[j] = (xr[j] - mean) * rstd;
                        dxhat[j] = gr[j] * gv[j];
                        dgain[j] += gr[j] * xhat[j];
                        dbias[j] += gr[j];
                        m1 += dxhat[j];
                        m2 += dxhat[j] * xhat[j];
                    }
                    m1 /= d as f32;
                    m2 /= d as f32;
                    for j in 0..d {
                        dx[r * d + j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                self.nodes[x.0].data = xv;
                self.acc_slice(x, &dx);
                self.acc_slice(gain, &dgain);
                self.acc_slice(bias, &dbias);
            }
            &Op::Transpose(a) => {
                let (r, c) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                self.acc(a, |ga| {
                    for p in 0..r {
                        for q in 0..c {
                            ga[p * c + q] += g[q * r + p];
                        }
                    }
                });
            }
            &Op::Reshape(a) => self.acc_slice(a, g),
            &Op::SliceRows { src, start } => {
                let row: usize = self.nodes[src.0].shape[1..].iter().product();
                self.acc(src, |gs| {
                    gs[start * row..start * row + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(a, b)| *a += b);
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p.0].data.len();
                    self.acc_slice(p, &g[off..off + n]);
                    off += n;
                }
            }
            &Op::SliceCols { src, start } => {
                let (r, c) = (self.nodes[src.0].shape[0], self.nodes[src.0].shape[1]);
                let len = self.nodes[i].shape[1];
                self.acc(src, |gs| {
                    for p in 0..r {
                        for q in 0..len {
                            gs[p * c + start + q] += g[p * len + q];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (r, width) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                let mut off = 0;
                for &p in parts {
                    let c = self.nodes[p.0].shape[1];
                    self.acc(p, |gp| {
                        for row in 0..r {
                            for q in 0..c {
                                gp[row * c + q] += g[row * width + off + q];
                            }
                        }
                    });
                    off += c;
                }
            }
            Op::Gather { table, ids } => {
                let table = *table;
                let d = self.nodes[table.0].shape[1];
                self.acc(table, |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[r * d + j];
                        }
                    }
                });
            }
        }
        self.nodes[i].op = op;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn naive_matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matmul_identity_and_projector() {
        let mut tape = Tape::new();
        let i2 = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let m = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let y = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(y), &[1., 2., 3., 4.]);

        let p = tape.constant(t(&[2, 2], &[1., 0., 0., 0.]));
        let m = tape.constant(t(&[2, 2], &[5., 6., 7., 8.]));
        let y = tape.matmul(p, m).unwrap();
        assert_eq!(tape.value(y), &[5., 6., 0., 0.]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_t(&mut rng, &[3, 4]);
        let b = rand_t(&mut rng, &[4, 2]);
        let want = naive_matmul(a.data(), b.data(), 3, 4, 2);
        let mut tape = Tape::new();
        let (va, vb) = (tape.leaf(&a), tape.leaf(&b));
        let y = tape.matmul(va, vb).unwrap();
        for (x, w) in tape.value(y).iter().zip(&want) {
            assert!((x - w).abs() < 1e-6);
        }
        // a · bᵀ path agrees too
        let bt = tape.transpose(vb).unwrap();
        let y2 = tape.matmul_t(va, bt).unwrap();
        for (x, w) in tape.value(y2).iter().zip(&want) {
            assert!((x - w).abs() < 1e-6);
        }
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[0., 0., 0.]));
        let y = tape.softmax(x);
        for v in tape.value(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        let x = tape.constant(t(&[3], &[1000., 0., 0.]));
        let y = tape.softmax(x);
        assert!((tape.value(y)[0] - 1.0).abs() < 1e-6);
        assert!(tape.value(y).iter().all(|v| v.is_finite()));

        let x = tape.constant(t(&[3], &[1., 2., 3.]));
        let y = tape.softmax(x);
        let z: f64 = (1..=3).map(|k| (k as f64).exp()).sum();
        for (k, v) in tape.value(y).iter().enumerate() {
            let want = ((k + 1) as f64).exp() / z;
            assert!((*v as f64 - want).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::full(&[4], 1.0));
        let b = tape.constant(Tensor::zeros(&[4]));
        let x = tape.constant(Tensor::full(&[4], 3.5));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 0.0));

        let g = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(t(&[2], &[1., -1.]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        assert!((tape.value(y)[0] - 1.0).abs() < 1e-6);
        assert!((tape.value(y)[1] + 1.0).abs() < 1e-6);

        // two-pass oracle
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let xs = rand_t(&mut rng, &[8]);
        let gs = rand_t(&mut rng, &[8]);
        let bs = rand_t(&mut rng, &[8]);
        let mean: f64 = xs.data().iter().map(|&v| v as f64).sum::<f64>() / 8.0;
        let var: f64 = xs
            .data()
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / 8.0;
        let (vx, vg, vb) = (tape.leaf(&xs), tape.leaf(&gs), tape.leaf(&bs));
        let y = tape.layer_norm(vx, vg, vb, 1e-5).unwrap();
        for j in 0..8 {
            let want = (xs.data()[j] as f64 - mean) / (var + 1e-5).sqrt() * gs.data()[j] as f64
                + bs.data()[j] as f64;
            assert!((tape.value(y)[j] as f64 - want).abs() < 1e-5);
        }
    }

    #[test]
    fn backward_linear_and_quadratic() {
        let x = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]).with_requires_grad(true);
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let s = tape.sum(v);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(v).unwrap(), &[1.0; 6]);

        let x = t(&[3], &[1., 2., 3.]).with_requires_grad(true);
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let sq = tape.mul(v, v).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(v).unwrap(), &[2., 4., 6.]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::zeros(&[2]).with_requires_grad(true);
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        assert!(tape.backward(v).is_err());
    }

    #[test]
    fn fan_out_accumulates_branch_gradients() {
        // f(x) = sum(x*w1) + sum(gelu(x)) with x used in both branches; compare
        // against two independent single-branch tapes.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_t(&mut rng, &[5]).with_requires_grad(true);
        let w = rand_t(&mut rng, &[5]);

        let branch = |use_a: bool, use_b: bool| {
            let mut tape = Tape::new();
            let vx = tape.leaf(&x);
            let vw = tape.constant(w.clone());
            let mut terms = Vec::new();
            if use_a {
                let m = tape.mul(vx, vw).unwrap();
                terms.push(tape.sum(m));
            }
            if use_b {
                let g = tape.gelu(vx);
                terms.push(tape.sum(g));
            }
            let loss = if terms.len() == 2 {
                tape.add(terms[0], terms[1]).unwrap()
            } else {
                terms[0]
            };
            tape.backward(loss).unwrap();
            tape.grad(vx).unwrap().to_vec()
        };
        let both = branch(true, true);
        let a = branch(true, false);
        let b = branch(false, true);
        for j in 0..5 {
            assert!((both[j] - (a[j] + b[j])).abs() < 1e-6);
        }
    }

    #[test]
    fn frozen_leaves_receive_no_gradient() {
        let w = Tensor::full(&[2, 2], 0.5);
        let x = Tensor::full(&[1, 2], 1.0).with_requires_grad(true);
        let mut tape = Tape::new();
        let (vw, vx) = (tape.leaf(&w), tape.leaf(&x));
        let y = tape.matmul(vx, vw).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert!(tape.grad(vw).is_none());
        assert_eq!(tape.grad(vx).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn sqrt_rejects_negative() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[1.0, -1.0]));
        assert!(tape.sqrt(x).is_err());
    }

    #[test]
    fn broadcast_rules() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let row = tape.constant(t(&[3], &[1., 2., 3.]));
        let y = tape.add(a, row).unwrap();
        assert_eq!(tape.value(y), &[1., 2., 3., 1., 2., 3.]);
        let s = tape.scalar(2.0);
        let y = tape.sub(a, s).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == -2.0));
        let bad = tape.constant(Tensor::zeros(&[2]));
        assert!(tape.add(a, bad).is_err());
    }

    type Build = fn(&mut Tape, Var, &[Tensor]) -> Var;

    /// Every differentiable op against central differences on random inputs.
    #[test]
    fn op_gradients_match_central_differences() {
        let cases: Vec<(&str, Vec<usize>, Vec<Vec<usize>>, Build)> = vec![
            ("matmul", vec![3, 4], vec![vec![4, 2]], |tp, x, c| {
                let w = tp.constant(c[0].clone());
                let y = tp.matmul(x, w).unwrap();
                let y2 = tp.mul(y, y).unwrap();
                tp.sum(y2)
            }),
            ("matmul_rhs", vec![4, 2], vec![vec![3, 4]], |tp, x, c| {
                let a = tp.constant(c[0].clone());
                let y = tp.matmul(a, x).unwrap();
                let y = tp.gelu(y);
                tp.sum(y)
            }),
            ("matmul_t", vec![5, 4], vec![vec![3, 4]], |tp, x, c| {
                let a = tp.constant(c[0].clone());
                let y = tp.matmul_t(a, x).unwrap();
                let y2 = tp.mul(y, y).unwrap();
                tp.mean(y2)
            }),
            ("add_broadcast", vec![4], vec![vec![3, 4]], |tp, x, c| {
                let a = tp.constant(c[0].clone());
                let y = tp.add(a, x).unwrap();
                let y2 = tp.mul(y, y).unwrap();
                tp.sum(y2)
            }),
            ("sub_mul", vec![3, 4], vec![vec![3, 4]], |tp, x, c| {
                let a = tp.constant(c[0].clone());
                let d = tp.sub(a, x).unwrap();
                let m = tp.mul(d, x).unwrap();
                tp.sum(m)
            }),
            ("scale_gelu", vec![6], vec![], |tp, x, _| {
                let s = tp.scale(x, 1.7);
                let g = tp.gelu(s);
                tp.sum(g)
            }),
            ("sqrt", vec![5], vec![], |tp, x, _| {
                let sq = tp.mul(x, x).unwrap();
                let one = tp.scalar(0.5);
                let p = tp.add(sq, one).unwrap();
                let r = tp.sqrt(p).unwrap();
                tp.sum(r)
            }),
            ("mse", vec![2, 3], vec![vec![2, 3]], |tp, x, c| {
                let target = tp.constant(c[0].clone());
                tp.mse(x, target).unwrap()
            }),
            ("softmax", vec![3, 5], vec![vec![3, 5]], |tp, x, c| {
                let w = tp.constant(c[0].clone());
                let p = tp.softmax(x);
                let m = tp.mul(p, w).unwrap();
                tp.sum(m)
            }),
            ("layer_norm", vec![3, 8], vec![vec![8], vec![8], vec![3, 8]], |tp, x, c| {
                let g = tp.constant(c[0].clone());
                let b = tp.constant(c[1].clone());
                let w = tp.constant(c[2].clone());
                let y = tp.layer_norm(x, g, b, 1e-5).unwrap();
                let m = tp.mul(y, w).unwrap();
                tp.sum(m)
            }),
            ("layer_norm_gain", vec![8], vec![vec![3, 8], vec![8], vec![3, 8]], |tp, x, c| {
                let xx = tp.constant(c[0].clone());
                let b = tp.constant(c[1].clone());
                let w = tp.constant(c[2].clone());
                let y = tp.layer_norm(xx, x, b, 1e-5).unwrap();
                let m = tp.mul(y, w).unwrap();
                tp.sum(m)
            }),
            ("structural", vec![4, 6], vec![vec![6, 4]], |tp, x, c| {
                let w = tp.constant(c[0].clone());
                let tr = tp.transpose(x).unwrap();
                let a = tp.slice_rows(tr, 1, 3).unwrap();
                let b = tp.slice_cols(x, 2, 3).unwrap();
                let bt = tp.transpose(b).unwrap();
                let cat = tp.concat_rows(&[a, bt]).unwrap();
                let cc = tp.concat_cols(&[cat, cat]).unwrap();
                let r = tp.reshape(cc, &[6, 8]).unwrap();
                let r = tp.slice_cols(r, 0, 4).unwrap();
                let m = tp.mul(r, w).unwrap();
                let m2 = tp.mul(m, m).unwrap();
                tp.sum(m2)
            }),
            ("gather", vec![5, 3], vec![vec![4, 3]], |tp, x, c| {
                let w = tp.constant(c[0].clone());
                let rows = tp.gather_rows(x, &[4, 0, 4, 2]).unwrap();
                let m = tp.mul(rows, w).unwrap();
                let m2 = tp.mul(m, rows).unwrap();
                tp.sum(m2)
            }),
        ];
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            for (name, xs, cs, f) in &cases {
                let x = rand_t(&mut rng, xs);
                let consts: Vec<Tensor> = cs.iter().map(|s| rand_t(&mut rng, s)).collect();
                let report =
                    finite_diff_check(|tp, v| Ok(f(tp, v, &consts)), &x, 1e-3, 1e-3).unwrap();
                assert!(
                    report.passed,
                    "{name} seed {seed}: rel err {}",
                    report.max_rel_error
                );
            }
        }
    }

    #[test]
    fn deterministic_replay() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand_t(&mut rng, &[6, 7]).with_requires_grad(true);
        let b = rand_t(&mut rng, &[7, 3]);
        let run = || {
            let mut tape = Tape::new();
            let (va, vb) = (tape.leaf(&a), tape.leaf(&b));
            let y = tape.matmul(va, vb).unwrap();
            let p = tape.softmax(y);
            let s = tape.mean(p);
            tape.backward(s).unwrap();
            (tape.value(p).to_vec(), tape.grad(va).unwrap().to_vec())
        };
        assert_eq!(run(), run());
    }
}
