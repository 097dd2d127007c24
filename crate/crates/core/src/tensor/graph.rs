use matrixmultiply::dgemm;

use super::{Gradients, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::policy::ssm::{self, ScanInputs};

/// Handle to a node recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(usize),
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Matrix plus a broadcast `1 x cols` row.
    AddRow(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Softplus(Var),
    Tanh(Var),
    Exp(Var),
    SoftmaxRows(Var),
    /// Softmax over all entries; masked entries are exactly zero.
    MaskedSoftmax(Var),
    /// Log-softmax over all entries.
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    CausalConv {
        x: Var,
        w: Var,
        b: Var,
    },
    Scan {
        u: Var,
        delta: Var,
        a_log: Var,
        b: Var,
        c: Var,
        d: Var,
    },
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    /// Tile a single row `rows` times.
    RepeatRow(Var),
    MaskedMeanRows(Var, Vec<bool>),
    Sum(Var),
    Mean(Var),
    Minimum(Var, Var),
    Clamp(Var, f64, f64),
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
}

/// Eagerly evaluated computation tape over a borrowed [`ParamStore`].
#[derive(Debug)]
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

/// `c (+)= a * b` for row-major/strided operands.
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
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slices are sized for the given dimensions and strides; the
    // output does not alias either input.
    unsafe {
        dgemm(
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

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn softmax_in_place(xs: &mut [f64], mask: Option<&[bool]>) {
    let on = |i: usize| mask.is_none_or(|m| m[i]);
    let max = xs
        .iter()
        .enumerate()
        .filter(|&(i, _)| on(i))
        .map(|(_, &x)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (i, x) in xs.iter_mut().enumerate() {
        if on(i) {
            *x = (*x - max).exp();
            sum += *x;
        } else {
            *x = 0.0;
        }
    }
    xs.iter_mut().for_each(|x| *x /= sum);
}

/// Stable softmax over `logits`; entries with `mask[i] == false` get exactly 0.
pub fn masked_softmax(logits: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    if logits.len() != mask.len() {
        return Err(Error::Shape(format!(
            "{} logits but {} mask entries",
            logits.len(),
            mask.len()
        )));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::Contract("softmax over an all-masked input".into()));
    }
    let mut out = logits.to_vec();
    softmax_in_place(&mut out, Some(mask));
    Ok(out)
}

const LN_EPS: f64 = 1e-5;

fn grad_buf(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> Var {
        debug_assert!(matches!(op, Op::Param(_)) || rows * cols == value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match self.nodes[v.0].op {
            Op::Param(i) => self.params.tensors[i].data(),
            _ => &self.nodes[v.0].value,
        }
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn input(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        if rows * cols != data.len() {
            return Err(Error::Shape(format!(
                "input {rows}x{cols} given {} values",
                data.len()
            )));
        }
        Ok(self.push(rows, cols, data, Op::Input))
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let (rows, cols) = self.params.get(id).dims2();
        self.push(rows, cols, Vec::new(), Op::Param(id.0))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(usize, usize)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(sa)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (k2, n)) = (self.shape(a), self.shape(b));
        if k != k2 {
            return Err(Error::Shape(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a),
            (k as isize, 1),
            self.value(b),
            (n as isize, 1),
            &mut out,
            false,
        );
        Ok(self.push(m, n, out, Op::MatMul(a, b)))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (n, k2)) = (self.shape(a), self.shape(b));
        if k != k2 {
            return Err(Error::Shape(format!("matmul_nt {m}x{k} by ({n}x{k2})^T")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a),
            (k as isize, 1),
            self.value(b),
            (1, k as isize),
            &mut out,
            false,
        );
        Ok(self.push(m, n, out, Op::MatMulNT(a, b)))
    }

    fn zip(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (r, c) = self.same_shape(a, b, what)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(self.push(r, c, out, op))
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

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "minimum", f64::min, Op::Minimum(a, b))
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let ((r, c), (rr, rc)) = (self.shape(x), self.shape(row));
        if rr != 1 || rc != c {
            return Err(Error::Shape(format!("add_row {r}x{c} + {rr}x{rc}")));
        }
        let bias = self.value(row);
        let mut out = self.value(x).to_vec();
        for chunk in out.chunks_mut(c.max(1)) {
            chunk.iter_mut().zip(bias).for_each(|(o, b)| *o += b);
        }
        Ok(self.push(r, c, out, Op::AddRow(x, row)))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (r, c) = self.shape(x);
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        self.push(r, c, out, op)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.map(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.map(x, |v| v * sigmoid(v), Op::Silu(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.map(x, softplus, Op::Softplus(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, f64::tanh, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, f64::exp, Op::Exp(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.map(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(c.max(1)) {
            softmax_in_place(row, None);
        }
        self.push(r, c, out, Op::SoftmaxRows(x))
    }

    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (r, c) = self.shape(x);
        let out = masked_softmax(self.value(x), mask)?;
        Ok(self.push(r, c, out, Op::MaskedSoftmax(x)))
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let xs = self.value(x);
        let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + xs.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let out = xs.iter().map(|v| v - lse).collect();
        self.push(r, c, out, Op::LogSoftmax(x))
    }

    /// Row-wise layer normalisation with affine `gain`/`bias` rows.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(gain) != (1, c) || self.shape(bias) != (1, c) {
            return Err(Error::Shape(format!("layer_norm over {c} columns")));
        }
        let xs = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        Ok(self.push(
            r,
            c,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Depthwise causal convolution: `y[t,d] = b[d] + sum_w x[t-w,d] * w[d,w]`.
    pub fn causal_conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let ((l, d), (wd, win), bs) = (self.shape(x), self.shape(w), self.shape(b));
        if wd != d || win == 0 || bs != (1, d) {
            return Err(Error::Shape(format!(
                "causal_conv1d x {l}x{d}, weight {wd}x{win}, bias {bs:?}"
            )));
        }
        let (xs, ws, bv) = (self.value(x), self.value(w), self.value(b));
        let mut out = vec![0.0; l * d];
        for t in 0..l {
            let row = &mut out[t * d..(t + 1) * d];
            row.copy_from_slice(bv);
            for k in 0..win.min(t + 1) {
                let src = &xs[(t - k) * d..(t - k + 1) * d];
                for ch in 0..d {
                    row[ch] += src[ch] * ws[ch * win + k];
                }
            }
        }
        Ok(self.push(l, d, out, Op::CausalConv { x, w, b }))
    }

    /// Selective scan with input-dependent step `delta` (`L x D`), input
    /// matrices `b`, `c` (`L x N`), state matrix `A = -exp(a_log)` (`D x N`)
    /// and skip `d` (`1 x D`).
    pub fn selective_scan(
        &mut self,
        u: Var,
        delta: Var,
        a_log: Var,
        b: Var,
        c: Var,
        d: Var,
    ) -> Result<Var> {
        let (l, dm) = self.shape(u);
        let (_, n) = self.shape(a_log);
        let ok = self.shape(delta) == (l, dm)
            && self.shape(a_log) == (dm, n)
            && self.shape(b) == (l, n)
            && self.shape(c) == (l, n)
            && self.shape(d) == (1, dm);
        if !ok {
            return Err(Error::Shape(format!(
                "selective_scan u {l}x{dm}: delta {:?} a_log {:?} b {:?} c {:?} d {:?}",
                self.shape(delta),
                self.shape(a_log),
                self.shape(b),
                self.shape(c),
                self.shape(d)
            )));
        }
        let a: Vec<f64> = self.value(a_log).iter().map(|v| -v.exp()).collect();
        let out = ssm::selective_scan(&ScanInputs {
            len: l,
            channels: dm,
            state: n,
            u: self.value(u),
            delta: self.value(delta),
            a: &a,
            b: self.value(b),
            c: self.value(c),
            skip: self.value(d),
        });
        Ok(self.push(
            l,
            dm,
            out,
            Op::Scan {
                u,
                delta,
                a_log,
                b,
                c,
                d,
            },
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if start + width > c {
            return Err(Error::Shape(format!("slice {start}..{} of {c} columns", start + width)));
        }
        let xs = self.value(x);
        let out = (0..r)
            .flat_map(|i| xs[i * c + start..i * c + start + width].iter().copied())
            .collect();
        Ok(self.push(r, width, out, Op::SliceCols(x, start)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts.first().map(|&p| self.shape(p).0).unwrap_or(0);
        if parts.iter().any(|&p| self.shape(p).0 != r) {
            return Err(Error::Shape("concat_cols with differing row counts".into()));
        }
        let c: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for &p in parts {
                let pc = self.shape(p).1;
                out.extend_from_slice(&self.value(p)[i * pc..(i + 1) * pc]);
            }
        }
        Ok(self.push(r, c, out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::Shape(format!("row {bad} of {r}")));
        }
        let xs = self.value(x);
        let out = idx
            .iter()
            .flat_map(|&i| xs[i * c..(i + 1) * c].iter().copied())
            .collect();
        Ok(self.push(idx.len(), c, out, Op::GatherRows(x, idx.to_vec())))
    }

    pub fn repeat_row(&mut self, x: Var, rows: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if r != 1 {
            return Err(Error::Shape(format!("repeat_row of {r} rows")));
        }
        let out = self.value(x).repeat(rows);
        Ok(self.push(rows, c, out, Op::RepeatRow(x)))
    }

    /// Mean over the rows with `mask[i] == true`, as a `1 x cols` row.
    pub fn masked_mean_rows(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (r, c) = self.shape(x);
        if mask.len() != r {
            return Err(Error::Shape(format!("mask of {} for {r} rows", mask.len())));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Contract("pooling over zero active rows".into()));
        }
        let xs = self.value(x);
        let mut out = vec![0.0; c];
        for i in (0..r).filter(|&i| mask[i]) {
            out.iter_mut()
                .zip(&xs[i * c..(i + 1) * c])
                .for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= count as f64);
        Ok(self.push(1, c, out, Op::MaskedMeanRows(x, mask.to_vec())))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(1, 1, vec![s], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len().max(1) as f64;
        self.push(1, 1, vec![s], Op::Mean(x))
    }

    /// Reverse-mode sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Shape(format!(
                "backward needs a scalar, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut out: Vec<Option<Vec<f64>>> = vec![None; self.params.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let (rows, cols) = (node.rows, node.cols);
            let y = &node.value;
            let len = |v: Var| self.nodes[v.0].rows * self.nodes[v.0].cols;
            match &node.op {
                Op::Input => {}
                Op::Param(p) => match &mut out[*p] {
                    Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, x)| *b += x),
                    slot => *slot = Some(g),
                },
                Op::MatMul(a, b) => {
                    let (m, k) = self.shape(*a);
                    let n = cols;
                    // dA = G B^T ; dB = A^T G
                    let bv = self.value(*b);
                    let ga = grad_buf(&mut grads, *a, m * k);
                    gemm(m, n, k, &g, (n as isize, 1), bv, (1, n as isize), ga, true);
                    let av = self.value(*a);
                    let gb = grad_buf(&mut grads, *b, k * n);
                    gemm(k, m, n, av, (1, k as isize), &g, (n as isize, 1), gb, true);
                }
                Op::MatMulNT(a, b) => {
                    let (m, k) = self.shape(*a);
                    let n = cols;
                    // C = A B^T ; dA = G B ; dB = G^T A
                    let bv = self.value(*b);
                    let ga = grad_buf(&mut grads, *a, m * k);
                    gemm(m, n, k, &g, (n as isize, 1), bv, (k as isize, 1), ga, true);
                    let av = self.value(*a);
                    let gb = grad_buf(&mut grads, *b, n * k);
                    gemm(n, m, k, &g, (1, n as isize), av, (k as isize, 1), gb, true);
                }
                Op::Add(a, b) => {
                    add_into(grad_buf(&mut grads, *a, g.len()), &g, 1.0);
                    add_into(grad_buf(&mut grads, *b, g.len()), &g, 1.0);
                }
                Op::Sub(a, b) => {
                    add_into(grad_buf(&mut grads, *a, g.len()), &g, 1.0);
                    add_into(grad_buf(&mut grads, *b, g.len()), &g, -1.0);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = grad_buf(&mut grads, *a, g.len());
                    ga.iter_mut()
                        .zip(g.iter().zip(bv))
                        .for_each(|(o, (gi, bi))| *o += gi * bi);
                    let gb = grad_buf(&mut grads, *b, g.len());
                    gb.iter_mut()
                        .zip(g.iter().zip(av))
                        .for_each(|(o, (gi, ai))| *o += gi * ai);
                }
                Op::Minimum(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let take_a: Vec<bool> = av.iter().zip(bv).map(|(x, y)| x <= y).collect();
                    let ga = grad_buf(&mut grads, *a, g.len());
                    for i in 0..g.len() {
                        if take_a[i] {
                            ga[i] += g[i];
                        }
                    }
                    let gb = grad_buf(&mut grads, *b, g.len());
                    for i in 0..g.len() {
                        if !take_a[i] {
                            gb[i] += g[i];
                        }
                    }
                }
                Op::AddRow(x, r) => {
                    add_into(grad_buf(&mut grads, *x, g.len()), &g, 1.0);
                    let gr = grad_buf(&mut grads, *r, cols);
                    for row in g.chunks(cols.max(1)) {
                        add_into(gr, row, 1.0);
                    }
                }
                Op::Scale(x, s) => add_into(grad_buf(&mut grads, *x, g.len()), &g, *s),
                Op::Silu(x) => {
                    let xv = self.value(*x);
                    let gx = grad_buf(&mut grads, *x, g.len());
                    for i in 0..g.len() {
                        let s = sigmoid(xv[i]);
                        gx[i] += g[i] * s * (1.0 + xv[i] * (1.0 - s));
                    }
                }
                Op::Softplus(x) => {
                    let xv = self.value(*x);
                    let gx = grad_buf(&mut grads, *x, g.len());
                    for i in 0..g.len() {
                        gx[i] += g[i] * sigmoid(xv[i]);
                    }
                }
                Op::Tanh(x) => {
                    let gx = grad_buf(&mut grads, *x, g.len());
                    for i in 0..g.len() {
                        gx[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                }
                Op::Exp(x) => {
                    let gx = grad_buf(&mut grads, *x, g.len());
                    for i in 0..g.len() {
                        gx[i] += g[i] * y[i];
                    }
                }
                Op::Clamp(x, lo, hi) => {
                    let xv = self.value(*x);
                    let gx = grad_buf(&mut grads, *x, g.len());
                    for i in 0..g.len() {
                        if xv[i] >= *lo && xv[i] <= *hi {
                            gx[i] += g[i];
                        }
                    }
                }
                Op::SoftmaxRows(x) => {
                    let gx = grad_buf(&mut grads, *x, g.len());
                    for i in 0..rows {
                        let (yr, gr) = (&y[i * cols..(i + 1) * cols], &g[i * cols..(i + 1) * cols]);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            gx[i * cols + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
                Op::MaskedSoftmax(x) => {
                    let dot: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
                    let gx = grad_buf(&mut grads, *x, g.len());
                    for i in 0..g.len() {
                        gx[i] += y[i] * (g[i] - dot);
                    }
                }
                Op::LogSoftmax(x) => {
                    let total: f64 = g.iter().sum();
                    let gx = grad_buf(&mut grads, *x, g.len());
                    for i in 0..g.len() {
                        gx[i] += g[i] - y[i].exp() * total;
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let gv = self.value(*gain);
                    let c = cols;
                    let mut dgain = vec![0.0; c];
                    let mut dbias = vec![0.0; c];
                    let mut dx = vec![0.0; rows * c];
                    let mut dh = vec![0.0; c];
                    for i in 0..rows {
                        let gr = &g[i * c..(i + 1) * c];
                        let hr = &xhat[i * c..(i + 1) * c];
                        for j in 0..c {
                            dgain[j] += gr[j] * hr[j];
                            dbias[j] += gr[j];
                            dh[j] = gr[j] * gv[j];
                        }
                        let m1 = dh.iter().sum::<f64>() / c as f64;
                        let m2 = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            dx[i * c + j] = rstd[i] * (dh[j] - m1 - hr[j] * m2);
                        }
                    }
                    add_into(grad_buf(&mut grads, *x, rows * c), &dx, 1.0);
                    add_into(grad_buf(&mut grads, *gain, c), &dgain, 1.0);
                    add_into(grad_buf(&mut grads, *bias, c), &dbias, 1.0);
                }
                Op::CausalConv { x, w, b } => {
                    let (l, d) = (rows, cols);
                    let win = self.shape(*w).1;
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let mut dx = vec![0.0; l * d];
                    let mut dw = vec![0.0; d * win];
                    let mut db = vec![0.0; d];
                    for t in 0..l {
                        let gr = &g[t * d..(t + 1) * d];
                        add_into(&mut db, gr, 1.0);
                        for k in 0..win.min(t + 1) {
                            let src = (t - k) * d;
                            for ch in 0..d {
                                dx[src + ch] += gr[ch] * wv[ch * win + k];
                                dw[ch * win + k] += gr[ch] * xv[src + ch];
                            }
                        }
                    }
                    add_into(grad_buf(&mut grads, *x, l * d), &dx, 1.0);
                    add_into(grad_buf(&mut grads, *w, d * win), &dw, 1.0);
                    add_into(grad_buf(&mut grads, *b, d), &db, 1.0);
                }
                Op::Scan {
                    u,
                    delta,
                    a_log,
                    b,
                    c,
                    d,
                } => {
                    let (l, dm) = (rows, cols);
                    let n = self.shape(*a_log).1;
                    let a_log_v = self.value(*a_log);
                    let a: Vec<f64> = a_log_v.iter().map(|v| -v.exp()).collect();
                    let sg = ssm::selective_scan_backward(
                        &ScanInputs {
                            len: l,
                            channels: dm,
                            state: n,
                            u: self.value(*u),
                            delta: self.value(*delta),
                            a: &a,
                            b: self.value(*b),
                            c: self.value(*c),
                            skip: self.value(*d),
                        },
                        &g,
                    );
                    // dA/dA_log = A
                    let da_log: Vec<f64> = sg.a.iter().zip(&a).map(|(ga, av)| ga * av).collect();
                    add_into(grad_buf(&mut grads, *u, l * dm), &sg.u, 1.0);
                    add_into(grad_buf(&mut grads, *delta, l * dm), &sg.delta, 1.0);
                    add_into(grad_buf(&mut grads, *a_log, dm * n), &da_log, 1.0);
                    add_into(grad_buf(&mut grads, *b, l * n), &sg.b, 1.0);
                    add_into(grad_buf(&mut grads, *c, l * n), &sg.c, 1.0);
                    add_into(grad_buf(&mut grads, *d, dm), &sg.skip, 1.0);
                }
                Op::SliceCols(x, start) => {
                    let xc = self.shape(*x).1;
                    let gx = grad_buf(&mut grads, *x, rows * xc);
                    for i in 0..rows {
                        add_into(
                            &mut gx[i * xc + start..i * xc + start + cols],
                            &g[i * cols..(i + 1) * cols],
                            1.0,
                        );
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let pc = self.shape(p).1;
                        let gp = grad_buf(&mut grads, p, rows * pc);
                        for i in 0..rows {
                            add_into(
                                &mut gp[i * pc..(i + 1) * pc],
                                &g[i * cols + off..i * cols + off + pc],
                                1.0,
                            );
                        }
                        off += pc;
                    }
                }
                Op::GatherRows(x, idx) => {
                    let gx = grad_buf(&mut grads, *x, len(*x));
                    for (r, &src) in idx.iter().enumerate() {
                        add_into(
                            &mut gx[src * cols..(src + 1) * cols],
                            &g[r * cols..(r + 1) * cols],
                            1.0,
                        );
                    }
                }
                Op::RepeatRow(x) => {
                    let gx = grad_buf(&mut grads, *x, cols);
                    for row in g.chunks(cols.max(1)) {
                        add_into(gx, row, 1.0);
                    }
                }
                Op::MaskedMeanRows(x, mask) => {
                    let count = mask.iter().filter(|&&m| m).count() as f64;
                    let gx = grad_buf(&mut grads, *x, len(*x));
                    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                        add_into(&mut gx[i * cols..(i + 1) * cols], &g, 1.0 / count);
                    }
                }
                Op::Sum(x) => {
                    let gx = grad_buf(&mut grads, *x, len(*x));
                    gx.iter_mut().for_each(|v| *v += g[0]);
                }
                Op::Mean(x) => {
                    let n = len(*x);
                    let gx = grad_buf(&mut grads, *x, n);
                    gx.iter_mut().for_each(|v| *v += g[0] / n as f64);
                }
            }
        }
        Ok(Gradients(out))
    }
}

fn add_into(dst: &mut [f64], src: &[f64], s: f64) {
    dst.iter_mut().zip(src).for_each(|(d, x)| *d += s * x);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store_with(vals: &[(&str, Vec<usize>, Vec<f64>)]) -> ParamStore {
        let mut s = ParamStore::new();
        for (n, sh, v) in vals {
            s.add(*n, Tensor::new(sh.clone(), v.clone()).unwrap()).unwrap();
        }
        s
    }

    #[test]
    fn conv_identity_and_hand_case() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let x = g.input(3, 1, vec![1.0, 0.0, 0.0]).unwrap();
        let w = g.input(1, 2, vec![0.5, 0.5]).unwrap();
        let b = g.input(1, 1, vec![0.0]).unwrap();
        let y = g.causal_conv1d(x, w, b).unwrap();
        assert_eq!(g.value(y), &[0.5, 0.5, 0.0]);

        let x = g.input(4, 2, vec![1., 2., 3., 4., 5., 6., 7., 8.]).unwrap();
        let w = g.input(2, 1, vec![1.0, 1.0]).unwrap();
        let b = g.input(1, 2, vec![0.0, 0.0]).unwrap();
        let y = g.causal_conv1d(x, w, b).unwrap();
        assert_eq!(g.value(y), g.value(x));

        let bad = g.input(3, 1, vec![0.0; 3]).unwrap();
        assert!(g.causal_conv1d(x, bad, b).is_err());
    }

    #[test]
    fn conv_is_causal() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let w = g.input(2, 3, vec![0.3, -0.2, 0.7, 1.1, 0.4, -0.5]).unwrap();
        let b = g.input(1, 2, vec![0.1, -0.1]).unwrap();
        let base: Vec<f64> = (0..10).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut pert = base.clone();
        pert[8] += 3.0;
        pert[9] -= 1.0;
        let x1 = g.input(5, 2, base).unwrap();
        let x2 = g.input(5, 2, pert).unwrap();
        let y1 = g.causal_conv1d(x1, w, b).unwrap();
        let y2 = g.causal_conv1d(x2, w, b).unwrap();
        assert_eq!(&g.value(y1)[..8], &g.value(y2)[..8]);
        assert_ne!(&g.value(y1)[8..], &g.value(y2)[8..]);
    }

    #[test]
    fn masked_softmax_cases() {
        assert_eq!(masked_softmax(&[0.0, 0.0], &[true, true]).unwrap(), vec![0.5, 0.5]);
        let p = masked_softmax(&[2f64.ln(), 0.0], &[true, true]).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15 && (p[1] - 1.0 / 3.0).abs() < 1e-15);
        let p = masked_softmax(&[5.0, -1000.0, 3.0], &[true, false, true]).unwrap();
        let e = (-2f64).exp();
        assert_eq!(p[1], 0.0);
        assert!((p[0] - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((p[2] - e / (1.0 + e)).abs() < 1e-15);
        assert!(masked_softmax(&[1.0, 2.0], &[false, false]).is_err());
        assert!(masked_softmax(&[1.0], &[true, true]).is_err());
        // large logits stay finite
        let p = masked_softmax(&[1e4, 1e4 - 1.0], &[true, true]).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn layer_norm_cases() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let gain = g.input(1, 2, vec![1.0, 1.0]).unwrap();
        let bias = g.input(1, 2, vec![0.25, -0.5]).unwrap();
        let x = g.input(1, 2, vec![3.0, 3.0]).unwrap();
        let y = g.layer_norm(x, gain, bias).unwrap();
        assert_eq!(g.value(y), &[0.25, -0.5]);
        let zero = g.input(1, 2, vec![0.0, 0.0]).unwrap();
        let x = g.input(1, 2, vec![1.0, -1.0]).unwrap();
        let y = g.layer_norm(x, gain, zero).unwrap();
        let expect = 1.0 / (1.0 + 1e-5f64).sqrt();
        assert!((g.value(y)[0] - expect).abs() < 1e-12);
        assert!((g.value(y)[1] + expect).abs() < 1e-12);
    }

    #[test]
    fn quadratic_gradient() {
        let s = store_with(&[("w", vec![3], vec![1.0, -2.0, 0.5])]);
        let mut g = Graph::new(&s);
        let w = g.param(s.id("w").unwrap());
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(s.id("w").unwrap()).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn cross_entropy_gradient_is_p_minus_onehot() {
        let s = store_with(&[("z", vec![1, 2], vec![0.3, -0.4])]);
        let mut g = Graph::new(&s);
        let z = g.param(s.id("z").unwrap());
        let lp = g.log_softmax(z);
        let pick = g.slice_cols(lp, 0, 1).unwrap();
        let loss = g.scale(pick, -1.0);
        let grads = g.backward(loss).unwrap();
        let p = masked_softmax(&[0.3, -0.4], &[true, true]).unwrap();
        let gz = grads.get(s.id("z").unwrap()).unwrap();
        assert!((gz[0] - (p[0] - 1.0)).abs() < 1e-14);
        assert!((gz[1] - p[1]).abs() < 1e-14);
    }

    #[test]
    fn backward_requires_scalar() {
        let s = store_with(&[("w", vec![2], vec![1.0, 2.0])]);
        let mut g = Graph::new(&s);
        let w = g.param(s.id("w").unwrap());
        assert!(matches!(g.backward(w), Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_shapes_checked() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let a = g.input(2, 3, vec![0.0; 6]).unwrap();
        let b = g.input(2, 3, vec![0.0; 6]).unwrap();
        assert!(g.matmul(a, b).is_err());
        let c = g.matmul_nt(a, b).unwrap();
        assert_eq!(g.shape(c), (2, 2));
    }
}
