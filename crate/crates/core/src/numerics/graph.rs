use std::sync::Arc;

use super::{Mask, ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    Sqrt(Var),
    Log(Var),
    Exp(Var),
    Abs(Var),
    Gelu(Var),
    ClampMin(Var, F),
    Softmax(Var),
    LogSoftmax {
        a: Var,
        active: Option<Arc<Vec<bool>>>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    GatherRows {
        a: Var,
        idx: Vec<Option<usize>>,
    },
    IndexSelect {
        a: Var,
        idx: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Var, Var),
    SliceCols {
        a: Var,
        start: usize,
    },
    SplitHeads {
        a: Var,
        heads: usize,
    },
    MergeHeads(Var),
    Rope {
        a: Var,
        positions: Vec<usize>,
        base: f64,
    },
    SumAll(Var),
    MeanAll(Var),
    SumLast(Var),
    Pick {
        a: Var,
        idx: Vec<usize>,
    },
    ScalarWithGrad {
        a: Var,
        dvalue: Vec<F>,
    },
    Reshape(Var),
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Computation tape for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and [`Graph::backward`] walks it once in reverse.
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    params: Vec<(Var, ParamId)>,
}

/// Gradients of a scalar loss with respect to every node that required one.
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(Var, ParamId)>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<Tensor<F>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// Gradient for each parameter bound on the graph, zero-filled for
    /// parameters the loss does not depend on. Repeated bindings are summed.
    pub fn param_grads(&self, store: &ParamStore<F>) -> Vec<Vec<F>> {
        let mut out: Vec<Vec<F>> = store.iter().map(|p| vec![F::zero(); p.value.numel()]).collect();
        for &(var, pid) in &self.params {
            if let Some(g) = &self.grads[var.0] {
                for (o, &x) in out[pid.0].iter_mut().zip(g) {
                    *o += x;
                }
            }
        }
        out
    }
}

fn check(cond: bool, op: &'static str, detail: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::shape(op, detail()))
    }
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn data(&self, v: Var) -> &[F] {
        self.nodes[v.0].value.data()
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that receives a gradient on [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a trainable parameter. `trainable = false` freezes it for this graph.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        let p = store.get(id);
        let needs = p.trainable;
        let v = self.push(p.value.clone(), Op::Leaf, needs);
        if needs {
            self.params.push((v, id));
        }
        v
    }

    // ---------------------------------------------------------------- linear algebra

    /// Matrix product over the last two axes, with optional transposition of
    /// either operand. A rank-2 right operand is shared across any leading
    /// extents of the left operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        check(sa.len() >= 2 && sb.len() >= 2, "matmul", || {
            format!("operands must be at least rank 2, got {sa:?} and {sb:?}")
        })?;
        let (ar, ac) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (br, bc) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        check(k == k2, "matmul", || {
            format!("inner extents differ: {sa:?} x {sb:?} (ta={ta}, tb={tb})")
        })?;
        let out = if sb.len() == 2 && !ta {
            // Leading-batch expansion: flatten the left operand's rows.
            let rows: usize = sa[..sa.len() - 1].iter().product();
            let mut c = vec![F::zero(); rows * n];
            let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
            F::gemm(
                rows,
                k,
                n,
                self.data(a),
                k as isize,
                1,
                self.data(b),
                rsb,
                csb,
                F::zero(),
                &mut c,
            );
            let mut shape = sa[..sa.len() - 1].to_vec();
            shape.push(n);
            Tensor::new(shape, c)?
        } else {
            check(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0], "matmul", || {
                format!("batched operands must share a leading extent, got {sa:?} and {sb:?}")
            })?;
            let h = sa[0];
            let mut c = vec![F::zero(); h * m * n];
            let (rsa, csa) = if ta { (1, ac as isize) } else { (ac as isize, 1) };
            let (rsb, csb) = if tb { (1, bc as isize) } else { (bc as isize, 1) };
            for i in 0..h {
                F::gemm(
                    m,
                    k,
                    n,
                    &self.data(a)[i * ar * ac..(i + 1) * ar * ac],
                    rsa,
                    csa,
                    &self.data(b)[i * br * bc..(i + 1) * br * bc],
                    rsb,
                    csb,
                    F::zero(),
                    &mut c[i * m * n..(i + 1) * m * n],
                );
            }
            Tensor::new(vec![h, m, n], c)?
        };
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul { a, b, ta, tb }, ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    // ---------------------------------------------------------------- elementwise

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        check(sa == sb, op, || format!("{sa:?} vs {sb:?}"))
    }

    fn zip(&mut self, op: Op<F>, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Var {
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).expect("shape checked");
        let ng = self.ng(a) || self.ng(b);
        self.push(value, op, ng)
    }

    fn unary(&mut self, op: Op<F>, a: Var, f: impl Fn(F) -> F) -> Var {
        let value = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(value, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(Op::Add(a, b), a, b, |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(Op::Sub(a, b), a, b, |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(Op::Mul(a, b), a, b, |x, y| x * y))
    }

    /// Adds a vector to every row (last axis) of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let n = self.value(a).cols();
        let sr = self.shape(row);
        check(
            sr.len() == 1 && sr[0] == n || self.value(row).numel() == n,
            "add_row",
            || format!("row {sr:?} does not match last extent {n}"),
        )?;
        let r = self.data(row).to_vec();
        let data = self
            .data(a)
            .chunks(n.max(1))
            .flat_map(|chunk| chunk.iter().zip(&r).map(|(&x, &y)| x + y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(value, Op::AddRow(a, row), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = F::of(c);
        self.unary(Op::Scale(a, c), a, |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = F::of(c);
        self.unary(Op::AddScalar(a), a, |x| x + c)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(Op::Sqrt(a), a, F::sqrt)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(Op::Log(a), a, F::ln)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Op::Exp(a), a, F::exp)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(Op::Abs(a), a, F::abs)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(Op::Gelu(a), a, gelu)
    }

    /// `max(x, floor)`; no gradient flows where `x <= floor`.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let c = F::of(floor);
        self.unary(Op::ClampMin(a, c), a, |x| if x > c { x } else { c })
    }

    // ---------------------------------------------------------------- normalization

    /// Softmax over the last axis. With a mask of shape `[rows, cols]`
    /// (matching the last two axes), excluded positions are left out of the
    /// normalization set and receive exactly zero weight.
    pub fn softmax(&mut self, a: Var, mask: Option<&Mask>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().ok_or_else(|| Error::shape("softmax", "scalar input"))?;
        let rows = self.value(a).rows();
        if let Some(m) = mask {
            let mr = if shape.len() >= 2 { shape[shape.len() - 2] } else { 1 };
            check(m.cols() == n && m.rows() == mr, "softmax", || {
                format!("mask {}x{} does not match input {shape:?}", m.rows(), m.cols())
            })?;
        }
        let mut out = vec![F::zero(); rows * n];
        let x = self.data(a);
        for r in 0..rows {
            let row = &x[r * n..(r + 1) * n];
            let allow = mask.map(|m| m.row(r % m.rows()));
            let ok = |j: usize| allow.is_none_or(|al| al[j]);
            let mut mx = F::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if ok(j) && v > mx {
                    mx = v;
                }
            }
            if mx == F::neg_infinity() {
                return Err(Error::shape("softmax", format!("row {r} has no attendable position")));
            }
            let o = &mut out[r * n..(r + 1) * n];
            let mut z = F::zero();
            for j in 0..n {
                if ok(j) {
                    let e = (row[j] - mx).exp();
                    o[j] = e;
                    z += e;
                }
            }
            for v in o.iter_mut() {
                *v = *v / z;
            }
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax(a), ng))
    }

    /// Log-softmax over the last axis. When `active` is given, only active
    /// columns take part in the normalization; inactive columns are `-inf`
    /// and never receive gradient.
    pub fn log_softmax(&mut self, a: Var, active: Option<Arc<Vec<bool>>>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = self.value(a).cols();
        if let Some(act) = &active {
            check(act.len() == n && act.iter().any(|&b| b), "log_softmax", || {
                format!("active set of length {} for {n} columns", act.len())
            })?;
        }
        let rows = self.value(a).rows();
        let x = self.data(a);
        let mut out = vec![F::neg_infinity(); rows * n];
        for r in 0..rows {
            let row = &x[r * n..(r + 1) * n];
            let ok = |j: usize| active.as_ref().is_none_or(|al| al[j]);
            let mx = (0..n)
                .filter(|&j| ok(j))
                .map(|j| row[j])
                .fold(F::neg_infinity(), F::max);
            let z: F = (0..n).filter(|&j| ok(j)).map(|j| (row[j] - mx).exp()).sum();
            let lse = mx + z.ln();
            for j in (0..n).filter(|&j| ok(j)) {
                out[r * n + j] = row[j] - lse;
            }
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::LogSoftmax { a, active }, ng))
    }

    /// Layer normalization over the last axis with affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let n = self.value(x).cols();
        check(
            self.value(gamma).numel() == n && self.value(beta).numel() == n,
            "layer_norm",
            || format!("affine widths {:?}/{:?} vs {n}", self.shape(gamma), self.shape(beta)),
        )?;
        let rows = self.value(x).rows();
        let eps = F::of(eps);
        let nf = F::of(n as f64);
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut out = vec![F::zero(); rows * n];
        let mut xhat = vec![F::zero(); rows * n];
        let mut rstd = vec![F::zero(); rows];
        for r in 0..rows {
            let row = &self.data(x)[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<F>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nf;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    // ---------------------------------------------------------------- indexing

    /// Row lookup into a `[vocab, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        check(s.len() == 2, "embedding", || format!("table must be rank 2, got {s:?}"))?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= s[0]) {
            return Err(Error::shape(
                "embedding",
                format!("id {bad} outside table of {} rows", s[0]),
            ));
        }
        let d = s[1];
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&self.data(table)[i * d..(i + 1) * d]);
        }
        let ng = self.ng(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Output row `r` is input row `idx[r]`, or zeros for `None`.
    pub fn gather_rows(&mut self, a: Var, idx: &[Option<usize>]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        check(s.len() == 2, "gather_rows", || {
            format!("input must be rank 2, got {s:?}")
        })?;
        if let Some(bad) = idx.iter().flatten().find(|&&i| i >= s[0]) {
            return Err(Error::shape("gather_rows", format!("row {bad} outside {} rows", s[0])));
        }
        let d = s[1];
        let mut out = vec![F::zero(); idx.len() * d];
        for (r, i) in idx.iter().enumerate() {
            if let Some(i) = *i {
                out[r * d..(r + 1) * d].copy_from_slice(&self.data(a)[i * d..(i + 1) * d]);
            }
        }
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::new(vec![idx.len(), d], out)?,
            Op::GatherRows { a, idx: idx.to_vec() },
            ng,
        ))
    }

    /// Flat element gather: `out.flat[j] = a.flat[idx[j]]`, reshaped to `shape`.
    pub fn index_select(&mut self, a: Var, idx: &[usize], shape: &[usize]) -> Result<Var> {
        let n = self.value(a).numel();
        check(shape.iter().product::<usize>() == idx.len(), "index_select", || {
            format!("{} indices for output {shape:?}", idx.len())
        })?;
        if let Some(bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::shape(
                "index_select",
                format!("index {bad} outside {n} elements"),
            ));
        }
        let src = self.data(a);
        let out = idx.iter().map(|&i| src[i]).collect();
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::new(shape.to_vec(), out)?,
            Op::IndexSelect { a, idx: idx.to_vec() },
            ng,
        ))
    }

    /// `out[i] = a[i, idx[i]]` for a rank-2 input.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        check(s.len() == 2 && s[0] == idx.len(), "pick", || {
            format!("input {s:?} with {} indices", idx.len())
        })?;
        if let Some(bad) = idx.iter().find(|&&i| i >= s[1]) {
            return Err(Error::shape("pick", format!("column {bad} outside {} columns", s[1])));
        }
        let out = idx
            .iter()
            .enumerate()
            .map(|(r, &c)| self.data(a)[r * s[1] + c])
            .collect();
        let ng = self.ng(a);
        Ok(self.push(Tensor::vector(out), Op::Pick { a, idx: idx.to_vec() }, ng))
    }

    /// Concatenates rank-2 inputs along the last axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        check(!parts.is_empty(), "concat_cols", || "no inputs".into())?;
        let rows = self.shape(parts[0])[0];
        for &p in parts {
            let s = self.shape(p);
            check(s.len() == 2 && s[0] == rows, "concat_cols", || {
                format!("part {s:?} does not have {rows} rows")
            })?;
        }
        let total: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::new(vec![rows, total], out)?, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Stacks two rank-2 inputs with equal widths.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        check(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[1], "concat_rows", || {
            format!("{sa:?} vs {sb:?}")
        })?;
        let mut out = self.data(a).to_vec();
        out.extend_from_slice(self.data(b));
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![sa[0] + sb[0], sa[1]], out)?, Op::ConcatRows(a, b), ng))
    }

    /// Columns `start..end` of a rank-2 input.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        check(s.len() == 2 && start <= end && end <= s[1], "slice_cols", || {
            format!("columns {start}..{end} of {s:?}")
        })?;
        let mut out = Vec::with_capacity(s[0] * (end - start));
        for r in 0..s[0] {
            out.extend_from_slice(&self.value(a).row(r)[start..end]);
        }
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::new(vec![s[0], end - start], out)?,
            Op::SliceCols { a, start },
            ng,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::Reshape(a), ng))
    }

    /// `[n, heads * dh] -> [heads, n, dh]`.
    pub fn split_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        check(s.len() == 2 && heads > 0 && s[1] % heads == 0, "split_heads", || {
            format!("{s:?} into {heads} heads")
        })?;
        let (n, dh) = (s[0], s[1] / heads);
        let src = self.data(a);
        let mut out = vec![F::zero(); n * s[1]];
        for h in 0..heads {
            for i in 0..n {
                out[(h * n + i) * dh..(h * n + i + 1) * dh]
                    .copy_from_slice(&src[i * s[1] + h * dh..i * s[1] + (h + 1) * dh]);
            }
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(vec![heads, n, dh], out)?, Op::SplitHeads { a, heads }, ng))
    }

    /// `[heads, n, dh] -> [n, heads * dh]`.
    pub fn merge_heads(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        check(s.len() == 3, "merge_heads", || format!("expected rank 3, got {s:?}"))?;
        let (heads, n, dh) = (s[0], s[1], s[2]);
        let src = self.data(a);
        let mut out = vec![F::zero(); n * heads * dh];
        for h in 0..heads {
            for i in 0..n {
                out[i * heads * dh + h * dh..i * heads * dh + (h + 1) * dh]
                    .copy_from_slice(&src[(h * n + i) * dh..(h * n + i + 1) * dh]);
            }
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(vec![n, heads * dh], out)?, Op::MergeHeads(a), ng))
    }

    /// Rotary position rotation of `[heads, n, dh]` with one position per row.
    pub fn rope(&mut self, a: Var, positions: &[usize], base: f64) -> Result<Var> {
        let s = self.shape(a).to_vec();
        check(s.len() == 3 && s[1] == positions.len() && s[2] % 2 == 0, "rope", || {
            format!(
                "input {s:?} with {} positions (head width must be even)",
                positions.len()
            )
        })?;
        let out = rotate(self.data(a), &s, positions, base, false);
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::new(s, out)?,
            Op::Rope {
                a,
                positions: positions.to_vec(),
                base,
            },
            ng,
        ))
    }

    // ---------------------------------------------------------------- reductions

    pub fn sum(&mut self, a: Var) -> Var {
        let s: F = self.data(a).iter().copied().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = F::of(self.value(a).numel().max(1) as f64);
        let s: F = self.data(a).iter().copied().sum::<F>() / n;
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::MeanAll(a), ng)
    }

    /// Sums the last axis: `[.., n] -> [..]`.
    pub fn sum_last(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.cols().max(1);
        let out: Vec<F> = t.data().chunks(n).map(|c| c.iter().copied().sum()).collect();
        let mut shape = t.shape().to_vec();
        shape.pop();
        let ng = self.ng(a);
        self.push(Tensor::new(shape, out).expect("reduced shape"), Op::SumLast(a), ng)
    }

    /// Mean absolute difference.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let d = self.abs(d);
        Ok(self.mean(d))
    }

    /// Mean squared difference.
    pub fn l2(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let d2 = self.mul(d, d)?;
        Ok(self.mean(d2))
    }

    /// Mean cross-entropy of rank-2 logits against class targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lp = self.log_softmax(logits, None)?;
        let picked = self.pick(lp, targets)?;
        let m = self.mean(picked);
        Ok(self.scale(m, -1.0))
    }

    /// Mean over rows of `KL(softmax(reference) || softmax(logits))`; the
    /// reference logits are treated as constants.
    pub fn kl_categorical(&mut self, reference: &Tensor<F>, logits: Var) -> Result<Var> {
        check(reference.shape() == self.shape(logits), "kl_categorical", || {
            format!("{:?} vs {:?}", reference.shape(), self.shape(logits))
        })?;
        let n = reference.cols();
        let mut p = Vec::with_capacity(reference.numel());
        let mut plogp = F::zero();
        for row in reference.data().chunks(n) {
            let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<F>().ln();
            for &v in row {
                let lpv = v - lse;
                let pv = lpv.exp();
                p.push(pv);
                if pv > F::zero() {
                    plogp += pv * lpv;
                }
            }
        }
        let rows = reference.rows();
        let pt = self.constant(Tensor::new(reference.shape().to_vec(), p)?);
        let lq = self.log_softmax(logits, None)?;
        let cross = self.mul(pt, lq)?;
        let cross = self.sum(cross);
        // KL = sum p log p - sum p log q, averaged over rows.
        let neg = self.scale(cross, -1.0 / rows as f64);
        Ok(self.add_scalar(neg, plogp.as_f64() / rows as f64))
    }

    /// Scalar node whose value and gradient with respect to `a` were computed
    /// externally (used for losses with dedicated dynamic programs).
    pub fn scalar_with_grad(&mut self, a: Var, value: F, dvalue: Vec<F>) -> Result<Var> {
        check(dvalue.len() == self.value(a).numel(), "scalar_with_grad", || {
            format!("gradient of length {} for input {:?}", dvalue.len(), self.shape(a))
        })?;
        let ng = self.ng(a);
        Ok(self.push(Tensor::scalar(value), Op::ScalarWithGrad { a, dvalue }, ng))
    }

    // ---------------------------------------------------------------- backward

    /// Reverse-mode sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let ls = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.needs_grad {
                self.propagate(id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            params: self.params.clone(),
        })
    }

    fn propagate(&self, id: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[id];
        let y = node.value.data();
        let mut acc = |v: Var, delta: Vec<F>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, d) in existing.iter_mut().zip(delta) {
                        *e += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        let elementwise =
            |a: Var, f: &dyn Fn(usize) -> F| -> Vec<F> { (0..self.nodes[a.0].value.numel()).map(f).collect() };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => self.matmul_backward(*a, *b, *ta, *tb, g, &mut acc),
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::AddRow(a, r) => {
                acc(*a, g.to_vec());
                if self.ng(*r) {
                    let n = self.value(*r).numel();
                    let mut gr = vec![F::zero(); n];
                    for chunk in g.chunks(n) {
                        for (o, &x) in gr.iter_mut().zip(chunk) {
                            *o += x;
                        }
                    }
                    acc(*r, gr);
                }
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|&x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                if self.ng(*a) {
                    acc(*a, g.iter().zip(db).map(|(&x, &y)| x * y).collect());
                }
                if self.ng(*b) {
                    acc(*b, g.iter().zip(da).map(|(&x, &y)| x * y).collect());
                }
            }
            Op::Scale(a, c) => acc(*a, g.iter().map(|&x| x * *c).collect()),
            Op::AddScalar(a) => acc(*a, g.to_vec()),
            Op::Sqrt(a) => acc(*a, elementwise(*a, &|i| g[i] * F::of(0.5) / y[i])),
            Op::Log(a) => {
                let x = self.data(*a);
                acc(*a, elementwise(*a, &|i| g[i] / x[i]))
            }
            Op::Exp(a) => acc(*a, elementwise(*a, &|i| g[i] * y[i])),
            Op::Abs(a) => {
                let x = self.data(*a);
                acc(
                    *a,
                    elementwise(*a, &|i| {
                        if x[i] > F::zero() {
                            g[i]
                        } else if x[i] < F::zero() {
                            -g[i]
                        } else {
                            F::zero()
                        }
                    }),
                )
            }
            Op::Gelu(a) => {
                let x = self.data(*a);
                acc(*a, elementwise(*a, &|i| g[i] * gelu_grad(x[i])))
            }
            Op::ClampMin(a, c) => {
                let x = self.data(*a);
                acc(*a, elementwise(*a, &|i| if x[i] > *c { g[i] } else { F::zero() }))
            }
            Op::Softmax(a) => {
                let n = node.value.cols();
                let mut dx = vec![F::zero(); y.len()];
                for ((yr, gr), dr) in y.chunks(n).zip(g.chunks(n)).zip(dx.chunks_mut(n)) {
                    let dot: F = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*a, dx);
            }
            Op::LogSoftmax { a, active } => {
                let n = node.value.cols();
                let mut dx = vec![F::zero(); y.len()];
                for ((yr, gr), dr) in y.chunks(n).zip(g.chunks(n)).zip(dx.chunks_mut(n)) {
                    let ok = |j: usize| active.as_ref().is_none_or(|al| al[j]);
                    let gs: F = (0..n).filter(|&j| ok(j)).map(|j| gr[j]).sum();
                    for j in (0..n).filter(|&j| ok(j)) {
                        dr[j] = gr[j] - yr[j].exp() * gs;
                    }
                }
                acc(*a, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = self.value(*x).cols();
                let gm = self.data(*gamma);
                if self.ng(*gamma) {
                    let mut dg = vec![F::zero(); n];
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                    acc(*gamma, dg);
                }
                if self.ng(*beta) {
                    let mut db = vec![F::zero(); n];
                    for gr in g.chunks(n) {
                        for j in 0..n {
                            db[j] += gr[j];
                        }
                    }
                    acc(*beta, db);
                }
                if self.ng(*x) {
                    let nf = F::of(n as f64);
                    let mut dx = vec![F::zero(); g.len()];
                    for (r, ((gr, hr), dr)) in g.chunks(n).zip(xhat.chunks(n)).zip(dx.chunks_mut(n)).enumerate() {
                        let dh: Vec<F> = (0..n).map(|j| gr[j] * gm[j]).collect();
                        let m1 = dh.iter().copied().sum::<F>() / nf;
                        let m2 = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum::<F>() / nf;
                        for j in 0..n {
                            dr[j] = rstd[r] * (dh[j] - m1 - hr[j] * m2);
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.value(*table).cols();
                let mut dt = vec![F::zero(); self.value(*table).numel()];
                for (r, &i) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[i * d + j] += g[r * d + j];
                    }
                }
                acc(*table, dt);
            }
            Op::GatherRows { a, idx } => {
                let d = self.value(*a).cols();
                let mut da = vec![F::zero(); self.value(*a).numel()];
                for (r, i) in idx.iter().enumerate() {
                    if let Some(i) = *i {
                        for j in 0..d {
                            da[i * d + j] += g[r * d + j];
                        }
                    }
                }
                acc(*a, da);
            }
            Op::IndexSelect { a, idx } => {
                let mut da = vec![F::zero(); self.value(*a).numel()];
                for (j, &i) in idx.iter().enumerate() {
                    da[i] += g[j];
                }
                acc(*a, da);
            }
            Op::Pick { a, idx } => {
                let n = self.value(*a).cols();
                let mut da = vec![F::zero(); self.value(*a).numel()];
                for (r, &c) in idx.iter().enumerate() {
                    da[r * n + c] += g[r];
                }
                acc(*a, da);
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.ng(p) {
                        let dp = g
                            .chunks(total)
                            .flat_map(|row| row[off..off + w].iter().copied())
                            .collect();
                        acc(p, dp);
                    }
                    off += w;
                }
            }
            Op::ConcatRows(a, b) => {
                let na = self.value(*a).numel();
                acc(*a, g[..na].to_vec());
                acc(*b, g[na..].to_vec());
            }
            Op::SliceCols { a, start } => {
                let w = node.value.cols();
                let n = self.value(*a).cols();
                let mut da = vec![F::zero(); self.value(*a).numel()];
                for (r, gr) in g.chunks(w.max(1)).enumerate() {
                    da[r * n + start..r * n + start + w].copy_from_slice(gr);
                }
                acc(*a, da);
            }
            Op::Reshape(a) => acc(*a, g.to_vec()),
            Op::SplitHeads { a, heads } => {
                let s = self.shape(*a);
                let (n, dh) = (s[0], s[1] / heads);
                let mut da = vec![F::zero(); g.len()];
                for h in 0..*heads {
                    for i in 0..n {
                        da[i * s[1] + h * dh..i * s[1] + (h + 1) * dh]
                            .copy_from_slice(&g[(h * n + i) * dh..(h * n + i + 1) * dh]);
                    }
                }
                acc(*a, da);
            }
            Op::MergeHeads(a) => {
                let s = self.shape(*a);
                let (heads, n, dh) = (s[0], s[1], s[2]);
                let mut da = vec![F::zero(); g.len()];
                for h in 0..heads {
                    for i in 0..n {
                        da[(h * n + i) * dh..(h * n + i + 1) * dh]
                            .copy_from_slice(&g[i * heads * dh + h * dh..i * heads * dh + (h + 1) * dh]);
                    }
                }
                acc(*a, da);
            }
            Op::Rope { a, positions, base } => {
                acc(*a, rotate(g, self.shape(*a), positions, *base, true));
            }
            Op::SumAll(a) => acc(*a, vec![g[0]; self.value(*a).numel()]),
            Op::MeanAll(a) => {
                let n = self.value(*a).numel();
                acc(*a, vec![g[0] / F::of(n.max(1) as f64); n]);
            }
            Op::SumLast(a) => {
                let n = self.value(*a).cols().max(1);
                acc(*a, g.iter().flat_map(|&x| std::iter::repeat_n(x, n)).collect());
            }
            Op::ScalarWithGrad { a, dvalue } => acc(*a, dvalue.iter().map(|&d| d * g[0]).collect()),
        }
    }

    fn matmul_backward(&self, a: Var, b: Var, ta: bool, tb: bool, g: &[F], acc: &mut impl FnMut(Var, Vec<F>)) {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (ar, ac) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (br, bc) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let n = if tb { br } else { bc };
        let (da_src, db_src) = (self.data(a), self.data(b));
        if sb.len() == 2 && !ta {
            let rows: usize = sa[..sa.len() - 1].iter().product();
            if self.ng(a) {
                // dA[rows,k] = G[rows,n] @ op(B)^T
                let mut da = vec![F::zero(); rows * k];
                let (rsb, csb) = if tb { (k as isize, 1) } else { (1, n as isize) };
                F::gemm(rows, n, k, g, n as isize, 1, db_src, rsb, csb, F::zero(), &mut da);
                acc(a, da);
            }
            if self.ng(b) {
                // d op(B)[k,n] = A^T @ G; stored transposed when tb.
                let mut db = vec![F::zero(); k * n];
                if tb {
                    F::gemm(n, rows, k, g, 1, n as isize, da_src, k as isize, 1, F::zero(), &mut db);
                } else {
                    F::gemm(k, rows, n, da_src, 1, k as isize, g, n as isize, 1, F::zero(), &mut db);
                }
                acc(b, db);
            }
            return;
        }
        let h = sa[0];
        let (rsa, csa) = if ta {
            (1isize, ac as isize)
        } else {
            (ac as isize, 1isize)
        };
        let (rsb, csb) = if tb {
            (1isize, bc as isize)
        } else {
            (bc as isize, 1isize)
        };
        if self.ng(a) {
            let mut da = vec![F::zero(); h * ar * ac];
            for i in 0..h {
                let gi = &g[i * m * n..(i + 1) * m * n];
                let bi = &db_src[i * br * bc..(i + 1) * br * bc];
                let out = &mut da[i * ar * ac..(i + 1) * ar * ac];
                if ta {
                    // stored A is [k, m]: dA = op(B) @ G^T
                    F::gemm(k, n, m, bi, rsb, csb, gi, 1, n as isize, F::zero(), out);
                } else {
                    // dA[m,k] = G @ op(B)^T
                    F::gemm(m, n, k, gi, n as isize, 1, bi, csb, rsb, F::zero(), out);
                }
            }
            acc(a, da);
        }
        if self.ng(b) {
            let mut db = vec![F::zero(); h * br * bc];
            for i in 0..h {
                let gi = &g[i * m * n..(i + 1) * m * n];
                let ai = &da_src[i * ar * ac..(i + 1) * ar * ac];
                let out = &mut db[i * br * bc..(i + 1) * br * bc];
                if tb {
                    // stored B is [n, k]: dB = G^T @ op(A)
                    F::gemm(n, m, k, gi, 1, n as isize, ai, rsa, csa, F::zero(), out);
                } else {
                    // dB[k,n] = op(A)^T @ G
                    F::gemm(k, m, n, ai, csa, rsa, gi, n as isize, 1, F::zero(), out);
                }
            }
            acc(b, db);
        }
    }
}

/// `0.5 x (1 + tanh(u))` written as `x * sigmoid(2u)`.
fn gelu<F: Real>(x: F) -> F {
    x * gelu_gate(x).0
}

fn gelu_grad<F: Real>(x: F) -> F {
    let (s, du) = gelu_gate(x);
    s + x * F::of(2.0) * s * (F::one() - s) * du
}

/// `(sigmoid(2u), du/dx)` for the tanh approximation's inner `u(x)`.
fn gelu_gate<F: Real>(x: F) -> (F, F) {
    let c = F::of((2.0 / std::f64::consts::PI).sqrt());
    let u = c * (x + F::of(0.044715) * x * x * x);
    let s = F::one() / (F::one() + (-(u + u)).exp());
    (s, c * (F::one() + F::of(3.0 * 0.044715) * x * x))
}

/// Rotates consecutive pairs `(2j, 2j+1)` of each row by `pos * base^(-2j/dh)`;
/// `inverse` rotates by the negated angle.
fn rotate<F: Real>(x: &[F], shape: &[usize], positions: &[usize], base: f64, inverse: bool) -> Vec<F> {
    let (heads, n, dh) = (shape[0], shape[1], shape[2]);
    let mut out = vec![F::zero(); x.len()];
    let sign = if inverse { -1.0 } else { 1.0 };
    let freqs: Vec<f64> = (0..dh / 2)
        .map(|j| sign * base.powf(-2.0 * j as f64 / dh as f64))
        .collect();
    for (i, &pos) in positions.iter().enumerate() {
        for (j, &f) in freqs.iter().enumerate() {
            let theta = pos as f64 * f;
            let (s, c) = (F::of(theta.sin()), F::of(theta.cos()));
            for h in 0..heads {
                let o = (h * n + i) * dh + 2 * j;
                let (x0, x1) = (x[o], x[o + 1]);
                out[o] = x0 * c - x1 * s;
                out[o + 1] = x0 * s + x1 * c;
            }
        }
    }
    out
}
