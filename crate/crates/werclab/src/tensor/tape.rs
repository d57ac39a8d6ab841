//! Recording tape for reverse-mode differentiation.
//!
//! Every primitive application appends one node (op id, input refs,
//! saved activations). Nodes are created in topological order by
//! construction, so [`Tape::backward`] is a single reverse sweep.
//! One tape per thread of control; values are immutable once written,
//! only grad buffers mutate.

use super::scalar::Real;
use super::{same_shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a tensor recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul { a: Var, b: Var },
    Transpose { a: Var },
    Add { a: Var, b: Var },
    /// Row-broadcast add: `a` is r x c, `b` has length c.
    AddRow { a: Var, b: Var },
    Scale { a: Var, c: F },
    MulElem { a: Var, b: Var },
    Relu { a: Var },
    Softmax { a: Var, axis: usize },
    /// Log-softmax over the last axis.
    LogSoftmax { a: Var },
    LayerNorm { a: Var, affine: Option<(Var, Var)>, inv_std: Vec<F>, xhat: Vec<F> },
    Embedding { table: Var, ids: Vec<usize> },
    SliceCols { a: Var, start: usize, len: usize },
    ConcatCols { parts: Vec<Var> },
    /// Non-overlapping mean pool over rows with the given window.
    PoolMeanRows { a: Var, window: usize },
    SumAll { a: Var },
    RowSum { a: Var },
    /// out[i] = a[i, ids[i]].
    GatherRows { a: Var, ids: Vec<usize> },
}

struct Node<F> {
    shape: Vec<usize>,
    data: Vec<F>,
    /// Participates in gradient flow.
    track: bool,
    /// Persistent accumulator; allocated for tracked leaves only.
    /// Intermediates use transient buffers inside backward.
    grad: Option<Vec<F>>,
    op: Op<F>,
}

pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<F>, track: bool, op: Op<F>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let grad = (track && matches!(op, Op::Leaf)).then(|| vec![F::ZERO; data.len()]);
        self.nodes.push(Node { shape, data, track, grad, op });
        Var(self.nodes.len() - 1)
    }

    fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].track
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[F] {
        &self.nodes[v.0].data
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<F> {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].data.clone()).unwrap()
    }

    /// Gradient buffer of `v`; `None` when `v` does not track gradients.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.iter_mut().for_each(|x| *x = F::ZERO);
            }
        }
    }

    pub fn all_values_finite(&self) -> bool {
        self.nodes.iter().all(|n| n.data.iter().all(|v| v.is_finite()))
    }

    // ── Leaves ───────────────────────────────────────────────────────

    pub fn leaf(&mut self, t: &Tensor<F>, requires_grad: bool) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), requires_grad, Op::Leaf)
    }

    pub fn leaf_from(&mut self, shape: Vec<usize>, data: Vec<F>, requires_grad: bool) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t, requires_grad))
    }

    /// Constant leaf (no gradient), used for masks and positional tables.
    pub fn constant(&mut self, t: &Tensor<F>) -> Var {
        self.leaf(t, false)
    }

    // ── Primitives ───────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch { op: "matmul", left: sa.to_vec(), right: sb.to_vec() });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::ZERO; m * n];
        unsafe {
            F::gemm(
                m, k, n,
                F::ONE,
                self.nodes[a.0].data.as_ptr(), k as isize, 1,
                self.nodes[b.0].data.as_ptr(), n as isize, 1,
                F::ZERO,
                out.as_mut_ptr(), n as isize, 1,
            );
        }
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(vec![m, n], out, rg, Op::MatMul { a, b }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(Error::InvalidShape { op: "transpose", shape: sa.to_vec(), reason: "expected 2-D".into() });
        }
        let (m, n) = (sa[0], sa[1]);
        let src = &self.nodes[a.0].data;
        let mut out = vec![F::ZERO; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.requires_grad(a);
        Ok(self.push(vec![n, m], out, rg, Op::Transpose { a }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.shape(a), self.shape(b))?;
        let out: Vec<F> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, out, rg, Op::Add { a, b }))
    }

    /// `a` is r x c, `b` is a length-c vector added to every row.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 1 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch { op: "add_row", left: sa, right: sb });
        }
        let c = sa[1];
        let bd = self.nodes[b.0].data.clone();
        let out: Vec<F> = self.nodes[a.0]
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % c])
            .collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(sa, out, rg, Op::AddRow { a, b }))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let out: Vec<F> = self.nodes[a.0].data.iter().map(|&x| x * c).collect();
        let rg = self.requires_grad(a);
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, out, rg, Op::Scale { a, c })
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul_elem", self.shape(a), self.shape(b))?;
        let out: Vec<F> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, out, rg, Op::MulElem { a, b }))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out: Vec<F> = self.nodes[a.0].data.iter().map(|&x| x.maxv(F::ZERO)).collect();
        let rg = self.requires_grad(a);
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, out, rg, Op::Relu { a })
    }

    /// Numerically stable softmax along `axis` (max subtraction per lane).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::AxisOutOfRange { axis, shape });
        }
        let mut out = self.nodes[a.0].data.clone();
        for lane in Lanes::of(&shape, axis) {
            let mut maxv = out[lane.offset(0)];
            for j in 1..lane.len {
                maxv = maxv.maxv(out[lane.offset(j)]);
            }
            let mut sum = F::ZERO;
            for j in 0..lane.len {
                let idx = lane.offset(j);
                let e = (out[idx] - maxv).exp();
                out[idx] = e;
                sum += e;
            }
            for j in 0..lane.len {
                let idx = lane.offset(j);
                out[idx] = out[idx] / sum;
            }
        }
        let rg = self.requires_grad(a);
        Ok(self.push(shape, out, rg, Op::Softmax { a, axis }))
    }

    /// Log-softmax over the last axis of a 2-D tensor.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return Err(Error::InvalidShape { op: "log_softmax", shape, reason: "expected 2-D".into() });
        }
        let (r, c) = (shape[0], shape[1]);
        let src = &self.nodes[a.0].data;
        let mut out = vec![F::ZERO; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mut maxv = row[0];
            for &x in &row[1..] {
                maxv = maxv.maxv(x);
            }
            let mut sum = F::ZERO;
            for &x in row {
                sum += (x - maxv).exp();
            }
            let lse = maxv + sum.ln();
            for j in 0..c {
                out[i * c + j] = row[j] - lse;
            }
        }
        let rg = self.requires_grad(a);
        Ok(self.push(shape, out, rg, Op::LogSoftmax { a }))
    }

    /// Layer normalization over the last axis: (x - mean) / sqrt(var + eps),
    /// then an optional affine `gain * xhat + bias`.
    ///
    /// With `eps = 0` a constant vector is a division by zero and is
    /// reported as an error; callers pass eps > 0 (default 1e-5).
    pub fn layer_norm(&mut self, a: Var, eps: F, affine: Option<(Var, Var)>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().ok_or(Error::InvalidShape {
            op: "layer_norm",
            shape: shape.clone(),
            reason: "rank 0".into(),
        })?;
        if d < 2 {
            return Err(Error::InvalidShape { op: "layer_norm", shape, reason: "last extent must be >= 2".into() });
        }
        if let Some((g, b)) = affine {
            if self.shape(g) != [d] || self.shape(b) != [d] {
                return Err(Error::ShapeMismatch { op: "layer_norm affine", left: vec![d], right: self.shape(g).to_vec() });
            }
        }
        let rows = shape.iter().product::<usize>() / d;
        let src = self.nodes[a.0].data.clone();
        let inv_d = F::ONE / F::from_usize(d);
        let mut inv_std = vec![F::ZERO; rows];
        let mut xhat = vec![F::ZERO; rows * d];
        for i in 0..rows {
            let row = &src[i * d..(i + 1) * d];
            let mut mean = F::ZERO;
            for &x in row {
                mean += x;
            }
            mean = mean * inv_d;
            let mut var = F::ZERO;
            for &x in row {
                let delta = x - mean;
                var += delta * delta;
            }
            var = var * inv_d;
            let denom = var + eps;
            if denom == F::ZERO {
                return Err(Error::LayerNormDegenerate);
            }
            let inv = F::ONE / denom.sqrt();
            inv_std[i] = inv;
            for j in 0..d {
                xhat[i * d + j] = (row[j] - mean) * inv;
            }
        }
        let out: Vec<F> = match affine {
            Some((g, b)) => {
                let gd = self.nodes[g.0].data.clone();
                let bd = self.nodes[b.0].data.clone();
                xhat.iter().enumerate().map(|(i, &xh)| gd[i % d] * xh + bd[i % d]).collect()
            }
            None => xhat.clone(),
        };
        let rg = self.requires_grad(a)
            || affine.map(|(g, b)| self.requires_grad(g) || self.requires_grad(b)).unwrap_or(false);
        Ok(self.push(shape, out, rg, Op::LayerNorm { a, affine, inv_std, xhat }))
    }

    /// Row gather: out[i, :] = table[ids[i], :].
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table);
        if st.len() != 2 {
            return Err(Error::InvalidShape { op: "embedding", shape: st.to_vec(), reason: "table must be 2-D".into() });
        }
        let (v, d) = (st[0], st[1]);
        if ids.is_empty() {
            return Err(Error::EmptyInput("embedding ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::IdOutOfRange { id: bad, rows: v });
        }
        let src = &self.nodes[table.0].data;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let rg = self.requires_grad(table);
        Ok(self.push(vec![ids.len(), d], out, rg, Op::Embedding { table, ids: ids.to_vec() }))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 || start + len > sa[1] || len == 0 {
            return Err(Error::InvalidShape {
                op: "slice_cols",
                shape: sa,
                reason: format!("columns {start}..{} out of range", start + len),
            });
        }
        let (r, c) = (sa[0], sa[1]);
        let src = &self.nodes[a.0].data;
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let rg = self.requires_grad(a);
        Ok(self.push(vec![r, len], out, rg, Op::SliceCols { a, start, len }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat_cols".into()));
        }
        let r = self.shape(parts[0])[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let sp = self.shape(p);
            if sp.len() != 2 || sp[0] != r {
                return Err(Error::ShapeMismatch { op: "concat_cols", left: self.shape(parts[0]).to_vec(), right: sp.to_vec() });
            }
            widths.push(sp[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                let src = &self.nodes[p.0].data;
                out.extend_from_slice(&src[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(vec![r, total], out, rg, Op::ConcatCols { parts: parts.to_vec() }))
    }

    /// Non-overlapping mean pool along rows: T x f -> ceil(T/window) x f.
    /// The final window may be shorter; each output is the mean of the
    /// rows actually inside its window.
    pub fn pool_mean_rows(&mut self, a: Var, window: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 {
            return Err(Error::InvalidShape { op: "pool_mean_rows", shape: sa, reason: "expected 2-D".into() });
        }
        if window == 0 {
            return Err(Error::InvalidConfig("pool window must be >= 1".into()));
        }
        let (t, f) = (sa[0], sa[1]);
        let out_rows = t.div_ceil(window);
        let src = &self.nodes[a.0].data;
        let mut out = vec![F::ZERO; out_rows * f];
        for w in 0..out_rows {
            let lo = w * window;
            let hi = (lo + window).min(t);
            let inv = F::ONE / F::from_usize(hi - lo);
            for row in lo..hi {
                for j in 0..f {
                    out[w * f + j] += src[row * f + j] * inv;
                }
            }
        }
        let rg = self.requires_grad(a);
        Ok(self.push(vec![out_rows, f], out, rg, Op::PoolMeanRows { a, window }))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let mut s = F::ZERO;
        for &x in &self.nodes[a.0].data {
            s += x;
        }
        let rg = self.requires_grad(a);
        self.push(vec![1], vec![s], rg, Op::SumAll { a })
    }

    /// Sum over the last axis of a 2-D tensor -> length-r vector.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 {
            return Err(Error::InvalidShape { op: "row_sum", shape: sa, reason: "expected 2-D".into() });
        }
        let (r, c) = (sa[0], sa[1]);
        let src = &self.nodes[a.0].data;
        let mut out = vec![F::ZERO; r];
        for i in 0..r {
            for j in 0..c {
                out[i] += src[i * c + j];
            }
        }
        let rg = self.requires_grad(a);
        Ok(self.push(vec![r], out, rg, Op::RowSum { a }))
    }

    /// out[i] = a[i, ids[i]].
    pub fn gather_rows(&mut self, a: Var, ids: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 || ids.len() != sa[0] {
            return Err(Error::InvalidShape {
                op: "gather_rows",
                shape: sa,
                reason: format!("need one id per row, got {}", ids.len()),
            });
        }
        let (r, c) = (sa[0], sa[1]);
        if let Some(&bad) = ids.iter().find(|&&id| id >= c) {
            return Err(Error::IdOutOfRange { id: bad, rows: c });
        }
        let src = &self.nodes[a.0].data;
        let out: Vec<F> = (0..r).map(|i| src[i * c + ids[i]]).collect();
        let rg = self.requires_grad(a);
        Ok(self.push(vec![r], out, rg, Op::GatherRows { a, ids: ids.to_vec() }))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Every `requires_grad` node
    /// reachable from `loss` accumulates dLoss/dNode; repeated calls
    /// without [`Tape::zero_grads`] keep accumulating.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::NonScalarLoss { shape: self.nodes[loss.0].shape.clone() });
        }
        let lv = self.nodes[loss.0].data[0];
        if !lv.is_finite() {
            return Err(Error::NonFinite { context: "loss value before backward".into() });
        }
        if !self.nodes[loss.0].track {
            // Loss does not depend on any tracked leaf; nothing to do.
            return Ok(());
        }
        // Seed-and-sweep over a scratch buffer per node avoids aliasing
        // between the output grad (read) and input grads (written).
        let mut seeds: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        seeds[loss.0] = Some(vec![F::ONE]);
        for idx in (0..self.nodes.len()).rev() {
            let Some(gout) = seeds[idx].take() else { continue };
            // Persist into the accumulating buffer (tracked leaves).
            if let Some(gbuf) = self.nodes[idx].grad.as_mut() {
                for (g, &s) in gbuf.iter_mut().zip(&gout) {
                    *g += s;
                }
            }
            self.propagate(idx, &gout, &mut seeds);
        }
        Ok(())
    }

    fn seed_into(&self, seeds: &mut [Option<Vec<F>>], v: Var) -> bool {
        if !self.requires_grad(v) {
            return false;
        }
        if seeds[v.0].is_none() {
            seeds[v.0] = Some(vec![F::ZERO; self.nodes[v.0].data.len()]);
        }
        true
    }

    fn propagate(&self, idx: usize, gout: &[F], seeds: &mut [Option<Vec<F>>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                if self.seed_into(seeds, a) {
                    let bp = self.nodes[b.0].data.as_ptr();
                    let ga = seeds[a.0].as_mut().unwrap();
                    unsafe {
                        F::gemm(
                            m, n, k,
                            F::ONE,
                            gout.as_ptr(), n as isize, 1,
                            bp, 1, n as isize,
                            F::ONE,
                            ga.as_mut_ptr(), k as isize, 1,
                        );
                    }
                }
                if self.seed_into(seeds, b) {
                    let ap = self.nodes[a.0].data.as_ptr();
                    let gb = seeds[b.0].as_mut().unwrap();
                    unsafe {
                        F::gemm(
                            k, m, n,
                            F::ONE,
                            ap, 1, k as isize,
                            gout.as_ptr(), n as isize, 1,
                            F::ONE,
                            gb.as_mut_ptr(), n as isize, 1,
                        );
                    }
                }
            }
            Op::Transpose { a } => {
                let a = *a;
                let (m, n) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                if self.seed_into(seeds, a) {
                    let ga = seeds[a.0].as_mut().unwrap();
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += gout[j * m + i];
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                for v in [a, b] {
                    if self.seed_into(seeds, v) {
                        let gv = seeds[v.0].as_mut().unwrap();
                        for (g, &s) in gv.iter_mut().zip(gout) {
                            *g += s;
                        }
                    }
                }
            }
            Op::AddRow { a, b } => {
                let (a, b) = (*a, *b);
                let c = self.nodes[b.0].data.len();
                if self.seed_into(seeds, a) {
                    let ga = seeds[a.0].as_mut().unwrap();
                    for (g, &s) in ga.iter_mut().zip(gout) {
                        *g += s;
                    }
                }
                if self.seed_into(seeds, b) {
                    let gb = seeds[b.0].as_mut().unwrap();
                    for (i, &s) in gout.iter().enumerate() {
                        gb[i % c] += s;
                    }
                }
            }
            Op::Scale { a, c } => {
                let (a, c) = (*a, *c);
                if self.seed_into(seeds, a) {
                    let ga = seeds[a.0].as_mut().unwrap();
                    for (g, &s) in ga.iter_mut().zip(gout) {
                        *g += c * s;
                    }
                }
            }
            Op::MulElem { a, b } => {
                let (a, b) = (*a, *b);
                if self.seed_into(seeds, a) {
                    let bd = &self.nodes[b.0].data;
                    let ga = seeds[a.0].as_mut().unwrap();
                    for ((g, &s), &bv) in ga.iter_mut().zip(gout).zip(bd) {
                        *g += bv * s;
                    }
                }
                if self.seed_into(seeds, b) {
                    let ad = &self.nodes[a.0].data;
                    let gb = seeds[b.0].as_mut().unwrap();
                    for ((g, &s), &av) in gb.iter_mut().zip(gout).zip(ad) {
                        *g += av * s;
                    }
                }
            }
            Op::Relu { a } => {
                let a = *a;
                if self.seed_into(seeds, a) {
                    let ad = &self.nodes[a.0].data;
                    let ga = seeds[a.0].as_mut().unwrap();
                    for ((g, &s), &av) in ga.iter_mut().zip(gout).zip(ad) {
                        if av > F::ZERO {
                            *g += s;
                        }
                    }
                }
            }
            Op::Softmax { a, axis } => {
                let (a, axis) = (*a, *axis);
                if self.seed_into(seeds, a) {
                    let shape = &self.nodes[idx].shape;
                    let y = &self.nodes[idx].data;
                    let ga = seeds[a.0].as_mut().unwrap();
                    for lane in Lanes::of(shape, axis) {
                        let mut dot = F::ZERO;
                        for j in 0..lane.len {
                            let i = lane.offset(j);
                            dot += y[i] * gout[i];
                        }
                        for j in 0..lane.len {
                            let i = lane.offset(j);
                            ga[i] += y[i] * (gout[i] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax { a } => {
                let a = *a;
                if self.seed_into(seeds, a) {
                    let (r, c) = (self.nodes[idx].shape[0], self.nodes[idx].shape[1]);
                    let y = &self.nodes[idx].data;
                    let ga = seeds[a.0].as_mut().unwrap();
                    for i in 0..r {
                        let mut gsum = F::ZERO;
                        for j in 0..c {
                            gsum += gout[i * c + j];
                        }
                        for j in 0..c {
                            let p = y[i * c + j].exp();
                            ga[i * c + j] += gout[i * c + j] - p * gsum;
                        }
                    }
                }
            }
            Op::LayerNorm { a, affine, inv_std, xhat } => {
                let (a, affine) = (*a, *affine);
                let d = *self.nodes[idx].shape.last().unwrap();
                let rows = self.nodes[idx].data.len() / d;
                let gain: Option<&[F]> = affine.map(|(g, _)| self.nodes[g.0].data.as_slice());
                let inv_d = F::ONE / F::from_usize(d);
                if self.seed_into(seeds, a) {
                    let ga = seeds[a.0].as_mut().unwrap();
                    for i in 0..rows {
                        let mut mean_gy = F::ZERO;
                        let mut mean_gy_xhat = F::ZERO;
                        for j in 0..d {
                            let gy = match gain {
                                Some(g) => gout[i * d + j] * g[j],
                                None => gout[i * d + j],
                            };
                            mean_gy += gy;
                            mean_gy_xhat += gy * xhat[i * d + j];
                        }
                        mean_gy = mean_gy * inv_d;
                        mean_gy_xhat = mean_gy_xhat * inv_d;
                        for j in 0..d {
                            let gy = match gain {
                                Some(g) => gout[i * d + j] * g[j],
                                None => gout[i * d + j],
                            };
                            ga[i * d + j] += (gy - mean_gy - xhat[i * d + j] * mean_gy_xhat) * inv_std[i];
                        }
                    }
                }
                if let Some((g, b)) = affine {
                    if self.seed_into(seeds, g) {
                        let gg = seeds[g.0].as_mut().unwrap();
                        for i in 0..rows {
                            for j in 0..d {
                                gg[j] += gout[i * d + j] * xhat[i * d + j];
                            }
                        }
                    }
                    if self.seed_into(seeds, b) {
                        let gb = seeds[b.0].as_mut().unwrap();
                        for i in 0..rows {
                            for j in 0..d {
                                gb[j] += gout[i * d + j];
                            }
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let (table, ids) = (*table, ids.clone());
                let d = self.nodes[table.0].shape[1];
                if self.seed_into(seeds, table) {
                    let gt = seeds[table.0].as_mut().unwrap();
                    for (row, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += gout[row * d + j];
                        }
                    }
                }
            }
            Op::SliceCols { a, start, len } => {
                let (a, start, len) = (*a, *start, *len);
                let c = self.nodes[a.0].shape[1];
                let r = self.nodes[a.0].shape[0];
                if self.seed_into(seeds, a) {
                    let ga = seeds[a.0].as_mut().unwrap();
                    for i in 0..r {
                        for j in 0..len {
                            ga[i * c + start + j] += gout[i * len + j];
                        }
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let parts = parts.clone();
                let r = self.nodes[idx].shape[0];
                let total = self.nodes[idx].shape[1];
                let mut col = 0usize;
                for p in parts {
                    let w = self.nodes[p.0].shape[1];
                    if self.seed_into(seeds, p) {
                        let gp = seeds[p.0].as_mut().unwrap();
                        for i in 0..r {
                            for j in 0..w {
                                gp[i * w + j] += gout[i * total + col + j];
                            }
                        }
                    }
                    col += w;
                }
            }
            Op::PoolMeanRows { a, window } => {
                let (a, window) = (*a, *window);
                let (t, f) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let out_rows = t.div_ceil(window);
                if self.seed_into(seeds, a) {
                    let ga = seeds[a.0].as_mut().unwrap();
                    for w in 0..out_rows {
                        let lo = w * window;
                        let hi = (lo + window).min(t);
                        let inv = F::ONE / F::from_usize(hi - lo);
                        for row in lo..hi {
                            for j in 0..f {
                                ga[row * f + j] += gout[w * f + j] * inv;
                            }
                        }
                    }
                }
            }
            Op::SumAll { a } => {
                let a = *a;
                if self.seed_into(seeds, a) {
                    let ga = seeds[a.0].as_mut().unwrap();
                    let s = gout[0];
                    for g in ga.iter_mut() {
                        *g += s;
                    }
                }
            }
            Op::RowSum { a } => {
                let a = *a;
                let (r, c) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                if self.seed_into(seeds, a) {
                    let ga = seeds[a.0].as_mut().unwrap();
                    for i in 0..r {
                        let s = gout[i];
                        for j in 0..c {
                            ga[i * c + j] += s;
                        }
                    }
                }
            }
            Op::GatherRows { a, ids } => {
                let (a, ids) = (*a, ids.clone());
                let c = self.nodes[a.0].shape[1];
                if self.seed_into(seeds, a) {
                    let ga = seeds[a.0].as_mut().unwrap();
                    for (i, &id) in ids.iter().enumerate() {
                        ga[i * c + id] += gout[i];
                    }
                }
            }
        }
    }
}

/// Iterator over the 1-D lanes of `shape` along `axis`.
struct Lanes {
    outer: usize,
    inner: usize,
    len: usize,
    cur: usize,
}

struct Lane {
    base: usize,
    stride: usize,
    len: usize,
}

impl Lane {
    #[inline]
    fn offset(&self, j: usize) -> usize {
        self.base + j * self.stride
    }
}

impl Lanes {
    fn of(shape: &[usize], axis: usize) -> Self {
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        Lanes { outer, inner, len: shape[axis], cur: 0 }
    }
}

impl Iterator for Lanes {
    type Item = Lane;

    fn next(&mut self) -> Option<Lane> {
        if self.cur >= self.outer * self.inner {
            return None;
        }
        let o = self.cur / self.inner;
        let i = self.cur % self.inner;
        self.cur += 1;
        Some(Lane { base: o * self.len * self.inner + i, stride: self.inner, len: self.len })
    }
}
