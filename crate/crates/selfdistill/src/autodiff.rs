//! Minimal reverse-mode automatic differentiation over a flat tape.
//!
//! Ops are coarse (matmul, layernorm, softmax, fused loss reductions) so the
//! tape stays short and the hot loops vectorize. Values are computed eagerly
//! at node creation; `backward` walks the tape in reverse creation order,
//! which is a valid topological order by construction. Reduction order is
//! fixed, so gradients are bit-reproducible for identical inputs.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Token-level divergence between a student and a teacher distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceKind {
    ForwardKl,
    ReverseKl,
    WeightedJsd,
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tid(pub usize);

enum Op<T> {
    LeafParam,
    LeafConst,
    GatherRows { src: Tid, ids: Vec<usize> },
    SliceRows { src: Tid, start: usize },
    SliceCols { src: Tid, start: usize },
    ConcatCols { parts: Vec<Tid> },
    Add { a: Tid, b: Tid },
    AddRow { a: Tid, bias: Tid },
    Scale { a: Tid, c: T },
    MatMulNN { a: Tid, b: Tid },
    MatMulNT { a: Tid, b: Tid },
    Gelu { a: Tid },
    LayerNorm { a: Tid, gain: Tid, bias: Tid, cache: Vec<(T, T)> },
    CausalSoftmax { scores: Tid },
    LogSoftmaxRows { a: Tid },
    GatherRowCols { a: Tid, cols: Vec<usize> },
    DivergenceRows { logp: Tid, teacher_logp: Vec<T>, kind: DivergenceKind, alpha: T, mix_cache: Vec<T> },
    ClipRows { a: Tid, kappa: T },
    HingeSum { a: Tid, pos: Vec<T>, neg: Vec<T>, mask: Vec<T>, margin: T },
    SquaredDiffMaskedSum { a: Tid, target: Vec<T>, mask: Vec<T> },
    DotConst { a: Tid, w: Vec<T> },
    SquareSum { a: Tid },
    Affine { parts: Vec<(Tid, T)>, bias: T },
}

struct Node<T> {
    rows: usize,
    cols: usize,
    value: Vec<T>,
    op: Op<T>,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Per-node gradients produced by [`Tape::backward`]. Only `LeafParam`
/// gradients are retained.
pub struct Grads<T> {
    by_node: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, t: Tid) -> Option<&[T]> {
        self.by_node[t.0].as_deref()
    }
}

const LN_EPS: f64 = 1e-5;

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<T>, op: Op<T>) -> Tid {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node { rows, cols, value, op });
        Tid(self.nodes.len() - 1)
    }

    pub fn value(&self, t: Tid) -> &[T] {
        &self.nodes[t.0].value
    }

    pub fn scalar(&self, t: Tid) -> T {
        debug_assert_eq!(self.nodes[t.0].value.len(), 1);
        self.nodes[t.0].value[0]
    }

    pub fn shape(&self, t: Tid) -> (usize, usize) {
        (self.nodes[t.0].rows, self.nodes[t.0].cols)
    }

    pub fn leaf_param(&mut self, rows: usize, cols: usize, value: &[T]) -> Tid {
        self.push(rows, cols, value.to_vec(), Op::LeafParam)
    }

    pub fn leaf_const(&mut self, rows: usize, cols: usize, value: &[T]) -> Tid {
        self.push(rows, cols, value.to_vec(), Op::LeafConst)
    }

    pub fn gather_rows(&mut self, src: Tid, ids: &[usize]) -> Tid {
        let (r, c) = self.shape(src);
        let mut v = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            debug_assert!(id < r);
            v.extend_from_slice(&self.nodes[src.0].value[id * c..(id + 1) * c]);
        }
        self.push(ids.len(), c, v, Op::GatherRows { src, ids: ids.to_vec() })
    }

    pub fn slice_rows(&mut self, src: Tid, start: usize, rows: usize) -> Tid {
        let (r, c) = self.shape(src);
        debug_assert!(start + rows <= r);
        let v = self.nodes[src.0].value[start * c..(start + rows) * c].to_vec();
        self.push(rows, c, v, Op::SliceRows { src, start })
    }

    pub fn slice_cols(&mut self, src: Tid, start: usize, cols: usize) -> Tid {
        let (r, c) = self.shape(src);
        debug_assert!(start + cols <= c);
        let mut v = Vec::with_capacity(r * cols);
        for i in 0..r {
            v.extend_from_slice(&self.nodes[src.0].value[i * c + start..i * c + start + cols]);
        }
        self.push(r, cols, v, Op::SliceCols { src, start })
    }

    pub fn concat_cols(&mut self, parts: &[Tid]) -> Tid {
        let rows = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut v = vec![T::zero(); rows * total];
        let mut off = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            debug_assert_eq!(r, rows);
            for i in 0..rows {
                v[i * total + off..i * total + off + c]
                    .copy_from_slice(&self.nodes[p.0].value[i * c..(i + 1) * c]);
            }
            off += c;
        }
        self.push(rows, total, v, Op::ConcatCols { parts: parts.to_vec() })
    }

    pub fn add(&mut self, a: Tid, b: Tid) -> Tid {
        let (r, c) = self.shape(a);
        debug_assert_eq!(self.shape(b), (r, c));
        let v: Vec<T> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| x + y)
            .collect();
        self.push(r, c, v, Op::Add { a, b })
    }

    pub fn add_row(&mut self, a: Tid, bias: Tid) -> Tid {
        let (r, c) = self.shape(a);
        debug_assert_eq!(self.shape(bias), (1, c));
        let mut v = self.nodes[a.0].value.clone();
        for i in 0..r {
            for (x, &b) in v[i * c..(i + 1) * c].iter_mut().zip(&self.nodes[bias.0].value) {
                *x += b;
            }
        }
        self.push(r, c, v, Op::AddRow { a, bias })
    }

    pub fn scale(&mut self, a: Tid, c0: T) -> Tid {
        let (r, c) = self.shape(a);
        let v: Vec<T> = self.nodes[a.0].value.iter().map(|&x| x * c0).collect();
        self.push(r, c, v, Op::Scale { a, c: c0 })
    }

    pub fn matmul_nn(&mut self, a: Tid, b: Tid) -> Tid {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        debug_assert_eq!(k, k2);
        let mut v = vec![T::zero(); m * n];
        kernel_nn(&self.nodes[a.0].value, &self.nodes[b.0].value, m, k, n, &mut v);
        self.push(m, n, v, Op::MatMulNN { a, b })
    }

    pub fn matmul_nt(&mut self, a: Tid, b: Tid) -> Tid {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        debug_assert_eq!(k, k2);
        let mut v = vec![T::zero(); m * n];
        kernel_nt(&self.nodes[a.0].value, &self.nodes[b.0].value, m, k, n, &mut v);
        self.push(m, n, v, Op::MatMulNT { a, b })
    }

    pub fn gelu(&mut self, a: Tid) -> Tid {
        let (r, c) = self.shape(a);
        let v: Vec<T> = self.nodes[a.0].value.iter().map(|&x| gelu_fwd(x)).collect();
        self.push(r, c, v, Op::Gelu { a })
    }

    pub fn layer_norm(&mut self, a: Tid, gain: Tid, bias: Tid) -> Tid {
        let (r, c) = self.shape(a);
        debug_assert_eq!(self.shape(gain), (1, c));
        debug_assert_eq!(self.shape(bias), (1, c));
        let mut v = vec![T::zero(); r * c];
        let mut cache = Vec::with_capacity(r);
        let inv_n = T::from_f64(1.0 / c as f64);
        let eps = T::from_f64(LN_EPS);
        for i in 0..r {
            let row = &self.nodes[a.0].value[i * c..(i + 1) * c];
            let mut mean = T::zero();
            for &x in row {
                mean += x;
            }
            mean = mean * inv_n;
            let mut var = T::zero();
            for &x in row {
                let d = x - mean;
                var += d * d;
            }
            var = var * inv_n;
            let inv_std = (var + eps).sqrt().recip();
            cache.push((mean, inv_std));
            let g = &self.nodes[gain.0].value;
            let b = &self.nodes[bias.0].value;
            for j in 0..c {
                v[i * c + j] = (row[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        self.push(r, c, v, Op::LayerNorm { a, gain, bias, cache })
    }

    /// Row-wise softmax over a square score matrix where row `i` may attend
    /// to columns `0..=i` only; masked entries are exactly zero.
    pub fn causal_softmax(&mut self, scores: Tid) -> Tid {
        let (r, c) = self.shape(scores);
        debug_assert_eq!(r, c);
        let mut v = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &self.nodes[scores.0].value[i * c..i * c + i + 1];
            let mut mx = row[0];
            for &x in row {
                if x > mx {
                    mx = x;
                }
            }
            let mut sum = T::zero();
            for (j, &x) in row.iter().enumerate() {
                let e = (x - mx).exp();
                v[i * c + j] = e;
                sum += e;
            }
            let inv = sum.recip();
            for x in &mut v[i * c..i * c + i + 1] {
                *x = *x * inv;
            }
        }
        self.push(r, c, v, Op::CausalSoftmax { scores })
    }

    pub fn log_softmax_rows(&mut self, a: Tid) -> Tid {
        let (r, c) = self.shape(a);
        let mut v = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &self.nodes[a.0].value[i * c..(i + 1) * c];
            log_softmax_row(row, &mut v[i * c..(i + 1) * c]);
        }
        self.push(r, c, v, Op::LogSoftmaxRows { a })
    }

    pub fn gather_row_cols(&mut self, a: Tid, cols: &[usize]) -> Tid {
        let (r, c) = self.shape(a);
        debug_assert_eq!(cols.len(), r);
        let v: Vec<T> = cols
            .iter()
            .enumerate()
            .map(|(i, &j)| {
                debug_assert!(j < c);
                self.nodes[a.0].value[i * c + j]
            })
            .collect();
        self.push(r, 1, v, Op::GatherRowCols { a, cols: cols.to_vec() })
    }

    /// Per-row divergence between the taped student log-distribution and a
    /// constant teacher log-distribution of the same shape.
    pub fn divergence_rows(
        &mut self,
        logp: Tid,
        teacher_logp: &[T],
        kind: DivergenceKind,
        alpha: T,
    ) -> Tid {
        let (r, c) = self.shape(logp);
        debug_assert_eq!(teacher_logp.len(), r * c);
        let ls_all = &self.nodes[logp.0].value;
        let mut v = vec![T::zero(); r];
        let mut mix_cache = Vec::new();
        match kind {
            DivergenceKind::ForwardKl => {
                for i in 0..r {
                    let mut acc = T::zero();
                    for j in 0..c {
                        let lt = teacher_logp[i * c + j];
                        let t = lt.exp();
                        acc += t * (lt - ls_all[i * c + j]);
                    }
                    v[i] = acc;
                }
            }
            DivergenceKind::ReverseKl => {
                for i in 0..r {
                    let mut acc = T::zero();
                    for j in 0..c {
                        let ls = ls_all[i * c + j];
                        acc += ls.exp() * (ls - teacher_logp[i * c + j]);
                    }
                    v[i] = acc;
                }
            }
            DivergenceKind::WeightedJsd => {
                let la = alpha.ln();
                let l1a = (T::one() - alpha).ln();
                mix_cache = vec![T::zero(); r * c];
                for i in 0..r {
                    let mut acc = T::zero();
                    for j in 0..c {
                        let ls = ls_all[i * c + j];
                        let lt = teacher_logp[i * c + j];
                        let lm = log_add_exp(l1a + ls, la + lt);
                        mix_cache[i * c + j] = lm;
                        acc += alpha * lt.exp() * (lt - lm)
                            + (T::one() - alpha) * ls.exp() * (ls - lm);
                    }
                    // tiny negative residue from rounding is clamped at zero
                    v[i] = if acc < T::zero() { T::zero() } else { acc };
                }
            }
        }
        self.push(
            r,
            1,
            v,
            Op::DivergenceRows {
                logp,
                teacher_logp: teacher_logp.to_vec(),
                kind,
                alpha,
                mix_cache,
            },
        )
    }

    pub fn clip_rows(&mut self, a: Tid, kappa: T) -> Tid {
        let (r, c) = self.shape(a);
        debug_assert_eq!(c, 1);
        let v: Vec<T> = self.nodes[a.0]
            .value
            .iter()
            .map(|&x| if x < kappa { x } else { kappa })
            .collect();
        self.push(r, 1, v, Op::ClipRows { a, kappa })
    }

    /// `sum_t mask_t * max(0, margin + |a_t - pos_t| - |a_t - neg_t|)`.
    pub fn hinge_sum(&mut self, a: Tid, pos: &[T], neg: &[T], mask: &[T], margin: T) -> Tid {
        let (r, c) = self.shape(a);
        debug_assert_eq!(c, 1);
        debug_assert_eq!(pos.len(), r);
        let av = &self.nodes[a.0].value;
        let mut acc = T::zero();
        for t in 0..r {
            let d_pos = (av[t] - pos[t]).abs();
            let d_neg = (av[t] - neg[t]).abs();
            let h = margin + d_pos - d_neg;
            if h > T::zero() {
                acc += mask[t] * h;
            }
        }
        self.push(
            1,
            1,
            vec![acc],
            Op::HingeSum {
                a,
                pos: pos.to_vec(),
                neg: neg.to_vec(),
                mask: mask.to_vec(),
                margin,
            },
        )
    }

    /// `sum_t mask_t * ||a_t - target_t||^2` over rows.
    pub fn squared_diff_masked_sum(&mut self, a: Tid, target: &[T], mask: &[T]) -> Tid {
        let (r, c) = self.shape(a);
        debug_assert_eq!(target.len(), r * c);
        debug_assert_eq!(mask.len(), r);
        let av = &self.nodes[a.0].value;
        let mut acc = T::zero();
        for t in 0..r {
            let mut row = T::zero();
            for j in 0..c {
                let d = av[t * c + j] - target[t * c + j];
                row += d * d;
            }
            acc += mask[t] * row;
        }
        self.push(
            1,
            1,
            vec![acc],
            Op::SquaredDiffMaskedSum { a, target: target.to_vec(), mask: mask.to_vec() },
        )
    }

    pub fn dot_const(&mut self, a: Tid, w: &[T]) -> Tid {
        debug_assert_eq!(self.nodes[a.0].value.len(), w.len());
        let mut acc = T::zero();
        for (&x, &c) in self.nodes[a.0].value.iter().zip(w) {
            acc += x * c;
        }
        self.push(1, 1, vec![acc], Op::DotConst { a, w: w.to_vec() })
    }

    pub fn square_sum(&mut self, a: Tid) -> Tid {
        let mut acc = T::zero();
        for &x in &self.nodes[a.0].value {
            acc += x * x;
        }
        self.push(1, 1, vec![acc], Op::SquareSum { a })
    }

    /// `sum_i c_i * parts_i + bias` over scalar nodes.
    pub fn affine(&mut self, parts: &[(Tid, T)], bias: T) -> Tid {
        let mut acc = bias;
        for &(t, c) in parts {
            debug_assert_eq!(self.nodes[t.0].value.len(), 1);
            acc += self.nodes[t.0].value[0] * c;
        }
        self.push(1, 1, vec![acc], Op::Affine { parts: parts.to_vec(), bias })
    }

    /// Reverse pass from a scalar loss node. Returns gradients for every
    /// `LeafParam` node reachable from `loss`.
    pub fn backward(&self, loss: Tid) -> Grads<T> {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "loss must be scalar");
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::LeafParam => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::LeafConst => continue,
                Op::GatherRows { src, ids } => {
                    let (sr, sc) = self.shape(*src);
                    let dst = ensure(&mut grads, src.0, sr * sc);
                    for (out_row, &id) in ids.iter().enumerate() {
                        for j in 0..sc {
                            dst[id * sc + j] += g[out_row * sc + j];
                        }
                    }
                }
                Op::SliceRows { src, start } => {
                    let (sr, sc) = self.shape(*src);
                    let dst = ensure(&mut grads, src.0, sr * sc);
                    for (k, &gv) in g.iter().enumerate() {
                        dst[start * sc + k] += gv;
                    }
                }
                Op::SliceCols { src, start } => {
                    let (sr, sc) = self.shape(*src);
                    let cols = node.cols;
                    let dst = ensure(&mut grads, src.0, sr * sc);
                    for i2 in 0..node.rows {
                        for j in 0..cols {
                            dst[i2 * sc + start + j] += g[i2 * cols + j];
                        }
                    }
                }
                Op::ConcatCols { parts } => {
                    let total = node.cols;
                    let mut off = 0;
                    for &p in parts {
                        let (pr, pc) = self.shape(p);
                        let dst = ensure(&mut grads, p.0, pr * pc);
                        for i2 in 0..pr {
                            for j in 0..pc {
                                dst[i2 * pc + j] += g[i2 * total + off + j];
                            }
                        }
                        off += pc;
                    }
                }
                Op::Add { a, b } => {
                    add_all(&mut grads, a.0, &g);
                    add_all(&mut grads, b.0, &g);
                }
                Op::AddRow { a, bias } => {
                    add_all(&mut grads, a.0, &g);
                    let c = node.cols;
                    let dst = ensure(&mut grads, bias.0, c);
                    for i2 in 0..node.rows {
                        for j in 0..c {
                            dst[j] += g[i2 * c + j];
                        }
                    }
                }
                Op::Scale { a, c } => {
                    let c = *c;
                    let dst = ensure(&mut grads, a.0, g.len());
                    for (d, &gv) in dst.iter_mut().zip(&g) {
                        *d += c * gv;
                    }
                }
                Op::MatMulNN { a, b } => {
                    let (m, k) = self.shape(*a);
                    let n = node.cols;
                    {
                        let dst = ensure(&mut grads, a.0, m * k);
                        kernel_nt(&g, &self.nodes[b.0].value, m, n, k, dst);
                    }
                    {
                        let dst = ensure(&mut grads, b.0, k * n);
                        kernel_tn(&self.nodes[a.0].value, &g, m, k, n, dst);
                    }
                }
                Op::MatMulNT { a, b } => {
                    let (m, k) = self.shape(*a);
                    let n = node.cols;
                    {
                        let dst = ensure(&mut grads, a.0, m * k);
                        kernel_nn(&g, &self.nodes[b.0].value, m, n, k, dst);
                    }
                    {
                        let dst = ensure(&mut grads, b.0, n * k);
                        kernel_tn(&g, &self.nodes[a.0].value, m, n, k, dst);
                    }
                }
                Op::Gelu { a } => {
                    let dst = ensure(&mut grads, a.0, g.len());
                    for ((d, &x), &gv) in dst.iter_mut().zip(&self.nodes[a.0].value).zip(&g) {
                        *d += gelu_bwd(x) * gv;
                    }
                }
                Op::LayerNorm { a, gain, bias, cache } => {
                    let (r, c) = self.shape(*a);
                    let inv_n = T::from_f64(1.0 / c as f64);
                    let gv = &self.nodes[gain.0].value;
                    let av = &self.nodes[a.0].value;
                    {
                        let dg = ensure(&mut grads, gain.0, c);
                        for i2 in 0..r {
                            let (mean, inv_std) = cache[i2];
                            for j in 0..c {
                                let xhat = (av[i2 * c + j] - mean) * inv_std;
                                dg[j] += g[i2 * c + j] * xhat;
                            }
                        }
                    }
                    {
                        let db = ensure(&mut grads, bias.0, c);
                        for i2 in 0..r {
                            for j in 0..c {
                                db[j] += g[i2 * c + j];
                            }
                        }
                    }
                    {
                        let da = ensure(&mut grads, a.0, r * c);
                        for i2 in 0..r {
                            let (mean, inv_std) = cache[i2];
                            let mut sum_dxhat = T::zero();
                            let mut sum_dxhat_xhat = T::zero();
                            for j in 0..c {
                                let xhat = (av[i2 * c + j] - mean) * inv_std;
                                let dxhat = g[i2 * c + j] * gv[j];
                                sum_dxhat += dxhat;
                                sum_dxhat_xhat += dxhat * xhat;
                            }
                            let mean_dxhat = sum_dxhat * inv_n;
                            let mean_dxhat_xhat = sum_dxhat_xhat * inv_n;
                            for j in 0..c {
                                let xhat = (av[i2 * c + j] - mean) * inv_std;
                                let dxhat = g[i2 * c + j] * gv[j];
                                da[i2 * c + j] +=
                                    (dxhat - mean_dxhat - xhat * mean_dxhat_xhat) * inv_std;
                            }
                        }
                    }
                }
                Op::CausalSoftmax { scores } => {
                    let (r, c) = self.shape(*scores);
                    let pv = &node.value;
                    let dst = ensure(&mut grads, scores.0, r * c);
                    for i2 in 0..r {
                        let mut dot = T::zero();
                        for j in 0..=i2 {
                            dot += g[i2 * c + j] * pv[i2 * c + j];
                        }
                        for j in 0..=i2 {
                            dst[i2 * c + j] += pv[i2 * c + j] * (g[i2 * c + j] - dot);
                        }
                    }
                }
                Op::LogSoftmaxRows { a } => {
                    let (r, c) = self.shape(*a);
                    let yv = &node.value;
                    let dst = ensure(&mut grads, a.0, r * c);
                    for i2 in 0..r {
                        let mut sum = T::zero();
                        for j in 0..c {
                            sum += g[i2 * c + j];
                        }
                        for j in 0..c {
                            let p = yv[i2 * c + j].exp();
                            dst[i2 * c + j] += g[i2 * c + j] - p * sum;
                        }
                    }
                }
                Op::GatherRowCols { a, cols } => {
                    let (r, c) = self.shape(*a);
                    let dst = ensure(&mut grads, a.0, r * c);
                    for (i2, &j) in cols.iter().enumerate() {
                        dst[i2 * c + j] += g[i2];
                    }
                }
                Op::DivergenceRows { logp, teacher_logp, kind, alpha, mix_cache } => {
                    let (r, c) = self.shape(*logp);
                    let ls_all = &self.nodes[logp.0].value;
                    let dst = ensure(&mut grads, logp.0, r * c);
                    match kind {
                        DivergenceKind::ForwardKl => {
                            for i2 in 0..r {
                                let gi = g[i2];
                                for j in 0..c {
                                    dst[i2 * c + j] -= gi * teacher_logp[i2 * c + j].exp();
                                }
                            }
                        }
                        DivergenceKind::ReverseKl => {
                            for i2 in 0..r {
                                let gi = g[i2];
                                for j in 0..c {
                                    let ls = ls_all[i2 * c + j];
                                    let lt = teacher_logp[i2 * c + j];
                                    dst[i2 * c + j] += gi * ls.exp() * (ls - lt + T::one());
                                }
                            }
                        }
                        DivergenceKind::WeightedJsd => {
                            let one_m_a = T::one() - *alpha;
                            for i2 in 0..r {
                                let gi = g[i2];
                                for j in 0..c {
                                    let ls = ls_all[i2 * c + j];
                                    let lm = mix_cache[i2 * c + j];
                                    dst[i2 * c + j] += gi * one_m_a * ls.exp() * (ls - lm);
                                }
                            }
                        }
                    }
                }
                Op::ClipRows { a, kappa } => {
                    let av = &self.nodes[a.0].value;
                    let dst = ensure(&mut grads, a.0, av.len());
                    for (i2, (&x, &gv)) in av.iter().zip(&g).enumerate() {
                        if x <= *kappa {
                            dst[i2] += gv;
                        }
                    }
                }
                Op::HingeSum { a, pos, neg, mask, margin } => {
                    let av = &self.nodes[a.0].value;
                    let g0 = g[0];
                    let dst = ensure(&mut grads, a.0, av.len());
                    for t in 0..av.len() {
                        let dp = av[t] - pos[t];
                        let dn = av[t] - neg[t];
                        if *margin + dp.abs() - dn.abs() > T::zero() {
                            dst[t] += g0 * mask[t] * (sgn(dp) - sgn(dn));
                        }
                    }
                }
                Op::SquaredDiffMaskedSum { a, target, mask } => {
                    let (r, c) = self.shape(*a);
                    let av = &self.nodes[a.0].value;
                    let g0 = g[0];
                    let two = T::from_f64(2.0);
                    let dst = ensure(&mut grads, a.0, r * c);
                    for t in 0..r {
                        let m = mask[t];
                        for j in 0..c {
                            dst[t * c + j] +=
                                g0 * two * m * (av[t * c + j] - target[t * c + j]);
                        }
                    }
                }
                Op::DotConst { a, w } => {
                    let g0 = g[0];
                    let dst = ensure(&mut grads, a.0, w.len());
                    for (d, &c) in dst.iter_mut().zip(w) {
                        *d += g0 * c;
                    }
                }
                Op::SquareSum { a } => {
                    let g0 = g[0];
                    let two = T::from_f64(2.0);
                    let av = &self.nodes[a.0].value;
                    let dst = ensure(&mut grads, a.0, av.len());
                    for (d, &x) in dst.iter_mut().zip(av) {
                        *d += g0 * two * x;
                    }
                }
                Op::Affine { parts, .. } => {
                    let g0 = g[0];
                    for &(t, c) in parts {
                        let dst = ensure(&mut grads, t.0, 1);
                        dst[0] += g0 * c;
                    }
                }
            }
        }
        Grads { by_node: grads }
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// A tape attached to one parameter vector: tensors register lazily as
/// `LeafParam` nodes and are shared across every graph built on the tape, so
/// gradients accumulate across a whole batch in one backward pass.
pub struct ParamTape<'a, T: Scalar> {
    pub tape: &'a mut Tape<T>,
    pub arch: &'a crate::model::ArchConfig,
    params: &'a crate::params::PolicyParameters<T>,
    leaves: Vec<(usize, Tid)>,
}

impl<'a, T: Scalar> ParamTape<'a, T> {
    pub fn attach(tape: &'a mut Tape<T>, params: &'a crate::params::PolicyParameters<T>) -> Self {
        ParamTape { tape, arch: &params.arch, params, leaves: Vec::new() }
    }

    /// Node for a named parameter tensor, registering it on first use.
    pub fn leaf(&mut self, name: &str) -> Tid {
        let entry_idx = self
            .params
            .shape_table
            .entries
            .iter()
            .position(|e| e.name == name)
            .unwrap_or_else(|| panic!("unknown parameter tensor {name}"));
        if let Some(&(_, tid)) = self.leaves.iter().find(|(i, _)| *i == entry_idx) {
            return tid;
        }
        let e = &self.params.shape_table.entries[entry_idx];
        let tid = self.tape.leaf_param(
            e.rows,
            e.cols,
            &self.params.values[e.offset..e.offset + e.rows * e.cols],
        );
        self.leaves.push((entry_idx, tid));
        tid
    }

    /// Assembles per-leaf gradients into a flat vector aligned with the
    /// parameter vector; tensors that never entered the graph stay zero.
    pub fn flat_grad(&self, grads: &Grads<T>) -> Vec<T> {
        let mut out = vec![T::zero(); self.params.values.len()];
        for &(entry_idx, tid) in &self.leaves {
            if let Some(g) = grads.get(tid) {
                let e = &self.params.shape_table.entries[entry_idx];
                out[e.offset..e.offset + g.len()].copy_from_slice(g);
            }
        }
        out
    }
}

fn ensure<T: Scalar>(grads: &mut [Option<Vec<T>>], id: usize, len: usize) -> &mut Vec<T> {
    let slot = &mut grads[id];
    if slot.is_none() {
        *slot = Some(vec![T::zero(); len]);
    }
    slot.as_mut().unwrap()
}

fn add_all<T: Scalar>(grads: &mut [Option<Vec<T>>], id: usize, g: &[T]) {
    let dst = ensure(grads, id, g.len());
    for (d, &x) in dst.iter_mut().zip(g) {
        *d += x;
    }
}

fn sgn<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// `ln(e^a + e^b)` without overflow.
pub fn log_add_exp<T: Scalar>(a: T, b: T) -> T {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if hi == T::neg_infinity() {
        return T::neg_infinity();
    }
    hi + (lo - hi).exp().ln_1p()
}

/// Numerically stable log-softmax of one row.
pub fn log_softmax_row<T: Scalar>(row: &[T], out: &mut [T]) {
    let mut mx = row[0];
    for &x in row {
        if x > mx {
            mx = x;
        }
    }
    let mut sum = T::zero();
    for &x in row {
        sum += (x - mx).exp();
    }
    let lse = mx + sum.ln();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = x - lse;
    }
}

// Shared matmul kernels; used by both the tape and the plain forward paths.
// Loop orders are chosen so the inner loop is a contiguous axpy or dot.

pub fn kernel_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            let brow = &b[l * n..(l + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub fn kernel_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

pub fn kernel_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    // out[l, j] += sum_i a[i, l] * b[i, j]; out is k x n
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            let orow = &mut out[l * n..(l + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn gelu_fwd<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.7978845608028654); // sqrt(2/pi)
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let u = c * (x + k * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_bwd<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.7978845608028654);
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + k * x * x * x);
    let th = u.tanh();
    let sech2 = T::one() - th * th;
    half * (T::one() + th) + half * x * sech2 * c * (T::one() + three * k * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    // Central finite differences over an arbitrary closure of the leaf values.
    fn finite_diff(f: &dyn Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            let orig = xp[i];
            xp[i] = orig + eps;
            let fp = f(&xp);
            xp[i] = orig - eps;
            let fm = f(&xp);
            xp[i] = orig;
            g[i] = (fp - fm) / (2.0 * eps);
        }
        g
    }

    fn assert_grad_close(analytic: &[f64], numeric: &[f64], tol: f64) {
        let mut num = 0.0;
        let mut den = 0.0f64;
        for (a, n) in analytic.iter().zip(numeric) {
            num += (a - n) * (a - n);
            den = den.max(a.abs()).max(n.abs());
        }
        let rel = num.sqrt() / den.max(1e-12) / (analytic.len() as f64).sqrt();
        assert!(rel < tol, "gradient mismatch: rel={rel:.3e}");
    }

    fn check_scalar_loss(build: impl Fn(&mut Tape<f64>, Tid) -> Tid, x: &[f64], shape: (usize, usize)) {
        let f = |vals: &[f64]| {
            let mut tape = Tape::new();
            let p = tape.leaf_param(shape.0, shape.1, vals);
            let loss = build(&mut tape, p);
            tape.scalar(loss)
        };
        let mut tape = Tape::new();
        let p = tape.leaf_param(shape.0, shape.1, x);
        let loss = build(&mut tape, p);
        let grads = tape.backward(loss);
        let analytic = grads.get(p).expect("param grad");
        let numeric = finite_diff(&f, x, 1e-6);
        assert_grad_close(analytic, &numeric, 1e-7);
    }

    fn demo_vals(n: usize) -> Vec<f64> {
        (0..n).map(|i| ((i * 37 + 11) % 17) as f64 / 7.0 - 1.1).collect()
    }

    #[test]
    fn matmul_chain_gradient() {
        let x = demo_vals(6);
        check_scalar_loss(
            |tape, p| {
                let w = tape.leaf_const(3, 2, &demo_vals(6)[..]);
                let y = tape.matmul_nn(p, w); // 2x3 * 3x2
                let z = tape.matmul_nt(y, w); // 2x2 * (3x2)^T -> 2x3
                tape.square_sum(z)
            },
            &x,
            (2, 3),
        );
    }

    #[test]
    fn layernorm_gelu_gradient() {
        let x = demo_vals(8);
        check_scalar_loss(
            |tape, p| {
                let g = tape.leaf_const(1, 4, &[1.1, 0.9, 1.0, 1.2]);
                let b = tape.leaf_const(1, 4, &[0.1, -0.2, 0.0, 0.05]);
                let ln = tape.layer_norm(p, g, b);
                let ge = tape.gelu(ln);
                tape.square_sum(ge)
            },
            &x,
            (2, 4),
        );
    }

    #[test]
    fn layernorm_gain_bias_gradient() {
        let gains = [1.1, 0.9, 1.0, 1.2];
        let f = |g_vals: &[f64]| {
            let mut tape = Tape::<f64>::new();
            let x = tape.leaf_const(2, 4, &demo_vals(8));
            let g = tape.leaf_param(1, 4, g_vals);
            let b = tape.leaf_const(1, 4, &[0.1, -0.2, 0.0, 0.05]);
            let ln = tape.layer_norm(x, g, b);
            let loss = tape.square_sum(ln);
            tape.scalar(loss)
        };
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf_const(2, 4, &demo_vals(8));
        let g = tape.leaf_param(1, 4, &gains);
        let b = tape.leaf_const(1, 4, &[0.1, -0.2, 0.0, 0.05]);
        let ln = tape.layer_norm(x, g, b);
        let loss = tape.square_sum(ln);
        let grads = tape.backward(loss);
        let numeric = finite_diff(&f, &gains, 1e-6);
        assert_grad_close(grads.get(g).unwrap(), &numeric, 1e-7);
    }

    #[test]
    fn causal_softmax_gradient() {
        let x = demo_vals(9);
        check_scalar_loss(
            |tape, p| {
                let sm = tape.causal_softmax(p);
                let w: Vec<f64> = (0..9).map(|i| (i as f64) * 0.3 - 1.0).collect();
                tape.dot_const(sm, &w)
            },
            &x,
            (3, 3),
        );
    }

    #[test]
    fn log_softmax_and_gather_gradient() {
        let x = demo_vals(12);
        check_scalar_loss(
            |tape, p| {
                let ls = tape.log_softmax_rows(p);
                let picked = tape.gather_row_cols(ls, &[1, 3, 0]);
                let w = [0.5, 1.0, -0.25];
                tape.dot_const(picked, &w)
            },
            &x,
            (3, 4),
        );
    }

    #[test]
    fn divergence_rows_gradients_all_kinds() {
        // teacher log-distribution rows (normalized)
        let mut teacher = vec![0.0; 8];
        for i in 0..2 {
            let raw = [0.3 + i as f64, -0.1, 0.7, 0.2 * i as f64];
            log_softmax_row(&raw, &mut teacher[i * 4..(i + 1) * 4]);
        }
        for kind in [
            DivergenceKind::ForwardKl,
            DivergenceKind::ReverseKl,
            DivergenceKind::WeightedJsd,
        ] {
            let x = demo_vals(8);
            let teacher = teacher.clone();
            check_scalar_loss(
                move |tape, p| {
                    let ls = tape.log_softmax_rows(p);
                    let d = tape.divergence_rows(ls, &teacher, kind, 0.3);
                    let w = [0.7, 1.3];
                    tape.dot_const(d, &w)
                },
                &x,
                (2, 4),
            );
        }
    }

    #[test]
    fn clip_hinge_feature_gradients() {
        let x: Vec<f64> = vec![-0.9, -2.4, -0.3, -1.7];
        check_scalar_loss(
            |tape, p| {
                let clipped = tape.clip_rows(p, -1.0);
                let w = [1.0, 1.0, 0.5, 1.0];
                tape.dot_const(clipped, &w)
            },
            &x,
            (4, 1),
        );
        check_scalar_loss(
            |tape, p| {
                let pos = [-1.0, -2.0, -0.5, -1.0];
                let neg = [-3.0, -2.2, -0.1, -4.0];
                let mask = [1.0, 1.0, 0.0, 1.0];
                tape.hinge_sum(p, &pos, &neg, &mask, 0.5)
            },
            &x,
            (4, 1),
        );
        let x8 = demo_vals(8);
        check_scalar_loss(
            |tape, p| {
                let target = demo_vals(8).iter().map(|v| v * 0.5).collect::<Vec<_>>();
                let mask = [1.0, 0.0];
                tape.squared_diff_masked_sum(p, &target, &mask)
            },
            &x8,
            (2, 4),
        );
    }

    #[test]
    fn slice_concat_gather_gradients() {
        let x = demo_vals(12);
        check_scalar_loss(
            |tape, p| {
                let left = tape.slice_cols(p, 0, 2);
                let right = tape.slice_cols(p, 2, 2);
                let swapped = tape.concat_cols(&[right, left]);
                let rows = tape.gather_rows(swapped, &[2, 0, 1, 2]);
                let top = tape.slice_rows(rows, 1, 2);
                tape.square_sum(top)
            },
            &x,
            (3, 4),
        );
    }

    #[test]
    fn add_scale_affine_gradients() {
        let x = demo_vals(4);
        check_scalar_loss(
            |tape, p| {
                let c = tape.leaf_const(2, 2, &[0.5, -0.5, 1.5, 0.25]);
                let s = tape.add(p, c);
                let sc = tape.scale(s, -1.25);
                let b = tape.leaf_const(1, 2, &[0.3, -0.6]);
                let ar = tape.add_row(sc, b);
                let q = tape.square_sum(ar);
                let r = tape.square_sum(p);
                tape.affine(&[(q, 0.7), (r, 0.3)], 0.1)
            },
            &x,
            (2, 2),
        );
    }

    #[test]
    fn log_add_exp_matches_naive_in_range() {
        for (a, b) in [(0.0, 0.0), (-3.0, -1.0), (-700.0, -702.0), (5.0, -5.0)] {
            let got: f64 = log_add_exp(a, b);
            let want = ((a as f64).exp() + (b as f64).exp()).ln();
            if want.is_finite() {
                assert!((got - want).abs() < 1e-12, "{a} {b}: {got} vs {want}");
            }
        }
        assert!(log_add_exp(f64::NEG_INFINITY, f64::NEG_INFINITY).is_infinite());
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf_param(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let loss = tape.affine(&[], 42.0);
        let grads = tape.backward(loss);
        assert!(grads.get(p).is_none());
        let _ = p;
    }
}
