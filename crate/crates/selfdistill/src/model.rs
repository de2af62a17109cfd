//! Decoder-only transformer shared by all policy operations.
//!
//! Three forward paths over one weight layout: a plain full-sequence pass
//! (teacher-forced scoring), an incremental pass with a KV cache (ancestral
//! sampling), and a taped pass (gradient computation). The reference
//! architecture is 2 layers, 4 heads, hidden 64, window 128 over the fixed
//! character vocabulary.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::autodiff::{kernel_nn, log_softmax_row, ParamTape};
use crate::params::{PolicyParameters, ShapeTable, TableEntry};
use crate::scalar::Scalar;
use crate::tokens::Vocab;
use crate::{Error, Result};

pub const REFERENCE_WINDOW: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub vocab: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub window: usize,
    pub mlp_ratio: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            vocab: Vocab::reference().size(),
            hidden: 64,
            layers: 2,
            heads: 4,
            window: REFERENCE_WINDOW,
            mlp_ratio: 2,
        }
    }
}

impl ArchConfig {
    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn mlp_dim(&self) -> usize {
        self.hidden * self.mlp_ratio
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.layers == 0 || self.heads == 0 || self.window == 0 {
            return Err(Error::Config("architecture dimensions must be positive".into()));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.vocab < 5 {
            return Err(Error::Config("vocabulary must cover the special tokens".into()));
        }
        Ok(())
    }

    /// Named tensor layout; order defines the flat vector.
    pub fn layout(&self) -> ShapeTable {
        let d = self.hidden;
        let h = self.mlp_dim();
        let mut entries = Vec::new();
        let mut offset = 0usize;
        let mut push = |name: String, rows: usize, cols: usize, offset: &mut usize| {
            entries.push(TableEntry { name, offset: *offset, rows, cols });
            *offset += rows * cols;
        };
        push("tok_emb".into(), self.vocab, d, &mut offset);
        push("pos_emb".into(), self.window, d, &mut offset);
        for l in 0..self.layers {
            push(format!("l{l}.ln1.g"), 1, d, &mut offset);
            push(format!("l{l}.ln1.b"), 1, d, &mut offset);
            push(format!("l{l}.attn.wq"), d, d, &mut offset);
            push(format!("l{l}.attn.bq"), 1, d, &mut offset);
            push(format!("l{l}.attn.wk"), d, d, &mut offset);
            push(format!("l{l}.attn.bk"), 1, d, &mut offset);
            push(format!("l{l}.attn.wv"), d, d, &mut offset);
            push(format!("l{l}.attn.bv"), 1, d, &mut offset);
            push(format!("l{l}.attn.wo"), d, d, &mut offset);
            push(format!("l{l}.attn.bo"), 1, d, &mut offset);
            push(format!("l{l}.ln2.g"), 1, d, &mut offset);
            push(format!("l{l}.ln2.b"), 1, d, &mut offset);
            push(format!("l{l}.mlp.w1"), d, h, &mut offset);
            push(format!("l{l}.mlp.b1"), 1, h, &mut offset);
            push(format!("l{l}.mlp.w2"), h, d, &mut offset);
            push(format!("l{l}.mlp.b2"), 1, d, &mut offset);
        }
        push("final_ln.g".into(), 1, d, &mut offset);
        push("final_ln.b".into(), 1, d, &mut offset);
        push("head.w".into(), d, self.vocab, &mut offset);
        push("head.b".into(), 1, self.vocab, &mut offset);
        ShapeTable { entries }
    }
}

// ---------------------------------------------------------------------------
// Plain full-sequence forward
// ---------------------------------------------------------------------------

/// Post-final-layernorm hidden states and logits for the requested rows.
pub struct ForwardOutput<T> {
    pub hidden: Vec<T>,
    pub logits: Vec<T>,
    pub rows: usize,
}

fn layer_norm_rows<T: Scalar>(x: &[T], gain: &[T], bias: &[T], rows: usize, d: usize, out: &mut [T]) {
    let inv_n = T::from_f64(1.0 / d as f64);
    let eps = T::from_f64(1e-5);
    for i in 0..rows {
        let row = &x[i * d..(i + 1) * d];
        let mut mean = T::zero();
        for &v in row {
            mean += v;
        }
        mean = mean * inv_n;
        let mut var = T::zero();
        for &v in row {
            let dvt = v - mean;
            var += dvt * dvt;
        }
        var = var * inv_n;
        let inv_std = (var + eps).sqrt().recip();
        let orow = &mut out[i * d..(i + 1) * d];
        for j in 0..d {
            orow[j] = (row[j] - mean) * inv_std * gain[j] + bias[j];
        }
    }
}

fn gelu_rows<T: Scalar>(x: &mut [T]) {
    let c = T::from_f64(0.7978845608028654);
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    for v in x {
        let u = c * (*v + k * *v * *v * *v);
        *v = half * *v * (T::one() + u.tanh());
    }
}

fn add_bias_rows<T: Scalar>(x: &mut [T], bias: &[T], rows: usize, d: usize) {
    for i in 0..rows {
        for (v, &b) in x[i * d..(i + 1) * d].iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn split_head<T: Scalar>(src: &[T], rows: usize, d: usize, start: usize, dh: usize, out: &mut [T]) {
    for i in 0..rows {
        out[i * dh..(i + 1) * dh].copy_from_slice(&src[i * d + start..i * d + start + dh]);
    }
}

/// Full-sequence forward pass; the output head runs only on `need` rows.
pub fn forward_full<T: Scalar>(
    params: &PolicyParameters<T>,
    tokens: &[u32],
    need: Range<usize>,
) -> Result<ForwardOutput<T>> {
    let arch = &params.arch;
    let t = tokens.len();
    if t == 0 || t > arch.window {
        return Err(Error::Window(format!(
            "sequence of {t} tokens outside window {}",
            arch.window
        )));
    }
    debug_assert!(need.end <= t);
    let d = arch.hidden;
    let dh = arch.head_dim();
    let v = arch.vocab;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());

    let tok_emb = params.tensor("tok_emb");
    let pos_emb = params.tensor("pos_emb");
    let mut x = vec![T::zero(); t * d];
    for (i, &tok) in tokens.iter().enumerate() {
        let e = &tok_emb[tok as usize * d..(tok as usize + 1) * d];
        let p = &pos_emb[i * d..(i + 1) * d];
        for j in 0..d {
            x[i * d + j] = e[j] + p[j];
        }
    }

    let mut xn = vec![T::zero(); t * d];
    let mut q = vec![T::zero(); t * d];
    let mut k = vec![T::zero(); t * d];
    let mut vv = vec![T::zero(); t * d];
    let mut qh = vec![T::zero(); t * dh];
    let mut kh = vec![T::zero(); t * dh];
    let mut vh = vec![T::zero(); t * dh];
    let mut ctx = vec![T::zero(); t * d];
    let mut attn = vec![T::zero(); t * d];
    let mut h1 = vec![T::zero(); t * arch.mlp_dim()];
    let mut mlp = vec![T::zero(); t * d];

    for l in 0..arch.layers {
        let p = |suffix: &str| params.tensor(&format!("l{l}.{suffix}"));
        layer_norm_rows(&x, p("ln1.g"), p("ln1.b"), t, d, &mut xn);
        q.iter_mut().for_each(|z| *z = T::zero());
        k.iter_mut().for_each(|z| *z = T::zero());
        vv.iter_mut().for_each(|z| *z = T::zero());
        kernel_nn(&xn, p("attn.wq"), t, d, d, &mut q);
        kernel_nn(&xn, p("attn.wk"), t, d, d, &mut k);
        kernel_nn(&xn, p("attn.wv"), t, d, d, &mut vv);
        add_bias_rows(&mut q, p("attn.bq"), t, d);
        add_bias_rows(&mut k, p("attn.bk"), t, d);
        add_bias_rows(&mut vv, p("attn.bv"), t, d);

        for head in 0..arch.heads {
            let start = head * dh;
            split_head(&q, t, d, start, dh, &mut qh);
            split_head(&k, t, d, start, dh, &mut kh);
            split_head(&vv, t, d, start, dh, &mut vh);
            // causal attention, one query row at a time
            let mut probs = vec![T::zero(); t];
            for i in 0..t {
                let qrow = &qh[i * dh..(i + 1) * dh];
                let mut mx = T::neg_infinity();
                for j in 0..=i {
                    let krow = &kh[j * dh..(j + 1) * dh];
                    let mut acc = T::zero();
                    for (&a, &b) in qrow.iter().zip(krow) {
                        acc += a * b;
                    }
                    let s = acc * scale;
                    probs[j] = s;
                    if s > mx {
                        mx = s;
                    }
                }
                let mut sum = T::zero();
                for pj in probs.iter_mut().take(i + 1) {
                    *pj = (*pj - mx).exp();
                    sum += *pj;
                }
                let inv = sum.recip();
                let crow = &mut ctx[i * d + start..i * d + start + dh];
                crow.iter_mut().for_each(|z| *z = T::zero());
                for j in 0..=i {
                    let w = probs[j] * inv;
                    let vrow = &vh[j * dh..(j + 1) * dh];
                    for (cv, &vx) in crow.iter_mut().zip(vrow) {
                        *cv += w * vx;
                    }
                }
            }
        }

        attn.iter_mut().for_each(|z| *z = T::zero());
        kernel_nn(&ctx, p("attn.wo"), t, d, d, &mut attn);
        add_bias_rows(&mut attn, p("attn.bo"), t, d);
        for (xv, &av) in x.iter_mut().zip(&attn) {
            *xv += av;
        }

        layer_norm_rows(&x, p("ln2.g"), p("ln2.b"), t, d, &mut xn);
        let hdim = arch.mlp_dim();
        h1.iter_mut().for_each(|z| *z = T::zero());
        kernel_nn(&xn, p("mlp.w1"), t, d, hdim, &mut h1);
        add_bias_rows(&mut h1, p("mlp.b1"), t, hdim);
        gelu_rows(&mut h1);
        mlp.iter_mut().for_each(|z| *z = T::zero());
        kernel_nn(&h1, p("mlp.w2"), t, hdim, d, &mut mlp);
        add_bias_rows(&mut mlp, p("mlp.b2"), t, d);
        for (xv, &mv) in x.iter_mut().zip(&mlp) {
            *xv += mv;
        }
    }

    let rows = need.len();
    let mut xf = vec![T::zero(); t * d];
    layer_norm_rows(&x, params.tensor("final_ln.g"), params.tensor("final_ln.b"), t, d, &mut xf);
    let hidden = xf[need.start * d..need.end * d].to_vec();
    let mut logits = vec![T::zero(); rows * v];
    kernel_nn(&hidden, params.tensor("head.w"), rows, d, v, &mut logits);
    add_bias_rows(&mut logits, params.tensor("head.b"), rows, v);
    Ok(ForwardOutput { hidden, logits, rows })
}

/// Log-softmax of each logits row.
pub fn logits_to_logprobs<T: Scalar>(logits: &[T], rows: usize, vocab: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * vocab];
    for i in 0..rows {
        log_softmax_row(&logits[i * vocab..(i + 1) * vocab], &mut out[i * vocab..(i + 1) * vocab]);
    }
    out
}

// ---------------------------------------------------------------------------
// Incremental forward with KV cache (sampling path)
// ---------------------------------------------------------------------------

pub struct IncrementalState<T: Scalar> {
    k_cache: Vec<Vec<T>>,
    v_cache: Vec<Vec<T>>,
    len: usize,
}

impl<T: Scalar> IncrementalState<T> {
    pub fn new(arch: &ArchConfig) -> Self {
        let per_layer = arch.window * arch.hidden;
        IncrementalState {
            k_cache: (0..arch.layers).map(|_| vec![T::zero(); per_layer]).collect(),
            v_cache: (0..arch.layers).map(|_| vec![T::zero(); per_layer]).collect(),
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Feeds one token at the next position; returns the logits row for the
    /// next-token distribution.
    pub fn step(&mut self, params: &PolicyParameters<T>, token: u32) -> Result<Vec<T>> {
        let arch = &params.arch;
        let pos = self.len;
        if pos >= arch.window {
            return Err(Error::Window(format!("position {pos} outside window {}", arch.window)));
        }
        let d = arch.hidden;
        let dh = arch.head_dim();
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());

        let tok_emb = params.tensor("tok_emb");
        let pos_emb = params.tensor("pos_emb");
        let mut x = vec![T::zero(); d];
        for j in 0..d {
            x[j] = tok_emb[token as usize * d + j] + pos_emb[pos * d + j];
        }

        let mut xn = vec![T::zero(); d];
        let mut q = vec![T::zero(); d];
        let mut ctx = vec![T::zero(); d];
        let hdim = arch.mlp_dim();
        let mut h1 = vec![T::zero(); hdim];

        for l in 0..arch.layers {
            let p = |suffix: &str| params.tensor(&format!("l{l}.{suffix}"));
            layer_norm_rows(&x, p("ln1.g"), p("ln1.b"), 1, d, &mut xn);
            q.iter_mut().for_each(|z| *z = T::zero());
            kernel_nn(&xn, p("attn.wq"), 1, d, d, &mut q);
            add_bias_rows(&mut q, p("attn.bq"), 1, d);
            {
                let krow = &mut self.k_cache[l][pos * d..(pos + 1) * d];
                krow.iter_mut().for_each(|z| *z = T::zero());
                kernel_nn(&xn, p("attn.wk"), 1, d, d, krow);
                for (kv, &b) in krow.iter_mut().zip(p("attn.bk")) {
                    *kv += b;
                }
            }
            {
                let vrow = &mut self.v_cache[l][pos * d..(pos + 1) * d];
                vrow.iter_mut().for_each(|z| *z = T::zero());
                kernel_nn(&xn, p("attn.wv"), 1, d, d, vrow);
                for (vv, &b) in vrow.iter_mut().zip(p("attn.bv")) {
                    *vv += b;
                }
            }

            ctx.iter_mut().for_each(|z| *z = T::zero());
            let kc = &self.k_cache[l];
            let vc = &self.v_cache[l];
            let mut scores = vec![T::zero(); pos + 1];
            for head in 0..arch.heads {
                let start = head * dh;
                let qrow = &q[start..start + dh];
                let mut mx = T::neg_infinity();
                for (j, s) in scores.iter_mut().enumerate() {
                    let krow = &kc[j * d + start..j * d + start + dh];
                    let mut acc = T::zero();
                    for (&a, &b) in qrow.iter().zip(krow) {
                        acc += a * b;
                    }
                    *s = acc * scale;
                    if *s > mx {
                        mx = *s;
                    }
                }
                let mut sum = T::zero();
                for s in scores.iter_mut() {
                    *s = (*s - mx).exp();
                    sum += *s;
                }
                let inv = sum.recip();
                let crow = &mut ctx[start..start + dh];
                for (j, &w) in scores.iter().enumerate() {
                    let vrow = &vc[j * d + start..j * d + start + dh];
                    let wj = w * inv;
                    for (cv, &vx) in crow.iter_mut().zip(vrow) {
                        *cv += wj * vx;
                    }
                }
            }

            let mut attn = vec![T::zero(); d];
            kernel_nn(&ctx, p("attn.wo"), 1, d, d, &mut attn);
            add_bias_rows(&mut attn, p("attn.bo"), 1, d);
            for (xv, &av) in x.iter_mut().zip(&attn) {
                *xv += av;
            }

            layer_norm_rows(&x, p("ln2.g"), p("ln2.b"), 1, d, &mut xn);
            h1.iter_mut().for_each(|z| *z = T::zero());
            kernel_nn(&xn, p("mlp.w1"), 1, d, hdim, &mut h1);
            add_bias_rows(&mut h1, p("mlp.b1"), 1, hdim);
            gelu_rows(&mut h1);
            let mut mlp = vec![T::zero(); d];
            kernel_nn(&h1, p("mlp.w2"), 1, hdim, d, &mut mlp);
            add_bias_rows(&mut mlp, p("mlp.b2"), 1, d);
            for (xv, &mv) in x.iter_mut().zip(&mlp) {
                *xv += mv;
            }
        }

        let mut xf = vec![T::zero(); d];
        layer_norm_rows(&x, params.tensor("final_ln.g"), params.tensor("final_ln.b"), 1, d, &mut xf);
        let v = arch.vocab;
        let mut logits = vec![T::zero(); v];
        kernel_nn(&xf, params.tensor("head.w"), 1, d, v, &mut logits);
        add_bias_rows(&mut logits, params.tensor("head.b"), 1, v);
        self.len += 1;
        Ok(logits)
    }
}

// ---------------------------------------------------------------------------
// Taped forward (gradient path)
// ---------------------------------------------------------------------------

/// Builds the differentiable scoring graph for one token sequence and
/// returns `(logprobs, hidden)` nodes covering rows `need`.
pub fn build_scoring_graph<T: Scalar>(
    pt: &mut ParamTape<'_, T>,
    tokens: &[u32],
    need: Range<usize>,
) -> Result<(crate::autodiff::Tid, crate::autodiff::Tid)> {
    let arch = pt.arch;
    let t = tokens.len();
    if t == 0 || t > arch.window {
        return Err(Error::Window(format!(
            "sequence of {t} tokens outside window {}",
            arch.window
        )));
    }
    debug_assert!(need.end <= t);
    let _d = arch.hidden;
    let dh = arch.head_dim();
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let ids: Vec<usize> = tokens.iter().map(|&tok| tok as usize).collect();
    let positions: Vec<usize> = (0..t).collect();

    let tok_emb = pt.leaf("tok_emb");
    let pos_emb = pt.leaf("pos_emb");
    let te = pt.tape.gather_rows(tok_emb, &ids);
    let pe = pt.tape.gather_rows(pos_emb, &positions);
    let mut x = pt.tape.add(te, pe);

    for l in 0..arch.layers {
        let ln1g = pt.leaf(&format!("l{l}.ln1.g"));
        let ln1b = pt.leaf(&format!("l{l}.ln1.b"));
        let xn = pt.tape.layer_norm(x, ln1g, ln1b);
        let wq = pt.leaf(&format!("l{l}.attn.wq"));
        let bq = pt.leaf(&format!("l{l}.attn.bq"));
        let wk = pt.leaf(&format!("l{l}.attn.wk"));
        let bk = pt.leaf(&format!("l{l}.attn.bk"));
        let wv = pt.leaf(&format!("l{l}.attn.wv"));
        let bv = pt.leaf(&format!("l{l}.attn.bv"));
        let q0 = pt.tape.matmul_nn(xn, wq);
        let q = pt.tape.add_row(q0, bq);
        let k0 = pt.tape.matmul_nn(xn, wk);
        let k = pt.tape.add_row(k0, bk);
        let v0 = pt.tape.matmul_nn(xn, wv);
        let v = pt.tape.add_row(v0, bv);

        let mut head_ctx = Vec::with_capacity(arch.heads);
        for head in 0..arch.heads {
            let start = head * dh;
            let qh = pt.tape.slice_cols(q, start, dh);
            let kh = pt.tape.slice_cols(k, start, dh);
            let vh = pt.tape.slice_cols(v, start, dh);
            let scores0 = pt.tape.matmul_nt(qh, kh);
            let scores = pt.tape.scale(scores0, scale);
            let probs = pt.tape.causal_softmax(scores);
            head_ctx.push(pt.tape.matmul_nn(probs, vh));
        }
        let ctx = pt.tape.concat_cols(&head_ctx);
        let wo = pt.leaf(&format!("l{l}.attn.wo"));
        let bo = pt.leaf(&format!("l{l}.attn.bo"));
        let a0 = pt.tape.matmul_nn(ctx, wo);
        let attn = pt.tape.add_row(a0, bo);
        x = pt.tape.add(x, attn);

        let ln2g = pt.leaf(&format!("l{l}.ln2.g"));
        let ln2b = pt.leaf(&format!("l{l}.ln2.b"));
        let xn2 = pt.tape.layer_norm(x, ln2g, ln2b);
        let w1 = pt.leaf(&format!("l{l}.mlp.w1"));
        let b1 = pt.leaf(&format!("l{l}.mlp.b1"));
        let w2 = pt.leaf(&format!("l{l}.mlp.w2"));
        let b2 = pt.leaf(&format!("l{l}.mlp.b2"));
        let m0 = pt.tape.matmul_nn(xn2, w1);
        let m1 = pt.tape.add_row(m0, b1);
        let m2 = pt.tape.gelu(m1);
        let m3 = pt.tape.matmul_nn(m2, w2);
        let mlp = pt.tape.add_row(m3, b2);
        x = pt.tape.add(x, mlp);
    }

    let fg = pt.leaf("final_ln.g");
    let fb = pt.leaf("final_ln.b");
    let xf = pt.tape.layer_norm(x, fg, fb);
    let hidden = pt.tape.slice_rows(xf, need.start, need.len());
    let hw = pt.leaf("head.w");
    let hb = pt.leaf("head.b");
    let lg0 = pt.tape.matmul_nn(hidden, hw);
    let logits = pt.tape.add_row(lg0, hb);
    let logprobs = pt.tape.log_softmax_rows(logits);
    Ok((logprobs, hidden))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::init_policy;
    use crate::tokens::{BOS, SEP};

    fn tiny() -> ArchConfig {
        ArchConfig { vocab: 12, hidden: 8, layers: 2, heads: 2, window: 16, mlp_ratio: 2 }
    }

    #[test]
    fn layout_is_gap_free() {
        let st = ArchConfig::default().layout();
        st.validate().unwrap();
    }

    #[test]
    fn plain_forward_is_deterministic_and_normalized() {
        let p = init_policy::<f64>(&tiny(), 3).unwrap();
        let tokens = [BOS, 5, 6, SEP, 7];
        let a = forward_full(&p, &tokens, 0..5).unwrap();
        let b = forward_full(&p, &tokens, 0..5).unwrap();
        assert_eq!(a.logits, b.logits);
        let lp = logits_to_logprobs(&a.logits, 5, 12);
        for i in 0..5 {
            let total: f64 = lp[i * 12..(i + 1) * 12].iter().map(|x| x.exp()).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn incremental_matches_full_forward() {
        let p = init_policy::<f64>(&tiny(), 5).unwrap();
        let tokens = [BOS, 4, 9, 5, SEP, 6, 7];
        let full = forward_full(&p, &tokens, 0..tokens.len()).unwrap();
        let mut inc = IncrementalState::new(&tiny());
        for (i, &tok) in tokens.iter().enumerate() {
            let logits = inc.step(&p, tok).unwrap();
            for j in 0..12 {
                let want = full.logits[i * 12 + j];
                assert!(
                    (logits[j] - want).abs() < 1e-10,
                    "pos {i} tok {j}: {} vs {want}",
                    logits[j]
                );
            }
        }
    }

    #[test]
    fn taped_matches_plain_forward() {
        let p = init_policy::<f64>(&tiny(), 7).unwrap();
        let tokens = [BOS, 4, 9, 5, SEP, 6, 7];
        let full = forward_full(&p, &tokens, 2..7).unwrap();
        let want = logits_to_logprobs(&full.logits, 5, 12);

        let mut tape = crate::autodiff::Tape::new();
        let mut pt = ParamTape::attach(&mut tape, &p);
        let (lp, hidden) = build_scoring_graph(&mut pt, &tokens, 2..7).unwrap();
        let got = tape.value(lp);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-10);
        }
        let got_hidden = tape.value(hidden);
        for (a, b) in got_hidden.iter().zip(&full.hidden) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn window_overflow_is_an_error() {
        let p = init_policy::<f32>(&tiny(), 0).unwrap();
        let tokens = vec![BOS; 17];
        assert!(matches!(
            forward_full(&p, &tokens, 0..1),
            Err(Error::Window(_))
        ));
    }
}
