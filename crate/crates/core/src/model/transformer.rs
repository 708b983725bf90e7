//! Pre-norm decoder-only transformer with learned positional embeddings and
//! hand-written reverse pass.
//!
//! Weights are stored `in × out` row-major so `y = x W + b`. The flat
//! parameter order is: token embedding, position embedding, then per block
//! `ln1 (g, b)`, `qkv (W, b)`, `attn_out (W, b)`, `ln2 (g, b)`, `fc (W, b)`,
//! `proj (W, b)`, followed by the final norm `(g, b)` and the head `(W, b)`.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{domain, Result};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub vocab_size: usize,
    pub context: usize,
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            context: 64,
            width: 32,
            heads: 2,
            layers: 2,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.context == 0 || self.width == 0 || self.heads == 0 {
            return domain("transformer dimensions must be positive");
        }
        if !self.width.is_multiple_of(self.heads) {
            return domain(format!(
                "width {} is not divisible by head count {}",
                self.width, self.heads
            ));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        Layout::new(self).total
    }
}

#[derive(Debug, Clone, PartialEq)]
struct BlockLayout {
    ln1_g: usize,
    ln1_b: usize,
    w_qkv: usize,
    b_qkv: usize,
    w_o: usize,
    b_o: usize,
    ln2_g: usize,
    ln2_b: usize,
    w_fc: usize,
    b_fc: usize,
    w_proj: usize,
    b_proj: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    wte: usize,
    wpe: usize,
    blocks: Vec<BlockLayout>,
    lnf_g: usize,
    lnf_b: usize,
    w_head: usize,
    b_head: usize,
    total: usize,
}

impl Layout {
    fn new(c: &TransformerConfig) -> Self {
        let d = c.width;
        let mut off = 0;
        let mut take = |n: usize| {
            let start = off;
            off += n;
            start
        };
        let wte = take(c.vocab_size * d);
        let wpe = take(c.context * d);
        let blocks = (0..c.layers)
            .map(|_| BlockLayout {
                ln1_g: take(d),
                ln1_b: take(d),
                w_qkv: take(d * 3 * d),
                b_qkv: take(3 * d),
                w_o: take(d * d),
                b_o: take(d),
                ln2_g: take(d),
                ln2_b: take(d),
                w_fc: take(d * 4 * d),
                b_fc: take(4 * d),
                w_proj: take(4 * d * d),
                b_proj: take(d),
            })
            .collect();
        let lnf_g = take(d);
        let lnf_b = take(d);
        let w_head = take(d * c.vocab_size);
        let b_head = take(c.vocab_size);
        Self {
            wte,
            wpe,
            blocks,
            lnf_g,
            lnf_b,
            w_head,
            b_head,
            total: off,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MicroTransformer {
    pub config: TransformerConfig,
    pub params: Vec<f64>,
    layout: Layout,
}

#[derive(Debug, Clone)]
struct NormCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

#[derive(Debug, Clone)]
struct BlockActs {
    ln1: NormCache,
    ln1_out: Vec<f64>,
    qkv: Vec<f64>,
    att: Vec<f64>,
    att_out: Vec<f64>,
    ln2: NormCache,
    ln2_out: Vec<f64>,
    fc_pre: Vec<f64>,
    fc_act: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(super) struct Activations {
    tokens: Vec<u32>,
    blocks: Vec<BlockActs>,
    lnf: NormCache,
    hidden: Vec<f64>,
    pub(super) logits: Matrix,
}

impl Activations {
    pub(super) fn hidden(&self) -> Matrix {
        Matrix {
            rows: self.tokens.len(),
            cols: self.hidden.len() / self.tokens.len().max(1),
            data: self.hidden.clone(),
        }
    }
}

impl MicroTransformer {
    /// Gaussian initialization (std 0.02, residual projections scaled by
    /// `1/sqrt(2 · layers)`), rounded to `f32` so checkpoints round-trip exactly.
    pub fn init(config: TransformerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.width;
        let std = 0.02;
        let resid_std = std / (2.0 * config.layers.max(1) as f64).sqrt();
        let mut fill = |params: &mut [f64], start: usize, len: usize, s: f64| {
            let normal = Normal::new(0.0, s).expect("positive std");
            for p in &mut params[start..start + len] {
                *p = normal.sample(&mut rng) as f32 as f64;
            }
        };
        fill(&mut params, layout.wte, config.vocab_size * d, std);
        fill(&mut params, layout.wpe, config.context * d, std / 2.0);
        for b in &layout.blocks {
            fill(&mut params, b.w_qkv, d * 3 * d, std);
            fill(&mut params, b.w_o, d * d, resid_std);
            fill(&mut params, b.w_fc, d * 4 * d, std);
            fill(&mut params, b.w_proj, 4 * d * d, resid_std);
            params[b.ln1_g..b.ln1_g + d].fill(1.0);
            params[b.ln2_g..b.ln2_g + d].fill(1.0);
        }
        params[layout.lnf_g..layout.lnf_g + d].fill(1.0);
        fill(&mut params, layout.w_head, d * config.vocab_size, std);
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    pub fn from_params(config: TransformerConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(crate::Error::Shape {
                expected: layout.total,
                found: params.len(),
            });
        }
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    /// Named parameter tensors and their ranges in the flat vector.
    pub fn param_ranges(&self) -> Vec<(String, Range<usize>)> {
        let c = &self.config;
        let d = c.width;
        let l = &self.layout;
        let mut out = vec![
            ("wte".to_string(), l.wte..l.wte + c.vocab_size * d),
            ("wpe".to_string(), l.wpe..l.wpe + c.context * d),
        ];
        for (i, b) in l.blocks.iter().enumerate() {
            let named = [
                ("ln1.g", b.ln1_g, d),
                ("ln1.b", b.ln1_b, d),
                ("qkv.w", b.w_qkv, 3 * d * d),
                ("qkv.b", b.b_qkv, 3 * d),
                ("attn_out.w", b.w_o, d * d),
                ("attn_out.b", b.b_o, d),
                ("ln2.g", b.ln2_g, d),
                ("ln2.b", b.ln2_b, d),
                ("fc.w", b.w_fc, 4 * d * d),
                ("fc.b", b.b_fc, 4 * d),
                ("proj.w", b.w_proj, 4 * d * d),
                ("proj.b", b.b_proj, d),
            ];
            for (name, start, len) in named {
                out.push((format!("block{i}.{name}"), start..start + len));
            }
        }
        out.push(("lnf.g".to_string(), l.lnf_g..l.lnf_g + d));
        out.push(("lnf.b".to_string(), l.lnf_b..l.lnf_b + d));
        out.push(("head.w".to_string(), l.w_head..l.w_head + d * c.vocab_size));
        out.push(("head.b".to_string(), l.b_head..l.b_head + c.vocab_size));
        out
    }

    fn p(&self, start: usize, len: usize) -> &[f64] {
        &self.params[start..start + len]
    }

    pub(super) fn forward(&self, tokens: &[u32]) -> Activations {
        let c = &self.config;
        let (t_len, d, v) = (tokens.len(), c.width, c.vocab_size);
        let l = &self.layout;

        let mut x = vec![0.0; t_len * d];
        for (t, &tok) in tokens.iter().enumerate() {
            let te = self.p(l.wte + tok as usize * d, d);
            let pe = self.p(l.wpe + t * d, d);
            for ((xi, a), b) in x[t * d..(t + 1) * d].iter_mut().zip(te).zip(pe) {
                *xi = a + b;
            }
        }

        let mut blocks = Vec::with_capacity(c.layers);
        for b in &l.blocks {
            let (ln1_out, ln1) = layernorm_forward(&x, self.p(b.ln1_g, d), self.p(b.ln1_b, d), d);
            let qkv = linear_forward(
                &ln1_out,
                self.p(b.w_qkv, 3 * d * d),
                self.p(b.b_qkv, 3 * d),
                d,
                3 * d,
            );
            let (att_out, att) = attention_forward(&qkv, t_len, d, c.heads);
            let proj = linear_forward(&att_out, self.p(b.w_o, d * d), self.p(b.b_o, d), d, d);
            add_assign(&mut x, &proj);
            let (ln2_out, ln2) = layernorm_forward(&x, self.p(b.ln2_g, d), self.p(b.ln2_b, d), d);
            let fc_pre = linear_forward(
                &ln2_out,
                self.p(b.w_fc, 4 * d * d),
                self.p(b.b_fc, 4 * d),
                d,
                4 * d,
            );
            let fc_act: Vec<f64> = fc_pre.iter().map(|&z| gelu(z)).collect();
            let mlp = linear_forward(
                &fc_act,
                self.p(b.w_proj, 4 * d * d),
                self.p(b.b_proj, d),
                4 * d,
                d,
            );
            add_assign(&mut x, &mlp);
            blocks.push(BlockActs {
                ln1,
                ln1_out,
                qkv,
                att,
                att_out,
                ln2,
                ln2_out,
                fc_pre,
                fc_act,
            });
        }

        let (hidden, lnf) = layernorm_forward(&x, self.p(l.lnf_g, d), self.p(l.lnf_b, d), d);
        let logits = linear_forward(&hidden, self.p(l.w_head, d * v), self.p(l.b_head, v), d, v);
        Activations {
            tokens: tokens.to_vec(),
            blocks,
            lnf,
            hidden,
            logits: Matrix {
                rows: t_len,
                cols: v,
                data: logits,
            },
        }
    }

    pub(super) fn backward(&self, acts: &Activations, dlogits: &Matrix, grads: &mut [f64]) {
        let c = &self.config;
        let (t_len, d, v) = (acts.tokens.len(), c.width, c.vocab_size);
        let l = &self.layout;

        let mut dhidden = vec![0.0; t_len * d];
        linear_backward(
            &dlogits.data,
            &acts.hidden,
            self.p(l.w_head, d * v),
            d,
            v,
            &mut dhidden,
            grads,
            l.w_head,
            l.b_head,
        );
        let mut dx = vec![0.0; t_len * d];
        layernorm_backward(
            &dhidden,
            &acts.lnf,
            self.p(l.lnf_g, d),
            d,
            &mut dx,
            grads,
            l.lnf_g,
            l.lnf_b,
        );

        for (b, a) in l.blocks.iter().zip(&acts.blocks).rev() {
            let mut dfc_act = vec![0.0; t_len * 4 * d];
            linear_backward(
                &dx,
                &a.fc_act,
                self.p(b.w_proj, 4 * d * d),
                4 * d,
                d,
                &mut dfc_act,
                grads,
                b.w_proj,
                b.b_proj,
            );
            let dfc_pre: Vec<f64> = a
                .fc_pre
                .iter()
                .zip(&dfc_act)
                .map(|(&z, &g)| g * gelu_grad(z))
                .collect();
            let mut dln2_out = vec![0.0; t_len * d];
            linear_backward(
                &dfc_pre,
                &a.ln2_out,
                self.p(b.w_fc, 4 * d * d),
                d,
                4 * d,
                &mut dln2_out,
                grads,
                b.w_fc,
                b.b_fc,
            );
            layernorm_backward(
                &dln2_out,
                &a.ln2,
                self.p(b.ln2_g, d),
                d,
                &mut dx,
                grads,
                b.ln2_g,
                b.ln2_b,
            );

            let mut datt_out = vec![0.0; t_len * d];
            linear_backward(
                &dx,
                &a.att_out,
                self.p(b.w_o, d * d),
                d,
                d,
                &mut datt_out,
                grads,
                b.w_o,
                b.b_o,
            );
            let mut dqkv = vec![0.0; t_len * 3 * d];
            attention_backward(&datt_out, &a.qkv, &a.att, t_len, d, c.heads, &mut dqkv);
            let mut dln1_out = vec![0.0; t_len * d];
            linear_backward(
                &dqkv,
                &a.ln1_out,
                self.p(b.w_qkv, 3 * d * d),
                d,
                3 * d,
                &mut dln1_out,
                grads,
                b.w_qkv,
                b.b_qkv,
            );
            layernorm_backward(
                &dln1_out,
                &a.ln1,
                self.p(b.ln1_g, d),
                d,
                &mut dx,
                grads,
                b.ln1_g,
                b.ln1_b,
            );
        }

        for (t, &tok) in acts.tokens.iter().enumerate() {
            let row = &dx[t * d..(t + 1) * d];
            let te = l.wte + tok as usize * d;
            let pe = l.wpe + t * d;
            for j in 0..d {
                grads[te + j] += row[j];
                grads[pe + j] += row[j];
            }
        }
    }
}

fn add_assign(x: &mut [f64], y: &[f64]) {
    for (a, b) in x.iter_mut().zip(y) {
        *a += b;
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn layernorm_forward(x: &[f64], g: &[f64], b: &[f64], d: usize) -> (Vec<f64>, NormCache) {
    let rows = x.len() / d;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for t in 0..rows {
        let row = &x[t * d..(t + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[t] = r;
        for j in 0..d {
            let h = (row[j] - mean) * r;
            xhat[t * d + j] = h;
            out[t * d + j] = h * g[j] + b[j];
        }
    }
    (out, NormCache { xhat, rstd })
}

#[allow(clippy::too_many_arguments)]
fn layernorm_backward(
    dout: &[f64],
    cache: &NormCache,
    g: &[f64],
    d: usize,
    dx: &mut [f64],
    grads: &mut [f64],
    g_off: usize,
    b_off: usize,
) {
    let mut dxhat = vec![0.0; d];
    for (t, &r) in cache.rstd.iter().enumerate() {
        let dr = &dout[t * d..(t + 1) * d];
        let xh = &cache.xhat[t * d..(t + 1) * d];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            grads[g_off + j] += dr[j] * xh[j];
            grads[b_off + j] += dr[j];
            dxhat[j] = dr[j] * g[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xh[j];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        for j in 0..d {
            dx[t * d + j] += r * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
}

fn linear_forward(x: &[f64], w: &[f64], b: &[f64], n_in: usize, n_out: usize) -> Vec<f64> {
    let rows = x.len() / n_in;
    let mut out = vec![0.0; rows * n_out];
    for t in 0..rows {
        let o = &mut out[t * n_out..(t + 1) * n_out];
        o.copy_from_slice(b);
        for (i, &xi) in x[t * n_in..(t + 1) * n_in].iter().enumerate() {
            for (oj, wj) in o.iter_mut().zip(&w[i * n_out..(i + 1) * n_out]) {
                *oj += xi * wj;
            }
        }
    }
    out
}

/// Accumulates `dx += dout Wᵀ`, `dW += xᵀ dout`, `db += Σ_t dout`.
#[allow(clippy::too_many_arguments)]
fn linear_backward(
    dout: &[f64],
    x: &[f64],
    w: &[f64],
    n_in: usize,
    n_out: usize,
    dx: &mut [f64],
    grads: &mut [f64],
    w_off: usize,
    b_off: usize,
) {
    let rows = x.len() / n_in;
    for t in 0..rows {
        let dr = &dout[t * n_out..(t + 1) * n_out];
        if dr.iter().all(|&v| v == 0.0) {
            continue;
        }
        for (gb, dv) in grads[b_off..b_off + n_out].iter_mut().zip(dr) {
            *gb += dv;
        }
        let xr = &x[t * n_in..(t + 1) * n_in];
        for i in 0..n_in {
            let wr = &w[i * n_out..(i + 1) * n_out];
            dx[t * n_in + i] += wr.iter().zip(dr).map(|(a, b)| a * b).sum::<f64>();
            let xi = xr[i];
            for (gw, dv) in grads[w_off + i * n_out..w_off + (i + 1) * n_out]
                .iter_mut()
                .zip(dr)
            {
                *gw += xi * dv;
            }
        }
    }
}

/// Causal multi-head attention over a packed `[q | k | v]` buffer.
/// Returns the concatenated head outputs and the `heads × T × T` weights.
fn attention_forward(qkv: &[f64], t_len: usize, d: usize, heads: usize) -> (Vec<f64>, Vec<f64>) {
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = vec![0.0; t_len * d];
    let mut att = vec![0.0; heads * t_len * t_len];
    for h in 0..heads {
        for t in 0..t_len {
            let q = &qkv[t * 3 * d + h * hd..t * 3 * d + (h + 1) * hd];
            let row = &mut att[(h * t_len + t) * t_len..(h * t_len + t + 1) * t_len];
            let mut max = f64::NEG_INFINITY;
            for u in 0..=t {
                let k = &qkv[u * 3 * d + d + h * hd..u * 3 * d + d + (h + 1) * hd];
                let s = q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale;
                row[u] = s;
                max = max.max(s);
            }
            let mut total = 0.0;
            for w in &mut row[..=t] {
                *w = (*w - max).exp();
                total += *w;
            }
            for w in &mut row[..=t] {
                *w /= total;
            }
            let o = &mut out[t * d + h * hd..t * d + (h + 1) * hd];
            for u in 0..=t {
                let vv = &qkv[u * 3 * d + 2 * d + h * hd..u * 3 * d + 2 * d + (h + 1) * hd];
                let a = row[u];
                for (oj, vj) in o.iter_mut().zip(vv) {
                    *oj += a * vj;
                }
            }
        }
    }
    (out, att)
}

fn attention_backward(
    dout: &[f64],
    qkv: &[f64],
    att: &[f64],
    t_len: usize,
    d: usize,
    heads: usize,
    dqkv: &mut [f64],
) {
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut da = vec![0.0; t_len];
    for h in 0..heads {
        for t in 0..t_len {
            let row = &att[(h * t_len + t) * t_len..(h * t_len + t + 1) * t_len];
            let dto = &dout[t * d + h * hd..t * d + (h + 1) * hd];
            let mut weighted = 0.0;
            for u in 0..=t {
                let v_off = u * 3 * d + 2 * d + h * hd;
                da[u] = dto
                    .iter()
                    .zip(&qkv[v_off..v_off + hd])
                    .map(|(a, b)| a * b)
                    .sum();
                weighted += row[u] * da[u];
                for j in 0..hd {
                    dqkv[v_off + j] += row[u] * dto[j];
                }
            }
            let q_off = t * 3 * d + h * hd;
            for u in 0..=t {
                let ds = row[u] * (da[u] - weighted) * scale;
                if ds == 0.0 {
                    continue;
                }
                let k_off = u * 3 * d + d + h * hd;
                for j in 0..hd {
                    dqkv[q_off + j] += ds * qkv[k_off + j];
                    dqkv[k_off + j] += ds * qkv[q_off + j];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PolicyModel;
    use crate::numerics::{grad_check, DEFAULT_FD_STEP};
    use rand::Rng;

    fn small(width: usize, layers: usize, seed: u64) -> MicroTransformer {
        let cfg = TransformerConfig {
            vocab_size: 7,
            context: 12,
            width,
            heads: 2,
            layers,
        };
        let mut m = MicroTransformer::init(cfg, seed).unwrap();
        // Larger weights than the default init exercise the nonlinearities.
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        for p in &mut m.params {
            *p += rng.gen_range(-0.3..0.3);
        }
        m
    }

    #[test]
    fn parameter_count_matches_layout() {
        let cfg = TransformerConfig::default();
        let d = cfg.width;
        let per_block =
            2 * d + 3 * d * d + 3 * d + d * d + d + 2 * d + 4 * d * d + 4 * d + 4 * d * d + d;
        let expected = cfg.vocab_size * d
            + cfg.context * d
            + cfg.layers * per_block
            + 2 * d
            + d * cfg.vocab_size
            + cfg.vocab_size;
        assert_eq!(cfg.num_params(), expected);
        let m = MicroTransformer::init(cfg, 0).unwrap();
        assert_eq!(m.params.len(), expected);
        let covered: usize = m.param_ranges().iter().map(|(_, r)| r.len()).sum();
        assert_eq!(covered, expected);
    }

    #[test]
    fn rejects_indivisible_heads() {
        let cfg = TransformerConfig {
            width: 10,
            heads: 3,
            ..Default::default()
        };
        assert!(MicroTransformer::init(cfg, 0).is_err());
    }

    #[test]
    fn forward_is_deterministic_and_causal() {
        let m = PolicyModel::Transformer(small(8, 2, 3));
        let tokens = [1, 4, 2, 6, 0, 3];
        let a = m.forward_logits(&tokens).unwrap();
        let b = m.forward_logits(&tokens).unwrap();
        assert_eq!(a.data, b.data);

        let mut perturbed = tokens;
        perturbed[4] = 5;
        perturbed[5] = 1;
        let c = m.forward_logits(&perturbed).unwrap();
        for t in 0..4 {
            assert_eq!(a.row(t), c.row(t), "position {t} saw the future");
        }
        assert_ne!(a.row(4), c.row(4));
    }

    #[test]
    fn over_length_input_is_rejected() {
        let m = PolicyModel::Transformer(small(8, 1, 0));
        assert!(m.forward_logits(&[0; 13]).is_err());
        assert!(m.forward_logits(&[9]).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        for (width, layers, seed) in [(8, 1, 1), (8, 2, 2), (16, 1, 3)] {
            let base = small(width, layers, seed);
            let tokens = [2u32, 5, 1, 6, 3];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let weights: Vec<f64> = (0..tokens.len() * 7)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let f = |theta: &[f64]| -> Result<(f64, Vec<f64>)> {
                let m = PolicyModel::Transformer(MicroTransformer::from_params(
                    base.config,
                    theta.to_vec(),
                )?);
                let trace = m.forward_trace(&tokens)?;
                // Nonlinear readout so the check covers more than a linear map.
                let loss: f64 = trace
                    .logits
                    .data
                    .iter()
                    .zip(&weights)
                    .map(|(z, w)| w * z + 0.1 * z * z)
                    .sum();
                let dl = Matrix {
                    rows: trace.logits.rows,
                    cols: trace.logits.cols,
                    data: trace
                        .logits
                        .data
                        .iter()
                        .zip(&weights)
                        .map(|(z, w)| w + 0.2 * z)
                        .collect(),
                };
                Ok((loss, m.backward(&trace, &dl)?))
            };
            let report = grad_check(f, &base.params, DEFAULT_FD_STEP).unwrap();
            assert!(
                report.max_relative_error <= 1e-4,
                "width {width} layers {layers}: {report:?}"
            );
        }
    }

    #[test]
    fn zero_upstream_gradient_gives_zero() {
        let m = PolicyModel::Transformer(small(8, 2, 4));
        let trace = m.forward_trace(&[1, 2, 3]).unwrap();
        let g = m.backward(&trace, &Matrix::zeros(3, 7)).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
        assert!(m.backward(&trace, &Matrix::zeros(2, 7)).is_err());
    }

    #[test]
    fn hidden_states_shape_and_determinism() {
        let cfg = TransformerConfig {
            vocab_size: 7,
            context: 12,
            width: 16,
            heads: 2,
            layers: 1,
        };
        let a = PolicyModel::Transformer(MicroTransformer::init(cfg, 9).unwrap());
        let b = a.clone();
        let ha = a.hidden_states(&[1, 2, 3, 4]).unwrap();
        assert_eq!((ha.rows, ha.cols), (4, 16));
        assert_eq!(ha, b.hidden_states(&[1, 2, 3, 4]).unwrap());
    }
}
