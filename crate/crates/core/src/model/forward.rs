use rand::Rng as _;

use super::{Layout, Model, ParamVector, LN_EPS};
use crate::data::{ItemId, PAD};
use crate::error::{Error, Result};
use crate::util::rng_from_seed;

/// Dropout mode of a forward pass. `On(seed)` draws every mask from `seed`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dropout {
    Off,
    On(u64),
}

/// Probabilities and logits at one queried window position.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionOutput {
    pub position: usize,
    /// `logits[j - 1]` scores item `j`.
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub positions: Vec<PositionOutput>,
}

pub(crate) struct LnCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub(crate) struct LayerCache {
    pub ln1: LnCache,
    pub a: Vec<f64>,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    /// `[head][query][key]`
    pub att: Vec<f64>,
    pub ctx: Vec<f64>,
    pub drop_attn: Option<Vec<f64>>,
    pub ln2: LnCache,
    pub b: Vec<f64>,
    pub u: Vec<f64>,
    pub g: Vec<f64>,
    pub drop_ffn: Option<Vec<f64>>,
}

/// Activations of one window, kept for the backward pass.
///
/// Only non-pad positions are materialised: pad keys are masked out of
/// attention and pad outputs never reach a real position, so dropping them is
/// exact.
pub struct WindowCache {
    pub(crate) positions: Vec<usize>,
    pub(crate) tokens: Vec<ItemId>,
    pub(crate) drop_emb: Option<Vec<f64>>,
    pub(crate) layers: Vec<LayerCache>,
    pub(crate) final_ln: LnCache,
    pub(crate) hidden: Vec<f64>,
}

impl WindowCache {
    pub fn num_tokens(&self) -> usize {
        self.tokens.len()
    }

    /// Row of window position `position`, if it holds a real token.
    pub fn row_of(&self, position: usize) -> Option<usize> {
        self.positions.binary_search(&position).ok()
    }

    /// Final-layer-norm output at every non-pad position, row-major.
    pub fn hidden(&self) -> &[f64] {
        &self.hidden
    }

    /// Row index of the last window position.
    pub fn last_row(&self) -> usize {
        self.tokens.len() - 1
    }
}

// y[r, :] = x[r, :] W, W is din x dout row-major
pub(crate) fn matmul(x: &[f64], rows: usize, din: usize, w: &[f64], dout: usize) -> Vec<f64> {
    let mut y = vec![0.0; rows * dout];
    for r in 0..rows {
        let xr = &x[r * din..(r + 1) * din];
        let yr = &mut y[r * dout..(r + 1) * dout];
        for (i, &xi) in xr.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let wi = &w[i * dout..(i + 1) * dout];
            for (yo, &wo) in yr.iter_mut().zip(wi) {
                *yo += xi * wo;
            }
        }
    }
    y
}

pub(crate) fn layer_norm(
    x: &[f64],
    rows: usize,
    d: usize,
    scale: &[f64],
    shift: &[f64],
) -> (Vec<f64>, LnCache) {
    let mut y = vec![0.0; rows * d];
    let mut xhat = vec![0.0; rows * d];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std[r] = is;
        for c in 0..d {
            let h = (xr[c] - mean) * is;
            xhat[r * d + c] = h;
            y[r * d + c] = scale[c] * h + shift[c];
        }
    }
    (y, LnCache { xhat, inv_std })
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_A * u * u * u)).tanh())
}

pub(crate) fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + GELU_A * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * u * u)
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

struct DropoutSampler {
    rng: Option<crate::util::Rng>,
    p: f64,
}

impl DropoutSampler {
    fn new(mode: Dropout, p: f64) -> Self {
        let rng = match mode {
            Dropout::On(seed) if p > 0.0 => Some(rng_from_seed(seed)),
            _ => None,
        };
        Self { rng, p }
    }

    fn mask(&mut self, len: usize) -> Option<Vec<f64>> {
        let rng = self.rng.as_mut()?;
        let keep = 1.0 / (1.0 - self.p);
        Some(
            (0..len)
                .map(|_| if rng.random::<f64>() < self.p { 0.0 } else { keep })
                .collect(),
        )
    }
}

fn apply(mask: &Option<Vec<f64>>, x: &mut [f64]) {
    if let Some(m) = mask {
        for (v, &k) in x.iter_mut().zip(m) {
            *v *= k;
        }
    }
}

impl Model {
    /// Runs the encoder over one window of exactly `max_len` token ids.
    pub fn forward_cached(
        &self,
        params: &ParamVector,
        window: &[ItemId],
        dropout: Dropout,
    ) -> Result<WindowCache> {
        self.check(params)?;
        let cfg = &self.config;
        if window.len() != cfg.max_len {
            return Err(Error::Input(format!(
                "window has {} positions, model expects {}",
                window.len(),
                cfg.max_len
            )));
        }
        let vocab_max = cfg.mask_token();
        if let Some(&bad) = window.iter().find(|&&t| t > vocab_max) {
            return Err(Error::Input(format!(
                "token {bad} outside vocabulary 0..={vocab_max}"
            )));
        }
        let positions: Vec<usize> = (0..window.len()).filter(|&p| window[p] != PAD).collect();
        if positions.is_empty() {
            return Err(Error::Input("window holds only padding".into()));
        }
        let tokens: Vec<ItemId> = positions.iter().map(|&p| window[p]).collect();
        let theta = params.values();
        let lay: &Layout = &self.layout;
        let d = cfg.d_model;
        let n = tokens.len();
        let mut drops = DropoutSampler::new(dropout, cfg.dropout);

        let mut x = vec![0.0; n * d];
        for (r, (&tok, &pos)) in tokens.iter().zip(&positions).enumerate() {
            let e = &theta[lay.item_embedding + tok as usize * d..][..d];
            let p = &theta[lay.pos_embedding + pos * d..][..d];
            for c in 0..d {
                x[r * d + c] = e[c] + p[c];
            }
        }
        let drop_emb = drops.mask(n * d);
        apply(&drop_emb, &mut x);

        let mut layers = Vec::with_capacity(cfg.n_layers);
        for ll in &lay.layers {
            let (cache, out) = self.layer_forward(theta, ll, &x, n, &mut drops);
            layers.push(cache);
            x = out;
        }
        let (hidden, final_ln) = layer_norm(
            &x,
            n,
            d,
            &theta[lay.final_ln_scale..][..d],
            &theta[lay.final_ln_shift..][..d],
        );
        Ok(WindowCache {
            positions,
            tokens,
            drop_emb,
            layers,
            final_ln,
            hidden,
        })
    }

    fn layer_forward(
        &self,
        theta: &[f64],
        ll: &super::LayerLayout,
        x: &[f64],
        n: usize,
        drops: &mut DropoutSampler,
    ) -> (LayerCache, Vec<f64>) {
        let cfg = &self.config;
        let d = cfg.d_model;
        let f = cfg.ffn_dim();
        let h = cfg.n_heads;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let (a, ln1) = layer_norm(x, n, d, &theta[ll.ln1_scale..][..d], &theta[ll.ln1_shift..][..d]);
        let q = matmul(&a, n, d, &theta[ll.attn_q..][..d * d], d);
        let k = matmul(&a, n, d, &theta[ll.attn_k..][..d * d], d);
        let v = matmul(&a, n, d, &theta[ll.attn_v..][..d * d], d);

        let mut att = vec![0.0; h * n * n];
        let mut ctx = vec![0.0; n * d];
        let mut scores = vec![0.0; n];
        for head in 0..h {
            let c0 = head * dh;
            for t in 0..n {
                for s in 0..n {
                    let mut dot = 0.0;
                    for c in c0..c0 + dh {
                        dot += q[t * d + c] * k[s * d + c];
                    }
                    scores[s] = dot * scale;
                }
                let row = softmax(&scores);
                for (s, &w) in row.iter().enumerate() {
                    att[(head * n + t) * n + s] = w;
                    for c in c0..c0 + dh {
                        ctx[t * d + c] += w * v[s * d + c];
                    }
                }
            }
        }
        let mut o = matmul(&ctx, n, d, &theta[ll.attn_o..][..d * d], d);
        let drop_attn = drops.mask(n * d);
        apply(&drop_attn, &mut o);
        let mid: Vec<f64> = x.iter().zip(&o).map(|(a, b)| a + b).collect();

        let (b, ln2) = layer_norm(&mid, n, d, &theta[ll.ln2_scale..][..d], &theta[ll.ln2_shift..][..d]);
        let mut u = matmul(&b, n, d, &theta[ll.ffn_w1..][..d * f], f);
        let b1 = &theta[ll.ffn_b1..][..f];
        for r in 0..n {
            for c in 0..f {
                u[r * f + c] += b1[c];
            }
        }
        let g: Vec<f64> = u.iter().map(|&z| gelu(z)).collect();
        let mut ff = matmul(&g, n, f, &theta[ll.ffn_w2..][..f * d], d);
        let b2 = &theta[ll.ffn_b2..][..d];
        for r in 0..n {
            for c in 0..d {
                ff[r * d + c] += b2[c];
            }
        }
        let drop_ffn = drops.mask(n * d);
        apply(&drop_ffn, &mut ff);
        let out: Vec<f64> = mid.iter().zip(&ff).map(|(a, b)| a + b).collect();

        (
            LayerCache {
                ln1,
                a,
                q,
                k,
                v,
                att,
                ctx,
                drop_attn,
                ln2,
                b,
                u,
                g,
                drop_ffn,
            },
            out,
        )
    }

    /// Logits over items `1..=num_items` at cache row `row`.
    pub fn logits_at(&self, params: &ParamVector, cache: &WindowCache, row: usize) -> Vec<f64> {
        let theta = params.values();
        let d = self.config.d_model;
        let h = &cache.hidden[row * d..(row + 1) * d];
        let emb = &theta[self.layout.item_embedding..];
        let bias = &theta[self.layout.output_bias..][..self.config.num_items];
        (1..=self.config.num_items)
            .map(|j| {
                let e = &emb[j * d..(j + 1) * d];
                h.iter().zip(e).map(|(a, b)| a * b).sum::<f64>() + bias[j - 1]
            })
            .collect()
    }

    pub fn probs_at(&self, params: &ParamVector, cache: &WindowCache, row: usize) -> Vec<f64> {
        softmax(&self.logits_at(params, cache, row))
    }

    /// Next-item distribution at each of `query_positions`.
    pub fn forward(
        &self,
        params: &ParamVector,
        window: &[ItemId],
        query_positions: &[usize],
        dropout: Dropout,
    ) -> Result<ForwardOutput> {
        let cache = self.forward_cached(params, window, dropout)?;
        let positions = query_positions
            .iter()
            .map(|&position| {
                let row = cache.row_of(position).ok_or_else(|| {
                    Error::Input(format!("query position {position} is padding or out of range"))
                })?;
                let logits = self.logits_at(params, &cache, row);
                let probs = softmax(&logits);
                Ok(PositionOutput {
                    position,
                    logits,
                    probs,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ForwardOutput { positions })
    }

    /// Final-position encoder output, unit-normalised, plus its pre-norm length.
    pub fn representation(&self, cache: &WindowCache) -> (Vec<f64>, f64) {
        let d = self.config.d_model;
        let row = cache.last_row();
        let h = &cache.hidden[row * d..(row + 1) * d];
        let norm = h.iter().map(|v| v * v).sum::<f64>().sqrt();
        (h.iter().map(|v| v / norm).collect(), norm)
    }
}
