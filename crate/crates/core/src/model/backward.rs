use super::forward::{gelu_grad, LnCache};
use super::{LayerLayout, Model, ParamVector, WindowCache};
use crate::data::ItemId;
use crate::error::{Error, Result};
use crate::model::Dropout;

/// `dW += x^T dy`, returns `dx = dy W^T`.
fn matmul_backward(
    x: &[f64],
    dy: &[f64],
    rows: usize,
    din: usize,
    w: &[f64],
    dout: usize,
    grad_w: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; rows * din];
    for r in 0..rows {
        let dyr = &dy[r * dout..(r + 1) * dout];
        let xr = &x[r * din..(r + 1) * din];
        for i in 0..din {
            let wi = &w[i * dout..(i + 1) * dout];
            let gwi = &mut grad_w[i * dout..(i + 1) * dout];
            let xi = xr[i];
            let mut acc = 0.0;
            for o in 0..dout {
                gwi[o] += xi * dyr[o];
                acc += dyr[o] * wi[o];
            }
            dx[r * din + i] = acc;
        }
    }
    dx
}

fn layer_norm_backward(
    dy: &[f64],
    cache: &LnCache,
    rows: usize,
    d: usize,
    scale: &[f64],
    grad: &mut [f64],
    scale_at: usize,
    shift_at: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; rows * d];
    let mut dxhat = vec![0.0; d];
    for r in 0..rows {
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let dyr = &dy[r * d..(r + 1) * d];
        for c in 0..d {
            grad[scale_at + c] += dyr[c] * xh[c];
            grad[shift_at + c] += dyr[c];
            dxhat[c] = dyr[c] * scale[c];
        }
        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dxhat_xhat = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let is = cache.inv_std[r];
        for c in 0..d {
            dx[r * d + c] = is * (dxhat[c] - mean_dxhat - xh[c] * mean_dxhat_xhat);
        }
    }
    dx
}

fn apply(mask: &Option<Vec<f64>>, x: &mut [f64]) {
    if let Some(m) = mask {
        for (v, &k) in x.iter_mut().zip(m) {
            *v *= k;
        }
    }
}

impl Model {
    /// Accumulates into `grad` the parameter gradient of `sum(dhidden * hidden)`
    /// for the window in `cache`.
    pub fn backward(
        &self,
        params: &ParamVector,
        cache: &WindowCache,
        dhidden: &[f64],
        grad: &mut [f64],
    ) {
        let theta = params.values();
        let lay = &self.layout;
        let d = self.config.d_model;
        let n = cache.tokens.len();
        debug_assert_eq!(dhidden.len(), n * d);
        debug_assert_eq!(grad.len(), theta.len());

        let mut dx = layer_norm_backward(
            dhidden,
            &cache.final_ln,
            n,
            d,
            &theta[lay.final_ln_scale..][..d],
            grad,
            lay.final_ln_scale,
            lay.final_ln_shift,
        );
        for (ll, lc) in lay.layers.iter().zip(&cache.layers).rev() {
            dx = self.layer_backward(theta, ll, lc, dx, n, grad);
        }
        apply(&cache.drop_emb, &mut dx);
        for (r, (&tok, &pos)) in cache.tokens.iter().zip(&cache.positions).enumerate() {
            let e = lay.item_embedding + tok as usize * d;
            let p = lay.pos_embedding + pos * d;
            for c in 0..d {
                grad[e + c] += dx[r * d + c];
                grad[p + c] += dx[r * d + c];
            }
        }
    }

    fn layer_backward(
        &self,
        theta: &[f64],
        ll: &LayerLayout,
        lc: &super::forward::LayerCache,
        dout: Vec<f64>,
        n: usize,
        grad: &mut [f64],
    ) -> Vec<f64> {
        let cfg = &self.config;
        let d = cfg.d_model;
        let f = cfg.ffn_dim();
        let h = cfg.n_heads;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        // feed-forward branch
        let mut dmid = dout.clone();
        let mut dff = dout;
        apply(&lc.drop_ffn, &mut dff);
        for r in 0..n {
            for c in 0..d {
                grad[ll.ffn_b2 + c] += dff[r * d + c];
            }
        }
        let dg = matmul_backward(
            &lc.g,
            &dff,
            n,
            f,
            &theta[ll.ffn_w2..][..f * d],
            d,
            &mut grad[ll.ffn_w2..ll.ffn_w2 + f * d],
        );
        let du: Vec<f64> = dg.iter().zip(&lc.u).map(|(g, &u)| g * gelu_grad(u)).collect();
        for r in 0..n {
            for c in 0..f {
                grad[ll.ffn_b1 + c] += du[r * f + c];
            }
        }
        let db = matmul_backward(
            &lc.b,
            &du,
            n,
            d,
            &theta[ll.ffn_w1..][..d * f],
            f,
            &mut grad[ll.ffn_w1..ll.ffn_w1 + d * f],
        );
        let dmid_ln = layer_norm_backward(
            &db,
            &lc.ln2,
            n,
            d,
            &theta[ll.ln2_scale..][..d],
            grad,
            ll.ln2_scale,
            ll.ln2_shift,
        );
        for (a, b) in dmid.iter_mut().zip(&dmid_ln) {
            *a += b;
        }

        // attention branch
        let mut dx = dmid.clone();
        let mut do_ = dmid;
        apply(&lc.drop_attn, &mut do_);
        let dctx = matmul_backward(
            &lc.ctx,
            &do_,
            n,
            d,
            &theta[ll.attn_o..][..d * d],
            d,
            &mut grad[ll.attn_o..ll.attn_o + d * d],
        );
        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; n * d];
        let mut dv = vec![0.0; n * d];
        let mut datt = vec![0.0; n];
        for head in 0..h {
            let c0 = head * dh;
            for t in 0..n {
                let att = &lc.att[(head * n + t) * n..][..n];
                for s in 0..n {
                    let mut acc = 0.0;
                    for c in c0..c0 + dh {
                        acc += dctx[t * d + c] * lc.v[s * d + c];
                        dv[s * d + c] += att[s] * dctx[t * d + c];
                    }
                    datt[s] = acc;
                }
                let dot: f64 = att.iter().zip(&datt).map(|(a, b)| a * b).sum();
                for s in 0..n {
                    let dscore = att[s] * (datt[s] - dot) * scale;
                    if dscore == 0.0 {
                        continue;
                    }
                    for c in c0..c0 + dh {
                        dq[t * d + c] += dscore * lc.k[s * d + c];
                        dk[s * d + c] += dscore * lc.q[t * d + c];
                    }
                }
            }
        }
        let mut da = matmul_backward(
            &lc.a,
            &dq,
            n,
            d,
            &theta[ll.attn_q..][..d * d],
            d,
            &mut grad[ll.attn_q..ll.attn_q + d * d],
        );
        for (proj, dp) in [(ll.attn_k, &dk), (ll.attn_v, &dv)] {
            let part = matmul_backward(
                &lc.a,
                dp,
                n,
                d,
                &theta[proj..][..d * d],
                d,
                &mut grad[proj..proj + d * d],
            );
            for (a, b) in da.iter_mut().zip(&part) {
                *a += b;
            }
        }
        let dx_ln = layer_norm_backward(
            &da,
            &lc.ln1,
            n,
            d,
            &theta[ll.ln1_scale..][..d],
            grad,
            ll.ln1_scale,
            ll.ln1_shift,
        );
        for (a, b) in dx.iter_mut().zip(&dx_ln) {
            *a += b;
        }
        dx
    }

    /// Backward through the tied output head at `row`: accumulates the item
    /// embedding and bias gradients into `grad` and the hidden-state gradient
    /// into `dhidden`.
    pub(crate) fn output_backward(
        &self,
        params: &ParamVector,
        cache: &WindowCache,
        row: usize,
        dlogits: &[f64],
        dhidden: &mut [f64],
        grad: &mut [f64],
    ) {
        let theta = params.values();
        let lay = &self.layout;
        let d = self.config.d_model;
        let h = &cache.hidden[row * d..(row + 1) * d];
        let dh = &mut dhidden[row * d..(row + 1) * d];
        for (j0, &dl) in dlogits.iter().enumerate() {
            if dl == 0.0 {
                continue;
            }
            let e = lay.item_embedding + (j0 + 1) * d;
            grad[lay.output_bias + j0] += dl;
            for c in 0..d {
                grad[e + c] += dl * h[c];
                dh[c] += dl * theta[e + c];
            }
        }
    }

    /// Accumulates `∇ log p(item | window)` at cache row `row`, given the
    /// already computed probabilities at that row.
    pub(crate) fn accumulate_log_prob_grad(
        &self,
        params: &ParamVector,
        cache: &WindowCache,
        row: usize,
        probs: &[f64],
        item: ItemId,
        grad: &mut [f64],
    ) {
        let mut dlogits: Vec<f64> = probs.iter().map(|p| -p).collect();
        dlogits[item as usize - 1] += 1.0;
        let mut dhidden = vec![0.0; cache.tokens.len() * self.config.d_model];
        self.output_backward(params, cache, row, &dlogits, &mut dhidden, grad);
        self.backward(params, cache, &dhidden, grad);
    }

    fn check_item(&self, item: ItemId) -> Result<()> {
        if item == 0 || item as usize > self.config.num_items {
            return Err(Error::Input(format!(
                "item {item} outside 1..={}",
                self.config.num_items
            )));
        }
        Ok(())
    }

    /// Exact gradient of `log p(item | window)` at window position `position`,
    /// dropout off.
    pub fn grad_log_prob(
        &self,
        params: &ParamVector,
        window: &[ItemId],
        position: usize,
        item: ItemId,
    ) -> Result<Vec<f64>> {
        self.grad_sum_log_prob(params, &[window.to_vec()], &[position], item)
    }

    /// Gradient of `Σ_i log p(item | window_i)` accumulated in one pass over
    /// the batch.
    pub fn grad_sum_log_prob(
        &self,
        params: &ParamVector,
        windows: &[Vec<ItemId>],
        positions: &[usize],
        item: ItemId,
    ) -> Result<Vec<f64>> {
        self.check_item(item)?;
        if windows.len() != positions.len() {
            return Err(Error::Input("one query position per window required".into()));
        }
        let mut grad = vec![0.0; params.len()];
        for (window, &position) in windows.iter().zip(positions) {
            let cache = self.forward_cached(params, window, Dropout::Off)?;
            let row = cache
                .row_of(position)
                .ok_or_else(|| Error::Input(format!("position {position} is padding")))?;
            let probs = self.probs_at(params, &cache, row);
            self.accumulate_log_prob_grad(params, &cache, row, &probs, item, &mut grad);
        }
        Ok(grad)
    }
}
