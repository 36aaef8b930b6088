#![allow(dead_code)]

use mergerec::data::ItemId;
use mergerec::model::{Dropout, Model, ModelConfig, ParamVector};

/// d=8, 2 heads, 1 layer, T=8, |V|=12.
pub fn desk_model() -> Model {
    Model::new(ModelConfig {
        num_items: 12,
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        max_len: 8,
        dropout: 0.2,
    })
    .unwrap()
}

pub fn log_prob(m: &Model, p: &ParamVector, window: &[ItemId], position: usize, item: ItemId) -> f64 {
    let out = m.forward(p, window, &[position], Dropout::Off).unwrap();
    out.positions[0].probs[item as usize - 1].ln()
}

/// Straight-line forward pass written against segment names only: full
/// `T x T` attention with pad keys masked, no shared code with the library.
pub fn reference_probs(cfg: &ModelConfig, p: &ParamVector, window: &[ItemId], position: usize) -> Vec<f64> {
    let d = cfg.d_model;
    let t_len = window.len();
    let seg = |name: &str| p.segment(name).unwrap().to_vec();
    let emb = seg("item_embedding");
    let pos = seg("pos_embedding");

    let mut x: Vec<Vec<f64>> = (0..t_len)
        .map(|t| (0..d).map(|c| emb[window[t] as usize * d + c] + pos[t * d + c]).collect())
        .collect();

    let ln = |v: &Vec<f64>, g: &[f64], b: &[f64]| -> Vec<f64> {
        let mean: f64 = v.iter().sum::<f64>() / d as f64;
        let var: f64 = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / d as f64;
        (0..d).map(|c| g[c] * (v[c] - mean) / (var + 1e-5).sqrt() + b[c]).collect()
    };
    let vecmat = |v: &[f64], w: &[f64], cols: usize| -> Vec<f64> {
        (0..cols).map(|o| (0..v.len()).map(|i| v[i] * w[i * cols + o]).sum()).collect()
    };
    let gelu = |u: f64| 0.5 * u * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (u + 0.044715 * u.powi(3))).tanh());

    for l in 0..cfg.n_layers {
        let s = |n: &str| seg(&format!("layer{l}.{n}"));
        let (wq, wk, wv, wo) = (s("attn_q"), s("attn_k"), s("attn_v"), s("attn_o"));
        let a: Vec<Vec<f64>> = x.iter().map(|r| ln(r, &s("ln1_scale"), &s("ln1_shift"))).collect();
        let q: Vec<Vec<f64>> = a.iter().map(|r| vecmat(r, &wq, d)).collect();
        let k: Vec<Vec<f64>> = a.iter().map(|r| vecmat(r, &wk, d)).collect();
        let v: Vec<Vec<f64>> = a.iter().map(|r| vecmat(r, &wv, d)).collect();
        let dh = d / cfg.n_heads;
        let mut ctx = vec![vec![0.0; d]; t_len];
        for h in 0..cfg.n_heads {
            for t in 0..t_len {
                let mut scores: Vec<f64> = (0..t_len)
                    .map(|s2| {
                        if window[s2] == 0 {
                            f64::NEG_INFINITY
                        } else {
                            (h * dh..(h + 1) * dh).map(|c| q[t][c] * k[s2][c]).sum::<f64>() / (dh as f64).sqrt()
                        }
                    })
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for sc in scores.iter_mut() {
                    *sc = (*sc - mx).exp();
                    z += *sc;
                }
                for s2 in 0..t_len {
                    for c in h * dh..(h + 1) * dh {
                        ctx[t][c] += scores[s2] / z * v[s2][c];
                    }
                }
            }
        }
        for t in 0..t_len {
            let o = vecmat(&ctx[t], &wo, d);
            for c in 0..d {
                x[t][c] += o[c];
            }
        }
        let (w1, b1, w2, b2) = (s("ffn_w1"), s("ffn_b1"), s("ffn_w2"), s("ffn_b2"));
        for t in 0..t_len {
            let b = ln(&x[t], &s("ln2_scale"), &s("ln2_shift"));
            let u = vecmat(&b, &w1, 4 * d);
            let g: Vec<f64> = u.iter().zip(&b1).map(|(a, bb)| gelu(a + bb)).collect();
            let f = vecmat(&g, &w2, d);
            for c in 0..d {
                x[t][c] += f[c] + b2[c];
            }
        }
    }
    let h = ln(&x[position], &seg("final_ln_scale"), &seg("final_ln_shift"));
    let bias = seg("output_bias");
    let logits: Vec<f64> = (1..=cfg.num_items)
        .map(|j| (0..d).map(|c| h[c] * emb[j * d + c]).sum::<f64>() + bias[j - 1])
        .collect();
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

pub struct GradCheck {
    pub segment: String,
    pub max_rel_err: f64,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub failures: usize,
}

/// Central differences with step `step * max(1, |θ_k|)` on every coordinate.
/// A coordinate fails when `|a - n| > max(1e-6, 1e-3 * max(|a|, |n|))`.
pub fn finite_difference_check(
    m: &Model,
    p: &ParamVector,
    window: &[ItemId],
    position: usize,
    item: ItemId,
    step: f64,
) -> Vec<GradCheck> {
    let analytic = m.grad_log_prob(p, window, position, item).unwrap();
    let mut out = Vec::new();
    for seg in p.segments() {
        let mut worst = GradCheck {
            segment: seg.name.clone(),
            max_rel_err: 0.0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
            failures: 0,
        };
        for k in seg.offset..seg.offset + seg.len {
            let h = step * p.values()[k].abs().max(1.0);
            let mut plus = p.clone();
            plus.values_mut()[k] += h;
            let mut minus = p.clone();
            minus.values_mut()[k] -= h;
            let numeric = (log_prob(m, &plus, window, position, item) - log_prob(m, &minus, window, position, item)) / (2.0 * h);
            let a = analytic[k];
            let diff = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            if diff > (1e-3 * scale).max(1e-6) {
                worst.failures += 1;
            }
            let rel = diff / scale.max(1e-6);
            if rel > worst.max_rel_err {
                worst.max_rel_err = rel;
                worst.worst_analytic = a;
                worst.worst_numeric = numeric;
            }
        }
        out.push(worst);
    }
    out
}

/// Synthetic 48-user, 12-item split with the desk model trained on it.
pub fn trained_desk(seed: u64, epochs: usize) -> (Model, mergerec::data::LeaveOneOutSplit, ParamVector) {
    use mergerec::data::{build_dataset, split_leave_one_out, synthetic};
    use mergerec::frameworks::LossSpec;
    use mergerec::model::optim::AdamConfig;
    use mergerec::train::{TrainConfig, Trainer};
    use mergerec::util::rng_from_seed;

    let syn = synthetic::SyntheticConfig {
        num_users: 48,
        num_items: 12,
        num_chains: 3,
        min_len: 4,
        max_len: 10,
        follow_prob: 0.8,
        popularity_exponent: 0.8,
    };
    let interactions = synthetic::generate(&syn, &mut rng_from_seed(seed)).unwrap();
    let split = split_leave_one_out(&build_dataset(&interactions, 3).unwrap()).unwrap();
    let model = desk_model();
    let mut params = model.init_params(seed + 1);
    let cfg = TrainConfig {
        batch_size: 8,
        mask_prob: 0.2,
        adam: AdamConfig { lr: 1e-2, ..AdamConfig::default() },
    };
    let mut trainer = Trainer::new(&model, &split, LossSpec::cross_entropy_only(), cfg).unwrap();
    let mut rng = rng_from_seed(seed + 2);
    for _ in 0..epochs {
        trainer.epoch(&mut params, &mut rng).unwrap();
    }
    (model, split, params)
}
