//! Masked-item training with an optional contrastive term.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{make_masked_batch, ItemId, LeaveOneOutSplit};
use crate::error::{Error, Result};
use crate::frameworks::{
    augmented_views, info_nce_with_grad, supervised_views, unsupervised_views, Contrastive,
    LossSpec, TargetIndex, View,
};
use crate::model::optim::{Adam, AdamConfig};
use crate::model::{Dropout, Model, ParamVector, WindowCache};
use crate::util::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub mask_prob: f64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            mask_prob: 0.2,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be >= 2".into()));
        }
        if !(self.mask_prob > 0.0 && self.mask_prob < 1.0) {
            return Err(Error::Config(format!("mask_prob must be in (0, 1), got {}", self.mask_prob)));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config("learning rate must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepLosses {
    pub ce: f64,
    pub cl: f64,
}

/// Everything a training run carries between steps.
pub struct Trainer<'a> {
    pub model: &'a Model,
    pub split: &'a LeaveOneOutSplit,
    pub loss: LossSpec,
    pub config: TrainConfig,
    pub adam: Adam,
    index: TargetIndex,
}

impl<'a> Trainer<'a> {
    pub fn new(model: &'a Model, split: &'a LeaveOneOutSplit, loss: LossSpec, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if split.num_items != model.config().num_items {
            return Err(Error::Config(format!(
                "model has {} items, split has {}",
                model.config().num_items,
                split.num_items
            )));
        }
        Ok(Self {
            model,
            split,
            loss,
            config,
            adam: Adam::new(config.adam, model.num_params()),
            index: TargetIndex::new(split),
        })
    }

    /// Fresh optimiser state, same loss and data.
    pub fn reset_optimizer(&mut self) {
        self.adam = Adam::new(self.config.adam, self.model.num_params());
    }

    pub fn step(&mut self, params: &mut ParamVector, users: &[usize], rng: &mut Rng) -> Result<StepLosses> {
        let (losses, grad) = self.gradient(params, users, rng)?;
        self.adam.update(params.values_mut(), &grad);
        if !params.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite parameters after Adam step {}",
                self.adam.steps()
            )));
        }
        Ok(losses)
    }

    /// Shuffled pass over all users. A trailing batch of one joins the
    /// previous batch so every contrastive batch has negatives.
    pub fn epoch(&mut self, params: &mut ParamVector, rng: &mut Rng) -> Result<StepLosses> {
        let mut order: Vec<usize> = (0..self.split.num_users()).collect();
        order.shuffle(rng);
        let batches = batch_bounds(order.len(), self.config.batch_size);
        let mut total = StepLosses::default();
        for &(a, b) in &batches {
            let l = self.step(params, &order[a..b], rng)?;
            total.ce += l.ce;
            total.cl += l.cl;
        }
        let n = batches.len().max(1) as f64;
        Ok(StepLosses { ce: total.ce / n, cl: total.cl / n })
    }

    /// Loss and gradient of `ce + λ·cl` on one batch, without updating.
    pub fn gradient(&self, params: &ParamVector, users: &[usize], rng: &mut Rng) -> Result<(StepLosses, Vec<f64>)> {
        let model = self.model;
        let cfg = model.config();
        let prefixes: Vec<&[ItemId]> = users.iter().map(|&u| self.split.users[u].train.as_slice()).collect();
        let batch = make_masked_batch(&prefixes, cfg.max_len, self.config.mask_prob, cfg.mask_token(), rng)?;
        let seeds: Vec<u64> = (0..batch.len()).map(|_| rng.random()).collect();
        let num_labels = batch.num_labels() as f64;

        let per_seq = (0..batch.len())
            .into_par_iter()
            .map(|i| -> Result<(f64, Vec<f64>)> {
                let dropout = if cfg.dropout > 0.0 { Dropout::On(seeds[i]) } else { Dropout::Off };
                let cache = model.forward_cached(params, &batch.inputs[i], dropout)?;
                let mut grad = vec![0.0; params.len()];
                let mut dhidden = vec![0.0; cache.num_tokens() * cfg.d_model];
                let mut loss = 0.0;
                for (pos, label) in batch.labels[i].iter().enumerate() {
                    let Some(item) = *label else { continue };
                    let row = cache.row_of(pos).expect("labelled positions are never padding");
                    let mut dlogits = model.probs_at(params, &cache, row);
                    let k = item as usize - 1;
                    loss -= dlogits[k].ln();
                    dlogits[k] -= 1.0;
                    for g in dlogits.iter_mut() {
                        *g /= num_labels;
                    }
                    model.output_backward(params, &cache, row, &dlogits, &mut dhidden, &mut grad);
                }
                model.backward(params, &cache, &dhidden, &mut grad);
                Ok((loss, grad))
            })
            .collect::<Result<Vec<_>>>()?;

        let mut grad = vec![0.0; params.len()];
        let mut ce = 0.0;
        for (loss, g) in &per_seq {
            ce += loss;
            add_into(&mut grad, g, 1.0);
        }
        ce /= num_labels;

        let mut cl = 0.0;
        if self.loss.has_contrastive() {
            let lambda = self.loss.lambda_cl;
            let tau = self.loss.temperature;
            let terms: Vec<(Vec<(View, View)>, f64)> = match self.loss.contrastive {
                Contrastive::None => Vec::new(),
                Contrastive::Augmented(aug) => vec![(augmented_views(model, self.split, users, &aug, rng), 1.0)],
                Contrastive::Supervised => {
                    vec![(supervised_views(model, self.split, &self.index, users, rng), 1.0)]
                }
                Contrastive::Unsupervised => vec![(unsupervised_views(model, self.split, users, rng)?, 1.0)],
                Contrastive::Both => vec![
                    (supervised_views(model, self.split, &self.index, users, rng), 0.5),
                    (unsupervised_views(model, self.split, users, rng)?, 0.5),
                ],
            };
            for (views, weight) in terms {
                let (loss, g) = contrastive_gradient(model, params, &views, tau)?;
                cl += weight * loss;
                add_into(&mut grad, &g, lambda * weight);
            }
        }

        if !ce.is_finite() || !cl.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite training loss (ce {ce}, cl {cl}) on a batch of {} users",
                users.len()
            )));
        }
        Ok((StepLosses { ce, cl }, grad))
    }
}

fn add_into(acc: &mut [f64], g: &[f64], scale: f64) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += scale * b;
    }
}

/// InfoNCE over the final-row hidden states of `views` and its parameter
/// gradient.
fn contrastive_gradient(
    model: &Model,
    params: &ParamVector,
    views: &[(View, View)],
    temperature: f64,
) -> Result<(f64, Vec<f64>)> {
    let d = model.config().d_model;
    let flat: Vec<&View> = views.iter().map(|(a, _)| a).chain(views.iter().map(|(_, b)| b)).collect();
    let caches = flat
        .par_iter()
        .map(|v| model.forward_cached(params, &v.window, v.dropout))
        .collect::<Result<Vec<WindowCache>>>()?;
    let rows: Vec<Vec<f64>> = caches
        .iter()
        .map(|c| c.hidden()[c.last_row() * d..(c.last_row() + 1) * d].to_vec())
        .collect();
    let b = views.len();
    let (loss, g1, g2) = info_nce_with_grad(&rows[..b], &rows[b..], temperature)?;
    let dz: Vec<Vec<f64>> = g1.into_iter().chain(g2).collect();
    let grads: Vec<Vec<f64>> = caches
        .par_iter()
        .zip(&dz)
        .map(|(cache, dz)| {
            let mut dhidden = vec![0.0; cache.num_tokens() * d];
            let row = cache.last_row();
            dhidden[row * d..(row + 1) * d].copy_from_slice(dz);
            let mut grad = vec![0.0; params.len()];
            model.backward(params, cache, &dhidden, &mut grad);
            grad
        })
        .collect();
    let mut total = vec![0.0; params.len()];
    for g in &grads {
        add_into(&mut total, g, 1.0);
    }
    Ok((loss, total))
}

/// `[start, end)` ranges of `batch_size`, with a final singleton merged into
/// its predecessor.
pub fn batch_bounds(n: usize, batch_size: usize) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = (0..n)
        .step_by(batch_size.max(1))
        .map(|a| (a, (a + batch_size).min(n)))
        .collect();
    if out.len() >= 2 && out.last().is_some_and(|&(a, b)| b - a == 1) {
        let (_, end) = out.pop().unwrap();
        out.last_mut().unwrap().1 = end;
    }
    out
}
