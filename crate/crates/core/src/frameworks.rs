//! Contrastive objectives layered on the masked-item loss: CL4SRec-style
//! augmented views and DuoRec-style supervised / dropout positives.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{query_window, ItemId, LeaveOneOutSplit};
use crate::error::{Error, Result};
use crate::model::{Dropout, Model, ParamVector};
use crate::util::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameworkKind {
    Baseline,
    Cl4srec,
    DuorecSup,
    DuorecUnsup,
    DuorecBoth,
}

impl FrameworkKind {
    pub const ALL: [FrameworkKind; 5] = [
        FrameworkKind::Baseline,
        FrameworkKind::Cl4srec,
        FrameworkKind::DuorecSup,
        FrameworkKind::DuorecUnsup,
        FrameworkKind::DuorecBoth,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FrameworkKind::Baseline => "baseline",
            FrameworkKind::Cl4srec => "cl4srec",
            FrameworkKind::DuorecSup => "duorec_sup",
            FrameworkKind::DuorecUnsup => "duorec_unsup",
            FrameworkKind::DuorecBoth => "duorec_both",
        }
    }

    /// Positive-pair family, used to group frameworks as "similar".
    pub fn family(self) -> &'static str {
        match self {
            FrameworkKind::Baseline => "baseline",
            FrameworkKind::Cl4srec => "cl4srec",
            _ => "duorec",
        }
    }
}

impl fmt::Display for FrameworkKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FrameworkKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FrameworkKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown framework kind {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrameworkSpec {
    pub kind: FrameworkKind,
    pub lambda_cl: f64,
    pub temperature: f64,
    pub crop: f64,
    pub mask: f64,
    pub reorder: f64,
}

impl Default for FrameworkSpec {
    fn default() -> Self {
        Self {
            kind: FrameworkKind::Baseline,
            lambda_cl: 0.1,
            temperature: 1.0,
            crop: 0.6,
            mask: 0.3,
            reorder: 0.3,
        }
    }
}

impl FrameworkSpec {
    pub fn new(kind: FrameworkKind) -> Self {
        Self { kind, ..Self::default() }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_cl >= 0.0 && self.lambda_cl.is_finite()) {
            return Err(Error::Config(format!("lambda_cl must be >= 0, got {}", self.lambda_cl)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        for (name, r) in [("crop", self.crop), ("mask", self.mask), ("reorder", self.reorder)] {
            if !(r > 0.0 && r < 1.0) {
                return Err(Error::Config(format!("{name} ratio must be in (0, 1), got {r}")));
            }
        }
        Ok(())
    }
}

/// Contiguous window of `max(1, ⌊ratio·len⌋)` items at a uniform start.
/// Sequences shorter than 2 are returned unchanged.
pub fn augment_crop(seq: &[ItemId], ratio: f64, rng: &mut Rng) -> Vec<ItemId> {
    if seq.len() < 2 {
        return seq.to_vec();
    }
    let keep = ((ratio * seq.len() as f64).floor() as usize).clamp(1, seq.len());
    let start = rng.random_range(0..=seq.len() - keep);
    seq[start..start + keep].to_vec()
}

/// Each position replaced by `mask_token` with probability `ratio`.
pub fn augment_mask(seq: &[ItemId], ratio: f64, mask_token: ItemId, rng: &mut Rng) -> Vec<ItemId> {
    if seq.len() < 2 {
        return seq.to_vec();
    }
    seq.iter()
        .map(|&v| if rng.random::<f64>() < ratio { mask_token } else { v })
        .collect()
}

/// Shuffles a uniformly placed span of `⌊ratio·len⌋` items.
pub fn augment_reorder(seq: &[ItemId], ratio: f64, rng: &mut Rng) -> Vec<ItemId> {
    let span = (ratio * seq.len() as f64).floor() as usize;
    if seq.len() < 2 || span < 2 {
        return seq.to_vec();
    }
    let span = span.min(seq.len());
    let start = rng.random_range(0..=seq.len() - span);
    let mut out = seq.to_vec();
    out[start..start + span].shuffle(rng);
    out
}

/// Augmentation ratios of a CL4SRec view. Unlike [`FrameworkSpec`] these
/// accept the closed limits (`crop = 1`, `mask = 0`, `reorder = 0`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augmentations {
    pub crop: f64,
    pub mask: f64,
    pub reorder: f64,
}

impl Augmentations {
    /// One augmentation, picked uniformly, applied to `seq`.
    pub fn view(&self, seq: &[ItemId], mask_token: ItemId, rng: &mut Rng) -> Vec<ItemId> {
        match rng.random_range(0..3u8) {
            0 => augment_crop(seq, self.crop, rng),
            1 => augment_mask(seq, self.mask, mask_token, rng),
            _ => augment_reorder(seq, self.reorder, rng),
        }
    }
}

/// Loss configuration consumed by the training step.
#[derive(Debug, Clone, PartialEq)]
pub struct LossSpec {
    pub kind: FrameworkKind,
    pub contrastive: Contrastive,
    pub lambda_cl: f64,
    pub temperature: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Contrastive {
    None,
    Augmented(Augmentations),
    Supervised,
    Unsupervised,
    /// Mean of the supervised and unsupervised terms.
    Both,
}

impl LossSpec {
    pub fn cross_entropy_only() -> Self {
        Self {
            kind: FrameworkKind::Baseline,
            contrastive: Contrastive::None,
            lambda_cl: 0.0,
            temperature: 1.0,
        }
    }

    pub fn has_contrastive(&self) -> bool {
        self.lambda_cl > 0.0 && self.contrastive != Contrastive::None
    }
}

pub fn build_loss_spec(spec: &FrameworkSpec) -> Result<LossSpec> {
    spec.validate()?;
    let contrastive = match spec.kind {
        FrameworkKind::Baseline => Contrastive::None,
        FrameworkKind::Cl4srec => Contrastive::Augmented(Augmentations {
            crop: spec.crop,
            mask: spec.mask,
            reorder: spec.reorder,
        }),
        FrameworkKind::DuorecSup => Contrastive::Supervised,
        FrameworkKind::DuorecUnsup => Contrastive::Unsupervised,
        FrameworkKind::DuorecBoth => Contrastive::Both,
    };
    Ok(LossSpec {
        kind: spec.kind,
        contrastive,
        lambda_cl: if contrastive == Contrastive::None { 0.0 } else { spec.lambda_cl },
        temperature: spec.temperature,
    })
}

/// In-batch InfoNCE over `2B` anchors with cosine similarity. Each anchor's
/// denominator holds every other representation (its positive included).
pub fn info_nce(z1: &[Vec<f64>], z2: &[Vec<f64>], temperature: f64) -> Result<f64> {
    Ok(info_nce_with_grad(z1, z2, temperature)?.0)
}

/// Loss and its gradients with respect to the raw (unnormalised) inputs.
pub fn info_nce_with_grad(
    z1: &[Vec<f64>],
    z2: &[Vec<f64>],
    temperature: f64,
) -> Result<(f64, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let b = z1.len();
    if z2.len() != b {
        return Err(Error::Input(format!("pair lists differ in length: {b} vs {}", z2.len())));
    }
    if b < 2 {
        return Err(Error::Input("InfoNCE needs at least two pairs for negatives".into()));
    }
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be > 0, got {temperature}")));
    }
    let raw: Vec<&Vec<f64>> = z1.iter().chain(z2).collect();
    let d = raw[0].len();
    if raw.iter().any(|z| z.len() != d) {
        return Err(Error::Input("representations differ in width".into()));
    }
    let norms: Vec<f64> = raw.iter().map(|z| z.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    if norms.iter().any(|&n| !(n > 0.0) || !n.is_finite()) {
        return Err(Error::Numeric("zero or non-finite representation in InfoNCE".into()));
    }
    let unit: Vec<Vec<f64>> = raw.iter().zip(&norms).map(|(z, n)| z.iter().map(|v| v / n).collect()).collect();
    let m = 2 * b;
    let mut sim = vec![0.0; m * m];
    for a in 0..m {
        for k in a..m {
            let s = unit[a].iter().zip(&unit[k]).map(|(x, y)| x * y).sum::<f64>() / temperature;
            sim[a * m + k] = s;
            sim[k * m + a] = s;
        }
    }
    let partner = |a: usize| if a < b { a + b } else { a - b };
    let mut loss = 0.0;
    // Gradient w.r.t. similarities, then chained to the unit vectors.
    let mut dsim = vec![0.0; m * m];
    let scale = 1.0 / m as f64;
    for a in 0..m {
        let row = &sim[a * m..(a + 1) * m];
        let mx = (0..m).filter(|&k| k != a).map(|k| row[k]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..m).filter(|&k| k != a).map(|k| (row[k] - mx).exp()).sum();
        let lse = mx + z.ln();
        loss += lse - row[partner(a)];
        for k in (0..m).filter(|&k| k != a) {
            dsim[a * m + k] += scale * (row[k] - lse).exp();
        }
        dsim[a * m + partner(a)] -= scale;
    }
    loss *= scale;
    let mut dunit = vec![vec![0.0; d]; m];
    for a in 0..m {
        for k in 0..m {
            let g = dsim[a * m + k] / temperature;
            if g == 0.0 {
                continue;
            }
            for c in 0..d {
                dunit[a][c] += g * unit[k][c];
                dunit[k][c] += g * unit[a][c];
            }
        }
    }
    let mut grads: Vec<Vec<f64>> = dunit
        .iter()
        .zip(&unit)
        .zip(&norms)
        .map(|((du, u), &n)| normalize_backward(u, n, du))
        .collect();
    let g2 = grads.split_off(b);
    Ok((loss, grads, g2))
}

/// Gradient through `u = x / |x|`.
pub(crate) fn normalize_backward(unit: &[f64], norm: f64, dunit: &[f64]) -> Vec<f64> {
    let dot: f64 = unit.iter().zip(dunit).map(|(u, g)| u * g).sum();
    unit.iter().zip(dunit).map(|(u, g)| (g - u * dot) / norm).collect()
}

/// Final-position representations of paired sequences, unit-normalised.
#[derive(Debug, Clone, PartialEq)]
pub struct PositivePairBatch {
    pub z1: Vec<Vec<f64>>,
    pub z2: Vec<Vec<f64>>,
}

/// One side of a positive pair: the encoder input and its dropout mode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct View {
    pub window: Vec<ItemId>,
    pub dropout: Dropout,
}

/// Users grouped by the target of their training example.
#[derive(Debug, Clone, Default)]
pub struct TargetIndex {
    by_target: BTreeMap<ItemId, Vec<usize>>,
}

impl TargetIndex {
    pub fn new(split: &LeaveOneOutSplit) -> Self {
        let mut by_target: BTreeMap<ItemId, Vec<usize>> = BTreeMap::new();
        for (u, user) in split.users.iter().enumerate() {
            by_target.entry(user.train_example().target).or_default().push(u);
        }
        Self { by_target }
    }

    /// A uniformly chosen other user sharing `user`'s target, if any.
    pub fn partner(&self, split: &LeaveOneOutSplit, user: usize, rng: &mut Rng) -> Option<usize> {
        let target = split.users[user].train_example().target;
        let group = self.by_target.get(&target)?;
        let others = group.len() - usize::from(group.contains(&user));
        if others == 0 {
            return None;
        }
        let pick = rng.random_range(0..others);
        group.iter().copied().filter(|&u| u != user).nth(pick)
    }
}

fn dropout_for(model: &Model, seed: u64) -> Dropout {
    if model.config().dropout > 0.0 {
        Dropout::On(seed)
    } else {
        Dropout::Off
    }
}

/// Encoder input for a user's training example: the context followed by the
/// mask token, truncated to the model window.
pub fn context_window(model: &Model, context: &[ItemId]) -> Vec<ItemId> {
    let cfg = model.config();
    query_window(context, cfg.max_len, cfg.mask_token())
}

pub fn augmented_views(
    model: &Model,
    split: &LeaveOneOutSplit,
    users: &[usize],
    aug: &Augmentations,
    rng: &mut Rng,
) -> Vec<(View, View)> {
    let mask = model.config().mask_token();
    users
        .iter()
        .map(|&u| {
            let ctx = split.users[u].train_example().context;
            let mut side = || {
                let seq = aug.view(ctx, mask, rng);
                View {
                    window: context_window(model, &seq),
                    dropout: dropout_for(model, rng.random()),
                }
            };
            let a = side();
            let b = side();
            (a, b)
        })
        .collect()
}

/// Same-target partner when one exists, otherwise the user's own sequence
/// under a second dropout draw.
pub fn supervised_views(
    model: &Model,
    split: &LeaveOneOutSplit,
    index: &TargetIndex,
    users: &[usize],
    rng: &mut Rng,
) -> Vec<(View, View)> {
    users
        .iter()
        .map(|&u| {
            let own = context_window(model, split.users[u].train_example().context);
            let partner = index.partner(split, u, rng);
            let s1 = rng.random();
            let s2 = rng.random();
            let other = match partner {
                Some(p) => context_window(model, split.users[p].train_example().context),
                None => own.clone(),
            };
            (
                View { window: own, dropout: dropout_for(model, s1) },
                View { window: other, dropout: dropout_for(model, s2) },
            )
        })
        .collect()
}

pub fn unsupervised_views(
    model: &Model,
    split: &LeaveOneOutSplit,
    users: &[usize],
    rng: &mut Rng,
) -> Result<Vec<(View, View)>> {
    if model.config().dropout <= 0.0 {
        return Err(Error::Degenerate(
            "dropout pairs need a dropout rate above zero".into(),
        ));
    }
    Ok(users
        .iter()
        .map(|&u| {
            let w = context_window(model, split.users[u].train_example().context);
            let s1 = rng.random();
            let s2 = rng.random();
            (
                View { window: w.clone(), dropout: Dropout::On(s1) },
                View { window: w, dropout: Dropout::On(s2) },
            )
        })
        .collect())
}

fn represent(model: &Model, params: &ParamVector, views: &[(View, View)]) -> Result<PositivePairBatch> {
    let rep = |v: &View| -> Result<Vec<f64>> {
        let cache = model.forward_cached(params, &v.window, v.dropout)?;
        Ok(model.representation(&cache).0)
    };
    let mut z1 = Vec::with_capacity(views.len());
    let mut z2 = Vec::with_capacity(views.len());
    for (a, b) in views {
        z1.push(rep(a)?);
        z2.push(rep(b)?);
    }
    Ok(PositivePairBatch { z1, z2 })
}

/// Supervised DuoRec positives for `users`: each paired with a same-target
/// user drawn from the whole split.
pub fn duorec_supervised_pairs(
    model: &Model,
    params: &ParamVector,
    split: &LeaveOneOutSplit,
    users: &[usize],
    rng: &mut Rng,
) -> Result<PositivePairBatch> {
    let index = TargetIndex::new(split);
    let views = supervised_views(model, split, &index, users, rng);
    represent(model, params, &views)
}

/// Two dropout passes over each user's sequence with seeds `seed1`, `seed2`.
pub fn duorec_unsupervised_pairs(
    model: &Model,
    params: &ParamVector,
    windows: &[Vec<ItemId>],
    seed1: u64,
    seed2: u64,
) -> Result<PositivePairBatch> {
    if model.config().dropout <= 0.0 {
        return Err(Error::Degenerate(
            "dropout pairs need a dropout rate above zero".into(),
        ));
    }
    let views: Vec<(View, View)> = windows
        .iter()
        .enumerate()
        .map(|(i, w)| {
            (
                View { window: w.clone(), dropout: Dropout::On(seed1.wrapping_add(i as u64)) },
                View { window: w.clone(), dropout: Dropout::On(seed2.wrapping_add(i as u64)) },
            )
        })
        .collect();
    represent(model, params, &views)
}
