//! Diagonal Fisher information: exact enumeration and the batch-wise
//! estimator with item sampling.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand_distr::weighted::WeightedIndex;
use rand_distr::Distribution;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{query_window, ItemId, LeaveOneOutSplit};
use crate::error::{Error, Result};
use crate::frameworks::context_window;
use crate::model::{read_segments, write_segments};
use crate::model::{Dropout, Model, ParamVector, Segment, WindowCache};
use crate::util::{self, rng_from_seed};

const FISHER_MAGIC: &[u8; 4] = b"MRGF";
const FISHER_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SamplingMethod {
    #[serde(rename = "random")]
    Random,
    #[serde(rename = "topk")]
    TopK,
    #[serde(rename = "model", alias = "model_based")]
    ModelBased,
    #[serde(rename = "target", alias = "target_item")]
    TargetItem,
}

impl SamplingMethod {
    pub const ALL: [SamplingMethod; 4] = [
        SamplingMethod::Random,
        SamplingMethod::TopK,
        SamplingMethod::ModelBased,
        SamplingMethod::TargetItem,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SamplingMethod::Random => "random",
            SamplingMethod::TopK => "topk",
            SamplingMethod::ModelBased => "model",
            SamplingMethod::TargetItem => "target",
        }
    }

    fn tag(self) -> u8 {
        match self {
            SamplingMethod::Random => 0,
            SamplingMethod::TopK => 1,
            SamplingMethod::ModelBased => 2,
            SamplingMethod::TargetItem => 3,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        SamplingMethod::ALL
            .into_iter()
            .find(|m| m.tag() == tag)
            .ok_or_else(|| Error::Format(format!("unknown sampling method tag {tag}")))
    }
}

impl fmt::Display for SamplingMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SamplingMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(SamplingMethod::Random),
            "topk" => Ok(SamplingMethod::TopK),
            "model" | "model_based" => Ok(SamplingMethod::ModelBased),
            "target" | "target_item" => Ok(SamplingMethod::TargetItem),
            _ => Err(Error::Config(format!(
                "unknown sampling method {s:?} (expected random|topk|model|target)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingSpec {
    pub method: SamplingMethod,
    /// Items per batch; ignored (always 1) for the target method.
    #[serde(default = "one")]
    pub n: usize,
}

fn one() -> usize {
    1
}

impl SamplingSpec {
    pub fn new(method: SamplingMethod, n: usize) -> Self {
        let n = if method == SamplingMethod::TargetItem { 1 } else { n };
        Self { method, n }
    }

    pub fn target() -> Self {
        Self::new(SamplingMethod::TargetItem, 1)
    }

    /// Backward passes spent on one batch.
    pub fn passes_per_batch(&self) -> u64 {
        match self.method {
            SamplingMethod::TargetItem => 1,
            _ => self.n as u64,
        }
    }

    pub fn validate(&self, num_items: usize) -> Result<()> {
        match self.method {
            SamplingMethod::TargetItem => Ok(()),
            _ if self.n == 0 => Err(Error::Config("sample size must be >= 1".into())),
            SamplingMethod::Random | SamplingMethod::TopK if self.n > num_items => Err(Error::Config(format!(
                "cannot pick {} distinct items out of {num_items}",
                self.n
            ))),
            _ => Ok(()),
        }
    }

    pub fn label(&self) -> String {
        match self.method {
            SamplingMethod::TargetItem => "target".into(),
            m => format!("{m}(n={})", self.n),
        }
    }
}

/// How sequences are grouped into batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchOrder {
    /// Descending top-1 probability, ties by user index.
    Sorted,
    /// Uniform random permutation.
    Shuffled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FisherMeta {
    pub method: SamplingMethod,
    pub n: usize,
    pub batch_size: usize,
    pub num_sequences: usize,
    pub seed: u64,
    pub order: BatchOrder,
}

/// Nonnegative per-coordinate Fisher estimate laid out like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherDiag {
    values: ParamVector,
    pub meta: FisherMeta,
}

impl FisherDiag {
    pub fn new(values: ParamVector, meta: FisherMeta) -> Result<Self> {
        if let Some((i, v)) = values.values().iter().enumerate().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::Validation(format!("Fisher coordinate {i} is {v}, must be finite and >= 0")));
        }
        Ok(Self { values, meta })
    }

    #[cfg(test)]
    pub(crate) fn unchecked(values: ParamVector, meta: FisherMeta) -> Self {
        Self { values, meta }
    }

    pub fn arch_hash(&self) -> u64 {
        self.values.arch_hash()
    }

    pub fn values(&self) -> &[f64] {
        self.values.values()
    }

    pub fn as_params(&self) -> &ParamVector {
        &self.values
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        self.values.segment(name)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Copy with every coordinate multiplied by `factor > 0`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        let v = self.values().iter().map(|x| x * factor).collect();
        Self::new(self.values.with_values(v)?, self.meta)
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(FISHER_MAGIC)?;
        util::write_u32(w, FISHER_VERSION)?;
        util::write_u64(w, self.arch_hash())?;
        w.write_all(&[self.meta.method.tag()])?;
        util::write_u32(w, self.meta.n as u32)?;
        util::write_u32(w, self.meta.batch_size as u32)?;
        util::write_u32(w, self.meta.num_sequences as u32)?;
        util::write_u64(w, self.meta.seed)?;
        w.write_all(&[match self.meta.order {
            BatchOrder::Sorted => 0,
            BatchOrder::Shuffled => 1,
        }])?;
        write_segments(w, &self.values)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn digest(&self) -> String {
        util::sha256_hex(&self.to_bytes())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        util::expect_magic(r, FISHER_MAGIC)?;
        let version = util::read_u32(r)?;
        if version != FISHER_VERSION {
            return Err(Error::Format(format!("unsupported Fisher file version {version}")));
        }
        let arch_hash = util::read_u64(r)?;
        let method = SamplingMethod::from_tag(util::read_u8(r)?)?;
        let n = util::read_u32(r)? as usize;
        let batch_size = util::read_u32(r)? as usize;
        let num_sequences = util::read_u32(r)? as usize;
        let seed = util::read_u64(r)?;
        let order = match util::read_u8(r)? {
            0 => BatchOrder::Sorted,
            1 => BatchOrder::Shuffled,
            t => return Err(Error::Format(format!("unknown batch order tag {t}"))),
        };
        let (segments, values) = read_segments(r)?;
        util::expect_eof(r)?;
        let segments: Arc<[Segment]> = segments.into();
        let values = ParamVector::new(arch_hash, segments, values)?;
        Self::new(
            values,
            FisherMeta {
                method,
                n,
                batch_size,
                num_sequences,
                seed,
                order,
            },
        )
    }

    pub fn read_expecting<R: Read>(r: &mut R, expected: u64) -> Result<Self> {
        let f = Self::read(r)?;
        if f.arch_hash() != expected {
            return Err(Error::ArchMismatch {
                expected,
                found: f.arch_hash(),
            });
        }
        Ok(f)
    }
}

/// Backward-pass accounting of one estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FisherStats {
    pub num_batches: u64,
    pub backward_passes: u64,
}

/// A user's Fisher example, encoded once: forward cache at the query row.
struct Prepared {
    cache: WindowCache,
    row: usize,
    probs: Vec<f64>,
    target: ItemId,
}

fn prepare(model: &Model, params: &ParamVector, split: &LeaveOneOutSplit) -> Result<Vec<Prepared>> {
    if split.users.is_empty() {
        return Err(Error::EmptyDataset("split has no users".into()));
    }
    split
        .users
        .par_iter()
        .map(|u| {
            let ex = u.train_example();
            let window = context_window(model, ex.context);
            let cache = model.forward_cached(params, &window, Dropout::Off)?;
            let row = cache.last_row();
            let probs = model.probs_at(params, &cache, row);
            Ok(Prepared {
                cache,
                row,
                probs,
                target: ex.target,
            })
        })
        .collect()
}

/// One backward pass: gradient of `Σ_i log p(items[i] | s_i)` over a batch.
fn batch_gradient(model: &Model, params: &ParamVector, batch: &[&Prepared], items: &[ItemId]) -> Vec<f64> {
    let mut grad = vec![0.0; params.len()];
    for (p, &item) in batch.iter().zip(items) {
        model.accumulate_log_prob_grad(params, &p.cache, p.row, &p.probs, item, &mut grad);
    }
    grad
}

fn add_weighted_square(acc: &mut [f64], grad: &[f64], weight: f64) {
    for (a, g) in acc.iter_mut().zip(grad) {
        *a += weight * g * g;
    }
}

fn finish(params: &ParamVector, mut acc: Vec<f64>, n: usize, meta: FisherMeta) -> Result<FisherDiag> {
    for v in acc.iter_mut() {
        *v /= n as f64;
    }
    if let Some(i) = acc.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("Fisher accumulation is non-finite at coordinate {i}")));
    }
    FisherDiag::new(params.with_values(acc)?, meta)
}

/// Exact `(1/N) Σ_i Σ_j p(j|s_i) (∇ log p(j|s_i))²` by full enumeration.
pub fn full_fisher_diag(model: &Model, params: &ParamVector, split: &LeaveOneOutSplit) -> Result<FisherDiag> {
    let prepared = prepare(model, params, split)?;
    let per_user: Vec<Vec<f64>> = prepared
        .par_iter()
        .map(|p| {
            let mut acc = vec![0.0; params.len()];
            for j in 1..=model.config().num_items as ItemId {
                let g = batch_gradient(model, params, &[p], &[j]);
                add_weighted_square(&mut acc, &g, p.probs[j as usize - 1]);
            }
            acc
        })
        .collect();
    let mut acc = vec![0.0; params.len()];
    for u in &per_user {
        for (a, v) in acc.iter_mut().zip(u) {
            *a += v;
        }
    }
    let n = prepared.len();
    finish(
        params,
        acc,
        n,
        FisherMeta {
            method: SamplingMethod::TopK,
            n: model.config().num_items,
            batch_size: 1,
            num_sequences: n,
            seed: 0,
            order: BatchOrder::Sorted,
        },
    )
}

/// User indices by descending top-1 probability, ties by index.
pub fn sort_sequences_by_prob(model: &Model, params: &ParamVector, split: &LeaveOneOutSplit) -> Result<Vec<usize>> {
    let prepared = prepare(model, params, split)?;
    Ok(sorted_order(&prepared))
}

fn sorted_order(prepared: &[Prepared]) -> Vec<usize> {
    let top: Vec<f64> = prepared
        .iter()
        .map(|p| p.probs.iter().cloned().fold(0.0, f64::max))
        .collect();
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    order.sort_by(|&a, &b| top[b].total_cmp(&top[a]).then(a.cmp(&b)));
    order
}

/// Items whose gradients a batch contributes. `probs[i]` is the next-item
/// distribution of the batch's i-th sequence, `targets[i]` its target.
pub fn select_items(
    probs: &[&[f64]],
    targets: &[ItemId],
    spec: &SamplingSpec,
    rng: &mut util::Rng,
) -> Result<Vec<ItemId>> {
    if probs.is_empty() {
        return Err(Error::Input("cannot select items for an empty batch".into()));
    }
    let num_items = probs[0].len();
    spec.validate(num_items)?;
    let summed = || -> Vec<f64> {
        let mut s = vec![0.0; num_items];
        for p in probs {
            for (a, b) in s.iter_mut().zip(p.iter()) {
                *a += b;
            }
        }
        s
    };
    Ok(match spec.method {
        SamplingMethod::Random => rand::seq::index::sample(rng, num_items, spec.n)
            .into_iter()
            .map(|i| i as ItemId + 1)
            .collect(),
        SamplingMethod::TopK => {
            let s = summed();
            let mut idx: Vec<usize> = (0..num_items).collect();
            idx.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
            idx.truncate(spec.n);
            idx.into_iter().map(|i| i as ItemId + 1).collect()
        }
        SamplingMethod::ModelBased => {
            let dist = WeightedIndex::new(summed())
                .map_err(|e| Error::Numeric(format!("model-based sampling weights: {e}")))?;
            (0..spec.n).map(|_| dist.sample(rng) as ItemId + 1).collect()
        }
        SamplingMethod::TargetItem => {
            if targets.len() != probs.len() {
                return Err(Error::Input("one target per sequence required".into()));
            }
            targets.to_vec()
        }
    })
}

/// Contribution of one (batch, item) term before the `1/N` normalisation:
/// `(Σ_i p(j|s_i)) · (∇ Σ_i log p(j|s_i))²`, elementwise.
pub fn batch_item_contribution(
    model: &Model,
    params: &ParamVector,
    windows: &[Vec<ItemId>],
    positions: &[usize],
    item: ItemId,
) -> Result<Vec<f64>> {
    let grad = model.grad_sum_log_prob(params, windows, positions, item)?;
    let mut weight = 0.0;
    for (w, &pos) in windows.iter().zip(positions) {
        let out = model.forward(params, w, &[pos], Dropout::Off)?;
        weight += out.positions[0].probs[item as usize - 1];
    }
    Ok(grad.iter().map(|g| weight * g * g).collect())
}

/// Batch-wise Fisher estimate over probability-sorted batches.
pub fn estimate_fisher(
    model: &Model,
    params: &ParamVector,
    split: &LeaveOneOutSplit,
    spec: &SamplingSpec,
    batch_size: usize,
    seed: u64,
) -> Result<(FisherDiag, FisherStats)> {
    estimate_fisher_ordered(model, params, split, spec, batch_size, seed, BatchOrder::Sorted)
}

pub fn estimate_fisher_ordered(
    model: &Model,
    params: &ParamVector,
    split: &LeaveOneOutSplit,
    spec: &SamplingSpec,
    batch_size: usize,
    seed: u64,
    order: BatchOrder,
) -> Result<(FisherDiag, FisherStats)> {
    if batch_size == 0 {
        return Err(Error::Config("Fisher batch size must be >= 1".into()));
    }
    spec.validate(model.config().num_items)?;
    let prepared = prepare(model, params, split)?;
    let mut rng = rng_from_seed(seed);
    let sequence_order = match order {
        BatchOrder::Sorted => sorted_order(&prepared),
        BatchOrder::Shuffled => {
            let mut o: Vec<usize> = (0..prepared.len()).collect();
            o.shuffle(&mut rng);
            o
        }
    };

    let mut acc = vec![0.0; params.len()];
    let mut stats = FisherStats::default();
    for chunk in sequence_order.chunks(batch_size) {
        let batch: Vec<&Prepared> = chunk.iter().map(|&u| &prepared[u]).collect();
        let probs: Vec<&[f64]> = batch.iter().map(|p| p.probs.as_slice()).collect();
        let targets: Vec<ItemId> = batch.iter().map(|p| p.target).collect();
        let items = select_items(&probs, &targets, spec, &mut rng)?;
        stats.num_batches += 1;

        // (per-sequence items, weight) for each backward pass of this batch
        let passes: Vec<(Vec<ItemId>, f64)> = match spec.method {
            SamplingMethod::TargetItem => {
                let w = batch.iter().map(|p| p.probs[p.target as usize - 1]).sum();
                vec![(targets.clone(), w)]
            }
            SamplingMethod::ModelBased => items
                .iter()
                .map(|&j| (vec![j; batch.len()], 1.0 / spec.n as f64))
                .collect(),
            _ => items
                .iter()
                .map(|&j| {
                    let w = batch.iter().map(|p| p.probs[j as usize - 1]).sum();
                    (vec![j; batch.len()], w)
                })
                .collect(),
        };
        let grads: Vec<Vec<f64>> = passes
            .par_iter()
            .map(|(items, _)| batch_gradient(model, params, &batch, items))
            .collect();
        stats.backward_passes += grads.len() as u64;
        for ((_, w), g) in passes.iter().zip(&grads) {
            add_weighted_square(&mut acc, g, *w);
        }
    }
    let n = prepared.len();
    let fisher = finish(
        params,
        acc,
        n,
        FisherMeta {
            method: spec.method,
            n: spec.n,
            batch_size,
            num_sequences: n,
            seed,
            order,
        },
    )?;
    Ok((fisher, stats))
}

/// Mean over users of the probability mass held by the top-k items, for
/// each k in `sizes` (ascending). Scored on the test-time window.
pub fn cumulative_topk_mass(
    model: &Model,
    params: &ParamVector,
    split: &LeaveOneOutSplit,
    sizes: &[usize],
) -> Result<Vec<f64>> {
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(Error::Config("sizes must be nonempty and >= 1".into()));
    }
    if sizes.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config("sizes must be ascending".into()));
    }
    if split.users.is_empty() {
        return Err(Error::EmptyDataset("split has no users".into()));
    }
    let cfg = model.config();
    let per_user = split
        .users
        .par_iter()
        .map(|u| {
            let window = query_window(&u.test_history(), cfg.max_len, cfg.mask_token());
            let out = model.forward(params, &window, &[cfg.max_len - 1], Dropout::Off)?;
            let mut p = out.positions[0].probs.clone();
            p.sort_by(|a, b| b.total_cmp(a));
            let mut cum = Vec::with_capacity(p.len());
            let mut s = 0.0;
            for v in &p {
                s += v;
                cum.push(s);
            }
            Ok(sizes.iter().map(|&k| cum[k.min(cum.len()) - 1]).collect::<Vec<f64>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per_user.len() as f64;
    Ok((0..sizes.len())
        .map(|i| per_user.iter().map(|v| v[i]).sum::<f64>() / n)
        .collect())
}
