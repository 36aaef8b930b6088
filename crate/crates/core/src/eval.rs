//! Leave-one-out ranking evaluation, error inconsistency and weight-plane
//! projection.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{query_window, ItemId, LeaveOneOutSplit};
use crate::error::{Error, Result};
use crate::model::{Dropout, Model, ParamVector};
use crate::util::{derive_seed, rng_from_seed, Stream};

pub const POOL_SIZE: usize = 100;
pub const CORRECT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "regime")]
pub enum CandidatePool {
    /// Every item.
    Full,
    /// The target plus `k` items the user never interacted with.
    Random { k: usize, seed: u64 },
    /// The `k` most popular training items; the target is not added.
    Popular { k: usize },
}

impl CandidatePool {
    pub fn name(&self) -> &'static str {
        match self {
            CandidatePool::Full => "full",
            CandidatePool::Random { .. } => "random",
            CandidatePool::Popular { .. } => "popular",
        }
    }

    /// The three regimes of the standard protocol.
    pub fn standard(seed: u64) -> [CandidatePool; 3] {
        [
            CandidatePool::Full,
            CandidatePool::Random { k: POOL_SIZE, seed },
            CandidatePool::Popular { k: POOL_SIZE },
        ]
    }
}

/// Which held-out item is ranked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    /// Last item, history = train + valid.
    Test,
    /// Second-to-last item, history = train.
    Valid,
}

/// Global top-`k` items by training popularity, ties to the lower id.
pub fn popular_items(split: &LeaveOneOutSplit, k: usize) -> Vec<ItemId> {
    let mut items: Vec<ItemId> = (1..=split.num_items as ItemId).collect();
    items.sort_by(|&a, &b| split.popularity[b as usize].cmp(&split.popularity[a as usize]).then(a.cmp(&b)));
    items.truncate(k);
    items
}

/// Candidates ranked for `user`.
pub fn resolve_pool(split: &LeaveOneOutSplit, user: usize, pool: &CandidatePool, target: Target) -> Vec<ItemId> {
    let u = &split.users[user];
    let target_item = match target {
        Target::Test => u.test,
        Target::Valid => u.valid,
    };
    match *pool {
        CandidatePool::Full => (1..=split.num_items as ItemId).collect(),
        CandidatePool::Popular { k } => popular_items(split, k),
        CandidatePool::Random { k, seed } => {
            let mut seen = vec![false; split.num_items + 1];
            for &i in u.train.iter().chain([&u.valid, &u.test]) {
                seen[i as usize] = true;
            }
            let unseen: Vec<ItemId> = (1..=split.num_items as ItemId).filter(|&i| !seen[i as usize]).collect();
            let mut rng = rng_from_seed(derive_seed(seed, Stream::Eval, user as u64));
            let take = k.min(unseen.len());
            let mut out = vec![target_item];
            out.extend(rand::seq::index::sample(&mut rng, unseen.len(), take).into_iter().map(|i| unseen[i]));
            out
        }
    }
}

/// Single-target NDCG@k: `1 / log2(rank + 1)` when the target ranks within
/// `k`, else 0. Ties rank the lower item id first; an absent target scores 0.
pub fn ndcg_at_k(candidates: &[ItemId], scores: &[f64], target: ItemId, k: usize) -> Result<f64> {
    if k < 1 {
        return Err(Error::Config("k must be >= 1".into()));
    }
    if candidates.len() != scores.len() {
        return Err(Error::Input("one score per candidate required".into()));
    }
    let Some(t) = candidates.iter().position(|&c| c == target) else {
        return Ok(0.0);
    };
    let ts = scores[t];
    let rank = 1 + candidates
        .iter()
        .zip(scores)
        .filter(|&(&c, &s)| c != target && (s > ts || (s == ts && c < target)))
        .count();
    Ok(if rank <= k { 1.0 / ((rank + 1) as f64).log2() } else { 0.0 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolMeta {
    pub pool: CandidatePool,
    pub target: Target,
    /// Whether the target is appended to the popular pool (never, here).
    pub popular_includes_target: bool,
    pub correct_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub meta: PoolMeta,
    pub ks: Vec<usize>,
    /// `per_user[u][i]` is user `u`'s NDCG at `ks[i]`.
    pub per_user: Vec<Vec<f64>>,
    /// Mean NDCG keyed `"ndcg@k"`.
    pub aggregate: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
}

impl EvalReport {
    pub fn mean(&self, k: usize) -> Option<f64> {
        self.aggregate.get(&format!("ndcg@{k}")).copied()
    }

    pub fn user_values(&self, k: usize) -> Option<Vec<f64>> {
        let i = self.ks.iter().position(|&x| x == k)?;
        Some(self.per_user.iter().map(|v| v[i]).collect())
    }
}

/// Scores every user's candidates at the masked final position of its
/// history window and reports NDCG at each of `ks`.
pub fn evaluate(
    model: &Model,
    params: &ParamVector,
    split: &LeaveOneOutSplit,
    pool: &CandidatePool,
    ks: &[usize],
    target: Target,
) -> Result<EvalReport> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Config("k list must be nonempty and >= 1".into()));
    }
    if split.users.is_empty() {
        return Err(Error::EmptyDataset("nothing to evaluate".into()));
    }
    let cfg = model.config();
    let per_user = (0..split.users.len())
        .into_par_iter()
        .map(|u| {
            let user = &split.users[u];
            let (history, item) = match target {
                Target::Test => (user.test_history(), user.test),
                Target::Valid => (user.train.clone(), user.valid),
            };
            let window = query_window(&history, cfg.max_len, cfg.mask_token());
            let out = model.forward(params, &window, &[cfg.max_len - 1], Dropout::Off)?;
            let logits = &out.positions[0].logits;
            let cands = resolve_pool(split, u, pool, target);
            let scores: Vec<f64> = cands.iter().map(|&c| logits[c as usize - 1]).collect();
            ks.iter().map(|&k| ndcg_at_k(&cands, &scores, item, k)).collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per_user.len() as f64;
    let aggregate = ks
        .iter()
        .enumerate()
        .map(|(i, k)| (format!("ndcg@{k}"), per_user.iter().map(|v| v[i]).sum::<f64>() / n))
        .collect();
    Ok(EvalReport {
        meta: PoolMeta {
            pool: *pool,
            target,
            popular_includes_target: false,
            correct_threshold: CORRECT_THRESHOLD,
        },
        ks: ks.to_vec(),
        per_user,
        aggregate,
        model: Some(params.digest()),
    })
}

/// Fraction of users on which exactly one of the two models is correct,
/// correct meaning NDCG@10 above `threshold` (equivalently rank <= 2).
pub fn error_inconsistency(a: &EvalReport, b: &EvalReport, threshold: f64) -> Result<f64> {
    if a.meta.pool != b.meta.pool || a.meta.target != b.meta.target {
        return Err(Error::Input("reports use different candidate pools".into()));
    }
    if a.per_user.len() != b.per_user.len() {
        return Err(Error::Input(format!(
            "reports cover different users ({} vs {})",
            a.per_user.len(),
            b.per_user.len()
        )));
    }
    let va = a.user_values(10).ok_or_else(|| Error::Input("report lacks NDCG@10".into()))?;
    let vb = b.user_values(10).ok_or_else(|| Error::Input("report lacks NDCG@10".into()))?;
    inconsistency_of(&va, &vb, threshold)
}

pub fn inconsistency_of(a: &[f64], b: &[f64], threshold: f64) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Input("per-user lists must be equal-length and nonempty".into()));
    }
    let differ = a.iter().zip(b).filter(|(x, y)| (**x > threshold) != (**y > threshold)).count();
    Ok(differ as f64 / a.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairRelation {
    /// Same framework, different seeds.
    Similar,
    /// Different frameworks.
    Dissimilar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InconsistencyPair {
    pub a: String,
    pub b: String,
    pub relation: PairRelation,
    pub inconsistency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InconsistencyReport {
    pub threshold: f64,
    pub pairs: Vec<InconsistencyPair>,
    pub mean_similar: Option<f64>,
    pub mean_dissimilar: Option<f64>,
}

impl InconsistencyReport {
    pub fn new(threshold: f64, pairs: Vec<InconsistencyPair>) -> Self {
        let mean = |rel| {
            let v: Vec<f64> = pairs.iter().filter(|p| p.relation == rel).map(|p| p.inconsistency).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        Self {
            threshold,
            mean_similar: mean(PairRelation::Similar),
            mean_dissimilar: mean(PairRelation::Dissimilar),
            pairs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanePoint {
    pub label: String,
    pub x: f64,
    pub y: f64,
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Orthonormal basis of the plane through three points, origin at the first.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub origin: Vec<f64>,
    pub e1: Vec<f64>,
    pub e2: Vec<f64>,
}

impl Plane {
    pub fn through(t1: &[f64], t2: &[f64], t3: &[f64]) -> Result<Self> {
        if t1.len() != t2.len() || t1.len() != t3.len() {
            return Err(Error::Input("plane points differ in dimension".into()));
        }
        let d1 = sub(t2, t1);
        let n1 = dot(&d1, &d1).sqrt();
        if !(n1 > 0.0) {
            return Err(Error::Degenerate("first two plane points coincide".into()));
        }
        let e1: Vec<f64> = d1.iter().map(|v| v / n1).collect();
        let d2 = sub(t3, t1);
        let proj = dot(&d2, &e1);
        let r: Vec<f64> = d2.iter().zip(&e1).map(|(v, e)| v - proj * e).collect();
        let n2 = dot(&r, &r).sqrt();
        let scale = dot(&d2, &d2).sqrt().max(n1);
        if !(n2 > 1e-12 * scale) {
            return Err(Error::Degenerate("plane points are collinear".into()));
        }
        let e2 = r.iter().map(|v| v / n2).collect();
        Ok(Self { origin: t1.to_vec(), e1, e2 })
    }

    pub fn project(&self, p: &[f64]) -> (f64, f64) {
        let d = sub(p, &self.origin);
        (dot(&d, &self.e1), dot(&d, &self.e2))
    }

    pub fn lift(&self, x: f64, y: f64) -> Vec<f64> {
        self.origin
            .iter()
            .zip(self.e1.iter().zip(&self.e2))
            .map(|(o, (a, b))| o + x * a + y * b)
            .collect()
    }
}

/// Coordinates of the three defining points (labelled `theta1..3`) followed
/// by `extra`, in the plane through the first three.
pub fn plane_projection(
    t1: &[f64],
    t2: &[f64],
    t3: &[f64],
    extra: &[(String, &[f64])],
) -> Result<Vec<PlanePoint>> {
    let plane = Plane::through(t1, t2, t3)?;
    let named = [("theta1".to_string(), t1), ("theta2".to_string(), t2), ("theta3".to_string(), t3)];
    named
        .iter()
        .map(|(l, p)| (l.clone(), *p))
        .chain(extra.iter().cloned())
        .map(|(label, p)| {
            if p.len() != t1.len() {
                return Err(Error::Input(format!("point {label} has the wrong dimension")));
            }
            let (x, y) = plane.project(p);
            Ok(PlanePoint { label, x, y })
        })
        .collect()
}

pub fn write_plane_csv<W: Write>(w: &mut W, points: &[PlanePoint]) -> Result<()> {
    writeln!(w, "label,x,y")?;
    for p in points {
        if p.label.contains([',', '\n', '"']) {
            return Err(Error::Input(format!("label {:?} cannot be written as CSV", p.label)));
        }
        writeln!(w, "{},{:e},{:e}", p.label, p.x, p.y)?;
    }
    Ok(())
}

pub fn read_plane_csv<R: BufRead>(r: R) -> Result<Vec<PlanePoint>> {
    let mut lines = r.lines();
    match lines.next() {
        Some(Ok(h)) if h.trim_end() == "label,x,y" => {}
        _ => return Err(Error::Parse { line: 1, msg: "expected header label,x,y".into() }),
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        let bad = |msg: &str| Error::Parse { line: i + 2, msg: msg.into() };
        let mut parts = line.split(',');
        let (Some(label), Some(x), Some(y), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
            return Err(bad("expected three fields"));
        };
        out.push(PlanePoint {
            label: label.to_string(),
            x: x.parse().map_err(|_| bad("x is not a number"))?,
            y: y.parse().map_err(|_| bad("y is not a number"))?,
        });
    }
    Ok(out)
}
