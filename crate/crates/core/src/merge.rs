//! Uniform and Fisher-weighted parameter merging.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fisher::FisherDiag;
use crate::model::ParamVector;
use crate::util::{self, Rng};

pub const DEFAULT_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMode {
    Uniform,
    Fisher,
}

impl MergeMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MergeMode::Uniform => "uniform",
            MergeMode::Fisher => "fisher",
        }
    }
}

/// One merge member held in memory.
#[derive(Debug, Clone, Copy)]
pub struct MergeEntry<'a> {
    pub params: &'a ParamVector,
    pub fisher: Option<&'a FisherDiag>,
    pub lambda: f64,
}

impl<'a> MergeEntry<'a> {
    pub fn new(params: &'a ParamVector, fisher: &'a FisherDiag) -> Self {
        Self { params, fisher: Some(fisher), lambda: 1.0 }
    }
}

fn check_layouts(params: &[&ParamVector]) -> Result<()> {
    let first = params
        .first()
        .ok_or_else(|| Error::Merge("nothing to merge".into()))?;
    for p in &params[1..] {
        first
            .ensure_compatible(p)
            .map_err(|e| Error::Merge(format!("incompatible members: {e}")))?;
    }
    Ok(())
}

/// Coordinatewise mean, computed about the first member so that identical
/// inputs come back unchanged.
pub fn merge_uniform(params: &[&ParamVector]) -> Result<ParamVector> {
    check_layouts(params)?;
    let base = params[0].values();
    let m = params.len() as f64;
    let values = (0..base.len())
        .map(|j| uniform_at(params, j, base[j], m))
        .collect();
    params[0].with_values(values)
}

fn uniform_at(params: &[&ParamVector], j: usize, base: f64, m: f64) -> f64 {
    let shift: f64 = params[1..].iter().map(|p| p.values()[j] - base).sum();
    clamp_to_members(params, j, base + shift / m)
}

fn clamp_to_members(params: &[&ParamVector], j: usize, v: f64) -> f64 {
    let (lo, hi) = params.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        let x = p.values()[j];
        (lo.min(x), hi.max(x))
    });
    v.clamp(lo, hi)
}

fn validate_fisher_entries<'a>(entries: &[MergeEntry<'a>]) -> Result<Vec<&'a FisherDiag>> {
    if entries.is_empty() {
        return Err(Error::Merge("nothing to merge".into()));
    }
    let params: Vec<&ParamVector> = entries.iter().map(|e| e.params).collect();
    check_layouts(&params)?;
    let mut fishers = Vec::with_capacity(entries.len());
    for (m, e) in entries.iter().enumerate() {
        if !(e.lambda > 0.0 && e.lambda.is_finite()) {
            return Err(Error::Validation(format!("entry {m}: lambda must be > 0, got {}", e.lambda)));
        }
        let f = e
            .fisher
            .ok_or_else(|| Error::Validation(format!("entry {m}: Fisher merge needs a Fisher estimate")))?;
        e.params
            .ensure_compatible(f.as_params())
            .map_err(|err| Error::Merge(format!("entry {m}: Fisher does not match checkpoint: {err}")))?;
        if let Some(j) = f.values().iter().position(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Validation(format!(
                "entry {m}: Fisher coordinate {j} is {}, must be finite and >= 0",
                f.values()[j]
            )));
        }
        fishers.push(f);
    }
    Ok(fishers)
}

/// `θ*_j = Σ_m λ_m F_mj θ_mj / Σ_m λ_m F_mj`, with the uniform mean wherever
/// `Σ_m λ_m F_mj < epsilon`.
///
/// Weights are normalised (λ by their sum, F by the per-coordinate maximum)
/// before use, so a common rescaling of either leaves the result unchanged
/// bit for bit whenever the rescaled inputs are exactly representable.
pub fn merge_fisher(entries: &[MergeEntry<'_>], epsilon: f64) -> Result<ParamVector> {
    let fishers = validate_fisher_entries(entries)?;
    if !(epsilon > 0.0) {
        return Err(Error::Validation(format!("epsilon must be > 0, got {epsilon}")));
    }
    let params: Vec<&ParamVector> = entries.iter().map(|e| e.params).collect();
    let lambda_total: f64 = entries.iter().map(|e| e.lambda).sum();
    let lambdas: Vec<f64> = entries.iter().map(|e| e.lambda / lambda_total).collect();
    let base = params[0].values();
    let m = params.len() as f64;
    let mut weights = vec![0.0; entries.len()];
    let values = (0..base.len())
        .map(|j| {
            let raw: f64 = entries.iter().zip(&fishers).map(|(e, f)| e.lambda * f.values()[j]).sum();
            if !(raw >= epsilon) {
                return uniform_at(&params, j, base[j], m);
            }
            let fmax = fishers.iter().map(|f| f.values()[j]).fold(0.0, f64::max);
            for ((w, f), l) in weights.iter_mut().zip(&fishers).zip(&lambdas) {
                *w = l * (f.values()[j] / fmax);
            }
            let total: f64 = weights.iter().sum();
            let shift: f64 = weights
                .iter()
                .zip(&params)
                .skip(1)
                .map(|(w, p)| w * (p.values()[j] - base[j]))
                .sum();
            clamp_to_members(&params, j, base[j] + shift / total)
        })
        .collect();
    params[0].with_values(values)
}

/// Quadratic surrogate `−½ Σ_m λ_m Σ_j F_mj (θ_j − θ_mj)²`.
pub fn merge_objective(theta: &ParamVector, entries: &[MergeEntry<'_>]) -> Result<f64> {
    let fishers = validate_fisher_entries(entries)?;
    theta
        .ensure_compatible(entries[0].params)
        .map_err(|e| Error::Merge(e.to_string()))?;
    let mut total = 0.0;
    for (e, f) in entries.iter().zip(&fishers) {
        let s: f64 = theta
            .values()
            .iter()
            .zip(e.params.values())
            .zip(f.values())
            .map(|((t, p), fv)| fv * (t - p) * (t - p))
            .sum();
        total += e.lambda * s;
    }
    Ok(-0.5 * total)
}

/// Gradient of [`merge_objective`] with respect to `θ`.
pub fn merge_objective_grad(theta: &ParamVector, entries: &[MergeEntry<'_>]) -> Result<Vec<f64>> {
    let fishers = validate_fisher_entries(entries)?;
    let mut g = vec![0.0; theta.len()];
    for (e, f) in entries.iter().zip(&fishers) {
        for (j, gj) in g.iter_mut().enumerate() {
            *gj -= e.lambda * f.values()[j] * (theta.values()[j] - e.params.values()[j]);
        }
    }
    Ok(g)
}

/// `count` independent draws with mean `params` and per-coordinate variance
/// `1 / (F + epsilon)`.
pub fn posterior_sample(
    params: &ParamVector,
    fisher: &FisherDiag,
    count: usize,
    epsilon: f64,
    rng: &mut Rng,
) -> Result<Vec<ParamVector>> {
    if !(epsilon > 0.0) {
        return Err(Error::Validation(format!("epsilon must be > 0, got {epsilon}")));
    }
    params.ensure_compatible(fisher.as_params())?;
    let std: Vec<f64> = fisher.values().iter().map(|f| 1.0 / (f + epsilon).sqrt()).collect();
    (0..count)
        .map(|_| {
            let v = params
                .values()
                .iter()
                .zip(&std)
                .map(|(mu, s)| {
                    let z: f64 = StandardNormal.sample(rng);
                    mu + s * z
                })
                .collect();
            params.with_values(v)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecipeEntry {
    pub checkpoint: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fisher: Option<PathBuf>,
    #[serde(default = "unit_lambda")]
    pub lambda: f64,
}

fn unit_lambda() -> f64 {
    1.0
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeRecipe {
    pub mode: MergeMode,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    pub entries: Vec<RecipeEntry>,
}

impl MergeRecipe {
    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("merge recipe: {e}")))?;
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::Config("merge recipe has no entries".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        for (m, e) in self.entries.iter().enumerate() {
            if !(e.lambda > 0.0 && e.lambda.is_finite()) {
                return Err(Error::Config(format!("entry {m}: lambda must be > 0")));
            }
            if self.mode == MergeMode::Fisher && e.fisher.is_none() {
                return Err(Error::Config(format!("entry {m}: fisher mode needs a fisher path")));
            }
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        util::sha256_hex(serde_json::to_string(self).expect("recipe serialises").as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryProvenance {
    pub checkpoint_sha256: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fisher_sha256: Option<String>,
    pub lambda: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub recipe_sha256: String,
    pub mode: MergeMode,
    pub arch_hash: String,
    pub entries: Vec<EntryProvenance>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergedCheckpoint {
    pub params: ParamVector,
    pub provenance: Provenance,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() { p.to_path_buf() } else { base.join(p) }
}

/// Loads every file named by `recipe` (relative paths resolve against
/// `base_dir`) and merges. Inputs are hashed as read.
pub fn merge_recipe_files(recipe: &MergeRecipe, base_dir: &Path) -> Result<MergedCheckpoint> {
    recipe.validate()?;
    let mut params = Vec::new();
    let mut fishers = Vec::new();
    let mut prov = Vec::new();
    for e in &recipe.entries {
        let bytes = std::fs::read(resolve(base_dir, &e.checkpoint))?;
        let p = ParamVector::read_checkpoint(&mut bytes.as_slice())?;
        let mut fisher_sha256 = None;
        if recipe.mode == MergeMode::Fisher {
            let path = e.fisher.as_ref().expect("validated");
            let fb = std::fs::read(resolve(base_dir, path))?;
            fishers.push(FisherDiag::read(&mut BufReader::new(fb.as_slice()))?);
            fisher_sha256 = Some(util::sha256_hex(&fb));
        }
        prov.push(EntryProvenance {
            checkpoint_sha256: util::sha256_hex(&bytes),
            fisher_sha256,
            lambda: format!("{}", e.lambda),
        });
        params.push(p);
    }
    let refs: Vec<&ParamVector> = params.iter().collect();
    let merged = match recipe.mode {
        MergeMode::Uniform => merge_uniform(&refs)?,
        MergeMode::Fisher => {
            let entries: Vec<MergeEntry<'_>> = params
                .iter()
                .zip(&fishers)
                .zip(&recipe.entries)
                .map(|((p, f), e)| MergeEntry { params: p, fisher: Some(f), lambda: e.lambda })
                .collect();
            merge_fisher(&entries, recipe.epsilon)?
        }
    };
    Ok(MergedCheckpoint {
        provenance: Provenance {
            recipe_sha256: recipe.digest(),
            mode: recipe.mode,
            arch_hash: format!("{:016x}", merged.arch_hash()),
            entries: prov,
        },
        params: merged,
    })
}

impl MergedCheckpoint {
    /// Writes the checkpoint to `path` and its provenance to `path` + `.json`.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(File::create(path)?);
        self.params.write_checkpoint(&mut f)?;
        std::io::Write::flush(&mut f)?;
        let mut sidecar = path.as_os_str().to_owned();
        sidecar.push(".json");
        std::fs::write(sidecar, serde_json::to_string_pretty(&self.provenance)? + "\n")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fisher::{BatchOrder, FisherMeta, SamplingMethod};
    use crate::model::Segment;
    use crate::util::rng_from_seed;
    use rand::Rng as _;
    use std::sync::Arc;

    fn pv(values: &[f64]) -> ParamVector {
        let seg: Arc<[Segment]> = vec![Segment { name: "w".into(), offset: 0, len: values.len() }].into();
        ParamVector::new(7, seg, values.to_vec()).unwrap()
    }

    fn fd(values: &[f64]) -> FisherDiag {
        let meta = FisherMeta {
            method: SamplingMethod::TopK,
            n: 1,
            batch_size: 1,
            num_sequences: 1,
            seed: 0,
            order: BatchOrder::Sorted,
        };
        FisherDiag::new(pv(values), meta).unwrap()
    }

    #[test]
    fn uniform_examples() {
        assert_eq!(merge_uniform(&[&pv(&[1.0, 3.0]), &pv(&[3.0, 5.0])]).unwrap().values(), &[2.0, 4.0]);
        assert_eq!(merge_uniform(&[&pv(&[0.0]), &pv(&[3.0]), &pv(&[6.0])]).unwrap().values(), &[3.0]);
        let one = pv(&[0.1, -7.25]);
        assert_eq!(merge_uniform(&[&one]).unwrap(), one);
    }

    #[test]
    fn fisher_hand_example_and_fallback() {
        let (a, b) = (pv(&[2.0, 1.0]), pv(&[6.0, 3.0]));
        let (fa, fb) = (fd(&[3.0, 0.0]), fd(&[1.0, 0.0]));
        let m = merge_fisher(&[MergeEntry::new(&a, &fa), MergeEntry::new(&b, &fb)], DEFAULT_EPSILON).unwrap();
        assert_eq!(m.values(), &[3.0, 2.0]);
    }

    #[test]
    fn equal_fishers_match_uniform() {
        let (a, b, c) = (pv(&[0.3, -1.0, 4.0]), pv(&[1.1, 2.0, 4.5]), pv(&[-0.7, 0.0, 5.0]));
        let f = fd(&[0.5, 0.5, 0.5]);
        let m = merge_fisher(&[MergeEntry::new(&a, &f), MergeEntry::new(&b, &f), MergeEntry::new(&c, &f)], DEFAULT_EPSILON).unwrap();
        let u = merge_uniform(&[&a, &b, &c]).unwrap();
        for (x, y) in m.values().iter().zip(u.values()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn rejects_mismatch_and_negative_fisher() {
        let seg: Arc<[Segment]> = vec![Segment { name: "w".into(), offset: 0, len: 1 }].into();
        let other = ParamVector::new(8, seg, vec![1.0]).unwrap();
        assert!(matches!(merge_uniform(&[&pv(&[1.0]), &other]), Err(Error::Merge(_))));
        let a = pv(&[1.0]);
        let bad = FisherDiag::unchecked(pv(&[-1.0]), fd(&[1.0]).meta);
        assert!(matches!(
            merge_fisher(&[MergeEntry::new(&a, &bad)], DEFAULT_EPSILON),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            merge_fisher(&[MergeEntry { params: &a, fisher: None, lambda: 1.0 }], DEFAULT_EPSILON),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn objective_is_zero_at_single_member() {
        let a = pv(&[1.0, 2.0]);
        let f = fd(&[3.0, 0.5]);
        assert_eq!(merge_objective(&a, &[MergeEntry::new(&a, &f)]).unwrap(), 0.0);
        let b = pv(&[1.5, 2.0]);
        assert!(merge_objective(&b, &[MergeEntry::new(&a, &f)]).unwrap() < 0.0);
    }

    #[test]
    fn lambda_scaling_scales_objective_not_argmax() {
        let mut rng = rng_from_seed(1);
        let mk = |rng: &mut Rng, lo: f64| (0..50).map(|_| lo + rng.random::<f32>() as f64).collect::<Vec<f64>>();
        let ps: Vec<ParamVector> = (0..3).map(|_| pv(&mk(&mut rng, -0.5))).collect();
        let fs: Vec<FisherDiag> = (0..3).map(|_| fd(&mk(&mut rng, 0.1))).collect();
        let lambdas: Vec<f64> = (0..3).map(|_| 0.5 + rng.random::<f32>() as f64).collect();
        let entries = |scale: f64| -> Vec<MergeEntry<'_>> {
            ps.iter().zip(&fs).zip(&lambdas).map(|((p, f), l)| MergeEntry { params: p, fisher: Some(f), lambda: l * scale }).collect()
        };
        let m1 = merge_fisher(&entries(1.0), DEFAULT_EPSILON).unwrap();
        let m7 = merge_fisher(&entries(7.0), DEFAULT_EPSILON).unwrap();
        assert_eq!(m1.values(), m7.values());
        let o1 = merge_objective(&m1, &entries(1.0)).unwrap();
        let o7 = merge_objective(&m1, &entries(7.0)).unwrap();
        assert!((o7 - 7.0 * o1).abs() <= 1e-12 * o7.abs());
    }

    #[test]
    fn posterior_moments_and_pinning() {
        let mu = pv(&[0.5, -1.0, 2.0]);
        let f = fd(&[4.0, 1.0, 1e300]);
        let draws = posterior_sample(&mu, &f, 10_000, 1e-8, &mut rng_from_seed(3)).unwrap();
        for j in 0..2 {
            let mean: f64 = draws.iter().map(|d| d.values()[j]).sum::<f64>() / 10_000.0;
            let se = (1.0 / (f.values()[j] + 1e-8)).sqrt() / 100.0;
            assert!((mean - mu.values()[j]).abs() < 3.0 * se, "coord {j}");
        }
        assert!(draws.iter().all(|d| (d.values()[2] - 2.0).abs() < 1e-100));
        let again = posterior_sample(&mu, &f, 5, 1e-8, &mut rng_from_seed(3)).unwrap();
        assert_eq!(&again[..], &draws[..5]);
    }

    #[test]
    fn recipe_json_shape() {
        let r = MergeRecipe::from_json(
            r#"{"mode":"fisher","epsilon":1e-12,"entries":[{"checkpoint":"a.ckpt","fisher":"a.fisher","lambda":1.0},{"checkpoint":"b.ckpt","fisher":"b.fisher"}]}"#,
        )
        .unwrap();
        assert_eq!(r.entries[1].lambda, 1.0);
        assert!(MergeRecipe::from_json(r#"{"mode":"fisher","entries":[{"checkpoint":"a"}]}"#).is_err());
        assert!(MergeRecipe::from_json(r#"{"mode":"mean","entries":[]}"#).is_err());
    }
}
