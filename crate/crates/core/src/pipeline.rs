//! End-to-end experiment runs: train the recipe members, estimate Fisher
//! information, merge, fine-tune once more, evaluate and analyze.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, PipelineKind};
use crate::data::{self, build_dataset, split_leave_one_out, LeaveOneOutSplit, SequenceDataset};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate, inconsistency_of, plane_projection, write_plane_csv, CandidatePool, EvalReport, InconsistencyPair,
    InconsistencyReport, PairRelation, Target, CORRECT_THRESHOLD,
};
use crate::fisher::{cumulative_topk_mass, estimate_fisher_ordered, FisherDiag, FisherStats, SamplingSpec};
use crate::frameworks::{build_loss_spec, FrameworkKind, FrameworkSpec, LossSpec};
use crate::merge::{merge_fisher, merge_uniform, MergeEntry, MergeMode};
use crate::model::{Model, ParamVector};
use crate::train::{StepLosses, Trainer};
use crate::util::{rng_from_seed, sha256_hex, Stream};

pub const REFERENCE_NOTE: &str = "published reference (not reproduced at this scale)";
/// Fisher-merge row of the fine-tune setting table: full / random / popular NDCG@10.
pub const REFERENCE_FISHER_ROW: [f64; 3] = [0.1386, 0.5618, 0.0428];
pub const REFERENCE_TOPK_MASS: [(usize, f64); 3] = [(10, 0.381), (30, 0.569), (50, 0.658)];
/// (framework, similar %, dissimilar %).
pub const REFERENCE_INCONSISTENCY: [(&str, f64, f64); 2] = [("cl4srec", 8.05, 11.41), ("duorec", 8.67, 11.18)];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the run directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub seeds: Vec<u64>,
    pub inputs: Vec<String>,
    pub outputs: Vec<Artifact>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fisher: Option<FisherCounters>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub epoch_losses: Vec<StepLosses>,
    pub wall_seconds: f64,
}

/// Backward-pass accounting of a Fisher stage next to its closed form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FisherCounters {
    pub num_batches: u64,
    pub backward_passes: u64,
    pub passes_per_batch: u64,
    pub expected_backward_passes: u64,
}

impl FisherCounters {
    fn new(stats: FisherStats, spec: &SamplingSpec) -> Self {
        Self {
            num_batches: stats.num_batches,
            backward_passes: stats.backward_passes,
            passes_per_batch: spec.passes_per_batch(),
            expected_backward_passes: stats.num_batches * spec.passes_per_batch(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_digest: String,
    pub master_seed: u64,
    pub arch_hash: Option<String>,
    pub threads: usize,
    pub stages: Vec<StageRecord>,
    pub failed_stage: Option<String>,
    pub error: Option<String>,
}

impl RunManifest {
    /// Every artifact written by the run, path to sha256.
    pub fn artifact_hashes(&self) -> BTreeMap<String, String> {
        self.stages
            .iter()
            .flat_map(|s| s.outputs.iter().map(|a| (a.path.clone(), a.sha256.clone())))
            .collect()
    }
}

/// NDCG@k means of one model on every configured pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub label: String,
    /// pool name -> k -> mean NDCG@k
    pub ndcg: BTreeMap<String, BTreeMap<usize, f64>>,
}

impl ScoreRow {
    fn new(label: &str, reports: &[EvalReport]) -> Self {
        let ndcg = reports
            .iter()
            .map(|r| {
                let by_k = r.ks.iter().map(|&k| (k, r.mean(k).unwrap_or(0.0))).collect();
                (r.meta.pool.name().to_string(), by_k)
            })
            .collect();
        Self {
            label: label.to_string(),
            ndcg,
        }
    }

    pub fn get(&self, pool: &str, k: usize) -> Option<f64> {
        self.ndcg.get(pool)?.get(&k).copied()
    }

    /// Full-pool NDCG@10, or the first pool's if full is not evaluated.
    pub fn headline(&self) -> f64 {
        self.get("full", 10)
            .or_else(|| self.ndcg.values().next().and_then(|m| m.get(&10).copied()))
            .unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sampling: SamplingSpec,
    pub scores: ScoreRow,
    pub counters: Vec<FisherCounters>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub dropped: String,
    pub with: ScoreRow,
    pub without: ScoreRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopkMass {
    pub model: String,
    pub sizes: Vec<usize>,
    pub mass: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub pipeline: PipelineKind,
    pub num_users: usize,
    pub num_items: usize,
    /// Shared starting point of the fine-tune setting.
    pub baseline: Option<ScoreRow>,
    pub members: Vec<ScoreRow>,
    pub uniform_before_epoch: ScoreRow,
    pub fisher_before_epoch: ScoreRow,
    pub uniform: ScoreRow,
    pub fisher: ScoreRow,
    pub sweep: Vec<SweepRow>,
    pub ablation: Option<AblationRow>,
    pub inconsistency: Option<InconsistencyReport>,
    pub topk_mass: Option<TopkMass>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub manifest: RunManifest,
    pub summary: Summary,
}

/// Ingests (or generates) the configured data and applies the user subsample.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<SequenceDataset> {
    let interactions = match (&cfg.data.ratings, &cfg.data.synthetic) {
        (Some(path), _) => {
            let f = std::fs::File::open(path)?;
            data::parse_ratings(std::io::BufReader::new(f))?
        }
        (None, Some(syn)) => data::synthetic::generate(syn, &mut rng_from_seed(cfg.seed_for(Stream::Data, 0)))?,
        (None, None) => return Err(Error::Config("no data source configured".into())),
    };
    let ds = build_dataset(&interactions, cfg.data.min_seq_len)?;
    match cfg.data.max_users {
        Some(m) if m < ds.num_users() => ds.subsample_users(m, &mut rng_from_seed(cfg.seed_for(Stream::Data, 1))),
        _ => Ok(ds),
    }
}

/// Trains `params` in place for `epochs` epochs, returning per-epoch mean losses.
pub fn train_epochs(
    model: &Model,
    split: &LeaveOneOutSplit,
    loss: LossSpec,
    cfg: &ExperimentConfig,
    params: &mut ParamVector,
    epochs: usize,
    seed: u64,
) -> Result<Vec<StepLosses>> {
    let mut trainer = Trainer::new(model, split, loss, cfg.train)?;
    let mut rng = rng_from_seed(seed);
    (0..epochs).map(|_| trainer.epoch(params, &mut rng)).collect()
}

pub fn evaluate_pools(
    model: &Model,
    params: &ParamVector,
    split: &LeaveOneOutSplit,
    pools: &[CandidatePool],
    ks: &[usize],
) -> Result<Vec<EvalReport>> {
    pools.iter().map(|p| evaluate(model, params, split, p, ks, Target::Test)).collect()
}

struct Run<'a> {
    cfg: &'a ExperimentConfig,
    out: &'a Path,
    manifest: RunManifest,
}

impl Run<'_> {
    fn stage<T>(&mut self, name: &str, f: impl FnOnce(&mut StageRecord, &Path) -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let mut rec = StageRecord {
            stage: name.to_string(),
            seeds: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            fisher: None,
            epoch_losses: Vec::new(),
            wall_seconds: 0.0,
        };
        let result = f(&mut rec, self.out);
        rec.wall_seconds = start.elapsed().as_secs_f64();
        self.manifest.stages.push(rec);
        match result {
            Ok(v) => Ok(v),
            Err(e) => {
                self.manifest.failed_stage = Some(name.to_string());
                self.manifest.error = Some(e.to_string());
                let _ = self.write_manifest();
                Err(e.in_stage(name))
            }
        }
    }

    fn write_manifest(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(self.out.join("manifest.json"), text)?;
        Ok(())
    }
}

fn write_artifact(rec: &mut StageRecord, out: &Path, rel: &str, bytes: &[u8]) -> Result<()> {
    let path = out.join(rel);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&path, bytes)?;
    rec.outputs.push(Artifact {
        path: rel.to_string(),
        sha256: sha256_hex(bytes),
    });
    Ok(())
}

fn write_json<T: Serialize>(rec: &mut StageRecord, out: &Path, rel: &str, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_artifact(rec, out, rel, text.as_bytes())
}

/// Writes a checkpoint and returns the parameters exactly as stored.
fn store_checkpoint(rec: &mut StageRecord, out: &Path, rel: &str, params: &ParamVector) -> Result<ParamVector> {
    let bytes = params.checkpoint_bytes();
    write_artifact(rec, out, rel, &bytes)?;
    ParamVector::read_checkpoint_expecting(&mut bytes.as_slice(), params.arch_hash())
}

fn store_fisher(rec: &mut StageRecord, out: &Path, rel: &str, fisher: &FisherDiag) -> Result<FisherDiag> {
    let bytes = fisher.to_bytes();
    write_artifact(rec, out, rel, &bytes)?;
    FisherDiag::read_expecting(&mut bytes.as_slice(), fisher.arch_hash())
}

struct Member {
    spec: FrameworkSpec,
    params: ParamVector,
    fisher: Option<FisherDiag>,
    reports: Vec<EvalReport>,
}

impl Member {
    fn label(&self) -> &'static str {
        self.spec.kind.as_str()
    }
}

/// Runs the configured experiment, writing every artifact plus
/// `manifest.json` under `out_dir`.
pub fn run_pipeline(cfg: &ExperimentConfig, out_dir: &Path) -> Result<PipelineOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let mut run = Run {
        cfg,
        out: out_dir,
        manifest: RunManifest {
            config_digest: cfg.digest(),
            master_seed: cfg.seed,
            arch_hash: None,
            threads: rayon::current_num_threads(),
            stages: Vec::new(),
            failed_stage: None,
            error: None,
        },
    };
    let summary = execute(&mut run)?;
    run.stage("summary", |rec, out| {
        write_json(rec, out, "reports/summary.json", &summary)?;
        write_artifact(rec, out, "reports/results.txt", render_tables(&summary).as_bytes())
    })?;
    run.write_manifest()?;
    Ok(PipelineOutcome {
        manifest: run.manifest,
        summary,
    })
}

fn execute(run: &mut Run<'_>) -> Result<Summary> {
    let cfg = run.cfg;

    let (dataset, split) = run.stage("ingest", |rec, out| {
        rec.seeds = vec![cfg.seed_for(Stream::Data, 0), cfg.seed_for(Stream::Data, 1)];
        write_json(rec, out, "config.json", cfg)?;
        let ds = load_dataset(cfg)?;
        write_artifact(rec, out, "dataset.mrgd", &ds.to_bytes())?;
        let split = split_leave_one_out(&ds)?;
        Ok((ds, split))
    })?;
    let model = Model::new(cfg.model.clone().with_items(dataset.num_items()))?;
    run.manifest.arch_hash = Some(format!("{:016x}", model.arch_hash()));
    let pools = cfg.pools();
    let ks = &cfg.eval.ks;
    let baseline_loss = LossSpec::cross_entropy_only();

    // Recipe members.
    let mut baseline_row = None;
    let mut start = None;
    if cfg.pipeline == PipelineKind::FinetuneSetting {
        let params = run.stage("train/baseline", |rec, out| {
            let (init, seed) = (cfg.seed_for(Stream::Init, 0), cfg.seed_for(Stream::Baseline, 0));
            rec.seeds = vec![init, seed];
            let mut p = model.init_params(init);
            rec.epoch_losses = train_epochs(&model, &split, baseline_loss.clone(), cfg, &mut p, cfg.epochs.baseline, seed)?;
            store_checkpoint(rec, out, "checkpoints/baseline.ckpt", &p)
        })?;
        let reports = run.stage("eval/baseline", |rec, out| {
            rec.inputs.push(params.digest());
            let r = evaluate_pools(&model, &params, &split, &pools, ks)?;
            write_json(rec, out, "reports/eval/baseline.json", &r)?;
            Ok(r)
        })?;
        baseline_row = Some(ScoreRow::new("baseline (start)", &reports));
        start = Some(params);
    }

    let train_member = |rec: &mut StageRecord, spec: &FrameworkSpec, stream_init: (Stream, u64), stream_train: (Stream, u64)| -> Result<ParamVector> {
        let loss = build_loss_spec(spec)?;
        match &start {
            Some(base) => {
                let seed = cfg.seed_for(stream_train.0, stream_train.1);
                rec.seeds = vec![seed];
                rec.inputs.push(base.digest());
                let mut p = base.clone();
                rec.epoch_losses = train_epochs(&model, &split, loss, cfg, &mut p, cfg.epochs.finetune, seed)?;
                Ok(p)
            }
            None => {
                let init = cfg.seed_for(stream_init.0, stream_init.1);
                let seed = cfg.seed_for(stream_train.0, stream_train.1);
                rec.seeds = vec![init, seed];
                let mut p = model.init_params(init);
                rec.epoch_losses = train_epochs(&model, &split, loss, cfg, &mut p, cfg.epochs.baseline, seed)?;
                Ok(p)
            }
        }
    };

    let mut members = Vec::new();
    for (i, spec) in cfg.frameworks.iter().enumerate() {
        let label = spec.kind.as_str();
        let train_stream = match cfg.pipeline {
            PipelineKind::FinetuneSetting => (Stream::Finetune, i as u64),
            PipelineKind::BaselineSetting => (Stream::Baseline, i as u64 + 1),
        };
        let params = run.stage(&format!("train/{label}"), |rec, out| {
            let p = train_member(rec, spec, (Stream::Init, i as u64 + 1), train_stream)?;
            store_checkpoint(rec, out, &format!("checkpoints/{label}.ckpt"), &p)
        })?;
        let reports = run.stage(&format!("eval/{label}"), |rec, out| {
            rec.inputs.push(params.digest());
            let r = evaluate_pools(&model, &params, &split, &pools, ks)?;
            write_json(rec, out, &format!("reports/eval/{label}.json"), &r)?;
            Ok(r)
        })?;
        members.push(Member {
            spec: spec.clone(),
            params,
            fisher: None,
            reports,
        });
    }

    // Fisher information of each member.
    let fspec = cfg.fisher.sampling;
    let mut fisher_counters = Vec::new();
    for (i, m) in members.iter_mut().enumerate() {
        let label = m.label();
        let f = run.stage(&format!("fisher/{label}"), |rec, out| {
            let seed = cfg.seed_for(Stream::Fisher, i as u64);
            rec.seeds = vec![seed];
            rec.inputs.push(m.params.digest());
            let (f, stats) = estimate_fisher_ordered(&model, &m.params, &split, &fspec, cfg.fisher.batch_size, seed, cfg.fisher.order)?;
            rec.fisher = Some(FisherCounters::new(stats, &fspec));
            fisher_counters.push(FisherCounters::new(stats, &fspec));
            store_fisher(rec, out, &format!("fishers/{label}.mrgf"), &f)
        })?;
        m.fisher = Some(f);
    }

    let post_seed = cfg.seed_for(Stream::PostMerge, 0);
    let merge_and_finish = |run: &mut Run<'_>,
                                name: &str,
                                mode: MergeMode,
                                chosen: &[&Member],
                                fishers: Option<&[&FisherDiag]>|
     -> Result<(ParamVector, Vec<EvalReport>, Vec<EvalReport>)> {
        let merged = run.stage(&format!("merge/{name}"), |rec, out| {
            rec.inputs = chosen.iter().map(|m| m.params.digest()).collect();
            let p = match mode {
                MergeMode::Uniform => merge_uniform(&chosen.iter().map(|m| &m.params).collect::<Vec<_>>())?,
                MergeMode::Fisher => {
                    let fishers = fishers.expect("Fisher merge needs Fisher estimates");
                    rec.inputs.extend(fishers.iter().map(|f| f.digest()));
                    let entries: Vec<MergeEntry<'_>> = chosen
                        .iter()
                        .zip(fishers)
                        .map(|(m, f)| {
                            let idx = cfg.frameworks.iter().position(|s| s.kind == m.spec.kind).unwrap_or(0);
                            MergeEntry {
                                params: &m.params,
                                fisher: Some(*f),
                                lambda: cfg.lambda(idx),
                            }
                        })
                        .collect();
                    merge_fisher(&entries, cfg.merge.epsilon)?
                }
            };
            store_checkpoint(rec, out, &format!("merged/{name}.ckpt"), &p)
        })?;
        let before = run.stage(&format!("eval/merged/{name}"), |rec, out| {
            rec.inputs.push(merged.digest());
            let r = evaluate_pools(&model, &merged, &split, &pools, ks)?;
            write_json(rec, out, &format!("reports/eval/merged_{name}.json"), &r)?;
            Ok(r)
        })?;
        let (tuned, after) = if cfg.epochs.post_merge == 0 {
            (merged.clone(), before.clone())
        } else {
            let tuned = run.stage(&format!("post_merge/{name}"), |rec, out| {
                rec.seeds = vec![post_seed];
                rec.inputs.push(merged.digest());
                let mut p = merged.clone();
                rec.epoch_losses =
                    train_epochs(&model, &split, baseline_loss.clone(), cfg, &mut p, cfg.epochs.post_merge, post_seed)?;
                store_checkpoint(rec, out, &format!("merged/{name}_post.ckpt"), &p)
            })?;
            let after = run.stage(&format!("eval/merged/{name}_post"), |rec, out| {
                rec.inputs.push(tuned.digest());
                let r = evaluate_pools(&model, &tuned, &split, &pools, ks)?;
                write_json(rec, out, &format!("reports/eval/merged_{name}_post.json"), &r)?;
                Ok(r)
            })?;
            (tuned, after)
        };
        Ok((tuned, before, after))
    };

    let all: Vec<&Member> = members.iter().collect();
    let all_fishers: Vec<&FisherDiag> = members.iter().map(|m| m.fisher.as_ref().expect("estimated")).collect();
    let (_, uniform_before, uniform_after) = merge_and_finish(run, "uniform", MergeMode::Uniform, &all, None)?;
    let (_, fisher_before, fisher_after) = merge_and_finish(run, "fisher", MergeMode::Fisher, &all, Some(&all_fishers))?;
    let fisher_row = ScoreRow::new("fisher", &fisher_after);

    // Sampling sweep.
    let mut sweep = Vec::new();
    for (j, spec) in cfg.analysis.sweep.iter().enumerate() {
        let tag = spec.label();
        let mut counters = Vec::new();
        let mut fishers = Vec::new();
        for (i, m) in members.iter().enumerate() {
            let f = run.stage(&format!("sweep/{tag}/fisher/{}", m.label()), |rec, out| {
                let seed = cfg.seed_for(Stream::Sweep, (j * members.len() + i) as u64);
                rec.seeds = vec![seed];
                rec.inputs.push(m.params.digest());
                let (f, stats) =
                    estimate_fisher_ordered(&model, &m.params, &split, spec, cfg.fisher.batch_size, seed, cfg.fisher.order)?;
                rec.fisher = Some(FisherCounters::new(stats, spec));
                counters.push(FisherCounters::new(stats, spec));
                store_fisher(rec, out, &format!("sweep/{tag}/{}.mrgf", m.label()), &f)
            })?;
            fishers.push(f);
        }
        let refs: Vec<&FisherDiag> = fishers.iter().collect();
        let (_, _, after) = merge_and_finish(run, &format!("sweep_{tag}"), MergeMode::Fisher, &all, Some(&refs))?;
        sweep.push(SweepRow {
            sampling: *spec,
            scores: ScoreRow::new(&tag, &after),
            counters,
        });
    }

    // Recipe ablation: drop the weakest member.
    let mut ablation = None;
    if cfg.analysis.drop_weakest && members.len() > 1 {
        let weakest = (0..members.len())
            .min_by(|&a, &b| {
                let (x, y) = (
                    ScoreRow::new("", &members[a].reports).headline(),
                    ScoreRow::new("", &members[b].reports).headline(),
                );
                x.total_cmp(&y).then(a.cmp(&b))
            })
            .expect("nonempty");
        let kept: Vec<&Member> = members.iter().enumerate().filter(|(i, _)| *i != weakest).map(|(_, m)| m).collect();
        let kept_f: Vec<&FisherDiag> = kept.iter().map(|m| m.fisher.as_ref().expect("estimated")).collect();
        let (_, _, after) = merge_and_finish(run, "fisher_without_weakest", MergeMode::Fisher, &kept, Some(&kept_f))?;
        ablation = Some(AblationRow {
            dropped: members[weakest].label().to_string(),
            with: fisher_row.clone(),
            without: ScoreRow::new("fisher (w.o.)", &after),
        });
    }

    // Error inconsistency between same-framework twins and across frameworks.
    let mut inconsistency = None;
    if cfg.analysis.twins {
        let full_idx = pools.iter().position(|p| *p == CandidatePool::Full).unwrap_or(0);
        let mut twin_reports = Vec::new();
        for (i, m) in members.iter().enumerate() {
            let label = m.label();
            let reports = run.stage(&format!("twin/{label}"), |rec, out| {
                let p = train_member(rec, &m.spec, (Stream::Twin, 2 * i as u64), (Stream::Twin, 2 * i as u64 + 1))?;
                let p = store_checkpoint(rec, out, &format!("twins/{label}.ckpt"), &p)?;
                let r = evaluate(&model, &p, &split, &pools[full_idx], ks, Target::Test)?;
                write_json(rec, out, &format!("reports/eval/twin_{label}.json"), &r)?;
                Ok(r)
            })?;
            twin_reports.push(reports);
        }
        let report = run.stage("inconsistency", |rec, out| {
            let values = |r: &EvalReport| r.user_values(10).expect("k=10 evaluated");
            let mut pairs = Vec::new();
            for (i, m) in members.iter().enumerate() {
                let mine = values(&m.reports[full_idx]);
                pairs.push(InconsistencyPair {
                    a: m.label().into(),
                    b: format!("{} (twin)", m.label()),
                    relation: PairRelation::Similar,
                    inconsistency: inconsistency_of(&mine, &values(&twin_reports[i]), CORRECT_THRESHOLD)?,
                });
                for o in members[i + 1..].iter() {
                    if o.spec.kind.family() == m.spec.kind.family() {
                        continue;
                    }
                    pairs.push(InconsistencyPair {
                        a: m.label().into(),
                        b: o.label().into(),
                        relation: PairRelation::Dissimilar,
                        inconsistency: inconsistency_of(&mine, &values(&o.reports[full_idx]), CORRECT_THRESHOLD)?,
                    });
                }
            }
            let report = InconsistencyReport::new(CORRECT_THRESHOLD, pairs);
            write_json(rec, out, "reports/inconsistency.json", &report)?;
            Ok(report)
        })?;
        inconsistency = Some(report);
    }

    // Probability mass of the top-k items.
    let mut topk_mass = None;
    if !cfg.analysis.topk_mass_sizes.is_empty() {
        let m = &members[0];
        topk_mass = Some(run.stage("topk_mass", |rec, out| {
            rec.inputs.push(m.params.digest());
            let mut sizes: Vec<usize> = cfg
                .analysis
                .topk_mass_sizes
                .iter()
                .copied()
                .filter(|&k| k < dataset.num_items())
                .collect();
            sizes.push(dataset.num_items());
            let mass = cumulative_topk_mass(&model, &m.params, &split, &sizes)?;
            let t = TopkMass {
                model: m.label().into(),
                sizes,
                mass,
            };
            write_json(rec, out, "reports/topk_mass.json", &t)?;
            Ok(t)
        })?);
    }

    if cfg.analysis.plane && members.len() >= 3 {
        run.stage("plane", |rec, out| {
            let merged: Vec<(String, ParamVector)> = ["uniform", "fisher", "uniform_post", "fisher_post"]
                .iter()
                .filter_map(|n| {
                    let path = out.join(format!("merged/{n}.ckpt"));
                    let bytes = std::fs::read(path).ok()?;
                    ParamVector::read_checkpoint(&mut bytes.as_slice()).ok().map(|p| (n.to_string(), p))
                })
                .collect();
            let mut extra: Vec<(String, &[f64])> =
                members[3..].iter().map(|m| (m.label().to_string(), m.params.values())).collect();
            extra.extend(merged.iter().map(|(n, p)| (format!("merged_{n}"), p.values())));
            let mut pts = plane_projection(
                members[0].params.values(),
                members[1].params.values(),
                members[2].params.values(),
                &extra,
            )?;
            for (p, m) in pts.iter_mut().zip(&members[..3]) {
                p.label = m.label().to_string();
            }
            let mut buf = Vec::new();
            write_plane_csv(&mut buf, &pts)?;
            write_artifact(rec, out, "reports/plane.csv", &buf)
        })?;
    }

    Ok(Summary {
        pipeline: cfg.pipeline,
        num_users: split.num_users(),
        num_items: dataset.num_items(),
        baseline: baseline_row,
        members: members.iter().map(|m| ScoreRow::new(m.label(), &m.reports)).collect(),
        uniform_before_epoch: ScoreRow::new("uniform (before epoch)", &uniform_before),
        fisher_before_epoch: ScoreRow::new("fisher (before epoch)", &fisher_before),
        uniform: ScoreRow::new("uniform", &uniform_after),
        fisher: fisher_row,
        sweep,
        ablation,
        inconsistency,
        topk_mass,
    })
}

fn pool_columns(summary: &Summary) -> Vec<String> {
    let rank = |p: &str| ["full", "random", "popular"].iter().position(|&q| q == p).unwrap_or(3);
    let mut cols: Vec<String> = summary.fisher.ndcg.keys().cloned().collect();
    cols.sort_by_key(|c| rank(c));
    cols
}

fn score_line(out: &mut String, row: &ScoreRow, cols: &[String], k: usize) {
    let _ = write!(out, "{:<34}", row.label);
    for c in cols {
        let _ = write!(out, " {:>9.4}", row.get(c, k).unwrap_or(f64::NAN));
    }
    out.push('\n');
}

fn header(out: &mut String, title: &str, cols: &[String]) {
    let _ = writeln!(out, "{title}");
    let _ = write!(out, "{:<34}", "model");
    for c in cols {
        let _ = write!(out, " {c:>9}");
    }
    out.push('\n');
}

fn reference_row(out: &mut String, cols: &[String]) {
    let _ = write!(out, "{:<34}", "fisher [reference, not gating]");
    for c in cols {
        let v = match c.as_str() {
            "full" => REFERENCE_FISHER_ROW[0],
            "random" => REFERENCE_FISHER_ROW[1],
            "popular" => REFERENCE_FISHER_ROW[2],
            _ => f64::NAN,
        };
        let _ = write!(out, " {v:>9.4}");
    }
    let _ = writeln!(out, "\n  ^ {REFERENCE_NOTE}");
}

/// Aligned text tables of a run.
pub fn render_tables(summary: &Summary) -> String {
    let cols = pool_columns(summary);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "setting: {}, users: {}, items: {}\n",
        match summary.pipeline {
            PipelineKind::BaselineSetting => "baseline",
            PipelineKind::FinetuneSetting => "fine-tune",
        },
        summary.num_users,
        summary.num_items
    );
    header(&mut out, "NDCG@10 of recipe members and merges", &cols);
    if let Some(b) = &summary.baseline {
        score_line(&mut out, b, &cols, 10);
    }
    for r in &summary.members {
        score_line(&mut out, r, &cols, 10);
    }
    for r in [
        &summary.uniform_before_epoch,
        &summary.fisher_before_epoch,
        &summary.uniform,
        &summary.fisher,
    ] {
        score_line(&mut out, r, &cols, 10);
    }
    reference_row(&mut out, &cols);

    let k20: Vec<&ScoreRow> = summary.members.iter().chain([&summary.uniform, &summary.fisher]).collect();
    if k20.iter().any(|r| r.get(&cols[0], 20).is_some()) {
        out.push('\n');
        header(&mut out, "NDCG@20", &cols);
        for r in k20 {
            score_line(&mut out, r, &cols, 20);
        }
    }

    if !summary.sweep.is_empty() {
        out.push('\n');
        header(&mut out, "Fisher sampling sweep (NDCG@10 after merge and one epoch)", &cols);
        for s in &summary.sweep {
            let _ = write!(out, "{:<34}", s.scores.label);
            for c in &cols {
                let _ = write!(out, " {:>9.4}", s.scores.get(c, 10).unwrap_or(f64::NAN));
            }
            let passes: u64 = s.counters.iter().map(|c| c.backward_passes).sum();
            let _ = writeln!(out, "   backward passes {passes}");
        }
    }

    if let Some(a) = &summary.ablation {
        out.push('\n');
        header(&mut out, &format!("Recipe ablation (dropped {})", a.dropped), &cols);
        let mut with = a.with.clone();
        with.label = "fisher (with)".into();
        score_line(&mut out, &with, &cols, 10);
        score_line(&mut out, &a.without, &cols, 10);
    }

    if let Some(inc) = &summary.inconsistency {
        out.push('\n');
        let _ = writeln!(out, "Error inconsistency, % of users (correct: NDCG@10 > {}, i.e. rank <= 2)", inc.threshold);
        let _ = writeln!(out, "{:<34} {:>9} {:>11}", "framework", "similar", "dissimilar");
        let mut families: Vec<&str> = inc
            .pairs
            .iter()
            .filter_map(|p| p.a.parse::<FrameworkKind>().ok().map(|k| k.family()))
            .collect();
        families.dedup();
        for fam in families {
            let mean = |rel: PairRelation| {
                let v: Vec<f64> = inc
                    .pairs
                    .iter()
                    .filter(|p| p.relation == rel)
                    .filter(|p| {
                        let fa = p.a.parse::<FrameworkKind>().ok().map(|k| k.family());
                        let fb = p.b.parse::<FrameworkKind>().ok().map(|k| k.family());
                        fa == Some(fam) || fb == Some(fam)
                    })
                    .map(|p| p.inconsistency)
                    .collect();
                if v.is_empty() {
                    f64::NAN
                } else {
                    100.0 * v.iter().sum::<f64>() / v.len() as f64
                }
            };
            let _ = writeln!(
                out,
                "{fam:<34} {:>9.2} {:>11.2}",
                mean(PairRelation::Similar),
                mean(PairRelation::Dissimilar)
            );
        }
        let pct = |v: Option<f64>| v.map_or(f64::NAN, |x| 100.0 * x);
        let _ = writeln!(
            out,
            "{:<34} {:>9.2} {:>11.2}",
            "mean",
            pct(inc.mean_similar),
            pct(inc.mean_dissimilar)
        );
        for (fam, s, d) in REFERENCE_INCONSISTENCY {
            let _ = writeln!(out, "{:<34} {s:>9.2} {d:>11.2}", format!("{fam} [reference, not gating]"));
        }
        let _ = writeln!(out, "  ^ {REFERENCE_NOTE}");
    }

    if let Some(t) = &summary.topk_mass {
        out.push('\n');
        let _ = writeln!(out, "Cumulative top-k probability mass ({})", t.model);
        let _ = writeln!(out, "{:<34} {:>9}", "k", "mass");
        for (k, m) in t.sizes.iter().zip(&t.mass) {
            let _ = writeln!(out, "{k:<34} {m:>9.4}");
        }
        for (k, m) in REFERENCE_TOPK_MASS {
            let _ = writeln!(out, "{:<34} {m:>9.4}", format!("{k} [reference, not gating]"));
        }
        let _ = writeln!(out, "  ^ {REFERENCE_NOTE}");
    }
    out
}

/// Default run directory under `base` for a config.
pub fn run_dir(base: &Path, cfg: &ExperimentConfig) -> PathBuf {
    base.join(format!("run-{}", &cfg.digest()[..12]))
}
