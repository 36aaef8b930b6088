use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use mergerec::config::{ExperimentConfig, PoolRegime};
use mergerec::data::{split_leave_one_out, LeaveOneOutSplit, SequenceDataset};
use mergerec::eval::{
    error_inconsistency, evaluate, plane_projection, write_plane_csv, CandidatePool, EvalReport, Target,
    CORRECT_THRESHOLD,
};
use mergerec::fisher::{cumulative_topk_mass, estimate_fisher_ordered, BatchOrder, SamplingMethod, SamplingSpec};
use mergerec::frameworks::{build_loss_spec, FrameworkKind, FrameworkSpec};
use mergerec::merge::{merge_recipe_files, MergeRecipe};
use mergerec::model::{Model, ParamVector};
use mergerec::pipeline::{load_dataset, render_tables, run_pipeline, train_epochs};
use mergerec::util::Stream;
use mergerec::{Error, ErrorClass};

#[derive(Parser)]
#[command(name = "merge-rec", version, about = "Fisher-weighted merging of sequential recommenders")]
struct Cli {
    /// Experiment config (JSON). Defaults to the full-size preset, or the
    /// desk preset when MERGE_REC_DESK=1.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "runs")]
    out_dir: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a sequence dataset from a ratings file or the synthetic generator.
    Ingest(IngestArgs),
    /// Train one framework from scratch or from a checkpoint.
    Train(TrainArgs),
    /// Estimate the diagonal Fisher information of a checkpoint.
    Fisher(FisherArgs),
    /// Merge checkpoints as described by a recipe file.
    Merge(MergeArgs),
    /// NDCG@k of a checkpoint on the candidate pools.
    Eval(EvalArgs),
    /// Error inconsistency between two evaluation reports.
    Inconsistency(InconsistencyArgs),
    /// Project checkpoints onto the plane through three of them.
    VizPlane(VizArgs),
    /// Mean cumulative probability of the top-k items.
    TopkMass(TopkArgs),
    /// Run the whole experiment described by the config.
    Pipeline,
}

#[derive(Args)]
struct IngestArgs {
    /// `UserID::MovieID::Rating::Timestamp` file; omitted means use the config's data block.
    #[arg(long, conflicts_with = "synthetic")]
    ratings: Option<PathBuf>,
    /// Use the synthetic generator with the config's (or default) settings.
    #[arg(long)]
    synthetic: bool,
    #[arg(long)]
    min_seq_len: Option<usize>,
    #[arg(long)]
    max_users: Option<usize>,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ModelInput {
    #[arg(long)]
    dataset: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: ModelInput,
    #[arg(long, default_value = "baseline")]
    framework: FrameworkKind,
    /// Framework options as JSON, overriding `--framework`.
    #[arg(long)]
    framework_json: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Start from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Random,
    Topk,
    Model,
    Target,
}

impl From<MethodArg> for SamplingMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Random => SamplingMethod::Random,
            MethodArg::Topk => SamplingMethod::TopK,
            MethodArg::Model => SamplingMethod::ModelBased,
            MethodArg::Target => SamplingMethod::TargetItem,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum OrderArg {
    Sorted,
    Shuffled,
}

#[derive(Args)]
struct FisherArgs {
    #[command(flatten)]
    data: ModelInput,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "topk")]
    method: MethodArg,
    #[arg(long, default_value_t = 10)]
    sample_size: usize,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, value_enum, default_value = "sorted")]
    order: OrderArg,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct MergeArgs {
    #[arg(long)]
    recipe: PathBuf,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum TargetArg {
    Test,
    Valid,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: ModelInput,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Pools to evaluate (default: the config's).
    #[arg(long, value_enum)]
    pool: Vec<PoolArg>,
    #[arg(long, value_delimiter = ',')]
    k: Vec<usize>,
    #[arg(long, value_enum, default_value = "test")]
    target: TargetArg,
    /// Report file; one JSON array of per-pool reports.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PoolArg {
    Full,
    Random,
    Popular,
}

#[derive(Args)]
struct InconsistencyArgs {
    /// Report file (single report or the array written by `eval`).
    a: PathBuf,
    b: PathBuf,
    /// Pool to compare when the files hold several.
    #[arg(long, value_enum, default_value = "full")]
    pool: PoolArg,
    #[arg(long, default_value_t = CORRECT_THRESHOLD)]
    threshold: f64,
}

#[derive(Args)]
struct VizArgs {
    /// The three checkpoints spanning the plane.
    #[arg(long, num_args = 3, required = true)]
    plane: Vec<PathBuf>,
    /// Further checkpoints to project, as `label=path`.
    #[arg(long)]
    point: Vec<String>,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct TopkArgs {
    #[command(flatten)]
    data: ModelInput,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [10, 30, 50])]
    sizes: Vec<usize>,
}

struct Ctx {
    cfg: ExperimentConfig,
    out_dir: PathBuf,
}

impl Ctx {
    fn output(&self, given: &Option<PathBuf>, default: &str) -> Result<PathBuf> {
        let path = given.clone().unwrap_or_else(|| self.out_dir.join(default));
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        Ok(path)
    }

    fn load_data(&self, input: &ModelInput) -> Result<(SequenceDataset, LeaveOneOutSplit, Model)> {
        let ds = SequenceDataset::read(&mut BufReader::new(open(&input.dataset)?))
            .with_context(|| format!("reading dataset {}", input.dataset.display()))?;
        let split = split_leave_one_out(&ds)?;
        let model = Model::new(self.cfg.model.clone().with_items(ds.num_items()))?;
        Ok((ds, split, model))
    }

    fn pools(&self, chosen: &[PoolArg]) -> Vec<CandidatePool> {
        let all = self.cfg.pools();
        if chosen.is_empty() {
            return all;
        }
        let mut cfg = self.cfg.clone();
        cfg.eval.pools = chosen.iter().map(|&p| pool_regime(p)).collect();
        cfg.pools()
    }
}

fn pool_regime(p: PoolArg) -> PoolRegime {
    match p {
        PoolArg::Full => PoolRegime::Full,
        PoolArg::Random => PoolRegime::Random,
        PoolArg::Popular => PoolRegime::Popular,
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(Error::from).with_context(|| format!("opening {}", path.display()))
}

fn load_checkpoint(model: &Model, path: &Path) -> Result<ParamVector> {
    model
        .load_checkpoint(&mut BufReader::new(open(path)?))
        .with_context(|| format!("reading checkpoint {}", path.display()))
}

fn load_any_checkpoint(path: &Path) -> Result<ParamVector> {
    ParamVector::read_checkpoint(&mut BufReader::new(open(path)?))
        .with_context(|| format!("reading checkpoint {}", path.display()))
}

fn write_bytes(path: &Path, write: impl FnOnce(&mut BufWriter<File>) -> mergerec::Result<()>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(Error::from).with_context(|| format!("creating {}", path.display()))?);
    write(&mut w)?;
    w.flush().map_err(Error::from)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)? + "\n";
    std::fs::write(path, text).map_err(Error::from).with_context(|| format!("writing {}", path.display()))
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value).map_err(Error::from)?);
    Ok(())
}

fn cmd_ingest(ctx: &Ctx, a: &IngestArgs) -> Result<()> {
    let mut cfg = ctx.cfg.clone();
    if let Some(r) = &a.ratings {
        cfg.data.ratings = Some(r.clone());
    }
    if a.synthetic {
        cfg.data.ratings = None;
        cfg.data.synthetic.get_or_insert_with(Default::default);
    }
    if let Some(m) = a.min_seq_len {
        cfg.data.min_seq_len = m;
    }
    if a.max_users.is_some() {
        cfg.data.max_users = a.max_users;
    }
    let ds = load_dataset(&cfg)?;
    let out = ctx.output(&a.output, "dataset.mrgd")?;
    write_bytes(&out, |w| ds.write(w))?;
    print_json(&serde_json::json!({
        "output": out,
        "users": ds.num_users(),
        "items": ds.num_items(),
        "interactions": ds.sequences().iter().map(Vec::len).sum::<usize>(),
        "sha256": mergerec::util::sha256_hex(&ds.to_bytes()),
    }))
}

fn cmd_train(ctx: &Ctx, a: &TrainArgs) -> Result<()> {
    let (_, split, model) = ctx.load_data(&a.data)?;
    let spec = match &a.framework_json {
        Some(j) => FrameworkSpec::from_json(j)?,
        None => FrameworkSpec::new(a.framework),
    };
    let loss = build_loss_spec(&spec)?;
    let index = FrameworkKind::ALL.iter().position(|&k| k == spec.kind).unwrap_or(0) as u64;
    let (mut params, epochs, stream) = match &a.init {
        Some(p) => (load_checkpoint(&model, p)?, ctx.cfg.epochs.finetune, Stream::Finetune),
        None => (
            model.init_params(ctx.cfg.seed_for(Stream::Init, index + 1)),
            ctx.cfg.epochs.baseline,
            Stream::Baseline,
        ),
    };
    let epochs = a.epochs.unwrap_or(epochs);
    let seed = ctx.cfg.seed_for(stream, index);
    let losses = train_epochs(&model, &split, loss, &ctx.cfg, &mut params, epochs, seed)?;
    let out = ctx.output(&a.output, &format!("{}.ckpt", spec.kind))?;
    write_bytes(&out, |w| params.write_checkpoint(w))?;
    print_json(&serde_json::json!({
        "output": out,
        "framework": spec.kind.as_str(),
        "seed": seed,
        "epoch_losses": losses,
        "sha256": mergerec::util::sha256_hex(&params.checkpoint_bytes()),
    }))
}

fn cmd_fisher(ctx: &Ctx, a: &FisherArgs) -> Result<()> {
    let (_, split, model) = ctx.load_data(&a.data)?;
    let params = load_checkpoint(&model, &a.checkpoint)?;
    let spec = SamplingSpec::new(a.method.into(), a.sample_size);
    let bs = a.batch_size.unwrap_or(ctx.cfg.fisher.batch_size);
    let order = match a.order {
        OrderArg::Sorted => BatchOrder::Sorted,
        OrderArg::Shuffled => BatchOrder::Shuffled,
    };
    let seed = ctx.cfg.seed_for(Stream::Fisher, 0);
    let (fisher, stats) = estimate_fisher_ordered(&model, &params, &split, &spec, bs, seed, order)?;
    let out = ctx.output(&a.output, &format!("fisher_{}.mrgf", spec.label()))?;
    write_bytes(&out, |w| fisher.write(w))?;
    print_json(&serde_json::json!({
        "output": out,
        "sampling": spec,
        "batch_size": bs,
        "seed": seed,
        "num_batches": stats.num_batches,
        "backward_passes": stats.backward_passes,
        "expected_backward_passes": stats.num_batches * spec.passes_per_batch(),
        "sha256": fisher.digest(),
    }))
}

fn cmd_merge(ctx: &Ctx, a: &MergeArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.recipe)
        .map_err(|e| Error::Config(format!("cannot read recipe {}: {e}", a.recipe.display())))?;
    let recipe = MergeRecipe::from_json(&text)?;
    let base = a.recipe.parent().unwrap_or(Path::new("."));
    let merged = merge_recipe_files(&recipe, base)?;
    let out = ctx.output(&a.output, &format!("merged_{}.ckpt", recipe.mode.as_str()))?;
    merged.write(&out)?;
    print_json(&serde_json::json!({
        "output": out,
        "provenance": merged.provenance,
        "sha256": merged.params.digest(),
    }))
}

fn cmd_eval(ctx: &Ctx, a: &EvalArgs) -> Result<()> {
    let (_, split, model) = ctx.load_data(&a.data)?;
    let params = load_checkpoint(&model, &a.checkpoint)?;
    let ks = if a.k.is_empty() { ctx.cfg.eval.ks.clone() } else { a.k.clone() };
    let target = match a.target {
        TargetArg::Test => Target::Test,
        TargetArg::Valid => Target::Valid,
    };
    let reports = ctx
        .pools(&a.pool)
        .iter()
        .map(|p| evaluate(&model, &params, &split, p, &ks, target))
        .collect::<mergerec::Result<Vec<_>>>()?;
    let out = ctx.output(&a.output, "eval.json")?;
    write_json(&out, &reports)?;
    let mut table = format!("{:<10}", "pool");
    for k in &ks {
        table += &format!(" {:>9}", format!("ndcg@{k}"));
    }
    for r in &reports {
        table += &format!("\n{:<10}", r.meta.pool.name());
        for k in &ks {
            table += &format!(" {:>9.4}", r.mean(*k).unwrap_or(f64::NAN));
        }
    }
    println!("{table}");
    Ok(())
}

fn read_reports(path: &Path) -> Result<Vec<EvalReport>> {
    let text = std::fs::read_to_string(path).map_err(Error::from).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(Error::from)?;
    let reports = if value.is_array() {
        serde_json::from_value(value)
    } else {
        serde_json::from_value(value).map(|r| vec![r])
    };
    Ok(reports.map_err(Error::from)?)
}

fn cmd_inconsistency(a: &InconsistencyArgs) -> Result<()> {
    let name = match a.pool {
        PoolArg::Full => "full",
        PoolArg::Random => "random",
        PoolArg::Popular => "popular",
    };
    let pick = |path: &Path| -> Result<EvalReport> {
        let reports = read_reports(path)?;
        let n = reports.len();
        reports
            .into_iter()
            .find(|r| r.meta.pool.name() == name || n == 1)
            .ok_or_else(|| Error::Input(format!("{} has no {name} report", path.display())).into())
    };
    let (ra, rb) = (pick(&a.a)?, pick(&a.b)?);
    let value = error_inconsistency(&ra, &rb, a.threshold)?;
    print_json(&serde_json::json!({
        "pool": name,
        "threshold": a.threshold,
        "users": ra.per_user.len(),
        "inconsistency": value,
    }))
}

fn cmd_viz(ctx: &Ctx, a: &VizArgs) -> Result<()> {
    let plane: Vec<ParamVector> = a.plane.iter().map(|p| load_any_checkpoint(p)).collect::<Result<_>>()?;
    for p in &plane[1..] {
        plane[0].ensure_compatible(p)?;
    }
    let mut extra = Vec::new();
    for spec in &a.point {
        let (label, path) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--point expects label=path, got {spec}")))?;
        let p = load_any_checkpoint(Path::new(path))?;
        plane[0].ensure_compatible(&p)?;
        extra.push((label.to_string(), p));
    }
    let refs: Vec<(String, &[f64])> = extra.iter().map(|(l, p)| (l.clone(), p.values())).collect();
    let mut pts = plane_projection(plane[0].values(), plane[1].values(), plane[2].values(), &refs)?;
    for (p, path) in pts.iter_mut().zip(&a.plane) {
        p.label = path.file_stem().map_or(p.label.clone(), |s| s.to_string_lossy().into_owned());
    }
    let out = ctx.output(&a.output, "plane.csv")?;
    let mut buf = Vec::new();
    write_plane_csv(&mut buf, &pts)?;
    std::fs::write(&out, &buf).map_err(Error::from)?;
    print!("{}", String::from_utf8_lossy(&buf));
    Ok(())
}

fn cmd_topk(ctx: &Ctx, a: &TopkArgs) -> Result<()> {
    let (ds, split, model) = ctx.load_data(&a.data)?;
    let params = load_checkpoint(&model, &a.checkpoint)?;
    let mut sizes = a.sizes.clone();
    if sizes.last().is_some_and(|&k| k < ds.num_items()) {
        sizes.push(ds.num_items());
    }
    let mass = cumulative_topk_mass(&model, &params, &split, &sizes)?;
    print_json(&serde_json::json!({
        "sizes": sizes,
        "mass": mass,
        "reference": {"sizes": [10, 30, 50], "mass": [0.381, 0.569, 0.658], "note": mergerec::pipeline::REFERENCE_NOTE},
    }))
}

fn cmd_pipeline(ctx: &Ctx) -> Result<()> {
    let outcome = run_pipeline(&ctx.cfg, &ctx.out_dir)?;
    print!("{}", render_tables(&outcome.summary));
    println!("\nartifacts and manifest written to {}", ctx.out_dir.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::preset_from_env(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let ctx = Ctx {
        cfg,
        out_dir: cli.out_dir,
    };
    let stage = match &cli.command {
        Command::Ingest(_) => "ingest",
        Command::Train(_) => "train",
        Command::Fisher(_) => "fisher",
        Command::Merge(_) => "merge",
        Command::Eval(_) => "eval",
        Command::Inconsistency(_) => "inconsistency",
        Command::VizPlane(_) => "viz-plane",
        Command::TopkMass(_) => "topk-mass",
        Command::Pipeline => "pipeline",
    };
    let result = match &cli.command {
        Command::Ingest(a) => cmd_ingest(&ctx, a),
        Command::Train(a) => cmd_train(&ctx, a),
        Command::Fisher(a) => cmd_fisher(&ctx, a),
        Command::Merge(a) => cmd_merge(&ctx, a),
        Command::Eval(a) => cmd_eval(&ctx, a),
        Command::Inconsistency(a) => cmd_inconsistency(a),
        Command::VizPlane(a) => cmd_viz(&ctx, a),
        Command::TopkMass(a) => cmd_topk(&ctx, a),
        Command::Pipeline => cmd_pipeline(&ctx),
    };
    result.with_context(|| format!("{stage} failed"))
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()).map(Error::class) {
        Some(ErrorClass::Usage) => 2,
        Some(ErrorClass::Numeric) => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("merge-rec: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
