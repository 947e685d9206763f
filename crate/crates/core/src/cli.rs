//! Command-line front end. Every subcommand reads and writes the file formats
//! owned by the library modules; nothing here is needed to use the library.
//!
//! Exit codes: 0 success, 1 runtime or validation failure, 2 usage error
//! (bad arguments, unknown config keys, invalid config values).

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::dataio::{
    generate_synthetic_dataset, validate_manifest, Dataset, DatasetManifest, FoldPlan, ManifestFragment, SynthConfig,
    TokenBag,
};
use crate::error::{Error, Result};
use crate::metrics::{
    ensemble_sets, export_attention_map, format_per_class_table, format_summary_table, MetricsReport, ModelRow,
    PredictionSet,
};
use crate::mil::load_checkpoint;
use crate::trainer::{self, apply_overrides, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "raa-mil",
    version,
    about = "Region-affinity attention MIL on cached token grids"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic token-bag dataset with a stratified test hold-out.
    GenSynth(GenSynthArgs),
    /// Write a stratified fold plan for a manifest.
    Split(SplitArgs),
    /// Cross-validated training into a run directory.
    Train(TrainArgs),
    /// Per-fold class probabilities for a set of patients.
    Predict(PredictArgs),
    /// Average per-fold prediction files.
    Ensemble(EnsembleArgs),
    /// Metrics JSON and summary tables for prediction files.
    Report(ReportArgs),
    /// Attention heatmaps (PGM + CSV) for one patient.
    ExportAttn(ExportAttnArgs),
    /// Check a manifest and its token files, optionally merging featurizer fragments first.
    Validate(ValidateArgs),
}

#[derive(Debug, Args)]
struct Overrides {
    /// JSON config file; fields left out keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config field, e.g. `--set lr=0.001`. Repeatable; wins over the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Seed for every random stream; wins over `--set seed=...`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct GenSynthArgs {
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SplitArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON array of patient ids to leave out of every fold.
    #[arg(long)]
    exclude: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Fold plan from `split`; planned from the config when absent.
    #[arg(long)]
    plan: Option<PathBuf>,
    /// JSON array of held-out patient ids (replaces `test_ids` in the config).
    #[arg(long)]
    test_ids: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    /// Train folds concurrently.
    #[arg(long)]
    parallel_folds: bool,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Run directory; every `fold_*.raac` in it is used.
    #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
    run: Option<PathBuf>,
    /// Individual checkpoint files. Repeatable.
    #[arg(long)]
    checkpoint: Vec<PathBuf>,
    /// JSON array of patient ids to score; all patients when absent.
    #[arg(long)]
    ids: Option<PathBuf>,
    /// Output directory for `probs_fold_<k>.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EnsembleArgs {
    /// Per-fold prediction files.
    #[arg(required = true)]
    probs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Prediction files with ground truth, as `NAME=PATH` or `PATH` (name from the file stem).
    #[arg(required = true)]
    probs: Vec<String>,
    /// Directory for `<name>.metrics.json` and `tables.txt`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExportAttnArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Patient id.
    #[arg(long)]
    id: String,
    /// Side length of each upsampled image.
    #[arg(long, default_value_t = 224)]
    pixels: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ValidateArgs {
    /// Manifest to check. With `--merge` it may not exist yet.
    manifest: PathBuf,
    /// Featurizer fragment to merge before validating. Repeatable.
    #[arg(long)]
    merge: Vec<PathBuf>,
    /// Where to write the merged manifest; defaults to the manifest path.
    #[arg(long, requires = "merge")]
    out: Option<PathBuf>,
}

/// Parse `argv` (program name first) and run one subcommand.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => EXIT_USAGE,
                _ => EXIT_FAILURE,
            }
        }
    }
}

fn run(cmd: Command) -> Result<i32> {
    let done = |r: Result<()>| r.map(|()| EXIT_OK);
    match cmd {
        Command::GenSynth(a) => done(gen_synth(a)),
        Command::Split(a) => done(split(a)),
        Command::Train(a) => done(train(a)),
        Command::Predict(a) => done(predict(a)),
        Command::Ensemble(a) => done(ensemble(a)),
        Command::Report(a) => done(report(a)),
        Command::ExportAttn(a) => done(export_attn(a)),
        Command::Validate(a) => validate(a),
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Defaults, then the config file, then `--set`, then `--seed`. Problems in
/// the file are usage errors, like unknown `--set` keys.
fn resolve<T: Serialize + DeserializeOwned + Default>(o: &Overrides) -> Result<T> {
    let base: T = match &o.config {
        Some(p) => read_json(p).map_err(|e| Error::Config(e.to_string()))?,
        None => T::default(),
    };
    let mut set = o.set.clone();
    if let Some(seed) = o.seed {
        set.push(format!("seed={seed}"));
    }
    apply_overrides(&base, &set)
}

fn gen_synth(a: GenSynthArgs) -> Result<()> {
    let cfg: SynthConfig = resolve(&a.overrides)?;
    cfg.validate()?;
    let ds = generate_synthetic_dataset(&cfg, &a.out)?;
    println!(
        "wrote {} patients ({} held out) to {}",
        ds.manifest.patients.len(),
        ds.test_ids.len(),
        ds.manifest_path.display()
    );
    Ok(())
}

fn split(a: SplitArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let exclude: Vec<String> = match &a.exclude {
        Some(p) => read_json(p)?,
        None => Vec::new(),
    };
    let pool: Vec<(String, usize)> = manifest
        .labels()
        .into_iter()
        .filter(|(id, _)| !exclude.contains(id))
        .collect();
    let plan = FoldPlan::stratified(&pool, a.k, a.seed)?;
    plan.save(&a.out)?;
    println!("{} patients in {} folds -> {}", pool.len(), a.k, a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg: TrainConfig = resolve(&a.overrides)?;
    if let Some(p) = &a.test_ids {
        cfg.test_ids = read_json(p)?;
    }
    cfg.parallel_folds |= a.parallel_folds;
    cfg.validate()?;
    let data = Dataset::load(&a.manifest)?;
    let plan = match &a.plan {
        Some(p) => FoldPlan::load(p)?,
        None => trainer::plan_folds(&data, &cfg)?,
    };
    let run = trainer::run_cv(&data, &plan, &cfg, Some(&a.out))?;
    for line in &run.report.summary {
        println!("{line}");
    }
    Ok(())
}

fn select_bags<'a>(data: &'a Dataset, ids: Option<&Path>) -> Result<Vec<&'a TokenBag>> {
    let Some(path) = ids else {
        return Ok(data.bags.iter().collect());
    };
    let ids: Vec<String> = read_json(path)?;
    ids.iter()
        .map(|id| {
            data.bag(id)
                .ok_or_else(|| Error::Invalid(format!("patient `{id}` is not in the manifest")))
        })
        .collect()
}

fn predict(a: PredictArgs) -> Result<()> {
    let models = match &a.run {
        Some(dir) => trainer::load_run_models(dir)?,
        None => a
            .checkpoint
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let ck = load_checkpoint(p)?;
                let fold = ck.meta.get("fold").and_then(|v| v.as_u64()).map_or(i, |f| f as usize);
                Ok((fold, ck.model))
            })
            .collect::<Result<_>>()?,
    };
    let data = Dataset::load(&a.manifest)?;
    if let Some((_, m)) = models.iter().find(|(_, m)| m.spec().dim != data.manifest.dim) {
        return Err(Error::Invalid(format!(
            "checkpoint expects dim {}, manifest has dim {}",
            m.spec().dim,
            data.manifest.dim
        )));
    }
    let bags = select_bags(&data, a.ids.as_deref())?;
    for set in trainer::predict(&models, &bags)? {
        let path = a.out.join(format!("probs_fold_{}.json", set.folds[0]));
        write_json(&path, &set)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn ensemble(a: EnsembleArgs) -> Result<()> {
    let sets: Vec<PredictionSet> = a.probs.iter().map(PredictionSet::load).collect::<Result<_>>()?;
    let ens = ensemble_sets(&sets)?;
    write_json(&a.out, &ens)?;
    println!(
        "averaged folds {:?} over {} patients -> {}",
        ens.folds,
        ens.rows.len(),
        a.out.display()
    );
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let mut named = Vec::new();
    for spec in &a.probs {
        let (name, path) = match spec.split_once('=') {
            Some((n, p)) => (n.to_string(), PathBuf::from(p)),
            None => {
                let p = PathBuf::from(spec);
                let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("model").to_string();
                (stem, p)
            }
        };
        let set = PredictionSet::load(&path)?;
        let report = MetricsReport::evaluate(&set.probs(), &set.labels()?)?;
        named.push((name, report));
    }
    let rows: Vec<ModelRow> = named.iter().map(|(model, report)| ModelRow { model, report }).collect();
    let tables = format_summary_table(&rows) + "\n" + &format_per_class_table(&rows);
    print!("{tables}");
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, report) in &named {
            report.save(dir.join(format!("{name}.metrics.json")))?;
        }
        let path = dir.join("tables.txt");
        fs::write(&path, tables).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn export_attn(a: ExportAttnArgs) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?.model;
    let data = Dataset::load(&a.manifest)?;
    let bag = data
        .bag(&a.id)
        .ok_or_else(|| Error::Invalid(format!("patient `{}` is not in the manifest", a.id)))?;
    let fwd = model.forward(bag)?;
    let files = export_attention_map(bag, &fwd, &a.out, a.pixels)?;
    for p in files.images.iter().chain(&files.csvs) {
        println!("{}", p.display());
    }
    Ok(())
}

/// Exit 1 (not an error) when the merged manifest fails validation.
fn validate(a: ValidateArgs) -> Result<i32> {
    let target = if a.merge.is_empty() {
        a.manifest.clone()
    } else {
        let out = a.out.clone().unwrap_or_else(|| a.manifest.clone());
        let out_dir = out.parent().unwrap_or(Path::new(".")).to_path_buf();
        let mut manifest: Option<DatasetManifest> = if a.manifest.exists() {
            Some(DatasetManifest::load(&a.manifest)?)
        } else {
            None
        };
        for path in &a.merge {
            let frag = ManifestFragment::load(path)?;
            for e in &frag.errors {
                eprintln!(
                    "warning: {}: featurizer skipped `{}`: {}",
                    path.display(),
                    e.id,
                    e.message
                );
            }
            let m = manifest.get_or_insert_with(|| DatasetManifest::new(frag.rows, frag.cols, frag.dim));
            let frag_dir = path.parent().unwrap_or(Path::new("."));
            m.merge_fragment(&frag, &absolute(frag_dir)?, &absolute(&out_dir)?)?;
        }
        manifest.expect("at least one fragment").save(&out)?;
        out
    };
    let report = validate_manifest(&target);
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(if report.ok { EXIT_OK } else { EXIT_FAILURE })
}

fn absolute(p: &Path) -> Result<PathBuf> {
    let p = if p.as_os_str().is_empty() { Path::new(".") } else { p };
    std::path::absolute(p).map_err(|e| Error::io(p, e))
}
