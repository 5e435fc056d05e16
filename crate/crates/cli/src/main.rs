use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use coresetkit::diversity;
use coresetkit::dq::{self, BinPartition, DEFAULT_BINS};
use coresetkit::embeddings::{read_embeddings, EmbeddingMatrix};
use coresetkit::harness::{
    self, Domain, Evaluation, ExperimentManifest, Hyperparameters, RunOptions, RunStatus,
    SweepOptions, TrainerSpec, TransferPreset,
};
use coresetkit::listing::{self, BinsFile, CoresetFile, SelectionMethod};
use coresetkit::metrics;
use coresetkit::mock_trainer::{self, MockMode, TrainArgs};
use coresetkit::patching::{self, PatchOptions, DEFAULT_STRIDE, DEFAULT_WINDOW};
use coresetkit::replay::{self, ReplaySource};

#[derive(Parser)]
#[command(name = "coresetkit", version, about = "Coreset selection and transfer experiments for cell segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Cut images and masks into overlapping square patches.
    Patch(PatchArgs),
    /// Partition embeddings into bins and sample a coreset.
    Quantize(QuantizeArgs),
    /// Mix replayed source patches into a target training listing.
    ComposeReplay(ReplayArgs),
    /// Score predicted label masks against ground truth.
    Evaluate(EvaluateArgs),
    /// Coverage statistics and a 2-D projection for a selection.
    AnalyzeDiversity(DiversityArgs),
    /// Write a multi-stage transfer manifest.
    PlanTransfer(PlanTransferArgs),
    /// Write one coreset and one manifest per sampling rate.
    PlanSweep(PlanSweepArgs),
    /// Execute a manifest with an external trainer.
    Run(RunArgs),
    /// Minimal trainer implementing the harness contract, for testing.
    MockTrainer(MockArgs),
}

#[derive(Args)]
struct PatchArgs {
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    masks: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    window: usize,
    #[arg(long, default_value_t = DEFAULT_STRIDE)]
    stride: usize,
    /// Store image patches as single-channel.
    #[arg(long)]
    grayscale: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Dq,
    Random,
}

#[derive(Args)]
struct QuantizeArgs {
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    bins: usize,
    #[arg(long)]
    rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "dq")]
    method: Method,
    /// Reuse the bins of an earlier coreset (or bins) file instead of
    /// recomputing them.
    #[arg(long, conflicts_with = "bins")]
    bins_from: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReplayArgs {
    /// Coreset of the source domain; omit for target-only training.
    #[arg(long)]
    source: Option<PathBuf>,
    /// Replay every patch of this source listing instead of a coreset.
    #[arg(long, conflicts_with = "source")]
    source_full: Option<PathBuf>,
    /// Target-domain listing (patch ledger, coreset or mix).
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    pred: PathBuf,
    /// `.csv` for a table, anything else for JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DiversityArgs {
    #[arg(long)]
    embeddings: PathBuf,
    /// Coreset file; its bins are used for occupancy.
    #[arg(long)]
    selection: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// CSV of projected coordinates: id,x,y,selected,bin.
    #[arg(long)]
    plot: Option<PathBuf>,
}

#[derive(Args)]
struct TrainerArgs {
    /// Trainer program (with fixed arguments); the standard argument tail is
    /// appended.
    #[arg(long, required_unless_present_all = ["train_template", "predict_template"])]
    trainer_cmd: Option<String>,
    #[arg(long, requires = "predict_template")]
    train_template: Option<String>,
    #[arg(long, requires = "train_template")]
    predict_template: Option<String>,
}

impl TrainerArgs {
    fn spec(&self) -> Option<TrainerSpec> {
        match (&self.train_template, &self.predict_template, &self.trainer_cmd) {
            (Some(train), Some(predict), _) => Some(TrainerSpec {
                train: train.clone(),
                predict: predict.clone(),
            }),
            (_, _, Some(prefix)) => Some(TrainerSpec::from_prefix(prefix)),
            _ => None,
        }
    }
}

#[derive(Args)]
struct PlanTransferArgs {
    /// One of the preset orderings A, B or C.
    #[arg(long, required_unless_present = "stage", conflicts_with = "stage")]
    preset: Option<TransferPreset>,
    /// Explicit stage, DOMAIN=SUBSET, in training order.
    #[arg(long, value_parser = parse_pair)]
    stage: Vec<(String, PathBuf)>,
    /// Training subset for a preset, DOMAIN=SUBSET.
    #[arg(long, value_parser = parse_pair)]
    subset: Vec<(String, PathBuf)>,
    #[arg(long)]
    zero_shot: Vec<String>,
    /// DOMAIN=DIR; required for all three domains.
    #[arg(long, value_parser = parse_pair)]
    test_set: Vec<(String, PathBuf)>,
    #[arg(long)]
    name: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    trainer: TrainerArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PlanSweepArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    rates: Vec<f64>,
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    bins: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "Cyto")]
    domain: String,
    /// DOMAIN=DIR, repeatable.
    #[arg(long, value_parser = parse_pair, required = true)]
    test_set: Vec<(String, PathBuf)>,
    #[command(flatten)]
    trainer: TrainerArgs,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Override the manifest's trainer with this program.
    #[arg(long)]
    trainer_cmd: Option<String>,
    #[arg(long, env = harness::WORKDIR_ENV, default_value = harness::DEFAULT_WORKDIR)]
    workdir: PathBuf,
}

#[derive(Args)]
struct MockArgs {
    #[arg(long, value_enum, default_value = "identity")]
    mode: MockModeArg,
    #[arg(long)]
    predict: bool,
    #[arg(long, required_unless_present = "predict")]
    subset: Option<PathBuf>,
    #[arg(long, default_value = "none")]
    init_model: String,
    #[arg(long, required_unless_present = "predict")]
    out_model: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 0.0)]
    wd: f64,
    #[arg(long, default_value_t = 1)]
    epochs: u32,
    #[arg(long, default_value_t = 0)]
    chan: u32,
    #[arg(long, default_value_t = 0)]
    save_every: u32,
    #[arg(long)]
    stage: Option<usize>,
    /// Exit with status 1 when training this stage.
    #[arg(long)]
    fail_at_stage: Option<usize>,
    #[arg(long, required_if_eq("predict", "true"))]
    model: Option<PathBuf>,
    #[arg(long, required_if_eq("predict", "true"))]
    images: Option<PathBuf>,
    #[arg(long, required_if_eq("predict", "true"))]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MockModeArg {
    Identity,
    Empty,
    Dilate,
}

impl From<MockModeArg> for MockMode {
    fn from(m: MockModeArg) -> Self {
        match m {
            MockModeArg::Identity => MockMode::Identity,
            MockModeArg::Empty => MockMode::Empty,
            MockModeArg::Dilate => MockMode::Dilate,
        }
    }
}

fn parse_pair(s: &str) -> Result<(String, PathBuf), String> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| format!("expected KEY=PATH, got `{s}`"))?;
    Ok((k.to_string(), PathBuf::from(v)))
}

fn domain_map(pairs: &[(String, PathBuf)]) -> Result<BTreeMap<Domain, PathBuf>> {
    let mut out = BTreeMap::new();
    for (k, v) in pairs {
        if out.insert(k.parse::<Domain>()?, v.clone()).is_some() {
            bail!("domain {k} given twice");
        }
    }
    Ok(out)
}

fn index_of(ids: &[String]) -> HashMap<&str, usize> {
    ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect()
}

fn bins_from_file(path: &Path, m: &EmbeddingMatrix) -> Result<BinPartition> {
    let file: BinsFile = listing::read_json(path)?;
    let index = index_of(m.ids());
    let bins = file
        .bins
        .iter()
        .map(|b| {
            b.iter()
                .map(|id| {
                    index
                        .get(id.as_str())
                        .copied()
                        .ok_or_else(|| anyhow!("{}: patch `{id}` is not in the embeddings", path.display()))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let p = BinPartition {
        bins,
        source_n: m.n(),
    };
    p.validate()?;
    Ok(p)
}

fn patch(a: PatchArgs) -> Result<()> {
    let opts = PatchOptions {
        window: a.window,
        stride: a.stride,
        grayscale: a.grayscale,
    };
    let ledger = patching::patch_directory(&a.images, &a.masks, &a.out, &opts)?;
    eprintln!("{} patches written to {}", ledger.patches.len(), a.out.display());
    Ok(())
}

fn quantize(a: QuantizeArgs) -> Result<()> {
    let m = read_embeddings(&a.embeddings)?;
    let file = match a.method {
        Method::Dq => {
            let partition = match &a.bins_from {
                Some(p) => bins_from_file(p, &m)?,
                None => dq::form_bins(&m, a.bins)?,
            };
            let sel = dq::sample_coreset(&partition, a.rate, a.seed)?;
            CoresetFile::new(SelectionMethod::Dq, &sel, &partition, m.ids())
        }
        Method::Random => {
            let sel = dq::random_baseline(m.n(), a.rate, a.seed)?;
            let whole = BinPartition {
                bins: vec![(0..m.n()).collect()],
                source_n: m.n(),
            };
            CoresetFile::new(SelectionMethod::Random, &sel, &whole, m.ids())
        }
    };
    file.write(&a.out)?;
    eprintln!("selected {} of {} patches", file.selection.len(), m.n());
    Ok(())
}

fn compose_replay(a: ReplayArgs) -> Result<()> {
    let source = match (&a.source, &a.source_full) {
        (Some(p), _) => ReplaySource::Coreset(CoresetFile::read(p)?),
        (_, Some(p)) => ReplaySource::Full(listing::read_subset_patches(p)?),
        _ => ReplaySource::None,
    };
    let target = listing::read_subset_patches(&a.target)?;
    let mix = replay::compose_replay(&source, &target)?;
    listing::write_json(&mix, &a.out)?;
    eprintln!(
        "{} source + {} target patches",
        mix.source_count, mix.target_count
    );
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let report = metrics::evaluate_dirs(&a.gt, &a.pred)?;
    let is_csv = a
        .out
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv {
        listing::write_atomic(&a.out, report.to_csv().as_bytes())?;
    } else {
        listing::write_json(&report, &a.out)?;
    }
    Ok(())
}

fn analyze_diversity(a: DiversityArgs) -> Result<()> {
    let m = read_embeddings(&a.embeddings)?;
    let coreset = CoresetFile::read(&a.selection)?;
    let (partition, sel) = coreset.resolve(m.ids())?;
    let stats = diversity::coverage(&m, &sel, &partition)?;
    let projection = diversity::project_2d(&m)?;
    let out = serde_json::json!({
        "method": coreset.method,
        "rate": coreset.rate,
        "seed": coreset.seed,
        "n": m.n(),
        "coverage": stats,
        "projection": {
            "variance": projection.variance,
            "degenerate": projection.degenerate,
        },
    });
    listing::write_json(&out, &a.out)?;
    if let Some(plot) = &a.plot {
        let mut bin_of = vec![0usize; m.n()];
        for (b, members) in partition.bins.iter().enumerate() {
            for &i in members {
                bin_of[i] = b;
            }
        }
        let mut selected = vec![false; m.n()];
        for &i in &sel.selected {
            selected[i] = true;
        }
        let mut csv = String::from("id,x,y,selected,bin\n");
        for (i, [x, y]) in projection.coords.iter().enumerate() {
            writeln!(csv, "{},{x},{y},{},{}", m.ids()[i], u8::from(selected[i]), bin_of[i])?;
        }
        listing::write_atomic(plot, csv.as_bytes())?;
    }
    Ok(())
}

fn plan_transfer(a: PlanTransferArgs) -> Result<()> {
    let trainer = a.trainer.spec().context("no trainer given")?;
    let test_sets = domain_map(&a.test_set)?;
    let manifest = match a.preset {
        Some(preset) => {
            let subsets = domain_map(&a.subset)?;
            let mut m = harness::plan_preset(preset, &subsets, &test_sets, trainer, a.seed)?;
            if let Some(name) = a.name {
                m.name = name;
            }
            m.zero_shot = a
                .zero_shot
                .iter()
                .map(|d| d.parse::<Domain>().map(|d| d.to_string()))
                .collect::<Result<_, _>>()?;
            m.validate()?;
            m
        }
        None => {
            let name = a.name.unwrap_or_else(|| {
                a.stage.iter().map(|(d, _)| d.to_lowercase()).collect::<Vec<_>>().join("-")
            });
            harness::plan_transfer_path(&name, &a.stage, &a.zero_shot, &test_sets, trainer, a.seed)?
        }
    };
    manifest.write(&a.out)?;
    Ok(())
}

fn plan_sweep(a: PlanSweepArgs) -> Result<()> {
    let trainer = a.trainer.spec().context("no trainer given")?;
    let domain = a.domain.parse::<Domain>()?.to_string();
    let m = read_embeddings(&a.embeddings)?;
    let evaluations = domain_map(&a.test_set)?
        .into_iter()
        .map(|(d, t)| Evaluation {
            domain: d.to_string(),
            test_set: t,
        })
        .collect::<Vec<_>>();
    if !evaluations.iter().any(|e| e.domain == domain) {
        bail!("no test set given for the training domain {domain}");
    }
    let opts = SweepOptions {
        domain,
        subset_dir: a.out_dir.join("subsets"),
        evaluations,
        trainer,
        hyperparameters: Hyperparameters::default(),
    };
    let plans = harness::plan_rate_sweep(&a.rates, &m, a.bins, a.seed, &opts)?;
    std::fs::create_dir_all(&opts.subset_dir)
        .with_context(|| format!("creating {}", opts.subset_dir.display()))?;
    for plan in &plans {
        plan.coreset.write(&plan.coreset_path)?;
        plan.manifest
            .write(a.out_dir.join(format!("{}.json", plan.manifest.name)))?;
    }
    eprintln!("{} manifests written to {}", plans.len(), a.out_dir.display());
    Ok(())
}

fn run(a: RunArgs) -> Result<ExitCode> {
    let manifest = ExperimentManifest::read(&a.manifest)?;
    let manifest_dir = a.manifest.parent().unwrap_or(Path::new("."));
    let opts = RunOptions {
        workdir: a.workdir,
        trainer: a.trainer_cmd.as_deref().map(TrainerSpec::from_prefix),
    };
    let record = harness::run(&manifest, manifest_dir, &opts)?;
    match record.status {
        RunStatus::Completed => {
            for e in &record.evaluations {
                let agg = &e.report.aggregate;
                eprintln!("{}: iou {:.4} pq {:.4}", e.domain, agg.iou.mean, agg.pq.mean);
            }
            Ok(ExitCode::SUCCESS)
        }
        RunStatus::Failed => {
            let stage = record.failed_stage.unwrap_or(0);
            let why = record.stages.last().and_then(|s| s.error.clone()).unwrap_or_default();
            eprintln!("stage {stage} failed: {why}");
            Ok(ExitCode::from(2))
        }
    }
}

fn mock_trainer(a: MockArgs) -> Result<()> {
    if a.predict {
        let (model, images, out) = (a.model.unwrap(), a.images.unwrap(), a.out.unwrap());
        mock_trainer::predict(&model, &images, &out)?;
        return Ok(());
    }
    if a.stage.is_some() && a.stage == a.fail_at_stage {
        bail!("failing at stage {} as requested", a.stage.unwrap());
    }
    mock_trainer::train(&TrainArgs {
        mode: a.mode.into(),
        subset: a.subset.unwrap(),
        init_model: (a.init_model != "none").then(|| PathBuf::from(a.init_model)),
        out_model: a.out_model.unwrap(),
        learning_rate: a.lr,
        epochs: a.epochs,
    })?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::Patch(a) => patch(a).map(|_| ExitCode::SUCCESS),
        Cmd::Quantize(a) => quantize(a).map(|_| ExitCode::SUCCESS),
        Cmd::ComposeReplay(a) => compose_replay(a).map(|_| ExitCode::SUCCESS),
        Cmd::Evaluate(a) => evaluate(a).map(|_| ExitCode::SUCCESS),
        Cmd::AnalyzeDiversity(a) => analyze_diversity(a).map(|_| ExitCode::SUCCESS),
        Cmd::PlanTransfer(a) => plan_transfer(a).map(|_| ExitCode::SUCCESS),
        Cmd::PlanSweep(a) => plan_sweep(a).map(|_| ExitCode::SUCCESS),
        Cmd::Run(a) => run(a),
        Cmd::MockTrainer(a) => mock_trainer(a).map(|_| ExitCode::SUCCESS),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        ExitCode::FAILURE
    })
}
