//! Experiment planning and execution.
//!
//! A manifest lists training stages (domain, subset listing, hyperparameters)
//! and the test sets to score afterwards. [`run`] executes the stages in
//! order through an external trainer command, asks the trainer for
//! predictions on every test set, scores them and persists a [`RunRecord`].
//!
//! Trainer contract. Commands are templates split shell-style into argv
//! (no shell is involved), with placeholders substituted per token:
//!
//! - training: `{subset}`, `{init_model}` (`none` for the first stage),
//!   `{out_model}`, `{lr}`, `{wd}`, `{epochs}`, `{chan}`, `{save_every}`,
//!   `{domain}`, `{stage}` (1-based), `{seed}`
//! - prediction: `{model}`, `{images}`, `{pred_dir}`, `{domain}`
//!
//! The trainer must write the model to `{out_model}` and, when predicting,
//! one label mask per image of `{images}` into `{pred_dir}`, named by the
//! image's file stem. A test set is a directory with `images/` and `masks/`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Component, Path, PathBuf};
use std::process::{Command, Stdio};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dq::{self, BinPartition};
use crate::embeddings::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::listing::{self, CoresetFile, SelectionMethod};
use crate::metrics::{self, MetricsReport};

pub const SCHEMA_VERSION: u32 = 1;
pub const WORKDIR_ENV: &str = "CORESETKIT_WORKDIR";
pub const DEFAULT_WORKDIR: &str = "coresetkit-runs";

/// Output root: `$CORESETKIT_WORKDIR` when set, else `./coresetkit-runs`.
pub fn default_workdir() -> PathBuf {
    std::env::var_os(WORKDIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_WORKDIR))
}

/// The three datasets the transfer experiments move between.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Domain {
    Cyto,
    Histo,
    MultiInst,
}

impl Domain {
    pub const ALL: [Domain; 3] = [Domain::Cyto, Domain::Histo, Domain::MultiInst];

    pub fn name(self) -> &'static str {
        match self {
            Domain::Cyto => "Cyto",
            Domain::Histo => "Histo",
            Domain::MultiInst => "MultiInst",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Domain::ALL
            .into_iter()
            .find(|d| d.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownDomain(s.to_string()))
    }
}

/// The three multi-stage orderings run as presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransferPreset {
    /// Cyto -> Histo -> MultiInst
    PathA,
    /// Cyto -> MultiInst -> Histo
    PathB,
    /// MultiInst -> Cyto -> Histo
    PathC,
}

impl TransferPreset {
    pub fn domains(self) -> [Domain; 3] {
        use Domain::*;
        match self {
            TransferPreset::PathA => [Cyto, Histo, MultiInst],
            TransferPreset::PathB => [Cyto, MultiInst, Histo],
            TransferPreset::PathC => [MultiInst, Cyto, Histo],
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            TransferPreset::PathA => "path-a",
            TransferPreset::PathB => "path-b",
            TransferPreset::PathC => "path-c",
        }
    }
}

impl FromStr for TransferPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().trim_start_matches("PATH").trim_matches(['-', '_', ' ']) {
            "A" => Ok(TransferPreset::PathA),
            "B" => Ok(TransferPreset::PathB),
            "C" => Ok(TransferPreset::PathC),
            _ => Err(Error::InvalidArgument(format!("unknown transfer path `{s}` (A, B or C)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelMode {
    Grayscale,
}

impl ChannelMode {
    /// Channel index handed to the trainer (0 = grayscale).
    pub fn chan(self) -> u32 {
        match self {
            ChannelMode::Grayscale => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub channel_mode: ChannelMode,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: u32,
    pub checkpoint_interval: u32,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Hyperparameters {
            channel_mode: ChannelMode::Grayscale,
            learning_rate: 0.1,
            weight_decay: 1e-4,
            epochs: 500,
            checkpoint_interval: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    Scratch,
    PreviousStage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingStage {
    pub domain: String,
    /// Subset listing, relative to the manifest file.
    pub subset: PathBuf,
    pub hyperparameters: Hyperparameters,
    pub init: Init,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub domain: String,
    /// Test-set directory (`images/`, `masks/`), relative to the manifest.
    pub test_set: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerSpec {
    pub train: String,
    pub predict: String,
}

impl TrainerSpec {
    /// Standard invocation forms for a trainer program (plus any fixed
    /// arguments) given as `prefix`.
    pub fn from_prefix(prefix: &str) -> Self {
        TrainerSpec {
            train: format!(
                "{prefix} --subset {{subset}} --init-model {{init_model}} --out-model {{out_model}} \
                 --lr {{lr}} --wd {{wd}} --epochs {{epochs}} --chan {{chan}} --save-every {{save_every}}"
            ),
            predict: format!(
                "{prefix} --predict --model {{model}} --images {{images}} --out {{pred_dir}}"
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub schema_version: u32,
    pub name: String,
    pub seed: u64,
    pub stages: Vec<TrainingStage>,
    pub evaluations: Vec<Evaluation>,
    /// Domains evaluated without ever being trained on.
    #[serde(default)]
    pub zero_shot: Vec<String>,
    pub trainer: TrainerSpec,
}

impl ExperimentManifest {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("manifest `{}`: {m}", self.name)));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!("unsupported schema_version {}", self.schema_version));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return bad("name must be non-empty and contain no path separators".into());
        }
        if self.stages.is_empty() {
            return bad("no training stages".into());
        }
        for (k, stage) in self.stages.iter().enumerate() {
            let expected = if k == 0 { Init::Scratch } else { Init::PreviousStage };
            if stage.init != expected {
                return bad(format!("stage {} must initialise from {expected:?}", k + 1));
            }
        }
        let evaluated: Vec<&str> = self.evaluations.iter().map(|e| e.domain.as_str()).collect();
        let required = self
            .stages
            .iter()
            .map(|s| s.domain.as_str())
            .chain(self.zero_shot.iter().map(String::as_str));
        for domain in required {
            if !evaluated.contains(&domain) {
                return bad(format!("domain `{domain}` has no evaluation"));
            }
        }
        Ok(())
    }

    /// Read and validate; relative paths come back resolved against the
    /// manifest's directory.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut m: ExperimentManifest = listing::read_json(path)?;
        m.validate()?;
        let base = absolute(path.parent().unwrap_or(Path::new("")))?;
        for stage in &mut m.stages {
            stage.subset = normalize(&base.join(&stage.subset));
        }
        for eval in &mut m.evaluations {
            eval.test_set = normalize(&base.join(&eval.test_set));
        }
        Ok(m)
    }

    /// Write with every path made relative to the manifest's directory.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let base = absolute(path.parent().unwrap_or(Path::new("")))?;
        let mut out = self.clone();
        for stage in &mut out.stages {
            stage.subset = relative_to(&stage.subset, &base)?;
        }
        for eval in &mut out.evaluations {
            eval.test_set = relative_to(&eval.test_set, &base)?;
        }
        listing::write_json(&out, path)
    }
}

fn absolute(p: &Path) -> Result<PathBuf> {
    std::path::absolute(if p.as_os_str().is_empty() { Path::new(".") } else { p })
        .map_err(|e| Error::io(p, e))
}

/// Drop `.` and fold `..` without touching the filesystem.
fn normalize(p: &Path) -> PathBuf {
    let mut out = PathBuf::new();
    for c in p.components() {
        match c {
            Component::CurDir => {}
            Component::ParentDir if matches!(out.components().next_back(), Some(Component::Normal(_))) => {
                out.pop();
            }
            other => out.push(other),
        }
    }
    out
}

fn relative_to(p: &Path, base: &Path) -> Result<PathBuf> {
    let abs = normalize(&absolute(p)?);
    Ok(pathdiff::diff_paths(&abs, base).unwrap_or(abs))
}

/// Default manifest name for a DQ subset at `rate`, e.g. `dq-Cyto-30`.
pub fn percent_label(rate: f64) -> String {
    let pct = (rate * 100.0 * 1e4).round() / 1e4;
    format!("{pct}")
}

#[derive(Debug, Clone)]
pub struct SweepOptions {
    pub domain: String,
    /// Where coreset files are written; manifests reference them here.
    pub subset_dir: PathBuf,
    pub evaluations: Vec<Evaluation>,
    pub trainer: TrainerSpec,
    pub hyperparameters: Hyperparameters,
}

#[derive(Debug, Clone)]
pub struct PlannedRun {
    pub coreset: CoresetFile,
    pub coreset_path: PathBuf,
    pub manifest: ExperimentManifest,
}

/// One single-stage manifest per rate, each training on the DQ coreset at
/// that rate. Bins are formed once and shared.
pub fn plan_rate_sweep(
    rates: &[f64],
    m: &EmbeddingMatrix,
    n_bins: usize,
    seed: u64,
    opts: &SweepOptions,
) -> Result<Vec<PlannedRun>> {
    if rates.is_empty() {
        return Err(Error::InvalidArgument("no rates to sweep".into()));
    }
    for (i, &r) in rates.iter().enumerate() {
        if !(r > 0.0 && r <= 1.0) {
            return Err(Error::InvalidArgument(format!("rate {r} is outside (0, 1]")));
        }
        if rates[..i].contains(&r) {
            return Err(Error::InvalidArgument(format!("rate {r} listed twice")));
        }
    }
    let partition: BinPartition = dq::form_bins(m, n_bins)?;
    rates
        .iter()
        .map(|&rate| {
            let sel = dq::sample_coreset(&partition, rate, seed)?;
            let coreset = CoresetFile::new(SelectionMethod::Dq, &sel, &partition, m.ids());
            let label = percent_label(rate);
            let coreset_path = opts.subset_dir.join(format!("coreset-{label}.json"));
            let manifest = ExperimentManifest {
                schema_version: SCHEMA_VERSION,
                name: format!("dq-{}-{label}", opts.domain),
                seed,
                stages: vec![TrainingStage {
                    domain: opts.domain.clone(),
                    subset: coreset_path.clone(),
                    hyperparameters: opts.hyperparameters,
                    init: Init::Scratch,
                }],
                evaluations: opts.evaluations.clone(),
                zero_shot: opts
                    .evaluations
                    .iter()
                    .map(|e| e.domain.clone())
                    .filter(|d| *d != opts.domain)
                    .collect(),
                trainer: opts.trainer.clone(),
            };
            manifest.validate()?;
            Ok(PlannedRun {
                coreset,
                coreset_path,
                manifest,
            })
        })
        .collect()
}

/// Sequential transfer through `path`; every run is evaluated on all three
/// domains, so `test_sets` must provide each of them.
pub fn plan_transfer_path(
    name: &str,
    path: &[(String, PathBuf)],
    zero_shot: &[String],
    test_sets: &BTreeMap<Domain, PathBuf>,
    trainer: TrainerSpec,
    seed: u64,
) -> Result<ExperimentManifest> {
    if path.is_empty() {
        return Err(Error::InvalidArgument("transfer path has no stages".into()));
    }
    let stages = path
        .iter()
        .enumerate()
        .map(|(k, (domain, subset))| {
            let domain: Domain = domain.parse()?;
            Ok(TrainingStage {
                domain: domain.to_string(),
                subset: subset.clone(),
                hyperparameters: Hyperparameters::default(),
                init: if k == 0 { Init::Scratch } else { Init::PreviousStage },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let zero_shot = zero_shot
        .iter()
        .map(|d| d.parse::<Domain>().map(|d| d.to_string()))
        .collect::<Result<Vec<_>>>()?;
    let evaluations = Domain::ALL
        .iter()
        .map(|d| {
            test_sets
                .get(d)
                .map(|t| Evaluation {
                    domain: d.to_string(),
                    test_set: t.clone(),
                })
                .ok_or_else(|| Error::InvalidArgument(format!("no test set given for {d}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = ExperimentManifest {
        schema_version: SCHEMA_VERSION,
        name: name.to_string(),
        seed,
        stages,
        evaluations,
        zero_shot,
        trainer,
    };
    manifest.validate()?;
    Ok(manifest)
}

/// A preset path where each domain trains on the subset listed for it.
pub fn plan_preset(
    preset: TransferPreset,
    subsets: &BTreeMap<Domain, PathBuf>,
    test_sets: &BTreeMap<Domain, PathBuf>,
    trainer: TrainerSpec,
    seed: u64,
) -> Result<ExperimentManifest> {
    let path = preset
        .domains()
        .iter()
        .map(|d| {
            subsets
                .get(d)
                .map(|s| (d.to_string(), s.clone()))
                .ok_or_else(|| Error::InvalidArgument(format!("no training subset given for {d}")))
        })
        .collect::<Result<Vec<_>>>()?;
    plan_transfer_path(preset.label(), &path, &[], test_sets, trainer, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    pub domain: String,
    pub exit_code: Option<i32>,
    pub model: Option<PathBuf>,
    pub error: Option<String>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub domain: String,
    pub report_json: PathBuf,
    pub report_csv: PathBuf,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub manifest: String,
    pub status: RunStatus,
    /// 1-based index of the first failing stage.
    pub failed_stage: Option<usize>,
    pub stages: Vec<StageRecord>,
    pub evaluations: Vec<EvaluationRecord>,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub workdir: PathBuf,
    /// Replaces the manifest's trainer commands.
    pub trainer: Option<TrainerSpec>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            workdir: default_workdir(),
            trainer: None,
        }
    }
}

fn substitute(template: &str, vars: &[(&str, String)]) -> Result<Vec<String>> {
    let tokens = shlex::split(template)
        .filter(|t| !t.is_empty())
        .ok_or_else(|| Error::Trainer(format!("cannot parse command template `{template}`")))?;
    Ok(tokens
        .into_iter()
        .map(|mut tok| {
            for (key, value) in vars {
                tok = tok.replace(&format!("{{{key}}}"), value);
            }
            tok
        })
        .collect())
}

/// Run argv with output appended to `log`. Returns the exit code, `None`
/// when killed by a signal.
fn invoke(argv: &[String], log: &Path) -> Result<Option<i32>> {
    let file = fs::File::create(log).map_err(|e| Error::io(log, e))?;
    let err_file = file.try_clone().map_err(|e| Error::io(log, e))?;
    let status = Command::new(&argv[0])
        .args(&argv[1..])
        .stdin(Stdio::null())
        .stdout(file)
        .stderr(err_file)
        .status()
        .map_err(|e| Error::Trainer(format!("cannot start `{}`: {e}", argv[0])))?;
    Ok(status.code())
}

fn path_str(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Execute `manifest` (read from `manifest_dir`, against which its relative
/// paths resolve). Outputs go to `<workdir>/<manifest name>/`.
///
/// A failing stage stops the run; the returned record is then marked
/// failed. Evaluation problems (missing predictions, shape mismatches) are
/// errors.
pub fn run(manifest: &ExperimentManifest, manifest_dir: &Path, opts: &RunOptions) -> Result<RunRecord> {
    manifest.validate()?;
    let trainer = opts.trainer.as_ref().unwrap_or(&manifest.trainer);
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { manifest_dir.join(p) };
    for stage in &manifest.stages {
        let subset = resolve(&stage.subset);
        if !subset.is_file() {
            return Err(Error::InvalidArgument(format!(
                "subset listing {} does not exist",
                subset.display()
            )));
        }
    }

    let run_dir = absolute(&opts.workdir.join(&manifest.name))?;
    create_dir(&run_dir)?;
    let started = Instant::now();
    let mut stages = Vec::with_capacity(manifest.stages.len());
    let mut previous_model: Option<PathBuf> = None;
    let mut failed_stage = None;

    for (k, stage) in manifest.stages.iter().enumerate() {
        let number = k + 1;
        let stage_dir = run_dir.join(format!("stage-{number}-{}", stage.domain));
        create_dir(&stage_dir)?;
        let out_model = stage_dir.join("model");
        let hp = &stage.hyperparameters;
        let vars = [
            ("subset", path_str(&absolute(&resolve(&stage.subset))?)),
            (
                "init_model",
                previous_model.as_deref().map_or_else(|| "none".to_string(), path_str),
            ),
            ("out_model", path_str(&out_model)),
            ("lr", hp.learning_rate.to_string()),
            ("wd", hp.weight_decay.to_string()),
            ("epochs", hp.epochs.to_string()),
            ("chan", hp.channel_mode.chan().to_string()),
            ("save_every", hp.checkpoint_interval.to_string()),
            ("domain", stage.domain.clone()),
            ("stage", number.to_string()),
            ("seed", manifest.seed.to_string()),
        ];
        let argv = substitute(&trainer.train, &vars)?;
        let t0 = Instant::now();
        let exit_code = invoke(&argv, &stage_dir.join("train.log"))?;
        let mut record = StageRecord {
            stage: number,
            domain: stage.domain.clone(),
            exit_code,
            model: None,
            error: None,
            seconds: 0.0,
        };
        if exit_code != Some(0) {
            record.error = Some(match exit_code {
                Some(c) => format!("trainer exited with status {c}"),
                None => "trainer terminated by a signal".to_string(),
            });
        } else if !out_model.exists() {
            record.error = Some(format!("trainer wrote no model at {}", out_model.display()));
        } else {
            record.model = Some(out_model.clone());
            previous_model = Some(out_model);
        }
        record.seconds = t0.elapsed().as_secs_f64();
        let failed = record.error.is_some();
        stages.push(record);
        if failed {
            failed_stage = Some(number);
            break;
        }
    }

    let mut evaluations = Vec::new();
    if failed_stage.is_none() {
        let model = previous_model.expect("at least one stage completed");
        let reports_dir = run_dir.join("reports");
        create_dir(&reports_dir)?;
        for eval in &manifest.evaluations {
            let test_set = absolute(&resolve(&eval.test_set))?;
            let pred_dir = run_dir.join("predictions").join(&eval.domain);
            if pred_dir.exists() {
                fs::remove_dir_all(&pred_dir).map_err(|e| Error::io(&pred_dir, e))?;
            }
            create_dir(&pred_dir)?;
            let vars = [
                ("model", path_str(&model)),
                ("images", path_str(&test_set.join("images"))),
                ("pred_dir", path_str(&pred_dir)),
                ("domain", eval.domain.clone()),
            ];
            let argv = substitute(&trainer.predict, &vars)?;
            let log = run_dir.join(format!("predict-{}.log", eval.domain));
            match invoke(&argv, &log)? {
                Some(0) => {}
                code => {
                    return Err(Error::Trainer(format!(
                        "prediction for {} failed with {code:?}; see {}",
                        eval.domain,
                        log.display()
                    )))
                }
            }
            let report = metrics::evaluate_dirs(&test_set.join("masks"), &pred_dir)?;
            let report_json = reports_dir.join(format!("{}.json", eval.domain));
            let report_csv = reports_dir.join(format!("{}.csv", eval.domain));
            listing::write_json(&report, &report_json)?;
            listing::write_atomic(&report_csv, report.to_csv().as_bytes())?;
            evaluations.push(EvaluationRecord {
                domain: eval.domain.clone(),
                report_json,
                report_csv,
                report,
            });
        }
    }

    let record = RunRecord {
        manifest: manifest.name.clone(),
        status: if failed_stage.is_some() { RunStatus::Failed } else { RunStatus::Completed },
        failed_stage,
        stages,
        evaluations,
        seconds: started.elapsed().as_secs_f64(),
    };
    listing::write_json(&record, run_dir.join("run_record.json"))?;
    Ok(record)
}

#[cfg(all(test, unix))]
mod tests {
    use super::*;
    use crate::raster::{self, LabelMask};

    fn test_set(root: &Path, name: &str) -> PathBuf {
        let dir = root.join(name);
        create_dir(&dir.join("images")).unwrap();
        create_dir(&dir.join("masks")).unwrap();
        for i in 0..2u32 {
            let mut m = LabelMask::zeros(8, 8);
            m.set(1, 1 + i as usize, 1);
            m.set(5, 5, 2);
            raster::write_mask(&m, dir.join("masks").join(format!("im{i}"))).unwrap();
            raster::write_mask(&m, dir.join("images").join(format!("im{i}"))).unwrap();
        }
        dir
    }

    fn fixture(root: &Path) -> (BTreeMap<Domain, PathBuf>, BTreeMap<Domain, PathBuf>) {
        let mut subsets = BTreeMap::new();
        let mut tests = BTreeMap::new();
        for d in Domain::ALL {
            let subset = root.join(format!("{d}.json"));
            fs::write(&subset, format!("{{\"patches\": [\"{d}:0:0\"]}}")).unwrap();
            subsets.insert(d, subset);
            tests.insert(d, test_set(root, &format!("test-{d}")));
        }
        (subsets, tests)
    }

    // Copies ground truth as the prediction.
    fn copy_trainer() -> TrainerSpec {
        TrainerSpec {
            train: "sh -c 'echo \"$1\" > \"$0\"' {out_model} {init_model}".into(),
            predict: "sh -c 'cp \"$0\"/../masks/* \"$1\"/' {images} {pred_dir}".into(),
        }
    }

    #[test]
    fn defaults_match_training_recipe() {
        let hp = Hyperparameters::default();
        assert_eq!(hp.learning_rate, 0.1);
        assert_eq!(hp.weight_decay, 1e-4);
        assert_eq!(hp.epochs, 500);
        assert_eq!(hp.checkpoint_interval, 50);
        assert_eq!(hp.channel_mode.chan(), 0);
    }

    #[test]
    fn domain_and_preset_parsing() {
        assert_eq!("multiinst".parse::<Domain>().unwrap(), Domain::MultiInst);
        assert!(matches!("Retina".parse::<Domain>(), Err(Error::UnknownDomain(_))));
        assert_eq!("C".parse::<TransferPreset>().unwrap(), TransferPreset::PathC);
        assert_eq!("path-b".parse::<TransferPreset>().unwrap(), TransferPreset::PathB);
        assert!("D".parse::<TransferPreset>().is_err());
        assert_eq!(
            TransferPreset::PathC.domains(),
            [Domain::MultiInst, Domain::Cyto, Domain::Histo]
        );
    }

    #[test]
    fn transfer_plans() {
        let dir = tempfile::tempdir().unwrap();
        let (subsets, tests) = fixture(dir.path());
        let trainer = TrainerSpec::from_prefix("trainer");
        let zero_shot = plan_transfer_path(
            "zero-shot",
            &[("Cyto".into(), subsets[&Domain::Cyto].clone())],
            &["MultiInst".into()],
            &tests,
            trainer.clone(),
            0,
        )
        .unwrap();
        assert_eq!(zero_shot.stages.len(), 1);
        assert_eq!(zero_shot.evaluations.len(), 3);
        assert_eq!(zero_shot.zero_shot, vec!["MultiInst".to_string()]);

        let finetune = plan_transfer_path(
            "cyto-histo",
            &[
                ("Cyto".into(), subsets[&Domain::Cyto].clone()),
                ("Histo".into(), subsets[&Domain::Histo].clone()),
            ],
            &[],
            &tests,
            trainer.clone(),
            0,
        )
        .unwrap();
        assert_eq!(finetune.stages[1].init, Init::PreviousStage);

        let c = plan_preset(TransferPreset::PathC, &subsets, &tests, trainer.clone(), 0).unwrap();
        let order: Vec<&str> = c.stages.iter().map(|s| s.domain.as_str()).collect();
        assert_eq!(order, ["MultiInst", "Cyto", "Histo"]);
        assert_eq!(c.evaluations.len(), 3);

        let unknown = plan_transfer_path("x", &[("Retina".into(), PathBuf::from("r.json"))], &[], &tests, trainer.clone(), 0);
        assert!(matches!(unknown, Err(Error::UnknownDomain(_))));
        assert!(plan_transfer_path("x", &[], &[], &tests, trainer, 0).is_err());
    }

    #[test]
    fn manifest_round_trip_with_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let (subsets, tests) = fixture(dir.path());
        let m = plan_preset(TransferPreset::PathA, &subsets, &tests, TrainerSpec::from_prefix("t"), 3).unwrap();
        let path = dir.path().join("plans").join("a.json");
        create_dir(path.parent().unwrap()).unwrap();
        m.write(&path).unwrap();
        let raw: serde_json::Value = listing::read_json(&path).unwrap();
        assert_eq!(raw["stages"][0]["subset"], "../Cyto.json");
        assert_eq!(raw["evaluations"][2]["test_set"], "../test-MultiInst");
        let back = ExperimentManifest::read(&path).unwrap();
        assert_eq!(back.stages[0].subset, normalize(&absolute(&subsets[&Domain::Cyto]).unwrap()));
        back.write(&path).unwrap();
        assert_eq!(ExperimentManifest::read(&path).unwrap(), back);
        assert_eq!(listing::read_json::<serde_json::Value>(&path).unwrap(), raw);
    }

    #[test]
    fn manifest_validation() {
        let dir = tempfile::tempdir().unwrap();
        let (subsets, tests) = fixture(dir.path());
        let good = plan_preset(TransferPreset::PathB, &subsets, &tests, TrainerSpec::from_prefix("t"), 0).unwrap();
        let mut m = good.clone();
        m.stages.clear();
        assert!(m.validate().is_err());
        let mut m = good.clone();
        m.stages[1].init = Init::Scratch;
        assert!(m.validate().is_err());
        let mut m = good.clone();
        m.evaluations.retain(|e| e.domain != "Histo");
        assert!(m.validate().is_err());
        let mut m = good;
        m.name = "a/b".into();
        assert!(m.validate().is_err());
    }

    #[test]
    fn run_with_copying_trainer() {
        let dir = tempfile::tempdir().unwrap();
        let (subsets, tests) = fixture(dir.path());
        let m = plan_preset(TransferPreset::PathC, &subsets, &tests, copy_trainer(), 0).unwrap();
        let opts = RunOptions {
            workdir: dir.path().join("runs"),
            trainer: None,
        };
        let record = run(&m, dir.path(), &opts).unwrap();
        assert_eq!(record.status, RunStatus::Completed);
        assert_eq!(record.stages.len(), 3);
        // stage 2 was initialised from stage 1's model
        let model2 = fs::read_to_string(record.stages[1].model.as_ref().unwrap()).unwrap();
        assert!(model2.trim().ends_with("stage-1-MultiInst/model"));
        for e in &record.evaluations {
            for v in e.report.aggregate.values() {
                assert_eq!(v.mean, 1.0);
            }
        }
        assert!(dir.path().join("runs/path-c/run_record.json").is_file());
        assert!(dir.path().join("runs/path-c/reports/Histo.csv").is_file());
    }

    #[test]
    fn failing_stage_stops_the_run() {
        let dir = tempfile::tempdir().unwrap();
        let (subsets, tests) = fixture(dir.path());
        let calls = dir.path().join("calls");
        let trainer = TrainerSpec {
            train: format!(
                "sh -c 'echo $1 >> \"$0\"; test $1 -ne 2 && touch \"$2\"' {} {{stage}} {{out_model}}",
                calls.display()
            ),
            predict: copy_trainer().predict,
        };
        let m = plan_preset(TransferPreset::PathA, &subsets, &tests, trainer, 0).unwrap();
        let opts = RunOptions {
            workdir: dir.path().join("runs"),
            trainer: None,
        };
        let record = run(&m, dir.path(), &opts).unwrap();
        assert_eq!(record.status, RunStatus::Failed);
        assert_eq!(record.failed_stage, Some(2));
        assert_eq!(record.stages.len(), 2);
        assert_eq!(record.stages[1].exit_code, Some(1));
        assert!(record.evaluations.is_empty());
        let calls = fs::read_to_string(&calls).unwrap();
        assert_eq!(calls, "1\n2\n");
    }

    #[test]
    fn missing_predictions_are_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let (subsets, tests) = fixture(dir.path());
        let trainer = TrainerSpec {
            train: copy_trainer().train,
            predict: "true".into(),
        };
        let m = plan_preset(TransferPreset::PathA, &subsets, &tests, trainer, 0).unwrap();
        let opts = RunOptions {
            workdir: dir.path().join("runs"),
            trainer: None,
        };
        assert!(matches!(run(&m, dir.path(), &opts), Err(Error::MissingPrediction(_))));
    }

    #[test]
    fn missing_subset_detected_before_training() {
        let dir = tempfile::tempdir().unwrap();
        let (mut subsets, tests) = fixture(dir.path());
        subsets.insert(Domain::Histo, dir.path().join("nope.json"));
        let m = plan_preset(TransferPreset::PathA, &subsets, &tests, copy_trainer(), 0).unwrap();
        let opts = RunOptions {
            workdir: dir.path().join("runs"),
            trainer: None,
        };
        assert!(run(&m, dir.path(), &opts).is_err());
        assert!(!dir.path().join("runs").exists());
    }

    #[test]
    fn rate_sweep_plans() {
        let ids: Vec<String> = (0..50).map(|i| format!("c:{i}:0")).collect();
        let data = (0..50 * 2).map(|v| (v % 17) as f32 * 0.37).collect();
        let m = EmbeddingMatrix::new(2, data, ids).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let tests = test_set(dir.path(), "t");
        let opts = SweepOptions {
            domain: "Cyto".into(),
            subset_dir: dir.path().join("subsets"),
            evaluations: vec![
                Evaluation { domain: "Cyto".into(), test_set: tests.clone() },
                Evaluation { domain: "MultiInst".into(), test_set: tests },
            ],
            trainer: TrainerSpec::from_prefix("t"),
            hyperparameters: Hyperparameters::default(),
        };
        let plans = plan_rate_sweep(&[0.01, 0.1, 0.3, 1.0], &m, 5, 7, &opts).unwrap();
        assert_eq!(plans.len(), 4);
        assert_eq!(plans[0].coreset.selection.len(), 5);
        assert_eq!(plans[1].coreset.selection.len(), 5);
        assert_eq!(plans[2].coreset.selection.len(), 15);
        assert_eq!(plans[2].manifest.name, "dq-Cyto-30");
        assert_eq!(plans[2].manifest.zero_shot, vec!["MultiInst".to_string()]);
        let mut full = plans[3].coreset.selection.clone();
        full.sort();
        let mut all = m.ids().to_vec();
        all.sort();
        assert_eq!(full, all);
        assert!(plan_rate_sweep(&[], &m, 5, 7, &opts).is_err());
        assert!(plan_rate_sweep(&[0.0], &m, 5, 7, &opts).is_err());
        assert!(plan_rate_sweep(&[0.5, 0.5], &m, 5, 7, &opts).is_err());
    }

    #[test]
    fn percent_labels() {
        assert_eq!(percent_label(0.3), "30");
        assert_eq!(percent_label(0.01), "1");
        assert_eq!(percent_label(0.005), "0.5");
        assert_eq!(percent_label(1.0), "100");
    }
}
