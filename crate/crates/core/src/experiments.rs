//! The four transfer experiments (FM, SE, PT, FT): run directories,
//! configuration files, and the comparative test-set report.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dsp::{preprocess_record, PipelineConfig};
use crate::error::{Error, Result};
use crate::evalstats::{compare_experiments, summarize, GroupComparison, MeanStd, RecordMetrics, Summary};
use crate::events::{format_events, ScoredEvent};
use crate::loss::{LossBreakdown, LossConfig};
use crate::model::{DetectionModel, ModelConfig, TrainablePolicy};
use crate::nncore::{Checkpoint, OptimizerConfig};
use crate::rng::Rng;
use crate::synthdata::{write_dataset, Dataset, GeneratorConfig, MANIFEST_FILE, PartitionSpec, SignalRecord, CANONICAL_CHANNELS, EEG_C3};
use crate::training::{metrics_csv, predict_records, select_threshold, train, ThresholdSweep, TrainConfig};

pub const RUN_FILE: &str = "run.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const DETECTIONS_FILE: &str = "test_detections.txt";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TEXT: &str = "report.txt";
/// Environment variable naming the default run-directory root.
pub const RUNS_ENV: &str = "AROUSAL_RUNS_DIR";
pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Experiment {
    Fm,
    Se,
    Pt,
    Ft,
}

impl Experiment {
    pub const ALL: [Experiment; 4] = [Experiment::Fm, Experiment::Se, Experiment::Pt, Experiment::Ft];
    /// Single-channel experiments entering the statistical comparison.
    pub const COMPARED: [Experiment; 3] = [Experiment::Se, Experiment::Pt, Experiment::Ft];

    pub fn label(self) -> &'static str {
        match self {
            Experiment::Fm => "FM",
            Experiment::Se => "SE",
            Experiment::Pt => "PT",
            Experiment::Ft => "FT",
        }
    }

    pub fn dir_name(self) -> &'static str {
        match self {
            Experiment::Fm => "fm",
            Experiment::Se => "se",
            Experiment::Pt => "pt",
            Experiment::Ft => "ft",
        }
    }

    fn index(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fm" => Ok(Experiment::Fm),
            "se" => Ok(Experiment::Se),
            "pt" => Ok(Experiment::Pt),
            "ft" => Ok(Experiment::Ft),
            _ => Err(Error::Usage(format!("unknown experiment `{s}` (expected fm, se, pt or ft)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    Fresh,
    FromCheckpoint(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub experiment: Experiment,
    pub channels: Vec<String>,
    pub init: Init,
    pub trainable: TrainablePolicy,
    pub train_split: String,
    pub eval_split: String,
    pub test_split: String,
}

impl ExperimentSpec {
    /// The standard definition of `experiment`; PT and FT start from
    /// `fm_checkpoint`.
    pub fn standard(experiment: Experiment, fm_checkpoint: &Path) -> Self {
        let (channels, init, trainable): (Vec<&str>, Init, TrainablePolicy) = match experiment {
            Experiment::Fm => (CANONICAL_CHANNELS.to_vec(), Init::Fresh, TrainablePolicy::All),
            Experiment::Se => (vec![EEG_C3], Init::Fresh, TrainablePolicy::All),
            Experiment::Pt => (
                vec![EEG_C3],
                Init::FromCheckpoint(fm_checkpoint.to_path_buf()),
                TrainablePolicy::InputLayersOnly,
            ),
            Experiment::Ft => (
                vec![EEG_C3],
                Init::FromCheckpoint(fm_checkpoint.to_path_buf()),
                TrainablePolicy::All,
            ),
        };
        let (train_split, eval_split) = match experiment {
            Experiment::Fm => ("train1", "eval1"),
            _ => ("train2", "eval2"),
        };
        Self {
            experiment,
            channels: channels.into_iter().map(String::from).collect(),
            init,
            trainable,
            train_split: train_split.into(),
            eval_split: eval_split.into(),
            test_split: "test2".into(),
        }
    }

    fn channel_refs(&self) -> Vec<&str> {
        self.channels.iter().map(String::as_str).collect()
    }
}

/// Network hyperparameters that do not depend on the experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Architecture {
    pub f0: usize,
    pub kernel: usize,
    pub stride: usize,
    pub k_max: usize,
    pub windows_per_anchor: usize,
    pub anchor_pool: usize,
}

impl Default for Architecture {
    /// Reduced desk-scale network: 3 blocks of stride 4 give 240 steps for a
    /// 120 s segment at 128 Hz, pooled by 15 into 16 anchor positions.
    fn default() -> Self {
        Self {
            f0: 4,
            kernel: 5,
            stride: 4,
            k_max: 3,
            windows_per_anchor: 1,
            anchor_pool: 15,
        }
    }
}

impl Architecture {
    /// Full-depth network: 6 blocks of stride 2.
    pub fn full() -> Self {
        let m = ModelConfig::default();
        Self {
            f0: m.f0,
            kernel: m.kernel,
            stride: m.stride,
            k_max: m.k_max,
            windows_per_anchor: m.windows_per_anchor,
            anchor_pool: m.anchor_pool,
        }
    }

    pub fn model_config(&self, channels: usize, segment_samples: usize) -> ModelConfig {
        ModelConfig {
            channels,
            segment_samples,
            f0: self.f0,
            kernel: self.kernel,
            stride: self.stride,
            k_max: self.k_max,
            classes: 1,
            windows_per_anchor: self.windows_per_anchor,
            anchor_pool: self.anchor_pool,
        }
    }
}

/// Everything that determines a training run besides the experiment itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub pipeline: PipelineConfig,
    pub model: Architecture,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            pipeline: PipelineConfig::default(),
            model: Architecture::default(),
            train: TrainConfig {
                max_steps: 400,
                eval_every: 50,
                patience: 4,
                ..TrainConfig::default()
            },
            loss: LossConfig::default(),
            optimizer: OptimizerConfig {
                learning_rate: 3e-3,
                ..OptimizerConfig::default()
            },
        }
    }
}

impl RunConfig {
    pub fn segment_samples(&self) -> usize {
        (self.train.segment_duration_s * self.pipeline.resample.target_rate_hz).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.loss.validate()?;
        self.optimizer.validate()?;
        self.model.model_config(1, self.segment_samples()).validate()
    }
}

/// Seeds of one run, derived from the run seed and the experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSeeds {
    pub base: u64,
    pub model_init: u64,
    pub training: u64,
}

impl RunSeeds {
    pub fn derive(base: u64, experiment: Experiment) -> Self {
        let mut rng = Rng::stream(base, 100 + experiment.index());
        Self {
            base,
            model_init: rng.next_u64(),
            training: rng.next_u64(),
        }
    }
}

/// Dataset generation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateConfig {
    pub generator: GeneratorConfig,
    pub partition: PartitionSpec,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        let generator = GeneratorConfig::default();
        let partition = PartitionSpec::desk_scale(generator.rng_seed);
        Self { generator, partition }
    }
}

impl GenerateConfig {
    /// 1500 records split 400/100/1000 with 400/100/500 nested in the 1000.
    pub fn full_scale() -> Self {
        let generator = GeneratorConfig {
            n_records: 1500,
            ..GeneratorConfig::default()
        };
        let partition = PartitionSpec::full_scale(generator.rng_seed);
        Self { generator, partition }
    }
}

pub fn parse_toml<T: DeserializeOwned>(text: &str) -> Result<T> {
    Ok(toml::from_str(text)?)
}

pub fn load_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_toml(&text)
}

pub fn generate(root: &Path, cfg: &GenerateConfig, force: bool) -> Result<Dataset> {
    write_dataset(root, &cfg.generator, &cfg.partition, force)?;
    Dataset::open(root)
}

/// Loads a split reading only `channels`, then preprocesses every record.
pub fn load_records(ds: &Dataset, split: &str, channels: &[&str], pipeline: &PipelineConfig) -> Result<Vec<SignalRecord>> {
    ds.load_split(split, channels)?
        .iter()
        .map(|r| preprocess_record(r, pipeline).map(|p| p.record))
        .collect()
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRef {
    pub root: PathBuf,
    pub manifest_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceRef {
    pub path: PathBuf,
    pub checkpoint_id: String,
}

/// Contents of `run.json`: enough to reproduce the run exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub spec: ExperimentSpec,
    pub config: RunConfig,
    pub seeds: RunSeeds,
    pub code_version: String,
    pub dataset: DatasetRef,
    pub source: Option<SourceRef>,
    pub model: ModelConfig,
    pub checkpoint_id: String,
    pub trainable_params: usize,
    pub total_params: usize,
    pub best_step: usize,
    pub steps_run: usize,
    pub stopped_early: bool,
    pub best_val: LossBreakdown,
    pub threshold: ThresholdSweep,
}

impl RunRecord {
    pub fn tau(&self) -> f64 {
        self.threshold.tau
    }
}

pub fn run_dir(runs_root: &Path, experiment: Experiment) -> PathBuf {
    runs_root.join(experiment.dir_name())
}

fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
        if non_empty && !force {
            return Err(Error::Usage(format!(
                "{} already exists and is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn initial_model(spec: &ExperimentSpec, cfg: &RunConfig, seeds: &RunSeeds) -> Result<(DetectionModel, Option<SourceRef>)> {
    let (mut model, source) = match &spec.init {
        Init::Fresh => {
            let mc = cfg.model.model_config(spec.channels.len(), cfg.segment_samples());
            (DetectionModel::build(mc, seeds.model_init)?, None)
        }
        Init::FromCheckpoint(path) => {
            let (ck, id) = Checkpoint::load(path)?;
            let mut source = DetectionModel::from_checkpoint(&ck)?;
            source.source_checkpoint = Some(id.clone());
            let model = source.replace_input_layers(spec.channels.len(), seeds.model_init)?;
            (
                model,
                Some(SourceRef {
                    path: path.clone(),
                    checkpoint_id: id,
                }),
            )
        }
    };
    model.set_trainable(spec.trainable);
    Ok((model, source))
}

/// Trains one experiment into `dir`, selects its threshold on the eval
/// split, and writes `run.json`, the checkpoint and the metrics log.
pub fn run_experiment(spec: &ExperimentSpec, data: &Path, dir: &Path, cfg: &RunConfig, force: bool) -> Result<RunRecord> {
    cfg.validate()?;
    if let Init::FromCheckpoint(path) = &spec.init {
        if !path.is_file() {
            return Err(Error::Dependency(format!(
                "{} needs the FM checkpoint {}; run FM first",
                spec.experiment,
                path.display()
            )));
        }
    }
    let ds = Dataset::open(data)?;
    let manifest_sha256 = sha256_file(&data.join(MANIFEST_FILE))?;
    prepare_dir(dir, force)?;

    let seeds = RunSeeds::derive(cfg.seed, spec.experiment);
    let mut train_cfg = cfg.train.clone();
    train_cfg.rng_seed = seeds.training;
    let channels = spec.channel_refs();
    let train_records = load_records(&ds, &spec.train_split, &channels, &cfg.pipeline)?;
    let eval_records = load_records(&ds, &spec.eval_split, &channels, &cfg.pipeline)?;

    let (mut model, source) = initial_model(spec, cfg, &seeds)?;
    let outcome = train(&mut model, &train_records, &eval_records, &train_cfg, &cfg.loss, &cfg.optimizer)?;
    write(&dir.join(METRICS_FILE), metrics_csv(&outcome.metrics))?;

    let preds = predict_records(&mut model, &eval_records, &train_cfg)?;
    let threshold = select_threshold(&preds, &train_cfg.threshold_grid, train_cfg.iou_threshold)?;

    let ck = model.to_checkpoint(serde_json::json!({
        "experiment": spec.experiment,
        "tau": threshold.tau,
    }));
    let checkpoint_id = ck.save(&dir.join(CHECKPOINT_FILE))?;
    let record = RunRecord {
        spec: spec.clone(),
        config: RunConfig {
            train: train_cfg,
            ..cfg.clone()
        },
        seeds,
        code_version: CODE_VERSION.into(),
        dataset: DatasetRef {
            root: data.to_path_buf(),
            manifest_sha256,
        },
        source,
        model: model.config.clone(),
        checkpoint_id,
        trainable_params: model.store.trainable_count(),
        total_params: model.store.total_count(),
        best_step: outcome.best_step,
        steps_run: outcome.steps_run,
        stopped_early: outcome.stopped_early,
        best_val: outcome.best_val,
        threshold,
    };
    write(&dir.join(RUN_FILE), serde_json::to_string_pretty(&record)?)?;
    Ok(record)
}

/// Reads a finished run and its checkpoint.
pub fn load_run(dir: &Path) -> Result<(RunRecord, DetectionModel)> {
    let run_path = dir.join(RUN_FILE);
    let ck_path = dir.join(CHECKPOINT_FILE);
    if !run_path.is_file() || !ck_path.is_file() {
        return Err(Error::Dependency(format!("no completed run in {}", dir.display())));
    }
    let text = fs::read_to_string(&run_path).map_err(|e| Error::io(&run_path, e))?;
    let record: RunRecord = serde_json::from_str(&text)?;
    let (ck, id) = Checkpoint::load(&ck_path)?;
    if id != record.checkpoint_id {
        return Err(Error::Validation(format!(
            "{} does not match the checkpoint recorded in {}",
            ck_path.display(),
            run_path.display()
        )));
    }
    Ok((record, DetectionModel::from_checkpoint(&ck)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub experiment: Experiment,
    pub tau: f64,
    pub checkpoint_id: String,
    pub summary: Summary,
    pub records: Vec<RecordMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub test_split: String,
    pub iou_threshold: f64,
    pub experiments: Vec<ExperimentResult>,
    pub comparison: GroupComparison,
}

impl Report {
    pub fn result(&self, experiment: Experiment) -> Option<&ExperimentResult> {
        self.experiments.iter().find(|r| r.experiment == experiment)
    }
}

/// Test-set detections and per-record metrics of one finished run.
pub fn evaluate_run(dir: &Path, data: &Path) -> Result<(ExperimentResult, Vec<(String, ScoredEvent)>)> {
    let (record, mut model) = load_run(dir)?;
    let ds = Dataset::open(data)?;
    let channels = record.spec.channel_refs();
    let records = load_records(&ds, &record.spec.test_split, &channels, &record.config.pipeline)?;
    let train_cfg = &record.config.train;
    let preds = predict_records(&mut model, &records, train_cfg)?;
    let mut detections = Vec::new();
    let mut metrics = Vec::new();
    for p in &preds {
        for e in p.detections(record.tau(), train_cfg.iou_threshold) {
            detections.push((p.record_id.clone(), e));
        }
        metrics.push(p.metrics(record.tau(), train_cfg.iou_threshold));
    }
    let result = ExperimentResult {
        experiment: record.spec.experiment,
        tau: record.tau(),
        checkpoint_id: record.checkpoint_id,
        summary: summarize(&metrics),
        records: metrics,
    };
    Ok((result, detections))
}

/// Evaluates all four runs under `runs_root` on their test split and writes
/// `report.json`, `report.txt` and per-run detection files.
pub fn evaluate(runs_root: &Path, data: &Path) -> Result<Report> {
    for e in Experiment::ALL {
        let dir = run_dir(runs_root, e);
        if !dir.join(RUN_FILE).is_file() {
            return Err(Error::Dependency(format!(
                "no completed {e} run in {}; train it first",
                dir.display()
            )));
        }
    }
    let mut experiments = Vec::new();
    let mut iou_threshold = None;
    let mut test_split = None;
    for e in Experiment::ALL {
        let dir = run_dir(runs_root, e);
        let (result, detections) = evaluate_run(&dir, data)?;
        write(&dir.join(DETECTIONS_FILE), format_events(&detections))?;
        let (record, _) = load_run(&dir)?;
        match iou_threshold {
            Some(v) if v != record.config.train.iou_threshold => {
                return Err(Error::Config("runs use different IoU thresholds".into()));
            }
            _ => iou_threshold = Some(record.config.train.iou_threshold),
        }
        match &test_split {
            Some(s) if *s != record.spec.test_split => {
                return Err(Error::Config("runs use different test splits".into()));
            }
            _ => test_split = Some(record.spec.test_split.clone()),
        }
        experiments.push(result);
    }
    let groups: Vec<(String, Vec<RecordMetrics>)> = Experiment::COMPARED
        .iter()
        .map(|e| {
            let r = experiments.iter().find(|r| r.experiment == *e).expect("all runs evaluated");
            (e.label().to_string(), r.records.clone())
        })
        .collect();
    let report = Report {
        test_split: test_split.unwrap_or_default(),
        iou_threshold: iou_threshold.unwrap_or_default(),
        experiments,
        comparison: compare_experiments(&groups)?,
    };
    write(&runs_root.join(REPORT_JSON), serde_json::to_string_pretty(&report)?)?;
    write(&runs_root.join(REPORT_TEXT), render_report(&report))?;
    Ok(report)
}

fn cell(m: &Option<MeanStd>) -> String {
    match m {
        Some(m) => format!("{:.3} ± {:.3}", m.mean, m.std),
        None => "n/a".into(),
    }
}

/// Human-readable table of the report.
pub fn render_report(report: &Report) -> String {
    let mut s = String::new();
    let n = report.experiments.first().map_or(0, |r| r.summary.n_records);
    let excluded = report.experiments.first().map_or(0, |r| r.summary.n_excluded);
    let _ = writeln!(
        s,
        "Test split {} at IoU {}: {n} records, {excluded} excluded (no true arousals)\n",
        report.test_split, report.iou_threshold
    );
    let _ = writeln!(s, "{:<5} {:>5}  {:<15}  {:<15}  {:<15}", "", "tau", "Precision", "Recall", "F1");
    for r in &report.experiments {
        let _ = writeln!(
            s,
            "{:<5} {:>5.2}  {:<15}  {:<15}  {:<15}",
            r.experiment.label(),
            r.tau,
            cell(&r.summary.precision),
            cell(&r.summary.recall),
            cell(&r.summary.f1)
        );
    }
    let _ = writeln!(
        s,
        "\nKruskal-Wallis across {} with Bonferroni-adjusted Mann-Whitney U pairs:",
        report.comparison.groups.join(", ")
    );
    for m in &report.comparison.metrics {
        let _ = writeln!(
            s,
            "{:<9} H = {:.4}, p = {}{}",
            m.metric.name(),
            m.kruskal_wallis.h,
            fmt_p(m.kruskal_wallis.p),
            if m.omnibus_significant { "" } else { " (omnibus not significant)" }
        );
        for p in &m.pairs {
            let _ = writeln!(
                s,
                "          {} vs {}: U = {:.1}, p_adj = {} {}",
                p.a,
                p.b,
                p.u,
                fmt_p(p.p_adj),
                p.marker
            );
        }
    }
    s
}

fn fmt_p(p: f64) -> String {
    if p < 1e-4 {
        format!("{p:.2e}")
    } else {
        format!("{p:.4}")
    }
}

/// F1 means by experiment, for quick inspection.
pub fn mean_f1_by_experiment(report: &Report) -> Vec<(Experiment, Option<f64>)> {
    report
        .experiments
        .iter()
        .map(|r| (r.experiment, r.summary.f1.map(|m| m.mean)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_specs() {
        let fm = Path::new("runs/fm/model.ckpt");
        let s = ExperimentSpec::standard(Experiment::Fm, fm);
        assert_eq!(s.channels.len(), 5);
        assert_eq!((s.train_split.as_str(), s.eval_split.as_str()), ("train1", "eval1"));
        for e in [Experiment::Se, Experiment::Pt, Experiment::Ft] {
            let s = ExperimentSpec::standard(e, fm);
            assert_eq!(s.channels, vec![EEG_C3.to_string()]);
            assert_eq!(s.train_split, "train2");
            assert_eq!(s.test_split, "test2");
        }
        assert_eq!(ExperimentSpec::standard(Experiment::Pt, fm).trainable, TrainablePolicy::InputLayersOnly);
        assert_eq!(ExperimentSpec::standard(Experiment::Se, fm).init, Init::Fresh);
        assert!(matches!(ExperimentSpec::standard(Experiment::Ft, fm).init, Init::FromCheckpoint(_)));
    }

    #[test]
    fn experiment_names_parse() {
        for e in Experiment::ALL {
            assert_eq!(e.dir_name().parse::<Experiment>().unwrap(), e);
            assert_eq!(e.label().parse::<Experiment>().unwrap(), e);
        }
        assert!(matches!("xx".parse::<Experiment>(), Err(Error::Usage(_))));
    }

    #[test]
    fn seeds_differ_by_experiment() {
        let a = RunSeeds::derive(1, Experiment::Se);
        let b = RunSeeds::derive(1, Experiment::Ft);
        assert_ne!(a, b);
        assert_eq!(a, RunSeeds::derive(1, Experiment::Se));
    }

    #[test]
    fn shipped_configs_match_presets() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        let desk: RunConfig = load_toml(&dir.join("desk.toml")).unwrap();
        assert_eq!(desk, RunConfig::default());
        let full: RunConfig = load_toml(&dir.join("full.toml")).unwrap();
        assert_eq!(full.model, Architecture::full());
        assert_eq!(full.train, TrainConfig::default());
        assert_eq!(full.optimizer, OptimizerConfig::default());
        full.validate().unwrap();
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(parse_toml::<RunConfig>(&text).unwrap(), cfg);
        let partial: RunConfig = parse_toml("seed = 9\n[train]\nmax_steps = 12\n").unwrap();
        assert_eq!(partial.seed, 9);
        assert_eq!(partial.train.max_steps, 12);
        assert_eq!(partial.train.batch_size, 8);
        assert!(matches!(parse_toml::<RunConfig>("seed = \"x\""), Err(Error::Toml(_))));
    }

    #[test]
    fn desk_architecture_matches_anchor_grid() {
        let cfg = RunConfig::default();
        let mc = cfg.model.model_config(5, cfg.segment_samples());
        mc.validate().unwrap();
        assert_eq!(mc.n_anchors(), cfg.train.anchor_grid().unwrap().len());
        let full = Architecture::full().model_config(5, cfg.segment_samples());
        assert_eq!(full.n_anchors(), 16);
    }

    #[test]
    fn pt_without_fm_is_a_dependency_error() {
        let tmp = tempfile::tempdir().unwrap();
        let spec = ExperimentSpec::standard(Experiment::Pt, &tmp.path().join("fm/model.ckpt"));
        let err = run_experiment(&spec, tmp.path(), &tmp.path().join("pt"), &RunConfig::default(), false).unwrap_err();
        assert!(matches!(&err, Error::Dependency(m) if m.contains("run FM first")), "{err}");
    }
}
