//! Config-driven train → prune → evaluate pipelines.
//!
//! Every command writes into one output directory:
//!
//! - deterministic artifacts (checkpoints, JSON reports, CSV tables), which
//!   are byte-identical across reruns with the same config and seed;
//! - measured artifacts (`timing.json`, latency tables), which hold wall-clock
//!   numbers and are listed separately;
//! - `manifest.json`, written last, naming every file of the run.
//!
//! A `.toolkit.lock` file guards the directory while a run is in progress.

use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{
    co2_estimate, latency_compare, latency_csv, measure_latency, robustness_report, training_flops,
    Co2Config, Co2Estimate, CorruptionConfig, LatencyConfig, LatencyRow, LatencyStats, PrunedStep,
    RobustnessReport,
};
use crate::network::{self, ArchSpec, BlockId, ResidualNet};
use crate::pruner::{
    l1_filter_prune_units, oracle_rank_with_cap, prune_iterative_observed, prune_one_with,
    score_subsample, score_with, scoring_threads, spearman, PruneConfig, PruneTrace, ScoreOptions,
};
use crate::training::{evaluate, load_csv, stratified_split, synth_dataset, train, SplitData, TrainConfig, TrainHistory};

/// Version of every JSON document the toolkit writes.
pub const SCHEMA: u32 = 1;
pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");

const LOCK_FILE: &str = ".toolkit.lock";
const MANIFEST: &str = "manifest.json";

// ----------------------------------------------------------------- config

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub arch: ArchSpec,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub prune: PruneConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Relative paths resolve against the config file's directory.
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Added to every seed in the config.
    #[serde(default)]
    pub seed: u64,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Synth(SynthConfig),
    Csv(CsvConfig),
}

/// Gaussian class mixture, see [`synth_dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n: usize,
    pub d: usize,
    pub classes: usize,
    pub spread: f64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvConfig {
    pub path: PathBuf,
    pub label_column: String,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
}

fn default_test_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub latency: LatencyConfig,
    pub fgsm_epsilons: Vec<f64>,
    pub corruption: CorruptionConfig,
    pub co2: Co2Config,
    /// Fine-tuning for the oracle ranking; `prune.finetune` when absent.
    pub oracle_finetune: Option<TrainConfig>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            latency: LatencyConfig::default(),
            fgsm_epsilons: vec![0.0, 0.05, 0.1, 0.2],
            corruption: CorruptionConfig::default(),
            co2: Co2Config::default(),
            oracle_finetune: None,
        }
    }
}

impl ExperimentConfig {
    /// Parses a JSON config. Errors name the offending field and position.
    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            Error::Config(format!("{origin}: field `{field}`: {}", e.inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.train.validate().map_err(|e| ctx("train", e))?;
        self.prune.validate().map_err(|e| ctx("prune", e))?;
        if let Some(ft) = &self.eval.oracle_finetune {
            ft.validate().map_err(|e| ctx("eval.oracle_finetune", e))?;
        }
        match &self.data {
            DataConfig::Synth(s) => {
                if s.d != self.arch.input_dim {
                    return Err(Error::Config(format!(
                        "data.synth.d = {} but arch.input_dim = {}",
                        s.d, self.arch.input_dim
                    )));
                }
                if s.classes != self.arch.num_classes {
                    return Err(Error::Config(format!(
                        "data.synth.classes = {} but arch.num_classes = {}",
                        s.classes, self.arch.num_classes
                    )));
                }
            }
            DataConfig::Csv(c) => {
                if !(c.test_fraction > 0.0 && c.test_fraction < 1.0) {
                    return Err(Error::Config("data.csv.test_fraction must lie in (0, 1)".into()));
                }
            }
        }
        if let Some(e) = self.eval.fgsm_epsilons.iter().find(|e| !(e.is_finite() && **e >= 0.0)) {
            return Err(Error::Config(format!("eval.fgsm_epsilons contains {e}")));
        }
        if let Some(s) = self.eval.corruption.severities.iter().find(|s| !(1..=5).contains(*s)) {
            return Err(Error::Config(format!("eval.corruption.severities contains {s}")));
        }
        let l = &self.eval.latency;
        if l.runs == 0 || l.n_samples == 0 || l.steps == 0 {
            return Err(Error::Config("eval.latency needs runs, n_samples and steps >= 1".into()));
        }
        if self.eval.co2.throughput_flops <= 0.0 {
            return Err(Error::Config("eval.co2.throughput_flops must be positive".into()));
        }
        Ok(())
    }

    /// The config with `seed` added to every component seed.
    pub fn seeded(&self) -> Self {
        let s = self.seed;
        let mut c = self.clone();
        c.arch.seed = c.arch.seed.wrapping_add(s);
        c.train.seed = c.train.seed.wrapping_add(s);
        c.prune.seed = c.prune.seed.wrapping_add(s);
        c.prune.finetune.seed = c.prune.finetune.seed.wrapping_add(s);
        c.eval.corruption.seed = c.eval.corruption.seed.wrapping_add(s);
        if let Some(ft) = &mut c.eval.oracle_finetune {
            ft.seed = ft.seed.wrapping_add(s);
        }
        if let DataConfig::Synth(d) = &mut c.data {
            d.seed = d.seed.wrapping_add(s);
        }
        c
    }
}

fn ctx(section: &str, e: Error) -> Error {
    match e {
        Error::Config(m) => Error::Config(format!("{section}: {m}")),
        other => other,
    }
}

/// A loaded config with paths resolved and optional CLI overrides applied.
#[derive(Debug, Clone)]
pub struct Experiment {
    /// The config as given plus overrides; echoed into reports.
    pub config: ExperimentConfig,
    pub output_dir: PathBuf,
    base_dir: PathBuf,
}

impl Experiment {
    /// Reads `path`. `out` replaces `output_dir`, `seed` replaces `seed`.
    pub fn load(path: impl AsRef<Path>, out: Option<PathBuf>, seed: Option<u64>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut config = ExperimentConfig::from_json(&text, &path.display().to_string())?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        if let Some(s) = seed {
            config.seed = s;
        }
        let output_dir = match out {
            Some(o) => o,
            None => base_dir.join(&config.output_dir),
        };
        if let DataConfig::Csv(c) = &config.data {
            let p = base_dir.join(&c.path);
            if !p.is_file() {
                return Err(Error::Config(format!("data.csv.path: {} does not exist", p.display())));
            }
        }
        Ok(Self {
            config,
            output_dir,
            base_dir,
        })
    }

    /// From an in-memory config; relative paths resolve against the
    /// working directory.
    pub fn from_config(config: ExperimentConfig, output_dir: PathBuf) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            output_dir,
            base_dir: PathBuf::new(),
        })
    }

    fn run_config(&self) -> ExperimentConfig {
        self.config.seeded()
    }

    pub fn load_data(&self) -> Result<SplitData> {
        let cfg = self.run_config();
        match &cfg.data {
            DataConfig::Synth(s) => synth_dataset(s.n, s.d, s.classes, s.spread, s.seed),
            DataConfig::Csv(c) => {
                let ds = load_csv(self.base_dir.join(&c.path), &c.label_column)?;
                if ds.dim() != cfg.arch.input_dim || ds.num_classes != cfg.arch.num_classes {
                    return Err(Error::Config(format!(
                        "data.csv has {} features and {} classes, arch expects {} and {}",
                        ds.dim(),
                        ds.num_classes,
                        cfg.arch.input_dim,
                        cfg.arch.num_classes
                    )));
                }
                stratified_split(&ds, c.test_fraction)
            }
        }
    }

    pub fn build_net(&self) -> Result<ResidualNet> {
        ResidualNet::build(&self.run_config().arch)
    }

    /// Loads a checkpoint and checks it fits the configured data.
    pub fn load_checkpoint(&self, path: &Path) -> Result<ResidualNet> {
        let net = network::load(path)?;
        let a = &self.config.arch;
        if net.input_dim() != a.input_dim || net.num_classes() != a.num_classes {
            return Err(Error::Config(format!(
                "checkpoint {} maps {} inputs to {} classes, config expects {} to {}",
                path.display(),
                net.input_dim(),
                net.num_classes(),
                a.input_dim,
                a.num_classes
            )));
        }
        Ok(net)
    }
}

// ----------------------------------------------------------------- output

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub bytes: u64,
    pub crc32: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: u32,
    pub toolkit_version: String,
    pub command: String,
    pub files: Vec<ManifestEntry>,
    /// Files holding wall-clock measurements; they differ between reruns.
    pub measured: Vec<String>,
}

#[derive(Debug, Serialize)]
struct Timing<'a> {
    schema: u32,
    started_unix_ms: u128,
    finished_unix_ms: u128,
    wall_clock_s: f64,
    phases: &'a [Phase],
}

#[derive(Debug, Clone, Serialize)]
struct Phase {
    name: String,
    seconds: f64,
}

struct LockGuard(PathBuf);

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// Output directory of one command run.
pub struct RunOutput {
    dir: PathBuf,
    command: String,
    files: Vec<ManifestEntry>,
    measured: Vec<String>,
    phases: Vec<Phase>,
    started: SystemTime,
    clock: Instant,
    _lock: LockGuard,
}

impl RunOutput {
    /// Locks `dir` (creating it) and drops any stale manifest.
    pub fn open(dir: &Path, command: &str) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let lock = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(_) => {}
            Err(e) if e.kind() == ErrorKind::AlreadyExists => return Err(Error::Locked(dir.to_path_buf())),
            Err(e) => return Err(e.into()),
        }
        let guard = LockGuard(lock);
        match fs::remove_file(dir.join(MANIFEST)) {
            Err(e) if e.kind() != ErrorKind::NotFound => return Err(e.into()),
            _ => {}
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            command: command.to_string(),
            files: Vec::new(),
            measured: Vec::new(),
            phases: Vec::new(),
            started: SystemTime::now(),
            clock: Instant::now(),
            _lock: guard,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(name);
        fs::write(&path, bytes)?;
        self.files.retain(|f| f.path != name);
        self.files.push(ManifestEntry {
            path: name.to_string(),
            bytes: bytes.len() as u64,
            crc32: format!("{:08x}", crc32fast::hash(bytes)),
        });
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write_bytes(name, &bytes)
    }

    pub fn write_checkpoint(&mut self, name: &str, net: &ResidualNet) -> Result<PathBuf> {
        self.write_bytes(name, &network::write_checkpoint(net)?)
    }

    /// Writes a file of wall-clock measurements, kept out of the checksums.
    pub fn write_measured(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(name);
        fs::write(&path, bytes)?;
        if !self.measured.iter().any(|m| m == name) {
            self.measured.push(name.to_string());
        }
        Ok(path)
    }

    /// Runs `f` and records its duration in the timing sidecar.
    pub fn phase<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let out = f(self)?;
        self.phases.push(Phase {
            name: name.to_string(),
            seconds: t.elapsed().as_secs_f64(),
        });
        Ok(out)
    }

    /// Writes `timing.json`, then the manifest, then releases the lock.
    pub fn finish(mut self) -> Result<Manifest> {
        let ms = |t: SystemTime| t.duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0);
        let timing = Timing {
            schema: SCHEMA,
            started_unix_ms: ms(self.started),
            finished_unix_ms: ms(SystemTime::now()),
            wall_clock_s: self.clock.elapsed().as_secs_f64(),
            phases: &self.phases,
        };
        let mut bytes = serde_json::to_vec_pretty(&timing)?;
        bytes.push(b'\n');
        self.write_measured("timing.json", &bytes)?;
        let manifest = Manifest {
            schema: SCHEMA,
            toolkit_version: TOOLKIT_VERSION.to_string(),
            command: self.command.clone(),
            files: std::mem::take(&mut self.files),
            measured: std::mem::take(&mut self.measured),
        };
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        let tmp = self.dir.join(".manifest.json.tmp");
        fs::write(&tmp, &bytes)?;
        fs::rename(&tmp, self.dir.join(MANIFEST))?;
        Ok(manifest)
    }
}

// ---------------------------------------------------------------- reports

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryReport {
    pub schema: u32,
    pub history: TrainHistory,
    pub test_accuracy: f64,
    pub per_sample_flops: usize,
    pub params: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceReport {
    pub schema: u32,
    pub trace: PruneTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub test_accuracy: f64,
    pub per_sample_flops: usize,
    pub params: usize,
    pub blocks: usize,
    pub hidden_units: usize,
    pub removal_log: Vec<BlockId>,
}

impl ModelMetrics {
    pub fn measure(net: &ResidualNet, data: &SplitData) -> Result<Self> {
        let f = net.count_flops();
        Ok(Self {
            test_accuracy: evaluate(net, &data.test)?,
            per_sample_flops: f.per_sample_flops,
            params: f.params,
            blocks: net.num_blocks(),
            hidden_units: net.hidden_units(),
            removal_log: net.removal_log().to_vec(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Co2Section {
    /// Cost of training each architecture for `train.epochs` over the
    /// training split.
    pub epochs: usize,
    pub samples: usize,
    pub unpruned: Co2Estimate,
    pub pruned: Co2Estimate,
    pub reduction_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema: u32,
    pub toolkit_version: String,
    pub config: ExperimentConfig,
    pub label_names: Option<Vec<String>>,
    pub unpruned: ModelMetrics,
    pub pruned: ModelMetrics,
    pub prune_trace: Option<PruneTrace>,
    /// `(pruned − unpruned) × 100`.
    pub delta_acc_pp: f64,
    /// `(1 − pruned/unpruned) × 100` on per-sample FLOPs.
    pub flop_reduction_pct: f64,
    pub param_reduction_pct: f64,
    pub robustness: RobustnessReport,
    pub co2: Co2Section,
    /// Measured file holding the latency of both nets.
    pub latency_file: String,
}

impl Report {
    /// Checks that every derived number recomputes from the raw ones.
    pub fn is_consistent(&self) -> bool {
        let u = &self.unpruned;
        let p = &self.pruned;
        self.delta_acc_pp == (p.test_accuracy - u.test_accuracy) * 100.0
            && self.flop_reduction_pct == pct_reduction(p.per_sample_flops as f64, u.per_sample_flops as f64)
            && self.param_reduction_pct == pct_reduction(p.params as f64, u.params as f64)
            && self.co2.reduction_pct == pct_reduction(self.co2.pruned.co2_kg, self.co2.unpruned.co2_kg)
    }
}

fn pct_reduction(pruned: f64, unpruned: f64) -> f64 {
    (1.0 - pruned / unpruned) * 100.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub schema: u32,
    pub unpruned: LatencyStats,
    pub pruned: LatencyStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStepInfo {
    pub neurons_removed: usize,
    pub removed_blocks: Vec<BlockId>,
    pub layer_flops: usize,
    pub filter_flops: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencySteps {
    pub schema: u32,
    pub base_hidden_units: usize,
    pub steps: Vec<LatencyStepInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyTable {
    pub schema: u32,
    pub rows: Vec<LatencyRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRow {
    pub block: BlockId,
    pub score: f64,
    pub cka: f64,
    pub oracle_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub schema: u32,
    pub rows: Vec<OracleRow>,
    /// Spearman correlation of CKA (`1 − score`) with oracle accuracy.
    pub spearman: f64,
}

// --------------------------------------------------------------- commands

fn trained(exp: &Experiment, data: &SplitData, out: &mut RunOutput) -> Result<ResidualNet> {
    let cfg = exp.run_config();
    let net = exp.build_net()?;
    let (net, history) = out.phase("train", |_| train(&net, data, &cfg.train))?;
    let f = net.count_flops();
    out.write_json(
        "history.json",
        &HistoryReport {
            schema: SCHEMA,
            test_accuracy: evaluate(&net, &data.test)?,
            history,
            per_sample_flops: f.per_sample_flops,
            params: f.params,
        },
    )?;
    Ok(net)
}

fn pruned(exp: &Experiment, net: &ResidualNet, data: &SplitData, out: &mut RunOutput) -> Result<(ResidualNet, PruneTrace)> {
    let cfg = exp.run_config();
    let threads = scoring_threads();
    let (net, trace) = out.phase("prune", |out| {
        prune_iterative_observed(net, data, &cfg.prune, threads, |rec, n| {
            out.write_checkpoint(&format!("prune_iter_{:03}.ckap", rec.iteration), n)
                .map(|_| ())
        })
    })?;
    out.write_checkpoint("pruned.ckap", &net)?;
    out.write_json(
        "prune_trace.json",
        &TraceReport {
            schema: SCHEMA,
            trace: trace.clone(),
        },
    )?;
    out.write_bytes("prune_trace.csv", trace.to_csv()?.as_bytes())?;
    Ok((net, trace))
}

/// Trains from scratch: `model.ckap`, `history.json`.
pub fn cmd_train(exp: &Experiment) -> Result<Manifest> {
    let mut out = RunOutput::open(&exp.output_dir, "train")?;
    let data = exp.load_data()?;
    let net = trained(exp, &data, &mut out)?;
    out.write_checkpoint("model.ckap", &net)?;
    out.finish()
}

/// Prunes `checkpoint` (or a freshly trained net, saved as
/// `unpruned.ckap`): per-iteration checkpoints, `pruned.ckap`,
/// `prune_trace.{json,csv}`.
pub fn cmd_prune(exp: &Experiment, checkpoint: Option<&Path>) -> Result<Manifest> {
    let mut out = RunOutput::open(&exp.output_dir, "prune")?;
    let data = exp.load_data()?;
    let net = match checkpoint {
        Some(p) => exp.load_checkpoint(p)?,
        None => {
            let n = trained(exp, &data, &mut out)?;
            out.write_checkpoint("unpruned.ckap", &n)?;
            n
        }
    };
    pruned(exp, &net, &data, &mut out)?;
    out.finish()
}

/// Full report comparing an unpruned and a pruned net.
///
/// With no checkpoints the net is trained and pruned first; with one it is
/// the unpruned net and gets pruned; with two they are taken as unpruned and
/// pruned, and a `prune_trace.json` beside the pruned checkpoint is embedded
/// when present.
pub fn cmd_eval(exp: &Experiment, checkpoints: &[PathBuf]) -> Result<Manifest> {
    if checkpoints.len() > 2 {
        return Err(Error::Config(format!(
            "eval takes at most 2 checkpoints, got {}",
            checkpoints.len()
        )));
    }
    let cfg = exp.run_config();
    let mut out = RunOutput::open(&exp.output_dir, "eval")?;
    let data = exp.load_data()?;
    let (unpruned, pruned_net, trace) = match checkpoints {
        [] => {
            let u = trained(exp, &data, &mut out)?;
            out.write_checkpoint("unpruned.ckap", &u)?;
            let (p, t) = pruned(exp, &u, &data, &mut out)?;
            (u, p, Some(t))
        }
        [u] => {
            let u = exp.load_checkpoint(u)?;
            let (p, t) = pruned(exp, &u, &data, &mut out)?;
            (u, p, Some(t))
        }
        [u, p] => {
            let trace_path = p.parent().unwrap_or(Path::new("")).join("prune_trace.json");
            let trace = match fs::read(&trace_path) {
                Ok(b) => Some(serde_json::from_slice::<TraceReport>(&b)?.trace),
                Err(e) if e.kind() == ErrorKind::NotFound => None,
                Err(e) => return Err(e.into()),
            };
            (exp.load_checkpoint(u)?, exp.load_checkpoint(p)?, trace)
        }
        _ => unreachable!(),
    };

    let u = ModelMetrics::measure(&unpruned, &data)?;
    let p = ModelMetrics::measure(&pruned_net, &data)?;
    let robustness = out.phase("robustness", |_| {
        robustness_report(
            &unpruned,
            &pruned_net,
            &data.test,
            &cfg.eval.fgsm_epsilons,
            &cfg.eval.corruption,
        )
    })?;
    let samples = data.train.len();
    let epochs = cfg.train.epochs.max(1);
    let co2_u = co2_estimate(training_flops(u.per_sample_flops, samples, epochs), &cfg.eval.co2)?;
    let co2_p = co2_estimate(training_flops(p.per_sample_flops, samples, epochs), &cfg.eval.co2)?;

    let lat = &cfg.eval.latency;
    let latency = out.phase("latency", |_| {
        let base = measure_latency(&unpruned, lat.n_samples, lat.runs, lat.warmup_runs)?;
        let mut small = measure_latency(&pruned_net, lat.n_samples, lat.runs, lat.warmup_runs)?;
        small.speedup_vs_baseline = base.mean_ms / small.mean_ms;
        Ok(LatencyReport {
            schema: SCHEMA,
            unpruned: base,
            pruned: small,
        })
    })?;
    let mut bytes = serde_json::to_vec_pretty(&latency)?;
    bytes.push(b'\n');
    out.write_measured("latency.json", &bytes)?;

    let report = Report {
        schema: SCHEMA,
        toolkit_version: TOOLKIT_VERSION.to_string(),
        config: exp.config.clone(),
        label_names: data.train.label_names.clone(),
        delta_acc_pp: (p.test_accuracy - u.test_accuracy) * 100.0,
        flop_reduction_pct: pct_reduction(p.per_sample_flops as f64, u.per_sample_flops as f64),
        param_reduction_pct: pct_reduction(p.params as f64, u.params as f64),
        co2: Co2Section {
            epochs,
            samples,
            reduction_pct: pct_reduction(co2_p.co2_kg, co2_u.co2_kg),
            unpruned: co2_u,
            pruned: co2_p,
        },
        unpruned: u,
        pruned: p,
        prune_trace: trace,
        robustness,
        latency_file: "latency.json".into(),
    };
    debug_assert!(report.is_consistent());
    out.write_json("report.json", &report)?;
    out.write_bytes("robustness.csv", robustness_csv(&report.robustness).as_bytes())?;
    out.finish()
}

fn robustness_csv(r: &RobustnessReport) -> String {
    let mut s = String::from("condition,level,unpruned,pruned,delta_pp\n");
    let a = &r.clean;
    s.push_str(&format!("clean,,{},{},{}\n", a.unpruned, a.pruned, a.delta_pp));
    for f in &r.fgsm {
        let a = &f.accuracy;
        s.push_str(&format!("fgsm,{},{},{},{}\n", f.epsilon, a.unpruned, a.pruned, a.delta_pp));
    }
    for c in &r.corruptions {
        let a = &c.accuracy;
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            c.kind, c.severity, a.unpruned, a.pruned, a.delta_pp
        ));
    }
    s
}

/// Layer-vs-filter latency at matched neuron counts.
///
/// Layer steps remove blocks greedily by CKA score without fine-tuning;
/// each filter step removes the same number of hidden units by ℓ1 norm.
/// Latency does not depend on the weights, so with no checkpoint the
/// untrained net is used.
pub fn cmd_latency(exp: &Experiment, checkpoints: &[PathBuf]) -> Result<Manifest> {
    if checkpoints.len() > 1 {
        return Err(Error::Config(format!(
            "latency takes at most 1 checkpoint, got {}",
            checkpoints.len()
        )));
    }
    let cfg = exp.run_config();
    let mut out = RunOutput::open(&exp.output_dir, "latency")?;
    let base = match checkpoints.first() {
        Some(p) => exp.load_checkpoint(p)?,
        None => exp.build_net()?,
    };
    let data = exp.load_data()?;
    let x_score = score_subsample(&data.train, cfg.prune.score_sample_count, cfg.prune.seed);
    let opts = ScoreOptions {
        kernel: cfg.prune.kernel,
        stage_cap: cfg.prune.stage_cap,
        reference: None,
        threads: scoring_threads(),
    };
    let total = base.hidden_units();
    let mut layer_steps = Vec::new();
    let mut filter_steps = Vec::new();
    let mut info = Vec::new();
    let mut current = base.clone();
    out.phase("steps", |_| {
        for _ in 0..cfg.eval.latency.steps {
            if current.candidate_blocks_with_cap(opts.stage_cap).is_empty() {
                break;
            }
            current = prune_one_with(&current, &x_score, &opts)?.0;
            let removed = total - current.hidden_units();
            let filter = match l1_filter_prune_units(&base, removed) {
                Ok(f) => Some(f),
                Err(Error::EmptiesBlock { .. }) => None,
                Err(e) => return Err(e),
            };
            info.push(LatencyStepInfo {
                neurons_removed: removed,
                removed_blocks: current.removal_log().to_vec(),
                layer_flops: current.count_flops().per_sample_flops,
                filter_flops: filter.as_ref().map(|f| f.count_flops().per_sample_flops),
            });
            layer_steps.push(PrunedStep {
                net: current.clone(),
                neurons_removed: removed,
            });
            if let Some(net) = filter {
                filter_steps.push(PrunedStep {
                    net,
                    neurons_removed: removed,
                });
            }
        }
        Ok(())
    })?;
    out.write_json(
        "latency_steps.json",
        &LatencySteps {
            schema: SCHEMA,
            base_hidden_units: total,
            steps: info,
        },
    )?;
    let rows = out.phase("latency", |_| {
        latency_compare(&base, &layer_steps, &filter_steps, &cfg.eval.latency)
    })?;
    out.write_measured("latency.csv", latency_csv(&rows).as_bytes())?;
    let mut bytes = serde_json::to_vec_pretty(&LatencyTable { schema: SCHEMA, rows })?;
    bytes.push(b'\n');
    out.write_measured("latency_table.json", &bytes)?;
    out.finish()
}

/// CKA scores next to the brute-force oracle accuracies of every candidate.
pub fn cmd_oracle(exp: &Experiment, checkpoint: Option<&Path>) -> Result<Manifest> {
    let cfg = exp.run_config();
    let mut out = RunOutput::open(&exp.output_dir, "oracle")?;
    let data = exp.load_data()?;
    let net = match checkpoint {
        Some(p) => exp.load_checkpoint(p)?,
        None => trained(exp, &data, &mut out)?,
    };
    let x_score = score_subsample(&data.train, cfg.prune.score_sample_count, cfg.prune.seed);
    let opts = ScoreOptions {
        kernel: cfg.prune.kernel,
        stage_cap: cfg.prune.stage_cap,
        reference: None,
        threads: scoring_threads(),
    };
    let scoring = score_with(&net, &x_score, &opts)?;
    let ft = cfg.eval.oracle_finetune.clone().unwrap_or(cfg.prune.finetune.clone());
    let oracle = out.phase("oracle", |_| oracle_rank_with_cap(&net, &data, &ft, cfg.prune.stage_cap))?;
    let rows: Vec<OracleRow> = scoring
        .scores
        .iter()
        .zip(&oracle)
        .map(|(s, &(id, acc))| {
            debug_assert_eq!(s.block, id);
            OracleRow {
                block: id,
                score: s.score,
                cka: s.cka,
                oracle_accuracy: acc,
            }
        })
        .collect();
    let cka: Vec<f64> = rows.iter().map(|r| r.cka).collect();
    let acc: Vec<f64> = rows.iter().map(|r| r.oracle_accuracy).collect();
    let rho = spearman(&cka, &acc);
    let mut csv = String::from("block,score,cka,oracle_accuracy\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{},{}\n", r.block, r.score, r.cka, r.oracle_accuracy));
    }
    out.write_bytes("oracle.csv", csv.as_bytes())?;
    out.write_json(
        "oracle.json",
        &OracleReport {
            schema: SCHEMA,
            rows,
            spearman: rho,
        },
    )?;
    out.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOY: &str = r#"{
        "arch": {"input_dim": 4, "stage_widths": [6, 5], "blocks_per_stage": [3, 3], "num_classes": 3, "seed": 1},
        "data": {"synth": {"n": 240, "d": 4, "classes": 3, "spread": 0.3, "seed": 2}},
        "train": {"epochs": 3, "batch_size": 32, "learning_rate": 0.05, "momentum": 0.9},
        "prune": {"iterations": 2, "score_sample_count": 64,
                  "finetune": {"epochs": 1, "batch_size": 32, "learning_rate": 0.01}},
        "eval": {"latency": {"n_samples": 50, "runs": 2, "warmup_runs": 0, "steps": 2},
                 "fgsm_epsilons": [0.0, 0.1],
                 "corruption": {"kinds": ["gaussian"], "severities": [1, 5]}}
    }"#;

    fn toy() -> ExperimentConfig {
        ExperimentConfig::from_json(TOY, "toy").unwrap()
    }

    #[test]
    fn parse_errors_name_the_field() {
        let bad = TOY.replace("\"momentum\": 0.9", "\"momentun\": 0.9");
        let e = ExperimentConfig::from_json(&bad, "toy").unwrap_err().to_string();
        assert!(e.contains("train") && e.contains("momentun"), "{e}");
        let bad = TOY.replace("\"n\": 240", "\"n\": -1");
        let e = ExperimentConfig::from_json(&bad, "toy").unwrap_err().to_string();
        assert!(e.contains("data.synth.n") && e.contains("line"), "{e}");
        let bad = TOY.replace("\"d\": 4", "\"d\": 5");
        assert!(ExperimentConfig::from_json(&bad, "toy").unwrap_err().is_config());
    }

    #[test]
    fn seed_offsets_every_component() {
        let mut c = toy();
        c.seed = 10;
        let s = c.seeded();
        assert_eq!(s.arch.seed, 11);
        assert_eq!(s.train.seed, 10);
        assert_eq!(s.prune.finetune.seed, 10);
        assert!(matches!(s.data, DataConfig::Synth(ref d) if d.seed == 12));
    }

    #[test]
    fn lock_blocks_second_run_and_is_released() {
        let dir = tempfile::tempdir().unwrap();
        let first = RunOutput::open(dir.path(), "x").unwrap();
        assert!(matches!(RunOutput::open(dir.path(), "x"), Err(Error::Locked(_))));
        first.finish().unwrap();
        assert!(!dir.path().join(LOCK_FILE).exists());
        RunOutput::open(dir.path(), "x").unwrap();
    }

    #[test]
    fn eval_pipeline_is_consistent_and_deterministic() {
        let run = |dir: &Path| {
            let exp = Experiment::from_config(toy(), dir.to_path_buf()).unwrap();
            let m = cmd_eval(&exp, &[]).unwrap();
            let report: Report = serde_json::from_slice(&fs::read(dir.join("report.json")).unwrap()).unwrap();
            (m, report)
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let (ma, ra) = run(a.path());
        let (mb, _) = run(b.path());
        assert_eq!(ma, mb);
        assert!(ra.is_consistent());
        assert_eq!(ra.prune_trace.as_ref().unwrap().records.len(), 2);
        assert_eq!(ra.pruned.removal_log.len(), 2);
        for name in ["report.json", "prune_trace.json", "pruned.ckap", "prune_iter_002.ckap"] {
            assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap());
        }
        assert!(ma.measured.contains(&"timing.json".to_string()));
        // eval again from the saved checkpoints
        let c = tempfile::tempdir().unwrap();
        let exp = Experiment::from_config(toy(), c.path().to_path_buf()).unwrap();
        cmd_eval(&exp, &[a.path().join("unpruned.ckap"), a.path().join("pruned.ckap")]).unwrap();
        let rc: Report = serde_json::from_slice(&fs::read(c.path().join("report.json")).unwrap()).unwrap();
        assert_eq!(rc, ra);
    }

    #[test]
    fn latency_and_oracle_commands() {
        let dir = tempfile::tempdir().unwrap();
        let exp = Experiment::from_config(toy(), dir.path().to_path_buf()).unwrap();
        let m = cmd_latency(&exp, &[]).unwrap();
        assert!(m.measured.contains(&"latency.csv".to_string()));
        let csv = fs::read_to_string(dir.path().join("latency.csv")).unwrap();
        assert!(csv.starts_with("neurons_removed,layer_speedup,filter_speedup"));
        cmd_oracle(&exp, None).unwrap();
        let o: OracleReport = serde_json::from_slice(&fs::read(dir.path().join("oracle.json")).unwrap()).unwrap();
        assert_eq!(o.rows.len(), 2);
        assert!((-1.0..=1.0).contains(&o.spearman) || o.spearman.is_nan());
    }
}
