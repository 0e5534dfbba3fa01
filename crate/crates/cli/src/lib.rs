//! Library half of the `uda-bench` binary: dataset-pair specs, experiment
//! orchestration, the multi-seed benchmark sweep, and the summary table.
//!
//! Everything here is deterministic per `(spec, seed)`: metrics files are
//! written atomically (write-then-rename) and byte-identical across reruns,
//! and the summary table is always rebuilt from the persisted metrics files
//! rather than from in-memory state.

use std::fmt;
use std::path::{Path, PathBuf};

use uda_core::data::{
    gen_gaussian_shift, gen_two_moons_shift, load_csv, write_csv, FeatureDataset, ShiftSpec,
};
use uda_core::gradcheck::{run_suite, SuiteReport};
use uda_core::losses::{LambdaSchedule, TransferLossKind};
use uda_core::model::save_checkpoint;
use uda_core::rng;
use uda_core::train::{run_training, ArchConfig, LrSchedule, RunData, Tap, TrainConfig};
use uda_core::EpochRecord;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Errors classified by exit code: usage/config problems exit 1, runtime
/// failures exit 2, a failed gradient check exits 3.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
    GradcheckFailed(Vec<String>),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::GradcheckFailed(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "{msg}"),
            CliError::Runtime(msg) => write!(f, "{msg}"),
            CliError::GradcheckFailed(names) => {
                write!(f, "gradient check failed for: {}", names.join(", "))
            }
        }
    }
}

impl From<uda_core::Error> for CliError {
    fn from(e: uda_core::Error) -> Self {
        match e {
            uda_core::Error::Config(msg) => CliError::Usage(format!("config: {msg}")),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// A source/target dataset pair, either synthetic or loaded from CSV.
///
/// Text form: `kind:key=value,key=value`, e.g.
/// `moons:rotation=30,noise=0.1,per-class=200`,
/// `gauss:classes=3,dim=2,translate=2.0`, or
/// `csv:source=a.csv,target=b.csv`.
#[derive(Debug, Clone, PartialEq)]
pub enum PairSpec {
    Gauss {
        classes: usize,
        per_class: usize,
        dim: usize,
        /// Added to every coordinate of every target point.
        translate: f64,
        /// Degrees, applied in the first two dimensions.
        rotate: f64,
        scale: f64,
    },
    Moons {
        per_class: usize,
        noise: f64,
        /// Degrees.
        rotation: f64,
    },
    Csv {
        source: PathBuf,
        target: PathBuf,
    },
}

fn parse_kv(body: &str) -> CliResult<Vec<(&str, &str)>> {
    let mut out = Vec::new();
    for part in body.split(',').filter(|p| !p.is_empty()) {
        let (k, v) = part.split_once('=').ok_or_else(|| {
            CliError::Usage(format!("pair spec: expected key=value, got '{part}'"))
        })?;
        out.push((k.trim(), v.trim()));
    }
    Ok(out)
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> CliResult<T> {
    v.parse()
        .map_err(|_| CliError::Usage(format!("pair spec: bad value '{v}' for '{key}'")))
}

impl std::str::FromStr for PairSpec {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        let (kind, body) = s.split_once(':').unwrap_or((s, ""));
        match kind.trim() {
            "gauss" => {
                let mut spec = PairSpec::Gauss {
                    classes: 3,
                    per_class: 100,
                    dim: 2,
                    translate: 0.0,
                    rotate: 0.0,
                    scale: 1.0,
                };
                if let PairSpec::Gauss {
                    classes,
                    per_class,
                    dim,
                    translate,
                    rotate,
                    scale,
                } = &mut spec
                {
                    for (k, v) in parse_kv(body)? {
                        match k {
                            "classes" => *classes = parse_num(k, v)?,
                            "per-class" => *per_class = parse_num(k, v)?,
                            "dim" => *dim = parse_num(k, v)?,
                            "translate" => *translate = parse_num(k, v)?,
                            "rotate" => *rotate = parse_num(k, v)?,
                            "scale" => *scale = parse_num(k, v)?,
                            other => {
                                return Err(CliError::Usage(format!(
                                    "pair spec: unknown gauss key '{other}'"
                                )))
                            }
                        }
                    }
                }
                Ok(spec)
            }
            "moons" => {
                let (mut per_class, mut noise, mut rotation) = (200usize, 0.1f64, 30.0f64);
                for (k, v) in parse_kv(body)? {
                    match k {
                        "per-class" => per_class = parse_num(k, v)?,
                        "noise" => noise = parse_num(k, v)?,
                        "rotation" => rotation = parse_num(k, v)?,
                        other => {
                            return Err(CliError::Usage(format!(
                                "pair spec: unknown moons key '{other}'"
                            )))
                        }
                    }
                }
                Ok(PairSpec::Moons {
                    per_class,
                    noise,
                    rotation,
                })
            }
            "csv" => {
                let (mut source, mut target) = (None, None);
                for (k, v) in parse_kv(body)? {
                    match k {
                        "source" => source = Some(PathBuf::from(v)),
                        "target" => target = Some(PathBuf::from(v)),
                        other => {
                            return Err(CliError::Usage(format!(
                                "pair spec: unknown csv key '{other}'"
                            )))
                        }
                    }
                }
                match (source, target) {
                    (Some(source), Some(target)) => Ok(PairSpec::Csv { source, target }),
                    _ => Err(CliError::Usage(
                        "pair spec: csv needs source=PATH,target=PATH".into(),
                    )),
                }
            }
            other => Err(CliError::Usage(format!(
                "pair spec: unknown kind '{other}' (expected gauss, moons, or csv)"
            ))),
        }
    }
}

impl fmt::Display for PairSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PairSpec::Gauss {
                classes,
                per_class,
                dim,
                translate,
                rotate,
                scale,
            } => write!(
                f,
                "gauss:classes={classes},per-class={per_class},dim={dim},translate={translate},rotate={rotate},scale={scale}"
            ),
            PairSpec::Moons {
                per_class,
                noise,
                rotation,
            } => write!(f, "moons:per-class={per_class},noise={noise},rotation={rotation}"),
            PairSpec::Csv { source, target } => write!(
                f,
                "csv:source={},target={}",
                source.display(),
                target.display()
            ),
        }
    }
}

impl PairSpec {
    /// Filesystem-safe identifier derived from the spec text.
    pub fn slug(&self) -> String {
        let mut slug = String::new();
        for ch in self.to_string().chars() {
            if ch.is_ascii_alphanumeric() {
                slug.push(ch);
            } else if !slug.ends_with('-') {
                slug.push('-');
            }
        }
        slug.trim_matches('-').to_string()
    }
}

/// Owned datasets for one run: train pair plus held-out evaluation sets.
pub struct DomainData {
    pub source_train: FeatureDataset,
    pub target_train: FeatureDataset,
    pub source_test: FeatureDataset,
    pub target_test: Option<FeatureDataset>,
}

impl DomainData {
    /// Borrowed view handed to the trainer; the training-side target has no
    /// labels by type.
    pub fn run_data(&self) -> RunData<'_> {
        RunData {
            source_train: &self.source_train,
            target_train: self.target_train.unlabeled(),
            source_test: &self.source_test,
            target_test: self.target_test.as_ref(),
        }
    }
}

fn sniff_label_column(path: &Path) -> CliResult<bool> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let header = text.lines().next().unwrap_or("");
    Ok(header.split(',').next_back() == Some("label"))
}

/// Instantiate the datasets for a pair spec. Synthetic pairs draw train and
/// test sets from independent seeded streams; CSV pairs evaluate the source
/// on itself and evaluate on the target only when its file carries labels.
pub fn materialize(pair: &PairSpec, seed: u64) -> CliResult<DomainData> {
    let train_seed = rng::derive(seed, "train-draw");
    let test_seed = rng::derive(seed, "test-draw");
    match pair {
        PairSpec::Gauss {
            classes,
            per_class,
            dim,
            translate,
            rotate,
            scale,
        } => {
            let shift = ShiftSpec {
                rotation: rotate.to_radians(),
                translation: vec![*translate; *dim],
                scale: *scale,
            };
            let (source_train, target_train) =
                gen_gaussian_shift(*classes, *per_class, *dim, &shift, train_seed)?;
            let (source_test, target_test) =
                gen_gaussian_shift(*classes, *per_class, *dim, &shift, test_seed)?;
            Ok(DomainData {
                source_train,
                target_train,
                source_test,
                target_test: Some(target_test),
            })
        }
        PairSpec::Moons {
            per_class,
            noise,
            rotation,
        } => {
            let rot = rotation.to_radians();
            let (source_train, target_train) =
                gen_two_moons_shift(*per_class, *noise, rot, train_seed)?;
            let (source_test, target_test) =
                gen_two_moons_shift(*per_class, *noise, rot, test_seed)?;
            Ok(DomainData {
                source_train,
                target_train,
                source_test,
                target_test: Some(target_test),
            })
        }
        PairSpec::Csv { source, target } => {
            let source_train = load_csv(source, true)?;
            let target_labeled = sniff_label_column(target)?;
            let target_train = load_csv(target, target_labeled)?;
            Ok(DomainData {
                source_test: source_train.clone(),
                target_test: if target_labeled {
                    Some(target_train.clone())
                } else {
                    None
                },
                source_train,
                target_train,
            })
        }
    }
}

/// Serialize epoch records as JSON lines and write them atomically.
pub fn write_metrics(path: &Path, records: &[EpochRecord]) -> CliResult<()> {
    let mut body = String::new();
    for r in records {
        body.push_str(&serde_json::to_string(r).map_err(|e| CliError::Runtime(e.to_string()))?);
        body.push('\n');
    }
    write_atomic(path, body.as_bytes())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Read a metrics file back into epoch records.
pub fn read_metrics(path: &Path) -> CliResult<Vec<EpochRecord>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let record: EpochRecord = serde_json::from_str(line)
            .map_err(|e| CliError::Runtime(format!("{}: line {}: {e}", path.display(), i + 1)))?;
        out.push(record);
    }
    Ok(out)
}

/// One fully resolved experiment.
pub struct ExperimentSpec {
    pub config: TrainConfig,
    pub arch: ArchConfig,
    pub pair: PairSpec,
    pub out: PathBuf,
    pub save_params: Option<PathBuf>,
}

/// Train once and persist the per-epoch metrics; returns the records.
pub fn run_experiment(exp: &ExperimentSpec) -> CliResult<Vec<EpochRecord>> {
    exp.config.validate()?;
    let data = materialize(&exp.pair, exp.config.seed)?;
    let output = run_training(&exp.config, &exp.arch, &data.run_data())?;
    write_metrics(&exp.out, &output.records)?;
    if let Some(path) = &exp.save_params {
        save_checkpoint(path, &output.classifier, output.discriminator.as_ref())?;
    }
    Ok(output.records)
}

/// Partial hyperparameter overrides layered on top of per-method defaults.
#[derive(Debug, Clone, Default)]
pub struct ConfigOverrides {
    pub epochs: Option<usize>,
    pub source_batch: Option<usize>,
    pub target_batch: Option<usize>,
    pub lr: Option<f64>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    pub lambda: Option<f64>,
    pub lambda_schedule: Option<String>,
    pub lr_schedule: Option<String>,
    pub lr_gamma: Option<f64>,
    pub seed: Option<u64>,
    pub tap: Option<String>,
}

impl ConfigOverrides {
    pub fn resolve(&self, method: TransferLossKind) -> CliResult<TrainConfig> {
        let mut cfg = TrainConfig::defaults_for(method);
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.source_batch {
            cfg.source_batch = v;
        }
        if let Some(v) = self.target_batch {
            cfg.target_batch = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.momentum {
            cfg.momentum = v;
        }
        if let Some(v) = self.weight_decay {
            cfg.weight_decay = v;
        }
        if let Some(kind) = &self.lambda_schedule {
            let base = self.lambda.unwrap_or(cfg.lambda.base());
            cfg.lambda = match kind.as_str() {
                "constant" => LambdaSchedule::Constant(base),
                "inverse-epoch" => LambdaSchedule::InverseEpoch(base),
                other => {
                    return Err(CliError::Usage(format!(
                        "unknown lambda schedule '{other}' (expected constant or inverse-epoch)"
                    )))
                }
            };
        } else if let Some(base) = self.lambda {
            cfg.lambda = match cfg.lambda {
                LambdaSchedule::Constant(_) => LambdaSchedule::Constant(base),
                LambdaSchedule::InverseEpoch(_) => LambdaSchedule::InverseEpoch(base),
            };
        }
        if let Some(kind) = &self.lr_schedule {
            cfg.lr_schedule = match kind.as_str() {
                "fixed" => LrSchedule::Fixed,
                "inverse-decay" => LrSchedule::InverseDecay {
                    gamma: self.lr_gamma.unwrap_or(0.1),
                },
                other => {
                    return Err(CliError::Usage(format!(
                        "unknown lr schedule '{other}' (expected fixed or inverse-decay)"
                    )))
                }
            };
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(tap) = &self.tap {
            cfg.tap = tap.parse::<Tap>()?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parse a comma-separated list of layer widths; "none" yields an empty list.
pub fn parse_widths(text: &str) -> CliResult<Vec<usize>> {
    if text.trim().eq_ignore_ascii_case("none") || text.trim().is_empty() {
        return Ok(Vec::new());
    }
    text.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| CliError::Usage(format!("bad layer width '{p}'")))
        })
        .collect()
}

/// Mean plus sample standard deviation of one (method, pair) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryCell {
    pub mean: f64,
    pub std: f64,
    pub seeds: usize,
    pub failed: bool,
}

/// Final-epoch target accuracy aggregated over seeds, methods as rows and
/// pairs as columns.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryTable {
    pub methods: Vec<TransferLossKind>,
    pub pairs: Vec<String>,
    pub cells: Vec<Vec<SummaryCell>>,
    pub seeds: Vec<u64>,
}

impl SummaryTable {
    pub fn cell(&self, method: TransferLossKind, pair_index: usize) -> Option<&SummaryCell> {
        let row = self.methods.iter().position(|&m| m == method)?;
        self.cells.get(row)?.get(pair_index)
    }

    pub fn any_failed(&self) -> bool {
        self.cells.iter().flatten().any(|c| c.failed)
    }

    /// Aligned plain-text rendering.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let name_w = self
            .methods
            .iter()
            .map(|m| m.name().len())
            .max()
            .unwrap_or(6)
            .max(6);
        let col_w = 22usize;
        out.push_str(&format!("{:<name_w$}", "method"));
        for p in &self.pairs {
            let short = if p.len() > col_w { &p[..col_w] } else { p };
            out.push_str(&format!(" | {short:<col_w$}"));
        }
        out.push('\n');
        for (row, method) in self.methods.iter().enumerate() {
            out.push_str(&format!("{:<name_w$}", method.name()));
            for cell in &self.cells[row] {
                let text = if cell.failed {
                    "FAILED".to_string()
                } else {
                    format!("{:.4} ± {:.4} ({})", cell.mean, cell.std, cell.seeds)
                };
                out.push_str(&format!(" | {text:<col_w$}"));
            }
            out.push('\n');
        }
        out
    }

    /// CSV rendering: `method,pair,mean_acc,std_acc,seeds`.
    pub fn render_csv(&self) -> String {
        let mut out = String::from("method,pair,mean_acc,std_acc,seeds\n");
        for (row, method) in self.methods.iter().enumerate() {
            for (col, pair) in self.pairs.iter().enumerate() {
                let cell = &self.cells[row][col];
                if cell.failed {
                    out.push_str(&format!("{},{},,,{}\n", method.name(), pair, cell.seeds));
                } else {
                    out.push_str(&format!(
                        "{},{},{},{},{}\n",
                        method.name(),
                        pair,
                        cell.mean,
                        cell.std,
                        cell.seeds
                    ));
                }
            }
        }
        out
    }
}

/// A full benchmark sweep: every method on every pair over every seed.
pub struct BenchmarkSpec {
    pub methods: Vec<TransferLossKind>,
    pub pairs: Vec<PairSpec>,
    pub seeds: Vec<u64>,
    pub overrides: ConfigOverrides,
    pub arch: ArchConfig,
    pub out_dir: PathBuf,
}

/// Path of one run's metrics file inside the benchmark output directory.
pub fn metrics_path(
    out_dir: &Path,
    method: TransferLossKind,
    pair: &PairSpec,
    seed: u64,
) -> PathBuf {
    out_dir.join("metrics").join(format!(
        "{}__{}__seed{}.jsonl",
        method.name(),
        pair.slug(),
        seed
    ))
}

/// Run the sweep (in parallel when the `parallel` feature is on), then build
/// the summary from the persisted metrics files, and write the text and CSV
/// renderings next to them. Any failed run marks its cell and the sweep as
/// failed; the caller maps that to a non-zero exit.
pub fn run_benchmark(spec: &BenchmarkSpec) -> CliResult<SummaryTable> {
    if spec.methods.is_empty() || spec.pairs.is_empty() || spec.seeds.is_empty() {
        return Err(CliError::Usage(
            "benchmark needs at least one method, one pair, and one seed".into(),
        ));
    }
    // duplicate entries would race distinct writers on one metrics path (and
    // add nothing: runs are deterministic), so each job runs once
    let mut jobs = Vec::new();
    for method in &spec.methods {
        for pair in &spec.pairs {
            for &seed in &spec.seeds {
                let job = (*method, pair.clone(), seed);
                if !jobs.contains(&job) {
                    jobs.push(job);
                }
            }
        }
    }

    let execute = |(method, pair, seed): &(TransferLossKind, PairSpec, u64)| -> Option<String> {
        let mut overrides = spec.overrides.clone();
        overrides.seed = Some(*seed);
        let config = match overrides.resolve(*method) {
            Ok(c) => c,
            Err(e) => return Some(e.to_string()),
        };
        let exp = ExperimentSpec {
            config,
            arch: spec.arch.clone(),
            pair: pair.clone(),
            out: metrics_path(&spec.out_dir, *method, pair, *seed),
            save_params: None,
        };
        run_experiment(&exp).err().map(|e| e.to_string())
    };

    #[cfg(feature = "parallel")]
    let failures: Vec<Option<String>> = jobs.par_iter().map(execute).collect();
    #[cfg(not(feature = "parallel"))]
    let failures: Vec<Option<String>> = jobs.iter().map(execute).collect();

    for (job, failure) in jobs.iter().zip(&failures) {
        if let Some(msg) = failure {
            eprintln!(
                "run failed: method={} pair={} seed={}: {msg}",
                job.0.name(),
                job.1,
                job.2
            );
        }
    }

    let table = summary_from_metrics(spec)?;
    write_atomic(
        &spec.out_dir.join("summary.txt"),
        table.render_text().as_bytes(),
    )?;
    write_atomic(
        &spec.out_dir.join("summary.csv"),
        table.render_csv().as_bytes(),
    )?;
    Ok(table)
}

/// Rebuild the summary table purely from the metrics files on disk.
pub fn summary_from_metrics(spec: &BenchmarkSpec) -> CliResult<SummaryTable> {
    let mut cells = Vec::with_capacity(spec.methods.len());
    for method in &spec.methods {
        let mut row = Vec::with_capacity(spec.pairs.len());
        for pair in &spec.pairs {
            let mut finals = Vec::new();
            let mut failed = false;
            for &seed in &spec.seeds {
                let path = metrics_path(&spec.out_dir, *method, pair, seed);
                match read_metrics(&path) {
                    Ok(records) => match records.last().and_then(|r| r.tgt_test_acc) {
                        Some(acc) => finals.push(acc),
                        None => failed = true,
                    },
                    Err(_) => failed = true,
                }
            }
            let n = finals.len();
            let mean = if n > 0 {
                finals.iter().sum::<f64>() / n as f64
            } else {
                f64::NAN
            };
            let std = if n > 1 {
                (finals.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            row.push(SummaryCell {
                mean,
                std,
                seeds: n,
                failed: failed || n == 0,
            });
        }
        cells.push(row);
    }
    Ok(SummaryTable {
        methods: spec.methods.clone(),
        pairs: spec.pairs.iter().map(|p| p.to_string()).collect(),
        cells,
        seeds: spec.seeds.clone(),
    })
}

/// Run the gradient-check suite and render one line per check.
pub fn run_gradcheck(seed: u64, trials: usize) -> CliResult<SuiteReport> {
    let report = run_suite(seed, trials)?;
    Ok(report)
}

/// Materialize a synthetic pair to `source.csv` / `target.csv` (labels
/// included on both; target labels exist for evaluation).
pub fn generate_data(pair: &PairSpec, seed: u64, out_dir: &Path) -> CliResult<(PathBuf, PathBuf)> {
    if matches!(pair, PairSpec::Csv { .. }) {
        return Err(CliError::Usage(
            "gen-data expects a synthetic pair spec (gauss:... or moons:...)".into(),
        ));
    }
    let data = materialize(pair, seed)?;
    std::fs::create_dir_all(out_dir)?;
    let src_path = out_dir.join(format!("{}__source.csv", pair.slug()));
    let tgt_path = out_dir.join(format!("{}__target.csv", pair.slug()));
    write_csv(&data.source_train, &src_path, true)?;
    write_csv(&data.target_train, &tgt_path, true)?;
    Ok((src_path, tgt_path))
}
