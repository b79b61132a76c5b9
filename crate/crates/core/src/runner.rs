//! End-to-end orchestration: load inputs, run the loop, cluster, score and
//! write the run bundle.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::cluster::{predict, ClusterAssignment, ClusterError};
use crate::config::{validate_config, EmbeddingSource, RunConfig};
use crate::data::{
    fetch_embeddings, load_dataset, load_embeddings, DataError, DatasetBundle, DatasetFormat, EmbeddingError,
    EmbeddingMatrix, EmbeddingServiceConfig, Mode, RemoteEmbeddingError,
};
use crate::exec::RetryPolicy;
use crate::metrics::{score_report, MetricError, ScoreReport};
use crate::oracle::{select_schema, LabelCache, OracleError, OracleSession, PromptError, PromptTemplate, SchemaSelection};
use crate::trainer::{run_loop, write_checkpoint, Adapter, IterationLog, LoopError};

pub const CONFIG_FILE: &str = "config.toml";
pub const REPORT_FILE: &str = "report.json";
pub const ASSIGNMENT_FILE: &str = "assignment.csv";
pub const ASSIGNMENT_SUMMARY_FILE: &str = "assignment.json";
pub const CHECKPOINT_FILE: &str = "adapter.ckpt";
pub const LOG_FILE: &str = "log.jsonl";

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Remote(#[from] RemoteEmbeddingError),
    #[error("prompt template {path}: {source}")]
    Template { path: String, source: PromptError },
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Loop(#[from] LoopError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("test split is empty")]
    EmptyTest,
    #[error("{0} test utterances have no label; cannot score")]
    UnlabeledTest(usize),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io { path: path.display().to_string(), source }
}

/// A dataset bundle with base embeddings aligned to its train and test
/// splits.
#[derive(Debug, Clone)]
pub struct RunInputs {
    pub bundle: DatasetBundle,
    pub train: EmbeddingMatrix,
    pub test: EmbeddingMatrix,
}

impl RunInputs {
    /// Check alignment, apply the semi-supervised split and normalization
    /// the config asks for.
    pub fn prepare(
        bundle: DatasetBundle,
        mut train: EmbeddingMatrix,
        mut test: EmbeddingMatrix,
        config: &RunConfig,
    ) -> Result<Self, RunError> {
        let train_fp = bundle.train_fingerprint();
        let test_fp = bundle.test_fingerprint();
        if train.fingerprint().is_some() {
            train.check_alignment(bundle.train.len(), train_fp)?;
        } else if train.n_rows() != bundle.train.len() {
            return Err(EmbeddingError::RowCount { expected: bundle.train.len(), found: train.n_rows() }.into());
        }
        if test.fingerprint().is_some() {
            test.check_alignment(bundle.test.len(), test_fp)?;
        } else if test.n_rows() != bundle.test.len() {
            return Err(EmbeddingError::RowCount { expected: bundle.test.len(), found: test.n_rows() }.into());
        }
        if config.normalize {
            train.normalize()?;
            test.normalize()?;
        }
        let bundle = match (config.mode, config.kcr) {
            (Mode::SemiSupervised, Some(kcr)) => {
                bundle.into_semi_supervised(kcr, config.labeled_fraction, config.split_seed())?
            }
            _ => bundle,
        };
        Ok(Self { bundle, train: train.with_fingerprint(train_fp), test: test.with_fingerprint(test_fp) })
    }

    /// Load the dataset and embeddings named by the config.
    pub fn load(config: &RunConfig) -> Result<Self, RunError> {
        let path = &config.dataset.path;
        let format = config
            .dataset
            .format
            .or_else(|| DatasetFormat::from_path(path))
            .unwrap_or(DatasetFormat::Tsv);
        let bundle = load_dataset(path, format)?;
        let (train, test) = match &config.embeddings {
            EmbeddingSource::File { train, test } => (
                load_embeddings(train, bundle.train.len(), false)?,
                load_embeddings(test, bundle.test.len(), false)?,
            ),
            EmbeddingSource::Service { endpoint, cache_path, api_key_env, batch_size, parallelism } => {
                let service = EmbeddingServiceConfig {
                    batch_size: *batch_size,
                    parallelism: *parallelism,
                    retry: RetryPolicy::default(),
                };
                let key = std::env::var(api_key_env).ok();
                let fetch = |utts: &[crate::data::Utterance]| {
                    let texts: Vec<String> = utts.iter().map(|u| u.text.clone()).collect();
                    fetch_embeddings(endpoint, &texts, service.clone(), cache_path.as_deref(), key.clone())
                };
                (fetch(&bundle.train)?, fetch(&bundle.test)?)
            }
        };
        Self::prepare(bundle, train, test, config)
    }
}

/// One line of `log.jsonl`.
#[derive(Debug, Clone, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogRecord {
    Iteration(IterationLog),
    Summary(RunSummary),
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub kind: &'static str,
    pub variant: &'static str,
    pub mode: Mode,
    pub knn_sampler_invoked: bool,
    pub density_sampler_invoked: bool,
    pub iterations: usize,
    pub epochs_trained: usize,
    pub final_df_size: usize,
    pub oracle_failures: usize,
    pub schema_selection: Option<SchemaSelection>,
    pub report: ScoreReport,
}

/// Everything a run produced, before or after it is written to disk.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub report: ScoreReport,
    pub assignment: ClusterAssignment,
    pub adapter: Adapter,
    pub log: Vec<IterationLog>,
    pub summary: RunSummary,
    /// The seeded config actually used.
    pub config: RunConfig,
}

impl RunResult {
    pub fn report_json(&self) -> String {
        report_json(&self.report)
    }
}

pub fn report_json(report: &ScoreReport) -> String {
    serde_json::to_string_pretty(report).expect("report serializes")
}

fn load_templates(config: &RunConfig) -> Result<Vec<PromptTemplate>, RunError> {
    if config.templates.is_empty() {
        return Ok(vec![PromptTemplate::default()]);
    }
    config
        .templates
        .iter()
        .map(|path| {
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            PromptTemplate::parse(&text)
                .map_err(|source| RunError::Template { path: path.display().to_string(), source })
        })
        .collect()
}

/// Run the full pipeline on prepared inputs without touching the disk
/// (apart from the oracle label cache, when one is configured). With
/// `train.epochs == 0` no pairs are sampled and the identity-initialized
/// adapter is used, which is the baseline.
pub fn execute(config: &RunConfig, inputs: &RunInputs) -> Result<RunResult, RunError> {
    let mut config = config.seeded();
    let bundle = &inputs.bundle;
    if bundle.test.is_empty() {
        return Err(RunError::EmptyTest);
    }
    let truth = bundle
        .test_label_ids()
        .ok_or_else(|| RunError::UnlabeledTest(bundle.test.iter().filter(|u| u.label.is_none()).count()))?;
    let k = config.k.unwrap_or_else(|| truth.iter().max().map_or(1, |m| m + 1));
    config.k = Some(k);
    let baseline = config.train.epochs == 0;

    let (adapter, log, schema_selection) = if baseline {
        let adapter = Adapter::new(config.train.adapter, inputs.train.dim(), config.train.hidden_dim, config.train.seed);
        (adapter, Vec::new(), None)
    } else {
        let templates = load_templates(&config)?;
        let backend = config.oracle.backend()?;
        let selection = if templates.len() > 1 {
            match select_schema(&templates, bundle, backend.as_ref(), &config.oracle) {
                Ok(selection) => Some(selection),
                Err(OracleError::RequiresLabels) => {
                    tracing::info!("schema selection requires labels; using the first template");
                    None
                }
                Err(other) => return Err(other.into()),
            }
        } else {
            None
        };
        let template = selection.as_ref().map_or(&templates[0], |s| &s.template);
        let cache = match &config.oracle.cache_path {
            Some(path) => LabelCache::open(path).map_err(io_err(path))?,
            None => LabelCache::in_memory(),
        };
        let session = OracleSession { template, backend: backend.as_ref(), cache: &cache, config: &config.oracle };
        let outcome = run_loop(bundle, &inputs.train, config.variant, &config.sampler, &session, &config.train)?;
        (outcome.adapter, outcome.log, selection)
    };

    let assignment = predict(&adapter, &inputs.test, k, config.kmeans_seed(), &config.cluster)?;
    let report = score_report(&assignment.labels, &truth, k)?;
    tracing::info!(nmi = report.nmi, ari = report.ari, acc = report.acc, k, "scored clustering");
    let summary = RunSummary {
        kind: if baseline { "baseline" } else { "experiment" },
        variant: config.variant.name(),
        mode: bundle.mode(),
        knn_sampler_invoked: log.iter().any(|l| l.knn_invoked),
        density_sampler_invoked: log.iter().any(|l| l.density_invoked),
        iterations: log.len(),
        epochs_trained: log.iter().map(|l| l.epochs.len()).sum(),
        final_df_size: log.last().map_or(0, |l| l.df_size),
        oracle_failures: log.iter().map(|l| l.failed).sum(),
        schema_selection,
        report,
    };
    Ok(RunResult { report, assignment, adapter, log, summary, config })
}

fn run_id(config: &RunConfig) -> String {
    let now = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
    format!("{}-{:016x}", now.as_secs(), config.hash() ^ u64::from(now.subsec_nanos()))
}

/// Write the run bundle into a fresh directory under `output_dir`.
pub fn write_artifacts(result: &RunResult, output_dir: &Path) -> Result<PathBuf, RunError> {
    fs::create_dir_all(output_dir).map_err(io_err(output_dir))?;
    let base_id = run_id(&result.config);
    let mut dir = output_dir.join(&base_id);
    let mut attempt = 1;
    loop {
        match fs::create_dir(&dir) {
            Ok(()) => break,
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                dir = output_dir.join(format!("{base_id}-{attempt}"));
                attempt += 1;
            }
            Err(e) => return Err(io_err(&dir)(e)),
        }
    }
    let write = |name: &str, body: &dyn Fn(&mut BufWriter<File>) -> std::io::Result<()>| -> Result<(), RunError> {
        let path = dir.join(name);
        let mut out = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
        body(&mut out).and_then(|()| out.flush()).map_err(io_err(&path))
    };
    write(CONFIG_FILE, &|out| out.write_all(result.config.to_toml_string().as_bytes()))?;
    write(REPORT_FILE, &|out| writeln!(out, "{}", result.report_json()))?;
    write(ASSIGNMENT_FILE, &|out| result.assignment.write_csv(&mut *out))?;
    write(ASSIGNMENT_SUMMARY_FILE, &|out| {
        writeln!(out, "{}", serde_json::to_string_pretty(&result.assignment.summary_json()).expect("json"))
    })?;
    write(CHECKPOINT_FILE, &|out| write_checkpoint(&result.adapter, result.config.hash(), &mut *out))?;
    write(LOG_FILE, &|out| {
        for entry in &result.log {
            writeln!(out, "{}", serde_json::to_string(&LogRecord::Iteration(entry.clone())).expect("json"))?;
        }
        writeln!(out, "{}", serde_json::to_string(&LogRecord::Summary(result.summary.clone())).expect("json"))
    })?;
    tracing::info!(dir = %dir.display(), "wrote run artifacts");
    Ok(dir)
}

fn checked(config: &RunConfig) -> Result<(), RunError> {
    let violations = validate_config(config);
    if violations.is_empty() {
        Ok(())
    } else {
        Err(RunError::Invalid(violations))
    }
}

/// Validate, load, run the loop, cluster, score and write the run bundle.
/// Returns the result and the run directory.
pub fn run_experiment(config: &RunConfig) -> Result<(RunResult, PathBuf), RunError> {
    checked(config)?;
    let inputs = RunInputs::load(config)?;
    let result = execute(config, &inputs)?;
    let dir = write_artifacts(&result, &config.output_dir)?;
    Ok((result, dir))
}

/// Cluster the unadapted embeddings: the same pipeline with zero epochs.
pub fn run_baseline(config: &RunConfig) -> Result<(RunResult, PathBuf), RunError> {
    checked(config)?;
    let mut baseline = config.clone();
    baseline.train.epochs = 0;
    let inputs = RunInputs::load(&baseline)?;
    let result = execute(&baseline, &inputs)?;
    let dir = write_artifacts(&result, &config.output_dir)?;
    Ok((result, dir))
}

/// Read the report of a finished run.
pub fn read_report(run_dir: &Path) -> Result<ScoreReport, RunError> {
    let path = run_dir.join(REPORT_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| io_err(&path)(std::io::Error::new(std::io::ErrorKind::InvalidData, e)))
}
