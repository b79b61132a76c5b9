use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use tracing_subscriber::EnvFilter;

use lanid_core::config::{validate_config, EmbeddingSource, Preset, RunConfig, Variant};
use lanid_core::data::Mode;
use lanid_core::oracle::ProviderKind;
use lanid_core::runner::{self, RunResult, LOG_FILE};
use lanid_core::synthetic::{generate, SyntheticSpec};
use lanid_core::trainer::AdapterKind;

#[derive(Parser)]
#[command(name = "lanid", version, about = "Intent discovery with LLM-labelled pair feedback")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the sampling / labelling / training loop, then cluster and score.
    Run(ConfigArgs),
    /// Cluster the unadapted embeddings with the same pipeline.
    Baseline(ConfigArgs),
    /// Print every config violation; exits 1 if there are any.
    Validate(ConfigArgs),
    /// Print the scores of finished runs.
    Report {
        /// Run directories.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Print the raw report JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Write a synthetic dataset, its embeddings and a matching config.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 6)]
        clusters: usize,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 60)]
        per_cluster: usize,
        #[arg(long, default_value_t = 4.0)]
        separation: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn enum_arg<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_"))).map_err(|e| e.to_string())
}

fn eps_arg(s: &str) -> Result<Option<f64>, String> {
    if s.eq_ignore_ascii_case("auto") {
        return Ok(None);
    }
    s.parse::<f64>().map(Some).map_err(|e| format!("expected a number or `auto`: {e}"))
}

/// Config file, preset and flag overrides. Flags win over the file, the file
/// wins over the preset.
#[derive(Args, Default)]
struct ConfigArgs {
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// banking, stackoverflow or mcid.
    #[arg(long)]
    preset: Option<Preset>,

    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    train_embeddings: Option<PathBuf>,
    #[arg(long)]
    test_embeddings: Option<PathBuf>,
    /// Embedding service endpoint; switches the source to the service.
    #[arg(long)]
    embedding_endpoint: Option<String>,
    #[arg(long)]
    normalize: Option<bool>,
    /// unsupervised or semi_supervised.
    #[arg(long, value_parser = enum_arg::<Mode>)]
    mode: Option<Mode>,
    #[arg(long)]
    kcr: Option<f64>,
    #[arg(long)]
    labeled_fraction: Option<f64>,
    /// lanid_near, lanid_dbscan or lanid_both.
    #[arg(long)]
    variant: Option<Variant>,
    /// Number of clusters.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Candidate prompt template file; repeat for several.
    #[arg(long = "template")]
    templates: Vec<PathBuf>,

    #[arg(long)]
    knn_k: Option<usize>,
    #[arg(long)]
    sample_frac: Option<f64>,
    #[arg(long)]
    nk: Option<usize>,
    #[arg(long)]
    density_m: Option<usize>,
    #[arg(long)]
    min_pts: Option<usize>,
    /// DBSCAN radius, or `auto`.
    #[arg(long, value_parser = eps_arg)]
    eps: Option<Option<f64>>,
    #[arg(long)]
    eps_quantile: Option<f64>,

    /// llm or simulated.
    #[arg(long, value_parser = enum_arg::<ProviderKind>)]
    provider: Option<ProviderKind>,
    #[arg(long)]
    labeled_shortcut: Option<bool>,
    #[arg(long)]
    llm_endpoint: Option<String>,
    #[arg(long)]
    model_name: Option<String>,
    #[arg(long)]
    api_key_env: Option<String>,
    #[arg(long)]
    noise_rate: Option<f64>,
    #[arg(long)]
    max_retries: Option<u32>,
    #[arg(long)]
    retry_base_delay_ms: Option<u64>,
    #[arg(long)]
    request_parallelism: Option<usize>,
    #[arg(long)]
    max_prompt_chars: Option<usize>,
    #[arg(long)]
    label_cache: Option<PathBuf>,
    #[arg(long)]
    selection_pairs: Option<usize>,

    #[arg(long)]
    kn: Option<usize>,
    #[arg(long)]
    margin: Option<f64>,
    /// Epochs between sampling rounds.
    #[arg(long)]
    resample_period: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// linear or residual.
    #[arg(long, value_parser = enum_arg::<AdapterKind>)]
    adapter: Option<AdapterKind>,
    #[arg(long)]
    hidden_dim: Option<usize>,

    #[arg(long)]
    kmeans_max_iter: Option<usize>,
    #[arg(long)]
    kmeans_tol: Option<f64>,
    #[arg(long)]
    kmeans_restarts: Option<usize>,
}

macro_rules! set {
    ($($flag:expr => $field:expr),* $(,)?) => {
        $(if let Some(v) = $flag.clone() { $field = v; })*
    };
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut config = match (&self.config, self.preset) {
            (Some(path), preset) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                let mut table: toml::Table = text.parse().with_context(|| format!("parsing {}", path.display()))?;
                if let Some(preset) = preset {
                    table.insert("preset".into(), preset.name().into());
                }
                let mut config = RunConfig::from_toml_str(&table.to_string())?;
                config.resolve_paths(path.parent().unwrap_or(Path::new("")));
                config
            }
            (None, Some(preset)) => RunConfig::from_preset(preset),
            (None, None) => RunConfig::default(),
        };
        self.apply(&mut config);
        Ok(config)
    }

    fn apply(&self, c: &mut RunConfig) {
        set! {
            self.dataset => c.dataset.path,
            self.normalize => c.normalize,
            self.mode => c.mode,
            self.labeled_fraction => c.labeled_fraction,
            self.variant => c.variant,
            self.seed => c.master_seed,
            self.output_dir => c.output_dir,
            self.knn_k => c.sampler.k,
            self.sample_frac => c.sampler.p,
            self.nk => c.sampler.n_k,
            self.density_m => c.sampler.m,
            self.min_pts => c.sampler.min_pts,
            self.eps => c.sampler.eps,
            self.eps_quantile => c.sampler.eps_quantile,
            self.provider => c.oracle.provider,
            self.labeled_shortcut => c.oracle.labeled_shortcut,
            self.model_name => c.oracle.model_name,
            self.api_key_env => c.oracle.api_key_env,
            self.noise_rate => c.oracle.noise_rate,
            self.max_retries => c.oracle.max_retries,
            self.retry_base_delay_ms => c.oracle.retry_base_delay_ms,
            self.request_parallelism => c.oracle.request_parallelism,
            self.max_prompt_chars => c.oracle.max_prompt_chars,
            self.selection_pairs => c.oracle.selection_pairs,
            self.kn => c.train.k_n,
            self.margin => c.train.margin,
            self.resample_period => c.train.resample_period,
            self.epochs => c.train.epochs,
            self.learning_rate => c.train.learning_rate,
            self.batch_size => c.train.batch_size,
            self.adapter => c.train.adapter,
            self.hidden_dim => c.train.hidden_dim,
            self.kmeans_max_iter => c.cluster.max_iter,
            self.kmeans_tol => c.cluster.tol,
            self.kmeans_restarts => c.cluster.restarts,
        }
        if self.kcr.is_some() {
            c.kcr = self.kcr;
        }
        if self.k.is_some() {
            c.k = self.k;
        }
        if self.llm_endpoint.is_some() {
            c.oracle.endpoint = self.llm_endpoint.clone();
        }
        if self.label_cache.is_some() {
            c.oracle.cache_path = self.label_cache.clone();
        }
        if !self.templates.is_empty() {
            c.templates = self.templates.clone();
        }
        if let Some(endpoint) = &self.embedding_endpoint {
            match &mut c.embeddings {
                EmbeddingSource::Service { endpoint: e, .. } => *e = endpoint.clone(),
                source => {
                    *source = EmbeddingSource::Service {
                        endpoint: endpoint.clone(),
                        cache_path: None,
                        api_key_env: "LANID_EMBEDDING_API_KEY".into(),
                        batch_size: 64,
                        parallelism: 4,
                    }
                }
            }
        }
        if self.train_embeddings.is_some() || self.test_embeddings.is_some() {
            if !matches!(c.embeddings, EmbeddingSource::File { .. }) {
                c.embeddings = EmbeddingSource::default();
            }
            if let EmbeddingSource::File { train, test } = &mut c.embeddings {
                set! { self.train_embeddings => *train, self.test_embeddings => *test }
            }
        }
    }
}

fn print_result(result: &RunResult, dir: &Path) {
    let r = &result.report;
    println!("run directory: {}", dir.display());
    println!(
        "{} {}: nmi {:.4}  ari {:.4}  acc {:.4}  (k={}, n={}, {} rounds, {} triplets)",
        result.summary.kind,
        result.summary.variant,
        r.nmi,
        r.ari,
        r.acc,
        r.k,
        r.n,
        result.summary.iterations,
        result.summary.final_df_size
    );
}

fn summary_field(dir: &Path, key: &str) -> Option<String> {
    let log = std::fs::read_to_string(dir.join(LOG_FILE)).ok()?;
    let last: serde_json::Value = serde_json::from_str(log.lines().last()?).ok()?;
    last.get(key)?.as_str().map(String::from)
}

fn report(runs: &[PathBuf], json: bool) -> Result<()> {
    if !json {
        println!("{:<40} {:<9} {:<13} {:>7} {:>7} {:>7} {:>5} {:>6}", "run", "kind", "variant", "nmi", "ari", "acc", "k", "n");
    }
    for dir in runs {
        let r = runner::read_report(dir)?;
        if json {
            println!("{}", runner::report_json(&r));
            continue;
        }
        let name = dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
        let kind = summary_field(dir, "kind").unwrap_or_else(|| "-".into());
        let variant = summary_field(dir, "variant").unwrap_or_else(|| "-".into());
        println!(
            "{name:<40} {kind:<9} {variant:<13} {:>7.4} {:>7.4} {:>7.4} {:>5} {:>6}",
            r.nmi, r.ari, r.acc, r.k, r.n
        );
    }
    Ok(())
}

fn synth(out: &Path, spec: SyntheticSpec) -> Result<()> {
    if spec.dim < spec.clusters {
        bail!("--dim must be at least --clusters");
    }
    let files = generate(&spec).write_to(out)?;
    let mut config = RunConfig::from_preset(Preset::Banking);
    config.k = Some(spec.clusters);
    config.normalize = false;
    config.dataset.path = "dataset.tsv".into();
    config.embeddings = EmbeddingSource::File { train: "train.emb".into(), test: "test.emb".into() };
    config.output_dir = "runs".into();
    let config_path = out.join("config.toml");
    std::fs::write(&config_path, config.to_toml_string()).with_context(|| format!("writing {}", config_path.display()))?;
    println!("wrote {}, {}, {} and {}", files.dataset.display(), files.train_embeddings.display(), files.test_embeddings.display(), config_path.display());
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    match dispatch(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            // thiserror messages often embed their source already
            let mut msg = String::new();
            for cause in e.chain().map(ToString::to_string) {
                if !msg.contains(&cause) {
                    msg = if msg.is_empty() { cause } else { format!("{msg}: {cause}") };
                }
            }
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::Run(args) => {
            let (result, dir) = runner::run_experiment(&args.load()?)?;
            print_result(&result, &dir);
        }
        Command::Baseline(args) => {
            let (result, dir) = runner::run_baseline(&args.load()?)?;
            print_result(&result, &dir);
        }
        Command::Validate(args) => {
            let violations = validate_config(&args.load()?);
            if !violations.is_empty() {
                for v in &violations {
                    println!("{v}");
                }
                return Ok(ExitCode::FAILURE);
            }
            println!("config ok");
        }
        Command::Report { runs, json } => report(&runs, json)?,
        Command::Synth { out, clusters, dim, per_cluster, separation, seed } => {
            let spec = SyntheticSpec { clusters, dim, per_cluster, separation, seed, ..SyntheticSpec::default() };
            synth(&out, spec)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}
