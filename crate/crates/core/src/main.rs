use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use dupaudit::backend::{Backend, BackendTokenizer, HttpBackend, MockBackend, MockPlan};
use dupaudit::cache::{embed_batch, inputs_from_slice, EmbedOptions, EmbeddingCache};
use dupaudit::cluster::{
    cluster_embeddings, cluster_share, mark_noise, size_distribution, Clustering, Denominator,
    NoiseRule, ReferenceMatch, Stopwords, DEFAULT_TAU, DEFAULT_TOP_N,
};
use dupaudit::embed::{EmbeddingMatrix, Modality};
use dupaudit::ingest::{
    filter_by_keywords, load_metadata, token_length_filter, validate_urls, DatasetSlice,
    FilterSpec, MatchMode, MatchUnit, MetadataFormat, Tokenizer, UrlPolicy, WhitespaceTokenizer,
    DEFAULT_MAX_TOKENS,
};
use dupaudit::pipeline::{run_pipeline_with, PipelineConfig};
use dupaudit::probe::{
    baseline_object_rate, object_presence_rate, run_probe, ProbeMode, ProbeOptions, ProbeResult,
    ProbeSpec, ReferenceSet, DEFAULT_BUCKET_EDGES, DEFAULT_N_SEEDS,
};
use dupaudit::report::{emit_cluster_table, emit_distribution, emit_probe_table, ReportFormat};
use dupaudit::{Error, Result};

#[derive(Parser)]
#[command(name = "dupaudit", version, about = "Duplication audits and replication probes for image-text datasets")]
struct Cli {
    /// Pipeline config file (used by `pipeline`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Model service base URL, or `mock` for the in-process mock.
    #[arg(long, global = true, env = "DUPAUDIT_BACKEND_URL", default_value = "mock")]
    backend: String,

    /// JSON plan for the mock backend.
    #[arg(long, global = true)]
    mock_plan: Option<PathBuf>,

    /// Per-request timeout for the model service, in seconds.
    #[arg(long, global = true, default_value_t = 60.0)]
    timeout_secs: f64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load caption/url metadata into a slice file.
    Ingest {
        #[arg(long)]
        metadata: PathBuf,
        #[arg(long, default_value = "tsv")]
        format: MetadataFormat,
        #[arg(long)]
        out: PathBuf,
    },
    /// Keyword, token-length and URL filtering.
    Filter(FilterArgs),
    /// Embed the active records of a slice.
    Embed {
        #[arg(long)]
        slice: PathBuf,
        #[arg(long, default_value = "image")]
        modality: Modality,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        cache: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 2)]
        retries: u32,
        #[arg(long, default_value_t = 4)]
        concurrency: usize,
    },
    /// Greedy leader clustering of an embedding matrix.
    Cluster {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TAU)]
        tau: f64,
        /// Omit clusters whose coherence falls below this value.
        #[arg(long)]
        noise_below: Option<f64>,
        /// Omit these cluster ids.
        #[arg(long, value_delimiter = ',')]
        omit: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Frequent caption words of the largest clusters.
    Keywords {
        #[arg(long)]
        clusters: PathBuf,
        #[arg(long)]
        slice: PathBuf,
        #[arg(long, default_value_t = 10)]
        top_clusters: usize,
        #[arg(long, default_value_t = 10)]
        top_k: usize,
        /// `builtin`, `none` or a file with one word per line.
        #[arg(long, default_value = "builtin")]
        stopwords: String,
        #[arg(long, default_value = "text")]
        format: ReportFormat,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fraction of records in clusters matching a reference image.
    Share {
        #[arg(long)]
        clusters: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[command(flatten)]
        reference: ReferenceArgs,
        #[arg(long, default_value = "all")]
        denominator: Denominator,
    },
    /// Cluster size distribution as CSV.
    Dist {
        #[arg(long)]
        clusters: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[command(flatten)]
        reference: OptionalReferenceArgs,
        #[arg(long, default_value_t = DEFAULT_TOP_N)]
        top_n: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate one prompt under many seeds and score against references.
    Probe {
        #[arg(long)]
        prompt: String,
        /// Reference set descriptor: `{"images": PATH, "texts": PATH}`.
        #[arg(long)]
        references: PathBuf,
        #[arg(long)]
        threshold: f64,
        #[arg(long, default_value_t = DEFAULT_N_SEEDS)]
        n_seeds: usize,
        #[arg(long, default_value_t = 0)]
        base_seed: u64,
        /// Highlighted prompt words, space separated.
        #[arg(long, default_value = "")]
        keywords: String,
        /// Persist generated images here; otherwise only embeddings are requested.
        #[arg(long)]
        images_dir: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_BUCKET_EDGES)]
        edges: Vec<f64>,
        #[arg(long, default_value_t = 25)]
        batch_size: usize,
        #[arg(long, default_value_t = 2)]
        retries: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Object-presence rate over a probe's persisted images.
    Detect {
        #[arg(long)]
        probe: PathBuf,
        #[arg(long)]
        label: String,
        /// Where to write the updated probe result; defaults to `--probe`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Object-presence rate over a random sample of training images.
    Baseline {
        #[arg(long)]
        slice: PathBuf,
        #[arg(long)]
        label: String,
        #[arg(long)]
        sample_n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render cluster and probe tables.
    Report {
        #[arg(long = "probe")]
        probes: Vec<PathBuf>,
        #[arg(long)]
        clusters: Option<PathBuf>,
        #[arg(long, requires = "clusters")]
        slice: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        top_clusters: usize,
        #[arg(long, default_value_t = 10)]
        top_k: usize,
        #[arg(long, default_value = "builtin")]
        stopwords: String,
        #[arg(long, default_value = "text")]
        format: ReportFormat,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the stages listed in a config file.
    Pipeline {
        /// Config file; overrides `--config`.
        config: Option<PathBuf>,
    },
}

#[derive(Args)]
struct FilterArgs {
    #[arg(long)]
    slice: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Space separated keywords; empty keeps every record.
    #[arg(long, default_value = "")]
    keywords: String,
    #[arg(long, default_value = "all", value_parser = ["all", "any"])]
    match_mode: String,
    #[arg(long, default_value = "word", value_parser = ["word", "substring"])]
    match_unit: String,
    #[arg(long)]
    case_sensitive: bool,
    #[arg(long, default_value_t = DEFAULT_MAX_TOKENS)]
    max_tokens: usize,
    #[arg(long, default_value = "backend", value_parser = ["backend", "whitespace"])]
    tokenizer: String,
    #[arg(long)]
    no_token_filter: bool,
    #[arg(long, default_value = "offline")]
    url_policy: UrlPolicy,
    #[arg(long)]
    no_url_check: bool,
    #[arg(long, default_value_t = 5.0)]
    url_timeout_secs: f64,
    #[arg(long, default_value_t = 8)]
    parallelism: usize,
}

#[derive(Args)]
struct ReferenceArgs {
    /// Matrix holding the reference embedding.
    #[arg(long)]
    reference: PathBuf,
    /// Row id of the reference in the matrix; the first row by default.
    #[arg(long)]
    reference_id: Option<u64>,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau_ref: f64,
}

#[derive(Args)]
struct OptionalReferenceArgs {
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long)]
    reference_id: Option<u64>,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau_ref: f64,
}

fn make_backend(cli: &Cli) -> Result<Box<dyn Backend>> {
    if cli.backend == "mock" {
        let plan = match &cli.mock_plan {
            Some(p) => {
                MockPlan::from_json(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?
            }
            None => MockPlan::default(),
        };
        return Ok(Box::new(MockBackend::new(plan)));
    }
    if cli.mock_plan.is_some() {
        return Err(Error::usage("--mock-plan requires --backend mock"));
    }
    if cli.timeout_secs.is_nan() || cli.timeout_secs <= 0.0 {
        return Err(Error::usage("--timeout-secs must be positive"));
    }
    Ok(Box::new(HttpBackend::new(
        cli.backend.clone(),
        Duration::from_secs_f64(cli.timeout_secs),
    )))
}

fn stopwords(arg: &str) -> Result<Stopwords> {
    match arg {
        "builtin" => Ok(Stopwords::builtin()),
        "none" => Ok(Stopwords::none()),
        path => Stopwords::from_file(Path::new(path)),
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            std::fs::write(p, text).map_err(|e| Error::io(p, e))
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .map_err(|e| Error::io("<stdout>", e))
        }
    }
}

fn save_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    emit(Some(path), &s)
}

fn reference_vector(
    m: &EmbeddingMatrix,
    path: &Path,
    id: Option<u64>,
) -> Result<dupaudit::embed::EmbeddingVector> {
    let refs = EmbeddingMatrix::load(path)?;
    if refs.backend_id() != m.backend_id() {
        return Err(Error::usage(format!(
            "reference embedded by `{}` but clusters by `{}`",
            refs.backend_id(),
            m.backend_id()
        )));
    }
    match id {
        Some(id) => refs
            .get(id)
            .cloned()
            .ok_or_else(|| Error::usage(format!("reference id {id} not in {}", path.display()))),
        None => refs
            .vectors()
            .first()
            .cloned()
            .ok_or_else(|| Error::degenerate("reference matrix is empty")),
    }
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Ingest { metadata, format, out } => {
            let loaded = load_metadata(metadata, *format)?;
            loaded.slice.save(out)?;
            eprintln!(
                "{} records loaded, {} rows skipped",
                loaded.slice.len(),
                loaded.skipped
            );
        }
        Command::Filter(a) => {
            let slice = DatasetSlice::load(&a.slice)?;
            let spec = FilterSpec {
                keywords: a.keywords.split_whitespace().map(String::from).collect(),
                match_mode: if a.match_mode == "any" { MatchMode::Any } else { MatchMode::All },
                case_fold: !a.case_sensitive,
                match_unit: if a.match_unit == "substring" { MatchUnit::Substring } else { MatchUnit::Word },
            };
            let mut s = filter_by_keywords(&slice, &spec);
            if !a.no_token_filter {
                let backend;
                let tokenizer: Box<dyn Tokenizer + '_> = if a.tokenizer == "whitespace" {
                    Box::new(WhitespaceTokenizer)
                } else {
                    backend = make_backend(&cli)?;
                    Box::new(BackendTokenizer::new(backend.as_ref()))
                };
                s = token_length_filter(&s, tokenizer.as_ref(), a.max_tokens)?;
            }
            if !a.no_url_check {
                s = validate_urls(
                    &s,
                    a.url_policy,
                    Duration::from_secs_f64(a.url_timeout_secs),
                    a.parallelism,
                )?;
            }
            s.save(&a.out)?;
            eprintln!("{} of {} records active", s.active().count(), s.len());
        }
        Command::Embed {
            slice,
            modality,
            out,
            cache,
            batch_size,
            retries,
            concurrency,
        } => {
            let backend = make_backend(&cli)?;
            let slice = DatasetSlice::load(slice)?;
            let (inputs, mut failures) = inputs_from_slice(&slice, *modality);
            let cache = cache.as_ref().map(EmbeddingCache::new);
            let opts = EmbedOptions {
                batch_size: *batch_size,
                retries: *retries,
                concurrency: *concurrency,
            };
            let outcome = embed_batch(&inputs, *modality, backend.as_ref(), cache.as_ref(), &opts)?;
            failures.extend(outcome.failures);
            outcome.matrix.save(out)?;
            for f in &failures {
                eprintln!("record {}: {}", f.id, f.reason);
            }
            eprintln!(
                "{} embedded ({} from cache), {} failed",
                outcome.matrix.len(),
                outcome.cache_hits,
                failures.len()
            );
        }
        Command::Cluster {
            embeddings,
            tau,
            noise_below,
            omit,
            out,
        } => {
            let m = EmbeddingMatrix::load(embeddings)?;
            let mut c = cluster_embeddings(&m, *tau)?;
            if let Some(x) = noise_below {
                c = mark_noise(&c, &NoiseRule::CoherenceBelow(*x))?;
            }
            if !omit.is_empty() {
                c = mark_noise(&c, &NoiseRule::Manual(omit.clone()))?;
            }
            c.save(out)?;
            eprintln!("{} clusters over {} vectors", c.clusters.len(), m.len());
        }
        Command::Keywords {
            clusters,
            slice,
            top_clusters,
            top_k,
            stopwords: sw,
            format,
            out,
        } => {
            let c = Clustering::load(clusters)?;
            let s = DatasetSlice::load(slice)?;
            let table = emit_cluster_table(&c, &s, &stopwords(sw)?, *top_clusters, *top_k, *format)?;
            emit(out.as_deref(), &table)?;
        }
        Command::Share {
            clusters,
            embeddings,
            reference,
            denominator,
        } => {
            let c = Clustering::load(clusters)?;
            let m = EmbeddingMatrix::load(embeddings)?;
            let v = reference_vector(&m, &reference.reference, reference.reference_id)?;
            let share = cluster_share(
                &c,
                &m,
                ReferenceMatch { vector: &v, tau_ref: reference.tau_ref },
                *denominator,
            )?;
            println!("{share}");
        }
        Command::Dist {
            clusters,
            embeddings,
            reference,
            top_n,
            out,
        } => {
            let c = Clustering::load(clusters)?;
            let m = EmbeddingMatrix::load(embeddings)?;
            let v = match &reference.reference {
                Some(p) => Some(reference_vector(&m, p, reference.reference_id)?),
                None => None,
            };
            let r = v.as_ref().map(|vector| ReferenceMatch { vector, tau_ref: reference.tau_ref });
            let rows = size_distribution(&c, &m, r, *top_n)?;
            emit(out.as_deref(), &emit_distribution(&rows))?;
        }
        Command::Probe {
            prompt,
            references,
            threshold,
            n_seeds,
            base_seed,
            keywords,
            images_dir,
            edges,
            batch_size,
            retries,
            out,
        } => {
            let backend = make_backend(&cli)?;
            let refs = ReferenceSet::load(references)?;
            let spec = ProbeSpec {
                prompt: prompt.clone(),
                highlight_keywords: keywords.split_whitespace().map(String::from).collect(),
                n_seeds: *n_seeds,
                base_seed: *base_seed,
                gen_params: Default::default(),
            };
            let opts = ProbeOptions {
                mode: match images_dir {
                    Some(dir) => ProbeMode::Images { dir: dir.clone() },
                    None => ProbeMode::EmbeddingsOnly,
                },
                bucket_edges: edges.clone(),
                batch_size: *batch_size,
                retries: *retries,
                ..ProbeOptions::default()
            };
            let result = run_probe(&spec, backend.as_ref(), &refs, *threshold, &opts)?;
            result.save(out)?;
            eprintln!(
                "{}: {:.1}% above {} ({} seeds failed)",
                result.spec.prompt,
                result.percent_above,
                result.threshold,
                result.failed_seeds.len()
            );
        }
        Command::Detect { probe, label, out } => {
            let backend = make_backend(&cli)?;
            let mut result = ProbeResult::load(probe)?;
            let presence = object_presence_rate(&result, backend.as_ref(), label)?;
            println!(
                "{label}: {:.1}% ({} of {} answered, {} failed)",
                presence.percent, presence.positives, presence.answered, presence.failed
            );
            result.object_presence = Some(presence);
            result.save(out.as_deref().unwrap_or(probe))?;
        }
        Command::Baseline {
            slice,
            label,
            sample_n,
            seed,
            out,
        } => {
            let backend = make_backend(&cli)?;
            let s = DatasetSlice::load(slice)?;
            let presence = baseline_object_rate(&s, *sample_n, backend.as_ref(), label, *seed)?;
            println!(
                "{label}: {:.1}% ({} of {} answered, {} failed)",
                presence.percent, presence.positives, presence.answered, presence.failed
            );
            if let Some(out) = out {
                save_json(out, &presence)?;
            }
        }
        Command::Report {
            probes,
            clusters,
            slice,
            top_clusters,
            top_k,
            stopwords: sw,
            format,
            out,
        } => {
            if probes.is_empty() && clusters.is_none() {
                return Err(Error::usage("nothing to report: pass --probe or --clusters"));
            }
            let mut text = String::new();
            if let Some(c) = clusters {
                let slice = slice
                    .as_ref()
                    .ok_or_else(|| Error::usage("--clusters needs --slice"))?;
                let c = Clustering::load(c)?;
                let s = DatasetSlice::load(slice)?;
                text.push_str(&emit_cluster_table(&c, &s, &stopwords(sw)?, *top_clusters, *top_k, *format)?);
            }
            if !probes.is_empty() {
                let results = probes
                    .iter()
                    .map(|p| ProbeResult::load(p))
                    .collect::<Result<Vec<_>>>()?;
                if !text.is_empty() {
                    text.push('\n');
                }
                text.push_str(&emit_probe_table(&results, *format)?);
            }
            emit(out.as_deref(), &text)?;
        }
        Command::Pipeline { config } => {
            let path = config
                .as_ref()
                .or(cli.config.as_ref())
                .ok_or_else(|| Error::usage("pipeline needs a config file"))?;
            let cfg = PipelineConfig::load(path)?;
            let backend = cfg.build_backend()?;
            let outcome = run_pipeline_with(&cfg, backend.as_ref())?;
            for s in &outcome.ran {
                eprintln!("ran {s}");
            }
            for s in &outcome.skipped {
                eprintln!("skipped {s} (up to date)");
            }
            eprintln!(
                "{} files written, {} backend requests",
                outcome.written.len(),
                backend.request_count()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dupaudit: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
