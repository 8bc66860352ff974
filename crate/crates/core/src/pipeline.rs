//! Staged audit runs driven by a flat `key = value` config file.
//!
//! Every stage reads and writes artifacts under `out_dir`. A manifest records
//! a fingerprint of each stage's inputs and settings; a stage whose
//! fingerprint is unchanged and whose outputs still exist is skipped, so an
//! unchanged rerun writes nothing and makes no backend calls.
//!
//! ```text
//! stages = ingest, filter, embed, cluster, keywords, share, report
//! out_dir = out
//! metadata = captions.tsv
//! backend = mock
//! keywords = van gogh
//! tau = 0.9
//! probe.starry.prompt = Van Gogh starry night
//! probe.starry.threshold = 0.83
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{Backend, BackendTokenizer, GenParams, HttpBackend, MockBackend, MockPlan};
use crate::cache::{embed_batch, inputs_from_slice, EmbedFailure, EmbedOptions, EmbeddingCache};
use crate::cluster::{
    annotate_keywords, cluster_embeddings, cluster_share, mark_noise, size_distribution,
    Clustering, Denominator, NoiseRule, ReferenceMatch, Stopwords, DEFAULT_TAU, DEFAULT_TOP_N,
};
use crate::embed::{EmbeddingMatrix, Modality};
use crate::error::{Error, Result};
use crate::ingest::{
    filter_by_keywords, load_metadata, token_length_filter, validate_urls, DatasetSlice,
    FilterSpec, MatchMode, MatchUnit, MetadataFormat, Tokenizer, UrlPolicy, WhitespaceTokenizer,
    DEFAULT_MAX_TOKENS,
};
use crate::probe::{
    baseline_object_rate, object_presence_rate, run_probe, ObjectPresence, ProbeMode,
    ProbeOptions, ProbeResult, ProbeSpec, ReferenceSet, DEFAULT_BUCKET_EDGES, DEFAULT_N_SEEDS,
};
use crate::report::{
    emit_distribution, render_cluster_rows, render_probe_rows, ClusterRow, ReportBundle,
    ReportFormat,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ingest,
    Filter,
    Embed,
    Cluster,
    Keywords,
    Share,
    Probe,
    Baseline,
    Report,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Filter => "filter",
            Stage::Embed => "embed",
            Stage::Cluster => "cluster",
            Stage::Keywords => "keywords",
            Stage::Share => "share",
            Stage::Probe => "probe",
            Stage::Baseline => "baseline",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "ingest" => Stage::Ingest,
            "filter" => Stage::Filter,
            "embed" => Stage::Embed,
            "cluster" => Stage::Cluster,
            "keywords" => Stage::Keywords,
            "share" => Stage::Share,
            "probe" => Stage::Probe,
            "baseline" => Stage::Baseline,
            "report" => Stage::Report,
            other => return Err(Error::usage(format!("unknown stage `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BackendSetting {
    Mock { plan: Option<PathBuf> },
    Http { url: String, timeout: Duration },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeEntry {
    pub name: String,
    pub prompt: String,
    pub threshold: f64,
    pub keywords: Vec<String>,
    pub detect: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TokenizerSetting {
    Backend,
    Whitespace,
}

/// Parsed pipeline configuration. Relative paths resolve against the config file.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub stages: Vec<Stage>,
    pub out_dir: PathBuf,
    pub metadata: Option<PathBuf>,
    pub metadata_format: MetadataFormat,
    pub backend: BackendSetting,
    pub filter: FilterSpec,
    pub max_tokens: usize,
    pub tokenizer: TokenizerSetting,
    pub url_policy: UrlPolicy,
    pub url_timeout: Duration,
    pub modality: Modality,
    pub embed: EmbedOptions,
    pub tau: f64,
    pub noise_below: Option<f64>,
    pub stopwords: Option<PathBuf>,
    pub builtin_stopwords: bool,
    pub top_clusters: usize,
    pub top_k_words: usize,
    pub report_format: ReportFormat,
    pub reference: Option<PathBuf>,
    pub reference_id: Option<u64>,
    pub tau_ref: f64,
    pub denominator: Denominator,
    pub top_n: usize,
    pub probe_references: Option<PathBuf>,
    pub n_seeds: usize,
    pub base_seed: u64,
    pub gen_params: GenParams,
    pub probe_images: bool,
    pub bucket_edges: Vec<f64>,
    pub probes: Vec<ProbeEntry>,
    pub baseline_label: Option<String>,
    pub baseline_n: usize,
    pub baseline_seed: u64,
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    v.parse()
        .map_err(|e: T::Err| Error::parse("config", format!("`{key}`: {e}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::parse("config", format!("`{key}`: expected true or false"))),
    }
}

fn list(v: &str) -> Vec<String> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new("")))
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut kv: BTreeMap<String, String> = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::parse("config", format!("line {}: expected `key = value`", n + 1))
            })?;
            let k = k.trim().to_string();
            if kv.insert(k.clone(), v.trim().to_string()).is_some() {
                return Err(Error::parse("config", format!("line {}: duplicate key `{k}`", n + 1)));
            }
        }
        let path = |v: &str| base.join(v);

        let mut cfg = PipelineConfig {
            stages: Vec::new(),
            out_dir: base.join("out"),
            metadata: None,
            metadata_format: MetadataFormat::Tsv,
            backend: BackendSetting::Mock { plan: None },
            filter: FilterSpec::identity(),
            max_tokens: DEFAULT_MAX_TOKENS,
            tokenizer: TokenizerSetting::Backend,
            url_policy: UrlPolicy::OfflineSyntactic,
            url_timeout: Duration::from_secs(5),
            modality: Modality::Image,
            embed: EmbedOptions::default(),
            tau: DEFAULT_TAU,
            noise_below: None,
            stopwords: None,
            builtin_stopwords: true,
            top_clusters: 10,
            top_k_words: 10,
            report_format: ReportFormat::Text,
            reference: None,
            reference_id: None,
            tau_ref: DEFAULT_TAU,
            denominator: Denominator::All,
            top_n: DEFAULT_TOP_N,
            probe_references: None,
            n_seeds: DEFAULT_N_SEEDS,
            base_seed: 0,
            gen_params: GenParams::default(),
            probe_images: false,
            bucket_edges: DEFAULT_BUCKET_EDGES.to_vec(),
            probes: Vec::new(),
            baseline_label: None,
            baseline_n: 100,
            baseline_seed: 0,
        };
        let mut backend_url: Option<String> = None;
        let mut mock_plan: Option<PathBuf> = None;
        let mut timeout = Duration::from_secs(60);
        let mut default_threshold = 0.83;
        let mut probes: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();

        for (k, v) in &kv {
            let v = v.as_str();
            match k.as_str() {
                "stages" => {
                    cfg.stages = list(v).iter().map(|s| s.parse()).collect::<Result<_>>()?
                }
                "out_dir" => cfg.out_dir = path(v),
                "metadata" => cfg.metadata = Some(path(v)),
                "metadata_format" => cfg.metadata_format = v.parse()?,
                "backend" => backend_url = Some(v.to_string()),
                "mock_plan" => mock_plan = Some(path(v)),
                "timeout_secs" => timeout = Duration::from_secs_f64(parse_value(k, v)?),
                "keywords" => {
                    cfg.filter.keywords = v.split_whitespace().map(String::from).collect()
                }
                "match_mode" => {
                    cfg.filter.match_mode = match v {
                        "all" => MatchMode::All,
                        "any" => MatchMode::Any,
                        _ => return Err(Error::parse("config", "`match_mode`: expected all or any")),
                    }
                }
                "match_unit" => {
                    cfg.filter.match_unit = match v {
                        "word" => MatchUnit::Word,
                        "substring" => MatchUnit::Substring,
                        _ => {
                            return Err(Error::parse("config", "`match_unit`: expected word or substring"))
                        }
                    }
                }
                "case_fold" => cfg.filter.case_fold = parse_bool(k, v)?,
                "max_tokens" => cfg.max_tokens = parse_value(k, v)?,
                "tokenizer" => {
                    cfg.tokenizer = match v {
                        "backend" => TokenizerSetting::Backend,
                        "whitespace" => TokenizerSetting::Whitespace,
                        _ => {
                            return Err(Error::parse("config", "`tokenizer`: expected backend or whitespace"))
                        }
                    }
                }
                "url_policy" => cfg.url_policy = v.parse()?,
                "url_timeout_secs" => cfg.url_timeout = Duration::from_secs_f64(parse_value(k, v)?),
                "modality" => cfg.modality = v.parse()?,
                "batch_size" => cfg.embed.batch_size = parse_value(k, v)?,
                "concurrency" => cfg.embed.concurrency = parse_value(k, v)?,
                "retries" => cfg.embed.retries = parse_value(k, v)?,
                "tau" => cfg.tau = parse_value(k, v)?,
                "noise_below" => cfg.noise_below = Some(parse_value(k, v)?),
                "stopwords" => match v {
                    "builtin" => cfg.builtin_stopwords = true,
                    "none" => cfg.builtin_stopwords = false,
                    file => {
                        cfg.builtin_stopwords = false;
                        cfg.stopwords = Some(path(file));
                    }
                },
                "top_clusters" => cfg.top_clusters = parse_value(k, v)?,
                "top_k_words" => cfg.top_k_words = parse_value(k, v)?,
                "report_format" => cfg.report_format = v.parse()?,
                "reference" => cfg.reference = Some(path(v)),
                "reference_id" => cfg.reference_id = Some(parse_value(k, v)?),
                "tau_ref" => cfg.tau_ref = parse_value(k, v)?,
                "denominator" => cfg.denominator = v.parse()?,
                "top_n" => cfg.top_n = parse_value(k, v)?,
                "probe_references" => cfg.probe_references = Some(path(v)),
                "n_seeds" => cfg.n_seeds = parse_value(k, v)?,
                "base_seed" => cfg.base_seed = parse_value(k, v)?,
                "threshold" => default_threshold = parse_value(k, v)?,
                "steps" => cfg.gen_params.steps = parse_value(k, v)?,
                "guidance" => cfg.gen_params.guidance = parse_value(k, v)?,
                "width" => cfg.gen_params.width = parse_value(k, v)?,
                "height" => cfg.gen_params.height = parse_value(k, v)?,
                "probe_mode" => {
                    cfg.probe_images = match v {
                        "images" => true,
                        "embeddings" => false,
                        _ => {
                            return Err(Error::parse("config", "`probe_mode`: expected images or embeddings"))
                        }
                    }
                }
                "bucket_edges" => {
                    cfg.bucket_edges = list(v)
                        .iter()
                        .map(|e| parse_value(k, e))
                        .collect::<Result<_>>()?
                }
                "baseline_label" => cfg.baseline_label = Some(v.to_string()),
                "baseline_n" => cfg.baseline_n = parse_value(k, v)?,
                "baseline_seed" => cfg.baseline_seed = parse_value(k, v)?,
                other => {
                    let Some((name, field)) = other
                        .strip_prefix("probe.")
                        .and_then(|rest| rest.split_once('.'))
                    else {
                        return Err(Error::parse("config", format!("unknown key `{other}`")));
                    };
                    if !matches!(field, "prompt" | "threshold" | "keywords" | "detect") {
                        return Err(Error::parse("config", format!("unknown key `{other}`")));
                    }
                    probes
                        .entry(name.to_string())
                        .or_default()
                        .insert(field.to_string(), v.to_string());
                }
            }
        }

        cfg.backend = match backend_url.as_deref() {
            None | Some("mock") => BackendSetting::Mock { plan: mock_plan },
            Some(url) => {
                if mock_plan.is_some() {
                    return Err(Error::usage("`mock_plan` is only valid with `backend = mock`"));
                }
                BackendSetting::Http {
                    url: url.to_string(),
                    timeout,
                }
            }
        };
        for (name, fields) in probes {
            let prompt = fields
                .get("prompt")
                .ok_or_else(|| Error::parse("config", format!("probe `{name}` has no prompt")))?
                .clone();
            cfg.probes.push(ProbeEntry {
                threshold: match fields.get("threshold") {
                    Some(t) => parse_value("threshold", t)?,
                    None => default_threshold,
                },
                keywords: fields
                    .get("keywords")
                    .map(|k| k.split_whitespace().map(String::from).collect())
                    .unwrap_or_default(),
                detect: fields.get("detect").cloned(),
                name,
                prompt,
            });
        }
        if cfg.stages.is_empty() {
            return Err(Error::parse("config", "`stages` lists no stage"));
        }
        Ok(cfg)
    }

    /// Settings that identify the backend without contacting it.
    fn backend_key(&self) -> Result<String> {
        Ok(match &self.backend {
            BackendSetting::Mock { plan: None } => "mock".into(),
            BackendSetting::Mock { plan: Some(p) } => format!("mock:{}", hash_file(p)?),
            BackendSetting::Http { url, .. } => format!("http:{url}"),
        })
    }

    pub fn build_backend(&self) -> Result<Box<dyn Backend>> {
        Ok(match &self.backend {
            BackendSetting::Mock { plan } => {
                let plan = match plan {
                    Some(p) => {
                        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                        MockPlan::from_json(&text)?
                    }
                    None => MockPlan::default(),
                };
                Box::new(MockBackend::new(plan))
            }
            BackendSetting::Http { url, timeout } => Box::new(HttpBackend::new(url.clone(), *timeout)),
        })
    }

    fn out(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn stopwords(&self) -> Result<Stopwords> {
        match (&self.stopwords, self.builtin_stopwords) {
            (Some(p), _) => Stopwords::from_file(p),
            (None, true) => Ok(Stopwords::builtin()),
            (None, false) => Ok(Stopwords::none()),
        }
    }
}

fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Write `bytes` unless the file already holds exactly them.
pub fn write_if_changed(path: &Path, bytes: &[u8]) -> Result<bool> {
    if fs::read(path).is_ok_and(|old| old == bytes) {
        return Ok(false);
    }
    crate::ingest::write_file(path, bytes)?;
    Ok(true)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct StageRecord {
    fingerprint: String,
    outputs: Vec<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct Manifest {
    stages: BTreeMap<String, StageRecord>,
}

const MANIFEST: &str = "manifest.json";

struct Fingerprint(Sha256);

impl Fingerprint {
    fn new(stage: Stage) -> Self {
        let mut h = Sha256::new();
        h.update(stage.name());
        Fingerprint(h)
    }

    fn setting(&mut self, key: &str, value: impl fmt::Debug) -> &mut Self {
        self.0.update(format!("\n{key}={value:?}"));
        self
    }

    fn file(&mut self, key: &str, path: &Path) -> Result<&mut Self> {
        let h = hash_file(path)?;
        Ok(self.setting(key, h))
    }

    fn finish(self) -> String {
        hex::encode(self.0.finalize())
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub ran: Vec<Stage>,
    pub skipped: Vec<Stage>,
    /// Files whose bytes changed during this run.
    pub written: Vec<PathBuf>,
    pub bundle: Option<ReportBundle>,
}

struct Run<'a> {
    cfg: &'a PipelineConfig,
    backend: &'a dyn Backend,
    written: Vec<PathBuf>,
}

impl Run<'_> {
    fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        if write_if_changed(path, bytes)? {
            self.written.push(path.to_path_buf());
        }
        Ok(())
    }

    fn slice_path(&self) -> PathBuf {
        self.cfg.out("slice.jsonl")
    }

    fn filtered_path(&self) -> PathBuf {
        self.cfg.out("filtered.jsonl")
    }

    fn embeddings_path(&self) -> PathBuf {
        self.cfg.out("embeddings.daem")
    }

    fn clusters_path(&self) -> PathBuf {
        self.cfg.out("clusters.json")
    }

    fn keywords_path(&self) -> PathBuf {
        self.cfg.out("keywords.json")
    }

    fn probe_path(&self, name: &str) -> PathBuf {
        self.cfg.out(&format!("probes/{name}.json"))
    }

    fn baseline_path(&self) -> PathBuf {
        self.cfg.out("baseline.json")
    }

    /// The primary artifact a stage's errors are reported against.
    fn stage_artifact(&self, stage: Stage) -> PathBuf {
        match stage {
            Stage::Ingest => self.slice_path(),
            Stage::Filter => self.filtered_path(),
            Stage::Embed => self.embeddings_path(),
            Stage::Cluster => self.clusters_path(),
            Stage::Keywords => self.keywords_path(),
            Stage::Share => self.cfg.out("share.json"),
            Stage::Probe => self.cfg.out("probes"),
            Stage::Baseline => self.baseline_path(),
            Stage::Report => self.cfg.out("report.json"),
        }
    }

    fn fingerprint(&self, stage: Stage) -> Result<(String, Vec<PathBuf>)> {
        let cfg = self.cfg;
        let mut f = Fingerprint::new(stage);
        let outputs = match stage {
            Stage::Ingest => {
                let meta = cfg
                    .metadata
                    .as_ref()
                    .ok_or_else(|| Error::usage("`metadata` is not set"))?;
                f.file("metadata", meta)?.setting("format", cfg.metadata_format);
                vec![self.slice_path()]
            }
            Stage::Filter => {
                f.file("slice", &self.slice_path())?
                    .setting("filter", &cfg.filter)
                    .setting("max_tokens", cfg.max_tokens)
                    .setting("tokenizer", &cfg.tokenizer)
                    .setting("url_policy", cfg.url_policy);
                if cfg.tokenizer == TokenizerSetting::Backend {
                    f.setting("backend", cfg.backend_key()?);
                }
                vec![self.filtered_path()]
            }
            Stage::Embed => {
                let filtered = self.filtered_path();
                f.file("slice", &filtered)?
                    .setting("modality", cfg.modality)
                    .setting("backend", cfg.backend_key()?);
                if cfg.modality == Modality::Image {
                    let slice = DatasetSlice::load(&filtered)?;
                    for r in slice.active() {
                        match &r.image_ref {
                            Some(p) if p.is_file() => {
                                f.file(&format!("image:{}", r.id), p)?;
                            }
                            other => {
                                f.setting(&format!("image:{}", r.id), other);
                            }
                        }
                    }
                }
                vec![self.embeddings_path(), self.cfg.out("embed_failures.json")]
            }
            Stage::Cluster => {
                f.file("embeddings", &self.embeddings_path())?
                    .setting("tau", cfg.tau)
                    .setting("noise_below", cfg.noise_below);
                vec![self.clusters_path()]
            }
            Stage::Keywords => {
                f.file("clusters", &self.clusters_path())?
                    .file("slice", &self.filtered_path())?
                    .setting("top_k_words", cfg.top_k_words)
                    .setting("builtin_stopwords", cfg.builtin_stopwords);
                if let Some(p) = &cfg.stopwords {
                    f.file("stopwords", p)?;
                }
                vec![self.keywords_path()]
            }
            Stage::Share => {
                let reference = cfg
                    .reference
                    .as_ref()
                    .ok_or_else(|| Error::usage("`reference` is not set"))?;
                f.file("clusters", &self.clusters_path())?
                    .file("embeddings", &self.embeddings_path())?
                    .file("reference", reference)?
                    .setting("reference_id", cfg.reference_id)
                    .setting("tau_ref", cfg.tau_ref)
                    .setting("denominator", cfg.denominator)
                    .setting("top_n", cfg.top_n);
                vec![self.cfg.out("share.json"), self.cfg.out("distribution.csv")]
            }
            Stage::Probe => {
                let refs = cfg
                    .probe_references
                    .as_ref()
                    .ok_or_else(|| Error::usage("`probe_references` is not set"))?;
                f.file("references", refs)?;
                let text = fs::read_to_string(refs).map_err(|e| Error::io(refs, e))?;
                let v: serde_json::Value =
                    serde_json::from_str(&text).map_err(|e| Error::parse("reference set", e))?;
                let base = refs.parent().unwrap_or(Path::new(""));
                for key in ["images", "texts"] {
                    if let Some(p) = v.get(key).and_then(|p| p.as_str()) {
                        f.file(key, &base.join(p))?;
                    }
                }
                f.setting("backend", cfg.backend_key()?)
                    .setting("n_seeds", cfg.n_seeds)
                    .setting("base_seed", cfg.base_seed)
                    .setting("gen", &cfg.gen_params)
                    .setting("images", cfg.probe_images)
                    .setting("edges", &cfg.bucket_edges)
                    .setting("probes", &cfg.probes)
                    .setting("embed", (cfg.embed.batch_size, cfg.embed.retries));
                if cfg.probes.is_empty() {
                    return Err(Error::usage("no `probe.NAME.prompt` entries"));
                }
                cfg.probes.iter().map(|p| self.probe_path(&p.name)).collect()
            }
            Stage::Baseline => {
                let label = cfg
                    .baseline_label
                    .as_ref()
                    .ok_or_else(|| Error::usage("`baseline_label` is not set"))?;
                f.file("slice", &self.filtered_path())?
                    .setting("label", label)
                    .setting("n", cfg.baseline_n)
                    .setting("seed", cfg.baseline_seed)
                    .setting("backend", cfg.backend_key()?);
                let slice = DatasetSlice::load(&self.filtered_path())?;
                for r in slice.active() {
                    if let Some(p) = r.image_ref.as_ref().filter(|p| p.is_file()) {
                        f.file(&format!("image:{}", r.id), p)?;
                    }
                }
                vec![self.baseline_path()]
            }
            Stage::Report => {
                for (key, p) in self.report_inputs() {
                    f.file(&key, &p)?;
                }
                f.setting("format", cfg.report_format)
                    .setting("top_clusters", cfg.top_clusters)
                    .setting("created", std::env::var("SOURCE_DATE_EPOCH").ok());
                let ext = cfg.report_format.extension();
                vec![
                    self.cfg.out("report.json"),
                    self.cfg.out(&format!("cluster_table.{ext}")),
                    self.cfg.out(&format!("probe_table.{ext}")),
                ]
            }
        };
        Ok((f.finish(), outputs))
    }

    /// Existing artifacts the report draws from.
    fn report_inputs(&self) -> Vec<(String, PathBuf)> {
        let mut v = Vec::new();
        let clusters = if self.keywords_path().is_file() {
            self.keywords_path()
        } else {
            self.clusters_path()
        };
        for (k, p) in [
            ("clusters", clusters),
            ("distribution", self.cfg.out("distribution.csv")),
            ("baseline", self.baseline_path()),
        ] {
            if p.is_file() {
                v.push((k.to_string(), p));
            }
        }
        for probe in &self.cfg.probes {
            let p = self.probe_path(&probe.name);
            if p.is_file() {
                v.push((format!("probe:{}", probe.name), p));
            }
        }
        v
    }

    fn execute(&mut self, stage: Stage) -> Result<()> {
        let cfg = self.cfg;
        match stage {
            Stage::Ingest => {
                let meta = cfg.metadata.as_ref().expect("checked by fingerprint");
                let loaded = load_metadata(meta, cfg.metadata_format)?;
                if loaded.skipped > 0 {
                    log::warn!("{} metadata rows skipped", loaded.skipped);
                }
                self.write(&self.slice_path(), loaded.slice.to_jsonl().as_bytes())
            }
            Stage::Filter => {
                let slice = DatasetSlice::load(&self.slice_path())?;
                let kept = filter_by_keywords(&slice, &cfg.filter);
                let tokenizer: Box<dyn Tokenizer + '_> = match cfg.tokenizer {
                    TokenizerSetting::Backend => Box::new(BackendTokenizer::new(self.backend)),
                    TokenizerSetting::Whitespace => Box::new(WhitespaceTokenizer),
                };
                let kept = token_length_filter(&kept, tokenizer.as_ref(), cfg.max_tokens)?;
                let kept = validate_urls(&kept, cfg.url_policy, cfg.url_timeout, cfg.embed.concurrency)?;
                self.write(&self.filtered_path(), kept.to_jsonl().as_bytes())
            }
            Stage::Embed => {
                let slice = DatasetSlice::load(&self.filtered_path())?;
                let (inputs, mut failures) = inputs_from_slice(&slice, cfg.modality);
                let cache = EmbeddingCache::new(cfg.out("cache"));
                let out = embed_batch(&inputs, cfg.modality, self.backend, Some(&cache), &cfg.embed)?;
                failures.extend(out.failures);
                failures.sort_by_key(|f| f.id);
                self.write(&self.embeddings_path(), &out.matrix.to_bytes())?;
                let failures: BTreeMap<String, String> = failures
                    .into_iter()
                    .map(|EmbedFailure { id, reason }| (id.to_string(), reason))
                    .collect();
                let mut json = serde_json::to_string_pretty(&failures).expect("failures serialize");
                json.push('\n');
                self.write(&self.cfg.out("embed_failures.json"), json.as_bytes())
            }
            Stage::Cluster => {
                let m = EmbeddingMatrix::load(&self.embeddings_path())?;
                let mut c = cluster_embeddings(&m, cfg.tau)?;
                if let Some(x) = cfg.noise_below {
                    c = mark_noise(&c, &NoiseRule::CoherenceBelow(x))?;
                }
                self.write(&self.clusters_path(), c.to_json().as_bytes())
            }
            Stage::Keywords => {
                let c = Clustering::load(&self.clusters_path())?;
                let slice = DatasetSlice::load(&self.filtered_path())?;
                let annotated = annotate_keywords(&c, &slice, &cfg.stopwords()?, cfg.top_k_words)?;
                self.write(&self.keywords_path(), annotated.to_json().as_bytes())
            }
            Stage::Share => {
                let c = Clustering::load(&self.clusters_path())?;
                let m = EmbeddingMatrix::load(&self.embeddings_path())?;
                let reference_path = cfg.reference.as_ref().expect("checked by fingerprint");
                let refs = EmbeddingMatrix::load(reference_path)?;
                let vector = match cfg.reference_id {
                    Some(id) => refs.get(id).ok_or_else(|| {
                        Error::usage(format!("reference id {id} not in {}", reference_path.display()))
                    })?,
                    None => refs
                        .vectors()
                        .first()
                        .ok_or_else(|| Error::degenerate("reference matrix is empty"))?,
                };
                if refs.backend_id() != m.backend_id() {
                    return Err(Error::usage(format!(
                        "reference embedded by `{}` but clusters by `{}`",
                        refs.backend_id(),
                        m.backend_id()
                    )));
                }
                let r = ReferenceMatch { vector, tau_ref: cfg.tau_ref };
                let share = cluster_share(&c, &m, r, cfg.denominator)?;
                let rows = size_distribution(&c, &m, Some(r), cfg.top_n)?;
                let summary = ShareSummary {
                    share,
                    denominator: cfg.denominator,
                    tau_ref: cfg.tau_ref,
                    reference: reference_path.clone(),
                    reference_id: cfg.reference_id,
                };
                let mut json = serde_json::to_string_pretty(&summary).expect("share serializes");
                json.push('\n');
                self.write(&self.cfg.out("share.json"), json.as_bytes())?;
                self.write(&self.cfg.out("distribution.csv"), emit_distribution(&rows).as_bytes())
            }
            Stage::Probe => {
                let refs = ReferenceSet::load(cfg.probe_references.as_ref().expect("checked"))?;
                let opts = ProbeOptions {
                    mode: if cfg.probe_images {
                        ProbeMode::Images { dir: cfg.out("images") }
                    } else {
                        ProbeMode::EmbeddingsOnly
                    },
                    bucket_edges: cfg.bucket_edges.clone(),
                    batch_size: cfg.embed.batch_size,
                    concurrency: cfg.embed.concurrency,
                    retries: cfg.embed.retries,
                };
                for p in &cfg.probes {
                    let spec = ProbeSpec {
                        prompt: p.prompt.clone(),
                        highlight_keywords: p.keywords.clone(),
                        n_seeds: cfg.n_seeds,
                        base_seed: cfg.base_seed,
                        gen_params: cfg.gen_params.clone(),
                    };
                    let mut result = run_probe(&spec, self.backend, &refs, p.threshold, &opts)?;
                    if let Some(label) = &p.detect {
                        result.object_presence = Some(object_presence_rate(&result, self.backend, label)?);
                    }
                    self.write(&self.probe_path(&p.name), result.to_json().as_bytes())?;
                }
                Ok(())
            }
            Stage::Baseline => {
                let slice = DatasetSlice::load(&self.filtered_path())?;
                let label = cfg.baseline_label.as_ref().expect("checked by fingerprint");
                let rate = baseline_object_rate(&slice, cfg.baseline_n, self.backend, label, cfg.baseline_seed)?;
                let mut json = serde_json::to_string_pretty(&rate).expect("presence serializes");
                json.push('\n');
                self.write(&self.baseline_path(), json.as_bytes())
            }
            Stage::Report => {
                let bundle = self.build_bundle()?;
                let ext = cfg.report_format.extension();
                let cluster_table = match (&bundle.metadata.tau, self.report_inputs().iter().find(|(k, _)| k == "clusters")) {
                    (Some(_), Some((_, p))) => {
                        let c = Clustering::load(p)?;
                        render_cluster_rows(&c, &bundle.cluster_table, cfg.report_format)
                    }
                    _ => String::new(),
                };
                self.write(&self.cfg.out(&format!("cluster_table.{ext}")), cluster_table.as_bytes())?;
                let probe_table = render_probe_rows(&bundle.probe_table, cfg.report_format);
                self.write(&self.cfg.out(&format!("probe_table.{ext}")), probe_table.as_bytes())?;
                self.write(&self.cfg.out("report.json"), bundle.to_json().as_bytes())
            }
        }
    }

    fn build_bundle(&self) -> Result<ReportBundle> {
        let mut bundle = ReportBundle::new();
        let inputs = self.report_inputs();
        let input = |k: &str| inputs.iter().find(|(key, _)| key == k).map(|(_, p)| p.clone());
        if let Some(p) = input("clusters") {
            let c = Clustering::load(&p)?;
            let rows = c
                .reported()
                .take(self.cfg.top_clusters)
                .enumerate()
                .map(|(i, cl)| ClusterRow {
                    rank: i + 1,
                    cluster_id: cl.cluster_id,
                    size: cl.size(),
                    keywords: cl.keyword_freqs.clone(),
                })
                .collect();
            bundle.add_clusters(&c, rows, &p)?;
        }
        if let Some(p) = input("distribution") {
            let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            bundle.add_distribution(crate::report::parse_distribution(&text)?, &p);
        }
        let baseline: Option<ObjectPresence> = match input("baseline") {
            Some(p) => {
                let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                bundle.metadata.artifacts.insert("baseline".into(), p);
                Some(serde_json::from_str(&text).map_err(|e| Error::parse("baseline", e))?)
            }
            None => None,
        };
        for probe in &self.cfg.probes {
            if let Some(p) = input(&format!("probe:{}", probe.name)) {
                let mut r = ProbeResult::load(&p)?;
                if let (Some(b), Some(o)) = (&baseline, &r.object_presence) {
                    if b.label == o.label {
                        r.baseline = Some(b.clone());
                    }
                }
                bundle.add_probe(&r, &p)?;
            }
        }
        Ok(bundle)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShareSummary {
    pub share: f64,
    pub denominator: Denominator,
    pub tau_ref: f64,
    pub reference: PathBuf,
    pub reference_id: Option<u64>,
}

fn load_manifest(path: &Path) -> Manifest {
    fs::read_to_string(path)
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok())
        .unwrap_or_default()
}

/// Run the configured stages in order against `backend`.
pub fn run_pipeline_with(cfg: &PipelineConfig, backend: &dyn Backend) -> Result<PipelineOutcome> {
    let manifest_path = cfg.out(MANIFEST);
    let mut manifest = load_manifest(&manifest_path);
    let mut run = Run {
        cfg,
        backend,
        written: Vec::new(),
    };
    let mut ran = Vec::new();
    let mut skipped = Vec::new();
    for &stage in &cfg.stages {
        let staged = |e: Error, run: &Run| {
            let path = match &e {
                Error::Io { path, .. } => path.clone(),
                _ => run.stage_artifact(stage),
            };
            Error::Stage {
                stage: stage.name().to_string(),
                path,
                source: Box::new(e),
            }
        };
        let (fingerprint, outputs) = run.fingerprint(stage).map_err(|e| staged(e, &run))?;
        let fresh = manifest.stages.get(stage.name()).is_some_and(|rec| {
            rec.fingerprint == fingerprint && rec.outputs.iter().all(|p| p.is_file())
        });
        if fresh {
            log::info!("stage {stage}: up to date");
            skipped.push(stage);
            continue;
        }
        log::info!("stage {stage}: running");
        run.execute(stage).map_err(|e| staged(e, &run))?;
        manifest.stages.insert(
            stage.name().to_string(),
            StageRecord { fingerprint, outputs },
        );
        let mut json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        json.push('\n');
        run.write(&manifest_path, json.as_bytes())?;
        ran.push(stage);
    }
    let report = cfg.out("report.json");
    let bundle = if report.is_file() {
        let text = fs::read_to_string(&report).map_err(|e| Error::io(&report, e))?;
        Some(ReportBundle::from_json(&text)?)
    } else {
        None
    };
    Ok(PipelineOutcome {
        ran,
        skipped,
        written: run.written,
        bundle,
    })
}

/// Load a config file, build its backend and run it.
pub fn run_pipeline(config: &Path) -> Result<PipelineOutcome> {
    let cfg = PipelineConfig::load(config)?;
    let backend = cfg.build_backend()?;
    run_pipeline_with(&cfg, backend.as_ref())
}
