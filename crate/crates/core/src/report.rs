//! Rendering of cluster tables, size distributions and probe tables.
//!
//! Similarities print with four decimals and percentages with one, in every
//! format, so identical inputs always render to identical bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cluster::{frequent_words, Clustering, DistributionRow, Stopwords};
use crate::error::{Error, Result};
use crate::ingest::{write_file, DatasetSlice};
use crate::probe::ProbeResult;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Text,
    Csv,
    Markdown,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" | "txt" => Ok(ReportFormat::Text),
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            other => Err(Error::usage(format!(
                "unknown report format `{other}` (expected text, csv or markdown)"
            ))),
        }
    }
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Text => "txt",
            ReportFormat::Csv => "csv",
            ReportFormat::Markdown => "md",
        }
    }
}

fn round_to(x: f64, decimals: i32) -> f64 {
    let scale = 10f64.powi(decimals);
    (x * scale).round() / scale
}

fn sim4(x: f64) -> String {
    format!("{:.4}", round_to(x, 4))
}

fn pct1(x: f64) -> String {
    format!("{:.1}", round_to(x, 1))
}

fn md_escape(s: &str) -> String {
    s.replace('|', "\\|")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterRow {
    pub rank: usize,
    pub cluster_id: usize,
    pub size: usize,
    pub keywords: Vec<(String, u64)>,
}

impl ClusterRow {
    fn keyword_cell(&self) -> String {
        self.keywords
            .iter()
            .map(|(w, n)| format!("{w}: {n}"))
            .collect::<Vec<_>>()
            .join(", ")
    }
}

/// Rows for the top non-omitted clusters, ranked from 1.
pub fn cluster_rows(
    c: &Clustering,
    slice: &DatasetSlice,
    stopwords: &Stopwords,
    top_clusters: usize,
    top_k_words: usize,
) -> Result<Vec<ClusterRow>> {
    c.reported()
        .take(top_clusters)
        .enumerate()
        .map(|(i, cl)| {
            Ok(ClusterRow {
                rank: i + 1,
                cluster_id: cl.cluster_id,
                size: cl.size(),
                keywords: frequent_words(cl, slice, stopwords, top_k_words)?,
            })
        })
        .collect()
}

fn csv_writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new())
}

fn csv_finish(w: csv::Writer<Vec<u8>>) -> String {
    let bytes = w.into_inner().expect("in-memory csv writer");
    String::from_utf8(bytes).expect("csv output is utf-8")
}

pub fn render_cluster_rows(c: &Clustering, rows: &[ClusterRow], format: ReportFormat) -> String {
    let caption = format!(
        "tau = {}, backend = {}, slice = {}",
        c.tau,
        c.source.backend_id,
        c.source.slice.as_deref().unwrap_or("-")
    );
    let mut out = String::new();
    match format {
        ReportFormat::Text => {
            let _ = writeln!(out, "% {caption}");
            out.push_str("Cluster & Keywords with Frequencies\n");
            for r in rows {
                let _ = writeln!(out, "{} & {}", r.rank, r.keyword_cell());
            }
        }
        ReportFormat::Markdown => {
            let _ = writeln!(out, "{caption}\n");
            out.push_str("| Cluster | Size | Keywords with Frequencies |\n|---|---|---|\n");
            for r in rows {
                let _ = writeln!(out, "| {} | {} | {} |", r.rank, r.size, r.keyword_cell());
            }
        }
        ReportFormat::Csv => {
            let mut w = csv_writer();
            w.write_record(["rank", "cluster_id", "size", "keywords"]).expect("csv");
            for r in rows {
                w.write_record([
                    r.rank.to_string(),
                    r.cluster_id.to_string(),
                    r.size.to_string(),
                    r.keyword_cell(),
                ])
                .expect("csv");
            }
            return csv_finish(w);
        }
    }
    out
}

/// The largest clusters with their most frequent caption words.
pub fn emit_cluster_table(
    c: &Clustering,
    slice: &DatasetSlice,
    stopwords: &Stopwords,
    top_clusters: usize,
    top_k_words: usize,
    format: ReportFormat,
) -> Result<String> {
    let rows = cluster_rows(c, slice, stopwords, top_clusters, top_k_words)?;
    Ok(render_cluster_rows(c, &rows, format))
}

pub fn parse_cluster_csv(text: &str) -> Result<Vec<ClusterRow>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::parse("cluster table", e))?;
        let field = |i: usize| rec.get(i).unwrap_or_default();
        let num = |i: usize| -> Result<usize> {
            field(i).parse().map_err(|e| Error::parse("cluster table", e))
        };
        let mut keywords = Vec::new();
        for pair in field(3).split(", ").filter(|p| !p.is_empty()) {
            let (w, n) = pair
                .rsplit_once(": ")
                .ok_or_else(|| Error::parse("cluster table", format!("bad keyword cell `{pair}`")))?;
            let n = n.parse().map_err(|e| Error::parse("cluster table", e))?;
            keywords.push((w.to_string(), n));
        }
        rows.push(ClusterRow {
            rank: num(0)?,
            cluster_id: num(1)?,
            size: num(2)?,
            keywords,
        });
    }
    Ok(rows)
}

/// Plot data for cluster sizes: `rank,size,matches_reference`.
pub fn emit_distribution(rows: &[DistributionRow]) -> String {
    let mut w = csv_writer();
    for r in rows {
        w.serialize(r).expect("csv");
    }
    if rows.is_empty() {
        w.write_record(["rank", "size", "matches_reference"]).expect("csv");
    }
    csv_finish(w)
}

pub fn parse_distribution(text: &str) -> Result<Vec<DistributionRow>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::parse("distribution", e))
}

/// One probe table row, with numbers already rounded to their printed precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub prompt: String,
    pub highlight_keywords: String,
    pub text_similarity: Option<f64>,
    pub percent_above: f64,
    pub threshold: f64,
    pub buckets: String,
    pub failed: usize,
    pub n_seeds: usize,
    pub object_label: Option<String>,
    pub object_percent: Option<f64>,
    pub baseline_percent: Option<f64>,
}

impl ProbeRow {
    pub fn from_result(r: &ProbeResult) -> Self {
        let buckets = r
            .buckets
            .labels()
            .iter()
            .zip(&r.buckets.counts)
            .map(|(l, n)| format!("{l}: {n}"))
            .collect::<Vec<_>>()
            .join(", ");
        ProbeRow {
            prompt: r.spec.prompt.clone(),
            highlight_keywords: r.spec.highlight_keywords.join(" "),
            text_similarity: r.text_similarity.map(|t| round_to(t, 4)),
            percent_above: round_to(r.percent_above, 1),
            threshold: r.threshold,
            buckets,
            failed: r.failed_seeds.len(),
            n_seeds: r.per_seed.len(),
            object_label: r.object_presence.as_ref().map(|o| o.label.clone()),
            object_percent: r.object_presence.as_ref().map(|o| round_to(o.percent, 1)),
            baseline_percent: r.baseline.as_ref().map(|o| round_to(o.percent, 1)),
        }
    }

    fn text_sim_cell(&self) -> String {
        self.text_similarity.map(sim4).unwrap_or_else(|| "-".into())
    }

    fn pct_cell(p: Option<f64>) -> String {
        p.map(|p| format!("{}%", pct1(p))).unwrap_or_else(|| "-".into())
    }
}

fn check_same_backend(results: &[ProbeResult]) -> Result<()> {
    if let Some(first) = results.first() {
        if let Some(other) = results.iter().find(|r| r.backend_id != first.backend_id) {
            return Err(Error::usage(format!(
                "probe results mix backends `{}` and `{}`; their similarities are not comparable",
                first.backend_id, other.backend_id
            )));
        }
    }
    Ok(())
}

pub fn render_probe_rows(rows: &[ProbeRow], format: ReportFormat) -> String {
    let object = rows.iter().find_map(|r| r.object_label.clone());
    let baseline = rows.iter().any(|r| r.baseline_percent.is_some());
    let mut header = vec![
        "Prompt".to_string(),
        "Text Similarity".into(),
        "Image Sim > Threshold (%)".into(),
        "Threshold".into(),
        "Buckets".into(),
        "Failed".into(),
        "Keywords".into(),
    ];
    if let Some(label) = &object {
        header.push(format!("{label} %"));
    }
    if baseline {
        header.push("Baseline %".into());
    }
    let cells = |r: &ProbeRow| {
        let mut c = vec![
            r.prompt.clone(),
            r.text_sim_cell(),
            format!("{}%", pct1(r.percent_above)),
            r.threshold.to_string(),
            r.buckets.clone(),
            format!("{}/{}", r.failed, r.n_seeds),
            if r.highlight_keywords.is_empty() { "-".into() } else { r.highlight_keywords.clone() },
        ];
        if object.is_some() {
            c.push(ProbeRow::pct_cell(r.object_percent));
        }
        if baseline {
            c.push(ProbeRow::pct_cell(r.baseline_percent));
        }
        c
    };
    let mut out = String::new();
    match format {
        ReportFormat::Text => {
            let _ = writeln!(out, "{}", header.join(" | "));
            for r in rows {
                let _ = writeln!(out, "{}", cells(r).join(" | "));
            }
        }
        ReportFormat::Markdown => {
            let _ = writeln!(out, "| {} |", header.join(" | "));
            let _ = writeln!(out, "|{}", "---|".repeat(header.len()));
            for r in rows {
                let c: Vec<String> = cells(r).iter().map(|s| md_escape(s)).collect();
                let _ = writeln!(out, "| {} |", c.join(" | "));
            }
        }
        ReportFormat::Csv => {
            let mut w = csv_writer();
            w.write_record([
                "prompt",
                "highlight_keywords",
                "text_similarity",
                "percent_above",
                "threshold",
                "buckets",
                "failed",
                "n_seeds",
                "object_label",
                "object_percent",
                "baseline_percent",
            ])
            .expect("csv");
            let opt = |p: Option<f64>, f: fn(f64) -> String| p.map(f).unwrap_or_default();
            for r in rows {
                w.write_record([
                    r.prompt.clone(),
                    r.highlight_keywords.clone(),
                    opt(r.text_similarity, sim4),
                    pct1(r.percent_above),
                    r.threshold.to_string(),
                    r.buckets.clone(),
                    r.failed.to_string(),
                    r.n_seeds.to_string(),
                    r.object_label.clone().unwrap_or_default(),
                    opt(r.object_percent, pct1),
                    opt(r.baseline_percent, pct1),
                ])
                .expect("csv");
            }
            return csv_finish(w);
        }
    }
    out
}

/// One row per probe; object columns appear when any result carries them.
pub fn emit_probe_table(results: &[ProbeResult], format: ReportFormat) -> Result<String> {
    check_same_backend(results)?;
    let rows: Vec<ProbeRow> = results.iter().map(ProbeRow::from_result).collect();
    Ok(render_probe_rows(&rows, format))
}

pub fn parse_probe_csv(text: &str) -> Result<Vec<ProbeRow>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::parse("probe table", e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandExemplar {
    pub prompt: String,
    pub band: String,
    pub seed: u64,
    pub sim: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<PathBuf>,
}

fn band_exemplars(r: &ProbeResult) -> Vec<BandExemplar> {
    r.buckets
        .labels()
        .into_iter()
        .zip(r.band_exemplars())
        .filter_map(|(band, s)| {
            s.map(|s| BandExemplar {
                prompt: r.spec.prompt.clone(),
                band,
                seed: s.seed,
                sim: round_to(s.sim_to_reference.unwrap_or_default(), 4),
                image_ref: s.image_ref.clone(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BundleMetadata {
    pub tau: Option<f64>,
    pub backend_id: Option<String>,
    pub slice: Option<String>,
    /// Seconds since the epoch, taken from `SOURCE_DATE_EPOCH` when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created: Option<u64>,
    pub similarity: String,
    /// Artifact name to the file every number was read from.
    pub artifacts: BTreeMap<String, PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub metadata: BundleMetadata,
    pub cluster_table: Vec<ClusterRow>,
    pub distribution: Vec<DistributionRow>,
    pub probe_table: Vec<ProbeRow>,
    pub band_exemplars: Vec<BandExemplar>,
}

impl ReportBundle {
    pub fn new() -> Self {
        ReportBundle {
            metadata: BundleMetadata {
                created: std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|s| s.parse().ok()),
                similarity: "cosine over embeddings".into(),
                ..BundleMetadata::default()
            },
            ..ReportBundle::default()
        }
    }

    fn set_backend(&mut self, id: &str) -> Result<()> {
        match &self.metadata.backend_id {
            Some(existing) if existing != id => Err(Error::usage(format!(
                "report mixes backends `{existing}` and `{id}`"
            ))),
            _ => {
                self.metadata.backend_id = Some(id.to_string());
                Ok(())
            }
        }
    }

    pub fn add_clusters(&mut self, c: &Clustering, rows: Vec<ClusterRow>, source: &Path) -> Result<()> {
        self.set_backend(&c.source.backend_id)?;
        self.metadata.tau = Some(c.tau);
        self.metadata.slice = c.source.slice.clone();
        self.metadata.artifacts.insert("clustering".into(), source.to_path_buf());
        self.cluster_table = rows;
        Ok(())
    }

    pub fn add_distribution(&mut self, rows: Vec<DistributionRow>, source: &Path) {
        self.metadata.artifacts.insert("distribution".into(), source.to_path_buf());
        self.distribution = rows;
    }

    pub fn add_probe(&mut self, r: &ProbeResult, source: &Path) -> Result<()> {
        self.set_backend(&r.backend_id)?;
        self.metadata
            .artifacts
            .insert(format!("probe:{}", r.probe_id), source.to_path_buf());
        self.probe_table.push(ProbeRow::from_result(r));
        self.band_exemplars.extend(band_exemplars(r));
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("bundle serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::parse("report bundle", e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_json().as_bytes())
    }
}
