//! Caption/URL metadata loading and the subset filters: keyword match,
//! URL validity and caption token length.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flag {
    UrlInvalid,
    TooLong,
    Excluded,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub id: u64,
    pub caption: String,
    #[serde(rename = "url")]
    pub image_url: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<PathBuf>,
    #[serde(default)]
    pub flags: BTreeSet<Flag>,
}

impl CaptionRecord {
    pub fn new(id: u64, caption: impl Into<String>, image_url: impl Into<String>) -> Self {
        CaptionRecord {
            id,
            caption: caption.into(),
            image_url: image_url.into(),
            image_ref: None,
            flags: BTreeSet::new(),
        }
    }

    pub fn with_image_ref(mut self, path: impl Into<PathBuf>) -> Self {
        self.image_ref = Some(path.into());
        self
    }

    /// A record is active while it carries no flags.
    pub fn is_active(&self) -> bool {
        self.flags.is_empty()
    }
}

/// An id-ordered set of records plus the history of filters applied to it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSlice {
    name: String,
    records: Vec<CaptionRecord>,
    provenance: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct SliceHeader {
    name: String,
    provenance: Vec<String>,
}

impl DatasetSlice {
    /// Builds a slice, sorting records by id. Duplicate ids are rejected.
    pub fn new(name: impl Into<String>, mut records: Vec<CaptionRecord>) -> Result<Self> {
        records.sort_by_key(|r| r.id);
        if let Some(w) = records.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(Error::Integrity(format!("duplicate record id {}", w[0].id)));
        }
        Ok(DatasetSlice {
            name: name.into(),
            records,
            provenance: Vec::new(),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn records(&self) -> &[CaptionRecord] {
        &self.records
    }

    pub fn provenance(&self) -> &[String] {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn active(&self) -> impl Iterator<Item = &CaptionRecord> {
        self.records.iter().filter(|r| r.is_active())
    }

    pub fn active_ids(&self) -> Vec<u64> {
        self.active().map(|r| r.id).collect()
    }

    pub fn get(&self, id: u64) -> Option<&CaptionRecord> {
        self.records
            .binary_search_by_key(&id, |r| r.id)
            .ok()
            .map(|i| &self.records[i])
    }

    fn derive(&self, records: Vec<CaptionRecord>, step: String) -> DatasetSlice {
        let mut provenance = self.provenance.clone();
        provenance.push(step);
        DatasetSlice {
            name: self.name.clone(),
            records,
            provenance,
        }
    }

    /// Serializes as JSON lines: a `{name, provenance}` header, then one record per line.
    pub fn to_jsonl(&self) -> String {
        let header = SliceHeader {
            name: self.name.clone(),
            provenance: self.provenance.clone(),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines
            .next()
            .ok_or_else(|| Error::EmptyInput("slice file has no header line".into()))?;
        let header: SliceHeader =
            serde_json::from_str(first).map_err(|e| Error::parse("slice header", e))?;
        let mut records = Vec::new();
        for (n, line) in lines {
            let rec: CaptionRecord = serde_json::from_str(line)
                .map_err(|e| Error::parse(format!("slice record on line {}", n + 1), e))?;
            records.push(rec);
        }
        if records.windows(2).any(|w| w[0].id >= w[1].id) {
            return Err(Error::Integrity(
                "slice records are not strictly ascending by id".into(),
            ));
        }
        Ok(DatasetSlice {
            name: header.name,
            records,
            provenance: header.provenance,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_jsonl().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text)
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    All,
    Any,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchUnit {
    Word,
    Substring,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub keywords: Vec<String>,
    pub match_mode: MatchMode,
    pub case_fold: bool,
    pub match_unit: MatchUnit,
}

impl FilterSpec {
    /// Case-folded whole-word matching.
    pub fn words(keywords: &[&str], match_mode: MatchMode) -> Self {
        FilterSpec {
            keywords: keywords.iter().map(|k| k.to_string()).collect(),
            match_mode,
            case_fold: true,
            match_unit: MatchUnit::Word,
        }
    }

    pub fn identity() -> Self {
        FilterSpec {
            keywords: Vec::new(),
            match_mode: MatchMode::All,
            case_fold: true,
            match_unit: MatchUnit::Word,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.keywords.is_empty()
    }

    fn describe(&self) -> String {
        if self.is_identity() {
            return "keywords: identity".to_string();
        }
        let mode = match self.match_mode {
            MatchMode::All => "all",
            MatchMode::Any => "any",
        };
        let unit = match self.match_unit {
            MatchUnit::Word => "word",
            MatchUnit::Substring => "substring",
        };
        format!(
            "keywords[{mode},{unit},case_fold={}]: {}",
            self.case_fold,
            self.keywords.join(",")
        )
    }

    /// Compiled matcher, so keywords are split once per filter pass.
    fn matcher(&self) -> impl Fn(&str) -> bool + '_ {
        let fold = self.case_fold;
        let word_keys: Vec<Vec<String>> = self
            .keywords
            .iter()
            .map(|k| text::words(k, fold))
            .collect();
        let substr_keys: Vec<String> = self
            .keywords
            .iter()
            .map(|k| if fold { k.to_lowercase() } else { k.clone() })
            .collect();
        move |caption: &str| {
            let hits: Vec<bool> = match self.match_unit {
                MatchUnit::Word => {
                    let caption_words = text::words(caption, fold);
                    word_keys
                        .iter()
                        .map(|k| !k.is_empty() && text::contains_sequence(&caption_words, k))
                        .collect()
                }
                MatchUnit::Substring => {
                    let hay = if fold {
                        caption.to_lowercase()
                    } else {
                        caption.to_string()
                    };
                    substr_keys.iter().map(|k| hay.contains(k.as_str())).collect()
                }
            };
            match self.match_mode {
                MatchMode::All => hits.iter().all(|&h| h),
                MatchMode::Any => hits.iter().any(|&h| h),
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetadataFormat {
    Tsv,
    Jsonl,
}

impl FromStr for MetadataFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tsv" => Ok(MetadataFormat::Tsv),
            "jsonl" => Ok(MetadataFormat::Jsonl),
            other => Err(Error::usage(format!(
                "unknown metadata format `{other}` (expected tsv or jsonl)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoadedSlice {
    pub slice: DatasetSlice,
    /// Rows that could not be parsed into a record.
    pub skipped: usize,
}

struct RawRow {
    id: Option<u64>,
    caption: String,
    url: String,
    image_path: Option<String>,
}

/// Load caption/url metadata. Rows without both a non-empty caption and url
/// are counted in `skipped`. Rows without an explicit id are numbered by their
/// position among parsed rows.
pub fn load_metadata(path: &Path, format: MetadataFormat) -> Result<LoadedSlice> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = Vec::new();
    for line in BufReader::new(file).lines() {
        lines.push(line.map_err(|e| Error::io(path, e))?);
    }
    let mut skipped = 0usize;
    let rows: Vec<Option<RawRow>> = match format {
        MetadataFormat::Tsv => parse_tsv(&lines),
        MetadataFormat::Jsonl => lines
            .iter()
            .filter(|l| !l.trim().is_empty())
            .map(|l| parse_jsonl_row(l))
            .collect(),
    };

    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    let mut next_id = 0u64;
    for row in rows {
        let Some(row) = row else {
            skipped += 1;
            continue;
        };
        let id = row.id.unwrap_or(next_id);
        if !seen.insert(id) {
            log::warn!("{}: duplicate id {id}, row skipped", path.display());
            skipped += 1;
            continue;
        }
        next_id += 1;
        let mut rec = CaptionRecord::new(id, row.caption, row.url);
        if let Some(p) = row.image_path.filter(|p| !p.is_empty()) {
            let p = PathBuf::from(p);
            rec.image_ref = Some(if p.is_relative() { base_dir.join(p) } else { p });
        }
        records.push(rec);
    }
    if records.is_empty() {
        return Err(Error::EmptyInput(format!(
            "no parsable rows in {} ({skipped} malformed)",
            path.display()
        )));
    }
    if skipped > 0 {
        log::info!("{}: skipped {skipped} malformed rows", path.display());
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "slice".into());
    Ok(LoadedSlice {
        slice: DatasetSlice::new(name, records)?,
        skipped,
    })
}

fn parse_tsv(lines: &[String]) -> Vec<Option<RawRow>> {
    let mut body = lines.iter().filter(|l| !l.trim().is_empty()).peekable();
    let mut cols = (0usize, 1usize, None::<usize>, None::<usize>);
    if let Some(first) = body.peek() {
        let names: Vec<String> = first.split('\t').map(|c| c.trim().to_lowercase()).collect();
        let pos = |n: &str| names.iter().position(|c| c == n);
        if let (Some(c), Some(u)) = (pos("caption"), pos("url")) {
            cols = (c, u, pos("id"), pos("image_path"));
            body.next();
        }
    }
    let (c_col, u_col, id_col, img_col) = cols;
    body.map(|line| {
        let fields: Vec<&str> = line.split('\t').collect();
        let caption = fields.get(c_col)?.trim();
        let url = fields.get(u_col)?.trim();
        if caption.is_empty() || url.is_empty() {
            return None;
        }
        let id = match id_col {
            Some(i) => Some(fields.get(i)?.trim().parse().ok()?),
            None => None,
        };
        // Without a header, an optional third column carries the image path.
        let img = match img_col {
            Some(i) => fields.get(i).map(|s| s.trim().to_string()),
            None if id_col.is_none() && c_col == 0 && u_col == 1 => {
                fields.get(2).map(|s| s.trim().to_string())
            }
            None => None,
        };
        Some(RawRow {
            id,
            caption: caption.to_string(),
            url: url.to_string(),
            image_path: img,
        })
    })
    .collect()
}

fn parse_jsonl_row(line: &str) -> Option<RawRow> {
    let v: serde_json::Value = serde_json::from_str(line).ok()?;
    let obj = v.as_object()?;
    let caption = obj.get("caption")?.as_str()?.trim();
    let url = obj.get("url")?.as_str()?.trim();
    if caption.is_empty() || url.is_empty() {
        return None;
    }
    let id = match obj.get("id") {
        Some(v) => Some(v.as_u64()?),
        None => None,
    };
    Some(RawRow {
        id,
        caption: caption.to_string(),
        url: url.to_string(),
        image_path: obj
            .get("image_path")
            .and_then(|v| v.as_str())
            .map(str::to_string),
    })
}

/// Keep the records whose captions match `spec`.
pub fn filter_by_keywords(slice: &DatasetSlice, spec: &FilterSpec) -> DatasetSlice {
    if spec.is_identity() {
        return slice.derive(slice.records.clone(), spec.describe());
    }
    let matches = spec.matcher();
    let kept = slice
        .records
        .iter()
        .filter(|r| matches(&r.caption))
        .cloned()
        .collect();
    slice.derive(kept, spec.describe())
}

/// Token counter used by the caption length filter.
pub trait Tokenizer {
    fn name(&self) -> String;

    /// Counts tokens per text. An `Err` in the outer result means the
    /// tokenizer is unavailable; inner errors are per-text failures.
    fn count_tokens(&self, texts: &[&str]) -> Result<Vec<Result<usize, String>>>;
}

/// Offline fallback: one token per whitespace-separated word.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn name(&self) -> String {
        "whitespace".into()
    }

    fn count_tokens(&self, texts: &[&str]) -> Result<Vec<Result<usize, String>>> {
        Ok(texts.iter().map(|t| Ok(t.split_whitespace().count())).collect())
    }
}

pub const DEFAULT_MAX_TOKENS: usize = 77;
const TOKENIZER_BATCH: usize = 256;

/// Flag captions longer than `max_tokens` as `too_long`. Captions the
/// tokenizer fails on are flagged `excluded`.
pub fn token_length_filter(
    slice: &DatasetSlice,
    tokenizer: &dyn Tokenizer,
    max_tokens: usize,
) -> Result<DatasetSlice> {
    let mut records = slice.records.clone();
    let active: Vec<usize> = (0..records.len()).filter(|&i| records[i].is_active()).collect();
    let mut failures = 0usize;
    for chunk in active.chunks(TOKENIZER_BATCH) {
        let texts: Vec<&str> = chunk.iter().map(|&i| slice.records[i].caption.as_str()).collect();
        let counts = tokenizer.count_tokens(&texts)?;
        if counts.len() != texts.len() {
            return Err(Error::backend(format!(
                "tokenizer returned {} counts for {} texts",
                counts.len(),
                texts.len()
            )));
        }
        for (&i, count) in chunk.iter().zip(counts) {
            match count {
                Ok(n) if n > max_tokens => {
                    records[i].flags.insert(Flag::TooLong);
                }
                Ok(_) => {}
                Err(msg) => {
                    log::warn!("tokenizer failed on record {}: {msg}", records[i].id);
                    records[i].flags.insert(Flag::Excluded);
                    failures += 1;
                }
            }
        }
    }
    if !active.is_empty() && failures == active.len() {
        return Err(Error::backend(format!(
            "tokenizer `{}` failed on all {failures} captions",
            tokenizer.name()
        )));
    }
    Ok(slice.derive(
        records,
        format!("token_length<={max_tokens} ({})", tokenizer.name()),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UrlPolicy {
    OfflineSyntactic,
    NetworkHead,
}

impl FromStr for UrlPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "offline" | "offline_syntactic" => Ok(UrlPolicy::OfflineSyntactic),
            "head" | "network_head" => Ok(UrlPolicy::NetworkHead),
            other => Err(Error::usage(format!(
                "unknown url policy `{other}` (expected offline or head)"
            ))),
        }
    }
}

impl fmt::Display for UrlPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UrlPolicy::OfflineSyntactic => "offline_syntactic",
            UrlPolicy::NetworkHead => "network_head",
        })
    }
}

/// A URL with a scheme and a host.
pub fn url_is_well_formed(raw: &str) -> bool {
    url::Url::parse(raw)
        .map(|u| u.host_str().is_some_and(|h| !h.is_empty()))
        .unwrap_or(false)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HeadOutcome {
    Ok(u16),
    Status(u16),
    TimedOut,
    Unreachable(String),
}

impl HeadOutcome {
    fn is_reachable_failure(&self) -> bool {
        matches!(self, HeadOutcome::TimedOut | HeadOutcome::Unreachable(_))
    }
}

/// Issues one HEAD-style liveness check.
pub trait UrlProber: Sync {
    fn head(&self, url: &str) -> HeadOutcome;
}

/// HEAD requests over HTTP(S). Redirects are not followed so 3xx counts as live.
pub struct HttpHeadProber {
    agent: ureq::Agent,
}

impl HttpHeadProber {
    pub fn new(timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .max_redirects(0)
            .build()
            .into();
        HttpHeadProber { agent }
    }
}

impl UrlProber for HttpHeadProber {
    fn head(&self, url: &str) -> HeadOutcome {
        match self.agent.head(url).call() {
            Ok(resp) => {
                let code = resp.status().as_u16();
                if (200..400).contains(&code) {
                    HeadOutcome::Ok(code)
                } else {
                    HeadOutcome::Status(code)
                }
            }
            Err(ureq::Error::Timeout(_)) => HeadOutcome::TimedOut,
            Err(e) => HeadOutcome::Unreachable(e.to_string()),
        }
    }
}

/// Flag syntactically malformed URLs.
pub fn validate_urls_offline(slice: &DatasetSlice) -> DatasetSlice {
    let records = slice
        .records
        .iter()
        .cloned()
        .map(|mut r| {
            if r.is_active() && !url_is_well_formed(&r.image_url) {
                r.flags.insert(Flag::UrlInvalid);
            }
            r
        })
        .collect();
    slice.derive(records, format!("urls: {}", UrlPolicy::OfflineSyntactic))
}

/// Flag malformed URLs, then probe the rest with at most `parallelism`
/// requests in flight. Flags are committed in id order.
pub fn validate_urls_network(
    slice: &DatasetSlice,
    prober: &dyn UrlProber,
    parallelism: usize,
) -> Result<DatasetSlice> {
    let mut records = slice.records.clone();
    let mut to_probe = Vec::new();
    for (i, r) in records.iter_mut().enumerate() {
        if !r.is_active() {
            continue;
        }
        if url_is_well_formed(&r.image_url) {
            to_probe.push(i);
        } else {
            r.flags.insert(Flag::UrlInvalid);
        }
    }

    let outcomes = parallel_map(&to_probe, parallelism.max(1), |&i| {
        prober.head(&slice.records[i].image_url)
    });

    let unreachable = outcomes.iter().filter(|o| o.is_reachable_failure()).count();
    if !to_probe.is_empty() && unreachable == to_probe.len() {
        return Err(Error::backend(format!(
            "network unavailable: {unreachable} of {} URLs unreachable",
            to_probe.len()
        )));
    }
    for (&i, outcome) in to_probe.iter().zip(&outcomes) {
        if !matches!(outcome, HeadOutcome::Ok(_)) {
            records[i].flags.insert(Flag::UrlInvalid);
        }
    }
    Ok(slice.derive(records, format!("urls: {}", UrlPolicy::NetworkHead)))
}

/// Dispatch on `policy`; the network policy uses an [`HttpHeadProber`].
pub fn validate_urls(
    slice: &DatasetSlice,
    policy: UrlPolicy,
    timeout: Duration,
    parallelism: usize,
) -> Result<DatasetSlice> {
    match policy {
        UrlPolicy::OfflineSyntactic => Ok(validate_urls_offline(slice)),
        UrlPolicy::NetworkHead => {
            validate_urls_network(slice, &HttpHeadProber::new(timeout), parallelism)
        }
    }
}

/// Map `f` over `items` on up to `workers` threads, keeping input order.
pub(crate) fn parallel_map<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    if items.is_empty() {
        return Vec::new();
    }
    let workers = workers.clamp(1, items.len());
    let next = AtomicUsize::new(0);
    let mut results: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                scope.spawn(|| {
                    let mut done = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        if i >= items.len() {
                            break;
                        }
                        done.push((i, f(&items[i])));
                    }
                    done
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("worker panicked") {
                results[i] = Some(r);
            }
        }
    });
    results.into_iter().map(|r| r.expect("every index visited")).collect()
}
