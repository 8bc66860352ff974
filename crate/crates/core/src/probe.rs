//! Multi-seed generation probes: generate one prompt under many seeds, score
//! every generation against reference training images, and measure how often
//! generations replicate them or contain a given object.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{Backend, GenParams, GenerateRequest, GenerateReturn, Generated};
use crate::cache::{embed_batch, EmbedInput, EmbedOptions, Payload};
use crate::embed::{dot, normalize_f32, EmbeddingMatrix, EmbeddingVector};
use crate::error::{Error, Result};
use crate::ingest::{parallel_map, write_file, DatasetSlice};

pub const DEFAULT_N_SEEDS: usize = 500;
pub const DEFAULT_BUCKET_EDGES: [f64; 3] = [0.70, 0.80, 0.85];

/// Slack on the extractability comparison, matching f32 embedding storage.
pub const EXTRACTABILITY_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSpec {
    pub prompt: String,
    #[serde(default)]
    pub highlight_keywords: Vec<String>,
    pub n_seeds: usize,
    pub base_seed: u64,
    pub gen_params: GenParams,
}

impl ProbeSpec {
    pub fn new(prompt: impl Into<String>) -> Self {
        ProbeSpec {
            prompt: prompt.into(),
            highlight_keywords: Vec::new(),
            n_seeds: DEFAULT_N_SEEDS,
            base_seed: 0,
            gen_params: GenParams::default(),
        }
    }

    /// Stable identifier used to name persisted images.
    pub fn probe_id(&self) -> String {
        let json = serde_json::to_vec(self).expect("probe spec serializes");
        hex::encode(&Sha256::digest(json)[..8])
    }
}

/// `n` consecutive seeds from `base_seed`, wrapping at `u64::MAX`.
pub fn derive_seeds(base_seed: u64, n: usize) -> Result<Vec<u64>> {
    if n == 0 {
        return Err(Error::usage("a probe needs at least one seed"));
    }
    Ok((0..n as u64).map(|i| base_seed.wrapping_add(i)).collect())
}

/// Training-side embeddings a probe is scored against.
#[derive(Debug, Clone)]
pub struct ReferenceSet {
    images: EmbeddingMatrix,
    texts: EmbeddingMatrix,
}

#[derive(Debug, Serialize, Deserialize)]
struct ReferenceSetFile {
    images: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    texts: Option<PathBuf>,
}

impl ReferenceSet {
    pub fn new(images: EmbeddingMatrix, texts: EmbeddingMatrix) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::degenerate("reference image set is empty"));
        }
        if images.backend_id() != texts.backend_id() {
            return Err(Error::usage(format!(
                "reference images come from `{}` but texts from `{}`",
                images.backend_id(),
                texts.backend_id()
            )));
        }
        Ok(ReferenceSet { images, texts })
    }

    pub fn images(&self) -> &EmbeddingMatrix {
        &self.images
    }

    pub fn texts(&self) -> &EmbeddingMatrix {
        &self.texts
    }

    pub fn backend_id(&self) -> &str {
        self.images.backend_id()
    }

    /// Load a `{"images": PATH, "texts": PATH?}` file; paths are relative to it.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ReferenceSetFile =
            serde_json::from_str(&text).map_err(|e| Error::parse("reference set", e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let images = EmbeddingMatrix::load(&base.join(&file.images))?;
        let texts = match file.texts {
            Some(p) => EmbeddingMatrix::load(&base.join(p))?,
            None => EmbeddingMatrix::empty(images.dim(), crate::embed::Modality::Text, images.backend_id())?,
        };
        Self::new(images, texts)
    }

    pub fn write_descriptor(path: &Path, images: &Path, texts: Option<&Path>) -> Result<()> {
        let file = ReferenceSetFile {
            images: images.to_path_buf(),
            texts: texts.map(Path::to_path_buf),
        };
        let json = serde_json::to_string_pretty(&file).expect("refset serializes");
        write_file(path, json.as_bytes())
    }

    fn check_backend(&self, backend_id: &str) -> Result<()> {
        if backend_id != self.backend_id() {
            return Err(Error::usage(format!(
                "references were embedded by `{}` but the probe backend is `{backend_id}`; \
                 cross-model similarities are refused",
                self.backend_id()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    CosineDistance,
    L2,
}

/// A candidate counts as extracted when `metric(candidate, original) <= delta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemorizationCriterion {
    pub metric: Metric,
    pub delta: f64,
}

impl MemorizationCriterion {
    pub fn new(metric: Metric, delta: f64) -> Result<Self> {
        if delta.is_nan() || delta < 0.0 {
            return Err(Error::usage(format!("delta must be non-negative, got {delta}")));
        }
        Ok(MemorizationCriterion { metric, delta })
    }

    pub fn distance(&self, a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
        if a.dim() != b.dim() {
            return Err(Error::usage(format!(
                "dimension mismatch: {} vs {}",
                a.dim(),
                b.dim()
            )));
        }
        Ok(match self.metric {
            Metric::CosineDistance => 1.0 - dot(a.values(), b.values()),
            Metric::L2 => a
                .values()
                .iter()
                .zip(b.values())
                .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
                .sum::<f64>()
                .sqrt(),
        })
    }
}

pub fn is_extractable(
    candidate: &EmbeddingVector,
    original: &EmbeddingVector,
    criterion: &MemorizationCriterion,
) -> Result<bool> {
    Ok(criterion.distance(candidate, original)? <= criterion.delta + EXTRACTABILITY_TOLERANCE)
}

/// Percentage of `sims` strictly above `threshold`.
pub fn percent_above(sims: &[f64], threshold: f64) -> Result<f64> {
    if sims.is_empty() {
        return Err(Error::degenerate("no similarities to summarize"));
    }
    let above = sims.iter().filter(|&&s| s > threshold).count();
    Ok((100 * above) as f64 / sims.len() as f64)
}

/// Counts of similarities per band: `(-inf, e0)`, `[e0, e1)`, ..., `[e_last, inf)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityBuckets {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl SimilarityBuckets {
    pub fn from_sims(edges: &[f64], sims: &[f64]) -> Result<Self> {
        if edges.iter().any(|e| !e.is_finite()) || edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::usage("bucket edges must be finite and strictly ascending"));
        }
        let mut counts = vec![0usize; edges.len() + 1];
        for &s in sims {
            counts[edges.partition_point(|&e| e <= s)] += 1;
        }
        Ok(SimilarityBuckets {
            edges: edges.to_vec(),
            counts,
        })
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Labels such as `<0.70`, `0.70-0.80`, `>=0.85`.
    pub fn labels(&self) -> Vec<String> {
        let e = &self.edges;
        if e.is_empty() {
            return vec!["all".into()];
        }
        let mut out = vec![format!("<{:.2}", e[0])];
        for w in e.windows(2) {
            out.push(format!("{:.2}-{:.2}", w[0], w[1]));
        }
        out.push(format!(">={:.2}", e[e.len() - 1]));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<PathBuf>,
    /// Absent when the seed failed.
    pub sim_to_reference: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectPresence {
    pub label: String,
    pub percent: f64,
    pub positives: usize,
    pub answered: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub probe_id: String,
    pub backend_id: String,
    pub spec: ProbeSpec,
    pub threshold: f64,
    pub per_seed: Vec<SeedOutcome>,
    pub failed_seeds: Vec<u64>,
    pub text_similarity: Option<f64>,
    pub buckets: SimilarityBuckets,
    pub percent_above: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_presence: Option<ObjectPresence>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<ObjectPresence>,
}

impl ProbeResult {
    pub fn successful_sims(&self) -> Vec<f64> {
        self.per_seed.iter().filter_map(|s| s.sim_to_reference).collect()
    }

    /// The highest-similarity seed inside each bucket, in bucket order.
    pub fn band_exemplars(&self) -> Vec<Option<&SeedOutcome>> {
        let edges = &self.buckets.edges;
        let mut best: Vec<Option<&SeedOutcome>> = vec![None; edges.len() + 1];
        for s in &self.per_seed {
            let Some(sim) = s.sim_to_reference else { continue };
            let b = edges.partition_point(|&e| e <= sim);
            if best[b].is_none_or(|cur| sim > cur.sim_to_reference.unwrap_or(f64::MIN)) {
                best[b] = Some(s);
            }
        }
        best
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("probe result serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::parse("probe result", e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProbeMode {
    /// Ask the backend for embeddings directly; no images are kept.
    EmbeddingsOnly,
    /// Persist images as `{dir}/{probe_id}/{seed}.png` and embed them.
    Images { dir: PathBuf },
}

#[derive(Debug, Clone)]
pub struct ProbeOptions {
    pub mode: ProbeMode,
    pub bucket_edges: Vec<f64>,
    pub batch_size: usize,
    pub concurrency: usize,
    pub retries: u32,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions {
            mode: ProbeMode::EmbeddingsOnly,
            bucket_edges: DEFAULT_BUCKET_EDGES.to_vec(),
            batch_size: 25,
            concurrency: 4,
            retries: 2,
        }
    }
}

type SeedGeneration = (u64, std::result::Result<Generated, String>);

fn generate_batch(
    backend: &dyn Backend,
    spec: &ProbeSpec,
    seeds: &[u64],
    output: GenerateReturn,
    retries: u32,
) -> Vec<SeedGeneration> {
    let mut done: Vec<Option<std::result::Result<Generated, String>>> = vec![None; seeds.len()];
    let mut pending: Vec<usize> = (0..seeds.len()).collect();
    for attempt in 0..=retries {
        if pending.is_empty() {
            break;
        }
        let ask: Vec<u64> = pending.iter().map(|&i| seeds[i]).collect();
        let request = GenerateRequest {
            prompt: &spec.prompt,
            seeds: &ask,
            params: &spec.gen_params,
            output,
        };
        let mut retry = Vec::new();
        match backend.generate(&request) {
            Ok(items) if items.len() == ask.len() => {
                for (&i, item) in pending.iter().zip(items) {
                    if item.output.is_err() && attempt < retries {
                        retry.push(i);
                    }
                    done[i] = Some(item.output);
                }
            }
            Ok(items) => {
                let msg = format!("backend answered {} items for {} seeds", items.len(), ask.len());
                for &i in &pending {
                    done[i] = Some(Err(msg.clone()));
                }
                retry = pending.clone();
            }
            Err(e) => {
                log::warn!("generate batch failed (attempt {}): {e}", attempt + 1);
                for &i in &pending {
                    done[i] = Some(Err(e.to_string()));
                }
                retry = pending.clone();
            }
        }
        pending = retry;
    }
    seeds
        .iter()
        .zip(done)
        .map(|(&s, r)| (s, r.expect("every seed attempted")))
        .collect()
}

/// Generate `spec.n_seeds` images and score each against the references.
/// Failed seeds are reported and excluded from every denominator.
pub fn run_probe(
    spec: &ProbeSpec,
    backend: &dyn Backend,
    refs: &ReferenceSet,
    threshold: f64,
    opts: &ProbeOptions,
) -> Result<ProbeResult> {
    let backend_id = backend.backend_id()?;
    refs.check_backend(&backend_id)?;
    let seeds = derive_seeds(spec.base_seed, spec.n_seeds)?;
    let probe_id = spec.probe_id();
    let output = match opts.mode {
        ProbeMode::EmbeddingsOnly => GenerateReturn::Embeddings,
        ProbeMode::Images { .. } => GenerateReturn::Images,
    };

    let batches: Vec<&[u64]> = seeds.chunks(opts.batch_size.max(1)).collect();
    let generated: Vec<SeedGeneration> = parallel_map(&batches, opts.concurrency, |b| {
        generate_batch(backend, spec, b, output, opts.retries)
    })
    .into_iter()
    .flatten()
    .collect();

    let mut per_seed: Vec<SeedOutcome> = Vec::with_capacity(seeds.len());
    let mut vectors: Vec<Option<std::result::Result<EmbeddingVector, String>>> = Vec::new();
    let mut to_embed: Vec<EmbedInput> = Vec::new();
    for (idx, (seed, gen)) in generated.into_iter().enumerate() {
        let mut outcome = SeedOutcome {
            seed,
            image_ref: None,
            sim_to_reference: None,
            error: None,
        };
        let vector = match gen {
            Err(e) => Some(Err(e)),
            Ok(Generated::Embedding(raw)) => {
                Some(normalize_f32(&raw).map_err(|e| e.to_string()))
            }
            Ok(Generated::Image(bytes)) => {
                if let ProbeMode::Images { dir } = &opts.mode {
                    let path = dir.join(&probe_id).join(format!("{seed}.png"));
                    write_file(&path, &bytes)?;
                    outcome.image_ref = Some(path);
                }
                to_embed.push(EmbedInput {
                    id: idx as u64,
                    payload: Payload::Image(bytes),
                });
                None
            }
        };
        per_seed.push(outcome);
        vectors.push(vector);
    }

    if !to_embed.is_empty() {
        let embed_opts = EmbedOptions {
            batch_size: opts.batch_size.max(1),
            retries: opts.retries,
            concurrency: opts.concurrency,
        };
        let out = embed_batch(
            &to_embed,
            crate::embed::Modality::Image,
            backend,
            None,
            &embed_opts,
        )?;
        for (idx, v) in out.matrix.iter() {
            vectors[idx as usize] = Some(Ok(v.clone()));
        }
        for f in out.failures {
            vectors[f.id as usize] = Some(Err(f.reason));
        }
    }

    let mut failed_seeds = Vec::new();
    for (outcome, v) in per_seed.iter_mut().zip(vectors) {
        match v {
            Some(Ok(v)) => {
                let (_, sim) = refs
                    .images()
                    .max_similarity(&v)?
                    .expect("reference set is non-empty");
                outcome.sim_to_reference = Some(sim);
            }
            Some(Err(e)) => {
                outcome.error = Some(e);
                failed_seeds.push(outcome.seed);
            }
            None => {
                outcome.error = Some("image was not embedded".into());
                failed_seeds.push(outcome.seed);
            }
        }
    }

    let sims: Vec<f64> = per_seed.iter().filter_map(|s| s.sim_to_reference).collect();
    if sims.is_empty() {
        return Err(Error::backend(format!(
            "all {} seeds failed for prompt `{}`",
            seeds.len(),
            spec.prompt
        )));
    }
    if !failed_seeds.is_empty() {
        log::warn!("{} of {} seeds failed", failed_seeds.len(), seeds.len());
    }
    let buckets = SimilarityBuckets::from_sims(&opts.bucket_edges, &sims)?;
    let text_similarity = if refs.texts().is_empty() {
        None
    } else {
        Some(text_similarity(&spec.prompt, refs, backend)?)
    };

    Ok(ProbeResult {
        probe_id,
        backend_id,
        spec: spec.clone(),
        threshold,
        percent_above: percent_above(&sims, threshold)?,
        per_seed,
        failed_seeds,
        text_similarity,
        buckets,
        object_presence: None,
        baseline: None,
    })
}

/// Largest cosine similarity between the prompt's text embedding and the
/// reference caption corpus.
pub fn text_similarity(prompt: &str, refs: &ReferenceSet, backend: &dyn Backend) -> Result<f64> {
    if refs.texts().is_empty() {
        return Err(Error::degenerate("reference text corpus is empty"));
    }
    refs.check_backend(&backend.backend_id()?)?;
    let mut items = backend.embed_texts(&[prompt.to_string()])?;
    let raw = items
        .pop()
        .ok_or_else(|| Error::backend("embed returned no item"))?
        .map_err(|e| Error::backend(format!("embedding the prompt failed: {e}")))?;
    let query = normalize_f32(&raw)?;
    let (_, best) = refs
        .texts()
        .max_similarity(&query)?
        .expect("corpus is non-empty");
    Ok(best)
}

fn detect_images(
    images: &[(usize, Vec<u8>)],
    detector: &dyn Backend,
    label: &str,
    batch_size: usize,
    retries: u32,
) -> Result<(usize, usize, usize)> {
    let mut positives = 0;
    let mut answered = 0;
    let mut failed = 0;
    for chunk in images.chunks(batch_size.max(1)) {
        let payloads: Vec<Vec<u8>> = chunk.iter().map(|(_, b)| b.clone()).collect();
        let mut attempt = 0;
        let verdicts = loop {
            match detector.detect(&payloads, label) {
                Ok(v) if v.len() == payloads.len() => break v,
                Ok(v) => {
                    return Err(Error::backend(format!(
                        "detector answered {} items for {} images",
                        v.len(),
                        payloads.len()
                    )))
                }
                Err(e) if attempt >= retries => return Err(e),
                Err(e) => {
                    log::warn!("detect batch failed (attempt {}): {e}", attempt + 1);
                    attempt += 1;
                }
            }
        };
        for v in verdicts {
            match v {
                Ok(d) => {
                    answered += 1;
                    if d.present {
                        positives += 1;
                    }
                }
                Err(_) => failed += 1,
            }
        }
    }
    Ok((positives, answered, failed))
}

fn presence(label: &str, positives: usize, answered: usize, failed: usize) -> Result<ObjectPresence> {
    if answered == 0 {
        return Err(Error::degenerate(format!(
            "no detections answered for `{label}` ({failed} failed)"
        )));
    }
    Ok(ObjectPresence {
        label: label.to_string(),
        percent: (100 * positives) as f64 / answered as f64,
        positives,
        answered,
        failed,
    })
}

const DETECT_BATCH: usize = 32;
const DETECT_RETRIES: u32 = 2;

/// Percentage of a probe's generated images in which the detector finds `label`.
pub fn object_presence_rate(
    result: &ProbeResult,
    detector: &dyn Backend,
    label: &str,
) -> Result<ObjectPresence> {
    let generated: Vec<&SeedOutcome> = result
        .per_seed
        .iter()
        .filter(|s| s.sim_to_reference.is_some())
        .collect();
    if generated.iter().any(|s| s.image_ref.is_none()) {
        return Err(Error::Mode(
            "probe was run in embeddings-only mode; re-run it with image persistence".into(),
        ));
    }
    let mut images = Vec::with_capacity(generated.len());
    let mut unreadable = 0;
    for (i, s) in generated.iter().enumerate() {
        let path = s.image_ref.as_ref().expect("checked above");
        match fs::read(path) {
            Ok(b) => images.push((i, b)),
            Err(e) => {
                log::warn!("cannot read {}: {e}", path.display());
                unreadable += 1;
            }
        }
    }
    let (positives, answered, failed) =
        detect_images(&images, detector, label, DETECT_BATCH, DETECT_RETRIES)?;
    presence(label, positives, answered, failed + unreadable)
}

/// Detector-positive percentage over a seeded sample of `sample_n` training images.
pub fn baseline_object_rate(
    slice: &DatasetSlice,
    sample_n: usize,
    detector: &dyn Backend,
    label: &str,
    seed: u64,
) -> Result<ObjectPresence> {
    if sample_n == 0 {
        return Err(Error::usage("baseline sample size must be positive"));
    }
    let eligible: Vec<&Path> = slice
        .active()
        .filter_map(|r| r.image_ref.as_deref())
        .filter(|p| p.is_file())
        .collect();
    if eligible.len() < sample_n {
        return Err(Error::degenerate(format!(
            "baseline needs {sample_n} images but only {} records have readable images (short by {})",
            eligible.len(),
            sample_n - eligible.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, eligible.len(), sample_n).into_vec();
    picked.sort_unstable();
    let mut images = Vec::with_capacity(sample_n);
    for (i, &idx) in picked.iter().enumerate() {
        let path = eligible[idx];
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        images.push((i, bytes));
    }
    let (positives, answered, failed) =
        detect_images(&images, detector, label, DETECT_BATCH, DETECT_RETRIES)?;
    presence(label, positives, answered, failed)
}
