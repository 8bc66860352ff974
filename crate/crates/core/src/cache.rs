//! Batched embedding through a backend, with an on-disk cache keyed by
//! (backend id, modality, content hash).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::backend::{Backend, ItemResult};
use crate::embed::{normalize_f32, EmbeddingMatrix, EmbeddingVector, Modality};
use crate::error::{Error, Result};
use crate::ingest::{parallel_map, write_file, DatasetSlice};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Payload {
    Text(String),
    Image(Vec<u8>),
}

impl Payload {
    fn bytes(&self) -> &[u8] {
        match self {
            Payload::Text(t) => t.as_bytes(),
            Payload::Image(b) => b,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmbedInput {
    pub id: u64,
    pub payload: Payload,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmbedFailure {
    pub id: u64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmbedOptions {
    pub batch_size: usize,
    /// Extra attempts for failed batches and failed items.
    pub retries: u32,
    pub concurrency: usize,
}

impl Default for EmbedOptions {
    fn default() -> Self {
        EmbedOptions {
            batch_size: 32,
            retries: 2,
            concurrency: 4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EmbedOutcome {
    pub matrix: EmbeddingMatrix,
    pub failures: Vec<EmbedFailure>,
    pub cache_hits: usize,
}

/// Content-addressed store of raw little-endian f32 vectors.
#[derive(Debug, Clone)]
pub struct EmbeddingCache {
    root: PathBuf,
}

impl EmbeddingCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        EmbeddingCache { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn key(backend_id: &str, modality: Modality, payload: &[u8]) -> String {
        let mut h = Sha256::new();
        h.update(backend_id.as_bytes());
        h.update([0]);
        h.update(modality.as_str().as_bytes());
        h.update([0]);
        h.update(payload);
        hex::encode(h.finalize())
    }

    fn path_for(&self, key: &str) -> PathBuf {
        self.root.join(&key[..2]).join(format!("{}.f32", &key[2..]))
    }

    fn get(&self, key: &str, dim: usize) -> Result<Option<EmbeddingVector>> {
        let path = self.path_for(key);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(Error::io(path, e)),
        };
        if bytes.len() != dim * 4 {
            log::warn!("ignoring cache entry {} of wrong size", path.display());
            return Ok(None);
        }
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(EmbeddingVector::from_unit(values).ok())
    }

    fn put(&self, key: &str, v: &EmbeddingVector) -> Result<()> {
        let bytes: Vec<u8> = v.values().iter().flat_map(|x| x.to_le_bytes()).collect();
        write_file(&self.path_for(key), &bytes)
    }
}

/// Build embedding inputs for the active records of `slice`. Image inputs
/// read `image_ref`; records without a readable image are returned as failures.
pub fn inputs_from_slice(
    slice: &DatasetSlice,
    modality: Modality,
) -> (Vec<EmbedInput>, Vec<EmbedFailure>) {
    let mut inputs = Vec::new();
    let mut failures = Vec::new();
    for r in slice.active() {
        let payload = match modality {
            Modality::Text => Ok(Payload::Text(r.caption.clone())),
            Modality::Image => match &r.image_ref {
                None => Err("record has no image_ref".to_string()),
                Some(p) => fs::read(p)
                    .map(Payload::Image)
                    .map_err(|e| format!("reading {}: {e}", p.display())),
            },
        };
        match payload {
            Ok(payload) => inputs.push(EmbedInput { id: r.id, payload }),
            Err(reason) => failures.push(EmbedFailure { id: r.id, reason }),
        }
    }
    (inputs, failures)
}

fn call_backend(
    backend: &dyn Backend,
    modality: Modality,
    payloads: &[&Payload],
) -> Result<Vec<ItemResult<Vec<f32>>>> {
    let out = match modality {
        Modality::Text => {
            let texts: Vec<String> = payloads
                .iter()
                .map(|p| match p {
                    Payload::Text(t) => Ok(t.clone()),
                    Payload::Image(_) => Err(Error::usage("image payload in a text batch")),
                })
                .collect::<Result<_>>()?;
            backend.embed_texts(&texts)?
        }
        Modality::Image => {
            let images: Vec<Vec<u8>> = payloads.iter().map(|p| p.bytes().to_vec()).collect();
            backend.embed_images(&images)?
        }
    };
    if out.len() != payloads.len() {
        return Err(Error::backend(format!(
            "embed returned {} items for {} inputs",
            out.len(),
            payloads.len()
        )));
    }
    Ok(out)
}

/// Embed a batch of inputs. Cached vectors are reused; misses are sent to the
/// backend in batches of `opts.batch_size`, and the matrix is assembled in id
/// order regardless of completion order.
pub fn embed_batch(
    inputs: &[EmbedInput],
    modality: Modality,
    backend: &dyn Backend,
    cache: Option<&EmbeddingCache>,
    opts: &EmbedOptions,
) -> Result<EmbedOutcome> {
    let descriptor = backend.descriptor()?;
    let backend_id = descriptor.model_tag.clone();
    let dim = descriptor.dim;

    let mut by_id: BTreeMap<u64, &Payload> = BTreeMap::new();
    for input in inputs {
        if by_id.insert(input.id, &input.payload).is_some() {
            return Err(Error::usage(format!("duplicate input id {}", input.id)));
        }
    }

    let mut vectors: BTreeMap<u64, EmbeddingVector> = BTreeMap::new();
    let mut misses: Vec<(u64, String)> = Vec::new();
    for (&id, payload) in &by_id {
        let key = EmbeddingCache::key(&backend_id, modality, payload.bytes());
        match cache.map(|c| c.get(&key, dim)).transpose()?.flatten() {
            Some(v) => {
                vectors.insert(id, v);
            }
            None => misses.push((id, key)),
        }
    }
    let cache_hits = vectors.len();

    let mut failures: BTreeMap<u64, String> = BTreeMap::new();
    let mut pending = misses;
    for attempt in 0..=opts.retries {
        if pending.is_empty() {
            break;
        }
        let batches: Vec<&[(u64, String)]> = pending.chunks(opts.batch_size.max(1)).collect();
        let results = parallel_map(&batches, opts.concurrency, |batch| {
            let payloads: Vec<&Payload> = batch.iter().map(|(id, _)| by_id[id]).collect();
            call_backend(backend, modality, &payloads)
        });
        let mut retry = Vec::new();
        for (batch, result) in batches.iter().zip(results) {
            let items = match result {
                Ok(items) => items,
                Err(e) if attempt == opts.retries => return Err(e),
                Err(e) => {
                    log::warn!("embed batch failed (attempt {}): {e}", attempt + 1);
                    retry.extend(batch.iter().cloned());
                    continue;
                }
            };
            for ((id, key), item) in batch.iter().zip(items) {
                let vector = item.and_then(|raw| {
                    if raw.len() != dim {
                        return Err(format!("backend returned dim {} (expected {dim})", raw.len()));
                    }
                    normalize_f32(&raw).map_err(|e| e.to_string())
                });
                match vector {
                    Ok(v) => {
                        if let Some(c) = cache {
                            c.put(key, &v)?;
                        }
                        failures.remove(id);
                        vectors.insert(*id, v);
                    }
                    Err(reason) => {
                        failures.insert(*id, reason);
                        retry.push((*id, key.clone()));
                    }
                }
            }
        }
        pending = retry;
    }

    let (ids, vecs): (Vec<u64>, Vec<EmbeddingVector>) = vectors.into_iter().unzip();
    let matrix = EmbeddingMatrix::new(ids, vecs, dim, modality, backend_id)?;
    Ok(EmbedOutcome {
        matrix,
        failures: failures
            .into_iter()
            .map(|(id, reason)| EmbedFailure { id, reason })
            .collect(),
        cache_hits,
    })
}
