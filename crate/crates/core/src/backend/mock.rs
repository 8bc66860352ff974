use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Cursor;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    Backend, BackendDescriptor, BackendInfo, Detection, GenerateRequest, GenerateReturn,
    Generated, GeneratedItem, ItemResult,
};
use crate::error::{Error, Result};

pub const MOCK_DIM: usize = 64;
pub const MOCK_MODEL_TAG: &str = "mock-v1";
pub const MOCK_MAX_TOKENS: usize = 77;

const MOCK_KEY_PREFIX: &[u8] = b"dupaudit-mock/v1/";
const PNG_MARKER_KEY: &str = "dupaudit-mock";
const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn fnv1a64(parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for &b in *part {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The mock embedding of `payload` under `domain` (`text`, `image` or `generate`).
///
/// key = FNV-1a-64 over `"dupaudit-mock/v1/" ++ domain ++ "/" ++ payload`;
/// component i (0-based) = 2·u − 1 with u = (splitmix64(key + (i+1)·0x9E3779B97F4A7C15) >> 11) / 2^53;
/// the 64 components are normalized in f64 and stored as f32.
pub fn mock_unit_vector(domain: &str, payload: &[u8]) -> Vec<f32> {
    let key = fnv1a64(&[MOCK_KEY_PREFIX, domain.as_bytes(), b"/", payload]);
    let raw: Vec<f64> = (0..MOCK_DIM as u64)
        .map(|i| {
            let z = splitmix64(key.wrapping_add((i + 1).wrapping_mul(GOLDEN_GAMMA)));
            ((z >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect();
    unit_f32(&raw)
}

fn unit_f32(raw: &[f64]) -> Vec<f32> {
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    raw.iter().map(|v| (v / norm) as f32).collect()
}

fn generation_payload(prompt: &str, seed: u64) -> Vec<u8> {
    let mut p = prompt.as_bytes().to_vec();
    p.push(0);
    p.extend_from_slice(&seed.to_le_bytes());
    p
}

/// Unit vector whose cosine with the unit `reference` is `similarity`. The
/// orthogonal part comes from the unplanted generation vector for (prompt, seed).
fn planted_vector(reference: &[f32], similarity: f64, prompt: &str, seed: u64) -> Vec<f32> {
    let r: Vec<f64> = reference.iter().map(|&x| f64::from(x)).collect();
    let r_norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
    let r: Vec<f64> = r.iter().map(|x| x / r_norm).collect();
    let noise = mock_unit_vector("generate", &generation_payload(prompt, seed));
    let mut u: Vec<f64> = noise.iter().map(|&x| f64::from(x)).collect();
    let along: f64 = u.iter().zip(&r).map(|(a, b)| a * b).sum();
    for (ui, ri) in u.iter_mut().zip(&r) {
        *ui -= along * ri;
    }
    let u_norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let s = similarity.clamp(-1.0, 1.0);
    let orth = (1.0 - s * s).max(0.0).sqrt();
    let v: Vec<f64> = r
        .iter()
        .zip(&u)
        .map(|(ri, ui)| s * ri + orth * ui / u_norm)
        .collect();
    unit_f32(&v)
}

/// Planted replication behaviour for one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationPlan {
    pub prompt: String,
    /// The training image the prompt replicates (any non-zero vector of the mock dim).
    pub reference: Vec<f32>,
    pub hit_similarity: f64,
    /// Similarity for seeds outside `hit_seeds`; unplanted noise when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub miss_similarity: Option<f64>,
    /// Seeds that replicate; every seed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hit_seeds: Option<BTreeSet<u64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositiveGenerations {
    pub prompt: String,
    /// Every seed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<BTreeSet<u64>>,
}

/// Planted detector verdicts for one label.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DetectionPlan {
    pub label: String,
    #[serde(default)]
    pub default_present: bool,
    #[serde(default)]
    pub positive_generations: Vec<PositiveGenerations>,
    /// SHA-256 (lowercase hex) of image payloads the detector answers true for.
    #[serde(default)]
    pub positive_images: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MockPlan {
    #[serde(default)]
    pub replications: Vec<ReplicationPlan>,
    #[serde(default)]
    pub detections: Vec<DetectionPlan>,
    /// Seeds whose generation always fails.
    #[serde(default)]
    pub failing_seeds: BTreeSet<u64>,
    /// Seeds whose generation fails this many times before succeeding.
    #[serde(default)]
    pub flaky_seeds: BTreeMap<u64, u32>,
    /// Every request fails as if the service were down.
    #[serde(default)]
    pub offline: bool,
}

impl MockPlan {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::parse("mock plan", e))
    }
}

/// Deterministic in-process backend.
pub struct MockBackend {
    plan: MockPlan,
    replications: HashMap<String, ReplicationPlan>,
    requests: AtomicUsize,
    flaky_attempts: Mutex<HashMap<u64, u32>>,
}

impl MockBackend {
    pub fn new(plan: MockPlan) -> Self {
        let replications = plan
            .replications
            .iter()
            .map(|r| (r.prompt.clone(), r.clone()))
            .collect();
        MockBackend {
            plan,
            replications,
            requests: AtomicUsize::new(0),
            flaky_attempts: Mutex::new(HashMap::new()),
        }
    }

    pub fn plan(&self) -> &MockPlan {
        &self.plan
    }

    fn request(&self) -> Result<()> {
        self.requests.fetch_add(1, Ordering::SeqCst);
        if self.plan.offline {
            return Err(Error::backend("mock backend is offline"));
        }
        Ok(())
    }

    /// Embedding of the image generated for (prompt, seed).
    pub fn generation_embedding(&self, prompt: &str, seed: u64) -> Vec<f32> {
        match self.replications.get(prompt) {
            Some(plan) => {
                let hit = plan.hit_seeds.as_ref().is_none_or(|s| s.contains(&seed));
                match (hit, plan.miss_similarity) {
                    (true, _) => planted_vector(&plan.reference, plan.hit_similarity, prompt, seed),
                    (false, Some(miss)) => planted_vector(&plan.reference, miss, prompt, seed),
                    (false, None) => mock_generation_vector(prompt, seed),
                }
            }
            None => mock_generation_vector(prompt, seed),
        }
    }

    fn generation_fails(&self, seed: u64) -> bool {
        if self.plan.failing_seeds.contains(&seed) {
            return true;
        }
        if let Some(&n) = self.plan.flaky_seeds.get(&seed) {
            let mut attempts = self.flaky_attempts.lock().expect("flaky attempt lock");
            let seen = attempts.entry(seed).or_insert(0);
            if *seen < n {
                *seen += 1;
                return true;
            }
        }
        false
    }

    fn detect_one(&self, image: &[u8], label: &str) -> ItemResult<Detection> {
        if image.is_empty() {
            return Err("undecodable image payload".into());
        }
        let Some(plan) = self.plan.detections.iter().find(|d| d.label == label) else {
            return Ok(Detection {
                present: false,
                score: 0.0,
            });
        };
        let present = match read_mock_png(image) {
            Some((seed, prompt)) => plan
                .positive_generations
                .iter()
                .find(|g| g.prompt == prompt)
                .map(|g| g.seeds.as_ref().is_none_or(|s| s.contains(&seed)))
                .unwrap_or(plan.default_present),
            None => {
                let digest = hex::encode(Sha256::digest(image));
                plan.positive_images.contains(&digest) || plan.default_present
            }
        };
        Ok(Detection {
            present,
            score: if present { 1.0 } else { 0.0 },
        })
    }
}

/// Unplanted generation embedding for (prompt, seed).
pub fn mock_generation_vector(prompt: &str, seed: u64) -> Vec<f32> {
    mock_unit_vector("generate", &generation_payload(prompt, seed))
}

/// An 8×8 grayscale PNG tagged with the (seed, prompt) that produced it.
pub fn mock_png(prompt: &str, seed: u64) -> Vec<u8> {
    let key = fnv1a64(&[&generation_payload(prompt, seed)]);
    let pixels: Vec<u8> = (0..64u64)
        .map(|i| (splitmix64(key.wrapping_add(i)) & 0xff) as u8)
        .collect();
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, 8, 8);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        enc.add_itxt_chunk(PNG_MARKER_KEY.to_string(), format!("{seed}\n{prompt}"))
            .expect("itxt chunk");
        let mut writer = enc.write_header().expect("png header");
        writer.write_image_data(&pixels).expect("png data");
    }
    out
}

/// The (seed, prompt) tag of a PNG made by [`mock_png`].
pub fn read_mock_png(bytes: &[u8]) -> Option<(u64, String)> {
    let reader = png::Decoder::new(Cursor::new(bytes)).read_info().ok()?;
    let chunk = reader
        .info()
        .utf8_text
        .iter()
        .find(|c| c.keyword == PNG_MARKER_KEY)?;
    let text = chunk.get_text().ok()?;
    let (seed, prompt) = text.split_once('\n')?;
    Some((seed.parse().ok()?, prompt.to_string()))
}

fn whitespace_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}

impl Backend for MockBackend {
    fn descriptor(&self) -> Result<BackendDescriptor> {
        Ok(BackendDescriptor {
            base_url: "mock".into(),
            dim: MOCK_DIM,
            model_tag: MOCK_MODEL_TAG.into(),
            mock: true,
        })
    }

    fn info(&self) -> Result<BackendInfo> {
        self.request()?;
        Ok(BackendInfo {
            model_tag: MOCK_MODEL_TAG.into(),
            dim: MOCK_DIM,
            max_tokens: MOCK_MAX_TOKENS,
            modes: ["embed_text", "embed_image", "generate", "detect", "count_tokens"]
                .map(String::from)
                .to_vec(),
            deterministic: true,
        })
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<ItemResult<Vec<f32>>>> {
        self.request()?;
        Ok(texts
            .iter()
            .map(|t| {
                let n = whitespace_tokens(t);
                if n > MOCK_MAX_TOKENS {
                    Err(format!("text has {n} tokens, limit {MOCK_MAX_TOKENS}"))
                } else {
                    Ok(mock_unit_vector("text", t.as_bytes()))
                }
            })
            .collect())
    }

    fn embed_images(&self, images: &[Vec<u8>]) -> Result<Vec<ItemResult<Vec<f32>>>> {
        self.request()?;
        Ok(images
            .iter()
            .map(|img| {
                if img.is_empty() {
                    return Err("undecodable image payload".to_string());
                }
                Ok(match read_mock_png(img) {
                    Some((seed, prompt)) => self.generation_embedding(&prompt, seed),
                    None => mock_unit_vector("image", img),
                })
            })
            .collect())
    }

    fn generate(&self, request: &GenerateRequest<'_>) -> Result<Vec<GeneratedItem>> {
        self.request()?;
        if request.seeds.is_empty() {
            return Err(Error::backend("generate: seeds must be non-empty"));
        }
        Ok(request
            .seeds
            .iter()
            .map(|&seed| {
                let output = if self.generation_fails(seed) {
                    Err(format!("generation failed for seed {seed}"))
                } else {
                    Ok(match request.output {
                        GenerateReturn::Embeddings => {
                            Generated::Embedding(self.generation_embedding(request.prompt, seed))
                        }
                        GenerateReturn::Images => {
                            Generated::Image(mock_png(request.prompt, seed))
                        }
                    })
                };
                GeneratedItem { seed, output }
            })
            .collect())
    }

    fn detect(&self, images: &[Vec<u8>], label: &str) -> Result<Vec<ItemResult<Detection>>> {
        self.request()?;
        if label.is_empty() {
            return Err(Error::backend("detect: label must be non-empty"));
        }
        Ok(images.iter().map(|img| self.detect_one(img, label)).collect())
    }

    fn count_tokens(&self, texts: &[String]) -> Result<Vec<ItemResult<usize>>> {
        self.request()?;
        Ok(texts.iter().map(|t| Ok(whitespace_tokens(t))).collect())
    }

    fn request_count(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }
}
