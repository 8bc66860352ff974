//! Model backend client: text/image embedding, seeded generation, zero-shot
//! detection and token counting.
//!
//! [`MockBackend`] runs in-process and is fully deterministic. [`HttpBackend`]
//! speaks the JSON wire contract of the model service.

mod http;
mod mock;

pub use http::HttpBackend;
pub use mock::{
    mock_generation_vector, mock_png, mock_unit_vector, read_mock_png, DetectionPlan, MockBackend, MockPlan,
    PositiveGenerations, ReplicationPlan, MOCK_DIM, MOCK_MAX_TOKENS, MOCK_MODEL_TAG,
};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::ingest::Tokenizer;

/// Per-item outcome inside an otherwise successful batch call.
pub type ItemResult<T> = std::result::Result<T, String>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub base_url: String,
    pub dim: usize,
    pub model_tag: String,
    pub mock: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendInfo {
    pub model_tag: String,
    pub dim: usize,
    pub max_tokens: usize,
    pub modes: Vec<String>,
    #[serde(default)]
    pub deterministic: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub steps: u32,
    pub guidance: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            steps: 50,
            guidance: 7.5,
            width: 512,
            height: 512,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerateReturn {
    Images,
    Embeddings,
}

#[derive(Debug, Clone)]
pub struct GenerateRequest<'a> {
    pub prompt: &'a str,
    pub seeds: &'a [u64],
    pub params: &'a GenParams,
    pub output: GenerateReturn,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Generated {
    /// Encoded image bytes (PNG).
    Image(Vec<u8>),
    Embedding(Vec<f32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedItem {
    pub seed: u64,
    pub output: ItemResult<Generated>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub present: bool,
    pub score: f64,
}

/// A model backend. Every batch method preserves input order; an outer `Err`
/// means the whole request failed.
pub trait Backend: Send + Sync {
    fn descriptor(&self) -> Result<BackendDescriptor>;

    fn info(&self) -> Result<BackendInfo>;

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<ItemResult<Vec<f32>>>>;

    fn embed_images(&self, images: &[Vec<u8>]) -> Result<Vec<ItemResult<Vec<f32>>>>;

    fn generate(&self, request: &GenerateRequest<'_>) -> Result<Vec<GeneratedItem>>;

    fn detect(&self, images: &[Vec<u8>], label: &str) -> Result<Vec<ItemResult<Detection>>>;

    fn count_tokens(&self, texts: &[String]) -> Result<Vec<ItemResult<usize>>>;

    /// Number of requests issued so far.
    fn request_count(&self) -> usize;

    fn backend_id(&self) -> Result<String> {
        Ok(self.descriptor()?.model_tag)
    }
}

/// Token counting through a backend's `count_tokens` endpoint.
pub struct BackendTokenizer<'a> {
    backend: &'a dyn Backend,
}

impl<'a> BackendTokenizer<'a> {
    pub fn new(backend: &'a dyn Backend) -> Self {
        BackendTokenizer { backend }
    }
}

impl Tokenizer for BackendTokenizer<'_> {
    fn name(&self) -> String {
        match self.backend.backend_id() {
            Ok(id) => format!("backend:{id}"),
            Err(_) => "backend".into(),
        }
    }

    fn count_tokens(&self, texts: &[&str]) -> Result<Vec<Result<usize, String>>> {
        let owned: Vec<String> = texts.iter().map(|t| t.to_string()).collect();
        self.backend.count_tokens(&owned)
    }
}
