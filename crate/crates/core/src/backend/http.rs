//! JSON-over-HTTP client for the model service.
//!
//! Endpoints: `GET /info`, `GET /health`, `POST /embed/text`, `POST /embed/image`,
//! `POST /generate`, `POST /detect`, `POST /count_tokens`. Images travel as
//! standard base-64 inside JSON. Failed requests answer non-2xx with
//! `{"error": {"code", "message", "item_index"?}}`; per-item failures appear
//! in place of the item as `{"error": {...}}`.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::OnceLock;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{
    Backend, BackendDescriptor, BackendInfo, Detection, GenerateRequest, GenerateReturn,
    Generated, GeneratedItem, ItemResult,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WireError {
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub item_index: Option<usize>,
}

#[derive(Debug, Deserialize)]
struct ErrorEnvelope {
    error: WireError,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum ItemOrError<T> {
    Item(T),
    Error(ErrorEnvelope),
}

impl<T> ItemOrError<T> {
    fn into_result(self) -> ItemResult<T> {
        match self {
            ItemOrError::Item(t) => Ok(t),
            ItemOrError::Error(e) => Err(format!("{}: {}", e.error.code, e.error.message)),
        }
    }
}

#[derive(Debug, Deserialize)]
struct EmbedResponse {
    embeddings: Vec<ItemOrError<Vec<f32>>>,
}

#[derive(Debug, Deserialize)]
struct GenerateResponse {
    items: Vec<WireGenerated>,
}

#[derive(Debug, Deserialize)]
struct WireGenerated {
    seed: u64,
    #[serde(default)]
    image: Option<String>,
    #[serde(default)]
    embedding: Option<Vec<f32>>,
    #[serde(default)]
    error: Option<WireError>,
}

#[derive(Debug, Deserialize)]
struct DetectResponse {
    present: Vec<Option<bool>>,
    #[serde(default)]
    scores: Vec<Option<f64>>,
    #[serde(default)]
    errors: Vec<WireError>,
}

#[derive(Debug, Deserialize)]
struct CountResponse {
    counts: Vec<ItemOrError<usize>>,
}

pub struct HttpBackend {
    base_url: String,
    agent: ureq::Agent,
    descriptor: OnceLock<BackendDescriptor>,
    requests: AtomicUsize,
}

impl HttpBackend {
    pub fn new(base_url: impl Into<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        HttpBackend {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            agent,
            descriptor: OnceLock::new(),
            requests: AtomicUsize::new(0),
        }
    }

    /// Fix the model tag and dimension up front so cached work needs no `/info` call.
    pub fn with_identity(self, model_tag: impl Into<String>, dim: usize) -> Self {
        let _ = self.descriptor.set(BackendDescriptor {
            base_url: self.base_url.clone(),
            dim,
            model_tag: model_tag.into(),
            mock: false,
        });
        self
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    pub fn health(&self) -> Result<()> {
        let _: serde_json::Value = self.get("/health")?;
        Ok(())
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.base_url, path)
    }

    fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T> {
        self.requests.fetch_add(1, Ordering::SeqCst);
        let resp = self
            .agent
            .get(&self.url(path))
            .call()
            .map_err(|e| Error::backend(format!("GET {path}: {e}")))?;
        read_response(path, resp)
    }

    fn post<T: DeserializeOwned>(&self, path: &str, body: &serde_json::Value) -> Result<T> {
        self.requests.fetch_add(1, Ordering::SeqCst);
        let resp = self
            .agent
            .post(&self.url(path))
            .send_json(body)
            .map_err(|e| Error::backend(format!("POST {path}: {e}")))?;
        read_response(path, resp)
    }

    fn embed(&self, path: &str, body: serde_json::Value, n: usize) -> Result<Vec<ItemResult<Vec<f32>>>> {
        let resp: EmbedResponse = self.post(path, &body)?;
        check_len(path, resp.embeddings.len(), n)?;
        Ok(resp.embeddings.into_iter().map(ItemOrError::into_result).collect())
    }
}

fn read_response<T: DeserializeOwned>(
    path: &str,
    mut resp: ureq::http::Response<ureq::Body>,
) -> Result<T> {
    let status = resp.status().as_u16();
    let text = resp
        .body_mut()
        .read_to_string()
        .map_err(|e| Error::backend(format!("{path}: reading body: {e}")))?;
    if !(200..300).contains(&status) {
        let detail = serde_json::from_str::<ErrorEnvelope>(&text)
            .map(|e| format!("{}: {}", e.error.code, e.error.message))
            .unwrap_or(text);
        return Err(Error::backend(format!("{path}: HTTP {status}: {detail}")));
    }
    serde_json::from_str(&text).map_err(|e| Error::backend(format!("{path}: bad response: {e}")))
}

fn check_len(path: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::backend(format!(
            "{path}: {got} items returned for {want} inputs"
        )));
    }
    Ok(())
}

impl Backend for HttpBackend {
    fn descriptor(&self) -> Result<BackendDescriptor> {
        if let Some(d) = self.descriptor.get() {
            return Ok(d.clone());
        }
        let info = self.info()?;
        let d = BackendDescriptor {
            base_url: self.base_url.clone(),
            dim: info.dim,
            model_tag: info.model_tag,
            mock: false,
        };
        Ok(self.descriptor.get_or_init(|| d).clone())
    }

    fn info(&self) -> Result<BackendInfo> {
        self.get("/info")
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<ItemResult<Vec<f32>>>> {
        self.embed("/embed/text", json!({ "texts": texts }), texts.len())
    }

    fn embed_images(&self, images: &[Vec<u8>]) -> Result<Vec<ItemResult<Vec<f32>>>> {
        let encoded: Vec<String> = images.iter().map(|b| BASE64.encode(b)).collect();
        self.embed("/embed/image", json!({ "images": encoded }), images.len())
    }

    fn generate(&self, request: &GenerateRequest<'_>) -> Result<Vec<GeneratedItem>> {
        let body = json!({
            "prompt": request.prompt,
            "seeds": request.seeds,
            "steps": request.params.steps,
            "guidance": request.params.guidance,
            "width": request.params.width,
            "height": request.params.height,
            "return": match request.output {
                GenerateReturn::Images => "images",
                GenerateReturn::Embeddings => "embeddings",
            },
        });
        let resp: GenerateResponse = self.post("/generate", &body)?;
        check_len("/generate", resp.items.len(), request.seeds.len())?;
        resp.items
            .into_iter()
            .zip(request.seeds)
            .map(|(item, &seed)| {
                if item.seed != seed {
                    return Err(Error::backend(format!(
                        "/generate: item for seed {} where {seed} was expected",
                        item.seed
                    )));
                }
                let output = if let Some(e) = item.error {
                    Err(format!("{}: {}", e.code, e.message))
                } else if let Some(img) = item.image {
                    BASE64
                        .decode(img.as_bytes())
                        .map(Generated::Image)
                        .map_err(|e| format!("bad base-64 image: {e}"))
                } else if let Some(v) = item.embedding {
                    Ok(Generated::Embedding(v))
                } else {
                    Err("item carries neither image nor embedding".into())
                };
                Ok(GeneratedItem { seed, output })
            })
            .collect()
    }

    fn detect(&self, images: &[Vec<u8>], label: &str) -> Result<Vec<ItemResult<Detection>>> {
        let encoded: Vec<String> = images.iter().map(|b| BASE64.encode(b)).collect();
        let resp: DetectResponse =
            self.post("/detect", &json!({ "images": encoded, "label": label }))?;
        check_len("/detect", resp.present.len(), images.len())?;
        Ok(resp
            .present
            .iter()
            .enumerate()
            .map(|(i, p)| match p {
                Some(present) => Ok(Detection {
                    present: *present,
                    score: resp.scores.get(i).copied().flatten().unwrap_or(f64::NAN),
                }),
                None => Err(resp
                    .errors
                    .iter()
                    .find(|e| e.item_index == Some(i))
                    .map(|e| format!("{}: {}", e.code, e.message))
                    .unwrap_or_else(|| "detection failed".into())),
            })
            .collect())
    }

    fn count_tokens(&self, texts: &[String]) -> Result<Vec<ItemResult<usize>>> {
        let resp: CountResponse = self.post("/count_tokens", &json!({ "texts": texts }))?;
        check_len("/count_tokens", resp.counts.len(), texts.len())?;
        Ok(resp.counts.into_iter().map(ItemOrError::into_result).collect())
    }

    fn request_count(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }
}
