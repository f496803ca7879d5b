//! Client for the augmentation sidecar (`POST /v1/augment`, `GET /v1/health`).
//!
//! Patch payloads travel as base64 of little-endian `f32`, row-major.

use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{AugmentError, AugmentRequest, PatchMatrix, RawAugmentation};

/// Sidecar per-request sentence cap.
pub const MAX_REMOTE_BATCH: usize = 64;

#[derive(Debug, Clone)]
pub struct RemoteConfig {
    /// e.g. `http://127.0.0.1:8765`
    pub base_url: String,
    pub timeout: Duration,
    /// Extra attempts after a retryable failure.
    pub retries: u32,
    pub backoff: Duration,
}

impl RemoteConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            timeout: Duration::from_secs(300),
            retries: 3,
            backoff: Duration::from_millis(500),
        }
    }
}

#[derive(Serialize)]
struct HttpRequest<'a> {
    sentences: Vec<&'a str>,
    steps: u32,
    seed: u64,
    patch_count: usize,
    dim: usize,
}

#[derive(Deserialize)]
struct HttpResult {
    gamma: f32,
    patches_b64: String,
}

#[derive(Deserialize)]
struct HttpResponse {
    results: Vec<HttpResult>,
}

pub struct RemoteBackend {
    cfg: RemoteConfig,
    agent: ureq::Agent,
}

impl RemoteBackend {
    pub fn new(cfg: RemoteConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(cfg.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { cfg, agent }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.cfg.base_url.trim_end_matches('/'), path)
    }

    /// True once the sidecar reports its models loaded.
    pub fn health(&self) -> Result<bool, AugmentError> {
        let resp = self
            .agent
            .get(&self.url("/v1/health"))
            .call()
            .map_err(|e| AugmentError::RemoteUnavailable(e.to_string()))?;
        Ok(resp.status().as_u16() == 200)
    }

    /// Splits into runs of identical request parameters, at most
    /// [`MAX_REMOTE_BATCH`] sentences each, and reassembles in order.
    pub fn augment_batch(&self, reqs: &[AugmentRequest]) -> Result<Vec<RawAugmentation>, AugmentError> {
        let mut out = Vec::with_capacity(reqs.len());
        let mut start = 0;
        while start < reqs.len() {
            let head = &reqs[start];
            let mut end = start + 1;
            while end < reqs.len()
                && end - start < MAX_REMOTE_BATCH
                && same_params(head, &reqs[end])
            {
                end += 1;
            }
            out.extend(self.send_with_retry(&reqs[start..end])?);
            start = end;
        }
        Ok(out)
    }

    fn send_with_retry(&self, chunk: &[AugmentRequest]) -> Result<Vec<RawAugmentation>, AugmentError> {
        let mut attempt = 0;
        loop {
            match self.send(chunk) {
                Err(e) if e.is_retryable() && attempt < self.cfg.retries => {
                    attempt += 1;
                    std::thread::sleep(self.cfg.backoff * attempt);
                }
                other => return other,
            }
        }
    }

    fn send(&self, chunk: &[AugmentRequest]) -> Result<Vec<RawAugmentation>, AugmentError> {
        let head = &chunk[0];
        let body = HttpRequest {
            sentences: chunk.iter().map(|r| r.sentence.as_str()).collect(),
            steps: head.steps,
            seed: head.seed,
            patch_count: head.patch_count,
            dim: head.dim,
        };
        let body = serde_json::to_string(&body).expect("request serializes");
        let resp = self
            .agent
            .post(&self.url("/v1/augment"))
            .header("content-type", "application/json")
            .send(body)
            .map_err(|e| AugmentError::RemoteUnavailable(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .into_body()
            .read_to_string()
            .map_err(|e| AugmentError::RemoteUnavailable(e.to_string()))?;
        match status {
            200 => {}
            503 | 502 | 504 => return Err(AugmentError::RemoteUnavailable(format!("status {status}"))),
            _ => return Err(AugmentError::RemoteRejected { status, body: text }),
        }
        decode_response(&text, chunk)
    }
}

fn same_params(a: &AugmentRequest, b: &AugmentRequest) -> bool {
    (a.steps, a.seed, a.patch_count, a.dim) == (b.steps, b.seed, b.patch_count, b.dim)
}

fn decode_response(text: &str, chunk: &[AugmentRequest]) -> Result<Vec<RawAugmentation>, AugmentError> {
    let parsed: HttpResponse = serde_json::from_str(text).map_err(|e| AugmentError::BadResponse(e.to_string()))?;
    if parsed.results.len() != chunk.len() {
        return Err(AugmentError::BadResponse(format!(
            "{} results for {} sentences",
            parsed.results.len(),
            chunk.len()
        )));
    }
    parsed
        .results
        .into_iter()
        .zip(chunk)
        .map(|(r, req)| {
            let bytes = base64::engine::general_purpose::STANDARD
                .decode(r.patches_b64.as_bytes())
                .map_err(|e| AugmentError::BadResponse(e.to_string()))?;
            let want = 4 * req.patch_count * req.dim;
            if bytes.len() != want {
                let values = bytes.len() / 4;
                let actual = if values % req.dim == 0 { (values / req.dim, req.dim) } else { (1, values) };
                return Err(AugmentError::ShapeMismatch {
                    expected: (req.patch_count, req.dim),
                    actual,
                });
            }
            let data = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let aug = RawAugmentation {
                gamma: r.gamma,
                patches: PatchMatrix::new(req.patch_count, req.dim, data),
            };
            aug.validate(req)?;
            Ok(aug)
        })
        .collect()
}

/// Encodes a patch matrix the way the sidecar does; used by fixtures and tests.
pub fn encode_patches(p: &PatchMatrix) -> String {
    let mut bytes = Vec::with_capacity(p.data.len() * 4);
    for v in &p.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    base64::engine::general_purpose::STANDARD.encode(bytes)
}
