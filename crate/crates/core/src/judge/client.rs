use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum JudgeError {
    #[error("judge {judge_id}: transport failure after {attempts} attempts: {message}")]
    Transport {
        judge_id: String,
        attempts: u32,
        message: String,
    },
    #[error("judge {judge_id}: endpoint rejected the request with HTTP {status}")]
    Rejected { judge_id: String, status: u16 },
    #[error("judge {judge_id}: malformed endpoint response: {message}")]
    Malformed { judge_id: String, message: String },
}

/// Exponential backoff between retries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Backoff {
    #[serde(with = "millis")]
    pub initial: Duration,
    #[serde(with = "millis")]
    pub max: Duration,
}

impl Default for Backoff {
    fn default() -> Self {
        Self {
            initial: Duration::from_millis(200),
            max: Duration::from_secs(10),
        }
    }
}

impl Backoff {
    /// Delay before retry number `retry` (0-based).
    pub fn delay(&self, retry: u32) -> Duration {
        let factor = 1u32.checked_shl(retry.min(31)).unwrap_or(u32::MAX);
        self.initial.saturating_mul(factor).min(self.max)
    }
}

mod millis {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

/// One text-generation endpoint serving one judge model.
#[derive(Debug, Clone, PartialEq)]
pub struct JudgeEndpoint {
    pub judge_id: String,
    pub base_url: String,
    pub max_new_tokens: u32,
    pub timeout: Duration,
    /// Retries after the first attempt.
    pub retry_budget: u32,
    pub backoff: Backoff,
    /// Optional static header, e.g. an authorization token.
    pub header: Option<(String, String)>,
}

impl JudgeEndpoint {
    pub const DEFAULT_MAX_NEW_TOKENS: u32 = 3;

    pub fn new(judge_id: impl Into<String>, base_url: impl Into<String>) -> Self {
        Self {
            judge_id: judge_id.into(),
            base_url: base_url.into(),
            max_new_tokens: Self::DEFAULT_MAX_NEW_TOKENS,
            timeout: Duration::from_secs(30),
            retry_budget: 3,
            backoff: Backoff::default(),
            header: None,
        }
    }

    pub fn generate_url(&self) -> String {
        format!("{}/generate", self.base_url.trim_end_matches('/'))
    }

    /// Decoding parameters as they enter the cache key.
    pub fn decoding_key(&self) -> String {
        format!("max_new_tokens={};do_sample=false", self.max_new_tokens)
    }
}

/// A judge that turns a prompt into a raw generation.
#[async_trait]
pub trait Judge: Send + Sync {
    fn judge_id(&self) -> &str;

    /// Everything besides the prompt that determines the output.
    fn decoding_key(&self) -> String;

    /// Where the judge lives, recorded in run provenance.
    fn location(&self) -> String {
        String::new()
    }

    async fn generate(&self, prompt: &str) -> Result<String, JudgeError>;
}

#[derive(Serialize)]
struct GenerateRequest<'a> {
    inputs: &'a str,
    parameters: GenerateParameters,
}

#[derive(Serialize)]
struct GenerateParameters {
    max_new_tokens: u32,
    do_sample: bool,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum GenerateResponse {
    Single { generated_text: String },
    Batch(Vec<GeneratedItem>),
}

#[derive(Deserialize)]
struct GeneratedItem {
    generated_text: String,
}

/// Judge backed by a text-generation-inference style HTTP endpoint.
#[derive(Debug, Clone)]
pub struct HttpJudge {
    pub endpoint: JudgeEndpoint,
    client: reqwest::Client,
}

impl HttpJudge {
    pub fn new(endpoint: JudgeEndpoint) -> Result<Self, JudgeError> {
        let client = reqwest::Client::builder()
            .timeout(endpoint.timeout)
            .build()
            .map_err(|e| JudgeError::Transport {
                judge_id: endpoint.judge_id.clone(),
                attempts: 0,
                message: e.to_string(),
            })?;
        Ok(Self { endpoint, client })
    }
}

#[async_trait]
impl Judge for HttpJudge {
    fn judge_id(&self) -> &str {
        &self.endpoint.judge_id
    }

    fn decoding_key(&self) -> String {
        self.endpoint.decoding_key()
    }

    fn location(&self) -> String {
        self.endpoint.base_url.clone()
    }

    async fn generate(&self, prompt: &str) -> Result<String, JudgeError> {
        query_judge(&self.client, &self.endpoint, prompt).await
    }
}

enum Attempt {
    Retry(String),
    Fatal(JudgeError),
}

/// POST the prompt with greedy decoding, retrying transport errors and 5xx/429
/// responses with exponential backoff.
pub async fn query_judge(
    client: &reqwest::Client,
    endpoint: &JudgeEndpoint,
    prompt: &str,
) -> Result<String, JudgeError> {
    let body = GenerateRequest {
        inputs: prompt,
        parameters: GenerateParameters {
            max_new_tokens: endpoint.max_new_tokens,
            do_sample: false,
        },
    };
    let url = endpoint.generate_url();
    let mut attempts = 0;
    loop {
        attempts += 1;
        match attempt(client, endpoint, &url, &body).await {
            Ok(text) => return Ok(text),
            Err(Attempt::Fatal(e)) => return Err(e),
            Err(Attempt::Retry(message)) => {
                if attempts > endpoint.retry_budget {
                    return Err(JudgeError::Transport {
                        judge_id: endpoint.judge_id.clone(),
                        attempts,
                        message,
                    });
                }
                log::debug!(
                    "judge {} attempt {attempts} failed: {message}",
                    endpoint.judge_id
                );
                tokio::time::sleep(endpoint.backoff.delay(attempts - 1)).await;
            }
        }
    }
}

async fn attempt(
    client: &reqwest::Client,
    endpoint: &JudgeEndpoint,
    url: &str,
    body: &GenerateRequest<'_>,
) -> Result<String, Attempt> {
    let mut request = client.post(url).json(body);
    if let Some((name, value)) = &endpoint.header {
        request = request.header(name.as_str(), value.as_str());
    }
    let response = request
        .send()
        .await
        .map_err(|e| Attempt::Retry(e.to_string()))?;
    let status = response.status();
    if status.is_server_error() || status.as_u16() == 429 {
        return Err(Attempt::Retry(format!("HTTP {status}")));
    }
    if !status.is_success() {
        return Err(Attempt::Fatal(JudgeError::Rejected {
            judge_id: endpoint.judge_id.clone(),
            status: status.as_u16(),
        }));
    }
    let bytes = response
        .bytes()
        .await
        .map_err(|e| Attempt::Retry(e.to_string()))?;
    let malformed = |message: String| {
        Attempt::Fatal(JudgeError::Malformed {
            judge_id: endpoint.judge_id.clone(),
            message,
        })
    };
    match serde_json::from_slice::<GenerateResponse>(&bytes) {
        Ok(GenerateResponse::Single { generated_text }) => Ok(generated_text),
        Ok(GenerateResponse::Batch(items)) => match <[GeneratedItem; 1]>::try_from(items) {
            Ok([item]) => Ok(item.generated_text),
            Err(items) => Err(malformed(format!(
                "expected one generation, got {}",
                items.len()
            ))),
        },
        Err(e) => Err(malformed(e.to_string())),
    }
}
