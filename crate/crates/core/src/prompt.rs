//! Target-prompt handling: tokenization, shape-word filtering into a mask
//! prompt, an optional external LLM filter, and hashed token embeddings.

use std::collections::BTreeSet;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;

/// Environment variable consulted for the LLM endpoint.
pub const LLM_ENDPOINT_ENV: &str = "MADIFF_LLM_ENDPOINT";

const DEFAULT_VOCABULARY: &str = include_str!("../assets/shape_vocabulary.txt");

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptText {
    raw: String,
    tokens: Vec<String>,
}

impl PromptText {
    pub fn new(raw: impl Into<String>) -> Self {
        let raw = raw.into();
        let tokens = tokenize(&raw);
        Self { raw, tokens }
    }

    pub fn raw(&self) -> &str {
        &self.raw
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Tokens joined by single spaces.
    pub fn normalized(&self) -> String {
        self.tokens.join(" ")
    }
}

/// Lowercases, drops punctuation (hyphens inside words survive) and splits
/// on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter_map(|w| {
            let cleaned: String = w
                .chars()
                .filter(|c| c.is_alphanumeric() || *c == '-')
                .flat_map(char::to_lowercase)
                .collect();
            let trimmed = cleaned.trim_matches('-');
            (!trimmed.is_empty()).then(|| trimmed.to_string())
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPrompt {
    tokens: Vec<String>,
}

impl MaskPrompt {
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }

    pub fn as_prompt(&self) -> PromptText {
        PromptText::new(self.text())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShapeVocabulary {
    terms: BTreeSet<String>,
}

impl ShapeVocabulary {
    /// Parses one term per line; `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut terms = BTreeSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if line.chars().any(|c| c.is_uppercase() || c.is_whitespace()) {
                return Err(Error::format(format!(
                    "vocabulary line {}: '{line}' must be a single lowercase term",
                    n + 1
                )));
            }
            terms.insert(line.to_string());
        }
        Self::from_terms(terms)
    }

    pub fn from_terms<I, S>(terms: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let terms: BTreeSet<String> = terms.into_iter().map(Into::into).collect();
        if terms.is_empty() {
            return Err(Error::Configuration("shape vocabulary is empty".into()));
        }
        if terms.iter().any(|t| t.chars().any(char::is_uppercase)) {
            return Err(Error::Configuration(
                "shape vocabulary must be lowercase".into(),
            ));
        }
        Ok(Self { terms })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.terms.contains(token)
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }
}

impl Default for ShapeVocabulary {
    fn default() -> Self {
        Self::parse(DEFAULT_VOCABULARY).expect("shipped vocabulary parses")
    }
}

/// External mask-prompt extractor.
pub trait LlmClient: Send + Sync {
    fn mask_prompt(&self, prompt: &str) -> Result<String>;
}

#[derive(Serialize)]
struct LlmRequest<'a> {
    prompt: &'a str,
}

#[derive(Deserialize)]
struct LlmResponse {
    mask_prompt: String,
}

/// JSON-over-HTTP client: POST `{"prompt": ...}`, expects `{"mask_prompt": ...}`.
pub struct HttpLlmClient {
    endpoint: String,
    client: reqwest::blocking::Client,
}

impl HttpLlmClient {
    pub const TIMEOUT: Duration = Duration::from_secs(5);

    pub fn new(endpoint: impl Into<String>) -> Result<Self> {
        Self::with_timeout(endpoint, Self::TIMEOUT)
    }

    pub fn with_timeout(endpoint: impl Into<String>, timeout: Duration) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Configuration(format!("http client: {e}")))?;
        Ok(Self {
            endpoint: endpoint.into(),
            client,
        })
    }

    /// Client for `endpoint` if set, else for `$MADIFF_LLM_ENDPOINT`, else none.
    pub fn from_config_or_env(endpoint: Option<&str>) -> Result<Option<Self>> {
        let env = std::env::var(LLM_ENDPOINT_ENV).ok();
        match endpoint
            .map(str::to_string)
            .or(env)
            .filter(|s| !s.trim().is_empty())
        {
            Some(url) => Self::new(url).map(Some),
            None => Ok(None),
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }
}

impl LlmClient for HttpLlmClient {
    fn mask_prompt(&self, prompt: &str) -> Result<String> {
        let resp = self
            .client
            .post(&self.endpoint)
            .json(&LlmRequest { prompt })
            .send()
            .and_then(|r| r.error_for_status())
            .map_err(|e| Error::State(format!("llm request failed: {e}")))?;
        let body: LlmResponse = resp
            .json()
            .map_err(|e| Error::format(format!("llm response: {e}")))?;
        Ok(body.mask_prompt)
    }
}

/// Rule filter: keeps exactly the tokens present in `vocab`, in order.
pub fn filter_shape_tokens(prompt: &PromptText, vocab: &ShapeVocabulary) -> MaskPrompt {
    MaskPrompt {
        tokens: prompt
            .tokens()
            .iter()
            .filter(|t| vocab.contains(t))
            .cloned()
            .collect(),
    }
}

fn is_subsequence(needle: &[String], hay: &[String]) -> bool {
    let mut it = hay.iter();
    needle.iter().all(|n| it.any(|h| h == n))
}

/// Mask prompt for `prompt`. A configured client is tried first; its answer
/// is accepted only if its tokens form a subsequence of the source tokens.
/// Client failures are logged and fall back to the rule filter.
pub fn extract_mask_prompt(
    prompt: &PromptText,
    vocab: &ShapeVocabulary,
    client: Option<&dyn LlmClient>,
) -> MaskPrompt {
    if let Some(client) = client {
        match client.mask_prompt(prompt.raw()) {
            Ok(answer) => {
                let tokens = tokenize(&answer);
                if is_subsequence(&tokens, prompt.tokens()) {
                    return MaskPrompt { tokens };
                }
                log::warn!("llm mask prompt '{answer}' is not a subsequence of the prompt; using rule filter");
            }
            Err(e) => log::warn!("llm mask prompt unavailable ({e}); using rule filter"),
        }
    }
    filter_shape_tokens(prompt, vocab)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptEmbedding(Vec<f64>);

impl PromptEmbedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("embedding contains non-finite values"));
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn distance_sq(&self, other: &PromptEmbedding) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }
}

/// Token embedding table whose rows are generated on demand from a hash of
/// `(seed, token)`, so the table needs no storage and no vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub seed: u64,
}

impl EmbeddingTable {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }

    pub fn vector(&self, token: &str) -> Vec<f64> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(token.as_bytes());
        let d = h.finalize();
        let seed = u64::from_le_bytes(d[..8].try_into().expect("32-byte digest"));
        rng::normals(&mut rng::rng_from(seed), self.dim)
    }
}

/// Mean of the token vectors; the empty list maps to the zero vector.
pub fn embed_prompt<S: AsRef<str>>(tokens: &[S], table: &EmbeddingTable) -> PromptEmbedding {
    let mut acc = vec![0.0; table.dim];
    if tokens.is_empty() {
        return PromptEmbedding(acc);
    }
    for t in tokens {
        for (a, v) in acc.iter_mut().zip(table.vector(t.as_ref())) {
            *a += v;
        }
    }
    let n = tokens.len() as f64;
    PromptEmbedding(acc.into_iter().map(|a| a / n).collect())
}

/// Default embedding width shared by the mask network and the denoiser classes.
pub const EMBED_DIM: usize = 32;
/// Fixed table seed so that embeddings agree across data generation,
/// training and editing runs.
pub const EMBED_SEED: u64 = 0x6d61_6469_6666;

/// Vocabulary, embedding table and optional LLM client bundled together.
#[derive(Clone)]
pub struct PromptEncoder {
    pub vocab: ShapeVocabulary,
    pub table: EmbeddingTable,
    pub client: Option<std::sync::Arc<dyn LlmClient>>,
}

impl Default for PromptEncoder {
    fn default() -> Self {
        Self {
            vocab: ShapeVocabulary::default(),
            table: EmbeddingTable::new(EMBED_DIM, EMBED_SEED),
            client: None,
        }
    }
}

impl std::fmt::Debug for PromptEncoder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PromptEncoder")
            .field("vocab_terms", &self.vocab.len())
            .field("table", &self.table)
            .field("client", &self.client.is_some())
            .finish()
    }
}

impl PromptEncoder {
    pub fn mask_prompt(&self, prompt: &PromptText) -> MaskPrompt {
        extract_mask_prompt(prompt, &self.vocab, self.client.as_deref())
    }

    /// Embedding of the shape-only mask prompt.
    pub fn mask_embedding(&self, prompt: &PromptText) -> PromptEmbedding {
        embed_prompt(self.mask_prompt(prompt).tokens(), &self.table)
    }

    /// Embedding of the full prompt, used as the denoiser condition.
    pub fn condition(&self, prompt: &PromptText) -> PromptEmbedding {
        embed_prompt(prompt.tokens(), &self.table)
    }
}
