//! Model backends: text completion plus embedding.
//!
//! [`SyntheticBackend`] is a deterministic vector-space stand-in used for
//! tests and training; [`HttpBackend`] talks to an OpenAI-compatible endpoint.

mod http;
mod stub;
mod synthetic;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::EmbeddingVector;

pub use http::{EndpointConfig, HttpBackend, API_KEY_ENV};
pub use stub::{StubBehavior, StubLogEntry, StubServer};
pub use synthetic::{
    tokenize, SyntheticBackend, SyntheticBackendConfig, SyntheticEmbedder,
};

pub const DEFAULT_MAX_TOKENS: u32 = 512;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("endpoint unavailable: {0}")]
    EndpointUnavailable(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("request timed out: {0}")]
    Timeout(String),
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("graph has no outgoing edge from `{0}` mid-traversal")]
    DisconnectedGraph(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    ViewpointGeneration,
    Arbitration,
    CoherenceJudge,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackendRequest {
    role: Role,
    prompt_text: String,
    modulation: Option<Vec<f64>>,
    seed: u64,
    max_tokens: u32,
}

impl BackendRequest {
    /// A generation request carrying the modulation `ω ⊙ Emb(Q)`.
    pub fn viewpoint(prompt_text: String, modulation: Vec<f64>, seed: u64, max_tokens: u32) -> Self {
        Self {
            role: Role::ViewpointGeneration,
            prompt_text,
            modulation: Some(modulation),
            seed,
            max_tokens: max_tokens.max(1),
        }
    }

    pub fn arbitration(prompt_text: String, seed: u64, max_tokens: u32) -> Self {
        Self {
            role: Role::Arbitration,
            prompt_text,
            modulation: None,
            seed,
            max_tokens: max_tokens.max(1),
        }
    }

    pub fn coherence_judge(prompt_text: String, seed: u64) -> Self {
        Self {
            role: Role::CoherenceJudge,
            prompt_text,
            modulation: None,
            seed,
            max_tokens: 8,
        }
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn prompt_text(&self) -> &str {
        &self.prompt_text
    }

    pub fn modulation(&self) -> Option<&[f64]> {
        self.modulation.as_deref()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn max_tokens(&self) -> u32 {
        self.max_tokens
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendResponse {
    pub text: String,
    /// Raw coherence judgment; present only for [`Role::CoherenceJudge`].
    pub scalar: Option<f64>,
    /// Wall-clock seconds spent serving the request.
    pub latency: f64,
}

/// A backend that can enumerate its own viewpoint distribution in closed form.
///
/// Only the synthetic backend implements this; it gives the self-game a smooth
/// score surface to differentiate.
pub trait ViewpointDistribution: Send + Sync {
    /// Every viewpoint text reachable for this prompt with its probability
    /// under the given modulation. Probabilities sum to 1.
    fn viewpoint_distribution(
        &self,
        prompt_text: &str,
        modulation: &[f64],
    ) -> Result<Vec<(String, f64)>, BackendError>;
}

pub trait Backend: Send + Sync {
    fn complete(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError>;

    /// Unit-norm embedding of `text`.
    fn embed(&self, text: &str) -> Result<EmbeddingVector, BackendError>;

    /// Embedding dimension; may require one remote call on first use.
    fn dim(&self) -> Result<usize, BackendError>;

    fn as_distribution(&self) -> Option<&dyn ViewpointDistribution> {
        None
    }
}

/// Pulls the first line starting with `label` (e.g. `"Question:"`) out of a prompt.
pub fn prompt_field<'a>(prompt: &'a str, label: &str) -> Option<&'a str> {
    prompt
        .lines()
        .find_map(|l| l.trim_start().strip_prefix(label))
        .map(str::trim)
}

/// Lines between a `### <section>` header and the next `###` header.
pub fn prompt_section<'a>(prompt: &'a str, section: &str) -> Vec<&'a str> {
    let header = format!("### {section}");
    let mut lines = prompt.lines().skip_while(|l| l.trim() != header);
    if lines.next().is_none() {
        return Vec::new();
    }
    lines
        .take_while(|l| !l.trim_start().starts_with("###"))
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect()
}
