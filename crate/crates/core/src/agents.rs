//! The three deliberation roles: viewpoint generation, evidence
//! verification behind the τ gate, and consistency arbitration.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{Backend, BackendError, BackendRequest};
use crate::dataset::TaskRecord;
use crate::math::{
    fact_score_with, squash_coherence, EmbeddingMatrix, EmbeddingVector, GaussianPolicy, MathError, ScoreUnit,
    SupportMapping,
};
use crate::prompts::{render, Prompts};
use crate::retrieval::{Embedder, KnowledgeBase, RetrievalError, RetrievalResult};
use crate::seed;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("need at least one viewpoint agent")]
    NoAgents,
    #[error("arbitration needs at least one accepted viewpoint")]
    NothingToArbitrate,
    #[error("viewpoint {0} was already verified")]
    NotPending(usize),
    #[error("policy has dimension {policy}, task embedding has {task}")]
    PolicyDimension { policy: usize, task: usize },
    #[error("question is empty")]
    EmptyQuestion,
    #[error("arbitration output has no `Answer:` line")]
    MissingAnswer,
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Math(#[from] MathError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentsConfig {
    /// Number of viewpoint agents.
    pub k: usize,
    /// Fact-score acceptance threshold (inclusive).
    pub tau: f64,
    pub w_cohe: f64,
    pub b_cohe: f64,
    pub support_mapping: SupportMapping,
    pub max_tokens: u32,
}

impl Default for AgentsConfig {
    fn default() -> Self {
        Self {
            k: 3,
            tau: 0.75,
            w_cohe: 4.0,
            b_cohe: -2.0,
            support_mapping: SupportMapping::Clamp,
            max_tokens: crate::backends::DEFAULT_MAX_TOKENS,
        }
    }
}

/// The question as every agent sees it. Agents only ever borrow it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInput {
    pub id: String,
    pub question: String,
    pub context: Option<String>,
    pub gold_answer: Option<String>,
    /// Cached `Emb(question)`.
    pub embedding: EmbeddingVector,
}

impl TaskInput {
    pub fn new(
        id: impl Into<String>,
        question: impl Into<String>,
        context: Option<String>,
        gold_answer: Option<String>,
        embedder: &(impl Embedder + ?Sized),
    ) -> Result<Self, AgentError> {
        let question = question.into();
        if question.trim().is_empty() {
            return Err(AgentError::EmptyQuestion);
        }
        let embedding = embedder.embed_text(&question)?;
        Ok(Self {
            id: id.into(),
            question,
            context,
            gold_answer,
            embedding,
        })
    }

    pub fn from_record(record: &TaskRecord, embedder: &(impl Embedder + ?Sized)) -> Result<Self, AgentError> {
        Self::new(
            record.id.clone(),
            record.question.clone(),
            record.context.clone(),
            record.answer.clone(),
            embedder,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Verification {
    Pending,
    Accepted {
        fact_score: ScoreUnit,
        evidence: Vec<RetrievalResult>,
    },
    Rejected {
        fact_score: ScoreUnit,
        evidence: Vec<RetrievalResult>,
    },
    /// Generation or embedding failed; treated as rejected.
    Failed { reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Viewpoint {
    /// 1-based agent index.
    pub k: usize,
    pub omega: Vec<f64>,
    pub text: String,
    /// Statement embeddings; `None` when generation failed.
    pub embedding: Option<EmbeddingMatrix>,
    pub verification: Verification,
}

impl Viewpoint {
    pub fn is_accepted(&self) -> bool {
        matches!(self.verification, Verification::Accepted { .. })
    }

    pub fn is_failed(&self) -> bool {
        matches!(self.verification, Verification::Failed { .. })
    }

    pub fn fact_score(&self) -> Option<ScoreUnit> {
        match &self.verification {
            Verification::Accepted { fact_score, .. } | Verification::Rejected { fact_score, .. } => Some(*fact_score),
            _ => None,
        }
    }

    pub fn evidence(&self) -> Option<&[RetrievalResult]> {
        match &self.verification {
            Verification::Accepted { evidence, .. } | Verification::Rejected { evidence, .. } => Some(evidence),
            _ => None,
        }
    }

    pub fn answer(&self) -> Option<String> {
        extract_answer(&self.text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conclusion {
    pub text: String,
    pub answer: String,
    pub coherence: ScoreUnit,
    /// Judge output before squashing.
    pub coherence_raw: f64,
    pub contributing: Vec<usize>,
    pub degraded: bool,
}

/// Text after the last `Answer:` marker.
pub fn extract_answer(text: &str) -> Option<String> {
    text.lines()
        .rev()
        .find_map(|l| l.trim().strip_prefix("Answer:"))
        .map(|a| a.trim().to_string())
        .filter(|a| !a.is_empty())
}

/// Statement lines of a viewpoint, without the answer marker.
pub fn statements(text: &str) -> Vec<&str> {
    let lines: Vec<&str> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with("Answer:"))
        .collect();
    if lines.is_empty() && !text.trim().is_empty() {
        vec![text.trim()]
    } else {
        lines
    }
}

/// One row per statement line; the whole text when there are none.
pub fn viewpoint_embedding(text: &str, embedder: &(impl Embedder + ?Sized)) -> Result<EmbeddingMatrix, AgentError> {
    let rows = statements(text)
        .into_iter()
        .map(|s| embedder.embed_text(s))
        .collect::<Result<Vec<_>, _>>()?;
    if rows.is_empty() {
        return Err(BackendError::EmptyText.into());
    }
    Ok(EmbeddingMatrix::new(rows)?)
}

/// Evidence for a viewpoint embedding and its fact score against that evidence.
pub fn evidence_and_score(
    embedding: &EmbeddingMatrix,
    base: &KnowledgeBase,
    mapping: SupportMapping,
    sample_seed: Option<u64>,
) -> Result<(ScoreUnit, Vec<RetrievalResult>), AgentError> {
    let query = embedding.mean_pool();
    let evidence = match sample_seed {
        Some(s) => base.retrieve_sampled(&query, &mut seed::rng(s))?,
        None => base.retrieve_top_m(&query)?,
    };
    let mats: Vec<EmbeddingMatrix> = evidence
        .iter()
        .map(|r| EmbeddingMatrix::from_vector(r.item.embedding.clone()))
        .collect();
    let score = fact_score_with(embedding, &mats, mapping)?;
    Ok((score, evidence))
}

/// `ω ⊙ Emb(Q)`.
pub fn modulate(omega: &[f64], task_embedding: &EmbeddingVector) -> Vec<f64> {
    omega.iter().zip(task_embedding.values()).map(|(w, q)| w * q).collect()
}

pub fn viewpoint_prompt(task: &TaskInput, prompts: &Prompts) -> String {
    let context = task
        .context
        .as_deref()
        .map(|c| format!("Context: {c}"))
        .unwrap_or_default();
    render(&prompts.viewpoint, &[("question", &task.question), ("context", &context)])
}

/// Draws `k` weight vectors from the policy.
pub fn sample_omegas(policy: &GaussianPolicy, k: usize, omega_seed: u64) -> Vec<Vec<f64>> {
    let mut rng = seed::rng(omega_seed);
    (0..k)
        .map(|_| policy.sample_with(|| StandardNormal.sample(&mut rng)))
        .collect()
}

/// Generates one viewpoint per weight vector. Every agent shares
/// `generation_seed`, so agents differ only through their weights.
pub fn generate_with_omegas(
    task: &TaskInput,
    omegas: &[Vec<f64>],
    backend: &dyn Backend,
    prompts: &Prompts,
    generation_seed: u64,
    max_tokens: u32,
    parallel: bool,
) -> Vec<Viewpoint> {
    let prompt = viewpoint_prompt(task, prompts);
    let one = |(i, omega): (usize, &Vec<f64>)| -> Viewpoint {
        let request = BackendRequest::viewpoint(
            prompt.clone(),
            modulate(omega, &task.embedding),
            generation_seed,
            max_tokens,
        );
        let generated = backend
            .complete(&request)
            .map_err(AgentError::from)
            .and_then(|r| viewpoint_embedding(&r.text, backend).map(|e| (r.text, e)));
        match generated {
            Ok((text, embedding)) => Viewpoint {
                k: i + 1,
                omega: omega.clone(),
                text,
                embedding: Some(embedding),
                verification: Verification::Pending,
            },
            Err(e) => Viewpoint {
                k: i + 1,
                omega: omega.clone(),
                text: String::new(),
                embedding: None,
                verification: Verification::Failed { reason: e.to_string() },
            },
        }
    };
    if parallel {
        omegas.par_iter().enumerate().map(one).collect()
    } else {
        omegas.iter().enumerate().map(one).collect()
    }
}

/// Samples `k` weight vectors and generates a viewpoint for each.
#[allow(clippy::too_many_arguments)]
pub fn generate_viewpoints(
    task: &TaskInput,
    policy: &GaussianPolicy,
    k: usize,
    backend: &dyn Backend,
    prompts: &Prompts,
    root_seed: u64,
    max_tokens: u32,
    parallel: bool,
) -> Result<Vec<Viewpoint>, AgentError> {
    if k == 0 {
        return Err(AgentError::NoAgents);
    }
    if policy.dim() != task.embedding.dim() {
        return Err(AgentError::PolicyDimension {
            policy: policy.dim(),
            task: task.embedding.dim(),
        });
    }
    let omegas = sample_omegas(policy, k, seed::derive(root_seed, "omega", 0));
    Ok(generate_with_omegas(
        task,
        &omegas,
        backend,
        prompts,
        seed::derive(root_seed, "generation", 0),
        max_tokens,
        parallel,
    ))
}

/// Resolves a pending viewpoint against its top-`m` evidence.
pub fn verify_viewpoint(v: Viewpoint, base: &KnowledgeBase, tau: f64) -> Result<Viewpoint, AgentError> {
    verify_viewpoint_with(v, base, tau, SupportMapping::Clamp, None)
}

/// As [`verify_viewpoint`], optionally sampling evidence from the retrieval
/// distribution with `sample_seed`. Failed viewpoints pass through unchanged.
pub fn verify_viewpoint_with(
    mut v: Viewpoint,
    base: &KnowledgeBase,
    tau: f64,
    mapping: SupportMapping,
    sample_seed: Option<u64>,
) -> Result<Viewpoint, AgentError> {
    match v.verification {
        Verification::Pending => {}
        Verification::Failed { .. } => return Ok(v),
        _ => return Err(AgentError::NotPending(v.k)),
    }
    let Some(embedding) = &v.embedding else {
        v.verification = Verification::Failed {
            reason: "viewpoint has no embedding".into(),
        };
        return Ok(v);
    };
    let (fact_score, evidence) = evidence_and_score(embedding, base, mapping, sample_seed)?;
    v.verification = if fact_score.value() >= tau {
        Verification::Accepted { fact_score, evidence }
    } else {
        Verification::Rejected { fact_score, evidence }
    };
    Ok(v)
}

/// Accepts a pending viewpoint with full support and no evidence.
pub fn bypass_verification(mut v: Viewpoint) -> Viewpoint {
    if matches!(v.verification, Verification::Pending) {
        v.verification = Verification::Accepted {
            fact_score: ScoreUnit::ONE,
            evidence: Vec::new(),
        };
    }
    v
}

pub fn arbitration_prompt(accepted: &[&Viewpoint], task: &TaskInput, prompts: &Prompts) -> String {
    let mut blocks = String::new();
    for v in accepted {
        let support = v.fact_score().map_or(0.0, ScoreUnit::value);
        blocks.push_str(&format!("### Viewpoint {} | support {support:.6}\n", v.k));
        blocks.push_str(v.text.trim());
        blocks.push('\n');
        for e in v.evidence().unwrap_or(&[]) {
            blocks.push_str(&format!("> {}\n", e.item.text));
        }
    }
    render(
        &prompts.arbitration,
        &[("question", &task.question), ("viewpoints", blocks.trim_end())],
    )
}

/// Raw judge output for a conclusion; one retry on an unparseable reply.
pub fn judge_coherence(
    conclusion_text: &str,
    task: &TaskInput,
    backend: &dyn Backend,
    prompts: &Prompts,
    judge_seed: u64,
) -> Result<f64, AgentError> {
    let prompt = render(
        &prompts.coherence,
        &[("question", &task.question), ("conclusion", conclusion_text.trim())],
    );
    let mut last = None;
    for attempt in 0..2 {
        let request = BackendRequest::coherence_judge(prompt.clone(), seed::derive(judge_seed, "judge", attempt));
        match backend.complete(&request) {
            Ok(r) => match r.scalar {
                Some(s) if s.is_finite() => return Ok(s),
                _ => last = Some(BackendError::MalformedResponse("judge returned no score".into())),
            },
            Err(e @ BackendError::MalformedResponse(_)) => last = Some(e),
            Err(e) => return Err(e.into()),
        }
    }
    Err(last.expect("loop ran").into())
}

/// Integrates the accepted viewpoints into one judged conclusion.
pub fn arbitrate(
    accepted: &[&Viewpoint],
    task: &TaskInput,
    backend: &dyn Backend,
    prompts: &Prompts,
    config: &AgentsConfig,
    arbitration_seed: u64,
) -> Result<Conclusion, AgentError> {
    if accepted.is_empty() {
        return Err(AgentError::NothingToArbitrate);
    }
    let prompt = arbitration_prompt(accepted, task, prompts);
    let mut integrated = None;
    for attempt in 0..2 {
        let request = BackendRequest::arbitration(
            prompt.clone(),
            seed::derive(arbitration_seed, "arbitration", attempt),
            config.max_tokens,
        );
        let text = backend.complete(&request)?.text;
        if let Some(answer) = extract_answer(&text) {
            integrated = Some((text, answer));
            break;
        }
    }
    let (text, answer) = integrated.ok_or(AgentError::MissingAnswer)?;
    conclude(text, answer, accepted.iter().map(|v| v.k).collect(), task, backend, prompts, config, arbitration_seed)
}

/// Single-agent path: the viewpoint itself is the conclusion.
pub fn conclude_single(
    v: &Viewpoint,
    task: &TaskInput,
    backend: &dyn Backend,
    prompts: &Prompts,
    config: &AgentsConfig,
    judge_seed: u64,
) -> Result<Conclusion, AgentError> {
    let answer = v.answer().ok_or(AgentError::MissingAnswer)?;
    conclude(v.text.clone(), answer, vec![v.k], task, backend, prompts, config, judge_seed)
}

#[allow(clippy::too_many_arguments)]
fn conclude(
    text: String,
    answer: String,
    contributing: Vec<usize>,
    task: &TaskInput,
    backend: &dyn Backend,
    prompts: &Prompts,
    config: &AgentsConfig,
    seed: u64,
) -> Result<Conclusion, AgentError> {
    let raw = judge_coherence(&text, task, backend, prompts, seed)?;
    Ok(Conclusion {
        text,
        answer,
        coherence: squash_coherence(raw, config.w_cohe, config.b_cohe),
        coherence_raw: raw,
        contributing,
        degraded: false,
    })
}
