//! Per-episode self-game: gradient ascent on each viewpoint's squared
//! fact-score gap to its peers, taken in weight space by central finite
//! differences against a frozen evaluation context.

use std::collections::HashMap;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{evidence_and_score, modulate, viewpoint_embedding, AgentError};
use crate::backends::{Backend, BackendRequest, ViewpointDistribution};
use crate::math::{EmbeddingVector, SupportMapping};
use crate::retrieval::KnowledgeBase;

#[derive(Debug, Error)]
pub enum SelfGameError {
    #[error("self-game needs at least two viewpoints")]
    SingleViewpoint,
    #[error("evaluator returned different scores for identical probes ({first} vs {second})")]
    NonDeterministicEvaluator { first: f64, second: f64 },
    #[error("evaluator returned {actual} scores, expected {expected}")]
    ScoreCount { expected: usize, actual: usize },
    #[error("invalid self-game config: {0}")]
    InvalidConfig(String),
    #[error("score evaluation failed: {0}")]
    Evaluation(#[from] AgentError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelfGameConfig {
    pub eta: f64,
    pub rounds: usize,
    pub fd_step: f64,
}

impl Default for SelfGameConfig {
    fn default() -> Self {
        Self {
            eta: 0.01,
            rounds: 3,
            fd_step: 1e-3,
        }
    }
}

impl SelfGameConfig {
    pub fn validate(&self) -> Result<(), SelfGameError> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(SelfGameError::InvalidConfig(format!("selfgame.eta must be non-negative, got {}", self.eta)));
        }
        if !(self.fd_step > 0.0 && self.fd_step.is_finite()) {
            return Err(SelfGameError::InvalidConfig(format!("selfgame.fd_step must be positive, got {}", self.fd_step)));
        }
        Ok(())
    }
}

/// `(S_k − mean_{j≠k} S_j)²`.
pub fn selfgame_objective(k: usize, fact_scores: &[f64]) -> Result<f64, SelfGameError> {
    let n = fact_scores.len();
    if n < 2 {
        return Err(SelfGameError::SingleViewpoint);
    }
    let others: f64 = fact_scores.iter().enumerate().filter(|(j, _)| *j != k).map(|(_, s)| s).sum();
    let gap = fact_scores[k] - others / (n - 1) as f64;
    Ok(gap * gap)
}

/// Central-difference gradient of `f` at `x`; `2·len(x)` evaluations, run in parallel.
pub fn central_difference<F>(f: F, x: &[f64], h: f64) -> Result<Vec<f64>, SelfGameError>
where
    F: Fn(&[f64]) -> Result<f64, SelfGameError> + Sync,
{
    (0..x.len())
        .into_par_iter()
        .map(|i| {
            let mut probe = x.to_vec();
            probe[i] = x[i] + h;
            let up = f(&probe)?;
            probe[i] = x[i] - h;
            let down = f(&probe)?;
            Ok((up - down) / (2.0 * h))
        })
        .collect()
}

/// Finite-difference gradient of the objective for viewpoint `k` with
/// respect to its own weights. `evaluate` maps a candidate `ω_k` to all K
/// fact scores with the other viewpoints held fixed.
pub fn estimate_gradient<F>(k: usize, omega_k: &[f64], evaluate: F, fd_step: f64) -> Result<Vec<f64>, SelfGameError>
where
    F: Fn(&[f64]) -> Result<Vec<f64>, SelfGameError> + Sync,
{
    central_difference(|w| selfgame_objective(k, &evaluate(w)?), omega_k, fd_step)
}

/// Fact score of the viewpoint a given weight vector would produce, in a
/// context frozen for the whole self-game phase.
pub trait ScoreSurface: Sync {
    fn score(&self, omega: &[f64]) -> Result<f64, SelfGameError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// Fact scores at the start of the round.
    pub scores: Vec<f64>,
    pub objectives: Vec<f64>,
    pub gradient_norms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelfGameOutcome {
    pub omegas: Vec<Vec<f64>>,
    pub rounds: Vec<RoundRecord>,
}

/// One synchronous ascent step for every viewpoint.
pub fn selfgame_round(
    omegas: &[Vec<f64>],
    surface: &dyn ScoreSurface,
    config: &SelfGameConfig,
    round: usize,
) -> Result<(Vec<Vec<f64>>, RoundRecord), SelfGameError> {
    if omegas.len() < 2 {
        return Err(SelfGameError::SingleViewpoint);
    }
    let scores: Vec<f64> = omegas.iter().map(|w| surface.score(w)).collect::<Result<_, _>>()?;
    for (w, s) in omegas.iter().zip(&scores) {
        let again = surface.score(w)?;
        if again.to_bits() != s.to_bits() {
            return Err(SelfGameError::NonDeterministicEvaluator { first: *s, second: again });
        }
    }
    let objectives: Vec<f64> = (0..omegas.len())
        .map(|k| selfgame_objective(k, &scores))
        .collect::<Result<_, _>>()?;

    let mut updated = Vec::with_capacity(omegas.len());
    let mut gradient_norms = Vec::with_capacity(omegas.len());
    for (k, w) in omegas.iter().enumerate() {
        let evaluate = |probe: &[f64]| -> Result<Vec<f64>, SelfGameError> {
            let mut s = scores.clone();
            s[k] = surface.score(probe)?;
            Ok(s)
        };
        let grad = estimate_gradient(k, w, evaluate, config.fd_step)?;
        gradient_norms.push(grad.iter().map(|g| g * g).sum::<f64>().sqrt());
        updated.push(if config.eta == 0.0 {
            w.clone()
        } else {
            w.iter().zip(&grad).map(|(x, g)| x + config.eta * g).collect()
        });
    }
    Ok((
        updated,
        RoundRecord {
            round,
            scores,
            objectives,
            gradient_norms,
        },
    ))
}

/// Runs `config.rounds` rounds; updates are applied only after every
/// viewpoint's gradient for the round is known.
pub fn run_selfgame(
    omegas: Vec<Vec<f64>>,
    surface: &dyn ScoreSurface,
    config: &SelfGameConfig,
) -> Result<SelfGameOutcome, SelfGameError> {
    config.validate()?;
    if omegas.len() < 2 {
        return Err(SelfGameError::SingleViewpoint);
    }
    let mut current = omegas;
    let mut rounds = Vec::with_capacity(config.rounds);
    for r in 0..config.rounds {
        let (next, record) = selfgame_round(&current, surface, config, r + 1)?;
        current = next;
        rounds.push(record);
    }
    Ok(SelfGameOutcome { omegas: current, rounds })
}

/// Shared pieces of a frozen scoring context.
struct Scorer<'a> {
    backend: &'a dyn Backend,
    base: &'a KnowledgeBase,
    mapping: SupportMapping,
    cache: Mutex<HashMap<String, f64>>,
}

impl Scorer<'_> {
    fn fact(&self, text: &str) -> Result<f64, SelfGameError> {
        if let Some(s) = self.cache.lock().unwrap_or_else(|e| e.into_inner()).get(text) {
            return Ok(*s);
        }
        let embedding = viewpoint_embedding(text, self.backend)?;
        let (score, _) = evidence_and_score(&embedding, self.base, self.mapping, None)?;
        let s = score.value();
        self.cache.lock().unwrap_or_else(|e| e.into_inner()).insert(text.to_string(), s);
        Ok(s)
    }
}

/// Expected fact score under a backend's closed-form viewpoint distribution.
/// Smooth in `ω`, so finite differences are meaningful.
pub struct ExpectedScoreSurface<'a> {
    scorer: Scorer<'a>,
    distribution: &'a dyn ViewpointDistribution,
    prompt: String,
    task_embedding: &'a EmbeddingVector,
}

impl<'a> ExpectedScoreSurface<'a> {
    pub fn new(
        backend: &'a dyn Backend,
        distribution: &'a dyn ViewpointDistribution,
        base: &'a KnowledgeBase,
        mapping: SupportMapping,
        prompt: String,
        task_embedding: &'a EmbeddingVector,
    ) -> Self {
        Self {
            scorer: Scorer {
                backend,
                base,
                mapping,
                cache: Mutex::new(HashMap::new()),
            },
            distribution,
            prompt,
            task_embedding,
        }
    }
}

impl ScoreSurface for ExpectedScoreSurface<'_> {
    fn score(&self, omega: &[f64]) -> Result<f64, SelfGameError> {
        let dist = self
            .distribution
            .viewpoint_distribution(&self.prompt, &modulate(omega, self.task_embedding))
            .map_err(AgentError::from)?;
        let mut total = 0.0;
        for (text, p) in &dist {
            total += p * self.scorer.fact(text)?;
        }
        Ok(total)
    }
}

/// Fact score of one generation under a fixed seed. Usable with any
/// backend, but piecewise constant in `ω` for sampled text.
pub struct SampledScoreSurface<'a> {
    scorer: Scorer<'a>,
    prompt: String,
    task_embedding: &'a EmbeddingVector,
    seed: u64,
    max_tokens: u32,
}

impl<'a> SampledScoreSurface<'a> {
    pub fn new(
        backend: &'a dyn Backend,
        base: &'a KnowledgeBase,
        mapping: SupportMapping,
        prompt: String,
        task_embedding: &'a EmbeddingVector,
        seed: u64,
        max_tokens: u32,
    ) -> Self {
        Self {
            scorer: Scorer {
                backend,
                base,
                mapping,
                cache: Mutex::new(HashMap::new()),
            },
            prompt,
            task_embedding,
            seed,
            max_tokens,
        }
    }
}

impl ScoreSurface for SampledScoreSurface<'_> {
    fn score(&self, omega: &[f64]) -> Result<f64, SelfGameError> {
        let request = BackendRequest::viewpoint(
            self.prompt.clone(),
            modulate(omega, self.task_embedding),
            self.seed,
            self.max_tokens,
        );
        let text = self.scorer.backend.complete(&request).map_err(AgentError::from)?.text;
        self.scorer.fact(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn objective_examples() {
        assert!((selfgame_objective(0, &[0.9, 0.5, 0.5]).unwrap() - 0.16).abs() < 1e-12);
        assert_eq!(selfgame_objective(1, &[0.4, 0.4, 0.4]).unwrap(), 0.0);
        assert_eq!(selfgame_objective(0, &[1.0, 0.0]).unwrap(), 1.0);
        assert!(matches!(selfgame_objective(0, &[0.3]), Err(SelfGameError::SingleViewpoint)));
    }

    #[test]
    fn gradient_of_squared_norm() {
        let x = [0.3, -1.2, 2.0];
        let g = central_difference(|w| Ok(w.iter().map(|v| v * v).sum()), &x, 1e-3).unwrap();
        for (gi, xi) in g.iter().zip(x) {
            assert!((gi - 2.0 * xi).abs() <= 1e-6 * (2.0 * xi).abs());
        }
    }

    struct Flat;
    impl ScoreSurface for Flat {
        fn score(&self, _: &[f64]) -> Result<f64, SelfGameError> {
            Ok(0.5)
        }
    }

    #[test]
    fn flat_surface_gives_zero_update() {
        let omegas = vec![vec![0.1, 0.2], vec![0.3, 0.4]];
        let out = run_selfgame(omegas.clone(), &Flat, &SelfGameConfig::default()).unwrap();
        assert_eq!(out.omegas, omegas);
        assert_eq!(out.rounds.len(), 3);
        assert!(out.rounds.iter().all(|r| r.gradient_norms.iter().all(|g| *g == 0.0)));
    }

    struct Flaky(std::sync::atomic::AtomicUsize);
    impl ScoreSurface for Flaky {
        fn score(&self, _: &[f64]) -> Result<f64, SelfGameError> {
            Ok(self.0.fetch_add(1, std::sync::atomic::Ordering::SeqCst) as f64)
        }
    }

    #[test]
    fn nondeterminism_is_detected() {
        let err = run_selfgame(vec![vec![0.0], vec![1.0]], &Flaky(0.into()), &SelfGameConfig::default()).unwrap_err();
        assert!(matches!(err, SelfGameError::NonDeterministicEvaluator { .. }));
    }

    #[test]
    fn single_viewpoint_is_rejected() {
        assert!(matches!(
            run_selfgame(vec![vec![0.0]], &Flat, &SelfGameConfig::default()),
            Err(SelfGameError::SingleViewpoint)
        ));
    }
}
