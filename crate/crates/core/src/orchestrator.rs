//! The closed deliberation loop: generate, self-game, regenerate, verify,
//! arbitrate, reward. Also evaluation metrics, traces and the training
//! environment built on top of the loop.

use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use log::warn;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{
    arbitrate, bypass_verification, conclude_single, generate_with_omegas, sample_omegas, verify_viewpoint_with,
    viewpoint_prompt, AgentError, AgentsConfig, Conclusion, TaskInput, Verification, Viewpoint,
};
use crate::backends::Backend;
use crate::dataset::{append_jsonl, DatasetError};
use crate::math::{GaussianPolicy, MathError, ScoreUnit};
use crate::prompts::Prompts;
use crate::retrieval::{KnowledgeBase, RetrievalConfig};
use crate::seed;
use crate::selfgame::{
    run_selfgame, ExpectedScoreSurface, RoundRecord, SampledScoreSurface, ScoreSurface, SelfGameConfig,
};
use crate::training::{composite_reward, Environment, Episode, PpoConfig, RewardBreakdown, TrainError};

pub const TRACE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("all {0} viewpoint generations failed")]
    TotalBackendFailure(usize),
    #[error("consistency needs at least two runs, got {0}")]
    TooFewRuns(usize),
    #[error("MissingGoldAnswers: task `{0}` has no gold answer")]
    MissingGoldAnswers(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Math(#[from] MathError),
    #[error(transparent)]
    Io(#[from] DatasetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub disable_selfgame: bool,
    /// Auto-accept every viewpoint instead of checking it against the base.
    pub disable_retrieval: bool,
    /// Train on a constant reward.
    pub constant_reward: bool,
    /// One agent; its viewpoint is the conclusion.
    pub single_agent: bool,
}

/// The five arms of the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Full,
    NoSelfGame,
    NoRetrieval,
    NoReward,
    SingleAgent,
}

impl Arm {
    pub const ALL: [Arm; 5] = [Arm::Full, Arm::NoSelfGame, Arm::NoRetrieval, Arm::NoReward, Arm::SingleAgent];

    pub fn ablation(self) -> AblationConfig {
        let mut a = AblationConfig::default();
        match self {
            Arm::Full => {}
            Arm::NoSelfGame => a.disable_selfgame = true,
            Arm::NoRetrieval => a.disable_retrieval = true,
            Arm::NoReward => a.constant_reward = true,
            Arm::SingleAgent => a.single_agent = true,
        }
        a
    }

    pub fn label(self) -> &'static str {
        match self {
            Arm::Full => "full",
            Arm::NoSelfGame => "-self-game",
            Arm::NoRetrieval => "-retrieval",
            Arm::NoReward => "-reward",
            Arm::SingleAgent => "single-agent",
        }
    }
}

/// Everything one deliberation needs besides the task and the policy.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub agents: AgentsConfig,
    pub retrieval: RetrievalConfig,
    pub selfgame: SelfGameConfig,
    pub ppo: PpoConfig,
    pub ablation: AblationConfig,
    /// Generate the K viewpoints concurrently.
    pub parallel_generation: bool,
}

impl PipelineConfig {
    pub fn effective_k(&self) -> usize {
        if self.ablation.single_agent {
            1
        } else {
            self.agents.k
        }
    }

    pub fn with_arm(mut self, arm: Arm) -> Self {
        self.ablation = arm.ablation();
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewpointRecord {
    pub k: usize,
    pub omega: Vec<f64>,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl ViewpointRecord {
    fn of(v: &Viewpoint) -> Self {
        Self {
            k: v.k,
            omega: v.omega.clone(),
            text: v.text.clone(),
            failure: match &v.verification {
                Verification::Failed { reason } => Some(reason.clone()),
                _ => None,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelfGameStatus {
    Ran,
    Disabled,
    SingleViewpoint,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfGameStage {
    pub status: SelfGameStatus,
    pub rounds: Vec<RoundRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateDecision {
    Accepted,
    Rejected,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceRecord {
    pub id: String,
    pub similarity: f64,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateRecord {
    pub k: usize,
    pub decision: GateDecision,
    pub fact_score: Option<f64>,
    pub evidence: Vec<EvidenceRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationStage {
    pub tau: f64,
    pub bypassed: bool,
    pub decisions: Vec<GateRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArbitrationStage {
    /// True in the single-agent arm, where no arbitration prompt is issued.
    pub skipped: bool,
    /// Viewpoint used when nothing passed the gate.
    pub fallback: Option<usize>,
    pub conclusion: Conclusion,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageTimings {
    pub generation: f64,
    pub selfgame: f64,
    pub regeneration: f64,
    pub verification: f64,
    pub arbitration: f64,
    pub reward: f64,
    pub total: f64,
}

/// Audit record of one deliberation; fields are in pipeline order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeliberationTrace {
    pub schema_version: u32,
    pub task_id: String,
    pub seed: u64,
    pub generation: Vec<ViewpointRecord>,
    pub selfgame: SelfGameStage,
    /// Present only when the self-game changed the weights.
    pub regeneration: Option<Vec<ViewpointRecord>>,
    pub verification: VerificationStage,
    pub arbitration: ArbitrationStage,
    pub reward: RewardBreakdown,
    pub degraded: bool,
    pub timings: StageTimings,
}

impl DeliberationTrace {
    /// The trace with wall-clock fields zeroed, for reproducibility checks.
    pub fn without_timings(&self) -> Self {
        Self {
            timings: StageTimings::default(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Deliberation {
    pub conclusion: Conclusion,
    pub trace: DeliberationTrace,
    pub reward: RewardBreakdown,
    /// The policy draws concatenated, before any self-game update.
    pub action: Vec<f64>,
}

/// Appends whole-line trace records; safe to share between threads.
pub struct TraceWriter {
    path: PathBuf,
    lock: Mutex<()>,
}

impl TraceWriter {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self {
            path: path.into(),
            lock: Mutex::new(()),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn write(&self, trace: &DeliberationTrace) -> Result<(), DatasetError> {
        let _guard = self.lock.lock().unwrap_or_else(|e| e.into_inner());
        append_jsonl(&self.path, trace)
    }
}

/// Shared, read-only components of the deliberation loop.
#[derive(Clone, Copy)]
pub struct Pipeline<'a> {
    pub backend: &'a dyn Backend,
    pub base: &'a KnowledgeBase,
    pub prompts: &'a Prompts,
    pub config: &'a PipelineConfig,
}

fn gate_record(v: &Viewpoint) -> GateRecord {
    let evidence = v
        .evidence()
        .unwrap_or(&[])
        .iter()
        .map(|e| EvidenceRecord {
            id: e.item.id.clone(),
            similarity: e.similarity,
            probability: e.probability,
        })
        .collect();
    let (decision, reason) = match &v.verification {
        Verification::Accepted { .. } => (GateDecision::Accepted, None),
        Verification::Rejected { .. } => (GateDecision::Rejected, None),
        Verification::Failed { reason } => (GateDecision::Failed, Some(reason.clone())),
        Verification::Pending => (GateDecision::Failed, Some("never verified".into())),
    };
    GateRecord {
        k: v.k,
        decision,
        fact_score: v.fact_score().map(ScoreUnit::value),
        evidence,
        reason,
    }
}

impl Pipeline<'_> {
    /// Runs the full loop once. `reference` is the frozen policy the KL term compares against.
    pub fn deliberate(
        &self,
        task: &TaskInput,
        policy: &GaussianPolicy,
        reference: &GaussianPolicy,
        root_seed: u64,
    ) -> Result<Deliberation, OrchestratorError> {
        let cfg = self.config;
        let k = cfg.effective_k();
        if k == 0 {
            return Err(AgentError::NoAgents.into());
        }
        if policy.dim() != task.embedding.dim() {
            return Err(AgentError::PolicyDimension {
                policy: policy.dim(),
                task: task.embedding.dim(),
            }
            .into());
        }
        let start = Instant::now();
        let mut timings = StageTimings::default();
        let generation_seed = seed::derive(root_seed, "generation", 0);
        let max_tokens = cfg.agents.max_tokens;

        let clock = Instant::now();
        let omegas = sample_omegas(policy, k, seed::derive(root_seed, "omega", 0));
        let action: Vec<f64> = omegas.iter().flatten().copied().collect();
        let mut viewpoints = generate_with_omegas(
            task,
            &omegas,
            self.backend,
            self.prompts,
            generation_seed,
            max_tokens,
            cfg.parallel_generation,
        );
        timings.generation = clock.elapsed().as_secs_f64();
        if viewpoints.iter().all(Viewpoint::is_failed) {
            return Err(OrchestratorError::TotalBackendFailure(k));
        }
        let generation: Vec<ViewpointRecord> = viewpoints.iter().map(ViewpointRecord::of).collect();

        let clock = Instant::now();
        let mut regeneration = None;
        let selfgame = if cfg.ablation.disable_selfgame || cfg.selfgame.rounds == 0 {
            SelfGameStage {
                status: SelfGameStatus::Disabled,
                rounds: Vec::new(),
            }
        } else if k < 2 {
            SelfGameStage {
                status: SelfGameStatus::SingleViewpoint,
                rounds: Vec::new(),
            }
        } else {
            let prompt = viewpoint_prompt(task, self.prompts);
            let mapping = cfg.agents.support_mapping;
            let expected;
            let sampled;
            let surface: &dyn ScoreSurface = match self.backend.as_distribution() {
                Some(dist) => {
                    expected =
                        ExpectedScoreSurface::new(self.backend, dist, self.base, mapping, prompt, &task.embedding);
                    &expected
                }
                None => {
                    sampled = SampledScoreSurface::new(
                        self.backend,
                        self.base,
                        mapping,
                        prompt,
                        &task.embedding,
                        generation_seed,
                        max_tokens,
                    );
                    &sampled
                }
            };
            match run_selfgame(omegas.clone(), surface, &cfg.selfgame) {
                Ok(out) => {
                    timings.selfgame = clock.elapsed().as_secs_f64();
                    if out.omegas != omegas {
                        let clock = Instant::now();
                        viewpoints = generate_with_omegas(
                            task,
                            &out.omegas,
                            self.backend,
                            self.prompts,
                            generation_seed,
                            max_tokens,
                            cfg.parallel_generation,
                        );
                        timings.regeneration = clock.elapsed().as_secs_f64();
                        regeneration = Some(viewpoints.iter().map(ViewpointRecord::of).collect());
                    }
                    SelfGameStage {
                        status: SelfGameStatus::Ran,
                        rounds: out.rounds,
                    }
                }
                Err(e) => {
                    warn!("task {}: self-game skipped: {e}", task.id);
                    SelfGameStage {
                        status: SelfGameStatus::Failed(e.to_string()),
                        rounds: Vec::new(),
                    }
                }
            }
        };
        if timings.selfgame == 0.0 {
            timings.selfgame = clock.elapsed().as_secs_f64();
        }
        if viewpoints.iter().all(Viewpoint::is_failed) {
            return Err(OrchestratorError::TotalBackendFailure(k));
        }

        let clock = Instant::now();
        let verified: Vec<Viewpoint> = viewpoints
            .into_iter()
            .map(|v| {
                if cfg.ablation.disable_retrieval {
                    Ok(bypass_verification(v))
                } else {
                    let sample_seed = cfg
                        .retrieval
                        .sampling
                        .then(|| seed::derive(root_seed, "evidence", v.k as u64));
                    verify_viewpoint_with(v, self.base, cfg.agents.tau, cfg.agents.support_mapping, sample_seed)
                }
            })
            .collect::<Result<_, AgentError>>()?;
        timings.verification = clock.elapsed().as_secs_f64();
        let verification = VerificationStage {
            tau: cfg.agents.tau,
            bypassed: cfg.ablation.disable_retrieval,
            decisions: verified.iter().map(gate_record).collect(),
        };

        let clock = Instant::now();
        let arbitration_seed = seed::derive(root_seed, "arbitration", 0);
        let accepted: Vec<&Viewpoint> = verified.iter().filter(|v| v.is_accepted()).collect();
        let (conclusion, fallback, s_fact) = if cfg.ablation.single_agent {
            let v = verified.iter().find(|v| !v.is_failed()).expect("checked above");
            let mut c = conclude_single(v, task, self.backend, self.prompts, &cfg.agents, arbitration_seed)?;
            c.degraded = !v.is_accepted();
            let s = v.fact_score().unwrap_or(ScoreUnit::ZERO);
            (c, None, s)
        } else if accepted.is_empty() {
            let best = verified
                .iter()
                .filter(|v| !v.is_failed())
                .fold(None::<&Viewpoint>, |best, v| match best {
                    Some(b) if b.fact_score() >= v.fact_score() => Some(b),
                    _ => Some(v),
                })
                .expect("checked above");
            let mut c = arbitrate(&[best], task, self.backend, self.prompts, &cfg.agents, arbitration_seed)?;
            c.degraded = true;
            (c, Some(best.k), best.fact_score().unwrap_or(ScoreUnit::ZERO))
        } else {
            let c = arbitrate(&accepted, task, self.backend, self.prompts, &cfg.agents, arbitration_seed)?;
            let mean = accepted
                .iter()
                .map(|v| v.fact_score().map_or(0.0, ScoreUnit::value))
                .sum::<f64>()
                / accepted.len() as f64;
            (c, None, ScoreUnit::new(mean)?)
        };
        timings.arbitration = clock.elapsed().as_secs_f64();

        let clock = Instant::now();
        let reward = composite_reward(
            s_fact,
            conclusion.coherence,
            policy,
            reference,
            cfg.ppo.lambda_reward,
            cfg.ppo.gamma_kl,
        )?;
        timings.reward = clock.elapsed().as_secs_f64();
        timings.total = start.elapsed().as_secs_f64();

        let degraded = conclusion.degraded;
        let trace = DeliberationTrace {
            schema_version: TRACE_SCHEMA_VERSION,
            task_id: task.id.clone(),
            seed: root_seed,
            generation,
            selfgame,
            regeneration,
            verification,
            arbitration: ArbitrationStage {
                skipped: cfg.ablation.single_agent,
                fallback,
                conclusion: conclusion.clone(),
            },
            reward,
            degraded,
            timings,
        };
        Ok(Deliberation {
            conclusion,
            trace,
            reward,
            action,
        })
    }
}

/// Case-folded, punctuation-free, whitespace-collapsed form used for matching.
pub fn normalize_answer(answer: &str) -> String {
    answer
        .to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect::<String>()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn exact_match(predicted: &str, gold: &str) -> bool {
    normalize_answer(predicted) == normalize_answer(gold)
}

/// Share of answers equal to the modal answer; ties go to the
/// lexicographically smallest candidate.
pub fn consistency_metric(answers: &[String]) -> Result<f64, OrchestratorError> {
    if answers.len() < 2 {
        return Err(OrchestratorError::TooFewRuns(answers.len()));
    }
    let mut normalized: Vec<String> = answers.iter().map(|a| normalize_answer(a)).collect();
    normalized.sort();
    let mut best = 0usize;
    let mut run = 0usize;
    for i in 0..normalized.len() {
        run = if i > 0 && normalized[i] == normalized[i - 1] { run + 1 } else { 1 };
        // strictly greater keeps the earliest (smallest) class on ties
        if run > best {
            best = run;
        }
    }
    Ok(best as f64 / answers.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRow {
    pub id: String,
    pub repetition: usize,
    pub gold: String,
    /// Answer of every run; empty when the run failed.
    pub answers: Vec<String>,
    pub correct: bool,
    pub consistency: Option<f64>,
    pub degraded_runs: usize,
    pub failed_runs: usize,
    pub mean_time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RepetitionScore {
    pub accuracy: f64,
    pub consistency: Option<f64>,
    pub mean_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Exact-match accuracy of first-run answers, averaged over repetitions.
    pub accuracy: f64,
    /// Mean per-task consistency; absent with fewer than two runs per task.
    pub consistency: Option<f64>,
    /// Mean seconds per deliberation.
    pub mean_time: f64,
    pub runs_per_task: usize,
    pub repetitions: Vec<RepetitionScore>,
    pub tasks: Vec<TaskRow>,
}

impl EvalReport {
    /// The report with wall-clock fields zeroed.
    pub fn without_timings(&self) -> Self {
        let mut r = self.clone();
        r.mean_time = 0.0;
        r.repetitions.iter_mut().for_each(|s| s.mean_time = 0.0);
        r.tasks.iter_mut().for_each(|t| t.mean_time = 0.0);
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub runs_per_task: usize,
    /// Independent evaluation passes with distinct seeds.
    pub repetitions: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            runs_per_task: 5,
            repetitions: 1,
        }
    }
}

/// Seed of run `run` of task `task` in repetition `rep`.
pub fn run_seed(root: u64, rep: usize, task: usize, run: usize) -> u64 {
    let r = seed::derive(root, "repetition", rep as u64);
    seed::derive(seed::derive(r, "task", task as u64), "run", run as u64)
}

/// Accuracy, consistency and time over a labelled dataset.
pub fn evaluate(
    pipeline: &Pipeline<'_>,
    tasks: &[TaskInput],
    policy: &GaussianPolicy,
    reference: &GaussianPolicy,
    eval: &EvalConfig,
    root_seed: u64,
    traces: Option<&TraceWriter>,
) -> Result<EvalReport, OrchestratorError> {
    if tasks.is_empty() {
        return Err(OrchestratorError::EmptyDataset);
    }
    if let Some(t) = tasks.iter().find(|t| t.gold_answer.is_none()) {
        return Err(OrchestratorError::MissingGoldAnswers(t.id.clone()));
    }
    let runs = eval.runs_per_task.max(1);
    let reps = eval.repetitions.max(1);
    let mut rows = Vec::with_capacity(tasks.len() * reps);
    let mut scores = Vec::with_capacity(reps);
    for rep in 0..reps {
        let rep_rows: Vec<TaskRow> = tasks
            .par_iter()
            .enumerate()
            .map(|(i, task)| -> Result<TaskRow, OrchestratorError> {
                let mut answers = Vec::with_capacity(runs);
                let mut time = 0.0;
                let mut degraded = 0;
                let mut failed = 0;
                for run in 0..runs {
                    let t0 = Instant::now();
                    match pipeline.deliberate(task, policy, reference, run_seed(root_seed, rep, i, run)) {
                        Ok(d) => {
                            if let Some(w) = traces {
                                w.write(&d.trace)?;
                            }
                            degraded += usize::from(d.conclusion.degraded);
                            answers.push(d.conclusion.answer);
                        }
                        Err(e) => {
                            warn!("task {} run {run}: {e}", task.id);
                            failed += 1;
                            answers.push(String::new());
                        }
                    }
                    time += t0.elapsed().as_secs_f64();
                }
                let gold = task.gold_answer.clone().expect("checked above");
                Ok(TaskRow {
                    id: task.id.clone(),
                    repetition: rep,
                    correct: !answers[0].is_empty() && exact_match(&answers[0], &gold),
                    consistency: if runs >= 2 { Some(consistency_metric(&answers)?) } else { None },
                    gold,
                    answers,
                    degraded_runs: degraded,
                    failed_runs: failed,
                    mean_time: time / runs as f64,
                })
            })
            .collect::<Result<_, _>>()?;
        let n = rep_rows.len() as f64;
        scores.push(RepetitionScore {
            accuracy: rep_rows.iter().filter(|r| r.correct).count() as f64 / n,
            consistency: (runs >= 2).then(|| rep_rows.iter().filter_map(|r| r.consistency).sum::<f64>() / n),
            mean_time: rep_rows.iter().map(|r| r.mean_time).sum::<f64>() / n,
        });
        rows.extend(rep_rows);
    }
    let m = scores.len() as f64;
    Ok(EvalReport {
        accuracy: scores.iter().map(|s| s.accuracy).sum::<f64>() / m,
        consistency: (runs >= 2).then(|| scores.iter().filter_map(|s| s.consistency).sum::<f64>() / m),
        mean_time: scores.iter().map(|s| s.mean_time).sum::<f64>() / m,
        runs_per_task: runs,
        repetitions: scores,
        tasks: rows,
    })
}

/// Training environment: each episode deliberates on a task drawn by seed.
pub struct DeliberationEnvironment<'a> {
    pub pipeline: Pipeline<'a>,
    pub tasks: &'a [TaskInput],
}

impl Environment for DeliberationEnvironment<'_> {
    fn episode(&self, policy: &GaussianPolicy, reference: &GaussianPolicy, seed: u64) -> Result<Episode, TrainError> {
        if self.tasks.is_empty() {
            return Err(TrainError::Environment("no training tasks".into()));
        }
        let i = seed::rng(seed::derive(seed, "task-pick", 0)).random_range(0..self.tasks.len());
        let task = &self.tasks[i];
        let d = self
            .pipeline
            .deliberate(task, policy, reference, seed::derive(seed, "deliberation", 0))
            .map_err(|e| TrainError::Environment(format!("task {}: {e}", task.id)))?;
        Ok(Episode {
            state: task.embedding.clone(),
            action: d.action,
            reward: d.reward.total,
            breakdown: Some(d.reward),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn consistency_examples() {
        assert!((consistency_metric(&s(&["A", "A", "A", "B", "A"])).unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(consistency_metric(&s(&["A"; 5])).unwrap(), 1.0);
        assert_eq!(consistency_metric(&s(&["A", "B"])).unwrap(), 0.5);
        assert!(matches!(consistency_metric(&s(&["A"])), Err(OrchestratorError::TooFewRuns(1))));
    }

    #[test]
    fn normalization() {
        assert!(exact_match("  The Eiffel-Tower. ", "the eiffeltower"));
        assert!(exact_match("New   York", "new york"));
        assert!(!exact_match("Paris", "London"));
    }

    #[test]
    fn arms_toggle_one_flag_each() {
        for arm in Arm::ALL {
            let a = arm.ablation();
            let on = [a.disable_selfgame, a.disable_retrieval, a.constant_reward, a.single_agent]
                .iter()
                .filter(|b| **b)
                .count();
            assert_eq!(on, usize::from(arm != Arm::Full));
        }
    }
}
