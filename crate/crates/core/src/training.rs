//! Composite reward and the clipped-surrogate policy-gradient trainer for
//! the Gaussian weight policy.

use std::io::Write;
use std::path::Path;

use log::debug;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::{
    gaussian_entropy, gaussian_kl, gaussian_log_prob_blocks, EmbeddingVector, GaussianPolicy, MathError, ScoreUnit,
};
use crate::seed;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const CURVE_HEADER: &str = "step,mean_reward,entropy,clip_fraction,kl_to_ref";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Math(#[from] MathError),
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("loss became non-finite at update {step}")]
    NonFiniteLoss { step: usize },
    #[error("episode failed: {0}")]
    Environment(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    /// Ratio clip half-width.
    pub epsilon: f64,
    /// Entropy bonus weight.
    pub beta: f64,
    pub learning_rate: f64,
    pub epochs_per_batch: usize,
    pub batch_size: usize,
    /// Fact-score weight in the composite reward.
    pub lambda_reward: f64,
    /// KL penalty weight in the composite reward.
    pub gamma_kl: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.2,
            beta: 0.05,
            learning_rate: 3e-3,
            epochs_per_batch: 4,
            batch_size: 64,
            lambda_reward: 0.6,
            gamma_kl: 0.1,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad(format!("training.epsilon must lie in (0, 1), got {}", self.epsilon));
        }
        if !(self.beta >= 0.0) {
            return bad(format!("training.beta must be non-negative, got {}", self.beta));
        }
        if !(0.0..=1.0).contains(&self.lambda_reward) {
            return bad(format!("training.lambda_reward must lie in [0, 1], got {}", self.lambda_reward));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("training.learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size < 2 {
            return bad("training.batch_size must be at least 2".into());
        }
        if self.epochs_per_batch == 0 {
            return bad("training.epochs_per_batch must be at least 1".into());
        }
        if !(self.gamma_kl >= 0.0) {
            return bad(format!("training.gamma_kl must be non-negative, got {}", self.gamma_kl));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub s_fact: ScoreUnit,
    pub s_cohe: ScoreUnit,
    pub kl: f64,
    pub total: f64,
}

/// `λ·s_fact + (1−λ)·s_cohe − γ·KL(policy ‖ reference)`.
pub fn composite_reward(
    s_fact: ScoreUnit,
    s_cohe: ScoreUnit,
    policy: &GaussianPolicy,
    reference: &GaussianPolicy,
    lambda: f64,
    gamma: f64,
) -> Result<RewardBreakdown, MathError> {
    let kl = gaussian_kl(policy, reference)?;
    Ok(RewardBreakdown {
        s_fact,
        s_cohe,
        kl,
        total: lambda * s_fact.value() + (1.0 - lambda) * s_cohe.value() - gamma * kl,
    })
}

/// Mean-centred rewards, scaled to unit variance when the spread allows.
pub fn compute_advantages(rewards: &[f64]) -> Vec<f64> {
    if rewards.is_empty() {
        return Vec::new();
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let centred: Vec<f64> = rewards.iter().map(|r| r - mean).collect();
    let std = (centred.iter().map(|a| a * a).sum::<f64>() / n).sqrt();
    if std > 1e-8 {
        centred.into_iter().map(|a| a / std).collect()
    } else {
        vec![0.0; rewards.len()]
    }
}

/// A single-step episode as seen by the trainer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: EmbeddingVector,
    /// Concatenated weight draws, `K·d` entries.
    pub action: Vec<f64>,
    pub log_prob_old: f64,
    pub reward: f64,
    pub advantage: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub loss: f64,
    pub surrogate: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub entropy: f64,
    /// Every advantage was zero; only the entropy term is active.
    pub degenerate: bool,
}

/// Gradient of the loss with respect to the mean and the log-variances.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGradient {
    pub mean: Vec<f64>,
    pub log_variance: Vec<f64>,
}

pub fn ppo_loss(batch: &[Transition], policy: &GaussianPolicy, config: &PpoConfig) -> Result<LossReport, TrainError> {
    Ok(ppo_loss_and_gradient(batch, policy, config)?.0)
}

/// `−mean(min(r·A, clip(r, 1−ε, 1+ε)·A)) − β·H(π)` and its exact gradient.
pub fn ppo_loss_and_gradient(
    batch: &[Transition],
    policy: &GaussianPolicy,
    config: &PpoConfig,
) -> Result<(LossReport, PolicyGradient), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let d = policy.dim();
    let mu = policy.mean();
    let var = policy.variance();
    let n = batch.len() as f64;
    let mut g_mu = vec![0.0; d];
    let mut g_lv = vec![0.0; d];
    let mut surrogate = 0.0;
    let mut ratio_sum = 0.0;
    let mut clipped = 0usize;
    for t in batch {
        let ratio = (gaussian_log_prob_blocks(policy, &t.action)? - t.log_prob_old).exp();
        let a = t.advantage;
        let bounded = ratio.clamp(1.0 - config.epsilon, 1.0 + config.epsilon);
        let unclipped_term = ratio * a;
        let clipped_term = bounded * a;
        surrogate += unclipped_term.min(clipped_term);
        ratio_sum += ratio;
        if (ratio - 1.0).abs() > config.epsilon {
            clipped += 1;
        }
        // the clipped branch is constant in the parameters
        if unclipped_term <= clipped_term && a != 0.0 {
            let w = ratio * a;
            for block in t.action.chunks(d) {
                for i in 0..d {
                    let diff = block[i] - mu[i];
                    g_mu[i] += w * diff / var[i];
                    g_lv[i] += w * (-0.5 + diff * diff / (2.0 * var[i]));
                }
            }
        }
    }
    let entropy = gaussian_entropy(policy);
    let degenerate = batch.iter().all(|t| t.advantage == 0.0);
    if degenerate {
        debug!("degenerate batch: all advantages are zero");
    }
    let surrogate = surrogate / n;
    let report = LossReport {
        loss: -surrogate - config.beta * entropy,
        surrogate,
        mean_ratio: ratio_sum / n,
        clip_fraction: clipped as f64 / n,
        entropy,
        degenerate,
    };
    let grad = PolicyGradient {
        mean: g_mu.into_iter().map(|g| -g / n).collect(),
        log_variance: g_lv.into_iter().map(|g| -g / n - 0.5 * config.beta).collect(),
    };
    Ok((report, grad))
}

/// One plain gradient-descent step on `(μ, log σ²)`; variances are floored.
pub fn apply_gradient(policy: &GaussianPolicy, grad: &PolicyGradient, lr: f64) -> Result<GaussianPolicy, MathError> {
    let mean = policy.mean().iter().zip(&grad.mean).map(|(m, g)| m - lr * g).collect();
    let lv: Vec<f64> = policy
        .log_variance()
        .iter()
        .zip(&grad.log_variance)
        .map(|(l, g)| l - lr * g)
        .collect();
    GaussianPolicy::from_log_variance(mean, &lv)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub state: EmbeddingVector,
    pub action: Vec<f64>,
    pub reward: f64,
    pub breakdown: Option<RewardBreakdown>,
}

/// Runs one episode with weights drawn from `policy`.
pub trait Environment: Sync {
    fn episode(&self, policy: &GaussianPolicy, reference: &GaussianPolicy, seed: u64) -> Result<Episode, TrainError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CurveRow {
    pub step: usize,
    pub mean_reward: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub kl_to_ref: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub policy: GaussianPolicy,
    pub curve: Vec<CurveRow>,
    /// Environment reward of every episode, in collection order.
    pub episode_rewards: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TrainOptions {
    /// Replace every reward with the same constant before computing advantages.
    pub constant_reward: bool,
}

/// `steps` updates, each on a fresh batch of `batch_size` episodes.
pub fn train(
    env: &dyn Environment,
    config: &PpoConfig,
    initial: &GaussianPolicy,
    steps: usize,
    root_seed: u64,
    options: TrainOptions,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let reference = initial.clone();
    let mut policy = initial.clone();
    let mut curve = Vec::with_capacity(steps);
    let mut episode_rewards = Vec::with_capacity(steps * config.batch_size);
    for step in 0..steps {
        let episodes: Vec<Episode> = (0..config.batch_size)
            .into_par_iter()
            .map(|i| {
                let s = seed::derive(root_seed, "episode", (step * config.batch_size + i) as u64);
                env.episode(&policy, &reference, s)
            })
            .collect::<Result<_, _>>()?;
        let rewards: Vec<f64> = episodes.iter().map(|e| e.reward).collect();
        let signal = if options.constant_reward {
            vec![1.0; rewards.len()]
        } else {
            rewards.clone()
        };
        let advantages = compute_advantages(&signal);
        let batch: Vec<Transition> = episodes
            .into_iter()
            .zip(&advantages)
            .map(|(e, a)| {
                Ok(Transition {
                    log_prob_old: gaussian_log_prob_blocks(&policy, &e.action)?,
                    state: e.state,
                    action: e.action,
                    reward: e.reward,
                    advantage: *a,
                })
            })
            .collect::<Result<_, MathError>>()?;

        let mut last = None;
        for _ in 0..config.epochs_per_batch {
            let (report, grad) = ppo_loss_and_gradient(&batch, &policy, config)?;
            if !report.loss.is_finite() || grad.mean.iter().chain(&grad.log_variance).any(|g| !g.is_finite()) {
                return Err(TrainError::NonFiniteLoss { step: step + 1 });
            }
            policy = apply_gradient(&policy, &grad, config.learning_rate)?;
            last = Some(report);
        }
        let report = last.expect("at least one epoch");
        let row = CurveRow {
            step: step + 1,
            mean_reward: rewards.iter().sum::<f64>() / rewards.len() as f64,
            entropy: gaussian_entropy(&policy),
            clip_fraction: report.clip_fraction,
            kl_to_ref: gaussian_kl(&policy, &reference)?,
        };
        debug!(
            "update {}: reward {:.4} entropy {:.4} clip {:.3} kl {:.4}",
            row.step, row.mean_reward, row.entropy, row.clip_fraction, row.kl_to_ref
        );
        curve.push(row);
        episode_rewards.extend(rewards);
    }
    Ok(TrainOutcome {
        policy,
        curve,
        episode_rewards,
    })
}

pub fn write_curve_csv(path: &Path, curve: &[CurveRow]) -> Result<(), TrainError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{CURVE_HEADER}")?;
    for r in curve {
        writeln!(
            f,
            "{},{},{},{},{}",
            r.step, r.mean_reward, r.entropy, r.clip_fraction, r.kl_to_ref
        )?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub dim: usize,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl Checkpoint {
    pub fn from_policy(policy: &GaussianPolicy) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            dim: policy.dim(),
            mean: policy.mean().to_vec(),
            variance: policy.variance().to_vec(),
        }
    }

    pub fn into_policy(self) -> Result<GaussianPolicy, TrainError> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(TrainError::Checkpoint(format!(
                "unsupported format_version {}",
                self.format_version
            )));
        }
        if self.mean.len() != self.dim || self.variance.len() != self.dim {
            return Err(TrainError::Checkpoint(format!("vectors do not match dim {}", self.dim)));
        }
        Ok(GaussianPolicy::new(self.mean, self.variance)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let json = serde_json::to_string_pretty(self).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        std::fs::write(path, json + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| TrainError::Checkpoint(format!("{}: {e}", path.display())))
    }
}

/// Convex test environment: reward `−mean_k ‖ω_k − ω*‖²` for a hidden target.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticEnvironment {
    pub target: Vec<f64>,
    pub draws: usize,
}

impl Environment for QuadraticEnvironment {
    fn episode(&self, policy: &GaussianPolicy, _reference: &GaussianPolicy, seed: u64) -> Result<Episode, TrainError> {
        let mut rng = seed::rng(seed);
        let mut action = Vec::with_capacity(self.draws * policy.dim());
        let mut reward = 0.0;
        for _ in 0..self.draws {
            let w = policy.sample_with(|| StandardNormal.sample(&mut rng));
            reward -= w.iter().zip(&self.target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            action.extend(w);
        }
        let mut e0 = vec![0.0; policy.dim()];
        e0[0] = 1.0;
        Ok(Episode {
            state: EmbeddingVector::new(e0)?,
            action,
            reward: reward / self.draws as f64,
            breakdown: None,
        })
    }
}
