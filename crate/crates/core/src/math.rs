//! Stateless scoring kernels shared by every stage of a deliberation.
//!
//! Everything here is a pure function of its arguments. The viewpoint,
//! evidence and policy types are thin validated wrappers around `Vec<f64>`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Lower bound applied to every diagonal variance entry of a [`GaussianPolicy`].
pub const VARIANCE_FLOOR: f64 = 1e-6;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MathError {
    #[error("operand has zero Frobenius norm")]
    ZeroNormInput,
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("evidence list is empty")]
    EmptyEvidence,
    #[error("vector contains a non-finite entry")]
    NonFinite,
    #[error("embedding must have at least one dimension")]
    EmptyVector,
    #[error("embedding matrix must have at least one row")]
    EmptyMatrix,
    #[error("score {0} outside [0, 1]")]
    ScoreOutOfRange(f64),
}

/// A finite, fixed-dimension real vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, MathError> {
        if values.is_empty() {
            return Err(MathError::EmptyVector);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(MathError::NonFinite);
        }
        Ok(Self(values))
    }

    /// Builds the vector and rescales it to unit L2 norm.
    pub fn normalized(values: Vec<f64>) -> Result<Self, MathError> {
        let mut v = Self::new(values)?;
        let n = v.norm();
        if n == 0.0 {
            return Err(MathError::ZeroNormInput);
        }
        v.0.iter_mut().for_each(|x| *x /= n);
        Ok(v)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        dot(&self.0, &self.0).sqrt()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for EmbeddingVector {
    type Error = MathError;
    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(v: EmbeddingVector) -> Self {
        v.0
    }
}

/// One or more segment embeddings sharing a dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<EmbeddingVector>", into = "Vec<EmbeddingVector>")]
pub struct EmbeddingMatrix(Vec<EmbeddingVector>);

impl EmbeddingMatrix {
    pub fn new(rows: Vec<EmbeddingVector>) -> Result<Self, MathError> {
        let first = rows.first().ok_or(MathError::EmptyMatrix)?.dim();
        if let Some(bad) = rows.iter().find(|r| r.dim() != first) {
            return Err(MathError::DimensionMismatch {
                expected: first,
                actual: bad.dim(),
            });
        }
        Ok(Self(rows))
    }

    pub fn from_vector(v: EmbeddingVector) -> Self {
        Self(vec![v])
    }

    pub fn rows(&self) -> &[EmbeddingVector] {
        &self.0
    }

    pub fn row_count(&self) -> usize {
        self.0.len()
    }

    pub fn dim(&self) -> usize {
        self.0[0].dim()
    }

    /// Element-wise mean of the rows.
    pub fn mean_pool(&self) -> EmbeddingVector {
        let mut acc = vec![0.0; self.dim()];
        for row in &self.0 {
            for (a, x) in acc.iter_mut().zip(row.values()) {
                *a += x;
            }
        }
        let r = self.0.len() as f64;
        acc.iter_mut().for_each(|a| *a /= r);
        EmbeddingVector(acc)
    }

    fn frobenius_norm(&self) -> f64 {
        self.0.iter().map(|r| dot(r.values(), r.values())).sum::<f64>().sqrt()
    }
}

impl TryFrom<Vec<EmbeddingVector>> for EmbeddingMatrix {
    type Error = MathError;
    fn try_from(v: Vec<EmbeddingVector>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<EmbeddingMatrix> for Vec<EmbeddingVector> {
    fn from(m: EmbeddingMatrix) -> Self {
        m.0
    }
}

impl From<EmbeddingVector> for EmbeddingMatrix {
    fn from(v: EmbeddingVector) -> Self {
        Self::from_vector(v)
    }
}

/// A real number in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct ScoreUnit(f64);

impl ScoreUnit {
    pub const ZERO: ScoreUnit = ScoreUnit(0.0);
    pub const ONE: ScoreUnit = ScoreUnit(1.0);

    pub fn new(value: f64) -> Result<Self, MathError> {
        if (0.0..=1.0).contains(&value) {
            Ok(Self(value))
        } else {
            Err(MathError::ScoreOutOfRange(value))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for ScoreUnit {
    type Error = MathError;
    fn try_from(v: f64) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<ScoreUnit> for f64 {
    fn from(s: ScoreUnit) -> Self {
        s.0
    }
}

/// How a per-evidence cosine in `[-1, 1]` is mapped into `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupportMapping {
    /// `max(0, cos)`: contradicting evidence contributes nothing.
    #[default]
    Clamp,
    /// `(1 + cos) / 2`.
    Rescale,
}

impl SupportMapping {
    fn apply(self, cos: f64) -> f64 {
        match self {
            SupportMapping::Clamp => cos.max(0.0),
            SupportMapping::Rescale => ((1.0 + cos) / 2.0).clamp(0.0, 1.0),
        }
    }
}

/// Diagonal Gaussian over viewpoint weight vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPolicy {
    mean: Vec<f64>,
    variance: Vec<f64>,
}

impl GaussianPolicy {
    /// Variances below [`VARIANCE_FLOOR`] are raised to the floor.
    pub fn new(mean: Vec<f64>, variance: Vec<f64>) -> Result<Self, MathError> {
        if mean.is_empty() {
            return Err(MathError::EmptyVector);
        }
        if mean.len() != variance.len() {
            return Err(MathError::DimensionMismatch {
                expected: mean.len(),
                actual: variance.len(),
            });
        }
        if mean.iter().chain(&variance).any(|v| !v.is_finite()) {
            return Err(MathError::NonFinite);
        }
        let variance = variance.into_iter().map(|v| v.max(VARIANCE_FLOOR)).collect();
        Ok(Self { mean, variance })
    }

    pub fn isotropic(dim: usize, mean: f64, variance: f64) -> Result<Self, MathError> {
        Self::new(vec![mean; dim], vec![variance; dim])
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn variance(&self) -> &[f64] {
        &self.variance
    }

    /// Per-dimension log-variance, the coordinates the trainer optimizes.
    pub fn log_variance(&self) -> Vec<f64> {
        self.variance.iter().map(|v| v.ln()).collect()
    }

    pub fn from_log_variance(mean: Vec<f64>, log_variance: &[f64]) -> Result<Self, MathError> {
        Self::new(mean, log_variance.iter().map(|l| l.exp()).collect())
    }

    /// Draws one sample using the supplied standard-normal source.
    pub fn sample_with(&self, mut standard_normal: impl FnMut() -> f64) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.variance)
            .map(|(m, v)| m + v.sqrt() * standard_normal())
            .collect()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Plain cosine similarity between two equal-length vectors; zero when either is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

/// `Tr(A·Bᵀ) / (‖A‖_F ‖B‖_F)`. Matrices with different row counts are
/// mean-pooled to a single row first.
pub fn frobenius_cosine(a: &EmbeddingMatrix, b: &EmbeddingMatrix) -> Result<f64, MathError> {
    if a.dim() != b.dim() {
        return Err(MathError::DimensionMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    if a.row_count() != b.row_count() {
        let pa = EmbeddingMatrix::from_vector(a.mean_pool());
        let pb = EmbeddingMatrix::from_vector(b.mean_pool());
        return frobenius_cosine(&pa, &pb);
    }
    let na = a.frobenius_norm();
    let nb = b.frobenius_norm();
    if na == 0.0 || nb == 0.0 {
        return Err(MathError::ZeroNormInput);
    }
    let trace: f64 = a
        .rows()
        .iter()
        .zip(b.rows())
        .map(|(ra, rb)| dot(ra.values(), rb.values()))
        .sum();
    Ok((trace / (na * nb)).clamp(-1.0, 1.0))
}

/// Mean clamped Frobenius cosine between a viewpoint and its evidence.
pub fn fact_score(
    viewpoint: &EmbeddingMatrix,
    evidence: &[EmbeddingMatrix],
) -> Result<ScoreUnit, MathError> {
    fact_score_with(viewpoint, evidence, SupportMapping::Clamp)
}

pub fn fact_score_with(
    viewpoint: &EmbeddingMatrix,
    evidence: &[EmbeddingMatrix],
    mapping: SupportMapping,
) -> Result<ScoreUnit, MathError> {
    if evidence.is_empty() {
        return Err(MathError::EmptyEvidence);
    }
    let mut total = 0.0;
    for e in evidence {
        total += mapping.apply(frobenius_cosine(viewpoint, e)?);
    }
    ScoreUnit::new((total / evidence.len() as f64).clamp(0.0, 1.0))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `sigmoid(raw·w + b)`.
pub fn squash_coherence(raw: f64, w_cohe: f64, b_cohe: f64) -> ScoreUnit {
    // sigmoid never leaves [0, 1], so the constructor cannot fail
    ScoreUnit(sigmoid(raw * w_cohe + b_cohe))
}

/// Temperature-scaled softmax `exp(α·s_i) / Σ_j exp(α·s_j)`.
pub fn softmax_with_temperature(similarities: &[f64], alpha: f64) -> Vec<f64> {
    let max = similarities
        .iter()
        .map(|s| alpha * s)
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = similarities.iter().map(|s| (alpha * s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn check_dims(expected: usize, actual: usize) -> Result<(), MathError> {
    if expected == actual {
        Ok(())
    } else {
        Err(MathError::DimensionMismatch { expected, actual })
    }
}

/// Closed-form `KL(p ‖ q)` between diagonal Gaussians.
pub fn gaussian_kl(p: &GaussianPolicy, q: &GaussianPolicy) -> Result<f64, MathError> {
    check_dims(p.dim(), q.dim())?;
    let mut kl = 0.0;
    for i in 0..p.dim() {
        let (vp, vq) = (p.variance[i], q.variance[i]);
        let diff = p.mean[i] - q.mean[i];
        kl += 0.5 * ((vq / vp).ln() + (vp + diff * diff) / vq - 1.0);
    }
    Ok(kl.max(0.0))
}

/// Differential entropy `½ Σ_i ln(2πe σ_i²)`.
pub fn gaussian_entropy(p: &GaussianPolicy) -> f64 {
    p.variance.iter().map(|v| 0.5 * (LN_2PI + 1.0 + v.ln())).sum()
}

pub fn gaussian_log_prob(p: &GaussianPolicy, x: &[f64]) -> Result<f64, MathError> {
    check_dims(p.dim(), x.len())?;
    Ok(p.mean
        .iter()
        .zip(&p.variance)
        .zip(x)
        .map(|((m, v), xi)| -0.5 * (LN_2PI + v.ln() + (xi - m) * (xi - m) / v))
        .sum())
}

/// Sum of `gaussian_log_prob` over consecutive `dim`-sized blocks of `x`.
pub fn gaussian_log_prob_blocks(p: &GaussianPolicy, x: &[f64]) -> Result<f64, MathError> {
    if x.is_empty() || x.len() % p.dim() != 0 {
        return Err(MathError::DimensionMismatch {
            expected: p.dim(),
            actual: x.len(),
        });
    }
    x.chunks(p.dim()).map(|block| gaussian_log_prob(p, block)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> EmbeddingMatrix {
        EmbeddingMatrix::new(
            rows.iter()
                .map(|r| EmbeddingVector::new(r.to_vec()).unwrap())
                .collect(),
        )
        .unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn frobenius_cosine_examples() {
        assert!(close(frobenius_cosine(&mat(&[&[1.0, 0.0]]), &mat(&[&[1.0, 0.0]])).unwrap(), 1.0, 1e-12));
        assert!(close(frobenius_cosine(&mat(&[&[1.0, 0.0]]), &mat(&[&[0.0, 1.0]])).unwrap(), 0.0, 1e-12));
        assert!(close(frobenius_cosine(&mat(&[&[1.0, 0.0]]), &mat(&[&[-1.0, 0.0]])).unwrap(), -1.0, 1e-12));
        assert!(close(frobenius_cosine(&mat(&[&[3.0, 4.0]]), &mat(&[&[3.0, 4.0]])).unwrap(), 1.0, 1e-12));
    }

    #[test]
    fn frobenius_cosine_equal_rows_uses_trace() {
        // rows pair up: trace = 1 + 0, norms sqrt(2) each
        let a = mat(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let b = mat(&[&[1.0, 0.0], &[1.0, 0.0]]);
        assert!(close(frobenius_cosine(&a, &b).unwrap(), 0.5, 1e-12));
    }

    #[test]
    fn frobenius_cosine_mixed_rows_pools() {
        let a = mat(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let b = mat(&[&[1.0, 1.0]]);
        assert!(close(frobenius_cosine(&a, &b).unwrap(), 1.0, 1e-12));
    }

    #[test]
    fn frobenius_cosine_rejects_zero_and_mismatch() {
        assert_eq!(
            frobenius_cosine(&mat(&[&[0.0, 0.0]]), &mat(&[&[1.0, 0.0]])),
            Err(MathError::ZeroNormInput)
        );
        assert!(matches!(
            frobenius_cosine(&mat(&[&[1.0, 0.0]]), &mat(&[&[1.0, 0.0, 0.0]])),
            Err(MathError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn fact_score_examples() {
        let v = mat(&[&[1.0, 0.0]]);
        assert_eq!(fact_score(&v, &[mat(&[&[1.0, 0.0]])]).unwrap().value(), 1.0);
        let two = fact_score(&v, &[mat(&[&[1.0, 0.0]]), mat(&[&[0.0, 1.0]])]).unwrap();
        assert!(close(two.value(), 0.5, 1e-12));
        assert_eq!(fact_score(&v, &[mat(&[&[-1.0, 0.0]])]).unwrap().value(), 0.0);
        assert_eq!(fact_score(&v, &[]), Err(MathError::EmptyEvidence));
    }

    #[test]
    fn rescale_mapping_maps_antiparallel_to_zero() {
        let v = mat(&[&[1.0, 0.0]]);
        let s = fact_score_with(&v, &[mat(&[&[-1.0, 0.0]]), mat(&[&[0.0, 1.0]])], SupportMapping::Rescale)
            .unwrap();
        assert!(close(s.value(), 0.25, 1e-12));
    }

    #[test]
    fn squash_examples() {
        assert_eq!(squash_coherence(0.0, 1.0, 0.0).value(), 0.5);
        assert_eq!(squash_coherence(123.0, 0.0, 0.0).value(), 0.5);
        assert!(close(squash_coherence(2.0, 1.0, 0.0).value(), 1.0 / (1.0 + (-2.0f64).exp()), 1e-15));
        assert!(close(squash_coherence(2.0, 1.0, 0.0).value(), 0.8808, 1e-4));
        // saturation stays finite on both sides
        assert_eq!(squash_coherence(-1e6, 1.0, 0.0).value(), 0.0);
        assert_eq!(squash_coherence(1e6, 1.0, 0.0).value(), 1.0);
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax_with_temperature(&[0.5, 0.5], 1.5), vec![0.5, 0.5]);
        let p = softmax_with_temperature(&[1.0, 0.0], 1.5);
        let e = 1.5f64.exp();
        assert!(close(p[0], e / (e + 1.0), 1e-15));
        assert!(close(p[0], 0.8176, 1e-4) && close(p[1], 0.1824, 1e-4));
        for q in softmax_with_temperature(&[7.0, 7.0, 7.0], 3.0) {
            assert!(close(q, 1.0 / 3.0, 1e-15));
        }
        // large magnitudes do not overflow
        let big = softmax_with_temperature(&[1e4, 0.0], 10.0);
        assert!(close(big[0], 1.0, 1e-12));
    }

    #[test]
    fn kl_examples() {
        let std1 = GaussianPolicy::isotropic(1, 0.0, 1.0).unwrap();
        assert_eq!(gaussian_kl(&std1, &std1).unwrap(), 0.0);
        let shifted = GaussianPolicy::isotropic(1, 1.0, 1.0).unwrap();
        assert!(close(gaussian_kl(&shifted, &std1).unwrap(), 0.5, 1e-12));
        let std2 = GaussianPolicy::isotropic(2, 0.0, 1.0).unwrap();
        assert_eq!(gaussian_kl(&std2, &std2).unwrap(), 0.0);
        assert!(matches!(gaussian_kl(&std1, &std2), Err(MathError::DimensionMismatch { .. })));
    }

    #[test]
    fn kl_is_asymmetric() {
        let p = GaussianPolicy::new(vec![0.0], vec![1.0]).unwrap();
        let q = GaussianPolicy::new(vec![1.0], vec![4.0]).unwrap();
        let pq = gaussian_kl(&p, &q).unwrap();
        let qp = gaussian_kl(&q, &p).unwrap();
        assert!((pq - qp).abs() > 0.1, "{pq} vs {qp}");
    }

    #[test]
    fn entropy_examples() {
        let p = GaussianPolicy::isotropic(1, 0.0, 1.0).unwrap();
        let expected = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
        assert!(close(gaussian_entropy(&p), expected, 1e-12));
        assert!(close(gaussian_entropy(&p), 1.41894, 1e-5));
        let wide = GaussianPolicy::isotropic(1, 0.0, 2.0).unwrap();
        assert!(close(gaussian_entropy(&wide) - gaussian_entropy(&p), 0.5 * 2f64.ln(), 1e-12));
        let moved = GaussianPolicy::isotropic(1, 5.0, 1.0).unwrap();
        assert_eq!(gaussian_entropy(&moved), gaussian_entropy(&p));
    }

    #[test]
    fn log_prob_examples() {
        let p = GaussianPolicy::isotropic(1, 0.0, 1.0).unwrap();
        let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!(close(gaussian_log_prob(&p, &[0.0]).unwrap(), -half_ln_2pi, 1e-12));
        assert!(close(gaussian_log_prob(&p, &[0.0]).unwrap(), -0.91894, 1e-5));
        assert!(close(gaussian_log_prob(&p, &[1.0]).unwrap(), -half_ln_2pi - 0.5, 1e-12));
        assert!(gaussian_log_prob(&p, &[0.0, 1.0]).is_err());
    }

    #[test]
    fn variance_floor_applies() {
        let p = GaussianPolicy::new(vec![0.0, 0.0], vec![0.0, -3.0]).unwrap();
        assert!(p.variance().iter().all(|v| *v == VARIANCE_FLOOR));
    }

    #[test]
    fn block_log_prob_sums_blocks() {
        let p = GaussianPolicy::isotropic(2, 0.0, 1.0).unwrap();
        let x = [0.1, -0.2, 0.3, 0.4];
        let expected = gaussian_log_prob(&p, &x[..2]).unwrap() + gaussian_log_prob(&p, &x[2..]).unwrap();
        assert!(close(gaussian_log_prob_blocks(&p, &x).unwrap(), expected, 1e-15));
        assert!(gaussian_log_prob_blocks(&p, &x[..3]).is_err());
    }

    #[test]
    fn score_unit_rejects_out_of_range() {
        assert!(ScoreUnit::new(1.0000001).is_err());
        assert!(ScoreUnit::new(-0.1).is_err());
        assert!(serde_json::from_str::<ScoreUnit>("1.5").is_err());
    }

    #[test]
    fn embedding_vector_rejects_non_finite() {
        assert_eq!(EmbeddingVector::new(vec![f64::NAN]), Err(MathError::NonFinite));
        assert_eq!(EmbeddingVector::new(vec![]), Err(MathError::EmptyVector));
        assert!(serde_json::from_str::<EmbeddingVector>("[]").is_err());
    }
}
