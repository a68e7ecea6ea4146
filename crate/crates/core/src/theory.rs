//! Softmax-head numerics: output covariance, reduced Fisher geometry, the
//! signal-to-noise criterion for detecting a parameter perturbation and its
//! behaviour as the sampling temperature goes to zero.
//!
//! Dimensions here are desk-scale (tens of tokens), so everything is dense.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TheoryError {
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("need at least {min} logits, got {got}")]
    TooFewLogits { min: usize, got: usize },
    #[error("jacobian has {rows} rows but head has {logits} logits")]
    JacobianShape { rows: usize, logits: usize },
    #[error("head has no logit jacobian")]
    MissingJacobian,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("direction must have unit norm (got norm {0})")]
    NotUnitNorm(f64),
    #[error("reduced probabilities must be interior (each in (0,1), sum < 1)")]
    BoundaryProbability,
    #[error("alpha must lie in (0, 1), got {0}")]
    InvalidAlpha(f64),
    #[error("index set must be nonempty and within 0..{0}")]
    InvalidIndexSet(usize),
    #[error("temperature grid must be nonempty")]
    EmptyGrid,
}

/// Final linear layer state: logits `z`, optionally their Jacobian `J_z`
/// with respect to `q` parameters, and a sampling temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxHead {
    logits: DVector<f64>,
    jacobian: Option<DMatrix<f64>>,
    temperature: f64,
}

impl SoftmaxHead {
    pub fn new(logits: DVector<f64>, temperature: f64) -> Result<Self, TheoryError> {
        if logits.len() < 2 {
            return Err(TheoryError::TooFewLogits {
                min: 2,
                got: logits.len(),
            });
        }
        check_temperature(temperature)?;
        Ok(Self {
            logits,
            jacobian: None,
            temperature,
        })
    }

    pub fn with_jacobian(mut self, jacobian: DMatrix<f64>) -> Result<Self, TheoryError> {
        if jacobian.nrows() != self.logits.len() {
            return Err(TheoryError::JacobianShape {
                rows: jacobian.nrows(),
                logits: self.logits.len(),
            });
        }
        self.jacobian = Some(jacobian);
        Ok(self)
    }

    pub fn with_temperature(&self, temperature: f64) -> Result<Self, TheoryError> {
        check_temperature(temperature)?;
        Ok(Self {
            temperature,
            ..self.clone()
        })
    }

    pub fn logits(&self) -> &DVector<f64> {
        &self.logits
    }

    pub fn jacobian(&self) -> Option<&DMatrix<f64>> {
        self.jacobian.as_ref()
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn vocab_size(&self) -> usize {
        self.logits.len()
    }
}

fn check_temperature(t: f64) -> Result<(), TheoryError> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(TheoryError::NonPositiveTemperature(t))
    }
}

/// Unit-norm perturbation direction in parameter space.
#[derive(Debug, Clone, PartialEq)]
pub struct Direction(DVector<f64>);

impl Direction {
    pub fn new(h: DVector<f64>) -> Result<Self, TheoryError> {
        let norm = h.norm();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(TheoryError::NotUnitNorm(norm));
        }
        Ok(Self(h))
    }

    /// Rescales `v` to unit norm.
    pub fn normalized(v: DVector<f64>) -> Result<Self, TheoryError> {
        let norm = v.norm();
        if norm == 0.0 || !norm.is_finite() {
            return Err(TheoryError::NotUnitNorm(norm));
        }
        Ok(Self(v / norm))
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Temperature-scaled softmax of raw logits, with max-logit subtraction.
pub fn softmax_logits(z: &DVector<f64>, temperature: f64) -> Result<DVector<f64>, TheoryError> {
    check_temperature(temperature)?;
    let max = z.max();
    let mut p = z.map(|zi| ((zi - max) / temperature).exp());
    let sum = p.sum();
    p /= sum;
    Ok(p)
}

pub fn softmax(head: &SoftmaxHead) -> Result<DVector<f64>, TheoryError> {
    softmax_logits(&head.logits, head.temperature)
}

/// `diag(p) - p p^T`.
///
/// Diagonal entries use `p_i * sum_{j != i} p_j` instead of `p_i - p_i^2`,
/// which keeps precision when one entry is within rounding of 1.
pub fn sigma(p: &DVector<f64>) -> DMatrix<f64> {
    let d = p.len();
    let mut s = -(p * p.transpose());
    for i in 0..d {
        let rest: f64 = p.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &v)| v).sum();
        s[(i, i)] = p[i] * rest;
    }
    s
}

fn check_interior(p_reduced: &DVector<f64>) -> Result<f64, TheoryError> {
    if p_reduced.is_empty() || p_reduced.iter().any(|&v| !(v > 0.0 && v < 1.0)) {
        return Err(TheoryError::BoundaryProbability);
    }
    let last = 1.0 - p_reduced.sum();
    if last <= 0.0 {
        return Err(TheoryError::BoundaryProbability);
    }
    Ok(last)
}

/// Covariance of one categorical draw in reduced coordinates (first `d-1`
/// probabilities), i.e. the inverse Fisher information.
pub fn fisher_reduced(p_reduced: &DVector<f64>) -> Result<DMatrix<f64>, TheoryError> {
    check_interior(p_reduced)?;
    Ok(DMatrix::from_diagonal(p_reduced) - p_reduced * p_reduced.transpose())
}

/// Closed-form inverse of [`fisher_reduced`]: `diag(p)^-1 + (1/p_d) 1 1^T`.
pub fn fisher_reduced_inverse(p_reduced: &DVector<f64>) -> Result<DMatrix<f64>, TheoryError> {
    let last = check_interior(p_reduced)?;
    let n = p_reduced.len();
    let mut inv = DMatrix::from_element(n, n, 1.0 / last);
    for i in 0..n {
        inv[(i, i)] += 1.0 / p_reduced[i];
    }
    Ok(inv)
}

/// `(1/tau) A(p)`: derivative of the reduced softmax output with respect to the
/// logits, where `A` keeps the first `d-1` rows of `sigma(p)`.
pub fn reduced_softmax_logit_jacobian(
    z: &DVector<f64>,
    temperature: f64,
) -> Result<DMatrix<f64>, TheoryError> {
    let p = softmax_logits(z, temperature)?;
    let d = p.len();
    Ok(sigma(&p).rows(0, d - 1).into_owned() / temperature)
}

/// Chain rule: `J^(tau) = (1/tau) A(p) J_z`, shape `(d-1) x q`.
pub fn reduced_output_jacobian(head: &SoftmaxHead) -> Result<DMatrix<f64>, TheoryError> {
    let jz = head.jacobian.as_ref().ok_or(TheoryError::MissingJacobian)?;
    Ok(reduced_softmax_logit_jacobian(&head.logits, head.temperature)? * jz)
}

/// `(1/tau^2) h^T J_z^T sigma(p) J_z h`, computed in full coordinates.
pub fn snr_squared(head: &SoftmaxHead, h: &Direction) -> Result<f64, TheoryError> {
    let jz = head.jacobian.as_ref().ok_or(TheoryError::MissingJacobian)?;
    if jz.ncols() != h.dim() {
        return Err(TheoryError::DimensionMismatch {
            expected: jz.ncols(),
            got: h.dim(),
        });
    }
    let p = softmax(head)?;
    let v = jz * h.as_vector();
    let quad = (v.transpose() * sigma(&p) * &v)[(0, 0)];
    Ok(quad.max(0.0) / (head.temperature * head.temperature))
}

/// `h^T J^T F(p0)^-1 J h` for a reduced-coordinate output Jacobian `J`.
pub fn snr_squared_reduced(
    jacobian: &DMatrix<f64>,
    p0_reduced: &DVector<f64>,
    h: &Direction,
) -> Result<f64, TheoryError> {
    if jacobian.nrows() != p0_reduced.len() {
        return Err(TheoryError::DimensionMismatch {
            expected: p0_reduced.len(),
            got: jacobian.nrows(),
        });
    }
    if jacobian.ncols() != h.dim() {
        return Err(TheoryError::DimensionMismatch {
            expected: jacobian.ncols(),
            got: h.dim(),
        });
    }
    let f_inv = fisher_reduced_inverse(p0_reduced)?;
    let v = jacobian * h.as_vector();
    Ok(((v.transpose() * f_inv * &v)[(0, 0)]).max(0.0))
}

/// Limiting Type-II error of the most powerful level-`alpha` test against a
/// local alternative at rate `s / sqrt(n)`: `Phi(Q_alpha - |s| sqrt(SNR^2))`.
pub fn asymptotic_type2(alpha: f64, s: f64, snr_squared: f64) -> Result<f64, TheoryError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(TheoryError::InvalidAlpha(alpha));
    }
    let normal = Normal::standard();
    let q_alpha = normal.inverse_cdf(1.0 - alpha);
    let shift = s.abs() * snr_squared.max(0.0).sqrt();
    Ok(normal.cdf(q_alpha - shift))
}

/// Indices whose logit lies within `tol` of the maximum.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaximizerSet {
    indices: Vec<usize>,
}

impl MaximizerSet {
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn k(&self) -> usize {
        self.indices.len()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.indices.binary_search(&i).is_ok()
    }
}

pub fn maximizer_set(z: &[f64], tol: f64) -> MaximizerSet {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let indices = z
        .iter()
        .enumerate()
        .filter(|&(_, &zi)| zi >= max - tol)
        .map(|(i, _)| i)
        .collect();
    MaximizerSet { indices }
}

/// `sigma` of the distribution uniform on `indices` (zero elsewhere), in dimension `d`.
pub fn sigma_uniform_on(indices: &[usize], d: usize) -> Result<DMatrix<f64>, TheoryError> {
    if indices.is_empty() || indices.iter().any(|&i| i >= d) {
        return Err(TheoryError::InvalidIndexSet(d));
    }
    let mut uniq = indices.to_vec();
    uniq.sort_unstable();
    uniq.dedup();
    let mass = 1.0 / uniq.len() as f64;
    let mut p = DVector::zeros(d);
    for i in uniq {
        p[i] = mass;
    }
    Ok(sigma(&p))
}

/// Logit Jacobian restricted to the head parameters `(W, b)`:
/// `[r^T (x) I_d | I_d]`, shape `d x (d*m + d)`. Weight columns are ordered
/// column-major over `W`, matching `vec(W)`.
pub fn head_jacobian(r: &DVector<f64>, d: usize) -> DMatrix<f64> {
    let m = r.len();
    let mut j = DMatrix::zeros(d, d * m + d);
    for (block, &rj) in r.iter().enumerate() {
        for i in 0..d {
            j[(i, block * d + i)] = rj;
        }
    }
    for i in 0..d {
        j[(i, d * m + i)] = 1.0;
    }
    j
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub temperature: f64,
    pub snr_squared: f64,
}

/// Evaluates SNR^2 along a temperature grid with logits, Jacobian and direction fixed.
pub fn phase_transition_sweep(
    head: &SoftmaxHead,
    h: &Direction,
    temperatures: &[f64],
) -> Result<Vec<SweepPoint>, TheoryError> {
    if temperatures.is_empty() {
        return Err(TheoryError::EmptyGrid);
    }
    temperatures
        .iter()
        .map(|&t| {
            let at = head.with_temperature(t)?;
            Ok(SweepPoint {
                temperature: t,
                snr_squared: snr_squared(&at, h)?,
            })
        })
        .collect()
}

/// Writes sweep rows as `temperature,snr_squared` CSV with a header line.
pub fn write_sweep_csv<W: Write>(mut out: W, points: &[SweepPoint]) -> std::io::Result<()> {
    writeln!(out, "temperature,snr_squared")?;
    for p in points {
        writeln!(out, "{:e},{:e}", p.temperature, p.snr_squared)?;
    }
    Ok(())
}

/// Geometric temperature grid from `hi` down to `lo`, inclusive.
pub fn descending_grid(hi: f64, lo: f64, points: usize) -> Vec<f64> {
    if points <= 1 {
        return vec![hi];
    }
    let (lh, ll) = (hi.ln(), lo.ln());
    (0..points)
        .map(|i| (lh + (ll - lh) * i as f64 / (points - 1) as f64).exp())
        .collect()
}
