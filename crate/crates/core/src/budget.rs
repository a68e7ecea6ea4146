//! Query-budget planner for border-input discovery.
//!
//! Each candidate is sampled until two outputs differ or `m` samples have
//! been spent. With a fraction `f_B` of candidates being fair two-token border
//! inputs and the rest deterministic, the expected cost per discovered border
//! input is `L(m) = E[S_m] / P(success | m)`. The closed forms are exact only
//! for that fair two-token model; [`simulate_cost_per_bi`] handles other
//! support sizes by simulation.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BudgetError {
    #[error("stopping limit m must be at least 2, got {0}")]
    LimitTooSmall(u32),
    #[error("border-input fraction must lie in (0, 1], got {0}")]
    InvalidFraction(f64),
    #[error("border-input support size must be at least 2, got {0}")]
    SupportTooSmall(u32),
    #[error("no border input was found in the simulated stream")]
    NoneFound,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetModel {
    pub f_b: f64,
    pub m_max: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetRow {
    pub m: u32,
    pub expected_samples: f64,
    pub success_probability: f64,
    pub cost_per_bi: f64,
}

impl BudgetModel {
    pub fn new(f_b: f64, m_max: u32) -> Result<Self, BudgetError> {
        check_fraction(f_b)?;
        if m_max < 2 {
            return Err(BudgetError::LimitTooSmall(m_max));
        }
        Ok(Self { f_b, m_max })
    }

    pub fn table(&self) -> Vec<BudgetRow> {
        (2..=self.m_max)
            .map(|m| BudgetRow {
                m,
                expected_samples: expected_samples(m, self.f_b).expect("validated"),
                success_probability: success_probability(m, self.f_b).expect("validated"),
                cost_per_bi: cost_per_bi(m, self.f_b).expect("validated"),
            })
            .collect()
    }

    pub fn optimal_m(&self) -> u32 {
        optimal_m(self.f_b, self.m_max).expect("validated")
    }
}

fn check_limit(m: u32) -> Result<(), BudgetError> {
    if m < 2 {
        Err(BudgetError::LimitTooSmall(m))
    } else {
        Ok(())
    }
}

fn check_fraction(f_b: f64) -> Result<(), BudgetError> {
    if f_b > 0.0 && f_b <= 1.0 {
        Ok(())
    } else {
        Err(BudgetError::InvalidFraction(f_b))
    }
}

fn half_pow(e: u32) -> f64 {
    0.5f64.powi(e as i32)
}

/// `E[S_m] = (1 - f_B) m + f_B (3 - (1/2)^(m-2))`.
pub fn expected_samples(m: u32, f_b: f64) -> Result<f64, BudgetError> {
    check_limit(m)?;
    if !(0.0..=1.0).contains(&f_b) {
        return Err(BudgetError::InvalidFraction(f_b));
    }
    Ok((1.0 - f_b) * m as f64 + f_b * (3.0 - half_pow(m - 2)))
}

/// `P(success | m) = f_B (1 - (1/2)^(m-1))`.
pub fn success_probability(m: u32, f_b: f64) -> Result<f64, BudgetError> {
    check_limit(m)?;
    if !(0.0..=1.0).contains(&f_b) {
        return Err(BudgetError::InvalidFraction(f_b));
    }
    Ok(f_b * (1.0 - half_pow(m - 1)))
}

/// Expected requests per discovered border input.
pub fn cost_per_bi(m: u32, f_b: f64) -> Result<f64, BudgetError> {
    check_fraction(f_b)?;
    Ok(expected_samples(m, f_b)? / success_probability(m, f_b)?)
}

/// Cheapest stopping limit in `2..=m_max`; ties go to the smaller `m`.
pub fn optimal_m(f_b: f64, m_max: u32) -> Result<u32, BudgetError> {
    check_fraction(f_b)?;
    check_limit(m_max)?;
    let mut best = (2, cost_per_bi(2, f_b)?);
    for m in 3..=m_max {
        let c = cost_per_bi(m, f_b)?;
        // relative slack so rounding at an exact crossover keeps the smaller m
        if c < best.1 * (1.0 - 1e-12) {
            best = (m, c);
        }
    }
    Ok(best.0)
}

/// Outcome of a simulated discovery stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulatedCost {
    pub candidates: u64,
    pub requests: u64,
    pub found: u64,
}

impl SimulatedCost {
    pub fn cost_per_bi(&self) -> f64 {
        self.requests as f64 / self.found as f64
    }
}

/// Discrete-event simulation of the stop-at-`m` discovery rule over
/// `candidates` candidates, where a fraction `f_b` are border inputs with a
/// uniform output over `k` tokens and the rest always return one token.
pub fn simulate_cost_per_bi<R: Rng + ?Sized>(
    m: u32,
    f_b: f64,
    k: u32,
    candidates: u64,
    rng: &mut R,
) -> Result<SimulatedCost, BudgetError> {
    check_limit(m)?;
    check_fraction(f_b)?;
    if k < 2 {
        return Err(BudgetError::SupportTooSmall(k));
    }
    let mut requests = 0u64;
    let mut found = 0u64;
    for _ in 0..candidates {
        let is_border = rng.random_bool(f_b);
        if !is_border {
            requests += u64::from(m);
            continue;
        }
        let first = rng.random_range(0..k);
        let mut drawn = 1u32;
        let mut varied = false;
        while drawn < m {
            drawn += 1;
            if rng.random_range(0..k) != first {
                varied = true;
                break;
            }
        }
        requests += u64::from(drawn);
        if varied {
            found += 1;
        }
    }
    if found == 0 {
        return Err(BudgetError::NoneFound);
    }
    Ok(SimulatedCost {
        candidates,
        requests,
        found,
    })
}
