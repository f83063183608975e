//! Recency weighting of a retrieved batch.
//!
//! For ages `x_i` in minutes:
//!
//! ```text
//! x_norm_i = (x_i - min x) / (max x - min x)      (0 for every item when max = min)
//! w_i      = exp(-a * x_norm_i)
//! w~_i     = w_i / sum_j w_j                       (sums to 1)
//! ```
//!
//! Ages are normalized within the batch being weighted, so only relative
//! recency matters: shifting every age by a constant leaves the weights
//! unchanged.

use serde::{Deserialize, Serialize};

use crate::time::{minutes_between, Timestamp};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DecayError {
    #[error("cannot weight an empty batch")]
    Empty,

    #[error("value {0} is not finite")]
    NonFinite(f64),

    #[error("age {0} is negative")]
    NegativeAge(f64),

    #[error("normalized age {0} is outside [0, 1]")]
    OutOfRange(f64),

    #[error("decay rate must be positive, got {0}")]
    InvalidRate(f64),

    #[error("raw weight {0} must be positive")]
    NonPositiveWeight(f64),

    #[error("item created at {created_at} is after the weighting time {now}")]
    FromTheFuture { created_at: Timestamp, now: Timestamp },
}

fn check_finite(values: &[f64]) -> Result<(), DecayError> {
    match values.iter().find(|v| !v.is_finite()) {
        Some(v) => Err(DecayError::NonFinite(*v)),
        None => Ok(()),
    }
}

/// Min-max normalize ages into `[0, 1]`. All-equal ages map to 0.
pub fn normalize_ages(ages: &[f64]) -> Result<Vec<f64>, DecayError> {
    if ages.is_empty() {
        return Err(DecayError::Empty);
    }
    check_finite(ages)?;
    if let Some(neg) = ages.iter().find(|a| **a < 0.0) {
        return Err(DecayError::NegativeAge(*neg));
    }
    let min = ages.iter().copied().fold(f64::INFINITY, f64::min);
    let max = ages.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return Ok(vec![0.0; ages.len()]);
    }
    let span = max - min;
    Ok(ages.iter().map(|a| (a - min) / span).collect())
}

/// `exp(-a * x)` for each normalized age.
pub fn raw_weights(normalized_ages: &[f64], rate: f64) -> Result<Vec<f64>, DecayError> {
    if !(rate.is_finite() && rate > 0.0) {
        return Err(DecayError::InvalidRate(rate));
    }
    check_finite(normalized_ages)?;
    if let Some(x) = normalized_ages.iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(DecayError::OutOfRange(*x));
    }
    Ok(normalized_ages.iter().map(|x| (-rate * x).exp()).collect())
}

/// Scale positive weights to sum to one.
pub fn normalize_weights(raw: &[f64]) -> Result<Vec<f64>, DecayError> {
    if raw.is_empty() {
        return Err(DecayError::Empty);
    }
    check_finite(raw)?;
    if let Some(w) = raw.iter().find(|w| **w <= 0.0) {
        return Err(DecayError::NonPositiveWeight(*w));
    }
    let total: f64 = raw.iter().sum();
    Ok(raw.iter().map(|w| w / total).collect())
}

/// An item with its recency weight attached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Weighted<T> {
    pub item: T,
    pub age_minutes: f64,
    pub normalized_age: f64,
    pub raw_weight: f64,
    pub weight: f64,
}

fn ages(created: &[Timestamp], now: &Timestamp) -> Result<Vec<f64>, DecayError> {
    created
        .iter()
        .map(|c| {
            if c > now {
                Err(DecayError::FromTheFuture { created_at: *c, now: *now })
            } else {
                Ok(minutes_between(c, now))
            }
        })
        .collect()
}

/// Weight a batch by recency at time `now` with decay rate `rate`.
pub fn weigh<T>(
    batch: Vec<(T, Timestamp)>,
    now: Timestamp,
    rate: f64,
) -> Result<Vec<Weighted<T>>, DecayError> {
    if batch.is_empty() {
        return Err(DecayError::Empty);
    }
    let created: Vec<Timestamp> = batch.iter().map(|(_, c)| *c).collect();
    let ages = ages(&created, &now)?;
    let normalized = normalize_ages(&ages)?;
    let raw = raw_weights(&normalized, rate)?;
    let weights = normalize_weights(&raw)?;
    Ok(batch
        .into_iter()
        .enumerate()
        .map(|(i, (item, _))| Weighted {
            item,
            age_minutes: ages[i],
            normalized_age: normalized[i],
            raw_weight: raw[i],
            weight: weights[i],
        })
        .collect())
}

/// Equal weights `1/N`; the no-decay ablation.
pub fn weigh_uniform<T>(
    batch: Vec<(T, Timestamp)>,
    now: Timestamp,
) -> Result<Vec<Weighted<T>>, DecayError> {
    if batch.is_empty() {
        return Err(DecayError::Empty);
    }
    let created: Vec<Timestamp> = batch.iter().map(|(_, c)| *c).collect();
    let ages = ages(&created, &now)?;
    let normalized = normalize_ages(&ages)?;
    let n = batch.len() as f64;
    Ok(batch
        .into_iter()
        .enumerate()
        .map(|(i, (item, _))| Weighted {
            item,
            age_minutes: ages[i],
            normalized_age: normalized[i],
            raw_weight: 1.0,
            weight: 1.0 / n,
        })
        .collect())
}
