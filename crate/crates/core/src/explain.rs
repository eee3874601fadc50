//! Integrated-gradients attribution: signed per-feature importances for a
//! log-hazard value relative to a baseline state, normalized so absolute
//! contributions sum to 100%, plus attribution timelines evaluated at every
//! covariate change.

use serde::{Deserialize, Serialize};

use crate::data::PatientTimeline;
use crate::error::{Error, Result};
use crate::estimators::PercentileReference;
use crate::model::Exponent;
use crate::preprocess::Preprocessor;

pub const DEFAULT_IG_STEPS: usize = 50;

/// Raw and normalized attributions for one explained state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub raw: Vec<f64>,
    /// Signed percentages in (-100, 100); absolute values sum to 100 unless
    /// every raw attribution is zero.
    pub normalized: Vec<f64>,
    pub steps: usize,
}

/// Right-endpoint Riemann approximation of the path integral
/// `a_i = (x_i - x̄_i) · (1/steps) · Σ_k ∂φ/∂x_i (x̄ + (k/steps)(x - x̄))`,
/// in eval mode.
pub fn integrated_gradients(
    model: &Exponent,
    x: &[f64],
    baseline: &[f64],
    steps: usize,
) -> Result<Vec<f64>> {
    if x.len() != baseline.len() || x.len() != model.input_dim() {
        return Err(Error::numeric(format!(
            "attribution dimensions disagree: x {}, baseline {}, model {}",
            x.len(),
            baseline.len(),
            model.input_dim()
        )));
    }
    if steps == 0 {
        return Err(Error::validation("integrated gradients needs at least one step"));
    }
    let d = x.len();
    let mut grad_sum = vec![0.0; d];
    let mut point = vec![0.0; d];
    for k in 1..=steps {
        let alpha = k as f64 / steps as f64;
        for i in 0..d {
            point[i] = baseline[i] + alpha * (x[i] - baseline[i]);
        }
        let grad = model.grad_x(&point)?;
        for i in 0..d {
            grad_sum[i] += grad[i];
        }
    }
    Ok((0..d).map(|i| (x[i] - baseline[i]) * grad_sum[i] / steps as f64).collect())
}

/// `â_i = 100 · a_i / Σ|a_j|`; an all-zero input stays all-zero instead of
/// dividing by zero.
pub fn normalize_attributions(raw: &[f64]) -> Vec<f64> {
    let total: f64 = raw.iter().map(|a| a.abs()).sum();
    if total == 0.0 {
        return vec![0.0; raw.len()];
    }
    raw.iter().map(|a| 100.0 * a / total).collect()
}

pub fn attribute(
    model: &Exponent,
    x: &[f64],
    baseline: &[f64],
    steps: usize,
) -> Result<Attribution> {
    let raw = integrated_gradients(model, x, baseline, steps)?;
    let normalized = normalize_attributions(&raw);
    Ok(Attribution { raw, normalized, steps })
}

/// Attribution plus score at one covariate-change time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionPoint {
    pub time: u64,
    pub attribution: Attribution,
    pub phi: f64,
    pub score: f64,
}

/// One attribution and score per covariate-change point of a preprocessed
/// timeline, in time order.
pub fn attribution_timeline(
    model: &Exponent,
    preprocessor: &Preprocessor,
    timeline: &PatientTimeline,
    reference: &PercentileReference,
    baseline: &[f64],
    steps: usize,
) -> Result<Vec<AttributionPoint>> {
    let change_times = timeline.change_times();
    if change_times.is_empty() {
        return Err(Error::validation(format!(
            "patient `{}` has no covariate records to explain",
            timeline.patient_id
        )));
    }
    let mut points = Vec::with_capacity(change_times.len());
    for t in change_times {
        let state = timeline.state_at(t, &preprocessor.schema);
        let x = preprocessor.apply_state(&state);
        let attribution = attribute(model, &x, baseline, steps)?;
        let phi = model.value(&x);
        points.push(AttributionPoint { time: t, attribution, phi, score: reference.score(phi) });
    }
    Ok(points)
}
