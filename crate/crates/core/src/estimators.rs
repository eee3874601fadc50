//! Survival calculus and the scoring layer: Kaplan–Meier, the Breslow
//! baseline cumulative hazard, hazard/survival conversions, the fixed-horizon
//! risk value, the percentile transform behind the 0..100 score, and
//! time-varying stratified survival curves.

use serde::{Deserialize, Serialize};

use crate::data::{DesignMatrix, EventGroup};
use crate::error::{Error, Result};
use crate::model::Exponent;

/// Horizon at which the raw risk value is evaluated, in hours.
pub const RISK_HORIZON_HOURS: u64 = 128;

/// Right-continuous piecewise-constant function with strictly increasing
/// knot times; `left` is the value before the first knot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepFunction {
    pub left: f64,
    pub knots: Vec<(u64, f64)>,
}

impl StepFunction {
    pub fn new(left: f64, knots: Vec<(u64, f64)>) -> Result<StepFunction> {
        if knots.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::numeric("step function knots must be strictly increasing in time"));
        }
        Ok(StepFunction { left, knots })
    }

    pub fn eval(&self, t: u64) -> f64 {
        match self.knots.partition_point(|&(kt, _)| kt <= t) {
            0 => self.left,
            idx => self.knots[idx - 1].1,
        }
    }

    pub fn is_non_decreasing(&self) -> bool {
        let mut prev = self.left;
        for &(_, v) in &self.knots {
            if v < prev {
                return false;
            }
            prev = v;
        }
        true
    }

    pub fn is_non_increasing(&self) -> bool {
        let mut prev = self.left;
        for &(_, v) in &self.knots {
            if v > prev {
                return false;
            }
            prev = v;
        }
        true
    }
}

/// Kaplan–Meier product-limit estimator from death and censoring times.
/// At-risk counts use the `(·,·]` convention: a patient censored at `t` is
/// still at risk at `t`.
pub fn kaplan_meier(event_times: &[u64], censor_times: &[u64]) -> Result<StepFunction> {
    if event_times.is_empty() && censor_times.is_empty() {
        return Err(Error::validation("kaplan_meier requires at least one observation"));
    }
    let mut death_times: Vec<u64> = event_times.to_vec();
    death_times.sort_unstable();
    death_times.dedup();

    let mut survival = 1.0;
    let mut knots = Vec::with_capacity(death_times.len());
    for &t in &death_times {
        let deaths = event_times.iter().filter(|&&e| e == t).count();
        let at_risk = event_times.iter().filter(|&&e| e >= t).count()
            + censor_times.iter().filter(|&&c| c >= t).count();
        survival *= 1.0 - deaths as f64 / at_risk as f64;
        knots.push((t, survival));
    }
    StepFunction::new(1.0, knots)
}

/// Discrete-time survival from per-period hazards: `S(t) = Π_{s≤t} (1-h_s)`.
pub fn discrete_survival(hazards: &[f64]) -> Result<Vec<f64>> {
    let mut survival = Vec::with_capacity(hazards.len());
    let mut acc = 1.0;
    for &h in hazards {
        if !(0.0..=1.0).contains(&h) {
            return Err(Error::numeric(format!("discrete hazard {h} outside [0,1]")));
        }
        acc *= 1.0 - h;
        survival.push(acc);
    }
    Ok(survival)
}

/// Breslow estimator of the cumulative baseline hazard:
/// `Ĥ₀(t) = Σ_{t_i ≤ t} |D_i| / Σ_{j∈R(t_i)} exp(φ_j)`.
pub fn breslow_baseline(
    model: &Exponent,
    matrix: &DesignMatrix,
    groups: &[EventGroup],
) -> Result<StepFunction> {
    let phi: Vec<f64> = (0..matrix.n_rows()).map(|r| model.value(matrix.row(r))).collect();
    breslow_baseline_from_phi(&phi, groups)
}

pub fn breslow_baseline_from_phi(phi: &[f64], groups: &[EventGroup]) -> Result<StepFunction> {
    if groups.is_empty() {
        return Err(Error::numeric("breslow baseline requires at least one event group"));
    }
    let mut acc = 0.0;
    let mut knots = Vec::with_capacity(groups.len());
    for g in groups {
        let denom: f64 = g.risk.iter().map(|&j| phi[j].exp()).sum();
        acc += g.deaths.len() as f64 / denom;
        knots.push((g.time, acc));
    }
    StepFunction::new(0.0, knots)
}

/// `S(t) = exp(-H(t))` from a non-decreasing cumulative hazard.
pub fn survival_from_cumhazard(cumhazard: &StepFunction) -> Result<StepFunction> {
    if !cumhazard.is_non_decreasing() {
        return Err(Error::numeric("cumulative hazard must be non-decreasing"));
    }
    StepFunction::new(
        (-cumhazard.left).exp(),
        cumhazard.knots.iter().map(|&(t, v)| (t, (-v).exp())).collect(),
    )
}

/// Raw risk value at the fixed horizon under constant covariates:
/// `Ĥ₀(horizon) · exp(φ(x))`. Strictly increasing in φ, so ranking by the
/// risk value equals ranking by the log-hazard.
pub fn risk_at_horizon(
    model: &Exponent,
    x: &[f64],
    baseline: &StepFunction,
    horizon: u64,
) -> f64 {
    baseline.eval(horizon) * model.value(x).exp()
}

/// Sorted reference log-hazards from the validation cohort; the percentile
/// transform maps a log-hazard to the share of reference states strictly
/// below it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PercentileReference {
    values: Vec<f64>,
}

impl PercentileReference {
    pub fn fit(mut values: Vec<f64>) -> Result<PercentileReference> {
        if values.is_empty() {
            return Err(Error::validation("percentile reference requires at least one value"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("percentile reference contains non-finite values"));
        }
        if values.len() < 100 {
            log::warn!(
                "percentile reference has only {} states; scores will be coarse",
                values.len()
            );
        }
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Ok(PercentileReference { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Score in [0,100]: percentage of reference states with a strictly
    /// lower log-hazard. Ties with reference values do not count.
    pub fn score(&self, phi: f64) -> f64 {
        let below = self.values.partition_point(|&v| v < phi);
        100.0 * below as f64 / self.values.len() as f64
    }
}

/// Percentile cut points producing the five risk strata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrataDefinition {
    pub cuts: Vec<f64>,
}

impl Default for StrataDefinition {
    fn default() -> Self {
        StrataDefinition { cuts: vec![60.0, 70.0, 80.0, 90.0] }
    }
}

impl StrataDefinition {
    pub fn validate(&self) -> Result<()> {
        if self.cuts.windows(2).any(|w| w[0] >= w[1])
            || self.cuts.iter().any(|c| *c <= 0.0 || *c >= 100.0)
        {
            return Err(Error::validation("strata cuts must be strictly increasing within (0,100)"));
        }
        Ok(())
    }

    pub fn n_strata(&self) -> usize {
        self.cuts.len() + 1
    }
}

/// Stratum for a score: `[0,60) → 0, [60,70) → 1, ..., [90,100] → 4` under
/// the default cuts.
pub fn assign_stratum(score: f64, def: &StrataDefinition) -> Result<usize> {
    if !(0.0..=100.0).contains(&score) {
        return Err(Error::numeric(format!("score {score} outside [0,100]")));
    }
    Ok(def.cuts.partition_point(|&c| c <= score))
}

/// One patient's score trajectory: `steps[(time, score)]` where the score
/// set at a change time governs the half-open interval up to the next
/// change. The score in force at time `t` is the last step strictly before
/// `t`, matching the risk-set convention.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredTimeline {
    pub patient_id: String,
    pub entry_time: u64,
    pub outcome_time: u64,
    pub death: bool,
    pub steps: Vec<(u64, f64)>,
}

impl ScoredTimeline {
    fn score_in_force(&self, t: u64) -> f64 {
        match self.steps.partition_point(|&(st, _)| st < t) {
            0 => self.steps.first().map_or(0.0, |&(_, s)| s),
            idx => self.steps[idx - 1].1,
        }
    }

    fn at_risk(&self, t: u64) -> bool {
        self.entry_time < t && t <= self.outcome_time
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumPoint {
    pub time: u64,
    pub at_risk: usize,
    pub cum_deaths: usize,
    pub survival: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumCurve {
    pub stratum: usize,
    pub points: Vec<StratumPoint>,
}

/// Kaplan–Meier-style survival per score stratum with time-varying
/// membership: at each death time the death is attributed to the dying
/// patient's stratum at that time, and at-risk counts partition the cohort
/// across strata.
pub fn stratified_survival_curves(
    scored: &[ScoredTimeline],
    def: &StrataDefinition,
) -> Result<Vec<StratumCurve>> {
    def.validate()?;
    let mut death_times: Vec<u64> =
        scored.iter().filter(|s| s.death).map(|s| s.outcome_time).collect();
    death_times.sort_unstable();
    death_times.dedup();

    let n_strata = def.n_strata();
    let mut curves: Vec<StratumCurve> = (0..n_strata)
        .map(|stratum| StratumCurve { stratum, points: Vec::with_capacity(death_times.len()) })
        .collect();
    let mut survival = vec![1.0; n_strata];
    let mut cum_deaths = vec![0usize; n_strata];

    for &t in &death_times {
        let mut at_risk = vec![0usize; n_strata];
        let mut deaths = vec![0usize; n_strata];
        for tl in scored {
            if tl.at_risk(t) {
                let stratum = assign_stratum(tl.score_in_force(t), def)?;
                at_risk[stratum] += 1;
                if tl.death && tl.outcome_time == t {
                    deaths[stratum] += 1;
                }
            }
        }
        for s in 0..n_strata {
            if deaths[s] > 0 {
                debug_assert!(at_risk[s] >= deaths[s], "dying patients are at risk by construction");
                survival[s] *= 1.0 - deaths[s] as f64 / at_risk[s] as f64;
                cum_deaths[s] += deaths[s];
            }
            curves[s].points.push(StratumPoint {
                time: t,
                at_risk: at_risk[s],
                cum_deaths: cum_deaths[s],
                survival: survival[s],
            });
        }
    }
    Ok(curves)
}
