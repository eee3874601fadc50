//! Horizon-anchored evaluation: scores snapshotted a fixed number of hours
//! before each patient's reference time, ROC sweeps, specificity at fixed
//! sensitivity with percentile-bootstrap confidence intervals, calibration
//! curves, the concordance index, score-threshold tables, and the SOFA
//! comparator.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Outcome, PatientTimeline};
use crate::error::{Error, Result};
use crate::util::derive_seed;

pub const DEFAULT_BOOTSTRAP_SAMPLES: usize = 200;

/// Prediction horizons and sensitivity floors evaluated by default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonSpec {
    pub horizons: Vec<u64>,
    pub sens_targets: Vec<f64>,
}

impl Default for HorizonSpec {
    fn default() -> Self {
        HorizonSpec {
            horizons: vec![1, 2, 4, 8, 16, 24, 48, 96, 192],
            sens_targets: vec![0.85, 0.90, 0.95],
        }
    }
}

impl HorizonSpec {
    pub fn validate(&self) -> Result<()> {
        if self.horizons.is_empty() || self.horizons[0] == 0 {
            return Err(Error::validation("horizons must be positive"));
        }
        if self.horizons.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::validation("horizons must be strictly ascending"));
        }
        if self.sens_targets.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::validation("sensitivity targets must lie in [0,1]"));
        }
        Ok(())
    }
}

/// One patient's score and outcome label for a fixed horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub patient_id: String,
    pub score: f64,
    pub label: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HorizonScores {
    pub horizon: u64,
    pub pairs: Vec<ScoredPair>,
    /// Patients whose reference time minus the horizon precedes their entry.
    pub excluded: usize,
}

/// Score every patient `horizon` hours before their reference time: the
/// death time for deaths (label 1), the last observed entry for censored
/// patients (label 0). `score_at` receives the covariate snapshot time.
pub fn horizon_scores(
    timelines: &[PatientTimeline],
    horizon: u64,
    mut score_at: impl FnMut(&PatientTimeline, u64) -> Result<f64>,
) -> Result<HorizonScores> {
    if horizon == 0 {
        return Err(Error::validation("prediction horizon must be positive"));
    }
    let mut pairs = Vec::new();
    let mut excluded = 0;
    for tl in timelines {
        let reference = tl.outcome_time;
        if reference < tl.entry_time + horizon {
            excluded += 1;
            continue;
        }
        let snapshot = reference - horizon;
        let score = score_at(tl, snapshot)?;
        pairs.push(ScoredPair {
            patient_id: tl.patient_id.clone(),
            score,
            label: tl.outcome == Outcome::Death,
        });
    }
    Ok(HorizonScores { horizon, pairs, excluded })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

/// Operating points swept over the distinct scores in descending order;
/// positives are predicted when `score >= threshold`.
pub fn roc_curve(pairs: &[ScoredPair]) -> Result<Vec<RocPoint>> {
    let positives = pairs.iter().filter(|p| p.label).count();
    let negatives = pairs.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::validation("ROC needs both classes present"));
    }
    let mut thresholds: Vec<f64> = pairs.iter().map(|p| p.score).collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();

    let mut sorted = pairs.to_vec();
    sorted.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    let mut points = Vec::with_capacity(thresholds.len());
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut idx = 0;
    for &threshold in &thresholds {
        while idx < sorted.len() && sorted[idx].score >= threshold {
            if sorted[idx].label {
                tp += 1;
            } else {
                fp += 1;
            }
            idx += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / negatives as f64,
            tpr: tp as f64 / positives as f64,
            threshold,
        });
    }
    Ok(points)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub sensitivity: f64,
    pub specificity: f64,
    pub threshold: f64,
}

/// Maximum specificity among operating points with sensitivity at or above
/// the target; specificity is non-increasing along the sweep, so the first
/// qualifying point wins.
pub fn spec_at_sens(roc: &[RocPoint], target: f64) -> Result<OperatingPoint> {
    roc.iter()
        .find(|p| p.tpr >= target)
        .map(|p| OperatingPoint { sensitivity: p.tpr, specificity: 1.0 - p.fpr, threshold: p.threshold })
        .ok_or_else(|| {
            Error::numeric(format!("no operating point reaches sensitivity {target}"))
        })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub low: f64,
    pub high: f64,
    pub resamples: usize,
    /// Single-class resamples that were redrawn.
    pub redrawn: usize,
}

/// Percentile bootstrap over patients: `n` resamples with replacement,
/// 2.5th/97.5th percentiles of the metric. Per-resample seeds derive from
/// the master seed, so the result is deterministic and independent of the
/// parallel schedule. Single-class resamples are redrawn and counted.
pub fn bootstrap_ci(
    pairs: &[ScoredPair],
    metric: impl Fn(&[ScoredPair]) -> Result<f64> + Sync,
    n: usize,
    seed: u64,
) -> Result<BootstrapCi> {
    if pairs.is_empty() {
        return Err(Error::validation("bootstrap needs a non-empty sample"));
    }
    if n == 0 {
        return Err(Error::validation("bootstrap needs at least one resample"));
    }
    let outcomes: Vec<Result<(f64, usize)>> = (0..n)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, k as u64));
            let mut redrawn = 0;
            loop {
                let resample: Vec<ScoredPair> =
                    (0..pairs.len()).map(|_| pairs[rng.random_range(0..pairs.len())].clone()).collect();
                let has_pos = resample.iter().any(|p| p.label);
                let has_neg = resample.iter().any(|p| !p.label);
                if has_pos && has_neg {
                    return metric(&resample).map(|v| (v, redrawn));
                }
                redrawn += 1;
                if redrawn > 10_000 {
                    return Err(Error::numeric(
                        "bootstrap cannot draw a two-class resample; cohort is single-class",
                    ));
                }
            }
        })
        .collect();

    let mut values = Vec::with_capacity(n);
    let mut redrawn = 0;
    for outcome in outcomes {
        let (v, r) = outcome?;
        values.push(v);
        redrawn += r;
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(BootstrapCi {
        low: percentile(&values, 0.025),
        high: percentile(&values, 0.975),
        resamples: n,
        redrawn,
    })
}

/// Linear-interpolation percentile of sorted values.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let position = q * (sorted.len() - 1) as f64;
    let lower = position.floor() as usize;
    let upper = position.ceil() as usize;
    if lower == upper {
        sorted[lower]
    } else {
        let w = position - lower as f64;
        sorted[lower] * (1.0 - w) + sorted[upper] * w
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub mean_predicted: f64,
    pub observed: f64,
    pub count: usize,
}

/// Equal-width calibration bins over predicted probability (`score / 100`);
/// empty bins are omitted.
pub fn calibration_curve(
    scores: &[f64],
    outcomes: &[bool],
    bins: usize,
) -> Result<Vec<CalibrationBin>> {
    if scores.len() != outcomes.len() {
        return Err(Error::validation("scores and outcomes must align"));
    }
    if bins == 0 {
        return Err(Error::validation("calibration needs at least one bin"));
    }
    let mut sums = vec![(0.0f64, 0usize, 0usize); bins]; // (Σp, deaths, count)
    for (&score, &outcome) in scores.iter().zip(outcomes) {
        if !(0.0..=100.0).contains(&score) {
            return Err(Error::numeric(format!("score {score} outside [0,100]")));
        }
        let p = score / 100.0;
        let bin = ((p * bins as f64) as usize).min(bins - 1);
        sums[bin].0 += p;
        sums[bin].1 += outcome as usize;
        sums[bin].2 += 1;
    }
    Ok(sums
        .into_iter()
        .filter(|(_, _, count)| *count > 0)
        .map(|(sum_p, deaths, count)| CalibrationBin {
            mean_predicted: sum_p / count as f64,
            observed: deaths as f64 / count as f64,
            count,
        })
        .collect())
}

/// Concordance over comparable pairs: an earlier death against any patient
/// observed strictly longer; score ties count one half.
pub fn concordance_index(triples: &[(f64, bool, f64)]) -> Result<f64> {
    let mut comparable = 0.0;
    let mut concordant = 0.0;
    for (i, &(t_i, event_i, s_i)) in triples.iter().enumerate() {
        if !event_i {
            continue;
        }
        for (j, &(t_j, _, s_j)) in triples.iter().enumerate() {
            if i == j || t_j <= t_i {
                continue;
            }
            comparable += 1.0;
            if s_i > s_j {
                concordant += 1.0;
            } else if s_i == s_j {
                concordant += 0.5;
            }
        }
    }
    if comparable == 0.0 {
        return Err(Error::validation("no comparable pairs for the concordance index"));
    }
    Ok(concordant / comparable)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCell {
    pub specificity: f64,
    pub threshold: f64,
}

/// Score thresholds maximizing specificity at each sensitivity floor and
/// horizon; `None` where a horizon kept too few patients to sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTable {
    pub horizons: Vec<u64>,
    pub targets: Vec<f64>,
    /// Row per target, column per horizon.
    pub cells: Vec<Vec<Option<ThresholdCell>>>,
}

pub fn threshold_table(per_horizon: &[HorizonScores], targets: &[f64]) -> ThresholdTable {
    let horizons: Vec<u64> = per_horizon.iter().map(|h| h.horizon).collect();
    let rocs: Vec<Option<Vec<RocPoint>>> =
        per_horizon.iter().map(|h| roc_curve(&h.pairs).ok()).collect();
    let cells = targets
        .iter()
        .map(|&target| {
            rocs.iter()
                .map(|roc| {
                    roc.as_ref().and_then(|points| {
                        spec_at_sens(points, target).ok().map(|op| ThresholdCell {
                            specificity: op.specificity,
                            threshold: op.threshold,
                        })
                    })
                })
                .collect()
        })
        .collect();
    ThresholdTable { horizons, targets: targets.to_vec(), cells }
}

/// Observations feeding the SOFA comparator. Blood pressures substitute for
/// a missing mean arterial pressure.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SofaInputs {
    pub pao2_mmhg: Option<f64>,
    pub intubated: bool,
    pub platelets_k_per_ul: Option<f64>,
    pub bilirubin_mg_dl: Option<f64>,
    pub map_mmhg: Option<f64>,
    pub systolic_mmhg: Option<f64>,
    pub diastolic_mmhg: Option<f64>,
    pub creatinine_mg_dl: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SofaScore {
    pub total: u8,
    pub respiratory: u8,
    pub coagulation: u8,
    pub liver: u8,
    pub cardiovascular: u8,
    pub renal: u8,
    /// False when every input was missing; the score is then 0 by default.
    pub any_observed: bool,
}

/// Five-component SOFA under fixed FiO₂ assumptions: 21% unventilated, 71%
/// intubated. The neurological component is always 0 (no GCS data) and the
/// cardiovascular component is capped at 1 (no vasopressor dosing), so the
/// reported range is 0..=20 rather than the full 0..=24.
pub fn sofa_score(inputs: &SofaInputs) -> SofaScore {
    let fio2 = if inputs.intubated { 0.71 } else { 0.21 };
    let respiratory = match inputs.pao2_mmhg {
        None => 0,
        Some(pao2) => {
            let ratio = pao2 / fio2;
            if ratio < 100.0 && inputs.intubated {
                4
            } else if ratio < 200.0 && inputs.intubated {
                3
            } else if ratio < 300.0 {
                2
            } else if ratio < 400.0 {
                1
            } else {
                0
            }
        }
    };
    let coagulation = match inputs.platelets_k_per_ul {
        None => 0,
        Some(plt) if plt < 20.0 => 4,
        Some(plt) if plt < 50.0 => 3,
        Some(plt) if plt < 100.0 => 2,
        Some(plt) if plt < 150.0 => 1,
        Some(_) => 0,
    };
    let liver = match inputs.bilirubin_mg_dl {
        None => 0,
        Some(b) if b >= 12.0 => 4,
        Some(b) if b >= 6.0 => 3,
        Some(b) if b >= 2.0 => 2,
        Some(b) if b >= 1.2 => 1,
        Some(_) => 0,
    };
    let map = inputs.map_mmhg.or_else(|| match (inputs.systolic_mmhg, inputs.diastolic_mmhg) {
        (Some(sbp), Some(dbp)) => Some((sbp + 2.0 * dbp) / 3.0),
        _ => None,
    });
    let cardiovascular = match map {
        Some(m) if m < 70.0 => 1,
        _ => 0,
    };
    let renal = match inputs.creatinine_mg_dl {
        None => 0,
        Some(c) if c >= 5.0 => 4,
        Some(c) if c >= 3.5 => 3,
        Some(c) if c >= 2.0 => 2,
        Some(c) if c >= 1.2 => 1,
        Some(_) => 0,
    };
    let any_observed = inputs.pao2_mmhg.is_some()
        || inputs.platelets_k_per_ul.is_some()
        || inputs.bilirubin_mg_dl.is_some()
        || map.is_some()
        || inputs.creatinine_mg_dl.is_some();
    SofaScore {
        total: respiratory + coagulation + liver + cardiovascular + renal,
        respiratory,
        coagulation,
        liver,
        cardiovascular,
        renal,
        any_observed,
    }
}

/// Per-target result at one horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetReport {
    pub target: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub threshold: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonReport {
    pub horizon: u64,
    pub n_pairs: usize,
    pub n_positive: usize,
    pub excluded: usize,
    pub targets: Vec<TargetReport>,
    pub roc: Vec<RocPoint>,
}

/// The full evaluation artifact serialized as `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub horizons: Vec<HorizonReport>,
    pub calibration: Vec<CalibrationBin>,
    pub concordance: Option<f64>,
    pub threshold_table: ThresholdTable,
    pub bootstrap_samples: usize,
}
