//! Time-varying survival data model: patient timelines in hourly resolution,
//! their counting-process expansion, event-time risk sets, and the
//! stratified train/validation/test split.
//!
//! Risk sets use half-open `(start, stop]` intervals so a patient dying at
//! `t` is at risk at `t`. Censored patients contribute to risk sets only.

use std::collections::{BTreeMap, HashMap};
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::schema::{FeatureKind, FeatureSchema, RawValue};

pub const DEATH_FIELD: &str = "__death__";
pub const CENSOR_FIELD: &str = "__censor__";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Death,
    Censored,
}

/// One observed covariate value: `feature` indexes into the schema.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateRecord {
    pub time: u64,
    pub feature: usize,
    pub value: RawValue,
}

/// One patient's observation history in hours.
///
/// Invariants: records sorted non-decreasing in time and contained in
/// `[entry_time, outcome_time]`; for censored patients `outcome_time` is the
/// last observed record time.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientTimeline {
    pub patient_id: String,
    pub entry_time: u64,
    pub records: Vec<CovariateRecord>,
    pub outcome_time: u64,
    pub outcome: Outcome,
}

impl PatientTimeline {
    pub fn validate(&self, schema: &FeatureSchema) -> Result<()> {
        if self.outcome_time < self.entry_time {
            return Err(Error::validation(format!(
                "patient `{}`: outcome_time {} before entry_time {}",
                self.patient_id, self.outcome_time, self.entry_time
            )));
        }
        let mut prev = self.entry_time;
        for r in &self.records {
            if r.time < prev {
                return Err(Error::validation(format!(
                    "patient `{}`: records not sorted at t={}",
                    self.patient_id, r.time
                )));
            }
            if r.time > self.outcome_time {
                return Err(Error::validation(format!(
                    "patient `{}`: record at t={} after outcome_time {}",
                    self.patient_id, r.time, self.outcome_time
                )));
            }
            if r.feature >= schema.features.len() {
                return Err(Error::schema(format!(
                    "patient `{}`: record references feature index {} outside schema",
                    self.patient_id, r.feature
                )));
            }
            prev = r.time;
        }
        Ok(())
    }

    /// Most recent observed value of every feature at time `t` (LOCF).
    /// Features never observed up to `t` stay `None`.
    pub fn state_at(&self, t: u64, schema: &FeatureSchema) -> Vec<Option<RawValue>> {
        let mut state = vec![None; schema.features.len()];
        for r in &self.records {
            if r.time > t {
                break;
            }
            state[r.feature] = Some(r.value.clone());
        }
        state
    }

    /// Distinct record times, ascending. Where covariates change and where
    /// score/attribution trajectories get a new step.
    pub fn change_times(&self) -> Vec<u64> {
        let mut times: Vec<u64> = self.records.iter().map(|r| r.time).collect();
        times.dedup();
        times
    }
}

/// One counting-process interval `(start, stop]` with the covariate state in
/// effect over it. The event flag is set only on the final interval of a
/// death timeline.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpandedRow {
    pub patient_id: String,
    pub start: u64,
    pub stop: u64,
    pub state: Vec<Option<RawValue>>,
    pub event: bool,
}

/// One distinct death time with its tied-death set and risk set, as row
/// indices into the `ExpandedRow` slice the group was built from. Each
/// patient contributes at most one row per group, so the indices identify
/// both patients and their covariates at the event time.
#[derive(Debug, Clone, PartialEq)]
pub struct EventGroup {
    pub time: u64,
    pub deaths: Vec<usize>,
    pub risk: Vec<usize>,
}

/// Dense row-major design matrix of encoded covariate rows, aligned by index
/// with the expanded rows that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub width: usize,
    pub data: Vec<f64>,
}

impl DesignMatrix {
    pub fn new(width: usize) -> Self {
        DesignMatrix { width, data: Vec::new() }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let width = rows.first().map_or(0, Vec::len);
        let mut m = DesignMatrix::new(width);
        for r in rows {
            m.push_row(r);
        }
        m
    }

    pub fn push_row(&mut self, row: &[f64]) {
        debug_assert_eq!(row.len(), self.width);
        self.data.extend_from_slice(row);
    }

    pub fn n_rows(&self) -> usize {
        if self.width == 0 {
            0
        } else {
            self.data.len() / self.width
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.width..(i + 1) * self.width]
    }
}

/// Parse the long-format CSV (`patient_id,time_hours,field,value`) into one
/// timeline per patient, in order of first appearance.
///
/// Sub-hour timestamps are floored to whole hours. Each patient must carry
/// exactly one outcome row (`__death__` or `__censor__`, empty value); for
/// censored patients the outcome time is the last observed record time.
pub fn load_dataset(path: &Path, schema: &FeatureSchema) -> Result<Vec<PatientTimeline>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::io(format!("cannot open {}: {e}", path.display())))?;
    read_dataset(file, schema)
}

struct RawPatient {
    order: usize,
    records: Vec<CovariateRecord>,
    outcome: Option<(u64, Outcome, u64)>, // (time, kind, line)
}

pub fn read_dataset<R: Read>(reader: R, schema: &FeatureSchema) -> Result<Vec<PatientTimeline>> {
    let mut csv_reader = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    {
        let headers = csv_reader
            .headers()
            .map_err(|e| Error::Parse { line: 1, message: e.to_string() })?;
        let expected = ["patient_id", "time_hours", "field", "value"];
        if headers.len() != 4 || headers.iter().zip(expected).any(|(h, e)| h != e) {
            return Err(Error::Parse {
                line: 1,
                message: format!(
                    "expected header `patient_id,time_hours,field,value`, got `{}`",
                    headers.iter().collect::<Vec<_>>().join(",")
                ),
            });
        }
    }

    let mut patients: HashMap<String, RawPatient> = HashMap::new();
    let mut order = Vec::new();

    for record in csv_reader.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != 4 {
            return Err(Error::Parse { line, message: format!("expected 4 columns, got {}", record.len()) });
        }
        let patient_id = record[0].to_string();
        if patient_id.is_empty() {
            return Err(Error::Parse { line, message: "empty patient_id".to_string() });
        }
        let time_raw: f64 = record[1]
            .trim()
            .parse()
            .map_err(|_| Error::Parse { line, message: format!("bad time_hours `{}`", &record[1]) })?;
        if !time_raw.is_finite() || time_raw < 0.0 {
            return Err(Error::Parse { line, message: format!("time_hours must be finite and non-negative, got `{}`", &record[1]) });
        }
        let time = time_raw.floor() as u64;
        let field = record[2].trim().to_string();
        let value = record[3].to_string();

        let next_order = order.len();
        let entry = patients.entry(patient_id.clone()).or_insert_with(|| {
            order.push(patient_id.clone());
            RawPatient { order: next_order, records: Vec::new(), outcome: None }
        });
        let _ = entry.order;

        if field == DEATH_FIELD || field == CENSOR_FIELD {
            if !value.is_empty() {
                return Err(Error::Parse { line, message: format!("outcome row must have empty value, got `{value}`") });
            }
            if entry.outcome.is_some() {
                return Err(Error::validation(format!("patient `{patient_id}` has more than one outcome row")));
            }
            let kind = if field == DEATH_FIELD { Outcome::Death } else { Outcome::Censored };
            entry.outcome = Some((time, kind, line));
        } else {
            let feature = schema
                .index_of(&field)
                .ok_or_else(|| Error::schema(format!("line {line}: unknown covariate `{field}`")))?;
            let parsed = RawValue::parse(&value, &schema.features[feature])?;
            entry.records.push(CovariateRecord { time, feature, value: parsed });
        }
    }

    let mut timelines = Vec::with_capacity(order.len());
    for patient_id in order {
        let raw = patients.remove(&patient_id).expect("patient recorded");
        let (outcome_row_time, outcome, _line) = raw.outcome.ok_or_else(|| {
            Error::validation(format!("patient `{patient_id}` has no outcome row"))
        })?;

        let mut records = raw.records;
        // Stable by time; later file entries win within the same hour.
        records.sort_by_key(|r| r.time);

        if let Some(last) = records.last() {
            if last.time > outcome_row_time {
                return Err(Error::validation(format!(
                    "patient `{patient_id}`: record at t={} after outcome at t={outcome_row_time}",
                    last.time
                )));
            }
        }

        let entry_time = records.first().map_or(outcome_row_time, |r| r.time);
        let mut outcome_time = match outcome {
            Outcome::Death => outcome_row_time,
            // The last observed entry is the censoring reference time.
            Outcome::Censored => records.last().map_or(outcome_row_time, |r| r.time),
        };
        if outcome == Outcome::Death && outcome_time == entry_time {
            log::warn!(
                "patient `{patient_id}`: zero-duration death timeline, shifting outcome to t={}",
                entry_time + 1
            );
            outcome_time = entry_time + 1;
        }

        let tl = PatientTimeline { patient_id, entry_time, records, outcome_time, outcome };
        tl.validate(schema)?;
        timelines.push(tl);
    }
    Ok(timelines)
}

/// Write timelines back out in the long-format CSV contract.
pub fn write_long_csv(
    timelines: &[PatientTimeline],
    schema: &FeatureSchema,
    writer: &mut impl std::io::Write,
) -> Result<()> {
    writeln!(writer, "patient_id,time_hours,field,value")?;
    for tl in timelines {
        for r in &tl.records {
            let value = match &r.value {
                RawValue::Real(v) => format!("{v}"),
                RawValue::Token(t) => t.clone(),
                RawValue::Flag(f) => if *f { "1".to_string() } else { "0".to_string() },
            };
            writeln!(writer, "{},{},{},{}", tl.patient_id, r.time, schema.features[r.feature].name, value)?;
        }
        let field = match tl.outcome {
            Outcome::Death => DEATH_FIELD,
            Outcome::Censored => CENSOR_FIELD,
        };
        writeln!(writer, "{},{},{},", tl.patient_id, tl.outcome_time, field)?;
    }
    Ok(())
}

/// Expand one timeline into counting-process rows: intervals break exactly at
/// covariate-change times, covariates are carried forward, and the union of
/// intervals is `(entry_time, outcome_time]`.
pub fn expand_counting_process(
    tl: &PatientTimeline,
    schema: &FeatureSchema,
) -> Result<Vec<ExpandedRow>> {
    tl.validate(schema)?;
    if tl.outcome == Outcome::Death && tl.entry_time == tl.outcome_time {
        return Err(Error::validation(format!(
            "patient `{}`: zero-duration death timeline",
            tl.patient_id
        )));
    }
    if tl.entry_time == tl.outcome_time {
        // Censored with no observation span: never enters a risk set.
        return Ok(Vec::new());
    }

    let mut breaks = vec![tl.entry_time];
    for t in tl.change_times() {
        if t > tl.entry_time && t < tl.outcome_time {
            if *breaks.last().unwrap() != t {
                breaks.push(t);
            }
        }
    }

    let mut rows = Vec::with_capacity(breaks.len());
    let d = schema.features.len();
    let mut state: Vec<Option<RawValue>> = vec![None; d];
    let mut record_idx = 0;
    for (k, &start) in breaks.iter().enumerate() {
        // Fold in every record up to and including the interval start; later
        // records in the same hour overwrite earlier ones.
        while record_idx < tl.records.len() && tl.records[record_idx].time <= start {
            let r = &tl.records[record_idx];
            state[r.feature] = Some(r.value.clone());
            record_idx += 1;
        }
        let stop = breaks.get(k + 1).copied().unwrap_or(tl.outcome_time);
        let last = k + 1 == breaks.len();
        rows.push(ExpandedRow {
            patient_id: tl.patient_id.clone(),
            start,
            stop,
            state: state.clone(),
            event: last && tl.outcome == Outcome::Death,
        });
    }
    Ok(rows)
}

/// Expand a whole cohort; row order follows timeline order.
pub fn expand_cohort(
    timelines: &[PatientTimeline],
    schema: &FeatureSchema,
) -> Result<Vec<ExpandedRow>> {
    let mut rows = Vec::new();
    for tl in timelines {
        rows.extend(expand_counting_process(tl, schema)?);
    }
    Ok(rows)
}

/// Group rows by distinct death time. Risk-set membership uses the half-open
/// interval convention: row `(start, stop]` is at risk at `t` iff
/// `start < t && t <= stop`. Cohorts with no deaths yield an empty list.
pub fn build_event_groups(rows: &[ExpandedRow]) -> Vec<EventGroup> {
    let mut death_times: Vec<u64> =
        rows.iter().filter(|r| r.event).map(|r| r.stop).collect();
    death_times.sort_unstable();
    death_times.dedup();

    death_times
        .into_iter()
        .map(|t| {
            let mut deaths = Vec::new();
            let mut risk = Vec::new();
            for (i, row) in rows.iter().enumerate() {
                if row.start < t && t <= row.stop {
                    risk.push(i);
                    if row.event && row.stop == t {
                        deaths.push(i);
                    }
                }
            }
            EventGroup { time: t, deaths, risk }
        })
        .collect()
}

/// Patient-level stratification key. `outcome` is built in; any other key
/// must name a schema feature. Continuous features stratify on the cohort
/// median of each patient's last observed value.
fn stratum_cell(
    tl: &PatientTimeline,
    keys: &[String],
    schema: &FeatureSchema,
    medians: &HashMap<String, f64>,
) -> Vec<String> {
    keys.iter()
        .map(|key| {
            if key == "outcome" {
                return match tl.outcome {
                    Outcome::Death => "death".to_string(),
                    Outcome::Censored => "censored".to_string(),
                };
            }
            let idx = schema.index_of(key).expect("validated");
            let last = tl.records.iter().rev().find(|r| r.feature == idx);
            match (last, &schema.features[idx].kind) {
                (None, _) => "missing".to_string(),
                (Some(r), FeatureKind::Continuous) => match &r.value {
                    RawValue::Real(v) => {
                        let median = medians[key];
                        if *v <= median { "le_median".to_string() } else { "gt_median".to_string() }
                    }
                    _ => "missing".to_string(),
                },
                (Some(r), _) => match &r.value {
                    RawValue::Token(t) => t.clone(),
                    RawValue::Flag(f) => if *f { "1".to_string() } else { "0".to_string() },
                    RawValue::Real(v) => format!("{v}"),
                },
            }
        })
        .collect()
}

/// Split patients into folds with per-cell proportions matching `fractions`
/// to within one patient; deterministic under `seed`.
pub fn stratified_split(
    timelines: &[PatientTimeline],
    fractions: &[f64],
    strat_keys: &[String],
    seed: u64,
    schema: &FeatureSchema,
) -> Result<Vec<Vec<PatientTimeline>>> {
    if fractions.is_empty() {
        return Err(Error::validation("at least one fold fraction required"));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 || fractions.iter().any(|f| *f < 0.0) {
        return Err(Error::validation(format!("fold fractions must be non-negative and sum to 1, got {fractions:?}")));
    }
    for key in strat_keys {
        if key != "outcome" && schema.index_of(key).is_none() {
            return Err(Error::schema(format!("stratification key `{key}` not in schema")));
        }
    }

    // Cohort medians of last observed values, for continuous keys.
    let mut medians = HashMap::new();
    for key in strat_keys {
        if let Some(idx) = schema.index_of(key) {
            if matches!(schema.features[idx].kind, FeatureKind::Continuous) {
                let mut values: Vec<f64> = timelines
                    .iter()
                    .filter_map(|tl| {
                        tl.records.iter().rev().find(|r| r.feature == idx).and_then(|r| match r.value {
                            RawValue::Real(v) => Some(v),
                            _ => None,
                        })
                    })
                    .collect();
                values.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let median = if values.is_empty() {
                    0.0
                } else {
                    values[(values.len() - 1) / 2]
                };
                medians.insert(key.clone(), median);
            }
        }
    }

    let mut cells: BTreeMap<Vec<String>, Vec<usize>> = BTreeMap::new();
    for (i, tl) in timelines.iter().enumerate() {
        cells.entry(stratum_cell(tl, strat_keys, schema, &medians)).or_default().push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds: Vec<Vec<usize>> = vec![Vec::new(); fractions.len()];
    for indices in cells.values() {
        let mut shuffled = indices.clone();
        shuffled.shuffle(&mut rng);
        let counts = largest_remainder(shuffled.len(), fractions);
        let mut offset = 0;
        for (fold, &count) in counts.iter().enumerate() {
            folds[fold].extend_from_slice(&shuffled[offset..offset + count]);
            offset += count;
        }
    }

    Ok(folds
        .into_iter()
        .map(|mut fold| {
            fold.sort_unstable();
            fold.into_iter().map(|i| timelines[i].clone()).collect()
        })
        .collect())
}

/// Apportion `m` items across fractions, largest fractional remainder first.
fn largest_remainder(m: usize, fractions: &[f64]) -> Vec<usize> {
    let mut counts: Vec<usize> = fractions.iter().map(|f| (m as f64 * f).floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut remainders: Vec<(usize, f64)> = fractions
        .iter()
        .enumerate()
        .map(|(k, f)| (k, m as f64 * f - counts[k] as f64))
        .collect();
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for i in 0..(m - assigned) {
        counts[remainders[i % remainders.len()].0] += 1;
    }
    counts
}
