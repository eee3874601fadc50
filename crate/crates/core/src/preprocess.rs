//! Preprocessing, fit on the training fold only: last-observation-carried-
//! forward materialization, standardization of continuous columns to zero
//! mean and unit (population) standard deviation, one-hot encoding, and a
//! chained-equations imputation for missing continuous entries.
//!
//! Fitted statistics are applied unchanged to validation and test folds.

use serde::{Deserialize, Serialize};

use crate::data::{CovariateRecord, DesignMatrix, ExpandedRow, PatientTimeline};
use crate::error::{Error, Result};
use crate::schema::{FeatureDef, FeatureKind, FeatureSchema, RawValue};
use crate::util::solve_linear;

/// Ridge penalty for the chain regressions; guarantees solvability.
pub const CHAIN_RIDGE_LAMBDA: f64 = 1e-3;
/// Fixed chain length; convergence is not checked so runs stay deterministic.
pub const DEFAULT_IMPUTE_ROUNDS: usize = 10;

pub type RawState = Vec<Option<RawValue>>;

/// Materialize LOCF: after this, every change point carries a record for
/// each feature observed at or before it. Features never observed stay
/// missing throughout.
pub fn carry_forward(tl: &PatientTimeline) -> PatientTimeline {
    let n_features = tl.records.iter().map(|r| r.feature + 1).max().unwrap_or(0);
    let mut state: Vec<Option<RawValue>> = vec![None; n_features];
    let mut records = Vec::new();
    let mut idx = 0;
    for t in tl.change_times() {
        while idx < tl.records.len() && tl.records[idx].time <= t {
            let r = &tl.records[idx];
            state[r.feature] = Some(r.value.clone());
            idx += 1;
        }
        for (feature, value) in state.iter().enumerate() {
            if let Some(v) = value {
                records.push(CovariateRecord { time: t, feature, value: v.clone() });
            }
        }
    }
    PatientTimeline { records, ..tl.clone() }
}

/// One-hot block for a categorical value: exactly one 1 for a known level,
/// all zeros for missing, all zeros plus a warning count for unseen levels.
pub fn one_hot_encode(value: Option<&RawValue>, feature: &FeatureDef) -> (Vec<f64>, bool) {
    let levels = match &feature.kind {
        FeatureKind::Categorical { levels } => levels,
        _ => panic!("one_hot_encode called on non-categorical feature"),
    };
    let mut block = vec![0.0; levels.len()];
    match value {
        None => (block, false),
        Some(RawValue::Token(token)) => match levels.iter().position(|l| l == token) {
            Some(i) => {
                block[i] = 1.0;
                (block, false)
            }
            None => (block, true),
        },
        Some(_) => (block, true),
    }
}

/// Per-feature standardization statistics from the training fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStandard {
    pub feature: String,
    pub mean: f64,
    pub std: f64,
}

/// Standardizer over the continuous features of a schema. Constant columns
/// are dropped; never-observed columns are retained with an identity
/// transform (their entries are later imputed to the standardized mean 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub fitted: Vec<FeatureStandard>,
    pub dropped: Vec<String>,
}

impl Standardizer {
    /// Fit population-standard-deviation statistics from per-feature observed
    /// value lists, aligned with the schema's continuous features.
    pub fn fit(schema: &FeatureSchema, observed: &[Vec<f64>]) -> Standardizer {
        let continuous: Vec<&FeatureDef> = schema
            .features
            .iter()
            .filter(|f| matches!(f.kind, FeatureKind::Continuous))
            .collect();
        assert_eq!(continuous.len(), observed.len());
        let mut fitted = Vec::new();
        let mut dropped = Vec::new();
        for (f, values) in continuous.iter().zip(observed) {
            if values.is_empty() {
                log::warn!("feature `{}` has no observed values in the training fold", f.name);
                fitted.push(FeatureStandard { feature: f.name.clone(), mean: 0.0, std: 1.0 });
                continue;
            }
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let std = var.sqrt();
            if std <= 1e-12 {
                log::warn!("feature `{}` is constant in the training fold, dropping", f.name);
                dropped.push(f.name.clone());
            } else {
                fitted.push(FeatureStandard { feature: f.name.clone(), mean, std });
            }
        }
        Standardizer { fitted, dropped }
    }

    pub fn transform(&self, feature: &str, v: f64) -> Option<f64> {
        self.fitted.iter().find(|s| s.feature == feature).map(|s| (v - s.mean) / s.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Continuous,
    Indicator { level: String },
    Binary,
}

/// One encoded column: source schema feature plus its role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedColumn {
    pub feature: usize,
    pub name: String,
    pub kind: ColumnKind,
}

/// Ordered encoded columns after dropping constant continuous features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedLayout {
    pub columns: Vec<EncodedColumn>,
}

impl EncodedLayout {
    pub fn build(schema: &FeatureSchema, dropped: &[String]) -> EncodedLayout {
        let mut columns = Vec::new();
        for (i, f) in schema.features.iter().enumerate() {
            match &f.kind {
                FeatureKind::Continuous => {
                    if !dropped.contains(&f.name) {
                        columns.push(EncodedColumn {
                            feature: i,
                            name: f.name.clone(),
                            kind: ColumnKind::Continuous,
                        });
                    }
                }
                FeatureKind::Categorical { levels } => {
                    for level in levels {
                        columns.push(EncodedColumn {
                            feature: i,
                            name: format!("{}={level}", f.name),
                            kind: ColumnKind::Indicator { level: level.clone() },
                        });
                    }
                }
                FeatureKind::Binary => columns.push(EncodedColumn {
                    feature: i,
                    name: f.name.clone(),
                    kind: ColumnKind::Binary,
                }),
            }
        }
        EncodedLayout { columns }
    }

    pub fn width(&self) -> usize {
        self.columns.len()
    }

    pub fn names(&self) -> Vec<String> {
        self.columns.iter().map(|c| c.name.clone()).collect()
    }
}

/// Ridge regression of one continuous column on every other encoded column;
/// the fitted chain is reused verbatim at apply time (no refit).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainModel {
    pub column: usize,
    /// Weights over the other columns in layout order, then the intercept.
    pub coef: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputationChain {
    pub rounds: usize,
    pub models: Vec<ChainModel>,
}

impl ImputationChain {
    fn predict(&self, model: &ChainModel, row: &[f64]) -> f64 {
        let mut acc = *model.coef.last().unwrap();
        let mut k = 0;
        for (c, v) in row.iter().enumerate() {
            if c != model.column {
                acc += model.coef[k] * v;
                k += 1;
            }
        }
        acc
    }

    /// Fill the missing entries of one encoded row (NaN markers) using the
    /// fitted chain coefficients; missing entries start at the standardized
    /// mean 0 and are refined for `rounds` passes.
    pub fn impute_row(&self, row: &mut [f64]) {
        let missing: Vec<usize> =
            row.iter().enumerate().filter(|(_, v)| v.is_nan()).map(|(c, _)| c).collect();
        if missing.is_empty() {
            return;
        }
        for &c in &missing {
            row[c] = 0.0;
        }
        for _ in 0..self.rounds {
            for model in &self.models {
                if missing.contains(&model.column) {
                    row[model.column] = self.predict(model, row);
                }
            }
        }
    }
}

/// Fit the chained-equations imputation on an encoded matrix with NaN
/// missing markers, filling it in place. Deterministic: the chain visits
/// columns in layout order for a fixed number of rounds.
pub fn impute_chained_fit(
    matrix: &mut DesignMatrix,
    continuous_cols: &[usize],
    rounds: usize,
    ridge: f64,
) -> Result<ImputationChain> {
    if rounds == 0 {
        return Err(Error::numeric("imputation rounds must be at least 1"));
    }
    let width = matrix.width;
    let n_rows = matrix.n_rows();

    let mut missing: Vec<Vec<usize>> = vec![Vec::new(); width];
    for r in 0..n_rows {
        for &c in continuous_cols {
            if matrix.data[r * width + c].is_nan() {
                matrix.data[r * width + c] = 0.0;
                missing[c].push(r);
            }
        }
    }

    let mut models: Vec<ChainModel> =
        continuous_cols.iter().map(|&c| ChainModel { column: c, coef: vec![0.0; width] }).collect();

    for _ in 0..rounds {
        for model in &mut models {
            let c = model.column;
            let observed: Vec<usize> = (0..n_rows).filter(|r| !missing[c].contains(r)).collect();
            if observed.is_empty() {
                log::warn!("encoded column {c} has no observed entries, imputing zeros");
                model.coef = vec![0.0; width];
                continue;
            }
            // Predictors: every other column plus an intercept.
            let p = width; // width-1 predictors + intercept
            let mut xtx = vec![0.0; p * p];
            let mut xty = vec![0.0; p];
            let mut predictor_row = vec![0.0; p];
            for &r in &observed {
                let row = matrix.row(r);
                let mut k = 0;
                for (col, &v) in row.iter().enumerate() {
                    if col != c {
                        predictor_row[k] = v;
                        k += 1;
                    }
                }
                predictor_row[p - 1] = 1.0;
                let y = row[c];
                for i in 0..p {
                    for j in i..p {
                        xtx[i * p + j] += predictor_row[i] * predictor_row[j];
                    }
                    xty[i] += predictor_row[i] * y;
                }
            }
            for i in 0..p {
                for j in 0..i {
                    xtx[i * p + j] = xtx[j * p + i];
                }
                xtx[i * p + i] += ridge;
            }
            let coef = solve_linear(&mut xtx, &mut xty)
                .ok_or_else(|| Error::numeric("chain regression system is singular"))?;
            model.coef = coef;

            // Refresh the missing entries with the new model.
            let chain_view = ImputationChain { rounds: 1, models: vec![model.clone()] };
            for &r in &missing[c] {
                let start = r * width;
                let predicted = chain_view.predict(model, &matrix.data[start..start + width]);
                matrix.data[start + c] = predicted;
            }
        }
    }
    Ok(ImputationChain { rounds, models })
}

/// Fitted preprocessing statistics: standardizer, encoded layout, and the
/// imputation chain, all derived from the fit fold only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessStats {
    pub fold_id: String,
    pub standardizer: Standardizer,
    pub layout: EncodedLayout,
    pub chain: ImputationChain,
}

/// Applies fitted preprocessing to raw covariate states.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessor {
    pub schema: FeatureSchema,
    pub stats: PreprocessStats,
}

impl Preprocessor {
    /// Fit standardization and the imputation chain on training-fold states.
    pub fn fit(
        schema: &FeatureSchema,
        states: &[&RawState],
        rounds: usize,
        fold_id: &str,
    ) -> Result<Preprocessor> {
        let mut observed: Vec<Vec<f64>> = Vec::new();
        for (i, f) in schema.features.iter().enumerate() {
            if matches!(f.kind, FeatureKind::Continuous) {
                let values: Vec<f64> = states
                    .iter()
                    .filter_map(|s| match s.get(i) {
                        Some(Some(RawValue::Real(v))) => Some(*v),
                        _ => None,
                    })
                    .collect();
                observed.push(values);
            }
        }
        let standardizer = Standardizer::fit(schema, &observed);
        let layout = EncodedLayout::build(schema, &standardizer.dropped);

        let mut matrix = DesignMatrix::new(layout.width());
        let mut unseen = 0u64;
        for state in states {
            let row = encode_with_markers(schema, &layout, &standardizer, state, &mut unseen);
            matrix.push_row(&row);
        }
        if unseen > 0 {
            log::warn!("{unseen} categorical values not in schema levels during fit");
        }
        let continuous_cols: Vec<usize> = layout
            .columns
            .iter()
            .enumerate()
            .filter(|(_, c)| matches!(c.kind, ColumnKind::Continuous))
            .map(|(i, _)| i)
            .collect();
        let chain = impute_chained_fit(&mut matrix, &continuous_cols, rounds, CHAIN_RIDGE_LAMBDA)?;

        Ok(Preprocessor {
            schema: schema.clone(),
            stats: PreprocessStats {
                fold_id: fold_id.to_string(),
                standardizer,
                layout,
                chain,
            },
        })
    }

    pub fn width(&self) -> usize {
        self.stats.layout.width()
    }

    /// Encode, standardize, and impute one raw state into a dense row.
    pub fn apply_state(&self, state: &RawState) -> Vec<f64> {
        let mut unseen = 0;
        let mut row = encode_with_markers(
            &self.schema,
            &self.stats.layout,
            &self.stats.standardizer,
            state,
            &mut unseen,
        );
        self.stats.chain.impute_row(&mut row);
        row
    }

    /// Encode a batch of expanded rows; returns the design matrix aligned
    /// with the input rows plus the count of unseen categorical levels.
    pub fn encode_rows(&self, rows: &[ExpandedRow]) -> (DesignMatrix, u64) {
        let mut matrix = DesignMatrix::new(self.width());
        let mut unseen = 0;
        for row in rows {
            let mut encoded = encode_with_markers(
                &self.schema,
                &self.stats.layout,
                &self.stats.standardizer,
                &row.state,
                &mut unseen,
            );
            self.stats.chain.impute_row(&mut encoded);
            matrix.push_row(&encoded);
        }
        if unseen > 0 {
            log::warn!("{unseen} categorical values mapped to all-zero blocks");
        }
        (matrix, unseen)
    }
}

/// Encode a raw state with NaN markers for missing continuous entries.
fn encode_with_markers(
    schema: &FeatureSchema,
    layout: &EncodedLayout,
    standardizer: &Standardizer,
    state: &RawState,
    unseen: &mut u64,
) -> Vec<f64> {
    let mut row = Vec::with_capacity(layout.width());
    for col in &layout.columns {
        let value = state.get(col.feature).and_then(|v| v.as_ref());
        match &col.kind {
            ColumnKind::Continuous => match value {
                Some(RawValue::Real(v)) => {
                    row.push(standardizer.transform(&col.name, *v).unwrap_or(f64::NAN))
                }
                _ => row.push(f64::NAN),
            },
            ColumnKind::Indicator { level } => match value {
                Some(RawValue::Token(token)) => {
                    if token == level {
                        row.push(1.0);
                    } else {
                        if !matches_any_level(schema, col.feature, token) {
                            // Count once per block: only on the first level.
                            if is_first_level(schema, col.feature, level) {
                                *unseen += 1;
                            }
                        }
                        row.push(0.0);
                    }
                }
                _ => row.push(0.0),
            },
            ColumnKind::Binary => match value {
                Some(RawValue::Flag(true)) => row.push(1.0),
                _ => row.push(0.0),
            },
        }
    }
    row
}

fn matches_any_level(schema: &FeatureSchema, feature: usize, token: &str) -> bool {
    match &schema.features[feature].kind {
        FeatureKind::Categorical { levels } => levels.iter().any(|l| l == token),
        _ => false,
    }
}

fn is_first_level(schema: &FeatureSchema, feature: usize, level: &str) -> bool {
    match &schema.features[feature].kind {
        FeatureKind::Categorical { levels } => levels.first().map(String::as_str) == Some(level),
        _ => false,
    }
}

/// Encode a raw state with no standardization or imputation: raw continuous
/// values (missing as 0), one-hot blocks, binary flags. Used by the synthetic
/// generator's ground truth and by tests that need the unscaled design.
pub fn encode_raw(schema: &FeatureSchema, state: &RawState) -> Vec<f64> {
    let layout = EncodedLayout::build(schema, &[]);
    let mut row = Vec::with_capacity(layout.width());
    for col in &layout.columns {
        let value = state.get(col.feature).and_then(|v| v.as_ref());
        match &col.kind {
            ColumnKind::Continuous => match value {
                Some(RawValue::Real(v)) => row.push(*v),
                _ => row.push(0.0),
            },
            ColumnKind::Indicator { level } => match value {
                Some(RawValue::Token(token)) if token == level => row.push(1.0),
                _ => row.push(0.0),
            },
            ColumnKind::Binary => match value {
                Some(RawValue::Flag(true)) => row.push(1.0),
                _ => row.push(0.0),
            },
        }
    }
    row
}
