//! Negative log partial likelihood over event-time risk sets with Efron,
//! Breslow, and exact-average tie handling, its exact gradient through either
//! exponent, the full-batch Adam epoch loop, and the random hyperparameter
//! search.
//!
//! All inner sums over risk sets are computed with max-shift (log-sum-exp)
//! stabilization, so adding a constant to every log-hazard leaves the
//! likelihood unchanged.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DesignMatrix, EventGroup};
use crate::error::{Error, Result};
use crate::model::{AdamState, Exponent, NeuralExponent, DEFAULT_LEAKY_SLOPE};
use crate::util::derive_seed;

/// Exact averaging enumerates |D|! orderings per group; factorial guard.
pub const MAX_EXACT_TIE_MULTIPLICITY: usize = 8;
pub const MAX_EPOCHS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieMethod {
    Efron,
    Breslow,
    ExactAverage,
}

impl std::str::FromStr for TieMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<TieMethod> {
        match s {
            "efron" => Ok(TieMethod::Efron),
            "breslow" => Ok(TieMethod::Breslow),
            "exact" | "exact_average" => Ok(TieMethod::ExactAverage),
            other => Err(Error::validation(format!("unknown tie method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub ties: TieMethod,
    pub seed: u64,
    pub l2_lambda: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.epochs > MAX_EPOCHS {
            return Err(Error::validation(format!(
                "epochs must be in 1..={MAX_EPOCHS}, got {}",
                self.epochs
            )));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::numeric(format!("learning rate {} invalid", self.lr)));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: MAX_EPOCHS,
            lr: 0.001,
            ties: TieMethod::Efron,
            seed: 0,
            l2_lambda: 0.0,
        }
    }
}

fn check_groups(phi_len: usize, groups: &[EventGroup]) -> Result<()> {
    if groups.is_empty() {
        return Err(Error::numeric("no events: the partial likelihood is undefined"));
    }
    for g in groups {
        if g.deaths.is_empty() {
            return Err(Error::numeric(format!("event group at t={} has no deaths", g.time)));
        }
        if g.deaths.iter().chain(&g.risk).any(|&i| i >= phi_len) {
            return Err(Error::numeric("event group references a row outside the design matrix"));
        }
    }
    Ok(())
}

/// −log L from per-row log-hazards. The building block behind the public
/// model-level entry points; exposed for fixtures that pin φ directly.
pub fn nll_from_phi(phi: &[f64], groups: &[EventGroup], ties: TieMethod) -> Result<f64> {
    check_groups(phi.len(), groups)?;
    let mut total = 0.0;
    for g in groups {
        total += group_nll(phi, g, ties)?;
    }
    Ok(total)
}

/// −log L plus its gradient with respect to every row's φ.
pub fn nll_grad_from_phi(
    phi: &[f64],
    groups: &[EventGroup],
    ties: TieMethod,
) -> Result<(f64, Vec<f64>)> {
    check_groups(phi.len(), groups)?;
    let mut total = 0.0;
    let mut upstream = vec![0.0; phi.len()];
    for g in groups {
        total += group_nll_grad(phi, g, ties, &mut upstream)?;
    }
    Ok((total, upstream))
}

fn shifted_sums(phi: &[f64], g: &EventGroup) -> (f64, f64, f64) {
    let shift = g.risk.iter().map(|&j| phi[j]).fold(f64::NEG_INFINITY, f64::max);
    let sum_risk: f64 = g.risk.iter().map(|&j| (phi[j] - shift).exp()).sum();
    let sum_death: f64 = g.deaths.iter().map(|&j| (phi[j] - shift).exp()).sum();
    (shift, sum_risk, sum_death)
}

fn group_nll(phi: &[f64], g: &EventGroup, ties: TieMethod) -> Result<f64> {
    let m = g.deaths.len();
    let death_phi: f64 = g.deaths.iter().map(|&j| phi[j]).sum();
    let (shift, sum_risk, sum_death) = shifted_sums(phi, g);
    match ties {
        TieMethod::Breslow => Ok(m as f64 * (shift + sum_risk.ln()) - death_phi),
        TieMethod::Efron => {
            let mut term = 0.0;
            for l in 0..m {
                let t = sum_risk - (l as f64 / m as f64) * sum_death;
                term += shift + t.ln();
            }
            Ok(term - death_phi)
        }
        TieMethod::ExactAverage => {
            if m > MAX_EXACT_TIE_MULTIPLICITY {
                return Err(Error::numeric(format!(
                    "exact averaging limited to {MAX_EXACT_TIE_MULTIPLICITY} tied deaths, group at t={} has {m}",
                    g.time
                )));
            }
            let weights: Vec<f64> = g.deaths.iter().map(|&j| (phi[j] - shift).exp()).collect();
            let mean = mean_over_orderings(&weights, sum_risk);
            Ok(-death_phi + m as f64 * shift - mean.ln())
        }
    }
}

/// Mean over all orderings of the tied deaths of the product of untied
/// partial-likelihood denominators, in shifted space.
fn mean_over_orderings(weights: &[f64], sum_risk: f64) -> f64 {
    let m = weights.len();
    let mut used = vec![false; m];
    let mut total = 0.0;
    fn recurse(
        weights: &[f64],
        used: &mut [bool],
        removed: f64,
        product: f64,
        sum_risk: f64,
        total: &mut f64,
    ) {
        let mut any = false;
        for i in 0..weights.len() {
            if !used[i] {
                any = true;
                used[i] = true;
                let denom = sum_risk - removed;
                recurse(weights, used, removed + weights[i], product / denom, sum_risk, total);
                used[i] = false;
            }
        }
        if !any {
            *total += product;
        }
    }
    recurse(weights, &mut used, 0.0, 1.0, sum_risk, &mut total);
    let factorial: f64 = (1..=m).map(|k| k as f64).product();
    total / factorial
}

fn group_nll_grad(
    phi: &[f64],
    g: &EventGroup,
    ties: TieMethod,
    upstream: &mut [f64],
) -> Result<f64> {
    let m = g.deaths.len();
    let death_phi: f64 = g.deaths.iter().map(|&j| phi[j]).sum();
    let (shift, sum_risk, sum_death) = shifted_sums(phi, g);
    match ties {
        TieMethod::Breslow => {
            for &j in &g.risk {
                upstream[j] += m as f64 * (phi[j] - shift).exp() / sum_risk;
            }
            for &j in &g.deaths {
                upstream[j] -= 1.0;
            }
            Ok(m as f64 * (shift + sum_risk.ln()) - death_phi)
        }
        TieMethod::Efron => {
            let mut term = 0.0;
            let mut inv_sum = 0.0; // Σ_l 1/t_l
            let mut frac_sum = 0.0; // Σ_l (l/m)/t_l
            for l in 0..m {
                let frac = l as f64 / m as f64;
                let t = sum_risk - frac * sum_death;
                term += shift + t.ln();
                inv_sum += 1.0 / t;
                frac_sum += frac / t;
            }
            for &j in &g.risk {
                upstream[j] += (phi[j] - shift).exp() * inv_sum;
            }
            for &j in &g.deaths {
                upstream[j] -= (phi[j] - shift).exp() * frac_sum + 1.0;
            }
            Ok(term - death_phi)
        }
        TieMethod::ExactAverage => Err(Error::numeric(
            "gradient not available for exact averaging; use efron or breslow",
        )),
    }
}

/// Pure −log L of a model over encoded rows (eval mode, no dropout).
pub fn neg_log_partial_likelihood(
    model: &Exponent,
    matrix: &DesignMatrix,
    groups: &[EventGroup],
    ties: TieMethod,
) -> Result<f64> {
    let phi = eval_phi(model, matrix)?;
    nll_from_phi(&phi, groups, ties)
}

fn eval_phi(model: &Exponent, matrix: &DesignMatrix) -> Result<Vec<f64>> {
    if matrix.width != model.input_dim() {
        return Err(Error::numeric(format!(
            "design width {} does not match model width {}",
            matrix.width,
            model.input_dim()
        )));
    }
    Ok((0..matrix.n_rows()).map(|r| model.value(matrix.row(r))).collect())
}

/// NLL plus the gradient of the penalized objective
/// (NLL + λ‖β‖² for the linear exponent).
#[derive(Debug, Clone)]
pub struct ObjectiveGrad {
    pub nll: f64,
    pub penalized: f64,
    pub grad: Vec<f64>,
}

/// Exact gradient in eval mode (no dropout); the form checked against finite
/// differences.
pub fn nll_gradient(
    model: &Exponent,
    matrix: &DesignMatrix,
    groups: &[EventGroup],
    ties: TieMethod,
) -> Result<ObjectiveGrad> {
    gradient_impl(model, matrix, groups, ties, None)
}

/// Gradient with train-mode dropout for the neural exponent: each row's mask
/// comes from a stream derived from `epoch_seed` and the row index, so the
/// sampled objective and its gradient are exactly consistent and reproducible.
pub fn nll_gradient_train(
    model: &Exponent,
    matrix: &DesignMatrix,
    groups: &[EventGroup],
    ties: TieMethod,
    epoch_seed: u64,
) -> Result<ObjectiveGrad> {
    gradient_impl(model, matrix, groups, ties, Some(epoch_seed))
}

fn gradient_impl(
    model: &Exponent,
    matrix: &DesignMatrix,
    groups: &[EventGroup],
    ties: TieMethod,
    dropout_seed: Option<u64>,
) -> Result<ObjectiveGrad> {
    if matrix.width != model.input_dim() {
        return Err(Error::numeric(format!(
            "design width {} does not match model width {}",
            matrix.width,
            model.input_dim()
        )));
    }
    let n_rows = matrix.n_rows();
    let phi: Vec<f64> = match (model, dropout_seed) {
        (Exponent::Neural(net), Some(seed)) => (0..n_rows)
            .map(|r| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, r as u64));
                net.forward_train(matrix.row(r), &mut rng).map(|c| c.phi())
            })
            .collect::<Result<_>>()?,
        _ => eval_phi(model, matrix)?,
    };
    let (nll, upstream) = nll_grad_from_phi(&phi, groups, ties)?;

    let mut grad = vec![0.0; model.n_params()];
    let mut penalized = nll;
    match model {
        Exponent::Linear(linear) => {
            for (r, &u) in upstream.iter().enumerate() {
                if u != 0.0 {
                    for (k, &x) in matrix.row(r).iter().enumerate() {
                        grad[k] += u * x;
                    }
                }
            }
            if linear.l2_lambda != 0.0 {
                let norm2: f64 = linear.beta.iter().map(|b| b * b).sum();
                penalized += linear.l2_lambda * norm2;
                for (k, b) in linear.beta.iter().enumerate() {
                    grad[k] += 2.0 * linear.l2_lambda * b;
                }
            }
        }
        Exponent::Neural(net) => {
            for (r, &u) in upstream.iter().enumerate() {
                if u != 0.0 {
                    let cache = match dropout_seed {
                        Some(seed) => {
                            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, r as u64));
                            net.forward_train(matrix.row(r), &mut rng)?
                        }
                        None => net.forward_eval(matrix.row(r))?,
                    };
                    net.backward_accumulate(&cache, u, &mut grad)?;
                }
            }
        }
    }
    Ok(ObjectiveGrad { nll, penalized, grad })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_nll: f64,
    pub val_nll: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: Exponent,
    /// Epoch with the best (lowest) validation NLL; reported, not used for
    /// selection — the final-epoch model is returned.
    pub best_epoch: usize,
    pub history: Vec<EpochStats>,
}

/// Full-batch Adam over the partial likelihood for up to 100 epochs.
/// The returned model is the final-epoch model; per-epoch train NLL and
/// validation NLL land in the history. Deterministic under `cfg.seed`
/// (dropout masks are drawn from per-epoch derived streams).
pub fn train(
    mut model: Exponent,
    train_matrix: &DesignMatrix,
    train_groups: &[EventGroup],
    val: Option<(&DesignMatrix, &[EventGroup])>,
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    cfg.validate()?;
    check_groups(train_matrix.n_rows(), train_groups)?;
    if let Exponent::Linear(linear) = &mut model {
        linear.l2_lambda = cfg.l2_lambda;
    }

    let mut params = model.params();
    let mut adam = AdamState::new(params.len(), cfg.lr);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best_epoch = 0;
    let mut best_val = f64::INFINITY;

    for epoch in 0..cfg.epochs {
        let epoch_seed = derive_seed(cfg.seed, epoch as u64);
        let objective = match &model {
            Exponent::Neural(_) => {
                nll_gradient_train(&model, train_matrix, train_groups, cfg.ties, epoch_seed)?
            }
            Exponent::Linear(_) => nll_gradient(&model, train_matrix, train_groups, cfg.ties)?,
        };
        if !objective.nll.is_finite() {
            return Err(Error::numeric(format!(
                "training NLL became non-finite at epoch {epoch}"
            )));
        }
        adam.step(&mut params, &objective.grad)?;
        model.set_params(&params);

        let val_nll = match val {
            Some((vm, vg)) if !vg.is_empty() => {
                Some(neg_log_partial_likelihood(&model, vm, vg, cfg.ties)?)
            }
            _ => None,
        };
        if let Some(v) = val_nll {
            if v < best_val {
                best_val = v;
                best_epoch = epoch;
            }
        }
        history.push(EpochStats { epoch, train_nll: objective.nll, val_nll });
    }

    Ok(TrainedModel { model, best_epoch, history })
}

/// One point of the hyperparameter grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum CandidateConfig {
    Linear { l2_lambda: f64 },
    Neural { layers: usize, n_dim: usize, dropout_p: f64 },
}

/// Regularisation strengths for the linear model.
pub fn paper_linear_grid() -> Vec<CandidateConfig> {
    [0.01, 0.1, 1.0].iter().map(|&l| CandidateConfig::Linear { l2_lambda: l }).collect()
}

/// Layer count × hidden width × dropout grid for the neural model.
pub fn paper_neural_grid() -> Vec<CandidateConfig> {
    let mut grid = Vec::new();
    for layers in [1, 2] {
        for n_dim in [64, 128, 256] {
            for dropout_p in [0.1, 0.2] {
                grid.push(CandidateConfig::Neural { layers, n_dim, dropout_p });
            }
        }
    }
    grid
}

/// The configuration the full search selects on the reference cohort.
pub fn selected_neural_config() -> CandidateConfig {
    CandidateConfig::Neural { layers: 1, n_dim: 128, dropout_p: 0.2 }
}

pub fn selected_linear_config() -> CandidateConfig {
    CandidateConfig::Linear { l2_lambda: 0.1 }
}

#[derive(Debug, Clone)]
pub struct SearchRun {
    pub config: CandidateConfig,
    pub val_metric: f64,
    pub val_nll: f64,
}

#[derive(Debug)]
pub struct SearchOutcome {
    pub config: CandidateConfig,
    pub trained: TrainedModel,
    pub val_metric: f64,
    pub runs: Vec<SearchRun>,
}

/// Sample `budget` configurations uniformly without replacement, train each,
/// and keep the one with the highest validation metric (specificity at 95%
/// sensitivity in the full pipeline); ties break toward lower validation NLL.
pub fn hyperparameter_search(
    grid: &[CandidateConfig],
    train_matrix: &DesignMatrix,
    train_groups: &[EventGroup],
    val: (&DesignMatrix, &[EventGroup]),
    metric: impl Fn(&Exponent) -> f64,
    base: &TrainConfig,
    budget: usize,
) -> Result<SearchOutcome> {
    if budget == 0 {
        return Err(Error::validation("hyperparameter budget must be at least 1"));
    }
    if budget > grid.len() {
        return Err(Error::validation(format!(
            "budget {budget} exceeds grid size {}",
            grid.len()
        )));
    }
    let mut indices: Vec<usize> = (0..grid.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(base.seed, 0x5EA7C4));
    indices.shuffle(&mut rng);
    indices.truncate(budget);

    let d = train_matrix.width;
    let mut best: Option<(SearchRun, TrainedModel)> = None;
    let mut runs = Vec::with_capacity(budget);
    for (k, &gi) in indices.iter().enumerate() {
        let config = grid[gi];
        let run_seed = derive_seed(base.seed, 1 + k as u64);
        let (model, cfg) = instantiate(config, d, run_seed, base)?;
        let trained = train(model, train_matrix, train_groups, Some(val), &cfg)?;
        let val_metric = metric(&trained.model);
        let val_nll = neg_log_partial_likelihood(&trained.model, val.0, val.1, base.ties)?;
        let run = SearchRun { config, val_metric, val_nll };
        runs.push(run.clone());
        let better = match &best {
            None => true,
            Some((incumbent, _)) => {
                val_metric > incumbent.val_metric
                    || (val_metric == incumbent.val_metric && val_nll < incumbent.val_nll)
            }
        };
        if better {
            best = Some((run, trained));
        }
    }
    let (run, trained) = best.expect("budget >= 1");
    Ok(SearchOutcome { config: run.config, trained, val_metric: run.val_metric, runs })
}

/// Build a fresh model for one grid point.
pub fn instantiate(
    config: CandidateConfig,
    d: usize,
    seed: u64,
    base: &TrainConfig,
) -> Result<(Exponent, TrainConfig)> {
    match config {
        CandidateConfig::Linear { l2_lambda } => {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.l2_lambda = l2_lambda;
            Ok((Exponent::Linear(crate::model::LinearExponent::zeros(d, l2_lambda)), cfg))
        }
        CandidateConfig::Neural { layers, n_dim, dropout_p } => {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.l2_lambda = 0.0;
            let net =
                NeuralExponent::xavier(d, n_dim, layers, dropout_p, DEFAULT_LEAKY_SLOPE, seed)?;
            Ok((Exponent::Neural(net), cfg))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LinearExponent;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn group(time: u64, deaths: &[usize], risk: &[usize]) -> EventGroup {
        EventGroup { time, deaths: deaths.to_vec(), risk: risk.to_vec() }
    }

    #[test]
    fn symmetric_two_patient_group_gives_log_two() {
        let phi = vec![0.0, 0.0];
        let groups = vec![group(1, &[0], &[0, 1])];
        for ties in [TieMethod::Efron, TieMethod::Breslow, TieMethod::ExactAverage] {
            let nll = nll_from_phi(&phi, &groups, ties).unwrap();
            assert_abs_diff_eq!(nll, 2.0_f64.ln(), epsilon = 1e-12);
        }
    }

    #[test]
    fn tie_free_methods_coincide() {
        let phi = vec![0.3, -1.2, 0.8, 0.1, -0.4];
        let groups = vec![
            group(2, &[0], &[0, 1, 2, 3, 4]),
            group(5, &[2], &[1, 2, 4]),
            group(9, &[4], &[4]),
        ];
        let efron = nll_from_phi(&phi, &groups, TieMethod::Efron).unwrap();
        let breslow = nll_from_phi(&phi, &groups, TieMethod::Breslow).unwrap();
        let exact = nll_from_phi(&phi, &groups, TieMethod::ExactAverage).unwrap();
        assert_abs_diff_eq!(efron, breslow, epsilon = 1e-12);
        assert_abs_diff_eq!(efron, exact, epsilon = 1e-12);
    }

    #[test]
    fn tied_fixture_matches_hand_derivation() {
        // Risk {a,b,c}, deaths {a,b}, phi = (ln 2, 0, 0).
        // Breslow: 2 ln 4 - ln 2; Efron: ln 4 + ln 2.5 - ln 2.
        let phi = vec![2.0_f64.ln(), 0.0, 0.0];
        let groups = vec![group(4, &[0, 1], &[0, 1, 2])];
        let breslow = nll_from_phi(&phi, &groups, TieMethod::Breslow).unwrap();
        assert_abs_diff_eq!(breslow, 2.0 * 4.0_f64.ln() - 2.0_f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(breslow, 2.0794415416798357, epsilon = 1e-9);
        let efron = nll_from_phi(&phi, &groups, TieMethod::Efron).unwrap();
        assert_abs_diff_eq!(
            efron,
            4.0_f64.ln() + 2.5_f64.ln() - 2.0_f64.ln(),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(efron, 1.6094379124341003, epsilon = 1e-9);
    }

    #[test]
    fn exact_average_fully_tied_group_is_log_factorial() {
        for m in 2..=5usize {
            let phi = vec![0.0; m];
            let rows: Vec<usize> = (0..m).collect();
            let groups = vec![group(1, &rows, &rows)];
            let nll = nll_from_phi(&phi, &groups, TieMethod::ExactAverage).unwrap();
            let log_factorial: f64 = (1..=m).map(|k| (k as f64).ln()).sum();
            assert_abs_diff_eq!(nll, log_factorial, epsilon = 1e-12);
        }
    }

    #[test]
    fn exact_average_rejects_wide_ties() {
        let phi = vec![0.0; 9];
        let rows: Vec<usize> = (0..9).collect();
        let groups = vec![group(1, &rows, &rows)];
        assert!(nll_from_phi(&phi, &groups, TieMethod::ExactAverage).is_err());
    }

    #[test]
    fn empty_groups_is_an_error() {
        let err = nll_from_phi(&[0.0], &[], TieMethod::Efron).unwrap_err();
        assert!(err.to_string().contains("no events"));
    }

    #[test]
    fn shift_invariance_through_log_sum_exp() {
        let phi = vec![0.5, -0.2, 1.4, 0.0, -1.0];
        let groups = vec![group(3, &[0, 2], &[0, 1, 2, 3, 4]), group(6, &[3], &[3, 4])];
        for ties in [TieMethod::Efron, TieMethod::Breslow, TieMethod::ExactAverage] {
            let base = nll_from_phi(&phi, &groups, ties).unwrap();
            for c in [-700.0, -3.0, 0.1, 5.0, 700.0] {
                let shifted: Vec<f64> = phi.iter().map(|p| p + c).collect();
                let nll = nll_from_phi(&shifted, &groups, ties).unwrap();
                assert_abs_diff_eq!(nll, base, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn risk_set_order_does_not_change_nll_or_gradient() {
        let phi = vec![0.5, -0.2, 1.4, 0.0, -1.0];
        let groups = vec![group(3, &[0, 2], &[0, 1, 2, 3, 4])];
        let permuted = vec![group(3, &[2, 0], &[4, 2, 0, 3, 1])];
        for ties in [TieMethod::Efron, TieMethod::Breslow] {
            let (a, ga) = nll_grad_from_phi(&phi, &groups, ties).unwrap();
            let (b, gb) = nll_grad_from_phi(&phi, &permuted, ties).unwrap();
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            for (x, y) in ga.iter().zip(&gb) {
                assert_abs_diff_eq!(*x, *y, epsilon = 1e-12);
            }
        }
        let a = nll_from_phi(&phi, &groups, TieMethod::ExactAverage).unwrap();
        let b = nll_from_phi(&phi, &permuted, TieMethod::ExactAverage).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }

    #[test]
    fn symmetric_covariates_have_zero_linear_gradient() {
        let matrix = DesignMatrix::from_rows(&[vec![1.0, -2.0], vec![1.0, -2.0]]);
        let groups = vec![group(1, &[0], &[0, 1])];
        let model = Exponent::Linear(LinearExponent::zeros(2, 0.0));
        let objective = nll_gradient(&model, &matrix, &groups, TieMethod::Efron).unwrap();
        for g in objective.grad {
            assert_abs_diff_eq!(g, 0.0, epsilon = 1e-15);
        }
    }

    /// Random small instance with ties for the finite-difference oracle.
    fn random_instance(
        n: usize,
        d: usize,
        seed: u64,
    ) -> (DesignMatrix, Vec<EventGroup>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> =
            (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.5..1.5)).collect()).collect();
        let matrix = DesignMatrix::from_rows(&rows);
        // Tied pair at t=2 plus singleton groups with shrinking risk sets.
        let mut groups = vec![group(2, &[0, 1], &(0..n).collect::<Vec<_>>())];
        if n > 4 {
            groups.push(group(5, &[3], &(3..n).collect::<Vec<_>>()));
            groups.push(group(8, &[n - 1], &(n - 2..n).collect::<Vec<_>>()));
        }
        (matrix, groups)
    }

    fn fd_check(model: Exponent, matrix: &DesignMatrix, groups: &[EventGroup], ties: TieMethod) {
        let objective = nll_gradient(&model, matrix, groups, ties).unwrap();
        let mut probe = model.clone();
        let params = probe.params();
        let h = 1e-5;
        let mut numeric = vec![0.0; params.len()];
        for i in 0..params.len() {
            let mut plus = params.clone();
            plus[i] += h;
            probe.set_params(&plus);
            let f_plus = penalized_of(&probe, matrix, groups, ties);
            let mut minus = params.clone();
            minus[i] -= h;
            probe.set_params(&minus);
            let f_minus = penalized_of(&probe, matrix, groups, ties);
            numeric[i] = (f_plus - f_minus) / (2.0 * h);
        }
        let scale = objective
            .grad
            .iter()
            .chain(numeric.iter())
            .fold(0.0_f64, |acc, v| acc.max(v.abs()))
            .max(1e-12);
        for (a, n) in objective.grad.iter().zip(&numeric) {
            assert!(
                (a - n).abs() / scale < 1e-6,
                "analytic {a} vs fd {n} (scale {scale})"
            );
        }
    }

    fn penalized_of(
        model: &Exponent,
        matrix: &DesignMatrix,
        groups: &[EventGroup],
        ties: TieMethod,
    ) -> f64 {
        let nll = neg_log_partial_likelihood(model, matrix, groups, ties).unwrap();
        match model {
            Exponent::Linear(l) => {
                nll + l.l2_lambda * l.beta.iter().map(|b| b * b).sum::<f64>()
            }
            Exponent::Neural(_) => nll,
        }
    }

    #[test]
    fn linear_gradient_matches_finite_differences() {
        for seed in 0..5 {
            let (matrix, groups) = random_instance(10, 3, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xF00D);
            let beta: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            for ties in [TieMethod::Efron, TieMethod::Breslow] {
                for lambda in [0.0, 0.3] {
                    let model =
                        Exponent::Linear(LinearExponent { beta: beta.clone(), l2_lambda: lambda });
                    fd_check(model, &matrix, &groups, ties);
                }
            }
        }
    }

    #[test]
    fn neural_gradient_matches_finite_differences() {
        for seed in 0..5 {
            let (matrix, groups) = random_instance(10, 3, seed);
            let net = NeuralExponent::xavier(3, 4, 1, 0.0, DEFAULT_LEAKY_SLOPE, seed).unwrap();
            for ties in [TieMethod::Efron, TieMethod::Breslow] {
                fd_check(Exponent::Neural(net.clone()), &matrix, &groups, ties);
            }
        }
    }

    #[test]
    fn efron_and_breslow_gradients_differ_on_ties() {
        let matrix =
            DesignMatrix::from_rows(&[vec![0.7], vec![0.0], vec![-0.4]]);
        let groups = vec![group(4, &[0, 1], &[0, 1, 2])];
        let model = Exponent::Linear(LinearExponent { beta: vec![0.5], l2_lambda: 0.0 });
        let efron = nll_gradient(&model, &matrix, &groups, TieMethod::Efron).unwrap();
        let breslow = nll_gradient(&model, &matrix, &groups, TieMethod::Breslow).unwrap();
        assert!((efron.grad[0] - breslow.grad[0]).abs() > 1e-6);
    }

    #[test]
    fn zero_learning_rate_leaves_model_unchanged() {
        let matrix = DesignMatrix::from_rows(&[vec![1.0], vec![0.0]]);
        let groups = vec![group(1, &[0], &[0, 1])];
        let model = Exponent::Linear(LinearExponent { beta: vec![0.25], l2_lambda: 0.0 });
        let cfg = TrainConfig { epochs: 10, lr: 0.0, ..TrainConfig::default() };
        let trained = train(model.clone(), &matrix, &groups, None, &cfg).unwrap();
        assert_eq!(trained.model, model);
    }

    #[test]
    fn separable_fixture_grows_beta_monotonically() {
        // One death with x=1 against a censored x=0: the gradient in beta is
        // exp(b)/(exp(b)+1) - 1 < 0, so beta rises every epoch.
        let matrix = DesignMatrix::from_rows(&[vec![1.0], vec![0.0]]);
        let groups = vec![group(5, &[0], &[0, 1])];
        let model = Exponent::Linear(LinearExponent::zeros(1, 0.0));
        let cfg = TrainConfig { epochs: 30, lr: 0.05, ..TrainConfig::default() };
        let trained = train(model, &matrix, &groups, None, &cfg).unwrap();
        let mut last = 0.0;
        let mut probe = Exponent::Linear(LinearExponent::zeros(1, 0.0));
        // Re-run epoch by epoch to watch the trajectory.
        for epochs in 1..=10 {
            let cfg = TrainConfig { epochs, lr: 0.05, ..TrainConfig::default() };
            let t = train(probe.clone(), &matrix, &groups, None, &cfg).unwrap();
            let beta = match &t.model {
                Exponent::Linear(l) => l.beta[0],
                _ => unreachable!(),
            };
            assert!(beta > last, "beta should increase: {beta} after {epochs} epochs");
            last = beta;
        }
        match &trained.model {
            Exponent::Linear(l) => assert!(l.beta[0] > 0.5),
            _ => unreachable!(),
        }
    }

    /// Small self-contained linear-truth cohort for the epoch-loop checks.
    fn linear_truth_instance(n: usize, seed: u64) -> (DesignMatrix, Vec<EventGroup>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let beta = [1.0, -0.5];
        let mut rows = Vec::with_capacity(n);
        let mut death_times: Vec<(usize, f64)> = Vec::with_capacity(n);
        for i in 0..n {
            let x: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let hazard = (beta[0] * x[0] + beta[1] * x[1]).exp() * 0.05;
            let u: f64 = rng.random_range(0.0..1.0);
            let t = -u.ln() / hazard;
            rows.push(x);
            death_times.push((i, t));
        }
        let matrix = DesignMatrix::from_rows(&rows);
        death_times.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
        let mut groups = Vec::new();
        for (rank, (i, _)) in death_times.iter().enumerate() {
            let risk: Vec<usize> = death_times[rank..].iter().map(|(j, _)| *j).collect();
            groups.push(EventGroup { time: rank as u64 + 1, deaths: vec![*i], risk });
        }
        (matrix, groups)
    }

    #[test]
    fn train_nll_is_nearly_monotone_on_linear_truth() {
        let (matrix, groups) = linear_truth_instance(80, 42);
        let model = Exponent::Linear(LinearExponent::zeros(2, 0.0));
        let cfg = TrainConfig { epochs: 60, lr: 0.02, ..TrainConfig::default() };
        let trained = train(model, &matrix, &groups, None, &cfg).unwrap();
        let nlls: Vec<f64> = trained.history.iter().map(|e| e.train_nll).collect();
        let decreases =
            nlls.windows(2).filter(|w| w[1] <= w[0] + 1e-12).count();
        let ratio = decreases as f64 / (nlls.len() - 1) as f64;
        assert!(ratio >= 0.95, "only {ratio:.2} of epochs non-increasing");
    }

    #[test]
    fn training_is_deterministic_under_seed() {
        let (matrix, groups) = linear_truth_instance(40, 7);
        let net = NeuralExponent::xavier(2, 8, 1, 0.2, DEFAULT_LEAKY_SLOPE, 3).unwrap();
        let cfg = TrainConfig { epochs: 5, lr: 0.01, seed: 11, ..TrainConfig::default() };
        let a = train(Exponent::Neural(net.clone()), &matrix, &groups, None, &cfg).unwrap();
        let b = train(Exponent::Neural(net), &matrix, &groups, None, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn paper_grids_enumerate_table_ranges() {
        let linear = paper_linear_grid();
        assert_eq!(linear.len(), 3);
        assert!(linear.contains(&CandidateConfig::Linear { l2_lambda: 0.1 }));
        let neural = paper_neural_grid();
        assert_eq!(neural.len(), 12);
        assert!(neural.contains(&selected_neural_config()));
        for c in &neural {
            match c {
                CandidateConfig::Neural { layers, n_dim, dropout_p } => {
                    assert!([1, 2].contains(layers));
                    assert!([64, 128, 256].contains(n_dim));
                    assert!([0.1, 0.2].contains(dropout_p));
                }
                _ => panic!("linear config in neural grid"),
            }
        }
    }

    #[test]
    fn exhaustive_search_visits_whole_grid_and_ranks_by_metric() {
        let (matrix, groups) = linear_truth_instance(30, 9);
        let grid = paper_linear_grid();
        let base = TrainConfig { epochs: 3, lr: 0.01, seed: 5, ..TrainConfig::default() };
        // Metric keyed on the regularisation strength actually trained with.
        let outcome = hyperparameter_search(
            &grid,
            &matrix,
            &groups,
            (&matrix, &groups),
            |model| match model {
                Exponent::Linear(l) => {
                    if (l.l2_lambda - 1.0).abs() < 1e-12 {
                        0.9
                    } else {
                        0.1
                    }
                }
                _ => 0.0,
            },
            &base,
            grid.len(),
        )
        .unwrap();
        assert_eq!(outcome.runs.len(), grid.len());
        assert_eq!(outcome.config, CandidateConfig::Linear { l2_lambda: 1.0 });
        assert_abs_diff_eq!(outcome.val_metric, 0.9);
    }

    #[test]
    fn search_budget_bounds_are_enforced() {
        let (matrix, groups) = linear_truth_instance(20, 1);
        let grid = paper_linear_grid();
        let base = TrainConfig { epochs: 2, lr: 0.01, ..TrainConfig::default() };
        let err = hyperparameter_search(
            &grid,
            &matrix,
            &groups,
            (&matrix, &groups),
            |_| 0.0,
            &base,
            0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        let err = hyperparameter_search(
            &grid,
            &matrix,
            &groups,
            (&matrix, &groups),
            |_| 0.0,
            &base,
            grid.len() + 1,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }
}
