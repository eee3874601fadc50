//! The two log-hazard exponents: a linear score `βᵀx` with optional ridge
//! penalty, and the bounded neural score
//! `tanh(W_out · LeakyReLU(W_1 x))` (optionally with a second hidden layer),
//! with exact forward/backward passes, Xavier-uniform initialization,
//! inverted dropout on the hidden activations, and the Adam update.
//!
//! No bias terms anywhere: the network is a composition of pure linear maps
//! and activations.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

/// Dense row-major weight matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let n_cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * n_cols);
        for r in rows {
            assert_eq!(r.len(), n_cols);
            data.extend_from_slice(r);
        }
        Mat { rows: rows.len(), cols: n_cols, data }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// y = A x
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        let mut y = vec![0.0; self.rows];
        for r in 0..self.rows {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            let mut acc = 0.0;
            for (w, v) in row.iter().zip(x) {
                acc += w * v;
            }
            y[r] = acc;
        }
        y
    }
}

/// Linear exponent `βᵀx`; `l2_lambda` is the ridge strength applied during
/// training (linear model only).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearExponent {
    pub beta: Vec<f64>,
    pub l2_lambda: f64,
}

impl LinearExponent {
    pub fn zeros(d: usize, l2_lambda: f64) -> Self {
        LinearExponent { beta: vec![0.0; d], l2_lambda }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.beta.iter().zip(x).map(|(b, v)| b * v).sum()
    }
}

/// Neural exponent `tanh(W_out · h_L)` where each hidden layer applies a
/// bias-free linear map, LeakyReLU, and (in train mode) inverted dropout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuralExponent {
    /// Hidden-layer weights: `hidden[0]` is `n_dim × d`, later layers
    /// `n_dim × n_dim`.
    pub hidden: Vec<Mat>,
    /// Output weights, `1 × n_dim`.
    pub output: Mat,
    pub leaky_slope: f64,
    pub dropout_p: f64,
}

/// Intermediate activations retained by a forward pass for the matching
/// backward pass; in train mode also the sampled dropout scales.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    x: Vec<f64>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
    /// Per-unit multiplier: 1 in eval mode, `1/(1-p)` or 0 in train mode.
    scale: Vec<Vec<f64>>,
    z_out: f64,
    phi: f64,
}

impl ForwardCache {
    pub fn phi(&self) -> f64 {
        self.phi
    }

    /// Pre-tanh output; exactly linear in the dropout mask, used by the
    /// dropout-expectation tests.
    pub fn pre_output(&self) -> f64 {
        self.z_out
    }
}

/// Gradient of φ with respect to every weight, same shapes as the model.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralGradient {
    pub hidden: Vec<Mat>,
    pub output: Mat,
}

fn check_finite(x: &[f64]) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite input to exponent"));
    }
    Ok(())
}

impl NeuralExponent {
    /// Xavier-uniform initialization: entries drawn from
    /// `±sqrt(6/(fan_in+fan_out))` per layer; deterministic under `seed`.
    pub fn xavier(
        d: usize,
        n_dim: usize,
        n_layers: usize,
        dropout_p: f64,
        leaky_slope: f64,
        seed: u64,
    ) -> Result<Self> {
        if d == 0 || n_dim == 0 || n_layers == 0 {
            return Err(Error::numeric("network dimensions must be at least 1"));
        }
        if !(0.0..1.0).contains(&dropout_p) {
            return Err(Error::numeric(format!("dropout probability {dropout_p} outside [0,1)")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fill = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            let mut m = Mat::zeros(rows, cols);
            for w in &mut m.data {
                *w = rng.random_range(-bound..=bound);
            }
            m
        };
        let mut hidden = Vec::with_capacity(n_layers);
        hidden.push(fill(n_dim, d, &mut rng));
        for _ in 1..n_layers {
            hidden.push(fill(n_dim, n_dim, &mut rng));
        }
        let output = fill(1, n_dim, &mut rng);
        Ok(NeuralExponent { hidden, output, leaky_slope, dropout_p })
    }

    pub fn input_dim(&self) -> usize {
        self.hidden[0].cols
    }

    pub fn n_layers(&self) -> usize {
        self.hidden.len()
    }

    fn forward_impl(&self, x: &[f64], mut dropout: Option<&mut ChaCha8Rng>) -> Result<ForwardCache> {
        check_finite(x)?;
        if x.len() != self.input_dim() {
            return Err(Error::numeric(format!(
                "input width {} does not match model width {}",
                x.len(),
                self.input_dim()
            )));
        }
        let keep = 1.0 - self.dropout_p;
        let mut pre = Vec::with_capacity(self.hidden.len());
        let mut post = Vec::with_capacity(self.hidden.len());
        let mut scale = Vec::with_capacity(self.hidden.len());
        let mut input = x.to_vec();
        for layer in &self.hidden {
            let z = layer.matvec(&input);
            let mut s = vec![1.0; z.len()];
            if let Some(rng) = dropout.as_deref_mut() {
                if self.dropout_p > 0.0 {
                    for si in &mut s {
                        *si = if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 };
                    }
                }
            }
            let h: Vec<f64> = z
                .iter()
                .zip(&s)
                .map(|(&zi, &si)| {
                    let a = if zi > 0.0 { zi } else { self.leaky_slope * zi };
                    a * si
                })
                .collect();
            pre.push(z);
            post.push(h.clone());
            scale.push(s);
            input = h;
        }
        let z_out = self.output.matvec(&input)[0];
        Ok(ForwardCache { x: x.to_vec(), pre, post, scale, z_out, phi: z_out.tanh() })
    }

    /// Eval-mode forward: no dropout mask, no scaling.
    pub fn forward_eval(&self, x: &[f64]) -> Result<ForwardCache> {
        self.forward_impl(x, None)
    }

    /// Train-mode forward: samples an inverted-dropout mask (keep probability
    /// `1-p`, kept units scaled by `1/(1-p)`) on each hidden activation.
    pub fn forward_train(&self, x: &[f64], rng: &mut ChaCha8Rng) -> Result<ForwardCache> {
        self.forward_impl(x, Some(rng))
    }

    /// Value of φ at `x` in eval mode.
    pub fn value(&self, x: &[f64]) -> f64 {
        self.forward_eval(x).expect("finite input").phi
    }

    /// Exact gradients of `upstream · φ` with respect to every weight and to
    /// the input, under the dropout mask cached by the forward pass.
    pub fn backward(&self, cache: &ForwardCache, upstream: f64) -> Result<(NeuralGradient, Vec<f64>)> {
        let mut grad = NeuralGradient {
            hidden: self.hidden.iter().map(|m| Mat::zeros(m.rows, m.cols)).collect(),
            output: Mat::zeros(1, self.output.cols),
        };
        let grad_x = self.backward_impl(cache, upstream, &mut |layer, r, c, g| match layer {
            None => grad.output.data[c] += g,
            Some(l) => {
                let cols = grad.hidden[l].cols;
                grad.hidden[l].data[r * cols + c] += g;
            }
        })?;
        Ok((grad, grad_x))
    }

    /// Backward pass accumulating the flat parameter gradient in place
    /// (layout matches [`Exponent::params`]); the training hot path.
    pub fn backward_accumulate(
        &self,
        cache: &ForwardCache,
        upstream: f64,
        acc: &mut [f64],
    ) -> Result<()> {
        let mut offsets = Vec::with_capacity(self.hidden.len() + 1);
        let mut off = 0;
        for m in &self.hidden {
            offsets.push(off);
            off += m.data.len();
        }
        let out_off = off;
        self.backward_impl(cache, upstream, &mut |layer, r, c, g| match layer {
            None => acc[out_off + c] += g,
            Some(l) => {
                let cols = self.hidden[l].cols;
                acc[offsets[l] + r * cols + c] += g;
            }
        })?;
        Ok(())
    }

    fn backward_impl(
        &self,
        cache: &ForwardCache,
        upstream: f64,
        sink: &mut dyn FnMut(Option<usize>, usize, usize, f64),
    ) -> Result<Vec<f64>> {
        if cache.x.len() != self.input_dim() || cache.pre.len() != self.hidden.len() {
            return Err(Error::numeric("forward cache does not match model shape"));
        }
        let g_out = upstream * (1.0 - cache.phi * cache.phi);
        let last = self.hidden.len() - 1;
        // Output layer: z_out = Σ_j w_j h_j.
        for (c, &h) in cache.post[last].iter().enumerate() {
            sink(None, 0, c, g_out * h);
        }
        let mut delta: Vec<f64> = self.output.data.iter().map(|w| g_out * w).collect();
        for l in (0..self.hidden.len()).rev() {
            let layer = &self.hidden[l];
            // Through dropout scaling and LeakyReLU.
            let delta_z: Vec<f64> = delta
                .iter()
                .enumerate()
                .map(|(i, &dh)| {
                    let act = if cache.pre[l][i] > 0.0 { 1.0 } else { self.leaky_slope };
                    dh * cache.scale[l][i] * act
                })
                .collect();
            let input: &[f64] = if l == 0 { &cache.x } else { &cache.post[l - 1] };
            for (r, &dz) in delta_z.iter().enumerate() {
                if dz != 0.0 {
                    for (c, &v) in input.iter().enumerate() {
                        sink(Some(l), r, c, dz * v);
                    }
                }
            }
            // Propagate to the layer input: deltaᵀ W.
            let mut next = vec![0.0; layer.cols];
            for (r, &dz) in delta_z.iter().enumerate() {
                if dz != 0.0 {
                    let row = &layer.data[r * layer.cols..(r + 1) * layer.cols];
                    for (c, &w) in row.iter().enumerate() {
                        next[c] += dz * w;
                    }
                }
            }
            delta = next;
        }
        Ok(delta)
    }
}

/// Either log-hazard exponent behind one interface; parameters flatten to a
/// single vector for the optimizer (hidden layers in order, then output, or
/// β for the linear model).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Exponent {
    Linear(LinearExponent),
    Neural(NeuralExponent),
}

impl Exponent {
    pub fn input_dim(&self) -> usize {
        match self {
            Exponent::Linear(m) => m.beta.len(),
            Exponent::Neural(m) => m.input_dim(),
        }
    }

    /// Eval-mode log-hazard value φ(x).
    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            Exponent::Linear(m) => m.value(x),
            Exponent::Neural(m) => m.value(x),
        }
    }

    /// Gradient of φ with respect to the input, in eval mode.
    pub fn grad_x(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            Exponent::Linear(m) => {
                check_finite(x)?;
                Ok(m.beta.clone())
            }
            Exponent::Neural(m) => {
                let cache = m.forward_eval(x)?;
                let (_, grad_x) = m.backward(&cache, 1.0)?;
                Ok(grad_x)
            }
        }
    }

    pub fn n_params(&self) -> usize {
        match self {
            Exponent::Linear(m) => m.beta.len(),
            Exponent::Neural(m) => {
                m.hidden.iter().map(|w| w.data.len()).sum::<usize>() + m.output.data.len()
            }
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match self {
            Exponent::Linear(m) => m.beta.clone(),
            Exponent::Neural(m) => {
                let mut flat = Vec::with_capacity(self.n_params());
                for w in &m.hidden {
                    flat.extend_from_slice(&w.data);
                }
                flat.extend_from_slice(&m.output.data);
                flat
            }
        }
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.n_params());
        match self {
            Exponent::Linear(m) => m.beta.copy_from_slice(flat),
            Exponent::Neural(m) => {
                let mut off = 0;
                for w in &mut m.hidden {
                    let len = w.data.len();
                    w.data.copy_from_slice(&flat[off..off + len]);
                    off += len;
                }
                m.output.data.copy_from_slice(&flat[off..]);
            }
        }
    }
}

/// Adam optimizer state: first/second moment accumulators shaped like the
/// flattened parameters, bias-corrected update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(n_params: usize, lr: f64) -> Self {
        AdamState {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    /// One bias-corrected Adam step in place. Training aborts on non-finite
    /// gradients rather than silently diverging.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::numeric("optimizer state does not match parameter count"));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::numeric("non-finite gradient"));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn tiny_net(w1: &[f64], w2: &[f64], d: usize, slope: f64) -> NeuralExponent {
        let n_dim = w1.len() / d;
        NeuralExponent {
            hidden: vec![Mat { rows: n_dim, cols: d, data: w1.to_vec() }],
            output: Mat { rows: 1, cols: n_dim, data: w2.to_vec() },
            leaky_slope: slope,
            dropout_p: 0.0,
        }
    }

    #[test]
    fn xavier_bounds_hold_for_each_layer() {
        let model = NeuralExponent::xavier(2, 4, 1, 0.0, DEFAULT_LEAKY_SLOPE, 9).unwrap();
        let bound = (6.0 / 6.0_f64).sqrt();
        assert!(model.hidden[0].data.iter().all(|w| w.abs() <= bound));
        let out_bound = (6.0 / 5.0_f64).sqrt();
        assert!(model.output.data.iter().all(|w| w.abs() <= out_bound));
    }

    #[test]
    fn xavier_is_deterministic_under_seed() {
        let a = NeuralExponent::xavier(3, 8, 2, 0.1, DEFAULT_LEAKY_SLOPE, 5).unwrap();
        let b = NeuralExponent::xavier(3, 8, 2, 0.1, DEFAULT_LEAKY_SLOPE, 5).unwrap();
        assert_eq!(a, b);
        let c = NeuralExponent::xavier(3, 8, 2, 0.1, DEFAULT_LEAKY_SLOPE, 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_weights_give_zero_phi() {
        let model = tiny_net(&[0.0, 0.0], &[0.0], 2, 0.01);
        assert_eq!(model.value(&[3.0, -4.0]), 0.0);
    }

    #[test]
    fn hand_forward_matches_chain() {
        // d=1, N_dim=1, W1=[1], W2=[1], slope 0.01, x=[-2]:
        // hidden pre = -2, LeakyReLU -> -0.02, phi = tanh(-0.02).
        let model = tiny_net(&[1.0], &[1.0], 1, 0.01);
        let cache = model.forward_eval(&[-2.0]).unwrap();
        assert_abs_diff_eq!(cache.pre[0][0], -2.0);
        assert_abs_diff_eq!(cache.post[0][0], -0.02, epsilon = 1e-15);
        assert_abs_diff_eq!(cache.phi(), (-0.02_f64).tanh(), epsilon = 1e-15);
        assert_abs_diff_eq!(cache.phi(), -0.0199973, epsilon = 1e-6);
    }

    #[test]
    fn hand_backward_matches_chain_rule() {
        let model = tiny_net(&[1.0], &[1.0], 1, 0.01);
        let cache = model.forward_eval(&[-2.0]).unwrap();
        let (_, grad_x) = model.backward(&cache, 1.0).unwrap();
        let expected = (1.0 - (-0.02_f64).tanh().powi(2)) * 1.0 * 0.01;
        assert_abs_diff_eq!(grad_x[0], expected, epsilon = 1e-15);
        assert_abs_diff_eq!(grad_x[0], 0.009996, epsilon = 1e-6);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let model = NeuralExponent::xavier(3, 4, 1, 0.0, DEFAULT_LEAKY_SLOPE, 2).unwrap();
        let cache = model.forward_eval(&[0.3, -0.7, 1.1]).unwrap();
        let (grad, grad_x) = model.backward(&cache, 0.0).unwrap();
        assert!(grad.hidden[0].data.iter().all(|g| *g == 0.0));
        assert!(grad.output.data.iter().all(|g| *g == 0.0));
        assert!(grad_x.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn phi_stays_inside_tanh_range() {
        let model = NeuralExponent::xavier(4, 16, 2, 0.0, DEFAULT_LEAKY_SLOPE, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-10.0..10.0)).collect();
            let phi = model.value(&x);
            assert!(phi.abs() < 1.0, "phi {phi} escaped (-1,1)");
        }
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let model = NeuralExponent::xavier(2, 2, 1, 0.0, DEFAULT_LEAKY_SLOPE, 1).unwrap();
        assert!(model.forward_eval(&[f64::NAN, 0.0]).is_err());
    }

    /// Central finite differences on φ itself; the module's core property.
    fn finite_diff_check(d: usize, n_dim: usize, layers: usize, seed: u64) {
        let model = NeuralExponent::xavier(d, n_dim, layers, 0.0, DEFAULT_LEAKY_SLOPE, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let cache = model.forward_eval(&x).unwrap();
        let (grad, grad_x) = model.backward(&cache, 1.0).unwrap();

        let mut exp = Exponent::Neural(model.clone());
        let params = exp.params();
        let h = 1e-5;
        let mut flat_analytic = Vec::new();
        for w in &grad.hidden {
            flat_analytic.extend_from_slice(&w.data);
        }
        flat_analytic.extend_from_slice(&grad.output.data);

        let mut numeric = vec![0.0; params.len()];
        for i in 0..params.len() {
            let mut plus = params.clone();
            plus[i] += h;
            exp.set_params(&plus);
            let f_plus = exp.value(&x);
            let mut minus = params.clone();
            minus[i] -= h;
            exp.set_params(&minus);
            let f_minus = exp.value(&x);
            numeric[i] = (f_plus - f_minus) / (2.0 * h);
        }
        exp.set_params(&params);

        let scale = flat_analytic
            .iter()
            .chain(numeric.iter())
            .fold(0.0_f64, |acc, v| acc.max(v.abs()))
            .max(1e-12);
        for (a, n) in flat_analytic.iter().zip(&numeric) {
            assert!((a - n).abs() / scale < 1e-6, "param grad {a} vs fd {n}");
        }

        let mut numeric_x = vec![0.0; d];
        for i in 0..d {
            let mut plus = x.clone();
            plus[i] += h;
            let mut minus = x.clone();
            minus[i] -= h;
            numeric_x[i] = (exp.value(&plus) - exp.value(&minus)) / (2.0 * h);
        }
        let scale_x = grad_x
            .iter()
            .chain(numeric_x.iter())
            .fold(0.0_f64, |acc, v| acc.max(v.abs()))
            .max(1e-12);
        for (a, n) in grad_x.iter().zip(&numeric_x) {
            assert!((a - n).abs() / scale_x < 1e-6, "input grad {a} vs fd {n}");
        }
    }

    #[test]
    fn gradients_match_finite_differences_across_shapes() {
        for (si, &(d, n_dim)) in [(1, 1), (1, 4), (3, 4), (3, 16), (8, 16), (8, 4)]
            .iter()
            .enumerate()
        {
            for rep in 0..20u64 {
                finite_diff_check(d, n_dim, 1, (si as u64) * 100 + rep);
            }
        }
        // Two hidden layers as used by the wider hyperparameter grid.
        for rep in 0..20u64 {
            finite_diff_check(3, 4, 2, 7000 + rep);
        }
    }

    #[test]
    fn dropout_expectation_matches_eval_on_pre_output() {
        let model = NeuralExponent::xavier(4, 8, 1, 0.2, DEFAULT_LEAKY_SLOPE, 11).unwrap();
        let x = [0.7, -1.3, 0.2, 2.1];
        let eval_cache = model.forward_eval(&x).unwrap();
        let eval_z = eval_cache.pre_output();
        let eval_phi = eval_cache.phi();

        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut sum_z = 0.0;
        let mut sum_z2 = 0.0;
        let mut sum_phi = 0.0;
        for _ in 0..n {
            let cache = model.forward_train(&x, &mut rng).unwrap();
            sum_z += cache.pre_output();
            sum_z2 += cache.pre_output() * cache.pre_output();
            sum_phi += cache.phi();
        }
        let mean_z = sum_z / n as f64;
        let var = (sum_z2 / n as f64 - mean_z * mean_z).max(0.0);
        let se = (var / n as f64).sqrt();
        // Pre-tanh the network is linear in the mask, so the inverted-dropout
        // expectation is exact.
        assert!(
            (mean_z - eval_z).abs() <= 3.0 * se,
            "mean {mean_z} vs eval {eval_z}, se {se}"
        );
        // Post-tanh only approximately; loose 5% band.
        let mean_phi = sum_phi / n as f64;
        assert!(
            (mean_phi - eval_phi).abs() <= 0.05 * eval_phi.abs().max(0.1),
            "mean phi {mean_phi} vs eval {eval_phi}"
        );
    }

    #[test]
    fn train_mode_gradient_matches_mask_held_fixed() {
        // Gradient correctness under dropout: compare against finite
        // differences of the network with the cached mask applied.
        let model = NeuralExponent::xavier(3, 6, 1, 0.35, DEFAULT_LEAKY_SLOPE, 21).unwrap();
        let x = [0.4, -0.9, 1.6];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cache = model.forward_train(&x, &mut rng).unwrap();
        let (grad, _) = model.backward(&cache, 1.0).unwrap();

        let masked_value = |m: &NeuralExponent| {
            let z = m.hidden[0].matvec(&x);
            let h: Vec<f64> = z
                .iter()
                .zip(&cache.scale[0])
                .map(|(&zi, &si)| (if zi > 0.0 { zi } else { m.leaky_slope * zi }) * si)
                .collect();
            m.output.matvec(&h)[0].tanh()
        };
        let h = 1e-6;
        for (idx, analytic) in grad.hidden[0].data.iter().enumerate() {
            let mut plus = model.clone();
            plus.hidden[0].data[idx] += h;
            let mut minus = model.clone();
            minus.hidden[0].data[idx] -= h;
            let fd = (masked_value(&plus) - masked_value(&minus)) / (2.0 * h);
            assert_abs_diff_eq!(*analytic, fd, epsilon = 1e-6);
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters_unchanged() {
        let mut params = vec![0.7, -0.3];
        let mut state = AdamState::new(2, 0.001);
        state.step(&mut params, &[0.0, 0.0]).unwrap();
        assert_eq!(params, vec![0.7, -0.3]);
    }

    #[test]
    fn adam_first_step_is_bias_corrected() {
        // θ=0, g=1: m̂ = 1, v̂ = 1, so θ' = -lr/(1+ε).
        let mut params = vec![0.0];
        let mut state = AdamState::new(1, 0.001);
        state.step(&mut params, &[1.0]).unwrap();
        assert_abs_diff_eq!(params[0], -0.001 / (1.0 + 1e-8), epsilon = 1e-15);
        assert_abs_diff_eq!(params[0], -0.001, epsilon = 1e-9);
    }

    #[test]
    fn adam_step_magnitude_converges_to_lr_on_constant_gradient() {
        let mut params = vec![0.0];
        let mut state = AdamState::new(1, 0.001);
        let mut prev = params[0];
        let mut last_step = 0.0;
        for _ in 0..500 {
            state.step(&mut params, &[2.5]).unwrap();
            last_step = (params[0] - prev).abs();
            prev = params[0];
        }
        assert_abs_diff_eq!(last_step, 0.001, epsilon = 1e-6);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut params = vec![0.0];
        let mut state = AdamState::new(1, 0.001);
        assert!(state.step(&mut params, &[f64::NAN]).is_err());
    }

    #[test]
    fn flat_params_round_trip_through_exponent() {
        let model = NeuralExponent::xavier(3, 4, 2, 0.1, DEFAULT_LEAKY_SLOPE, 8).unwrap();
        let mut exp = Exponent::Neural(model);
        let flat = exp.params();
        assert_eq!(flat.len(), exp.n_params());
        let doubled: Vec<f64> = flat.iter().map(|w| w * 2.0).collect();
        exp.set_params(&doubled);
        assert_eq!(exp.params(), doubled);
    }
}
