//! Training objectives and tail-risk measures.
//!
//! The mixture head emits a flat raw vector laid out as
//! `[logits (M) | means (M·D) | log-variances (M·D)]` for `M` modes over a
//! `D`-dimensional target. Everything here works in normalized target units.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::Normalizer;

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("cannot take CVaR of an empty loss vector")]
    Empty,
    #[error("CVaR alpha must be in [0, 1), got {0}")]
    BadAlpha(f64),
    #[error("batch of {batch} is too small for alpha {alpha}: need at least {min} samples")]
    BatchTooSmall { batch: usize, alpha: f64, min: usize },
    #[error("non-finite loss value at index {0}")]
    NonFinite(usize),
}

/// Shape of a Gaussian-mixture output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GmmLayout {
    pub modes: usize,
    pub dim: usize,
}

impl GmmLayout {
    pub fn new(modes: usize, dim: usize) -> Self {
        assert!(modes >= 1 && dim >= 1);
        Self { modes, dim }
    }

    pub fn raw_len(&self) -> usize {
        self.modes * (1 + 2 * self.dim)
    }

    pub fn mu_offset(&self, mode: usize) -> usize {
        self.modes + mode * self.dim
    }

    pub fn log_var_offset(&self, mode: usize) -> usize {
        self.modes + self.modes * self.dim + mode * self.dim
    }

    /// Index range of all log-variance entries.
    pub fn log_var_range(&self) -> std::ops::Range<usize> {
        self.log_var_offset(0)..self.raw_len()
    }
}

/// Structured view of one mixture prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmParams {
    pub log_pi: Vec<f64>,
    pub mu: Vec<Vec<f64>>,
    pub log_var: Vec<Vec<f64>>,
}

impl GmmParams {
    pub fn layout(&self) -> GmmLayout {
        GmmLayout::new(self.log_pi.len(), self.mu[0].len())
    }

    pub fn from_raw(raw: &[f64], layout: GmmLayout) -> Self {
        assert_eq!(raw.len(), layout.raw_len());
        let (m, d) = (layout.modes, layout.dim);
        Self {
            log_pi: raw[..m].to_vec(),
            mu: (0..m).map(|k| raw[layout.mu_offset(k)..layout.mu_offset(k) + d].to_vec()).collect(),
            log_var: (0..m)
                .map(|k| raw[layout.log_var_offset(k)..layout.log_var_offset(k) + d].to_vec())
                .collect(),
        }
    }

    pub fn to_raw(&self) -> Vec<f64> {
        let mut raw = self.log_pi.clone();
        for mu in &self.mu {
            raw.extend_from_slice(mu);
        }
        for lv in &self.log_var {
            raw.extend_from_slice(lv);
        }
        raw
    }

    /// Mixing coefficients, softmax of the logits.
    pub fn weights(&self) -> Vec<f64> {
        softmax(&self.log_pi)
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|x| (x - lse).exp()).collect()
}

/// Negative log-likelihood of `target` under the mixture in `raw`, with its
/// gradient with respect to `raw` written into `grad` (overwritten).
pub fn gmm_nll_raw(raw: &[f64], layout: GmmLayout, target: &[f64], grad: &mut [f64]) -> f64 {
    let (m, d) = (layout.modes, layout.dim);
    debug_assert_eq!(raw.len(), layout.raw_len());
    debug_assert_eq!(target.len(), d);
    debug_assert_eq!(grad.len(), raw.len());
    let logits = &raw[..m];
    let lse_pi = log_sum_exp(logits);
    let mut comp = vec![0.0; m];
    for k in 0..m {
        let mu = &raw[layout.mu_offset(k)..layout.mu_offset(k) + d];
        let lv = &raw[layout.log_var_offset(k)..layout.log_var_offset(k) + d];
        let mut quad = 0.0;
        for j in 0..d {
            let r = target[j] - mu[j];
            quad += r * r * (-lv[j]).exp() + lv[j] + LN_2PI;
        }
        comp[k] = logits[k] - lse_pi - 0.5 * quad;
    }
    let lse = log_sum_exp(&comp);
    for k in 0..m {
        let resp = (comp[k] - lse).exp();
        let pi = (logits[k] - lse_pi).exp();
        grad[k] = pi - resp;
        let mo = layout.mu_offset(k);
        let vo = layout.log_var_offset(k);
        for j in 0..d {
            let r = target[j] - raw[mo + j];
            let inv_var = (-raw[vo + j]).exp();
            grad[mo + j] = -resp * r * inv_var;
            grad[vo + j] = 0.5 * resp * (1.0 - r * r * inv_var);
        }
    }
    -lse
}

/// Loss value and gradient for a structured mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmLoss {
    pub loss: f64,
    pub grad: GmmParams,
}

pub fn gmm_nll(params: &GmmParams, target: &[f64]) -> GmmLoss {
    let layout = params.layout();
    let raw = params.to_raw();
    let mut grad = vec![0.0; raw.len()];
    let loss = gmm_nll_raw(&raw, layout, target, &mut grad);
    GmmLoss { loss, grad: GmmParams::from_raw(&grad, layout) }
}

/// Zeroes the log-variance gradient while `epoch < freeze_epochs`.
pub fn sigma_freeze(grad: &mut [f64], layout: GmmLayout, epoch: usize, freeze_epochs: usize) {
    if epoch < freeze_epochs {
        grad[layout.log_var_range()].fill(0.0);
    }
}

/// Index of the mode with the largest mixing coefficient; ties go to the
/// lowest index.
pub fn dominant_mode(raw: &[f64], layout: GmmLayout) -> usize {
    let logits = &raw[..layout.modes];
    let mut best = 0;
    for k in 1..layout.modes {
        if logits[k] > logits[best] {
            best = k;
        }
    }
    best
}

/// Mean of the dominant mode mapped back to physical units as (x, y) pairs.
pub fn select_trajectory(raw: &[f64], layout: GmmLayout, normalizer: &Normalizer) -> Vec<[f64; 2]> {
    let k = dominant_mode(raw, layout);
    let mu = &raw[layout.mu_offset(k)..layout.mu_offset(k) + layout.dim];
    pairs(&normalizer.invert(mu))
}

/// Reshapes a flat (x0, y0, x1, y1, ...) vector into points.
pub fn pairs(flat: &[f64]) -> Vec<[f64; 2]> {
    flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect()
}

/// Mean squared error over dimensions and its gradient.
pub fn mse(pred: &[f64], target: &[f64], grad: &mut [f64]) -> f64 {
    let n = pred.len() as f64;
    let mut loss = 0.0;
    for i in 0..pred.len() {
        let r = pred[i] - target[i];
        loss += r * r;
        grad[i] = 2.0 * r / n;
    }
    loss / n
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MultiTaskWeights {
    pub w_traj: f64,
    pub w_aff: f64,
}

impl Default for MultiTaskWeights {
    fn default() -> Self {
        Self { w_traj: 1.0, w_aff: 0.3 }
    }
}

pub fn multitask_loss(traj_loss: f64, aff_loss: f64, weights: &MultiTaskWeights) -> f64 {
    weights.w_traj * traj_loss + weights.w_aff * aff_loss
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvarConfig {
    pub alpha: f64,
}

impl Default for CvarConfig {
    fn default() -> Self {
        Self { alpha: 0.9 }
    }
}

// αN is computed in floating point; 0.9 · 10 must count as exactly 9.
const COUNT_SLACK: f64 = 1e-9;

fn check_alpha(alpha: f64) -> Result<(), LossError> {
    if (0.0..1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(LossError::BadAlpha(alpha))
    }
}

/// Rank (1-based) of the order statistic used as the empirical quantile:
/// ⌈αN⌉, or 0 when α = 0 (no threshold).
pub fn quantile_rank(n: usize, alpha: f64) -> usize {
    ((alpha * n as f64 - COUNT_SLACK).ceil().max(0.0) as usize).min(n)
}

/// Smallest batch for which the tail mask is guaranteed nonempty.
pub fn min_batch_size(alpha: f64) -> usize {
    ((1.0 / (1.0 - alpha)) - COUNT_SLACK).ceil().max(1.0) as usize
}

/// Sample order by (loss, index).
fn sorted_order(losses: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..losses.len()).collect();
    idx.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]).then(a.cmp(&b)));
    idx
}

fn tail_mask_sorted(losses: &[f64], order: &[usize], alpha: f64) -> Vec<bool> {
    let n = losses.len();
    let rank = quantile_rank(n, alpha);
    if rank == 0 {
        return vec![true; n];
    }
    let nu = losses[order[rank - 1]];
    let mut mask: Vec<bool> = losses.iter().map(|&l| l > nu).collect();
    if !mask.iter().any(|&m| m) {
        // Every loss at or below the quantile (ties at the top): fall back
        // to the top ⌈(1-α)N⌉ order statistics.
        let top = (((1.0 - alpha) * n as f64 - COUNT_SLACK).ceil().max(1.0) as usize).min(n);
        for &i in &order[n - top..] {
            mask[i] = true;
        }
    }
    mask
}

fn masked_mean(losses: &[f64], mask: &[bool]) -> f64 {
    let (sum, count) = losses
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .fold((0.0, 0usize), |(s, c), (l, _)| (s + l, c + 1));
    sum / count as f64
}

fn check_losses(losses: &[f64]) -> Result<(), LossError> {
    if losses.is_empty() {
        return Err(LossError::Empty);
    }
    if let Some(i) = losses.iter().position(|l| !l.is_finite()) {
        return Err(LossError::NonFinite(i));
    }
    Ok(())
}

/// Selects the samples whose loss lies strictly above the empirical
/// α-quantile ν̂ = ⌈αN⌉-th smallest loss (all samples when α = 0; the top
/// ⌈(1-α)N⌉ when ties leave nothing strictly above).
pub fn cvar_tail_mask(losses: &[f64], alpha: f64) -> Result<Vec<bool>, LossError> {
    check_alpha(alpha)?;
    check_losses(losses)?;
    Ok(tail_mask_sorted(losses, &sorted_order(losses), alpha))
}

/// Empirical CVaR: mean of the losses selected by [`cvar_tail_mask`].
pub fn cvar_estimate(losses: &[f64], alpha: f64) -> Result<f64, LossError> {
    let mask = cvar_tail_mask(losses, alpha)?;
    Ok(masked_mean(losses, &mask))
}

/// Tail mask for a training batch; rejects batches too small to guarantee a
/// nonempty tail.
pub fn cvar_batch_mask(losses: &[f64], alpha: f64) -> Result<Vec<bool>, LossError> {
    check_alpha(alpha)?;
    let min = min_batch_size(alpha);
    if losses.len() < min {
        return Err(LossError::BatchTooSmall { batch: losses.len(), alpha, min });
    }
    cvar_tail_mask(losses, alpha)
}

/// CVaR at percentiles 0, 5, ..., 95.
pub fn cvar_percentile_curve(losses: &[f64]) -> Result<Vec<(u32, f64)>, LossError> {
    check_losses(losses)?;
    let order = sorted_order(losses);
    Ok((0..20u32)
        .map(|i| {
            let p = 5 * i;
            let mask = tail_mask_sorted(losses, &order, p as f64 / 100.0);
            (p, masked_mean(losses, &mask))
        })
        .collect())
}

/// Result of checking the tail-conditional gradient estimator against finite
/// differences of the empirical CVaR itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvarGradientReport {
    pub dimension: usize,
    pub alpha: f64,
    pub n_samples: usize,
    pub theta: Vec<f64>,
    pub estimator: Vec<f64>,
    pub finite_difference: Vec<f64>,
    pub relative_error: f64,
}

/// Quadratic-Gaussian test family: L(θ; z) = ½‖θ − z‖², z ~ N(0, I).
pub struct QuadraticGaussian {
    pub dimension: usize,
    z: Vec<f64>,
}

impl QuadraticGaussian {
    pub fn sample(dimension: usize, n_samples: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = (0..dimension * n_samples).map(|_| StandardNormal.sample(&mut rng)).collect();
        Self { dimension, z }
    }

    pub fn n_samples(&self) -> usize {
        self.z.len() / self.dimension
    }

    pub fn losses(&self, theta: &[f64]) -> Vec<f64> {
        self.z
            .chunks_exact(self.dimension)
            .map(|z| 0.5 * z.iter().zip(theta).map(|(zi, ti)| (ti - zi).powi(2)).sum::<f64>())
            .collect()
    }

    /// Mean per-sample gradient θ − z over the CVaR tail.
    pub fn tail_gradient(&self, theta: &[f64], alpha: f64) -> Result<Vec<f64>, LossError> {
        let losses = self.losses(theta);
        let mask = cvar_tail_mask(&losses, alpha)?;
        let mut g = vec![0.0; self.dimension];
        let mut count = 0usize;
        for (z, _) in self.z.chunks_exact(self.dimension).zip(&mask).filter(|(_, &m)| m) {
            for j in 0..self.dimension {
                g[j] += theta[j] - z[j];
            }
            count += 1;
        }
        g.iter_mut().for_each(|v| *v /= count as f64);
        Ok(g)
    }

    pub fn cvar(&self, theta: &[f64], alpha: f64) -> Result<f64, LossError> {
        cvar_estimate(&self.losses(theta), alpha)
    }
}

/// Compares the masked-gradient CVaR estimator with central finite
/// differences of the empirical CVaR on a common sample.
pub fn mc_verify_cvar_gradient(
    dimension: usize,
    alpha: f64,
    n_samples: usize,
    seed: u64,
) -> Result<CvarGradientReport, LossError> {
    let family = QuadraticGaussian::sample(dimension, n_samples, seed);
    let theta: Vec<f64> = (0..dimension).map(|j| 1.0 - 0.75 * j as f64).collect();
    let estimator = family.tail_gradient(&theta, alpha)?;
    let h = 1e-4;
    let mut finite_difference = vec![0.0; dimension];
    for j in 0..dimension {
        let mut plus = theta.clone();
        plus[j] += h;
        let mut minus = theta.clone();
        minus[j] -= h;
        finite_difference[j] = (family.cvar(&plus, alpha)? - family.cvar(&minus, alpha)?) / (2.0 * h);
    }
    let diff = l2(&estimator.iter().zip(&finite_difference).map(|(a, b)| a - b).collect::<Vec<_>>());
    let relative_error = diff / l2(&finite_difference).max(1e-12);
    Ok(CvarGradientReport { dimension, alpha, n_samples, theta, estimator, finite_difference, relative_error })
}

/// Minimizes the empirical one-dimensional CVaR over θ by golden-section
/// search and returns (θ*, estimator at θ*).
pub fn cvar_stationary_point(
    family: &QuadraticGaussian,
    alpha: f64,
    lo: f64,
    hi: f64,
) -> Result<(f64, f64), LossError> {
    assert_eq!(family.dimension, 1);
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    let (mut a, mut b) = (lo, hi);
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let mut fc = family.cvar(&[c], alpha)?;
    let mut fd = family.cvar(&[d], alpha)?;
    while b - a > 1e-7 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = family.cvar(&[c], alpha)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = family.cvar(&[d], alpha)?;
        }
    }
    let theta = 0.5 * (a + b);
    Ok((theta, family.tail_gradient(&[theta], alpha)?[0]))
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn single_gaussian_reduces_to_half_squared_error() {
        let y = [0.3, -1.2, 2.0];
        let mu = vec![0.1, 0.4, -0.5];
        let p = GmmParams { log_pi: vec![0.0], mu: vec![mu.clone()], log_var: vec![vec![0.0; 3]] };
        let out = gmm_nll(&p, &y);
        let sq: f64 = y.iter().zip(&mu).map(|(a, b)| (a - b).powi(2)).sum();
        assert_abs_diff_eq!(out.loss, 0.5 * sq + 1.5 * LN_2PI, epsilon = 1e-12);
        for j in 0..3 {
            assert_abs_diff_eq!(out.grad.mu[0][j], mu[j] - y[j], epsilon = 1e-12);
        }
        assert_abs_diff_eq!(out.grad.log_pi[0], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn symmetric_modes_have_zero_logit_gradient() {
        let p = GmmParams {
            log_pi: vec![0.2, 0.2],
            mu: vec![vec![1.5, -0.5], vec![-1.5, 0.5]],
            log_var: vec![vec![0.3, 0.3], vec![0.3, 0.3]],
        };
        let out = gmm_nll(&p, &[0.0, 0.0]);
        assert_abs_diff_eq!(out.grad.log_pi[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(out.grad.log_pi[1], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn extreme_log_variances_stay_finite() {
        for lv in [-30.0, 30.0] {
            let p = GmmParams {
                log_pi: vec![0.0, 5.0],
                mu: vec![vec![3.0; 4], vec![-3.0; 4]],
                log_var: vec![vec![lv; 4], vec![lv; 4]],
            };
            let out = gmm_nll(&p, &[0.5; 4]);
            assert!(out.loss.is_finite());
            assert!(out.grad.to_raw().iter().all(|g| g.is_finite()));
        }
    }

    #[test]
    fn freeze_schedule() {
        let layout = GmmLayout::new(2, 3);
        let base: Vec<f64> = (0..layout.raw_len()).map(|i| i as f64 + 1.0).collect();
        let mut g = base.clone();
        sigma_freeze(&mut g, layout, 0, 5);
        assert!(g[layout.log_var_range()].iter().all(|&v| v == 0.0));
        assert_eq!(&g[..layout.log_var_offset(0)], &base[..layout.log_var_offset(0)]);
        let mut g = base.clone();
        sigma_freeze(&mut g, layout, 5, 5);
        assert_eq!(g, base);
        let mut g = base.clone();
        sigma_freeze(&mut g, layout, 0, 0);
        assert_eq!(g, base);
    }

    #[test]
    fn mode_selection() {
        let layout = GmmLayout::new(2, 2);
        let norm = Normalizer::identity(2);
        let mut raw = vec![0.0; layout.raw_len()];
        raw[0] = 0.7f64.ln();
        raw[1] = 0.3f64.ln();
        raw[2..4].copy_from_slice(&[1.0, 2.0]);
        raw[4..6].copy_from_slice(&[3.0, 4.0]);
        assert_eq!(select_trajectory(&raw, layout, &norm), vec![[1.0, 2.0]]);
        raw[0] = 0.5f64.ln();
        raw[1] = 0.5f64.ln();
        assert_eq!(dominant_mode(&raw, layout), 0);
        raw[0] = 0.2;
        raw[1] = 0.9;
        let shifted: Vec<f64> = raw.iter().enumerate().map(|(i, v)| if i < 2 { v + 40.0 } else { *v }).collect();
        assert_eq!(dominant_mode(&raw, layout), dominant_mode(&shifted, layout));
        assert_eq!(select_trajectory(&raw, layout, &norm), vec![[3.0, 4.0]]);
    }

    #[test]
    fn cvar_examples() {
        let l: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(cvar_estimate(&l, 0.9).unwrap(), 10.0);
        let mask = cvar_batch_mask(&l, 0.9).unwrap();
        assert_eq!(mask.iter().filter(|&&m| m).count(), 1);
        assert!(mask[9]);
        assert_eq!(cvar_estimate(&l, 0.0).unwrap(), 5.5);
        assert!(cvar_batch_mask(&l, 0.0).unwrap().iter().all(|&m| m));
        assert_eq!(cvar_estimate(&[2.5; 7], 0.9).unwrap(), 2.5);
        assert_eq!(cvar_estimate(&[], 0.5), Err(LossError::Empty));
        assert!(matches!(cvar_batch_mask(&l[..9], 0.9), Err(LossError::BatchTooSmall { min: 10, .. })));
        assert_eq!(min_batch_size(0.9), 10);
        assert_eq!(min_batch_size(0.0), 1);
    }

    #[test]
    fn percentile_curve_on_one_to_hundred() {
        let l: Vec<f64> = (1..=100).map(f64::from).collect();
        let curve = cvar_percentile_curve(&l).unwrap();
        assert_eq!(curve.len(), 20);
        assert_eq!(curve[0], (0, 50.5));
        assert_eq!(curve[18], (90, 95.5));
        let flat = cvar_percentile_curve(&[3.0; 50]).unwrap();
        assert!(flat.iter().all(|&(_, v)| v == 3.0));
    }

    #[test]
    fn mc_alpha_zero_matches_mean_gradient() {
        let r = mc_verify_cvar_gradient(2, 0.0, 10_000, 3).unwrap();
        assert!(r.relative_error < 1e-6, "{r:?}");
    }

    #[test]
    fn stationary_point_has_small_estimator() {
        let family = QuadraticGaussian::sample(1, 200_000, 11);
        let (theta, g) = cvar_stationary_point(&family, 0.9, -2.0, 2.0).unwrap();
        assert!(theta.abs() < 0.05, "theta {theta}");
        assert!(g.abs() < 1e-2, "gradient {g}");
    }

    proptest! {
        #[test]
        fn gmm_is_permutation_invariant(
            raw in proptest::collection::vec(-2.0f64..2.0, 3 * (1 + 2 * 2)),
            y in proptest::collection::vec(-2.0f64..2.0, 2),
        ) {
            let layout = GmmLayout::new(3, 2);
            let p = GmmParams::from_raw(&raw, layout);
            let perm = [2usize, 0, 1];
            let q = GmmParams {
                log_pi: perm.iter().map(|&k| p.log_pi[k]).collect(),
                mu: perm.iter().map(|&k| p.mu[k].clone()).collect(),
                log_var: perm.iter().map(|&k| p.log_var[k].clone()).collect(),
            };
            prop_assert!((gmm_nll(&p, &y).loss - gmm_nll(&q, &y).loss).abs() < 1e-12);
        }

        #[test]
        fn percentile_curve_is_monotone(l in proptest::collection::vec(-50.0f64..50.0, 1..300)) {
            let curve = cvar_percentile_curve(&l).unwrap();
            for w in curve.windows(2) {
                prop_assert!(w[1].1 >= w[0].1 - 1e-12);
            }
            let mean = l.iter().sum::<f64>() / l.len() as f64;
            prop_assert!((curve[0].1 - mean).abs() < 1e-9);
        }

        #[test]
        fn mixture_weights_sum_to_one(logits in proptest::collection::vec(-300.0f64..300.0, 1..8)) {
            let w = softmax(&logits);
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(w.iter().all(|&p| p >= 0.0));
        }

        #[test]
        fn cvar_lies_between_mean_and_max(l in proptest::collection::vec(-50.0f64..50.0, 1..300), alpha in 0.0f64..0.99) {
            let c = cvar_estimate(&l, alpha).unwrap();
            let mean = l.iter().sum::<f64>() / l.len() as f64;
            let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(c >= mean - 1e-9 && c <= max + 1e-9);
        }
    }
}
