//! Self-verification oracles run by `traj-clone verify`.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::expert::derive_seed;
use crate::harness::train::{Hyper, Prepared, Reduction, Split, Trainer};
use crate::harness::HarnessError;
use crate::losses::{
    cvar_estimate, cvar_percentile_curve, gmm_nll, gmm_nll_raw, mc_verify_cvar_gradient, mse, GmmLayout, GmmParams,
    MultiTaskWeights,
};
use crate::network::{AdamConfig, HeadKind, InputScaling, NetSpec, Network, Normalizer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Worst observed error (or the headline statistic of the check).
    pub value: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl CheckResult {
    fn below(name: &str, value: f64, tolerance: f64, detail: String) -> Self {
        Self { name: name.into(), passed: value < tolerance, value, tolerance, detail }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn lines(&self) -> Vec<String> {
        self.checks
            .iter()
            .map(|c| {
                format!(
                    "{} {}: {:.3e} (tol {:.1e}) {}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.value,
                    c.tolerance,
                    c.detail
                )
            })
            .collect()
    }
}

/// Central-difference check of the whole GMM pipeline: network, mixture
/// transforms and NLL, with an affordance MSE term on a second head.
/// Returns the worst per-parameter relative error over `draws` random draws.
pub fn gradient_check(draws: usize, seed: u64) -> Result<f64, HarnessError> {
    let layout = GmmLayout::new(2, 4);
    let spec = NetSpec {
        input_dim: 5,
        fusion_layers: vec![7, 6],
        heads: vec![HeadKind::Gmm { modes: 2, dim: 4 }, HeadKind::Affordance { dim: 3 }],
    };
    let net = Network::new(spec)?;
    let w_aff = 0.3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..draws {
        let p: Vec<f64> = (0..net.n_params()).map(|_| rng.random_range(-0.8..0.8)).collect();
        let x: Vec<f64> = (0..5).map(|_| rng.random_range(-1.5..1.5)).collect();
        let y: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let a: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let objective = |p: &[f64]| -> Result<(f64, Vec<f64>, Vec<f64>), HarnessError> {
            let c = net.forward(p, &x)?;
            let mut g_gmm = vec![0.0; layout.raw_len()];
            let mut g_aff = vec![0.0; 3];
            let l = gmm_nll_raw(&c.output(0, 0), layout, &y, &mut g_gmm) + w_aff * mse(&c.output(1, 0), &a, &mut g_aff);
            Ok((l, g_gmm, g_aff))
        };
        let (_, g_gmm, g_aff) = objective(&p)?;
        let cache = net.forward(&p, &x)?;
        let up = [
            Some(DMatrix::from_column_slice(g_gmm.len(), 1, &g_gmm)),
            Some(DMatrix::from_iterator(3, 1, g_aff.iter().map(|g| w_aff * g))),
        ];
        let analytic = net.backward(&p, &cache, &up)?;
        // Fourth-order central stencil: truncation and round-off both stay
        // far below the tolerance at this step.
        let h = 1e-4;
        let at = |i: usize, step: f64| -> Result<f64, HarnessError> {
            let mut q = p.clone();
            q[i] += step;
            Ok(objective(&q)?.0)
        };
        for i in 0..p.len() {
            let fd = (8.0 * (at(i, h)? - at(i, -h)?) - (at(i, 2.0 * h)? - at(i, -2.0 * h)?)) / (12.0 * h);
            let scale = fd.abs().max(analytic[i].abs()).max(1e-6);
            let e = (fd - analytic[i]).abs() / scale;
            worst = worst.max(e);
        }
    }
    Ok(worst)
}

/// Mixture density evaluated term by term, no log-space tricks.
fn direct_nll(params: &GmmParams, y: &[f64]) -> f64 {
    let pi = params.weights();
    let mut density = 0.0;
    for k in 0..pi.len() {
        let mut comp = pi[k];
        for j in 0..y.len() {
            let var = params.log_var[k][j].exp();
            comp *= (-(y[j] - params.mu[k][j]).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt();
        }
        density += comp;
    }
    -density.ln()
}

/// Worst absolute gap between the mixture NLL and direct density evaluation.
pub fn gmm_oracle(cases: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let layout = GmmLayout::new(rng.random_range(1..=3), rng.random_range(1..=3));
        let raw: Vec<f64> = (0..layout.raw_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..layout.dim).map(|_| rng.random_range(-1.5..1.5)).collect();
        let params = GmmParams::from_raw(&raw, layout);
        worst = worst.max((gmm_nll(&params, &y).loss - direct_nll(&params, &y)).abs());
    }
    worst
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvarOracleOutcome {
    pub worst_gap: f64,
    pub alpha0_exact: bool,
    pub curves_monotone: bool,
}

/// Empirical CVaR against a sort-and-average conditional tail mean.
pub fn cvar_oracle(vectors: usize, seed: u64) -> Result<CvarOracleOutcome, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = CvarOracleOutcome { worst_gap: 0.0, alpha0_exact: true, curves_monotone: true };
    for _ in 0..vectors {
        let n = rng.random_range(1..200usize);
        let l: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let mut sorted = l.clone();
        sorted.sort_by(f64::total_cmp);
        for alpha in [0.1, 0.5, 0.75, 0.9, 0.95] {
            let rank = (alpha * n as f64 - 1e-9).ceil() as usize;
            let tail: Vec<f64> = if rank == 0 {
                sorted.clone()
            } else {
                let above: Vec<f64> = sorted.iter().copied().filter(|&x| x > sorted[rank - 1]).collect();
                if above.is_empty() { vec![sorted[n - 1]] } else { above }
            };
            let brute = tail.iter().sum::<f64>() / tail.len() as f64;
            let got = cvar_estimate(&l, alpha)?;
            out.worst_gap = out.worst_gap.max((got - brute).abs() / brute.abs().max(1.0));
        }
        let mean = l.iter().sum::<f64>() / n as f64;
        out.alpha0_exact &= cvar_estimate(&l, 0.0)? == mean;
        let curve = cvar_percentile_curve(&l)?;
        out.curves_monotone &= curve.windows(2).all(|w| w[1].1 >= w[0].1);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BimodalOutcome {
    /// Component means sorted ascending, averaged over held-out inputs.
    pub modes: [f64; 2],
    /// Weight of the lower mode.
    pub pi_low: f64,
    /// Mean prediction of the L2 head.
    pub l2_mean: f64,
}

/// Inputs carry no information about the side: y = ±3 with equal odds.
fn left_right_split(n: usize, rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut inputs = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for _ in 0..n {
        inputs.push((0..4).map(|_| StandardNormal.sample(rng)).collect());
        let side = if rng.random_bool(0.5) { 3.0 } else { -3.0 };
        let jitter: f64 = StandardNormal.sample(rng);
        targets.push(vec![side + 0.05 * jitter]);
    }
    (inputs, targets)
}

fn synthetic_prepared(head: HeadKind, seed: u64) -> Prepared {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (ti, tt) = left_right_split(4000, &mut rng);
    let (vi, vt) = left_right_split(400, &mut rng);
    let split = |inputs, targets| Split { inputs, targets: BTreeMap::from([(head.name().to_string(), targets)]) };
    Prepared {
        spec: NetSpec { input_dim: 4, fusion_layers: vec![16], heads: vec![head] },
        scaling: InputScaling::new(3, 1.0, 1.0),
        k: 1,
        dt_label: 0.3,
        normalizers: BTreeMap::from([(head.name().to_string(), Normalizer::identity(1))]),
        train: split(ti, tt),
        val: split(vi, vt),
    }
}

/// Trains a K=2 mixture head and an L2 head on the left/right dataset.
pub fn bimodal_recovery(seed: u64) -> Result<BimodalOutcome, HarnessError> {
    let hyper = Hyper {
        adam: AdamConfig { lr: 3e-3, ..AdamConfig::default() },
        batch_size: 64,
        clip_norm: 10.0,
        freeze_epochs: 5,
        weights: MultiTaskWeights { w_traj: 1.0, w_aff: 0.0 },
    };
    let epochs = 40;
    let gmm_data = synthetic_prepared(HeadKind::Gmm { modes: 2, dim: 1 }, seed);
    let mut gmm = Trainer::new(&gmm_data, hyper, derive_seed(seed, &[1]))?;
    let l2_data = synthetic_prepared(HeadKind::Linear { dim: 1 }, seed);
    let mut l2 = Trainer::new(&l2_data, hyper, derive_seed(seed, &[2]))?;
    for _ in 0..epochs {
        gmm.run_epoch(Reduction::Mean, "train")?;
        l2.run_epoch(Reduction::Mean, "train")?;
    }
    let layout = GmmLayout::new(2, 1);
    let inputs = &gmm_data.val.inputs;
    let cache = gmm.net.forward_batch(&gmm.params.values, inputs)?;
    let (mut lo, mut hi, mut pi_low) = (0.0, 0.0, 0.0);
    for i in 0..inputs.len() {
        let p = GmmParams::from_raw(&cache.output(0, i), layout);
        let w = p.weights();
        let (a, b) = if p.mu[0][0] <= p.mu[1][0] { (0, 1) } else { (1, 0) };
        lo += p.mu[a][0];
        hi += p.mu[b][0];
        pi_low += w[a];
    }
    let n = inputs.len() as f64;
    let l2_cache = l2.net.forward_batch(&l2.params.values, inputs)?;
    let l2_mean = (0..inputs.len()).map(|i| l2_cache.output(0, i)[0]).sum::<f64>() / n;
    Ok(BimodalOutcome { modes: [lo / n, hi / n], pi_low: pi_low / n, l2_mean })
}

/// Runs every oracle. Failures are reported, not raised.
pub fn run_verify(seed: u64) -> Result<VerifyReport, HarnessError> {
    let mut checks = Vec::new();
    let g = gradient_check(20, derive_seed(seed, &[1]))?;
    checks.push(CheckResult::below("gradient-check", g, 1e-4, "max relative error, 20 draws".into()));
    let o = gmm_oracle(100, derive_seed(seed, &[2]));
    checks.push(CheckResult::below("gmm-oracle", o, 1e-10, "max |nll - direct|, 100 cases".into()));
    let c = cvar_oracle(1000, derive_seed(seed, &[3]))?;
    let mut r = CheckResult::below("cvar-oracle", c.worst_gap, 1e-12, format!(
        "1000 vectors; alpha=0 equals mean: {}; curves monotone: {}",
        c.alpha0_exact, c.curves_monotone
    ));
    r.passed &= c.alpha0_exact && c.curves_monotone;
    checks.push(r);
    for alpha in [0.0, 0.5, 0.9] {
        let m = mc_verify_cvar_gradient(3, alpha, 1_000_000, derive_seed(seed, &[4]))?;
        checks.push(CheckResult::below(
            &format!("cvar-gradient-alpha-{alpha}"),
            m.relative_error,
            1e-2,
            format!("n={} estimator {:?} fd {:?}", m.n_samples, m.estimator, m.finite_difference),
        ));
    }
    let b = bimodal_recovery(derive_seed(seed, &[5]))?;
    let mode_err = (b.modes[0] + 3.0).abs().max((b.modes[1] - 3.0).abs());
    let mut r = CheckResult::below("bimodal-recovery", mode_err, 0.1, format!(
        "modes {:.3}/{:.3} pi {:.3} l2 {:.3}",
        b.modes[0], b.modes[1], b.pi_low, b.l2_mean
    ));
    r.passed &= (b.pi_low - 0.5).abs() < 0.05 && b.l2_mean.abs() < 0.2;
    checks.push(r);
    Ok(VerifyReport { seed, checks })
}
