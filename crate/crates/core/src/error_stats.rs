//! Monte Carlo statistics of the Hamiltonian error `Δ = H(z) - H(z')` under
//! exact draws `z` from the canonical distribution.
//!
//! Divergent proposals are stored as `-inf`. They are excluded from moments and
//! cumulants, counted in [`ErrorSampleSet::n_divergent`], and contribute `e^Δ = 0`
//! to the global constraint estimate.

use rand::{Rng, RngCore};
use rayon::prelude::*;

use crate::integrator::{error_from_energies, simulate, IntegrationTime, IntegratorConfig, Scheme};
use crate::model::{energy, exact_canonical_sample_into, fill_momentum, PhaseState, TargetModel};
use crate::rng;
use crate::{Error, Result};

/// Draws per independently seeded shard of [`sample_errors`].
pub const SHARD_SIZE: usize = 4096;
/// Bootstrap resamples used for cumulant standard errors.
pub const BOOTSTRAP_RESAMPLES: usize = 200;
/// Largest divergent fraction tolerated by the scaling fits.
pub const MAX_DIVERGENT_FRACTION: f64 = 1e-3;

const MIN_DRAWS: usize = 100;
const BOOTSTRAP_SEED: u64 = 0x5eed_b007;

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorSampleSet {
    pub eps: f64,
    pub tau: f64,
    pub order: u32,
    pub samples: Vec<f64>,
    pub n: usize,
    pub n_divergent: usize,
}

impl ErrorSampleSet {
    /// Wraps precomputed errors; every non-finite entry counts as divergent
    /// and is replaced by `-inf`.
    pub fn from_samples(eps: f64, tau: f64, order: u32, mut samples: Vec<f64>) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::Contract(format!("an error sample set needs at least 2 draws, got {}", samples.len())));
        }
        let mut n_divergent = 0;
        for s in samples.iter_mut() {
            if !s.is_finite() {
                *s = f64::NEG_INFINITY;
                n_divergent += 1;
            }
        }
        Ok(Self { eps, tau, order, n: samples.len(), samples, n_divergent })
    }

    pub fn finite(&self) -> impl Iterator<Item = f64> + '_ {
        self.samples.iter().copied().filter(|x| x.is_finite())
    }

    pub fn finite_samples(&self) -> Vec<f64> {
        self.finite().collect()
    }

    pub fn divergent_fraction(&self) -> f64 {
        self.n_divergent as f64 / self.n as f64
    }
}

fn shard_errors<M: TargetModel + ?Sized>(
    model: &M,
    seed: u64,
    shard: usize,
    count: usize,
    cfg: &IntegratorConfig,
    time: &IntegrationTime,
) -> Result<Vec<f64>> {
    let d = model.dim();
    let mut r = rng::stream(seed, shard as u64);
    let mut z = PhaseState { position: vec![0.0; d], momentum: vec![0.0; d] };
    let mut grad = vec![0.0; d];
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        exact_canonical_sample_into(model, &mut r, &mut z)?;
        let n = time.n_steps(cfg.step_size(), Some(&mut r as &mut dyn RngCore));
        let h0 = energy(model, &z);
        let sim = simulate(model, &mut z, cfg, n, &mut grad, h0, |_, _| {});
        // the momentum flip leaves the kinetic energy unchanged
        let delta = if sim.divergent { f64::NEG_INFINITY } else { error_from_energies(h0, energy(model, &z)) };
        out.push(delta);
    }
    Ok(out)
}

/// `n` i.i.d. errors: exact canonical draw, proposal, `Δ`.
///
/// Draws are split into shards of [`SHARD_SIZE`], shard `s` using the random
/// stream `(seed, s)`, so the result depends only on `seed` and never on the
/// number of worker threads.
pub fn sample_errors<M: TargetModel + ?Sized>(
    model: &M,
    seed: u64,
    cfg: &IntegratorConfig,
    time: &IntegrationTime,
    n: usize,
) -> Result<ErrorSampleSet> {
    if n < MIN_DRAWS {
        return Err(Error::Contract(format!("sample_errors needs n >= {MIN_DRAWS}, got {n}")));
    }
    let n_shards = n.div_ceil(SHARD_SIZE);
    let shards: Vec<Vec<f64>> = (0..n_shards)
        .into_par_iter()
        .map(|s| shard_errors(model, seed, s, SHARD_SIZE.min(n - s * SHARD_SIZE), cfg, time))
        .collect::<Result<_>>()?;
    ErrorSampleSet::from_samples(cfg.step_size(), time.tau(), cfg.order(), shards.concat())
}

/// Plug-in estimate of `E[Δⁿ]` over finite draws with standard error
/// `sd(Δⁿ)/√N`. Returns `NaN`s when no finite draw exists.
pub fn moment(set: &ErrorSampleSet, order_n: u32) -> Result<(f64, f64)> {
    if !(1..=4).contains(&order_n) {
        return Err(Error::Contract(format!("moment order must be in 1..=4, got {order_n}")));
    }
    let vals: Vec<f64> = set.finite().map(|x| x.powi(order_n as i32)).collect();
    Ok(mean_and_se(&vals))
}

fn mean_and_se(vals: &[f64]) -> (f64, f64) {
    let n = vals.len() as f64;
    if vals.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = vals.iter().sum::<f64>() / n;
    if vals.len() < 2 {
        return (m, f64::NAN);
    }
    let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

fn kstats_from_central(n: f64, mean: f64, m2: f64, m3: f64, m4: f64) -> [f64; 4] {
    let k2 = n / (n - 1.0) * m2;
    let k3 = n * n * m3 / ((n - 1.0) * (n - 2.0));
    let k4 = n * n * ((n + 1.0) * m4 - 3.0 * (n - 1.0) * m2 * m2) / ((n - 1.0) * (n - 2.0) * (n - 3.0));
    [mean, k2, k3, k4]
}

/// Unbiased k-statistics `k₁..k₄`; needs at least 4 values.
pub fn k_statistics(x: &[f64]) -> Result<[f64; 4]> {
    if x.len() < 4 {
        return Err(Error::Contract(format!("k-statistics need at least 4 values, got {}", x.len())));
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &v in x {
        let d = v - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    Ok(kstats_from_central(n, mean, m2 / n, m3 / n, m4 / n))
}

/// k-statistics of a resample, from power sums about a fixed center `c`.
fn resample_kstats(x: &[f64], c: f64, r: &mut impl Rng) -> [f64; 4] {
    let len = x.len();
    let (mut s1, mut s2, mut s3, mut s4) = (0.0, 0.0, 0.0, 0.0);
    for _ in 0..len {
        let d = x[r.random_range(0..len)] - c;
        let d2 = d * d;
        s1 += d;
        s2 += d2;
        s3 += d2 * d;
        s4 += d2 * d2;
    }
    let n = len as f64;
    let (a1, a2, a3, a4) = (s1 / n, s2 / n, s3 / n, s4 / n);
    let m2 = a2 - a1 * a1;
    let m3 = a3 - 3.0 * a1 * a2 + 2.0 * a1.powi(3);
    let m4 = a4 - 4.0 * a1 * a3 + 6.0 * a1 * a1 * a2 - 3.0 * a1.powi(4);
    kstats_from_central(n, c + a1, m2, m3, m4)
}

fn bootstrap_kstats(x: &[f64], resamples: usize, seed: u64) -> Vec<[f64; 4]> {
    let c = x.iter().sum::<f64>() / x.len() as f64;
    (0..resamples)
        .into_par_iter()
        .map(|b| resample_kstats(x, c, &mut rng::stream(seed, b as u64)))
        .collect()
}

fn sd(vals: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = vals.clone().count() as f64;
    let m = vals.clone().sum::<f64>() / n;
    (vals.map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CumulantSet {
    pub kappa: [f64; 4],
    pub standard_errors: [f64; 4],
}

/// k-statistics of the finite draws with bootstrap standard errors
/// ([`BOOTSTRAP_RESAMPLES`] resamples, fixed internal seed).
pub fn cumulants(set: &ErrorSampleSet) -> Result<CumulantSet> {
    let x = set.finite_samples();
    let kappa = k_statistics(&x)?;
    let boot = bootstrap_kstats(&x, BOOTSTRAP_RESAMPLES, BOOTSTRAP_SEED);
    let mut standard_errors = [0.0; 4];
    for (j, se) in standard_errors.iter_mut().enumerate() {
        *se = sd(boot.iter().map(|k| k[j]));
    }
    Ok(CumulantSet { kappa, standard_errors })
}

/// `κ₁ + ½κ₂` and its bootstrap standard error; zero to leading order in `ε`.
pub fn cumulant_identity_residual(set: &ErrorSampleSet) -> Result<(f64, f64)> {
    let x = set.finite_samples();
    let k = k_statistics(&x)?;
    let boot = bootstrap_kstats(&x, BOOTSTRAP_RESAMPLES, BOOTSTRAP_SEED);
    Ok((k[0] + 0.5 * k[1], sd(boot.iter().map(|k| k[0] + 0.5 * k[1]))))
}

/// Monte Carlo estimate of `E[e^Δ]` over all draws (divergent ones give 0)
/// with its standard error. The exact value is 1.
pub fn check_global_constraint(set: &ErrorSampleSet) -> (f64, f64) {
    let vals: Vec<f64> = set.samples.iter().map(|d| d.exp()).collect();
    mean_and_se(&vals)
}

/// Summary statistics of one sample set, without bootstrap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorSummary {
    pub mean: f64,
    pub mean_se: f64,
    pub kappa: [f64; 4],
    pub exp_delta: f64,
    pub exp_delta_se: f64,
}

pub fn summarize(set: &ErrorSampleSet) -> Result<ErrorSummary> {
    let (mean, mean_se) = moment(set, 1)?;
    let kappa = k_statistics(&set.finite_samples())?;
    let (exp_delta, exp_delta_se) = check_global_constraint(set);
    Ok(ErrorSummary { mean, mean_se, kappa, exp_delta, exp_delta_se })
}

/// Monte Carlo estimates of the three acceptance expectations that bracket
/// the cost, each with a standard error. `a(q, p) = min(1, e^Δ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AcceptanceExpectations {
    pub mean_accept: f64,
    pub mean_accept_se: f64,
    /// `1/E[a]`, with a delta-method standard error.
    pub inverse_of_mean: f64,
    pub inverse_of_mean_se: f64,
    /// `E_q[1/E_p[a]]`, the inner expectation estimated from `n_inner` momenta.
    pub nested: f64,
    pub nested_se: f64,
    /// `E[1/a]`.
    pub mean_of_inverse: f64,
    pub mean_of_inverse_se: f64,
    pub n_divergent: usize,
}

/// Nested estimator: `n_outer` exact positions, each with `n_inner` fresh
/// momenta. Standard errors are computed over positions, which keeps draws
/// sharing a position in one cluster. Divergent proposals give `a = 0`.
pub fn acceptance_expectations<M: TargetModel + ?Sized>(
    model: &M,
    seed: u64,
    cfg: &IntegratorConfig,
    time: &IntegrationTime,
    n_outer: usize,
    n_inner: usize,
) -> Result<AcceptanceExpectations> {
    if n_outer < 2 || n_inner < 1 {
        return Err(Error::Contract(format!("need n_outer >= 2 and n_inner >= 1, got {n_outer} and {n_inner}")));
    }
    let d = model.dim();
    let per_shard = SHARD_SIZE.div_ceil(n_inner).max(1);
    let n_shards = n_outer.div_ceil(per_shard);
    let shards: Vec<Vec<(f64, f64, usize)>> = (0..n_shards)
        .into_par_iter()
        .map(|s| -> Result<Vec<(f64, f64, usize)>> {
            let mut r = rng::stream(seed, s as u64);
            let mut z = PhaseState { position: vec![0.0; d], momentum: vec![0.0; d] };
            let mut q = vec![0.0; d];
            let mut grad = vec![0.0; d];
            let count = per_shard.min(n_outer - s * per_shard);
            let mut out = Vec::with_capacity(count);
            for _ in 0..count {
                model.sample_position(&mut r, &mut q)?;
                let (mut sum_a, mut sum_inv, mut div) = (0.0, 0.0, 0);
                for _ in 0..n_inner {
                    z.position.copy_from_slice(&q);
                    fill_momentum(&mut r, &mut z.momentum);
                    let n = time.n_steps(cfg.step_size(), Some(&mut r as &mut dyn RngCore));
                    let h0 = energy(model, &z);
                    let sim = simulate(model, &mut z, cfg, n, &mut grad, h0, |_, _| {});
                    let a = if sim.divergent {
                        div += 1;
                        0.0
                    } else {
                        error_from_energies(h0, energy(model, &z)).exp().min(1.0)
                    };
                    sum_a += a;
                    sum_inv += 1.0 / a;
                }
                out.push((sum_a / n_inner as f64, sum_inv / n_inner as f64, div));
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let per_q: Vec<(f64, f64, usize)> = shards.concat();
    let (mean_accept, mean_accept_se) = mean_and_se(&per_q.iter().map(|t| t.0).collect::<Vec<_>>());
    let (nested, nested_se) = mean_and_se(&per_q.iter().map(|t| 1.0 / t.0).collect::<Vec<_>>());
    let (mean_of_inverse, mean_of_inverse_se) = mean_and_se(&per_q.iter().map(|t| t.1).collect::<Vec<_>>());
    Ok(AcceptanceExpectations {
        mean_accept,
        mean_accept_se,
        inverse_of_mean: 1.0 / mean_accept,
        inverse_of_mean_se: mean_accept_se / (mean_accept * mean_accept),
        nested,
        nested_se,
        mean_of_inverse,
        mean_of_inverse_se,
        n_divergent: per_q.iter().map(|t| t.2).sum(),
    })
}

/// `κ₂ ≈ α ε^{2k}` fitted over a grid of step sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaFit {
    pub alpha: f64,
    pub k: u32,
    pub eps_grid: Vec<f64>,
    pub kappa2_values: Vec<f64>,
    /// Root-mean-square residual of the log-space fit.
    pub fit_residual: f64,
}

impl AlphaFit {
    /// Least squares for `log κ₂ = log α + 2k log ε` with the slope held at `2k`.
    pub fn from_kappa2(k: u32, eps_grid: Vec<f64>, kappa2_values: Vec<f64>) -> Result<Self> {
        if eps_grid.len() != kappa2_values.len() || eps_grid.is_empty() {
            return Err(Error::Contract("eps grid and kappa2 values must be non-empty and equally long".into()));
        }
        if let Some(i) = kappa2_values.iter().position(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InsufficientSignal { eps: eps_grid[i], estimate: kappa2_values[i], se: f64::NAN });
        }
        if eps_grid.iter().any(|e| !(*e > 0.0)) {
            return Err(Error::Domain("step sizes must be positive".into()));
        }
        let slope = 2.0 * k as f64;
        let offsets: Vec<f64> =
            eps_grid.iter().zip(&kappa2_values).map(|(e, v)| v.ln() - slope * e.ln()).collect();
        let log_alpha = offsets.iter().sum::<f64>() / offsets.len() as f64;
        let fit_residual =
            (offsets.iter().map(|o| (o - log_alpha).powi(2)).sum::<f64>() / offsets.len() as f64).sqrt();
        Ok(Self { alpha: log_alpha.exp(), k, eps_grid, kappa2_values, fit_residual })
    }

    /// Unconstrained least-squares slope of `log κ₂` on `log ε`.
    pub fn free_slope(&self) -> Result<f64> {
        log_log_slope(&self.eps_grid, &self.kappa2_values, None).map(|(s, _)| s)
    }
}

fn check_stable(set: &ErrorSampleSet) -> Result<()> {
    if set.divergent_fraction() > MAX_DIVERGENT_FRACTION {
        return Err(Error::UnstableRegime { eps: set.eps, n_divergent: set.n_divergent, n: set.n });
    }
    Ok(())
}

fn validate_grid(eps_grid: &[f64], min_points: usize) -> Result<()> {
    if eps_grid.len() < min_points {
        return Err(Error::Contract(format!("need at least {min_points} grid points, got {}", eps_grid.len())));
    }
    if eps_grid.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
        return Err(Error::Domain("step sizes must be positive and finite".into()));
    }
    Ok(())
}

/// Estimates `κ₂` at each grid step size (seeded from `(seed, index)`) and
/// fits `α`. Fails if more than 0.1% of the draws diverge at any step size.
pub fn fit_alpha<M: TargetModel + ?Sized>(
    model: &M,
    seed: u64,
    k: u32,
    eps_grid: &[f64],
    time: &IntegrationTime,
    n_per_eps: usize,
) -> Result<AlphaFit> {
    validate_grid(eps_grid, 3)?;
    let scheme = Scheme::from_order(k)?;
    let mut kappa2 = Vec::with_capacity(eps_grid.len());
    for (i, &eps) in eps_grid.iter().enumerate() {
        let cfg = IntegratorConfig::new(eps, scheme)?;
        let set = sample_errors(model, grid_seed(seed, i), &cfg, time, n_per_eps)?;
        check_stable(&set)?;
        kappa2.push(k_statistics(&set.finite_samples())?[1]);
    }
    AlphaFit::from_kappa2(k, eps_grid.to_vec(), kappa2)
}

/// Seed for grid point `i` derived from the master seed.
pub fn grid_seed(seed: u64, i: usize) -> u64 {
    rng::stream(seed, i as u64).next_u64()
}

/// Least-squares slope of `log y` on `log x` with its standard error.
///
/// With standard errors for `y` the fit is weighted by `(y/se)²` (the
/// delta-method variance of `log y`) and the slope error is the propagated
/// one. Without them, or when some `se` is zero, the fit is unweighted and
/// the slope error comes from the residual scatter.
pub fn log_log_slope(x: &[f64], y: &[f64], y_se: Option<&[f64]>) -> Result<(f64, f64)> {
    if x.len() != y.len() || x.len() < 2 || y_se.is_some_and(|s| s.len() != x.len()) {
        return Err(Error::Contract("log-log fit needs at least 2 points with matching lengths".into()));
    }
    if x.iter().chain(y).any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::Domain("log-log fit needs positive finite values".into()));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let weights: Option<Vec<f64>> = y_se
        .filter(|s| s.iter().all(|v| *v > 0.0))
        .map(|s| y.iter().zip(s).map(|(y, s)| (y / s).powi(2)).collect());
    let w = weights.clone().unwrap_or_else(|| vec![1.0; x.len()]);
    let sw: f64 = w.iter().sum();
    let mx = w.iter().zip(&lx).map(|(w, v)| w * v).sum::<f64>() / sw;
    let my = w.iter().zip(&ly).map(|(w, v)| w * v).sum::<f64>() / sw;
    let sxx: f64 = w.iter().zip(&lx).map(|(w, v)| w * (v - mx).powi(2)).sum();
    if !(sxx > 0.0) {
        return Err(Error::Domain("log-log fit needs at least two distinct x values".into()));
    }
    let sxy: f64 = w.iter().zip(lx.iter().zip(&ly)).map(|(w, (a, b))| w * (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let se = if weights.is_some() {
        (1.0 / sxx).sqrt()
    } else if x.len() > 2 {
        let rss: f64 = lx.iter().zip(&ly).map(|(a, b)| (b - my - slope * (a - mx)).powi(2)).sum();
        (rss / (x.len() - 2) as f64 / sxx).sqrt()
    } else {
        0.0
    };
    Ok((slope, se))
}

/// Slope of `log |E[Δⁿ]|` against `log ε` for `n ∈ {1, 2}`.
///
/// `cfg` supplies the scheme and divergence policy; its step size is replaced
/// by each grid value. Fails when a moment is within 2 standard errors of 0.
pub fn scaling_exponent<M: TargetModel + ?Sized>(
    model: &M,
    seed: u64,
    moment_n: u32,
    cfg: &IntegratorConfig,
    eps_grid: &[f64],
    time: &IntegrationTime,
    n_per_eps: usize,
) -> Result<(f64, f64)> {
    if !(1..=2).contains(&moment_n) {
        return Err(Error::Contract(format!("scaling exponent supports moments 1 and 2, got {moment_n}")));
    }
    validate_grid(eps_grid, 2)?;
    let mut est = Vec::with_capacity(eps_grid.len());
    let mut ses = Vec::with_capacity(eps_grid.len());
    for (i, &eps) in eps_grid.iter().enumerate() {
        let set = sample_errors(model, grid_seed(seed, i), &cfg.with_step_size(eps)?, time, n_per_eps)?;
        check_stable(&set)?;
        let (m, se) = moment(&set, moment_n)?;
        if !(m.abs() > 2.0 * se) {
            return Err(Error::InsufficientSignal { eps, estimate: m, se });
        }
        est.push(m.abs());
        ses.push(se);
    }
    log_log_slope(eps_grid, &est, Some(&ses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrator::analytic_mean_error_gaussian;
    use crate::model::{Funnel, Gaussian};
    use rand_distr::{Distribution, StandardNormal};

    fn synthetic(samples: Vec<f64>) -> ErrorSampleSet {
        ErrorSampleSet::from_samples(0.1, 1.0, 2, samples).unwrap()
    }

    fn normals(seed: u64, n: usize) -> Vec<f64> {
        let mut r = rng::from_seed(seed);
        (0..n).map(|_| StandardNormal.sample(&mut r)).collect()
    }

    /// Flow that leaves every state where it is: `Δ ≡ 0`.
    struct Frozen;
    impl TargetModel for Frozen {
        fn dim(&self) -> usize {
            1
        }
        fn potential(&self, _: &[f64]) -> f64 {
            0.0
        }
        fn gradient(&self, _: &[f64], g: &mut [f64]) {
            g[0] = 0.0;
        }
        fn sample_position(&self, _: &mut dyn RngCore, out: &mut [f64]) -> Result<()> {
            out[0] = 1.0;
            Ok(())
        }
        fn name(&self) -> String {
            "frozen".into()
        }
    }

    #[test]
    fn exact_flow_gives_zero_errors() {
        let cfg = IntegratorConfig::leapfrog(0.3).unwrap();
        let set = sample_errors(&Frozen, 1, &cfg, &IntegrationTime::fixed(1.0).unwrap(), 500).unwrap();
        assert!(set.samples.iter().all(|d| *d == 0.0));
        assert_eq!(check_global_constraint(&set), (1.0, 0.0));
    }

    #[test]
    fn unsupported_model() {
        struct NoSampler;
        impl TargetModel for NoSampler {
            fn dim(&self) -> usize {
                1
            }
            fn potential(&self, q: &[f64]) -> f64 {
                q[0] * q[0] / 2.0
            }
            fn gradient(&self, q: &[f64], g: &mut [f64]) {
                g[0] = q[0];
            }
            fn name(&self) -> String {
                "no-sampler".into()
            }
        }
        let cfg = IntegratorConfig::leapfrog(0.3).unwrap();
        let r = sample_errors(&NoSampler, 1, &cfg, &IntegrationTime::fixed(1.0).unwrap(), 200);
        assert!(matches!(r, Err(Error::Unsupported(_))));
        let r = sample_errors(&Frozen, 1, &cfg, &IntegrationTime::fixed(1.0).unwrap(), 99);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn deterministic_and_shard_layout() {
        let g = Gaussian::standard(3).unwrap();
        let cfg = IntegratorConfig::leapfrog(0.4).unwrap();
        let time = IntegrationTime::new(1.0, 0.2).unwrap();
        let a = sample_errors(&g, 9, &cfg, &time, 10_000).unwrap();
        let b = sample_errors(&g, 9, &cfg, &time, 10_000).unwrap();
        assert_eq!(a, b);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let c = pool.install(|| sample_errors(&g, 9, &cfg, &time, 10_000)).unwrap();
        assert_eq!(a, c);
        // a prefix of shards is reproduced by a shorter run
        let short = sample_errors(&g, 9, &cfg, &time, SHARD_SIZE).unwrap();
        assert_eq!(short.samples[..], a.samples[..SHARD_SIZE]);
        assert_eq!(a.n, 10_000);
    }

    #[test]
    fn moment_examples() {
        let c = synthetic(vec![2.5; 10]);
        assert_eq!(moment(&c, 1).unwrap(), (2.5, 0.0));
        let (m, se) = moment(&synthetic(vec![1.0, -1.0]), 2).unwrap();
        assert_eq!(m, 1.0);
        assert!(se >= 0.0);
        let (m, se) = moment(&synthetic(vec![1.0, -1.0]), 1).unwrap();
        assert_eq!(m, 0.0);
        assert!((se - 1.0).abs() < 1e-15);
        assert!(moment(&c, 5).is_err());
    }

    #[test]
    fn moments_under_sign_flip() {
        let x: Vec<f64> = normals(3, 500).iter().map(|v| v + 0.3 * v * v).collect();
        let a = synthetic(x.clone());
        let b = synthetic(x.iter().map(|v| -v).collect());
        for n in 1..=4 {
            let (ma, sa) = moment(&a, n).unwrap();
            let (mb, sb) = moment(&b, n).unwrap();
            let sign = if n % 2 == 1 { -1.0 } else { 1.0 };
            assert!((ma - sign * mb).abs() < 1e-12);
            assert!((sa - sb).abs() < 1e-12);
        }
    }

    #[test]
    fn divergent_draws_are_excluded() {
        let set = synthetic(vec![1.0, f64::NAN, 3.0, f64::INFINITY, f64::NEG_INFINITY]);
        assert_eq!(set.n_divergent, 3);
        assert!(set.samples[1] == f64::NEG_INFINITY);
        assert_eq!(moment(&set, 1).unwrap().0, 2.0);
        let (e, _) = check_global_constraint(&set);
        assert!((e - (1f64.exp() + 3f64.exp()) / 5.0).abs() < 1e-12);
    }

    #[test]
    fn kstat_oracle() {
        // independent evaluation through raw power sums
        let x = [0.3, -1.2, 2.2, 0.7, 0.0, -0.4, 1.9];
        let n = x.len() as f64;
        let s = |p: i32| x.iter().map(|v: &f64| v.powi(p)).sum::<f64>();
        let (s1, s2, s3, s4) = (s(1), s(2), s(3), s(4));
        let k2 = (n * s2 - s1 * s1) / (n * (n - 1.0));
        let k3 = (2.0 * s1.powi(3) - 3.0 * n * s1 * s2 + n * n * s3) / (n * (n - 1.0) * (n - 2.0));
        let k4 = (-6.0 * s1.powi(4) + 12.0 * n * s1 * s1 * s2 - 3.0 * n * (n - 1.0) * s2 * s2
            - 4.0 * n * (n + 1.0) * s1 * s3
            + n * n * (n + 1.0) * s4)
            / (n * (n - 1.0) * (n - 2.0) * (n - 3.0));
        let k = k_statistics(&x).unwrap();
        assert!((k[0] - s1 / n).abs() < 1e-14);
        assert!((k[1] - k2).abs() < 1e-12);
        assert!((k[2] - k3).abs() < 1e-12);
        assert!((k[3] - k4).abs() < 1e-12);
    }

    #[test]
    fn resample_power_sums_match_direct() {
        let x = normals(17, 300);
        let c = x.iter().sum::<f64>() / 300.0;
        let via_sums = resample_kstats(&x, c, &mut rng::from_seed(4));
        let mut r = rng::from_seed(4);
        let resample: Vec<f64> = (0..300).map(|_| x[r.random_range(0..300)]).collect();
        let direct = k_statistics(&resample).unwrap();
        for j in 0..4 {
            assert!((via_sums[j] - direct[j]).abs() < 1e-10, "{j}");
        }
    }

    #[test]
    fn gaussian_cumulants() {
        let c = cumulants(&synthetic(normals(5, 20_000))).unwrap();
        let truth = [0.0, 1.0, 0.0, 0.0];
        for j in 0..4 {
            assert!(c.standard_errors[j] > 0.0);
            assert!((c.kappa[j] - truth[j]).abs() < 5.0 * c.standard_errors[j], "{j}: {:?}", c);
        }
        let shifted = cumulants(&synthetic(vec![4.0; 1000])).unwrap();
        assert_eq!(shifted.kappa[1], 0.0);
        assert_eq!(shifted.standard_errors[1], 0.0);
    }

    #[test]
    fn gaussian_mean_error_matches_closed_form() {
        let g = Gaussian::standard(1).unwrap();
        let tau = std::f64::consts::FRAC_PI_2;
        let cfg = IntegratorConfig::leapfrog(0.4).unwrap().snapped_to(tau).unwrap();
        let set = sample_errors(&g, 21, &cfg, &IntegrationTime::fixed(tau).unwrap(), 1_000_000).unwrap();
        let (m, se) = moment(&set, 1).unwrap();
        let increase = analytic_mean_error_gaussian(cfg.step_size(), tau);
        assert!((-m - increase).abs() < 3.0 * se, "{m} {se} {increase}");
        assert!(m <= 3.0 * se);
    }

    #[test]
    fn global_constraint_and_cumulant_identity() {
        let g = Gaussian::standard(10).unwrap();
        let cfg = IntegratorConfig::leapfrog(0.25).unwrap();
        let time = IntegrationTime::fixed(1.0).unwrap();
        let set = sample_errors(&g, 33, &cfg, &time, 200_000).unwrap();
        let (e, se) = check_global_constraint(&set);
        assert!((e - 1.0).abs() < 4.0 * se, "{e} {se}");

        let g1 = Gaussian::standard(1).unwrap();
        let set = sample_errors(&g1, 34, &cfg.with_step_size(0.3).unwrap(), &time, 200_000).unwrap();
        let (r, rse) = cumulant_identity_residual(&set).unwrap();
        assert!(r.abs() < 5.0 * rse, "{r} {rse}");
        let c = cumulants(&set).unwrap();
        assert!(c.kappa[0] <= 3.0 * c.standard_errors[0]);
    }

    #[test]
    fn funnel_global_constraint() {
        // stable even deep in the neck, where the transverse frequency reaches e^{6.5}
        let f = Funnel::new(50, 3.0).unwrap();
        let cfg = IntegratorConfig::leapfrog(0.002).unwrap();
        let set = sample_errors(&f, 44, &cfg, &IntegrationTime::fixed(0.05).unwrap(), 100_000).unwrap();
        assert_eq!(set.n_divergent, 0);
        let (e, se) = check_global_constraint(&set);
        assert!((e - 1.0).abs() < 4.0 * se, "{e} {se} div={}", set.n_divergent);
    }

    #[test]
    fn acceptance_expectations_exact_flow_and_ordering() {
        let cfg = IntegratorConfig::leapfrog(0.3).unwrap();
        let time = IntegrationTime::fixed(1.0).unwrap();
        let e = acceptance_expectations(&Frozen, 1, &cfg, &time, 50, 4).unwrap();
        assert_eq!((e.mean_accept, e.nested, e.mean_of_inverse), (1.0, 1.0, 1.0));

        let g = Gaussian::standard(5).unwrap();
        let cfg = IntegratorConfig::leapfrog(0.5).unwrap();
        let e = acceptance_expectations(&g, 2, &cfg, &time, 2000, 20).unwrap();
        assert!(e.inverse_of_mean <= e.nested + 3.0 * (e.inverse_of_mean_se + e.nested_se));
        assert!(e.nested <= e.mean_of_inverse + 3.0 * (e.nested_se + e.mean_of_inverse_se));
        assert!(e.mean_accept > 0.5 && e.mean_accept < 1.0);
        let again = acceptance_expectations(&g, 2, &cfg, &time, 2000, 20).unwrap();
        assert_eq!(e, again);
    }

    #[test]
    fn noiseless_alpha_fit() {
        let grid = vec![0.1, 0.2, 0.35, 0.5];
        let k2: Vec<f64> = grid.iter().map(|e: &f64| 2.5 * e.powi(4)).collect();
        let fit = AlphaFit::from_kappa2(2, grid, k2).unwrap();
        assert!((fit.alpha - 2.5).abs() < 1e-10);
        assert!(fit.fit_residual < 1e-12);
        assert!((fit.free_slope().unwrap() - 4.0).abs() < 1e-10);
        assert!(matches!(
            AlphaFit::from_kappa2(2, vec![0.1, 0.2], vec![1.0, -1.0]),
            Err(Error::InsufficientSignal { .. })
        ));
    }

    #[test]
    fn noiseless_slope() {
        let x = [0.1, 0.2, 0.3, 0.5];
        let y: Vec<f64> = x.iter().map(|e: &f64| 7.0 * e.powi(6)).collect();
        let (s, se) = log_log_slope(&x, &y, None).unwrap();
        assert!((s - 6.0).abs() < 1e-10);
        assert!(se < 1e-8);
        let ses: Vec<f64> = y.iter().map(|v| 0.01 * v).collect();
        let (s, se) = log_log_slope(&x, &y, Some(&ses)).unwrap();
        assert!((s - 6.0).abs() < 1e-10);
        assert!(se > 0.0);
        assert!(log_log_slope(&x, &[1.0, -1.0, 1.0, 1.0], None).is_err());
    }

    #[test]
    fn alpha_fit_on_gaussian() {
        let g = Gaussian::standard(1).unwrap();
        let time = IntegrationTime::fixed(1.2).unwrap();
        let fit = fit_alpha(&g, 5, 2, &[0.2, 0.3, 0.4], &time, 100_000).unwrap();
        assert!((fit.free_slope().unwrap() - 4.0).abs() < 0.3);
        assert!(fit.alpha > 0.0);
        assert!(matches!(fit_alpha(&g, 5, 2, &[0.2, 0.3], &time, 1000), Err(Error::Contract(_))));
        assert!(matches!(fit_alpha(&g, 5, 3, &[0.2, 0.3, 0.4], &time, 1000), Err(Error::Contract(_) | Error::Domain(_))));
    }

    #[test]
    fn yoshida_slope_matches_exact_oscillator_values() {
        // κ₂ = tr(S²)/2 with S = I - AᵀA for the exact composite map A, giving
        // slopes 8.258 on the fine grid and 9.132 on the coarse one
        let g = Gaussian::standard(1).unwrap();
        let time = IntegrationTime::fixed(2.4).unwrap();
        for (grid, exact) in [([0.2, 0.3, 0.4], 8.258), ([0.4, 0.6, 0.8], 9.132)] {
            let fit = fit_alpha(&g, 12, 4, &grid, &time, 200_000).unwrap();
            let slope = fit.free_slope().unwrap();
            assert!((slope - exact).abs() < 0.1, "{grid:?}: {slope}");
        }
    }

    #[test]
    fn unstable_grid_is_rejected() {
        let g = Gaussian::standard(1).unwrap();
        let time = IntegrationTime::fixed(5.0).unwrap();
        let r = fit_alpha(&g, 5, 2, &[0.2, 0.3, 2.5], &time, 1000);
        assert!(matches!(r, Err(Error::UnstableRegime { eps, .. }) if eps == 2.5), "{r:?}");
    }

    #[test]
    fn second_moment_slope() {
        let g = Gaussian::standard(1).unwrap();
        let cfg = IntegratorConfig::leapfrog(0.2).unwrap();
        let (s, se) =
            scaling_exponent(&g, 8, 2, &cfg, &[0.2, 0.3, 0.4], &IntegrationTime::fixed(1.2).unwrap(), 100_000)
                .unwrap();
        assert!((s - 4.0).abs() < 0.3, "{s} {se}");
    }

    #[test]
    fn weak_signal_is_reported() {
        let cfg = IntegratorConfig::leapfrog(0.2).unwrap();
        let r = scaling_exponent(&Frozen, 8, 1, &cfg, &[0.2, 0.3], &IntegrationTime::fixed(1.0).unwrap(), 200);
        assert!(matches!(r, Err(Error::InsufficientSignal { .. })), "{r:?}");
    }
}
