//! Divergence detection and potential scale reduction diagnostics.

use rand::RngCore;

use crate::integrator::Trajectory;
use crate::model::TargetModel;
use crate::rng;
use crate::sampler::{run_chains, AdaptationConfig, ChainConfig};
use crate::{Error, Result};

/// When a trajectory counts as divergent.
///
/// Non-finite states or energies always count; the threshold bounds the energy
/// growth `H(z_t) - H(z_0)` along the trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DivergencePolicy {
    pub energy_threshold: f64,
}

impl DivergencePolicy {
    pub const DEFAULT_THRESHOLD: f64 = 1000.0;

    pub fn new(energy_threshold: f64) -> Result<Self> {
        if !(energy_threshold > 0.0) {
            return Err(Error::Domain(format!("energy threshold must be positive, got {energy_threshold}")));
        }
        Ok(Self { energy_threshold })
    }

    /// Non-finite values are always divergent.
    pub fn treat_nonfinite_as_divergent(&self) -> bool {
        true
    }

    #[inline]
    pub fn is_divergent_error(&self, energy_error: f64) -> bool {
        !energy_error.is_finite() || energy_error > self.energy_threshold
    }
}

impl Default for DivergencePolicy {
    fn default() -> Self {
        Self { energy_threshold: Self::DEFAULT_THRESHOLD }
    }
}

/// True iff some energy error exceeds the threshold or any state or energy
/// error is non-finite.
pub fn detect_divergence(traj: &Trajectory, policy: &DivergencePolicy) -> bool {
    traj.energy_errors.iter().any(|e| policy.is_divergent_error(*e)) || traj.states.iter().any(|z| !z.is_finite())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RhatResult {
    pub rhat: f64,
    /// Number of chains before splitting.
    pub n_chains_used: usize,
    pub n_draws_per_half: usize,
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn sample_variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() - 1) as f64
}

/// Classical split potential scale reduction factor.
///
/// Chains are truncated to the shortest length and each is split in half;
/// with `n` draws per half, `B` the between-half variance of means times `n`
/// and `W` the mean within-half variance, `R̂ = sqrt(((n-1)/n·W + B/n)/W)`.
pub fn split_rhat<C: AsRef<[f64]>>(chains: &[C]) -> Result<RhatResult> {
    if chains.len() < 2 {
        return Err(Error::Contract(format!("split R-hat needs at least 2 chains, got {}", chains.len())));
    }
    let len = chains.iter().map(|c| c.as_ref().len()).min().unwrap_or(0);
    if len < 4 {
        return Err(Error::Contract(format!("split R-hat needs chains of length >= 4, got {len}")));
    }
    let n = len / 2;
    let mut halves: Vec<&[f64]> = Vec::with_capacity(2 * chains.len());
    for c in chains {
        let c = &c.as_ref()[..len];
        // for odd lengths the middle draw is dropped
        halves.push(&c[..n]);
        halves.push(&c[len - n..]);
    }
    let means: Vec<f64> = halves.iter().map(|h| mean(h)).collect();
    let within = mean(&halves.iter().map(|h| sample_variance(h)).collect::<Vec<_>>());
    if !(within > 0.0) {
        return Err(Error::DegenerateVariance);
    }
    let nf = n as f64;
    let between = nf * sample_variance(&means);
    let var_plus = (nf - 1.0) / nf * within + between / nf;
    Ok(RhatResult { rhat: (var_plus / within).sqrt(), n_chains_used: chains.len(), n_draws_per_half: n })
}

/// Split R-hat over the MCMC chains plus `n_exact_chains` pseudo-chains cut
/// from independent exact draws, each as long as the shortest MCMC chain.
pub fn rhat_with_exact<C: AsRef<[f64]>>(
    mcmc_chains: &[C],
    exact_draws: &[f64],
    n_exact_chains: usize,
) -> Result<RhatResult> {
    if n_exact_chains == 0 {
        return Err(Error::Contract("need at least one exact pseudo-chain".into()));
    }
    let len = mcmc_chains.iter().map(|c| c.as_ref().len()).min().unwrap_or(0);
    if exact_draws.len() < n_exact_chains * len {
        return Err(Error::Contract(format!(
            "need {} exact draws for {n_exact_chains} pseudo-chains of length {len}, got {}",
            n_exact_chains * len,
            exact_draws.len()
        )));
    }
    let mut all: Vec<&[f64]> = mcmc_chains.iter().map(|c| &c.as_ref()[..len]).collect();
    all.extend(exact_draws.chunks_exact(len.max(1)).take(n_exact_chains));
    split_rhat(&all)
}

/// Settings shared by every target of a divergence scan.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanConfig {
    /// Per-chain template; its seed is the master seed and its adaptation
    /// parameters (not target) are used.
    pub chain: ChainConfig,
    pub n_chains: usize,
    pub parallelism: usize,
    pub n_exact_chains: usize,
    /// Coordinate whose R-hat is reported (the funnel latent is `0`).
    pub scalar_index: usize,
}

impl ScanConfig {
    pub fn new(chain: ChainConfig, n_chains: usize) -> Self {
        Self { chain, n_chains, parallelism: 1, n_exact_chains: 1, scalar_index: 0 }
    }

    pub fn chain_configs(&self, target: f64) -> Vec<ChainConfig> {
        let params = self.chain.adaptation.map(|a| a.params).unwrap_or_default();
        (0..self.n_chains)
            .map(|c| {
                let mut cfg = self.chain.clone();
                cfg.seed = rng::stream(self.chain.seed, 1 + c as u64).next_u64();
                cfg.adaptation = Some(AdaptationConfig { target, params });
                cfg
            })
            .collect()
    }

    fn exact_scalar_draws<M: TargetModel + ?Sized>(&self, model: &M, n: usize) -> Result<Vec<f64>> {
        let mut r = rng::stream(self.chain.seed, 0);
        let mut q = vec![0.0; model.dim()];
        (0..n)
            .map(|_| {
                model.sample_position(&mut r, &mut q)?;
                Ok(q[self.scalar_index])
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanRow {
    pub target: f64,
    pub achieved_accept: f64,
    /// Mean adapted step size across chains.
    pub step_size: f64,
    /// Divergent sampling transitions summed over chains.
    pub n_divergent: usize,
    pub rhat_v: f64,
}

/// Diagnostics for one acceptance target.
pub fn scan_target<M: TargetModel + ?Sized>(model: &M, target: f64, cfg: &ScanConfig) -> Result<ScanRow> {
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::Domain(format!("scan targets must lie in (0, 1), got {target}")));
    }
    let outputs = run_chains(model, &cfg.chain_configs(target), cfg.parallelism)?;
    let chains: Vec<Vec<f64>> = outputs.iter().map(|o| o.column(cfg.scalar_index)).collect();
    let exact = cfg.exact_scalar_draws(model, cfg.n_exact_chains * cfg.chain.n_samples)?;
    let rhat = rhat_with_exact(&chains, &exact, cfg.n_exact_chains)?;
    let k = outputs.len() as f64;
    Ok(ScanRow {
        target,
        achieved_accept: outputs.iter().map(|o| o.mean_accept_prob()).sum::<f64>() / k,
        step_size: outputs.iter().map(|o| o.adapted_step_size).sum::<f64>() / k,
        n_divergent: outputs.iter().map(|o| o.n_divergent()).sum(),
        rhat_v: rhat.rhat,
    })
}

/// For each acceptance target: adapt, sample, and record achieved acceptance,
/// divergence count and the exact-sample R-hat of the scanned coordinate.
pub fn divergence_scan<M: TargetModel + ?Sized>(model: &M, targets: &[f64], cfg: &ScanConfig) -> Result<Vec<ScanRow>> {
    if cfg.chain.n_samples < 4 {
        return Err(Error::Contract(format!("scan chains need at least 4 draws, got {}", cfg.chain.n_samples)));
    }
    if cfg.n_chains == 0 {
        return Err(Error::Contract("scan needs at least one chain".into()));
    }
    if cfg.scalar_index >= model.dim() {
        return Err(Error::Contract(format!("scalar index {} out of range", cfg.scalar_index)));
    }
    if targets.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Contract("scan targets must be sorted ascending".into()));
    }
    targets.iter().map(|&t| scan_target(model, t, cfg)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PhaseState;
    use rand_distr::{Distribution, StandardNormal};

    fn normals(seed: u64, n: usize) -> Vec<f64> {
        let mut r = rng::from_seed(seed);
        (0..n).map(|_| StandardNormal.sample(&mut r)).collect()
    }

    fn traj(errors: Vec<f64>, finite: bool) -> Trajectory {
        let x = if finite { 0.0 } else { f64::NAN };
        let states = errors.iter().map(|_| PhaseState { position: vec![x], momentum: vec![0.0] }).collect();
        Trajectory { n_steps: errors.len() - 1, states, energy_errors: errors, divergent: false }
    }

    #[test]
    fn divergence_rules() {
        let p = DivergencePolicy::default();
        assert!(!detect_divergence(&traj(vec![0.0; 5], true), &p));
        assert!(detect_divergence(&traj(vec![0.0; 5], false), &p));
        assert!(detect_divergence(&traj(vec![0.0, 1.0, f64::NAN], true), &p));
        assert!(detect_divergence(&traj(vec![0.0, 1001.0], true), &p));
        assert!(!detect_divergence(&traj(vec![0.0, -5000.0], true), &p));
        assert!(p.treat_nonfinite_as_divergent());
        assert!(DivergencePolicy::new(0.0).is_err());
    }

    #[test]
    fn lowering_threshold_keeps_divergences() {
        let errs = [vec![0.0, 3.0, 50.0], vec![0.0, 700.0], vec![0.0, 1e4], vec![0.0, -2.0]];
        for e in errs {
            let t = traj(e, true);
            let mut prev = false;
            for thr in [1e5, 1e3, 100.0, 10.0, 1.0, 0.1] {
                let now = detect_divergence(&t, &DivergencePolicy::new(thr).unwrap());
                assert!(now || !prev);
                prev = now;
            }
        }
    }

    #[test]
    fn rhat_formula_on_small_input() {
        // halves: [1,2] [3,4] [2,2] [2,4] → means 1.5, 3.5, 2, 3; within vars .5,.5,0,2
        let r = split_rhat(&[vec![1.0, 2.0, 3.0, 4.0], vec![2.0, 2.0, 2.0, 4.0]]).unwrap();
        let (n, w) = (2.0, 0.75);
        let means = [1.5, 3.5, 2.0, 3.0];
        let mm = means.iter().sum::<f64>() / 4.0;
        let b = n * means.iter().map(|m| (m - mm) * (m - mm)).sum::<f64>() / 3.0;
        let expected = (((n - 1.0) / n * w + b / n) / w).sqrt();
        assert!((r.rhat - expected).abs() < 1e-14);
        assert_eq!(r.n_draws_per_half, 2);
        assert_eq!(r.n_chains_used, 2);
    }

    #[test]
    fn well_mixed_chains() {
        let r = split_rhat(&[normals(1, 5000), normals(2, 5000)]).unwrap();
        assert!(r.rhat < 1.01, "{}", r.rhat);
    }

    #[test]
    fn disjoint_chains_fail() {
        let a: Vec<f64> = normals(3, 1000).iter().map(|x| 1e-3 * x).collect();
        let b: Vec<f64> = normals(4, 1000).iter().map(|x| 10.0 + 1e-3 * x).collect();
        assert!(split_rhat(&[a, b]).unwrap().rhat > 1.5);
    }

    #[test]
    fn duplicated_chain() {
        let a = normals(5, 2000);
        let dup = split_rhat(&[a.clone(), a.clone()]).unwrap().rhat;
        // the same computation on the four halves directly
        let n = 1000;
        let halves = [&a[..n], &a[n..], &a[..n], &a[n..]];
        let means: Vec<f64> = halves.iter().map(|h| mean(h)).collect();
        let w = mean(&halves.iter().map(|h| sample_variance(h)).collect::<Vec<_>>());
        let b = n as f64 * sample_variance(&means);
        let direct = (((n as f64 - 1.0) / n as f64 * w + b / n as f64) / w).sqrt();
        assert!((dup - direct).abs() < 1e-12);
        assert!((dup - 1.0).abs() < 0.01);
    }

    #[test]
    fn rhat_errors() {
        assert!(matches!(split_rhat(&[vec![1.0; 10]]), Err(Error::Contract(_))));
        assert!(matches!(split_rhat(&[vec![1.0; 3], vec![1.0; 3]]), Err(Error::Contract(_))));
        assert!(matches!(split_rhat(&[vec![1.0; 10], vec![2.0; 10]]), Err(Error::DegenerateVariance)));
        assert!(matches!(rhat_with_exact(&[vec![0.0; 10], vec![1.0; 10]], &[0.0; 5], 1), Err(Error::Contract(_))));
    }

    #[test]
    fn exact_pseudo_chains() {
        let mcmc = [normals(10, 2000), normals(11, 2000), normals(12, 2000)];
        let r = rhat_with_exact(&mcmc, &normals(13, 4000), 2).unwrap();
        assert!(r.rhat < 1.01);
        assert_eq!(r.n_chains_used, 5);

        let frozen = [vec![3.0; 2000], vec![3.0; 2000]];
        let mut tiny = frozen.clone();
        tiny[0][0] += 1e-9;
        let r = rhat_with_exact(&tiny, &normals(14, 2000), 1).unwrap();
        assert!(r.rhat > 1.5, "{}", r.rhat);
    }

    #[test]
    fn truncates_to_common_length() {
        let a = normals(20, 1000);
        let b = normals(21, 1500);
        let r = split_rhat(&[a.clone(), b.clone()]).unwrap();
        let r2 = split_rhat(&[a, b[..1000].to_vec()]).unwrap();
        assert_eq!(r, r2);
    }

    proptest::proptest! {
        #[test]
        fn affine_invariance(shift in -100.0f64..100.0, scale in 0.01f64..100.0, seed in 0u64..1000) {
            let chains = [normals(seed, 200), normals(seed + 1, 200).iter().map(|x| x + 0.3).collect::<Vec<_>>()];
            let mapped: Vec<Vec<f64>> = chains.iter().map(|c| c.iter().map(|x| shift + scale * x).collect()).collect();
            let a = split_rhat(&chains).unwrap().rhat;
            let b = split_rhat(&mapped).unwrap().rhat;
            proptest::prop_assert!((a - b).abs() < 1e-10);
        }
    }
}
