//! Step-size tuning from the Gaussian approximation of the Hamiltonian error.
//!
//! When `Δ ~ N(-σ²/2, σ²)` the mean Metropolis acceptance probability and the
//! mean inverse acceptance have closed forms. Writing `σ² = 2αε^{2k}` gives
//!
//! ```text
//! a(ε)       = 2Φ(-√(α/2) εᵏ)
//! E[1/a](ε)  = Φ(-√(α/2) εᵏ) + Φ(3√(α/2) εᵏ)·exp(2αε^{2k})
//! ε(a)       = [√(2/α) Φ⁻¹(1 - a/2)]^{1/k}
//! ```
//!
//! Substituting `ε(a)` into the two Jensen bounds on the expected cost gives
//! lower and upper cost curves in `a` alone, up to a common factor `α^{1/(2k)}`;
//! their minimisers are the optimal acceptance targets.
//!
//! Note the `α` here is half the coefficient of `κ₂ = c·ε^{2k}` returned by
//! [`crate::error_stats::fit_alpha`]; use [`AcceptanceModel::from_kappa2_fit`]
//! to convert.

use crate::error_stats::AlphaFit;
use crate::model::TargetModel;
use crate::normal;
use crate::sampler::{run_chain, AdaptationConfig, ChainConfig};
use crate::{Error, Result};

/// Parameters `(α, k)` of the acceptance curve `a = 2Φ(-√(α/2) εᵏ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AcceptanceModel {
    pub alpha: f64,
    pub k: u32,
}

impl AcceptanceModel {
    pub fn new(alpha: f64, k: u32) -> Result<Self> {
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::Domain(format!("alpha must be positive, got {alpha}")));
        }
        if k != 2 && k != 4 {
            return Err(Error::Domain(format!("order must be 2 or 4, got {k}")));
        }
        Ok(Self { alpha, k })
    }

    /// Acceptance model implied by a fitted `κ₂ = c·ε^{2k}`.
    ///
    /// With `Var(Δ) = c·ε^{2k}` the Gaussian acceptance is `2Φ(-√c εᵏ/2)`,
    /// i.e. `α = c/2` in this parameterisation.
    pub fn from_kappa2_fit(fit: &AlphaFit) -> Result<Self> {
        Self::new(fit.alpha / 2.0, fit.k)
    }

    fn scaled_eps(&self, eps: f64) -> f64 {
        (self.alpha / 2.0).sqrt() * eps.powi(self.k as i32)
    }
}

/// Mean acceptance probability `2Φ(-√(α/2) εᵏ)`.
pub fn acceptance_curve(m: &AcceptanceModel, eps: f64) -> f64 {
    2.0 * normal::cdf(-m.scaled_eps(eps))
}

/// Step size achieving mean acceptance `a`.
pub fn epsilon_for_acceptance(m: &AcceptanceModel, a: f64) -> Result<f64> {
    check_acceptance(a)?;
    Ok(((2.0 / m.alpha).sqrt() * normal::quantile(1.0 - a / 2.0)).powf(1.0 / m.k as f64))
}

/// Gaussian approximation of `E[1/a(q,p)]`; `+inf` once the exponential overflows.
pub fn expected_inverse_acceptance(m: &AcceptanceModel, eps: f64) -> f64 {
    let x = m.scaled_eps(eps);
    let tail = normal::cdf(3.0 * x) * (2.0 * m.alpha * eps.powi(2 * m.k as i32)).exp();
    let v = normal::cdf(-x) + tail;
    if v.is_nan() {
        f64::INFINITY
    } else {
        v
    }
}

fn check_acceptance(a: f64) -> Result<()> {
    if a > 0.0 && a < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("acceptance must lie in (0, 1), got {a}")))
    }
}

/// Lower Jensen bound on `E[1/a]` at mean acceptance `a`: `1/a`.
pub fn inverse_acceptance_lower(a: f64) -> Result<f64> {
    check_acceptance(a)?;
    Ok(1.0 / a)
}

/// Gaussian-approximate upper bound on `E[1/a]` at mean acceptance `a`:
/// `a/2 + Φ(-3x)·exp(4x²)` with `x = Φ⁻¹(a/2)`.
pub fn inverse_acceptance_upper(a: f64) -> Result<f64> {
    check_acceptance(a)?;
    Ok(ln_inverse_acceptance_upper(a).exp())
}

// log-sum-exp of ln(a/2) and ln Φ(-3x) + 4x²; the second term overflows for small a
fn ln_inverse_acceptance_upper(a: f64) -> f64 {
    let x = normal::quantile(a / 2.0);
    let first = (a / 2.0).ln();
    let second = normal::cdf(-3.0 * x).ln() + 4.0 * x * x;
    let hi = first.max(second);
    hi + ((first - hi).exp() + (second - hi).exp()).ln()
}

// ln of ε(a) with the α-constant dropped
fn ln_shape_epsilon(a: f64, k: u32) -> f64 {
    normal::quantile(1.0 - a / 2.0).ln() / k as f64
}

fn check_order(k: u32) -> Result<()> {
    if k == 2 || k == 4 {
        Ok(())
    } else {
        Err(Error::Domain(format!("order must be 2 or 4, got {k}")))
    }
}

/// Lower cost bound `1/(a·[Φ⁻¹(1 - a/2)]^{1/k})`, `α`-constant dropped.
pub fn cost_lower(a: f64, k: u32) -> Result<f64> {
    check_acceptance(a)?;
    check_order(k)?;
    Ok((-a.ln() - ln_shape_epsilon(a, k)).exp())
}

/// Upper cost bound `[a/2 + Φ(-3Φ⁻¹(a/2))·exp(4Φ⁻¹(a/2)²)]/[Φ⁻¹(1 - a/2)]^{1/k}`,
/// `α`-constant dropped. Evaluated in log space.
pub fn cost_upper(a: f64, k: u32) -> Result<f64> {
    check_acceptance(a)?;
    check_order(k)?;
    Ok((ln_inverse_acceptance_upper(a) - ln_shape_epsilon(a, k)).exp())
}

/// Lower cost bound including the `α`-dependent scale, `1/(ε(a)·a)`.
pub fn cost_lower_scaled(m: &AcceptanceModel, a: f64) -> Result<f64> {
    Ok(inverse_acceptance_lower(a)? / epsilon_for_acceptance(m, a)?)
}

/// Upper cost bound including the `α`-dependent scale.
pub fn cost_upper_scaled(m: &AcceptanceModel, a: f64) -> Result<f64> {
    Ok(inverse_acceptance_upper(a)? / epsilon_for_acceptance(m, a)?)
}

/// Both bounds at one acceptance level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostBounds {
    pub acceptance: f64,
    pub lower: f64,
    pub upper: f64,
}

impl CostBounds {
    pub fn at(a: f64, k: u32) -> Result<Self> {
        Ok(Self { acceptance: a, lower: cost_lower(a, k)?, upper: cost_upper(a, k)? })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bound {
    Lower,
    Upper,
}

pub const OPTIMUM_BRACKET: (f64, f64) = (0.01, 0.99);

/// Golden-section minimiser of a unimodal function on `[lo, hi]`.
pub fn golden_section_min<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Acceptance probability minimising the selected cost bound for order `k`.
pub fn optimal_acceptance(k: u32, bound: Bound) -> Result<f64> {
    check_order(k)?;
    let f = |a: f64| match bound {
        Bound::Lower => cost_lower(a, k),
        Bound::Upper => cost_upper(a, k),
    }
    .unwrap_or(f64::INFINITY);
    Ok(golden_section_min(f, OPTIMUM_BRACKET.0, OPTIMUM_BRACKET.1, 1e-6))
}

/// Dual-averaging constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualAveragingParams {
    pub gamma: f64,
    pub t0: f64,
    pub kappa: f64,
}

impl Default for DualAveragingParams {
    fn default() -> Self {
        Self { gamma: 0.05, t0: 10.0, kappa: 0.75 }
    }
}

/// Nesterov dual averaging on `log ε` toward a target mean acceptance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualAveragingState {
    pub log_eps: f64,
    pub log_eps_avg: f64,
    pub h_avg: f64,
    pub iteration: u64,
    pub target: f64,
    pub gamma: f64,
    pub t0: f64,
    pub kappa_da: f64,
    /// Shrinkage point, `log(10·ε₀)`.
    pub mu: f64,
}

impl DualAveragingState {
    pub fn new(initial_eps: f64, target: f64, params: DualAveragingParams) -> Result<Self> {
        if !(initial_eps.is_finite() && initial_eps > 0.0) {
            return Err(Error::Domain(format!("initial step size must be positive, got {initial_eps}")));
        }
        check_acceptance(target)?;
        if !(params.gamma > 0.0 && params.t0 >= 0.0 && params.kappa > 0.5 && params.kappa <= 1.0) {
            return Err(Error::Domain(format!("invalid dual averaging parameters {params:?}")));
        }
        Ok(Self {
            log_eps: initial_eps.ln(),
            log_eps_avg: 0.0,
            h_avg: 0.0,
            iteration: 0,
            target,
            gamma: params.gamma,
            t0: params.t0,
            kappa_da: params.kappa,
            mu: (10.0 * initial_eps).ln(),
        })
    }

    /// One update from an observed acceptance probability.
    pub fn adapt_step(&self, observed_accept_prob: f64) -> Self {
        let observed = if observed_accept_prob.is_nan() { 0.0 } else { observed_accept_prob.clamp(0.0, 1.0) };
        let mut s = *self;
        s.iteration += 1;
        let t = s.iteration as f64;
        let eta = 1.0 / (t + s.t0);
        s.h_avg = (1.0 - eta) * s.h_avg + eta * (s.target - observed);
        s.log_eps = s.mu - t.sqrt() / s.gamma * s.h_avg;
        let w = t.powf(-s.kappa_da);
        s.log_eps_avg = w * s.log_eps + (1.0 - w) * s.log_eps_avg;
        s
    }

    /// Working step size during warmup.
    pub fn step_size(&self) -> f64 {
        self.log_eps.exp()
    }

    /// Frozen step size after warmup.
    pub fn final_step_size(&self) -> f64 {
        if self.iteration == 0 {
            self.log_eps.exp()
        } else {
            self.log_eps_avg.exp()
        }
    }
}

/// One probe of the target-relaxation search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelaxationStep {
    pub target: f64,
    pub divergences: usize,
    pub step_size: f64,
    pub achieved_acceptance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuningReport {
    pub fitted_alpha: Option<f64>,
    pub target_acceptance: f64,
    pub achieved_acceptance: f64,
    pub final_step_size: f64,
    pub n_divergent: usize,
    pub relaxation_trace: Vec<RelaxationStep>,
}

/// Raises the acceptance target by `step` until a probe run is free of
/// divergences.
///
/// Each probe adapts the step size over `config.n_warmup` transitions toward
/// the current target, then counts divergent transitions among the following
/// `config.n_samples`. The last probe is made at exactly `max_target`.
pub fn robust_target_search<M: TargetModel + ?Sized>(
    model: &M,
    config: &ChainConfig,
    initial_target: f64,
    step: f64,
    max_target: f64,
) -> Result<TuningReport> {
    if !(0.0 < initial_target && initial_target < max_target && max_target < 1.0) {
        return Err(Error::Domain(format!(
            "need 0 < initial_target < max_target < 1, got {initial_target} and {max_target}"
        )));
    }
    if !(step > 0.0) {
        return Err(Error::Domain(format!("relaxation step must be positive, got {step}")));
    }
    let params = config.adaptation.map(|a| a.params).unwrap_or_default();
    let mut trace = Vec::new();
    let mut i = 0u32;
    loop {
        let target = (initial_target + i as f64 * step).min(max_target);
        let mut probe = config.clone();
        probe.adaptation = Some(AdaptationConfig { target, params });
        let out = run_chain(model, &probe)?;
        let sampling = out.sampling_records();
        let divergences = sampling.iter().filter(|r| r.divergent).count();
        let achieved = sampling.iter().map(|r| r.accept_prob).sum::<f64>() / sampling.len() as f64;
        trace.push(RelaxationStep { target, divergences, step_size: out.adapted_step_size, achieved_acceptance: achieved });
        if divergences == 0 {
            return Ok(TuningReport {
                fitted_alpha: None,
                target_acceptance: target,
                achieved_acceptance: achieved,
                final_step_size: out.adapted_step_size,
                n_divergent: 0,
                relaxation_trace: trace,
            });
        }
        if target >= max_target {
            return Err(Error::TargetSearchExhausted { max_target, trace });
        }
        i += 1;
    }
}
