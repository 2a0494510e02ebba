//! Symmetric symplectic integrators, trajectories and the Metropolis proposal.
//!
//! Two schemes are provided: the kick-drift-kick leapfrog (order 2) and the
//! Yoshida triple-jump composition of three leapfrog sub-steps (order 4). Both
//! are time-reversible and volume-preserving, so the proposal "integrate, then
//! flip the momentum" is an involution.
//!
//! Non-finite states are data, not errors: a trajectory that blows up is
//! truncated at the first divergent step and flagged.

use rand::{Rng, RngCore};

use crate::diagnostics::{detect_divergence, DivergencePolicy};
use crate::model::{energy, hessian_vector, PhaseState, TargetModel};
use crate::{Error, Result};

/// Yoshida outer coefficient `1/(2 - 2^{1/3})`.
pub const YOSHIDA_C1: f64 = 1.351_207_191_959_657_8;
/// Yoshida middle coefficient `-2^{1/3}/(2 - 2^{1/3})`.
pub const YOSHIDA_C0: f64 = -1.702_414_383_919_315_3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scheme {
    Leapfrog,
    Yoshida4,
}

impl Scheme {
    /// Order `k` of the scheme.
    pub fn order(self) -> u32 {
        match self {
            Scheme::Leapfrog => 2,
            Scheme::Yoshida4 => 4,
        }
    }

    pub fn from_order(k: u32) -> Result<Self> {
        match k {
            2 => Ok(Scheme::Leapfrog),
            4 => Ok(Scheme::Yoshida4),
            _ => Err(Error::Domain(format!("integrator order must be 2 or 4, got {k}"))),
        }
    }

    /// Number of gradient evaluations per step once the gradient is cached.
    pub fn gradients_per_step(self) -> usize {
        match self {
            Scheme::Leapfrog => 1,
            Scheme::Yoshida4 => 3,
        }
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "leapfrog" => Ok(Scheme::Leapfrog),
            "yoshida4" => Ok(Scheme::Yoshida4),
            _ => Err(Error::Domain(format!("unknown integrator '{s}' (expected leapfrog or yoshida4)"))),
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scheme::Leapfrog => "leapfrog",
            Scheme::Yoshida4 => "yoshida4",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegratorConfig {
    step_size: f64,
    scheme: Scheme,
    pub divergence: DivergencePolicy,
}

impl IntegratorConfig {
    pub fn new(step_size: f64, scheme: Scheme) -> Result<Self> {
        if !(step_size.is_finite() && step_size > 0.0) {
            return Err(Error::Domain(format!("step size must be positive and finite, got {step_size}")));
        }
        Ok(Self { step_size, scheme, divergence: DivergencePolicy::default() })
    }

    pub fn leapfrog(step_size: f64) -> Result<Self> {
        Self::new(step_size, Scheme::Leapfrog)
    }

    pub fn yoshida4(step_size: f64) -> Result<Self> {
        Self::new(step_size, Scheme::Yoshida4)
    }

    pub fn step_size(&self) -> f64 {
        self.step_size
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn order(&self) -> u32 {
        self.scheme.order()
    }

    pub fn with_step_size(&self, step_size: f64) -> Result<Self> {
        Ok(Self { divergence: self.divergence, ..Self::new(step_size, self.scheme)? })
    }

    /// Same scheme with the step size shrunk or stretched to `τ/L`, where
    /// `L = round(τ/ε)`, so the trajectory covers exactly `τ`.
    pub fn snapped_to(&self, tau: f64) -> Result<Self> {
        let l = step_count(tau, self.step_size);
        self.with_step_size(tau / l as f64)
    }
}

/// Integration time `τ` with optional uniform jitter on `[τ(1-j), τ(1+j)]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegrationTime {
    tau: f64,
    jitter: f64,
}

impl IntegrationTime {
    pub fn new(tau: f64, jitter: f64) -> Result<Self> {
        if !(tau.is_finite() && tau > 0.0) {
            return Err(Error::Domain(format!("integration time must be positive, got {tau}")));
        }
        if !(0.0..1.0).contains(&jitter) {
            return Err(Error::Domain(format!("jitter must lie in [0, 1), got {jitter}")));
        }
        Ok(Self { tau, jitter })
    }

    pub fn fixed(tau: f64) -> Result<Self> {
        Self::new(tau, 0.0)
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Step count for step size `eps`. Jitter is applied only when a random
    /// source is supplied.
    pub fn n_steps(&self, eps: f64, rng: Option<&mut dyn RngCore>) -> usize {
        let tau = match rng {
            Some(r) if self.jitter > 0.0 => {
                let u: f64 = r.random();
                self.tau * (1.0 + self.jitter * (2.0 * u - 1.0))
            }
            _ => self.tau,
        };
        step_count(tau, eps)
    }
}

/// `L = round(τ/ε)`, half away from zero, at least 1.
///
/// The ratio is nudged up by a relative 1e-12 first so that decimal inputs
/// such as `0.35/0.1` (3.4999999999999996 in binary) round as written.
pub fn step_count(tau: f64, eps: f64) -> usize {
    let ratio = (tau / eps) * (1.0 + 1e-12);
    (ratio.round() as usize).max(1)
}

/// A simulated trajectory. `states[0]` is the start; `energy_errors[t]` is
/// `H(z_t) - H(z_0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<PhaseState>,
    pub energy_errors: Vec<f64>,
    /// Steps actually taken; smaller than planned if the trajectory diverged.
    pub n_steps: usize,
    pub divergent: bool,
}

impl Trajectory {
    pub fn last(&self) -> &PhaseState {
        self.states.last().expect("trajectory always holds its start state")
    }
}

/// One kick-drift-kick step. `grad` must hold `∇V(q)` on entry and holds
/// `∇V(q')` on exit.
#[inline]
fn leapfrog_cached<M: TargetModel + ?Sized>(model: &M, z: &mut PhaseState, eps: f64, grad: &mut [f64]) {
    let half = 0.5 * eps;
    for (p, g) in z.momentum.iter_mut().zip(grad.iter()) {
        *p -= half * g;
    }
    for (q, p) in z.position.iter_mut().zip(&z.momentum) {
        *q += eps * p;
    }
    model.gradient(&z.position, grad);
    for (p, g) in z.momentum.iter_mut().zip(grad.iter()) {
        *p -= half * g;
    }
}

#[inline]
fn step_cached<M: TargetModel + ?Sized>(
    model: &M,
    z: &mut PhaseState,
    eps: f64,
    scheme: Scheme,
    grad: &mut [f64],
) {
    match scheme {
        Scheme::Leapfrog => leapfrog_cached(model, z, eps, grad),
        Scheme::Yoshida4 => {
            leapfrog_cached(model, z, YOSHIDA_C1 * eps, grad);
            leapfrog_cached(model, z, YOSHIDA_C0 * eps, grad);
            leapfrog_cached(model, z, YOSHIDA_C1 * eps, grad);
        }
    }
}

fn gradient_at<M: TargetModel + ?Sized>(model: &M, q: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; q.len()];
    model.gradient(q, &mut g);
    g
}

/// One leapfrog step: `p½ = p - ε/2 ∇V(q)`, `q' = q + ε p½`, `p' = p½ - ε/2 ∇V(q')`.
pub fn leapfrog_step<M: TargetModel + ?Sized>(model: &M, z: &PhaseState, eps: f64) -> PhaseState {
    let mut out = z.clone();
    let mut grad = gradient_at(model, &z.position);
    leapfrog_cached(model, &mut out, eps, &mut grad);
    out
}

/// One fourth-order step: leapfrog sub-steps of `c₁ε`, `c₀ε`, `c₁ε`.
pub fn yoshida4_step<M: TargetModel + ?Sized>(model: &M, z: &PhaseState, eps: f64) -> PhaseState {
    let mut out = z.clone();
    let mut grad = gradient_at(model, &z.position);
    step_cached(model, &mut out, eps, Scheme::Yoshida4, &mut grad);
    out
}

/// One step of `scheme`.
pub fn step<M: TargetModel + ?Sized>(model: &M, z: &PhaseState, eps: f64, scheme: Scheme) -> PhaseState {
    match scheme {
        Scheme::Leapfrog => leapfrog_step(model, z, eps),
        Scheme::Yoshida4 => yoshida4_step(model, z, eps),
    }
}

/// Result of an in-place simulation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Simulated {
    pub n_steps: usize,
    pub divergent: bool,
}

/// Advances `z` in place by up to `n_steps`, stopping at the first step whose
/// energy error is non-finite or exceeds the policy threshold. `observe` sees
/// every post-step state with its energy error.
pub(crate) fn simulate<M, F>(
    model: &M,
    z: &mut PhaseState,
    cfg: &IntegratorConfig,
    n_steps: usize,
    grad: &mut [f64],
    h0: f64,
    mut observe: F,
) -> Simulated
where
    M: TargetModel + ?Sized,
    F: FnMut(&PhaseState, f64),
{
    model.gradient(&z.position, grad);
    for t in 1..=n_steps {
        step_cached(model, z, cfg.step_size, cfg.scheme, grad);
        let err = energy(model, z) - h0;
        observe(z, err);
        if cfg.divergence.is_divergent_error(err) {
            return Simulated { n_steps: t, divergent: true };
        }
    }
    Simulated { n_steps, divergent: false }
}

/// Integrates Hamilton's equations for `round(τ_eff/ε)` steps from `z0`.
pub fn integrate<M: TargetModel + ?Sized>(
    model: &M,
    z0: &PhaseState,
    cfg: &IntegratorConfig,
    time: &IntegrationTime,
    rng: Option<&mut dyn RngCore>,
) -> Trajectory {
    let n = time.n_steps(cfg.step_size, rng);
    integrate_steps(model, z0, cfg, n)
}

/// Integrates exactly `n_steps` steps (truncated on divergence).
pub fn integrate_steps<M: TargetModel + ?Sized>(
    model: &M,
    z0: &PhaseState,
    cfg: &IntegratorConfig,
    n_steps: usize,
) -> Trajectory {
    let mut states = Vec::with_capacity(n_steps + 1);
    let mut energy_errors = Vec::with_capacity(n_steps + 1);
    states.push(z0.clone());
    energy_errors.push(0.0);
    let mut z = z0.clone();
    let mut grad = vec![0.0; z0.dim()];
    let h0 = energy(model, z0);
    let sim = simulate(model, &mut z, cfg, n_steps, &mut grad, h0, |s, e| {
        states.push(s.clone());
        energy_errors.push(e);
    });
    let mut traj = Trajectory { states, energy_errors, n_steps: sim.n_steps, divergent: false };
    traj.divergent = detect_divergence(&traj, &cfg.divergence);
    traj
}

/// The Metropolis proposal: integrate, then reverse the momentum.
pub fn propose<M: TargetModel + ?Sized>(
    model: &M,
    z: &PhaseState,
    cfg: &IntegratorConfig,
    time: &IntegrationTime,
    rng: Option<&mut dyn RngCore>,
) -> (PhaseState, Trajectory) {
    let traj = integrate(model, z, cfg, time, rng);
    let mut out = traj.last().clone();
    out.flip_momentum();
    (out, traj)
}

/// `Δ = H(z) - H(z_prop)`; `-inf` when `H(z_prop)` is not finite.
pub fn hamiltonian_error<M: TargetModel + ?Sized>(model: &M, z: &PhaseState, z_prop: &PhaseState) -> f64 {
    error_from_energies(energy(model, z), energy(model, z_prop))
}

#[inline]
pub(crate) fn error_from_energies(h: f64, h_prop: f64) -> f64 {
    let delta = h - h_prop;
    if h_prop.is_finite() && delta.is_finite() {
        delta
    } else {
        f64::NEG_INFINITY
    }
}

/// Leading modified-Hamiltonian correction `G` of the leapfrog for a unit-metric
/// Euclidean kinetic energy: `G = (2|∇V|² - pᵀ∇²V p)/24`.
pub fn correction_g<M: TargetModel + ?Sized>(model: &M, z: &PhaseState, scheme: Scheme) -> Result<f64> {
    if scheme != Scheme::Leapfrog {
        return Err(Error::Unsupported(format!("no modified-Hamiltonian correction implemented for {scheme}")));
    }
    let grad = gradient_at(model, &z.position);
    let hp = hessian_vector(model, &z.position, &z.momentum);
    let grad_sq: f64 = grad.iter().map(|g| g * g).sum();
    let curvature: f64 = z.momentum.iter().zip(&hp).map(|(p, h)| p * h).sum();
    Ok((2.0 * grad_sq - curvature) / 24.0)
}

/// Leading-order mean energy change `(1/64)·ε⁴·(1 - cos 2τ)` for the 1-D
/// standard Gaussian under the leapfrog.
///
/// This is the mean *increase* `E[H(z') - H(z)]` over the canonical
/// distribution. The Hamiltonian error `Δ = H(z) - H(z')` has the opposite
/// sign: `E[exp(Δ)] = 1` forces `E[Δ] ≤ 0`.
pub fn analytic_mean_error_gaussian(eps: f64, tau: f64) -> f64 {
    eps.powi(4) * (1.0 - (2.0 * tau).cos()) / 64.0
}
