//! The HMC transition and seeded chain runners.

use rand::{Rng, RngCore};
use rayon::prelude::*;

use crate::integrator::{error_from_energies, simulate, IntegrationTime, IntegratorConfig};
use crate::model::{energy, fill_momentum, PhaseState, TargetModel};
use crate::rng;
use crate::tuning::{DualAveragingParams, DualAveragingState};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionRecord {
    pub accepted: bool,
    /// Hamiltonian error `Δ` of the proposal; `-inf` if the energy blew up.
    pub delta: f64,
    pub accept_prob: f64,
    pub divergent: bool,
    pub n_steps: usize,
    pub step_size_used: f64,
}

/// How a chain picks its starting position.
#[derive(Debug, Clone, PartialEq)]
pub enum Initializer {
    Zeros,
    /// An exact draw from the target.
    Exact,
    Explicit(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptationConfig {
    pub target: f64,
    pub params: DualAveragingParams,
}

impl AdaptationConfig {
    pub fn new(target: f64) -> Self {
        Self { target, params: DualAveragingParams::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainConfig {
    pub n_warmup: usize,
    pub n_samples: usize,
    pub seed: u64,
    pub init: Initializer,
    /// Integrator; its step size is the initial step size when adapting.
    pub integrator: IntegratorConfig,
    pub time: IntegrationTime,
    pub adaptation: Option<AdaptationConfig>,
}

impl ChainConfig {
    pub fn new(integrator: IntegratorConfig, time: IntegrationTime, n_samples: usize, seed: u64) -> Self {
        Self { n_warmup: 0, n_samples, seed, init: Initializer::Zeros, integrator, time, adaptation: None }
    }

    pub fn with_warmup(mut self, n_warmup: usize) -> Self {
        self.n_warmup = n_warmup;
        self
    }

    pub fn with_adaptation(mut self, target: f64) -> Self {
        self.adaptation = Some(AdaptationConfig::new(target));
        self
    }

    pub fn with_init(mut self, init: Initializer) -> Self {
        self.init = init;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainOutput {
    /// Post-warmup positions, one row per sampling transition.
    pub draws: Vec<Vec<f64>>,
    /// Records for every transition, warmup first.
    pub records: Vec<TransitionRecord>,
    pub n_warmup: usize,
    pub adapted_step_size: f64,
}

impl ChainOutput {
    pub fn sampling_records(&self) -> &[TransitionRecord] {
        &self.records[self.n_warmup..]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.draws.iter().map(|row| row[j]).collect()
    }

    pub fn n_divergent(&self) -> usize {
        self.sampling_records().iter().filter(|r| r.divergent).count()
    }

    pub fn mean_accept_prob(&self) -> f64 {
        let r = self.sampling_records();
        r.iter().map(|r| r.accept_prob).sum::<f64>() / r.len() as f64
    }
}

/// Buffers reused across transitions of one chain.
struct Workspace {
    z: PhaseState,
    grad: Vec<f64>,
}

impl Workspace {
    fn new(d: usize) -> Self {
        Self { z: PhaseState { position: vec![0.0; d], momentum: vec![0.0; d] }, grad: vec![0.0; d] }
    }
}

fn transition_in_place<M, R>(
    model: &M,
    rng: &mut R,
    q: &mut [f64],
    cfg: &IntegratorConfig,
    time: &IntegrationTime,
    ws: &mut Workspace,
) -> TransitionRecord
where
    M: TargetModel + ?Sized,
    R: RngCore,
{
    ws.z.position.copy_from_slice(q);
    fill_momentum(rng, &mut ws.z.momentum);
    let n = time.n_steps(cfg.step_size(), Some(&mut *rng as &mut dyn RngCore));
    let h0 = energy(model, &ws.z);
    let sim = simulate(model, &mut ws.z, cfg, n, &mut ws.grad, h0, |_, _| {});
    ws.z.flip_momentum();
    let delta = error_from_energies(h0, energy(model, &ws.z));
    let u: f64 = rng.random();
    let accept_prob = if sim.divergent { 0.0 } else { delta.exp().min(1.0) };
    let accepted = u < accept_prob;
    if accepted {
        q.copy_from_slice(&ws.z.position);
    }
    TransitionRecord {
        accepted,
        delta,
        accept_prob,
        divergent: sim.divergent,
        n_steps: sim.n_steps,
        step_size_used: cfg.step_size(),
    }
}

/// One HMC transition from position `q`: fresh standard-normal momentum,
/// reversible proposal, Metropolis correction with probability `min(1, eᵟ)`.
/// Divergent proposals are rejected with acceptance probability 0.
pub fn hmc_transition<M, R>(
    model: &M,
    rng: &mut R,
    q: &[f64],
    cfg: &IntegratorConfig,
    time: &IntegrationTime,
) -> Result<(Vec<f64>, TransitionRecord)>
where
    M: TargetModel + ?Sized,
    R: RngCore,
{
    if q.len() != model.dim() {
        return Err(Error::Contract(format!("position has length {}, model dimension is {}", q.len(), model.dim())));
    }
    let mut ws = Workspace::new(q.len());
    let mut next = q.to_vec();
    let rec = transition_in_place(model, rng, &mut next, cfg, time, &mut ws);
    Ok((next, rec))
}

fn initial_position<M: TargetModel + ?Sized>(model: &M, init: &Initializer, rng: &mut rng::SimRng) -> Result<Vec<f64>> {
    let q = match init {
        Initializer::Zeros => vec![0.0; model.dim()],
        Initializer::Exact => {
            let mut q = vec![0.0; model.dim()];
            model.sample_position(rng, &mut q)?;
            q
        }
        Initializer::Explicit(q) => q.clone(),
    };
    if q.len() != model.dim() {
        return Err(Error::Contract(format!("initial position has length {}, model dimension is {}", q.len(), model.dim())));
    }
    if q.iter().any(|x| !x.is_finite()) || !model.potential(&q).is_finite() {
        return Err(Error::Domain("initial position is not finite".into()));
    }
    Ok(q)
}

/// Runs one chain: warmup (adapting the step size if configured), then
/// sampling at the frozen step size. Reproducible from `config.seed`.
pub fn run_chain<M: TargetModel + ?Sized>(model: &M, config: &ChainConfig) -> Result<ChainOutput> {
    if config.n_samples == 0 {
        return Err(Error::Contract("n_samples must be >= 1".into()));
    }
    let mut rng = rng::from_seed(config.seed);
    let mut q = initial_position(model, &config.init, &mut rng)?;
    let mut ws = Workspace::new(model.dim());
    let mut records = Vec::with_capacity(config.n_warmup + config.n_samples);

    let mut cfg = config.integrator;
    let mut da = match config.adaptation {
        Some(a) => Some(DualAveragingState::new(cfg.step_size(), a.target, a.params)?),
        None => None,
    };
    for _ in 0..config.n_warmup {
        let rec = transition_in_place(model, &mut rng, &mut q, &cfg, &config.time, &mut ws);
        records.push(rec);
        if let Some(state) = da.as_mut() {
            *state = state.adapt_step(rec.accept_prob);
            cfg = cfg.with_step_size(state.step_size())?;
        }
    }
    if let Some(state) = da.as_ref() {
        cfg = cfg.with_step_size(state.final_step_size())?;
    }

    let mut draws = Vec::with_capacity(config.n_samples);
    for _ in 0..config.n_samples {
        let rec = transition_in_place(model, &mut rng, &mut q, &cfg, &config.time, &mut ws);
        records.push(rec);
        draws.push(q.clone());
    }
    Ok(ChainOutput { draws, records, n_warmup: config.n_warmup, adapted_step_size: cfg.step_size() })
}

/// Runs independent chains on up to `parallelism` threads. Output order and
/// content do not depend on `parallelism`.
pub fn run_chains<M: TargetModel + ?Sized>(
    model: &M,
    configs: &[ChainConfig],
    parallelism: usize,
) -> Result<Vec<ChainOutput>> {
    if configs.is_empty() {
        return Err(Error::Contract("need at least one chain configuration".into()));
    }
    if parallelism == 0 {
        return Err(Error::Contract("parallelism must be >= 1".into()));
    }
    let run = || -> Vec<Result<ChainOutput>> {
        configs.par_iter().map(|c| run_chain(model, c)).collect()
    };
    let results = if parallelism == 1 {
        configs.iter().map(|c| run_chain(model, c)).collect()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(parallelism)
            .build()
            .map_err(|e| Error::Contract(format!("cannot build thread pool: {e}")))?
            .install(run)
    };
    results
        .into_iter()
        .enumerate()
        .map(|(index, r)| r.map_err(|e| Error::Chain { index, source: Box::new(e) }))
        .collect()
}
