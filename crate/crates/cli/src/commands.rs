//! The subcommands: key tables, model and integrator construction from a
//! [`RunConfig`], and the experiment drivers.

use hmc_tune::diagnostics::{divergence_scan, DivergencePolicy, ScanConfig};
use hmc_tune::error_stats::{
    acceptance_expectations, cumulant_identity_residual, cumulants, fit_alpha, grid_seed, log_log_slope, moment,
    sample_errors, scaling_exponent, summarize, ErrorSampleSet, MAX_DIVERGENT_FRACTION,
};
use hmc_tune::integrator::{analytic_mean_error_gaussian, step, IntegrationTime, IntegratorConfig, Scheme};
use hmc_tune::model::{CatalogModel, PhaseState, TargetModel};
use hmc_tune::sampler::{run_chains, AdaptationConfig, ChainConfig, Initializer};
use hmc_tune::tuning::{
    acceptance_curve, inverse_acceptance_lower, inverse_acceptance_upper, optimal_acceptance, robust_target_search,
    AcceptanceModel, Bound, CostBounds, DualAveragingParams, RelaxationStep,
};

use crate::config::{KeySpec, RunConfig, AUTO};
use crate::output::{num, Output};
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    DeltaScan,
    ConstraintCheck,
    Bounds,
    GaussExperiment,
    FunnelScan,
    Sample,
    Scaling,
}

const MODEL_KEYS: &[(&str, &str)] =
    &[("model", "gaussian"), ("dim", "1"), ("scales", "none"), ("funnel_latent_dim", "50"), ("funnel_scale", "3.0")];
const DA_KEYS: &[(&str, &str)] = &[("da_gamma", "0.05"), ("da_t0", "10"), ("da_kappa", "0.75")];
const DIVERGENCE_KEY: (&str, &str) = ("divergence_threshold", "1000");

impl Experiment {
    pub const ALL: [Experiment; 7] = [
        Self::DeltaScan,
        Self::ConstraintCheck,
        Self::Bounds,
        Self::GaussExperiment,
        Self::FunnelScan,
        Self::Sample,
        Self::Scaling,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::DeltaScan => "delta-scan",
            Self::ConstraintCheck => "constraint-check",
            Self::Bounds => "bounds",
            Self::GaussExperiment => "gauss-experiment",
            Self::FunnelScan => "funnel-scan",
            Self::Sample => "sample",
            Self::Scaling => "scaling",
        }
    }

    /// Keys this subcommand reads, with defaults.
    pub fn keys(self) -> Vec<KeySpec> {
        let mut table: Vec<(&'static str, &'static str)> = Vec::new();
        match self {
            Self::DeltaScan => table.extend([
                ("eps_grid", "0.1,0.2,0.3,0.4,0.5,0.6"),
                ("tau_grid", "0.5,1,pi/2,3"),
                ("n_draws", "1e6"),
                DIVERGENCE_KEY,
            ]),
            Self::ConstraintCheck => {
                table.extend(MODEL_KEYS);
                table.extend([
                    ("integrator", "leapfrog"),
                    ("eps_grid", AUTO),
                    ("tau", "1.0"),
                    ("tau_jitter", "0"),
                    ("n_draws", AUTO),
                    DIVERGENCE_KEY,
                ]);
            }
            Self::Bounds => table.extend([("k", "2"), ("a_min", "0.05"), ("a_max", "0.99"), ("a_step", "0.01")]),
            Self::GaussExperiment => {
                table.extend(MODEL_KEYS);
                table.extend([
                    ("integrator", "leapfrog"),
                    ("tau", "2.0"),
                    ("tau_jitter", "0"),
                    ("eps_grid", AUTO),
                    ("fit_eps_grid", AUTO),
                    ("n_per_eps", "1e5"),
                    ("n_outer", "20000"),
                    ("n_inner", "100"),
                    DIVERGENCE_KEY,
                ]);
            }
            Self::FunnelScan => {
                table.extend(MODEL_KEYS);
                table.extend(DA_KEYS);
                table.extend([
                    ("integrator", "leapfrog"),
                    ("step_size", "0.1"),
                    ("tau", "2.0"),
                    ("tau_jitter", "0"),
                    ("targets", "0.6,0.7,0.8,0.85,0.9,0.95,0.99"),
                    ("n_chains", "4"),
                    ("n_samples", "2000"),
                    ("adapt_warmup", "1000"),
                    ("init", "exact"),
                    ("parallelism", "1"),
                    ("n_exact_chains", "1"),
                    ("target_accept", "0.6"),
                    ("relax_step", "0.05"),
                    ("relax_max_target", "0.99"),
                    ("probe_warmup", "1000"),
                    ("probe_samples", "2000"),
                    DIVERGENCE_KEY,
                ]);
                set_default(&mut table, "model", "funnel");
            }
            Self::Sample => {
                table.extend(MODEL_KEYS);
                table.extend(DA_KEYS);
                table.extend([
                    ("integrator", "leapfrog"),
                    ("step_size", "0.25"),
                    ("tau", "1.0"),
                    ("tau_jitter", "0"),
                    ("n_chains", "4"),
                    ("n_samples", "2000"),
                    ("adapt_warmup", "1000"),
                    ("adapt", "true"),
                    ("target_accept", "0.8"),
                    ("init", "exact"),
                    ("parallelism", "1"),
                    DIVERGENCE_KEY,
                ]);
            }
            Self::Scaling => {
                table.extend(MODEL_KEYS);
                table.extend([
                    ("tau", "2.4"),
                    ("tau_jitter", "0"),
                    ("eps_grid", "0.2,0.3,0.4"),
                    ("rows", "2:1,2:2,2:kappa2,4:2,4:kappa2"),
                    ("n_per_eps", "1e6"),
                    ("n_per_eps_mean", "1e7"),
                    ("synthetic", "false"),
                    DIVERGENCE_KEY,
                ]);
            }
        }
        std::iter::once(("seed", None)).chain(table.into_iter().map(|(k, d)| (k, Some(d)))).collect()
    }

    pub fn all_known_keys() -> Vec<&'static str> {
        let mut keys: Vec<&'static str> = Self::ALL.iter().flat_map(|e| e.keys()).map(|(k, _)| k).collect();
        keys.sort_unstable();
        keys.dedup();
        keys
    }

    pub fn run(self, cfg: &mut RunConfig, out: &Output) -> Result<(), CliError> {
        match self {
            Self::DeltaScan => delta_scan(cfg, out),
            Self::ConstraintCheck => constraint_check(cfg, out),
            Self::Bounds => bounds(cfg, out),
            Self::GaussExperiment => gauss_experiment(cfg, out),
            Self::FunnelScan => funnel_scan(cfg, out),
            Self::Sample => sample(cfg, out),
            Self::Scaling => scaling(cfg, out),
        }
    }
}

fn set_default(table: &mut [(&'static str, &'static str)], key: &str, value: &'static str) {
    if let Some(entry) = table.iter_mut().find(|(k, _)| *k == key) {
        entry.1 = value;
    }
}

fn build_model(cfg: &mut RunConfig) -> Result<CatalogModel, CliError> {
    let name = cfg.string("model")?;
    match name.as_str() {
        "gaussian" | "standard_gaussian" => Ok(CatalogModel::standard_gaussian(cfg.count("dim")?)?),
        "scaled_gaussian" => {
            let scales = cfg.reals("scales")?;
            cfg.set("dim", scales.len());
            Ok(CatalogModel::scaled_gaussian(scales)?)
        }
        "funnel" => Ok(CatalogModel::funnel(cfg.count("funnel_latent_dim")?, cfg.real("funnel_scale")?)?),
        other => Err(CliError::Config(format!(
            "unknown model `{other}` (expected gaussian, scaled_gaussian or funnel)"
        ))),
    }
}

fn scheme(cfg: &RunConfig) -> Result<Scheme, CliError> {
    match cfg.string("integrator")?.as_str() {
        "leapfrog" => Ok(Scheme::Leapfrog),
        "yoshida4" => Ok(Scheme::Yoshida4),
        other => Err(CliError::Config(format!("unknown integrator `{other}` (expected leapfrog or yoshida4)"))),
    }
}

fn policy(cfg: &RunConfig) -> Result<DivergencePolicy, CliError> {
    Ok(DivergencePolicy::new(cfg.real("divergence_threshold")?)?)
}

fn integrator(scheme: Scheme, eps: f64, policy: DivergencePolicy) -> Result<IntegratorConfig, CliError> {
    let mut ic = IntegratorConfig::new(eps, scheme)?;
    ic.divergence = policy;
    Ok(ic)
}

fn integration_time(cfg: &RunConfig) -> Result<IntegrationTime, CliError> {
    Ok(IntegrationTime::new(cfg.real("tau")?, cfg.real("tau_jitter")?)?)
}

fn da_params(cfg: &RunConfig) -> Result<DualAveragingParams, CliError> {
    Ok(DualAveragingParams { gamma: cfg.real("da_gamma")?, t0: cfg.real("da_t0")?, kappa: cfg.real("da_kappa")? })
}

fn initializer(cfg: &RunConfig) -> Result<Initializer, CliError> {
    match cfg.string("init")?.as_str() {
        "exact" => Ok(Initializer::Exact),
        "zeros" => Ok(Initializer::Zeros),
        other => Err(CliError::Config(format!("unknown init `{other}` (expected exact or zeros)"))),
    }
}

fn is_funnel(model: &CatalogModel) -> bool {
    matches!(model, CatalogModel::Funnel(_))
}

fn join(xs: &[f64]) -> String {
    xs.iter().map(|x| num(*x)).collect::<Vec<_>>().join(",")
}

fn too_divergent(set: &ErrorSampleSet) -> bool {
    set.divergent_fraction() > MAX_DIVERGENT_FRACTION
}

fn delta_scan(cfg: &mut RunConfig, out: &Output) -> Result<(), CliError> {
    let seed = cfg.unsigned("seed")?;
    let eps_grid = cfg.reals("eps_grid")?;
    let tau_grid = cfg.reals("tau_grid")?;
    let n = cfg.count("n_draws")?;
    let policy = policy(cfg)?;
    out.resolved(cfg)?;

    let model = CatalogModel::standard_gaussian(1)?;
    let mut rows = Vec::new();
    let mut flags = Vec::new();
    let mut done: Vec<(f64, f64)> = Vec::new();
    for (i, (tau, eps)) in tau_grid.iter().flat_map(|t| eps_grid.iter().map(move |e| (*t, *e))).enumerate() {
        let time = IntegrationTime::fixed(tau)?;
        let ic = integrator(Scheme::Leapfrog, eps, policy)?.snapped_to(tau)?;
        // neighbouring step sizes can snap to the same step count
        if done.contains(&(tau, ic.step_size())) {
            continue;
        }
        done.push((tau, ic.step_size()));
        let set = sample_errors(&model, grid_seed(seed, i), &ic, &time, n)?;
        let (mean, se) = moment(&set, 1)?;
        let e = ic.step_size();
        rows.push(vec![num(e), num(tau), num(mean), num(se), num(analytic_mean_error_gaussian(e, tau))]);
        if too_divergent(&set) {
            flags.push(vec![num(e), num(tau), set.n_divergent.to_string(), set.n.to_string()]);
        }
    }
    out.csv("delta_scan.csv", &["eps", "tau", "mc_mean", "mc_se", "analytic"], rows)?;
    out.csv("delta_scan_flags.csv", &["eps", "tau", "n_divergent", "n"], flags)
}

fn constraint_check(cfg: &mut RunConfig, out: &Output) -> Result<(), CliError> {
    let seed = cfg.unsigned("seed")?;
    let model = build_model(cfg)?;
    let scheme = scheme(cfg)?;
    let policy = policy(cfg)?;
    let time = integration_time(cfg)?;
    if cfg.is_auto("eps_grid") {
        cfg.set("eps_grid", if is_funnel(&model) { "0.001,0.002" } else { "0.1,0.2,0.3,0.4,0.5" });
    }
    if cfg.is_auto("n_draws") {
        cfg.set("n_draws", if is_funnel(&model) { 100_000 } else { 1_000_000 });
    }
    let eps_grid = cfg.reals("eps_grid")?;
    let n = cfg.count("n_draws")?;
    out.resolved(cfg)?;

    let mut rows = Vec::new();
    let mut identity = Vec::new();
    for (i, &eps) in eps_grid.iter().enumerate() {
        // a zero step size is the identity map: every error is exactly 0
        let set = if eps == 0.0 {
            ErrorSampleSet::from_samples(0.0, time.tau(), scheme.order(), vec![0.0; n])?
        } else {
            sample_errors(&model, grid_seed(seed, i), &integrator(scheme, eps, policy)?, &time, n)?
        };
        let s = summarize(&set)?;
        rows.push(vec![
            num(eps),
            num(time.tau()),
            scheme.order().to_string(),
            set.n.to_string(),
            num(s.mean),
            num(s.mean_se),
            num(s.kappa[0]),
            num(s.kappa[1]),
            num(s.kappa[2]),
            num(s.kappa[3]),
            num(s.exp_delta),
            num(s.exp_delta_se),
            set.n_divergent.to_string(),
        ]);
        let c = cumulants(&set)?;
        let (resid, resid_se) = cumulant_identity_residual(&set)?;
        identity.push(vec![
            num(eps),
            num(c.kappa[0]),
            num(c.standard_errors[0]),
            num(c.kappa[1]),
            num(c.standard_errors[1]),
            num(resid),
            num(resid_se),
        ]);
    }
    out.csv(
        "constraint_check.csv",
        &[
            "eps", "tau", "order", "n", "mean", "mean_se", "kappa1", "kappa2", "kappa3", "kappa4", "exp_delta",
            "exp_delta_se", "n_divergent",
        ],
        rows,
    )?;
    out.csv(
        "cumulant_identity.csv",
        &["eps", "kappa1", "kappa1_se", "kappa2", "kappa2_se", "identity_residual", "identity_residual_se"],
        identity,
    )
}

fn bounds(cfg: &mut RunConfig, out: &Output) -> Result<(), CliError> {
    let k = u32::try_from(cfg.count("k")?).map_err(|_| CliError::Config("`k` is too large".into()))?;
    let (lo, hi, da) = (cfg.real("a_min")?, cfg.real("a_max")?, cfg.real("a_step")?);
    if !(0.0 < lo && lo <= hi && hi < 1.0 && da > 0.0) {
        return Err(CliError::Config(format!(
            "acceptance grid needs 0 < a_min <= a_max < 1 and a_step > 0, got {lo}, {hi}, {da}"
        )));
    }
    out.resolved(cfg)?;

    let n = ((hi - lo) / da + 1e-9).floor() as usize + 1;
    let rows = (0..n)
        .map(|i| {
            // rounding keeps grid values like 0.06 free of accumulated float noise
            let a = ((lo + i as f64 * da) * 1e12).round() / 1e12;
            let b = CostBounds::at(a, k)?;
            Ok(vec![num(b.acceptance), num(b.lower), num(b.upper)])
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    out.csv("bounds.csv", &["a", "cost_lower", "cost_upper"], rows)?;
    let summary = vec![vec![
        k.to_string(),
        num(optimal_acceptance(k, Bound::Lower)?),
        num(optimal_acceptance(k, Bound::Upper)?),
    ]];
    out.csv("bounds_summary.csv", &["k", "argmin_lower", "argmin_upper"], summary)
}

/// Trace of the one-step map of `scheme` on the unit oscillator at step `h`.
/// The map is linearly stable iff the trace lies strictly inside (-2, 2).
fn oscillator_trace(scheme: Scheme, h: f64) -> Result<f64, CliError> {
    let osc = CatalogModel::standard_gaussian(1)?;
    let a = step(&osc, &PhaseState::new(vec![1.0], vec![0.0])?, h, scheme);
    let b = step(&osc, &PhaseState::new(vec![0.0], vec![1.0])?, h, scheme);
    Ok(a.position[0] + b.momentum[0])
}

fn step_grid(cfg: &mut RunConfig, key: &str, tau: f64, steps: &[usize]) -> Result<Vec<f64>, CliError> {
    if cfg.is_auto(key) {
        let grid: Vec<f64> = steps.iter().map(|l| tau / *l as f64).collect();
        cfg.set(key, join(&grid));
    }
    cfg.reals(key)
}

fn gauss_experiment(cfg: &mut RunConfig, out: &Output) -> Result<(), CliError> {
    let seed = cfg.unsigned("seed")?;
    let model = build_model(cfg)?;
    let scales = match &model {
        CatalogModel::Gaussian(g) => g.scales().to_vec(),
        _ => return Err(CliError::Config("gauss-experiment needs a product-Gaussian model".into())),
    };
    let scheme = scheme(cfg)?;
    let policy = policy(cfg)?;
    let time = integration_time(cfg)?;
    let eps_grid = step_grid(cfg, "eps_grid", time.tau(), &(1..=12).collect::<Vec<_>>())?;
    let fit_grid = step_grid(cfg, "fit_eps_grid", time.tau(), &[20, 16, 12])?;
    let n_fit = cfg.count("n_per_eps")?;
    let (n_outer, n_inner) = (cfg.count("n_outer")?, cfg.count("n_inner")?);
    out.resolved(cfg)?;

    let fit = fit_alpha(&model, grid_seed(seed, 0), scheme.order(), &fit_grid, &time, n_fit)?;
    let curve = AcceptanceModel::from_kappa2_fit(&fit)?;
    out.text(
        "gauss_fit.txt",
        &format!(
            "order = {}\nkappa2_alpha = {}\ncurve_alpha = {}\nfit_residual = {}\nfit_eps_grid = {}\n",
            fit.k,
            num(fit.alpha),
            num(curve.alpha),
            num(fit.fit_residual),
            join(&fit.eps_grid)
        ),
    )?;

    let mut accept_rows = Vec::new();
    let mut cost_rows = Vec::new();
    let mut flags = Vec::new();
    for (i, &eps) in eps_grid.iter().enumerate() {
        let ic = integrator(scheme, eps, policy)?;
        let e = acceptance_expectations(&model, grid_seed(seed, i + 1), &ic, &time, n_outer, n_inner)?;
        let a = e.mean_accept;
        accept_rows.push(vec![num(eps), num(a), num(acceptance_curve(&curve, eps))]);
        cost_rows.push(vec![
            num(a),
            num(e.mean_of_inverse),
            num(inverse_acceptance_lower(a).unwrap_or(f64::NAN)),
            num(inverse_acceptance_upper(a).unwrap_or(f64::NAN)),
        ]);
        let n = n_outer * n_inner;
        let mut unstable = false;
        for s in &scales {
            unstable |= oscillator_trace(scheme, eps / s)?.abs() >= 2.0 - 1e-12;
        }
        if unstable {
            flags.push(vec![num(eps), "unstable_integrator".into(), e.n_divergent.to_string(), n.to_string()]);
        }
        if e.n_divergent as f64 > MAX_DIVERGENT_FRACTION * n as f64 {
            flags.push(vec![num(eps), "divergent_draws".into(), e.n_divergent.to_string(), n.to_string()]);
        }
    }
    out.csv("gauss_accept.csv", &["eps", "empirical_accept", "predicted_accept"], accept_rows)?;
    out.csv("gauss_cost.csv", &["accept", "empirical_inv_accept", "cost_lower", "cost_upper"], cost_rows)?;
    out.csv("gauss_experiment_flags.csv", &["eps", "reason", "n_divergent", "n"], flags)
}

fn trace_rows(trace: &[RelaxationStep]) -> Vec<Vec<String>> {
    trace
        .iter()
        .map(|s| vec![num(s.target), s.divergences.to_string(), num(s.step_size), num(s.achieved_acceptance)])
        .collect()
}

fn funnel_scan(cfg: &mut RunConfig, out: &Output) -> Result<(), CliError> {
    let seed = cfg.unsigned("seed")?;
    let model = build_model(cfg)?;
    if !is_funnel(&model) {
        return Err(CliError::Config("funnel-scan needs `model = funnel`".into()));
    }
    let ic = integrator(scheme(cfg)?, cfg.real("step_size")?, policy(cfg)?)?;
    let time = integration_time(cfg)?;
    let params = da_params(cfg)?;
    let init = initializer(cfg)?;
    let targets = cfg.reals("targets")?;
    let chain = ChainConfig {
        adaptation: Some(AdaptationConfig { target: targets[0], params }),
        ..ChainConfig::new(ic, time, cfg.count("n_samples")?, grid_seed(seed, 0))
            .with_warmup(cfg.count("adapt_warmup")?)
            .with_init(init.clone())
    };
    let scan = ScanConfig {
        parallelism: cfg.count("parallelism")?,
        n_exact_chains: cfg.count("n_exact_chains")?,
        ..ScanConfig::new(chain, cfg.count("n_chains")?)
    };
    let probe = ChainConfig {
        adaptation: Some(AdaptationConfig { target: targets[0], params }),
        ..ChainConfig::new(ic, time, cfg.count("probe_samples")?, grid_seed(seed, 1))
            .with_warmup(cfg.count("probe_warmup")?)
            .with_init(init)
    };
    let (start, relax_step, max_target) =
        (cfg.real("target_accept")?, cfg.real("relax_step")?, cfg.real("relax_max_target")?);
    out.resolved(cfg)?;

    let rows = divergence_scan(&model, &targets, &scan)?;
    out.csv(
        "funnel_scan.csv",
        &["target", "achieved_accept", "step_size", "n_divergent", "rhat_v"],
        rows.iter().map(|r| {
            vec![num(r.target), num(r.achieved_accept), num(r.step_size), r.n_divergent.to_string(), num(r.rhat_v)]
        }),
    )?;

    let mut meta = format!(
        "scanned_scalar = q0\nrhat_construction = split R-hat over {} MCMC chains plus {} exact pseudo-chain(s) of equal length\nn_exact_chains = {}\n",
        scan.n_chains, scan.n_exact_chains, scan.n_exact_chains
    );
    let search = robust_target_search(&model, &probe, start, relax_step, max_target);
    let trace_header = ["target", "divergences", "step_size", "achieved_accept"];
    match search {
        Ok(report) => {
            out.csv("funnel_relaxation.csv", &trace_header, trace_rows(&report.relaxation_trace))?;
            meta.push_str(&format!(
                "search_status = ok\nrecommended_target = {}\nrecommended_step_size = {}\nrecommended_achieved_accept = {}\n",
                num(report.target_acceptance),
                num(report.final_step_size),
                num(report.achieved_acceptance)
            ));
            out.text("funnel_scan_meta.txt", &meta)
        }
        Err(hmc_tune::Error::TargetSearchExhausted { max_target, trace }) => {
            out.csv("funnel_relaxation.csv", &trace_header, trace_rows(&trace))?;
            meta.push_str("search_status = exhausted\n");
            out.text("funnel_scan_meta.txt", &meta)?;
            Err(hmc_tune::Error::TargetSearchExhausted { max_target, trace }.into())
        }
        Err(e) => Err(e.into()),
    }
}

fn sample(cfg: &mut RunConfig, out: &Output) -> Result<(), CliError> {
    let seed = cfg.unsigned("seed")?;
    let model = build_model(cfg)?;
    let ic = integrator(scheme(cfg)?, cfg.real("step_size")?, policy(cfg)?)?;
    let time = integration_time(cfg)?;
    let mut template = ChainConfig::new(ic, time, cfg.count("n_samples")?, seed)
        .with_warmup(cfg.count("adapt_warmup")?)
        .with_init(initializer(cfg)?);
    if cfg.flag("adapt")? {
        template.adaptation = Some(AdaptationConfig { target: cfg.real("target_accept")?, params: da_params(cfg)? });
    }
    let n_chains = cfg.count("n_chains")?;
    let parallelism = cfg.count("parallelism")?;
    out.resolved(cfg)?;

    let configs: Vec<ChainConfig> = (0..n_chains).map(|c| template.clone().with_seed(grid_seed(seed, c))).collect();
    let chains = run_chains(&model, &configs, parallelism)?;

    let d = model.dim();
    let mut header = vec!["chain".to_string(), "iter".to_string()];
    header.extend((0..d).map(|j| format!("q{j}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let draws = chains.iter().enumerate().flat_map(|(c, ch)| {
        ch.draws.iter().enumerate().map(move |(i, q)| {
            let mut row = vec![c.to_string(), (ch.n_warmup + i).to_string()];
            row.extend(q.iter().map(|x| num(*x)));
            row
        })
    });
    out.csv("draws.csv", &header, draws)?;
    let records = chains.iter().enumerate().flat_map(|(c, ch)| {
        ch.records.iter().enumerate().map(move |(i, r)| {
            vec![
                c.to_string(),
                i.to_string(),
                u8::from(r.accepted).to_string(),
                num(r.delta),
                num(r.accept_prob),
                u8::from(r.divergent).to_string(),
                r.n_steps.to_string(),
                num(r.step_size_used),
            ]
        })
    });
    out.csv(
        "records.csv",
        &["chain", "iter", "accepted", "delta", "accept_prob", "divergent", "n_steps", "step_size"],
        records,
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Quantity {
    Moment(u32),
    Kappa2,
}

fn parse_rows(text: &str) -> Result<Vec<(u32, Quantity)>, CliError> {
    text.split(',')
        .map(|item| {
            let bad = || CliError::Config(format!("`rows`: expected `order:moment` with moment 1, 2 or kappa2, got `{item}`"));
            let (k, q) = item.trim().split_once(':').ok_or_else(bad)?;
            let k: u32 = k.trim().parse().map_err(|_| bad())?;
            if k != 2 && k != 4 {
                return Err(bad());
            }
            let q = match q.trim() {
                "1" => Quantity::Moment(1),
                "2" => Quantity::Moment(2),
                "kappa2" => Quantity::Kappa2,
                _ => return Err(bad()),
            };
            Ok((k, q))
        })
        .collect()
}

fn is_statistical(e: &hmc_tune::Error) -> bool {
    matches!(e, hmc_tune::Error::InsufficientSignal { .. } | hmc_tune::Error::UnstableRegime { .. })
}

fn scaling(cfg: &mut RunConfig, out: &Output) -> Result<(), CliError> {
    let seed = cfg.unsigned("seed")?;
    let model = build_model(cfg)?;
    let policy = policy(cfg)?;
    let time = integration_time(cfg)?;
    let eps_grid = cfg.reals("eps_grid")?;
    let rows = parse_rows(&cfg.string("rows")?)?;
    let (n, n_mean) = (cfg.count("n_per_eps")?, cfg.count("n_per_eps_mean")?);
    let synthetic = cfg.flag("synthetic")?;
    out.resolved(cfg)?;

    let mut table = Vec::new();
    let mut first_failure = None;
    for (i, &(k, q)) in rows.iter().enumerate() {
        // every quantity here scales as ε^{2k} on smooth targets
        let expected = 2.0 * k as f64;
        let row_seed = grid_seed(seed, i);
        let result = if synthetic {
            let y: Vec<f64> = eps_grid.iter().map(|e| e.powf(expected)).collect();
            log_log_slope(&eps_grid, &y, None)
        } else {
            let scheme = Scheme::from_order(k)?;
            match q {
                Quantity::Moment(m) => {
                    let n = if m == 1 { n_mean } else { n };
                    let ic = integrator(scheme, eps_grid[0], policy)?;
                    scaling_exponent(&model, row_seed, m, &ic, &eps_grid, &time, n)
                }
                Quantity::Kappa2 => fit_alpha(&model, row_seed, k, &eps_grid, &time, n)
                    .and_then(|fit| log_log_slope(&fit.eps_grid, &fit.kappa2_values, None)),
            }
        };
        let (slope, se) = match result {
            Ok(v) => v,
            Err(e) if is_statistical(&e) => {
                eprintln!("warning: order {k} row {i}: {e}");
                first_failure.get_or_insert(e);
                (f64::NAN, f64::NAN)
            }
            Err(e) => return Err(e.into()),
        };
        let label = match q {
            Quantity::Moment(m) => m.to_string(),
            Quantity::Kappa2 => "kappa2".into(),
        };
        table.push(vec![k.to_string(), label, num(slope), num(se), num(expected)]);
    }
    out.csv("scaling.csv", &["order", "moment_n", "slope", "slope_se", "expected_slope"], table)?;
    match first_failure {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}
