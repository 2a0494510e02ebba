//! Phase space, target distributions and exact canonical sampling.
//!
//! A target is described by its potential energy `V(q) = -log π(q)` (additive
//! constants dropped) and gradient. Kinetic energy is Euclidean with a unit
//! metric, `T(p) = ½|p|²`, so the canonical distribution `exp(-H)` factorises
//! into the target over positions and a standard normal over momenta. Every
//! catalog model also carries an exact position sampler, which the error
//! statistics rely on for i.i.d. canonical draws.

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};

use crate::{Error, Result};

/// A point `z = (q, p)` of phase space.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseState {
    pub position: Vec<f64>,
    pub momentum: Vec<f64>,
}

impl PhaseState {
    pub fn new(position: Vec<f64>, momentum: Vec<f64>) -> Result<Self> {
        if position.is_empty() || position.len() != momentum.len() {
            return Err(Error::Contract(format!(
                "position and momentum lengths must match and be >= 1 (got {} and {})",
                position.len(),
                momentum.len()
            )));
        }
        Ok(Self { position, momentum })
    }

    pub fn dim(&self) -> usize {
        self.position.len()
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().chain(&self.momentum).all(|x| x.is_finite())
    }

    /// Momentum reversal `R(q, p) = (q, -p)`.
    pub fn flip_momentum(&mut self) {
        for p in &mut self.momentum {
            *p = -*p;
        }
    }
}

/// A target distribution expressed through its potential energy.
///
/// Implementations are immutable after construction and shared across chains.
/// The unchecked methods here are the hot path; the free functions in this
/// module add dimension and finiteness checks.
pub trait TargetModel: Send + Sync {
    fn dim(&self) -> usize;

    /// `V(q)` with additive constants dropped.
    fn potential(&self, q: &[f64]) -> f64;

    /// Writes `∇V(q)` into `grad`.
    fn gradient(&self, q: &[f64], grad: &mut [f64]);

    /// Writes `∇²V(q)·w` into `out` and returns `true`, or returns `false` when
    /// the model has no analytic Hessian-vector product.
    fn hessian_vector_product(&self, _q: &[f64], _w: &[f64], _out: &mut [f64]) -> bool {
        false
    }

    /// Draws a position exactly from the target into `out`.
    fn sample_position(&self, _rng: &mut dyn RngCore, _out: &mut [f64]) -> Result<()> {
        Err(Error::Unsupported(format!("{} has no exact position sampler", self.name())))
    }

    fn name(&self) -> String;
}

impl<M: TargetModel + ?Sized> TargetModel for &M {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn potential(&self, q: &[f64]) -> f64 {
        (**self).potential(q)
    }
    fn gradient(&self, q: &[f64], grad: &mut [f64]) {
        (**self).gradient(q, grad)
    }
    fn hessian_vector_product(&self, q: &[f64], w: &[f64], out: &mut [f64]) -> bool {
        (**self).hessian_vector_product(q, w, out)
    }
    fn sample_position(&self, rng: &mut dyn RngCore, out: &mut [f64]) -> Result<()> {
        (**self).sample_position(rng, out)
    }
    fn name(&self) -> String {
        (**self).name()
    }
}

/// Independent Gaussian with per-coordinate scales, `V = Σ qᵢ²/(2σᵢ²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    scales: Vec<f64>,
    inv_var: Vec<f64>,
}

impl Gaussian {
    pub fn standard(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Contract("gaussian dimension must be >= 1".into()));
        }
        Self::scaled(vec![1.0; dim])
    }

    pub fn scaled(scales: Vec<f64>) -> Result<Self> {
        if scales.is_empty() {
            return Err(Error::Contract("gaussian needs at least one scale".into()));
        }
        if let Some(s) = scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::Domain(format!("gaussian scales must be positive and finite, got {s}")));
        }
        let inv_var = scales.iter().map(|s| 1.0 / (s * s)).collect();
        Ok(Self { scales, inv_var })
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }
}

impl TargetModel for Gaussian {
    fn dim(&self) -> usize {
        self.scales.len()
    }

    fn potential(&self, q: &[f64]) -> f64 {
        0.5 * q.iter().zip(&self.inv_var).map(|(x, w)| x * x * w).sum::<f64>()
    }

    fn gradient(&self, q: &[f64], grad: &mut [f64]) {
        for ((g, x), w) in grad.iter_mut().zip(q).zip(&self.inv_var) {
            *g = x * w;
        }
    }

    fn hessian_vector_product(&self, _q: &[f64], w: &[f64], out: &mut [f64]) -> bool {
        for ((o, x), iv) in out.iter_mut().zip(w).zip(&self.inv_var) {
            *o = x * iv;
        }
        true
    }

    fn sample_position(&self, rng: &mut dyn RngCore, out: &mut [f64]) -> Result<()> {
        for (o, s) in out.iter_mut().zip(&self.scales) {
            let z: f64 = StandardNormal.sample(rng);
            *o = s * z;
        }
        Ok(())
    }

    fn name(&self) -> String {
        if self.scales.iter().all(|s| *s == 1.0) {
            format!("standard_gaussian({})", self.dim())
        } else {
            format!("scaled_gaussian({})", self.dim())
        }
    }
}

/// Neal's funnel: latent `v ~ N(0, s²)` in `q[0]` and `n` coordinates
/// `xᵢ | v ~ N(0, eᵛ)` in `q[1..=n]`.
///
/// `V(q) = v²/(2s²) + Σ xᵢ² e⁻ᵛ/2 + n·v/2`; the last term is the log-determinant
/// of the conditional covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct Funnel {
    n_latent: usize,
    scale: f64,
}

impl Funnel {
    pub fn new(n_latent: usize, scale: f64) -> Result<Self> {
        if n_latent == 0 {
            return Err(Error::Contract("funnel needs at least one latent coordinate".into()));
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::Domain(format!("funnel scale must be positive, got {scale}")));
        }
        Ok(Self { n_latent, scale })
    }

    pub fn n_latent(&self) -> usize {
        self.n_latent
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }
}

impl TargetModel for Funnel {
    fn dim(&self) -> usize {
        self.n_latent + 1
    }

    fn potential(&self, q: &[f64]) -> f64 {
        let v = q[0];
        let sum_sq: f64 = q[1..].iter().map(|x| x * x).sum();
        0.5 * v * v / (self.scale * self.scale)
            + 0.5 * sum_sq * (-v).exp()
            + 0.5 * self.n_latent as f64 * v
    }

    fn gradient(&self, q: &[f64], grad: &mut [f64]) {
        let v = q[0];
        let w = (-v).exp();
        let mut sum_sq = 0.0;
        for (g, x) in grad[1..].iter_mut().zip(&q[1..]) {
            sum_sq += x * x;
            *g = x * w;
        }
        grad[0] = v / (self.scale * self.scale) - 0.5 * sum_sq * w + 0.5 * self.n_latent as f64;
    }

    fn hessian_vector_product(&self, q: &[f64], u: &[f64], out: &mut [f64]) -> bool {
        let v = q[0];
        let w = (-v).exp();
        let sum_sq: f64 = q[1..].iter().map(|x| x * x).sum();
        let cross: f64 = q[1..].iter().zip(&u[1..]).map(|(x, ui)| x * ui).sum();
        out[0] = (1.0 / (self.scale * self.scale) + 0.5 * sum_sq * w) * u[0] - w * cross;
        for ((o, x), ui) in out[1..].iter_mut().zip(&q[1..]).zip(&u[1..]) {
            *o = w * (ui - x * u[0]);
        }
        true
    }

    fn sample_position(&self, rng: &mut dyn RngCore, out: &mut [f64]) -> Result<()> {
        let z: f64 = StandardNormal.sample(rng);
        let v = self.scale * z;
        out[0] = v;
        let sd = (0.5 * v).exp();
        for o in &mut out[1..] {
            let z: f64 = StandardNormal.sample(rng);
            *o = sd * z;
        }
        Ok(())
    }

    fn name(&self) -> String {
        format!("funnel({}, {})", self.n_latent, self.scale)
    }
}

/// Any catalog model, selectable by name from configuration.
#[derive(Debug, Clone, PartialEq)]
pub enum CatalogModel {
    Gaussian(Gaussian),
    Funnel(Funnel),
}

impl CatalogModel {
    pub fn standard_gaussian(dim: usize) -> Result<Self> {
        Gaussian::standard(dim).map(Self::Gaussian)
    }

    pub fn scaled_gaussian(scales: Vec<f64>) -> Result<Self> {
        Gaussian::scaled(scales).map(Self::Gaussian)
    }

    pub fn funnel(n_latent: usize, scale: f64) -> Result<Self> {
        Funnel::new(n_latent, scale).map(Self::Funnel)
    }

    fn inner(&self) -> &dyn TargetModel {
        match self {
            Self::Gaussian(m) => m,
            Self::Funnel(m) => m,
        }
    }
}

impl TargetModel for CatalogModel {
    fn dim(&self) -> usize {
        self.inner().dim()
    }
    fn potential(&self, q: &[f64]) -> f64 {
        match self {
            Self::Gaussian(m) => m.potential(q),
            Self::Funnel(m) => m.potential(q),
        }
    }
    fn gradient(&self, q: &[f64], grad: &mut [f64]) {
        match self {
            Self::Gaussian(m) => m.gradient(q, grad),
            Self::Funnel(m) => m.gradient(q, grad),
        }
    }
    fn hessian_vector_product(&self, q: &[f64], w: &[f64], out: &mut [f64]) -> bool {
        self.inner().hessian_vector_product(q, w, out)
    }
    fn sample_position(&self, rng: &mut dyn RngCore, out: &mut [f64]) -> Result<()> {
        self.inner().sample_position(rng, out)
    }
    fn name(&self) -> String {
        self.inner().name()
    }
}

fn check_vector(what: &str, x: &[f64], dim: usize) -> Result<()> {
    if x.len() != dim {
        return Err(Error::Contract(format!("{what} has length {}, model dimension is {dim}", x.len())));
    }
    if let Some(bad) = x.iter().find(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("{what} has non-finite entry {bad}")));
    }
    Ok(())
}

/// `V(q)`, checking dimension and finiteness.
pub fn potential_energy<M: TargetModel + ?Sized>(model: &M, q: &[f64]) -> Result<f64> {
    check_vector("position", q, model.dim())?;
    Ok(model.potential(q))
}

/// `T(p) = ½|p|²`.
pub fn kinetic_energy(p: &[f64]) -> Result<f64> {
    if let Some(bad) = p.iter().find(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("momentum has non-finite entry {bad}")));
    }
    Ok(kinetic(p))
}

#[inline]
pub(crate) fn kinetic(p: &[f64]) -> f64 {
    0.5 * p.iter().map(|x| x * x).sum::<f64>()
}

/// `H(q, p) = T(p) + V(q)`.
pub fn hamiltonian<M: TargetModel + ?Sized>(model: &M, z: &PhaseState) -> Result<f64> {
    check_vector("momentum", &z.momentum, model.dim())?;
    Ok(kinetic_energy(&z.momentum)? + potential_energy(model, &z.position)?)
}

/// Unchecked `H`, NaN/inf propagate.
#[inline]
pub(crate) fn energy<M: TargetModel + ?Sized>(model: &M, z: &PhaseState) -> f64 {
    kinetic(&z.momentum) + model.potential(&z.position)
}

/// `d` independent standard normal momenta.
pub fn sample_momentum<R: RngCore + ?Sized>(rng: &mut R, d: usize) -> Vec<f64> {
    let mut p = vec![0.0; d];
    fill_momentum(rng, &mut p);
    p
}

pub(crate) fn fill_momentum<R: RngCore + ?Sized>(rng: &mut R, p: &mut [f64]) {
    for x in p {
        *x = StandardNormal.sample(rng);
    }
}

/// One exact draw from the canonical distribution `exp(-H)`.
pub fn exact_canonical_sample<M, R>(model: &M, rng: &mut R) -> Result<PhaseState>
where
    M: TargetModel + ?Sized,
    R: RngCore,
{
    let mut z = PhaseState { position: vec![0.0; model.dim()], momentum: vec![0.0; model.dim()] };
    exact_canonical_sample_into(model, rng, &mut z)?;
    Ok(z)
}

pub(crate) fn exact_canonical_sample_into<M, R>(model: &M, rng: &mut R, z: &mut PhaseState) -> Result<()>
where
    M: TargetModel + ?Sized,
    R: RngCore,
{
    model.sample_position(rng, &mut z.position)?;
    fill_momentum(rng, &mut z.momentum);
    Ok(())
}

/// `∇²V(q)·w`, analytic when the model provides it, otherwise a central
/// difference of the gradient with step `1e-4·(1 + |q|∞)`.
pub fn hessian_vector<M: TargetModel + ?Sized>(model: &M, q: &[f64], w: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; q.len()];
    if model.hessian_vector_product(q, w, &mut out) {
        return out;
    }
    finite_difference_hvp(model, q, w)
}

pub fn finite_difference_hvp<M: TargetModel + ?Sized>(model: &M, q: &[f64], w: &[f64]) -> Vec<f64> {
    let d = q.len();
    let h = 1e-4 * (1.0 + q.iter().fold(0.0_f64, |m, x| m.max(x.abs())));
    let plus: Vec<f64> = q.iter().zip(w).map(|(x, u)| x + h * u).collect();
    let minus: Vec<f64> = q.iter().zip(w).map(|(x, u)| x - h * u).collect();
    let (mut gp, mut gm) = (vec![0.0; d], vec![0.0; d]);
    model.gradient(&plus, &mut gp);
    model.gradient(&minus, &mut gm);
    gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn catalog() -> Vec<CatalogModel> {
        vec![
            CatalogModel::standard_gaussian(1).unwrap(),
            CatalogModel::standard_gaussian(5).unwrap(),
            CatalogModel::scaled_gaussian(vec![0.5, 1.0, 3.0]).unwrap(),
            CatalogModel::funnel(2, 3.0).unwrap(),
            CatalogModel::funnel(50, 3.0).unwrap(),
        ]
    }

    #[test]
    fn potential_examples() {
        let g1 = Gaussian::standard(1).unwrap();
        assert_eq!(potential_energy(&g1, &[0.0]).unwrap(), 0.0);
        assert_eq!(potential_energy(&g1, &[1.0]).unwrap(), 0.5);
        let f = Funnel::new(2, 3.0).unwrap();
        assert_eq!(potential_energy(&f, &[0.0, 0.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn funnel_potential_matches_log_density() {
        // -log N(v; 0, s²) - Σ log N(xᵢ; 0, eᵛ), constants removed
        let f = Funnel::new(3, 3.0).unwrap();
        let ln_normal = |x: f64, var: f64| -0.5 * x * x / var - 0.5 * var.ln();
        let c = 0.5 * 9.0_f64.ln();
        for q in [[0.3, -1.0, 2.0, 0.5], [-2.0, 0.1, 0.0, -0.2], [1.5, 3.0, -4.0, 1.0]] {
            let v = q[0];
            let mut lp = ln_normal(v, 9.0) + c;
            for x in &q[1..] {
                lp += ln_normal(*x, v.exp());
            }
            assert!((f.potential(&q) + lp).abs() < 1e-12);
        }
    }

    #[test]
    fn kinetic_examples() {
        assert_eq!(kinetic_energy(&[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(kinetic_energy(&[3.0, 4.0]).unwrap(), 12.5);
        assert_eq!(kinetic_energy(&[1.0]).unwrap(), 0.5);
        assert!(matches!(kinetic_energy(&[f64::NAN]), Err(Error::Domain(_))));
    }

    #[test]
    fn hamiltonian_examples() {
        let g1 = Gaussian::standard(1).unwrap();
        let z = PhaseState::new(vec![1.0], vec![0.0]).unwrap();
        assert_eq!(hamiltonian(&g1, &z).unwrap(), 0.5);
        let z = PhaseState::new(vec![0.0], vec![0.0]).unwrap();
        assert_eq!(hamiltonian(&g1, &z).unwrap(), 0.0);
        let g2 = Gaussian::standard(2).unwrap();
        let z = PhaseState::new(vec![1.0, 1.0], vec![1.0, 1.0]).unwrap();
        assert_eq!(hamiltonian(&g2, &z).unwrap(), 2.0);
    }

    #[test]
    fn checked_errors() {
        let g2 = Gaussian::standard(2).unwrap();
        assert!(matches!(potential_energy(&g2, &[1.0]), Err(Error::Contract(_))));
        assert!(matches!(potential_energy(&g2, &[1.0, f64::INFINITY]), Err(Error::Domain(_))));
        assert!(PhaseState::new(vec![1.0], vec![]).is_err());
        assert!(Gaussian::scaled(vec![1.0, -1.0]).is_err());
        assert!(Funnel::new(0, 3.0).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut r = rng::from_seed(11);
        for m in catalog() {
            let d = m.dim();
            for _ in 0..100 {
                let mut q = vec![0.0; d];
                m.sample_position(&mut r, &mut q).unwrap();
                let mut g = vec![0.0; d];
                m.gradient(&q, &mut g);
                let gnorm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
                for i in 0..d {
                    let h = 1e-6 * (1.0 + q[i].abs());
                    let mut qp = q.clone();
                    let mut qm = q.clone();
                    qp[i] += h;
                    qm[i] -= h;
                    let fd = (m.potential(&qp) - m.potential(&qm)) / (2.0 * h);
                    let err = (g[i] - fd).abs() / (1.0 + gnorm);
                    assert!(err < 1e-5, "{} coord {i}: {} vs {fd}", m.name(), g[i]);
                }
            }
        }
    }

    #[test]
    fn hvp_matches_finite_differences() {
        let mut r = rng::from_seed(12);
        for m in catalog() {
            let d = m.dim();
            for _ in 0..50 {
                let mut q = vec![0.0; d];
                m.sample_position(&mut r, &mut q).unwrap();
                let w = sample_momentum(&mut r, d);
                let analytic = hessian_vector(&m, &q, &w);
                let fd = finite_difference_hvp(&m, &q, &w);
                let norm = analytic.iter().map(|x| x * x).sum::<f64>().sqrt();
                for (a, b) in analytic.iter().zip(&fd) {
                    assert!((a - b).abs() / (1.0 + norm) < 1e-4, "{}: {a} vs {b}", m.name());
                }
            }
        }
    }

    #[test]
    fn momentum_draws() {
        let mut r = rng::from_seed(3);
        assert_eq!(sample_momentum(&mut r, 3).len(), 3);
        let n = 100_000;
        let mean = (0..n).map(|_| sample_momentum(&mut r, 1)[0]).sum::<f64>() / n as f64;
        assert!(mean.abs() < 5.0 / (n as f64).sqrt());
        let a = sample_momentum(&mut rng::from_seed(99), 4);
        let b = sample_momentum(&mut rng::from_seed(99), 4);
        assert_eq!(a, b);
    }

    fn mean_var(x: &[f64]) -> (f64, f64) {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        (m, x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0))
    }

    #[test]
    fn exact_samples_have_target_moments() {
        let n = 100_000;
        let mut r = rng::from_seed(5);
        let g = Gaussian::standard(2).unwrap();
        let draws: Vec<PhaseState> = (0..n).map(|_| exact_canonical_sample(&g, &mut r).unwrap()).collect();
        for c in 0..2 {
            for x in [
                draws.iter().map(|z| z.position[c]).collect::<Vec<_>>(),
                draws.iter().map(|z| z.momentum[c]).collect::<Vec<_>>(),
            ] {
                let (m, v) = mean_var(&x);
                assert!(m.abs() < 5.0 / (n as f64).sqrt());
                // se of the sample variance of a unit normal is sqrt(2/n)
                assert!((v - 1.0).abs() < 5.0 * (2.0 / n as f64).sqrt());
            }
        }
        assert!(draws.iter().all(|z| hamiltonian(&g, z).unwrap().is_finite()));

        let f = Funnel::new(50, 3.0).unwrap();
        let v: Vec<f64> = (0..n).map(|_| exact_canonical_sample(&f, &mut r).unwrap().position[0]).collect();
        let (_, var) = mean_var(&v);
        assert!((var - 9.0).abs() < 5.0 * 9.0 * (2.0 / n as f64).sqrt());
    }

    #[test]
    fn exact_sampler_laplace_transform() {
        // E[exp(-sV)] = (1+s)^(-d/2) for a standard gaussian
        let s = 0.5;
        let n = 100_000;
        for d in [1, 3, 10] {
            let g = Gaussian::standard(d).unwrap();
            let mut r = rng::from_seed(40 + d as u64);
            let mut q = vec![0.0; d];
            let vals: Vec<f64> = (0..n)
                .map(|_| {
                    g.sample_position(&mut r, &mut q).unwrap();
                    (-s * g.potential(&q)).exp()
                })
                .collect();
            let (m, v) = mean_var(&vals);
            let expected = (1.0 + s).powf(-(d as f64) / 2.0);
            assert!((m - expected).abs() < 5.0 * (v / n as f64).sqrt(), "d={d}: {m} vs {expected}");
        }
    }

    #[test]
    fn pure_evaluation() {
        let f = Funnel::new(50, 3.0).unwrap();
        let mut r = rng::from_seed(8);
        let mut q = vec![0.0; 51];
        f.sample_position(&mut r, &mut q).unwrap();
        let (mut g1, mut g2) = (vec![0.0; 51], vec![0.0; 51]);
        f.gradient(&q, &mut g1);
        f.gradient(&q, &mut g2);
        assert_eq!(f.potential(&q).to_bits(), f.potential(&q).to_bits());
        assert_eq!(g1, g2);
    }

    #[test]
    fn model_without_sampler_is_unsupported() {
        struct Bare;
        impl TargetModel for Bare {
            fn dim(&self) -> usize {
                1
            }
            fn potential(&self, q: &[f64]) -> f64 {
                q[0].powi(4)
            }
            fn gradient(&self, q: &[f64], g: &mut [f64]) {
                g[0] = 4.0 * q[0].powi(3);
            }
            fn name(&self) -> String {
                "quartic".into()
            }
        }
        let mut r = rng::from_seed(1);
        assert!(matches!(exact_canonical_sample(&Bare, &mut r), Err(Error::Unsupported(_))));
        // falls back to differencing the gradient: d²/dq² q⁴ = 12q²
        let hv = hessian_vector(&Bare, &[1.0], &[1.0]);
        assert!((hv[0] - 12.0).abs() < 1e-4);
    }
}
