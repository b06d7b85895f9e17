//! Monte Carlo quadrature over unobserved spheres.
//!
//! Every series here has the shape `Σ_{n ≤ n_max} (1/n!) ∫ dy₁…dy_n h(x, y)`.
//! Order `n` is estimated by importance sampling the `n` extra spheres one at a
//! time from a mixture proposal: momenta are Maxwellian, positions are drawn
//! uniformly over a box, along the collision tube swept by an already placed
//! sphere, or inside the exclusion ball of one. The tube and ball components put
//! samples where cumulants of the flow groups are supported; the box keeps the
//! proposal positive wherever the initial data live.
//!
//! Sample `i` of every order uses its own counter-based generator, and the
//! per-sample values are reduced in a fixed order, so estimates do not depend on
//! the number of workers.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, UnitSphere};
use rayon::prelude::*;
use serde::Serialize;

use crate::correlations::{Engine, OnePointFn};
use crate::dynamics::{add, collide, dot, next_event, norm2, points_allowed, scale, sub, PhasePoint, SystemState, Vec3};
use crate::error::{Error, Result};
use crate::partitions::{exp_star, partition_masks, FunctionSequence, MAX_ELEMENTS};
use crate::stats::{mean_and_stderr, mean_covariance, mix64, pairwise_sum, sample_rng, stream_id, with_workers};

/// Maxwellian density `(β/2π)^{3/2} e^{−β|p|²/2}`.
pub fn maxwellian(beta: f64, p: &Vec3) -> f64 {
    (beta / (2.0 * std::f64::consts::PI)).powf(1.5) * (-0.5 * beta * norm2(p)).exp()
}

/// `(1 − r²/R²)³` inside the ball of radius `R`, zero outside; twice continuously differentiable.
pub fn bump(radius: f64, q: &Vec3) -> f64 {
    let u = 1.0 - norm2(q) / (radius * radius);
    if u > 0.0 {
        u * u * u
    } else {
        0.0
    }
}

/// Initial state of the gas.
#[derive(Clone)]
pub enum InitialData {
    /// Uncorrelated initial state with one-particle function `g1`.
    Chaos {
        g1: Arc<OnePointFn>,
        support_radius: f64,
        beta: f64,
    },
    /// Arbitrary initial correlations `g0`; `densities` caches `Exp⋆ g0`.
    General {
        g0: FunctionSequence,
        densities: FunctionSequence,
        support_radius: f64,
        beta: f64,
    },
}

impl std::fmt::Debug for InitialData {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            InitialData::Chaos { support_radius, beta, .. } => f
                .debug_struct("Chaos")
                .field("support_radius", support_radius)
                .field("beta", beta)
                .finish_non_exhaustive(),
            InitialData::General { g0, support_radius, beta, .. } => f
                .debug_struct("General")
                .field("g0", g0)
                .field("support_radius", support_radius)
                .field("beta", beta)
                .finish_non_exhaustive(),
        }
    }
}

impl InitialData {
    /// `g₁⁰(q, p) = ρ₀ (1 − |q|²/R²)³₊ · (β/2π)^{3/2} e^{−β|p|²/2}`.
    pub fn bump(rho0: f64, radius: f64, beta: f64) -> Result<Self> {
        if !(rho0 > 0.0 && radius > 0.0 && beta > 0.0) {
            return Err(Error::config("bump parameters must be positive"));
        }
        Ok(InitialData::Chaos {
            g1: Arc::new(move |x: &PhasePoint| rho0 * bump(radius, &x.q) * maxwellian(beta, &x.p)),
            support_radius: radius,
            beta,
        })
    }

    pub fn chaos(g1: Arc<OnePointFn>, support_radius: f64, beta: f64) -> Self {
        InitialData::Chaos {
            g1,
            support_radius,
            beta,
        }
    }

    pub fn general(g0: FunctionSequence, support_radius: f64, beta: f64) -> Result<Self> {
        let densities = exp_star(&g0)?;
        Ok(InitialData::General {
            g0,
            densities,
            support_radius,
            beta,
        })
    }

    /// Mean particle number `λ = ρ₀ · 4πR³ · 16/315` of [`InitialData::bump`].
    pub fn bump_mean_number(rho0: f64, radius: f64) -> f64 {
        rho0 * 4.0 * std::f64::consts::PI * radius.powi(3) * 16.0 / 315.0
    }

    pub fn support_radius(&self) -> f64 {
        match self {
            InitialData::Chaos { support_radius, .. } | InitialData::General { support_radius, .. } => {
                *support_radius
            }
        }
    }

    pub fn beta(&self) -> f64 {
        match self {
            InitialData::Chaos { beta, .. } | InitialData::General { beta, .. } => *beta,
        }
    }

    fn cap(&self) -> usize {
        match self {
            InitialData::Chaos { .. } => MAX_ELEMENTS,
            InitialData::General { g0, .. } => g0.cap(),
        }
    }

    /// `g_{|x|}(t, x)`.
    pub fn correlation(&self, engine: &Engine, t: f64, x: &[PhasePoint]) -> Result<f64> {
        match self {
            InitialData::Chaos { g1, .. } => engine.chaos_correlations(t, g1.as_ref(), x),
            InitialData::General { g0, .. } => engine.evolve_correlations(t, g0, x),
        }
    }

    /// `g_{1+n}(t, {x₀…x_{s−1}}, x_s, …)`.
    pub fn cluster_correlation(&self, engine: &Engine, t: f64, s: usize, x: &[PhasePoint]) -> Result<f64> {
        match self {
            InitialData::Chaos { g1, .. } => engine.chaos_cluster_correlations(t, g1.as_ref(), s, x),
            InitialData::General { g0, .. } => engine.evolve_cluster_correlations(t, g0, s, x),
        }
    }

    /// Initial densities `D(0) = Exp⋆ g(0)`, before the hard-core indicator.
    pub fn densities(&self) -> FunctionSequence {
        match self {
            InitialData::Chaos { g1, .. } => {
                let g1 = g1.clone();
                FunctionSequence::new(MAX_ELEMENTS, move |x| Ok(x.iter().map(|y| g1(y)).product()))
            }
            InitialData::General { densities, .. } => densities.clone(),
        }
    }

    /// `D_{|x|}(t, x)`: zero on forbidden configurations.
    pub fn density(&self, engine: &Engine, t: f64, x: &[PhasePoint]) -> Result<f64> {
        if x.is_empty() {
            return Ok(1.0);
        }
        let d0 = self.densities();
        engine.pullback(t, &[(0..x.len()).collect()], |y| d0.eval(y), x)
    }
}

/// Sampling parameters of the series quadrature.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadratureSpec {
    /// Highest order `n` kept in the series.
    pub n_max: usize,
    /// Monte Carlo samples per order.
    pub samples: usize,
    /// Inverse temperature of the momentum proposal; defaults to the data's.
    pub beta_prop: Option<f64>,
    /// Half-width of the position box; defaults to the data support plus a
    /// margin of 5σ and six thermal speeds times `|t|`.
    pub box_half: Option<f64>,
    pub seed: u64,
    /// Worker threads, 0 for the global pool.
    pub workers: usize,
    /// Resampled pathological points tolerated per estimate.
    pub pathology_budget: usize,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        QuadratureSpec {
            n_max: 2,
            samples: 10_000,
            beta_prop: None,
            box_half: None,
            seed: 0,
            workers: 0,
            pathology_budget: 1000,
        }
    }
}

const BOX_MARGIN_DIAMETERS: f64 = 5.0;
const THERMAL_SPEEDS: f64 = 6.0;
const MAX_ATTEMPTS: u64 = 10;
const MIN_ESS_FRACTION: f64 = 0.1;

/// Contribution of one order `n` to a series.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrderContribution {
    pub n: usize,
    pub value: f64,
    pub std_error: f64,
}

/// Value of a truncated series with its per-order breakdown.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReducedEstimate {
    pub value: f64,
    pub std_error: f64,
    pub per_order: Vec<OrderContribution>,
    pub pathology_resamples: usize,
}

impl ReducedEstimate {
    fn from_orders(per_order: Vec<OrderContribution>, pathology_resamples: usize) -> Self {
        let value = per_order.iter().map(|o| o.value).sum();
        let std_error = per_order.iter().map(|o| o.std_error.powi(2)).sum::<f64>().sqrt();
        ReducedEstimate {
            value,
            std_error,
            per_order,
            pathology_resamples,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Proposal {
    beta: f64,
    half: f64,
    sigma: f64,
    t: f64,
}

impl Proposal {
    /// Weights of (box, tube, ball).
    fn weights(&self, anchored: bool) -> (f64, f64, f64) {
        if !anchored || self.sigma == 0.0 {
            (1.0, 0.0, 0.0)
        } else if self.t == 0.0 {
            (0.5, 0.0, 0.5)
        } else {
            (0.4, 0.45, 0.15)
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R, anchors: &[PhasePoint]) -> PhasePoint {
        let sd = 1.0 / self.beta.sqrt();
        let p: Vec3 = [0; 3].map(|_| sd * rng.sample::<f64, _>(StandardNormal));
        let (wb, wt, _) = self.weights(!anchors.is_empty());
        let u: f64 = rng.random();
        let q = if u < wb {
            [0; 3].map(|_| rng.random_range(-self.half..self.half))
        } else {
            let a = &anchors[rng.random_range(0..anchors.len())];
            let n: Vec3 = UnitSphere.sample(rng);
            if u < wb + wt {
                let theta = self.t * rng.random::<f64>();
                add(&add(&a.q, &scale(&sub(&p, &a.p), theta)), &scale(&n, self.sigma))
            } else {
                let r = self.sigma * rng.random::<f64>().cbrt();
                add(&a.q, &scale(&n, r))
            }
        };
        PhasePoint::new(q, p)
    }

    /// Density in position of the tube swept by `dq = vθ + σn`, `θ` between 0 and `t`.
    fn tube_density(&self, dq: &Vec3, v: &Vec3) -> f64 {
        let a = norm2(v);
        if a == 0.0 {
            return 0.0;
        }
        let b = dot(dq, v);
        let c = norm2(dq) - self.sigma * self.sigma;
        let disc = b * b - a * c;
        if disc <= 0.0 {
            return 0.0;
        }
        let root = disc.sqrt();
        let (lo, hi) = (self.t.min(0.0), self.t.max(0.0));
        let hits = [(b - root) / a, (b + root) / a]
            .iter()
            .filter(|&&th| th >= lo && th <= hi)
            .count();
        hits as f64 / (4.0 * std::f64::consts::PI * self.t.abs() * self.sigma * root)
    }

    fn density(&self, y: &PhasePoint, anchors: &[PhasePoint]) -> f64 {
        let (wb, wt, wl) = self.weights(!anchors.is_empty());
        let mut d = 0.0;
        if y.q.iter().all(|c| c.abs() <= self.half) {
            d += wb / (2.0 * self.half).powi(3);
        }
        if wt > 0.0 || wl > 0.0 {
            let ball = 1.0 / (4.0 / 3.0 * std::f64::consts::PI * self.sigma.powi(3));
            let mut tube = 0.0;
            let mut inside = 0usize;
            for a in anchors {
                let dq = sub(&y.q, &a.q);
                if wt > 0.0 {
                    tube += self.tube_density(&dq, &sub(&y.p, &a.p));
                }
                if norm2(&dq) < self.sigma * self.sigma {
                    inside += 1;
                }
            }
            let k = anchors.len() as f64;
            d += wt * tube / k + wl * ball * inside as f64 / k;
        }
        d * maxwellian(self.beta, &y.p)
    }
}

/// Extra proposal anchors following the bent backward trajectories of the
/// observed spheres: after each backward collision, a point whose free
/// backward motion continues along the new straight segment.
fn trajectory_anchors(sigma: f64, t: f64, observed: &[PhasePoint]) -> Vec<PhasePoint> {
    const MAX_EVENTS: usize = 64;
    let mut anchors = Vec::new();
    if sigma == 0.0 || t == 0.0 || observed.len() < 2 || !points_allowed(sigma, observed) {
        return anchors;
    }
    let d = -t.signum();
    let moving = observed.iter().map(|x| PhasePoint::new(x.q, scale(&x.p, d))).collect();
    let mut state = SystemState::new(sigma, moving);
    let mut elapsed = 0.0;
    for _ in 0..MAX_EVENTS {
        let Ok(Some(ev)) = next_event(&state, t.abs() - elapsed) else {
            break;
        };
        for x in state.points.iter_mut() {
            *x = x.streamed(ev.time);
        }
        elapsed += ev.time;
        let (i, j) = ev.pair;
        let Ok((pi, pj)) = collide(&state.points[i].p, &state.points[j].p, &ev.eta) else {
            break;
        };
        state.points[i].p = pi;
        state.points[j].p = pj;
        for k in [i, j] {
            let x = &state.points[k];
            anchors.push(PhasePoint::new(sub(&x.q, &scale(&x.p, elapsed)), scale(&x.p, d)));
        }
    }
    anchors
}

/// Per-sample columns of one order, already multiplied by weight and `1/n!`.
struct OrderSamples {
    columns: Vec<Vec<f64>>,
    resamples: usize,
}

struct Quadrature<'a> {
    spec: &'a QuadratureSpec,
    proposal: Proposal,
    beta: f64,
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

impl<'a> Quadrature<'a> {
    fn new(engine: &Engine, t: f64, init: &InitialData, spec: &'a QuadratureSpec) -> Result<Self> {
        Self::with_support(engine, t, init.support_radius(), init.beta(), spec)
    }

    fn with_support(engine: &Engine, t: f64, support: f64, beta: f64, spec: &'a QuadratureSpec) -> Result<Self> {
        if spec.samples == 0 {
            return Err(Error::config("samples must be at least 1"));
        }
        let beta_prop = spec.beta_prop.unwrap_or(beta);
        if !(beta_prop > 0.0 && beta > 0.0) {
            return Err(Error::config("inverse temperatures must be positive"));
        }
        let sigma = engine.sigma();
        let min_half = support + BOX_MARGIN_DIAMETERS * sigma;
        let half = spec
            .box_half
            .unwrap_or(min_half + THERMAL_SPEEDS * t.abs() / beta_prop.sqrt());
        if half < min_half {
            return Err(Error::config(format!(
                "box half-width {half} does not contain the support {support} with a margin of 5σ"
            )));
        }
        Ok(Quadrature {
            spec,
            proposal: Proposal {
                beta: beta_prop,
                half,
                sigma,
                t,
            },
            beta,
        })
    }

    /// Samples `count` spheres next to `observed` and evaluates `integrand` on
    /// `observed ++ sampled`, returning `width` weighted columns scaled by `factor`.
    fn order<F>(
        &self,
        label: &str,
        observed: &[PhasePoint],
        count: usize,
        factor: f64,
        width: usize,
        integrand: F,
    ) -> Result<OrderSamples>
    where
        F: Fn(&[PhasePoint]) -> Result<Vec<f64>> + Sync,
    {
        if count == 0 {
            let v = integrand(observed)?;
            return Ok(OrderSamples {
                columns: v.into_iter().map(|c| vec![c * factor]).collect(),
                resamples: 0,
            });
        }
        let stream = stream_id(label) ^ mix64(count as u64);
        let seed = self.spec.seed;
        let bent = trajectory_anchors(self.proposal.sigma, self.proposal.t, observed);
        let draw = |i: usize| -> Result<(Vec<f64>, f64, usize)> {
            for attempt in 0..MAX_ATTEMPTS {
                let mut rng = sample_rng(seed, stream, i as u64 * MAX_ATTEMPTS + attempt);
                let mut pts = observed.to_vec();
                let mut anchors = [bent.as_slice(), observed].concat();
                let mut density = 1.0;
                let mut ratio = 1.0;
                for _ in 0..count {
                    let y = self.proposal.sample(&mut rng, &anchors);
                    density *= self.proposal.density(&y, &anchors);
                    anchors.push(y);
                    ratio *= maxwellian(self.beta, &y.p) / maxwellian(self.proposal.beta, &y.p);
                    pts.push(y);
                }
                let w = if density > 0.0 && density.is_finite() {
                    factor / density
                } else {
                    0.0
                };
                if w == 0.0 {
                    return Ok((vec![0.0; width], ratio, attempt as usize));
                }
                match integrand(&pts) {
                    Ok(v) => return Ok((v.into_iter().map(|c| c * w).collect(), ratio, attempt as usize)),
                    Err(e) if e.is_pathology() => continue,
                    Err(e) => return Err(e),
                }
            }
            Err(Error::PathologyBudget {
                resamples: MAX_ATTEMPTS as usize,
                budget: self.spec.pathology_budget,
            })
        };
        let rows: Vec<(Vec<f64>, f64, usize)> = with_workers(self.spec.workers, || {
            (0..self.spec.samples).into_par_iter().map(draw).collect::<Result<Vec<_>>>()
        })??;
        let resamples = rows.iter().map(|r| r.2).sum();
        let ratios: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let s1 = pairwise_sum(&ratios);
        let s2 = pairwise_sum(&ratios.iter().map(|r| r * r).collect::<Vec<_>>());
        let ess = if s2 > 0.0 { s1 * s1 / s2 } else { 0.0 };
        if ess < MIN_ESS_FRACTION * self.spec.samples as f64 {
            return Err(Error::WeightBlowup {
                ess,
                nominal: self.spec.samples,
            });
        }
        let columns = (0..width)
            .map(|k| rows.iter().map(|r| r.0[k]).collect())
            .collect();
        Ok(OrderSamples { columns, resamples })
    }

    fn check_budget(&self, resamples: usize) -> Result<()> {
        if resamples > self.spec.pathology_budget {
            return Err(Error::PathologyBudget {
                resamples,
                budget: self.spec.pathology_budget,
            });
        }
        Ok(())
    }

    /// `Σ_{n ≤ n_max} (1/n!) ∫ h(observed ++ y₁…y_n)` with `offset` extra spheres
    /// also integrated but not counted in `n`.
    fn series<F>(&self, label: &str, observed: &[PhasePoint], offset: usize, h: F) -> Result<ReducedEstimate>
    where
        F: Fn(&[PhasePoint]) -> Result<f64> + Sync,
    {
        let mut per_order = Vec::new();
        let mut resamples = 0;
        for n in 0..=self.spec.n_max {
            let o = self.order(label, observed, n + offset, 1.0 / factorial(n), 1, |pts| Ok(vec![h(pts)?]))?;
            resamples += o.resamples;
            let (value, std_error) = mean_and_stderr(&o.columns[0]);
            per_order.push(OrderContribution { n, value, std_error });
        }
        self.check_budget(resamples)?;
        Ok(ReducedEstimate::from_orders(per_order, resamples))
    }
}

fn check_observed(init: &InitialData, x: &[PhasePoint], spec: &QuadratureSpec) -> Result<()> {
    if x.is_empty() {
        return Err(Error::domain("at least one observed sphere is required"));
    }
    if x.len() + spec.n_max > init.cap().min(MAX_ELEMENTS) {
        return Err(Error::Capacity {
            what: "observed plus integrated spheres",
            value: x.len() + spec.n_max,
            limit: init.cap().min(MAX_ELEMENTS),
        });
    }
    Ok(())
}

/// `(I, D(t)) = Σ_n (1/n!) ∫ D_n(t)`, the grand canonical partition function.
pub fn grand_partition_estimate(
    engine: &Engine,
    t: f64,
    init: &InitialData,
    spec: &QuadratureSpec,
) -> Result<ReducedEstimate> {
    series_integral(engine, t, &init.densities(), init.support_radius(), init.beta(), spec)
}

/// `Σ_n (1/n!) ∫ (S(−t) f)_n` for any sequence `f` supported within `support` in position.
pub fn series_integral(
    engine: &Engine,
    t: f64,
    f: &FunctionSequence,
    support: f64,
    beta: f64,
    spec: &QuadratureSpec,
) -> Result<ReducedEstimate> {
    let quad = Quadrature::with_support(engine, t, support, beta, spec)?;
    quad.series("Z", &[], 0, |pts| {
        if pts.is_empty() {
            return f.eval(pts);
        }
        engine.pullback(t, &[(0..pts.len()).collect()], |y| f.eval(y), pts)
    })
}

/// `Σ_{n ≤ n_max} (1/n!) ∫ h(x, y₁…y_n) dy` for an arbitrary integrand, with the
/// proposal box sized for data supported within `support`.
#[allow(clippy::too_many_arguments)]
pub fn series_estimate<F>(
    engine: &Engine,
    t: f64,
    label: &str,
    x: &[PhasePoint],
    support: f64,
    beta: f64,
    spec: &QuadratureSpec,
    h: F,
) -> Result<ReducedEstimate>
where
    F: Fn(&[PhasePoint]) -> Result<f64> + Sync,
{
    Quadrature::with_support(engine, t, support, beta, spec)?.series(label, x, 0, h)
}

/// The single order-`n` term `(1/n!) ∫ h(x, y₁…y_n) dy` of a series.
#[allow(clippy::too_many_arguments)]
pub fn order_estimate<F>(
    engine: &Engine,
    t: f64,
    label: &str,
    x: &[PhasePoint],
    n: usize,
    support: f64,
    beta: f64,
    spec: &QuadratureSpec,
    h: F,
) -> Result<ReducedEstimate>
where
    F: Fn(&[PhasePoint]) -> Result<f64> + Sync,
{
    let quad = Quadrature::with_support(engine, t, support, beta, spec)?;
    let o = quad.order(label, x, n, 1.0 / factorial(n), 1, |pts| Ok(vec![h(pts)?]))?;
    quad.check_budget(o.resamples)?;
    let (value, std_error) = mean_and_stderr(&o.columns[0]);
    Ok(ReducedEstimate::from_orders(
        vec![OrderContribution { n, value, std_error }],
        o.resamples,
    ))
}

/// `F_s(t, x)` from cluster correlation functions.
pub fn estimate_f(
    engine: &Engine,
    t: f64,
    x: &[PhasePoint],
    init: &InitialData,
    spec: &QuadratureSpec,
) -> Result<ReducedEstimate> {
    check_observed(init, x, spec)?;
    let s = x.len();
    Quadrature::new(engine, t, init, spec)?.series("F", x, 0, |pts| init.cluster_correlation(engine, t, s, pts))
}

/// `F_s(t, x)` as the ratio of two density series over the partition function.
///
/// Both series share their samples; the error combines them by the delta
/// method including their covariance.
pub fn estimate_f_ratio(
    engine: &Engine,
    t: f64,
    x: &[PhasePoint],
    init: &InitialData,
    spec: &QuadratureSpec,
) -> Result<ReducedEstimate> {
    check_observed(init, x, spec)?;
    let quad = Quadrature::new(engine, t, init, spec)?;
    let s = x.len();
    let mut num = Vec::new();
    let (mut zv, mut nv, mut var_n, mut var_z, mut cov) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut resamples = 0;
    for n in 0..=spec.n_max {
        let o = quad.order("F/ratio", x, n, 1.0 / factorial(n), 2, |pts| {
            Ok(vec![init.density(engine, t, pts)?, init.density(engine, t, &pts[s..])?])
        })?;
        resamples += o.resamples;
        let (a, sa) = mean_and_stderr(&o.columns[0]);
        let (b, sb) = mean_and_stderr(&o.columns[1]);
        nv += a;
        zv += b;
        var_n += sa * sa;
        var_z += sb * sb;
        cov += mean_covariance(&o.columns[0], &o.columns[1]);
        num.push((n, a, sa));
    }
    quad.check_budget(resamples)?;
    if zv <= 0.0 {
        return Err(Error::domain("partition function estimate is not positive"));
    }
    let r = nv / zv;
    let var = (var_n - 2.0 * r * cov + r * r * var_z).max(0.0) / (zv * zv);
    let per_order = num
        .into_iter()
        .map(|(n, a, sa)| OrderContribution {
            n,
            value: a / zv,
            std_error: sa / zv,
        })
        .collect();
    Ok(ReducedEstimate {
        value: r,
        std_error: var.sqrt(),
        per_order,
        pathology_resamples: resamples,
    })
}

/// `G_s(t, x)` from plain correlation functions.
pub fn estimate_g(
    engine: &Engine,
    t: f64,
    x: &[PhasePoint],
    init: &InitialData,
    spec: &QuadratureSpec,
) -> Result<ReducedEstimate> {
    estimate_g_labeled("G", engine, t, x, init, spec)
}

fn estimate_g_labeled(
    label: &str,
    engine: &Engine,
    t: f64,
    x: &[PhasePoint],
    init: &InitialData,
    spec: &QuadratureSpec,
) -> Result<ReducedEstimate> {
    check_observed(init, x, spec)?;
    Quadrature::new(engine, t, init, spec)?.series(label, x, 0, |pts| init.correlation(engine, t, pts))
}

/// Both sides of `F_s = Σ_P ∏ G_{|X_i|}(X_i)`, each truncated at total order `n_max`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FgConsistency {
    pub f: ReducedEstimate,
    pub cluster_sum: f64,
    pub cluster_sum_std_error: f64,
    pub residual: f64,
    pub combined_std_error: f64,
}

impl FgConsistency {
    pub fn within(&self, sigmas: f64) -> bool {
        self.residual <= sigmas * self.combined_std_error
    }
}

pub fn fg_consistency(
    engine: &Engine,
    t: f64,
    x: &[PhasePoint],
    init: &InitialData,
    spec: &QuadratureSpec,
) -> Result<FgConsistency> {
    let s = x.len();
    if !(1..=3).contains(&s) {
        return Err(Error::domain("cluster relation checked for 1 ≤ s ≤ 3"));
    }
    let f = estimate_f(engine, t, x, init, spec)?;
    // one independent G estimate per nonempty subset
    let mut g: Vec<Option<ReducedEstimate>> = vec![None; 1 << s];
    for mask in 1u32..(1 << s) {
        let pts: Vec<PhasePoint> = (0..s).filter(|i| mask & (1 << i) != 0).map(|i| x[i]).collect();
        g[mask as usize] = Some(estimate_g_labeled(&format!("G/{mask}"), engine, t, &pts, init, spec)?);
    }
    let part = |mask: u32, n: usize| g[mask as usize].as_ref().map_or(0.0, |e| e.per_order[n].value);
    let mut value = 0.0;
    // gradient with respect to each (subset, order) estimate
    let mut grad = vec![vec![0.0; spec.n_max + 1]; 1 << s];
    for p in partition_masks(s)?.iter() {
        let k = p.len();
        let mut orders = vec![0usize; k];
        loop {
            if orders.iter().sum::<usize>() <= spec.n_max {
                let factors: Vec<f64> = p.iter().zip(&orders).map(|(&b, &n)| part(b, n)).collect();
                value += factors.iter().product::<f64>();
                for j in 0..k {
                    let others: f64 = (0..k).filter(|&i| i != j).map(|i| factors[i]).product();
                    grad[p[j] as usize][orders[j]] += others;
                }
            }
            let mut j = 0;
            while j < k {
                orders[j] += 1;
                if orders[j] <= spec.n_max {
                    break;
                }
                orders[j] = 0;
                j += 1;
            }
            if j == k {
                break;
            }
        }
    }
    let mut var = 0.0;
    for mask in 1..(1usize << s) {
        let e = g[mask].as_ref().expect("every subset estimated");
        for (n, o) in e.per_order.iter().enumerate() {
            var += (grad[mask][n] * o.std_error).powi(2);
        }
    }
    let cluster_sum_std_error = var.sqrt();
    Ok(FgConsistency {
        residual: (f.value - value).abs(),
        combined_std_error: (f.std_error.powi(2) + var).sqrt(),
        f,
        cluster_sum: value,
        cluster_sum_std_error,
    })
}

/// Mean and dispersion of an additive observable `Σ_i a(x_i)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Dispersion {
    pub mean: f64,
    pub mean_std_error: f64,
    /// `∫(a² − mean²) G₁ + ∫∫ a a G₂`
    pub variance: f64,
    pub variance_std_error: f64,
    /// `∫ a² G₁ + ∫∫ a a G₂`, the grand canonical variance of `Σ_i a(x_i)`.
    pub grand_canonical_variance: f64,
    pub grand_canonical_std_error: f64,
}

pub fn dispersion_functional(
    engine: &Engine,
    t: f64,
    a1: &OnePointFn,
    init: &InitialData,
    spec: &QuadratureSpec,
) -> Result<Dispersion> {
    if 2 + spec.n_max > init.cap().min(MAX_ELEMENTS) {
        return Err(Error::Capacity {
            what: "integrated spheres",
            value: 2 + spec.n_max,
            limit: init.cap().min(MAX_ELEMENTS),
        });
    }
    let quad = Quadrature::new(engine, t, init, spec)?;
    // columns: a g, a² g, g over one marked sphere
    let mut one = [0.0; 3];
    let mut cov1 = [[0.0; 3]; 3];
    let mut resamples = 0;
    for n in 0..=spec.n_max {
        let o = quad.order("dispersion/1", &[], n + 1, 1.0 / factorial(n), 3, |pts| {
            let a = a1(&pts[0]);
            let g = init.correlation(engine, t, pts)?;
            Ok(vec![a * g, a * a * g, g])
        })?;
        resamples += o.resamples;
        for i in 0..3 {
            one[i] += pairwise_sum(&o.columns[i]) / spec.samples as f64;
            for j in 0..3 {
                cov1[i][j] += mean_covariance(&o.columns[i], &o.columns[j]);
            }
        }
    }
    let pair = quad.series("dispersion/2", &[], 2, |pts| {
        let aa = a1(&pts[0]) * a1(&pts[1]);
        if aa == 0.0 {
            return Ok(0.0);
        }
        Ok(aa * init.correlation(engine, t, pts)?)
    });
    let pair = pair?;
    resamples += pair.pathology_resamples;
    quad.check_budget(resamples)?;
    let [m, a2, n1] = one;
    let grad = [-2.0 * m * n1, 1.0, -m * m];
    let mut var_lit = pair.std_error.powi(2);
    for i in 0..3 {
        for j in 0..3 {
            var_lit += grad[i] * grad[j] * cov1[i][j];
        }
    }
    Ok(Dispersion {
        mean: m,
        mean_std_error: cov1[0][0].max(0.0).sqrt(),
        variance: a2 - m * m * n1 + pair.value,
        variance_std_error: var_lit.max(0.0).sqrt(),
        grand_canonical_variance: a2 + pair.value,
        grand_canonical_std_error: (cov1[1][1] + pair.std_error.powi(2)).max(0.0).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(samples: usize, seed: u64) -> QuadratureSpec {
        QuadratureSpec {
            samples,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn bump_normalisation() {
        let init = InitialData::bump(1.0, 1.0, 1.0).unwrap();
        let z = grand_partition_estimate(&Engine::new(0.0), 0.0, &init, &spec(20_000, 1)).unwrap();
        let lam = InitialData::bump_mean_number(1.0, 1.0);
        let o1 = &z.per_order[1];
        assert!((o1.value - lam).abs() < 4.0 * o1.std_error, "{} vs {lam}", o1.value);
    }

    #[test]
    fn empty_system_has_unit_partition_function() {
        let init = InitialData::general(FunctionSequence::zero(4), 1.0, 1.0).unwrap();
        let z = grand_partition_estimate(&Engine::new(0.1), 0.7, &init, &spec(200, 2)).unwrap();
        assert_eq!(z.value, 1.0);
        assert_eq!(z.std_error, 0.0);
    }

    #[test]
    fn tube_density_integrates_to_one() {
        let prop = Proposal {
            beta: 1.0,
            half: 10.0,
            sigma: 0.3,
            t: 1.5,
        };
        let v = [0.8, -0.3, 0.2];
        // midpoint rule over a box enclosing the tube
        let h = 0.02;
        let mut total = 0.0;
        let lo = [-0.4, -0.8, -0.4];
        let hi = [1.6, 0.4, 0.8];
        let steps: Vec<usize> = (0..3).map(|k| ((hi[k] - lo[k]) / h) as usize).collect();
        for i in 0..steps[0] {
            for j in 0..steps[1] {
                for k in 0..steps[2] {
                    let dq = [
                        lo[0] + (i as f64 + 0.5) * h,
                        lo[1] + (j as f64 + 0.5) * h,
                        lo[2] + (k as f64 + 0.5) * h,
                    ];
                    total += prop.tube_density(&dq, &v) * h * h * h;
                }
            }
        }
        assert!((total - 1.0).abs() < 0.02, "{total}");
    }

    #[test]
    fn anchors_follow_the_bounce() {
        // head-on pair that met at back-time 0.2 and separated again
        let x = [
            PhasePoint::new([-0.3, 0.0, 0.0], [-1.0, 0.0, 0.0]),
            PhasePoint::new([0.3, 0.0, 0.0], [1.0, 0.0, 0.0]),
        ];
        let a = trajectory_anchors(0.2, 1.0, &x);
        assert_eq!(a.len(), 2);
        // free backward motion of the anchor reproduces the true position at back-time 1
        let mut back = x.to_vec();
        crate::dynamics::flow_points(&crate::FlowParams::new(0.2), &mut back, -1.0).unwrap();
        for (anchor, truth) in a.iter().zip(&back) {
            let q = anchor.streamed(-1.0).q;
            for k in 0..3 {
                assert!((q[k] - truth.q[k]).abs() < 1e-12);
            }
        }
        assert!(trajectory_anchors(0.2, 0.1, &x).is_empty());
    }

    #[test]
    fn box_must_cover_support() {
        let init = InitialData::bump(1.0, 2.0, 1.0).unwrap();
        let sp = QuadratureSpec {
            box_half: Some(2.2),
            ..spec(10, 0)
        };
        let r = grand_partition_estimate(&Engine::new(0.1), 0.0, &init, &sp);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn narrow_proposal_is_rejected() {
        let init = InitialData::bump(1.0, 1.0, 1.0).unwrap();
        let sp = QuadratureSpec {
            beta_prop: Some(12.0),
            ..spec(4000, 0)
        };
        let r = grand_partition_estimate(&Engine::new(0.1), 0.0, &init, &sp);
        assert!(matches!(r, Err(Error::WeightBlowup { .. })), "{r:?}");
    }

    #[test]
    fn free_transport_of_one_particle() {
        let init = InitialData::bump(0.5, 1.0, 1.0).unwrap();
        let engine = Engine::new(0.0);
        let x = [PhasePoint::new([0.3, 0.2, -0.1], [0.4, -0.2, 0.3])];
        let t = 0.8;
        let f = estimate_f(&engine, t, &x, &init, &spec(2000, 3)).unwrap();
        let InitialData::Chaos { g1, .. } = &init else { unreachable!() };
        let expect = g1(&x[0].streamed(-t));
        assert!((f.value - expect).abs() < 1e-12, "{} vs {expect}", f.value);
    }

    #[test]
    fn deterministic_for_any_worker_count() {
        let init = InitialData::bump(0.5, 1.0, 1.0).unwrap();
        let engine = Engine::new(0.2);
        let x = [PhasePoint::new([0.1, 0.0, 0.0], [0.5, 0.0, 0.0])];
        let a = estimate_f(&engine, 0.5, &x, &init, &QuadratureSpec { workers: 1, ..spec(500, 4) }).unwrap();
        let b = estimate_f(&engine, 0.5, &x, &init, &QuadratureSpec { workers: 3, ..spec(500, 4) }).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_observed_g_equals_f() {
        let init = InitialData::bump(0.5, 1.0, 1.0).unwrap();
        let engine = Engine::new(0.2);
        let x = [PhasePoint::new([0.1, 0.2, 0.0], [0.5, 0.1, 0.0])];
        let sp = spec(4000, 5);
        let f = estimate_f(&engine, 0.5, &x, &init, &sp).unwrap();
        let g = estimate_g(&engine, 0.5, &x, &init, &sp).unwrap();
        let tol = 3.0 * (f.std_error.powi(2) + g.std_error.powi(2)).sqrt();
        assert!((f.value - g.value).abs() <= tol, "{} vs {} ± {tol}", f.value, g.value);
    }

    #[test]
    fn zero_observable_has_no_dispersion() {
        let init = InitialData::bump(0.5, 1.0, 1.0).unwrap();
        let d = dispersion_functional(&Engine::new(0.1), 0.3, &|_| 0.0, &init, &spec(200, 6)).unwrap();
        assert_eq!((d.mean, d.variance), (0.0, 0.0));
    }
}
