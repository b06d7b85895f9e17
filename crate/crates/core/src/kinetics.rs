//! Kinetic limits: the Boltzmann and Enskog collision terms, a homogeneous
//! particle solver for the Boltzmann equation, the H-functional, scattering
//! cumulants of the kinetic cluster expansion and a low-density scaling probe.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, UnitSphere};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::correlations::{ClusterLabeling, Engine, OnePointFn};
use crate::dynamics::{add, collide, dot, norm2, scale, sub, PhasePoint, Vec3};
use crate::error::{Error, Result};
use crate::partitions::enumerate_dissections;
use crate::reduction::{order_estimate, series_estimate, QuadratureSpec, ReducedEstimate};
use crate::stats::{ls_slope, mix64, pairwise_sum, sample_rng, stream_id, Estimate};

/// A one-particle distribution of momentum alone.
pub type MomentumFn = dyn Fn(&Vec3) -> f64 + Send + Sync;

/// Maxwellian of temperature `temperature` centred on `mean`.
pub fn maxwellian_density(temperature: f64, mean: Vec3, p: &Vec3) -> f64 {
    let d = sub(p, &mean);
    (2.0 * std::f64::consts::PI * temperature).powf(-1.5) * (-norm2(&d) / (2.0 * temperature)).exp()
}

/// Two equal Maxwellian beams of temperature `t0` moving at `±u` along `z`.
pub fn bimodal_density(u: f64, t0: f64) -> impl Fn(&Vec3) -> f64 + Send + Sync + Clone {
    move |p: &Vec3| 0.5 * (maxwellian_density(t0, [0.0, 0.0, u], p) + maxwellian_density(t0, [0.0, 0.0, -u], p))
}

fn gaussian<R: Rng>(rng: &mut R, mean: &Vec3, sd: f64) -> Vec3 {
    let z: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(rng));
    add(mean, &scale(&z, sd))
}

/// Monte Carlo settings for the collision integrals.
///
/// Partner momenta are drawn from a Maxwellian of inverse temperature
/// `proposal_beta` about `proposal_mean`, contact vectors uniformly on the sphere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollisionQuadrature {
    pub samples: usize,
    pub seed: u64,
    pub proposal_beta: f64,
    pub proposal_mean: Vec3,
    pub workers: usize,
}

impl Default for CollisionQuadrature {
    fn default() -> Self {
        CollisionQuadrature {
            samples: 100_000,
            seed: 0,
            proposal_beta: 0.5,
            proposal_mean: [0.0; 3],
            workers: 0,
        }
    }
}

impl CollisionQuadrature {
    pub fn new(samples: usize, seed: u64) -> Self {
        CollisionQuadrature {
            samples,
            seed,
            ..Self::default()
        }
    }

    fn check(&self) -> Result<()> {
        if self.samples < 2 {
            return Err(Error::config("collision quadrature needs at least two samples"));
        }
        if !(self.proposal_beta > 0.0) {
            return Err(Error::config("proposal inverse temperature must be positive"));
        }
        Ok(())
    }

    fn draw_momentum<R: Rng>(&self, rng: &mut R) -> (Vec3, f64) {
        let p = gaussian(rng, &self.proposal_mean, self.proposal_beta.recip().sqrt());
        let density = maxwellian_density(self.proposal_beta.recip(), self.proposal_mean, &p);
        (p, density)
    }

    /// Runs `term` on every sample `i` in parallel and averages, with a fixed
    /// summation order.
    fn average<F>(&self, label: &str, term: F) -> Result<Estimate>
    where
        F: Fn(&mut rand_chacha::ChaCha8Rng) -> Result<f64> + Sync,
    {
        self.average_many(label, 1, |rng| Ok(vec![term(rng)?]))
            .map(|v| v[0])
    }

    fn average_many<F>(&self, label: &str, width: usize, term: F) -> Result<Vec<Estimate>>
    where
        F: Fn(&mut rand_chacha::ChaCha8Rng) -> Result<Vec<f64>> + Sync,
    {
        self.check()?;
        let stream = stream_id(label);
        let rows: Vec<Vec<f64>> = crate::stats::with_workers(self.workers, || {
            (0..self.samples)
                .into_par_iter()
                .map(|i| term(&mut sample_rng(self.seed, stream, i as u64)))
                .collect::<Result<Vec<_>>>()
        })??;
        Ok((0..width)
            .map(|k| Estimate::from_samples(&rows.iter().map(|r| r[k]).collect::<Vec<_>>()))
            .collect())
    }
}

/// A contact vector uniform on the hemisphere where `⟨η, Δp⟩ > 0`; the
/// returned weight is the inverse of its density.
fn approach_contact<R: Rng>(rng: &mut R, dp: &Vec3) -> (Vec3, f64) {
    let v: [f64; 3] = UnitSphere.sample(rng);
    let eta = if dot(&v, dp) < 0.0 { scale(&v, -1.0) } else { v };
    (eta, 2.0 * std::f64::consts::PI)
}

fn nonnegative(v: f64, what: &str) -> Result<f64> {
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(Error::domain(format!("{what} took the value {v}")))
    }
}

/// One sample of `⟨η, Δp⟩ (f(p₁*)f(p₂*) − f(p₁)f(p₂))` divided by the proposal density.
fn collision_sample<R: Rng>(
    quad: &CollisionQuadrature,
    rng: &mut R,
    p1: &Vec3,
    gain: &dyn Fn(&Vec3, &Vec3, &Vec3) -> Result<f64>,
    loss: &dyn Fn(&Vec3, &Vec3, &Vec3) -> Result<f64>,
) -> Result<f64> {
    let (p2, q2) = quad.draw_momentum(rng);
    let dp = sub(p1, &p2);
    let (eta, w) = approach_contact(rng, &dp);
    let g = dot(&eta, &dp);
    if g <= 0.0 || q2 <= 0.0 {
        return Ok(0.0);
    }
    let (p1s, p2s) = collide(p1, &p2, &eta)?;
    Ok(w * g * (gain(&p1s, &p2s, &eta)? - loss(p1, &p2, &eta)?) / q2)
}

/// The Boltzmann collision integral `Q(f, f)(p₁)` for unit diameter.
pub fn boltzmann_collision_integral(f: &MomentumFn, p1: &Vec3, quad: &CollisionQuadrature) -> Result<Estimate> {
    let pair = |a: &Vec3, b: &Vec3, _: &Vec3| -> Result<f64> {
        Ok(nonnegative(f(a), "distribution")? * nonnegative(f(b), "distribution")?)
    };
    quad.average("collision", |rng| collision_sample(quad, rng, p1, &pair, &pair))
}

/// Moments `∫ φ Q(f, f) dp` for `φ = 1, p_x, p_y, p_z, |p|²`, all of which vanish.
pub fn collision_moments(f: &MomentumFn, quad: &CollisionQuadrature) -> Result<[Estimate; 5]> {
    let pair = |a: &Vec3, b: &Vec3, _: &Vec3| -> Result<f64> {
        Ok(nonnegative(f(a), "distribution")? * nonnegative(f(b), "distribution")?)
    };
    let est = quad.average_many("collision/moments", 5, |rng| {
        let (p1, q1) = quad.draw_momentum(rng);
        let c = collision_sample(quad, rng, &p1, &pair, &pair)? / q1;
        Ok(vec![c, c * p1[0], c * p1[1], c * p1[2], c * norm2(&p1)])
    })?;
    Ok([est[0], est[1], est[2], est[3], est[4]])
}

/// The Enskog collision term at `x₁` for spheres of diameter `sigma`:
///
/// `σ² ∫ dp₂ dη ⟨η, Δp⟩ [G(q₁, p₁*) G(q₁ − ση, p₂*) − G(q₁, p₁) G(q₁ + ση, p₂)]`
/// over contact vectors with `⟨η, Δp⟩ > 0`.
///
/// Uses the same random stream as [`boltzmann_collision_integral`], so for a
/// spatially uniform `G` it equals `σ²` times that integral sample by sample.
pub fn enskog_collision_term(
    g1: &(dyn Fn(&PhasePoint) -> f64 + Sync),
    x1: &PhasePoint,
    sigma: f64,
    quad: &CollisionQuadrature,
) -> Result<Estimate> {
    if !(sigma > 0.0) {
        return Err(Error::domain("the Enskog term needs a positive diameter"));
    }
    let at = |q: Vec3, p: &Vec3| nonnegative(g1(&PhasePoint::new(q, *p)), "one-particle function");
    let gain = |a: &Vec3, b: &Vec3, eta: &Vec3| -> Result<f64> {
        Ok(at(x1.q, a)? * at(sub(&x1.q, &scale(eta, sigma)), b)?)
    };
    let loss = |a: &Vec3, b: &Vec3, eta: &Vec3| -> Result<f64> {
        Ok(at(x1.q, a)? * at(add(&x1.q, &scale(eta, sigma)), b)?)
    };
    let e = quad.average("collision", |rng| collision_sample(quad, rng, &x1.p, &gain, &loss))?;
    let s2 = sigma * sigma;
    Ok(Estimate {
        value: s2 * e.value,
        std_error: s2 * e.std_error,
    })
}

/// Momenta of a spatially homogeneous gas at number density `density`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentumEnsemble {
    pub momenta: Vec<Vec3>,
    pub density: f64,
    pub time: f64,
    pub steps: u64,
}

/// Summary moments of a [`MomentumEnsemble`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnsembleMoments {
    pub mean: Vec3,
    pub temperature: f64,
    /// Per-axis temperatures `⟨(p_k − mean_k)²⟩`.
    pub temperature_axes: Vec3,
    /// `⟨|v|⁴⟩ / (15 T²)`, equal to 1 for a Maxwellian.
    pub kurtosis_ratio: f64,
}

impl MomentumEnsemble {
    fn sampled(n: usize, density: f64, seed: u64, draw: impl Fn(usize, &mut rand_chacha::ChaCha8Rng) -> Vec3 + Sync) -> Result<Self> {
        if n < 2 {
            return Err(Error::config("an ensemble needs at least two particles"));
        }
        if !(density > 0.0) {
            return Err(Error::config("number density must be positive"));
        }
        let stream = stream_id("ensemble");
        let momenta = (0..n)
            .into_par_iter()
            .map(|i| draw(i, &mut sample_rng(seed, stream, i as u64)))
            .collect();
        Ok(MomentumEnsemble {
            momenta,
            density,
            time: 0.0,
            steps: 0,
        })
    }

    pub fn maxwellian(n: usize, temperature: f64, mean: Vec3, density: f64, seed: u64) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(Error::config("temperature must be positive"));
        }
        let sd = temperature.sqrt();
        Self::sampled(n, density, seed, |_, rng| gaussian(rng, &mean, sd))
    }

    /// Two counter-propagating beams at `±u` along `z`, alternating by index.
    pub fn bimodal(n: usize, u: f64, t0: f64, density: f64, seed: u64) -> Result<Self> {
        if !(t0 > 0.0) {
            return Err(Error::config("beam temperature must be positive"));
        }
        let sd = t0.sqrt();
        Self::sampled(n, density, seed, |i, rng| {
            let c = if i % 2 == 0 { u } else { -u };
            gaussian(rng, &[0.0, 0.0, c], sd)
        })
    }

    pub fn len(&self) -> usize {
        self.momenta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.momenta.is_empty()
    }

    pub fn total_momentum(&self) -> Vec3 {
        std::array::from_fn(|k| pairwise_sum(&self.momenta.iter().map(|p| p[k]).collect::<Vec<_>>()))
    }

    pub fn kinetic_energy(&self) -> f64 {
        0.5 * pairwise_sum(&self.momenta.iter().map(norm2).collect::<Vec<_>>())
    }

    pub fn moments(&self) -> EnsembleMoments {
        let n = self.len() as f64;
        let mean = scale(&self.total_momentum(), 1.0 / n);
        let dev: Vec<Vec3> = self.momenta.iter().map(|p| sub(p, &mean)).collect();
        let v2: Vec<f64> = dev.iter().map(norm2).collect();
        let temperature = pairwise_sum(&v2) / (3.0 * n);
        let temperature_axes = std::array::from_fn(|k| pairwise_sum(&dev.iter().map(|d| d[k] * d[k]).collect::<Vec<_>>()) / n);
        let v4 = pairwise_sum(&v2.iter().map(|v| v * v).collect::<Vec<_>>()) / n;
        EnsembleMoments {
            mean,
            temperature,
            temperature_axes,
            kurtosis_ratio: v4 / (15.0 * temperature * temperature),
        }
    }

    /// Advances the ensemble by one step of [`dsmc_step`], returning the number of collisions.
    pub fn step(&mut self, dt: f64, sigma: f64, seed: u64) -> Result<usize> {
        let (next, collisions) = dsmc_step(self, dt, sigma, seed)?;
        *self = next;
        Ok(collisions)
    }
}

const MAX_COLLISION_PROBABILITY: f64 = 0.1;

/// One Nanbu–Babovsky step of the homogeneous Boltzmann equation.
///
/// Particles are shuffled into disjoint pairs; each pair draws a contact
/// vector uniformly on the sphere and collides with probability
/// `ρσ² 4π dt max(0, ⟨η, Δp⟩)`. Fails with [`Error::KernelBound`] when that
/// probability could exceed one for the current spread of momenta, and with
/// a configuration error when a particle would collide with probability
/// above 0.1 per step.
pub fn dsmc_step(ensemble: &MomentumEnsemble, dt: f64, sigma: f64, seed: u64) -> Result<(MomentumEnsemble, usize)> {
    if !(dt > 0.0 && sigma > 0.0) {
        return Err(Error::config("time step and diameter must be positive"));
    }
    let mean = ensemble.moments().mean;
    let spread = ensemble
        .momenta
        .iter()
        .map(|p| norm2(&sub(p, &mean)).sqrt())
        .fold(0.0, f64::max);
    let rate = ensemble.density * sigma * sigma * 4.0 * std::f64::consts::PI * dt;
    let ratio = rate * 2.0 * spread;
    if ratio > 1.0 {
        return Err(Error::KernelBound { ratio });
    }
    let step = ensemble.steps;
    let mut order: Vec<usize> = (0..ensemble.len()).collect();
    order.shuffle(&mut sample_rng(seed, stream_id("dsmc/shuffle"), step));
    let speeds: Vec<f64> = order
        .chunks_exact(2)
        .map(|pair| norm2(&sub(&ensemble.momenta[pair[0]], &ensemble.momenta[pair[1]])).sqrt())
        .collect();
    let probability = rate / 4.0 * pairwise_sum(&speeds) / speeds.len() as f64;
    if probability > MAX_COLLISION_PROBABILITY {
        return Err(Error::config(format!(
            "time step too long: collision probability per step {probability:.3} exceeds {MAX_COLLISION_PROBABILITY}"
        )));
    }
    let pair_stream = stream_id("dsmc/pair") ^ mix64(step);
    let updates: Vec<Option<(Vec3, Vec3)>> = order
        .par_chunks_exact(2)
        .enumerate()
        .map(|(k, pair)| {
            let mut rng = sample_rng(seed, pair_stream, k as u64);
            let (a, b) = (&ensemble.momenta[pair[0]], &ensemble.momenta[pair[1]]);
            let eta: [f64; 3] = UnitSphere.sample(&mut rng);
            let g = dot(&eta, &sub(a, b));
            let u: f64 = rng.random();
            if g > 0.0 && u < rate * g {
                collide(a, b, &eta).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect::<Result<_>>()?;
    let mut next = ensemble.clone();
    let mut collisions = 0;
    for (pair, update) in order.chunks_exact(2).zip(updates) {
        if let Some((a, b)) = update {
            next.momenta[pair[0]] = a;
            next.momenta[pair[1]] = b;
            collisions += 1;
        }
    }
    next.time += dt;
    next.steps += 1;
    Ok((next, collisions))
}

/// Cubic histogram used by [`h_functional`]: `bins_per_axis` bins per axis
/// over a cube of half-width `half_width` thermal speeds about the mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HistogramSpec {
    pub bins_per_axis: usize,
    pub half_width: f64,
}

impl Default for HistogramSpec {
    fn default() -> Self {
        HistogramSpec {
            bins_per_axis: 10,
            half_width: 3.5,
        }
    }
}

/// Histogram estimate of `H = ∫ f log f`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HEstimate {
    pub value: f64,
    pub std_error: f64,
    pub empty_fraction: f64,
    pub occupied_bins: usize,
    pub outside_fraction: f64,
}

/// `H` for a sample of momenta, binned in the frame of its own mean and temperature.
pub fn h_functional(momenta: &[Vec3], spec: &HistogramSpec) -> Result<HEstimate> {
    if momenta.len() < 2 {
        return Err(Error::config("the H functional needs at least two momenta"));
    }
    let n = momenta.len() as f64;
    let mean: Vec3 = std::array::from_fn(|k| pairwise_sum(&momenta.iter().map(|p| p[k]).collect::<Vec<_>>()) / n);
    let temperature = pairwise_sum(&momenta.iter().map(|p| norm2(&sub(p, &mean))).collect::<Vec<_>>()) / (3.0 * n);
    h_functional_in_frame(momenta, spec, mean, temperature)
}

/// `H` with the histogram cube centred on `center` and scaled by `temperature`.
///
/// Plug-in estimate `Σ_k (n_k/N) log(n_k / (N Δ³))` with the Miller–Madow
/// correction `−(K_occ − 1)/(2N)`, where `N` counts the momenta inside the
/// cube; the rest are reported in `outside_fraction` and otherwise ignored.
pub fn h_functional_in_frame(momenta: &[Vec3], spec: &HistogramSpec, center: Vec3, temperature: f64) -> Result<HEstimate> {
    let b = spec.bins_per_axis;
    if b == 0 || !(spec.half_width > 0.0) || !(temperature > 0.0) {
        return Err(Error::config("histogram needs bins, a positive width and a positive temperature"));
    }
    let half = spec.half_width * temperature.sqrt();
    let width = 2.0 * half / b as f64;
    let mut counts = vec![0u64; b * b * b];
    for p in momenta {
        let mut idx = 0;
        let mut inside = true;
        for k in 0..3 {
            let c = ((p[k] - center[k] + half) / width).floor();
            if !(c >= 0.0 && c < b as f64) {
                inside = false;
                break;
            }
            idx = idx * b + c as usize;
        }
        if inside {
            counts[idx] += 1;
        }
    }
    let inside: u64 = counts.iter().sum();
    if inside < 2 {
        return Err(Error::Resolution { empty_fraction: 1.0 });
    }
    let n = inside as f64;
    let outside_fraction = 1.0 - n / momenta.len() as f64;
    let occupied = counts.iter().filter(|&&c| c > 0).count();
    let empty_fraction = 1.0 - occupied as f64 / counts.len() as f64;
    if empty_fraction > 0.5 {
        return Err(Error::Resolution { empty_fraction });
    }
    let vol = width.powi(3);
    let (terms, squares): (Vec<f64>, Vec<f64>) = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let w = c as f64 / n;
            let l = (c as f64 / (n * vol)).ln();
            (w * l, w * l * l)
        })
        .unzip();
    let plug_in = pairwise_sum(&terms);
    let var = (pairwise_sum(&squares) - plug_in * plug_in).max(0.0);
    Ok(HEstimate {
        value: plug_in - (occupied as f64 - 1.0) / (2.0 * n),
        std_error: (var / n).sqrt(),
        empty_fraction,
        occupied_bins: occupied,
        outside_fraction,
    })
}

/// `H` of an exact Maxwellian of temperature `temperature`: `−(3/2) ln(2πeT)`.
pub fn maxwellian_h(temperature: f64) -> f64 {
    -1.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * temperature).ln()
}

/// Expected value of the binned `H` for an exact Maxwellian histogrammed in
/// its own frame and conditioned on the cube, with the bin probabilities
/// integrated by Simpson's rule.
pub fn binned_maxwellian_h(temperature: f64, spec: &HistogramSpec) -> f64 {
    let b = spec.bins_per_axis;
    let sd = temperature.sqrt();
    let half = spec.half_width * sd;
    let width = 2.0 * half / b as f64;
    let density = |v: f64| (-(v * v) / (2.0 * temperature)).exp() / (2.0 * std::f64::consts::PI * temperature).sqrt();
    let probs: Vec<f64> = (0..b)
        .map(|k| {
            let lo = -half + k as f64 * width;
            let m = 64;
            let h = width / m as f64;
            let mut s = density(lo) + density(lo + width);
            for j in 1..m {
                s += density(lo + j as f64 * h) * if j % 2 == 1 { 4.0 } else { 2.0 };
            }
            s * h / 3.0
        })
        .collect();
    let total: f64 = probs.iter().sum();
    let cube = total.powi(3);
    let entropy_1d: f64 = probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum();
    3.0 * total * total * entropy_1d / cube - cube.ln() - 3.0 * width.ln()
}

/// Applies the operators in `ops` (leftmost outermost) to `f` at `x`.
///
/// Each entry lists the variables of one scattering cumulant
/// `Â_k = Σ_Q c_{|Q|} ∏_{B ∈ Q} S_{|B|}(−t, B) 𝒳 ∏_{i ∈ B} S₁(t, i)`.
fn apply_scattering(
    engine: &Engine,
    t: f64,
    ops: &[Vec<usize>],
    f: &dyn Fn(&[PhasePoint]) -> Result<f64>,
    x: &[PhasePoint],
) -> Result<f64> {
    let Some((first, rest)) = ops.split_first() else {
        return f(x);
    };
    let labeling = ClusterLabeling::new(first.iter().map(|&i| vec![i]).collect())?;
    engine.cumulant_apply(
        t,
        &labeling,
        |y| {
            let mut z = y.to_vec();
            for &i in first {
                z[i] = z[i].streamed(t);
            }
            apply_scattering(engine, t, rest, f, &z)
        },
        x,
    )
}

/// The scattering cumulant `Â_k(t, vars)` applied to `∏ g(t)` at `x`.
pub fn scattering_cumulant(engine: &Engine, t: f64, vars: &[usize], g1_t: &(dyn Fn(&PhasePoint) -> f64 + Sync), x: &[PhasePoint]) -> Result<f64> {
    apply_scattering(engine, t, &[vars.to_vec()], &product_of(g1_t), x)
}

fn product_of(g1_t: &(dyn Fn(&PhasePoint) -> f64 + Sync)) -> impl Fn(&[PhasePoint]) -> Result<f64> + '_ {
    move |pts: &[PhasePoint]| {
        pts.iter()
            .try_fold(1.0, |acc, y| Ok(acc * nonnegative(g1_t(y), "one-particle function")?))
    }
}

/// Ordered selections of `k` distinct indices from `0..m`.
fn injections(k: usize, m: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for _ in 0..k {
        out = out
            .into_iter()
            .flat_map(|v| {
                let taken = v.clone();
                (0..m).filter(move |i| !taken.contains(i)).map(move |i| {
                    let mut w = v.clone();
                    w.push(i);
                    w
                })
            })
            .collect();
    }
    out
}

/// Sequences of positive integers with sum at most `n`.
fn compositions(n: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![(Vec::new(), 0usize)];
    while let Some((seq, sum)) = frontier.pop() {
        for part in 1..=n - sum {
            let mut next: Vec<usize> = seq.clone();
            next.push(part);
            out.push(next.clone());
            frontier.push((next, sum + part));
        }
    }
    out
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

const MAX_SCATTERING_ORDER: usize = 1;

fn check_order(s: usize, n: usize, x: &[PhasePoint]) -> Result<()> {
    if n > MAX_SCATTERING_ORDER {
        return Err(Error::domain(format!(
            "scattering expansions are available for n ≤ {MAX_SCATTERING_ORDER}, got {n}"
        )));
    }
    if s == 0 || x.len() != s + n {
        return Err(Error::domain(format!("expected {} points for s = {s}, n = {n}", s + n)));
    }
    Ok(())
}

/// `𝔙_{s+n}(t) ∏ g(t)` at `x = (x₁…x_{s+n})`, summed over dissections:
///
/// `n! Σ_k (−1)^k Σ_{n₁…n_k} 1/(n − Σn_j)! Â_{s+n−Σn_j} ∏_j Σ_{D_j} 1/|D_j|!
///  Σ_{i₁≠…} ∏_{X ∈ D_j} 1/|X|! Â_{1+|X|}(t, i_l, X)`.
pub fn scattering_cumulant_apply(engine: &Engine, t: f64, s: usize, n: usize, g1_t: &(dyn Fn(&PhasePoint) -> f64 + Sync), x: &[PhasePoint]) -> Result<f64> {
    check_order(s, n, x)?;
    let f = product_of(g1_t);
    let mut total = 0.0;
    for comp in compositions(n) {
        let used: usize = comp.iter().sum();
        let rest = s + n - used;
        let sign = if comp.len() % 2 == 0 { 1.0 } else { -1.0 };
        let coef = factorial(n) * sign / factorial(n - used);
        // every group contributes a choice of dissection and attachment points
        let mut choices: Vec<(f64, Vec<Vec<usize>>)> = vec![(coef, vec![(0..rest).collect()])];
        let mut upper_prev = s + n;
        for &nj in &comp {
            let upper = upper_prev - nj;
            let ground: Vec<usize> = (upper..upper_prev).collect();
            let mut group = Vec::new();
            for d in enumerate_dissections(&ground, upper)? {
                let parts = &d.parts;
                let w = parts.iter().map(|p| 1.0 / factorial(p.len())).product::<f64>() / factorial(parts.len());
                for attach in injections(parts.len(), upper) {
                    let ops: Vec<Vec<usize>> = parts
                        .iter()
                        .zip(&attach)
                        .map(|(part, &i)| std::iter::once(i).chain(part.iter().copied()).collect())
                        .collect();
                    group.push((w, ops));
                }
            }
            choices = choices
                .into_iter()
                .flat_map(|(w0, ops0)| {
                    group.iter().map(move |(w, ops)| {
                        let mut all = ops0.clone();
                        all.extend(ops.iter().cloned());
                        (w0 * w, all)
                    })
                })
                .collect();
            upper_prev = upper;
        }
        for (w, ops) in choices {
            total += w * apply_scattering(engine, t, &ops, &f, x)?;
        }
    }
    Ok(total)
}

/// The same quantity from the closed forms `𝔙_s = Â_s` and
/// `𝔙_{s+1} = Â_{s+1} − Â_s Σ_j Â₂(t, j, s+1)`.
pub fn scattering_cumulant_displayed(engine: &Engine, t: f64, s: usize, n: usize, g1_t: &(dyn Fn(&PhasePoint) -> f64 + Sync), x: &[PhasePoint]) -> Result<f64> {
    check_order(s, n, x)?;
    let f = product_of(g1_t);
    let all: Vec<usize> = (0..s + n).collect();
    let mut v = apply_scattering(engine, t, &[all], &f, x)?;
    if n == 1 {
        let observed: Vec<usize> = (0..s).collect();
        for j in 0..s {
            v -= apply_scattering(engine, t, &[observed.clone(), vec![j, s]], &f, x)?;
        }
    }
    Ok(v)
}

/// The two-particle correlation functional `G₂(t | G₁(t))` at `(x₁, x₂)`:
/// `𝔙₂ ∏ G₁(t) + ∫ dx₃ 𝔙₃ ∏ G₁(t)`, terms above the first order omitted.
///
/// `g1_t` is used in the `𝔙₂` term. The integral is evaluated with `leading`
/// when given, an evaluator of `G₁(t)` to leading order in the density; the
/// difference is of the order of the omitted terms.
#[allow(clippy::too_many_arguments)]
pub fn correlation_functional_g2(
    engine: &Engine,
    t: f64,
    x: &[PhasePoint],
    g1_t: Arc<OnePointFn>,
    leading: Option<Arc<OnePointFn>>,
    support: f64,
    beta: f64,
    spec: &QuadratureSpec,
) -> Result<ReducedEstimate> {
    if x.len() != 2 {
        return Err(Error::domain("the pair functional takes two points"));
    }
    let spec = QuadratureSpec {
        n_max: spec.n_max.min(MAX_SCATTERING_ORDER),
        ..spec.clone()
    };
    let leading = leading.unwrap_or_else(|| g1_t.clone());
    series_estimate(engine, t, "G2-functional", x, support, beta, &spec, |pts| {
        let n = pts.len() - 2;
        let g = if n == 0 { g1_t.as_ref() } else { leading.as_ref() };
        scattering_cumulant_apply(engine, t, 2, n, g, pts)
    })
}

/// One point of a [`ScalingProbe`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScalingPoint {
    pub epsilon: f64,
    pub magnitude: f64,
    pub std_error: f64,
}

/// Magnitudes of one order of a correlation expansion against the diameter.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingProbe {
    pub points: Vec<ScalingPoint>,
    /// Least-squares slope of `log magnitude` against `log ε`.
    pub slope: f64,
    /// Set when some magnitude is below twice its standard error.
    pub inconclusive: bool,
}

/// `|(1/n!) ∫ 𝔄_{s+n}(t) ∏ f⁰|` at `x` for diameters `ε` in `epsilons`, with
/// `s = x.len()` and the unscaled data `f⁰`; equivalently the order-`n` term
/// of `ε^{2s} G_s` for data `f⁰/ε²`. All diameters share one random stream.
#[allow(clippy::too_many_arguments)]
pub fn bg_scaling_probe(
    t: f64,
    x: &[PhasePoint],
    n: usize,
    epsilons: &[f64],
    f0: Arc<OnePointFn>,
    support: f64,
    beta: f64,
    spec: &QuadratureSpec,
) -> Result<ScalingProbe> {
    if epsilons.len() < 3 || epsilons.iter().any(|&e| !(e > 0.0)) || epsilons.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::config("the probe needs at least three positive, decreasing diameters"));
    }
    let mut points = Vec::with_capacity(epsilons.len());
    for &epsilon in epsilons {
        let engine = Engine::new(epsilon);
        let est = order_estimate(&engine, t, "scaling", x, n, support, beta, spec, |pts| {
            engine.chaos_correlations(t, f0.as_ref(), pts)
        })?;
        points.push(ScalingPoint {
            epsilon,
            magnitude: est.value.abs(),
            std_error: est.std_error,
        });
    }
    let inconclusive = points.iter().any(|p| !(p.magnitude >= 2.0 * p.std_error) || p.magnitude == 0.0);
    let slope = if points.iter().all(|p| p.magnitude > 0.0) {
        let lx: Vec<f64> = points.iter().map(|p| p.epsilon.ln()).collect();
        let ly: Vec<f64> = points.iter().map(|p| p.magnitude.ln()).collect();
        ls_slope(&lx, &ly)
    } else {
        f64::NAN
    };
    Ok(ScalingProbe {
        points,
        slope,
        inconclusive,
    })
}
