//! Invariant suites: algebra of cluster expansions, hard-sphere dynamics and
//! cumulants of the flow groups.

use std::path::PathBuf;

use hscorr::dynamics::{dot, flow_points, next_event, norm2, points_allowed, sub};
use hscorr::partitions::{cumulant_coefficient, exp_star, ln_star, partition_masks, star_product};
use hscorr::stats::{sample_rng, stream_id};
use hscorr::{Engine, FlowParams, FunctionSequence, PhasePoint, SystemState, Vec3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::output::{create_dir, create_file, with_provenance};
use crate::{CliError, Provenance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Algebra,
    Dynamics,
    Cumulants,
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::Algebra => "algebra",
            Suite::Dynamics => "dynamics",
            Suite::Cumulants => "cumulants",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
}

/// Outcome of one check in a suite.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub check: String,
    pub status: Status,
    pub max_residual: f64,
    pub tolerance: f64,
    pub cases: usize,
}

impl CheckReport {
    fn new(check: &str, max_residual: f64, tolerance: f64, cases: usize) -> Self {
        let status = if max_residual <= tolerance { Status::Pass } else { Status::Fail };
        CheckReport {
            check: check.to_string(),
            status,
            max_residual,
            tolerance,
            cases,
        }
    }

    pub fn passed(&self) -> bool {
        self.status == Status::Pass
    }
}

/// Resolved settings of a verification run, hashed into the provenance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyConfig {
    pub suite: Suite,
    pub seed: u64,
    pub tampered_coefficient: bool,
}

pub fn run_suite(config: &VerifyConfig) -> Result<Vec<CheckReport>, CliError> {
    let seed = config.seed;
    match config.suite {
        Suite::Algebra => algebra(seed),
        Suite::Dynamics => dynamics(seed),
        Suite::Cumulants => {
            let mut engine = Engine::new(0.5);
            if config.tampered_coefficient {
                engine = engine.with_coefficient(tampered);
            }
            cumulants(&engine, seed)
        }
    }
}

/// Runs the suite and writes `verify-<suite>.json` under `out`.
pub fn run(config: &VerifyConfig, out: &std::path::Path) -> Result<(Vec<CheckReport>, PathBuf), CliError> {
    let reports = run_suite(config)?;
    let provenance = Provenance::new(config.seed, config)?;
    let records = reports
        .iter()
        .map(|r| with_provenance(&provenance, r))
        .collect::<Result<Vec<_>, _>>()?;
    create_dir(out)?;
    let path = out.join(format!("verify-{}.json", config.suite.name()));
    let mut file = create_file(&path)?;
    serde_json::to_writer_pretty(&mut file, &records)?;
    std::io::Write::write_all(&mut file, b"\n").map_err(|source| CliError::Io { path: path.clone(), source })?;
    Ok((reports, path))
}

fn tampered(block_count: usize) -> f64 {
    let c = cumulant_coefficient(block_count) as f64;
    if block_count > 1 { 1.05 * c } else { c }
}

fn rng(seed: u64, label: &str, i: usize) -> ChaCha8Rng {
    sample_rng(seed, stream_id(label), i as u64)
}

fn vec3(rng: &mut ChaCha8Rng, half: f64) -> Vec3 {
    std::array::from_fn(|_| rng.random_range(-half..half))
}

fn relative(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Symmetric sequence with a pair term, so that no component factorises.
fn test_sequence(amplitudes: Vec<f64>) -> FunctionSequence {
    let cap = amplitudes.len() - 1;
    FunctionSequence::new(cap, move |x| {
        let mut pair = 0.0;
        for i in 0..x.len() {
            for j in i + 1..x.len() {
                pair += (-norm2(&sub(&x[i].q, &x[j].q))).exp();
            }
        }
        let one: f64 = x
            .iter()
            .map(|y| (-norm2(&y.q) / 4.0).exp() * (1.0 + 0.3 * (y.p[0] + 2.0 * y.p[1] - y.p[2]).cos()))
            .product();
        Ok(amplitudes[x.len()] * one * (1.0 + 0.2 * pair))
    })
}

fn random_points(rng: &mut ChaCha8Rng, n: usize, half: f64) -> Vec<PhasePoint> {
    (0..n).map(|_| PhasePoint::new(vec3(rng, half), vec3(rng, half))).collect()
}

fn algebra(seed: u64) -> Result<Vec<CheckReport>, CliError> {
    const CASES: usize = 100;
    const CAP: usize = 5;
    let (mut inv_ln, mut inv_exp, mut assoc, mut comm) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for i in 0..CASES {
        let mut r = rng(seed, "verify/algebra", i);
        let mut amp = |first: f64| {
            let mut a: Vec<f64> = (0..=CAP).map(|_| r.random_range(-1.0..1.0)).collect();
            a[0] = first;
            a
        };
        let h = test_sequence(amp(0.0));
        let u = test_sequence(amp(1.0));
        let (f, g, k) = (test_sequence(amp(0.5)), test_sequence(amp(-0.5)), test_sequence(amp(2.0)));
        let x = random_points(&mut r, i % (CAP + 1), 2.0);
        let back = ln_star(&exp_star(&h)?)?.eval(&x)?;
        inv_ln = inv_ln.max(relative(back, h.eval(&x)?));
        let back = exp_star(&ln_star(&u)?)?.eval(&x)?;
        inv_exp = inv_exp.max(relative(back, u.eval(&x)?));
        let y = &x[..x.len().min(4)];
        let left = star_product(&star_product(&f, &g)?, &k)?.eval(y)?;
        let right = star_product(&f, &star_product(&g, &k)?)?.eval(y)?;
        assoc = assoc.max(relative(left, right));
        comm = comm.max(relative(star_product(&f, &g)?.eval(y)?, star_product(&g, &f)?.eval(y)?));
    }
    let mut mobius = 0.0f64;
    for m in 1..=8 {
        let sum: i64 = partition_masks(m)?.iter().map(|p| cumulant_coefficient(p.len())).sum();
        mobius = mobius.max((sum - i64::from(m == 1)).abs() as f64);
    }
    Ok(vec![
        CheckReport::new("ln_of_exp_inverts", inv_ln, 1e-12, CASES),
        CheckReport::new("exp_of_ln_inverts", inv_exp, 1e-12, CASES),
        CheckReport::new("mobius_identity", mobius, 0.0, 8),
        CheckReport::new("star_associativity", assoc, 1e-12, CASES),
        CheckReport::new("star_commutativity", comm, 1e-12, CASES),
    ])
}

/// A cluster of `n` spheres drifting towards a common centre.
fn converging_cluster(rng: &mut ChaCha8Rng, n: usize, sigma: f64) -> Vec<PhasePoint> {
    loop {
        let pts: Vec<PhasePoint> = (0..n)
            .map(|_| {
                let q = vec3(rng, 1.2 * sigma * n as f64);
                let jitter = vec3(rng, 0.3);
                let p = std::array::from_fn(|k| -0.8 * q[k] + jitter[k]);
                PhasePoint::new(q, p)
            })
            .collect();
        if points_allowed(sigma, &pts) {
            return pts;
        }
    }
}

fn dynamics(seed: u64) -> Result<Vec<CheckReport>, CliError> {
    const EVENTS: usize = 1000;
    const CONTACTS: usize = 1000;
    let sigma = 1.0;
    let params = FlowParams::new(sigma);
    // long enough for every cluster to scatter and separate
    let horizon = 3.0;
    let (mut energy, mut momentum, mut reverse) = (0.0f64, 0.0f64, 0.0f64);
    let (mut events, mut runs) = (0, 0);
    while events < EVENTS {
        let mut r = rng(seed, "verify/dynamics", runs);
        let start = converging_cluster(&mut r, 2 + runs % 3, sigma);
        runs += 1;
        let mut pts = start.clone();
        let count = flow_points(&params, &mut pts, horizon)?;
        if count == 0 {
            continue;
        }
        events += count;
        let (before, after) = (SystemState::new(sigma, start.clone()), SystemState::new(sigma, pts.clone()));
        energy = energy.max(relative(before.kinetic_energy(), after.kinetic_energy()));
        let (p0, p1) = (before.total_momentum(), after.total_momentum());
        momentum = momentum.max((0..3).map(|k| (p0[k] - p1[k]).abs()).fold(0.0, f64::max));
        flow_points(&params, &mut pts, -horizon)?;
        for (a, b) in start.iter().zip(&pts) {
            for k in 0..3 {
                reverse = reverse.max((a.q[k] - b.q[k]).abs()).max((a.p[k] - b.p[k]).abs());
            }
        }
    }
    let mut contact = 0.0f64;
    for i in 0..CONTACTS {
        let mut r = rng(seed, "verify/contact", i);
        let (pts, exact) = approaching_pair(&mut r, sigma);
        let event = next_event(&SystemState::new(sigma, pts), 2.0 * exact)?
            .ok_or_else(|| CliError::Config("an approaching pair must collide".into()))?;
        contact = contact.max((event.time - exact).abs() / exact);
    }
    Ok(vec![
        CheckReport::new("energy_conservation", energy, 1e-10, events),
        CheckReport::new("momentum_conservation", momentum, 1e-10, events),
        CheckReport::new("reversibility", reverse, 1e-10, events),
        CheckReport::new("two_body_contact_time", contact, 1e-12, CONTACTS),
    ])
}

/// A pair on a collision course with impact parameter below `0.9σ`, and its contact time.
fn approaching_pair(rng: &mut ChaCha8Rng, sigma: f64) -> (Vec<PhasePoint>, f64) {
    loop {
        let q2 = vec3(rng, 3.0 * sigma);
        let v = vec3(rng, 2.0);
        let (a, b, c) = (norm2(&v), dot(&q2, &v), norm2(&q2) - sigma * sigma);
        if c <= 0.0 || b >= 0.0 || a < 1e-2 {
            continue;
        }
        let miss = norm2(&q2) - b * b / a;
        if miss >= (0.9 * sigma).powi(2) {
            continue;
        }
        let exact = c / (-b + (b * b - a * c).sqrt());
        let pts = vec![
            PhasePoint::new([0.0; 3], [0.0; 3]),
            PhasePoint::new(q2, v),
        ];
        return (pts, exact);
    }
}

fn cumulants(engine: &Engine, seed: u64) -> Result<Vec<CheckReport>, CliError> {
    const SQUARE_CASES: usize = 200;
    const GROUP_CASES: usize = 100;
    let sigma = engine.sigma();
    let mut square = 0.0f64;
    for i in 0..SQUARE_CASES {
        let mut r = rng(seed, "verify/square", i);
        let s = 1 + i % 3;
        let amplitudes: Vec<f64> = (0..=s).map(|k| if k == 0 { 0.0 } else { r.random_range(0.2..1.0) }).collect();
        let g0 = test_sequence(amplitudes);
        let x = converging_cluster(&mut r, s, sigma);
        let t = r.random_range(0.2..2.0);
        let direct = engine.evolve_correlations(t, &g0, &x)?;
        let via_densities = ln_star(&engine.evolved_density_sequence(t, &exp_star(&g0)?))?.eval(&x)?;
        square = square.max(relative(direct, via_densities));
    }
    let mut group = 0.0f64;
    for i in 0..GROUP_CASES {
        let mut r = rng(seed, "verify/group", i);
        let g0 = test_sequence(vec![0.0, r.random_range(0.2..1.0), r.random_range(0.2..1.0)]);
        let x = converging_cluster(&mut r, 2, sigma);
        let (t1, t2) = (r.random_range(-1.5..1.5), r.random_range(-1.5..1.5));
        group = group.max(engine.nonlinear_group_compose_check(t1, t2, &g0, &x)?);
    }
    Ok(vec![
        CheckReport::new("commuting_square", square, 1e-10, SQUARE_CASES),
        CheckReport::new("nonlinear_group_property", group, 1e-9, GROUP_CASES),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn approaching_pairs_touch_at_the_closed_form_time() {
        let mut r = rng(1, "t", 0);
        let (pts, t) = approaching_pair(&mut r, 1.0);
        let d: Vec3 = std::array::from_fn(|k| pts[1].q[k] + pts[1].p[k] * t - pts[0].q[k]);
        assert!((norm2(&d) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tampering_changes_only_proper_partitions() {
        assert_eq!(tampered(1), 1.0);
        assert_eq!(tampered(2), -1.05);
    }

    #[test]
    fn algebra_suite_passes() {
        let reports = algebra(3).unwrap();
        assert!(reports.iter().all(CheckReport::passed), "{reports:?}");
    }
}
