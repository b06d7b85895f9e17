//! Exact event-driven dynamics of a few hard spheres in unbounded ℝ³.
//!
//! Unit mass throughout, so momenta are velocities. The contact vector of a
//! collision between spheres `i < j` is `η = (q_j − q_i)/σ`, which makes the
//! approach condition read `⟨η, p_i − p_j⟩ > 0`; every module shares this
//! orientation.

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

#[inline]
pub fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn sub(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn add(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn scale(a: &Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn norm2(a: &Vec3) -> f64 {
    dot(a, a)
}

/// Position and momentum of one sphere.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PhasePoint {
    pub q: Vec3,
    pub p: Vec3,
}

impl PhasePoint {
    pub fn new(q: Vec3, p: Vec3) -> Self {
        PhasePoint { q, p }
    }

    /// Free motion over time `t`.
    #[inline]
    pub fn streamed(&self, t: f64) -> PhasePoint {
        PhasePoint {
            q: add(&self.q, &scale(&self.p, t)),
            p: self.p,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(self.p.iter()).all(|v| v.is_finite())
    }
}

/// `n` labelled spheres of a common diameter.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemState {
    pub sigma: f64,
    pub points: Vec<PhasePoint>,
}

impl SystemState {
    pub fn new(sigma: f64, points: Vec<PhasePoint>) -> Self {
        SystemState { sigma, points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn kinetic_energy(&self) -> f64 {
        self.points.iter().map(|x| 0.5 * norm2(&x.p)).sum()
    }

    pub fn total_momentum(&self) -> Vec3 {
        self.points.iter().fold([0.0; 3], |acc, x| add(&acc, &x.p))
    }
}

/// A binary contact found by [`next_event`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollisionEvent {
    pub time: f64,
    pub pair: (usize, usize),
    /// Unit vector from sphere `pair.0` to sphere `pair.1` at contact.
    pub eta: Vec3,
}

/// Parameters of the exact flow.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowParams {
    pub sigma: f64,
    pub max_collisions: usize,
}

impl FlowParams {
    pub const DEFAULT_MAX_COLLISIONS: usize = 1_000_000;

    pub fn new(sigma: f64) -> Self {
        FlowParams {
            sigma,
            max_collisions: Self::DEFAULT_MAX_COLLISIONS,
        }
    }
}

const ALLOWED_REL_TOL: f64 = 1e-12;
const GRAZING_TOL: f64 = 1e-12;
const TIE_REL_TOL: f64 = 1e-12;
const ETA_TOL: f64 = 1e-10;

/// Allowed-configuration predicate on a slice of points.
pub fn points_allowed(sigma: f64, points: &[PhasePoint]) -> bool {
    let min2 = (sigma * (1.0 - ALLOWED_REL_TOL)).powi(2);
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            if norm2(&sub(&points[i].q, &points[j].q)) < min2 {
                return false;
            }
        }
    }
    true
}

/// True iff no pair of centres is closer than σ. Contact is allowed.
pub fn is_allowed(state: &SystemState) -> bool {
    points_allowed(state.sigma, &state.points)
}

/// Elastic collision law: returns `(p_i*, p_j*)`.
pub fn collide(pi: &Vec3, pj: &Vec3, eta: &Vec3) -> Result<(Vec3, Vec3)> {
    let n = norm2(eta).sqrt();
    if !((n - 1.0).abs() <= ETA_TOL) {
        return Err(Error::domain(format!("contact vector has norm {n}")));
    }
    let k = dot(eta, &sub(pi, pj));
    Ok((sub(pi, &scale(eta, k)), add(pj, &scale(eta, k))))
}

/// Time until spheres `a`, `b` touch under free streaming, if they approach.
///
/// The smaller root of `|Δq + tΔp| = σ` is taken in the form
/// `c / (−b + √disc)`, which stays accurate for grazing encounters.
fn contact_time(sigma: f64, a: &PhasePoint, b: &PhasePoint) -> Option<f64> {
    let dq = sub(&a.q, &b.q);
    let dp = sub(&a.p, &b.p);
    let bq = dot(&dq, &dp);
    if bq >= 0.0 {
        return None;
    }
    let aa = norm2(&dp);
    let c = norm2(&dq) - sigma * sigma;
    let disc = bq * bq - aa * c;
    if disc <= 0.0 {
        return None;
    }
    let root = disc.sqrt();
    // ⟨η, Δp⟩ at contact equals √disc / σ.
    if root / sigma < GRAZING_TOL {
        return None;
    }
    Some((c / (-bq + root)).max(0.0))
}

fn contact_eta(a: &PhasePoint, b: &PhasePoint) -> Vec3 {
    let d = sub(&b.q, &a.q);
    let n = norm2(&d).sqrt();
    scale(&d, 1.0 / n)
}

/// Earliest binary contact within `horizon`, or `None`.
pub fn next_event(state: &SystemState, horizon: f64) -> Result<Option<CollisionEvent>> {
    if !is_allowed(state) {
        return Err(Error::domain("next_event on a forbidden configuration"));
    }
    let pts = &state.points;
    let mut best: Option<(f64, usize, usize)> = None;
    let mut second = f64::INFINITY;
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            if let Some(t) = contact_time(state.sigma, &pts[i], &pts[j]) {
                if t > horizon {
                    continue;
                }
                match best {
                    Some((bt, _, _)) if t >= bt => second = second.min(t),
                    Some((bt, _, _)) => {
                        second = bt;
                        best = Some((t, i, j));
                    }
                    None => best = Some((t, i, j)),
                }
            }
        }
    }
    let Some((t, i, j)) = best else {
        return Ok(None);
    };
    if second - t <= TIE_REL_TOL * horizon {
        return Err(Error::Pathology {
            time: t,
            detail: "simultaneous binary contacts".into(),
        });
    }
    let a = pts[i].streamed(t);
    let b = pts[j].streamed(t);
    Ok(Some(CollisionEvent {
        time: t,
        pair: (i, j),
        eta: contact_eta(&a, &b),
    }))
}

/// Forward flow of `points` over `t ≥ 0` in place. Returns the collision count.
fn flow_forward(params: &FlowParams, points: &mut [PhasePoint], t: f64) -> Result<usize> {
    let n = points.len();
    // point particles never meet
    if n < 2 || params.sigma == 0.0 {
        for x in points.iter_mut() {
            *x = x.streamed(t);
        }
        return Ok(0);
    }
    let sigma = params.sigma;
    let tie_tol = TIE_REL_TOL * t;
    // Absolute contact times; recomputed only for pairs touching the last event.
    let idx = |i: usize, j: usize| i * n + j;
    let mut table = vec![f64::INFINITY; n * n];
    for i in 0..n {
        for j in i + 1..n {
            if let Some(dt) = contact_time(sigma, &points[i], &points[j]) {
                table[idx(i, j)] = dt;
            }
        }
    }
    let mut now = 0.0;
    let mut collisions = 0usize;
    loop {
        let mut best = (f64::INFINITY, 0, 0);
        let mut second = f64::INFINITY;
        for i in 0..n {
            for j in i + 1..n {
                let tc = table[idx(i, j)];
                if tc < best.0 {
                    second = best.0;
                    best = (tc, i, j);
                } else if tc < second {
                    second = tc;
                }
            }
        }
        let (tc, i, j) = best;
        if tc > t {
            break;
        }
        if second <= t && second - tc <= tie_tol {
            return Err(Error::Pathology {
                time: tc,
                detail: "simultaneous binary contacts".into(),
            });
        }
        for x in points.iter_mut() {
            *x = x.streamed(tc - now);
        }
        now = tc;
        let eta = contact_eta(&points[i], &points[j]);
        let (pi, pj) = collide(&points[i].p, &points[j].p, &eta)?;
        points[i].p = pi;
        points[j].p = pj;
        collisions += 1;
        if collisions > params.max_collisions {
            return Err(Error::Runaway {
                limit: params.max_collisions,
            });
        }
        for k in 0..n {
            for &m in &[i, j] {
                if k == m {
                    continue;
                }
                let (a, b) = if k < m { (k, m) } else { (m, k) };
                table[idx(a, b)] = match contact_time(sigma, &points[a], &points[b]) {
                    Some(dt) => now + dt,
                    None => f64::INFINITY,
                };
            }
        }
    }
    for x in points.iter_mut() {
        *x = x.streamed(t - now);
    }
    Ok(collisions)
}

/// Flow `points` over the signed time `t` in place.
///
/// Negative times use time reversal: reverse momenta, flow forward by `|t|`,
/// reverse again.
pub fn flow_points(params: &FlowParams, points: &mut [PhasePoint], t: f64) -> Result<usize> {
    if !points_allowed(params.sigma, points) {
        return Err(Error::domain("flow of a forbidden configuration"));
    }
    if t >= 0.0 {
        return flow_forward(params, points, t);
    }
    let reverse = |pts: &mut [PhasePoint]| {
        for x in pts.iter_mut() {
            x.p = scale(&x.p, -1.0);
        }
    };
    reverse(points);
    let res = flow_forward(params, points, -t);
    reverse(points);
    res
}

/// The phase flow `X(t)` of the whole state.
pub fn flow(state: &SystemState, t: f64) -> Result<SystemState> {
    flow_with(&FlowParams::new(state.sigma), state, t)
}

pub fn flow_with(params: &FlowParams, state: &SystemState, t: f64) -> Result<SystemState> {
    let mut points = state.points.clone();
    flow_points(params, &mut points, t)?;
    Ok(SystemState::new(state.sigma, points))
}

/// `(S_n(−t) D⁰_n)(x)`: pullback of an initial density along the backward trajectory;
/// zero on forbidden configurations.
pub fn evolved_density<F>(d0: F, t: f64, x: &SystemState) -> Result<f64>
where
    F: Fn(&[PhasePoint]) -> Result<f64>,
{
    if !is_allowed(x) {
        return Ok(0.0);
    }
    let back = flow(x, -t)?;
    d0(&back.points)
}

/// `(Ŝ_n(t) f)(x)` with `Ŝ_n(t) = S_n(−t) 𝒳 ∏ S_1(t)`.
pub fn scattering_apply<F>(t: f64, f: F, x: &SystemState) -> Result<f64>
where
    F: Fn(&[PhasePoint]) -> Result<f64>,
{
    if !is_allowed(x) {
        return Ok(0.0);
    }
    let back = flow(x, -t)?;
    let forward: Vec<PhasePoint> = back.points.iter().map(|y| y.streamed(t)).collect();
    f(&forward)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pp(q: Vec3, p: Vec3) -> PhasePoint {
        PhasePoint::new(q, p)
    }

    #[test]
    fn allowed_predicate() {
        let s = |d: f64| SystemState::new(1.0, vec![pp([0.0; 3], [0.0; 3]), pp([d, 0.0, 0.0], [0.0; 3])]);
        assert!(is_allowed(&s(2.0)));
        assert!(!is_allowed(&s(0.5)));
        assert!(is_allowed(&s(1.0)));
    }

    #[test]
    fn head_on_exchange() {
        let (a, b) = collide(&[1.0, 0.0, 0.0], &[-1.0, 0.0, 0.0], &[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(a, [-1.0, 0.0, 0.0]);
        assert_eq!(b, [1.0, 0.0, 0.0]);
    }

    #[test]
    fn grazing_collision_is_identity() {
        let pi = [0.3, 1.0, 0.0];
        let pj = [0.3, -1.0, 0.0];
        let (a, b) = collide(&pi, &pj, &[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(a, pi);
        assert_eq!(b, pj);
    }

    #[test]
    fn non_unit_eta_rejected() {
        assert!(matches!(
            collide(&[1.0; 3], &[0.0; 3], &[2.0, 0.0, 0.0]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn two_body_contact_time() {
        let s = SystemState::new(
            1.0,
            vec![pp([0.0; 3], [1.0, 0.0, 0.0]), pp([3.0, 0.0, 0.0], [-1.0, 0.0, 0.0])],
        );
        let ev = next_event(&s, 10.0).unwrap().unwrap();
        assert!((ev.time - 1.0).abs() < 1e-12);
        assert_eq!(ev.pair, (0, 1));
        assert!((ev.eta[0] - 1.0).abs() < 1e-12);
        // approach condition in the shared orientation
        assert!(dot(&ev.eta, &sub(&s.points[0].p, &s.points[1].p)) > 0.0);
    }

    #[test]
    fn receding_pair_has_no_event() {
        let s = SystemState::new(
            1.0,
            vec![pp([0.0; 3], [-1.0, 0.0, 0.0]), pp([3.0, 0.0, 0.0], [1.0, 0.0, 0.0])],
        );
        assert_eq!(next_event(&s, 100.0).unwrap(), None);
    }

    #[test]
    fn symmetric_double_contact_is_pathological() {
        let s = SystemState::new(
            1.0,
            vec![
                pp([-3.0, 0.0, 0.0], [1.0, 0.0, 0.0]),
                pp([0.0; 3], [0.0; 3]),
                pp([3.0, 0.0, 0.0], [-1.0, 0.0, 0.0]),
            ],
        );
        assert!(next_event(&s, 10.0).unwrap_err().is_pathology());
        assert!(flow(&s, 5.0).unwrap_err().is_pathology());
    }

    #[test]
    fn single_sphere_streams_freely() {
        let s = SystemState::new(1.0, vec![pp([1.0, 2.0, 3.0], [0.5, -1.0, 2.0])]);
        let f = flow(&s, 2.0).unwrap();
        assert_eq!(f.points[0].q, [2.0, 0.0, 7.0]);
    }

    #[test]
    fn head_on_pair_flowed_past_contact() {
        let s = SystemState::new(
            1.0,
            vec![pp([0.0; 3], [1.0, 0.0, 0.0]), pp([3.0, 0.0, 0.0], [-1.0, 0.0, 0.0])],
        );
        let f = flow(&s, 2.0).unwrap();
        // contact at t=1 at q=(1,0,0),(2,0,0); momenta exchanged; one more unit back out
        assert!((f.points[0].q[0] - 0.0).abs() < 1e-12);
        assert!((f.points[1].q[0] - 3.0).abs() < 1e-12);
        assert_eq!(f.points[0].p, [-1.0, 0.0, 0.0]);
        assert_eq!(f.points[1].p, [1.0, 0.0, 0.0]);
    }

    #[test]
    fn forbidden_density_vanishes() {
        let x = SystemState::new(1.0, vec![pp([0.0; 3], [0.0; 3]), pp([0.2, 0.0, 0.0], [0.0; 3])]);
        assert_eq!(evolved_density(|_| Ok(1.0), 0.7, &x).unwrap(), 0.0);
    }

    #[test]
    fn density_at_zero_time_and_free_streaming() {
        let d0 = |x: &[PhasePoint]| Ok((-norm2(&x[0].q)).exp() * (-norm2(&x[0].p)).exp());
        let x = SystemState::new(1.0, vec![pp([0.3, 0.1, -0.2], [0.4, 0.5, -0.1])]);
        assert_eq!(evolved_density(d0, 0.0, &x).unwrap(), d0(&x.points).unwrap());
        let t = 1.3;
        let expect = d0(&[x.points[0].streamed(-t)]).unwrap();
        assert!((evolved_density(d0, t, &x).unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn scattering_identity_cases() {
        let f = |x: &[PhasePoint]| Ok(x.iter().map(|y| y.q[0] + 2.0 * y.p[1]).sum::<f64>());
        let one = SystemState::new(1.0, vec![pp([0.3, 0.0, 1.0], [1.0, 2.0, 0.0])]);
        assert!((scattering_apply(1.7, f, &one).unwrap() - f(&one.points).unwrap()).abs() < 1e-14);
        let apart = SystemState::new(
            1.0,
            vec![pp([0.0; 3], [1.0, 0.0, 0.0]), pp([0.0, 5.0, 0.0], [1.0, 0.0, 0.0])],
        );
        assert!((scattering_apply(2.0, f, &apart).unwrap() - f(&apart.points).unwrap()).abs() < 1e-13);
    }

    #[test]
    fn scattering_of_head_on_pair() {
        // After a collision at backward time 0.5 the pre-image carries exchanged momenta.
        let x = SystemState::new(
            1.0,
            vec![pp([0.0; 3], [-1.0, 0.0, 0.0]), pp([2.0, 0.0, 0.0], [1.0, 0.0, 0.0])],
        );
        let t = 1.0;
        let f = |y: &[PhasePoint]| Ok(y[0].q[0] * 10.0 + y[0].p[0] + 100.0 * y[1].p[0]);
        // backward: pair separates at contact distance after 0.5, they approached with
        // momenta (+1, −1); back-flow ends at q = (−0.5+... ) computed by hand:
        // at −0.5 positions (0.5, 1.5) in contact; at −1, with pre-collision momenta (1,−1):
        // q1 = 0.5 − 0.5 = 0, q2 = 1.5 + 0.5 = 2. Forward free flow by 1: q1 = 1, q2 = 1.
        let expect = f(&[pp([1.0, 0.0, 0.0], [1.0, 0.0, 0.0]), pp([1.0, 0.0, 0.0], [-1.0, 0.0, 0.0])]).unwrap();
        assert!((scattering_apply(t, f, &x).unwrap() - expect).abs() < 1e-12);
    }
}
