//! Cumulants of the groups of flow operators and the expansions of correlation
//! functions built from them.
//!
//! The backward group of a block of spheres acts on a function by evaluating it
//! at the block's backward trajectory, and gives zero when the block itself sits
//! on a forbidden configuration. A product of groups over disjoint blocks
//! therefore evaluates its argument at a composite point assembled from
//! independently flowed blocks. All backward flows needed for one evaluation are
//! computed once and cached by block bitmask.

use std::sync::Arc;

use crate::dynamics::{flow_points, points_allowed, FlowParams, PhasePoint};
use crate::error::{Error, Result};
use crate::partitions::{
    cumulant_coefficient, gather, mask_indices, partition_masks, FunctionSequence, MAX_ELEMENTS,
};
use crate::stats::mix64;

/// One-point function `x ↦ f(x)`.
pub type OnePointFn = dyn Fn(&PhasePoint) -> f64 + Send + Sync;

/// Ordered elements, each a single point index or a fused block `{X̂}` of indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterLabeling {
    elements: Vec<Vec<usize>>,
}

impl ClusterLabeling {
    pub fn new(elements: Vec<Vec<usize>>) -> Result<Self> {
        if elements.iter().any(|e| e.is_empty()) {
            return Err(Error::domain("cluster elements must be nonempty"));
        }
        let mut flat: Vec<usize> = elements.iter().flatten().copied().collect();
        flat.sort_unstable();
        if flat.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::domain("cluster labels must be distinct"));
        }
        Ok(ClusterLabeling { elements })
    }

    /// `(1, 2, …, n)` as plain labels `0..n`.
    pub fn singletons(n: usize) -> Self {
        ClusterLabeling {
            elements: (0..n).map(|i| vec![i]).collect(),
        }
    }

    /// `({0..s}, s, …, s+n−1)`.
    pub fn with_cluster(s: usize, n: usize) -> Self {
        let mut elements = vec![(0..s).collect::<Vec<_>>()];
        elements.extend((s..s + n).map(|i| vec![i]));
        ClusterLabeling { elements }
    }

    pub fn elements(&self) -> &[Vec<usize>] {
        &self.elements
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    /// Flattened labels in canonical (sorted) order.
    pub fn declusterize(&self) -> Vec<usize> {
        let mut flat: Vec<usize> = self.elements.iter().flatten().copied().collect();
        flat.sort_unstable();
        flat
    }

    fn point_masks(&self) -> Vec<u32> {
        self.elements
            .iter()
            .map(|e| e.iter().fold(0u32, |m, &i| m | (1 << i)))
            .collect()
    }
}

/// Backward flows of every block of one configuration, computed on demand.
struct Backflow<'a> {
    flow: &'a FlowParams,
    t: f64,
    x: &'a [PhasePoint],
    cache: Vec<Option<Option<Vec<PhasePoint>>>>,
}

impl<'a> Backflow<'a> {
    fn new(flow: &'a FlowParams, t: f64, x: &'a [PhasePoint]) -> Self {
        Backflow {
            flow,
            t,
            x,
            cache: vec![None; 1 << x.len()],
        }
    }

    fn ensure(&mut self, mask: u32) -> Result<()> {
        if self.cache[mask as usize].is_some() {
            return Ok(());
        }
        let mut pts = Vec::new();
        gather(self.x, mask, &mut pts);
        let entry = if points_allowed(self.flow.sigma, &pts) {
            if self.t != 0.0 {
                flow_points(self.flow, &mut pts, -self.t)?;
            }
            Some(pts)
        } else {
            None
        };
        self.cache[mask as usize] = Some(entry);
        Ok(())
    }

    /// Composite point of the blocks `masks`, or `None` when a block is forbidden.
    fn composite(&mut self, masks: &[u32], out: &mut Vec<PhasePoint>) -> Result<bool> {
        for &m in masks {
            self.ensure(m)?;
        }
        out.clear();
        out.extend_from_slice(self.x);
        for &m in masks {
            match self.cache[m as usize].as_ref().and_then(|e| e.as_ref()) {
                Some(pts) => {
                    for (k, i) in mask_indices(m).enumerate() {
                        out[i] = pts[k];
                    }
                }
                None => return Ok(false),
            }
        }
        Ok(true)
    }
}

fn check_points(x: &[PhasePoint]) -> Result<()> {
    if x.is_empty() {
        return Err(Error::domain("at least one phase point is required"));
    }
    if x.len() > MAX_ELEMENTS {
        return Err(Error::Capacity {
            what: "exact-flow sphere count",
            value: x.len(),
            limit: MAX_ELEMENTS,
        });
    }
    Ok(())
}

fn union_of(blocks: &[u32], pick: u32) -> u32 {
    mask_indices(pick).fold(0, |m, i| m | blocks[i])
}

fn default_coefficient(k: usize) -> f64 {
    cumulant_coefficient(k) as f64
}

/// Evaluator of cumulant expansions at a fixed sphere diameter.
#[derive(Debug, Clone, Copy)]
pub struct Engine {
    flow: FlowParams,
    coefficient: fn(usize) -> f64,
}

impl Engine {
    pub fn new(sigma: f64) -> Self {
        Engine {
            flow: FlowParams::new(sigma),
            coefficient: default_coefficient,
        }
    }

    /// Replace the partition-lattice coefficient `(−1)^{k−1}(k−1)!`.
    ///
    /// Only useful for fault injection: verification suites must notice.
    pub fn with_coefficient(mut self, coefficient: fn(usize) -> f64) -> Self {
        self.coefficient = coefficient;
        self
    }

    pub fn with_max_collisions(mut self, limit: usize) -> Self {
        self.flow.max_collisions = limit;
        self
    }

    pub fn sigma(&self) -> f64 {
        self.flow.sigma
    }

    pub fn flow_params(&self) -> &FlowParams {
        &self.flow
    }

    pub fn coefficient(&self, block_count: usize) -> f64 {
        (self.coefficient)(block_count)
    }

    /// Runs `eval` at `x`; on a pathological trajectory retries once with the
    /// positions displaced by `1e−9 σ`.
    fn with_retry<T>(&self, x: &[PhasePoint], eval: impl Fn(&[PhasePoint]) -> Result<T>) -> Result<T> {
        match eval(x) {
            Err(e) if e.is_pathology() => {
                let h = 1e-9 * self.flow.sigma;
                let jittered: Vec<PhasePoint> = x
                    .iter()
                    .enumerate()
                    .map(|(i, y)| {
                        let mut y = *y;
                        for (k, c) in y.q.iter_mut().enumerate() {
                            let u = mix64((i * 3 + k) as u64) as f64 / u64::MAX as f64;
                            *c += h * (2.0 * u - 1.0);
                        }
                        y
                    })
                    .collect();
                eval(&jittered)
            }
            other => other,
        }
    }

    /// `∏_B S_{|B|}(−t, B) f` at `x` for disjoint blocks of point indices.
    pub fn pullback<F>(&self, t: f64, blocks: &[Vec<usize>], f: F, x: &[PhasePoint]) -> Result<f64>
    where
        F: Fn(&[PhasePoint]) -> Result<f64>,
    {
        check_points(x)?;
        let masks = ClusterLabeling::new(blocks.to_vec())?.point_masks();
        self.with_retry(x, |x| {
            let mut bf = Backflow::new(&self.flow, t, x);
            let mut y = Vec::new();
            if bf.composite(&masks, &mut y)? {
                f(&y)
            } else {
                Ok(0.0)
            }
        })
    }

    /// `𝔄_{|P|}(t, {X̂₁}, …) f` at `x`: signed sum over partitions of the
    /// cluster elements of products of backward groups of the merged blocks.
    pub fn cumulant_apply<F>(&self, t: f64, clusters: &ClusterLabeling, f: F, x: &[PhasePoint]) -> Result<f64>
    where
        F: Fn(&[PhasePoint]) -> Result<f64>,
    {
        check_points(x)?;
        if clusters.declusterize().last().is_some_and(|&m| m >= x.len()) {
            return Err(Error::domain("cluster label out of range"));
        }
        let elems = clusters.point_masks();
        let parts = partition_masks(elems.len())?;
        self.with_retry(x, |x| {
            let mut bf = Backflow::new(&self.flow, t, x);
            let mut y = Vec::new();
            let mut sum = 0.0;
            for p in parts.iter() {
                let q: Vec<u32> = p.iter().map(|&b| union_of(&elems, b)).collect();
                if bf.composite(&q, &mut y)? {
                    sum += self.coefficient(p.len()) * f(&y)?;
                }
            }
            Ok(sum)
        })
    }

    /// `g_s(t, x)` for general initial correlations `g0`, with `s = x.len()`.
    pub fn evolve_correlations(&self, t: f64, g0: &FunctionSequence, x: &[PhasePoint]) -> Result<f64> {
        check_points(x)?;
        let m = x.len();
        let parts = partition_masks(m)?;
        self.with_retry(x, |x| {
            let mut bf = Backflow::new(&self.flow, t, x);
            let mut y = Vec::with_capacity(m);
            let mut buf = Vec::with_capacity(m);
            let mut sum = 0.0;
            for p in parts.iter() {
                for pp in partition_masks(p.len())?.iter() {
                    let q: Vec<u32> = pp.iter().map(|&b| union_of(p, b)).collect();
                    if !bf.composite(&q, &mut y)? {
                        continue;
                    }
                    let mut prod = self.coefficient(pp.len());
                    for &b in p {
                        gather(&y, b, &mut buf);
                        prod *= g0.eval(&buf)?;
                        if prod == 0.0 {
                            break;
                        }
                    }
                    sum += prod;
                }
            }
            Ok(sum)
        })
    }

    /// `g_{1+n}(t, {x₀…x_{s−1}}, x_s…)` for general initial correlations `g0`.
    pub fn evolve_cluster_correlations(
        &self,
        t: f64,
        g0: &FunctionSequence,
        s: usize,
        x: &[PhasePoint],
    ) -> Result<f64> {
        check_points(x)?;
        if s == 0 || s > x.len() {
            return Err(Error::domain("cluster size must be between 1 and the point count"));
        }
        let elems = ClusterLabeling::with_cluster(s, x.len() - s).point_masks();
        let cluster_mask = elems[0];
        let parts = partition_masks(elems.len())?;
        self.with_retry(x, |x| {
            let mut bf = Backflow::new(&self.flow, t, x);
            let mut y = Vec::new();
            let (mut ys, mut zs) = (Vec::new(), Vec::new());
            let mut sum = 0.0;
            for p in parts.iter() {
                let blocks: Vec<u32> = p.iter().map(|&b| union_of(&elems, b)).collect();
                for pp in partition_masks(p.len())?.iter() {
                    let q: Vec<u32> = pp.iter().map(|&b| union_of(&blocks, b)).collect();
                    if !bf.composite(&q, &mut y)? {
                        continue;
                    }
                    let mut prod = self.coefficient(pp.len());
                    for &b in &blocks {
                        if b & cluster_mask != 0 {
                            gather(&y, cluster_mask, &mut ys);
                            gather(&y, b & !cluster_mask, &mut zs);
                            prod *= cluster_initial_value(g0, &ys, &zs)?;
                        } else {
                            gather(&y, b, &mut zs);
                            prod *= g0.eval(&zs)?;
                        }
                        if prod == 0.0 {
                            break;
                        }
                    }
                    sum += prod;
                }
            }
            Ok(sum)
        })
    }

    /// `𝔄_s(t, 1, …, s) ∏ g₁⁰` at `x`: correlations created from chaotic initial data.
    ///
    /// On allowed configurations this is the chaos-case expansion; off them it
    /// is the Ursell continuation of the same correlation function.
    pub fn chaos_correlations(&self, t: f64, g1: &OnePointFn, x: &[PhasePoint]) -> Result<f64> {
        let clusters = ClusterLabeling::singletons(x.len());
        self.cumulant_apply(t, &clusters, |y| Ok(y.iter().map(g1).product()), x)
    }

    /// `𝔄_{1+n}(t, {1…s}, s+1, …) ∏ g₁⁰` at `x`.
    pub fn chaos_cluster_correlations(&self, t: f64, g1: &OnePointFn, s: usize, x: &[PhasePoint]) -> Result<f64> {
        if s == 0 || s > x.len() {
            return Err(Error::domain("cluster size must be between 1 and the point count"));
        }
        let clusters = ClusterLabeling::with_cluster(s, x.len() - s);
        self.cumulant_apply(t, &clusters, |y| Ok(y.iter().map(g1).product()), x)
    }

    /// Sequence of evolved densities `D(t) = S(−t) D(0)`.
    pub fn evolved_density_sequence(&self, t: f64, d0: &FunctionSequence) -> FunctionSequence {
        let (engine, d0) = (*self, d0.clone());
        FunctionSequence::new(d0.cap(), move |x| {
            if x.is_empty() {
                return d0.eval(x);
            }
            engine.pullback(t, &[(0..x.len()).collect()], |y| d0.eval(y), x)
        })
    }

    /// The nonlinear group `𝒢(t | g0)` as a sequence: component `s` is `g_s(t)`.
    pub fn correlation_sequence(&self, t: f64, g0: &FunctionSequence) -> FunctionSequence {
        let (engine, g0) = (*self, g0.clone());
        FunctionSequence::new(g0.cap(), move |x| {
            if x.is_empty() {
                return Ok(0.0);
            }
            engine.evolve_correlations(t, &g0, x)
        })
    }

    /// `|𝒢(t₁+t₂ | g0) − 𝒢(t₁ | 𝒢(t₂ | g0))|` at `x`.
    pub fn nonlinear_group_compose_check(
        &self,
        t1: f64,
        t2: f64,
        g0: &FunctionSequence,
        x: &[PhasePoint],
    ) -> Result<f64> {
        let direct = self.evolve_correlations(t1 + t2, g0, x)?;
        let inner = self.correlation_sequence(t2, g0);
        let composed = self.evolve_correlations(t1, &inner, x)?;
        Ok((direct - composed).abs())
    }

    /// Deviation of `g_s(t)` from the steady sequence `(0, e^{−βp²/2}, 0, …)`.
    pub fn equilibrium_residual(&self, beta: f64, x: &[PhasePoint], t: f64) -> Result<f64> {
        let g0 = equilibrium_sequence(beta, x.len().max(1));
        let g = self.evolve_correlations(t, &g0, x)?;
        let expect = if x.len() == 1 { g0.eval(x)? } else { 0.0 };
        Ok((g - expect).abs())
    }
}

/// `(0, e^{−βp²/2}, 0, …)`
pub fn equilibrium_sequence(beta: f64, cap: usize) -> FunctionSequence {
    FunctionSequence::one_particle(cap, move |x| {
        let p2 = x.p.iter().map(|c| c * c).sum::<f64>();
        (-0.5 * beta * p2).exp()
    })
}

/// Initial correlation of a cluster, `g⁰_{1+k}({Y}, Z)`: sum over partitions of
/// `Y ∪ Z` in which every block meets `Y` of the product of `g0` over blocks.
pub fn cluster_initial_value(g0: &FunctionSequence, y: &[PhasePoint], z: &[PhasePoint]) -> Result<f64> {
    let mut all = y.to_vec();
    all.extend_from_slice(z);
    if z.is_empty() && y.len() == 1 {
        return g0.eval(&all);
    }
    let ymask = (1u32 << y.len()) - 1;
    let mut buf = Vec::with_capacity(all.len());
    let mut sum = 0.0;
    for p in partition_masks(all.len())?.iter() {
        if p.iter().any(|&b| b & ymask == 0) {
            continue;
        }
        let mut prod = 1.0;
        for &b in p {
            gather(&all, b, &mut buf);
            prod *= g0.eval(&buf)?;
            if prod == 0.0 {
                break;
            }
        }
        sum += prod;
    }
    Ok(sum)
}

/// Correlations of chaotic initial data on the whole phase space:
/// `ln⋆ (1, g₁, g₁g₁𝒳, g₁g₁g₁𝒳, …)`, i.e. `∏ g₁` times the Ursell function of
/// the hard-core indicator. On allowed configurations only the first component survives.
pub fn chaos_initial_sequence(g1: Arc<OnePointFn>, sigma: f64, cap: usize) -> FunctionSequence {
    let densities = {
        let g1 = g1.clone();
        FunctionSequence::new(cap, move |x| {
            if x.is_empty() {
                return Ok(1.0);
            }
            if !points_allowed(sigma, x) {
                return Ok(0.0);
            }
            Ok(x.iter().map(|y| g1(y)).product())
        })
    };
    let ursell = crate::partitions::ln_star(&densities).expect("zeroth density component is 1");
    FunctionSequence::new(cap, move |x| match x.len() {
        0 => Ok(0.0),
        1 => Ok(g1(&x[0])),
        _ if points_allowed(sigma, x) => Ok(0.0),
        _ => ursell.eval(x),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partitions::{exp_star, ln_star};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn g1(x: &PhasePoint) -> f64 {
        let q2: f64 = x.q.iter().map(|c| c * c).sum();
        let p2: f64 = x.p.iter().map(|c| c * c).sum();
        (1.0 + 0.3 * x.p[0]).abs() * (-0.1 * q2 - 0.5 * p2).exp()
    }

    fn random_allowed(rng: &mut ChaCha8Rng, n: usize, sigma: f64, box_half: f64) -> Vec<PhasePoint> {
        loop {
            let pts: Vec<PhasePoint> = (0..n)
                .map(|_| {
                    let q = [0; 3].map(|_: i32| rng.random_range(-box_half..box_half));
                    let p = [0; 3].map(|_: i32| rng.random_range(-1.5..1.5));
                    PhasePoint::new(q, p)
                })
                .collect();
            if points_allowed(sigma, &pts) {
                return pts;
            }
        }
    }

    fn general_g0(cap: usize) -> FunctionSequence {
        FunctionSequence::new(cap, |x| {
            Ok(match x.len() {
                0 => 0.0,
                1 => g1(&x[0]),
                2 => 0.2 * g1(&x[0]) * g1(&x[1]) * (x[0].p[2] - x[1].p[2]).tanh(),
                3 => 0.05 * x.iter().map(g1).product::<f64>(),
                _ => 0.0,
            })
        })
    }

    #[test]
    fn labeling_declusterizes() {
        let c = ClusterLabeling::new(vec![vec![3, 1], vec![0], vec![2]]).unwrap();
        assert_eq!(c.declusterize(), vec![0, 1, 2, 3]);
        assert!(ClusterLabeling::new(vec![vec![1], vec![1]]).is_err());
        assert!(ClusterLabeling::new(vec![vec![]]).is_err());
    }

    #[test]
    fn first_order_cumulant_is_free_streaming() {
        let e = Engine::new(1.0);
        let x = [PhasePoint::new([0.5, -0.2, 1.0], [0.3, 0.7, -0.4])];
        let t = 1.7;
        let got = e.chaos_correlations(t, &g1, &x).unwrap();
        assert!((got - g1(&x[0].streamed(-t))).abs() < 1e-15);
    }

    #[test]
    fn second_order_cumulant_vanishes_without_interaction() {
        let e = Engine::new(1.0);
        let x = [
            PhasePoint::new([0.0, 0.0, 0.0], [1.0, 0.0, 0.0]),
            PhasePoint::new([0.0, 5.0, 0.0], [-1.0, 0.0, 0.0]),
        ];
        assert_eq!(e.chaos_correlations(2.0, &g1, &x).unwrap(), 0.0);
    }

    #[test]
    fn second_order_cumulant_of_head_on_pair() {
        let e = Engine::new(1.0);
        // Backwards in time the pair meets at t = 1 and is back at its start at
        // t = 2 with exchanged momenta.
        let x = [
            PhasePoint::new([-1.5, 0.0, 0.0], [-1.0, 0.0, 0.0]),
            PhasePoint::new([1.5, 0.0, 0.0], [1.0, 0.0, 0.0]),
        ];
        let t = 2.0;
        let got = e.chaos_correlations(t, &g1, &x).unwrap();
        let back = [
            PhasePoint::new([-1.5, 0.0, 0.0], [1.0, 0.0, 0.0]),
            PhasePoint::new([1.5, 0.0, 0.0], [-1.0, 0.0, 0.0]),
        ];
        let free = g1(&x[0].streamed(-t)) * g1(&x[1].streamed(-t));
        let expect = g1(&back[0]) * g1(&back[1]) - free;
        assert!((got - expect).abs() < 1e-14, "{got} vs {expect}");
        assert!(got.abs() > 1e-3);
    }

    #[test]
    fn third_order_cumulant_identity() {
        let e = Engine::new(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = |y: &[PhasePoint]| Ok(y.iter().map(g1).product::<f64>() * (1.0 + y[0].p[1] * y[2].q[0]));
        for _ in 0..20 {
            let x = random_allowed(&mut rng, 3, 1.0, 1.5);
            let t = rng.random_range(0.2..2.0);
            let lhs = e.cumulant_apply(t, &ClusterLabeling::singletons(3), f, &x).unwrap();
            let a12_3 = e
                .cumulant_apply(t, &ClusterLabeling::new(vec![vec![0, 1], vec![2]]).unwrap(), f, &x)
                .unwrap();
            let s = |b: &[Vec<usize>]| e.pullback(t, b, f, &x).unwrap();
            let a23_a1 = s(&[vec![0], vec![1, 2]]) - s(&[vec![0], vec![1], vec![2]]);
            let a13_a2 = s(&[vec![1], vec![0, 2]]) - s(&[vec![0], vec![1], vec![2]]);
            let rhs = a12_3 - a23_a1 - a13_a2;
            assert!((lhs - rhs).abs() < 1e-12, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn commuting_square_low_orders() {
        let e = Engine::new(1.0);
        let g0 = general_g0(3);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let t = rng.random_range(0.0..2.5);
            let d0 = exp_star(&g0).unwrap();
            let via_densities = ln_star(&e.evolved_density_sequence(t, &d0)).unwrap();
            for s in 1..=3 {
                let x = random_allowed(&mut rng, s, 1.0, 1.5);
                let direct = e.evolve_correlations(t, &g0, &x).unwrap();
                let other = via_densities.eval(&x).unwrap();
                assert!((direct - other).abs() < 1e-10, "s={s}: {direct} vs {other}");
            }
        }
    }

    #[test]
    fn chaos_path_matches_general_path() {
        let e = Engine::new(1.0);
        let plain = FunctionSequence::one_particle(4, g1);
        let ursell = chaos_initial_sequence(Arc::new(g1), 1.0, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let t = rng.random_range(0.0..2.0);
            for s in 1..=3 {
                let x = random_allowed(&mut rng, s, 1.0, 1.2);
                let c = e.chaos_correlations(t, &g1, &x).unwrap();
                let a = e.evolve_correlations(t, &plain, &x).unwrap();
                let b = e.evolve_correlations(t, &ursell, &x).unwrap();
                assert!((c - a).abs() < 1e-13 && (c - b).abs() < 1e-13, "{c} {a} {b}");
            }
        }
    }

    #[test]
    fn ursell_values_off_the_allowed_set() {
        let e = Engine::new(1.0);
        let plain = FunctionSequence::one_particle(3, g1);
        let x = [
            PhasePoint::new([0.0, 0.0, 0.0], [0.2, 0.0, 0.0]),
            PhasePoint::new([0.5, 0.0, 0.0], [0.0, 0.1, 0.0]),
        ];
        let g2 = e.evolve_correlations(0.0, &plain, &x).unwrap();
        assert!((g2 + g1(&x[0]) * g1(&x[1])).abs() < 1e-15);
        let ursell = chaos_initial_sequence(Arc::new(g1), 1.0, 3);
        assert!((ursell.eval(&x).unwrap() - g2).abs() < 1e-15);
    }

    #[test]
    fn singleton_cluster_is_plain() {
        let e = Engine::new(1.0);
        let g0 = general_g0(4);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let x = random_allowed(&mut rng, 3, 1.0, 1.5);
            let t = rng.random_range(0.0..2.0);
            let a = e.evolve_cluster_correlations(t, &g0, 1, &x).unwrap();
            let b = e.evolve_correlations(t, &g0, &x).unwrap();
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn cluster_of_pair_without_companions() {
        let e = Engine::new(1.0);
        let g0 = general_g0(4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let x = random_allowed(&mut rng, 3, 1.0, 1.5);
            let t = rng.random_range(0.0..2.0);
            let cluster = e.evolve_cluster_correlations(t, &g0, 3, &x).unwrap();
            let g = e.correlation_sequence(t, &g0);
            let sum = crate::partitions::exp_star(&g).unwrap().eval(&x).unwrap();
            assert!((cluster - sum).abs() < 1e-12, "{cluster} vs {sum}");
        }
    }

    #[test]
    fn chaos_cluster_path_matches_general_path() {
        let e = Engine::new(1.0);
        let plain = FunctionSequence::one_particle(4, g1);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..10 {
            let x = random_allowed(&mut rng, 4, 1.0, 1.3);
            let t = rng.random_range(0.0..2.0);
            let a = e.chaos_cluster_correlations(t, &g1, 2, &x).unwrap();
            let b = e.evolve_cluster_correlations(t, &plain, 2, &x).unwrap();
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn cluster_initial_value_matches_cluster_logarithm() {
        // ln⋆ over the cluster-marked set of exp⋆ g0 at t = 0
        let g0 = general_g0(4);
        let d = exp_star(&g0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random_allowed(&mut rng, 4, 0.0, 1.5);
        let (y, z) = x.split_at(2);
        let ground = crate::partitions::LabelSet::with_cluster(vec![0, 1], vec![2, 3]).unwrap();
        let mut literal = 0.0;
        for p in crate::partitions::enumerate_partitions(&ground).unwrap() {
            let mut prod = cumulant_coefficient(p.len()) as f64;
            for b in p.label_blocks(&ground) {
                let pts: Vec<PhasePoint> = b.iter().map(|&i| x[i]).collect();
                prod *= d.eval(&pts).unwrap();
            }
            literal += prod;
        }
        let got = cluster_initial_value(&g0, y, z).unwrap();
        assert!((got - literal).abs() < 1e-13, "{got} vs {literal}");
    }

    #[test]
    fn group_composition() {
        let e = Engine::new(1.0);
        let g0 = general_g0(3);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..10 {
            let x = random_allowed(&mut rng, 2, 1.0, 1.5);
            let (t1, t2) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            assert!(e.nonlinear_group_compose_check(t1, t2, &g0, &x).unwrap() < 1e-9);
            assert!(e.nonlinear_group_compose_check(t1, 0.0, &g0, &x).unwrap() < 1e-12);
            assert!(e.nonlinear_group_compose_check(-t2, t2, &g0, &x).unwrap() < 1e-9);
        }
    }

    #[test]
    fn equilibrium_is_steady() {
        let e = Engine::new(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for s in 1..=3 {
            let x = random_allowed(&mut rng, s, 1.0, 1.0);
            assert!(e.equilibrium_residual(0.7, &x, 1.9).unwrap() < 1e-14);
        }
    }

    #[test]
    fn tampered_coefficient_breaks_commuting_square() {
        fn bad(k: usize) -> f64 {
            cumulant_coefficient(k) as f64 * if k == 2 { 1.01 } else { 1.0 }
        }
        let e = Engine::new(1.0).with_coefficient(bad);
        let g0 = general_g0(3);
        let x = [
            PhasePoint::new([-1.5, 0.0, 0.0], [-1.0, 0.0, 0.0]),
            PhasePoint::new([1.5, 0.2, 0.0], [1.0, 0.0, 0.0]),
        ];
        let d = exp_star(&g0).unwrap();
        let reference = ln_star(&Engine::new(1.0).evolved_density_sequence(1.0, &d)).unwrap();
        let r = (e.evolve_correlations(1.0, &g0, &x).unwrap() - reference.eval(&x).unwrap()).abs();
        assert!(r > 1e-6);
    }
}
