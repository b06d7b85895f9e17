//! Set partitions, bipartitions and dissections of small labelled sets, and the
//! ⋆-product algebra on sequences of functions of phase points.
//!
//! Partitions are generated from restricted-growth strings, so blocks come out
//! ordered by their least element and the whole list in a canonical order.
//! Internally blocks are bitmasks over element indices; element counts are
//! capped at [`MAX_ELEMENTS`].

use std::sync::{Arc, OnceLock};

use crate::dynamics::PhasePoint;
use crate::error::{Error, Result};

/// Largest ground set accepted by the enumerators.
pub const MAX_ELEMENTS: usize = 12;
/// Partitions of up to this many elements are cached for the evaluators.
const CACHED_ELEMENTS: usize = 9;

/// Block-mask form of the partitions of `m` elements.
pub type MaskPartition = Vec<u32>;

/// Ordered distinct labels, optionally with a prefix fused into one cluster element `{Y}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSet {
    labels: Vec<usize>,
    fused: usize,
}

impl LabelSet {
    pub fn plain(labels: Vec<usize>) -> Result<Self> {
        Self::with_cluster(Vec::new(), labels)
    }

    /// `({cluster}, rest…)`; an empty cluster gives a plain set.
    pub fn with_cluster(cluster: Vec<usize>, rest: Vec<usize>) -> Result<Self> {
        let fused = cluster.len();
        let mut labels = cluster;
        labels.extend(rest);
        let mut sorted = labels.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::domain("labels must be distinct"));
        }
        Ok(LabelSet { labels, fused })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn fused_len(&self) -> usize {
        self.fused
    }

    /// Number of elements seen by the enumerators (a fused block counts once).
    pub fn element_count(&self) -> usize {
        if self.fused > 0 {
            1 + self.labels.len() - self.fused
        } else {
            self.labels.len()
        }
    }

    /// Labels of element `i`.
    pub fn element(&self, i: usize) -> &[usize] {
        if self.fused > 0 {
            if i == 0 {
                &self.labels[..self.fused]
            } else {
                let k = self.fused + i - 1;
                &self.labels[k..k + 1]
            }
        } else {
            &self.labels[i..i + 1]
        }
    }
}

/// Partition of a [`LabelSet`]; blocks hold element indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SetPartition {
    pub blocks: Vec<Vec<usize>>,
}

impl SetPartition {
    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Declusterised blocks: the labels of each block with fused elements flattened.
    pub fn label_blocks(&self, ground: &LabelSet) -> Vec<Vec<usize>> {
        self.blocks
            .iter()
            .map(|b| b.iter().flat_map(|&e| ground.element(e).iter().copied()).collect())
            .collect()
    }

    fn from_masks(masks: &[u32]) -> Self {
        SetPartition {
            blocks: masks.iter().map(|&m| mask_indices(m).collect()).collect(),
        }
    }
}

/// Ordered split of a linearly ordered ground set into consecutive parts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dissection {
    pub parts: Vec<Vec<usize>>,
}

pub(crate) fn mask_indices(mask: u32) -> impl Iterator<Item = usize> {
    (0..32).filter(move |i| mask & (1 << i) != 0)
}

fn check_size(m: usize) -> Result<()> {
    if m > MAX_ELEMENTS {
        return Err(Error::Capacity {
            what: "partition ground set",
            value: m,
            limit: MAX_ELEMENTS,
        });
    }
    Ok(())
}

/// All partitions of `m` elements via restricted-growth strings.
fn generate_masks(m: usize) -> Vec<MaskPartition> {
    if m == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    let mut rgs = vec![0usize; m];
    let mut maxes = vec![0usize; m];
    loop {
        let nblocks = maxes[m - 1] + 1;
        let mut blocks = vec![0u32; nblocks];
        for (i, &b) in rgs.iter().enumerate() {
            blocks[b] |= 1 << i;
        }
        out.push(blocks);
        // increment the rightmost position that may grow
        let mut i = m - 1;
        loop {
            if i == 0 {
                return out;
            }
            if rgs[i] <= maxes[i - 1] {
                rgs[i] += 1;
                maxes[i] = maxes[i - 1].max(rgs[i]);
                for j in i + 1..m {
                    rgs[j] = 0;
                    maxes[j] = maxes[i];
                }
                break;
            }
            i -= 1;
        }
    }
}

/// Cached block-mask partitions of `m` elements (`m ≤ 9`), generated otherwise.
pub fn partition_masks(m: usize) -> Result<Arc<Vec<MaskPartition>>> {
    check_size(m)?;
    static CACHE: OnceLock<Vec<OnceLock<Arc<Vec<MaskPartition>>>>> = OnceLock::new();
    if m > CACHED_ELEMENTS {
        return Ok(Arc::new(generate_masks(m)));
    }
    let cache = CACHE.get_or_init(|| (0..=CACHED_ELEMENTS).map(|_| OnceLock::new()).collect());
    Ok(cache[m].get_or_init(|| Arc::new(generate_masks(m))).clone())
}

/// Every partition of `ground`, each exactly once, in canonical order.
pub fn enumerate_partitions(ground: &LabelSet) -> Result<Vec<SetPartition>> {
    let m = ground.element_count();
    if m == 0 {
        return Err(Error::domain("empty ground set"));
    }
    Ok(partition_masks(m)?.iter().map(|p| SetPartition::from_masks(p)).collect())
}

/// Unordered two-block partitions as `(block containing element 0, complement)` masks.
pub fn bipartition_masks(m: usize) -> Result<Vec<(u32, u32)>> {
    check_size(m)?;
    if m < 2 {
        return Err(Error::domain("bipartitions need at least two elements"));
    }
    let full = (1u32 << m) - 1;
    Ok((0..full)
        .filter(|s| s & 1 == 1)
        .map(|s| (s, full & !s))
        .collect())
}

pub fn enumerate_bipartitions(ground: &LabelSet) -> Result<Vec<SetPartition>> {
    Ok(bipartition_masks(ground.element_count())?
        .into_iter()
        .map(|(a, b)| SetPartition::from_masks(&[a, b]))
        .collect())
}

/// Dissections of the ordered `ground` into at most `max_parts` consecutive parts.
pub fn enumerate_dissections(ground: &[usize], max_parts: usize) -> Result<Vec<Dissection>> {
    if ground.is_empty() {
        return Ok(vec![Dissection { parts: Vec::new() }]);
    }
    if max_parts == 0 {
        return Err(Error::domain("max_parts must be positive"));
    }
    let n = ground.len();
    check_size(n)?;
    let mut out = Vec::new();
    // each of the n−1 gaps either cuts or not
    for cuts in 0u32..(1 << (n - 1)) {
        if cuts.count_ones() as usize + 1 > max_parts {
            continue;
        }
        let mut parts = Vec::new();
        let mut cur = vec![ground[0]];
        for k in 1..n {
            if cuts & (1 << (k - 1)) != 0 {
                parts.push(std::mem::take(&mut cur));
            }
            cur.push(ground[k]);
        }
        parts.push(cur);
        out.push(Dissection { parts });
    }
    out.sort_by_key(|d| d.parts.len());
    Ok(out)
}

/// `(−1)^{k−1} (k−1)!`
pub fn cumulant_coefficient(block_count: usize) -> i64 {
    assert!(block_count >= 1, "block count must be positive");
    let f: i64 = (1..block_count as i64).product();
    if block_count % 2 == 1 {
        f
    } else {
        -f
    }
}

pub(crate) fn gather(points: &[PhasePoint], mask: u32, buf: &mut Vec<PhasePoint>) {
    buf.clear();
    buf.extend(mask_indices(mask).map(|i| points[i]));
}

pub type PointFn = dyn Fn(&[PhasePoint]) -> Result<f64> + Send + Sync;

/// Family `n ↦ f_n` of functions of `n` phase points, `n ≤ cap`.
///
/// Component `n` is evaluated by passing `n` points; the zeroth component is
/// evaluated on the empty slice.
#[derive(Clone)]
pub struct FunctionSequence {
    cap: usize,
    f: Arc<PointFn>,
}

impl std::fmt::Debug for FunctionSequence {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FunctionSequence").field("cap", &self.cap).finish_non_exhaustive()
    }
}

impl FunctionSequence {
    pub const DEFAULT_CAP: usize = 5;

    pub fn new<F>(cap: usize, f: F) -> Self
    where
        F: Fn(&[PhasePoint]) -> Result<f64> + Send + Sync + 'static,
    {
        FunctionSequence { cap, f: Arc::new(f) }
    }

    /// `(1, 0, 0, …)`
    pub fn unit(cap: usize) -> Self {
        Self::new(cap, |x| Ok(if x.is_empty() { 1.0 } else { 0.0 }))
    }

    pub fn zero(cap: usize) -> Self {
        Self::new(cap, |_| Ok(0.0))
    }

    /// `(0, g, 0, 0, …)`
    pub fn one_particle<G>(cap: usize, g: G) -> Self
    where
        G: Fn(&PhasePoint) -> f64 + Send + Sync + 'static,
    {
        Self::new(cap, move |x| Ok(if x.len() == 1 { g(&x[0]) } else { 0.0 }))
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    pub fn eval(&self, points: &[PhasePoint]) -> Result<f64> {
        if points.len() > self.cap {
            return Err(Error::Capacity {
                what: "sequence component",
                value: points.len(),
                limit: self.cap,
            });
        }
        (self.f)(points)
    }

    pub fn zeroth(&self) -> Result<f64> {
        self.eval(&[])
    }
}

fn same_cap(f: &FunctionSequence, g: &FunctionSequence) -> Result<usize> {
    if f.cap != g.cap {
        return Err(Error::config(format!(
            "truncation caps differ: {} vs {}",
            f.cap, g.cap
        )));
    }
    Ok(f.cap)
}

/// `(f ⋆ g)_s(x) = Σ_{Z ⊆ x} f_{|Z|}(Z) g_{s−|Z|}(x∖Z)`
pub fn star_product(f: &FunctionSequence, g: &FunctionSequence) -> Result<FunctionSequence> {
    let cap = same_cap(f, g)?;
    let (f, g) = (f.clone(), g.clone());
    Ok(FunctionSequence::new(cap, move |x| {
        let s = x.len();
        let full = if s == 0 { 0 } else { (1u32 << s) - 1 };
        let mut a = Vec::with_capacity(s);
        let mut b = Vec::with_capacity(s);
        let mut sum = 0.0;
        for z in 0..=full {
            gather(x, z, &mut a);
            gather(x, full & !z, &mut b);
            sum += f.eval(&a)? * g.eval(&b)?;
        }
        Ok(sum)
    }))
}

/// `Σ_P w(|P|) ∏_{X ∈ P} h(X)` over all partitions of `x`.
fn partition_sum(x: &[PhasePoint], weight: impl Fn(usize) -> f64, h: &FunctionSequence) -> Result<f64> {
    let parts = partition_masks(x.len())?;
    let mut buf = Vec::with_capacity(x.len());
    let mut sum = 0.0;
    for p in parts.iter() {
        let mut prod = weight(p.len());
        for &b in p {
            gather(x, b, &mut buf);
            prod *= h.eval(&buf)?;
            if prod == 0.0 {
                break;
            }
        }
        sum += prod;
    }
    Ok(sum)
}

/// `𝔼xp⋆ h`: component `s` is `δ_{s,0} + Σ_P ∏ h_{|X_i|}(X_i)`; requires `h₀ = 0`.
pub fn exp_star(h: &FunctionSequence) -> Result<FunctionSequence> {
    let h0 = h.zeroth()?;
    if h0 != 0.0 {
        return Err(Error::domain(format!("exp_star needs h_0 = 0, got {h0}")));
    }
    let h = h.clone();
    Ok(FunctionSequence::new(h.cap, move |x| {
        if x.is_empty() {
            return Ok(1.0);
        }
        partition_sum(x, |_| 1.0, &h)
    }))
}

/// `𝕃n⋆ u`: component `s` is `Σ_P (−1)^{|P|−1}(|P|−1)! ∏ u_{|X_i|}(X_i)`; requires `u₀ = 1`.
pub fn ln_star(u: &FunctionSequence) -> Result<FunctionSequence> {
    let u0 = u.zeroth()?;
    if u0 != 1.0 {
        return Err(Error::domain(format!("ln_star needs u_0 = 1, got {u0}")));
    }
    let u = u.clone();
    Ok(FunctionSequence::new(u.cap, move |x| {
        if x.is_empty() {
            return Ok(0.0);
        }
        partition_sum(x, |k| cumulant_coefficient(k) as f64, &u)
    }))
}

/// `𝔡_Y f`: component `n` is `f_{|Y|+n}(Y, x₁…x_n)`.
pub fn shift_map(y: &[PhasePoint], f: &FunctionSequence) -> Result<FunctionSequence> {
    if y.len() > f.cap {
        return Err(Error::Capacity {
            what: "shifted sequence",
            value: y.len(),
            limit: f.cap,
        });
    }
    let y = y.to_vec();
    let f = f.clone();
    Ok(FunctionSequence::new(f.cap - y.len(), move |x| {
        let mut all = y.clone();
        all.extend_from_slice(x);
        f.eval(&all)
    }))
}

/// A function on cluster-marked arguments `({Y}, x₁…x_n)`.
pub type ClusterFn = dyn Fn(&[PhasePoint], &[PhasePoint]) -> Result<f64> + Send + Sync;

/// `𝔡_{{Y}} f`: component `n` is `f_{1+n}({Y}, x₁…x_n)`.
pub fn shift_map_cluster(y: &[PhasePoint], cap: usize, f: Arc<ClusterFn>) -> FunctionSequence {
    let y = y.to_vec();
    FunctionSequence::new(cap, move |x| f(&y, x))
}

/// `(𝔼xp⋆ h)_{1+n}({Y}, x)` summed over partitions of the cluster-marked set
/// `({Y}, x₁…x_n)`: the block holding `{Y}` is evaluated with `h_cluster`, all
/// other blocks with `h`.
pub fn exp_star_cluster(
    h: &FunctionSequence,
    h_cluster: &ClusterFn,
    y: &[PhasePoint],
    x: &[PhasePoint],
) -> Result<f64> {
    let ground = LabelSet::with_cluster(
        (0..y.len()).collect(),
        (y.len()..y.len() + x.len()).collect(),
    )?;
    let mut sum = 0.0;
    let mut buf = Vec::new();
    for p in enumerate_partitions(&ground)? {
        let mut prod = 1.0;
        for block in &p.blocks {
            // plain elements 1..=n map to x[e-1]
            buf.clear();
            buf.extend(block.iter().filter(|&&e| e > 0).map(|&e| x[e - 1]));
            prod *= if block.contains(&0) {
                h_cluster(y, &buf)?
            } else {
                h.eval(&buf)?
            };
        }
        sum += prod;
    }
    Ok(sum)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bell(m: usize) -> usize {
        // Bell triangle
        let mut row = vec![1usize];
        for _ in 1..m {
            let mut next = vec![*row.last().unwrap()];
            for v in &row {
                next.push(next.last().unwrap() + v);
            }
            row = next;
        }
        *row.last().unwrap()
    }

    #[test]
    fn bell_counts() {
        for m in 1..=8 {
            let g = LabelSet::plain((0..m).collect()).unwrap();
            assert_eq!(enumerate_partitions(&g).unwrap().len(), bell(m), "m = {m}");
        }
        assert_eq!(bell(3), 5);
    }

    #[test]
    fn singleton_and_fused_examples() {
        let g = LabelSet::plain(vec![1]).unwrap();
        let p = enumerate_partitions(&g).unwrap();
        assert_eq!(p, vec![SetPartition { blocks: vec![vec![0]] }]);

        let g = LabelSet::with_cluster(vec![1, 2], vec![3]).unwrap();
        let p = enumerate_partitions(&g).unwrap();
        assert_eq!(p.len(), 2);
        let flat: Vec<_> = p.iter().map(|q| q.label_blocks(&g)).collect();
        assert!(flat.contains(&vec![vec![1, 2, 3]]));
        assert!(flat.contains(&vec![vec![1, 2], vec![3]]));
    }

    #[test]
    fn canonical_block_order() {
        let g = LabelSet::plain((0..5).collect()).unwrap();
        for p in enumerate_partitions(&g).unwrap() {
            let mins: Vec<usize> = p.blocks.iter().map(|b| b[0]).collect();
            assert!(mins.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn capacity_guard() {
        let g = LabelSet::plain((0..13).collect()).unwrap();
        assert!(matches!(enumerate_partitions(&g), Err(Error::Capacity { .. })));
    }

    #[test]
    fn duplicate_labels_rejected() {
        assert!(LabelSet::plain(vec![1, 1]).is_err());
    }

    #[test]
    fn bipartition_counts() {
        let g = LabelSet::plain(vec![1, 2]).unwrap();
        assert_eq!(enumerate_bipartitions(&g).unwrap().len(), 1);
        let g = LabelSet::plain(vec![1, 2, 3]).unwrap();
        assert_eq!(enumerate_bipartitions(&g).unwrap().len(), 3);
        let g = LabelSet::with_cluster(vec![1, 2], vec![3, 4]).unwrap();
        assert_eq!(enumerate_bipartitions(&g).unwrap().len(), 3);
        for m in 2..=8 {
            assert_eq!(bipartition_masks(m).unwrap().len(), (1 << (m - 1)) - 1);
        }
        let g = LabelSet::plain(vec![1]).unwrap();
        assert!(matches!(enumerate_bipartitions(&g), Err(Error::Domain(_))));
    }

    /// Brute force: set partitions whose blocks are runs of consecutive positions,
    /// listed in increasing order.
    fn dissections_brute(ground: &[usize], max_parts: usize) -> Vec<Vec<Vec<usize>>> {
        let n = ground.len();
        let mut out = Vec::new();
        for p in generate_masks(n) {
            if p.len() > max_parts {
                continue;
            }
            let contiguous = p.iter().all(|&b| {
                let lo = b.trailing_zeros();
                let len = b.count_ones();
                b == ((1u32 << len) - 1) << lo
            });
            if contiguous {
                out.push(
                    p.iter()
                        .map(|&b| mask_indices(b).map(|i| ground[i]).collect())
                        .collect(),
                );
            }
        }
        out.sort();
        out
    }

    #[test]
    fn dissection_examples() {
        assert_eq!(enumerate_dissections(&[5], 3).unwrap().len(), 1);
        let d = enumerate_dissections(&[4, 5], 2).unwrap();
        assert_eq!(
            d,
            vec![
                Dissection { parts: vec![vec![4, 5]] },
                Dissection { parts: vec![vec![4], vec![5]] }
            ]
        );
        assert_eq!(
            enumerate_dissections(&[3, 4, 5], 1).unwrap(),
            vec![Dissection { parts: vec![vec![3, 4, 5]] }]
        );
        assert_eq!(enumerate_dissections(&[], 2).unwrap(), vec![Dissection { parts: vec![] }]);
    }

    #[test]
    fn dissections_match_brute_force() {
        for n in 1..=6 {
            let ground: Vec<usize> = (10..10 + n).collect();
            for k in 1..=n {
                let mut fast: Vec<Vec<Vec<usize>>> = enumerate_dissections(&ground, k)
                    .unwrap()
                    .into_iter()
                    .map(|d| d.parts)
                    .collect();
                fast.sort();
                assert_eq!(fast, dissections_brute(&ground, k), "n={n} k={k}");
            }
        }
    }

    #[test]
    fn coefficients() {
        assert_eq!(cumulant_coefficient(1), 1);
        assert_eq!(cumulant_coefficient(2), -1);
        assert_eq!(cumulant_coefficient(3), 2);
        assert_eq!(cumulant_coefficient(4), -6);
    }

    #[test]
    fn mobius_identity_on_partition_lattice() {
        for m in 1..=8 {
            let s: i64 = partition_masks(m)
                .unwrap()
                .iter()
                .map(|p| cumulant_coefficient(p.len()))
                .sum();
            assert_eq!(s, (m == 1) as i64, "m = {m}");
        }
    }

    fn pt(a: f64) -> PhasePoint {
        PhasePoint::new([a, 0.5 * a, -a], [0.1 * a, a * a, 1.0])
    }

    #[test]
    fn star_unit_and_pair_expansion() {
        let g = FunctionSequence::new(4, |x| Ok(x.iter().map(|y| y.q[0]).sum::<f64>() + x.len() as f64));
        let u = FunctionSequence::unit(4);
        let p = star_product(&u, &g).unwrap();
        let xs = [pt(0.3), pt(-1.2), pt(0.7)];
        for n in 0..=3 {
            assert_eq!(p.eval(&xs[..n]).unwrap(), g.eval(&xs[..n]).unwrap());
        }
        let f1 = FunctionSequence::one_particle(4, |x| x.q[0] + 2.0);
        let g1 = FunctionSequence::one_particle(4, |x| x.p[1] - 1.0);
        let fg = star_product(&f1, &g1).unwrap();
        let (a, b) = (pt(0.3), pt(-1.2));
        let expect = (a.q[0] + 2.0) * (b.p[1] - 1.0) + (b.q[0] + 2.0) * (a.p[1] - 1.0);
        assert!((fg.eval(&[a, b]).unwrap() - expect).abs() < 1e-14);
    }

    #[test]
    fn cap_mismatch_is_config_error() {
        assert!(matches!(
            star_product(&FunctionSequence::unit(3), &FunctionSequence::unit(4)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn exp_and_ln_preconditions() {
        assert!(matches!(exp_star(&FunctionSequence::unit(3)), Err(Error::Domain(_))));
        assert!(matches!(ln_star(&FunctionSequence::zero(3)), Err(Error::Domain(_))));
        let e = exp_star(&FunctionSequence::zero(3)).unwrap();
        assert_eq!(e.eval(&[]).unwrap(), 1.0);
        assert_eq!(e.eval(&[pt(1.0), pt(2.0)]).unwrap(), 0.0);
    }

    #[test]
    fn exp_and_ln_at_pairs() {
        let h = FunctionSequence::new(4, |x| {
            Ok(match x.len() {
                0 => 0.0,
                1 => x[0].q[0] + 0.5,
                2 => x[0].p[1] * x[1].p[1],
                _ => 0.1,
            })
        });
        let (a, b) = (pt(0.3), pt(-0.8));
        let e = exp_star(&h).unwrap();
        let expect = a.p[1] * b.p[1] + (a.q[0] + 0.5) * (b.q[0] + 0.5);
        assert!((e.eval(&[a, b]).unwrap() - expect).abs() < 1e-14);

        let u = FunctionSequence::new(4, |x| {
            Ok(match x.len() {
                0 => 1.0,
                1 => x[0].q[0] + 0.5,
                2 => x[0].p[1] * x[1].p[1] + 3.0,
                _ => 0.0,
            })
        });
        let l = ln_star(&u).unwrap();
        let expect = a.p[1] * b.p[1] + 3.0 - (a.q[0] + 0.5) * (b.q[0] + 0.5);
        assert!((l.eval(&[a, b]).unwrap() - expect).abs() < 1e-14);
    }

    #[test]
    fn shift_map_cases() {
        let f = FunctionSequence::new(4, |x| Ok(x.iter().enumerate().map(|(i, y)| (i + 1) as f64 * y.q[0]).sum()));
        let id = shift_map(&[], &f).unwrap();
        let xs = [pt(0.3), pt(-1.2)];
        assert_eq!(id.eval(&xs).unwrap(), f.eval(&xs).unwrap());
        let y = [pt(2.0), pt(0.1)];
        let d = shift_map(&y, &f).unwrap();
        assert_eq!(d.cap(), 2);
        assert_eq!(d.eval(&[]).unwrap(), f.eval(&y).unwrap());
        assert!(matches!(shift_map(&[pt(0.0); 5], &f), Err(Error::Capacity { .. })));
    }
}
