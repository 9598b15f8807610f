//! Metastable sets, valleys, capacities and the hierarchy of exclusion sets.

use std::collections::HashMap;

use serde::Serialize;

use crate::chain::{dirichlet, ChainModel};
use crate::config::Tolerances;
use crate::error::{Error, Result};
use crate::hitting::{hitting_probability, mean_hitting_time, mean_time_conditioned_tol, restricted_moments};
use crate::linalg::MFactor;
use crate::subset::SubsetMask;

/// `T_{x,I} = 1/P[τ^x_I < τ^x_x]` for every `x ∉ I`, from the diagonal of
/// the Green's function killed on `I`. Infinite when `I` is empty, NaN on `I`.
pub fn depth_to(chain: &ChainModel, set: &SubsetMask) -> Result<Vec<f64>> {
    let n = chain.n();
    if set.is_empty() {
        return Ok(vec![f64::INFINITY; n]);
    }
    let mut out = vec![f64::NAN; n];
    if set.is_full() {
        return Ok(out);
    }
    let op = dirichlet(chain, set)?;
    let diag = MFactor::new(&op, 0.0)?.inverse_diagonal();
    for (i, &x) in op.interior().iter().enumerate() {
        out[x] = diag[i];
    }
    Ok(out)
}

/// Memoised [`depth_to`] keyed by the killed set.
pub struct DepthCache<'a> {
    chain: &'a ChainModel,
    cache: HashMap<Vec<usize>, Vec<f64>>,
}

impl<'a> DepthCache<'a> {
    pub fn new(chain: &'a ChainModel) -> Self {
        Self { chain, cache: HashMap::new() }
    }

    pub fn to(&mut self, set: &SubsetMask) -> Result<&[f64]> {
        let key = set.members().to_vec();
        if !self.cache.contains_key(&key) {
            let v = depth_to(self.chain, set)?;
            self.cache.insert(key.clone(), v);
        }
        Ok(&self.cache[&key])
    }

    /// `T_{x,I}`.
    pub fn depth(&mut self, x: usize, set: &SubsetMask) -> Result<f64> {
        Ok(self.to(set)?[x])
    }

    /// `T_{x,y}`.
    pub fn pair(&mut self, x: usize, y: usize) -> Result<f64> {
        let s = SubsetMask::singleton(self.chain.n(), y)?;
        self.depth(x, &s)
    }

    /// `T_I = max_{x∈M∖I} T_{x,I}` with its maximiser.
    pub fn worst(&mut self, metastable: &SubsetMask, set: &SubsetMask) -> Result<Option<(usize, f64)>> {
        let d = self.to(set)?;
        let mut best: Option<(usize, f64)> = None;
        for x in metastable.difference(set).iter() {
            if best.map_or(true, |(_, v)| d[x] > v) {
                best = Some((x, d[x]));
            }
        }
        Ok(best)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MetastableSpec {
    pub metastable: SubsetMask,
    /// `max_{x≠y∈M} P[τ^x_y < τ^x_x]`.
    pub a_inv: f64,
    pub a_argmax: Option<(usize, usize)>,
    /// `min_z P[τ^z_M ≤ τ^z_z]`.
    pub b: f64,
    pub b_argmin: usize,
    /// `a_inv / b`.
    pub separation: f64,
    pub threshold: f64,
    pub qualifies: bool,
    /// Measured genericity ratio once computed.
    pub eps: Option<f64>,
    /// Convention used for `z ∈ M` in `b`.
    pub b_convention: &'static str,
}

pub const DEFAULT_SEPARATION: f64 = 0.1;

/// Measures `a_N^{-1}`, `b_N` and their ratio for a candidate set.
pub fn check_metastable_set(chain: &ChainModel, metastable: &SubsetMask, threshold: f64) -> Result<MetastableSpec> {
    let mut cache = DepthCache::new(chain);
    check_with(&mut cache, metastable, threshold)
}

fn check_with(cache: &mut DepthCache<'_>, metastable: &SubsetMask, threshold: f64) -> Result<MetastableSpec> {
    let chain = cache.chain;
    if metastable.is_empty() {
        return Err(Error::Argument("metastable set must be nonempty".into()));
    }
    if metastable.universe() != chain.n() {
        return Err(Error::Structural("subset lives on a different state space".into()));
    }
    // positive hitting times: from z ∈ M the set M is reached no later than z itself
    let mut b = 1.0;
    let mut b_argmin = metastable.members()[0];
    let d = cache.to(metastable)?.to_vec();
    for z in metastable.complement().iter() {
        let v = 1.0 / d[z];
        if v < b {
            b = v;
            b_argmin = z;
        }
    }
    let mut a_inv = 0.0;
    let mut a_argmax = None;
    for &y in metastable.members() {
        let d = cache.to(&SubsetMask::singleton(chain.n(), y)?)?;
        for &x in metastable.members() {
            if x != y && 1.0 / d[x] > a_inv {
                a_inv = 1.0 / d[x];
                a_argmax = Some((x, y));
            }
        }
    }
    let separation = a_inv / b;
    Ok(MetastableSpec {
        metastable: metastable.clone(),
        a_inv,
        a_argmax,
        b,
        b_argmin,
        separation,
        threshold,
        qualifies: metastable.len() >= 2 && !metastable.is_full() && separation <= threshold,
        eps: None,
        b_convention: "positive-time",
    })
}

fn argmax_q(chain: &ChainModel, set: impl Iterator<Item = usize>) -> Option<usize> {
    let q = chain.q();
    let mut best: Option<usize> = None;
    for x in set {
        if best.map_or(true, |b| q[x] > q[b]) {
            best = Some(x);
        }
    }
    best
}

/// Greedy construction: start from the most likely state and repeatedly
/// add the state deepest relative to the current set, then move each point
/// to the most likely state of its valley.
pub fn propose_metastable_set(chain: &ChainModel, k: usize, threshold: Option<f64>, tol: &Tolerances) -> Result<MetastableSpec> {
    let n = chain.n();
    if k == 0 || k > n {
        return Err(Error::Argument(format!("k = {k} must lie in 1..={n}")));
    }
    let mut cache = DepthCache::new(chain);
    let seed = argmax_q(chain, 0..n).expect("nonempty chain");
    let mut current = SubsetMask::singleton(n, seed)?;
    while current.len() < k {
        let d = cache.to(&current)?;
        let mut best: Option<usize> = None;
        for x in current.complement().iter() {
            if best.map_or(true, |b| d[x] > d[b] * (1.0 + tol.tie)) {
                best = Some(x);
            }
        }
        let Some(x) = best else { break };
        let candidate = current.with(x);
        if let Some(t) = threshold {
            if check_with(&mut cache, &candidate, t)?.separation > t {
                break;
            }
        }
        current = candidate;
    }
    for _ in 0..n {
        let vd = valleys(chain, &current, tol)?;
        let mut moved = current.clone();
        for (i, &m) in current.members().iter().enumerate() {
            let top = argmax_q(chain, vd.valleys[i].iter()).unwrap_or(m);
            if top != m && !current.contains(top) {
                moved = moved.without(m).with(top);
            }
        }
        if moved == current {
            break;
        }
        current = moved;
    }
    check_with(&mut cache, &current, threshold.unwrap_or(DEFAULT_SEPARATION))
}

#[derive(Debug, Clone, Serialize)]
pub struct OverlapCheck {
    pub y: usize,
    pub x: usize,
    pub m: usize,
    /// `min(P[τ^y_m<τ^y_y], P[τ^y_x<τ^y_y])`.
    pub eps: f64,
    /// `Q(y) / (ε^{-1} Q(m) P[τ^m_x<τ^m_m])`; the bound holds with factor 2
    /// when this is at most 2, and always holds with factor 3.
    pub ratio: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValleyDecomposition {
    pub metastable: SubsetMask,
    /// `A(x)` per point of `M`, in member order.
    pub valleys: Vec<SubsetMask>,
    /// `P[τ^z_x = τ^z_M]` per point of `M`, in member order.
    pub harmonic: Vec<Vec<f64>>,
    pub overlap: SubsetMask,
    pub overlap_mass: f64,
    /// `R_x = Q(x)/Q(A(x))`.
    pub ratios: Vec<f64>,
    pub r_n: f64,
    pub c_n_inv: f64,
    pub overlap_checks: Vec<OverlapCheck>,
    /// Largest overlap ratio (zero without overlap).
    pub overlap_ratio: f64,
}

impl ValleyDecomposition {
    fn index(&self, m: usize) -> Option<usize> {
        self.metastable.members().binary_search(&m).ok()
    }

    pub fn ratio_of(&self, m: usize) -> Option<f64> {
        self.index(m).map(|i| self.ratios[i])
    }

    pub fn valley_of(&self, m: usize) -> Option<&SubsetMask> {
        self.index(m).map(|i| &self.valleys[i])
    }

    pub fn mass_of(&self, m: usize, chain: &ChainModel) -> Option<f64> {
        self.valley_of(m).map(|v| v.iter().map(|y| chain.q()[y]).sum())
    }
}

/// Local valleys of each point of `M` by first-hit distribution.
pub fn valleys(chain: &ChainModel, metastable: &SubsetMask, tol: &Tolerances) -> Result<ValleyDecomposition> {
    let n = chain.n();
    if metastable.is_empty() {
        return Err(Error::Argument("metastable set must be nonempty".into()));
    }
    let members = metastable.members();
    let k = members.len();
    let mut harmonic = Vec::with_capacity(k);
    for &x in members {
        // time-zero hits count, so each point of M sits in its own valley
        harmonic.push(hitting_probability(chain, &SubsetMask::singleton(n, x)?, metastable)?.values);
    }
    let mut flags = vec![vec![false; n]; k];
    let mut overlap = vec![false; n];
    for z in 0..n {
        let best = (0..k).map(|i| harmonic[i][z]).fold(0.0f64, f64::max);
        let mut count = 0;
        for i in 0..k {
            if harmonic[i][z] >= best * (1.0 - tol.tie) {
                flags[i][z] = true;
                count += 1;
            }
        }
        overlap[z] = count > 1;
    }
    let q = chain.q();
    let valleys: Vec<SubsetMask> = flags.into_iter().map(SubsetMask::from_flags).collect();
    let ratios: Vec<f64> = members
        .iter()
        .zip(&valleys)
        .map(|(&x, v)| q[x] / v.iter().map(|y| q[y]).sum::<f64>())
        .collect();
    let overlap = SubsetMask::from_flags(overlap);
    let overlap_mass = overlap.iter().map(|y| q[y]).sum();

    let mut cache = DepthCache::new(chain);
    let mut checks = Vec::new();
    let mut overlap_ratio = 0.0f64;
    for y in overlap.iter() {
        let homes: Vec<usize> = (0..k).filter(|&i| valleys[i].contains(y)).map(|i| members[i]).collect();
        for &m in &homes {
            for &x in &homes {
                if x == m || y == m || y == x {
                    continue;
                }
                let eps = (1.0 / cache.pair(y, m)?).min(1.0 / cache.pair(y, x)?);
                let bound = q[m] / cache.pair(m, x)? / eps;
                let ratio = q[y] / bound;
                overlap_ratio = overlap_ratio.max(ratio);
                checks.push(OverlapCheck { y, x, m, eps, ratio });
            }
        }
    }
    Ok(ValleyDecomposition {
        metastable: metastable.clone(),
        r_n: ratios.iter().copied().fold(0.0, f64::max),
        c_n_inv: ratios.iter().copied().fold(f64::INFINITY, f64::min),
        valleys,
        harmonic,
        overlap,
        overlap_mass,
        ratios,
        overlap_checks: checks,
        overlap_ratio,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TriangleViolation {
    pub x: usize,
    pub y: usize,
    pub z: usize,
    /// `min(E(x,z),E(z,y)) / E(x,y)`, at most 3.
    pub ratio: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SandwichCase {
    pub y: usize,
    pub m: usize,
    pub j: SubsetMask,
    pub delta: f64,
    /// `E(m,J)/E(y,J)`.
    pub ratio: f64,
    pub lower: f64,
    pub upper: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct CapacityTable {
    pub points: Vec<usize>,
    /// `E(x,y) = Q(x)/T_{x,y}`; NaN on the diagonal.
    pub capacity: Vec<Vec<f64>>,
    /// `e(x,y) = −ln E(x,y)`, zero on the diagonal.
    pub energy: Vec<Vec<f64>>,
    pub symmetry_defect: f64,
    /// Largest `min(E(x,z),E(z,y))/E(x,y)` over triples.
    pub triangle_ratio: f64,
    pub triangle_violations: Vec<TriangleViolation>,
    /// Largest `e(x,y) − max(e(x,z),e(z,y))`.
    pub ultrametric_defect: f64,
    pub sandwich: Vec<SandwichCase>,
    pub sandwich_violations: usize,
}

fn subsets_of(pool: &[usize], limit: usize) -> Vec<Vec<usize>> {
    let k = pool.len();
    if k <= limit {
        (1u64..(1 << k))
            .map(|mask| (0..k).filter(|&i| mask >> i & 1 == 1).map(|i| pool[i]).collect())
            .collect()
    } else {
        let mut out: Vec<Vec<usize>> = pool.iter().map(|&p| vec![p]).collect();
        out.push(pool.to_vec());
        out
    }
}

/// Pairwise capacities on `M` with the triangle and sandwich bounds.
pub fn capacities(chain: &ChainModel, metastable: &SubsetMask) -> Result<CapacityTable> {
    let n = chain.n();
    if metastable.len() < 2 {
        return Err(Error::Argument("capacities need at least two points".into()));
    }
    let pts = metastable.members().to_vec();
    let k = pts.len();
    let q = chain.q();
    let mut cache = DepthCache::new(chain);
    let mut cap = vec![vec![f64::NAN; k]; k];
    let mut energy = vec![vec![0.0; k]; k];
    for (j, &y) in pts.iter().enumerate() {
        let d = cache.to(&SubsetMask::singleton(n, y)?)?;
        for (i, &x) in pts.iter().enumerate() {
            if i != j {
                cap[i][j] = q[x] / d[x];
                energy[i][j] = -cap[i][j].ln();
            }
        }
    }
    let mut sym = 0.0f64;
    for i in 0..k {
        for j in i + 1..k {
            sym = sym.max((cap[i][j] - cap[j][i]).abs() / cap[i][j].max(cap[j][i]));
        }
    }
    let mut tri = 0.0f64;
    let mut ultra = f64::NEG_INFINITY;
    let mut violations = Vec::new();
    for a in 0..k {
        for b in 0..k {
            for c in 0..k {
                if a == b || b == c || a == c {
                    continue;
                }
                let ratio = cap[a][c].min(cap[c][b]) / cap[a][b];
                tri = tri.max(ratio);
                ultra = ultra.max(energy[a][b] - energy[a][c].max(energy[c][b]));
                if ratio > 3.0 * (1.0 + 1e-9) {
                    violations.push(TriangleViolation { x: pts[a], y: pts[b], z: pts[c], ratio });
                }
            }
        }
    }

    let mut sandwich = Vec::new();
    let mut bad = 0;
    for &y in &pts {
        for &m in &pts {
            if y == m {
                continue;
            }
            let pool: Vec<usize> = pts.iter().copied().filter(|&p| p != y && p != m).collect();
            for js in subsets_of(&pool, 4) {
                let j = SubsetMask::new(n, js)?;
                let e_mj = q[m] / cache.depth(m, &j)?;
                let e_yj = q[y] / cache.depth(y, &j)?;
                let e_my = q[m] / cache.pair(m, y)?;
                let delta = e_mj / e_my;
                if !(delta < 0.5) {
                    continue;
                }
                let ratio = e_mj / e_yj;
                let lower = (1.0 - 2.0 * delta) / (1.0 - delta);
                let upper = 1.0 / (1.0 - delta);
                let slack = 1e-9;
                let holds = ratio >= lower * (1.0 - slack) && ratio <= upper * (1.0 + slack);
                if !holds {
                    bad += 1;
                }
                sandwich.push(SandwichCase { y, m, j, delta, ratio, lower, upper, holds });
            }
        }
    }
    Ok(CapacityTable {
        points: pts,
        capacity: cap,
        energy,
        symmetry_defect: sym,
        triangle_ratio: tri,
        triangle_violations: violations,
        ultrametric_defect: if ultra.is_finite() { ultra } else { 0.0 },
        sandwich,
        sandwich_violations: bad,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct GenericityReport {
    /// Worst `min(T_{x,I},T_{y,I})/max(T_{x,I},T_{y,I})`.
    pub pair_ratio: f64,
    pub worst: Option<(usize, usize, SubsetMask)>,
    /// `max_{x≠m_1} Q(x)/Q(m_1)`.
    pub measure_ratio: f64,
    /// Larger of the two ratios.
    pub eps: f64,
    pub sets_checked: usize,
    /// All subsets were enumerated.
    pub exhaustive: bool,
    /// Some pair has equal depths up to the tie tolerance.
    pub degenerate: bool,
}

/// Measured genericity ratio. Every nonempty `I ⊂ M` is examined when
/// `|M| ≤ 12`, otherwise singletons plus the supplied exclusion sets.
pub fn check_genericity(
    chain: &ChainModel,
    metastable: &SubsetMask,
    hierarchy_sets: &[SubsetMask],
    tol: &Tolerances,
) -> Result<GenericityReport> {
    let n = chain.n();
    let q = chain.q();
    let pts = metastable.members().to_vec();
    if pts.len() < 2 {
        return Ok(GenericityReport {
            pair_ratio: 0.0,
            worst: None,
            measure_ratio: 0.0,
            eps: 0.0,
            sets_checked: 0,
            exhaustive: true,
            degenerate: false,
        });
    }
    let m1 = argmax_q(chain, pts.iter().copied()).expect("nonempty");
    let measure_ratio = pts.iter().filter(|&&x| x != m1).map(|&x| q[x] / q[m1]).fold(0.0, f64::max);
    let exhaustive = pts.len() <= 12;
    let mut sets: Vec<SubsetMask> = Vec::new();
    if exhaustive {
        for s in subsets_of(&pts, 12) {
            if s.len() + 2 <= pts.len() {
                sets.push(SubsetMask::new(n, s)?);
            }
        }
    } else {
        for &p in &pts {
            sets.push(SubsetMask::singleton(n, p)?);
        }
        for s in hierarchy_sets {
            if !s.is_empty() && s.len() + 2 <= pts.len() && !sets.contains(s) {
                sets.push(s.clone());
            }
        }
    }
    let mut ratio = 0.0f64;
    let mut worst = None;
    for s in &sets {
        let d = depth_to(chain, s)?;
        let free: Vec<usize> = pts.iter().copied().filter(|&p| !s.contains(p)).collect();
        for a in 0..free.len() {
            for b in a + 1..free.len() {
                let (x, y) = (free[a], free[b]);
                let r = d[x].min(d[y]) / d[x].max(d[y]);
                if r > ratio {
                    ratio = r;
                    worst = Some((x, y, s.clone()));
                }
            }
        }
    }
    Ok(GenericityReport {
        pair_ratio: ratio,
        worst,
        measure_ratio,
        eps: ratio.max(measure_ratio),
        sets_checked: sets.len(),
        exhaustive,
        degenerate: ratio >= 1.0 - tol.tie || measure_ratio >= 1.0 - tol.tie,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct Hierarchy {
    pub metastable: SubsetMask,
    pub initial: SubsetMask,
    /// `m_1, …, m_{j0}`.
    pub points: Vec<usize>,
    /// `Σ_0 ⊂ Σ_1 ⊂ … ⊂ Σ_{j0} = M ∪ I`.
    pub exclusions: Vec<SubsetMask>,
    /// `T_1, …, T_{j0+1}`, the last being `1/b_N`.
    pub depths: Vec<f64>,
    /// `𝒯_j` (infinite for `j = 1`).
    pub separation_ratio: Vec<f64>,
    /// `ℰ_j` (infinite for `j = 1`).
    pub escape_depth: Vec<f64>,
    /// `T_N(m_j)`.
    pub metastable_depths: Vec<f64>,
    /// `M_N(m_j)`.
    pub metastable_sets: Vec<SubsetMask>,
    /// `max(T_j/T_N(m_j), T_N(m_j)/T_j) − 1`.
    pub depth_slack: Vec<f64>,
    /// `T_{j+1}/T_j`.
    pub depth_ratios: Vec<f64>,
    /// Largest relative gap between `T_{m_l,Σ_j∖m_l}` and `T_{Σ_j∖m_l}`.
    pub exclusion_slack: f64,
    /// `𝒯_j ≥ ℰ_j / T_j` for every `j ≥ 2`.
    pub separation_order: bool,
    /// `T_{j+1} ≤ ε_N T_j` for every `j`, when `ε_N` is supplied.
    pub monotone: Option<bool>,
    pub b: f64,
}

impl Hierarchy {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Orders the points of `M∖I` by effective depth.
pub fn build_hierarchy(
    chain: &ChainModel,
    metastable: &SubsetMask,
    initial: &SubsetMask,
    eps: Option<f64>,
    tol: &Tolerances,
) -> Result<Hierarchy> {
    if metastable.is_empty() {
        return Err(Error::Argument("metastable set must be nonempty".into()));
    }
    let free = metastable.difference(initial);
    if free.is_empty() {
        return Err(Error::Argument("M ∖ I is empty".into()));
    }
    let mut cache = DepthCache::new(chain);
    let b = check_with(&mut cache, metastable, f64::INFINITY)?.b;
    let q = chain.q();
    let mut exclusions = vec![initial.clone()];
    let mut points = Vec::new();
    let mut depths = Vec::new();
    while exclusions.last().unwrap().intersection(metastable) != *metastable {
        let sigma = exclusions.last().unwrap().clone();
        let remaining = metastable.difference(&sigma);
        let (m, t) = if sigma.is_empty() {
            let mut ranked: Vec<usize> = remaining.members().to_vec();
            ranked.sort_by(|&a, &b| q[b].total_cmp(&q[a]).then(a.cmp(&b)));
            if ranked.len() > 1 && q[ranked[0]] - q[ranked[1]] <= tol.tie * q[ranked[0]] {
                return Err(Error::Degeneracy(format!(
                    "states {} and {} tie for the largest measure",
                    ranked[0], ranked[1]
                )));
            }
            (ranked[0], f64::INFINITY)
        } else {
            let d = cache.to(&sigma)?;
            let mut ranked: Vec<usize> = remaining.members().to_vec();
            ranked.sort_by(|&a, &b| d[b].total_cmp(&d[a]).then(a.cmp(&b)));
            if ranked.len() > 1 && d[ranked[0]] - d[ranked[1]] <= tol.tie * d[ranked[0]] {
                return Err(Error::Degeneracy(format!(
                    "states {} and {} tie for the effective depth relative to {:?}",
                    ranked[0],
                    ranked[1],
                    sigma.members()
                )));
            }
            (ranked[0], d[ranked[0]])
        };
        points.push(m);
        depths.push(t);
        exclusions.push(sigma.with(m));
    }
    depths.push(1.0 / b);
    let j0 = points.len();

    let mut separation_ratio = Vec::with_capacity(j0);
    let mut escape_depth = Vec::with_capacity(j0);
    let mut exclusion_slack = 0.0f64;
    let mut separation_order = true;
    for j in 0..j0 {
        if j == 0 {
            separation_ratio.push(f64::INFINITY);
            escape_depth.push(f64::INFINITY);
            continue;
        }
        let mj = points[j];
        let mut sep = f64::INFINITY;
        for k in 0..j {
            sep = sep.min(cache.pair(points[k], mj)? / depths[j]);
        }
        let mut esc = f64::INFINITY;
        for l in 0..j {
            let rest = exclusions[j + 1].without(points[l]);
            let t_l = cache.depth(points[l], &rest)?;
            esc = esc.min(t_l);
            if let Some((_, t_rest)) = cache.worst(metastable, &rest)? {
                exclusion_slack = exclusion_slack.max((t_l - t_rest).abs() / t_rest);
            }
        }
        if sep < esc / depths[j] * (1.0 - 1e-9) {
            separation_order = false;
        }
        separation_ratio.push(sep);
        escape_depth.push(esc);
    }

    let mut metastable_depths = Vec::with_capacity(j0);
    let mut metastable_sets = Vec::with_capacity(j0);
    let mut depth_slack = Vec::with_capacity(j0);
    for j in 0..j0 {
        let m = points[j];
        let mut set = initial.clone();
        for x in metastable.iter() {
            if q[x] > q[m] {
                set = set.with(x);
            }
        }
        let tn = cache.depth(m, &set)?;
        let t = depths[j];
        depth_slack.push(if t.is_infinite() && tn.is_infinite() { 0.0 } else { (t / tn).max(tn / t) - 1.0 });
        metastable_depths.push(tn);
        metastable_sets.push(set);
    }
    let depth_ratios: Vec<f64> = (0..j0).map(|j| depths[j + 1] / depths[j]).collect();
    let monotone = eps.map(|e| depth_ratios.iter().all(|&r| r <= e * (1.0 + 1e-9)));
    Ok(Hierarchy {
        metastable: metastable.clone(),
        initial: initial.clone(),
        points,
        exclusions,
        depths,
        separation_ratio,
        escape_depth,
        metastable_depths,
        metastable_sets,
        depth_slack,
        depth_ratios,
        exclusion_slack,
        separation_order,
        monotone,
        b,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct MeanExitTime {
    pub x: usize,
    pub target: SubsetMask,
    pub exact: f64,
    /// `Q(A(x)) / (Q(x) P[τ^x_J < τ^x_x])`.
    pub formula: f64,
    pub relative_gap: f64,
    /// `T_{x,J} = T_J` or `J ⊆ M_N(x)`.
    pub in_hypothesis: bool,
}

/// Exact mean exit time from `x ∈ M` to `J` against the valley formula.
pub fn mean_exit_time(chain: &ChainModel, metastable: &SubsetMask, x: usize, target: &SubsetMask, tol: &Tolerances) -> Result<MeanExitTime> {
    if target.is_empty() || target.contains(x) || !metastable.contains(x) {
        return Err(Error::Argument("need x ∈ M and a nonempty J not containing x".into()));
    }
    let mut cache = DepthCache::new(chain);
    let t_xj = cache.depth(x, target)?;
    let t_j = cache.worst(metastable, target)?.map(|(_, t)| t).unwrap_or(f64::NAN);
    let q = chain.q();
    let higher = target.iter().all(|y| q[y] > q[x]);
    let in_hypothesis = (t_xj - t_j).abs() <= tol.tie * t_j || higher;
    let vd = valleys(chain, metastable, tol)?;
    let mass = vd.mass_of(x, chain).expect("x ∈ M");
    let formula = mass / q[x] * t_xj;
    let exact = mean_hitting_time(chain, target)?[x];
    Ok(MeanExitTime { x, target: target.clone(), exact, formula, relative_gap: (formula - exact).abs() / exact, in_hypothesis })
}

#[derive(Debug, Clone, Serialize)]
pub struct ReturnTimeCheck {
    pub m: usize,
    pub exclusion: SubsetMask,
    /// `E[τ^m_m ; τ^m_m < τ^m_I]`.
    pub restricted_return: f64,
    pub inverse_ratio: f64,
    /// `restricted_return · R_m − 1`.
    pub deviation: f64,
    /// `T_{I∪m} / T_I`.
    pub scale: f64,
    /// Residual of the exact mean-time split over excursions.
    pub split_residual: f64,
    /// `max_{x∉I} E[τ^x_I] / E[τ^m_I] − 1`.
    pub max_mean_gap: f64,
}

/// Return-time quantities at the deepest point of `M∖I`.
pub fn return_time_check(chain: &ChainModel, metastable: &SubsetMask, exclusion: &SubsetMask, tol: &Tolerances) -> Result<ReturnTimeCheck> {
    let n = chain.n();
    let mut cache = DepthCache::new(chain);
    let (m, t_i) = cache
        .worst(metastable, exclusion)?
        .ok_or_else(|| Error::Argument("M ∖ I is empty".into()))?;
    let with_m = exclusion.with(m);
    let t_im = cache.worst(metastable, &with_m)?.map(|(_, t)| t).unwrap_or(0.0);
    let single = SubsetMask::singleton(n, m)?;
    let (restricted, _) = restricted_moments(chain, m, &single, exclusion)?;
    let vd = valleys(chain, metastable, tol)?;
    let r_m = vd.ratio_of(m).expect("m ∈ M");

    let means = mean_hitting_time(chain, exclusion)?;
    let e_m = means[m];
    let escape = 1.0 / t_i;
    let (cond_moment, _) = restricted_moments(chain, m, exclusion, &single)?;
    let split = cond_moment / escape + restricted / escape;
    let max_mean = means.iter().copied().filter(|v| v.is_finite()).fold(0.0, f64::max);
    Ok(ReturnTimeCheck {
        m,
        exclusion: exclusion.clone(),
        restricted_return: restricted,
        inverse_ratio: 1.0 / r_m,
        deviation: restricted * r_m - 1.0,
        scale: t_im / t_i,
        split_residual: (split - e_m).abs() / e_m,
        max_mean_gap: max_mean / e_m - 1.0,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ConditionalBound {
    pub x: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub constant: f64,
    pub flagged: bool,
}

/// Conditioned mean time against the largest valley-weighted escape time.
pub fn conditional_bound_check(
    chain: &ChainModel,
    metastable: &SubsetMask,
    x: usize,
    target: &SubsetMask,
    avoid: &SubsetMask,
    tol: &Tolerances,
) -> Result<ConditionalBound> {
    let killed = target.union(avoid);
    if killed.contains(x) {
        return Err(Error::Argument(format!("state {x} lies in I ∪ J")));
    }
    let cm = mean_time_conditioned_tol(chain, target, avoid, tol)?;
    let lhs = cm.solution.values[x];
    let vd = valleys(chain, metastable, tol)?;
    let d = depth_to(chain, &killed)?;
    let mut rhs = f64::NAN;
    for m in metastable.difference(&killed).iter() {
        let v = d[m] / vd.ratio_of(m).expect("m ∈ M");
        if rhs.is_nan() || v > rhs {
            rhs = v;
        }
    }
    let constant = lhs / rhs;
    Ok(ConditionalBound { x, lhs, rhs, constant, flagged: !constant.is_finite() })
}

/// Everything computed for a metastable set in one pass.
#[derive(Debug, Clone, Serialize)]
pub struct Analysis {
    pub spec: MetastableSpec,
    pub valleys: ValleyDecomposition,
    pub capacities: Option<CapacityTable>,
    pub genericity: GenericityReport,
    pub hierarchy: Hierarchy,
}

pub fn analyze(chain: &ChainModel, metastable: &SubsetMask, initial: &SubsetMask, threshold: f64, tol: &Tolerances) -> Result<Analysis> {
    let mut spec = check_metastable_set(chain, metastable, threshold)?;
    let valleys = valleys(chain, metastable, tol)?;
    let capacities = if metastable.len() >= 2 { Some(capacities(chain, metastable)?) } else { None };
    let provisional = build_hierarchy(chain, metastable, initial, None, tol)?;
    let genericity = check_genericity(chain, metastable, &provisional.exclusions, tol)?;
    spec.eps = Some(genericity.eps);
    let hierarchy = build_hierarchy(chain, metastable, initial, Some(genericity.eps), tol)?;
    Ok(Analysis { spec, valleys, capacities, genericity, hierarchy })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::landscape::random_reversible;

    fn two_state(p: f64, q: f64) -> ChainModel {
        ChainModel::from_dense(vec![vec![1.0 - p, p], vec![q, 1.0 - q]], None, None).unwrap()
    }

    #[test]
    fn two_state_spec() {
        let c = two_state(0.5, 0.5);
        let s = check_metastable_set(&c, &SubsetMask::full(2), 0.1).unwrap();
        assert_eq!(s.a_inv, 0.5);
        assert_eq!(s.b, 1.0);
        assert!(!s.qualifies);
    }

    #[test]
    fn two_state_valleys_and_capacity() {
        let (p, q) = (0.25, 0.5);
        let c = two_state(p, q);
        let m = SubsetMask::full(2);
        let vd = valleys(&c, &m, &Tolerances::default()).unwrap();
        assert_eq!(vd.valleys[0].members(), &[0]);
        assert_eq!(vd.valleys[1].members(), &[1]);
        assert_eq!(vd.ratios, vec![1.0, 1.0]);
        let cap = capacities(&c, &m).unwrap();
        let want = p * q / (p + q);
        assert!((cap.capacity[0][1] - want).abs() < 1e-15);
        assert!((cap.capacity[1][0] - want).abs() < 1e-15);
        let e = mean_exit_time(&c, &m, 0, &SubsetMask::new(2, [1]).unwrap(), &Tolerances::default()).unwrap();
        assert!((e.formula - 1.0 / p).abs() < 1e-13 && (e.exact - 1.0 / p).abs() < 1e-13);
        let cb = conditional_bound_check(&c, &m, 0, &SubsetMask::new(2, [1]).unwrap(), &SubsetMask::empty(2), &Tolerances::default())
            .unwrap();
        assert!((cb.lhs - 1.0 / p).abs() < 1e-12 && (cb.rhs - 1.0 / p).abs() < 1e-12);
        assert!((cb.constant - 1.0).abs() < 1e-12);
    }

    #[test]
    fn depth_matches_escape() {
        let c = random_reversible(9, 0.4, 5);
        let set = SubsetMask::new(9, [2, 6]).unwrap();
        let d = depth_to(&c, &set).unwrap();
        for x in set.complement().iter() {
            let e = crate::hitting::escape_probability(&c, x, &set).unwrap();
            assert!((d[x] * e - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn capacity_symmetry_random() {
        for seed in 0..10 {
            let c = random_reversible(10, 0.4, seed);
            let m = SubsetMask::new(10, [0, 4, 7, 9]).unwrap();
            let cap = capacities(&c, &m).unwrap();
            assert!(cap.symmetry_defect < 1e-10);
            assert!(cap.triangle_violations.is_empty());
            assert_eq!(cap.sandwich_violations, 0);
        }
    }
}
