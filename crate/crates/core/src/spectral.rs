//! Dirichlet spectra, the determinant characterisation of eigenvalues below
//! a killed-set threshold, and eigenvalue/exit-time comparisons.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use crate::chain::{dirichlet, ChainModel, DirichletOperator};
use crate::config::Tolerances;
use crate::error::{Error, Result};
use crate::hitting::{mean_hitting_time, restricted_moments, return_complement, shift_of, Abscissa};
use crate::linalg::{MFactor, ResolventSolver};
use crate::metastability::{depth_to, valleys, Hierarchy};
use crate::subset::SubsetMask;

/// Eigenpairs of a Dirichlet operator, ascending.
#[derive(Debug, Clone)]
pub struct Eigenpairs {
    pub interior: Vec<usize>,
    pub values: Vec<f64>,
    /// Q-orthonormal eigenvectors indexed like `interior`.
    pub vectors: Vec<Vec<f64>>,
}

/// Dense symmetric eigensolve of the conjugated operator. Each eigenvalue is
/// then replaced by the Rayleigh quotient of its eigenvector, evaluated
/// through the subtraction-free quadratic form, which restores relative
/// accuracy for eigenvalues far below the matrix norm.
pub fn eigenpairs(op: &DirichletOperator<'_>) -> Result<Eigenpairs> {
    let d = op.dim();
    let q = op.chain().q();
    let eig = SymmetricEigen::new(op.symmetrized());
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let mut values = Vec::with_capacity(d);
    let mut vectors = Vec::with_capacity(d);
    for &k in &order {
        let col = eig.eigenvectors.column(k);
        let phi: Vec<f64> = op.interior().iter().enumerate().map(|(i, &x)| col[i] / q[x].sqrt()).collect();
        let norm = op.q_norm_sq(&phi);
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::Numerical("eigenvector lost normalisation".into()));
        }
        let rq = (op.dirichlet_form(&phi) / norm).max(0.0);
        let scale = norm.sqrt().recip();
        values.push(rq);
        vectors.push(phi.into_iter().map(|v| v * scale).collect());
    }
    if op.killed().is_empty() {
        // without killing the ground state is exactly the constant function
        values[0] = 0.0;
        vectors[0] = vec![1.0 / q.iter().sum::<f64>().sqrt(); d];
    }
    refine_low(op, &mut values, &mut vectors)?;
    Ok(Eigenpairs { interior: op.interior().to_vec(), values, vectors })
}

/// Eigenvalues below this are polished by inverse iteration.
const REFINE_BELOW: f64 = 1e-2;
const REFINE_MAX: usize = 32;
const REFINE_STEPS: usize = 3;

/// Inverse iteration on the low eigenvectors. The dense solve leaves vector
/// errors of order ε/gap, too large when the low eigenvalues are tiny; the
/// subtraction-free factorisation resolves them to relative accuracy.
fn refine_low(op: &DirichletOperator<'_>, values: &mut [f64], vectors: &mut [Vec<f64>]) -> Result<()> {
    let d = op.dim();
    let free = op.killed().is_empty();
    let first = usize::from(free);
    let last = values.iter().take(REFINE_MAX).take_while(|&&v| v < REFINE_BELOW).count();
    if last <= first || d < 2 {
        return Ok(());
    }
    let chain = op.chain();
    let q: Vec<f64> = op.interior().iter().map(|&x| chain.q()[x]).collect();
    // Without killing, pin the heaviest state; the solution differs from the
    // true pseudo-inverse only by a constant, which is projected out below.
    let pin = if free {
        let z = (0..d).max_by(|&a, &b| q[a].total_cmp(&q[b]).then(b.cmp(&a))).expect("d ≥ 2");
        Some(op.interior()[z])
    } else {
        None
    };
    let pinned = match pin {
        Some(z) => Some(dirichlet(chain, &SubsetMask::singleton(chain.n(), z)?)?),
        None => None,
    };
    let factor = MFactor::new(pinned.as_ref().unwrap_or(op), 0.0)?;
    let solve = |rhs: &[f64]| -> Vec<f64> {
        match &pinned {
            Some(p) => {
                let inner: Vec<f64> = p.interior().iter().map(|&x| rhs[op.position(x).expect("same space")]).collect();
                let sol = factor.solve(&inner);
                let mut out = vec![0.0; d];
                for (k, &x) in p.interior().iter().enumerate() {
                    out[op.position(x).expect("same space")] = sol[k];
                }
                out
            }
            None => factor.solve(rhs),
        }
    };
    let q_dot = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).zip(&q).map(|((x, y), w)| w * x * y).sum() };
    for j in first..last {
        let (lower, rest) = vectors.split_at_mut(j);
        let phi = &mut rest[0];
        let project = |v: &mut Vec<f64>| {
            for w in lower.iter() {
                let c = q_dot(v, w);
                v.iter_mut().zip(w).for_each(|(a, b)| *a -= c * b);
            }
        };
        for _ in 0..REFINE_STEPS {
            let mut next = solve(phi);
            project(&mut next);
            project(&mut next);
            let norm = q_dot(&next, &next).sqrt();
            if !(norm.is_finite() && norm > 0.0) {
                return Err(Error::Numerical("inverse iteration lost normalisation".into()));
            }
            next.iter_mut().for_each(|v| *v /= norm);
            *phi = next;
        }
        values[j] = op.dirichlet_form(phi).max(0.0);
    }
    Ok(())
}

/// Smallest eigenvalue of `(1−P)^I`.
pub fn principal_eigenvalue(op: &DirichletOperator<'_>) -> Result<f64> {
    Ok(eigenpairs(op)?.values[0])
}

/// Principal eigenvalue of the operator killed on `set` (infinite when the
/// set is everything).
pub fn principal_of(chain: &ChainModel, set: &SubsetMask) -> Result<f64> {
    if set.is_full() {
        return Ok(f64::INFINITY);
    }
    principal_eigenvalue(&dirichlet(chain, set)?)
}

fn u_of(lambda: f64) -> Option<f64> {
    (lambda < 1.0).then(|| -(-lambda).ln_1p())
}

#[derive(Debug, Clone, Serialize)]
pub struct LocalizationEntry {
    pub k: usize,
    pub point: usize,
    /// `|φ_j(m_k)|` with `φ_j(m_j) = 1`.
    pub value: f64,
    /// `R_{m_j} T_{m_k,m_j} / T_j`.
    pub scale: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Pairing {
    pub j: usize,
    pub point: usize,
    pub lambda: f64,
    /// Principal eigenvalue killed on the previous exclusion set.
    pub predicted_lambda: f64,
    /// `1 / E[τ^{m_j}_{Σ_{j−1}}]`, zero when the exclusion set is empty.
    pub predicted_inverse_time: f64,
    /// `λ_j / λ_{Σ_{j−1}}` (one when both vanish).
    pub ratio: f64,
    pub delta: f64,
    /// `1/𝒯_j + T_{j+1}/T_j`.
    pub delta_scale: f64,
    pub delta_constant: f64,
    /// The eigenvalue nearest to the prediction on a log scale is this one.
    pub nearest_is_self: bool,
    pub localization: Vec<LocalizationEntry>,
    pub localization_constant: f64,
    /// `max_{y∈A(m_j)} |φ_j(y) − P[σ^y_{m_j} < σ^y_{Σ_{j−1}}]|`.
    pub valley_deviation: f64,
    /// Total variation between `Q·φ_j` and `Q`, both normalised on `A(m_j)`.
    pub left_vector_tv: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SpectralReport {
    pub exclusion: SubsetMask,
    pub eigenvalues: Vec<f64>,
    /// `−ln(1−λ)`; null for `λ ≥ 1`.
    pub poles: Vec<Option<f64>>,
    /// Full-length vectors, zero on the exclusion set.
    pub eigenvectors: Vec<Vec<f64>>,
    /// `‖(1−P)^I φ − λφ‖_Q` per pair.
    pub residuals: Vec<f64>,
    pub orthonormality_defect: f64,
    pub pairing: Vec<Pairing>,
    pub j0: Option<usize>,
    /// `λ_{j0+1} / λ_{j0}`.
    pub gap: Option<f64>,
    /// Boundary of the low spectral window.
    pub window: Option<f64>,
    /// Number of eigenvalues below the window boundary.
    pub count_below_gap: Option<usize>,
    pub count_matches: Option<bool>,
    pub depth_order: Option<bool>,
    /// Principal eigenvalues increase strictly along the exclusion sets.
    pub interlacing: Option<bool>,
}

fn orient(v: &mut [f64], pivot: Option<usize>) {
    let max = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let k = match pivot {
        Some(p) if v[p].abs() > 1e-12 * max => p,
        _ => match v.iter().position(|x| x.abs() > 1e-12 * max) {
            Some(k) => k,
            None => return,
        },
    };
    if v[k] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Lowest `k` eigenpairs of `(1−P)^I`.
pub fn dirichlet_spectrum(chain: &ChainModel, exclusion: &SubsetMask, k: usize) -> Result<SpectralReport> {
    let op = dirichlet(chain, exclusion)?;
    if k > op.dim() {
        return Err(Error::Argument(format!("k = {k} exceeds the {} free states", op.dim())));
    }
    let pairs = eigenpairs(&op)?;
    let n = chain.n();
    let q = chain.q();
    let mut eigenvectors = Vec::with_capacity(k);
    let mut residuals = Vec::with_capacity(k);
    for j in 0..k {
        let mut full = vec![0.0; n];
        for (i, &x) in pairs.interior.iter().enumerate() {
            full[x] = pairs.vectors[j][i];
        }
        orient(&mut full, None);
        let local: Vec<f64> = pairs.interior.iter().map(|&x| full[x]).collect();
        residuals.push(eigen_residual(&op, pairs.values[j], &local));
        eigenvectors.push(full);
    }
    let mut defect = 0.0f64;
    for a in 0..k {
        for b in a..k {
            let ip: f64 = (0..n).map(|x| q[x] * eigenvectors[a][x] * eigenvectors[b][x]).sum();
            let want = if a == b { 1.0 } else { 0.0 };
            defect = defect.max((ip - want).abs());
        }
    }
    let eigenvalues: Vec<f64> = pairs.values[..k].to_vec();
    Ok(SpectralReport {
        exclusion: exclusion.clone(),
        poles: eigenvalues.iter().map(|&l| u_of(l)).collect(),
        eigenvalues,
        eigenvectors,
        residuals,
        orthonormality_defect: defect,
        pairing: Vec::new(),
        j0: None,
        gap: None,
        window: None,
        count_below_gap: None,
        count_matches: None,
        depth_order: None,
        interlacing: None,
    })
}

/// `‖(1−P)^I φ − λφ‖_Q / ‖φ‖_Q`.
pub fn eigen_residual(op: &DirichletOperator<'_>, lambda: f64, phi: &[f64]) -> f64 {
    let applied = op.apply(phi);
    let r: Vec<f64> = applied.iter().zip(phi).map(|(a, p)| a - lambda * p).collect();
    (op.q_norm_sq(&r) / op.q_norm_sq(phi)).sqrt()
}

#[derive(Debug, Clone, Serialize)]
pub struct DetGMatrix {
    pub i: SubsetMask,
    pub j: SubsetMask,
    pub u: f64,
    /// `J∖I`, the row/column order of `entries`.
    pub points: Vec<usize>,
    /// `δ_{m′m} − G^{m′}_{m,I∪J}(u)`.
    pub entries: Vec<Vec<f64>>,
    pub determinant: f64,
}

/// Evaluates the determinant matrix at spectral shifts `λ`, scaled by
/// `(1−λ)` so that it stays finite for `λ ≥ 1`.
struct DetEvaluator<'a> {
    chain: &'a ChainModel,
    killed: SubsetMask,
    points: Vec<usize>,
    /// `None` when `I ∪ J` is the whole state space.
    op: Option<DirichletOperator<'a>>,
    factor: Option<MFactor>,
    principal: f64,
}

struct DetSample {
    matrix: DMatrix<f64>,
    /// `K_m` on the free states of `I∪J`, one per point.
    columns: Vec<Vec<f64>>,
}

impl<'a> DetEvaluator<'a> {
    fn new(chain: &'a ChainModel, i: &SubsetMask, j: &SubsetMask) -> Result<Self> {
        let killed = i.union(j);
        let points = j.difference(i).members().to_vec();
        if points.is_empty() {
            return Err(Error::Argument("J must contain points outside I".into()));
        }
        if killed.is_full() {
            return Ok(Self { chain, killed, points, op: None, factor: None, principal: f64::INFINITY });
        }
        let op = dirichlet(chain, &killed)?;
        let principal = principal_eigenvalue(&op)?;
        let factor = Some(MFactor::new(&op, 0.0)?);
        Ok(Self { chain, killed, points, op: Some(op), factor, principal })
    }

    fn interior(&self) -> &[usize] {
        self.op.as_ref().map_or(&[], |op| op.interior())
    }

    fn position(&self, x: usize) -> Option<usize> {
        self.op.as_ref().and_then(|op| op.position(x))
    }

    fn sample(&self, lambda: f64) -> Result<DetSample> {
        let chain = self.chain;
        let interior = self.interior();
        let solver = match (&self.op, &self.factor) {
            (None, _) => None,
            (Some(op), Some(f)) if lambda > 0.0 => Some(ResolventSolver::with_factor(op, f.clone(), lambda, self.principal)?),
            (Some(op), _) => Some(ResolventSolver::new(op, lambda, Some(self.principal))?),
        };
        let solve = |b: &[f64]| -> Result<Vec<f64>> {
            match &solver {
                Some(s) => s.solve(b),
                None => Ok(Vec::new()),
            }
        };
        let k = self.points.len();
        let ones = if lambda != 0.0 { solve(&vec![1.0; interior.len()])? } else { vec![0.0; interior.len()] };
        let mut matrix = DMatrix::zeros(k, k);
        let mut columns = Vec::with_capacity(k);
        for (c, &m) in self.points.iter().enumerate() {
            let rhs: Vec<f64> = interior.iter().map(|&z| chain.p(z, m)).collect();
            let col = solve(&rhs)?;
            for (r, &mp) in self.points.iter().enumerate() {
                if r == c {
                    continue;
                }
                let mut s = chain.p(mp, m);
                for &(z, p) in chain.row(mp) {
                    if let Some(i) = self.position(z) {
                        s += p * col[i];
                    }
                }
                matrix[(r, c)] = -s;
            }
            // diagonal through the escape flux, avoiding 1 − (return probability)
            let others = self.killed.without(m);
            let rhs_a: Vec<f64> = interior.iter().map(|&z| chain.flux_into(z, &others)).collect();
            let a = solve(&rhs_a)?;
            let mut alpha = chain.flux_into(m, &others);
            let mut beta = 1.0;
            for &(z, p) in chain.row(m) {
                if let Some(i) = self.position(z) {
                    alpha += p * a[i];
                    beta += p * ones[i];
                }
            }
            matrix[(c, c)] = alpha - lambda * beta;
            columns.push(col);
        }
        Ok(DetSample { matrix, columns })
    }

    fn det(&self, lambda: f64) -> Result<f64> {
        Ok(self.sample(lambda)?.matrix.determinant())
    }
}

/// The matrix `δ − G_{I∪J}(u)` over `J∖I` and its determinant.
pub fn det_g(chain: &ChainModel, i: &SubsetMask, j: &SubsetMask, u: f64) -> Result<DetGMatrix> {
    let ev = DetEvaluator::new(chain, i, j)?;
    let lambda = shift_of(u);
    Abscissa::from_lambda(ev.principal).admit(u, 0.0)?;
    let s = ev.sample(lambda)?;
    let scale = 1.0 / (1.0 - lambda);
    let k = ev.points.len();
    let entries: Vec<Vec<f64>> = (0..k).map(|r| (0..k).map(|c| s.matrix[(r, c)] * scale).collect()).collect();
    let determinant = DMatrix::from_fn(k, k, |r, c| entries[r][c]).determinant();
    Ok(DetGMatrix { i: i.clone(), j: j.clone(), u, points: ev.points.clone(), entries, determinant })
}

#[derive(Debug, Clone, Serialize)]
pub struct DetRoot {
    pub lambda: f64,
    pub u: Option<f64>,
    /// Eigenvector built from the kernel, zero on `I`, max-norm one.
    pub vector: Vec<f64>,
    pub residual: f64,
    /// Smallest over second-smallest singular value at the root.
    pub kernel_ratio: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DetRoots {
    pub i: SubsetMask,
    pub j: SubsetMask,
    /// Principal eigenvalue of `(1−P)^{I∪J}`, the top of the window.
    pub window_top: f64,
    pub window_bottom: f64,
    pub roots: Vec<DetRoot>,
    /// Eigenvalues of `(1−P)^I` inside the window, from the eigensolve.
    pub eigenvalues: Vec<f64>,
    /// Roots and eigenvalues pair up one to one.
    pub bijection: bool,
    /// Largest `|λ_root − λ_eig| / λ_eig` over the pairs.
    pub max_relative_mismatch: f64,
    pub max_absolute_mismatch: f64,
}

fn kernel(m: &DMatrix<f64>) -> Result<(Vec<f64>, f64)> {
    let k = m.nrows();
    if k == 1 {
        return Ok((vec![1.0], 0.0));
    }
    let svd = m.clone().svd(false, true);
    let v_t = svd.v_t.as_ref().ok_or_else(|| Error::Numerical("svd failed".into()))?;
    let mut idx: Vec<usize> = (0..k).collect();
    idx.sort_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]));
    let smallest = svd.singular_values[idx[0]];
    let second = svd.singular_values[idx[1]];
    let largest = svd.singular_values[idx[k - 1]];
    if second <= 1e-8 * largest {
        return Err(Error::Degeneracy(format!(
            "kernel of the determinant matrix has dimension > 1 (singular values {smallest:e}, {second:e})"
        )));
    }
    Ok(((0..k).map(|c| v_t[(idx[0], c)]).collect(), smallest / second))
}

/// Roots of `det 𝒢_{I,J}` below the principal eigenvalue of `(1−P)^{I∪J}`,
/// each with the eigenvector assembled from the kernel.
pub fn eigen_roots_via_detg(chain: &ChainModel, i: &SubsetMask, j: &SubsetMask) -> Result<DetRoots> {
    let ev = DetEvaluator::new(chain, i, j)?;
    let top = ev.principal;
    let op_i = dirichlet(chain, i)?;
    let pairs = eigenpairs(&op_i)?;

    // Rigorous lower bound for the smallest positive eigenvalue of (1−P)^I:
    // λ ≥ 1 / max E[τ_S] for any nonempty S ⊇ I (S = {m} when I is empty).
    let anchor = if i.is_empty() { SubsetMask::singleton(chain.n(), ev.points[0])? } else { i.clone() };
    let worst = mean_hitting_time(chain, &anchor)?.into_iter().filter(|v| v.is_finite()).fold(0.0, f64::max);
    let bottom = 1e-3 / worst.max(1.0);
    // the spectrum of 1−P lies in [0, 2]
    let upper = if top.is_finite() { top * (1.0 - 1e-7) } else { 2.0 * (1.0 + 1e-9) };

    let mut roots = Vec::new();
    if i.is_empty() {
        roots.push(0.0);
    }
    let wanted: Vec<f64> = pairs.values.iter().copied().filter(|&l| l > bottom && l < top).collect();
    let mut per_decade = 24.0;
    let mut found = Vec::new();
    for _ in 0..5 {
        found.clear();
        let decades = (upper / bottom).log10().max(0.01);
        let steps = (decades * per_decade).ceil() as usize + 1;
        let mut grid: Vec<f64> = (0..=steps).map(|s| bottom * (upper / bottom).powf(s as f64 / steps as f64)).collect();
        if top.is_finite() {
            for extra in [0.999, 0.9999, 0.99999] {
                grid.push(top * extra);
            }
        }
        grid.sort_by(f64::total_cmp);
        grid.dedup();
        let mut prev = (grid[0], ev.det(grid[0])?);
        for &l in &grid[1..] {
            let d = ev.det(l)?;
            if d == 0.0 {
                found.push(l);
            } else if prev.1 != 0.0 && d.signum() != prev.1.signum() {
                if let Some(root) = bisect(&ev, prev.0, l, prev.1, d)? {
                    found.push(root);
                }
            }
            prev = (l, d);
        }
        if found.len() >= wanted.len() {
            break;
        }
        per_decade *= 2.0;
    }
    roots.extend(found.iter().copied());

    let n = chain.n();
    let mut out = Vec::with_capacity(roots.len());
    for &lambda in &roots {
        let s = ev.sample(lambda)?;
        let (v, kernel_ratio) = kernel(&s.matrix)?;
        let mut phi = vec![0.0; n];
        for (c, &m) in ev.points.iter().enumerate() {
            phi[m] = v[c];
            for (k, &z) in ev.interior().iter().enumerate() {
                phi[z] += v[c] * s.columns[c][k];
            }
        }
        let max = phi.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        phi.iter_mut().for_each(|x| *x /= max);
        orient(&mut phi, None);
        let local: Vec<f64> = op_i.interior().iter().map(|&x| phi[x]).collect();
        let residual = eigen_residual(&op_i, lambda, &local);
        out.push(DetRoot { lambda, u: u_of(lambda), vector: phi, residual, kernel_ratio });
    }

    let mut eigen_window: Vec<f64> = pairs.values.iter().copied().filter(|&l| l < top).collect();
    if !i.is_empty() {
        eigen_window.retain(|&l| l > 0.0);
    }
    let bijection = eigen_window.len() == out.len();
    let mut rel = 0.0f64;
    let mut abs = 0.0f64;
    if bijection {
        for (e, r) in eigen_window.iter().zip(&out) {
            let d = (e - r.lambda).abs();
            abs = abs.max(d);
            if *e > 0.0 {
                rel = rel.max(d / e);
            }
        }
    } else {
        rel = f64::INFINITY;
        abs = f64::INFINITY;
    }
    Ok(DetRoots {
        i: i.clone(),
        j: j.clone(),
        window_top: top,
        window_bottom: bottom,
        roots: out,
        eigenvalues: eigen_window,
        bijection,
        max_relative_mismatch: rel,
        max_absolute_mismatch: abs,
    })
}

/// Bisects a sign change of the determinant. Returns `None` when the
/// bracket closes on a pole, recognised by `|det|` growing instead of
/// shrinking.
fn bisect(ev: &DetEvaluator<'_>, mut lo: f64, mut hi: f64, mut f_lo: f64, mut f_hi: f64) -> Result<Option<f64>> {
    let start = f_lo.abs().min(f_hi.abs());
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if hi - lo <= 1e-14 * mid {
            break;
        }
        let f = ev.det(mid)?;
        if f == 0.0 {
            return Ok(Some(mid));
        }
        if f.signum() == f_lo.signum() {
            lo = mid;
            f_lo = f;
        } else {
            hi = mid;
            f_hi = f;
        }
    }
    if f_lo.abs().min(f_hi.abs()) > start {
        return Ok(None);
    }
    Ok(Some(0.5 * (lo + hi)))
}

#[derive(Debug, Clone, Serialize)]
pub struct DvBound {
    pub lambda: f64,
    pub max_mean_time: f64,
    pub product: f64,
    pub holds: bool,
}

/// Principal eigenvalue against the largest mean hitting time of `J`.
pub fn dv_bound_check(chain: &ChainModel, j: &SubsetMask) -> Result<DvBound> {
    if j.is_empty() {
        return Err(Error::Argument("J must be nonempty".into()));
    }
    let lambda = principal_of(chain, j)?;
    let max_mean_time = mean_hitting_time(chain, j)?.into_iter().filter(|v| v.is_finite()).fold(0.0, f64::max);
    let product = lambda * max_mean_time;
    Ok(DvBound { lambda, max_mean_time, product, holds: product >= 1.0 - 1e-10 })
}

#[derive(Debug, Clone, Serialize)]
pub struct DualityReport {
    pub exclusion: SubsetMask,
    pub point: usize,
    pub lambda: f64,
    pub u: Option<f64>,
    pub mean_time: f64,
    /// `λ_I E[τ^m_I] − 1`.
    pub time_deviation: f64,
    /// `λ_I T_I / R_m − 1`.
    pub depth_deviation: f64,
    /// `|1 − G^m_{m,I}(u_I)|`; absent when `u_I` is not real or not inside
    /// the domain of `G^m`.
    pub closure: Option<f64>,
    /// Derivative of `G^m_{m,I}` at `u_I` by centred differences.
    pub slope: f64,
    /// `E[τ^m_m 1{τ^m_m < τ^m_I}]`.
    pub restricted_return: f64,
    pub slope_relative_gap: f64,
}

/// Compares the principal eigenvalue killed on `I` with the mean exit time
/// of the deepest point of `M∖I`.
pub fn eigen_time_duality(chain: &ChainModel, metastable: &SubsetMask, i: &SubsetMask, tol: &Tolerances) -> Result<DualityReport> {
    if i.is_empty() || !i.is_subset(metastable) || i == metastable {
        return Err(Error::Argument("I must be a nonempty proper subset of M".into()));
    }
    let candidates = metastable.difference(i);
    let depths = depth_to(chain, i)?;
    let mut ranked: Vec<usize> = candidates.members().to_vec();
    ranked.sort_by(|&a, &b| depths[b].total_cmp(&depths[a]).then(a.cmp(&b)));
    let m = ranked[0];
    if ranked.len() > 1 && (depths[ranked[0]] - depths[ranked[1]]).abs() <= tol.tie * depths[ranked[0]] {
        return Err(Error::Degeneracy(format!(
            "states {} and {} tie for the deepest escape to I",
            ranked[0], ranked[1]
        )));
    }
    let lambda = principal_of(chain, i)?;
    let mean_time = mean_hitting_time(chain, i)?[m];
    let vd = valleys(chain, metastable, tol)?;
    let r_m = vd.ratio_of(m).ok_or_else(|| Error::Argument("point missing from valley decomposition".into()))?;
    let t_i = depths[m];
    let with_m = i.with(m);
    let principal_m = principal_of(chain, &with_m)?;
    // the root lies strictly inside the domain of G^m only when the
    // principal eigenvector charges m; near λ = 1 the root runs off to
    // infinity and cannot be resolved
    let u = u_of(lambda);
    let inner = u.filter(|_| principal_m > lambda * (1.0 + 1e-9) && lambda < 1.0 - 1e-9);
    let closure = match inner {
        Some(_) => Some(return_complement(chain, m, i, lambda, Some(principal_m))?.abs()),
        None => None,
    };
    let room = u_of(principal_m).unwrap_or(f64::INFINITY);
    let (slope, restricted_return, gap) = match inner {
        Some(u_i) if u_i * (1.0 + 3e-3) < room => {
            let h = 1e-3 * u_i;
            let f = |uu: f64| return_complement(chain, m, i, shift_of(uu), Some(principal_m));
            let slope = -(8.0 * (f(u_i + h)? - f(u_i - h)?) - (f(u_i + 2.0 * h)? - f(u_i - 2.0 * h)?)) / (12.0 * h);
            let (moment, _) = restricted_moments(chain, m, &SubsetMask::singleton(chain.n(), m)?, i)?;
            (slope, moment, (slope - moment).abs() / moment)
        }
        _ => (f64::NAN, f64::NAN, f64::NAN),
    };
    Ok(DualityReport {
        exclusion: i.clone(),
        point: m,
        lambda,
        u,
        mean_time,
        time_deviation: lambda * mean_time - 1.0,
        depth_deviation: lambda * t_i / r_m - 1.0,
        closure,
        slope,
        restricted_return,
        slope_relative_gap: gap,
    })
}

/// Full low-spectrum comparison against a hierarchy built for the same
/// exclusion set.
pub fn low_spectrum_verify(chain: &ChainModel, hierarchy: &Hierarchy, tol: &Tolerances) -> Result<SpectralReport> {
    let i = &hierarchy.initial;
    let op = dirichlet(chain, i)?;
    let dim = op.dim();
    let j0 = hierarchy.points.len();
    let k = (j0 + 1).min(dim);
    let mut report = dirichlet_spectrum(chain, i, dim.min(j0 + 6))?;
    let lam = report.eigenvalues.clone();

    let gap = (j0 < lam.len()).then(|| if lam[j0 - 1] > 0.0 { lam[j0] / lam[j0 - 1] } else { f64::INFINITY });

    let vd = valleys(chain, &hierarchy.metastable, tol)?;
    let q = chain.q();
    let mut pairing = Vec::with_capacity(j0);
    let mut predicted = Vec::with_capacity(j0);
    for j in 0..j0 {
        predicted.push(principal_of(chain, &hierarchy.exclusions[j])?);
    }
    let mut interlacing = true;
    let mut outer = f64::INFINITY;
    for j in 0..j0 {
        outer = principal_of(chain, &hierarchy.exclusions[j + 1])?;
        // killing more states never lowers the principal eigenvalue; strict
        // growth needs the eigenvector to charge the added point
        if !(outer >= predicted[j]) {
            interlacing = false;
        }
    }
    // window boundary: geometric mean of the last predicted low eigenvalue
    // and the principal eigenvalue with every metastable point killed
    let window = if outer.is_finite() { (predicted[j0 - 1].max(0.0) * outer).sqrt() } else { f64::INFINITY };
    let count = Some(lam.iter().filter(|&&l| l < window).count());
    let mut depth_order = true;
    for j in 0..j0.min(k) {
        let mj = hierarchy.points[j];
        let mut phi = report.eigenvectors[j].clone();
        let norm = phi[mj];
        if norm == 0.0 {
            return Err(Error::Numerical(format!("eigenvector {} vanishes at its paired point", j + 1)));
        }
        phi.iter_mut().for_each(|v| *v /= norm);
        orient(&mut report.eigenvectors[j], Some(mj));

        let pred = predicted[j];
        let ratio = if pred == 0.0 && lam[j].abs() < 1e-12 { 1.0 } else { lam[j] / pred };
        let nearest = {
            let score = |l: f64| if pred == 0.0 { l.abs() } else { (l.max(1e-300) / pred).ln().abs() };
            (0..lam.len()).min_by(|&a, &b| score(lam[a]).total_cmp(&score(lam[b]))).unwrap() == j
        };
        depth_order &= nearest;
        let inv_time = if hierarchy.exclusions[j].is_empty() {
            0.0
        } else {
            1.0 / mean_hitting_time(chain, &hierarchy.exclusions[j])?[mj]
        };
        let t_j = hierarchy.depths[j];
        let t_next = hierarchy.depths[j + 1];
        let sep = hierarchy.separation_ratio[j];
        let delta_scale = if t_j.is_finite() { 1.0 / sep + t_next / t_j } else { 0.0 };
        let delta = ratio - 1.0;
        let r_mj = vd.ratio_of(mj).unwrap_or(f64::NAN);

        let mut localization = Vec::new();
        let mut loc_c = 0.0f64;
        for kk in 0..j {
            let mk = hierarchy.points[kk];
            let t_km = 1.0 / crate::hitting::escape_probability(chain, mk, &SubsetMask::singleton(chain.n(), mj)?)?;
            let scale = r_mj * t_km / t_j;
            let value = phi[mk].abs();
            if scale > 0.0 && scale.is_finite() {
                loc_c = loc_c.max(value / scale);
            }
            localization.push(LocalizationEntry { k: kk + 1, point: mk, value, scale });
        }

        let reach = if hierarchy.exclusions[j].is_empty() {
            vec![1.0; chain.n()]
        } else {
            crate::hitting::hitting_probability(chain, &SubsetMask::singleton(chain.n(), mj)?, &hierarchy.exclusions[j])?.values
        };
        let valley = vd.valley_of(mj).cloned().unwrap_or_else(|| SubsetMask::empty(chain.n()));
        let mut dev = 0.0f64;
        let (mut mass_phi, mut mass_q) = (0.0, 0.0);
        for y in valley.iter() {
            dev = dev.max((phi[y] - reach[y]).abs());
            mass_phi += q[y] * phi[y];
            mass_q += q[y];
        }
        let tv = 0.5 * valley.iter().map(|y| (q[y] * phi[y] / mass_phi - q[y] / mass_q).abs()).sum::<f64>();

        pairing.push(Pairing {
            j: j + 1,
            point: mj,
            lambda: lam[j],
            predicted_lambda: pred,
            predicted_inverse_time: inv_time,
            ratio,
            delta,
            delta_scale,
            delta_constant: if delta_scale > 0.0 { delta.abs() / delta_scale } else { 0.0 },
            nearest_is_self: nearest,
            localization,
            localization_constant: loc_c,
            valley_deviation: dev,
            left_vector_tv: tv,
        });
    }
    report.pairing = pairing;
    report.j0 = Some(j0);
    report.gap = gap;
    report.window = Some(window);
    report.count_below_gap = count;
    report.count_matches = Some(count == Some(j0) && gap.is_some_and(|g| g >= tol.gap_ratio));
    report.depth_order = Some(depth_order);
    report.interlacing = Some(interlacing);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::landscape::random_reversible;

    fn two_state(p: f64, q: f64) -> ChainModel {
        ChainModel::from_dense(vec![vec![1.0 - p, p], vec![q, 1.0 - q]], None, None).unwrap()
    }

    #[test]
    fn two_state_spectra() {
        let (p, q) = (0.25, 0.5);
        let c = two_state(p, q);
        let s = dirichlet_spectrum(&c, &SubsetMask::empty(2), 2).unwrap();
        assert!(s.eigenvalues[0].abs() < 1e-15);
        assert!((s.eigenvalues[1] - (p + q)).abs() < 1e-14);
        assert!(s.orthonormality_defect < 1e-12);
        let s = dirichlet_spectrum(&c, &SubsetMask::new(2, [1]).unwrap(), 1).unwrap();
        assert!((s.eigenvalues[0] - p).abs() < 1e-15);
    }

    #[test]
    fn two_state_det_roots() {
        let (p, q) = (0.25, 0.5);
        let c = two_state(p, q);
        let r = eigen_roots_via_detg(&c, &SubsetMask::empty(2), &SubsetMask::full(2)).unwrap();
        assert!(r.bijection, "{:?}", r);
        assert_eq!(r.roots.len(), 2);
        assert!(r.roots[0].lambda.abs() < 1e-15);
        assert!((r.roots[1].lambda - (p + q)).abs() < 1e-12);
        for root in &r.roots {
            assert!(root.residual < 1e-12);
        }
        // closed-form determinant away from the roots
        let u = 0.1;
        let d = det_g(&c, &SubsetMask::empty(2), &SubsetMask::full(2), u).unwrap();
        let e = u.exp();
        let want = (1.0 - e * (1.0 - p)) * (1.0 - e * (1.0 - q)) - e * e * p * q;
        assert!((d.determinant - want).abs() < 1e-13);
    }

    #[test]
    fn single_point_det_at_zero_is_escape() {
        let c = random_reversible(8, 0.5, 12);
        let i = SubsetMask::new(8, [0]).unwrap();
        let j = SubsetMask::new(8, [5]).unwrap();
        let d = det_g(&c, &i, &j, 0.0).unwrap();
        let esc = crate::hitting::escape_probability(&c, 5, &i).unwrap();
        assert!((d.entries[0][0] - esc).abs() < 1e-14);
        assert!(d.determinant > 0.0);
    }

    #[test]
    fn det_roots_match_eigensolve() {
        for seed in 0..5 {
            let c = random_reversible(12, 0.35, 100 + seed);
            let i = SubsetMask::new(12, [0]).unwrap();
            let j = SubsetMask::new(12, [3, 7, 11]).unwrap();
            let r = eigen_roots_via_detg(&c, &i, &j).unwrap();
            assert!(r.bijection, "seed {seed}: {:?} vs {:?}", r.eigenvalues, r.roots.iter().map(|x| x.lambda).collect::<Vec<_>>());
            assert!(r.max_relative_mismatch < 1e-10, "seed {seed}: {}", r.max_relative_mismatch);
            for root in &r.roots {
                assert!(root.residual < 1e-8);
            }
        }
    }

    #[test]
    fn dv_two_state_equality() {
        let c = two_state(0.25, 0.5);
        let d = dv_bound_check(&c, &SubsetMask::new(2, [1]).unwrap()).unwrap();
        assert!((d.product - 1.0).abs() < 1e-14);
        for seed in 0..20 {
            let c = random_reversible(10, 0.4, seed);
            let d = dv_bound_check(&c, &SubsetMask::new(10, [seed as usize % 10]).unwrap()).unwrap();
            assert!(d.holds, "{}", d.product);
        }
    }
}
