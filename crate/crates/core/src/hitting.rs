//! Hitting probabilities, Laplace transforms of hitting times, conditioned
//! mean times and Green's functions, all from Dirichlet linear systems.
//!
//! Conventions: `K` denotes the solution of the Dirichlet problem (time-zero
//! hits count, value 1 on the target and 0 on the avoided set) and `G` the
//! transform over strictly positive hitting times, `G = e^u P K` pointwise.
//! A Laplace argument `u` corresponds to the spectral shift
//! `λ = 1 − e^{−u}`; systems are written as `((1−P)^B − λ) K = P(·, target)`.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::Serialize;

use crate::chain::{dirichlet, ChainModel};
use crate::config::Tolerances;
use crate::error::{Error, Result};
use crate::linalg::{solve_complex, MFactor, ResolventSolver};
use crate::spectral::principal_eigenvalue;
use crate::subset::SubsetMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolutionKind {
    Probability,
    Laplace,
    MeanTime,
}

#[derive(Debug, Clone, Serialize)]
pub struct HittingSolution {
    pub kind: SolutionKind,
    pub target: SubsetMask,
    pub avoid: SubsetMask,
    pub u: f64,
    /// Per-state values; NaN marks flagged states.
    pub values: Vec<f64>,
    /// Largest absolute residual of the linear system.
    pub residual: f64,
    /// Set when no state was left to solve for.
    pub trivial: bool,
    pub flagged: Vec<usize>,
}

/// Convergence abscissa of Laplace transforms killed on a set `B`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Abscissa {
    /// Principal eigenvalue of `(1−P)^B` (infinite for `B = Γ`).
    pub lambda: f64,
    /// `−ln(1 − λ)`, infinite when `λ ≥ 1`.
    pub u: f64,
}

impl Abscissa {
    pub fn of(chain: &ChainModel, killed: &SubsetMask) -> Result<Self> {
        if killed.is_full() {
            return Ok(Self { lambda: f64::INFINITY, u: f64::INFINITY });
        }
        let lambda = principal_eigenvalue(&dirichlet(chain, killed)?)?;
        Ok(Self::from_lambda(lambda))
    }

    pub fn from_lambda(lambda: f64) -> Self {
        let u = if lambda < 1.0 { -(-lambda).ln_1p() } else { f64::INFINITY };
        Self { lambda, u }
    }

    /// A real argument well inside the domain: half the abscissa, or one
    /// when every real argument converges.
    pub fn midpoint(&self) -> f64 {
        if self.u.is_finite() {
            0.5 * self.u
        } else {
            1.0
        }
    }

    /// Reject `u` unless `1 − e^{−u}` stays a relative `margin` below `λ`.
    /// Steps a forward series weighted by `e^{ut}` needs before its terms
    /// drop by a factor 1e-18; infinite at or beyond the abscissa.
    pub fn series_length(&self, u: f64) -> f64 {
        let rate = self.u - u;
        if rate > 0.0 {
            SERIES_DECADES / rate
        } else {
            f64::INFINITY
        }
    }

    pub fn admit(&self, u: f64, margin: f64) -> Result<()> {
        if shift_of(u) < self.lambda * (1.0 - margin) {
            Ok(())
        } else {
            Err(Error::Domain { u, abscissa: self.u, lambda: self.lambda })
        }
    }
}

/// `ln 1e18`, the decay a forward series needs before it is cut.
const SERIES_DECADES: f64 = 41.5;

/// `λ = 1 − e^{−u}`.
pub fn shift_of(u: f64) -> f64 {
    -(-u).exp_m1()
}

/// `1 − e^{−u}` for complex `u`, accurate when `u` is small.
fn complex_shift_of(u: Complex64) -> Complex64 {
    let (a, b) = (u.re, u.im);
    let half = (0.5 * b).sin();
    // e^{-u} − 1 = (e^{-a} − 1) cos b + (cos b − 1) − i e^{-a} sin b
    let re = (-a).exp_m1() * b.cos() - 2.0 * half * half;
    let im = -(-a).exp() * b.sin();
    -Complex64::new(re, im)
}

/// Values on every state of a Laplace solve.
#[derive(Debug, Clone)]
pub(crate) struct LaplaceParts {
    /// Dirichlet solution `K` (boundary values included).
    pub k: Vec<f64>,
    /// Positive-time transform `G = e^u P K`.
    pub g: Vec<f64>,
    pub residual: f64,
    pub trivial: bool,
}

pub(crate) fn laplace_parts(
    chain: &ChainModel,
    target: &SubsetMask,
    avoid: &SubsetMask,
    lambda: f64,
    principal: Option<f64>,
) -> Result<LaplaceParts> {
    let n = chain.n();
    let killed = target.union(avoid);
    let mut k: Vec<f64> = (0..n).map(|x| if target.contains(x) { 1.0 } else { 0.0 }).collect();
    let mut residual = 0.0;
    let trivial = killed.is_full();
    if !trivial {
        let op = dirichlet(chain, &killed)?;
        let rhs: Vec<f64> = op.interior().iter().map(|&x| chain.flux_into(x, target)).collect();
        let solver = ResolventSolver::new(&op, lambda, principal)?;
        let sol = solver.solve(&rhs)?;
        let applied = op.apply(&sol);
        for i in 0..sol.len() {
            residual = f64::max(residual, (rhs[i] - (applied[i] - lambda * sol[i])).abs());
        }
        for (i, &x) in op.interior().iter().enumerate() {
            k[x] = sol[i];
        }
    }
    let scale = 1.0 / (1.0 - lambda);
    let g = (0..n).map(|x| scale * chain.row(x).iter().map(|&(z, p)| p * k[z]).sum::<f64>()).collect();
    Ok(LaplaceParts { k, g, residual, trivial })
}

fn principal_if_needed(chain: &ChainModel, killed: &SubsetMask, lambda: f64) -> Result<Option<Abscissa>> {
    if lambda <= 0.0 && !killed.is_empty() {
        Ok(None)
    } else {
        Ok(Some(Abscissa::of(chain, killed)?))
    }
}

fn check_target(chain: &ChainModel, target: &SubsetMask, avoid: &SubsetMask) -> Result<()> {
    if target.universe() != chain.n() || avoid.universe() != chain.n() {
        return Err(Error::Structural("subset lives on a different state space".into()));
    }
    if target.is_empty() {
        return Err(Error::Argument("target set must be nonempty".into()));
    }
    Ok(())
}

/// `P[σ_I ≤ σ_J]` from every state.
pub fn hitting_probability(chain: &ChainModel, target: &SubsetMask, avoid: &SubsetMask) -> Result<HittingSolution> {
    check_target(chain, target, avoid)?;
    let parts = laplace_parts(chain, target, avoid, 0.0, None)?;
    Ok(HittingSolution {
        kind: SolutionKind::Probability,
        target: target.clone(),
        avoid: avoid.clone(),
        u: 0.0,
        values: parts.k,
        residual: parts.residual,
        trivial: parts.trivial,
        flagged: Vec::new(),
    })
}

/// `P[τ^x_I < τ^x_x]`, the escape probability from `x` to `I`.
pub fn escape_probability(chain: &ChainModel, x: usize, target: &SubsetMask) -> Result<f64> {
    if target.contains(x) {
        return Err(Error::Argument(format!("state {x} lies in the target set")));
    }
    if target.is_empty() {
        return Err(Error::Argument("target set must be nonempty".into()));
    }
    Ok(return_complement(chain, x, target, 0.0, None)?)
}

/// `1 − G^x_{x,B}(u)` for `x ∉ B`, assembled without cancellation for
/// `λ ≤ 0` as `e^u (α − λβ)` with `α` the escape flux and `β` one plus the
/// expected number of steps before absorption, both weighted by the first
/// step from `x`.
pub(crate) fn return_complement(
    chain: &ChainModel,
    x: usize,
    avoid: &SubsetMask,
    lambda: f64,
    principal: Option<f64>,
) -> Result<f64> {
    let killed = avoid.with(x);
    let direct = avoid.iter().map(|z| chain.p(x, z)).sum::<f64>();
    let (alpha, beta) = if killed.is_full() {
        (direct, 1.0)
    } else {
        let op = dirichlet(chain, &killed)?;
        let solver = ResolventSolver::new(&op, lambda, principal)?;
        let rhs_a: Vec<f64> = op.interior().iter().map(|&z| chain.flux_into(z, avoid)).collect();
        let a = solver.solve(&rhs_a)?;
        let b = if lambda != 0.0 { solver.solve(&vec![1.0; op.dim()])? } else { vec![0.0; op.dim()] };
        let mut alpha = direct;
        let mut beta = 1.0;
        for &(z, p) in chain.row(x) {
            if let Some(i) = op.position(z) {
                alpha += p * a[i];
                beta += p * b[i];
            }
        }
        (alpha, beta)
    };
    Ok((alpha - lambda * beta) / (1.0 - lambda))
}

/// `G^x_{I,J}(u)` from every state for real `u`.
pub fn laplace_transform(chain: &ChainModel, target: &SubsetMask, avoid: &SubsetMask, u: f64) -> Result<HittingSolution> {
    laplace_transform_tol(chain, target, avoid, u, &Tolerances::default())
}

pub fn laplace_transform_tol(
    chain: &ChainModel,
    target: &SubsetMask,
    avoid: &SubsetMask,
    u: f64,
    tol: &Tolerances,
) -> Result<HittingSolution> {
    check_target(chain, target, avoid)?;
    let lambda = shift_of(u);
    let killed = target.union(avoid);
    let abscissa = principal_if_needed(chain, &killed, lambda)?;
    if let Some(a) = &abscissa {
        a.admit(u, tol.abscissa_margin)?;
    }
    laplace_transform_with(chain, target, avoid, u, abscissa.map(|a| a.lambda))
}

/// As [`laplace_transform`] with the principal eigenvalue of the killed
/// operator supplied by the caller.
pub fn laplace_transform_with(
    chain: &ChainModel,
    target: &SubsetMask,
    avoid: &SubsetMask,
    u: f64,
    principal: Option<f64>,
) -> Result<HittingSolution> {
    check_target(chain, target, avoid)?;
    let parts = laplace_parts(chain, target, avoid, shift_of(u), principal)?;
    Ok(HittingSolution {
        kind: SolutionKind::Laplace,
        target: target.clone(),
        avoid: avoid.clone(),
        u,
        values: parts.g,
        residual: parts.residual,
        trivial: parts.trivial,
        flagged: Vec::new(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ComplexLaplace {
    pub target: SubsetMask,
    pub avoid: SubsetMask,
    pub u: (f64, f64),
    /// `(re, im)` of `G^x_{I,J}(u)` per state.
    pub values: Vec<(f64, f64)>,
    pub residual: f64,
}

/// `G^x_{I,J}(u)` for complex `u` with `|Im u| ≤ π`.
pub fn laplace_transform_complex(
    chain: &ChainModel,
    target: &SubsetMask,
    avoid: &SubsetMask,
    u: Complex64,
    tol: &Tolerances,
) -> Result<ComplexLaplace> {
    check_target(chain, target, avoid)?;
    if u.im.abs() > std::f64::consts::PI {
        return Err(Error::Argument(format!("|Im u| = {} exceeds pi", u.im.abs())));
    }
    let n = chain.n();
    let killed = target.union(avoid);
    let mut k: Vec<Complex64> =
        (0..n).map(|x| Complex64::new(if target.contains(x) { 1.0 } else { 0.0 }, 0.0)).collect();
    let mut residual = 0.0;
    if !killed.is_full() {
        let abscissa = Abscissa::of(chain, &killed)?;
        abscissa.admit(u.re, tol.abscissa_margin)?;
        let op = dirichlet(chain, &killed)?;
        let lambda = complex_shift_of(u);
        let rhs: Vec<Complex64> =
            op.interior().iter().map(|&x| Complex64::new(chain.flux_into(x, target), 0.0)).collect();
        let sol = solve_complex(&op, lambda, &rhs)?;
        let re: Vec<f64> = sol.iter().map(|c| c.re).collect();
        let im: Vec<f64> = sol.iter().map(|c| c.im).collect();
        let (ar, ai) = (op.apply(&re), op.apply(&im));
        for i in 0..sol.len() {
            let applied = Complex64::new(ar[i], ai[i]) - lambda * sol[i];
            residual = f64::max(residual, (rhs[i] - applied).norm());
        }
        for (i, &x) in op.interior().iter().enumerate() {
            k[x] = sol[i];
        }
    }
    let eu = u.exp();
    let values = (0..n)
        .map(|x| {
            let s: Complex64 = chain.row(x).iter().map(|&(z, p)| k[z] * p).sum();
            let g = eu * s;
            (g.re, g.im)
        })
        .collect();
    Ok(ComplexLaplace { target: target.clone(), avoid: avoid.clone(), u: (u.re, u.im), values, residual })
}

/// Truncated series `Σ_{t≥1} e^{ut} P[τ^x_I = t ≤ τ^x_J]` by propagating the
/// killed chain forward. Returns the partial sum and the surviving mass
/// weighted by `e^{u t_max}`.
pub fn laplace_series(
    chain: &ChainModel,
    x: usize,
    target: &SubsetMask,
    avoid: &SubsetMask,
    u: f64,
    t_max: usize,
) -> (f64, f64) {
    let killed = target.union(avoid);
    let n = chain.n();
    let mut mu = vec![0.0; n];
    mu[x] = 1.0;
    let mut next = vec![0.0; n];
    let mut sum = 0.0;
    let mut weight = 1.0;
    let growth = u.exp();
    let mut alive = 1.0;
    for t in 1..=t_max {
        next.iter_mut().for_each(|v| *v = 0.0);
        for z in 0..n {
            let m = mu[z];
            if m == 0.0 || (t > 1 && killed.contains(z)) {
                continue;
            }
            for &(y, p) in chain.row(z) {
                next[y] += m * p;
            }
        }
        weight *= growth;
        let hit: f64 = target.iter().map(|y| next[y]).sum();
        sum += weight * hit;
        for y in killed.iter() {
            next[y] = 0.0;
        }
        std::mem::swap(&mut mu, &mut next);
        alive = mu.iter().sum();
        // a target unreachable from x leaves the sum at zero; stop once the
        // surviving weight is negligible in absolute terms as well, or once
        // the mass turns subnormal and stops decaying
        let rest = weight * alive;
        if rest < 1e-18 * sum.abs() || rest < 1e-300 || alive < f64::MIN_POSITIVE {
            return (sum, weight * alive);
        }
    }
    (sum, weight * alive)
}

#[derive(Debug, Clone, Serialize)]
pub struct ConditionedMeanTime {
    /// Values from the derivative system; NaN off the interior or where
    /// the conditioning event is below the floor.
    pub solution: HittingSolution,
    /// Same quantity from the Green's-function double sum.
    pub via_green: Vec<f64>,
    /// Largest relative disagreement between the two.
    pub cross_check: f64,
}

/// `E[τ^x_I | τ^x_I ≤ τ^x_J]` on `(I∪J)^c`, computed twice.
pub fn mean_time_conditioned(chain: &ChainModel, target: &SubsetMask, avoid: &SubsetMask) -> Result<ConditionedMeanTime> {
    mean_time_conditioned_tol(chain, target, avoid, &Tolerances::default())
}

pub fn mean_time_conditioned_tol(
    chain: &ChainModel,
    target: &SubsetMask,
    avoid: &SubsetMask,
    tol: &Tolerances,
) -> Result<ConditionedMeanTime> {
    check_target(chain, target, avoid)?;
    let n = chain.n();
    let killed = target.union(avoid);
    let mut values = vec![f64::NAN; n];
    let mut via_green = vec![f64::NAN; n];
    let mut flagged = Vec::new();
    if killed.is_full() {
        return Ok(ConditionedMeanTime {
            solution: HittingSolution {
                kind: SolutionKind::MeanTime,
                target: target.clone(),
                avoid: avoid.clone(),
                u: 0.0,
                values,
                residual: 0.0,
                trivial: true,
                flagged,
            },
            via_green,
            cross_check: 0.0,
        });
    }
    let op = dirichlet(chain, &killed)?;
    let factor = MFactor::new(&op, 0.0)?;
    let rhs: Vec<f64> = op.interior().iter().map(|&x| chain.flux_into(x, target)).collect();
    let h = factor.solve(&rhs);
    let w = factor.solve(&h);
    let applied = op.apply(&w);
    let residual = (0..h.len()).map(|i| (applied[i] - h[i]).abs()).fold(0.0, f64::max);
    let q = chain.q();
    let mut cross = 0.0f64;
    for (i, &x) in op.interior().iter().enumerate() {
        if h[i] < tol.conditional_floor {
            flagged.push(x);
            continue;
        }
        values[x] = w[i] / h[i];

        // double sum over y ∉ I∪J of
        // Q(y)/Q(x) P[σ^y_x < τ^y_{I∪J}] / P[τ^x_{I∪J} < τ^x_x] · h(y)/h(x)
        let killed_x = killed.with(x);
        let mut escape = chain.flux_into(x, &killed);
        let mut sum = h[i];
        if !killed_x.is_full() {
            let op_x = dirichlet(chain, &killed_x)?;
            let f_x = MFactor::new(&op_x, 0.0)?;
            let to_x: Vec<f64> = op_x.interior().iter().map(|&z| chain.p(z, x)).collect();
            let to_b: Vec<f64> = op_x.interior().iter().map(|&z| chain.flux_into(z, &killed)).collect();
            let reach_x = f_x.solve(&to_x);
            let reach_b = f_x.solve(&to_b);
            for &(z, p) in chain.row(x) {
                if let Some(k) = op_x.position(z) {
                    escape += p * reach_b[k];
                }
            }
            for (k, &y) in op_x.interior().iter().enumerate() {
                let hy = h[op.position(y).expect("interior of the smaller operator")];
                sum += q[y] / q[x] * reach_x[k] * hy;
            }
        }
        let alt = sum / (escape * h[i]);
        via_green[x] = alt;
        cross = cross.max((alt - values[x]).abs() / values[x].abs().max(alt.abs()));
    }
    Ok(ConditionedMeanTime {
        solution: HittingSolution {
            kind: SolutionKind::MeanTime,
            target: target.clone(),
            avoid: avoid.clone(),
            u: 0.0,
            values,
            residual,
            trivial: false,
            flagged,
        },
        via_green,
        cross_check: cross,
    })
}

/// `E[τ^x_I]` on every state outside `I` (NaN on `I`).
pub fn mean_hitting_time(chain: &ChainModel, target: &SubsetMask) -> Result<Vec<f64>> {
    if target.is_empty() {
        return Err(Error::Argument("target set must be nonempty".into()));
    }
    let mut out = vec![f64::NAN; chain.n()];
    if target.is_full() {
        return Ok(out);
    }
    let op = dirichlet(chain, target)?;
    let t = MFactor::new(&op, 0.0)?.solve(&vec![1.0; op.dim()]);
    for (i, &x) in op.interior().iter().enumerate() {
        out[x] = t[i];
    }
    Ok(out)
}

/// `E[τ^x_I]` for any `x`, counting only strictly positive times.
pub fn mean_return_or_hitting_time(chain: &ChainModel, x: usize, target: &SubsetMask) -> Result<f64> {
    let t = mean_hitting_time(chain, target)?;
    if !target.contains(x) {
        return Ok(t[x]);
    }
    Ok(1.0 + chain.row(x).iter().filter(|(z, _)| !target.contains(*z)).map(|&(z, p)| p * t[z]).sum::<f64>())
}

/// `E[τ^x_I 1{τ^x_I ≤ τ^x_J}]` and `P[τ^x_I ≤ τ^x_J]` for any start `x`,
/// strictly positive times.
pub fn restricted_moments(chain: &ChainModel, x: usize, target: &SubsetMask, avoid: &SubsetMask) -> Result<(f64, f64)> {
    check_target(chain, target, avoid)?;
    let killed = target.union(avoid);
    let n = chain.n();
    let mut k: Vec<f64> = (0..n).map(|z| if target.contains(z) { 1.0 } else { 0.0 }).collect();
    let mut w = vec![0.0; n];
    if !killed.is_full() {
        let op = dirichlet(chain, &killed)?;
        let f = MFactor::new(&op, 0.0)?;
        let rhs: Vec<f64> = op.interior().iter().map(|&z| chain.flux_into(z, target)).collect();
        let h = f.solve(&rhs);
        let m = f.solve(&h);
        for (i, &z) in op.interior().iter().enumerate() {
            k[z] = h[i];
            w[z] = m[i];
        }
    }
    let mut prob = 0.0;
    let mut moment = 0.0;
    for &(z, p) in chain.row(x) {
        prob += p * k[z];
        moment += p * (k[z] + w[z]);
    }
    Ok((moment, prob))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum GreenMethod {
    DirectInverse,
    HittingFormula,
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundaryColumn {
    pub y: usize,
    /// `P[τ^x_y = τ^x_{Ω^c}]` indexed like the domain.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GreenMatrix {
    pub domain: SubsetMask,
    pub method: GreenMethod,
    /// Rows and columns indexed by `domain.members()`.
    pub entries: Vec<Vec<f64>>,
    pub boundary: Vec<BoundaryColumn>,
}

impl GreenMatrix {
    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        let i = self.domain.members().binary_search(&x).ok()?;
        let j = self.domain.members().binary_search(&y).ok()?;
        Some(self.entries[i][j])
    }

    /// Worst relative violation of `Q(x)G(x,y) = Q(y)G(y,x)`.
    pub fn symmetry_defect(&self, chain: &ChainModel) -> f64 {
        let m = self.domain.members();
        let q = chain.q();
        let mut worst = 0.0f64;
        for i in 0..m.len() {
            for j in i + 1..m.len() {
                let a = q[m[i]] * self.entries[i][j];
                let b = q[m[j]] * self.entries[j][i];
                let s = a.abs().max(b.abs());
                if s > 0.0 {
                    worst = worst.max((a - b).abs() / s);
                }
            }
        }
        worst
    }
}

/// Green's function of `(1−P)^{Ω^c}` on `Ω` plus its harmonic-measure
/// extension to the outer boundary of `Ω`.
pub fn greens_function(chain: &ChainModel, domain: &SubsetMask, method: GreenMethod) -> Result<GreenMatrix> {
    let outside = domain.complement();
    if outside.is_empty() {
        return Err(Error::Argument("domain complement is empty: no killing".into()));
    }
    if domain.is_empty() {
        return Err(Error::Argument("domain must be nonempty".into()));
    }
    let op = dirichlet(chain, &outside)?;
    let factor = MFactor::new(&op, 0.0)?;
    let members = domain.members();
    let d = members.len();
    let entries = match method {
        GreenMethod::DirectInverse => {
            let inv: DMatrix<f64> = factor.inverse();
            (0..d).map(|i| (0..d).map(|j| inv[(i, j)]).collect()).collect()
        }
        GreenMethod::HittingFormula => {
            let q = chain.q();
            let mut rows = vec![vec![0.0; d]; d];
            for (i, &x) in members.iter().enumerate() {
                let killed_x = outside.with(x);
                let mut reach_x = vec![0.0; chain.n()];
                reach_x[x] = 1.0;
                let mut escape = chain.flux_into(x, &outside);
                if !killed_x.is_full() {
                    let op_x = dirichlet(chain, &killed_x)?;
                    let f_x = MFactor::new(&op_x, 0.0)?;
                    let to_x: Vec<f64> = op_x.interior().iter().map(|&z| chain.p(z, x)).collect();
                    let to_out: Vec<f64> = op_x.interior().iter().map(|&z| chain.flux_into(z, &outside)).collect();
                    let rx = f_x.solve(&to_x);
                    let ro = f_x.solve(&to_out);
                    for (k, &z) in op_x.interior().iter().enumerate() {
                        reach_x[z] = rx[k];
                    }
                    for &(z, p) in chain.row(x) {
                        if let Some(k) = op_x.position(z) {
                            escape += p * ro[k];
                        }
                    }
                }
                for (j, &y) in members.iter().enumerate() {
                    rows[i][j] = q[y] / q[x] * reach_x[y] / escape;
                }
            }
            rows
        }
    };
    let rim = crate::chain::boundary(chain, domain);
    let mut boundary = Vec::with_capacity(rim.len());
    for y in rim.iter() {
        let rhs: Vec<f64> = op.interior().iter().map(|&x| chain.p(x, y)).collect();
        boundary.push(BoundaryColumn { y, values: factor.solve(&rhs) });
    }
    Ok(GreenMatrix { domain: domain.clone(), method, entries, boundary })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct DeltaFactor {
    pub value: f64,
    pub reciprocal: f64,
    /// `Δ(x,y)·Δ(y,x)`, equal to one.
    pub product: f64,
    pub within_bounds: bool,
    /// Set when a probability in a denominator vanished.
    pub degenerate: bool,
}

/// The ratio comparing last-exit decompositions from `x` and from `y`
/// inside `Ω`; it lies in `[1/3, 3]`.
pub fn delta_factor(chain: &ChainModel, domain: &SubsetMask, x: usize, y: usize) -> Result<DeltaFactor> {
    if !domain.contains(x) || !domain.contains(y) {
        return Err(Error::Argument("x and y must lie in the domain".into()));
    }
    let outside = domain.complement();
    if outside.is_empty() {
        return Err(Error::Argument("domain complement is empty".into()));
    }
    if x == y {
        return Ok(DeltaFactor { value: 1.0, reciprocal: 1.0, product: 1.0, within_bounds: true, degenerate: false });
    }
    let ey_out = escape_probability(chain, y, &outside)?;
    let ex_out = escape_probability(chain, x, &outside)?;
    let ex_out_y = escape_probability(chain, x, &outside.with(y))?;
    let ey_out_x = escape_probability(chain, y, &outside.with(x))?;
    let degenerate = ex_out == 0.0 || ey_out_x == 0.0 || ey_out == 0.0 || ex_out_y == 0.0;
    let value = ey_out * ex_out_y / (ex_out * ey_out_x);
    let reciprocal = ex_out * ey_out_x / (ey_out * ex_out_y);
    let eps = 1e-12;
    Ok(DeltaFactor {
        value,
        reciprocal,
        product: value * reciprocal,
        within_bounds: value >= 1.0 / 3.0 - eps && value <= 3.0 + eps,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::landscape::random_reversible;

    fn two_state(p: f64, q: f64) -> ChainModel {
        ChainModel::from_dense(vec![vec![1.0 - p, p], vec![q, 1.0 - q]], None, None).unwrap()
    }

    fn set(n: usize, m: &[usize]) -> SubsetMask {
        SubsetMask::new(n, m.iter().copied()).unwrap()
    }

    #[test]
    fn path_symmetry() {
        let c = ChainModel::from_dense(vec![vec![0.5, 0.5, 0.0], vec![0.5, 0.0, 0.5], vec![0.0, 0.5, 0.5]], None, None)
            .unwrap();
        let h = hitting_probability(&c, &set(3, &[2]), &set(3, &[0])).unwrap();
        assert!((h.values[1] - 0.5).abs() < 1e-15);
        assert_eq!(h.values[2], 1.0);
        assert_eq!(h.values[0], 0.0);
        assert!(h.residual < 1e-14);
        assert!((escape_probability(&c, 1, &set(3, &[0, 2])).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn no_avoid_set_gives_one() {
        let c = random_reversible(12, 0.4, 7);
        let h = hitting_probability(&c, &set(12, &[3]), &SubsetMask::empty(12)).unwrap();
        for v in h.values {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_dense_absorption_oracle() {
        let c = random_reversible(6, 0.6, 11);
        let h = hitting_probability(&c, &set(6, &[5]), &set(6, &[0])).unwrap();
        // oracle: (I − P_int)^{-1} r with a plain dense inverse
        let int = [1, 2, 3, 4];
        let a = DMatrix::from_fn(4, 4, |i, j| if i == j { 1.0 } else { 0.0 } - c.p(int[i], int[j]));
        let r = nalgebra::DVector::from_fn(4, |i, _| c.p(int[i], 5));
        let want = a.try_inverse().unwrap() * r;
        for i in 0..4 {
            assert!((h.values[int[i]] - want[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn two_state_laplace_closed_form() {
        let p = 0.25;
        let c = two_state(p, 0.5);
        let b = set(2, &[1]);
        for u in [-0.3, 0.0, 0.1, 0.2] {
            let g = laplace_transform(&c, &b, &b, u).unwrap();
            let want = p * u.exp() / (1.0 - (1.0 - p) * u.exp());
            assert!((g.values[0] - want).abs() < 1e-13 * want, "u={u}");
        }
        // abscissa: λ_{b} = p
        let bad = -(1.0f64 - p).ln();
        assert!(matches!(laplace_transform(&c, &b, &b, bad), Err(Error::Domain { .. })));
        assert!(matches!(laplace_transform(&c, &b, &b, bad * (1.0 - 1e-12)), Err(Error::Domain { .. })));
    }

    #[test]
    fn laplace_at_zero_is_probability() {
        let c = random_reversible(9, 0.5, 3);
        let (i, j) = (set(9, &[2, 7]), set(9, &[0]));
        let h = hitting_probability(&c, &i, &j).unwrap();
        let g = laplace_transform(&c, &i, &j, 0.0).unwrap();
        for x in [1, 3, 4, 5, 6, 8] {
            assert!((h.values[x] - g.values[x]).abs() < 1e-14);
        }
    }

    #[test]
    fn laplace_matches_forward_series() {
        let c = random_reversible(6, 0.7, 21);
        let (i, j) = (set(6, &[5]), set(6, &[0]));
        let a = Abscissa::of(&c, &i.union(&j)).unwrap();
        let u = a.u / 2.0;
        let g = laplace_transform(&c, &i, &j, u).unwrap();
        for x in 0..6 {
            let (s, tail) = laplace_series(&c, x, &i, &j, u, 1_000_000);
            assert!(tail < 1e-12);
            assert!((s - g.values[x]).abs() <= 1e-8 * g.values[x].abs().max(1e-300), "x={x}: {s} vs {}", g.values[x]);
        }
    }

    #[test]
    fn complex_transform_reduces_to_real() {
        let c = random_reversible(7, 0.5, 5);
        let (i, j) = (set(7, &[6]), set(7, &[0]));
        let real = laplace_transform(&c, &i, &j, 0.01).unwrap();
        let cplx = laplace_transform_complex(&c, &i, &j, Complex64::new(0.01, 0.0), &Tolerances::default()).unwrap();
        for x in 0..7 {
            assert!((cplx.values[x].0 - real.values[x]).abs() < 1e-12);
            assert!(cplx.values[x].1.abs() < 1e-14);
        }
        // two-state: closed form with complex argument
        let p = 0.25;
        let c = two_state(p, 0.5);
        let b = set(2, &[1]);
        let u = Complex64::new(0.05, 2.0);
        let g = laplace_transform_complex(&c, &b, &b, u, &Tolerances::default()).unwrap();
        let want = p * u.exp() / (1.0 - (1.0 - p) * u.exp());
        assert!((Complex64::new(g.values[0].0, g.values[0].1) - want).norm() < 1e-13);
        assert!(laplace_transform_complex(&c, &b, &b, Complex64::new(0.0, 3.5), &Tolerances::default()).is_err());
    }

    #[test]
    fn mean_times_two_ways() {
        let c = two_state(0.25, 0.5);
        let m = mean_time_conditioned(&c, &set(2, &[1]), &SubsetMask::empty(2)).unwrap();
        assert!((m.solution.values[0] - 4.0).abs() < 1e-13);

        let c = random_reversible(10, 0.4, 9);
        let (i, j) = (set(10, &[9]), set(10, &[0, 4]));
        let m = mean_time_conditioned(&c, &i, &j).unwrap();
        assert!(m.cross_check < 1e-8, "{}", m.cross_check);

        // unconditioned: fundamental matrix oracle
        let m = mean_time_conditioned(&c, &i, &SubsetMask::empty(10)).unwrap();
        let a = DMatrix::from_fn(9, 9, |r, s| if r == s { 1.0 } else { 0.0 } - c.p(r, s));
        let t = a.try_inverse().unwrap() * nalgebra::DVector::from_element(9, 1.0);
        for x in 0..9 {
            assert!((m.solution.values[x] - t[x]).abs() < 1e-10 * t[x]);
        }
    }

    #[test]
    fn green_two_methods_and_symmetry() {
        let c = two_state(0.25, 0.5);
        let dom = set(2, &[0]);
        for method in [GreenMethod::DirectInverse, GreenMethod::HittingFormula] {
            let g = greens_function(&c, &dom, method).unwrap();
            assert!((g.entries[0][0] - 4.0).abs() < 1e-14);
        }
        let c = random_reversible(6, 0.6, 2);
        let dom = set(6, &[1, 2, 3, 4]);
        let a = greens_function(&c, &dom, GreenMethod::DirectInverse).unwrap();
        let b = greens_function(&c, &dom, GreenMethod::HittingFormula).unwrap();
        let oracle = dirichlet(&c, &dom.complement()).unwrap().matrix().try_inverse().unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert!((a.entries[i][j] - b.entries[i][j]).abs() <= 1e-10 * a.entries[i][j]);
                assert!((a.entries[i][j] - oracle[(i, j)]).abs() <= 1e-10 * a.entries[i][j]);
            }
        }
        assert!(a.symmetry_defect(&c) < 1e-10);
        assert!(b.symmetry_defect(&c) < 1e-10);
    }

    #[test]
    fn delta_factor_basics() {
        let c = random_reversible(8, 0.5, 4);
        let dom = set(8, &[0, 1, 2, 3, 4, 5]);
        assert_eq!(delta_factor(&c, &dom, 2, 2).unwrap().value, 1.0);
        let d = delta_factor(&c, &dom, 1, 4).unwrap();
        assert!((d.product - 1.0).abs() < 1e-10);
        assert!(d.within_bounds);
    }
}
