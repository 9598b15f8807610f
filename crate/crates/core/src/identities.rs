//! Exact identities between hitting quantities, each evaluated from
//! independent solves: path decompositions, first-step relations, the
//! renewal equation, reversibility, Green's-function representations and
//! the generating function of the survival series.

use num_complex::Complex64;
use serde::Serialize;

use crate::chain::{dirichlet, ChainModel};
use crate::config::Tolerances;
use crate::error::{Error, Result};
use crate::hitting::{
    greens_function, laplace_parts, laplace_series, laplace_transform_complex, return_complement, shift_of, Abscissa,
    GreenMethod, LaplaceParts,
};
use crate::linalg::ResolventSolver;
use crate::subset::SubsetMask;

/// Smallest magnitude treated as a meaningful value in relative residuals.
const FLOOR: f64 = 1e-280;

/// One identity evaluated on one chain.
#[derive(Debug, Clone, Serialize)]
pub struct IdentityCheck {
    pub name: &'static str,
    /// Largest relative (or normwise) disagreement between the two sides.
    pub residual: f64,
    /// Number of scalar comparisons made.
    pub compared: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct IdentityReport {
    pub target: SubsetMask,
    pub avoid: SubsetMask,
    pub split: SubsetMask,
    pub u: f64,
    /// Principal eigenvalue of the operator killed on the target.
    pub principal: f64,
    pub checks: Vec<IdentityCheck>,
}

impl IdentityReport {
    pub fn max_residual(&self) -> f64 {
        self.checks.iter().map(|c| c.residual).fold(0.0, f64::max)
    }

    pub fn get(&self, name: &str) -> Option<&IdentityCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Normwise disagreement `‖a − b‖∞ / max(‖a‖∞, ‖b‖∞)`.
fn normwise(a: &[f64], b: &[f64]) -> f64 {
    let mut diff = 0.0f64;
    let mut size = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        diff = diff.max((x - y).abs());
        size = size.max(x.abs()).max(y.abs());
    }
    if size < FLOOR {
        0.0
    } else {
        diff / size
    }
}

fn relative(a: f64, b: f64) -> f64 {
    let s = a.abs().max(b.abs());
    if s < FLOOR {
        0.0
    } else {
        (a - b).abs() / s
    }
}

/// Solves at a common shift whose killed sets all contain `I`, so the
/// principal eigenvalue of `(1−P)^I` bounds every resolvent from below.
struct Solves<'a> {
    chain: &'a ChainModel,
    lambda: f64,
    principal: f64,
}

impl Solves<'_> {
    fn parts(&self, target: &SubsetMask, avoid: &SubsetMask) -> Result<LaplaceParts> {
        if target.is_empty() {
            let n = self.chain.n();
            return Ok(LaplaceParts { k: vec![0.0; n], g: vec![0.0; n], residual: 0.0, trivial: true });
        }
        laplace_parts(self.chain, target, avoid, self.lambda, Some(self.principal))
    }
}

/// Checks the exact identity suite for targets `I`, avoided set `J`,
/// intermediate set `L` and real Laplace argument `u`, which must lie
/// below the convergence abscissa of `(1−P)^I`.
pub fn verify_identities(
    chain: &ChainModel,
    target: &SubsetMask,
    avoid: &SubsetMask,
    split: &SubsetMask,
    u: f64,
    tol: &Tolerances,
) -> Result<IdentityReport> {
    let n = chain.n();
    if target.is_empty() || target.is_full() {
        return Err(Error::Argument("identity target must be a nonempty proper subset".into()));
    }
    let abscissa = Abscissa::of(chain, target)?;
    abscissa.admit(u, tol.abscissa_margin)?;
    let lambda = shift_of(u);
    let s = Solves { chain, lambda, principal: abscissa.lambda };
    let mut checks = Vec::new();

    let base = s.parts(target, avoid)?;
    let killed = target.union(avoid);

    // path decomposition at the first visit to L
    {
        let wide = killed.union(split);
        let first = s.parts(&target.difference(split), &avoid.union(split))?;
        let mut rhs = first.g.clone();
        for y in split.iter() {
            let via = s.parts(&SubsetMask::singleton(n, y)?, &wide)?;
            for x in 0..n {
                rhs[x] += via.g[x] * base.k[y];
            }
        }
        checks.push(IdentityCheck { name: "strong-markov-decomposition", residual: normwise(&base.g, &rhs), compared: n });
    }

    // positive-time transform from the first step against the forward series
    {
        let interior: Vec<usize> = killed.complement().members().to_vec();
        let k_in: Vec<f64> = interior.iter().map(|&x| base.k[x]).collect();
        let g_in: Vec<f64> = interior.iter().map(|&x| base.g[x]).collect();
        let mut res = normwise(&k_in, &g_in);
        let mut compared = interior.len();
        // the forward series is only summed when it fits under the step cap
        if Abscissa::of(chain, &killed)?.series_length(u) <= SERIES_CAP as f64 {
            let mut series = vec![0.0; n];
            let mut tail = 0.0f64;
            for (x, slot) in series.iter_mut().enumerate() {
                let (sum, rest) = laplace_series(chain, x, target, avoid, u, SERIES_CAP);
                *slot = sum;
                tail = tail.max(rest);
            }
            res = res.max(normwise(&base.g, &series));
            let scale = series.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(FLOOR);
            if tail > 1e-12 * scale {
                res = res.max(tail / scale);
            }
            compared += n;
        }
        checks.push(IdentityCheck { name: "first-step-transform", residual: res, compared });
    }

    // derivative system against a complex-step derivative
    if !killed.is_full() {
        let op = dirichlet(chain, &killed)?;
        let solver = ResolventSolver::new(&op, lambda, Some(abscissa.lambda))?;
        let scale = (-u).exp();
        let rhs: Vec<f64> = op.interior().iter().map(|&x| scale * base.g[x]).collect();
        let d = solver.solve(&rhs)?;
        let h = 1e-20 * u.abs().max(1.0);
        let cs = laplace_transform_complex(chain, target, avoid, Complex64::new(u, h), tol)?;
        let fd: Vec<f64> = op.interior().iter().map(|&x| cs.values[x].1 / h).collect();
        checks.push(IdentityCheck { name: "derivative-system", residual: normwise(&d, &fd), compared: d.len() });
    }

    // renewal equation through each y in L (J when L is empty)
    {
        let pivots: Vec<usize> = if split.is_empty() { avoid.members().to_vec() } else { split.members().to_vec() };
        let mut res = 0.0f64;
        let mut compared = 0;
        for &y in pivots.iter().take(RENEWAL_PIVOTS) {
            let ys = SubsetMask::singleton(n, y)?;
            let lhs = s.parts(&ys, target)?;
            for x in 0..n {
                if x == y || target.contains(x) {
                    continue;
                }
                let num = s.parts(&ys, &target.with(x))?.g[x];
                let den = return_complement(chain, x, &target.with(y), lambda, Some(abscissa.lambda))?;
                res = res.max(relative(lhs.g[x], num / den));
                compared += 1;
            }
        }
        checks.push(IdentityCheck { name: "renewal-equation", residual: res, compared });
    }

    // reversibility of first-passage transforms
    {
        let mut probes: Vec<usize> = avoid.union(split).difference(target).members().to_vec();
        for x in target.complement().iter() {
            if probes.len() >= REVERSIBILITY_PROBES {
                break;
            }
            if !probes.contains(&x) {
                probes.push(x);
            }
        }
        probes.sort_unstable();
        let q = chain.q();
        let mut res = 0.0f64;
        let mut compared = 0;
        for (a, &x) in probes.iter().enumerate() {
            for &y in &probes[a + 1..] {
                let xy = s.parts(&SubsetMask::singleton(n, y)?, &target.with(x))?.g[x];
                let yx = s.parts(&SubsetMask::singleton(n, x)?, &target.with(y))?.g[y];
                res = res.max(relative(q[x] * xy, q[y] * yx));
                compared += 1;
            }
        }
        checks.push(IdentityCheck { name: "reversibility", residual: res, compared });
    }

    checks.extend(green_identities(chain, &target.complement())?);

    // generating function of the survival series
    {
        let mut res = 0.0f64;
        let mut compared = 0;
        let feasible = abscissa.series_length(u) <= SERIES_CAP as f64;
        let starts: Vec<usize> =
            target.complement().iter().take(if feasible { GENERATING_STARTS } else { 0 }).collect();
        let closed = s.parts(target, target)?;
        for &x in &starts {
            let lhs = if u == 0.0 {
                crate::hitting::mean_hitting_time(chain, target)?[x]
            } else {
                (closed.g[x] - 1.0) / u.exp_m1()
            };
            let (sum, tail) = crate::exit_law::survival_generating(chain, x, target, u, SERIES_CAP)?;
            let mut r = relative(lhs, sum);
            if tail > 1e-12 * sum.abs() {
                r = r.max(tail / sum.abs());
            }
            res = res.max(r);
            compared += 1;
        }
        checks.push(IdentityCheck { name: "survival-generating-function", residual: res, compared });
    }

    Ok(IdentityReport {
        target: target.clone(),
        avoid: avoid.clone(),
        split: split.clone(),
        u,
        principal: abscissa.lambda,
        checks,
    })
}

/// Step cap for forward series.
const SERIES_CAP: usize = 5_000_000;
const RENEWAL_PIVOTS: usize = 3;
const REVERSIBILITY_PROBES: usize = 8;
const GENERATING_STARTS: usize = 4;

/// Green's-function identities on a domain `Ω` with nonempty complement:
/// the hitting representation against the direct inverse, its extension to
/// the outer boundary, and the fundamental-solution relations.
pub fn green_identities(chain: &ChainModel, domain: &SubsetMask) -> Result<Vec<IdentityCheck>> {
    let n = chain.n();
    let outside = domain.complement();
    let q = chain.q();
    let direct = greens_function(chain, domain, GreenMethod::DirectInverse)?;
    let formula = greens_function(chain, domain, GreenMethod::HittingFormula)?;
    let members = domain.members();
    let d = members.len();
    let mut rep = 0.0f64;
    for i in 0..d {
        for j in 0..d {
            rep = rep.max(relative(direct.entries[i][j], formula.entries[i][j]));
        }
    }
    let mut out = vec![IdentityCheck { name: "green-hitting-representation", residual: rep, compared: d * d }];

    let op = dirichlet(chain, &outside)?;
    let norm_a = op.matrix().row_iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
    let mut ext = 0.0f64;
    let mut ext_count = 0;
    let mut fund = 0.0f64;
    let mut sym = 0.0f64;
    for (i, &x) in members.iter().enumerate() {
        // K_{x,Ω^c}(0) on every state, together with the escape probability of x
        let xs = SubsetMask::singleton(n, x)?;
        let k = laplace_parts(chain, &xs, &outside, 0.0, None)?.k;
        let escape = return_complement(chain, x, &outside, 0.0, None)?;

        let v: Vec<f64> = members.iter().map(|&y| k[y]).collect();
        let applied = op.apply(&v);
        let mut r = 0.0f64;
        for (j, &y) in members.iter().enumerate() {
            let want = if y == x { escape } else { 0.0 };
            r = r.max((applied[j] - want).abs());
        }
        let vnorm = v.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        fund = fund.max(r / (norm_a * vnorm + escape));

        for (j, &y) in members.iter().enumerate() {
            sym = sym.max(relative(q[x] * escape * direct.entries[i][j], q[y] * k[y]));
        }

        for col in &direct.boundary {
            let y = col.y;
            // P[σ^y_x < τ^y_{Ω^c}] for y outside Ω from its first step
            let reach: f64 = chain.row(y).iter().filter(|(z, _)| domain.contains(*z)).map(|&(z, p)| p * k[z]).sum();
            let via_formula = q[y] / q[x] * reach / escape;
            ext = ext.max(relative(via_formula, col.values[i]));
            ext_count += 1;
        }
    }
    out.push(IdentityCheck { name: "green-boundary-extension", residual: ext, compared: ext_count });
    out.push(IdentityCheck { name: "fundamental-solution", residual: fund, compared: d * d });
    out.push(IdentityCheck { name: "fundamental-solution-symmetry", residual: sym, compared: d * d });
    Ok(out)
}

/// Empirical constant of the strip estimate: for real `0 < u ≤ width`,
/// `|∂^k G(u) / ∂^k G(0) − 1| ≤ C·u·scale` for `k = 0, 1`; returns the
/// largest `C` over a geometric sample of `u` and all states.
pub fn strip_constant(
    chain: &ChainModel,
    target: &SubsetMask,
    avoid: &SubsetMask,
    width: f64,
    scale: f64,
    tol: &Tolerances,
) -> Result<f64> {
    let killed = target.union(avoid);
    let abscissa = Abscissa::of(chain, &killed)?;
    let top = width.min(0.5 * abscissa.u);
    let n = chain.n();
    let at = |u: f64| -> Result<(Vec<f64>, Vec<f64>)> {
        let h = 1e-20 * u.abs().max(1.0);
        let c = laplace_transform_complex(chain, target, avoid, Complex64::new(u, h), tol)?;
        Ok((c.values.iter().map(|v| v.0).collect(), c.values.iter().map(|v| v.1 / h).collect()))
    };
    let (g0, d0) = at(0.0)?;
    let mut worst = 0.0f64;
    for step in 0..8 {
        let u = top * 0.5f64.powi(step);
        let (g, dg) = at(u)?;
        for x in 0..n {
            for (a, b) in [(g[x], g0[x]), (dg[x], d0[x])] {
                if b.abs() > FLOOR {
                    worst = worst.max((a / b - 1.0).abs() / (u * scale));
                }
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::landscape::{random_reversible, PotentialSpec};

    fn run(chain: &ChainModel, i: &[usize], j: &[usize], l: &[usize], frac: f64) -> IdentityReport {
        let n = chain.n();
        let (i, j, l) = (SubsetMask::new(n, i.iter().copied()).unwrap(), SubsetMask::new(n, j.iter().copied()).unwrap(), SubsetMask::new(n, l.iter().copied()).unwrap());
        let u = frac * Abscissa::of(chain, &i).unwrap().u;
        verify_identities(chain, &i, &j, &l, u, &Tolerances::default()).unwrap()
    }

    #[test]
    fn identities_hold_on_random_chains() {
        for seed in 0..10 {
            let c = random_reversible(10, 0.3, seed);
            for frac in [0.0, 0.5, -1.0] {
                let r = run(&c, &[0, 3], &[7], &[2, 5], frac);
                for chk in &r.checks {
                    assert!(chk.residual <= 1e-9, "seed {seed} u {frac}: {} = {:e}", chk.name, chk.residual);
                }
            }
        }
    }

    #[test]
    fn identities_hold_on_double_well() {
        let c = PotentialSpec::preset(1, 16, "double_well", &[]).build().unwrap();
        let r = run(&c, &[4], &[12], &[8], 0.5);
        for chk in &r.checks {
            assert!(chk.residual <= 1e-9, "{} = {:e}", chk.name, chk.residual);
        }
    }
}
