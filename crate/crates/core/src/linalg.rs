//! Linear solvers for killed generators.
//!
//! A Dirichlet operator `(1−P)^B` is an M-matrix whose diagonal equals the
//! off-diagonal row mass plus the killing rate. Gaussian elimination that
//! recomputes each pivot from the remaining row mass never subtracts, so
//! solutions with nonnegative data keep full componentwise relative
//! accuracy even when the operator is nearly singular. Negative shifts are
//! absorbed as extra killing; positive shifts below the principal
//! eigenvalue are handled by iterating the unshifted resolvent, and shifts
//! close to it fall back to partial-pivoting LU with one refinement step.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::chain::DirichletOperator;
use crate::error::{Error, Result};

/// Subtraction-free factorisation of `(1−P)^B + κ` for `κ ≥ 0`.
#[derive(Debug, Clone)]
pub struct MFactor {
    n: usize,
    /// Row-major: strictly lower part holds multipliers, strictly upper
    /// part the eliminated off-diagonal weights.
    w: Vec<f64>,
    pivot: Vec<f64>,
}

impl MFactor {
    pub fn new(op: &DirichletOperator<'_>, extra_killing: f64) -> Result<Self> {
        if extra_killing < 0.0 {
            return Err(Error::Argument("extra killing must be nonnegative".into()));
        }
        let chain = op.chain();
        let n = op.dim();
        let mut w = vec![0.0; n * n];
        let mut kill = vec![0.0; n];
        for (k, &x) in op.interior().iter().enumerate() {
            let mut kx = extra_killing;
            for &(y, p) in chain.row(x) {
                if y == x {
                    continue;
                }
                match op.position(y) {
                    Some(l) => w[k * n + l] = p,
                    None => kx += p,
                }
            }
            kill[k] = kx;
        }
        let mut pivot = vec![0.0; n];
        for p in 0..n {
            let (head, tail) = w.split_at_mut((p + 1) * n);
            let row_p = &head[p * n..];
            let d: f64 = row_p[p + 1..].iter().sum::<f64>() + kill[p];
            if !(d > 0.0) {
                return Err(Error::Numerical(format!(
                    "zero pivot at interior state {}: killed set unreachable",
                    op.interior()[p]
                )));
            }
            pivot[p] = d;
            let kp = kill[p];
            for (r, row_i) in tail.chunks_exact_mut(n).enumerate() {
                let i = p + 1 + r;
                let wip = row_i[p];
                if wip == 0.0 {
                    continue;
                }
                let f = wip / d;
                row_i[p] = f;
                for j in p + 1..n {
                    row_i[j] += f * row_p[j];
                }
                row_i[i] = 0.0;
                kill[i] += f * kp;
            }
        }
        Ok(Self { n, w, pivot })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut b = rhs.to_vec();
        for p in 0..n {
            let bp = b[p];
            if bp == 0.0 {
                continue;
            }
            for i in p + 1..n {
                let f = self.w[i * n + p];
                if f != 0.0 {
                    b[i] += f * bp;
                }
            }
        }
        let mut x = vec![0.0; n];
        for p in (0..n).rev() {
            let row = &self.w[p * n..(p + 1) * n];
            let mut s = b[p];
            for j in p + 1..n {
                s += row[j] * x[j];
            }
            x[p] = s / self.pivot[p];
        }
        x
    }

    /// Diagonal of the inverse.
    pub fn inverse_diagonal(&self) -> Vec<f64> {
        let mut e = vec![0.0; self.n];
        (0..self.n)
            .map(|k| {
                e[k] = 1.0;
                let v = self.solve(&e)[k];
                e[k] = 0.0;
                v
            })
            .collect()
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        let mut e = vec![0.0; self.n];
        for k in 0..self.n {
            e[k] = 1.0;
            let col = self.solve(&e);
            e[k] = 0.0;
            for (i, v) in col.into_iter().enumerate() {
                m[(i, k)] = v;
            }
        }
        m
    }
}

/// Ratio `λ/λ_B` above which the resolvent iteration is abandoned for LU.
const NEUMANN_LIMIT: f64 = 0.95;

#[derive(Debug, Clone)]
enum Method {
    Direct(MFactor),
    Neumann(MFactor, usize),
    Lu(nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>, DMatrix<f64>),
}

/// Solver for `((1−P)^B − λ) x = b` with `λ` below the principal eigenvalue
/// `λ_B` of `(1−P)^B`.
#[derive(Debug, Clone)]
pub struct ResolventSolver {
    lambda: f64,
    method: Method,
}

impl ResolventSolver {
    /// `principal` is required when `lambda > 0`.
    pub fn new(op: &DirichletOperator<'_>, lambda: f64, principal: Option<f64>) -> Result<Self> {
        if lambda <= 0.0 {
            return Ok(Self { lambda, method: Method::Direct(MFactor::new(op, -lambda)?) });
        }
        let lb = principal
            .ok_or_else(|| Error::Argument("positive shift requires the principal eigenvalue".into()))?;
        Self::shifted(op, None, lambda, lb)
    }

    /// Positive shift reusing an unshifted factorisation of the same operator.
    pub fn with_factor(op: &DirichletOperator<'_>, factor: MFactor, lambda: f64, principal: f64) -> Result<Self> {
        if lambda <= 0.0 {
            return Self::new(op, lambda, None);
        }
        Self::shifted(op, Some(factor), lambda, principal)
    }

    fn shifted(op: &DirichletOperator<'_>, factor: Option<MFactor>, lambda: f64, lb: f64) -> Result<Self> {
        if lambda >= lb {
            return Err(Error::Domain { u: -(-lambda).ln_1p(), abscissa: -(-lb).ln_1p(), lambda: lb });
        }
        let method = if lambda <= NEUMANN_LIMIT * lb {
            // contraction factor λ/λ_B; enough sweeps to pass machine precision
            let sweeps = (40.0 / (lb / lambda).ln()).ceil() as usize + 4;
            let f = match factor {
                Some(f) => f,
                None => MFactor::new(op, 0.0)?,
            };
            Method::Neumann(f, sweeps)
        } else {
            let mut a = op.matrix();
            for k in 0..a.nrows() {
                a[(k, k)] -= lambda;
            }
            Method::Lu(a.clone().lu(), a)
        };
        Ok(Self { lambda, method })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        match &self.method {
            Method::Direct(f) => Ok(f.solve(b)),
            Method::Neumann(f, sweeps) => {
                let mut x = f.solve(b);
                let mut rhs = vec![0.0; b.len()];
                for _ in 0..*sweeps {
                    for k in 0..b.len() {
                        rhs[k] = b[k] + self.lambda * x[k];
                    }
                    let next = f.solve(&rhs);
                    let mut change = 0.0f64;
                    let mut size = 0.0f64;
                    for k in 0..b.len() {
                        change = change.max((next[k] - x[k]).abs());
                        size = size.max(next[k].abs());
                    }
                    x = next;
                    if change <= f64::EPSILON * size {
                        break;
                    }
                }
                Ok(x)
            }
            Method::Lu(lu, a) => {
                let bv = nalgebra::DVector::from_column_slice(b);
                let mut x = lu
                    .solve(&bv)
                    .ok_or_else(|| Error::Numerical("singular shifted operator".into()))?;
                let r = &bv - a * &x;
                if let Some(dx) = lu.solve(&r) {
                    x += dx;
                }
                Ok(x.iter().copied().collect())
            }
        }
    }
}

/// Complex shifted solve by LU with one refinement step.
pub fn solve_complex(op: &DirichletOperator<'_>, lambda: Complex64, b: &[Complex64]) -> Result<Vec<Complex64>> {
    let n = op.dim();
    let real = op.matrix();
    let a = DMatrix::from_fn(n, n, |i, j| {
        let v = Complex64::new(real[(i, j)], 0.0);
        if i == j {
            v - lambda
        } else {
            v
        }
    });
    let lu = a.clone().lu();
    let bv = nalgebra::DVector::from_column_slice(b);
    let mut x = lu
        .solve(&bv)
        .ok_or_else(|| Error::Numerical("singular complex shifted operator".into()))?;
    let r = &bv - &a * &x;
    if let Some(dx) = lu.solve(&r) {
        x += dx;
    }
    Ok(x.iter().copied().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{dirichlet, ChainModel};
    use crate::subset::SubsetMask;

    fn chain() -> ChainModel {
        // conductance chain on 5 states
        let c = [
            [0.5, 1.0, 0.0, 0.2, 0.0],
            [1.0, 0.1, 2.0, 0.0, 0.0],
            [0.0, 2.0, 0.3, 0.5, 0.1],
            [0.2, 0.0, 0.5, 0.0, 1e-6],
            [0.0, 0.0, 0.1, 1e-6, 0.4],
        ];
        let p = c
            .iter()
            .map(|r| {
                let s: f64 = r.iter().sum();
                r.iter().map(|v| v / s).collect()
            })
            .collect();
        ChainModel::from_dense(p, None, None).unwrap()
    }

    #[test]
    fn factor_matches_dense_inverse() {
        let c = chain();
        let op = dirichlet(&c, &SubsetMask::new(5, [4]).unwrap()).unwrap();
        let f = MFactor::new(&op, 0.0).unwrap();
        let inv = op.matrix().try_inverse().unwrap();
        let g = f.inverse();
        for i in 0..4 {
            for j in 0..4 {
                assert!((g[(i, j)] - inv[(i, j)]).abs() <= 1e-9 * inv[(i, j)].abs());
            }
        }
    }

    #[test]
    fn shifted_methods_agree() {
        let c = chain();
        let op = dirichlet(&c, &SubsetMask::new(5, [0]).unwrap()).unwrap();
        let a = op.matrix();
        let lb = op.symmetrized().symmetric_eigenvalues().min();
        let b = vec![0.3, 0.0, 1.0, 0.2];
        for frac in [-0.5, 0.3, 0.97] {
            let lam = frac * lb;
            let s = ResolventSolver::new(&op, lam, Some(lb)).unwrap();
            let x = s.solve(&b).unwrap();
            let mut m = a.clone();
            for k in 0..4 {
                m[(k, k)] -= lam;
            }
            let want = m.lu().solve(&nalgebra::DVector::from_vec(b.clone())).unwrap();
            for k in 0..4 {
                assert!((x[k] - want[k]).abs() <= 1e-9 * want[k].abs(), "{frac}: {} vs {}", x[k], want[k]);
            }
        }
        assert!(ResolventSolver::new(&op, lb * 1.01, Some(lb)).is_err());
    }
}
