//! Finite reversible Markov chains, their validation and Dirichlet restrictions.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::config::Tolerances;
use crate::error::{Error, Result};
use crate::subset::SubsetMask;

/// Transition rows are kept sparse (sorted by column, zeros dropped) so that
/// trajectory sampling and survival iteration cost O(edges); dense matrices
/// are materialised on demand by the solvers.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainModel {
    labels: Option<Vec<String>>,
    rows: Vec<Vec<(usize, f64)>>,
    q: Vec<f64>,
}

impl ChainModel {
    /// Build from a dense matrix. Without `q` the stationary measure is
    /// computed. Only structural and data errors are raised here; call
    /// [`ChainModel::validate`] for the reversibility invariants.
    pub fn from_dense(p: Vec<Vec<f64>>, q: Option<Vec<f64>>, labels: Option<Vec<String>>) -> Result<Self> {
        let n = p.len();
        for (i, row) in p.iter().enumerate() {
            if row.len() != n {
                return Err(Error::Structural(format!("row {i} has {} entries, expected {n}", row.len())));
            }
        }
        let rows = p
            .iter()
            .map(|row| row.iter().enumerate().filter(|(_, &v)| v != 0.0).map(|(j, &v)| (j, v)).collect())
            .collect();
        Self::from_rows(n, rows, q, labels)
    }

    /// Build from sparse rows of `(column, probability)` pairs.
    pub fn from_rows(
        n: usize,
        mut rows: Vec<Vec<(usize, f64)>>,
        q: Option<Vec<f64>>,
        labels: Option<Vec<String>>,
    ) -> Result<Self> {
        if n < 2 {
            return Err(Error::Structural(format!("need at least 2 states, got {n}")));
        }
        if rows.len() != n {
            return Err(Error::Structural(format!("{} rows for {n} states", rows.len())));
        }
        for (i, row) in rows.iter_mut().enumerate() {
            row.sort_by_key(|&(j, _)| j);
            for w in row.windows(2) {
                if w[0].0 == w[1].0 {
                    return Err(Error::Structural(format!("duplicate entry ({i},{})", w[0].0)));
                }
            }
            for &(j, v) in row.iter() {
                if j >= n {
                    return Err(Error::Structural(format!("entry ({i},{j}) out of range")));
                }
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::Data(format!("P({i},{j}) = {v}")));
                }
            }
            row.retain(|&(_, v)| v > 0.0);
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::Structural(format!("{} labels for {n} states", l.len())));
            }
        }
        let q = match q {
            Some(q) => {
                if q.len() != n {
                    return Err(Error::Structural(format!("Q has {} entries, expected {n}", q.len())));
                }
                if let Some((i, v)) = q.iter().enumerate().find(|(_, v)| !v.is_finite() || **v < 0.0) {
                    return Err(Error::Data(format!("Q({i}) = {v}")));
                }
                q
            }
            None => stationary_measure(&dense_from_rows(n, &rows))?,
        };
        Ok(Self { labels, rows, q })
    }

    /// Build and reject anything that fails validation.
    pub fn validated(self, tol: &Tolerances) -> Result<Self> {
        let report = self.validate(tol);
        if report.is_valid() {
            Ok(self)
        } else {
            let msgs: Vec<String> = report.violations.iter().map(|v| v.to_string()).collect();
            Err(Error::Invariant(msgs.join("; ")))
        }
    }

    pub fn n(&self) -> usize {
        self.q.len()
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    pub fn label(&self, x: usize) -> String {
        match &self.labels {
            Some(l) => l[x].clone(),
            None => x.to_string(),
        }
    }

    /// Resolve a label or a plain index.
    pub fn state_index(&self, key: &str) -> Result<usize> {
        if let Some(l) = &self.labels {
            if let Some(i) = l.iter().position(|s| s == key) {
                return Ok(i);
            }
        }
        match key.trim().parse::<usize>() {
            Ok(i) if i < self.n() => Ok(i),
            _ => Err(Error::Argument(format!("unknown state '{key}'"))),
        }
    }

    pub fn row(&self, x: usize) -> &[(usize, f64)] {
        &self.rows[x]
    }

    pub fn p(&self, x: usize, y: usize) -> f64 {
        let row = &self.rows[x];
        match row.binary_search_by_key(&y, |&(j, _)| j) {
            Ok(k) => row[k].1,
            Err(_) => 0.0,
        }
    }

    /// Probability of leaving `x` in one step, summed from the off-diagonal
    /// entries so that `1 − P(x,x)` is never formed by subtraction.
    pub fn leave_rate(&self, x: usize) -> f64 {
        self.rows[x].iter().filter(|&&(j, _)| j != x).map(|&(_, v)| v).sum()
    }

    /// One-step probability of moving from `x` into `set`.
    pub fn flux_into(&self, x: usize, set: &SubsetMask) -> f64 {
        self.rows[x].iter().filter(|&&(j, _)| set.contains(j)).map(|&(_, v)| v).sum()
    }

    pub fn dense_p(&self) -> DMatrix<f64> {
        dense_from_rows(self.n(), &self.rows)
    }

    pub fn edge_count(&self) -> usize {
        self.rows.iter().map(|r| r.len()).sum()
    }

    pub fn validate(&self, tol: &Tolerances) -> ValidationReport {
        let n = self.n();
        let mut violations = Vec::new();

        let mut max_row = 0.0f64;
        let mut worst_row = 0;
        let mut worst_sum = 1.0;
        for (i, row) in self.rows.iter().enumerate() {
            let s: f64 = row.iter().map(|&(_, v)| v).sum();
            let e = (s - 1.0).abs();
            if e > max_row {
                max_row = e;
                worst_row = i;
                worst_sum = s;
            }
        }
        if max_row > tol.row_sum {
            violations.push(Violation {
                invariant: Invariant::RowSums,
                detail: format!("row {worst_row} sums to 1 {:+.3e}", worst_sum - 1.0),
                worst: max_row,
            });
        }

        let mut max_db = 0.0f64;
        let mut worst_pair = (0, 0);
        for x in 0..n {
            for &(y, pxy) in &self.rows[x] {
                if y == x {
                    continue;
                }
                let a = self.q[x] * pxy;
                let b = self.q[y] * self.p(y, x);
                let e = (a - b).abs() / a.abs().max(b.abs());
                if e > max_db {
                    max_db = e;
                    worst_pair = (x, y);
                }
            }
        }
        if max_db > tol.detailed_balance {
            violations.push(Violation {
                invariant: Invariant::DetailedBalance,
                detail: format!(
                    "Q({a})P({a},{b}) vs Q({b})P({b},{a}) relative error {max_db:.3e}",
                    a = worst_pair.0,
                    b = worst_pair.1
                ),
                worst: max_db,
            });
        }

        let total: f64 = self.q.iter().sum();
        let measure_err = (total - 1.0).abs();
        let min_q = self.q.iter().cloned().fold(f64::INFINITY, f64::min);
        if min_q <= 0.0 {
            violations.push(Violation {
                invariant: Invariant::PositiveMeasure,
                detail: format!("min Q = {min_q:e}"),
                worst: min_q,
            });
        }
        if measure_err > tol.measure_sum {
            violations.push(Violation {
                invariant: Invariant::MeasureSum,
                detail: format!("Q sums to 1 {:+.3e}", total - 1.0),
                worst: measure_err,
            });
        }

        let connected = strongly_connected(&self.rows);
        if !connected {
            violations.push(Violation {
                invariant: Invariant::Irreducible,
                detail: "transition graph is not strongly connected".into(),
                worst: 1.0,
            });
        }

        ValidationReport {
            n,
            max_row_sum_error: max_row,
            max_detailed_balance_error: max_db,
            measure_sum_error: measure_err,
            min_measure: min_q,
            strongly_connected: connected,
            violations,
        }
    }
}

fn dense_from_rows(n: usize, rows: &[Vec<(usize, f64)>]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    for (i, row) in rows.iter().enumerate() {
        for &(j, v) in row {
            m[(i, j)] = v;
        }
    }
    m
}

fn reachable(n: usize, adj: &[Vec<usize>]) -> usize {
    let mut seen = vec![false; n];
    let mut stack = vec![0];
    seen[0] = true;
    let mut count = 1;
    while let Some(x) = stack.pop() {
        for &y in &adj[x] {
            if !seen[y] {
                seen[y] = true;
                count += 1;
                stack.push(y);
            }
        }
    }
    count
}

fn strongly_connected(rows: &[Vec<(usize, f64)>]) -> bool {
    let n = rows.len();
    let mut fwd = vec![Vec::new(); n];
    let mut bwd = vec![Vec::new(); n];
    for (i, row) in rows.iter().enumerate() {
        for &(j, _) in row {
            fwd[i].push(j);
            bwd[j].push(i);
        }
    }
    reachable(n, &fwd) == n && reachable(n, &bwd) == n
}

/// Stationary vector of a row-stochastic matrix by the
/// Grassmann–Taksar–Heyman elimination (subtraction free).
pub fn stationary_measure(p: &DMatrix<f64>) -> Result<Vec<f64>> {
    let n = p.nrows();
    if n == 0 || p.ncols() != n {
        return Err(Error::Structural("transition matrix must be square and nonempty".into()));
    }
    let mut a = p.clone();
    for k in (1..n).rev() {
        let s: f64 = (0..k).map(|j| a[(k, j)]).sum();
        if s <= 0.0 {
            return Err(Error::Numerical(format!(
                "state {k} cannot reach lower-indexed states; chain is reducible"
            )));
        }
        for i in 0..k {
            a[(i, k)] /= s;
        }
        for i in 0..k {
            let aik = a[(i, k)];
            if aik == 0.0 {
                continue;
            }
            for j in 0..k {
                a[(i, j)] += aik * a[(k, j)];
            }
        }
    }
    let mut pi = vec![0.0; n];
    pi[0] = 1.0;
    for k in 1..n {
        pi[k] = (0..k).map(|i| pi[i] * a[(i, k)]).sum();
    }
    let total: f64 = pi.iter().sum();
    if !(total.is_finite() && total > 0.0) {
        return Err(Error::Numerical("stationary vector did not normalise".into()));
    }
    Ok(pi.into_iter().map(|v| v / total).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Invariant {
    RowSums,
    DetailedBalance,
    PositiveMeasure,
    MeasureSum,
    Irreducible,
}

#[derive(Debug, Clone, Serialize)]
pub struct Violation {
    pub invariant: Invariant,
    pub detail: String,
    pub worst: f64,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}: {}", self.invariant, self.detail)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub n: usize,
    pub max_row_sum_error: f64,
    pub max_detailed_balance_error: f64,
    pub measure_sum_error: f64,
    pub min_measure: f64,
    pub strongly_connected: bool,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// The restriction of `1 − P` to the complement of a killed set.
#[derive(Debug, Clone)]
pub struct DirichletOperator<'a> {
    base: &'a ChainModel,
    killed: SubsetMask,
    interior: Vec<usize>,
    position: Vec<Option<usize>>,
}

/// `(1 − P)^I` acting on the complement of `killed`.
pub fn dirichlet<'a>(chain: &'a ChainModel, killed: &SubsetMask) -> Result<DirichletOperator<'a>> {
    if killed.universe() != chain.n() {
        return Err(Error::Structural("killed set lives on a different state space".into()));
    }
    if killed.is_full() {
        return Err(Error::EmptyOperator);
    }
    let interior: Vec<usize> = killed.complement().members().to_vec();
    let mut position = vec![None; chain.n()];
    for (k, &x) in interior.iter().enumerate() {
        position[x] = Some(k);
    }
    Ok(DirichletOperator { base: chain, killed: killed.clone(), interior, position })
}

/// States outside `set` reachable in one step from inside it.
pub fn boundary(chain: &ChainModel, set: &SubsetMask) -> SubsetMask {
    let mut flags = vec![false; chain.n()];
    for y in set.iter() {
        for &(x, _) in chain.row(y) {
            if !set.contains(x) {
                flags[x] = true;
            }
        }
    }
    SubsetMask::from_flags(flags)
}

impl<'a> DirichletOperator<'a> {
    pub fn chain(&self) -> &'a ChainModel {
        self.base
    }

    pub fn killed(&self) -> &SubsetMask {
        &self.killed
    }

    /// States of the complement, in increasing order; row/column `k` of the
    /// operator corresponds to `interior()[k]`.
    pub fn interior(&self) -> &[usize] {
        &self.interior
    }

    pub fn dim(&self) -> usize {
        self.interior.len()
    }

    pub fn position(&self, x: usize) -> Option<usize> {
        self.position[x]
    }

    /// One-step probability of being absorbed from interior state `x`.
    pub fn killing(&self, x: usize) -> f64 {
        self.base.flux_into(x, &self.killed)
    }

    /// Dense matrix with diagonal assembled from off-diagonal mass.
    pub fn matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        let mut m = DMatrix::zeros(d, d);
        for (k, &x) in self.interior.iter().enumerate() {
            m[(k, k)] = self.base.leave_rate(x);
            for &(y, v) in self.base.row(x) {
                if y == x {
                    continue;
                }
                if let Some(l) = self.position[y] {
                    m[(k, l)] = -v;
                }
            }
        }
        m
    }

    /// `D^{1/2} (1−P)^I D^{−1/2}` written through `sqrt(P(x,y)P(y,x))` so it
    /// is symmetric to rounding.
    pub fn symmetrized(&self) -> DMatrix<f64> {
        let d = self.dim();
        let mut m = DMatrix::zeros(d, d);
        for (k, &x) in self.interior.iter().enumerate() {
            m[(k, k)] = self.base.leave_rate(x);
            for &(y, v) in self.base.row(x) {
                if y == x {
                    continue;
                }
                if let Some(l) = self.position[y] {
                    m[(k, l)] = -(v * self.base.p(y, x)).sqrt();
                }
            }
        }
        m
    }

    /// Apply the operator to a vector indexed like `interior()`.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.interior
            .iter()
            .enumerate()
            .map(|(k, &x)| {
                let mut s = self.base.leave_rate(x) * v[k];
                for &(y, p) in self.base.row(x) {
                    if y == x {
                        continue;
                    }
                    if let Some(l) = self.position[y] {
                        s -= p * v[l];
                    }
                }
                s
            })
            .collect()
    }

    /// Quadratic form `<v, (1−P)^I v>_Q` written as a sum of nonnegative
    /// terms: edge energies inside the complement plus killing.
    pub fn dirichlet_form(&self, v: &[f64]) -> f64 {
        let q = self.base.q();
        let mut e = 0.0;
        for (k, &x) in self.interior.iter().enumerate() {
            for &(y, p) in self.base.row(x) {
                if y == x {
                    continue;
                }
                match self.position[y] {
                    Some(l) if l > k => {
                        let d = v[k] - v[l];
                        e += q[x] * p * d * d;
                    }
                    Some(_) => {}
                    None => e += q[x] * p * v[k] * v[k],
                }
            }
        }
        e
    }

    /// Squared norm in `L^2(Q)` over the complement.
    pub fn q_norm_sq(&self, v: &[f64]) -> f64 {
        let q = self.base.q();
        self.interior.iter().enumerate().map(|(k, &x)| q[x] * v[k] * v[k]).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_state() -> ChainModel {
        ChainModel::from_dense(vec![vec![0.75, 0.25], vec![0.5, 0.5]], Some(vec![2.0 / 3.0, 1.0 / 3.0]), None).unwrap()
    }

    #[test]
    fn two_state_is_valid() {
        let c = two_state();
        let r = c.validate(&Tolerances::default());
        assert!(r.is_valid(), "{:?}", r.violations);
    }

    #[test]
    fn wrong_measure_is_reported() {
        let c = ChainModel::from_dense(vec![vec![0.75, 0.25], vec![0.5, 0.5]], Some(vec![0.5, 0.5]), None).unwrap();
        let r = c.validate(&Tolerances::default());
        assert_eq!(r.violations.len(), 1);
        assert_eq!(r.violations[0].invariant, Invariant::DetailedBalance);
        assert!(c.validated(&Tolerances::default()).is_err());
    }

    #[test]
    fn structural_and_data_errors() {
        assert!(matches!(
            ChainModel::from_dense(vec![vec![1.0, 0.0], vec![1.0]], None, None),
            Err(Error::Structural(_))
        ));
        assert!(matches!(
            ChainModel::from_dense(vec![vec![1.5, -0.5], vec![0.5, 0.5]], None, None),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            ChainModel::from_dense(vec![vec![f64::NAN, 1.0], vec![0.5, 0.5]], None, None),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn reducible_chain_rejected() {
        let p = vec![vec![1.0, 0.0, 0.0], vec![0.0, 0.5, 0.5], vec![0.0, 0.5, 0.5]];
        let c = ChainModel::from_dense(p, Some(vec![1.0 / 3.0; 3]), None).unwrap();
        let r = c.validate(&Tolerances::default());
        assert!(!r.strongly_connected);
        assert!(r.violations.iter().any(|v| v.invariant == Invariant::Irreducible));
    }

    #[test]
    fn stationary_two_state_and_doubly_stochastic() {
        let c = ChainModel::from_dense(vec![vec![0.75, 0.25], vec![0.5, 0.5]], None, None).unwrap();
        assert!((c.q()[0] - 2.0 / 3.0).abs() < 1e-15);
        let p = vec![vec![0.2, 0.5, 0.3], vec![0.5, 0.1, 0.4], vec![0.3, 0.4, 0.3]];
        let c = ChainModel::from_dense(p, None, None).unwrap();
        for &v in c.q() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn stationary_birth_death_product_formula() {
        let n = 20;
        let up: Vec<f64> = (0..n).map(|i| 0.1 + 0.35 * ((i as f64) * 0.7).sin().abs()).collect();
        let down: Vec<f64> = (0..n).map(|i| 0.15 + 0.3 * ((i as f64) * 1.3).cos().abs()).collect();
        let mut p = vec![vec![0.0; n]; n];
        for i in 0..n {
            let u = if i + 1 < n { up[i] } else { 0.0 };
            let d = if i > 0 { down[i] } else { 0.0 };
            if i + 1 < n {
                p[i][i + 1] = u;
            }
            if i > 0 {
                p[i][i - 1] = d;
            }
            p[i][i] = 1.0 - u - d;
        }
        let c = ChainModel::from_dense(p, None, None).unwrap();
        let mut w = vec![1.0];
        for i in 1..n {
            w.push(w[i - 1] * up[i - 1] / down[i]);
        }
        let z: f64 = w.iter().sum();
        for i in 0..n {
            assert!((c.q()[i] - w[i] / z).abs() < 1e-12 * (w[i] / z).max(1e-300) + 1e-15);
        }
        assert!(c.validate(&Tolerances::default()).is_valid());
    }

    #[test]
    fn dirichlet_examples() {
        let c = two_state();
        let op = dirichlet(&c, &SubsetMask::new(2, [1]).unwrap()).unwrap();
        assert_eq!(op.matrix()[(0, 0)], 0.25);
        let full = dirichlet(&c, &SubsetMask::empty(2)).unwrap().matrix();
        assert_eq!(full[(0, 1)], -0.25);
        assert_eq!(full[(1, 1)], 0.5);
        assert!(matches!(dirichlet(&c, &SubsetMask::full(2)), Err(Error::EmptyOperator)));

        let path = ChainModel::from_dense(
            vec![vec![0.5, 0.5, 0.0], vec![0.5, 0.0, 0.5], vec![0.0, 0.5, 0.5]],
            None,
            None,
        )
        .unwrap();
        let op = dirichlet(&path, &SubsetMask::new(3, [0, 2]).unwrap()).unwrap();
        assert_eq!(op.matrix().as_slice(), &[1.0]);
        assert_eq!(boundary(&path, &SubsetMask::new(3, [0]).unwrap()).members(), &[1]);
        assert!(boundary(&path, &SubsetMask::empty(3)).is_empty());
    }
}
