//! Named check matrix over one chain and metastable set.
//!
//! Hard checks are exact identities and rigorous bounds; a hard failure
//! means a bug or a broken input. Soft checks are asymptotic statements
//! whose quality depends on how metastable the chain is.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::chain::{dirichlet, ChainModel};
use crate::config::Tolerances;
use crate::error::{Error, Result};
use crate::exit_law::{
    exponential_law_check, laplace_survival, residue_expansion, sample_exit_times, survival_exact, DEFAULT_CAP, TAIL_MASS,
};
use crate::hitting::{delta_factor, hitting_probability, mean_hitting_time, mean_return_or_hitting_time, mean_time_conditioned, Abscissa};
use crate::identities::{strip_constant, verify_identities};
use crate::metastability::{
    analyze, build_hierarchy, conditional_bound_check, mean_exit_time, propose_metastable_set, return_time_check,
    Hierarchy,
};
use crate::spectral::{dv_bound_check, eigen_roots_via_detg, eigen_time_duality, eigenpairs, low_spectrum_verify};
use crate::subset::SubsetMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Severity {
    Hard,
    Soft,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Pass,
    Fail,
    Skipped,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub severity: Severity,
    pub status: Status,
    pub value: Option<f64>,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub detail: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Pass,
    SoftFail,
    HardFail,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyOptions {
    /// Metastable set; proposed automatically when absent.
    pub metastable: Option<SubsetMask>,
    /// Size of the proposed set.
    pub auto_k: usize,
    /// Exclusion set for the hierarchy and spectral checks.
    pub initial: Option<SubsetMask>,
    /// Separation threshold for the metastable set.
    pub threshold: f64,
    /// Monte Carlo trajectories; zero disables sampling.
    pub mc_samples: usize,
    pub seed: u64,
    pub tol: Tolerances,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            metastable: None,
            auto_k: 2,
            initial: None,
            threshold: crate::metastability::DEFAULT_SEPARATION,
            mc_samples: 0,
            seed: 0,
            tol: Tolerances::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub metastable: Vec<usize>,
    pub initial: Vec<usize>,
    /// Hierarchy points in depth order.
    pub points: Vec<usize>,
    pub checks: BTreeMap<String, CheckOutcome>,
    pub passed: usize,
    pub hard_failures: usize,
    pub soft_failures: usize,
    pub skipped: usize,
    pub verdict: Verdict,
}

impl VerifyReport {
    pub fn get(&self, name: &str) -> Option<&CheckOutcome> {
        self.checks.get(name)
    }
}

#[derive(Default)]
struct Matrix {
    checks: BTreeMap<String, CheckOutcome>,
}

impl Matrix {
    fn bounded(&mut self, name: &str, severity: Severity, value: f64, lower: Option<f64>, upper: Option<f64>) {
        let ok = !value.is_nan() && lower.is_none_or(|l| value >= l) && upper.is_none_or(|u| value <= u);
        self.checks.insert(
            name.to_string(),
            CheckOutcome {
                severity,
                status: if ok { Status::Pass } else { Status::Fail },
                value: Some(value),
                lower,
                upper,
                detail: None,
            },
        );
    }

    fn upper(&mut self, name: &str, severity: Severity, value: f64, limit: f64) {
        self.bounded(name, severity, value, None, Some(limit));
    }

    fn lower(&mut self, name: &str, severity: Severity, value: f64, limit: f64) {
        self.bounded(name, severity, value, Some(limit), None);
    }

    fn range(&mut self, name: &str, severity: Severity, value: f64, lo: f64, hi: f64) {
        self.bounded(name, severity, value, Some(lo), Some(hi));
    }

    /// Boolean check; the value records the number of offending cases.
    fn count(&mut self, name: &str, severity: Severity, offenders: usize) {
        self.upper(name, severity, offenders as f64, 0.0);
    }

    fn skip(&mut self, name: &str, severity: Severity, reason: &str) {
        self.note(name, severity, Status::Skipped, reason.to_string());
    }

    fn note(&mut self, name: &str, severity: Severity, status: Status, detail: String) {
        self.checks.insert(
            name.to_string(),
            CheckOutcome { severity, status, value: None, lower: None, upper: None, detail: Some(detail) },
        );
    }

    /// Unwraps a computation, recording its error as a failed check.
    fn attempt<T>(&mut self, name: &str, severity: Severity, r: Result<T>) -> Option<T> {
        match r {
            Ok(v) => Some(v),
            Err(e) => {
                self.note(name, severity, Status::Fail, e.to_string());
                None
            }
        }
    }
}

fn nan_max(acc: f64, v: f64) -> f64 {
    if v.is_nan() || acc.is_nan() {
        f64::NAN
    } else {
        acc.max(v)
    }
}

/// Runs every check on `chain`. Errors are returned only for invalid
/// input and for hierarchy degeneracy; failures of individual
/// computations are recorded in the matrix.
pub fn verify_chain(chain: &ChainModel, opts: &VerifyOptions) -> Result<VerifyReport> {
    use Severity::{Hard, Soft};
    let tol = &opts.tol;
    tol.check()?;
    let n = chain.n();
    if n < 2 {
        return Err(Error::Argument("verification needs at least two states".into()));
    }
    let mut mx = Matrix::default();

    let vr = chain.validate(tol);
    if !vr.is_valid() {
        let first = &vr.violations[0];
        return Err(Error::Invariant(format!("{:?}: {}", first.invariant, first.detail)));
    }
    mx.upper("chain-row-sums", Hard, vr.max_row_sum_error, tol.row_sum);
    mx.upper("chain-detailed-balance", Hard, vr.max_detailed_balance_error, tol.detailed_balance);
    mx.upper("chain-measure-normalized", Hard, vr.measure_sum_error, tol.measure_sum);
    mx.count("chain-irreducible", Hard, usize::from(!vr.strongly_connected));

    let metastable = match &opts.metastable {
        Some(m) => m.clone(),
        None => propose_metastable_set(chain, opts.auto_k, None, tol)?.metastable,
    };
    let initial = opts.initial.clone().unwrap_or_else(|| SubsetMask::empty(n));
    let analysis = analyze(chain, &metastable, &initial, opts.threshold, tol)?;
    let eps = analysis.genericity.eps;
    let base = if initial.is_empty() {
        analysis.hierarchy.clone()
    } else {
        build_hierarchy(chain, &metastable, &SubsetMask::empty(n), Some(eps), tol)?
    };

    operator_checks(&mut mx, chain, &base, tol);
    identity_checks(&mut mx, chain, &metastable, &base, tol);
    mean_time_checks(&mut mx, chain, &metastable, analysis.spec.b, tol);

    // metastable set, valleys and capacities
    mx.upper("metastable-separation", Soft, analysis.spec.separation, opts.threshold);
    mx.count("genericity-nondegenerate", Soft, usize::from(analysis.genericity.degenerate));
    mx.upper("genericity-ratio", Soft, eps, opts.threshold);
    let vd = &analysis.valleys;
    let mut covered = SubsetMask::empty(n);
    for v in &vd.valleys {
        covered = covered.union(v);
    }
    mx.count("valley-coverage", Hard, n - covered.len());
    let bad_ratio = vd.ratios.iter().filter(|&&r| !(r > 0.0 && r <= 1.0 + tol.identity)).count();
    mx.count("valley-ratios", Hard, bad_ratio);
    let q = chain.q();
    let not_top = metastable
        .members()
        .iter()
        .zip(&vd.valleys)
        .filter(|(&m, v)| v.iter().any(|y| q[y] > q[m] * (1.0 + tol.tie)))
        .count();
    mx.count("valley-maximality", Soft, not_top);
    mx.upper("valley-overlap-factor-two", Soft, vd.overlap_ratio, 2.0);
    mx.upper("valley-overlap-factor-three", Hard, vd.overlap_ratio, 3.0);
    match &analysis.capacities {
        Some(c) => {
            mx.upper("capacity-symmetry", Hard, c.symmetry_defect, tol.detailed_balance);
            mx.count("capacity-triangle", Hard, c.triangle_violations.len());
            mx.upper("capacity-ultrametric", Hard, c.ultrametric_defect, 3f64.ln() + tol.identity);
            mx.count("capacity-sandwich", Hard, c.sandwich_violations);
        }
        None => {
            for name in ["capacity-symmetry", "capacity-triangle", "capacity-ultrametric", "capacity-sandwich"] {
                mx.skip(name, Hard, "single metastable point");
            }
        }
    }

    hierarchy_checks(&mut mx, chain, &metastable, &analysis.hierarchy, tol);
    spectral_checks(&mut mx, chain, &metastable, &analysis.hierarchy, tol);
    exit_law_checks(&mut mx, chain, &metastable, &base, vd.c_n_inv, analysis.spec.b, opts);

    let mut report = VerifyReport {
        metastable: metastable.members().to_vec(),
        initial: initial.members().to_vec(),
        points: analysis.hierarchy.points.clone(),
        checks: mx.checks,
        passed: 0,
        hard_failures: 0,
        soft_failures: 0,
        skipped: 0,
        verdict: Verdict::Pass,
    };
    for c in report.checks.values() {
        match (c.status, c.severity) {
            (Status::Pass, _) => report.passed += 1,
            (Status::Skipped, _) => report.skipped += 1,
            (Status::Fail, Hard) => report.hard_failures += 1,
            (Status::Fail, Soft) => report.soft_failures += 1,
        }
    }
    report.verdict = if report.hard_failures > 0 {
        Verdict::HardFail
    } else if report.soft_failures > 0 {
        Verdict::SoftFail
    } else {
        Verdict::Pass
    };
    Ok(report)
}

/// Target, avoided and intermediate sets used by the exact identities.
fn identity_sets(n: usize, metastable: &SubsetMask, base: &Hierarchy) -> (SubsetMask, SubsetMask, SubsetMask) {
    let m1 = base.points[0];
    let target = SubsetMask::singleton(n, m1).expect("point in range");
    let other = base.points.get(1).copied().unwrap_or_else(|| (0..n).find(|&x| x != m1).expect("n ≥ 2"));
    let avoid = SubsetMask::singleton(n, other).expect("point in range");
    let killed = target.union(&avoid);
    let mut split = metastable.difference(&killed);
    if let Some(x) = killed.complement().iter().next() {
        split = split.with(x);
    }
    (target, avoid, split)
}

fn operator_checks(mx: &mut Matrix, chain: &ChainModel, base: &Hierarchy, tol: &Tolerances) {
    use Severity::Hard;
    let n = chain.n();
    let q = chain.q();
    let mut asym = 0.0f64;
    for x in 0..n {
        for &(y, v) in chain.row(x) {
            let a = (q[x] / q[y]).sqrt() * v;
            let b = (q[y] / q[x]).sqrt() * chain.p(y, x);
            asym = asym.max((a - b).abs() / a.abs().max(b.abs()));
        }
    }
    mx.upper("conjugated-symmetry", Hard, asym, tol.detailed_balance);

    let full = SubsetMask::empty(n);
    if let Some(pairs) = mx.attempt("spectrum-range", Hard, dirichlet(chain, &full).and_then(|op| eigenpairs(&op))) {
        let out = pairs.values.iter().map(|&l| (-l).max(l - 2.0).max(0.0)).fold(0.0, f64::max);
        mx.upper("spectrum-range", Hard, out, tol.row_sum);
    }
    let target = SubsetMask::singleton(n, base.points[0]).expect("point in range");
    if let Some(pairs) = mx.attempt("perron-root", Hard, dirichlet(chain, &target).and_then(|op| eigenpairs(&op))) {
        let top = 1.0 - pairs.values[0];
        let rho = pairs.values.iter().map(|&l| (1.0 - l).abs()).fold(0.0, f64::max);
        mx.upper("perron-root", Hard, rho - top, tol.row_sum);
        mx.lower("principal-eigenvalue-positive", Hard, pairs.values[0], f64::MIN_POSITIVE);
    }
}

fn identity_checks(mx: &mut Matrix, chain: &ChainModel, metastable: &SubsetMask, base: &Hierarchy, tol: &Tolerances) {
    use Severity::Hard;
    let n = chain.n();
    let (target, avoid, split) = identity_sets(n, metastable, base);
    let Some(abscissa) = mx.attempt("identities", Hard, Abscissa::of(chain, &target)) else { return };
    let mut worst: BTreeMap<&'static str, (f64, usize)> = BTreeMap::new();
    for u in [0.0, abscissa.midpoint()] {
        let Some(rep) = mx.attempt("identities", Hard, verify_identities(chain, &target, &avoid, &split, u, tol)) else {
            return;
        };
        for c in rep.checks {
            let e = worst.entry(c.name).or_insert((0.0, 0));
            if c.compared > 0 {
                *e = (nan_max(e.0, c.residual), e.1 + c.compared);
            }
        }
    }
    for (name, (r, compared)) in worst {
        if compared == 0 {
            mx.skip(name, Hard, "forward series too long for direct summation");
        } else {
            mx.upper(name, Hard, r, tol.identity);
        }
    }

    if let Some(h) = mx.attempt("hitting-probability-range", Hard, hitting_probability(chain, &target, &avoid)) {
        let mut bad = 0.0f64;
        for (x, &v) in h.values.iter().enumerate() {
            let want = if target.contains(x) {
                Some(1.0)
            } else if avoid.contains(x) {
                Some(0.0)
            } else {
                None
            };
            bad = bad.max(match want {
                Some(w) => (v - w).abs(),
                None => (-v).max(v - 1.0).max(0.0),
            });
        }
        mx.upper("hitting-probability-range", Hard, bad, tol.row_sum);
    }

    let killed = target.union(&avoid);
    let domain = killed.complement();
    if domain.len() >= 2 {
        let pts: Vec<usize> = domain.iter().take(6).collect();
        let (mut range, mut recip) = (0.0f64, 0.0f64);
        let mut degenerate = 0;
        for &x in &pts {
            for &y in &pts {
                if x == y {
                    continue;
                }
                let Some(d) = mx.attempt("delta-factor-range", Hard, delta_factor(chain, &domain, x, y)) else { return };
                if d.degenerate {
                    degenerate += 1;
                    continue;
                }
                range = nan_max(range, d.value.max(1.0 / d.value));
                recip = nan_max(recip, (d.product - 1.0).abs());
            }
        }
        mx.upper("delta-factor-range", Hard, range, 3.0 * (1.0 + tol.identity));
        mx.upper("delta-factor-reciprocity", Hard, recip, tol.identity);
        if degenerate > 0 {
            mx.checks.get_mut("delta-factor-range").expect("just set").detail =
                Some(format!("{degenerate} pairs with a vanishing escape probability"));
        }
    } else {
        mx.skip("delta-factor-range", Hard, "fewer than two free states");
        mx.skip("delta-factor-reciprocity", Hard, "fewer than two free states");
    }

    if let Some(cm) = mx.attempt("conditioned-mean-two-ways", Hard, mean_time_conditioned(chain, &target, &avoid)) {
        mx.upper("conditioned-mean-two-ways", Hard, cm.cross_check, tol.identity);
    }
}

/// Rigorous upper bound `3|Γ|/b` on mean times to the metastable set.
fn mean_time_checks(mx: &mut Matrix, chain: &ChainModel, metastable: &SubsetMask, b: f64, tol: &Tolerances) {
    use Severity::Hard;
    let n = chain.n();
    let bound = 3.0 * n as f64 / b;
    let mut worst = 0.0f64;
    let Some(to_m) = mx.attempt("mean-time-bound", Hard, mean_hitting_time(chain, metastable)) else { return };
    worst = to_m.iter().filter(|v| v.is_finite()).fold(worst, |a, &v| a.max(v));
    for m in metastable.iter() {
        let Some(r) = mx.attempt("mean-time-bound", Hard, mean_return_or_hitting_time(chain, m, metastable)) else {
            return;
        };
        worst = worst.max(r);
        let target = SubsetMask::singleton(n, m).expect("point in range");
        let avoid = metastable.without(m);
        if avoid.is_empty() {
            continue;
        }
        let Some(cm) = mx.attempt("mean-time-bound", Hard, mean_time_conditioned(chain, &target, &avoid)) else {
            return;
        };
        worst = cm.solution.values.iter().filter(|v| v.is_finite()).fold(worst, |a, &v| a.max(v));
    }
    mx.upper("mean-time-bound", Hard, worst / bound, 1.0 + tol.identity);
}

fn hierarchy_checks(mx: &mut Matrix, chain: &ChainModel, metastable: &SubsetMask, h: &Hierarchy, tol: &Tolerances) {
    use Severity::{Hard, Soft};
    let n = chain.n();
    let j0 = h.points.len();
    let mut worst_ratio = 0.0f64;
    for j in 1..j0 {
        if h.depths[j - 1].is_finite() {
            worst_ratio = nan_max(worst_ratio, h.depths[j] / h.depths[j - 1]);
        }
    }
    mx.upper("hierarchy-ordering", Hard, worst_ratio, 1.0);
    mx.count("hierarchy-monotone", Soft, usize::from(h.monotone != Some(true)));
    mx.count("hierarchy-separation-order", Soft, usize::from(!h.separation_order));
    mx.upper("hierarchy-exclusion-slack", Soft, h.exclusion_slack, 1e-6);
    let slack = h.depth_slack.iter().fold(0.0, |a, &v| nan_max(a, v));
    mx.upper("hierarchy-depth-slack", Soft, slack, 0.1);

    // mean exit times against depth over valley ratio
    let mut gap = 0.0f64;
    let mut cases = 0;
    for j in 0..j0 {
        for target in [&h.exclusions[j], &h.metastable_sets[j]] {
            if target.is_empty() || target.contains(h.points[j]) {
                continue;
            }
            let Some(me) = mx.attempt("mean-exit-time-formula", Soft, mean_exit_time(chain, metastable, h.points[j], target, tol))
            else {
                return;
            };
            gap = nan_max(gap, me.relative_gap);
            cases += 1;
        }
    }
    if cases > 0 {
        mx.upper("mean-exit-time-formula", Soft, gap, 0.1);
    } else {
        mx.skip("mean-exit-time-formula", Soft, "no nonempty exclusion");
    }

    // return times to the deepest point of each exclusion complement
    let (mut split, mut lead, mut mean_gap) = (0.0f64, 0.0f64, 0.0f64);
    let mut cases = 0;
    for j in 1..j0 {
        let Some(rt) = mx.attempt("return-time-split", Hard, return_time_check(chain, metastable, &h.exclusions[j], tol)) else {
            return;
        };
        split = nan_max(split, rt.split_residual);
        lead = nan_max(lead, rt.deviation.abs());
        mean_gap = nan_max(mean_gap, rt.max_mean_gap);
        cases += 1;
    }
    if cases > 0 {
        mx.upper("return-time-split", Hard, split, tol.identity);
        mx.upper("return-time-leading-order", Soft, lead, 0.1);
        mx.upper("return-time-mean-gap", Soft, mean_gap, 0.1);
    } else {
        for (name, sev) in [("return-time-split", Hard), ("return-time-leading-order", Soft), ("return-time-mean-gap", Soft)] {
            mx.skip(name, sev, "single hierarchy level");
        }
    }

    // conditioned mean from the other points toward the deepest one
    {
        let m1 = h.points[0];
        let target = if h.initial.is_empty() { SubsetMask::singleton(n, m1).expect("in range") } else { h.initial.clone() };
        let (mut c, mut flagged) = (0.0f64, 0);
        let mut cases = 0;
        for x in metastable.difference(&target).iter() {
            let avoid = metastable.difference(&target).without(x);
            let Some(cb) = mx.attempt("conditional-bound-constant", Soft, conditional_bound_check(chain, metastable, x, &target, &avoid, tol))
            else {
                return;
            };
            if cb.flagged {
                flagged += 1;
            } else {
                c = c.max(cb.constant);
            }
            cases += 1;
        }
        if cases > 0 {
            mx.upper("conditional-bound-constant", Soft, c, 10.0);
            mx.count("conditional-bound-finite", Soft, flagged);
        }
    }
}

fn spectral_checks(mx: &mut Matrix, chain: &ChainModel, metastable: &SubsetMask, h: &Hierarchy, tol: &Tolerances) {
    use Severity::{Hard, Soft};
    let n = chain.n();
    let j0 = h.points.len();
    let initial = &h.initial;

    if let Some(rep) = mx.attempt("eigen-residual", Hard, low_spectrum_verify(chain, h, tol)) {
        let res = rep.residuals.iter().fold(0.0, |a, &v| nan_max(a, v));
        mx.upper("eigen-residual", Hard, res, tol.identity);
        mx.upper("eigen-orthonormality", Hard, rep.orthonormality_defect, tol.identity);
        mx.count("eigen-interlacing", Hard, usize::from(rep.interlacing != Some(true)));
        mx.count("spectral-count", Soft, usize::from(rep.count_matches != Some(true)));
        mx.count("spectral-depth-order", Soft, usize::from(rep.depth_order != Some(true)));
        let (mut lo, mut hi) = (1.0f64, 1.0f64);
        let (mut time_dev, mut loc, mut shape, mut tv) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        for p in &rep.pairing {
            lo = lo.min(p.ratio);
            hi = hi.max(p.ratio);
            if p.predicted_inverse_time > 0.0 {
                time_dev = nan_max(time_dev, (p.lambda / p.predicted_inverse_time - 1.0).abs());
            }
            loc = p.localization.iter().fold(loc, |a, e| nan_max(a, e.value));
            shape = nan_max(shape, p.valley_deviation);
            tv = nan_max(tv, p.left_vector_tv);
        }
        mx.range("eigen-pairing-low", Soft, lo, 0.8, 1.25);
        mx.range("eigen-pairing-high", Soft, hi, 0.8, 1.25);
        mx.upper("eigen-time-pairing", Soft, time_dev, 0.25);
        mx.upper("eigen-localization", Soft, loc, 0.1);
        mx.upper("eigen-valley-shape", Soft, shape, 0.1);
        mx.upper("left-eigenvector-shape", Soft, tv, 0.1);
    }

    // determinant roots: the whole set and every level of the hierarchy
    let (mut full_mis, mut full_bad) = (0.0f64, 0);
    let (mut block_mis, mut block_bad) = (0.0f64, 0);
    let mut root_res = 0.0f64;
    for j in 1..=j0 {
        let points = h.exclusions[j].difference(initial);
        let name = if j == j0 { "det-root-equivalence" } else { "det-block-roots" };
        let Some(dr) = mx.attempt(name, Hard, eigen_roots_via_detg(chain, initial, &points)) else { continue };
        root_res = dr.roots.iter().fold(root_res, |a, r| nan_max(a, r.residual));
        if j == j0 {
            full_mis = dr.max_relative_mismatch;
            full_bad = usize::from(!dr.bijection);
        } else {
            block_mis = nan_max(block_mis, dr.max_relative_mismatch);
            block_bad += usize::from(!dr.bijection);
        }
    }
    if !mx.checks.contains_key("det-root-equivalence") {
        mx.upper("det-root-equivalence", Hard, full_mis, 1e-10);
        mx.count("det-root-bijection", Hard, full_bad);
    }
    if j0 > 1 && !mx.checks.contains_key("det-block-roots") {
        mx.upper("det-block-roots", Hard, block_mis, 1e-10);
        mx.count("det-block-bijection", Hard, block_bad);
    }
    mx.upper("det-root-eigenvector-residual", Hard, root_res, tol.identity);

    // eigenvalue and exit-time duality on each nonempty exclusion
    let (mut closure, mut time_dev, mut depth_dev, mut slope) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let (mut cases, mut closed, mut sloped) = (0, 0, 0);
    for j in 0..j0 {
        let ex = &h.exclusions[j];
        if ex.is_empty() || !ex.is_subset(metastable) {
            continue;
        }
        let Some(d) = mx.attempt("principal-root-closure", Hard, eigen_time_duality(chain, metastable, ex, tol)) else {
            continue;
        };
        if let Some(c) = d.closure {
            closure = nan_max(closure, c);
            closed += 1;
        }
        time_dev = nan_max(time_dev, d.time_deviation.abs());
        depth_dev = nan_max(depth_dev, d.depth_deviation.abs());
        if !d.slope_relative_gap.is_nan() {
            slope = slope.max(d.slope_relative_gap);
            sloped += 1;
        }
        cases += 1;
    }
    if !mx.checks.contains_key("principal-root-closure") {
        if closed > 0 {
            mx.upper("principal-root-closure", Hard, closure, tol.identity);
        } else {
            mx.skip("principal-root-closure", Hard, "no real root inside the domain");
        }
    }
    if cases > 0 {
        mx.upper("eigen-time-duality", Soft, time_dev, 0.1);
        mx.upper("eigen-depth-duality", Soft, depth_dev, 0.1);
    } else {
        mx.skip("eigen-time-duality", Soft, "no exclusion inside the metastable set");
        mx.skip("eigen-depth-duality", Soft, "no exclusion inside the metastable set");
    }
    if sloped > 0 {
        mx.upper("linearization-slope", Soft, slope, 1e-4);
    } else {
        mx.skip("linearization-slope", Soft, "no real root inside the domain");
    }

    // Donsker-Varadhan lower bound on several killed sets
    let mut sets: Vec<SubsetMask> = metastable.iter().map(|m| SubsetMask::singleton(n, m).expect("in range")).collect();
    sets.push(metastable.clone());
    sets.extend(h.exclusions.iter().filter(|e| !e.is_empty() && !e.is_full()).cloned());
    let mut worst = f64::INFINITY;
    for s in &sets {
        let Some(dv) = mx.attempt("donsker-varadhan-bound", Hard, dv_bound_check(chain, s)) else { return };
        worst = worst.min(dv.product);
    }
    mx.lower("donsker-varadhan-bound", Hard, worst, 1.0 - tol.identity);
}

fn exit_law_checks(
    mx: &mut Matrix,
    chain: &ChainModel,
    metastable: &SubsetMask,
    base: &Hierarchy,
    c_n_inv: f64,
    b: f64,
    opts: &VerifyOptions,
) {
    use Severity::{Hard, Soft};
    const NAMES: [(&str, Severity); 10] = [
        ("survival-sum", Hard),
        ("laplace-three-ways", Hard),
        ("residue-sum-rule", Hard),
        ("principal-residue", Soft),
        ("higher-residues", Soft),
        ("residue-reconstruction", Soft),
        ("remainder-decay", Soft),
        ("exponential-law", Soft),
        ("laplace-strip-constant", Soft),
        ("monte-carlo", Soft),
    ];
    let n = chain.n();
    if base.points.len() < 2 {
        for (name, sev) in NAMES {
            mx.skip(name, sev, "single metastable point");
        }
        return;
    }
    let tol = &opts.tol;
    let target = SubsetMask::singleton(n, base.points[0]).expect("in range");
    let x = base.points[1];

    let abscissa = Abscissa::of(chain, &target);
    match &abscissa {
        // the surviving mass has to fall below the tail cut within the cap
        Ok(a) if (1.0 / TAIL_MASS).ln() / a.u > DEFAULT_CAP as f64 => {
            mx.skip("survival-sum", Hard, "survival series exceeds the length cap")
        }
        _ => {
            if let Some(s) = mx.attempt("survival-sum", Hard, survival_exact(chain, x, &target, 1, DEFAULT_CAP)) {
                if s.truncated {
                    mx.skip("survival-sum", Hard, "survival series exceeds the length cap");
                } else if let Some(mean) = mx.attempt("survival-sum", Hard, mean_hitting_time(chain, &target)) {
                    mx.upper("survival-sum", Hard, (s.sum - mean[x]).abs() / mean[x], tol.identity);
                }
            }
        }
    }
    if let Some(a) = mx.attempt("laplace-three-ways", Hard, abscissa) {
        if let Some(ls) = mx.attempt("laplace-three-ways", Hard, laplace_survival(chain, x, &target, a.midpoint(), tol)) {
            mx.upper("laplace-three-ways", Hard, ls.relative_gap, tol.identity);
        }
    }
    let keep = metastable.len() - 1;
    if let Some(re) = mx.attempt("residue-sum-rule", Hard, residue_expansion(chain, x, &target, keep)) {
        mx.upper("residue-sum-rule", Hard, (re.sum_rule - 1.0).abs(), tol.identity);
        mx.upper("principal-residue", Soft, (re.residues[0].residue + 1.0).abs(), 0.05);
        let higher = re.residues.iter().take(keep).skip(1).fold(0.0f64, |a, r| a.max(r.residue.abs()));
        mx.upper("higher-residues", Soft, higher, 0.05);
        mx.upper("residue-reconstruction", Soft, re.reconstruction_error, 1e-6);
        match (re.remainder_rate, re.first_discarded_pole) {
            (Some(rate), Some(pole)) if pole > 0.0 => mx.lower("remainder-decay", Soft, rate / pole, 0.5),
            _ => mx.skip("remainder-decay", Soft, "remainder below rounding level"),
        }
    }
    if let Some(el) = mx.attempt("exponential-law", Soft, exponential_law_check(chain, x, &target)) {
        mx.upper("exponential-law", Soft, el.sup_deviation, 0.1);
    }

    // strip estimate between the two deepest points, scaled by the
    // depth of the remaining points or by 1/b when none remain
    let avoid = SubsetMask::singleton(n, x).expect("in range");
    let killed = target.union(&avoid);
    let depth = match mx.attempt("laplace-strip-constant", Soft, crate::metastability::depth_to(chain, &killed)) {
        Some(d) => metastable.difference(&killed).iter().map(|m| d[m]).fold(1.0 / b, f64::max),
        None => return,
    };
    let scale = depth / c_n_inv;
    if let Some(c) = mx.attempt("laplace-strip-constant", Soft, strip_constant(chain, &target, &avoid, 1.0 / scale, scale, tol)) {
        mx.upper("laplace-strip-constant", Soft, c, 10.0);
    }

    if opts.mc_samples == 0 {
        mx.skip("monte-carlo", Soft, "sampling disabled");
    } else if let Some(mc) = mx.attempt("monte-carlo", Soft, sample_exit_times(chain, x, &target, opts.mc_samples, opts.seed)) {
        mx.upper("monte-carlo", Soft, mc.ks, mc.band);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::landscape::random_reversible;
    use crate::report::to_canonical;

    #[test]
    fn random_chain_passes_hard_checks() {
        let c = random_reversible(9, 0.5, 11);
        let r = verify_chain(&c, &VerifyOptions::default()).unwrap();
        let hard: Vec<_> =
            r.checks.iter().filter(|(_, o)| o.severity == Severity::Hard && o.status == Status::Fail).collect();
        assert!(hard.is_empty(), "{hard:#?}");
        assert_eq!(to_canonical(&r).unwrap(), to_canonical(&verify_chain(&c, &VerifyOptions::default()).unwrap()).unwrap());
    }
}
