//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails.

use std::time::{Duration, Instant};

use metaspec::exit_law::{exponential_law_check, residue_expansion, sample_exit_times, survival_exact};
use metaspec::landscape::{random_reversible, PotentialSpec};
use metaspec::metastability::{analyze, propose_metastable_set, Analysis};
use metaspec::report::to_canonical;
use metaspec::spectral::{eigen_time_duality, low_spectrum_verify};
use metaspec::subset::SubsetMask;
use metaspec::verify::{verify_chain, Status, VerifyOptions, VerifyReport};
use metaspec::{ChainModel, Tolerances};

const IDENTITY_CHECKS: &[&str] = &[
    "strong-markov-decomposition",
    "first-step-transform",
    "derivative-system",
    "renewal-equation",
    "reversibility",
    "green-hitting-representation",
    "green-boundary-extension",
    "fundamental-solution",
    "fundamental-solution-symmetry",
    "survival-generating-function",
    "survival-sum",
    "laplace-three-ways",
];

const BOUND_CHECKS: &[&str] = &[
    "delta-factor-range",
    "capacity-triangle",
    "capacity-sandwich",
    "donsker-varadhan-bound",
    "mean-time-bound",
];

const ROOT_CHECKS: &[&str] =
    &["det-root-equivalence", "det-root-bijection", "det-block-roots", "det-block-bijection", "principal-root-closure"];

struct Line {
    pass: bool,
    detail: String,
}

fn line(pass: bool, detail: impl Into<String>) -> Line {
    Line { pass, detail: detail.into() }
}

fn sci(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.3e}")).collect();
    format!("[{}]", parts.join(", "))
}

fn preset(d: u8, n: usize, name: &str) -> ChainModel {
    PotentialSpec::preset(d, n, name, &[]).build().unwrap()
}

fn corpus() -> Vec<(String, ChainModel, usize)> {
    let mut out = Vec::new();
    for s in 0..100u64 {
        let n = 4 + (s as usize % 17);
        let density = [0.2, 0.5, 0.9][s as usize % 3];
        out.push((format!("random-{s}"), random_reversible(n, density, 500 + s), 2 + (s as usize % 2)));
    }
    out.push(("double-well-1d-16".into(), preset(1, 16, "double_well"), 2));
    out.push(("double-well-1d-32".into(), preset(1, 32, "double_well"), 2));
    out.push(("triple-well-1d-32".into(), preset(1, 32, "triple_well"), 3));
    out.push(("double-well-2d-6".into(), preset(2, 6, "double_well"), 2));
    out.push(("double-well-2d-7".into(), preset(2, 7, "double_well"), 2));
    out
}

/// State count encoded after the slash of a report name.
fn chain_size(name: &str) -> usize {
    name.rsplit('/').next().and_then(|s| s.parse().ok()).expect("name carries the size")
}

/// Checks from `names` that failed; missing checks count as failures.
fn failures(r: &VerifyReport, names: &[&str], j0: usize) -> Vec<String> {
    let mut bad = Vec::new();
    for &name in names {
        match r.get(name) {
            Some(c) if c.status == Status::Fail => bad.push(format!("{name}={:?}", c.value)),
            Some(_) => {}
            // block roots only exist for hierarchies with several levels
            None if name.starts_with("det-block") && j0 < 2 => {}
            None => bad.push(format!("{name} missing")),
        }
    }
    bad
}

fn corpus_criteria(lines: &mut Vec<Line>) -> Vec<(String, VerifyReport)> {
    let start = Instant::now();
    let mut reports = Vec::new();
    let mut errors = Vec::new();
    for (name, chain, k) in corpus() {
        let opts = VerifyOptions { auto_k: k, ..VerifyOptions::default() };
        match verify_chain(&chain, &opts) {
            Ok(r) => reports.push((format!("{name}/{}", chain.n()), r)),
            Err(e) => errors.push(format!("{name}: {e}")),
        }
    }
    let elapsed = start.elapsed();

    let collect = |names: &[&str], filter: &dyn Fn(&str, &VerifyReport) -> bool| {
        let mut bad = Vec::new();
        let mut skipped = 0;
        for (name, r) in &reports {
            if !filter(name, r) {
                continue;
            }
            for f in failures(r, names, r.points.len()) {
                bad.push(format!("{name}: {f}"));
            }
            skipped += names.iter().filter(|n| r.get(n).is_some_and(|c| c.status == Status::Skipped)).count();
        }
        (bad, skipped)
    };

    let (bad, skipped) = collect(IDENTITY_CHECKS, &|_, _| true);
    let worst = reports
        .iter()
        .flat_map(|(_, r)| IDENTITY_CHECKS.iter().filter_map(|n| r.get(n)).filter_map(|c| c.value))
        .fold(0.0f64, f64::max);
    lines.push(line(
        errors.is_empty() && bad.is_empty() && elapsed <= Duration::from_secs(60),
        format!(
            "{} chains, worst residual {worst:.2e}, {skipped} series checks skipped, {:.1?}, errors {:?}, failures {:?}",
            reports.len(),
            elapsed,
            errors,
            bad
        ),
    ));

    let (bad, _) = collect(BOUND_CHECKS, &|_, _| true);
    lines.push(line(errors.is_empty() && bad.is_empty(), format!("{} chains, violations {:?}", reports.len(), bad)));

    let small = |name: &str, _: &VerifyReport| chain_size(name) <= 60;
    let (bad, _) = collect(ROOT_CHECKS, &small);
    let worst_root = reports
        .iter()
        .filter_map(|(_, r)| r.get("det-root-equivalence").and_then(|c| c.value))
        .fold(0.0f64, f64::max);
    let root_tol_ok = reports.iter().all(|(_, r)| {
        r.get("det-root-equivalence").and_then(|c| c.value).map_or(true, |v| v <= 1e-10)
            && r.get("principal-root-closure").and_then(|c| c.value).map_or(true, |v| v <= 1e-8)
    });
    lines.push(line(
        errors.is_empty() && bad.is_empty() && root_tol_ok && elapsed <= Duration::from_secs(120),
        format!("worst root mismatch {worst_root:.2e}, failures {:?}", bad),
    ));
    reports
}

fn hierarchy_of(chain: &ChainModel, k: usize, tol: &Tolerances) -> Analysis {
    let m = propose_metastable_set(chain, k, None, tol).unwrap();
    analyze(chain, &m.metastable, &SubsetMask::empty(chain.n()), 0.1, tol).unwrap()
}

fn duality_trend(tol: &Tolerances) -> Line {
    let start = Instant::now();
    let mut devs = Vec::new();
    for n in [16usize, 32, 64, 128] {
        let chain = preset(1, n, "double_well");
        let a = hierarchy_of(&chain, 2, tol);
        let h = &a.hierarchy;
        let d = eigen_time_duality(&chain, &h.metastable, &h.exclusions[1], tol).unwrap();
        devs.push(d.time_deviation.abs());
    }
    let elapsed = start.elapsed();
    let positive = devs.iter().all(|&d| d > 0.0);
    let decreasing = devs.windows(2).all(|w| w[1] < w[0]);
    line(
        positive && decreasing && devs[1] < 0.2 && elapsed <= Duration::from_secs(60),
        format!("|lambda*E[tau]-1| over N=16,32,64,128: {}, {elapsed:.1?}", sci(&devs)),
    )
}

fn triple_well_spectrum(tol: &Tolerances) -> (Line, Line) {
    let chain = preset(1, 64, "triple_well");
    let a = hierarchy_of(&chain, 3, tol);
    let rep = low_spectrum_verify(&chain, &a.hierarchy, tol).unwrap();
    let ratios: Vec<f64> = rep.pairing.iter().map(|p| p.ratio).collect();
    let gap = rep.gap.unwrap_or(0.0);
    let structure = rep.j0 == Some(3)
        && rep.count_below_gap == Some(3)
        && gap >= 10.0
        && rep.depth_order == Some(true)
        && ratios.iter().all(|r| (0.8..=1.25).contains(r));
    let low: Vec<f64> = rep.eigenvalues.iter().take(4).copied().collect();
    let five = line(
        structure,
        format!("eigenvalues {}, below gap {:?}, gap {gap:.3e}, ratios {ratios:.4?}", sci(&low), rep.count_below_gap),
    );

    let loc = rep.pairing.iter().flat_map(|p| p.localization.iter().map(|e| e.value)).fold(0.0f64, f64::max);
    let shape = rep.pairing.iter().map(|p| p.valley_deviation).fold(0.0f64, f64::max);
    let six = line(loc <= 0.1 && shape <= 0.1, format!("max |phi_j(m_k)| {loc:.3e}, max valley deviation {shape:.3e}"));
    (five, six)
}

fn two_state() -> (ChainModel, f64) {
    let q = 0.3;
    (ChainModel::from_dense(vec![vec![0.8, 0.2], vec![q, 1.0 - q]], None, None).unwrap(), q)
}

fn exit_law(tol: &Tolerances) -> Line {
    let (chain, q) = two_state();
    let target = SubsetMask::singleton(2, 0).unwrap();
    let re = residue_expansion(&chain, 1, &target, 1).unwrap();
    let exact = survival_exact(&chain, 1, &target, 200, 200).unwrap();
    let geometric = exact.values.iter().enumerate().all(|(t, &s)| (s - (1.0 - q).powi(t as i32)).abs() <= 1e-15);
    let residue = (re.residues[0].residue + 1.0).abs() <= 1e-14 && (re.residues[0].lambda - q).abs() <= 1e-15;

    let mut reconstruction = f64::NAN;
    let mut sup = Vec::new();
    for n in [16usize, 32, 64] {
        let chain = preset(1, n, "double_well");
        let h = hierarchy_of(&chain, 2, tol).hierarchy;
        let target = SubsetMask::singleton(chain.n(), h.points[0]).unwrap();
        if n == 32 {
            reconstruction = residue_expansion(&chain, h.points[1], &target, 1).unwrap().reconstruction_error;
        }
        sup.push(exponential_law_check(&chain, h.points[1], &target).unwrap().sup_deviation);
    }
    let decreasing = sup.windows(2).all(|w| w[1] < w[0]);
    line(
        geometric && residue && reconstruction <= 1e-6 && decreasing && sup[1] <= 0.1,
        format!(
            "two-state residue {:.16}, geometric {geometric}; N=32 reconstruction {reconstruction:.2e}; exponential-law sup over N=16,32,64 {}",
            re.residues[0].residue,
            sci(&sup)
        ),
    )
}

fn monte_carlo(tol: &Tolerances) -> Line {
    const SAMPLES: usize = 100_000;
    const SEED: u64 = 7;
    let mut cases: Vec<(String, ChainModel, usize, SubsetMask)> = Vec::new();
    let (chain, _) = two_state();
    cases.push(("two-state".into(), chain, 1, SubsetMask::singleton(2, 0).unwrap()));
    for n in [16usize, 32] {
        let chain = preset(1, n, "double_well");
        let h = hierarchy_of(&chain, 2, tol).hierarchy;
        let target = SubsetMask::singleton(chain.n(), h.points[0]).unwrap();
        cases.push((format!("double-well-{n}"), chain, h.points[1], target));
    }
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, chain, x, target) in &cases {
        let a = sample_exit_times(chain, *x, target, SAMPLES, SEED).unwrap();
        let b = sample_exit_times(chain, *x, target, SAMPLES, SEED).unwrap();
        let same = a.samples == b.samples;
        pass &= a.below_band && a.aborted == 0 && same;
        parts.push(format!("{name}: ks {:.2e} band {:.2e} repeatable {same}", a.ks, a.band));
    }
    line(pass, parts.join("; "))
}

fn determinism(reports: &[(String, VerifyReport)]) -> Line {
    let mut same = true;
    let mut runs = 0;
    // corpus reports were produced once already; rerun a sample of them
    let chains = corpus();
    for (name, first) in reports.iter().step_by(20) {
        let (_, chain, k) = chains.iter().find(|c| name.split('/').next() == Some(c.0.as_str())).expect("corpus member");
        let opts = VerifyOptions { auto_k: *k, ..VerifyOptions::default() };
        same &= to_canonical(first).unwrap() == to_canonical(&verify_chain(chain, &opts).unwrap()).unwrap();
        runs += 1;
    }
    let mc = VerifyOptions { mc_samples: 2000, seed: 3, ..VerifyOptions::default() };
    let chain = preset(1, 16, "double_well");
    let a = to_canonical(&verify_chain(&chain, &mc).unwrap()).unwrap();
    let b = to_canonical(&verify_chain(&chain, &mc).unwrap()).unwrap();
    same &= a == b;
    line(same, format!("{} reports regenerated byte for byte", runs + 1))
}

#[test]
fn acceptance_criteria() {
    let tol = Tolerances::default();
    let mut lines = Vec::new();
    let reports = corpus_criteria(&mut lines);
    lines.push(duality_trend(&tol));
    let (five, six) = triple_well_spectrum(&tol);
    lines.push(five);
    lines.push(six);
    lines.push(exit_law(&tol));
    lines.push(monte_carlo(&tol));
    lines.push(determinism(&reports));

    let titles = [
        "exact identity suite",
        "exact inequalities",
        "determinant roots match eigenvalues",
        "eigenvalue and exit-time duality trend",
        "triple-well low spectrum",
        "eigenfunction localization",
        "exit law",
        "Monte Carlo consistency",
        "determinism",
    ];
    for (k, (l, title)) in lines.iter().zip(titles).enumerate() {
        println!("criterion {} {}: {} ({})", k + 1, if l.pass { "PASS" } else { "FAIL" }, title, l.detail);
    }
    let failed: Vec<usize> = lines.iter().enumerate().filter(|(_, l)| !l.pass).map(|(k, _)| k + 1).collect();
    assert!(failed.is_empty(), "failed criteria {failed:?}");
}
