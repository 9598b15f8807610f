use std::collections::BTreeMap;
use std::path::Path;

use metaspec::exit_law::{
    exponential_law_check, laplace_survival, residue_expansion, sample_exit_times, survival_exact, ModeExpansion,
    DEFAULT_CAP,
};
use metaspec::hitting::{hitting_probability, laplace_transform, mean_time_conditioned, Abscissa};
use metaspec::io::{read_chain, write_chain_json, write_csv};
use metaspec::landscape::PotentialSpec;
use metaspec::metastability::{analyze, propose_metastable_set, Analysis, DEFAULT_SEPARATION};
use metaspec::report::to_value;
use metaspec::spectral::{det_g, dirichlet_spectrum, low_spectrum_verify, principal_of, SpectralReport};
use metaspec::verify::{verify_chain, Verdict, VerifyOptions};
use metaspec::{ChainModel, SubsetMask, Tolerances};
use serde::Serialize;
use serde_json::{json, Value};

use crate::{ChainArgs, Command, Context, Failure, MetastableArgs, Outcome};

type Run = Result<(Value, Outcome), Failure>;

pub fn dispatch(command: &Command, ctx: &mut Context) -> Run {
    match command {
        Command::Build { spec, out } => build(ctx, spec, out),
        Command::Hit { chain, target, avoid, u, mean } => hit(ctx, chain, target, avoid.as_deref(), *u, *mean),
        Command::Analyze { chain, set } => analyze_cmd(ctx, chain, set),
        Command::Spectrum { chain, exclude, k, verify } => spectrum(ctx, chain, exclude.as_deref(), *k, verify.as_deref()),
        Command::Exitlaw { chain, from, target, keep, mc, seed } => exitlaw(ctx, chain, from, target, *keep, *mc, *seed),
        Command::Verify { chain, set, mc, seed } => verify(ctx, chain, set, *mc, *seed),
    }
}

fn load_chain(ctx: &mut Context, args: &ChainArgs) -> Result<ChainModel, Failure> {
    ctx.inputs.note(&args.chain)?;
    if let Some(m) = &args.measure {
        ctx.inputs.note(m)?;
    }
    Ok(read_chain(&args.chain, args.measure.as_deref())?.validated(&ctx.tol)?)
}

fn states(chain: &ChainModel, list: &str) -> Result<SubsetMask, Failure> {
    let mut members = Vec::new();
    for key in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        members.push(chain.state_index(key)?);
    }
    Ok(SubsetMask::new(chain.n(), members)?)
}

fn optional_states(chain: &ChainModel, list: Option<&str>) -> Result<SubsetMask, Failure> {
    match list {
        Some(l) => states(chain, l),
        None => Ok(SubsetMask::empty(chain.n())),
    }
}

fn labels(chain: &ChainModel, set: &SubsetMask) -> Vec<String> {
    set.iter().map(|x| chain.label(x)).collect()
}

fn csv_path(ctx: &Context, name: &str) -> Option<std::path::PathBuf> {
    ctx.csv_dir.as_ref().map(|d| d.join(name))
}

/// Named pass/fail flags of a command with their severities.
#[derive(Default, Serialize)]
struct Checks(BTreeMap<&'static str, CheckFlag>);

#[derive(Serialize)]
struct CheckFlag {
    hard: bool,
    pass: bool,
}

impl Checks {
    fn hard(&mut self, name: &'static str, pass: bool) {
        self.0.insert(name, CheckFlag { hard: true, pass });
    }

    fn soft(&mut self, name: &'static str, pass: bool) {
        self.0.insert(name, CheckFlag { hard: false, pass });
    }

    fn outcome(&self) -> Outcome {
        self.0
            .values()
            .filter(|c| !c.pass)
            .map(|c| if c.hard { Outcome::Hard } else { Outcome::Soft })
            .max()
            .unwrap_or(Outcome::Pass)
    }
}

fn build(ctx: &mut Context, spec_path: &Path, out: &Path) -> Run {
    let bytes = ctx.inputs.read(spec_path)?;
    let spec: PotentialSpec =
        serde_json::from_slice(&bytes).map_err(|e| Failure::Input(format!("{}: {e}", spec_path.display())))?;
    let chain = spec.build()?.validated(&ctx.tol)?;
    write_chain_json(&chain, out)?;
    let result = json!({
        "spec": to_value(&spec)?,
        "states": chain.n(),
        "edges": chain.edge_count(),
        "out": out.display().to_string(),
    });
    Ok((result, Outcome::Pass))
}

fn hit(ctx: &mut Context, args: &ChainArgs, target: &str, avoid: Option<&str>, u: Option<f64>, mean: bool) -> Run {
    let chain = load_chain(ctx, args)?;
    let target = states(&chain, target)?;
    let avoid = optional_states(&chain, avoid)?;
    let solution = match u {
        Some(u) => laplace_transform(&chain, &target, &avoid, u)?,
        None => hitting_probability(&chain, &target, &avoid)?,
    };
    let mut checks = Checks::default();
    checks.hard("solve-residual", solution.residual <= ctx.tol.identity);
    let mut result = json!({
        "target": labels(&chain, &target),
        "avoid": labels(&chain, &avoid),
        "u": u,
        "values": solution.values,
        "residual": solution.residual,
    });
    if mean {
        let cm = mean_time_conditioned(&chain, &target, &avoid)?;
        checks.hard("conditioned-mean-two-ways", cm.cross_check <= ctx.tol.identity);
        result["mean"] = json!({
            "values": cm.solution.values,
            "via_green": cm.via_green,
            "cross_check": cm.cross_check,
        });
    }
    result["checks"] = to_value(&checks)?;
    Ok((result, checks.outcome()))
}

fn metastable_set(chain: &ChainModel, set: &MetastableArgs, default_k: Option<usize>, tol: &Tolerances) -> Result<SubsetMask, Failure> {
    match (&set.metastable, set.auto.or(default_k)) {
        (Some(list), _) => states(chain, list),
        (None, Some(k)) => Ok(propose_metastable_set(chain, k, None, tol)?.metastable),
        (None, None) => Err(Failure::Input("give --metastable or --auto".into())),
    }
}

fn analysis_checks(a: &Analysis) -> Checks {
    let mut checks = Checks::default();
    checks.soft("metastable-separation", a.spec.qualifies);
    checks.soft("genericity", !a.genericity.degenerate && a.genericity.eps <= a.spec.threshold);
    checks.soft("valley-overlap-factor-two", a.valleys.overlap_ratio <= 2.0);
    checks.hard("valley-overlap-factor-three", a.valleys.overlap_ratio <= 3.0);
    checks.soft("hierarchy-monotone", a.hierarchy.monotone == Some(true));
    if let Some(c) = &a.capacities {
        checks.hard("capacity-triangle", c.triangle_violations.is_empty());
        checks.hard("capacity-ultrametric", c.ultrametric_defect <= 3f64.ln() * (1.0 + 1e-9));
        checks.hard("capacity-sandwich", c.sandwich_violations == 0);
    }
    checks
}

fn analyze_cmd(ctx: &mut Context, args: &ChainArgs, set: &MetastableArgs) -> Run {
    let chain = load_chain(ctx, args)?;
    let metastable = metastable_set(&chain, set, None, &ctx.tol)?;
    let initial = optional_states(&chain, set.exclude.as_deref())?;
    let a = analyze(&chain, &metastable, &initial, set.threshold, &ctx.tol)?;
    if let Some(c) = &a.capacities {
        let header: Vec<String> = c.points.iter().map(|&m| chain.label(m)).collect();
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        if let Some(p) = csv_path(ctx, "capacity.csv") {
            write_csv(&p, &header, &c.capacity)?;
        }
        if let Some(p) = csv_path(ctx, "energy.csv") {
            write_csv(&p, &header, &c.energy)?;
        }
    }
    let checks = analysis_checks(&a);
    let result = json!({
        "metastable": labels(&chain, &metastable),
        "hierarchy_labels": a.hierarchy.points.iter().map(|&m| chain.label(m)).collect::<Vec<_>>(),
        "spec": to_value(&a.spec)?,
        "valleys": to_value(&a.valleys)?,
        "capacities": to_value(&a.capacities)?,
        "genericity": to_value(&a.genericity)?,
        "hierarchy": to_value(&a.hierarchy)?,
        "checks": to_value(&checks)?,
    });
    Ok((result, checks.outcome()))
}

/// Indices of a state set stored in a report: either an array of indices
/// or a subset object with a `members` array.
fn indices_in(v: &Value) -> Option<Vec<usize>> {
    let list = v.get("members").unwrap_or(v).as_array()?;
    list.iter().map(|x| x.as_u64().map(|i| i as usize)).collect()
}

/// Finds the hierarchy object in a hierarchy file or an analyze report.
fn hierarchy_in(v: &Value) -> Option<&Value> {
    [v.pointer("/result/hierarchy"), v.get("hierarchy"), Some(v)]
        .into_iter()
        .flatten()
        .find(|h| h.get("metastable").is_some())
}

fn spectral_checks(report: &SpectralReport, tol: &Tolerances, checks: &mut Checks) {
    let residual = report.residuals.iter().fold(0.0f64, |a, &r| a.max(r));
    checks.hard("eigen-residual", residual <= tol.identity);
    checks.hard("eigen-orthonormality", report.orthonormality_defect <= tol.identity);
}

fn spectrum(ctx: &mut Context, args: &ChainArgs, exclude: Option<&str>, k: usize, verify: Option<&Path>) -> Run {
    let chain = load_chain(ctx, args)?;
    let mut initial = optional_states(&chain, exclude)?;
    let mut checks = Checks::default();
    let Some(path) = verify else {
        let report = dirichlet_spectrum(&chain, &initial, k)?;
        spectral_checks(&report, &ctx.tol, &mut checks);
        let result = json!({"spectrum": to_value(&report)?, "checks": to_value(&checks)?});
        return Ok((result, checks.outcome()));
    };

    let bytes = ctx.inputs.read(path)?;
    let file: Value = serde_json::from_slice(&bytes).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
    let h = hierarchy_in(&file).ok_or_else(|| Failure::Input(format!("{}: no hierarchy found", path.display())))?;
    let bad = || Failure::Input(format!("{}: malformed state set", path.display()));
    let metastable = SubsetMask::new(chain.n(), indices_in(&h["metastable"]).ok_or_else(bad)?)?;
    if let Some(v) = h.get("initial") {
        let from_file = SubsetMask::new(chain.n(), indices_in(v).ok_or_else(bad)?)?;
        if exclude.is_some() && from_file != initial {
            return Err(Failure::Input("--exclude differs from the exclusion set of the hierarchy file".into()));
        }
        initial = from_file;
    }
    let a = analyze(&chain, &metastable, &initial, DEFAULT_SEPARATION, &ctx.tol)?;
    let hierarchy = a.hierarchy;
    let report = low_spectrum_verify(&chain, &hierarchy, &ctx.tol)?;
    spectral_checks(&report, &ctx.tol, &mut checks);
    checks.hard("eigen-interlacing", report.interlacing == Some(true));
    checks.soft("spectral-count", report.count_matches == Some(true));
    checks.soft("spectral-depth-order", report.depth_order == Some(true));
    checks.soft("eigen-pairing", report.pairing.iter().all(|p| (0.8..=1.25).contains(&p.ratio)));
    if let Some(points) = h.get("points").and_then(indices_in) {
        checks.soft("hierarchy-matches-file", points == hierarchy.points);
    }

    if let Some(p) = csv_path(ctx, "det.csv") {
        let points = metastable.difference(&initial);
        let rows = det_samples(&chain, &initial, &points, &report)?;
        write_csv(&p, &["lambda", "u", "det"], &rows)?;
    }
    let result = json!({
        "metastable": labels(&chain, &metastable),
        "exclusion": labels(&chain, &initial),
        "hierarchy": to_value(&hierarchy)?,
        "spectrum": to_value(&report)?,
        "checks": to_value(&checks)?,
    });
    Ok((result, checks.outcome()))
}

/// `(λ, u, det 𝒢(u))` on a log grid below the window top, for plotting.
fn det_samples(chain: &ChainModel, i: &SubsetMask, j: &SubsetMask, report: &SpectralReport) -> Result<Vec<Vec<f64>>, Failure> {
    const SAMPLES: usize = 200;
    if j.is_empty() {
        return Ok(Vec::new());
    }
    let top = 0.999 * principal_of(chain, &i.union(j))?.min(1.0);
    let smallest = report.eigenvalues.iter().copied().filter(|&l| l > 0.0).fold(top, f64::min);
    let bottom = 1e-3 * smallest;
    let mut rows = Vec::with_capacity(SAMPLES);
    for s in 0..SAMPLES {
        let lambda = bottom * (top / bottom).powf(s as f64 / (SAMPLES - 1) as f64);
        let u = -(-lambda).ln_1p();
        rows.push(vec![lambda, u, det_g(chain, i, j, u)?.determinant]);
    }
    Ok(rows)
}

fn exitlaw(ctx: &mut Context, args: &ChainArgs, from: &str, target: &str, keep: usize, mc: usize, seed: u64) -> Run {
    let chain = load_chain(ctx, args)?;
    let x = chain.state_index(from)?;
    let target = states(&chain, target)?;
    let tol = &ctx.tol;
    let mut checks = Checks::default();

    let residues = residue_expansion(&chain, x, &target, keep)?;
    let law = exponential_law_check(&chain, x, &target)?;
    let laplace = laplace_survival(&chain, x, &target, Abscissa::of(&chain, &target)?.midpoint(), tol)?;
    checks.hard("residue-sum-rule", (residues.sum_rule - 1.0).abs() <= tol.identity);
    checks.hard("laplace-three-ways", laplace.relative_gap <= tol.identity);
    checks.soft("principal-residue", (residues.residues[0].residue + 1.0).abs() <= 0.05);
    checks.soft("exponential-law", law.sup_deviation <= 0.1);

    let monte_carlo = if mc > 0 {
        let run = sample_exit_times(&chain, x, &target, mc, seed)?;
        checks.soft("monte-carlo", run.below_band);
        let mut v = to_value(&run)?;
        if let Some(obj) = v.as_object_mut() {
            obj.remove("samples");
        }
        v
    } else {
        Value::Null
    };

    if let Some(p) = csv_path(ctx, "survival.csv") {
        const ROWS: usize = 100_000;
        let exact = survival_exact(&chain, x, &target, 1, DEFAULT_CAP)?;
        let modes = ModeExpansion::new(&chain, x, &target)?;
        let stride = exact.values.len().div_ceil(ROWS).max(1);
        let rows: Vec<Vec<f64>> = exact
            .values
            .iter()
            .enumerate()
            .step_by(stride)
            .map(|(t, &s)| {
                let truncated = modes.truncated(t as u64, keep);
                vec![t as f64, s, truncated, s - truncated]
            })
            .collect();
        write_csv(&p, &["t", "survival", "truncated", "remainder"], &rows)?;
    }

    let result = json!({
        "from": chain.label(x),
        "target": labels(&chain, &target),
        "residues": to_value(&residues)?,
        "exponential_law": to_value(&law)?,
        "laplace": to_value(&laplace)?,
        "monte_carlo": monte_carlo,
        "checks": to_value(&checks)?,
    });
    Ok((result, checks.outcome()))
}

fn verify(ctx: &mut Context, args: &ChainArgs, set: &MetastableArgs, mc: usize, seed: u64) -> Run {
    let chain = load_chain(ctx, args)?;
    let defaults = VerifyOptions::default();
    let metastable = metastable_set(&chain, set, Some(defaults.auto_k), &ctx.tol)?;
    let initial = optional_states(&chain, set.exclude.as_deref())?;
    let opts = VerifyOptions {
        metastable: Some(metastable),
        initial: Some(initial),
        threshold: set.threshold,
        mc_samples: mc,
        seed,
        tol: ctx.tol.clone(),
        ..defaults
    };
    let report = verify_chain(&chain, &opts)?;
    let outcome = match report.verdict {
        Verdict::Pass => Outcome::Pass,
        Verdict::SoftFail => Outcome::Soft,
        Verdict::HardFail => Outcome::Hard,
    };
    Ok((json!({"verify": to_value(&report)?}), outcome))
}
