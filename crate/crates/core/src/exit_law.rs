//! Exit-time distributions: exact survival functions, their generating
//! functions, the expansion over Dirichlet eigenmodes, the exponential law
//! and Monte Carlo sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::chain::{dirichlet, ChainModel};
use crate::config::Tolerances;
use crate::error::{Error, Result};
use crate::hitting::{laplace_transform_tol, mean_hitting_time, shift_of};
use crate::linalg::ResolventSolver;
use crate::spectral::eigenpairs;
use crate::subset::SubsetMask;

/// Survival mass below which the exact series stops.
pub const TAIL_MASS: f64 = 1e-12;
/// Default cap on the length of exact survival series.
pub const DEFAULT_CAP: usize = 20_000_000;

#[derive(Debug, Clone, Serialize)]
pub struct SurvivalSeries {
    pub x: usize,
    pub target: SubsetMask,
    /// `P[τ^x_I > t]` for `t = 0, 1, …`.
    pub values: Vec<f64>,
    /// The cap was reached before the tail fell below the threshold.
    pub truncated: bool,
    /// `Σ_t P[τ > t]`.
    pub sum: f64,
}

fn check_start(chain: &ChainModel, x: usize, target: &SubsetMask) -> Result<()> {
    if x >= chain.n() {
        return Err(Error::Argument(format!("state {x} out of range")));
    }
    if target.is_empty() || target.is_full() {
        return Err(Error::Argument("target must be a nonempty proper subset".into()));
    }
    if target.contains(x) {
        return Err(Error::Argument(format!("start {x} lies in the target")));
    }
    Ok(())
}

/// Killed transition rows restricted to `I^c`, indexed by interior position.
struct KilledRows {
    interior: Vec<usize>,
    rows: Vec<Vec<(usize, f64)>>,
}

impl KilledRows {
    fn new(chain: &ChainModel, target: &SubsetMask) -> Self {
        let interior = target.complement().members().to_vec();
        let pos = |y: usize| interior.binary_search(&y).ok();
        let rows = interior
            .iter()
            .map(|&x| chain.row(x).iter().filter_map(|&(y, p)| pos(y).map(|k| (k, p))).collect())
            .collect();
        Self { interior, rows }
    }

    fn step(&self, mu: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (i, row) in self.rows.iter().enumerate() {
            let m = mu[i];
            if m == 0.0 {
                continue;
            }
            for &(k, p) in row {
                out[k] += m * p;
            }
        }
    }
}

/// `P[τ^x_I > t]` by forward propagation of the killed chain, extended until
/// the surviving mass drops below [`TAIL_MASS`] or `cap` steps.
pub fn survival_exact(chain: &ChainModel, x: usize, target: &SubsetMask, min_len: usize, cap: usize) -> Result<SurvivalSeries> {
    check_start(chain, x, target)?;
    let k = KilledRows::new(chain, target);
    let d = k.interior.len();
    let mut mu = vec![0.0; d];
    mu[k.interior.binary_search(&x).expect("start is interior")] = 1.0;
    let mut next = vec![0.0; d];
    let mut values = vec![1.0];
    let mut sum = 1.0;
    let mut truncated = false;
    loop {
        let t = values.len();
        let last = *values.last().unwrap();
        if t >= min_len.max(1) && last < TAIL_MASS {
            break;
        }
        if t > cap {
            truncated = true;
            break;
        }
        k.step(&mu, &mut next);
        std::mem::swap(&mut mu, &mut next);
        let s: f64 = mu.iter().sum();
        values.push(s);
        sum += s;
    }
    Ok(SurvivalSeries { x, target: target.clone(), values, truncated, sum })
}

/// `Σ_{t≥0} e^{ut} P[τ^x_I > t]` by forward propagation, stopped once the
/// current term is negligible. Returns the sum and the last term added.
pub fn survival_generating(chain: &ChainModel, x: usize, target: &SubsetMask, u: f64, cap: usize) -> Result<(f64, f64)> {
    check_start(chain, x, target)?;
    let k = KilledRows::new(chain, target);
    let mut mu = vec![0.0; k.interior.len()];
    mu[k.interior.binary_search(&x).expect("start is interior")] = 1.0;
    let mut next = vec![0.0; mu.len()];
    let growth = u.exp();
    let mut weight = 1.0;
    let mut sum = 1.0;
    let mut term = 1.0;
    for _ in 0..cap {
        k.step(&mu, &mut next);
        std::mem::swap(&mut mu, &mut next);
        weight *= growth;
        term = weight * mu.iter().sum::<f64>();
        sum += term;
        if term <= 1e-18 * sum {
            break;
        }
    }
    Ok((sum, term))
}

/// `P[τ^x_I > t]` at arbitrary times by repeated squaring of the killed
/// matrix, for horizons too long to iterate step by step.
pub fn survival_at(chain: &ChainModel, x: usize, target: &SubsetMask, times: &[u64]) -> Result<Vec<f64>> {
    check_start(chain, x, target)?;
    let op = dirichlet(chain, target)?;
    let d = op.dim();
    let a = op.matrix();
    let p = nalgebra::DMatrix::<f64>::identity(d, d) - a;
    let start = op.position(x).expect("start is interior");
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by_key(|&i| times[i]);
    let mut out = vec![0.0; times.len()];
    let mut row = nalgebra::RowDVector::<f64>::zeros(d);
    row[start] = 1.0;
    let mut now = 0u64;
    let mut powers: Vec<nalgebra::DMatrix<f64>> = vec![p];
    for i in order {
        let mut delta = times[i] - now;
        let mut bit = 0;
        while delta > 0 {
            while powers.len() <= bit {
                let last = powers.last().unwrap();
                powers.push(last * last);
            }
            if delta & 1 == 1 {
                row = &row * &powers[bit];
            }
            delta >>= 1;
            bit += 1;
        }
        now = times[i];
        out[i] = row.iter().sum();
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Real,
    /// `λ > 1`: the pole sits at `Im u = π`.
    Oscillating,
    Frozen,
}

/// Full eigenmode decomposition `P[τ^x_I > t] = Σ_j c_j (1−λ_j)^t`.
#[derive(Debug, Clone, Serialize)]
pub struct ModeExpansion {
    pub lambdas: Vec<f64>,
    /// Weights `c_j = −res_{u_j}`.
    pub weights: Vec<f64>,
    pub modes: Vec<Mode>,
}

/// `(1−λ)^t` through `ln(1−λ)`, which keeps its digits for tiny `λ` where
/// rounding `1−λ` would bias long horizons.
fn mode_power(lambda: f64, t: u64) -> f64 {
    if t == 0 {
        return 1.0;
    }
    if lambda < 1.0 {
        (t as f64 * (-lambda).ln_1p()).exp()
    } else if lambda == 1.0 {
        0.0
    } else {
        let size = (t as f64 * (lambda - 1.0).ln()).exp();
        if t % 2 == 1 {
            -size
        } else {
            size
        }
    }
}

impl ModeExpansion {
    pub fn new(chain: &ChainModel, x: usize, target: &SubsetMask) -> Result<Self> {
        check_start(chain, x, target)?;
        let op = dirichlet(chain, target)?;
        let pairs = eigenpairs(&op)?;
        let q = chain.q();
        let px = op.position(x).expect("start is interior");
        let mut weights = Vec::with_capacity(pairs.values.len());
        let mut modes = Vec::with_capacity(pairs.values.len());
        for (j, &lambda) in pairs.values.iter().enumerate() {
            let phi = &pairs.vectors[j];
            // ⟨P(·,I), φ⟩_Q / λ = ⟨1, φ⟩_Q since (1−P)^I 1 = P(·,I) off I;
            // the second form avoids dividing by tiny eigenvalues
            let mass: f64 = op.interior().iter().enumerate().map(|(i, &z)| q[z] * phi[i]).sum();
            weights.push(mass * phi[px]);
            modes.push(if lambda == 1.0 {
                Mode::Frozen
            } else if lambda > 1.0 {
                Mode::Oscillating
            } else {
                Mode::Real
            });
        }
        Ok(Self { lambdas: pairs.values, weights, modes })
    }

    pub fn survival(&self, t: u64, from: usize) -> f64 {
        self.lambdas[from..]
            .iter()
            .zip(&self.weights[from..])
            .map(|(&l, &c)| c * mode_power(l, t))
            .sum()
    }

    pub fn truncated(&self, t: u64, keep: usize) -> f64 {
        self.lambdas[..keep]
            .iter()
            .zip(&self.weights[..keep])
            .map(|(&l, &c)| c * mode_power(l, t))
            .sum()
    }

    /// `Σ_j c_j / (1 − e^u (1−λ_j))`, with the denominator written as
    /// `λ_j − (e^u − 1)(1−λ_j)` so tiny `λ_j` and `u` keep their digits.
    pub fn generating(&self, u: f64) -> f64 {
        let e = u.exp_m1();
        self.lambdas.iter().zip(&self.weights).map(|(&l, &c)| c / (l - e * (1.0 - l))).sum()
    }

    /// Real poles `u_j = −ln(1−λ_j)`.
    pub fn poles(&self) -> Vec<Option<f64>> {
        self.lambdas.iter().map(|&l| (l < 1.0).then(|| -(-l).ln_1p())).collect()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LaplaceSurvival {
    pub u: f64,
    /// `(G^x_{I,I}(u) − 1)/(e^u − 1)`, or the mean at `u = 0`.
    pub via_transform: f64,
    /// `(1−λ) [((1−P)^I − λ)^{-1} 1](x)`.
    pub via_resolvent: f64,
    /// Sum over eigenmodes.
    pub via_spectrum: f64,
    pub relative_gap: f64,
    /// `u` within a relative 1e-9 of a pole.
    pub near_pole: bool,
}

/// Generating function `Σ_t e^{ut} P[τ^x_I > t]` three ways.
pub fn laplace_survival(chain: &ChainModel, x: usize, target: &SubsetMask, u: f64, tol: &Tolerances) -> Result<LaplaceSurvival> {
    check_start(chain, x, target)?;
    let modes = ModeExpansion::new(chain, x, target)?;
    let principal = modes.lambdas[0];
    let lambda = shift_of(u);
    crate::hitting::Abscissa::from_lambda(principal).admit(u, tol.abscissa_margin)?;
    let via_transform = if u == 0.0 {
        mean_hitting_time(chain, target)?[x]
    } else {
        let g = laplace_transform_tol(chain, target, target, u, tol)?.values[x];
        (g - 1.0) / u.exp_m1()
    };
    let op = dirichlet(chain, target)?;
    let solver = ResolventSolver::new(&op, lambda, Some(principal))?;
    let r = solver.solve(&vec![1.0; op.dim()])?;
    let via_resolvent = (1.0 - lambda) * r[op.position(x).unwrap()];
    let via_spectrum = modes.generating(u);
    let near_pole = modes.poles().iter().flatten().any(|&p| (u - p).abs() <= 1e-9 * p.abs());
    let scale = via_resolvent.abs();
    let relative_gap = (via_transform - via_resolvent).abs().max((via_spectrum - via_resolvent).abs()) / scale;
    Ok(LaplaceSurvival { u, via_transform, via_resolvent, via_spectrum, relative_gap, near_pole })
}

#[derive(Debug, Clone, Serialize)]
pub struct Residue {
    pub j: usize,
    pub lambda: f64,
    pub pole: Option<f64>,
    pub mode: Mode,
    pub residue: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ResidueExpansion {
    pub x: usize,
    pub target: SubsetMask,
    /// Number of low poles kept in the truncated expansion.
    pub keep: usize,
    pub residues: Vec<Residue>,
    /// `−Σ_j res_j` over all poles, equal to one.
    pub sum_rule: f64,
    pub mean: f64,
    /// `sup_t |truncated + modal remainder − exact|`.
    pub reconstruction_error: f64,
    /// `sup_t |exact − truncated|`.
    pub remainder_sup: f64,
    /// Fitted decay rate of `exact − truncated` in the late window.
    pub remainder_rate: Option<f64>,
    /// `u_{keep+1}`, the first discarded pole.
    pub first_discarded_pole: Option<f64>,
    pub horizon: usize,
    pub truncated_series: bool,
}

/// `ln` of the smallest modal term worth adding.
const UNDERFLOW_LN: f64 = -700.0;

/// Exit-time survival as a sum over the poles of its generating function.
pub fn residue_expansion(chain: &ChainModel, x: usize, target: &SubsetMask, keep: usize) -> Result<ResidueExpansion> {
    let modes = ModeExpansion::new(chain, x, target)?;
    let keep = keep.min(modes.lambdas.len());
    let exact = survival_exact(chain, x, target, 1, DEFAULT_CAP)?;
    let mut recon = 0.0f64;
    let mut rem_sup = 0.0f64;
    let mut rem = Vec::with_capacity(exact.values.len());
    // last step at which each mode still contributes above underflow
    let lifetimes: Vec<u64> = modes
        .lambdas
        .iter()
        .zip(&modes.weights)
        .map(|(&l, &c)| {
            let decay = -(1.0 - l).abs().ln();
            if c == 0.0 || l == 1.0 {
                0
            } else if decay > 0.0 {
                ((c.abs().ln() - UNDERFLOW_LN) / decay).ceil().min(u64::MAX as f64) as u64
            } else {
                u64::MAX
            }
        })
        .collect();
    let live = |t: u64, range: std::ops::Range<usize>| -> f64 {
        range.filter(|&j| t <= lifetimes[j]).map(|j| modes.weights[j] * mode_power(modes.lambdas[j], t)).sum()
    };
    let all = modes.lambdas.len();
    for (t, &s) in exact.values.iter().enumerate() {
        let trunc = live(t as u64, 0..keep);
        let tail = live(t as u64, keep..all);
        recon = recon.max((trunc + tail - s).abs());
        rem_sup = rem_sup.max((s - trunc).abs());
        rem.push(s - trunc);
    }
    let remainder_rate = decay_rate(&rem);
    let poles = modes.poles();
    let residues = (0..modes.lambdas.len())
        .map(|j| Residue { j: j + 1, lambda: modes.lambdas[j], pole: poles[j], mode: modes.modes[j], residue: -modes.weights[j] })
        .collect();
    Ok(ResidueExpansion {
        x,
        target: target.clone(),
        keep,
        residues,
        sum_rule: modes.weights.iter().sum(),
        mean: mean_hitting_time(chain, target)?[x],
        reconstruction_error: recon,
        remainder_sup: rem_sup,
        remainder_rate,
        first_discarded_pole: poles.get(keep).copied().flatten(),
        horizon: exact.values.len(),
        truncated_series: exact.truncated,
    })
}

/// Rounding drift per step of a survival difference of order one; forward
/// propagation accumulates about one rounding error per step.
const REMAINDER_NOISE: f64 = 4.0 * f64::EPSILON;

/// Exponential decay rate of a sequence over the stretch before it first
/// sinks to rounding level.
fn decay_rate(v: &[f64]) -> Option<f64> {
    // the running maximum ignores late rounding drift, which can outgrow
    // the early remainder over long horizons
    let mut top = 0.0f64;
    let sunk = v.iter().enumerate().position(|(t, r)| {
        top = top.max(r.abs());
        r.abs() <= (top * 1e-6).max(REMAINDER_NOISE * (t + 1) as f64)
    })?;
    let end = sunk.checked_sub(1)?;
    let start = end / 2;
    if end <= start + 1 || v[start] == 0.0 || v[end] == 0.0 {
        return None;
    }
    let ratio = v[end].abs() / v[start].abs();
    Some(-ratio.ln() / (end - start) as f64)
}

#[derive(Debug, Clone, Serialize)]
pub struct ExponentialLaw {
    pub x: usize,
    pub target: SubsetMask,
    pub mean: f64,
    /// `sup_t |P[τ > t] − e^{−t/mean}|` over integer `t ∈ [0.1, 10]·mean`.
    pub sup_deviation: f64,
    /// Least-squares rate in units of `1/mean`.
    pub theta: f64,
    pub inverse_mean: f64,
    pub grid_points: usize,
    /// Every integer time of the window was used.
    pub integer_grid: bool,
}

/// Longest window evaluated at every integer time.
pub const INTEGER_WINDOW: f64 = 1e7;

/// Deviation of the exit time from an exponential law with the same mean.
pub fn exponential_law_check(chain: &ChainModel, x: usize, target: &SubsetMask) -> Result<ExponentialLaw> {
    check_start(chain, x, target)?;
    let mean = mean_hitting_time(chain, target)?[x];
    let lo = (0.1 * mean).ceil().max(0.0) as u64;
    let hi = (10.0 * mean).floor() as u64;
    let (times, surv, integer_grid) = if 10.0 * mean <= INTEGER_WINDOW {
        let s = survival_exact(chain, x, target, hi as usize + 1, hi as usize + 1)?;
        let times: Vec<u64> = (lo..=hi).collect();
        let surv = times.iter().map(|&t| s.values[t as usize]).collect();
        (times, surv, true)
    } else {
        let mut times: Vec<u64> = (0..=1000).map(|k| (lo as f64 * (hi as f64 / lo as f64).powf(k as f64 / 1000.0)).round() as u64).collect();
        times.dedup();
        let surv = survival_at(chain, x, target, &times)?;
        (times, surv, false)
    };
    let mut sup = 0.0f64;
    let (mut sx, mut sy, mut sxx, mut sxy, mut m) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (&t, &s) in times.iter().zip(&surv) {
        let st = t as f64 / mean;
        sup = sup.max((s - (-st).exp()).abs());
        if s > 0.0 {
            let ly = s.ln();
            sx += st;
            sy += ly;
            sxx += st * st;
            sxy += st * ly;
            m += 1.0;
        }
    }
    let theta = if m >= 2.0 { -(m * sxy - sx * sy) / (m * sxx - sx * sx) } else { f64::NAN };
    Ok(ExponentialLaw {
        x,
        target: target.clone(),
        mean,
        sup_deviation: sup,
        theta,
        inverse_mean: 1.0 / mean,
        grid_points: times.len(),
        integer_grid,
    })
}

/// Trajectories per random stream.
pub const CHUNK: usize = 1024;
/// Trajectories longer than this are abandoned.
pub const STEP_LIMIT: u64 = 1_000_000_000;

#[derive(Debug, Clone, Serialize)]
pub struct MonteCarlo {
    pub x: usize,
    pub target: SubsetMask,
    pub count: usize,
    pub seed: u64,
    #[serde(skip)]
    pub samples: Vec<u64>,
    pub sample_mean: f64,
    pub exact_mean: f64,
    /// Kolmogorov distance to the exact law.
    pub ks: f64,
    /// `1.36/√count`.
    pub band: f64,
    pub below_band: bool,
    /// Trajectories stopped at the step limit.
    pub aborted: usize,
}

struct Sampler {
    hold: Vec<f64>,
    /// Cumulative off-diagonal probabilities, normalised to end at one.
    moves: Vec<Vec<(usize, f64)>>,
    killed: Vec<bool>,
}

impl Sampler {
    fn new(chain: &ChainModel, target: &SubsetMask) -> Self {
        let n = chain.n();
        let mut hold = vec![0.0; n];
        let mut moves = Vec::with_capacity(n);
        for x in 0..n {
            hold[x] = chain.p(x, x);
            let out = chain.leave_rate(x);
            let mut acc = 0.0;
            let mut cum = Vec::new();
            for &(y, p) in chain.row(x) {
                if y != x {
                    acc += p / out;
                    cum.push((y, acc));
                }
            }
            if let Some(last) = cum.last_mut() {
                last.1 = 1.0;
            }
            moves.push(cum);
        }
        Self { hold, moves, killed: target.flags().to_vec() }
    }

    /// One exit time; holding runs are drawn as geometric variables.
    fn run(&self, x: usize, rng: &mut ChaCha8Rng) -> Option<u64> {
        let mut at = x;
        let mut t = 0u64;
        loop {
            let h = self.hold[at];
            if h > 0.0 {
                let u: f64 = 1.0 - rng.random::<f64>();
                let extra = (u.ln() / h.ln()).floor();
                if !(extra < STEP_LIMIT as f64) {
                    return None;
                }
                t += extra as u64;
            }
            t += 1;
            let v: f64 = rng.random();
            let row = &self.moves[at];
            let k = row.partition_point(|&(_, c)| c <= v).min(row.len() - 1);
            at = row[k].0;
            if self.killed[at] {
                return Some(t);
            }
            if t > STEP_LIMIT {
                return None;
            }
        }
    }
}

/// Exit times of `count` independent trajectories. Chunk `c` of
/// [`CHUNK`] trajectories draws from stream `c` of a generator seeded with
/// `seed`, so the sample does not depend on the number of worker threads.
pub fn sample_exit_times(chain: &ChainModel, x: usize, target: &SubsetMask, count: usize, seed: u64) -> Result<MonteCarlo> {
    check_start(chain, x, target)?;
    if count == 0 {
        return Err(Error::Argument("count must be at least 1".into()));
    }
    let sampler = Sampler::new(chain, target);
    let chunks = count.div_ceil(CHUNK);
    let parts: Vec<(Vec<u64>, usize)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let len = CHUNK.min(count - c * CHUNK);
            let mut out = Vec::with_capacity(len);
            let mut aborted = 0;
            for _ in 0..len {
                match sampler.run(x, &mut rng) {
                    Some(t) => out.push(t),
                    None => aborted += 1,
                }
            }
            (out, aborted)
        })
        .collect();
    let aborted = parts.iter().map(|p| p.1).sum();
    let samples: Vec<u64> = parts.into_iter().flat_map(|p| p.0).collect();
    let longest = samples.iter().copied().max().unwrap_or(0) as usize;
    let exact = survival_exact(chain, x, target, longest + 1, longest.max(DEFAULT_CAP))?;
    let ks = kolmogorov_distance(&samples, &exact.values);
    let band = 1.36 / (count as f64).sqrt();
    let exact_mean = mean_hitting_time(chain, target)?[x];
    Ok(MonteCarlo {
        x,
        target: target.clone(),
        count,
        seed,
        sample_mean: samples.iter().map(|&t| t as f64).sum::<f64>() / samples.len().max(1) as f64,
        exact_mean,
        ks,
        band,
        below_band: ks < band && aborted == 0,
        aborted,
        samples,
    })
}

/// `sup_t |F_n(t) − F(t)|` for integer-valued samples against the law with
/// survival function `survival`.
pub fn kolmogorov_distance(samples: &[u64], survival: &[f64]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let mut sorted = samples.to_vec();
    sorted.sort_unstable();
    let n = sorted.len() as f64;
    let cdf = |t: u64| 1.0 - survival.get(t as usize).copied().unwrap_or(0.0);
    let mut worst = 0.0f64;
    let mut i = 0;
    let mut prev = 0u64;
    while i < sorted.len() {
        let t = sorted[i];
        // just below t the empirical CDF equals i/n
        if t > 0 && t - 1 >= prev {
            worst = worst.max((i as f64 / n - cdf(t - 1)).abs());
        }
        while i < sorted.len() && sorted[i] == t {
            i += 1;
        }
        worst = worst.max((i as f64 / n - cdf(t)).abs());
        prev = t;
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::landscape::random_reversible;

    fn two_state(p: f64, q: f64) -> ChainModel {
        ChainModel::from_dense(vec![vec![1.0 - p, p], vec![q, 1.0 - q]], None, None).unwrap()
    }

    #[test]
    fn two_state_geometric() {
        let p = 0.25;
        let c = two_state(p, 0.5);
        let b = SubsetMask::new(2, [1]).unwrap();
        let s = survival_exact(&c, 0, &b, 1, 1000).unwrap();
        for (t, &v) in s.values.iter().enumerate() {
            assert!((v - (1.0 - p).powi(t as i32)).abs() < 1e-15);
        }
        assert!((s.sum - 1.0 / p).abs() < 1e-10);
        let r = residue_expansion(&c, 0, &b, 1).unwrap();
        assert_eq!(r.residues.len(), 1);
        assert!((r.residues[0].residue + 1.0).abs() < 1e-15);
        assert!(r.remainder_sup < 1e-15);
        let l = laplace_survival(&c, 0, &b, 0.1, &Tolerances::default()).unwrap();
        let want = 1.0 / (1.0 - 0.1f64.exp() * (1.0 - p));
        assert!((l.via_transform - want).abs() < 1e-12 * want);
        assert!((l.via_spectrum - want).abs() < 1e-12 * want);
        let l0 = laplace_survival(&c, 0, &b, 0.0, &Tolerances::default()).unwrap();
        assert!((l0.via_transform - 4.0).abs() < 1e-12);
    }

    #[test]
    fn powering_matches_iteration() {
        let c = random_reversible(8, 0.4, 3);
        let i = SubsetMask::new(8, [0]).unwrap();
        let s = survival_exact(&c, 5, &i, 200, 200).unwrap();
        let times = [0u64, 1, 7, 64, 150, 199];
        let p = survival_at(&c, 5, &i, &times).unwrap();
        for (k, &t) in times.iter().enumerate() {
            assert!((p[k] - s.values[t as usize]).abs() < 1e-13);
        }
    }

    #[test]
    fn sum_rule_and_generating_function() {
        let c = random_reversible(8, 0.4, 9);
        let i = SubsetMask::new(8, [2]).unwrap();
        let r = residue_expansion(&c, 6, &i, 1).unwrap();
        assert!((r.sum_rule - 1.0).abs() < 1e-10);
        assert!(r.reconstruction_error < 1e-10);
        let modes = ModeExpansion::new(&c, 6, &i).unwrap();
        let u1 = modes.poles()[0].unwrap();
        let l = laplace_survival(&c, 6, &i, u1 / 2.0, &Tolerances::default()).unwrap();
        assert!(l.relative_gap < 1e-10, "{l:?}");
    }

    #[test]
    fn exponential_law_two_state() {
        let c = two_state(0.01, 0.5);
        let b = SubsetMask::new(2, [1]).unwrap();
        let e = exponential_law_check(&c, 0, &b).unwrap();
        assert!(e.sup_deviation <= 0.01, "{}", e.sup_deviation);
        let c = two_state(0.5, 0.5);
        let e = exponential_law_check(&c, 0, &b).unwrap();
        assert!(e.sup_deviation > 0.05);
    }

    #[test]
    fn sampling_is_deterministic_and_consistent() {
        let c = two_state(0.25, 0.5);
        let b = SubsetMask::new(2, [1]).unwrap();
        let a = sample_exit_times(&c, 0, &b, 20_000, 7).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let s = pool.install(|| sample_exit_times(&c, 0, &b, 20_000, 7).unwrap());
        assert_eq!(a.samples, s.samples);
        assert!(a.below_band, "ks {} band {}", a.ks, a.band);
        let one = sample_exit_times(&c, 0, &b, 1, 1).unwrap();
        assert_eq!(one.samples.len(), 1);
    }

    #[test]
    fn kolmogorov_of_exact_quantiles_is_small() {
        let surv: Vec<f64> = (0..100).map(|t| 0.5f64.powi(t)).collect();
        let samples = vec![1, 1, 2, 3];
        let d = kolmogorov_distance(&samples, &surv);
        assert!((d - 0.125).abs() < 1e-12, "{d}");
    }
}
