//! Reversible chains from potential landscapes on one- and two-dimensional
//! grids, plus random conductance networks for property tests.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chain::ChainModel;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Dynamics {
    #[default]
    Metropolis,
    HeatBath,
}

/// Potential on the grid `{0, 1/N, …, (N−1)/N}^d`, either a named preset
/// with parameters or an explicit table in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialSpec {
    pub d: u8,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, f64>,
    #[serde(rename = "F", default, skip_serializing_if = "Option::is_none")]
    pub f: Option<Vec<f64>>,
    #[serde(default)]
    pub dynamics: Dynamics,
    /// Inverse temperature; defaults to `N`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
}

pub const PRESETS: &[&str] = &["flat", "single_well", "double_well", "triple_well"];

impl PotentialSpec {
    pub fn preset(d: u8, n: usize, name: &str, params: &[(&str, f64)]) -> Self {
        Self {
            d,
            n,
            preset: Some(name.to_string()),
            params: params.iter().map(|&(k, v)| (k.to_string(), v)).collect(),
            f: None,
            dynamics: Dynamics::Metropolis,
            beta: None,
        }
    }

    pub fn table(d: u8, n: usize, f: Vec<f64>) -> Self {
        Self { d, n, preset: None, params: BTreeMap::new(), f: Some(f), dynamics: Dynamics::Metropolis, beta: None }
    }

    pub fn beta(&self) -> f64 {
        self.beta.unwrap_or(self.n as f64)
    }

    pub fn states(&self) -> usize {
        self.n.pow(self.d as u32)
    }

    fn param(&self, key: &str, default: f64) -> f64 {
        self.params.get(key).copied().unwrap_or(default)
    }

    /// Potential values, row-major with the first coordinate fastest.
    pub fn values(&self) -> Result<Vec<f64>> {
        if !(1..=2).contains(&self.d) {
            return Err(Error::Argument(format!("dimension {} not supported", self.d)));
        }
        if self.n < 4 {
            return Err(Error::Argument(format!("grid resolution {} below 4", self.n)));
        }
        let f = match (&self.f, &self.preset) {
            (Some(_), Some(_)) => return Err(Error::Argument("give either a preset or a table, not both".into())),
            (Some(f), None) => {
                if f.len() != self.states() {
                    return Err(Error::Structural(format!("table has {} values for {} states", f.len(), self.states())));
                }
                f.clone()
            }
            (None, Some(name)) => self.preset_values(name)?,
            (None, None) => return Err(Error::Argument("potential needs a preset or a table".into())),
        };
        if let Some(i) = f.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("potential not finite at state {i}")));
        }
        Ok(f)
    }

    fn preset_values(&self, name: &str) -> Result<Vec<f64>> {
        let n = self.n;
        let grid = |i: usize| i as f64 / n as f64;
        let one: Box<dyn Fn(f64) -> f64> = match name {
            "flat" => Box::new(|_| 0.0),
            "single_well" => {
                let (a, c) = (self.param("a", 1.0), self.param("center", 0.5));
                Box::new(move |x| a * (x - c).powi(2))
            }
            "double_well" => {
                let (h, tilt) = (self.param("height", 0.15), self.param("tilt", 0.05));
                Box::new(move |x| {
                    let s = 4.0 * x - 2.0;
                    h * (s * s - 1.0).powi(2) + tilt * s
                })
            }
            "triple_well" => {
                let depths = [self.param("depth1", 0.6), self.param("depth2", 0.4), self.param("depth3", 0.25)];
                let centers = [1.0 / 6.0, 0.5, 5.0 / 6.0];
                let w = self.param("width", 0.07);
                let conf = self.param("confinement", 1.0);
                Box::new(move |x| {
                    let wells: f64 = (0..3).map(|k| depths[k] * (-(x - centers[k]).powi(2) / (2.0 * w * w)).exp()).sum();
                    conf * (x - 0.5).powi(2) - wells
                })
            }
            other => return Err(Error::Argument(format!("unknown preset {other:?}; known: {}", PRESETS.join(", ")))),
        };
        Ok(match self.d {
            1 => (0..n).map(|i| one(grid(i))).collect(),
            _ => {
                let cy = self.param("transverse", if name == "flat" { 0.0 } else { 1.0 });
                let mut v = Vec::with_capacity(n * n);
                for j in 0..n {
                    for i in 0..n {
                        v.push(one(grid(i)) + cy * (grid(j) - 0.5).powi(2));
                    }
                }
                v
            }
        })
    }

    pub fn build(&self) -> Result<ChainModel> {
        match self.d {
            1 => build_birth_death(self),
            2 => build_lattice_metropolis(self),
            d => Err(Error::Argument(format!("dimension {d} not supported"))),
        }
    }
}

/// `Q ∝ exp(−β F)` normalised in the log domain.
fn measure(f: &[f64], beta: f64) -> Result<Vec<f64>> {
    let lw: Vec<f64> = f.iter().map(|&v| -beta * v).collect();
    let top = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = lw.iter().map(|&l| (l - top).exp()).sum();
    let q: Vec<f64> = lw.iter().map(|&l| (l - top).exp() / z).collect();
    if let Some(i) = q.iter().position(|&v| v == 0.0) {
        return Err(Error::Numerical(format!("stationary weight of state {i} underflows")));
    }
    Ok(q)
}

fn move_probability(dynamics: Dynamics, proposal: f64, df: f64, beta: f64) -> f64 {
    // df = F(target) − F(source)
    match dynamics {
        Dynamics::Metropolis => proposal * (-beta * df).exp().min(1.0),
        Dynamics::HeatBath => proposal / (1.0 + (beta * df).exp()),
    }
}

fn assemble(f: &[f64], neighbours: impl Fn(usize) -> Vec<usize>, proposal: f64, spec: &PotentialSpec) -> Result<ChainModel> {
    let beta = spec.beta();
    if !(beta.is_finite() && beta > 0.0) {
        return Err(Error::Argument(format!("inverse temperature {beta} must be positive")));
    }
    let q = measure(f, beta)?;
    let rows = (0..f.len())
        .map(|x| {
            let mut row: Vec<(usize, f64)> = neighbours(x)
                .into_iter()
                .map(|y| (y, move_probability(spec.dynamics, proposal, f[y] - f[x], beta)))
                .collect();
            let out: f64 = row.iter().map(|&(_, p)| p).sum();
            row.push((x, 1.0 - out));
            row
        })
        .collect();
    ChainModel::from_rows(f.len(), rows, Some(q), None)
}

/// Nearest-neighbour chain on a one-dimensional grid with reflecting ends
/// and proposal ½ per neighbour.
pub fn build_birth_death(spec: &PotentialSpec) -> Result<ChainModel> {
    if spec.d != 1 {
        return Err(Error::Argument("birth-death builder needs d = 1".into()));
    }
    let f = spec.values()?;
    let n = f.len();
    assemble(
        &f,
        |x| {
            let mut v = Vec::with_capacity(2);
            if x > 0 {
                v.push(x - 1);
            }
            if x + 1 < n {
                v.push(x + 1);
            }
            v
        },
        0.5,
        spec,
    )
}

/// Four-neighbour chain on a square grid with reflecting boundary and
/// proposal ¼ per neighbour. State `i + N j` is the point `(i/N, j/N)`.
pub fn build_lattice_metropolis(spec: &PotentialSpec) -> Result<ChainModel> {
    if spec.d != 2 {
        return Err(Error::Argument("lattice builder needs d = 2".into()));
    }
    let f = spec.values()?;
    let n = spec.n;
    assemble(
        &f,
        |x| {
            let (i, j) = (x % n, x / n);
            let mut v = Vec::with_capacity(4);
            if i > 0 {
                v.push(x - 1);
            }
            if i + 1 < n {
                v.push(x + 1);
            }
            if j > 0 {
                v.push(x - n);
            }
            if j + 1 < n {
                v.push(x + n);
            }
            v
        },
        0.25,
        spec,
    )
}

/// Grid index of the lowest potential value within `[lo, hi)` of the first
/// coordinate (second coordinate at the grid centre in 2D).
pub fn well_bottom(spec: &PotentialSpec, lo: f64, hi: f64) -> Result<usize> {
    let f = spec.values()?;
    let n = spec.n;
    let row = if spec.d == 2 { n / 2 } else { 0 };
    let mut best: Option<usize> = None;
    for i in 0..n {
        let x = i as f64 / n as f64;
        if x < lo || x >= hi {
            continue;
        }
        let k = i + n * row;
        if best.map_or(true, |b| f[k] < f[b]) {
            best = Some(k);
        }
    }
    best.ok_or_else(|| Error::Argument(format!("no grid point in [{lo}, {hi})")))
}

/// Random reversible chain from symmetric conductances: a random spanning
/// path keeps it irreducible, extra edges appear with probability
/// `density`, weights are log-uniform over three decades.
pub fn random_reversible(n: usize, density: f64, seed: u64) -> ChainModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c = vec![vec![0.0f64; n]; n];
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let weight = |rng: &mut ChaCha8Rng| 10f64.powf(-3.0 * rng.random::<f64>());
    for w in order.windows(2) {
        let v = weight(&mut rng);
        c[w[0]][w[1]] = v;
        c[w[1]][w[0]] = v;
    }
    for x in 0..n {
        for y in x + 1..n {
            if c[x][y] == 0.0 && rng.random::<f64>() < density {
                let v = weight(&mut rng);
                c[x][y] = v;
                c[y][x] = v;
            }
        }
        if rng.random::<f64>() < 0.5 {
            c[x][x] = weight(&mut rng);
        }
    }
    from_conductances(&c).expect("conductance network is irreducible")
}

/// `P(x,y) = c(x,y)/Σ_z c(x,z)`, `Q(x) ∝ Σ_z c(x,z)`.
pub fn from_conductances(c: &[Vec<f64>]) -> Result<ChainModel> {
    let n = c.len();
    let mass: Vec<f64> = c.iter().map(|r| r.iter().sum()).collect();
    let total: f64 = mass.iter().sum();
    let rows = c
        .iter()
        .zip(&mass)
        .map(|(r, &m)| r.iter().enumerate().filter(|(_, &v)| v > 0.0).map(|(y, &v)| (y, v / m)).collect())
        .collect();
    ChainModel::from_rows(n, rows, Some(mass.iter().map(|m| m / total).collect()), None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Tolerances;

    #[test]
    fn flat_is_lazy_walk() {
        let c = PotentialSpec::preset(1, 4, "flat", &[]).build().unwrap();
        assert!(c.validate(&Tolerances::default()).is_valid());
        for &q in c.q() {
            assert!((q - 0.25).abs() < 1e-15);
        }
        assert_eq!(c.p(1, 0), 0.5);
        assert_eq!(c.p(0, 0), 0.5);
        let c = PotentialSpec::preset(2, 4, "flat", &[]).build().unwrap();
        assert_eq!(c.n(), 16);
        assert!(c.q().iter().all(|&q| (q - 1.0 / 16.0).abs() < 1e-15));
    }

    #[test]
    fn single_well_peak() {
        let spec = PotentialSpec::preset(1, 32, "single_well", &[]);
        let c = spec.build().unwrap();
        let top = (0..32).max_by(|&a, &b| c.q()[a].total_cmp(&c.q()[b])).unwrap();
        assert_eq!(top, 16);
    }

    #[test]
    fn measure_matches_closed_form() {
        let spec = PotentialSpec::preset(1, 16, "double_well", &[("tilt", 0.05)]);
        let c = spec.build().unwrap();
        let f = spec.values().unwrap();
        let z: f64 = f.iter().map(|v| (-16.0 * v).exp()).sum();
        for x in 0..16 {
            let want = (-16.0 * f[x]).exp() / z;
            assert!((c.q()[x] - want).abs() <= 1e-12 * want);
        }
        assert!(c.validate(&Tolerances::default()).is_valid());
    }

    #[test]
    fn heat_bath_is_reversible() {
        let mut spec = PotentialSpec::preset(2, 6, "double_well", &[("tilt", 0.1)]);
        spec.dynamics = Dynamics::HeatBath;
        assert!(spec.build().unwrap().validate(&Tolerances::default()).is_valid());
    }

    #[test]
    fn random_chain_is_valid() {
        for seed in 0..5 {
            let c = random_reversible(50, 0.1, seed);
            let r = c.validate(&Tolerances::default());
            assert!(r.is_valid(), "{:?}", r.violations);
            assert!(r.max_detailed_balance_error < 1e-12);
        }
    }

    #[test]
    fn spec_json_round_trip() {
        let s: PotentialSpec =
            serde_json::from_str(r#"{"d":1,"N":64,"preset":"double_well","params":{"tilt":0.02}}"#).unwrap();
        assert_eq!(s.beta(), 64.0);
        let back: PotentialSpec = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(s, back);
        assert!(PotentialSpec::preset(1, 3, "flat", &[]).build().is_err());
    }
}
