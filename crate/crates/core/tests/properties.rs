//! Structural properties on random reversible chains.

use metaspec::chain::dirichlet;
use metaspec::exit_law::{residue_expansion, survival_exact};
use metaspec::hitting::{greens_function, hitting_probability, GreenMethod};
use metaspec::landscape::random_reversible;
use metaspec::metastability::{analyze, capacities};
use metaspec::report::{canonical_string, to_canonical};
use metaspec::spectral::{dv_bound_check, eigenpairs};
use metaspec::{ChainModel, SubsetMask, Tolerances};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

const TIGHT: f64 = 1e-10;

/// A chain with `n` states and a reproducible random subset of size `k`.
fn chain_and_subset(n: usize, density: f64, seed: u64, k: usize) -> (ChainModel, SubsetMask) {
    let chain = random_reversible(n, density, seed);
    let mut states: Vec<usize> = (0..n).collect();
    states.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
    let set = SubsetMask::new(n, states[..k.min(n - 1)].iter().copied()).unwrap();
    (chain, set)
}

fn setup() -> impl Strategy<Value = (usize, f64, u64, usize)> {
    (3usize..=12, 0.1f64..1.0, any::<u64>(), 1usize..=4)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conjugated_operator_is_symmetric_with_spectrum_in_zero_two((n, d, seed, k) in setup()) {
        let (chain, killed) = chain_and_subset(n, d, seed, k);
        let op = dirichlet(&chain, &killed).unwrap();
        let s = op.symmetrized();
        prop_assert_eq!(&s, &s.transpose());
        let pairs = eigenpairs(&op).unwrap();
        for &l in &pairs.values {
            prop_assert!((0.0..=2.0 + TIGHT).contains(&l), "eigenvalue {l}");
        }
        prop_assert!(pairs.values[0] > 0.0);
    }

    #[test]
    fn hitting_probabilities_are_harmonic_and_bounded((n, d, seed, k) in setup()) {
        let (chain, set) = chain_and_subset(n, d, seed, k.max(2));
        let members = set.members().to_vec();
        let target = SubsetMask::singleton(n, members[0]).unwrap();
        let avoid = set.without(members[0]);
        let h = hitting_probability(&chain, &target, &avoid).unwrap().values;
        for x in 0..n {
            prop_assert!((-TIGHT..=1.0 + TIGHT).contains(&h[x]), "h({x}) = {}", h[x]);
            if !set.contains(x) {
                let mean: f64 = chain.row(x).iter().map(|&(y, p)| p * h[y]).sum();
                prop_assert!((mean - h[x]).abs() <= TIGHT, "not harmonic at {x}");
            }
        }
    }

    #[test]
    fn greens_function_is_q_symmetric((n, d, seed, k) in setup()) {
        let (chain, killed) = chain_and_subset(n, d, seed, k);
        let g = greens_function(&chain, &killed.complement(), GreenMethod::DirectInverse).unwrap();
        prop_assert!(g.symmetry_defect(&chain) <= TIGHT);
        for row in &g.entries {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn capacities_are_symmetric_and_nearly_ultrametric((n, d, seed, k) in setup()) {
        let (chain, set) = chain_and_subset(n, d, seed, k.max(2));
        let c = capacities(&chain, &set).unwrap();
        prop_assert!(c.symmetry_defect <= TIGHT);
        prop_assert!(c.ultrametric_defect <= 3f64.ln() + TIGHT, "defect {}", c.ultrametric_defect);
        prop_assert!(c.triangle_violations.is_empty());
    }

    #[test]
    fn principal_eigenvalue_times_mean_exit_time_is_at_least_one((n, d, seed, k) in setup()) {
        let (chain, set) = chain_and_subset(n, d, seed, k);
        let dv = dv_bound_check(&chain, &set).unwrap();
        prop_assert!(dv.product >= 1.0 - TIGHT, "product {}", dv.product);
    }

    #[test]
    fn survival_is_nonincreasing_and_residues_sum_to_one((n, d, seed, k) in setup()) {
        let (chain, set) = chain_and_subset(n, d, seed, k);
        let x = (0..n).find(|&x| !set.contains(x)).unwrap();
        let s = survival_exact(&chain, x, &set, 1, 1_000_000).unwrap();
        prop_assert_eq!(s.values[0], 1.0);
        for w in s.values.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-14), "survival grew from {} to {}", w[0], w[1]);
        }
        let re = residue_expansion(&chain, x, &set, 1).unwrap();
        prop_assert!((re.sum_rule - 1.0).abs() <= TIGHT, "sum rule {}", re.sum_rule);
    }

    #[test]
    fn hierarchy_is_deterministic((n, d, seed, k) in setup()) {
        let (chain, set) = chain_and_subset(n, d, seed, k.max(2));
        let tol = Tolerances::default();
        let empty = SubsetMask::empty(n);
        match (analyze(&chain, &set, &empty, 0.1, &tol), analyze(&chain, &set, &empty, 0.1, &tol)) {
            (Ok(a), Ok(b)) => prop_assert_eq!(to_canonical(&a).unwrap(), to_canonical(&b).unwrap()),
            (Err(a), Err(b)) => prop_assert_eq!(a.to_string(), b.to_string()),
            _ => prop_assert!(false, "analysis succeeded only once"),
        }
    }

    #[test]
    fn canonical_json_round_trips(values in prop::collection::vec(any::<f64>(), 1..20), key in "[a-y][a-z]{0,7}") {
        let v = json!({ key.clone(): values.clone(), "z": { "nested": values.first() } });
        let text = canonical_string(&v).unwrap();
        let back: Value = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(canonical_string(&back).unwrap(), text);
        for (got, want) in back[&key].as_array().unwrap().iter().zip(&values) {
            if want.is_finite() {
                prop_assert_eq!(got.as_f64().unwrap().to_bits(), want.to_bits());
            } else {
                prop_assert!(got.is_null());
            }
        }
    }
}
