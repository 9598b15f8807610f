//! Reference values from a 50-digit evaluation of the same chains, with the
//! leave rate of each state taken as its off-diagonal row sum. Small
//! eigenvalues are compared relatively; they sit twelve orders of magnitude
//! below the operator norm.

use metaspec::chain::dirichlet;
use metaspec::hitting::mean_hitting_time;
use metaspec::landscape::PotentialSpec;
use metaspec::spectral::eigenpairs;
use metaspec::{ChainModel, SubsetMask};

struct Reference {
    spec: (usize, &'static str),
    target: usize,
    start: usize,
    free: [f64; 4],
    killed: [f64; 3],
    mean: f64,
}

const REFERENCES: [Reference; 2] = [
    Reference {
        spec: (64, "triple_well"),
        target: 11,
        start: 32,
        free: [0.0, 3.3912961935059349e-12, 5.2398219963485863e-6, 0.13646062138752814],
        killed: [3.3788536514903355e-12, 5.2398219963485863e-6, 0.13646062138752814],
        mean: 295958364368.22913,
    },
    Reference {
        spec: (32, "double_well"),
        target: 8,
        start: 24,
        free: [0.0, 0.00090278685293978678, 0.087828977300413406, 0.1431181698723947],
        killed: [0.0008595384329034971, 0.086414056740958195, 0.13548884527298797],
        mean: 1202.7792561225479,
    },
];

fn build(r: &Reference) -> ChainModel {
    PotentialSpec::preset(1, r.spec.0, r.spec.1, &[]).build().unwrap()
}

fn assert_relative(got: f64, want: f64, tol: f64, what: &str) {
    let err = if want == 0.0 { got.abs() } else { ((got - want) / want).abs() };
    assert!(err <= tol, "{what}: got {got:e}, want {want:e}, relative error {err:e}");
}

#[test]
fn low_eigenvalues_match_reference() {
    for r in &REFERENCES {
        let chain = build(r);
        let n = chain.n();
        let free = eigenpairs(&dirichlet(&chain, &SubsetMask::empty(n)).unwrap()).unwrap();
        for (j, &want) in r.free.iter().enumerate() {
            assert_relative(free.values[j], want, 1e-10, &format!("{} free λ{}", r.spec.1, j + 1));
        }
        let killed = eigenpairs(&dirichlet(&chain, &SubsetMask::singleton(n, r.target).unwrap()).unwrap()).unwrap();
        for (j, &want) in r.killed.iter().enumerate() {
            assert_relative(killed.values[j], want, 1e-10, &format!("{} killed λ{}", r.spec.1, j + 1));
        }
    }
}

#[test]
fn mean_hitting_times_match_reference() {
    for r in &REFERENCES {
        let chain = build(r);
        let target = SubsetMask::singleton(chain.n(), r.target).unwrap();
        let mean = mean_hitting_time(&chain, &target).unwrap()[r.start];
        assert_relative(mean, r.mean, 1e-12, r.spec.1);
    }
}
