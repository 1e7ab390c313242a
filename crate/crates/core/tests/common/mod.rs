//! Random small scenarios shared by the property tests.

#![allow(dead_code)]

use proptest::prelude::*;
use singular_lq::coefficients::{CoefficientSet, CoefficientSpecs, ModelSpec};
use singular_lq::lattice::{ScenarioTree, TimeGrid};

pub const INF: f64 = f64::INFINITY;

#[derive(Debug, Clone)]
pub struct Case {
    pub steps: usize,
    pub branching: usize,
    pub seed: u64,
    pub horizon: f64,
    pub x0: f64,
    pub specs: CoefficientSpecs,
}

impl Case {
    pub fn tree(&self) -> ScenarioTree {
        ScenarioTree::build(
            TimeGrid::new(self.horizon, self.steps).unwrap(),
            self.branching,
            self.seed,
        )
        .unwrap()
    }

    pub fn build(&self) -> (ScenarioTree, CoefficientSet) {
        let t = self.tree();
        let c = CoefficientSet::materialize(&t, &self.specs, self.x0).unwrap();
        (t, c)
    }
}

fn nu() -> impl Strategy<Value = ModelSpec> {
    prop_oneof![
        (0.1..2.0f64).prop_map(ModelSpec::constant),
        (0u64..1000).prop_map(|seed| ModelSpec::Uniform {
            low: 0.2,
            high: 2.0,
            seed
        }),
        Just(ModelSpec::GeometricOnTree {
            initial: 1.0,
            up: 1.3,
            down: 0.8
        }),
    ]
}

fn kappa() -> impl Strategy<Value = ModelSpec> {
    prop_oneof![
        (0.3..2.0f64).prop_map(ModelSpec::constant),
        (0u64..1000).prop_map(|seed| ModelSpec::Uniform {
            low: 0.5,
            high: 2.0,
            seed
        }),
        Just(ModelSpec::GeometricOnTree {
            initial: 1.0,
            up: 1.2,
            down: 0.85
        }),
    ]
}

fn target() -> impl Strategy<Value = ModelSpec> {
    prop_oneof![
        (-1.0..1.0f64).prop_map(ModelSpec::constant),
        ((-1.0..1.0f64), (0.1..1.5f64))
            .prop_map(|(initial, scale)| ModelSpec::RandomWalk { initial, scale }),
        Just(ModelSpec::FirstBranch {
            up: 1.0,
            down: -0.5
        }),
        Just(ModelSpec::LastBranch {
            up: 0.3,
            down: -1.0
        }),
    ]
}

fn eta() -> impl Strategy<Value = ModelSpec> {
    prop_oneof![
        (0.1..5.0f64).prop_map(ModelSpec::constant),
        Just(ModelSpec::constant(INF)),
        (0.5..3.0f64).prop_map(|down| ModelSpec::LastBranch { up: INF, down }),
        (0u64..1000).prop_map(|seed| ModelSpec::Uniform {
            low: 0.5,
            high: 3.0,
            seed
        }),
    ]
}

/// Trees with at most a few hundred nodes and data satisfying the standing
/// conditions by construction (`nu > 0`, `kappa > 0`, `eta > 0`).
pub fn case() -> impl Strategy<Value = Case> {
    (
        1usize..=5,
        2usize..=3,
        0u64..1000,
        0.5..2.0f64,
        -2.0..2.0f64,
        nu(),
        kappa(),
        target(),
        target(),
        eta(),
    )
        .prop_filter("small trees", |(n, b, ..)| *b == 2 || *n <= 4)
        .prop_map(
            |(steps, branching, seed, horizon, x0, nu, kappa, xi, xi_t, eta)| Case {
                steps,
                branching,
                seed,
                horizon,
                x0,
                specs: CoefficientSpecs {
                    nu,
                    kappa,
                    xi,
                    xi_t,
                    eta,
                },
            },
        )
}

pub fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}
