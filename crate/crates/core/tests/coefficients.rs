mod common;

use singular_lq::coefficients::*;
use singular_lq::error::*;
use singular_lq::lattice::*;

fn tree(n: usize) -> ScenarioTree {
    ScenarioTree::build(TimeGrid::new(1.0, n).unwrap(), 2, 0).unwrap()
}

fn specs(nu: f64, eta: ModelSpec) -> CoefficientSpecs {
    CoefficientSpecs {
        nu: ModelSpec::constant(nu),
        kappa: ModelSpec::constant(1.0),
        xi: ModelSpec::constant(0.0),
        xi_t: ModelSpec::constant(0.0),
        eta,
    }
}

#[test]
fn constant_and_table() {
    let t = tree(3);
    let k = materialize(&ModelSpec::constant(1.0), &t, Slot::Kappa).unwrap();
    assert!(k.values.iter().all(|&v| v == 1.0));
    let nu = materialize(
        &ModelSpec::DeterministicFn {
            values: vec![1.0, 2.0, 3.0],
        },
        &t,
        Slot::Nu,
    )
    .unwrap();
    for k in 0..3 {
        assert!(nu.on_level(&t, k).iter().all(|&v| v == (k + 1) as f64));
    }
}

#[test]
fn geometric_by_path_enumeration() {
    let t = tree(4);
    let spec = ModelSpec::GeometricOnTree {
        initial: 2.0,
        up: 1.1,
        down: 0.9,
    };
    let kappa = materialize(&spec, &t, Slot::Kappa).unwrap();
    for path in t.paths().unwrap() {
        let mut expected = 2.0;
        for w in path.windows(2).take(3) {
            let e = &t.children(w[0]).iter().find(|e| e.child == w[1]).unwrap();
            expected *= if e.increment > 0.0 { 1.1 } else { 0.9 };
            assert!((kappa.values[w[1]] - expected).abs() <= 1e-15 * expected);
        }
    }
}

#[test]
fn sign_violations_name_the_node() {
    let t = tree(2);
    let err = materialize(&ModelSpec::constant(-1.0), &t, Slot::Nu).unwrap_err();
    assert!(matches!(
        err,
        Error::Coefficient {
            slot: "nu",
            node: 0,
            ..
        }
    ));
    let err = materialize(&ModelSpec::constant(0.0), &t, Slot::Kappa).unwrap_err();
    assert!(matches!(err, Error::Coefficient { slot: "kappa", .. }));
    let table = ModelSpec::NodeTable {
        values: vec![1.0, 1.0, -0.5],
    };
    let err = materialize(&table, &t, Slot::Kappa).unwrap_err();
    assert!(matches!(err, Error::Coefficient { node: 2, .. }));
    assert!(materialize(&ModelSpec::constant(f64::INFINITY), &t, Slot::Eta).is_ok());
    assert!(materialize(&ModelSpec::constant(f64::INFINITY), &t, Slot::Xi).is_err());
}

#[test]
fn nondegeneracy_examples() {
    let t = tree(3);
    let s = CoefficientSet::materialize(&t, &specs(0.0, ModelSpec::constant(0.0)), 1.0).unwrap();
    let r = s.validate(&t);
    let c = r.check("nondegenerate").unwrap();
    assert!(!c.passed);
    assert_eq!(c.witness, Some(0));

    let s = CoefficientSet::materialize(&t, &specs(1.0, ModelSpec::constant(0.0)), 1.0).unwrap();
    assert!(s.validate(&t).passed());

    // infinite penalty on exactly one level-2 node
    let mut values = vec![0.0; 4];
    values[1] = f64::INFINITY;
    let s =
        CoefficientSet::materialize(&t, &specs(0.0, ModelSpec::NodeTable { values }), 1.0).unwrap();
    let r = s.validate(&t);
    let c = r.check("nondegenerate").unwrap();
    // ancestors of node 4 (level 2, index 1) are 1 and 0
    let failing: Vec<NodeId> = t
        .level(0)
        .chain(t.level(1))
        .chain(t.level(2))
        .filter(|&id| ![0, 1, 4].contains(&id))
        .collect();
    assert_eq!(c.failures, failing.len());
    assert_eq!(c.witness, Some(2));
}

#[test]
fn validate_is_pure() {
    let t = tree(3);
    let s = CoefficientSet::materialize(&t, &specs(0.0, ModelSpec::constant(0.0)), 1.0).unwrap();
    assert_eq!(s.validate(&t), s.validate(&t));
}

#[test]
fn toml_accepts_infinity() {
    let s: ModelSpec = toml::from_str("kind = \"constant\"\nvalue = inf\n").unwrap();
    assert_eq!(s, ModelSpec::constant(f64::INFINITY));
    let s: ModelSpec = toml::from_str("kind = \"constant\"\nvalue = \"inf\"\n").unwrap();
    assert_eq!(s, ModelSpec::constant(f64::INFINITY));
    let s: ModelSpec = toml::from_str("kind = \"last_branch\"\nup = \"inf\"\ndown = 2\n").unwrap();
    assert_eq!(
        s,
        ModelSpec::LastBranch {
            up: f64::INFINITY,
            down: 2.0
        }
    );
}

#[test]
fn branch_specs_need_memory() {
    let g = TimeGrid::new(1.0, 4).unwrap();
    let w = ScenarioTree::recombining_walk(g.clone()).unwrap();
    let spec = ModelSpec::LastBranch {
        up: 1.0,
        down: -1.0,
    };
    assert!(materialize(&spec, &w, Slot::XiT).is_err());
    let m = ScenarioTree::memory_walk(g).unwrap();
    let p = materialize(&spec, &m, Slot::XiT).unwrap();
    for id in m.level(3) {
        assert_eq!(p.values[id], m.node(id).state.last_sign as f64);
    }
}

mod properties {
    use super::common::case;
    use proptest::prelude::*;
    use singular_lq::coefficients::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn specs_roundtrip_through_toml(case in case()) {
            let text = toml::to_string(&case.specs).unwrap();
            let back: CoefficientSpecs = toml::from_str(&text).unwrap();
            prop_assert_eq!(back, case.specs);
        }

        #[test]
        fn materialize_is_deterministic_and_valid(case in case()) {
            let (t, a) = case.build();
            let (_, b) = case.build();
            prop_assert_eq!(&a.nu.values, &b.nu.values);
            prop_assert_eq!(&a.kappa.values, &b.kappa.values);
            prop_assert_eq!(&a.xi_t, &b.xi_t);
            prop_assert_eq!(&a.eta, &b.eta);
            let report = a.validate(&t);
            prop_assert!(report.passed(), "{:?}", report.first_failure());
            prop_assert_eq!(a.xi_t.len(), t.level(t.steps() - 1).count());
        }

        #[test]
        fn a_single_bad_kappa_is_caught(case in case(), pick in any::<prop::sample::Index>(), bad in -1.0..=0.0f64) {
            let (t, mut c) = case.build();
            let nodes = t.prefix_len(t.steps() - 1);
            let id = pick.index(nodes);
            c.kappa.values[id] = bad;
            let report = c.validate(&t);
            prop_assert!(!report.passed());
            prop_assert!(report.into_result().is_err());
        }
    }
}
