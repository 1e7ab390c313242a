use singular_lq::error::*;
use singular_lq::lattice::*;

fn tree(n: usize, b: usize) -> ScenarioTree {
    ScenarioTree::build(TimeGrid::new(1.0, n).unwrap(), b, 3).unwrap()
}

#[test]
fn grid_endpoints() {
    let g = TimeGrid::new(0.7, 3).unwrap();
    assert_eq!(g.times()[0], 0.0);
    assert_eq!(g.times()[3], 0.7);
    assert!(g.times().windows(2).all(|w| w[0] < w[1]));
    assert!((g.dt() * 3.0 - 0.7).abs() <= f64::EPSILON);
    assert!(TimeGrid::new(0.0, 3).is_err());
    assert!(TimeGrid::new(1.0, 0).is_err());
}

#[test]
fn one_step_binary() {
    let t = tree(1, 2);
    assert_eq!(t.len(), 3);
    let dt = t.grid().dt();
    let kids = t.children(0);
    assert_eq!(kids.len(), 2);
    assert!(kids.iter().all(|e| e.prob == 0.5));
    assert_eq!(kids[0].increment, dt.sqrt());
    assert_eq!(kids[1].increment, -dt.sqrt());
}

#[test]
fn node_counts() {
    assert_eq!(tree(3, 2).len(), 15);
    assert_eq!(tree(2, 3).len(), 13);
}

#[test]
fn ternary_increments_are_moment_matched() {
    let t = tree(2, 3);
    let dt = t.grid().dt();
    for id in t.level(0).chain(t.level(1)) {
        let kids = t.children(id);
        let mean: f64 = kids.iter().map(|e| e.prob * e.increment).sum();
        let var: f64 = kids.iter().map(|e| e.prob * e.increment.powi(2)).sum();
        assert!(mean.abs() < 1e-15);
        assert!((var - dt).abs() < 1e-15);
    }
}

#[test]
fn budget_is_enforced() {
    let g = TimeGrid::new(1.0, 30).unwrap();
    assert!(matches!(
        ScenarioTree::build(g.clone(), 2, 0),
        Err(Error::NodeBudget { .. })
    ));
    assert!(ScenarioTree::build_with_budget(TimeGrid::new(1.0, 3).unwrap(), 2, 0, 14).is_err());
    assert!(ScenarioTree::build_with_budget(TimeGrid::new(1.0, 3).unwrap(), 2, 0, 15).is_ok());
    assert!(ScenarioTree::build(g, 1, 0).is_err());
}

#[test]
fn level_probabilities_sum_to_one() {
    for t in [
        tree(4, 2),
        tree(3, 3),
        ScenarioTree::recombining_walk(TimeGrid::new(1.0, 9).unwrap()).unwrap(),
        ScenarioTree::memory_walk(TimeGrid::new(1.0, 9).unwrap()).unwrap(),
    ] {
        for k in 0..=t.steps() {
            let s: f64 = t.level(k).map(|id| t.node(id).probability).sum();
            assert!((s - 1.0).abs() < 1e-14, "level {k}: {s}");
        }
    }
}

#[test]
fn walk_layouts() {
    let g = TimeGrid::new(1.0, 5).unwrap();
    let w = ScenarioTree::recombining_walk(g.clone()).unwrap();
    for k in 0..=5 {
        assert_eq!(w.level(k).len(), k + 1);
    }
    let m = ScenarioTree::memory_walk(g).unwrap();
    assert!(m.level(5).len() <= 4 * 6);
    for id in m.level(3) {
        let s = m.node(id).state;
        assert_ne!(s.first_sign, 0);
        assert_ne!(s.last_sign, 0);
        assert_eq!(s.ups + s.downs, 3);
    }
}

#[test]
fn conditional_expectation_examples() {
    let t = tree(2, 2);
    let five = AdaptedProcess::constant(&t, 2, 5.0);
    assert_eq!(t.conditional_expectation(&five, 1).unwrap(), vec![5.0, 5.0]);

    let t1 = tree(1, 2);
    let p = AdaptedProcess::new(&t1, 1, vec![0.0, 1.0, 3.0]).unwrap();
    assert_eq!(t1.conditional_expectation(&p, 0).unwrap(), vec![2.0]);

    let short = AdaptedProcess::constant(&t, 0, 1.0);
    assert!(matches!(
        t.conditional_expectation(&short, 0),
        Err(Error::MissingLevel { .. })
    ));
}

#[test]
fn tower_property_against_grandchildren() {
    let t = tree(2, 3);
    let p = AdaptedProcess::from_fn(&t, 2, |n| (n.id as f64 * 0.37).sin());
    let level1 = t.conditional_expectation(&p, 1).unwrap();
    let mut lifted = AdaptedProcess::constant(&t, 1, 0.0);
    for (i, id) in t.level(1).enumerate() {
        lifted.values[id] = level1[i];
    }
    let twice = t.conditional_expectation(&lifted, 0).unwrap()[0];
    // brute force: grandchildren weighted by path probability
    let mut direct = 0.0;
    for e1 in t.children(0) {
        for e2 in t.children(e1.child) {
            direct += e1.prob * e2.prob * p.values[e2.child];
        }
    }
    assert!((twice - direct).abs() < 1e-15);
}

#[test]
fn expectation_examples() {
    let t = tree(3, 2);
    let c = AdaptedProcess::constant(&t, 3, 2.5);
    assert!((t.expectation(&c, 3).unwrap() - 2.5).abs() < 1e-15);
    let leaf = t.level(3).start + 5;
    let ind = AdaptedProcess::from_fn(&t, 3, |n| if n.id == leaf { 1.0 } else { 0.0 });
    assert_eq!(t.expectation(&ind, 3).unwrap(), 0.125);
}

#[test]
fn doob_examples() {
    let t = tree(3, 2);
    let flat = AdaptedProcess::constant(&t, 3, 4.0);
    let d = t.doob_decompose(&flat).unwrap();
    assert!(d.predictable.iter().all(|&v| v == 0.0));
    assert!(d.martingale.iter().all(|&v| v == 0.0));

    let walk = AdaptedProcess::from_fn(&t, 3, |n| n.state.walk);
    let d = t.doob_decompose(&walk).unwrap();
    assert!(d.predictable.iter().all(|v| v.abs() < 1e-16));

    let t2 = tree(2, 2);
    let p = AdaptedProcess::from_fn(&t2, 2, |n| (n.id as f64).powi(2) - 1.5);
    let d = t2.doob_decompose(&p).unwrap();
    for e in t2.edges() {
        let eid = t2.in_edges(e.child)[0];
        let rebuilt = p.values[e.parent] + d.predictable[e.parent] + d.martingale[eid];
        assert!((rebuilt - p.values[e.child]).abs() < 1e-14);
    }
}

#[test]
fn quadratic_variation_examples() {
    let t = tree(1, 2);
    let p = AdaptedProcess::new(&t, 1, vec![0.0, 1.0, -1.0]).unwrap();
    let qv = t.quadratic_variation(&p).unwrap();
    assert_eq!(qv.values, vec![0.0, 1.0, 1.0]);

    let t = tree(4, 2);
    let walk = AdaptedProcess::from_fn(&t, 4, |n| n.state.walk);
    let qv = t.quadratic_variation(&walk).unwrap();
    let dt = t.grid().dt();
    for k in 0..=4 {
        for id in t.level(k) {
            assert!((qv.values[id] - k as f64 * dt).abs() < 1e-14);
        }
    }
}

#[test]
fn recombining_rejects_path_functionals() {
    let w = ScenarioTree::recombining_walk(TimeGrid::new(1.0, 3).unwrap()).unwrap();
    let p = AdaptedProcess::from_fn(&w, 3, |n| n.state.walk);
    // the walk's quadratic variation is k*dt on every path, so it is fine
    assert!(w.quadratic_variation(&p).is_ok());
    // but a path-weighted sum is not a node function
    let r = w.forward(3, 0.0, "test", |e, acc| acc * 2.0 + e.increment);
    assert!(matches!(r, Err(Error::PathDependent { .. })));
    assert!(w.paths().is_err());
}

#[test]
fn json_dump_lists_all_nodes() {
    let t = tree(2, 2);
    let j = t.to_json();
    assert_eq!(j["nodes"].as_array().unwrap().len(), 7);
    assert!(j["nodes"][0]["parent"].is_null());
    assert_eq!(j["nodes"][3]["parent"], 1);
}

mod properties {
    use proptest::prelude::*;
    use singular_lq::lattice::*;

    fn small_tree() -> impl Strategy<Value = ScenarioTree> {
        (1usize..=5, 2usize..=4, 0u64..500, 0.25..2.0f64)
            .prop_filter("node count", |(n, b, ..)| {
                (*b as f64).powi(*n as i32) <= 800.0
            })
            .prop_map(|(n, b, seed, h)| {
                ScenarioTree::build(TimeGrid::new(h, n).unwrap(), b, seed).unwrap()
            })
    }

    /// A tree together with two arbitrary processes on all levels.
    fn tree_and_values() -> impl Strategy<Value = (ScenarioTree, Vec<f64>, Vec<f64>)> {
        small_tree().prop_flat_map(|t| {
            let len = t.len();
            (
                Just(t),
                prop::collection::vec(-5.0..5.0f64, len),
                prop::collection::vec(-5.0..5.0f64, len),
            )
        })
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12 * 1f64.max(a.abs()).max(b.abs())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn level_masses_and_moments((t, _, _) in tree_and_values()) {
            let dt = t.grid().dt();
            for k in 0..=t.steps() {
                let mass: f64 = t.level(k).map(|id| t.node(id).probability).sum();
                prop_assert!(close(mass, 1.0));
            }
            for k in 0..t.steps() {
                for id in t.level(k) {
                    let ch = t.children(id);
                    let p: f64 = ch.iter().map(|e| e.prob).sum();
                    let m: f64 = ch.iter().map(|e| e.prob * e.increment).sum();
                    let v: f64 = ch.iter().map(|e| e.prob * e.increment * e.increment).sum();
                    prop_assert!(close(p, 1.0));
                    prop_assert!(m.abs() < 1e-12);
                    prop_assert!(close(v, dt));
                }
            }
        }

        #[test]
        fn conditional_expectation_is_linear_and_positive(
            (t, x, y) in tree_and_values(), a in -3.0..3.0f64, b in -3.0..3.0f64,
        ) {
            let n = t.steps();
            let px = AdaptedProcess::new(&t, n, x.clone()).unwrap();
            let py = AdaptedProcess::new(&t, n, y.clone()).unwrap();
            let comb: Vec<f64> = x.iter().zip(&y).map(|(u, v)| a * u + b * v).collect();
            let pc = AdaptedProcess::new(&t, n, comb).unwrap();
            let sq = AdaptedProcess::new(&t, n, x.iter().map(|u| u * u).collect()).unwrap();
            for k in 0..n {
                let ex = t.conditional_expectation(&px, k).unwrap();
                let ey = t.conditional_expectation(&py, k).unwrap();
                let ec = t.conditional_expectation(&pc, k).unwrap();
                for i in 0..ec.len() {
                    prop_assert!((ec[i] - (a * ex[i] + b * ey[i])).abs() < 1e-11);
                }
                prop_assert!(t.conditional_expectation(&sq, k).unwrap().iter().all(|v| *v >= 0.0));
            }
        }

        #[test]
        fn tower_property((t, x, _) in tree_and_values()) {
            let n = t.steps();
            prop_assume!(n >= 2);
            let p = AdaptedProcess::new(&t, n, x).unwrap();
            for k in 0..n - 1 {
                let inner = t.conditional_expectation(&p, k + 1).unwrap();
                let mut lifted = vec![0.0; t.len()];
                for (i, id) in t.level(k + 1).enumerate() {
                    lifted[id] = inner[i];
                }
                let lifted = AdaptedProcess::new(&t, n, lifted).unwrap();
                let twice = t.conditional_expectation(&lifted, k).unwrap();
                for (i, id) in t.level(k).enumerate() {
                    let mut direct = 0.0;
                    for e in t.children(id) {
                        for g in t.children(e.child) {
                            direct += e.prob * g.prob * p.values[g.child];
                        }
                    }
                    prop_assert!((twice[i] - direct).abs() < 1e-12);
                }
                prop_assert!((t.expectation(&lifted, k + 1).unwrap() - t.expectation(&p, k + 2).unwrap()).abs() < 1e-11);
            }
        }

        #[test]
        fn doob_parts_recompose((t, x, _) in tree_and_values()) {
            let n = t.steps();
            let p = AdaptedProcess::new(&t, n, x).unwrap();
            let d = t.doob_decompose(&p).unwrap();
            for k in 0..n {
                for id in t.level(k) {
                    let mean: f64 = t.edge_ids(id).map(|e| t.edge(e).prob * d.martingale[e]).sum();
                    prop_assert!(mean.abs() < 1e-12);
                    for e in t.edge_ids(id) {
                        let edge = t.edge(e);
                        let rebuilt = p.values[id] + d.predictable[id] + d.martingale[e];
                        prop_assert!((rebuilt - p.values[edge.child]).abs() < 1e-12);
                    }
                }
            }
        }

        #[test]
        fn covariation_is_bilinear((t, x, y) in tree_and_values()) {
            let n = t.steps();
            let px = AdaptedProcess::new(&t, n, x.clone()).unwrap();
            let py = AdaptedProcess::new(&t, n, y.clone()).unwrap();
            let sum = AdaptedProcess::new(&t, n, x.iter().zip(&y).map(|(a, b)| a + b).collect()).unwrap();
            let qs = t.quadratic_variation(&sum).unwrap();
            let qx = t.quadratic_variation(&px).unwrap();
            let qy = t.quadratic_variation(&py).unwrap();
            let cxy = t.covariation(&px, &py).unwrap();
            for id in 0..t.len() {
                let want = qx.values[id] + 2.0 * cxy.values[id] + qy.values[id];
                prop_assert!((qs.values[id] - want).abs() <= 1e-10 * 1f64.max(qs.values[id].abs()));
                prop_assert!(qx.values[id] >= 0.0);
                if let Some(par) = t.node(id).parent(&t) {
                    prop_assert!(qx.values[id] >= qx.values[par]);
                }
            }
        }
    }
}
