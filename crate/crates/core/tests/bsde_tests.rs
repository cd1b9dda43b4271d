//! Integration tests for backward evaluation along stopping rules: nesting
//! consistency, martingale self-tests, terminal-condition monotonicity, and
//! the unreflected comparison theorem.

use snell_core::bsde::{
    ef_conditional_expectation, onestep_implicit_from, solve_bsde, values_at_first_hits, Driver,
};
use snell_core::checks::unreflected_comparison_suite;
use snell_core::generate::InstanceGenerator;
use snell_core::lattice::{Lattice, NodeId, Phase, StoppingRule};

fn instance(seed: u64, k: usize) -> (Lattice, snell_core::rbsde::Obstacle, Driver) {
    let mut gen = InstanceGenerator::new(seed);
    let grid = gen.grid(k);
    let lat = Lattice::build(grid).unwrap();
    let obstacle = gen.obstacle(&lat);
    let driver = gen.driver(grid.intensity, false);
    (lat, obstacle, driver)
}

fn ordered_rule_triple(
    lat: &Lattice,
    gen: &mut InstanceGenerator,
) -> (StoppingRule, StoppingRule, StoppingRule) {
    let tau = snell_core::stopping::random_rule(lat, gen.rng(), 0.3);
    let mid = snell_core::stopping::random_rule(lat, gen.rng(), 0.3).earlier_of(lat, &tau);
    let sigma = snell_core::stopping::random_rule(lat, gen.rng(), 0.3).earlier_of(lat, &mid);
    (sigma, mid, tau)
}

#[test]
fn nested_evaluation_is_consistent() {
    // E^f_{σ,σ'}(E^f_{σ',τ}(ζ)) = E^f_{σ,τ}(ζ) on random instances.
    for seed in 0..25u64 {
        let (lat, obstacle, driver) = instance(seed, 2);
        let mut gen = InstanceGenerator::new(seed ^ 0xAB);
        let (sigma, mid, tau) = ordered_rule_triple(&lat, &mut gen);
        let zeta = |n: NodeId| obstacle.value(n);

        let direct = ef_conditional_expectation(&lat, &sigma, &tau, zeta, &driver).unwrap();
        let inner = solve_bsde(&lat, &tau, zeta, &driver).unwrap();
        let nested =
            ef_conditional_expectation(&lat, &sigma, &mid, |n| inner.x.value(n), &driver)
                .unwrap();
        for ((n1, v1), (n2, v2)) in direct.entries.iter().zip(nested.entries.iter()) {
            assert_eq!(n1, n2);
            assert!((v1 - v2).abs() <= 1e-10, "seed {seed}: {v1} vs {v2}");
        }
    }
}

#[test]
fn tower_property_for_zero_driver() {
    let (lat, obstacle, _) = instance(7, 2);
    let driver = Driver::zero();
    let mut gen = InstanceGenerator::new(99);
    let (sigma, mid, tau) = ordered_rule_triple(&lat, &mut gen);
    let zeta = |n: NodeId| obstacle.value(n);
    let direct = ef_conditional_expectation(&lat, &sigma, &tau, zeta, &driver).unwrap();
    let inner = solve_bsde(&lat, &tau, zeta, &driver).unwrap();
    let nested =
        ef_conditional_expectation(&lat, &sigma, &mid, |n| inner.x.value(n), &driver).unwrap();
    for ((_, v1), (_, v2)) in direct.entries.iter().zip(nested.entries.iter()) {
        assert!((v1 - v2).abs() <= 1e-12);
    }
}

#[test]
fn solver_matches_independent_recursive_evaluator() {
    // A direct recursive evaluator, written against the definition rather
    // than the layer sweep, must agree with the solver at the root.
    fn recursive_value(
        lat: &Lattice,
        rule: &StoppingRule,
        terminal: &dyn Fn(NodeId) -> f64,
        driver: &Driver,
        node: NodeId,
    ) -> f64 {
        if rule.is_stopped(node) {
            return terminal(node);
        }
        match node.phase {
            Phase::Main => {
                if node.step == lat.num_steps() {
                    terminal(node)
                } else {
                    recursive_value(lat, rule, terminal, driver, NodeId::post(node.step, node.path))
                }
            }
            Phase::Post => {
                let next: [f64; 4] = std::array::from_fn(|b| {
                    recursive_value(lat, rule, terminal, driver, node.child(b))
                });
                let e = lat.conditional_expectation(&next);
                let proj = lat.project_increment(&next);
                // Scalar fixed point by plain iteration.
                let mut y = e;
                for _ in 0..200 {
                    let n = e + driver.eval(lat.time(node.step), y, proj.z, proj.kappa) * lat.dt();
                    if (n - y).abs() <= 1e-13 {
                        break;
                    }
                    y = n;
                }
                y
            }
        }
    }

    for seed in 0..20u64 {
        let (lat, obstacle, driver) = instance(seed, 2);
        let mut gen = InstanceGenerator::new(seed ^ 0x51);
        let tau = snell_core::stopping::random_rule(&lat, gen.rng(), 0.25);
        let terminal = |n: NodeId| obstacle.value(n);
        let sol = solve_bsde(&lat, &tau, terminal, &driver).unwrap();
        let expected = recursive_value(&lat, &tau, &terminal, &driver, NodeId::root());
        assert!((sol.root_value() - expected).abs() <= 1e-10, "seed {seed}");
        // Determinism: an identical re-run reproduces every bit.
        let again = solve_bsde(&lat, &tau, terminal, &driver).unwrap();
        assert_eq!(sol.x, again.x);
    }
}

#[test]
fn ef_martingale_self_test() {
    // For X = solve_bsde output and σ ≤ τ' ≤ τ:
    // E^f_{σ,τ'}(X_{τ'}) = X_σ within 1e-10.
    for seed in 0..25u64 {
        let (lat, obstacle, driver) = instance(seed, 3);
        let mut gen = InstanceGenerator::new(seed ^ 0xC4);
        let (sigma, mid, tau) = ordered_rule_triple(&lat, &mut gen);
        let sol = solve_bsde(&lat, &tau, |n| obstacle.value(n), &driver).unwrap();
        let at_mid =
            ef_conditional_expectation(&lat, &sigma, &mid, |n| sol.x.value(n), &driver).unwrap();
        let at_sigma = values_at_first_hits(&lat, &sigma, &sol.x);
        for ((n1, v1), (n2, v2)) in at_mid.entries.iter().zip(at_sigma.entries.iter()) {
            assert_eq!(n1, n2);
            assert!((v1 - v2).abs() <= 1e-10, "seed {seed}: {v1} vs {v2}");
        }
    }
}

#[test]
fn ef_monotone_in_terminal_condition() {
    for seed in 0..40u64 {
        let (lat, obstacle, driver) = instance(seed, 2);
        let mut gen = InstanceGenerator::new(seed ^ 0x77);
        let lifted = gen.lifted(&lat, &obstacle, 0.5);
        let rule = StoppingRule::terminal(&lat);
        let low = solve_bsde(&lat, &rule, |n| obstacle.value(n), &driver).unwrap();
        let high = solve_bsde(&lat, &rule, |n| lifted.value(n), &driver).unwrap();
        let excess = low.x.max_excess_over(&high.x);
        assert!(excess <= 1e-10, "seed {seed}: excess {excess}");
    }
}

#[test]
fn unreflected_comparison_two_hundred_instances() {
    let result = unreflected_comparison_suite(0xBE5DE, 200).unwrap();
    assert!(result.passed, "{}", result.detail);
}

#[test]
fn picard_guess_invariance_randomized() {
    let (lat, _, _) = instance(3, 2);
    let mut gen = InstanceGenerator::new(55);
    for _ in 0..100 {
        let driver = gen.driver(lat.intensity(), false);
        let next: [f64; 4] = std::array::from_fn(|_| {
            use rand::Rng;
            gen.rng().gen_range(-2.0..2.0)
        });
        let a = onestep_implicit_from(&lat, 0.5, &next, &driver, -100.0).unwrap();
        let b = onestep_implicit_from(&lat, 0.5, &next, &driver, 100.0).unwrap();
        assert!((a.y - b.y).abs() <= 1e-11);
    }
}

#[test]
fn frozen_region_holds_value_constant() {
    // After the first hit the value is frozen along the path (the driver is
    // switched off), matching E^f along rules stopping early.
    let (lat, obstacle, driver) = instance(11, 2);
    let mut rule = StoppingRule::terminal(&lat);
    rule.set_stopped(NodeId::post(0, 0), true);
    let rule = rule.canonicalize(&lat);
    let sol = solve_bsde(&lat, &rule, |n| obstacle.value(n), &driver).unwrap();
    let frozen = sol.x.value(NodeId::post(0, 0));
    for step in 1..=2 {
        for path in 0..lat.layer_width(step) {
            assert_eq!(sol.x.value(NodeId::main(step, path)), frozen);
        }
    }
    assert_eq!(sol.z[1][2], 0.0);
    assert_eq!(sol.kappa[1][2], 0.0);
}
