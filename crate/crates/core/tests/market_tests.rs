//! Integration tests for the market application: pricing consistency,
//! oracle agreement for digitals, imperfection ordering, payoff
//! monotonicity, hedge spanning, and the non-r.u.s.c. digital put override.

use snell_core::generate::InstanceGenerator;
use snell_core::lattice::{GridSpec, Lattice, NodeId, StoppingRule};
use snell_core::market::*;
use snell_core::rbsde::{solve_rbsde, ObstacleView};
use snell_core::stopping::{epsilon_optimal_rule, value_by_oracle};

fn coupled_model() -> MarketModel {
    MarketModel {
        r: 0.03,
        mu: [0.06, 0.04],
        sigma: [0.25, 0.15],
        beta_jump: [0.2, -0.15],
        intensity: 0.5,
        s0: [1.0, 1.0],
        schedule: None,
    }
}

/// Digital on a pure-jump underlying, spanned by a diffusive second asset:
/// next-layer values never load the dW·dÑ direction, so `h ≡ 0` and the
/// two-asset hedge is exact.
fn jump_underlying_model() -> MarketModel {
    MarketModel {
        r: 0.02,
        mu: [0.04, 0.03],
        sigma: [0.0, 0.2],
        beta_jump: [0.3, 0.0],
        intensity: 0.5,
        s0: [1.0, 1.0],
        schedule: None,
    }
}

fn lattice(k: usize, intensity: f64) -> Lattice {
    Lattice::build(GridSpec { num_steps: k, horizon: 1.0, intensity }).unwrap()
}

#[test]
fn pricing_consistency_is_definitional() {
    let model = coupled_model();
    let lat = lattice(2, model.intensity);
    let payoff = PayoffSpec::new(PayoffKind::DigitalCall { strike: 1.05 });
    let out = price_american(&lat, &model, &payoff, &Imperfection::Perfect).unwrap();
    let direct = solve_rbsde(&lat, &out.obstacle, &out.driver).unwrap();
    assert_eq!(out.u0, direct.root_value());
}

#[test]
fn digital_call_matches_oracle_at_two_steps() {
    let model = coupled_model();
    let lat = lattice(2, model.intensity);
    let payoff = PayoffSpec::new(PayoffKind::DigitalCall { strike: 1.05 });
    let out = price_american(&lat, &model, &payoff, &Imperfection::Perfect).unwrap();
    let oracle =
        value_by_oracle(&lat, &out.obstacle, &out.driver, NodeId::root(), 3).unwrap();
    assert!((out.u0 - oracle).abs() <= 1e-10, "u0 {} vs oracle {oracle}", out.u0);
}

#[test]
fn borrowing_cost_raises_the_price() {
    let model = coupled_model();
    let lat = lattice(3, model.intensity);
    let payoff = PayoffSpec::new(PayoffKind::VanillaPut { strike: 1.1 });
    let perfect = price_american(&lat, &model, &payoff, &Imperfection::Perfect).unwrap();
    let borrow = price_american(
        &lat,
        &model,
        &payoff,
        &Imperfection::BorrowRate { rate: model.r + 0.05 },
    )
    .unwrap();
    assert!(
        borrow.u0 >= perfect.u0 - 1e-10,
        "borrow {} vs perfect {}",
        borrow.u0,
        perfect.u0
    );
}

#[test]
fn price_is_monotone_in_payoff() {
    let model = coupled_model();
    let lat = lattice(3, model.intensity);
    let low = PayoffSpec::new(PayoffKind::VanillaCall { strike: 1.2 });
    let high = PayoffSpec::new(PayoffKind::VanillaCall { strike: 1.0 });
    let u_low = price_american(&lat, &model, &low, &Imperfection::Perfect).unwrap().u0;
    let u_high = price_american(&lat, &model, &high, &Imperfection::Perfect).unwrap().u0;
    assert!(u_low <= u_high + 1e-10);
}

#[test]
fn hedge_is_exact_when_h_vanishes() {
    // κ-and-z-only increments: digital on the pure-jump asset.
    let model = jump_underlying_model();
    let payoff = PayoffSpec::new(PayoffKind::DigitalCall { strike: 1.05 });
    for k in [2usize, 4] {
        let lat = lattice(k, model.intensity);
        let out = price_american(&lat, &model, &payoff, &Imperfection::Perfect).unwrap();
        assert!(!out.solution.h_is_nonzero(1e-12));
        let hedge =
            superhedging_strategy(&lat, &model, &out.solution, &out.obstacle, &out.driver)
                .unwrap();
        assert!(hedge.max_shortfall <= 1e-10, "shortfall {}", hedge.max_shortfall);
        assert!(hedge.wealth_step_residual <= 1e-12);
    }
}

#[test]
fn shortfall_refinement_is_nonincreasing_on_h_free_instance() {
    let model = jump_underlying_model();
    let payoff = PayoffSpec::new(PayoffKind::DigitalCall { strike: 1.05 });
    let mut shortfalls = Vec::new();
    for k in [2usize, 4, 8] {
        let lat = lattice(k, model.intensity);
        let out = price_american(&lat, &model, &payoff, &Imperfection::Perfect).unwrap();
        let hedge =
            superhedging_strategy(&lat, &model, &out.solution, &out.obstacle, &out.driver)
                .unwrap();
        assert!(
            hedge.max_shortfall <= hedge.shortfall_bound + 1e-10,
            "bound violated at K={k}"
        );
        shortfalls.push(hedge.max_shortfall);
    }
    assert!(
        shortfalls.windows(2).all(|w| w[1] <= w[0] + 1e-12),
        "shortfalls {shortfalls:?}"
    );
}

#[test]
fn coupled_instance_obeys_h_bound_per_instance() {
    // On σβ-coupled instances the hedge misses the orthogonal component;
    // the shortfall still obeys the accumulated-|Δh| bound at every K.
    let model = coupled_model();
    let payoff = PayoffSpec::new(PayoffKind::DigitalCall { strike: 1.05 });
    for k in [2usize, 4, 8] {
        let lat = lattice(k, model.intensity);
        let out = price_american(&lat, &model, &payoff, &Imperfection::Perfect).unwrap();
        let hedge =
            superhedging_strategy(&lat, &model, &out.solution, &out.obstacle, &out.driver)
                .unwrap();
        assert!(
            hedge.max_shortfall <= hedge.shortfall_bound + 1e-10,
            "K={k}: shortfall {} exceeds bound {}",
            hedge.max_shortfall,
            hedge.shortfall_bound
        );
    }
}

#[test]
fn digital_put_post_override_manufactures_irregularity() {
    // The digital put payoff is not r.u.s.c. in continuous time; on the
    // lattice the override post = 1_{S¹ ≤ K - δ} manufactures main < post
    // nodes, and the solver handles them (oracle equivalence intact).
    let model = coupled_model();
    let lat = lattice(2, model.intensity);
    let payoff = PayoffSpec {
        kind: PayoffKind::DigitalPut { strike: 1.0 },
        post_kind: Some(PayoffKind::DigitalPut { strike: 1.1 }),
    };
    let out = price_american(&lat, &model, &payoff, &Imperfection::Perfect).unwrap();
    assert!(!out.obstacle.is_rusc(&lat), "override should break r.u.s.c.");
    let oracle =
        value_by_oracle(&lat, &out.obstacle, &out.driver, NodeId::root(), 3).unwrap();
    assert!((out.u0 - oracle).abs() <= 1e-10);
}

#[test]
fn exercise_rule_achieves_price_on_digital_call() {
    // American put-like optimality identity through the pricing pipeline:
    // the contact-set rule achieves the price through E^f.
    let model = coupled_model();
    let lat = lattice(3, model.intensity);
    let payoff = PayoffSpec::new(PayoffKind::DigitalCall { strike: 1.05 });
    let out = price_american(&lat, &model, &payoff, &Imperfection::Perfect).unwrap();
    let start = StoppingRule::at_root(&lat);
    let (rule, _) = epsilon_optimal_rule(&lat, &out.solution, &out.obstacle, &start, 1e-10);
    let crit = snell_core::stopping::check_optimality_criterion(
        &lat,
        &out.solution,
        &out.obstacle,
        &out.driver,
        &rule,
        &start,
    )
    .unwrap();
    assert!(crit.direct_gap <= 1e-9, "gap {}", crit.direct_gap);
}

#[test]
fn market_driver_monotonicity_gate() {
    // A nearly-degenerate jump column makes the perfect driver violate the
    // jump-monotonicity assumption; the construction must reject it.
    let lat = lattice(1, 0.1);
    let model = MarketModel {
        r: 0.0,
        mu: [0.3, 0.3],
        sigma: [0.2, 0.25],
        beta_jump: [0.05, -0.04],
        intensity: 0.1,
        s0: [1.0, 1.0],
        schedule: None,
    };
    let err = market_driver(&lat, &model, &Imperfection::Perfect).unwrap_err();
    assert!(matches!(err, snell_core::Error::MonotonicityFailed { .. }));
}

#[test]
fn custom_payoff_expression_over_both_assets() {
    let model = coupled_model();
    let lat = lattice(2, model.intensity);
    let payoff = PayoffSpec::new(PayoffKind::Custom {
        expression: "max(0.6*(s1-1.0), 0.4*(s2-1.0))".into(),
    });
    let out = price_american(&lat, &model, &payoff, &Imperfection::Perfect).unwrap();
    assert!(out.u0.is_finite() && out.u0 >= 0.0);
    let assets = simulate_assets(&lat, &model).unwrap();
    let node = NodeId::main(2, 7);
    let [s1, s2] = assets.at(node);
    let expected = (0.6 * (s1 - 1.0)).max(0.4 * (s2 - 1.0));
    assert!((out.obstacle.main(2, 7) - expected).abs() <= 1e-15);
}

#[test]
fn generator_drivers_compose_with_market_obstacles() {
    // Random catalog drivers price market payoffs without violating the
    // comparison ordering wired through the pipeline.
    let model = coupled_model();
    let lat = lattice(2, model.intensity);
    let assets = simulate_assets(&lat, &model).unwrap();
    let payoff = PayoffSpec::new(PayoffKind::VanillaCall { strike: 1.0 });
    let obstacle = build_obstacle(&lat, &assets, &payoff).unwrap();
    let mut gen = InstanceGenerator::new(8);
    let (lo, hi) = gen.monotone_driver_pair(model.intensity);
    let y_lo = solve_rbsde(&lat, &obstacle, &lo).unwrap();
    let y_hi = solve_rbsde(&lat, &obstacle, &hi).unwrap();
    assert!(y_lo.y.max_excess_over(&y_hi.y) <= 1e-10);
}
