//! The optimal-stopping layer: brute-force value oracles, ε-optimal and
//! optimal stopping rules, and supermartingale/Snell-envelope verifiers.
//!
//! The oracle computes `max over stopping rules τ of E^f_{node,τ}(ξ_τ)` by
//! exhausting the rule space. Rules are ordered canonically (stop at Main,
//! stop at Post, then the continue-combinations lexicographically in child
//! order), and the per-rule value factors through subtrees: the value of
//! "continue" for a combination of sub-rules is one implicit step applied to
//! the four sub-rule values. Enumerating combinations with shared prefix
//! sums evaluates every rule exactly once without materialising the rule
//! set; the result is identical to evaluating each enumerated rule through
//! the backward BSDE solver (cross-checked in tests at small sizes).

use crate::bsde::{
    ef_conditional_expectation, Driver, PICARD_MAX_ITER, PICARD_TOL,
};
use crate::error::Error;
use crate::lattice::{
    enumerate_stopping_rules, AdaptedProcess, Lattice, NodeId, NodeStatus, Phase, Region,
    StoppingRule, SubTime, ORACLE_LIMIT_DEFAULT,
};
use crate::rbsde::{Obstacle, ObstacleView, RbsdeSolution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// Largest subtree value set the oracle will materialise; above this the
/// subtree is too deep and the request is rejected.
const ORACLE_SET_CAP: u128 = 200_000;

/// Rule spaces up to this size are checked pair-exhaustively by
/// [`check_supermartingale`]; larger ones fall back to sampled pairs.
const EXHAUSTIVE_PAIR_CAP: u128 = 1_000;

struct OracleCtx<'a> {
    lat: &'a Lattice,
    obstacle: &'a Obstacle,
    driver: &'a Driver,
    counts: Vec<u128>,
    /// Affine coefficients `(a, bz, bk, d)` per step when available.
    affine: Vec<Option<(f64, f64, f64, f64)>>,
    /// Per-branch weights for incremental moment sums.
    we: [f64; 4],
    wz: [f64; 4],
    wk: [f64; 4],
}

impl<'a> OracleCtx<'a> {
    fn new(lat: &'a Lattice, obstacle: &'a Obstacle, driver: &'a Driver) -> Result<Self, Error> {
        if driver.lipschitz * lat.dt() >= 1.0 {
            return Err(Error::NoContraction { lipschitz: driver.lipschitz, dt: lat.dt() });
        }
        let k = lat.num_steps();
        let mut counts = vec![0u128; k + 1];
        counts[k] = 1;
        for step in (0..k).rev() {
            counts[step] = 2u128.saturating_add(counts[step + 1].saturating_pow(4));
        }
        let affine = (0..k).map(|s| driver.affine_at(lat.time(s))).collect();
        let mut we = [0.0; 4];
        let mut wz = [0.0; 4];
        let mut wk = [0.0; 4];
        let var_w: f64 = lat.branches().iter().map(|b| b.probability * b.dw * b.dw).sum();
        let var_n: f64 =
            lat.branches().iter().map(|b| b.probability * b.dn_tilde * b.dn_tilde).sum();
        for (i, b) in lat.branches().iter().enumerate() {
            we[i] = b.probability;
            wz[i] = b.probability * b.dw / var_w;
            wk[i] = b.probability * b.dn_tilde / var_n;
        }
        Ok(OracleCtx { lat, obstacle, driver, counts, affine, we, wz, wk })
    }

    /// One implicit step from moment sums, matching `onestep_implicit` to
    /// Picard tolerance; affine drivers solve in closed form.
    fn step_value(&self, step: usize, e: f64, z: f64, kappa: f64, warm: f64) -> Result<f64, Error> {
        let dt = self.lat.dt();
        if let Some((a, bz, bk, d)) = self.affine[step] {
            return Ok((e + (bz * z + bk * kappa + d) * dt) / (1.0 - a * dt));
        }
        let t_k = self.lat.time(step);
        let mut y = warm;
        for _ in 0..PICARD_MAX_ITER {
            let next = e + self.driver.eval(t_k, y, z, kappa) * dt;
            if (next - y).abs() <= PICARD_TOL {
                return Ok(next);
            }
            y = next;
        }
        Err(Error::NonConvergence { residual: f64::NAN, iterations: PICARD_MAX_ITER })
    }

    /// All sub-rule values below a Main node, in canonical rule order.
    fn value_set_main(&self, step: usize, path: usize) -> Result<Vec<f64>, Error> {
        let k = self.lat.num_steps();
        if step == k {
            return Ok(vec![self.obstacle.terminal(path)]);
        }
        let mut out = Vec::with_capacity(self.counts[step].min(ORACLE_SET_CAP) as usize);
        out.push(self.obstacle.main(step, path));
        out.push(self.obstacle.post(step, path));
        self.stream_combos(step, path, |_, y| out.push(y))?;
        Ok(out)
    }

    /// Streams `onestep` values of every child-rule combination below a Post
    /// node, in lexicographic combination order.
    fn stream_combos<F: FnMut(u128, f64)>(
        &self,
        step: usize,
        path: usize,
        mut emit: F,
    ) -> Result<(), Error> {
        let m = self.counts[step + 1];
        if m > ORACLE_SET_CAP {
            return Err(Error::OracleTooLarge {
                num_steps: self.lat.num_steps(),
                limit: ORACLE_LIMIT_DEFAULT,
            });
        }
        let sets: [Vec<f64>; 4] = [
            self.value_set_main(step + 1, path << 2)?,
            self.value_set_main(step + 1, (path << 2) | 1)?,
            self.value_set_main(step + 1, (path << 2) | 2)?,
            self.value_set_main(step + 1, (path << 2) | 3)?,
        ];
        let m = sets[0].len();
        let contrib = |b: usize| -> (Vec<f64>, Vec<f64>, Vec<f64>) {
            let e: Vec<f64> = sets[b].iter().map(|v| self.we[b] * v).collect();
            let z: Vec<f64> = sets[b].iter().map(|v| self.wz[b] * v).collect();
            let k: Vec<f64> = sets[b].iter().map(|v| self.wk[b] * v).collect();
            (e, z, k)
        };
        let (e0, z0, k0) = contrib(0);
        let (e1, z1, k1) = contrib(1);
        let (e2, z2, k2) = contrib(2);
        let (e3, z3, k3) = contrib(3);

        let mut combo: u128 = 0;
        let mut warm = 0.0;
        for i0 in 0..m {
            let (ea, za, ka) = (e0[i0], z0[i0], k0[i0]);
            for i1 in 0..m {
                let (eb, zb, kb) = (ea + e1[i1], za + z1[i1], ka + k1[i1]);
                for i2 in 0..m {
                    let (ec, zc, kc) = (eb + e2[i2], zb + z2[i2], kb + k2[i2]);
                    for i3 in 0..m {
                        let e = ec + e3[i3];
                        let z = zc + z3[i3];
                        let kap = kc + k3[i3];
                        if combo == 0 {
                            warm = e;
                        }
                        let y = self.step_value(step, e, z, kap, warm)?;
                        warm = y;
                        emit(combo, y);
                        combo += 1;
                    }
                }
            }
        }
        Ok(())
    }

    /// Max over all sub-rules strictly below a Main node's stop decision,
    /// i.e. the subtree value at the Post twin. Also returns the canonical
    /// index (within the Main node's ordering) of the argmax sub-rule.
    fn post_value(&self, step: usize, path: usize) -> Result<(f64, u128), Error> {
        let mut best = self.obstacle.post(step, path);
        let mut best_index: u128 = 1; // "stop at post" in Main-node ordering
        self.stream_combos(step, path, |combo, y| {
            if y > best {
                best = y;
                best_index = 2 + combo;
            }
        })?;
        Ok((best, best_index))
    }
}

/// Result of the exhaustive oracle at a node.
#[derive(Debug, Clone, Copy)]
pub struct OracleReport {
    /// `max_τ E^f(ξ_τ)` over all rules at or after the node.
    pub value: f64,
    /// Max over rules stopping strictly after the node (Post phase onward).
    pub strict_value: f64,
    /// Canonical index of the maximising rule in the node's subtree order.
    pub best_index: u128,
    /// Number of rules exhausted.
    pub rule_count: u128,
}

fn assert_oracle_size(lat: &Lattice, node: NodeId, limit: usize) -> Result<(), Error> {
    let remaining = lat.num_steps() - node.step;
    if remaining > limit {
        return Err(Error::OracleTooLarge { num_steps: lat.num_steps(), limit });
    }
    Ok(())
}

/// Exhaustive oracle at a Main node: value, strict value, and argmax index.
pub fn oracle_at_node(
    lat: &Lattice,
    obstacle: &Obstacle,
    driver: &Driver,
    node: NodeId,
    limit: usize,
) -> Result<OracleReport, Error> {
    assert_oracle_size(lat, node, limit)?;
    if node.phase != Phase::Main {
        return Err(Error::InvalidInput("oracle node must be at Main phase".into()));
    }
    let ctx = OracleCtx::new(lat, obstacle, driver)?;
    if node.step == lat.num_steps() {
        let v = obstacle.terminal(node.path);
        return Ok(OracleReport { value: v, strict_value: v, best_index: 0, rule_count: 1 });
    }
    let (strict_value, strict_index) = ctx.post_value(node.step, node.path)?;
    let stop_now = obstacle.main(node.step, node.path);
    let (value, best_index) =
        if stop_now >= strict_value { (stop_now, 0) } else { (strict_value, strict_index) };
    Ok(OracleReport {
        value,
        strict_value,
        best_index,
        rule_count: crate::lattice::count_stopping_rules(lat.num_steps() - node.step),
    })
}

/// `V(node) = max over rules τ ≥ node of E^f_{node,τ}(ξ_τ)` by exhaustion.
pub fn value_by_oracle(
    lat: &Lattice,
    obstacle: &Obstacle,
    driver: &Driver,
    node: NodeId,
    limit: usize,
) -> Result<f64, Error> {
    match node.phase {
        Phase::Main => Ok(oracle_at_node(lat, obstacle, driver, node, limit)?.value),
        Phase::Post => {
            assert_oracle_size(lat, node, limit)?;
            let ctx = OracleCtx::new(lat, obstacle, driver)?;
            Ok(ctx.post_value(node.step, node.path)?.0)
        }
    }
}

/// The strict value `V⁺(node)`: max over rules stopping strictly after the
/// (non-terminal, Main-phase) node, i.e. at its Post phase or later.
pub fn strict_value_by_oracle(
    lat: &Lattice,
    obstacle: &Obstacle,
    driver: &Driver,
    node: NodeId,
    limit: usize,
) -> Result<f64, Error> {
    if node.phase != Phase::Main || node.step == lat.num_steps() {
        return Err(Error::InvalidInput(
            "strict value requires a non-terminal Main node".into(),
        ));
    }
    Ok(oracle_at_node(lat, obstacle, driver, node, limit)?.strict_value)
}

/// Per-rule values `E^f_{root,τ}(ξ_τ)` for every enumerated rule, in
/// canonical enumeration order, each evaluated independently through the
/// backward solver. Feasible only for small rule spaces; this is the
/// report-facing (and test-facing) literal form of the oracle.
pub fn rule_values_by_enumeration(
    lat: &Lattice,
    obstacle: &Obstacle,
    driver: &Driver,
    limit: usize,
) -> Result<Vec<(StoppingRule, f64)>, Error> {
    let rules = enumerate_stopping_rules(lat, limit)?;
    if rules.total() > EXHAUSTIVE_PAIR_CAP {
        return Err(Error::OracleTooLarge { num_steps: lat.num_steps(), limit });
    }
    let mut out = Vec::with_capacity(rules.total() as usize);
    for rule in rules {
        let sol = crate::bsde::solve_bsde(lat, &rule, |n| obstacle.value(n), driver)?;
        out.push((rule, sol.root_value()));
    }
    Ok(out)
}

/// Report of an ε-optimal rule construction.
#[derive(Debug)]
pub struct EpsilonReport {
    /// Whether `Y ≤ ξ + ε` held at every hit node of the returned rule. For
    /// r.u.s.c. obstacles this is guaranteed; irregular obstacles may flag a
    /// failure here (the rule is still returned).
    pub hit_inequality_ok: bool,
    /// Largest `Y - ξ - ε` excess at a hit node (negative when ok).
    pub max_hit_excess: f64,
}

/// First hit of `{Y ≤ ξ + ε}` at or after `start`, expressed as an actual
/// stopping time: a hit first observed at a Post node means the infimum is
/// the grid time itself, so the stop is rounded down to the same-step Main
/// node (unless that precedes `start`).
pub fn epsilon_optimal_rule(
    lat: &Lattice,
    sol: &RbsdeSolution,
    obstacle: &Obstacle,
    start: &StoppingRule,
    epsilon: f64,
) -> (StoppingRule, EpsilonReport) {
    let start_status = NodeStatus::compute(lat, start);
    let k = lat.num_steps();
    let mut rule = StoppingRule::terminal(lat);
    for step in 0..k {
        for path in 0..lat.layer_width(step) {
            let main = NodeId::main(step, path);
            let post = NodeId::post(step, path);
            let hit = |n: NodeId| {
                start_status.of(n) != Region::Before
                    && sol.y.value(n) <= obstacle.value(n) + epsilon
            };
            if hit(main) {
                rule.set_stopped(main, true);
            } else if hit(post) {
                // Round down to the Main node when it is not before start.
                if start_status.of(main) != Region::Before {
                    rule.set_stopped(main, true);
                } else {
                    rule.set_stopped(post, true);
                }
            }
        }
    }
    let rule = rule.canonicalize(lat);
    let mut max_excess = f64::NEG_INFINITY;
    for node in rule.first_hit_nodes(lat) {
        max_excess = max_excess.max(sol.y.value(node) - obstacle.value(node) - epsilon);
    }
    let report = EpsilonReport {
        hit_inequality_ok: max_excess <= 1e-12,
        max_hit_excess: max_excess,
    };
    (rule, report)
}

/// Gap report for ε-optimality: `Y_start - E^f_{start,τ^ε}(ξ_{τ^ε}) ≤ L·ε`
/// with `L = exp((1 + 2K_f + K_f²)·T)`.
#[derive(Debug, Clone, Copy)]
pub struct EpsilonGap {
    pub gap: f64,
    pub l_bound: f64,
    pub epsilon: f64,
    pub within_bound: bool,
}

pub fn epsilon_optimality_gap(
    lat: &Lattice,
    sol: &RbsdeSolution,
    obstacle: &Obstacle,
    driver: &Driver,
    start: &StoppingRule,
    epsilon: f64,
) -> Result<EpsilonGap, Error> {
    let (rule, _) = epsilon_optimal_rule(lat, sol, obstacle, start, epsilon);
    let values =
        ef_conditional_expectation(lat, start, &rule, |n| obstacle.value(n), driver)?;
    let mut gap = f64::NEG_INFINITY;
    for (node, v) in values.entries {
        gap = gap.max(sol.y.value(node) - v);
    }
    let kf = driver.lipschitz;
    let l_bound = ((1.0 + 2.0 * kf + kf * kf) * lat.horizon()).exp();
    Ok(EpsilonGap { gap, l_bound, epsilon, within_bound: gap <= l_bound * epsilon + 1e-10 })
}

/// Report of the optimal-rule construction.
#[derive(Debug)]
pub struct OptimalReport {
    /// Largest `|E^f_{start,τ⁰}(ξ_{τ⁰}) - Y_start|` over start hit nodes.
    pub max_gap: f64,
    /// Whether the ε-rule sequence `ε_n = 2^{-n}` stabilised to the returned
    /// rule (unchanged twice) within the iteration budget.
    pub stabilized: bool,
    pub stabilized_at: Option<usize>,
}

/// Returns `τ⁰ = inf{t ≥ start: Y_t = ξ_t}` (equality at `1e-10`), verifying
/// both regularity surrogates, the optimality identity, and the
/// stabilisation of the ε-rule sequence onto `τ⁰`.
pub fn optimal_rule(
    lat: &Lattice,
    sol: &RbsdeSolution,
    obstacle: &Obstacle,
    driver: &Driver,
    start: &StoppingRule,
) -> Result<(StoppingRule, OptimalReport), Error> {
    if !obstacle.is_rusc(lat) {
        return Err(Error::PreconditionFailed(
            "obstacle is not r.u.s.c. (main < post somewhere)".into(),
        ));
    }
    if !obstacle.lusc_surrogate_holds(lat) {
        return Err(Error::PreconditionFailed(
            "obstacle fails the discrete l.u.s.c. surrogate (upward left jump)".into(),
        ));
    }
    let (tau0, _) = epsilon_optimal_rule(lat, sol, obstacle, start, 1e-10);

    let values = ef_conditional_expectation(lat, start, &tau0, |n| obstacle.value(n), driver)?;
    let mut max_gap = 0.0f64;
    for (node, v) in values.entries {
        max_gap = max_gap.max((sol.y.value(node) - v).abs());
    }
    if max_gap > 1e-9 {
        return Err(Error::NotOptimal { gap: max_gap, tolerance: 1e-9 });
    }

    // τ̂ = τ⁰: the ε-rules must stabilise onto τ⁰ as ε → 0.
    let mut stabilized = false;
    let mut stabilized_at = None;
    let mut previous: Option<StoppingRule> = None;
    let mut streak = 0;
    for n in 0..=20usize {
        let eps = 0.5f64.powi(n as i32);
        let (rule, _) = epsilon_optimal_rule(lat, sol, obstacle, start, eps);
        if previous.as_ref() == Some(&rule) {
            streak += 1;
            if streak >= 2 && rule == tau0 {
                stabilized = true;
                stabilized_at = Some(n);
                break;
            }
        } else {
            streak = 0;
        }
        previous = Some(rule);
    }
    Ok((tau0, OptimalReport { max_gap, stabilized, stabilized_at }))
}

/// Report of the martingale-plus-touching optimality criterion.
#[derive(Debug, Clone, Copy)]
pub struct OptimalityCriterion {
    /// `ΔA = ΔC = 0` (≤ 1e-12) strictly between start and the candidate.
    pub is_martingale_segment: bool,
    /// `Y = ξ` (≤ 1e-10) at every candidate hit node.
    pub touches_obstacle: bool,
    pub optimal: bool,
    /// `max |E^f_{start,candidate}(ξ) - Y_start|` as a cross-check.
    pub direct_gap: f64,
}

pub fn check_optimality_criterion(
    lat: &Lattice,
    sol: &RbsdeSolution,
    obstacle: &Obstacle,
    driver: &Driver,
    candidate: &StoppingRule,
    start: &StoppingRule,
) -> Result<OptimalityCriterion, Error> {
    if !start.precedes(lat, candidate) {
        return Err(Error::BadOrdering("candidate must not precede start".into()));
    }
    let start_status = NodeStatus::compute(lat, start);
    let cand_status = NodeStatus::compute(lat, candidate);
    let mut max_da = 0.0f64;
    let mut max_dc = 0.0f64;
    for step in 0..lat.num_steps() {
        for path in 0..lat.layer_width(step) {
            let main = NodeId::main(step, path);
            let post = NodeId::post(step, path);
            let in_segment = |n: NodeId| {
                start_status.of(n) != Region::Before && cand_status.of(n) == Region::Before
            };
            if in_segment(main) {
                max_dc = max_dc.max(sol.c_inc[step][path]);
            }
            if in_segment(post) {
                max_da = max_da.max(sol.a_inc[step][path]);
            }
        }
    }
    let mut max_touch = 0.0f64;
    for node in candidate.first_hit_nodes(lat) {
        max_touch = max_touch.max((sol.y.value(node) - obstacle.value(node)).abs());
    }
    let values =
        ef_conditional_expectation(lat, start, candidate, |n| obstacle.value(n), driver)?;
    let mut direct_gap = 0.0f64;
    for (node, v) in values.entries {
        direct_gap = direct_gap.max((sol.y.value(node) - v).abs());
    }
    let is_martingale_segment = max_da <= 1e-12 && max_dc <= 1e-12;
    let touches_obstacle = max_touch <= 1e-10;
    Ok(OptimalityCriterion {
        is_martingale_segment,
        touches_obstacle,
        optimal: is_martingale_segment && touches_obstacle,
        direct_gap,
    })
}

/// Report of the strong `E^f`-supermartingale check.
#[derive(Debug, Clone, Copy)]
pub struct SupermartingaleReport {
    /// `max (E^f_{σ,τ}(φ_τ) - φ_σ)` over the checked pairs.
    pub max_violation: f64,
    pub pairs_checked: usize,
    pub exhaustive: bool,
    pub passes: bool,
}

/// Random adapted rule: marks each interior node stopped with probability
/// `stop_prob`, then canonicalises.
pub fn random_rule(lat: &Lattice, rng: &mut ChaCha12Rng, stop_prob: f64) -> StoppingRule {
    let mut rule = StoppingRule::terminal(lat);
    for step in 0..lat.num_steps() {
        for path in 0..lat.layer_width(step) {
            if rng.gen_bool(stop_prob) {
                rule.set_stopped(NodeId::main(step, path), true);
            }
            if rng.gen_bool(stop_prob) {
                rule.set_stopped(NodeId::post(step, path), true);
            }
        }
    }
    rule.canonicalize(lat)
}

/// Checks `E^f_{σ,τ}(φ_τ) ≤ φ_σ` over ordered rule pairs: exhaustively when
/// the rule space is small, otherwise over all deterministic sub-time pairs
/// plus `pair_budget` random adapted pairs.
pub fn check_supermartingale(
    lat: &Lattice,
    process: &AdaptedProcess,
    driver: &Driver,
    pair_budget: usize,
    seed: u64,
) -> Result<SupermartingaleReport, Error> {
    let mut max_violation = f64::NEG_INFINITY;
    let mut pairs = 0usize;

    let mut check_pair = |sigma: &StoppingRule, tau: &StoppingRule| -> Result<(), Error> {
        let values = ef_conditional_expectation(lat, sigma, tau, |n| process.value(n), driver)?;
        for (node, v) in values.entries {
            max_violation = max_violation.max(v - process.value(node));
        }
        pairs += 1;
        Ok(())
    };

    let total = crate::lattice::count_stopping_rules(lat.num_steps());
    let exhaustive = total <= EXHAUSTIVE_PAIR_CAP;
    if exhaustive {
        let rules: Vec<StoppingRule> =
            enumerate_stopping_rules(lat, lat.num_steps())?.collect();
        for tau in &rules {
            for sigma in &rules {
                if sigma.precedes(lat, tau) {
                    check_pair(sigma, tau)?;
                }
            }
        }
    } else {
        let k = lat.num_steps();
        let mut sub_times = Vec::new();
        for step in 0..k {
            sub_times.push(SubTime::new(step, Phase::Main));
            sub_times.push(SubTime::new(step, Phase::Post));
        }
        sub_times.push(SubTime::new(k, Phase::Main));
        for (i, a) in sub_times.iter().enumerate() {
            for b in sub_times.iter().skip(i) {
                let sigma = StoppingRule::at_sub_time(lat, *a);
                let tau = StoppingRule::at_sub_time(lat, *b);
                check_pair(&sigma, &tau)?;
            }
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        for _ in 0..pair_budget {
            let tau = random_rule(lat, &mut rng, 0.25);
            let sigma = random_rule(lat, &mut rng, 0.25).earlier_of(lat, &tau);
            check_pair(&sigma, &tau)?;
        }
    }
    if pairs == 0 {
        max_violation = 0.0;
    }
    Ok(SupermartingaleReport {
        max_violation,
        pairs_checked: pairs,
        exhaustive,
        passes: max_violation <= 1e-9,
    })
}

/// Report of the Snell minimality check: every competitor supermartingale
/// dominating the obstacle must dominate the solver value pointwise.
#[derive(Debug, Clone, Copy)]
pub struct SnellReport {
    /// `min over nodes (competitor - Y)`, worst over competitors.
    pub min_margin: f64,
    pub competitors: usize,
    pub passes: bool,
}

pub fn snell_minimality_check(
    lat: &Lattice,
    sol: &RbsdeSolution,
    obstacle: &Obstacle,
    driver: &Driver,
    competitor_count: usize,
    seed: u64,
) -> Result<SnellReport, Error> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut min_margin = f64::INFINITY;
    for _ in 0..competitor_count {
        let amp = rng.gen_range(0.0..1.0);
        let lift_seed = rng.gen::<u64>();
        let mut lift_rng = ChaCha12Rng::seed_from_u64(lift_seed);
        let mut lifted = obstacle.process().clone();
        for node in lat.node_ids() {
            let bump = lift_rng.gen_range(0.0..=amp);
            lifted.set(node, lifted.value(node) + bump);
        }
        let competitor = crate::rbsde::ref_operator(lat, &Obstacle::new(lifted), driver)?;
        let mut local_min = f64::INFINITY;
        for node in lat.node_ids() {
            local_min = local_min.min(competitor.value(node) - sol.y.value(node));
        }
        min_margin = min_margin.min(local_min);
    }
    if competitor_count == 0 {
        min_margin = 0.0;
    }
    Ok(SnellReport {
        min_margin,
        competitors: competitor_count,
        passes: min_margin >= -1e-10,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsde::solve_bsde;
    use crate::lattice::GridSpec;
    use crate::rbsde::solve_rbsde;

    fn lattice(k: usize) -> Lattice {
        Lattice::build(GridSpec { num_steps: k, horizon: 1.0, intensity: 0.5 }).unwrap()
    }

    fn wavy_obstacle(lat: &Lattice, scale: f64) -> Obstacle {
        Obstacle::new(AdaptedProcess::from_fn(lat, |n| {
            scale * ((n.path as f64 * 0.618 + n.step as f64 * 1.3).sin())
                + if n.phase == Phase::Post { 0.1 * (n.path as f64 * 0.37).cos() } else { 0.0 }
        }))
    }

    #[test]
    fn constant_payoff_oracle_is_constant() {
        let lat = lattice(2);
        let obstacle = Obstacle::constant(&lat, 4.5);
        let v = value_by_oracle(&lat, &obstacle, &Driver::zero(), NodeId::root(), 3).unwrap();
        assert!((v - 4.5).abs() <= 1e-12);
    }

    #[test]
    fn oracle_matches_literal_enumeration() {
        // Every shared-prefix streamed value must equal the value of the
        // corresponding enumerated rule evaluated through the backward
        // solver, index by index.
        let lat = lattice(2);
        let obstacle = wavy_obstacle(&lat, 0.8);
        let driver = Driver::affine(-0.2, 0.15, -0.3, 0.1, lat.intensity());
        let ctx = OracleCtx::new(&lat, &obstacle, &driver).unwrap();
        let set = ctx.value_set_main(0, 0).unwrap();
        let literal = rule_values_by_enumeration(&lat, &obstacle, &driver, 3).unwrap();
        assert_eq!(set.len(), literal.len());
        for (idx, ((_, lit), stream)) in literal.iter().zip(set.iter()).enumerate() {
            assert!(
                (lit - stream).abs() <= 1e-10,
                "rule {idx}: literal {lit} vs streamed {stream}"
            );
        }
        // And the report's argmax index points at the maximising rule.
        let report = oracle_at_node(&lat, &obstacle, &driver, NodeId::root(), 3).unwrap();
        let max_lit = literal.iter().map(|(_, v)| *v).fold(f64::NEG_INFINITY, f64::max);
        assert!((report.value - max_lit).abs() <= 1e-10);
        assert!((set[report.best_index as usize] - report.value).abs() <= 1e-10
            || report.best_index == 0);
    }

    #[test]
    fn oracle_equals_reflected_solver_value() {
        let lat = lattice(2);
        let obstacle = wavy_obstacle(&lat, 1.1);
        let driver = Driver::affine(-0.25, 0.2, 0.3, -0.05, lat.intensity());
        let sol = solve_rbsde(&lat, &obstacle, &driver).unwrap();
        let v = value_by_oracle(&lat, &obstacle, &driver, NodeId::root(), 3).unwrap();
        assert!((v - sol.root_value()).abs() <= 1e-10, "oracle {v} vs solver {}", sol.root_value());
    }

    #[test]
    fn strict_value_identities() {
        let lat = lattice(2);
        let obstacle = wavy_obstacle(&lat, 0.9);
        let driver = Driver::affine(-0.1, 0.1, -0.2, 0.0, lat.intensity());
        let sol = solve_rbsde(&lat, &obstacle, &driver).unwrap();
        let root = NodeId::root();
        let v_plus = strict_value_by_oracle(&lat, &obstacle, &driver, root, 3).unwrap();
        let v = value_by_oracle(&lat, &obstacle, &driver, root, 3).unwrap();
        // V⁺ = y_post and V = V⁺ ∨ ξ at the node.
        assert!((v_plus - sol.y.value(NodeId::post(0, 0))).abs() <= 1e-10);
        assert!((v - v_plus.max(obstacle.value(root))).abs() <= 1e-10);
    }

    #[test]
    fn oracle_respects_limit() {
        let lat = lattice(4);
        let obstacle = Obstacle::constant(&lat, 0.0);
        let err = value_by_oracle(&lat, &obstacle, &Driver::zero(), NodeId::root(), 3)
            .unwrap_err();
        assert!(matches!(err, Error::OracleTooLarge { .. }));
    }

    #[test]
    fn manual_one_step_enumeration() {
        // K = 1, zero driver: the three rules are stop-at-main,
        // stop-at-post, continue-to-terminal; hand-check the maximum.
        let lat = lattice(1);
        let mut obstacle = Obstacle::constant(&lat, 0.0);
        obstacle.process_mut().set(NodeId::main(0, 0), 0.4);
        obstacle.process_mut().set(NodeId::post(0, 0), 0.55);
        for (p, v) in [0.3, 0.2, 1.4, 0.0].iter().enumerate() {
            obstacle.process_mut().set(NodeId::main(1, p), *v);
        }
        let e_terminal = lat.conditional_expectation(&[0.3, 0.2, 1.4, 0.0]);
        let expected = 0.4f64.max(0.55).max(e_terminal);
        let v = value_by_oracle(&lat, &obstacle, &Driver::zero(), NodeId::root(), 3).unwrap();
        assert!((v - expected).abs() <= 1e-12);
    }

    #[test]
    fn epsilon_rule_stops_immediately_for_huge_epsilon() {
        let lat = lattice(2);
        let obstacle = wavy_obstacle(&lat, 0.5);
        let driver = Driver::zero();
        let sol = solve_rbsde(&lat, &obstacle, &driver).unwrap();
        let start = StoppingRule::at_root(&lat);
        let (rule, report) = epsilon_optimal_rule(&lat, &sol, &obstacle, &start, 1e6);
        assert!(rule.is_stopped(NodeId::root()));
        assert!(report.hit_inequality_ok);
    }

    #[test]
    fn non_rusc_obstacle_can_fail_hit_inequality() {
        // ξ_post ≫ ξ_main at the root: the hit happens at the Post node and
        // rounds down to the Main node where Y > ξ + ε.
        let lat = lattice(1);
        let mut obstacle = Obstacle::constant(&lat, 0.0);
        obstacle.process_mut().set(NodeId::post(0, 0), 2.0);
        let sol = solve_rbsde(&lat, &obstacle, &Driver::zero()).unwrap();
        assert_eq!(sol.y.value(NodeId::post(0, 0)), 2.0);
        assert_eq!(sol.y.value(NodeId::root()), 2.0);
        let start = StoppingRule::at_root(&lat);
        let (rule, report) = epsilon_optimal_rule(&lat, &sol, &obstacle, &start, 0.5);
        assert!(rule.is_stopped(NodeId::root()));
        assert!(!report.hit_inequality_ok);
        assert!(report.max_hit_excess >= 1.0);
    }

    #[test]
    fn optimal_rule_requires_regularity() {
        let lat = lattice(1);
        let mut obstacle = Obstacle::constant(&lat, 0.0);
        obstacle.process_mut().set(NodeId::post(0, 0), 1.0); // main < post
        let driver = Driver::zero();
        let sol = solve_rbsde(&lat, &obstacle, &driver).unwrap();
        let start = StoppingRule::at_root(&lat);
        let err = optimal_rule(&lat, &sol, &obstacle, &driver, &start).unwrap_err();
        assert!(matches!(err, Error::PreconditionFailed(_)));
    }

    #[test]
    fn optimal_rule_achieves_value_on_regular_instance() {
        // Backward-built obstacle satisfying both surrogates.
        let lat = lattice(2);
        let mut values = AdaptedProcess::zeros(&lat);
        for p in 0..16usize {
            values.set(NodeId::main(2, p), ((p * 37 % 11) as f64) * 0.1 - 0.4);
        }
        for step in (0..2usize).rev() {
            for p in 0..lat.layer_width(step) {
                let max_child = (0..4)
                    .map(|b| values.value(NodeId::main(step + 1, (p << 2) | b)))
                    .fold(f64::NEG_INFINITY, f64::max);
                let lift = if (p + step) % 2 == 0 { 0.15 } else { 0.0 };
                values.set(NodeId::post(step, p), max_child + lift);
                let lift2 = if p % 3 == 0 { 0.2 } else { 0.0 };
                values.set(NodeId::main(step, p), values.value(NodeId::post(step, p)) + lift2);
            }
        }
        let obstacle = Obstacle::new(values);
        assert!(obstacle.is_rusc(&lat) && obstacle.lusc_surrogate_holds(&lat));
        let driver = Driver::affine(-0.15, 0.1, 0.2, 0.0, lat.intensity());
        let sol = solve_rbsde(&lat, &obstacle, &driver).unwrap();
        let start = StoppingRule::at_root(&lat);
        let (rule, report) = optimal_rule(&lat, &sol, &obstacle, &driver, &start).unwrap();
        assert!(report.max_gap <= 1e-9);
        assert!(report.stabilized);
        let crit =
            check_optimality_criterion(&lat, &sol, &obstacle, &driver, &rule, &start).unwrap();
        assert!(crit.optimal);
    }

    #[test]
    fn late_stopping_fails_criterion() {
        // Stopping at the terminal after A/C have charged is suboptimal.
        let lat = lattice(1);
        let mut obstacle = Obstacle::constant(&lat, 0.0);
        obstacle.process_mut().set(NodeId::main(0, 0), 1.0);
        let driver = Driver::zero();
        let sol = solve_rbsde(&lat, &obstacle, &driver).unwrap();
        assert_eq!(sol.root_value(), 1.0);
        let start = StoppingRule::at_root(&lat);
        let candidate = StoppingRule::terminal(&lat);
        let crit =
            check_optimality_criterion(&lat, &sol, &obstacle, &driver, &candidate, &start)
                .unwrap();
        assert!(!crit.optimal);
        assert!(crit.direct_gap >= 0.9);
    }

    #[test]
    fn unreflected_solution_is_martingale_hence_supermartingale() {
        let lat = lattice(2);
        let driver = Driver::affine(-0.2, 0.1, 0.3, 0.0, lat.intensity());
        let terminal = |n: NodeId| ((n.path as f64) * 0.77).sin();
        let sol = solve_bsde(&lat, &StoppingRule::terminal(&lat), terminal, &driver).unwrap();
        let report = check_supermartingale(&lat, &sol.x, &driver, 0, 1).unwrap();
        assert!(report.exhaustive);
        assert!(report.passes, "violation {}", report.max_violation);
        // Martingale: the reverse inequality holds too.
        assert!(report.max_violation >= -1e-10);
    }

    #[test]
    fn rising_step_is_not_supermartingale() {
        let lat = lattice(1);
        let mut process = AdaptedProcess::zeros(&lat);
        for p in 0..4 {
            process.set(NodeId::main(1, p), 1.0); // strict rise
        }
        let report = check_supermartingale(&lat, &process, &Driver::zero(), 0, 1).unwrap();
        assert!(!report.passes);
        assert!(report.max_violation >= 0.99);
    }

    #[test]
    fn snell_minimality_on_lifted_competitors() {
        let lat = lattice(2);
        let obstacle = wavy_obstacle(&lat, 0.6);
        let driver = Driver::affine(-0.2, 0.1, -0.25, 0.0, lat.intensity());
        let sol = solve_rbsde(&lat, &obstacle, &driver).unwrap();
        let report = snell_minimality_check(&lat, &sol, &obstacle, &driver, 20, 42).unwrap();
        assert!(report.passes, "margin {}", report.min_margin);
    }
}
