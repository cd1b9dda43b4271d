//! Reflected BSDE solver on the doubled grid.
//!
//! The backward recursion per step `k` (from `Y` at layer `k+1`):
//!
//! 1. random edge: `y_post` is the fixed point of
//!    `y = max(ξ_post, E[Y_next] + f(t_k, y, z, κ)·Δt)`; the predictable
//!    increment `ΔA_{k+1} = y_post - E[Y_next] - f(t_k, y_post, z, κ)·Δt`
//!    charges on the edge and is zero exactly unless the floor binds;
//! 2. deterministic edge: `y_main = max(ξ_main, y_post)` and the right-jump
//!    increment `ΔC_k = y_main - y_post` charges on the Main→Post edge.
//!
//! Both Skorokhod flat-off identities and the dynamics reconstruction hold
//! by construction, to floating-point precision. `A` is predictable (its
//! increment over `(t_k, t_{k+1}]` is a function of the time-`k` node) and
//! `C` carries exactly the right jumps `Y_k - Y_{k+}`.

use crate::bsde::{onestep_reflected, Driver};
use crate::error::Error;
use crate::lattice::{AdaptedProcess, Lattice, NodeId, Phase, Region, StoppingRule};
use crate::parallel::map_layer;

/// A ladlag payoff process: a `main` value at each grid time and a `post`
/// value just after it, with no regularity relation required between them.
#[derive(Debug, Clone, PartialEq)]
pub struct Obstacle {
    values: AdaptedProcess,
}

/// Read-only view of an obstacle, so large-grid sweeps can generate values
/// on the fly instead of materialising them.
pub trait ObstacleView: Sync {
    fn main(&self, step: usize, path: usize) -> f64;
    fn post(&self, step: usize, path: usize) -> f64;
}

impl Obstacle {
    pub fn new(values: AdaptedProcess) -> Obstacle {
        Obstacle { values }
    }

    pub fn from_view<V: ObstacleView>(lat: &Lattice, view: &V) -> Obstacle {
        Obstacle {
            values: AdaptedProcess::from_fn(lat, |n| match n.phase {
                Phase::Main => view.main(n.step, n.path),
                Phase::Post => view.post(n.step, n.path),
            }),
        }
    }

    pub fn constant(lat: &Lattice, c: f64) -> Obstacle {
        Obstacle { values: AdaptedProcess::from_fn(lat, |_| c) }
    }

    pub fn process(&self) -> &AdaptedProcess {
        &self.values
    }

    pub fn process_mut(&mut self) -> &mut AdaptedProcess {
        &mut self.values
    }

    pub fn value(&self, node: NodeId) -> f64 {
        self.values.value(node)
    }

    pub fn terminal(&self, path: usize) -> f64 {
        let k = self.values.num_steps();
        self.values.main_layer(k)[path]
    }

    /// Derived r.u.s.c. flag: `main ≥ post` at every step with a post phase.
    pub fn is_rusc(&self, lat: &Lattice) -> bool {
        (0..lat.num_steps()).all(|step| {
            self.values
                .main_layer(step)
                .iter()
                .zip(self.values.post_layer(step).iter())
                .all(|(m, p)| m >= p)
        })
    }

    /// Discrete l.u.s.c. surrogate: no upward left jump on any random edge,
    /// `ξ_post(k) ≥ ξ_main(k+1)` pathwise.
    pub fn lusc_surrogate_holds(&self, lat: &Lattice) -> bool {
        (0..lat.num_steps()).all(|step| {
            let post = self.values.post_layer(step);
            let next = self.values.main_layer(step + 1);
            (0..lat.layer_width(step))
                .all(|p| (0..4).all(|b| post[p] >= next[(p << 2) | b]))
        })
    }
}

impl ObstacleView for Obstacle {
    fn main(&self, step: usize, path: usize) -> f64 {
        self.values.main_layer(step)[path]
    }

    fn post(&self, step: usize, path: usize) -> f64 {
        self.values.post_layer(step)[path]
    }
}

/// The sextuple `(Y, Z, k, h, A, C)` as node-indexed processes and
/// edge-indexed increments.
#[derive(Debug, Clone)]
pub struct RbsdeSolution {
    /// Value process on both phases.
    pub y: AdaptedProcess,
    /// Brownian loading per Post node.
    pub z: Vec<Vec<f64>>,
    /// Compensated-jump loading per Post node.
    pub kappa: Vec<Vec<f64>>,
    /// Orthogonal residual per Post node and branch.
    pub h: Vec<Vec<[f64; 4]>>,
    /// `ΔA_{k+1}` per Post node (predictable: determined at time `k`).
    pub a_inc: Vec<Vec<f64>>,
    /// `ΔC_k` per Main node with `k < K` (the right jump `Y_k - Y_{k+}`).
    pub c_inc: Vec<Vec<f64>>,
}

impl RbsdeSolution {
    pub fn root_value(&self) -> f64 {
        self.y.value(NodeId::root())
    }

    /// Expected total mass `E[A_T]`.
    pub fn a_mass(&self, lat: &Lattice) -> f64 {
        let mut total = 0.0;
        for (step, layer) in self.a_inc.iter().enumerate() {
            for (path, da) in layer.iter().enumerate() {
                total += lat.path_probability(step, path) * da;
            }
        }
        total
    }

    /// Expected total mass `E[C_{T-}]`.
    pub fn c_mass(&self, lat: &Lattice) -> f64 {
        let mut total = 0.0;
        for (step, layer) in self.c_inc.iter().enumerate() {
            for (path, dc) in layer.iter().enumerate() {
                total += lat.path_probability(step, path) * dc;
            }
        }
        total
    }

    /// Whether any orthogonal residual is non-zero beyond `tol`.
    pub fn h_is_nonzero(&self, tol: f64) -> bool {
        self.h
            .iter()
            .flatten()
            .any(|hs| hs.iter().any(|v| v.abs() > tol))
    }

    /// Largest `Σ_edges |Δh|` along any single path, forward-accumulated.
    pub fn worst_path_h_mass(&self, lat: &Lattice) -> f64 {
        let k = lat.num_steps();
        let mut acc = vec![0.0f64; 1];
        for step in 0..k {
            let width = lat.layer_width(step);
            let mut next = vec![0.0f64; width * 4];
            for p in 0..width {
                for b in 0..4 {
                    next[(p << 2) | b] = acc[p] + self.h[step][p][b].abs();
                }
            }
            acc = next;
        }
        acc.into_iter().fold(0.0, f64::max)
    }
}

/// Backward solve of the reflected BSDE. Requires `K_f·Δt < 1`.
pub fn solve_rbsde(lat: &Lattice, obstacle: &Obstacle, driver: &Driver) -> Result<RbsdeSolution, Error> {
    solve_rbsde_seeded(lat, obstacle, driver, 0.0)
}

/// [`solve_rbsde`] with a displaced Picard starting guess at every node.
/// The contraction makes the fixed points unique, so solutions for any two
/// offsets agree to iteration tolerance; exposed for the uniqueness check.
pub fn solve_rbsde_seeded(
    lat: &Lattice,
    obstacle: &Obstacle,
    driver: &Driver,
    guess_offset: f64,
) -> Result<RbsdeSolution, Error> {
    let k = lat.num_steps();
    let mut y = AdaptedProcess::zeros(lat);
    let mut z: Vec<Vec<f64>> = (0..k).map(|s| vec![0.0; lat.layer_width(s)]).collect();
    let mut kappa = z.clone();
    let mut h: Vec<Vec<[f64; 4]>> =
        (0..k).map(|s| vec![[0.0; 4]; lat.layer_width(s)]).collect();
    let mut a_inc = z.clone();
    let mut c_inc = z.clone();

    *y.main_layer_mut(k) = obstacle.process().main_layer(k).to_vec();

    for step in (0..k).rev() {
        let t_k = lat.time(step);
        let width = lat.layer_width(step);
        let next_main = y.main_layer(step + 1).to_vec();
        let xi_post = obstacle.process().post_layer(step);
        let xi_main = obstacle.process().main_layer(step);

        struct PostOut {
            y_post: f64,
            z: f64,
            kappa: f64,
            h: [f64; 4],
            da: f64,
            y_main: f64,
            dc: f64,
        }
        let results: Vec<Result<PostOut, Error>> = map_layer(width, |path| {
            let next: [f64; 4] = std::array::from_fn(|b| next_main[(path << 2) | b]);
            let (step_out, da) =
                onestep_reflected(lat, t_k, &next, driver, xi_post[path], guess_offset)?;
            let y_main = xi_main[path].max(step_out.y);
            let dc = y_main - step_out.y;
            Ok(PostOut {
                y_post: step_out.y,
                z: step_out.z,
                kappa: step_out.kappa,
                h: step_out.h,
                da,
                y_main,
                dc,
            })
        });
        let post_layer = y.post_layer_mut(step);
        let mut main_vals = vec![0.0; width];
        for (path, r) in results.into_iter().enumerate() {
            let out = r?;
            post_layer[path] = out.y_post;
            z[step][path] = out.z;
            kappa[step][path] = out.kappa;
            h[step][path] = out.h;
            a_inc[step][path] = out.da;
            main_vals[path] = out.y_main;
            c_inc[step][path] = out.dc;
        }
        *y.main_layer_mut(step) = main_vals;
    }

    Ok(RbsdeSolution { y, z, kappa, h, a_inc, c_inc })
}

/// Skorokhod (minimality) report: largest flat-off products for `A` and `C`.
/// `A^c ≡ 0` on a grid, so its minimality condition is trivially exercised.
#[derive(Debug, Clone, Copy)]
pub struct SkorokhodReport {
    /// `max |(y_post - ξ_post)·ΔA|` over Post nodes.
    pub max_a_violation: f64,
    /// `max |(y_main - ξ_main)·ΔC|` over Main nodes.
    pub max_c_violation: f64,
    pub ac_trivial: bool,
}

pub fn verify_skorokhod(lat: &Lattice, sol: &RbsdeSolution, obstacle: &Obstacle) -> SkorokhodReport {
    let mut max_a = 0.0f64;
    let mut max_c = 0.0f64;
    for step in 0..lat.num_steps() {
        let y_post = sol.y.post_layer(step);
        let y_main = sol.y.main_layer(step);
        let xi_post = obstacle.process().post_layer(step);
        let xi_main = obstacle.process().main_layer(step);
        for path in 0..lat.layer_width(step) {
            max_a = max_a.max(((y_post[path] - xi_post[path]) * sol.a_inc[step][path]).abs());
            max_c = max_c.max(((y_main[path] - xi_main[path]) * sol.c_inc[step][path]).abs());
        }
    }
    SkorokhodReport { max_a_violation: max_a, max_c_violation: max_c, ac_trivial: true }
}

/// Largest dynamics residual over all edges:
/// random edge `|y_post - (Y_next + f(t_k, y_post, z, κ)Δt + ΔA - z·dW - κ·dÑ - Δh)|`,
/// deterministic edge `|y_main - y_post - ΔC|`.
pub fn reconstruct(
    lat: &Lattice,
    sol: &RbsdeSolution,
    _obstacle: &Obstacle,
    driver: &Driver,
) -> f64 {
    let mut worst = 0.0f64;
    let dt = lat.dt();
    for step in 0..lat.num_steps() {
        let t_k = lat.time(step);
        let y_post = sol.y.post_layer(step);
        let y_main = sol.y.main_layer(step);
        let next_main = sol.y.main_layer(step + 1);
        for path in 0..lat.layer_width(step) {
            let zv = sol.z[step][path];
            let kv = sol.kappa[step][path];
            let drift = driver.eval(t_k, y_post[path], zv, kv) * dt + sol.a_inc[step][path];
            for (b, branch) in lat.branches().iter().enumerate() {
                let rhs = next_main[(path << 2) | b] + drift
                    - zv * branch.dw
                    - kv * branch.dn_tilde
                    - sol.h[step][path][b];
                worst = worst.max((y_post[path] - rhs).abs());
            }
            worst = worst.max((y_main[path] - y_post[path] - sol.c_inc[step][path]).abs());
        }
    }
    worst
}

/// The reflection operator: first component of the reflected solution.
/// Output is r.u.s.c. by construction (`main ≥ post` pointwise).
pub fn ref_operator(lat: &Lattice, obstacle: &Obstacle, driver: &Driver) -> Result<AdaptedProcess, Error> {
    Ok(solve_rbsde(lat, obstacle, driver)?.y)
}

/// Result of decomposing a strong supermartingale.
#[derive(Debug)]
pub struct MertensDecomposition {
    pub solution: RbsdeSolution,
    /// Largest deviation between the decomposed process and the input
    /// (should sit at the supermartingale-check tolerance).
    pub max_value_gap: f64,
}

/// Decomposes a strong `E^f`-supermartingale into
/// `(Z, k, h, A, C)` by reflecting it on itself. The caller's process must
/// pass the supermartingale check at `1e-9`; `supermartingale_violation` is
/// the precomputed violation from that check.
pub fn mertens_decompose(
    lat: &Lattice,
    process: &AdaptedProcess,
    driver: &Driver,
    supermartingale_violation: f64,
) -> Result<MertensDecomposition, Error> {
    const TOL: f64 = 1e-9;
    if !(supermartingale_violation <= TOL) {
        return Err(Error::NotSupermartingale {
            violation: supermartingale_violation,
            tolerance: TOL,
        });
    }
    let obstacle = Obstacle::new(process.clone());
    let solution = solve_rbsde(lat, &obstacle, driver)?;
    let max_value_gap = solution
        .y
        .max_excess_over(process)
        .max(process.max_excess_over(&solution.y));
    Ok(MertensDecomposition { solution, max_value_gap })
}

/// Report of the two-sided a-priori estimate at the root.
#[derive(Debug, Clone, Copy)]
pub struct AprioriReport {
    /// `(Y¹₀ - Y²₀)²`.
    pub lhs: f64,
    /// `e^{βT}·E[pathmax ξ̄²] + η·E[Σ e^{βt_k} (δf)² Δt]`.
    pub rhs: f64,
    pub sup_term: f64,
    pub integral_term: f64,
    /// `max(lhs/rhs, 1)`.
    pub slack_needed: f64,
    /// Unclamped `lhs/rhs`.
    pub raw_ratio: f64,
    /// Smallest empirical constant `c` closing the same-obstacle norm bound
    /// (only meaningful when the two obstacles coincide).
    pub empirical_c: Option<f64>,
}

fn validate_beta_eta(beta: f64, eta: f64, lipschitz: f64) -> Result<(), Error> {
    if !(eta > 0.0) || !(beta > 0.0) {
        return Err(Error::BadConstants(format!("beta={beta}, eta={eta} must be positive")));
    }
    if lipschitz > 0.0 && eta > 1.0 / (lipschitz * lipschitz) + 1e-12 {
        return Err(Error::BadConstants(format!(
            "eta={eta} exceeds 1/K^2 = {}",
            1.0 / (lipschitz * lipschitz)
        )));
    }
    let need = 3.0 / eta + 2.0 * lipschitz;
    if beta + 1e-12 < need {
        return Err(Error::BadConstants(format!(
            "beta={beta} below 3/eta + 2K = {need}"
        )));
    }
    Ok(())
}

/// Evaluates both sides of the root a-priori estimate for two materialised
/// solutions. The essential supremum over stopping rules equals the pathwise
/// maximum over sub-times (deterministic sub-time rules already realise
/// every node of a path), so the sup term is computed by a forward
/// running-maximum sweep.
#[allow(clippy::too_many_arguments)]
pub fn a_priori_estimates(
    lat: &Lattice,
    sol1: &RbsdeSolution,
    obst1: &Obstacle,
    driver1: &Driver,
    sol2: &RbsdeSolution,
    obst2: &Obstacle,
    driver2: &Driver,
    beta: f64,
    eta: f64,
) -> Result<AprioriReport, Error> {
    let lipschitz = driver1.lipschitz.max(driver2.lipschitz);
    validate_beta_eta(beta, eta, lipschitz)?;
    let k = lat.num_steps();
    let dt = lat.dt();

    // Forward running max of ξ̄² over all sub-times, then E at the terminal.
    let mut running = vec![0.0f64; 1];
    let mut same_obstacle = true;
    let mut y_running = vec![0.0f64; 1];
    for step in 0..=k {
        let width = lat.layer_width(step);
        let mut stepped = vec![0.0f64; width];
        let mut y_stepped = vec![0.0f64; width];
        let ebt = (beta * lat.time(step)).exp();
        for p in 0..width {
            let parent = if step == 0 { 0.0 } else { running[p >> 2] };
            let y_parent = if step == 0 { 0.0 } else { y_running[p >> 2] };
            let dm = obst1.main(step, p) - obst2.main(step, p);
            if dm != 0.0 {
                same_obstacle = false;
            }
            let mut m = parent.max(dm * dm);
            let dy_main = sol1.y.main_layer(step)[p] - sol2.y.main_layer(step)[p];
            let mut ym = y_parent.max(ebt * dy_main * dy_main);
            if step < k {
                let dp = obst1.post(step, p) - obst2.post(step, p);
                if dp != 0.0 {
                    same_obstacle = false;
                }
                m = m.max(dp * dp);
                let dy_post = sol1.y.post_layer(step)[p] - sol2.y.post_layer(step)[p];
                ym = ym.max(ebt * dy_post * dy_post);
            }
            stepped[p] = m;
            y_stepped[p] = ym;
        }
        running = stepped;
        y_running = y_stepped;
    }
    let mut sup_term = 0.0;
    let mut y_norm = 0.0;
    for (p, (m, ym)) in running.iter().zip(y_running.iter()).enumerate() {
        let prob = lat.path_probability(k, p);
        sup_term += prob * m;
        y_norm += prob * ym;
    }

    // E[Σ e^{βt_k} (δf)² Δt] with δf = (f' - f) at the second solution.
    let mut integral_term = 0.0;
    for step in 0..k {
        let t_k = lat.time(step);
        let ebt = (beta * t_k).exp();
        let y_post = sol2.y.post_layer(step);
        for p in 0..lat.layer_width(step) {
            let z2 = sol2.z[step][p];
            let k2 = sol2.kappa[step][p];
            let df = driver2.eval(t_k, y_post[p], z2, k2) - driver1.eval(t_k, y_post[p], z2, k2);
            integral_term += lat.path_probability(step, p) * ebt * df * df * dt;
        }
    }

    let dy0 = sol1.root_value() - sol2.root_value();
    let lhs = dy0 * dy0;
    let rhs = (beta * lat.horizon()).exp() * sup_term + eta * integral_term;
    let raw_ratio = if rhs > 0.0 { lhs / rhs } else if lhs == 0.0 { 0.0 } else { f64::INFINITY };
    let empirical_c = if same_obstacle && integral_term > 0.0 {
        // Norm bound with ε² = 1/β: ||Ỹ||² ≤ 4ε²(1+12c²)||f̃||².
        let ratio = y_norm * beta / (4.0 * integral_term);
        Some(((ratio - 1.0).max(0.0) / 12.0).sqrt())
    } else {
        None
    };
    Ok(AprioriReport {
        lhs,
        rhs,
        sup_term,
        integral_term,
        slack_needed: raw_ratio.max(1.0),
        raw_ratio,
        empirical_c,
    })
}

/// Streaming variant of [`a_priori_estimates`] for grids too large to
/// materialise: solves both reflected equations layer-by-layer, keeping two
/// rolling value buffers, and accumulates both sides on the fly.
/// `empirical_c` is not computed in this mode.
pub fn a_priori_estimates_streaming(
    lat: &Lattice,
    obst1: &dyn ObstacleView,
    driver1: &Driver,
    obst2: &dyn ObstacleView,
    driver2: &Driver,
    beta: f64,
    eta: f64,
) -> Result<AprioriReport, Error> {
    let lipschitz = driver1.lipschitz.max(driver2.lipschitz);
    validate_beta_eta(beta, eta, lipschitz)?;
    let k = lat.num_steps();
    let dt = lat.dt();

    let mut cur1: Vec<f64> =
        map_layer(lat.layer_width(k), |p| obst1.main(k, p));
    let mut cur2: Vec<f64> =
        map_layer(lat.layer_width(k), |p| obst2.main(k, p));

    let mut integral_term = 0.0;
    for step in (0..k).rev() {
        let t_k = lat.time(step);
        let ebt = (beta * t_k).exp();
        let width = lat.layer_width(step);
        let rows: Vec<Result<(f64, f64, f64), Error>> = map_layer(width, |p| {
            let next1: [f64; 4] = std::array::from_fn(|b| cur1[(p << 2) | b]);
            let next2: [f64; 4] = std::array::from_fn(|b| cur2[(p << 2) | b]);
            let (s1, _) =
                onestep_reflected(lat, t_k, &next1, driver1, obst1.post(step, p), 0.0)?;
            let (s2, _) =
                onestep_reflected(lat, t_k, &next2, driver2, obst2.post(step, p), 0.0)?;
            let y1_main = obst1.main(step, p).max(s1.y);
            let y2_main = obst2.main(step, p).max(s2.y);
            let df = driver2.eval(t_k, s2.y, s2.z, s2.kappa)
                - driver1.eval(t_k, s2.y, s2.z, s2.kappa);
            Ok((y1_main, y2_main, df * df))
        });
        let mut new1 = vec![0.0; width];
        let mut new2 = vec![0.0; width];
        for (p, row) in rows.into_iter().enumerate() {
            let (y1, y2, df2) = row?;
            new1[p] = y1;
            new2[p] = y2;
            integral_term += lat.path_probability(step, p) * ebt * df2 * dt;
        }
        cur1 = new1;
        cur2 = new2;
    }
    let dy0 = cur1[0] - cur2[0];
    let lhs = dy0 * dy0;
    drop(cur1);
    drop(cur2);

    // Forward running-max pass for the sup term.
    let mut running = vec![0.0f64; 1];
    for step in 0..=k {
        let width = lat.layer_width(step);
        let stepped: Vec<f64> = map_layer(width, |p| {
            let parent = if step == 0 { 0.0 } else { running[p >> 2] };
            let dm = obst1.main(step, p) - obst2.main(step, p);
            let mut m = parent.max(dm * dm);
            if step < k {
                let dp = obst1.post(step, p) - obst2.post(step, p);
                m = m.max(dp * dp);
            }
            m
        });
        running = stepped;
    }
    let mut sup_term = 0.0;
    for (p, m) in running.iter().enumerate() {
        sup_term += lat.path_probability(k, p) * m;
    }

    let rhs = (beta * lat.horizon()).exp() * sup_term + eta * integral_term;
    let raw_ratio = if rhs > 0.0 { lhs / rhs } else if lhs == 0.0 { 0.0 } else { f64::INFINITY };
    Ok(AprioriReport {
        lhs,
        rhs,
        sup_term,
        integral_term,
        slack_needed: raw_ratio.max(1.0),
        raw_ratio,
        empirical_c: None,
    })
}

/// Report of the `E^f`-martingale property of `Y` on `[start, τ^ε]`.
#[derive(Debug)]
pub struct SegmentReport {
    pub rule: StoppingRule,
    /// Largest `ΔA` charged strictly inside the segment (exact zero expected).
    pub max_da_in_segment: f64,
    /// Largest `ΔC` charged strictly inside the segment (exact zero expected).
    pub max_dc_in_segment: f64,
    /// Largest `|E^f_{start,τ^ε}(Y_{τ^ε}) - Y_start|` over start hit nodes.
    pub max_ef_gap: f64,
}

/// Builds `τ^ε = inf{t ≥ start: Y ≤ ξ + ε}` as a raw sub-time first hit and
/// verifies that `A` and `C` are flat strictly before it and that `Y` is an
/// `E^f`-martingale on the segment.
pub fn ef_martingale_segment_check(
    lat: &Lattice,
    sol: &RbsdeSolution,
    obstacle: &Obstacle,
    driver: &Driver,
    start: &StoppingRule,
    epsilon: f64,
) -> Result<SegmentReport, Error> {
    let start_status = crate::lattice::NodeStatus::compute(lat, start);
    let mut rule = StoppingRule::terminal(lat);
    let k = lat.num_steps();
    for step in 0..k {
        for path in 0..lat.layer_width(step) {
            for node in [NodeId::main(step, path), NodeId::post(step, path)] {
                let eligible = start_status.of(node) != Region::Before;
                if eligible && sol.y.value(node) <= obstacle.value(node) + epsilon {
                    rule.set_stopped(node, true);
                }
            }
        }
    }
    let rule = rule.canonicalize(lat);

    let tau_status = crate::lattice::NodeStatus::compute(lat, &rule);
    let mut max_da = 0.0f64;
    let mut max_dc = 0.0f64;
    for step in 0..k {
        for path in 0..lat.layer_width(step) {
            let main = NodeId::main(step, path);
            let post = NodeId::post(step, path);
            let in_segment = |n: NodeId| {
                start_status.of(n) != Region::Before && tau_status.of(n) == Region::Before
            };
            if in_segment(main) {
                max_dc = max_dc.max(sol.c_inc[step][path]);
            }
            if in_segment(post) {
                max_da = max_da.max(sol.a_inc[step][path]);
            }
        }
    }

    let values = crate::bsde::ef_conditional_expectation(
        lat,
        start,
        &rule,
        |n| sol.y.value(n),
        driver,
    )?;
    let mut max_gap = 0.0f64;
    for (node, v) in values.entries {
        max_gap = max_gap.max((v - sol.y.value(node)).abs());
    }
    Ok(SegmentReport { rule, max_da_in_segment: max_da, max_dc_in_segment: max_dc, max_ef_gap: max_gap })
}
