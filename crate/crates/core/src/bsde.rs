//! Lipschitz drivers and the conditional `f`-expectation operator.
//!
//! A driver `f(t, y, z, κ)` generates a non-linear expectation: the value at
//! a Post node is the unique fixed point of the one-step implicit scheme
//!
//! ```text
//! y = E[next] + f(t_k, y, z, κ)·Δt
//! ```
//!
//! where `(z, κ, h)` is the orthogonal projection of the next-layer values.
//! The scheme is implicit in `y` and explicit in `(z, κ)`, so the fixed
//! point is scalar and contracts whenever `K_f·Δt < 1`.
//!
//! Backward evaluation along a stopping rule freezes values after the first
//! hit (the driver is switched off there), which realises the conditional
//! `f`-expectation `E^f_{σ,τ}` between arbitrary ordered rules.

use crate::error::Error;
use crate::expr::Expr;
use crate::lattice::{
    AdaptedProcess, Lattice, NodeId, NodeStatus, Region, StoppingRule,
};
use crate::parallel::map_layer;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::sync::Arc;

/// Absolute tolerance of the Picard fixed-point iteration.
pub const PICARD_TOL: f64 = 1e-12;
/// Iteration cap for the Picard fixed-point iteration.
pub const PICARD_MAX_ITER: usize = 200;

/// Per-step coefficients of the perfect-market linear driver
/// `f(t,y,z,κ) = -r·y - z·q1 - κ·q2`.
#[derive(Debug, Clone, Copy)]
pub struct LinearCoeffs {
    pub r: f64,
    pub q1: f64,
    pub q2: f64,
}

#[derive(Debug, Clone)]
enum DriverKind {
    Zero,
    /// `a·y + b·z + c·λ·κ + d`
    Affine { a: f64, b: f64, c: f64, d: f64, lambda: f64 },
    /// `a·y + bp·z⁺ - bm·z⁻ + λ·(cp·κ⁺ - cm·κ⁻) + d`
    PiecewiseLinear { a: f64, bp: f64, bm: f64, cp: f64, cm: f64, d: f64, lambda: f64 },
    /// Perfect-market driver, possibly with a per-step coefficient table.
    Linear { coeffs: Arc<Vec<LinearCoeffs>>, dt: f64 },
    /// Perfect-market driver plus a borrowing spread on
    /// `( z·s1 + κ·s2 - y )⁺` (total risky exposure above wealth).
    Borrow { coeffs: Arc<Vec<LinearCoeffs>>, s1: f64, s2: f64, spread: f64, dt: f64 },
    Custom { expr: Arc<Expr> },
}

/// A Lipschitz driver with declared metadata.
///
/// The Lipschitz constant is metadata, not inferred: it feeds the
/// contraction check `K_f·Δt < 1` and the ε-optimality constant. Catalog
/// constructors compute it from their parameters; custom drivers declare it.
#[derive(Debug, Clone)]
pub struct Driver {
    kind: DriverKind,
    /// Declared constant for `|Δf| ≤ K_f(|Δy| + |Δz| + √λ·|Δκ|)`.
    pub lipschitz: f64,
    /// Whether the driver claims the jump-monotonicity assumption.
    pub monotone_declared: bool,
    pub name: String,
}

impl Driver {
    pub fn zero() -> Driver {
        Driver {
            kind: DriverKind::Zero,
            lipschitz: 0.0,
            monotone_declared: true,
            name: "zero".into(),
        }
    }

    /// Discounting driver `f = -r·y`.
    pub fn linear(r: f64) -> Driver {
        Driver {
            kind: DriverKind::Affine { a: -r, b: 0.0, c: 0.0, d: 0.0, lambda: 1.0 },
            lipschitz: r.abs(),
            monotone_declared: true,
            name: format!("linear{{r={r}}}"),
        }
    }

    /// `f = a·y + b·z + c·λ·κ + d`. Monotone iff `c ≥ -1`.
    pub fn affine(a: f64, b: f64, c: f64, d: f64, lambda: f64) -> Driver {
        Driver {
            kind: DriverKind::Affine { a, b, c, d, lambda },
            lipschitz: a.abs().max(b.abs()).max(c.abs() * lambda.sqrt()),
            monotone_declared: c >= -1.0,
            name: format!("affine{{a={a},b={b},c={c},d={d}}}"),
        }
    }

    /// Kinked driver, Lipschitz with slopes `bp/bm` in `z` and `cp/cm`
    /// (ν-normalised) in `κ`. Monotone iff both κ-slopes are ≥ -1.
    pub fn piecewise(a: f64, bp: f64, bm: f64, cp: f64, cm: f64, d: f64, lambda: f64) -> Driver {
        let kz = bp.abs().max(bm.abs());
        let kk = cp.abs().max(cm.abs()) * lambda.sqrt();
        Driver {
            kind: DriverKind::PiecewiseLinear { a, bp, bm, cp, cm, d, lambda },
            lipschitz: a.abs().max(kz).max(kk),
            monotone_declared: cp >= -1.0 && cm >= -1.0,
            name: format!("piecewise{{a={a},bp={bp},bm={bm},cp={cp},cm={cm},d={d}}}"),
        }
    }

    /// Perfect-market driver from per-step coefficients (a single entry
    /// means constant coefficients). `dt` maps the time argument to a step.
    pub fn linear_market(coeffs: Vec<LinearCoeffs>, lambda: f64, dt: f64, name: String) -> Driver {
        assert!(!coeffs.is_empty());
        let lipschitz = coeffs
            .iter()
            .map(|c| c.r.abs().max(c.q1.abs()).max(c.q2.abs() / lambda.sqrt()))
            .fold(0.0f64, f64::max);
        Driver {
            kind: DriverKind::Linear { coeffs: Arc::new(coeffs), dt },
            lipschitz,
            monotone_declared: true,
            name,
        }
    }

    /// Perfect-market driver plus borrowing spread.
    pub fn borrow_market(
        coeffs: Vec<LinearCoeffs>,
        s1: f64,
        s2: f64,
        spread: f64,
        lambda: f64,
        dt: f64,
        name: String,
    ) -> Driver {
        assert!(!coeffs.is_empty());
        let base = coeffs
            .iter()
            .map(|c| c.r.abs().max(c.q1.abs()).max(c.q2.abs() / lambda.sqrt()))
            .fold(0.0f64, f64::max);
        let extra = spread * 1.0f64.max(s1.abs()).max(s2.abs() / lambda.sqrt());
        Driver {
            kind: DriverKind::Borrow { coeffs: Arc::new(coeffs), s1, s2, spread, dt },
            lipschitz: base + extra,
            monotone_declared: true,
            name,
        }
    }

    /// Custom driver from an expression over `(t, y, z, kappa)` with a
    /// user-declared Lipschitz constant.
    pub fn custom(source: &str, lipschitz: f64) -> Result<Driver, Error> {
        let expr = Expr::parse(source, &["t", "y", "z", "kappa"])?;
        Ok(Driver {
            kind: DriverKind::Custom { expr: Arc::new(expr) },
            lipschitz,
            monotone_declared: false,
            name: format!("custom{{{source}}}"),
        })
    }

    pub fn eval(&self, t: f64, y: f64, z: f64, kappa: f64) -> f64 {
        match &self.kind {
            DriverKind::Zero => 0.0,
            DriverKind::Affine { a, b, c, d, lambda } => {
                a * y + b * z + c * lambda * kappa + d
            }
            DriverKind::PiecewiseLinear { a, bp, bm, cp, cm, d, lambda } => {
                a * y
                    + bp * z.max(0.0)
                    + bm * z.min(0.0)
                    + lambda * (cp * kappa.max(0.0) + cm * kappa.min(0.0))
                    + d
            }
            DriverKind::Linear { coeffs, dt } => {
                let c = step_coeffs(coeffs, *dt, t);
                -c.r * y - z * c.q1 - kappa * c.q2
            }
            DriverKind::Borrow { coeffs, s1, s2, spread, dt } => {
                let c = step_coeffs(coeffs, *dt, t);
                -c.r * y - z * c.q1 - kappa * c.q2
                    + spread * (z * s1 + kappa * s2 - y).max(0.0)
            }
            DriverKind::Custom { expr } => expr.eval(&[t, y, z, kappa]),
        }
    }

    /// Affine coefficients `(a, bz, bk, d)` at time `t` such that
    /// `f(t,y,z,κ) = a·y + bz·z + bk·κ + d`, when the driver is affine. Used
    /// by hot loops to solve the implicit step in closed form.
    pub fn affine_at(&self, t: f64) -> Option<(f64, f64, f64, f64)> {
        match &self.kind {
            DriverKind::Zero => Some((0.0, 0.0, 0.0, 0.0)),
            DriverKind::Affine { a, b, c, d, lambda } => Some((*a, *b, c * lambda, *d)),
            DriverKind::Linear { coeffs, dt } => {
                let c = step_coeffs(coeffs, *dt, t);
                Some((-c.r, -c.q1, -c.q2, 0.0))
            }
            _ => None,
        }
    }
}

fn step_coeffs(coeffs: &[LinearCoeffs], dt: f64, t: f64) -> LinearCoeffs {
    if coeffs.len() == 1 {
        coeffs[0]
    } else {
        let idx = ((t / dt).round() as usize).min(coeffs.len() - 1);
        coeffs[idx]
    }
}

/// Output of the one-step implicit solve at a Post node.
#[derive(Debug, Clone, Copy)]
pub struct OneStep {
    pub y: f64,
    pub z: f64,
    pub kappa: f64,
    pub h: [f64; 4],
    /// Plain conditional expectation of the next-layer values.
    pub expected: f64,
}

fn check_contraction(lat: &Lattice, driver: &Driver) -> Result<(), Error> {
    if driver.lipschitz * lat.dt() >= 1.0 {
        return Err(Error::NoContraction { lipschitz: driver.lipschitz, dt: lat.dt() });
    }
    Ok(())
}

/// Picard iteration for `y = base + f(y)·Δt`-type maps, to [`PICARD_TOL`].
fn picard<F: Fn(f64) -> f64>(map: F, y0: f64) -> Result<f64, Error> {
    let mut y = y0;
    for _ in 0..PICARD_MAX_ITER {
        let next = map(y);
        if (next - y).abs() <= PICARD_TOL {
            return Ok(next);
        }
        y = next;
    }
    let residual = (map(y) - y).abs();
    Err(Error::NonConvergence { residual, iterations: PICARD_MAX_ITER })
}

/// One implicit backward step from the four next-layer values at a Post node
/// at grid time `t_k`, starting the Picard iteration from `E[next]`.
pub fn onestep_implicit(
    lat: &Lattice,
    t_k: f64,
    next: &[f64; 4],
    driver: &Driver,
) -> Result<OneStep, Error> {
    let e = lat.conditional_expectation(next);
    onestep_implicit_from(lat, t_k, next, driver, e)
}

/// Same as [`onestep_implicit`] with an explicit Picard starting guess
/// (exposed for the contraction-uniqueness property).
pub fn onestep_implicit_from(
    lat: &Lattice,
    t_k: f64,
    next: &[f64; 4],
    driver: &Driver,
    guess: f64,
) -> Result<OneStep, Error> {
    check_contraction(lat, driver)?;
    let e = lat.conditional_expectation(next);
    let proj = lat.project_increment(next);
    let dt = lat.dt();
    let y = picard(|y| e + driver.eval(t_k, y, proj.z, proj.kappa) * dt, guess)?;
    Ok(OneStep { y, z: proj.z, kappa: proj.kappa, h: proj.h, expected: e })
}

/// One reflected implicit step: the fixed point of
/// `y = max(floor, E[next] + f(t,y,z,κ)·Δt)` together with the increment
/// `ΔA = y - E[next] - f(t,y,z,κ)·Δt` it charges against the floor.
///
/// When the unreflected continuation already clears the floor, `ΔA` is zero
/// exactly; when the floor binds, `y` equals the floor exactly. Both
/// Skorokhod flat-off identities therefore hold by construction.
/// `guess_offset` displaces the Picard starting point (the fixed point is
/// unique under the contraction, so solutions for different offsets agree to
/// iteration tolerance).
pub(crate) fn onestep_reflected(
    lat: &Lattice,
    t_k: f64,
    next: &[f64; 4],
    driver: &Driver,
    floor: f64,
    guess_offset: f64,
) -> Result<(OneStep, f64), Error> {
    let e = lat.conditional_expectation(next);
    let unreflected = onestep_implicit_from(lat, t_k, next, driver, e + guess_offset)?;
    if unreflected.y >= floor {
        return Ok((unreflected, 0.0));
    }
    let dt = lat.dt();
    let da = floor
        - (unreflected.expected + driver.eval(t_k, floor, unreflected.z, unreflected.kappa) * dt);
    Ok((OneStep { y: floor, ..unreflected }, da.max(0.0)))
}

/// Solution of an unreflected BSDE along a stopping rule.
#[derive(Debug, Clone)]
pub struct BsdeSolution {
    /// Value process, frozen at (and after) the rule's first hit.
    pub x: AdaptedProcess,
    /// Brownian loadings per Post node (zero on frozen nodes).
    pub z: Vec<Vec<f64>>,
    /// Compensated-jump loadings per Post node.
    pub kappa: Vec<Vec<f64>>,
    /// Orthogonal residual per Post node and branch.
    pub h: Vec<Vec<[f64; 4]>>,
}

impl BsdeSolution {
    pub fn root_value(&self) -> f64 {
        self.x.value(NodeId::root())
    }
}

/// Backward solve of the BSDE with terminal values on the rule's first-hit
/// nodes: stopped nodes take the terminal value, unstopped Post nodes apply
/// the implicit step, unstopped Main nodes copy from their Post node, and
/// everything strictly after the first hit is frozen (driver switched off).
pub fn solve_bsde<F>(
    lat: &Lattice,
    rule: &StoppingRule,
    terminal: F,
    driver: &Driver,
) -> Result<BsdeSolution, Error>
where
    F: Fn(NodeId) -> f64 + Sync + Send,
{
    check_contraction(lat, driver)?;
    let k = lat.num_steps();
    let status = NodeStatus::compute(lat, rule);
    let mut x = AdaptedProcess::zeros(lat);
    let mut z: Vec<Vec<f64>> = (0..k).map(|s| vec![0.0; lat.layer_width(s)]).collect();
    let mut kappa = z.clone();
    let mut h: Vec<Vec<[f64; 4]>> =
        (0..k).map(|s| vec![[0.0; 4]; lat.layer_width(s)]).collect();

    // Forward pass: values at first-hit nodes and frozen values after them.
    for step in 0..=k {
        for path in 0..lat.layer_width(step) {
            let m = NodeId::main(step, path);
            match status.of(m) {
                Region::AtHit => x.set(m, terminal(m)),
                Region::After => {
                    let parent = NodeId::post(step - 1, path >> 2);
                    x.set(m, x.value(parent));
                }
                Region::Before => {}
            }
            if step < k {
                let p = NodeId::post(step, path);
                match status.of(p) {
                    Region::AtHit => x.set(p, terminal(p)),
                    Region::After => x.set(p, x.value(m)),
                    Region::Before => {}
                }
            }
        }
    }

    // Backward pass over the region strictly before the hit.
    for step in (0..k).rev() {
        let t_k = lat.time(step);
        let width = lat.layer_width(step);
        let next_main = x.main_layer(step + 1).to_vec();
        let results: Vec<Option<Result<OneStep, Error>>> = map_layer(width, |path| {
            let p = NodeId::post(step, path);
            if status.of(p) != Region::Before {
                return None;
            }
            let next: [f64; 4] = std::array::from_fn(|b| next_main[(path << 2) | b]);
            Some(onestep_implicit(lat, t_k, &next, driver))
        });
        for (path, result) in results.into_iter().enumerate() {
            if let Some(result) = result {
                let step_out = result?;
                x.set(NodeId::post(step, path), step_out.y);
                z[step][path] = step_out.z;
                kappa[step][path] = step_out.kappa;
                h[step][path] = step_out.h;
            }
        }
        for path in 0..width {
            let m = NodeId::main(step, path);
            if status.of(m) == Region::Before {
                x.set(m, x.value(NodeId::post(step, path)));
            }
        }
    }

    Ok(BsdeSolution { x, z, kappa, h })
}

/// Values of a process read at a stopping rule's first-hit nodes.
#[derive(Debug, Clone)]
pub struct RuleValues {
    pub entries: Vec<(NodeId, f64)>,
}

impl RuleValues {
    pub fn get(&self, node: NodeId) -> Option<f64> {
        self.entries.iter().find(|(n, _)| *n == node).map(|(_, v)| *v)
    }

    /// Value at the root when the underlying rule stops there.
    pub fn root(&self) -> Option<f64> {
        self.get(NodeId::root())
    }
}

/// Reads a process at a rule's first-hit nodes, in canonical node order.
pub fn values_at_first_hits(
    lat: &Lattice,
    rule: &StoppingRule,
    process: &AdaptedProcess,
) -> RuleValues {
    let entries = rule
        .first_hit_nodes(lat)
        .into_iter()
        .map(|n| (n, process.value(n)))
        .collect();
    RuleValues { entries }
}

/// The conditional `f`-expectation `E^f_{σ,τ}(ζ)`: solves the BSDE from
/// `τ`'s first-hit nodes (where `ζ` lives) back to `σ`'s first-hit nodes.
/// Requires `σ ≤ τ` pathwise.
pub fn ef_conditional_expectation<F>(
    lat: &Lattice,
    sigma: &StoppingRule,
    tau: &StoppingRule,
    zeta: F,
    driver: &Driver,
) -> Result<RuleValues, Error>
where
    F: Fn(NodeId) -> f64 + Sync + Send,
{
    if !sigma.precedes(lat, tau) {
        return Err(Error::BadOrdering(
            "sigma must stop at or before tau on every path".into(),
        ));
    }
    let sol = solve_bsde(lat, tau, zeta, driver)?;
    Ok(values_at_first_hits(lat, sigma, &sol.x))
}

/// Report of the sampled jump-monotonicity check (the scalar-mark form of
/// the assumption `θ ≥ -1`).
#[derive(Debug, Clone, Copy)]
pub struct MonotonicityReport {
    /// Smallest sampled slope `(f(κ₁) - f(κ₂)) / (λ(κ₁ - κ₂))`.
    pub min_slope: f64,
    pub passes: bool,
    /// The `(t, y, z, κ₁, κ₂)` sample attaining the minimum slope.
    pub worst_sample: (f64, f64, f64, f64, f64),
}

/// Samples difference quotients of the driver in its jump argument and
/// reports the minimum slope; passes iff `min_slope ≥ -1 - 1e-12`.
pub fn check_monotonicity(
    driver: &Driver,
    lambda: f64,
    horizon: f64,
    sample_count: usize,
    seed: u64,
) -> MonotonicityReport {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut min_slope = f64::INFINITY;
    let mut worst = (0.0, 0.0, 0.0, 0.0, 0.0);
    for _ in 0..sample_count {
        let t: f64 = rng.gen_range(0.0..=horizon);
        let y: f64 = rng.gen_range(-2.0..2.0);
        let z: f64 = rng.gen_range(-2.0..2.0);
        let k1: f64 = rng.gen_range(-2.0..2.0);
        let mut k2: f64 = rng.gen_range(-2.0..2.0);
        if (k1 - k2).abs() < 1e-9 {
            k2 += 0.5;
        }
        let slope =
            (driver.eval(t, y, z, k1) - driver.eval(t, y, z, k2)) / (lambda * (k1 - k2));
        if slope < min_slope {
            min_slope = slope;
            worst = (t, y, z, k1, k2);
        }
    }
    if sample_count == 0 {
        min_slope = 0.0;
    }
    MonotonicityReport { min_slope, passes: min_slope >= -1.0 - 1e-12, worst_sample: worst }
}
