//! Seeded random instances for the verification suites.
//!
//! Driver parameters are drawn from ranges chosen so that the discrete
//! one-step operator is monotone with a fat margin (the continuous-time
//! theory allows the jump-monotonicity slope to sit at the boundary `-1`,
//! but at finite `Δt` a boundary slope combined with `z`-dependence can tip
//! a branch weight negative). The ranges used here are:
//!
//! * `|∂f/∂y|, |∂f/∂z| ≤ 0.3`,
//! * jump slope (ν-normalised) in `[-0.5, 0.5]`,
//! * `λΔt ∈ [0.15, 0.6]`.
//!
//! With these, every branch weight of the one-step operator stays positive
//! for `Δt ≤ 1`, which is what makes comparison, oracle equivalence, and
//! monotonicity of `E^f` hold exactly (to solver precision) on the lattice.

use crate::bsde::Driver;
use crate::lattice::{AdaptedProcess, GridSpec, Lattice, NodeId, Phase};
use crate::rbsde::{Obstacle, ObstacleView};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// Deterministic instance generator over a seeded stream.
pub struct InstanceGenerator {
    rng: ChaCha12Rng,
}

impl InstanceGenerator {
    pub fn new(seed: u64) -> InstanceGenerator {
        InstanceGenerator { rng: ChaCha12Rng::seed_from_u64(seed) }
    }

    pub fn rng(&mut self) -> &mut ChaCha12Rng {
        &mut self.rng
    }

    /// Grid with `K` steps over a unit horizon and `λΔt` in the safe band.
    pub fn grid(&mut self, num_steps: usize) -> GridSpec {
        let dt = 1.0 / num_steps as f64;
        let lambda_dt = self.rng.gen_range(0.15..0.6);
        GridSpec { num_steps, horizon: 1.0, intensity: lambda_dt / dt }
    }

    /// Driver from the catalog in the safe ranges. `affine_only` restricts
    /// to closed-form one-step families (used where the oracle exhausts
    /// tens of millions of rules).
    pub fn driver(&mut self, lambda: f64, affine_only: bool) -> Driver {
        let pick: f64 = self.rng.gen();
        if affine_only {
            if pick < 0.15 {
                return Driver::linear(self.rng.gen_range(-0.3..0.3));
            }
            return self.affine_driver(lambda);
        }
        if pick < 0.10 {
            Driver::zero()
        } else if pick < 0.35 {
            Driver::linear(self.rng.gen_range(-0.3..0.3))
        } else if pick < 0.80 {
            self.affine_driver(lambda)
        } else {
            self.piecewise_driver(lambda)
        }
    }

    fn affine_driver(&mut self, lambda: f64) -> Driver {
        Driver::affine(
            self.rng.gen_range(-0.3..0.3),
            self.rng.gen_range(-0.3..0.3),
            self.rng.gen_range(-0.5..0.5),
            self.rng.gen_range(-0.25..0.25),
            lambda,
        )
    }

    fn piecewise_driver(&mut self, lambda: f64) -> Driver {
        Driver::piecewise(
            self.rng.gen_range(-0.3..0.3),
            self.rng.gen_range(-0.25..0.25),
            self.rng.gen_range(-0.25..0.25),
            self.rng.gen_range(-0.5..0.5),
            self.rng.gen_range(-0.5..0.5),
            self.rng.gen_range(-0.2..0.2),
            lambda,
        )
    }

    /// A dominated/dominating driver pair `f ≤ f'` pointwise, both monotone.
    pub fn monotone_driver_pair(&mut self, lambda: f64) -> (Driver, Driver) {
        let a = self.rng.gen_range(-0.3..0.3);
        let bp = self.rng.gen_range(-0.25..0.25);
        let bm = self.rng.gen_range(-0.25..0.25);
        let cp = self.rng.gen_range(-0.5..0.5);
        let cm = self.rng.gen_range(-0.5..0.5);
        let d = self.rng.gen_range(-0.2..0.2);
        let lower = Driver::piecewise(a, bp, bm, cp, cm, d, lambda);
        // f' = f + e0 + e1·|z| + λ·e2·|κ| with non-negative bumps.
        let e0 = self.rng.gen_range(0.0..0.3);
        let e1 = self.rng.gen_range(0.0..0.15);
        let e2 = self.rng.gen_range(0.0..0.15);
        let upper = Driver::piecewise(a, bp + e1, bm - e1, cp + e2, cm - e2, d + e0, lambda);
        (lower, upper)
    }

    /// Completely irregular obstacle: nodewise uniform on `[-1, 1]`.
    pub fn obstacle(&mut self, lat: &Lattice) -> Obstacle {
        let mut values = AdaptedProcess::zeros(lat);
        for node in lat.node_ids() {
            values.set(node, self.rng.gen_range(-1.0..1.0));
        }
        Obstacle::new(values)
    }

    /// r.u.s.c. obstacle: `main = post + U[0, 0.5]` at every step.
    pub fn rusc_obstacle(&mut self, lat: &Lattice) -> Obstacle {
        let mut values = AdaptedProcess::zeros(lat);
        let k = lat.num_steps();
        for step in 0..=k {
            for path in 0..lat.layer_width(step) {
                if step < k {
                    let post = self.rng.gen_range(-1.0..1.0);
                    values.set(NodeId::post(step, path), post);
                    values.set(NodeId::main(step, path), post + self.rng.gen_range(0.0..0.5));
                } else {
                    values.set(NodeId::main(step, path), self.rng.gen_range(-1.0..1.0));
                }
            }
        }
        Obstacle::new(values)
    }

    /// Obstacle passing both regularity surrogates (r.u.s.c. and no upward
    /// left jumps), built backward from a random terminal layer. Lifts are
    /// zero half the time so the contact set stays non-trivial.
    pub fn regular_obstacle(&mut self, lat: &Lattice) -> Obstacle {
        let mut values = AdaptedProcess::zeros(lat);
        let k = lat.num_steps();
        for path in 0..lat.layer_width(k) {
            values.set(NodeId::main(k, path), self.rng.gen_range(-1.0..1.0));
        }
        for step in (0..k).rev() {
            for path in 0..lat.layer_width(step) {
                let max_child = (0..4)
                    .map(|b| values.value(NodeId::main(step + 1, (path << 2) | b)))
                    .fold(f64::NEG_INFINITY, f64::max);
                let lift_post =
                    if self.rng.gen_bool(0.5) { self.rng.gen_range(0.0..0.4) } else { 0.0 };
                values.set(NodeId::post(step, path), max_child + lift_post);
                let lift_main =
                    if self.rng.gen_bool(0.5) { self.rng.gen_range(0.0..0.4) } else { 0.0 };
                values.set(
                    NodeId::main(step, path),
                    values.value(NodeId::post(step, path)) + lift_main,
                );
            }
        }
        Obstacle::new(values)
    }

    /// `base + U[0, max_lift]` nodewise (for monotone pairs `ξ ≤ ξ'`).
    pub fn lifted(&mut self, lat: &Lattice, base: &Obstacle, max_lift: f64) -> Obstacle {
        let mut values = base.process().clone();
        for node in lat.node_ids() {
            values.set(node, values.value(node) + self.rng.gen_range(0.0..max_lift));
        }
        Obstacle::new(values)
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

fn node_key(step: usize, phase: Phase, path: usize) -> u64 {
    let phase_bit = match phase {
        Phase::Main => 0u64,
        Phase::Post => 1,
    };
    ((step as u64) << 40) | (phase_bit << 32) | path as u64
}

fn hash_uniform(seed: u64, step: usize, phase: Phase, path: usize) -> f64 {
    let h = splitmix64(seed ^ node_key(step, phase, path));
    // 53 high bits to a uniform in [0, 1).
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Procedurally generated obstacle: values are a pure hash of the node id,
/// so arbitrarily large grids can be swept without materialising anything.
#[derive(Debug, Clone, Copy)]
pub struct HashObstacle {
    pub seed: u64,
    pub amplitude: f64,
}

impl ObstacleView for HashObstacle {
    fn main(&self, step: usize, path: usize) -> f64 {
        self.amplitude * (2.0 * hash_uniform(self.seed, step, Phase::Main, path) - 1.0)
    }

    fn post(&self, step: usize, path: usize) -> f64 {
        self.amplitude * (2.0 * hash_uniform(self.seed, step, Phase::Post, path) - 1.0)
    }
}

/// A hash obstacle plus a non-negative hash lift (for dominated pairs).
#[derive(Debug, Clone, Copy)]
pub struct LiftedHashObstacle {
    pub base: HashObstacle,
    pub lift_seed: u64,
    pub max_lift: f64,
}

impl ObstacleView for LiftedHashObstacle {
    fn main(&self, step: usize, path: usize) -> f64 {
        self.base.main(step, path)
            + self.max_lift * hash_uniform(self.lift_seed, step, Phase::Main, path)
    }

    fn post(&self, step: usize, path: usize) -> f64 {
        self.base.post(step, path)
            + self.max_lift * hash_uniform(self.lift_seed, step, Phase::Post, path)
    }
}
