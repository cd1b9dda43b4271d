//! The Brownian–Poisson scenario lattice with a doubled time grid.
//!
//! Time is discretised into `K` steps of length `Δt = T/K`. Every step
//! `k < K` carries two sub-times: a `Main` node (the grid time `t_k`) and a
//! `Post` node (the instant just after `t_k`). The Main→Post edge is
//! deterministic (probability one, no time elapses); the four random edges
//! out of a Post node realise the product of a Brownian sign and a Poisson
//! indicator over `(t_k, t_{k+1}]`:
//!
//! | digit | dW     | dN | probability    |
//! |-------|--------|----|----------------|
//! | 0     | +√Δt   | 0  | (1-λΔt)/2      |
//! | 1     | -√Δt   | 0  | (1-λΔt)/2      |
//! | 2     | +√Δt   | 1  | λΔt/2          |
//! | 3     | -√Δt   | 1  | λΔt/2          |
//!
//! The tree does not recombine, so each node is identified by its step,
//! phase, and the base-4 word of branch digits taken from the root. The
//! doubled grid makes ladlag (neither left- nor right-continuous) processes
//! exactly representable: a process holds a `main` value and a `post`
//! (right-limit) value at every step.

use crate::error::Error;
use crate::parallel::map_layer;
use serde::{Deserialize, Serialize};
use std::fmt;

/// Default cap on exhaustive stopping-rule enumeration.
pub const ORACLE_LIMIT_DEFAULT: usize = 3;

/// Grid parameters for [`Lattice::build`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Number of random steps `K >= 1`.
    pub num_steps: usize,
    /// Terminal time `T > 0`.
    pub horizon: f64,
    /// Poisson intensity `λ > 0` (jumps per unit time).
    pub intensity: f64,
}

impl GridSpec {
    pub fn dt(&self) -> f64 {
        self.horizon / self.num_steps as f64
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.num_steps < 1 {
            return Err(Error::InvalidGrid(format!(
                "num_steps must be >= 1, got {}",
                self.num_steps
            )));
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(Error::InvalidGrid(format!(
                "horizon must be a positive real, got {}",
                self.horizon
            )));
        }
        if !(self.intensity > 0.0) || !self.intensity.is_finite() {
            return Err(Error::InvalidGrid(format!(
                "intensity must be a positive real, got {}",
                self.intensity
            )));
        }
        let lambda_dt = self.intensity * self.dt();
        if lambda_dt >= 1.0 {
            return Err(Error::InvalidGrid(format!(
                "jump probability lambda*dt = {lambda_dt} must be < 1"
            )));
        }
        Ok(())
    }
}

/// Phase of a sub-time: the grid time itself or the instant just after it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    Main,
    Post,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Phase::Main => write!(f, "main"),
            Phase::Post => write!(f, "post"),
        }
    }
}

/// A point on the doubled time grid. Total order:
/// `(k, Main) < (k, Post) < (k+1, Main)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SubTime {
    pub step: usize,
    pub phase: Phase,
}

impl SubTime {
    pub fn new(step: usize, phase: Phase) -> Self {
        SubTime { step, phase }
    }
}

/// Node identifier: sub-time plus the path word.
///
/// `path` encodes the branch digits from the root in base 4, most
/// significant digit first; a node at step `k` has a `k`-digit word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId {
    pub step: usize,
    pub phase: Phase,
    pub path: usize,
}

impl NodeId {
    pub fn main(step: usize, path: usize) -> Self {
        NodeId { step, phase: Phase::Main, path }
    }

    pub fn post(step: usize, path: usize) -> Self {
        NodeId { step, phase: Phase::Post, path }
    }

    pub fn sub_time(&self) -> SubTime {
        SubTime::new(self.step, self.phase)
    }

    pub fn root() -> Self {
        NodeId::main(0, 0)
    }

    /// Child reached from a Post node through branch `digit`.
    pub fn child(&self, digit: usize) -> NodeId {
        debug_assert_eq!(self.phase, Phase::Post);
        NodeId::main(self.step + 1, (self.path << 2) | digit)
    }

    /// Serialises as `k:phase:b1b2...bk` with branch digits in `{0,1,2,3}`.
    pub fn id_string(&self) -> String {
        let mut digits = String::with_capacity(self.step);
        for i in (0..self.step).rev() {
            let d = (self.path >> (2 * i)) & 3;
            digits.push(char::from(b'0' + d as u8));
        }
        format!("{}:{}:{}", self.step, self.phase, digits)
    }

    /// Parses the `k:phase:digits` form produced by [`NodeId::id_string`].
    pub fn parse(s: &str) -> Result<NodeId, Error> {
        let mut parts = s.splitn(3, ':');
        let (step, phase, digits) = match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => return Err(Error::InvalidInput(format!("malformed node id {s:?}"))),
        };
        let step: usize = step
            .parse()
            .map_err(|_| Error::InvalidInput(format!("bad step in node id {s:?}")))?;
        let phase = match phase {
            "main" => Phase::Main,
            "post" => Phase::Post,
            other => {
                return Err(Error::InvalidInput(format!("bad phase {other:?} in node id {s:?}")))
            }
        };
        if digits.len() != step {
            return Err(Error::InvalidInput(format!(
                "node id {s:?} has {} digits, expected {step}",
                digits.len()
            )));
        }
        let mut path = 0usize;
        for ch in digits.chars() {
            let d = match ch {
                '0' => 0,
                '1' => 1,
                '2' => 2,
                '3' => 3,
                other => {
                    return Err(Error::InvalidInput(format!(
                        "bad branch digit {other:?} in node id {s:?}"
                    )))
                }
            };
            path = (path << 2) | d;
        }
        Ok(NodeId { step, phase, path })
    }
}

/// One random branch out of a Post node.
#[derive(Debug, Clone, Copy)]
pub struct Branch {
    /// Brownian increment, `±√Δt`.
    pub dw: f64,
    /// Poisson indicator over the step.
    pub dn: u8,
    /// Compensated jump increment `dN - λΔt`.
    pub dn_tilde: f64,
    /// Branch probability.
    pub probability: f64,
}

/// Result of the one-step orthogonal projection at a Post node.
#[derive(Debug, Clone, Copy)]
pub struct Projection {
    /// Loading on the Brownian increment.
    pub z: f64,
    /// Loading on the compensated jump increment.
    pub kappa: f64,
    /// Residual per branch, orthogonal to `1`, `dW`, and `dÑ`.
    pub h: [f64; 4],
}

/// The immutable scenario tree. Holds grid constants and branch data; node
/// storage lives in [`AdaptedProcess`] and friends, indexed by layer.
#[derive(Debug, Clone)]
pub struct Lattice {
    spec: GridSpec,
    dt: f64,
    sqrt_dt: f64,
    lambda_dt: f64,
    branches: [Branch; 4],
    /// `E[dW²]` and `E[dÑ²]` as actually summed over the branches, so the
    /// projection residual is orthogonal to machine precision.
    var_dw: f64,
    var_dn_tilde: f64,
}

impl Lattice {
    /// Builds the lattice, validating the grid invariants.
    pub fn build(spec: GridSpec) -> Result<Lattice, Error> {
        spec.validate()?;
        let dt = spec.dt();
        let sqrt_dt = dt.sqrt();
        let lambda_dt = spec.intensity * dt;
        let p_nojump = (1.0 - lambda_dt) / 2.0;
        let p_jump = lambda_dt / 2.0;
        let branches = [
            Branch { dw: sqrt_dt, dn: 0, dn_tilde: -lambda_dt, probability: p_nojump },
            Branch { dw: -sqrt_dt, dn: 0, dn_tilde: -lambda_dt, probability: p_nojump },
            Branch { dw: sqrt_dt, dn: 1, dn_tilde: 1.0 - lambda_dt, probability: p_jump },
            Branch { dw: -sqrt_dt, dn: 1, dn_tilde: 1.0 - lambda_dt, probability: p_jump },
        ];
        let var_dw: f64 = branches.iter().map(|b| b.probability * b.dw * b.dw).sum();
        let var_dn_tilde: f64 =
            branches.iter().map(|b| b.probability * b.dn_tilde * b.dn_tilde).sum();
        Ok(Lattice { spec, dt, sqrt_dt, lambda_dt, branches, var_dw, var_dn_tilde })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn num_steps(&self) -> usize {
        self.spec.num_steps
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn sqrt_dt(&self) -> f64 {
        self.sqrt_dt
    }

    pub fn intensity(&self) -> f64 {
        self.spec.intensity
    }

    pub fn horizon(&self) -> f64 {
        self.spec.horizon
    }

    pub fn lambda_dt(&self) -> f64 {
        self.lambda_dt
    }

    pub fn branches(&self) -> &[Branch; 4] {
        &self.branches
    }

    /// Grid time of step `k`.
    pub fn time(&self, step: usize) -> f64 {
        step as f64 * self.dt
    }

    /// Number of paths (nodes per phase) at step `k`, i.e. `4^k`.
    pub fn layer_width(&self, step: usize) -> usize {
        1usize << (2 * step)
    }

    /// Total node count `2·Σ_{k<K} 4^k + 4^K`.
    pub fn node_count(&self) -> usize {
        let k = self.num_steps();
        let inner: usize = (0..k).map(|j| self.layer_width(j)).sum();
        2 * inner + self.layer_width(k)
    }

    /// Probability of reaching a node, i.e. the product of branch
    /// probabilities along its path word.
    pub fn path_probability(&self, step: usize, path: usize) -> f64 {
        let mut p = 1.0;
        for i in 0..step {
            let d = (path >> (2 * (step - 1 - i))) & 3;
            p *= self.branches[d].probability;
        }
        p
    }

    /// Probability-weighted average of values on the four outgoing branches
    /// of a Post node (the linear conditional expectation).
    pub fn conditional_expectation(&self, next: &[f64; 4]) -> f64 {
        let b = &self.branches;
        b[0].probability * next[0]
            + b[1].probability * next[1]
            + b[2].probability * next[2]
            + b[3].probability * next[3]
    }

    /// Orthogonal decomposition of the martingale increment
    /// `M = next - E[next]` against the basis `(dW, dÑ)`:
    /// `z = E[M·dW]/E[dW²]`, `κ = E[M·dÑ]/E[dÑ²]`, residual
    /// `h = M - z·dW - κ·dÑ` per branch.
    ///
    /// On this lattice `dW ⊥ dÑ` in L², so the three components are exactly
    /// orthogonal and `next` reconstructs as `E[next] + z·dW + κ·dÑ + h`.
    pub fn project_increment(&self, next: &[f64; 4]) -> Projection {
        let e = self.conditional_expectation(next);
        let mut num_w = 0.0;
        let mut num_n = 0.0;
        for (b, &v) in self.branches.iter().zip(next.iter()) {
            let m = v - e;
            num_w += b.probability * m * b.dw;
            num_n += b.probability * m * b.dn_tilde;
        }
        let z = num_w / self.var_dw;
        let kappa = num_n / self.var_dn_tilde;
        let mut h = [0.0; 4];
        for (i, (b, &v)) in self.branches.iter().zip(next.iter()).enumerate() {
            h[i] = (v - e) - z * b.dw - kappa * b.dn_tilde;
        }
        Projection { z, kappa, h }
    }

    /// Iterates all node ids in canonical order: steps ascending, Main layer
    /// before Post layer, path indices ascending.
    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        let k = self.num_steps();
        (0..=k).flat_map(move |step| {
            let width = self.layer_width(step);
            let mains = (0..width).map(move |p| NodeId::main(step, p));
            let posts = if step < k { 0..width } else { 0..0 };
            mains.chain(posts.map(move |p| NodeId::post(step, p)))
        })
    }
}

/// A real-valued process indexed by every node of the lattice.
///
/// Adaptedness is node-indexing: the value at a node may depend only on the
/// path prefix that identifies it.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedProcess {
    /// `main[k]` has `4^k` entries, `k = 0..=K`.
    main: Vec<Vec<f64>>,
    /// `post[k]` has `4^k` entries, `k = 0..K`.
    post: Vec<Vec<f64>>,
}

impl AdaptedProcess {
    pub fn zeros(lat: &Lattice) -> Self {
        Self::from_fn(lat, |_| 0.0)
    }

    /// Builds the process by evaluating `f` at every node (layer-parallel
    /// when enabled; slot assignment keeps the result bit-identical).
    pub fn from_fn<F: Fn(NodeId) -> f64 + Sync + Send>(lat: &Lattice, f: F) -> Self {
        let k = lat.num_steps();
        let mut main = Vec::with_capacity(k + 1);
        let mut post = Vec::with_capacity(k);
        for step in 0..=k {
            let width = lat.layer_width(step);
            main.push(map_layer(width, |p| f(NodeId::main(step, p))));
            if step < k {
                post.push(map_layer(width, |p| f(NodeId::post(step, p))));
            }
        }
        AdaptedProcess { main, post }
    }

    pub fn value(&self, node: NodeId) -> f64 {
        match node.phase {
            Phase::Main => self.main[node.step][node.path],
            Phase::Post => self.post[node.step][node.path],
        }
    }

    pub fn set(&mut self, node: NodeId, v: f64) {
        match node.phase {
            Phase::Main => self.main[node.step][node.path] = v,
            Phase::Post => self.post[node.step][node.path] = v,
        }
    }

    pub fn main_layer(&self, step: usize) -> &[f64] {
        &self.main[step]
    }

    pub fn post_layer(&self, step: usize) -> &[f64] {
        &self.post[step]
    }

    pub fn main_layer_mut(&mut self, step: usize) -> &mut Vec<f64> {
        &mut self.main[step]
    }

    pub fn post_layer_mut(&mut self, step: usize) -> &mut Vec<f64> {
        &mut self.post[step]
    }

    /// Number of steps this process was built for.
    pub fn num_steps(&self) -> usize {
        self.main.len() - 1
    }

    /// Pointwise `self[n] <= other[n] + tol` over all nodes; returns the
    /// largest violation (non-negative, 0 when the order holds).
    pub fn max_excess_over(&self, other: &AdaptedProcess) -> f64 {
        let mut worst = 0.0f64;
        for (a, b) in self.main.iter().zip(other.main.iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                worst = worst.max(x - y);
            }
        }
        for (a, b) in self.post.iter().zip(other.post.iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                worst = worst.max(x - y);
            }
        }
        worst
    }
}

/// An adapted stop/continue labelling with first-hit semantics: the stopping
/// time of a path is its earliest stopped node in the sub-time order. All
/// terminal `(K, Main)` nodes are stopped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoppingRule {
    stop_main: Vec<Vec<bool>>,
    stop_post: Vec<Vec<bool>>,
}

impl StoppingRule {
    /// Rule that never stops before the terminal layer.
    pub fn terminal(lat: &Lattice) -> Self {
        let k = lat.num_steps();
        let stop_main = (0..=k)
            .map(|step| vec![step == k; lat.layer_width(step)])
            .collect();
        let stop_post = (0..k).map(|step| vec![false; lat.layer_width(step)]).collect();
        StoppingRule { stop_main, stop_post }
    }

    /// Rule stopping immediately at the root.
    pub fn at_root(lat: &Lattice) -> Self {
        let mut rule = Self::terminal(lat);
        rule.stop_main[0][0] = true;
        rule
    }

    /// Rule stopping everywhere at sub-time `(step, phase)`.
    pub fn at_sub_time(lat: &Lattice, sub: SubTime) -> Self {
        let mut rule = Self::terminal(lat);
        let width = lat.layer_width(sub.step);
        match sub.phase {
            Phase::Main => rule.stop_main[sub.step] = vec![true; width],
            Phase::Post => rule.stop_post[sub.step] = vec![true; width],
        }
        rule
    }

    pub fn is_stopped(&self, node: NodeId) -> bool {
        match node.phase {
            Phase::Main => self.stop_main[node.step][node.path],
            Phase::Post => self.stop_post[node.step][node.path],
        }
    }

    pub fn set_stopped(&mut self, node: NodeId, stopped: bool) {
        match node.phase {
            Phase::Main => self.stop_main[node.step][node.path] = stopped,
            Phase::Post => self.stop_post[node.step][node.path] = stopped,
        }
    }

    /// First stopped node along the path identified by a terminal path word.
    pub fn first_hit_of_path(&self, lat: &Lattice, terminal_path: usize) -> NodeId {
        let k = lat.num_steps();
        for step in 0..k {
            let prefix = terminal_path >> (2 * (k - step));
            if self.stop_main[step][prefix] {
                return NodeId::main(step, prefix);
            }
            if self.stop_post[step][prefix] {
                return NodeId::post(step, prefix);
            }
        }
        NodeId::main(k, terminal_path)
    }

    /// All distinct first-hit nodes, in canonical node order.
    pub fn first_hit_nodes(&self, lat: &Lattice) -> Vec<NodeId> {
        let status = NodeStatus::compute(lat, self);
        let mut out = Vec::new();
        for node in lat.node_ids() {
            if status.of(node) == Region::AtHit {
                out.push(node);
            }
        }
        out
    }

    /// Checks adaptedness bookkeeping: terminal nodes stopped. (Adaptedness
    /// itself is structural: decisions are indexed by node.)
    pub fn validate(&self, lat: &Lattice) -> Result<(), Error> {
        let k = lat.num_steps();
        if self.stop_main.len() != k + 1 || self.stop_post.len() != k {
            return Err(Error::InvalidInput("stopping rule layer count mismatch".into()));
        }
        if !self.stop_main[k].iter().all(|&s| s) {
            return Err(Error::InvalidInput("all terminal nodes must be stopped".into()));
        }
        Ok(())
    }

    /// Canonical form: marks exactly the first-hit frontier plus all terminal
    /// nodes. Two rules are equal as stopping times iff their canonical forms
    /// are equal.
    pub fn canonicalize(&self, lat: &Lattice) -> StoppingRule {
        let status = NodeStatus::compute(lat, self);
        let k = lat.num_steps();
        let mut out = StoppingRule::terminal(lat);
        for node in lat.node_ids() {
            if node.step == k {
                continue;
            }
            if status.of(node) == Region::AtHit {
                out.set_stopped(node, true);
            }
        }
        out
    }

    /// Pathwise `self ≤ other`: on every maximal path the first hit of `self`
    /// is at or before the first hit of `other`.
    pub fn precedes(&self, lat: &Lattice, other: &StoppingRule) -> bool {
        let k = lat.num_steps();
        let terminal_width = lat.layer_width(k);
        for path in 0..terminal_width {
            let a = self.first_hit_of_path(lat, path).sub_time();
            let b = other.first_hit_of_path(lat, path).sub_time();
            if a > b {
                return false;
            }
        }
        true
    }

    /// Pathwise minimum of two rules (first hit of the union of stop sets).
    pub fn earlier_of(&self, lat: &Lattice, other: &StoppingRule) -> StoppingRule {
        let k = lat.num_steps();
        let mut out = StoppingRule::terminal(lat);
        for node in lat.node_ids() {
            if node.step < k && (self.is_stopped(node) || other.is_stopped(node)) {
                out.set_stopped(node, true);
            }
        }
        out.canonicalize(lat)
    }
}

/// Where a node sits relative to a rule's first-hit frontier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Before,
    AtHit,
    After,
}

/// Per-node region classification for a stopping rule, computed by one
/// forward sweep.
pub struct NodeStatus {
    main: Vec<Vec<Region>>,
    post: Vec<Vec<Region>>,
}

impl NodeStatus {
    pub fn compute(lat: &Lattice, rule: &StoppingRule) -> NodeStatus {
        let k = lat.num_steps();
        let mut main: Vec<Vec<Region>> = Vec::with_capacity(k + 1);
        let mut post: Vec<Vec<Region>> = Vec::with_capacity(k);
        for step in 0..=k {
            let width = lat.layer_width(step);
            let main_layer: Vec<Region> = (0..width)
                .map(|p| {
                    let before = if step == 0 {
                        Region::Before
                    } else {
                        post[step - 1][p >> 2]
                    };
                    step_region(before, rule.is_stopped(NodeId::main(step, p)))
                })
                .collect();
            if step < k {
                let post_layer: Vec<Region> = (0..width)
                    .map(|p| {
                        step_region(main_layer[p], rule.is_stopped(NodeId::post(step, p)))
                    })
                    .collect();
                post.push(post_layer);
            }
            main.push(main_layer);
        }
        NodeStatus { main, post }
    }

    pub fn of(&self, node: NodeId) -> Region {
        match node.phase {
            Phase::Main => self.main[node.step][node.path],
            Phase::Post => self.post[node.step][node.path],
        }
    }
}

fn step_region(before: Region, stopped_here: bool) -> Region {
    match before {
        Region::AtHit | Region::After => Region::After,
        Region::Before => {
            if stopped_here {
                Region::AtHit
            } else {
                Region::Before
            }
        }
    }
}

/// Number of adapted first-hit stopping rules on a lattice with `num_steps`
/// random steps: `count = 1` at a terminal node (must stop) and
/// `count(node) = 1 + Π_children count(child)` elsewhere (the `1` is
/// "stop here"; a Main node's single child is its Post node).
/// `num_steps = 0` is the degenerate single-node tree with exactly one rule.
/// Saturates at `u128::MAX` for large grids.
pub fn count_stopping_rules(num_steps: usize) -> u128 {
    let mut main_count: u128 = 1;
    for _ in 0..num_steps {
        let post_count = 1u128.saturating_add(main_count.saturating_pow(4));
        main_count = 1u128.saturating_add(post_count);
    }
    main_count
}

/// Per-step subtree rule counts: `counts[k]` is the number of sub-rules in a
/// subtree rooted at a Main node of step `k`.
fn subtree_rule_counts(num_steps: usize) -> Vec<u128> {
    let mut counts = vec![0u128; num_steps + 1];
    counts[num_steps] = 1;
    for step in (0..num_steps).rev() {
        counts[step] = 2u128.saturating_add(counts[step + 1].saturating_pow(4));
    }
    counts
}

/// Lazy exhaustive enumeration of all adapted first-hit stopping rules in a
/// canonical order: index 0 stops at the root Main node, index 1 at the root
/// Post node, and the remaining indices run through the continue-combinations
/// lexicographically in child order. Rules are materialised one at a time.
#[derive(Debug)]
pub struct RuleEnumeration<'a> {
    lat: &'a Lattice,
    counts: Vec<u128>,
    next: u128,
    total: u128,
}

impl<'a> RuleEnumeration<'a> {
    pub fn total(&self) -> u128 {
        self.total
    }

    /// Rule at a given canonical index.
    pub fn rule_at(&self, index: u128) -> StoppingRule {
        debug_assert!(index < self.total);
        let mut rule = StoppingRule::terminal(self.lat);
        descend_rule(self.lat, &self.counts, 0, 0, index, &mut rule);
        rule
    }
}

impl Iterator for RuleEnumeration<'_> {
    type Item = StoppingRule;

    fn next(&mut self) -> Option<StoppingRule> {
        if self.next >= self.total {
            return None;
        }
        let rule = self.rule_at(self.next);
        self.next += 1;
        Some(rule)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let rem = (self.total - self.next).min(usize::MAX as u128) as usize;
        (rem, Some(rem))
    }
}

fn descend_rule(
    lat: &Lattice,
    counts: &[u128],
    step: usize,
    path: usize,
    index: u128,
    rule: &mut StoppingRule,
) {
    if step == lat.num_steps() {
        debug_assert_eq!(index, 0);
        return;
    }
    if index == 0 {
        rule.set_stopped(NodeId::main(step, path), true);
        return;
    }
    let index = index - 1;
    if index == 0 {
        rule.set_stopped(NodeId::post(step, path), true);
        return;
    }
    let combo = index - 1;
    let m = counts[step + 1];
    let m2 = m * m;
    let m3 = m2 * m;
    let parts = [combo / m3, (combo / m2) % m, (combo / m) % m, combo % m];
    for (digit, part) in parts.into_iter().enumerate() {
        descend_rule(lat, counts, step + 1, (path << 2) | digit, part, rule);
    }
}

/// Exhaustive, duplicate-free enumeration of all adapted first-hit stopping
/// rules. Errors with [`Error::OracleTooLarge`] above `limit` steps.
pub fn enumerate_stopping_rules(
    lat: &Lattice,
    limit: usize,
) -> Result<RuleEnumeration<'_>, Error> {
    let k = lat.num_steps();
    if k > limit {
        return Err(Error::OracleTooLarge { num_steps: k, limit });
    }
    let counts = subtree_rule_counts(k);
    let total = counts[0];
    Ok(RuleEnumeration { lat, counts, next: 0, total })
}

/// First-hit rule of a predicate over `(node, value)`: stops at the earliest
/// sub-time where the predicate holds, and at `(K, Main)` if never hit.
pub fn hitting_rule<F>(lat: &Lattice, process: &AdaptedProcess, pred: F) -> StoppingRule
where
    F: Fn(NodeId, f64) -> bool,
{
    let k = lat.num_steps();
    let mut rule = StoppingRule::terminal(lat);
    for step in 0..k {
        for path in 0..lat.layer_width(step) {
            let m = NodeId::main(step, path);
            if pred(m, process.value(m)) {
                rule.set_stopped(m, true);
            }
            let p = NodeId::post(step, path);
            if pred(p, process.value(p)) {
                rule.set_stopped(p, true);
            }
        }
    }
    rule.canonicalize(lat)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_lattice(k: usize) -> Lattice {
        Lattice::build(GridSpec { num_steps: k, horizon: 1.0, intensity: 0.5 }).unwrap()
    }

    #[test]
    fn build_counts_nodes_for_one_step() {
        // 1 main root, 1 post root, 4 terminal nodes.
        let lat = small_lattice(1);
        assert_eq!(lat.node_count(), 6);
        let b = lat.branches();
        assert_eq!(b[2].probability, 0.25);
        assert_eq!(b[0].probability, 0.25);
        let total: f64 = b.iter().map(|b| b.probability).sum();
        assert!((total - 1.0).abs() <= 1e-15);
    }

    #[test]
    fn build_counts_terminal_nodes_for_two_steps() {
        let lat = small_lattice(2);
        assert_eq!(lat.layer_width(2), 16);
        assert_eq!(lat.node_count(), 2 * (1 + 4) + 16);
    }

    #[test]
    fn build_rejects_certain_jump() {
        let err = Lattice::build(GridSpec { num_steps: 1, horizon: 1.0, intensity: 1.5 })
            .unwrap_err();
        assert!(matches!(err, Error::InvalidGrid(_)));
        let err = Lattice::build(GridSpec { num_steps: 0, horizon: 1.0, intensity: 0.5 })
            .unwrap_err();
        assert!(matches!(err, Error::InvalidGrid(_)));
    }

    #[test]
    fn increments_are_centered() {
        let lat = small_lattice(2);
        let ew: f64 = lat.branches().iter().map(|b| b.probability * b.dw).sum();
        let en: f64 = lat.branches().iter().map(|b| b.probability * b.dn_tilde).sum();
        assert!(ew.abs() <= 1e-16);
        assert!(en.abs() <= 1e-16);
        // dW ⊥ dÑ on the four branches.
        let cross: f64 =
            lat.branches().iter().map(|b| b.probability * b.dw * b.dn_tilde).sum();
        assert!(cross.abs() <= 1e-16);
    }

    #[test]
    fn conditional_expectation_of_basis_elements() {
        let lat = small_lattice(1);
        let c = [3.25; 4];
        assert_eq!(lat.conditional_expectation(&c), 3.25);
        let a = 1.7;
        let dw: [f64; 4] = std::array::from_fn(|i| a * lat.branches()[i].dw);
        assert!(lat.conditional_expectation(&dw).abs() <= 1e-15);
        let b = -0.9;
        let dn: [f64; 4] = std::array::from_fn(|i| b * lat.branches()[i].dn_tilde);
        assert!(lat.conditional_expectation(&dn).abs() <= 1e-15);
    }

    #[test]
    fn projection_recovers_basis_loadings() {
        let lat = small_lattice(1);
        let a = 2.5;
        let next: [f64; 4] = std::array::from_fn(|i| a * lat.branches()[i].dw);
        let p = lat.project_increment(&next);
        assert!((p.z - a).abs() <= 1e-12);
        assert!(p.kappa.abs() <= 1e-12);
        assert!(p.h.iter().all(|h| h.abs() <= 1e-14));

        let b = -1.25;
        let next: [f64; 4] = std::array::from_fn(|i| b * lat.branches()[i].dn_tilde);
        let p = lat.project_increment(&next);
        assert!(p.z.abs() <= 1e-12);
        assert!((p.kappa - b).abs() <= 1e-12);
        assert!(p.h.iter().all(|h| h.abs() <= 1e-14));
    }

    #[test]
    fn interaction_direction_is_pure_residual() {
        // next = dW·dÑ loads neither dW nor dÑ: E[dW·dÑ·dW] = E[dW·dÑ·dÑ] = 0
        // by direct 4-branch summation.
        let lat = small_lattice(1);
        let next: [f64; 4] =
            std::array::from_fn(|i| lat.branches()[i].dw * lat.branches()[i].dn_tilde);
        let mut e_by_dw = 0.0;
        let mut e_by_dn = 0.0;
        for (b, v) in lat.branches().iter().zip(next.iter()) {
            e_by_dw += b.probability * v * b.dw;
            e_by_dn += b.probability * v * b.dn_tilde;
        }
        assert!(e_by_dw.abs() <= 1e-15);
        assert!(e_by_dn.abs() <= 1e-15);
        let p = lat.project_increment(&next);
        assert!(p.z.abs() <= 1e-13);
        assert!(p.kappa.abs() <= 1e-13);
        for (h, v) in p.h.iter().zip(next.iter()) {
            assert!((h - v).abs() <= 1e-13);
        }
    }

    #[test]
    fn node_id_round_trip() {
        let id = NodeId::post(3, 0b10_01_11);
        let s = id.id_string();
        assert_eq!(s, "3:post:213");
        assert_eq!(NodeId::parse(&s).unwrap(), id);
        assert_eq!(NodeId::parse("0:main:").unwrap(), NodeId::root());
        assert!(NodeId::parse("2:main:5").is_err());
        assert!(NodeId::parse("2:weird:00").is_err());
    }

    #[test]
    fn rule_count_matches_enumeration() {
        assert_eq!(count_stopping_rules(0), 1);
        assert_eq!(count_stopping_rules(1), 3);
        assert_eq!(count_stopping_rules(2), 83);
        let lat = small_lattice(1);
        let rules: Vec<_> = enumerate_stopping_rules(&lat, 3).unwrap().collect();
        assert_eq!(rules.len(), 3);
        let lat = small_lattice(2);
        let rules: Vec<_> = enumerate_stopping_rules(&lat, 3).unwrap().collect();
        assert_eq!(rules.len(), 83);
        // Duplicate-free as stopping times.
        for i in 0..rules.len() {
            for j in (i + 1)..rules.len() {
                assert_ne!(rules[i], rules[j]);
            }
        }
        for rule in &rules {
            rule.validate(&lat).unwrap();
        }
    }

    #[test]
    fn enumeration_respects_limit() {
        let lat = Lattice::build(GridSpec { num_steps: 4, horizon: 1.0, intensity: 0.5 })
            .unwrap();
        let err = enumerate_stopping_rules(&lat, 3).unwrap_err();
        assert!(matches!(err, Error::OracleTooLarge { num_steps: 4, limit: 3 }));
    }

    #[test]
    fn hitting_rule_extremes() {
        let lat = small_lattice(2);
        let zeros = AdaptedProcess::zeros(&lat);
        let always = hitting_rule(&lat, &zeros, |_, _| true);
        assert!(always.is_stopped(NodeId::root()));
        let never = hitting_rule(&lat, &zeros, |_, _| false);
        assert_eq!(never, StoppingRule::terminal(&lat));
    }

    #[test]
    fn first_hit_respects_sub_time_order() {
        let lat = small_lattice(2);
        let mut rule = StoppingRule::terminal(&lat);
        rule.set_stopped(NodeId::post(0, 0), true);
        rule.set_stopped(NodeId::main(1, 2), true);
        for path in 0..16 {
            let hit = rule.first_hit_of_path(&lat, path);
            assert_eq!(hit, NodeId::post(0, 0));
        }
        let canon = rule.canonicalize(&lat);
        assert!(!canon.is_stopped(NodeId::main(1, 2)));
    }

    #[test]
    fn precedes_is_pathwise() {
        let lat = small_lattice(2);
        let root = StoppingRule::at_root(&lat);
        let term = StoppingRule::terminal(&lat);
        assert!(root.precedes(&lat, &term));
        assert!(!term.precedes(&lat, &root));
        assert!(root.precedes(&lat, &root));
    }
}
