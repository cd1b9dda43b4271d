//! Report builders: the fixed CSV column layouts and JSON summary schemas
//! shared by the CLI commands. All numeric fields are written with the
//! shortest round-trip formatting, so identical solutions serialise to
//! identical bytes.

use crate::lattice::{Lattice, NodeId, Phase, StoppingRule};
use crate::market::{AssetPaths, HedgeReport};
use crate::rbsde::{Obstacle, RbsdeSolution, SkorokhodReport};
use serde::Serialize;
use std::fmt::Write as _;

/// Summary record attached to a solution export.
#[derive(Debug, Clone, Serialize)]
pub struct SolutionSummary {
    pub y0: f64,
    pub a_mass: f64,
    pub c_mass: f64,
    pub max_a_violation: f64,
    pub max_c_violation: f64,
    pub max_reconstruction_residual: f64,
    pub h_nonzero: bool,
    pub node_count: usize,
}

pub fn solution_summary(
    lat: &Lattice,
    sol: &RbsdeSolution,
    skorokhod: &SkorokhodReport,
    reconstruction_residual: f64,
) -> SolutionSummary {
    SolutionSummary {
        y0: sol.root_value(),
        a_mass: sol.a_mass(lat),
        c_mass: sol.c_mass(lat),
        max_a_violation: skorokhod.max_a_violation,
        max_c_violation: skorokhod.max_c_violation,
        max_reconstruction_residual: reconstruction_residual,
        h_nonzero: sol.h_is_nonzero(0.0),
        node_count: lat.node_count(),
    }
}

/// Solution table: `node_id,t,phase,xi,y,z,kappa,dA,dC,dh0,dh1,dh2,dh3`.
/// Post-only fields are empty on Main rows and vice versa.
pub fn solution_csv(lat: &Lattice, sol: &RbsdeSolution, obstacle: &Obstacle) -> String {
    let mut out = String::new();
    out.push_str("node_id,t,phase,xi,y,z,kappa,dA,dC,dh0,dh1,dh2,dh3\n");
    for node in lat.node_ids() {
        push_solution_row(&mut out, lat, sol, obstacle, node, None);
    }
    out
}

fn push_solution_row(
    out: &mut String,
    lat: &Lattice,
    sol: &RbsdeSolution,
    obstacle: &Obstacle,
    node: NodeId,
    extra: Option<(&AssetPaths, &HedgeReport)>,
) {
    let t = lat.time(node.step);
    let _ = write!(
        out,
        "{},{},{},{},{}",
        node.id_string(),
        t,
        node.phase,
        obstacle.value(node),
        sol.y.value(node)
    );
    match node.phase {
        Phase::Post => {
            let (s, p) = (node.step, node.path);
            let h = sol.h[s][p];
            let _ = write!(
                out,
                ",{},{},{},,{},{},{},{}",
                sol.z[s][p], sol.kappa[s][p], sol.a_inc[s][p], h[0], h[1], h[2], h[3]
            );
        }
        Phase::Main => {
            if node.step < lat.num_steps() {
                let _ = write!(out, ",,,,{},,,,", sol.c_inc[node.step][node.path]);
            } else {
                out.push_str(",,,,,,,,");
            }
        }
    }
    if let Some((assets, hedge)) = extra {
        let [s1, s2] = assets.at(node);
        let _ = write!(out, ",{s1},{s2}");
        match node.phase {
            Phase::Post => {
                let [p1, p2] = hedge.phi[node.step][node.path];
                let _ = write!(out, ",{p1},{p2}");
            }
            Phase::Main => out.push_str(",,"),
        }
        let _ = write!(out, ",{}", hedge.wealth.value(node));
    }
    out.push('\n');
}

/// Pricing summary JSON payload.
#[derive(Debug, Clone, Serialize)]
pub struct PricingSummary {
    pub u0: f64,
    pub a_mass: f64,
    pub c_mass: f64,
    pub shortfall: f64,
    pub shortfall_bound: f64,
    pub argmax_exercise_nodes: Vec<String>,
}

pub fn pricing_summary(
    lat: &Lattice,
    sol: &RbsdeSolution,
    hedge: &HedgeReport,
    exercise_rule: Option<&StoppingRule>,
) -> PricingSummary {
    let mut nodes = Vec::new();
    if let Some(rule) = exercise_rule {
        for n in rule.first_hit_nodes(lat).into_iter().take(1000) {
            nodes.push(n.id_string());
        }
    }
    PricingSummary {
        u0: sol.root_value(),
        a_mass: sol.a_mass(lat),
        c_mass: sol.c_mass(lat),
        shortfall: hedge.max_shortfall,
        shortfall_bound: hedge.shortfall_bound,
        argmax_exercise_nodes: nodes,
    }
}

/// Pricing table: the solution columns extended with
/// `s1,s2,phi1,phi2,wealth`.
pub fn pricing_csv(
    lat: &Lattice,
    sol: &RbsdeSolution,
    obstacle: &Obstacle,
    assets: &AssetPaths,
    hedge: &HedgeReport,
) -> String {
    let mut out = String::new();
    out.push_str("node_id,t,phase,xi,y,z,kappa,dA,dC,dh0,dh1,dh2,dh3,s1,s2,phi1,phi2,wealth\n");
    for node in lat.node_ids() {
        push_solution_row(&mut out, lat, sol, obstacle, node, Some((assets, hedge)));
    }
    out
}

/// Oracle per-rule table: `rule_id,rule_description,value_at_root`.
/// The description lists the rule's first-hit frontier node ids.
pub fn oracle_csv(lat: &Lattice, rows: &[(StoppingRule, f64)]) -> String {
    let mut out = String::new();
    out.push_str("rule_id,rule_description,value_at_root\n");
    for (idx, (rule, value)) in rows.iter().enumerate() {
        let desc: Vec<String> =
            rule.first_hit_nodes(lat).iter().map(|n| n.id_string()).collect();
        let _ = writeln!(out, "{idx},{},{value}", desc.join(" "));
    }
    out
}

/// Oracle summary JSON payload.
#[derive(Debug, Clone, Serialize)]
pub struct OracleSummary {
    pub value: f64,
    pub strict_value: f64,
    pub solver_y0: f64,
    pub solver_y0_post: f64,
    pub gap: f64,
    pub strict_gap: f64,
    pub rule_count: String,
    pub argmax_rule_id: String,
    pub argmax_rule_description: Vec<String>,
    /// Present only when the per-rule table was emitted.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_rule_table: Option<bool>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsde::Driver;
    use crate::lattice::GridSpec;
    use crate::rbsde::{reconstruct, solve_rbsde, verify_skorokhod};

    #[test]
    fn csv_has_fixed_header_and_row_count() {
        let lat = Lattice::build(GridSpec { num_steps: 1, horizon: 1.0, intensity: 0.5 })
            .unwrap();
        let obstacle = Obstacle::constant(&lat, 0.5);
        let sol = solve_rbsde(&lat, &obstacle, &Driver::zero()).unwrap();
        let csv = solution_csv(&lat, &sol, &obstacle);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "node_id,t,phase,xi,y,z,kappa,dA,dC,dh0,dh1,dh2,dh3");
        assert_eq!(lines.len(), 1 + lat.node_count());
        assert!(lines[1].starts_with("0:main:,0,main,0.5,0.5"));
    }

    #[test]
    fn summary_serialises_deterministically() {
        let lat = Lattice::build(GridSpec { num_steps: 2, horizon: 1.0, intensity: 0.5 })
            .unwrap();
        let obstacle = Obstacle::constant(&lat, 1.0);
        let d = Driver::linear(0.1);
        let sol = solve_rbsde(&lat, &obstacle, &d).unwrap();
        let sk = verify_skorokhod(&lat, &sol, &obstacle);
        let res = reconstruct(&lat, &sol, &obstacle, &d);
        let s1 = serde_json::to_string(&solution_summary(&lat, &sol, &sk, res)).unwrap();
        let s2 = serde_json::to_string(&solution_summary(&lat, &sol, &sk, res)).unwrap();
        assert_eq!(s1, s2);
    }
}
