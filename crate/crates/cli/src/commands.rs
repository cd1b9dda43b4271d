//! Command implementations and artefact emission.

use crate::config::RunConfig;
use crate::Failure;
use serde::Serialize;
use snell_core::bsde::Driver;
use snell_core::checks;
use snell_core::generate::InstanceGenerator;
use snell_core::lattice::{GridSpec, Lattice, NodeId, StoppingRule};
use snell_core::market::Imperfection;
use snell_core::rbsde::{reconstruct, solve_rbsde, verify_skorokhod, Obstacle};
use snell_core::report;
use snell_core::stopping;
use std::path::PathBuf;

pub struct CommandContext {
    pub config: RunConfig,
    pub seed: u64,
    pub seed_was_explicit: bool,
    pub out_dir: PathBuf,
    pub write_csv: bool,
    pub write_json: bool,
}

impl CommandContext {
    pub fn new(
        config: RunConfig,
        seed: Option<u64>,
        out: Option<PathBuf>,
        format: Option<String>,
    ) -> Result<CommandContext, Failure> {
        let out_dir = out
            .or_else(|| {
                config
                    .output
                    .as_ref()
                    .and_then(|o| o.dir.as_ref())
                    .map(PathBuf::from)
            })
            .unwrap_or_else(|| PathBuf::from("out"));
        let format = format
            .or_else(|| config.output.as_ref().and_then(|o| o.formats.clone()))
            .unwrap_or_else(|| "both".to_string());
        let (write_csv, write_json) = match format.as_str() {
            "csv" => (true, false),
            "json" => (false, true),
            "both" => (true, true),
            other => {
                return Err(Failure::invalid(
                    "INVALID_INPUT",
                    format!("unknown format {other:?}"),
                ))
            }
        };
        Ok(CommandContext {
            seed: seed.unwrap_or(42),
            seed_was_explicit: seed.is_some(),
            config,
            out_dir,
            write_csv,
            write_json,
        })
    }

    fn lattice(&self) -> Result<Lattice, Failure> {
        let spec: GridSpec = self.config.grid_spec();
        Ok(Lattice::build(spec)?)
    }

    /// Generator obstacles honour an explicit `--seed`; otherwise the config
    /// seed applies.
    fn obstacle_seed(&self) -> Option<u64> {
        if self.seed_was_explicit {
            Some(self.seed)
        } else {
            None
        }
    }

    fn write(&self, name: &str, body: &str) -> Result<(), Failure> {
        std::fs::create_dir_all(&self.out_dir).map_err(|e| {
            Failure::invalid("INVALID_INPUT", format!("cannot create output dir: {e}"))
        })?;
        let path = self.out_dir.join(name);
        std::fs::write(&path, body).map_err(|e| {
            Failure::invalid("INVALID_INPUT", format!("cannot write {}: {e}", path.display()))
        })
    }

    fn write_summary<T: Serialize>(&self, name: &str, command: &str, summary: T) -> Result<(), Failure> {
        if !self.write_json {
            return Ok(());
        }
        let payload = RunSummary {
            command: command.to_string(),
            seed: self.seed,
            summary,
            resolved_config: self.config.to_toml(),
        };
        let body = serde_json::to_string_pretty(&payload).expect("summary serialises");
        self.write(name, &body)
    }
}

/// Envelope for every JSON summary: embeds the fully-resolved config so the
/// run can be reproduced from its own output.
#[derive(Serialize)]
struct RunSummary<T: Serialize> {
    command: String,
    seed: u64,
    summary: T,
    resolved_config: String,
}

pub fn cmd_solve(ctx: &CommandContext) -> Result<(), Failure> {
    let lat = ctx.lattice()?;
    let driver = ctx.config.build_driver(&lat)?;
    let obstacle = ctx.config.build_obstacle(&lat, ctx.obstacle_seed())?;
    let sol = solve_rbsde(&lat, &obstacle, &driver)?;
    let skorokhod = verify_skorokhod(&lat, &sol, &obstacle);
    let residual = reconstruct(&lat, &sol, &obstacle, &driver);
    if ctx.write_csv {
        ctx.write("solution.csv", &report::solution_csv(&lat, &sol, &obstacle))?;
    }
    let summary = report::solution_summary(&lat, &sol, &skorokhod, residual);
    println!("y0 = {}", summary.y0);
    ctx.write_summary("summary.json", "solve", summary)?;
    Ok(())
}

#[derive(Serialize)]
struct OracleInstanceRow {
    instance: usize,
    y0: f64,
    oracle_value: f64,
    strict_value: f64,
    gap: f64,
    strict_gap: f64,
}

#[derive(Serialize)]
struct OracleBatchSummary {
    instances: usize,
    max_gap: f64,
    max_strict_gap: f64,
    tolerance: f64,
    all_within: bool,
    rule_count: String,
    argmax_rule_id: String,
    argmax_rule_nodes: Vec<String>,
}

pub fn cmd_oracle(ctx: &CommandContext, corrupt_solver: Option<f64>) -> Result<(), Failure> {
    let lat = ctx.lattice()?;
    let driver = ctx.config.build_driver(&lat)?;
    let batch = ctx.config.oracle.map(|o| o.instances).unwrap_or(1).max(1);
    let generator_mode = ctx.config.obstacle.source == "generator";
    if batch > 1 && !generator_mode {
        return Err(Failure::invalid(
            "INVALID_INPUT",
            "oracle batches require a generator obstacle",
        ));
    }
    let mut gen = InstanceGenerator::new(
        ctx.obstacle_seed().or(ctx.config.obstacle.seed).unwrap_or(ctx.seed),
    );
    let mut rows = Vec::with_capacity(batch);
    let mut last: Option<(Obstacle, Driver)> = None;
    for instance in 0..batch {
        let obstacle = if generator_mode {
            gen.obstacle(&lat)
        } else {
            ctx.config.build_obstacle(&lat, ctx.obstacle_seed())?
        };
        let sol = solve_rbsde(&lat, &obstacle, &driver)?;
        let y0 = sol.root_value() + corrupt_solver.unwrap_or(0.0);
        let y0_post = sol.y.value(NodeId::post(0, 0));
        let oracle =
            stopping::oracle_at_node(&lat, &obstacle, &driver, NodeId::root(), 3)?;
        rows.push(OracleInstanceRow {
            instance,
            y0,
            oracle_value: oracle.value,
            strict_value: oracle.strict_value,
            gap: (y0 - oracle.value).abs(),
            strict_gap: (y0_post - oracle.strict_value).abs(),
        });
        last = Some((obstacle, driver.clone()));
    }
    let max_gap = rows.iter().map(|r| r.gap).fold(0.0, f64::max);
    let max_strict_gap = rows.iter().map(|r| r.strict_gap).fold(0.0, f64::max);
    let all_within = max_gap <= 1e-10 && max_strict_gap <= 1e-10;

    // Single-instance runs over small rule spaces additionally publish the
    // per-rule table and the argmax rule's stop set.
    let (obstacle, driver) = last.expect("batch >= 1");
    let oracle = stopping::oracle_at_node(&lat, &obstacle, &driver, NodeId::root(), 3)?;
    let mut argmax_nodes = Vec::new();
    if batch == 1 && oracle.rule_count <= 1000 {
        let table = stopping::rule_values_by_enumeration(&lat, &obstacle, &driver, 3)?;
        if ctx.write_csv {
            ctx.write("oracle.csv", &report::oracle_csv(&lat, &table))?;
        }
        let best = &table[oracle.best_index as usize].0;
        argmax_nodes =
            best.first_hit_nodes(&lat).iter().map(|n| n.id_string()).collect();
    }
    if ctx.write_csv && batch > 1 {
        let mut csv = String::from("instance,y0,oracle_value,strict_value,gap,strict_gap\n");
        for r in &rows {
            csv.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.instance, r.y0, r.oracle_value, r.strict_value, r.gap, r.strict_gap
            ));
        }
        ctx.write("oracle_batch.csv", &csv)?;
    }
    let summary = OracleBatchSummary {
        instances: batch,
        max_gap,
        max_strict_gap,
        tolerance: 1e-10,
        all_within,
        rule_count: oracle.rule_count.to_string(),
        argmax_rule_id: oracle.best_index.to_string(),
        argmax_rule_nodes: argmax_nodes,
    };
    println!(
        "oracle: {} instance(s), max gap {max_gap:.3e}, max strict gap {max_strict_gap:.3e}",
        batch
    );
    ctx.write_summary("oracle_summary.json", "oracle", summary)?;
    if !all_within {
        return Err(Failure::numerical(
            "ORACLE_GAP",
            format!("oracle gap {max_gap:.3e} exceeds 1e-10"),
        ));
    }
    Ok(())
}

#[derive(Serialize, Clone)]
struct RefinementRow {
    num_steps: usize,
    u0: f64,
    shortfall: f64,
    shortfall_bound: f64,
}

#[derive(Serialize)]
struct PriceSummary {
    #[serde(flatten)]
    pricing: report::PricingSummary,
    refinement: Vec<RefinementRow>,
}

pub fn cmd_price(ctx: &CommandContext) -> Result<(), Failure> {
    let model = ctx
        .config
        .market_model()
        .ok_or_else(|| Failure::invalid("INVALID_INPUT", "price requires a [market] section"))?;
    let payoff = ctx.config.payoff_spec()?;
    let imperfection = match ctx.config.driver.name.as_str() {
        "perfect_market" => Imperfection::Perfect,
        "borrow_rate" => Imperfection::BorrowRate {
            rate: ctx
                .config
                .driver
                .rate
                .ok_or_else(|| Failure::invalid("INVALID_INPUT", "borrow_rate requires rate"))?,
        },
        "custom" => Imperfection::Custom {
            expression: ctx.config.driver.expression.clone().unwrap_or_default(),
            lipschitz: ctx.config.driver.lipschitz.unwrap_or(0.0),
        },
        other => {
            return Err(Failure::invalid(
                "INVALID_INPUT",
                format!("price requires a market driver (perfect_market, borrow_rate, custom), got {other:?}"),
            ))
        }
    };

    let base_spec = ctx.config.grid_spec();
    let refine = ctx.config.price.map(|p| p.refine).unwrap_or(0);
    let mut refinement = Vec::new();
    let mut emitted = false;
    for doubling in 0..=refine {
        let spec = GridSpec {
            num_steps: base_spec.num_steps << doubling,
            ..base_spec
        };
        let lat = Lattice::build(spec)?;
        let out = snell_core::market::price_american(&lat, &model, &payoff, &imperfection)?;
        let hedge = snell_core::market::superhedging_strategy(
            &lat,
            &model,
            &out.solution,
            &out.obstacle,
            &out.driver,
        )?;
        refinement.push(RefinementRow {
            num_steps: spec.num_steps,
            u0: out.u0,
            shortfall: hedge.max_shortfall,
            shortfall_bound: hedge.shortfall_bound,
        });
        if !emitted {
            emitted = true;
            // Exercise region: first hit of {Y = ξ} (no regularity gate).
            let start = StoppingRule::at_root(&lat);
            let (exercise, _) = stopping::epsilon_optimal_rule(
                &lat,
                &out.solution,
                &out.obstacle,
                &start,
                1e-10,
            );
            if ctx.write_csv {
                ctx.write(
                    "pricing.csv",
                    &report::pricing_csv(&lat, &out.solution, &out.obstacle, &out.assets, &hedge),
                )?;
            }
            let pricing =
                report::pricing_summary(&lat, &out.solution, &hedge, Some(&exercise));
            println!("u0 = {}", pricing.u0);
            // Summary written after the refinement loop completes.
            if refine == 0 {
                ctx.write_summary(
                    "pricing_summary.json",
                    "price",
                    PriceSummary { pricing, refinement: refinement.clone() },
                )?;
                return Ok(());
            }
        }
    }
    // Re-price the base grid for the summary block (kept out of the loop to
    // avoid holding every solution at once).
    let lat = Lattice::build(base_spec)?;
    let out = snell_core::market::price_american(&lat, &model, &payoff, &imperfection)?;
    let hedge = snell_core::market::superhedging_strategy(
        &lat,
        &model,
        &out.solution,
        &out.obstacle,
        &out.driver,
    )?;
    let start = StoppingRule::at_root(&lat);
    let (exercise, _) =
        stopping::epsilon_optimal_rule(&lat, &out.solution, &out.obstacle, &start, 1e-10);
    let pricing = report::pricing_summary(&lat, &out.solution, &hedge, Some(&exercise));
    let monotone = refinement.windows(2).all(|w| w[1].shortfall <= w[0].shortfall + 1e-12);
    ctx.write_summary(
        "pricing_summary.json",
        "price",
        PriceSummary { pricing, refinement },
    )?;
    if !monotone {
        return Err(Failure::numerical(
            "SHORTFALL_NOT_DECREASING",
            "superhedge shortfall increased under refinement",
        ));
    }
    Ok(())
}

#[derive(Serialize)]
struct VerifySummary {
    results: Vec<checks::CheckResult>,
    all_passed: bool,
}

pub fn cmd_verify(ctx: &CommandContext, cli_checks: &[String]) -> Result<(), Failure> {
    let mut requested: Vec<(String, Option<usize>)> = if !cli_checks.is_empty() {
        cli_checks.iter().map(|n| (n.clone(), None)).collect()
    } else if !ctx.config.checks.is_empty() {
        ctx.config
            .checks
            .iter()
            .map(|c| (c.name.clone(), c.instances))
            .collect()
    } else {
        checks::CHECK_NAMES.iter().map(|n| (n.to_string(), None)).collect()
    };
    // Validate names before running anything.
    for (name, _) in &requested {
        if !checks::CHECK_NAMES.contains(&name.as_str()) {
            return Err(Failure::invalid("UNKNOWN_CHECK", format!("unknown check {name:?}")));
        }
    }
    let mut results = Vec::new();
    for (name, instances) in requested.drain(..) {
        let result = checks::run_named_check_sized(&name, ctx.seed, instances)?;
        println!(
            "{} {}: {} ({} instances, {} failures)",
            if result.passed { "PASS" } else { "FAIL" },
            result.name,
            result.detail,
            result.instances,
            result.failures
        );
        results.push(result);
    }
    let all_passed = results.iter().all(|r| r.passed);
    let failed: Vec<String> =
        results.iter().filter(|r| !r.passed).map(|r| r.name.clone()).collect();
    ctx.write_summary("verify_summary.json", "verify", VerifySummary { results, all_passed })?;
    if !all_passed {
        return Err(Failure::numerical(
            "CHECKS_FAILED",
            format!("failed checks: {}", failed.join(", ")),
        ));
    }
    Ok(())
}
