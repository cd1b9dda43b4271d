//! Run configuration: a single TOML file with nested sections.
//!
//! Numeric literals are parsed as decimal and stored as binary floating
//! point (the only lossy step in the pipeline). The fully-resolved config is
//! embedded in every summary so a run can be reproduced from its output.

use serde::{Deserialize, Serialize};
use snell_core::bsde::Driver;
use snell_core::error::Error;
use snell_core::lattice::{AdaptedProcess, GridSpec, Lattice, NodeId};
use snell_core::market::{
    Imperfection, MarketModel, PayoffKind, PayoffSpec, StepCoefficients,
};
use snell_core::rbsde::Obstacle;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub grid: GridSection,
    pub driver: DriverSection,
    pub obstacle: ObstacleSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payoff: Option<PayoffSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub market: Option<MarketSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub price: Option<PriceSection>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub checks: Vec<CheckSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<OutputSection>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GridSection {
    pub num_steps: usize,
    pub horizon: f64,
    pub intensity: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DriverSection {
    /// One of `zero`, `linear`, `perfect_market`, `borrow_rate`, `custom`.
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expression: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lipschitz: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObstacleSection {
    /// One of `inline`, `payoff`, `generator`.
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nodes: Option<Vec<NodeValue>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeValue {
    pub id: String,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PayoffSection {
    /// One of `digital_call`, `digital_put`, `vanilla_call`, `vanilla_put`,
    /// `custom`.
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strike: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expression: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub post_kind: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub post_strike: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub post_expression: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarketSection {
    pub r: f64,
    pub mu: [f64; 2],
    pub sigma: [f64; 2],
    pub beta_jump: [f64; 2],
    pub s0: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<Vec<StepCoefficients>>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OracleSection {
    #[serde(default = "one")]
    pub instances: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PriceSection {
    /// Number of step-count doublings for the refinement sweep.
    #[serde(default)]
    pub refine: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckSection {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instances: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutputSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub formats: Option<String>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig, Error> {
        let config: RunConfig = toml::from_str(text)
            .map_err(|e| Error::InvalidInput(format!("config parse error: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<(), Error> {
        match self.obstacle.source.as_str() {
            "inline" => {
                if self.obstacle.nodes.is_none() {
                    return Err(Error::InvalidInput(
                        "inline obstacle requires a node table".into(),
                    ));
                }
            }
            "payoff" => {
                if self.payoff.is_none() || self.market.is_none() {
                    return Err(Error::InvalidInput(
                        "payoff obstacle requires [payoff] and [market] sections".into(),
                    ));
                }
            }
            "generator" => {
                if self.obstacle.seed.is_none() {
                    return Err(Error::InvalidInput(
                        "generator obstacle requires an explicit seed".into(),
                    ));
                }
            }
            other => {
                return Err(Error::InvalidInput(format!(
                    "unknown obstacle source {other:?} (expected inline, payoff, or generator)"
                )))
            }
        }
        match self.driver.name.as_str() {
            "zero" => {}
            "linear" => {
                if self.driver.r.is_none() {
                    return Err(Error::InvalidInput("linear driver requires r".into()));
                }
            }
            "perfect_market" => {
                if self.market.is_none() {
                    return Err(Error::InvalidInput(
                        "perfect_market driver requires a [market] section".into(),
                    ));
                }
            }
            "borrow_rate" => {
                if self.market.is_none() || self.driver.rate.is_none() {
                    return Err(Error::InvalidInput(
                        "borrow_rate driver requires a [market] section and rate".into(),
                    ));
                }
            }
            "custom" => {
                if self.driver.expression.is_none() || self.driver.lipschitz.is_none() {
                    return Err(Error::InvalidInput(
                        "custom driver requires expression and lipschitz".into(),
                    ));
                }
            }
            other => {
                return Err(Error::InvalidInput(format!(
                    "unknown driver {other:?} (expected zero, linear, perfect_market, borrow_rate, or custom)"
                )))
            }
        }
        Ok(())
    }

    pub fn grid_spec(&self) -> GridSpec {
        GridSpec {
            num_steps: self.grid.num_steps,
            horizon: self.grid.horizon,
            intensity: self.grid.intensity,
        }
    }

    pub fn market_model(&self) -> Option<MarketModel> {
        self.market.as_ref().map(|m| MarketModel {
            r: m.r,
            mu: m.mu,
            sigma: m.sigma,
            beta_jump: m.beta_jump,
            intensity: self.grid.intensity,
            s0: m.s0,
            schedule: m.schedule.clone(),
        })
    }

    pub fn build_driver(&self, lat: &Lattice) -> Result<Driver, Error> {
        let driver = match self.driver.name.as_str() {
            "zero" => Driver::zero(),
            "linear" => Driver::linear(self.driver.r.expect("validated")),
            "perfect_market" => {
                let model = self.market_model().expect("validated");
                snell_core::market::market_driver(lat, &model, &Imperfection::Perfect)?
            }
            "borrow_rate" => {
                let model = self.market_model().expect("validated");
                snell_core::market::market_driver(
                    lat,
                    &model,
                    &Imperfection::BorrowRate { rate: self.driver.rate.expect("validated") },
                )?
            }
            "custom" => Driver::custom(
                self.driver.expression.as_deref().expect("validated"),
                self.driver.lipschitz.expect("validated"),
            )?,
            _ => unreachable!("validated"),
        };
        if driver.lipschitz * lat.dt() >= 1.0 {
            return Err(Error::NoContraction { lipschitz: driver.lipschitz, dt: lat.dt() });
        }
        Ok(driver)
    }

    pub fn payoff_spec(&self) -> Result<PayoffSpec, Error> {
        let section = self
            .payoff
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("missing [payoff] section".into()))?;
        let kind = parse_payoff_kind(&section.kind, section.strike, section.expression.as_deref())?;
        let post_kind = match &section.post_kind {
            Some(name) => Some(parse_payoff_kind(
                name,
                section.post_strike,
                section.post_expression.as_deref(),
            )?),
            None => None,
        };
        Ok(PayoffSpec { kind, post_kind })
    }

    /// Materialises the obstacle; `seed_override` (from `--seed`) wins over
    /// the config seed for generator obstacles.
    pub fn build_obstacle(
        &self,
        lat: &Lattice,
        seed_override: Option<u64>,
    ) -> Result<Obstacle, Error> {
        match self.obstacle.source.as_str() {
            "inline" => {
                let nodes = self.obstacle.nodes.as_ref().expect("validated");
                let mut values = AdaptedProcess::from_fn(lat, |_| f64::NAN);
                for entry in nodes {
                    if !entry.value.is_finite() {
                        return Err(Error::InvalidInput(format!(
                            "non-finite obstacle value at node {}",
                            entry.id
                        )));
                    }
                    let node = NodeId::parse(&entry.id)?;
                    if node.step > lat.num_steps()
                        || node.path >= lat.layer_width(node.step)
                        || (node.step == lat.num_steps()
                            && node.phase == snell_core::lattice::Phase::Post)
                    {
                        return Err(Error::InvalidInput(format!(
                            "node id {} outside the lattice",
                            entry.id
                        )));
                    }
                    values.set(node, entry.value);
                }
                for node in lat.node_ids() {
                    if values.value(node).is_nan() {
                        return Err(Error::InvalidInput(format!(
                            "inline obstacle missing node {}",
                            node.id_string()
                        )));
                    }
                }
                Ok(Obstacle::new(values))
            }
            "payoff" => {
                let model = self.market_model().expect("validated");
                let assets = snell_core::market::simulate_assets(lat, &model)?;
                snell_core::market::build_obstacle(lat, &assets, &self.payoff_spec()?)
            }
            "generator" => {
                let seed = seed_override
                    .or(self.obstacle.seed)
                    .expect("validated: generator has a seed");
                let mut gen = snell_core::generate::InstanceGenerator::new(seed);
                Ok(gen.obstacle(lat))
            }
            _ => unreachable!("validated"),
        }
    }
}

fn parse_payoff_kind(
    name: &str,
    strike: Option<f64>,
    expression: Option<&str>,
) -> Result<PayoffKind, Error> {
    let need_strike = || {
        strike.ok_or_else(|| Error::InvalidInput(format!("payoff {name:?} requires a strike")))
    };
    Ok(match name {
        "digital_call" => PayoffKind::DigitalCall { strike: need_strike()? },
        "digital_put" => PayoffKind::DigitalPut { strike: need_strike()? },
        "vanilla_call" => PayoffKind::VanillaCall { strike: need_strike()? },
        "vanilla_put" => PayoffKind::VanillaPut { strike: need_strike()? },
        "custom" => PayoffKind::Custom {
            expression: expression
                .ok_or_else(|| {
                    Error::InvalidInput("custom payoff requires an expression".into())
                })?
                .to_string(),
        },
        other => {
            return Err(Error::InvalidInput(format!(
                "unknown payoff kind {other:?}"
            )))
        }
    })
}
