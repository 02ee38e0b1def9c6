//! Scenario description: everything needed to reproduce a run.
//!
//! Scenarios are JSON documents; unknown keys are rejected. Four presets
//! reproduce the platoon study settings (predecessor-following or
//! bidirectional topology, constant time headway or constant distance
//! spacing).

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{VehicleParams, VehicleState};
use crate::ocp::{CostWeights, NormKind};
use crate::solver::SolverSettings;
use crate::spacing::{SpacingPolicies, SpacingPolicy};
use crate::topology::{Generator, TopologyError, TopologyGraph};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid scenario: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid scenario: `{key}`: {reason}")]
    Invalid { key: String, reason: String },
    #[error("invalid topology: {0}")]
    Topology(#[from] TopologyError),
    #[error("unknown preset `{0}`; available: paper-pf-cth, paper-pf-cdh, paper-bd-cth, paper-bd-cdh")]
    UnknownPreset(String),
}

fn invalid(key: impl Into<String>, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TopologySpec {
    Named(Generator),
    Custom {
        #[serde(default)]
        generator: Option<Generator>,
        /// Extra `[j, i]` edges: vehicle `i` receives from `j`.
        #[serde(default)]
        edges: Vec<[usize; 2]>,
    },
}

impl TopologySpec {
    pub fn build(&self, n: usize) -> Result<TopologyGraph, TopologyError> {
        match self {
            TopologySpec::Named(g) => TopologyGraph::generate(*g, n),
            TopologySpec::Custom { generator, edges } => {
                let mut all: Vec<(usize, usize)> = generator.map(|g| g.edges(n)).unwrap_or_default();
                all.extend(edges.iter().map(|e| (e[0], e[1])));
                TopologyGraph::new(n, all)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TauSpec {
    /// Drawn uniformly from `[lo, hi]` with the scenario seed.
    Range([f64; 2]),
    /// One value per follower.
    Values(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum NeighborRule {
    /// `q_ij = q` on every incoming edge.
    Uniform { q: f64 },
    /// `q_ij = q / |I_i|`.
    Split { q: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsSpec {
    pub q_self: f64,
    pub r: f64,
    pub neighbor: NeighborRule,
    /// Overrides keyed `"i,j"` (weight of vehicle `i` on neighbor `j`).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub edges: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpacingSpec {
    pub delta_h: f64,
    pub delta_safe: f64,
    /// Defaults to vehicle 1 tracking the leader with zero gap.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_vehicle: Option<BTreeMap<usize, SpacingPolicy>>,
}

impl SpacingSpec {
    pub fn policies(&self) -> SpacingPolicies {
        let default = SpacingPolicy::cth(self.delta_h, self.delta_safe);
        match &self.per_vehicle {
            Some(map) => SpacingPolicies {
                default,
                per_vehicle: map.clone(),
            },
            None => SpacingPolicies::with_zero_first(default),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Segment {
    Constant { duration: f64 },
    Ramp { duration: f64, to: f64 },
}

impl Segment {
    pub fn duration(&self) -> f64 {
        match *self {
            Segment::Constant { duration } | Segment::Ramp { duration, .. } => duration,
        }
    }
}

/// Piecewise velocity profile of the virtual leader. The velocity is
/// continuous; after the last segment it is held.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeaderProfile {
    #[serde(default)]
    pub initial_position: f64,
    pub initial_velocity: f64,
    #[serde(default)]
    pub segments: Vec<Segment>,
}

impl LeaderProfile {
    pub fn constant(position: f64, velocity: f64) -> Self {
        Self {
            initial_position: position,
            initial_velocity: velocity,
            segments: Vec::new(),
        }
    }

    /// Position and velocity at time `t`, integrated exactly.
    pub fn state(&self, t: f64) -> (f64, f64) {
        let mut p = self.initial_position;
        let mut v = self.initial_velocity;
        let mut start = 0.0;
        for seg in &self.segments {
            let d = seg.duration();
            let tau = (t - start).clamp(0.0, d);
            match *seg {
                Segment::Constant { .. } => p += v * tau,
                Segment::Ramp { to, .. } => {
                    let slope = if d > 0.0 { (to - v) / d } else { 0.0 };
                    p += v * tau + 0.5 * slope * tau * tau;
                    if t >= start + d {
                        v = to;
                    } else {
                        return (p, v + slope * tau);
                    }
                }
            }
            if t < start + d {
                return (p, v);
            }
            start += d;
        }
        (p + v * (t - start), v)
    }

    pub fn velocity(&self, t: f64) -> f64 {
        self.state(t).1
    }

    fn validate(&self) -> Result<(), ConfigError> {
        if !(self.initial_position.is_finite() && self.initial_velocity.is_finite()) {
            return Err(invalid("leader", "initial state must be finite"));
        }
        for (k, seg) in self.segments.iter().enumerate() {
            let ok = seg.duration().is_finite()
                && seg.duration() >= 0.0
                && match *seg {
                    Segment::Ramp { to, .. } => to.is_finite(),
                    Segment::Constant { .. } => true,
                };
            if !ok {
                return Err(invalid(
                    format!("leader.segments[{k}]"),
                    "duration must be >= 0 and values finite",
                ));
            }
        }
        Ok(())
    }
}

/// Velocity of the leader at time `t`.
pub fn leader_velocity(profile: &LeaderProfile, t: f64) -> f64 {
    profile.velocity(t)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSpec {
    /// Common initial speed; defaults to the leader's.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub velocity: Option<f64>,
    /// Offsets from the desired position, keyed by vehicle.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub position_offsets: BTreeMap<usize, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub velocity_offsets: BTreeMap<usize, f64>,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub name: String,
    /// Number of followers.
    pub n: usize,
    pub dt: f64,
    pub horizon: usize,
    /// Simulated time in seconds.
    pub duration: f64,
    pub tau: TauSpec,
    #[serde(default)]
    pub seed: u64,
    pub input_bounds: [f64; 2],
    pub topology: TopologySpec,
    pub spacing: SpacingSpec,
    pub weights: WeightsSpec,
    #[serde(default)]
    pub norm: NormKind,
    pub leader: LeaderProfile,
    #[serde(default)]
    pub initial: InitialSpec,
    #[serde(default)]
    pub solver: SolverSettings,
    #[serde(default)]
    pub soft_terminal: bool,
    #[serde(default = "default_true")]
    pub lyapunov_monitor: bool,
}

/// A validated scenario with every per-vehicle quantity materialized.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub graph: TopologyGraph,
    /// `params[i - 1]` for vehicle `i`.
    pub params: Vec<VehicleParams>,
    pub weights: Vec<CostWeights>,
    pub spacing: SpacingPolicies,
    pub initial_states: Vec<VehicleState>,
    pub steps: usize,
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    /// Built-in preset by name, with `n` followers.
    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        let text = match name {
            "paper-pf-cth" => include_str!("../presets/paper-pf-cth.json"),
            "paper-pf-cdh" => include_str!("../presets/paper-pf-cdh.json"),
            "paper-bd-cth" => include_str!("../presets/paper-bd-cth.json"),
            "paper-bd-cdh" => include_str!("../presets/paper-bd-cdh.json"),
            _ => return Err(ConfigError::UnknownPreset(name.to_string())),
        };
        Self::from_json(text)
    }

    pub fn preset_names() -> &'static [&'static str] {
        &["paper-pf-cth", "paper-pf-cdh", "paper-bd-cth", "paper-bd-cdh"]
    }

    pub fn taus(&self) -> Result<Vec<f64>, ConfigError> {
        match &self.tau {
            TauSpec::Range([lo, hi]) => {
                if !(lo.is_finite() && hi.is_finite() && *lo > 0.0 && lo <= hi) {
                    return Err(invalid("tau.range", "need 0 < lo <= hi"));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                Ok((0..self.n)
                    .map(|_| if lo == hi { *lo } else { rng.gen_range(*lo..=*hi) })
                    .collect())
            }
            TauSpec::Values(v) => {
                if v.len() < self.n {
                    return Err(invalid(
                        "tau.values",
                        format!("{} values for {} followers", v.len(), self.n),
                    ));
                }
                Ok(v[..self.n].to_vec())
            }
        }
    }

    pub fn steps(&self) -> usize {
        (self.duration / self.dt).round() as usize
    }

    /// Validates the scenario and materializes per-vehicle data.
    pub fn resolve(&self) -> Result<Scenario, ConfigError> {
        let n = self.n;
        if n == 0 {
            return Err(invalid("n", "need at least one follower"));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(invalid("dt", "must be positive"));
        }
        if self.horizon == 0 {
            return Err(invalid("horizon", "must be positive"));
        }
        if !(self.duration.is_finite() && self.duration >= 0.0) {
            return Err(invalid("duration", "must be >= 0"));
        }
        self.leader.validate()?;
        self.solver.validate().map_err(|e| invalid("solver", e.to_string()))?;

        let graph = self.graph()?;
        graph
            .validate_connectivity()
            .map_err(|v| ConfigError::Topology(TopologyError::Connectivity(v)))?;

        let [u_min, u_max] = self.input_bounds;
        let params = self
            .taus()?
            .into_iter()
            .enumerate()
            .map(|(k, tau)| {
                VehicleParams::new(tau, u_min, u_max).map_err(|e| invalid(format!("vehicle {}", k + 1), e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        for (k, p) in params.iter().enumerate() {
            if self.dt >= p.tau {
                log::warn!("vehicle {}: dt = {} is not below tau = {}", k + 1, self.dt, p.tau);
            }
        }

        let spacing = self.spacing.policies();
        spacing.validate(n).map_err(|e| invalid("spacing", e.to_string()))?;
        let weights = self.cost_weights(&graph)?;

        let v0 = self.initial.velocity.unwrap_or(self.leader.initial_velocity);
        for (key, map) in [
            ("initial.position_offsets", &self.initial.position_offsets),
            ("initial.velocity_offsets", &self.initial.velocity_offsets),
        ] {
            if let Some(&bad) = map.keys().find(|&&i| i == 0 || i > n) {
                return Err(invalid(
                    format!("{key}.{bad}"),
                    format!("no follower {bad} in a platoon of {n}"),
                ));
            }
        }
        let initial_states = (1..=n)
            .map(|i| {
                let p = self.leader.initial_position - spacing.leader_offset(i, v0)
                    + self.initial.position_offsets.get(&i).copied().unwrap_or(0.0);
                let v = v0 + self.initial.velocity_offsets.get(&i).copied().unwrap_or(0.0);
                VehicleState::new(p, v, 0.0)
            })
            .collect();
        Ok(Scenario {
            config: self.clone(),
            graph,
            params,
            weights,
            spacing,
            initial_states,
            steps: self.steps(),
        })
    }

    /// Topology without the connectivity check.
    pub fn graph(&self) -> Result<TopologyGraph, ConfigError> {
        if self.n == 0 {
            return Err(invalid("n", "need at least one follower"));
        }
        Ok(self.topology.build(self.n)?)
    }

    /// Per-vehicle weights (`[i - 1]` for vehicle `i`) for `graph`.
    pub fn cost_weights(&self, graph: &TopologyGraph) -> Result<Vec<CostWeights>, ConfigError> {
        let w = &self.weights;
        let positive = |key: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(invalid(key, format!("must be positive, got {v}")))
            }
        };
        positive("weights.q_self", w.q_self)?;
        positive("weights.r", w.r)?;
        let mut out: Vec<CostWeights> = (1..=graph.n_followers())
            .map(|i| {
                let info = graph.info_set(i);
                let q = match w.neighbor {
                    NeighborRule::Uniform { q } => q,
                    NeighborRule::Split { q } => q / info.len() as f64,
                };
                CostWeights {
                    q_self: w.q_self,
                    q_neighbor: info.into_iter().map(|j| (j, q)).collect(),
                    r: w.r,
                    norm: self.norm,
                }
            })
            .collect();
        for (key, &q) in &w.edges {
            let full = format!("weights.edges.\"{key}\"");
            let parsed = key
                .split(',')
                .map(|s| s.trim().parse::<usize>())
                .collect::<Result<Vec<_>, _>>();
            let (i, j) = match parsed.as_deref() {
                Ok([i, j]) => (*i, *j),
                _ => return Err(invalid(full, "expected a key of the form \"i,j\"")),
            };
            if i == 0 || i > graph.n_followers() || !graph.has_edge(j, i) {
                return Err(invalid(full, format!("no edge: vehicle {i} does not receive from {j}")));
            }
            positive(&full, q)?;
            out[i - 1].q_neighbor.insert(j, q);
        }
        if let Some(bad) = out
            .iter()
            .flat_map(|c| c.q_neighbor.values())
            .find(|q| !(q.is_finite() && **q > 0.0))
        {
            return Err(invalid("weights.neighbor", format!("must be positive, got {bad}")));
        }
        Ok(out)
    }
}
