//! Discrete-time epidemic simulator and the statistical analyses of proof
//! repair.

pub mod analysis;
mod epidemic;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par::Execution;

pub use analysis::{
    lc_fail_monte_carlo, lc_fail_probability, max_missable, run_direct_repair_analysis, DirectRepairStats,
    LcEstimate,
};
pub use epidemic::run_epidemic_sim;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("invalid parameter: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    pub node_count: usize,
    pub weeks: u32,
    pub missing_share: f64,
    pub cacher_share: f64,
    pub clvl: u8,
    /// Meetings each node starts per hour.
    pub encounters_per_node_per_hour: u32,
    pub daily_revocation_rate: f64,
    pub weekly_issue_rate: f64,
    pub give_up_threshold: u32,
    pub rng_seed: u64,
    /// Only affects how the CA builds trees, never the results.
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            node_count: 10_000,
            weeks: 4,
            missing_share: 0.10,
            cacher_share: 0.10,
            clvl: 7,
            encounters_per_node_per_hour: 5,
            daily_revocation_rate: 0.00028,
            weekly_issue_rate: 0.001,
            give_up_threshold: 30,
            rng_seed: 1,
            execution: Execution::default(),
        }
    }
}

impl SimParams {
    pub fn validate(&self) -> Result<(), SimError> {
        let share = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(SimError::Invalid(format!("{name} must lie in [0, 1], got {v}")))
            }
        };
        share("missing_share", self.missing_share)?;
        share("cacher_share", self.cacher_share)?;
        share("daily_revocation_rate", self.daily_revocation_rate)?;
        share("weekly_issue_rate", self.weekly_issue_rate)?;
        if self.node_count < 100 {
            return Err(SimError::Invalid(format!("node_count must be at least 100, got {}", self.node_count)));
        }
        if self.weeks == 0 {
            return Err(SimError::Invalid("weeks must be positive".into()));
        }
        if self.clvl == 0 || self.clvl > crate::repair::MAX_CACHE_LEVEL {
            return Err(SimError::Invalid(format!(
                "clvl must lie in 1..={}, got {}",
                crate::repair::MAX_CACHE_LEVEL,
                self.clvl
            )));
        }
        if self.give_up_threshold == 0 {
            return Err(SimError::Invalid("give_up_threshold must be positive".into()));
        }
        Ok(())
    }
}

/// Counters for one simulated day. The update sent at the end of the day
/// is included.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DayStats {
    pub day: u32,
    pub nodes: usize,
    pub encounters: u64,
    pub both_outdated_encounters: u64,
    pub episodes_started: u64,
    pub repaired: u64,
    pub gave_up: u64,
    pub resolved_by_update: u64,
    pub peer_bytes: u64,
    pub ca_fallback_bytes: u64,
    pub ca_update_bytes: u64,
    pub epoch_change_bytes: u64,
    /// Share of nodes whose forest is behind the CA, just before the
    /// day's update.
    pub stale_forest_share: f64,
    /// Share of certificate holders whose proof does not verify against the
    /// CA's roots, just before the day's update.
    pub outdated_poi_share: f64,
    /// Stale-forest share right after the day's updates went out.
    pub stale_after_update: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SimMetrics {
    /// Gave up and asked the CA, over all episodes that ended by a peer
    /// repair or by giving up.
    pub failed_repair_share: f64,
    /// Fresh peers met per episode, the repairing one included, over
    /// episodes repaired by peers.
    pub avg_meets_until_repair: f64,
    /// Encounters where both nodes hold a certificate and neither proof
    /// matches the CA's current roots.
    pub both_outdated_encounter_share: f64,
    /// Node-to-node bytes per node per week.
    pub node_weekly_exchange_bytes: f64,
    pub ca_daily_update_bytes: f64,
    pub epoch_change_bytes: f64,

    pub encounters: u64,
    pub episodes_started: u64,
    pub repaired: u64,
    pub repaired_direct: u64,
    pub repaired_lc: u64,
    pub gave_up: u64,
    pub resolved_by_update: u64,
    pub abandoned: u64,
    pub ca_fallback_requests: u64,
    pub ca_fallback_bytes: u64,
    pub final_nodes: usize,

    pub days: Vec<DayStats>,
    /// Stale-forest share at the end of every hour.
    pub hourly_stale_forest_share: Vec<f64>,
}

impl SimMetrics {
    pub const CSV_HEADER: &'static [&'static str] = &[
        "failed_repair_share",
        "avg_meets_until_repair",
        "both_outdated_encounter_share",
        "node_weekly_exchange_bytes",
        "ca_daily_update_bytes",
        "epoch_change_bytes",
        "encounters",
        "episodes_started",
        "repaired",
        "repaired_direct",
        "repaired_lc",
        "gave_up",
        "resolved_by_update",
        "abandoned",
        "ca_fallback_requests",
        "ca_fallback_bytes",
        "final_nodes",
    ];

    pub fn csv_row(&self) -> Vec<String> {
        vec![
            format!("{:.6}", self.failed_repair_share),
            format!("{:.4}", self.avg_meets_until_repair),
            format!("{:.6}", self.both_outdated_encounter_share),
            format!("{:.1}", self.node_weekly_exchange_bytes),
            format!("{:.1}", self.ca_daily_update_bytes),
            format!("{:.1}", self.epoch_change_bytes),
            self.encounters.to_string(),
            self.episodes_started.to_string(),
            self.repaired.to_string(),
            self.repaired_direct.to_string(),
            self.repaired_lc.to_string(),
            self.gave_up.to_string(),
            self.resolved_by_update.to_string(),
            self.abandoned.to_string(),
            self.ca_fallback_requests.to_string(),
            self.ca_fallback_bytes.to_string(),
            self.final_nodes.to_string(),
        ]
    }
}
