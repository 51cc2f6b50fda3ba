//! Benchmark reports: per-trial records plus aggregates that are always
//! recomputable from the records. Serialized reports carry no wall-clock
//! data, so a fixed seed yields byte-identical JSON.

use serde::{Deserialize, Serialize};

use crate::numerics::RngStream;

pub const REPORT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub seed: u64,
    pub planner: String,
    pub success: bool,
    /// Path length of the solution; absent on failure.
    pub path_length: Option<f64>,
    pub proposed: usize,
    pub valid: usize,
    /// Wall time is tracked (for wall-budget comparisons) but never
    /// serialized; reports must be byte-deterministic.
    #[serde(skip)]
    pub wall: std::time::Duration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerAggregate {
    pub planner: String,
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
    /// Bootstrap standard deviation of the success rate (1000 seeded
    /// resamples).
    pub success_rate_std: f64,
    /// Mean path length over successful trials only; null when none.
    pub mean_path_length: Option<f64>,
    /// Standard error of the successful-path mean; null when fewer than two.
    pub path_length_stderr: Option<f64>,
    /// Pooled valid / proposed over all trials.
    pub valid_move_proportion: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub version: u32,
    pub experiment: String,
    pub config: serde_json::Value,
    pub trials: Vec<TrialRecord>,
    pub aggregates: Vec<PlannerAggregate>,
}

const BOOTSTRAP_RESAMPLES: usize = 1000;

/// Aggregate one planner's records; `bootstrap_seed` drives the resampling.
pub fn aggregate(planner: &str, records: &[&TrialRecord], bootstrap_seed: u64) -> PlannerAggregate {
    let n = records.len();
    let successes = records.iter().filter(|r| r.success).count();
    let success_rate = successes as f64 / n.max(1) as f64;

    let mut rng = RngStream::new(bootstrap_seed, 0xB007);
    let mut acc = 0.0;
    let mut acc2 = 0.0;
    for _ in 0..BOOTSTRAP_RESAMPLES {
        let mut hits = 0usize;
        for _ in 0..n {
            if records[rng.uniform_usize(n)].success {
                hits += 1;
            }
        }
        let rate = hits as f64 / n as f64;
        acc += rate;
        acc2 += rate * rate;
    }
    let mean = acc / BOOTSTRAP_RESAMPLES as f64;
    let success_rate_std = (acc2 / BOOTSTRAP_RESAMPLES as f64 - mean * mean)
        .max(0.0)
        .sqrt();

    let lengths: Vec<f64> = records
        .iter()
        .filter_map(|r| if r.success { r.path_length } else { None })
        .collect();
    let (mean_path_length, path_length_stderr) = if lengths.is_empty() {
        (None, None)
    } else {
        let m = lengths.iter().sum::<f64>() / lengths.len() as f64;
        let stderr = if lengths.len() >= 2 {
            let var =
                lengths.iter().map(|l| (l - m) * (l - m)).sum::<f64>() / (lengths.len() - 1) as f64;
            Some((var / lengths.len() as f64).sqrt())
        } else {
            None
        };
        (Some(m), stderr)
    };

    let proposed: usize = records.iter().map(|r| r.proposed).sum();
    let valid: usize = records.iter().map(|r| r.valid).sum();
    PlannerAggregate {
        planner: planner.to_string(),
        trials: n,
        successes,
        success_rate,
        success_rate_std,
        mean_path_length,
        path_length_stderr,
        valid_move_proportion: valid as f64 / proposed.max(1) as f64,
    }
}

impl BenchmarkReport {
    /// Build a report: records are sorted by (planner order of first
    /// appearance, trial id) and aggregated per planner.
    pub fn build(
        experiment: &str,
        config: serde_json::Value,
        mut trials: Vec<TrialRecord>,
        bootstrap_seed: u64,
    ) -> Self {
        trials.sort_by(|a, b| (&a.planner, a.trial).cmp(&(&b.planner, b.trial)));
        let mut planners: Vec<String> = Vec::new();
        for t in &trials {
            if !planners.contains(&t.planner) {
                planners.push(t.planner.clone());
            }
        }
        let aggregates = planners
            .iter()
            .map(|p| {
                let records: Vec<&TrialRecord> =
                    trials.iter().filter(|t| &t.planner == p).collect();
                aggregate(p, &records, bootstrap_seed)
            })
            .collect();
        Self {
            version: REPORT_FORMAT_VERSION,
            experiment: experiment.to_string(),
            config,
            trials,
            aggregates,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }

    pub fn aggregate_for(&self, planner: &str) -> Option<&PlannerAggregate> {
        self.aggregates.iter().find(|a| a.planner == planner)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(trial: usize, planner: &str, success: bool, len: f64) -> TrialRecord {
        TrialRecord {
            trial,
            seed: trial as u64,
            planner: planner.into(),
            success,
            path_length: success.then_some(len),
            proposed: 100,
            valid: 60,
            wall: std::time::Duration::ZERO,
        }
    }

    #[test]
    fn aggregates_match_recomputation_from_records() {
        let trials: Vec<TrialRecord> = (0..40)
            .map(|i| record(i, "rrt_star", i % 4 == 0, 100.0 + i as f64))
            .collect();
        let report = BenchmarkReport::build("test", serde_json::json!({}), trials.clone(), 9);
        let agg = report.aggregate_for("rrt_star").unwrap();
        let successes = trials.iter().filter(|t| t.success).count();
        assert_eq!(agg.successes, successes);
        assert!((agg.success_rate - successes as f64 / 40.0).abs() < 1e-12);
        let lens: Vec<f64> = trials.iter().filter_map(|t| t.path_length).collect();
        let mean = lens.iter().sum::<f64>() / lens.len() as f64;
        assert!((agg.mean_path_length.unwrap() - mean).abs() < 1e-12);
        assert!((agg.valid_move_proportion - 0.6).abs() < 1e-12);
        assert!(agg.success_rate_std > 0.0 && agg.success_rate_std < 0.2);
    }

    #[test]
    fn no_success_yields_null_path_length() {
        let trials: Vec<TrialRecord> = (0..5).map(|i| record(i, "joint", false, 0.0)).collect();
        let report = BenchmarkReport::build("test", serde_json::json!({}), trials, 1);
        let agg = report.aggregate_for("joint").unwrap();
        assert_eq!(agg.mean_path_length, None);
        let json = report.to_json();
        assert!(json.contains("\"mean_path_length\": null"));
    }

    #[test]
    fn report_json_deterministic_and_wall_free() {
        let make = || {
            let trials: Vec<TrialRecord> = (0..10)
                .map(|i| {
                    let mut r = record(i, "a", i % 2 == 0, 50.0);
                    r.wall = std::time::Duration::from_nanos(i as u64 * 17); // varies
                    r
                })
                .collect();
            BenchmarkReport::build("det", serde_json::json!({"seed": 1}), trials, 1).to_json()
        };
        let a = make();
        assert_eq!(a, make());
        assert!(!a.contains("wall"));
    }

    #[test]
    fn json_roundtrip() {
        let trials: Vec<TrialRecord> = (0..6).map(|i| record(i, "x", true, 10.0)).collect();
        let report = BenchmarkReport::build("rt", serde_json::json!({"n": 6}), trials, 2);
        let back: BenchmarkReport = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(report, back);
    }
}
