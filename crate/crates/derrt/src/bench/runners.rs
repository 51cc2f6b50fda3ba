//! The three experiment suites: long narrow passage, bug trap, and the
//! multi-agent roundabout. Each runner trains its models in-run (or accepts
//! pretrained ones), evaluates every planner on seed-disjoint test
//! environments in a worker pool, and aggregates a deterministic report.

use std::time::Instant;

use serde::Serialize;

use crate::env::generators::{gen_bugtrap, gen_narrow_passage_with, gen_roundabout, PassageParams};
use crate::error::Result;
use crate::neural::NeuralConfig;
use crate::planner::{
    plan, replan_loop, HmmFeatureKind, HmmSteering, PlannerConfig, RecurrentSteering, ReplanConfig,
    ReplanOutcome, ReplanPlanner, SteeringModel,
};
use crate::training::{collect_traces, train_hmm, train_recurrent, OptimizerConfig, TraceKind};
use crate::util::parallel_map;

use super::report::{BenchmarkReport, TrialRecord};

/// Offset separating test-environment seeds from the training ranges used by
/// `collect_traces` (which consumes indices `0..max_envs`).
const TEST_SEED_OFFSET: u64 = 500_000;

pub const PLANNER_BASELINE: &str = "rrt_star";
pub const PLANNER_HMM: &str = "derrt_hmm";
pub const PLANNER_GRU: &str = "derrt_gru";
pub const PLANNER_JOINT: &str = "rrt_star_joint";

fn test_env_seed(seed: u64, trial: usize) -> u64 {
    seed.wrapping_mul(1_000_003)
        .wrapping_add(TEST_SEED_OFFSET)
        .wrapping_add(trial as u64)
}

#[derive(Debug, Clone, Serialize)]
pub struct PassageBenchConfig {
    pub rounds: usize,
    pub samples: usize,
    pub seed: u64,
    pub train_traces: usize,
    pub collect_budget: usize,
    pub hmm_states: usize,
    pub gru_epochs: usize,
    pub train_width: usize,
    pub train_height: usize,
    pub test_width: usize,
    pub test_height: usize,
}

impl PassageBenchConfig {
    pub fn desk(seed: u64) -> Self {
        Self {
            rounds: 50,
            samples: 600,
            seed,
            train_traces: 50,
            collect_budget: 3000,
            hmm_states: 3,
            gru_epochs: 16,
            train_width: 300,
            train_height: 300,
            test_width: 600,
            test_height: 300,
        }
    }
}

/// Models trained for the passage experiment; exposed so callers can reuse
/// or persist them.
pub struct PassageModels {
    pub hmm: HmmSteering,
    pub gru: RecurrentSteering,
}

pub fn train_passage_models(cfg: &PassageBenchConfig) -> Result<PassageModels> {
    let kind = TraceKind::Passage {
        width: cfg.train_width,
        height: cfg.train_height,
        params: PassageParams::default(),
    };
    let dataset = collect_traces(
        &kind,
        cfg.train_traces,
        cfg.train_traces * 10,
        cfg.collect_budget,
        cfg.seed,
    )?;
    let (hmm, _) = train_hmm(&dataset, cfg.hmm_states, cfg.seed)?;
    let opt = OptimizerConfig {
        epochs: cfg.gru_epochs,
        ..OptimizerConfig::default()
    };
    let (gru, _) = train_recurrent(&dataset, NeuralConfig::passage(5.0), &opt, cfg.seed)?;
    Ok(PassageModels {
        hmm: HmmSteering::new(hmm, HmmFeatureKind::Passage),
        gru: RecurrentSteering::new(gru),
    })
}

/// Narrow-passage suite: success rates of plain RRT*, the HMM-guided and the
/// GRU-guided planner on narrowed, wider test maps.
pub fn run_passage(cfg: &PassageBenchConfig) -> Result<BenchmarkReport> {
    let models = train_passage_models(cfg)?;
    let trials = evaluate_passage(cfg, &models);
    Ok(BenchmarkReport::build(
        "passage",
        serde_json::to_value(cfg)?,
        trials,
        cfg.seed,
    ))
}

pub fn evaluate_passage(cfg: &PassageBenchConfig, models: &PassageModels) -> Vec<TrialRecord> {
    let jobs: Vec<usize> = (0..cfg.rounds).collect();
    let per_trial = parallel_map(jobs, |trial| {
        let env = gen_narrow_passage_with(
            test_env_seed(cfg.seed, trial),
            cfg.test_width,
            cfg.test_height,
            &PassageParams::narrowed(),
        );
        let mut pcfg = PlannerConfig::for_env(&env, cfg.samples, cfg.seed);
        pcfg.goal_bias = 0.0;
        pcfg.rng_stream = trial as u64;
        let planners: [(&str, Option<&dyn SteeringModel>); 3] = [
            (PLANNER_BASELINE, None),
            (PLANNER_HMM, Some(&models.hmm)),
            (PLANNER_GRU, Some(&models.gru)),
        ];
        let mut records = Vec::with_capacity(3);
        for (name, model) in planners {
            let started = Instant::now();
            let result = plan(&env, model, &pcfg).expect("planning on a valid environment");
            records.push(TrialRecord {
                trial,
                seed: env.meta.seed,
                planner: name.to_string(),
                success: result.success,
                path_length: result.success.then_some(result.path_length),
                proposed: result.proposed,
                valid: result.valid,
                wall: started.elapsed(),
            });
        }
        records
    });
    per_trial.into_iter().flatten().collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct BugtrapBenchConfig {
    pub seeds: usize,
    pub steps: usize,
    pub seed: u64,
    pub train_traces: usize,
    pub collect_budget: usize,
    pub gru_epochs: usize,
    pub checkpoint_every: usize,
}

impl BugtrapBenchConfig {
    pub fn desk(seed: u64) -> Self {
        Self {
            seeds: 10,
            steps: 2000,
            seed,
            train_traces: 200,
            collect_budget: 4000,
            gru_epochs: 40,
            checkpoint_every: 250,
        }
    }
}

/// One row of the bug-trap progress curves (solution length and valid-move
/// proportion as a function of samples drawn).
#[derive(Debug, Clone, Serialize)]
pub struct CurvePoint {
    pub planner: String,
    pub trial: usize,
    pub samples: usize,
    pub solution_length: Option<f64>,
    pub valid_move_proportion: f64,
}

pub fn train_bugtrap_model(cfg: &BugtrapBenchConfig) -> Result<RecurrentSteering> {
    let dataset = collect_traces(
        &TraceKind::Bugtrap,
        cfg.train_traces,
        cfg.train_traces * 4,
        cfg.collect_budget,
        cfg.seed,
    )?;
    let opt = OptimizerConfig {
        epochs: cfg.gru_epochs,
        ..OptimizerConfig::default()
    };
    let (gru, _) = train_recurrent(&dataset, NeuralConfig::bugtrap(2.5), &opt, cfg.seed)?;
    Ok(RecurrentSteering::new(gru))
}

/// Bug-trap suite: plain RRT* against the patch-encoder GRU planner, with
/// per-checkpoint curves.
pub fn run_bugtrap(cfg: &BugtrapBenchConfig) -> Result<(BenchmarkReport, Vec<CurvePoint>)> {
    let gru = train_bugtrap_model(cfg)?;
    let (trials, curves) = evaluate_bugtrap(cfg, &gru);
    let report = BenchmarkReport::build("bugtrap", serde_json::to_value(cfg)?, trials, cfg.seed);
    Ok((report, curves))
}

pub fn evaluate_bugtrap(
    cfg: &BugtrapBenchConfig,
    gru: &RecurrentSteering,
) -> (Vec<TrialRecord>, Vec<CurvePoint>) {
    let checkpoints: Vec<usize> = (1..)
        .map(|i| i * cfg.checkpoint_every)
        .take_while(|&c| c <= cfg.steps)
        .collect();
    let jobs: Vec<usize> = (0..cfg.seeds).collect();
    let per_trial = parallel_map(jobs, |trial| {
        let env = gen_bugtrap(test_env_seed(cfg.seed, trial));
        let mut pcfg = PlannerConfig::for_env(&env, cfg.steps, cfg.seed);
        pcfg.goal_bias = 0.0;
        pcfg.rng_stream = trial as u64;
        pcfg.checkpoints = checkpoints.clone();
        let planners: [(&str, Option<&dyn SteeringModel>); 2] =
            [(PLANNER_BASELINE, None), (PLANNER_GRU, Some(gru))];
        let mut records = Vec::new();
        let mut curve_rows = Vec::new();
        for (name, model) in planners {
            let started = Instant::now();
            let result = plan(&env, model, &pcfg).expect("planning on a valid environment");
            records.push(TrialRecord {
                trial,
                seed: env.meta.seed,
                planner: name.to_string(),
                success: result.success,
                path_length: result.success.then_some(result.path_length),
                proposed: result.proposed,
                valid: result.valid,
                wall: started.elapsed(),
            });
            for ck in &result.checkpoint_records {
                curve_rows.push(CurvePoint {
                    planner: name.to_string(),
                    trial,
                    samples: ck.iteration,
                    solution_length: ck.best_path_length,
                    valid_move_proportion: ck.valid as f64 / ck.proposed.max(1) as f64,
                });
            }
        }
        (records, curve_rows)
    });
    let mut trials = Vec::new();
    let mut curves = Vec::new();
    for (r, c) in per_trial {
        trials.extend(r);
        curves.extend(c);
    }
    (trials, curves)
}

pub fn curves_to_csv(curves: &[CurvePoint]) -> String {
    let mut out = String::from("planner,trial,samples,solution_length,valid_move_proportion\n");
    for c in curves {
        let len = c
            .solution_length
            .map(|l| format!("{l}"))
            .unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            c.planner, c.trial, c.samples, len, c.valid_move_proportion
        ));
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct RoundaboutBenchConfig {
    pub trials: usize,
    pub agent_counts: Vec<usize>,
    pub samples_per_step: usize,
    pub joint_samples_per_step: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub train_traces: usize,
    pub hmm_states: usize,
    pub gru_epochs: usize,
    /// Skip the joint baseline (it dominates runtime at high agent counts).
    pub include_joint: bool,
}

impl RoundaboutBenchConfig {
    pub fn desk(seed: u64) -> Self {
        Self {
            trials: 20,
            agent_counts: vec![2, 4, 6, 8],
            samples_per_step: 100,
            joint_samples_per_step: 5000,
            max_steps: 150,
            seed,
            train_traces: 300,
            hmm_states: 3,
            gru_epochs: 44,
            include_joint: true,
        }
    }
}

pub struct RoundaboutModels {
    pub hmm: HmmSteering,
    pub gru: RecurrentSteering,
}

pub fn train_roundabout_models(cfg: &RoundaboutBenchConfig) -> Result<RoundaboutModels> {
    let dataset = collect_traces(
        &TraceKind::Roundabout { max_agents: 4 },
        cfg.train_traces,
        cfg.train_traces * 4,
        cfg.samples_per_step,
        cfg.seed,
    )?;
    let (hmm, _) = train_hmm(&dataset, cfg.hmm_states, cfg.seed)?;
    let opt = OptimizerConfig {
        epochs: cfg.gru_epochs,
        ..OptimizerConfig::default()
    };
    let (gru, _) = train_recurrent(&dataset, NeuralConfig::roundabout(2.5), &opt, cfg.seed)?;
    Ok(RoundaboutModels {
        hmm: HmmSteering::new(hmm, HmmFeatureKind::NearestAgent),
        gru: RecurrentSteering::new(gru),
    })
}

/// Roundabout suite: replanning success and executed path length across
/// agent counts for the four planners.
pub fn run_roundabout(cfg: &RoundaboutBenchConfig) -> Result<BenchmarkReport> {
    let models = train_roundabout_models(cfg)?;
    let trials = evaluate_roundabout(cfg, &models);
    Ok(BenchmarkReport::build(
        "roundabout",
        serde_json::to_value(cfg)?,
        trials,
        cfg.seed,
    ))
}

pub fn evaluate_roundabout(
    cfg: &RoundaboutBenchConfig,
    models: &RoundaboutModels,
) -> Vec<TrialRecord> {
    let mut jobs = Vec::new();
    for &agents in &cfg.agent_counts {
        for trial in 0..cfg.trials {
            jobs.push((agents, trial));
        }
    }
    let per_job = parallel_map(jobs, |(agents, trial)| {
        let env = gen_roundabout(test_env_seed(cfg.seed, trial), agents);
        let mut pcfg = PlannerConfig::for_env(&env, 1, cfg.seed);
        pcfg.goal_bias = 0.0;
        let rcfg = ReplanConfig {
            planner: pcfg,
            samples_per_step: cfg.samples_per_step,
            max_steps: cfg.max_steps,
            wall_budget: None,
        };
        let mut planners: Vec<(&str, ReplanPlanner, usize)> = vec![
            (
                PLANNER_BASELINE,
                ReplanPlanner::Baseline,
                cfg.samples_per_step,
            ),
            (
                PLANNER_HMM,
                ReplanPlanner::Model(&models.hmm),
                cfg.samples_per_step,
            ),
            (
                PLANNER_GRU,
                ReplanPlanner::Model(&models.gru),
                cfg.samples_per_step,
            ),
        ];
        if cfg.include_joint {
            planners.push((
                PLANNER_JOINT,
                ReplanPlanner::Joint,
                cfg.joint_samples_per_step,
            ));
        }
        let mut records = Vec::new();
        for (name, planner, samples) in planners {
            let mut rc = rcfg.clone();
            rc.samples_per_step = samples;
            rc.planner.rng_stream = trial as u64;
            let started = Instant::now();
            let run = replan_loop(&env, planner, &rc).expect("replanning on a valid environment");
            let success = run.outcome == ReplanOutcome::ReachedGoal;
            records.push(TrialRecord {
                trial,
                seed: env.meta.seed,
                planner: format!("{name}@{agents}"),
                success,
                path_length: success.then_some(run.executed_length),
                proposed: run.proposed,
                valid: run.valid,
                wall: started.elapsed(),
            });
        }
        records
    });
    per_job.into_iter().flatten().collect()
}
