//! Trace harvesting from baseline planner runs, dataset serialization, and
//! the EM / SGD training pipelines.
//!
//! A trace is one successful plan recorded step by step. Every step keeps the
//! executed move, a steering target, and the observations both steering
//! model families consume: the HMM scores emission features at the
//! hypothesized position, while the recurrent model encodes the observation
//! at the position it steps from.
//!
//! Baseline RRT* places every accepted node exactly on its steering target,
//! so the recorded target of a harvested step would coincide with the
//! executed move and the target-deviation feature would collapse to zero.
//! Harvesting therefore re-draws the steering target per step from a seeded
//! uniform free-space sample, matching the distribution the planner sees at
//! inference time.

use serde::{Deserialize, Serialize};

use crate::env::generators::{gen_bugtrap, gen_narrow_passage_with, gen_roundabout, PassageParams};
use crate::env::{Configuration, Environment, Patch};
use crate::error::{Error, Result};
use crate::hmm::{em_fit_with_floors, emission_feature, HmmModel, VAR_FLOOR};
use crate::neural::{
    gradient_check_sampled, NeuralConfig, RecurrentSteeringModel, TrainObs, TrainStep,
};
use crate::numerics::{RngStream, Sgd};
use crate::planner::{
    nearest_agent, plan, replan_loop, sample_free, steer_baseline, HmmFeatureKind, PlannerConfig,
    ReplanConfig, ReplanPlanner,
};
use crate::util::parallel_map;

pub const TRACE_FORMAT_VERSION: u32 = 1;

/// Observations recorded for one step, by environment family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Observation {
    /// Narrow passage: engineered features at the step origin and at the
    /// executed position.
    Passage {
        at_prev: Vec<f64>,
        at_next: Vec<f64>,
    },
    /// Bug trap: occupancy patch around the step origin, run-length encoded.
    Patch { size: usize, rle: Vec<usize> },
    /// Roundabout: robot-local features and per-agent features at the step
    /// origin, plus nearest-agent features at the executed position.
    Roundabout {
        local_prev: Vec<f64>,
        agents_prev: Vec<Vec<f64>>,
        nearest_next: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub x_prev: Configuration,
    pub x_next: Configuration,
    pub mu: Configuration,
    pub t: usize,
    pub obs: Observation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub env_seed: u64,
    pub steps: Vec<TraceStep>,
}

/// Describes how a dataset was generated; doubles as the schema line of the
/// JSONL serialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSchema {
    pub version: u32,
    pub generator: String,
    pub width: usize,
    pub height: usize,
    /// Steering radius used at harvest time.
    pub steering_radius: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceDataset {
    pub schema: TraceSchema,
    pub traces: Vec<Trace>,
}

impl TraceDataset {
    pub fn map_scale(&self) -> f64 {
        self.schema.width.max(self.schema.height) as f64
    }

    /// One header line, then one JSON object per trace.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&self.schema)?;
        out.push('\n');
        for trace in &self.traces {
            out.push_str(&serde_json::to_string(trace)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::EmptyDataset("missing schema line".into()))?;
        let schema: TraceSchema = serde_json::from_str(header)?;
        if schema.version != TRACE_FORMAT_VERSION {
            return Err(Error::ModelFormat(format!(
                "unsupported trace format version {}",
                schema.version
            )));
        }
        let traces = lines
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<Trace>, _>>()?;
        Ok(Self { schema, traces })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_jsonl()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_jsonl(&std::fs::read_to_string(path)?)
    }

    /// Total number of steps across traces.
    pub fn step_count(&self) -> usize {
        self.traces.iter().map(|t| t.steps.len()).sum()
    }
}

/// What to harvest traces from.
#[derive(Debug, Clone)]
pub enum TraceKind {
    Passage {
        width: usize,
        height: usize,
        params: PassageParams,
    },
    Bugtrap,
    Roundabout {
        /// Agent count is sampled uniformly from `1..=max_agents` per map.
        max_agents: usize,
    },
}

impl TraceKind {
    fn generator_name(&self) -> &'static str {
        match self {
            TraceKind::Passage { .. } => "passage",
            TraceKind::Bugtrap => "bugtrap",
            TraceKind::Roundabout { .. } => "roundabout",
        }
    }

    fn make_env(&self, seed: u64) -> Environment {
        match self {
            TraceKind::Passage {
                width,
                height,
                params,
            } => gen_narrow_passage_with(seed, *width, *height, params),
            TraceKind::Bugtrap => gen_bugtrap(seed),
            TraceKind::Roundabout { max_agents } => {
                let n = 1 + (seed as usize) % max_agents;
                gen_roundabout(seed, n)
            }
        }
    }
}

/// Harvest up to `target_traces` traces by running the baseline planner over
/// procedurally generated environments. Returns an error if not a single
/// trace could be harvested within `max_envs` environments.
pub fn collect_traces(
    kind: &TraceKind,
    target_traces: usize,
    max_envs: usize,
    planner_budget: usize,
    seed: u64,
) -> Result<TraceDataset> {
    let env_indices: Vec<u64> = (0..max_envs as u64).collect();
    let per_env = parallel_map(env_indices, |i| {
        let env_seed = seed.wrapping_mul(1_000_003).wrapping_add(i);
        let env = kind.make_env(env_seed);
        let cfg = {
            let mut c = PlannerConfig::for_env(&env, planner_budget, env_seed);
            c.goal_bias = 0.05;
            c
        };
        harvest_env(kind, &env, env_seed, &cfg)
    });

    let mut traces = Vec::new();
    let mut first_env = None;
    for (i, mut harvested) in per_env.into_iter().enumerate() {
        if first_env.is_none() {
            first_env = Some(i);
        }
        traces.append(&mut harvested);
        if traces.len() >= target_traces {
            traces.truncate(target_traces);
            break;
        }
    }
    if traces.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no successful plans in {max_envs} environments"
        )));
    }
    let probe = kind.make_env(seed.wrapping_mul(1_000_003));
    Ok(TraceDataset {
        schema: TraceSchema {
            version: TRACE_FORMAT_VERSION,
            generator: kind.generator_name().into(),
            width: probe.map.width,
            height: probe.map.height,
            steering_radius: PlannerConfig::for_env(&probe, 1, 0).steering_radius,
            seed,
        },
        traces,
    })
}

fn harvest_env(
    kind: &TraceKind,
    env: &Environment,
    env_seed: u64,
    cfg: &PlannerConfig,
) -> Vec<Trace> {
    match kind {
        TraceKind::Passage { .. } | TraceKind::Bugtrap => {
            let Ok(result) = plan(env, None, cfg) else {
                return Vec::new();
            };
            if !result.success || result.path.len() < 2 {
                return Vec::new();
            }
            let waypoints: Vec<(Configuration, usize)> =
                result.path.iter().map(|c| (c.clone(), 0usize)).collect();
            match harvest_path(kind, env, env_seed, cfg, &waypoints) {
                Some(trace) => vec![trace],
                None => Vec::new(),
            }
        }
        TraceKind::Roundabout { .. } => {
            // Several executed sequences per map, one per planner stream.
            let mut traces = Vec::new();
            for attempt in 0..3u64 {
                let mut pcfg = cfg.clone();
                pcfg.seed = cfg.seed.wrapping_add(attempt.wrapping_mul(0x9E37));
                let rcfg = ReplanConfig {
                    planner: pcfg,
                    samples_per_step: 100,
                    max_steps: 120,
                    wall_budget: None,
                };
                let Ok(run) = replan_loop(env, ReplanPlanner::Baseline, &rcfg) else {
                    continue;
                };
                if !run.reached_goal() || run.trajectory.len() < 2 {
                    continue;
                }
                let waypoints: Vec<(Configuration, usize)> = run
                    .trajectory
                    .iter()
                    .enumerate()
                    .map(|(t, c)| (c.clone(), t))
                    .collect();
                if let Some(trace) =
                    harvest_path(kind, env, env_seed.wrapping_add(attempt), cfg, &waypoints)
                {
                    traces.push(trace);
                }
            }
            traces
        }
    }
}

/// Turn an executed waypoint sequence into a trace: per-step steering targets
/// are re-drawn from seeded free-space samples, observations recorded per
/// environment family.
fn harvest_path(
    kind: &TraceKind,
    env: &Environment,
    env_seed: u64,
    cfg: &PlannerConfig,
    waypoints: &[(Configuration, usize)],
) -> Option<Trace> {
    let mut rng = RngStream::new(env_seed, 0x7A3C);
    let mut steps = Vec::with_capacity(waypoints.len() - 1);
    for pair in waypoints.windows(2) {
        let (x_prev, t) = (&pair[0].0, pair[0].1);
        let (x_next, _) = (&pair[1].0, pair[1].1);
        let x_rand = sample_free(env, &mut rng, cfg).ok()?;
        let mu = steer_baseline(x_prev, &x_rand, cfg.steering_radius);
        let obs = match kind {
            TraceKind::Passage { .. } => Observation::Passage {
                at_prev: env.passage_features(x_prev).ok()?,
                at_next: env.passage_features(x_next).ok()?,
            },
            TraceKind::Bugtrap => {
                let patch = env.extract_patch(x_prev, 21);
                Observation::Patch {
                    size: patch.size,
                    rle: crate::env::io::rle_encode(&patch.cells),
                }
            }
            TraceKind::Roundabout { .. } => {
                let agents_prev = (0..env.agents.len())
                    .map(|i| env.agent_features(x_prev, t, i))
                    .collect::<Result<Vec<_>>>()
                    .ok()?;
                let nearest = nearest_agent(env, x_next, t).ok()?;
                Observation::Roundabout {
                    local_prev: agents_prev[0][..3].to_vec(),
                    agents_prev,
                    nearest_next: env.agent_features(x_next, t, nearest).ok()?,
                }
            }
        };
        steps.push(TraceStep {
            x_prev: x_prev.clone(),
            x_next: x_next.clone(),
            mu,
            t,
            obs,
        });
    }
    if steps.is_empty() {
        None
    } else {
        Some(Trace { env_seed, steps })
    }
}

/// Emission feature sequence of one trace, for HMM training: the deviation of
/// the executed position from the steering target, concatenated with the
/// map-scale-normalized environment features at the executed position. The
/// normalization matches what `HmmSteering::observe` applies at plan time.
fn hmm_feature_sequence(trace: &Trace, scale: f64) -> Result<Vec<Vec<f64>>> {
    trace
        .steps
        .iter()
        .map(|s| {
            let obs_next: Vec<f64> = match &s.obs {
                Observation::Passage { at_next, .. } => {
                    HmmFeatureKind::Passage.normalize(at_next, scale)
                }
                Observation::Roundabout { nearest_next, .. } => {
                    HmmFeatureKind::NearestAgent.normalize(nearest_next, scale)
                }
                Observation::Patch { .. } => {
                    return Err(Error::InvalidConfig(
                        "patch observations have no HMM feature mapping".into(),
                    ))
                }
            };
            // The executed step stands in as the optimal step: the deviation
            // dimensions train to zero mean and act, through their floored
            // variance, as a finite preference for the optimal point.
            Ok(emission_feature(&s.x_prev, &s.x_next, &s.x_next, &obs_next))
        })
        .collect()
}

/// Fit a Gaussian-emission HMM to a harvested dataset. Traces shorter than
/// two steps are skipped. Returns the model and the log-likelihood curve.
pub fn train_hmm(dataset: &TraceDataset, k: usize, seed: u64) -> Result<(HmmModel, Vec<f64>)> {
    let scale = dataset.map_scale();
    let sequences: Vec<Vec<Vec<f64>>> = dataset
        .traces
        .iter()
        .filter(|t| t.steps.len() >= 2)
        .map(|t| hmm_feature_sequence(t, scale))
        .collect::<Result<_>>()?;
    if sequences.is_empty() {
        return Err(Error::EmptyDataset(
            "no trace with at least two steps".into(),
        ));
    }
    let dim = sequences[0][0].len();
    if sequences.iter().flatten().any(|f| f.len() != dim) {
        return Err(Error::InvalidConfig(
            "inconsistent feature dimensions across traces".into(),
        ));
    }
    // Deviation dims on the steering-radius scale, environment dims tight.
    let delta_floor = (dataset.schema.steering_radius / 4.0).powi(2);
    let mut floors = vec![delta_floor, delta_floor];
    floors.extend(vec![VAR_FLOOR; dim - 2]);
    em_fit_with_floors(&sequences, k, seed, 50, 1e-6, &floors)
}

/// SGD hyperparameters for the recurrent trainer.
#[derive(Debug, Clone)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    /// Optional unroll truncation; traces are split into windows of this
    /// length when set.
    pub truncate: Option<usize>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            momentum: 0.9,
            epochs: 20,
            truncate: None,
        }
    }
}

fn to_train_steps(trace: &Trace) -> Vec<TrainStep> {
    trace
        .steps
        .iter()
        .map(|s| TrainStep {
            x_prev: s.x_prev.clone(),
            x_next: s.x_next.clone(),
            mu: s.mu.clone(),
            obs: match &s.obs {
                Observation::Passage { at_prev, .. } => TrainObs::Features(at_prev.clone()),
                Observation::Patch { size, rle } => TrainObs::Patch(Patch {
                    size: *size,
                    cells: crate::env::io::rle_decode(rle, size * size)
                        .expect("patch run lengths validated at load"),
                }),
                Observation::Roundabout {
                    local_prev,
                    agents_prev,
                    ..
                } => TrainObs::MultiAgent {
                    local: local_prev.clone(),
                    agents: agents_prev.clone(),
                },
            },
        })
        .collect()
}

/// Train the recurrent steering model on a harvested dataset.
///
/// A subsampled finite-difference gate checks the instantiated architecture
/// before any step; training then runs seeded-shuffled epochs of per-trace
/// SGD. Returns the frozen model and the per-epoch mean loss curve.
pub fn train_recurrent(
    dataset: &TraceDataset,
    arch: NeuralConfig,
    opt_config: &OptimizerConfig,
    seed: u64,
) -> Result<(RecurrentSteeringModel, Vec<f64>)> {
    if dataset.traces.is_empty() {
        return Err(Error::EmptyDataset("no traces".into()));
    }
    let scale = dataset.map_scale();
    let model = RecurrentSteeringModel::new(arch, seed);

    // Gradient-check gate on a short prefix of the first trace.
    let gate_steps: Vec<TrainStep> = to_train_steps(&dataset.traces[0])
        .into_iter()
        .take(3)
        .collect();
    let gate = gradient_check_sampled(&model, &gate_steps, scale, 1e-5, 1e-4, 8, seed)?;
    if gate.failures > 0 {
        return Err(Error::Diverged(format!(
            "gradient-check gate failed on {} of {} sampled elements (max rel err {})",
            gate.failures, gate.checked, gate.max_rel_err
        )));
    }

    let mut model = model;
    let mut opt = Sgd::new(opt_config.learning_rate, opt_config.momentum);
    let mut order: Vec<usize> = (0..dataset.traces.len()).collect();
    let mut rng = RngStream::new(seed, 0x5487);
    let mut curve = Vec::with_capacity(opt_config.epochs);
    for _ in 0..opt_config.epochs {
        // Seeded Fisher-Yates shuffle.
        for i in (1..order.len()).rev() {
            order.swap(i, rng.uniform_usize(i + 1));
        }
        let mut total = 0.0;
        let mut steps_seen = 0usize;
        for &idx in &order {
            let steps = to_train_steps(&dataset.traces[idx]);
            let windows: Vec<&[TrainStep]> = match opt_config.truncate {
                Some(w) => steps.chunks(w).collect(),
                None => vec![&steps[..]],
            };
            for window in windows {
                if window.is_empty() {
                    continue;
                }
                total += model.train_step(window, scale, &mut opt)?;
                steps_seen += window.len();
            }
        }
        curve.push(total / steps_seen.max(1) as f64);
    }
    Ok((model, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::GeneratorDetail;

    fn small_passage_kind() -> TraceKind {
        TraceKind::Passage {
            width: 100,
            height: 100,
            params: PassageParams::default(),
        }
    }

    #[test]
    fn collect_passage_traces_and_replay() {
        let kind = small_passage_kind();
        let dataset = collect_traces(&kind, 5, 40, 1500, 7).unwrap();
        assert!(!dataset.traces.is_empty());
        assert_eq!(dataset.schema.generator, "passage");
        // Every recorded step replays collision-free in its regenerated
        // environment, within the steering radius, with mu in the ball.
        for trace in &dataset.traces {
            let env = kind.make_env(trace.env_seed);
            for step in &trace.steps {
                assert!(env.segment_free(&step.x_prev, &step.x_next, step.t));
                assert!(step.x_prev.dist(&step.x_next) <= dataset.schema.steering_radius + 1e-9);
                assert!(step.x_prev.dist(&step.mu) <= dataset.schema.steering_radius + 1e-9);
            }
        }
    }

    #[test]
    fn trivially_easy_env_gives_one_step_traces() {
        // Start adjacent to the goal region: the plan is a single edge.
        let kind = small_passage_kind();
        let mut env = kind.make_env(3);
        let GeneratorDetail::Passage(_) = env.meta.detail else {
            unreachable!()
        };
        env.goal_center = Configuration::xy(env.start.x() + 12.0, env.start.y());
        let cfg = PlannerConfig::for_env(&env, 4000, 1);
        let result = plan(&env, None, &cfg).unwrap();
        assert!(result.success);
        let waypoints: Vec<(Configuration, usize)> =
            result.path.iter().map(|c| (c.clone(), 0)).collect();
        let trace = harvest_path(&kind, &env, 3, &cfg, &waypoints).unwrap();
        assert!(!trace.steps.is_empty());
    }

    #[test]
    fn dataset_jsonl_roundtrip() {
        let kind = small_passage_kind();
        let dataset = collect_traces(&kind, 3, 30, 1500, 11).unwrap();
        let text = dataset.to_jsonl().unwrap();
        let back = TraceDataset::from_jsonl(&text).unwrap();
        assert_eq!(dataset, back);
    }

    #[test]
    fn collect_fails_cleanly_when_nothing_succeeds() {
        // A planner budget of 1 iteration cannot solve a passage map.
        let kind = small_passage_kind();
        let result = collect_traces(&kind, 5, 3, 1, 1);
        assert!(matches!(result, Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn train_hmm_on_harvested_passage_traces() {
        let kind = small_passage_kind();
        let dataset = collect_traces(&kind, 8, 60, 1500, 5).unwrap();
        let (model, curve) = train_hmm(&dataset, 3, 1).unwrap();
        model.validate().unwrap();
        assert_eq!(model.feature_dim(), 6); // delta(2) + passage features(4)
        for w in curve.windows(2) {
            assert!(w[1] >= w[0] - 1e-8, "EM log-likelihood decreased");
        }
    }

    #[test]
    fn hmm_rejects_patch_datasets() {
        let dataset = TraceDataset {
            schema: TraceSchema {
                version: TRACE_FORMAT_VERSION,
                generator: "bugtrap".into(),
                width: 110,
                height: 110,
                steering_radius: 5.0,
                seed: 0,
            },
            traces: vec![Trace {
                env_seed: 0,
                steps: (0..3)
                    .map(|i| TraceStep {
                        x_prev: Configuration::xy(i as f64, 0.0),
                        x_next: Configuration::xy(i as f64 + 1.0, 0.0),
                        mu: Configuration::xy(i as f64 + 1.0, 0.0),
                        t: 0,
                        obs: Observation::Patch {
                            size: 3,
                            rle: vec![9],
                        },
                    })
                    .collect(),
            }],
        };
        assert!(train_hmm(&dataset, 2, 0).is_err());
    }

    #[test]
    fn train_recurrent_smoke_and_determinism() {
        let kind = small_passage_kind();
        let dataset = collect_traces(&kind, 6, 50, 1500, 13).unwrap();
        let arch = NeuralConfig {
            hidden: 8,
            layers: 2,
            embed_dim: 6,
            ..NeuralConfig::passage(5.0)
        };
        let opt = OptimizerConfig {
            epochs: 5,
            ..OptimizerConfig::default()
        };
        let (model_a, curve_a) = train_recurrent(&dataset, arch.clone(), &opt, 3).unwrap();
        assert!(curve_a.last().unwrap() < curve_a.first().unwrap());
        let (model_b, _) = train_recurrent(&dataset, arch, &opt, 3).unwrap();
        assert_eq!(model_a, model_b, "same seed must give identical parameters");
    }

    #[test]
    fn roundabout_harvest_has_multiagent_observations() {
        let kind = TraceKind::Roundabout { max_agents: 2 };
        let dataset = collect_traces(&kind, 3, 25, 100, 3).unwrap();
        for trace in &dataset.traces {
            for step in &trace.steps {
                let Observation::Roundabout {
                    local_prev,
                    agents_prev,
                    nearest_next,
                } = &step.obs
                else {
                    panic!("expected roundabout observations")
                };
                assert_eq!(local_prev.len(), 3);
                assert_eq!(nearest_next.len(), 5);
                assert!(!agents_prev.is_empty());
            }
        }
    }
}
