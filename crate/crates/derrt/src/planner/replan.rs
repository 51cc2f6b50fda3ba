//! Receding-horizon execution in dynamic environments: plan with a fixed
//! sample budget from the current position, execute the first path segment
//! while the scripted agents advance one time step, repeat.

use std::time::Instant;

use crate::env::{Configuration, Environment, AGENT_RADIUS, ROBOT_RADIUS};
use crate::error::Result;

use super::joint::plan_joint_from;
use super::steering::{ModelState, SteeringModel};
use super::{plan_from, PlanResult, PlannerConfig};

/// Which planner runs inside the loop.
pub enum ReplanPlanner<'a> {
    /// Robot-space RRT* against agent snapshots.
    Baseline,
    /// Model-guided planner; the carried state remembers the executed path.
    Model(&'a dyn SteeringModel),
    /// RRT* in the joint configuration space.
    Joint,
}

#[derive(Debug, Clone)]
pub struct ReplanConfig {
    pub planner: PlannerConfig,
    /// Sample budget per re-plan step.
    pub samples_per_step: usize,
    /// Execution steps before the run counts as timed out.
    pub max_steps: usize,
    /// Total planning wall-time budget, if capped.
    pub wall_budget: Option<std::time::Duration>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplanOutcome {
    ReachedGoal,
    Collision,
    Timeout,
}

#[derive(Debug)]
pub struct ReplanResult {
    pub outcome: ReplanOutcome,
    pub trajectory: Vec<Configuration>,
    pub executed_length: f64,
    pub steps: usize,
    pub proposed: usize,
    pub valid: usize,
    /// Cumulative wall time spent inside plan calls.
    pub plan_wall: std::time::Duration,
}

impl ReplanResult {
    pub fn reached_goal(&self) -> bool {
        self.outcome == ReplanOutcome::ReachedGoal
    }
}

/// Node to steer toward when the goal was not reached this cycle: robot
/// block closest to the goal, then cheapest, then lowest id.
fn progress_target(result: &PlanResult, goal: &Configuration) -> usize {
    let mut best = (f64::INFINITY, f64::INFINITY, 0usize);
    for node in &result.tree.nodes {
        let key = (node.config.block2(0).dist(goal), node.cost, node.id);
        if key < best {
            best = key;
        }
    }
    best.2
}

/// Sampled sweep of the executed segment against agents moving from `t` to
/// `t + 1` and the static map.
fn execution_collides(
    env: &Environment,
    from: &Configuration,
    to: &Configuration,
    t: usize,
) -> bool {
    const SUBSTEPS: usize = 8;
    let min_sep = ROBOT_RADIUS + AGENT_RADIUS;
    for s in 0..=SUBSTEPS {
        let f = s as f64 / SUBSTEPS as f64;
        let robot = from.lerp(to, f);
        if env.map.occupied_at(robot.x(), robot.y()) {
            return true;
        }
        for track in &env.agents {
            let agent = track.position_at(t).lerp(track.position_at(t + 1), f);
            if robot.dist(&agent) < min_sep {
                return true;
            }
        }
    }
    false
}

pub fn replan_loop(
    env: &Environment,
    planner: ReplanPlanner<'_>,
    rcfg: &ReplanConfig,
) -> Result<ReplanResult> {
    let mut pos = env.start.clone();
    let mut trajectory = vec![pos.clone()];
    let mut executed_length = 0.0;
    let mut proposed = 0usize;
    let mut valid = 0usize;
    let mut plan_wall = std::time::Duration::ZERO;
    let mut carried: Option<ModelState> = match &planner {
        ReplanPlanner::Model(m) => Some(m.init_state(env, &pos)?),
        _ => None,
    };

    for t in 0..rcfg.max_steps {
        if pos.dist(&env.goal_center) <= env.goal_radius {
            return Ok(ReplanResult {
                outcome: ReplanOutcome::ReachedGoal,
                trajectory,
                executed_length,
                steps: t,
                proposed,
                valid,
                plan_wall,
            });
        }
        if let Some(budget) = rcfg.wall_budget {
            if plan_wall >= budget {
                break;
            }
        }

        let mut cfg = rcfg.planner.clone();
        cfg.max_iterations = rcfg.samples_per_step;
        cfg.snapshot_time = t;
        cfg.rng_stream = t as u64 + 1;

        let started = Instant::now();
        let result = match &planner {
            ReplanPlanner::Baseline => plan_from(env, pos.clone(), None, &cfg, None)?,
            ReplanPlanner::Model(m) => {
                plan_from(env, pos.clone(), Some(*m), &cfg, carried.clone())?
            }
            ReplanPlanner::Joint => plan_joint_from(env, pos.clone(), &cfg)?,
        };
        plan_wall += started.elapsed();
        proposed += result.proposed;
        valid += result.valid;

        // Execute the first segment toward the goal (or toward the most
        // promising node when no full path exists yet).
        let target = if result.success {
            *result.path_ids.last().unwrap()
        } else {
            progress_target(&result, &env.goal_center)
        };
        let ids = result.tree.root_path(target);
        let next = if ids.len() >= 2 {
            result.tree.nodes[ids[1]].config.block2(0)
        } else {
            pos.clone() // no progress possible: wait in place
        };

        if execution_collides(env, &pos, &next, t) {
            return Ok(ReplanResult {
                outcome: ReplanOutcome::Collision,
                trajectory,
                executed_length,
                steps: t,
                proposed,
                valid,
                plan_wall,
            });
        }

        // Advance the carried model state along the executed edge.
        if let (ReplanPlanner::Model(m), Some(state)) = (&planner, &carried) {
            if ids.len() >= 2 {
                let node = &result.tree.nodes[ids[1]];
                let mu = node.steer_mu.clone().unwrap_or_else(|| node.config.clone());
                carried = Some(m.advance(env, state, None, &pos, &node.config, &mu, t)?);
            }
        }

        executed_length += pos.dist(&next);
        pos = next;
        trajectory.push(pos.clone());
    }

    Ok(ReplanResult {
        outcome: ReplanOutcome::Timeout,
        trajectory,
        executed_length,
        steps: rcfg.max_steps,
        proposed,
        valid,
        plan_wall,
    })
}
