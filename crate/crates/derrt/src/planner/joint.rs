//! RRT* in the joint configuration space of the robot and every agent.
//!
//! The baseline treats other agents as plannable bodies constrained to
//! counter-clockwise progress around the central obstacle. Sampling happens
//! in `2 * (1 + agents)` dimensions, which is exactly why this planner
//! degrades as agents are added.

use crate::env::{Configuration, Environment, GeneratorDetail, AGENT_RADIUS, ROBOT_RADIUS};
use crate::error::{Error, Result};
use crate::numerics::RngStream;

use super::{gamma_for, steer_baseline, PlanResult, PlanTree, PlannerConfig};

/// Plan in the joint space from the environment's start.
pub fn plan_joint(env: &Environment, cfg: &PlannerConfig) -> Result<PlanResult> {
    plan_joint_from(env, env.start.clone(), cfg)
}

/// Plan in the joint space with the robot at `robot_start` and agents at
/// their scripted positions for `cfg.snapshot_time`.
pub fn plan_joint_from(
    env: &Environment,
    robot_start: Configuration,
    cfg: &PlannerConfig,
) -> Result<PlanResult> {
    if env.agents.is_empty() {
        return super::plan_from(env, robot_start, None, cfg, None);
    }
    let k = env.agents.len();
    let dim = 2 * (1 + k);
    let t = cfg.snapshot_time;
    let center = obstacle_center(env);

    let mut start = robot_start.0.clone();
    for track in &env.agents {
        let p = track.position_at(t);
        start.push(p.x());
        start.push(p.y());
    }
    let start = Configuration(start);

    // Per-block moves stay comparable to the single-robot planner.
    let r_joint = cfg.steering_radius * (dim as f64 / 2.0).sqrt();
    let gamma = gamma_for(env, dim) * (dim as f64 / 2.0).sqrt();

    let mut tree = PlanTree::new(start.clone(), None);
    let mut rng = RngStream::new(cfg.seed, cfg.rng_stream);
    let mut proposed = 0usize;
    let mut valid = 0usize;

    if robot_start.dist(&env.goal_center) <= env.goal_radius {
        return Ok(PlanResult {
            success: true,
            path: vec![robot_start],
            path_ids: vec![0],
            path_length: 0.0,
            iterations: 0,
            proposed,
            valid,
            seed: cfg.seed,
            tree,
            checkpoint_records: Vec::new(),
        });
    }

    let w = env.map.width as f64 * env.map.resolution;
    let h = env.map.height as f64 * env.map.resolution;
    let mut iterations = 0usize;
    for _ in 0..cfg.max_iterations {
        iterations += 1;
        // Joint sample: every block lands on free static cells; goal bias
        // pulls only the robot block toward the goal.
        let mut coords = Vec::with_capacity(dim);
        let biased = cfg.goal_bias > 0.0 && rng.f64() < cfg.goal_bias;
        for block in 0..=k {
            if block == 0 && biased {
                coords.extend_from_slice(&env.goal_center.0);
                continue;
            }
            let mut attempts = 0;
            loop {
                let x = rng.uniform(0.0, w);
                let y = rng.uniform(0.0, h);
                if !env.map.occupied_at(x, y) {
                    coords.push(x);
                    coords.push(y);
                    break;
                }
                attempts += 1;
                if attempts > cfg.max_sample_attempts {
                    return Err(Error::Sampling("joint sampling exhausted".into()));
                }
            }
        }
        let x_rand = Configuration(coords);

        let nearest_id = tree.nearest(&x_rand);
        proposed += 1;
        let x_new = steer_baseline(&tree.nodes[nearest_id].config, &x_rand, r_joint);
        if !joint_edge_valid(env, &tree.nodes[nearest_id].config, &x_new, &center) {
            continue;
        }
        valid += 1;

        let card = tree.len() as f64;
        let near_radius = r_joint.min(gamma * ((card.ln().max(1.0)) / card).powf(1.0 / dim as f64));
        let near = tree.near(&x_new, near_radius);
        let mut best_parent = nearest_id;
        let mut best_cost =
            tree.nodes[nearest_id].cost + tree.nodes[nearest_id].config.dist(&x_new);
        for &m_id in &near {
            if m_id == nearest_id {
                continue;
            }
            let c = tree.nodes[m_id].cost + tree.nodes[m_id].config.dist(&x_new);
            if c < best_cost && joint_edge_valid(env, &tree.nodes[m_id].config, &x_new, &center) {
                best_parent = m_id;
                best_cost = c;
            }
        }
        let new_id = tree.insert(x_new.clone(), best_parent, None, None);
        for &m_id in &near {
            if m_id == best_parent || m_id == new_id {
                continue;
            }
            let through = tree.nodes[new_id].cost + x_new.dist(&tree.nodes[m_id].config);
            if through + 1e-12 < tree.nodes[m_id].cost
                && joint_edge_valid(env, &x_new, &tree.nodes[m_id].config, &center)
            {
                tree.reparent(m_id, new_id);
            }
        }
    }

    // Success: the robot block reaches the goal region.
    let mut best: Option<(f64, usize)> = None;
    for node in &tree.nodes {
        if node.config.block2(0).dist(&env.goal_center) <= env.goal_radius {
            let key = (node.cost, node.id);
            if best.is_none_or(|b| key < b) {
                best = Some(key);
            }
        }
    }
    let (success, path, path_ids, path_length) = match best {
        Some((_, id)) => {
            let ids = tree.root_path(id);
            let robot_path: Vec<Configuration> = ids
                .iter()
                .map(|&i| tree.nodes[i].config.block2(0))
                .collect();
            let len = robot_path.windows(2).map(|w| w[0].dist(&w[1])).sum();
            (true, robot_path, ids, len)
        }
        None => (false, Vec::new(), Vec::new(), f64::INFINITY),
    };
    Ok(PlanResult {
        success,
        path,
        path_ids,
        path_length,
        iterations,
        proposed,
        valid,
        seed: cfg.seed,
        tree,
        checkpoint_records: Vec::new(),
    })
}

fn obstacle_center(env: &Environment) -> [f64; 2] {
    match &env.meta.detail {
        GeneratorDetail::Roundabout(info) => info.obstacle_center,
        _ => [
            env.map.width as f64 * env.map.resolution / 2.0,
            env.map.height as f64 * env.map.resolution / 2.0,
        ],
    }
}

/// A joint edge is valid when every block stays on free cells, every pair of
/// bodies stays separated along the motion, and every agent block makes
/// counter-clockwise (non-negative) angular progress around the obstacle.
fn joint_edge_valid(
    env: &Environment,
    a: &Configuration,
    b: &Configuration,
    center: &[f64; 2],
) -> bool {
    let k = a.dim() / 2 - 1;
    // Counter-clockwise progress per agent block.
    for i in 1..=k {
        let pa = a.block2(i);
        let pb = b.block2(i);
        let ang_a = (pa.y() - center[1]).atan2(pa.x() - center[0]);
        let ang_b = (pb.y() - center[1]).atan2(pb.x() - center[0]);
        if crate::env::wrap_angle(ang_b - ang_a) < 0.0 {
            return false;
        }
    }
    // Sampled sweep: static occupancy per block, separation per body pair.
    let steps = (a.dist(b) / crate::env::SEGMENT_STEP).ceil().max(1.0) as usize;
    for s in 0..=steps {
        let q = a.lerp(b, s as f64 / steps as f64);
        for i in 0..=k {
            let p = q.block2(i);
            if env.map.occupied_at(p.x(), p.y()) {
                return false;
            }
        }
        for i in 0..=k {
            for j in (i + 1)..=k {
                let min_sep = if i == 0 {
                    ROBOT_RADIUS + AGENT_RADIUS
                } else {
                    2.0 * AGENT_RADIUS
                };
                if q.block2(i).dist(&q.block2(j)) < min_sep {
                    return false;
                }
            }
        }
    }
    true
}
