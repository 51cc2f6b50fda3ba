//! RRT* with pluggable steering.
//!
//! `plan` with no model is plain RRT* (uniform sampling, straight-line
//! steering, shrinking-ball rewiring). With a [`SteeringModel`] it becomes
//! the model-guided variant: the steering function draws a candidate set
//! around the optimal point, scores each candidate under the sequence model
//! conditioned on the path that leads to the node, and samples one
//! proportionally to likelihood. Each tree node caches the model state of
//! its root path; rewiring recomputes the state of the moved node and lazily
//! invalidates its subtree.

mod joint;
mod kd;
mod replan;
mod steering;

pub use joint::plan_joint;
pub use replan::{replan_loop, ReplanConfig, ReplanOutcome, ReplanPlanner, ReplanResult};
pub use steering::{
    nearest_agent, HmmFeatureKind, HmmSteering, ModelState, Prepared, RecurrentSteering,
    SteeringModel,
};

use serde::Serialize;

use crate::env::{Configuration, Environment, GeneratorDetail};
use crate::error::{Error, Result};
use crate::numerics::{logsumexp, RngStream};

use kd::KdTree;

/// One node of the search tree.
#[derive(Debug, Clone)]
pub struct TreeNode {
    pub id: usize,
    pub config: Configuration,
    pub parent: Option<usize>,
    /// Path length from the root.
    pub cost: f64,
    /// Cached sequence-model state for the root path ending here.
    pub state: Option<ModelState>,
    /// Set when an ancestor was rewired; the state is refreshed lazily.
    pub stale: bool,
    /// The optimal steering point recorded when this node was created; used
    /// to recompute model states along rewired paths.
    pub steer_mu: Option<Configuration>,
}

/// Search tree plus spatial index.
#[derive(Debug)]
pub struct PlanTree {
    pub nodes: Vec<TreeNode>,
    children: Vec<Vec<usize>>,
    index: KdTree,
}

impl PlanTree {
    pub fn new(root: Configuration, state: Option<ModelState>) -> Self {
        let dim = root.dim();
        let mut index = KdTree::new(dim);
        index.insert(&root.0, 0);
        Self {
            nodes: vec![TreeNode {
                id: 0,
                config: root,
                parent: None,
                cost: 0.0,
                state,
                stale: false,
                steer_mu: None,
            }],
            children: vec![Vec::new()],
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Euclidean-nearest node id; ties broken by lowest id.
    pub fn nearest(&self, x: &Configuration) -> usize {
        self.index.nearest(&x.0).expect("tree is never empty")
    }

    /// Node ids within `radius` of `x`, ascending.
    pub fn near(&self, x: &Configuration, radius: f64) -> Vec<usize> {
        self.index.within(&x.0, radius)
    }

    pub fn insert(
        &mut self,
        config: Configuration,
        parent: usize,
        state: Option<ModelState>,
        steer_mu: Option<Configuration>,
    ) -> usize {
        let id = self.nodes.len();
        let cost = self.nodes[parent].cost + self.nodes[parent].config.dist(&config);
        self.index.insert(&config.0, id);
        self.nodes.push(TreeNode {
            id,
            config,
            parent: Some(parent),
            cost,
            state,
            stale: false,
            steer_mu,
        });
        self.children.push(Vec::new());
        self.children[parent].push(id);
        id
    }

    /// Move `node` under `new_parent`, refresh its cost, propagate the cost
    /// change through its subtree, and mark every descendant's cached model
    /// state stale.
    pub(crate) fn reparent(&mut self, node: usize, new_parent: usize) {
        let old_parent = self.nodes[node].parent.expect("cannot reparent the root");
        self.children[old_parent].retain(|&c| c != node);
        self.children[new_parent].push(node);
        self.nodes[node].parent = Some(new_parent);
        self.nodes[node].cost = self.nodes[new_parent].cost
            + self.nodes[new_parent].config.dist(&self.nodes[node].config);
        // Costs update eagerly (the tree invariant depends on them); states
        // only get a stale mark.
        let mut stack: Vec<usize> = self.children[node].clone();
        while let Some(c) = stack.pop() {
            let parent = self.nodes[c].parent.unwrap();
            self.nodes[c].cost =
                self.nodes[parent].cost + self.nodes[parent].config.dist(&self.nodes[c].config);
            self.nodes[c].stale = true;
            stack.extend(self.children[c].iter().copied());
        }
    }

    /// Node ids from the root to `node`, inclusive.
    pub fn root_path(&self, node: usize) -> Vec<usize> {
        let mut path = vec![node];
        let mut cur = node;
        while let Some(p) = self.nodes[cur].parent {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }

    pub fn path_configs(&self, node: usize) -> Vec<Configuration> {
        self.root_path(node)
            .into_iter()
            .map(|id| self.nodes[id].config.clone())
            .collect()
    }

    /// Structural invariants: one root, parent links acyclic, edge count,
    /// cost consistency within 1e-9, index consistency.
    pub fn validate(&self) -> Result<()> {
        let n = self.nodes.len();
        let roots = self.nodes.iter().filter(|n| n.parent.is_none()).count();
        if roots != 1 {
            return Err(Error::InvalidConfig(format!("{roots} roots")));
        }
        let edges = self.nodes.iter().filter(|n| n.parent.is_some()).count();
        if edges != n - 1 {
            return Err(Error::InvalidConfig("edge count mismatch".into()));
        }
        if self.index.len() != n {
            return Err(Error::InvalidConfig("spatial index out of sync".into()));
        }
        for node in &self.nodes {
            match node.parent {
                None => {
                    if node.cost != 0.0 {
                        return Err(Error::InvalidConfig("root cost not zero".into()));
                    }
                }
                Some(p) => {
                    let want = self.nodes[p].cost + self.nodes[p].config.dist(&node.config);
                    if (node.cost - want).abs() > 1e-9 {
                        return Err(Error::InvalidConfig(format!(
                            "cost of node {} inconsistent: {} vs {}",
                            node.id, node.cost, want
                        )));
                    }
                    // Acyclicity: walking up must terminate at the root.
                    let mut cur = node.id;
                    let mut hops = 0;
                    while let Some(p) = self.nodes[cur].parent {
                        cur = p;
                        hops += 1;
                        if hops > n {
                            return Err(Error::InvalidConfig("parent cycle".into()));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// One JSON object per node, for tree dumps consumed by the heat-map tool.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for node in &self.nodes {
            let record = TreeNodeRecord {
                id: node.id,
                parent: node.parent,
                config: &node.config.0,
                cost: node.cost,
            };
            out.push_str(&serde_json::to_string(&record).unwrap());
            out.push('\n');
        }
        out
    }
}

#[derive(Serialize)]
struct TreeNodeRecord<'a> {
    id: usize,
    parent: Option<usize>,
    config: &'a [f64],
    cost: f64,
}

/// Planner parameters.
#[derive(Debug, Clone)]
pub struct PlannerConfig {
    /// Steering radius r: every extension stays within this distance.
    pub steering_radius: f64,
    /// Shrinking-ball constant for the RRT* near radius.
    pub gamma: f64,
    /// Candidate count k for model steering.
    pub candidates: usize,
    /// Iteration budget n.
    pub max_iterations: usize,
    /// Probability of sampling the goal instead of free space.
    pub goal_bias: f64,
    pub seed: u64,
    /// Stream id for the planner's RNG, varied by the replanning loop.
    pub rng_stream: u64,
    /// Time step used for dynamic collision checks (snapshot semantics).
    pub snapshot_time: usize,
    /// Bound on rejection-sampling attempts in `sample_free`.
    pub max_sample_attempts: usize,
    /// Iteration counts at which progress is recorded (sorted ascending).
    pub checkpoints: Vec<usize>,
}

impl PlannerConfig {
    /// Defaults for an environment: per-generator steering radius and the
    /// standard RRT* gamma computed from free-space volume.
    pub fn for_env(env: &Environment, max_iterations: usize, seed: u64) -> Self {
        let steering_radius = match env.meta.detail {
            GeneratorDetail::Passage(_) => 10.0,
            GeneratorDetail::Bugtrap(_) => 8.0,
            GeneratorDetail::Roundabout(_) => 5.0,
            GeneratorDetail::None => 5.0,
        };
        Self {
            steering_radius,
            gamma: gamma_for(env, 2),
            candidates: 12,
            max_iterations,
            goal_bias: 0.05,
            seed,
            rng_stream: 0,
            snapshot_time: 0,
            max_sample_attempts: 100_000,
            checkpoints: Vec::new(),
        }
    }

    fn check(&self) -> Result<()> {
        if self.steering_radius <= 0.0
            || self.candidates < 1
            || self.max_iterations < 1
            || !(0.0..=1.0).contains(&self.goal_bias)
        {
            return Err(Error::InvalidConfig("invalid planner configuration".into()));
        }
        Ok(())
    }
}

/// Standard RRT* gamma: `2 (1 + 1/d)^{1/d} (vol_free / zeta_d)^{1/d}` where
/// `zeta_d` is the unit-ball volume (here d = 2).
pub fn gamma_for(env: &Environment, dim: usize) -> f64 {
    let vol_free = env.map.free_cell_count() as f64 * env.map.resolution * env.map.resolution;
    let d = dim as f64;
    2.0 * (1.0 + 1.0 / d).powf(1.0 / d) * (vol_free / std::f64::consts::PI).powf(1.0 / d)
}

/// Progress snapshot taken mid-run at a configured iteration count.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckpointRecord {
    pub iteration: usize,
    /// Best goal-reaching path length so far, if any.
    pub best_path_length: Option<f64>,
    pub proposed: usize,
    pub valid: usize,
}

/// Outcome of one planning run.
#[derive(Debug)]
pub struct PlanResult {
    pub success: bool,
    pub path: Vec<Configuration>,
    /// Node ids of the path, parallel to `path`.
    pub path_ids: Vec<usize>,
    pub path_length: f64,
    pub iterations: usize,
    /// Attempted extensions.
    pub proposed: usize,
    /// Extensions that passed collision checking.
    pub valid: usize,
    pub seed: u64,
    pub tree: PlanTree,
    pub checkpoint_records: Vec<CheckpointRecord>,
}

impl PlanResult {
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Doc<'a> {
            success: bool,
            path: Vec<&'a [f64]>,
            length: f64,
            iterations: usize,
            proposed: usize,
            valid: usize,
            seed: u64,
        }
        serde_json::to_string_pretty(&Doc {
            success: self.success,
            path: self.path.iter().map(|c| c.0.as_slice()).collect(),
            length: self.path_length,
            iterations: self.iterations,
            proposed: self.proposed,
            valid: self.valid,
            seed: self.seed,
        })
        .unwrap()
    }
}

/// Uniform sample over free cells by rejection, with optional goal biasing.
pub fn sample_free(
    env: &Environment,
    rng: &mut RngStream,
    cfg: &PlannerConfig,
) -> Result<Configuration> {
    if cfg.goal_bias > 0.0 && rng.f64() < cfg.goal_bias {
        return Ok(env.goal_center.clone());
    }
    let w = env.map.width as f64 * env.map.resolution;
    let h = env.map.height as f64 * env.map.resolution;
    for _ in 0..cfg.max_sample_attempts {
        let x = Configuration::xy(rng.uniform(0.0, w), rng.uniform(0.0, h));
        if env.point_free_static(&x) {
            return Ok(x);
        }
    }
    Err(Error::Sampling(format!(
        "no free sample after {} attempts",
        cfg.max_sample_attempts
    )))
}

/// The optimal point of the unmodified steering function: `x_rand` itself if
/// within `r` of `x_nearest`, otherwise the point at distance exactly `r`
/// along the ray.
pub fn steer_baseline(x_nearest: &Configuration, x_rand: &Configuration, r: f64) -> Configuration {
    let d = x_nearest.dist(x_rand);
    if d <= r {
        return x_rand.clone();
    }
    x_nearest.lerp(x_rand, r / d)
}

/// Uniform draw from the ball of radius `r` around `center` (any dimension).
pub fn sample_in_ball(center: &Configuration, r: f64, rng: &mut RngStream) -> Configuration {
    let d = center.dim();
    loop {
        let dir: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let norm: f64 = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            continue;
        }
        let radius = r * rng.f64().powf(1.0 / d as f64);
        return Configuration(
            center
                .0
                .iter()
                .zip(&dir)
                .map(|(c, v)| c + v / norm * radius)
                .collect(),
        );
    }
}

/// Draw an index proportionally to `exp(log_scores[i])`. Returns `None` when
/// every score is unusable (all -inf or NaN).
pub fn sample_proportional(log_scores: &[f64], rng: &mut RngStream) -> Option<usize> {
    if log_scores.is_empty() || log_scores.iter().all(|s| !s.is_finite()) {
        return None;
    }
    let clean: Vec<f64> = log_scores
        .iter()
        .map(|&s| if s.is_nan() { f64::NEG_INFINITY } else { s })
        .collect();
    let norm = logsumexp(&clean);
    let u = rng.f64();
    let mut acc = 0.0;
    for (i, &s) in clean.iter().enumerate() {
        acc += (s - norm).exp();
        if u < acc {
            return Some(i);
        }
    }
    Some(clean.len() - 1)
}

/// Result of the model-guided steering step.
struct SteerOutcome {
    x_new: Configuration,
    mu: Configuration,
    prepared: Prepared,
    picked_mu: bool,
}

/// Uniform candidate draw along the steering ray: a point between
/// `x_nearest` (exclusive) and the optimal point `mu`. The model thereby
/// chooses how far to commit toward the sampled direction: full strides
/// through open space, short validated steps near structure.
pub fn sample_on_ray(
    x_nearest: &Configuration,
    mu: &Configuration,
    rng: &mut RngStream,
) -> Configuration {
    let u = 1.0 - rng.f64(); // (0, 1]
    x_nearest.lerp(mu, u)
}

/// The modified steering function: candidates are the optimal point plus
/// `k - 1` uniform draws along the ray toward it; one is sampled with
/// probability proportional to its likelihood under the model.
#[allow(clippy::too_many_arguments)]
fn steer_with_model(
    model: &dyn SteeringModel,
    env: &Environment,
    state: &ModelState,
    x_nearest: &Configuration,
    x_rand: &Configuration,
    t: usize,
    cfg: &PlannerConfig,
    rng: &mut RngStream,
) -> Result<SteerOutcome> {
    let r = cfg.steering_radius;
    let mu = steer_baseline(x_nearest, x_rand, r);
    let prepared = model.prepare(env, state, x_nearest, &mu, t)?;
    let mut candidates = Vec::with_capacity(cfg.candidates);
    candidates.push(mu.clone());
    for _ in 1..cfg.candidates {
        candidates.push(sample_on_ray(x_nearest, &mu, rng));
    }
    let scores: Vec<f64> = candidates
        .iter()
        .map(|c| model.score(env, &prepared, x_nearest, c, &mu, t))
        .collect();
    // A degenerate model falls back to the optimal point.
    let idx = if candidates.len() == 1 {
        0
    } else {
        sample_proportional(&scores, rng).unwrap_or(0)
    };
    Ok(SteerOutcome {
        x_new: candidates.swap_remove(idx),
        mu,
        prepared,
        picked_mu: idx == 0,
    })
}

/// Recompute the cached state of `node` (and any stale ancestors) by
/// advancing from the nearest fresh ancestor down the root path.
fn refresh_state(
    tree: &mut PlanTree,
    node: usize,
    model: &dyn SteeringModel,
    env: &Environment,
    t: usize,
) -> Result<()> {
    if !tree.nodes[node].stale {
        return Ok(());
    }
    let mut chain = vec![node];
    let mut cur = node;
    while let Some(p) = tree.nodes[cur].parent {
        if !tree.nodes[p].stale {
            break;
        }
        chain.push(p);
        cur = p;
    }
    while let Some(id) = chain.pop() {
        let parent = tree.nodes[id].parent.expect("root is never stale");
        let parent_state = tree.nodes[parent]
            .state
            .clone()
            .expect("model planning keeps states on every node");
        let mu = tree.nodes[id]
            .steer_mu
            .clone()
            .unwrap_or_else(|| tree.nodes[id].config.clone());
        let state = model.advance(
            env,
            &parent_state,
            None,
            &tree.nodes[parent].config.clone(),
            &tree.nodes[id].config.clone(),
            &mu,
            t,
        )?;
        tree.nodes[id].state = Some(state);
        tree.nodes[id].stale = false;
    }
    Ok(())
}

/// Refresh a node's cached model state (plus any stale ancestors) in place;
/// exposed for cache-coherence verification.
pub fn refresh_node_state(
    tree: &mut PlanTree,
    node: usize,
    model: &dyn SteeringModel,
    env: &Environment,
    t: usize,
) -> Result<()> {
    refresh_state(tree, node, model, env, t)
}

/// Run the planner. `model = None` is plain RRT*; the model-guided variant
/// differs only in the steering function and the per-node state bookkeeping.
pub fn plan(
    env: &Environment,
    model: Option<&dyn SteeringModel>,
    cfg: &PlannerConfig,
) -> Result<PlanResult> {
    plan_from(env, env.start.clone(), model, cfg, None)
}

/// As [`plan`], from an explicit start with an optional pre-advanced root
/// model state (used by the replanning loop to carry path history).
pub fn plan_from(
    env: &Environment,
    start: Configuration,
    model: Option<&dyn SteeringModel>,
    cfg: &PlannerConfig,
    root_state: Option<ModelState>,
) -> Result<PlanResult> {
    cfg.check()?;
    let t = cfg.snapshot_time;
    let state0 = match (model, root_state) {
        (Some(_), Some(s)) => Some(s),
        (Some(m), None) => Some(m.init_state(env, &start)?),
        (None, _) => None,
    };
    let mut tree = PlanTree::new(start.clone(), state0);
    let mut rng = RngStream::new(cfg.seed, cfg.rng_stream);
    let mut proposed = 0usize;
    let mut valid = 0usize;

    // Start already inside the goal region: success with a trivial path.
    if start.dist(&env.goal_center) <= env.goal_radius {
        return Ok(PlanResult {
            success: true,
            path: vec![start],
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

    let mut checkpoint_records = Vec::with_capacity(cfg.checkpoints.len());
    let mut next_checkpoint = 0usize;
    let mut iterations = 0usize;
    for _ in 0..cfg.max_iterations {
        iterations += 1;
        let x_rand = sample_free(env, &mut rng, cfg)?;
        let nearest_id = tree.nearest(&x_rand);
        proposed += 1;

        let (x_new, mu, prepared) = match model {
            None => {
                let mu =
                    steer_baseline(&tree.nodes[nearest_id].config, &x_rand, cfg.steering_radius);
                (mu.clone(), mu, None)
            }
            Some(m) => {
                refresh_state(&mut tree, nearest_id, m, env, t)?;
                let state = tree.nodes[nearest_id].state.as_ref().unwrap();
                let out = steer_with_model(
                    m,
                    env,
                    state,
                    &tree.nodes[nearest_id].config.clone(),
                    &x_rand,
                    t,
                    cfg,
                    &mut rng,
                )?;
                let _ = out.picked_mu;
                (out.x_new, out.mu, Some(out.prepared))
            }
        };

        let extension_free = env.segment_free(&tree.nodes[nearest_id].config, &x_new, t);
        if extension_free {
            valid += 1;

            // RRT* parent choice over the shrinking-ball neighborhood.
            let card = tree.len() as f64;
            let near_radius = cfg
                .steering_radius
                .min(cfg.gamma * ((card.ln().max(1.0)) / card).powf(1.0 / start.dim() as f64));
            let near = tree.near(&x_new, near_radius);
            let mut best_parent = nearest_id;
            let mut best_cost =
                tree.nodes[nearest_id].cost + tree.nodes[nearest_id].config.dist(&x_new);
            for &m_id in &near {
                if m_id == nearest_id {
                    continue;
                }
                let c = tree.nodes[m_id].cost + tree.nodes[m_id].config.dist(&x_new);
                if c < best_cost && env.segment_free(&tree.nodes[m_id].config, &x_new, t) {
                    best_parent = m_id;
                    best_cost = c;
                }
            }

            let new_state = match model {
                None => None,
                Some(m) => {
                    refresh_state(&mut tree, best_parent, m, env, t)?;
                    let parent_state = tree.nodes[best_parent].state.clone().unwrap();
                    // The prepared step can be reused only along the edge it was
                    // computed for.
                    let reuse = if best_parent == nearest_id {
                        prepared.as_ref()
                    } else {
                        None
                    };
                    Some(m.advance(
                        env,
                        &parent_state,
                        reuse,
                        &tree.nodes[best_parent].config.clone(),
                        &x_new,
                        &mu,
                        t,
                    )?)
                }
            };
            let new_id = tree.insert(x_new.clone(), best_parent, new_state, Some(mu.clone()));

            // Rewire the neighborhood through the new node where it is cheaper.
            for &m_id in &near {
                if m_id == best_parent || m_id == new_id {
                    continue;
                }
                let through = tree.nodes[new_id].cost + x_new.dist(&tree.nodes[m_id].config);
                if through + 1e-12 < tree.nodes[m_id].cost
                    && env.segment_free(&x_new, &tree.nodes[m_id].config, t)
                {
                    tree.reparent(m_id, new_id);
                    if let Some(m) = model {
                        // Recompute the rewired node's state along its new root
                        // path; descendants were marked stale by reparent.
                        let mu_m = tree.nodes[m_id]
                            .steer_mu
                            .clone()
                            .unwrap_or_else(|| tree.nodes[m_id].config.clone());
                        let state = m.advance(
                            env,
                            tree.nodes[new_id].state.as_ref().unwrap(),
                            None,
                            &x_new,
                            &tree.nodes[m_id].config.clone(),
                            &mu_m,
                            t,
                        )?;
                        tree.nodes[m_id].state = Some(state);
                        tree.nodes[m_id].stale = false;
                    }
                }
            }
        }

        while next_checkpoint < cfg.checkpoints.len()
            && iterations >= cfg.checkpoints[next_checkpoint]
        {
            checkpoint_records.push(CheckpointRecord {
                iteration: cfg.checkpoints[next_checkpoint],
                best_path_length: best_goal_cost(&tree, env),
                proposed,
                valid,
            });
            next_checkpoint += 1;
        }
    }

    // Min-cost node inside the goal region, if any.
    let mut best: Option<(f64, usize)> = None;
    for node in &tree.nodes {
        if node.config.dist(&env.goal_center) <= env.goal_radius {
            let key = (node.cost, node.id);
            if best.is_none_or(|(c, i)| key < (c, i)) {
                best = Some(key);
            }
        }
    }
    let (success, path, path_ids, path_length) = match best {
        Some((cost, id)) => {
            let ids = tree.root_path(id);
            let configs = ids.iter().map(|&i| tree.nodes[i].config.clone()).collect();
            (true, configs, ids, cost)
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
        checkpoint_records,
    })
}

/// Cheapest goal-region cost currently in the tree.
fn best_goal_cost(tree: &PlanTree, env: &Environment) -> Option<f64> {
    let mut best: Option<f64> = None;
    for node in &tree.nodes {
        if node.config.dist(&env.goal_center) <= env.goal_radius
            && best.is_none_or(|b| node.cost < b)
        {
            best = Some(node.cost);
        }
    }
    best
}
