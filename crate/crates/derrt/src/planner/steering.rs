//! The behavioral interface between the planner and its sequence models, and
//! the two implementations: Gaussian-emission HMM over engineered features
//! and the recurrent (GRU) model.

use crate::env::{Configuration, Environment};
use crate::error::{Error, Result};
use crate::hmm::{emission_feature, ForwardState, HmmModel};
use crate::neural::{mixture_score, RecurrentState, RecurrentSteeringModel};
use crate::numerics::DiagonalGaussian;

/// Opaque per-node model state cached in the search tree.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelState {
    Hmm(ForwardState),
    Recurrent(RecurrentState),
}

/// Whatever a model shares across all candidates scored from one node.
pub enum Prepared {
    Hmm {
        premix: Vec<f64>,
    },
    Recurrent {
        proposals: Vec<DiagonalGaussian>,
        weights: Vec<f64>,
        next: RecurrentState,
    },
}

/// A sequence model the planner can co-evolve with its tree: score candidate
/// steps and advance a cached state along accepted edges.
pub trait SteeringModel: Send + Sync {
    fn init_state(&self, env: &Environment, root: &Configuration) -> Result<ModelState>;

    /// Per-expansion precomputation shared by all candidates from this node.
    fn prepare(
        &self,
        env: &Environment,
        state: &ModelState,
        x_nearest: &Configuration,
        mu: &Configuration,
        t: usize,
    ) -> Result<Prepared>;

    /// Log likelihood of candidate `x_next`, pure.
    fn score(
        &self,
        env: &Environment,
        prepared: &Prepared,
        x_nearest: &Configuration,
        x_next: &Configuration,
        mu: &Configuration,
        t: usize,
    ) -> f64;

    /// State for the node created by the step `x_nearest -> x_next`.
    /// `prepared` may be reused when it was computed from the same
    /// `(state, x_nearest, mu)` triple.
    #[allow(clippy::too_many_arguments)]
    fn advance(
        &self,
        env: &Environment,
        state: &ModelState,
        prepared: Option<&Prepared>,
        x_nearest: &Configuration,
        x_next: &Configuration,
        mu: &Configuration,
        t: usize,
    ) -> Result<ModelState>;
}

/// Which environment features feed the HMM's emission vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HmmFeatureKind {
    /// Narrow-passage features (distance to entrance, indicator, coords).
    Passage,
    /// Features of the nearest dynamic agent.
    NearestAgent,
}

impl HmmFeatureKind {
    /// Divide map-position features (coordinates) by the map scale so
    /// emissions fitted on training-size maps transfer to differently sized
    /// test maps. Distances stay in cells: the steering radius is fixed
    /// across scales, so step-metric quantities are already comparable.
    pub fn normalize(&self, raw: &[f64], scale: f64) -> Vec<f64> {
        match self {
            // distance to entrance, indicator, x, y
            HmmFeatureKind::Passage => {
                vec![raw[0], raw[1], raw[2] / scale, raw[3] / scale]
            }
            // cos(theta), sin(theta), goal distance, agent distance, bearing
            HmmFeatureKind::NearestAgent => vec![
                raw[0],
                raw[1],
                raw[2],
                raw[3],
                raw[4] / std::f64::consts::PI,
            ],
        }
    }
}

/// HMM steering model: scores candidates by the forward-algorithm update for
/// the emission feature observed at the candidate. Environment features are
/// map-scale normalized; the model must be trained on features normalized
/// the same way (see the trace training pipeline).
pub struct HmmSteering {
    pub model: HmmModel,
    pub features: HmmFeatureKind,
}

impl HmmSteering {
    pub fn new(model: HmmModel, features: HmmFeatureKind) -> Self {
        Self { model, features }
    }

    /// Normalized environment features observed at `x`.
    pub fn observe(&self, env: &Environment, x: &Configuration, t: usize) -> Result<Vec<f64>> {
        let scale = env.map.width.max(env.map.height) as f64 * env.map.resolution;
        let raw = match self.features {
            HmmFeatureKind::Passage => env.passage_features(x)?,
            HmmFeatureKind::NearestAgent => {
                let idx = nearest_agent(env, x, t)?;
                env.agent_features(x, t, idx)?
            }
        };
        Ok(self.features.normalize(&raw, scale))
    }
}

/// Index of the agent closest to `x` at time `t`; ties take the lowest index.
pub fn nearest_agent(env: &Environment, x: &Configuration, t: usize) -> Result<usize> {
    if env.agents.is_empty() {
        return Err(Error::Environment("no agents in environment".into()));
    }
    let mut best = (f64::INFINITY, 0usize);
    for (i, track) in env.agents.iter().enumerate() {
        let d = x.dist(track.position_at(t));
        if d < best.0 {
            best = (d, i);
        }
    }
    Ok(best.1)
}

impl SteeringModel for HmmSteering {
    fn init_state(&self, _env: &Environment, _root: &Configuration) -> Result<ModelState> {
        Ok(ModelState::Hmm(self.model.forward_init()))
    }

    fn prepare(
        &self,
        _env: &Environment,
        state: &ModelState,
        _x_nearest: &Configuration,
        _mu: &Configuration,
        _t: usize,
    ) -> Result<Prepared> {
        let ModelState::Hmm(fs) = state else {
            return Err(Error::InvalidConfig(
                "HMM steering got a non-HMM state".into(),
            ));
        };
        Ok(Prepared::Hmm {
            premix: self.model.premix(fs),
        })
    }

    fn score(
        &self,
        env: &Environment,
        prepared: &Prepared,
        x_nearest: &Configuration,
        x_next: &Configuration,
        mu: &Configuration,
        t: usize,
    ) -> f64 {
        let Prepared::Hmm { premix } = prepared else {
            unreachable!("prepared kind mismatch");
        };
        match self.observe(env, x_next, t) {
            Ok(obs) => {
                let feature = emission_feature(x_nearest, x_next, mu, &obs);
                self.model.score_with_premix(premix, &feature)
            }
            Err(_) => f64::NEG_INFINITY,
        }
    }

    fn advance(
        &self,
        env: &Environment,
        state: &ModelState,
        _prepared: Option<&Prepared>,
        x_nearest: &Configuration,
        x_next: &Configuration,
        mu: &Configuration,
        t: usize,
    ) -> Result<ModelState> {
        let ModelState::Hmm(fs) = state else {
            return Err(Error::InvalidConfig(
                "HMM steering got a non-HMM state".into(),
            ));
        };
        let obs = self.observe(env, x_next, t)?;
        let feature = emission_feature(x_nearest, x_next, mu, &obs);
        Ok(ModelState::Hmm(self.model.forward_step(fs, &feature).0))
    }
}

/// Recurrent steering: the proposal set is produced once per expansion; each
/// candidate is scored under the proposal/RRT* mixture.
pub struct RecurrentSteering {
    pub model: RecurrentSteeringModel,
}

impl RecurrentSteering {
    pub fn new(model: RecurrentSteeringModel) -> Self {
        Self { model }
    }
}

impl SteeringModel for RecurrentSteering {
    fn init_state(&self, _env: &Environment, _root: &Configuration) -> Result<ModelState> {
        Ok(ModelState::Recurrent(self.model.zero_state()))
    }

    fn prepare(
        &self,
        env: &Environment,
        state: &ModelState,
        x_nearest: &Configuration,
        mu: &Configuration,
        t: usize,
    ) -> Result<Prepared> {
        let ModelState::Recurrent(rs) = state else {
            return Err(Error::InvalidConfig(
                "recurrent steering got a non-recurrent state".into(),
            ));
        };
        let (next, proposals) = self.model.proposals(rs, env, x_nearest, mu, t)?;
        let weights = self.model.config.mixture.resolve(proposals.len());
        Ok(Prepared::Recurrent {
            proposals,
            weights,
            next,
        })
    }

    fn score(
        &self,
        _env: &Environment,
        prepared: &Prepared,
        x_nearest: &Configuration,
        x_next: &Configuration,
        mu: &Configuration,
        _t: usize,
    ) -> f64 {
        let Prepared::Recurrent {
            proposals, weights, ..
        } = prepared
        else {
            unreachable!("prepared kind mismatch");
        };
        mixture_score(
            proposals,
            weights,
            mu,
            self.model.config.sigma_rrt,
            x_next,
            x_nearest,
        )
    }

    fn advance(
        &self,
        env: &Environment,
        state: &ModelState,
        prepared: Option<&Prepared>,
        x_nearest: &Configuration,
        _x_next: &Configuration,
        mu: &Configuration,
        t: usize,
    ) -> Result<ModelState> {
        // The recurrence consumes (x_prev, state, obs, mu); it does not
        // depend on which candidate was accepted, so a prepared step can be
        // reused verbatim.
        if let Some(Prepared::Recurrent { next, .. }) = prepared {
            return Ok(ModelState::Recurrent(next.clone()));
        }
        let ModelState::Recurrent(rs) = state else {
            return Err(Error::InvalidConfig(
                "recurrent steering got a non-recurrent state".into(),
            ));
        };
        let (next, _) = self.model.proposals(rs, env, x_nearest, mu, t)?;
        Ok(ModelState::Recurrent(next))
    }
}
