//! Model definition, parameter management, and the graph forward pass.

use serde::{Deserialize, Serialize};

use crate::env::{Configuration, Environment, GeneratorDetail};
use crate::error::{Error, Result};
use crate::numerics::{
    DiagonalGaussian, Graph, ParamFile, RngStream, Tensor, TensorData, STD_FLOOR,
};

/// What the model observes at each step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderKind {
    /// Engineered feature vector of fixed dimension, embedded by one affine
    /// layer with tanh.
    Features { dim: usize },
    /// Square occupancy patch run through two conv+pool blocks and an affine
    /// embedding.
    Conv { patch: usize },
}

/// How mixture component weights are assigned at scoring time. The RRT*
/// component is always last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MixtureWeights {
    Uniform,
    Explicit { weights: Vec<f64> },
}

impl MixtureWeights {
    /// Concrete weights for `n_learned` learned components plus the RRT*
    /// component.
    pub fn resolve(&self, n_learned: usize) -> Vec<f64> {
        match self {
            MixtureWeights::Uniform => vec![1.0 / (n_learned + 1) as f64; n_learned + 1],
            MixtureWeights::Explicit { weights } => {
                assert_eq!(
                    weights.len(),
                    n_learned + 1,
                    "explicit mixture weights must cover every component"
                );
                weights.clone()
            }
        }
    }
}

/// Architecture hyperparameters; serialized as the model manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuralConfig {
    pub encoder: EncoderKind,
    /// GRU hidden size per layer.
    pub hidden: usize,
    /// Number of stacked GRU layers.
    pub layers: usize,
    /// Observation embedding dimension.
    pub embed_dim: usize,
    /// Per-agent feature dimension, when agent proposal heads are attached.
    pub agent_feature_dim: Option<usize>,
    /// Which feature-vector entries scale with the map and get divided by the
    /// map scale before encoding. Empty for patch encoders.
    pub feature_scale_mask: Vec<bool>,
    /// Std of the mixture component centered on the optimal steering point.
    pub sigma_rrt: f64,
    pub mixture: MixtureWeights,
}

impl NeuralConfig {
    /// Narrow-passage architecture: engineered features, two GRU layers of 32.
    pub fn passage(sigma_rrt: f64) -> Self {
        Self {
            encoder: EncoderKind::Features { dim: 4 },
            hidden: 32,
            layers: 2,
            embed_dim: 16,
            agent_feature_dim: None,
            // distance, indicator, x, y
            feature_scale_mask: vec![true, false, true, true],
            sigma_rrt,
            mixture: MixtureWeights::Uniform,
        }
    }

    /// Bug-trap architecture: 21x21 patch encoder co-trained with the GRU.
    pub fn bugtrap(sigma_rrt: f64) -> Self {
        Self {
            encoder: EncoderKind::Conv { patch: 21 },
            hidden: 32,
            layers: 2,
            embed_dim: 16,
            agent_feature_dim: None,
            feature_scale_mask: Vec::new(),
            sigma_rrt,
            mixture: MixtureWeights::Uniform,
        }
    }

    /// Roundabout architecture: robot-local features plus shared per-agent
    /// proposal heads.
    pub fn roundabout(sigma_rrt: f64) -> Self {
        Self {
            encoder: EncoderKind::Features { dim: 3 },
            hidden: 32,
            layers: 2,
            embed_dim: 16,
            agent_feature_dim: Some(5),
            // cos(theta), sin(theta), goal distance
            feature_scale_mask: vec![false, false, true],
            sigma_rrt,
            mixture: MixtureWeights::Uniform,
        }
    }

    fn gru_input_dim(&self) -> usize {
        // normalized position (2) + offset to the optimal point (2) + embedding
        4 + self.embed_dim
    }
}

/// Observation encoder parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Encoder {
    Features {
        w: TensorData,
        b: TensorData,
    },
    Conv {
        conv1_w: TensorData,
        conv1_b: TensorData,
        conv2_w: TensorData,
        conv2_b: TensorData,
        fc_w: TensorData,
        fc_b: TensorData,
    },
}

/// Shared-weight head mapping (top hidden state, agent embedding) to one
/// proposal per observed agent.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentHead {
    pub embed_w: TensorData,
    pub embed_b: TensorData,
    pub out_w: TensorData,
    pub out_b: TensorData,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GruLayer {
    pub w_z: TensorData,
    pub u_z: TensorData,
    pub b_z: TensorData,
    pub w_r: TensorData,
    pub u_r: TensorData,
    pub b_r: TensorData,
    pub w_h: TensorData,
    pub u_h: TensorData,
    pub b_h: TensorData,
}

impl GruLayer {
    fn new(input: usize, hidden: usize, rng: &mut RngStream) -> Self {
        let wi = 1.0 / (input as f64).sqrt();
        let wh = 1.0 / (hidden as f64).sqrt();
        Self {
            w_z: TensorData::randn(vec![hidden, input], wi, rng),
            u_z: TensorData::randn(vec![hidden, hidden], wh, rng),
            b_z: TensorData::zeros(vec![hidden]),
            w_r: TensorData::randn(vec![hidden, input], wi, rng),
            u_r: TensorData::randn(vec![hidden, hidden], wh, rng),
            b_r: TensorData::zeros(vec![hidden]),
            w_h: TensorData::randn(vec![hidden, input], wi, rng),
            u_h: TensorData::randn(vec![hidden, hidden], wh, rng),
            b_h: TensorData::zeros(vec![hidden]),
        }
    }
}

/// Hidden vectors, one per GRU layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecurrentState {
    pub hidden: Vec<Vec<f64>>,
}

impl RecurrentState {
    pub fn dim(&self) -> usize {
        self.hidden.iter().map(|h| h.len()).sum()
    }
}

/// The recurrent steering model.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentSteeringModel {
    pub config: NeuralConfig,
    pub encoder: Encoder,
    pub layers: Vec<GruLayer>,
    pub head_w: TensorData,
    pub head_b: TensorData,
    pub agent_head: Option<AgentHead>,
}

/// Initial bias on the raw-std head outputs: softplus(0.5) is roughly one
/// map cell, a sane starting proposal spread.
const RAW_STD_INIT: f64 = 0.5;

impl RecurrentSteeringModel {
    pub fn new(config: NeuralConfig, seed: u64) -> Self {
        let mut rng = RngStream::new(seed, 0x6E55);
        let encoder = match config.encoder {
            EncoderKind::Features { dim } => Encoder::Features {
                w: TensorData::randn(
                    vec![config.embed_dim, dim],
                    1.0 / (dim as f64).sqrt(),
                    &mut rng,
                ),
                b: TensorData::zeros(vec![config.embed_dim]),
            },
            EncoderKind::Conv { patch } => {
                assert!(patch >= 9 && patch % 2 == 1, "patch must be odd and >= 9");
                // patch -> patch-2 -> (patch-2)/2 -> ... fixed 21 -> 19 -> 9 -> 7 -> 3
                let after = |s: usize| (s - 2) / 2;
                let side = after(after(patch));
                let flat = 64 * side * side;
                Encoder::Conv {
                    conv1_w: TensorData::randn(vec![32, 1, 3, 3], 1.0 / 3.0, &mut rng),
                    conv1_b: TensorData::zeros(vec![32]),
                    conv2_w: TensorData::randn(
                        vec![64, 32, 3, 3],
                        1.0 / (32.0 * 9.0f64).sqrt(),
                        &mut rng,
                    ),
                    conv2_b: TensorData::zeros(vec![64]),
                    fc_w: TensorData::randn(
                        vec![config.embed_dim, flat],
                        1.0 / (flat as f64).sqrt(),
                        &mut rng,
                    ),
                    fc_b: TensorData::zeros(vec![config.embed_dim]),
                }
            }
        };
        let mut layers = Vec::with_capacity(config.layers);
        let mut input = config.gru_input_dim();
        for _ in 0..config.layers {
            layers.push(GruLayer::new(input, config.hidden, &mut rng));
            input = config.hidden;
        }
        let mut head_b = TensorData::zeros(vec![4]);
        head_b.data[2] = RAW_STD_INIT;
        head_b.data[3] = RAW_STD_INIT;
        let head_w = TensorData::randn(
            vec![4, config.hidden],
            1.0 / (config.hidden as f64).sqrt(),
            &mut rng,
        );
        let agent_head = config.agent_feature_dim.map(|adim| {
            let joint = config.hidden + config.embed_dim;
            let mut out_b = TensorData::zeros(vec![4]);
            out_b.data[2] = RAW_STD_INIT;
            out_b.data[3] = RAW_STD_INIT;
            AgentHead {
                embed_w: TensorData::randn(
                    vec![config.embed_dim, adim],
                    1.0 / (adim as f64).sqrt(),
                    &mut rng,
                ),
                embed_b: TensorData::zeros(vec![config.embed_dim]),
                out_w: TensorData::randn(vec![4, joint], 1.0 / (joint as f64).sqrt(), &mut rng),
                out_b,
            }
        });
        Self {
            config,
            encoder,
            layers,
            head_w,
            head_b,
            agent_head,
        }
    }

    /// The "zeroed state vector" the recurrence starts from.
    pub fn zero_state(&self) -> RecurrentState {
        RecurrentState {
            hidden: vec![vec![0.0; self.config.hidden]; self.config.layers],
        }
    }

    /// Stable-order view of every trainable parameter.
    pub fn params(&self) -> Vec<(String, &TensorData)> {
        let mut out: Vec<(String, &TensorData)> = Vec::new();
        match &self.encoder {
            Encoder::Features { w, b } => {
                out.push(("enc_w".into(), w));
                out.push(("enc_b".into(), b));
            }
            Encoder::Conv {
                conv1_w,
                conv1_b,
                conv2_w,
                conv2_b,
                fc_w,
                fc_b,
            } => {
                out.push(("conv1_w".into(), conv1_w));
                out.push(("conv1_b".into(), conv1_b));
                out.push(("conv2_w".into(), conv2_w));
                out.push(("conv2_b".into(), conv2_b));
                out.push(("fc_w".into(), fc_w));
                out.push(("fc_b".into(), fc_b));
            }
        }
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("gru{i}_wz"), &l.w_z));
            out.push((format!("gru{i}_uz"), &l.u_z));
            out.push((format!("gru{i}_bz"), &l.b_z));
            out.push((format!("gru{i}_wr"), &l.w_r));
            out.push((format!("gru{i}_ur"), &l.u_r));
            out.push((format!("gru{i}_br"), &l.b_r));
            out.push((format!("gru{i}_wh"), &l.w_h));
            out.push((format!("gru{i}_uh"), &l.u_h));
            out.push((format!("gru{i}_bh"), &l.b_h));
        }
        out.push(("head_w".into(), &self.head_w));
        out.push(("head_b".into(), &self.head_b));
        if let Some(a) = &self.agent_head {
            out.push(("agent_embed_w".into(), &a.embed_w));
            out.push(("agent_embed_b".into(), &a.embed_b));
            out.push(("agent_out_w".into(), &a.out_w));
            out.push(("agent_out_b".into(), &a.out_b));
        }
        out
    }

    /// Mutable view in the same order as [`Self::params`].
    pub fn params_mut(&mut self) -> Vec<&mut TensorData> {
        let mut out: Vec<&mut TensorData> = Vec::new();
        match &mut self.encoder {
            Encoder::Features { w, b } => {
                out.push(w);
                out.push(b);
            }
            Encoder::Conv {
                conv1_w,
                conv1_b,
                conv2_w,
                conv2_b,
                fc_w,
                fc_b,
            } => {
                out.push(conv1_w);
                out.push(conv1_b);
                out.push(conv2_w);
                out.push(conv2_b);
                out.push(fc_w);
                out.push(fc_b);
            }
        }
        for l in &mut self.layers {
            out.push(&mut l.w_z);
            out.push(&mut l.u_z);
            out.push(&mut l.b_z);
            out.push(&mut l.w_r);
            out.push(&mut l.u_r);
            out.push(&mut l.b_r);
            out.push(&mut l.w_h);
            out.push(&mut l.u_h);
            out.push(&mut l.b_h);
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        if let Some(a) = &mut self.agent_head {
            out.push(&mut a.embed_w);
            out.push(&mut a.embed_b);
            out.push(&mut a.out_w);
            out.push(&mut a.out_b);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn to_params(&self) -> ParamFile {
        let mut pf = ParamFile::new();
        for (name, t) in self.params() {
            pf.push(name, t.clone());
        }
        pf
    }

    pub fn from_params(config: NeuralConfig, mut pf: ParamFile) -> Result<Self> {
        let mut model = Self::new(config, 0);
        let names: Vec<String> = model.params().iter().map(|(n, _)| n.clone()).collect();
        for (name, slot) in names.iter().zip(model.params_mut()) {
            let t = pf
                .take(name)
                .ok_or_else(|| Error::ModelFormat(format!("missing tensor: {name}")))?;
            if t.shape != slot.shape {
                return Err(Error::ModelFormat(format!(
                    "tensor {name}: shape {:?} does not match architecture {:?}",
                    t.shape, slot.shape
                )));
            }
            *slot = t;
        }
        Ok(model)
    }

    /// Write parameters to `path` and the architecture manifest next to it.
    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_params().save(path)?;
        let manifest = serde_json::to_string_pretty(&self.config)?;
        std::fs::write(manifest_path(path), manifest)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let manifest = std::fs::read_to_string(manifest_path(path))?;
        let config: NeuralConfig = serde_json::from_str(&manifest)?;
        Self::from_params(config, ParamFile::load(path)?)
    }

    /// Raw (unnormalized) robot-local observation for this model's encoder;
    /// this is what trace harvesting stores.
    pub fn raw_local_features(
        &self,
        env: &Environment,
        x: &Configuration,
        t: usize,
    ) -> Result<Vec<f64>> {
        match self.config.encoder {
            EncoderKind::Features { dim } => {
                let f = match &env.meta.detail {
                    GeneratorDetail::Passage(_) => env.passage_features(x)?,
                    GeneratorDetail::Roundabout(_) => {
                        // Robot-only slice of the per-agent features.
                        env.agent_features(x, t, 0)?[..3].to_vec()
                    }
                    _ => {
                        return Err(Error::Environment(
                            "feature encoder has no feature source for this environment".into(),
                        ))
                    }
                };
                if f.len() != dim {
                    return Err(Error::InvalidConfig(format!(
                        "feature dim {} does not match encoder dim {dim}",
                        f.len()
                    )));
                }
                Ok(f)
            }
            EncoderKind::Conv { patch } => Ok(env.extract_patch(x, patch).to_f64()),
        }
    }

    /// Scale map-dependent feature entries down by the map scale.
    pub fn normalize_local_raw(&self, raw: &[f64], scale: f64) -> Vec<f64> {
        if self.config.feature_scale_mask.is_empty() {
            return raw.to_vec();
        }
        debug_assert_eq!(raw.len(), self.config.feature_scale_mask.len());
        raw.iter()
            .zip(&self.config.feature_scale_mask)
            .map(|(&v, &scaled)| if scaled { v / scale } else { v })
            .collect()
    }

    /// Normalization for per-agent features
    /// `[cos, sin, goal distance, agent distance, bearing]`.
    pub fn normalize_agent_raw(raw: &[f64], scale: f64) -> Vec<f64> {
        vec![
            raw[0],
            raw[1],
            raw[2] / scale,
            raw[3] / scale,
            raw[4] / std::f64::consts::PI,
        ]
    }

    /// The map scale used to normalize positions and distances.
    pub fn map_scale(env: &Environment) -> f64 {
        env.map.width.max(env.map.height) as f64 * env.map.resolution
    }

    /// Deterministic observation embedding at `x`.
    pub fn encode_observation(
        &self,
        env: &Environment,
        x: &Configuration,
        t: usize,
    ) -> Result<Vec<f64>> {
        let raw = self.raw_local_features(env, x, t)?;
        let norm = match self.config.encoder {
            EncoderKind::Conv { .. } => raw,
            EncoderKind::Features { .. } => self.normalize_local_raw(&raw, Self::map_scale(env)),
        };
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let e = self.encode_graph(&mut g, &bound, &norm);
        Ok(g.value(e).to_vec())
    }

    /// One recurrence step: consumes the observation at `x_prev` and the
    /// optimal direction, returns the new state and the local proposal over
    /// the displacement from `x_prev`.
    pub fn step(
        &self,
        state: &RecurrentState,
        env: &Environment,
        x_prev: &Configuration,
        mu: &Configuration,
        t: usize,
    ) -> Result<(RecurrentState, DiagonalGaussian)> {
        let (next, mut proposals) = self.proposals(state, env, x_prev, mu, t)?;
        Ok((next, proposals.remove(0)))
    }

    /// Local proposal plus one proposal per observed agent (weights shared
    /// across agents). The proposal list is `[local, agent_0, agent_1, ...]`.
    pub fn per_agent_proposals(
        &self,
        state: &RecurrentState,
        env: &Environment,
        x_prev: &Configuration,
        mu: &Configuration,
        t: usize,
    ) -> Result<(RecurrentState, Vec<DiagonalGaussian>)> {
        if env.agents.is_empty() {
            return Err(Error::Environment("per-agent proposals need agents".into()));
        }
        self.proposals(state, env, x_prev, mu, t)
    }

    /// Dispatching entry point used by the planner: per-agent proposals when
    /// the model has an agent head and the environment has agents, otherwise
    /// just the local proposal.
    pub fn proposals(
        &self,
        state: &RecurrentState,
        env: &Environment,
        x_prev: &Configuration,
        mu: &Configuration,
        t: usize,
    ) -> Result<(RecurrentState, Vec<DiagonalGaussian>)> {
        let scale = Self::map_scale(env);
        let raw = self.raw_local_features(env, x_prev, t)?;
        let local = match self.config.encoder {
            EncoderKind::Conv { .. } => raw,
            EncoderKind::Features { .. } => self.normalize_local_raw(&raw, scale),
        };
        let agent_feats = self.agent_feature_set(env, x_prev, t)?;
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let embed = self.encode_graph(&mut g, &bound, &local);
        let state_t: Vec<Tensor> = state.hidden.iter().map(|h| g.constant_vec(h)).collect();
        let (next_t, head) =
            self.run_core_scaled(&mut g, &bound, &state_t, x_prev, mu, embed, scale);
        let mut proposals = vec![head_to_gaussian(&g, head)];
        if let (Some(ba), Some(feats)) = (&bound.agent, &agent_feats) {
            let top = next_t[next_t.len() - 1];
            for f in feats {
                let norm = Self::normalize_agent_raw(f, scale);
                let out = agent_head_graph(&mut g, ba, top, &norm);
                proposals.push(head_to_gaussian(&g, out));
            }
        }
        let next = RecurrentState {
            hidden: next_t.iter().map(|t| g.value(*t).to_vec()).collect(),
        };
        Ok((next, proposals))
    }

    fn agent_feature_set(
        &self,
        env: &Environment,
        x: &Configuration,
        t: usize,
    ) -> Result<Option<Vec<Vec<f64>>>> {
        if self.agent_head.is_none() || env.agents.is_empty() {
            return Ok(None);
        }
        let feats = (0..env.agents.len())
            .map(|i| env.agent_features(x, t, i))
            .collect::<Result<Vec<_>>>()?;
        Ok(Some(feats))
    }

    // ---- graph construction --------------------------------------------

    pub(crate) fn bind(&self, g: &mut Graph, requires_grad: bool) -> BoundModel {
        let enc = match &self.encoder {
            Encoder::Features { w, b } => BoundEncoder::Features {
                w: g.leaf(w, requires_grad),
                b: g.leaf(b, requires_grad),
            },
            Encoder::Conv {
                conv1_w,
                conv1_b,
                conv2_w,
                conv2_b,
                fc_w,
                fc_b,
            } => BoundEncoder::Conv {
                conv1_w: g.leaf(conv1_w, requires_grad),
                conv1_b: g.leaf(conv1_b, requires_grad),
                conv2_w: g.leaf(conv2_w, requires_grad),
                conv2_b: g.leaf(conv2_b, requires_grad),
                fc_w: g.leaf(fc_w, requires_grad),
                fc_b: g.leaf(fc_b, requires_grad),
            },
        };
        let layers = self
            .layers
            .iter()
            .map(|l| BoundGru {
                w_z: g.leaf(&l.w_z, requires_grad),
                u_z: g.leaf(&l.u_z, requires_grad),
                b_z: g.leaf(&l.b_z, requires_grad),
                w_r: g.leaf(&l.w_r, requires_grad),
                u_r: g.leaf(&l.u_r, requires_grad),
                b_r: g.leaf(&l.b_r, requires_grad),
                w_h: g.leaf(&l.w_h, requires_grad),
                u_h: g.leaf(&l.u_h, requires_grad),
                b_h: g.leaf(&l.b_h, requires_grad),
            })
            .collect();
        let agent = self.agent_head.as_ref().map(|a| BoundAgent {
            embed_w: g.leaf(&a.embed_w, requires_grad),
            embed_b: g.leaf(&a.embed_b, requires_grad),
            out_w: g.leaf(&a.out_w, requires_grad),
            out_b: g.leaf(&a.out_b, requires_grad),
        });
        BoundModel {
            encoder: enc,
            layers,
            head_w: g.leaf(&self.head_w, requires_grad),
            head_b: g.leaf(&self.head_b, requires_grad),
            agent,
        }
    }

    /// Ordered leaf list matching [`Self::params`], for gradient readout.
    pub(crate) fn bound_leaves(bound: &BoundModel) -> Vec<Tensor> {
        let mut out = Vec::new();
        match &bound.encoder {
            BoundEncoder::Features { w, b } => out.extend([*w, *b]),
            BoundEncoder::Conv {
                conv1_w,
                conv1_b,
                conv2_w,
                conv2_b,
                fc_w,
                fc_b,
            } => out.extend([*conv1_w, *conv1_b, *conv2_w, *conv2_b, *fc_w, *fc_b]),
        }
        for l in &bound.layers {
            out.extend([
                l.w_z, l.u_z, l.b_z, l.w_r, l.u_r, l.b_r, l.w_h, l.u_h, l.b_h,
            ]);
        }
        out.extend([bound.head_w, bound.head_b]);
        if let Some(a) = &bound.agent {
            out.extend([a.embed_w, a.embed_b, a.out_w, a.out_b]);
        }
        out
    }

    pub(crate) fn encode_graph(&self, g: &mut Graph, bound: &BoundModel, raw: &[f64]) -> Tensor {
        match (&bound.encoder, &self.config.encoder) {
            (BoundEncoder::Features { w, b }, EncoderKind::Features { .. }) => {
                let x = g.constant_vec(raw);
                let wx = g.matvec(*w, x);
                let a = g.add(wx, *b);
                g.tanh(a)
            }
            (
                BoundEncoder::Conv {
                    conv1_w,
                    conv1_b,
                    conv2_w,
                    conv2_b,
                    fc_w,
                    fc_b,
                },
                EncoderKind::Conv { patch },
            ) => {
                let x = g.constant(vec![1, *patch, *patch], raw.to_vec());
                let c1 = g.conv2d(x, *conv1_w, *conv1_b);
                let a1 = g.tanh(c1);
                let p1 = g.max_pool2(a1);
                let c2 = g.conv2d(p1, *conv2_w, *conv2_b);
                let a2 = g.tanh(c2);
                let p2 = g.max_pool2(a2);
                let flat = g.flatten(p2);
                let fx = g.matvec(*fc_w, flat);
                let fa = g.add(fx, *fc_b);
                g.tanh(fa)
            }
            _ => unreachable!("bound encoder kind mismatch"),
        }
    }

    /// Stacked GRU step plus proposal head. Returns new per-layer hidden
    /// tensors and the raw head output `[mean_x, mean_y, raw_std_x, raw_std_y]`.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn run_core_scaled(
        &self,
        g: &mut Graph,
        bound: &BoundModel,
        state: &[Tensor],
        x_prev: &Configuration,
        mu: &Configuration,
        embed: Tensor,
        scale: f64,
    ) -> (Vec<Tensor>, Tensor) {
        let pos = g.constant_vec(&[x_prev.x() / scale, x_prev.y() / scale]);
        let dmu = g.constant_vec(&[mu.x() - x_prev.x(), mu.y() - x_prev.y()]);
        let mut input = g.concat(&[pos, dmu, embed]);
        let mut next = Vec::with_capacity(bound.layers.len());
        for (layer, h) in bound.layers.iter().zip(state) {
            let h_new = gru_step(g, layer, input, *h);
            next.push(h_new);
            input = h_new;
        }
        let hw = g.matvec(bound.head_w, input);
        let head = g.add(hw, bound.head_b);
        (next, head)
    }
}

fn manifest_path(path: &std::path::Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".manifest.json");
    std::path::PathBuf::from(os)
}

pub(crate) struct BoundGru {
    pub w_z: Tensor,
    pub u_z: Tensor,
    pub b_z: Tensor,
    pub w_r: Tensor,
    pub u_r: Tensor,
    pub b_r: Tensor,
    pub w_h: Tensor,
    pub u_h: Tensor,
    pub b_h: Tensor,
}

pub(crate) enum BoundEncoder {
    Features {
        w: Tensor,
        b: Tensor,
    },
    Conv {
        conv1_w: Tensor,
        conv1_b: Tensor,
        conv2_w: Tensor,
        conv2_b: Tensor,
        fc_w: Tensor,
        fc_b: Tensor,
    },
}

pub(crate) struct BoundAgent {
    pub embed_w: Tensor,
    pub embed_b: Tensor,
    pub out_w: Tensor,
    pub out_b: Tensor,
}

pub(crate) struct BoundModel {
    pub encoder: BoundEncoder,
    pub layers: Vec<BoundGru>,
    pub head_w: Tensor,
    pub head_b: Tensor,
    pub agent: Option<BoundAgent>,
}

/// Standard GRU cell: update gate z, reset gate r, candidate h~.
fn gru_step(g: &mut Graph, l: &BoundGru, x: Tensor, h: Tensor) -> Tensor {
    let wzx = g.matvec(l.w_z, x);
    let uzh = g.matvec(l.u_z, h);
    let z_pre0 = g.add(wzx, uzh);
    let z_pre = g.add(z_pre0, l.b_z);
    let z = g.sigmoid(z_pre);

    let wrx = g.matvec(l.w_r, x);
    let urh = g.matvec(l.u_r, h);
    let r_pre0 = g.add(wrx, urh);
    let r_pre = g.add(r_pre0, l.b_r);
    let r = g.sigmoid(r_pre);

    let rh = g.mul(r, h);
    let whx = g.matvec(l.w_h, x);
    let uhrh = g.matvec(l.u_h, rh);
    let h_pre0 = g.add(whx, uhrh);
    let h_pre = g.add(h_pre0, l.b_h);
    let cand = g.tanh(h_pre);

    // h' = h + z * (cand - h)
    let diff = g.sub(cand, h);
    let gated = g.mul(z, diff);
    g.add(h, gated)
}

/// Shared-weight agent head: embed the agent features, join with the top
/// hidden state, and map to a raw proposal.
pub(crate) fn agent_head_graph(
    g: &mut Graph,
    a: &BoundAgent,
    top_hidden: Tensor,
    features: &[f64],
) -> Tensor {
    let f = g.constant_vec(features);
    let ew = g.matvec(a.embed_w, f);
    let ea = g.add(ew, a.embed_b);
    let e = g.tanh(ea);
    let joint = g.concat(&[top_hidden, e]);
    let ow = g.matvec(a.out_w, joint);
    g.add(ow, a.out_b)
}

/// Convert a raw head output tensor into a proposal Gaussian:
/// std = softplus(raw) + floor.
pub(crate) fn head_to_gaussian(g: &Graph, head: Tensor) -> DiagonalGaussian {
    let v = g.value(head);
    let softplus = |x: f64| x.max(0.0) + (-x.abs()).exp().ln_1p();
    DiagonalGaussian::new(
        vec![v[0], v[1]],
        vec![softplus(v[2]) + STD_FLOOR, softplus(v[3]) + STD_FLOOR],
    )
}

/// Graph version of [`head_to_gaussian`]: returns (mean, std) tensors.
pub(crate) fn head_to_gaussian_graph(g: &mut Graph, head: Tensor) -> (Tensor, Tensor) {
    let mean = g.narrow(head, 0, 2);
    let raw = g.narrow(head, 2, 2);
    let sp = g.softplus(raw);
    let std = g.add_const(sp, STD_FLOOR);
    (mean, std)
}
