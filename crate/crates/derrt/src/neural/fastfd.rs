//! Staged loss evaluation for finite-difference checks.
//!
//! A central-difference pass over every parameter re-evaluates the trace
//! loss tens of thousands of times, but a perturbation of one parameter
//! leaves most of the forward computation untouched. [`FdEvaluator`] runs
//! the full forward once, caches per-step stage outputs, and re-computes
//! only the stages downstream of the perturbed tensor. Results agree with
//! the graph loss to float round-off, which is orders of magnitude below
//! the check tolerance.

use crate::numerics::{logsumexp, LN_2PI, STD_FLOOR};

use super::model::{Encoder, EncoderKind, GruLayer, RecurrentSteeringModel};
use super::train::{TrainObs, TrainStep};

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    for i in 0..rows {
        let row = &w[i * cols..(i + 1) * cols];
        let mut acc = 0.0;
        for j in 0..cols {
            acc += row[j] * x[j];
        }
        out[i] = acc;
    }
}

/// Which stage a parameter index belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Conv1,
    Conv2,
    Fc,
    FeatureEnc,
    Recurrent,
}

pub struct FdEvaluator<'a> {
    model: &'a RecurrentSteeringModel,
    steps: &'a [TrainStep],
    scale: f64,
    stages: Vec<Stage>,
    /// Per step: raw encoder input (normalized features or patch values).
    raw_inputs: Vec<Vec<f64>>,
    /// Per step: conv1+pool1 output, `[32, half, half]` flattened (conv path).
    pool1: Vec<Vec<f64>>,
    /// Per step: flattened conv2+pool2 code (conv path).
    flat: Vec<Vec<f64>>,
    /// Per step: observation embedding.
    embeds: Vec<Vec<f64>>,
}

impl<'a> FdEvaluator<'a> {
    pub fn new(model: &'a RecurrentSteeringModel, steps: &'a [TrainStep], scale: f64) -> Self {
        let stages = stage_map(model);
        let mut this = Self {
            model,
            steps,
            scale,
            stages,
            raw_inputs: Vec::with_capacity(steps.len()),
            pool1: Vec::with_capacity(steps.len()),
            flat: Vec::with_capacity(steps.len()),
            embeds: Vec::with_capacity(steps.len()),
        };
        for step in steps {
            let raw = match (&step.obs, &model.config.encoder) {
                (TrainObs::Patch(p), _) => p.to_f64(),
                (TrainObs::Features(f), _) => model.normalize_local_raw(f, scale),
                (TrainObs::MultiAgent { local, .. }, _) => model.normalize_local_raw(local, scale),
            };
            match &model.encoder {
                Encoder::Conv { .. } => {
                    let p1 = this.conv1_forward(&raw, &model.encoder);
                    let flat = this.conv2_forward(&p1, &model.encoder, None);
                    let embed = this.fc_forward(&flat, &model.encoder);
                    this.pool1.push(p1);
                    this.flat.push(flat);
                    this.embeds.push(embed);
                }
                Encoder::Features { .. } => {
                    let embed = this.feature_forward(&raw, &model.encoder);
                    this.pool1.push(Vec::new());
                    this.flat.push(Vec::new());
                    this.embeds.push(embed);
                }
            }
            this.raw_inputs.push(raw);
        }
        this
    }

    /// Loss with `params[pi][j] += delta`, re-computing only affected stages.
    pub fn loss_with(&self, pi: usize, j: usize, delta: f64) -> f64 {
        let mut model = PerturbedModel {
            base: self.model,
            pi,
            j,
            delta,
        };
        match self.stages[pi] {
            Stage::Conv1 => {
                // Everything downstream of the patch changes.
                let embeds: Vec<Vec<f64>> = self
                    .raw_inputs
                    .iter()
                    .map(|raw| {
                        let enc = model.encoder();
                        let p1 = self.conv1_forward_perturbed(raw, &enc, &mut model);
                        let flat = self.conv2_forward(&p1, &enc, None);
                        self.fc_forward(&flat, &enc)
                    })
                    .collect();
                self.recurrent_loss(&embeds, None)
            }
            Stage::Conv2 => {
                // Only one output channel of conv2 changes; patch the cached
                // flat code.
                let names = self.model.params();
                let (name, tensor) = &names[pi];
                let channel = if name == "conv2_w" {
                    j / (tensor.shape[1] * 9)
                } else {
                    j // conv2_b
                };
                let embeds: Vec<Vec<f64>> = self
                    .pool1
                    .iter()
                    .zip(&self.flat)
                    .map(|(p1, flat)| {
                        let enc = model.encoder();
                        let mut patched = flat.clone();
                        self.conv2_channel(p1, &enc, channel, &mut model, &mut patched);
                        self.fc_forward(&patched, &enc)
                    })
                    .collect();
                self.recurrent_loss(&embeds, None)
            }
            Stage::Fc => {
                let embeds: Vec<Vec<f64>> = self
                    .flat
                    .iter()
                    .map(|flat| {
                        let enc = model.encoder();
                        self.fc_forward_perturbed(flat, &enc, &mut model)
                    })
                    .collect();
                self.recurrent_loss(&embeds, None)
            }
            Stage::FeatureEnc => {
                let embeds: Vec<Vec<f64>> = self
                    .raw_inputs
                    .iter()
                    .map(|raw| {
                        let enc = model.encoder();
                        self.feature_forward_perturbed(raw, &enc, &mut model)
                    })
                    .collect();
                self.recurrent_loss(&embeds, None)
            }
            Stage::Recurrent => self.recurrent_loss(&self.embeds, Some(&mut model)),
        }
    }

    // ---- stage forwards ---------------------------------------------------

    fn conv1_forward(&self, patch: &[f64], enc: &Encoder) -> Vec<f64> {
        let Encoder::Conv {
            conv1_w, conv1_b, ..
        } = enc
        else {
            unreachable!()
        };
        conv_pool(
            patch,
            1,
            patch_side(self.model),
            &conv1_w.data,
            &conv1_b.data,
            32,
        )
    }

    fn conv1_forward_perturbed(
        &self,
        patch: &[f64],
        enc: &Encoder,
        pm: &mut PerturbedModel,
    ) -> Vec<f64> {
        let Encoder::Conv {
            conv1_w, conv1_b, ..
        } = enc
        else {
            unreachable!()
        };
        let w = pm.tensor_data("conv1_w", &conv1_w.data);
        let b = pm.tensor_data("conv1_b", &conv1_b.data);
        conv_pool(patch, 1, patch_side(self.model), &w, &b, 32)
    }

    fn conv2_forward(
        &self,
        p1: &[f64],
        enc: &Encoder,
        _pm: Option<&mut PerturbedModel>,
    ) -> Vec<f64> {
        let Encoder::Conv {
            conv2_w, conv2_b, ..
        } = enc
        else {
            unreachable!()
        };
        let side = (patch_side(self.model) - 2) / 2;
        conv_pool(p1, 32, side, &conv2_w.data, &conv2_b.data, 64)
    }

    /// Recompute a single conv2 output channel into `flat`.
    fn conv2_channel(
        &self,
        p1: &[f64],
        enc: &Encoder,
        channel: usize,
        pm: &mut PerturbedModel,
        flat: &mut [f64],
    ) {
        let Encoder::Conv {
            conv2_w, conv2_b, ..
        } = enc
        else {
            unreachable!()
        };
        let w = pm.tensor_data("conv2_w", &conv2_w.data);
        let b = pm.tensor_data("conv2_b", &conv2_b.data);
        let side = (patch_side(self.model) - 2) / 2;
        let single = conv_pool_channel(p1, 32, side, &w, &b, channel);
        let out_per_channel = single.len();
        flat[channel * out_per_channel..(channel + 1) * out_per_channel].copy_from_slice(&single);
    }

    fn fc_forward(&self, flat: &[f64], enc: &Encoder) -> Vec<f64> {
        let Encoder::Conv { fc_w, fc_b, .. } = enc else {
            unreachable!()
        };
        affine_tanh(&fc_w.data, &fc_b.data, flat)
    }

    fn fc_forward_perturbed(
        &self,
        flat: &[f64],
        enc: &Encoder,
        pm: &mut PerturbedModel,
    ) -> Vec<f64> {
        let Encoder::Conv { fc_w, fc_b, .. } = enc else {
            unreachable!()
        };
        let w = pm.tensor_data("fc_w", &fc_w.data);
        let b = pm.tensor_data("fc_b", &fc_b.data);
        affine_tanh(&w, &b, flat)
    }

    fn feature_forward(&self, raw: &[f64], enc: &Encoder) -> Vec<f64> {
        let Encoder::Features { w, b } = enc else {
            unreachable!()
        };
        affine_tanh(&w.data, &b.data, raw)
    }

    fn feature_forward_perturbed(
        &self,
        raw: &[f64],
        enc: &Encoder,
        pm: &mut PerturbedModel,
    ) -> Vec<f64> {
        let Encoder::Features { w, b } = enc else {
            unreachable!()
        };
        let wd = pm.tensor_data("enc_w", &w.data);
        let bd = pm.tensor_data("enc_b", &b.data);
        affine_tanh(&wd, &bd, raw)
    }

    /// Unrolled recurrence, heads, and mixture loss from per-step embeddings.
    fn recurrent_loss(&self, embeds: &[Vec<f64>], mut pm: Option<&mut PerturbedModel>) -> f64 {
        let model = self.model;
        let hidden = model.config.hidden;
        let mut states: Vec<Vec<f64>> = vec![vec![0.0; hidden]; model.config.layers];
        let mut total = 0.0;
        for (step, embed) in self.steps.iter().zip(embeds) {
            let mut input = vec![
                step.x_prev.x() / self.scale,
                step.x_prev.y() / self.scale,
                step.mu.x() - step.x_prev.x(),
                step.mu.y() - step.x_prev.y(),
            ];
            input.extend_from_slice(embed);
            for (li, layer) in model.layers.iter().enumerate() {
                let h_new = gru_step_plain(layer, &input, &states[li], li, &mut pm);
                states[li] = h_new;
                input = states[li].clone();
            }
            let top = &states[model.config.layers - 1];

            let head_w = pm_data(&mut pm, "head_w", &model.head_w.data);
            let head_b = pm_data(&mut pm, "head_b", &model.head_b.data);
            let mut head = vec![0.0; 4];
            matvec(&head_w, 4, hidden, top, &mut head);
            for (h, b) in head.iter_mut().zip(head_b.iter()) {
                *h += b;
            }

            let delta = [
                step.x_next.x() - step.x_prev.x(),
                step.x_next.y() - step.x_prev.y(),
            ];
            let mut component_logps = vec![gaussian_term(&delta, &head[0..2], &[head[2], head[3]])];
            if let TrainObs::MultiAgent { agents, .. } = &step.obs {
                let a = model.agent_head.as_ref().expect("agent head");
                let embed_w = pm_data(&mut pm, "agent_embed_w", &a.embed_w.data);
                let embed_b = pm_data(&mut pm, "agent_embed_b", &a.embed_b.data);
                let out_w = pm_data(&mut pm, "agent_out_w", &a.out_w.data);
                let out_b = pm_data(&mut pm, "agent_out_b", &a.out_b.data);
                let edim = model.config.embed_dim;
                for feats in agents {
                    let norm = RecurrentSteeringModel::normalize_agent_raw(feats, self.scale);
                    let e = affine_tanh(&embed_w, &embed_b, &norm);
                    let mut joint = top.clone();
                    joint.extend_from_slice(&e);
                    let mut out = vec![0.0; 4];
                    matvec(&out_w, 4, hidden + edim, &joint, &mut out);
                    for (o, b) in out.iter_mut().zip(out_b.iter()) {
                        *o += b;
                    }
                    component_logps.push(gaussian_term(&delta, &out[0..2], &[out[2], out[3]]));
                }
            }
            let weights = model.config.mixture.resolve(component_logps.len());
            let mut terms: Vec<f64> = component_logps
                .iter()
                .zip(&weights)
                .map(|(lp, w)| lp + w.ln())
                .collect();
            let s = model.config.sigma_rrt;
            let z0 = (delta[0] - (step.mu.x() - step.x_prev.x())) / s;
            let z1 = (delta[1] - (step.mu.y() - step.x_prev.y())) / s;
            let rrt_logp = -LN_2PI - 2.0 * s.ln() - 0.5 * (z0 * z0 + z1 * z1);
            terms.push(weights[weights.len() - 1].ln() + rrt_logp);
            total += logsumexp(&terms);
        }
        -total
    }
}

fn pm_data(pm: &mut Option<&mut PerturbedModel>, name: &str, base: &[f64]) -> Vec<f64> {
    match pm {
        Some(p) => p.tensor_data(name, base),
        None => base.to_vec(),
    }
}

fn patch_side(model: &RecurrentSteeringModel) -> usize {
    match model.config.encoder {
        EncoderKind::Conv { patch } => patch,
        EncoderKind::Features { .. } => 0,
    }
}

/// conv (3x3, valid) + tanh + 2x2/2 max pool over all output channels.
fn conv_pool(
    input: &[f64],
    c_in: usize,
    side: usize,
    w: &[f64],
    b: &[f64],
    c_out: usize,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(c_out * ((side - 2) / 2) * ((side - 2) / 2));
    for o in 0..c_out {
        out.extend(conv_pool_channel(input, c_in, side, w, b, o));
    }
    out
}

fn conv_pool_channel(
    input: &[f64],
    c_in: usize,
    side: usize,
    w: &[f64],
    b: &[f64],
    o: usize,
) -> Vec<f64> {
    let oc = side - 2;
    let mut conv = vec![0.0; oc * oc];
    for i in 0..oc {
        for jj in 0..oc {
            let mut acc = b[o];
            for c in 0..c_in {
                let wbase = ((o * c_in + c) * 3) * 3;
                let ibase = c * side * side;
                for u in 0..3 {
                    let irow = ibase + (i + u) * side + jj;
                    let wrow = wbase + u * 3;
                    acc += w[wrow] * input[irow]
                        + w[wrow + 1] * input[irow + 1]
                        + w[wrow + 2] * input[irow + 2];
                }
            }
            conv[i * oc + jj] = acc.tanh();
        }
    }
    let half = oc / 2;
    let mut pooled = vec![0.0; half * half];
    for i in 0..half {
        for jj in 0..half {
            let i0 = 2 * i * oc + 2 * jj;
            pooled[i * half + jj] = conv[i0]
                .max(conv[i0 + 1])
                .max(conv[i0 + oc])
                .max(conv[i0 + oc + 1]);
        }
    }
    pooled
}

fn affine_tanh(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let rows = b.len();
    let cols = x.len();
    let mut out = vec![0.0; rows];
    matvec(w, rows, cols, x, &mut out);
    out.iter().zip(b).map(|(v, b)| (v + b).tanh()).collect()
}

fn gru_step_plain(
    layer: &GruLayer,
    x: &[f64],
    h: &[f64],
    layer_index: usize,
    pm: &mut Option<&mut PerturbedModel>,
) -> Vec<f64> {
    let hidden = h.len();
    let input = x.len();
    let get = |pm: &mut Option<&mut PerturbedModel>, suffix: &str, base: &[f64]| -> Vec<f64> {
        pm_data(pm, &format!("gru{layer_index}_{suffix}"), base)
    };
    let w_z = get(pm, "wz", &layer.w_z.data);
    let u_z = get(pm, "uz", &layer.u_z.data);
    let b_z = get(pm, "bz", &layer.b_z.data);
    let w_r = get(pm, "wr", &layer.w_r.data);
    let u_r = get(pm, "ur", &layer.u_r.data);
    let b_r = get(pm, "br", &layer.b_r.data);
    let w_h = get(pm, "wh", &layer.w_h.data);
    let u_h = get(pm, "uh", &layer.u_h.data);
    let b_h = get(pm, "bh", &layer.b_h.data);

    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let mut wx = vec![0.0; hidden];
    let mut uh = vec![0.0; hidden];
    matvec(&w_z, hidden, input, x, &mut wx);
    matvec(&u_z, hidden, hidden, h, &mut uh);
    let z: Vec<f64> = (0..hidden).map(|i| sig(wx[i] + uh[i] + b_z[i])).collect();
    matvec(&w_r, hidden, input, x, &mut wx);
    matvec(&u_r, hidden, hidden, h, &mut uh);
    let r: Vec<f64> = (0..hidden).map(|i| sig(wx[i] + uh[i] + b_r[i])).collect();
    let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
    matvec(&w_h, hidden, input, x, &mut wx);
    matvec(&u_h, hidden, hidden, &rh, &mut uh);
    let cand: Vec<f64> = (0..hidden)
        .map(|i| (wx[i] + uh[i] + b_h[i]).tanh())
        .collect();
    (0..hidden)
        .map(|i| h[i] + z[i] * (cand[i] - h[i]))
        .collect()
}

/// `log N(delta; mean, diag(softplus(raw)+floor))`, matching the graph path.
fn gaussian_term(delta: &[f64], mean: &[f64], raw_std: &[f64]) -> f64 {
    let mut quad = 0.0;
    let mut log_det = 0.0;
    for i in 0..2 {
        let std = softplus(raw_std[i]) + STD_FLOOR;
        let z = (delta[i] - mean[i]) / std;
        quad += z * z;
        log_det += std.ln();
    }
    -LN_2PI - log_det - 0.5 * quad
}

/// View of the model with one parameter element offset by `delta`.
struct PerturbedModel<'a> {
    base: &'a RecurrentSteeringModel,
    pi: usize,
    j: usize,
    delta: f64,
}

impl PerturbedModel<'_> {
    fn encoder(&self) -> Encoder {
        self.base.encoder.clone()
    }

    /// Tensor values with the perturbation applied when `name` is the
    /// perturbed tensor.
    fn tensor_data(&mut self, name: &str, base: &[f64]) -> Vec<f64> {
        let params = self.base.params();
        let mut out = base.to_vec();
        if params[self.pi].0 == name {
            out[self.j] += self.delta;
        }
        out
    }
}

fn stage_map(model: &RecurrentSteeringModel) -> Vec<Stage> {
    model
        .params()
        .iter()
        .map(|(name, _)| match name.as_str() {
            "conv1_w" | "conv1_b" => Stage::Conv1,
            "conv2_w" | "conv2_b" => Stage::Conv2,
            "fc_w" | "fc_b" => Stage::Fc,
            "enc_w" | "enc_b" => Stage::FeatureEnc,
            _ => Stage::Recurrent,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Configuration;
    use crate::neural::NeuralConfig;
    use crate::numerics::RngStream;

    fn trap_steps(rng: &mut RngStream) -> Vec<TrainStep> {
        (0..3)
            .map(|i| {
                let x = 50.0 + 4.0 * i as f64;
                let cells: Vec<u8> = (0..21 * 21)
                    .map(|j| ((j * 7 + i * 13) % 5 == 0) as u8)
                    .collect();
                TrainStep {
                    x_prev: Configuration::xy(x, 55.0),
                    x_next: Configuration::xy(
                        x + rng.uniform(-3.0, 5.0),
                        55.0 + rng.uniform(-3.0, 3.0),
                    ),
                    mu: Configuration::xy(
                        x + rng.uniform(-5.0, 5.0),
                        55.0 + rng.uniform(-5.0, 5.0),
                    ),
                    obs: TrainObs::Patch(crate::env::Patch { size: 21, cells }),
                }
            })
            .collect()
    }

    #[test]
    fn staged_loss_matches_graph_loss() {
        let mut rng = RngStream::new(91, 0);
        let model = RecurrentSteeringModel::new(NeuralConfig::bugtrap(4.0), 7);
        let steps = trap_steps(&mut rng);
        let evaluator = FdEvaluator::new(&model, &steps, 110.0);
        let graph_loss = model.nll_loss_value(&steps, 110.0);
        // Unperturbed evaluation through every stage path.
        let sizes: Vec<usize> = model.params().iter().map(|(_, t)| t.len()).collect();
        for (pi, &len) in sizes.iter().enumerate() {
            let staged = evaluator.loss_with(pi, len / 2, 0.0);
            assert!(
                (staged - graph_loss).abs() < 1e-9,
                "param {pi}: staged {staged} vs graph {graph_loss}"
            );
        }
    }

    #[test]
    fn staged_perturbation_matches_graph_perturbation() {
        let mut rng = RngStream::new(92, 0);
        let model = RecurrentSteeringModel::new(NeuralConfig::bugtrap(4.0), 8);
        let steps = trap_steps(&mut rng);
        let evaluator = FdEvaluator::new(&model, &steps, 110.0);
        let sizes: Vec<usize> = model.params().iter().map(|(_, t)| t.len()).collect();
        for (pi, &len) in sizes.iter().enumerate() {
            for &frac in &[0usize, 1, 2] {
                let j = (len.saturating_sub(1)) * frac / 2;
                let staged = evaluator.loss_with(pi, j, 1e-4);
                let mut perturbed = model.clone();
                perturbed.params_mut()[pi].data[j] += 1e-4;
                let want = perturbed.nll_loss_value(&steps, 110.0);
                assert!(
                    (staged - want).abs() < 1e-9,
                    "param {pi}[{j}]: staged {staged} vs graph {want}"
                );
            }
        }
    }

    #[test]
    fn staged_loss_matches_for_multiagent_arch() {
        let mut rng = RngStream::new(93, 0);
        let config = NeuralConfig {
            hidden: 6,
            layers: 2,
            embed_dim: 4,
            ..NeuralConfig::roundabout(2.5)
        };
        let model = RecurrentSteeringModel::new(config, 3);
        let steps: Vec<TrainStep> = (0..3)
            .map(|i| {
                let x = 30.0 + 3.0 * i as f64;
                TrainStep {
                    x_prev: Configuration::xy(x, 50.0),
                    x_next: Configuration::xy(x + 2.0, 49.0),
                    mu: Configuration::xy(x + 3.0, 52.0),
                    obs: TrainObs::MultiAgent {
                        local: vec![rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), 40.0],
                        agents: vec![
                            vec![0.5, -0.5, 30.0, 12.0, 1.0],
                            vec![-0.2, 0.8, 35.0, 20.0, -2.0],
                        ],
                    },
                }
            })
            .collect();
        let evaluator = FdEvaluator::new(&model, &steps, 100.0);
        let graph_loss = model.nll_loss_value(&steps, 100.0);
        let sizes: Vec<usize> = model.params().iter().map(|(_, t)| t.len()).collect();
        for (pi, &len) in sizes.iter().enumerate() {
            let staged = evaluator.loss_with(pi, len - 1, 0.0);
            assert!((staged - graph_loss).abs() < 1e-9, "param {pi}");
        }
    }
}
