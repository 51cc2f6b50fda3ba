//! Differentiable trace likelihood and gradient checking.

use crate::env::{Configuration, Patch};
use crate::error::{Error, Result};
use crate::numerics::tensor::grads_agree;
use crate::numerics::{Graph, Sgd, Tensor, LN_2PI};
use crate::util::parallel_map;

use super::model::{agent_head_graph, head_to_gaussian_graph, BoundModel, RecurrentSteeringModel};

/// One supervised step of a harvested trace. Observations are stored raw;
/// the model normalizes them with the map scale at use time.
#[derive(Debug, Clone)]
pub struct TrainStep {
    pub x_prev: Configuration,
    pub x_next: Configuration,
    pub mu: Configuration,
    pub obs: TrainObs,
}

#[derive(Debug, Clone)]
pub enum TrainObs {
    Features(Vec<f64>),
    Patch(Patch),
    MultiAgent {
        local: Vec<f64>,
        agents: Vec<Vec<f64>>,
    },
}

/// Negative log likelihood of one trace under the steering mixture,
/// differentiable end to end through encoder, GRU core, and heads.
pub(crate) fn nll_graph(
    model: &RecurrentSteeringModel,
    g: &mut Graph,
    bound: &BoundModel,
    steps: &[TrainStep],
    scale: f64,
) -> Tensor {
    assert!(!steps.is_empty(), "nll_loss: empty trace");
    let mut state: Vec<Tensor> = model
        .zero_state()
        .hidden
        .iter()
        .map(|h| g.constant_vec(h))
        .collect();
    let mut step_scores = Vec::with_capacity(steps.len());
    for step in steps {
        let (local_raw, agent_raw): (&[f64], Option<&[Vec<f64>]>) = match &step.obs {
            TrainObs::Features(f) => (f, None),
            TrainObs::Patch(_) => (&[], None),
            TrainObs::MultiAgent { local, agents } => (local, Some(agents)),
        };
        let embed = match &step.obs {
            TrainObs::Patch(p) => model.encode_graph(g, bound, &p.to_f64()),
            _ => {
                let norm = model.normalize_local_raw(local_raw, scale);
                model.encode_graph(g, bound, &norm)
            }
        };
        let (next_state, head) =
            model.run_core_scaled(g, bound, &state, &step.x_prev, &step.mu, embed, scale);
        state = next_state;

        let delta = step.x_next.delta(&step.x_prev);
        let (mean, std) = head_to_gaussian_graph(g, head);
        let logp_local = gaussian_logpdf_graph(g, mean, std, &delta);

        let mut component_logps = vec![logp_local];
        if let Some(agents) = agent_raw {
            let ba = bound
                .agent
                .as_ref()
                .expect("multi-agent trace requires an agent head");
            let top = state[state.len() - 1];
            for feats in agents {
                let norm = RecurrentSteeringModel::normalize_agent_raw(feats, scale);
                let out = agent_head_graph(g, ba, top, &norm);
                let (m, s) = head_to_gaussian_graph(g, out);
                component_logps.push(gaussian_logpdf_graph(g, m, s, &delta));
            }
        }

        let weights = model.config.mixture.resolve(component_logps.len());
        let mut terms = Vec::with_capacity(weights.len());
        for (lp, &w) in component_logps.iter().zip(&weights) {
            terms.push(g.add_const(*lp, w.ln()));
        }
        // The component centered on the optimal point has no trainable
        // parameters; fold it in as a constant.
        let rrt_mu = [step.mu.x() - step.x_prev.x(), step.mu.y() - step.x_prev.y()];
        let s = model.config.sigma_rrt;
        let z0 = (delta[0] - rrt_mu[0]) / s;
        let z1 = (delta[1] - rrt_mu[1]) / s;
        let rrt_logp = -LN_2PI - 2.0 * s.ln() - 0.5 * (z0 * z0 + z1 * z1);
        terms.push(g.scalar(weights[weights.len() - 1].ln() + rrt_logp));

        let stacked = g.concat(&terms);
        step_scores.push(g.logsumexp(stacked));
    }
    let all = g.concat(&step_scores);
    let total = g.sum(all);
    g.neg(total)
}

/// `log N(x; mean, diag(std^2))` with `x` constant, as graph ops.
fn gaussian_logpdf_graph(g: &mut Graph, mean: Tensor, std: Tensor, x: &[f64]) -> Tensor {
    let d = x.len() as f64;
    let xc = g.constant_vec(x);
    let diff = g.sub(xc, mean);
    let z = g.div(diff, std);
    let z2 = g.square(z);
    let quad = g.sum(z2);
    let log_std = g.ln(std);
    let log_det = g.sum(log_std);
    let half_quad = g.scale(quad, -0.5);
    let a = g.sub(half_quad, log_det);
    g.add_const(a, -0.5 * d * LN_2PI)
}

/// Global-norm gradient clip. Overconfident proposals near the std floor
/// otherwise produce steps large enough to wreck the parameters.
const GRAD_CLIP: f64 = 25.0;

impl RecurrentSteeringModel {
    /// Loss value without gradients.
    pub fn nll_loss_value(&self, steps: &[TrainStep], scale: f64) -> f64 {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let loss = nll_graph(self, &mut g, &bound, steps, scale);
        g.scalar_value(loss)
    }

    /// One SGD step on one trace, with global-norm gradient clipping.
    /// Returns the pre-step loss.
    pub fn train_step(&mut self, steps: &[TrainStep], scale: f64, opt: &mut Sgd) -> Result<f64> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, true);
        let loss = nll_graph(self, &mut g, &bound, steps, scale);
        let value = g.scalar_value(loss);
        if !value.is_finite() {
            return Err(Error::Diverged(format!("non-finite loss {value}")));
        }
        g.backward(loss);
        let mut grads: Vec<Vec<f64>> = Self::bound_leaves(&bound)
            .iter()
            .map(|t| g.grad(*t).to_vec())
            .collect();
        let norm: f64 = grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if norm > GRAD_CLIP {
            let s = GRAD_CLIP / norm;
            for g in &mut grads {
                for v in g {
                    *v *= s;
                }
            }
        }
        let mut params = self.params_mut();
        opt.step(&mut params, &grads);
        Ok(value)
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckSummary {
    pub checked: usize,
    pub failures: usize,
    pub max_rel_err: f64,
}

/// Central finite-difference check of every trainable parameter against the
/// analytic gradient of the unrolled trace loss. Parallelized over parameter
/// blocks; each worker perturbs its own clone of the model.
pub fn gradient_check(
    model: &RecurrentSteeringModel,
    steps: &[TrainStep],
    scale: f64,
    h: f64,
    rel_tol: f64,
) -> Result<GradCheckSummary> {
    let sizes: Vec<usize> = model.params().iter().map(|(_, t)| t.len()).collect();
    let mut elements = Vec::new();
    for (pi, &len) in sizes.iter().enumerate() {
        for j in 0..len {
            elements.push((pi, j));
        }
    }
    gradient_check_elements(model, steps, scale, h, rel_tol, elements)
}

/// Subsampled variant used as the fast training-entry gate: checks up to
/// `per_tensor` seeded random elements of every parameter tensor.
pub fn gradient_check_sampled(
    model: &RecurrentSteeringModel,
    steps: &[TrainStep],
    scale: f64,
    h: f64,
    rel_tol: f64,
    per_tensor: usize,
    seed: u64,
) -> Result<GradCheckSummary> {
    let mut rng = crate::numerics::RngStream::new(seed, 0x6C47);
    let sizes: Vec<usize> = model.params().iter().map(|(_, t)| t.len()).collect();
    let mut elements = Vec::new();
    for (pi, &len) in sizes.iter().enumerate() {
        if len <= per_tensor {
            elements.extend((0..len).map(|j| (pi, j)));
        } else {
            for _ in 0..per_tensor {
                elements.push((pi, rng.uniform_usize(len)));
            }
        }
    }
    gradient_check_elements(model, steps, scale, h, rel_tol, elements)
}

fn gradient_check_elements(
    model: &RecurrentSteeringModel,
    steps: &[TrainStep],
    scale: f64,
    h: f64,
    rel_tol: f64,
    elements: Vec<(usize, usize)>,
) -> Result<GradCheckSummary> {
    if steps.is_empty() {
        return Err(Error::EmptyDataset("gradient_check: empty trace".into()));
    }
    // Analytic gradients.
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let loss = nll_graph(model, &mut g, &bound, steps, scale);
    g.backward(loss);
    let analytic: Vec<Vec<f64>> = RecurrentSteeringModel::bound_leaves(&bound)
        .iter()
        .map(|t| g.grad(*t).to_vec())
        .collect();

    // Contiguous element ranges, one clone of the model per worker job.
    let total = elements.len();
    let n_jobs = (crate::util::worker_threads() * 4).min(total.max(1));
    let chunk = total.div_ceil(n_jobs);
    let jobs: Vec<&[(usize, usize)]> = elements.chunks(chunk).collect();

    let results = parallel_map(jobs, |chunk| {
        let evaluator = super::fastfd::FdEvaluator::new(model, steps, scale);
        let mut failures = 0usize;
        let mut max_rel: f64 = 0.0;
        for &(pi, j) in chunk {
            let fp = evaluator.loss_with(pi, j, h);
            let fm = evaluator.loss_with(pi, j, -h);
            let fd = (fp - fm) / (2.0 * h);
            let ad = analytic[pi][j];
            let diff = (ad - fd).abs();
            let rel = diff / ad.abs().max(fd.abs()).max(1e-12);
            if !grads_agree(ad, fd, rel_tol) {
                failures += 1;
            }
            if diff >= 1e-7 {
                max_rel = max_rel.max(rel);
            }
        }
        (chunk.len(), failures, max_rel)
    });

    let mut summary = GradCheckSummary {
        checked: 0,
        failures: 0,
        max_rel_err: 0.0,
    };
    for (checked, failures, max_rel) in results {
        summary.checked += checked;
        summary.failures += failures;
        summary.max_rel_err = summary.max_rel_err.max(max_rel);
    }
    Ok(summary)
}
