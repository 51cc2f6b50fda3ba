//! Recurrent steering model: an observation encoder (feature embedding or
//! small CNN over local occupancy patches), a stacked GRU core, a Gaussian
//! proposal head, and optional per-agent proposal heads for multi-agent
//! planning. Steering moves are scored under a mixture of the learned
//! proposals and a Gaussian centered on the optimal point of the unmodified
//! steering function.
//!
//! The same graph-based forward pass serves inference (gradients off) and
//! training (gradients on), so cached planner states and training internals
//! can never drift apart.

mod fastfd;
mod model;
mod score;
mod train;

pub use model::{
    AgentHead, Encoder, EncoderKind, MixtureWeights, NeuralConfig, RecurrentState,
    RecurrentSteeringModel,
};
pub use score::mixture_score;
pub use train::{gradient_check, gradient_check_sampled, GradCheckSummary, TrainObs, TrainStep};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::generators::{gen_bugtrap, gen_narrow_passage, gen_roundabout};
    use crate::env::Configuration;
    use crate::numerics::{gaussian_logpdf, logsumexp, DiagonalGaussian, RngStream, Sgd, LN_2PI};

    fn tiny_passage_config() -> NeuralConfig {
        NeuralConfig {
            hidden: 6,
            layers: 2,
            embed_dim: 4,
            ..NeuralConfig::passage(2.5)
        }
    }

    #[test]
    fn identical_patches_identical_embeddings() {
        let env = gen_bugtrap(5);
        let model = RecurrentSteeringModel::new(NeuralConfig::bugtrap(2.5), 1);
        let x = Configuration::xy(55.0, 55.0);
        let a = model.encode_observation(&env, &x, 0).unwrap();
        let b = model.encode_observation(&env, &x, 0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_weights_zero_embedding() {
        let env = gen_narrow_passage(2, 300, 300);
        let mut model = RecurrentSteeringModel::new(tiny_passage_config(), 1);
        for p in model.params_mut() {
            for v in &mut p.data {
                *v = 0.0;
            }
        }
        let e = model
            .encode_observation(&env, &Configuration::xy(50.0, 50.0), 0)
            .unwrap();
        assert!(e.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_state_zero_weights_proposal_is_bias() {
        let env = gen_narrow_passage(2, 300, 300);
        let mut model = RecurrentSteeringModel::new(tiny_passage_config(), 1);
        for p in model.params_mut() {
            for v in &mut p.data {
                *v = 0.0;
            }
        }
        let state = model.zero_state();
        let (_, prop) = model
            .step(
                &state,
                &env,
                &Configuration::xy(50.0, 50.0),
                &Configuration::xy(55.0, 50.0),
                0,
            )
            .unwrap();
        assert_eq!(prop.mean, vec![0.0, 0.0]);
        // std = softplus(0) + floor
        let want = 2.0f64.ln() + 1e-3;
        for s in prop.std() {
            assert!((s - want).abs() < 1e-12);
        }
    }

    #[test]
    fn step_is_pure_and_deterministic() {
        let env = gen_narrow_passage(3, 300, 300);
        let model = RecurrentSteeringModel::new(tiny_passage_config(), 9);
        let state = model.zero_state();
        let x = Configuration::xy(40.0, 120.0);
        let mu = Configuration::xy(45.0, 118.0);
        let (s1, p1) = model.step(&state, &env, &x, &mu, 0).unwrap();
        let (s2, p2) = model.step(&state, &env, &x, &mu, 0).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(p1, p2);
        assert_ne!(s1, state, "state must advance");
    }

    #[test]
    fn per_agent_proposals_count_and_equivariance() {
        let env = gen_roundabout(7, 3);
        let model = RecurrentSteeringModel::new(NeuralConfig::roundabout(2.5), 4);
        let state = model.zero_state();
        let x = env.start.clone();
        let mu = Configuration::xy(x.x() + 2.0, x.y() + 1.0);
        let (_, props) = model.per_agent_proposals(&state, &env, &x, &mu, 5).unwrap();
        assert_eq!(props.len(), env.agents.len() + 1);

        // Permuting the agent order permutes the agent proposals identically.
        let mut permuted = env.clone();
        permuted.agents.reverse();
        let (_, props_perm) = model
            .per_agent_proposals(&state, &permuted, &x, &mu, 5)
            .unwrap();
        assert_eq!(props[0], props_perm[0], "local proposal unchanged");
        for i in 0..env.agents.len() {
            assert_eq!(props[1 + i], props_perm[env.agents.len() - i]);
        }
    }

    #[test]
    fn per_agent_requires_agents() {
        let env = gen_narrow_passage(2, 300, 300);
        let model = RecurrentSteeringModel::new(NeuralConfig::roundabout(2.5), 4);
        let state = model.zero_state();
        assert!(model
            .per_agent_proposals(&state, &env, &env.start, &env.start, 0)
            .is_err());
    }

    #[test]
    fn single_step_nll_matches_hand_formula() {
        // Independent recomputation of one unrolled step with plain f64 math.
        let config = NeuralConfig {
            hidden: 3,
            layers: 1,
            embed_dim: 2,
            ..NeuralConfig::passage(2.0)
        };
        let model = RecurrentSteeringModel::new(config, 21);
        let scale = 300.0;
        let step = TrainStep {
            x_prev: Configuration::xy(30.0, 60.0),
            x_next: Configuration::xy(33.0, 58.0),
            mu: Configuration::xy(34.0, 61.0),
            obs: TrainObs::Features(vec![12.0, 0.0, 30.0, 60.0]),
        };
        let got = model.nll_loss_value(std::slice::from_ref(&step), scale);

        // Hand-rolled forward pass.
        let matvec = |w: &crate::numerics::TensorData, x: &[f64]| -> Vec<f64> {
            let (m, n) = (w.shape[0], w.shape[1]);
            (0..m)
                .map(|i| (0..n).map(|j| w.data[i * n + j] * x[j]).sum::<f64>())
                .collect()
        };
        let raw = [12.0 / scale, 0.0, 30.0 / scale, 60.0 / scale];
        let (enc_w, enc_b) = match &model.encoder {
            Encoder::Features { w, b } => (w, b),
            _ => unreachable!(),
        };
        let embed: Vec<f64> = matvec(enc_w, &raw)
            .iter()
            .zip(&enc_b.data)
            .map(|(v, b)| (v + b).tanh())
            .collect();
        let mut input = vec![30.0 / scale, 60.0 / scale, 4.0, 1.0];
        input.extend(&embed);
        let l = &model.layers[0];
        let h = vec![0.0; 3];
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let z: Vec<f64> = matvec(&l.w_z, &input)
            .iter()
            .zip(matvec(&l.u_z, &h))
            .zip(&l.b_z.data)
            .map(|((a, b), c)| sig(a + b + c))
            .collect();
        let r: Vec<f64> = matvec(&l.w_r, &input)
            .iter()
            .zip(matvec(&l.u_r, &h))
            .zip(&l.b_r.data)
            .map(|((a, b), c)| sig(a + b + c))
            .collect();
        let rh: Vec<f64> = r.iter().zip(&h).map(|(a, b)| a * b).collect();
        let cand: Vec<f64> = matvec(&l.w_h, &input)
            .iter()
            .zip(matvec(&l.u_h, &rh))
            .zip(&l.b_h.data)
            .map(|((a, b), c)| (a + b + c).tanh())
            .collect();
        let h1: Vec<f64> = h
            .iter()
            .zip(&z)
            .zip(&cand)
            .map(|((h, z), c)| h + z * (c - h))
            .collect();
        let head: Vec<f64> = matvec(&model.head_w, &h1)
            .iter()
            .zip(&model.head_b.data)
            .map(|(a, b)| a + b)
            .collect();
        let softplus = |x: f64| x.max(0.0) + (-x.abs()).exp().ln_1p();
        let prop = DiagonalGaussian::new(
            vec![head[0], head[1]],
            vec![softplus(head[2]) + 1e-3, softplus(head[3]) + 1e-3],
        );
        let delta = [3.0, -2.0];
        let lp_local = gaussian_logpdf(&prop, &delta);
        let s = 2.0;
        let z0 = (delta[0] - 4.0) / s;
        let z1 = (delta[1] - 1.0) / s;
        let lp_rrt = -LN_2PI - 2.0 * s.ln() - 0.5 * (z0 * z0 + z1 * z1);
        let want = -logsumexp(&[0.5f64.ln() + lp_local, 0.5f64.ln() + lp_rrt]);
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }

    #[test]
    fn toy_training_reduces_loss() {
        // Ten traces that always step +x; the model should learn the pattern.
        let mut rng = RngStream::new(77, 0);
        let traces: Vec<Vec<TrainStep>> = (0..10)
            .map(|_| {
                let mut x = rng.uniform(20.0, 260.0);
                let y = rng.uniform(20.0, 260.0);
                (0..6)
                    .map(|_| {
                        let step = TrainStep {
                            x_prev: Configuration::xy(x, y),
                            x_next: Configuration::xy(x + 4.0, y),
                            mu: Configuration::xy(
                                x + rng.uniform(-4.0, 4.0),
                                y + rng.uniform(-4.0, 4.0),
                            ),
                            obs: TrainObs::Features(vec![10.0, 0.0, x, y]),
                        };
                        x += 4.0;
                        step
                    })
                    .collect()
            })
            .collect();
        let mut model = RecurrentSteeringModel::new(tiny_passage_config(), 5);
        let mut opt = Sgd::new(1e-3, 0.9);
        let initial: f64 = traces.iter().map(|t| model.nll_loss_value(t, 300.0)).sum();
        for _ in 0..20 {
            for t in &traces {
                model.train_step(t, 300.0, &mut opt).unwrap();
            }
        }
        let final_loss: f64 = traces.iter().map(|t| model.nll_loss_value(t, 300.0)).sum();
        assert!(
            final_loss < initial,
            "loss did not decrease: {initial} -> {final_loss}"
        );
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = RecurrentSteeringModel::new(NeuralConfig::passage(2.5), 11);
        let b = RecurrentSteeringModel::new(NeuralConfig::passage(2.5), 11);
        assert_eq!(a, b);
        let c = RecurrentSteeringModel::new(NeuralConfig::passage(2.5), 12);
        assert_ne!(a, c);
    }

    #[test]
    fn params_roundtrip_and_shape_mismatch() {
        let model = RecurrentSteeringModel::new(NeuralConfig::roundabout(2.5), 3);
        let back =
            RecurrentSteeringModel::from_params(model.config.clone(), model.to_params()).unwrap();
        assert_eq!(model, back);
        // Wrong architecture rejected.
        assert!(
            RecurrentSteeringModel::from_params(NeuralConfig::passage(2.5), model.to_params())
                .is_err()
        );
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = std::env::temp_dir().join(format!("derrt-model-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.bin");
        let model = RecurrentSteeringModel::new(tiny_passage_config(), 8);
        model.save(&path).unwrap();
        let back = RecurrentSteeringModel::load(&path).unwrap();
        assert_eq!(model, back);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn gradient_check_small_feature_arch() {
        let model = RecurrentSteeringModel::new(tiny_passage_config(), 2);
        let mut rng = RngStream::new(40, 0);
        let steps: Vec<TrainStep> = (0..3)
            .map(|i| {
                let x = 40.0 + 5.0 * i as f64;
                TrainStep {
                    x_prev: Configuration::xy(x, 80.0),
                    x_next: Configuration::xy(
                        x + rng.uniform(-3.0, 5.0),
                        80.0 + rng.uniform(-3.0, 3.0),
                    ),
                    mu: Configuration::xy(
                        x + rng.uniform(-5.0, 5.0),
                        80.0 + rng.uniform(-5.0, 5.0),
                    ),
                    obs: TrainObs::Features(vec![rng.uniform(0.0, 60.0), 0.0, x, 80.0]),
                }
            })
            .collect();
        let summary = gradient_check(&model, &steps, 300.0, 1e-5, 1e-4).unwrap();
        assert_eq!(summary.failures, 0, "max rel err {}", summary.max_rel_err);
        assert_eq!(summary.checked, model.param_count());
    }

    #[test]
    fn gradient_check_small_multiagent_arch() {
        let config = NeuralConfig {
            hidden: 5,
            layers: 2,
            embed_dim: 3,
            ..NeuralConfig::roundabout(2.5)
        };
        let model = RecurrentSteeringModel::new(config, 6);
        let mut rng = RngStream::new(41, 0);
        let steps: Vec<TrainStep> = (0..3)
            .map(|i| {
                let x = 30.0 + 3.0 * i as f64;
                let agents = (0..2)
                    .map(|_| {
                        vec![
                            rng.uniform(-1.0, 1.0),
                            rng.uniform(-1.0, 1.0),
                            rng.uniform(5.0, 70.0),
                            rng.uniform(2.0, 50.0),
                            rng.uniform(-3.0, 3.0),
                        ]
                    })
                    .collect();
                TrainStep {
                    x_prev: Configuration::xy(x, 50.0),
                    x_next: Configuration::xy(
                        x + rng.uniform(-2.0, 4.0),
                        50.0 + rng.uniform(-2.0, 2.0),
                    ),
                    mu: Configuration::xy(
                        x + rng.uniform(-4.0, 4.0),
                        50.0 + rng.uniform(-4.0, 4.0),
                    ),
                    obs: TrainObs::MultiAgent {
                        local: vec![
                            rng.uniform(-1.0, 1.0),
                            rng.uniform(-1.0, 1.0),
                            rng.uniform(10.0, 80.0),
                        ],
                        agents,
                    },
                }
            })
            .collect();
        let summary = gradient_check(&model, &steps, 100.0, 1e-5, 1e-4).unwrap();
        assert_eq!(summary.failures, 0, "max rel err {}", summary.max_rel_err);
    }

    #[test]
    fn nll_empty_trace_panics() {
        let model = RecurrentSteeringModel::new(tiny_passage_config(), 2);
        let result = std::panic::catch_unwind(|| model.nll_loss_value(&[], 300.0));
        assert!(result.is_err());
    }
}
