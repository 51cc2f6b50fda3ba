//! Discrete-state hidden Markov model with diagonal-Gaussian emissions over
//! engineered features, used as a steering model.
//!
//! Scoring is incremental: the likelihood of a whole path decomposes into the
//! prefix already paid for (cached per tree node as a [`ForwardState`]) plus
//! one forward-recursion update for the new step. Training is Baum-Welch with
//! a seeded k-means initialization.

use serde::{Deserialize, Serialize};

use crate::env::Configuration;
use crate::error::{Error, Result};
use crate::numerics::{
    gaussian_logpdf, logsumexp, DiagonalGaussian, ParamFile, RngStream, TensorData,
};

/// Variance floor applied in the M-step; keeps the binary in-passage feature
/// from collapsing a state's emission to a point mass.
pub const VAR_FLOOR: f64 = 1e-4;

/// Gaussian-emission HMM. `log_a[i * k + j]` is `log P(state j | state i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmmModel {
    pub log_pi: Vec<f64>,
    pub log_a: Vec<f64>,
    pub emissions: Vec<DiagonalGaussian>,
}

/// Cached tail of the forward lattice: normalized log alpha plus the log
/// likelihood already accumulated along the path. `steps` counts observations
/// consumed so far; the first observation is weighted by the initial
/// distribution rather than a transition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardState {
    pub log_alpha: Vec<f64>,
    pub log_likelihood_prefix: f64,
    pub steps: usize,
}

impl HmmModel {
    pub fn k(&self) -> usize {
        self.log_pi.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.emissions[0].dim()
    }

    /// Check normalization invariants: `log_pi` and every row of `log_a`
    /// must sum to one within 1e-9, and emission dimensions must agree.
    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        if k == 0 || self.log_a.len() != k * k || self.emissions.len() != k {
            return Err(Error::InvalidConfig("inconsistent HMM shape".into()));
        }
        if logsumexp(&self.log_pi).abs() > 1e-9 {
            return Err(Error::InvalidConfig(
                "initial distribution not normalized".into(),
            ));
        }
        for i in 0..k {
            if logsumexp(&self.log_a[i * k..(i + 1) * k]).abs() > 1e-9 {
                return Err(Error::InvalidConfig(format!(
                    "transition row {i} not normalized"
                )));
            }
        }
        let f = self.feature_dim();
        if self.emissions.iter().any(|e| e.dim() != f) {
            return Err(Error::InvalidConfig("emission dimensions differ".into()));
        }
        Ok(())
    }

    /// State before any observation: `log_alpha = log_pi`, prefix 0.
    pub fn forward_init(&self) -> ForwardState {
        ForwardState {
            log_alpha: self.log_pi.clone(),
            log_likelihood_prefix: 0.0,
            steps: 0,
        }
    }

    /// `premix[j] = logsumexp_i(log_alpha[i] + log_a[i][j])`: the transition
    /// part of a forward step, shared by every candidate scored from `state`.
    /// Before the first observation this is the initial distribution itself.
    pub fn premix(&self, state: &ForwardState) -> Vec<f64> {
        if state.steps == 0 {
            return self.log_pi.clone();
        }
        let k = self.k();
        let mut premix = vec![0.0; k];
        let mut scratch = vec![0.0; k];
        for j in 0..k {
            for i in 0..k {
                scratch[i] = state.log_alpha[i] + self.log_a[i * k + j];
            }
            premix[j] = logsumexp(&scratch);
        }
        premix
    }

    fn emit_logs(&self, feature: &[f64]) -> Vec<f64> {
        self.emissions
            .iter()
            .map(|e| gaussian_logpdf(e, feature))
            .collect()
    }

    /// One forward recursion step. Returns the updated state and the log
    /// likelihood contribution of `feature` given the prefix.
    pub fn forward_step(&self, state: &ForwardState, feature: &[f64]) -> (ForwardState, f64) {
        assert!(
            feature.iter().all(|v| v.is_finite()),
            "forward_step: non-finite feature"
        );
        let premix = self.premix(state);
        let emit = self.emit_logs(feature);
        let mut un_normalized: Vec<f64> = premix.iter().zip(&emit).map(|(p, e)| p + e).collect();
        let delta = logsumexp(&un_normalized);
        for v in &mut un_normalized {
            *v -= delta;
        }
        (
            ForwardState {
                log_alpha: un_normalized,
                log_likelihood_prefix: state.log_likelihood_prefix + delta,
                steps: state.steps + 1,
            },
            delta,
        )
    }

    /// Log likelihood `forward_step` would report for `feature`, without
    /// mutating anything. Pure scoring for candidate selection.
    pub fn score_feature(&self, state: &ForwardState, feature: &[f64]) -> f64 {
        let premix = self.premix(state);
        self.score_with_premix(&premix, feature)
    }

    /// Candidate scoring against a precomputed transition premix.
    pub fn score_with_premix(&self, premix: &[f64], feature: &[f64]) -> f64 {
        let emit = self.emit_logs(feature);
        let combined: Vec<f64> = premix.iter().zip(&emit).map(|(p, e)| p + e).collect();
        logsumexp(&combined)
    }

    /// Persist with tensor names `pi`, `A`, `emission_mean_k`,
    /// `emission_logstd_k`. `pi` and `A` hold log-probabilities.
    pub fn to_params(&self) -> ParamFile {
        let k = self.k();
        let f = self.feature_dim();
        let mut pf = ParamFile::new();
        pf.push("pi", TensorData::new(vec![k], self.log_pi.clone()));
        pf.push("A", TensorData::new(vec![k, k], self.log_a.clone()));
        for (i, e) in self.emissions.iter().enumerate() {
            pf.push(
                format!("emission_mean_{i}"),
                TensorData::new(vec![f], e.mean.clone()),
            );
            pf.push(
                format!("emission_logstd_{i}"),
                TensorData::new(vec![f], e.log_std.clone()),
            );
        }
        pf
    }

    pub fn from_params(mut pf: ParamFile) -> Result<Self> {
        let pi = pf
            .take("pi")
            .ok_or_else(|| Error::ModelFormat("missing tensor: pi".into()))?;
        let a = pf
            .take("A")
            .ok_or_else(|| Error::ModelFormat("missing tensor: A".into()))?;
        let k = pi.data.len();
        let mut emissions = Vec::with_capacity(k);
        for i in 0..k {
            let mean = pf
                .take(&format!("emission_mean_{i}"))
                .ok_or_else(|| Error::ModelFormat(format!("missing emission_mean_{i}")))?;
            let log_std = pf
                .take(&format!("emission_logstd_{i}"))
                .ok_or_else(|| Error::ModelFormat(format!("missing emission_logstd_{i}")))?;
            emissions.push(DiagonalGaussian {
                mean: mean.data,
                log_std: log_std.data,
            });
        }
        let model = HmmModel {
            log_pi: pi.data,
            log_a: a.data,
            emissions,
        };
        model.validate()?;
        Ok(model)
    }
}

/// Emission feature for one steering step: the deviation of the hypothesized
/// position from the optimal steering point, concatenated with environment
/// features observed at the hypothesized position.
pub fn emission_feature(
    x_nearest: &Configuration,
    x_next: &Configuration,
    mu: &Configuration,
    obs: &[f64],
) -> Vec<f64> {
    debug_assert_eq!(x_nearest.dim(), x_next.dim());
    debug_assert_eq!(x_next.dim(), mu.dim());
    let mut feature = x_next.delta(mu);
    feature.extend_from_slice(obs);
    feature
}

/// Baum-Welch over sequences of feature vectors.
///
/// Initialization assigns responsibilities from a seeded k-means clustering
/// of all feature vectors. Iterates until the total log likelihood improves
/// by less than `tol` or `max_iters` is hit. Returns the fitted model and the
/// per-iteration log-likelihood curve.
pub fn em_fit(
    sequences: &[Vec<Vec<f64>>],
    k: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
) -> Result<(HmmModel, Vec<f64>)> {
    let f = if sequences.is_empty() {
        0
    } else {
        sequences[0][0].len()
    };
    em_fit_with_floors(sequences, k, seed, max_iters, tol, &vec![VAR_FLOOR; f])
}

/// As [`em_fit`] with a per-dimension variance floor. Steering-deviation
/// dimensions use a floor on the steering-radius scale so the fitted
/// emission acts as a finite preference for the optimal point rather than a
/// point mass on it.
pub fn em_fit_with_floors(
    sequences: &[Vec<Vec<f64>>],
    k: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
    var_floors: &[f64],
) -> Result<(HmmModel, Vec<f64>)> {
    if sequences.is_empty() {
        return Err(Error::EmptyDataset("em_fit: no sequences".into()));
    }
    if sequences.iter().any(|s| s.len() < 2) {
        return Err(Error::EmptyDataset(
            "em_fit: every sequence needs length >= 2".into(),
        ));
    }
    assert!(k >= 1, "em_fit: k must be positive");
    let f = sequences[0][0].len();
    assert!(
        sequences.iter().flatten().all(|v| v.len() == f),
        "em_fit: inconsistent feature dimensions"
    );
    assert_eq!(
        var_floors.len(),
        f,
        "em_fit: one variance floor per dimension"
    );

    let mut model = init_from_kmeans(sequences, k, f, seed, var_floors);
    let mut curve = Vec::with_capacity(max_iters);
    let mut last_ll = f64::NEG_INFINITY;
    for _ in 0..max_iters {
        let (stats, ll) = e_step(&model, sequences);
        curve.push(ll);
        m_step(&mut model, &stats, sequences, var_floors);
        if ll - last_ll < tol && last_ll.is_finite() {
            break;
        }
        last_ll = ll;
    }
    model.validate()?;
    Ok((model, curve))
}

struct SufficientStats {
    /// Responsibilities gamma, flattened per sequence: `[t * k + j]`.
    gammas: Vec<Vec<f64>>,
    /// Expected transition counts, `k * k`.
    xi_sum: Vec<f64>,
    /// gamma at t = 0, summed over sequences.
    pi_counts: Vec<f64>,
}

fn e_step(model: &HmmModel, sequences: &[Vec<Vec<f64>>]) -> (SufficientStats, f64) {
    let k = model.k();
    let mut total_ll = 0.0;
    let mut gammas = Vec::with_capacity(sequences.len());
    let mut xi_sum = vec![0.0; k * k];
    let mut pi_counts = vec![0.0; k];

    for seq in sequences {
        let t_len = seq.len();
        let emit: Vec<Vec<f64>> = seq.iter().map(|o| model.emit_logs(o)).collect();

        // Normalized forward pass; norms[t] is the per-step log normalizer.
        let mut log_alpha = vec![vec![0.0; k]; t_len];
        let mut norms = vec![0.0; t_len];
        for j in 0..k {
            log_alpha[0][j] = model.log_pi[j] + emit[0][j];
        }
        norms[0] = logsumexp(&log_alpha[0]);
        for j in 0..k {
            log_alpha[0][j] -= norms[0];
        }
        let mut scratch = vec![0.0; k];
        for t in 1..t_len {
            for j in 0..k {
                for i in 0..k {
                    scratch[i] = log_alpha[t - 1][i] + model.log_a[i * k + j];
                }
                log_alpha[t][j] = logsumexp(&scratch) + emit[t][j];
            }
            norms[t] = logsumexp(&log_alpha[t]);
            for j in 0..k {
                log_alpha[t][j] -= norms[t];
            }
        }
        total_ll += norms.iter().sum::<f64>();

        // Backward pass normalized by the same constants.
        let mut log_beta = vec![vec![0.0; k]; t_len];
        for t in (0..t_len - 1).rev() {
            for i in 0..k {
                for j in 0..k {
                    scratch[j] = model.log_a[i * k + j] + emit[t + 1][j] + log_beta[t + 1][j];
                }
                log_beta[t][i] = logsumexp(&scratch) - norms[t + 1];
            }
        }

        let mut gamma = vec![0.0; t_len * k];
        for t in 0..t_len {
            for j in 0..k {
                scratch[j] = log_alpha[t][j] + log_beta[t][j];
            }
            let norm = logsumexp(&scratch);
            for j in 0..k {
                gamma[t * k + j] = (scratch[j] - norm).exp();
            }
        }
        for j in 0..k {
            pi_counts[j] += gamma[j];
        }
        for t in 0..t_len - 1 {
            // xi_t(i,j) proportional to alpha_t(i) A_ij B_j(o_{t+1}) beta_{t+1}(j)
            let mut logs = vec![0.0; k * k];
            for i in 0..k {
                for j in 0..k {
                    logs[i * k + j] = log_alpha[t][i]
                        + model.log_a[i * k + j]
                        + emit[t + 1][j]
                        + log_beta[t + 1][j];
                }
            }
            let norm = logsumexp(&logs);
            for idx in 0..k * k {
                xi_sum[idx] += (logs[idx] - norm).exp();
            }
        }
        gammas.push(gamma);
    }

    (
        SufficientStats {
            gammas,
            xi_sum,
            pi_counts,
        },
        total_ll,
    )
}

fn m_step(
    model: &mut HmmModel,
    stats: &SufficientStats,
    sequences: &[Vec<Vec<f64>>],
    var_floors: &[f64],
) {
    let k = model.k();
    let f = model.feature_dim();
    const SMOOTH: f64 = 1e-10;

    let pi_total: f64 = stats.pi_counts.iter().sum::<f64>() + SMOOTH * k as f64;
    for j in 0..k {
        model.log_pi[j] = ((stats.pi_counts[j] + SMOOTH) / pi_total).ln();
    }
    for i in 0..k {
        let row_total: f64 =
            stats.xi_sum[i * k..(i + 1) * k].iter().sum::<f64>() + SMOOTH * k as f64;
        for j in 0..k {
            model.log_a[i * k + j] = ((stats.xi_sum[i * k + j] + SMOOTH) / row_total).ln();
        }
    }

    for j in 0..k {
        let mut weight = 0.0;
        let mut mean = vec![0.0; f];
        for (seq, gamma) in sequences.iter().zip(&stats.gammas) {
            for (t, obs) in seq.iter().enumerate() {
                let g = gamma[t * k + j];
                weight += g;
                for d in 0..f {
                    mean[d] += g * obs[d];
                }
            }
        }
        if weight < 1e-12 {
            continue; // starving state: keep its previous emission
        }
        for m in &mut mean {
            *m /= weight;
        }
        let mut var = vec![0.0; f];
        for (seq, gamma) in sequences.iter().zip(&stats.gammas) {
            for (t, obs) in seq.iter().enumerate() {
                let g = gamma[t * k + j];
                for d in 0..f {
                    let diff = obs[d] - mean[d];
                    var[d] += g * diff * diff;
                }
            }
        }
        let std: Vec<f64> = var
            .iter()
            .zip(var_floors)
            .map(|(v, floor)| (v / weight).max(*floor).sqrt())
            .collect();
        model.emissions[j] = DiagonalGaussian::new(mean, std);
    }
}

fn init_from_kmeans(
    sequences: &[Vec<Vec<f64>>],
    k: usize,
    f: usize,
    seed: u64,
    var_floors: &[f64],
) -> HmmModel {
    let points: Vec<&Vec<f64>> = sequences.iter().flatten().collect();
    let mut rng = RngStream::new(seed, 0x4B4D);

    let mut centers: Vec<Vec<f64>> = (0..k)
        .map(|_| points[rng.uniform_usize(points.len())].clone())
        .collect();
    let mut labels = vec![0usize; points.len()];
    for _ in 0..10 {
        for (p, label) in points.iter().zip(labels.iter_mut()) {
            let mut best = (f64::INFINITY, 0usize);
            for (ci, c) in centers.iter().enumerate() {
                let d: f64 = p.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.0 {
                    best = (d, ci);
                }
            }
            *label = best.1;
        }
        let mut counts = vec![0usize; k];
        let mut sums = vec![vec![0.0; f]; k];
        for (p, &label) in points.iter().zip(&labels) {
            counts[label] += 1;
            for d in 0..f {
                sums[label][d] += p[d];
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for d in 0..f {
                    centers[c][d] = sums[c][d] / counts[c] as f64;
                }
            } else {
                centers[c] = points[rng.uniform_usize(points.len())].clone();
            }
        }
    }

    // Emissions from cluster statistics.
    let mut emissions = Vec::with_capacity(k);
    for c in 0..k {
        let members: Vec<&&Vec<f64>> = points
            .iter()
            .zip(&labels)
            .filter(|(_, &l)| l == c)
            .map(|(p, _)| p)
            .collect();
        if members.is_empty() {
            emissions.push(DiagonalGaussian::new(centers[c].clone(), vec![1.0; f]));
            continue;
        }
        let mut var = vec![0.0; f];
        for p in &members {
            for d in 0..f {
                let diff = p[d] - centers[c][d];
                var[d] += diff * diff;
            }
        }
        let std: Vec<f64> = var
            .iter()
            .zip(var_floors)
            .map(|(v, floor)| (v / members.len() as f64).max(*floor).sqrt())
            .collect();
        emissions.push(DiagonalGaussian::new(centers[c].clone(), std));
    }

    // Initial and transition distributions from label statistics.
    const SMOOTH: f64 = 1.0;
    let mut pi_counts = vec![SMOOTH; k];
    let mut a_counts = vec![SMOOTH; k * k];
    let mut offset = 0;
    for seq in sequences {
        pi_counts[labels[offset]] += 1.0;
        for t in 0..seq.len() - 1 {
            a_counts[labels[offset + t] * k + labels[offset + t + 1]] += 1.0;
        }
        offset += seq.len();
    }
    let pi_total: f64 = pi_counts.iter().sum();
    let log_pi = pi_counts.iter().map(|c| (c / pi_total).ln()).collect();
    let mut log_a = vec![0.0; k * k];
    for i in 0..k {
        let row_total: f64 = a_counts[i * k..(i + 1) * k].iter().sum();
        for j in 0..k {
            log_a[i * k + j] = (a_counts[i * k + j] / row_total).ln();
        }
    }

    HmmModel {
        log_pi,
        log_a,
        emissions,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_model(k: usize, f: usize, rng: &mut RngStream) -> HmmModel {
        let softmax = |v: Vec<f64>| {
            let lse = logsumexp(&v);
            v.into_iter().map(|x| x - lse).collect::<Vec<f64>>()
        };
        let log_pi = softmax((0..k).map(|_| rng.uniform(-2.0, 2.0)).collect());
        let mut log_a = Vec::with_capacity(k * k);
        for _ in 0..k {
            log_a.extend(softmax((0..k).map(|_| rng.uniform(-2.0, 2.0)).collect()));
        }
        let emissions = (0..k)
            .map(|_| {
                DiagonalGaussian::new(
                    (0..f).map(|_| rng.uniform(-3.0, 3.0)).collect(),
                    (0..f).map(|_| rng.uniform(0.3, 2.0)).collect(),
                )
            })
            .collect();
        HmmModel {
            log_pi,
            log_a,
            emissions,
        }
    }

    /// Exhaustive log likelihood: sum over all k^T hidden state paths.
    fn exhaustive_loglik(model: &HmmModel, seq: &[Vec<f64>]) -> f64 {
        let k = model.k();
        let t_len = seq.len();
        let mut path = vec![0usize; t_len];
        let mut terms = Vec::new();
        loop {
            let mut lp = model.log_pi[path[0]] + model.emissions[path[0]].logpdf(&seq[0]);
            for t in 1..t_len {
                lp += model.log_a[path[t - 1] * k + path[t]]
                    + model.emissions[path[t]].logpdf(&seq[t]);
            }
            terms.push(lp);
            // Next path in lexicographic order.
            let mut pos = t_len;
            loop {
                if pos == 0 {
                    return logsumexp(&terms);
                }
                pos -= 1;
                path[pos] += 1;
                if path[pos] < k {
                    break;
                }
                path[pos] = 0;
            }
        }
    }

    #[test]
    fn forward_init_uniform() {
        let model = HmmModel {
            log_pi: vec![(1.0f64 / 3.0).ln(); 3],
            log_a: vec![(1.0f64 / 3.0).ln(); 9],
            emissions: (0..3).map(|_| DiagonalGaussian::standard(2)).collect(),
        };
        let st = model.forward_init();
        for a in &st.log_alpha {
            assert!((a - (1.0f64 / 3.0).ln()).abs() < 1e-15);
        }
        assert_eq!(st.log_likelihood_prefix, 0.0);
        assert!(logsumexp(&st.log_alpha).abs() < 1e-12);
    }

    #[test]
    fn forward_init_deterministic_start() {
        let model = HmmModel {
            log_pi: vec![0.0, f64::NEG_INFINITY, f64::NEG_INFINITY],
            log_a: vec![(1.0f64 / 3.0).ln(); 9],
            emissions: (0..3).map(|_| DiagonalGaussian::standard(1)).collect(),
        };
        let st = model.forward_init();
        assert_eq!(st.log_alpha[0], 0.0);
        assert!(st.log_alpha[1].is_infinite() && st.log_alpha[1] < 0.0);
    }

    #[test]
    fn single_state_delta_is_emission_logpdf() {
        let model = HmmModel {
            log_pi: vec![0.0],
            log_a: vec![0.0],
            emissions: vec![DiagonalGaussian::new(vec![1.0, 2.0], vec![0.5, 1.5])],
        };
        let st = model.forward_init();
        let obs = vec![0.3, 2.2];
        let (st2, delta) = model.forward_step(&st, &obs);
        assert!((delta - model.emissions[0].logpdf(&obs)).abs() < 1e-12);
        assert_eq!(st2.log_alpha, vec![0.0]);
    }

    #[test]
    fn forward_matches_exhaustive_path_sum() {
        let mut rng = RngStream::new(31, 0);
        for trial in 0..30 {
            let k = 1 + rng.uniform_usize(4);
            let f = 1 + rng.uniform_usize(4);
            let t_len = 2 + rng.uniform_usize(5);
            let model = random_model(k, f, &mut rng);
            let seq: Vec<Vec<f64>> = (0..t_len)
                .map(|_| (0..f).map(|_| rng.uniform(-4.0, 4.0)).collect())
                .collect();
            let mut st = model.forward_init();
            let mut total = 0.0;
            for obs in &seq {
                let (next, delta) = model.forward_step(&st, obs);
                total += delta;
                st = next;
            }
            let want = exhaustive_loglik(&model, &seq);
            let rel = (total - want).abs() / want.abs().max(1.0);
            assert!(rel < 1e-9, "trial {trial}: {total} vs {want}");
            assert!((st.log_likelihood_prefix - total).abs() < 1e-9);
        }
    }

    #[test]
    fn repeated_feature_converges_to_power_iteration_fixed_point() {
        let mut rng = RngStream::new(77, 0);
        let model = random_model(3, 2, &mut rng);
        let obs = vec![0.4, -0.2];
        let mut st = model.forward_init();
        for _ in 0..300 {
            st = model.forward_step(&st, &obs).0;
        }
        // Oracle: power iteration on M[i][j] = A_ij * B_j(obs) in linear space.
        let k = model.k();
        let emit: Vec<f64> = model
            .emissions
            .iter()
            .map(|e| e.logpdf(&obs).exp())
            .collect();
        let mut v: Vec<f64> = model.log_pi.iter().map(|p| p.exp()).collect();
        for _ in 0..400 {
            let mut next = vec![0.0; k];
            for j in 0..k {
                for i in 0..k {
                    next[j] += v[i] * model.log_a[i * k + j].exp() * emit[j];
                }
            }
            let norm: f64 = next.iter().sum();
            v = next.into_iter().map(|x| x / norm).collect();
        }
        let alpha_lin: Vec<f64> = st.log_alpha.iter().map(|a| a.exp()).collect();
        for (a, b) in alpha_lin.iter().zip(&v) {
            assert!((a - b).abs() < 1e-6, "{alpha_lin:?} vs {v:?}");
        }
    }

    #[test]
    fn score_is_pure_and_consistent_with_step() {
        let mut rng = RngStream::new(13, 0);
        let model = random_model(3, 2, &mut rng);
        let mut st = model.forward_init();
        st = model.forward_step(&st, &[0.1, 0.2]).0;
        let before = st.clone();
        let obs = vec![-0.5, 1.0];
        let s1 = model.score_feature(&st, &obs);
        let s2 = model.score_feature(&st, &obs);
        let s3 = model.score_feature(&st, &obs);
        assert_eq!(s1, s2);
        assert_eq!(s2, s3);
        assert_eq!(st, before, "scoring must not mutate the state");
        let (_, delta) = model.forward_step(&st, &obs);
        assert_eq!(s1, delta);
    }

    #[test]
    fn identical_features_identical_scores() {
        let mut rng = RngStream::new(14, 0);
        let model = random_model(2, 3, &mut rng);
        let st = model.forward_init();
        let f = vec![0.5, -1.0, 2.0];
        assert_eq!(model.score_feature(&st, &f), model.score_feature(&st, &f));
    }

    #[test]
    fn candidate_nearer_mu_scores_higher_with_zero_delta_means() {
        // Emissions: delta dims mean 0; env feature dims held fixed.
        let emissions = vec![DiagonalGaussian::new(
            vec![0.0, 0.0, 5.0],
            vec![1.0, 1.0, 1.0],
        )];
        let model = HmmModel {
            log_pi: vec![0.0],
            log_a: vec![0.0],
            emissions,
        };
        let st = model.forward_init();
        let near = emission_feature(
            &Configuration::xy(0.0, 0.0),
            &Configuration::xy(1.1, 1.0),
            &Configuration::xy(1.0, 1.0),
            &[5.0],
        );
        let far = emission_feature(
            &Configuration::xy(0.0, 0.0),
            &Configuration::xy(3.0, 2.0),
            &Configuration::xy(1.0, 1.0),
            &[5.0],
        );
        assert!(model.score_feature(&st, &near) > model.score_feature(&st, &far));
    }

    #[test]
    fn emission_feature_zero_delta_when_next_equals_mu() {
        let f = emission_feature(
            &Configuration::xy(0.0, 0.0),
            &Configuration::xy(2.0, 3.0),
            &Configuration::xy(2.0, 3.0),
            &[7.0, 8.0],
        );
        assert_eq!(f, vec![0.0, 0.0, 7.0, 8.0]);
    }

    fn sample_sequences(
        model: &HmmModel,
        n: usize,
        t_len: usize,
        rng: &mut RngStream,
    ) -> Vec<Vec<Vec<f64>>> {
        let k = model.k();
        (0..n)
            .map(|_| {
                let mut state = {
                    let u = rng.f64();
                    let mut acc = 0.0;
                    let mut s = k - 1;
                    for j in 0..k {
                        acc += model.log_pi[j].exp();
                        if u < acc {
                            s = j;
                            break;
                        }
                    }
                    s
                };
                (0..t_len)
                    .map(|t| {
                        if t > 0 {
                            let u = rng.f64();
                            let mut acc = 0.0;
                            let mut next = k - 1;
                            for j in 0..k {
                                acc += model.log_a[state * k + j].exp();
                                if u < acc {
                                    next = j;
                                    break;
                                }
                            }
                            state = next;
                        }
                        model.emissions[state].sample(rng)
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn em_single_state_closed_form() {
        let mut rng = RngStream::new(99, 0);
        let sequences: Vec<Vec<Vec<f64>>> = (0..5)
            .map(|_| (0..20).map(|_| vec![rng.normal_scaled(3.0, 1.5)]).collect())
            .collect();
        let (model, _) = em_fit(&sequences, 1, 7, 20, 1e-9).unwrap();
        let all: Vec<f64> = sequences.iter().flatten().map(|v| v[0]).collect();
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        let var = all.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / all.len() as f64;
        assert!((model.emissions[0].mean[0] - mean).abs() < 1e-9);
        assert!((model.emissions[0].std()[0] - var.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn em_recovers_synthetic_two_state_model() {
        let truth = HmmModel {
            log_pi: vec![0.6f64.ln(), 0.4f64.ln()],
            log_a: vec![0.9f64.ln(), 0.1f64.ln(), 0.2f64.ln(), 0.8f64.ln()],
            emissions: vec![
                DiagonalGaussian::new(vec![-2.0], vec![0.5]),
                DiagonalGaussian::new(vec![2.0], vec![0.5]),
            ],
        };
        let mut rng = RngStream::new(123, 0);
        let sequences = sample_sequences(&truth, 30, 40, &mut rng);
        let (fitted, curve) = em_fit(&sequences, 2, 1, 60, 1e-7).unwrap();
        assert!(curve.len() >= 2);

        // Match states by best permutation under total variation distance of
        // transition rows.
        let a = |m: &HmmModel, i: usize, j: usize| m.log_a[i * 2 + j].exp();
        let tv_identity = 0.5
            * ((a(&fitted, 0, 0) - 0.9).abs()
                + (a(&fitted, 0, 1) - 0.1).abs()
                + (a(&fitted, 1, 0) - 0.2).abs()
                + (a(&fitted, 1, 1) - 0.8).abs());
        let tv_swapped = 0.5
            * ((a(&fitted, 1, 1) - 0.9).abs()
                + (a(&fitted, 1, 0) - 0.1).abs()
                + (a(&fitted, 0, 1) - 0.2).abs()
                + (a(&fitted, 0, 0) - 0.8).abs());
        let tv = tv_identity.min(tv_swapped);
        assert!(tv < 0.1 * 2.0, "transition recovery too far: tv {tv}");
        let swapped = tv_swapped < tv_identity;
        let (m0, m1) = if swapped { (1, 0) } else { (0, 1) };
        assert!((fitted.emissions[m0].mean[0] - -2.0).abs() < 0.3);
        assert!((fitted.emissions[m1].mean[0] - 2.0).abs() < 0.3);
    }

    #[test]
    fn em_loglik_non_decreasing() {
        for seed in 0..20 {
            let mut rng = RngStream::new(seed, 5);
            let truth = random_model(3, 2, &mut rng);
            let sequences = sample_sequences(&truth, 8, 15, &mut rng);
            let (model, curve) = em_fit(&sequences, 3, seed, 50, -1.0).unwrap();
            model.validate().unwrap();
            for w in curve.windows(2) {
                assert!(
                    w[1] >= w[0] - 1e-8,
                    "seed {seed}: log-likelihood decreased {} -> {}",
                    w[0],
                    w[1]
                );
            }
        }
    }

    #[test]
    fn em_rejects_empty_and_short_input() {
        assert!(em_fit(&[], 2, 0, 10, 1e-6).is_err());
        let one_step = vec![vec![vec![0.0]]];
        assert!(em_fit(&one_step, 2, 0, 10, 1e-6).is_err());
    }

    #[test]
    fn params_roundtrip() {
        let mut rng = RngStream::new(50, 0);
        let model = random_model(3, 4, &mut rng);
        let back = HmmModel::from_params(model.to_params()).unwrap();
        assert_eq!(model, back);
    }

    #[test]
    fn model_invariants_hold_after_em() {
        let mut rng = RngStream::new(5, 5);
        let truth = random_model(2, 2, &mut rng);
        let sequences = sample_sequences(&truth, 5, 10, &mut rng);
        let (model, _) = em_fit(&sequences, 2, 3, 25, 1e-8).unwrap();
        assert!(logsumexp(&model.log_pi).abs() < 1e-9);
        for i in 0..2 {
            assert!(logsumexp(&model.log_a[i * 2..(i + 1) * 2]).abs() < 1e-9);
        }
    }
}
