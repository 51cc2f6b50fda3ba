//! Numerical substrate: seeded RNG streams, diagonal Gaussians in log space,
//! a reverse-mode automatic differentiation graph sufficient to train the
//! recurrent steering models, and a momentum SGD optimizer.

pub mod params;
pub mod rng;
pub mod tensor;

pub use params::ParamFile;
pub use rng::RngStream;
pub use tensor::{Graph, Tensor, TensorData};

/// Smallest standard deviation a [`DiagonalGaussian`] will carry.
pub const STD_FLOOR: f64 = 1e-3;

pub const LN_2PI: f64 = 1.837_877_066_409_345_6;

/// Multivariate Gaussian with diagonal covariance, parameterized in log space.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DiagonalGaussian {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl DiagonalGaussian {
    /// Build from mean and standard deviations; stds are floored at [`STD_FLOOR`].
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Self {
        assert_eq!(mean.len(), std.len(), "mean/std dimension mismatch");
        let log_std = std.iter().map(|&s| s.max(STD_FLOOR).ln()).collect();
        Self { mean, log_std }
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            log_std: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_std.iter().map(|ls| ls.exp()).collect()
    }

    /// Exact log density at `x`.
    pub fn logpdf(&self, x: &[f64]) -> f64 {
        gaussian_logpdf(self, x)
    }

    pub fn sample(&self, rng: &mut RngStream) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.log_std)
            .map(|(&m, &ls)| rng.normal_scaled(m, ls.exp()))
            .collect()
    }
}

/// Log density of a diagonal Gaussian:
/// `-d/2 ln(2pi) - sum(log_std) - 1/2 sum(((x - mean)/std)^2)`.
///
/// Panics on dimension mismatch.
pub fn gaussian_logpdf(g: &DiagonalGaussian, x: &[f64]) -> f64 {
    assert_eq!(
        g.dim(),
        x.len(),
        "gaussian_logpdf: dimension mismatch ({} vs {})",
        g.dim(),
        x.len()
    );
    let mut quad = 0.0;
    let mut log_det = 0.0;
    for i in 0..x.len() {
        let z = (x[i] - g.mean[i]) / g.log_std[i].exp();
        quad += z * z;
        log_det += g.log_std[i];
    }
    -0.5 * (x.len() as f64) * LN_2PI - log_det - 0.5 * quad
}

/// Overflow-safe `log(sum(exp(v)))`. Panics on empty input.
pub fn logsumexp(v: &[f64]) -> f64 {
    assert!(!v.is_empty(), "logsumexp: empty input");
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = v.iter().map(|&x| (x - m).exp()).sum();
    m + sum.ln()
}

/// Momentum SGD over a flat list of parameter tensors.
///
/// Update: `v <- momentum * v + g; p <- p - lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    /// Apply one step. `params[i]` is updated in place from `grads[i]`.
    /// Panics if shapes disagree with each other or with the first call.
    pub fn step(&mut self, params: &mut [&mut TensorData], grads: &[Vec<f64>]) {
        assert_eq!(
            params.len(),
            grads.len(),
            "sgd_step: param/grad count mismatch"
        );
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.data.len()]).collect();
        }
        assert_eq!(
            self.velocity.len(),
            params.len(),
            "sgd_step: parameter set changed"
        );
        for (i, p) in params.iter_mut().enumerate() {
            let g = &grads[i];
            assert_eq!(
                p.data.len(),
                g.len(),
                "sgd_step: shape mismatch at param {i}"
            );
            let v = &mut self.velocity[i];
            for j in 0..g.len() {
                v[j] = self.momentum * v[j] + g[j];
                p.data[j] -= self.lr * v[j];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Independent density formula: product of 1-D normal pdfs, in linear space.
    fn logpdf_reference(mean: &[f64], std: &[f64], x: &[f64]) -> f64 {
        let mut p = 1.0;
        for i in 0..x.len() {
            let z = (x[i] - mean[i]) / std[i];
            p *= (-0.5 * z * z).exp() / (std[i] * (2.0 * std::f64::consts::PI).sqrt());
        }
        p.ln()
    }

    #[test]
    fn standard_normal_at_zero() {
        let g = DiagonalGaussian::standard(1);
        let lp = gaussian_logpdf(&g, &[0.0]);
        assert!((lp - (-0.918_938_533_204_672_7)).abs() < 1e-12, "{lp}");
    }

    #[test]
    fn logpdf_at_mean() {
        let g = DiagonalGaussian::new(vec![1.0, -2.0, 0.5], vec![0.3, 2.0, 1.5]);
        let lp = gaussian_logpdf(&g, &[1.0, -2.0, 0.5]);
        let expected: f64 = -(0.3f64.ln() + 2.0f64.ln() + 1.5f64.ln()) - 1.5 * LN_2PI;
        assert!((lp - expected).abs() < 1e-12);
    }

    #[test]
    fn logpdf_matches_reference_on_random_inputs() {
        let mut rng = RngStream::new(11, 0);
        for _ in 0..100 {
            let d = 1 + rng.uniform_usize(5);
            let mean: Vec<f64> = (0..d).map(|_| rng.uniform(-3.0, 3.0)).collect();
            let std: Vec<f64> = (0..d).map(|_| rng.uniform(0.1, 2.5)).collect();
            let x: Vec<f64> = (0..d).map(|_| rng.uniform(-5.0, 5.0)).collect();
            let g = DiagonalGaussian::new(mean.clone(), std.clone());
            let got = gaussian_logpdf(&g, &x);
            let want = logpdf_reference(&mean, &std, &x);
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
    }

    #[test]
    fn logpdf_integrates_to_one_in_1d() {
        // Trapezoid over +/- 8 sigma.
        let g = DiagonalGaussian::new(vec![0.7], vec![1.3]);
        let (lo, hi) = (0.7 - 8.0 * 1.3, 0.7 + 8.0 * 1.3);
        let n = 20_000;
        let h = (hi - lo) / n as f64;
        let mut total = 0.0;
        for i in 0..=n {
            let x = lo + i as f64 * h;
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            total += w * gaussian_logpdf(&g, &[x]).exp();
        }
        total *= h;
        assert!((total - 1.0).abs() < 1e-3, "{total}");
    }

    #[test]
    #[should_panic(expected = "dimension mismatch")]
    fn logpdf_dimension_mismatch_panics() {
        let g = DiagonalGaussian::standard(2);
        gaussian_logpdf(&g, &[0.0]);
    }

    #[test]
    fn logsumexp_basics() {
        assert!((logsumexp(&[0.0, 0.0]) - 2.0f64.ln()).abs() < 1e-12);
        let v = logsumexp(&[-1000.0, -1000.0]);
        assert!((v - (-1000.0 + 2.0f64.ln())).abs() < 1e-12, "{v}");
    }

    #[test]
    fn logsumexp_matches_reference() {
        // Reference: widen to pairwise accumulation around the max in plain space
        // using extended-range arithmetic via f64 on shifted values.
        let mut rng = RngStream::new(5, 1);
        for _ in 0..200 {
            let n = 1 + rng.uniform_usize(12);
            let v: Vec<f64> = (0..n).map(|_| rng.uniform(-40.0, 40.0)).collect();
            let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let want = m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            assert!((logsumexp(&v) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn logsumexp_bounds() {
        let mut rng = RngStream::new(6, 1);
        for _ in 0..100 {
            let n = 1 + rng.uniform_usize(10);
            let v: Vec<f64> = (0..n).map(|_| rng.uniform(-50.0, 50.0)).collect();
            let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = logsumexp(&v);
            assert!(lse >= m - 1e-12);
            assert!(lse <= m + (n as f64).ln() + 1e-12);
        }
    }

    #[test]
    #[should_panic(expected = "empty input")]
    fn logsumexp_empty_panics() {
        logsumexp(&[]);
    }

    #[test]
    fn sgd_zero_lr_is_identity() {
        let mut p = TensorData::from_vec(vec![1.0, 2.0]);
        let mut opt = Sgd::new(0.0, 0.9);
        opt.step(&mut [&mut p], &[vec![10.0, -3.0]]);
        assert_eq!(p.data, vec![1.0, 2.0]);
    }

    #[test]
    fn sgd_single_step_no_momentum() {
        let mut p = TensorData::from_vec(vec![1.0]);
        let mut opt = Sgd::new(0.1, 0.0);
        opt.step(&mut [&mut p], &[vec![2.0]]);
        assert!((p.data[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_converges_on_quadratic_bowl() {
        // f(p) = 1/2 |p - c|^2, grad = p - c; optimum is c.
        let c = [3.0, -1.5, 0.25];
        let mut p = TensorData::from_vec(vec![0.0, 0.0, 0.0]);
        let mut opt = Sgd::new(0.05, 0.9);
        for _ in 0..10_000 {
            let grad: Vec<f64> = p.data.iter().zip(&c).map(|(pi, ci)| pi - ci).collect();
            opt.step(&mut [&mut p], &[grad]);
        }
        for (pi, ci) in p.data.iter().zip(&c) {
            assert!((pi - ci).abs() < 1e-6, "{pi} vs {ci}");
        }
    }

    #[test]
    fn std_floor_applied() {
        let g = DiagonalGaussian::new(vec![0.0], vec![0.0]);
        assert!((g.std()[0] - STD_FLOOR).abs() < 1e-15);
    }
}
