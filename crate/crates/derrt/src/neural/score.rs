//! Mixture scoring of steering candidates.

use crate::env::Configuration;
use crate::numerics::{gaussian_logpdf, logsumexp, DiagonalGaussian};

/// Log likelihood of the steering move `x_nearest -> x_next` under a mixture
/// of learned proposal Gaussians over the displacement and one Gaussian of
/// std `sigma_rrt` centered on the optimal point `mu`.
///
/// `weights` has one entry per proposal plus a final entry for the RRT*
/// component, and must sum to one.
pub fn mixture_score(
    proposals: &[DiagonalGaussian],
    weights: &[f64],
    mu: &Configuration,
    sigma_rrt: f64,
    x_next: &Configuration,
    x_nearest: &Configuration,
) -> f64 {
    assert!(!proposals.is_empty(), "mixture_score: empty proposal list");
    assert_eq!(
        weights.len(),
        proposals.len() + 1,
        "mixture_score: need one weight per proposal plus the RRT* component"
    );
    let total: f64 = weights.iter().sum();
    assert!(
        (total - 1.0).abs() < 1e-12,
        "mixture_score: weights must sum to 1 (got {total})"
    );
    let delta = x_next.delta(x_nearest);
    let mut terms = Vec::with_capacity(weights.len());
    for (p, &w) in proposals.iter().zip(weights) {
        terms.push(w.ln() + gaussian_logpdf(p, &delta));
    }
    let rrt = DiagonalGaussian::new(mu.0.clone(), vec![sigma_rrt; mu.dim()]);
    terms.push(weights[proposals.len()].ln() + gaussian_logpdf(&rrt, &x_next.0));
    logsumexp(&terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    #[test]
    fn pure_rrt_weight_reverts_to_gaussian_on_mu() {
        let prop = DiagonalGaussian::new(vec![3.0, -3.0], vec![0.5, 0.5]);
        let mu = Configuration::xy(10.0, 12.0);
        let nearest = Configuration::xy(9.0, 11.0);
        let sigma = 2.0;
        let x = Configuration::xy(10.5, 11.5);
        let score = mixture_score(&[prop], &[0.0, 1.0], &mu, sigma, &x, &nearest);
        let rrt = DiagonalGaussian::new(mu.0.clone(), vec![sigma, sigma]);
        assert!((score - gaussian_logpdf(&rrt, &x.0)).abs() < 1e-12);

        // Argmax over candidates is the candidate nearest to mu.
        let mut rng = RngStream::new(3, 0);
        let candidates: Vec<Configuration> = (0..10)
            .map(|_| Configuration::xy(rng.uniform(5.0, 15.0), rng.uniform(7.0, 17.0)))
            .collect();
        let best_by_score = candidates
            .iter()
            .enumerate()
            .max_by(|a, b| {
                let prop = DiagonalGaussian::new(vec![0.0, 0.0], vec![1.0, 1.0]);
                let sa = mixture_score(
                    std::slice::from_ref(&prop),
                    &[0.0, 1.0],
                    &mu,
                    sigma,
                    a.1,
                    &nearest,
                );
                let sb = mixture_score(&[prop], &[0.0, 1.0], &mu, sigma, b.1, &nearest);
                sa.partial_cmp(&sb).unwrap()
            })
            .unwrap()
            .0;
        let best_by_dist = candidates
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.dist(&mu).partial_cmp(&b.1.dist(&mu)).unwrap())
            .unwrap()
            .0;
        assert_eq!(best_by_score, best_by_dist);
    }

    #[test]
    fn single_proposal_maximal_at_its_mean() {
        let nearest = Configuration::xy(4.0, 4.0);
        let mu = Configuration::xy(6.0, 4.0);
        let prop = DiagonalGaussian::new(vec![1.0, -0.5], vec![0.7, 0.7]);
        let at_mean = Configuration::xy(5.0, 3.5);
        let s_mean = mixture_score(
            std::slice::from_ref(&prop),
            &[1.0, 0.0],
            &mu,
            2.0,
            &at_mean,
            &nearest,
        );
        let mut rng = RngStream::new(4, 0);
        for _ in 0..100 {
            let other = Configuration::xy(rng.uniform(2.0, 8.0), rng.uniform(1.0, 7.0));
            let s = mixture_score(
                std::slice::from_ref(&prop),
                &[1.0, 0.0],
                &mu,
                2.0,
                &other,
                &nearest,
            );
            assert!(s <= s_mean + 1e-12);
        }
    }

    #[test]
    fn mixture_density_integrates_to_one_on_grid() {
        // Two proposals plus the RRT* component over a 2-D grid.
        let nearest = Configuration::xy(0.0, 0.0);
        let mu = Configuration::xy(1.0, 0.5);
        let props = vec![
            DiagonalGaussian::new(vec![0.8, 0.2], vec![0.6, 0.9]),
            DiagonalGaussian::new(vec![-0.5, 1.0], vec![1.2, 0.4]),
        ];
        let weights = vec![0.3, 0.45, 0.25];
        let sigma = 0.8;
        let (lo, hi, n) = (-9.0, 9.0, 360);
        let h = (hi - lo) / n as f64;
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let x = Configuration::xy(lo + (i as f64 + 0.5) * h, lo + (j as f64 + 0.5) * h);
                total += mixture_score(&props, &weights, &mu, sigma, &x, &nearest).exp();
            }
        }
        total *= h * h;
        assert!((total - 1.0).abs() < 1e-2, "integral {total}");
    }

    #[test]
    #[should_panic(expected = "empty proposal list")]
    fn empty_proposals_panics() {
        mixture_score(
            &[],
            &[1.0],
            &Configuration::xy(0.0, 0.0),
            1.0,
            &Configuration::xy(0.0, 0.0),
            &Configuration::xy(0.0, 0.0),
        );
    }

    #[test]
    #[should_panic(expected = "sum to 1")]
    fn unnormalized_weights_panics() {
        let p = DiagonalGaussian::standard(2);
        mixture_score(
            &[p],
            &[0.5, 0.6],
            &Configuration::xy(0.0, 0.0),
            1.0,
            &Configuration::xy(0.0, 0.0),
            &Configuration::xy(0.0, 0.0),
        );
    }
}
