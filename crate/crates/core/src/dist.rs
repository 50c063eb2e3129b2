//! Probability primitives: diagonal Gaussians, categoricals, and Gaussian
//! mixtures, with reparameterized sampling, exact log-densities, the
//! closed-form KL divergence between diagonal Gaussians, and a Monte-Carlo
//! KL estimator used as an independent check of the closed form.
//!
//! All covariances are diagonal and parameterized as log-variances, matching
//! the encoder heads that produce them.

use crate::error::{Error, Result};
use crate::prng::Prng;

/// Diagonal Gaussian N(mean, diag(exp(log_var))).
#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Self {
        assert_eq!(mean.len(), log_var.len(), "mean/log_var length mismatch");
        assert!(!mean.is_empty(), "dimension must be >= 1");
        DiagGaussian { mean, log_var }
    }

    /// Standard normal of dimension `d`.
    pub fn standard(d: usize) -> Self {
        DiagGaussian {
            mean: vec![0.0; d],
            log_var: vec![0.0; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Finite distribution over `k` outcomes.
#[derive(Clone, Debug, PartialEq)]
pub struct Categorical {
    pub probs: Vec<f64>,
}

impl Categorical {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let sum: f64 = probs.iter().sum();
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Input(format!(
                "categorical probabilities must be non-negative and sum to 1 (sum = {sum})"
            )));
        }
        Ok(Categorical { probs })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Mixture of diagonal Gaussians with categorical weights.
#[derive(Clone, Debug)]
pub struct GaussianMixture {
    pub weights: Categorical,
    pub components: Vec<DiagGaussian>,
}

impl GaussianMixture {
    pub fn new(weights: Categorical, components: Vec<DiagGaussian>) -> Self {
        assert!(!components.is_empty());
        assert_eq!(weights.len(), components.len());
        let d = components[0].dim();
        assert!(components.iter().all(|c| c.dim() == d));
        GaussianMixture {
            weights,
            components,
        }
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }
}

/// Reparameterized sample: `mean + exp(0.5 * log_var) ⊙ noise` with
/// `noise ~ N(0, I)`. Returns the sample together with the noise that
/// produced it, so callers can rebuild the same sample differentiably.
pub fn sample_gaussian(g: &DiagGaussian, rng: &mut Prng) -> (Vec<f64>, Vec<f64>) {
    let noise = rng.normal_vec(g.dim());
    let sample = g
        .mean
        .iter()
        .zip(&g.log_var)
        .zip(&noise)
        .map(|((m, lv), n)| m + (0.5 * lv).exp() * n)
        .collect();
    (sample, noise)
}

/// Closed-form KL(p ‖ q) between diagonal Gaussians:
///
/// ```text
/// KL = 1/2 · Σ_t [ log σq²(t) − log σp²(t) − 1 + σp²(t)/σq²(t)
///                  + (μp(t) − μq(t))² / σq²(t) ]
/// ```
///
/// Non-negative, zero iff p == q.
pub fn kl_diag_gaussian(p: &DiagGaussian, q: &DiagGaussian) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::Shape {
            op: "kl_diag_gaussian",
            lhs: vec![p.dim()],
            rhs: vec![q.dim()],
        });
    }
    let mut acc = 0.0;
    for t in 0..p.dim() {
        let (lvp, lvq) = (p.log_var[t], q.log_var[t]);
        let dm = p.mean[t] - q.mean[t];
        acc += lvq - lvp - 1.0 + (lvp - lvq).exp() + dm * dm * (-lvq).exp();
    }
    Ok(0.5 * acc)
}

/// Monte-Carlo estimate of KL(p ‖ q): mean of `log p(x) − log q(x)` over
/// `n` samples `x ~ p`, with the standard error of the estimate.
pub fn kl_monte_carlo(
    p: &DiagGaussian,
    q: &DiagGaussian,
    n: usize,
    rng: &mut Prng,
) -> Result<(f64, f64)> {
    if p.dim() != q.dim() {
        return Err(Error::Shape {
            op: "kl_monte_carlo",
            lhs: vec![p.dim()],
            rhs: vec![q.dim()],
        });
    }
    assert!(n >= 1000, "kl_monte_carlo needs n >= 1000");
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n {
        let (x, _) = sample_gaussian(p, rng);
        let v = log_prob(p, &x)? - log_prob(q, &x)?;
        sum += v;
        sum_sq += v * v;
    }
    let mean = sum / n as f64;
    let var = (sum_sq / n as f64 - mean * mean).max(0.0);
    Ok((mean, (var / n as f64).sqrt()))
}

/// Exact log-density of a diagonal Gaussian at `x`.
pub fn log_prob(g: &DiagGaussian, x: &[f64]) -> Result<f64> {
    if x.len() != g.dim() {
        return Err(Error::Shape {
            op: "log_prob",
            lhs: vec![g.dim()],
            rhs: vec![x.len()],
        });
    }
    const LN_2PI: f64 = 1.837_877_066_409_345_6;
    let mut acc = 0.0;
    for t in 0..g.dim() {
        let lv = g.log_var[t];
        let dm = x[t] - g.mean[t];
        acc += lv + LN_2PI + dm * dm * (-lv).exp();
    }
    Ok(-0.5 * acc)
}

/// Inverse-CDF draw from a categorical, in stored order.
pub fn sample_categorical(c: &Categorical, rng: &mut Prng) -> usize {
    let u = rng.uniform();
    let mut cum = 0.0;
    for (i, p) in c.probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return i;
        }
    }
    c.len() - 1
}

/// Ancestral sample from a mixture: component index, then a reparameterized
/// draw from that component.
pub fn sample_gmm(m: &GaussianMixture, rng: &mut Prng) -> (usize, Vec<f64>) {
    let i = sample_categorical(&m.weights, rng);
    let (x, _) = sample_gaussian(&m.components[i], rng);
    (i, x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_variance_limit_sample_equals_mean() {
        let g = DiagGaussian::new(vec![1.5, -2.0], vec![-40.0, -40.0]);
        let mut rng = Prng::seed(1);
        let (s, _) = sample_gaussian(&g, &mut rng);
        assert!((s[0] - 1.5).abs() < 1e-8 && (s[1] + 2.0).abs() < 1e-8);
    }

    #[test]
    fn gaussian_sampling_moments() {
        let g = DiagGaussian::standard(2);
        let mut rng = Prng::seed(2);
        let n = 100_000;
        let mut mean = [0.0; 2];
        let mut m2 = [0.0; 2];
        for _ in 0..n {
            let (s, _) = sample_gaussian(&g, &mut rng);
            for t in 0..2 {
                mean[t] += s[t];
                m2[t] += s[t] * s[t];
            }
        }
        for t in 0..2 {
            mean[t] /= n as f64;
            let var = m2[t] / n as f64 - mean[t] * mean[t];
            assert!(mean[t].abs() < 0.02, "mean[{t}] = {}", mean[t]);
            assert!((var - 1.0).abs() < 0.05, "var[{t}] = {var}");
        }
    }

    #[test]
    fn sampling_is_deterministic_under_seed() {
        let g = DiagGaussian::new(vec![0.3; 4], vec![-1.0; 4]);
        let (a, na) = sample_gaussian(&g, &mut Prng::seed(99));
        let (b, nb) = sample_gaussian(&g, &mut Prng::seed(99));
        assert_eq!(a, b);
        assert_eq!(na, nb);
    }

    #[test]
    fn kl_identity_is_zero() {
        let mut rng = Prng::seed(3);
        let g = DiagGaussian::new(rng.normal_vec(5), rng.normal_vec(5));
        assert!(kl_diag_gaussian(&g, &g).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn kl_unit_shift_is_half() {
        let p = DiagGaussian::standard(1);
        let q = DiagGaussian::new(vec![1.0], vec![0.0]);
        assert!((kl_diag_gaussian(&p, &q).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_dimension_mismatch() {
        let p = DiagGaussian::standard(2);
        let q = DiagGaussian::standard(3);
        assert!(matches!(
            kl_diag_gaussian(&p, &q),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn kl_additive_over_coordinates() {
        let mut rng = Prng::seed(4);
        let p = DiagGaussian::new(rng.normal_vec(2), rng.normal_vec(2));
        let q = DiagGaussian::new(rng.normal_vec(2), rng.normal_vec(2));
        let whole = kl_diag_gaussian(&p, &q).unwrap();
        let mut parts = 0.0;
        for t in 0..2 {
            let pt = DiagGaussian::new(vec![p.mean[t]], vec![p.log_var[t]]);
            let qt = DiagGaussian::new(vec![q.mean[t]], vec![q.log_var[t]]);
            parts += kl_diag_gaussian(&pt, &qt).unwrap();
        }
        assert_eq!(whole, parts);
    }

    #[test]
    fn monte_carlo_agrees_on_identity_and_shift() {
        let mut rng = Prng::seed(5);
        let p = DiagGaussian::standard(1);
        let (est, se) = kl_monte_carlo(&p, &p, 50_000, &mut rng).unwrap();
        assert!(est.abs() <= 3.0 * se.max(1e-12), "est {est} se {se}");

        let q = DiagGaussian::new(vec![1.0], vec![0.0]);
        let (est, se) = kl_monte_carlo(&p, &q, 200_000, &mut rng).unwrap();
        assert!((est - 0.5).abs() <= 3.0 * se, "est {est} se {se}");
    }

    #[test]
    fn monte_carlo_permutation_invariant() {
        let p = DiagGaussian::new(vec![0.2, -0.7, 1.1], vec![-0.5, 0.3, 0.0]);
        let q = DiagGaussian::new(vec![-0.4, 0.6, 0.1], vec![0.2, -0.2, 0.4]);
        let perm = |g: &DiagGaussian| {
            DiagGaussian::new(
                vec![g.mean[2], g.mean[0], g.mean[1]],
                vec![g.log_var[2], g.log_var[0], g.log_var[1]],
            )
        };
        let mut r1 = Prng::seed(6);
        let mut r2 = Prng::seed(7);
        let (e1, s1) = kl_monte_carlo(&p, &q, 100_000, &mut r1).unwrap();
        let (e2, s2) = kl_monte_carlo(&perm(&p), &perm(&q), 100_000, &mut r2).unwrap();
        assert!((e1 - e2).abs() <= 3.0 * (s1 + s2), "{e1} vs {e2}");
    }

    #[test]
    fn log_prob_standard_normal_at_origin() {
        let g = DiagGaussian::standard(1);
        let lp = log_prob(&g, &[0.0]).unwrap();
        assert!((lp - (-0.918_938_533_204_672_7)).abs() < 1e-12);
    }

    #[test]
    fn log_prob_integrates_to_one() {
        // trapezoid quadrature of exp(log_prob) over [-8, 8]
        let g = DiagGaussian::new(vec![0.4], vec![-0.3]);
        let n = 16_000;
        let (a, b) = (-8.0, 8.0);
        let h = (b - a) / n as f64;
        let mut integral = 0.0;
        for i in 0..=n {
            let x = a + i as f64 * h;
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            integral += w * log_prob(&g, &[x]).unwrap().exp();
        }
        integral *= h;
        assert!((integral - 1.0).abs() <= 1e-6, "integral {integral}");
    }

    #[test]
    fn log_prob_maximal_at_mean() {
        let g = DiagGaussian::new(vec![0.7], vec![0.2]);
        let at_mean = log_prob(&g, &[0.7]).unwrap();
        let mut rng = Prng::seed(8);
        for _ in 0..100 {
            let x = rng.uniform_in(-5.0, 5.0);
            assert!(log_prob(&g, &[x]).unwrap() <= at_mean);
        }
    }

    #[test]
    fn categorical_degenerate_and_uniform() {
        let c = Categorical::new(vec![1.0, 0.0, 0.0]).unwrap();
        let mut rng = Prng::seed(9);
        for _ in 0..100 {
            assert_eq!(sample_categorical(&c, &mut rng), 0);
        }

        let u = Categorical::new(vec![0.25; 4]).unwrap();
        let mut counts = [0usize; 4];
        for _ in 0..100_000 {
            counts[sample_categorical(&u, &mut rng)] += 1;
        }
        for c in counts {
            let f = c as f64 / 100_000.0;
            assert!((0.24..=0.26).contains(&f), "frequency {f}");
        }
    }

    #[test]
    fn categorical_reproducible() {
        let c = Categorical::new(vec![0.5, 0.3, 0.2]).unwrap();
        let mut a = Prng::seed(10);
        let mut b = Prng::seed(10);
        let xs: Vec<usize> = (0..50).map(|_| sample_categorical(&c, &mut a)).collect();
        let ys: Vec<usize> = (0..50).map(|_| sample_categorical(&c, &mut b)).collect();
        assert_eq!(xs, ys);
    }

    #[test]
    fn categorical_rejects_bad_probs() {
        assert!(Categorical::new(vec![0.5, 0.6]).is_err());
        assert!(Categorical::new(vec![-0.1, 1.1]).is_err());
    }

    #[test]
    fn gmm_single_component_degenerates() {
        let g = DiagGaussian::new(vec![2.0], vec![-40.0]);
        let m = GaussianMixture::new(Categorical::new(vec![1.0]).unwrap(), vec![g]);
        let mut rng = Prng::seed(11);
        let (i, s) = sample_gmm(&m, &mut rng);
        assert_eq!(i, 0);
        assert!((s[0] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn gmm_well_separated_components_split_evenly() {
        let a = DiagGaussian::new(vec![-10.0], vec![0.0]);
        let b = DiagGaussian::new(vec![10.0], vec![0.0]);
        let m = GaussianMixture::new(Categorical::new(vec![0.5, 0.5]).unwrap(), vec![a, b]);
        let mut rng = Prng::seed(12);
        let n = 100_000;
        let neg = (0..n)
            .filter(|_| sample_gmm(&m, &mut rng).1[0] < 0.0)
            .count();
        let f = neg as f64 / n as f64;
        assert!((f - 0.5).abs() <= 0.01, "negative fraction {f}");
    }

    #[test]
    fn gmm_mixture_mean_matches_moment_identity() {
        let mut rng = Prng::seed(13);
        let comps = vec![
            DiagGaussian::new(vec![1.0, -1.0], vec![-0.5, 0.1]),
            DiagGaussian::new(vec![-2.0, 0.5], vec![0.0, -1.0]),
            DiagGaussian::new(vec![0.3, 2.0], vec![-2.0, 0.2]),
        ];
        let w = Categorical::new(vec![0.2, 0.5, 0.3]).unwrap();
        let expect: Vec<f64> = (0..2)
            .map(|t| {
                w.probs
                    .iter()
                    .zip(&comps)
                    .map(|(a, c)| a * c.mean[t])
                    .sum()
            })
            .collect();
        let m = GaussianMixture::new(w, comps);
        let n = 100_000;
        let mut acc = [0.0; 2];
        for _ in 0..n {
            let (_, s) = sample_gmm(&m, &mut rng);
            acc[0] += s[0];
            acc[1] += s[1];
        }
        for t in 0..2 {
            let emp = acc[t] / n as f64;
            assert!((emp - expect[t]).abs() <= 0.05, "coord {t}: {emp} vs {}", expect[t]);
        }
    }
}
