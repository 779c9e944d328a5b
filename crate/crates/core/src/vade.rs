//! Closed-form optimal categorical posteriors over cluster assignments.
//!
//! For a facet with mixture prior and an encoder distribution `q(z|x)`, the
//! categorical `q(c|x)` minimising `E_q(z|x) KL[q(c|x) || p(c|z)]` is
//! `q*(c) ∝ exp(E_q(z|x) log p(c|z))`; the attained minimum is `-log Z`
//! where `Z` is the normaliser. Expectations here are either sample means or
//! weighted sums (quadrature).

use crate::autodiff::logsumexp_slice;
use crate::distributions::DiagGaussianParams;
use crate::error::{Error, Result};
use crate::prior::{FacetPrior, MultiFacetPrior};
use crate::tensor::Tensor;

/// Largest joint cluster space enumerated by [`optimal_q_general`].
pub const JOINT_SPACE_LIMIT: usize = 1_000_000;

/// A categorical distribution together with the log-normaliser it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct CategoricalPosterior {
    pub log_probs: Vec<f64>,
    pub log_z: f64,
}

impl CategoricalPosterior {
    pub fn probs(&self) -> Vec<f64> {
        self.log_probs.iter().map(|v| v.exp()).collect()
    }

    /// The minimal expected KL, `-log Z`.
    pub fn min_kl(&self) -> f64 {
        -self.log_z
    }
}

fn sample_rows(prior: &FacetPrior, z: &Tensor) -> Result<usize> {
    match z.shape() {
        [l, d] if *l >= 1 && *d == prior.dim() => Ok(*l),
        s => Err(Error::InvalidInput(format!(
            "expected (L >= 1, {}) samples, got {s:?}",
            prior.dim()
        ))),
    }
}

fn normalise(expected: Vec<f64>) -> CategoricalPosterior {
    let log_z = logsumexp_slice(&expected);
    CategoricalPosterior {
        log_probs: expected.iter().map(|v| v - log_z).collect(),
        log_z,
    }
}

/// Optimal `q(c|x)` from `L` samples of `q(z|x)` (rows of `z_samples`).
///
/// With a single sample the result is the prior responsibilities at that
/// sample, bit for bit, and `log_z = 0`.
pub fn optimal_q_single(prior: &FacetPrior, z_samples: &Tensor) -> Result<CategoricalPosterior> {
    let l = sample_rows(prior, z_samples)?;
    if l == 1 {
        return Ok(CategoricalPosterior {
            log_probs: prior.log_responsibilities(z_samples.row(0))?,
            log_z: 0.0,
        });
    }
    let weights = vec![1.0 / l as f64; l];
    optimal_q_weighted(prior, z_samples, &weights)
}

/// Optimal `q(c|x)` when the expectation over `z` is a weighted sum over the
/// rows of `points` (weights must sum to one).
pub fn optimal_q_weighted(
    prior: &FacetPrior,
    points: &Tensor,
    weights: &[f64],
) -> Result<CategoricalPosterior> {
    let n = sample_rows(prior, points)?;
    if weights.len() != n {
        return Err(Error::InvalidInput(format!(
            "{} weights for {n} points",
            weights.len()
        )));
    }
    let mut expected = vec![0.0; prior.num_clusters()];
    for (i, w) in weights.iter().enumerate() {
        for (e, r) in expected
            .iter_mut()
            .zip(prior.log_responsibilities(points.row(i))?)
        {
            *e += w * r;
        }
    }
    Ok(normalise(expected))
}

/// Factorised optimum: one posterior per facet. The minimal joint KL is the
/// sum of the per-facet minima.
pub fn optimal_q_multi(
    priors: &MultiFacetPrior,
    z_samples: &[Tensor],
) -> Result<Vec<CategoricalPosterior>> {
    if z_samples.len() != priors.num_facets() {
        return Err(Error::InvalidInput(format!(
            "{} sample blocks for {} facets",
            z_samples.len(),
            priors.num_facets()
        )));
    }
    priors
        .facets
        .iter()
        .zip(z_samples)
        .map(|(p, z)| optimal_q_single(p, z))
        .collect()
}

/// Minimal joint KL for a list of per-facet posteriors.
pub fn joint_min_kl(posteriors: &[CategoricalPosterior]) -> f64 {
    posteriors.iter().map(CategoricalPosterior::min_kl).sum()
}

/// Categorical distribution over cluster tuples, last facet varying fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct JointCategorical {
    pub cards: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub log_z: f64,
}

impl JointCategorical {
    /// Flat index of a cluster tuple.
    pub fn index(&self, tuple: &[usize]) -> usize {
        tuple
            .iter()
            .zip(&self.cards)
            .fold(0, |acc, (c, k)| acc * k + c)
    }

    /// Cluster tuple at a flat index.
    pub fn tuple(&self, mut index: usize) -> Vec<usize> {
        let mut out = vec![0; self.cards.len()];
        for (slot, k) in out.iter_mut().zip(&self.cards).rev() {
            *slot = index % k;
            index /= k;
        }
        out
    }

    /// Log marginal of facet `j`.
    pub fn log_marginal(&self, j: usize) -> Vec<f64> {
        let mut buckets = vec![Vec::new(); self.cards[j]];
        for (i, lp) in self.log_probs.iter().enumerate() {
            buckets[self.tuple(i)[j]].push(*lp);
        }
        buckets.iter().map(|b| logsumexp_slice(b)).collect()
    }

    pub fn min_kl(&self) -> f64 {
        -self.log_z
    }
}

/// Optimum over the full joint cluster space, by enumeration.
///
/// `z_samples[j]` holds `L` rows for facet `j`; row `l` across all facets is
/// one joint sample. The joint posterior `p(c̄ | z̄)` is normalised over all
/// tuples directly rather than facet by facet.
pub fn optimal_q_general(
    priors: &MultiFacetPrior,
    z_samples: &[Tensor],
) -> Result<JointCategorical> {
    if z_samples.len() != priors.num_facets() {
        return Err(Error::InvalidInput(
            "one sample block per facet is required".into(),
        ));
    }
    let cards: Vec<usize> = priors.facets.iter().map(FacetPrior::num_clusters).collect();
    let size = cards
        .iter()
        .try_fold(1usize, |acc, k| acc.checked_mul(*k))
        .filter(|s| *s <= JOINT_SPACE_LIMIT);
    let Some(size) = size else {
        return Err(Error::InvalidInput(format!(
            "joint cluster space {cards:?} exceeds {JOINT_SPACE_LIMIT}"
        )));
    };
    let mut l = None;
    for (p, z) in priors.facets.iter().zip(z_samples) {
        let rows = sample_rows(p, z)?;
        if *l.get_or_insert(rows) != rows {
            return Err(Error::InvalidInput(
                "facets have different sample counts".into(),
            ));
        }
    }
    let l = l.expect("at least one facet");
    let mut skeleton = JointCategorical {
        cards: cards.clone(),
        log_probs: vec![0.0; size],
        log_z: 0.0,
    };
    let mut expected = vec![0.0; size];
    let mut joint = vec![0.0; size];
    for s in 0..l {
        let per_facet: Vec<Vec<f64>> = priors
            .facets
            .iter()
            .zip(z_samples)
            .map(|(p, z)| p.log_joint(z.row(s)))
            .collect::<Result<_>>()?;
        for (i, slot) in joint.iter_mut().enumerate() {
            *slot = skeleton
                .tuple(i)
                .iter()
                .enumerate()
                .map(|(j, c)| per_facet[j][*c])
                .sum();
        }
        let lse = logsumexp_slice(&joint);
        for (e, v) in expected.iter_mut().zip(&joint) {
            *e += (v - lse) / l as f64;
        }
    }
    let q = normalise(expected);
    skeleton.log_probs = q.log_probs;
    skeleton.log_z = q.log_z;
    Ok(skeleton)
}

/// `mean_l KL[q || p(c | z_l)]` evaluated sample by sample.
pub fn expected_kl(prior: &FacetPrior, q: &[f64], z_samples: &Tensor) -> Result<f64> {
    let l = sample_rows(prior, z_samples)?;
    if q.len() != prior.num_clusters() {
        return Err(Error::InvalidInput(
            "categorical has the wrong number of clusters".into(),
        ));
    }
    let mut total = 0.0;
    for s in 0..l {
        let log_post = prior.log_responsibilities(z_samples.row(s))?;
        total += q
            .iter()
            .zip(&log_post)
            .filter(|(p, _)| **p > 0.0)
            .map(|(p, lp)| p * (p.ln() - lp))
            .sum::<f64>();
    }
    Ok(total / l as f64)
}

/// Orthonormal Hermite recurrence at `z`: returns `(p_n, p_{n-1}, log_scale)`
/// with both values divided by `exp(log_scale)` to stay finite.
fn hermite_scaled(z: f64, n: usize) -> (f64, f64, f64) {
    const PIM4: f64 = 0.751_125_544_464_942_5; // pi^(-1/4)
    let (mut p1, mut p2, mut log_scale) = (PIM4, 0.0f64, 0.0f64);
    for j in 0..n {
        let p3 = p2;
        p2 = p1;
        let jf = (j + 1) as f64;
        p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
        let m = p1.abs().max(p2.abs());
        if m > 1e100 {
            p1 /= m;
            p2 /= m;
            log_scale += m.ln();
        }
    }
    (p1, p2, log_scale)
}

/// Number of Jacobi-matrix eigenvalues below `x` (Sturm sequence).
fn count_below(x: f64, off2: &[f64]) -> usize {
    let mut q = -x;
    let mut count = usize::from(q < 0.0);
    for o in off2 {
        let prev = if q == 0.0 { f64::MIN_POSITIVE } else { q };
        q = -x - o / prev;
        count += usize::from(q < 0.0);
    }
    count
}

/// Nodes and weights of `n`-point Gauss–Hermite quadrature for the weight
/// `exp(-x^2)`. Nodes are the eigenvalues of the symmetric Jacobi matrix,
/// isolated by bisection and polished by Newton steps on the recurrence.
pub fn gauss_hermite(n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if n == 0 {
        return Err(Error::InvalidInput(
            "quadrature needs at least one node".into(),
        ));
    }
    let off2: Vec<f64> = (1..n).map(|k| k as f64 / 2.0).collect();
    let bound = 2.0 * ((n as f64 - 1.0) / 2.0).sqrt() + 1.0;
    let nf = n as f64;
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for k in 0..n.div_ceil(2) {
        // k-th largest eigenvalue lies where the count crosses n - k
        let target = n - 1 - k;
        let (mut lo, mut hi) = (-bound, bound);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if count_below(mid, &off2) > target {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let mut z = 0.5 * (lo + hi);
        for _ in 0..3 {
            let (p1, p2, _) = hermite_scaled(z, n);
            let pp = (2.0 * nf).sqrt() * p2;
            let next = z - p1 / pp;
            if !(next.is_finite() && (next - z).abs() < 1e-8 * z.abs().max(1.0)) {
                break;
            }
            z = next;
        }
        if n % 2 == 1 && k == n / 2 {
            z = 0.0;
        }
        let (_, p2, log_scale) = hermite_scaled(z, n);
        let log_pp = 0.5 * (2.0 * nf).ln() + p2.abs().ln() + log_scale;
        let weight = (std::f64::consts::LN_2 - 2.0 * log_pp).exp();
        if !weight.is_finite() {
            return Err(Error::Numerical(format!(
                "Gauss-Hermite weight {k} of {n} is not finite"
            )));
        }
        x[k] = z;
        x[n - 1 - k] = -z;
        w[k] = weight;
        w[n - 1 - k] = weight;
    }
    Ok((x, w))
}

/// Quadrature points and probability weights for `N(mean, var)` in one dimension.
pub fn normal_quadrature(mean: f64, var: f64, n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let (x, w) = gauss_hermite(n)?;
    let sd = var.sqrt();
    let norm = std::f64::consts::PI.sqrt();
    Ok((
        x.iter()
            .map(|xi| mean + std::f64::consts::SQRT_2 * sd * xi)
            .collect(),
        w.iter().map(|wi| wi / norm).collect(),
    ))
}

/// Expected KL values for two choices of `q(c|x)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResponsibilityGap {
    /// With `q(c|x) = E_q(z'|x) p(c|z')`.
    pub gap_expected_resp: f64,
    /// With the closed-form optimum; equals `-log Z`.
    pub gap_optimal: f64,
}

fn gaps_at(prior: &FacetPrior, q_z: &DiagGaussianParams, n: usize) -> Result<ResponsibilityGap> {
    let (nodes, weights) = normal_quadrature(q_z.mean[0], q_z.log_var[0].exp(), n)?;
    let k = prior.num_clusters();
    let mut expected_log_post = vec![0.0; k];
    let mut averaged_post = vec![0.0; k];
    for (z, w) in nodes.iter().zip(&weights) {
        for (c, r) in prior.log_responsibilities(&[*z])?.into_iter().enumerate() {
            expected_log_post[c] += w * r;
            averaged_post[c] += w * r.exp();
        }
    }
    let total: f64 = averaged_post.iter().sum();
    let kl = |q: &[f64]| -> f64 {
        q.iter()
            .zip(&expected_log_post)
            .filter(|(p, _)| **p > 0.0)
            .map(|(p, e)| p * (p.ln() - e))
            .sum()
    };
    let vade: Vec<f64> = averaged_post.iter().map(|p| p / total).collect();
    let optimal = normalise(expected_log_post.clone());
    Ok(ResponsibilityGap {
        gap_expected_resp: kl(&vade).max(0.0),
        gap_optimal: optimal.min_kl().max(0.0),
    })
}

/// Evaluates `E_q(z|x) KL[q(c|x) || p(c|z)]` by Gauss–Hermite quadrature for
/// the averaged-responsibility choice of `q(c|x)` and for the optimum.
///
/// The rule is evaluated at `n_quad` and `2 n_quad` nodes; if the two
/// disagree by more than `1e-6` the result is rejected.
pub fn responsibility_gap(
    prior: &FacetPrior,
    q_z: &DiagGaussianParams,
    n_quad: usize,
) -> Result<ResponsibilityGap> {
    if prior.dim() != 1 || q_z.dim() != 1 {
        return Err(Error::InvalidInput(
            "the quadrature gap is defined for one-dimensional latents".into(),
        ));
    }
    if n_quad < 64 {
        return Err(Error::InvalidInput(format!(
            "need at least 64 quadrature nodes, got {n_quad}"
        )));
    }
    let coarse = gaps_at(prior, q_z, n_quad)?;
    let fine = gaps_at(prior, q_z, 2 * n_quad)?;
    let diff = (coarse.gap_expected_resp - fine.gap_expected_resp)
        .abs()
        .max((coarse.gap_optimal - fine.gap_optimal).abs());
    if !(diff <= 1e-6) {
        return Err(Error::Numerical(format!(
            "quadrature refinement changed the gap by {diff:e}"
        )));
    }
    Ok(fine)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prior::CovMode;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn prior_1d(means: &[f64], sds: &[f64], weights: &[f64]) -> FacetPrior {
        let k = means.len();
        let chol = Tensor::new(vec![k, 1, 1], sds.to_vec()).unwrap();
        FacetPrior::from_components(
            Tensor::matrix(k, 1, means.to_vec()),
            &chol,
            weights,
            CovMode::Diag,
        )
        .unwrap()
    }

    fn random_prior(rng: &mut ChaCha8Rng, k: usize, d: usize) -> FacetPrior {
        let means = Tensor::matrix(
            k,
            d,
            (0..k * d).map(|_| rng.random_range(-2.0..2.0)).collect(),
        );
        let mut chol = vec![0.0; k * d * d];
        for c in 0..k {
            for i in 0..d {
                chol[(c * d + i) * d + i] = rng.random_range(0.5..1.5);
                for j in 0..i {
                    chol[(c * d + i) * d + j] = rng.random_range(-0.3..0.3);
                }
            }
        }
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
        let s: f64 = raw.iter().sum();
        let w: Vec<f64> = raw.iter().map(|v| v / s).collect();
        FacetPrior::from_components(
            means,
            &Tensor::new(vec![k, d, d], chol).unwrap(),
            &w,
            CovMode::Full,
        )
        .unwrap()
    }

    #[test]
    fn single_sample_is_bitwise_responsibilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_prior(&mut rng, 3, 2);
        let z = Tensor::matrix(1, 2, vec![0.3, -0.7]);
        let q = optimal_q_single(&p, &z).unwrap();
        assert_eq!(q.log_probs, p.log_responsibilities(&[0.3, -0.7]).unwrap());
        assert_eq!(q.log_z, 0.0);
    }

    #[test]
    fn symmetric_samples_give_uniform_posterior() {
        let p = prior_1d(&[-1.0, 1.0], &[1.0, 1.0], &[0.5, 0.5]);
        let q = optimal_q_single(&p, &Tensor::matrix(4, 1, vec![-2.0, -0.5, 0.5, 2.0])).unwrap();
        for v in q.probs() {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn optimum_beats_random_categoricals() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_prior(&mut rng, 3, 2);
        let z = Tensor::matrix(
            16,
            2,
            (0..32).map(|_| rng.random_range(-2.0..2.0)).collect(),
        );
        let q = optimal_q_single(&p, &z).unwrap();
        let best = expected_kl(&p, &q.probs(), &z).unwrap();
        assert!((best - q.min_kl()).abs() < 1e-12);
        for _ in 0..200 {
            let raw: Vec<f64> = (0..3).map(|_| rng.random::<f64>()).collect();
            let s: f64 = raw.iter().sum();
            let other: Vec<f64> = raw.iter().map(|v| v / s).collect();
            assert!(expected_kl(&p, &other, &z).unwrap() >= best - 1e-12);
        }
    }

    #[test]
    fn general_form_agrees_with_factorised_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let priors = MultiFacetPrior::new(vec![
            random_prior(&mut rng, 2, 2),
            random_prior(&mut rng, 3, 2),
        ])
        .unwrap();
        let samples: Vec<Tensor> = (0..2)
            .map(|_| Tensor::matrix(5, 2, (0..10).map(|_| rng.random_range(-2.0..2.0)).collect()))
            .collect();
        let multi = optimal_q_multi(&priors, &samples).unwrap();
        let joint = optimal_q_general(&priors, &samples).unwrap();
        for a in 0..2 {
            for b in 0..3 {
                let lp = joint.log_probs[joint.index(&[a, b])];
                assert!((lp - multi[0].log_probs[a] - multi[1].log_probs[b]).abs() < 1e-12);
            }
        }
        assert!((joint.min_kl() - joint_min_kl(&multi)).abs() < 1e-12);
        assert!(optimal_q_multi(&priors, &samples[..1]).is_err());
    }

    #[test]
    fn joint_space_guard() {
        let big = FacetPrior::isotropic(1001, 1, 1.0, CovMode::Diag, true).unwrap();
        let priors = MultiFacetPrior::new(vec![big.clone(), big]).unwrap();
        let z = Tensor::matrix(1, 1, vec![0.0]);
        assert!(optimal_q_general(&priors, &[z.clone(), z]).is_err());
    }

    #[test]
    fn large_rules_have_distinct_nodes_and_unit_mass() {
        for n in [200, 257, 600] {
            let (x, w) = gauss_hermite(n).unwrap();
            let mut sorted = x.clone();
            sorted.sort_by(f64::total_cmp);
            assert!(sorted.windows(2).all(|p| p[1] - p[0] > 1e-3), "n={n}");
            let pi = std::f64::consts::PI;
            assert!((w.iter().sum::<f64>() / pi.sqrt() - 1.0).abs() < 1e-13);
            let second: f64 = x.iter().zip(&w).map(|(a, b)| a * a * b).sum();
            assert!((second / pi.sqrt() - 0.5).abs() < 1e-13);
        }
    }

    #[test]
    fn hermite_rule_integrates_moments() {
        let (x, w) = normal_quadrature(0.5, 4.0, 64).unwrap();
        let m1: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum();
        let m2: f64 = x.iter().zip(&w).map(|(a, b)| (a - 0.5).powi(2) * b).sum();
        let m0: f64 = w.iter().sum();
        assert!((m0 - 1.0).abs() < 1e-12 && (m1 - 0.5).abs() < 1e-12 && (m2 - 4.0).abs() < 1e-10);
    }

    #[test]
    fn point_mass_has_no_gap() {
        let p = prior_1d(&[-1.0, 2.0], &[1.0, 1.0], &[0.3, 0.7]);
        let q = DiagGaussianParams::new(vec![0.5], vec![1e-10f64.ln()]).unwrap();
        let g = responsibility_gap(&p, &q, 64).unwrap();
        assert!(g.gap_expected_resp < 1e-6 && g.gap_optimal < 1e-6);
    }

    #[test]
    fn asymmetric_prior_has_positive_gap() {
        let p = prior_1d(&[-1.0, 2.0], &[1.0, 1.0], &[0.3, 0.7]);
        let q = DiagGaussianParams::new(vec![0.5], vec![0.0]).unwrap();
        let g = responsibility_gap(&p, &q, 64).unwrap();
        assert!(g.gap_expected_resp > 1e-3);
        assert!(g.gap_expected_resp >= g.gap_optimal);
        assert!(responsibility_gap(&p, &q, 32).is_err());
    }
}
