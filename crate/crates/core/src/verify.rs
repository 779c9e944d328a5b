//! Oracle checks for the optimal posteriors and the loss estimators.
//!
//! Each check compares library output against an independent computation:
//! finite differences for gradients, brute-force search over the simplex for
//! the optimal categorical, full joint enumeration for the factorised form,
//! and quadrature for the one-dimensional expected KL.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{check_gradients_many, logsumexp_slice, Tape, Var};
use crate::distributions::{DiagGaussianParams, LikelihoodModel};
use crate::elbo::{loss_alternate, loss_primary};
use crate::error::{Result, TensorError};
use crate::model::{Activation, Architecture, MfcVae, ModelConfig, Noise};
use crate::prior::{CovMode, FacetPrior, MultiFacetPrior};
use crate::tensor::Tensor;
use crate::trainer::init_parameters;
use crate::vade::{
    responsibility_gap, normal_quadrature, optimal_q_general, optimal_q_multi, optimal_q_weighted,
    CategoricalPosterior,
};

/// Outcome of one oracle comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub residual: f64,
    pub threshold: f64,
    /// True when the residual must exceed the threshold rather than stay below it.
    pub must_exceed: bool,
    pub passed: bool,
}

impl CheckResult {
    /// Passes when `residual < threshold`.
    pub fn below(name: &str, residual: f64, threshold: f64) -> Self {
        Self {
            name: name.to_string(),
            residual,
            threshold,
            must_exceed: false,
            passed: residual < threshold,
        }
    }

    /// Passes when `residual > threshold`.
    pub fn above(name: &str, residual: f64, threshold: f64) -> Self {
        Self {
            name: name.to_string(),
            residual,
            threshold,
            must_exceed: true,
            passed: residual > threshold,
        }
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} residual={:.3e} threshold={}{:.1e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.residual,
            if self.must_exceed { ">" } else { "<" },
            self.threshold
        )
    }
}

/// Knobs for the suite. `q_shift` is added to every optimal log-probability
/// before checking, which must make the suite fail when non-zero.
#[derive(Clone, Copy, Debug, Default)]
pub struct VerifyOptions {
    pub q_shift: f64,
}

/// A full-covariance mixture with random parameters.
pub fn random_prior(rng: &mut ChaCha8Rng, k: usize, d: usize) -> FacetPrior {
    let means = Tensor::matrix(
        k,
        d,
        (0..k * d).map(|_| rng.random_range(-2.0..2.0)).collect(),
    );
    let mut chol = vec![0.0; k * d * d];
    for c in 0..k {
        for i in 0..d {
            chol[(c * d + i) * d + i] = rng.random_range(0.4..1.5);
            for j in 0..i {
                chol[(c * d + i) * d + j] = rng.random_range(-0.4..0.4);
            }
        }
    }
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let w: Vec<f64> = raw.iter().map(|v| v / total).collect();
    FacetPrior::from_components(
        means,
        &Tensor::new(vec![k, d, d], chol).expect("shape"),
        &w,
        CovMode::Full,
    )
    .expect("valid random prior")
}

fn gaussian_samples(rng: &mut ChaCha8Rng, l: usize, d: usize, spread: f64) -> Tensor {
    let centre: Vec<f64> = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();
    Tensor::matrix(
        l,
        d,
        (0..l * d)
            .map(|k| centre[k % d] + spread * rng.sample::<f64, _>(StandardNormal))
            .collect(),
    )
}

/// `E KL[q || p(c|z)]` from the per-sample log responsibilities, summed
/// directly; `q` need not be normalised.
fn objective(q: &[f64], log_resp: &[Vec<f64>]) -> f64 {
    let l = log_resp.len() as f64;
    log_resp
        .iter()
        .map(|r| {
            q.iter()
                .zip(r)
                .filter(|(p, _)| **p > 0.0)
                .map(|(p, lr)| p * (p.ln() - lr))
                .sum::<f64>()
        })
        .sum::<f64>()
        / l
}

fn shifted(q: &CategoricalPosterior, shift: f64) -> Vec<f64> {
    q.log_probs.iter().map(|v| (v + shift).exp()).collect()
}

/// Worst margin of the analytic optimum against simplex grids, random
/// categoricals and local perturbations, plus the gap between the attained
/// objective and `-sum_j log Z_j`, over `instances` random problems.
pub fn optimality_checks(
    instances: usize,
    seed: u64,
    opts: VerifyOptions,
) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grid_margin = f64::INFINITY;
    let mut random_margin = f64::INFINITY;
    let mut value_gap = 0.0f64;
    let mut norm_gap = 0.0f64;
    for inst in 0..instances {
        let j_count = rng.random_range(1..=2);
        // alternate between small facets (grid-searchable) and large ones
        let small = inst % 2 == 0;
        let facets: Vec<FacetPrior> = (0..j_count)
            .map(|_| {
                let k = if small {
                    rng.random_range(2..=3)
                } else {
                    rng.random_range(4..=25)
                };
                let d = rng.random_range(1..=3);
                random_prior(&mut rng, k, d)
            })
            .collect();
        let l = rng.random_range(1..=16);
        let spread = rng.random_range(0.05..1.5);
        let samples: Vec<Tensor> = facets
            .iter()
            .map(|f| gaussian_samples(&mut rng, l, f.dim(), spread))
            .collect();
        let priors = MultiFacetPrior::new(facets)?;
        let posts = optimal_q_multi(&priors, &samples)?;
        let mut attained = 0.0;
        let mut claimed = 0.0;
        for ((prior, z), post) in priors.facets.iter().zip(&samples).zip(&posts) {
            let log_resp: Vec<Vec<f64>> = (0..l)
                .map(|s| prior.log_responsibilities(z.row(s)))
                .collect::<Result<_>>()?;
            let q = shifted(post, opts.q_shift);
            let best = objective(&q, &log_resp);
            attained += best;
            claimed += post.min_kl();
            norm_gap = norm_gap.max((q.iter().sum::<f64>() - 1.0).abs());
            let k = q.len();
            if k <= 3 {
                let steps = 1000;
                for a in 0..=steps {
                    if k == 2 {
                        let p = a as f64 / steps as f64;
                        grid_margin = grid_margin.min(objective(&[p, 1.0 - p], &log_resp) - best);
                    } else {
                        for b in 0..=(steps - a) {
                            let (p0, p1) = (a as f64 / steps as f64, b as f64 / steps as f64);
                            let p2 = ((steps - a - b) as f64 / steps as f64).max(0.0);
                            grid_margin =
                                grid_margin.min(objective(&[p0, p1, p2], &log_resp) - best);
                        }
                    }
                }
            }
            for trial in 0..1000 {
                let cand: Vec<f64> = if trial % 2 == 0 {
                    let raw: Vec<f64> = (0..k).map(|_| -rng.random::<f64>().ln()).collect();
                    let s: f64 = raw.iter().sum();
                    raw.iter().map(|v| v / s).collect()
                } else {
                    let scale = 10f64.powf(rng.random_range(-4.0..-1.0));
                    let logits: Vec<f64> = post
                        .log_probs
                        .iter()
                        .map(|v| v + scale * rng.sample::<f64, _>(StandardNormal))
                        .collect();
                    let lse = logsumexp_slice(&logits);
                    logits.iter().map(|v| (v - lse).exp()).collect()
                };
                random_margin = random_margin.min(objective(&cand, &log_resp) - best);
            }
        }
        value_gap = value_gap.max((attained - claimed).abs());
    }
    Ok(vec![
        CheckResult::below("optimal_q_grid_margin", (-grid_margin).max(0.0), 1e-6),
        CheckResult::below("optimal_q_random_margin", (-random_margin).max(0.0), 1e-6),
        CheckResult::below("optimal_q_min_value", value_gap, 1e-8),
        CheckResult::below("optimal_q_normalised", norm_gap, 1e-12),
    ])
}

/// Facet marginals of the enumerated joint optimum against the factorised
/// optimum, and local optimality of the joint, on random instances whose
/// joint space has up to `max_joint` tuples.
pub fn joint_posterior_checks(instances: usize, max_joint: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut local_margin = f64::INFINITY;
    let mut local_done = false;
    for inst in 0..instances {
        let j_count = 2 + inst % 2;
        let cap = (max_joint as f64).powf(1.0 / j_count as f64).floor() as usize;
        let ks: Vec<usize> = (0..j_count)
            .map(|_| rng.random_range(2..=cap.max(2)))
            .collect();
        let facets: Vec<FacetPrior> = ks
            .iter()
            .map(|&k| {
                let d = rng.random_range(1..=2);
                random_prior(&mut rng, k, d)
            })
            .collect();
        let l = rng.random_range(1..=6);
        let samples: Vec<Tensor> = facets
            .iter()
            .map(|f| gaussian_samples(&mut rng, l, f.dim(), 0.7))
            .collect();
        let priors = MultiFacetPrior::new(facets)?;
        let multi = optimal_q_multi(&priors, &samples)?;
        let joint = optimal_q_general(&priors, &samples)?;
        for (j, m) in multi.iter().enumerate() {
            for (a, b) in joint.log_marginal(j).iter().zip(&m.log_probs) {
                worst = worst.max((a.exp() - b.exp()).abs());
            }
        }
        worst = worst.max((joint.min_kl() - multi.iter().map(|m| m.min_kl()).sum::<f64>()).abs());
        if !local_done && joint.log_probs.len() <= 400 {
            local_done = true;
            // joint objective evaluated tuple by tuple against perturbed joints
            let size = joint.log_probs.len();
            let per_sample: Vec<Vec<f64>> = (0..l)
                .map(|s| {
                    let lj: Vec<Vec<f64>> = priors
                        .facets
                        .iter()
                        .zip(&samples)
                        .map(|(p, z)| p.log_joint(z.row(s)))
                        .collect::<Result<_>>()?;
                    let full: Vec<f64> = (0..size)
                        .map(|i| {
                            joint
                                .tuple(i)
                                .iter()
                                .enumerate()
                                .map(|(j, c)| lj[j][*c])
                                .sum()
                        })
                        .collect();
                    let lse = logsumexp_slice(&full);
                    Ok(full.iter().map(|v| v - lse).collect())
                })
                .collect::<Result<_>>()?;
            let q: Vec<f64> = joint.log_probs.iter().map(|v| v.exp()).collect();
            let best = objective(&q, &per_sample);
            for _ in 0..1000 {
                let dir: Vec<f64> = (0..size)
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let step = 10f64.powf(rng.random_range(-4.0..-1.0));
                let logits: Vec<f64> = joint
                    .log_probs
                    .iter()
                    .zip(&dir)
                    .map(|(a, b)| a + step * b)
                    .collect();
                let lse = logsumexp_slice(&logits);
                let cand: Vec<f64> = logits.iter().map(|v| (v - lse).exp()).collect();
                local_margin = local_margin.min(objective(&cand, &per_sample) - best);
            }
        }
    }
    let mut out = vec![CheckResult::below("joint_marginals_match_factorised", worst, 1e-12)];
    if local_margin.is_finite() {
        out.push(CheckResult::below(
            "joint_local_optimum",
            (-local_margin).max(0.0),
            1e-9,
        ));
    }
    Ok(out)
}

/// The asymmetric two-component instance used for the expected-responsibility gap check.
pub fn asymmetric_instance() -> (FacetPrior, DiagGaussianParams) {
    let means = Tensor::matrix(2, 1, vec![-1.0, 2.0]);
    let chol = Tensor::new(vec![2, 1, 1], vec![1.0, 1.0]).expect("shape");
    let prior =
        FacetPrior::from_components(means, &chol, &[0.3, 0.7], CovMode::Diag).expect("valid");
    (
        prior,
        DiagGaussianParams::new(vec![0.5], vec![0.0]).expect("valid"),
    )
}

/// Gap of the averaged-responsibility posterior over the optimum, and the
/// optimum against `-log Z` from a weighted sample rule on quadrature nodes.
pub fn responsibility_gap_checks(opts: VerifyOptions) -> Result<Vec<CheckResult>> {
    let (prior, q) = asymmetric_instance();
    let gap = responsibility_gap(&prior, &q, 64)?;
    let (nodes, weights) = normal_quadrature(q.mean[0], q.log_var[0].exp(), 256)?;
    let post = optimal_q_weighted(&prior, &Tensor::matrix(nodes.len(), 1, nodes), &weights)?;
    let log_z = logsumexp_slice(
        &post
            .log_probs
            .iter()
            .map(|v| v + post.log_z + opts.q_shift)
            .collect::<Vec<_>>(),
    );
    Ok(vec![
        CheckResult::above(
            "expected_responsibility_gap_excess",
            gap.gap_expected_resp - gap.gap_optimal,
            1e-4,
        ),
        CheckResult::below(
            "optimal_gap_is_neg_log_z",
            (gap.gap_optimal + log_z).abs(),
            1e-8,
        ),
    ])
}

/// A small two-facet ladder model with random weights and priors.
pub fn random_model(
    rng: &mut ChaCha8Rng,
    input_dim: usize,
    widths: &[usize],
    z_dims: &[usize],
    clusters: &[usize],
) -> Result<MfcVae> {
    let cfg = ModelConfig {
        input_dim,
        z_dims: z_dims.to_vec(),
        clusters: clusters.to_vec(),
        widths: widths.to_vec(),
        architecture: Architecture::Ladder,
        likelihood: LikelihoodModel::Bernoulli,
        cov_mode: CovMode::Full,
        pi_trainable: true,
        fade_in_batches: 1,
        activation: Activation::Relu,
    };
    let mut model = MfcVae::new(cfg)?;
    init_parameters(&mut model, rng);
    for (j, prior) in model.priors.iter_mut().enumerate() {
        let mut p = random_prior(rng, clusters[j], z_dims[j]);
        p.means.data_mut().iter_mut().for_each(|v| *v *= 0.5);
        *prior = p;
    }
    Ok(model)
}

fn random_batch(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
    Tensor::matrix(n, d, (0..n * d).map(|_| rng.random::<f64>()).collect())
}

fn standard_noise(rng: &mut ChaCha8Rng, n: usize, z_dims: &[usize]) -> Vec<Tensor> {
    z_dims
        .iter()
        .map(|&d| {
            Tensor::matrix(
                n,
                d,
                (0..n * d).map(|_| rng.sample(StandardNormal)).collect(),
            )
        })
        .collect()
}

/// Max relative error of the full training-loss gradient (all network and
/// prior parameters) against central differences.
pub fn gradient_check(
    seed: u64,
    input_dim: usize,
    widths: &[usize],
    z_dims: &[usize],
    clusters: &[usize],
    batch: usize,
) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = random_model(&mut rng, input_dim, widths, z_dims, clusters)?;
    let x = random_batch(&mut rng, batch, input_dim);
    let eps = standard_noise(&mut rng, batch, z_dims);
    let alphas = vec![1.0; z_dims.len()];
    let tensors: Vec<Tensor> = model
        .named_tensors()
        .into_iter()
        .map(|(_, t)| t.clone())
        .collect();
    let wrap = |e: crate::error::Error| TensorError::InvalidArgument {
        op: "model",
        msg: e.to_string(),
    };
    let err = check_gradients_many(
        |tape, vars| {
            let mv = model.vars_from(vars).map_err(wrap)?;
            let xv = tape.constant(x.clone())?;
            let bundle = model.encode(&mv, xv, Noise::Given(&eps)).map_err(wrap)?;
            let zs: Vec<Var<'_>> = bundle.facets.iter().map(|f| f.z).collect();
            let out = model.decode(&mv, &zs, &alphas).map_err(wrap)?;
            Ok(
                loss_primary(xv, &bundle, &LikelihoodModel::Bernoulli, &out, &alphas)
                    .map_err(wrap)?
                    .total,
            )
        },
        &tensors,
        1e-6,
    )?;
    Ok(CheckResult::below(
        "loss_gradient_vs_finite_differences",
        err,
        1e-5,
    ))
}

/// Loss values of the two estimators on shared samples, the single-sample
/// multi-sample estimate against the three-term loss, and the L2 distance
/// between the two estimators' parameter gradients (reported, not bounded).
pub fn estimator_checks(instances: usize, seed: u64) -> Result<(Vec<CheckResult>, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut loss_gap = 0.0f64;
    let mut iwae_gap = 0.0f64;
    let mut grad_l2 = 0.0f64;
    for _ in 0..instances {
        let j_count = rng.random_range(1..=3);
        let z_dims: Vec<usize> = (0..j_count).map(|_| rng.random_range(1..=3)).collect();
        let clusters: Vec<usize> = (0..j_count).map(|_| rng.random_range(1..=4)).collect();
        let widths: Vec<usize> = (0..j_count).map(|_| rng.random_range(3..=8)).collect();
        let input_dim = rng.random_range(4..=10);
        let batch = rng.random_range(1..=5);
        let model = random_model(&mut rng, input_dim, &widths, &z_dims, &clusters)?;
        let x = random_batch(&mut rng, batch, input_dim);
        let alphas: Vec<f64> = (0..j_count)
            .map(|_| [0.0, 0.5, 1.0][rng.random_range(0..3)])
            .collect();
        let noise_seed: u64 = rng.random();

        let tape = Tape::new();
        let vars = model.register(&tape)?;
        let xv = tape.constant(x.clone())?;
        let mut noise = ChaCha8Rng::seed_from_u64(noise_seed);
        let bundle = model.encode(&vars, xv, Noise::Sample(&mut noise))?;
        let zs: Vec<Var<'_>> = bundle.facets.iter().map(|f| f.z).collect();
        let out = model.decode(&vars, &zs, &alphas)?;
        let primary = loss_primary(xv, &bundle, &LikelihoodModel::Bernoulli, &out, &alphas)?;
        let alternate = loss_alternate(xv, &bundle, &LikelihoodModel::Bernoulli, &out, &alphas)?;
        loss_gap = loss_gap.max((primary.total.item() - alternate.total.item()).abs());

        let all: Vec<Var<'_>> = vars.net.iter().copied().collect();
        let g1 = tape.backward(primary.total)?;
        // the alternate estimator on its own tape, same noise
        let tape2 = Tape::new();
        let vars2 = model.register(&tape2)?;
        let xv2 = tape2.constant(x.clone())?;
        let mut noise2 = ChaCha8Rng::seed_from_u64(noise_seed);
        let bundle2 = model.encode(&vars2, xv2, Noise::Sample(&mut noise2))?;
        let zs2: Vec<Var<'_>> = bundle2.facets.iter().map(|f| f.z).collect();
        let out2 = model.decode(&vars2, &zs2, &alphas)?;
        let alt2 = loss_alternate(xv2, &bundle2, &LikelihoodModel::Bernoulli, &out2, &alphas)?;
        let g2 = tape2.backward(alt2.total)?;
        for (a, b) in all.iter().zip(&vars2.net) {
            let (ga, gb) = (g1.get_or_zeros(*a), g2.get_or_zeros(*b));
            grad_l2 += ga
                .data()
                .iter()
                .zip(gb.data())
                .map(|(u, v)| (u - v).powi(2))
                .sum::<f64>();
        }

        if alphas.iter().all(|a| *a == 1.0) {
            let mut noise3 = ChaCha8Rng::seed_from_u64(noise_seed);
            let est = model.elbo_estimate(&x, 1, &mut noise3)?;
            let mean = est.iter().sum::<f64>() / est.len() as f64;
            iwae_gap = iwae_gap.max((-mean - alternate.total.item()).abs());
        }
    }
    Ok((
        vec![
            CheckResult::below("loss_primary_vs_alternate", loss_gap, 1e-8),
            CheckResult::below("multi_sample_l1_vs_alternate", iwae_gap, 1e-10),
        ],
        grad_l2.sqrt(),
    ))
}

/// The quick suite run by the command-line `verify`.
pub fn run_suite(opts: VerifyOptions) -> Result<Vec<CheckResult>> {
    let mut out = vec![gradient_check(0, 10, &[8, 12], &[2, 2], &[2, 3], 3)?];
    out.extend(optimality_checks(6, 1, opts)?);
    out.extend(joint_posterior_checks(4, 2000, 2)?);
    out.extend(responsibility_gap_checks(opts)?);
    out.extend(estimator_checks(20, 3)?.0);
    Ok(out)
}
