//! Monte Carlo ELBO estimators for the multi-facet model.
//!
//! Both training losses use one reparameterised sample per facet. The
//! categorical posteriors are the prior responsibilities at that sample,
//! which makes the five-term and three-term forms equal in value.

use crate::autodiff::{logsumexp_slice, Var};
use crate::distributions::{
    bernoulli_log_lik_logits, diag_log_prob_rows, gaussian_log_lik, LikelihoodModel,
};
use crate::error::{Error, Result};
use crate::prior::PriorVars;

/// Encoder output and prior evaluations for one facet of a batch.
#[derive(Clone, Copy, Debug)]
pub struct FacetPosterior<'t> {
    /// `(B, D)` posterior means.
    pub mean: Var<'t>,
    /// `(B, D)` posterior log-variances.
    pub log_var: Var<'t>,
    /// `(B, D)` latent sample.
    pub z: Var<'t>,
    /// `(B, K)` component log-densities at `z`.
    pub log_density: Var<'t>,
    /// `(K)` log mixing weights.
    pub log_pi: Var<'t>,
    /// `(B, K)` `log q(c | x)`, the responsibilities at `z`.
    pub log_q_c: Var<'t>,
}

impl<'t> FacetPosterior<'t> {
    pub fn new(mean: Var<'t>, log_var: Var<'t>, z: Var<'t>, prior: &PriorVars<'t>) -> Result<Self> {
        let log_density = prior.log_density(z)?;
        let log_pi = prior.log_pi()?;
        let log_q_c = log_density.add(log_pi)?.log_softmax()?;
        Ok(Self {
            mean,
            log_var,
            z,
            log_density,
            log_pi,
            log_q_c,
        })
    }

    /// `(B, K)` `log pi_c + log N(z; mu_c, Sigma_c)`.
    pub fn log_joint(&self) -> Result<Var<'t>> {
        Ok(self.log_density.add(self.log_pi)?)
    }
}

/// All facets of a batch.
#[derive(Clone, Debug)]
pub struct PosteriorBundle<'t> {
    pub facets: Vec<FacetPosterior<'t>>,
}

/// Decoder output for a batch: logits and the mean image `sigmoid(logits)`.
#[derive(Clone, Copy, Debug)]
pub struct DecoderOutput<'t> {
    pub logits: Var<'t>,
    pub mean: Var<'t>,
}

/// Batch-mean values of the loss terms, in ELBO sign.
///
/// `total` is the minimised quantity,
/// `-(recon + z_prior + c_prior - z_entropy - c_entropy)`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub recon: f64,
    pub z_prior: f64,
    pub c_prior: f64,
    pub z_entropy: f64,
    pub c_entropy: f64,
    pub total: f64,
}

/// Loss terms as tape variables, ready for `backward`.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms<'t> {
    pub recon: Var<'t>,
    pub z_prior: Var<'t>,
    pub c_prior: Var<'t>,
    pub z_entropy: Var<'t>,
    pub c_entropy: Var<'t>,
    pub total: Var<'t>,
}

impl LossTerms<'_> {
    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown {
            recon: self.recon.item(),
            z_prior: self.z_prior.item(),
            c_prior: self.c_prior.item(),
            z_entropy: self.z_entropy.item(),
            c_entropy: self.c_entropy.item(),
            total: self.total.item(),
        }
    }
}

fn check_alphas(bundle: &PosteriorBundle<'_>, alphas: &[f64]) -> Result<()> {
    if alphas.len() != bundle.facets.len() {
        return Err(Error::InvalidInput(format!(
            "{} alphas for {} facets",
            alphas.len(),
            bundle.facets.len()
        )));
    }
    if let Some(a) = alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Error::InvalidInput(format!("alpha {a} outside [0, 1]")));
    }
    Ok(())
}

/// `(B)` reconstruction log-likelihood.
pub fn reconstruction<'t>(
    x: Var<'t>,
    out: &DecoderOutput<'t>,
    likelihood: &LikelihoodModel,
) -> Result<Var<'t>> {
    likelihood.validate()?;
    match likelihood {
        LikelihoodModel::Bernoulli => bernoulli_log_lik_logits(x, out.logits),
        LikelihoodModel::Gaussian { sigma } => gaussian_log_lik(x, out.mean, *sigma),
    }
}

/// Sums `alpha_j * term_j` over facets, skipping facets with `alpha_j = 0`.
/// Returns a `(B)` variable; `zero` supplies the shape when all are skipped.
fn weighted_sum<'t>(
    terms: impl Iterator<Item = Result<Var<'t>>>,
    alphas: &[f64],
    zero: Var<'t>,
) -> Result<Var<'t>> {
    let mut acc: Option<Var<'t>> = None;
    for (term, &a) in terms.zip(alphas) {
        if a == 0.0 {
            continue;
        }
        let term = term?;
        let term = if a == 1.0 { term } else { term.scale(a)? };
        acc = Some(match acc {
            None => term,
            Some(v) => v.add(term)?,
        });
    }
    Ok(acc.unwrap_or(zero))
}

fn finish<'t>(parts: [(&str, Var<'t>); 5]) -> Result<LossTerms<'t>> {
    let mut means = Vec::with_capacity(5);
    for (name, v) in parts {
        let m = v.mean()?;
        if !m.item().is_finite() {
            return Err(Error::NonFinite {
                term: name.to_string(),
                batch: 0,
            });
        }
        means.push(m);
    }
    let [recon, z_prior, c_prior, z_entropy, c_entropy] =
        [means[0], means[1], means[2], means[3], means[4]];
    let total = recon
        .add(z_prior)?
        .add(c_prior)?
        .sub(z_entropy)?
        .sub(c_entropy)?
        .neg()?;
    Ok(LossTerms {
        recon,
        z_prior,
        c_prior,
        z_entropy,
        c_entropy,
        total,
    })
}

/// Five-term loss:
/// `log p(x|z) + sum_j alpha_j [ sum_c q(c_j)(log p(z_j|c_j) + log pi_c)
///  - log q(z_j|x) - sum_c q(c_j) log q(c_j) ]`, negated and averaged.
pub fn loss_primary<'t>(
    x: Var<'t>,
    bundle: &PosteriorBundle<'t>,
    likelihood: &LikelihoodModel,
    out: &DecoderOutput<'t>,
    alphas: &[f64],
) -> Result<LossTerms<'t>> {
    check_alphas(bundle, alphas)?;
    let recon = reconstruction(x, out, likelihood)?;
    let zero = recon.scale(0.0)?;
    let q = |f: &FacetPosterior<'t>| f.log_q_c.exp();
    let z_prior = weighted_sum(
        bundle
            .facets
            .iter()
            .map(|f| Ok(q(f)?.mul(f.log_density)?.sum_last()?)),
        alphas,
        zero,
    )?;
    let c_prior = weighted_sum(
        bundle
            .facets
            .iter()
            .map(|f| Ok(q(f)?.mul(f.log_pi)?.sum_last()?)),
        alphas,
        zero,
    )?;
    let z_entropy = weighted_sum(
        bundle
            .facets
            .iter()
            .map(|f| diag_log_prob_rows(f.z, f.mean, f.log_var)),
        alphas,
        zero,
    )?;
    let c_entropy = weighted_sum(
        bundle
            .facets
            .iter()
            .map(|f| Ok(q(f)?.mul(f.log_q_c)?.sum_last()?)),
        alphas,
        zero,
    )?;
    finish([
        ("recon", recon),
        ("z_prior", z_prior),
        ("c_prior", c_prior),
        ("z_entropy", z_entropy),
        ("c_entropy", c_entropy),
    ])
}

/// Three-term loss `log p(x|z) - sum_j alpha_j [log q(z_j|x) - log p(z_j)]`,
/// negated and averaged. The marginal prior term is reported as `z_prior`;
/// `c_prior` and `c_entropy` are zero.
pub fn loss_alternate<'t>(
    x: Var<'t>,
    bundle: &PosteriorBundle<'t>,
    likelihood: &LikelihoodModel,
    out: &DecoderOutput<'t>,
    alphas: &[f64],
) -> Result<LossTerms<'t>> {
    check_alphas(bundle, alphas)?;
    let recon = reconstruction(x, out, likelihood)?;
    let zero = recon.scale(0.0)?;
    let z_prior = weighted_sum(
        bundle
            .facets
            .iter()
            .map(|f| Ok(f.log_joint()?.logsumexp()?)),
        alphas,
        zero,
    )?;
    let z_entropy = weighted_sum(
        bundle
            .facets
            .iter()
            .map(|f| diag_log_prob_rows(f.z, f.mean, f.log_var)),
        alphas,
        zero,
    )?;
    finish([
        ("recon", recon),
        ("z_prior", z_prior),
        ("c_prior", zero),
        ("z_entropy", z_entropy),
        ("c_entropy", zero),
    ])
}

/// Multi-sample ELBO estimate for one example.
///
/// `log_lik[l]` and `log_q[l]` are `log p(x|z^l)` and `sum_j log q(z_j^l|x)`
/// for sample `l`; `log_joint[j][l]` holds `log pi_c + log N(z_j^l; c)` over
/// the clusters of facet `j`. The estimate is
/// `mean_l (log_lik - log_q) + sum_j logsumexp_c mean_l log_joint[j][l][c]`,
/// which for one sample is the three-term ELBO.
pub fn elbo_multi_sample(
    log_lik: &[f64],
    log_q: &[f64],
    log_joint: &[Vec<Vec<f64>>],
) -> Result<f64> {
    let l = log_lik.len();
    if l == 0 || log_q.len() != l || log_joint.iter().any(|f| f.len() != l) {
        return Err(Error::InvalidInput("sample counts disagree".into()));
    }
    let base = log_lik.iter().zip(log_q).map(|(a, b)| a - b).sum::<f64>() / l as f64;
    let mut prior_term = 0.0;
    for facet in log_joint {
        let k = facet[0].len();
        let mut avg = vec![0.0; k];
        for sample in facet {
            if sample.len() != k {
                return Err(Error::InvalidInput("cluster counts disagree".into()));
            }
            for (a, v) in avg.iter_mut().zip(sample) {
                *a += v / l as f64;
            }
        }
        prior_term += logsumexp_slice(&avg);
    }
    Ok(base + prior_term)
}
