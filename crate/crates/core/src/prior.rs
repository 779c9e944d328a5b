//! Mixture-of-Gaussians priors, one per facet.
//!
//! Component covariances are stored through their Cholesky factors. The
//! diagonal of each factor is `softplus(raw) + 1e-4`, so every component is
//! positive definite whatever the raw values are; in full mode the strictly
//! lower triangle of `chol_lower` holds the off-diagonal entries. Mixing
//! weights are `softmax(pi_logits)`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{logsumexp_slice, Op, Tape, Var};
use crate::distributions::{log_prob_full, FullGaussianParams, LN_2PI};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower bound added to every Cholesky diagonal entry.
pub const CHOL_DIAG_FLOOR: f64 = 1e-4;

/// Covariance structure of the mixture components.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CovMode {
    Diag,
    Full,
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// One facet's mixture `sum_c pi_c N(mu_c, L_c L_c^T)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FacetPrior {
    pub mode: CovMode,
    pub pi_trainable: bool,
    /// `(K, D)` component means.
    pub means: Tensor,
    /// `(K, D)` raw Cholesky diagonals, mapped through softplus plus the floor.
    pub chol_diag_raw: Tensor,
    /// `(K, D, D)` strictly-lower Cholesky entries; present in full mode only.
    pub chol_lower: Option<Tensor>,
    /// `(K)` unnormalised log mixing weights.
    pub pi_logits: Tensor,
}

impl FacetPrior {
    /// Components at the origin with covariance `variance * I` and uniform weights.
    pub fn isotropic(
        k: usize,
        d: usize,
        variance: f64,
        mode: CovMode,
        pi_trainable: bool,
    ) -> Result<Self> {
        if k == 0 || d == 0 {
            return Err(Error::InvalidInput(format!(
                "prior needs K >= 1 and D >= 1, got K={k}, D={d}"
            )));
        }
        let mut prior = Self {
            mode,
            pi_trainable,
            means: Tensor::zeros(&[k, d]),
            chol_diag_raw: Tensor::zeros(&[k, d]),
            chol_lower: (mode == CovMode::Full).then(|| Tensor::zeros(&[k, d, d])),
            pi_logits: Tensor::zeros(&[k]),
        };
        prior.set_isotropic_covariance(variance)?;
        Ok(prior)
    }

    /// Builds a prior from explicit means, per-component Cholesky factors
    /// (`(K, D, D)`, lower triangular) and mixing weights.
    pub fn from_components(
        means: Tensor,
        chol: &Tensor,
        weights: &[f64],
        mode: CovMode,
    ) -> Result<Self> {
        let (k, d) = match means.shape() {
            [k, d] => (*k, *d),
            s => {
                return Err(Error::InvalidInput(format!(
                    "means must be (K, D), got {s:?}"
                )))
            }
        };
        if chol.shape() != [k, d, d] || weights.len() != k {
            return Err(Error::InvalidInput("component shapes disagree".into()));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| w.is_nan() || *w <= 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(
                "mixing weights must be positive and sum to 1".into(),
            ));
        }
        let mut raw = Vec::with_capacity(k * d);
        let mut lower = vec![0.0; k * d * d];
        for c in 0..k {
            for i in 0..d {
                let lii = chol.data()[(c * d + i) * d + i];
                if lii <= CHOL_DIAG_FLOOR {
                    return Err(Error::InvalidInput(format!(
                        "Cholesky diagonal must exceed {CHOL_DIAG_FLOOR}"
                    )));
                }
                raw.push(softplus_inv(lii - CHOL_DIAG_FLOOR));
                for j in 0..d {
                    let v = chol.data()[(c * d + i) * d + j];
                    if j < i {
                        if mode == CovMode::Diag && v != 0.0 {
                            return Err(Error::InvalidInput(
                                "diagonal mode needs diagonal factors".into(),
                            ));
                        }
                        lower[(c * d + i) * d + j] = v;
                    } else if j > i && v != 0.0 {
                        return Err(Error::InvalidInput(
                            "Cholesky factor must be lower triangular".into(),
                        ));
                    }
                }
            }
        }
        Ok(Self {
            mode,
            pi_trainable: true,
            means,
            chol_diag_raw: Tensor::matrix(k, d, raw),
            chol_lower: (mode == CovMode::Full)
                .then(|| Tensor::new(vec![k, d, d], lower).expect("shape")),
            pi_logits: Tensor::vector(weights.iter().map(|w| w.ln()).collect()),
        })
    }

    pub fn num_clusters(&self) -> usize {
        self.means.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.means.shape()[1]
    }

    /// Overwrites every component covariance with `variance * I`.
    pub fn set_isotropic_covariance(&mut self, variance: f64) -> Result<()> {
        let sd = variance.sqrt();
        if !(sd > CHOL_DIAG_FLOOR) {
            return Err(Error::InvalidInput(format!(
                "variance {variance} below the Cholesky floor"
            )));
        }
        let raw = softplus_inv(sd - CHOL_DIAG_FLOOR);
        self.chol_diag_raw
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = raw);
        if let Some(lower) = self.chol_lower.as_mut() {
            lower.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(())
    }

    pub fn set_uniform_weights(&mut self) {
        self.pi_logits.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn log_pi(&self) -> Vec<f64> {
        let lse = logsumexp_slice(self.pi_logits.data());
        self.pi_logits.data().iter().map(|v| v - lse).collect()
    }

    /// Effective Cholesky factor of component `c`, row-major `D x D`.
    pub fn chol_factor(&self, c: usize) -> Vec<f64> {
        let d = self.dim();
        let mut l = vec![0.0; d * d];
        for i in 0..d {
            l[i * d + i] = softplus(self.chol_diag_raw.data()[c * d + i]) + CHOL_DIAG_FLOOR;
            if let Some(lower) = &self.chol_lower {
                for j in 0..i {
                    l[i * d + j] = lower.data()[(c * d + i) * d + j];
                }
            }
        }
        l
    }

    pub fn component(&self, c: usize) -> FullGaussianParams {
        FullGaussianParams {
            mean: self.means.row(c).to_vec(),
            chol: self.chol_factor(c),
        }
    }

    /// Dense covariance of component `c`.
    pub fn covariance(&self, c: usize) -> Vec<f64> {
        self.component(c).covariance()
    }

    fn check_point(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.dim() {
            return Err(Error::InvalidInput(format!(
                "point has {} dims, prior has {}",
                z.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// `log pi_c + log N(z; mu_c, Sigma_c)` for every component.
    pub fn log_joint(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_point(z)?;
        let log_pi = self.log_pi();
        (0..self.num_clusters())
            .map(|c| Ok(log_pi[c] + log_prob_full(&self.component(c), z)?))
            .collect()
    }

    /// `log p(c | z)`, normalised with log-sum-exp.
    pub fn log_responsibilities(&self, z: &[f64]) -> Result<Vec<f64>> {
        let joint = self.log_joint(z)?;
        let lse = logsumexp_slice(&joint);
        Ok(joint.iter().map(|v| v - lse).collect())
    }

    /// `log sum_c pi_c N(z; mu_c, Sigma_c)`.
    pub fn log_marginal(&self, z: &[f64]) -> Result<f64> {
        Ok(logsumexp_slice(&self.log_joint(z)?))
    }

    /// Draws `(c, z)` with `c ~ Cat(pi)` (unless `fixed_c`) and `z ~ N(mu_c, temperature * Sigma_c)`.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        temperature: f64,
        rng: &mut R,
        fixed_c: Option<usize>,
    ) -> Result<(usize, Vec<f64>)> {
        if temperature.is_nan() || temperature < 0.0 {
            return Err(Error::InvalidInput(format!(
                "temperature must be >= 0, got {temperature}"
            )));
        }
        let k = self.num_clusters();
        let c = match fixed_c {
            Some(c) if c >= k => {
                return Err(Error::InvalidInput(format!(
                    "cluster {c} out of range for K={k}"
                )))
            }
            Some(c) => c,
            None => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut chosen = k - 1;
                for (i, lp) in self.log_pi().iter().enumerate() {
                    acc += lp.exp();
                    if u < acc {
                        chosen = i;
                        break;
                    }
                }
                chosen
            }
        };
        let d = self.dim();
        let l = self.chol_factor(c);
        let eps: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let scale = temperature.sqrt();
        let z = (0..d)
            .map(|i| {
                self.means.data()[c * d + i]
                    + scale * (0..=i).map(|j| l[i * d + j] * eps[j]).sum::<f64>()
            })
            .collect();
        Ok((c, z))
    }

    /// Records this prior's parameters on `tape`. Mixing logits are constants
    /// unless `pi_trainable`.
    pub fn register<'t>(&self, tape: &'t Tape) -> Result<PriorVars<'t>> {
        Ok(PriorVars {
            means: tape.param(self.means.clone())?,
            chol_diag_raw: tape.param(self.chol_diag_raw.clone())?,
            chol_lower: self
                .chol_lower
                .as_ref()
                .map(|l| tape.param(l.clone()))
                .transpose()?,
            pi_logits: if self.pi_trainable {
                tape.param(self.pi_logits.clone())?
            } else {
                tape.constant(self.pi_logits.clone())?
            },
        })
    }

    /// Named tensors in a fixed order (used by checkpoints and optimisers).
    pub fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = vec![
            ("means", &self.means),
            ("chol_diag_raw", &self.chol_diag_raw),
        ];
        if let Some(l) = &self.chol_lower {
            out.push(("chol_lower", l));
        }
        out.push(("pi_logits", &self.pi_logits));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut out = vec![
            ("means", &mut self.means),
            ("chol_diag_raw", &mut self.chol_diag_raw),
        ];
        if let Some(l) = self.chol_lower.as_mut() {
            out.push(("chol_lower", l));
        }
        out.push(("pi_logits", &mut self.pi_logits));
        out
    }
}

/// Prior parameters recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct PriorVars<'t> {
    pub means: Var<'t>,
    pub chol_diag_raw: Var<'t>,
    pub chol_lower: Option<Var<'t>>,
    pub pi_logits: Var<'t>,
}

impl<'t> PriorVars<'t> {
    /// `(K)` log mixing weights.
    pub fn log_pi(&self) -> Result<Var<'t>> {
        Ok(self.pi_logits.log_softmax()?)
    }

    /// `(B, K)` component log-densities `log N(z_b; mu_c, Sigma_c)` for `z` of shape `(B, D)`.
    pub fn log_density(&self, z: Var<'t>) -> Result<Var<'t>> {
        let tape = z.tape();
        let diag = self.chol_diag_raw.softplus()?.offset(CHOL_DIAG_FLOOR)?;
        let mut inputs = vec![z, self.means, diag];
        if let Some(lower) = self.chol_lower {
            inputs.push(lower);
        }
        Ok(tape.apply(Op::GaussianLogDensity, &inputs)?)
    }
}

/// Independent mixtures, one per facet.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiFacetPrior {
    pub facets: Vec<FacetPrior>,
}

impl MultiFacetPrior {
    pub fn new(facets: Vec<FacetPrior>) -> Result<Self> {
        if facets.is_empty() {
            return Err(Error::InvalidInput("need at least one facet".into()));
        }
        Ok(Self { facets })
    }

    pub fn num_facets(&self) -> usize {
        self.facets.len()
    }

    /// `sum_j log p(z_j)`.
    pub fn joint_log_marginal(&self, z_all: &[&[f64]]) -> Result<f64> {
        if z_all.len() != self.facets.len() {
            return Err(Error::InvalidInput(format!(
                "{} points for {} facets",
                z_all.len(),
                self.facets.len()
            )));
        }
        self.facets
            .iter()
            .zip(z_all)
            .map(|(f, z)| f.log_marginal(z))
            .sum()
    }
}

/// Settings for [`em_fit`].
#[derive(Clone, Copy, Debug)]
pub struct EmConfig {
    pub max_iters: usize,
    /// Stop once the log-likelihood improves by less than this.
    pub tol: f64,
    /// Lower bound on fitted variances.
    pub var_floor: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tol: 1e-7,
            var_floor: 1e-6,
        }
    }
}

/// Result of [`em_fit`].
#[derive(Clone, Debug)]
pub struct EmFit {
    pub prior: FacetPrior,
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
    /// Total data log-likelihood before each M-step.
    pub log_likelihoods: Vec<f64>,
    pub reseeded: usize,
}

fn diag_log_density(x: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    x.iter()
        .zip(mean)
        .zip(var)
        .map(|((&xi, &m), &v)| -0.5 * (LN_2PI + v.ln()) - (xi - m).powi(2) / (2.0 * v))
        .sum()
}

fn kmeans_pp_seeds<R: Rng + ?Sized>(points: &Tensor, k: usize, rng: &mut R) -> Vec<usize> {
    let n = points.rows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut dist: Vec<f64> = (0..n)
        .map(|i| sq_dist(points.row(i), points.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, d) in dist.iter().enumerate() {
                if u < *d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        chosen.push(next);
        for (i, d) in dist.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), points.row(next)));
        }
    }
    chosen
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Fits a diagonal-covariance mixture to the rows of `points` by EM.
///
/// Means are seeded k-means++ style from data points; variances start at the
/// per-dimension data variance and weights at `1/K`. A component whose
/// responsibility mass vanishes is re-seeded at the worst-explained point.
pub fn em_fit<R: Rng + ?Sized>(
    points: &Tensor,
    k: usize,
    cfg: &EmConfig,
    rng: &mut R,
) -> Result<EmFit> {
    if points.rank() != 2 {
        return Err(Error::InvalidInput(format!(
            "EM needs an (N, D) matrix, got {:?}",
            points.shape()
        )));
    }
    let (n, d) = (points.shape()[0], points.shape()[1]);
    if k == 0 || n < k || d == 0 {
        return Err(Error::InvalidInput(format!(
            "EM needs N >= K >= 1 and D >= 1 (N={n}, K={k}, D={d})"
        )));
    }
    if cfg.max_iters == 0 {
        return Err(Error::InvalidInput(
            "EM needs at least one iteration".into(),
        ));
    }
    if !points.all_finite() {
        return Err(Error::Numerical(
            "EM input contains non-finite values".into(),
        ));
    }
    let mut data_mean = vec![0.0; d];
    for i in 0..n {
        for (m, x) in data_mean.iter_mut().zip(points.row(i)) {
            *m += x / n as f64;
        }
    }
    let mut data_var = vec![0.0; d];
    for i in 0..n {
        for ((v, x), m) in data_var.iter_mut().zip(points.row(i)).zip(&data_mean) {
            *v += (x - m).powi(2) / n as f64;
        }
    }
    data_var.iter_mut().for_each(|v| *v = v.max(cfg.var_floor));

    let seeds = kmeans_pp_seeds(points, k, rng);
    let mut means: Vec<Vec<f64>> = seeds.iter().map(|&i| points.row(i).to_vec()).collect();
    let mut vars = vec![data_var.clone(); k];
    let mut weights = vec![1.0 / k as f64; k];
    let mut history = Vec::new();
    let mut resp = vec![0.0; n * k];
    let mut point_ll = vec![0.0; n];
    let mut reseeded = 0;

    for _ in 0..cfg.max_iters {
        // E-step
        let mut ll = 0.0;
        for i in 0..n {
            let row = &mut resp[i * k..(i + 1) * k];
            for c in 0..k {
                row[c] = weights[c].ln() + diag_log_density(points.row(i), &means[c], &vars[c]);
            }
            let lse = logsumexp_slice(row);
            row.iter_mut().for_each(|r| *r = (*r - lse).exp());
            point_ll[i] = lse;
            ll += lse;
        }
        if !ll.is_finite() {
            return Err(Error::Numerical("EM log-likelihood is not finite".into()));
        }
        let converged = history.last().is_some_and(|prev: &f64| ll - prev < cfg.tol);
        history.push(ll);
        if converged {
            break;
        }
        // M-step
        let mut worst: Vec<usize> = (0..n).collect();
        worst.sort_by(|&a, &b| point_ll[a].total_cmp(&point_ll[b]).then(a.cmp(&b)));
        let mut worst = worst.into_iter();
        for c in 0..k {
            let nk: f64 = (0..n).map(|i| resp[i * k + c]).sum();
            if nk < 1e-10 {
                let i = worst.next().expect("N >= K");
                means[c] = points.row(i).to_vec();
                vars[c] = data_var.clone();
                weights[c] = 1.0 / n as f64;
                reseeded += 1;
                continue;
            }
            let mut mu = vec![0.0; d];
            for i in 0..n {
                let r = resp[i * k + c];
                for (m, x) in mu.iter_mut().zip(points.row(i)) {
                    *m += r * x;
                }
            }
            mu.iter_mut().for_each(|m| *m /= nk);
            let mut var = vec![0.0; d];
            for i in 0..n {
                let r = resp[i * k + c];
                for ((v, x), m) in var.iter_mut().zip(points.row(i)).zip(&mu) {
                    *v += r * (x - m).powi(2);
                }
            }
            var.iter_mut()
                .for_each(|v| *v = (*v / nk).max(cfg.var_floor));
            means[c] = mu;
            vars[c] = var;
            weights[c] = nk / n as f64;
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
    }

    let mut chol = Tensor::zeros(&[k, d, d]);
    for c in 0..k {
        for i in 0..d {
            chol.data_mut()[(c * d + i) * d + i] = vars[c][i].sqrt().max(2.0 * CHOL_DIAG_FLOOR);
        }
    }
    let flat_means = Tensor::matrix(k, d, means.iter().flatten().copied().collect());
    let prior = FacetPrior::from_components(flat_means, &chol, &weights, CovMode::Diag)?;
    Ok(EmFit {
        prior,
        weights,
        means,
        variances: vars,
        log_likelihoods: history,
        reseeded,
    })
}
