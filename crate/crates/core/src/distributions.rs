//! Gaussian log-densities, reparameterised sampling and pixel likelihoods.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Var;
use crate::error::{Error, Result, TensorError};
use crate::tensor::Tensor;

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Range that log-variances are clamped into before exponentiation.
pub const LOG_VAR_MIN: f64 = -30.0;
pub const LOG_VAR_MAX: f64 = 30.0;

/// Floor applied to Bernoulli means before taking logs.
pub const BERNOULLI_EPS: f64 = 1e-7;

/// Diagonal Gaussian stored as mean and natural-log variance.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussianParams {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl DiagGaussianParams {
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mean.len() != log_var.len() {
            return Err(Error::InvalidInput(format!(
                "mean has {} entries but log_var has {}",
                mean.len(),
                log_var.len()
            )));
        }
        if mean.iter().chain(&log_var).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(
                "Gaussian parameters must be finite".into(),
            ));
        }
        Ok(Self { mean, log_var })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            log_var: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Gaussian with covariance `L L^T`, `L` lower triangular (row-major `D x D`).
#[derive(Clone, Debug, PartialEq)]
pub struct FullGaussianParams {
    pub mean: Vec<f64>,
    pub chol: Vec<f64>,
}

impl FullGaussianParams {
    pub fn new(mean: Vec<f64>, chol: Vec<f64>) -> Result<Self> {
        let d = mean.len();
        if chol.len() != d * d {
            return Err(Error::InvalidInput(format!(
                "Cholesky factor needs {} entries, got {}",
                d * d,
                chol.len()
            )));
        }
        for i in 0..d {
            if chol[i * d + i].is_nan() || chol[i * d + i] <= 0.0 {
                return Err(Error::InvalidInput(format!(
                    "Cholesky diagonal entry {i} is not positive"
                )));
            }
            if (i + 1..d).any(|j| chol[i * d + j] != 0.0) {
                return Err(Error::InvalidInput(
                    "Cholesky factor must be lower triangular".into(),
                ));
            }
        }
        Ok(Self { mean, chol })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Dense covariance `L L^T`.
    pub fn covariance(&self) -> Vec<f64> {
        let d = self.dim();
        let l = &self.chol;
        let mut s = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                s[i * d + j] = (0..=i.min(j)).map(|k| l[i * d + k] * l[j * d + k]).sum();
            }
        }
        s
    }
}

/// Observation model for pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LikelihoodModel {
    /// Independent Bernoulli per pixel; decoder outputs means in (0, 1).
    Bernoulli,
    /// Independent Gaussian per pixel with a fixed standard deviation.
    Gaussian { sigma: f64 },
}

impl LikelihoodModel {
    pub fn validate(&self) -> Result<()> {
        match self {
            LikelihoodModel::Gaussian { sigma } if !(sigma.is_finite() && *sigma > 0.0) => Err(
                Error::InvalidInput(format!("Gaussian likelihood needs sigma > 0, got {sigma}")),
            ),
            _ => Ok(()),
        }
    }
}

fn check_dims(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!(
            "dimension mismatch: parameters have {expected}, point has {got}"
        )))
    }
}

pub fn log_prob_diag(params: &DiagGaussianParams, z: &[f64]) -> Result<f64> {
    check_dims(params.dim(), z.len())?;
    Ok(z.iter()
        .zip(&params.mean)
        .zip(&params.log_var)
        .map(|((&zi, &m), &lv)| -0.5 * LN_2PI - 0.5 * lv - (zi - m).powi(2) / (2.0 * lv.exp()))
        .sum())
}

/// Log-density through a forward triangular solve.
pub fn log_prob_full(params: &FullGaussianParams, z: &[f64]) -> Result<f64> {
    let d = params.dim();
    check_dims(d, z.len())?;
    let l = &params.chol;
    let mut u = vec![0.0; d];
    let mut log_det = 0.0;
    for i in 0..d {
        let lii = l[i * d + i];
        if lii.is_nan() || lii <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "Cholesky diagonal entry {i} is not positive"
            )));
        }
        let acc = z[i] - params.mean[i] - (0..i).map(|j| l[i * d + j] * u[j]).sum::<f64>();
        u[i] = acc / lii;
        log_det += lii.ln();
    }
    Ok(-0.5 * d as f64 * LN_2PI - log_det - 0.5 * u.iter().map(|v| v * v).sum::<f64>())
}

/// Draws `z = mean + exp(log_var / 2) * eps` on the tape with fresh standard-normal noise.
///
/// `mean` and `log_var` share a shape; gradients flow to both but not to the noise.
pub fn sample_reparam<'t, R: Rng + ?Sized>(
    mean: Var<'t>,
    log_var: Var<'t>,
    rng: &mut R,
) -> Result<Var<'t>> {
    let shape = mean.shape();
    let n = shape.iter().product();
    let eps: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    reparam_with_noise(mean, log_var, Tensor::new(shape, eps)?)
}

/// Reparameterised sample with caller-supplied noise.
pub fn reparam_with_noise<'t>(mean: Var<'t>, log_var: Var<'t>, eps: Tensor) -> Result<Var<'t>> {
    if mean.shape() != log_var.shape() || mean.shape() != eps.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "sample_reparam",
            lhs: mean.shape(),
            rhs: log_var.shape(),
        }
        .into());
    }
    let tape = mean.tape();
    let std = log_var.clamp(LOG_VAR_MIN, LOG_VAR_MAX)?.scale(0.5)?.exp()?;
    let noise = tape.constant(eps)?;
    Ok(mean.add(std.mul(noise)?)?)
}

/// Row-wise `log N(z; mean, diag(exp(log_var)))` for `(B, D)` inputs, shape `(B)`.
pub fn diag_log_prob_rows<'t>(z: Var<'t>, mean: Var<'t>, log_var: Var<'t>) -> Result<Var<'t>> {
    let lv = log_var.clamp(LOG_VAR_MIN, LOG_VAR_MAX)?;
    let diff = z.sub(mean)?;
    let quad = diff.mul(diff)?.div(lv.exp()?)?;
    let d = z.shape().last().copied().unwrap_or(1) as f64;
    Ok(lv
        .add(quad)?
        .sum_last()?
        .scale(-0.5)?
        .offset(-0.5 * d * LN_2PI)?)
}

/// Row-wise Bernoulli log-likelihood from decoder logits, shape `(B)`.
///
/// Uses `log sigmoid(a) = -softplus(-a)` and `log(1 - sigmoid(a)) = -softplus(a)`.
pub fn bernoulli_log_lik_logits<'t>(x: Var<'t>, logits: Var<'t>) -> Result<Var<'t>> {
    // x*a - softplus(a)
    Ok(x.mul(logits)?.sub(logits.softplus()?)?.sum_last()?)
}

/// Row-wise Gaussian log-likelihood with fixed `sigma`, shape `(B)`.
pub fn gaussian_log_lik<'t>(x: Var<'t>, mean: Var<'t>, sigma: f64) -> Result<Var<'t>> {
    let d = x.shape().last().copied().unwrap_or(1) as f64;
    let diff = x.sub(mean)?;
    let norm = -0.5 * d * (LN_2PI + 2.0 * sigma.ln());
    Ok(diff
        .mul(diff)?
        .sum_last()?
        .scale(-0.5 / (sigma * sigma))?
        .offset(norm)?)
}

/// Log-likelihood of pixels `x` under decoder output `x_hat`.
///
/// Bernoulli means outside `(0, 1)` are clamped into `[1e-7, 1 - 1e-7]`.
pub fn log_likelihood(model: &LikelihoodModel, x: &[f64], x_hat: &[f64]) -> Result<f64> {
    check_dims(x.len(), x_hat.len())?;
    model.validate()?;
    match *model {
        LikelihoodModel::Bernoulli => {
            let mut clamped = 0usize;
            let total = x
                .iter()
                .zip(x_hat)
                .map(|(&xi, &p)| {
                    let q = if p <= 0.0 || p >= 1.0 || p.is_nan() {
                        clamped += 1;
                        p.clamp(BERNOULLI_EPS, 1.0 - BERNOULLI_EPS)
                    } else {
                        p
                    };
                    xi * q.ln() + (1.0 - xi) * (1.0 - q).ln()
                })
                .sum();
            if clamped > 0 {
                log::warn!("clamped {clamped} Bernoulli means outside (0, 1)");
            }
            Ok(total)
        }
        LikelihoodModel::Gaussian { sigma } => {
            let norm = -0.5 * (LN_2PI + 2.0 * sigma.ln());
            Ok(x.iter()
                .zip(x_hat)
                .map(|(&a, &b)| norm - (a - b).powi(2) / (2.0 * sigma * sigma))
                .sum())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn standard_normal_at_zero() {
        let v = log_prob_diag(&DiagGaussianParams::standard(1), &[0.0]).unwrap();
        assert!((v + 0.918_938_533_204_672_7).abs() < 1e-12);
        let v = log_prob_diag(&DiagGaussianParams::standard(1), &[1.0]).unwrap();
        assert!((v + 1.418_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        assert!(log_prob_diag(&DiagGaussianParams::standard(2), &[0.0]).is_err());
    }

    #[test]
    fn full_with_identity_matches_diag() {
        let p = FullGaussianParams::new(vec![0.5, -1.0], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let z = [0.3, 0.2];
        let full = log_prob_full(&p, &z).unwrap();
        let diag = log_prob_diag(
            &DiagGaussianParams::new(vec![0.5, -1.0], vec![0.0, 0.0]).unwrap(),
            &z,
        )
        .unwrap();
        assert!((full - diag).abs() < 1e-14);
    }

    #[test]
    fn full_with_diagonal_factor_matches_diag() {
        let p = FullGaussianParams::new(vec![0.0, 1.0], vec![0.5, 0.0, 0.0, 2.0]).unwrap();
        let z = [0.7, -0.4];
        let diag =
            DiagGaussianParams::new(vec![0.0, 1.0], vec![2.0 * 0.5f64.ln(), 2.0 * 2f64.ln()])
                .unwrap();
        assert!((log_prob_full(&p, &z).unwrap() - log_prob_diag(&diag, &z).unwrap()).abs() < 1e-13);
    }

    #[test]
    fn full_rejects_bad_factor() {
        assert!(FullGaussianParams::new(vec![0.0, 0.0], vec![1.0, 0.0, 0.0, -1.0]).is_err());
        assert!(FullGaussianParams::new(vec![0.0, 0.0], vec![1.0, 0.3, 0.0, 1.0]).is_err());
        let bad = FullGaussianParams {
            mean: vec![0.0],
            chol: vec![0.0],
        };
        assert!(log_prob_full(&bad, &[0.0]).is_err());
    }

    #[test]
    fn collapsed_variance_returns_mean() {
        let tape = Tape::new();
        let m = tape
            .constant(Tensor::matrix(1, 2, vec![0.25, -3.0]))
            .unwrap();
        let lv = tape
            .constant(Tensor::matrix(1, 2, vec![-1e6, -1e6]))
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = sample_reparam(m, lv, &mut rng).unwrap().value();
        assert!((z.data()[0] - 0.25).abs() < 1e-5 && (z.data()[1] + 3.0).abs() < 1e-5);
    }

    #[test]
    fn same_seed_same_sample() {
        let draw = || {
            let tape = Tape::new();
            let m = tape.constant(Tensor::matrix(2, 2, vec![0.0; 4])).unwrap();
            let lv = tape.constant(Tensor::matrix(2, 2, vec![0.3; 4])).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            sample_reparam(m, lv, &mut rng).unwrap().value()
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn reparam_gradient_reaches_mean_and_log_var() {
        let tape = Tape::new();
        let m = tape.param(Tensor::matrix(1, 1, vec![0.0])).unwrap();
        let lv = tape.param(Tensor::matrix(1, 1, vec![0.0])).unwrap();
        let z = reparam_with_noise(m, lv, Tensor::matrix(1, 1, vec![2.0])).unwrap();
        let g = tape.backward(z.sum().unwrap()).unwrap();
        assert_eq!(g.get(m).unwrap().item(), 1.0);
        assert!((g.get(lv).unwrap().item() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn bernoulli_half() {
        let v = log_likelihood(&LikelihoodModel::Bernoulli, &[0.5; 4], &[0.5; 4]).unwrap();
        assert!((v + 2.772_588_722_239_781).abs() < 1e-12);
    }

    #[test]
    fn gaussian_zero_residual() {
        let v = log_likelihood(
            &LikelihoodModel::Gaussian { sigma: 1.0 },
            &[0.2; 3],
            &[0.2; 3],
        )
        .unwrap();
        assert!((v + 1.5 * LN_2PI).abs() < 1e-12);
    }

    #[test]
    fn bernoulli_near_saturation_and_clamping() {
        let v = log_likelihood(&LikelihoodModel::Bernoulli, &[1.0], &[1.0 - 1e-7]).unwrap();
        assert!(v.abs() < 1e-6);
        let clamped =
            log_likelihood(&LikelihoodModel::Bernoulli, &[1.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!(clamped.is_finite() && clamped.abs() < 1e-6);
    }

    #[test]
    fn gaussian_likelihood_needs_positive_sigma() {
        assert!(log_likelihood(&LikelihoodModel::Gaussian { sigma: 0.0 }, &[0.0], &[0.0]).is_err());
    }

    #[test]
    fn tape_likelihoods_match_plain_versions() {
        let tape = Tape::new();
        let x = Tensor::matrix(1, 3, vec![0.0, 0.4, 1.0]);
        let logits = Tensor::matrix(1, 3, vec![-1.0, 0.2, 2.0]);
        let p: Vec<f64> = logits
            .data()
            .iter()
            .map(|a| 1.0 / (1.0 + (-a).exp()))
            .collect();
        let xv = tape.constant(x.clone()).unwrap();
        let lv = tape.constant(logits).unwrap();
        let on_tape = bernoulli_log_lik_logits(xv, lv).unwrap().item();
        let plain = log_likelihood(&LikelihoodModel::Bernoulli, x.data(), &p).unwrap();
        assert!((on_tape - plain).abs() < 1e-12);
        let mv = tape.constant(Tensor::matrix(1, 3, p.clone())).unwrap();
        let g = gaussian_log_lik(xv, mv, 0.3).unwrap().item();
        let plain =
            log_likelihood(&LikelihoodModel::Gaussian { sigma: 0.3 }, x.data(), &p).unwrap();
        assert!((g - plain).abs() < 1e-12);
    }
}
