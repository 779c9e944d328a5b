//! Fully connected multi-facet encoder/decoder.
//!
//! Two layouts are supported. The ladder layout gives facet `j` its own rung
//! off a shared backbone, so deeper facets see more processing; the shared
//! layout maps one trunk to all facets through per-facet heads.
//!
//! Widths are given per backbone layer. For the ladder, `widths[j]` is the
//! output width of encoder backbone layer `j`, and the decoder mirrors it:
//! rung `j` maps `z_j` to `widths[j]`, and decoder backbone `j` maps the
//! concatenation of the deeper output and rung `j` down to `widths[j-1]`
//! (or to the input for `j = 0`).

use std::fmt;
use std::str::FromStr;

use rand::RngCore;

use crate::autodiff::{Tape, Var};
use crate::distributions::{
    bernoulli_log_lik_logits, diag_log_prob_rows, gaussian_log_lik, reparam_with_noise,
    sample_reparam, LikelihoodModel, LOG_VAR_MAX, LOG_VAR_MIN,
};
use crate::elbo::{elbo_multi_sample, DecoderOutput, FacetPosterior, PosteriorBundle};
use crate::error::{Error, Result};
use crate::prior::{CovMode, FacetPrior, PriorVars};
use crate::tensor::Tensor;

/// Rows processed per tape when evaluating large inputs.
const EVAL_CHUNK: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Architecture {
    Ladder,
    Shared,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Elu,
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ladder => "ladder",
            Self::Shared => "shared",
        })
    }
}

impl FromStr for Architecture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ladder" => Ok(Self::Ladder),
            "shared" => Ok(Self::Shared),
            _ => Err(Error::Config(format!(
                "unknown architecture '{s}' (expected ladder or shared)"
            ))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Relu => "relu",
            Self::Elu => "elu",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Self::Relu),
            "elu" => Ok(Self::Elu),
            _ => Err(Error::Config(format!(
                "unknown activation '{s}' (expected relu or elu)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub z_dims: Vec<usize>,
    pub clusters: Vec<usize>,
    pub widths: Vec<usize>,
    pub architecture: Architecture,
    pub likelihood: LikelihoodModel,
    pub cov_mode: CovMode,
    pub pi_trainable: bool,
    pub fade_in_batches: usize,
    pub activation: Activation,
}

impl ModelConfig {
    /// Two-facet fully connected configuration for 28x28 digits.
    pub fn mnist() -> Self {
        Self {
            input_dim: 784,
            z_dims: vec![5, 5],
            clusters: vec![25, 25],
            widths: vec![500, 2000],
            architecture: Architecture::Ladder,
            likelihood: LikelihoodModel::Bernoulli,
            cov_mode: CovMode::Full,
            pi_trainable: true,
            fade_in_batches: 15_000,
            activation: Activation::Relu,
        }
    }

    pub fn num_facets(&self) -> usize {
        self.z_dims.len()
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.z_dims.len();
        if j == 0 {
            return Err(Error::Config("at least one facet is required".into()));
        }
        if self.clusters.len() != j {
            return Err(Error::Config(format!(
                "{} cluster counts for {j} facets",
                self.clusters.len()
            )));
        }
        if self.input_dim == 0
            || self.z_dims.contains(&0)
            || self.clusters.contains(&0)
            || self.widths.contains(&0)
        {
            return Err(Error::Config("all dimensions must be at least 1".into()));
        }
        match self.architecture {
            Architecture::Ladder if self.widths.len() != j => Err(Error::Config(format!(
                "ladder needs one width per facet ({j}), got {}",
                self.widths.len()
            ))),
            Architecture::Shared if self.widths.is_empty() => {
                Err(Error::Config("shared trunk needs widths".into()))
            }
            _ => self.likelihood.validate(),
        }
    }

    /// Serialises to ordered `key=value` pairs.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let (lik, sigma) = match self.likelihood {
            LikelihoodModel::Bernoulli => ("bernoulli", None),
            LikelihoodModel::Gaussian { sigma } => ("gaussian", Some(sigma)),
        };
        let mut out = vec![
            ("input_dim".to_string(), self.input_dim.to_string()),
            ("z_dims".into(), list(&self.z_dims)),
            ("clusters".into(), list(&self.clusters)),
            ("widths".into(), list(&self.widths)),
            ("architecture".into(), self.architecture.to_string()),
            ("likelihood".into(), lik.to_string()),
            (
                "cov_mode".into(),
                if self.cov_mode == CovMode::Full {
                    "full"
                } else {
                    "diag"
                }
                .to_string(),
            ),
            ("pi_trainable".into(), self.pi_trainable.to_string()),
            ("fade_in_batches".into(), self.fade_in_batches.to_string()),
            ("activation".into(), self.activation.to_string()),
        ];
        if let Some(s) = sigma {
            out.push(("sigma".into(), format!("{s:?}")));
        }
        out
    }

    /// Inverse of [`ModelConfig::to_pairs`].
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let get = |k: &str| {
            pairs
                .iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Format(format!("model config is missing '{k}'")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Format(format!("'{k}' is not an integer")))
        };
        let cfg = Self {
            input_dim: num("input_dim")?,
            z_dims: parse_list(get("z_dims")?)?,
            clusters: parse_list(get("clusters")?)?,
            widths: parse_list(get("widths")?)?,
            architecture: get("architecture")?.parse()?,
            likelihood: parse_likelihood(get("likelihood")?, get("sigma").ok())?,
            cov_mode: parse_cov_mode(get("cov_mode")?)?,
            pi_trainable: get("pi_trainable")?
                .parse()
                .map_err(|_| Error::Format("bad pi_trainable".into()))?,
            fade_in_batches: num("fade_in_batches")?,
            activation: get("activation")?.parse()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses a comma-separated list of positive integers.
pub fn parse_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("'{s}' is not a list of integers")))
        })
        .collect()
}

pub fn parse_cov_mode(s: &str) -> Result<CovMode> {
    match s {
        "diag" => Ok(CovMode::Diag),
        "full" => Ok(CovMode::Full),
        _ => Err(Error::Config(format!(
            "unknown cov_mode '{s}' (expected diag or full)"
        ))),
    }
}

pub fn parse_likelihood(name: &str, sigma: Option<&str>) -> Result<LikelihoodModel> {
    let model = match name {
        "bernoulli" => LikelihoodModel::Bernoulli,
        "gaussian" => {
            let sigma = match sigma {
                Some(s) => s
                    .parse()
                    .map_err(|_| Error::Config(format!("sigma '{s}' is not a number")))?,
                None => 1.0,
            };
            LikelihoodModel::Gaussian { sigma }
        }
        _ => {
            return Err(Error::Config(format!(
                "unknown likelihood '{name}' (expected bernoulli or gaussian)"
            )))
        }
    };
    model.validate().map_err(|e| Error::Config(e.to_string()))?;
    Ok(model)
}

/// Weight or bias of a dense layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedParam {
    pub name: String,
    pub kind: ParamKind,
    /// Facet that exclusively owns this parameter, if any.
    pub facet: Option<usize>,
    pub tensor: Tensor,
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Clone, Debug)]
enum Layout {
    Ladder {
        enc_backbone: Vec<Linear>,
        enc_rung: Vec<Linear>,
        dec_rung: Vec<Linear>,
        dec_backbone: Vec<Linear>,
    },
    Shared {
        enc_trunk: Vec<Linear>,
        enc_head: Vec<Linear>,
        dec_head_w: Vec<usize>,
        dec_head_b: usize,
        dec_trunk: Vec<Linear>,
    },
}

/// Multi-facet clustering VAE: network weights plus one mixture prior per facet.
#[derive(Clone, Debug)]
pub struct MfcVae {
    config: ModelConfig,
    params: Vec<NamedParam>,
    layout: Layout,
    pub priors: Vec<FacetPrior>,
}

/// The model's parameters recorded on a tape.
#[derive(Clone, Debug)]
pub struct ModelVars<'t> {
    pub net: Vec<Var<'t>>,
    pub priors: Vec<PriorVars<'t>>,
}

/// Where the reparameterisation noise comes from.
pub enum Noise<'a> {
    Sample(&'a mut dyn RngCore),
    /// One `(B, D_j)` standard-normal tensor per facet.
    Given(&'a [Tensor]),
    /// Use the posterior mean as the latent.
    Mean,
}

/// Deterministic posterior summary for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorSummary {
    pub means: Vec<Tensor>,
    pub log_vars: Vec<Tensor>,
    /// `(B, K_j)` responsibilities at the posterior mean.
    pub log_q_c: Vec<Tensor>,
}

fn push_linear(
    params: &mut Vec<NamedParam>,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    facet: Option<usize>,
) -> Linear {
    params.push(NamedParam {
        name: format!("{name}.w"),
        kind: ParamKind::Weight,
        facet,
        tensor: Tensor::zeros(&[fan_in, fan_out]),
    });
    params.push(NamedParam {
        name: format!("{name}.b"),
        kind: ParamKind::Bias,
        facet,
        tensor: Tensor::zeros(&[fan_out]),
    });
    Linear {
        w: params.len() - 2,
        b: params.len() - 1,
    }
}

impl MfcVae {
    /// Builds a model with zero weights and placeholder priors.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let j_count = config.num_facets();
        let mut params = Vec::new();
        let w = &config.widths;
        let layout = match config.architecture {
            Architecture::Ladder => {
                let enc_backbone = (0..j_count)
                    .map(|j| {
                        let fan_in = if j == 0 { config.input_dim } else { w[j - 1] };
                        push_linear(
                            &mut params,
                            &format!("enc.backbone.{j}"),
                            fan_in,
                            w[j],
                            None,
                        )
                    })
                    .collect();
                let enc_rung = (0..j_count)
                    .map(|j| {
                        push_linear(
                            &mut params,
                            &format!("enc.rung.{j}"),
                            w[j],
                            2 * config.z_dims[j],
                            Some(j),
                        )
                    })
                    .collect();
                let dec_rung = (0..j_count)
                    .map(|j| {
                        push_linear(
                            &mut params,
                            &format!("dec.rung.{j}"),
                            config.z_dims[j],
                            w[j],
                            Some(j),
                        )
                    })
                    .collect();
                let dec_backbone = (0..j_count)
                    .map(|j| {
                        let fan_in = if j + 1 == j_count { w[j] } else { 2 * w[j] };
                        let fan_out = if j == 0 { config.input_dim } else { w[j - 1] };
                        push_linear(
                            &mut params,
                            &format!("dec.backbone.{j}"),
                            fan_in,
                            fan_out,
                            None,
                        )
                    })
                    .collect();
                Layout::Ladder {
                    enc_backbone,
                    enc_rung,
                    dec_rung,
                    dec_backbone,
                }
            }
            Architecture::Shared => {
                let n = w.len();
                let top = w[n - 1];
                let enc_trunk = (0..n)
                    .map(|i| {
                        let fan_in = if i == 0 { config.input_dim } else { w[i - 1] };
                        push_linear(&mut params, &format!("enc.trunk.{i}"), fan_in, w[i], None)
                    })
                    .collect();
                let enc_head = (0..j_count)
                    .map(|j| {
                        push_linear(
                            &mut params,
                            &format!("enc.head.{j}"),
                            top,
                            2 * config.z_dims[j],
                            Some(j),
                        )
                    })
                    .collect();
                let dec_head_w = (0..j_count)
                    .map(|j| {
                        params.push(NamedParam {
                            name: format!("dec.head.{j}.w"),
                            kind: ParamKind::Weight,
                            facet: Some(j),
                            tensor: Tensor::zeros(&[config.z_dims[j], top]),
                        });
                        params.len() - 1
                    })
                    .collect();
                params.push(NamedParam {
                    name: "dec.head.b".into(),
                    kind: ParamKind::Bias,
                    facet: None,
                    tensor: Tensor::zeros(&[top]),
                });
                let dec_head_b = params.len() - 1;
                let dec_trunk = (0..n)
                    .rev()
                    .map(|i| {
                        let fan_out = if i == 0 { config.input_dim } else { w[i - 1] };
                        push_linear(&mut params, &format!("dec.trunk.{i}"), w[i], fan_out, None)
                    })
                    .collect();
                Layout::Shared {
                    enc_trunk,
                    enc_head,
                    dec_head_w,
                    dec_head_b,
                    dec_trunk,
                }
            }
        };
        let priors = (0..j_count)
            .map(|j| {
                FacetPrior::isotropic(
                    config.clusters[j],
                    config.z_dims[j],
                    1.0,
                    config.cov_mode,
                    config.pi_trainable,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            params,
            layout,
            priors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_facets(&self) -> usize {
        self.config.num_facets()
    }

    /// Network parameters (priors excluded), in registration order.
    pub fn net_params(&self) -> &[NamedParam] {
        &self.params
    }

    pub fn net_params_mut(&mut self) -> &mut [NamedParam] {
        &mut self.params
    }

    /// Every tensor with its checkpoint name: network first, then priors.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self
            .params
            .iter()
            .map(|p| (p.name.clone(), &p.tensor))
            .collect();
        for (j, prior) in self.priors.iter().enumerate() {
            out.extend(
                prior
                    .tensors()
                    .into_iter()
                    .map(|(n, t)| (format!("prior.{j}.{n}"), t)),
            );
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = self
            .params
            .iter_mut()
            .map(|p| (p.name.clone(), &mut p.tensor))
            .collect();
        for (j, prior) in self.priors.iter_mut().enumerate() {
            out.extend(
                prior
                    .tensors_mut()
                    .into_iter()
                    .map(|(n, t)| (format!("prior.{j}.{n}"), t)),
            );
        }
        out
    }

    /// Names of tensors that belong to facet `j` alone (rungs or heads, and its prior).
    pub fn facet_tensor_names(&self, j: usize) -> Vec<String> {
        let mut out: Vec<String> = self
            .params
            .iter()
            .filter(|p| p.facet == Some(j))
            .map(|p| p.name.clone())
            .collect();
        out.extend(
            self.priors[j]
                .tensors()
                .into_iter()
                .map(|(n, _)| format!("prior.{j}.{n}")),
        );
        out
    }

    /// Whether each entry of [`MfcVae::named_tensors`] is updated by training.
    pub fn trainable_mask(&self) -> Vec<bool> {
        let mut out = vec![true; self.params.len()];
        for prior in &self.priors {
            out.extend(
                prior
                    .tensors()
                    .into_iter()
                    .map(|(n, _)| n != "pi_logits" || prior.pi_trainable),
            );
        }
        out
    }

    /// Records all parameters on `tape`.
    pub fn register<'t>(&self, tape: &'t Tape) -> Result<ModelVars<'t>> {
        let net = self
            .params
            .iter()
            .map(|p| tape.param(p.tensor.clone()))
            .collect::<std::result::Result<_, _>>()?;
        let priors = self
            .priors
            .iter()
            .map(|p| p.register(tape))
            .collect::<Result<_>>()?;
        Ok(ModelVars { net, priors })
    }

    /// Rebuilds [`ModelVars`] from variables listed in the order of
    /// [`MfcVae::named_tensors`].
    pub fn vars_from<'t>(&self, all: &[Var<'t>]) -> Result<ModelVars<'t>> {
        let expected = self.named_tensors().len();
        if all.len() != expected {
            return Err(Error::InvalidInput(format!(
                "{} variables for {expected} tensors",
                all.len()
            )));
        }
        let (net, mut rest) = all.split_at(self.params.len());
        let mut priors = Vec::with_capacity(self.priors.len());
        for prior in &self.priors {
            let full = prior.chol_lower.is_some();
            let take = if full { 4 } else { 3 };
            let (mine, tail) = rest.split_at(take);
            priors.push(PriorVars {
                means: mine[0],
                chol_diag_raw: mine[1],
                chol_lower: full.then(|| mine[2]),
                pi_logits: mine[take - 1],
            });
            rest = tail;
        }
        Ok(ModelVars {
            net: net.to_vec(),
            priors,
        })
    }

    /// Ancestral samples with facet `facet` pinned to cluster `cluster`: that
    /// facet draws `z ~ N(mu_c, t Sigma_c)`, the others draw `c ~ Cat(pi)` first.
    /// Returns the `(n, input_dim)` decoder means.
    pub fn generate(
        &self,
        facet: usize,
        cluster: usize,
        n: usize,
        temperature: f64,
        rng: &mut dyn RngCore,
    ) -> Result<Tensor> {
        if facet >= self.num_facets() {
            return Err(Error::InvalidInput(format!("facet {facet} out of range")));
        }
        if cluster >= self.priors[facet].num_clusters() {
            return Err(Error::InvalidInput(format!(
                "cluster {cluster} out of range for facet {facet} (K={})",
                self.priors[facet].num_clusters()
            )));
        }
        let mut zs: Vec<Vec<f64>> = vec![Vec::new(); self.num_facets()];
        for _ in 0..n {
            for (j, prior) in self.priors.iter().enumerate() {
                let fixed = (j == facet).then_some(cluster);
                zs[j].extend(prior.sample(temperature, rng, fixed)?.1);
            }
        }
        let zs: Vec<Tensor> = zs
            .into_iter()
            .enumerate()
            .map(|(j, z)| Tensor::matrix(n, self.config.z_dims[j], z))
            .collect();
        self.decode_values(&zs, &vec![1.0; self.num_facets()])
    }

    fn linear<'t>(&self, vars: &ModelVars<'t>, layer: Linear, x: Var<'t>) -> Result<Var<'t>> {
        Ok(x.matmul(vars.net[layer.w])?.add(vars.net[layer.b])?)
    }

    fn act<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        Ok(match self.config.activation {
            Activation::Relu => x.relu()?,
            Activation::Elu => x.elu()?,
        })
    }

    /// Per-facet `(mean, log_var)` of `q(z_j | x)`.
    pub fn encoder_params<'t>(
        &self,
        vars: &ModelVars<'t>,
        x: Var<'t>,
    ) -> Result<Vec<(Var<'t>, Var<'t>)>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.config.input_dim {
            return Err(Error::InvalidInput(format!(
                "encoder expects (batch, {}), got {shape:?}",
                self.config.input_dim
            )));
        }
        let split = |out: Var<'t>, d: usize| -> Result<(Var<'t>, Var<'t>)> {
            Ok((
                out.slice_last(0, d)?,
                out.slice_last(d, 2 * d)?.clamp(LOG_VAR_MIN, LOG_VAR_MAX)?,
            ))
        };
        let mut heads = Vec::with_capacity(self.num_facets());
        match &self.layout {
            Layout::Ladder {
                enc_backbone,
                enc_rung,
                ..
            } => {
                let mut h = x;
                for (j, (b, r)) in enc_backbone.iter().zip(enc_rung).enumerate() {
                    h = self.act(self.linear(vars, *b, h)?)?;
                    heads.push(split(self.linear(vars, *r, h)?, self.config.z_dims[j])?);
                }
            }
            Layout::Shared {
                enc_trunk,
                enc_head,
                ..
            } => {
                let mut h = x;
                for layer in enc_trunk {
                    h = self.act(self.linear(vars, *layer, h)?)?;
                }
                for (j, head) in enc_head.iter().enumerate() {
                    heads.push(split(self.linear(vars, *head, h)?, self.config.z_dims[j])?);
                }
            }
        }
        Ok(heads)
    }

    /// Encodes a batch: Gaussian parameters, one latent sample per facet, and
    /// the responsibilities at that sample.
    pub fn encode<'t>(
        &self,
        vars: &ModelVars<'t>,
        x: Var<'t>,
        noise: Noise<'_>,
    ) -> Result<PosteriorBundle<'t>> {
        let heads = self.encoder_params(vars, x)?;
        if let Noise::Given(eps) = &noise {
            if eps.len() != heads.len() {
                return Err(Error::InvalidInput(format!(
                    "{} noise tensors for {} facets",
                    eps.len(),
                    heads.len()
                )));
            }
        }
        let mut noise = noise;
        let mut facets = Vec::with_capacity(heads.len());
        for (j, (mean, log_var)) in heads.into_iter().enumerate() {
            let z = match &mut noise {
                Noise::Sample(rng) => sample_reparam(mean, log_var, *rng)?,
                Noise::Given(eps) => reparam_with_noise(mean, log_var, eps[j].clone())?,
                Noise::Mean => mean,
            };
            facets.push(FacetPosterior::new(mean, log_var, z, &vars.priors[j])?);
        }
        Ok(PosteriorBundle { facets })
    }

    /// Decodes per-facet latents (`(B, D_j)` each) with decoder weights `alphas`.
    /// A facet with `alpha_j = 0` is replaced by zeros, so the output does not
    /// depend on its latent at all.
    pub fn decode<'t>(
        &self,
        vars: &ModelVars<'t>,
        zs: &[Var<'t>],
        alphas: &[f64],
    ) -> Result<DecoderOutput<'t>> {
        let j_count = self.num_facets();
        if zs.len() != j_count || alphas.len() != j_count {
            return Err(Error::InvalidInput(format!(
                "decode needs {j_count} latents and alphas, got {} and {}",
                zs.len(),
                alphas.len()
            )));
        }
        if let Some(a) = alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(Error::InvalidInput(format!("alpha {a} outside [0, 1]")));
        }
        let mut batch = None;
        for (j, z) in zs.iter().enumerate() {
            let s = z.shape();
            if s.len() != 2 || s[1] != self.config.z_dims[j] || batch.is_some_and(|b| b != s[0]) {
                return Err(Error::InvalidInput(format!("latent {j} has shape {s:?}")));
            }
            batch = Some(s[0]);
        }
        let batch = batch.expect("J >= 1");
        let tape = zs[0].tape();
        let weigh = |v: Var<'t>, a: f64, width: usize| -> Result<Var<'t>> {
            Ok(if a == 0.0 {
                tape.constant(Tensor::zeros(&[batch, width]))?
            } else if a == 1.0 {
                v
            } else {
                v.scale(a)?
            })
        };
        let logits = match &self.layout {
            Layout::Ladder {
                dec_rung,
                dec_backbone,
                ..
            } => {
                let mut h: Option<Var<'t>> = None;
                for j in (0..j_count).rev() {
                    let width = self.config.widths[j];
                    let r = if alphas[j] == 0.0 {
                        weigh(zs[j], 0.0, width)?
                    } else {
                        weigh(
                            self.act(self.linear(vars, dec_rung[j], zs[j])?)?,
                            alphas[j],
                            width,
                        )?
                    };
                    let input = match h {
                        None => r,
                        Some(prev) => tape.concat(&[prev, r])?,
                    };
                    let out = self.linear(vars, dec_backbone[j], input)?;
                    h = Some(if j == 0 { out } else { self.act(out)? });
                }
                h.expect("J >= 1")
            }
            Layout::Shared {
                dec_head_w,
                dec_head_b,
                dec_trunk,
                ..
            } => {
                let top = *self.config.widths.last().expect("validated");
                let mut h = vars.net[*dec_head_b].broadcast_to(&[batch, top])?;
                for (j, w) in dec_head_w.iter().enumerate() {
                    if alphas[j] != 0.0 {
                        h = h.add(weigh(zs[j].matmul(vars.net[*w])?, alphas[j], top)?)?;
                    }
                }
                h = self.act(h)?;
                let last = dec_trunk.len() - 1;
                for (i, layer) in dec_trunk.iter().enumerate() {
                    h = self.linear(vars, *layer, h)?;
                    if i != last {
                        h = self.act(h)?;
                    }
                }
                h
            }
        };
        Ok(DecoderOutput {
            logits,
            mean: logits.sigmoid()?,
        })
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.rank() != 2 || x.shape()[1] != self.config.input_dim {
            return Err(Error::InvalidInput(format!(
                "expected (batch, {}) input, got {:?}",
                self.config.input_dim,
                x.shape()
            )));
        }
        Ok(())
    }

    fn chunks(x: &Tensor) -> impl Iterator<Item = Tensor> + '_ {
        (0..x.rows()).step_by(EVAL_CHUNK).map(move |s| {
            let idx: Vec<usize> = (s..(s + EVAL_CHUNK).min(x.rows())).collect();
            x.select_rows(&idx)
        })
    }

    /// Posterior means, log-variances and responsibilities at the mean.
    pub fn posterior(&self, x: &Tensor) -> Result<PosteriorSummary> {
        self.check_input(x)?;
        let j_count = self.num_facets();
        let mut acc: Vec<[Vec<f64>; 3]> = vec![[Vec::new(), Vec::new(), Vec::new()]; j_count];
        let mut tape = Tape::new();
        for chunk in Self::chunks(x) {
            tape.reset();
            let vars = self.register(&tape)?;
            let xv = tape.constant(chunk)?;
            let bundle = self.encode(&vars, xv, Noise::Mean)?;
            for (a, f) in acc.iter_mut().zip(&bundle.facets) {
                a[0].extend_from_slice(f.mean.value_ref().data());
                a[1].extend_from_slice(f.log_var.value_ref().data());
                a[2].extend_from_slice(f.log_q_c.value_ref().data());
            }
        }
        let n = x.rows();
        let mut out = PosteriorSummary {
            means: Vec::new(),
            log_vars: Vec::new(),
            log_q_c: Vec::new(),
        };
        for (j, [m, v, q]) in acc.into_iter().enumerate() {
            let d = self.config.z_dims[j];
            out.means.push(Tensor::matrix(n, d, m));
            out.log_vars.push(Tensor::matrix(n, d, v));
            out.log_q_c
                .push(Tensor::matrix(n, self.config.clusters[j], q));
        }
        Ok(out)
    }

    /// Hard cluster per facet: argmax of the responsibilities at the posterior
    /// mean, lowest index on ties.
    pub fn cluster_assign(&self, x: &Tensor) -> Result<Vec<Vec<usize>>> {
        Ok(self.posterior(x)?.log_q_c.iter().map(argmax_rows).collect())
    }

    /// Mean images for the given latents.
    pub fn decode_values(&self, zs: &[Tensor], alphas: &[f64]) -> Result<Tensor> {
        let tape = Tape::new();
        let vars = self.register(&tape)?;
        let z_vars = zs
            .iter()
            .map(|z| tape.constant(z.clone()))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(self.decode(&vars, &z_vars, alphas)?.mean.value())
    }

    /// Reconstruction from the posterior means with every facet active.
    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        let post = self.posterior(x)?;
        self.decode_values(&post.means, &vec![1.0; self.num_facets()])
    }

    /// Encodes two inputs, exchanges facet `j`'s posterior mean between them and
    /// decodes both.
    pub fn swap_reconstruct(
        &self,
        x1: &[f64],
        x2: &[f64],
        j: usize,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        if j >= self.num_facets() {
            return Err(Error::InvalidInput(format!("facet {j} out of range")));
        }
        let d = self.config.input_dim;
        if x1.len() != d || x2.len() != d {
            return Err(Error::InvalidInput(format!("inputs must have {d} values")));
        }
        let pair = Tensor::matrix(2, d, [x1, x2].concat());
        let mut means = self.posterior(&pair)?.means;
        let dj = self.config.z_dims[j];
        let m = means[j].data_mut();
        for i in 0..dj {
            m.swap(i, dj + i);
        }
        let out = self.decode_values(&means, &vec![1.0; self.num_facets()])?;
        Ok((out.row(0).to_vec(), out.row(1).to_vec()))
    }

    /// Multi-sample ELBO estimate per example with every facet active.
    pub fn elbo_estimate(
        &self,
        x: &Tensor,
        samples: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<f64>> {
        self.check_input(x)?;
        if samples == 0 {
            return Err(Error::InvalidInput("need at least one sample".into()));
        }
        let n = x.rows();
        let j_count = self.num_facets();
        let mut log_lik = vec![Vec::with_capacity(samples); n];
        let mut log_q = vec![Vec::with_capacity(samples); n];
        let mut log_joint = vec![vec![Vec::with_capacity(samples); j_count]; n];
        for _ in 0..samples {
            let tape = Tape::new();
            let vars = self.register(&tape)?;
            let xv = tape.constant(x.clone())?;
            let bundle = self.encode(&vars, xv, Noise::Sample(&mut *rng))?;
            let zs: Vec<Var<'_>> = bundle.facets.iter().map(|f| f.z).collect();
            let out = self.decode(&vars, &zs, &vec![1.0; j_count])?;
            let ll = match self.config.likelihood {
                LikelihoodModel::Bernoulli => bernoulli_log_lik_logits(xv, out.logits)?,
                LikelihoodModel::Gaussian { sigma } => gaussian_log_lik(xv, out.mean, sigma)?,
            }
            .value();
            let mut lq = vec![0.0; n];
            for (j, f) in bundle.facets.iter().enumerate() {
                let q = diag_log_prob_rows(f.z, f.mean, f.log_var)?.value();
                let joint = f.log_joint()?.value();
                for i in 0..n {
                    lq[i] += q.data()[i];
                    log_joint[i][j].push(joint.row(i).to_vec());
                }
            }
            for i in 0..n {
                log_lik[i].push(ll.data()[i]);
                log_q[i].push(lq[i]);
            }
        }
        (0..n)
            .map(|i| elbo_multi_sample(&log_lik[i], &log_q[i], &log_joint[i]))
            .collect()
    }
}

/// Row-wise argmax with lowest-index tie-breaking.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.rows())
        .map(|i| {
            let row = t.row(i);
            let mut best = 0;
            for (c, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Decoder weights for progressive training.
///
/// Step `s` (1-based) trains facets `J-s+1..=J` (1-based), i.e. 0-based
/// facets `J-s..J`. The newest of these, facet `J-s`, ramps linearly from 0
/// to 1 over `fade_in_batches` batches of the step, except in the first step
/// where the single active facet is fully on from the start.
pub fn fade_in_coefficient(
    fade_in_batches: usize,
    num_facets: usize,
    batch_in_step: usize,
    step: usize,
) -> Result<Vec<f64>> {
    if step == 0 || step > num_facets {
        return Err(Error::InvalidInput(format!(
            "progressive step {step} outside 1..={num_facets}"
        )));
    }
    let newest = num_facets - step;
    Ok((0..num_facets)
        .map(|j| match j.cmp(&newest) {
            std::cmp::Ordering::Less => 0.0,
            std::cmp::Ordering::Greater => 1.0,
            std::cmp::Ordering::Equal if step == 1 || fade_in_batches == 0 => 1.0,
            std::cmp::Ordering::Equal => {
                (batch_in_step as f64 / fade_in_batches as f64).clamp(0.0, 1.0)
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small(arch: Architecture) -> MfcVae {
        let cfg = ModelConfig {
            input_dim: 12,
            z_dims: vec![2, 3],
            clusters: vec![3, 4],
            widths: vec![8, 6],
            architecture: arch,
            likelihood: LikelihoodModel::Bernoulli,
            cov_mode: CovMode::Full,
            pi_trainable: true,
            fade_in_batches: 10,
            activation: Activation::Relu,
        };
        let mut m = MfcVae::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (_, t) in m.named_tensors_mut() {
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
        m
    }

    #[test]
    fn zero_temperature_generation_decodes_the_component_mean() {
        let mut cfg = small(Architecture::Ladder).config().clone();
        cfg.z_dims = vec![2];
        cfg.clusters = vec![1];
        cfg.widths = vec![8];
        let mut m = MfcVae::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (_, t) in m.named_tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
        let out = m.generate(0, 0, 1, 0.0, &mut rng).unwrap();
        let mu = m.priors[0].means.clone();
        assert_eq!(out, m.decode_values(&[mu], &[1.0]).unwrap());
        assert!(m.generate(0, 1, 1, 0.0, &mut rng).is_err());
        assert!(m.generate(1, 0, 1, 0.0, &mut rng).is_err());
    }

    fn batch(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
        Tensor::matrix(n, 12, (0..n * 12).map(|_| rng.random::<f64>()).collect())
    }

    #[test]
    fn fade_in_examples() {
        assert_eq!(
            fade_in_coefficient(15000, 2, 7500, 2).unwrap(),
            vec![0.5, 1.0]
        );
        assert_eq!(
            fade_in_coefficient(15000, 3, 0, 1).unwrap(),
            vec![0.0, 0.0, 1.0]
        );
        assert_eq!(
            fade_in_coefficient(15000, 3, 99_999, 1).unwrap(),
            vec![0.0, 0.0, 1.0]
        );
        assert_eq!(
            fade_in_coefficient(100, 3, 250, 3).unwrap(),
            vec![1.0, 1.0, 1.0]
        );
        assert_eq!(
            fade_in_coefficient(100, 3, 25, 2).unwrap(),
            vec![0.0, 0.25, 1.0]
        );
        assert!(fade_in_coefficient(100, 2, 0, 3).is_err());
    }

    #[test]
    fn encode_shapes_and_normalisation() {
        for arch in [Architecture::Ladder, Architecture::Shared] {
            let m = small(arch);
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let x = batch(&mut rng, 4);
            let tape = Tape::new();
            let vars = m.register(&tape).unwrap();
            let xv = tape.constant(x).unwrap();
            let b = m.encode(&vars, xv, Noise::Sample(&mut rng)).unwrap();
            assert_eq!(b.facets[0].mean.shape(), vec![4, 2]);
            assert_eq!(b.facets[1].log_q_c.shape(), vec![4, 4]);
            let q = b.facets[1].log_q_c.value();
            for i in 0..4 {
                let s: f64 = q.row(i).iter().map(|v| v.exp()).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
            assert!(m
                .encode(
                    &vars,
                    tape.constant(Tensor::zeros(&[2, 5])).unwrap(),
                    Noise::Mean
                )
                .is_err());
        }
    }

    #[test]
    fn masked_facet_does_not_reach_output() {
        for arch in [Architecture::Ladder, Architecture::Shared] {
            let m = small(arch);
            let z1 = Tensor::matrix(2, 2, vec![0.1, 0.2, 0.3, 0.4]);
            let z2a = Tensor::matrix(2, 3, vec![0.0; 6]);
            let z2b = Tensor::matrix(2, 3, vec![5.0, -3.0, 1.0, 2.0, 2.0, 2.0]);
            let a = m.decode_values(&[z1.clone(), z2a], &[1.0, 0.0]).unwrap();
            let b = m.decode_values(&[z1, z2b], &[1.0, 0.0]).unwrap();
            assert_eq!(a, b);
            assert!(a.data().iter().all(|v| *v > 0.0 && *v < 1.0));
        }
    }

    #[test]
    fn swap_identities() {
        let m = small(Architecture::Ladder);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = batch(&mut rng, 2);
        let (a, b) = m.swap_reconstruct(x.row(0), x.row(0), 1).unwrap();
        assert_eq!(a, b);
        let plain = m.reconstruct(&x.select_rows(&[0])).unwrap();
        for (p, q) in plain.data().iter().zip(&a) {
            assert!((p - q).abs() < 1e-12);
        }
        let s0 = m.swap_reconstruct(x.row(0), x.row(1), 0).unwrap();
        let s1 = m.swap_reconstruct(x.row(0), x.row(1), 1).unwrap();
        assert_eq!(s0.0, s1.1);
        assert_eq!(s0.1, s1.0);
    }

    #[test]
    fn assignment_matches_mean_mode_encode() {
        let m = small(Architecture::Ladder);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = batch(&mut rng, 5);
        let labels = m.cluster_assign(&x).unwrap();
        let tape = Tape::new();
        let vars = m.register(&tape).unwrap();
        let b = m
            .encode(&vars, tape.constant(x).unwrap(), Noise::Mean)
            .unwrap();
        for j in 0..2 {
            assert_eq!(labels[j], argmax_rows(&b.facets[j].log_q_c.value()));
        }
        assert_eq!(
            argmax_rows(&Tensor::matrix(1, 3, vec![0.2, 0.2, 0.2])),
            vec![0]
        );
    }

    #[test]
    fn backbone_appears_once() {
        let m = small(Architecture::Ladder);
        let names: Vec<String> = m.named_tensors().into_iter().map(|(n, _)| n).collect();
        assert_eq!(
            names
                .iter()
                .filter(|n| n.starts_with("enc.backbone.0"))
                .count(),
            2
        );
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        assert!(m
            .facet_tensor_names(1)
            .contains(&"dec.rung.1.w".to_string()));
    }

    #[test]
    fn config_round_trip() {
        let mut cfg = ModelConfig::mnist();
        cfg.likelihood = LikelihoodModel::Gaussian { sigma: 0.1 };
        assert_eq!(ModelConfig::from_pairs(&cfg.to_pairs()).unwrap(), cfg);
    }
}
