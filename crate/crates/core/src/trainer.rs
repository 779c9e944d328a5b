//! Initialisation, the training loop, metrics and seed sweeps.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Var};
use crate::checkpoint;
use crate::data::Dataset;
use crate::elbo::{loss_primary, LossBreakdown};
use crate::error::{Error, Result};
use crate::eval::{majority_accuracy, mean_std};
use crate::model::{fade_in_coefficient, MfcVae, ModelConfig, ModelVars, Noise, ParamKind};
use crate::optim::Adam;
use crate::prior::{em_fit, EmConfig, FacetPrior};
use crate::tensor::Tensor;

/// Covariance diagonal assigned to every prior component after the EM fit.
pub const PRIOR_INIT_VARIANCE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub progressive: bool,
    /// Epochs per progressive step; 0 splits the epochs evenly.
    pub epochs_per_step: usize,
    /// Write a metrics row every this many batches (0: once per epoch).
    pub log_every: usize,
    /// Write a checkpoint every this many epochs (0: final only).
    pub checkpoint_every: usize,
    pub prior_init: PriorInit,
}

/// Which latents the initial mixture fit sees.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PriorInit {
    /// One reparameterised sample per image.
    #[default]
    Sampled,
    /// The posterior mean per image. Untrained encoders emit variances near
    /// one, which swamp the spread of the means, so sampled fits can leave
    /// components far from every latent.
    Mean,
}

impl std::str::FromStr for PriorInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sampled" => Ok(Self::Sampled),
            "mean" => Ok(Self::Mean),
            other => Err(Error::Config(format!(
                "unknown prior_init '{other}' (expected sampled or mean)"
            ))),
        }
    }
}

impl std::fmt::Display for PriorInit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sampled => "sampled",
            Self::Mean => "mean",
        })
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch_size must be at least 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Independent random streams derived from one seed.
pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

const STREAM_INIT: u64 = 1;
const STREAM_PRIOR: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;
const STREAM_NOISE: u64 = 4;

/// Glorot-normal weights, zero biases. Priors are left alone.
pub fn init_parameters(model: &mut MfcVae, rng: &mut dyn RngCore) {
    for p in model.net_params_mut() {
        match p.kind {
            ParamKind::Bias => p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0),
            ParamKind::Weight => {
                let (fan_in, fan_out) = (p.tensor.shape()[0], p.tensor.shape()[1]);
                let sd = (2.0 / (fan_in + fan_out) as f64).sqrt();
                p.tensor
                    .data_mut()
                    .iter_mut()
                    .for_each(|v| *v = sd * rng.sample::<f64, _>(StandardNormal));
            }
        }
    }
}

/// Samples one latent per example and facet from the current encoder.
pub fn sample_latents(
    model: &MfcVae,
    images: &Tensor,
    rng: &mut dyn RngCore,
) -> Result<Vec<Tensor>> {
    let post = model.posterior(images)?;
    Ok(post
        .means
        .iter()
        .zip(&post.log_vars)
        .map(|(m, lv)| {
            let mut z = m.clone();
            for (zi, l) in z.data_mut().iter_mut().zip(lv.data()) {
                *zi += (0.5 * l).exp() * rng.sample::<f64, _>(StandardNormal);
            }
            z
        })
        .collect())
}

/// Fits each facet's mixture to encoder latents of `images` by EM, keeps the
/// fitted means, then resets covariances to `0.01 I` and weights to uniform.
/// If EM fails the means are seeded from random latents instead.
pub fn init_prior(
    model: &mut MfcVae,
    images: &Tensor,
    em: &EmConfig,
    mode: PriorInit,
    rng: &mut dyn RngCore,
) -> Result<()> {
    let latents = match mode {
        PriorInit::Sampled => sample_latents(model, images, rng)?,
        PriorInit::Mean => model.posterior(images)?.means,
    };
    for (j, z) in latents.iter().enumerate() {
        let k = model.priors[j].num_clusters();
        let means = match em_fit(z, k, em, rng) {
            Ok(fit) => fit.prior.means,
            Err(e) => {
                log::warn!("EM failed for facet {j} ({e}); seeding means from latent samples");
                if z.rows() == 0 {
                    return Err(e);
                }
                let idx: Vec<usize> = (0..k).map(|_| rng.random_range(0..z.rows())).collect();
                z.select_rows(&idx)
            }
        };
        let prior: &mut FacetPrior = &mut model.priors[j];
        prior.means = means;
        prior.set_isotropic_covariance(PRIOR_INIT_VARIANCE)?;
        prior.set_uniform_weights();
    }
    Ok(())
}

/// Builds a model and runs both initialisation stages from `seed`, fitting
/// the prior to sampled latents.
pub fn build_model(config: ModelConfig, train_images: &Tensor, seed: u64) -> Result<MfcVae> {
    build_model_with(config, train_images, seed, PriorInit::Sampled)
}

pub fn build_model_with(
    config: ModelConfig,
    train_images: &Tensor,
    seed: u64,
    prior_init: PriorInit,
) -> Result<MfcVae> {
    let mut model = MfcVae::new(config)?;
    init_parameters(&mut model, &mut stream(seed, STREAM_INIT));
    init_prior(
        &mut model,
        train_images,
        &EmConfig::default(),
        prior_init,
        &mut stream(seed, STREAM_PRIOR),
    )?;
    Ok(model)
}

/// Which progressive step (1-based) a given epoch belongs to.
pub fn progressive_step(epoch: usize, num_facets: usize, cfg: &TrainConfig) -> usize {
    if !cfg.progressive {
        return num_facets;
    }
    let per_step = if cfg.epochs_per_step > 0 {
        cfg.epochs_per_step
    } else {
        (cfg.epochs / num_facets).max(1)
    };
    (epoch / per_step + 1).min(num_facets)
}

/// What happened in one optimiser step.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchEvent {
    pub epoch: usize,
    /// Batches completed before this one, across all epochs.
    pub global_batch: usize,
    pub step: usize,
    pub batch_in_step: usize,
    pub alphas: Vec<f64>,
    pub loss: LossBreakdown,
}

/// Stateful optimiser loop: Adam moments, random streams and schedule position.
pub struct Trainer {
    pub cfg: TrainConfig,
    adam: Adam,
    shuffle_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    global_batch: usize,
    step: usize,
    step_start: usize,
}

fn all_vars<'t>(vars: &ModelVars<'t>) -> Vec<Var<'t>> {
    let mut out = vars.net.clone();
    for p in &vars.priors {
        out.push(p.means);
        out.push(p.chol_diag_raw);
        out.extend(p.chol_lower);
        out.push(p.pi_logits);
    }
    out
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let seed = cfg.seed;
        Ok(Self {
            adam: Adam::new(cfg.learning_rate),
            cfg,
            shuffle_rng: stream(seed, STREAM_SHUFFLE),
            noise_rng: stream(seed, STREAM_NOISE),
            global_batch: 0,
            step: 0,
            step_start: 0,
        })
    }

    pub fn global_batch(&self) -> usize {
        self.global_batch
    }

    /// One Adam step on the five-term loss for batch `x`.
    pub fn train_batch(
        &mut self,
        model: &mut MfcVae,
        x: &Tensor,
        alphas: &[f64],
    ) -> Result<LossBreakdown> {
        let batch = self.global_batch;
        let mask = model.trainable_mask();
        let (loss, grads) = {
            let tape = Tape::new();
            let vars = model.register(&tape)?;
            let xv = tape.constant(x.clone())?;
            let bundle = model.encode(&vars, xv, Noise::Sample(&mut self.noise_rng))?;
            let zs: Vec<Var<'_>> = bundle.facets.iter().map(|f| f.z).collect();
            let out = model.decode(&vars, &zs, alphas)?;
            let terms = loss_primary(xv, &bundle, &model.config().likelihood, &out, alphas)
                .map_err(|e| match e {
                    Error::NonFinite { term, .. } => Error::NonFinite { term, batch },
                    other => other,
                })?;
            let g = tape.backward(terms.total)?;
            let grads: Vec<Option<Tensor>> = all_vars(&vars)
                .iter()
                .zip(&mask)
                .map(|(v, &train)| train.then(|| g.get_or_zeros(*v)))
                .collect();
            (terms.breakdown(), grads)
        };
        if grads.iter().flatten().any(|g| !g.all_finite()) {
            return Err(Error::NonFinite {
                term: "gradient".into(),
                batch,
            });
        }
        let mut params: Vec<&mut Tensor> = model
            .named_tensors_mut()
            .into_iter()
            .map(|(_, t)| t)
            .collect();
        self.adam.step_masked(&mut params, &grads)?;
        self.global_batch += 1;
        Ok(loss)
    }

    /// One shuffled pass over `data`, calling `on_batch` after every step.
    pub fn run_epoch(
        &mut self,
        model: &mut MfcVae,
        data: &Tensor,
        epoch: usize,
        mut on_batch: impl FnMut(&BatchEvent, &MfcVae) -> Result<()>,
    ) -> Result<Vec<BatchEvent>> {
        let j = model.num_facets();
        let step = progressive_step(epoch, j, &self.cfg);
        if step != self.step {
            self.step = step;
            self.step_start = self.global_batch;
        }
        let mut order: Vec<usize> = (0..data.rows()).collect();
        order.shuffle(&mut self.shuffle_rng);
        let mut events = Vec::new();
        for chunk in order.chunks(self.cfg.batch_size) {
            let batch_in_step = self.global_batch - self.step_start;
            let alphas = if self.cfg.progressive {
                fade_in_coefficient(model.config().fade_in_batches, j, batch_in_step, step)?
            } else {
                vec![1.0; j]
            };
            let global_batch = self.global_batch;
            let loss = self
                .train_batch(model, &data.select_rows(chunk), &alphas)
                .inspect_err(|e| {
                    log::error!("training aborted at epoch {epoch}, batch {global_batch}: {e}");
                })?;
            let event = BatchEvent {
                epoch,
                global_batch,
                step,
                batch_in_step,
                alphas,
                loss,
            };
            on_batch(&event, model)?;
            events.push(event);
        }
        Ok(events)
    }
}

/// One line of the metrics CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub batch: usize,
    pub loss: LossBreakdown,
    pub train_acc: Vec<Option<f64>>,
    pub test_acc: Vec<Option<f64>>,
}

/// Renders rows as CSV. Test-accuracy columns appear when `with_test` is set.
pub fn metrics_csv(rows: &[MetricsRow], num_facets: usize, with_test: bool) -> String {
    let mut out = String::from("epoch,batch,recon,z_prior,c_prior,z_entropy,c_entropy,total");
    for j in 0..num_facets {
        let _ = write!(out, ",acc_facet_{j}");
    }
    if with_test {
        for j in 0..num_facets {
            let _ = write!(out, ",test_acc_facet_{j}");
        }
    }
    out.push('\n');
    let cell = |v: &Option<f64>| v.map(|a| format!("{a}")).unwrap_or_default();
    for r in rows {
        let l = &r.loss;
        let _ = write!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.epoch, r.batch, l.recon, l.z_prior, l.c_prior, l.z_entropy, l.c_entropy, l.total
        );
        for a in &r.train_acc {
            let _ = write!(out, ",{}", cell(a));
        }
        if with_test {
            for a in &r.test_acc {
                let _ = write!(out, ",{}", cell(a));
            }
        }
        out.push('\n');
    }
    out
}

/// Majority accuracy of every facet against its assigned label column.
pub fn facet_accuracies(
    model: &MfcVae,
    data: &Dataset,
    facet_labels: &[Option<String>],
) -> Result<Vec<Option<f64>>> {
    if facet_labels.iter().all(Option::is_none) {
        return Ok(vec![None; model.num_facets()]);
    }
    let assign = model.cluster_assign(&data.images)?;
    assign
        .iter()
        .enumerate()
        .map(
            |(j, pred)| match facet_labels.get(j).and_then(|n| n.as_deref()) {
                None => Ok(None),
                Some(name) => {
                    let col = data
                        .label(name)
                        .ok_or_else(|| Error::Config(format!("no label column '{name}'")))?;
                    majority_accuracy(pred, &col.values).map(Some)
                }
            },
        )
        .collect()
}

fn mean_breakdown(events: &[BatchEvent]) -> LossBreakdown {
    let n = events.len().max(1) as f64;
    let mut m = LossBreakdown::default();
    for e in events {
        m.recon += e.loss.recon / n;
        m.z_prior += e.loss.z_prior / n;
        m.c_prior += e.loss.c_prior / n;
        m.z_entropy += e.loss.z_entropy / n;
        m.c_entropy += e.loss.c_entropy / n;
        m.total += e.loss.total / n;
    }
    m
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub rows: Vec<MetricsRow>,
    pub final_train_acc: Vec<Option<f64>>,
    pub final_test_acc: Vec<Option<f64>>,
    pub final_alphas: Vec<f64>,
}

/// Full training run. With `out_dir`, writes `metrics.csv`, periodic
/// `checkpoint_epoch_N.mfcv` files and the final `model.mfcv`.
pub fn train(
    model: &mut MfcVae,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    cfg: &TrainConfig,
    facet_labels: &[Option<String>],
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(cfg.clone())?;
    let j = model.num_facets();
    if train_set.dim() != model.config().input_dim {
        return Err(Error::InvalidInput(format!(
            "dataset has {} pixels per image, model expects {}",
            train_set.dim(),
            model.config().input_dim
        )));
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let mut rows = Vec::new();
    let mut final_alphas = vec![1.0; j];
    let mut last = (vec![None; j], vec![None; j]);
    for epoch in 0..cfg.epochs {
        let events = trainer.run_epoch(model, &train_set.images, epoch, |_, _| Ok(()))?;
        if cfg.log_every > 0 {
            for chunk in events.chunks(cfg.log_every) {
                let end = chunk.last().expect("non-empty chunk");
                rows.push(MetricsRow {
                    epoch,
                    batch: end.global_batch + 1,
                    loss: mean_breakdown(chunk),
                    train_acc: vec![None; j],
                    test_acc: vec![None; j],
                });
            }
        }
        let train_acc = facet_accuracies(model, train_set, facet_labels)?;
        let test_acc = match test_set {
            Some(t) => facet_accuracies(model, t, facet_labels)?,
            None => vec![None; j],
        };
        rows.push(MetricsRow {
            epoch,
            batch: trainer.global_batch(),
            loss: mean_breakdown(&events),
            train_acc: train_acc.clone(),
            test_acc: test_acc.clone(),
        });
        if let Some(e) = events.last() {
            final_alphas = e.alphas.clone();
        }
        log::info!(
            "epoch {epoch}: loss {:.4} acc {:?}",
            mean_breakdown(&events).total,
            train_acc
                .iter()
                .map(|a| a.unwrap_or(f64::NAN))
                .collect::<Vec<_>>()
        );
        if let (Some(dir), true) = (
            out_dir,
            cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every.max(1) == 0,
        ) {
            checkpoint::save(
                model,
                &dir.join(format!("checkpoint_epoch_{}.mfcv", epoch + 1)),
            )?;
        }
        last = (train_acc, test_acc);
    }
    if let Some(dir) = out_dir {
        fs::write(
            dir.join("metrics.csv"),
            metrics_csv(&rows, j, test_set.is_some()),
        )?;
        checkpoint::save(model, &dir.join("model.mfcv"))?;
    }
    Ok(TrainOutcome {
        rows,
        final_train_acc: last.0,
        final_test_acc: last.1,
        final_alphas,
    })
}

/// Per-seed accuracy curves from [`stability_sweep`].
#[derive(Clone, Debug)]
pub struct SweepRun {
    pub seed: u64,
    /// Per epoch, per facet training accuracy; `None` if the run aborted.
    pub curve: Option<Vec<Vec<f64>>>,
    pub error: Option<String>,
}

#[derive(Clone, Debug)]
pub struct SweepReport {
    pub runs: Vec<SweepRun>,
}

impl SweepReport {
    /// Final per-facet accuracies of the runs that completed.
    pub fn finals(&self) -> Vec<Vec<f64>> {
        self.runs
            .iter()
            .filter_map(|r| r.curve.as_ref().and_then(|c| c.last().cloned()))
            .collect()
    }

    /// `seed,epoch,acc_facet_0,...` for every completed run.
    pub fn curves_csv(&self, num_facets: usize) -> String {
        let mut out = String::from("seed,epoch");
        for j in 0..num_facets {
            let _ = write!(out, ",acc_facet_{j}");
        }
        out.push('\n');
        for r in &self.runs {
            for (e, accs) in r.curve.iter().flatten().enumerate() {
                let _ = write!(out, "{},{}", r.seed, e);
                for a in accs {
                    let _ = write!(out, ",{a}");
                }
                out.push('\n');
            }
        }
        out
    }

    /// Per-epoch mean and sample std over completed runs.
    pub fn summary_csv(&self, num_facets: usize) -> String {
        let mut out = String::from("epoch,completed");
        for j in 0..num_facets {
            let _ = write!(out, ",mean_acc_facet_{j},std_acc_facet_{j}");
        }
        out.push('\n');
        let curves: Vec<&Vec<Vec<f64>>> =
            self.runs.iter().filter_map(|r| r.curve.as_ref()).collect();
        let epochs = curves.iter().map(|c| c.len()).min().unwrap_or(0);
        for e in 0..epochs {
            let _ = write!(out, "{e},{}", curves.len());
            for j in 0..num_facets {
                let vals: Vec<f64> = curves.iter().map(|c| c[e][j]).collect();
                let (m, s) = mean_std(&vals);
                let _ = write!(out, ",{m},{s}");
            }
            out.push('\n');
        }
        out
    }
}

/// Trains one model per seed and collects training-accuracy curves. Runs that
/// abort are kept with their error so the aggregate covers completers only.
pub fn stability_sweep(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    train_set: &Dataset,
    facet_labels: &[Option<String>],
    seeds: &[u64],
) -> Result<SweepReport> {
    if seeds.len() < 2 {
        return Err(Error::InvalidInput(
            "a sweep needs at least two seeds".into(),
        ));
    }
    if facet_labels.len() != model_cfg.num_facets() || facet_labels.iter().any(Option::is_none) {
        return Err(Error::Config(
            "every facet needs a label column for a sweep".into(),
        ));
    }
    let mut runs = Vec::new();
    for &seed in seeds {
        let cfg = TrainConfig {
            seed,
            ..train_cfg.clone()
        };
        let result = build_model_with(model_cfg.clone(), &train_set.images, seed, cfg.prior_init)
            .and_then(|mut m| train(&mut m, train_set, None, &cfg, facet_labels, None));
        runs.push(match result {
            Ok(outcome) => SweepRun {
                seed,
                curve: Some(
                    outcome
                        .rows
                        .iter()
                        .filter(|r| r.train_acc.iter().all(Option::is_some))
                        .map(|r| r.train_acc.iter().map(|a| a.expect("checked")).collect())
                        .collect(),
                ),
                error: None,
            },
            Err(e) => {
                log::warn!("seed {seed} aborted: {e}");
                SweepRun {
                    seed,
                    curve: None,
                    error: Some(e.to_string()),
                }
            }
        });
    }
    Ok(SweepReport { runs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthFactorSpec};
    use crate::distributions::LikelihoodModel;
    use crate::model::{Activation, Architecture};
    use crate::prior::CovMode;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            input_dim: 64,
            z_dims: vec![2, 2],
            clusters: vec![3, 2],
            widths: vec![16, 8],
            architecture: Architecture::Ladder,
            likelihood: LikelihoodModel::Bernoulli,
            cov_mode: CovMode::Diag,
            pi_trainable: false,
            fade_in_batches: 3,
            activation: Activation::Relu,
        }
    }

    fn tiny_data() -> Dataset {
        let spec = SynthFactorSpec {
            factors: vec![("shape".into(), 2), ("intensity".into(), 2)],
            image_side: 8,
            noise_sigma: 0.05,
            samples_per_combo: 16,
        };
        synth_generate(&spec, &mut ChaCha8Rng::seed_from_u64(7)).unwrap()
    }

    #[test]
    fn glorot_statistics() {
        let mut cfg = tiny_cfg();
        cfg.input_dim = 784;
        cfg.widths = vec![500, 8];
        let mut m = MfcVae::new(cfg).unwrap();
        init_parameters(&mut m, &mut ChaCha8Rng::seed_from_u64(0));
        let w = &m.net_params()[0];
        assert_eq!(w.tensor.shape(), &[784, 500]);
        let n = w.tensor.len() as f64;
        let var = w.tensor.data().iter().map(|v| v * v).sum::<f64>() / n;
        let target = (2.0f64 / 1284.0).sqrt();
        assert!((var.sqrt() / target - 1.0).abs() < 0.1);
        assert!(m.net_params()[1].tensor.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn prior_init_resets_covariance_and_weights() {
        let data = tiny_data();
        let m = build_model(tiny_cfg(), &data.images, 3).unwrap();
        for p in &m.priors {
            for c in 0..p.num_clusters() {
                let s = p.covariance(c);
                for i in 0..p.dim() {
                    assert!((s[i * p.dim() + i] - 0.01).abs() < 1e-15);
                }
            }
            let k = p.num_clusters() as f64;
            assert!(p.log_pi().iter().all(|v| (v.exp() - 1.0 / k).abs() < 1e-15));
        }
    }

    #[test]
    fn progressive_steps_and_frozen_pi() {
        let data = tiny_data();
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 7,
            progressive: true,
            epochs_per_step: 0,
            log_every: 0,
            checkpoint_every: 0,
            prior_init: PriorInit::Sampled,
        };
        assert_eq!(
            (0..4)
                .map(|e| progressive_step(e, 2, &cfg))
                .collect::<Vec<_>>(),
            vec![1, 1, 2, 2]
        );
        let mut m = build_model(tiny_cfg(), &data.images, 7).unwrap();
        let pi_before = m.priors[0].pi_logits.clone();
        let out = train(
            &mut m,
            &data,
            None,
            &cfg,
            &[Some("intensity".into()), Some("shape".into())],
            None,
        )
        .unwrap();
        assert_eq!(out.rows.len(), 4);
        assert_eq!(out.final_alphas, vec![1.0, 1.0]);
        assert_eq!(m.priors[0].pi_logits, pi_before);
        assert!(out.rows.iter().all(|r| r.loss.total.is_finite()));
    }

    #[test]
    fn csv_header() {
        let csv = metrics_csv(&[], 2, false);
        assert_eq!(
            csv,
            "epoch,batch,recon,z_prior,c_prior,z_entropy,c_entropy,total,acc_facet_0,acc_facet_1\n"
        );
    }
}
