use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mfcvae::checkpoint;
use mfcvae::config::RunConfig;
use mfcvae::data::Dataset;
use mfcvae::eval::{
    concat_columns, hungarian_accuracy, majority_accuracy, mean_std, probe_disentanglement,
    ProbeConfig,
};
use mfcvae::image::write_pgm_grid;
use mfcvae::model::MfcVae;
use mfcvae::trainer::{build_model_with, stability_sweep, stream, train};
use mfcvae::verify::{run_suite, VerifyOptions};
use mfcvae::Error;

const BUILD_ID: &str = env!("MFCVAE_BUILD_ID");
const GENERATE_STREAM: u64 = 5;

#[derive(Parser)]
#[command(name = "mfcvae", version, about = "Multi-facet clustering variational autoencoder")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration file (flat key = value lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Seed override, applied after --set.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory override, applied after --set.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics, checkpoints and a manifest.
    Train,
    /// Cluster accuracies and latent probes of a checkpoint on the configured dataset.
    Eval {
        /// Defaults to `<out_dir>/model.mfcv`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Sample images with one facet pinned to a cluster.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Facet index, 0 = shallowest.
        #[arg(long)]
        facet: usize,
        #[arg(long)]
        cluster: usize,
        /// Number of images, tiled in one row.
        #[arg(long, default_value_t = 10)]
        n: usize,
        /// Scales every prior covariance used for sampling.
        #[arg(long, default_value_t = 0.3)]
        temperature: f64,
        /// PGM path; defaults to `generate_facet<j>_cluster<c>.pgm` under --out.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Exchange one facet's representation between two test images.
    Swap {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Index into the test split rebuilt from --config.
        #[arg(long)]
        idx1: usize,
        #[arg(long)]
        idx2: usize,
        #[arg(long)]
        facet: usize,
        /// PGM path for the tiles `[x1, x2, swapped 1, swapped 2]`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run the oracle checks on the optimal posteriors and loss estimators.
    Verify {
        /// Debug hook: shift every optimal log-probability by this amount.
        #[arg(long, hide = true, default_value_t = 0.0)]
        perturb: f64,
    },
    /// Train one model per seed and report accuracy curves.
    Sweep {
        /// Comma-separated seeds; defaults to 0..10.
        #[arg(long)]
        seeds: Option<String>,
    },
}

/// Failure with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

fn setup(e: Error) -> Failure {
    Failure { code: 2, message: e.to_string() }
}

fn runtime(e: Error) -> Failure {
    Failure { code: 3, message: e.to_string() }
}

fn io(e: std::io::Error) -> Failure {
    runtime(Error::Io(e))
}

fn resolve(common: &Common) -> Result<RunConfig, Failure> {
    let path = common
        .config
        .as_ref()
        .ok_or_else(|| setup(Error::Config("this command needs --config PATH".into())))?;
    let mut overrides = common.set.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(out) = &common.out {
        overrides.push(format!("out_dir={}", out.display()));
    }
    RunConfig::load(path, &overrides).map_err(setup)
}

fn out_dir(cfg: &RunConfig) -> PathBuf {
    PathBuf::from(cfg.get("out_dir"))
}

/// Manifests are valid config files: metadata lines are `#` comments.
fn manifest_text(command: &str, cfg: Option<&RunConfig>, extra: &[(&str, String)]) -> String {
    let mut text = format!("# command={command}\n# build_id={BUILD_ID}\n");
    for (k, v) in extra {
        text.push_str(&format!("# {k}={v}\n"));
    }
    if let Some(cfg) = cfg {
        text.push_str(&cfg.to_text());
    }
    text
}

fn write_manifest(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io)?;
    }
    fs::write(path, text).map_err(io)
}

/// Square tile side for a flattened image, falling back to a single row.
fn tile_shape(dim: usize) -> (usize, usize) {
    let side = (dim as f64).sqrt().round() as usize;
    if side * side == dim {
        (side, side)
    } else {
        (dim, 1)
    }
}

fn fmt_acc(acc: Option<f64>) -> String {
    acc.map_or_else(|| "na".to_string(), |a| format!("{a:.4}"))
}

fn cmd_train(common: &Common) -> Result<(), Failure> {
    let cfg = resolve(common)?;
    let (train_set, test_set) = cfg.datasets().map_err(setup)?;
    let model_cfg = cfg.model_config(train_set.dim()).map_err(setup)?;
    let train_cfg = cfg.train_config().map_err(setup)?;
    let labels = cfg.facet_labels(model_cfg.num_facets()).map_err(setup)?;
    let dir = out_dir(&cfg);
    let manifest = manifest_text("train", Some(&cfg), &[]);
    write_manifest(&dir.join("manifest.txt"), &manifest)?;
    let mut model = build_model_with(model_cfg, &train_set.images, train_cfg.seed, train_cfg.prior_init)
        .map_err(runtime)?;
    let test = (!test_set.is_empty()).then_some(&test_set);
    let outcome = train(&mut model, &train_set, test, &train_cfg, &labels, Some(&dir)).map_err(runtime)?;
    let alphas: Vec<String> = outcome.final_alphas.iter().map(|a| a.to_string()).collect();
    write_manifest(
        &dir.join("manifest.txt"),
        &format!("{manifest}# final_alphas={}\n", alphas.join(",")),
    )?;
    for (j, (tr, te)) in outcome.final_train_acc.iter().zip(&outcome.final_test_acc).enumerate() {
        println!("final_acc_facet_{j}={} test_acc_facet_{j}={}", fmt_acc(*tr), fmt_acc(*te));
    }
    println!("outputs written to {}", dir.display());
    Ok(())
}

fn report_split(model: &MfcVae, data: &Dataset, labels: &[Option<String>], split: &str) -> Result<(), Failure> {
    if data.is_empty() {
        return Ok(());
    }
    let assign = model.cluster_assign(&data.images).map_err(runtime)?;
    for (j, pred) in assign.iter().enumerate() {
        let Some(col) = labels[j].as_deref().and_then(|n| data.label(n)) else {
            continue;
        };
        let majority = majority_accuracy(pred, &col.values).map_err(runtime)?;
        let hungarian = hungarian_accuracy(pred, &col.values).ok();
        println!(
            "{split}_acc_facet_{j}={majority:.4} {split}_hungarian_facet_{j}={} label={}",
            fmt_acc(hungarian),
            col.name
        );
    }
    Ok(())
}

fn cmd_eval(common: &Common, checkpoint_path: Option<PathBuf>) -> Result<(), Failure> {
    let cfg = resolve(common)?;
    let path = checkpoint_path.unwrap_or_else(|| out_dir(&cfg).join("model.mfcv"));
    let model = checkpoint::load(&path).map_err(setup)?;
    let (train_set, test_set) = cfg.datasets().map_err(setup)?;
    let labels = cfg.facet_labels(model.num_facets()).map_err(setup)?;
    report_split(&model, &train_set, &labels, "train")?;
    report_split(&model, &test_set, &labels, "test")?;
    let probe_seeds: u64 = cfg
        .get("probe_seeds")
        .parse()
        .map_err(|_| setup(Error::Config("probe_seeds must be an integer".into())))?;
    report_probe(&model, &train_set, &test_set, probe_seeds)
}

/// Probe accuracy of every label column from each facet's posterior mean and
/// from their concatenation (`zcat`), as mean and sample std over seeds.
fn report_probe(model: &MfcVae, train_set: &Dataset, test_set: &Dataset, seeds: u64) -> Result<(), Failure> {
    if seeds == 0 {
        return Ok(());
    }
    let embed = |d: &Dataset| -> Result<Vec<_>, Failure> {
        let mut z = model.posterior(&d.images).map_err(runtime)?.means;
        z.push(concat_columns(&z).map_err(runtime)?);
        Ok(z)
    };
    let (ztr, zte) = (embed(train_set)?, embed(test_set)?);
    for col in &train_set.labels {
        let Some(test_col) = test_set.label(&col.name) else { continue };
        let runs: Vec<Vec<f64>> = (0..seeds)
            .map(|seed| {
                let cfg = ProbeConfig { seed, ..ProbeConfig::default() };
                probe_disentanglement(&ztr, &col.values, &zte, &test_col.values, &cfg)
            })
            .collect::<Result<_, _>>()
            .map_err(runtime)?;
        for e in 0..ztr.len() {
            let (m, sd) = mean_std(&runs.iter().map(|r| r[e]).collect::<Vec<_>>());
            let which = if e + 1 == ztr.len() { "zcat".to_string() } else { format!("z{e}") };
            println!("probe_{}_{which}={m:.4} std={sd:.4}", col.name);
        }
    }
    Ok(())
}

fn cmd_generate(
    common: &Common,
    checkpoint_path: &Path,
    facet: usize,
    cluster: usize,
    n: usize,
    temperature: f64,
    output: Option<PathBuf>,
) -> Result<(), Failure> {
    let model = checkpoint::load(checkpoint_path).map_err(setup)?;
    if n == 0 || !(temperature >= 0.0) {
        return Err(setup(Error::InvalidInput("need n >= 1 and temperature >= 0".into())));
    }
    let seed = common.seed.unwrap_or(0);
    let images = model
        .generate(facet, cluster, n, temperature, &mut stream(seed, GENERATE_STREAM))
        .map_err(setup)?;
    let output = output.unwrap_or_else(|| {
        common.out.clone().unwrap_or_default().join(format!("generate_facet{facet}_cluster{cluster}.pgm"))
    });
    let (w, h) = tile_shape(model.config().input_dim);
    let tiles: Vec<&[f64]> = (0..n).map(|i| images.row(i)).collect();
    write_manifest(
        &output.with_extension("manifest.txt"),
        &manifest_text(
            "generate",
            None,
            &[
                ("checkpoint", checkpoint_path.display().to_string()),
                ("facet", facet.to_string()),
                ("cluster", cluster.to_string()),
                ("n", n.to_string()),
                ("temperature", temperature.to_string()),
                ("seed", seed.to_string()),
            ],
        ),
    )?;
    write_pgm_grid(&output, &tiles, w, h, n).map_err(runtime)?;
    println!("wrote {}", output.display());
    Ok(())
}

/// Alphas recorded by `train` next to the checkpoint, if any.
fn recorded_alphas(checkpoint_path: &Path) -> Option<Vec<f64>> {
    let manifest = fs::read_to_string(checkpoint_path.parent()?.join("manifest.txt")).ok()?;
    let line = manifest.lines().find_map(|l| l.strip_prefix("# final_alphas="))?;
    line.split(',').map(|v| v.parse().ok()).collect()
}

fn cmd_swap(
    common: &Common,
    checkpoint_path: &Path,
    idx1: usize,
    idx2: usize,
    facet: usize,
    output: Option<PathBuf>,
) -> Result<(), Failure> {
    let cfg = resolve(common)?;
    let model = checkpoint::load(checkpoint_path).map_err(setup)?;
    let (_, test_set) = cfg.datasets().map_err(setup)?;
    if idx1 >= test_set.len() || idx2 >= test_set.len() {
        return Err(setup(Error::InvalidInput(format!(
            "indices must be below the test split size {}",
            test_set.len()
        ))));
    }
    if let Some(alphas) = recorded_alphas(checkpoint_path) {
        if alphas.iter().any(|a| *a < 1.0) {
            log::warn!("checkpoint was saved before every facet was fully faded in: {alphas:?}");
        }
    }
    let (x1, x2) = (test_set.images.row(idx1), test_set.images.row(idx2));
    let (r1, r2) = model.swap_reconstruct(x1, x2, facet).map_err(setup)?;
    let output = output.unwrap_or_else(|| out_dir(&cfg).join(format!("swap_{idx1}_{idx2}_facet{facet}.pgm")));
    write_manifest(
        &output.with_extension("manifest.txt"),
        &manifest_text(
            "swap",
            Some(&cfg),
            &[
                ("checkpoint", checkpoint_path.display().to_string()),
                ("idx1", idx1.to_string()),
                ("idx2", idx2.to_string()),
                ("facet", facet.to_string()),
            ],
        ),
    )?;
    let (w, h) = tile_shape(model.config().input_dim);
    write_pgm_grid(&output, &[x1, x2, &r1, &r2], w, h, 4).map_err(runtime)?;
    println!("wrote {}", output.display());
    Ok(())
}

fn cmd_verify(perturb: f64) -> Result<(), Failure> {
    let results = run_suite(VerifyOptions { q_shift: perturb }).map_err(|e| Failure { code: 1, message: e.to_string() })?;
    for r in &results {
        println!("{r}");
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        println!("all {} checks passed", results.len());
        Ok(())
    } else {
        Err(Failure { code: 1, message: format!("failed checks: {}", failed.join(", ")) })
    }
}

/// Seeds per sweep when `--seeds` is not given.
const DEFAULT_SWEEP_SEEDS: u64 = 10;

fn cmd_sweep(common: &Common, seeds: Option<String>) -> Result<(), Failure> {
    let cfg = resolve(common)?;
    let seeds: Vec<u64> = match seeds {
        Some(list) => list
            .split(',')
            .map(|s| s.trim().parse())
            .collect::<Result<_, _>>()
            .map_err(|_| setup(Error::Config(format!("invalid seed list '{list}'"))))?,
        None => (0..DEFAULT_SWEEP_SEEDS).collect(),
    };
    let (train_set, _) = cfg.datasets().map_err(setup)?;
    let model_cfg = cfg.model_config(train_set.dim()).map_err(setup)?;
    let train_cfg = cfg.train_config().map_err(setup)?;
    let labels = cfg.facet_labels(model_cfg.num_facets()).map_err(setup)?;
    let dir = out_dir(&cfg);
    let seed_text: Vec<String> = seeds.iter().map(u64::to_string).collect();
    write_manifest(&dir.join("manifest.txt"), &manifest_text("sweep", Some(&cfg), &[("seeds", seed_text.join(","))]))?;
    let report = stability_sweep(&model_cfg, &train_cfg, &train_set, &labels, &seeds).map_err(setup)?;
    let j = model_cfg.num_facets();
    fs::write(dir.join("sweep_curves.csv"), report.curves_csv(j)).map_err(io)?;
    fs::write(dir.join("sweep_summary.csv"), report.summary_csv(j)).map_err(io)?;
    for run in &report.runs {
        if let Some(e) = &run.error {
            println!("seed {} aborted: {e}", run.seed);
        }
    }
    let finals = report.finals();
    for f in 0..j {
        let vals: Vec<f64> = finals.iter().map(|r| r[f]).collect();
        let (m, s) = mfcvae::eval::mean_std(&vals);
        println!("final_acc_facet_{f}_mean={m:.4} final_acc_facet_{f}_std={s:.4} completed={}", vals.len());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let c = &cli.common;
    let result = match cli.command {
        Command::Train => cmd_train(c),
        Command::Eval { checkpoint } => cmd_eval(c, checkpoint),
        Command::Generate { checkpoint, facet, cluster, n, temperature, output } => {
            cmd_generate(c, &checkpoint, facet, cluster, n, temperature, output)
        }
        Command::Swap { checkpoint, idx1, idx2, facet, output } => cmd_swap(c, &checkpoint, idx1, idx2, facet, output),
        Command::Verify { perturb } => cmd_verify(perturb),
        Command::Sweep { seeds } => cmd_sweep(c, seeds),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
