//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Criteria 1-6, 10 and 11 are exact or numerical checks and fail the target
//! when they fail. Criteria 7-9 are training outcomes: their lines are printed
//! either way and the process exit code ignores them, so a failing experiment
//! stays visible without breaking `cargo test`.
//!
//! `MFC_DATA_DIR` points at the MNIST IDX files for criterion 9; without it
//! `/root/data/mnist` is tried, and the criterion reports FAIL if neither
//! exists. `MFC_ACCEPT_QUICK=1` skips criteria 7-9 and 11.

use std::path::PathBuf;
use std::time::Instant;

use mfcvae::data::{load_idx, split, synth_generate, Dataset, SynthFactorSpec};
use mfcvae::distributions::LikelihoodModel;
use mfcvae::eval::{majority_accuracy, mean_std, probe_accuracy, ProbeConfig};
use mfcvae::model::{Activation, Architecture, MfcVae, ModelConfig};
use mfcvae::prior::CovMode;
use mfcvae::tensor::Tensor;
use mfcvae::trainer::{
    build_model, build_model_with, metrics_csv, stability_sweep, stream, train, PriorInit,
    TrainConfig, Trainer,
};
use mfcvae::verify::{
    estimator_checks, gradient_check, responsibility_gap_checks, optimality_checks,
    joint_posterior_checks, CheckResult, VerifyOptions,
};

struct Report {
    hard_failures: Vec<String>,
}

impl Report {
    fn line(&mut self, id: u32, name: &str, passed: bool, hard: bool, detail: String) {
        let tag = if passed { "PASS" } else { "FAIL" };
        println!("{tag} criterion_{id} {name}: {detail}");
        if !passed && hard {
            self.hard_failures.push(format!("criterion_{id} {name}"));
        }
    }

    fn checks(&mut self, id: u32, name: &str, checks: &[CheckResult], extra: &str) {
        let passed = checks.iter().all(|c| c.passed);
        let detail = checks
            .iter()
            .map(|c| {
                let op = if c.must_exceed { ">" } else { "<" };
                format!("{}={:.3e} ({op}{:.0e})", c.name, c.residual, c.threshold)
            })
            .collect::<Vec<_>>()
            .join(" ");
        self.line(id, name, passed, true, format!("{detail}{extra}"));
    }
}

fn synthetic_model(arch: Architecture) -> ModelConfig {
    ModelConfig {
        input_dim: 256,
        z_dims: vec![2, 2],
        clusters: vec![8, 6],
        widths: vec![64, 32],
        architecture: arch,
        likelihood: LikelihoodModel::Bernoulli,
        cov_mode: CovMode::Diag,
        pi_trainable: true,
        fade_in_batches: 500,
        activation: Activation::Relu,
    }
}

fn synthetic_train(seed: u64, progressive: bool) -> TrainConfig {
    TrainConfig {
        epochs: 60,
        batch_size: 32,
        learning_rate: 0.001,
        seed,
        progressive,
        epochs_per_step: 0,
        log_every: 0,
        checkpoint_every: 0,
        prior_init: PriorInit::Sampled,
    }
}

fn synthetic_data() -> Dataset {
    synth_generate(&SynthFactorSpec::shapes_intensities(), &mut stream(0, 0)).unwrap()
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn bits_of(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn criterion_1(r: &mut Report) {
    let t = Instant::now();
    let check = gradient_check(11, 16, &[16, 32], &[3, 3], &[2, 3], 4).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let passed = check.passed && secs < 10.0;
    r.line(
        1,
        "gradient_vs_finite_differences",
        passed,
        true,
        format!("max_rel_err={:.3e} (<1e-5) runtime={secs:.2}s (<10s)", check.residual),
    );
}

fn criterion_6(r: &mut Report) {
    // independent restatement of the schedule for J = 2, fade-in F = 5
    let fade = 5usize;
    let oracle = |step: usize, b: usize| -> [f64; 2] {
        match step {
            1 => [0.0, 1.0],
            _ => [(b as f64 / fade as f64).min(1.0), 1.0],
        }
    };
    let spec = SynthFactorSpec {
        samples_per_combo: 8,
        ..SynthFactorSpec::shapes_intensities()
    };
    let data = synth_generate(&spec, &mut stream(1, 0)).unwrap();
    let cfg = ModelConfig {
        widths: vec![16, 8],
        clusters: vec![3, 2],
        fade_in_batches: fade,
        ..synthetic_model(Architecture::Ladder)
    };
    let tc = TrainConfig {
        epochs: 4,
        batch_size: 16,
        ..synthetic_train(5, true)
    };
    let mut model = build_model(cfg, &data.images, 5).unwrap();
    let facet0 = model.facet_tensor_names(0);
    let snapshot = |m: &MfcVae| -> Vec<Vec<u64>> {
        m.named_tensors()
            .into_iter()
            .filter(|(n, _)| facet0.contains(n))
            .map(|(_, t)| bits(t))
            .collect()
    };
    let mut trainer = Trainer::new(tc.clone()).unwrap();
    let mut before = snapshot(&model);
    let (mut batches, mut mismatches, mut frozen_checks, mut frozen_changed) = (0, 0, 0, 0);
    let mut step_start = 0usize;
    let mut current_step = 0usize;
    for epoch in 0..tc.epochs {
        let step = epoch / 2 + 1;
        if step != current_step {
            current_step = step;
            step_start = batches;
        }
        trainer
            .run_epoch(&mut model, &data.images, epoch, |ev, m| {
                let expected = oracle(step, batches - step_start);
                if bits_of(&ev.alphas) != bits_of(&expected) {
                    mismatches += 1;
                }
                let after = snapshot(m);
                if ev.alphas[0] == 0.0 {
                    frozen_checks += 1;
                    if after != before {
                        frozen_changed += 1;
                    }
                }
                before = after;
                batches += 1;
                Ok(())
            })
            .unwrap();
    }
    let passed = mismatches == 0 && frozen_changed == 0 && frozen_checks > 0;
    r.line(
        6,
        "progressive_schedule",
        passed,
        true,
        format!(
            "alpha_mismatches={mismatches}/{batches} frozen_param_changes={frozen_changed}/{frozen_checks}"
        ),
    );
}

struct SeedOutcome {
    seconds: f64,
    /// (shape accuracy, intensity accuracy) under the better facet assignment
    accs: (f64, f64),
    /// own-facet minus cross-facet probe accuracy for (shape, intensity)
    probe_gaps: (f64, f64),
    csv: String,
    model: MfcVae,
}

fn run_synthetic_seed(data: &Dataset, seed: u64) -> SeedOutcome {
    let t = Instant::now();
    let mut model = build_model(synthetic_model(Architecture::Ladder), &data.images, seed).unwrap();
    let labels = vec![Some("intensity".to_string()), Some("shape".to_string())];
    let out = train(&mut model, data, None, &synthetic_train(seed, true), &labels, None).unwrap();
    let seconds = t.elapsed().as_secs_f64();
    let shape = &data.label("shape").unwrap().values;
    let intensity = &data.label("intensity").unwrap().values;
    let assign = model.cluster_assign(&data.images).unwrap();
    let acc = |j: usize, y: &[usize]| majority_accuracy(&assign[j], y).unwrap();
    // facet index holding shape under each of the two assignments
    let candidates = [(1usize, 0usize), (0, 1)];
    let (shape_f, int_f) = *candidates
        .iter()
        .max_by(|a, b| {
            let sa = acc(a.0, shape).min(acc(a.1, intensity));
            let sb = acc(b.0, shape).min(acc(b.1, intensity));
            sa.total_cmp(&sb)
        })
        .unwrap();
    let accs = (acc(shape_f, shape), acc(int_f, intensity));

    let (tr, te) = split(data, 0.8, seed).unwrap();
    let ztr = model.posterior(&tr.images).unwrap().means;
    let zte = model.posterior(&te.images).unwrap().means;
    let probe = |j: usize, name: &str| {
        let ytr = &tr.label(name).unwrap().values;
        let yte = &te.label(name).unwrap().values;
        let cfg = ProbeConfig { seed, ..ProbeConfig::default() };
        probe_accuracy(&ztr[j], ytr, &zte[j], yte, &cfg).unwrap()
    };
    let probe_gaps = (
        probe(shape_f, "shape") - probe(int_f, "shape"),
        probe(int_f, "intensity") - probe(shape_f, "intensity"),
    );
    SeedOutcome {
        seconds,
        accs,
        probe_gaps,
        csv: metrics_csv(&out.rows, 2, false),
        model,
    }
}

fn criterion_7(r: &mut Report, data: &Dataset) -> Vec<SeedOutcome> {
    let runs: Vec<SeedOutcome> = (0..10).map(|s| run_synthetic_seed(data, s)).collect();
    let good = runs.iter().filter(|o| o.accs.0 >= 0.9 && o.accs.1 >= 0.9).count();
    let worst_time = runs.iter().map(|o| o.seconds).fold(0.0, f64::max);
    let per_seed = runs
        .iter()
        .map(|o| format!("{:.2}/{:.2}", o.accs.0, o.accs.1))
        .collect::<Vec<_>>()
        .join(",");
    r.line(
        7,
        "synthetic_recovery",
        good >= 7 && worst_time <= 900.0,
        false,
        format!(
            "seeds_with_shape_and_intensity_ge_0.90={good}/10 (>=7) shape/intensity=[{per_seed}] max_runtime={worst_time:.1}s (<=900s)"
        ),
    );
    let (gs, _) = mean_std(&runs.iter().map(|o| o.probe_gaps.0).collect::<Vec<_>>());
    let (gi, _) = mean_std(&runs.iter().map(|o| o.probe_gaps.1).collect::<Vec<_>>());
    r.line(
        7,
        "synthetic_probe_asymmetry",
        gs >= 0.2 && gi >= 0.2,
        false,
        format!("mean own-minus-cross probe accuracy: shape={gs:.3} intensity={gi:.3} (>=0.20)"),
    );
    runs
}

fn criterion_8(r: &mut Report, data: &Dataset) {
    let labels = vec![Some("intensity".to_string()), Some("shape".to_string())];
    let seeds: Vec<u64> = (0..5).collect();
    let spread = |arch: Architecture, progressive: bool| -> f64 {
        let report = stability_sweep(
            &synthetic_model(arch),
            &synthetic_train(0, progressive),
            data,
            &labels,
            &seeds,
        )
        .unwrap();
        let finals = report.finals();
        let stds: Vec<f64> = (0..2)
            .map(|j| mean_std(&finals.iter().map(|f| f[j]).collect::<Vec<_>>()).1)
            .collect();
        stds.iter().sum::<f64>() / stds.len() as f64
    };
    let ladder = spread(Architecture::Ladder, true);
    let shared = spread(Architecture::Shared, false);
    r.line(
        8,
        "stability_ladder_vs_shared",
        ladder < shared,
        false,
        format!("mean per-facet final-accuracy std: ladder+progressive={ladder:.4} shared={shared:.4}"),
    );
}

fn mnist_dir() -> Option<PathBuf> {
    std::env::var_os("MFC_DATA_DIR")
        .map(PathBuf::from)
        .into_iter()
        .chain([PathBuf::from("/root/data/mnist")])
        .find(|d| d.join("train-images-idx3-ubyte").exists())
}

fn criterion_9(r: &mut Report) {
    let Some(dir) = mnist_dir() else {
        r.line(9, "mnist_desk_scale", false, false, "MNIST IDX files not found".into());
        return;
    };
    let data = load_idx(
        &dir.join("train-images-idx3-ubyte"),
        Some(&dir.join("train-labels-idx1-ubyte")),
    )
    .unwrap()
    .take(10_000);
    let cfg = ModelConfig {
        input_dim: data.dim(),
        z_dims: vec![10],
        clusters: vec![10],
        widths: vec![500],
        architecture: Architecture::Ladder,
        likelihood: LikelihoodModel::Bernoulli,
        cov_mode: CovMode::Diag,
        pi_trainable: false,
        fade_in_batches: 0,
        activation: Activation::Relu,
    };
    let tc = TrainConfig {
        epochs: 40,
        batch_size: 32,
        learning_rate: 0.0005,
        seed: 0,
        progressive: false,
        epochs_per_step: 0,
        log_every: 0,
        checkpoint_every: 0,
        prior_init: PriorInit::Mean,
    };
    let labels = vec![Some("label".to_string())];
    let mut accs = Vec::new();
    let mut worst = 0.0f64;
    for seed in 0..10 {
        let t = Instant::now();
        let mut model = build_model_with(cfg.clone(), &data.images, seed, tc.prior_init).unwrap();
        let out = train(&mut model, &data, None, &TrainConfig { seed, ..tc.clone() }, &labels, None)
            .unwrap();
        worst = worst.max(t.elapsed().as_secs_f64());
        accs.push(out.final_train_acc[0].unwrap());
    }
    let good = accs.iter().filter(|a| **a >= 0.55).count();
    let list = accs.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>().join(",");
    r.line(
        9,
        "mnist_desk_scale",
        good >= 7 && worst <= 2700.0,
        false,
        format!("seeds_with_acc_ge_0.55={good}/10 (>=7) acc=[{list}] max_runtime={worst:.1}s (<=2700s)"),
    );
}

fn criterion_10(r: &mut Report, model: &MfcVae, data: &Dataset) {
    let (_, test) = split(data, 0.8, 0).unwrap();
    let d = data.dim();
    let (mut asym, mut not_involutive) = (0, 0);
    for p in 0..20 {
        let x1 = test.images.row(2 * p).to_vec();
        let x2 = test.images.row(2 * p + 1).to_vec();
        let (a1, a2) = model.swap_reconstruct(&x1, &x2, 0).unwrap();
        let (b1, b2) = model.swap_reconstruct(&x1, &x2, 1).unwrap();
        let (c1, c2) = model.swap_reconstruct(&x2, &x1, 0).unwrap();
        if bits_of(&a1) != bits_of(&b2) || bits_of(&a2) != bits_of(&b1) {
            asym += 1;
        }
        if bits_of(&a1) != bits_of(&c2) || bits_of(&a2) != bits_of(&c1) {
            asym += 1;
        }
        let pair = Tensor::matrix(2, d, [x1, x2].concat());
        let original = model.posterior(&pair).unwrap().means;
        let mut means = original.clone();
        for _ in 0..2 {
            let dj = means[0].last_dim();
            let m = means[0].data_mut();
            for i in 0..dj {
                m.swap(i, dj + i);
            }
        }
        let restored = model.decode_values(&means, &[1.0, 1.0]).unwrap();
        let recon = model.reconstruct(&pair).unwrap();
        if bits(&means[0]) != bits(&original[0]) || bits(&restored) != bits(&recon) {
            not_involutive += 1;
        }
    }
    r.line(
        10,
        "swap_symmetry_and_involution",
        asym == 0 && not_involutive == 0,
        true,
        format!("asymmetric_pairs={asym}/20 double_swap_mismatches={not_involutive}/20"),
    );
}

fn main() {
    let quick = std::env::var("MFC_ACCEPT_QUICK").is_ok_and(|v| v == "1");
    let mut r = Report { hard_failures: Vec::new() };

    criterion_1(&mut r);
    r.checks(2, "optimal_posterior", &optimality_checks(50, 21, VerifyOptions::default()).unwrap(), "");
    r.checks(3, "joint_optimum_marginals", &joint_posterior_checks(12, 10_000, 31).unwrap(), "");
    r.checks(4, "responsibility_gap", &responsibility_gap_checks(VerifyOptions::default()).unwrap(), "");
    let (checks, grad_l2) = estimator_checks(100, 41).unwrap();
    r.checks(5, "estimator_equality", &checks, &format!(" gradient_l2_difference={grad_l2:.3e}"));
    criterion_6(&mut r);

    let data = synthetic_data();
    if quick {
        let model = {
            let tc = TrainConfig { epochs: 4, ..synthetic_train(0, true) };
            let mut m = build_model(synthetic_model(Architecture::Ladder), &data.images, 0).unwrap();
            train(&mut m, &data, None, &tc, &[None, None], None).unwrap();
            m
        };
        criterion_10(&mut r, &model, &data);
        println!("SKIP criteria 7, 8, 9, 11 (MFC_ACCEPT_QUICK=1)");
    } else {
        let runs = criterion_7(&mut r, &data);
        criterion_8(&mut r, &data);
        criterion_9(&mut r);
        criterion_10(&mut r, &runs[0].model, &data);
        let again = run_synthetic_seed(&data, 0);
        r.line(
            11,
            "determinism",
            again.csv == runs[0].csv,
            true,
            format!("seed-0 metrics CSV byte-identical on repeat: {}", again.csv == runs[0].csv),
        );
    }

    if !r.hard_failures.is_empty() {
        eprintln!("hard criteria failed: {}", r.hard_failures.join(", "));
        std::process::exit(1);
    }
}
