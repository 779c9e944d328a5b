use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMOKE: &str = "dataset = synthetic
epochs = 2
batch_size = 32
learning_rate = 0.001
seed = 3
synth_per_combo = 8
fade_in_batches = 2
";

fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfcvae")).args(args).current_dir(cwd).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn pgm_header(path: &Path) -> (String, Vec<u8>) {
    let bytes = fs::read(path).unwrap();
    let end = bytes.iter().position(|b| *b == b'\n').unwrap();
    (String::from_utf8(bytes[..end].to_vec()).unwrap(), bytes[end + 1..].to_vec())
}

fn trained(dir: &Path) {
    fs::write(dir.join("smoke.cfg"), SMOKE).unwrap();
    let o = run(&["train", "--config", "smoke.cfg", "--out", "run"], dir);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn missing_required_key_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.cfg"), SMOKE.replace("learning_rate = 0.001\n", "")).unwrap();
    let o = run(&["train", "--config", "bad.cfg"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
}

#[test]
fn unknown_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.cfg"), SMOKE).unwrap();
    let o = run(&["train", "--config", "c.cfg", "--set", "colour=red"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn smoke_train_writes_metrics_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("smoke.cfg"), SMOKE).unwrap();
    let o = run(&["train", "--config", "smoke.cfg", "--out", "run", "--seed", "7"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.contains("final_acc_facet_0=") && out.contains("final_acc_facet_1="));
    let csv = fs::read_to_string(dir.path().join("run/metrics.csv")).unwrap();
    assert!(csv.lines().count() > 1);
    assert!(dir.path().join("run/model.mfcv").exists());
    let manifest = fs::read_to_string(dir.path().join("run/manifest.txt")).unwrap();
    assert!(manifest.lines().any(|l| l == "seed=7"));
    assert!(manifest.contains("# build_id="));
}

#[test]
fn manifest_reproduces_the_run_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    let o = run(&["train", "--config", "run/manifest.txt", "--out", "again"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let a = fs::read(dir.path().join("run/model.mfcv")).unwrap();
    let b = fs::read(dir.path().join("again/model.mfcv")).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        fs::read(dir.path().join("run/metrics.csv")).unwrap(),
        fs::read(dir.path().join("again/metrics.csv")).unwrap()
    );
}

#[test]
fn generate_writes_a_pgm_grid() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    let args = ["generate", "--checkpoint", "run/model.mfcv", "--facet", "1", "--cluster", "2", "--n", "3", "--output", "g.pgm"];
    let o = run(&args, dir.path());
    assert_eq!(o.status.code(), Some(0));
    let (header, pixels) = pgm_header(&dir.path().join("g.pgm"));
    assert_eq!(header, "P5 48 16 255");
    assert_eq!(pixels.len(), 48 * 16);
    let bad = run(&["generate", "--checkpoint", "run/model.mfcv", "--facet", "1", "--cluster", "99"], dir.path());
    assert_ne!(bad.status.code(), Some(0));
}

#[test]
fn self_swap_gives_identical_reconstructions() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    let o = run(
        &["swap", "--config", "run/manifest.txt", "--checkpoint", "run/model.mfcv", "--idx1", "4", "--idx2", "4", "--facet", "0", "--output", "s.pgm"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let (header, px) = pgm_header(&dir.path().join("s.pgm"));
    assert_eq!(header, "P5 64 16 255");
    for row in px.chunks(64) {
        assert_eq!(row[32..48], row[48..64]);
        assert_eq!(row[..16], row[16..32]);
    }
}

#[test]
fn verify_passes_and_detects_a_perturbed_posterior() {
    let dir = tempfile::tempdir().unwrap();
    let ok = run(&["verify"], dir.path());
    assert_eq!(ok.status.code(), Some(0));
    let text = stdout(&ok);
    let line = text.lines().find(|l| l.contains("loss_primary_vs_alternate")).unwrap();
    assert!(line.starts_with("PASS"));
    let residual: f64 = line.split("residual=").nth(1).unwrap().split_whitespace().next().unwrap().parse().unwrap();
    assert!(residual < 1e-8);
    let bad = run(&["verify", "--perturb", "1e-3"], dir.path());
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn sweep_reports_mean_and_std() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("smoke.cfg"), SMOKE).unwrap();
    let o = run(&["sweep", "--config", "smoke.cfg", "--out", "sw", "--seeds", "1,2"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("final_acc_facet_1_std="));
    let curves = fs::read_to_string(dir.path().join("sw/sweep_curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 1 + 2 * 2);
}

#[test]
fn eval_reports_accuracy_and_probe_lines() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    let o = run(&["eval", "--config", "smoke.cfg", "--out", "run", "--set", "probe_seeds=2"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.contains("test_acc_facet_1="));
    for key in ["probe_shape_z0=", "probe_shape_z1=", "probe_intensity_zcat="] {
        assert!(out.contains(key), "missing {key} in {out}");
    }
}
