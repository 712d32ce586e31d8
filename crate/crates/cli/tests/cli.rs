use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TOY: &[&str] = &[
    "dataset=toy",
    "toy.clusters=3",
    "toy.x_dim=4",
    "toy.items=300",
    "toy.test_items=60",
    "latent_dim=2",
    "arch.enc_xw=(D8R, D8R)",
    "arch.enc_x=D8R",
    "arch.enc_w=D8R",
    "arch.dec_x=D8R",
    "arch.dec_w=D8R",
    "arch.tail_h2=D4-D8R",
    "arch.prior_z1=D8R",
    "warmup_epochs=2",
    "batch_size=50",
    "eval.samples=3",
    "eval.chain_steps=2",
];

fn jmvae(verb: &str, out: &Path, extra: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_jmvae"));
    cmd.arg(verb).arg("--out").arg(out);
    cmd.args(extra);
    cmd.output().unwrap()
}

fn toy_args(model: &str, epochs: u64) -> Vec<String> {
    let mut args = Vec::new();
    for kv in TOY.iter().map(|s| s.to_string()).chain([format!("model={model}"), format!("epochs={epochs}")]) {
        args.push("--set".to_string());
        args.push(kv);
    }
    args
}

fn strs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

fn train_toy(model: &str, dir: &Path) -> PathBuf {
    let out = jmvae("train", dir, &strs(&toy_args(model, 3)));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    dir.join("checkpoint.jmvl")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn train_writes_artifacts_and_reruns_from_the_manifest() {
    let a = tempfile::tempdir().unwrap();
    train_toy("jmvae-kl", a.path());
    let metrics = fs::read_to_string(a.path().join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 4);
    assert!(metrics.starts_with("epoch,beta,loss,recon_x,recon_w,kl_prior,kl_match_x,kl_match_w\n"));
    let manifest = fs::read_to_string(a.path().join("manifest.txt")).unwrap();
    assert!(manifest.contains("model = jmvae-kl"));
    assert!(manifest.contains("# wall "));
    assert!(!metrics.contains("wall"));

    let b = tempfile::tempdir().unwrap();
    let manifest_path = a.path().join("manifest.txt");
    let out = jmvae("train", b.path(), &["--config", manifest_path.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["metrics.csv", "checkpoint.jmvl"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn resumed_training_appends_to_the_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_toy("jmvae", dir.path());
    let out = jmvae("train", dir.path(), &["--checkpoint", ckpt.to_str().unwrap(), "--set", "epochs=5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let epochs: Vec<&str> = metrics.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(epochs, ["1", "2", "3", "4", "5"]);

    let straight = tempfile::tempdir().unwrap();
    let out = jmvae("train", straight.path(), &strs(&toy_args("jmvae", 5)));
    assert!(out.status.success());
    assert_eq!(fs::read_to_string(straight.path().join("metrics.csv")).unwrap(), metrics);
}

#[test]
fn eval_writes_one_report_row() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_toy("jmvae-kl", dir.path());
    let out = jmvae("eval", dir.path(), &["--checkpoint", ckpt.to_str().unwrap(), "--set", "eval.direction=w|x"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("eval.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "model,direction,N,T,estimate,standard_error");
    assert_eq!(lines.len(), 2);
    let fields: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(&fields[..4], ["jmvae-kl", "w|x", "3", "0"]);
    let estimate: f64 = fields[4].parse().unwrap();
    assert!(estimate.is_finite() && estimate < 0.0, "{estimate}");
    assert!(fields[5].parse::<f64>().unwrap() >= 0.0);
}

#[test]
fn generate_writes_a_class_by_sample_grid() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_toy("jmvae", dir.path());
    let out = jmvae("generate", dir.path(), &["--checkpoint", ckpt.to_str().unwrap(), "--set", "generate.samples=5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    // 2x2 images with a one-pixel gap: 5 columns, 3 classes
    let pgm = fs::read(dir.path().join("generate.pgm")).unwrap();
    let header = b"P5\n14 8\n255\n";
    assert_eq!(&pgm[..header.len()], header);
    assert_eq!(pgm.len(), header.len() + 14 * 8);
}

#[test]
fn complement_latent_and_shift_produce_their_files() {
    let dir = tempfile::tempdir().unwrap();
    let joint = train_toy("jmvae", dir.path());
    let out = jmvae("complement", dir.path(), &["--checkpoint", joint.to_str().unwrap(), "--set", "complement.steps=3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for frame in ["complement_000.pgm", "complement_003.pgm", "complement_mean.pgm"] {
        assert!(fs::read(dir.path().join(frame)).unwrap().starts_with(b"P5\n"), "{frame}");
    }

    let out = jmvae("latent", dir.path(), &["--checkpoint", joint.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("latent.csv")).unwrap();
    assert!(csv.starts_with("item,label,mean0,mean1,var0,var1,has_x,has_w\n"));
    assert!(csv.lines().nth(1).unwrap().ends_with(",0,1"));
    assert_eq!(csv.lines().count(), 61);

    let kl_dir = tempfile::tempdir().unwrap();
    let kl = train_toy("jmvae-kl", kl_dir.path());
    let out = jmvae("shift", kl_dir.path(), &["--checkpoint", kl.to_str().unwrap(), "--set", "shift.from=0", "--set", "shift.to=2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(fs::read(kl_dir.path().join("shift.pgm")).unwrap().starts_with(b"P5\n"));

    let out = jmvae("complement", kl_dir.path(), &["--checkpoint", kl.to_str().unwrap()]);
    assert_eq!(code(&out), 1, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = jmvae("train", dir.path(), &["--set", "no.such.key=1"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("no.such.key"));
    assert_eq!(code(&jmvae("train", dir.path(), &["--bogus"])), 1);
    assert_eq!(code(&jmvae("eval", dir.path(), &[])), 1);

    let missing = dir.path().join("missing.jmvl");
    assert_eq!(code(&jmvae("eval", dir.path(), &["--checkpoint", missing.to_str().unwrap()])), 3);
    let bad = dir.path().join("bad.jmvl");
    fs::write(&bad, b"JMVL garbage").unwrap();
    assert_eq!(code(&jmvae("eval", dir.path(), &["--checkpoint", bad.to_str().unwrap()])), 3);

    let mut args = toy_args("jmvae-kl", 3);
    args.extend(["--set".into(), "learning_rate=1e30".into()]);
    assert_eq!(code(&jmvae("train", dir.path(), &strs(&args))), 2);
}

#[test]
fn selftest_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = jmvae("selftest", dir.path(), &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let report = String::from_utf8(out.stdout).unwrap();
    assert!(report.lines().all(|l| l.starts_with("PASS ")));
    assert!(report.contains("PASS gradient sigmoid"));
}

#[test]
fn selftest_fails_on_a_corrupted_gradient_build() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    let target = Path::new(env!("CARGO_TARGET_TMPDIR")).join("corrupt-gradient");
    let build = Command::new(env!("CARGO"))
        .current_dir(&root)
        .args(["build", "-q", "-p", "jmvae-cli", "--features", "corrupt-gradient", "--target-dir"])
        .arg(&target)
        .status()
        .unwrap();
    assert!(build.success());
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(target.join("debug/jmvae")).arg("selftest").arg("--out").arg(dir.path()).output().unwrap();
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL gradient sigmoid"));
}
