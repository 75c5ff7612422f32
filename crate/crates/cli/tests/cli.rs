use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use artnet::checkpoint::Checkpoint;

fn artnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_artnet"))
        .args(args)
        .output()
        .expect("spawn artnet")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn field<'a>(line: &'a str, key: &str) -> &'a str {
    line.split_whitespace()
        .find_map(|kv| kv.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no {key} in {line}"))
}

fn gen(dir: &Path, name: &str, n: usize, seed: u64) -> String {
    let p = dir.join(name).to_string_lossy().into_owned();
    let o = artnet(&["generate", "--n", &n.to_string(), "--seed", &seed.to_string(), "--out", &p]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    p
}

#[test]
fn generate_is_reproducible_and_rejects_empty() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen(dir.path(), "a.bin", 64, 7);
    let b = gen(dir.path(), "b.bin", 64, 7);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let c = gen(dir.path(), "c.bin", 64, 8);
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());

    let o = artnet(&["generate", "--n", "0", "--out", dir.path().join("z.bin").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn generate_histogram_within_multinomial_bound() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.bin");
    let o = artnet(&[
        "generate",
        "--n",
        "256",
        "--classes",
        "4",
        "--seed",
        "7",
        "--out",
        p.to_str().unwrap(),
    ]);
    let out = stdout(&o);
    assert_eq!(field(&out, "count"), "256");
    let hist: Vec<f64> = field(&out, "histogram").split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(hist.len(), 4);
    let (n, q) = (256.0, 0.25);
    let sigma = (n * q * (1.0 - q) as f64).sqrt();
    for h in hist {
        assert!((h - n * q).abs() <= 3.0 * sigma, "count {h} outside {} +- {}", n * q, 3.0 * sigma);
    }
    let bytes: u64 = field(&out, "bytes").parse().unwrap();
    assert_eq!(bytes, fs::metadata(&p).unwrap().len());
}

#[test]
fn train_resume_and_checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d.bin", 16, 3);
    let conf = dir.path().join("run.conf");
    fs::write(
        &conf,
        "# short run\nmax_iters = 6\neval_every = 3\nbatch_size = 4\nlr = 0.05\ntiny_channels = 8\n",
    )
    .unwrap();
    let run1 = dir.path().join("run1");
    let o = artnet(&[
        "train",
        "--config",
        conf.to_str().unwrap(),
        "--data",
        &data,
        "--out",
        run1.to_str().unwrap(),
        "--set",
        "lr=0.02",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("final_iter=6"));
    for f in ["final.ckpt", "best.ckpt", "train.log", "run.conf"] {
        assert!(run1.join(f).exists(), "{f}");
    }
    let written = fs::read_to_string(run1.join("run.conf")).unwrap();
    assert!(written.contains("lr = 0.02"), "flag beats file");
    assert!(written.contains("batch_size = 4"), "file beats default");
    assert!(written.contains("momentum = 0.9"), "default kept");
    assert_eq!(
        fs::read_to_string(run1.join("train.log"))
            .unwrap()
            .lines()
            .filter(|l| l.contains("split=train"))
            .count(),
        6
    );

    let final_ck = run1.join("final.ckpt");
    let ck = Checkpoint::load(&final_ck).unwrap();
    assert_eq!(ck.iteration, 6);
    let again = dir.path().join("again.ckpt");
    ck.save(&again).unwrap();
    assert_eq!(fs::read(&final_ck).unwrap(), fs::read(&again).unwrap());

    let run2 = dir.path().join("run2");
    let o = artnet(&[
        "train",
        "--config",
        conf.to_str().unwrap(),
        "--data",
        &data,
        "--out",
        run2.to_str().unwrap(),
        "--resume",
        final_ck.to_str().unwrap(),
        "--set",
        "max_iters=9",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.contains("start_iter=6"), "{out}");
    assert!(out.contains("final_iter=9"), "{out}");
    assert_eq!(Checkpoint::load(&run2.join("final.ckpt")).unwrap().iteration, 9);

    let o = artnet(&[
        "eval",
        "--checkpoint",
        final_ck.to_str().unwrap(),
        "--data",
        &data,
        "--clips",
        "2",
        "--crops",
        "10",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert_eq!(field(&out, "volumes"), "320");
    let top1: f64 = field(&out, "top1").parse().unwrap();
    assert!((0.0..=1.0).contains(&top1));
}

#[test]
fn full_size_architecture_selectable_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d.bin", 2, 1);
    let out = dir.path().join("run");
    let o = artnet(&[
        "train",
        "--arch",
        "artnet_r18_d",
        "--data",
        &data,
        "--out",
        out.to_str().unwrap(),
        "--set",
        "max_iters=1",
        "--set",
        "batch_size=2",
        "--set",
        "eval_every=1",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("arch=artnet_r18_d"));
    let ck = Checkpoint::load(&out.join("final.ckpt")).unwrap();
    assert_eq!(ck.spec.name, "artnet_r18_d");
    assert_eq!(ck.spec.stem.kind, artnet::architectures::UnitKind::Smart);
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d.bin", 4, 1);
    let out = dir.path().join("run");
    let o = artnet(&["train", "--arch", "resnet50", "--data", &data, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("artnet_r18_d") && err.contains("c3d_r18"), "{err}");

    let conf = dir.path().join("bad.conf");
    fs::write(&conf, "learning_rate = 0.1\n").unwrap();
    let o = artnet(&[
        "train",
        "--config",
        conf.to_str().unwrap(),
        "--data",
        &data,
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));

    let o = artnet(&[
        "train",
        "--data",
        dir.path().join("missing.bin").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn analyze_reports_trace_and_reference() {
    let o = artnet(&["analyze", "--arch", "c3d_r18"]);
    let out = stdout(&o);
    assert!(out.contains("reference: 33.37 M / 19.58 G"), "{out}");
    assert!(out.contains("convention: macs,no-bias,bn"), "{out}");

    let out = stdout(&artnet(&["analyze", "--arch", "artnet_r18_d"]));
    let trace = out.lines().find(|l| l.starts_with("trace:")).unwrap();
    assert!(trace.ends_with("7 x 7 x 1 -> 1 x 1 x 1"), "{trace}");

    let out = stdout(&artnet(&["analyze", "--arch", "artnet_r18_d", "--input", "8x56x56"]));
    assert!(out.contains("trace:"));
    assert!(!out.contains("reference:"));

    let out = stdout(&artnet(&["analyze", "--arch", "c3d_r18", "--format", "kv"]));
    assert!(out.lines().any(|l| l.starts_with("params_dev=")));

    assert_eq!(
        artnet(&["analyze", "--arch", "c3d_r18", "--input", "16x112"]).status.code(),
        Some(2)
    );
    assert_eq!(
        artnet(&["analyze", "--arch", "c3d_r18", "--convention", "odd"]).status.code(),
        Some(2)
    );
}

#[test]
fn verify_exit_code_tracks_failures() {
    let o = artnet(&["verify"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let out = stdout(&o);
    assert!(out
        .lines()
        .filter(|l| l.starts_with("check="))
        .all(|l| l.contains("status=pass") && l.contains("max_error=")));

    let o = artnet(&["verify", "--inject-energy-fault"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("check=identity.energy_expansion status=FAIL"));
}

#[test]
fn bench_output_and_repeat_contract() {
    let o = artnet(&["bench", "--block", "relation", "--shape", "4x3x8x8", "--repeats", "1"]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert_eq!(field(&out, "noisy"), "true");
    assert_eq!(field(&out, "threads"), "1");
    let flops = field(&out, "flops").to_string();
    let again = stdout(&artnet(&["bench", "--block", "relation", "--shape", "4x3x8x8", "--repeats", "2"]));
    assert_eq!(field(&again, "flops"), flops);

    assert_eq!(artnet(&["bench", "--repeats", "0"]).status.code(), Some(2));
    assert_eq!(artnet(&["bench", "--block", "lstm"]).status.code(), Some(2));
}
