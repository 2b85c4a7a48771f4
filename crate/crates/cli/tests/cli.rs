use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;

const SMALL: &[&str] = &[
    "--preset",
    "desk32",
    "--seed",
    "7",
    "--set",
    "phantom.n_subjects=3",
    "--set",
    "field.base_width=2",
    "--set",
    "flow.train.steps=3",
    "--set",
    "flow.train.batch_size=1",
    "--set",
    "flow.sampler.n_steps=2",
];

fn edgeflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_edgeflow"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_ok(out: &Path, cmd: &[&str]) -> Output {
    let mut args: Vec<&str> = SMALL.to_vec();
    args.extend(["--out", out.to_str().unwrap()]);
    args.extend(cmd);
    let o = edgeflow(&args);
    assert!(o.status.success(), "{:?}: {}", cmd, String::from_utf8_lossy(&o.stderr));
    o
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn corpus(&self) -> PathBuf {
        self.root.join("gen/corpus")
    }

    fn volume(&self, subject: usize, name: &str) -> PathBuf {
        self.corpus().join(format!("subject_{subject:03}/{name}.hvol"))
    }

    fn checkpoint(&self) -> PathBuf {
        self.root.join("fit/model.ckpt")
    }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        run_ok(&root.join("gen"), &["phantom"]);
        let corpus = root.join("gen/corpus");
        run_ok(&root.join("fit"), &["train", corpus.to_str().unwrap()]);
        Fixture { _dir: dir, root }
    })
}

fn error_of(o: &Output) -> Value {
    let text = String::from_utf8_lossy(&o.stderr);
    let line = text.lines().last().expect("stderr line");
    serde_json::from_str(line).expect("structured error")
}

#[test]
fn phantom_and_train_fill_the_run_directory() {
    let f = fixture();
    assert!(f.corpus().join("manifest.json").exists());
    assert!(f.volume(2, "source_1").exists());
    let fit = f.root.join("fit");
    for name in ["config.json", "log.txt", "model.ckpt", "loss.csv"] {
        assert!(fit.join(name).exists(), "{name}");
    }
    let csv = std::fs::read_to_string(fit.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    let echoed: Value = serde_json::from_str(&std::fs::read_to_string(fit.join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed["flow"]["train"]["steps"], 3);
    assert_eq!(echoed["seed"], 7);
}

#[test]
fn edge_command_writes_an_edge_map() {
    let f = fixture();
    let out = f.root.join("edge");
    let o = run_ok(&out, &["edge", f.volume(0, "target").to_str().unwrap()]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("edge fraction"));
    assert!(out.join("edges.hvol").exists());
}

#[test]
fn harmonize_without_refinement_is_the_flow_output() {
    let f = fixture();
    let src = f.volume(2, "source_0");
    let (ck, src) = (f.checkpoint(), src.to_str().unwrap().to_string());
    let plain = f.root.join("h0");
    run_ok(&plain, &["--set", "refine.iterations=0", "harmonize", ck.to_str().unwrap(), &src]);
    let flow = std::fs::read(plain.join("flow.hvol")).unwrap();
    assert_eq!(std::fs::read(plain.join("harmonized.hvol")).unwrap(), flow);

    let refined = f.root.join("h6");
    run_ok(&refined, &["harmonize", ck.to_str().unwrap(), &src]);
    assert_eq!(std::fs::read(refined.join("flow.hvol")).unwrap(), flow);
    assert_ne!(std::fs::read(refined.join("harmonized.hvol")).unwrap(), flow);
}

#[test]
fn echoed_config_reproduces_the_run() {
    let f = fixture();
    let src = f.volume(1, "source_1");
    let ck = f.checkpoint();
    let first = f.root.join("rep1");
    run_ok(&first, &["harmonize", ck.to_str().unwrap(), src.to_str().unwrap()]);
    let second = f.root.join("rep2");
    let o = edgeflow(&[
        "--config",
        first.join("config.json").to_str().unwrap(),
        "--out",
        second.to_str().unwrap(),
        "harmonize",
        ck.to_str().unwrap(),
        src.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        std::fs::read(first.join("harmonized.hvol")).unwrap(),
        std::fs::read(second.join("harmonized.hvol")).unwrap()
    );
}

#[test]
fn eval_of_identical_volumes_is_perfect() {
    let f = fixture();
    let t = f.volume(0, "target");
    let out = f.root.join("eval");
    let t = t.to_str().unwrap();
    run_ok(&out, &["eval", t, t, "--dice-cuts", "0.2,0.5,0.8"]);
    let report: Value = serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(report["psnr_infinite"], true);
    assert_eq!(report["ssim"], 1.0);
    assert!(report["dice"].as_object().unwrap().values().all(|d| d == 1.0));
}

#[test]
fn baselines_write_volumes() {
    let f = fixture();
    let src = f.volume(2, "source_1");
    let t0 = f.volume(0, "target");
    let t1 = f.volume(1, "target");
    for method in ["histmatch", "ssimh"] {
        let out = f.root.join(method);
        run_ok(
            &out,
            &[
                "baseline",
                method,
                src.to_str().unwrap(),
                "--target",
                t0.to_str().unwrap(),
                "--target",
                t1.to_str().unwrap(),
            ],
        );
        assert!(out.join("baseline.hvol").exists());
    }
}

#[test]
fn failures_map_to_exit_codes() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let t = f.volume(0, "target");
    let t = t.to_str().unwrap();

    let o = edgeflow(&["--out", out, "--set", "flow.train.bogus=1", "edge", t]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_of(&o)["error"]["kind"], "invalid_param");

    let o = edgeflow(&["--out", out, "edge", "/nonexistent/volume.hvol"]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(error_of(&o)["error"]["kind"], "io");

    let o = edgeflow(&["--out", out, "--set", "edges.target_fraction=0.9", "edge", t]);
    assert_eq!(o.status.code(), Some(4));
    assert_eq!(error_of(&o)["error"]["exit_code"], 4);

    let o = edgeflow(&["--out", out]);
    assert_eq!(o.status.code(), Some(2));
}
