use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bevalign"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| {
        panic!(
            "stdout is not JSON ({e}): {}\nstderr: {}",
            String::from_utf8_lossy(&o.stdout),
            String::from_utf8_lossy(&o.stderr)
        )
    })
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new(frames: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let m = run(&["print-manifest", "--frames", &frames.to_string()]);
        assert_eq!(code(&m), 0);
        fs::write(root.join("manifest.json"), &m.stdout).unwrap();
        Self { _dir: dir, root }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn gen(&self, out: &str) -> Output {
        run(&[
            "gen-data",
            "--manifest",
            s(&self.path("manifest.json")),
            "--out",
            s(&self.path(out)),
        ])
    }

    /// A tiny run config pointing at `data` and writing to `out`.
    fn config(&self, data: &str, out: &str, epochs: usize) -> PathBuf {
        let o = run(&["print-config"]);
        let mut c = json(&o);
        c["paths"]["data_dir"] = s(&self.path(data)).into();
        c["paths"]["out_dir"] = s(&self.path(out)).into();
        c["train"]["epochs"] = epochs.into();
        c["train"]["warmup_epochs"] = 1.into();
        let p = self.path(&format!("{out}.json"));
        fs::write(&p, serde_json::to_string(&c).unwrap()).unwrap();
        p
    }
}

fn tree_bytes(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_counts_and_reproducibility() {
    let fx = Fixture::new(3);
    let a = fx.gen("a");
    assert_eq!(code(&a), 0);
    let report = json(&a);
    let ds = report["datasets"].as_array().unwrap();
    assert_eq!(ds.len(), 2);
    for d in ds {
        assert_eq!(d["frames"], 3);
    }
    assert_eq!(code(&fx.gen("a")), 0);
    assert_eq!(code(&fx.gen("b")), 0);
    let (ta, tb) = (tree_bytes(&fx.path("a")), tree_bytes(&fx.path("b")));
    assert_eq!(ta.len(), 2 * 3 + 1);
    assert_eq!(ta, tb);
}

#[test]
fn gen_data_errors_exit_2() {
    let fx = Fixture::new(2);
    // output below a regular file cannot be created
    fs::write(fx.path("blocker"), b"x").unwrap();
    let o = fx.gen("blocker/data");
    assert_eq!(code(&o), 2);
    assert!(!o.stderr.is_empty());

    fs::write(fx.path("manifest.json"), b"{\"datasets\": 3}").unwrap();
    assert_eq!(code(&fx.gen("c")), 2);
    let missing = run(&[
        "gen-data",
        "--manifest",
        s(&fx.path("nope.json")),
        "--out",
        s(&fx.path("d")),
    ]);
    assert_eq!(code(&missing), 2);
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&run(&[])), 2);
    assert_eq!(code(&run(&["probe", "--strategy", "sideways"])), 2);
    let fx = Fixture::new(2);
    let bad = fx.path("bad.json");
    fs::write(&bad, r#"{"schema_version": 1, "unknown_key": 1}"#).unwrap();
    assert_eq!(code(&run(&["pretrain", "--config", s(&bad)])), 2);
}

#[test]
fn help_lists_defaults() {
    let o = run(&["pretrain", "--help"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("\"schema_version\""));
    assert!(text.contains("\"peak_lr\""));
}

#[test]
fn pretrain_probe_and_inspect() {
    let fx = Fixture::new(6);
    assert_eq!(code(&fx.gen("data")), 0);
    let cfg = fx.config("data", "run", 2);
    let o = run(&["pretrain", "--config", s(&cfg), "--seed", "5"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary = json(&o);
    assert_eq!(
        summary["steps"],
        2 * summary["steps_per_epoch"].as_u64().unwrap()
    );
    assert_eq!(summary["prompts_enabled"], true);
    let csv1 = fs::read_to_string(fx.path("run/metrics.csv")).unwrap();
    assert!(csv1.starts_with("step,epoch,lr,l_cl,l_mae,l_all\n"));

    // same seed, same log
    let again = run(&[
        "pretrain",
        "--config",
        s(&cfg),
        "--seed",
        "5",
        "--out",
        s(&fx.path("run2")),
    ]);
    assert_eq!(code(&again), 0);
    assert_eq!(
        csv1,
        fs::read_to_string(fx.path("run2/metrics.csv")).unwrap()
    );
    // sequential execution gives the same bytes
    let seq = run(&[
        "--sequential",
        "pretrain",
        "--config",
        s(&cfg),
        "--seed",
        "5",
        "--out",
        s(&fx.path("run3")),
    ]);
    assert_eq!(code(&seq), 0);
    assert_eq!(
        csv1,
        fs::read_to_string(fx.path("run3/metrics.csv")).unwrap()
    );

    let ck = fx.path("run/checkpoint.bvck");
    for strategy in ["correspond", "wrong", "random", "none"] {
        let o = run(&[
            "probe",
            "--checkpoint",
            s(&ck),
            "--strategy",
            strategy,
            "--dataset",
            "0",
        ]);
        assert_eq!(
            code(&o),
            0,
            "{strategy}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        let r = json(&o);
        assert_eq!(r["strategy"], strategy);
        let acc = r["accuracy"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&acc));
        assert!(r["iou"].as_f64().is_some());
    }
    let o = run(&[
        "probe",
        "--checkpoint",
        s(&ck),
        "--strategy",
        "wrong",
        "--prompt-from",
        "42",
        "--dataset",
        "0",
    ]);
    assert_eq!(code(&o), 2);

    let sample = fx.path("data/ds0/frame_000000.bvs");
    let heat = |prompt: &str, out: &str| {
        run(&[
            "inspect-bev",
            "--checkpoint",
            s(&ck),
            "--sample",
            s(&sample),
            "--prompt",
            prompt,
            "--out",
            s(&fx.path(out)),
        ])
    };
    assert_eq!(code(&heat("0", "h0.pgm")), 0);
    assert_eq!(code(&heat("1", "h1.pgm")), 0);
    assert_eq!(code(&heat("none", "hn.pgm")), 0);
    assert_eq!(code(&heat("9", "h9.pgm")), 2);
    assert_eq!(code(&heat("zero", "hz.pgm")), 2);
    let pgm = fs::read(fx.path("h0.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n8 8\n65535\n"));
    assert_eq!(pgm.len(), b"P5\n8 8\n65535\n".len() + 8 * 8 * 2);
    let csv0 = fs::read_to_string(fx.path("h0.csv")).unwrap();
    assert_eq!(csv0.lines().count(), 8);
    assert!(csv0.lines().all(|l| l.split(',').count() == 8));
}

#[test]
fn no_prompt_checkpoint_lacks_prompt_groups() {
    let fx = Fixture::new(4);
    assert_eq!(code(&fx.gen("data")), 0);
    let cfg = fx.config("data", "plain", 2);
    let o = run(&["pretrain", "--config", s(&cfg), "--no-prompt"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(json(&o)["prompts_enabled"], false);
    let ck = bevalign::training::Checkpoint::load(&fx.path("plain/checkpoint.bvck")).unwrap();
    let names: Vec<&str> = ck.groups().iter().map(|g| g.name()).collect();
    assert!(
        !names.contains(&"prompts") && !names.contains(&"adapters"),
        "{names:?}"
    );

    let ck = fx.path("plain/checkpoint.bvck");
    let none = run(&[
        "probe",
        "--checkpoint",
        s(&ck),
        "--strategy",
        "none",
        "--dataset",
        "1",
    ]);
    assert_eq!(code(&none), 0);
    let corr = run(&[
        "probe",
        "--checkpoint",
        s(&ck),
        "--strategy",
        "correspond",
        "--dataset",
        "1",
    ]);
    assert_eq!(code(&corr), 2);
    let sample = fx.path("data/ds1/frame_000000.bvs");
    let h = run(&[
        "inspect-bev",
        "--checkpoint",
        s(&ck),
        "--sample",
        s(&sample),
        "--prompt",
        "1",
        "--out",
        s(&fx.path("h.pgm")),
    ]);
    assert_eq!(code(&h), 2);
}

#[test]
fn gradcheck_passes_and_blames_injected_fault() {
    let o = run(&["gradcheck", "--seeds", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = json(&o);
    let checks = r["checks"].as_array().unwrap();
    assert!(checks.iter().any(|c| c["name"] == "matmul"));
    assert!(checks
        .iter()
        .all(|c| c["max_error"].as_f64().unwrap() < c["tolerance"].as_f64().unwrap()));
    assert!(String::from_utf8_lossy(&o.stderr).contains("worst offender"));

    for op in ["exp", "matmul", "softmax"] {
        let o = run(&["gradcheck", "--seeds", "2", "--inject-fault", op]);
        assert_eq!(code(&o), 1, "{op}");
        let err = String::from_utf8_lossy(&o.stderr);
        assert!(err.contains(&format!("first suspect: {op}")), "{op}: {err}");
    }
    assert_eq!(code(&run(&["gradcheck", "--inject-fault", "not_an_op"])), 2);
}
