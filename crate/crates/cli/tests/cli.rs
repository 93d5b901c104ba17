use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 3
[data]
source = "synthetic"
n = 240
d = 6
m = 3
imbalance_exponent = 1.0
class_separation = 3.0
noise_scale = 1.0
seed = 1
[pretrain]
epochs = 3
batch_size = 64
"#;

fn tabcon(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tabcon"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn config(dir: &Path) -> String {
    let path = dir.join("small.toml");
    fs::write(&path, SMALL).unwrap();
    path.display().to_string()
}

#[test]
fn gen_data_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("synth.csv");
    ok(&tabcon(&[
        "gen-data",
        "--n",
        "50",
        "--d",
        "4",
        "--m",
        "3",
        "--seed",
        "9",
        "--out",
        out.to_str().unwrap(),
    ]));
    let text = fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "f0,f1,f2,f3,label");
    assert_eq!(lines.count(), 50);
}

#[test]
fn staged_commands_match_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let full = dir.path().join("full");
    let staged = dir.path().join("staged");
    let stdout = ok(&tabcon(&[
        "--config",
        &cfg,
        "--out",
        full.to_str().unwrap(),
        "run",
    ]));
    assert!(stdout.contains("OaP"));

    let s = staged.to_str().unwrap();
    ok(&tabcon(&["--config", &cfg, "--out", s, "pretrain"]));
    ok(&tabcon(&["--out", s, "embed"]));
    ok(&tabcon(&["--config", &cfg, "--out", s, "train-eval"]));
    for f in [
        "reports/origin.json",
        "reports/ssp.json",
        "reports/metrics.csv",
        "summary.json",
        "embeddings/test.csv",
    ] {
        assert_eq!(
            fs::read(full.join(f)).unwrap(),
            fs::read(staged.join(f)).unwrap(),
            "{f}"
        );
    }

    // rerunning from the written manifest reproduces the reports
    let again = dir.path().join("again");
    let manifest = full.join("manifest.json");
    ok(&tabcon(&[
        "--config",
        manifest.to_str().unwrap(),
        "--out",
        again.to_str().unwrap(),
        "run",
    ]));
    assert_eq!(
        fs::read(full.join("reports/ssp.json")).unwrap(),
        fs::read(again.join("reports/ssp.json")).unwrap()
    );

    let out = ok(&tabcon(&[
        "report",
        "--ssp",
        full.join("reports/ssp.json").to_str().unwrap(),
        "--origin",
        full.join("reports/origin.json").to_str().unwrap(),
    ]));
    assert!(out.starts_with("OaP"));
}

#[test]
fn embed_single_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let run = dir.path().join("run");
    ok(&tabcon(&[
        "--config",
        &cfg,
        "--out",
        run.to_str().unwrap(),
        "pretrain",
    ]));
    let emb = dir.path().join("emb.csv");
    ok(&tabcon(&[
        "embed",
        "--checkpoint",
        run.join("encoder.ckpt").to_str().unwrap(),
        "--input",
        run.join("data/test.csv").to_str().unwrap(),
        "--out",
        emb.to_str().unwrap(),
    ]));
    let text = fs::read_to_string(emb).unwrap();
    assert!(text.starts_with("e0,e1,e2,e3,e4,e5,label\n"));
}

#[test]
fn sweep_emits_one_oap_per_point() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let out = dir.path().join("sweep");
    let stdout = ok(&tabcon(&[
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "sweep",
        "--over",
        "alpha",
        "--values",
        "0,0.5,1",
    ]));
    assert_eq!(stdout.lines().count(), 3);
    let csv = fs::read_to_string(out.join("sweep/alpha.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    // alpha = 1 fuses to the raw features
    assert_eq!(csv.lines().last().unwrap(), "1,0");

    let stdout = ok(&tabcon(&[
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "sweep",
        "--over",
        "dim",
        "--values",
        "2,6",
    ]));
    assert_eq!(stdout.lines().count(), 2);
}

#[test]
fn report_rejects_mismatched_registries() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    let report = |name: &str| {
        format!(
            r#"[{{"classifier":"{name}","accuracy":0.5,"macro_recall":0.5,"macro_f1":0.5,"micro_f1":0.5,"per_class":[],"confusion":[]}}]"#
        )
    };
    fs::write(&a, report("knn")).unwrap();
    fs::write(&b, report("gaussian_nb")).unwrap();
    let out = tabcon(&[
        "report",
        "--ssp",
        a.to_str().unwrap(),
        "--origin",
        b.to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("[report]") && err.contains("registry mismatch"),
        "{err}"
    );
}

#[test]
fn errors_carry_stage_and_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[split]\ntest_fraction = 1.5\n").unwrap();
    let out = tabcon(&[
        "--config",
        bad.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "run",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("[config]"));

    let out = tabcon(&[
        "--out",
        dir.path().join("missing").to_str().unwrap(),
        "embed",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("[embed]"));
}
