use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn layerforge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_layerforge"))
        .args(args)
        .env_remove("LAYERFORGE_SEED")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn config(workdir: &Path, extra_model: &str) -> String {
    format!(
        r#"seed = 1
[paths]
workdir = "{}"
[synth]
subtask = "glass"
width = 16
height = 16
count_train = 4
count_test = 2
[model]
d = 16
heads = 2
blocks = 1
{extra_model}
[train]
steps = 10
batch = 2
lr = 1e-3
[sampler]
steps = 3
"#,
        workdir.display()
    )
}

#[test]
fn validate_reports_violations_with_field_paths() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.toml");
    fs::write(&good, config(&dir.path().join("w"), "")).unwrap();
    let out = layerforge(&["validate", "--config", p(&good)]);
    assert!(out.status.success(), "{}", stderr(&out));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, config(&dir.path().join("w"), "patch = 5")).unwrap();
    let out = layerforge(&["validate", "--config", p(&bad)]);
    assert!(!out.status.success());
    let err = stderr(&out);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("ERROR validate: model.patch"), "{err}");
}

#[test]
fn bad_arguments_fail_with_greppable_prefix() {
    let out = layerforge(&["compose", "--fg", "a.png", "--bg", "b.png", "--mode", "nonsense", "--out", "c.png"]);
    assert!(!out.status.success());
    assert!(stderr(&out).starts_with("ERROR args:"), "{}", stderr(&out));

    let out = layerforge(&["compose", "--fg", "missing.png", "--bg", "b.png", "--mode", "xray", "--out", "c.png"]);
    assert!(!out.status.success());
    assert!(stderr(&out).starts_with("ERROR compose:"), "{}", stderr(&out));
}

#[test]
fn synth_compose_invert_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = layerforge(&[
        "synth", "--subtask", "xray", "--width", "16", "--height", "16", "--train", "2", "--test", "1", "--seed", "3",
        "--out", p(&data),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let fg = data.join("test/test-000000_fg.png");
    let bg = data.join("test/test-000000_bg.png");
    let comp = data.join("test/test-000000_comp.png");

    let recomposed = dir.path().join("recomposed.png");
    let out = layerforge(&["compose", "--fg", p(&fg), "--bg", p(&bg), "--mode", "xray", "--out", p(&recomposed)]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(fs::read(&comp).unwrap(), fs::read(&recomposed).unwrap());

    let recovered = dir.path().join("bg.png");
    let mask = dir.path().join("mask.png");
    let out = layerforge(&[
        "invert", "--comp", p(&comp), "--fg", p(&fg), "--mode", "xray", "--out", p(&recovered), "--mask", p(&mask),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).contains("valid pixels"));
    assert!(recovered.exists() && mask.exists());
}

#[test]
fn train_sample_eval_gradcheck() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = layerforge(&[
        "synth", "--subtask", "occlusion", "--width", "16", "--height", "16", "--train", "4", "--test", "2", "--out",
        p(&data),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let manifest = data.join("manifest.jsonl");
    let ckpt = dir.path().join("m.ckpt");
    let log = dir.path().join("loss.csv");
    let out = layerforge(&[
        "train", "--manifest", p(&manifest), "--out", p(&ckpt), "--d", "16", "--heads", "2", "--blocks", "1", "--steps",
        "5", "--lr", "1e-3", "--loss-log", p(&log), "--no-lpec",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let trace = fs::read_to_string(&log).unwrap();
    assert!(trace.starts_with("step,t,loss,grad_norm"));
    assert_eq!(trace.lines().count(), 6);

    let samples = dir.path().join("samples");
    let comp = data.join("test/test-000000_comp.png");
    for method in ["euler", "algorithm1"] {
        let out = layerforge(&[
            "sample", "--ckpt", p(&ckpt), "--input", p(&comp), "--subtask", "occlusion", "--method", method, "--steps",
            "3", "--eta", "0.5", "--out", p(&samples),
        ]);
        assert!(out.status.success(), "{}", stderr(&out));
    }
    assert!(samples.join("background.png").exists() && samples.join("foreground.png").exists());

    let report = dir.path().join("report.csv");
    let out = layerforge(&[
        "eval", "--ckpt", p(&ckpt), "--manifest", p(&manifest), "--steps", "3", "--out", p(&report),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = fs::read_to_string(&report).unwrap();
    assert!(csv.starts_with("subtask,method,n,rmse,ssim,seconds"));
    assert_eq!(csv.lines().count(), 4);

    let out = layerforge(&["gradcheck", "--coords", "200"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let out = layerforge(&["gradcheck", "--coords", "0"]);
    assert!(stderr(&out).starts_with("ERROR gradcheck:"), "{}", stderr(&out));
}

#[test]
fn pipeline_honours_seed_environment_variable() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, seed: Option<&str>| {
        let cfg = dir.path().join(format!("{name}.toml"));
        fs::write(&cfg, config(&dir.path().join(name), "")).unwrap();
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_layerforge"));
        cmd.args(["pipeline", "--config", p(&cfg)]).env_remove("LAYERFORGE_SEED");
        if let Some(s) = seed {
            cmd.env("LAYERFORGE_SEED", s);
        }
        let out = cmd.output().unwrap();
        assert!(out.status.success(), "{}", stderr(&out));
        fs::read(dir.path().join(name).join("dataset/manifest.jsonl")).unwrap()
    };
    let plain = run("plain", None);
    let same = run("same", Some("1"));
    let other = run("other", Some("2"));
    assert_eq!(plain, same);
    assert_ne!(plain, other);
}

#[test]
fn pipeline_failure_names_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, config(&dir.path().join("w"), "mlp_ratio = 0")).unwrap();
    let out = layerforge(&["pipeline", "--config", p(&cfg)]);
    assert!(!out.status.success());
    assert!(stderr(&out).starts_with("ERROR config:"), "{}", stderr(&out));
}
