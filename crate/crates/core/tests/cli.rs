use std::path::Path;
use std::process::{Command, Output};

use dias_core::scene::{generate_many, write_dataset, SceneConfig};

fn dias(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dias")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

const SCENE: &str = "image_size = 16\nmin_object_size = 3\nmax_object_size = 6\n";

fn train_config(dir: &Path) -> String {
    format!(
        r#"
seeds = [0, 1]
steps = 4
batch_size = 2
warmup_steps = 1
distill_warmup = 1
out_dir = "{}"

[data]
train_count = 6
eval_count = 4

[data.scene]
{SCENE}
[model.encoder]
image_size = 16
hidden = 4
feature_dim = 8

[model.aggregator]
slots = 3
mlp_hidden = 16

[model.decoder]
blocks = 1
heads = 2
mlp_hidden = 16
draws = 1

[probe]
hidden = 4
steps = 5
"#,
        dir.join("runs").display()
    )
}

#[test]
fn help_and_version_succeed() {
    assert_eq!(code(&dias(&["--help"])), 0);
    assert_eq!(code(&dias(&["--version"])), 0);
    assert_eq!(code(&dias(&["train", "--help"])), 0);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&dias(&[])), 1);
    assert_eq!(code(&dias(&["bogus"])), 1);
    assert_eq!(code(&dias(&["gen-data", "--count", "x", "--out", "d"])), 1);
    assert_eq!(code(&dias(&["plot", "--out", "p"])), 1);
}

#[test]
fn bad_inputs_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing.toml");
    assert_eq!(code(&dias(&["train", "--config", missing.to_str().unwrap()])), 1);

    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "steps = 0\n").unwrap();
    let out = dias(&["train", "--config", bad.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("configuration error"));

    let data = tmp.path().join("data");
    let ckpt = tmp.path().join("nope");
    let args = ["eval", "--ckpt", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap()];
    assert_eq!(code(&dias(&args)), 1);

    let junk = tmp.path().join("junk.json");
    std::fs::write(&junk, "{}").unwrap();
    let out_dir = tmp.path().join("fig");
    let args = ["plot", "--out", out_dir.to_str().unwrap(), junk.to_str().unwrap()];
    assert_eq!(code(&dias(&args)), 1);
}

#[test]
fn numerical_failure_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let scene: SceneConfig = toml::from_str(SCENE).unwrap();
    let mut samples = generate_many(&scene, 0, 4).unwrap();
    for s in &mut samples {
        s.image[5] = f32::NAN;
    }
    let data = tmp.path().join("nan");
    write_dataset(&samples, &scene, &data).unwrap();
    let cfg = train_config(tmp.path()).replace(
        "[data]\n",
        &format!("[data]\ntrain_dir = \"{}\"\n", data.display()),
    );
    let path = tmp.path().join("train.toml");
    std::fs::write(&path, cfg).unwrap();
    let out = dias(&["train", "--config", path.to_str().unwrap()]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(tmp.path().join("runs/seed0/nan_dump.json").exists());
}

#[test]
fn full_pipeline_succeeds() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |s: &str| tmp.path().join(s).to_str().unwrap().to_string();
    std::fs::write(p("scene.toml"), SCENE).unwrap();
    std::fs::write(p("train.toml"), train_config(tmp.path())).unwrap();

    let gen = ["gen-data", "--config", &p("scene.toml"), "--count", "5", "--out", &p("eval"), "--seed", "9"];
    assert_eq!(code(&dias(&gen)), 0);
    assert!(tmp.path().join("eval/manifest.json").exists());
    // A training config is accepted as the scene config too.
    let gen = ["gen-data", "--config", &p("train.toml"), "--count", "2", "--out", &p("eval2")];
    assert_eq!(code(&dias(&gen)), 0);

    let out = dias(&["train", "--config", &p("train.toml")]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout.lines().count(), 2);

    let (c0, c1) = (p("runs/seed0"), p("runs/seed1"));
    let ev = ["eval", "--ckpt", &c0, "--ckpt", &c1, "--data", &p("eval"), "--out", &p("report.json")];
    assert_eq!(code(&dias(&ev)), 0);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(p("report.json")).unwrap()).unwrap();
    assert_eq!(report["runs"].as_array().unwrap().len(), 2);
    assert_eq!(report["summary"]["seeds"], serde_json::json!([0, 1]));

    let pr = ["probe", "--ckpt", &c0, "--data", &p("eval"), "--config", &p("train.toml")];
    let out = dias(&pr);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let probe: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(probe.as_array().unwrap().len(), 1);

    let pl = ["plot", "--out", &p("fig"), &p("report.json"), &p("report.json")];
    assert_eq!(code(&dias(&pl)), 0);
    let svg = std::fs::read(p("fig/figure.svg")).unwrap();
    assert_eq!(code(&dias(&pl)), 0);
    assert_eq!(svg, std::fs::read(p("fig/figure.svg")).unwrap());
    assert!(std::fs::read_to_string(p("fig/values.csv")).unwrap().starts_with("label,metric,mean,std\n"));

    // Data of another resolution is a user error.
    let gen = ["gen-data", "--count", "1", "--out", &p("big")];
    assert_eq!(code(&dias(&gen)), 0);
    let ev = ["eval", "--ckpt", &c0, "--data", &p("big")];
    assert_eq!(code(&dias(&ev)), 1);
}

#[test]
fn ablate_writes_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = train_config(tmp.path()).replace("seeds = [0, 1]", "seeds = [0]");
    let path = tmp.path().join("a.toml");
    std::fs::write(&path, cfg).unwrap();
    let out = dias(&["ablate", "--config", path.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 5);
    assert!(tmp.path().join("runs/ablation.json").exists());
}

#[test]
fn shipped_configs_are_valid() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let full = dias_core::trainer::TrainConfig::from_file(&dir.join("full.toml")).unwrap();
    assert_eq!(full, dias_core::trainer::TrainConfig { out_dir: "runs/full".into(), ..Default::default() });
    dias_core::trainer::TrainConfig::from_file(&dir.join("desk.toml")).unwrap();
    let scene: SceneConfig = toml::from_str(&std::fs::read_to_string(dir.join("scene.toml")).unwrap()).unwrap();
    assert_eq!(scene, SceneConfig::default());
}
