use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const SPEC: &str = r#"
views = 2
frames = 4
image_size = 20
channels = 1
noise_sigma = 0.05

[[scenarios]]
name = "studio"
noise_scale = 1.0
occlusion = 0.0

[[scenarios]]
name = "outdoor"
noise_scale = 2.0
occlusion = 0.1
"#;

const TINY: &str = r#"
preset = "desk"

[model]
views = 2
frames = 2
lora_rank = 2
lora_alpha = 4.0
fusion_hidden = 16
fusion_heads = 2

[backbone]
image_size = 16
embed_dim = 16
depth = 1
heads = 2
mlp_ratio = 2
pretrain_frames = 4

[train]
epochs = 2
batch_size = 8
lr = 3e-3
"#;

fn skillformer(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_skillformer"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn workspace() -> TempDir {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("spec.toml"), SPEC).unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    let o = skillformer(dir.path(), &["gen-data", "--spec", "spec.toml", "--out", "d.skfd", "--n", "48", "--seed", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    dir
}

fn eval_json(dir: &Path, args: &[&str]) -> serde_json::Value {
    let mut all = vec!["eval", "--data", "d.skfd", "--json"];
    all.extend_from_slice(args);
    let o = skillformer(dir, &all);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let body: String = text.lines().filter(|l| !l.starts_with('#')).collect::<Vec<_>>().join("\n");
    serde_json::from_str(&body).unwrap()
}

#[test]
fn train_eval_merge_pipeline() {
    let dir = workspace();
    let p = dir.path();
    let o = skillformer(p, &["train", "--config", "tiny.toml", "--data", "d.skfd", "--out", "m.ckpt"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("# resolved config") && out.contains("rank = 2"), "{out}");

    let lines = std::fs::read_to_string(p.join("m.ckpt.metrics.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 2);
    for line in lines.lines() {
        let rec: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(rec["train_loss"].as_f64().unwrap().is_finite());
    }

    let report = stdout(&skillformer(p, &["eval", "--ckpt", "m.ckpt", "--data", "d.skfd"]));
    for needle in ["overall accuracy", "scenario", "confusion"] {
        assert!(report.contains(needle), "{report}");
    }

    let o = skillformer(p, &["merge", "--ckpt", "m.ckpt", "--out", "merged.ckpt"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let a = eval_json(p, &["--ckpt", "merged.ckpt"]);
    let b = eval_json(p, &["--ckpt", "m.ckpt", "--merged"]);
    let c = eval_json(p, &["--ckpt", "m.ckpt"]);
    for other in [&b, &c] {
        assert_eq!(a["confusion"], other["confusion"]);
        let gap = a["mean_loss"].as_f64().unwrap() - other["mean_loss"].as_f64().unwrap();
        assert!(gap.abs() < 1e-6, "{gap}");
        assert_eq!(a["overall_accuracy"], other["overall_accuracy"]);
    }
}

#[test]
fn training_is_reproducible_across_thread_settings() {
    let dir = workspace();
    let p = dir.path();
    for (out, extra) in [("a.ckpt", None), ("b.ckpt", Some("--sequential"))] {
        let mut args = vec!["train", "--config", "tiny.toml", "--data", "d.skfd", "--out", out];
        args.extend(extra);
        assert!(skillformer(p, &args).status.success());
    }
    assert_eq!(std::fs::read(p.join("a.ckpt")).unwrap(), std::fs::read(p.join("b.ckpt")).unwrap());
}

#[test]
fn preset_config_is_echoed() {
    let dir = workspace();
    let p = dir.path();
    std::fs::write(p.join("ee.toml"), "preset = \"EgoExos\"\n").unwrap();
    let o = skillformer(p, &["train", "--config", "ee.toml", "--data", "d.skfd", "--out", "x", "--dry-run"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    for needle in ["frames = 16", "rank = 64", "alpha = 128.0", "hidden = 2560", "lr = 0.00002"] {
        assert!(out.contains(needle), "missing {needle} in\n{out}");
    }
}

#[test]
fn gradcheck_passes_on_desk_config() {
    let dir = TempDir::new().unwrap();
    let o = skillformer(dir.path(), &["gradcheck", "--seed", "3"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("within tolerance"));
}

#[test]
fn oracle_reports_full_and_partial_visibility() {
    let dir = TempDir::new().unwrap();
    let all = stdout(&skillformer(dir.path(), &["oracle", "--m", "20000"]));
    assert!(all.contains("bayes accuracy 1.0000"), "{all}");
    let one = stdout(&skillformer(dir.path(), &["oracle", "--views", "2", "--m", "20000"]));
    assert!(one.contains("visible views [2] of 5"), "{one}");
}

#[test]
fn errors_map_to_distinct_exit_codes() {
    let dir = workspace();
    let p = dir.path();
    std::fs::write(p.join("unknown.toml"), "preset = \"desk\"\n[train]\nepochz = 3\n").unwrap();
    let o = skillformer(p, &["train", "--config", "unknown.toml", "--data", "d.skfd", "--out", "x"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));

    std::fs::write(p.join("preset.toml"), "preset = \"huge\"\n").unwrap();
    let o = skillformer(p, &["train", "--config", "preset.toml", "--data", "d.skfd", "--out", "x"]);
    assert_eq!(o.status.code(), Some(3));

    let o = skillformer(p, &["train", "--config", "tiny.toml", "--data", "spec.toml", "--out", "x"]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    let o = skillformer(p, &["eval", "--ckpt", "missing.ckpt", "--data", "d.skfd"]);
    assert_eq!(o.status.code(), Some(4));

    std::fs::write(p.join("hot.toml"), TINY.replace("lr = 3e-3", "lr = 1e200")).unwrap();
    let o = skillformer(p, &["train", "--config", "hot.toml", "--data", "d.skfd", "--out", "x"]);
    assert_eq!(o.status.code(), Some(5), "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"));

    let o = skillformer(p, &["--threads", "0", "oracle"]);
    assert_eq!(o.status.code(), Some(3));
}
