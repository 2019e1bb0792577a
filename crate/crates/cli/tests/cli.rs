use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rrb_core::experiment::TrainedModel;
use rrb_core::fusion::FusionMode;
use rrb_core::nn::load_checkpoint;
use rrb_core::scene::{load_map_document, SceneMap};
use rrb_core::trajectory::{GaussianTrajectory, MultiModalPrediction};
use rrb_core::Vec2;

const SMALL: &str = r#"
[suite]
scenes = 9

[train]
epochs = 2
"#;

fn rrb(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rrb"))
        .current_dir(cwd)
        .env_remove("RRB_OUTPUT_DIR")
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("failed to launch rrb")
}

fn ok(cwd: &Path, args: &[&str]) -> String {
    let out = rrb(cwd, args);
    assert!(
        out.status.success(),
        "rrb {args:?} failed\nstdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(cwd: &Path, args: &[&str]) -> String {
    let out = rrb(cwd, args);
    assert!(!out.status.success(), "rrb {args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn workspace() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, SMALL).unwrap();
    (dir, cfg)
}

fn read_tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_writes_one_file_per_scene_and_is_reproducible() {
    let (dir, _) = workspace();
    let d = dir.path();
    let stdout = ok(d, &["gen-data", "--templates", "straight", "--scenes", "50", "--seed", "4", "--out-dir", "a"]);
    assert!(stdout.contains("50 scenes"), "{stdout}");
    assert_eq!(fs::read_dir(d.join("a/data/tracks")).unwrap().count(), 50);
    let doc = load_map_document(&d.join("a/data/map.json")).unwrap();
    assert_eq!(doc.scenes.len(), 50);
    assert!(doc.scenes.iter().all(|s| s.category.as_deref() == Some("straight")));

    ok(d, &["gen-data", "--templates", "straight", "--scenes", "50", "--seed", "4", "--out-dir", "b"]);
    assert_eq!(read_tree(&d.join("a")), read_tree(&d.join("b")));
    ok(d, &["gen-data", "--templates", "straight", "--scenes", "50", "--seed", "5", "--out-dir", "c"]);
    assert_ne!(read_tree(&d.join("a")), read_tree(&d.join("c")));
}

#[test]
fn bad_configuration_fails_with_the_key_named() {
    let (dir, _) = workspace();
    let d = dir.path();
    let err = fails(d, &["gen-data", "--templates", "roundabout", "--out-dir", "o"]);
    assert!(err.contains("templates") && err.contains("roundabout"), "{err}");
    assert!(!d.join("o").exists());

    fs::write(d.join("typo.toml"), "[train]\nepoch = 3\n").unwrap();
    let err = fails(d, &["--config", "typo.toml", "gen-data"]);
    assert!(err.contains("epoch"), "{err}");

    let err = fails(d, &["eval", "--out-dir", "o", "--pipelines", "kd1"]);
    assert!(err.contains("gen-data"), "{err}");
    let err = fails(d, &["eval", "--pipelines", "kd9"]);
    assert!(err.contains("kd9"), "{err}");
    let err = fails(d, &["train", "--fusion", "vi_fixed"]);
    assert!(err.contains("vi_fixed"), "{err}");
}

#[test]
fn output_directory_defaults_to_the_environment() {
    let (dir, cfg) = workspace();
    let d = dir.path();
    let out = Command::new(env!("CARGO_BIN_EXE_rrb"))
        .current_dir(d)
        .env("RRB_OUTPUT_DIR", d.join("from-env"))
        .args(["--config", cfg.to_str().unwrap(), "gen-data"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(d.join("from-env/data/map.json").is_file());
    ok(d, &["--config", cfg.to_str().unwrap(), "gen-data"]);
    assert!(d.join("rrb-output/data/map.json").is_file());
}

#[test]
fn baselines_evaluate_without_checkpoints() {
    let (dir, cfg) = workspace();
    let d = dir.path();
    let cfg = cfg.to_str().unwrap();
    ok(d, &["--config", cfg, "gen-data", "--seed", "2", "--scenes", "20"]);
    let table = ok(d, &["--config", cfg, "eval", "--pipelines", "lin,cv,kd1,kd2"]);
    for row in ["lin", "cv", "kd1", "kd2", "RV%"] {
        assert!(table.contains(row), "{table}");
    }
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("rrb-output/eval/metrics.json")).unwrap()).unwrap();
    assert_eq!(json["split"], "scene-generalization:curve");
    let kd1 = json["rows"].as_array().unwrap().iter().find(|r| r["pipeline"] == "kd1").unwrap();
    assert_eq!(kd1["overall"]["rv"], 0.0);

    ok(d, &["--config", cfg, "eval", "--pipelines", "kd1", "--scenario", "scene-generalization:straight"]);
    let text = fs::read_to_string(d.join("rrb-output/eval/metrics.txt")).unwrap();
    assert!(text.contains("scene-generalization:straight") && text.contains("[straight]"), "{text}");
    ok(d, &["--config", cfg, "eval", "--pipelines", "kd1", "--scenario", "random"]);
    let text = fs::read_to_string(d.join("rrb-output/eval/metrics.txt")).unwrap();
    assert!(text.starts_with("split: random"), "{text}");

    let err = fails(d, &["--config", cfg, "eval", "--pipelines", "kd1,rrb"]);
    assert!(err.contains("rrb") && err.contains("train"), "{err}");
}

#[test]
fn train_writes_checkpoints_that_round_trip() {
    let (dir, cfg) = workspace();
    let d = dir.path();
    let cfg = cfg.to_str().unwrap();
    ok(d, &["--config", cfg, "gen-data"]);
    ok(d, &["--config", cfg, "train", "--models", "rrb,rrb_m", "--modes", "2"]);
    let models = d.join("rrb-output/models");
    let curve = fs::read_to_string(models.join("rrb_loss.csv")).unwrap();
    assert_eq!(curve.lines().count(), 3, "{curve}");

    let path = models.join("rrb.ckpt");
    let trained = TrainedModel::load(&path).unwrap();
    let again = d.join("again.ckpt");
    trained.save(&again).unwrap();
    assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());

    // per-mode decoders on top of one set of shared encoders
    let names: Vec<String> = load_checkpoint(&models.join("rrb_m.ckpt"))
        .unwrap()
        .bundles
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    assert_eq!(names, ["history", "interaction", "kd", "decoder_0", "decoder_1"]);

    let table = ok(d, &["--config", cfg, "eval", "--pipelines", "kd1,rrb,rrb_m,rrb_m+mpc", "--modes", "2", "--jobs", "2"]);
    assert!(table.contains("rrb_m+mpc"), "{table}");
    let err = fails(d, &["--config", cfg, "eval", "--pipelines", "rrb_m", "--modes", "3"]);
    assert!(err.contains("checkpoint"), "{err}");
}

#[test]
fn fusion_flag_trains_the_simple_addition_variant() {
    let (dir, cfg) = workspace();
    let d = dir.path();
    let cfg = cfg.to_str().unwrap();
    ok(d, &["--config", cfg, "gen-data"]);
    ok(d, &["--config", cfg, "train", "--models", "rrb", "--fusion", "simple_add"]);
    let trained = TrainedModel::load(&d.join("rrb-output/models/rrb.ckpt")).unwrap();
    assert_eq!(trained.model.config.fusion.mode, FusionMode::SimpleAdd);
    ok(d, &["--config", cfg, "eval", "--pipelines", "rrb", "--fusion", "simple_add"]);
    let err = fails(d, &["--config", cfg, "eval", "--pipelines", "rrb"]);
    assert!(err.contains("checkpoint"), "{err}");
}

#[test]
fn full_runs_with_one_seed_are_bit_identical() {
    let (dir, cfg) = workspace();
    let d = dir.path();
    let cfg = cfg.to_str().unwrap();
    for out in ["r1", "r2"] {
        ok(d, &["--config", cfg, "--seed", "11", "--out-dir", out, "gen-data"]);
        ok(d, &["--config", cfg, "--seed", "11", "--out-dir", out, "train", "--models", "rrb"]);
        ok(d, &["--config", cfg, "--seed", "11", "--out-dir", out, "eval", "--pipelines", "kd1,rrb,rrb+mpc", "--jobs", "3"]);
    }
    assert_eq!(read_tree(&d.join("r1")), read_tree(&d.join("r2")));
}

fn parse_points(s: &str) -> Vec<Vec2> {
    s.split_whitespace()
        .map(|p| {
            let (x, y) = p.split_once(',').unwrap();
            Vec2::new(x.parse().unwrap(), y.parse().unwrap())
        })
        .collect()
}

/// Points of every polyline inside the `<g data-pipeline="name">` group.
fn drawn_points(svg: &str, pipeline: &str) -> Vec<Vec2> {
    let start = svg.find(&format!("data-pipeline=\"{pipeline}\"")).unwrap();
    let group = &svg[start..start + svg[start..].find("</g>").unwrap()];
    group
        .split("points=\"")
        .skip(1)
        .flat_map(|chunk| parse_points(&chunk[..chunk.find('"').unwrap()]))
        .collect()
}

#[test]
fn render_draws_predictions_in_world_coordinates() {
    let (dir, cfg) = workspace();
    let d = dir.path();
    let cfg = cfg.to_str().unwrap();
    ok(d, &["--config", cfg, "gen-data", "--templates", "straight"]);
    ok(d, &["--config", cfg, "predict", "--pipelines", "kd1,cv", "--scenario", "random"]);
    let preds = d.join("rrb-output/predictions.json");
    let mut file: serde_json::Value = serde_json::from_str(&fs::read_to_string(&preds).unwrap()).unwrap();
    let key = file["scenario"].as_str().unwrap().to_string();

    // an encoder-decoder style prediction drifting sideways off the road
    let kd1: MultiModalPrediction =
        serde_json::from_value(file["predictions"][0]["prediction"].clone()).unwrap();
    let drift: Vec<Vec2> = kd1.modes[0]
        .means
        .iter()
        .enumerate()
        .map(|(j, m)| *m + Vec2::new(0.0, 2.0 * (j + 1) as f64))
        .collect();
    let edn = MultiModalPrediction::single(GaussianTrajectory::with_constant_variance(drift, 1.0));
    file["predictions"]
        .as_array_mut()
        .unwrap()
        .push(serde_json::json!({"pipeline": "edn", "prediction": edn}));
    fs::write(&preds, serde_json::to_string(&file).unwrap()).unwrap();

    ok(d, &["--config", cfg, "render", "--predictions", preds.to_str().unwrap(), "--out", "fig.svg"]);
    ok(d, &["--config", cfg, "render", "--predictions", preds.to_str().unwrap(), "--out", "fig2.svg"]);
    let svg = fs::read_to_string(d.join("fig.svg")).unwrap();
    assert!(svg.starts_with("<?xml") && svg.contains("<svg xmlns=\"http://www.w3.org/2000/svg\""));
    assert!(svg.trim_end().ends_with("</svg>"));
    assert_eq!(svg, fs::read_to_string(d.join("fig2.svg")).unwrap());

    let scene = key.split('/').next().unwrap();
    let doc = load_map_document(&d.join("rrb-output/data/map.json")).unwrap();
    let map: SceneMap = doc.scene(scene).unwrap().to_map().unwrap();
    assert!(drawn_points(&svg, "kd1").iter().all(|p| map.is_drivable(*p)));
    let off = drawn_points(&svg, "edn");
    assert!(off.iter().any(|p| !map.is_drivable(*p)));
    assert_eq!(off.len(), 11);

    let err = fails(d, &["--config", cfg, "render", "--predictions", preds.to_str().unwrap(), "--out", "fig.png"]);
    assert!(err.contains("svg"), "{err}");
}
