use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use rd_binn_cli::pipeline::{self, Context};
use rd_binn_cli::{CliError, RunConfig};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_rd-binn"));
    c.env("RUST_LOG", "warn");
    c
}

/// A run small enough to finish in seconds.
fn tiny_overrides() -> Vec<String> {
    [
        r#"input.synth.domain={"x1_min":0,"x1_max":0.6,"x2_min":0,"x2_max":0.5,"t_min":0,"t_max":0.5}"#,
        r#"input.synth.ic={"background":4,"bumps":[{"x1":0.2,"x2":0.2,"sigma":0.15,"amplitude":20}],"voids":[]}"#,
        "input.synth.n_frames=3",
        "train.u_hidden=[6,6]",
        "train.rate_hidden=[3]",
        "train.max_epochs=15",
        "train.n_collocation=40",
        "patience_sweep=[3,6]",
        "n_splits=2",
        "sr.population=24",
        "sr.generations=4",
        "sr.repeats=2",
        "ensemble_grid_points=16",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn write_config(dir: &Path, extra: &[&str]) -> PathBuf {
    let mut o = tiny_overrides();
    o.extend(extra.iter().map(|s| s.to_string()));
    let cfg = RunConfig::load(None, &o).unwrap();
    let p = dir.join("config.json");
    fs::write(&p, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    p
}

fn csv_files(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "csv") {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn run_all_is_reproducible_and_complete() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &[]);
    for out in ["a", "b"] {
        let st = bin()
            .args(["run-all", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(dir.path().join(out))
            .status()
            .unwrap();
        assert!(st.success());
    }
    let a = csv_files(&dir.path().join("a"));
    let b = csv_files(&dir.path().join("b"));
    assert!(a.len() > 10);
    assert_eq!(a, b);

    let counts = fs::read_to_string(dir.path().join("a/eval/counts.csv")).unwrap();
    let mut lines = counts.lines();
    assert_eq!(lines.next(), Some("t,N_data,N_u,N_fwd,N_SR"));
    for l in lines {
        assert!(l.split(',').all(|c| !c.is_empty()), "{l}");
    }
    for k in 0..2 {
        for p in [3, 6] {
            assert!(dir.path().join(format!("a/train/p{p}/split{k}/u.json")).is_file());
        }
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("a/train/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["stage"], "train");
    assert!(manifest["outputs"].as_array().unwrap().len() >= 20);
    assert!(manifest["schemes"]["residual_form"].is_string());
}

#[test]
fn stages_refuse_to_overwrite_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &[]);
    let out = dir.path().join("r");
    let run = |force: bool| {
        let mut c = bin();
        c.args(["synth", "--config"]).arg(&cfg).arg("--out").arg(&out);
        if force {
            c.arg("--force");
        }
        c.output().unwrap()
    };
    assert!(run(false).status.success());
    let again = run(false);
    assert_eq!(again.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    assert!(run(true).status.success());
}

#[test]
fn zero_noise_gives_identical_clean_and_noisy_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &["input.synth.noise.omega_fraction=0"]);
    let out = dir.path().join("r");
    assert!(bin().args(["synth", "--config"]).arg(&cfg).arg("--out").arg(&out).status().unwrap().success());
    assert_eq!(fs::read(out.join("synth/clean.csv")).unwrap(), fs::read(out.join("synth/noisy.csv")).unwrap());
    assert!(out.join("synth/manifest.json").is_file());
}

#[test]
fn malformed_expression_reports_its_position() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &[]);
    let o = bin()
        .args(["synth", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("r"))
        .args(["--set", "input.synth.model.diffusion=exp("])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("position 4"));
}

#[test]
fn unknown_config_key_exits_with_two() {
    let o = bin().args(["synth", "--set", "nonsense=1", "--out"]).arg(tempfile::tempdir().unwrap().path()).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn exploding_diffusivity_is_a_numeric_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &["input.synth.model.diffusion=1e12"]);
    let o = bin().args(["synth", "--config"]).arg(&cfg).arg("--out").arg(dir.path().join("r")).output().unwrap();
    assert_eq!(o.status.code(), Some(3));
}

fn points_config(dir: &Path, horizon: f64, n_frames: usize, with_points: bool) -> RunConfig {
    let times: Vec<f64> = (0..n_frames).map(|s| horizon * s as f64 / (n_frames - 1) as f64).collect();
    let mut csv = String::from("x1,x2,t\n");
    if with_points {
        for (s, t) in times.iter().enumerate() {
            for k in 0..20 {
                csv.push_str(&format!("{},{},{t}\n", 0.05 + 0.07 * k as f64, 0.03 + 0.05 * ((k + s) % 20) as f64));
            }
        }
    }
    fs::write(dir.join("points.csv"), csv).unwrap();
    let input = serde_json::json!({"points": {
        "path": "points.csv",
        "domain": {"x1_min": 0.0, "x1_max": 1.5, "x2_min": 0.0, "x2_max": 1.1, "t_min": 0.0, "t_max": horizon},
        "frame_times": times,
    }});
    let mut v = serde_json::to_value(RunConfig::default()).unwrap();
    v["input"] = input;
    let p = dir.join("config.json");
    fs::write(&p, v.to_string()).unwrap();
    RunConfig::load(Some(&p), &[]).unwrap()
}

#[test]
fn replicate_shaped_clouds_bin_to_the_reported_tensors() {
    for (horizon, frames) in [(2.0, 9), (2.75, 12), (3.75, 16)] {
        let dir = tempfile::tempdir().unwrap();
        let cfg = points_config(dir.path(), horizon, frames, true);
        let ctx = Context::new(cfg, dir.path().join("out"), 1, false).unwrap();
        pipeline::cmd_preprocess(&ctx).unwrap();
        let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("out/data/density.meta.json")).unwrap()).unwrap();
        assert_eq!((meta["n_x1"].as_u64(), meta["n_x2"].as_u64()), (Some(15), Some(11)));
        assert_eq!(meta["times"].as_array().unwrap().len(), frames);
    }
}

#[test]
fn empty_point_input_gives_zero_tensors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = points_config(dir.path(), 2.0, 9, false);
    let ctx = Context::new(cfg, dir.path().join("out"), 1, false).unwrap();
    pipeline::cmd_preprocess(&ctx).unwrap();
    let csv = fs::read_to_string(dir.path().join("out/data/density.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 15 * 11 * 9);
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",0")));
}

#[test]
fn out_of_domain_point_is_listed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = points_config(dir.path(), 2.0, 9, false);
    fs::write(dir.path().join("points.csv"), "x1,x2,t\n0.5,0.5,0\n9.0,0.5,0\n").unwrap();
    let ctx = Context::new(cfg, dir.path().join("out"), 1, false).unwrap();
    match pipeline::cmd_preprocess(&ctx) {
        Err(CliError::Core(e)) => assert!(e.to_string().contains("#1 (9, 0.5, 0)"), "{e}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn patience_order_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, sweep: &str| {
        let mut o = tiny_overrides();
        o.push(format!("patience_sweep={sweep}"));
        let cfg = RunConfig::load(None, &o).unwrap();
        let ctx = Context::new(cfg, dir.path().join(name), 1, false).unwrap();
        pipeline::cmd_synth(&ctx).unwrap();
        pipeline::cmd_preprocess(&ctx).unwrap();
        pipeline::cmd_train(&ctx).unwrap();
        csv_files(&dir.path().join(name).join("train"))
    };
    assert_eq!(run("a", "[3,6]"), run("b", "[6,3]"));
}

#[test]
fn evaluate_without_symbolic_models_omits_that_column() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::load(None, &tiny_overrides()).unwrap();
    let ctx = Context::new(cfg, dir.path().to_path_buf(), 1, false).unwrap();
    pipeline::cmd_synth(&ctx).unwrap();
    pipeline::cmd_preprocess(&ctx).unwrap();
    pipeline::cmd_train(&ctx).unwrap();
    pipeline::cmd_evaluate(&ctx).unwrap();
    let curves = pipeline::read_counts(&ctx).unwrap();
    assert!(curves.data.is_some() && curves.net.is_some() && curves.fwd.is_some());
    assert!(curves.sr.is_none());
}

#[test]
fn data_only_evaluation_has_empty_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::load(None, &tiny_overrides()).unwrap();
    let ctx = Context::new(cfg, dir.path().to_path_buf(), 1, false).unwrap();
    pipeline::cmd_synth(&ctx).unwrap();
    pipeline::cmd_preprocess(&ctx).unwrap();
    pipeline::cmd_evaluate(&ctx).unwrap();
    let m = pipeline::read_metrics(&ctx).unwrap();
    assert_eq!(m.versus_data, Default::default());
    assert_eq!(pipeline::read_counts(&ctx).unwrap().times.len(), 3);
}

#[test]
fn single_repeat_selects_the_sole_candidate() {
    let dir = tempfile::tempdir().unwrap();
    let mut o = tiny_overrides();
    o.push("sr.repeats=1".into());
    let cfg = RunConfig::load(None, &o).unwrap();
    let ctx = Context::new(cfg, dir.path().to_path_buf(), 1, false).unwrap();
    pipeline::cmd_synth(&ctx).unwrap();
    pipeline::cmd_preprocess(&ctx).unwrap();
    pipeline::cmd_train(&ctx).unwrap();
    pipeline::cmd_ensemble_sr(&ctx).unwrap();
    let g = pipeline::read_symbolic(&ctx, rd_binn_core::ensemble::CurveKind::Growth).unwrap();
    assert_eq!((g.frequency, g.n_candidates), (1, 1));
    let rows = fs::read_to_string(dir.path().join("sr/growth_candidates.csv")).unwrap();
    assert_eq!(rows.lines().count(), 2);
    assert!(rows.contains(&g.expr.to_string()));
}
