// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use hijacklens::habi::{HijackProfile, NO_INERT_WARNING};
use hijacklens::model::ToyScene;
use serde_json::Value;
use tempfile::TempDir;

fn hl(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hijacklens"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("HIJACKLENS_SEED")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn ok(out: &Path, args: &[&str]) -> Output {
    let o = hl(out, args);
    assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    o
}

/// Calibrated and ranked profile in a fresh directory.
fn ranked(extra: &[&str]) -> TempDir {
    let dir = TempDir::new().unwrap();
    let mut args = vec!["calibrate", "--scenes", "20"];
    args.extend_from_slice(extra);
    ok(dir.path(), &args);
    let mut args = vec!["rank-heads", "--scenes", "20"];
    args.extend_from_slice(extra);
    ok(dir.path(), &args);
    dir
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let dir = ranked(&["--trace"]);
    let p = dir.path();
    ok(p, &["eval", "--scenes", "10"]);
    ok(p, &["generate", "--scenes", "5", "--trace"]);
    for f in [
        "profile.json",
        "histogram.csv",
        "traces.csv",
        "heads.csv",
        "eval.json",
        "eval.csv",
        "generations.json",
    ] {
        assert!(p.join(f).is_file(), "missing {f}");
    }
    let profile = HijackProfile::load(&p.join("profile.json")).unwrap();
    assert_eq!(profile.k, Some(8));
    assert_eq!(profile.h_target.len(), 8);
    let heads = fs::read_to_string(p.join("heads.csv")).unwrap();
    assert_eq!(heads.lines().count(), 1 + 16);
    let gen = json(&p.join("generations.json"));
    assert!(gen["scenes"][0]["baseline_steps"].is_array());
}

#[test]
fn generation_before_ranking_is_a_profile_error() {
    let dir = TempDir::new().unwrap();
    ok(dir.path(), &["calibrate", "--scenes", "10"]);
    assert_eq!(code(&hl(dir.path(), &["generate", "--scenes", "2"])), 3);
    assert_eq!(code(&hl(dir.path(), &["eval", "--scenes", "2"])), 3);
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = ranked(&[]);
    let p = dir.path();
    assert_eq!(code(&hl(p, &["rank-heads", "--scenes", "5", "--k", "17"])), 2);
    assert_eq!(code(&hl(p, &["eval", "--scenes", "2", "--mode", "boost"])), 2);
    assert_eq!(code(&hl(p, &["eval", "--bogus"])), 2);
    assert_eq!(code(&hl(p, &["eval", "--profile", "/nonexistent/profile.json"])), 2);
    assert_eq!(code(&hl(p, &["calibrate", "--heads", "3"])), 2);
    let empty = TempDir::new().unwrap();
    let dir_arg = empty.path().to_str().unwrap();
    assert_eq!(code(&hl(p, &["eval", "--scene-dir", dir_arg])), 2);
    assert_eq!(code(&hl(p, &["make-scenes"])), 2);
}

#[test]
fn malformed_profiles_exit_with_three() {
    let dir = ranked(&[]);
    let path = dir.path().join("profile.json");
    let mut v = json(&path);
    v["unexpected"] = Value::from(1);
    fs::write(&path, serde_json::to_string(&v).unwrap()).unwrap();
    assert_eq!(code(&hl(dir.path(), &["eval", "--scenes", "2"])), 3);

    fs::write(&path, "{ not json").unwrap();
    assert_eq!(code(&hl(dir.path(), &["generate", "--scenes", "2"])), 3);
}

#[test]
fn seed_comes_from_the_environment() {
    let dir = TempDir::new().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_hijacklens"))
        .args(["calibrate", "--scenes", "10", "--out"])
        .arg(dir.path())
        .env("HIJACKLENS_SEED", "7")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    let profile = HijackProfile::load(&dir.path().join("profile.json")).unwrap();
    assert_eq!(profile.meta.seed, 7);
    assert_eq!(profile.meta.model.seed, 7);
}

#[test]
fn zero_alpha_generation_matches_the_baseline() {
    let dir = ranked(&[]);
    for mode in ["enhance", "compose"] {
        ok(dir.path(), &["generate", "--scenes", "8", "--alpha", "0", "--mode", mode]);
        let gen = json(&dir.path().join("generations.json"));
        for s in gen["scenes"].as_array().unwrap() {
            assert_eq!(s["baseline"], s["intervened"], "{mode}");
        }
    }
}

#[test]
fn penalty_only_path_runs() {
    let dir = ranked(&[]);
    let args = ["generate", "--scenes", "8", "--mode", "penalize", "--beta", "0.5", "--alpha", "0"];
    ok(dir.path(), &args);
    let gen = json(&dir.path().join("generations.json"));
    assert_eq!(gen["mode"], "penalize");
    assert_eq!(gen["beta"], 0.5);
    let out_of_range = ["generate", "--scenes", "2", "--mode", "penalize", "--beta", "1.5"];
    assert_eq!(code(&hl(dir.path(), &out_of_range)), 2);
}

#[test]
fn ranking_over_all_object_steps() {
    let dir = ranked(&["--no-gt", "--k", "3"]);
    let profile = HijackProfile::load(&dir.path().join("profile.json")).unwrap();
    assert_eq!(profile.h_target.len(), 3);
}

#[test]
fn scene_files_drive_the_pipeline() {
    let dir = ranked(&[]);
    let scenes = dir.path().join("scenes");
    let s = scenes.to_str().unwrap();
    ok(dir.path(), &["make-scenes", "--scenes", "6", "--scene-dir", s]);
    let mut files: Vec<_> = fs::read_dir(&scenes).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    assert_eq!(files.len(), 6);
    for f in &files {
        let text = fs::read_to_string(f).unwrap();
        assert_eq!(ToyScene::load(f).unwrap().to_json().unwrap(), text);
    }

    ok(dir.path(), &["eval", "--scene-dir", s]);
    let from_files = fs::read_to_string(dir.path().join("eval.json")).unwrap();
    ok(dir.path(), &["eval", "--scenes", "6"]);
    let generated = fs::read_to_string(dir.path().join("eval.json")).unwrap();
    assert_eq!(from_files, generated);
}

#[test]
fn tiny_calibration_warns_but_succeeds() {
    let dir = TempDir::new().unwrap();
    let o = ok(dir.path(), &["calibrate", "--scenes", "1"]);
    let profile = HijackProfile::load(&dir.path().join("profile.json")).unwrap();
    assert_eq!(profile.meta.warning.as_deref(), Some(NO_INERT_WARNING));
    assert!(String::from_utf8_lossy(&o.stderr).contains(NO_INERT_WARNING));
    assert_eq!(profile.tau_r, Some(1.0));
}
