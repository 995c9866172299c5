use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use st_guidance::geometry::{CameraIntrinsics, DepthMap};
use st_guidance::raster;
use st_guidance::trajectory::{self, ExtractParams, Track2D};
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_st-guidance");

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn fx(rel: &str) -> String {
    fixtures().join(rel).to_string_lossy().into_owned()
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("ST_GUIDANCE_CONFIG")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let o = run(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    o
}

/// Exit code plus the parsed single-line stderr error.
fn fails(args: &[&str]) -> (i32, Value) {
    let o = run(args);
    let err = String::from_utf8_lossy(&o.stderr);
    let line = err.lines().last().unwrap_or_default();
    assert_eq!(err.trim().lines().count(), 1, "stderr: {err}");
    let v: Value = serde_json::from_str(line).unwrap_or_else(|e| panic!("{e}: {err}"));
    let code = o.status.code().unwrap();
    assert_eq!(v["code"], code);
    (code, v)
}

fn p(path: &Path) -> String {
    path.to_string_lossy().into_owned()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Relative path → bytes for every file under `dir`.
fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

fn extract_args(out: &Path) -> Vec<String> {
    vec![
        "extract".into(),
        "--track".into(),
        fx("extract/track.json"),
        "--depth".into(),
        fx("extract/depth.png"),
        "--intrinsics".into(),
        fx("extract/intrinsics.json"),
        "--out".into(),
        p(out),
    ]
}

fn strs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

// ---------------------------------------------------------------------------
// extract / lift

#[test]
fn extract_matches_golden_and_library() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("t.json");
    ok(&strs(&extract_args(&out)));
    assert_eq!(
        fs::read(&out).unwrap(),
        fs::read(fixtures().join("extract/expected.json")).unwrap()
    );

    let k = raster::read_intrinsics(&fixtures().join("extract/intrinsics.json")).unwrap();
    let d = raster::read_depth(&fixtures().join("extract/depth.png"), 1000.0).unwrap();
    let t: Track2D = serde_json::from_str(&fs::read_to_string(fixtures().join("extract/track.json")).unwrap()).unwrap();
    let native = trajectory::extract(&t, &d, &k, &ExtractParams::default()).unwrap();
    let file = read_json(&out);
    assert_eq!(file["waypoints"], serde_json::to_value(&native.waypoints).unwrap());
    assert_eq!(file["trace"]["keypoints"], 8);
    assert_eq!(file["trace"]["degree_used"], 2);
}

#[test]
fn extract_errors_map_to_exit_codes() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("t.json");

    let mut args = extract_args(&out);
    args[2] = p(&dir.path().join("missing.json"));
    let (code, v) = fails(&strs(&args));
    assert_eq!(code, 2);
    assert_eq!(v["error"], "input");

    let flat = dir.path().join("zero.png");
    raster::write_depth_png(&flat, &DepthMap::filled(64, 48, 0.0), 1000.0).unwrap();
    let mut args = extract_args(&out);
    args[4] = p(&flat);
    let (code, v) = fails(&strs(&args));
    assert_eq!(code, 4, "{v}");

    let bad_k = dir.path().join("k.json");
    fs::write(&bad_k, r#"{"fx": -1, "fy": 60, "cx": 32, "cy": 24, "width": 64, "height": 48}"#).unwrap();
    let mut args = extract_args(&out);
    args[6] = p(&bad_k);
    assert_eq!(fails(&strs(&args)).0, 2);
    assert!(!out.exists());
}

#[test]
fn nonstandard_keypoint_count_needs_opt_in() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("t.json");
    let mut args = extract_args(&out);
    args.extend(["--k".into(), "7".into()]);
    let (code, v) = fails(&strs(&args));
    assert_eq!(code, 2);
    assert!(v["message"].as_str().unwrap().contains("--allow-nonstandard"));
    args.push("--allow-nonstandard".into());
    ok(&strs(&args));
    assert_eq!(read_json(&out)["waypoints"].as_array().unwrap().len(), 7);
}

#[test]
fn config_file_sits_under_flags() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("t.json");
    let cfg = dir.path().join("run.conf");
    fs::write(&cfg, "# loose threshold\nepsilon = 100\n").unwrap();

    let mut args = vec!["--config".to_string(), p(&cfg)];
    args.extend(extract_args(&out));
    ok(&strs(&args));
    assert_eq!(read_json(&out)["params"]["epsilon"], 100.0);

    args.extend(["--epsilon".into(), "7.5".into()]);
    ok(&strs(&args));
    assert_eq!(read_json(&out)["params"]["epsilon"], 7.5);

    // environment default
    let o = Command::new(BIN)
        .args(strs(&extract_args(&out)))
        .env("ST_GUIDANCE_CONFIG", &cfg)
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(read_json(&out)["params"]["epsilon"], 100.0);

    fs::write(&cfg, "radius = 3\n").unwrap();
    let mut args = vec!["--config".to_string(), p(&cfg)];
    args.extend(extract_args(&out));
    let (code, v) = fails(&strs(&args));
    assert_eq!(code, 2);
    assert!(v["message"].as_str().unwrap().contains("unknown key"));
}

#[test]
fn usage_errors_are_json() {
    let (code, v) = fails(&["extract", "--bogus"]);
    assert_eq!(code, 2);
    assert!(v["message"].as_str().unwrap().starts_with("usage:"));
    let help = ok(&["extract", "--help"]);
    let text = String::from_utf8_lossy(&help.stdout);
    for flag in ["--track", "--depth", "--intrinsics", "--out", "--epsilon", "--k", "--allow-nonstandard", "--config"] {
        assert!(text.contains(flag), "{flag} missing from help");
    }
}

#[test]
fn lift_uses_anchor_depths() {
    let dir = TempDir::new().unwrap();
    let traj = dir.path().join("traj.json");
    let anchor = dir.path().join("anchor.json");
    let out = dir.path().join("lifted.json");
    // thousand-scale points; the first maps to pixel (16, 24), depth 0.832
    fs::write(&traj, "[[250,500],[300,500],[350,480],[400,460],[450,440],[500,420],[550,400],[600,380]]").unwrap();
    fs::write(
        &anchor,
        r#"{"d_start": 0.832, "offsets": [0.01, 0.02, 0.03, 0.04, 0.05, 0.06, 0.07]}"#,
    )
    .unwrap();
    let args = [
        "lift",
        "--traj2d",
        &p(&traj),
        "--thousand",
        "--anchor",
        &p(&anchor),
        "--depth",
        &fx("extract/depth.png"),
        "--intrinsics",
        &fx("extract/intrinsics.json"),
        "--out",
        &p(&out),
    ];
    ok(&args);
    let v = read_json(&out);
    let z: Vec<f64> = v["waypoints"]
        .as_array()
        .unwrap()
        .iter()
        .map(|w| w[2].as_f64().unwrap())
        .collect();
    let offsets = [0.01, 0.02, 0.03, 0.04, 0.05, 0.06, 0.07];
    assert_eq!(z[0], 0.832);
    for i in 1..8 {
        assert_eq!(z[i], 0.832 + offsets[i - 1]);
    }
    let first = fs::read(&out).unwrap();
    ok(&args);
    assert_eq!(fs::read(&out).unwrap(), first);

    fs::write(&anchor, r#"{"d_start": 1.5, "offsets": [0, 0, 0, 0, 0, 0, 0]}"#).unwrap();
    assert_eq!(fails(&args).0, 2);
}

// ---------------------------------------------------------------------------
// augment

fn augment_args(out: &Path, guidance: &str, mode: &str) -> Vec<String> {
    let mut v: Vec<String> = vec![
        "augment".into(),
        "--rgb".into(),
        fx("augment/rgb.png"),
        "--depth".into(),
        fx("augment/depth.png"),
        "--intrinsics".into(),
        fx("augment/intrinsics.json"),
        "--guidance".into(),
        guidance.into(),
        "--out-dir".into(),
        p(out),
        "--mode".into(),
        mode.into(),
    ];
    for id in ["alpha", "beta", "gamma"] {
        v.push("--mask".into());
        v.push(format!("{id}={}", fx(&format!("augment/mask_{id}.png"))));
    }
    v
}

#[test]
fn augment_matches_golden() {
    let dir = TempDir::new().unwrap();
    ok(&strs(&augment_args(dir.path(), &fx("augment/guidance.json"), "finetuned")));
    let got = tree(dir.path());
    let want = tree(&fixtures().join("augment/expected"));
    assert_eq!(got.keys().collect::<Vec<_>>(), want.keys().collect::<Vec<_>>());
    for (name, bytes) in &want {
        assert!(got[name] == *bytes, "{name} differs from golden");
    }
}

#[test]
fn frozen_mode_skips_overlay_and_full_relevance_is_identity() {
    let dir = TempDir::new().unwrap();
    let (fine, frozen) = (dir.path().join("fine"), dir.path().join("frozen"));
    ok(&strs(&augment_args(&fine, &fx("augment/guidance.json"), "finetuned")));
    ok(&strs(&augment_args(&frozen, &fx("augment/guidance.json"), "frozen")));
    let a = raster::read_rgb(&fine.join("rgb.png")).unwrap();
    let b = raster::read_rgb(&frozen.join("rgb.png")).unwrap();
    assert_ne!(a, b);
    // frozen output keeps the original pixels of the relevant objects
    let orig = raster::read_rgb(&fixtures().join("augment/rgb.png")).unwrap();
    assert_eq!(b.get_pixel(10, 22), orig.get_pixel(10, 22));
    assert_ne!(b.get_pixel(52, 26), orig.get_pixel(52, 26));
    assert_eq!(fs::read(fine.join("depth.f32")).unwrap(), fs::read(frozen.join("depth.f32")).unwrap());

    let mut g = read_json(&fixtures().join("augment/guidance.json"));
    g["relevant_ids"] = serde_json::json!(["alpha", "beta", "gamma"]);
    let gp = dir.path().join("all.json");
    fs::write(&gp, g.to_string()).unwrap();
    let all = dir.path().join("all");
    ok(&strs(&augment_args(&all, &p(&gp), "frozen")));
    assert_eq!(raster::read_rgb(&all.join("rgb.png")).unwrap(), orig);
    let d_in = raster::read_depth(&fixtures().join("augment/depth.png"), 1000.0).unwrap();
    let d_out = raster::read_depth_f32(&all.join("depth.f32")).unwrap();
    assert_eq!(d_in, d_out);
}

#[test]
fn tube_shape_switch_from_config_or_flag() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("c.conf");
    fs::write(&cfg, "tube_shape = balls\n").unwrap();
    let out = dir.path().join("cfg");
    let mut args = augment_args(&out, &fx("augment/guidance.json"), "finetuned");
    args.extend(["--config".into(), p(&cfg)]);
    ok(&strs(&args));
    assert_eq!(read_json(&out.join("report.json"))["params"]["tube_shape"], "ball_union");

    let out = dir.path().join("flag");
    let mut args = augment_args(&out, &fx("augment/guidance.json"), "finetuned");
    args.extend(["--config".into(), p(&cfg), "--tube-shape".into(), "capsule".into()]);
    ok(&strs(&args));
    assert_eq!(read_json(&out.join("report.json"))["params"]["tube_shape"], "capsule_chain");

    fs::write(&cfg, "tube_shape = cone\n").unwrap();
    let mut args = augment_args(&dir.path().join("bad"), &fx("augment/guidance.json"), "finetuned");
    args.extend(["--config".into(), p(&cfg)]);
    assert_eq!(fails(&strs(&args)).0, 2);
}

#[test]
fn augment_rejects_unknown_instances() {
    let dir = TempDir::new().unwrap();
    let mut g = read_json(&fixtures().join("augment/guidance.json"));
    g["relevant_ids"] = serde_json::json!(["delta"]);
    let gp = dir.path().join("g.json");
    fs::write(&gp, g.to_string()).unwrap();
    let (code, v) = fails(&strs(&augment_args(&dir.path().join("o"), &p(&gp), "frozen")));
    assert_eq!(code, 2);
    assert!(v["message"].as_str().unwrap().contains("delta"));
}

// ---------------------------------------------------------------------------
// gen-dataset

const INFO: &str = r#"{
  "task_description": "Pouring Water",
  "action_descriptions": [{
    "frame_range": {"start_frame": "frame1", "end_frame": "frame8"},
    "left_description": {
      "action_description": "Pick up the coffee goblet",
      "coordinate_description": {
        "coordinate_0": {
          "text": "Pick up the coffee goblet",
          "image_coordinates": [417, 170],
          "cartesian_coordinates": [-0.031, -0.115, 0.674, 0.153, 0.013, 0.633]
        }
      }
    }
  }],
  "parameter_data": {"camera_intrinsics": "[[427.17, ...]]"}
}"#;

fn video_root(variation: &str) -> TempDir {
    let dir = TempDir::new().unwrap();
    let v = dir.path().join("data/0001");
    fs::create_dir_all(&v).unwrap();
    fs::write(v.join("info.json"), INFO).unwrap();
    let k = CameraIntrinsics::new(427.17, 427.17, 436.647, 242.885, 848, 480).unwrap();
    fs::write(v.join("intrinsics.json"), serde_json::to_string(&k).unwrap()).unwrap();
    fs::write(
        v.join("meta.json"),
        format!(r#"{{"task": "close_jar", "variation": "{variation}"}}"#),
    )
    .unwrap();
    dir
}

#[test]
fn gen_dataset_from_reference_annotation() {
    let root = video_root("red");
    let out = TempDir::new().unwrap();
    ok(&["gen-dataset", "--root", &p(root.path()), "--out", &p(out.path()), "--split", "bundled"]);
    let m = read_json(&out.path().join("manifest.json"));
    assert!(m["counts"]["pointing_2d"].as_u64().unwrap() >= 1, "{m}");
    assert_eq!(m["split_counts"]["pointing_2d"]["seen"], m["counts"]["pointing_2d"]);
    assert!(m["params"]["dead_zone"].is_number());
    let shard = fs::read_to_string(out.path().join("seen/pointing_2d_0000.jsonl")).unwrap();
    let s: Value = serde_json::from_str(shard.lines().next().unwrap()).unwrap();
    assert_eq!(s["messages"][1]["content"], "[492, 354]");
}

#[test]
fn gen_dataset_planning_only_gives_sentinels() {
    let root = video_root("red");
    let out = TempDir::new().unwrap();
    ok(&["gen-dataset", "--root", &p(root.path()), "--out", &p(out.path()), "--kinds", "planning", "--per-file"]);
    let m = read_json(&out.path().join("manifest.json"));
    assert_eq!(m["counts"].as_object().unwrap().keys().collect::<Vec<_>>(), vec!["planning_4d"]);
    let answers: Vec<String> = tree(out.path())
        .iter()
        .filter(|(k, _)| k.starts_with("planning_4d_"))
        .map(|(_, b)| {
            let v: Value = serde_json::from_slice(b).unwrap();
            v["messages"][1]["content"].as_str().unwrap().to_string()
        })
        .collect();
    assert!(answers.iter().filter(|a| *a == "none").count() >= 1, "{answers:?}");
}

#[test]
fn gen_dataset_unknown_variation_exits_2() {
    let root = video_root("plaid");
    let out = TempDir::new().unwrap();
    let (code, v) = fails(&["gen-dataset", "--root", &p(root.path()), "--out", &p(out.path()), "--split", "bundled"]);
    assert_eq!(code, 2);
    assert!(v["message"].as_str().unwrap().contains("plaid"));
    let (code, _) = fails(&["gen-dataset", "--root", &p(&root.path().join("nope")), "--out", &p(out.path())]);
    assert_eq!(code, 2);
}

// ---------------------------------------------------------------------------
// eval

#[test]
fn eval_file_pairs() {
    let dir = TempDir::new().unwrap();
    let w = |name: &str, text: &str| {
        let path = dir.path().join(name);
        fs::write(&path, text).unwrap();
        p(&path)
    };
    let t = w("t.json", "[[[1,2],[3,4],[5,6],[7,8],[9,10],[11,12],[13,14],[15,16]]]");
    let o = ok(&["eval", "--kind", "trajectory", "--pred", &t, "--gt", &t]);
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["report"]["sections"]["trajectory"]["rmse"], 0.0);
    assert_eq!(v["report"]["sections"]["trajectory"]["mae"], 0.0);

    // 3D, single trajectory per file: offsets 3-4-0 on every point
    let a = w("a.json", "[[0,0,0],[1,0,0]]");
    let b = w("b.json", "[[3,4,0],[4,4,0]]");
    let o = ok(&["eval", "--kind", "trajectory", "--pred", &a, "--gt", &b]);
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["report"]["sections"]["trajectory"]["rmse"], 5.0);

    // |0.119 - 0.10| = 0.019 <= 0.02 counts; |0.5 - 0.4| = 0.1 > 0.08 does not
    let pd = w("pd.json", "[0.119, 0.5]");
    let gd = w("gd.json", "[0.10, 0.4]");
    let out = dir.path().join("r.json");
    ok(&["eval", "--kind", "depth", "--pred", &pd, "--gt", &gd, "--out", &p(&out)]);
    let s = &read_json(&out)["report"]["sections"]["depth"];
    assert_eq!(s["ratio_accuracy"], 0.5);
    assert!((s["mad_cm"].as_f64().unwrap() - 5.95).abs() < 1e-12);

    let short = w("short.json", "[0.1]");
    assert_eq!(fails(&["eval", "--kind", "depth", "--pred", &short, "--gt", &gd]).0, 2);

    let pts = w("pts.json", "[[0,0],[10,0]]");
    let (code, v) = fails(&["eval", "--kind", "pointing", "--pred", &pts, "--gt", &pts]);
    assert_eq!(code, 2);
    assert!(v["message"].as_str().unwrap().contains("--threshold"));
    let o = ok(&["eval", "--kind", "pointing", "--pred", &pts, "--gt", &pts, "--threshold", "5"]);
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["report"]["sections"]["pointing"]["sr"], 1.0);
    assert_eq!(v["params"]["threshold"], 5.0);
}

#[test]
fn eval_records() {
    let dir = TempDir::new().unwrap();
    let rec = dir.path().join("r.jsonl");
    fs::write(
        &rec,
        [
            r#"{"kind": "episode", "seed": 0, "success": true}"#,
            r#"{"kind": "episode", "seed": 1, "success": false}"#,
            r#"{"kind": "pointing_box", "pred": [5, 5], "gt_box": [0, 0, 10, 10]}"#,
        ]
        .join("\n"),
    )
    .unwrap();
    let out = dir.path().join("o.json");
    ok(&["eval", "--records", &p(&rec), "--out", &p(&out)]);
    let first = fs::read(&out).unwrap();
    let v = read_json(&out);
    assert_eq!(v["report"]["sections"]["success"]["mean"], 50.0);
    assert_eq!(v["report"]["sections"]["pointing"]["box_hit_rate"], 1.0);
    ok(&["eval", "--records", &p(&rec), "--out", &p(&out)]);
    assert_eq!(fs::read(&out).unwrap(), first);

    fs::write(&rec, r#"{"kind": "pointing", "pred": [1, 1], "gt": [1, 1]}"#).unwrap();
    assert_eq!(fails(&["eval", "--records", &p(&rec)]).0, 2);
}

// ---------------------------------------------------------------------------
// simulate

#[test]
fn simulate_mock_suite_and_rerun() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let args = |out: &Path| {
        vec![
            "simulate".to_string(),
            "--scenario".into(),
            "pick_place".into(),
            "--scenario".into(),
            "chain3".into(),
            "--seeds".into(),
            "0..4".into(),
            "--out".into(),
            p(out),
        ]
    };
    ok(&strs(&args(&a)));
    ok(&strs(&args(&b)));
    assert_eq!(tree(&a), tree(&b));
    let r = read_json(&a.join("report.json"));
    for rep in r["reports"].as_array().unwrap() {
        assert_eq!(rep["stats"]["mean"], 100.0, "{rep}");
    }
    assert_eq!(r["scenarios"][0]["replan_interval"], 5);
    assert!(a.join("traces/chain3_seed3.json").is_file());

    let c = dir.path().join("c");
    let mut flat = args(&c);
    flat.extend(["--no-stage-loop".into(), "--replan".into(), "2".into()]);
    ok(&strs(&flat));
    let r = read_json(&c.join("report.json"));
    assert_eq!(r["reports"][1]["stats"]["mean"], 0.0);
    assert_eq!(r["scenarios"][1]["replan_interval"], 2);
}

#[test]
fn simulate_exec_plugins_match_mock() {
    let dir = TempDir::new().unwrap();
    let (mock, exec) = (dir.path().join("mock"), dir.path().join("exec"));
    let base = |out: &Path| {
        vec![
            "simulate".to_string(),
            "--scenario".into(),
            "disturbance".into(),
            "--seeds".into(),
            "0,1".into(),
            "--replan".into(),
            "1".into(),
            "--out".into(),
            p(out),
        ]
    };
    ok(&strs(&base(&mock)));
    let mut args = base(&exec);
    args.extend([
        "--planner".into(),
        format!("exec:{BIN} plan-server"),
        "--policy".into(),
        format!("exec:{BIN} act-server"),
    ]);
    ok(&strs(&args));
    for seed in [0, 1] {
        let name = format!("traces/disturbance_seed{seed}.json");
        assert_eq!(fs::read(mock.join(&name)).unwrap(), fs::read(exec.join(&name)).unwrap());
    }
    assert!(exec.join("plugin_io/disturbance_seed0/planner/plan_0000_rgb.png").is_file());
}

#[test]
fn simulate_protocol_violations_exit_5() {
    let dir = TempDir::new().unwrap();
    let out = p(&dir.path().join("o"));
    // cat echoes the hello but then echoes the plan request back
    let (code, v) = fails(&["simulate", "--scenario", "pick_place", "--out", &out, "--planner", "exec:/bin/cat"]);
    assert_eq!(code, 5);
    assert_eq!(v["error"], "plugin");
    let (code, _) = fails(&["simulate", "--scenario", "pick_place", "--out", &out, "--policy", "exec:/bin/true"]);
    assert_eq!(code, 5);
    let (code, _) = fails(&["simulate", "--scenario", "atlantis", "--out", &out]);
    assert_eq!(code, 2);
    let (code, _) = fails(&["simulate", "--scenario", "pick_place", "--seeds", "5..2", "--out", &out]);
    assert_eq!(code, 2);
}
