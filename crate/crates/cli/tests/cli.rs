use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

use luv_core::datastore::{encode_png_rgb, read_dataset};
use luv_core::plugnet::mock::MockPlug;
use luv_core::synthscene::{companion_profile, render_uv, SceneKind, SceneSpec, NOMINAL_EXPOSURE};

fn luv(args: &[&str]) -> Output {
    luv_env(args, None)
}

fn luv_env(args: &[&str], config: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_luv"));
    cmd.args(args).env_remove("LUV_CONFIG");
    if let Some(c) = config {
        cmd.env("LUV_CONFIG", c);
    }
    cmd.output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", stdout(o)))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn cost_prints_breakeven() {
    let o = luv(&["cost", "--setup", "282", "--price", "0.82", "--labels-per-image", "2"]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o).trim(), "172");
    let o = luv(&["cost", "--setup", "0", "--price", "0.82", "--labels-per-image", "2"]);
    assert_eq!(code(&o), 2);
    let o = luv(&["cost", "--setup", "282"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn capture_in_sim() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    let o = luv(&["--json", "capture", "--sim", "--n", "4", "--dataset", p(&root)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(json(&o)["succeeded"], 4);
    let ds = read_dataset(&root).unwrap();
    assert_eq!(ds.len(), 4);
    assert!(ds.records().iter().all(|r| r.is_labeled()));
}

#[test]
fn capture_config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    let o = luv(&["capture", "--sim", "--n", "0", "--dataset", p(&root)]);
    assert_eq!(code(&o), 2);
    let missing = dir.path().join("nope.json");
    let o = luv(&["capture", "--sim", "--n", "2", "--dataset", p(&root), "--profile", p(&missing)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains(p(&missing)));
    let o = luv(&["capture", "--sim", "--n", "2"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn config_from_env_with_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let from_env = dir.path().join("env-data");
    let cfg = dir.path().join("luv.json");
    let text = serde_json::json!({
        "dataset": from_env,
        "scene": {"kind": "cable", "width": 64, "height": 48},
        "seed": 3
    });
    std::fs::write(&cfg, text.to_string()).unwrap();
    let o = luv_env(&["capture", "--n", "2"], Some(&cfg));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read_dataset(&from_env).unwrap().len(), 2);
    let flagged = dir.path().join("flag-data");
    let o = luv_env(&["capture", "--n", "1", "--dataset", p(&flagged)], Some(&cfg));
    assert_eq!(code(&o), 0);
    assert_eq!(read_dataset(&flagged).unwrap().len(), 1);
    assert_eq!(read_dataset(&from_env).unwrap().len(), 2);

    std::fs::write(&cfg, r#"{"dataset": 5}"#).unwrap();
    assert_eq!(code(&luv_env(&["capture", "--n", "1"], Some(&cfg))), 2);
    let absent = dir.path().join("absent.json");
    assert_eq!(code(&luv_env(&["capture", "--n", "1"], Some(&absent))), 2);
}

#[test]
fn plug_against_mock() {
    let plug = MockPlug::spawn().unwrap();
    let port = plug.port().to_string();
    let o = luv(&["plug", "--host", "127.0.0.1", "--port", &port, "--state", "on"]);
    assert_eq!(code(&o), 0);
    assert!(plug.relay_on());
    let o = luv(&["--json", "plug", "--host", "127.0.0.1", "--port", &port]);
    assert_eq!(json(&o)["state"], "on");
    let o = luv(&["plug", "--host", "127.0.0.1", "--port", &port, "--state", "off"]);
    assert_eq!(code(&o), 0);
    assert!(!plug.relay_on());
    drop(plug);
    let o = luv(&["plug", "--host", "127.0.0.1", "--port", &port, "--state", "on"]);
    assert_eq!(code(&o), 1);
    let o = luv(&["plug", "--host", "", "--state", "on"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn simulate_train_eval() {
    let dir = tempfile::tempdir().unwrap();
    let (luvd, truth) = (dir.path().join("luv"), dir.path().join("truth"));
    for (out, labels) in [(&luvd, "luv"), (&truth, "truth")] {
        let o = luv(&["simulate", "--out", p(out), "--kind", "cable", "-n", "4", "--width", "96", "--height", "72", "--labels", labels]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert!(truth.join("scenes/sim-00000.json").is_file());
    let o = luv(&["--json", "eval", "--pred", p(&truth), "--ref", p(&truth)]);
    assert_eq!(code(&o), 0);
    assert_eq!(json(&o)["mean_iou"], 1.0);
    let o = luv(&["--json", "eval", "--pred", p(&luvd), "--ref", p(&truth)]);
    assert!(json(&o)["mean_iou"].as_f64().unwrap() > 0.9);

    let model = dir.path().join("m.luvseg");
    let o = luv(&["train", "--dataset", p(&luvd), "--out", p(&model), "--iterations", "100"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = luv(&["--json", "eval", "--model", p(&model), "--ref", p(&truth)]);
    assert_eq!(code(&o), 0);
    assert!(json(&o)["mean_iou"].as_f64().unwrap() > 0.5);

    let o = luv(&["eval", "--pred", p(&dir.path().join("none")), "--ref", p(&truth)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn label_files_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SceneSpec::generate(SceneKind::Towel, 160, 120, 4, 0.0);
    let frame = dir.path().join("uv.png");
    std::fs::write(&frame, encode_png_rgb(&render_uv(&spec, NOMINAL_EXPOSURE)).unwrap()).unwrap();
    let profile = dir.path().join("profile.json");
    std::fs::write(&profile, serde_json::to_string(&companion_profile()).unwrap()).unwrap();
    let mask = dir.path().join("mask.png");
    let o = luv(&["--json", "label", "--profile", p(&profile), "--uv", p(&frame), "--out", p(&mask)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(json(&o)["keypoints"].as_array().unwrap().len(), 4);
    assert!(mask.is_file());
    let o = luv(&["label", "--profile", p(&profile), "--uv", p(&frame), "--exposure", "10", "--exposure", "20"]);
    assert_eq!(code(&o), 2);
    let o = luv(&["label", "--uv", p(&frame)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn sweep_in_sim() {
    let o = luv(&["--json", "sweep", "--sim", "--scene", "cable", "--exposures", "10,50,100"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(json(&o)["best"], 50.0);
}

#[test]
fn serve_reports_port_in_use() {
    let busy = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = busy.local_addr().unwrap().port().to_string();
    let o = luv(&["serve", "--sim", "--port", &port]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("cannot listen"));
}
