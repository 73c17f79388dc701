use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_trafficsim"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(dir: &Path, rel: &str) -> String {
    dir.join(rel).to_str().unwrap().to_string()
}

fn json(path: &str) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Short synthetic recording: 3 min after warm-up at the default demand.
fn synthetic(dir: &Path) {
    ok(&["make-synthetic", "--out", &p(dir, "syn"), "--duration", "180", "--seed", "4"]);
}

fn error_of(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("error line");
    serde_json::from_str(line).unwrap_or_else(|_| panic!("not JSON: {text}"))
}

#[test]
fn synthetic_idm_pipeline_stays_on_road() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    synthetic(d);
    ok(&[
        "simulate",
        "--policy",
        "idm",
        "--network",
        &p(d, "syn/network.json"),
        "--trajectories",
        &p(d, "syn/trajectories.csv"),
        "--signals",
        &p(d, "syn/signals.json"),
        "--steps",
        "450",
        "--out",
        &p(d, "sim"),
    ]);
    ok(&[
        "evaluate",
        "--real",
        &p(d, "syn/trajectories.csv"),
        "--sim",
        &p(d, "sim/sim.csv"),
        "--network",
        &p(d, "syn/network.json"),
        "--out",
        &p(d, "eval"),
    ]);
    let s = json(&p(d, "eval/summary.json"));
    assert!(s["off_road_rate_sim"].as_f64().unwrap() < 0.05, "{s}");
    assert!(s["paired_steps"].as_u64().unwrap() > 400);
    for dir in ["syn", "sim", "eval"] {
        let m = json(&p(d, &format!("{dir}/manifest.json")));
        assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
        assert!(!m["outputs"].as_array().unwrap().is_empty());
        assert!(Path::new(&p(d, &format!("{dir}/config.toml"))).exists());
    }
    let roads = std::fs::read_to_string(p(d, "eval/roads.csv")).unwrap();
    assert_eq!(roads.lines().count(), 1 + 48);
}

#[test]
fn identical_logs_score_zero() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    synthetic(d);
    let log = p(d, "syn/trajectories.csv");
    ok(&["evaluate", "--real", &log, "--sim", &log, "--network", &p(d, "syn/network.json"), "--out", &p(d, "e")]);
    let s = json(&p(d, "e/summary.json"));
    for k in ["position_rmse", "velocity_rmse", "density_rmse", "speed_rmse"] {
        assert_eq!(s[k].as_f64(), Some(0.0), "{k}");
    }
}

#[test]
fn rerun_from_manifest_is_byte_identical() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    synthetic(d);
    let net = p(d, "syn/network.json");
    let log = p(d, "syn/trajectories.csv");
    let sig = p(d, "syn/signals.json");
    ok(&[
        "train", "--network", &net, "--train", &log, "--signals", &sig, "--epochs", "1", "--set", "train.hidden=8",
        "--set", "train.val_stride=20", "--seed", "3", "--out", &p(d, "tr"),
    ]);
    let sim = |out: &str, extra: &[&str]| {
        let mut a = vec![
            "simulate", "--policy", "egat", "--network", &net, "--trajectories", &log, "--signals", &sig,
            "--checkpoint",
        ];
        let ck = p(d, "tr/best.egat");
        a.push(&ck);
        a.extend_from_slice(&["--steps", "60"]);
        let o = p(d, out);
        a.extend_from_slice(&["--out", &o]);
        a.extend_from_slice(extra);
        ok(&a);
        let e = p(d, &format!("{out}-eval"));
        let s = p(d, &format!("{out}/sim.csv"));
        ok(&["evaluate", "--real", &log, "--sim", &s, "--network", &net, "--out", &e]);
    };
    sim("a", &["--seed", "7"]);
    // same run from the recorded config only, on one thread
    let cfg = p(d, "a/config.toml");
    sim("b", &["--config", &cfg, "--sequential"]);
    sim("c", &["--seed", "8"]);
    let read = |rel: &str| std::fs::read(p(d, rel)).unwrap();
    assert_eq!(read("a/sim.csv"), read("b/sim.csv"));
    assert_eq!(read("a-eval/summary.json"), read("b-eval/summary.json"));
    assert_eq!(read("a-eval/roads.csv"), read("b-eval/roads.csv"));
    assert_ne!(read("a/sim.csv"), read("c/sim.csv"));
    let m = json(&p(d, "a/manifest.json"));
    assert_eq!(m["extra"]["policy"], "egat");
    assert_eq!(m["extra"]["seed"], 7);
    assert_eq!(m["extra"]["checkpoint_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn ingest_writes_normalized_split() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    // two days, two tracks each: 20 samples 0.5 s apart heading east
    for day in 1..=2 {
        let mut text = String::from("track_id; type; traveled_d; avg_speed; lat; lon; speed; lon_acc; lat_acc; time\n");
        for id in 1..=2 {
            text += &format!("{id}; Car; 100.0; 36.0");
            for k in 0..20 {
                let lon = 23.73 + 1e-5 * (k as f64 + id as f64);
                text += &format!("; 37.98; {lon:.6}; 36.0; 0.0; 0.0; {:.2}", 0.5 * k as f64);
            }
            text += "\n";
        }
        std::fs::write(d.join(format!("rec{day}.csv")), text).unwrap();
    }
    ok(&[
        "ingest",
        "--recording",
        &format!("1={}", p(d, "rec1.csv")),
        "--recording",
        &format!("2={}", p(d, "rec2.csv")),
        "--out",
        &p(d, "ing"),
    ]);
    let split = json(&p(d, "ing/split.json"));
    assert_eq!(split["train"], serde_json::json!(["rec1"]));
    assert_eq!(split["test"], serde_json::json!(["rec2"]));
    let csv = std::fs::read_to_string(p(d, "ing/normalized/rec1.csv")).unwrap();
    assert!(csv.starts_with("agent_id,type,time,x,y,speed"));
    assert!(csv.lines().count() > 2 * 20);
}

#[test]
fn exit_codes_and_error_json() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    let usage = run(&["simulate", "--bogus"]);
    assert_eq!(usage.status.code(), Some(1));
    assert_eq!(error_of(&usage)["error"]["kind"], "usage");

    let bad_key = run(&["make-synthetic", "--out", &p(d, "x"), "--set", "synth.bogus=1"]);
    assert_eq!(bad_key.status.code(), Some(1));
    assert_eq!(error_of(&bad_key)["error"]["kind"], "config");

    let missing = run(&["evaluate", "--real", "nope.csv", "--sim", "nope.csv", "--network", "nope.json", "--out", &p(d, "y")]);
    assert_eq!(missing.status.code(), Some(2));
    assert_eq!(error_of(&missing)["error"]["exit_code"], 2);

    synthetic(d);
    let numeric = run(&[
        "calibrate-idm",
        "--network",
        &p(d, "syn/network.json"),
        "--trajectories",
        &p(d, "syn/trajectories.csv"),
        // a jam distance this large overflows the squared gap term
        "--set",
        "idm.s0=1e300",
        "--out",
        &p(d, "z"),
    ]);
    assert_eq!(numeric.status.code(), Some(3));
    assert_eq!(error_of(&numeric)["error"]["kind"], "numeric");
}

#[test]
fn help_lists_flags_and_defaults() {
    let cmds = [
        ("ingest", "--recording", "[resample]"),
        ("estimate-lights", "--fit-cycle", "[lights]"),
        ("train", "--epochs", "[train]"),
        ("calibrate-idm", "--trajectories", "[calibration]"),
        ("simulate", "--policy", "[sim]"),
        ("evaluate", "--real", "[metrics]"),
        ("make-synthetic", "--topology", "[synth]"),
    ];
    for (cmd, flag, section) in cmds {
        let out = ok(&[cmd, "--help"]);
        let text = String::from_utf8(out.stdout).unwrap();
        for want in [flag, section, "--seed", "--config", "--out", "dt = 0.4"] {
            assert!(text.contains(want), "{cmd} --help lacks {want}");
        }
    }
}
