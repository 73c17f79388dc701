use std::collections::BTreeMap;
use std::path::Path;
use std::process::ExitCode;

use serde_json::json;

use trafficsim::config::RunConfig;
use trafficsim::egat::Checkpoint;
use trafficsim::ingest::{
    parse_recording, resample, split_by_day, to_local_frame, write_normalized, LocalFrame, Recording,
    SignalSchedule, TrajectoryDataset,
};
use trafficsim::metrics::{emit_report, evaluate_with};
use trafficsim::road::RoadNetwork;
use trafficsim::rulebase::{calibrate_idm as fit_idm, extract_tuples, pending_from_dataset, Calibration, IdmParams, RuleSim};
use trafficsim::sim::{run, Policy, RunManifest, SimulationState};
use trafficsim::synth::{generate, Topology};
use trafficsim::train::{train as train_policy, Scene, TrainIo};
use trafficsim::Error;

use crate::manifest::{sha256_file, Recorder};
use crate::{Common, PolicyArg, TopologyArg};

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn kind_and_code(&self) -> (&'static str, u8) {
        match self {
            Failure::Usage(_) => ("usage", 1),
            Failure::Core(Error::Config(_)) => ("config", 1),
            Failure::Core(e) if e.is_numeric() => ("numeric", 3),
            Failure::Core(_) => ("data", 2),
        }
    }

    pub fn report(&self) -> ExitCode {
        let (kind, code) = self.kind_and_code();
        let message = match self {
            Failure::Usage(m) => m.trim_end().to_string(),
            Failure::Core(e) => e.to_string(),
        };
        let body = json!({"error": {"kind": kind, "exit_code": code, "message": message}});
        eprintln!("{body}");
        ExitCode::from(code)
    }
}

type Outcome = std::result::Result<(), Failure>;

fn config_error(msg: impl Into<String>) -> Failure {
    Failure::Core(Error::Config(msg.into()))
}

/// Parse `VALUE` as a TOML value, falling back to a bare string.
fn toml_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_set(table: &mut toml::Table, spec: &str) -> Outcome {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got `{spec}`")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Failure::Usage(format!("bad config key `{key}`")));
    }
    let mut t = table;
    for p in &parts[..parts.len() - 1] {
        let next = t
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        t = next
            .as_table_mut()
            .ok_or_else(|| config_error(format!("`{p}` is not a config section")))?;
    }
    t.insert(parts[parts.len() - 1].to_string(), toml_value(raw.trim()));
    Ok(())
}

/// Config file, then `--set`, then `--seed`.
fn resolve(common: &Common) -> std::result::Result<RunConfig, Failure> {
    let mut table = match &common.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            text.parse::<toml::Table>()
                .map_err(|e| config_error(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for s in &common.set {
        apply_set(&mut table, s)?;
    }
    let text = toml::to_string(&table).map_err(|e| config_error(e.to_string()))?;
    let mut cfg = RunConfig::from_toml_str(&text)?;
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn finish(rec: Recorder, command: &str, cfg: &RunConfig, extra: serde_json::Value) -> Outcome {
    cfg.validate()?;
    let text = cfg.to_toml_string()?;
    rec.finish(command, cfg.seed, &text, extra)?;
    Ok(())
}

fn load_network(rec: &mut Recorder, path: &Path) -> std::result::Result<RoadNetwork, Failure> {
    rec.input("network", path)?;
    Ok(RoadNetwork::load(path)?)
}

fn load_dataset(
    rec: &mut Recorder,
    role: &str,
    path: &Path,
    cfg: &RunConfig,
) -> std::result::Result<TrajectoryDataset, Failure> {
    rec.input(role, path)?;
    let ds = TrajectoryDataset::load_normalized(path, cfg.dt, cfg.resample.route_spacing)?;
    if ds.is_empty() {
        return Err(Error::data(format!("{}: no trajectories", path.display())).into());
    }
    Ok(ds)
}

fn load_signals(rec: &mut Recorder, path: Option<&Path>) -> std::result::Result<SignalSchedule, Failure> {
    match path {
        Some(p) => {
            rec.input("signals", p)?;
            Ok(SignalSchedule::load(p)?)
        }
        None => Ok(SignalSchedule::new()),
    }
}

pub fn ingest(common: &Common, recordings: &[String], origin: Option<&str>) -> Outcome {
    let cfg = resolve(common)?;
    let exec = common.exec();
    let mut rec = Recorder::new(&common.out)?;
    let mut parsed = Vec::new();
    for spec in recordings {
        let (day, path) = spec
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--recording expects DAY=PATH, got `{spec}`")))?;
        let day: u32 = day
            .parse()
            .map_err(|_| Failure::Usage(format!("bad day number in `{spec}`")))?;
        let path = Path::new(path);
        let name = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Failure::Usage(format!("bad recording path `{}`", path.display())))?
            .to_string();
        if parsed.iter().any(|(_, n, _)| *n == name) {
            return Err(Failure::Usage(format!("two recordings named `{name}`")));
        }
        rec.input("recording", path)?;
        parsed.push((day, name, parse_recording(path)?));
    }
    let frame = match origin {
        Some(s) => {
            let (lat, lon) = s
                .split_once(',')
                .and_then(|(a, b)| Some((a.trim().parse().ok()?, b.trim().parse().ok()?)))
                .ok_or_else(|| Failure::Usage(format!("--origin expects LAT,LON, got `{s}`")))?;
            LocalFrame::new(lat, lon)
        }
        None => {
            let all: Vec<_> = parsed.iter().flat_map(|(_, _, r)| r.iter().cloned()).collect();
            LocalFrame::centroid(&all).ok_or_else(|| Error::data("recordings contain no samples"))?
        }
    };
    std::fs::create_dir_all(common.out.join("normalized")).map_err(|e| Error::io(&common.out, e))?;
    let mut recs = Vec::new();
    let mut counts = BTreeMap::new();
    for (day, name, raws) in parsed {
        let agents: Vec<_> = exec
            .map(&raws, |r| resample(&to_local_frame(r, frame), &cfg.resample))
            .into_iter()
            .flatten()
            .collect();
        counts.insert(name.clone(), json!({"tracks": raws.len(), "kept": agents.len()}));
        let ds = TrajectoryDataset::new(cfg.dt, agents);
        ds.save_normalized(rec.output(&format!("normalized/{name}.csv")))?;
        recs.push(Recording { day, name, dataset: ds });
    }
    let frame_path = rec.output("frame.json");
    std::fs::write(&frame_path, serde_json::to_string_pretty(&frame).map_err(Error::from)? + "\n")
        .map_err(|e| Error::io(&frame_path, e))?;
    let days: std::collections::BTreeSet<u32> = recs.iter().map(|r| r.day).collect();
    let split = if days.len() >= 2 {
        let (train, test) = split_by_day(recs)?;
        let names = |v: &[Recording]| v.iter().map(|r| r.name.clone()).collect::<Vec<_>>();
        let s = json!({"train": names(&train), "test": names(&test)});
        let p = rec.output("split.json");
        std::fs::write(&p, serde_json::to_string_pretty(&s).map_err(Error::from)? + "\n")
            .map_err(|e| Error::io(&p, e))?;
        s
    } else {
        log::warn!("all recordings are from one day; no train/test split written");
        serde_json::Value::Null
    };
    finish(rec, "ingest", &cfg, json!({"recordings": counts, "frame": frame, "split": split}))
}

pub fn estimate_lights(common: &Common, trajectories: &Path, network: &Path, fit_cycle: bool) -> Outcome {
    let mut cfg = resolve(common)?;
    cfg.lights.fit_cycle |= fit_cycle;
    let mut rec = Recorder::new(&common.out)?;
    let net = load_network(&mut rec, network)?;
    let ds = load_dataset(&mut rec, "trajectories", trajectories, &cfg)?;
    let est = trafficsim::ingest::estimate_traffic_lights(&ds, &net, &cfg.lights, common.exec())?;
    est.save(rec.output("signals.json"))?;
    let roads = est.roads().count();
    finish(rec, "estimate-lights", &cfg, json!({"signalized_roads": roads}))
}

fn scenes<'a>(v: &'a [TrajectoryDataset], signals: &'a SignalSchedule) -> Vec<Scene<'a>> {
    v.iter().map(|dataset| Scene { dataset, signals }).collect()
}

pub fn train(
    common: &Common,
    network: &Path,
    train: &[std::path::PathBuf],
    val: &[std::path::PathBuf],
    signals: Option<&Path>,
    epochs: Option<usize>,
    resume: Option<&Path>,
) -> Outcome {
    let mut cfg = resolve(common)?;
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    cfg.validate()?;
    let mut rec = Recorder::new(&common.out)?;
    let net = load_network(&mut rec, network)?;
    let signals = load_signals(&mut rec, signals)?;
    let train_ds = train
        .iter()
        .map(|p| load_dataset(&mut rec, "train", p, &cfg))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let val_ds = val
        .iter()
        .map(|p| load_dataset(&mut rec, "val", p, &cfg))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let resume = match resume {
        Some(p) => {
            rec.input("resume", p)?;
            Some(Checkpoint::load(p)?)
        }
        None => None,
    };
    let io = TrainIo {
        out_dir: Some(&common.out),
        resume: resume.as_ref(),
    };
    let outcome = train_policy(
        &scenes(&train_ds, &signals),
        &scenes(&val_ds, &signals),
        &net,
        &cfg.graph,
        &cfg.train,
        common.exec(),
        io,
    )?;
    let mut produced: Vec<String> = std::fs::read_dir(&common.out)
        .map_err(|e| Error::io(&common.out, e))?
        .filter_map(|e| e.ok()?.file_name().into_string().ok())
        .filter(|n| n.ends_with(".egat") || n == "train_log.csv")
        .collect();
    produced.sort();
    for n in &produced {
        rec.output(n);
    }
    let extra = json!({
        "epochs_run": outcome.history.len(),
        "best_val_nll": outcome.best_val_nll,
        "history": outcome.history.iter().map(|h| json!({"epoch": h.epoch, "train_nll": h.train_nll, "val_nll": h.val_nll})).collect::<Vec<_>>(),
    });
    finish(rec, "train", &cfg, extra)
}

pub fn calibrate_idm(common: &Common, network: &Path, trajectories: &[std::path::PathBuf]) -> Outcome {
    let cfg = resolve(common)?;
    let mut rec = Recorder::new(&common.out)?;
    let net = load_network(&mut rec, network)?;
    let mut tuples = Vec::new();
    for p in trajectories {
        let ds = load_dataset(&mut rec, "trajectories", p, &cfg)?;
        tuples.extend(extract_tuples(&ds, &net, cfg.rule.vehicle_length, cfg.tuples.max_gap));
    }
    let cal = fit_idm(&tuples, &cfg.idm, &cfg.calibration)?;
    let p = rec.output("idm.json");
    std::fs::write(&p, serde_json::to_string_pretty(&cal).map_err(Error::from)? + "\n").map_err(|e| Error::io(&p, e))?;
    let p = rec.output("loss_history.csv");
    let mut text = String::from("iteration,best_loss\n");
    for (i, l) in cal.loss_history.iter().enumerate() {
        text += &format!("{},{l}\n", i + 1);
    }
    std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    finish(
        rec,
        "calibrate-idm",
        &cfg,
        json!({"tuples": tuples.len(), "initial_loss": cal.initial_loss, "best_loss": cal.best_loss}),
    )
}

pub struct SimulateArgs<'a> {
    pub policy: PolicyArg,
    pub network: &'a Path,
    pub trajectories: &'a Path,
    pub signals: Option<&'a Path>,
    pub checkpoint: Option<&'a Path>,
    pub idm: Option<&'a Path>,
    pub steps: Option<usize>,
}

fn read_idm(path: &Path) -> std::result::Result<IdmParams, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if let Ok(c) = serde_json::from_str::<Calibration>(&text) {
        return Ok(c.params);
    }
    let p: IdmParams = serde_json::from_str(&text).map_err(Error::from)?;
    p.validate()?;
    Ok(p)
}

pub fn simulate(common: &Common, a: SimulateArgs<'_>) -> Outcome {
    let mut cfg = resolve(common)?;
    if let Some(s) = a.steps {
        cfg.simulate.steps = s;
    }
    cfg.validate()?;
    let exec = common.exec();
    let mut rec = Recorder::new(&common.out)?;
    let net = load_network(&mut rec, a.network)?;
    let ds = load_dataset(&mut rec, "trajectories", a.trajectories, &cfg)?;
    let signals = load_signals(&mut rec, a.signals)?;
    let start = ds.step_range().expect("non-empty dataset").0;
    let steps = cfg.simulate.steps;
    let mut checkpoint_hash = None;
    let (rows, policy_name) = match a.policy {
        PolicyArg::Egat => {
            let path = a
                .checkpoint
                .ok_or_else(|| Failure::Usage("--policy egat needs --checkpoint".into()))?;
            rec.input("checkpoint", path)?;
            checkpoint_hash = Some(sha256_file(path)?);
            let ck = Checkpoint::load(path)?;
            // the model is only valid with the feature layout it was trained on
            if let Some(g) = ck.meta.get("graph") {
                let trained = serde_json::from_value(g.clone()).map_err(Error::from)?;
                if trained != cfg.graph {
                    log::warn!("using the graph settings stored in the checkpoint");
                    cfg.graph = trained;
                }
            }
            let policy = Policy::Egat {
                params: &ck.params,
                graph: &cfg.graph,
            };
            let mut state = SimulationState::from_dataset(&ds, start);
            (run(&mut state, &policy, &net, &signals, steps, &cfg.sim, exec)?, "egat")
        }
        PolicyArg::ConstantVelocity => {
            let policy = Policy::ConstantVelocity {
                horizon: cfg.graph.horizon,
            };
            let mut state = SimulationState::from_dataset(&ds, start);
            (
                run(&mut state, &policy, &net, &signals, steps, &cfg.sim, exec)?,
                "constant-velocity",
            )
        }
        PolicyArg::Idm => {
            let idm = match a.idm {
                Some(p) => {
                    rec.input("idm", p)?;
                    read_idm(p)?
                }
                None => cfg.idm,
            };
            cfg.idm = idm;
            let mut sim = RuleSim::new(cfg.rule, start, pending_from_dataset(&ds, &idm));
            (sim.run(&net, &signals, steps, exec), "idm")
        }
    };
    if rows.iter().any(|r| !(r.x.is_finite() && r.y.is_finite())) {
        return Err(Error::numeric("simulation produced non-finite positions").into());
    }
    write_normalized(rec.output("sim.csv"), &rows)?;
    let run_manifest = RunManifest {
        seed: cfg.seed,
        policy: policy_name.to_string(),
        config: cfg.sim,
        checkpoint_hash,
        duration: steps as f64 * cfg.dt,
        steps,
    };
    let extra = serde_json::to_value(&run_manifest).map_err(Error::from)?;
    finish(rec, "simulate", &cfg, extra)
}

pub fn evaluate(common: &Common, real: &Path, sim: &Path, network: &Path) -> Outcome {
    let cfg = resolve(common)?;
    let mut rec = Recorder::new(&common.out)?;
    let net = load_network(&mut rec, network)?;
    rec.input("real", real)?;
    rec.input("sim", sim)?;
    let real_rows = trafficsim::ingest::read_normalized(real)?;
    let sim_rows = trafficsim::ingest::read_normalized(sim)?;
    let ev = evaluate_with(
        &real_rows,
        &sim_rows,
        &net,
        cfg.dt,
        cfg.metrics.off_road_threshold,
        common.exec(),
    )?;
    emit_report(&ev, &common.out)?;
    rec.output("summary.json");
    rec.output("roads.csv");
    let extra = serde_json::to_value(&ev.summary).map_err(Error::from)?;
    finish(rec, "evaluate", &cfg, extra)
}

pub fn make_synthetic(
    common: &Common,
    topology: Option<TopologyArg>,
    demand: Option<f64>,
    duration: Option<f64>,
) -> Outcome {
    let mut cfg = resolve(common)?;
    if let Some(t) = topology {
        cfg.synth.topology = match t {
            TopologyArg::Grid => Topology::Grid,
            TopologyArg::Ring => Topology::Ring,
        };
    }
    if let Some(d) = demand {
        cfg.synth.demand = d;
    }
    if let Some(d) = duration {
        cfg.synth.duration = d;
    }
    cfg.validate()?;
    let mut rec = Recorder::new(&common.out)?;
    let s = generate(&cfg.synth, &cfg.rule, common.exec())?;
    s.net.save(rec.output("network.json"))?;
    s.signals.save(rec.output("signals.json"))?;
    write_normalized(rec.output("trajectories.csv"), &s.rows)?;
    let extra = json!({
        "agents": s.dataset.agents.len(),
        "rows": s.rows.len(),
        "roads": s.net.roads().len(),
    });
    finish(rec, "make-synthetic", &cfg, extra)
}
