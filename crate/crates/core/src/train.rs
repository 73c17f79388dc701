//! Offline training of the attention policy on recorded snapshots.
//!
//! A snapshot is one timestep of one recording. Each optimizer step averages
//! the per-snapshot mean NLL over a batch, so crowded and sparse timesteps
//! weigh the same.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::egat::{backward, forward, nll_loss, Checkpoint, ModelConfig, ModelParams, Weights};
use crate::error::{Error, Result};
use crate::exec::{derive_seed, Exec};
use crate::geom::Vec2;
use crate::graph::{build_snapshot, route_progress, AgentView, GraphConfig, GraphSnapshot, World};
use crate::ingest::{SignalSchedule, TrajectoryDataset};
use crate::road::RoadNetwork;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    /// Snapshots per optimizer step.
    pub batch: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip_norm: f64,
    pub seed: u64,
    pub hidden: usize,
    pub layers: usize,
    /// Evaluate every n-th validation snapshot.
    pub val_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 50,
            batch: 8,
            grad_clip_norm: 5.0,
            seed: 0,
            hidden: 64,
            layers: 2,
            val_stride: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.batch > 0
            && self.grad_clip_norm >= 0.0
            && self.hidden > 0
            && self.val_stride > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("invalid training configuration".into()))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Weights,
    pub v: Weights,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(cfg: &ModelConfig) -> Self {
        OptimizerState {
            m: Weights::zeros(cfg),
            v: Weights::zeros(cfg),
            step: 0,
        }
    }
}

/// Bias-corrected Adam update, after optional global-norm clipping.
pub fn adam_step(params: &mut ModelParams, grads: &Weights, state: &mut OptimizerState, cfg: &TrainConfig) {
    let norm = grads.norm();
    let clip = if cfg.grad_clip_norm > 0.0 && norm > cfg.grad_clip_norm {
        cfg.grad_clip_norm / norm
    } else {
        1.0
    };
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    for (((p, g), m), v) in params
        .weights
        .slices_mut()
        .into_iter()
        .zip(grads.slices())
        .zip(state.m.slices_mut())
        .zip(state.v.slices_mut())
    {
        for k in 0..p.len() {
            let gk = g[k] * clip;
            m[k] = b1 * m[k] + (1.0 - b1) * gk;
            v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
            let mh = m[k] / c1;
            let vh = v[k] / c2;
            p[k] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
}

/// One recording together with its signal schedule.
#[derive(Debug, Clone, Copy)]
pub struct Scene<'a> {
    pub dataset: &'a TrajectoryDataset,
    pub signals: &'a SignalSchedule,
}

/// Per-recording lookup tables for building snapshots at any timestep.
pub struct SceneIndex<'a> {
    pub scene: Scene<'a>,
    first: i64,
    live: Vec<Vec<usize>>,
    progress: Vec<Vec<f64>>,
    /// Steps at which at least one live agent has a full future horizon.
    pub valid_steps: Vec<i64>,
}

impl<'a> SceneIndex<'a> {
    pub fn new(scene: Scene<'a>, horizon: usize) -> Self {
        let ds = scene.dataset;
        let first = ds.step_range().map_or(0, |r| r.0);
        let live = ds.live_index();
        let progress = ds
            .agents
            .iter()
            .map(|a| route_progress(&a.route, &a.positions))
            .collect();
        let valid_steps = live
            .iter()
            .enumerate()
            .filter(|(k, idx)| {
                let s = first + *k as i64;
                idx.iter().any(|&i| ds.agents[i].last_step() - s >= horizon as i64)
            })
            .map(|(k, _)| first + k as i64)
            .collect();
        SceneIndex {
            scene,
            first,
            live,
            progress,
            valid_steps,
        }
    }

    /// Build the snapshot at `step`; targets are attached when `training`.
    pub fn snapshot<R: rand::Rng + ?Sized>(
        &self,
        step: i64,
        net: &RoadNetwork,
        cfg: &GraphConfig,
        rng: &mut R,
        training: bool,
    ) -> GraphSnapshot {
        let ds = self.scene.dataset;
        let idx: &[usize] = self
            .live
            .get((step - self.first) as usize)
            .map_or(&[], |v| v.as_slice());
        let hist: Vec<Vec<Option<Vec2>>> = idx
            .iter()
            .map(|&i| {
                (1..=cfg.history_len as i64)
                    .map(|k| ds.agents[i].position_at(step - k))
                    .collect()
            })
            .collect();
        let fut: Vec<Vec<Option<Vec2>>> = idx
            .iter()
            .map(|&i| {
                (1..=cfg.horizon as i64)
                    .map(|k| ds.agents[i].position_at(step + k))
                    .collect()
            })
            .collect();
        let agents = idx
            .iter()
            .enumerate()
            .map(|(n, &i)| {
                let a = &ds.agents[i];
                let k = (step - a.first_step) as usize;
                AgentView {
                    id: a.agent_id,
                    vehicle_type: a.vehicle_type,
                    position: a.positions[k],
                    speed: a.speeds[k],
                    route: &a.route,
                    progress: self.progress[i][k],
                    history: &hist[n],
                    future: Some(&fut[n]),
                }
            })
            .collect();
        let world = World {
            clock: step as f64 * ds.dt,
            agents,
            signals: self.scene.signals,
        };
        build_snapshot(&world, net, cfg, rng, training)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_nll: f64,
    pub val_nll: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub best: ModelParams,
    pub best_val_nll: f64,
    pub optimizer: OptimizerState,
    pub history: Vec<EpochLog>,
}

fn snapshot_seed(seed: u64, epoch: usize, scene: usize, step: i64) -> u64 {
    derive_seed(&[seed, 0x5a, epoch as u64, scene as u64, step as u64])
}

/// Pooled mean NLL per agent-step over every `stride`-th valid snapshot,
/// with frame perturbation off.
pub fn evaluate_nll(
    scenes: &[SceneIndex<'_>],
    net: &RoadNetwork,
    params: &ModelParams,
    graph: &GraphConfig,
    stride: usize,
    exec: Exec,
) -> Result<f64> {
    let cfg = GraphConfig { perturb: false, ..*graph };
    let jobs: Vec<(usize, i64)> = scenes
        .iter()
        .enumerate()
        .flat_map(|(s, idx)| idx.valid_steps.iter().step_by(stride.max(1)).map(move |&t| (s, t)))
        .collect();
    if jobs.is_empty() {
        return Err(Error::data("no valid evaluation snapshots"));
    }
    let parts = exec.map(&jobs, |&(s, t)| -> Result<(f64, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let snap = scenes[s].snapshot(t, net, &cfg, &mut rng, true);
        let targets = snap.targets.as_ref().expect("training snapshot has targets");
        let loss = nll_loss(&forward(&snap, params)?, targets)?;
        Ok((loss, snap.target_count()))
    });
    let mut total = 0.0;
    let mut count = 0usize;
    for p in parts {
        let (l, c) = p?;
        total += l;
        count += c;
    }
    if count == 0 {
        return Err(Error::data("no evaluation targets"));
    }
    let v = total / count as f64;
    if !v.is_finite() {
        return Err(Error::numeric("validation NLL is not finite"));
    }
    Ok(v)
}

/// Where and how to persist training artifacts.
#[derive(Debug, Clone, Copy, Default)]
pub struct TrainIo<'p> {
    /// Directory for `epoch_NNN.egat`, `best.egat` and `train_log.csv`.
    /// Wall-clock times are only logged, so every file here is a pure
    /// function of the inputs and seed.
    pub out_dir: Option<&'p Path>,
    /// Continue from this checkpoint (must carry optimizer moments).
    pub resume: Option<&'p Checkpoint>,
}

fn checkpoint_of(params: &ModelParams, opt: &OptimizerState, meta: serde_json::Value) -> Checkpoint {
    Checkpoint {
        params: params.clone(),
        moments: Some((opt.m.clone(), opt.v.clone())),
        meta,
    }
}

/// Train on `train` scenes, validating on `val` (or on `train` when `val` is
/// empty) after every epoch.
#[allow(clippy::too_many_arguments)]
pub fn train(
    train: &[Scene<'_>],
    val: &[Scene<'_>],
    net: &RoadNetwork,
    graph: &GraphConfig,
    cfg: &TrainConfig,
    exec: Exec,
    io: TrainIo<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_idx: Vec<SceneIndex> = train.iter().map(|s| SceneIndex::new(*s, graph.horizon)).collect();
    let val_idx: Vec<SceneIndex> = val.iter().map(|s| SceneIndex::new(*s, graph.horizon)).collect();
    let jobs: Vec<(usize, i64)> = train_idx
        .iter()
        .enumerate()
        .flat_map(|(s, idx)| idx.valid_steps.iter().map(move |&t| (s, t)))
        .collect();
    if jobs.is_empty() {
        return Err(Error::data("no valid training snapshots"));
    }
    let eval_on: &[SceneIndex] = if val_idx.is_empty() { &train_idx } else { &val_idx };

    let (mut params, mut opt, start_epoch, mut best, mut best_val) = match io.resume {
        Some(ck) => {
            let (m, v) = ck
                .moments
                .clone()
                .ok_or_else(|| Error::Checkpoint("resume checkpoint has no optimizer state".into()))?;
            let meta = &ck.meta;
            let epoch = meta["epoch"].as_u64().unwrap_or(0) as usize;
            let step = meta["step"].as_u64().unwrap_or(0);
            let best_val = meta["best_val_nll"].as_f64().unwrap_or(f64::INFINITY);
            let opt = OptimizerState { m, v, step };
            (ck.params.clone(), opt, epoch, ck.params.clone(), best_val)
        }
        None => {
            let mcfg = ModelConfig::for_graph(graph, cfg.hidden, cfg.layers);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, 0x1a17]));
            let p = ModelParams::init(mcfg, &mut rng);
            let opt = OptimizerState::new(&p.config);
            (p.clone(), opt, 0, p, f64::INFINITY)
        }
    };
    if params.config.input_width != graph.feature_width() {
        return Err(Error::Config("checkpoint does not match the graph feature layout".into()));
    }
    if let (Some(_), Some(dir)) = (io.resume, io.out_dir) {
        if let Ok(b) = Checkpoint::load(&dir.join("best.egat")) {
            best = b.params;
        }
    }

    let mut log_file = match io.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("train_log.csv");
            let fresh = io.resume.is_none() || !path.exists();
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .append(!fresh)
                .write(true)
                .truncate(fresh)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            if fresh {
                writeln!(f, "epoch,train_nll,val_nll").map_err(|e| Error::io(&path, e))?;
            }
            Some((f, path))
        }
        None => None,
    };

    let started = Instant::now();
    let mut history = Vec::new();
    for epoch in start_epoch + 1..=cfg.epochs {
        let mut order = jobs.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, 0x5f, epoch as u64])));
        let mut epoch_sum = 0.0;
        let mut epoch_n = 0usize;
        for batch in order.chunks(cfg.batch) {
            let results = exec.map(batch, |&(s, t)| -> Result<Option<(f64, Weights)>> {
                let mut rng = ChaCha8Rng::seed_from_u64(snapshot_seed(cfg.seed, epoch, s, t));
                let snap = train_idx[s].snapshot(t, net, graph, &mut rng, true);
                let targets = snap.targets.as_ref().expect("training snapshot has targets");
                let lg = backward(&snap, &params, targets)?;
                if lg.count == 0 {
                    return Ok(None);
                }
                let mut g = lg.grads.weights;
                g.scale(1.0 / lg.count as f64);
                Ok(Some((lg.loss / lg.count as f64, g)))
            });
            let mut grad = Weights::zeros(&params.config);
            let mut used = 0usize;
            for r in results {
                if let Some((l, g)) = r? {
                    epoch_sum += l;
                    epoch_n += 1;
                    grad.add_assign(&g);
                    used += 1;
                }
            }
            if used == 0 {
                continue;
            }
            grad.scale(1.0 / used as f64);
            if !grad.all_finite() {
                return Err(Error::numeric(format!("non-finite gradient in epoch {epoch}")));
            }
            adam_step(&mut params, &grad, &mut opt, cfg);
        }
        let train_nll = epoch_sum / epoch_n.max(1) as f64;
        let val_nll = evaluate_nll(eval_on, net, &params, graph, cfg.val_stride, exec)?;
        let wall_seconds = started.elapsed().as_secs_f64();
        info!("epoch {epoch}: train {train_nll:.4} val {val_nll:.4} ({wall_seconds:.1} s)");
        let improved = val_nll < best_val;
        if improved {
            best_val = val_nll;
            best = params.clone();
        }
        let entry = EpochLog {
            epoch,
            train_nll,
            val_nll,
            wall_seconds,
        };
        history.push(entry);
        if let Some((f, path)) = log_file.as_mut() {
            writeln!(f, "{epoch},{train_nll},{val_nll}").map_err(|e| Error::io(&*path, e))?;
        }
        if let Some(dir) = io.out_dir {
            let meta = serde_json::json!({
                "epoch": epoch,
                "step": opt.step,
                "train_nll": train_nll,
                "val_nll": val_nll,
                "best_val_nll": best_val,
                "seed": cfg.seed,
                "graph": graph,
            });
            let ck = checkpoint_of(&params, &opt, meta.clone());
            ck.save(&dir.join(format!("epoch_{epoch:03}.egat")))?;
            if improved {
                ck.save(&dir.join("best.egat"))?;
            }
        }
    }
    if history.is_empty() && best_val.is_infinite() {
        if let Some(dir) = io.out_dir {
            let meta = serde_json::json!({"epoch": start_epoch, "step": opt.step, "seed": cfg.seed, "graph": graph});
            checkpoint_of(&params, &opt, meta).save(&dir.join("best.egat"))?;
        }
    }
    Ok(TrainOutcome {
        params,
        best,
        best_val_nll: best_val,
        optimizer: opt,
        history,
    })
}
