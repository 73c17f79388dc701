//! Closed-loop simulation: each step every live agent samples a future
//! trajectory from the policy, snaps it onto the road network, and tracks it
//! with a finite-horizon LQ controller. Only the first planned step is
//! applied (receding horizon).

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::egat::{forward, GaussianPrediction, ModelParams};
use crate::error::{Error, Result};
use crate::exec::{derive_seed, Exec};
use crate::geom::{Polyline, Vec2};
use crate::graph::{build_snapshot, AgentView, Frame, GraphConfig, World};
use crate::ingest::{NormalizedRow, SignalSchedule, TrajectoryDataset, VehicleType};
use crate::road::{project_to_network, RoadNetwork};

/// Tracking problem for one agent, both axes.
#[derive(Debug, Clone, PartialEq)]
pub struct LqrProblem {
    pub p0: Vec2,
    pub v0: Vec2,
    /// Targets for steps `1..=T`.
    pub targets: Vec<Vec2>,
    pub dt: f64,
    /// Acceleration penalty weight.
    pub eta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LqrPlan {
    /// Planned positions for steps `1..=T`.
    pub positions: Vec<Vec2>,
    /// Planned velocities for steps `1..=T`.
    pub velocities: Vec<Vec2>,
    /// Controls for steps `0..T`.
    pub accelerations: Vec<Vec2>,
    pub cost: f64,
}

impl LqrProblem {
    pub fn validate(&self) -> Result<()> {
        if self.targets.is_empty() {
            return Err(Error::Config("LQR horizon must be at least 1".into()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!("LQR dt must be positive, got {}", self.dt)));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("LQR eta must be positive, got {}", self.eta)));
        }
        if !self.p0.is_finite() || !self.v0.is_finite() {
            return Err(Error::numeric("LQR initial state is not finite"));
        }
        if self.targets.iter().any(|t| !t.is_finite()) {
            return Err(Error::numeric("LQR targets are not finite"));
        }
        Ok(())
    }

    /// Cost of an arbitrary control sequence under the problem dynamics.
    pub fn cost_of(&self, controls: &[Vec2]) -> f64 {
        let (pos, _) = rollout(self.p0, self.v0, controls, self.dt);
        let track: f64 = pos.iter().zip(&self.targets).map(|(p, r)| (*p - *r).norm_sq()).sum();
        track + self.eta * controls.iter().map(|a| a.norm_sq()).sum::<f64>()
    }
}

/// Integrate `p' = p + dt v + dt^2 a`, `v' = v + dt a`.
pub fn rollout(p0: Vec2, v0: Vec2, controls: &[Vec2], dt: f64) -> (Vec<Vec2>, Vec<Vec2>) {
    let mut p = p0;
    let mut v = v0;
    let mut ps = Vec::with_capacity(controls.len());
    let mut vs = Vec::with_capacity(controls.len());
    for &a in controls {
        p = p + v * dt + a * (dt * dt);
        v = v + a * dt;
        ps.push(p);
        vs.push(v);
    }
    (ps, vs)
}

type M2 = [[f64; 2]; 2];

/// Optimal controls for one axis via the backward affine Riccati recursion.
/// Value function `V_t(x) = x'P x + 2 q'x + c`; `x = (p, v)`.
fn lqr_axis(p0: f64, v0: f64, targets: &[f64], dt: f64, eta: f64) -> Vec<f64> {
    let n = targets.len();
    let b = [dt * dt, dt];
    // A = [[1, dt], [0, 1]]
    let mut gains: Vec<([f64; 2], f64)> = vec![([0.0; 2], 0.0); n];
    let mut p: M2 = [[1.0, 0.0], [0.0, 0.0]];
    let mut q = [-targets[n - 1], 0.0];
    for t in (0..n).rev() {
        // P B, B'P B, B'P A, B'q
        let pb = [p[0][0] * b[0] + p[0][1] * b[1], p[1][0] * b[0] + p[1][1] * b[1]];
        let s = eta + b[0] * pb[0] + b[1] * pb[1];
        // (B'P A) = (P B)' A
        let bpa = [pb[0], pb[0] * dt + pb[1]];
        let bq = b[0] * q[0] + b[1] * q[1];
        let k = [bpa[0] / s, bpa[1] / s];
        let kk = bq / s;
        gains[t] = (k, kk);
        // A'P A
        let apa = [
            [p[0][0], p[0][0] * dt + p[0][1]],
            [
                p[1][0] + dt * p[0][0],
                dt * dt * p[0][0] + dt * (p[0][1] + p[1][0]) + p[1][1],
            ],
        ];
        let aq = [q[0], dt * q[0] + q[1]];
        let mut np = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                np[i][j] = apa[i][j] - bpa[i] * bpa[j] / s;
            }
        }
        let nq = [aq[0] - bpa[0] * kk, aq[1] - bpa[1] * kk];
        p = np;
        q = nq;
        if t > 0 {
            // stage cost (p_t - r_t)^2 at t >= 1
            p[0][0] += 1.0;
            q[0] -= targets[t - 1];
        }
    }
    let mut x = [p0, v0];
    let mut us = Vec::with_capacity(n);
    for &(k, kk) in &gains {
        let u = -(k[0] * x[0] + k[1] * x[1]) - kk;
        x = [x[0] + dt * x[1] + dt * dt * u, x[1] + dt * u];
        us.push(u);
    }
    us
}

/// Minimize `sum_{t=1..T} |p_t - r_t|^2 + eta sum_{t=0..T-1} |a_t|^2`.
pub fn lqr_solve(prob: &LqrProblem) -> Result<LqrPlan> {
    prob.validate()?;
    let tx: Vec<f64> = prob.targets.iter().map(|t| t.x).collect();
    let ty: Vec<f64> = prob.targets.iter().map(|t| t.y).collect();
    let ax = lqr_axis(prob.p0.x, prob.v0.x, &tx, prob.dt, prob.eta);
    let ay = lqr_axis(prob.p0.y, prob.v0.y, &ty, prob.dt, prob.eta);
    let accelerations: Vec<Vec2> = ax.into_iter().zip(ay).map(|(x, y)| Vec2::new(x, y)).collect();
    let (positions, velocities) = rollout(prob.p0, prob.v0, &accelerations, prob.dt);
    let cost = prob.cost_of(&accelerations);
    if !cost.is_finite() {
        return Err(Error::numeric("LQR cost is not finite"));
    }
    Ok(LqrPlan {
        positions,
        velocities,
        accelerations,
        cost,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    #[default]
    Sample,
    Mean,
}

/// `T` world-frame points for node `m`: independent draws per step (or the
/// means) mapped out of the node frame.
pub fn sample_positions<R: Rng + ?Sized>(
    pred: &GaussianPrediction,
    m: usize,
    frame: &Frame,
    rng: &mut R,
    mode: SampleMode,
) -> Vec<Vec2> {
    (0..pred.horizon)
        .map(|t| {
            let mu = pred.mean(m, t);
            let local = match mode {
                SampleMode::Mean => mu,
                SampleMode::Sample => {
                    let (l11, l21, l22) = pred.cholesky(m, t);
                    let z1: f64 = rng.sample(StandardNormal);
                    let z2: f64 = rng.sample(StandardNormal);
                    mu + Vec2::new(l11 * z1, l21 * z1 + l22 * z2)
                }
            };
            frame.from_frame(local)
        })
        .collect()
}

/// Replace every point by its foot point on the network.
pub fn project_targets(points: &[Vec2], net: &RoadNetwork) -> Result<Vec<Vec2>> {
    points.iter().map(|&p| Ok(project_to_network(p, net)?.point)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub dt: f64,
    /// Acceleration penalty of the tracking controller.
    pub eta_a: f64,
    pub despawn_radius: f64,
    pub sample_mode: SampleMode,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            dt: 0.4,
            eta_a: 1.0,
            despawn_radius: 5.0,
            sample_mode: SampleMode::Sample,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !(self.eta_a > 0.0) || !(self.despawn_radius >= 0.0) {
            return Err(Error::Config("sim: dt and eta_a must be positive, despawn_radius non-negative".into()));
        }
        Ok(())
    }
}

/// How future positions are predicted before projection and tracking.
#[derive(Debug, Clone, Copy)]
pub enum Policy<'a> {
    /// Learned Gaussian policy; the graph config must match the model.
    Egat {
        params: &'a ModelParams,
        graph: &'a GraphConfig,
    },
    /// Extrapolate the current velocity over `horizon` steps.
    ConstantVelocity { horizon: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimAgent {
    pub id: u64,
    pub vehicle_type: VehicleType,
    pub position: Vec2,
    pub velocity: Vec2,
    pub route: Polyline,
    pub progress: f64,
    /// Own past positions, most recent first.
    pub history: VecDeque<Option<Vec2>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PendingEntry {
    pub entry_step: i64,
    pub id: u64,
    pub vehicle_type: VehicleType,
    pub position: Vec2,
    pub velocity: Vec2,
    pub route: Polyline,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationState {
    pub step: i64,
    pub dt: f64,
    pub agents: Vec<SimAgent>,
    /// Sorted by entry step, then id.
    pub pending: VecDeque<PendingEntry>,
    /// Ids already removed, in removal order.
    pub removed: Vec<u64>,
}

impl SimulationState {
    /// Replay the recorded entries of `ds` from `start_step` on. Agents
    /// already live at `start_step` enter there at their recorded state.
    pub fn from_dataset(ds: &TrajectoryDataset, start_step: i64) -> Self {
        let mut pending: Vec<PendingEntry> = ds
            .agents
            .iter()
            .filter(|a| a.last_step() >= start_step)
            .map(|a| {
                let s = a.first_step.max(start_step);
                PendingEntry {
                    entry_step: s,
                    id: a.agent_id,
                    vehicle_type: a.vehicle_type,
                    position: a.position_at(s).expect("live agent"),
                    velocity: a.velocity_at(s, ds.dt).unwrap_or(Vec2::new(0.0, 0.0)),
                    route: a.route.clone(),
                }
            })
            .collect();
        pending.sort_by(|a, b| a.entry_step.cmp(&b.entry_step).then(a.id.cmp(&b.id)));
        SimulationState {
            step: start_step,
            dt: ds.dt,
            agents: Vec::new(),
            pending: pending.into(),
            removed: Vec::new(),
        }
    }

    pub fn clock(&self) -> f64 {
        self.step as f64 * self.dt
    }

    /// Move every pending agent whose entry step has come into the world.
    pub fn admit(&mut self, history_len: usize) {
        while self.pending.front().is_some_and(|p| p.entry_step <= self.step) {
            let p = self.pending.pop_front().expect("front exists");
            let progress = p.route.project(p.position).arc;
            self.agents.push(SimAgent {
                id: p.id,
                vehicle_type: p.vehicle_type,
                position: p.position,
                velocity: p.velocity,
                route: p.route,
                progress,
                history: vec![None; history_len].into(),
            });
        }
    }

    pub fn log_rows(&self, out: &mut Vec<NormalizedRow>) {
        let t = self.clock();
        for a in &self.agents {
            out.push(NormalizedRow {
                agent_id: a.id,
                vehicle_type: a.vehicle_type,
                time: t,
                x: a.position.x,
                y: a.position.y,
                speed: Some(a.velocity.norm()),
            });
        }
    }

    pub fn is_finished(&self) -> bool {
        self.agents.is_empty() && self.pending.is_empty()
    }
}

fn history_len(policy: &Policy<'_>) -> usize {
    match policy {
        Policy::Egat { graph, .. } => graph.history_len,
        Policy::ConstantVelocity { .. } => 0,
    }
}

/// Per-agent world-frame targets for this step, before projection.
fn predict(
    state: &SimulationState,
    policy: &Policy<'_>,
    net: &RoadNetwork,
    signals: &SignalSchedule,
    cfg: &SimConfig,
    exec: Exec,
) -> Result<Vec<Vec<Vec2>>> {
    match policy {
        Policy::ConstantVelocity { horizon } => Ok(state
            .agents
            .iter()
            .map(|a| {
                (1..=*horizon)
                    .map(|t| a.position + a.velocity * (t as f64 * state.dt))
                    .collect()
            })
            .collect()),
        Policy::Egat { params, graph } => {
            let hist: Vec<Vec<Option<Vec2>>> =
                state.agents.iter().map(|a| a.history.iter().copied().collect()).collect();
            let world = World {
                clock: state.clock(),
                agents: state
                    .agents
                    .iter()
                    .zip(&hist)
                    .map(|(a, h)| AgentView {
                        id: a.id,
                        vehicle_type: a.vehicle_type,
                        position: a.position,
                        speed: a.velocity.norm(),
                        route: &a.route,
                        progress: a.progress,
                        history: h,
                        future: None,
                    })
                    .collect(),
                signals,
            };
            let gcfg = GraphConfig {
                perturb: false,
                ..**graph
            };
            // inference snapshots never draw from the rng
            let mut unused = ChaCha8Rng::seed_from_u64(0);
            let snap = build_snapshot(&world, net, &gcfg, &mut unused, false);
            let pred = forward(&snap, params)?;
            let step = state.step;
            Ok(exec.map_range(state.agents.len(), |m| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, 0x51, step as u64, state.agents[m].id]));
                sample_positions(&pred, m, &snap.frames[m], &mut rng, cfg.sample_mode)
            }))
        }
    }
}

/// One synchronous step: admit, predict, project, track, apply the first
/// planned step, despawn, advance the clock.
pub fn step(
    state: &mut SimulationState,
    policy: &Policy<'_>,
    net: &RoadNetwork,
    signals: &SignalSchedule,
    cfg: &SimConfig,
    exec: Exec,
) -> Result<()> {
    state.admit(history_len(policy));
    if !state.agents.is_empty() {
        let raw = predict(state, policy, net, signals, cfg, exec)?;
        let dt = state.dt;
        let plans = exec.map_range(state.agents.len(), |m| -> Result<(Vec2, Vec2)> {
            let a = &state.agents[m];
            let targets = project_targets(&raw[m], net)?;
            let plan = lqr_solve(&LqrProblem {
                p0: a.position,
                v0: a.velocity,
                targets,
                dt,
                eta: cfg.eta_a,
            })?;
            Ok((plan.positions[0], plan.velocities[0]))
        });
        for (a, plan) in state.agents.iter_mut().zip(plans) {
            let (p, v) = plan?;
            if !p.is_finite() || !v.is_finite() {
                return Err(Error::numeric(format!("agent {} state is not finite", a.id)));
            }
            if !a.history.is_empty() {
                a.history.pop_back();
                a.history.push_front(Some(a.position));
            }
            a.position = p;
            a.velocity = v;
            a.progress = a.route.project_window(p, a.progress - 5.0, a.progress + 60.0).arc;
        }
    }
    let r = cfg.despawn_radius;
    let removed = &mut state.removed;
    state.agents.retain(|a| {
        let keep = a.position.dist(a.route.last()) > r;
        if !keep {
            removed.push(a.id);
        }
        keep
    });
    state.step += 1;
    Ok(())
}

/// Admit and log, then `steps` times step, admit and log.
pub fn run(
    state: &mut SimulationState,
    policy: &Policy<'_>,
    net: &RoadNetwork,
    signals: &SignalSchedule,
    steps: usize,
    cfg: &SimConfig,
    exec: Exec,
) -> Result<Vec<NormalizedRow>> {
    cfg.validate()?;
    if (state.dt - cfg.dt).abs() > 1e-12 {
        return Err(Error::Config(format!("sim dt {} differs from data dt {}", cfg.dt, state.dt)));
    }
    let hl = history_len(policy);
    let mut rows = Vec::new();
    state.admit(hl);
    state.log_rows(&mut rows);
    for _ in 0..steps {
        step(state, policy, net, signals, cfg, exec)?;
        state.admit(hl);
        state.log_rows(&mut rows);
    }
    Ok(rows)
}

/// Provenance of a simulation log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub seed: u64,
    pub policy: String,
    pub config: SimConfig,
    pub checkpoint_hash: Option<String>,
    /// Simulated duration (s).
    pub duration: f64,
    pub steps: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::road::Road;

    fn straight() -> RoadNetwork {
        RoadNetwork::new(vec![Road {
            id: 1,
            centerline: Polyline::new(vec![Vec2::new(0.0, 0.0), Vec2::new(500.0, 0.0)]),
            lane_count: 1,
            lane_width: 3.5,
            signalized: false,
            successors: vec![],
        }])
        .unwrap()
    }

    #[test]
    fn constant_velocity_target_needs_no_control() {
        for eta in [1e-3, 1.0, 100.0] {
            let prob = LqrProblem {
                p0: Vec2::new(0.0, 0.0),
                v0: Vec2::new(1.0, 0.0),
                targets: (1..=6).map(|t| Vec2::new(0.4 * t as f64, 0.0)).collect(),
                dt: 0.4,
                eta,
            };
            let plan = lqr_solve(&prob).unwrap();
            for (a, (p, r)) in plan.accelerations.iter().zip(plan.positions.iter().zip(&prob.targets)) {
                assert!(a.norm() < 1e-12);
                assert!(p.dist(*r) < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_problems() {
        let base = LqrProblem {
            p0: Vec2::new(0.0, 0.0),
            v0: Vec2::new(0.0, 0.0),
            targets: vec![Vec2::new(1.0, 0.0)],
            dt: 0.4,
            eta: 1.0,
        };
        assert!(lqr_solve(&LqrProblem { targets: vec![], ..base.clone() }).is_err());
        assert!(lqr_solve(&LqrProblem { eta: 0.0, ..base.clone() }).is_err());
        let e = lqr_solve(&LqrProblem {
            targets: vec![Vec2::new(f64::NAN, 0.0)],
            ..base
        })
        .unwrap_err();
        assert!(e.is_numeric());
    }

    #[test]
    fn projection_snaps_to_foot_point() {
        let net = straight();
        let got = project_targets(&[Vec2::new(10.0, 2.0), Vec2::new(20.0, 0.0)], &net).unwrap();
        assert_eq!(got, vec![Vec2::new(10.0, 0.0), Vec2::new(20.0, 0.0)]);
    }

    fn one_agent(pos: Vec2, vel: Vec2) -> SimulationState {
        SimulationState {
            step: 0,
            dt: 0.4,
            agents: vec![],
            pending: vec![PendingEntry {
                entry_step: 0,
                id: 7,
                vehicle_type: VehicleType::Car,
                position: pos,
                velocity: vel,
                route: Polyline::new(vec![Vec2::new(0.0, 0.0), Vec2::new(100.0, 0.0)]),
            }]
            .into(),
            removed: vec![],
        }
    }

    #[test]
    fn empty_world_only_advances_clock() {
        let mut s = SimulationState {
            step: 3,
            dt: 0.4,
            agents: vec![],
            pending: VecDeque::new(),
            removed: vec![],
        };
        let cv = Policy::ConstantVelocity { horizon: 5 };
        step(&mut s, &cv, &straight(), &SignalSchedule::new(), &SimConfig::default(), Exec::Sequential).unwrap();
        assert_eq!(s.step, 4);
        assert!(s.agents.is_empty() && s.removed.is_empty());
    }

    #[test]
    fn agent_at_goal_is_removed() {
        let mut s = one_agent(Vec2::new(100.0, 0.0), Vec2::new(0.0, 0.0));
        let cv = Policy::ConstantVelocity { horizon: 5 };
        step(&mut s, &cv, &straight(), &SignalSchedule::new(), &SimConfig::default(), Exec::Sequential).unwrap();
        assert!(s.agents.is_empty());
        assert_eq!(s.removed, vec![7]);
    }

    #[test]
    fn constant_velocity_run_is_exact_and_on_grid() {
        let mut s = one_agent(Vec2::new(0.0, 0.0), Vec2::new(10.0, 0.0));
        let cv = Policy::ConstantVelocity { horizon: 5 };
        let rows = run(&mut s, &cv, &straight(), &SignalSchedule::new(), 10, &SimConfig::default(), Exec::Sequential)
            .unwrap();
        assert_eq!(rows.len(), 11);
        for (k, r) in rows.iter().enumerate() {
            assert_eq!(r.time, k as f64 * 0.4);
            assert!((r.x - 4.0 * k as f64).abs() < 1e-9);
            assert!((r.speed.unwrap() - 10.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_duration_logs_initial_state() {
        let mut s = one_agent(Vec2::new(0.0, 0.0), Vec2::new(10.0, 0.0));
        let cv = Policy::ConstantVelocity { horizon: 5 };
        let rows = run(&mut s, &cv, &straight(), &SignalSchedule::new(), 0, &SimConfig::default(), Exec::Sequential)
            .unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!((rows[0].x, rows[0].y), (0.0, 0.0));
    }
}
