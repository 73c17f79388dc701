//! Rule-based baseline: IDM car following, MOBIL lane choice on multi-lane
//! roads, and gradient-based IDM calibration.
//!
//! Agents move by arc length along their route polyline. The leader is the
//! nearest agent ahead whose position lies on the follower's route (within a
//! lateral tolerance) with a compatible heading. A red signal at the end of a
//! signalized road on the route acts as a standing leader at the stop line.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::geom::{Polyline, Vec2};
use crate::ingest::{NormalizedRow, SignalSchedule, SignalState, TrajectoryDataset, VehicleType};
use crate::road::{RoadId, RoadNetwork};

/// Deceleration applied when the gap is already closed.
pub const EMERGENCY_DECEL: f64 = 9.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdmParams {
    /// Desired speed (m/s).
    pub v0: f64,
    /// Desired time headway (s).
    pub t_hw: f64,
    /// Jam distance (m).
    pub s0: f64,
    pub a_max: f64,
    pub b_comf: f64,
    pub delta: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        IdmParams {
            v0: 13.0,
            t_hw: 1.5,
            s0: 2.0,
            a_max: 1.5,
            b_comf: 2.0,
            delta: 4.0,
        }
    }
}

impl IdmParams {
    pub fn validate(&self) -> Result<()> {
        let all = [self.v0, self.t_hw, self.s0, self.a_max, self.b_comf, self.delta];
        if all.iter().all(|x| x.is_finite() && *x > 0.0) {
            Ok(())
        } else {
            Err(Error::Config("IDM parameters must be positive".into()))
        }
    }

    fn to_array(self) -> [f64; 6] {
        [self.v0, self.t_hw, self.s0, self.a_max, self.b_comf, self.delta]
    }

    fn from_array(a: [f64; 6]) -> Self {
        IdmParams {
            v0: a[0],
            t_hw: a[1],
            s0: a[2],
            a_max: a[3],
            b_comf: a[4],
            delta: a[5],
        }
    }

    /// Bumper gap at which a follower at speed `v` is in equilibrium behind a
    /// leader at the same speed.
    pub fn equilibrium_gap(&self, v: f64) -> f64 {
        let r = 1.0 - (v / self.v0).powf(self.delta);
        if r <= 0.0 {
            return f64::INFINITY;
        }
        (self.s0 + v * self.t_hw) / r.sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MobilParams {
    pub politeness: f64,
    /// Changing threshold (m/s^2).
    pub threshold: f64,
    /// Maximum braking imposed on the new follower (m/s^2).
    pub b_safe: f64,
}

impl Default for MobilParams {
    fn default() -> Self {
        MobilParams {
            politeness: 0.3,
            threshold: 0.2,
            b_safe: 4.0,
        }
    }
}

fn desired_gap(v: f64, dv: f64, p: &IdmParams) -> (f64, bool) {
    let dynamic = v * p.t_hw + v * dv / (2.0 * (p.a_max * p.b_comf).sqrt());
    if dynamic > 0.0 {
        (p.s0 + dynamic, true)
    } else {
        (p.s0, false)
    }
}

/// IDM acceleration for speed `v`, approach rate `dv = v - v_leader` and
/// bumper gap `s` (`None` for a free road).
pub fn idm_acceleration(v: f64, dv: f64, s: Option<f64>, p: &IdmParams) -> f64 {
    let free = 1.0 - (v.max(0.0) / p.v0).powf(p.delta);
    match s {
        None => p.a_max * free,
        Some(s) if s <= 0.0 => -EMERGENCY_DECEL,
        Some(s) => {
            let (star, _) = desired_gap(v, dv, p);
            p.a_max * (free - (star / s).powi(2))
        }
    }
}

/// Acceleration and its partial derivatives with respect to
/// `(v0, t_hw, s0, a_max, b_comf, delta)` for a leader at gap `s > 0`.
pub fn idm_gradient(v: f64, dv: f64, s: f64, p: &IdmParams) -> (f64, [f64; 6]) {
    let a = p.a_max;
    let ratio = v.max(0.0) / p.v0;
    let pow = ratio.powf(p.delta);
    let (star, active) = desired_gap(v, dv, p);
    let inter = (star / s).powi(2);
    let acc = a * (1.0 - pow - inter);
    // d acc / d star
    let d_star = -2.0 * a * star / (s * s);
    let sqrt_ab = (a * p.b_comf).sqrt();
    let (ds_t, ds_a, ds_b) = if active {
        let k = v * dv / (4.0 * sqrt_ab);
        (v, -k / a, -k / p.b_comf)
    } else {
        (0.0, 0.0, 0.0)
    };
    let d_v0 = a * p.delta * pow / p.v0;
    let d_delta = if ratio > 0.0 { -a * pow * ratio.ln() } else { 0.0 };
    let d_s0 = d_star;
    let d_t = d_star * ds_t;
    let d_a = (1.0 - pow - inter) + d_star * ds_a;
    let d_b = d_star * ds_b;
    (acc, [d_v0, d_t, d_s0, d_a, d_b, d_delta])
}

/// Another vehicle relative to the ego in one lane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    /// Bumper-to-bumper gap (m).
    pub gap: f64,
    pub speed: f64,
}

/// Leader and follower of the ego in one lane.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LaneOption {
    pub leader: Option<Neighbor>,
    pub follower: Option<Neighbor>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MobilEgo {
    pub speed: f64,
    pub length: f64,
    pub current: LaneOption,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LaneDecision {
    Keep,
    Change(usize),
}

fn follow(v: f64, leader: Option<Neighbor>, idm: &IdmParams) -> f64 {
    match leader {
        Some(l) => idm_acceleration(v, v - l.speed, Some(l.gap), idm),
        None => idm_acceleration(v, 0.0, None, idm),
    }
}

/// MOBIL: pick the candidate lane with the largest incentive among those
/// that are safe for the new follower and clear the threshold.
pub fn mobil_decision(ego: &MobilEgo, candidates: &[LaneOption], p: &MobilParams, idm: &IdmParams) -> LaneDecision {
    let v = ego.speed;
    let a_cur = follow(v, ego.current.leader, idm);
    // old follower: now follows ego; after the change, follows ego's leader
    let old_gain = match ego.current.follower {
        Some(f) => {
            let before = idm_acceleration(f.speed, f.speed - v, Some(f.gap), idm);
            let after = match ego.current.leader {
                Some(l) => {
                    idm_acceleration(f.speed, f.speed - l.speed, Some(f.gap + ego.length + l.gap), idm)
                }
                None => idm_acceleration(f.speed, 0.0, None, idm),
            };
            after - before
        }
        None => 0.0,
    };
    let mut best: Option<(f64, usize)> = None;
    for (k, lane) in candidates.iter().enumerate() {
        if lane.leader.is_some_and(|l| l.gap <= 0.0) || lane.follower.is_some_and(|f| f.gap <= 0.0) {
            continue;
        }
        let a_new = follow(v, lane.leader, idm);
        let new_gain = match lane.follower {
            Some(f) => {
                let after = idm_acceleration(f.speed, f.speed - v, Some(f.gap), idm);
                if after < -p.b_safe {
                    continue;
                }
                let before = match lane.leader {
                    Some(l) => {
                        idm_acceleration(f.speed, f.speed - l.speed, Some(f.gap + ego.length + l.gap), idm)
                    }
                    None => idm_acceleration(f.speed, 0.0, None, idm),
                };
                after - before
            }
            None => 0.0,
        };
        let incentive = a_new - a_cur + p.politeness * (new_gain + old_gain);
        if incentive > p.threshold && best.is_none_or(|(b, _)| incentive > b) {
            best = Some((incentive, k));
        }
    }
    best.map_or(LaneDecision::Keep, |(_, k)| LaneDecision::Change(k))
}

/// One leader-follower observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdmTuple {
    pub v: f64,
    pub dv: f64,
    pub s: f64,
    pub a: f64,
}

/// Leader-follower tuples: both on the same (nearest) road, follower behind
/// by a bumper gap in `(0, max_gap)`, acceleration by central difference.
pub fn extract_tuples(ds: &TrajectoryDataset, net: &RoadNetwork, vehicle_length: f64, max_gap: f64) -> Vec<IdmTuple> {
    let Some((lo, _)) = ds.step_range() else {
        return Vec::new();
    };
    let live = ds.live_index();
    let mut out = Vec::new();
    for (k, idx) in live.iter().enumerate() {
        let step = lo + k as i64;
        let mut on_road: Vec<(usize, f64, usize)> = idx
            .iter()
            .filter_map(|&i| {
                let p = ds.agents[i].position_at(step)?;
                let h = net.project(p).ok()?;
                Some((h.road_index, h.arc_length, i))
            })
            .collect();
        on_road.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)));
        for w in on_road.windows(2) {
            let (f, l) = (w[0], w[1]);
            if f.0 != l.0 {
                continue;
            }
            let gap = l.1 - f.1 - vehicle_length;
            if !(gap > 0.0 && gap < max_gap) {
                continue;
            }
            let fa = &ds.agents[f.2];
            let (Some(vm), Some(v), Some(vp)) = (fa.speed_at(step - 1), fa.speed_at(step), fa.speed_at(step + 1)) else {
                continue;
            };
            let Some(vl) = ds.agents[l.2].speed_at(step) else { continue };
            out.push(IdmTuple {
                v,
                dv: v - vl,
                s: gap,
                a: (vp - vm) / (2.0 * ds.dt),
            });
        }
    }
    out
}

/// Mean squared error between IDM and observed accelerations.
pub fn idm_loss(tuples: &[IdmTuple], p: &IdmParams) -> f64 {
    let n = tuples.len().max(1) as f64;
    tuples
        .iter()
        .map(|t| (idm_acceleration(t.v, t.dv, Some(t.s), p) - t.a).powi(2))
        .sum::<f64>()
        / n
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub iterations: usize,
    /// Adam step size in log-parameter space.
    pub lr: f64,
    /// Also fit the acceleration exponent.
    pub fit_delta: bool,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            iterations: 3000,
            lr: 0.02,
            fit_delta: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub params: IdmParams,
    pub initial_loss: f64,
    pub best_loss: f64,
    /// Best loss so far after each iteration.
    pub loss_history: Vec<f64>,
}

/// Adam on the acceleration MSE over `log(params)`. Returns the best
/// parameters seen.
pub fn calibrate_idm(tuples: &[IdmTuple], init: &IdmParams, cfg: &CalibrationConfig) -> Result<Calibration> {
    init.validate()?;
    if tuples.is_empty() {
        return Err(Error::data("no leader-follower tuples to calibrate on"));
    }
    let n = tuples.len() as f64;
    let fit = |k: usize| k != 5 || cfg.fit_delta;
    let mut theta: [f64; 6] = init.to_array().map(f64::ln);
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let mut m = [0.0; 6];
    let mut v = [0.0; 6];
    let initial_loss = idm_loss(tuples, init);
    let mut best = (initial_loss, *init);
    let mut history = Vec::with_capacity(cfg.iterations);
    for it in 1..=cfg.iterations {
        let p = IdmParams::from_array(theta.map(f64::exp));
        let mut grad = [0.0; 6];
        let mut loss = 0.0;
        for t in tuples {
            let (a, d) = idm_gradient(t.v, t.dv, t.s, &p);
            let r = a - t.a;
            loss += r * r;
            for k in 0..6 {
                grad[k] += 2.0 * r * d[k];
            }
        }
        loss /= n;
        if !loss.is_finite() {
            return Err(Error::numeric("calibration loss is not finite"));
        }
        if loss < best.0 {
            best = (loss, p);
        }
        let pa = p.to_array();
        let c1 = 1.0 - f64::powi(b1, it as i32);
        let c2 = 1.0 - f64::powi(b2, it as i32);
        for k in (0..6).filter(|&k| fit(k)) {
            // chain rule through p = exp(theta)
            let g = grad[k] / n * pa[k];
            m[k] = b1 * m[k] + (1.0 - b1) * g;
            v[k] = b2 * v[k] + (1.0 - b2) * g * g;
            theta[k] -= cfg.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
        }
        history.push(best.0);
    }
    let last = IdmParams::from_array(theta.map(f64::exp));
    let last_loss = idm_loss(tuples, &last);
    if last_loss < best.0 {
        best = (last_loss, last);
        if let Some(h) = history.last_mut() {
            *h = last_loss;
        }
    }
    Ok(Calibration {
        params: best.1,
        initial_loss,
        best_loss: best.0,
        loss_history: history,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuleConfig {
    pub dt: f64,
    pub vehicle_length: f64,
    /// Hard deceleration bound (m/s^2).
    pub b_emergency: f64,
    /// A red light is ignored when stopping would need more than this.
    pub b_dilemma: f64,
    /// Distance within which red lights are respected (m).
    pub signal_lookahead: f64,
    /// Distance within which leaders are searched (m).
    pub leader_lookahead: f64,
    /// Maximum distance of a leader from the follower's route (m).
    pub lateral_tolerance: f64,
    /// Minimum cosine between leader and follower headings.
    pub heading_tolerance: f64,
    pub despawn_radius: f64,
    /// A signalized road end within this distance of a route is a stop line.
    pub stop_match_radius: f64,
    /// Delay admission while the entry point is occupied.
    pub block_spawn: bool,
    pub mobil: MobilParams,
}

impl Default for RuleConfig {
    fn default() -> Self {
        RuleConfig {
            dt: 0.4,
            vehicle_length: 5.0,
            b_emergency: EMERGENCY_DECEL,
            b_dilemma: 4.0,
            signal_lookahead: 80.0,
            leader_lookahead: 100.0,
            lateral_tolerance: 1.0,
            heading_tolerance: 0.5,
            despawn_radius: 5.0,
            stop_match_radius: 3.0,
            block_spawn: false,
            mobil: MobilParams::default(),
        }
    }
}

/// Minimum cosine between route and road direction at a stop line.
pub const STOP_LINE_ALIGNMENT: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StopLine {
    pub arc: f64,
    pub road: RoadId,
}

/// Signalized road ends lying on `route` with a matching direction. The
/// direction test is strict (about 25 degrees) so a turn across an
/// intersection does not pick up the stop line of the crossing approach.
pub fn stop_lines(route: &Polyline, net: &RoadNetwork, radius: f64) -> Vec<StopLine> {
    let mut out: Vec<StopLine> = net
        .roads()
        .iter()
        .filter(|r| r.signalized)
        .filter_map(|r| {
            let end = r.end();
            let h = route.project(end);
            let along = route.tangent_at(h.arc).dot(r.centerline.tangent_at(r.length()));
            (h.distance <= radius && along > STOP_LINE_ALIGNMENT).then_some(StopLine { arc: h.arc, road: r.id })
        })
        .collect();
    out.sort_by(|a, b| a.arc.total_cmp(&b.arc).then(a.road.cmp(&b.road)));
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct RuleAgent {
    pub id: u64,
    pub vehicle_type: VehicleType,
    pub route: Polyline,
    pub arc: f64,
    pub speed: f64,
    pub idm: IdmParams,
    /// Virtual lane on multi-lane roads (0 = rightmost).
    pub lane: u32,
    pub stops: Vec<StopLine>,
}

impl RuleAgent {
    pub fn position(&self) -> Vec2 {
        self.route.point_at(self.arc)
    }

    pub fn heading(&self) -> Vec2 {
        self.route.tangent_at(self.arc)
    }
}

/// An agent waiting for its entry step.
#[derive(Debug, Clone, PartialEq)]
pub struct PendingAgent {
    pub entry_step: i64,
    pub id: u64,
    pub vehicle_type: VehicleType,
    pub route: Polyline,
    pub speed: f64,
    pub idm: IdmParams,
}

/// Rule-based simulation on the shared clock grid.
#[derive(Debug, Clone)]
pub struct RuleSim {
    pub cfg: RuleConfig,
    pub step: i64,
    pub agents: Vec<RuleAgent>,
    /// Sorted by (entry_step, id).
    pending: Vec<PendingAgent>,
    next_pending: usize,
    /// Agents admitted late because the entry point was occupied.
    pub delayed_admissions: usize,
}

struct Road1 {
    index: usize,
    arc: f64,
    lanes: u32,
}

impl RuleSim {
    pub fn new(cfg: RuleConfig, start_step: i64, mut pending: Vec<PendingAgent>) -> Self {
        pending.sort_by_key(|p| (p.entry_step, p.id));
        RuleSim {
            cfg,
            step: start_step,
            agents: Vec::new(),
            pending,
            next_pending: 0,
            delayed_admissions: 0,
        }
    }

    pub fn clock(&self) -> f64 {
        self.step as f64 * self.cfg.dt
    }

    pub fn pending_count(&self) -> usize {
        self.pending.len() - self.next_pending
    }

    fn entry_blocked(&self, route: &Polyline) -> bool {
        let start = route.first();
        let clear = self.cfg.vehicle_length + 2.0;
        self.agents.iter().any(|a| {
            let p = a.position();
            p.dist(start) < clear + 1.0 && route.project_window(p, 0.0, clear + 1.0).distance < self.cfg.lateral_tolerance
        })
    }

    /// Move pending agents whose entry step has come into the live set.
    pub fn admit(&mut self, net: &RoadNetwork) {
        let mut waiting = Vec::new();
        while self.next_pending < self.pending.len() && self.pending[self.next_pending].entry_step <= self.step {
            let p = self.pending[self.next_pending].clone();
            self.next_pending += 1;
            if self.cfg.block_spawn && self.entry_blocked(&p.route) {
                waiting.push(p);
                continue;
            }
            let stops = stop_lines(&p.route, net, self.cfg.stop_match_radius);
            self.agents.push(RuleAgent {
                id: p.id,
                vehicle_type: p.vehicle_type,
                route: p.route,
                arc: 0.0,
                speed: p.speed,
                idm: p.idm,
                lane: 0,
                stops,
            });
        }
        if !waiting.is_empty() {
            self.delayed_admissions += waiting.len();
            // retry next step, keeping the sorted order
            for mut w in waiting.into_iter().rev() {
                w.entry_step = self.step + 1;
                self.next_pending -= 1;
                self.pending[self.next_pending] = w;
            }
        }
        self.agents.sort_by_key(|a| a.id);
    }

    fn road_of(&self, a: &RuleAgent, net: &RoadNetwork) -> Option<Road1> {
        let h = net.project(a.position()).ok()?;
        (h.distance <= self.cfg.lateral_tolerance + 2.0).then(|| Road1 {
            index: h.road_index,
            arc: h.arc_length,
            lanes: net.roads()[h.road_index].lane_count,
        })
    }

    /// Nearest agent ahead on `me`'s route: (gap, speed).
    fn leader(&self, i: usize, roads: &[Option<Road1>]) -> Option<Neighbor> {
        let me = &self.agents[i];
        let pos = me.position();
        let look = self.cfg.leader_lookahead;
        let mut best: Option<(f64, u64, f64)> = None;
        for (j, o) in self.agents.iter().enumerate() {
            if j == i {
                continue;
            }
            let q = o.position();
            if q.dist(pos) > look + self.cfg.vehicle_length {
                continue;
            }
            if let (Some(a), Some(b)) = (&roads[i], &roads[j]) {
                if a.index == b.index && a.lanes >= 2 && me.lane != o.lane {
                    continue;
                }
            }
            let h = me.route.project_window(q, me.arc, me.arc + look);
            let d = h.arc - me.arc;
            if d <= 0.0 || h.distance > self.cfg.lateral_tolerance {
                continue;
            }
            if o.heading().dot(me.route.tangent_at(h.arc)) <= self.cfg.heading_tolerance {
                continue;
            }
            if best.is_none_or(|(bd, bid, _)| d < bd || (d == bd && o.id < bid)) {
                best = Some((d, o.id, o.speed));
            }
        }
        best.map(|(d, _, v)| Neighbor {
            gap: d - self.cfg.vehicle_length,
            speed: v,
        })
    }

    fn acceleration(&self, i: usize, roads: &[Option<Road1>], signals: &SignalSchedule) -> f64 {
        let me = &self.agents[i];
        let v = me.speed;
        let p = &me.idm;
        let mut a = follow(v, self.leader(i, roads), p);
        let clock = self.clock();
        for stop in &me.stops {
            let gap = stop.arc - me.arc - 0.5 * self.cfg.vehicle_length;
            if gap < 0.0 {
                continue;
            }
            if gap > self.cfg.signal_lookahead {
                break;
            }
            if signals.lookup(stop.road, clock) != SignalState::Red {
                continue;
            }
            if gap > 0.0 && v * v / (2.0 * gap) > self.cfg.b_dilemma {
                continue;
            }
            a = a.min(idm_acceleration(v, v, Some(gap), p));
            break;
        }
        a.clamp(-self.cfg.b_emergency, p.a_max)
    }

    fn lane_changes(&self, roads: &[Option<Road1>]) -> Vec<Option<u32>> {
        let len = self.cfg.vehicle_length;
        (0..self.agents.len())
            .map(|i| {
                let r = roads[i].as_ref()?;
                if r.lanes < 2 {
                    return None;
                }
                let me = &self.agents[i];
                let lane_view = |lane: u32| {
                    let mut opt = LaneOption::default();
                    for (j, o) in self.agents.iter().enumerate() {
                        let Some(ro) = roads[j].as_ref() else { continue };
                        if j == i || ro.index != r.index || o.lane != lane {
                            continue;
                        }
                        let d = ro.arc - r.arc;
                        let n = Neighbor {
                            gap: d.abs() - len,
                            speed: o.speed,
                        };
                        if d > 0.0 && opt.leader.is_none_or(|l| n.gap < l.gap) {
                            opt.leader = Some(n);
                        } else if d <= 0.0 && opt.follower.is_none_or(|f| n.gap < f.gap) {
                            opt.follower = Some(n);
                        }
                    }
                    opt
                };
                let mut lanes = Vec::new();
                if me.lane > 0 {
                    lanes.push(me.lane - 1);
                }
                if me.lane + 1 < r.lanes {
                    lanes.push(me.lane + 1);
                }
                let cands: Vec<LaneOption> = lanes.iter().map(|&l| lane_view(l)).collect();
                let ego = MobilEgo {
                    speed: me.speed,
                    length: len,
                    current: lane_view(me.lane),
                };
                match mobil_decision(&ego, &cands, &self.cfg.mobil, &me.idm) {
                    LaneDecision::Keep => None,
                    LaneDecision::Change(k) => Some(lanes[k]),
                }
            })
            .collect()
    }

    /// Advance every live agent one step from the pre-step state, then
    /// remove agents that reached their goal.
    pub fn advance(&mut self, net: &RoadNetwork, signals: &SignalSchedule, exec: Exec) {
        let dt = self.cfg.dt;
        let roads: Vec<Option<Road1>> = self.agents.iter().map(|a| self.road_of(a, net)).collect();
        let acc = exec.map_range(self.agents.len(), |i| self.acceleration(i, &roads, signals));
        let changes = self.lane_changes(&roads);
        for ((a, acc), change) in self.agents.iter_mut().zip(acc).zip(changes) {
            let mut acc = acc;
            if a.speed + acc * dt < 0.0 {
                acc = -a.speed / dt;
            }
            a.arc = (a.arc + a.speed * dt + acc * dt * dt).min(a.route.length());
            a.speed = (a.speed + acc * dt).max(0.0);
            if let Some(l) = change {
                a.lane = l;
            }
        }
        let radius = self.cfg.despawn_radius;
        self.agents.retain(|a| a.position().dist(a.route.last()) >= radius);
        // reset lanes for agents that left multi-lane roads
        for a in &mut self.agents {
            let p = a.position();
            if let Ok(h) = net.project(p) {
                let lanes = net.roads()[h.road_index].lane_count;
                if a.lane >= lanes {
                    a.lane = lanes.saturating_sub(1);
                }
            }
        }
        self.step += 1;
    }

    pub fn log_rows(&self, out: &mut Vec<NormalizedRow>) {
        let t = self.clock();
        for a in &self.agents {
            let p = a.position();
            out.push(NormalizedRow {
                agent_id: a.id,
                vehicle_type: a.vehicle_type,
                time: t,
                x: p.x,
                y: p.y,
                speed: Some(a.speed),
            });
        }
    }

    /// Admit, log, then `steps` times advance, admit and log.
    pub fn run(&mut self, net: &RoadNetwork, signals: &SignalSchedule, steps: usize, exec: Exec) -> Vec<NormalizedRow> {
        let mut rows = Vec::new();
        self.admit(net);
        self.log_rows(&mut rows);
        for _ in 0..steps {
            self.advance(net, signals, exec);
            self.admit(net);
            self.log_rows(&mut rows);
        }
        rows
    }
}

/// Pending agents that replay each recorded agent's entry (time, route,
/// initial speed) with the given IDM parameters.
pub fn pending_from_dataset(ds: &TrajectoryDataset, idm: &IdmParams) -> Vec<PendingAgent> {
    ds.agents
        .iter()
        .map(|a| PendingAgent {
            entry_step: a.first_step,
            id: a.agent_id,
            vehicle_type: a.vehicle_type,
            route: a.route.clone(),
            speed: a.speeds.first().copied().unwrap_or(0.0),
            idm: *idm,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::road::Road;

    fn p() -> IdmParams {
        IdmParams {
            v0: 15.0,
            ..IdmParams::default()
        }
    }

    #[test]
    fn idm_reference_values() {
        let p = p();
        assert_eq!(idm_acceleration(15.0, 0.0, None, &p), 0.0);
        assert_eq!(idm_acceleration(0.0, 0.0, None, &p), 1.5);
        let a = idm_acceleration(10.0, 0.0, Some(30.0), &p);
        let want = 1.5 * (1.0 - (10.0f64 / 15.0).powi(4) - (17.0f64 / 30.0).powi(2));
        assert!((a - want).abs() < 1e-12);
        assert!((a - 0.722_037).abs() < 1e-5);
        assert_eq!(idm_acceleration(5.0, 0.0, Some(0.0), &p), -EMERGENCY_DECEL);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let base = p();
        for &(v, dv, s) in &[(10.0, 2.0, 25.0), (3.0, -1.0, 8.0), (12.0, 0.0, 60.0), (0.0, -3.0, 5.0)] {
            let (_, g) = idm_gradient(v, dv, s, &base);
            let arr = base.to_array();
            for k in 0..6 {
                let h = 1e-6 * arr[k];
                let mut up = arr;
                up[k] += h;
                let mut dn = arr;
                dn[k] -= h;
                let fd = (idm_acceleration(v, dv, Some(s), &IdmParams::from_array(up))
                    - idm_acceleration(v, dv, Some(s), &IdmParams::from_array(dn)))
                    / (2.0 * h);
                assert!((fd - g[k]).abs() < 1e-6 * fd.abs().max(1.0), "{k}: {fd} vs {}", g[k]);
            }
        }
    }

    #[test]
    fn mobil_changes_away_from_slow_leader() {
        let idm = p();
        let ego = MobilEgo {
            speed: 10.0,
            length: 5.0,
            current: LaneOption {
                leader: Some(Neighbor { gap: 10.0, speed: 2.0 }),
                follower: None,
            },
        };
        let d = mobil_decision(&ego, &[LaneOption::default()], &MobilParams::default(), &idm);
        assert_eq!(d, LaneDecision::Change(0));
        assert_eq!(mobil_decision(&ego, &[], &MobilParams::default(), &idm), LaneDecision::Keep);
        let same = mobil_decision(&ego, &[ego.current], &MobilParams::default(), &idm);
        assert_eq!(same, LaneDecision::Keep);
    }

    #[test]
    fn mobil_respects_safety() {
        let idm = p();
        let ego = MobilEgo {
            speed: 5.0,
            length: 5.0,
            current: LaneOption {
                leader: Some(Neighbor { gap: 5.0, speed: 0.0 }),
                follower: None,
            },
        };
        let tight = LaneOption {
            leader: None,
            follower: Some(Neighbor { gap: 1.0, speed: 14.0 }),
        };
        assert_eq!(mobil_decision(&ego, &[tight], &MobilParams::default(), &idm), LaneDecision::Keep);
    }

    #[test]
    fn calibration_with_zero_iterations_returns_init() {
        let t = [IdmTuple {
            v: 5.0,
            dv: 0.0,
            s: 20.0,
            a: 0.3,
        }];
        let c = calibrate_idm(&t, &p(), &CalibrationConfig { iterations: 0, ..Default::default() }).unwrap();
        assert_eq!(c.params, p());
        assert!(c.loss_history.is_empty());
        assert!(calibrate_idm(&[], &p(), &CalibrationConfig::default()).is_err());
    }

    fn straight(len: f64, signalized: bool) -> RoadNetwork {
        RoadNetwork::new(vec![Road {
            id: 1,
            centerline: Polyline::new(vec![Vec2::ZERO, Vec2::new(len, 0.0)]),
            lane_count: 1,
            lane_width: 3.5,
            signalized,
            successors: vec![],
        }])
        .unwrap()
    }

    fn pending(id: u64, step: i64, len: f64, speed: f64) -> PendingAgent {
        PendingAgent {
            entry_step: step,
            id,
            vehicle_type: VehicleType::Car,
            route: Polyline::new(vec![Vec2::ZERO, Vec2::new(len, 0.0)]).resample(5.0),
            speed,
            idm: p(),
        }
    }

    #[test]
    fn free_agent_accelerates_toward_v0() {
        let net = straight(2000.0, false);
        let mut sim = RuleSim::new(RuleConfig::default(), 0, vec![pending(1, 0, 2000.0, 0.0)]);
        sim.run(&net, &SignalSchedule::new(), 200, Exec::Sequential);
        let v = sim.agents[0].speed;
        assert!(v > 14.0 && v <= 15.0 + 1e-9, "{v}");
    }

    #[test]
    fn red_light_stops_the_agent_before_the_line() {
        let net = straight(200.0, true);
        let mut sched = SignalSchedule::new();
        sched
            .set(
                1,
                vec![crate::ingest::Phase {
                    start: 0.0,
                    end: 1e6,
                    state: SignalState::Red,
                }],
            )
            .unwrap();
        // route runs past the stop line
        let mut pa = pending(1, 0, 200.0, 10.0);
        pa.route = Polyline::new(vec![Vec2::ZERO, Vec2::new(400.0, 0.0)]).resample(5.0);
        let mut sim = RuleSim::new(RuleConfig::default(), 0, vec![pa]);
        sim.run(&net, &sched, 500, Exec::Sequential);
        let a = &sim.agents[0];
        assert!(a.speed < 1e-3);
        let front = a.arc + 2.5;
        assert!(front < 200.0 && front > 200.0 - 20.0, "{front}");
    }

    #[test]
    fn platoon_settles_at_equilibrium_spacing() {
        let net = straight(5000.0, false);
        let mut lead = pending(1, 0, 5000.0, 8.0);
        lead.idm.v0 = 8.0;
        let mut sim = RuleSim::new(RuleConfig::default(), 0, vec![lead]);
        sim.admit(&net);
        sim.agents[0].arc = 60.0;
        let mut f = pending(2, 0, 5000.0, 8.0);
        f.entry_step = 0;
        sim.pending = vec![f];
        sim.next_pending = 0;
        sim.admit(&net);
        let sched = SignalSchedule::new();
        let mut gaps = Vec::new();
        for _ in 0..400 {
            sim.advance(&net, &sched, Exec::Sequential);
            gaps.push(sim.agents[0].arc - sim.agents[1].arc - 5.0);
        }
        let want = p().equilibrium_gap(8.0);
        let last = *gaps.last().unwrap();
        assert!((last - want).abs() < 0.5, "{last} vs {want}");
        let early = gaps[..200].iter().map(|g| (g - want).abs()).fold(0.0, f64::max);
        let late = gaps[200..].iter().map(|g| (g - want).abs()).fold(0.0, f64::max);
        assert!(late <= early);
    }
}
