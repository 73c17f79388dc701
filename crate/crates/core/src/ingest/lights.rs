use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::TrajectoryDataset;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::road::{RoadId, RoadNetwork};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalState {
    Green,
    Red,
    Unknown,
}

impl SignalState {
    pub fn index(self) -> usize {
        match self {
            SignalState::Green => 0,
            SignalState::Red => 1,
            SignalState::Unknown => 2,
        }
    }
}

/// Half-open `[start, end)` interval with a fixed state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "(f64, f64, SignalState)", into = "(f64, f64, SignalState)")]
pub struct Phase {
    pub start: f64,
    pub end: f64,
    pub state: SignalState,
}

impl From<(f64, f64, SignalState)> for Phase {
    fn from((start, end, state): (f64, f64, SignalState)) -> Self {
        Phase { start, end, state }
    }
}

impl From<Phase> for (f64, f64, SignalState) {
    fn from(p: Phase) -> Self {
        (p.start, p.end, p.state)
    }
}

/// Per-road green/red intervals. Roads or times not covered are `Unknown`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SignalSchedule {
    roads: BTreeMap<RoadId, Vec<Phase>>,
}

impl SignalSchedule {
    pub fn new() -> Self {
        Self::default()
    }

    /// Install phases for a road. Phases must be sorted and non-overlapping.
    pub fn set(&mut self, road: RoadId, phases: Vec<Phase>) -> Result<()> {
        for w in phases.windows(2) {
            if w[1].start < w[0].end {
                return Err(Error::data(format!("road {road}: overlapping phases")));
            }
        }
        if phases.iter().any(|p| !(p.start < p.end)) {
            return Err(Error::data(format!("road {road}: empty phase")));
        }
        self.roads.insert(road, phases);
        Ok(())
    }

    pub fn phases(&self, road: RoadId) -> &[Phase] {
        self.roads.get(&road).map_or(&[], Vec::as_slice)
    }

    pub fn roads(&self) -> impl Iterator<Item = RoadId> + '_ {
        self.roads.keys().copied()
    }

    pub fn lookup(&self, road: RoadId, t: f64) -> SignalState {
        let phases = self.phases(road);
        let i = phases.partition_point(|p| p.end <= t);
        match phases.get(i) {
            Some(p) if p.start <= t => p.state,
            _ => SignalState::Unknown,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: BTreeMap<RoadId, Vec<Phase>> = serde_json::from_str(&text)?;
        let mut s = SignalSchedule::new();
        for (r, p) in raw {
            s.set(r, p)?;
        }
        Ok(s)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

/// Thresholds for the stopped-queue light estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LightEstimatorConfig {
    /// Distance upstream of the road end inspected for queues (m).
    pub stop_zone: f64,
    /// Speed below which a vehicle counts as stopped (m/s).
    pub v_stop: f64,
    /// Displacement over one step that counts as advancing (m).
    pub advance_eps: f64,
    /// Deceleration that marks the onset of a stop (m/s^2).
    pub brake_decel: f64,
    /// Phases shorter than this are merged into a neighbour (s).
    pub min_phase: f64,
    /// Vehicles farther than this from the road centerline are ignored (m).
    pub max_offset: f64,
    pub gap_fill: GapFill,
    /// Replace each road's estimate by the best-fitting fixed two-phase
    /// cycle when one explains the evidence well enough.
    pub fit_cycle: bool,
    /// Cycle lengths searched by the fit (s).
    pub cycle_min: f64,
    pub cycle_max: f64,
    /// Minimum fraction of labelled steps the fitted cycle must agree with.
    pub cycle_min_agreement: f64,
}

/// How unlabelled steps between two labels are resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GapFill {
    /// Copy the preceding label, so each boundary sits on the first
    /// evidence of the new state (steps before the first label copy it).
    #[default]
    Previous,
    /// Copy the nearest label, ties to the earlier one.
    Nearest,
}

impl Default for LightEstimatorConfig {
    fn default() -> Self {
        LightEstimatorConfig {
            stop_zone: 20.0,
            v_stop: 0.5,
            advance_eps: 0.05,
            brake_decel: 0.3,
            min_phase: 4.0,
            max_offset: 5.0,
            gap_fill: GapFill::Previous,
            fit_cycle: false,
            cycle_min: 30.0,
            cycle_max: 150.0,
            cycle_min_agreement: 0.8,
        }
    }
}

#[derive(Clone, Copy)]
struct Near {
    road: usize,
    arc: f64,
    distance: f64,
}

/// Estimate a schedule for every signalized road from vehicle motion.
///
/// Per step, a road is labelled red when the vehicle nearest its end (within
/// `stop_zone`) is stopped and does not advance; the stop is back-dated to
/// the onset of that vehicle's braking. It is labelled green when a vehicle
/// crosses the road end or a stopped head vehicle pulls away. Red wins
/// conflicts. Unlabelled steps are filled per `gap_fill` and phases shorter than
/// `min_phase` are merged away. Roads that never receive a label stay
/// unknown.
pub fn estimate_traffic_lights(
    ds: &TrajectoryDataset,
    net: &RoadNetwork,
    cfg: &LightEstimatorConfig,
    exec: Exec,
) -> Result<SignalSchedule> {
    let signalized: Vec<usize> = net
        .roads()
        .iter()
        .enumerate()
        .filter(|(_, r)| r.signalized)
        .map(|(i, _)| i)
        .collect();
    if signalized.is_empty() {
        return Err(Error::data("network has no signalized road"));
    }
    let mut schedule = SignalSchedule::new();
    let Some((k0, k1)) = ds.step_range() else {
        return Ok(schedule);
    };
    let near: Vec<Vec<Near>> = exec.map(&ds.agents, |a| {
        a.positions
            .iter()
            .map(|&p| {
                let h = net.project(p).expect("non-empty network");
                Near {
                    road: h.road_index,
                    arc: h.arc_length,
                    distance: h.distance,
                }
            })
            .collect()
    });
    let n = (k1 - k0 + 1) as usize;
    let dt = ds.dt;
    let per_road = exec.map(&signalized, |&ri| {
        let road = &net.roads()[ri];
        let len = road.length();
        let end = road.end();
        let tangent = road.centerline.tangent_at(len);
        let mut labels: Vec<Option<SignalState>> = vec![None; n];
        let mut red = vec![false; n];
        let mut green = vec![false; n];
        // zone[k] = (agent, local index) upstream of the end within stop_zone
        let mut zone: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
        for (ai, a) in ds.agents.iter().enumerate() {
            for (li, nr) in near[ai].iter().enumerate() {
                let p = a.positions[li];
                if nr.road == ri
                    && nr.distance <= cfg.max_offset
                    && nr.arc >= len - cfg.stop_zone
                    && (p - end).dot(tangent) <= 0.0
                {
                    zone[(a.first_step + li as i64 - k0) as usize].push((ai, li));
                }
            }
        }
        for k in 0..n {
            let mut head: Option<(usize, usize, f64)> = None;
            for &(ai, li) in &zone[k] {
                let a = &ds.agents[ai];
                if let Some(&q) = a.positions.get(li + 1) {
                    if (q - end).dot(tangent) > 0.0 {
                        green[k] = true;
                    }
                }
                let arc = near[ai][li].arc;
                if head.is_none_or(|(_, _, h)| arc > h) {
                    head = Some((ai, li, arc));
                }
            }
            let Some((ai, li, _)) = head else { continue };
            let a = &ds.agents[ai];
            let crawled = li > 0
                && (a.positions[li] - a.positions[li - 1]).dot(tangent) < cfg.advance_eps;
            if !(a.speeds[li] < cfg.v_stop || crawled) || li + 1 >= a.positions.len() {
                continue;
            }
            let advance = (a.positions[li + 1] - a.positions[li]).dot(tangent);
            if advance >= cfg.advance_eps {
                green[k] = true;
                continue;
            }
            red[k] = true;
            // back-date to the braking onset of this vehicle
            let mut start = li;
            while start > 0 && a.speeds[start - 1] > a.speeds[start] + 1e-9 {
                start -= 1;
            }
            if let Some(onset) =
                (start..li).find(|&j| (a.speeds[j + 1] - a.speeds[j]) / dt < -cfg.brake_decel)
            {
                for j in onset..li {
                    let kk = a.first_step + j as i64 - k0;
                    if kk >= 0 {
                        red[kk as usize] = true;
                    }
                }
            }
        }
        for k in 0..n {
            labels[k] = if red[k] {
                Some(SignalState::Red)
            } else if green[k] {
                Some(SignalState::Green)
            } else {
                None
            };
        }
        let fitted = if cfg.fit_cycle { fit_fixed_cycle(&labels, k0, dt, cfg) } else { None };
        let phases = fitted.unwrap_or_else(|| phases_from_labels(&labels, k0, dt, cfg.min_phase, cfg.gap_fill));
        (road.id, phases)
    });
    for (id, phases) in per_road {
        schedule.set(id, phases)?;
    }
    Ok(schedule)
}

fn phases_from_labels(labels: &[Option<SignalState>], k0: i64, dt: f64, min_phase: f64, fill: GapFill) -> Vec<Phase> {
    let n = labels.len();
    let labelled: Vec<usize> = (0..n).filter(|&k| labels[k].is_some()).collect();
    if labelled.is_empty() {
        return Vec::new();
    }
    // nearest-label fill, ties to the earlier label
    let mut filled = vec![SignalState::Unknown; n];
    let mut j = 0;
    for (k, slot) in filled.iter_mut().enumerate() {
        while j + 1 < labelled.len() && labelled[j + 1] <= k {
            j += 1;
        }
        let mut pick = labelled[j];
        if pick < k && fill == GapFill::Nearest {
            if let Some(&next) = labelled.get(j + 1) {
                if next - k < k - pick {
                    pick = next;
                }
            }
        }
        *slot = labels[pick].expect("labelled");
    }
    let mut runs: Vec<(usize, usize, SignalState)> = Vec::new();
    for (k, &s) in filled.iter().enumerate() {
        match runs.last_mut() {
            Some(r) if r.2 == s => r.1 = k + 1,
            _ => runs.push((k, k + 1, s)),
        }
    }
    loop {
        if runs.len() < 2 {
            break;
        }
        let (idx, shortest) = runs
            .iter()
            .enumerate()
            .map(|(i, r)| (i, r.1 - r.0))
            .min_by_key(|&(_, len)| len)
            .expect("non-empty");
        if (shortest as f64) * dt >= min_phase - 1e-9 {
            break;
        }
        let target = if idx == 0 { 1 } else { idx - 1 };
        let state = runs[target].2;
        runs[idx].2 = state;
        let mut merged: Vec<(usize, usize, SignalState)> = Vec::with_capacity(runs.len());
        for r in runs {
            match merged.last_mut() {
                Some(m) if m.2 == r.2 => m.1 = r.1,
                _ => merged.push(r),
            }
        }
        runs = merged;
    }
    runs.into_iter()
        .map(|(a, b, state)| Phase {
            start: (k0 + a as i64) as f64 * dt,
            end: (k0 + b as i64) as f64 * dt,
            state,
        })
        .collect()
}

/// Best fixed cycle `(period, green start, green length)` in steps, with its
/// agreement fraction. Labels are folded on absolute step indices, then
/// the cyclic green window maximising agreement is found with prefix sums.
/// Red evidence is dated to braking onsets while green evidence is sparse,
/// so the green window is stretched over unlabelled bins up to the next red.
fn best_cycle(labels: &[Option<SignalState>], k0: i64, p_lo: usize, p_hi: usize, min_len: usize) -> Option<(usize, usize, usize, f64)> {
    let total = labels.iter().filter(|l| l.is_some()).count();
    if total == 0 {
        return None;
    }
    let fold = |period: usize| {
        // (greens - reds, labelled count) per bin
        let mut w = vec![(0i64, 0usize); period];
        for (k, l) in labels.iter().enumerate() {
            let b = (k0 + k as i64).rem_euclid(period as i64) as usize;
            match l {
                Some(SignalState::Green) => w[b].0 += 1,
                Some(SignalState::Red) => w[b].0 -= 1,
                _ => continue,
            }
            w[b].1 += 1;
        }
        w
    };
    let reds = labels.iter().filter(|l| **l == Some(SignalState::Red)).count() as i64;
    let mut best: Option<(i64, usize, usize, usize)> = None;
    for period in p_lo..=p_hi {
        if 2 * min_len > period {
            continue;
        }
        let w = fold(period);
        let mut pre = vec![0i64; 2 * period + 1];
        for i in 0..2 * period {
            pre[i + 1] = pre[i] + w[i % period].0;
        }
        for start in 0..period {
            for len in min_len..=period - min_len {
                let score = reds + pre[start + len] - pre[start];
                if best.is_none_or(|b| score > b.0) {
                    best = Some((score, period, start, len));
                }
            }
        }
    }
    let (score, period, start, mut len) = best?;
    let w = fold(period);
    while len < period - min_len && w[(start + len) % period].1 == 0 {
        len += 1;
    }
    Some((period, start, len, score as f64 / total as f64))
}

fn fit_fixed_cycle(labels: &[Option<SignalState>], k0: i64, dt: f64, cfg: &LightEstimatorConfig) -> Option<Vec<Phase>> {
    let n = labels.len();
    let p_lo = (cfg.cycle_min / dt).ceil().max(2.0) as usize;
    let p_hi = ((cfg.cycle_max / dt).floor() as usize).min(n);
    let min_len = ((cfg.min_phase / dt).ceil() as usize).max(1);
    let (period, start, len, agreement) = best_cycle(labels, k0, p_lo, p_hi, min_len)?;
    if agreement < cfg.cycle_min_agreement {
        return None;
    }
    let state = |k: usize| {
        let b = (k0 + k as i64).rem_euclid(period as i64) as usize;
        if (b + period - start) % period < len {
            SignalState::Green
        } else {
            SignalState::Red
        }
    };
    let mut phases: Vec<Phase> = Vec::new();
    for k in 0..n {
        let s = state(k);
        let (t0, t1) = ((k0 + k as i64) as f64 * dt, (k0 + k as i64 + 1) as f64 * dt);
        match phases.last_mut() {
            Some(p) if p.state == s => p.end = t1,
            _ => phases.push(Phase { start: t0, end: t1, state: s }),
        }
    }
    Some(phases)
}
