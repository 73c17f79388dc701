use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::raw::{LocalTrajectory, VehicleType};
use crate::error::{Error, Result};
use crate::geom::{Polyline, Vec2};

/// Resampling and cleaning parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResampleConfig {
    /// Simulation clock spacing in seconds.
    pub dt: f64,
    /// Arc-length spacing of route polylines in meters.
    pub route_spacing: f64,
    /// Tracks spanning less than this many seconds are dropped.
    pub min_duration: f64,
}

impl Default for ResampleConfig {
    fn default() -> Self {
        ResampleConfig {
            dt: 0.4,
            route_spacing: 5.0,
            min_duration: 5.0,
        }
    }
}

/// One agent on the shared clock grid. Sample `k` is at time
/// `(first_step + k) * dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentRecord {
    pub agent_id: u64,
    pub vehicle_type: VehicleType,
    pub first_step: i64,
    pub positions: Vec<Vec2>,
    pub speeds: Vec<f64>,
    pub route: Polyline,
}

impl AgentRecord {
    pub fn last_step(&self) -> i64 {
        self.first_step + self.positions.len() as i64 - 1
    }

    pub fn entry_time(&self, dt: f64) -> f64 {
        self.first_step as f64 * dt
    }

    pub fn exit_time(&self, dt: f64) -> f64 {
        self.last_step() as f64 * dt
    }

    pub fn is_live(&self, step: i64) -> bool {
        step >= self.first_step && step <= self.last_step()
    }

    pub fn position_at(&self, step: i64) -> Option<Vec2> {
        self.is_live(step)
            .then(|| self.positions[(step - self.first_step) as usize])
    }

    pub fn speed_at(&self, step: i64) -> Option<f64> {
        self.is_live(step).then(|| self.speeds[(step - self.first_step) as usize])
    }

    /// Finite-difference velocity at `step` (forward at the first sample,
    /// backward at the last).
    pub fn velocity_at(&self, step: i64, dt: f64) -> Option<Vec2> {
        if !self.is_live(step) || self.positions.len() < 2 {
            return None;
        }
        let k = (step - self.first_step) as usize;
        let (a, b) = if k + 1 < self.positions.len() {
            (k, k + 1)
        } else {
            (k - 1, k)
        };
        Some((self.positions[b] - self.positions[a]) * (1.0 / dt))
    }
}

/// Agents on a uniform clock of spacing `dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    pub dt: f64,
    pub agents: Vec<AgentRecord>,
}

impl TrajectoryDataset {
    pub fn new(dt: f64, mut agents: Vec<AgentRecord>) -> Self {
        agents.sort_by_key(|a| a.agent_id);
        TrajectoryDataset { dt, agents }
    }

    pub fn is_empty(&self) -> bool {
        self.agents.is_empty()
    }

    /// Inclusive (first, last) step over all agents.
    pub fn step_range(&self) -> Option<(i64, i64)> {
        let lo = self.agents.iter().map(|a| a.first_step).min()?;
        let hi = self.agents.iter().map(AgentRecord::last_step).max()?;
        Some((lo, hi))
    }

    /// Indices of agents live at each step of `step_range`.
    pub fn live_index(&self) -> Vec<Vec<usize>> {
        let Some((lo, hi)) = self.step_range() else {
            return Vec::new();
        };
        let mut out = vec![Vec::new(); (hi - lo + 1) as usize];
        for (i, a) in self.agents.iter().enumerate() {
            for s in a.first_step..=a.last_step() {
                out[(s - lo) as usize].push(i);
            }
        }
        out
    }

    pub fn agent(&self, id: u64) -> Option<&AgentRecord> {
        self.agents
            .binary_search_by_key(&id, |a| a.agent_id)
            .ok()
            .map(|i| &self.agents[i])
    }

    pub fn to_rows(&self) -> Vec<NormalizedRow> {
        let mut rows = Vec::new();
        for a in &self.agents {
            for (k, (&p, &v)) in a.positions.iter().zip(&a.speeds).enumerate() {
                rows.push(NormalizedRow {
                    agent_id: a.agent_id,
                    vehicle_type: a.vehicle_type,
                    time: (a.first_step + k as i64) as f64 * self.dt,
                    x: p.x,
                    y: p.y,
                    speed: Some(v),
                });
            }
        }
        rows
    }

    /// Rebuild from normalized rows that already lie on the `dt` grid. Each
    /// agent's rows must cover a contiguous run of steps. Missing speeds are
    /// recomputed from positions.
    pub fn from_rows(rows: &[NormalizedRow], dt: f64, route_spacing: f64) -> Result<Self> {
        let mut by_agent: BTreeMap<u64, Vec<&NormalizedRow>> = BTreeMap::new();
        for r in rows {
            by_agent.entry(r.agent_id).or_default().push(r);
        }
        let mut agents = Vec::with_capacity(by_agent.len());
        for (id, mut rs) in by_agent {
            rs.sort_by(|a, b| a.time.total_cmp(&b.time));
            let steps: Vec<i64> = rs
                .iter()
                .map(|r| grid_step(r.time, dt))
                .collect::<Result<_>>()?;
            if steps.windows(2).any(|w| w[1] != w[0] + 1) {
                return Err(Error::data(format!(
                    "agent {id}: samples are not contiguous on the dt grid"
                )));
            }
            let vt = rs[0].vehicle_type;
            if rs.iter().any(|r| r.vehicle_type != vt) {
                return Err(Error::data(format!("agent {id}: inconsistent type")));
            }
            let positions: Vec<Vec2> = rs.iter().map(|r| Vec2::new(r.x, r.y)).collect();
            let speeds = match rs.iter().map(|r| r.speed).collect::<Option<Vec<f64>>>() {
                Some(s) => s,
                None => speeds_from_positions(&positions, dt),
            };
            agents.push(AgentRecord {
                agent_id: id,
                vehicle_type: vt,
                first_step: steps[0],
                route: build_route(&positions, route_spacing),
                positions,
                speeds,
            });
        }
        Ok(TrajectoryDataset::new(dt, agents))
    }

    pub fn load_normalized(path: impl AsRef<Path>, dt: f64, route_spacing: f64) -> Result<Self> {
        Self::from_rows(&read_normalized(path)?, dt, route_spacing)
    }

    pub fn save_normalized(&self, path: impl AsRef<Path>) -> Result<()> {
        write_normalized(path, &self.to_rows())
    }
}

fn grid_step(t: f64, dt: f64) -> Result<i64> {
    let k = (t / dt).round();
    if (t - k * dt).abs() > 1e-6 * dt.max(1.0) {
        return Err(Error::data(format!("time {t} is not on the {dt} s grid")));
    }
    Ok(k as i64)
}

fn speeds_from_positions(p: &[Vec2], dt: f64) -> Vec<f64> {
    let n = p.len();
    (0..n)
        .map(|k| match n {
            0 | 1 => 0.0,
            _ if k == 0 => p[1].dist(p[0]) / dt,
            _ if k == n - 1 => p[n - 1].dist(p[n - 2]) / dt,
            _ => p[k + 1].dist(p[k - 1]) / (2.0 * dt),
        })
        .collect()
}

/// Arc-length resampled path; degenerate (stationary) paths keep two points.
pub fn build_route(path: &[Vec2], spacing: f64) -> Polyline {
    let mut pts: Vec<Vec2> = Vec::with_capacity(path.len());
    for &p in path {
        if pts.last() != Some(&p) {
            pts.push(p);
        }
    }
    if pts.len() < 2 {
        let p = pts.first().copied().unwrap_or(Vec2::ZERO);
        return Polyline::new(vec![p, p]);
    }
    Polyline::new(pts).resample(spacing)
}

/// Interpolate a local-frame track onto the global `dt` grid. Returns `None`
/// (with a warning) for tracks with fewer than two samples or spanning less
/// than `min_duration`.
pub fn resample(track: &LocalTrajectory, cfg: &ResampleConfig) -> Option<AgentRecord> {
    let s = &track.samples;
    if s.len() < 2 {
        log::warn!("agent {}: single-sample track dropped", track.agent_id);
        return None;
    }
    let t0 = s[0].time;
    let t1 = s[s.len() - 1].time;
    if t1 - t0 < cfg.min_duration {
        log::debug!("agent {}: track shorter than {} s dropped", track.agent_id, cfg.min_duration);
        return None;
    }
    let dt = cfg.dt;
    let k0 = (t0 / dt - 1e-9).ceil() as i64;
    let k1 = (t1 / dt + 1e-9).floor() as i64;
    if k1 <= k0 {
        return None;
    }
    let has_speed = s.iter().all(|x| x.speed.is_some());
    let mut positions = Vec::with_capacity((k1 - k0 + 1) as usize);
    let mut speeds = Vec::with_capacity(positions.capacity());
    let mut j = 0usize;
    for k in k0..=k1 {
        let t = (k as f64 * dt).clamp(t0, t1);
        while j + 2 < s.len() && s[j + 1].time <= t {
            j += 1;
        }
        let (a, b) = (&s[j], &s[j + 1]);
        let u = ((t - a.time) / (b.time - a.time)).clamp(0.0, 1.0);
        positions.push(a.pos.lerp(b.pos, u));
        if has_speed {
            let (va, vb) = (a.speed.unwrap_or(0.0), b.speed.unwrap_or(0.0));
            speeds.push(va + (vb - va) * u);
        }
    }
    if !has_speed {
        speeds = speeds_from_positions(&positions, dt);
    }
    let raw_path: Vec<Vec2> = s.iter().map(|x| x.pos).collect();
    Some(AgentRecord {
        agent_id: track.agent_id,
        vehicle_type: track.vehicle_type,
        first_step: k0,
        positions,
        speeds,
        route: build_route(&raw_path, cfg.route_spacing),
    })
}

/// A dataset tagged with the recording day.
#[derive(Debug, Clone)]
pub struct Recording {
    pub day: u32,
    pub name: String,
    pub dataset: TrajectoryDataset,
}

/// Recordings from every day but the last go to training; the last day is
/// held out. Output order is (day, name), independent of input order.
pub fn split_by_day(mut recs: Vec<Recording>) -> Result<(Vec<Recording>, Vec<Recording>)> {
    recs.sort_by(|a, b| a.day.cmp(&b.day).then_with(|| a.name.cmp(&b.name)));
    let last = recs
        .last()
        .map(|r| r.day)
        .ok_or_else(|| Error::data("no recordings to split"))?;
    if recs.first().map(|r| r.day) == Some(last) {
        return Err(Error::data("day split needs recordings from at least two days"));
    }
    let (test, train): (Vec<_>, Vec<_>) = recs.into_iter().partition(|r| r.day == last);
    Ok((train, test))
}

/// Long-form trajectory row: `agent_id,type,time,x,y,speed`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizedRow {
    pub agent_id: u64,
    #[serde(rename = "type")]
    pub vehicle_type: VehicleType,
    pub time: f64,
    pub x: f64,
    pub y: f64,
    pub speed: Option<f64>,
}

pub fn write_normalized(path: impl AsRef<Path>, rows: &[NormalizedRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_normalized(path: impl AsRef<Path>) -> Result<Vec<NormalizedRow>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let expected = ["agent_id", "type", "time", "x", "y", "speed"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: format!("expected header {}", expected.join(",")),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.deserialize::<NormalizedRow>().enumerate() {
        let row = rec.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 2,
            msg: e.to_string(),
        })?;
        if !(row.time.is_finite() && row.x.is_finite() && row.y.is_finite()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 2,
                msg: "non-finite value".into(),
            });
        }
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::super::raw::LocalSample;
    use super::*;

    fn track(samples: &[(f64, f64, f64)]) -> LocalTrajectory {
        LocalTrajectory {
            agent_id: 1,
            vehicle_type: VehicleType::Car,
            samples: samples
                .iter()
                .map(|&(t, x, v)| LocalSample {
                    time: t,
                    pos: Vec2::new(x, 0.0),
                    speed: Some(v),
                })
                .collect(),
        }
    }

    fn cfg() -> ResampleConfig {
        ResampleConfig {
            min_duration: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn midpoint_interpolation() {
        let r = resample(&track(&[(0.0, 0.0, 10.0), (0.8, 8.0, 10.0)]), &cfg()).unwrap();
        assert_eq!(r.first_step, 0);
        assert_eq!(r.positions.len(), 3);
        assert!((r.positions[1].x - 4.0).abs() < 1e-12);
    }

    #[test]
    fn aligned_subsampling_keeps_every_tenth() {
        let raw: Vec<(f64, f64, f64)> = (0..=100)
            .map(|i| (i as f64 * 0.04, (i as f64).powi(2) * 0.01, i as f64))
            .collect();
        let r = resample(&track(&raw), &cfg()).unwrap();
        assert_eq!(r.positions.len(), 11);
        for (k, p) in r.positions.iter().enumerate() {
            let i = 10 * k;
            assert!((p.x - raw[i].1).abs() < 1e-9);
            assert!((r.speeds[k] - raw[i].2).abs() < 1e-9);
        }
    }

    #[test]
    fn short_and_single_tracks_dropped() {
        assert!(resample(&track(&[(0.0, 0.0, 1.0)]), &cfg()).is_none());
        let c = ResampleConfig::default();
        assert!(resample(&track(&[(0.0, 0.0, 1.0), (4.0, 4.0, 1.0)]), &c).is_none());
        assert!(resample(&track(&[(0.0, 0.0, 1.0), (6.0, 6.0, 1.0)]), &c).is_some());
    }

    #[test]
    fn offset_start_aligns_to_global_grid() {
        let r = resample(&track(&[(0.1, 0.0, 1.0), (2.1, 2.0, 1.0)]), &cfg()).unwrap();
        assert_eq!(r.first_step, 1);
        assert_eq!(r.last_step(), 5);
        assert!((r.positions[0].x - 0.3).abs() < 1e-12);
    }

    fn rec(day: u32, name: &str) -> Recording {
        Recording {
            day,
            name: name.into(),
            dataset: TrajectoryDataset::new(0.4, vec![]),
        }
    }

    #[test]
    fn day_split() {
        let (train, test) =
            split_by_day(vec![rec(2, "b"), rec(4, "d"), rec(1, "a"), rec(3, "c")]).unwrap();
        assert_eq!(train.iter().map(|r| r.day).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert_eq!(test.iter().map(|r| r.day).collect::<Vec<_>>(), vec![4]);
        let (train2, test2) =
            split_by_day(vec![rec(4, "d"), rec(3, "c"), rec(1, "a"), rec(2, "b")]).unwrap();
        assert_eq!(
            train.iter().map(|r| &r.name).collect::<Vec<_>>(),
            train2.iter().map(|r| &r.name).collect::<Vec<_>>()
        );
        assert_eq!(test[0].name, test2[0].name);
        assert!(split_by_day(vec![rec(1, "a"), rec(1, "b")]).is_err());
        assert!(split_by_day(vec![]).is_err());
    }

    #[test]
    fn normalized_csv_round_trip() {
        let r = resample(&track(&[(0.0, 0.0, 10.0), (8.0, 80.0, 10.0)]), &cfg()).unwrap();
        let ds = TrajectoryDataset::new(0.4, vec![r]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        ds.save_normalized(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("agent_id,type,time,x,y,speed\n1,car,0.0,"));
        let back = TrajectoryDataset::load_normalized(&path, 0.4, 5.0).unwrap();
        assert_eq!(back.agents[0].positions, ds.agents[0].positions);
        assert_eq!(back.agents[0].first_step, 0);
    }

    #[test]
    fn missing_speed_recomputed() {
        let rows: Vec<NormalizedRow> = (0..5)
            .map(|k| NormalizedRow {
                agent_id: 9,
                vehicle_type: VehicleType::Bus,
                time: k as f64 * 0.4,
                x: 4.0 * k as f64,
                y: 0.0,
                speed: None,
            })
            .collect();
        let ds = TrajectoryDataset::from_rows(&rows, 0.4, 5.0).unwrap();
        for v in &ds.agents[0].speeds {
            assert!((v - 10.0).abs() < 1e-9);
        }
        let mut gap = rows.clone();
        gap.remove(2);
        assert!(TrajectoryDataset::from_rows(&gap, 0.4, 5.0).is_err());
    }
}
