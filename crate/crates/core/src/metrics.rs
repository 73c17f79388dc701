//! Similarity between a recorded and a simulated log.
//!
//! Microscopic metrics pair agents by id at each shared timestep.
//! Macroscopic metrics compare per-road density and mean speed, each vehicle
//! belonging to its nearest road.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::geom::Vec2;
use crate::ingest::NormalizedRow;
use crate::road::{OffRoadMode, RoadId, RoadNetwork};

/// Off-road threshold beyond the paved edge (m).
pub const OFF_ROAD_THRESHOLD: f64 = 1.5;

fn step_of(t: f64, dt: f64) -> i64 {
    (t / dt).round() as i64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pair {
    pub agent_id: u64,
    pub real: Vec2,
    pub sim: Vec2,
    pub real_speed: Option<f64>,
    pub sim_speed: Option<f64>,
}

/// Agents live in both logs, grouped by step.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedLogs {
    pub dt: f64,
    pub steps: Vec<(i64, Vec<Pair>)>,
}

fn by_step(rows: &[NormalizedRow], dt: f64) -> Result<BTreeMap<i64, Vec<&NormalizedRow>>> {
    let mut m: BTreeMap<i64, Vec<&NormalizedRow>> = BTreeMap::new();
    for r in rows {
        let s = step_of(r.time, dt);
        if (r.time - s as f64 * dt).abs() > 1e-6 * dt.max(1.0) {
            return Err(Error::data(format!("time {} is off the {dt} s grid", r.time)));
        }
        if !r.x.is_finite() || !r.y.is_finite() {
            return Err(Error::numeric(format!("agent {} has a non-finite position", r.agent_id)));
        }
        m.entry(s).or_default().push(r);
    }
    Ok(m)
}

pub fn align(real: &[NormalizedRow], sim: &[NormalizedRow], dt: f64) -> Result<AlignedLogs> {
    let a = by_step(real, dt)?;
    let b = by_step(sim, dt)?;
    let mut steps = Vec::new();
    for (s, ra) in &a {
        let Some(rb) = b.get(s) else { continue };
        let sim_of: BTreeMap<u64, &NormalizedRow> = rb.iter().map(|r| (r.agent_id, *r)).collect();
        let mut pairs: Vec<Pair> = ra
            .iter()
            .filter_map(|r| {
                sim_of.get(&r.agent_id).map(|q| Pair {
                    agent_id: r.agent_id,
                    real: Vec2::new(r.x, r.y),
                    sim: Vec2::new(q.x, q.y),
                    real_speed: r.speed,
                    sim_speed: q.speed,
                })
            })
            .collect();
        pairs.sort_by_key(|p| p.agent_id);
        if !pairs.is_empty() {
            steps.push((*s, pairs));
        }
    }
    Ok(AlignedLogs { dt, steps })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    Position,
    Velocity,
}

/// Mean over steps of the per-step root mean squared residual, each step
/// normalised by its own number of paired agents.
pub fn rmse(aligned: &AlignedLogs, q: Quantity) -> Result<f64> {
    let mut total = 0.0;
    let mut steps = 0usize;
    for (_, pairs) in &aligned.steps {
        let sq: Vec<f64> = pairs
            .iter()
            .filter_map(|p| match q {
                Quantity::Position => Some((p.real - p.sim).norm_sq()),
                Quantity::Velocity => Some((p.real_speed? - p.sim_speed?).powi(2)),
            })
            .collect();
        if sq.is_empty() {
            continue;
        }
        total += (sq.iter().sum::<f64>() / sq.len() as f64).sqrt();
        steps += 1;
    }
    if steps == 0 {
        return Err(Error::data("no paired timesteps between the logs"));
    }
    Ok(total / steps as f64)
}

/// Mean over steps of the fraction of live vehicles further than
/// `threshold` beyond the nearest paved edge.
pub fn off_road_rate(rows: &[NormalizedRow], net: &RoadNetwork, dt: f64, threshold: f64, exec: Exec) -> Result<f64> {
    let groups: Vec<Vec<&NormalizedRow>> = by_step(rows, dt)?.into_values().collect();
    if groups.is_empty() {
        return Err(Error::data("empty log"));
    }
    let fractions = exec.map(&groups, |g| -> Result<f64> {
        let mut off = 0usize;
        for r in g {
            if net.offroad_distance(Vec2::new(r.x, r.y), OffRoadMode::Edge)? > threshold {
                off += 1;
            }
        }
        Ok(off as f64 / g.len() as f64)
    });
    let mut sum = 0.0;
    for f in fractions {
        sum += f?;
    }
    Ok(sum / groups.len() as f64)
}

/// Per-(step, road) vehicle counts and speed sums over a contiguous step
/// range; steps without rows count as empty.
#[derive(Debug, Clone, PartialEq)]
pub struct RoadAggregates {
    pub roads: Vec<RoadId>,
    /// Lane length of each road (km).
    pub lane_km: Vec<f64>,
    pub first_step: i64,
    /// `steps x roads`
    pub count: Vec<Vec<usize>>,
    speed_sum: Vec<Vec<f64>>,
    speed_n: Vec<Vec<usize>>,
}

impl RoadAggregates {
    pub fn step_count(&self) -> usize {
        self.count.len()
    }

    /// Vehicles per lane-km.
    pub fn density(&self, step: usize, road: usize) -> f64 {
        self.count[step][road] as f64 / self.lane_km[road]
    }

    /// Mean speed, undefined for roads without speed observations.
    pub fn speed(&self, step: usize, road: usize) -> Option<f64> {
        let n = self.speed_n[step][road];
        (n > 0).then(|| self.speed_sum[step][road] / n as f64)
    }

    /// Aggregates restricted to steps `[lo, hi]`, padding with empty steps.
    pub fn window(&self, lo: i64, hi: i64) -> RoadAggregates {
        let nr = self.roads.len();
        let pick = |s: i64| -> Option<usize> {
            let k = s - self.first_step;
            (k >= 0 && (k as usize) < self.count.len()).then_some(k as usize)
        };
        let steps: Vec<Option<usize>> = (lo..=hi).map(pick).collect();
        RoadAggregates {
            roads: self.roads.clone(),
            lane_km: self.lane_km.clone(),
            first_step: lo,
            count: steps.iter().map(|k| k.map_or(vec![0; nr], |k| self.count[k].clone())).collect(),
            speed_sum: steps.iter().map(|k| k.map_or(vec![0.0; nr], |k| self.speed_sum[k].clone())).collect(),
            speed_n: steps.iter().map(|k| k.map_or(vec![0; nr], |k| self.speed_n[k].clone())).collect(),
        }
    }
}

pub fn road_aggregates(rows: &[NormalizedRow], net: &RoadNetwork, dt: f64, exec: Exec) -> Result<RoadAggregates> {
    let groups = by_step(rows, dt)?;
    let (Some(&lo), Some(&hi)) = (groups.keys().next(), groups.keys().next_back()) else {
        return Err(Error::data("empty log"));
    };
    let nr = net.roads().len();
    let keys: Vec<i64> = (lo..=hi).collect();
    let per_step = exec.map(&keys, |s| -> Result<(Vec<usize>, Vec<f64>, Vec<usize>)> {
        let mut c = vec![0; nr];
        let mut ss = vec![0.0; nr];
        let mut sn = vec![0; nr];
        for r in groups.get(s).map_or(&[][..], |v| v.as_slice()) {
            let k = net.project(Vec2::new(r.x, r.y))?.road_index;
            c[k] += 1;
            if let Some(v) = r.speed.filter(|v| v.is_finite()) {
                ss[k] += v;
                sn[k] += 1;
            }
        }
        Ok((c, ss, sn))
    });
    let mut agg = RoadAggregates {
        roads: net.roads().iter().map(|r| r.id).collect(),
        lane_km: net.roads().iter().map(|r| r.lane_length() / 1000.0).collect(),
        first_step: lo,
        count: Vec::with_capacity(keys.len()),
        speed_sum: Vec::with_capacity(keys.len()),
        speed_n: Vec::with_capacity(keys.len()),
    };
    for p in per_step {
        let (c, ss, sn) = p?;
        agg.count.push(c);
        agg.speed_sum.push(ss);
        agg.speed_n.push(sn);
    }
    Ok(agg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MacroQuantity {
    Density,
    Speed,
}

/// Per-step RMSE over roads, averaged over steps. Both sides must cover the
/// same network and step window; speed pairs with an undefined side are
/// skipped.
pub fn macroscopic_rmse(real: &RoadAggregates, sim: &RoadAggregates, q: MacroQuantity) -> Result<f64> {
    if real.roads != sim.roads {
        return Err(Error::data("aggregates cover different road sets"));
    }
    if real.first_step != sim.first_step || real.step_count() != sim.step_count() {
        return Err(Error::data("aggregates cover different step windows"));
    }
    let mut total = 0.0;
    let mut steps = 0usize;
    for s in 0..real.step_count() {
        let mut sq = 0.0;
        let mut m = 0usize;
        for r in 0..real.roads.len() {
            let d = match q {
                MacroQuantity::Density => Some(real.density(s, r) - sim.density(s, r)),
                MacroQuantity::Speed => real.speed(s, r).zip(sim.speed(s, r)).map(|(a, b)| a - b),
            };
            if let Some(d) = d {
                sq += d * d;
                m += 1;
            }
        }
        if m > 0 {
            total += (sq / m as f64).sqrt();
            steps += 1;
        }
    }
    if steps == 0 {
        return Err(Error::data("no comparable road observations"));
    }
    Ok(total / steps as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadSummary {
    pub road_id: RoadId,
    pub mean_density_real: f64,
    pub mean_density_sim: f64,
    pub mean_speed_real: Option<f64>,
    pub mean_speed_sim: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub position_rmse: f64,
    pub velocity_rmse: f64,
    pub density_rmse: f64,
    /// `None` when no road has a defined speed on both sides at any step.
    pub speed_rmse: Option<f64>,
    pub off_road_rate_real: f64,
    pub off_road_rate_sim: f64,
    pub paired_steps: usize,
    pub first_step: i64,
    pub last_step: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub summary: Summary,
    pub roads: Vec<RoadSummary>,
}

fn road_means(real: &RoadAggregates, sim: &RoadAggregates) -> Vec<RoadSummary> {
    let n = real.step_count() as f64;
    let mean_speed = |a: &RoadAggregates, r: usize| {
        let v: Vec<f64> = (0..a.step_count()).filter_map(|s| a.speed(s, r)).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    (0..real.roads.len())
        .map(|r| RoadSummary {
            road_id: real.roads[r],
            mean_density_real: (0..real.step_count()).map(|s| real.density(s, r)).sum::<f64>() / n,
            mean_density_sim: (0..sim.step_count()).map(|s| sim.density(s, r)).sum::<f64>() / n,
            mean_speed_real: mean_speed(real, r),
            mean_speed_sim: mean_speed(sim, r),
        })
        .collect()
}

/// All metrics over the steps covered by both logs.
pub fn evaluate(real: &[NormalizedRow], sim: &[NormalizedRow], net: &RoadNetwork, dt: f64, exec: Exec) -> Result<Evaluation> {
    evaluate_with(real, sim, net, dt, OFF_ROAD_THRESHOLD, exec)
}

/// [`evaluate`] with an explicit off-road threshold.
pub fn evaluate_with(
    real: &[NormalizedRow],
    sim: &[NormalizedRow],
    net: &RoadNetwork,
    dt: f64,
    off_road_threshold: f64,
    exec: Exec,
) -> Result<Evaluation> {
    if !(off_road_threshold >= 0.0) {
        return Err(Error::Config("off-road threshold must be non-negative".into()));
    }
    let aligned = align(real, sim, dt)?;
    let position_rmse = rmse(&aligned, Quantity::Position)?;
    let velocity_rmse = rmse(&aligned, Quantity::Velocity)?;
    let ra = road_aggregates(real, net, dt, exec)?;
    let sa = road_aggregates(sim, net, dt, exec)?;
    let lo = ra.first_step.max(sa.first_step);
    let hi = (ra.first_step + ra.step_count() as i64).min(sa.first_step + sa.step_count() as i64) - 1;
    if hi < lo {
        return Err(Error::data("logs do not overlap in time"));
    }
    let (ra, sa) = (ra.window(lo, hi), sa.window(lo, hi));
    let density_rmse = macroscopic_rmse(&ra, &sa, MacroQuantity::Density)?;
    let speed_rmse = macroscopic_rmse(&ra, &sa, MacroQuantity::Speed).ok();
    let clip = |rows: &[NormalizedRow]| -> Vec<NormalizedRow> {
        rows.iter()
            .filter(|r| (lo..=hi).contains(&step_of(r.time, dt)))
            .cloned()
            .collect()
    };
    let summary = Summary {
        position_rmse,
        velocity_rmse,
        density_rmse,
        speed_rmse,
        off_road_rate_real: off_road_rate(&clip(real), net, dt, off_road_threshold, exec)?,
        off_road_rate_sim: off_road_rate(&clip(sim), net, dt, off_road_threshold, exec)?,
        paired_steps: aligned.steps.len(),
        first_step: lo,
        last_step: hi,
    };
    Ok(Evaluation {
        summary,
        roads: road_means(&ra, &sa),
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| format!("{v}"))
}

/// Write `summary.json` and `roads.csv` into `dir`.
pub fn emit_report(eval: &Evaluation, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let sp = dir.join("summary.json");
    let json = serde_json::to_string_pretty(&eval.summary)?;
    std::fs::write(&sp, json + "\n").map_err(|e| Error::io(&sp, e))?;
    let rp = dir.join("roads.csv");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&rp).map_err(|e| Error::io(&rp, e))?);
    let mut out = String::from("road_id,mean_density_real,mean_density_sim,mean_speed_real,mean_speed_sim\n");
    for r in &eval.roads {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.road_id,
            r.mean_density_real,
            r.mean_density_sim,
            opt(r.mean_speed_real),
            opt(r.mean_speed_sim)
        ));
    }
    f.write_all(out.as_bytes()).map_err(|e| Error::io(&rp, e))?;
    f.flush().map_err(|e| Error::io(&rp, e))
}

/// Read a `roads.csv` written by [`emit_report`].
pub fn read_roads_csv(path: impl AsRef<Path>) -> Result<Vec<RoadSummary>> {
    let path = path.as_ref();
    let mut rd = csv::Reader::from_path(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<Option<f64>> {
            let s = rec.get(i).unwrap_or("");
            if s.is_empty() {
                return Ok(None);
            }
            s.parse().map(Some).map_err(|_| Error::data(format!("{}: bad number '{s}'", path.display())))
        };
        let id = rec
            .get(0)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::data(format!("{}: bad road id", path.display())))?;
        out.push(RoadSummary {
            road_id: id,
            mean_density_real: num(1)?.unwrap_or(f64::NAN),
            mean_density_sim: num(2)?.unwrap_or(f64::NAN),
            mean_speed_real: num(3)?,
            mean_speed_sim: num(4)?,
        });
    }
    Ok(out)
}
