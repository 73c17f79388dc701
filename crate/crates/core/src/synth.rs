//! Synthetic benchmark: small signalized networks with IDM-driven traffic.
//!
//! Roads are one-way, offset half a lane to the right of the node-to-node
//! line and trimmed `inset` metres short of each node. Two-phase fixed-cycle
//! signals control every road into an interior node.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{derive_seed, Exec};
use crate::geom::{Polyline, Vec2};
use crate::ingest::{NormalizedRow, Phase, SignalSchedule, SignalState, TrajectoryDataset, VehicleType};
use crate::road::{Road, RoadId, RoadNetwork};
use crate::rulebase::{IdmParams, PendingAgent, RuleConfig, RuleSim};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    #[default]
    Grid,
    Ring,
}

impl std::str::FromStr for Topology {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grid" => Ok(Topology::Grid),
            "ring" => Ok(Topology::Ring),
            _ => Err(Error::Config(format!("unknown topology '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub topology: Topology,
    /// Nodes per side (grid) or ring radius in metres (ring uses `spacing`).
    pub grid_size: usize,
    /// Node spacing (grid) or ring radius (ring), metres.
    pub spacing: f64,
    pub lane_width: f64,
    pub inset: f64,
    pub cycle: f64,
    /// Share of the cycle given to the first phase.
    pub split: f64,
    /// Poisson arrivals per entry road per second.
    pub demand: f64,
    /// Recorded duration (s), after the warm-up.
    pub duration: f64,
    /// Simulated time before recording starts (s).
    pub warmup: f64,
    pub dt: f64,
    pub route_spacing: f64,
    pub p_straight: f64,
    pub p_left: f64,
    pub entry_speed: f64,
    pub max_route_roads: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            topology: Topology::Grid,
            grid_size: 4,
            spacing: 100.0,
            lane_width: 3.5,
            inset: 2.0,
            cycle: 60.0,
            split: 0.5,
            demand: 0.05,
            duration: 600.0,
            warmup: 60.0,
            dt: 0.4,
            route_spacing: 5.0,
            p_straight: 0.6,
            p_left: 0.2,
            entry_speed: 8.0,
            max_route_roads: 12,
            seed: 0,
        }
    }
}

/// Per-type desired speeds (m/s), indexed like [`VehicleType::index`].
pub const TYPE_V0: [f64; 6] = [13.0, 13.0, 10.0, 11.0, 9.0, 14.0];
/// Type mix of generated demand, indexed like [`VehicleType::index`].
pub const TYPE_MIX: [f64; 6] = [0.6, 0.2, 0.03, 0.05, 0.02, 0.1];

/// Directed road graph of a synthetic network.
#[derive(Debug, Clone)]
pub struct Layout {
    pub net: RoadNetwork,
    /// Roads where demand enters.
    pub entries: Vec<RoadId>,
    /// Roads ending at an exit node.
    pub exits: Vec<RoadId>,
    /// Signal group (node, phase) of each signalized road.
    pub groups: BTreeMap<RoadId, (usize, usize)>,
    /// Per-node cycle offset (s).
    pub offsets: Vec<f64>,
}

fn one_way(id: RoadId, a: Vec2, b: Vec2, lane_width: f64, inset: f64, signalized: bool) -> Road {
    let d = (b - a).normalized().expect("distinct nodes");
    let n = Vec2::new(d.y, -d.x) * (0.5 * lane_width);
    Road {
        id,
        centerline: Polyline::new(vec![a + n + d * inset, b + n - d * inset]),
        lane_count: 1,
        lane_width,
        signalized,
        successors: Vec::new(),
    }
}

struct Link {
    from: usize,
    to: usize,
}

fn finish(
    cfg: &SynthConfig,
    nodes: &[Vec2],
    links: &[Link],
    interior: &[bool],
    phase_of: impl Fn(&Link) -> usize,
    entry_filter: impl Fn(&Link) -> bool,
) -> Result<Layout> {
    let mut roads = Vec::new();
    let mut groups = BTreeMap::new();
    let mut entries = Vec::new();
    let mut exits = Vec::new();
    for (k, l) in links.iter().enumerate() {
        let id = k as RoadId + 1;
        let sig = interior[l.to];
        let mut r = one_way(id, nodes[l.from], nodes[l.to], cfg.lane_width, cfg.inset, sig);
        r.successors = links
            .iter()
            .enumerate()
            .filter(|(_, m)| m.from == l.to && m.to != l.from)
            .map(|(j, _)| j as RoadId + 1)
            .collect();
        if sig {
            groups.insert(id, (l.to, phase_of(l)));
        }
        if !interior[l.from] && interior[l.to] && entry_filter(l) {
            entries.push(id);
        }
        if !interior[l.to] {
            exits.push(id);
        }
        roads.push(r);
    }
    let offsets = (0..nodes.len())
        .map(|i| ((i as f64) * 0.37 * cfg.cycle).rem_euclid(cfg.cycle))
        .collect();
    Ok(Layout {
        net: RoadNetwork::new(roads)?,
        entries,
        exits,
        groups,
        offsets,
    })
}

/// `n x n` grid of nodes; the outer ring of nodes is unsignalized.
pub fn grid_layout(cfg: &SynthConfig) -> Result<Layout> {
    let n = cfg.grid_size;
    if n < 3 {
        return Err(Error::Config("grid needs at least 3 nodes per side".into()));
    }
    let idx = |i: usize, j: usize| j * n + i;
    let nodes: Vec<Vec2> = (0..n * n)
        .map(|k| Vec2::new((k % n) as f64 * cfg.spacing, (k / n) as f64 * cfg.spacing))
        .collect();
    let interior: Vec<bool> = (0..n * n)
        .map(|k| {
            let (i, j) = (k % n, k / n);
            i > 0 && j > 0 && i + 1 < n && j + 1 < n
        })
        .collect();
    let mut links = Vec::new();
    for j in 0..n {
        for i in 0..n {
            if i + 1 < n {
                links.push(Link { from: idx(i, j), to: idx(i + 1, j) });
                links.push(Link { from: idx(i + 1, j), to: idx(i, j) });
            }
            if j + 1 < n {
                links.push(Link { from: idx(i, j), to: idx(i, j + 1) });
                links.push(Link { from: idx(i, j + 1), to: idx(i, j) });
            }
        }
    }
    // boundary-to-boundary links (along the outer edge) are not entries
    let horizontal = |l: &Link| nodes[l.from].y == nodes[l.to].y;
    let corner = |k: usize| (k % n == 0 || k % n == n - 1) && (k / n == 0 || k / n == n - 1);
    finish(cfg, &nodes, &links, &interior, |l| usize::from(!horizontal(l)), |l| !corner(l.from))
}

/// Ring of four nodes joined by counter-clockwise arcs, each with an inbound
/// and an outbound spoke.
pub fn ring_layout(cfg: &SynthConfig) -> Result<Layout> {
    let r = cfg.spacing;
    let spoke = 1.5 * r;
    let mut nodes: Vec<Vec2> = (0..4)
        .map(|k| {
            let a = k as f64 * std::f64::consts::FRAC_PI_2;
            Vec2::new(a.cos(), a.sin()) * r
        })
        .collect();
    for k in 0..4 {
        nodes.push(nodes[k] * ((r + spoke) / r));
    }
    let mut roads = Vec::new();
    let mut groups = BTreeMap::new();
    let mut entries = Vec::new();
    let mut exits = Vec::new();
    let seg = 12;
    let ang_inset = cfg.inset / r;
    for k in 0..4u64 {
        // arc k -> k+1, offset outward by half a lane (right of CCW travel)
        let a0 = k as f64 * std::f64::consts::FRAC_PI_2 + ang_inset;
        let a1 = (k + 1) as f64 * std::f64::consts::FRAC_PI_2 - ang_inset;
        let rad = r + 0.5 * cfg.lane_width;
        let pts = (0..=seg)
            .map(|s| {
                let a = a0 + (a1 - a0) * s as f64 / seg as f64;
                Vec2::new(a.cos(), a.sin()) * rad
            })
            .collect();
        let id = 1 + k;
        roads.push(Road {
            id,
            centerline: Polyline::new(pts),
            lane_count: 1,
            lane_width: cfg.lane_width,
            signalized: true,
            successors: vec![1 + (k + 1) % 4, 9 + (k + 1) % 4],
        });
        groups.insert(id, (((k + 1) % 4) as usize, 1));
    }
    for k in 0..4usize {
        let inner = nodes[k];
        let outer = nodes[k + 4];
        let id_in = 5 + k as u64;
        let mut rin = one_way(id_in, outer, inner, cfg.lane_width, cfg.inset, true);
        rin.successors = vec![1 + k as u64];
        roads.push(rin);
        groups.insert(id_in, (k, 0));
        entries.push(id_in);
    }
    for k in 0..4usize {
        let id_out = 9 + k as u64;
        roads.push(one_way(id_out, nodes[k], nodes[k + 4], cfg.lane_width, cfg.inset, false));
        exits.push(id_out);
    }
    let offsets = (0..8)
        .map(|i| ((i as f64) * 0.37 * cfg.cycle).rem_euclid(cfg.cycle))
        .collect();
    Ok(Layout {
        net: RoadNetwork::new(roads)?,
        entries,
        exits,
        groups,
        offsets,
    })
}

pub fn layout(cfg: &SynthConfig) -> Result<Layout> {
    match cfg.topology {
        Topology::Grid => grid_layout(cfg),
        Topology::Ring => ring_layout(cfg),
    }
}

/// Ground-truth two-phase schedule over `[0, horizon)`: phase 0 is green for
/// `split * cycle` seconds starting at each node's offset, phase 1 for the
/// rest of the cycle.
pub fn fixed_cycle_schedule(lay: &Layout, cfg: &SynthConfig, horizon: f64) -> Result<SignalSchedule> {
    let mut s = SignalSchedule::new();
    let g0 = cfg.split * cfg.cycle;
    for (&road, &(node, phase)) in &lay.groups {
        let off = lay.offsets[node];
        let mut phases: Vec<Phase> = Vec::new();
        let mut t = off - cfg.cycle;
        while t < horizon {
            let (a, b) = (t, t + g0);
            let (c, d) = (t + g0, t + cfg.cycle);
            let (green, red) = if phase == 0 { ((a, b), (c, d)) } else { ((c, d), (a, b)) };
            let mut push = |(lo, hi): (f64, f64), state| {
                let lo = f64::max(lo, 0.0);
                let hi = f64::min(hi, horizon);
                if lo < hi {
                    phases.push(Phase { start: lo, end: hi, state });
                }
            };
            if green.0 < red.0 {
                push(green, SignalState::Green);
                push(red, SignalState::Red);
            } else {
                push(red, SignalState::Red);
                push(green, SignalState::Green);
            }
            t += cfg.cycle;
        }
        s.set(road, phases)?;
    }
    Ok(s)
}

/// Transitions `(time, road, new_state)` of a schedule, excluding the first
/// phase of each road.
pub fn transitions(s: &SignalSchedule) -> Vec<(f64, RoadId, SignalState)> {
    let mut out = Vec::new();
    for road in s.roads() {
        for w in s.phases(road).windows(2) {
            if w[0].state != w[1].state {
                out.push((w[1].start, road, w[1].state));
            }
        }
    }
    out
}

fn choose_turn(
    lay: &Layout,
    cfg: &SynthConfig,
    cur: &Road,
    rng: &mut ChaCha8Rng,
) -> Option<RoadId> {
    let din = cur.centerline.tangent_at(cur.length());
    let opts: Vec<(RoadId, f64)> = cur
        .successors
        .iter()
        .filter_map(|&id| {
            let r = lay.net.road(id)?;
            let dout = r.centerline.tangent_at(0.0);
            let turn = din.cross(dout);
            let straight = din.dot(dout);
            let w = if straight > 0.7 {
                cfg.p_straight
            } else if turn > 0.0 {
                cfg.p_left
            } else {
                1.0 - cfg.p_straight - cfg.p_left
            };
            (w > 0.0).then_some((id, w))
        })
        .collect();
    let total: f64 = opts.iter().map(|o| o.1).sum();
    if opts.is_empty() || total <= 0.0 {
        return None;
    }
    let mut u = rng.random::<f64>() * total;
    for &(id, w) in &opts {
        if u < w {
            return Some(id);
        }
        u -= w;
    }
    opts.last().map(|o| o.0)
}

/// Random-walk route from `entry` until an exit road is reached.
pub fn random_route(lay: &Layout, cfg: &SynthConfig, entry: RoadId, rng: &mut ChaCha8Rng) -> Option<Polyline> {
    let mut ids = vec![entry];
    let mut cur = lay.net.road(entry)?;
    for _ in 0..cfg.max_route_roads {
        if lay.exits.contains(&cur.id) {
            break;
        }
        let next = choose_turn(lay, cfg, cur, rng)?;
        ids.push(next);
        cur = lay.net.road(next)?;
    }
    if !lay.exits.contains(&cur.id) {
        return None;
    }
    let mut pts: Vec<Vec2> = Vec::new();
    for id in ids {
        for &p in lay.net.road(id)?.centerline.points() {
            if pts.last() != Some(&p) {
                pts.push(p);
            }
        }
    }
    Some(Polyline::new(pts))
}

fn pick_type(rng: &mut ChaCha8Rng) -> VehicleType {
    let mut u = rng.random::<f64>();
    for (k, &w) in TYPE_MIX.iter().enumerate() {
        if u < w {
            return VehicleType::ALL[k];
        }
        u -= w;
    }
    VehicleType::Car
}

/// Poisson arrivals on every entry road over `[0, until)`.
pub fn demand(lay: &Layout, cfg: &SynthConfig, until: f64, base: IdmParams) -> Result<Vec<PendingAgent>> {
    if !(cfg.demand > 0.0) {
        return Ok(Vec::new());
    }
    let exp = Exp::new(cfg.demand).map_err(|e| Error::Config(format!("demand: {e}")))?;
    let mut out = Vec::new();
    let mut next_id = 1u64;
    for &entry in &lay.entries {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, 0xde, entry]));
        let mut t = exp.sample(&mut rng);
        while t < until {
            let step = (t / cfg.dt).floor() as i64;
            let vt = pick_type(&mut rng);
            if let Some(route) = random_route(lay, cfg, entry, &mut rng) {
                out.push(PendingAgent {
                    entry_step: step,
                    id: 0,
                    vehicle_type: vt,
                    route,
                    speed: cfg.entry_speed,
                    idm: IdmParams {
                        v0: TYPE_V0[vt.index()],
                        ..base
                    },
                });
            }
            t += exp.sample(&mut rng);
        }
    }
    out.sort_by(|a, b| a.entry_step.cmp(&b.entry_step));
    for p in &mut out {
        p.id = next_id;
        next_id += 1;
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Synthetic {
    pub net: RoadNetwork,
    pub signals: SignalSchedule,
    pub dataset: TrajectoryDataset,
    pub rows: Vec<NormalizedRow>,
}

/// Simulate warm-up plus duration and keep the recorded window
/// `[warmup, warmup + duration]`.
pub fn generate(cfg: &SynthConfig, rule: &RuleConfig, exec: Exec) -> Result<Synthetic> {
    let lay = layout(cfg)?;
    let total = cfg.warmup + cfg.duration;
    let signals = fixed_cycle_schedule(&lay, cfg, total + cfg.cycle)?;
    let pending = demand(&lay, cfg, total, IdmParams::default())?;
    let rule = RuleConfig {
        dt: cfg.dt,
        block_spawn: true,
        ..*rule
    };
    let steps = (total / cfg.dt).round() as usize;
    let mut sim = RuleSim::new(rule, 0, pending);
    let rows = sim.run(&lay.net, &signals, steps, exec);
    let start = (cfg.warmup / cfg.dt).round() as i64;
    let rows: Vec<NormalizedRow> = rows
        .into_iter()
        .filter(|r| (r.time / cfg.dt).round() as i64 >= start)
        .map(|mut r| {
            r.time = ((r.time / cfg.dt).round() as i64) as f64 * cfg.dt;
            r
        })
        .collect();
    let dataset = TrajectoryDataset::from_rows(&rows, cfg.dt, cfg.route_spacing)?;
    let rows = dataset.to_rows();
    Ok(Synthetic {
        net: lay.net,
        signals,
        dataset,
        rows,
    })
}
