//! Per-timestep agent graphs.
//!
//! Every agent becomes a node whose features are expressed in its own
//! goal-oriented frame (origin at the possibly perturbed position, x-axis
//! toward the final route point). Directed edges connect each agent to its
//! nearest neighbours; the edge feature is the neighbour's origin in the
//! receiver's frame.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::geom::{Polyline, Vec2};
use crate::ingest::{SignalSchedule, SignalState, VehicleType};
use crate::road::RoadNetwork;

/// Which agents' past positions the model may see.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistoryMode {
    /// No history for anyone (history-masked policy).
    #[default]
    None,
    /// Every agent sees every history, including its own.
    All,
    /// An agent sees its neighbours' histories but not its own.
    ContextOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    pub k_nn: usize,
    pub neighbor_radius: f64,
    pub k_route: usize,
    /// Std-dev of the per-axis origin perturbation (m).
    pub sigma_p: f64,
    /// Perturb frame origins when building training snapshots.
    pub perturb: bool,
    pub history_mode: HistoryMode,
    /// Past steps in the history block.
    pub history_len: usize,
    /// Append the current speed to node features.
    pub include_speed: bool,
    /// Future steps attached as training targets.
    pub horizon: usize,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            k_nn: 8,
            neighbor_radius: 30.0,
            k_route: 10,
            sigma_p: 0.5,
            perturb: true,
            history_mode: HistoryMode::None,
            history_len: 10,
            include_speed: false,
            horizon: 10,
        }
    }
}

const TYPE_WIDTH: usize = 6;
const LIGHT_WIDTH: usize = 3;

impl GraphConfig {
    fn history_width(&self) -> usize {
        match self.history_mode {
            HistoryMode::None => 0,
            _ => 3 * self.history_len,
        }
    }

    fn light_offset(&self) -> usize {
        TYPE_WIDTH + 2 + 3 * self.k_route
    }

    fn history_offset(&self) -> usize {
        self.light_offset() + LIGHT_WIDTH + usize::from(self.include_speed)
    }

    pub fn feature_width(&self) -> usize {
        self.history_offset() + self.history_width()
    }

    /// Per-column multiplier applied before the embedding: lengths are
    /// divided by `length_scale`, speeds by `speed_scale`, flags untouched.
    pub fn input_scale(&self, length_scale: f64, speed_scale: f64) -> Vec<f64> {
        let mut s = vec![1.0; self.feature_width()];
        let inv = 1.0 / length_scale;
        for v in &mut s[TYPE_WIDTH..TYPE_WIDTH + 2 + 3 * self.k_route] {
            *v = inv;
        }
        if self.include_speed {
            s[self.light_offset() + LIGHT_WIDTH] = 1.0 / speed_scale;
        }
        let h = self.history_offset();
        for v in &mut s[h..h + 2 * self.history_width() / 3] {
            *v = inv;
        }
        s
    }
}

/// Goal-oriented agent frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub origin: Vec2,
    pub heading: Vec2,
}

impl Frame {
    pub const IDENTITY: Frame = Frame {
        origin: Vec2::ZERO,
        heading: Vec2::new(1.0, 0.0),
    };

    pub fn to_frame(&self, p: Vec2) -> Vec2 {
        let d = p - self.origin;
        Vec2::new(d.dot(self.heading), d.dot(self.heading.perp()))
    }

    pub fn from_frame(&self, p: Vec2) -> Vec2 {
        self.origin + self.heading * p.x + self.heading.perp() * p.y
    }

    /// Rotate a vector (no translation) into the frame.
    pub fn rotate_in(&self, v: Vec2) -> Vec2 {
        Vec2::new(v.dot(self.heading), v.dot(self.heading.perp()))
    }

    pub fn rotate_out(&self, v: Vec2) -> Vec2 {
        self.heading * v.x + self.heading.perp() * v.y
    }
}

pub fn to_frame(frame: &Frame, p: Vec2) -> Vec2 {
    frame.to_frame(p)
}

pub fn from_frame(frame: &Frame, p: Vec2) -> Vec2 {
    frame.from_frame(p)
}

pub const MIN_GOAL_DISTANCE: f64 = 0.1;

/// Build a frame at `pos` (plus N(0, sigma^2 I) noise when `perturb`) with
/// the x-axis toward `goal`. When the goal is closer than 0.1 m the
/// `fallback` direction is used, then global +x.
pub fn make_frame<R: Rng + ?Sized>(
    pos: Vec2,
    goal: Vec2,
    sigma: f64,
    rng: &mut R,
    perturb: bool,
    fallback: Option<Vec2>,
) -> Frame {
    let origin = if perturb && sigma > 0.0 {
        let ex: f64 = rng.sample(StandardNormal);
        let ey: f64 = rng.sample(StandardNormal);
        pos + Vec2::new(ex, ey) * sigma
    } else {
        pos
    };
    let to_goal = goal - origin;
    let heading = if to_goal.norm() >= MIN_GOAL_DISTANCE {
        to_goal.normalized()
    } else {
        None
    }
    .or_else(|| fallback.and_then(Vec2::normalized))
    .unwrap_or(Vec2::new(1.0, 0.0));
    Frame { origin, heading }
}

/// One routing point: position (world frame) and the full width of the
/// nearest road.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoutingPoint {
    pub pos: Vec2,
    pub width: f64,
}

/// `k` route vertices starting at the first vertex at or beyond `progress`;
/// the terminal vertex repeats past the end.
pub fn routing_points(route: &Polyline, progress: f64, k: usize, net: &RoadNetwork) -> Vec<RoutingPoint> {
    let arcs = route.arcs();
    let first = arcs.partition_point(|&a| a < progress - 1e-9);
    let last = route.len() - 1;
    (0..k)
        .map(|i| {
            let pos = route.points()[(first + i).min(last)];
            let width = net
                .project(pos)
                .map(|h| net.roads()[h.road_index].width())
                .unwrap_or(0.0);
            RoutingPoint { pos, width }
        })
        .collect()
}

/// Track arc-length progress of a position sequence along its route,
/// searching a window around the previous value.
pub fn route_progress(route: &Polyline, positions: &[Vec2]) -> Vec<f64> {
    let mut out = Vec::with_capacity(positions.len());
    let mut prev: Option<f64> = None;
    for &p in positions {
        let arc = match prev {
            None => route.project(p).arc,
            Some(s) => route.project_window(p, s - 5.0, s + 60.0).arc,
        };
        out.push(arc);
        prev = Some(arc);
    }
    out
}

/// Everything the graph builder needs to know about one agent.
#[derive(Debug, Clone, Copy)]
pub struct AgentView<'a> {
    pub id: u64,
    pub vehicle_type: VehicleType,
    pub position: Vec2,
    pub speed: f64,
    pub route: &'a Polyline,
    pub progress: f64,
    /// Past positions, most recent first (t-1, t-2, ...).
    pub history: &'a [Option<Vec2>],
    /// Future positions t+1..t+T (training only).
    pub future: Option<&'a [Option<Vec2>]>,
}

#[derive(Debug, Clone)]
pub struct World<'a> {
    pub clock: f64,
    pub agents: Vec<AgentView<'a>>,
    pub signals: &'a SignalSchedule,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    /// Sending node (neighbour j).
    pub src: usize,
    /// Receiving node (i).
    pub dst: usize,
    /// Neighbour origin in the receiver's frame.
    pub rel: Vec2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSnapshot {
    pub agent_ids: Vec<u64>,
    pub feature_width: usize,
    /// Row-major node features, one row per agent.
    pub features: Vec<f64>,
    /// Features with the node's own history masked out (context-only mode).
    pub ego_features: Option<Vec<f64>>,
    /// In-edges grouped by receiver; each group starts with the self-loop.
    pub edges: Vec<Edge>,
    pub frames: Vec<Frame>,
    /// Future positions in each node's frame, `None` where unrecorded.
    pub targets: Option<Vec<Vec<Option<Vec2>>>>,
}

impl GraphSnapshot {
    pub fn node_count(&self) -> usize {
        self.agent_ids.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_width..(i + 1) * self.feature_width]
    }

    pub fn to_debug_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("snapshot serializes")
    }

    /// Number of (node, step) targets present.
    pub fn target_count(&self) -> usize {
        self.targets
            .as_ref()
            .map_or(0, |t| t.iter().flatten().filter(|x| x.is_some()).count())
    }
}

fn light_state(p: Vec2, clock: f64, net: &RoadNetwork, signals: &SignalSchedule) -> SignalState {
    match net.project(p) {
        Ok(h) => {
            let road = &net.roads()[h.road_index];
            if road.signalized {
                signals.lookup(road.id, clock)
            } else {
                SignalState::Green
            }
        }
        Err(_) => SignalState::Unknown,
    }
}

/// Build a snapshot of `world`. Frames are perturbed only when `training`
/// and `cfg.perturb` are both set; targets are attached when `training`.
pub fn build_snapshot<R: Rng + ?Sized>(
    world: &World<'_>,
    net: &RoadNetwork,
    cfg: &GraphConfig,
    rng: &mut R,
    training: bool,
) -> GraphSnapshot {
    let n = world.agents.len();
    let perturb = training && cfg.perturb;
    let frames: Vec<Frame> = world
        .agents
        .iter()
        .map(|a| {
            let goal = a.route.last();
            let fallback = Some(a.route.tangent_at(a.progress));
            make_frame(a.position, goal, cfg.sigma_p, rng, perturb, fallback)
        })
        .collect();

    let width = cfg.feature_width();
    let mut features = vec![0.0; n * width];
    let hist_off = cfg.history_offset();
    for (i, a) in world.agents.iter().enumerate() {
        let f = &frames[i];
        let row = &mut features[i * width..(i + 1) * width];
        row[a.vehicle_type.index()] = 1.0;
        let goal = f.to_frame(a.route.last());
        row[TYPE_WIDTH] = goal.x;
        row[TYPE_WIDTH + 1] = goal.y;
        for (k, rp) in routing_points(a.route, a.progress, cfg.k_route, net).iter().enumerate() {
            let q = f.to_frame(rp.pos);
            let o = TYPE_WIDTH + 2 + 3 * k;
            row[o] = q.x;
            row[o + 1] = q.y;
            row[o + 2] = rp.width;
        }
        let light = light_state(a.position, world.clock, net, world.signals);
        row[cfg.light_offset() + light.index()] = 1.0;
        if cfg.include_speed {
            row[cfg.light_offset() + LIGHT_WIDTH] = a.speed;
        }
        if cfg.history_mode != HistoryMode::None {
            let h = cfg.history_len;
            for k in 0..h {
                if let Some(Some(p)) = a.history.get(k) {
                    let q = f.to_frame(*p);
                    row[hist_off + 2 * k] = q.x;
                    row[hist_off + 2 * k + 1] = q.y;
                    row[hist_off + 2 * h + k] = 1.0;
                }
            }
        }
    }
    let ego_features = (cfg.history_mode == HistoryMode::ContextOnly).then(|| {
        let mut ego = features.clone();
        for i in 0..n {
            for v in &mut ego[i * width + hist_off..(i + 1) * width] {
                *v = 0.0;
            }
        }
        ego
    });

    let mut edges = Vec::with_capacity(n * (cfg.k_nn + 1));
    for i in 0..n {
        edges.push(Edge {
            src: i,
            dst: i,
            rel: Vec2::ZERO,
        });
        let pi = world.agents[i].position;
        let mut cands: Vec<(f64, u64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (pi.dist(world.agents[j].position), world.agents[j].id, j))
            .filter(|&(d, _, _)| d <= cfg.neighbor_radius)
            .collect();
        cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, _, j) in cands.iter().take(cfg.k_nn) {
            edges.push(Edge {
                src: j,
                dst: i,
                rel: frames[i].to_frame(frames[j].origin),
            });
        }
    }

    let targets = training.then(|| {
        world
            .agents
            .iter()
            .zip(&frames)
            .map(|(a, f)| {
                (0..cfg.horizon)
                    .map(|t| {
                        a.future
                            .and_then(|fut| fut.get(t).copied().flatten())
                            .map(|p| f.to_frame(p))
                    })
                    .collect()
            })
            .collect()
    });

    GraphSnapshot {
        agent_ids: world.agents.iter().map(|a| a.id).collect(),
        feature_width: width,
        features,
        ego_features,
        edges,
        frames,
        targets,
    }
}
