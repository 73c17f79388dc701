//! Road network: centerline polylines, a uniform-grid segment index,
//! nearest-point projection and off-road distance.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{closest_on_segment, Polyline, Vec2};

pub type RoadId = u64;

#[derive(Debug, Clone, PartialEq)]
pub struct Road {
    pub id: RoadId,
    pub centerline: Polyline,
    pub lane_count: u32,
    pub lane_width: f64,
    pub signalized: bool,
    pub successors: Vec<RoadId>,
}

impl Road {
    pub fn length(&self) -> f64 {
        self.centerline.length()
    }

    /// Centerline length times lane count, in meters.
    pub fn lane_length(&self) -> f64 {
        self.length() * self.lane_count as f64
    }

    /// Full paved width (all lanes).
    pub fn width(&self) -> f64 {
        self.lane_count as f64 * self.lane_width
    }

    pub fn end(&self) -> Vec2 {
        self.centerline.last()
    }

    fn validate(&self) -> Result<()> {
        let pts = self.centerline.points();
        if pts.len() < 2 {
            return Err(Error::data(format!("road {}: centerline needs >= 2 points", self.id)));
        }
        if pts.iter().any(|p| !p.is_finite()) {
            return Err(Error::data(format!("road {}: non-finite coordinate", self.id)));
        }
        if pts.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::data(format!("road {}: repeated consecutive point", self.id)));
        }
        if self.lane_count < 1 {
            return Err(Error::data(format!("road {}: lane_count must be >= 1", self.id)));
        }
        if !(self.lane_width > 0.0 && self.lane_width.is_finite()) {
            return Err(Error::data(format!("road {}: lane_width must be > 0", self.id)));
        }
        Ok(())
    }
}

/// Free function form of [`Road::lane_length`].
pub fn road_lane_length(r: &Road) -> f64 {
    r.lane_length()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub road_id: RoadId,
    /// Index of the road in [`RoadNetwork::roads`].
    pub road_index: usize,
    pub point: Vec2,
    pub arc_length: f64,
    pub distance: f64,
}

/// How off-road distance is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffRoadMode {
    /// Distance to the nearest centerline.
    Centerline,
    /// Distance beyond the paved edge: centerline distance minus half the
    /// road width, clamped at zero, minimised over roads.
    #[default]
    Edge,
}

#[derive(Debug, Clone, Copy)]
struct SegRef {
    road: u32,
    seg: u32,
}

#[derive(Debug, Clone)]
struct SegmentGrid {
    origin: Vec2,
    cell: f64,
    nx: usize,
    ny: usize,
    cells: Vec<Vec<SegRef>>,
}

const MAX_CELLS: usize = 1 << 20;

impl SegmentGrid {
    fn build(roads: &[Road], cell_hint: f64) -> Self {
        let mut lo = Vec2::new(f64::INFINITY, f64::INFINITY);
        let mut hi = Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for r in roads {
            for p in r.centerline.points() {
                lo = Vec2::new(lo.x.min(p.x), lo.y.min(p.y));
                hi = Vec2::new(hi.x.max(p.x), hi.y.max(p.y));
            }
        }
        let span = hi - lo;
        let mut cell = cell_hint.max(1e-3);
        let dims = |c: f64| {
            (
                ((span.x / c).floor() as usize + 1).max(1),
                ((span.y / c).floor() as usize + 1).max(1),
            )
        };
        while {
            let (nx, ny) = dims(cell);
            nx.saturating_mul(ny) > MAX_CELLS
        } {
            cell *= 2.0;
        }
        let (nx, ny) = dims(cell);
        let mut grid = SegmentGrid {
            origin: lo,
            cell,
            nx,
            ny,
            cells: vec![Vec::new(); nx * ny],
        };
        for (ri, r) in roads.iter().enumerate() {
            for si in 0..r.centerline.segment_count() {
                let (a, b) = r.centerline.segment(si);
                let (x0, y0) = grid.cell_of(Vec2::new(a.x.min(b.x), a.y.min(b.y)));
                let (x1, y1) = grid.cell_of(Vec2::new(a.x.max(b.x), a.y.max(b.y)));
                for cy in y0..=y1 {
                    for cx in x0..=x1 {
                        grid.cells[cy * nx + cx].push(SegRef {
                            road: ri as u32,
                            seg: si as u32,
                        });
                    }
                }
            }
        }
        grid
    }

    fn cell_of(&self, p: Vec2) -> (usize, usize) {
        let fx = ((p.x - self.origin.x) / self.cell).floor();
        let fy = ((p.y - self.origin.y) / self.cell).floor();
        let cx = if fx.is_nan() { 0.0 } else { fx.clamp(0.0, (self.nx - 1) as f64) };
        let cy = if fy.is_nan() { 0.0 } else { fy.clamp(0.0, (self.ny - 1) as f64) };
        (cx as usize, cy as usize)
    }

    /// Visit cells ring by ring around `p`. `visit` returns the current best
    /// distance; the walk stops once every unvisited cell is provably farther.
    fn rings(&self, p: Vec2, mut visit: impl FnMut(&[SegRef]) -> f64) {
        let (cx, cy) = self.cell_of(p);
        let max_r = self.nx.max(self.ny);
        for r in 0..=max_r {
            let x0 = cx.saturating_sub(r);
            let x1 = (cx + r).min(self.nx - 1);
            let y0 = cy.saturating_sub(r);
            let y1 = (cy + r).min(self.ny - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let on_ring = r == 0
                        || y + r == cy
                        || y == cy + r
                        || x + r == cx
                        || x == cx + r;
                    if on_ring {
                        visit(&self.cells[y * self.nx + x]);
                    }
                }
            }
            let best = visit(&[]);
            // Lower bound on distance to anything outside the visited box.
            let mut bound = f64::INFINITY;
            if x0 > 0 {
                bound = bound.min(p.x - (self.origin.x + x0 as f64 * self.cell));
            }
            if x1 + 1 < self.nx {
                bound = bound.min(self.origin.x + (x1 + 1) as f64 * self.cell - p.x);
            }
            if y0 > 0 {
                bound = bound.min(p.y - (self.origin.y + y0 as f64 * self.cell));
            }
            if y1 + 1 < self.ny {
                bound = bound.min(self.origin.y + (y1 + 1) as f64 * self.cell - p.y);
            }
            if bound == f64::INFINITY || best < bound.max(0.0) {
                return;
            }
        }
    }
}

/// Immutable road network with a segment index. Safe to share across threads.
#[derive(Debug, Clone)]
pub struct RoadNetwork {
    roads: Vec<Road>,
    by_id: HashMap<RoadId, usize>,
    grid: SegmentGrid,
    max_half_width: f64,
}

pub const DEFAULT_CELL_SIZE: f64 = 25.0;

fn order_hits(a: &Projection, b: &Projection) -> Ordering {
    a.distance
        .total_cmp(&b.distance)
        .then(a.road_id.cmp(&b.road_id))
        .then(a.arc_length.total_cmp(&b.arc_length))
}

impl RoadNetwork {
    pub fn new(roads: Vec<Road>) -> Result<Self> {
        build_spatial_index(roads, DEFAULT_CELL_SIZE)
    }

    pub fn roads(&self) -> &[Road] {
        &self.roads
    }

    pub fn is_empty(&self) -> bool {
        self.roads.is_empty()
    }

    pub fn road(&self, id: RoadId) -> Option<&Road> {
        self.by_id.get(&id).map(|&i| &self.roads[i])
    }

    pub fn road_index(&self, id: RoadId) -> Option<usize> {
        self.by_id.get(&id).copied()
    }

    fn hit(&self, p: Vec2, s: SegRef) -> Projection {
        let road = &self.roads[s.road as usize];
        let seg = s.seg as usize;
        let (a, b) = road.centerline.segment(seg);
        let (t, q) = closest_on_segment(p, a, b);
        let arcs = road.centerline.arcs();
        Projection {
            road_id: road.id,
            road_index: s.road as usize,
            point: q,
            arc_length: arcs[seg] + t * (arcs[seg + 1] - arcs[seg]),
            distance: p.dist(q),
        }
    }

    /// Globally nearest centerline point. Ties go to the lower road id, then
    /// the lower arc length.
    pub fn project(&self, p: Vec2) -> Result<Projection> {
        if self.roads.is_empty() {
            return Err(Error::EmptyNetwork);
        }
        let mut best: Option<Projection> = None;
        self.grid.rings(p, |cell| {
            for &s in cell {
                let h = self.hit(p, s);
                if best.as_ref().is_none_or(|b| order_hits(&h, b) == Ordering::Less) {
                    best = Some(h);
                }
            }
            best.map_or(f64::INFINITY, |b| b.distance)
        });
        best.ok_or(Error::EmptyNetwork)
    }

    /// Nearest point restricted to one road.
    pub fn project_onto(&self, road_index: usize, p: Vec2) -> Projection {
        let road = &self.roads[road_index];
        let h = road.centerline.project(p);
        Projection {
            road_id: road.id,
            road_index,
            point: h.point,
            arc_length: h.arc,
            distance: h.distance,
        }
    }

    pub fn distance(&self, p: Vec2) -> Result<f64> {
        Ok(self.project(p)?.distance)
    }

    /// Every (road index, segment index) whose distance to `p` is <= `radius`.
    pub fn segments_within(&self, p: Vec2, radius: f64) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        if self.roads.is_empty() {
            return out;
        }
        let (x0, y0) = self.grid.cell_of(p - Vec2::new(radius, radius));
        let (x1, y1) = self.grid.cell_of(p + Vec2::new(radius, radius));
        for y in y0..=y1 {
            for x in x0..=x1 {
                for &s in &self.grid.cells[y * self.grid.nx + x] {
                    if self.hit(p, s).distance <= radius {
                        out.push((s.road as usize, s.seg as usize));
                    }
                }
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Distance beyond the paved edge, minimised over roads.
    pub fn edge_distance(&self, p: Vec2) -> Result<f64> {
        let nearest = self.project(p)?;
        let radius = nearest.distance + self.max_half_width;
        let mut best = (nearest.distance - self.roads[nearest.road_index].width() / 2.0).max(0.0);
        for (ri, si) in self.segments_within(p, radius) {
            let road = &self.roads[ri];
            let (a, b) = road.centerline.segment(si);
            let d = p.dist(closest_on_segment(p, a, b).1);
            best = best.min((d - road.width() / 2.0).max(0.0));
        }
        Ok(best)
    }

    pub fn offroad_distance(&self, p: Vec2, mode: OffRoadMode) -> Result<f64> {
        match mode {
            OffRoadMode::Centerline => self.distance(p),
            OffRoadMode::Edge => self.edge_distance(p),
        }
    }

    pub fn total_lane_length(&self) -> f64 {
        self.roads.iter().map(Road::lane_length).sum()
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let file: NetworkFile = serde_json::from_str(s)?;
        file.into_network()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&NetworkFile::from(self))?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json_string()?).map_err(|e| Error::io(path, e))
    }
}

/// Validate roads and build the segment index.
pub fn build_spatial_index(roads: Vec<Road>, cell_size: f64) -> Result<RoadNetwork> {
    let mut by_id = HashMap::with_capacity(roads.len());
    for (i, r) in roads.iter().enumerate() {
        r.validate()?;
        if by_id.insert(r.id, i).is_some() {
            return Err(Error::data(format!("duplicate road id {}", r.id)));
        }
    }
    for r in &roads {
        if let Some(s) = r.successors.iter().find(|s| !by_id.contains_key(s)) {
            return Err(Error::data(format!("road {}: unknown successor {}", r.id, s)));
        }
    }
    let grid = SegmentGrid::build(&roads, cell_size);
    let max_half_width = roads.iter().map(|r| r.width() / 2.0).fold(0.0, f64::max);
    Ok(RoadNetwork {
        roads,
        by_id,
        grid,
        max_half_width,
    })
}

pub fn project_to_network(p: Vec2, net: &RoadNetwork) -> Result<Projection> {
    net.project(p)
}

pub fn distance_to_network(p: Vec2, net: &RoadNetwork) -> Result<f64> {
    net.distance(p)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RoadEntry {
    id: RoadId,
    polyline: Vec<[f64; 2]>,
    lane_count: u32,
    lane_width: f64,
    #[serde(default)]
    signalized: bool,
    #[serde(default)]
    successors: Vec<RoadId>,
}

/// On-disk network: `{"roads": [{id, polyline, lane_count, lane_width, signalized, successors}]}`.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkFile {
    roads: Vec<RoadEntry>,
}

impl NetworkFile {
    fn into_network(self) -> Result<RoadNetwork> {
        let roads = self
            .roads
            .into_iter()
            .map(|e| Road {
                id: e.id,
                centerline: Polyline::new(e.polyline.into_iter().map(Vec2::from).collect()),
                lane_count: e.lane_count,
                lane_width: e.lane_width,
                signalized: e.signalized,
                successors: e.successors,
            })
            .collect();
        RoadNetwork::new(roads)
    }
}

impl From<&RoadNetwork> for NetworkFile {
    fn from(net: &RoadNetwork) -> Self {
        NetworkFile {
            roads: net
                .roads
                .iter()
                .map(|r| RoadEntry {
                    id: r.id,
                    polyline: r.centerline.points().iter().map(|&p| p.into()).collect(),
                    lane_count: r.lane_count,
                    lane_width: r.lane_width,
                    signalized: r.signalized,
                    successors: r.successors.clone(),
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn straight(id: RoadId, a: Vec2, b: Vec2, lanes: u32) -> Road {
        Road {
            id,
            centerline: Polyline::new(vec![a, b]),
            lane_count: lanes,
            lane_width: 3.5,
            signalized: false,
            successors: vec![],
        }
    }

    fn single() -> RoadNetwork {
        RoadNetwork::new(vec![straight(1, Vec2::ZERO, Vec2::new(10.0, 0.0), 1)]).unwrap()
    }

    #[test]
    fn perpendicular_foot() {
        let p = single().project(Vec2::new(5.0, 2.0)).unwrap();
        assert_eq!(p.point, Vec2::new(5.0, 0.0));
        assert_eq!(p.distance, 2.0);
        assert_eq!(p.arc_length, 5.0);
    }

    #[test]
    fn vertex_and_endpoint() {
        let net = single();
        assert_eq!(net.distance(Vec2::ZERO).unwrap(), 0.0);
        let p = net.project(Vec2::new(-3.0, 4.0)).unwrap();
        assert_eq!(p.point, Vec2::ZERO);
        assert_eq!(p.distance, 5.0);
        assert_eq!(p.arc_length, 0.0);
    }

    #[test]
    fn empty_network_errors() {
        let net = RoadNetwork::new(vec![]).unwrap();
        assert!(matches!(net.project(Vec2::ZERO), Err(Error::EmptyNetwork)));
        assert!(matches!(distance_to_network(Vec2::ZERO, &net), Err(Error::EmptyNetwork)));
    }

    #[test]
    fn ties_prefer_lower_id_then_arc() {
        // Two identical roads, ids 7 and 3; a U-shaped road equidistant at two arcs.
        let net = RoadNetwork::new(vec![
            straight(7, Vec2::new(0.0, 1.0), Vec2::new(10.0, 1.0), 1),
            straight(3, Vec2::new(0.0, -1.0), Vec2::new(10.0, -1.0), 1),
        ])
        .unwrap();
        assert_eq!(net.project(Vec2::new(5.0, 0.0)).unwrap().road_id, 3);

        let u = Road {
            id: 1,
            centerline: Polyline::new(vec![
                Vec2::new(-1.0, 5.0),
                Vec2::new(-1.0, 0.0),
                Vec2::new(1.0, 0.0),
                Vec2::new(1.0, 5.0),
            ]),
            lane_count: 1,
            lane_width: 3.0,
            signalized: false,
            successors: vec![],
        };
        let net = RoadNetwork::new(vec![u]).unwrap();
        let p = net.project(Vec2::new(0.0, 3.0)).unwrap();
        assert_eq!(p.arc_length, 2.0);
    }

    #[test]
    fn lane_length() {
        let r = straight(1, Vec2::ZERO, Vec2::new(1000.0, 0.0), 2);
        assert_eq!(road_lane_length(&r), 2000.0);
        let r = straight(1, Vec2::ZERO, Vec2::new(1000.0, 0.0), 1);
        assert_eq!(road_lane_length(&r), r.length());
        let z = Road {
            centerline: Polyline::new(vec![Vec2::ZERO, Vec2::new(3.0, 4.0), Vec2::new(6.0, 0.0)]),
            ..straight(2, Vec2::ZERO, Vec2::new(1.0, 0.0), 1)
        };
        assert_eq!(z.lane_length(), 10.0);
    }

    #[test]
    fn edge_distance_compensates_width() {
        let net = RoadNetwork::new(vec![straight(1, Vec2::ZERO, Vec2::new(100.0, 0.0), 2)]).unwrap();
        // half width 3.5
        assert_eq!(net.edge_distance(Vec2::new(50.0, 3.0)).unwrap(), 0.0);
        assert!((net.edge_distance(Vec2::new(50.0, 5.0)).unwrap() - 1.5).abs() < 1e-12);
        assert_eq!(net.offroad_distance(Vec2::new(50.0, 5.0), OffRoadMode::Centerline).unwrap(), 5.0);
    }

    #[test]
    fn validation_rejects_bad_roads() {
        let mut r = straight(1, Vec2::ZERO, Vec2::new(1.0, 0.0), 1);
        r.lane_count = 0;
        assert!(RoadNetwork::new(vec![r]).is_err());
        let r = straight(1, Vec2::ZERO, Vec2::ZERO, 1);
        assert!(RoadNetwork::new(vec![r]).is_err());
        let mut r = straight(1, Vec2::ZERO, Vec2::new(1.0, 0.0), 1);
        r.successors = vec![9];
        assert!(RoadNetwork::new(vec![r]).is_err());
        let a = straight(1, Vec2::ZERO, Vec2::new(1.0, 0.0), 1);
        assert!(RoadNetwork::new(vec![a.clone(), a]).is_err());
    }

    #[test]
    fn json_round_trip() {
        let json = r#"{"roads":[{"id":4,"polyline":[[0,0],[10,0]],"lane_count":2,"lane_width":3.2,"signalized":true,"successors":[]}]}"#;
        let net = RoadNetwork::from_json_str(json).unwrap();
        let back = RoadNetwork::from_json_str(&net.to_json_string().unwrap()).unwrap();
        assert_eq!(net.roads(), back.roads());
        assert!(RoadNetwork::from_json_str(r#"{"roads":[],"extra":1}"#).is_err());
    }
}
