use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec2;

pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VehicleType {
    Car,
    Taxi,
    Bus,
    Medium,
    Heavy,
    Motorcycle,
}

impl VehicleType {
    pub const ALL: [VehicleType; 6] = [
        VehicleType::Car,
        VehicleType::Taxi,
        VehicleType::Bus,
        VehicleType::Medium,
        VehicleType::Heavy,
        VehicleType::Motorcycle,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            VehicleType::Car => "car",
            VehicleType::Taxi => "taxi",
            VehicleType::Bus => "bus",
            VehicleType::Medium => "medium",
            VehicleType::Heavy => "heavy",
            VehicleType::Motorcycle => "motorcycle",
        }
    }
}

impl fmt::Display for VehicleType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VehicleType {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let key = s.trim().to_ascii_lowercase();
        Ok(match key.as_str() {
            "car" => VehicleType::Car,
            "taxi" => VehicleType::Taxi,
            "bus" => VehicleType::Bus,
            "medium" | "medium vehicle" => VehicleType::Medium,
            "heavy" | "heavy vehicle" => VehicleType::Heavy,
            "motorcycle" => VehicleType::Motorcycle,
            _ => return Err(format!("unknown vehicle type {s:?}")),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawSample {
    pub time: f64,
    pub lat: f64,
    pub lon: f64,
    /// Ground speed in m/s, when the recording provides one.
    pub speed: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawTrajectory {
    pub agent_id: u64,
    pub vehicle_type: VehicleType,
    pub samples: Vec<RawSample>,
}

/// Number of fields per repeated sample group in the wide-row format:
/// lat, lon, speed (km/h), lon_acc, lat_acc, time.
const GROUP: usize = 6;
const LEADING: usize = 4;

/// Parse a wide-row drone recording (`;`-separated; one row per track with
/// `track_id; type; traveled_d; avg_speed` followed by repeated
/// `lat; lon; speed; lon_acc; lat_acc; time` groups). Speeds are converted
/// from km/h to m/s. Rows sharing a track id are concatenated.
pub fn parse_recording(path: impl AsRef<Path>) -> Result<Vec<RawTrajectory>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_recording_str(&text, path)
}

pub fn parse_recording_str(text: &str, path: &Path) -> Result<Vec<RawTrajectory>> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut tracks: BTreeMap<u64, RawTrajectory> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line
            .split(';')
            .map(str::trim)
            .collect::<Vec<_>>()
            .into_iter()
            .rev()
            .skip_while(|f| f.is_empty())
            .collect::<Vec<_>>()
            .into_iter()
            .rev()
            .collect();
        if i == 0 && fields.first().is_some_and(|f| f.eq_ignore_ascii_case("track_id")) {
            continue;
        }
        if fields.len() < LEADING + GROUP || (fields.len() - LEADING) % GROUP != 0 {
            return Err(err(
                lineno,
                format!("expected 4 + 6k fields, found {}", fields.len()),
            ));
        }
        let num = |idx: usize, what: &str| -> Result<f64> {
            fields[idx]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(lineno, format!("bad {what} {:?}", fields[idx])))
        };
        let agent_id: u64 = fields[0]
            .parse()
            .map_err(|_| err(lineno, format!("bad track id {:?}", fields[0])))?;
        let vehicle_type: VehicleType = fields[1].parse().map_err(|m| err(lineno, m))?;
        let entry = tracks.entry(agent_id).or_insert_with(|| RawTrajectory {
            agent_id,
            vehicle_type,
            samples: Vec::new(),
        });
        if entry.vehicle_type != vehicle_type {
            return Err(err(lineno, format!("track {agent_id} changes type")));
        }
        for g in 0..(fields.len() - LEADING) / GROUP {
            let base = LEADING + g * GROUP;
            let lat = num(base, "lat")?;
            let lon = num(base + 1, "lon")?;
            let speed_kmh = num(base + 2, "speed")?;
            let time = num(base + 5, "time")?;
            if speed_kmh < 0.0 {
                return Err(err(lineno, format!("negative speed {speed_kmh}")));
            }
            if let Some(prev) = entry.samples.last() {
                if time <= prev.time {
                    return Err(err(lineno, format!("time {time} not increasing")));
                }
            }
            entry.samples.push(RawSample {
                time,
                lat,
                lon,
                speed: Some(speed_kmh / 3.6),
            });
        }
    }
    Ok(tracks.into_values().collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalSample {
    pub time: f64,
    pub pos: Vec2,
    pub speed: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalTrajectory {
    pub agent_id: u64,
    pub vehicle_type: VehicleType,
    pub samples: Vec<LocalSample>,
}

/// Equirectangular projection about a reference latitude/longitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalFrame {
    pub lat0: f64,
    pub lon0: f64,
}

impl LocalFrame {
    pub fn new(lat0: f64, lon0: f64) -> Self {
        LocalFrame { lat0, lon0 }
    }

    /// Mean latitude/longitude over every sample.
    pub fn centroid(tracks: &[RawTrajectory]) -> Option<Self> {
        let (mut lat, mut lon, mut n) = (0.0, 0.0, 0usize);
        for s in tracks.iter().flat_map(|t| &t.samples) {
            lat += s.lat;
            lon += s.lon;
            n += 1;
        }
        (n > 0).then(|| LocalFrame::new(lat / n as f64, lon / n as f64))
    }

    pub fn to_local(&self, lat: f64, lon: f64) -> Vec2 {
        let c = self.lat0.to_radians().cos();
        Vec2::new(
            EARTH_RADIUS_M * (lon - self.lon0).to_radians() * c,
            EARTH_RADIUS_M * (lat - self.lat0).to_radians(),
        )
    }

    pub fn to_latlon(&self, p: Vec2) -> (f64, f64) {
        let c = self.lat0.to_radians().cos();
        let lat = self.lat0 + (p.y / EARTH_RADIUS_M).to_degrees();
        let lon = self.lon0 + (p.x / (EARTH_RADIUS_M * c)).to_degrees();
        (lat, lon)
    }
}

pub fn to_local_frame(raw: &RawTrajectory, origin: LocalFrame) -> LocalTrajectory {
    LocalTrajectory {
        agent_id: raw.agent_id,
        vehicle_type: raw.vehicle_type,
        samples: raw
            .samples
            .iter()
            .map(|s| LocalSample {
                time: s.time,
                pos: origin.to_local(s.lat, s.lon),
                speed: s.speed,
            })
            .collect(),
    }
}
