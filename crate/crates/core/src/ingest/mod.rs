//! Recording ingestion: raw drone tracks to a uniform-clock dataset, the
//! day-based split, and traffic-light schedule estimation.

mod dataset;
mod lights;
mod raw;

pub use dataset::{
    build_route, read_normalized, resample, split_by_day, write_normalized, AgentRecord, NormalizedRow,
    Recording, ResampleConfig, TrajectoryDataset,
};
pub use lights::{estimate_traffic_lights, GapFill, LightEstimatorConfig, Phase, SignalSchedule, SignalState};
pub use raw::{
    parse_recording, parse_recording_str, to_local_frame, LocalFrame, LocalSample, LocalTrajectory,
    RawSample, RawTrajectory, VehicleType, EARTH_RADIUS_M,
};
