//! Virtual i-Log devices. Each device registers with an ingest backend,
//! synthesizes sensor streams, seals and uploads chunks on its sync schedule
//! and answers diary tasks the way its behaviour profile says a participant
//! would.

pub mod calibration;
pub mod device;
pub mod fleet;
pub mod profile;
pub mod sensors;

pub use device::{DeviceSim, DeviceStats, FaultModel, StepOutput};
pub use fleet::{run_fleet, DeviceSummary, FleetDay, FleetReport, FleetRun, SimOptions};
pub use profile::{BehaviorModel, ConnectivityModel, DeviceProfile, Fleet, Link, LinkKind, LinkWindow, LogNormalSpec};
pub use sensors::SensorSynth;

use ilog_core::ingest::IngestError;
use ilog_core::logpack::LogpackError;
use ilog_core::study::SensorId;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("fleet: {0}")]
    Fleet(String),
    #[error("invalid simulation options: {0}")]
    Options(String),
    #[error("sensor {0} is not an on-change sensor")]
    WrongKind(SensorId),
    #[error("backend unavailable after {attempts} attempts: {last}")]
    BackendUnavailable { attempts: u32, last: IngestError },
    #[error("backend refused the device: {0}")]
    Rejected(IngestError),
    #[error(transparent)]
    Logpack(#[from] LogpackError),
}
