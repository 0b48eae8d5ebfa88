//! The experiment as a distributed system.
//!
//! A coordinator hands each station the common seed and its own angle
//! policy, collects the records each station produces independently, and
//! persists them. No message type can carry one station's settings or
//! records to the other station.

mod config;
mod coordinator;
pub mod wire;

pub use config::{
    chsh_quarters, chsh_schedule, deserialize_seed, ekert_policies, ConfigError, RunConfig,
    RunMode, Transport, DEFAULT_TIMEOUT_MS,
};
pub use coordinator::{
    coordinate_run, coordinate_with_listener, load_artifacts, records_file_name, station_session,
    FileEntry, Manifest, RunArtifacts, RunError, CONFIG_FILE, MANIFEST_FILE, RECORDS_CHUNK,
};
pub use wire::{Link, ProtocolError, WireMessage, PROTOCOL_VERSION};
