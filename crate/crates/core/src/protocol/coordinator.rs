//! Station sessions, the run coordinator and persisted run artifacts.

use std::fs;
use std::io;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use chrono::{SecondsFormat, Utc};
use log::{debug, info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::config::{ConfigError, RunConfig, Transport};
use super::wire::{channel_pair, Link, ProtocolError, TcpLink, WireMessage, PROTOCOL_VERSION};
use crate::model::Role;
use crate::station::{
    self, read_records, AnglePolicy, MeasurementRecord, RecordError, RecordSet,
};

/// Records per `RecordsChunk` message.
pub const RECORDS_CHUNK: usize = 4096;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.json";

pub fn records_file_name(role: Role) -> String {
    format!("station{role}.records")
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("run aborted: {reason}")]
    Aborted { reason: String, output_dir: PathBuf },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error(transparent)]
    Records(#[from] RecordError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn send_records<L: Link>(link: &mut L, records: &[MeasurementRecord]) -> Result<(), ProtocolError> {
    if records.is_empty() {
        return link.send(&WireMessage::RecordsChunk {
            records: vec![],
            last: true,
        });
    }
    let chunks = records.chunks(RECORDS_CHUNK);
    let total = chunks.len();
    for (i, chunk) in chunks.enumerate() {
        link.send(&WireMessage::RecordsChunk {
            records: chunk.to_vec(),
            last: i + 1 == total,
        })?;
    }
    Ok(())
}

/// Station side of one session: announce the role, measure what the
/// coordinator assigns, stream the records back and wait for the verdict.
pub fn station_session<L: Link>(
    link: &mut L,
    role: Role,
    deadline: Option<Instant>,
) -> Result<RecordSet, ProtocolError> {
    link.send(&WireMessage::Hello {
        role,
        protocol_version: PROTOCOL_VERSION,
    })?;
    let (seed, n, policy) = match link.recv(deadline)? {
        WireMessage::Assign { seed, n, policy } => (seed, n, policy),
        WireMessage::Abort { reason } => return Err(ProtocolError::Aborted(reason)),
        other => {
            return Err(ProtocolError::Unexpected {
                expected: "assign",
                got: other.kind(),
            })
        }
    };
    debug!("station {role}: assigned seed={seed:#x} n={n}");
    let records = match station::run_station(role, seed, n, &policy) {
        Ok(r) => r,
        Err(e) => {
            let reason = e.to_string();
            let _ = link.send(&WireMessage::Abort {
                reason: reason.clone(),
            });
            return Err(ProtocolError::Station(reason));
        }
    };
    send_records(link, &records)?;
    match link.recv(deadline)? {
        WireMessage::Ack => Ok(RecordSet {
            role,
            seed,
            records,
        }),
        WireMessage::Abort { reason } => Err(ProtocolError::Aborted(reason)),
        other => Err(ProtocolError::Unexpected {
            expected: "ack",
            got: other.kind(),
        }),
    }
}

struct Assignment {
    seed: u64,
    n: u64,
    policies: [AnglePolicy; 2],
}

impl Assignment {
    fn policy(&self, role: Role) -> &AnglePolicy {
        &self.policies[role.number() as usize - 1]
    }
}

type Claims = Mutex<[bool; 2]>;

/// Coordinator side of one session, up to (not including) the final Ack.
fn serve_session<L: Link>(
    link: &mut L,
    expected: Option<Role>,
    claims: &Claims,
    job: &Assignment,
    deadline: Instant,
) -> Result<(Role, Vec<MeasurementRecord>), (Option<Role>, ProtocolError)> {
    let (role, version) = match link.recv(Some(deadline)) {
        Ok(WireMessage::Hello {
            role,
            protocol_version,
        }) => (role, protocol_version),
        Ok(other) => {
            return Err((
                None,
                ProtocolError::Unexpected {
                    expected: "hello",
                    got: other.kind(),
                },
            ))
        }
        Err(e) => return Err((None, e)),
    };
    let fail = |e| Err((Some(role), e));
    if version != PROTOCOL_VERSION {
        return fail(ProtocolError::VersionMismatch {
            got: version,
            expected: PROTOCOL_VERSION,
        });
    }
    if expected.is_some_and(|r| r != role) {
        return fail(ProtocolError::Station(format!(
            "link reserved for station {} but peer announced station {role}",
            expected.unwrap_or(role)
        )));
    }
    {
        let mut taken = claims.lock().unwrap_or_else(|p| p.into_inner());
        let slot = &mut taken[role.number() as usize - 1];
        if *slot {
            return fail(ProtocolError::Station(format!("station {role} connected twice")));
        }
        *slot = true;
    }
    if let Err(e) = link.send(&WireMessage::Assign {
        seed: job.seed,
        n: job.n,
        policy: job.policy(role).clone(),
    }) {
        return fail(e);
    }
    let mut records: Vec<MeasurementRecord> = Vec::with_capacity(job.n as usize);
    loop {
        match link.recv(Some(deadline)) {
            Ok(WireMessage::RecordsChunk { records: chunk, last }) => {
                for r in chunk {
                    if r.trial != records.len() as u64 {
                        return fail(ProtocolError::Station(format!(
                            "station {role} sent trial {} where {} was due",
                            r.trial,
                            records.len()
                        )));
                    }
                    records.push(r);
                }
                if last {
                    break;
                }
            }
            Ok(WireMessage::Abort { reason }) => return fail(ProtocolError::Aborted(reason)),
            Ok(other) => {
                return fail(ProtocolError::Unexpected {
                    expected: "records_chunk",
                    got: other.kind(),
                })
            }
            Err(e) => return fail(e),
        }
    }
    if records.len() as u64 != job.n {
        return fail(ProtocolError::Station(format!(
            "station {role} returned {} records, expected {}",
            records.len(),
            job.n
        )));
    }
    debug!("coordinator: station {role} delivered {} records", records.len());
    Ok((role, records))
}

type SessionResult = Result<(Role, Vec<MeasurementRecord>), (Option<Role>, ProtocolError)>;

/// Delivered record lists and the abort reason, if any.
type Collected = (Vec<(Role, Vec<MeasurementRecord>)>, Option<String>);

fn abort_reason(e: &ProtocolError) -> String {
    match e {
        ProtocolError::Timeout => "timeout".to_string(),
        other => other.to_string(),
    }
}

/// Sends the verdict to every station and gathers both record lists.
fn finalize<L: Link>(
    sessions: Vec<(L, SessionResult)>,
    accepted_all: bool,
) -> Collected {
    let mut failure = if accepted_all {
        None
    } else {
        Some("timeout".to_string())
    };
    for (_, result) in &sessions {
        if let Err((role, e)) = result {
            if failure.is_none() {
                failure = Some(match role {
                    Some(r) => format!("station {r}: {}", abort_reason(e)),
                    None => abort_reason(e),
                });
            }
        }
    }
    let mut done = Vec::new();
    for (mut link, result) in sessions {
        let verdict = match &failure {
            None => WireMessage::Ack,
            Some(reason) => WireMessage::Abort {
                reason: reason.clone(),
            },
        };
        if let Err(e) = link.send(&verdict) {
            debug!("coordinator: could not deliver {}: {e}", verdict.kind());
        }
        if let Ok(ok) = result {
            done.push(ok);
        }
    }
    done.sort_by_key(|(role, _)| *role);
    (done, failure)
}

fn assignment(cfg: &RunConfig) -> Result<Assignment, RunError> {
    let (p1, p2) = cfg.policies()?;
    Ok(Assignment {
        seed: cfg.seed,
        n: cfg.n,
        policies: [p1, p2],
    })
}

fn in_process(
    cfg: &RunConfig,
    job: &Assignment,
) -> Collected {
    let deadline = Instant::now() + cfg.timeout();
    let claims: Claims = Mutex::new([false; 2]);
    thread::scope(|s| {
        let mut stations = Vec::new();
        let mut servers = Vec::new();
        for role in [Role::One, Role::Two] {
            let (mut coord_end, mut station_end) = channel_pair();
            stations.push(s.spawn(move || station_session(&mut station_end, role, Some(deadline))));
            let claims = &claims;
            servers.push(s.spawn(move || {
                let result = serve_session(&mut coord_end, Some(role), claims, job, deadline);
                (coord_end, result)
            }));
        }
        let sessions = servers
            .into_iter()
            .map(|h| h.join().expect("coordinator session panicked"))
            .collect();
        let outcome = finalize(sessions, true);
        for h in stations {
            if let Err(e) = h.join().expect("station thread panicked") {
                debug!("in-process station ended with: {e}");
            }
        }
        outcome
    })
}

fn over_tcp(
    listener: TcpListener,
    timeout: Duration,
    job: &Assignment,
) -> Result<Collected, ProtocolError> {
    let deadline = Instant::now() + timeout;
    listener.set_nonblocking(true)?;
    let claims: Claims = Mutex::new([false; 2]);
    Ok(thread::scope(|s| {
        let mut handles = Vec::new();
        while handles.len() < 2 && Instant::now() < deadline {
            match listener.accept() {
                Ok((stream, peer)) => {
                    info!("coordinator: connection from {peer}");
                    let claims = &claims;
                    handles.push(s.spawn(move || match TcpLink::new(stream) {
                        Ok(mut link) => {
                            let r = serve_session(&mut link, None, claims, job, deadline);
                            Some((link, r))
                        }
                        Err(e) => {
                            warn!("coordinator: dropping {peer}: {e}");
                            None
                        }
                    }));
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                    thread::sleep(Duration::from_millis(5));
                }
                Err(e) => warn!("coordinator: accept failed: {e}"),
            }
        }
        let accepted_all = handles.len() == 2;
        if !accepted_all {
            warn!("coordinator: only {} of 2 stations connected before the deadline", handles.len());
        }
        let sessions: Vec<_> = handles
            .into_iter()
            .filter_map(|h| h.join().expect("coordinator session panicked"))
            .collect();
        let complete = accepted_all && sessions.len() == 2;
        finalize(sessions, complete)
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub role: Role,
    pub sha256: String,
    pub records: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: RunConfig,
    pub files: Vec<FileEntry>,
    pub started: String,
    pub finished: String,
    pub complete: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abort_reason: Option<String>,
}

/// A finished run as persisted on disk.
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub station1: RecordSet,
    pub station2: RecordSet,
}

impl RunArtifacts {
    pub fn config(&self) -> &RunConfig {
        &self.manifest.config
    }
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), RunError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| RunError::Integrity(format!("cannot serialize {}: {e}", path.display())))?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

fn persist(
    cfg: &RunConfig,
    started: String,
    sets: &[RecordSet],
    failure: Option<String>,
) -> Result<Manifest, RunError> {
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut files = Vec::new();
    for set in sets {
        let name = records_file_name(set.role);
        let path = dir.join(&name);
        let mut bytes = Vec::new();
        station::write_records(set, &mut bytes).map_err(io_err(&path))?;
        fs::write(&path, &bytes).map_err(io_err(&path))?;
        files.push(FileEntry {
            path: name,
            role: set.role,
            sha256: sha256_hex(&bytes),
            records: set.n(),
        });
    }
    write_json(&dir.join(CONFIG_FILE), cfg)?;
    let manifest = Manifest {
        config: cfg.clone(),
        files,
        started,
        finished: now(),
        complete: failure.is_none(),
        abort_reason: failure,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Runs a full experiment and writes its artifacts to `cfg.output_dir`.
pub fn coordinate_run(cfg: &RunConfig) -> Result<RunArtifacts, RunError> {
    match &cfg.transport {
        Transport::InProcess { .. } => coordinate(cfg, None),
        Transport::Tcp { listen, .. } => {
            let listener = TcpListener::bind(listen).map_err(|e| RunError::Io {
                path: PathBuf::from(listen),
                source: e,
            })?;
            coordinate(cfg, Some(listener))
        }
    }
}

/// Like [`coordinate_run`] in TCP mode, on an already bound listener.
pub fn coordinate_with_listener(cfg: &RunConfig, listener: TcpListener) -> Result<RunArtifacts, RunError> {
    coordinate(cfg, Some(listener))
}

fn coordinate(cfg: &RunConfig, listener: Option<TcpListener>) -> Result<RunArtifacts, RunError> {
    let job = assignment(cfg)?;
    let started = now();
    info!(
        "coordinator: run {} mode={} n={} seed={:#x}",
        cfg.run_id(),
        cfg.mode.name(),
        cfg.n,
        cfg.seed
    );
    let (done, failure) = match listener {
        None => in_process(cfg, &job),
        Some(l) => over_tcp(l, cfg.timeout(), &job)?,
    };
    let sets: Vec<RecordSet> = done
        .into_iter()
        .map(|(role, records)| RecordSet {
            role,
            seed: cfg.seed,
            records,
        })
        .collect();
    let manifest = persist(cfg, started, &sets, failure.clone())?;
    if let Some(reason) = failure {
        warn!("coordinator: run aborted: {reason}");
        return Err(RunError::Aborted {
            reason,
            output_dir: cfg.output_dir.clone(),
        });
    }
    let mut it = sets.into_iter();
    let (Some(station1), Some(station2)) = (it.next(), it.next()) else {
        return Err(RunError::Integrity("run finished without both record sets".into()));
    };
    Ok(RunArtifacts {
        dir: cfg.output_dir.clone(),
        manifest,
        station1,
        station2,
    })
}

/// Reads a run directory back, checking every manifest hash and count.
pub fn load_artifacts(dir: &Path) -> Result<RunArtifacts, RunError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| RunError::Integrity(format!("{}: {e}", path.display())))?;
    if !manifest.complete {
        return Err(RunError::Integrity(format!(
            "run in {} is incomplete: {}",
            dir.display(),
            manifest.abort_reason.as_deref().unwrap_or("unknown reason")
        )));
    }
    let mut sets = Vec::new();
    for role in [Role::One, Role::Two] {
        let entry = manifest
            .files
            .iter()
            .find(|f| f.role == role)
            .ok_or_else(|| RunError::Integrity(format!("manifest lists no file for station {role}")))?;
        let file = dir.join(&entry.path);
        let bytes = fs::read(&file).map_err(io_err(&file))?;
        let digest = sha256_hex(&bytes);
        if digest != entry.sha256 {
            return Err(RunError::Integrity(format!(
                "{}: sha256 {digest} does not match manifest {}",
                file.display(),
                entry.sha256
            )));
        }
        let set = read_records(&bytes[..])?;
        if set.role != role || set.seed != manifest.config.seed {
            return Err(RunError::Integrity(format!(
                "{}: header does not match the manifest",
                file.display()
            )));
        }
        if set.n() != entry.records || set.n() != manifest.config.n {
            return Err(RunError::Integrity(format!(
                "{}: {} records, manifest expects {}",
                file.display(),
                set.n(),
                manifest.config.n
            )));
        }
        sets.push(set);
    }
    let station2 = sets.pop().expect("two sets");
    let station1 = sets.pop().expect("two sets");
    Ok(RunArtifacts {
        dir: dir.to_path_buf(),
        manifest,
        station1,
        station2,
    })
}
