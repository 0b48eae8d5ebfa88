//! One measurement party.
//!
//! A station sees the shared seed, the trial count and its own angle policy.
//! Nothing about the partner station is reachable from [`run_station`].

use std::fmt;
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{self, Angle, ModelError, Role, Sign};
use crate::prng::{self, SeedState};

/// Mixed into choice seeds so that angle choices never replay the λ stream,
/// even when a choice seed equals the run seed.
const CHOICE_STREAM_KEY: u64 = 0x6368_616d_656c_656f;

const RECORDS_MAGIC: &str = "# chameleon-records v1";

#[derive(Debug, Error)]
pub enum StationError {
    #[error("schedule error: {0}")]
    Schedule(String),
    #[error("policy error: {0}")]
    Policy(String),
    #[error(transparent)]
    Angle(#[from] ModelError),
}

/// A half-open range of trial indices measured at one angle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduledRange {
    pub start: u64,
    pub end: u64,
    pub angle: Angle,
}

/// How a station picks its analyzer angle for each trial.
///
/// Policies see only the trial index, never the hidden state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnglePolicy {
    Fixed { angle: Angle },
    Schedule { ranges: Vec<ScheduledRange> },
    SeededRandom { choices: Vec<Angle>, choice_seed: u64 },
}

impl AnglePolicy {
    /// Checks that the policy can answer every trial in `0..n`.
    pub fn validate(&self, n: u64) -> Result<(), StationError> {
        match self {
            AnglePolicy::Fixed { .. } => Ok(()),
            AnglePolicy::SeededRandom { choices, .. } if choices.is_empty() => {
                Err(StationError::Policy("random policy needs at least one angle".into()))
            }
            AnglePolicy::SeededRandom { .. } => Ok(()),
            AnglePolicy::Schedule { ranges } => {
                let mut sorted: Vec<_> = ranges.iter().collect();
                sorted.sort_by_key(|r| r.start);
                let mut next = 0;
                for r in sorted {
                    if r.start != next {
                        return Err(StationError::Schedule(format!(
                            "ranges must tile [0, {n}) without gaps or overlap; expected a range starting at {next}, found {}..{}",
                            r.start, r.end
                        )));
                    }
                    if r.end <= r.start {
                        return Err(StationError::Schedule(format!(
                            "empty range {}..{}",
                            r.start, r.end
                        )));
                    }
                    next = r.end;
                }
                if next != n {
                    return Err(StationError::Schedule(format!(
                        "ranges cover [0, {next}) but the run has {n} trials"
                    )));
                }
                Ok(())
            }
        }
    }

    /// Distinct angles this policy may produce, in first-use order.
    pub fn angles(&self) -> Vec<Angle> {
        let all: Vec<Angle> = match self {
            AnglePolicy::Fixed { angle } => vec![*angle],
            AnglePolicy::Schedule { ranges } => ranges.iter().map(|r| r.angle).collect(),
            AnglePolicy::SeededRandom { choices, .. } => choices.clone(),
        };
        let mut out: Vec<Angle> = Vec::new();
        for a in all {
            if !out.contains(&a) {
                out.push(a);
            }
        }
        out
    }
}

/// Angle used by `policy` at `trial`.
pub fn resolve_angle(policy: &AnglePolicy, trial: u64) -> Result<Angle, StationError> {
    match policy {
        AnglePolicy::Fixed { angle } => Ok(*angle),
        AnglePolicy::Schedule { ranges } => ranges
            .iter()
            .find(|r| (r.start..r.end).contains(&trial))
            .map(|r| r.angle)
            .ok_or_else(|| StationError::Schedule(format!("trial {trial} is outside every range"))),
        AnglePolicy::SeededRandom {
            choices,
            choice_seed,
        } => {
            if choices.is_empty() {
                return Err(StationError::Policy("random policy needs at least one angle".into()));
            }
            let idx = prng::uniform_index(choice_seed ^ CHOICE_STREAM_KEY, trial, choices.len());
            Ok(choices[idx])
        }
    }
}

impl FromStr for AnglePolicy {
    type Err = StationError;

    /// Accepts `fixed:<angle>`, `schedule:<start>..<end>=<angle>,...` and
    /// `random:<seed>:<angle>,<angle>,...`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = |m: &str| StationError::Policy(format!("{m} in policy {s:?}"));
        let (kind, rest) = s.split_once(':').ok_or_else(|| bad("missing ':'"))?;
        match kind.trim() {
            "fixed" => Ok(AnglePolicy::Fixed {
                angle: Angle::parse(rest)?,
            }),
            "schedule" => {
                let mut ranges = Vec::new();
                for item in rest.split(',') {
                    let (span, angle) = item.split_once('=').ok_or_else(|| bad("missing '='"))?;
                    let (start, end) = span.split_once("..").ok_or_else(|| bad("missing '..'"))?;
                    ranges.push(ScheduledRange {
                        start: start.trim().parse().map_err(|_| bad("bad range start"))?,
                        end: end.trim().parse().map_err(|_| bad("bad range end"))?,
                        angle: Angle::parse(angle)?,
                    });
                }
                Ok(AnglePolicy::Schedule { ranges })
            }
            "random" => {
                let (seed, list) = rest.split_once(':').ok_or_else(|| bad("missing seed"))?;
                let choice_seed = prng::parse_seed(seed).map_err(|_| bad("bad seed"))?;
                let choices = list
                    .split(',')
                    .map(Angle::parse)
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(AnglePolicy::SeededRandom {
                    choices,
                    choice_seed,
                })
            }
            other => Err(bad(&format!("unknown policy kind {other:?}"))),
        }
    }
}

/// One station's output for one trial.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRecord {
    pub trial: u64,
    pub setting: Angle,
    pub sign: Sign,
    pub weight: f64,
}

/// Runs one station over trials `0..n` of the shared stream.
pub fn run_station(
    role: Role,
    seed: u64,
    n: u64,
    policy: &AnglePolicy,
) -> Result<Vec<MeasurementRecord>, StationError> {
    policy.validate(n)?;
    let mut state = SeedState::new(seed);
    let mut out = Vec::with_capacity(n as usize);
    for trial in 0..n {
        let (next, raw) = prng::next_raw(state);
        state = next;
        let lambda = prng::u64_to_angle(raw);
        let setting = resolve_angle(policy, trial)?;
        out.push(MeasurementRecord {
            trial,
            setting,
            sign: model::observable(role, setting, lambda),
            weight: model::weight(role, setting, lambda),
        });
    }
    Ok(out)
}

/// The contents of one record file.
#[derive(Clone, Debug, PartialEq)]
pub struct RecordSet {
    pub role: Role,
    pub seed: u64,
    pub records: Vec<MeasurementRecord>,
}

impl RecordSet {
    pub fn n(&self) -> u64 {
        self.records.len() as u64
    }
}

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

impl RecordError {
    fn io(path: impl fmt::Display, source: io::Error) -> Self {
        RecordError::Io {
            path: path.to_string(),
            source,
        }
    }
}

pub fn header_line(role: Role, seed: u64, n: u64) -> String {
    format!("{RECORDS_MAGIC} role={role} seed=0x{seed:016x} n={n}")
}

/// Writes the newline-delimited record format. Floats use the shortest
/// representation that parses back to the same double.
pub fn write_records<W: Write>(set: &RecordSet, mut out: W) -> io::Result<()> {
    writeln!(out, "{}", header_line(set.role, set.seed, set.n()))?;
    for r in &set.records {
        writeln!(
            out,
            "{},{},{},{}",
            r.trial,
            r.setting.radians(),
            r.sign.value(),
            r.weight
        )?;
    }
    out.flush()
}

fn parse_header(line: &str) -> Result<(Role, u64, u64), String> {
    let rest = line
        .strip_prefix(RECORDS_MAGIC)
        .ok_or_else(|| format!("expected header starting with {RECORDS_MAGIC:?}"))?;
    let (mut role, mut seed, mut n) = (None, None, None);
    for field in rest.split_whitespace() {
        let (k, v) = field
            .split_once('=')
            .ok_or_else(|| format!("malformed header field {field:?}"))?;
        match k {
            "role" => {
                let r: u8 = v.parse().map_err(|_| format!("bad role {v:?}"))?;
                role = Some(Role::try_from(r)?);
            }
            "seed" => seed = Some(prng::parse_seed(v).map_err(|_| format!("bad seed {v:?}"))?),
            "n" => n = Some(v.parse::<u64>().map_err(|_| format!("bad count {v:?}"))?),
            other => return Err(format!("unknown header field {other:?}")),
        }
    }
    match (role, seed, n) {
        (Some(r), Some(s), Some(n)) => Ok((r, s, n)),
        _ => Err("header must carry role, seed and n".into()),
    }
}

fn parse_record(line: &str) -> Result<MeasurementRecord, String> {
    let fields: Vec<&str> = line.split(',').collect();
    let [trial, setting, sign, weight] = fields[..] else {
        return Err(format!("expected 4 fields, found {}", fields.len()));
    };
    let trial: u64 = trial.parse().map_err(|_| format!("bad trial index {trial:?}"))?;
    let setting: f64 = setting.parse().map_err(|_| format!("bad setting {setting:?}"))?;
    if !(0.0..std::f64::consts::TAU).contains(&setting) {
        return Err(format!("setting {setting} outside [0, 2π)"));
    }
    let sign: i64 = sign.parse().map_err(|_| format!("bad sign {sign:?}"))?;
    let sign = Sign::try_from(sign)?;
    let weight: f64 = weight.parse().map_err(|_| format!("bad weight {weight:?}"))?;
    if !(weight.is_finite() && weight >= 0.0) {
        return Err(format!("weight must be finite and non-negative, got {weight}"));
    }
    Ok(MeasurementRecord {
        trial,
        setting: Angle::new(setting),
        sign,
        weight,
    })
}

/// Parses a record file, enforcing the header count and increasing trials.
pub fn read_records<R: Read>(input: R) -> Result<RecordSet, RecordError> {
    let reader = BufReader::new(input);
    let mut lines = reader.lines().enumerate();
    let (role, seed, n) = match lines.next() {
        Some((_, line)) => {
            let line = line.map_err(|e| RecordError::io("<input>", e))?;
            parse_header(&line).map_err(|message| RecordError::Parse { line: 1, message })?
        }
        None => {
            return Err(RecordError::Parse {
                line: 1,
                message: "missing header".into(),
            })
        }
    };
    let mut records = Vec::with_capacity(n.min(1 << 24) as usize);
    for (idx, line) in lines {
        let line = line.map_err(|e| RecordError::io("<input>", e))?;
        if line.is_empty() {
            continue;
        }
        let record = parse_record(&line).map_err(|message| RecordError::Parse {
            line: idx + 1,
            message,
        })?;
        if let Some(prev) = records.last().map(|r: &MeasurementRecord| r.trial) {
            if record.trial <= prev {
                return Err(RecordError::Integrity(format!(
                    "line {}: trial {} does not follow {prev}",
                    idx + 1,
                    record.trial
                )));
            }
        }
        records.push(record);
    }
    if records.len() as u64 != n {
        return Err(RecordError::Integrity(format!(
            "header announces {n} records, file has {}",
            records.len()
        )));
    }
    Ok(RecordSet {
        role,
        seed,
        records,
    })
}

pub fn write_records_file(set: &RecordSet, path: &Path) -> Result<(), RecordError> {
    let file = fs::File::create(path).map_err(|e| RecordError::io(path.display(), e))?;
    write_records(set, BufWriter::new(file)).map_err(|e| RecordError::io(path.display(), e))
}

pub fn read_records_file(path: &Path) -> Result<RecordSet, RecordError> {
    let file = fs::File::open(path).map_err(|e| RecordError::io(path.display(), e))?;
    read_records(file)
}
