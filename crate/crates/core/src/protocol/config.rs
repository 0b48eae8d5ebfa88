//! Run configuration and the schedules the coordinator derives from it.

use std::ops::Range;
use std::path::PathBuf;

use serde::{Deserialize, Deserializer, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::Angle;
use crate::prng::parse_seed;
use crate::station::{AnglePolicy, ScheduledRange};

pub const DEFAULT_TIMEOUT_MS: u64 = 60_000;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid configuration: {0}")]
pub struct ConfigError(pub String);

fn err<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

#[derive(Deserialize)]
#[serde(untagged)]
enum SeedRepr {
    Number(u64),
    Text(String),
}

impl SeedRepr {
    fn value<E: serde::de::Error>(self) -> Result<u64, E> {
        match self {
            SeedRepr::Number(x) => Ok(x),
            SeedRepr::Text(s) => parse_seed(&s).map_err(|_| E::custom(format!("bad seed {s:?}"))),
        }
    }
}

/// Seeds may be written as JSON numbers, decimal strings or `0x` hex strings.
pub fn deserialize_seed<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
    SeedRepr::deserialize(d)?.value()
}

fn deserialize_seed_pair<'de, D: Deserializer<'de>>(d: D) -> Result<[u64; 2], D::Error> {
    let [a, b] = <[SeedRepr; 2]>::deserialize(d)?;
    Ok([a.value()?, b.value()?])
}

/// Which experiment to run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RunMode {
    /// Both stations keep one setting for the whole run.
    Single { a: Angle, b: Angle },
    /// Four agreed subsequences realize the pairs (a,b), (a,b′), (a′,b), (a′,b′).
    Chsh {
        a: Angle,
        a_prime: Angle,
        b: Angle,
        b_prime: Angle,
        /// Four `[start, end)` ranges tiling `[0, n)`; quarters when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        boundaries: Option<Vec<[u64; 2]>>,
    },
    /// Each station draws its setting per trial from `angle_set`.
    Ekert {
        angle_set: Vec<Angle>,
        #[serde(deserialize_with = "deserialize_seed_pair")]
        choice_seeds: [u64; 2],
    },
}

impl RunMode {
    pub fn name(&self) -> &'static str {
        match self {
            RunMode::Single { .. } => "single",
            RunMode::Chsh { .. } => "chsh",
            RunMode::Ekert { .. } => "ekert",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Transport {
    /// Stations run as isolated threads talking to the coordinator over channels.
    InProcess {
        #[serde(default = "default_timeout")]
        timeout_ms: u64,
    },
    /// The coordinator listens on `listen`; stations connect to it.
    Tcp {
        listen: String,
        #[serde(default = "default_timeout")]
        timeout_ms: u64,
    },
}

fn default_timeout() -> u64 {
    DEFAULT_TIMEOUT_MS
}

impl Default for Transport {
    fn default() -> Self {
        Transport::InProcess {
            timeout_ms: DEFAULT_TIMEOUT_MS,
        }
    }
}

impl Transport {
    pub fn timeout_ms(&self) -> u64 {
        match self {
            Transport::InProcess { timeout_ms } | Transport::Tcp { timeout_ms, .. } => *timeout_ms,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(deserialize_with = "deserialize_seed")]
    pub seed: u64,
    pub n: u64,
    pub mode: RunMode,
    #[serde(default)]
    pub transport: Transport,
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.policies().map(|_| ())
    }

    /// The private policy of each station.
    pub fn policies(&self) -> Result<(AnglePolicy, AnglePolicy), ConfigError> {
        let (p1, p2) = match &self.mode {
            RunMode::Single { a, b } => (
                AnglePolicy::Fixed { angle: *a },
                AnglePolicy::Fixed { angle: *b },
            ),
            RunMode::Chsh {
                a,
                a_prime,
                b,
                b_prime,
                ..
            } => chsh_policies(&self.chsh_ranges()?, *a, *a_prime, *b, *b_prime),
            RunMode::Ekert {
                angle_set,
                choice_seeds,
            } => ekert_policies(angle_set, *choice_seeds)?,
        };
        for p in [&p1, &p2] {
            p.validate(self.n).map_err(|e| ConfigError(e.to_string()))?;
        }
        Ok((p1, p2))
    }

    /// The four CHSH subsequences, in pair order (a,b), (a,b′), (a′,b), (a′,b′).
    pub fn chsh_ranges(&self) -> Result<[Range<u64>; 4], ConfigError> {
        let RunMode::Chsh { boundaries, .. } = &self.mode else {
            return err("CHSH ranges requested for a non-CHSH run");
        };
        match boundaries {
            None => chsh_quarters(self.n),
            Some(b) => {
                let ranges: Vec<Range<u64>> = b.iter().map(|[s, e]| *s..*e).collect();
                let Ok(ranges) = <[Range<u64>; 4]>::try_from(ranges) else {
                    return err(format!("chsh boundaries must list exactly 4 ranges, got {}", b.len()));
                };
                let mut next = 0;
                for r in &ranges {
                    if r.start != next || r.end <= r.start {
                        return err(format!(
                            "chsh boundaries must tile [0, {}) in order; bad range {}..{}",
                            self.n, r.start, r.end
                        ));
                    }
                    next = r.end;
                }
                if next != self.n {
                    return err(format!("chsh boundaries end at {next}, run has n = {}", self.n));
                }
                Ok(ranges)
            }
        }
    }

    /// Stable identifier derived from the seed, trial count and mode.
    pub fn run_id(&self) -> String {
        let key = serde_json::json!({ "seed": self.seed, "n": self.n, "mode": self.mode });
        let digest = Sha256::digest(key.to_string().as_bytes());
        hex::encode(&digest[..8])
    }

    pub fn timeout(&self) -> std::time::Duration {
        std::time::Duration::from_millis(self.transport.timeout_ms())
    }
}

/// Four consecutive ranges of `n / 4` trials; the last absorbs the remainder.
pub fn chsh_quarters(n: u64) -> Result<[Range<u64>; 4], ConfigError> {
    if n < 4 {
        return err(format!("a CHSH run needs n >= 4, got {n}"));
    }
    let q = n / 4;
    Ok([0..q, q..2 * q, 2 * q..3 * q, 3 * q..n])
}

fn chsh_policies(
    ranges: &[Range<u64>; 4],
    a: Angle,
    a_prime: Angle,
    b: Angle,
    b_prime: Angle,
) -> (AnglePolicy, AnglePolicy) {
    let schedule = |angles: [Angle; 4]| AnglePolicy::Schedule {
        ranges: ranges
            .iter()
            .zip(angles)
            .map(|(r, angle)| ScheduledRange {
                start: r.start,
                end: r.end,
                angle,
            })
            .collect(),
    };
    (
        schedule([a, a, a_prime, a_prime]),
        schedule([b, b_prime, b, b_prime]),
    )
}

/// Station 1 uses `a` on subsequences 1–2 and `a′` on 3–4; station 2 uses
/// `b` on 1 and 3 and `b′` on 2 and 4.
pub fn chsh_schedule(
    n: u64,
    a: Angle,
    a_prime: Angle,
    b: Angle,
    b_prime: Angle,
) -> Result<(AnglePolicy, AnglePolicy), ConfigError> {
    Ok(chsh_policies(&chsh_quarters(n)?, a, a_prime, b, b_prime))
}

/// Independent per-trial random choices over the same angle set.
pub fn ekert_policies(
    angle_set: &[Angle],
    choice_seeds: [u64; 2],
) -> Result<(AnglePolicy, AnglePolicy), ConfigError> {
    if angle_set.is_empty() {
        return err("ekert angle set is empty");
    }
    if choice_seeds[0] == choice_seeds[1] {
        return err("ekert choice seeds must differ so the stations choose independently");
    }
    let policy = |choice_seed| AnglePolicy::SeededRandom {
        choices: angle_set.to_vec(),
        choice_seed,
    };
    Ok((policy(choice_seeds[0]), policy(choice_seeds[1])))
}
