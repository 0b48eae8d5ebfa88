//! Post-hoc statistics over paired station records.
//!
//! The primary estimator is the plain Monte-Carlo mean of
//! `s₁·s₂·w₁·w₂` over trials with uniform λ, whose expectation is the
//! weighted singlet-measure correlation. Standard errors are i.i.d.
//! sample-based.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, TAU};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{closed_form_correlation, Angle, Role};
use crate::protocol::{ConfigError, RunConfig, RunMode};
use crate::station::{MeasurementRecord, RecordSet};

/// Groups smaller than this are flagged in Ekert reports.
pub const DEFAULT_MIN_GROUP: u64 = 100;

/// Classical bound of the CHSH expression.
pub const CHSH_BOUND: f64 = 2.0;

/// `|term| ≤ π/2`, so estimates stay within this range (with slack).
const ESTIMATE_LIMIT: f64 = FRAC_PI_2 * 1.01;

const REFERENCE_SAMPLES: usize = 73;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("pairing error: {0}")]
    Pairing(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("grouping error: {0}")]
    Grouping(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Plain,
    SelfNormalized,
}

impl Estimator {
    pub fn name(self) -> &'static str {
        match self {
            Estimator::Plain => "plain",
            Estimator::SelfNormalized => "self_normalized",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationEstimate {
    pub a: Angle,
    pub b: Angle,
    pub estimate: f64,
    pub stderr: f64,
    pub count: u64,
    pub estimator: Estimator,
}

impl CorrelationEstimate {
    /// Weighted estimates may leave `[−1, 1]` by chance.
    pub fn exceeds_unit(&self) -> bool {
        self.estimate.abs() > 1.0
    }

    pub fn target(&self) -> f64 {
        closed_form_correlation(self.a, self.b)
    }
}

/// Mean and standard error of a sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanEstimate {
    pub estimate: f64,
    pub stderr: f64,
    pub count: u64,
}

impl MeanEstimate {
    pub fn from_terms(terms: &[f64]) -> Option<Self> {
        let n = terms.len();
        if n == 0 {
            return None;
        }
        let mean = terms.iter().sum::<f64>() / n as f64;
        let stderr = if n > 1 {
            let var = terms.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Some(Self {
            estimate: mean,
            stderr,
            count: n as u64,
        })
    }
}

/// Selected trial pairs, checked for alignment and one setting per station.
fn paired<'r, P>(
    r1: &'r [MeasurementRecord],
    r2: &'r [MeasurementRecord],
    selection: P,
) -> Result<Vec<(&'r MeasurementRecord, &'r MeasurementRecord)>, AnalysisError>
where
    P: Fn(u64) -> bool,
{
    let s1: Vec<_> = r1.iter().filter(|r| selection(r.trial)).collect();
    let s2: Vec<_> = r2.iter().filter(|r| selection(r.trial)).collect();
    if s1.len() != s2.len() {
        return Err(AnalysisError::Pairing(format!(
            "selection holds {} station-1 records but {} station-2 records",
            s1.len(),
            s2.len()
        )));
    }
    let pairs: Vec<_> = s1.into_iter().zip(s2).collect();
    for (x, y) in &pairs {
        if x.trial != y.trial {
            return Err(AnalysisError::Pairing(format!(
                "station-1 trial {} paired with station-2 trial {}",
                x.trial, y.trial
            )));
        }
    }
    Ok(pairs)
}

/// Weighted correlation over the selected trials.
pub fn estimate_correlation<P>(
    r1: &[MeasurementRecord],
    r2: &[MeasurementRecord],
    selection: P,
    estimator: Estimator,
) -> Result<CorrelationEstimate, AnalysisError>
where
    P: Fn(u64) -> bool,
{
    let pairs = paired(r1, r2, selection)?;
    let Some((first1, first2)) = pairs.first() else {
        return Err(AnalysisError::InsufficientData("selection is empty".into()));
    };
    let (a, b) = (first1.setting, first2.setting);
    if let Some((x, y)) = pairs.iter().find(|(x, y)| x.setting != a || y.setting != b) {
        return Err(AnalysisError::Grouping(format!(
            "trial {} uses settings ({}, {}) but the selection started with ({a}, {b})",
            x.trial, x.setting, y.setting
        )));
    }
    let weights: Vec<f64> = pairs.iter().map(|(x, y)| x.weight * y.weight).collect();
    let terms: Vec<f64> = pairs
        .iter()
        .zip(&weights)
        .map(|((x, y), w)| x.sign.as_f64() * y.sign.as_f64() * w)
        .collect();
    let n = terms.len();
    let (estimate, stderr) = match estimator {
        Estimator::Plain => {
            let m = MeanEstimate::from_terms(&terms).expect("non-empty");
            (m.estimate, m.stderr)
        }
        Estimator::SelfNormalized => {
            let wsum: f64 = weights.iter().sum();
            if wsum <= 0.0 {
                return Err(AnalysisError::InsufficientData(
                    "selected weights sum to zero".into(),
                ));
            }
            let ratio = terms.iter().sum::<f64>() / wsum;
            let stderr = if n > 1 {
                let resid = terms
                    .iter()
                    .zip(&weights)
                    .map(|(x, w)| (x - ratio * w).powi(2))
                    .sum::<f64>()
                    / (n - 1) as f64;
                resid.sqrt() / ((n as f64).sqrt() * (wsum / n as f64))
            } else {
                0.0
            };
            (ratio, stderr)
        }
    };
    Ok(CorrelationEstimate {
        a,
        b,
        estimate,
        stderr,
        count: n as u64,
        estimator,
    })
}

fn check_estimate(x: f64) -> Result<(), AnalysisError> {
    if !x.is_finite() {
        return Err(AnalysisError::Argument(format!("non-finite correlation {x}")));
    }
    if x.abs() > ESTIMATE_LIMIT {
        return Err(AnalysisError::Argument(format!(
            "correlation {x} outside [-{ESTIMATE_LIMIT}, {ESTIMATE_LIMIT}]"
        )));
    }
    Ok(())
}

/// `|E(a,b) − E(a,b′)| + |E(a′,b) + E(a′,b′)|`.
pub fn chsh_statistic(e_ab: f64, e_ab2: f64, e_a2b: f64, e_a2b2: f64) -> Result<f64, AnalysisError> {
    for x in [e_ab, e_ab2, e_a2b, e_a2b2] {
        check_estimate(x)?;
    }
    Ok((e_ab - e_ab2).abs() + (e_a2b + e_a2b2).abs())
}

/// Slack of `|E(a,b) − E(a,c)| ≤ 1 + E(b,c)`; negative slack is a violation.
pub fn bell1964_check(e_ab: f64, e_ac: f64, e_bc: f64) -> (f64, bool) {
    let slack = 1.0 + e_bc - (e_ab - e_ac).abs();
    (slack, slack < 0.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChshResult {
    pub a: Angle,
    pub a_prime: Angle,
    pub b: Angle,
    pub b_prime: Angle,
    /// In order (a,b), (a,b′), (a′,b), (a′,b′).
    pub correlations: Vec<CorrelationEstimate>,
    pub statistic: f64,
    pub stderr: f64,
    pub bound: f64,
    pub violated: bool,
    /// `(statistic − bound) / stderr`; absent when the error is zero.
    pub margin_sigma: Option<f64>,
}

impl ChshResult {
    pub fn from_estimates(
        [a, a_prime, b, b_prime]: [Angle; 4],
        correlations: [CorrelationEstimate; 4],
    ) -> Result<Self, AnalysisError> {
        let [ab, ab2, a2b, a2b2] = &correlations;
        let statistic = chsh_statistic(ab.estimate, ab2.estimate, a2b.estimate, a2b2.estimate)?;
        let stderr = combined_stderr(correlations.iter().map(|c| c.stderr));
        Ok(Self {
            a,
            a_prime,
            b,
            b_prime,
            correlations: correlations.to_vec(),
            statistic,
            stderr,
            bound: CHSH_BOUND,
            violated: statistic > CHSH_BOUND,
            margin_sigma: sigma(statistic - CHSH_BOUND, stderr),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bell1964Result {
    pub a: Angle,
    pub b: Angle,
    pub c: Angle,
    pub e_ab: f64,
    pub e_ac: f64,
    pub e_bc: f64,
    pub slack: f64,
    pub stderr: f64,
    pub violated: bool,
    /// `−slack / stderr`, positive when violated.
    pub margin_sigma: Option<f64>,
}

impl Bell1964Result {
    pub fn from_estimates(
        ab: &CorrelationEstimate,
        ac: &CorrelationEstimate,
        bc: &CorrelationEstimate,
    ) -> Self {
        let (slack, violated) = bell1964_check(ab.estimate, ac.estimate, bc.estimate);
        let stderr = combined_stderr([ab.stderr, ac.stderr, bc.stderr]);
        Self {
            a: ab.a,
            b: ab.b,
            c: ac.b,
            e_ab: ab.estimate,
            e_ac: ac.estimate,
            e_bc: bc.estimate,
            slack,
            stderr,
            violated,
            margin_sigma: sigma(-slack, stderr),
        }
    }
}

fn combined_stderr(errs: impl IntoIterator<Item = f64>) -> f64 {
    errs.into_iter().map(|e| e * e).sum::<f64>().sqrt()
}

fn sigma(excess: f64, stderr: f64) -> Option<f64> {
    (stderr > 0.0).then(|| excess / stderr)
}

/// A correlation for one observed setting pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupEstimate {
    #[serde(flatten)]
    pub estimate: CorrelationEstimate,
    pub low_count: bool,
}

/// Splits trials by the setting pair each station actually used.
pub fn ekert_group_correlations(
    r1: &[MeasurementRecord],
    r2: &[MeasurementRecord],
    min_count: u64,
) -> Result<Vec<GroupEstimate>, AnalysisError> {
    let pairs = paired(r1, r2, |_| true)?;
    // settings are non-negative, so bit order is numeric order
    let mut groups: BTreeMap<(u64, u64), (Vec<MeasurementRecord>, Vec<MeasurementRecord>)> =
        BTreeMap::new();
    for (x, y) in pairs {
        let g = groups
            .entry((x.setting.radians().to_bits(), y.setting.radians().to_bits()))
            .or_default();
        g.0.push(*x);
        g.1.push(*y);
    }
    groups
        .values()
        .map(|(g1, g2)| {
            let estimate = estimate_correlation(g1, g2, |_| true, Estimator::Plain)?;
            Ok(GroupEstimate {
                low_count: estimate.count < min_count,
                estimate,
            })
        })
        .collect()
}

/// Weighted marginal `mean(s_role·w₁·w₂)`; zero in expectation.
pub fn weighted_marginal(
    r1: &[MeasurementRecord],
    r2: &[MeasurementRecord],
    role: Role,
) -> Result<MeanEstimate, AnalysisError> {
    let pairs = paired(r1, r2, |_| true)?;
    let terms: Vec<f64> = pairs
        .iter()
        .map(|(x, y)| {
            let s = match role {
                Role::One => x.sign,
                Role::Two => y.sign,
            };
            s.as_f64() * x.weight * y.weight
        })
        .collect();
    MeanEstimate::from_terms(&terms)
        .ok_or_else(|| AnalysisError::InsufficientData("no trials".into()))
}

/// `mean(w₁·w₂)`; one in expectation.
pub fn weight_product_mean(
    r1: &[MeasurementRecord],
    r2: &[MeasurementRecord],
) -> Result<MeanEstimate, AnalysisError> {
    let pairs = paired(r1, r2, |_| true)?;
    let terms: Vec<f64> = pairs.iter().map(|(x, y)| x.weight * y.weight).collect();
    MeanEstimate::from_terms(&terms)
        .ok_or_else(|| AnalysisError::InsufficientData("no trials".into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub a: f64,
    pub b: f64,
    pub estimate: f64,
    pub stderr: f64,
    pub count: u64,
    pub estimator: Estimator,
    pub low_count: bool,
    pub exceeds_unit: bool,
}

impl CorrelationRow {
    fn new(e: &CorrelationEstimate, low_count: bool) -> Self {
        Self {
            a: e.a.radians(),
            b: e.b.radians(),
            estimate: e.estimate,
            stderr: e.stderr,
            count: e.count,
            estimator: e.estimator,
            low_count,
            exceeds_unit: e.exceeds_unit(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Marginals {
    pub station1: MeanEstimate,
    pub station2: MeanEstimate,
    pub weight_product: MeanEstimate,
}

/// Estimated correlation against the setting difference, with the `−cos`
/// curve sampled for overlay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotData {
    pub estimate: Vec<[f64; 2]>,
    pub reference: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub run_id: String,
    pub mode: String,
    pub seed: u64,
    pub n: u64,
    pub correlations: Vec<CorrelationRow>,
    pub chsh: Option<ChshResult>,
    pub bell1964: Vec<Bell1964Result>,
    pub marginals: Marginals,
    pub plot: PlotData,
}

fn range_selector(r: &Range<u64>) -> impl Fn(u64) -> bool + '_ {
    move |t| r.contains(&t)
}

fn plot_data(rows: &[CorrelationRow]) -> PlotData {
    let mut estimate: Vec<[f64; 2]> = rows
        .iter()
        .map(|r| [(r.b - r.a).rem_euclid(TAU), r.estimate])
        .collect();
    estimate.sort_by(|x, y| x[0].total_cmp(&y[0]).then(x[1].total_cmp(&y[1])));
    let reference = (0..REFERENCE_SAMPLES)
        .map(|k| {
            let d = TAU * k as f64 / (REFERENCE_SAMPLES - 1) as f64;
            [d, -d.cos()]
        })
        .collect();
    PlotData {
        estimate,
        reference,
    }
}

/// Computes the full report for a run from its two record sets.
pub fn analyze(
    cfg: &RunConfig,
    station1: &RecordSet,
    station2: &RecordSet,
    min_group: u64,
) -> Result<Report, AnalysisError> {
    let (r1, r2) = (&station1.records[..], &station2.records[..]);
    let mut chsh = None;
    let mut bell1964 = Vec::new();
    let correlations: Vec<CorrelationRow> = match &cfg.mode {
        RunMode::Single { .. } => {
            let e = estimate_correlation(r1, r2, |_| true, Estimator::Plain)?;
            vec![CorrelationRow::new(&e, e.count < min_group)]
        }
        RunMode::Chsh {
            a,
            a_prime,
            b,
            b_prime,
            ..
        } => {
            let ranges = cfg.chsh_ranges()?;
            let mut est = Vec::with_capacity(4);
            for r in &ranges {
                est.push(estimate_correlation(r1, r2, range_selector(r), Estimator::Plain)?);
            }
            let est: [CorrelationEstimate; 4] = est.try_into().expect("four ranges");
            let result = ChshResult::from_estimates([*a, *a_prime, *b, *b_prime], est)?;
            let rows = result
                .correlations
                .iter()
                .map(|e| CorrelationRow::new(e, e.count < min_group))
                .collect();
            chsh = Some(result);
            rows
        }
        RunMode::Ekert { angle_set, .. } => {
            let groups = ekert_group_correlations(r1, r2, min_group)?;
            let find = |x: Angle, y: Angle| {
                groups
                    .iter()
                    .find(|g| g.estimate.a == x && g.estimate.b == y)
                    .map(|g| &g.estimate)
            };
            for &x in angle_set {
                for &y in angle_set {
                    for &z in angle_set {
                        if x == y || y == z || x == z {
                            continue;
                        }
                        if let (Some(ab), Some(ac), Some(bc)) = (find(x, y), find(x, z), find(y, z)) {
                            bell1964.push(Bell1964Result::from_estimates(ab, ac, bc));
                        }
                    }
                }
            }
            groups
                .iter()
                .map(|g| CorrelationRow::new(&g.estimate, g.low_count))
                .collect()
        }
    };
    let marginals = Marginals {
        station1: weighted_marginal(r1, r2, Role::One)?,
        station2: weighted_marginal(r1, r2, Role::Two)?,
        weight_product: weight_product_mean(r1, r2)?,
    };
    Ok(Report {
        run_id: cfg.run_id(),
        mode: cfg.mode.name().to_string(),
        seed: cfg.seed,
        n: cfg.n,
        plot: plot_data(&correlations),
        correlations,
        chsh,
        bell1964,
        marginals,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(format!("unknown report format {other:?} (expected json or csv)")),
        }
    }
}

pub const CSV_HEADER: &str = "kind,a,b,c,d,value,stderr,count,estimator,flags";

/// Renders the report as one CSV table whose rows mirror the JSON sections,
/// plot series included.
pub fn report_csv(report: &Report) -> String {
    let mut out = String::new();
    let mut line = |cols: [String; 10]| {
        let _ = writeln!(out, "{}", cols.join(","));
    };
    let s = |x: f64| x.to_string();
    let flags = |items: &[(&str, bool)]| {
        items
            .iter()
            .filter(|(_, on)| *on)
            .map(|(n, _)| *n)
            .collect::<Vec<_>>()
            .join("|")
    };
    for r in &report.correlations {
        line([
            "correlation".into(),
            s(r.a),
            s(r.b),
            String::new(),
            String::new(),
            s(r.estimate),
            s(r.stderr),
            r.count.to_string(),
            r.estimator.name().into(),
            flags(&[("low_count", r.low_count), ("exceeds_unit", r.exceeds_unit)]),
        ]);
    }
    if let Some(c) = &report.chsh {
        line([
            "chsh".into(),
            s(c.a.radians()),
            s(c.a_prime.radians()),
            s(c.b.radians()),
            s(c.b_prime.radians()),
            s(c.statistic),
            s(c.stderr),
            c.correlations.iter().map(|e| e.count).sum::<u64>().to_string(),
            String::new(),
            flags(&[("violated", c.violated)]),
        ]);
    }
    for b in &report.bell1964 {
        line([
            "bell1964".into(),
            s(b.a.radians()),
            s(b.b.radians()),
            s(b.c.radians()),
            String::new(),
            s(b.slack),
            s(b.stderr),
            String::new(),
            String::new(),
            flags(&[("violated", b.violated)]),
        ]);
    }
    let m = &report.marginals;
    for (kind, e) in [
        ("marginal_station1", &m.station1),
        ("marginal_station2", &m.station2),
        ("weight_product", &m.weight_product),
    ] {
        line([
            kind.into(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            s(e.estimate),
            s(e.stderr),
            e.count.to_string(),
            String::new(),
            String::new(),
        ]);
    }
    for (kind, series) in [
        ("plot_estimate", &report.plot.estimate),
        ("plot_reference", &report.plot.reference),
    ] {
        for [d, v] in series {
            line([
                kind.into(),
                s(*d),
                String::new(),
                String::new(),
                String::new(),
                s(*v),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
            ]);
        }
    }
    format!("{CSV_HEADER}\n{out}")
}

/// Writes the report in the requested format.
pub fn emit_report<W: Write>(report: &Report, format: ReportFormat, mut out: W) -> io::Result<()> {
    match format {
        ReportFormat::Json => {
            serde_json::to_writer_pretty(&mut out, report)?;
            out.write_all(b"\n")?;
        }
        ReportFormat::Csv => out.write_all(report_csv(report).as_bytes())?,
    }
    out.flush()
}

/// Writes the report to `path`, naming the path in any I/O error.
pub fn write_report_file(report: &Report, format: ReportFormat, path: &Path) -> Result<(), AnalysisError> {
    let io_err = |source| AnalysisError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    emit_report(report, format, BufWriter::new(file)).map_err(io_err)
}

/// Writes the plot series to `path`, naming the path in any I/O error.
pub fn write_plot_file(plot: &PlotData, path: &Path) -> Result<(), AnalysisError> {
    let io_err = |source| AnalysisError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    emit_plot_data(plot, BufWriter::new(file)).map_err(io_err)
}

/// Two series: `delta,estimate` then, after a blank line, `delta,-cos(delta)`.
pub fn emit_plot_data<W: Write>(plot: &PlotData, mut out: W) -> io::Result<()> {
    writeln!(out, "delta,estimate")?;
    for [d, e] in &plot.estimate {
        writeln!(out, "{d},{e}")?;
    }
    writeln!(out)?;
    writeln!(out, "delta,-cos(delta)")?;
    for [d, v] in &plot.reference {
        writeln!(out, "{d},{v}")?;
    }
    out.flush()
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn chsh_negation_invariant(
            a in -1.5..1.5f64, b in -1.5..1.5f64, c in -1.5..1.5f64, d in -1.5..1.5f64,
        ) {
            let s = chsh_statistic(a, b, c, d).unwrap();
            let t = chsh_statistic(-a, -b, -c, -d).unwrap();
            prop_assert_eq!(s, t);
        }
    }
}
