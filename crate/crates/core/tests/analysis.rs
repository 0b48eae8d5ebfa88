use std::f64::consts::{FRAC_PI_2, FRAC_PI_3, FRAC_PI_4, SQRT_2};

use chameleon_core::analysis::{
    analyze, ekert_group_correlations, emit_plot_data, emit_report, estimate_correlation,
    weight_product_mean, weighted_marginal, write_report_file, Estimator, Report, ReportFormat, CSV_HEADER,
    DEFAULT_MIN_GROUP,
};
use chameleon_core::model::closed_form_correlation;
use chameleon_core::protocol::{coordinate_run, RunConfig, RunMode, Transport};
use chameleon_core::station::{run_station, AnglePolicy, MeasurementRecord, RecordSet};
use chameleon_core::{Angle, Role};

fn fixed_pair(seed: u64, n: u64, a: f64, b: f64) -> (Vec<MeasurementRecord>, Vec<MeasurementRecord>) {
    let p1 = AnglePolicy::Fixed { angle: Angle::new(a) };
    let p2 = AnglePolicy::Fixed { angle: Angle::new(b) };
    (
        run_station(Role::One, seed, n, &p1).unwrap(),
        run_station(Role::Two, seed, n, &p2).unwrap(),
    )
}

fn set(role: Role, seed: u64, records: Vec<MeasurementRecord>) -> RecordSet {
    RecordSet { role, seed, records }
}

#[test]
fn seed_42_quarter_pi_estimate() {
    let (r1, r2) = fixed_pair(42, 10_000, 0.0, FRAC_PI_4);
    let e = estimate_correlation(&r1, &r2, |_| true, Estimator::Plain).unwrap();
    assert!((e.estimate + std::f64::consts::FRAC_1_SQRT_2).abs() < 0.05, "{}", e.estimate);
    // per-trial variance π²/8 − 1/2 at this setting difference
    let sd = (std::f64::consts::PI.powi(2) / 8.0 - 0.5).sqrt();
    assert!((e.stderr - sd / 100.0).abs() < 0.001, "{}", e.stderr);
}

#[test]
fn plain_estimator_is_consistent_across_seeds() {
    let (a, b) = (0.4, 1.7);
    let target = closed_form_correlation(Angle::new(a), Angle::new(b));
    let mut hits = 0;
    for seed in 0..100u64 {
        let (r1, r2) = fixed_pair(seed * 7919 + 1, 4_000, a, b);
        let e = estimate_correlation(&r1, &r2, |_| true, Estimator::Plain).unwrap();
        if (e.estimate - target).abs() <= 2.0 * e.stderr {
            hits += 1;
        }
    }
    // 95% nominal coverage; 88 sits several binomial sigmas below
    assert!(hits >= 88, "{hits}/100 within two standard errors");
}

#[test]
fn self_normalized_estimator_tracks_target() {
    let (r1, r2) = fixed_pair(5, 20_000, 1.0, 2.2);
    let target = closed_form_correlation(Angle::new(1.0), Angle::new(2.2));
    let e = estimate_correlation(&r1, &r2, |_| true, Estimator::SelfNormalized).unwrap();
    assert!((e.estimate - target).abs() < 5.0 * e.stderr, "{} vs {target}", e.estimate);
}

#[test]
fn ekert_groups_track_targets() {
    let angles: Vec<Angle> = [0.0, FRAC_PI_3, 2.0 * FRAC_PI_3].map(Angle::new).to_vec();
    let p1 = AnglePolicy::SeededRandom {
        choices: angles.clone(),
        choice_seed: 11,
    };
    let p2 = AnglePolicy::SeededRandom {
        choices: angles,
        choice_seed: 12,
    };
    let r1 = run_station(Role::One, 77, 90_000, &p1).unwrap();
    let r2 = run_station(Role::Two, 77, 90_000, &p2).unwrap();
    let groups = ekert_group_correlations(&r1, &r2, DEFAULT_MIN_GROUP).unwrap();
    assert_eq!(groups.len(), 9);
    let total: u64 = groups.iter().map(|g| g.estimate.count).sum();
    assert_eq!(total, 90_000);
    for w in groups.windows(2) {
        let key = |g: &chameleon_core::analysis::GroupEstimate| (g.estimate.a.radians(), g.estimate.b.radians());
        assert!(key(&w[0]) < key(&w[1]));
    }
    for g in &groups {
        let e = &g.estimate;
        assert!(!g.low_count);
        assert!(
            (e.estimate - e.target()).abs() < 5.0 * e.stderr,
            "({}, {}): {} vs {}",
            e.a,
            e.b,
            e.estimate,
            e.target()
        );
    }
}

#[test]
fn marginals_vanish_and_weights_average_to_one() {
    let (r1, r2) = fixed_pair(8, 40_000, 0.5, 2.0);
    for role in [Role::One, Role::Two] {
        let m = weighted_marginal(&r1, &r2, role).unwrap();
        assert!(m.estimate.abs() < 5.0 * m.stderr, "{role}: {}", m.estimate);
    }
    let w = weight_product_mean(&r1, &r2).unwrap();
    assert!((w.estimate - 1.0).abs() < 5.0 * w.stderr, "{}", w.estimate);
}

fn chsh_config(dir: &std::path::Path) -> RunConfig {
    RunConfig {
        seed: 42,
        n: 40_000,
        mode: RunMode::Chsh {
            a: Angle::new(0.0),
            a_prime: Angle::new(FRAC_PI_2),
            b: Angle::new(FRAC_PI_4),
            b_prime: Angle::new(3.0 * FRAC_PI_4),
            boundaries: None,
        },
        transport: Transport::default(),
        output_dir: dir.to_path_buf(),
    }
}

#[test]
fn chsh_report_violates_classical_bound() {
    let dir = tempfile::tempdir().unwrap();
    let run = coordinate_run(&chsh_config(dir.path())).unwrap();
    let report = analyze(run.config(), &run.station1, &run.station2, DEFAULT_MIN_GROUP).unwrap();
    let chsh = report.chsh.as_ref().unwrap();
    assert_eq!(chsh.correlations.len(), 4);
    for e in &chsh.correlations {
        assert_eq!(e.count, 10_000);
        assert!((e.estimate - e.target()).abs() < 5.0 * e.stderr);
    }
    assert!((chsh.statistic - 2.0 * SQRT_2).abs() < 0.1);
    assert!(chsh.violated);
    assert!(chsh.margin_sigma.unwrap() > 5.0);
    assert_eq!(report.correlations.len(), 4);
    assert!(report.bell1964.is_empty());
}

#[test]
fn ekert_report_has_bell_triples() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        seed: 3,
        n: 90_000,
        mode: RunMode::Ekert {
            angle_set: [0.0, FRAC_PI_3, 2.0 * FRAC_PI_3].map(Angle::new).to_vec(),
            choice_seeds: [1, 2],
        },
        transport: Transport::default(),
        output_dir: dir.path().to_path_buf(),
    };
    let run = coordinate_run(&cfg).unwrap();
    let report = analyze(run.config(), &run.station1, &run.station2, DEFAULT_MIN_GROUP).unwrap();
    assert_eq!(report.correlations.len(), 9);
    assert_eq!(report.bell1964.len(), 6);
    let main = report
        .bell1964
        .iter()
        .find(|t| t.a.radians() == 0.0 && t.b == Angle::new(FRAC_PI_3) && t.c == Angle::new(2.0 * FRAC_PI_3))
        .unwrap();
    assert!(main.violated);
    assert!((main.slack + 0.5).abs() < 5.0 * main.stderr);
    assert!(main.margin_sigma.unwrap() >= 5.0);
}

fn render(report: &Report, format: ReportFormat) -> String {
    let mut out = Vec::new();
    emit_report(report, format, &mut out).unwrap();
    String::from_utf8(out).unwrap()
}

#[test]
fn reports_are_deterministic_and_round_trip() {
    let (r1, r2) = fixed_pair(21, 3_000, 0.0, 1.0);
    let cfg = RunConfig {
        seed: 21,
        n: 3_000,
        mode: RunMode::Single {
            a: Angle::new(0.0),
            b: Angle::new(1.0),
        },
        transport: Transport::default(),
        output_dir: "unused".into(),
    };
    let (s1, s2) = (set(Role::One, 21, r1), set(Role::Two, 21, r2));
    let report = analyze(&cfg, &s1, &s2, DEFAULT_MIN_GROUP).unwrap();
    let again = analyze(&cfg, &s1, &s2, DEFAULT_MIN_GROUP).unwrap();
    let json = render(&report, ReportFormat::Json);
    assert_eq!(json, render(&again, ReportFormat::Json));
    let back: Report = serde_json::from_str(&json).unwrap();
    assert_eq!(back, report);

    let csv = render(&report, ReportFormat::Csv);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(CSV_HEADER));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row.len(), 10);
    assert_eq!(row[0], "correlation");
    assert_eq!(row[5].parse::<f64>().unwrap(), report.correlations[0].estimate);
    assert_eq!(csv.lines().count(), 1 + 1 + 3 + 1 + 73);
    assert!(csv.contains("\nplot_estimate,1,,,,"));

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent").join("report.json");
    match write_report_file(&report, ReportFormat::Json, &missing) {
        Err(e) => assert!(e.to_string().contains("absent"), "{e}"),
        Ok(()) => panic!("write into a missing directory succeeded"),
    }

    let mut plot = Vec::new();
    emit_plot_data(&report.plot, &mut plot).unwrap();
    let plot = String::from_utf8(plot).unwrap();
    let blocks: Vec<&str> = plot.split("\n\n").collect();
    assert_eq!(blocks.len(), 2);
    assert!(blocks[0].starts_with("delta,estimate\n1,"));
    assert!(blocks[1].starts_with("delta,-cos(delta)\n0,-1\n"));
}
