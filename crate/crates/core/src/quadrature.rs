//! Deterministic quadrature for the model's one-dimensional integrals.
//!
//! Every integrand here is smooth between analytically known breakpoints
//! (the zeros of `cos(λ − x)` for each setting `x`), so integration is a
//! composite Gauss–Legendre rule applied per smooth piece, with panel
//! doubling until two successive refinements agree within the piece's share
//! of the tolerance. The delta function of the singlet measure is always
//! eliminated symbolically first; only reduced one-dimensional integrals are
//! evaluated.

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    self, observable_station1, observable_station2, transport_map_station1,
    transport_map_station2, transported_observable_station1, transported_observable_station2,
    weight_station1, weight_station2, Angle, HiddenState, ModelError, Role, SQRT_TAU,
    TRANSPORT1_CODOMAIN_MAX,
};

pub const DEFAULT_NORMALIZATION_TOL: f64 = 1e-10;
pub const DEFAULT_CORRELATION_TOL: f64 = 1e-8;
pub const DEFAULT_CHANGE_OF_VARIABLES_TOL: f64 = 1e-6;

const GAUSS_POINTS: usize = 12;
const MAX_PANELS: usize = 1 << 14;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuadratureError {
    #[error("integrand is not finite at x = {at} (value {value})")]
    NonFinite { at: f64, value: f64 },
    #[error("invalid integration arguments: {0}")]
    InvalidArgument(String),
    #[error("no convergence on [{lo}, {hi}] after {panels} panels")]
    NoConvergence { lo: f64, hi: f64, panels: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// A real function together with the points where it may fail to be smooth.
pub struct PiecewiseIntegrand<F> {
    function: F,
    breakpoints: Vec<f64>,
}

impl<F> PiecewiseIntegrand<F> {
    /// Breakpoints are sorted and deduplicated; NaNs are dropped.
    pub fn new(function: F, mut breakpoints: Vec<f64>) -> Self {
        breakpoints.retain(|x| !x.is_nan());
        breakpoints.sort_by(f64::total_cmp);
        breakpoints.dedup();
        Self {
            function,
            breakpoints,
        }
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }
}

struct GaussRule {
    nodes: [f64; GAUSS_POINTS],
    weights: [f64; GAUSS_POINTS],
}

/// Legendre nodes and weights by Newton iteration on `P_n`.
fn gauss_rule() -> &'static GaussRule {
    static RULE: OnceLock<GaussRule> = OnceLock::new();
    RULE.get_or_init(|| {
        let n = GAUSS_POINTS;
        let mut nodes = [0.0; GAUSS_POINTS];
        let mut weights = [0.0; GAUSS_POINTS];
        for i in 0..n {
            let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, x);
                for k in 2..=n {
                    let k = k as f64;
                    let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
                    p0 = p1;
                    p1 = p2;
                }
                dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            nodes[i] = x;
            weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
        }
        GaussRule { nodes, weights }
    })
}

fn composite<F, E>(f: &F, lo: f64, hi: f64, panels: usize) -> Result<f64, E>
where
    F: Fn(f64) -> Result<f64, E>,
    E: From<QuadratureError>,
{
    let rule = gauss_rule();
    let h = (hi - lo) / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let left = lo + h * p as f64;
        let mid = left + 0.5 * h;
        let mut sum = 0.0;
        for (x, w) in rule.nodes.iter().zip(rule.weights.iter()) {
            let at = mid + 0.5 * h * x;
            let value = f(at)?;
            if !value.is_finite() {
                return Err(QuadratureError::NonFinite { at, value }.into());
            }
            sum += w * value;
        }
        total += 0.5 * h * sum;
    }
    Ok(total)
}

fn integrate_smooth<F, E>(f: &F, lo: f64, hi: f64, tol: f64) -> Result<f64, E>
where
    F: Fn(f64) -> Result<f64, E>,
    E: From<QuadratureError>,
{
    let mut panels = 1;
    let mut coarse = composite(f, lo, hi, panels)?;
    loop {
        panels *= 2;
        let fine = composite(f, lo, hi, panels)?;
        if (fine - coarse).abs() <= tol {
            return Ok(fine);
        }
        if panels >= MAX_PANELS {
            return Err(QuadratureError::NoConvergence { lo, hi, panels }.into());
        }
        coarse = fine;
    }
}

fn check_bounds(lo: f64, hi: f64, tol: f64) -> Result<(), QuadratureError> {
    if !(lo.is_finite() && hi.is_finite()) || lo > hi {
        return Err(QuadratureError::InvalidArgument(format!(
            "need finite lo <= hi, got [{lo}, {hi}]"
        )));
    }
    if !(tol > 0.0 && tol.is_finite()) {
        return Err(QuadratureError::InvalidArgument(format!(
            "tolerance must be positive, got {tol}"
        )));
    }
    Ok(())
}

/// Integrates a fallible integrand over `[lo, hi]`, splitting at breakpoints.
pub fn try_integrate_piecewise<F, E>(
    integrand: &PiecewiseIntegrand<F>,
    lo: f64,
    hi: f64,
    tol: f64,
) -> Result<f64, E>
where
    F: Fn(f64) -> Result<f64, E>,
    E: From<QuadratureError>,
{
    check_bounds(lo, hi, tol)?;
    if lo == hi {
        return Ok(0.0);
    }
    let mut edges = vec![lo];
    edges.extend(integrand.breakpoints.iter().copied().filter(|&x| x > lo && x < hi));
    edges.push(hi);
    let width = hi - lo;
    let mut total = 0.0;
    for piece in edges.windows(2) {
        let (a, b) = (piece[0], piece[1]);
        if b <= a {
            continue;
        }
        total += integrate_smooth(&integrand.function, a, b, tol * (b - a) / width)?;
    }
    Ok(total)
}

/// Integrates `f` over `[lo, hi]` to absolute accuracy `tol`.
pub fn integrate_piecewise<F>(
    integrand: &PiecewiseIntegrand<F>,
    lo: f64,
    hi: f64,
    tol: f64,
) -> Result<f64, QuadratureError>
where
    F: Fn(f64) -> f64,
{
    let wrapped = PiecewiseIntegrand {
        function: |x: f64| Ok::<f64, QuadratureError>((integrand.function)(x)),
        breakpoints: integrand.breakpoints.clone(),
    };
    try_integrate_piecewise(&wrapped, lo, hi, tol)
}

/// Zeros of `cos(λ − x)` in `[0, 2π)` for each setting `x`.
pub fn setting_breakpoints(settings: &[Angle]) -> Vec<f64> {
    settings
        .iter()
        .flat_map(|x| {
            let r = x.radians();
            [r + FRAC_PI_2, r - FRAC_PI_2]
        })
        .map(|x| x.rem_euclid(TAU))
        .filter(|x| *x < TAU)
        .collect()
}

/// Singlet-measure average `(2π)⁻¹∫₀^{2π} g(λ) dλ` of a function of the shared state.
fn singlet_average<G>(g: G, settings: &[Angle], tol: f64) -> Result<f64, QuadratureError>
where
    G: Fn(HiddenState) -> f64,
{
    let f = PiecewiseIntegrand::new(|l: f64| g(HiddenState::new(l)), setting_breakpoints(settings));
    Ok(integrate_piecewise(&f, 0.0, TAU, tol * TAU)? / TAU)
}

/// `(2π)⁻¹∫₀^{2π} S⁽¹⁾ₐ S⁽²⁾♭ T′₁,ₐ T′₂,♭ dλ`.
pub fn correlation_quadrature(a: Angle, b: Angle, tol: f64) -> Result<f64, QuadratureError> {
    singlet_average(
        |l| {
            observable_station1(a, l).as_f64()
                * observable_station2(b, l).as_f64()
                * weight_station1(a, l)
                * weight_station2(b, l)
        },
        &[a, b],
        tol,
    )
}

/// `(2π)⁻¹∫₀^{2π} T′₁,ₐ T′₂,♭ dλ`, which equals one.
pub fn normalization_quadrature(a: Angle, b: Angle, tol: f64) -> Result<f64, QuadratureError> {
    singlet_average(
        |l| weight_station1(a, l) * weight_station2(b, l),
        &[a, b],
        tol,
    )
}

/// Weighted marginal of one station, `(2π)⁻¹∫ S⁽ʲ⁾ T′₁,ₐ T′₂,♭ dλ`, which vanishes.
pub fn marginal_quadrature(
    station: Role,
    a: Angle,
    b: Angle,
    tol: f64,
) -> Result<f64, QuadratureError> {
    singlet_average(
        |l| {
            let s = match station {
                Role::One => observable_station1(a, l),
                Role::Two => observable_station2(b, l),
            };
            s.as_f64() * weight_station1(a, l) * weight_station2(b, l)
        },
        &[a, b],
        tol,
    )
}

/// Correlation evaluated in transported coordinates `μ = T λ`.
///
/// The delta on the diagonal is removed by integrating out `μ₂`: since
/// `T₂,♭` is linear, `μ₂ = T₂,♭(T₁,ₐ⁻¹ μ₁)` with Jacobian `√(2π)`, leaving
///
/// `(2π)⁻¹·√(2π)·∫₀^{√(2π)} S̃⁽¹⁾ₐ(μ) S̃⁽²⁾♭(T₂,♭ T₁,ₐ⁻¹ μ) dμ`
///
/// where each `T₁,ₐ⁻¹` is computed by bisection.
pub fn correlation_change_of_variables(
    a: Angle,
    b: Angle,
    tol: f64,
) -> Result<f64, QuadratureError> {
    let integrand = |mu: f64| -> Result<f64, QuadratureError> {
        let s1 = transported_observable_station1(a, mu)?;
        let lambda = model::invert_transport_station1(a, mu)?;
        let s2 = transported_observable_station2(b, transport_map_station2(b, lambda))?;
        Ok(s1.as_f64() * s2.as_f64())
    };
    // sign changes happen at the images of the λ-breakpoints
    let breaks = setting_breakpoints(&[a, b])
        .into_iter()
        .map(|l| transport_map_station1(a, l))
        .collect();
    let f = PiecewiseIntegrand::new(integrand, breaks);
    let scale = SQRT_TAU / TAU;
    let raw: f64 = try_integrate_piecewise(&f, 0.0, TRANSPORT1_CODOMAIN_MAX, tol / scale)?;
    Ok(scale * raw)
}

/// Integration route used for a verification row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifyMethod {
    Correlation,
    Normalization,
    MarginalStation1,
    MarginalStation2,
    ChangeOfVariables,
}

impl VerifyMethod {
    pub fn name(self) -> &'static str {
        match self {
            VerifyMethod::Correlation => "correlation",
            VerifyMethod::Normalization => "normalization",
            VerifyMethod::MarginalStation1 => "marginal_station1",
            VerifyMethod::MarginalStation2 => "marginal_station2",
            VerifyMethod::ChangeOfVariables => "change_of_variables",
        }
    }
}

/// One verified integral: its value, the target it is checked against and
/// the allowed deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyRow {
    pub a: f64,
    pub b: f64,
    pub value: f64,
    pub tol: f64,
    pub method: VerifyMethod,
    #[serde(skip)]
    pub target: f64,
}

impl VerifyRow {
    pub fn deviation(&self) -> f64 {
        (self.value - self.target).abs()
    }

    pub fn passed(&self) -> bool {
        self.deviation() <= self.tol
    }
}

/// Settings of the numerical verification suite.
#[derive(Clone, Copy, Debug)]
pub struct VerifyOptions {
    /// Points per axis for the correlation, normalization and marginal grids.
    pub grid: usize,
    /// Tolerance for correlations and marginals.
    pub tol: f64,
    pub normalization_tol: f64,
    /// Points per axis for the change-of-variables grid.
    pub change_of_variables_grid: usize,
    pub change_of_variables_tol: f64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            grid: 16,
            tol: DEFAULT_CORRELATION_TOL,
            normalization_tol: DEFAULT_NORMALIZATION_TOL,
            change_of_variables_grid: 8,
            change_of_variables_tol: DEFAULT_CHANGE_OF_VARIABLES_TOL,
        }
    }
}

/// `k·2π/n` for `k = 0..n`.
pub fn uniform_grid(n: usize) -> Vec<Angle> {
    (0..n).map(|k| Angle::new(TAU * k as f64 / n as f64)).collect()
}

/// Evaluates every integral of the suite on its grid.
///
/// Integrations run at a tenth of the acceptance tolerance so that the
/// reported deviation measures the model, not the integrator.
pub fn run_verification(opts: &VerifyOptions) -> Result<Vec<VerifyRow>, QuadratureError> {
    let mut rows = Vec::new();
    let grid = uniform_grid(opts.grid);
    let row = |a: Angle, b: Angle, value, tol, target, method| VerifyRow {
        a: a.radians(),
        b: b.radians(),
        value,
        tol,
        method,
        target,
    };
    for &a in &grid {
        for &b in &grid {
            let target = model::closed_form_correlation(a, b);
            let v = correlation_quadrature(a, b, opts.tol / 10.0)?;
            rows.push(row(a, b, v, opts.tol, target, VerifyMethod::Correlation));
            let v = normalization_quadrature(a, b, opts.normalization_tol / 10.0)?;
            rows.push(row(a, b, v, opts.normalization_tol, 1.0, VerifyMethod::Normalization));
            let v = marginal_quadrature(Role::One, a, b, opts.tol / 10.0)?;
            rows.push(row(a, b, v, opts.tol, 0.0, VerifyMethod::MarginalStation1));
            let v = marginal_quadrature(Role::Two, a, b, opts.tol / 10.0)?;
            rows.push(row(a, b, v, opts.tol, 0.0, VerifyMethod::MarginalStation2));
        }
    }
    for &a in &uniform_grid(opts.change_of_variables_grid) {
        for &b in &uniform_grid(opts.change_of_variables_grid) {
            let target = correlation_quadrature(a, b, opts.tol / 10.0)?;
            let v = correlation_change_of_variables(a, b, opts.change_of_variables_tol / 10.0)?;
            rows.push(row(
                a,
                b,
                v,
                opts.change_of_variables_tol,
                target,
                VerifyMethod::ChangeOfVariables,
            ));
        }
    }
    Ok(rows)
}
