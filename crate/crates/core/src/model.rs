//! The chameleon model: ±1 observables, local dynamical weights, transport
//! maps and the locality combinator for reduced dynamics.
//!
//! Station 1 measures `sgn(cos(λ − a))` and carries the weight
//! `(√(2π)/4)|cos(λ − a)|`; station 2 measures `−sgn(cos(λ − b))` with the
//! constant weight `√(2π)`. The weight of each station depends only on its
//! own setting and the shared state, never on the other station's setting.

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// `√(2π)`.
pub const SQRT_TAU: f64 = 2.506_628_274_631_000_5;

/// Peak weight of station 1, `√(2π)/4`.
pub const STATION1_PEAK_WEIGHT: f64 = SQRT_TAU / 4.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("transport value {value} outside the codomain [0, {max}]")]
    Domain { value: f64, max: f64 },
    #[error("cannot parse angle {0:?}")]
    AngleSyntax(String),
    #[error("angle must be finite, got {0}")]
    NonFinite(f64),
}

/// An analyzer setting in radians, reduced into `[0, 2π)`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "AngleRepr", into = "f64")]
pub struct Angle(f64);

impl Angle {
    pub const ZERO: Angle = Angle(0.0);

    /// Reduces `radians` modulo 2π. Expects finite input; use
    /// [`Angle::try_new`] for untrusted values.
    pub fn new(radians: f64) -> Self {
        Angle(reduce_angle(radians))
    }

    pub fn try_new(radians: f64) -> Result<Self, ModelError> {
        if radians.is_finite() {
            Ok(Self::new(radians))
        } else {
            Err(ModelError::NonFinite(radians))
        }
    }

    pub fn radians(self) -> f64 {
        self.0
    }

    /// Parses decimal radians or a rational multiple of π such as `pi`,
    /// `-pi/2`, `3pi/4`, `3*pi/4` or `2π/3`.
    pub fn parse(text: &str) -> Result<Self, ModelError> {
        parse_radians(text)
            .ok_or_else(|| ModelError::AngleSyntax(text.to_string()))
            .and_then(Self::try_new)
    }
}

impl fmt::Display for Angle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl FromStr for Angle {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Angle::parse(s)
    }
}

impl From<Angle> for f64 {
    fn from(a: Angle) -> f64 {
        a.0
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum AngleRepr {
    Number(f64),
    Text(String),
}

impl TryFrom<AngleRepr> for Angle {
    type Error = ModelError;

    fn try_from(r: AngleRepr) -> Result<Self, Self::Error> {
        match r {
            AngleRepr::Number(x) => Angle::try_new(x),
            AngleRepr::Text(s) => Angle::parse(&s),
        }
    }
}

fn reduce_angle(x: f64) -> f64 {
    let r = x.rem_euclid(TAU);
    // rem_euclid of a tiny negative number rounds up to exactly 2π.
    if r >= TAU {
        0.0
    } else {
        r
    }
}

fn parse_radians(text: &str) -> Option<f64> {
    let t: String = text.chars().filter(|c| !c.is_whitespace()).collect();
    let lower = t.to_ascii_lowercase().replace('π', "pi");
    let Some(pos) = lower.find("pi") else {
        return lower.parse::<f64>().ok();
    };
    let (head, tail) = (&lower[..pos], &lower[pos + 2..]);
    let head = head.strip_suffix('*').unwrap_or(head);
    let coef = match head {
        "" | "+" => 1.0,
        "-" => -1.0,
        h => h.parse::<f64>().ok()?,
    };
    let den = match tail {
        "" => 1.0,
        d => d.strip_prefix('/')?.parse::<f64>().ok()?,
    };
    if den == 0.0 {
        return None;
    }
    Some(coef * PI / den)
}

/// The shared hidden variable λ of one trial, in `[0, 2π)`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct HiddenState(f64);

impl HiddenState {
    pub fn new(lambda: f64) -> Self {
        HiddenState(reduce_angle(lambda))
    }

    pub fn lambda(self) -> f64 {
        self.0
    }
}

/// A measurement outcome.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "i8", try_from = "i64")]
pub enum Sign {
    Minus,
    Plus,
}

impl Sign {
    pub fn value(self) -> i8 {
        match self {
            Sign::Minus => -1,
            Sign::Plus => 1,
        }
    }

    pub fn as_f64(self) -> f64 {
        f64::from(self.value())
    }
}

impl std::ops::Neg for Sign {
    type Output = Sign;

    fn neg(self) -> Sign {
        match self {
            Sign::Minus => Sign::Plus,
            Sign::Plus => Sign::Minus,
        }
    }
}

impl From<Sign> for i8 {
    fn from(s: Sign) -> i8 {
        s.value()
    }
}

impl TryFrom<i64> for Sign {
    type Error = String;

    fn try_from(v: i64) -> Result<Self, Self::Error> {
        match v {
            1 => Ok(Sign::Plus),
            -1 => Ok(Sign::Minus),
            other => Err(format!("sign must be -1 or +1, got {other}")),
        }
    }
}

/// Which side of the experiment a function belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Role {
    One,
    Two,
}

impl Role {
    pub fn number(self) -> u8 {
        match self {
            Role::One => 1,
            Role::Two => 2,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

impl From<Role> for u8 {
    fn from(r: Role) -> u8 {
        r.number()
    }
}

impl TryFrom<u8> for Role {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            1 => Ok(Role::One),
            2 => Ok(Role::Two),
            other => Err(format!("role must be 1 or 2, got {other}")),
        }
    }
}

/// Sign function with `sgn(0) = +1`.
#[inline]
pub fn sgn(x: f64) -> Sign {
    if x >= 0.0 {
        Sign::Plus
    } else {
        Sign::Minus
    }
}

#[inline]
pub fn observable_station1(a: Angle, state: HiddenState) -> Sign {
    sgn((state.lambda() - a.radians()).cos())
}

/// Singlet condition: station 2 reports the opposite of station 1 at equal settings.
#[inline]
pub fn observable_station2(b: Angle, state: HiddenState) -> Sign {
    -observable_station1(b, state)
}

#[inline]
pub fn weight_station1(a: Angle, state: HiddenState) -> f64 {
    STATION1_PEAK_WEIGHT * (state.lambda() - a.radians()).cos().abs()
}

#[inline]
pub fn weight_station2(_b: Angle, _state: HiddenState) -> f64 {
    SQRT_TAU
}

pub fn observable(role: Role, setting: Angle, state: HiddenState) -> Sign {
    match role {
        Role::One => observable_station1(setting, state),
        Role::Two => observable_station2(setting, state),
    }
}

pub fn weight(role: Role, setting: Angle, state: HiddenState) -> f64 {
    match role {
        Role::One => weight_station1(setting, state),
        Role::Two => weight_station2(setting, state),
    }
}

/// `−cos(b − a)`.
pub fn closed_form_correlation(a: Angle, b: Angle) -> f64 {
    -(b.radians() - a.radians()).cos()
}

/// `∫₀ˣ |cos u| du` for any real `x`.
fn abs_cos_antiderivative(x: f64) -> f64 {
    let k = (x / PI).floor();
    let r = x - k * PI;
    let partial = if r <= FRAC_PI_2 { r.sin() } else { 2.0 - r.sin() };
    2.0 * k + partial
}

/// `T₁,ₐ(λ) = (√(2π)/4)∫₀^λ |cos(u − a)| du`, in closed form.
///
/// Maps `[0, 2π]` onto `[0, √(2π)]`; nondecreasing, with kinks where
/// `cos(λ − a) = 0`.
pub fn transport_map_station1(a: Angle, lambda: f64) -> f64 {
    let shift = a.radians();
    STATION1_PEAK_WEIGHT * (abs_cos_antiderivative(lambda - shift) - abs_cos_antiderivative(-shift))
}

/// `T₂,♭(λ) = √(2π)·λ`.
pub fn transport_map_station2(_b: Angle, lambda: f64) -> f64 {
    SQRT_TAU * lambda
}

/// `T₁,ₐ(2π) = √(2π)`: the codomain of station 1's transport is `[0, √(2π)]`.
pub const TRANSPORT1_CODOMAIN_MAX: f64 = SQRT_TAU;

/// `T₂,♭(2π) = 2π·√(2π)`.
pub const TRANSPORT2_CODOMAIN_MAX: f64 = TAU * SQRT_TAU;

const INVERSION_TOL: f64 = 1e-12;

/// Inverts [`transport_map_station1`] by bisection.
///
/// Returns the smallest `λ ∈ [0, 2π]` with `T₁,ₐ(λ) ≥ y` to within
/// floating-point resolution; the residual is at most `1e-12`.
pub fn invert_transport_station1(a: Angle, y: f64) -> Result<f64, ModelError> {
    if !(0.0..=TRANSPORT1_CODOMAIN_MAX).contains(&y) {
        return Err(ModelError::Domain {
            value: y,
            max: TRANSPORT1_CODOMAIN_MAX,
        });
    }
    let (mut lo, mut hi) = (0.0_f64, TAU);
    if transport_map_station1(a, lo) >= y {
        return Ok(lo);
    }
    loop {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if transport_map_station1(a, mid) >= y {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    // invariant: T(lo) < y <= T(hi), and hi is now the successor of lo
    debug_assert!((transport_map_station1(a, hi) - y).abs() <= INVERSION_TOL);
    Ok(hi)
}

/// Inverse of [`transport_map_station2`].
pub fn invert_transport_station2(_b: Angle, y: f64) -> Result<f64, ModelError> {
    if !(0.0..=TRANSPORT2_CODOMAIN_MAX).contains(&y) {
        return Err(ModelError::Domain {
            value: y,
            max: TRANSPORT2_CODOMAIN_MAX,
        });
    }
    Ok((y / SQRT_TAU).min(TAU))
}

/// Observable of station 1 in the transported frame: `S̃⁽¹⁾ₐ(μ) = S⁽¹⁾ₐ(T₁,ₐ⁻¹ μ)`.
pub fn transported_observable_station1(a: Angle, mu: f64) -> Result<Sign, ModelError> {
    let lambda = invert_transport_station1(a, mu)?;
    Ok(sgn((lambda - a.radians()).cos()))
}

/// Observable of station 2 in the transported frame: `S̃⁽²⁾♭(μ) = S⁽²⁾♭(T₂,♭⁻¹ μ)`.
pub fn transported_observable_station2(b: Angle, mu: f64) -> Result<Sign, ModelError> {
    let lambda = invert_transport_station2(b, mu)?;
    Ok(-sgn((lambda - b.radians()).cos()))
}

type RealFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// A single-particle dynamics `(P f)(u) = τ(u)·f(T u)` given by a monotone
/// transport `T` and its density `τ = T′`.
#[derive(Clone)]
pub struct LocalDynamics {
    transport: RealFn,
    density: RealFn,
}

impl fmt::Debug for LocalDynamics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LocalDynamics").finish_non_exhaustive()
    }
}

impl LocalDynamics {
    pub fn new(
        transport: impl Fn(f64) -> f64 + Send + Sync + 'static,
        density: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            transport: Arc::new(transport),
            density: Arc::new(density),
        }
    }

    pub fn identity() -> Self {
        Self::new(|u| u, |_| 1.0)
    }

    /// Dynamics of station 1 at setting `a`.
    pub fn station1(a: Angle) -> Self {
        Self::new(
            move |u| transport_map_station1(a, u),
            move |u| weight_station1(a, HiddenState::new(u)),
        )
    }

    /// Dynamics of station 2 at setting `b`.
    pub fn station2(b: Angle) -> Self {
        Self::new(
            move |u| transport_map_station2(b, u),
            move |u| weight_station2(b, HiddenState::new(u)),
        )
    }

    pub fn transport(&self, u: f64) -> f64 {
        (self.transport)(u)
    }

    pub fn density(&self, u: f64) -> f64 {
        (self.density)(u)
    }

    /// `(P f)(u) = τ(u)·f(T u)`.
    pub fn apply<F>(&self, f: F) -> impl Fn(f64) -> f64
    where
        F: Fn(f64) -> f64,
    {
        let d = self.clone();
        move |u| d.density(u) * f(d.transport(u))
    }
}

/// Joint reduced dynamics of two independently evolving particles:
/// `(u, v) ↦ τ₁(u)·F(T₁u, T₂v)·τ₂(v)`.
pub fn local_dynamics_apply<F>(
    d1: &LocalDynamics,
    d2: &LocalDynamics,
    observable: F,
) -> impl Fn(f64, f64) -> f64
where
    F: Fn(f64, f64) -> f64,
{
    let (d1, d2) = (d1.clone(), d2.clone());
    move |u, v| d1.density(u) * observable(d1.transport(u), d2.transport(v)) * d2.density(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_3, FRAC_PI_4, SQRT_2};

    fn st(x: f64) -> HiddenState {
        HiddenState::new(x)
    }

    fn ang(x: f64) -> Angle {
        Angle::new(x)
    }

    #[test]
    fn sqrt_tau_constant() {
        assert!((SQRT_TAU - TAU.sqrt()).abs() <= 1e-15);
    }

    #[test]
    fn sign_function() {
        assert_eq!(sgn(0.5), Sign::Plus);
        assert_eq!(sgn(-0.3), Sign::Minus);
        assert_eq!(sgn(0.0), Sign::Plus);
        assert_eq!(sgn(-0.0), Sign::Plus);
    }

    #[test]
    fn station1_observable() {
        assert_eq!(observable_station1(ang(0.0), st(0.0)), Sign::Plus);
        assert_eq!(observable_station1(ang(0.0), st(PI)), Sign::Minus);
        assert_eq!(observable_station1(ang(FRAC_PI_4), st(3.0 * FRAC_PI_4)), Sign::Plus);
    }

    #[test]
    fn station2_observable() {
        assert_eq!(observable_station2(ang(0.0), st(0.0)), Sign::Minus);
        assert_eq!(observable_station2(ang(0.0), st(PI)), Sign::Plus);
        for x in [0.0, 0.3, FRAC_PI_2, 4.0] {
            for k in 0..1000 {
                let l = st(TAU * k as f64 / 1000.0);
                assert_eq!(observable_station2(ang(x), l), -observable_station1(ang(x), l));
            }
        }
    }

    #[test]
    fn weights() {
        let a = ang(1.1);
        assert_eq!(weight_station1(a, st(1.1)), SQRT_TAU / 4.0);
        assert!(weight_station1(a, st(1.1 + FRAC_PI_2)).abs() < 1e-15);
        assert_eq!(weight_station1(ang(0.0), st(PI)), SQRT_TAU / 4.0);
        assert_eq!(weight_station2(ang(0.0), st(0.0)), SQRT_TAU);
        assert_eq!(weight_station2(ang(1.3), st(5.9)), SQRT_TAU);
        for k in 0..100 {
            let l = st(0.0628 * k as f64);
            let prod = weight_station1(ang(0.4), l) * weight_station2(ang(2.0), l);
            let want = FRAC_PI_2 * (l.lambda() - 0.4).cos().abs();
            assert!((prod - want).abs() < 1e-14);
        }
    }

    #[test]
    fn closed_form() {
        assert_eq!(closed_form_correlation(ang(0.0), ang(0.0)), -1.0);
        assert!(closed_form_correlation(ang(0.0), ang(FRAC_PI_2)).abs() < 1e-16);
        let v = closed_form_correlation(ang(FRAC_PI_4), ang(0.0));
        assert!((v + SQRT_2 / 2.0).abs() < 1e-15);
    }

    #[test]
    fn transport_values() {
        let a = ang(0.0);
        assert_eq!(transport_map_station1(a, 0.0), 0.0);
        assert!((transport_map_station1(a, FRAC_PI_2) - SQRT_TAU / 4.0).abs() < 1e-15);
        assert!((transport_map_station1(a, TAU) - SQRT_TAU).abs() < 1e-14);
        for x in [0.2, 1.0, 3.3, 6.0] {
            assert!((transport_map_station1(ang(x), TAU) - SQRT_TAU).abs() < 1e-14);
            assert_eq!(transport_map_station1(ang(x), 0.0), 0.0);
        }
    }

    // Midpoint-rule oracle for the antiderivative, independent of the closed form.
    #[test]
    fn transport_matches_brute_force_integral() {
        for a in [0.0, 0.9, 2.5, 4.4] {
            for lam in [0.5, 1.7, 3.0, 5.5, TAU] {
                let m = 200_000;
                let h = lam / m as f64;
                let sum: f64 = (0..m)
                    .map(|i| ((i as f64 + 0.5) * h - a).cos().abs())
                    .sum::<f64>()
                    * h;
                let want = SQRT_TAU / 4.0 * sum;
                let got = transport_map_station1(ang(a), lam);
                assert!((got - want).abs() < 1e-8, "a={a} lam={lam}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn inversion() {
        let a = ang(0.0);
        assert_eq!(invert_transport_station1(a, 0.0).unwrap(), 0.0);
        let l = invert_transport_station1(a, SQRT_TAU / 4.0).unwrap();
        assert!((l - FRAC_PI_2).abs() < 1e-7, "{l}");
        assert!(invert_transport_station1(a, -1e-3).is_err());
        assert!(invert_transport_station1(a, SQRT_TAU + 1e-9).is_err());
        assert!(invert_transport_station1(a, f64::NAN).is_err());
        let top = invert_transport_station1(a, SQRT_TAU).unwrap();
        assert!((transport_map_station1(a, top) - SQRT_TAU).abs() <= 1e-12);
    }

    #[test]
    fn inversion_round_trip() {
        for a in [0.0, 1.0, FRAC_PI_3, 5.0] {
            let a = ang(a);
            for k in 1..200 {
                let lam = TAU * (k as f64 + 0.37) / 200.0;
                // avoid the flat points where cos(λ − a) = 0
                if (lam - a.radians()).cos().abs() < 1e-3 {
                    continue;
                }
                let y = transport_map_station1(a, lam);
                let back = invert_transport_station1(a, y).unwrap();
                assert!((back - lam).abs() < 1e-10, "a={a} lam={lam} back={back}");
                assert!((transport_map_station1(a, back) - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn identity_dynamics_keep_constant() {
        let id = LocalDynamics::identity();
        let p = local_dynamics_apply(&id, &id, |_, _| 1.0);
        for (u, v) in [(0.0, 0.0), (1.0, 5.0), (6.2, 3.3)] {
            assert_eq!(p(u, v), 1.0);
        }
    }

    #[test]
    fn product_observable_factorizes() {
        let d1 = LocalDynamics::station1(ang(0.7));
        let d2 = LocalDynamics::station2(ang(2.1));
        let f = |x: f64| (2.0 * x).sin() + 0.3;
        let g = |y: f64| 1.0 - (y).cos();
        let joint = local_dynamics_apply(&d1, &d2, |x, y| f(x) * g(y));
        let p1 = d1.apply(f);
        let p2 = d2.apply(g);
        for i in 0..100 {
            for j in 0..100 {
                let (u, v) = (TAU * i as f64 / 100.0, TAU * j as f64 / 100.0);
                let lhs = joint(u, v);
                let rhs = p1(u) * p2(v);
                let scale = lhs.abs().max(rhs.abs());
                assert!(scale == 0.0 || (lhs - rhs).abs() / scale <= 1e-12);
            }
        }
    }

    #[test]
    fn angle_parsing() {
        assert_eq!(Angle::parse("pi").unwrap().radians(), PI);
        assert_eq!(Angle::parse("pi/4").unwrap().radians(), FRAC_PI_4);
        assert_eq!(Angle::parse("3pi/4").unwrap().radians(), 3.0 * PI / 4.0);
        assert_eq!(Angle::parse("3*pi/4").unwrap().radians(), 3.0 * PI / 4.0);
        assert_eq!(Angle::parse("2π/3").unwrap().radians(), 2.0 * PI / 3.0);
        assert_eq!(Angle::parse("-pi/2").unwrap().radians(), 3.0 * FRAC_PI_2);
        assert_eq!(Angle::parse("0.5").unwrap().radians(), 0.5);
        assert_eq!(Angle::parse(" 1.25 ").unwrap().radians(), 1.25);
        assert!(Angle::parse("pi/0").is_err());
        assert!(Angle::parse("tau").is_err());
        assert!(Angle::parse("inf").is_err());
        assert_eq!(Angle::new(-1e-300).radians(), 0.0);
        assert_eq!(Angle::new(TAU).radians(), 0.0);
    }

    #[test]
    fn angle_serde() {
        let a: Angle = serde_json::from_str("\"pi/2\"").unwrap();
        assert_eq!(a.radians(), FRAC_PI_2);
        let b: Angle = serde_json::from_str("7.0").unwrap();
        assert_eq!(b.radians(), 7.0 - TAU);
        assert_eq!(serde_json::to_string(&a).unwrap(), FRAC_PI_2.to_string());
    }
}
