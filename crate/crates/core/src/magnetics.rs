//! Macrospin model of an MTJ free layer.
//!
//! The free-layer moment `m` obeys the Landau-Lifshitz-Gilbert equation with
//! an optional spin-transfer-torque term:
//!
//! ```text
//! dm/dt = -γ m×H_eff - αγ m×(m×H_eff) + (I_s ħ G(ψ) / 2e) m×(m×e_p)
//! H_eff = H_applied + H_k (m·u) u - M_d diag(N) m + H_ex
//! ```
//!
//! The equation is implemented exactly in that explicit form. The common
//! Landau-Lifshitz rewrite carries an extra `1/(1+α²)` prefactor on the field
//! terms. It is not applied here, so precession runs at `γ|H|` and damping at
//! `αγ|H|`.
//!
//! All fields are in tesla. Integration is fixed-step RK4 with the moment
//! renormalized after every step. There is no thermal field: the unstable
//! anti-aligned equilibrium is broken by starting every exposure with a fixed
//! 1° tilt off the easy axis.

use std::f64::consts::PI;
use std::fmt;
use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Reduced Planck constant, J·s.
pub const HBAR: f64 = 1.054_571_817e-34;
/// Elementary charge, C.
pub const ELEMENTARY_CHARGE: f64 = 1.602_176_634e-19;

/// Default gyromagnetic ratio, rad·s⁻¹·T⁻¹.
pub const DEFAULT_GAMMA: f64 = 1.76e11;
pub const DEFAULT_ALPHA: f64 = 0.01;
/// Default anisotropy field, T.
pub const DEFAULT_H_K: f64 = 0.05;

/// `integrate` rejects steps coarser than one fiftieth of the fastest
/// precession period.
pub const MIN_STEPS_PER_PRECESSION: f64 = 50.0;
/// Step density used when the caller does not pick a step.
pub const DEFAULT_STEPS_PER_PRECESSION: f64 = 64.0;
/// Tilt of the initial moment away from the easy axis, degrees.
pub const INITIAL_TILT_DEG: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MagneticsError {
    #[error("step {dt:e} s is coarser than the stability limit {max_dt:e} s")]
    StepTooCoarse { dt: f64, max_dt: f64 },
    #[error("no flip at the upper bracket {upper:e} T; cell parameters are suspect")]
    NoFlipInBracket { upper: f64 },
    #[error("invalid cell parameters: {0}")]
    InvalidParams(String),
    #[error("invalid field profile: {0}")]
    InvalidProfile(String),
    #[error("invalid duration {0:e} s")]
    InvalidDuration(f64),
}

pub type Result<T> = std::result::Result<T, MagneticsError>;

/// Plain 3-vector. Serialized as `[x, y, z]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3::new(0.0, 0.0, 0.0);
    pub const X: Vec3 = Vec3::new(1.0, 0.0, 0.0);
    pub const Y: Vec3 = Vec3::new(0.0, 1.0, 0.0);
    pub const Z: Vec3 = Vec3::new(0.0, 0.0, 1.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Unit vector along `self`; the zero vector is returned unchanged.
    pub fn normalized(self) -> Vec3 {
        let n = self.norm();
        if n == 0.0 {
            self
        } else {
            Vec3::new(self.x / n, self.y / n, self.z / n)
        }
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn is_unit(self, tol: f64) -> bool {
        self.is_finite() && (self.norm() - 1.0).abs() <= tol
    }

    /// Angle between two vectors, radians.
    pub fn angle_to(self, o: Vec3) -> f64 {
        let c = self.dot(o) / (self.norm() * o.norm());
        c.clamp(-1.0, 1.0).acos()
    }

    /// Some unit vector perpendicular to `self` (assumed unit), chosen
    /// deterministically.
    pub fn any_perpendicular(self) -> Vec3 {
        let seed = if self.x.abs() < 0.9 { Vec3::X } else { Vec3::Y };
        (seed - self * seed.dot(self)).normalized()
    }
}

impl From<[f64; 3]> for Vec3 {
    fn from(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }
}

impl From<Vec3> for [f64; 3] {
    fn from(v: Vec3) -> Self {
        [v.x, v.y, v.z]
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        self.x += o.x;
        self.y += o.y;
        self.z += o.z;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Mul<Vec3> for f64 {
    type Output = Vec3;
    fn mul(self, v: Vec3) -> Vec3 {
        v * self
    }
}

impl fmt::Display for Vec3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:.6}, {:.6}, {:.6})", self.x, self.y, self.z)
    }
}

/// Unit moment of the free layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Magnetization(Vec3);

impl Magnetization {
    /// Normalizes `v`. Panics on a zero or non-finite vector.
    pub fn new(v: Vec3) -> Self {
        let n = v.norm();
        assert!(n.is_finite() && n > 0.0, "magnetization must be a finite non-zero vector");
        Magnetization(v.normalized())
    }

    pub fn vector(self) -> Vec3 {
        self.0
    }

    /// Moment encoding `bit`, tilted by [`INITIAL_TILT_DEG`] toward a fixed
    /// perpendicular of the easy axis.
    pub fn for_bit(bit: Bit, easy_axis: Vec3) -> Self {
        let axis = match bit {
            Bit::Zero => easy_axis,
            Bit::One => -easy_axis,
        };
        let tilt = INITIAL_TILT_DEG.to_radians();
        let perp = easy_axis.any_perpendicular();
        Magnetization::new(axis * tilt.cos() + perp * tilt.sin())
    }
}

/// Stored logic value of a cell. `One` is the moment anti-parallel to the
/// fixed layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Bit {
    Zero,
    One,
}

impl Bit {
    pub fn from_bool(b: bool) -> Self {
        if b {
            Bit::One
        } else {
            Bit::Zero
        }
    }

    pub fn is_one(self) -> bool {
        self == Bit::One
    }

    pub fn flipped(self) -> Self {
        match self {
            Bit::Zero => Bit::One,
            Bit::One => Bit::Zero,
        }
    }
}

/// Cell physics. `easy_axis` doubles as the fixed-layer direction unless
/// `e_p` is set otherwise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MtjParams {
    /// rad·s⁻¹·T⁻¹
    pub gamma: f64,
    pub alpha: f64,
    /// Anisotropy field, T.
    pub h_k: f64,
    pub easy_axis: Vec3,
    /// Diagonal demagnetization coefficients.
    pub h_demag: [f64; 3],
    /// Saturation field `μ0·Ms` multiplying the demag tensor, T. Zero means
    /// shape anisotropy is already folded into `h_k`.
    pub demag_scale: f64,
    pub h_exchange: Vec3,
    pub e_p: Vec3,
    /// Multiplier on the applied field seen by the cell; sensors use > 1.
    pub susceptibility_factor: f64,
}

impl Default for MtjParams {
    fn default() -> Self {
        Self {
            gamma: DEFAULT_GAMMA,
            alpha: DEFAULT_ALPHA,
            h_k: DEFAULT_H_K,
            easy_axis: Vec3::Z,
            h_demag: [0.0, 0.0, 1.0],
            demag_scale: 0.0,
            h_exchange: Vec3::ZERO,
            e_p: Vec3::Z,
            susceptibility_factor: 1.0,
        }
    }
}

impl MtjParams {
    /// Default data cell.
    pub fn data_cell() -> Self {
        Self::default()
    }

    /// Active sensor: smaller free layer plus disturb current.
    pub fn active_sensor() -> Self {
        Self {
            susceptibility_factor: 2.0,
            ..Self::default()
        }
    }

    /// Passive sensor: smaller free layer, no disturb current.
    pub fn passive_sensor() -> Self {
        Self {
            susceptibility_factor: 1.5,
            ..Self::default()
        }
    }

    pub fn with_susceptibility(mut self, factor: f64) -> Self {
        self.susceptibility_factor = factor;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(MagneticsError::InvalidParams(msg.to_string()));
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad("gamma must be positive");
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be positive");
        }
        if !(self.h_k > 0.0 && self.h_k.is_finite()) {
            return bad("h_k must be positive");
        }
        if !self.easy_axis.is_unit(1e-9) {
            return bad("easy_axis must be a unit vector");
        }
        if !self.e_p.is_unit(1e-9) {
            return bad("e_p must be a unit vector");
        }
        if self.h_demag.iter().any(|n| !(0.0..=1.0).contains(n)) {
            return bad("demag coefficients must lie in [0, 1]");
        }
        if (self.h_demag.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return bad("demag coefficients must sum to 1");
        }
        if !(self.demag_scale >= 0.0 && self.demag_scale.is_finite()) {
            return bad("demag_scale must be non-negative");
        }
        if !self.h_exchange.is_finite() {
            return bad("h_exchange must be finite");
        }
        if !(self.susceptibility_factor >= 1.0 && self.susceptibility_factor.is_finite()) {
            return bad("susceptibility_factor must be >= 1");
        }
        Ok(())
    }

    /// Precession angular frequency at a field magnitude, rad/s.
    pub fn larmor(&self, field: f64) -> f64 {
        self.gamma * field
    }
}

/// Spin current through the stack. Disabled by default: attacks act through
/// the field term only.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpinCurrent {
    /// A
    pub i_s: f64,
    /// Transmission coefficient G(ψ).
    pub g_psi: f64,
    pub enabled: bool,
}

impl Default for SpinCurrent {
    fn default() -> Self {
        Self {
            i_s: 0.0,
            g_psi: 0.5,
            enabled: false,
        }
    }
}

impl SpinCurrent {
    pub fn disabled() -> Self {
        Self::default()
    }

    pub fn enabled(i_s: f64, g_psi: f64) -> Self {
        Self {
            i_s,
            g_psi,
            enabled: true,
        }
    }

    /// `I_s ħ G(ψ) / 2e`, or zero when disabled.
    pub fn prefactor(&self) -> f64 {
        if self.enabled {
            self.i_s * HBAR * self.g_psi / (2.0 * ELEMENTARY_CHARGE)
        } else {
            0.0
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FieldKind {
    Dc,
    Ac,
    RampAc,
    None,
}

/// Time profile of an externally applied field. `AC` is `A sin(2πft)`;
/// `RAMP_AC` multiplies that by a linear envelope reaching full amplitude at
/// `ramp_time`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldProfile {
    pub kind: FieldKind,
    /// T
    #[serde(default)]
    pub amplitude: f64,
    #[serde(default = "default_direction")]
    pub direction: Vec3,
    /// Hz
    #[serde(default)]
    pub frequency: f64,
    /// s
    #[serde(default)]
    pub ramp_time: f64,
}

fn default_direction() -> Vec3 {
    Vec3::Z
}

impl FieldProfile {
    pub fn none() -> Self {
        Self {
            kind: FieldKind::None,
            amplitude: 0.0,
            direction: Vec3::Z,
            frequency: 0.0,
            ramp_time: 0.0,
        }
    }

    pub fn dc(amplitude: f64, direction: Vec3) -> Self {
        Self {
            kind: FieldKind::Dc,
            amplitude,
            direction,
            ..Self::none()
        }
    }

    pub fn ac(amplitude: f64, direction: Vec3, frequency: f64) -> Self {
        Self {
            kind: FieldKind::Ac,
            amplitude,
            direction,
            frequency,
            ramp_time: 0.0,
        }
    }

    pub fn ramp_ac(amplitude: f64, direction: Vec3, frequency: f64, ramp_time: f64) -> Self {
        Self {
            kind: FieldKind::RampAc,
            amplitude,
            direction,
            frequency,
            ramp_time,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(MagneticsError::InvalidProfile(msg.to_string()));
        if !(self.amplitude >= 0.0 && self.amplitude.is_finite()) {
            return bad("amplitude must be non-negative");
        }
        if self.kind != FieldKind::None && !self.direction.is_unit(1e-9) {
            return bad("direction must be a unit vector");
        }
        if matches!(self.kind, FieldKind::Ac | FieldKind::RampAc)
            && !(self.frequency > 0.0 && self.frequency.is_finite())
        {
            return bad("AC profiles need a positive frequency");
        }
        if !(self.ramp_time >= 0.0 && self.ramp_time.is_finite()) {
            return bad("ramp_time must be non-negative");
        }
        Ok(())
    }

    /// Largest field magnitude the profile ever reaches.
    pub fn peak_amplitude(&self) -> f64 {
        match self.kind {
            FieldKind::None => 0.0,
            _ => self.amplitude,
        }
    }

    /// Envelope amplitude at `t` (the AC carrier excluded).
    pub fn envelope_at(&self, t: f64) -> f64 {
        match self.kind {
            FieldKind::None => 0.0,
            FieldKind::Dc | FieldKind::Ac => self.amplitude,
            FieldKind::RampAc => {
                if self.ramp_time <= 0.0 || t >= self.ramp_time {
                    self.amplitude
                } else {
                    self.amplitude * (t.max(0.0) / self.ramp_time)
                }
            }
        }
    }

    pub fn field_at(&self, t: f64) -> Vec3 {
        match self.kind {
            FieldKind::None => Vec3::ZERO,
            FieldKind::Dc => self.direction * self.amplitude,
            FieldKind::Ac | FieldKind::RampAc => {
                let carrier = (2.0 * PI * self.frequency * t).sin();
                self.direction * (self.envelope_at(t) * carrier)
            }
        }
    }
}

/// Result of holding one cell in a field profile for a fixed time.
#[derive(Clone, Debug, PartialEq)]
pub struct ExposureOutcome {
    pub flipped: bool,
    /// Time the bit took its final, flipped value. Present iff `flipped`.
    pub flip_time: Option<f64>,
    /// First time the read-out value differed from the stored bit, whether or
    /// not it stayed that way.
    pub first_change_time: Option<f64>,
    pub final_m: Vec3,
}

/// Sampled trajectory: `times[i]` pairs with `points[i]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub points: Vec<Vec3>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last(&self) -> Option<(f64, Vec3)> {
        Some((*self.times.last()?, *self.points.last()?))
    }
}

pub fn effective_field(m: Magnetization, p: &MtjParams, h_applied: Vec3) -> Vec3 {
    let m = m.vector();
    let anisotropy = p.easy_axis * (p.h_k * m.dot(p.easy_axis));
    let demag = Vec3::new(
        p.h_demag[0] * m.x,
        p.h_demag[1] * m.y,
        p.h_demag[2] * m.z,
    ) * p.demag_scale;
    h_applied + anisotropy - demag + p.h_exchange
}

pub fn llg_rhs(m: Magnetization, h_eff: Vec3, j: &SpinCurrent, p: &MtjParams) -> Vec3 {
    let m = m.vector();
    let m_x_h = m.cross(h_eff);
    let field_term = m_x_h * (-p.gamma) - m.cross(m_x_h) * (p.alpha * p.gamma);
    if j.enabled {
        field_term + m.cross(m.cross(p.e_p)) * j.prefactor()
    } else {
        field_term
    }
}

/// Upper bound on `|H_eff|` over an exposure.
pub fn max_field(p: &MtjParams, profile: &FieldProfile) -> f64 {
    let demag = p.demag_scale * p.h_demag.iter().cloned().fold(0.0, f64::max);
    p.susceptibility_factor * profile.peak_amplitude() + p.h_k + demag + p.h_exchange.norm()
}

/// Coarsest step `integrate` accepts for this cell and profile.
pub fn max_stable_step(p: &MtjParams, profile: &FieldProfile) -> f64 {
    let f_precession = p.larmor(max_field(p, profile)) / (2.0 * PI);
    1.0 / (MIN_STEPS_PER_PRECESSION * f_precession)
}

/// Step used by [`simulate_exposure`].
pub fn default_step(p: &MtjParams, profile: &FieldProfile) -> f64 {
    let f_precession = p.larmor(max_field(p, profile)) / (2.0 * PI);
    1.0 / (DEFAULT_STEPS_PER_PRECESSION * f_precession)
}

struct Stepper<'a> {
    p: &'a MtjParams,
    j: &'a SpinCurrent,
}

impl Stepper<'_> {
    fn rate(&self, m: Vec3, applied: Vec3) -> Vec3 {
        // Intermediate RK stages are not renormalized; Magnetization::new
        // would, so bypass it.
        let m = Magnetization(m);
        llg_rhs(m, effective_field(m, self.p, applied), self.j, self.p)
    }

    /// One RK4 step given the applied field at the start, midpoint and end.
    fn step(&self, m: Vec3, h: f64, start: Vec3, mid: Vec3, end: Vec3) -> Vec3 {
        let k1 = self.rate(m, start);
        let k2 = self.rate(m + k1 * (0.5 * h), mid);
        let k3 = self.rate(m + k2 * (0.5 * h), mid);
        let k4 = self.rate(m + k3 * h, end);
        (m + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)).normalized()
    }
}

fn check_inputs(p: &MtjParams, profile: &FieldProfile, duration: f64, dt: f64) -> Result<()> {
    p.validate()?;
    profile.validate()?;
    if !(duration >= 0.0 && duration.is_finite()) {
        return Err(MagneticsError::InvalidDuration(duration));
    }
    let max_dt = max_stable_step(p, profile);
    if !(dt > 0.0 && dt.is_finite()) || dt > max_dt {
        return Err(MagneticsError::StepTooCoarse { dt, max_dt });
    }
    Ok(())
}

/// Streams RK4 steps to `visit(t, m)`, starting with `(0, m0)`. The last step
/// is shortened so the final sample lands exactly on `duration`.
pub fn integrate_with<F>(
    m0: Magnetization,
    profile: &FieldProfile,
    j: &SpinCurrent,
    p: &MtjParams,
    duration: f64,
    dt: f64,
    mut visit: F,
) -> Result<Vec3>
where
    F: FnMut(f64, Vec3),
{
    check_inputs(p, profile, duration, dt)?;
    let stepper = Stepper { p, j };
    let applied = |t: f64| profile.field_at(t) * p.susceptibility_factor;
    let mut m = m0.vector();
    visit(0.0, m);
    let full_steps = (duration / dt).floor() as u64;
    let mut t = 0.0;
    let mut h_start = applied(0.0);
    for k in 1..=full_steps {
        let t_next = k as f64 * dt;
        let h_end = applied(t_next);
        m = stepper.step(m, t_next - t, h_start, applied(0.5 * (t + t_next)), h_end);
        t = t_next;
        h_start = h_end;
        visit(t, m);
    }
    let rest = duration - t;
    if rest > dt * 1e-9 {
        m = stepper.step(m, rest, h_start, applied(t + 0.5 * rest), applied(duration));
        visit(duration, m);
    }
    Ok(m)
}

pub fn integrate(
    m0: Magnetization,
    profile: &FieldProfile,
    j: &SpinCurrent,
    p: &MtjParams,
    duration: f64,
    dt: f64,
) -> Result<Trajectory> {
    let mut traj = Trajectory::default();
    integrate_with(m0, profile, j, p, duration, dt, |t, m| {
        traj.times.push(t);
        traj.points.push(m);
    })?;
    Ok(traj)
}

/// Ties (m ⟂ easy axis) read as `Zero`.
pub fn resolve_bit(m: Vec3, easy_axis: Vec3) -> Bit {
    if m.dot(easy_axis) < 0.0 {
        Bit::One
    } else {
        Bit::Zero
    }
}

pub fn simulate_exposure(
    initial_bit: Bit,
    p: &MtjParams,
    profile: &FieldProfile,
    duration: f64,
) -> Result<ExposureOutcome> {
    let dt = default_step(p, profile).min(if duration > 0.0 { duration } else { f64::INFINITY });
    simulate_exposure_with_step(initial_bit, p, profile, duration, dt)
}

pub fn simulate_exposure_with_step(
    initial_bit: Bit,
    p: &MtjParams,
    profile: &FieldProfile,
    duration: f64,
    dt: f64,
) -> Result<ExposureOutcome> {
    let m0 = Magnetization::for_bit(initial_bit, p.easy_axis);
    let mut current = initial_bit;
    let mut first_change = None;
    let mut settled_at = 0.0;
    let final_m = integrate_with(m0, profile, &SpinCurrent::disabled(), p, duration, dt, |t, m| {
        let bit = resolve_bit(m, p.easy_axis);
        if bit != current {
            current = bit;
            settled_at = t;
            if first_change.is_none() {
                first_change = Some(t);
            }
        }
    })?;
    let flipped = current != initial_bit;
    Ok(ExposureOutcome {
        flipped,
        flip_time: flipped.then_some(settled_at),
        first_change_time: first_change,
        final_m,
    })
}

/// Smallest DC amplitude along `direction` that flips the bit whose moment
/// opposes it, found by bisection to `1e-3·h_k`. A direction with
/// non-negative easy-axis component targets `One`.
pub fn switching_threshold(p: &MtjParams, direction: Vec3, duration: f64) -> Result<f64> {
    if !(duration > 0.0 && duration.is_finite()) {
        return Err(MagneticsError::InvalidDuration(duration));
    }
    let target = if direction.dot(p.easy_axis) >= 0.0 {
        Bit::One
    } else {
        Bit::Zero
    };
    let flips = |amplitude: f64| -> Result<bool> {
        Ok(simulate_exposure(target, p, &FieldProfile::dc(amplitude, direction), duration)?.flipped)
    };
    let mut lo = 0.0;
    let mut hi = 10.0 * p.h_k;
    if !flips(hi)? {
        return Err(MagneticsError::NoFlipInBracket { upper: hi });
    }
    let tol = 1e-3 * p.h_k;
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if flips(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}
