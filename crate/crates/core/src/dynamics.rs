//! Linear feed drive with one flexible mode.
//!
//! The carriage follows the commanded velocity through a first-order
//! velocity loop. Its acceleration base-excites a damped oscillator that
//! stands for the structural deflection:
//!
//! ```text
//! v' = (clamp(u, ±v_max) - v) / tau_v
//! x' = v
//! y'' = -2 xi omega_n y' - omega_n^2 y - coupling_k v'
//! ```
//!
//! Integration is classical RK4 with `dt_physics` substeps inside one
//! `dt_control` decision period.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AxisParams {
    /// Natural angular frequency of the flexible mode (rad/s).
    pub omega_n: f64,
    /// Damping ratio of the flexible mode.
    pub xi: f64,
    /// Deflection excitation per unit carriage acceleration.
    pub coupling_k: f64,
    /// Velocity-loop time constant (s).
    pub tau_v: f64,
    /// Velocity limit (mm/s).
    pub v_max: f64,
    /// Lower end stop (mm).
    pub x_min: f64,
    /// Upper end stop (mm).
    pub x_max: f64,
    /// Integration substep (s).
    pub dt_physics: f64,
    /// Decision period (s). Integer multiple of `dt_physics`.
    pub dt_control: f64,
}

impl Default for AxisParams {
    fn default() -> Self {
        Self {
            omega_n: 2.0 * PI * 10.0,
            xi: 0.02,
            coupling_k: 0.002,
            tau_v: 0.01,
            v_max: 400.0,
            x_min: 0.0,
            x_max: 500.0,
            dt_physics: 0.00025,
            dt_control: 0.01,
        }
    }
}

impl AxisParams {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.omega_n,
            self.xi,
            self.coupling_k,
            self.tau_v,
            self.v_max,
            self.x_min,
            self.x_max,
            self.dt_physics,
            self.dt_control,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParams("axis parameters must be finite".into()));
        }
        if self.omega_n <= 0.0 {
            return Err(Error::InvalidParams(format!("omega_n must be > 0, got {}", self.omega_n)));
        }
        if !(0.0..1.0).contains(&self.xi) {
            return Err(Error::InvalidParams(format!("xi must be in [0, 1), got {}", self.xi)));
        }
        if self.tau_v <= 0.0 {
            return Err(Error::InvalidParams(format!("tau_v must be > 0, got {}", self.tau_v)));
        }
        if self.v_max <= 0.0 {
            return Err(Error::InvalidParams(format!("v_max must be > 0, got {}", self.v_max)));
        }
        if self.x_max <= self.x_min {
            return Err(Error::InvalidParams(format!(
                "travel [{}, {}] is empty",
                self.x_min, self.x_max
            )));
        }
        if self.dt_physics <= 0.0 || self.dt_physics > self.dt_control {
            return Err(Error::InvalidParams(format!(
                "need 0 < dt_physics <= dt_control, got {} and {}",
                self.dt_physics, self.dt_control
            )));
        }
        let ratio = self.dt_control / self.dt_physics;
        if (ratio - ratio.round()).abs() > 1e-9 * ratio {
            return Err(Error::InvalidParams(format!(
                "dt_control ({}) is not an integer multiple of dt_physics ({})",
                self.dt_control, self.dt_physics
            )));
        }
        Ok(())
    }

    /// Number of integration substeps per decision period.
    pub fn substeps(&self) -> usize {
        (self.dt_control / self.dt_physics).round() as usize
    }

    pub fn damped_omega(&self) -> f64 {
        self.omega_n * (1.0 - self.xi * self.xi).sqrt()
    }

    pub fn damped_period(&self) -> f64 {
        2.0 * PI / self.damped_omega()
    }

    pub fn travel_span(&self) -> f64 {
        self.x_max - self.x_min
    }

    /// Same axis with decisions taken every integration substep.
    pub fn with_control_at_physics_rate(&self) -> Self {
        Self {
            dt_control: self.dt_physics,
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SystemState {
    /// Carriage position (mm).
    pub x: f64,
    /// Carriage velocity (mm/s).
    pub v: f64,
    /// Flexible deflection (mm).
    pub y: f64,
    /// Deflection rate (mm/s).
    pub y_dot: f64,
    /// Simulation time (s).
    pub t: f64,
}

impl SystemState {
    pub fn at_rest(x: f64) -> Self {
        Self {
            x,
            ..Self::default()
        }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite()
            && self.v.is_finite()
            && self.y.is_finite()
            && self.y_dot.is_finite()
            && self.t.is_finite()
    }

    /// Modal energy per unit mass, `0.5 (y'^2 + omega_n^2 y^2)`.
    pub fn modal_energy(&self, params: &AxisParams) -> f64 {
        0.5 * (self.y_dot * self.y_dot + params.omega_n * params.omega_n * self.y * self.y)
    }
}

#[derive(Clone, Copy)]
struct Deriv {
    x: f64,
    v: f64,
    y: f64,
    y_dot: f64,
}

#[inline]
fn derivative(v: f64, y: f64, y_dot: f64, u: f64, p: &AxisParams) -> Deriv {
    let accel = (u - v) / p.tau_v;
    Deriv {
        x: v,
        v: accel,
        y: y_dot,
        y_dot: -2.0 * p.xi * p.omega_n * y_dot - p.omega_n * p.omega_n * y - p.coupling_k * accel,
    }
}

#[inline]
fn rk4_substep(s: &mut SystemState, u: f64, p: &AxisParams) {
    let h = p.dt_physics;
    let k1 = derivative(s.v, s.y, s.y_dot, u, p);
    let k2 = derivative(
        s.v + 0.5 * h * k1.v,
        s.y + 0.5 * h * k1.y,
        s.y_dot + 0.5 * h * k1.y_dot,
        u,
        p,
    );
    let k3 = derivative(
        s.v + 0.5 * h * k2.v,
        s.y + 0.5 * h * k2.y,
        s.y_dot + 0.5 * h * k2.y_dot,
        u,
        p,
    );
    let k4 = derivative(s.v + h * k3.v, s.y + h * k3.y, s.y_dot + h * k3.y_dot, u, p);
    s.x += h / 6.0 * (k1.x + 2.0 * k2.x + 2.0 * k3.x + k4.x);
    s.v += h / 6.0 * (k1.v + 2.0 * k2.v + 2.0 * k3.v + k4.v);
    s.y += h / 6.0 * (k1.y + 2.0 * k2.y + 2.0 * k3.y + k4.y);
    s.y_dot += h / 6.0 * (k1.y_dot + 2.0 * k2.y_dot + 2.0 * k3.y_dot + k4.y_dot);

    // hard end stops
    if s.x < p.x_min {
        s.x = p.x_min;
        s.v = 0.0;
    } else if s.x > p.x_max {
        s.x = p.x_max;
        s.v = 0.0;
    }
}

fn check_inputs(state: &SystemState, u: f64) -> Result<()> {
    if !state.is_finite() {
        return Err(Error::Model(format!("non-finite state {state:?}")));
    }
    if !u.is_finite() {
        return Err(Error::Model(format!("non-finite velocity command {u}")));
    }
    Ok(())
}

/// Advance the axis by one decision period under velocity command `u` (mm/s).
pub fn step(state: &SystemState, u: f64, params: &AxisParams) -> Result<SystemState> {
    check_inputs(state, u)?;
    let u = u.clamp(-params.v_max, params.v_max);
    let mut s = *state;
    for _ in 0..params.substeps() {
        rk4_substep(&mut s, u, params);
    }
    s.t = state.t + params.dt_control;
    Ok(s)
}

/// Like [`step`], but appends the state after every integration substep to `trace`.
pub fn step_traced(
    state: &SystemState,
    u: f64,
    params: &AxisParams,
    trace: &mut Vec<SystemState>,
) -> Result<SystemState> {
    check_inputs(state, u)?;
    let u = u.clamp(-params.v_max, params.v_max);
    let mut s = *state;
    let n = params.substeps();
    for i in 0..n {
        rk4_substep(&mut s, u, params);
        s.t = state.t + (i + 1) as f64 * params.dt_physics;
        trace.push(s);
    }
    s.t = state.t + params.dt_control;
    if let Some(last) = trace.last_mut() {
        last.t = s.t;
    }
    Ok(s)
}

/// Samples needed for a window of spacing `dt` to cover one damped period.
pub fn window_len(params: &AxisParams, dt: f64) -> usize {
    (params.damped_period() / dt - 1e-9).ceil().max(1.0) as usize
}

/// Vibration amplitude estimate: peak |y| over a window sampled every `dt_control`.
pub fn envelope(history: &[f64], params: &AxisParams) -> Result<f64> {
    envelope_sampled(history, params.dt_control, params)
}

/// Peak |y| over a window sampled every `dt`. The window must span at least
/// one damped period of the mode.
pub fn envelope_sampled(history: &[f64], dt: f64, params: &AxisParams) -> Result<f64> {
    let needed = window_len(params, dt);
    if history.len() < needed {
        return Err(Error::InsufficientHistory {
            needed,
            got: history.len(),
        });
    }
    Ok(history.iter().fold(0.0_f64, |m, y| m.max(y.abs())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn free(y0: f64, params: &AxisParams, seconds: f64) -> (f64, Vec<(f64, f64)>) {
        let mut s = SystemState {
            y: y0,
            ..SystemState::default()
        };
        let steps = (seconds / params.dt_control).round() as usize;
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            s = step(&s, 0.0, params).unwrap();
            out.push((s.t, s.y));
        }
        (s.t, out)
    }

    #[test]
    fn equilibrium_is_fixed() {
        let p = AxisParams::default();
        let s0 = SystemState::at_rest(123.0);
        let s1 = step(&s0, 0.0, &p).unwrap();
        assert_eq!(s1.x, 123.0);
        assert_eq!(s1.v, 0.0);
        assert_eq!(s1.y, 0.0);
        assert_eq!(s1.y_dot, 0.0);
        assert!((s1.t - p.dt_control).abs() < 1e-15);
    }

    #[test]
    fn undamped_free_response_matches_cosine() {
        let p = AxisParams {
            xi: 0.0,
            ..AxisParams::default()
        };
        let (_, ys) = free(0.5, &p, 2.0);
        let worst = ys
            .iter()
            .map(|(t, y)| (y - 0.5 * (p.omega_n * t).cos()).abs() / 0.5)
            .fold(0.0, f64::max);
        assert!(worst < 1e-6, "relative error {worst}");
    }

    #[test]
    fn rejects_non_finite() {
        let p = AxisParams::default();
        let s = SystemState::default();
        assert!(matches!(step(&s, f64::NAN, &p), Err(Error::Model(_))));
        let bad = SystemState {
            y: f64::INFINITY,
            ..s
        };
        assert!(matches!(step(&bad, 0.0, &p), Err(Error::Model(_))));
    }

    #[test]
    fn params_validation() {
        let ok = AxisParams::default();
        ok.validate().unwrap();
        assert!(AxisParams { xi: 1.0, ..ok }.validate().is_err());
        assert!(AxisParams { omega_n: 0.0, ..ok }.validate().is_err());
        assert!(AxisParams { tau_v: 0.0, ..ok }.validate().is_err());
        assert!(AxisParams { dt_physics: 0.003, ..ok }.validate().is_err());
        assert!(AxisParams { dt_physics: 0.02, ..ok }.validate().is_err());
        assert!(AxisParams { v_max: -1.0, ..ok }.validate().is_err());
    }

    #[test]
    fn hard_stop_zeroes_velocity() {
        let p = AxisParams::default();
        let mut s = SystemState::at_rest(1.0);
        for _ in 0..10 {
            s = step(&s, -400.0, &p).unwrap();
        }
        assert_eq!(s.x, p.x_min);
        assert_eq!(s.v, 0.0);
    }

    #[test]
    fn traced_step_agrees_with_step() {
        let p = AxisParams::default();
        let s0 = SystemState::at_rest(10.0);
        let mut trace = Vec::new();
        let a = step(&s0, 250.0, &p).unwrap();
        let b = step_traced(&s0, 250.0, &p, &mut trace).unwrap();
        assert_eq!(trace.len(), p.substeps());
        assert_eq!(a, b);
    }

    #[test]
    fn envelope_cases() {
        let p = AxisParams::default();
        let n = window_len(&p, p.dt_control);
        assert_eq!(envelope(&vec![0.0; n], &p).unwrap(), 0.0);
        assert_eq!(envelope(&vec![-0.3; n], &p).unwrap(), 0.3);
        assert!(matches!(
            envelope(&vec![0.0; n - 1], &p),
            Err(Error::InsufficientHistory { .. })
        ));

        let dt = 1e-4;
        let undamped = AxisParams { xi: 0.0, ..p };
        let samples: Vec<f64> = (0..window_len(&undamped, dt))
            .map(|i| 2.0 * (undamped.omega_n * i as f64 * dt).sin())
            .collect();
        let e = envelope_sampled(&samples, dt, &undamped).unwrap();
        // one sample of phase error at most
        let tol = 2.0 * (1.0 - (undamped.omega_n * dt).cos());
        assert!((e - 2.0).abs() <= tol, "{e}");
    }
}
