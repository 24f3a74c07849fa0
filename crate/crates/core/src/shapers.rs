//! Input shapers for a single lightly damped mode.
//!
//! A shaper is a unity-gain train of impulses; convolving a command with it
//! cancels the vibration the command would otherwise leave behind. ZV zeroes
//! the residual vibration at the design point, ZVD also zeroes its slope with
//! respect to frequency, which widens the insensitive band.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Impulse {
    /// Delay from the start of the command (s).
    pub time: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpulseSequence {
    pub impulses: Vec<Impulse>,
    pub design_omega: f64,
    pub design_xi: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShaperKind {
    None,
    Zv,
    Zvd,
}

impl ShaperKind {
    pub fn build(self, omega: f64, xi: f64) -> Result<ImpulseSequence> {
        match self {
            ShaperKind::None => Ok(ImpulseSequence::identity(omega, xi)),
            ShaperKind::Zv => make_zv(omega, xi),
            ShaperKind::Zvd => make_zvd(omega, xi),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ShaperKind::None => "none",
            ShaperKind::Zv => "zv",
            ShaperKind::Zvd => "zvd",
        }
    }
}

impl std::str::FromStr for ShaperKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" | "unshaped" => Ok(ShaperKind::None),
            "zv" | "posicast" => Ok(ShaperKind::Zv),
            "zvd" => Ok(ShaperKind::Zvd),
            other => Err(Error::Shaper(format!("unknown shaper '{other}' (none | zv | zvd)"))),
        }
    }
}

impl ImpulseSequence {
    /// Single unit impulse at t = 0; passes commands through unchanged.
    pub fn identity(design_omega: f64, design_xi: f64) -> Self {
        Self {
            impulses: vec![Impulse {
                time: 0.0,
                amplitude: 1.0,
            }],
            design_omega,
            design_xi,
        }
    }

    /// Time of the last impulse, i.e. how much the shaper lengthens a command.
    pub fn duration(&self) -> f64 {
        self.impulses.last().map_or(0.0, |i| i.time)
    }

    pub fn amplitude_sum(&self) -> f64 {
        self.impulses.iter().map(|i| i.amplitude).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.impulses.first() else {
            return Err(Error::Shaper("empty impulse sequence".into()));
        };
        if first.time != 0.0 {
            return Err(Error::Shaper(format!("first impulse at {} s, expected 0", first.time)));
        }
        if self
            .impulses
            .iter()
            .any(|i| !i.time.is_finite() || !i.amplitude.is_finite())
        {
            return Err(Error::Shaper("non-finite impulse".into()));
        }
        if self.impulses.windows(2).any(|w| w[1].time <= w[0].time) {
            return Err(Error::Shaper("impulse times must be strictly increasing".into()));
        }
        Ok(())
    }
}

fn check_mode(omega: f64, xi: f64) -> Result<()> {
    if !(omega.is_finite() && omega > 0.0) {
        return Err(Error::Shaper(format!("omega must be > 0, got {omega}")));
    }
    if !(0.0..1.0).contains(&xi) {
        return Err(Error::Shaper(format!(
            "xi must be in [0, 1) for an oscillatory mode, got {xi}"
        )));
    }
    Ok(())
}

fn damping_factor(xi: f64) -> f64 {
    (-xi * PI / (1.0 - xi * xi).sqrt()).exp()
}

/// Two-impulse zero-vibration shaper.
pub fn make_zv(omega: f64, xi: f64) -> Result<ImpulseSequence> {
    check_mode(omega, xi)?;
    let k = damping_factor(xi);
    let half_period = PI / (omega * (1.0 - xi * xi).sqrt());
    let norm = 1.0 + k;
    Ok(ImpulseSequence {
        impulses: vec![
            Impulse {
                time: 0.0,
                amplitude: 1.0 / norm,
            },
            Impulse {
                time: half_period,
                amplitude: k / norm,
            },
        ],
        design_omega: omega,
        design_xi: xi,
    })
}

/// Posicast: the command split into an immediate and a half-period delayed
/// part. In discrete form this is the ZV shaper.
pub fn make_posicast(omega: f64, xi: f64) -> Result<ImpulseSequence> {
    make_zv(omega, xi)
}

/// Three-impulse zero-vibration-and-derivative shaper.
pub fn make_zvd(omega: f64, xi: f64) -> Result<ImpulseSequence> {
    check_mode(omega, xi)?;
    let k = damping_factor(xi);
    let half_period = PI / (omega * (1.0 - xi * xi).sqrt());
    let norm = (1.0 + k) * (1.0 + k);
    Ok(ImpulseSequence {
        impulses: vec![
            Impulse {
                time: 0.0,
                amplitude: 1.0 / norm,
            },
            Impulse {
                time: half_period,
                amplitude: 2.0 * k / norm,
            },
            Impulse {
                time: 2.0 * half_period,
                amplitude: k * k / norm,
            },
        ],
        design_omega: omega,
        design_xi: xi,
    })
}

/// Residual vibration of a mode (omega, xi) after the impulse train, as a
/// fraction of the vibration a single unit impulse leaves.
pub fn residual_vibration(seq: &ImpulseSequence, omega: f64, xi: f64) -> Result<f64> {
    seq.validate()?;
    check_mode(omega, xi)?;
    let wd = omega * (1.0 - xi * xi).sqrt();
    let t_n = seq.duration();
    // exponentials are taken relative to t_n so long trains do not overflow
    let (c, s) = seq.impulses.iter().fold((0.0, 0.0), |(c, s), imp| {
        let w = imp.amplitude * (xi * omega * (imp.time - t_n)).exp();
        (c + w * (wd * imp.time).cos(), s + w * (wd * imp.time).sin())
    });
    Ok(c.hypot(s))
}

/// Convolve a sampled command with the impulse train. Impulse times are
/// rounded to the nearest sample; amplitudes are not redistributed.
/// The output is longer than the input by the rounded shaper duration.
pub fn shape_command(seq: &ImpulseSequence, command: &[f64], dt: f64) -> Result<Vec<f64>> {
    seq.validate()?;
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::Shaper(format!("dt must be > 0, got {dt}")));
    }
    let taps: Vec<(usize, f64)> = seq
        .impulses
        .iter()
        .map(|i| ((i.time / dt).round() as usize, i.amplitude))
        .collect();
    let extra = taps.last().map_or(0, |t| t.0);
    let mut out = vec![0.0; command.len() + extra];
    for &(delay, amp) in &taps {
        for (k, c) in command.iter().enumerate() {
            out[k + delay] += amp * c;
        }
    }
    Ok(out)
}

/// Residual vibration across a grid of plant frequencies, at the sequence's design damping.
pub fn sensitivity_curve(seq: &ImpulseSequence, omega_grid: &[f64]) -> Result<Vec<(f64, f64)>> {
    if omega_grid.is_empty() {
        return Err(Error::Shaper("empty frequency grid".into()));
    }
    omega_grid
        .iter()
        .map(|&w| residual_vibration(seq, w, seq.design_xi).map(|v| (w, v)))
        .collect()
}

/// Write a sensitivity curve as CSV with columns `omega_rad_s,V`.
pub fn write_sensitivity_csv<W: std::io::Write>(mut w: W, curve: &[(f64, f64)]) -> std::io::Result<()> {
    writeln!(w, "omega_rad_s,V")?;
    for (omega, v) in curve {
        writeln!(w, "{omega},{v}")?;
    }
    Ok(())
}
