//! Kac's particle system: binary energy-preserving collisions at total rate N/2.

use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, KacError, Result};
use crate::event_stream::{draw_event, CollisionEvent};

/// Incremental energy updates are resynchronised with a full sum this often.
pub const ENERGY_RESYNC_EVENTS: u64 = 1_000_000;

/// Rotation rule: `(v cosθ − v* sinθ, v* cosθ + v sinθ)`.
#[inline]
pub fn collide_rotation(v: f64, v_star: f64, theta: f64) -> (f64, f64) {
    let (s, c) = theta.sin_cos();
    (v * c - v_star * s, v_star * c + v * s)
}

/// Polar rule: `√(v² + v*²) (cosθ, sinθ)`.
///
/// Same law as [`collide_rotation`] once θ is uniform. A pair at rest stays at rest.
#[inline]
pub fn collide_polar(v: f64, v_star: f64, theta: f64) -> (f64, f64) {
    let r = v.hypot(v_star);
    let (s, c) = theta.sin_cos();
    (r * c, r * s)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Parametrization {
    Rotation,
    #[default]
    Polar,
}

impl FromStr for Parametrization {
    type Err = KacError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rotation" => Ok(Self::Rotation),
            "polar" => Ok(Self::Polar),
            other => Err(KacError::Parse(format!(
                "unknown parametrization `{other}` (expected rotation|polar)"
            ))),
        }
    }
}

impl std::fmt::Display for Parametrization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Rotation => "rotation",
            Self::Polar => "polar",
        })
    }
}

/// Velocities of the N particles plus cached mean energy `(1/N) Σ v²`.
#[derive(Clone, Debug, PartialEq)]
pub struct SystemState {
    velocities: Vec<f64>,
    time: f64,
    energy: f64,
    since_resync: u64,
}

impl SystemState {
    pub fn new(velocities: Vec<f64>) -> Result<Self> {
        Self::at_time(velocities, 0.0)
    }

    pub fn at_time(velocities: Vec<f64>, time: f64) -> Result<Self> {
        if velocities.is_empty() {
            return invalid("a system needs at least one particle");
        }
        if velocities.iter().any(|v| !v.is_finite()) {
            return invalid("velocities must be finite");
        }
        if !(time >= 0.0) {
            return invalid(format!("time must be nonnegative, got {time}"));
        }
        let energy = mean_energy(&velocities);
        Ok(Self {
            velocities,
            time,
            energy,
            since_resync: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.velocities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.velocities.is_empty()
    }

    pub fn velocities(&self) -> &[f64] {
        &self.velocities
    }

    pub fn into_velocities(self) -> Vec<f64> {
        self.velocities
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    /// Cached mean energy.
    pub fn energy(&self) -> f64 {
        self.energy
    }

    /// Mean energy summed from scratch.
    pub fn recomputed_energy(&self) -> f64 {
        mean_energy(&self.velocities)
    }

    /// Applies one collision at the current time (no clock change).
    #[inline]
    pub fn apply(&mut self, event: &CollisionEvent, parametrization: Parametrization) {
        let (i, j) = (event.i, event.j);
        let (a, b) = (self.velocities[i], self.velocities[j]);
        let (na, nb) = match parametrization {
            Parametrization::Rotation => collide_rotation(a, b, event.theta),
            Parametrization::Polar => collide_polar(a, b, event.theta),
        };
        self.velocities[i] = na;
        self.velocities[j] = nb;
        self.energy += (na * na + nb * nb - a * a - b * b) / self.velocities.len() as f64;
        self.since_resync += 1;
        if self.since_resync >= ENERGY_RESYNC_EVENTS {
            self.resync_energy();
        }
    }

    pub fn resync_energy(&mut self) {
        self.energy = mean_energy(&self.velocities);
        self.since_resync = 0;
    }

    pub(crate) fn set_time(&mut self, t: f64) {
        self.time = t;
    }

    /// Overwrites particles `i` and `j`, keeping the cached energy in step.
    pub(crate) fn set_pair(&mut self, i: usize, j: usize, vi: f64, vj: f64) {
        let (a, b) = (self.velocities[i], self.velocities[j]);
        self.velocities[i] = vi;
        self.velocities[j] = vj;
        self.energy += (vi * vi + vj * vj - a * a - b * b) / self.velocities.len() as f64;
        self.since_resync += 1;
        if self.since_resync >= ENERGY_RESYNC_EVENTS {
            self.resync_energy();
        }
    }

    /// Runs the dynamics up to `horizon`, returning the number of collisions.
    ///
    /// The first event past the horizon is discarded; restarting the clock at
    /// `horizon` is exact by memorylessness.
    pub fn advance<R: Rng + ?Sized>(
        &mut self,
        horizon: f64,
        parametrization: Parametrization,
        rng: &mut R,
    ) -> Result<u64> {
        self.advance_with(horizon, parametrization, rng, |_, _| {})
    }

    /// [`advance`](Self::advance) with a hook called after every applied event.
    pub fn advance_with<R, F>(
        &mut self,
        horizon: f64,
        parametrization: Parametrization,
        rng: &mut R,
        mut on_event: F,
    ) -> Result<u64>
    where
        R: Rng + ?Sized,
        F: FnMut(f64, &CollisionEvent),
    {
        if !(horizon >= self.time) {
            return invalid(format!(
                "horizon {horizon} precedes the current time {}",
                self.time
            ));
        }
        if self.velocities.len() < 2 {
            return invalid("dynamics need at least 2 particles");
        }
        let n = self.velocities.len();
        let mut t = self.time;
        let mut count = 0;
        loop {
            let e = draw_event(n, rng);
            t += e.dt;
            if t > horizon {
                break;
            }
            self.apply(&e, parametrization);
            count += 1;
            on_event(t, &e);
        }
        self.time = horizon;
        Ok(count)
    }
}

pub fn mean_energy(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64
}

/// Uniform sample on the Kac sphere `{x : (1/n) Σ x² = mean_energy}`.
///
/// Normalised Gaussian vector; rotation invariance of the standard Gaussian
/// makes the direction uniform.
pub fn sample_kac_sphere<R: Rng + ?Sized>(
    n: usize,
    mean_energy: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if n == 0 {
        return invalid("the Kac sphere needs n >= 1");
    }
    if !(mean_energy > 0.0) || !mean_energy.is_finite() {
        return invalid(format!("mean energy must be positive, got {mean_energy}"));
    }
    let mut x: Vec<f64> = Vec::with_capacity(n);
    loop {
        x.clear();
        x.extend((0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let norm2: f64 = x.iter().map(|v| v * v).sum();
        if norm2 > 0.0 {
            let scale = (n as f64 * mean_energy / norm2).sqrt();
            x.iter_mut().for_each(|v| *v *= scale);
            return Ok(x);
        }
    }
}

/// Writes one velocity per line in shortest round-trip decimal form.
pub fn write_snapshot<W: Write>(mut w: W, velocities: &[f64]) -> Result<()> {
    for v in velocities {
        writeln!(w, "{v}")?;
    }
    Ok(())
}

pub fn read_snapshot<R: BufRead>(r: R) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        let s = line.trim();
        if s.is_empty() {
            continue;
        }
        let v = s
            .parse::<f64>()
            .map_err(|e| KacError::Parse(format!("line {}: {e}", lineno + 1)))?;
        out.push(v);
    }
    Ok(out)
}
