//! Queryable representations of the nonlinear flow `(f_t)`.
//!
//! Two kinds exist. The stationary Gaussian is exact: a centred Gaussian with
//! variance `ℰ` is invariant under the Boltzmann–Kac dynamics. Everything
//! else is represented by a large auxiliary Kac system whose sorted
//! snapshots stand in for `f_t`.

use std::f64::consts::PI;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;

use crate::error::{invalid, KacError, Result};
use crate::event_stream::RngStream;
use crate::kac_system::{Parametrization, SystemState};
use crate::transport::{
    normal_quantile, step_cell_integral, step_quantile, EmpiricalMeasure, FnQuantile,
    GaussianQuantile, QuantileFn, ScaledChiSquare1, SignLaw, UniformQuantile,
};

/// Time slack when matching a query against the last snapshot.
const TIME_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowKind {
    StationaryGaussian,
    EmpiricalReference,
}

/// One sorted reference snapshot.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    /// Signed atoms, ascending.
    sorted: Vec<f64>,
    /// Signed atoms, ascending by square (stable from `sorted`).
    by_square: Vec<f64>,
}

impl Snapshot {
    fn from_atoms(mut atoms: Vec<f64>) -> Self {
        atoms.sort_by(f64::total_cmp);
        let mut by_square = atoms.clone();
        by_square.sort_by(|a, b| (a * a).total_cmp(&(b * b)));
        Self {
            sorted: atoms,
            by_square,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Repr {
    Gaussian { energy: f64 },
    Reference { times: Vec<f64>, snapshots: Vec<Snapshot> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowModel {
    repr: Repr,
    energy: f64,
}

/// Exact flow for a centred Gaussian initial law of variance `energy`.
pub fn stationary_gaussian(energy: f64) -> Result<FlowModel> {
    if !(energy > 0.0) || !energy.is_finite() {
        return invalid(format!("energy must be positive, got {energy}"));
    }
    Ok(FlowModel {
        repr: Repr::Gaussian { energy },
        energy,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceFlowConfig {
    pub n_ref: usize,
    pub snapshot_times: Vec<f64>,
    pub seed: u64,
    pub stream_id: u64,
}

impl ReferenceFlowConfig {
    pub const DEFAULT_N_REF: usize = 100_000;
    pub const DEFAULT_SPACING: f64 = 0.25;

    /// Snapshots every `DEFAULT_SPACING` from 0 through `horizon`.
    pub fn covering(horizon: f64, n_ref: usize, seed: u64) -> Self {
        let steps = (horizon / Self::DEFAULT_SPACING).ceil().max(0.0) as usize;
        let snapshot_times = (0..=steps)
            .map(|k| k as f64 * Self::DEFAULT_SPACING)
            .collect();
        Self {
            n_ref,
            snapshot_times,
            seed,
            stream_id: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_ref < 1000 {
            return invalid(format!("n_ref must be >= 1000, got {}", self.n_ref));
        }
        match self.snapshot_times.first() {
            Some(&t) if t == 0.0 => {}
            _ => return invalid("snapshot_times must start at 0"),
        }
        if self
            .snapshot_times
            .windows(2)
            .any(|w| !(w[1] > w[0]) || !w[1].is_finite())
        {
            return invalid("snapshot_times must be strictly ascending and finite");
        }
        Ok(())
    }
}

/// Simulates an `n_ref`-particle Kac system (polar rule) from `f0` draws and
/// keeps its sorted snapshots.
pub fn build_reference_flow<F>(mut f0_sampler: F, config: &ReferenceFlowConfig) -> Result<FlowModel>
where
    F: FnMut(&mut RngStream) -> f64,
{
    config.validate()?;
    let mut init_rng = RngStream::new(config.seed, config.stream_id).child(&[0]);
    let atoms: Vec<f64> = (0..config.n_ref).map(|_| f0_sampler(&mut init_rng)).collect();
    let mut state = SystemState::new(atoms)?;
    let mut dyn_rng = RngStream::new(config.seed, config.stream_id).child(&[1]);
    let mut snapshots = Vec::with_capacity(config.snapshot_times.len());
    for &t in &config.snapshot_times {
        state.advance(t, Parametrization::Polar, &mut dyn_rng)?;
        snapshots.push(Snapshot::from_atoms(state.velocities().to_vec()));
    }
    let energy = snapshot_energy(&snapshots[0]);
    Ok(FlowModel {
        repr: Repr::Reference {
            times: config.snapshot_times.clone(),
            snapshots,
        },
        energy,
    })
}

impl FlowModel {
    pub fn kind(&self) -> FlowKind {
        match self.repr {
            Repr::Gaussian { .. } => FlowKind::StationaryGaussian,
            Repr::Reference { .. } => FlowKind::EmpiricalReference,
        }
    }

    /// `ℰ = ∫ v² f_0(dv)`.
    pub fn energy(&self) -> f64 {
        self.energy
    }

    /// Last covered time (infinite for the stationary kind).
    pub fn horizon(&self) -> f64 {
        match &self.repr {
            Repr::Gaussian { .. } => f64::INFINITY,
            Repr::Reference { times, .. } => *times.last().expect("at least one snapshot"),
        }
    }

    pub fn reference_size(&self) -> Option<usize> {
        match &self.repr {
            Repr::Gaussian { .. } => None,
            Repr::Reference { snapshots, .. } => Some(snapshots[0].sorted.len()),
        }
    }

    pub fn snapshot_times(&self) -> Option<&[f64]> {
        match &self.repr {
            Repr::Gaussian { .. } => None,
            Repr::Reference { times, .. } => Some(times),
        }
    }

    /// The flow frozen at time `t`.
    pub fn at(&self, t: f64) -> Result<FlowSlice<'_>> {
        if !(t >= 0.0) {
            return Err(KacError::OutOfRange {
                t,
                horizon: self.horizon(),
            });
        }
        match &self.repr {
            Repr::Gaussian { energy } => Ok(FlowSlice::Gaussian { energy: *energy }),
            Repr::Reference { times, snapshots } => {
                let last = *times.last().unwrap();
                if t > last + TIME_EPS {
                    return Err(KacError::OutOfRange { t, horizon: last });
                }
                let t = t.min(last);
                // first snapshot strictly after t
                let hi = times.partition_point(|&s| s <= t);
                if hi == 0 || hi == times.len() {
                    let k = hi.saturating_sub(1).min(times.len() - 1);
                    return Ok(FlowSlice::Reference {
                        lo: &snapshots[k],
                        hi: &snapshots[k],
                        w: 0.0,
                    });
                }
                let (t0, t1) = (times[hi - 1], times[hi]);
                let w = (t - t0) / (t1 - t0);
                Ok(FlowSlice::Reference {
                    lo: &snapshots[hi - 1],
                    hi: &snapshots[hi],
                    w,
                })
            }
        }
    }

    pub fn quantile(&self, t: f64, u: f64) -> Result<f64> {
        Ok(self.at(t)?.quantile(u))
    }

    pub fn squared_quantile(&self, t: f64, u: f64) -> Result<f64> {
        Ok(self.at(t)?.squared_quantile(u))
    }

    pub fn sample<R: Rng + ?Sized>(&self, t: f64, rng: &mut R) -> Result<f64> {
        Ok(self.at(t)?.sample(rng))
    }

    /// Absolute moment `∫ |v|^p f_t(dv)`.
    pub fn moment(&self, t: f64, p: f64) -> Result<f64> {
        Ok(self.at(t)?.moment(p))
    }

    /// Writes every snapshot as a `t=<time> n=<n_ref>` header followed by one
    /// signed atom per line (ascending).
    pub fn write_snapshots<W: Write>(&self, mut w: W) -> Result<()> {
        let Repr::Reference { times, snapshots } = &self.repr else {
            return invalid("the stationary Gaussian flow has no snapshots to persist");
        };
        for (t, s) in times.iter().zip(snapshots) {
            writeln!(w, "t={t} n={}", s.sorted.len())?;
            for x in &s.sorted {
                writeln!(w, "{x}")?;
            }
        }
        Ok(())
    }

    pub fn read_snapshots<R: BufRead>(r: R) -> Result<Self> {
        let mut times = Vec::new();
        let mut snapshots = Vec::new();
        let mut lines = r.lines().enumerate();
        while let Some((lineno, line)) = lines.next() {
            let line = line?;
            let header = line.trim();
            if header.is_empty() {
                continue;
            }
            let (t, n) = parse_header(header)
                .ok_or_else(|| KacError::Parse(format!("line {}: bad header `{header}`", lineno + 1)))?;
            let mut atoms = Vec::with_capacity(n);
            for _ in 0..n {
                let (lineno, line) = lines
                    .next()
                    .ok_or_else(|| KacError::Parse("truncated snapshot".into()))?;
                let line = line?;
                let x = line
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| KacError::Parse(format!("line {}: {e}", lineno + 1)))?;
                atoms.push(x);
            }
            times.push(t);
            snapshots.push(Snapshot::from_atoms(atoms));
        }
        if snapshots.is_empty() {
            return Err(KacError::Parse("no snapshots found".into()));
        }
        let n0 = snapshots[0].sorted.len();
        if snapshots.iter().any(|s| s.sorted.len() != n0) || n0 == 0 {
            return Err(KacError::Parse("snapshots must share one nonzero size".into()));
        }
        if times[0] != 0.0 || times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(KacError::Parse("snapshot times must start at 0 and ascend".into()));
        }
        let energy = snapshot_energy(&snapshots[0]);
        Ok(Self {
            repr: Repr::Reference { times, snapshots },
            energy,
        })
    }
}

fn snapshot_energy(s: &Snapshot) -> f64 {
    s.sorted.iter().map(|x| x * x).sum::<f64>() / s.sorted.len() as f64
}

fn parse_header(s: &str) -> Option<(f64, usize)> {
    let mut t = None;
    let mut n = None;
    for part in s.split_whitespace() {
        if let Some(v) = part.strip_prefix("t=") {
            t = v.parse().ok();
        } else if let Some(v) = part.strip_prefix("n=") {
            n = v.parse().ok();
        }
    }
    Some((t?, n?))
}

/// `f_t` at one fixed time.
#[derive(Clone, Copy, Debug)]
pub enum FlowSlice<'a> {
    Gaussian {
        energy: f64,
    },
    Reference {
        lo: &'a Snapshot,
        hi: &'a Snapshot,
        w: f64,
    },
}

impl<'a> FlowSlice<'a> {
    #[inline]
    fn blend(a: f64, b: f64, w: f64) -> f64 {
        if w == 0.0 {
            a
        } else {
            (1.0 - w) * a + w * b
        }
    }

    pub fn quantile(&self, u: f64) -> f64 {
        match *self {
            Self::Gaussian { energy } => GaussianQuantile {
                mean: 0.0,
                sd: energy.sqrt(),
            }
            .quantile(u),
            Self::Reference { lo, hi, w } => {
                Self::blend(step_quantile(&lo.sorted, u), step_quantile(&hi.sorted, u), w)
            }
        }
    }

    /// Quantile of `f_t^(2)`.
    pub fn squared_quantile(&self, u: f64) -> f64 {
        match *self {
            Self::Gaussian { energy } => ScaledChiSquare1 { scale: energy }.quantile(u),
            Self::Reference { lo, hi, w } => {
                let a = step_quantile(&lo.by_square, u);
                let b = step_quantile(&hi.by_square, u);
                Self::blend(a * a, b * b, w)
            }
        }
    }

    /// Sign of the atom at level `u` of the squared law (reference kind only).
    pub fn sign_at(&self, u: f64) -> f64 {
        match *self {
            Self::Gaussian { .. } => 1.0,
            Self::Reference { lo, hi, w } => {
                let s = if w < 0.5 { lo } else { hi };
                if step_quantile(&s.by_square, u) < 0.0 {
                    -1.0
                } else {
                    1.0
                }
            }
        }
    }

    pub fn is_symmetric(&self) -> bool {
        matches!(self, Self::Gaussian { .. })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Self::Gaussian { energy } => energy.sqrt() * rng.sample::<f64, _>(StandardNormal),
            Self::Reference { .. } => {
                let u: f64 = rng.random();
                self.quantile(u.max(f64::MIN_POSITIVE))
            }
        }
    }

    pub fn moment(&self, p: f64) -> f64 {
        match *self {
            Self::Gaussian { energy } => gaussian_abs_moment(energy, p),
            Self::Reference { lo, hi, w } => {
                let n = lo.sorted.len();
                lo.sorted
                    .iter()
                    .zip(&hi.sorted)
                    .map(|(&a, &b)| Self::blend(a, b, w).abs().powf(p))
                    .sum::<f64>()
                    / n as f64
            }
        }
    }

    /// Signed view as a quantile function.
    pub fn signed(self) -> SignedFlow<'a> {
        SignedFlow(self)
    }

    /// Squared pushforward as a quantile function.
    pub fn squared(self) -> SquaredFlow<'a> {
        SquaredFlow(self)
    }

    /// The reference kind as an empirical measure (interpolated quantiles).
    pub fn to_empirical(&self) -> Option<EmpiricalMeasure> {
        match *self {
            Self::Gaussian { .. } => None,
            Self::Reference { lo, hi, w } => {
                let atoms = lo
                    .sorted
                    .iter()
                    .zip(&hi.sorted)
                    .map(|(&a, &b)| Self::blend(a, b, w))
                    .collect();
                EmpiricalMeasure::new(atoms).ok()
            }
        }
    }
}

/// `E|X|^p` for `X ~ N(0, energy)`.
pub fn gaussian_abs_moment(energy: f64, p: f64) -> f64 {
    if p == 2.0 {
        return energy;
    }
    if p == 4.0 {
        return 3.0 * energy * energy;
    }
    energy.powf(p / 2.0) * 2f64.powf(p / 2.0) * gamma((p + 1.0) / 2.0) / PI.sqrt()
}

#[derive(Clone, Copy, Debug)]
pub struct SignedFlow<'a>(FlowSlice<'a>);

#[derive(Clone, Copy, Debug)]
pub struct SquaredFlow<'a>(FlowSlice<'a>);

impl QuantileFn for SignedFlow<'_> {
    fn quantile(&self, u: f64) -> f64 {
        self.0.quantile(u)
    }

    fn cell_moment(&self, a: f64, b: f64, m: u32) -> f64 {
        match self.0 {
            FlowSlice::Gaussian { energy } => GaussianQuantile {
                mean: 0.0,
                sd: energy.sqrt(),
            }
            .cell_moment(a, b, m),
            FlowSlice::Reference { lo, hi, w } => step_cell_integral(lo.sorted.len(), a, b, |k| {
                FlowSlice::blend(lo.sorted[k], hi.sorted[k], w).powi(m as i32)
            }),
        }
    }
}

impl QuantileFn for SquaredFlow<'_> {
    fn quantile(&self, u: f64) -> f64 {
        self.0.squared_quantile(u)
    }

    fn cell_moment(&self, a: f64, b: f64, m: u32) -> f64 {
        match self.0 {
            FlowSlice::Gaussian { energy } => ScaledChiSquare1 { scale: energy }.cell_moment(a, b, m),
            FlowSlice::Reference { lo, hi, w } => {
                step_cell_integral(lo.by_square.len(), a, b, |k| {
                    let (x, y) = (lo.by_square[k], hi.by_square[k]);
                    FlowSlice::blend(x * x, y * y, w).powi(m as i32)
                })
            }
        }
    }
}

impl<'a> SquaredFlow<'a> {
    pub fn slice(&self) -> FlowSlice<'a> {
        self.0
    }
}

impl FlowSlice<'_> {
    /// Sign law for transported values: symmetric for the Gaussian kind, the
    /// reference atoms' signs otherwise.
    pub fn with_sign_law<T>(&self, f: impl FnOnce(SignLaw<'_>) -> T) -> T {
        if self.is_symmetric() {
            f(SignLaw::Symmetric)
        } else {
            let s = *self;
            let src = move |u: f64| s.sign_at(u);
            f(SignLaw::Source(&src))
        }
    }
}

/// Initial laws `f_0` offered by the experiments.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InitialLaw {
    /// Centred Gaussian with variance `energy`.
    Gaussian { energy: f64 },
    Uniform { lo: f64, hi: f64 },
    /// Symmetric density ∝ (1 + |v|)^-(p+1) on |v| ≤ 10⁶.
    StudentLike { p: f64 },
}

impl InitialLaw {
    pub const HEAVY_TAIL_CUTOFF: f64 = 1e6;

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Gaussian { energy } if !(energy > 0.0) || !energy.is_finite() => {
                invalid(format!("gaussian energy must be positive, got {energy}"))
            }
            Self::Uniform { lo, hi } if !(hi > lo) || !lo.is_finite() || !hi.is_finite() => {
                invalid(format!("uniform needs lo < hi, got ({lo}, {hi})"))
            }
            Self::StudentLike { p } if !(p > 2.0) || !p.is_finite() => {
                invalid(format!("student-like tail index must exceed 2, got {p}"))
            }
            _ => Ok(()),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Self::Gaussian { energy } => energy.sqrt() * rng.sample::<f64, _>(StandardNormal),
            Self::Uniform { lo, hi } => lo + (hi - lo) * rng.random::<f64>(),
            Self::StudentLike { p } => {
                let mass = 1.0 - (1.0 + Self::HEAVY_TAIL_CUTOFF).powf(-p);
                let u: f64 = rng.random();
                let x = (1.0 - u * mass).powf(-1.0 / p) - 1.0;
                if rng.random::<bool>() {
                    x
                } else {
                    -x
                }
            }
        }
    }

    /// `ℰ = ∫ v² f_0(dv)`.
    pub fn energy(&self) -> f64 {
        match *self {
            Self::Gaussian { energy } => energy,
            Self::Uniform { lo, hi } => (lo * lo + lo * hi + hi * hi) / 3.0,
            Self::StudentLike { p } => {
                let y = 1.0 + Self::HEAVY_TAIL_CUTOFF;
                let mass = 1.0 - y.powf(-p);
                let raw = p
                    * ((y.powf(2.0 - p) - 1.0) / (2.0 - p) - 2.0 * (y.powf(1.0 - p) - 1.0) / (1.0 - p)
                        + (y.powf(-p) - 1.0) / (-p));
                raw / mass
            }
        }
    }

    pub fn is_gaussian(&self) -> bool {
        matches!(self, Self::Gaussian { .. })
    }

    pub fn quantile(&self, u: f64) -> f64 {
        match *self {
            Self::Gaussian { energy } => energy.sqrt() * normal_quantile(u),
            Self::Uniform { lo, hi } => lo + (hi - lo) * u,
            Self::StudentLike { p } => {
                let mass = 1.0 - (1.0 + Self::HEAVY_TAIL_CUTOFF).powf(-p);
                let s = (2.0 * u - 1.0).abs();
                let x = (1.0 - s * mass).powf(-1.0 / p) - 1.0;
                if u >= 0.5 {
                    x
                } else {
                    -x
                }
            }
        }
    }

    /// The law as a quantile function, with closed-form cell moments where available.
    pub fn quantile_fn(&self) -> Box<dyn QuantileFn + Send + Sync> {
        match *self {
            Self::Gaussian { energy } => Box::new(GaussianQuantile {
                mean: 0.0,
                sd: energy.sqrt(),
            }),
            Self::Uniform { lo, hi } => Box::new(UniformQuantile { lo, hi }),
            law @ Self::StudentLike { .. } => Box::new(FnQuantile(move |u| law.quantile(u))),
        }
    }
}

impl FromStr for InitialLaw {
    type Err = KacError;

    /// `gaussian:1.0`, `uniform:-1,1`, `student-like:6`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, args) = s.split_once(':').unwrap_or((s, ""));
        let nums: std::result::Result<Vec<f64>, _> = args
            .split(',')
            .filter(|a| !a.trim().is_empty())
            .map(|a| a.trim().parse::<f64>())
            .collect();
        let nums = nums.map_err(|e| KacError::Parse(format!("f0 `{s}`: {e}")))?;
        let law = match (name.trim().to_ascii_lowercase().as_str(), nums.as_slice()) {
            ("gaussian", []) => Self::Gaussian { energy: 1.0 },
            ("gaussian", [e]) => Self::Gaussian { energy: *e },
            ("uniform", [lo, hi]) => Self::Uniform { lo: *lo, hi: *hi },
            ("student-like" | "student", [p]) => Self::StudentLike { p: *p },
            _ => {
                return Err(KacError::Parse(format!(
                    "unknown f0 `{s}` (expected gaussian:E, uniform:a,b or student-like:p)"
                )))
            }
        };
        law.validate()?;
        Ok(law)
    }
}

impl std::fmt::Display for InitialLaw {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match *self {
            Self::Gaussian { energy } => write!(f, "gaussian:{energy}"),
            Self::Uniform { lo, hi } => write!(f, "uniform:{lo},{hi}"),
            Self::StudentLike { p } => write!(f, "student-like:{p}"),
        }
    }
}

/// Exact flow for Gaussian `f_0`, reference flow otherwise.
pub fn flow_for(law: &InitialLaw, config: &ReferenceFlowConfig) -> Result<FlowModel> {
    law.validate()?;
    match *law {
        InitialLaw::Gaussian { energy } => stationary_gaussian(energy),
        _ => {
            let law = *law;
            build_reference_flow(move |rng| law.sample(rng), config)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_reference(seed: u64) -> FlowModel {
        let cfg = ReferenceFlowConfig {
            n_ref: 2000,
            snapshot_times: vec![0.0, 0.5, 1.0],
            seed,
            stream_id: 0,
        };
        let law = InitialLaw::Uniform { lo: -1.0, hi: 2.0 };
        build_reference_flow(|rng| law.sample(rng), &cfg).unwrap()
    }

    #[test]
    fn gaussian_flow_basic_queries() {
        let f = stationary_gaussian(2.0).unwrap();
        assert_eq!(f.kind(), FlowKind::StationaryGaussian);
        for t in [0.0, 1.0, 100.0] {
            assert!(f.quantile(t, 0.5).unwrap().abs() < 1e-15);
            assert_eq!(f.moment(t, 2.0).unwrap(), 2.0);
            assert_eq!(f.moment(t, 4.0).unwrap(), 12.0);
        }
        // generic branch of the absolute-moment formula
        assert!((gaussian_abs_moment(2.0, 6.0) - 15.0 * 8.0).abs() < 1e-9);
        assert!((gaussian_abs_moment(1.0, 1.0) - (2.0 / PI).sqrt()).abs() < 1e-14);
        assert!(stationary_gaussian(0.0).is_err());
        assert!(stationary_gaussian(-1.0).is_err());
    }

    #[test]
    fn gaussian_squared_quantile_is_scaled_chi_square() {
        let f = stationary_gaussian(3.0).unwrap();
        for u in [0.1, 0.5, 0.9] {
            let q = f.quantile(0.0, 0.5 * (1.0 + u)).unwrap();
            let q2 = f.squared_quantile(0.0, u).unwrap();
            assert!((q * q - q2).abs() < 1e-9 * (1.0 + q2));
        }
    }

    #[test]
    fn reference_matches_initial_sample_at_zero() {
        let cfg = ReferenceFlowConfig {
            n_ref: 1000,
            snapshot_times: vec![0.0, 1.0],
            seed: 11,
            stream_id: 2,
        };
        let law = InitialLaw::Gaussian { energy: 1.0 };
        let f = build_reference_flow(|rng| law.sample(rng), &cfg).unwrap();
        let mut rng = RngStream::new(11, 2).child(&[0]);
        let mut atoms: Vec<f64> = (0..1000).map(|_| law.sample(&mut rng)).collect();
        atoms.sort_by(f64::total_cmp);
        for (k, a) in atoms.iter().enumerate() {
            let u = (k as f64 + 0.5) / 1000.0;
            assert_eq!(f.quantile(0.0, u).unwrap(), *a);
        }
    }

    #[test]
    fn reference_energy_at_snapshots() {
        let f = small_reference(1);
        for &t in f.snapshot_times().unwrap() {
            let m2 = f.moment(t, 2.0).unwrap();
            assert!(((m2 - f.energy()) / f.energy()).abs() < 1e-9);
        }
        assert!((f.energy() - 1.0).abs() < 0.1);
    }

    #[test]
    fn reference_out_of_range() {
        let f = small_reference(2);
        assert!(matches!(f.at(1.5), Err(KacError::OutOfRange { .. })));
        assert!(f.at(-0.1).is_err());
        assert!(f.at(1.0).is_ok());
    }

    #[test]
    fn quantiles_monotone_and_squared_routes_agree() {
        let f = small_reference(3);
        for t in [0.0, 0.25, 0.5, 0.8, 1.0] {
            let s = f.at(t).unwrap();
            let mut prev = f64::NEG_INFINITY;
            for k in 0..200 {
                let u = (k as f64 + 0.5) / 200.0;
                let q = s.quantile(u);
                assert!(q >= prev);
                prev = q;
            }
        }
        for &t in f.snapshot_times().unwrap() {
            let s = f.at(t).unwrap();
            let emp = s.to_empirical().unwrap();
            let sq = crate::transport::squared_pushforward(&emp);
            for k in 0..2000 {
                let u = (k as f64 + 0.5) / 2000.0;
                assert!((sq.quantile(u) - s.squared_quantile(u)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn sign_source_reflects_atoms() {
        let cfg = ReferenceFlowConfig {
            n_ref: 1000,
            snapshot_times: vec![0.0],
            seed: 5,
            stream_id: 0,
        };
        let f = build_reference_flow(|rng| 1.0 + rng.random::<f64>(), &cfg).unwrap();
        let s = f.at(0.0).unwrap();
        assert!(!s.is_symmetric());
        for k in 0..10 {
            assert_eq!(s.sign_at((k as f64 + 0.5) / 10.0), 1.0);
        }
    }

    #[test]
    fn snapshot_persistence_is_bit_exact() {
        let f = small_reference(4);
        let mut buf = Vec::new();
        f.write_snapshots(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t=0 n=2000\n"));
        let g = FlowModel::read_snapshots(buf.as_slice()).unwrap();
        assert_eq!(f, g);
        assert!(stationary_gaussian(1.0).unwrap().write_snapshots(Vec::new()).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = ReferenceFlowConfig::covering(1.0, 500, 0);
        assert!(build_reference_flow(|_| 0.0, &cfg).is_err());
        cfg.n_ref = 1000;
        cfg.snapshot_times = vec![0.5, 1.0];
        assert!(build_reference_flow(|_| 0.0, &cfg).is_err());
        let cfg = ReferenceFlowConfig::covering(1.0, 1000, 0);
        assert_eq!(cfg.snapshot_times, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn initial_law_parsing_and_energy() {
        let g: InitialLaw = "gaussian:1.5".parse().unwrap();
        assert_eq!(g.energy(), 1.5);
        let u: InitialLaw = "uniform:-1,1".parse().unwrap();
        assert!((u.energy() - 1.0 / 3.0).abs() < 1e-15);
        let s: InitialLaw = "student-like:6".parse().unwrap();
        // untruncated: 2 / ((p-1)(p-2)) = 0.1
        assert!((s.energy() - 0.1).abs() < 1e-9);
        assert!("uniform:1,0".parse::<InitialLaw>().is_err());
        assert!("cauchy".parse::<InitialLaw>().is_err());
        assert_eq!(s.to_string().parse::<InitialLaw>().unwrap(), s);
    }

    #[test]
    fn student_like_sample_energy() {
        let law = InitialLaw::StudentLike { p: 10.0 };
        let mut rng = RngStream::new(8, 0);
        let n = 400_000;
        let m2: f64 = (0..n).map(|_| law.sample(&mut rng).powi(2)).sum::<f64>() / n as f64;
        assert!((m2 - law.energy()).abs() < 0.05 * law.energy(), "{m2} {}", law.energy());
    }
}
