//! Exact one-dimensional optimal transport.
//!
//! In 1D every convex cost is minimised by the comonotone (quantile) coupling,
//! so all distances here reduce to matching order statistics or integrating
//! differences of quantile functions.

use std::f64::consts::{FRAC_1_SQRT_2, SQRT_2};

use rand::Rng;
use statrs::function::erf::{erfc, erfc_inv};

use crate::error::{invalid, KacError, Result};

/// Left-continuous generalised inverse CDF of a probability measure on ℝ.
pub trait QuantileFn {
    /// `Q(u)` for `u ∈ (0, 1)`.
    fn quantile(&self, u: f64) -> f64;

    /// `∫_a^b Q(u)^m du` for `0 ≤ a ≤ b ≤ 1`.
    ///
    /// The default is composite Gauss–Legendre on the interior of the cell;
    /// measures with closed forms override it.
    fn cell_moment(&self, a: f64, b: f64, m: u32) -> f64 {
        gauss_legendre_cell(|u| self.quantile(u).powi(m as i32), a, b)
    }
}

impl<T: QuantileFn + ?Sized> QuantileFn for &T {
    fn quantile(&self, u: f64) -> f64 {
        (**self).quantile(u)
    }

    fn cell_moment(&self, a: f64, b: f64, m: u32) -> f64 {
        (**self).cell_moment(a, b, m)
    }
}

const GL_NODES: [f64; 8] = [
    -0.960_289_856_497_536_3,
    -0.796_666_477_413_626_7,
    -0.525_532_409_916_329,
    -0.183_434_642_495_649_8,
    0.183_434_642_495_649_8,
    0.525_532_409_916_329,
    0.796_666_477_413_626_7,
    0.960_289_856_497_536_3,
];
const GL_WEIGHTS: [f64; 8] = [
    0.101_228_536_290_376_3,
    0.222_381_034_453_374_5,
    0.313_706_645_877_887_3,
    0.362_683_783_378_362,
    0.362_683_783_378_362,
    0.313_706_645_877_887_3,
    0.222_381_034_453_374_5,
    0.101_228_536_290_376_3,
];

fn gauss_legendre_cell<F: Fn(f64) -> f64>(f: F, a: f64, b: f64) -> f64 {
    const PIECES: usize = 4;
    let h = (b - a) / PIECES as f64;
    let mut total = 0.0;
    for p in 0..PIECES {
        let lo = a + p as f64 * h;
        let mid = lo + 0.5 * h;
        let half = 0.5 * h;
        for (x, w) in GL_NODES.iter().zip(GL_WEIGHTS.iter()) {
            total += w * half * f(mid + half * x);
        }
    }
    total
}

/// Finite uniform measure `(1/k) Σ δ_{x_i}`, with a cached ascending view.
#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalMeasure {
    atoms: Vec<f64>,
    sorted: Vec<f64>,
}

impl EmpiricalMeasure {
    pub fn new(atoms: Vec<f64>) -> Result<Self> {
        if atoms.iter().any(|x| !x.is_finite()) {
            return invalid("atoms must be finite");
        }
        let mut sorted = atoms.clone();
        // stable: ties keep their original order
        sorted.sort_by(f64::total_cmp);
        Ok(Self { atoms, sorted })
    }

    /// Leave-one-out measure `(1/(k−1)) Σ_{j≠i} δ_{x_j}`.
    pub fn leave_one_out(atoms: &[f64], i: usize) -> Result<Self> {
        if i >= atoms.len() {
            return invalid(format!("index {i} out of range for {} atoms", atoms.len()));
        }
        let rest: Vec<f64> = atoms
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, &x)| x)
            .collect();
        Self::new(rest)
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn sorted(&self) -> &[f64] {
        &self.sorted
    }

    pub fn mean(&self) -> f64 {
        self.atoms.iter().sum::<f64>() / self.atoms.len() as f64
    }

    /// `(1/k) Σ |x|^p`.
    pub fn abs_moment(&self, p: f64) -> f64 {
        self.atoms.iter().map(|x| x.abs().powf(p)).sum::<f64>() / self.atoms.len() as f64
    }
}

impl QuantileFn for EmpiricalMeasure {
    fn quantile(&self, u: f64) -> f64 {
        step_quantile(&self.sorted, u)
    }

    fn cell_moment(&self, a: f64, b: f64, m: u32) -> f64 {
        step_cell_moment(&self.sorted, a, b, m)
    }
}

/// `x_(⌈u k⌉)` on an ascending slice.
pub(crate) fn step_quantile(sorted: &[f64], u: f64) -> f64 {
    let k = sorted.len();
    let idx = (u * k as f64).ceil() as isize - 1;
    sorted[idx.clamp(0, k as isize - 1) as usize]
}

pub(crate) fn step_cell_moment(sorted: &[f64], a: f64, b: f64, m: u32) -> f64 {
    step_cell_integral(sorted.len(), a, b, |k| sorted[k].powi(m as i32))
}

/// `∫_a^b g(⌈u k⌉ − 1) du` for a step function with `k` equal steps.
pub(crate) fn step_cell_integral<F: Fn(usize) -> f64>(k: usize, a: f64, b: f64, g: F) -> f64 {
    if b <= a {
        return 0.0;
    }
    let kf = k as f64;
    let first = ((a * kf).floor() as usize).min(k - 1);
    let last = (((b * kf).ceil() as usize).max(1) - 1).min(k - 1);
    let mut total = 0.0;
    for idx in first..=last {
        let lo = (idx as f64 / kf).max(a);
        let hi = ((idx + 1) as f64 / kf).min(b);
        if hi > lo {
            total += (hi - lo) * g(idx);
        }
    }
    total
}

/// Quantile function given by a closure; cell moments by quadrature.
pub struct FnQuantile<F>(pub F);

impl<F: Fn(f64) -> f64> QuantileFn for FnQuantile<F> {
    fn quantile(&self, u: f64) -> f64 {
        (self.0)(u)
    }
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    -SQRT_2 * erfc_inv(2.0 * p)
}

/// Standard normal upper tail `P(Z > z)`.
pub fn normal_upper_tail(z: f64) -> f64 {
    0.5 * erfc(z * FRAC_1_SQRT_2)
}

pub fn normal_density(z: f64) -> f64 {
    if z.is_infinite() {
        return 0.0;
    }
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// `∫_a^b z^m φ(z) dz` for m = 0..=max, given the exact mass `∫_a^b φ`.
fn gaussian_partial_moments(a: f64, b: f64, mass: f64, max: u32) -> Vec<f64> {
    let edge = |z: f64, pow: u32| -> f64 {
        if z.is_infinite() {
            0.0
        } else {
            z.powi(pow as i32) * normal_density(z)
        }
    };
    let mut j = Vec::with_capacity(max as usize + 1);
    j.push(mass);
    if max >= 1 {
        j.push(normal_density(a) - normal_density(b));
    }
    for m in 2..=max {
        let v = edge(a, m - 1) - edge(b, m - 1) + (m - 1) as f64 * j[m as usize - 2];
        j.push(v);
    }
    j
}

fn binomial(n: u32, k: u32) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Gaussian `N(mean, sd²)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianQuantile {
    pub mean: f64,
    pub sd: f64,
}

impl QuantileFn for GaussianQuantile {
    fn quantile(&self, u: f64) -> f64 {
        self.mean + self.sd * normal_quantile(u)
    }

    fn cell_moment(&self, a: f64, b: f64, m: u32) -> f64 {
        if b <= a {
            return 0.0;
        }
        let za = normal_quantile(a);
        let zb = normal_quantile(b);
        let j = gaussian_partial_moments(za, zb, b - a, m);
        (0..=m)
            .map(|k| {
                binomial(m, k)
                    * self.mean.powi((m - k) as i32)
                    * self.sd.powi(k as i32)
                    * j[k as usize]
            })
            .sum()
    }
}

/// Law of `scale · Z²` with `Z` standard normal: the squared pushforward of
/// `N(0, scale)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScaledChiSquare1 {
    pub scale: f64,
}

impl ScaledChiSquare1 {
    /// `|Z|` quantile at level `u`, i.e. `Φ⁻¹((1+u)/2)` computed through the tail.
    fn abs_z(u: f64) -> f64 {
        -normal_quantile(0.5 * (1.0 - u))
    }
}

impl QuantileFn for ScaledChiSquare1 {
    fn quantile(&self, u: f64) -> f64 {
        let z = Self::abs_z(u);
        self.scale * z * z
    }

    fn cell_moment(&self, a: f64, b: f64, m: u32) -> f64 {
        if b <= a {
            return 0.0;
        }
        let za = Self::abs_z(a);
        let zb = Self::abs_z(b);
        let j = gaussian_partial_moments(za, zb, 0.5 * (b - a), 2 * m);
        2.0 * self.scale.powi(m as i32) * j[2 * m as usize]
    }
}

/// Uniform law on `[a, b]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UniformQuantile {
    pub lo: f64,
    pub hi: f64,
}

impl QuantileFn for UniformQuantile {
    fn quantile(&self, u: f64) -> f64 {
        self.lo + (self.hi - self.lo) * u
    }

    fn cell_moment(&self, a: f64, b: f64, m: u32) -> f64 {
        if b <= a {
            return 0.0;
        }
        let w = self.hi - self.lo;
        if w == 0.0 {
            return (b - a) * self.lo.powi(m as i32);
        }
        let qa = self.quantile(a);
        let qb = self.quantile(b);
        (qb.powi(m as i32 + 1) - qa.powi(m as i32 + 1)) / ((m + 1) as f64 * w)
    }
}

fn check_order(p: f64) -> Result<()> {
    if !(p >= 1.0) || !p.is_finite() {
        return invalid(format!("transport order p must be >= 1, got {p}"));
    }
    Ok(())
}

/// Normalised `W_p^p` between two equal-size empirical measures:
/// `(1/k) Σ |x_(i) − y_(i)|^p`.
pub fn wasserstein_p(xs: &EmpiricalMeasure, ys: &EmpiricalMeasure, p: f64) -> Result<f64> {
    check_order(p)?;
    if xs.is_empty() || ys.is_empty() {
        return invalid("empirical measures must have at least one atom");
    }
    if xs.len() != ys.len() {
        return invalid(format!(
            "atom counts differ: {} vs {} (use wasserstein_samples)",
            xs.len(),
            ys.len()
        ));
    }
    Ok(sorted_cost(xs.sorted(), ys.sorted(), p))
}

pub(crate) fn sorted_cost(a: &[f64], b: &[f64], p: f64) -> f64 {
    let k = a.len() as f64;
    let s: f64 = if p == 2.0 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    } else if p == 1.0 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
    } else {
        a.iter().zip(b).map(|(x, y)| (x - y).abs().powf(p)).sum()
    };
    s / k
}

/// `W_p^p` between empirical measures of possibly different sizes, exact on
/// the common refinement of their quantile steps.
pub fn wasserstein_samples(xs: &EmpiricalMeasure, ys: &EmpiricalMeasure, p: f64) -> Result<f64> {
    check_order(p)?;
    if xs.is_empty() || ys.is_empty() {
        return invalid("empirical measures must have at least one atom");
    }
    if xs.len() == ys.len() {
        return Ok(sorted_cost(xs.sorted(), ys.sorted(), p));
    }
    let (a, b) = (xs.sorted(), ys.sorted());
    let (ka, kb) = (a.len(), b.len());
    // walk the merged breakpoints i/ka and j/kb using integer cross-multiplication
    let (mut i, mut j) = (0usize, 0usize);
    let mut prev: u128 = 0;
    let denom = (ka as u128) * (kb as u128);
    let mut total = 0.0;
    while i < ka && j < kb {
        let next_a = (i as u128 + 1) * kb as u128;
        let next_b = (j as u128 + 1) * ka as u128;
        let next = next_a.min(next_b);
        let w = (next - prev) as f64 / denom as f64;
        total += w * (a[i] - b[j]).abs().powf(p);
        prev = next;
        if next_a == next {
            i += 1;
        }
        if next_b == next {
            j += 1;
        }
    }
    Ok(total)
}

/// Midpoint-rule `W_p^p`: `(1/m) Σ_k |μ((k−½)/m) − ν((k−½)/m)|^p`.
pub fn wasserstein_quantile<A, B>(mu: &A, nu: &B, p: f64, m: usize) -> Result<f64>
where
    A: QuantileFn + ?Sized,
    B: QuantileFn + ?Sized,
{
    check_order(p)?;
    if m == 0 {
        return invalid("quantile grid needs m >= 1");
    }
    let mf = m as f64;
    let s: f64 = (0..m)
        .map(|k| {
            let u = (k as f64 + 0.5) / mf;
            (mu.quantile(u) - nu.quantile(u)).abs().powf(p)
        })
        .sum();
    Ok(s / mf)
}

/// Exact `W_p^p` between an empirical measure and a target quantile function,
/// for even integer `p`, by integrating `(x_(k) − Q(u))^p` over each quantile
/// cell of the empirical measure.
pub fn wasserstein_to<Q: QuantileFn + ?Sized>(
    mu: &EmpiricalMeasure,
    target: &Q,
    p: u32,
) -> Result<f64> {
    if p == 0 || p % 2 != 0 {
        return invalid(format!("exact cell integration needs an even order, got {p}"));
    }
    if mu.is_empty() {
        return invalid("empirical measure must have at least one atom");
    }
    let k = mu.len();
    let kf = k as f64;
    let mut total = 0.0;
    for (idx, &x) in mu.sorted().iter().enumerate() {
        let a = idx as f64 / kf;
        let b = (idx + 1) as f64 / kf;
        let cell: f64 = (0..=p)
            .map(|m| {
                let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
                sign * binomial(p, m)
                    * x.powi((p - m) as i32)
                    * target.cell_moment(a, b, m)
            })
            .sum();
        total += cell;
    }
    Ok(total.max(0.0))
}

/// Image of `mu` under `v ↦ v²`.
pub fn squared_pushforward(mu: &EmpiricalMeasure) -> EmpiricalMeasure {
    let sq: Vec<f64> = mu.atoms().iter().map(|x| x * x).collect();
    EmpiricalMeasure::new(sq).expect("squares of finite atoms are finite")
}

/// Ranks of `values` by square, ties broken by index: `ranks[i]` is the
/// zero-based position of `values[i]²`.
pub fn squared_ranks(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| (values[a] * values[a]).total_cmp(&(values[b] * values[b])));
    let mut ranks = vec![0; values.len()];
    for (r, &i) in order.iter().enumerate() {
        ranks[i] = r;
    }
    ranks
}

/// Where the sign of a transported value comes from.
#[derive(Clone, Copy)]
pub enum SignLaw<'a> {
    /// Target law is symmetric: signs are fair coin flips.
    Symmetric,
    /// Sign of the target atom at quantile level `u` of the squared law.
    Source(&'a dyn Fn(f64) -> f64),
    /// No sign information and no symmetry: refused.
    Unspecified,
}

/// `F²` for the partner of zero-based squared rank `rank` among `m` partners,
/// at position `offset ∈ [0, 1)` inside its quantile cell.
#[inline]
pub fn transported_square<Q: QuantileFn + ?Sized>(
    flow_sq: &Q,
    rank: usize,
    offset: f64,
    m: usize,
) -> Result<f64> {
    let u = (rank as f64 + offset) / m as f64;
    let f2 = flow_sq.quantile(u);
    if !(f2 >= 0.0) {
        return Err(KacError::ContractViolation(format!(
            "squared-flow quantile at u = {u} is {f2}, expected a nonnegative value"
        )));
    }
    Ok(f2)
}

pub(crate) fn draw_sign<R: Rng + ?Sized>(law: SignLaw<'_>, u: f64, rng: &mut R) -> Result<f64> {
    match law {
        SignLaw::Symmetric => Ok(if rng.random::<bool>() { 1.0 } else { -1.0 }),
        SignLaw::Source(f) => Ok(if f(u) < 0.0 { -1.0 } else { 1.0 }),
        SignLaw::Unspecified => Err(KacError::ContractViolation(
            "asymmetric target law without a sign source".into(),
        )),
    }
}

/// Optimal map for the cost `(x² − y²)²` evaluated at every partner.
#[derive(Clone, Debug, PartialEq)]
pub struct SquaredCostMap {
    /// `F` for each atom of `others`, in the atoms' original order.
    pub values: Vec<f64>,
    /// Zero-based squared rank of each atom.
    pub ranks: Vec<usize>,
    /// `(1/m) Σ (x_(k)² − F_(k)²)²`.
    pub cost: f64,
}

/// Comonotone map from the partners' squares to the squared flow, sampled at
/// cell midpoints. The partner with squared rank `k` (1-based) is sent to
/// `F² = Q⁽²⁾((k − ½)/m)`; the sign of `F` follows `signs`.
pub fn optimal_map_squared_cost<Q, R>(
    others: &EmpiricalMeasure,
    flow_sq: &Q,
    signs: SignLaw<'_>,
    rng: &mut R,
) -> Result<SquaredCostMap>
where
    Q: QuantileFn + ?Sized,
    R: Rng + ?Sized,
{
    let m = others.len();
    if m == 0 {
        return invalid("the partner measure is empty");
    }
    let ranks = squared_ranks(others.atoms());
    let mut values = vec![0.0; m];
    let mut cost = 0.0;
    for (idx, (&x, &r)) in others.atoms().iter().zip(&ranks).enumerate() {
        let f2 = transported_square(flow_sq, r, 0.5, m)?;
        let u = (r as f64 + 0.5) / m as f64;
        let sign = draw_sign(signs, u, rng)?;
        values[idx] = sign * f2.sqrt();
        let d = x * x - f2;
        cost += d * d;
    }
    Ok(SquaredCostMap {
        values,
        ranks,
        cost: cost / m as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event_stream::RngStream;

    fn em(v: &[f64]) -> EmpiricalMeasure {
        EmpiricalMeasure::new(v.to_vec()).unwrap()
    }

    #[test]
    fn two_point_example() {
        let w = wasserstein_p(&em(&[0.0, 2.0]), &em(&[1.0, 3.0]), 2.0).unwrap();
        assert!((w - 1.0).abs() < 1e-15);
    }

    #[test]
    fn identical_multisets_cost_nothing() {
        for p in [1.0, 1.5, 2.0, 4.0] {
            assert_eq!(wasserstein_p(&em(&[0.0, 1.0]), &em(&[1.0, 0.0]), p).unwrap(), 0.0);
            assert_eq!(
                wasserstein_p(&em(&[3.0, -1.0, 3.0]), &em(&[3.0, 3.0, -1.0]), p).unwrap(),
                0.0
            );
        }
    }

    #[test]
    fn size_and_order_errors() {
        assert!(wasserstein_p(&em(&[0.0]), &em(&[0.0, 1.0]), 2.0).is_err());
        assert!(wasserstein_p(&em(&[]), &em(&[]), 2.0).is_err());
        assert!(wasserstein_p(&em(&[0.0]), &em(&[1.0]), 0.5).is_err());
        assert!(wasserstein_quantile(&em(&[0.0]), &em(&[1.0]), 2.0, 0).is_err());
        assert!(wasserstein_to(&em(&[0.0]), &UniformQuantile { lo: 0.0, hi: 1.0 }, 3).is_err());
    }

    #[test]
    fn stable_sort_on_ties() {
        let m = em(&[2.0, -1.0, 2.0, 0.0]);
        assert_eq!(m.sorted(), &[-1.0, 0.0, 2.0, 2.0]);
        assert_eq!(squared_ranks(&[1.0, -1.0, 0.5, 1.0]), vec![1, 2, 0, 3]);
    }

    #[test]
    fn left_continuous_quantile() {
        let m = em(&[3.0, 1.0, 2.0]);
        assert_eq!(m.quantile(0.1), 1.0);
        assert_eq!(m.quantile(1.0 / 3.0), 1.0);
        assert_eq!(m.quantile(0.34), 2.0);
        assert_eq!(m.quantile(0.999), 3.0);
    }

    #[test]
    fn midpoint_rule_is_exact_for_equal_size_empiricals() {
        let a = em(&[0.3, -1.2, 2.5, 0.0]);
        let b = em(&[1.0, 1.1, -0.4, 0.2]);
        let direct = wasserstein_p(&a, &b, 2.0).unwrap();
        let grid = wasserstein_quantile(&a, &b, 2.0, 4).unwrap();
        assert!((direct - grid).abs() < 1e-15);
    }

    #[test]
    fn translation_of_uniform() {
        let a = UniformQuantile { lo: 0.0, hi: 1.0 };
        let b = UniformQuantile { lo: 1.0, hi: 2.0 };
        let w = wasserstein_quantile(&a, &b, 1.0, 1000).unwrap();
        assert!((w - 1.0).abs() < 1e-9);
        assert_eq!(wasserstein_quantile(&a, &a, 2.0, 10).unwrap(), 0.0);
    }

    #[test]
    fn gaussian_scale_change() {
        // closed form W_2² = (σ₁ − σ₂)²
        let a = GaussianQuantile { mean: 0.0, sd: 1.0 };
        let b = GaussianQuantile { mean: 0.0, sd: 2.0 };
        let w = wasserstein_quantile(&a, &b, 2.0, 10_000).unwrap();
        assert!((w - 1.0).abs() < 1e-3, "{w}");
    }

    #[test]
    fn gaussian_cell_moments_match_quadrature() {
        let g = GaussianQuantile { mean: 0.3, sd: 1.7 };
        for &(a, b) in &[(0.1, 0.2), (0.45, 0.55), (0.7, 0.95)] {
            for m in 0..=4 {
                let exact = g.cell_moment(a, b, m);
                let quad = gauss_legendre_cell(|u| g.quantile(u).powi(m as i32), a, b);
                assert!((exact - quad).abs() < 1e-9 * (1.0 + quad.abs()), "{a} {b} {m}");
            }
        }
        // full moments
        assert!((g.cell_moment(0.0, 1.0, 1) - 0.3).abs() < 1e-12);
        assert!((g.cell_moment(0.0, 1.0, 2) - (0.09 + 1.7 * 1.7)).abs() < 1e-12);
    }

    #[test]
    fn chi_square_cell_moments() {
        let c = ScaledChiSquare1 { scale: 2.0 };
        assert!((c.cell_moment(0.0, 1.0, 0) - 1.0).abs() < 1e-15);
        assert!((c.cell_moment(0.0, 1.0, 1) - 2.0).abs() < 1e-12);
        // E (2 Z²)² = 4 · 3
        assert!((c.cell_moment(0.0, 1.0, 2) - 12.0).abs() < 1e-11);
        for &(a, b) in &[(0.1, 0.2), (0.5, 0.6), (0.8, 0.9)] {
            for m in 0..=3 {
                let exact = c.cell_moment(a, b, m);
                let quad = gauss_legendre_cell(|u| c.quantile(u).powi(m as i32), a, b);
                assert!((exact - quad).abs() < 1e-9 * (1.0 + quad.abs()), "{a} {b} {m}");
            }
        }
        // squaring the signed Gaussian quantile
        let g = GaussianQuantile { mean: 0.0, sd: 2f64.sqrt() };
        for u in [0.05, 0.3, 0.77, 0.999] {
            let z = g.quantile(0.5 * (1.0 + u));
            assert!((c.quantile(u) - z * z).abs() < 1e-10 * (1.0 + z * z));
        }
    }

    #[test]
    fn exact_cell_integration_matches_fine_midpoint() {
        let mu = em(&[-0.7, 0.1, 0.4, 1.9, -2.2]);
        let g = GaussianQuantile { mean: 0.0, sd: 1.0 };
        let exact = wasserstein_to(&mu, &g, 2).unwrap();
        let fine = wasserstein_quantile(&mu, &g, 2.0, 2_000_000).unwrap();
        assert!((exact - fine).abs() < 1e-5, "{exact} vs {fine}");
        let exact4 = wasserstein_to(&mu, &g, 4).unwrap();
        let fine4 = wasserstein_quantile(&mu, &g, 4.0, 2_000_000).unwrap();
        assert!((exact4 - fine4).abs() < 1e-4 * fine4.max(1.0), "{exact4} vs {fine4}");
        let u = UniformQuantile { lo: 0.0, hi: 1.0 };
        let e = wasserstein_to(&em(&[0.5]), &u, 2).unwrap();
        assert!((e - 1.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn unequal_sizes_on_common_refinement() {
        let a = em(&[0.0, 1.0]);
        let b = em(&[0.0, 0.5, 1.0]);
        // cells: [0,1/3]: 0-0, [1/3,1/2]: 0-0.5, [1/2,2/3]: 1-0.5, [2/3,1]: 1-1
        let w = wasserstein_samples(&a, &b, 2.0).unwrap();
        assert!((w - (1.0 / 6.0) * 0.25 - (1.0 / 6.0) * 0.25).abs() < 1e-15);
        let via_grid = wasserstein_quantile(&a, &b, 2.0, 6).unwrap();
        assert!((w - via_grid).abs() < 1e-15);
    }

    #[test]
    fn pushforward_squares() {
        assert_eq!(squared_pushforward(&em(&[2.0])).atoms(), &[4.0]);
        assert_eq!(squared_pushforward(&em(&[-1.0, 1.0])).atoms(), &[1.0, 1.0]);
        let mu = em(&[0.5, -1.5, 2.0]);
        let sq = squared_pushforward(&mu);
        assert!((sq.mean() - mu.abs_moment(2.0)).abs() < 1e-15);
    }

    #[test]
    fn map_on_matching_squares_costs_nothing() {
        let mut rng = RngStream::new(0, 0);
        let others = em(&[-1.0, 3f64.sqrt()]);
        // flow² quantiles at the midpoints 1/4 and 3/4 are 1 and 3
        let flow_sq = FnQuantile(|u: f64| if u <= 0.5 { 1.0 } else { 3.0 });
        let map = optimal_map_squared_cost(&others, &flow_sq, SignLaw::Symmetric, &mut rng).unwrap();
        assert!(map.cost < 1e-15);
        for (x, f) in others.atoms().iter().zip(&map.values) {
            assert!((x * x - f * f).abs() < 1e-14);
        }
    }

    #[test]
    fn map_two_partner_assignment() {
        let mut rng = RngStream::new(0, 0);
        let others = em(&[3f64.sqrt(), 1.0]);
        let flow_sq = FnQuantile(|u: f64| if u <= 0.5 { 1.0 } else { 9.0 });
        let map = optimal_map_squared_cost(&others, &flow_sq, SignLaw::Symmetric, &mut rng).unwrap();
        // squares {3, 1} → ranks {1, 0} → F² {9, 1}
        assert_eq!(map.ranks, vec![1, 0]);
        assert!((map.values[0].powi(2) - 9.0).abs() < 1e-12);
        assert!((map.values[1].powi(2) - 1.0).abs() < 1e-12);
        // cost of this matching (3−9)²+(1−1)² over 2 = 18, the swap costs (3−1)²+(1−9)² over 2 = 34
        assert!((map.cost - 18.0).abs() < 1e-12);
    }

    #[test]
    fn map_rejects_negative_flow_and_unsigned_asymmetry() {
        let mut rng = RngStream::new(0, 0);
        let others = em(&[1.0, 2.0]);
        let bad = FnQuantile(|_u: f64| -1.0);
        assert!(matches!(
            optimal_map_squared_cost(&others, &bad, SignLaw::Symmetric, &mut rng),
            Err(KacError::ContractViolation(_))
        ));
        let ok = FnQuantile(|u: f64| u);
        assert!(optimal_map_squared_cost(&others, &ok, SignLaw::Unspecified, &mut rng).is_err());
        let neg = |_u: f64| -1.0;
        let map = optimal_map_squared_cost(&others, &ok, SignLaw::Source(&neg), &mut rng).unwrap();
        assert!(map.values.iter().all(|&v| v <= 0.0));
    }

    #[test]
    fn map_cost_equals_midpoint_distance_of_squares() {
        let mut rng = RngStream::new(4, 0);
        let others = em(&[0.3, -1.1, 2.0, 0.9, -0.2, 1.4]);
        let flow_sq = ScaledChiSquare1 { scale: 1.0 };
        let map = optimal_map_squared_cost(&others, &flow_sq, SignLaw::Symmetric, &mut rng).unwrap();
        let w = wasserstein_quantile(&squared_pushforward(&others), &flow_sq, 2.0, 6).unwrap();
        assert!((map.cost - w).abs() < 1e-12);
    }
}
