//! Poisson collision events driving every system in the crate.
//!
//! Events arrive at total rate `N/2`. Each carries an ordered pair of distinct
//! particles, a uniform angle and, for the coupled constructions, the
//! fractional positions of the two pair coordinates inside their particle
//! cells (the continuous marks of the underlying point measure on
//! `[0, N) x [0, N)`).
//!
//! Particle indices are zero-based throughout the crate.

use std::f64::consts::{FRAC_PI_2, TAU};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

use crate::error::{invalid, Result};

/// Reproducible random stream identified by `(seed, stream_id)`.
///
/// Backed by ChaCha8 with the stream id mapped onto the cipher's stream
/// counter, so every replica of an experiment gets its own independent stream
/// out of one master seed.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// A child stream of the same master seed, keyed by `parts`.
    pub fn child(&self, parts: &[u64]) -> Self {
        let mut key = vec![self.stream_id];
        key.extend_from_slice(parts);
        Self::new(self.seed, stream_key(&key))
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// Mixes a list of integers into a single stream id (splitmix64 finaliser).
pub fn stream_key(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x243f_6a88_85a3_08d3;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

/// One atom of the collision point measure.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CollisionEvent {
    /// Time elapsed since the previous event.
    pub dt: f64,
    /// First (row) index of the colliding pair.
    pub i: usize,
    /// Second (column) index, never equal to `i`.
    pub j: usize,
    /// Collision angle in `[0, 2π)`.
    pub theta: f64,
    /// Fractional position of the first coordinate inside the cell of `i`.
    pub first_offset: f64,
    /// Fractional position of the second coordinate inside the cell of `j`.
    pub second_offset: f64,
}

/// How one particle sees an event it takes part in.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Participation {
    pub partner: usize,
    /// Position of the partner coordinate inside the partner's cell, in `[0, 1)`.
    pub partner_offset: f64,
    pub angle: f64,
}

impl CollisionEvent {
    pub fn participation(&self, k: usize) -> Option<Participation> {
        if k == self.i {
            Some(Participation {
                partner: self.j,
                partner_offset: self.second_offset,
                angle: self.theta,
            })
        } else if k == self.j {
            Some(Participation {
                partner: self.i,
                partner_offset: self.first_offset,
                angle: shift_to_cosine(self.theta),
            })
        } else {
            None
        }
    }
}

fn shift_to_cosine(theta: f64) -> f64 {
    let a = (theta - FRAC_PI_2).rem_euclid(TAU);
    if a >= TAU {
        0.0
    } else {
        a
    }
}

/// Angle seen by particle `k`: `theta` for the first index, `theta - π/2`
/// (mod 2π) for the second, nothing for bystanders.
pub fn angle_for_particle(event: &CollisionEvent, k: usize) -> Option<f64> {
    event.participation(k).map(|p| p.angle)
}

pub(crate) fn uniform_angle<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let theta = rng.random::<f64>() * TAU;
    if theta >= TAU {
        0.0
    } else {
        theta
    }
}

pub(crate) fn exponential<R: Rng + ?Sized>(rate: f64, rng: &mut R) -> f64 {
    let exp = Exp::new(rate).expect("positive rate");
    loop {
        let dt = exp.sample(rng);
        if dt > 0.0 {
            return dt;
        }
    }
}

pub fn sample_event<R: Rng + ?Sized>(n_particles: usize, rng: &mut R) -> Result<CollisionEvent> {
    if n_particles < 2 {
        return invalid(format!(
            "collisions need at least 2 particles, got {n_particles}"
        ));
    }
    Ok(draw_event(n_particles, rng))
}

#[inline]
pub(crate) fn draw_event<R: Rng + ?Sized>(n: usize, rng: &mut R) -> CollisionEvent {
    let dt = exponential(n as f64 / 2.0, rng);
    let i = rng.random_range(0..n);
    let mut j = rng.random_range(0..n - 1);
    if j >= i {
        j += 1;
    }
    let theta = uniform_angle(rng);
    let first_offset = rng.random::<f64>();
    let second_offset = rng.random::<f64>();
    CollisionEvent {
        dt,
        i,
        j,
        theta,
        first_offset,
        second_offset,
    }
}

/// Ordered sequence of events for an `n`-particle system, tracking absolute time.
pub struct EventStream {
    n: usize,
    time: f64,
    rng: RngStream,
}

impl EventStream {
    pub fn new(n_particles: usize, start_time: f64, rng: RngStream) -> Result<Self> {
        if n_particles < 2 {
            return invalid(format!(
                "collisions need at least 2 particles, got {n_particles}"
            ));
        }
        Ok(Self {
            n: n_particles,
            time: start_time,
            rng,
        })
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    /// Next event together with its absolute time.
    pub fn next_event(&mut self) -> (f64, CollisionEvent) {
        let e = draw_event(self.n, &mut self.rng);
        self.time += e.dt;
        (self.time, e)
    }

    pub fn rng_mut(&mut self) -> &mut RngStream {
        &mut self.rng
    }
}

impl Iterator for EventStream {
    type Item = (f64, CollisionEvent);

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.next_event())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_single_particle() {
        let mut rng = RngStream::new(1, 0);
        assert!(sample_event(1, &mut rng).is_err());
        assert!(sample_event(0, &mut rng).is_err());
    }

    #[test]
    fn two_particles_only_admissible_pairs() {
        let mut rng = RngStream::new(3, 0);
        let mut counts = [0usize; 2];
        for _ in 0..20_000 {
            let e = sample_event(2, &mut rng).unwrap();
            match (e.i, e.j) {
                (0, 1) => counts[0] += 1,
                (1, 0) => counts[1] += 1,
                other => panic!("bad pair {other:?}"),
            }
        }
        let frac = counts[0] as f64 / 20_000.0;
        // binomial sd = 0.0035
        assert!((frac - 0.5).abs() < 0.015, "{frac}");
    }

    #[test]
    fn angle_identity_branch() {
        let e = CollisionEvent {
            dt: 1.0,
            i: 2,
            j: 5,
            theta: 0.0,
            first_offset: 0.5,
            second_offset: 0.5,
        };
        assert_eq!(angle_for_particle(&e, 2), Some(0.0));
        assert_eq!(angle_for_particle(&e, 0), None);
    }

    #[test]
    fn second_index_turns_sine_into_cosine() {
        let e = CollisionEvent {
            dt: 1.0,
            i: 0,
            j: 1,
            theta: FRAC_PI_2,
            first_offset: 0.5,
            second_offset: 0.5,
        };
        let a = angle_for_particle(&e, 1).unwrap();
        assert!(a.abs() < 1e-15);
        for theta in [0.1, 1.0, 2.5, 4.0, 6.2] {
            let e = CollisionEvent { theta, ..e };
            let a = angle_for_particle(&e, 1).unwrap();
            assert!((0.0..TAU).contains(&a));
            assert!((a.cos() - theta.sin()).abs() < 1e-12);
        }
    }

    #[test]
    fn participation_swaps_offsets() {
        let e = CollisionEvent {
            dt: 0.3,
            i: 4,
            j: 1,
            theta: 1.0,
            first_offset: 0.25,
            second_offset: 0.75,
        };
        let pi = e.participation(4).unwrap();
        assert_eq!((pi.partner, pi.partner_offset), (1, 0.75));
        let pj = e.participation(1).unwrap();
        assert_eq!((pj.partner, pj.partner_offset), (4, 0.25));
    }

    #[test]
    fn same_seed_and_stream_replays_exactly() {
        let a: Vec<_> = EventStream::new(7, 0.0, RngStream::new(9, 4))
            .unwrap()
            .take(500)
            .collect();
        let b: Vec<_> = EventStream::new(7, 0.0, RngStream::new(9, 4))
            .unwrap()
            .take(500)
            .collect();
        assert_eq!(a, b);
        let c: Vec<_> = EventStream::new(7, 0.0, RngStream::new(9, 5))
            .unwrap()
            .take(500)
            .collect();
        assert_ne!(a, c);
    }

    #[test]
    fn stream_key_separates_parts() {
        assert_ne!(stream_key(&[1, 2]), stream_key(&[2, 1]));
        assert_ne!(stream_key(&[0]), stream_key(&[0, 0]));
    }
}
