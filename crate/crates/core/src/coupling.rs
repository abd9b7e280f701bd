//! Couplings between the particle system and nonlinear processes.
//!
//! `CoupledState` drives the particle system `V` and the nonlinear processes
//! `U` with one shared stream of collision atoms. At every atom each
//! participant `k` of `U` meets the value `F` that the optimal map for the
//! cost `(x² − y²)²` assigns to its partner: the partner's squared rank among
//! the other `N − 1` components of `U` selects a quantile cell of `f_t^(2)`,
//! and the continuous position of the atom inside the partner's cell selects
//! the level within that cell. Conditionally on the past, `F` is then exactly
//! `f_t`-distributed.
//!
//! `DecoupledState` adds the processes `Ũ_1..Ũ_n`, which share the atoms of
//! `U_1..U_n` except joint jumps inside the block, and receive independent
//! compensating atoms instead.

use std::io::Write;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, KacError, Result};
use crate::event_stream::{draw_event, exponential, uniform_angle, CollisionEvent, RngStream};
use crate::flow::{FlowModel, SquaredFlow};
use crate::kac_system::{mean_energy, SystemState};
use crate::stats::Estimate;
use crate::transport::transported_square;

/// Components kept in ascending order of `(x², index)`.
#[derive(Clone, Debug)]
struct SquaredIndex {
    keys: Vec<(f64, usize)>,
}

fn key_cmp(a: &(f64, usize), b: &(f64, usize)) -> std::cmp::Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

impl SquaredIndex {
    fn new(values: &[f64]) -> Self {
        let mut keys: Vec<(f64, usize)> = values.iter().enumerate().map(|(i, &x)| (x * x, i)).collect();
        keys.sort_by(key_cmp);
        Self { keys }
    }

    #[inline]
    fn position(&self, sq: f64, idx: usize) -> usize {
        self.keys
            .binary_search_by(|k| key_cmp(k, &(sq, idx)))
            .expect("indexed value present")
    }

    fn replace(&mut self, idx: usize, old_sq: f64, new_sq: f64) {
        let old = self.position(old_sq, idx);
        let ins = self.keys.partition_point(|k| key_cmp(k, &(new_sq, idx)).is_lt());
        let target = if ins > old { ins - 1 } else { ins };
        if target > old {
            self.keys[old..=target].rotate_left(1);
        } else if target < old {
            self.keys[target..=old].rotate_right(1);
        }
        self.keys[target] = (new_sq, idx);
    }
}

/// The nonlinear processes `U` together with their squared-rank index.
#[derive(Clone, Debug)]
pub struct NonlinearSystem {
    values: Vec<f64>,
    index: SquaredIndex,
}

impl NonlinearSystem {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return invalid("the coupled system needs at least 2 components");
        }
        if values.iter().any(|x| !x.is_finite()) {
            return invalid("values must be finite");
        }
        let index = SquaredIndex::new(&values);
        Ok(Self { values, index })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Zero-based squared rank of `partner` among all components but `excluded`.
    pub fn leave_one_out_rank(&self, partner: usize, excluded: usize) -> usize {
        let xp = self.values[partner];
        let xe = self.values[excluded];
        let pp = self.index.position(xp * xp, partner);
        let pe = self.index.position(xe * xe, excluded);
        pp - usize::from(pe < pp)
    }

    /// `F²` met by component `k` when its partner is `partner` at position
    /// `offset` inside the partner's cell.
    pub fn transported_square(
        &self,
        flow_sq: &SquaredFlow<'_>,
        k: usize,
        partner: usize,
        offset: f64,
    ) -> Result<f64> {
        let rank = self.leave_one_out_rank(partner, k);
        transported_square(flow_sq, rank, offset, self.values.len() - 1)
    }

    pub fn set(&mut self, k: usize, value: f64) {
        let old = self.values[k];
        self.index.replace(k, old * old, value * value);
        self.values[k] = value;
    }

    pub fn mean_square(&self) -> f64 {
        mean_energy(&self.values)
    }
}

#[inline]
fn jump(current: f64, f2: f64, angle_cos: f64) -> f64 {
    (current * current + f2).sqrt() * angle_cos
}

/// Particle system `V` and nonlinear processes `U` on one stream of atoms.
#[derive(Clone, Debug)]
pub struct CoupledState {
    v: SystemState,
    u: NonlinearSystem,
    flow: Arc<FlowModel>,
    first_jump: Vec<f64>,
}

impl CoupledState {
    pub fn new(v0: Vec<f64>, u0: Vec<f64>, flow: Arc<FlowModel>) -> Result<Self> {
        if v0.len() != u0.len() {
            return invalid(format!(
                "V and U must have equal sizes, got {} and {}",
                v0.len(),
                u0.len()
            ));
        }
        let n = v0.len();
        let v = SystemState::new(v0)?;
        let u = NonlinearSystem::new(u0)?;
        Ok(Self {
            v,
            u,
            flow,
            first_jump: vec![f64::INFINITY; n],
        })
    }

    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }

    pub fn time(&self) -> f64 {
        self.v.time()
    }

    pub fn v(&self) -> &SystemState {
        &self.v
    }

    pub fn u(&self) -> &NonlinearSystem {
        &self.u
    }

    pub fn flow(&self) -> &FlowModel {
        &self.flow
    }

    /// Time of the first jump of each `V_i` (infinite if none yet).
    pub fn first_jump_times(&self) -> &[f64] {
        &self.first_jump
    }

    /// Applies one atom, `event.dt` after the current time.
    pub fn step(&mut self, event: &CollisionEvent) -> Result<()> {
        let t = self.time() + event.dt;
        let slice = self.flow.at(t)?;
        let flow_sq = slice.squared();
        let (i, j) = (event.i, event.j);
        let pi = event.participation(i).expect("first index participates");
        let pj = event.participation(j).expect("second index participates");
        // both transports see U at t−
        let fi = self.u.transported_square(&flow_sq, i, pi.partner, pi.partner_offset)?;
        let fj = self.u.transported_square(&flow_sq, j, pj.partner, pj.partner_offset)?;
        let (ci, cj) = (pi.angle.cos(), pj.angle.cos());

        let vel = self.v.velocities();
        let r = vel[i].hypot(vel[j]);
        self.v.set_pair(i, j, r * ci, r * cj);
        self.v.set_time(t);

        let ui = jump(self.u.values[i], fi, ci);
        let uj = jump(self.u.values[j], fj, cj);
        self.u.set(i, ui);
        self.u.set(j, uj);

        for k in [i, j] {
            if self.first_jump[k].is_infinite() {
                self.first_jump[k] = t;
            }
        }
        Ok(())
    }

    /// `(1/N) Σ (V_i² − U_i²)²`.
    pub fn squared_gap(&self) -> f64 {
        let n = self.len() as f64;
        self.v
            .velocities()
            .iter()
            .zip(self.u.values())
            .map(|(a, b)| (a * a - b * b).powi(2))
            .sum::<f64>()
            / n
    }

    /// `(agreeing, jumped)`: particles that already jumped and whether `V_i`
    /// and `U_i` share a sign (zero counts as agreeing).
    pub fn sign_counts(&self) -> (usize, usize) {
        let t = self.time();
        let mut agree = 0;
        let mut jumped = 0;
        for (k, &tau) in self.first_jump.iter().enumerate() {
            if tau <= t {
                jumped += 1;
                if self.v.velocities()[k] * self.u.values[k] >= 0.0 {
                    agree += 1;
                }
            }
        }
        (agree, jumped)
    }

    fn observe(&self, t: f64) -> CoupledObservation {
        let (agree, jumped) = self.sign_counts();
        CoupledObservation {
            t,
            squared_gap: self.squared_gap(),
            mean_u2: self.u.mean_square(),
            energy_v: self.v.recomputed_energy(),
            sign_agree: agree,
            sign_jumped: jumped,
        }
    }
}

/// Diagnostics of one coupled replica at one observation time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoupledObservation {
    pub t: f64,
    /// `(1/N) Σ (V_i² − U_i²)²`.
    pub squared_gap: f64,
    /// `(1/N) Σ U_i²`.
    pub mean_u2: f64,
    /// `E_N` recomputed from the velocities.
    pub energy_v: f64,
    pub sign_agree: usize,
    pub sign_jumped: usize,
}

/// One replica of the coupled dynamics observed on a time grid.
#[derive(Clone, Debug, PartialEq)]
pub struct CoupledPath {
    pub observations: Vec<CoupledObservation>,
    pub first_jump_times: Vec<f64>,
}

fn check_grid(obs_times: &[f64]) -> Result<()> {
    if obs_times.is_empty() {
        return invalid("observation grid is empty");
    }
    if obs_times[0] < 0.0 || obs_times.windows(2).any(|w| !(w[1] > w[0])) {
        return invalid("observation times must be nonnegative and strictly ascending");
    }
    Ok(())
}

/// Default observation spacing of the coupled runs.
pub const DEFAULT_OBS_SPACING: f64 = 0.5;

/// Grid `0, spacing, 2·spacing, …` through `horizon`.
pub fn observation_grid(horizon: f64, spacing: f64) -> Vec<f64> {
    let steps = (horizon / spacing + 1e-9).floor() as usize;
    (0..=steps).map(|k| k as f64 * spacing).collect()
}

/// Evolves `(V, U)` from `(v0, u0)` and records diagnostics at `obs_times`.
pub fn run_coupled(
    v0: Vec<f64>,
    u0: Vec<f64>,
    flow: Arc<FlowModel>,
    obs_times: &[f64],
    rng: &mut RngStream,
) -> Result<CoupledPath> {
    check_grid(obs_times)?;
    let horizon = *obs_times.last().unwrap();
    if horizon > flow.horizon() {
        return Err(KacError::OutOfRange {
            t: horizon,
            horizon: flow.horizon(),
        });
    }
    let mut state = CoupledState::new(v0, u0, flow)?;
    let n = state.len();
    let mut observations = Vec::with_capacity(obs_times.len());
    let mut next_obs = 0;
    loop {
        let e = draw_event(n, rng);
        let t_event = state.time() + e.dt;
        while next_obs < obs_times.len() && obs_times[next_obs] < t_event {
            observations.push(state.observe(obs_times[next_obs]));
            next_obs += 1;
        }
        if next_obs == obs_times.len() {
            break;
        }
        state.step(&e)?;
    }
    Ok(CoupledPath {
        observations,
        first_jump_times: state.first_jump.clone(),
    })
}

/// Ensemble summary at one observation time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRow {
    pub t: f64,
    pub h_mean: f64,
    pub h_se: f64,
    pub cov_u2: f64,
    pub cov_se: f64,
    pub sign_agreement: f64,
    pub b_n: f64,
}

/// Across-replica diagnostics of the coupled dynamics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingDiagnostics {
    pub n_particles: usize,
    pub replicas: usize,
    pub rows: Vec<DiagnosticsRow>,
    /// First-jump times of every particle of every replica.
    pub first_jump_times: Vec<f64>,
}

pub const DIAGNOSTICS_CSV_HEADER: &str = "t,h_mean,h_se,cov_u2,cov_se,sign_agreement,b_n";

/// `cov(U_1², U_2²)` from the per-replica means `M = (1/N) Σ U_i²`.
///
/// Uses `E M² = (μ₄ + (N−1) E[U_1² U_2²]) / N` with the flow's exact
/// moments `μ₂`, `μ₄`, centred at `μ₂`:
/// `cov = (N · E(M − μ₂)² − (μ₄ − μ₂²)) / (N − 1)`.
pub fn covariance_from_means(mean_u2: &[f64], n: usize, mu2: f64, mu4: f64) -> Estimate {
    let nf = n as f64;
    let terms: Vec<f64> = mean_u2
        .iter()
        .map(|m| (nf * (m - mu2).powi(2) - (mu4 - mu2 * mu2)) / (nf - 1.0))
        .collect();
    Estimate::of(&terms)
}

impl CouplingDiagnostics {
    pub fn from_paths(paths: &[CoupledPath], flow: &FlowModel, n_particles: usize) -> Result<Self> {
        if paths.is_empty() {
            return invalid("no replicas to summarise");
        }
        let n_obs = paths[0].observations.len();
        let energy = flow.energy();
        let mut rows = Vec::with_capacity(n_obs);
        for k in 0..n_obs {
            let t = paths[0].observations[k].t;
            let hs: Vec<f64> = paths.iter().map(|p| p.observations[k].squared_gap).collect();
            let ms: Vec<f64> = paths.iter().map(|p| p.observations[k].mean_u2).collect();
            let slice = flow.at(t)?;
            let cov = covariance_from_means(&ms, n_particles, slice.moment(2.0), slice.moment(4.0));
            let (agree, jumped) = paths.iter().fold((0usize, 0usize), |(a, j), p| {
                (a + p.observations[k].sign_agree, j + p.observations[k].sign_jumped)
            });
            let b_n = paths
                .iter()
                .map(|p| (p.observations[k].energy_v - energy).powi(2))
                .sum::<f64>()
                / paths.len() as f64;
            let h = Estimate::of(&hs);
            rows.push(DiagnosticsRow {
                t,
                h_mean: h.mean,
                h_se: h.se,
                cov_u2: cov.mean,
                cov_se: cov.se,
                sign_agreement: if jumped == 0 {
                    f64::NAN
                } else {
                    agree as f64 / jumped as f64
                },
                b_n,
            });
        }
        let first_jump_times = paths
            .iter()
            .flat_map(|p| p.first_jump_times.iter().copied())
            .collect();
        Ok(Self {
            n_particles,
            replicas: paths.len(),
            rows,
            first_jump_times,
        })
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{DIAGNOSTICS_CSV_HEADER}")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.t, r.h_mean, r.h_se, r.cov_u2, r.cov_se, r.sign_agreement, r.b_n
            )?;
        }
        Ok(())
    }
}

/// How the initial pair `(V_0, U_0)` is drawn for ensemble runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoupledStart {
    /// `V_0 = U_0`, i.i.d. from `f_0`.
    Shared,
    /// `V_0` uniform on the Kac sphere of energy `ℰ`, `U_0` i.i.d. `f_0`, independent.
    KacSphere,
}

/// Runs `replicas` independent coupled replicas, replica `r` on `master.child(&[r])`.
pub fn run_coupled_paths(
    n_particles: usize,
    flow: Arc<FlowModel>,
    start: CoupledStart,
    obs_times: &[f64],
    replicas: usize,
    master: &RngStream,
) -> Result<Vec<CoupledPath>> {
    if replicas == 0 {
        return invalid("replicas must be positive");
    }
    (0..replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng = master.child(&[r as u64]);
            let slice0 = flow.at(0.0)?;
            let u0: Vec<f64> = (0..n_particles).map(|_| slice0.sample(&mut rng)).collect();
            let v0 = match start {
                CoupledStart::Shared => u0.clone(),
                CoupledStart::KacSphere => {
                    crate::kac_system::sample_kac_sphere(n_particles, flow.energy(), &mut rng)?
                }
            };
            run_coupled(v0, u0, Arc::clone(&flow), obs_times, &mut rng)
        })
        .collect()
}

/// [`run_coupled_paths`] summarised across replicas.
pub fn run_coupled_ensemble(
    n_particles: usize,
    flow: Arc<FlowModel>,
    start: CoupledStart,
    obs_times: &[f64],
    replicas: usize,
    master: &RngStream,
) -> Result<CouplingDiagnostics> {
    let paths = run_coupled_paths(n_particles, Arc::clone(&flow), start, obs_times, replicas, master)?;
    CouplingDiagnostics::from_paths(&paths, &flow, n_particles)
}

/// Nonlinear processes `U` alone (no particle system), stepped by atoms.
fn step_nonlinear(
    u: &mut NonlinearSystem,
    flow_sq: &SquaredFlow<'_>,
    event: &CollisionEvent,
) -> Result<(f64, f64, f64, f64)> {
    let pi = event.participation(event.i).expect("first index");
    let pj = event.participation(event.j).expect("second index");
    let fi = u.transported_square(flow_sq, event.i, pi.partner, pi.partner_offset)?;
    let fj = u.transported_square(flow_sq, event.j, pj.partner, pj.partner_offset)?;
    let (ci, cj) = (pi.angle.cos(), pj.angle.cos());
    let ui = jump(u.values[event.i], fi, ci);
    let uj = jump(u.values[event.j], fj, cj);
    u.set(event.i, ui);
    u.set(event.j, uj);
    Ok((fi, ci, fj, cj))
}

/// Across-replica estimate of `cov(U_1², U_2²)` at time `t`, with `U_0`
/// i.i.d. from the flow at time 0.
pub fn estimate_cov_u2(
    n_particles: usize,
    flow: Arc<FlowModel>,
    t: f64,
    replicas: usize,
    master: &RngStream,
) -> Result<Estimate> {
    if replicas < 100 {
        return invalid(format!("covariance estimation needs >= 100 replicas, got {replicas}"));
    }
    if n_particles < 2 {
        return invalid("covariance needs at least 2 particles");
    }
    if t > flow.horizon() {
        return Err(KacError::OutOfRange {
            t,
            horizon: flow.horizon(),
        });
    }
    let means: Vec<f64> = (0..replicas)
        .into_par_iter()
        .map(|r| -> Result<f64> {
            let mut rng = master.child(&[r as u64]);
            let slice0 = flow.at(0.0)?;
            let u0: Vec<f64> = (0..n_particles).map(|_| slice0.sample(&mut rng)).collect();
            let mut u = NonlinearSystem::new(u0)?;
            let mut time = 0.0;
            loop {
                let e = draw_event(n_particles, &mut rng);
                if time + e.dt > t {
                    break;
                }
                time += e.dt;
                let slice = flow.at(time)?;
                step_nonlinear(&mut u, &slice.squared(), &e)?;
            }
            Ok(u.mean_square())
        })
        .collect::<Result<_>>()?;
    let slice = flow.at(t)?;
    Ok(covariance_from_means(
        &means,
        n_particles,
        slice.moment(2.0),
        slice.moment(4.0),
    ))
}

/// `U` together with the decoupled processes `Ũ_1..Ũ_n`.
#[derive(Clone, Debug)]
pub struct DecoupledState {
    u: NonlinearSystem,
    u_tilde: Vec<f64>,
    n: usize,
    flow: Arc<FlowModel>,
    aux_rng: RngStream,
    time: f64,
    compensation_rate: f64,
    next_compensation: f64,
    u_jumps: u64,
    shared_jumps: u64,
    compensations: u64,
}

impl DecoupledState {
    /// `Ũ_i` starts at `U_{i,0}` for `i < n`. Compensating atoms for each
    /// `Ũ_i` arrive at rate `(n−1)/(2(N−1))`, the intensity of the
    /// suppressed in-block atoms.
    pub fn new(u0: Vec<f64>, n: usize, flow: Arc<FlowModel>, aux_rng: RngStream) -> Result<Self> {
        let big_n = u0.len();
        if n == 0 || n > big_n {
            return invalid(format!("need 1 <= n <= N, got n = {n}, N = {big_n}"));
        }
        let u = NonlinearSystem::new(u0)?;
        let u_tilde = u.values[..n].to_vec();
        let compensation_rate = n as f64 * (n - 1) as f64 / (2.0 * (big_n - 1) as f64);
        let mut state = Self {
            u,
            u_tilde,
            n,
            flow,
            aux_rng,
            time: 0.0,
            compensation_rate,
            next_compensation: f64::INFINITY,
            u_jumps: 0,
            shared_jumps: 0,
            compensations: 0,
        };
        state.next_compensation = state.draw_compensation_gap();
        Ok(state)
    }

    fn draw_compensation_gap(&mut self) -> f64 {
        if self.compensation_rate > 0.0 {
            self.time + exponential(self.compensation_rate, &mut self.aux_rng)
        } else {
            f64::INFINITY
        }
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn u(&self) -> &NonlinearSystem {
        &self.u
    }

    pub fn u_tilde(&self) -> &[f64] {
        &self.u_tilde
    }

    pub fn block_size(&self) -> usize {
        self.n
    }

    /// Jumps of `U_1..U_n` so far, and how many of them `Ũ` shared.
    pub fn jump_counts(&self) -> (u64, u64) {
        (self.u_jumps, self.shared_jumps)
    }

    pub fn compensations(&self) -> u64 {
        self.compensations
    }

    /// `(1/n) Σ_{i<n} (U_i² − Ũ_i²)²`.
    pub fn gap(&self) -> f64 {
        self.u_tilde
            .iter()
            .zip(&self.u.values)
            .map(|(a, b)| (a * a - b * b).powi(2))
            .sum::<f64>()
            / self.n as f64
    }

    fn compensate(&mut self, t: f64) -> Result<()> {
        let n = self.n;
        let k = self.aux_rng.random_range(0..n);
        let mut partner = self.aux_rng.random_range(0..n - 1);
        if partner >= k {
            partner += 1;
        }
        let offset: f64 = self.aux_rng.random();
        let angle = uniform_angle(&mut self.aux_rng);
        let slice = self.flow.at(t)?;
        let f2 = self.u.transported_square(&slice.squared(), k, partner, offset)?;
        self.u_tilde[k] = jump(self.u_tilde[k], f2, angle.cos());
        self.compensations += 1;
        Ok(())
    }

    /// Applies every compensating atom up to and including `t`.
    pub fn compensate_until(&mut self, t: f64) -> Result<()> {
        while self.next_compensation <= t {
            let tc = self.next_compensation;
            self.time = tc;
            self.compensate(tc)?;
            self.next_compensation = self.draw_compensation_gap();
        }
        Ok(())
    }

    /// Applies one atom of the shared stream, `event.dt` after the current time.
    pub fn step(&mut self, event: &CollisionEvent) -> Result<()> {
        let t = self.time + event.dt;
        self.compensate_until(t)?;
        let slice = self.flow.at(t)?;
        let flow_sq = slice.squared();
        let (fi, ci, fj, cj) = step_nonlinear(&mut self.u, &flow_sq, event)?;
        let n = self.n;
        if event.i < n {
            self.u_tilde[event.i] = jump(self.u_tilde[event.i], fi, ci);
            self.u_jumps += 1;
            self.shared_jumps += 1;
        }
        if event.j < n {
            self.u_jumps += 1;
            // joint in-block atoms are withheld from the second index
            if event.i >= n {
                self.u_tilde[event.j] = jump(self.u_tilde[event.j], fj, cj);
                self.shared_jumps += 1;
            }
        }
        self.time = t;
        Ok(())
    }

    /// Runs the shared stream `events` and the compensating atoms up to `horizon`.
    pub fn advance<R: Rng + ?Sized>(&mut self, horizon: f64, events: &mut R) -> Result<()> {
        if horizon < self.time {
            return invalid(format!("horizon {horizon} precedes time {}", self.time));
        }
        let big_n = self.u.len();
        let mut clock = self.time;
        loop {
            let e = draw_event(big_n, events);
            if clock + e.dt > horizon {
                break;
            }
            clock += e.dt;
            // compensations may have moved `time` past the previous atom
            let e = CollisionEvent {
                dt: clock - self.time,
                ..e
            };
            self.step(&e)?;
            self.time = clock;
        }
        self.compensate_until(horizon)?;
        self.time = horizon;
        Ok(())
    }
}

/// Decoupling statistics at one time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecouplingEstimate {
    pub n: usize,
    pub n_particles: usize,
    pub t: f64,
    pub replicas: usize,
    /// `E (U_i² − Ũ_i²)²` averaged over `i < n`.
    pub gap: Estimate,
    /// Fraction of `U_1..U_n` jumps shared by `Ũ`.
    pub shared_fraction: Estimate,
    /// `cov(Ũ_1², Ũ_2²)` (NaN when `n = 1`).
    pub tilde_cov: Estimate,
}

/// One decoupled replica: `(gap, u_jumps, shared, Ũ values, U values)` at `t`.
pub struct DecoupledSample {
    pub gap: f64,
    pub u_jumps: u64,
    pub shared_jumps: u64,
    pub u_tilde: Vec<f64>,
    pub u: Vec<f64>,
}

pub fn run_decoupled(
    n: usize,
    n_particles: usize,
    flow: Arc<FlowModel>,
    t: f64,
    rng: &mut RngStream,
) -> Result<DecoupledSample> {
    let slice0 = flow.at(0.0)?;
    let u0: Vec<f64> = (0..n_particles).map(|_| slice0.sample(rng)).collect();
    let aux = rng.child(&[0xa0c]);
    let mut state = DecoupledState::new(u0, n, flow, aux)?;
    state.advance(t, rng)?;
    Ok(DecoupledSample {
        gap: state.gap(),
        u_jumps: state.u_jumps,
        shared_jumps: state.shared_jumps,
        u_tilde: state.u_tilde.clone(),
        u: state.u.values[..n].to_vec(),
    })
}

pub fn estimate_decoupling_gap(
    n: usize,
    n_particles: usize,
    flow: Arc<FlowModel>,
    t: f64,
    replicas: usize,
    master: &RngStream,
) -> Result<DecouplingEstimate> {
    if n == 0 || n > n_particles {
        return invalid(format!("need 1 <= n <= N, got n = {n}, N = {n_particles}"));
    }
    if replicas < 2 {
        return invalid("need at least 2 replicas");
    }
    let samples: Vec<DecoupledSample> = (0..replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng = master.child(&[r as u64]);
            run_decoupled(n, n_particles, Arc::clone(&flow), t, &mut rng)
        })
        .collect::<Result<_>>()?;
    let gaps: Vec<f64> = samples.iter().map(|s| s.gap).collect();
    let (jumps, shared) = samples
        .iter()
        .fold((0u64, 0u64), |(j, s), x| (j + x.u_jumps, s + x.shared_jumps));
    let frac = if jumps == 0 { f64::NAN } else { shared as f64 / jumps as f64 };
    let shared_fraction = Estimate {
        mean: frac,
        se: (frac * (1.0 - frac) / jumps as f64).sqrt(),
    };
    let tilde_cov = if n >= 2 {
        let mu2 = flow.moment(t, 2.0)?;
        let prods: Vec<f64> = samples
            .iter()
            .map(|s| s.u_tilde[0].powi(2) * s.u_tilde[1].powi(2) - mu2 * mu2)
            .collect();
        Estimate::of(&prods)
    } else {
        Estimate {
            mean: f64::NAN,
            se: f64::NAN,
        }
    };
    Ok(DecouplingEstimate {
        n,
        n_particles,
        t,
        replicas,
        gap: Estimate::of(&gaps),
        shared_fraction,
        tilde_cov,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::stationary_gaussian;

    fn gaussian() -> Arc<FlowModel> {
        Arc::new(stationary_gaussian(1.0).unwrap())
    }

    #[test]
    fn squared_index_tracks_updates() {
        let mut rng = RngStream::new(1, 0);
        let vals: Vec<f64> = (0..40).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let mut sys = NonlinearSystem::new(vals).unwrap();
        for _ in 0..2000 {
            let k = rng.random_range(0..40);
            let v = if rng.random::<f64>() < 0.1 {
                sys.values[rng.random_range(0..40)]
            } else {
                rng.random::<f64>() * 4.0 - 2.0
            };
            sys.set(k, v);
            let fresh = SquaredIndex::new(&sys.values);
            assert_eq!(fresh.keys, sys.index.keys);
        }
    }

    #[test]
    fn leave_one_out_ranks_match_brute_force() {
        let vals = vec![0.5, -2.0, 1.0, -0.5, 0.1, 1.0];
        let sys = NonlinearSystem::new(vals.clone()).unwrap();
        for excluded in 0..vals.len() {
            let others: Vec<usize> = (0..vals.len()).filter(|&j| j != excluded).collect();
            let mut order = others.clone();
            order.sort_by(|&a, &b| (vals[a] * vals[a]).total_cmp(&(vals[b] * vals[b])).then(a.cmp(&b)));
            for (rank, &p) in order.iter().enumerate() {
                assert_eq!(sys.leave_one_out_rank(p, excluded), rank);
            }
        }
    }

    #[test]
    fn signs_agree_after_joint_jumps() {
        let flow = gaussian();
        let mut rng = RngStream::new(3, 0);
        let v0: Vec<f64> = (0..20).map(|_| flow.sample(0.0, &mut rng).unwrap()).collect();
        let u0: Vec<f64> = (0..20).map(|_| flow.sample(0.0, &mut rng).unwrap()).collect();
        let mut st = CoupledState::new(v0, u0, flow).unwrap();
        for _ in 0..2000 {
            let e = draw_event(20, &mut rng);
            let (ui, uj) = (st.u.values[e.i], st.u.values[e.j]);
            st.step(&e).unwrap();
            for (k, before) in [(e.i, ui), (e.j, uj)] {
                let c = e.participation(k).unwrap().angle.cos();
                let (v, u) = (st.v.velocities()[k], st.u.values[k]);
                assert!(v * c >= 0.0 && u * c >= 0.0);
                assert!(u.abs() >= 0.0 && u.abs() <= (before * before + 100.0).sqrt());
            }
        }
        let (agree, jumped) = st.sign_counts();
        assert_eq!(agree, jumped);
        let e0 = st.v.energy();
        assert!(((st.v.recomputed_energy() - e0) / e0).abs() < 1e-9);
    }

    #[test]
    fn decoupled_single_block_is_path_identical() {
        let flow = gaussian();
        let mut rng = RngStream::new(7, 0);
        let u0: Vec<f64> = (0..30).map(|_| flow.sample(0.0, &mut rng).unwrap()).collect();
        let mut st = DecoupledState::new(u0, 1, flow, RngStream::new(7, 1)).unwrap();
        for _ in 0..3000 {
            let e = draw_event(30, &mut rng);
            st.step(&e).unwrap();
            assert_eq!(st.u_tilde[0], st.u.values[0]);
        }
        assert_eq!(st.compensations(), 0);
        let (j, s) = st.jump_counts();
        assert_eq!(j, s);
    }

    #[test]
    fn decoupled_gap_zero_at_start() {
        let est = estimate_decoupling_gap(5, 50, gaussian(), 0.0, 10, &RngStream::new(1, 1)).unwrap();
        assert_eq!(est.gap.mean, 0.0);
        let est = estimate_decoupling_gap(1, 50, gaussian(), 3.0, 10, &RngStream::new(1, 1)).unwrap();
        assert_eq!(est.gap.mean, 0.0);
        assert!(estimate_decoupling_gap(0, 50, gaussian(), 3.0, 10, &RngStream::new(1, 1)).is_err());
        assert!(estimate_decoupling_gap(51, 50, gaussian(), 3.0, 10, &RngStream::new(1, 1)).is_err());
    }

    #[test]
    fn covariance_estimator_needs_replicas() {
        assert!(estimate_cov_u2(10, gaussian(), 1.0, 50, &RngStream::new(0, 0)).is_err());
    }

    #[test]
    fn diagnostics_csv_layout() {
        let flow = gaussian();
        let grid = observation_grid(1.0, 0.5);
        assert_eq!(grid, vec![0.0, 0.5, 1.0]);
        let d = run_coupled_ensemble(8, flow, CoupledStart::Shared, &grid, 4, &RngStream::new(2, 0)).unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), DIAGNOSTICS_CSV_HEADER);
        assert_eq!(lines.count(), 3);
        assert_eq!(d.rows[0].h_mean, 0.0);
        assert_eq!(d.first_jump_times.len(), 32);
    }
}
