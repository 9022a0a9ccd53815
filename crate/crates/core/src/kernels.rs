//! Markov kernels leaving the tempered posterior invariant: a reversible-jump
//! birth/death step followed by location, orientation and strength
//! Metropolis–Hastings updates of every dipole.
//!
//! # Birth/death acceptance
//!
//! Let `x` hold `n` dipoles on `N_C` cells. A birth picks one of the
//! `N_C - n` free cells uniformly and draws `(z, phi, q)` from the prior
//! factors `g = p(z) p(phi) p(q)`; the reverse death picks one of the `n + 1`
//! dipoles uniformly. The prior of a configuration is
//! `p(n) n! prod_d 1/(N_C - d + 1) prod_d g_d`, so
//!
//! ```text
//! pi(x') / pi(x) = [rate / (n + 1)] · [(n + 1) / (N_C - n)] · g_new · L^f ratio
//! A_birth       = pi(x')/pi(x) · [P_death / (n + 1)] / [P_birth · g_new / (N_C - n)]
//!               = rate / (n + 1) · P_death / P_birth · exp(f · Δ log L)
//! ```
//!
//! The truncation constant of the Poisson cancels. Death uses the reciprocal
//! expression. Births at `max_dipoles` and deaths at zero dipoles are proposed
//! and rejected, which keeps `P_birth`/`P_death` state independent.
//!
//! The code evaluates the ratio as a log-target difference plus explicit
//! proposal densities rather than through the collapsed form above; unit tests
//! pin the two together.

use std::cell::RefCell;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{LeadField, SourceGrid};
use crate::likelihood::{gaussian_log_density, predict_into};
use crate::state::{log_prior_unchecked, sample_dipole_at, Dipole, PriorParams, SourceConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoveParams {
    pub p_birth: f64,
    pub p_death: f64,
    /// Radius of the location-proposal neighbourhood (m).
    pub neighbor_radius: f64,
    /// Width of the Gaussian location-proposal weights (m).
    pub loc_gauss_sd: f64,
    /// Per-component sd of the Cartesian orientation perturbation.
    pub dir_sd: f64,
    /// Strength proposal sd as a fraction of |q|.
    pub strength_sd_factor: f64,
}

impl Default for MoveParams {
    fn default() -> Self {
        MoveParams {
            p_birth: 1.0 / 3.0,
            p_death: 1.0 / 20.0,
            neighbor_radius: 0.01,
            loc_gauss_sd: 0.005,
            dir_sd: 0.2,
            strength_sd_factor: 1.0 / 6.0,
        }
    }
}

impl MoveParams {
    pub fn validate(&self) -> Result<()> {
        let probs_ok = self.p_birth >= 0.0
            && self.p_death >= 0.0
            && self.p_birth + self.p_death <= 1.0;
        let scales_ok = self.neighbor_radius > 0.0
            && self.loc_gauss_sd > 0.0
            && self.dir_sd > 0.0
            && self.strength_sd_factor > 0.0;
        if !probs_ok || !scales_ok {
            return Err(Error::InvalidParameter(format!(
                "invalid move parameters {self:?}"
            )));
        }
        Ok(())
    }
}

/// The tempered log target `log p(x) + f · log L(b | x)`.
pub trait TargetEvaluator {
    fn exponent(&self) -> f64;
    fn log_prior(&self, config: &SourceConfig) -> f64;
    fn log_likelihood(&self, config: &SourceConfig) -> f64;

    fn log_target(&self, config: &SourceConfig) -> f64 {
        combine(self.log_prior(config), self.log_likelihood(config), self.exponent())
    }
}

fn combine(log_prior: f64, log_likelihood: f64, f: f64) -> f64 {
    if log_prior == f64::NEG_INFINITY {
        f64::NEG_INFINITY
    } else if f == 0.0 {
        log_prior
    } else {
        log_prior + f * log_likelihood
    }
}

/// A configuration together with its cached prior and likelihood terms.
#[derive(Debug, Clone, PartialEq)]
pub struct Particle {
    pub config: SourceConfig,
    pub log_prior: f64,
    pub log_likelihood: f64,
}

impl Particle {
    pub fn new<T: TargetEvaluator + ?Sized>(config: SourceConfig, target: &T) -> Self {
        let log_prior = target.log_prior(&config);
        let log_likelihood = target.log_likelihood(&config);
        Particle {
            config,
            log_prior,
            log_likelihood,
        }
    }

    pub fn log_target(&self, f: f64) -> f64 {
        combine(self.log_prior, self.log_likelihood, f)
    }
}

thread_local! {
    static SCRATCH: RefCell<Vec<f64>> = const { RefCell::new(Vec::new()) };
}

/// Posterior for a measured topography, tempered by `exponent`.
#[derive(Debug, Clone, Copy)]
pub struct PosteriorTarget<'a> {
    pub data: &'a [f64],
    pub leadfield: &'a LeadField,
    pub sigma: f64,
    pub prior: &'a PriorParams,
    pub exponent: f64,
}

impl TargetEvaluator for PosteriorTarget<'_> {
    fn exponent(&self) -> f64 {
        self.exponent
    }

    fn log_prior(&self, config: &SourceConfig) -> f64 {
        log_prior_unchecked(config, self.prior, self.leadfield.n_cells())
    }

    fn log_likelihood(&self, config: &SourceConfig) -> f64 {
        SCRATCH.with(|buf| {
            let mut buf = buf.borrow_mut();
            buf.resize(self.leadfield.n_sensors(), 0.0);
            predict_into(config, self.leadfield, &mut buf);
            gaussian_log_density(self.data, &buf, self.sigma)
        })
    }
}

/// Which branch of the birth/death kernel fired.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Jump {
    None,
    Birth { accepted: bool },
    Death { accepted: bool },
}

fn metropolis<R: Rng + ?Sized>(rng: &mut R, log_ratio: f64) -> bool {
    let u: f64 = rng.random();
    log_ratio >= 0.0 || u < log_ratio.exp()
}

fn orientation_density_log() -> f64 {
    // uniform z on [0,1] and phi on [0, 2pi)
    -(2.0 * PI).ln()
}

/// Log acceptance ratio for adding `born` to `from` (giving `to`).
pub fn birth_log_ratio(
    from: &Particle,
    to: &Particle,
    born: &Dipole,
    n_cells: usize,
    f: f64,
    prior: &PriorParams,
    params: &MoveParams,
) -> f64 {
    let n = from.config.len();
    let forward = params.p_birth.ln() - ((n_cells - n) as f64).ln()
        + orientation_density_log()
        + prior.log_strength_density(born.q);
    let reverse = params.p_death.ln() - ((n + 1) as f64).ln();
    to.log_target(f) - from.log_target(f) + reverse - forward
}

/// Log acceptance ratio for deleting `removed` from `from` (giving `to`).
pub fn death_log_ratio(
    from: &Particle,
    to: &Particle,
    removed: &Dipole,
    n_cells: usize,
    f: f64,
    prior: &PriorParams,
    params: &MoveParams,
) -> f64 {
    let n = from.config.len();
    let forward = params.p_death.ln() - (n as f64).ln();
    let reverse = params.p_birth.ln() - ((n_cells - (n - 1)) as f64).ln()
        + orientation_density_log()
        + prior.log_strength_density(removed.q);
    to.log_target(f) - from.log_target(f) + reverse - forward
}

/// The `k`-th cell (ascending) not held by any dipole of `config`.
fn kth_free_cell(config: &SourceConfig, mut k: usize) -> usize {
    for c in config.cells() {
        if k < c {
            break;
        }
        k += 1;
    }
    k
}

pub fn birth_death_move<R, T>(
    rng: &mut R,
    particle: &mut Particle,
    target: &T,
    n_cells: usize,
    prior: &PriorParams,
    params: &MoveParams,
) -> Jump
where
    R: Rng + ?Sized,
    T: TargetEvaluator + ?Sized,
{
    let f = target.exponent();
    let u: f64 = rng.random();
    let n = particle.config.len();
    if u < params.p_birth {
        if n >= prior.max_dipoles || n >= n_cells {
            return Jump::Birth { accepted: false };
        }
        let cell = kth_free_cell(&particle.config, rng.random_range(0..n_cells - n));
        let born = sample_dipole_at(rng, prior, cell);
        let config = particle
            .config
            .with_added(born)
            .expect("birth cell is free");
        let proposal = Particle::new(config, target);
        let ratio = birth_log_ratio(particle, &proposal, &born, n_cells, f, prior, params);
        let accepted = metropolis(rng, ratio);
        if accepted {
            *particle = proposal;
        }
        Jump::Birth { accepted }
    } else if u < params.p_birth + params.p_death {
        if n == 0 {
            return Jump::Death { accepted: false };
        }
        let idx = rng.random_range(0..n);
        let removed = particle.config.dipoles()[idx];
        let proposal = Particle::new(particle.config.with_removed(idx), target);
        let ratio = death_log_ratio(particle, &proposal, &removed, n_cells, f, prior, params);
        let accepted = metropolis(rng, ratio);
        if accepted {
            *particle = proposal;
        }
        Jump::Death { accepted }
    } else {
        Jump::None
    }
}

/// Candidate cells and weights for moving the dipole at `cell`, skipping
/// cells held by other dipoles.
fn location_candidates<'g>(
    grid: &'g SourceGrid,
    config: &SourceConfig,
    cell: usize,
) -> impl Iterator<Item = (usize, f64)> + 'g {
    let occupied: Vec<usize> = config.cells().filter(|&c| c != cell).collect();
    let nb = grid.neighbors(cell);
    nb.cells
        .iter()
        .copied()
        .zip(nb.weights.iter().copied())
        .filter(move |(c, _)| occupied.binary_search(c).is_err())
}

/// Moves dipole `index` to a neighbouring cell. Returns the dipole's index
/// after the move (storage order follows cells) and whether it was accepted.
pub fn location_move<R, T>(
    rng: &mut R,
    particle: &mut Particle,
    index: usize,
    target: &T,
    grid: &SourceGrid,
) -> (usize, bool)
where
    R: Rng + ?Sized,
    T: TargetEvaluator + ?Sized,
{
    let f = target.exponent();
    let current = particle.config.dipoles()[index];
    let cand: Vec<(usize, f64)> = location_candidates(grid, &particle.config, current.cell).collect();
    if cand.is_empty() {
        return (index, false);
    }
    let z_fwd: f64 = cand.iter().map(|(_, w)| w).sum();
    let mut x = rng.random::<f64>() * z_fwd;
    let mut new_cell = cand[cand.len() - 1].0;
    for &(c, w) in &cand {
        if x < w {
            new_cell = c;
            break;
        }
        x -= w;
    }
    let moved = Dipole {
        cell: new_cell,
        ..current
    };
    let config = particle
        .config
        .with_replaced(index, moved)
        .expect("candidate cell is free");
    let z_rev: f64 = location_candidates(grid, &config, new_cell).map(|(_, w)| w).sum();
    let proposal = Particle::new(config, target);
    let ratio = proposal.log_target(f) - particle.log_target(f) + z_fwd.ln() - z_rev.ln();
    if metropolis(rng, ratio) {
        *particle = proposal;
        let idx = particle.config.position_of(new_cell).expect("moved dipole present");
        (idx, true)
    } else {
        (index, false)
    }
}

pub fn orientation_move<R, T>(
    rng: &mut R,
    particle: &mut Particle,
    index: usize,
    target: &T,
    params: &MoveParams,
) -> bool
where
    R: Rng + ?Sized,
    T: TargetEvaluator + ?Sized,
{
    let f = target.exponent();
    let current = particle.config.dipoles()[index];
    let u = current.direction();
    let v = loop {
        let e: [f64; 3] = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let v = [
            u[0] + params.dir_sd * e[0],
            u[1] + params.dir_sd * e[1],
            u[2] + params.dir_sd * e[2],
        ];
        if (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt() > 1e-12 {
            break v;
        }
    };
    let rotated = Dipole::from_direction(current.cell, &v, current.q).expect("non-degenerate");
    let config = particle
        .config
        .with_replaced(index, rotated)
        .expect("cell unchanged");
    let proposal = Particle::new(config, target);
    let ratio = proposal.log_target(f) - particle.log_target(f);
    let accepted = metropolis(rng, ratio);
    if accepted {
        *particle = proposal;
    }
    accepted
}

fn log_normal_density(x: f64, mean: f64, sd: f64) -> f64 {
    -sd.ln() - (x - mean) * (x - mean) / (2.0 * sd * sd)
}

/// Hastings correction `log N(q; q', |q'|s) - log N(q'; q, |q|s)`.
pub fn strength_proposal_log_ratio(q: f64, q_new: f64, sd_factor: f64) -> f64 {
    log_normal_density(q, q_new, q_new.abs() * sd_factor)
        - log_normal_density(q_new, q, q.abs() * sd_factor)
}

pub fn strength_move<R, T>(
    rng: &mut R,
    particle: &mut Particle,
    index: usize,
    target: &T,
    params: &MoveParams,
) -> bool
where
    R: Rng + ?Sized,
    T: TargetEvaluator + ?Sized,
{
    let f = target.exponent();
    let current = particle.config.dipoles()[index];
    let e: f64 = StandardNormal.sample(rng);
    let q_new = current.q + current.q.abs() * params.strength_sd_factor * e;
    if q_new == 0.0 || q_new.signum() != current.q.signum() || !q_new.is_finite() {
        // sign crossings are rejected in both directions
        let _: f64 = rng.random();
        return false;
    }
    let config = particle
        .config
        .with_replaced(index, Dipole { q: q_new, ..current })
        .expect("cell unchanged");
    let proposal = Particle::new(config, target);
    let ratio = proposal.log_target(f) - particle.log_target(f)
        + strength_proposal_log_ratio(current.q, q_new, params.strength_sd_factor);
    let accepted = metropolis(rng, ratio);
    if accepted {
        *particle = proposal;
    }
    accepted
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SweepStats {
    pub jump: Option<Jump>,
    pub moves_attempted: usize,
    pub moves_accepted: usize,
}

/// One birth/death step, then location, orientation and strength updates for
/// each dipole, visiting dipoles in a uniformly random order. Dipoles carry no
/// labels, so a visiting order derived from the state (say by cell index)
/// would make the per-dipole pass depend on where earlier moves landed and
/// break invariance.
pub fn full_sweep<R, T>(
    rng: &mut R,
    particle: &mut Particle,
    target: &T,
    grid: &SourceGrid,
    prior: &PriorParams,
    params: &MoveParams,
) -> SweepStats
where
    R: Rng + ?Sized,
    T: TargetEvaluator + ?Sized,
{
    let jump = birth_death_move(rng, particle, target, grid.len(), prior, params);
    let mut stats = SweepStats {
        jump: Some(jump),
        ..Default::default()
    };
    let mut start_cells: Vec<usize> = particle.config.cells().collect();
    start_cells.shuffle(rng);
    for cell in start_cells {
        let index = particle
            .config
            .position_of(cell)
            .expect("unprocessed dipoles keep their cells");
        let (index, a) = location_move(rng, particle, index, target, grid);
        let b = orientation_move(rng, particle, index, target, params);
        let c = strength_move(rng, particle, index, target, params);
        stats.moves_attempted += 3;
        stats.moves_accepted += a as usize + b as usize + c as usize;
    }
    stats
}
