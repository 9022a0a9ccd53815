//! Variable-dimension dipole configurations and their prior.

use std::f64::consts::{LN_10, PI};

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{SourceGrid, Vec3};

const TWO_PI: f64 = 2.0 * PI;

/// One current dipole: grid cell, orientation on the canonical half-sphere
/// `(z, phi)` and signed strength `q` in A·m.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dipole {
    pub cell: usize,
    pub z: f64,
    pub phi: f64,
    pub q: f64,
}

/// Unit vector with Cartesian components
/// `(sin(acos z) cos phi, sin(acos z) sin phi, z)`.
pub fn direction_vector(z: f64, phi: f64) -> Result<Vec3> {
    if !(0.0..=1.0).contains(&z) || !(0.0..TWO_PI).contains(&phi) {
        return Err(Error::InvalidParameter(format!(
            "orientation (z={z}, phi={phi}) outside [0,1] x [0,2pi)"
        )));
    }
    Ok(unit_from_angles(z, phi))
}

fn unit_from_angles(z: f64, phi: f64) -> Vec3 {
    let rho = ((1.0 - z) * (1.0 + z)).sqrt();
    [rho * phi.cos(), rho * phi.sin(), z]
}

impl Dipole {
    /// Builds a dipole from a direction (any non-zero vector) and strength,
    /// mapping `(u, q)` onto the canonical representative of `(±u, ±q)`.
    pub fn from_direction(cell: usize, u: &Vec3, q: f64) -> Result<Self> {
        let n = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::InvalidParameter(format!("degenerate direction {u:?}")));
        }
        let mut u = [u[0] / n, u[1] / n, u[2] / n];
        let mut q = q;
        if u[2] < 0.0 {
            u = [-u[0], -u[1], -u[2]];
            q = -q;
        }
        let mut phi = u[1].atan2(u[0]).rem_euclid(TWO_PI);
        if phi >= TWO_PI {
            phi = 0.0;
        }
        let z = u[2].clamp(0.0, 1.0);
        let mut d = Dipole { cell, z, phi, q };
        d.canonicalize();
        Ok(d)
    }

    /// Equator directions are kept with `phi` in `[0, pi)`.
    pub fn canonicalize(&mut self) {
        if self.z == 0.0 && self.phi >= PI {
            self.phi -= PI;
            self.q = -self.q;
        }
    }

    pub fn direction(&self) -> Vec3 {
        unit_from_angles(self.z, self.phi)
    }

    /// `q · u`, in A·m.
    pub fn moment(&self) -> Vec3 {
        let u = self.direction();
        [self.q * u[0], self.q * u[1], self.q * u[2]]
    }

    fn check(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.z) || !(0.0..TWO_PI).contains(&self.phi) {
            return Err(Error::InvalidSource(format!(
                "dipole at cell {} has orientation outside the half-sphere chart",
                self.cell
            )));
        }
        if self.z == 0.0 && self.phi >= PI {
            return Err(Error::InvalidSource(format!(
                "dipole at cell {} is not in canonical equatorial form",
                self.cell
            )));
        }
        if self.q == 0.0 || !self.q.is_finite() {
            return Err(Error::InvalidSource(format!(
                "dipole at cell {} has invalid strength {}",
                self.cell, self.q
            )));
        }
        Ok(())
    }
}

/// Unordered set of dipoles at pairwise distinct cells, stored in ascending
/// cell order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "RawSourceConfig")]
pub struct SourceConfig {
    dipoles: Vec<Dipole>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSourceConfig {
    dipoles: Vec<Dipole>,
}

impl TryFrom<RawSourceConfig> for SourceConfig {
    type Error = Error;

    fn try_from(raw: RawSourceConfig) -> Result<Self> {
        SourceConfig::new(raw.dipoles)
    }
}

impl SourceConfig {
    pub fn empty() -> Self {
        SourceConfig::default()
    }

    /// Validates and normalises a collection of dipoles.
    pub fn new(mut dipoles: Vec<Dipole>) -> Result<Self> {
        for d in &dipoles {
            d.check()?;
        }
        dipoles.sort_by_key(|d| d.cell);
        if let Some(w) = dipoles.windows(2).find(|w| w[0].cell == w[1].cell) {
            return Err(Error::InvalidSource(format!(
                "two dipoles share cell {}",
                w[0].cell
            )));
        }
        Ok(SourceConfig { dipoles })
    }

    pub fn len(&self) -> usize {
        self.dipoles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dipoles.is_empty()
    }

    pub fn dipoles(&self) -> &[Dipole] {
        &self.dipoles
    }

    pub fn cells(&self) -> impl Iterator<Item = usize> + '_ {
        self.dipoles.iter().map(|d| d.cell)
    }

    pub fn contains_cell(&self, cell: usize) -> bool {
        self.dipoles.binary_search_by_key(&cell, |d| d.cell).is_ok()
    }

    pub fn position_of(&self, cell: usize) -> Option<usize> {
        self.dipoles.binary_search_by_key(&cell, |d| d.cell).ok()
    }

    /// Inserts a dipole at an unoccupied cell, keeping the canonical order.
    pub fn with_added(&self, d: Dipole) -> Result<Self> {
        d.check()?;
        match self.dipoles.binary_search_by_key(&d.cell, |x| x.cell) {
            Ok(_) => Err(Error::InvalidSource(format!("cell {} already occupied", d.cell))),
            Err(pos) => {
                let mut dipoles = self.dipoles.clone();
                dipoles.insert(pos, d);
                Ok(SourceConfig { dipoles })
            }
        }
    }

    pub fn with_removed(&self, index: usize) -> Self {
        let mut dipoles = self.dipoles.clone();
        dipoles.remove(index);
        SourceConfig { dipoles }
    }

    /// Replaces dipole `index`; the new cell must not be held by another dipole.
    pub fn with_replaced(&self, index: usize, d: Dipole) -> Result<Self> {
        d.check()?;
        let mut dipoles = self.dipoles.clone();
        dipoles[index] = d;
        SourceConfig::new(dipoles)
    }

    pub fn max_cell(&self) -> Option<usize> {
        self.dipoles.last().map(|d| d.cell)
    }
}

/// Prior hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorParams {
    /// Poisson rate for the number of dipoles.
    pub rate: f64,
    /// Smallest admissible |q| (A·m).
    pub strength_scale: f64,
    /// |q| ranges over `strength_scale · [1, 10^decades]`.
    pub decades: f64,
    pub max_dipoles: usize,
}

impl Default for PriorParams {
    fn default() -> Self {
        PriorParams {
            rate: 0.3,
            strength_scale: 1e-10,
            decades: 3.0,
            max_dipoles: 10,
        }
    }
}

fn ln_factorial(n: usize) -> f64 {
    (1..=n).map(|k| (k as f64).ln()).sum()
}

impl PriorParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.rate > 0.0 && self.strength_scale > 0.0 && self.decades > 0.0) {
            return Err(Error::InvalidParameter(
                "prior rate, strength_scale and decades must be positive".into(),
            ));
        }
        if self.max_dipoles == 0 {
            return Err(Error::InvalidParameter("max_dipoles must be >= 1".into()));
        }
        Ok(())
    }

    pub fn validate_for(&self, grid: &SourceGrid) -> Result<()> {
        self.validate()?;
        if self.max_dipoles >= grid.len() {
            return Err(Error::InvalidParameter(format!(
                "max_dipoles {} must be below the number of cells {}",
                self.max_dipoles,
                grid.len()
            )));
        }
        Ok(())
    }

    /// Truncated Poisson pmf over `0..=max_dipoles`.
    pub fn count_pmf(&self) -> Vec<f64> {
        let log_terms: Vec<f64> = (0..=self.max_dipoles)
            .map(|k| k as f64 * self.rate.ln() - ln_factorial(k))
            .collect();
        let m = log_terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = log_terms.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = w.iter().sum();
        w.into_iter().map(|x| x / z).collect()
    }

    /// `ln Z` where `Z = sum_{k<=max} e^-rate rate^k / k!`.
    pub fn log_truncation(&self) -> f64 {
        let terms: Vec<f64> = (0..=self.max_dipoles)
            .map(|k| -self.rate + k as f64 * self.rate.ln() - ln_factorial(k))
            .collect();
        let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
    }

    pub fn max_strength(&self) -> f64 {
        self.strength_scale * 10f64.powf(self.decades)
    }

    pub fn strength_in_support(&self, q: f64) -> bool {
        let a = q.abs();
        a >= self.strength_scale && a <= self.max_strength()
    }

    /// Log density of the signed log-uniform strength law.
    pub fn log_strength_density(&self, q: f64) -> f64 {
        if !self.strength_in_support(q) {
            return f64::NEG_INFINITY;
        }
        -(2.0 * q.abs() * LN_10 * self.decades).ln()
    }

    /// Draws `±10^(decades·U)·strength_scale`.
    pub fn sample_strength<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let q = sign * 10f64.powf(self.decades * u) * self.strength_scale;
        // guard against rounding just outside the closed support
        q.clamp(-self.max_strength(), self.max_strength())
    }
}

/// Uniform orientation on the half-sphere, `(z, phi)`.
pub fn sample_orientation<R: Rng + ?Sized>(rng: &mut R) -> (f64, f64) {
    let z: f64 = rng.random();
    let phi: f64 = rng.random::<f64>() * TWO_PI;
    let phi = if phi >= TWO_PI { 0.0 } else { phi };
    if z == 0.0 && phi >= PI {
        (z, phi - PI)
    } else {
        (z, phi)
    }
}

/// Draws a fresh dipole at `cell` from the prior's orientation and strength laws.
pub fn sample_dipole_at<R: Rng + ?Sized>(rng: &mut R, prior: &PriorParams, cell: usize) -> Dipole {
    let (z, phi) = sample_orientation(rng);
    let q = prior.sample_strength(rng);
    let mut d = Dipole { cell, z, phi, q };
    d.canonicalize();
    d
}

pub fn sample_prior<R: Rng + ?Sized>(
    rng: &mut R,
    prior: &PriorParams,
    grid: &SourceGrid,
) -> SourceConfig {
    let pmf = prior.count_pmf();
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut n = prior.max_dipoles;
    for (k, p) in pmf.iter().enumerate() {
        acc += p;
        if u < acc {
            n = k;
            break;
        }
    }
    let cells = index::sample(rng, grid.len(), n).into_vec();
    let dipoles = cells
        .into_iter()
        .map(|c| sample_dipole_at(rng, prior, c))
        .collect();
    SourceConfig::new(dipoles).expect("prior draws satisfy configuration invariants")
}

/// Log prior of the equivalence class: truncated Poisson count, `N_D!`
/// times without-replacement uniform cells, uniform half-sphere orientation
/// and signed log-uniform strength.
pub fn log_prior(config: &SourceConfig, prior: &PriorParams, grid: &SourceGrid) -> Result<f64> {
    let n = config.len();
    if n > prior.max_dipoles {
        return Ok(f64::NEG_INFINITY);
    }
    if let Some(c) = config.max_cell() {
        if c >= grid.len() {
            return Err(Error::CellOutOfRange {
                cell: c,
                n_cells: grid.len(),
            });
        }
    }
    Ok(log_prior_unchecked(config, prior, grid.len()))
}

pub(crate) fn log_prior_unchecked(config: &SourceConfig, prior: &PriorParams, n_cells: usize) -> f64 {
    let n = config.len();
    if n > prior.max_dipoles {
        return f64::NEG_INFINITY;
    }
    // p(n) · n! = rate^n e^-rate / Z
    let mut lp = n as f64 * prior.rate.ln() - prior.rate - prior.log_truncation();
    for d in 1..=n {
        lp -= ((n_cells - (d - 1)) as f64).ln();
    }
    lp -= n as f64 * TWO_PI.ln();
    for d in config.dipoles() {
        lp += prior.log_strength_density(d.q);
    }
    lp
}
