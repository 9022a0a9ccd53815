//! Point estimates from a weighted ensemble: the posterior mode of the
//! number of dipoles, the local modes of the intensity measure conditioned
//! on that number, and the conditional mean moment at each mode.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{distance, SourceGrid, Vec3};
use crate::sampler::Ensemble;

pub const DEFAULT_PEAK_RADIUS: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatedSource {
    pub cell: usize,
    pub r: Vec3,
    /// Dipole moment (A·m).
    pub moment: Vec3,
    pub intensity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatedConfig {
    pub n: usize,
    pub sources: Vec<EstimatedSource>,
    /// Fewer intensity peaks than `n` were found.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub shortfall: bool,
}

impl EstimatedConfig {
    pub fn empty() -> Self {
        EstimatedConfig {
            n: 0,
            sources: Vec::new(),
            shortfall: false,
        }
    }

    pub fn positions(&self) -> Vec<Vec3> {
        self.sources.iter().map(|s| s.r).collect()
    }
}

/// `P(N_D = k | b)` for `k = 0..=max_dipoles`.
pub fn posterior_n_dipoles(ens: &Ensemble, max_dipoles: usize) -> Vec<f64> {
    let mut pmf = vec![0.0; max_dipoles + 1];
    for (p, lw) in ens.particles.iter().zip(&ens.log_weights) {
        let k = p.config.len();
        if k >= pmf.len() {
            pmf.resize(k + 1, 0.0);
        }
        pmf[k] += lw.exp();
    }
    pmf
}

/// Index of the largest entry; ties go to the smaller index.
pub fn mode(pmf: &[f64]) -> usize {
    let mut best = 0;
    for (k, &p) in pmf.iter().enumerate() {
        if p > pmf[best] {
            best = k;
        }
    }
    best
}

/// Per-cell posterior mass of a dipole among particles with exactly `n_hat`
/// dipoles.
pub fn intensity_map(ens: &Ensemble, n_hat: usize, n_cells: usize) -> Result<Vec<f64>> {
    let mut map = vec![0.0; n_cells];
    let mut any = false;
    for (p, lw) in ens.particles.iter().zip(&ens.log_weights) {
        if p.config.len() != n_hat {
            continue;
        }
        any = true;
        let w = lw.exp();
        for c in p.config.cells() {
            let slot = map.get_mut(c).ok_or(Error::CellOutOfRange {
                cell: c,
                n_cells,
            })?;
            *slot += w;
        }
    }
    if !any {
        return Err(Error::Inconsistent(format!(
            "no particle has {n_hat} dipoles"
        )));
    }
    Ok(map)
}

/// Cells whose intensity is positive and not exceeded within `peak_radius`,
/// thinned greedily (highest first, lower index on ties) so that kept cells
/// are more than `peak_radius` apart. Returns at most `n_hat` cells in
/// ascending order and whether fewer than `n_hat` were available.
pub fn extract_modes(
    intensity: &[f64],
    n_hat: usize,
    grid: &SourceGrid,
    peak_radius: f64,
) -> (Vec<usize>, bool) {
    let support: Vec<usize> = (0..intensity.len()).filter(|&c| intensity[c] > 0.0).collect();
    let mut peaks: Vec<usize> = support
        .iter()
        .copied()
        .filter(|&c| {
            support.iter().all(|&o| {
                intensity[o] <= intensity[c]
                    || distance(grid.point(o), grid.point(c)) > peak_radius
            })
        })
        .collect();
    peaks.sort_by(|&a, &b| intensity[b].total_cmp(&intensity[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::with_capacity(n_hat);
    for c in peaks {
        if kept.len() == n_hat {
            break;
        }
        if kept
            .iter()
            .all(|&k| distance(grid.point(k), grid.point(c)) > peak_radius)
        {
            kept.push(c);
        }
    }
    let shortfall = kept.len() < n_hat;
    kept.sort_unstable();
    (kept, shortfall)
}

/// Posterior mean moment at `cell` among particles with `n_hat` dipoles.
pub fn conditional_moment(ens: &Ensemble, n_hat: usize, cell: usize) -> Result<Vec3> {
    // deviations from the first contributing moment, so identical moments
    // reproduce exactly
    let mut reference: Option<Vec3> = None;
    let mut sum = [0.0; 3];
    let mut mass = 0.0;
    for (p, lw) in ens.particles.iter().zip(&ens.log_weights) {
        if p.config.len() != n_hat {
            continue;
        }
        if let Some(i) = p.config.position_of(cell) {
            let w = lw.exp();
            let m = p.config.dipoles()[i].moment();
            let r = *reference.get_or_insert(m);
            for k in 0..3 {
                sum[k] += w * (m[k] - r[k]);
            }
            mass += w;
        }
    }
    match reference {
        Some(r) if mass > 0.0 => Ok([0, 1, 2].map(|k| r[k] + sum[k] / mass)),
        _ => Err(Error::Inconsistent(format!("zero intensity at cell {cell}"))),
    }
}

pub fn point_estimate(
    ens: &Ensemble,
    grid: &SourceGrid,
    max_dipoles: usize,
    peak_radius: f64,
) -> Result<EstimatedConfig> {
    let n_hat = mode(&posterior_n_dipoles(ens, max_dipoles));
    if n_hat == 0 {
        return Ok(EstimatedConfig::empty());
    }
    let intensity = intensity_map(ens, n_hat, grid.len())?;
    let (cells, shortfall) = extract_modes(&intensity, n_hat, grid, peak_radius);
    let sources = cells
        .into_iter()
        .map(|cell| {
            Ok(EstimatedSource {
                cell,
                r: *grid.point(cell),
                moment: conditional_moment(ens, n_hat, cell)?,
                intensity: intensity[cell],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EstimatedConfig {
        n: n_hat,
        sources,
        shortfall,
    })
}
