//! Discrepancies between an estimate and the ground truth.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimates::EstimatedConfig;
use crate::geometry::{distance, SourceGrid, Vec3};
use crate::state::SourceConfig;

pub fn delta_nd(est: &EstimatedConfig, truth: &SourceConfig) -> i64 {
    est.n as i64 - truth.len() as i64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocationError {
    /// Mean paired distance (m).
    pub value: f64,
    /// One side was empty, so only the count differs.
    pub cardinality_only: bool,
}

/// Minimum over injective pairings of the smaller set into the larger of the
/// mean paired distance, found by exhaustive enumeration.
pub fn delta_r_points(a: &[Vec3], b: &[Vec3]) -> LocationError {
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    if small.is_empty() {
        return LocationError {
            value: 0.0,
            cardinality_only: true,
        };
    }
    let mut used = vec![false; large.len()];
    let mut best = f64::INFINITY;
    search(small, large, 0, 0.0, &mut used, &mut best);
    LocationError {
        value: best / small.len() as f64,
        cardinality_only: false,
    }
}

fn search(small: &[Vec3], large: &[Vec3], i: usize, acc: f64, used: &mut [bool], best: &mut f64) {
    if i == small.len() {
        if acc < *best {
            *best = acc;
        }
        return;
    }
    for j in 0..large.len() {
        if !used[j] {
            used[j] = true;
            search(small, large, i + 1, acc + distance(&small[i], &large[j]), used, best);
            used[j] = false;
        }
    }
}

pub fn delta_r(est: &EstimatedConfig, truth: &SourceConfig, grid: &SourceGrid) -> Result<LocationError> {
    let true_pos = truth
        .cells()
        .map(|c| {
            if c < grid.len() {
                Ok(*grid.point(c))
            } else {
                Err(Error::CellOutOfRange { cell: c, n_cells: grid.len() })
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(delta_r_points(&est.positions(), &true_pos))
}
