//! Small instances and brute-force references shared by integration tests.
#![allow(dead_code)]

use std::collections::HashMap;
use std::f64::consts::PI;
use std::num::NonZeroUsize;

use dipole_asmc::geometry::{build_sensor_array, compute_leadfield};
use dipole_asmc::kernels::{PosteriorTarget, TargetEvaluator};
use dipole_asmc::likelihood::predict_field;
use dipole_asmc::sampler::History;
use dipole_asmc::state::sample_prior;
use dipole_asmc::{AdaptConfig, Dipole, Ensemble, Execution, LeadField, PriorParams, SourceConfig, SourceGrid};
use gauss_quad::legendre::GaussLegendre;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

pub struct Tiny {
    pub grid: SourceGrid,
    pub lf: LeadField,
    pub prior: PriorParams,
}

/// A patch of lattice points 1 cm below the top of the source shell.
pub fn tiny(n_cells: usize, n_sensors: usize, max_dipoles: usize) -> Tiny {
    let cols = n_cells.div_ceil(2);
    let points: Vec<[f64; 3]> = (0..n_cells)
        .map(|i| {
            let x = 0.005 * (i % cols) as f64 - 0.0025 * (cols - 1) as f64;
            [x, 0.005 * (i / cols) as f64, 0.06]
        })
        .collect();
    let grid = SourceGrid::from_points(points, 0.005, 0.01, 0.005).unwrap();
    let sensors = build_sensor_array(n_sensors, 0.12).unwrap();
    let lf = compute_leadfield(&grid, &sensors, Execution::Sequential).unwrap();
    let prior = PriorParams {
        max_dipoles,
        ..PriorParams::default()
    };
    Tiny { grid, lf, prior }
}

pub fn dipole_field(t: &Tiny, cell: usize, u: [f64; 3], q: f64) -> Vec<f64> {
    let c = SourceConfig::new(vec![Dipole::from_direction(cell, &u, q).unwrap()]).unwrap();
    predict_field(&c, &t.lf).unwrap()
}

/// Largest possible Gaussian log-likelihood: zero residual.
pub fn ll_upper_bound(n_sensors: usize, sigma: f64) -> f64 {
    -0.5 * n_sensors as f64 * (2.0 * PI * sigma * sigma).ln()
}

/// Independent draws from prior times likelihood^f by rejection from the prior.
pub fn exact_draws(
    t: &Tiny,
    prior: &PriorParams,
    data: &[f64],
    sigma: f64,
    f: f64,
    n: usize,
    seed: u64,
) -> Vec<SourceConfig> {
    let target = PosteriorTarget {
        data,
        leadfield: &t.lf,
        sigma,
        prior,
        exponent: f,
    };
    let bound = ll_upper_bound(data.len(), sigma);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let c = sample_prior(&mut rng, prior, &t.grid);
        let ll = target.log_likelihood(&c);
        let u: f64 = rng.random();
        if u.ln() < f * (ll - bound) {
            out.push(c);
        }
    }
    out
}

/// Category of the occupied cell set.
pub fn pattern(c: &SourceConfig) -> u64 {
    c.cells().fold(0u64, |m, x| m | (1 << x))
}

pub fn counts<K: std::hash::Hash + Eq + Copy + Ord>(keys: impl Iterator<Item = K>) -> Vec<(K, u64)> {
    let mut m: HashMap<K, u64> = HashMap::new();
    for k in keys {
        *m.entry(k).or_default() += 1;
    }
    let mut v: Vec<(K, u64)> = m.into_iter().collect();
    v.sort();
    v
}

/// Two-sample chi-square statistic and degrees of freedom over the union of
/// categories seen in either sample.
pub fn two_sample_chi2<K: Ord + Copy>(a: &[(K, u64)], b: &[(K, u64)]) -> (f64, usize) {
    let na: u64 = a.iter().map(|x| x.1).sum();
    let nb: u64 = b.iter().map(|x| x.1).sum();
    let (ka, kb) = ((nb as f64 / na as f64).sqrt(), (na as f64 / nb as f64).sqrt());
    let mut keys: Vec<K> = a.iter().chain(b).map(|x| x.0).collect();
    keys.sort();
    keys.dedup();
    let get = |s: &[(K, u64)], k: K| s.iter().find(|x| x.0 == k).map_or(0, |x| x.1) as f64;
    let stat = keys
        .iter()
        .map(|&k| {
            let (x, y) = (get(a, k), get(b, k));
            (ka * x - kb * y).powi(2) / (x + y)
        })
        .sum();
    (stat, keys.len().saturating_sub(1))
}

pub fn chi2_critical(df: usize, level: f64) -> f64 {
    ChiSquared::new(df as f64).unwrap().inverse_cdf(1.0 - level)
}

pub struct QuadratureNodes {
    pub z: usize,
    pub phi: usize,
    /// Gauss-Legendre nodes per panel and number of panels in ln|q|.
    pub t: (usize, usize),
}

impl Default for QuadratureNodes {
    fn default() -> Self {
        QuadratureNodes {
            z: 64,
            phi: 64,
            t: (16, 32),
        }
    }
}

fn gl(n: usize, a: f64, b: f64) -> Vec<(f64, f64)> {
    let rule = GaussLegendre::new(NonZeroUsize::new(n).unwrap());
    let (m, h) = (0.5 * (a + b), 0.5 * (b - a));
    rule.as_node_weight_pairs()
        .iter()
        .map(|&(x, w)| (m + h * x, h * w))
        .collect()
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Posterior over {no dipole} and {one dipole at cell c} for a one-dipole
/// prior: exhaustive sum over cells, tensor quadrature over orientation and
/// signed log strength. Index 0 is N_D = 0, index 1 + c is cell c.
pub fn oracle_single(t: &Tiny, data: &[f64], sigma: f64, nodes: &QuadratureNodes) -> Vec<f64> {
    let p = &t.prior;
    assert_eq!(p.max_dipoles, 1);
    let n_cells = t.grid.len();
    let pmf = p.count_pmf();
    let s2 = sigma * sigma;
    let bb: f64 = data.iter().map(|x| x * x).sum();
    let ll0 = ll_upper_bound(data.len(), sigma) - bb / (2.0 * s2);

    let z_nodes = gl(nodes.z, 0.0, 1.0);
    let phi_w = 2.0 * PI / nodes.phi as f64;
    let (lo, hi) = (p.strength_scale.ln(), p.strength_scale.ln() + p.decades * 10f64.ln());
    let panel = (hi - lo) / nodes.t.1 as f64;
    let t_nodes: Vec<(f64, f64)> = (0..nodes.t.1)
        .flat_map(|k| gl(nodes.t.0, lo + k as f64 * panel, lo + (k + 1) as f64 * panel))
        .collect();
    let log_strength_density = -(2.0 * (hi - lo)).ln();

    let mut log_mass = vec![pmf[0].ln() + ll0];
    for c in 0..n_cells {
        let mut terms = Vec::with_capacity(nodes.z * nodes.phi * t_nodes.len() * 2);
        for &(z, wz) in &z_nodes {
            let rho = (1.0 - z * z).sqrt();
            for j in 0..nodes.phi {
                let phi = j as f64 * phi_w;
                let u = [rho * phi.cos(), rho * phi.sin(), z];
                let g = t.lf.apply(c, &u);
                let gb: f64 = g.iter().zip(data).map(|(a, b)| a * b).sum();
                let gg: f64 = g.iter().map(|a| a * a).sum();
                let lw = (wz * phi_w).ln() - (2.0 * PI).ln() + log_strength_density;
                for &(tt, wt) in &t_nodes {
                    let q = tt.exp();
                    for s in [1.0, -1.0] {
                        let gain = (2.0 * s * q * gb - q * q * gg) / (2.0 * s2);
                        terms.push(lw + wt.ln() + gain);
                    }
                }
            }
        }
        log_mass.push(pmf[1].ln() - (n_cells as f64).ln() + ll0 + log_sum_exp(&terms));
    }
    let total = log_sum_exp(&log_mass);
    log_mass.iter().map(|x| (x - total).exp()).collect()
}

/// Weighted (N_D = 0, cell) distribution of a one-dipole ensemble.
pub fn ensemble_single(ens: &Ensemble, n_cells: usize) -> Vec<f64> {
    let mut out = vec![0.0; n_cells + 1];
    for (c, w) in ens.configs().zip(ens.weights()) {
        match c.dipoles() {
            [] => out[0] += w,
            [d] => out[1 + d.cell] += w,
            _ => panic!("more than one dipole under a one-dipole prior"),
        }
    }
    out
}

pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// Tempering-schedule invariants of one run; the first violation found.
pub fn check_adaptation(h: &History, n_particles: usize, adapt: &AdaptConfig) -> Result<(), String> {
    let total: f64 = h.delta.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(format!("increments sum to {total}"));
    }
    let mut f = 0.0;
    for i in 0..h.len() {
        let d = h.delta[i];
        let hi = adapt.delta_max.min(1.0 - f);
        if !(d >= adapt.delta_min * (1.0 - 1e-12) && d <= hi * (1.0 + 1e-12)) {
            return Err(format!("step {i}: delta {d} outside [{}, {hi}]", adapt.delta_min));
        }
        let r = h.ess_ratio[i];
        let in_band = (adapt.i_min..=adapt.i_max).contains(&r);
        if !(in_band || h.at_boundary[i] || h.terminal[i]) {
            return Err(format!("step {i}: ESS ratio {r} outside the band without a clamp"));
        }
        if h.resampled[i] && (h.ess_after_resample[i] - n_particles as f64).abs() > 1e-9 * n_particles as f64 {
            return Err(format!("step {i}: ESS {} after resampling", h.ess_after_resample[i]));
        }
        f = h.f[i];
    }
    if h.f.last() != Some(&1.0) {
        return Err("run did not reach f = 1".into());
    }
    Ok(())
}
