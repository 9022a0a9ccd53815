//! Synthetic benchmark topographies: nested one- to four-dipole
//! configurations at maximum-signal orientations, each with several noise
//! levels.

use std::path::Path;

use nalgebra::{Matrix3, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::geometry::{LeadField, Vec3};
use crate::likelihood::{predict_field, Topography};
use crate::rng::{stream, Purpose};
use crate::state::{Dipole, SourceConfig};

/// Which noise-free signal sets the noise scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeakReference {
    /// The topography with the same number of dipoles.
    SameCount,
    /// The full four-dipole topography of the group.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteParams {
    /// Strength of the k-th added dipole (A·m).
    pub strengths: Vec<f64>,
    /// Noise sd as a fraction of the noise-free peak.
    pub noise_levels: Vec<f64>,
    pub n_groups: usize,
    pub peak_reference: PeakReference,
}

impl Default for SuiteParams {
    fn default() -> Self {
        SuiteParams {
            strengths: vec![7e-9, 1e-8, 5e-9, 8e-9],
            noise_levels: vec![0.0, 0.05, 0.10],
            n_groups: 10,
            peak_reference: PeakReference::SameCount,
        }
    }
}

impl SuiteParams {
    pub fn validate(&self) -> Result<()> {
        if self.strengths.is_empty() || self.strengths.iter().any(|q| !(q.is_finite() && *q != 0.0)) {
            return Err(Error::InvalidParameter("strengths must be nonzero and finite".into()));
        }
        if self.noise_levels.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::InvalidParameter("noise levels must be nonnegative".into()));
        }
        if self.n_groups == 0 {
            return Err(Error::InvalidParameter("n_groups must be positive".into()));
        }
        Ok(())
    }
}

/// Unit vector maximizing `|uᵀ G(c)|`, canonicalized to the upper half-sphere.
pub fn max_signal_orientation(lf: &LeadField, cell: usize) -> Result<Vec3> {
    if cell >= lf.n_cells() {
        return Err(Error::CellOutOfRange { cell, n_cells: lf.n_cells() });
    }
    let mut m = Matrix3::<f64>::zeros();
    for i in 0..3 {
        for j in 0..3 {
            m[(i, j)] = lf.row(cell, i).iter().zip(lf.row(cell, j)).map(|(a, b)| a * b).sum();
        }
    }
    if m.iter().all(|&x| x == 0.0) {
        return Err(Error::InvalidParameter(format!("lead field vanishes at cell {cell}")));
    }
    let eig = SymmetricEigen::new(m);
    let k = eig.eigenvalues.imax();
    let v = eig.eigenvectors.column(k);
    let mut u = [v[0], v[1], v[2]];
    let n = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
    u = u.map(|x| x / n);
    let flip = u[2] < 0.0 || (u[2] == 0.0 && (u[1] < 0.0 || (u[1] == 0.0 && u[0] < 0.0)));
    if flip {
        u = u.map(|x| -x);
    }
    Ok(u)
}

pub fn add_noise<R: Rng + ?Sized>(b: &Topography, sd: f64, rng: &mut R) -> Topography {
    if sd == 0.0 {
        return b.clone();
    }
    let values = b
        .values
        .iter()
        .map(|v| {
            let e: f64 = StandardNormal.sample(rng);
            v + sd * e
        })
        .collect();
    Topography { values, label: b.label.clone() }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteItem {
    pub group: usize,
    pub n_dipoles: usize,
    pub noise_level: f64,
    /// Standard deviation of the added noise (T).
    pub noise_sd: f64,
    pub topography: Topography,
    pub truth: SourceConfig,
}

impl SuiteItem {
    /// Path of the topography relative to the suite root.
    pub fn file_stem(&self) -> String {
        format!("{:03}/{}_{}", self.group, self.n_dipoles, noise_tag(self.noise_level))
    }
}

fn noise_tag(level: f64) -> String {
    format!("{}", (level * 100.0).round() as i64)
}

/// Nested configurations for one group: dipole `k` is added on top of the
/// first `k - 1`. Cells are distinct, uniform over cells with a nonzero lead
/// field.
fn group_truths<R: Rng + ?Sized>(
    rng: &mut R,
    lf: &LeadField,
    live: &[usize],
    strengths: &[f64],
) -> Result<Vec<SourceConfig>> {
    let picks = rand::seq::index::sample(rng, live.len(), strengths.len()).into_vec();
    let mut dipoles = Vec::with_capacity(strengths.len());
    let mut out = Vec::with_capacity(strengths.len());
    for (&i, &q) in picks.iter().zip(strengths) {
        let cell = live[i];
        let u = max_signal_orientation(lf, cell)?;
        dipoles.push(Dipole::from_direction(cell, &u, q)?);
        out.push(SourceConfig::new(dipoles.clone())?);
    }
    Ok(out)
}

pub fn generate_suite(
    seed: u64,
    lf: &LeadField,
    params: &SuiteParams,
    exec: Execution,
) -> Result<Vec<SuiteItem>> {
    params.validate()?;
    let live: Vec<usize> = (0..lf.n_cells())
        .filter(|&c| lf.block(c).iter().any(|&x| x != 0.0))
        .collect();
    if live.len() < params.strengths.len() {
        return Err(Error::InvalidParameter(format!(
            "grid has {} usable cells, need {}",
            live.len(),
            params.strengths.len()
        )));
    }
    let groups: Vec<usize> = (0..params.n_groups).collect();
    let per_group = exec.map(&groups, |_, &g| -> Result<Vec<SuiteItem>> {
        let mut rng = stream(seed, Purpose::Suite, g as u64, 0);
        let truths = group_truths(&mut rng, lf, &live, &params.strengths)?;
        let clean: Vec<Topography> = truths
            .iter()
            .map(|t| predict_field(t, lf).and_then(Topography::new))
            .collect::<Result<_>>()?;
        let full_peak = clean.last().map_or(0.0, Topography::peak);
        let mut items = Vec::new();
        for (k, (truth, b)) in truths.iter().zip(&clean).enumerate() {
            let peak = match params.peak_reference {
                PeakReference::SameCount => b.peak(),
                PeakReference::Full => full_peak,
            };
            for (l, &level) in params.noise_levels.iter().enumerate() {
                let sd = level * peak;
                let mut nrng = stream(seed, Purpose::Noise, g as u64, (k * 64 + l) as u64);
                let mut item = SuiteItem {
                    group: g,
                    n_dipoles: k + 1,
                    noise_level: level,
                    noise_sd: sd,
                    topography: add_noise(b, sd, &mut nrng),
                    truth: truth.clone(),
                };
                item.topography.label = Some(item.file_stem());
                items.push(item);
            }
        }
        Ok(items)
    });
    let mut out = Vec::new();
    for g in per_group {
        out.extend(g?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub truth: String,
    pub group: usize,
    pub n_dipoles: usize,
    pub noise_level: f64,
    pub noise_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub n_cells: usize,
    pub n_sensors: usize,
    pub params: SuiteParams,
    pub items: Vec<ManifestEntry>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

/// Writes `<group>/<nd>_<noise>.csv`, the matching `.truth.json`, and
/// `manifest.json` under `dir`.
pub fn write_suite(
    dir: &Path,
    seed: u64,
    lf: &LeadField,
    params: &SuiteParams,
    items: &[SuiteItem],
) -> Result<Manifest> {
    let mut entries = Vec::with_capacity(items.len());
    for item in items {
        let stem = item.file_stem();
        let file = format!("{stem}.csv");
        let truth = format!("{stem}.truth.json");
        let path = dir.join(&file);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        item.topography.save(&path)?;
        write_json(&dir.join(&truth), &item.truth)?;
        entries.push(ManifestEntry {
            file,
            truth,
            group: item.group,
            n_dipoles: item.n_dipoles,
            noise_level: item.noise_level,
            noise_sd: item.noise_sd,
        });
    }
    let manifest = Manifest {
        seed,
        n_cells: lf.n_cells(),
        n_sensors: lf.n_sensors(),
        params: params.clone(),
        items: entries,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path)?;
        serde_json::from_str(&text).map_err(|e| Error::Malformed { path, reason: e.to_string() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_sensor_array, build_spherical_grid, compute_leadfield, SourceGrid};

    fn setup() -> (SourceGrid, LeadField) {
        let grid = build_spherical_grid(0.09, 0.07, 0.01).unwrap();
        let sensors = build_sensor_array(100, 0.12).unwrap();
        let lf = compute_leadfield(&grid, &sensors, Execution::default()).unwrap();
        (grid, lf)
    }

    fn gain(lf: &LeadField, c: usize, u: &Vec3) -> f64 {
        lf.apply(c, u).iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn rank_one_block() {
        let mut data = vec![0.0; 3 * 4];
        data[4..8].copy_from_slice(&[1.0, -2.0, 0.5, 3.0]);
        let lf = LeadField::from_raw(1, 4, data).unwrap();
        assert_eq!(max_signal_orientation(&lf, 0).unwrap(), [0.0, 1.0, 0.0]);
        let lf0 = LeadField::from_raw(1, 4, vec![0.0; 12]).unwrap();
        assert!(max_signal_orientation(&lf0, 0).is_err());
    }

    #[test]
    fn orientation_is_tangential_and_maximal() {
        use rand::SeedableRng;
        let (grid, lf) = setup();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for c in [5, grid.len() / 3, grid.len() - 2] {
            let u = max_signal_orientation(&lf, c).unwrap();
            let r = grid.point(c);
            let rn = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
            let radial = (u[0] * r[0] + u[1] * r[1] + u[2] * r[2]) / rn;
            assert!(radial.abs() < 1e-8, "cell {c}: radial component {radial}");
            let best = gain(&lf, c, &u);
            for _ in 0..1000 {
                let v: Vec3 = [
                    StandardNormal.sample(&mut rng),
                    StandardNormal.sample(&mut rng),
                    StandardNormal.sample(&mut rng),
                ];
                let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                assert!(gain(&lf, c, &v.map(|x| x / n)) <= best * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn suite_structure() {
        let (_, lf) = setup();
        let p = SuiteParams { n_groups: 3, ..Default::default() };
        let items = generate_suite(11, &lf, &p, Execution::default()).unwrap();
        assert_eq!(items.len(), 36);
        for g in items.chunks(12) {
            let cells4: Vec<usize> = g[11].truth.cells().collect();
            for it in g {
                assert!(it.truth.cells().all(|c| cells4.contains(&c)));
                if it.noise_level == 0.0 {
                    let clean = predict_field(&it.truth, &lf).unwrap();
                    assert_eq!(it.topography.values, clean);
                }
            }
            // nested construction: b2 - b1 is the second dipole's field
            let b1 = &g[0].topography.values;
            let b2 = &g[3].topography.values;
            let t1: Vec<usize> = g[0].truth.cells().collect();
            let added = g[3].truth.dipoles().iter().find(|d| !t1.contains(&d.cell)).unwrap();
            let single = lf.apply(added.cell, &added.moment());
            let peak = b2.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            for s in 0..b1.len() {
                assert!((b2[s] - b1[s] - single[s]).abs() <= 1e-12 * peak);
            }
            let strengths: Vec<f64> = g[11].truth.dipoles().iter().map(|d| d.q.abs()).collect();
            let mut sorted = strengths.clone();
            sorted.sort_by(f64::total_cmp);
            assert_eq!(sorted, vec![5e-9, 7e-9, 8e-9, 1e-8]);
        }
        let again = generate_suite(11, &lf, &p, Execution::Sequential).unwrap();
        assert_eq!(items, again);
    }

    #[test]
    fn noise_scale_matches_peak() {
        let (_, lf) = setup();
        let p = SuiteParams { n_groups: 20, ..Default::default() };
        let items = generate_suite(5, &lf, &p, Execution::default()).unwrap();
        let mut ratios = vec![];
        for pair in items.chunks(3) {
            let clean = &pair[0].topography.values;
            let noisy = &pair[1].topography.values;
            let peak = clean.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            assert!((pair[1].noise_sd - 0.05 * peak).abs() <= 1e-15 * peak);
            assert!((pair[2].noise_sd - 0.10 * peak).abs() <= 1e-15 * peak);
            let n = clean.len() as f64;
            let ss: f64 = noisy.iter().zip(clean).map(|(a, b)| (a - b) * (a - b)).sum();
            ratios.push((ss / n).sqrt() / (0.05 * peak));
        }
        for r in &ratios {
            assert!((r - 1.0).abs() < 0.15 * 2.0, "single-topography sd ratio {r}");
        }
        let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
        assert!((mean - 1.0).abs() < 0.15, "mean sd ratio {mean}");
    }

    #[test]
    fn add_noise_properties() {
        use rand::SeedableRng;
        let b = Topography::new(vec![1.0, -2.0, 3.0]).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        assert_eq!(add_noise(&b, 0.0, &mut rng), b);
        let r1 = add_noise(&b, 0.5, &mut rand_chacha::ChaCha8Rng::seed_from_u64(9));
        let r2 = add_noise(&b, 0.5, &mut rand_chacha::ChaCha8Rng::seed_from_u64(9));
        assert_eq!(r1, r2);
        let reps = 10_000;
        let mut sum = [0.0; 3];
        for _ in 0..reps {
            let x = add_noise(&b, 0.5, &mut rng);
            for k in 0..3 {
                sum[k] += x.values[k];
            }
        }
        let se = 0.5 / (reps as f64).sqrt();
        for k in 0..3 {
            assert!((sum[k] / reps as f64 - b.values[k]).abs() < 3.0 * se);
        }
    }

    #[test]
    fn too_few_cells() {
        let lf = LeadField::from_raw(3, 2, vec![1.0; 18]).unwrap();
        assert!(generate_suite(1, &lf, &SuiteParams::default(), Execution::default()).is_err());
    }

    #[test]
    fn write_and_reload() {
        let (_, lf) = setup();
        let p = SuiteParams { n_groups: 1, ..Default::default() };
        let items = generate_suite(2, &lf, &p, Execution::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let m = write_suite(dir.path(), 2, &lf, &p, &items).unwrap();
        assert_eq!(Manifest::load(dir.path()).unwrap().items.len(), 12);
        let e = &m.items[4];
        assert_eq!(e.file, "000/2_5.csv");
        let t = Topography::load(dir.path().join(&e.file)).unwrap();
        assert_eq!(t.values, items[4].topography.values);
        let truth: SourceConfig =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join(&e.truth)).unwrap()).unwrap();
        assert_eq!(truth, items[4].truth);
    }
}
