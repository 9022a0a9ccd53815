//! Source grid, sensor array and the analytic spherical-conductor lead field.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::exec::Execution;

pub type Vec3 = [f64; 3];

/// μ0 / 4π in T·m/A.
pub const MU0_OVER_4PI: f64 = 1e-7;

pub const DEFAULT_CONDUCTOR_RADIUS: f64 = 0.09;
pub const DEFAULT_SHELL_RADIUS: f64 = 0.07;
pub const DEFAULT_HELMET_RADIUS: f64 = 0.12;
pub const DEFAULT_SPACING: f64 = 0.005;
pub const DEFAULT_NEIGHBOR_RADIUS: f64 = 0.01;

pub(crate) fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn norm(a: &Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn sub(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn distance(a: &Vec3, b: &Vec3) -> f64 {
    norm(&sub(a, b))
}

/// Neighbours of one cell with their unnormalised Gaussian proposal weights.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Neighbors {
    pub cells: Vec<usize>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceGrid {
    points: Vec<Vec3>,
    spacing: f64,
    neighbor_radius: f64,
    neighbor_sd: f64,
    neighbors: Vec<Neighbors>,
}

impl SourceGrid {
    /// Builds a grid from explicit points. Neighbour lists use `neighbor_radius`
    /// and Gaussian weights with standard deviation `neighbor_sd`.
    pub fn from_points(
        points: Vec<Vec3>,
        spacing: f64,
        neighbor_radius: f64,
        neighbor_sd: f64,
    ) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidParameter("grid has no points".into()));
        }
        if !(spacing > 0.0 && neighbor_radius > 0.0 && neighbor_sd > 0.0) {
            return Err(Error::InvalidParameter(
                "spacing, neighbour radius and neighbour sd must be positive".into(),
            ));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("grid point is not finite".into()));
        }
        let mut grid = SourceGrid {
            points,
            spacing,
            neighbor_radius,
            neighbor_sd,
            neighbors: Vec::new(),
        };
        grid.rebuild_neighbors(neighbor_radius, neighbor_sd)?;
        Ok(grid)
    }

    /// Recomputes neighbour lists. Lists are sorted by cell index.
    pub fn rebuild_neighbors(&mut self, radius: f64, sd: f64) -> Result<()> {
        if !(radius > 0.0 && sd > 0.0) {
            return Err(Error::InvalidParameter(
                "neighbour radius and sd must be positive".into(),
            ));
        }
        let r2 = radius * radius * (1.0 + 1e-9);
        let key = |p: &Vec3| -> (i64, i64, i64) {
            (
                (p[0] / radius).floor() as i64,
                (p[1] / radius).floor() as i64,
                (p[2] / radius).floor() as i64,
            )
        };
        let mut buckets: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in self.points.iter().enumerate() {
            buckets.entry(key(p)).or_default().push(i);
        }
        let mut neighbors = Vec::with_capacity(self.points.len());
        for (i, p) in self.points.iter().enumerate() {
            let (kx, ky, kz) = key(p);
            let mut cells = Vec::new();
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        if let Some(b) = buckets.get(&(kx + dx, ky + dy, kz + dz)) {
                            for &j in b {
                                if j != i {
                                    let d = sub(p, &self.points[j]);
                                    if dot(&d, &d) <= r2 {
                                        cells.push(j);
                                    }
                                }
                            }
                        }
                    }
                }
            }
            cells.sort_unstable();
            let weights = cells
                .iter()
                .map(|&j| {
                    let d = sub(p, &self.points[j]);
                    (-dot(&d, &d) / (2.0 * sd * sd)).exp()
                })
                .collect();
            neighbors.push(Neighbors { cells, weights });
        }
        self.neighbors = neighbors;
        self.neighbor_radius = radius;
        self.neighbor_sd = sd;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn point(&self, cell: usize) -> &Vec3 {
        &self.points[cell]
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn neighbor_radius(&self) -> f64 {
        self.neighbor_radius
    }

    pub fn neighbor_sd(&self) -> f64 {
        self.neighbor_sd
    }

    pub fn neighbors(&self, cell: usize) -> &Neighbors {
        &self.neighbors[cell]
    }
}

/// Cubic lattice points with `|r| <= shell_radius`, ordered lexicographically
/// by (x, y, z). Neighbour lists use a 1 cm radius and one grid step as the
/// Gaussian proposal width.
pub fn build_spherical_grid(
    conductor_radius: f64,
    shell_radius: f64,
    spacing: f64,
) -> Result<SourceGrid> {
    if !(spacing > 0.0 && shell_radius > 0.0 && shell_radius < conductor_radius) {
        return Err(Error::InvalidParameter(format!(
            "need 0 < spacing and 0 < shell_radius < conductor_radius \
             (spacing={spacing}, shell={shell_radius}, conductor={conductor_radius})"
        )));
    }
    let n = (shell_radius / spacing * (1.0 + 1e-9)).floor() as i64;
    let limit = shell_radius * shell_radius * (1.0 + 1e-9);
    let mut points = Vec::new();
    for i in -n..=n {
        for j in -n..=n {
            for k in -n..=n {
                let p = [i as f64 * spacing, j as f64 * spacing, k as f64 * spacing];
                if dot(&p, &p) <= limit {
                    points.push(p);
                }
            }
        }
    }
    // the origin alone carries no signal (its lead field vanishes)
    if points.len() <= 1 {
        return Err(Error::EmptyGrid {
            spacing,
            shell_radius,
        });
    }
    SourceGrid::from_points(points, spacing, DEFAULT_NEIGHBOR_RADIUS, spacing)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorArray {
    positions: Vec<Vec3>,
    orientations: Vec<Vec3>,
}

impl SensorArray {
    pub fn new(positions: Vec<Vec3>, orientations: Vec<Vec3>) -> Result<Self> {
        if positions.is_empty() || positions.len() != orientations.len() {
            return Err(Error::InvalidParameter(format!(
                "sensor array needs matching non-empty positions/orientations ({} vs {})",
                positions.len(),
                orientations.len()
            )));
        }
        for o in &orientations {
            if (norm(o) - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidParameter(format!(
                    "sensor orientation {o:?} is not a unit vector"
                )));
            }
        }
        Ok(SensorArray {
            positions,
            orientations,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    pub fn orientations(&self) -> &[Vec3] {
        &self.orientations
    }
}

/// Radial magnetometers on a Fibonacci spiral over the upper hemisphere.
/// Sensor 0 sits at the pole.
pub fn build_sensor_array(n_sensors: usize, helmet_radius: f64) -> Result<SensorArray> {
    if n_sensors == 0 || !(helmet_radius > 0.0) {
        return Err(Error::InvalidParameter(
            "need n_sensors >= 1 and helmet_radius > 0".into(),
        ));
    }
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let mut positions = Vec::with_capacity(n_sensors);
    let mut orientations = Vec::with_capacity(n_sensors);
    for i in 0..n_sensors {
        let z = 1.0 - i as f64 / n_sensors as f64;
        let rho = ((1.0 - z) * (1.0 + z)).sqrt();
        let phi = golden * i as f64;
        let u = [rho * phi.cos(), rho * phi.sin(), z];
        let n = norm(&u);
        let u = [u[0] / n, u[1] / n, u[2] / n];
        positions.push([helmet_radius * u[0], helmet_radius * u[1], helmet_radius * u[2]]);
        orientations.push(u);
    }
    SensorArray::new(positions, orientations)
}

/// Total magnetic field at `r_sensor` of a current dipole `q_moment` at `r0`
/// inside a homogeneous conducting sphere centred at the origin (Sarvas).
pub fn sarvas_field(r0: &Vec3, q_moment: &Vec3, r_sensor: &Vec3) -> Result<Vec3> {
    let a_vec = sub(r_sensor, r0);
    let a = norm(&a_vec);
    let r = norm(r_sensor);
    if a == 0.0 || r <= norm(r0) {
        return Err(Error::SensorAtDipole {
            sensor: *r_sensor,
            dipole: *r0,
        });
    }
    let q_x_r0 = cross(q_moment, r0);
    if q_x_r0 == [0.0; 3] {
        return Ok([0.0; 3]);
    }
    let a_dot_r = dot(&a_vec, r_sensor);
    let f = a * (r * a + r * r - dot(r0, r_sensor));
    let c_r = a * a / r + a_dot_r / a + 2.0 * a + 2.0 * r;
    let c_r0 = a + 2.0 * r + a_dot_r / a;
    let grad_f = [
        c_r * r_sensor[0] - c_r0 * r0[0],
        c_r * r_sensor[1] - c_r0 * r0[1],
        c_r * r_sensor[2] - c_r0 * r0[2],
    ];
    let t = dot(&q_x_r0, r_sensor);
    let scale = MU0_OVER_4PI / (f * f);
    Ok([
        scale * (f * q_x_r0[0] - t * grad_f[0]),
        scale * (f * q_x_r0[1] - t * grad_f[1]),
        scale * (f * q_x_r0[2] - t * grad_f[2]),
    ])
}

/// Per-cell 3×N_S gain matrices stored as contiguous row-major blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct LeadField {
    n_cells: usize,
    n_sensors: usize,
    data: Vec<f64>,
}

const LF_MAGIC: &[u8; 4] = b"LFMG";
const LF_VERSION: u32 = 1;
const LF_HEADER_BYTES: u64 = 16;

impl LeadField {
    pub fn from_raw(n_cells: usize, n_sensors: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_cells * 3 * n_sensors {
            return Err(Error::DimensionMismatch(format!(
                "lead-field payload has {} values, expected {}",
                data.len(),
                n_cells * 3 * n_sensors
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite lead-field entry".into()));
        }
        Ok(LeadField {
            n_cells,
            n_sensors,
            data,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn n_sensors(&self) -> usize {
        self.n_sensors
    }

    /// The 3×N_S block of `cell`, row-major.
    pub fn block(&self, cell: usize) -> &[f64] {
        let len = 3 * self.n_sensors;
        &self.data[cell * len..(cell + 1) * len]
    }

    /// Row `k` of G(cell): sensor readings of the unit dipole e_k.
    pub fn row(&self, cell: usize, k: usize) -> &[f64] {
        let ns = self.n_sensors;
        &self.block(cell)[k * ns..(k + 1) * ns]
    }

    /// Adds `G(cell)ᵀ·moment` to `out`.
    pub fn accumulate(&self, cell: usize, moment: &Vec3, out: &mut [f64]) {
        let ns = self.n_sensors;
        let block = self.block(cell);
        let (r0, rest) = block.split_at(ns);
        let (r1, r2) = rest.split_at(ns);
        for s in 0..ns {
            out[s] += r0[s] * moment[0] + r1[s] * moment[1] + r2[s] * moment[2];
        }
    }

    pub fn apply(&self, cell: usize, moment: &Vec3) -> Vec<f64> {
        let mut out = vec![0.0; self.n_sensors];
        self.accumulate(cell, moment, &mut out);
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(LF_MAGIC)?;
        w.write_u32::<LittleEndian>(LF_VERSION)?;
        w.write_u32::<LittleEndian>(self.n_cells as u32)?;
        w.write_u32::<LittleEndian>(self.n_sensors as u32)?;
        for v in &self.data {
            w.write_f64::<LittleEndian>(*v)?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = File::open(path)?;
        let len = file.metadata()?.len();
        let mut r = BufReader::new(file);
        Self::read_from(&mut r, Some(len))
    }

    /// Reads the binary format; `total_len`, when known, is checked against
    /// the header before the payload is read.
    pub fn read_from<R: Read>(r: &mut R, total_len: Option<u64>) -> Result<Self> {
        let malformed = |offset: u64, reason: &str| Error::MalformedLeadField {
            offset,
            reason: reason.to_string(),
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| malformed(0, "truncated header"))?;
        if &magic != LF_MAGIC {
            return Err(malformed(0, "bad magic, expected LFMG"));
        }
        let version = r
            .read_u32::<LittleEndian>()
            .map_err(|_| malformed(4, "truncated header"))?;
        if version != LF_VERSION {
            return Err(malformed(4, &format!("unsupported version {version}")));
        }
        let n_cells = r
            .read_u32::<LittleEndian>()
            .map_err(|_| malformed(8, "truncated header"))? as usize;
        let n_sensors = r
            .read_u32::<LittleEndian>()
            .map_err(|_| malformed(12, "truncated header"))? as usize;
        let n_values = n_cells * 3 * n_sensors;
        let expected = LF_HEADER_BYTES + 8 * n_values as u64;
        if let Some(total) = total_len {
            if total != expected {
                return Err(malformed(
                    total.min(expected),
                    &format!(
                        "file is {total} bytes but header (N_C={n_cells}, N_S={n_sensors}) implies {expected}"
                    ),
                ));
            }
        }
        let mut data = Vec::with_capacity(n_values);
        for i in 0..n_values {
            let v = r.read_f64::<LittleEndian>().map_err(|_| {
                malformed(LF_HEADER_BYTES + 8 * i as u64, "truncated payload")
            })?;
            data.push(v);
        }
        if total_len.is_none() {
            let mut extra = [0u8; 1];
            if r.read(&mut extra)? != 0 {
                return Err(malformed(expected, "trailing bytes after payload"));
            }
        }
        Self::from_raw(n_cells, n_sensors, data)
    }
}

/// `[G(c)]^s_k = orientation(s) · B(r(c), e_k, position(s))`, one cell per task.
pub fn compute_leadfield(
    grid: &SourceGrid,
    sensors: &SensorArray,
    exec: Execution,
) -> Result<LeadField> {
    let ns = sensors.len();
    let mut data = vec![0.0; grid.len() * 3 * ns];
    let failures = std::sync::Mutex::new(Vec::new());
    exec.for_each_chunk_mut(&mut data, 3 * ns, |cell, block| {
        let r0 = grid.point(cell);
        for k in 0..3 {
            let mut e = [0.0; 3];
            e[k] = 1.0;
            for s in 0..ns {
                match sarvas_field(r0, &e, &sensors.positions[s]) {
                    Ok(b) => block[k * ns + s] = dot(&sensors.orientations[s], &b),
                    Err(err) => failures.lock().unwrap().push((cell, err)),
                }
            }
        }
    });
    let mut failures = failures.into_inner().unwrap();
    if !failures.is_empty() {
        failures.sort_by_key(|(c, _)| *c);
        return Err(failures.swap_remove(0).1);
    }
    LeadField::from_raw(grid.len(), ns, data)
}

pub fn write_points_csv(path: impl AsRef<Path>, points: &[Vec3]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["x", "y", "z"])?;
    for p in points {
        w.write_record(p.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_sensors_csv(path: impl AsRef<Path>, sensors: &SensorArray) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["x", "y", "z", "ox", "oy", "oz"])?;
    for (p, o) in sensors.positions.iter().zip(&sensors.orientations) {
        w.write_record(p.iter().chain(o.iter()).map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn read_rows(path: &Path, width: usize) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != width {
            return Err(Error::Malformed {
                path: path.to_path_buf(),
                reason: format!("row {} has {} fields, expected {width}", line + 2, rec.len()),
            });
        }
        let row = rec
            .iter()
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Malformed {
                path: path.to_path_buf(),
                reason: format!("row {}: {e}", line + 2),
            })?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn read_points_csv(path: impl AsRef<Path>) -> Result<Vec<Vec3>> {
    Ok(read_rows(path.as_ref(), 3)?
        .into_iter()
        .map(|r| [r[0], r[1], r[2]])
        .collect())
}

pub fn read_sensors_csv(path: impl AsRef<Path>) -> Result<SensorArray> {
    let rows = read_rows(path.as_ref(), 6)?;
    SensorArray::new(
        rows.iter().map(|r| [r[0], r[1], r[2]]).collect(),
        rows.iter().map(|r| [r[3], r[4], r[5]]).collect(),
    )
}
