//! Forward prediction and the tempered Gaussian likelihood.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{LeadField, SourceGrid};
use crate::state::{log_prior, PriorParams, SourceConfig};

/// Default lower bound on the noise standard deviation, in tesla.
pub const DEFAULT_SIGMA_FLOOR: f64 = 1e-14;

/// A single field snapshot across all sensors, in tesla.
#[derive(Debug, Clone, PartialEq)]
pub struct Topography {
    pub values: Vec<f64>,
    pub label: Option<String>,
}

impl Topography {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("topography has non-finite entries".into()));
        }
        Ok(Topography {
            values,
            label: None,
        })
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn peak(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// One CSV row of values, preceded by an optional `# label:` line.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        if let Some(l) = &self.label {
            out.push_str("# label: ");
            out.push_str(l);
            out.push('\n');
        }
        let row: Vec<String> = self.values.iter().map(|v| format!("{v:e}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
        out
    }

    pub fn parse_csv(text: &str) -> std::result::Result<Self, String> {
        let mut label = None;
        let mut values = None;
        for line in text.lines() {
            let t = line.trim();
            if t.is_empty() {
                continue;
            }
            if let Some(rest) = t.strip_prefix('#') {
                if let Some(l) = rest.trim_start().strip_prefix("label:") {
                    label = Some(l.trim().to_string());
                }
                continue;
            }
            if values.is_some() {
                return Err("more than one data row".into());
            }
            let row = t
                .split(',')
                .map(|f| f.trim().parse::<f64>().map_err(|e| format!("bad value {f:?}: {e}")))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            values = Some(row);
        }
        let values = values.ok_or("no data row")?;
        let mut topo = Topography::new(values).map_err(|e| e.to_string())?;
        topo.label = label;
        Ok(topo)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_csv_string())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        Topography::parse_csv(&text).map_err(|reason| Error::Malformed {
            path: path.to_path_buf(),
            reason,
        })
    }
}

/// Isotropic Gaussian sensor noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    sigma: f64,
}

impl NoiseModel {
    pub fn new(sigma: f64, floor: f64) -> Result<Self> {
        if !sigma.is_finite() || sigma < floor || sigma <= 0.0 {
            return Err(Error::NoiseBelowFloor { sigma, floor });
        }
        Ok(NoiseModel { sigma })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }
}

/// `b^s = sum_d G(c_d)^s_k q_d u_d^k`; dipoles are summed in storage order.
pub fn predict_field(config: &SourceConfig, lf: &LeadField) -> Result<Vec<f64>> {
    if let Some(c) = config.max_cell() {
        if c >= lf.n_cells() {
            return Err(Error::CellOutOfRange {
                cell: c,
                n_cells: lf.n_cells(),
            });
        }
    }
    let mut out = vec![0.0; lf.n_sensors()];
    predict_into(config, lf, &mut out);
    Ok(out)
}

pub(crate) fn predict_into(config: &SourceConfig, lf: &LeadField, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for d in config.dipoles() {
        lf.accumulate(d.cell, &d.moment(), out);
    }
}

fn check_dims(b: &Topography, lf: &LeadField) -> Result<()> {
    if b.len() != lf.n_sensors() {
        return Err(Error::DimensionMismatch(format!(
            "topography has {} values, lead field has {} sensors",
            b.len(),
            lf.n_sensors()
        )));
    }
    Ok(())
}

pub(crate) fn gaussian_log_density(b: &[f64], prediction: &[f64], sigma: f64) -> f64 {
    let rss: f64 = b
        .iter()
        .zip(prediction)
        .map(|(x, p)| (x - p) * (x - p))
        .sum();
    -0.5 * b.len() as f64 * (2.0 * PI * sigma * sigma).ln() - rss / (2.0 * sigma * sigma)
}

pub fn log_likelihood(
    b: &Topography,
    config: &SourceConfig,
    lf: &LeadField,
    noise: &NoiseModel,
) -> Result<f64> {
    check_dims(b, lf)?;
    let pred = predict_field(config, lf)?;
    Ok(gaussian_log_density(&b.values, &pred, noise.sigma))
}

/// Prior plus `f` times the log likelihood.
#[allow(clippy::too_many_arguments)]
pub fn tempered_log_target(
    b: &Topography,
    config: &SourceConfig,
    lf: &LeadField,
    noise: &NoiseModel,
    prior: &PriorParams,
    grid: &SourceGrid,
    f: f64,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&f) {
        return Err(Error::ExponentOutOfRange(f));
    }
    let lp = log_prior(config, prior, grid)?;
    if f == 0.0 {
        return Ok(lp);
    }
    Ok(lp + f * log_likelihood(b, config, lf, noise)?)
}
