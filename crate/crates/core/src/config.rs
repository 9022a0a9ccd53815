//! Run configuration: one JSON document with a section per module. Keys left
//! out take their defaults; unknown keys are rejected, all of them at once.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::estimates::DEFAULT_PEAK_RADIUS;
use crate::geometry::{
    DEFAULT_CONDUCTOR_RADIUS, DEFAULT_HELMET_RADIUS, DEFAULT_SHELL_RADIUS, DEFAULT_SPACING,
};
use crate::kernels::MoveParams;
use crate::likelihood::{NoiseModel, DEFAULT_SIGMA_FLOOR};
use crate::sampler::AdaptConfig;
use crate::state::PriorParams;
use crate::synthgen::SuiteParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    pub conductor_radius: f64,
    pub shell_radius: f64,
    pub spacing: f64,
    pub helmet_radius: f64,
    pub n_sensors: usize,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig {
            conductor_radius: DEFAULT_CONDUCTOR_RADIUS,
            shell_radius: DEFAULT_SHELL_RADIUS,
            spacing: DEFAULT_SPACING,
            helmet_radius: DEFAULT_HELMET_RADIUS,
            n_sensors: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    /// Noise standard deviation (T); the floor when absent.
    pub sigma: Option<f64>,
    pub floor: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            sigma: None,
            floor: DEFAULT_SIGMA_FLOOR,
        }
    }
}

impl NoiseConfig {
    pub fn model(&self) -> Result<NoiseModel> {
        NoiseModel::new(self.sigma.unwrap_or(self.floor), self.floor)
    }

    /// Model for data with known noise sd, raised to the floor if needed.
    pub fn model_for_sd(&self, sd: f64) -> Result<NoiseModel> {
        NoiseModel::new(sd.max(self.floor), self.floor)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateConfig {
    pub peak_radius: f64,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        EstimateConfig {
            peak_radius: DEFAULT_PEAK_RADIUS,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub geometry: GeometryConfig,
    pub prior: PriorParams,
    pub noise: NoiseConfig,
    pub moves: MoveParams,
    pub adapt: AdaptConfig,
    pub estimates: EstimateConfig,
    pub suite: SuiteParams,
}

fn unknown_keys(user: &Value, reference: &Value, prefix: &str, out: &mut Vec<String>) {
    if let (Value::Object(u), Value::Object(r)) = (user, reference) {
        for (k, v) in u {
            let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match r.get(k) {
                None => out.push(path),
                Some(rv) => unknown_keys(v, rv, &path, out),
            }
        }
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl Config {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let user: Value = serde_json::from_str(text)
            .map_err(|e| Error::InvalidConfig(format!("not valid JSON: {e}")))?;
        if !user.is_object() {
            return Err(Error::InvalidConfig("top level must be an object".into()));
        }
        let mut base = serde_json::to_value(Config::default())?;
        let mut bad = Vec::new();
        unknown_keys(&user, &base, "", &mut bad);
        if !bad.is_empty() {
            return Err(Error::InvalidConfig(format!("unknown keys: {}", bad.join(", "))));
        }
        merge(&mut base, user);
        let cfg: Config =
            serde_json::from_value(base).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Config::from_json_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.prior.validate()?;
        self.moves.validate()?;
        self.adapt.validate()?;
        self.suite.validate()?;
        self.noise.model()?;
        let g = &self.geometry;
        // a spacing wider than the shell is left to the grid builder (empty grid)
        if !(0.0 < g.spacing && 0.0 < g.shell_radius && g.shell_radius < g.conductor_radius) {
            return Err(Error::InvalidParameter(format!(
                "geometry needs 0 < spacing and shell_radius < conductor_radius, got {g:?}"
            )));
        }
        if g.helmet_radius <= g.conductor_radius || g.n_sensors == 0 {
            return Err(Error::InvalidParameter(format!(
                "helmet must enclose the conductor and hold at least one sensor, got {g:?}"
            )));
        }
        if !(self.estimates.peak_radius > 0.0) {
            return Err(Error::InvalidParameter("peak_radius must be positive".into()));
        }
        Ok(())
    }

    pub fn to_json_pretty(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}

/// Key paths of the default configuration, for documentation and tests.
pub fn default_keys() -> Vec<String> {
    fn walk(v: &Map<String, Value>, prefix: &str, out: &mut Vec<String>) {
        for (k, v) in v {
            let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match v {
                Value::Object(m) => walk(m, &path, out),
                _ => out.push(path),
            }
        }
    }
    let mut out = Vec::new();
    if let Value::Object(m) = serde_json::to_value(Config::default()).expect("config serializes") {
        walk(&m, "", &mut out);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(Config::from_json_str("{}").unwrap(), Config::default());
        let d = Config::default();
        assert_eq!(d.prior.rate, 0.3);
        assert_eq!(d.adapt.n_particles, 10_000);
        assert_eq!(d.moves.p_birth, 1.0 / 3.0);
        assert_eq!(d.moves.p_death, 1.0 / 20.0);
        assert_eq!(d.noise.floor, 1e-14);
    }

    #[test]
    fn partial_sections_merge() {
        let c = Config::from_json_str(r#"{"adapt": {"n_particles": 500}, "noise": {"sigma": 2e-14}}"#).unwrap();
        assert_eq!(c.adapt.n_particles, 500);
        assert_eq!(c.adapt.delta_min, 1e-5);
        assert_eq!(c.noise.model().unwrap().sigma(), 2e-14);
    }

    #[test]
    fn all_unknown_keys_reported() {
        let err = Config::from_json_str(r#"{"prior": {"lambda": 1}, "colour": 3, "adapt": {"n_particles": 5, "x": 1}}"#)
            .unwrap_err()
            .to_string();
        for k in ["prior.lambda", "colour", "adapt.x"] {
            assert!(err.contains(k), "{err}");
        }
    }

    #[test]
    fn sigma_below_floor_rejected() {
        let err = Config::from_json_str(r#"{"noise": {"sigma": 1e-16}}"#).unwrap_err();
        assert!(matches!(err, Error::NoiseBelowFloor { .. }));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn round_trip() {
        let c = Config::default();
        assert_eq!(Config::from_json_str(&c.to_json_pretty()).unwrap(), c);
        assert!(default_keys().contains(&"suite.noise_levels".to_string()));
    }
}
