//! Run configuration: a JSON document plus `--set key=value` overrides.

use std::path::{Path, PathBuf};

use rd_binn_core::binn::TrainConfig;
use rd_binn_core::grid::Domain;
use rd_binn_core::solver::StepperSettings;
use rd_binn_core::sr::SrConfig;
use rd_binn_core::synth::{InitialCondition, ModelSpec};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

/// Observation noise; `omega_fraction` scales with the clean field's peak.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub gamma: f64,
    pub omega: Option<f64>,
    pub omega_fraction: Option<f64>,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            gamma: 0.0,
            omega: None,
            omega_fraction: Some(0.1),
        }
    }
}

impl NoiseConfig {
    pub fn omega_for_peak(&self, peak: f64) -> f64 {
        match (self.omega, self.omega_fraction) {
            (Some(w), _) => w,
            (None, Some(f)) => f * peak,
            (None, None) => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub model: ModelSpec,
    pub ic: InitialCondition,
    pub domain: Domain,
    /// Evenly spaced frames from `t_min` to `t_max`.
    pub n_frames: usize,
    pub noise: NoiseConfig,
    pub write_points: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            model: ModelSpec::default(),
            ic: InitialCondition::default(),
            domain: Domain::new((0.0, 1.5), (0.0, 1.1), (0.0, 2.0)).expect("valid reference domain"),
            n_frames: 9,
            noise: NoiseConfig::default(),
            write_points: false,
        }
    }
}

impl SynthConfig {
    pub fn times(&self) -> Vec<f64> {
        let d = &self.domain;
        if self.n_frames == 1 {
            return vec![d.t_min];
        }
        let mut t: Vec<f64> = (0..self.n_frames)
            .map(|s| d.t_min + d.duration() * s as f64 / (self.n_frames - 1) as f64)
            .collect();
        t[self.n_frames - 1] = d.t_max;
        t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointsInput {
    pub path: PathBuf,
    pub domain: Domain,
    /// Frames to bin into; defaults to the distinct record times.
    #[serde(default)]
    pub frame_times: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensityInput {
    pub path: PathBuf,
    /// Grid metadata JSON written alongside the density CSV.
    pub meta: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum InputConfig {
    Synth(SynthConfig),
    Points(PointsInput),
    Density(DensityInput),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub input: InputConfig,
    pub bin_size: f64,
    pub train: TrainConfig,
    pub patience_sweep: Vec<usize>,
    pub n_splits: usize,
    /// Explicit split seeds; `seed + k` for split `k` when absent.
    pub split_seeds: Option<Vec<u64>>,
    /// Patience used downstream; chosen by the median rule when absent.
    pub preferred_patience: Option<usize>,
    /// Relative slack on the best median validation loss for the median rule.
    pub preferred_tolerance: f64,
    pub ensemble_grid_points: usize,
    pub sr: SrConfig,
    pub solver: StepperSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            input: InputConfig::Synth(SynthConfig::default()),
            bin_size: 0.1,
            train: TrainConfig::default(),
            patience_sweep: vec![500, 1000, 2000],
            n_splits: 5,
            split_seeds: None,
            preferred_patience: None,
            preferred_tolerance: 0.03,
            ensemble_grid_points: rd_binn_core::ensemble::DEFAULT_GRID_POINTS,
            sr: SrConfig::default(),
            solver: StepperSettings::default(),
        }
    }
}

impl RunConfig {
    /// Reads `path` (or the defaults), applies overrides, resolves relative
    /// input paths against the config's directory and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let (mut value, base) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
                let v: Value = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                (v, p.parent().map(Path::to_path_buf).unwrap_or_default())
            }
            None => (serde_json::to_value(RunConfig::default()).expect("defaults serialise"), PathBuf::new()),
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut cfg: RunConfig = serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.resolve_paths(&base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.input {
            InputConfig::Points(p) => fix(&mut p.path),
            InputConfig::Density(d) => {
                fix(&mut d.path);
                fix(&mut d.meta);
            }
            InputConfig::Synth(_) => {}
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if !(self.bin_size > 0.0 && self.bin_size.is_finite()) {
            return bad(format!("bin_size must be positive, got {}", self.bin_size));
        }
        if self.patience_sweep.is_empty() || self.patience_sweep.contains(&0) {
            return bad("patience_sweep needs at least one positive patience".into());
        }
        if self.n_splits == 0 {
            return bad("n_splits must be at least 1".into());
        }
        if let Some(s) = &self.split_seeds {
            if s.len() != self.n_splits {
                return bad(format!("split_seeds has {} entries for {} splits", s.len(), self.n_splits));
            }
        }
        if let Some(p) = self.preferred_patience {
            if !self.patience_sweep.contains(&p) {
                return bad(format!("preferred_patience {p} is not in patience_sweep"));
            }
        }
        if !(self.preferred_tolerance >= 0.0) {
            return bad("preferred_tolerance must be non-negative".into());
        }
        if self.ensemble_grid_points < 8 {
            return bad("ensemble_grid_points must be at least 8".into());
        }
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.sr.validate().map_err(|e| CliError::Config(e.to_string()))?;
        match &self.input {
            InputConfig::Synth(s) => {
                s.domain.validate().map_err(|e| CliError::Config(e.to_string()))?;
                if s.n_frames == 0 {
                    return bad("synth n_frames must be at least 1".into());
                }
                let n = &s.noise;
                if n.omega.is_some_and(|w| !(w >= 0.0)) || n.omega_fraction.is_some_and(|f| !(f >= 0.0)) {
                    return bad("noise omega must be non-negative".into());
                }
            }
            InputConfig::Points(p) => {
                if !p.path.is_file() {
                    return bad(format!("points file {} does not exist", p.path.display()));
                }
            }
            InputConfig::Density(d) => {
                for f in [&d.path, &d.meta] {
                    if !f.is_file() {
                        return bad(format!("density input {} does not exist", f.display()));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn split_seeds(&self) -> Vec<u64> {
        self.split_seeds
            .clone()
            .unwrap_or_else(|| (0..self.n_splits as u64).map(|k| self.seed.wrapping_add(k)).collect())
    }
}

/// Sets a dotted path (`train.es_patience`, `patience_sweep.0`) to a JSON
/// value. The value stays a plain string when it is not valid JSON or when
/// the entry it replaces is a string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{assignment}` is not key=value")))?;
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let value = |old: Option<&Value>| match old {
        Some(Value::String(_)) => Value::String(raw.to_string()),
        _ => parsed.clone(),
    };
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (n, part) in parts.iter().enumerate() {
        let last = n + 1 == parts.len();
        cur = match cur {
            Value::Object(map) => {
                if last {
                    let v = value(map.get(*part));
                    map.insert(part.to_string(), v);
                    return Ok(());
                }
                let next = map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
                if next.is_null() {
                    *next = Value::Object(Default::default());
                }
                next
            }
            Value::Array(items) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| CliError::Config(format!("`{part}` in `{key}` is not an array index")))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| CliError::Config(format!("index {idx} in `{key}` out of range (len {len})")))?;
                if last {
                    *slot = value(Some(slot));
                    return Ok(());
                }
                slot
            }
            _ => return Err(CliError::Config(format!("`{key}` descends into a scalar"))),
        };
    }
    Err(CliError::Config("empty override key".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_json() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = RunConfig::load(
            None,
            &[
                "train.es_patience=42".into(),
                "patience_sweep=[10,20]".into(),
                "input.synth.noise.omega_fraction=0".into(),
                "sr.repeats=3".into(),
                "preferred_patience=20".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.es_patience, 42);
        assert_eq!(cfg.patience_sweep, vec![10, 20]);
        assert_eq!(cfg.sr.repeats, 3);
        let numeric = RunConfig::load(None, &["input.synth.model.growth=0.5".into()]).unwrap();
        let InputConfig::Synth(s) = &numeric.input else { panic!() };
        assert_eq!(s.model.growth, "0.5");
        assert_eq!(cfg.preferred_patience, Some(20));
        let InputConfig::Synth(s) = &cfg.input else { panic!() };
        assert_eq!(s.noise.omega_fraction, Some(0.0));
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let r = RunConfig::load(None, &["train.es_patiense=1".into()]);
        assert!(matches!(r, Err(CliError::Config(_))));
        assert!(matches!(RunConfig::load(None, &["no_equals".into()]), Err(CliError::Config(_))));
    }

    #[test]
    fn array_elements_can_be_overridden() {
        let cfg = RunConfig::load(None, &["patience_sweep.1=7".into()]).unwrap();
        assert_eq!(cfg.patience_sweep, vec![500, 7, 2000]);
        assert!(RunConfig::load(None, &["patience_sweep.9=7".into()]).is_err());
    }

    #[test]
    fn missing_input_file_fails_validation() {
        let r = RunConfig::load(None, &[r#"input={"points":{"path":"/nonexistent.csv","domain":{"x1_min":0,"x1_max":1,"x2_min":0,"x2_max":1,"t_min":0,"t_max":1}}}"#.into()]);
        assert!(matches!(r, Err(CliError::Config(m)) if m.contains("does not exist")));
    }

    #[test]
    fn preferred_patience_must_be_swept() {
        assert!(RunConfig::load(None, &["preferred_patience=3".into()]).is_err());
    }

    #[test]
    fn synth_times_span_the_domain() {
        let s = SynthConfig::default();
        let t = s.times();
        assert_eq!(t.len(), 9);
        assert_eq!((t[0], t[8]), (0.0, 2.0));
        assert!((t[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn split_seeds_are_distinct_and_stable() {
        let cfg = RunConfig::default();
        let s = cfg.split_seeds();
        assert_eq!(s, cfg.split_seeds());
        let mut d = s.clone();
        d.sort();
        d.dedup();
        assert_eq!(d.len(), 5);
    }
}
