//! Run configuration: one TOML document covering every stage, with dotted-key
//! overrides and the grids used by the hyperparameter sweeps.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::correct::{RBase, RSampler, AUX_CONDITIONS};
use crate::data::{AugmentationLevel, Dataset2D, DatasetConfig};
use crate::error::{config_err, Error, Result};
use crate::eval::{BonConfig, DeviationConfig, EvalConfig};
use crate::net::{Activation, NetworkSpec, ScalarName, DEFAULT_MAX_FREQUENCY};
use crate::student::STUDENT_CONDITIONS;
use crate::teacher::{GuidanceInterval, TeacherConfig};
use crate::trainer::{BaselineConfig, DistillConfig};

/// Architecture shared by teacher, student and auxiliary networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    pub frequencies: usize,
    pub max_frequency: f64,
    pub activation: Activation,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            hidden_dims: vec![64, 64, 64],
            embed_dim: 32,
            frequencies: 16,
            max_frequency: DEFAULT_MAX_FREQUENCY,
            activation: Activation::Silu,
        }
    }
}

impl NetworkConfig {
    pub fn spec(&self, ds: &Dataset2D, conditions: &[ScalarName]) -> NetworkSpec {
        NetworkSpec {
            input_dim: ds.dim(),
            hidden_dims: self.hidden_dims.clone(),
            output_dim: ds.dim(),
            activation: self.activation,
            scalar_conditions: conditions.to_vec(),
            class_count: ds.class_count(),
            embed_dim: self.embed_dim,
            frequencies: self.frequencies,
            max_frequency: self.max_frequency,
        }
    }

    pub fn teacher_spec(&self, ds: &Dataset2D) -> NetworkSpec {
        self.spec(ds, &[ScalarName::T])
    }
}

/// Multi-seed experiment settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    /// Evaluation interval of training curves, in steps.
    pub eval_every: usize,
    /// Step budget of the long single-objective runs.
    pub extended_steps: usize,
    pub augmentation_levels: Vec<usize>,
    pub deviation: DeviationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seeds: vec![1, 2, 3],
            eval_every: 500,
            extended_steps: 12000,
            augmentation_levels: vec![0, 1, 2, 3],
            deviation: DeviationConfig::default(),
        }
    }
}

/// Values visited by the one-factor sweeps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrids {
    pub alpha: Vec<f64>,
    /// Logit-normal means for the noise-level sweep.
    pub r_mean: Vec<f64>,
    pub r_std: f64,
    /// Upper ends of uniform noise-level ranges `[0, hi]`.
    pub r_upper: Vec<f64>,
    /// Upper ends of correction guidance intervals `[0, hi]`.
    pub interval_upper: Vec<f64>,
    pub k: Vec<f64>,
}

impl Default for SweepGrids {
    fn default() -> Self {
        SweepGrids {
            alpha: vec![0.15, 0.3, 0.6, 1.2],
            r_mean: vec![-0.4, 0.0, 0.4, 0.8, 1.2],
            r_std: 1.6,
            r_upper: vec![0.6, 0.7, 0.8, 0.9, 1.0],
            interval_upper: vec![0.5, 0.6, 0.7, 0.8, 0.9, 1.0],
            k: vec![0.0, 0.5, 1.0],
        }
    }
}

pub type Variants = Vec<(String, DistillConfig)>;

impl SweepGrids {
    pub fn alpha_variants(&self, base: &DistillConfig) -> Variants {
        self.alpha
            .iter()
            .map(|&a| {
                let mut c = base.clone();
                c.balance.alpha_ref = a;
                (format!("{a}"), c)
            })
            .collect()
    }

    /// Logit-normal means first, then uniform ranges.
    pub fn r_variants(&self, base: &DistillConfig) -> Variants {
        let means = self.r_mean.iter().map(|&m| {
            let mut c = base.clone();
            c.r = RSampler {
                base: RBase::LogitNormal { mean: m, std: self.r_std },
                lo: 0.0,
                hi: 1.0,
            };
            (format!("logit_normal({m}, {})", self.r_std), c)
        });
        let ranges = self.r_upper.iter().map(|&hi| {
            let mut c = base.clone();
            c.r = RSampler {
                base: RBase::Uniform,
                lo: 0.0,
                hi,
            };
            (format!("uniform[0, {hi}]"), c)
        });
        means.chain(ranges).collect()
    }

    pub fn interval_variants(&self, base: &DistillConfig) -> Variants {
        self.interval_upper
            .iter()
            .map(|&hi| {
                let mut c = base.clone();
                c.guidance.correction_interval = GuidanceInterval { lo: 0.0, hi };
                (format!("[0, {hi}]"), c)
            })
            .collect()
    }

    pub fn k_variants(&self, base: &DistillConfig) -> Variants {
        self.k
            .iter()
            .map(|&k| {
                let mut c = base.clone();
                c.k = k;
                (format!("{k:.1}"), c)
            })
            .collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub network: NetworkConfig,
    pub teacher: TeacherConfig,
    pub distill: DistillConfig,
    pub baseline: BaselineConfig,
    pub eval: EvalConfig,
    pub bon: BonConfig,
    pub experiments: ExperimentConfig,
    pub sweeps: SweepGrids,
}

fn parse_err(e: impl std::fmt::Display) -> Error {
    Error::Parse(e.to_string().trim().replace('\n', " "))
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(parse_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(parse_err)
    }

    /// Sets `key` (dotted path such as `distill.balance.alpha_ref`) to `raw`,
    /// parsed as a TOML value and falling back to a bare string. The result is
    /// re-checked against the schema, so misspelled keys are rejected.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let mut root = toml::Value::try_from(&*self).map_err(parse_err)?;
        let parts: Vec<&str> = key.split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(config_err!("malformed override key '{key}'"));
        }
        let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
            Ok(mut t) => t.remove("v").expect("parsed key"),
            Err(_) => toml::Value::String(raw.to_string()),
        };
        let mut node = &mut root;
        for part in &parts[..parts.len() - 1] {
            let table = node
                .as_table_mut()
                .ok_or_else(|| config_err!("override '{key}': '{part}' is not inside a table"))?;
            node = table
                .get_mut(*part)
                .ok_or_else(|| config_err!("override '{key}': unknown section '{part}'"))?;
        }
        let table = node
            .as_table_mut()
            .ok_or_else(|| config_err!("override '{key}' does not point into a table"))?;
        table.insert(parts[parts.len() - 1].to_string(), value);
        let next: RunConfig = root.try_into().map_err(|e| config_err!("override '{key}': {}", parse_err(e)))?;
        next.validate()?;
        *self = next;
        Ok(())
    }

    /// Applies `key=value` pairs in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| config_err!("override '{o}' is not of the form key=value"))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn dataset(&self) -> Result<Dataset2D> {
        Dataset2D::from_config(&self.dataset)
    }

    pub fn validate(&self) -> Result<()> {
        let ds = self.dataset()?;
        for conditions in [&[ScalarName::T][..], &STUDENT_CONDITIONS[..], &AUX_CONDITIONS[..]] {
            self.network.spec(&ds, conditions).validate()?;
        }
        self.teacher.validate()?;
        self.distill.validate()?;
        self.baseline.validate()?;
        if self.eval.samples < 2 || self.eval.projections < crate::metrics::MIN_PROJECTIONS {
            return Err(config_err!("eval needs at least 2 samples and {} projections", crate::metrics::MIN_PROJECTIONS));
        }
        if self.bon.n.is_empty() || self.bon.n.contains(&0) || self.bon.trials < 2 {
            return Err(config_err!("bon needs positive candidate counts and at least two trials"));
        }
        let ex = &self.experiments;
        if ex.seeds.is_empty() || ex.eval_every == 0 {
            return Err(config_err!("experiments need at least one seed and a positive eval_every"));
        }
        for &level in &ex.augmentation_levels {
            AugmentationLevel::ladder(level)?;
        }
        if ex.deviation.samples == 0 || ex.deviation.points == 0 {
            return Err(config_err!("deviation needs samples and grid points"));
        }
        let sw = &self.sweeps;
        if sw.r_std <= 0.0 || sw.r_upper.iter().chain(&sw.interval_upper).any(|&h| !(h > 0.0 && h <= 1.0)) {
            return Err(config_err!("sweep ranges must lie in (0, 1] with a positive r_std"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml_string().unwrap();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml_string().unwrap(), text);
    }

    #[test]
    fn empty_document_is_the_default() {
        assert_eq!(RunConfig::from_toml_str("").unwrap(), RunConfig::default());
    }

    #[test]
    fn misspelled_keys_are_fatal() {
        for text in ["[distill]\nstepz = 10\n", "[distill.balance]\nalpha = 0.3\n", "[nope]\n"] {
            assert!(matches!(RunConfig::from_toml_str(text), Err(Error::Parse(_))), "{text}");
        }
        let mut cfg = RunConfig::default();
        assert!(cfg.set("distill.stepz", "10").is_err());
        assert!(cfg.set("distil.steps", "10").is_err());
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let mut cfg = RunConfig::default();
        cfg.apply_overrides(&[
            "distill.balance.alpha_ref=0.6",
            "distill.objective=prediction",
            "bon.n=[1, 4]",
            "distill.aux_batch_size=64",
        ])
        .unwrap();
        assert_eq!(cfg.distill.balance.alpha_ref, 0.6);
        assert_eq!(cfg.distill.objective, crate::trainer::ObjectiveMode::Prediction);
        assert_eq!(cfg.bon.n, vec![1, 4]);
        assert_eq!(cfg.distill.aux_batch_size, Some(64));
        assert!(cfg.set("distill.split.prediction", "1.5").is_err());
    }

    #[test]
    fn k_grid_has_three_rows() {
        let v = SweepGrids::default().k_variants(&DistillConfig::default());
        let labels: Vec<&str> = v.iter().map(|(l, _)| l.as_str()).collect();
        assert_eq!(labels, ["0.0", "0.5", "1.0"]);
        assert_eq!(v[1].1.k, 0.5);
    }
}
