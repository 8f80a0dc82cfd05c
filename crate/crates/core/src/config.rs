//! One JSON run configuration shared by every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::baselines::HeuristicConfig;
use crate::bench::EvalConfig;
use crate::error::{Error, Result};
use crate::geometry::CameraModel;
use crate::landscape::{GridSpec, DEFAULT_WINDOW};
use crate::net::{Architecture, InputNorm};
use crate::similarity::{KernelConfig, ObjectiveConfig};
use crate::synth::{LandscapeContext, SceneTemplate};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub scenes: usize,
    pub centers_per_scene: usize,
    pub template: SceneTemplate,
    /// Share of samples held out from training.
    pub validation_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            scenes: 40,
            centers_per_scene: 50,
            template: SceneTemplate::default(),
            validation_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub input_norm: InputNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    pub scenes: usize,
    pub trials_per_scene: usize,
    /// Drop noise and outliers from the benchmark scenes.
    pub noiseless: bool,
    /// Added to the master seed so benchmark scenes differ from training scenes.
    pub seed_offset: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            scenes: 3,
            trials_per_scene: 2,
            noiseless: false,
            seed_offset: 1_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub camera: CameraModel,
    pub grid: GridSpec,
    pub kernel: KernelConfig,
    pub objective: ObjectiveConfig,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub heuristics: HeuristicConfig,
    pub eval: EvalConfig,
    pub suite: SuiteConfig,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            camera: CameraModel::default(),
            grid: GridSpec::default(),
            kernel: KernelConfig::default(),
            objective: ObjectiveConfig::default(),
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            heuristics: HeuristicConfig::default(),
            eval: EvalConfig::default(),
            suite: SuiteConfig::default(),
            seed: 0,
            output_dir: PathBuf::from("iron-out"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::config(path.display().to_string(), e.to_string()))
    }

    /// Sets the field at a dotted path such as `train.epochs`.
    ///
    /// The value is parsed as JSON when possible and taken as a string
    /// otherwise.
    pub fn set(&mut self, path: &str, raw: &str) -> Result<()> {
        let mut root = serde_json::to_value(&*self)?;
        let mut slot = &mut root;
        for key in path.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(key))
                .ok_or_else(|| Error::config(path, "no such field"))?;
        }
        *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        *self = serde_json::from_value(root).map_err(|e| Error::config(path, e.to_string()))?;
        Ok(())
    }

    /// Checks every section; nothing should be written before this passes.
    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        self.grid.validate()?;
        self.kernel.validate()?;
        self.objective.validate()?;
        self.model.architecture.validate()?;
        self.train.validate()?;
        self.heuristics.validate()?;
        self.eval.validate()?;
        let t = &self.dataset.template;
        if t.n_points < 4 {
            return Err(Error::config("dataset.template.n_points", "must be >= 4"));
        }
        if !(t.noise_sigma.is_finite() && t.noise_sigma >= 0.0) {
            return Err(Error::config("dataset.template.noise_sigma", "must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&t.outlier_fraction) {
            return Err(Error::config("dataset.template.outlier_fraction", "must lie in [0, 1)"));
        }
        if !(t.field_extent.is_finite() && t.field_extent > 0.0) {
            return Err(Error::config("dataset.template.field_extent", "must be > 0"));
        }
        if let Some(step) = t.orbit_step_degrees {
            if !(step.is_finite() && step > 0.0) {
                return Err(Error::config("dataset.template.orbit_step_degrees", "must be > 0"));
            }
        }
        if self.dataset.scenes == 0 {
            return Err(Error::config("dataset.scenes", "must be >= 1"));
        }
        let admissible = self.grid.admissible_centers(DEFAULT_WINDOW).len();
        if self.dataset.centers_per_scene == 0 || self.dataset.centers_per_scene > admissible {
            return Err(Error::config(
                "dataset.centers_per_scene",
                format!("must lie in 1..={admissible}"),
            ));
        }
        if !(0.0..1.0).contains(&self.dataset.validation_fraction) {
            return Err(Error::config("dataset.validation_fraction", "must lie in [0, 1)"));
        }
        if self.suite.scenes == 0 {
            return Err(Error::config("suite.scenes", "must be >= 1"));
        }
        if self.suite.trials_per_scene == 0 {
            return Err(Error::config("suite.trials_per_scene", "must be >= 1"));
        }
        Ok(())
    }

    pub fn landscape(&self) -> LandscapeContext {
        LandscapeContext {
            grid: self.grid,
            camera: self.camera,
            kernel: self.kernel,
            objective: self.objective,
        }
    }

    /// Scene template of the benchmark suite.
    pub fn suite_template(&self) -> SceneTemplate {
        let mut t = self.dataset.template;
        if self.suite.noiseless {
            t.noise_sigma = 0.0;
            t.outlier_fraction = 0.0;
        }
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.train.epochs, 40);
        assert_eq!(c.dataset.scenes * c.dataset.centers_per_scene, 2000);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"seed": 9, "train": {"epochs": 3}}"#).unwrap();
        assert_eq!((c.seed, c.train.epochs), (9, 3));
        assert_eq!(c.train.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn dotted_overrides() {
        let mut c = RunConfig::default();
        c.set("train.epochs", "2").unwrap();
        c.set("dataset.template.noise_sigma", "0.5").unwrap();
        c.set("output_dir", "somewhere").unwrap();
        c.set("model.input_norm", "none").unwrap();
        assert_eq!(c.train.epochs, 2);
        assert_eq!(c.dataset.template.noise_sigma, 0.5);
        assert_eq!(c.output_dir, PathBuf::from("somewhere"));
        assert_eq!(c.model.input_norm, InputNorm::None);
        let before = c.clone();
        let e = c.set("train.nope", "1").unwrap_err();
        assert!(e.to_string().contains("train.nope"));
        assert!(c.set("train.epochs", "\"many\"").is_err());
        assert_eq!(c, before);
    }

    #[test]
    fn validation_names_the_field() {
        let mut c = RunConfig::default();
        c.dataset.scenes = 0;
        assert!(c.validate().unwrap_err().to_string().contains("dataset.scenes"));
        let mut c = RunConfig::default();
        c.dataset.centers_per_scene = 1_000_000;
        assert!(c.validate().unwrap_err().to_string().contains("dataset.centers_per_scene"));
        let mut c = RunConfig::default();
        c.eval.t_pt = 0.0;
        assert!(c.validate().unwrap_err().to_string().contains("eval.t_pt"));
    }
}
