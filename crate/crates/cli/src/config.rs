//! Experiment configuration files.
//!
//! A config is a single TOML document whose sections mirror the simulator
//! types: `crossbar`, `mapping`, `dac`, `adc`, `precision`, `update`,
//! `engine`, `model` and `dataset`, plus a few top-level run settings.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use xbar_core::circuit::{AamPaths, CrossbarConfig, FcmOptions, DEFAULT_FCM_MAX_ITER, DEFAULT_FCM_TOL};
use xbar_core::converters::{AdcSpec, DacSpec};
use xbar_core::mapping::MappingSpec;
use xbar_core::nn::{Backend, BlobSpec, CrossbarSettings, Engine, LayerSpec, Precision};
use xbar_core::update::UpdateSpec;

fn default_calib_batches() -> usize {
    2
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_tol() -> f64 {
    DEFAULT_FCM_TOL
}

fn default_max_iter() -> usize {
    DEFAULT_FCM_MAX_ITER
}

fn default_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    /// Exact fixed-point arithmetic, no crossbar model.
    Digital,
    #[default]
    Crossbar,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EngineConfig {
    Ideal,
    Oracle,
    Fcm {
        #[serde(default = "default_tol")]
        tol: f64,
        #[serde(default = "default_max_iter")]
        max_iter: usize,
    },
    Aam {
        #[serde(default)]
        paths: AamPaths,
    },
    InterpFcm {
        interval: usize,
        #[serde(default = "default_tol")]
        tol: f64,
        #[serde(default = "default_max_iter")]
        max_iter: usize,
    },
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig::Aam { paths: AamPaths::default() }
    }
}

impl EngineConfig {
    pub fn engine(&self) -> Engine {
        match *self {
            EngineConfig::Ideal => Engine::Ideal,
            EngineConfig::Oracle => Engine::Oracle,
            EngineConfig::Fcm { tol, max_iter } => Engine::Fcm(FcmOptions { tol, max_iter }),
            EngineConfig::Aam { paths } => Engine::Aam(paths),
            EngineConfig::InterpFcm { interval, tol, max_iter } => {
                Engine::InterpFcm { interval, fcm: FcmOptions { tol, max_iter } }
            }
        }
    }

    /// FCM settings of this engine, or the defaults for engines without any.
    pub fn fcm_options(&self) -> FcmOptions {
        match *self {
            EngineConfig::Fcm { tol, max_iter } | EngineConfig::InterpFcm { tol, max_iter, .. } => {
                FcmOptions { tol, max_iter }
            }
            _ => FcmOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Seeded Gaussian clusters; train and test share centres.
    Blobs {
        classes: usize,
        dim: usize,
        separation: f64,
        spread: f64,
        #[serde(default)]
        seed: u64,
        train_per_class: usize,
        test_per_class: usize,
    },
    /// `label,f1,f2,...` rows.
    Csv {
        train: PathBuf,
        test: PathBuf,
        #[serde(default = "default_scale")]
        scale: f64,
        /// Sample shape, e.g. `[1, 28, 28]`; flat by default.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        shape: Option<Vec<usize>>,
    },
    /// MNIST-style IDX image and label files.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default = "default_scale")]
        scale: f64,
        /// Keep only the first samples of each split.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train_limit: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_limit: Option<usize>,
    },
}

impl DatasetConfig {
    pub fn blob_spec(&self) -> Option<BlobSpec> {
        match *self {
            DatasetConfig::Blobs { classes, dim, separation, spread, seed, .. } => {
                Some(BlobSpec { classes, dim, separation, spread, seed })
            }
            _ => None,
        }
    }

    fn paths_mut(&mut self) -> Vec<&mut PathBuf> {
        match self {
            DatasetConfig::Blobs { .. } => Vec::new(),
            DatasetConfig::Csv { train, test, .. } => vec![train, test],
            DatasetConfig::Idx { train_images, train_labels, test_images, test_labels, .. } => {
                vec![train_images, train_labels, test_images, test_labels]
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seeds weight initialisation and the minibatch order.
    #[serde(default)]
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Training batches observed for every ADC calibration.
    #[serde(default = "default_calib_batches")]
    pub calib_batches: usize,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub backend: BackendKind,
    #[serde(default)]
    pub crossbar: CrossbarConfig,
    #[serde(default)]
    pub mapping: MappingSpec,
    #[serde(default)]
    pub dac: DacSpec,
    /// Absent for a transparent readout.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adc: Option<AdcSpec>,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub update: UpdateSpec,
    #[serde(default)]
    pub engine: EngineConfig,
    pub model: ModelConfig,
    pub dataset: DatasetConfig,
}

impl ExperimentConfig {
    /// Parses a config from TOML text. Relative dataset paths are kept as written.
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| anyhow!("{}", e.message().trim_end()).context(locate(text, &e)))
    }

    /// Reads, parses and validates a config file. Relative dataset paths are
    /// resolved against the directory holding the file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        let mut cfg = Self::from_toml(&text).with_context(|| format!("invalid config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in cfg.dataset.paths_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate().with_context(|| format!("invalid config {}", path.display()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn crossbar_settings(&self) -> CrossbarSettings {
        CrossbarSettings {
            crossbar: self.crossbar,
            mapping: self.mapping.clone(),
            dac: self.dac.clone(),
            adc: self.adc.clone(),
            precision: self.precision,
            engine: self.engine.engine(),
            update: self.update.clone(),
        }
    }

    pub fn backend(&self) -> Backend {
        let xs = self.crossbar_settings();
        match self.backend {
            BackendKind::Digital => Backend::Digital(xs.digital_reference()),
            BackendKind::Crossbar => Backend::Crossbar(Box::new(xs)),
        }
    }

    /// Cross-field checks run before any work starts.
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            bail!("epochs must be >= 1");
        }
        if self.batch_size == 0 {
            bail!("batch_size must be >= 1");
        }
        if self.model.layers.is_empty() {
            bail!("model.layers must list at least one layer");
        }
        // the crossbar sections are checked even for the digital backend so
        // a config never silently carries an unusable hardware description
        self.crossbar_settings().validate()?;
        self.backend().validate()?;
        match &self.dataset {
            DatasetConfig::Blobs { train_per_class, test_per_class, .. } => {
                if *train_per_class == 0 || *test_per_class == 0 {
                    bail!("dataset.train_per_class and dataset.test_per_class must be >= 1");
                }
                let spec = self.dataset.blob_spec().expect("blob dataset");
                if spec.classes < 2 || spec.dim == 0 {
                    bail!("dataset.classes must be >= 2 and dataset.dim >= 1");
                }
                if !(spec.separation > 0.0 && spec.spread >= 0.0) {
                    bail!("dataset.separation must be > 0 and dataset.spread >= 0");
                }
            }
            DatasetConfig::Csv { scale, .. } | DatasetConfig::Idx { scale, .. } => {
                if !(scale.is_finite() && *scale > 0.0) {
                    bail!("dataset.scale must be > 0, got {scale}");
                }
            }
        }
        Ok(())
    }

    /// Copy with every dotted `path` set to `value`, validated.
    ///
    /// `value` is read as a TOML literal (number, boolean, array...) and
    /// falls back to a bare string. The path must name a field of the
    /// config: intermediate sections have to exist and the final key is
    /// checked by re-parsing.
    pub fn with_override(&self, paths: &[String], value: &str) -> Result<Self> {
        let build = |literal: toml::Value| -> Result<ExperimentConfig> {
            let mut root = toml::Value::try_from(self)?;
            for path in paths {
                set_path(&mut root, path, literal.clone())?;
            }
            root.try_into().map_err(|e: toml::de::Error| anyhow!("{}", e.message().trim_end()))
        };
        let literal = parse_literal(value);
        let parsed = match (build(literal.clone()), literal) {
            // optional float fields that are currently unset
            (Err(_), toml::Value::Integer(i)) => build(toml::Value::Float(i as f64)),
            (r, _) => r,
        };
        let cfg = parsed.with_context(|| format!("cannot set {} = {value}", paths.join(",")))?;
        cfg.validate().with_context(|| format!("{} = {value}", paths.join(",")))?;
        Ok(cfg)
    }
}

fn locate(text: &str, e: &toml::de::Error) -> String {
    match e.span() {
        Some(span) => {
            let line = text[..span.start.min(text.len())].lines().count().max(1);
            format!("at line {line}")
        }
        None => "in config".to_string(),
    }
}

fn parse_literal(value: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()))
}

fn set_path(root: &mut toml::Value, path: &str, value: toml::Value) -> Result<()> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        bail!("malformed parameter path {path:?}");
    }
    let (last, parents) = keys.split_last().expect("split yields at least one key");
    let mut node = root;
    for (depth, key) in parents.iter().enumerate() {
        node = node
            .get_mut(*key)
            .filter(|n| n.is_table())
            .ok_or_else(|| anyhow!("parameter path {path:?} does not resolve: no section {:?}", keys[..=depth].join(".")))?;
    }
    let table = node.as_table_mut().expect("checked above");
    let value = match (table.get(*last), value) {
        // integer literal for a float field, e.g. gamma = 5
        (Some(toml::Value::Float(_)), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
        (_, v) => v,
    };
    table.insert((*last).to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOY: &str = r#"
        seed = 3
        epochs = 2
        batch_size = 8

        [crossbar]
        rows = 16
        cols = 16

        [mapping]
        tile_rows = 16
        tile_cols = 16

        [update]
        lr = 0.05
        gamma = 1.0

        [engine]
        kind = "interp_fcm"
        interval = 10

        [model]
        layers = [{ type = "dense", outputs = 4 }]

        [dataset]
        kind = "blobs"
        classes = 4
        dim = 6
        separation = 1.0
        spread = 0.5
        train_per_class = 10
        test_per_class = 5
    "#;

    #[test]
    fn round_trip_is_stable() {
        let cfg = ExperimentConfig::from_toml(TOY).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.crossbar.r_col, 4.6);
        assert_eq!(cfg.engine, EngineConfig::InterpFcm { interval: 10, tol: 1e-6, max_iter: 1000 });
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn tile_larger_than_array_names_both_fields() {
        let bad = TOY.replace("tile_rows = 16", "tile_rows = 128");
        let msg = format!("{:#}", ExperimentConfig::from_toml(&bad).unwrap().validate().unwrap_err());
        assert!(msg.contains("mapping.tile_rows") && msg.contains("crossbar.rows"), "{msg}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = TOY.replace("gamma = 1.0", "gama = 1.0");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
    }

    #[test]
    fn overrides() {
        let cfg = ExperimentConfig::from_toml(TOY).unwrap();
        let v = cfg.with_override(&["update.gamma".into()], "5").unwrap();
        assert_eq!(v.update.gamma, 5.0);
        let v = cfg.with_override(&["engine.interval".into()], "1").unwrap();
        assert_eq!(v.engine, EngineConfig::InterpFcm { interval: 1, tol: 1e-6, max_iter: 1000 });
        let dims = ["crossbar.rows", "crossbar.cols", "mapping.tile_rows", "mapping.tile_cols"].map(String::from);
        let v = cfg.with_override(&dims, "8").unwrap();
        assert_eq!((v.crossbar.rows, v.mapping.tile_cols), (8, 8));
        let v = cfg.with_override(&["mapping.wmax".into()], "2.5").unwrap();
        assert_eq!(v.mapping.wmax, Some(2.5));
        assert!(cfg.with_override(&["update.nope".into()], "1").is_err());
        assert!(cfg.with_override(&["nothing.v".into()], "1").is_err());
        assert!(cfg.with_override(&["update.lr".into()], "-1").is_err());
        assert!(cfg.with_override(&["engine.kind".into()], "\"fcm\"").is_err());
    }
}
