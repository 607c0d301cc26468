//! Run configuration, read from TOML or JSON and overridable from the
//! environment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::eval::EvalConfig;
use crate::field::FieldConfig;
use crate::guidance::ScheduleConfig;
use crate::render::CameraPose;
use crate::train::TrainPlan;
use crate::{Error, Result};

/// Prefix of environment overrides, e.g. `SDS3D_SEED=7` or
/// `SDS3D_TRAIN__STAGE1_EPOCHS=3` (`__` separates nesting levels).
pub const ENV_PREFIX: &str = "SDS3D_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConditionKind {
    Depth,
    Scribble,
    Pose,
    Canny,
    Text,
}

/// A precomputed condition map, or a text file for `text`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionInput {
    pub kind: ConditionKind,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// RGB or RGBA reference image.
    pub image: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
    /// 16-bit grayscale PNG or `.npy` grid.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pseudo_depth: Option<PathBuf>,
    pub conditions: Vec<ConditionInput>,
    pub reference_pose: CameraPose,
    pub train: TrainPlan,
    pub field: FieldConfig,
    pub schedule: ScheduleConfig,
    pub backend: String,
    pub backend_options: serde_json::Map<String, serde_json::Value>,
    pub eval: EvalConfig,
    pub output: PathBuf,
    /// At most `i64::MAX` so that it survives TOML.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            image: PathBuf::from("reference.png"),
            mask: None,
            pseudo_depth: None,
            conditions: Vec::new(),
            reference_pose: CameraPose::default(),
            train: TrainPlan::default(),
            field: FieldConfig::default(),
            schedule: ScheduleConfig::default(),
            backend: "reference-oracle".into(),
            backend_options: serde_json::Map::new(),
            eval: EvalConfig::default(),
            output: PathBuf::from("out"),
            seed: 0,
        }
    }
}

fn config_error(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(config_error)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(config_error)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(config_error)
    }

    /// Reads a `.json` file as JSON and anything else as TOML. Relative input
    /// paths are taken relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
            Self::from_json_str(&text)?
        } else {
            Self::from_toml_str(&text)?
        };
        if let Some(base) = path.parent() {
            config.resolve_inputs(base);
        }
        Ok(config)
    }

    fn resolve_inputs(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.image);
        self.mask.as_mut().map(fix);
        self.pseudo_depth.as_mut().map(fix);
        for c in &mut self.conditions {
            fix(&mut c.path);
        }
    }

    /// Applies `SDS3D_*` variables. Values parse as JSON when they can and are
    /// taken as strings otherwise.
    pub fn apply_env<I: IntoIterator<Item = (String, String)>>(&mut self, vars: I) -> Result<()> {
        let mut tree = serde_json::to_value(&*self)?;
        let mut touched = false;
        for (key, raw) in vars {
            let Some(rest) = key.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let path: Vec<String> = rest.split("__").map(|s| s.to_ascii_lowercase()).collect();
            let value = serde_json::from_str(&raw).unwrap_or(serde_json::Value::String(raw.clone()));
            set_path(&mut tree, &path, value).map_err(|e| Error::Config(format!("{key}: {e}")))?;
            touched = true;
        }
        if touched {
            *self = serde_json::from_value(tree).map_err(config_error)?;
        }
        Ok(())
    }

    /// Checks that referenced inputs exist. A missing pseudo-depth file is
    /// allowed; the depth term is then disabled.
    pub fn validate(&self) -> Result<()> {
        let required = std::iter::once(&self.image)
            .chain(self.mask.iter())
            .chain(self.conditions.iter().map(|c| &c.path));
        for p in required {
            if !p.exists() {
                return Err(Error::Config(format!("input file {} does not exist", p.display())));
            }
        }
        self.train.validate()?;
        self.field.grid.validate()?;
        self.reference_pose.validate()?;
        Ok(())
    }

    pub fn backend_options_value(&self) -> serde_json::Value {
        serde_json::Value::Object(self.backend_options.clone())
    }
}

fn set_path(tree: &mut serde_json::Value, path: &[String], value: serde_json::Value) -> std::result::Result<(), String> {
    let (last, parents) = path.split_last().ok_or("empty key")?;
    let mut node = tree;
    for key in parents {
        node = node
            .as_object_mut()
            .ok_or_else(|| format!("`{key}` is not inside a table"))?
            .entry(key.clone())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    node.as_object_mut()
        .ok_or_else(|| format!("`{last}` is not inside a table"))?
        .insert(last.clone(), value);
    Ok(())
}
