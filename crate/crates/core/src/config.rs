//! Global JSON configuration, with dotted-path overrides and schema errors
//! that list every unknown key.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::control::ControllerConfig;
use crate::dataset::SamplerConfig;
use crate::estimator::TrainConfig;
use crate::mechanics::{EndEffector, FingerModel, RigidGripperModel};
use crate::scene::{DemoStyle, HeadModel, HeadParams, HeadPoseProvider, Wig, WigPresets};
use crate::sensing::{CameraModel, CurrentModel};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config keys: {}", .0.join(", "))]
    UnknownKeys(Vec<String>),
    #[error("config: {0}")]
    Parse(String),
    #[error("override `{0}`: expected key.path=value")]
    Override(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("reading config: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MechanicsConfig {
    pub finger: FingerModel,
    /// Distance between the two finger mounts, meters.
    pub jaw_separation: f64,
    pub rigid: RigidGripperModel,
}

impl Default for MechanicsConfig {
    fn default() -> Self {
        let ee = EndEffector::default();
        Self { finger: ee.finger, jaw_separation: ee.jaw_separation, rigid: RigidGripperModel::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemoConfig {
    pub style: DemoStyle,
    /// Seconds.
    pub duration: f64,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self { style: DemoStyle::Arc, duration: 35.0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub head: HeadParams,
    pub wigs: WigPresets,
    pub pose: HeadPoseProvider,
    pub demonstration: DemoConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlobalConfig {
    pub mechanics: MechanicsConfig,
    pub scene: SceneConfig,
    pub camera: CameraModel,
    pub current_model: CurrentModel,
    pub sampler: SamplerConfig,
    pub train: TrainConfig,
    pub controller: ControllerConfig,
}

impl GlobalConfig {
    /// Parse `text` (empty means all defaults), apply `key.path=value`
    /// overrides, then check the schema and every section.
    pub fn from_json(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut value: Value = if text.trim().is_empty() {
            Value::Object(Default::default())
        } else {
            serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let config = deserialize_listing_unknown(value)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)?,
            None => String::new(),
        };
        Self::from_json(&text, overrides)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.end_effector().finger.validate().map_err(|e| inv(&e))?;
        if !(self.mechanics.jaw_separation > 0.0) {
            return Err(ConfigError::Invalid("mechanics.jaw_separation must be positive".into()));
        }
        let rigid = &self.mechanics.rigid;
        if !(rigid.finger_length > 0.0 && rigid.jaw_separation > 0.0 && rigid.jaw_width > 0.0) {
            return Err(ConfigError::Invalid("mechanics.rigid dimensions must be positive".into()));
        }
        if !(rigid.contact_stiffness >= 100.0 * self.scene.head.k_scalp) {
            return Err(ConfigError::Invalid(
                "mechanics.rigid.contact_stiffness must be at least 100x scene.head.k_scalp".into(),
            ));
        }
        self.scene.head.validate().map_err(|e| inv(&e))?;
        for wig in Wig::ALL {
            let w = self.scene.wigs.get(wig);
            if !(w.h_hair >= 0.0 && w.k_hair > 0.0) {
                return Err(ConfigError::Invalid(format!("scene.wigs.{wig} needs h_hair >= 0 and k_hair > 0")));
            }
        }
        self.scene.pose.validate().map_err(|e| inv(&e))?;
        if !(self.scene.demonstration.duration > 0.0) {
            return Err(ConfigError::Invalid("scene.demonstration.duration must be positive".into()));
        }
        self.camera.validate().map_err(|e| inv(&e))?;
        let c = &self.current_model;
        if !(c.k_s > 0.0 && c.deadband >= 0.0 && c.noise_sigma >= 0.0) {
            return Err(ConfigError::Invalid("current_model needs k_s > 0, deadband >= 0, noise_sigma >= 0".into()));
        }
        self.sampler.validate().map_err(|e| inv(&e))?;
        self.train.validate().map_err(|e| inv(&e))?;
        if self.train.encoder.image_width != self.camera.width || self.train.encoder.image_height != self.camera.height
        {
            return Err(ConfigError::Invalid("train.encoder image size must match the camera".into()));
        }
        self.controller.validate().map_err(|e| inv(&e))
    }

    pub fn end_effector(&self) -> EndEffector {
        EndEffector { finger: self.mechanics.finger.clone(), jaw_separation: self.mechanics.jaw_separation }
    }

    /// Head at rest, with a wig preset's hair layer when one is given.
    pub fn head(&self, wig: Option<Wig>) -> HeadModel {
        let head = HeadModel::from_params(&self.scene.head);
        match wig {
            Some(w) => head.with_wig(self.scene.wigs.get(w)),
            None => head,
        }
    }

    /// Camera used while executing skills: same sensor noise as collection.
    pub fn task_camera(&self) -> CameraModel {
        CameraModel { depth_noise_mm: self.sampler.depth_noise_mm, ..self.camera.clone() }
    }
}

fn apply_override(root: &mut Value, spec: &str) -> Result<(), ConfigError> {
    let bad = || ConfigError::Override(spec.to_string());
    let (path, raw) = spec.split_once('=').ok_or_else(bad)?;
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(bad());
    }
    // Bare words are taken as strings so `--set scene.demonstration.style=arc` works.
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    for key in &keys[..keys.len() - 1] {
        let obj = node.as_object_mut().ok_or_else(bad)?;
        node = obj.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    node.as_object_mut().ok_or_else(bad)?.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

/// Deserialize, stripping and recording each unknown key until the rest
/// parses, so the error names all of them at once.
fn deserialize_listing_unknown(mut value: Value) -> Result<GlobalConfig, ConfigError> {
    let mut unknown = Vec::new();
    loop {
        match serde_path_to_error::deserialize::<_, GlobalConfig>(&value) {
            Ok(c) if unknown.is_empty() => return Ok(c),
            Ok(_) => return Err(ConfigError::UnknownKeys(unknown)),
            Err(e) => {
                let msg = e.inner().to_string();
                let Some(field) = msg.strip_prefix("unknown field `").and_then(|m| m.split('`').next()) else {
                    let path = e.path().to_string();
                    return Err(ConfigError::Parse(format!("{path}: {msg}")));
                };
                let parent: Vec<String> = e
                    .path()
                    .iter()
                    .filter_map(|s| match s {
                        serde_path_to_error::Segment::Map { key } => Some(key.clone()),
                        serde_path_to_error::Segment::Seq { index } => Some(index.to_string()),
                        _ => None,
                    })
                    .collect();
                // The reported path may or may not already end at the field.
                let parent = match parent.last() {
                    Some(last) if last == field => parent[..parent.len() - 1].to_vec(),
                    _ => parent,
                };
                if !remove_key(&mut value, &parent, field) {
                    return Err(ConfigError::Parse(msg));
                }
                let mut full = parent;
                full.push(field.to_string());
                unknown.push(full.join("."));
            }
        }
    }
}

fn remove_key(root: &mut Value, parent: &[String], field: &str) -> bool {
    let mut node = root;
    for k in parent {
        node = match node {
            Value::Object(m) => match m.get_mut(k) {
                Some(v) => v,
                None => return false,
            },
            Value::Array(a) => match k.parse::<usize>().ok().and_then(|i| a.get_mut(i)) {
                Some(v) => v,
                None => return false,
            },
            _ => return false,
        };
    }
    node.as_object_mut().is_some_and(|m| m.remove(field).is_some())
}
