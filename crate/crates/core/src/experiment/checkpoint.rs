//! JSON checkpoints: config echo, named arrays, shuffling-stream state.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::model::{build_model, Model};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct NamedArray {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format_version: u32,
    config: ExperimentConfig,
    input_dims: [usize; 3],
    num_classes: usize,
    prng_state: u64,
    tensors: Vec<NamedArray>,
}

/// A restored model together with what was saved alongside it.
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub model: Model,
    pub prng_state: u64,
}

pub fn checkpoint_to_string(model: &Model, config: &ExperimentConfig, prng_state: u64) -> String {
    let file = CheckpointFile {
        format_version: FORMAT_VERSION,
        config: config.clone(),
        input_dims: model.input_dims(),
        num_classes: model.num_classes(),
        prng_state,
        tensors: model
            .state()
            .into_iter()
            .map(|(name, t)| NamedArray {
                name,
                shape: t.shape().to_vec(),
                values: t.data().to_vec(),
            })
            .collect(),
    };
    let mut text = serde_json::to_string_pretty(&file).expect("checkpoint serializes");
    text.push('\n');
    text
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &Model, config: &ExperimentConfig, prng_state: u64) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, checkpoint_to_string(model, config, prng_state)).map_err(|e| Error::io(path, e))
}

pub fn checkpoint_from_str(text: &str) -> Result<Checkpoint> {
    let raw: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Format(format!("checkpoint is not valid JSON: {e}")))?;
    match raw.get("format_version").and_then(|v| v.as_u64()) {
        Some(v) if v == u64::from(FORMAT_VERSION) => {}
        Some(v) => {
            return Err(Error::Format(format!(
                "checkpoint format version {v}, this build reads {FORMAT_VERSION}"
            )))
        }
        None => return Err(Error::Format("checkpoint has no format_version".into())),
    }
    let file: CheckpointFile = serde_json::from_value(raw).map_err(|e| Error::Format(format!("malformed checkpoint: {e}")))?;
    file.config.validate()?;
    let mut model = build_model(&file.config, file.input_dims, file.num_classes)?;

    let mut stored: Vec<Option<NamedArray>> = file.tensors.into_iter().map(Some).collect();
    for (name, target) in model.state_mut() {
        let slot = stored
            .iter_mut()
            .find(|s| s.as_ref().is_some_and(|a| a.name == name))
            .ok_or_else(|| Error::Consistency(format!("checkpoint is missing parameter `{name}`")))?;
        let array = slot.take().expect("matched above");
        let declared: usize = array.shape.iter().product();
        if array.shape != target.shape() || array.values.len() != declared {
            return Err(Error::Consistency(format!(
                "parameter `{name}`: expected shape {:?}, file has shape {:?} with {} values",
                target.shape(),
                array.shape,
                array.values.len()
            )));
        }
        target.data_mut().copy_from_slice(&array.values);
    }
    if let Some(extra) = stored.into_iter().flatten().next() {
        return Err(Error::Consistency(format!(
            "checkpoint has unknown parameter `{}`",
            extra.name
        )));
    }
    Ok(Checkpoint {
        config: file.config,
        model,
        prng_state: file.prng_state,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_str(&text)
}
