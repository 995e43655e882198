//! Model checkpoints as safetensors archives.
//!
//! Every parameter is stored under its store name as little-endian `F64`.
//! The header metadata holds the format version, the run config, its hash and
//! the attribute schema when an adapter bank is attached. Loading rebuilds
//! the model from the config and refuses missing, extra or mis-shaped
//! tensors.

use std::collections::HashMap;
use std::path::Path;

use m2a_core::data::AttributeSchema;
use m2a_core::model::ModelState;
use m2a_core::numerics::Tensor;
use m2a_core::params::{ParamGroup, ParamStore};
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::io::write_atomic;

pub const FORMAT_VERSION: &str = "1";

const KEY_VERSION: &str = "m2a.format_version";
const KEY_CONFIG: &str = "m2a.config";
const KEY_HASH: &str = "m2a.config_hash";
const KEY_SCHEMA: &str = "m2a.schema";

pub fn to_bytes(model: &ModelState, config: &RunConfig) -> Result<Vec<u8>, CliError> {
    if model.config() != &config.backbone {
        return Err(CliError::config("model backbone differs from the run config"));
    }
    let mut meta = HashMap::new();
    meta.insert(KEY_VERSION.to_string(), FORMAT_VERSION.to_string());
    meta.insert(KEY_CONFIG.to_string(), serde_json::to_string(config).expect("config serializes"));
    meta.insert(KEY_HASH.to_string(), config.hash());
    if let Some(schema) = model.schema() {
        meta.insert(KEY_SCHEMA.to_string(), serde_json::to_string(schema).expect("schema serializes"));
    }
    let buffers: Vec<(String, Vec<usize>, Vec<u8>)> = model
        .store()
        .iter()
        .map(|(_, e)| {
            let bytes = e.value.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            (e.name.clone(), e.value.shape().to_vec(), bytes)
        })
        .collect();
    let views = buffers
        .iter()
        .map(|(n, s, b)| Ok((n.as_str(), TensorView::new(Dtype::F64, s.clone(), b)?)))
        .collect::<Result<Vec<_>, safetensors::SafeTensorError>>()
        .map_err(|e| CliError::Checkpoint {
            path: String::new(),
            message: e.to_string(),
        })?;
    let bytes = safetensors::serialize(views, &Some(meta)).map_err(|e| CliError::Checkpoint {
        path: String::new(),
        message: e.to_string(),
    })?;
    Ok(canonical_header(bytes))
}

/// The metadata map is serialized in hash order, so identical checkpoints
/// could differ byte-wise. Rewrites the header with sorted keys; the compact
/// JSON has the same length, so offsets and padding are unchanged.
fn canonical_header(mut bytes: Vec<u8>) -> Vec<u8> {
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("length prefix")) as usize;
    let header = &bytes[8..8 + n];
    let text = std::str::from_utf8(header).expect("utf-8 header");
    let trimmed = text.trim_end();
    let value: serde_json::Value = serde_json::from_str(trimmed).expect("valid header");
    let sorted = serde_json::to_string(&value).expect("header serializes");
    assert_eq!(sorted.len(), trimmed.len(), "canonical header changed length");
    bytes[8..8 + sorted.len()].copy_from_slice(sorted.as_bytes());
    bytes
}

pub fn save_checkpoint(path: &Path, model: &ModelState, config: &RunConfig) -> Result<(), CliError> {
    let bytes = to_bytes(model, config).map_err(|e| match e {
        CliError::Checkpoint { message, .. } => CliError::checkpoint(path, message),
        other => other,
    })?;
    write_atomic(path, &bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelState, RunConfig), CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        CliError::Checkpoint { message, .. } => CliError::checkpoint(path, message),
        other => other,
    })
}

pub fn from_bytes(bytes: &[u8]) -> Result<(ModelState, RunConfig), CliError> {
    let bad = |m: String| CliError::Checkpoint {
        path: String::new(),
        message: m,
    };
    let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| bad(e.to_string()))?;
    let meta = header
        .metadata()
        .as_ref()
        .ok_or_else(|| bad("missing metadata".into()))?;
    let get = |k: &str| meta.get(k).ok_or_else(|| bad(format!("metadata lacks `{k}`")));
    let version = get(KEY_VERSION)?;
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let config: RunConfig = serde_json::from_str(get(KEY_CONFIG)?).map_err(|e| bad(format!("config: {e}")))?;
    if &config.hash() != get(KEY_HASH)? {
        return Err(bad("config hash does not match the stored config".into()));
    }
    let schema: Option<AttributeSchema> = meta
        .get(KEY_SCHEMA)
        .map(|s| serde_json::from_str(s).map_err(|e| bad(format!("schema: {e}"))))
        .transpose()?;

    let st = SafeTensors::deserialize(bytes).map_err(|e| bad(e.to_string()))?;
    let mut loaded = ParamStore::new();
    let mut names: Vec<String> = st.names().into_iter().cloned().collect();
    names.sort();
    for name in names {
        let view = st.tensor(&name).map_err(|e| bad(e.to_string()))?;
        if view.dtype() != Dtype::F64 {
            return Err(bad(format!("tensor `{name}` has dtype {:?}, expected F64", view.dtype())));
        }
        let data: Vec<f64> = view
            .data()
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::new(view.shape().to_vec(), data)?;
        // Groups are re-derived from the config when the model is rebuilt.
        loaded.insert(name, ParamGroup::Base, t)?;
    }
    let bank = schema.as_ref().map(|s| (s, config.bank.clone()));
    let model = ModelState::from_store(config.backbone.clone(), &loaded, bank)?;
    Ok((model, config))
}
