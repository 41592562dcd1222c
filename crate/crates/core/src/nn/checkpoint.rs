//! Checkpoint files.
//!
//! A checkpoint is a safetensors file. Tensor names are
//! `<group>.<parameter path>` and the header metadata carries:
//!
//! | key            | value                                        |
//! |----------------|----------------------------------------------|
//! | `format`       | `privjscc-checkpoint`                        |
//! | `version`      | checkpoint layout version (currently `1`)    |
//! | `kind`         | `bundle`, `adversarial` or `classifier`      |
//! | `architecture` | JSON architecture descriptor                 |
//! | anything else  | caller-provided provenance (stage, hashes)   |

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, View};

use super::ParamStore;
use crate::error::{Error, Result};

pub const FORMAT: &str = "privjscc-checkpoint";
pub const VERSION: &str = "1";

struct F32View {
    dims: Vec<usize>,
    bytes: Vec<u8>,
}

impl View for F32View {
    fn dtype(&self) -> Dtype {
        Dtype::F32
    }

    fn shape(&self) -> &[usize] {
        &self.dims
    }

    fn data(&self) -> Cow<'_, [u8]> {
        Cow::Borrowed(&self.bytes)
    }

    fn data_len(&self) -> usize {
        self.bytes.len()
    }
}

/// Writes the given parameter groups plus metadata to `path`.
pub fn save(
    path: &Path,
    kind: &str,
    architecture_json: &str,
    groups: &[(&str, &ParamStore)],
    extra: &BTreeMap<String, String>,
) -> Result<()> {
    let mut views = Vec::new();
    for (group, store) in groups {
        for (name, var) in store.iter() {
            let values = var.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
            let bytes = values.iter().flat_map(|v| v.to_le_bytes()).collect();
            views.push((
                format!("{group}.{name}"),
                F32View {
                    dims: var.dims().to_vec(),
                    bytes,
                },
            ));
        }
    }
    let mut metadata: HashMap<String, String> = extra.clone().into_iter().collect();
    metadata.insert("format".into(), FORMAT.into());
    metadata.insert("version".into(), VERSION.into());
    metadata.insert("kind".into(), kind.into());
    metadata.insert("architecture".into(), architecture_json.into());
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(Error::io(parent))?;
    }
    let bytes = safetensors::serialize(views, Some(metadata))
        .map_err(|e| Error::format(path, e.to_string()))?;
    // write-then-rename so a reader never sees a half-written file
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(Error::io(&tmp))?;
    std::fs::rename(&tmp, path).map_err(Error::io(path))?;
    Ok(())
}

/// Loaded checkpoint contents.
#[derive(Debug)]
pub struct Loaded {
    pub metadata: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Loaded {
    pub fn get(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Input(format!("checkpoint metadata lacks `{key}`")))
    }
}

/// Reads a checkpoint, checking the format tag, version and `kind`.
pub fn load(path: &Path, kind: &str) -> Result<Loaded> {
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    let (_, header) =
        SafeTensors::read_metadata(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
    let metadata: BTreeMap<String, String> = header
        .metadata()
        .clone()
        .unwrap_or_default()
        .into_iter()
        .collect();
    if metadata.get("format").map(String::as_str) != Some(FORMAT) {
        return Err(Error::format(path, "not a privjscc checkpoint"));
    }
    if metadata.get("version").map(String::as_str) != Some(VERSION) {
        return Err(Error::format(path, "unsupported checkpoint version"));
    }
    if metadata.get("kind").map(String::as_str) != Some(kind) {
        return Err(Error::format(
            path,
            format!("expected a `{kind}` checkpoint, found {:?}", metadata.get("kind")),
        ));
    }
    let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
    let mut tensors = BTreeMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F32 {
            return Err(Error::format(path, format!("tensor {name} is not f32")));
        }
        let values: Vec<f32> = view
            .data()
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        tensors.insert(name, Tensor::from_vec(values, view.shape(), &Device::Cpu)?);
    }
    Ok(Loaded { metadata, tensors })
}
