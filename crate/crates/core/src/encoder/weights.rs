//! Weight manifests: a directory holding `index.txt` (one
//! `<name>\t<dtype>\t<d0,d1,..>\t<file>` line per array) and one raw
//! little-endian array file per parameter.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{ParameterStore, Tensor};

pub const INDEX_FILE: &str = "index.txt";

fn shape_text(shape: &[usize]) -> String {
    shape
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

/// Writes every parameter as `f64`.
pub fn export_weights(store: &ParameterStore, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = String::new();
    for (name, tensor) in store.iter() {
        let file = format!("{name}.bin");
        let bytes: Vec<u8> = tensor
            .data()
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        index.push_str(&format!("{name}\tf64\t{}\t{file}\n", shape_text(tensor.shape())));
    }
    let path = dir.join(INDEX_FILE);
    fs::write(&path, index).map_err(|e| Error::io(&path, e))
}

/// Reads every array listed in a manifest. `f32` arrays are widened.
pub fn read_weight_manifest(dir: &Path) -> Result<BTreeMap<String, Tensor>> {
    let index_path = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: index_path.clone(),
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        let [name, dtype, shape, file] = fields.as_slice() else {
            return Err(err("expected <name>\\t<dtype>\\t<shape>\\t<file>".into()));
        };
        let shape: Vec<usize> = if shape.is_empty() {
            Vec::new()
        } else {
            shape
                .split(',')
                .map(|d| d.parse().map_err(|_| err(format!("bad dimension '{d}'"))))
                .collect::<Result<_>>()?
        };
        let path = dir.join(file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let data: Vec<f64> = match *dtype {
            "f64" => bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            "f32" => bytes
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                .collect(),
            other => return Err(err(format!("unsupported dtype '{other}'"))),
        };
        let tensor = Tensor::new(shape, data)
            .map_err(|_| err(format!("{} does not match the declared shape", path.display())))?;
        out.insert(name.to_string(), tensor);
    }
    Ok(out)
}

/// Outcome of a successful import.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ImportReport {
    pub loaded: Vec<String>,
    /// Manifest arrays with no matching parameter; ignored.
    pub unmatched: Vec<String>,
}

/// Replaces every parameter of `store` with the manifest array of the same
/// name. Missing names and shape mismatches are all reported together and
/// leave `store` untouched.
pub fn import_weights(store: &mut ParameterStore, dir: &Path) -> Result<ImportReport> {
    let arrays = read_weight_manifest(dir)?;
    let mut problems = Vec::new();
    for (name, current) in store.iter() {
        match arrays.get(name) {
            None => problems.push(format!("missing required parameter '{name}'")),
            Some(t) if t.shape() != current.shape() => problems.push(format!(
                "'{name}' has shape {:?}, expected {:?}",
                t.shape(),
                current.shape()
            )),
            Some(_) => {}
        }
    }
    if !problems.is_empty() {
        return Err(Error::Weights(problems));
    }
    let mut report = ImportReport::default();
    for (name, tensor) in arrays {
        match store.get_mut(&name) {
            Some(slot) => {
                *slot = tensor;
                report.loaded.push(name);
            }
            None => report.unmatched.push(name),
        }
    }
    Ok(report)
}
