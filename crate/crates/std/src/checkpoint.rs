//! Versioned binary checkpoints.
//!
//! Layout (little endian): the 8-byte magic `CNLCKPT\0`, a `u32` format
//! version, a `u32` metadata length, the metadata as JSON, a `u64`
//! parameter count and the parameter values as `f64`.

use std::path::Path;

use causalnl_core::model::{flatten_params, load_params, Architecture, Branch, Classifier, Predict};
use causalnl_core::{rng, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::{read_bytes, write_bytes};

pub const MAGIC: &[u8; 8] = b"CNLCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Branch,
    Classifier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub kind: ModelKind,
    pub architecture: Architecture,
}

#[derive(Debug, Clone)]
pub enum Model {
    Branch(Branch),
    Classifier(Classifier),
}

impl Model {
    pub fn architecture(&self) -> &Architecture {
        match self {
            Model::Branch(b) => b.architecture(),
            Model::Classifier(c) => c.architecture(),
        }
    }

    fn metadata(&self) -> Metadata {
        Metadata {
            kind: match self {
                Model::Branch(_) => ModelKind::Branch,
                Model::Classifier(_) => ModelKind::Classifier,
            },
            architecture: *self.architecture(),
        }
    }

    fn values(&self) -> Vec<f64> {
        match self {
            Model::Branch(b) => flatten_params(&b.params()),
            Model::Classifier(c) => flatten_params(&c.params()),
        }
    }
}

impl Predict for Model {
    fn predict(&self, x: &Tensor) -> Vec<usize> {
        match self {
            Model::Branch(b) => b.predict(x),
            Model::Classifier(c) => c.predict(x),
        }
    }
}

pub fn encode(model: &Model) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(&model.metadata())?;
    let values = model.values();
    let mut out = Vec::with_capacity(24 + meta.len() + 8 * values.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| {
                format!(
                    "truncated: needed {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                )
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Model> {
    let fail = |m: String| Error::format(path, m);
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8).map_err(fail)? != MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(c.take(4).map_err(fail)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let meta_len = u32::from_le_bytes(c.take(4).map_err(fail)?.try_into().unwrap()) as usize;
    let meta: Metadata = serde_json::from_slice(c.take(meta_len).map_err(fail)?)
        .map_err(|e| Error::format(path, format!("metadata: {e}")))?;
    let count = u64::from_le_bytes(c.take(8).map_err(fail)?.try_into().unwrap()) as usize;
    let raw = c
        .take(
            count
                .checked_mul(8)
                .ok_or_else(|| fail("parameter count overflows".into()))?,
        )
        .map_err(fail)?;
    if c.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after parameters"));
    }
    let values: Vec<f64> = raw
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();

    // Initial weights are overwritten, so any seed will do.
    let mut r = rng::derive(0, &[]);
    let model = match meta.kind {
        ModelKind::Branch => {
            let mut b = Branch::new(meta.architecture, &mut r)?;
            load_params(b.params_mut(), &values)?;
            Model::Branch(b)
        }
        ModelKind::Classifier => {
            let mut m = Classifier::new(meta.architecture, &mut r)?;
            load_params(m.params_mut(), &values)?;
            Model::Classifier(m)
        }
    };
    Ok(model)
}

pub fn save(path: &Path, model: &Model) -> Result<()> {
    write_bytes(path, &encode(model)?)
}

pub fn load(path: &Path) -> Result<Model> {
    decode(&read_bytes(path)?, path)
}

fn expect(model: &Model, kind: ModelKind, arch: &Architecture) -> Result<()> {
    let meta = model.metadata();
    if meta.kind != kind || meta.architecture != *arch {
        return Err(causalnl_core::Error::ArchitectureMismatch(format!(
            "checkpoint holds a {:?} {}, expected a {:?} {}",
            meta.kind,
            causalnl_core::model::describe(&meta.architecture),
            kind,
            causalnl_core::model::describe(arch),
        ))
        .into());
    }
    Ok(())
}

/// Loads a branch, checking it against the expected architecture.
pub fn load_branch(path: &Path, arch: &Architecture) -> Result<Branch> {
    let model = load(path)?;
    expect(&model, ModelKind::Branch, arch)?;
    match model {
        Model::Branch(b) => Ok(b),
        Model::Classifier(_) => unreachable!("kind checked"),
    }
}

pub fn load_classifier(path: &Path, arch: &Architecture) -> Result<Classifier> {
    let model = load(path)?;
    expect(&model, ModelKind::Classifier, arch)?;
    match model {
        Model::Classifier(c) => Ok(c),
        Model::Branch(_) => unreachable!("kind checked"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use causalnl_core::datasets::{generate_moon, ImageShape};

    fn mlp_branch() -> Model {
        let arch = Architecture::mlp(2, 2, 1).with_hidden_width(16);
        Model::Branch(Branch::new(arch, &mut rng::derive(3, &[])).unwrap())
    }

    #[test]
    fn round_trip_preserves_predictions() {
        let x = generate_moon(200, 0.1, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        for model in [
            mlp_branch(),
            Model::Classifier(Classifier::new(Architecture::mlp(2, 2, 1), &mut rng::derive(4, &[])).unwrap()),
        ] {
            save(&path, &model).unwrap();
            let back = load(&path).unwrap();
            assert_eq!(back.predict(x.instances()), model.predict(x.instances()));
            assert_eq!(encode(&back).unwrap(), encode(&model).unwrap());
        }
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let bytes = encode(&mlp_branch()).unwrap();
        for cut in [0, 7, 15, bytes.len() - 1] {
            let err = decode(&bytes[..cut], Path::new("x")).unwrap_err();
            assert!(matches!(err, Error::Format { .. }), "{err}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode(&extra, Path::new("x")), Err(Error::Format { .. })));
    }

    #[test]
    fn unknown_version_is_rejected() {
        let mut bytes = encode(&mlp_branch()).unwrap();
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        let err = decode(&bytes, Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("version 2"), "{err}");
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes, Path::new("x")), Err(Error::Format { .. })));
    }

    #[test]
    fn loading_into_a_different_architecture_fails() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&path, &mlp_branch()).unwrap();
        let conv = Architecture::conv_small(
            ImageShape {
                channels: 1,
                height: 28,
                width: 28,
            },
            10,
            25,
        );
        let err = load_branch(&path, &conv).unwrap_err();
        assert!(
            matches!(err, Error::Core(causalnl_core::Error::ArchitectureMismatch(_))),
            "{err}"
        );
        let err = load_classifier(&path, mlp_branch().architecture()).unwrap_err();
        assert!(matches!(
            err,
            Error::Core(causalnl_core::Error::ArchitectureMismatch(_))
        ));
        assert!(load_branch(&path, mlp_branch().architecture()).is_ok());
    }
}
