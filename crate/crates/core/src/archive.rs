//! Binary archives of named `f32` arrays with a JSON manifest.
//!
//! Layout:
//!
//! ```text
//! 8 bytes   magic "DHRARCH1"
//! 8 bytes   manifest length N, little-endian u64
//! N bytes   manifest (UTF-8 JSON)
//! ...       array payloads, little-endian f32, in manifest order
//! ```
//!
//! The manifest records the archive kind, free-form metadata and, for each
//! array, its name, shape, offset and length in elements.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::generator::{GeneratorState, ToyConfig, ToyGenerator};
use crate::latent::{LatentCode, LatentSpace};
use crate::tensor::{FeatureMap, Image, Tensor};

const MAGIC: &[u8; 8] = b"DHRARCH1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    #[serde(default)]
    pub meta: BTreeMap<String, Value>,
    pub arrays: Vec<ArrayEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub kind: String,
    pub meta: BTreeMap<String, Value>,
    arrays: Vec<(ArrayEntry, Vec<f32>)>,
}

impl Archive {
    pub fn new(kind: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            meta: BTreeMap::new(),
            arrays: Vec::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.meta.insert(key.to_string(), value.into());
        self
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<()> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::Archive(format!(
                "array shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        let offset = self.arrays.last().map(|(e, _)| e.offset + e.len).unwrap_or(0);
        self.arrays.push((
            ArrayEntry {
                name: name.into(),
                shape,
                offset,
                len,
            },
            data,
        ));
        Ok(())
    }

    pub fn array(&self, name: &str) -> Result<(&[usize], &[f32])> {
        self.arrays
            .iter()
            .find(|(e, _)| e.name == name)
            .map(|(e, d)| (e.shape.as_slice(), d.as_slice()))
            .ok_or_else(|| Error::Archive(format!("archive has no array `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.iter().map(|(e, _)| e.name.as_str())
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .and_then(Value::as_str)
            .ok_or_else(|| Error::Archive(format!("manifest field `{key}` missing or not a string")))
    }

    pub fn meta_u64(&self, key: &str) -> Result<u64> {
        self.meta
            .get(key)
            .and_then(Value::as_u64)
            .ok_or_else(|| Error::Archive(format!("manifest field `{key}` missing or not an integer")))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Archive(format!(
                "expected a `{kind}` archive, found `{}`",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = Manifest {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            arrays: self.arrays.iter().map(|(e, _)| e.clone()).collect(),
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let payload: usize = self.arrays.iter().map(|(e, _)| e.len * 4).sum();
        let mut out = Vec::with_capacity(16 + json.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, data) in &self.arrays {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Archive("not an archive (bad magic)".into()));
        }
        let n = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json = bytes
            .get(16..16 + n)
            .ok_or_else(|| Error::Archive("truncated manifest".into()))?;
        let manifest: Manifest =
            serde_json::from_slice(json).map_err(|e| Error::Archive(format!("bad manifest: {e}")))?;
        let payload = &bytes[16 + n..];
        let mut arrays = Vec::with_capacity(manifest.arrays.len());
        for entry in manifest.arrays {
            let start = entry.offset * 4;
            let end = start + entry.len * 4;
            let raw = payload
                .get(start..end)
                .ok_or_else(|| Error::Archive(format!("array `{}` is truncated", entry.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            arrays.push((entry, data));
        }
        Ok(Self {
            kind: manifest.kind,
            meta: manifest.meta,
            arrays,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

// ---------------------------------------------------------------------------
// Typed archives

pub fn latent_archive(code: &LatentCode<f32>, generator_fingerprint: &str) -> Archive {
    let mut a = Archive::new("latent")
        .with_meta("space", code.space().tag())
        .with_meta("generator", generator_fingerprint);
    a.push("latent", vec![code.rows(), code.dim()], code.values().to_vec())
        .expect("consistent shape");
    a
}

pub fn latent_from_archive(a: &Archive) -> Result<LatentCode<f32>> {
    a.expect_kind("latent")?;
    let space = LatentSpace::from_tag(a.meta_str("space")?)?;
    let (shape, data) = a.array("latent")?;
    if shape.len() != 2 {
        return Err(Error::Archive("latent array must be 2-D".into()));
    }
    LatentCode::new(space, shape[0], shape[1], data.to_vec())
}

pub fn feature_archive(feature: &FeatureMap<f32>) -> Archive {
    let t = &feature.tensor;
    let mut a = Archive::new("feature").with_meta("layer", feature.layer as u64);
    a.push("feature", vec![t.channels, t.height, t.width], t.data.clone())
        .expect("consistent shape");
    a
}

pub fn feature_from_archive(a: &Archive) -> Result<FeatureMap<f32>> {
    a.expect_kind("feature")?;
    let layer = a.meta_u64("layer")? as usize;
    let (shape, data) = a.array("feature")?;
    if shape.len() != 3 {
        return Err(Error::Archive("feature array must be 3-D".into()));
    }
    Ok(FeatureMap {
        layer,
        tensor: Tensor::from_vec(shape[0], shape[1], shape[2], data.to_vec())?,
    })
}

/// Exact float copy of an image, for caches.
pub fn image_archive(image: &Image<f32>) -> Archive {
    let mut a = Archive::new("image");
    a.push("image", vec![3, image.height(), image.width()], image.data().to_vec())
        .expect("consistent shape");
    a
}

pub fn image_from_archive(a: &Archive) -> Result<Image<f32>> {
    a.expect_kind("image")?;
    let (shape, data) = a.array("image")?;
    if shape.len() != 3 {
        return Err(Error::Archive("image array must be 3-D".into()));
    }
    Image::new(Tensor::from_vec(shape[0], shape[1], shape[2], data.to_vec())?)
}

/// Toy generator checkpoint: named weight arrays plus the architecture record.
pub fn generator_archive(generator: &ToyGenerator<f32>) -> Archive {
    let config = generator.config();
    let mut a = Archive::new("generator")
        .with_meta("n_layers", generator.n_layers() as u64)
        .with_meta("d_latent", generator.d_latent() as u64)
        .with_meta(
            "resolutions",
            serde_json::to_value(generator.layer_resolutions()).expect("json"),
        )
        .with_meta("seed", config.seed)
        .with_meta("config", serde_json::to_value(config).expect("json"))
        .with_meta("fingerprint", generator.fingerprint());
    for e in generator.entries() {
        a.push(
            e.name.clone(),
            e.shape.clone(),
            generator.weights()[e.offset..e.offset + e.len].to_vec(),
        )
        .expect("consistent shape");
    }
    a
}

pub fn generator_from_archive(a: &Archive) -> Result<ToyGenerator<f32>> {
    a.expect_kind("generator")?;
    let config: ToyConfig = serde_json::from_value(
        a.meta
            .get("config")
            .cloned()
            .ok_or_else(|| Error::Archive("checkpoint has no config record".into()))?,
    )
    .map_err(|e| Error::Archive(format!("bad config record: {e}")))?;
    // Only the parameter layout is needed from this instance.
    let layout = ToyGenerator::<f32>::new(config.clone())?;
    let mut weights = vec![0.0f32; layout.n_params()];
    for e in layout.entries() {
        let (shape, data) = a.array(&e.name)?;
        if shape != e.shape.as_slice() {
            return Err(Error::Archive(format!(
                "array `{}` has shape {shape:?}, architecture expects {:?}",
                e.name, e.shape
            )));
        }
        weights[e.offset..e.offset + e.len].copy_from_slice(data);
    }
    let generator = ToyGenerator::from_weights(config, weights)?;
    let n_layers = a.meta_u64("n_layers")? as usize;
    if n_layers != generator.n_layers() {
        return Err(Error::Archive(
            "manifest layer count disagrees with architecture".into(),
        ));
    }
    Ok(generator)
}

/// The per-image weight deviation.
pub fn delta_archive(state: &GeneratorState<f32>) -> Archive {
    let mut a = Archive::new("theta_delta")
        .with_meta("generator", state.generator().fingerprint())
        .with_meta("inject_layer", state.inject_layer() as u64)
        .with_meta("scope", serde_json::to_value(state.scope()).expect("json"));
    a.push("theta_delta", vec![state.delta().len()], state.delta().to_vec())
        .expect("consistent shape");
    a
}

/// Applies a deviation archive to a fresh state over `generator`.
pub fn state_from_delta(a: &Archive, generator: Arc<ToyGenerator<f32>>) -> Result<GeneratorState<f32>> {
    a.expect_kind("theta_delta")?;
    if a.meta_str("generator")? != generator.fingerprint() {
        return Err(Error::Archive(
            "deviation was produced for a different generator".into(),
        ));
    }
    let layer = a.meta_u64("inject_layer")? as usize;
    let scope = serde_json::from_value(a.meta.get("scope").cloned().unwrap_or(Value::Null)).unwrap_or_default();
    let mut state = GeneratorState::new(generator, layer)?.with_scope(scope);
    state.set_delta(a.array("theta_delta")?.1.to_vec())?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip() {
        let mut a = Archive::new("test").with_meta("answer", 42u64);
        a.push("x", vec![2, 3], (0..6).map(|v| v as f32 * 0.5).collect())
            .unwrap();
        a.push("y", vec![1], vec![-1.0]).unwrap();
        let b = Archive::from_bytes(&a.to_bytes()).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.meta_u64("answer").unwrap(), 42);
        assert!(Archive::from_bytes(b"garbage!garbage!").is_err());
    }

    #[test]
    fn generator_checkpoint_round_trip() {
        let g = ToyGenerator::<f32>::new(ToyConfig::with_seed(3)).unwrap();
        let back = generator_from_archive(&Archive::from_bytes(&generator_archive(&g).to_bytes()).unwrap()).unwrap();
        assert_eq!(back.weights(), g.weights());
        assert_eq!(back.fingerprint(), g.fingerprint());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut a = Archive::new("t");
        assert!(a.push("bad", vec![2, 2], vec![0.0; 3]).is_err());
    }
}
