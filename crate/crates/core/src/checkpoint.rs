//! Weight checkpoints: a JSON manifest describing layer shapes and the split
//! point, next to a flat little-endian `f64` blob holding every parameter in
//! layer order (weight matrix row-major, then bias, per layer).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LayerWeights, WeightSet};
use crate::tensor::Tensor;

pub const FORMAT: &str = "fedper-weights/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightRole {
    Full,
    Base,
    Personal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub weight: [usize; 2],
    pub bias: [usize; 1],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub role: WeightRole,
    /// Number of personalization layers in the model the weights belong to.
    pub k_personal: usize,
    pub layers: Vec<LayerShape>,
    pub num_values: usize,
    pub blob: String,
}

pub fn encode(weights: &WeightSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(weights.num_params() * 8);
    for v in weights.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(shapes: &[LayerShape], bytes: &[u8]) -> Result<WeightSet> {
    let expected: usize = shapes.iter().map(|s| s.weight[0] * s.weight[1] + s.bias[0]).sum();
    if bytes.len() != expected * 8 {
        return Err(Error::Usage(format!(
            "blob holds {} bytes, manifest describes {expected} values",
            bytes.len()
        )));
    }
    let mut values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")));
    let mut layers = Vec::with_capacity(shapes.len());
    for (i, s) in shapes.iter().enumerate() {
        if s.bias[0] != s.weight[0] {
            return Err(Error::shape(i, "bias length differs from weight rows"));
        }
        let w: Vec<f64> = values.by_ref().take(s.weight[0] * s.weight[1]).collect();
        let b: Vec<f64> = values.by_ref().take(s.bias[0]).collect();
        layers.push(
            LayerWeights::new(
                Tensor::matrix(s.weight[0], s.weight[1], w).map_err(|_| Error::shape(i, "bad layer shape"))?,
                Tensor::new(vec![s.bias[0]], b).map_err(|_| Error::shape(i, "bad bias shape"))?,
            )
            .map_err(|_| Error::shape(i, "bad layer"))?,
        );
    }
    WeightSet::new(layers)
}

pub fn manifest_for(weights: &WeightSet, role: WeightRole, k_personal: usize, blob: String) -> Manifest {
    Manifest {
        format: FORMAT.to_string(),
        role,
        k_personal,
        layers: weights
            .layers()
            .iter()
            .map(|l| LayerShape {
                weight: [l.out_dim(), l.in_dim()],
                bias: [l.out_dim()],
            })
            .collect(),
        num_values: weights.num_params(),
        blob,
    }
}

/// Writes `<stem>.json` and `<stem>.bin` inside `dir`.
pub fn save(dir: &Path, stem: &str, weights: &WeightSet, role: WeightRole, k_personal: usize) -> Result<PathBuf> {
    let blob_name = format!("{stem}.bin");
    let manifest = manifest_for(weights, role, k_personal, blob_name.clone());
    write_atomic(&dir.join(&blob_name), &encode(weights))?;
    let manifest_path = dir.join(format!("{stem}.json"));
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    write_atomic(&manifest_path, text.as_bytes())?;
    Ok(manifest_path)
}

pub fn load(manifest_path: &Path) -> Result<(Manifest, WeightSet)> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != FORMAT {
        return Err(Error::Usage(format!("unknown checkpoint format {:?}", manifest.format)));
    }
    let blob_path = manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&manifest.blob);
    let bytes = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let weights = decode(&manifest.layers, &bytes)?;
    if weights.num_params() != manifest.num_values {
        return Err(Error::Usage("manifest num_values disagrees with layer shapes".into()));
    }
    Ok((manifest, weights))
}

/// Temp file in the destination directory, then rename over `path`.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::split::ModelSpec;

    #[test]
    fn save_then_load_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ModelSpec::mlp(&[3, 5, 2], 1).unwrap();
        let mut w = WeightSet::init(&spec.layers, &mut ChaCha8Rng::seed_from_u64(4));
        *w.values_mut().next().unwrap() = -0.0;
        let path = save(dir.path(), "model", &w, WeightRole::Full, 1).unwrap();
        let (m, back) = load(&path).unwrap();
        assert_eq!(m.k_personal, 1);
        assert_eq!(m.layers[0].weight, [5, 3]);
        assert!(back.values().zip(w.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(fs::metadata(dir.path().join("model.bin")).unwrap().len(), (w.num_params() * 8) as u64);
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let spec = ModelSpec::mlp(&[2, 2], 0).unwrap();
        let w = WeightSet::init(&spec.layers, &mut ChaCha8Rng::seed_from_u64(4));
        let m = manifest_for(&w, WeightRole::Base, 0, "x.bin".into());
        let bytes = encode(&w);
        assert!(decode(&m.layers, &bytes[..bytes.len() - 8]).is_err());
    }

    proptest! {
        #[test]
        fn encode_decode_round_trips(dims in prop::collection::vec(1usize..6, 2..5), seed in any::<u64>()) {
            let spec = ModelSpec::mlp(&dims, 0).unwrap();
            let w = WeightSet::init(&spec.layers, &mut ChaCha8Rng::seed_from_u64(seed));
            let m = manifest_for(&w, WeightRole::Full, 0, "w.bin".into());
            let back = decode(&m.layers, &encode(&w)).unwrap();
            prop_assert_eq!(back, w);
        }
    }
}
