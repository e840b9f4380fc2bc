//! Named f32 tensors, seeded initialization and the on-disk weights format.
//!
//! A weights directory holds `manifest.json` (seed plus an ordered list of
//! layer names, shapes and blob file names) and one raw little-endian f32
//! blob per tensor, row-major.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        Tensor {
            name: name.into(),
            shape,
            data,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    seed: u64,
    layers: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

fn blob_name(tensor: &str) -> String {
    format!("{}.bin", tensor.replace(['/', '\\'], "_"))
}

fn params_err(layer: &str, reason: impl Into<String>) -> Error {
    Error::Params {
        layer: layer.to_string(),
        reason: reason.into(),
    }
}

/// An ordered set of named tensors plus the seed they were drawn from.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamBundle {
    pub seed: u64,
    pub tensors: Vec<Tensor>,
}

impl ParamBundle {
    pub fn new(seed: u64) -> Self {
        ParamBundle {
            seed,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, tensor: Tensor) {
        self.tensors.push(tensor);
    }

    pub fn extend(&mut self, other: ParamBundle) {
        self.tensors.extend(other.tensors);
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut layers = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            let expected: usize = t.shape.iter().product();
            if expected != t.data.len() {
                return Err(params_err(
                    &t.name,
                    format!("shape {:?} holds {expected} values but data has {}", t.shape, t.data.len()),
                ));
            }
            let file = blob_name(&t.name);
            let bytes: Vec<u8> = t.data.iter().flat_map(|v| v.to_le_bytes()).collect();
            let path = dir.join(&file);
            fs::write(&path, bytes).map_err(|e| Error::io(path, e))?;
            layers.push(ManifestEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
                file,
            });
        }
        let manifest = Manifest {
            seed: self.seed,
            layers,
        };
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(&path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let mut bundle = ParamBundle::new(manifest.seed);
        for entry in manifest.layers {
            let path = dir.join(&entry.file);
            let bytes = fs::read(&path).map_err(|e| params_err(&entry.name, format!("{}: {e}", path.display())))?;
            let count: usize = entry.shape.iter().product();
            if bytes.len() != count * 4 {
                return Err(params_err(
                    &entry.name,
                    format!("blob has {} bytes, shape {:?} needs {}", bytes.len(), entry.shape, count * 4),
                ));
            }
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect::<Vec<_>>();
            if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
                return Err(params_err(&entry.name, format!("non-finite value at element {bad}")));
            }
            bundle.push(Tensor::new(entry.name, entry.shape, data));
        }
        Ok(bundle)
    }

    /// Index for [`TensorLookup::take`].
    pub fn lookup(&self) -> TensorLookup<'_> {
        TensorLookup {
            by_name: self.tensors.iter().map(|t| (t.name.as_str(), t)).collect(),
        }
    }
}

pub struct TensorLookup<'a> {
    by_name: FxHashMap<&'a str, &'a Tensor>,
}

impl TensorLookup<'_> {
    /// Fetches a tensor and checks its declared shape.
    pub fn take(&self, name: &str, shape: &[usize]) -> Result<Vec<f32>> {
        let t = self
            .by_name
            .get(name)
            .ok_or_else(|| params_err(name, "missing from weights"))?;
        if t.shape != shape {
            return Err(params_err(name, format!("expected shape {shape:?}, found {:?}", t.shape)));
        }
        Ok(t.data.clone())
    }
}

/// Seeded uniform initializer; each component draws from its own stream.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Initializer { rng }
    }

    /// `len` values uniform in `[-s, s]`, `s = 1 / sqrt(fan_in)`.
    pub fn uniform(&mut self, len: usize, fan_in: usize) -> Vec<f32> {
        let s = 1.0 / (fan_in.max(1) as f32).sqrt();
        (0..len).map(|_| self.rng.gen_range(-s..=s)).collect()
    }
}

/// Fully connected layer, weights `c_out x c_in` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl DenseLayer {
    pub fn init(name: impl Into<String>, c_in: usize, c_out: usize, init: &mut Initializer) -> Self {
        let weights = init.uniform(c_in * c_out, c_in);
        let bias = init.uniform(c_out, c_in);
        DenseLayer {
            name: name.into(),
            c_in,
            c_out,
            weights,
            bias,
        }
    }

    pub fn zeros(name: impl Into<String>, c_in: usize, c_out: usize) -> Self {
        DenseLayer {
            name: name.into(),
            c_in,
            c_out,
            weights: vec![0.0; c_in * c_out],
            bias: vec![0.0; c_out],
        }
    }

    /// `W x + b`, no activation.
    pub fn forward(&self, input: &[f32], out: &mut [f32]) -> Result<()> {
        if input.len() != self.c_in {
            return Err(Error::shape(format!("{} input", self.name), self.c_in, input.len()));
        }
        if out.len() != self.c_out {
            return Err(Error::shape(format!("{} output", self.name), self.c_out, out.len()));
        }
        for (o, (row, b)) in out.iter_mut().zip(self.weights.chunks_exact(self.c_in).zip(&self.bias)) {
            *o = b + row.iter().zip(input).map(|(w, x)| w * x).sum::<f32>();
        }
        Ok(())
    }

    pub fn to_tensors(&self, bundle: &mut ParamBundle) {
        bundle.push(Tensor::new(format!("{}.weight", self.name), vec![self.c_out, self.c_in], self.weights.clone()));
        bundle.push(Tensor::new(format!("{}.bias", self.name), vec![self.c_out], self.bias.clone()));
    }

    pub fn from_tensors(name: &str, c_in: usize, c_out: usize, lookup: &TensorLookup<'_>) -> Result<Self> {
        Ok(DenseLayer {
            name: name.to_string(),
            c_in,
            c_out,
            weights: lookup.take(&format!("{name}.weight"), &[c_out, c_in])?,
            bias: lookup.take(&format!("{name}.bias"), &[c_out])?,
        })
    }
}

pub fn relu(x: f32) -> f32 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_bundle() -> ParamBundle {
        let mut init = Initializer::new(5, 0);
        let mut b = ParamBundle::new(5);
        DenseLayer::init("head.fc1", 6, 3, &mut init).to_tensors(&mut b);
        b.push(Tensor::new("conv", vec![2, 1, 3, 3], init.uniform(18, 9)));
        b
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        let bundle = sample_bundle();
        bundle.save(&a).unwrap();
        let loaded = ParamBundle::load(&a).unwrap();
        assert_eq!(loaded, bundle);
        loaded.save(&b).unwrap();
        for entry in fs::read_dir(&a).unwrap() {
            let name = entry.unwrap().file_name();
            assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap());
        }
    }

    #[test]
    fn malformed_blob_names_layer() {
        let dir = tempfile::tempdir().unwrap();
        sample_bundle().save(dir.path()).unwrap();
        fs::write(dir.path().join("conv.bin"), [0u8; 10]).unwrap();
        let err = ParamBundle::load(dir.path()).unwrap_err().to_string();
        assert!(err.contains("`conv`"), "{err}");
    }

    #[test]
    fn take_checks_shape() {
        let b = sample_bundle();
        let l = b.lookup();
        assert!(l.take("conv", &[2, 1, 3, 3]).is_ok());
        let err = l.take("conv", &[2, 2, 3, 3]).unwrap_err().to_string();
        assert!(err.contains("conv"));
        assert!(l.take("nope", &[1]).is_err());
    }

    #[test]
    fn same_seed_same_values() {
        let a = Initializer::new(9, 1).uniform(100, 4);
        let b = Initializer::new(9, 1).uniform(100, 4);
        let c = Initializer::new(9, 2).uniform(100, 4);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.iter().all(|v| v.abs() <= 0.5));
    }

    #[test]
    fn dense_forward() {
        let layer = DenseLayer {
            name: "t".into(),
            c_in: 2,
            c_out: 2,
            weights: vec![1.0, 2.0, -1.0, 0.5],
            bias: vec![0.5, 0.0],
        };
        let mut out = [0.0; 2];
        layer.forward(&[1.0, 3.0], &mut out).unwrap();
        assert_eq!(out, [7.5, 0.5]);
        assert!(layer.forward(&[1.0], &mut out).is_err());
    }
}
