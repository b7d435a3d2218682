//! Safetensors-backed archive of named tensors plus JSON metadata.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Parameterized, Real};

const FORMAT_KEY: &str = "format";
/// Header entry holding all metadata as one JSON object. A single entry keeps
/// the header bytes independent of hash-map iteration order.
const HEADER_KEY: &str = "archive";

#[derive(Clone, Debug, PartialEq)]
struct Stored {
    dtype: Dtype,
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// In-memory checkpoint. Tensor names are dot-separated paths; metadata
/// values are JSON strings.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    metadata: BTreeMap<String, String>,
    tensors: BTreeMap<String, Stored>,
}

#[derive(Serialize, Deserialize)]
struct RngState {
    seed: Vec<u8>,
    stream: u64,
    word_pos: String,
}

impl Archive {
    pub fn new(format: &str) -> Self {
        let mut a = Self::default();
        a.metadata.insert(FORMAT_KEY.into(), format.into());
        a
    }

    pub fn format(&self) -> Option<&str> {
        self.metadata.get(FORMAT_KEY).map(String::as_str)
    }

    pub fn expect_format(&self, format: &str) -> Result<()> {
        match self.format() {
            Some(f) if f == format => Ok(()),
            Some(f) => Err(ckpt_err(format!("format '{f}', expected '{format}'"))),
            None => Err(ckpt_err("archive has no format tag")),
        }
    }

    pub fn set_meta(&mut self, key: &str, value: &impl Serialize) -> Result<()> {
        self.metadata.insert(key.into(), serde_json::to_string(value)?);
        Ok(())
    }

    pub fn meta<V: DeserializeOwned>(&self, key: &str) -> Result<V> {
        let raw = self
            .metadata
            .get(key)
            .ok_or_else(|| ckpt_err(format!("missing metadata '{key}'")))?;
        serde_json::from_str(raw).map_err(|e| ckpt_err(format!("metadata '{key}': {e}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        let p = format!("{prefix}.");
        self.tensors.keys().any(|k| k.starts_with(&p))
    }

    fn put(&mut self, name: &str, dtype: Dtype, shape: &[usize], bytes: Vec<u8>) {
        self.tensors.insert(
            name.into(),
            Stored {
                dtype,
                shape: shape.to_vec(),
                bytes,
            },
        );
    }

    fn get(&self, name: &str, dtype: Dtype) -> Result<&Stored> {
        let t = self
            .tensors
            .get(name)
            .ok_or_else(|| ckpt_err(format!("missing tensor '{name}'")))?;
        if t.dtype != dtype {
            return Err(ckpt_err(format!("tensor '{name}' has dtype {:?}", t.dtype)));
        }
        Ok(t)
    }

    pub fn put_f32(&mut self, name: &str, shape: &[usize], data: &[f32]) {
        self.put(
            name,
            Dtype::F32,
            shape,
            data.iter().flat_map(|v| v.to_le_bytes()).collect(),
        );
    }

    pub fn put_f64(&mut self, name: &str, shape: &[usize], data: &[f64]) {
        self.put(
            name,
            Dtype::F64,
            shape,
            data.iter().flat_map(|v| v.to_le_bytes()).collect(),
        );
    }

    pub fn put_u32(&mut self, name: &str, shape: &[usize], data: &[u32]) {
        self.put(
            name,
            Dtype::U32,
            shape,
            data.iter().flat_map(|v| v.to_le_bytes()).collect(),
        );
    }

    pub fn get_f32(&self, name: &str) -> Result<(Vec<usize>, Vec<f32>)> {
        let t = self.get(name, Dtype::F32)?;
        let v = t
            .bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((t.shape.clone(), v))
    }

    pub fn get_f64(&self, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
        let t = self.get(name, Dtype::F64)?;
        let v = t
            .bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((t.shape.clone(), v))
    }

    pub fn get_u32(&self, name: &str) -> Result<(Vec<usize>, Vec<u32>)> {
        let t = self.get(name, Dtype::U32)?;
        let v = t
            .bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((t.shape.clone(), v))
    }

    /// Stores every parameter of `module` as `f32` under `prefix`.
    pub fn put_params<T: Real>(&mut self, prefix: &str, module: &impl Parameterized<T>) {
        for (name, t) in module.named_params() {
            let data: Vec<f32> = t.data().iter().map(|v| v.as_f64() as f32).collect();
            self.put_f32(&format!("{prefix}.{name}"), t.shape(), &data);
        }
    }

    /// Fills `module` from tensors under `prefix`; names and shapes must match.
    pub fn load_params<T: Real>(&self, prefix: &str, module: &mut impl Parameterized<T>) -> Result<()> {
        let names: Vec<String> = module.named_params().into_iter().map(|(n, _)| n).collect();
        let p = format!("{prefix}.");
        let stored = self.tensors.keys().filter(|k| k.starts_with(&p)).count();
        if stored != names.len() {
            return Err(ckpt_err(format!(
                "'{prefix}' holds {stored} tensors, the model expects {}",
                names.len()
            )));
        }
        for (name, t) in names.iter().zip(module.params_mut()) {
            let (shape, data) = self.get_f32(&format!("{prefix}.{name}"))?;
            if shape != t.shape() {
                return Err(ckpt_err(format!(
                    "tensor '{prefix}.{name}' has shape {shape:?}, expected {:?}",
                    t.shape()
                )));
            }
            for (d, s) in t.data_mut().iter_mut().zip(data) {
                *d = T::lit(f64::from(s));
            }
        }
        Ok(())
    }

    pub fn put_rng(&mut self, key: &str, rng: &ChaCha8Rng) -> Result<()> {
        self.set_meta(
            key,
            &RngState {
                seed: rng.get_seed().to_vec(),
                stream: rng.get_stream(),
                word_pos: rng.get_word_pos().to_string(),
            },
        )
    }

    pub fn get_rng(&self, key: &str) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let s: RngState = self.meta(key)?;
        let seed: [u8; 32] = s
            .seed
            .try_into()
            .map_err(|_| ckpt_err(format!("rng '{key}' has a malformed seed")))?;
        let pos: u128 = s
            .word_pos
            .parse()
            .map_err(|_| ckpt_err(format!("rng '{key}' has a malformed position")))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(s.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let views = self
            .tensors
            .iter()
            .map(|(k, t)| Ok((k.clone(), TensorView::new(t.dtype, t.shape.clone(), &t.bytes)?)))
            .collect::<Result<Vec<_>>>()?;
        let meta = HashMap::from([(HEADER_KEY.to_string(), serde_json::to_string(&self.metadata)?)]);
        Ok(safetensors::serialize(views, Some(meta))?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, header) = SafeTensors::read_metadata(bytes)?;
        let st = SafeTensors::deserialize(bytes)?;
        let metadata = match header.metadata().as_ref().and_then(|m| m.get(HEADER_KEY)) {
            Some(json) => serde_json::from_str(json)?,
            None => return Err(ckpt_err("missing archive header")),
        };
        let tensors = st
            .tensors()
            .into_iter()
            .map(|(k, v)| {
                (
                    k,
                    Stored {
                        dtype: v.dtype(),
                        shape: v.shape().to_vec(),
                        bytes: v.data().to_vec(),
                    },
                )
            })
            .collect();
        Ok(Self { metadata, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        // Write then rename so an interrupted save never leaves a torn file.
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Encoder, EncoderConfig};
    use rand::{Rng, SeedableRng};

    #[test]
    fn bytes_do_not_depend_on_hash_order() {
        let mut a = Archive::new("test/1");
        for i in 0..12 {
            a.set_meta(&format!("key{i}"), &i).unwrap();
        }
        a.put_f32("w", &[2], &[1.0, 2.0]);
        let first = a.to_bytes().unwrap();
        for _ in 0..20 {
            assert_eq!(a.to_bytes().unwrap(), first);
        }
        assert_eq!(Archive::from_bytes(&first).unwrap(), a);
    }

    #[test]
    fn round_trip_tensors_meta_and_rng() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = Archive::new("test/v1");
        a.put_f32("x.w", &[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        a.put_f64("m", &[1], &[0.1]);
        a.put_u32("ids", &[3], &[7, 8, 9]);
        a.set_meta("step", &42u64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        rng.set_stream(5);
        let _: u64 = rng.random();
        a.put_rng("rng", &rng).unwrap();
        let p = dir.path().join("c.safetensors");
        a.save(&p).unwrap();
        let b = Archive::load(&p).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.meta::<u64>("step").unwrap(), 42);
        let mut back = b.get_rng("rng").unwrap();
        assert_eq!(back.random::<u64>(), rng.random::<u64>());
        assert!(b.expect_format("other").is_err());
        assert!(b.get_f64("x.w").is_err());
    }

    #[test]
    fn params_round_trip_and_shape_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = Encoder::<f32>::new(&EncoderConfig::tiny(), &mut rng).unwrap();
        let mut a = Archive::new("t");
        a.put_params("enc", &enc);
        let mut other = Encoder::<f32>::new(&EncoderConfig::tiny(), &mut rng).unwrap();
        assert_ne!(other.checksum(), enc.checksum());
        a.load_params("enc", &mut other).unwrap();
        assert_eq!(other.checksum(), enc.checksum());
        let mut cfg = EncoderConfig::tiny();
        cfg.stage_dims = vec![8, 16, 32];
        let mut wrong = Encoder::<f32>::new(&cfg, &mut rng).unwrap();
        assert!(matches!(a.load_params("enc", &mut wrong), Err(Error::Checkpoint(_))));
    }
}
