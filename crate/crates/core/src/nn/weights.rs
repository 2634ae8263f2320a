//! Versioned binary weight container.
//!
//! Layout: 8-byte magic, u32 version, u64 header length, JSON header
//! {model_kind, hyperparameters}, u64 tensor count, then per tensor:
//! u32 name length, name, u32 rank, u64 dims, little-endian f32 data.
//! Tensors are sorted by name and the header JSON has sorted keys, so a
//! save -> load -> save cycle is byte-identical.

use std::io::Write;
use std::path::{Path, PathBuf};

use super::{Element, Parameter};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"TDWEIGHT";
const VERSION: u32 = 1;

#[derive(Debug)]
pub struct WeightsFile {
    pub model_kind: String,
    pub hyperparameters: serde_json::Value,
    /// (name, shape, values), sorted by name.
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
    origin: PathBuf,
}

impl WeightsFile {
    pub fn from_params<'a, T: Element>(
        model_kind: impl Into<String>,
        hyperparameters: serde_json::Value,
        params: impl IntoIterator<Item = &'a Parameter<T>>,
    ) -> WeightsFile {
        let mut tensors: Vec<(String, Vec<usize>, Vec<f32>)> = params
            .into_iter()
            .map(|p| (p.name.clone(), p.value.shape().to_vec(), p.value.to_f32_data()))
            .collect();
        tensors.sort_by(|a, b| a.0.cmp(&b.0));
        WeightsFile {
            model_kind: model_kind.into(),
            hyperparameters,
            tensors,
            origin: PathBuf::from("<memory>"),
        }
    }

    pub fn tensor(&self, name: &str) -> Option<(&[usize], &[f32])> {
        self.tensors
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, shape, data)| (shape.as_slice(), data.as_slice()))
    }

    /// Copies stored tensors into the given parameters. Every parameter must
    /// have a stored tensor of identical shape and every stored tensor must
    /// be consumed, so model/file mismatches fail loudly.
    pub fn load_into<'a, T: Element>(
        &self,
        params: impl IntoIterator<Item = &'a mut Parameter<T>>,
    ) -> Result<()> {
        let mut used = vec![false; self.tensors.len()];
        let mut count = 0usize;
        for p in params {
            count += 1;
            let idx = self
                .tensors
                .iter()
                .position(|(n, _, _)| *n == p.name)
                .ok_or_else(|| {
                    Error::artifact(&self.origin, format!("missing tensor {:?}", p.name))
                })?;
            let (_, shape, data) = &self.tensors[idx];
            if shape != p.value.shape() {
                return Err(Error::artifact(
                    &self.origin,
                    format!(
                        "tensor {:?} shape {:?} does not match parameter shape {:?}",
                        p.name,
                        shape,
                        p.value.shape()
                    ),
                ));
            }
            used[idx] = true;
            p.value = super::Tensor::from_f32_data(shape, data);
            p.zero_grad();
        }
        if let Some(idx) = used.iter().position(|&u| !u) {
            return Err(Error::artifact(
                &self.origin,
                format!(
                    "file holds {} tensors but the model consumed {count}; first unused: {:?}",
                    self.tensors.len(),
                    self.tensors[idx].0
                ),
            ));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        let header = serde_json::json!({
            "model_kind": self.model_kind,
            "hyperparameters": self.hyperparameters,
        })
        .to_string();
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(header.as_bytes());
        buf.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, shape, data) in &self.tensors {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<WeightsFile> {
        let bytes = std::fs::read(path)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0, path };
        let magic = cur.take(8)?;
        if magic != MAGIC {
            return Err(Error::artifact(path, "not a weight file (bad magic)"));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::artifact(
                path,
                format!("weight file version {version} unsupported (expected {VERSION})"),
            ));
        }
        let header_len = cur.u64()? as usize;
        let header_bytes = cur.take(header_len)?;
        let header: serde_json::Value = serde_json::from_slice(header_bytes)
            .map_err(|e| Error::artifact(path, format!("invalid header json: {e}")))?;
        let model_kind = header
            .get("model_kind")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::artifact(path, "header missing model_kind"))?
            .to_string();
        let hyperparameters = header
            .get("hyperparameters")
            .cloned()
            .unwrap_or(serde_json::Value::Null);

        let count = cur.u64()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|_| Error::artifact(path, "tensor name is not utf-8"))?
                .to_string();
            let rank = cur.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.u64()? as usize);
            }
            let len: usize = shape.iter().product();
            let raw = cur.take(len * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, shape, data));
        }
        if cur.pos != bytes.len() {
            return Err(Error::artifact(path, "trailing bytes after tensor data"));
        }
        Ok(WeightsFile { model_kind, hyperparameters, tensors, origin: path.to_path_buf() })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::artifact(self.path, "truncated weight file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes([
            b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7],
        ]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let p1 = Parameter::new("b.w", Tensor::from_vec(&[2, 2], vec![1.5f32, -0.25, 3.0, 0.1]));
        let p2 = Parameter::new("a.v", Tensor::vector(vec![0.5f32]));
        let wf = WeightsFile::from_params(
            "embedder",
            serde_json::json!({"hidden": 2}),
            [&p1, &p2],
        );
        wf.save(&path).unwrap();
        let first = std::fs::read(&path).unwrap();

        let loaded = WeightsFile::load(&path).unwrap();
        assert_eq!(loaded.model_kind, "embedder");
        assert_eq!(loaded.tensors[0].0, "a.v"); // sorted by name
        loaded.save(&path).unwrap();
        let second = std::fs::read(&path).unwrap();
        assert_eq!(first, second);

        let mut q1 = Parameter::new("b.w", Tensor::<f32>::zeros(&[2, 2]));
        let mut q2 = Parameter::new("a.v", Tensor::<f32>::zeros(&[1]));
        loaded.load_into([&mut q1, &mut q2]).unwrap();
        assert_eq!(q1.value, p1.value);
        assert_eq!(q2.value, p2.value);
    }

    #[test]
    fn load_into_rejects_shape_mismatch() {
        let p = Parameter::new("w", Tensor::vector(vec![1.0f32, 2.0]));
        let wf = WeightsFile::from_params("m", serde_json::Value::Null, [&p]);
        let mut q = Parameter::new("w", Tensor::<f32>::zeros(&[3]));
        assert!(wf.load_into([&mut q]).is_err());
    }

    #[test]
    fn load_into_rejects_unused_tensors() {
        let p1 = Parameter::new("w1", Tensor::vector(vec![1.0f32]));
        let p2 = Parameter::new("w2", Tensor::vector(vec![2.0f32]));
        let wf = WeightsFile::from_params("m", serde_json::Value::Null, [&p1, &p2]);
        let mut q = Parameter::new("w1", Tensor::<f32>::zeros(&[1]));
        assert!(wf.load_into([&mut q]).is_err());
    }

    #[test]
    fn rejects_corrupt_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, b"NOTMAGIC0000").unwrap();
        let err = WeightsFile::load(&path).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }
}
