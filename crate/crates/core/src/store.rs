//! Named-tensor containers in the safetensors layout.
//!
//! Only a single metadata key is ever written so that the header, and with it
//! the whole file, is byte-for-byte reproducible.

use std::borrow::Cow;
use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView, View};

use crate::error::{QuadError, Result};
use crate::linalg::DenseMatrix;

const META_KEY: &str = "quad";

struct OwnedTensor {
    dtype: Dtype,
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

impl View for &OwnedTensor {
    fn dtype(&self) -> Dtype {
        self.dtype
    }

    fn shape(&self) -> &[usize] {
        &self.shape
    }

    fn data(&self) -> Cow<'_, [u8]> {
        Cow::Borrowed(&self.bytes)
    }

    fn data_len(&self) -> usize {
        self.bytes.len()
    }
}

/// Accumulates tensors for one file.
#[derive(Default)]
pub struct TensorWriter {
    tensors: Vec<(String, OwnedTensor)>,
    meta: Option<String>,
}

impl TensorWriter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Free-form metadata string (typically JSON).
    pub fn meta(&mut self, value: impl Into<String>) -> &mut Self {
        self.meta = Some(value.into());
        self
    }

    pub fn f64(&mut self, name: impl Into<String>, shape: &[usize], values: &[f64]) -> &mut Self {
        let bytes = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.push(name.into(), Dtype::F64, shape, bytes)
    }

    pub fn f32(&mut self, name: impl Into<String>, shape: &[usize], values: &[f64]) -> &mut Self {
        let bytes = values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
        self.push(name.into(), Dtype::F32, shape, bytes)
    }

    pub fn i8(&mut self, name: impl Into<String>, shape: &[usize], values: &[i8]) -> &mut Self {
        let bytes = values.iter().map(|&v| v as u8).collect();
        self.push(name.into(), Dtype::I8, shape, bytes)
    }

    pub fn matrix_f64(&mut self, name: impl Into<String>, m: &DenseMatrix) -> &mut Self {
        self.f64(name, &[m.rows(), m.cols()], m.data())
    }

    pub fn matrix_f32(&mut self, name: impl Into<String>, m: &DenseMatrix) -> &mut Self {
        self.f32(name, &[m.rows(), m.cols()], m.data())
    }

    fn push(&mut self, name: String, dtype: Dtype, shape: &[usize], bytes: Vec<u8>) -> &mut Self {
        self.tensors.push((
            name,
            OwnedTensor {
                dtype,
                shape: shape.to_vec(),
                bytes,
            },
        ));
        self
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let info = self
            .meta
            .as_ref()
            .map(|m| HashMap::from([(META_KEY.to_string(), m.clone())]));
        safetensors::serialize(self.tensors.iter().map(|(n, t)| (n.as_str(), t)), &info)
            .map_err(|e| QuadError::validation(format!("tensor serialization: {e}")))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| QuadError::io(path, e))
    }
}

/// A container loaded into memory.
pub struct TensorFile {
    path: std::path::PathBuf,
    bytes: Vec<u8>,
}

impl TensorFile {
    pub fn open(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| QuadError::io(path, e))?;
        let file = Self {
            path: path.to_path_buf(),
            bytes,
        };
        file.parsed()?;
        Ok(file)
    }

    fn parsed(&self) -> Result<SafeTensors<'_>> {
        SafeTensors::deserialize(&self.bytes).map_err(|e| self.bad(format!("{e}")))
    }

    fn bad(&self, reason: impl Into<String>) -> QuadError {
        QuadError::format(&self.path, reason)
    }

    pub fn meta(&self) -> Result<Option<String>> {
        let (_, md) = SafeTensors::read_metadata(&self.bytes).map_err(|e| self.bad(format!("{e}")))?;
        Ok(md.metadata().as_ref().and_then(|m| m.get(META_KEY).cloned()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.parsed().is_ok_and(|st| st.tensor(name).is_ok())
    }

    fn with_view<T>(&self, name: &str, f: impl FnOnce(&TensorView<'_>) -> Result<T>) -> Result<T> {
        let st = self.parsed()?;
        let view = st
            .tensor(name)
            .map_err(|_| self.bad(format!("missing tensor '{name}'")))?;
        f(&view)
    }

    /// Real tensor widened to `f64`, with its shape.
    pub fn real(&self, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
        self.with_view(name, |v| {
            let shape = v.shape().to_vec();
            let values = match v.dtype() {
                Dtype::F64 => v
                    .data()
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                    .collect(),
                Dtype::F32 => v
                    .data()
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
                    .collect(),
                other => return Err(self.bad(format!("tensor '{name}' has dtype {other:?}, expected a real type"))),
            };
            Ok((shape, values))
        })
    }

    pub fn vector(&self, name: &str) -> Result<Vec<f64>> {
        let (shape, values) = self.real(name)?;
        if shape.len() != 1 {
            return Err(self.bad(format!("tensor '{name}' has rank {}, expected 1", shape.len())));
        }
        Ok(values)
    }

    pub fn matrix(&self, name: &str) -> Result<DenseMatrix> {
        let (shape, values) = self.real(name)?;
        match shape[..] {
            [r, c] => DenseMatrix::new(r, c, values).map_err(|e| self.bad(format!("tensor '{name}': {e}"))),
            _ => Err(self.bad(format!("tensor '{name}' has rank {}, expected 2", shape.len()))),
        }
    }

    pub fn codes(&self, name: &str) -> Result<(Vec<usize>, Vec<i8>)> {
        self.with_view(name, |v| {
            if v.dtype() != Dtype::I8 {
                return Err(self.bad(format!("tensor '{name}' has dtype {:?}, expected I8", v.dtype())));
            }
            Ok((v.shape().to_vec(), v.data().iter().map(|&b| b as i8).collect()))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.safetensors");
        let m = DenseMatrix::from_rows(&[vec![1.0, -2.5], vec![0.125, 3.0]]).unwrap();
        let mut w = TensorWriter::new();
        w.meta("{\"k\":1}")
            .matrix_f64("b", &m)
            .matrix_f32("a", &m)
            .i8("c", &[3], &[-7, 0, 7]);
        w.write(&path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), w.to_bytes().unwrap());

        let f = TensorFile::open(&path).unwrap();
        assert_eq!(f.matrix("b").unwrap(), m);
        assert_eq!(f.matrix("a").unwrap(), m);
        assert_eq!(f.codes("c").unwrap(), (vec![3], vec![-7, 0, 7]));
        assert_eq!(f.meta().unwrap().as_deref(), Some("{\"k\":1}"));
        assert!(f.contains("a") && !f.contains("z"));
        assert!(matches!(f.matrix("z"), Err(QuadError::Format { .. })));
        assert!(f.vector("b").is_err());
    }

    #[test]
    fn garbage_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad");
        std::fs::write(&path, b"not a tensor file").unwrap();
        assert!(matches!(TensorFile::open(&path), Err(QuadError::Format { .. })));
    }
}
