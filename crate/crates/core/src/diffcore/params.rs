use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::tape::{Tape, Var};
use crate::diffcore::tensor::Tensor;
use crate::error::{Error, Result};

/// Ordered, named parameter store.
///
/// Insertion order is the canonical order: checkpoints serialize buffers in
/// it, optimizers walk groups in it, and gradient extraction zips against it.
/// Names are unique.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.tensors[self.index[name]]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self.tensors[self.index[name]]
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    /// Lift every parameter onto `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let vars: Vec<Var> = self.tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        BoundParams { index: self.index.clone(), vars }
    }

    /// Gradients for every parameter after a backward pass, in store order.
    pub fn grads(&self, tape: &Tape, bound: &BoundParams) -> Vec<Vec<f64>> {
        self.names
            .iter()
            .map(|n| tape.grad_or_zeros(bound.var(n)))
            .collect()
    }

    /// Total number of scalar coordinates.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Concatenate all parameters into one flat vector (store order).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for t in &self.tensors {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Overwrite all parameters from a flat vector produced by [`flatten`](Self::flatten).
    pub fn unflatten(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_scalars(), "unflatten: length mismatch");
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }
}

/// Tape handles for one forward pass over a [`ParamStore`].
pub struct BoundParams {
    index: HashMap<String, usize>,
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        self.vars[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

/// Write a checkpoint: a little-endian u64 manifest length, a JSON manifest
/// of `(name, shape)` records, then the flat f64 buffers (little-endian)
/// concatenated in manifest order.
pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    let manifest: Vec<ManifestEntry> = store
        .iter()
        .map(|(name, t)| ManifestEntry { name: name.to_string(), shape: t.shape().to_vec() })
        .collect();
    let manifest_bytes = serde_json::to_vec(&manifest)?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&manifest_bytes)?;
    for (_, t) in store.iter() {
        for &v in t.data() {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    file.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)?;
    let manifest_len = u64::from_le_bytes(len_bytes) as usize;
    let mut manifest_bytes = vec![0u8; manifest_len];
    file.read_exact(&mut manifest_bytes)?;
    let manifest: Vec<ManifestEntry> = serde_json::from_slice(&manifest_bytes)?;

    let mut store = ParamStore::new();
    for entry in manifest {
        let n: usize = entry.shape.iter().product();
        let mut buf = vec![0u8; n * 8];
        file.read_exact(&mut buf).map_err(|e| {
            Error::Checkpoint(format!("truncated buffer for {}: {e}", entry.name))
        })?;
        let data: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.insert(entry.name, Tensor::new(entry.shape, data)?);
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let mut store = ParamStore::new();
        store.insert("enc.w", Tensor::from_vec(vec![2, 3], vec![1.0, -2.5, 3.25, 0.1, 1e-300, 7.0]));
        store.insert("enc.b", Tensor::from_vec(vec![2], vec![0.5, -0.5]));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save_checkpoint(&store, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();

        assert_eq!(loaded.len(), store.len());
        for ((n1, t1), (n2, t2)) in loaded.iter().zip(store.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1, t2);
        }
    }

    #[test]
    fn flatten_unflatten_roundtrip() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::from_vec(vec![2], vec![1.0, 2.0]));
        store.insert("b", Tensor::from_vec(vec![3], vec![3.0, 4.0, 5.0]));
        let flat = store.flatten();
        assert_eq!(flat, vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        let mut store2 = store.clone();
        store2.unflatten(&[9.0, 8.0, 7.0, 6.0, 5.0]);
        assert_eq!(store2.get("a").data(), &[9.0, 8.0]);
        assert_eq!(store2.get("b").data(), &[7.0, 6.0, 5.0]);
    }
}
