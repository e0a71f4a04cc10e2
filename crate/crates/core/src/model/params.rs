use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ModelError, Result};
use crate::tensor::{read_checkpoint, write_checkpoint, Graph, Tensor, Var};

/// Named parameters in creation order. Indices are stable handles.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn tensor(&self, id: usize) -> &Tensor {
        &self.tensors[id]
    }

    pub fn tensor_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    /// Places every parameter on the graph. Trainable leaves receive gradients.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let entries: Vec<(String, Tensor)> = self.names.iter().cloned().zip(self.tensors.iter().cloned()).collect();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &entries)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    /// Overwrites values by name; every stored parameter must be present with a matching shape.
    pub fn load_values(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path)?;
        let entries = read_checkpoint(&bytes[..])?;
        let by_name: HashMap<String, Tensor> = entries.into_iter().collect();
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let loaded = by_name
                .get(name)
                .ok_or_else(|| ModelError::Checkpoint(format!("missing parameter {name}")))?;
            if loaded.shape() != t.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "parameter {name}: shape {:?} in file, {:?} expected",
                    loaded.shape(),
                    t.shape()
                )));
            }
            *t = loaded.clone();
        }
        Ok(())
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        ParamStore::new()
    }
}

/// Deterministic parameter construction.
pub struct ParamBuilder<'a> {
    pub store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    scale: f64,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64, scale: f64) -> Self {
        ParamBuilder {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            scale,
        }
    }

    pub fn uniform(&mut self, name: &str, rows: usize, cols: usize) -> usize {
        let s = self.scale;
        let data = (0..rows * cols).map(|_| self.rng.random_range(-s..s)).collect();
        self.store.push(name, Tensor::matrix(rows, cols, data).expect("positive dims"))
    }

    pub fn constant(&mut self, name: &str, rows: usize, cols: usize, value: f64) -> usize {
        self.store.push(name, Tensor::full(&[rows, cols], value))
    }
}
