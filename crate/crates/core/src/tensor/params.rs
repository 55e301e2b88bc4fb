//! Named parameter storage, on-disk format, and binding onto a tape.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::ops::{Deref, DerefMut};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT: &str = "rcn-params";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Buffers such as running statistics are stored but never optimized.
    pub trainable: bool,
}

/// An ordered collection of named tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T> {
    entries: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    shape: Vec<usize>,
    file: String,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    dtype: String,
    params: BTreeMap<String, ManifestEntry>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> Result<usize> {
        if self.index.contains_key(name) {
            return Err(Error::Invalid(format!("duplicate parameter `{name}`")));
        }
        self.entries.push(Parameter {
            name: name.to_string(),
            value,
            trainable,
        });
        self.index.insert(name.to_string(), self.entries.len() - 1);
        Ok(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.index_of(name)
            .map(|i| &self.entries[i].value)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        match self.index_of(name) {
            Some(i) => Ok(&mut self.entries[i].value),
            None => Err(Error::UnknownParameter(name.to_string())),
        }
    }

    pub fn entry(&self, i: usize) -> &Parameter<T> {
        &self.entries[i]
    }

    pub fn entry_mut(&mut self, i: usize) -> &mut Parameter<T> {
        &mut self.entries[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.entries.iter()
    }

    /// Names of trainable entries whose name starts with `prefix`.
    pub fn trainable_names(&self, prefix: &str) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|p| p.trainable && p.name.starts_with(prefix))
            .map(|p| p.name.as_str())
            .collect()
    }

    pub fn trainable_scalars(&self) -> usize {
        self.entries
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    trainable: p.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Writes one little-endian `f32` file per parameter plus a JSON
    /// manifest mapping names to shapes and files.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut params = BTreeMap::new();
        for p in &self.entries {
            let file = format!("{}.bin", p.name);
            let mut bytes = Vec::with_capacity(p.value.numel() * 4);
            for x in p.value.data() {
                bytes.extend_from_slice(&x.to_f32().unwrap_or(f32::NAN).to_le_bytes());
            }
            fs::write(dir.join(&file), bytes)?;
            params.insert(
                p.name.clone(),
                ManifestEntry {
                    shape: p.value.shape().to_vec(),
                    file,
                    trainable: p.trainable,
                },
            );
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            version: FORMAT_VERSION,
            dtype: "f32-le".into(),
            params,
        };
        fs::write(
            dir.join(MANIFEST_FILE),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(())
    }

    /// Reads a directory written by [`ParamSet::save`]. Entries come back in
    /// name order.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
        if manifest.format != FORMAT || manifest.dtype != "f32-le" {
            return Err(Error::Format {
                path: manifest_path,
                message: format!(
                    "unsupported format {} / {}",
                    manifest.format, manifest.dtype
                ),
            });
        }
        let mut set = ParamSet::new();
        for (name, entry) in manifest.params {
            let path = dir.join(&entry.file);
            let bytes = fs::read(&path)?;
            let numel: usize = entry.shape.iter().product();
            if bytes.len() != numel * 4 {
                return Err(Error::Format {
                    path,
                    message: format!(
                        "expected {} bytes for shape {:?}, found {}",
                        numel * 4,
                        entry.shape,
                        bytes.len()
                    ),
                });
            }
            let data = bytes
                .chunks_exact(4)
                .map(|b| {
                    T::from_f32(f32::from_le_bytes([b[0], b[1], b[2], b[3]])).unwrap_or(T::nan())
                })
                .collect();
            set.insert(&name, Tensor::new(&entry.shape, data)?, entry.trainable)?;
        }
        Ok(set)
    }
}

/// A tape bound to a parameter set for one forward/backward pass.
///
/// Parameters become tape leaves on first use. Running-statistic updates
/// produced during a training forward pass are collected and applied by the
/// caller once the pass is over.
pub struct Graph<'p, T: Real> {
    tape: Tape<T>,
    params: &'p ParamSet<T>,
    bound: Vec<Option<Var>>,
    training: bool,
    buffer_updates: Vec<(String, Tensor<T>)>,
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(params: &'p ParamSet<T>, training: bool) -> Self {
        Graph {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
            training,
            buffer_updates: Vec::new(),
        }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn params(&self) -> &'p ParamSet<T> {
        self.params
    }

    /// Binds a parameter onto the tape (once) and returns its handle.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        let i = self
            .params
            .index_of(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        if let Some(v) = self.bound[i] {
            return Ok(v);
        }
        let entry = self.params.entry(i);
        let v = self.tape.leaf(entry.value.clone(), entry.trainable);
        self.bound[i] = Some(v);
        Ok(v)
    }

    pub fn record_buffer(&mut self, name: &str, value: Tensor<T>) {
        self.buffer_updates.push((name.to_string(), value));
    }

    pub fn take_buffer_updates(&mut self) -> Vec<(String, Tensor<T>)> {
        std::mem::take(&mut self.buffer_updates)
    }

    /// Gradients of every bound trainable parameter, indexed like the set.
    pub fn param_grads(&self) -> Vec<Option<Vec<T>>> {
        self.bound
            .iter()
            .map(|b| b.and_then(|v| self.tape.grad(v).map(<[T]>::to_vec)))
            .collect()
    }
}

impl<T: Real> Deref for Graph<'_, T> {
    type Target = Tape<T>;

    fn deref(&self) -> &Tape<T> {
        &self.tape
    }
}

impl<T: Real> DerefMut for Graph<'_, T> {
    fn deref_mut(&mut self) -> &mut Tape<T> {
        &mut self.tape
    }
}

impl<T: Real> ParamSet<T> {
    pub fn apply_buffer_updates(&mut self, updates: Vec<(String, Tensor<T>)>) -> Result<()> {
        for (name, value) in updates {
            *self.get_mut(&name)? = value;
        }
        Ok(())
    }
}
