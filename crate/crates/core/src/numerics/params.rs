use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::array::DenseArray;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Named trainable arrays, ordered by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    arrays: BTreeMap<String, DenseArray>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: DenseArray) {
        self.arrays.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&DenseArray> {
        self.arrays.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut DenseArray> {
        self.arrays.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&DenseArray> {
        self.arrays
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.arrays.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &DenseArray)> {
        self.arrays.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut DenseArray)> {
        self.arrays.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.arrays.values().map(DenseArray::len).sum()
    }

    /// Registers `name` on the tape as a trainable leaf. Reuses the leaf if
    /// it is already bound.
    pub fn bind(&self, tape: &mut Tape, name: &str) -> Result<Var> {
        if let Some(v) = tape.param_var(name) {
            return Ok(v);
        }
        tape.param(name, self.require(name)?.clone())
    }

    /// One `<name>.bvra` file per parameter.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (name, a) in &self.arrays {
            fs::write(dir.join(format!("{name}.bvra")), a.to_bytes())?;
        }
        Ok(())
    }

    pub fn load_dir(dir: &Path, names: &[String]) -> Result<Self> {
        let mut store = Self::new();
        for name in names {
            let path = dir.join(format!("{name}.bvra"));
            let bytes = fs::read(&path)?;
            let a = DenseArray::from_bytes(&bytes)
                .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
            store.insert(name.clone(), a);
        }
        Ok(store)
    }
}
