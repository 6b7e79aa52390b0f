use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::io::{read_tensor, write_tensor};
use crate::tensor::Tensor;

/// Named trainable tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    pub tensors: BTreeMap<String, Tensor>,
}

/// Parameters recorded as leaves on one tape.
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct WeightsManifest {
    /// Parameter name to file name inside the weights directory.
    pub tensors: BTreeMap<String, String>,
    pub config_hash: String,
}

impl ParamStore {
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn leaves(&self, tape: &Tape) -> ParamVars {
        ParamVars {
            vars: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), tape.leaf(t.clone())))
                .collect(),
        }
    }

    /// The same names recorded as constants (no gradients).
    pub fn constants(&self, tape: &Tape) -> ParamVars {
        ParamVars {
            vars: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), tape.constant(t.clone())))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    pub fn save(&self, dir: &Path, config_hash: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = WeightsManifest {
            tensors: BTreeMap::new(),
            config_hash: config_hash.to_string(),
        };
        for (name, t) in &self.tensors {
            let file = format!("{name}.gtsr");
            write_tensor(&dir.join(&file), t)?;
            manifest.tensors.insert(name.clone(), file);
        }
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<(Self, WeightsManifest)> {
        let path = dir.join("manifest.json");
        let buf = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: WeightsManifest = serde_json::from_slice(&buf)?;
        let mut store = Self::default();
        for (name, file) in &manifest.tensors {
            if file.contains('/') || file.contains('\\') {
                return Err(Error::Data(format!("weights manifest names a path outside its directory: {file}")));
            }
            store.insert(name.clone(), read_tensor(&dir.join(file))?);
        }
        Ok((store, manifest))
    }
}

impl ParamVars {
    /// Swap in a different variable under `name`.
    pub fn set(&mut self, name: impl Into<String>, v: Var) {
        self.vars.insert(name.into(), v);
    }

    pub fn get(&self, name: &str) -> Result<&Var> {
        self.vars
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    /// Gradient of every parameter, by name.
    pub fn gradients(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars.iter().map(|(k, v)| (k.clone(), grads.wrt(v))).collect()
    }
}
