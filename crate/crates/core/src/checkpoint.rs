//! JSON parameter dumps with a shape header per tensor.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Parameters;
use crate::tensor::Tensor;

pub const FORMAT: &str = "xpad-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Module {
    Pad,
    Lg,
    Disc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub module: Module,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_hash: Option<String>,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn capture<P: Parameters + ?Sized>(module: Module, vocab_hash: Option<String>, params: &P) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            module,
            vocab_hash,
            meta: BTreeMap::new(),
            tensors: params
                .named()
                .into_iter()
                .map(|(name, t)| TensorRecord {
                    name: name.into(),
                    rows: t.rows(),
                    cols: t.cols(),
                    values: t.values().to_vec(),
                })
                .collect(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.into(), value.to_string());
        self
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let c: Self = serde_json::from_str(&text)?;
        if c.format != FORMAT || c.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: unsupported format {} v{}",
                path.display(),
                c.format,
                c.version
            )));
        }
        for t in &c.tensors {
            if t.values.len() != t.rows * t.cols {
                return Err(Error::Checkpoint(format!(
                    "tensor {}: header {}x{} but {} values",
                    t.name,
                    t.rows,
                    t.cols,
                    t.values.len()
                )));
            }
        }
        Ok(c)
    }

    pub fn expect_module(&self, module: Module) -> Result<()> {
        if self.module != module {
            return Err(Error::Checkpoint(format!("expected a {module:?} checkpoint, found {:?}", self.module)));
        }
        Ok(())
    }

    pub fn expect_vocab(&self, vocab_hash: &str) -> Result<()> {
        match &self.vocab_hash {
            Some(h) if h == vocab_hash => Ok(()),
            Some(h) => Err(Error::VocabMismatch {
                checkpoint: h.clone(),
                data: vocab_hash.into(),
            }),
            None => Err(Error::Checkpoint("checkpoint carries no vocabulary hash".into())),
        }
    }

    pub fn shape_of(&self, name: &str) -> Result<(usize, usize)> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .map(|t| (t.rows, t.cols))
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }

    /// Copies values into `params`; every name and shape must match.
    pub fn restore<P: Parameters + ?Sized>(&self, params: &mut P) -> Result<()> {
        let mut named = params.named_mut();
        if named.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors in checkpoint, model has {}",
                self.tensors.len(),
                named.len()
            )));
        }
        for ((name, t), rec) in named.iter_mut().zip(&self.tensors) {
            if *name != rec.name || t.shape() != (rec.rows, rec.cols) {
                return Err(Error::Checkpoint(format!(
                    "tensor {} {}x{} does not fit model tensor {name} {}x{}",
                    rec.name,
                    rec.rows,
                    rec.cols,
                    t.rows(),
                    t.cols()
                )));
            }
            **t = Tensor::from_vec(rec.rows, rec.cols, rec.values.clone())?;
        }
        Ok(())
    }
}
