use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{Ablation, ModelConfig, ModelParams};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "tsets-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: [usize; 2],
    /// Row-major.
    pub values: Vec<f64>,
}

/// Named tensors plus everything needed to rebuild and use the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config: ModelConfig,
    pub ablation: Ablation,
    /// Raw element ids by index, so predictions can be reported in raw ids.
    #[serde(default)]
    pub vocab: Option<Vec<String>>,
    #[serde(default)]
    pub epoch: Option<usize>,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new(params: &ModelParams, ablation: Ablation, vocab: Option<Vec<String>>) -> Self {
        let tensors = params
            .named()
            .into_iter()
            .map(|(name, t)| NamedTensor {
                name,
                shape: t.shape(),
                values: t.into_vec(),
            })
            .collect();
        Self {
            format: CHECKPOINT_FORMAT.into(),
            config: params.config().clone(),
            ablation,
            vocab,
            epoch: None,
            tensors,
        }
    }

    pub fn params(&self) -> Result<ModelParams> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {:?}", self.format)));
        }
        self.config
            .validate(self.ablation)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        if let Some(v) = &self.vocab {
            if v.len() != self.config.num_elements {
                return Err(Error::Checkpoint(format!(
                    "vocabulary has {} ids but the model has {} elements",
                    v.len(),
                    self.config.num_elements
                )));
            }
        }
        let named = self
            .tensors
            .iter()
            .map(|nt| {
                let t = Tensor::from_vec(nt.shape[0], nt.shape[1], nt.values.clone())
                    .map_err(|_| Error::Checkpoint(format!("{}: values do not match shape", nt.name)))?;
                Ok((nt.name.clone(), t))
            })
            .collect::<Result<Vec<_>>>()?;
        ModelParams::from_named(self.config.clone(), named)
    }

    /// Fails unless the checkpoint's model covers exactly `num_elements`.
    pub fn expect_elements(&self, num_elements: usize) -> Result<()> {
        if self.config.num_elements != num_elements {
            return Err(Error::Checkpoint(format!(
                "model has {} elements, dataset has {num_elements}",
                self.config.num_elements
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, self)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        ck.params()?;
        Ok(ck)
    }
}
