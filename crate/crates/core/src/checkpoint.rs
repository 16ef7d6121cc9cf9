//! Checkpoint files: one JSON header line, then raw little-endian f32
//! arrays in header order (training weights first, then EMA weights).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::{Model, ModelConfig, PredTarget};
use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::textspace::{Granularity, Vocab};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArraySpec {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format_version: u32,
    pub model: ModelConfig,
    pub pred_target: PredTarget,
    pub granularity: Granularity,
    pub vocab_hash: String,
    pub train_step: u64,
    pub seed: u64,
    pub arrays: Vec<ArraySpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub ema: Model,
    pub granularity: Granularity,
    pub vocab_hash: String,
    pub train_step: u64,
    pub seed: u64,
}

impl Checkpoint {
    fn header(&self) -> Header {
        let names = self.model.param_names();
        let specs = |prefix: &str, m: &Model| -> Vec<ArraySpec> {
            names
                .iter()
                .zip(m.tensors())
                .map(|(n, t)| ArraySpec {
                    name: format!("{prefix}.{n}"),
                    shape: t.shape().to_vec(),
                })
                .collect()
        };
        let mut arrays = specs("param", &self.model);
        arrays.extend(specs("ema", &self.ema));
        Header {
            format_version: FORMAT_VERSION,
            model: self.model.config.clone(),
            pred_target: self.model.pred_target,
            granularity: self.granularity,
            vocab_hash: self.vocab_hash.clone(),
            train_step: self.train_step,
            seed: self.seed,
            arrays,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec(&self.header())?;
        out.push(b'\n');
        for t in self.model.tensors().into_iter().chain(self.ema.tensors()) {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("missing header line".into()))?;
        let header: Header = serde_json::from_slice(&bytes[..nl]).map_err(|e| bad(format!("header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {}", header.format_version)));
        }
        let body = &bytes[nl + 1..];
        let want: usize = header.arrays.iter().map(|a| a.shape.iter().product::<usize>()).sum();
        if body.len() != want * 4 {
            return Err(bad(format!(
                "body holds {} bytes, header declares {}",
                body.len(),
                want * 4
            )));
        }
        let mut tensors = Vec::with_capacity(header.arrays.len());
        let mut off = 0;
        for a in &header.arrays {
            let n: usize = a.shape.iter().product();
            let data = body[off..off + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            off += 4 * n;
            tensors.push(Tensor::new(a.shape.clone(), data).map_err(|e| bad(format!("{}: {e}", a.name)))?);
        }
        if tensors.len() % 2 != 0 {
            return Err(bad("odd number of arrays".into()));
        }
        let ema_tensors = tensors.split_off(tensors.len() / 2);
        let load = |ts: Vec<Tensor>| {
            Model::from_tensors(header.model.clone(), header.pred_target, ts).map_err(|e| bad(e.to_string()))
        };
        let model = load(tensors)?;
        let ema = load(ema_tensors)?;
        let expected: Vec<String> = model.param_names();
        for (i, a) in header.arrays.iter().enumerate() {
            let prefix = if i < expected.len() { "param" } else { "ema" };
            let want = format!("{prefix}.{}", expected[i % expected.len()]);
            if a.name != want {
                return Err(bad(format!("array {i} is {}, expected {want}", a.name)));
            }
        }
        Ok(Self {
            model,
            ema,
            granularity: header.granularity,
            vocab_hash: header.vocab_hash,
            train_step: header.train_step,
            seed: header.seed,
        })
    }

    /// Loads and, when `vocab` is given, checks it against the header hash.
    pub fn load(path: &Path, vocab: Option<&Vocab>) -> Result<Self> {
        let ck = Self::from_bytes(&fs::read(path)?)?;
        if let Some(v) = vocab {
            let found = v.hash();
            if found != ck.vocab_hash {
                return Err(Error::VocabMismatch {
                    expected: ck.vocab_hash,
                    found,
                });
            }
        }
        Ok(ck)
    }
}
