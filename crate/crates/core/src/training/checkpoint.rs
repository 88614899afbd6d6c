//! `BVALCKPT` files: 8-byte magic, little-endian `u64` header length, a JSON
//! header, then little-endian `f64` payloads: every parameter in header
//! order, followed by the optimizer's first and then second moments when
//! present.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adamw::{AdamWConfig, OptimState};
use crate::encoders::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{ParamGroup, ParamStore};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BVALCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Which parameter groups a load restores.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupsFilter {
    All,
    /// Only the two backbones; everything else keeps its fresh init.
    BackboneOnly,
}

impl GroupsFilter {
    pub fn admits(self, group: ParamGroup) -> bool {
        match self {
            GroupsFilter::All => true,
            GroupsFilter::BackboneOnly => group.is_backbone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    group: ParamGroup,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct OptimEntry {
    cfg: AdamWConfig,
    step: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    groups: Vec<ParamGroup>,
    params: Vec<ParamEntry>,
    model_config: ModelConfig,
    #[serde(default)]
    run_config: Option<serde_json::Value>,
    optimizer: Option<OptimEntry>,
}

/// Everything a checkpoint file holds.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub run_config: Option<serde_json::Value>,
    pub store: ParamStore,
    pub optimizer: Option<OptimState>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, optimizer: Option<&OptimState>) -> Self {
        Self {
            model_config: model.cfg.clone(),
            run_config: None,
            store: model.store.clone(),
            optimizer: optimizer.cloned(),
        }
    }

    pub fn groups(&self) -> Vec<ParamGroup> {
        self.store.groups_present()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            version: CHECKPOINT_VERSION,
            groups: self.groups(),
            params: self
                .store
                .iter()
                .map(|(_, p)| ParamEntry {
                    name: p.name.clone(),
                    group: p.group,
                    shape: p.value.shape().to_vec(),
                })
                .collect(),
            model_config: self.model_config.clone(),
            run_config: self.run_config.clone(),
            optimizer: self.optimizer.as_ref().map(|o| OptimEntry {
                cfg: o.cfg,
                step: o.step,
            }),
        };
        let json = serde_json::to_vec(&header)?;
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        let mut put = |t: &Tensor| {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        };
        for (_, p) in self.store.iter() {
            put(&p.value);
        }
        if let Some(o) = &self.optimizer {
            o.m.iter().chain(&o.v).for_each(&mut put);
        }
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!(
                "{}: not a checkpoint",
                path.display()
            )));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16usize.saturating_add(len))
            .ok_or_else(|| Error::Format("truncated checkpoint header".into()))?;
        let header: Header = serde_json::from_slice(body)
            .map_err(|e| Error::Format(format!("malformed checkpoint header: {e}")))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {} (expected {CHECKPOINT_VERSION})",
                header.version
            )));
        }
        let mut payload = bytes[16 + len..].chunks_exact(8);
        if !payload.remainder().is_empty() {
            return Err(Error::Format(
                "checkpoint payload is not whole f64 values".into(),
            ));
        }
        let mut next = |shape: &[usize]| -> Result<Tensor> {
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| {
                    payload
                        .next()
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .ok_or_else(|| Error::Format("truncated checkpoint payload".into()))
                })
                .collect::<Result<Vec<_>>>()?;
            Tensor::new(shape.to_vec(), data)
        };
        let mut store = ParamStore::new();
        for e in &header.params {
            store.add(e.name.clone(), e.group, next(&e.shape)?);
        }
        let optimizer = match header.optimizer {
            Some(o) => {
                let m = header
                    .params
                    .iter()
                    .map(|e| next(&e.shape))
                    .collect::<Result<Vec<_>>>()?;
                let v = header
                    .params
                    .iter()
                    .map(|e| next(&e.shape))
                    .collect::<Result<Vec<_>>>()?;
                Some(OptimState {
                    cfg: o.cfg,
                    step: o.step,
                    m,
                    v,
                })
            }
            None => None,
        };
        if next(&[1]).is_ok() {
            return Err(Error::Format(
                "trailing bytes after checkpoint payload".into(),
            ));
        }
        Ok(Self {
            model_config: header.model_config,
            run_config: header.run_config,
            store,
            optimizer,
        })
    }

    /// Copies the admitted groups into `model`. Every admitted group the
    /// model uses must be present, and every parameter's shape must agree.
    pub fn restore_into(&self, model: &mut Model, filter: GroupsFilter) -> Result<()> {
        let stored: BTreeSet<ParamGroup> = self.groups().into_iter().collect();
        let wanted: Vec<ParamGroup> = model
            .store
            .groups_present()
            .into_iter()
            .filter(|g| filter.admits(*g))
            .collect();
        if let Some(g) = wanted.iter().find(|g| !stored.contains(g)) {
            return Err(Error::MissingGroup(g.name().into()));
        }
        for (_, p) in model.store.iter() {
            if filter.admits(p.group) && self.store.by_name(&p.name).is_none() {
                return Err(Error::Format(format!(
                    "checkpoint has no parameter `{}`",
                    p.name
                )));
            }
        }
        model.store.copy_from(&self.store, |g| filter.admits(g))
    }

    /// A model built from the stored config with every group restored.
    pub fn model(&self) -> Result<Model> {
        let mut m = Model::new(&self.model_config)?;
        self.restore_into(&mut m, GroupsFilter::All)?;
        Ok(m)
    }
}
