//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, `u32` LE format version, `u64` LE header length,
//! a JSON header, then each component's parameter blob in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{parse_model_spec, stage_name, Model, ModelDims, ModelError, ModelSpec, ParamSet, IDNET};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TASTASCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("digest mismatch for component {component}: stored {stored}, computed {computed}")]
    DigestMismatch {
        component: String,
        stored: String,
        computed: String,
    },
    #[error("component {0} missing from checkpoint")]
    MissingComponent(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// One trained (or freshly initialised) parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub name: String,
    pub params: ParamSet,
    pub frozen: bool,
    /// Training step that last wrote these parameters (`init` if untrained).
    pub trained_in: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub init_seed: u64,
    /// Step that produced this file, e.g. `idnet`, `stage1`, `naive`.
    pub produced_by: String,
    pub components: Vec<Component>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    spec: String,
    num_sources: usize,
    sample_rate: u32,
    dims: ModelDims,
    init_seed: u64,
    produced_by: String,
    components: Vec<ComponentHeader>,
}

#[derive(Serialize, Deserialize)]
struct ComponentHeader {
    name: String,
    frozen: bool,
    trained_in: String,
    digest: String,
    layout: Vec<(String, usize, usize)>,
    blob_len: u64,
}

impl Checkpoint {
    pub fn component(&self, name: &str) -> Option<&Component> {
        self.components.iter().find(|c| c.name == name)
    }

    pub fn component_mut(&mut self, name: &str) -> Option<&mut Component> {
        self.components.iter_mut().find(|c| c.name == name)
    }

    /// Inserts or replaces a component, keeping idnet first then stages in order.
    pub fn put(&mut self, c: Component) {
        match self.component_mut(&c.name) {
            Some(slot) => *slot = c,
            None => {
                self.components.push(c);
                self.components.sort_by_key(|c| component_rank(&c.name));
            }
        }
    }

    pub fn digest(&self, name: &str) -> Option<String> {
        self.component(name).map(|c| c.params.digest())
    }

    /// Assembles a [`Model`]; fails if any component the spec needs is absent.
    pub fn model(&self) -> Result<Model, CheckpointError> {
        let get = |n: &str| {
            self.component(n)
                .map(|c| c.params.clone())
                .ok_or_else(|| CheckpointError::MissingComponent(n.to_string()))
        };
        let idnet = if self.spec.identity_aware {
            Some(get(IDNET)?)
        } else {
            None
        };
        let stages = (1..=self.spec.num_stages())
            .map(|k| get(&stage_name(k)))
            .collect::<Result<_, _>>()?;
        let model = Model {
            spec: self.spec.clone(),
            idnet,
            stages,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            spec: self.spec.text(),
            num_sources: self.spec.num_sources,
            sample_rate: self.spec.sample_rate,
            dims: self.spec.dims,
            init_seed: self.init_seed,
            produced_by: self.produced_by.clone(),
            components: self
                .components
                .iter()
                .map(|c| ComponentHeader {
                    name: c.name.clone(),
                    frozen: c.frozen,
                    trained_in: c.trained_in.clone(),
                    digest: c.params.digest(),
                    layout: c.params.layout(),
                    blob_len: (c.params.num_scalars() * 8) as u64,
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for c in &self.components {
            out.extend_from_slice(&c.params.to_blob());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let corrupt = |m: &str| CheckpointError::Corrupt(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(corrupt("truncated header"));
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| corrupt(&e.to_string()))?;
        let spec = parse_model_spec(&header.spec)?
            .with_sources(header.num_sources)
            .with_dims(header.dims)
            .with_sample_rate(header.sample_rate);
        spec.validate()?;
        let mut rest = &body[hlen..];
        let mut components = Vec::with_capacity(header.components.len());
        for ch in header.components {
            let n = ch.blob_len as usize;
            if rest.len() < n {
                return Err(corrupt(&format!("truncated blob for {}", ch.name)));
            }
            let (blob, tail) = rest.split_at(n);
            rest = tail;
            let params = ParamSet::from_blob(&ch.layout, blob)
                .ok_or_else(|| corrupt(&format!("layout/blob mismatch for {}", ch.name)))?;
            let computed = params.digest();
            if computed != ch.digest {
                return Err(CheckpointError::DigestMismatch {
                    component: ch.name,
                    stored: ch.digest,
                    computed,
                });
            }
            components.push(Component {
                name: ch.name,
                params,
                frozen: ch.frozen,
                trained_in: ch.trained_in,
            });
        }
        if !rest.is_empty() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Self {
            spec,
            init_seed: header.init_seed,
            produced_by: header.produced_by,
            components,
        })
    }

    /// Writes atomically via a temporary file in the same directory.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io)?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)?;
        f.sync_all().map_err(io)?;
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

fn component_rank(name: &str) -> (usize, usize) {
    if name == IDNET {
        (0, 0)
    } else {
        let k = name
            .strip_prefix("stage")
            .and_then(|k| k.parse().ok())
            .unwrap_or(usize::MAX);
        (1, k)
    }
}
