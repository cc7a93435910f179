use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{ModelError, ModelSpec, IDNET};
use crate::graph::{Graph, Tensor, Var};

/// Named parameter tensors of one component, kept in name order so that
/// serialisation and digests are canonical.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// `(name, rows, cols)` in serialisation order.
    pub fn layout(&self) -> Vec<(String, usize, usize)> {
        self.tensors
            .iter()
            .map(|(k, t)| (k.clone(), t.nrows(), t.ncols()))
            .collect()
    }

    /// Little-endian `f64` values of every tensor, row-major, in name order.
    pub fn to_blob(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.num_scalars() * 8);
        for t in self.tensors.values() {
            for v in t.as_standard_layout().iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_blob(layout: &[(String, usize, usize)], blob: &[u8]) -> Option<Self> {
        let total: usize = layout.iter().map(|(_, r, c)| r * c).sum();
        if blob.len() != total * 8 {
            return None;
        }
        let mut vals = blob
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")));
        let mut set = ParamSet::new();
        for (name, r, c) in layout {
            let data: Vec<f64> = vals.by_ref().take(r * c).collect();
            set.insert(name.clone(), Tensor::from_shape_vec((*r, *c), data).ok()?);
        }
        Some(set)
    }

    /// Hex SHA-256 of [`ParamSet::to_blob`].
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_blob()))
    }

    pub fn matches_layout(&self, other: &ParamSet) -> Result<(), ModelError> {
        for (name, t) in &other.tensors {
            match self.tensors.get(name) {
                None => return Err(ModelError::ParamMismatch(format!("missing {name}"))),
                Some(x) if x.dim() != t.dim() => {
                    return Err(ModelError::ParamMismatch(format!(
                        "{name}: {:?} != expected {:?}",
                        x.dim(),
                        t.dim()
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Graph handles for one component's parameters.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Adds every tensor to `g`, as a differentiable leaf when `trainable`.
pub fn bind(g: &mut Graph, params: &ParamSet, trainable: bool) -> Bound {
    let vars = params
        .iter()
        .map(|(k, t)| {
            let v = if trainable {
                g.leaf(t.clone())
            } else {
                g.constant(t.clone())
            };
            (k.clone(), v)
        })
        .collect();
    Bound { vars }
}

fn stream_of(name: &str) -> u64 {
    // FNV-1a
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

struct Init {
    rng: ChaCha8Rng,
    set: ParamSet,
}

impl Init {
    fn uniform(&mut self, name: &str, rows: usize, cols: usize, fan_in: usize) {
        let a = 1.0 / (fan_in as f64).sqrt();
        let t = Tensor::from_shape_fn((rows, cols), |_| self.rng.random_range(-a..a));
        self.set.insert(name, t);
    }

    fn fill(&mut self, name: &str, rows: usize, cols: usize, v: f64) {
        self.set.insert(name, Tensor::from_elem((rows, cols), v));
    }

    fn lstm(&mut self, prefix: &str, input: usize, hidden: usize) {
        self.uniform(&format!("{prefix}.wih"), input, 4 * hidden, hidden);
        self.uniform(&format!("{prefix}.whh"), hidden, 4 * hidden, hidden);
        self.fill(&format!("{prefix}.b"), 1, 4 * hidden, 0.0);
    }

    fn path(&mut self, prefix: &str, feature: usize, hidden: usize) {
        self.lstm(&format!("{prefix}.fwd"), feature, hidden);
        self.lstm(&format!("{prefix}.bwd"), feature, hidden);
        self.uniform(&format!("{prefix}.proj.w"), 2 * hidden, feature, 2 * hidden);
        self.fill(&format!("{prefix}.proj.b"), 1, feature, 0.0);
        self.fill(&format!("{prefix}.norm.gamma"), 1, feature, 1.0);
        self.fill(&format!("{prefix}.norm.beta"), 1, feature, 0.0);
    }

    fn blocks(&mut self, n: usize, feature: usize, hidden: usize) {
        for j in 0..n {
            self.path(&format!("block{j}.intra"), feature, hidden);
            self.path(&format!("block{j}.inter"), feature, hidden);
        }
    }
}

/// Fresh parameters for component `name` (`idnet` or `stage<k>`).
///
/// Weights are uniform in `±1/sqrt(fan_in)`; biases, including the encoder
/// bias, start at zero. Refinement stages start with a zero mask head so
/// that before training they reproduce the previous stage exactly.
/// `id_classes` sizes the ID-Net's speaker classifier.
pub fn init_component(
    spec: &ModelSpec,
    name: &str,
    seed: u64,
    id_classes: usize,
) -> Result<ParamSet, ModelError> {
    spec.validate()?;
    let d = spec.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_of(name));
    let mut init = Init {
        rng,
        set: ParamSet::new(),
    };
    if name == IDNET {
        init.uniform("enc.w", d.kernel, d.basis, d.kernel);
        init.fill("enc.b", 1, d.basis, 0.0);
        init.uniform("ff1.w", d.basis, d.id_hidden, d.basis);
        init.fill("ff1.b", 1, d.id_hidden, 0.0);
        init.uniform("ff2.w", d.id_hidden, d.embed, d.id_hidden);
        init.fill("ff2.b", 1, d.embed, 0.0);
        init.uniform("cls.w", d.embed, id_classes.max(1), d.embed);
        init.fill("cls.b", 1, id_classes.max(1), 0.0);
        return Ok(init.set);
    }
    let k: usize = name
        .strip_prefix("stage")
        .and_then(|k| k.parse().ok())
        .filter(|k| (1..=spec.num_stages()).contains(k))
        .ok_or_else(|| ModelError::ParamMismatch(format!("unknown component {name}")))?;
    let s = spec.num_sources;
    let in_width = if k == 1 { d.basis } else { spec.fusion_width() };
    if k == 1 {
        init.uniform("enc.w", d.kernel, d.basis, d.kernel);
        init.fill("enc.b", 1, d.basis, 0.0);
        init.uniform("dec.w", d.basis, d.kernel, d.basis);
    }
    init.fill("in.gamma", 1, in_width, 1.0);
    init.fill("in.beta", 1, in_width, 0.0);
    init.uniform("in.w", in_width, d.feature, in_width);
    init.fill("in.b", 1, d.feature, 0.0);
    init.blocks(spec.stage_blocks[k - 1], d.feature, d.hidden);
    if k == 1 {
        init.uniform("head.w", d.feature, s * d.basis, d.feature);
    } else {
        init.fill("head.w", d.feature, s * d.basis, 0.0);
    }
    init.fill("head.b", 1, s * d.basis, 0.0);
    Ok(init.set)
}
