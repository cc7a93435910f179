use std::sync::Arc;

use super::layers::{decode_var, dual_path_var, encode_var, frames_var, merge_var, segment_var};
use super::{
    bind, finite_or, init_component, stage_name, Bound, ChunkLayout, ModelError, ModelSpec,
    ParamSet, IDNET,
};
use crate::audio::Waveform;
use crate::graph::{Graph, RowMap, Tensor, Var};

/// Parameters of every component of a `TasTas` model.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub idnet: Option<ParamSet>,
    pub stages: Vec<ParamSet>,
}

impl Model {
    /// Randomly initialised model; `id_classes` sizes the ID-Net classifier.
    pub fn init(spec: ModelSpec, seed: u64, id_classes: usize) -> Result<Self, ModelError> {
        spec.validate()?;
        let idnet = spec
            .identity_aware
            .then(|| init_component(&spec, IDNET, seed, id_classes))
            .transpose()?;
        let stages = (1..=spec.num_stages())
            .map(|k| init_component(&spec, &stage_name(k), seed, 0))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            spec,
            idnet,
            stages,
        })
    }

    /// Checks that every tensor the spec needs is present with the right shape.
    pub fn validate(&self) -> Result<(), ModelError> {
        self.spec.validate()?;
        if self.stages.len() != self.spec.num_stages() {
            return Err(ModelError::ParamMismatch(format!(
                "{} stages for {}",
                self.stages.len(),
                self.spec
            )));
        }
        for (k, p) in self.stages.iter().enumerate() {
            p.matches_layout(&init_component(&self.spec, &stage_name(k + 1), 0, 0)?)?;
        }
        match (&self.idnet, self.spec.identity_aware) {
            (Some(p), true) => {
                let classes = p.get("cls.w").map_or(1, |t| t.ncols());
                p.matches_layout(&init_component(&self.spec, IDNET, 0, classes)?)
            }
            (None, true) => Err(ModelError::ParamMismatch("identity-aware spec needs an ID-Net".into())),
            _ => Ok(()),
        }
    }
}

/// Graph handles for a model's components.
#[derive(Debug, Clone, Default)]
pub struct ModelVars {
    pub idnet: Option<Bound>,
    pub stages: Vec<Bound>,
}

impl ModelVars {
    /// Binds every component as constants except those named in `trainable`.
    pub fn bind(g: &mut Graph, model: &Model, trainable: &[String]) -> Self {
        let is_trainable = |name: &str| trainable.iter().any(|t| t == name);
        Self {
            idnet: model
                .idnet
                .as_ref()
                .map(|p| bind(g, p, is_trainable(IDNET))),
            stages: model
                .stages
                .iter()
                .enumerate()
                .map(|(k, p)| bind(g, p, is_trainable(&stage_name(k + 1))))
                .collect(),
        }
    }
}

/// Graph outputs of one separation stage, one entry per source.
#[derive(Debug, Clone)]
pub struct StageVars {
    /// Mask logits over latent frames (`frames × N`).
    pub logits: Vec<Var>,
    /// Masked mixture latents (`frames × N`).
    pub latents: Vec<Var>,
    /// Decoded estimates (`1 × samples`).
    pub waves: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerEmbedding {
    pub vector: Vec<f64>,
}

impl SpeakerEmbedding {
    pub fn norm(&self) -> f64 {
        self.vector.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn cosine(&self, other: &SpeakerEmbedding) -> f64 {
        self.vector.iter().zip(&other.vector).map(|(a, b)| a * b).sum()
    }
}

/// Estimates of every stage, stage 1 first.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOutput {
    pub stages: Vec<Vec<Waveform>>,
}

impl StageOutput {
    pub fn final_stage(&self) -> &[Waveform] {
        self.stages.last().map(Vec::as_slice).unwrap_or_default()
    }
}

/// ID-Net: RMS-normalised input → ReLU filterbank → mean over frames →
/// ReLU layer → linear → unit norm. Returns `1 × D`.
pub fn id_embed_var(g: &mut Graph, idnet: &Bound, wave: Var) -> Result<Var, ModelError> {
    let kernel = g.value(idnet.var("enc.w")).nrows();
    let normed = g.rms_normalize(wave);
    // Same filterbank shape as the separator's encoder.
    let frames = frames_var(g, normed, kernel)?;
    let z = g.matmul(frames, idnet.var("enc.w"));
    let z = g.add_row(z, idnet.var("enc.b"));
    let z = g.relu(z);
    let pooled = g.mean_rows(z);
    let h = g.matmul(pooled, idnet.var("ff1.w"));
    let h = g.add_row(h, idnet.var("ff1.b"));
    let h = g.relu(h);
    let e = g.matmul(h, idnet.var("ff2.w"));
    let e = g.add_row(e, idnet.var("ff2.b"));
    Ok(g.l2_normalize(e))
}

/// Speaker-classifier logits for an embedding (`1 × classes`).
pub(crate) fn classify_var(g: &mut Graph, idnet: &Bound, embedding: Var) -> Var {
    let z = g.matmul(embedding, idnet.var("cls.w"));
    g.add_row(z, idnet.var("cls.b"))
}

pub fn id_embed(w: &Waveform, idnet: &ParamSet) -> Result<SpeakerEmbedding, ModelError> {
    let mut g = Graph::new();
    let p = bind(&mut g, idnet, false);
    let wave = g.constant(row(&w.samples));
    let e = id_embed_var(&mut g, &p, wave)?;
    let vector: Vec<f64> = g.value(e).iter().copied().collect();
    if vector.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite("id embedding".into()));
    }
    Ok(SpeakerEmbedding { vector })
}

pub(crate) fn row(samples: &[f64]) -> Tensor {
    Tensor::from_shape_vec((1, samples.len()), samples.to_vec()).expect("row vector")
}

fn repeat_rows(g: &mut Graph, x: Var, times: usize) -> Var {
    let map = RowMap {
        in_rows: 1,
        entries: vec![vec![(0, 1.0)]; times],
    };
    g.row_map(x, Arc::new(map))
}

/// Shared body of every stage: normalise, project to F, chunk, dual-path
/// blocks, merge, project to `S·N` mask logits.
fn stage_core(
    g: &mut Graph,
    spec: &ModelSpec,
    p: &Bound,
    blocks: usize,
    input: Var,
) -> Result<Var, ModelError> {
    let frames = g.value(input).nrows();
    let x = g.global_layer_norm(input, p.var("in.gamma"), p.var("in.beta"));
    let x = g.matmul(x, p.var("in.w"));
    let x = g.add_row(x, p.var("in.b"));
    let layout = ChunkLayout::new(frames, spec.dims.chunk)?;
    let mut c = segment_var(g, x, &layout);
    for j in 0..blocks {
        c = dual_path_var(g, p, &format!("block{j}"), c, &layout);
    }
    let merged = merge_var(g, c, &layout);
    let head = g.matmul(merged, p.var("head.w"));
    Ok(g.add_row(head, p.var("head.b")))
}

/// Runs stages `1..=upto` on a `1 × samples` mixture.
pub fn forward(
    g: &mut Graph,
    spec: &ModelSpec,
    vars: &ModelVars,
    mixture: Var,
    upto: usize,
) -> Result<Vec<StageVars>, ModelError> {
    if upto == 0 || upto > spec.num_stages() || vars.stages.len() < upto {
        return Err(ModelError::ParamMismatch(format!(
            "cannot run {upto} stages with {} bound of {}",
            vars.stages.len(),
            spec.num_stages()
        )));
    }
    if spec.identity_aware && upto > 1 && vars.idnet.is_none() {
        return Err(ModelError::ParamMismatch("refinement needs the ID-Net".into()));
    }
    let n = g.value(mixture).ncols();
    let s = spec.num_sources;
    let nb = spec.dims.basis;
    let s1 = &vars.stages[0];
    let latents = encode_var(g, s1, mixture)?;
    let frames = g.value(latents).nrows();
    let dec_w = s1.var("dec.w");

    let mut out: Vec<StageVars> = Vec::with_capacity(upto);
    for k in 1..=upto {
        let p = &vars.stages[k - 1];
        let input = match out.last() {
            None => latents,
            Some(prev) => {
                let mut parts = vec![latents];
                parts.extend(prev.latents.iter().copied());
                if spec.identity_aware {
                    let idnet = vars.idnet.as_ref().expect("checked above");
                    for &w in &prev.waves {
                        let e = id_embed_var(g, idnet, w)?;
                        parts.push(repeat_rows(g, e, frames));
                    }
                }
                g.concat_cols(&parts)
            }
        };
        let head = stage_core(g, spec, p, spec.stage_blocks[k - 1], input)?;
        let mut stage = StageVars {
            logits: Vec::with_capacity(s),
            latents: Vec::with_capacity(s),
            waves: Vec::with_capacity(s),
        };
        for src in 0..s {
            let delta = g.slice_cols(head, src * nb, (src + 1) * nb);
            let logit = match out.last() {
                None => delta,
                Some(prev) => g.add(prev.logits[src], delta),
            };
            let mask = g.sigmoid(logit);
            let lat = g.mul(mask, latents);
            let wave = decode_var(g, lat, dec_w, n);
            stage.logits.push(logit);
            stage.latents.push(lat);
            stage.waves.push(wave);
        }
        out.push(stage);
    }
    Ok(out)
}

/// Separates `mixture` with every stage of `model`.
pub fn separate(mixture: &Waveform, model: &Model) -> Result<StageOutput, ModelError> {
    model.validate()?;
    let mut g = Graph::new();
    let vars = ModelVars::bind(&mut g, model, &[]);
    let mix = g.constant(row(&mixture.samples));
    let stages = forward(&mut g, &model.spec, &vars, mix, model.spec.num_stages())?;
    let stages = stages
        .iter()
        .enumerate()
        .map(|(k, st)| {
            st.waves
                .iter()
                .map(|&w| {
                    let v = g.value(w);
                    finite_or(v, &stage_name(k + 1))?;
                    Ok(Waveform {
                        samples: v.iter().copied().collect(),
                        sample_rate: mixture.sample_rate,
                    })
                })
                .collect::<Result<Vec<_>, ModelError>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(StageOutput { stages })
}
