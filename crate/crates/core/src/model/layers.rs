//! Learned-filterbank encoder/decoder, 50%-overlap chunking and the
//! dual-path recurrent block, each as graph ops plus a plain-array wrapper.

use std::sync::Arc;

use ndarray::{Array2, Array3};

use super::{bind, finite_or, ModelError, ParamSet};
use crate::audio::Waveform;
use crate::graph::{Graph, RowMap, SeqLayout, Tensor, Var};
use crate::model::Bound;

/// Encoder output: one row of basis coefficients per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentFrames {
    pub frames: Array2<f64>,
}

impl LatentFrames {
    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }
}

/// Frames of kernel `kernel` at stride `kernel/2`; the input is zero-padded
/// at the end up to the next whole stride.
pub fn frame_count(len: usize, kernel: usize) -> Result<usize, ModelError> {
    if len < kernel {
        return Err(ModelError::InputTooShort { len, kernel });
    }
    Ok((len - kernel).div_ceil(kernel / 2) + 1)
}

fn framing_map(len: usize, kernel: usize) -> Result<RowMap, ModelError> {
    let hop = kernel / 2;
    let frames = frame_count(len, kernel)?;
    let entries = (0..frames * kernel)
        .map(|r| {
            let t = r / kernel * hop + r % kernel;
            if t < len {
                vec![(t, 1.0)]
            } else {
                Vec::new()
            }
        })
        .collect();
    Ok(RowMap {
        in_rows: len,
        entries,
    })
}

fn overlap_add_map(frames: usize, kernel: usize, target_len: usize) -> RowMap {
    let hop = kernel / 2;
    let mut entries = vec![Vec::new(); target_len];
    for f in 0..frames {
        for i in 0..kernel {
            let t = f * hop + i;
            if t < target_len {
                entries[t].push((f * kernel + i, 1.0));
            }
        }
    }
    RowMap {
        in_rows: frames * kernel,
        entries,
    }
}

/// `1 × n` waveform → `frames × kernel` matrix.
pub(crate) fn frames_var(g: &mut Graph, wave: Var, kernel: usize) -> Result<Var, ModelError> {
    let n = g.value(wave).ncols();
    let map = framing_map(n, kernel)?;
    let frames = map.out_rows() / kernel;
    let col = g.reshape(wave, n, 1);
    let framed = g.row_map(col, Arc::new(map));
    Ok(g.reshape(framed, frames, kernel))
}

/// ReLU(frames · enc.w + enc.b), with `enc.*` looked up under `p`.
pub(crate) fn encode_var(g: &mut Graph, p: &Bound, wave: Var) -> Result<Var, ModelError> {
    let w = p.var("enc.w");
    let kernel = g.value(w).nrows();
    let frames = frames_var(g, wave, kernel)?;
    let z = g.matmul(frames, w);
    let z = g.add_row(z, p.var("enc.b"));
    Ok(g.relu(z))
}

/// Transposed strided transform: `latents · dec_w`, overlap-added at stride
/// `kernel/2` and cut or zero-extended to `target_len`. Returns `1 × target_len`.
pub(crate) fn decode_var(g: &mut Graph, latents: Var, dec_w: Var, target_len: usize) -> Var {
    let kernel = g.value(dec_w).ncols();
    let frames = g.value(latents).nrows();
    let basis = g.matmul(latents, dec_w);
    let col = g.reshape(basis, frames * kernel, 1);
    let ola = g.row_map(col, Arc::new(overlap_add_map(frames, kernel, target_len)));
    g.reshape(ola, 1, target_len)
}

/// Encodes with the `enc.w`/`enc.b` tensors of `params` (a stage-1 or
/// ID-Net parameter set).
pub fn encode(w: &Waveform, params: &ParamSet) -> Result<LatentFrames, ModelError> {
    let mut g = Graph::new();
    let p = bind(&mut g, params, false);
    let wave = g.constant(Tensor::from_shape_vec((1, w.len()), w.samples.clone()).expect("row"));
    let z = encode_var(&mut g, &p, wave)?;
    let frames = g.value(z).clone();
    finite_or(&frames, "encoder")?;
    Ok(LatentFrames { frames })
}

/// Decodes with the `dec.w` tensor of `params`.
pub fn decode(
    frames: &LatentFrames,
    params: &ParamSet,
    target_len: usize,
    sample_rate: u32,
) -> Result<Waveform, ModelError> {
    finite_or(&frames.frames, "decoder input")?;
    let dec = params
        .get("dec.w")
        .ok_or_else(|| ModelError::ParamMismatch("missing dec.w".into()))?;
    if dec.nrows() != frames.frames.ncols() {
        return Err(ModelError::ParamMismatch(format!(
            "decoder expects {} basis coefficients, got {}",
            dec.nrows(),
            frames.frames.ncols()
        )));
    }
    let mut g = Graph::new();
    let z = g.constant(frames.frames.clone());
    let d = g.constant(dec.clone());
    let out = decode_var(&mut g, z, d, target_len);
    Ok(Waveform {
        samples: g.value(out).iter().copied().collect(),
        sample_rate,
    })
}

/// Placement of a `frames × feature` sequence into overlapping chunks of
/// length `chunk` at hop `chunk/2`.
///
/// `hop` zeros are prepended, and the end is padded with the fewest zeros
/// (at least `hop`) that make the padded length minus `hop` a whole number
/// of chunks; every original frame is then covered by exactly two chunks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkLayout {
    pub frames: usize,
    pub chunk: usize,
    pub hop: usize,
    pub num_chunks: usize,
}

impl ChunkLayout {
    pub fn new(frames: usize, chunk: usize) -> Result<Self, ModelError> {
        if chunk < 2 || !chunk.is_multiple_of(2) {
            return Err(ModelError::InvalidChunk(chunk));
        }
        let hop = chunk / 2;
        let rest = (chunk - (hop + frames % chunk) % chunk) % chunk;
        let num_chunks = 2 * (frames + rest + hop) / chunk;
        Ok(Self {
            frames,
            chunk,
            hop,
            num_chunks,
        })
    }

    /// Original frame held at `(chunk, position)`, if any.
    pub fn source_frame(&self, c: usize, p: usize) -> Option<usize> {
        (c * self.hop + p)
            .checked_sub(self.hop)
            .filter(|&t| t < self.frames)
    }

    pub fn rows(&self) -> usize {
        self.num_chunks * self.chunk
    }

    /// Intra-chunk sequences: time = position, batch = chunk.
    pub fn intra_layout(&self) -> SeqLayout {
        SeqLayout {
            steps: self.chunk,
            batch: self.num_chunks,
            step_stride: 1,
            batch_stride: self.chunk,
        }
    }

    /// Inter-chunk sequences: time = chunk, batch = position.
    pub fn inter_layout(&self) -> SeqLayout {
        SeqLayout {
            steps: self.num_chunks,
            batch: self.chunk,
            step_stride: self.chunk,
            batch_stride: 1,
        }
    }

    pub(crate) fn segment_map(&self) -> RowMap {
        let entries = (0..self.rows())
            .map(|r| {
                self.source_frame(r / self.chunk, r % self.chunk)
                    .map(|t| vec![(t, 1.0)])
                    .unwrap_or_default()
            })
            .collect();
        RowMap {
            in_rows: self.frames,
            entries,
        }
    }

    /// Overlap-add of all chunk positions holding a frame, divided by their
    /// count.
    pub(crate) fn merge_map(&self) -> RowMap {
        let mut entries: Vec<Vec<(usize, f64)>> = vec![Vec::new(); self.frames];
        for r in 0..self.rows() {
            if let Some(t) = self.source_frame(r / self.chunk, r % self.chunk) {
                entries[t].push((r, 1.0));
            }
        }
        for e in &mut entries {
            let w = 1.0 / e.len() as f64;
            e.iter_mut().for_each(|x| x.1 = w);
        }
        RowMap {
            in_rows: self.rows(),
            entries,
        }
    }
}

/// Splits `frames × feature` into `chunk × position × feature`.
pub fn chunk_segment(
    frames: &Array2<f64>,
    chunk: usize,
) -> Result<(Array3<f64>, ChunkLayout), ModelError> {
    let layout = ChunkLayout::new(frames.nrows(), chunk)?;
    let flat = layout.segment_map().apply(frames);
    let chunks = flat
        .into_shape_with_order((layout.num_chunks, chunk, frames.ncols()))
        .expect("chunk reshape");
    Ok((chunks, layout))
}

/// Inverse of [`chunk_segment`].
pub fn chunk_merge(chunks: &Array3<f64>, layout: &ChunkLayout) -> Result<Array2<f64>, ModelError> {
    let (c, k, f) = chunks.dim();
    if c != layout.num_chunks || k != layout.chunk {
        return Err(ModelError::InconsistentChunks(format!(
            "got {c}x{k} chunks, layout says {}x{}",
            layout.num_chunks, layout.chunk
        )));
    }
    if ChunkLayout::new(layout.frames, layout.chunk)? != *layout {
        return Err(ModelError::InconsistentChunks("layout fields disagree".into()));
    }
    let flat = chunks
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((c * k, f))
        .expect("flatten");
    Ok(layout.merge_map().apply(&flat))
}

pub(crate) fn segment_var(g: &mut Graph, x: Var, layout: &ChunkLayout) -> Var {
    g.row_map(x, Arc::new(layout.segment_map()))
}

pub(crate) fn merge_var(g: &mut Graph, x: Var, layout: &ChunkLayout) -> Var {
    g.row_map(x, Arc::new(layout.merge_map()))
}

/// `x + gLN(proj([LSTM→(x) ‖ LSTM←(x)]))` along one axis.
fn recurrent_path(g: &mut Graph, p: &Bound, prefix: &str, x: Var, seq: SeqLayout) -> Var {
    let v = |n: &str| p.var(&format!("{prefix}.{n}"));
    let fwd = g.lstm(x, v("fwd.wih"), v("fwd.whh"), v("fwd.b"), seq, false);
    let bwd = g.lstm(x, v("bwd.wih"), v("bwd.whh"), v("bwd.b"), seq, true);
    let both = g.concat_cols(&[fwd, bwd]);
    let proj = g.matmul(both, v("proj.w"));
    let proj = g.add_row(proj, v("proj.b"));
    let normed = g.global_layer_norm(proj, v("norm.gamma"), v("norm.beta"));
    g.add(x, normed)
}

/// Intra-chunk pass then inter-chunk pass on chunk rows `c·K + p`.
pub(crate) fn dual_path_var(
    g: &mut Graph,
    p: &Bound,
    prefix: &str,
    x: Var,
    layout: &ChunkLayout,
) -> Var {
    let x = recurrent_path(g, p, &format!("{prefix}.intra"), x, layout.intra_layout());
    recurrent_path(g, p, &format!("{prefix}.inter"), x, layout.inter_layout())
}

/// Applies block `prefix` (e.g. `block0`) of `params` to
/// `chunk × position × feature` input.
pub fn dual_path_block(
    chunks: &Array3<f64>,
    params: &ParamSet,
    prefix: &str,
) -> Result<Array3<f64>, ModelError> {
    let (c, k, f) = chunks.dim();
    let layout = ChunkLayout {
        frames: 0,
        chunk: k,
        hop: k / 2,
        num_chunks: c,
    };
    let key = format!("{prefix}.intra.fwd.wih");
    match params.get(&key) {
        Some(w) if w.nrows() == f => {}
        Some(w) => {
            return Err(ModelError::ParamMismatch(format!(
                "{key} expects {} features, got {f}",
                w.nrows()
            )))
        }
        None => return Err(ModelError::ParamMismatch(format!("missing {key}"))),
    }
    finite_or(&chunks.view().into_shape_with_order((c * k, f)).unwrap().to_owned(), "block input")?;
    let mut g = Graph::new();
    let p = bind(&mut g, params, false);
    let flat = chunks
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((c * k, f))
        .expect("flatten");
    let x = g.constant(flat);
    let y = dual_path_var(&mut g, &p, prefix, x, &layout);
    let out = g.value(y).clone();
    finite_or(&out, prefix)?;
    Ok(out.into_shape_with_order((c, k, f)).expect("unflatten"))
}
