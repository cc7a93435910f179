use ndarray::Array2;

use super::TrainError;
use crate::audio::Waveform;
use crate::graph::{Graph, Tensor, Var};
use crate::metrics::{pit_assign, si_sdr_matrix, si_sdr_slices, AssignMethod, MetricsError};
use crate::model::{id_embed, id_embed_var, Bound, Component, SpeakerEmbedding};

/// Utterance-level PIT loss: negative mean SI-SDR under the best pairing.
/// Returns the loss and the estimate → reference permutation.
pub fn loss_upit_sisdr(
    estimates: &[Waveform],
    references: &[Waveform],
) -> Result<(f64, Vec<usize>), TrainError> {
    check_refs(references)?;
    let scores = si_sdr_matrix(estimates, references)?;
    let perm = pit_assign(&scores, AssignMethod::Hungarian)?.perm;
    // Summed in reference order so reordering the estimates is bit-exact.
    let total: f64 = inverse(&perm)
        .iter()
        .enumerate()
        .map(|(j, &i)| scores[[i, j]])
        .sum();
    Ok((-total / estimates.len() as f64, perm))
}

fn inverse(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &j) in perm.iter().enumerate() {
        inv[j] = i;
    }
    inv
}

fn check_refs(references: &[Waveform]) -> Result<(), TrainError> {
    if references
        .iter()
        .any(|r| r.samples.iter().all(|&v| v == 0.0))
    {
        return Err(MetricsError::ZeroPowerReference.into());
    }
    Ok(())
}

/// Graph form of [`loss_upit_sisdr`]: the permutation is chosen on the
/// current values and held fixed for the gradient.
pub fn upit_sisdr_var(
    g: &mut Graph,
    estimates: &[Var],
    references: &[Waveform],
) -> Result<(Var, Vec<usize>), TrainError> {
    let s = estimates.len();
    if s != references.len() || s == 0 {
        return Err(MetricsError::CountMismatch(s, references.len()).into());
    }
    check_refs(references)?;
    let mut scores = Array2::zeros((s, s));
    for (i, &e) in estimates.iter().enumerate() {
        let ev = g.value(e).as_slice().expect("row vector").to_vec();
        for (j, r) in references.iter().enumerate() {
            scores[[i, j]] = si_sdr_slices(&ev, &r.samples)?;
        }
    }
    let perm = pit_assign(&scores, AssignMethod::Hungarian)?.perm;
    let mut total: Option<Var> = None;
    for (j, &i) in inverse(&perm).iter().enumerate() {
        let v = g.si_sdr(estimates[i], &references[j].samples);
        total = Some(match total {
            None => v,
            Some(t) => g.add(t, v),
        });
    }
    let loss = g.scale(total.expect("non-empty"), -1.0 / s as f64);
    Ok((loss, perm))
}

fn ensure_frozen(idnet: &Component) -> Result<(), TrainError> {
    if idnet.frozen {
        Ok(())
    } else {
        Err(TrainError::Contract(format!(
            "identity consistency needs a frozen ID-Net, {} is trainable",
            idnet.name
        )))
    }
}

/// Mean over references of `1 − cos` between the embedding of each
/// reference and of the estimate `perm` pairs with it. In `[0, 2]`.
pub fn loss_identity_consistency(
    estimates: &[Waveform],
    references: &[Waveform],
    perm: &[usize],
    idnet: &Component,
) -> Result<f64, TrainError> {
    ensure_frozen(idnet)?;
    if estimates.len() != references.len() || perm.len() != estimates.len() {
        return Err(MetricsError::CountMismatch(estimates.len(), references.len()).into());
    }
    check_refs(references)?;
    let mut total = 0.0;
    for (e, &r) in perm.iter().enumerate() {
        let a = id_embed(&estimates[e], &idnet.params)?;
        let b = id_embed(&references[r], &idnet.params)?;
        total += (1.0 - a.cosine(&b)).clamp(0.0, 2.0);
    }
    Ok(total / perm.len() as f64)
}

/// Graph form of [`loss_identity_consistency`]. `idnet` must be bound as
/// constants; reference embeddings are precomputed.
pub fn identity_consistency_var(
    g: &mut Graph,
    idnet: &Bound,
    estimates: &[Var],
    reference_embeddings: &[SpeakerEmbedding],
    perm: &[usize],
) -> Result<Var, TrainError> {
    for (_, &v) in idnet.iter() {
        if g.requires_grad(v) {
            return Err(TrainError::Contract(
                "ID-Net parameters must be constants in the identity loss".into(),
            ));
        }
    }
    let s = estimates.len();
    let mut total: Option<Var> = None;
    for (e, &r) in perm.iter().enumerate() {
        let emb = id_embed_var(g, idnet, estimates[e])?;
        let rv = &reference_embeddings[r].vector;
        let target = g.constant(Tensor::from_shape_vec((1, rv.len()), rv.clone()).expect("row"));
        let prod = g.mul(emb, target);
        let cos = g.sum(prod);
        total = Some(match total {
            None => cos,
            Some(t) => g.add(t, cos),
        });
    }
    // 1 − mean cos, written as a scale of the summed cosines plus a constant.
    let neg_mean = g.scale(total.expect("non-empty"), -1.0 / s as f64);
    let one = g.constant(Tensor::ones((1, 1)));
    Ok(g.add(neg_mean, one))
}
