//! Separation metrics and oracle machinery: STFT/ISTFT, ideal ratio masks,
//! SI-SDR, permutation assignment and SDR improvement.

use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

use crate::audio::Waveform;

/// SI-SDR values are clamped to `[-SI_SDR_CAP_DB, SI_SDR_CAP_DB]`.
pub const SI_SDR_CAP_DB: f64 = 100.0;

/// Label written into reports so readers know which SDR variant was used.
pub const METRIC_LABEL: &str = "SI-SDRi";

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("frame length {0} must be a power of two >= 2")]
    InvalidFrameLen(usize),
    #[error("hop {hop} must satisfy 0 < hop <= frame length {frame_len}")]
    InvalidHop { hop: usize, frame_len: usize },
    #[error("inconsistent tf metadata: {0}")]
    InconsistentMetadata(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("count mismatch: {0} vs {1}")]
    CountMismatch(usize, usize),
    #[error("reference has zero power")]
    ZeroPowerReference,
    #[error("score matrix must be square and non-empty, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("score matrix contains a non-finite entry")]
    NonFinite,
    #[error("negative magnitude")]
    NegativeMagnitude,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Window {
    Hann,
}

impl Window {
    /// Periodic window of length `n`.
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        match self {
            Window::Hann => (0..n)
                .map(|i| 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / n as f64).cos())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StftParams {
    pub frame_len: usize,
    pub hop: usize,
    pub window: Window,
}

impl Default for StftParams {
    fn default() -> Self {
        Self {
            frame_len: 256,
            hop: 128,
            window: Window::Hann,
        }
    }
}

impl StftParams {
    fn validate(&self) -> Result<(), MetricsError> {
        if self.frame_len < 2 || !self.frame_len.is_power_of_two() {
            return Err(MetricsError::InvalidFrameLen(self.frame_len));
        }
        if self.hop == 0 || self.hop > self.frame_len {
            return Err(MetricsError::InvalidHop {
                hop: self.hop,
                frame_len: self.frame_len,
            });
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.frame_len / 2 + 1
    }

    /// Frames for `n` samples: `frame_len/2` zeros are prepended, the end is
    /// padded by at least `frame_len/2` zeros and up to a whole hop.
    pub fn num_frames(&self, n: usize) -> usize {
        let padded = n + self.frame_len;
        (padded - self.frame_len).div_ceil(self.hop) + 1
    }
}

/// Complex spectrogram with enough metadata to invert to the original length.
#[derive(Debug, Clone, PartialEq)]
pub struct TfRepresentation {
    /// Indexed `(frame, bin)`.
    pub grid: Array2<Complex64>,
    pub params: StftParams,
    pub sample_rate: u32,
    pub num_samples: usize,
}

impl TfRepresentation {
    pub fn magnitudes(&self) -> Array2<f64> {
        self.grid.mapv(|c| c.norm())
    }

    pub fn num_frames(&self) -> usize {
        self.grid.nrows()
    }
}

struct FftPair {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

fn plan(n: usize) -> FftPair {
    let mut planner = FftPlanner::new();
    FftPair {
        forward: planner.plan_fft_forward(n),
        inverse: planner.plan_fft_inverse(n),
    }
}

pub fn stft(w: &Waveform, params: StftParams) -> Result<TfRepresentation, MetricsError> {
    params.validate()?;
    let n = w.len();
    let fl = params.frame_len;
    let frames = params.num_frames(n);
    let half = fl / 2;
    let win = params.window.coefficients(fl);
    let fft = plan(fl).forward;
    let mut grid = Array2::zeros((frames, params.bins()));
    let mut buf = vec![Complex64::new(0.0, 0.0); fl];
    for f in 0..frames {
        let start = (f * params.hop) as isize - half as isize;
        for (i, b) in buf.iter_mut().enumerate() {
            let t = start + i as isize;
            let x = if t >= 0 && (t as usize) < n {
                w.samples[t as usize]
            } else {
                0.0
            };
            *b = Complex64::new(x * win[i], 0.0);
        }
        fft.process(&mut buf);
        for k in 0..params.bins() {
            grid[[f, k]] = buf[k];
        }
    }
    Ok(TfRepresentation {
        grid,
        params,
        sample_rate: w.sample_rate,
        num_samples: n,
    })
}

/// Weighted overlap-add with the analysis window, normalised by the summed
/// squared window.
pub fn istft(tf: &TfRepresentation) -> Result<Waveform, MetricsError> {
    let params = tf.params;
    params.validate()?;
    let fl = params.frame_len;
    if tf.grid.ncols() != params.bins() {
        return Err(MetricsError::InconsistentMetadata(format!(
            "{} bins for frame length {fl}",
            tf.grid.ncols()
        )));
    }
    if tf.grid.nrows() != params.num_frames(tf.num_samples) {
        return Err(MetricsError::InconsistentMetadata(format!(
            "{} frames for {} samples",
            tf.grid.nrows(),
            tf.num_samples
        )));
    }
    if tf.sample_rate == 0 {
        return Err(MetricsError::InconsistentMetadata("zero sample rate".into()));
    }
    let half = fl / 2;
    let win = params.window.coefficients(fl);
    let ifft = plan(fl).inverse;
    let total = (tf.grid.nrows() - 1) * params.hop + fl;
    let mut acc = vec![0.0; total];
    let mut norm = vec![0.0; total];
    let mut buf = vec![Complex64::new(0.0, 0.0); fl];
    for f in 0..tf.grid.nrows() {
        for k in 0..params.bins() {
            buf[k] = tf.grid[[f, k]];
        }
        for k in params.bins()..fl {
            buf[k] = tf.grid[[f, fl - k]].conj();
        }
        // DC and Nyquist bins of a real signal are real.
        buf[0].im = 0.0;
        buf[half].im = 0.0;
        ifft.process(&mut buf);
        let start = f * params.hop;
        for i in 0..fl {
            acc[start + i] += buf[i].re / fl as f64 * win[i];
            norm[start + i] += win[i] * win[i];
        }
    }
    let samples = (0..tf.num_samples)
        .map(|t| {
            let j = t + half;
            if norm[j] > 1e-10 {
                acc[j] / norm[j]
            } else {
                0.0
            }
        })
        .collect();
    Ok(Waveform {
        samples,
        sample_rate: tf.sample_rate,
    })
}

/// Per-source real masks over a common `(frame, bin)` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    pub masks: Vec<Array2<f64>>,
}

/// `M_s = |X_s| / Σ_s |X_s|`; bins where every source is silent get `1/S`.
pub fn ideal_ratio_masks(source_mags: &[Array2<f64>]) -> Result<MaskSet, MetricsError> {
    let Some(first) = source_mags.first() else {
        return Err(MetricsError::ShapeMismatch("no sources".into()));
    };
    let shape = first.dim();
    for m in source_mags {
        if m.dim() != shape {
            return Err(MetricsError::ShapeMismatch(format!(
                "{:?} vs {:?}",
                m.dim(),
                shape
            )));
        }
        if m.iter().any(|&x| x < 0.0 || x.is_nan()) {
            return Err(MetricsError::NegativeMagnitude);
        }
    }
    let s = source_mags.len();
    let mut denom = Array2::<f64>::zeros(shape);
    for m in source_mags {
        denom += m;
    }
    let uniform = 1.0 / s as f64;
    let masks = source_mags
        .iter()
        .map(|m| {
            let mut out = m.clone();
            out.zip_mut_with(&denom, |x, &d| *x = if d > 0.0 { *x / d } else { uniform });
            out
        })
        .collect();
    Ok(MaskSet { masks })
}

/// Applies the ideal ratio masks of the true sources to the mixture STFT.
pub fn oracle_irm_separate(
    mixture: &Waveform,
    sources: &[Waveform],
    params: StftParams,
) -> Result<Vec<Waveform>, MetricsError> {
    for s in sources {
        if s.len() != mixture.len() {
            return Err(MetricsError::LengthMismatch(s.len(), mixture.len()));
        }
    }
    let mix_tf = stft(mixture, params)?;
    let mags = sources
        .iter()
        .map(|s| stft(s, params).map(|tf| tf.magnitudes()))
        .collect::<Result<Vec<_>, _>>()?;
    let masks = ideal_ratio_masks(&mags)?;
    masks
        .masks
        .iter()
        .map(|m| {
            let mut tf = mix_tf.clone();
            tf.grid.zip_mut_with(m, |c, &g| *c *= g);
            istft(&tf)
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn demeaned(x: &[f64]) -> Vec<f64> {
    let m = x.iter().sum::<f64>() / x.len().max(1) as f64;
    x.iter().map(|v| v - m).collect()
}

/// Scale-invariant SDR in dB on raw sample slices.
pub fn si_sdr_slices(est: &[f64], reference: &[f64]) -> Result<f64, MetricsError> {
    if est.len() != reference.len() {
        return Err(MetricsError::LengthMismatch(est.len(), reference.len()));
    }
    let e = demeaned(est);
    let r = demeaned(reference);
    let rr = dot(&r, &r);
    if !(rr > 0.0) {
        return Err(MetricsError::ZeroPowerReference);
    }
    let alpha = dot(&e, &r) / rr;
    let mut target = 0.0;
    let mut resid = 0.0;
    for (x, y) in e.iter().zip(&r) {
        let t = alpha * y;
        target += t * t;
        resid += (x - t) * (x - t);
    }
    Ok(ratio_to_capped_db(target, resid))
}

pub(crate) fn ratio_to_capped_db(target: f64, resid: f64) -> f64 {
    if resid <= 0.0 {
        return SI_SDR_CAP_DB;
    }
    if target <= 0.0 {
        return -SI_SDR_CAP_DB;
    }
    (10.0 * (target / resid).log10()).clamp(-SI_SDR_CAP_DB, SI_SDR_CAP_DB)
}

pub fn si_sdr(est: &Waveform, reference: &Waveform) -> Result<f64, MetricsError> {
    si_sdr_slices(&est.samples, &reference.samples)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AssignMethod {
    BruteForce,
    Hungarian,
}

/// Bijection from estimate index to reference index maximising the summed
/// score.
#[derive(Debug, Clone, PartialEq)]
pub struct PermutationAssignment {
    pub perm: Vec<usize>,
    pub objective: f64,
}

impl PermutationAssignment {
    /// Reference index → estimate index.
    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.perm.len()];
        for (e, &r) in self.perm.iter().enumerate() {
            inv[r] = e;
        }
        inv
    }
}

/// `Σ_i score[i][perm[i]]`, summed in row order.
pub fn assignment_objective(score: &Array2<f64>, perm: &[usize]) -> f64 {
    perm.iter().enumerate().map(|(i, &j)| score[[i, j]]).sum()
}

pub fn pit_assign(
    score: &Array2<f64>,
    method: AssignMethod,
) -> Result<PermutationAssignment, MetricsError> {
    let (rows, cols) = score.dim();
    if rows != cols || rows == 0 {
        return Err(MetricsError::NotSquare { rows, cols });
    }
    if score.iter().any(|x| !x.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    let perm = match method {
        AssignMethod::BruteForce => brute_force_assign(score),
        AssignMethod::Hungarian => hungarian_assign(score),
    };
    let objective = assignment_objective(score, &perm);
    Ok(PermutationAssignment { perm, objective })
}

fn brute_force_assign(score: &Array2<f64>) -> Vec<usize> {
    fn visit(
        score: &Array2<f64>,
        row: usize,
        used: &mut [bool],
        cur: &mut Vec<usize>,
        best: &mut (f64, Vec<usize>),
    ) {
        let n = used.len();
        if row == n {
            let v = assignment_objective(score, cur);
            if v > best.0 {
                *best = (v, cur.clone());
            }
            return;
        }
        for j in 0..n {
            if !used[j] {
                used[j] = true;
                cur.push(j);
                visit(score, row + 1, used, cur, best);
                cur.pop();
                used[j] = false;
            }
        }
    }
    let n = score.nrows();
    let mut best = (f64::NEG_INFINITY, (0..n).collect());
    visit(score, 0, &mut vec![false; n], &mut Vec::with_capacity(n), &mut best);
    best.1
}

/// Shortest-augmenting-path Hungarian method with row/column potentials,
/// run on the negated scores.
fn hungarian_assign(score: &Array2<f64>) -> Vec<usize> {
    let n = score.nrows();
    let cost = |i: usize, j: usize| -score[[i - 1, j - 1]];
    // 1-based arrays; index 0 is the virtual column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of_col = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of_col[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of_col[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of_col[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of_col[j0] = row_of_col[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0; n];
    for j in 1..=n {
        perm[row_of_col[j] - 1] = j - 1;
    }
    perm
}

/// Pairwise SI-SDR matrix, rows = estimates, columns = references.
pub fn si_sdr_matrix(
    estimates: &[Waveform],
    references: &[Waveform],
) -> Result<Array2<f64>, MetricsError> {
    if estimates.len() != references.len() {
        return Err(MetricsError::CountMismatch(estimates.len(), references.len()));
    }
    let s = estimates.len();
    let mut m = Array2::zeros((s, s));
    for (i, e) in estimates.iter().enumerate() {
        for (j, r) in references.iter().enumerate() {
            m[[i, j]] = si_sdr(e, r)?;
        }
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdriResult {
    /// Estimate index → reference index.
    pub perm: Vec<usize>,
    /// Per reference: SI-SDR of the paired estimate.
    pub si_sdr: Vec<f64>,
    /// Per reference: SI-SDR of the unprocessed mixture.
    pub mixture_si_sdr: Vec<f64>,
    /// Per reference improvement in dB.
    pub improvement: Vec<f64>,
    pub mean_improvement: f64,
}

pub fn sdri(
    estimates: &[Waveform],
    references: &[Waveform],
    mixture: &Waveform,
) -> Result<SdriResult, MetricsError> {
    if estimates.len() != references.len() || estimates.is_empty() {
        return Err(MetricsError::CountMismatch(estimates.len(), references.len()));
    }
    for w in estimates.iter().chain(references) {
        if w.len() != mixture.len() {
            return Err(MetricsError::LengthMismatch(w.len(), mixture.len()));
        }
    }
    let scores = si_sdr_matrix(estimates, references)?;
    let assignment = pit_assign(&scores, AssignMethod::Hungarian)?;
    let inv = assignment.inverse();
    let si: Vec<f64> = (0..references.len()).map(|r| scores[[inv[r], r]]).collect();
    let base = references
        .iter()
        .map(|r| si_sdr(mixture, r))
        .collect::<Result<Vec<_>, _>>()?;
    let improvement: Vec<f64> = si.iter().zip(&base).map(|(a, b)| a - b).collect();
    let mean_improvement = improvement.iter().sum::<f64>() / improvement.len() as f64;
    Ok(SdriResult {
        perm: assignment.perm,
        si_sdr: si,
        mixture_si_sdr: base,
        improvement,
        mean_improvement,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tone(freq: f64, n: usize, amp: f64) -> Waveform {
        Waveform {
            samples: (0..n)
                .map(|i| amp * (std::f64::consts::TAU * freq * i as f64 / 8000.0).sin())
                .collect(),
            sample_rate: 8000,
        }
    }

    fn noise(n: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform {
            samples: (0..n).map(|_| rng.random_range(-0.5..0.5)).collect(),
            sample_rate: 8000,
        }
    }

    #[test]
    fn stft_param_validation() {
        let w = Waveform::zeros(100, 8000);
        let bad = |frame_len, hop| stft(&w, StftParams { frame_len, hop, window: Window::Hann });
        assert!(matches!(bad(100, 50), Err(MetricsError::InvalidFrameLen(100))));
        assert!(matches!(bad(64, 0), Err(MetricsError::InvalidHop { .. })));
        assert!(matches!(bad(64, 65), Err(MetricsError::InvalidHop { .. })));
    }

    #[test]
    fn zero_in_zero_out() {
        let w = Waveform::zeros(1000, 8000);
        let tf = stft(&w, StftParams::default()).unwrap();
        assert_eq!(tf.grid.ncols(), 129);
        assert!(tf.grid.iter().all(|c| c.norm() == 0.0));
        assert_eq!(istft(&tf).unwrap(), w);
    }

    #[test]
    fn round_trip_reconstructs() {
        for &(n, fl) in &[(1000usize, 256usize), (257, 64), (5, 16), (4096, 512)] {
            let w = noise(n, n as u64);
            let params = StftParams { frame_len: fl, hop: fl / 2, window: Window::Hann };
            let r = istft(&stft(&w, params).unwrap()).unwrap();
            assert_eq!(r.len(), n);
            let err = w.samples.iter().zip(&r.samples).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(err < 1e-6, "n={n} fl={fl} err={err}");
        }
    }

    #[test]
    fn istft_is_linear() {
        let w = noise(700, 1);
        let mut tf = stft(&w, StftParams::default()).unwrap();
        let once = istft(&tf).unwrap();
        tf.grid.mapv_inplace(|c| c * 2.0);
        let twice = istft(&tf).unwrap();
        for (a, b) in once.samples.iter().zip(&twice.samples) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn istft_rejects_inconsistent_metadata() {
        let mut tf = stft(&noise(300, 2), StftParams::default()).unwrap();
        tf.num_samples = 10_000;
        assert!(matches!(istft(&tf), Err(MetricsError::InconsistentMetadata(_))));
    }

    #[test]
    fn bin_centred_sine_stays_in_main_lobe() {
        // 500 Hz is exactly bin 16 at 8 kHz with a 256-point frame.
        let params = StftParams::default();
        let n = 4000;
        let tf = stft(&tone(500.0, n, 1.0), params).unwrap();
        let mut checked = 0;
        for f in 0..tf.num_frames() {
            let start = (f * params.hop) as isize - 128;
            if start < 0 || start as usize + 256 > n {
                continue;
            }
            let energy: Vec<f64> = tf.grid.row(f).iter().map(|c| c.norm_sqr()).collect();
            let total: f64 = energy.iter().sum();
            let lobe: f64 = energy[15..=17].iter().sum();
            assert!(lobe / total >= 0.99, "frame {f}: {}", lobe / total);
            assert!(energy[16] >= energy[15] && energy[16] >= energy[17]);
            checked += 1;
        }
        assert!(checked > 20);
    }

    #[test]
    fn irm_examples() {
        let mk = |v: f64| Array2::from_elem((1, 1), v);
        let m = ideal_ratio_masks(&[mk(2.0), mk(2.0)]).unwrap();
        assert_eq!(m.masks[0][[0, 0]], 0.5);
        assert_eq!(m.masks[1][[0, 0]], 0.5);

        let m = ideal_ratio_masks(&[mk(3.0), mk(1.0), mk(1.0), mk(0.0), mk(0.0)]).unwrap();
        let got: Vec<f64> = m.masks.iter().map(|x| x[[0, 0]]).collect();
        assert_eq!(got, vec![0.6, 0.2, 0.2, 0.0, 0.0]);

        let m = ideal_ratio_masks(&[mk(0.0), mk(0.0), mk(0.0)]).unwrap();
        assert!(m.masks.iter().all(|x| x[[0, 0]] == 1.0 / 3.0));

        assert!(ideal_ratio_masks(&[mk(1.0), Array2::zeros((2, 1))]).is_err());
        assert!(ideal_ratio_masks(&[mk(-1.0), mk(1.0)]).is_err());
    }

    #[test]
    fn oracle_single_source_is_identity() {
        let w = noise(900, 5);
        let out = oracle_irm_separate(&w, std::slice::from_ref(&w), StftParams::default()).unwrap();
        let err = w.samples.iter().zip(&out[0].samples).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(err < 1e-9);
    }

    #[test]
    fn oracle_is_equivariant() {
        let a = tone(500.0, 2000, 0.5);
        let b = noise(2000, 9);
        let mix = crate::audio::sum_waveforms(&[a.clone(), b.clone()]).unwrap();
        let p = StftParams::default();
        let fwd = oracle_irm_separate(&mix, &[a.clone(), b.clone()], p).unwrap();
        let rev = oracle_irm_separate(&mix, &[b, a], p).unwrap();
        assert_eq!(fwd[0], rev[1]);
        assert_eq!(fwd[1], rev[0]);
        assert!(oracle_irm_separate(&mix, &[tone(1.0, 10, 1.0)], p).is_err());
    }

    #[test]
    fn si_sdr_examples() {
        let r = noise(1000, 3);
        assert_eq!(si_sdr(&r, &r).unwrap(), SI_SDR_CAP_DB);
        let a = si_sdr(&r, &noise(1000, 4)).unwrap();
        assert!(a < 0.0);
        assert_eq!(si_sdr(&noise(10, 1), &Waveform::zeros(10, 8000)), Err(MetricsError::ZeroPowerReference));
        assert!(si_sdr(&noise(10, 1), &noise(11, 1)).is_err());
    }

    #[test]
    fn si_sdr_orthogonal_noise_is_exactly_ten_db() {
        // ref and noise are zero-mean and orthogonal by construction.
        let n = 800;
        let r: Vec<f64> = (0..n).map(|i| (std::f64::consts::TAU * 3.0 * i as f64 / n as f64).sin()).collect();
        let q: Vec<f64> = (0..n).map(|i| (std::f64::consts::TAU * 7.0 * i as f64 / n as f64).cos()).collect();
        let rr = dot(&r, &r);
        let qq = dot(&q, &q);
        let scale = (rr / 10.0 / qq).sqrt();
        let est: Vec<f64> = r.iter().zip(&q).map(|(a, b)| a + scale * b).collect();
        let v = si_sdr_slices(&est, &r).unwrap();
        assert!((v - 10.0).abs() < 1e-6, "{v}");
    }

    #[test]
    fn pit_examples() {
        let mut diag = Array2::zeros((4, 4));
        for i in 0..4 {
            diag[[i, i]] = 10.0;
        }
        for m in [AssignMethod::BruteForce, AssignMethod::Hungarian] {
            let a = pit_assign(&diag, m).unwrap();
            assert_eq!(a.perm, vec![0, 1, 2, 3]);
            assert_eq!(a.objective, 40.0);
            let swap = ndarray::arr2(&[[1.0, 5.0], [5.0, 1.0]]);
            let a = pit_assign(&swap, m).unwrap();
            assert_eq!(a.perm, vec![1, 0]);
            assert_eq!(a.objective, 10.0);
        }
        assert!(matches!(
            pit_assign(&Array2::zeros((2, 3)), AssignMethod::Hungarian),
            Err(MetricsError::NotSquare { .. })
        ));
        let mut nan = Array2::zeros((2, 2));
        nan[[0, 1]] = f64::NAN;
        assert_eq!(pit_assign(&nan, AssignMethod::BruteForce), Err(MetricsError::NonFinite));
    }

    #[test]
    fn hungarian_handles_ties() {
        let m = Array2::from_elem((5, 5), 1.0);
        let a = pit_assign(&m, AssignMethod::Hungarian).unwrap();
        let mut p = a.perm.clone();
        p.sort();
        assert_eq!(p, vec![0, 1, 2, 3, 4]);
        assert_eq!(a.objective, 5.0);
    }

    #[test]
    fn sdri_examples() {
        let refs = vec![tone(500.0, 1600, 0.4), noise(1600, 1), tone(1250.0, 1600, 0.3)];
        let mix = crate::audio::sum_waveforms(&refs).unwrap();

        let copies = vec![mix.clone(); 3];
        let r = sdri(&copies, &refs, &mix).unwrap();
        assert!(r.mean_improvement.abs() < 1e-12);

        let r = sdri(&refs, &refs, &mix).unwrap();
        let expected = SI_SDR_CAP_DB - r.mixture_si_sdr.iter().sum::<f64>() / 3.0;
        assert!((r.mean_improvement - expected).abs() < 1e-9);
        assert!(r.mean_improvement > 0.0);

        let shuffled = vec![refs[2].clone(), refs[0].clone(), refs[1].clone()];
        let s = sdri(&shuffled, &refs, &mix).unwrap();
        assert_eq!(s.improvement, r.improvement);
        assert_eq!(s.perm, vec![2, 0, 1]);

        assert!(sdri(&refs[..2], &refs, &mix).is_err());
    }
}
