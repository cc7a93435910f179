//! Mixture synthesis: corpora, manifests, deterministic mixing at
//! relative SNRs, and online remixing of source segments within a batch.
//!
//! A mixture record names `S` utterances from distinct speakers. Source 0 is
//! the level reference at 0 dB; every other source is scaled so that its
//! power relative to source 0 equals the requested SNR. All sources are
//! truncated to the shortest one before gains are derived, and the stored
//! gains reproduce the mixture bit-for-bit.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{self, gain_for_snr, power, AudioError, Waveform};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// Peak level the mixture is scaled down to when the summed sources would
/// otherwise exceed it.
const MIX_PEAK_LIMIT: f64 = 0.9;

#[derive(Debug, Error)]
pub enum MixError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("need at least {needed} speakers, corpus has {available}")]
    TooFewSpeakers { needed: usize, available: usize },
    #[error("at least two sources are required, got {0}")]
    TooFewSources(usize),
    #[error("invalid snr range [{0}, {1}]")]
    InvalidSnrRange(f64, f64),
    #[error("invalid count: {0}")]
    InvalidCount(String),
    #[error("unresolvable source reference {0:?}")]
    UnresolvableRef(String),
    #[error("zero-power source {0:?}")]
    ZeroPowerSource(String),
    #[error("malformed record {id}: {detail}")]
    MalformedRecord { id: String, detail: String },
    #[error("heterogeneous batch: {0}")]
    HeterogeneousBatch(String),
    #[error("speaker {0:?} appears in both train and test splits")]
    SpeakerLeak(String),
    #[error("manifest parse error at line {line}: {detail}")]
    ManifestParse { line: usize, detail: String },
    #[error("unknown corpus id {0:?}")]
    UnknownCorpus(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Source of clean single-speaker utterances addressed by string keys.
pub trait Corpus: Sync {
    /// Stable identifier recorded in manifests; [`open_corpus`] resolves it.
    fn id(&self) -> String;
    fn sample_rate(&self) -> u32;
    fn speakers(&self) -> Vec<String>;
    fn utterances(&self, speaker: &str) -> Vec<String>;
    fn speaker_of(&self, utt_ref: &str) -> Option<String>;
    fn load(&self, utt_ref: &str) -> Result<Waveform, MixError>;

    fn pool(&self) -> SourcePool {
        SourcePool {
            by_speaker: self
                .speakers()
                .into_iter()
                .map(|s| {
                    let u = self.utterances(&s);
                    (s, u)
                })
                .collect(),
        }
    }
}

/// Utterances eligible for one split, grouped by speaker.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SourcePool {
    pub by_speaker: BTreeMap<String, Vec<String>>,
}

impl SourcePool {
    pub fn speakers(&self) -> impl Iterator<Item = &String> {
        self.by_speaker.keys()
    }

    pub fn num_speakers(&self) -> usize {
        self.by_speaker.values().filter(|u| !u.is_empty()).count()
    }
}

#[derive(Debug, Clone)]
pub struct SplitPools {
    pub train: SourcePool,
    pub valid: SourcePool,
    pub test: SourcePool,
}

/// Partitions a pool into train/valid (shared speakers, disjoint utterances)
/// and test (unseen speakers). The last `n_test_speakers` speakers in sorted
/// order are held out; each training speaker contributes its last
/// `ceil(valid_fraction · n)` utterances to validation.
pub fn split_pool(
    pool: &SourcePool,
    n_test_speakers: usize,
    valid_fraction: f64,
) -> Result<SplitPools, MixError> {
    let speakers: Vec<_> = pool.by_speaker.iter().collect();
    if speakers.is_empty() {
        return Err(MixError::EmptyCorpus);
    }
    if n_test_speakers >= speakers.len() {
        return Err(MixError::TooFewSpeakers {
            needed: n_test_speakers + 1,
            available: speakers.len(),
        });
    }
    let n_train = speakers.len() - n_test_speakers;
    let mut train = SourcePool::default();
    let mut valid = SourcePool::default();
    let mut test = SourcePool::default();
    for (i, (spk, utts)) in speakers.into_iter().enumerate() {
        if i < n_train {
            let n_valid = ((utts.len() as f64 * valid_fraction).ceil() as usize)
                .min(utts.len().saturating_sub(1));
            let cut = utts.len() - n_valid;
            train.by_speaker.insert(spk.clone(), utts[..cut].to_vec());
            valid.by_speaker.insert(spk.clone(), utts[cut..].to_vec());
        } else {
            test.by_speaker.insert(spk.clone(), utts.clone());
        }
    }
    Ok(SplitPools { train, valid, test })
}

/// Generator parameters of one synthetic speaker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub name: String,
    pub f0_low: f64,
    pub f0_high: f64,
    pub harmonic_weights: Vec<f64>,
    pub am_rate_hz: f64,
    pub am_depth: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyCorpusParams {
    pub n_speakers: usize,
    pub utt_per_speaker: usize,
    pub duration_s: f64,
    pub seed: u64,
    pub sample_rate: u32,
}

/// License-free stand-in corpus: each utterance is a harmonic tone complex
/// with a speaker-specific fundamental band, spectral envelope and
/// amplitude-modulation rate, peak-normalised to 0.9.
#[derive(Debug, Clone)]
pub struct ToyCorpus {
    pub params: ToyCorpusParams,
    pub speakers: Vec<SpeakerProfile>,
    utterances: BTreeMap<String, Waveform>,
}

const TOY_HARMONICS: usize = 12;
const TOY_F0_MIN: f64 = 90.0;
const TOY_F0_MAX: f64 = 360.0;

pub fn make_toy_corpus(
    n_speakers: usize,
    utt_per_speaker: usize,
    duration_s: f64,
    seed: u64,
) -> Result<ToyCorpus, MixError> {
    make_toy_corpus_at(ToyCorpusParams {
        n_speakers,
        utt_per_speaker,
        duration_s,
        seed,
        sample_rate: audio::DEFAULT_SAMPLE_RATE,
    })
}

pub fn make_toy_corpus_at(params: ToyCorpusParams) -> Result<ToyCorpus, MixError> {
    if params.n_speakers < 2 {
        return Err(MixError::InvalidCount(format!(
            "n_speakers must be >= 2, got {}",
            params.n_speakers
        )));
    }
    if params.utt_per_speaker == 0 {
        return Err(MixError::InvalidCount("utt_per_speaker must be >= 1".into()));
    }
    let n_samples = (params.duration_s * params.sample_rate as f64).round() as usize;
    if !(params.duration_s > 0.0) || n_samples == 0 {
        return Err(MixError::InvalidCount(format!(
            "duration {} s yields no samples",
            params.duration_s
        )));
    }
    if params.sample_rate == 0 {
        return Err(AudioError::ZeroSampleRate.into());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    // Band centres are spaced geometrically; each band spans a third of the
    // gap to its neighbours so dominant fundamentals never collide.
    let ratio = (TOY_F0_MAX / TOY_F0_MIN).powf(1.0 / (params.n_speakers - 1) as f64);
    let half_width = (ratio - 1.0) / 3.0;
    let speakers: Vec<SpeakerProfile> = (0..params.n_speakers)
        .map(|i| {
            let centre = TOY_F0_MIN * ratio.powi(i as i32);
            let tilt = rng.random_range(0.6..1.6);
            let mut harmonic_weights: Vec<f64> = (1..=TOY_HARMONICS)
                .map(|h| (1.0 / h as f64).powf(tilt) * rng.random_range(0.3..1.0))
                .collect();
            // The fundamental dominates the spectrum.
            harmonic_weights[0] = 1.0;
            for w in harmonic_weights.iter_mut().skip(1) {
                *w = w.min(0.8);
            }
            SpeakerProfile {
                name: format!("spk{i:03}"),
                f0_low: centre * (1.0 - half_width),
                f0_high: centre * (1.0 + half_width),
                harmonic_weights,
                am_rate_hz: rng.random_range(1.5..7.0),
                am_depth: rng.random_range(0.3..0.8),
            }
        })
        .collect();

    let mut utterances = BTreeMap::new();
    for spk in &speakers {
        for u in 0..params.utt_per_speaker {
            let w = synth_toy_utterance(spk, n_samples, params.sample_rate, rng.next_u64());
            utterances.insert(format!("{}/utt{u:03}", spk.name), w);
        }
    }
    Ok(ToyCorpus {
        params,
        speakers,
        utterances,
    })
}

fn synth_toy_utterance(spk: &SpeakerProfile, n: usize, sr: u32, seed: u64) -> Waveform {
    use std::f64::consts::TAU;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let margin = (spk.f0_high - spk.f0_low) * 0.1;
    let f0 = rng.random_range(spk.f0_low + margin..=spk.f0_high - margin);
    let glide_rate = rng.random_range(0.2..0.8);
    let glide_depth = 0.25 * (spk.f0_high - spk.f0_low) / f0 * 0.5;
    let glide_phase = rng.random_range(0.0..TAU);
    let am_phase = rng.random_range(0.0..TAU);
    let phases: Vec<f64> = (0..spk.harmonic_weights.len())
        .map(|_| rng.random_range(0.0..TAU))
        .collect();
    let nyquist = sr as f64 / 2.0;
    let dt = 1.0 / sr as f64;

    let mut theta = 0.0;
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 * dt;
        let inst_f0 = f0 * (1.0 + glide_depth * (TAU * glide_rate * t + glide_phase).sin());
        let mut x = 0.0;
        for (h, (&w, &ph)) in spk.harmonic_weights.iter().zip(&phases).enumerate() {
            let k = (h + 1) as f64;
            if k * inst_f0 >= nyquist * 0.95 {
                break;
            }
            x += w * (k * theta + ph).sin();
        }
        let env = 1.0 - spk.am_depth * 0.5 * (1.0 + (TAU * spk.am_rate_hz * t + am_phase).cos());
        samples.push(x * env);
        theta += TAU * inst_f0 * dt;
    }
    let peak = samples.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if peak > 0.0 {
        for s in &mut samples {
            *s *= 0.9 / peak;
        }
    }
    Waveform {
        samples,
        sample_rate: sr,
    }
}

impl ToyCorpus {
    pub fn num_utterances(&self) -> usize {
        self.utterances.len()
    }

    pub fn utterance(&self, utt_ref: &str) -> Option<&Waveform> {
        self.utterances.get(utt_ref)
    }

    fn parse_id(id: &str) -> Option<ToyCorpusParams> {
        let rest = id.strip_prefix("toy:v1:")?;
        let mut kv = BTreeMap::new();
        for part in rest.split(':') {
            let (k, v) = part.split_once('=')?;
            kv.insert(k, v);
        }
        Some(ToyCorpusParams {
            n_speakers: kv.get("speakers")?.parse().ok()?,
            utt_per_speaker: kv.get("utts")?.parse().ok()?,
            duration_s: kv.get("dur")?.parse().ok()?,
            seed: kv.get("seed")?.parse().ok()?,
            sample_rate: kv.get("sr")?.parse().ok()?,
        })
    }
}

impl Corpus for ToyCorpus {
    fn id(&self) -> String {
        let p = &self.params;
        format!(
            "toy:v1:speakers={}:utts={}:dur={}:seed={}:sr={}",
            p.n_speakers, p.utt_per_speaker, p.duration_s, p.seed, p.sample_rate
        )
    }

    fn sample_rate(&self) -> u32 {
        self.params.sample_rate
    }

    fn speakers(&self) -> Vec<String> {
        self.speakers.iter().map(|s| s.name.clone()).collect()
    }

    fn utterances(&self, speaker: &str) -> Vec<String> {
        let prefix = format!("{speaker}/");
        self.utterances
            .keys()
            .filter(|k| k.starts_with(&prefix))
            .cloned()
            .collect()
    }

    fn speaker_of(&self, utt_ref: &str) -> Option<String> {
        self.utterances
            .contains_key(utt_ref)
            .then(|| utt_ref.split('/').next().unwrap_or_default().to_string())
    }

    fn load(&self, utt_ref: &str) -> Result<Waveform, MixError> {
        self.utterances
            .get(utt_ref)
            .cloned()
            .ok_or_else(|| MixError::UnresolvableRef(utt_ref.to_string()))
    }
}

/// On-disk corpus laid out as `<root>/<speaker>/<utterance>.wav`.
#[derive(Debug, Clone)]
pub struct DirCorpus {
    root: PathBuf,
    sample_rate: u32,
    index: BTreeMap<String, Vec<String>>,
}

impl DirCorpus {
    pub fn open(root: impl AsRef<Path>) -> Result<Self, MixError> {
        let root = root.as_ref().to_path_buf();
        let mut index = BTreeMap::new();
        let mut sample_rate = None;
        let mut speaker_dirs: Vec<_> = fs::read_dir(&root)?
            .filter_map(Result::ok)
            .filter(|e| e.path().is_dir())
            .collect();
        speaker_dirs.sort_by_key(|e| e.file_name());
        for dir in speaker_dirs {
            let spk = dir.file_name().to_string_lossy().into_owned();
            let mut utts: Vec<String> = fs::read_dir(dir.path())?
                .filter_map(Result::ok)
                .map(|e| e.path())
                .filter(|p| p.extension().is_some_and(|x| x == "wav"))
                .filter_map(|p| {
                    p.file_stem()
                        .map(|s| format!("{spk}/{}", s.to_string_lossy()))
                })
                .collect();
            utts.sort();
            if utts.is_empty() {
                continue;
            }
            if sample_rate.is_none() {
                sample_rate = Some(audio::load_wav(root.join(format!("{}.wav", utts[0])))?.sample_rate);
            }
            index.insert(spk, utts);
        }
        Ok(Self {
            root,
            sample_rate: sample_rate.ok_or(MixError::EmptyCorpus)?,
            index,
        })
    }
}

impl Corpus for DirCorpus {
    fn id(&self) -> String {
        format!("dir:{}", self.root.display())
    }

    fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    fn speakers(&self) -> Vec<String> {
        self.index.keys().cloned().collect()
    }

    fn utterances(&self, speaker: &str) -> Vec<String> {
        self.index.get(speaker).cloned().unwrap_or_default()
    }

    fn speaker_of(&self, utt_ref: &str) -> Option<String> {
        let (spk, _) = utt_ref.split_once('/')?;
        self.index
            .get(spk)
            .filter(|u| u.iter().any(|x| x == utt_ref))
            .map(|_| spk.to_string())
    }

    fn load(&self, utt_ref: &str) -> Result<Waveform, MixError> {
        if self.speaker_of(utt_ref).is_none() {
            return Err(MixError::UnresolvableRef(utt_ref.to_string()));
        }
        Ok(audio::load_wav(self.root.join(format!("{utt_ref}.wav")))?)
    }
}

/// Rebuilds a corpus from the id stored in a manifest header.
pub fn open_corpus(id: &str) -> Result<Box<dyn Corpus>, MixError> {
    if let Some(params) = ToyCorpus::parse_id(id) {
        return Ok(Box::new(make_toy_corpus_at(params)?));
    }
    if let Some(path) = id.strip_prefix("dir:") {
        return Ok(Box::new(DirCorpus::open(path)?));
    }
    Err(MixError::UnknownCorpus(id.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureRecord {
    pub id: String,
    pub source_refs: Vec<String>,
    pub snrs_db: Vec<f64>,
    pub gains: Vec<f64>,
    pub seed: u64,
}

impl MixtureRecord {
    pub fn num_sources(&self) -> usize {
        self.source_refs.len()
    }

    pub fn validate(&self, corpus: &dyn Corpus) -> Result<(), MixError> {
        let bad = |detail: String| MixError::MalformedRecord {
            id: self.id.clone(),
            detail,
        };
        let s = self.source_refs.len();
        if s < 2 {
            return Err(bad(format!("{s} sources")));
        }
        if self.snrs_db.len() != s || self.gains.len() != s {
            return Err(bad("refs/snrs/gains length mismatch".into()));
        }
        if self.snrs_db[0] != 0.0 {
            return Err(bad("reference source snr must be 0 dB".into()));
        }
        let mut seen = BTreeSet::new();
        for r in &self.source_refs {
            let spk = corpus
                .speaker_of(r)
                .ok_or_else(|| MixError::UnresolvableRef(r.clone()))?;
            if !seen.insert(spk.clone()) {
                return Err(bad(format!("speaker {spk} used twice")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    pub num_sources: usize,
    pub snr_range_db: (f64, f64),
    pub corpus_id: String,
    pub seed: u64,
    pub sample_rate: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub schema_version: u32,
    pub split: Split,
    pub protocol: Protocol,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub header: ManifestHeader,
    pub records: Vec<MixtureRecord>,
}

impl Manifest {
    pub fn split(&self) -> Split {
        self.header.split
    }

    pub fn num_sources(&self) -> usize {
        self.header.protocol.num_sources
    }

    pub fn speakers(&self, corpus: &dyn Corpus) -> BTreeSet<String> {
        self.records
            .iter()
            .flat_map(|r| r.source_refs.iter())
            .filter_map(|r| corpus.speaker_of(r))
            .collect()
    }

    /// Line-delimited JSON: a header line followed by one record per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serialises");
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serialises"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, MixError> {
        Self::parse_lines(text.lines().map(|l| Ok(l.to_string())))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), MixError> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        w.write_all(self.to_jsonl().as_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, MixError> {
        let f = fs::File::open(path)?;
        Self::parse_lines(BufReader::new(f).lines())
    }

    fn parse_lines(
        lines: impl Iterator<Item = std::io::Result<String>>,
    ) -> Result<Self, MixError> {
        let mut header = None;
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let perr = |e: serde_json::Error| MixError::ManifestParse {
                line: i + 1,
                detail: e.to_string(),
            };
            if header.is_none() {
                let h: ManifestHeader = serde_json::from_str(&line).map_err(perr)?;
                if h.schema_version != MANIFEST_SCHEMA_VERSION {
                    return Err(MixError::ManifestParse {
                        line: i + 1,
                        detail: format!("unsupported schema version {}", h.schema_version),
                    });
                }
                header = Some(h);
            } else {
                records.push(serde_json::from_str(&line).map_err(perr)?);
            }
        }
        let header = header.ok_or(MixError::ManifestParse {
            line: 0,
            detail: "missing header line".into(),
        })?;
        Ok(Self { header, records })
    }
}

/// Checks that no speaker of `test` occurs in `train`.
pub fn check_speaker_disjoint(
    train: &Manifest,
    test: &Manifest,
    corpus: &dyn Corpus,
) -> Result<(), MixError> {
    let train_spk = train.speakers(corpus);
    match test.speakers(corpus).into_iter().find(|s| train_spk.contains(s)) {
        Some(s) => Err(MixError::SpeakerLeak(s)),
        None => Ok(()),
    }
}

/// Draws `n_mixtures` records, each pairing `num_sources` distinct speakers
/// (one random utterance each) at SNRs uniform in `snr_range_db` relative to
/// source 0.
#[allow(clippy::too_many_arguments)]
pub fn build_manifest(
    corpus: &dyn Corpus,
    pool: &SourcePool,
    split: Split,
    num_sources: usize,
    n_mixtures: usize,
    snr_range_db: (f64, f64),
    seed: u64,
) -> Result<Manifest, MixError> {
    let (low, high) = snr_range_db;
    if !(low <= high) || !low.is_finite() || !high.is_finite() {
        return Err(MixError::InvalidSnrRange(low, high));
    }
    if num_sources < 2 {
        return Err(MixError::TooFewSources(num_sources));
    }
    let speakers: Vec<(&String, &Vec<String>)> =
        pool.by_speaker.iter().filter(|(_, u)| !u.is_empty()).collect();
    if speakers.is_empty() {
        return Err(MixError::EmptyCorpus);
    }
    if speakers.len() < num_sources {
        return Err(MixError::TooFewSpeakers {
            needed: num_sources,
            available: speakers.len(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n_mixtures);
    for k in 0..n_mixtures {
        let chosen = rand::seq::index::sample(&mut rng, speakers.len(), num_sources);
        let source_refs: Vec<String> = chosen
            .iter()
            .map(|i| {
                let utts = speakers[i].1;
                utts[rng.random_range(0..utts.len())].clone()
            })
            .collect();
        let mut snrs_db = vec![0.0; num_sources];
        for s in snrs_db.iter_mut().skip(1) {
            *s = if low == high {
                low
            } else {
                rng.random_range(low..=high)
            };
        }
        let record_seed = rng.next_u64();

        let raw = load_truncated(corpus, &source_refs)?;
        let powers = raw
            .iter()
            .zip(&source_refs)
            .map(|(w, r)| match power(w) {
                Ok(p) if p > 0.0 => Ok(p),
                _ => Err(MixError::ZeroPowerSource(r.clone())),
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut gains = vec![1.0; num_sources];
        for i in 1..num_sources {
            gains[i] = gain_for_snr(powers[i], powers[0], snrs_db[i])?;
        }
        let peak = mix_peak(&raw, &gains);
        if peak > MIX_PEAK_LIMIT {
            let scale = MIX_PEAK_LIMIT / peak;
            gains.iter_mut().for_each(|g| *g *= scale);
        }
        records.push(MixtureRecord {
            id: format!("{split}_{k:05}"),
            source_refs,
            snrs_db,
            gains,
            seed: record_seed,
        });
    }
    Ok(Manifest {
        header: ManifestHeader {
            schema_version: MANIFEST_SCHEMA_VERSION,
            split,
            protocol: Protocol {
                num_sources,
                snr_range_db,
                corpus_id: corpus.id(),
                seed,
                sample_rate: corpus.sample_rate(),
            },
        },
        records,
    })
}

fn load_truncated(corpus: &dyn Corpus, refs: &[String]) -> Result<Vec<Waveform>, MixError> {
    let raw = refs
        .iter()
        .map(|r| corpus.load(r))
        .collect::<Result<Vec<_>, _>>()?;
    let min_len = raw.iter().map(Waveform::len).min().unwrap_or(0);
    Ok(raw.into_iter().map(|w| w.truncated(min_len)).collect())
}

fn mix_peak(raw: &[Waveform], gains: &[f64]) -> f64 {
    let n = raw.first().map_or(0, Waveform::len);
    (0..n)
        .map(|t| {
            raw.iter()
                .zip(gains)
                .map(|(w, g)| g * w.samples[t])
                .sum::<f64>()
                .abs()
        })
        .fold(0.0, f64::max)
}

/// A mixture together with the scaled sources that sum to it.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub mixture: Waveform,
    pub sources: Vec<Waveform>,
}

impl Mixture {
    pub fn from_sources(sources: Vec<Waveform>) -> Option<Self> {
        let mixture = audio::sum_waveforms(&sources)?;
        Some(Self { mixture, sources })
    }

    pub fn num_sources(&self) -> usize {
        self.sources.len()
    }

    pub fn len(&self) -> usize {
        self.mixture.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mixture.is_empty()
    }
}

pub fn synthesize(record: &MixtureRecord, corpus: &dyn Corpus) -> Result<Mixture, MixError> {
    record.validate(corpus)?;
    let raw = load_truncated(corpus, &record.source_refs)?;
    for (w, r) in raw.iter().zip(&record.source_refs) {
        if w.is_empty() || power(w)? == 0.0 {
            return Err(MixError::ZeroPowerSource(r.clone()));
        }
    }
    let sources: Vec<Waveform> = raw
        .iter()
        .zip(&record.gains)
        .map(|(w, &g)| w.scaled(g))
        .collect();
    Ok(Mixture::from_sources(sources).expect("sources share a length"))
}

/// Synthesises every record of `manifest` and writes
/// `<out>/<split>/mix/<id>.wav` and `<out>/<split>/s<i>/<id>.wav`.
pub fn write_wav_tree(
    manifest: &Manifest,
    corpus: &dyn Corpus,
    out: impl AsRef<Path>,
) -> Result<Vec<PathBuf>, MixError> {
    use rayon::prelude::*;
    let base = out.as_ref().join(manifest.split().as_str());
    let s = manifest.num_sources();
    fs::create_dir_all(base.join("mix"))?;
    for i in 1..=s {
        fs::create_dir_all(base.join(format!("s{i}")))?;
    }
    let written: Vec<Vec<PathBuf>> = manifest
        .records
        .par_iter()
        .map(|rec| -> Result<Vec<PathBuf>, MixError> {
            let m = synthesize(rec, corpus)?;
            let name = format!("{}.wav", rec.id);
            let mut paths = vec![base.join("mix").join(&name)];
            audio::save_wav(&paths[0], &m.mixture)?;
            for (i, src) in m.sources.iter().enumerate() {
                let p = base.join(format!("s{}", i + 1)).join(&name);
                audio::save_wav(&p, src)?;
                paths.push(p);
            }
            Ok(paths)
        })
        .collect::<Result<_, _>>()?;
    Ok(written.into_iter().flatten().collect())
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RemixOptions {
    /// When set, non-reference slots are re-levelled against slot 0 at an
    /// SNR drawn uniformly from this range.
    pub regain_snr_db: Option<(f64, f64)>,
}

/// Re-pairs sources across the batch: every slot draws an independent
/// permutation of the batch, and each new mixture is the sum of the sources
/// it received.
pub fn online_remix(batch: &[Mixture], seed: u64) -> Result<Vec<Mixture>, MixError> {
    online_remix_with(batch, seed, RemixOptions::default())
}

pub fn online_remix_with(
    batch: &[Mixture],
    seed: u64,
    opts: RemixOptions,
) -> Result<Vec<Mixture>, MixError> {
    let Some(first) = batch.first() else {
        return Ok(Vec::new());
    };
    let s = first.num_sources();
    let len = first.len();
    for (b, item) in batch.iter().enumerate() {
        if item.num_sources() != s {
            return Err(MixError::HeterogeneousBatch(format!(
                "item {b} has {} sources, expected {s}",
                item.num_sources()
            )));
        }
        if item.len() != len || item.sources.iter().any(|w| w.len() != len) {
            return Err(MixError::HeterogeneousBatch(format!(
                "item {b} length differs from {len}"
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let perms: Vec<Vec<usize>> = (0..s)
        .map(|_| {
            let mut p: Vec<usize> = (0..batch.len()).collect();
            p.shuffle(&mut rng);
            p
        })
        .collect();
    let mut out = Vec::with_capacity(batch.len());
    for b in 0..batch.len() {
        let mut sources: Vec<Waveform> = (0..s)
            .map(|slot| batch[perms[slot][b]].sources[slot].clone())
            .collect();
        if let Some((lo, hi)) = opts.regain_snr_db {
            let p0 = power(&sources[0])?;
            for src in sources.iter_mut().skip(1) {
                let p = power(src)?;
                if p > 0.0 && p0 > 0.0 {
                    let snr = if lo == hi { lo } else { rng.random_range(lo..=hi) };
                    *src = src.scaled(gain_for_snr(p, p0, snr)?);
                }
            }
        }
        out.push(Mixture::from_sources(sources).expect("equal lengths checked"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_corpus() -> ToyCorpus {
        make_toy_corpus(6, 4, 0.5, 3).unwrap()
    }

    #[test]
    fn toy_corpus_counts_and_determinism() {
        let c = make_toy_corpus(8, 10, 4.0, 1).unwrap();
        assert_eq!(c.num_utterances(), 80);
        assert!(c.utterances.values().all(|w| w.len() == 32000));
        let d = make_toy_corpus(8, 10, 4.0, 1).unwrap();
        assert!(c.utterances == d.utterances);
        for w in c.utterances.values() {
            assert!((w.peak() - 0.9).abs() < 1e-12);
        }
    }

    #[test]
    fn toy_profiles_differ() {
        let c = small_corpus();
        for i in 0..c.speakers.len() {
            for j in i + 1..c.speakers.len() {
                assert_ne!(c.speakers[i], c.speakers[j]);
                assert!(c.speakers[i].f0_high < c.speakers[j].f0_low);
            }
        }
    }

    #[test]
    fn toy_rejects_bad_counts() {
        assert!(make_toy_corpus(1, 10, 1.0, 0).is_err());
        assert!(make_toy_corpus(2, 0, 1.0, 0).is_err());
        assert!(make_toy_corpus(2, 1, 0.0, 0).is_err());
    }

    #[test]
    fn corpus_id_round_trips() {
        let c = small_corpus();
        let reopened = open_corpus(&c.id()).unwrap();
        assert_eq!(reopened.id(), c.id());
        let r = "spk002/utt001";
        assert_eq!(reopened.load(r).unwrap(), c.load(r).unwrap());
        assert!(open_corpus("nope").is_err());
    }

    #[test]
    fn forced_selection_with_two_speakers() {
        let c = make_toy_corpus(2, 3, 0.25, 9).unwrap();
        let m = build_manifest(&c, &c.pool(), Split::Train, 2, 20, (0.0, 5.0), 4).unwrap();
        for r in &m.records {
            let mut spk: Vec<_> = r.source_refs.iter().map(|x| c.speaker_of(x).unwrap()).collect();
            spk.sort();
            assert_eq!(spk, vec!["spk000", "spk001"]);
        }
    }

    #[test]
    fn manifest_snrs_in_range_and_deterministic() {
        let c = small_corpus();
        let m = build_manifest(&c, &c.pool(), Split::Train, 3, 30, (0.0, 5.0), 11).unwrap();
        for r in &m.records {
            assert_eq!(r.snrs_db[0], 0.0);
            assert!(r.snrs_db[1..].iter().all(|&s| (0.0..=5.0).contains(&s)));
            r.validate(&c).unwrap();
        }
        let again = build_manifest(&c, &c.pool(), Split::Train, 3, 30, (0.0, 5.0), 11).unwrap();
        assert_eq!(m.to_jsonl(), again.to_jsonl());
        assert_eq!(Manifest::from_jsonl(&m.to_jsonl()).unwrap(), m);
    }

    #[test]
    fn manifest_errors() {
        let c = small_corpus();
        assert!(matches!(
            build_manifest(&c, &c.pool(), Split::Train, 7, 1, (0.0, 5.0), 0),
            Err(MixError::TooFewSpeakers { .. })
        ));
        assert!(matches!(
            build_manifest(&c, &SourcePool::default(), Split::Train, 2, 1, (0.0, 5.0), 0),
            Err(MixError::EmptyCorpus)
        ));
        assert!(matches!(
            build_manifest(&c, &c.pool(), Split::Train, 2, 1, (5.0, 0.0), 0),
            Err(MixError::InvalidSnrRange(..))
        ));
    }

    #[test]
    fn synthesis_hits_requested_snr() {
        let c = small_corpus();
        let m = build_manifest(&c, &c.pool(), Split::Train, 3, 20, (0.0, 5.0), 5).unwrap();
        for r in &m.records {
            let mix = synthesize(r, &c).unwrap();
            let p0 = power(&mix.sources[0]).unwrap();
            for i in 1..3 {
                let measured = audio::snr_db(power(&mix.sources[i]).unwrap(), p0);
                assert!((measured - r.snrs_db[i]).abs() <= 1e-6);
            }
            let resum = audio::sum_waveforms(&mix.sources).unwrap();
            assert_eq!(resum, mix.mixture);
            assert!(mix.mixture.peak() <= MIX_PEAK_LIMIT + 1e-12);
        }
    }

    #[test]
    fn equal_power_sources_get_equal_gains() {
        // Two scaled copies of the same waveform under different speaker keys.
        struct Twin(Waveform);
        impl Corpus for Twin {
            fn id(&self) -> String {
                "twin".into()
            }
            fn sample_rate(&self) -> u32 {
                8000
            }
            fn speakers(&self) -> Vec<String> {
                vec!["a".into(), "b".into()]
            }
            fn utterances(&self, s: &str) -> Vec<String> {
                vec![format!("{s}/u")]
            }
            fn speaker_of(&self, r: &str) -> Option<String> {
                r.split('/').next().map(String::from)
            }
            fn load(&self, r: &str) -> Result<Waveform, MixError> {
                let mut w = self.0.clone();
                if r.starts_with('b') {
                    w.samples.reverse();
                }
                Ok(w)
            }
        }
        let w = Waveform::new((0..64).map(|i| ((i as f64) * 0.3).sin() * 0.2).collect(), 8000).unwrap();
        let c = Twin(w);
        let m = build_manifest(&c, &c.pool(), Split::Train, 2, 1, (0.0, 0.0), 0).unwrap();
        let r = &m.records[0];
        assert!((r.gains[0] - r.gains[1]).abs() < 1e-12);
        let mix = synthesize(r, &c).unwrap();
        for t in 0..64 {
            assert_eq!(mix.mixture.samples[t], mix.sources[0].samples[t] + mix.sources[1].samples[t]);
        }
    }

    #[test]
    fn unresolvable_reference() {
        let c = small_corpus();
        let rec = MixtureRecord {
            id: "x".into(),
            source_refs: vec!["spk000/utt000".into(), "ghost/utt000".into()],
            snrs_db: vec![0.0, 1.0],
            gains: vec![1.0, 1.0],
            seed: 0,
        };
        assert!(matches!(synthesize(&rec, &c), Err(MixError::UnresolvableRef(_))));
    }

    #[test]
    fn split_pools_hold_out_speakers() {
        let c = small_corpus();
        let p = split_pool(&c.pool(), 2, 0.25).unwrap();
        assert_eq!(p.train.num_speakers(), 4);
        assert_eq!(p.test.num_speakers(), 2);
        for spk in p.test.speakers() {
            assert!(!p.train.by_speaker.contains_key(spk));
        }
        for (spk, utts) in &p.train.by_speaker {
            assert_eq!(utts.len(), 3);
            assert_eq!(p.valid.by_speaker[spk].len(), 1);
        }
        let train = build_manifest(&c, &p.train, Split::Train, 2, 10, (0.0, 5.0), 1).unwrap();
        let test = build_manifest(&c, &p.test, Split::Test, 2, 10, (0.0, 5.0), 2).unwrap();
        check_speaker_disjoint(&train, &test, &c).unwrap();
        assert!(check_speaker_disjoint(&train, &train, &c).is_err());
    }

    #[test]
    fn remix_of_single_item_is_identity() {
        let c = small_corpus();
        let m = build_manifest(&c, &c.pool(), Split::Train, 3, 1, (0.0, 5.0), 5).unwrap();
        let item = synthesize(&m.records[0], &c).unwrap();
        let out = online_remix(std::slice::from_ref(&item), 99).unwrap();
        assert_eq!(out, vec![item]);
    }

    #[test]
    fn remix_rejects_mixed_shapes() {
        let a = Mixture::from_sources(vec![Waveform::zeros(4, 8000), Waveform::zeros(4, 8000)]).unwrap();
        let b = Mixture::from_sources(vec![Waveform::zeros(5, 8000), Waveform::zeros(5, 8000)]).unwrap();
        let c3 = Mixture::from_sources(vec![Waveform::zeros(4, 8000); 3]).unwrap();
        assert!(online_remix(&[a.clone(), b], 0).is_err());
        assert!(online_remix(&[a, c3], 0).is_err());
    }

    #[test]
    fn remix_regain_keeps_sum_identity() {
        let c = small_corpus();
        let m = build_manifest(&c, &c.pool(), Split::Train, 3, 4, (0.0, 5.0), 5).unwrap();
        let batch: Vec<_> = m.records.iter().map(|r| synthesize(r, &c).unwrap()).collect();
        let out = online_remix_with(&batch, 3, RemixOptions { regain_snr_db: Some((0.0, 5.0)) }).unwrap();
        for item in &out {
            assert_eq!(audio::sum_waveforms(&item.sources).unwrap(), item.mixture);
        }
    }
}
