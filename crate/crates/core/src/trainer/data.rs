use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::TrainError;
use crate::audio::Waveform;
use crate::mixgen::{open_corpus, synthesize, Corpus, Manifest, Mixture};

/// Synthesised mixtures of one manifest, in record order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub items: Vec<Mixture>,
}

impl Dataset {
    pub fn from_manifest(manifest: &Manifest, corpus: &dyn Corpus) -> Result<Self, TrainError> {
        let items = manifest
            .records
            .par_iter()
            .map(|r| synthesize(r, corpus))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            ids: manifest.records.iter().map(|r| r.id.clone()).collect(),
            items,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// A clean single-speaker utterance with its class index.
#[derive(Debug, Clone)]
pub struct LabeledUtterance {
    pub utt_ref: String,
    pub wave: Waveform,
    pub label: usize,
}

/// Everything the trainer reads: mixtures for separation and clean labelled
/// utterances for the ID-Net.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub num_sources: usize,
    pub sample_rate: u32,
    pub train: Dataset,
    pub valid: Dataset,
    /// Class names of the ID-Net, sorted; the label is the index.
    pub speakers: Vec<String>,
    pub id_train: Vec<LabeledUtterance>,
    pub id_valid: Vec<LabeledUtterance>,
    /// Digests of the manifests, for provenance.
    pub manifest_digests: Vec<String>,
}

impl TrainData {
    pub fn new(train: &Manifest, valid: &Manifest, corpus: &dyn Corpus) -> Result<Self, TrainError> {
        if train.records.is_empty() || valid.records.is_empty() {
            return Err(TrainError::Data("empty manifest".into()));
        }
        let s = train.num_sources();
        if valid.num_sources() != s {
            return Err(TrainError::Data(format!(
                "train has {s} sources, valid has {}",
                valid.num_sources()
            )));
        }
        let speakers: Vec<String> = train.speakers(corpus).into_iter().collect();
        let labels: BTreeMap<&str, usize> = speakers
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        let utterances = |m: &Manifest| -> Result<Vec<LabeledUtterance>, TrainError> {
            let mut refs: Vec<&String> = m.records.iter().flat_map(|r| &r.source_refs).collect();
            refs.sort();
            refs.dedup();
            refs.into_iter()
                .filter_map(|r| {
                    let spk = corpus.speaker_of(r)?;
                    let label = *labels.get(spk.as_str())?;
                    Some((r, label))
                })
                .map(|(r, label)| {
                    Ok(LabeledUtterance {
                        utt_ref: r.clone(),
                        wave: corpus.load(r)?,
                        label,
                    })
                })
                .collect()
        };
        let id_train = utterances(train)?;
        let id_valid = utterances(valid)?;
        Ok(Self {
            num_sources: s,
            sample_rate: train.header.protocol.sample_rate,
            train: Dataset::from_manifest(train, corpus)?,
            valid: Dataset::from_manifest(valid, corpus)?,
            speakers,
            id_train,
            id_valid,
            manifest_digests: vec![manifest_digest(train), manifest_digest(valid)],
        })
    }

    /// Reads both manifests and resolves the corpus named in the train header.
    pub fn load(train: &std::path::Path, valid: &std::path::Path) -> Result<Self, TrainError> {
        let train = Manifest::read(train)?;
        let valid = Manifest::read(valid)?;
        let corpus = open_corpus(&train.header.protocol.corpus_id)?;
        Self::new(&train, &valid, corpus.as_ref())
    }
}

pub fn manifest_digest(m: &Manifest) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(m.to_jsonl().as_bytes()))
}

/// Deterministic per-purpose seed (SplitMix64 finaliser folded over `parts`).
pub(crate) fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    parts.iter().fold(mix(seed), |h, &p| mix(h ^ mix(p)))
}

fn crop_offset(len: usize, target: usize, rng: &mut ChaCha8Rng) -> usize {
    if len > target {
        rng.random_range(0..=len - target)
    } else {
        0
    }
}

fn crop(w: &Waveform, offset: usize, target: usize) -> Waveform {
    let mut samples: Vec<f64> = w.samples.iter().skip(offset).take(target).copied().collect();
    samples.resize(target, 0.0);
    Waveform {
        samples,
        sample_rate: w.sample_rate,
    }
}

/// Crops every source at one shared offset (zero-padding short items) and
/// re-sums, so the crop is still an exact mixture. `seed = None` takes the
/// leading segment.
pub fn crop_mixture(m: &Mixture, target: usize, seed: Option<u64>) -> Mixture {
    let offset = seed.map_or(0, |s| crop_offset(m.len(), target, &mut ChaCha8Rng::seed_from_u64(s)));
    let sources = m.sources.iter().map(|w| crop(w, offset, target)).collect();
    Mixture::from_sources(sources).expect("equal lengths")
}

pub fn crop_waveform(w: &Waveform, target: usize, seed: Option<u64>) -> Waveform {
    let offset = seed.map_or(0, |s| crop_offset(w.len(), target, &mut ChaCha8Rng::seed_from_u64(s)));
    crop(w, offset, target)
}

/// Seeded shuffle of `0..n` split into batches of at most `batch`.
pub fn epoch_batches(n: usize, batch: usize, seed: u64) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixgen::{build_manifest, make_toy_corpus, split_pool, Split};

    #[test]
    fn crops_stay_exact_mixtures() {
        let corpus = make_toy_corpus(4, 3, 0.1, 1).unwrap();
        let pools = split_pool(&corpus.pool(), 0, 0.3).unwrap();
        let m = build_manifest(&corpus, &pools.train, Split::Train, 2, 3, (0.0, 5.0), 2).unwrap();
        let ds = Dataset::from_manifest(&m, &corpus).unwrap();
        for (i, item) in ds.items.iter().enumerate() {
            for target in [100, 800, 2000] {
                let c = crop_mixture(item, target, Some(i as u64));
                assert_eq!(c.len(), target);
                for t in 0..target {
                    let s: f64 = c.sources.iter().map(|w| w.samples[t]).sum();
                    assert_eq!(s, c.mixture.samples[t]);
                }
                assert_eq!(c, crop_mixture(item, target, Some(i as u64)));
            }
        }
    }

    #[test]
    fn labels_follow_training_speakers() {
        let corpus = make_toy_corpus(5, 4, 0.1, 3).unwrap();
        let pools = split_pool(&corpus.pool(), 1, 0.25).unwrap();
        let tr = build_manifest(&corpus, &pools.train, Split::Train, 2, 10, (0.0, 5.0), 1).unwrap();
        let va = build_manifest(&corpus, &pools.valid, Split::Valid, 2, 4, (0.0, 5.0), 2).unwrap();
        let data = TrainData::new(&tr, &va, &corpus).unwrap();
        assert_eq!(data.num_sources, 2);
        assert!(data.speakers.len() >= 2);
        for u in data.id_train.iter().chain(&data.id_valid) {
            assert_eq!(corpus.speaker_of(&u.utt_ref).unwrap(), data.speakers[u.label]);
        }
        let train_refs: Vec<_> = data.id_train.iter().map(|u| &u.utt_ref).collect();
        assert!(data.id_valid.iter().all(|u| !train_refs.contains(&&u.utt_ref)));
    }

    #[test]
    fn batches_cover_every_item_once() {
        let b = epoch_batches(10, 4, 5);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), [4, 4, 2]);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(b, epoch_batches(10, 4, 5));
        assert_ne!(b, epoch_batches(10, 4, 6));
    }
}
