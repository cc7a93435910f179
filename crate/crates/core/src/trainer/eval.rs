use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::audio::Waveform;
use crate::metrics::{oracle_irm_separate, sdri, SdriResult, StftParams, METRIC_LABEL};
use crate::mixgen::{synthesize, Corpus, Manifest};
use crate::model::{separate, Checkpoint, Model};

/// What produces the estimates being scored.
#[derive(Debug, Clone, Copy)]
pub enum Estimator<'a> {
    Model(&'a Model),
    /// The true sources; a self-test of the scoring path.
    References,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EvalOptions {
    /// Also score the oracle ideal-ratio-mask separation.
    pub oracle_irm: bool,
    pub stft: StftParams,
}

/// Scores of one set of estimates for one mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageScore {
    /// 1-based separation stage; 0 for the oracle mask.
    pub stage: usize,
    /// Estimate index → reference index.
    pub perm: Vec<usize>,
    /// Per reference.
    pub si_sdr: Vec<f64>,
    /// Per reference.
    pub sdri: Vec<f64>,
    pub mean_sdri: f64,
}

impl StageScore {
    fn new(stage: usize, r: SdriResult) -> Self {
        Self {
            stage,
            perm: r.perm,
            si_sdr: r.si_sdr,
            sdri: r.improvement,
            mean_sdri: r.mean_improvement,
        }
    }
}

/// One line of the per-mixture report. The top-level scores are the final
/// stage's.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub perm: Vec<usize>,
    pub si_sdr: Vec<f64>,
    pub sdri: Vec<f64>,
    pub mean_sdri: f64,
    pub mixture_si_sdr: Vec<f64>,
    pub stages: Vec<StageScore>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_irm: Option<StageScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    /// Method label, e.g. the model spec text.
    pub method: String,
    pub metric: String,
    pub count: usize,
    pub mean_sdri: f64,
    /// Mean SDRi of every stage, stage 1 first.
    pub stage_means: Vec<f64>,
    pub mean_mixture_si_sdr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_irm_mean_sdri: Option<f64>,
}

impl EvalSummary {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serialises") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub summary: EvalSummary,
}

pub const ROWS_FILE: &str = "per_mixture.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";

impl EvalReport {
    pub fn rows_jsonl(&self) -> String {
        self.rows
            .iter()
            .map(|r| serde_json::to_string(r).expect("row serialises") + "\n")
            .collect()
    }

    /// Writes `per_mixture.jsonl` and `summary.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>, TrainError> {
        fs::create_dir_all(dir).map_err(|e| TrainError::io(dir, e))?;
        let rows = dir.join(ROWS_FILE);
        let summary = dir.join(SUMMARY_FILE);
        fs::write(&rows, self.rows_jsonl()).map_err(|e| TrainError::io(&rows, e))?;
        fs::write(&summary, self.summary.to_json()).map_err(|e| TrainError::io(&summary, e))?;
        Ok(vec![rows, summary])
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

/// Separates and scores every mixture of `manifest`, every stage included.
pub fn evaluate(
    estimator: Estimator<'_>,
    manifest: &Manifest,
    corpus: &dyn Corpus,
    opts: EvalOptions,
) -> Result<EvalReport, TrainError> {
    if manifest.records.is_empty() {
        return Err(TrainError::Data("empty test manifest".into()));
    }
    if let Estimator::Model(m) = estimator {
        m.validate()?;
        if m.spec.num_sources != manifest.num_sources() {
            return Err(TrainError::Data(format!(
                "model separates {} sources, manifest has {}",
                m.spec.num_sources,
                manifest.num_sources()
            )));
        }
    }
    let rows = manifest
        .records
        .par_iter()
        .map(|rec| {
            let mix = synthesize(rec, corpus)?;
            let stage_estimates: Vec<Vec<Waveform>> = match estimator {
                Estimator::Model(m) => separate(&mix.mixture, m)?.stages,
                Estimator::References => vec![mix.sources.clone()],
            };
            let stages = stage_estimates
                .iter()
                .enumerate()
                .map(|(k, est)| Ok(StageScore::new(k + 1, sdri(est, &mix.sources, &mix.mixture)?)))
                .collect::<Result<Vec<_>, TrainError>>()?;
            let mixture_si_sdr = sdri(&mix.sources, &mix.sources, &mix.mixture)?.mixture_si_sdr;
            let oracle_irm = if opts.oracle_irm {
                let est = oracle_irm_separate(&mix.mixture, &mix.sources, opts.stft)?;
                Some(StageScore::new(0, sdri(&est, &mix.sources, &mix.mixture)?))
            } else {
                None
            };
            let last = stages.last().expect("at least one stage").clone();
            Ok(EvalRow {
                id: rec.id.clone(),
                perm: last.perm,
                si_sdr: last.si_sdr,
                sdri: last.sdri,
                mean_sdri: last.mean_sdri,
                mixture_si_sdr,
                stages,
                oracle_irm,
            })
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    let n_stages = rows[0].stages.len();
    let summary = EvalSummary {
        method: match estimator {
            Estimator::Model(m) => m.spec.text(),
            Estimator::References => "references (self-test)".into(),
        },
        metric: METRIC_LABEL.into(),
        count: rows.len(),
        mean_sdri: mean(rows.iter().map(|r| r.mean_sdri)),
        stage_means: (0..n_stages)
            .map(|k| mean(rows.iter().map(|r| r.stages[k].mean_sdri)))
            .collect(),
        mean_mixture_si_sdr: mean(rows.iter().flat_map(|r| r.mixture_si_sdr.iter().copied())),
        oracle_irm_mean_sdri: opts
            .oracle_irm
            .then(|| mean(rows.iter().filter_map(|r| r.oracle_irm.as_ref().map(|o| o.mean_sdri)))),
    };
    Ok(EvalReport { rows, summary })
}

/// [`evaluate`] with the model assembled from a checkpoint bundle; fails on
/// an incomplete bundle.
pub fn evaluate_checkpoint(
    ck: &Checkpoint,
    manifest: &Manifest,
    corpus: &dyn Corpus,
    opts: EvalOptions,
) -> Result<EvalReport, TrainError> {
    let model = ck.model()?;
    evaluate(Estimator::Model(&model), manifest, corpus, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::SI_SDR_CAP_DB;
    use crate::mixgen::{build_manifest, make_toy_corpus, split_pool, Split};
    use crate::model::{init_component, parse_model_spec, Component, ModelDims};

    fn setup() -> (crate::mixgen::ToyCorpus, Manifest) {
        let corpus = make_toy_corpus(5, 3, 0.1, 2).unwrap();
        let pools = split_pool(&corpus.pool(), 2, 0.3).unwrap();
        let m = build_manifest(&corpus, &pools.test, Split::Test, 2, 6, (0.0, 5.0), 4).unwrap();
        (corpus, m)
    }

    #[test]
    fn self_test_gives_cap_minus_mixture() {
        let (corpus, m) = setup();
        let rep = evaluate(Estimator::References, &m, &corpus, EvalOptions::default()).unwrap();
        assert_eq!(rep.rows.len(), m.records.len());
        for r in &rep.rows {
            for (d, base) in r.sdri.iter().zip(&r.mixture_si_sdr) {
                assert_eq!(*d, SI_SDR_CAP_DB - base);
            }
        }
        let want = SI_SDR_CAP_DB - rep.summary.mean_mixture_si_sdr;
        assert!((rep.summary.mean_sdri - want).abs() < 1e-9);
        assert_eq!(rep.summary.metric, "SI-SDRi");
        assert!(rep.summary.oracle_irm_mean_sdri.is_none());
        assert!(rep.rows.iter().all(|r| r.oracle_irm.is_none()));
    }

    #[test]
    fn model_report_has_every_stage_and_oracle_row() {
        let (corpus, m) = setup();
        let spec = parse_model_spec("TasTas(I, 1, 1)").unwrap().with_sources(2).with_dims(ModelDims {
            basis: 8,
            kernel: 8,
            feature: 8,
            chunk: 8,
            hidden: 4,
            embed: 4,
            id_hidden: 4,
        });
        let mut ck = Checkpoint {
            spec: spec.clone(),
            init_seed: 1,
            produced_by: "stage1".into(),
            components: vec![],
        };
        for name in ["idnet", "stage1"] {
            ck.put(Component {
                name: name.into(),
                params: init_component(&spec, name, 1, 3).unwrap(),
                frozen: true,
                trained_in: name.into(),
            });
        }
        let opts = EvalOptions {
            oracle_irm: true,
            ..EvalOptions::default()
        };
        assert!(evaluate_checkpoint(&ck, &m, &corpus, opts).is_err());
        ck.put(Component {
            name: "stage2".into(),
            params: init_component(&spec, "stage2", 1, 0).unwrap(),
            frozen: true,
            trained_in: "stage2".into(),
        });
        let rep = evaluate_checkpoint(&ck, &m, &corpus, opts).unwrap();
        assert_eq!(rep.rows.len(), 6);
        assert_eq!(rep.summary.stage_means.len(), 2);
        assert_eq!(rep.summary.mean_sdri, rep.summary.stage_means[1]);
        assert!(rep.summary.oracle_irm_mean_sdri.unwrap() > rep.summary.mean_sdri);
        let back: Vec<EvalRow> = rep
            .rows_jsonl()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(back, rep.rows);
        assert_eq!(EvalSummary::from_json(&rep.summary.to_json()).unwrap(), rep.summary);
    }
}
