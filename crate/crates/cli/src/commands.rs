use std::path::{Path, PathBuf};

use tastas_core::mixgen::{
    build_manifest, check_speaker_disjoint, make_toy_corpus, split_pool, write_wav_tree, Corpus,
    DirCorpus, Manifest, Split,
};
use tastas_core::model::{parse_model_spec, Checkpoint};
use tastas_core::report::ComparisonTable;
use tastas_core::trainer::{
    evaluate, evaluate_checkpoint, manifest_digest, naive_joint_train, run_multistep,
    Control, EpochRecord, EvalOptions, EvalSummary, Estimator, RunOptions, TrainConfig, TrainData,
    ENV_PREFIX,
};

use crate::provenance::Provenance;
use crate::{CommandResult, EvalArgs, ReportArgs, SynthArgs, TrainArgs};

pub const TABLE_TEXT: &str = "table.txt";
pub const TABLE_JSON: &str = "table.json";

macro_rules! tryrun {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(e) => return CommandResult::runtime(e),
        }
    };
}

fn split_seed(seed: u64, split: Split) -> u64 {
    // Distinct but stable streams per split.
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ match split {
            Split::Train => 0x7472,
            Split::Valid => 0x7661,
            Split::Test => 0x7465,
        }
}

pub fn synth(a: &SynthArgs, argv: &[String]) -> CommandResult {
    let (low, high) = (a.snr[0], a.snr[1]);
    if !(low <= high) {
        return CommandResult::usage(format!("--snr: low {low} exceeds high {high}"));
    }
    if a.num_sources < 2 {
        return CommandResult::usage("--s must be at least 2");
    }
    if !(0.0..1.0).contains(&a.valid_fraction) {
        return CommandResult::usage("--valid-fraction must lie in [0, 1)");
    }
    let corpus: Box<dyn Corpus> = match &a.corpus {
        Some(dir) => {
            let dir = tryrun!(std::fs::canonicalize(dir).map_err(|e| format!("{}: {e}", dir.display())));
            Box::new(tryrun!(DirCorpus::open(dir)))
        }
        None => Box::new(tryrun!(make_toy_corpus(a.speakers, a.utts, a.duration, a.seed))),
    };
    let n_test = a.test_speakers.unwrap_or(a.num_sources);
    let pools = tryrun!(split_pool(&corpus.pool(), n_test, a.valid_fraction));
    let plan = [
        (Split::Train, &pools.train, a.train),
        (Split::Valid, &pools.valid, a.valid),
        (Split::Test, &pools.test, a.test),
    ];
    let mut manifests = Vec::new();
    for (split, pool, n) in plan {
        let m = tryrun!(build_manifest(
            corpus.as_ref(),
            pool,
            split,
            a.num_sources,
            n,
            (low, high),
            split_seed(a.seed, split),
        ));
        manifests.push(m);
    }
    tryrun!(check_speaker_disjoint(&manifests[0], &manifests[2], corpus.as_ref()));
    tryrun!(check_speaker_disjoint(&manifests[1], &manifests[2], corpus.as_ref()));

    let mut artifacts = Vec::new();
    let mut prov = Provenance::new(argv, Some(a.seed));
    tryrun!(std::fs::create_dir_all(&a.out));
    let mut trees = 0;
    for m in &manifests {
        let path = a.out.join(format!("{}.jsonl", m.split().as_str()));
        tryrun!(m.write(&path));
        prov = prov.with_manifest(m.split().as_str(), manifest_digest(m));
        artifacts.push(path);
        if !a.no_wav {
            tryrun!(write_wav_tree(m, corpus.as_ref(), &a.out));
            trees += m.records.len();
        }
    }
    artifacts.push(tryrun!(prov.write(&a.out)));
    CommandResult::ok(
        format!(
            "synth: {} train, {} valid, {} test mixtures of {} sources; {trees} WAV trees in {}",
            manifests[0].records.len(),
            manifests[1].records.len(),
            manifests[2].records.len(),
            a.num_sources,
            a.out.display()
        ),
        artifacts,
    )
}

fn train_flags(a: &TrainArgs) -> Result<Vec<(String, String)>, String> {
    let mut flags = Vec::new();
    for kv in &a.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
        flags.push((k.trim().to_string(), v.trim().to_string()));
    }
    let path = |p: &PathBuf| p.display().to_string();
    if let Some(s) = &a.spec {
        flags.push(("model_spec".into(), s.clone()));
    }
    if a.remix {
        flags.push(("online_remix".into(), "true".into()));
    }
    if let Some(p) = &a.train_manifest {
        flags.push(("train_manifest".into(), path(p)));
    }
    if let Some(p) = &a.valid_manifest {
        flags.push(("valid_manifest".into(), path(p)));
    }
    if let Some(p) = &a.out {
        flags.push(("out_dir".into(), path(p)));
    }
    if let Some(s) = a.seed {
        flags.push(("seed".into(), s.to_string()));
    }
    Ok(flags)
}

// Per-epoch progress is already logged by the trainer.
fn keep_going(_: &EpochRecord) -> Control {
    Control::Continue
}

pub fn train(a: &TrainArgs, argv: &[String]) -> CommandResult {
    let flags = match train_flags(a) {
        Ok(f) => f,
        Err(e) => return CommandResult::usage(e),
    };
    let env = std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX));
    let cfg = match TrainConfig::layered(a.config.as_deref(), env, &flags) {
        Ok(c) => c,
        Err(e) => return CommandResult::usage(format!("config: {e}")),
    };
    if let Err(e) = parse_model_spec(&cfg.model_spec) {
        return CommandResult::usage(format!("model spec: {e}"));
    }
    let (Some(train_m), Some(valid_m)) = (&cfg.train_manifest, &cfg.valid_manifest) else {
        return CommandResult::usage("train and valid manifests are required (flags, config or env)");
    };
    let data = tryrun!(TrainData::load(Path::new(train_m), Path::new(valid_m)));
    let out = PathBuf::from(&cfg.out_dir);
    let mut prov = Provenance::new(argv, Some(cfg.seed));
    for (name, d) in ["train", "valid"].iter().zip(&data.manifest_digests) {
        prov = prov.with_manifest(*name, d.clone());
    }
    tryrun!(std::fs::create_dir_all(&out));
    let cfg_path = out.join("config.txt");
    tryrun!(std::fs::write(&cfg_path, cfg.to_kv_text()));
    let mut artifacts = vec![cfg_path];
    let summary = if a.naive {
        let (ck, report) = tryrun!(naive_joint_train(&cfg, &data, Some(&out), &mut keep_going));
        artifacts.push(out.join("naive.ckpt"));
        artifacts.push(out.join(tastas_core::trainer::TRACE_FILE));
        format!(
            "train: naive joint {} finished after {} epochs, best valid loss {:.4}",
            ck.spec,
            report.records.len(),
            report.best_valid
        )
    } else {
        let opts = RunOptions {
            out_dir: out.clone(),
            resume: a.resume,
        };
        let outcome = tryrun!(run_multistep(&cfg, &data, &opts, &mut keep_going));
        artifacts.extend(outcome.checkpoint_paths.iter().cloned());
        artifacts.push(out.join(tastas_core::trainer::TRACE_FILE));
        artifacts.push(out.join(tastas_core::trainer::STATE_FILE));
        format!(
            "train: {} finished steps {}; final checkpoint {}",
            outcome.checkpoint.spec,
            outcome.state.completed.join(", "),
            outcome
                .checkpoint_paths
                .last()
                .map_or("-".into(), |p| p.display().to_string())
        )
    };
    artifacts.push(tryrun!(prov.write(&out)));
    if let Some(missing) = artifacts.iter().find(|p| !p.exists()) {
        return CommandResult::runtime(format!("expected artifact missing: {}", missing.display()));
    }
    CommandResult::ok(summary, artifacts)
}

pub fn eval(a: &EvalArgs, argv: &[String]) -> CommandResult {
    let manifest = tryrun!(Manifest::read(&a.manifest));
    let corpus = tryrun!(tastas_core::mixgen::open_corpus(
        &manifest.header.protocol.corpus_id
    ));
    let opts = EvalOptions {
        oracle_irm: a.oracle_irm,
        ..Default::default()
    };
    let report = if a.self_test {
        tryrun!(evaluate(Estimator::References, &manifest, corpus.as_ref(), opts))
    } else {
        let path = a.checkpoint.as_ref().expect("clap requires it without --self-test");
        let ck = tryrun!(Checkpoint::load(path));
        tryrun!(evaluate_checkpoint(&ck, &manifest, corpus.as_ref(), opts))
    };
    let mut artifacts = tryrun!(report.write(&a.out));
    let prov = Provenance::new(argv, None).with_manifest("test", manifest_digest(&manifest));
    artifacts.push(tryrun!(prov.write(&a.out)));
    let s = &report.summary;
    let stages: Vec<String> = s.stage_means.iter().map(|v| format!("{v:.2}")).collect();
    let mut line = format!(
        "eval: {} on {} mixtures: mean {} {:.2} dB (stages {})",
        s.method,
        s.count,
        s.metric,
        s.mean_sdri,
        stages.join(" / ")
    );
    if let Some(irm) = s.oracle_irm_mean_sdri {
        line.push_str(&format!(", IRM {irm:.2} dB"));
    }
    CommandResult::ok(line, artifacts)
}

pub fn report(a: &ReportArgs, argv: &[String]) -> CommandResult {
    let mut summaries = Vec::new();
    for p in &a.summaries {
        let text = tryrun!(std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display())));
        summaries.push(tryrun!(
            EvalSummary::from_json(&text).map_err(|e| format!("{}: malformed summary: {e}", p.display()))
        ));
    }
    let table = ComparisonTable::from_summaries(&summaries);
    let mut artifacts = Vec::new();
    if let Some(dir) = &a.out {
        tryrun!(std::fs::create_dir_all(dir));
        let t = dir.join(TABLE_TEXT);
        let j = dir.join(TABLE_JSON);
        tryrun!(std::fs::write(&t, table.to_text()));
        tryrun!(std::fs::write(&j, table.to_json()));
        artifacts.extend([t, j]);
        artifacts.push(tryrun!(Provenance::new(argv, None).write(dir)));
    }
    let body = if a.json { table.to_json() } else { table.to_text() };
    CommandResult::ok(body.trim_end().to_string(), artifacts)
}
