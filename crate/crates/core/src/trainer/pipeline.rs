use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::{crop_mixture, crop_waveform, derive_seed, LabeledUtterance, TrainData};
use super::fit::{collect_grads, fit, parallel_mean, step_stream, with_workers, Objective};
use super::loss::{identity_consistency_var, upit_sisdr_var};
use super::{Control, EpochRecord, StepReport, TrainConfig, TrainError};
use crate::graph::{Graph, Var};
use crate::mixgen::{online_remix, Mixture};
use crate::model::network::{classify_var, row};
use crate::model::{
    bind, forward, id_embed, Bound, id_embed_var, init_component, parse_model_spec, stage_name,
    Checkpoint, Component, ModelSpec, ModelVars, ParamSet, IDNET,
};

pub const TRACE_FILE: &str = "loss_trace.csv";
pub const STATE_FILE: &str = "train_state.json";
const NAIVE: &str = "naive";
const REMIX_STREAM: u64 = 0x0072_656d_6978;

type Observer<'o> = &'o mut (dyn FnMut(&EpochRecord) -> Control + Send);

/// The spec a config describes, sized for `data`.
pub fn model_spec_for(cfg: &TrainConfig, data: &TrainData) -> Result<ModelSpec, TrainError> {
    let spec = parse_model_spec(&cfg.model_spec)?
        .with_sources(data.num_sources)
        .with_dims(cfg.dims)
        .with_sample_rate(data.sample_rate);
    spec.validate()?;
    Ok(spec)
}

/// Training steps in execution order: `idnet` (identity-aware specs only),
/// then `stage1 ..= stageN`.
pub fn step_names(spec: &ModelSpec) -> Vec<String> {
    let mut steps = Vec::new();
    if spec.identity_aware {
        steps.push(IDNET.to_string());
    }
    steps.extend((1..=spec.num_stages()).map(stage_name));
    steps
}

struct IdNetObjective<'a> {
    cfg: &'a TrainConfig,
    data: &'a TrainData,
}

/// Builds embed → classify for one utterance; returns the graph, the bound
/// parameters, the logits and the cross-entropy loss.
fn utterance_graph(
    params: &ParamSet,
    utt: &LabeledUtterance,
    segment: usize,
    seed: Option<u64>,
    trainable: bool,
) -> Result<(Graph, Bound, Var, Var), TrainError> {
    let w = crop_waveform(&utt.wave, segment, seed);
    let mut g = Graph::new();
    let p = bind(&mut g, params, trainable);
    let x = g.constant(row(&w.samples));
    let e = id_embed_var(&mut g, &p, x)?;
    let logits = classify_var(&mut g, &p, e);
    let loss = g.cross_entropy(logits, &[utt.label]);
    Ok((g, p, logits, loss))
}

impl Objective for IdNetObjective<'_> {
    fn num_items(&self) -> usize {
        self.data.id_train.len()
    }

    fn batch_items(
        &self,
        params: &[ParamSet],
        batch: &[usize],
        epoch: usize,
        _: usize,
    ) -> Result<Vec<(f64, Vec<ParamSet>)>, TrainError> {
        let stream = step_stream(IDNET);
        batch
            .par_iter()
            .map(|&i| {
                let seed = derive_seed(self.cfg.seed, &[stream, epoch as u64, i as u64]);
                let utt = &self.data.id_train[i];
                let (g, p, _, loss) =
                    utterance_graph(&params[0], utt, self.cfg.segment_len, Some(seed), true)?;
                let mut grads = g.backward(loss);
                Ok((g.scalar(loss), vec![collect_grads(&mut grads, &p, &params[0])]))
            })
            .collect()
    }

    fn valid_loss(&self, params: &[ParamSet]) -> Result<f64, TrainError> {
        parallel_mean(self.data.id_valid.len(), |i| {
            let (g, _, _, loss) = utterance_graph(
                &params[0],
                &self.data.id_valid[i],
                self.cfg.segment_len,
                None,
                false,
            )?;
            Ok(g.scalar(loss))
        })
    }
}

/// Fraction of `utts` whose leading segment the ID-Net classifies correctly.
pub fn idnet_accuracy(
    idnet: &ParamSet,
    utts: &[LabeledUtterance],
    segment: usize,
) -> Result<f64, TrainError> {
    parallel_mean(utts.len(), |i| {
        let (g, _, logits, _) = utterance_graph(idnet, &utts[i], segment, None, false)?;
        let (pred, _) = g
            .value(logits)
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |b, (k, &x)| if x > b.1 { (k, x) } else { b });
        Ok(if pred == utts[i].label { 1.0 } else { 0.0 })
    })
}

/// Separation objective for stage `upto`, either with everything before it
/// frozen, or (naive mode) with every component trainable.
struct SeparationObjective<'a> {
    cfg: &'a TrainConfig,
    data: &'a TrainData,
    spec: &'a ModelSpec,
    upto: usize,
    frozen_idnet: Option<&'a ParamSet>,
    frozen_stages: &'a [ParamSet],
    naive: bool,
    stream: u64,
}

impl SeparationObjective<'_> {
    fn bind_vars(&self, g: &mut Graph, params: &[ParamSet], trainable: bool) -> (ModelVars, Vec<usize>) {
        if self.naive {
            let mut it = params.iter();
            let idnet = self
                .spec
                .identity_aware
                .then(|| bind(g, it.next().expect("idnet params"), trainable));
            let stages = it.map(|p| bind(g, p, trainable)).collect();
            let vars = ModelVars { idnet, stages };
            (vars, (0..params.len()).collect())
        } else {
            let idnet = self.frozen_idnet.map(|p| bind(g, p, false));
            let mut stages: Vec<_> = self.frozen_stages.iter().map(|p| bind(g, p, false)).collect();
            stages.push(bind(g, &params[0], trainable));
            (ModelVars { idnet, stages }, vec![0])
        }
    }

    fn item_loss(&self, g: &mut Graph, vars: &ModelVars, m: &Mixture) -> Result<Var, TrainError> {
        let x = g.constant(row(&m.mixture.samples));
        let out = forward(g, self.spec, vars, x, self.upto)?;
        let waves = &out[self.upto - 1].waves;
        let (mut loss, perm) = upit_sisdr_var(g, waves, &m.sources)?;
        if !self.naive && self.spec.identity_aware && self.cfg.lambda_id > 0.0 {
            let idnet = self.frozen_idnet.expect("checked by train_stage");
            let embs = m
                .sources
                .iter()
                .map(|s| id_embed(s, idnet))
                .collect::<Result<Vec<_>, _>>()?;
            let bound = vars.idnet.as_ref().expect("bound");
            let id = identity_consistency_var(g, bound, waves, &embs, &perm)?;
            let id = g.scale(id, self.cfg.lambda_id);
            loss = g.add(loss, id);
        }
        Ok(loss)
    }

    fn bound_of<'v>(&self, vars: &'v ModelVars, slot: usize) -> &'v Bound {
        if self.naive {
            match (self.spec.identity_aware, slot) {
                (true, 0) => vars.idnet.as_ref().expect("idnet"),
                (true, s) => &vars.stages[s - 1],
                (false, s) => &vars.stages[s],
            }
        } else {
            vars.stages.last().expect("stage")
        }
    }
}

impl Objective for SeparationObjective<'_> {
    fn num_items(&self) -> usize {
        self.data.train.len()
    }

    fn batch_items(
        &self,
        params: &[ParamSet],
        batch: &[usize],
        epoch: usize,
        batch_no: usize,
    ) -> Result<Vec<(f64, Vec<ParamSet>)>, TrainError> {
        let mut items: Vec<Mixture> = batch
            .iter()
            .map(|&i| {
                let seed = derive_seed(self.cfg.seed, &[self.stream, epoch as u64, i as u64]);
                crop_mixture(&self.data.train.items[i], self.cfg.segment_len, Some(seed))
            })
            .collect();
        if self.cfg.online_remix {
            let seed = derive_seed(
                self.cfg.seed,
                &[self.stream, epoch as u64, batch_no as u64, REMIX_STREAM],
            );
            items = online_remix(&items, seed)?;
        }
        items
            .par_iter()
            .map(|m| {
                let mut g = Graph::new();
                let (vars, slots) = self.bind_vars(&mut g, params, true);
                let loss = self.item_loss(&mut g, &vars, m)?;
                let mut grads = g.backward(loss);
                let gs = slots
                    .iter()
                    .map(|&s| collect_grads(&mut grads, self.bound_of(&vars, s), &params[s]))
                    .collect();
                Ok((g.scalar(loss), gs))
            })
            .collect()
    }

    fn valid_loss(&self, params: &[ParamSet]) -> Result<f64, TrainError> {
        parallel_mean(self.data.valid.len(), |i| {
            let m = crop_mixture(&self.data.valid.items[i], self.cfg.segment_len, None);
            let mut g = Graph::new();
            let (vars, _) = self.bind_vars(&mut g, params, false);
            let loss = self.item_loss(&mut g, &vars, &m)?;
            Ok(g.scalar(loss))
        })
    }
}

/// Step 1: trains the ID-Net as a speaker classifier and freezes it.
pub fn train_idnet(
    cfg: &TrainConfig,
    data: &TrainData,
    observer: Observer<'_>,
) -> Result<(Checkpoint, StepReport), TrainError> {
    cfg.validate()?;
    let spec = model_spec_for(cfg, data)?;
    if data.speakers.len() < 2 {
        return Err(TrainError::Data(format!(
            "ID-Net needs at least 2 training speakers, found {}",
            data.speakers.len()
        )));
    }
    if data.id_train.is_empty() || data.id_valid.is_empty() {
        return Err(TrainError::Data("no labelled utterances for the ID-Net".into()));
    }
    let mut params = vec![init_component(&spec, IDNET, cfg.seed, data.speakers.len())?];
    let obj = IdNetObjective { cfg, data };
    let report = with_workers(cfg.workers, || fit(cfg, IDNET, &mut params, &obj, observer))?;
    let ck = Checkpoint {
        spec,
        init_seed: cfg.seed,
        produced_by: IDNET.into(),
        components: vec![Component {
            name: IDNET.into(),
            params: params.pop().expect("one set"),
            frozen: true,
            trained_in: IDNET.into(),
        }],
    };
    Ok((ck, report))
}

fn frozen_dependency<'c>(deps: &'c Checkpoint, name: &str) -> Result<&'c Component, TrainError> {
    match deps.component(name) {
        Some(c) if c.frozen => Ok(c),
        Some(_) => Err(TrainError::MissingDependency(format!("{name} is not frozen"))),
        None => Err(TrainError::MissingDependency(format!("{name} is missing"))),
    }
}

fn dependency_names(spec: &ModelSpec, k: usize) -> Vec<String> {
    let mut names = Vec::new();
    if spec.identity_aware {
        names.push(IDNET.to_string());
    }
    names.extend((1..k).map(stage_name));
    names
}

/// Steps 2 and later: trains stage `k` with all earlier components frozen,
/// verifying their digests before and after.
pub fn train_stage(
    k: usize,
    deps: &Checkpoint,
    data: &TrainData,
    cfg: &TrainConfig,
    observer: Observer<'_>,
) -> Result<(Checkpoint, StepReport), TrainError> {
    cfg.validate()?;
    let spec = &deps.spec;
    if k == 0 || k > spec.num_stages() {
        return Err(TrainError::Contract(format!("{spec} has no stage {k}")));
    }
    if spec.num_sources != data.num_sources {
        return Err(TrainError::Data(format!(
            "checkpoint separates {} sources, data has {}",
            spec.num_sources, data.num_sources
        )));
    }
    let dep_names = dependency_names(spec, k);
    let mut before = BTreeMap::new();
    for n in &dep_names {
        before.insert(n.clone(), frozen_dependency(deps, n)?.params.digest());
    }
    let frozen_idnet = if spec.identity_aware {
        Some(&frozen_dependency(deps, IDNET)?.params)
    } else {
        None
    };
    let frozen_stages: Vec<ParamSet> = (1..k)
        .map(|j| frozen_dependency(deps, &stage_name(j)).map(|c| c.params.clone()))
        .collect::<Result<_, _>>()?;
    let name = stage_name(k);
    let mut params = vec![init_component(spec, &name, deps.init_seed, 0)?];
    let obj = SeparationObjective {
        cfg,
        data,
        spec,
        upto: k,
        frozen_idnet,
        frozen_stages: &frozen_stages,
        naive: false,
        stream: step_stream(&name),
    };
    let report = with_workers(cfg.workers, || fit(cfg, &name, &mut params, &obj, observer))?;
    let mut out = deps.clone();
    out.put(Component {
        name: name.clone(),
        params: params.pop().expect("one set"),
        frozen: true,
        trained_in: name.clone(),
    });
    out.produced_by = name;
    verify_digests(&out, &before)?;
    Ok((out, report))
}

fn verify_digests(ck: &Checkpoint, expected: &BTreeMap<String, String>) -> Result<(), TrainError> {
    for (name, want) in expected {
        let found = ck
            .digest(name)
            .ok_or_else(|| TrainError::MissingDependency(format!("{name} is missing")))?;
        if &found != want {
            return Err(TrainError::DigestMismatch {
                component: name.clone(),
                expected: want.clone(),
                found,
            });
        }
    }
    Ok(())
}

/// Resumable progress of [`run_multistep`], persisted as JSON after every
/// step transition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub spec: String,
    pub num_sources: usize,
    pub completed: Vec<String>,
    /// Step in progress, or `done`.
    pub current: String,
    /// Epochs run by the most recently completed step.
    pub epoch: usize,
    pub best_valid: BTreeMap<String, f64>,
    pub frozen_digests: BTreeMap<String, String>,
}

impl TrainState {
    pub fn read(path: &Path) -> Result<Self, TrainError> {
        let text = fs::read_to_string(path).map_err(|e| TrainError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| TrainError::Resume(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, path: &Path) -> Result<(), TrainError> {
        let text = serde_json::to_string_pretty(self).expect("state serialises");
        write_atomic(path, text.as_bytes())
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), TrainError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| TrainError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| TrainError::io(path, e))
}

#[derive(Serialize, Deserialize)]
struct TraceRow {
    epoch: usize,
    train_loss: f64,
    valid_loss: f64,
    step: String,
}

/// CSV with columns `epoch,train_loss,valid_loss,step`.
pub fn trace_csv(records: &[EpochRecord]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(TraceRow {
            epoch: r.epoch,
            train_loss: r.train_loss,
            valid_loss: r.valid_loss,
            step: r.step.clone(),
        })
        .expect("in-memory csv");
    }
    if records.is_empty() {
        w.write_record(["epoch", "train_loss", "valid_loss", "step"])
            .expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8")
}

/// Parses [`trace_csv`] output. `best_valid` is rebuilt per step and `lr`,
/// which the file does not carry, is NaN.
pub fn read_trace_csv(text: &str) -> Result<Vec<EpochRecord>, TrainError> {
    let mut out: Vec<EpochRecord> = Vec::new();
    for row in csv::Reader::from_reader(text.as_bytes()).deserialize::<TraceRow>() {
        let row = row.map_err(|e| TrainError::Resume(format!("loss trace: {e}")))?;
        let best_valid = match out.last() {
            Some(p) if p.step == row.step => p.best_valid.min(row.valid_loss),
            _ => row.valid_loss,
        };
        out.push(EpochRecord {
            step: row.step,
            epoch: row.epoch,
            train_loss: row.train_loss,
            valid_loss: row.valid_loss,
            best_valid,
            lr: f64::NAN,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Continue from the last completed step found in `out_dir`.
    pub resume: bool,
}

#[derive(Debug, Clone)]
pub struct MultistepOutcome {
    pub checkpoint: Checkpoint,
    /// Every epoch of every step, including steps restored on resume.
    pub trace: Vec<EpochRecord>,
    /// Reports of the steps run in this invocation.
    pub reports: Vec<StepReport>,
    pub state: TrainState,
    pub checkpoint_paths: Vec<PathBuf>,
}

pub fn checkpoint_path(out_dir: &Path, step: &str) -> PathBuf {
    out_dir.join(format!("{step}.ckpt"))
}

/// The full multi-step pipeline. Each finished step is frozen, written to
/// `<out>/<step>.ckpt` (a bundle of everything trained so far) and recorded
/// in the state file before the next step starts.
pub fn run_multistep(
    cfg: &TrainConfig,
    data: &TrainData,
    opts: &RunOptions,
    observer: Observer<'_>,
) -> Result<MultistepOutcome, TrainError> {
    cfg.validate()?;
    let spec = model_spec_for(cfg, data)?;
    let steps = step_names(&spec);
    let out = &opts.out_dir;
    fs::create_dir_all(out).map_err(|e| TrainError::io(out, e))?;
    let state_path = out.join(STATE_FILE);
    let trace_path = out.join(TRACE_FILE);

    let fresh_state = TrainState {
        spec: spec.text(),
        num_sources: spec.num_sources,
        completed: Vec::new(),
        current: steps[0].clone(),
        epoch: 0,
        best_valid: BTreeMap::new(),
        frozen_digests: BTreeMap::new(),
    };
    let fresh_bundle = Checkpoint {
        spec: spec.clone(),
        init_seed: cfg.seed,
        produced_by: "init".into(),
        components: Vec::new(),
    };
    let (mut state, mut bundle, mut trace) = if opts.resume && state_path.exists() {
        let state = TrainState::read(&state_path)?;
        if state.spec != spec.text() || state.num_sources != spec.num_sources {
            return Err(TrainError::Resume(format!(
                "state is for {} with {} sources, config asks for {} with {}",
                state.spec, state.num_sources, spec, spec.num_sources
            )));
        }
        let bundle = match state.completed.last() {
            Some(last) => Checkpoint::load(&checkpoint_path(out, last))?,
            None => fresh_bundle,
        };
        if bundle.spec != spec {
            return Err(TrainError::Resume("checkpoint spec differs from config".into()));
        }
        verify_digests(&bundle, &state.frozen_digests)?;
        let trace = match fs::read_to_string(&trace_path) {
            Ok(text) => read_trace_csv(&text)?
                .into_iter()
                .filter(|r| state.completed.contains(&r.step))
                .collect(),
            Err(_) => Vec::new(),
        };
        log::info!("resuming after steps {:?}", state.completed);
        (state, bundle, trace)
    } else {
        (fresh_state, fresh_bundle, Vec::new())
    };

    let mut reports = Vec::new();
    let mut paths: Vec<PathBuf> = state
        .completed
        .iter()
        .map(|s| checkpoint_path(out, s))
        .collect();
    let pending: Vec<String> = steps
        .iter()
        .filter(|s| !state.completed.contains(s))
        .cloned()
        .collect();
    for step in &pending {
        state.current = step.clone();
        state.write(&state_path)?;
        verify_digests(&bundle, &state.frozen_digests)?;
        log::info!("step {step}");
        let (next, report) = if step == IDNET {
            let (ck, report) = train_idnet(cfg, data, observer)?;
            let mut next = bundle.clone();
            next.put(ck.components.into_iter().next().expect("idnet"));
            next.produced_by = IDNET.into();
            (next, report)
        } else {
            let k: usize = step["stage".len()..].parse().expect("stage step");
            train_stage(k, &bundle, data, cfg, observer)?
        };
        verify_digests(&next, &state.frozen_digests)?;
        let path = checkpoint_path(out, step);
        next.save(&path)?;
        bundle = next;
        trace.extend(report.records.iter().cloned());
        write_atomic(&trace_path, trace_csv(&trace).as_bytes())?;
        state.completed.push(step.clone());
        state.epoch = report.records.len();
        state.best_valid.insert(step.clone(), report.best_valid);
        state
            .frozen_digests
            .insert(step.clone(), bundle.digest(step).expect("just trained"));
        state.write(&state_path)?;
        paths.push(path);
        reports.push(report);
    }
    state.current = "done".into();
    state.write(&state_path)?;
    Ok(MultistepOutcome {
        checkpoint: bundle,
        trace,
        reports,
        state,
        checkpoint_paths: paths,
    })
}

/// Trains every component jointly from scratch on the final-stage PIT loss.
/// Nothing is frozen, so the identity-consistency term is not used. Writes
/// `naive.ckpt` and the loss trace when `out_dir` is given.
pub fn naive_joint_train(
    cfg: &TrainConfig,
    data: &TrainData,
    out_dir: Option<&Path>,
    observer: Observer<'_>,
) -> Result<(Checkpoint, StepReport), TrainError> {
    cfg.validate()?;
    let spec = model_spec_for(cfg, data)?;
    let mut names = Vec::new();
    let mut params = Vec::new();
    if spec.identity_aware {
        names.push(IDNET.to_string());
        params.push(init_component(&spec, IDNET, cfg.seed, data.speakers.len().max(1))?);
    }
    for k in 1..=spec.num_stages() {
        names.push(stage_name(k));
        params.push(init_component(&spec, &stage_name(k), cfg.seed, 0)?);
    }
    let obj = SeparationObjective {
        cfg,
        data,
        spec: &spec,
        upto: spec.num_stages(),
        frozen_idnet: None,
        frozen_stages: &[],
        naive: true,
        stream: step_stream(NAIVE),
    };
    let report = with_workers(cfg.workers, || fit(cfg, NAIVE, &mut params, &obj, observer))?;
    let ck = Checkpoint {
        spec,
        init_seed: cfg.seed,
        produced_by: NAIVE.into(),
        components: names
            .into_iter()
            .zip(params)
            .map(|(name, params)| Component {
                name,
                params,
                frozen: false,
                trained_in: NAIVE.into(),
            })
            .collect(),
    };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| TrainError::io(dir, e))?;
        ck.save(&checkpoint_path(dir, NAIVE))?;
        write_atomic(&dir.join(TRACE_FILE), trace_csv(&report.records).as_bytes())?;
    }
    Ok((ck, report))
}
