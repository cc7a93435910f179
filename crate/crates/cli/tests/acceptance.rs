//! Acceptance suite. Prints one `[PASS]`/`[FAIL]` line per criterion and
//! exits non-zero if any criterion fails. Run with
//! `cargo test -p tastas-cli --test acceptance`.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tastas_core::audio::{power, snr_db, sum_waveforms, Waveform};
use tastas_core::graph::Graph;
use tastas_core::metrics::{
    assignment_objective, ideal_ratio_masks, oracle_irm_separate, pit_assign, si_sdr_slices,
    AssignMethod, StftParams, Window, SI_SDR_CAP_DB,
};
use tastas_core::mixgen::{
    build_manifest, check_speaker_disjoint, make_toy_corpus, online_remix, split_pool, synthesize,
    Corpus, Mixture, Split,
};
use tastas_core::model::{
    chunk_merge, chunk_segment, forward, id_embed, parse_model_spec, stage_name, Checkpoint, Model,
    ModelDims, ModelVars, IDNET,
};
use tastas_core::report::juxtapose_traces;
use tastas_core::trainer::{idnet_accuracy, read_trace_csv, EpochRecord, EvalSummary, TrainData};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

struct Suite {
    failures: usize,
}

impl Suite {
    fn check(&mut self, id: &str, title: &str, budget: Option<Duration>, f: impl FnOnce() -> Outcome) {
        let t = Instant::now();
        let r = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let took = t.elapsed();
        let over = budget.is_some_and(|b| took > b);
        let pass = r.pass && !over;
        if !pass {
            self.failures += 1;
        }
        let budget_note = match budget {
            Some(b) if over => format!(", over the {:.0} s budget", b.as_secs_f64()),
            _ => String::new(),
        };
        println!(
            "[{}] {id} {title}: {} ({:.1} s{budget_note})",
            if pass { "PASS" } else { "FAIL" },
            r.detail,
            took.as_secs_f64()
        );
    }

    fn report(&self, id: &str, title: &str, body: &str) {
        println!("[INFO] {id} {title} (diagnostic, no pass/fail)");
        for line in body.lines() {
            println!("       {line}");
        }
    }
}

fn noise(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn wave(samples: Vec<f64>) -> Waveform {
    Waveform {
        samples,
        sample_rate: 8000,
    }
}

fn pit_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut bit_equal = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let score = Array2::from_shape_fn((5, 5), |_| rng.random_range(-30.0..30.0));
        let h = pit_assign(&score, AssignMethod::Hungarian).unwrap();
        let b = pit_assign(&score, AssignMethod::BruteForce).unwrap();
        let oh = assignment_objective(&score, &h.perm);
        let ob = assignment_objective(&score, &b.perm);
        if oh == ob {
            bit_equal += 1;
        } else {
            worst = worst.max((oh - ob).abs() / ob.abs().max(f64::MIN_POSITIVE));
        }
    }
    outcome(
        worst <= 1e-12,
        format!("{bit_equal}/1000 bit-equal, worst relative gap {worst:.1e}"),
    )
}

fn si_sdr_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s = noise(4000, &mut rng);
    let est: Vec<f64> = s.iter().zip(noise(4000, &mut rng)).map(|(a, b)| a + 0.3 * b).collect();
    let base = si_sdr_slices(&est, &s).unwrap();
    let mut scale_err: f64 = 0.0;
    for alpha in [1e-3, 1.0, 1e3] {
        let scaled: Vec<f64> = est.iter().map(|v| v * alpha).collect();
        scale_err = scale_err.max((si_sdr_slices(&scaled, &s).unwrap() - base).abs());
    }
    // Zero-mean reference and residual (SI-SDR removes the mean), residual
    // orthogonal to the reference with a tenth of its power.
    let zero_mean = |x: Vec<f64>| {
        let m = x.iter().sum::<f64>() / x.len() as f64;
        x.into_iter().map(|v| v - m).collect::<Vec<f64>>()
    };
    let s = zero_mean(s);
    let v = zero_mean(noise(4000, &mut rng));
    let ss: f64 = s.iter().map(|x| x * x).sum();
    let proj = v.iter().zip(&s).map(|(a, b)| a * b).sum::<f64>() / ss;
    let n: Vec<f64> = v.iter().zip(&s).map(|(a, b)| a - proj * b).collect();
    let nn: f64 = n.iter().map(|x| x * x).sum();
    let g = (ss / (10.0 * nn)).sqrt();
    let est10: Vec<f64> = s.iter().zip(&n).map(|(a, b)| a + g * b).collect();
    let ten = si_sdr_slices(&est10, &s).unwrap();
    let same = si_sdr_slices(&s, &s).unwrap();
    let pass = scale_err <= 1e-6 && (ten - 10.0).abs() <= 1e-6 && same == SI_SDR_CAP_DB;
    outcome(
        pass,
        format!("scale drift {scale_err:.1e} dB, orthogonal case {ten:.9} dB, identical {same} dB"),
    )
}

fn irm_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_sum: f64 = 0.0;
    let mut in_range = true;
    for s in [2usize, 5] {
        for _ in 0..50 {
            let mags: Vec<Array2<f64>> = (0..s)
                .map(|_| {
                    Array2::from_shape_fn((7, 9), |_| {
                        if rng.random_bool(0.2) {
                            0.0
                        } else {
                            rng.random_range(0.0..10.0)
                        }
                    })
                })
                .collect();
            let masks = ideal_ratio_masks(&mags).unwrap().masks;
            for idx in 0..63 {
                let (r, c) = (idx / 9, idx % 9);
                let total: f64 = mags.iter().map(|m| m[[r, c]]).sum();
                let sum: f64 = masks.iter().map(|m| m[[r, c]]).sum();
                if total > 0.0 {
                    worst_sum = worst_sum.max((sum - 1.0).abs());
                }
                in_range &= masks.iter().all(|m| (0.0..=1.0).contains(&m[[r, c]]));
            }
        }
    }
    let one = |v: f64| Array2::from_elem((1, 1), v);
    let exact = ideal_ratio_masks(&[one(3.0), one(1.0), one(1.0), one(0.0), one(0.0)])
        .unwrap()
        .masks
        .iter()
        .map(|m| m[[0, 0]])
        .collect::<Vec<_>>();
    let pass = worst_sum <= 1e-6 && in_range && exact == [0.6, 0.2, 0.2, 0.0, 0.0];
    outcome(
        pass,
        format!("worst |sum-1| {worst_sum:.1e}, masks in [0,1]: {in_range}, worked case {exact:?}"),
    )
}

fn irm_bound() -> Outcome {
    let n = 8000;
    let tone = |f: f64| {
        wave(
            (0..n)
                .map(|i| (2.0 * std::f64::consts::PI * f * i as f64 / 8000.0).sin())
                .collect(),
        )
    };
    let sources = [tone(500.0), tone(1500.0)];
    let mix = sum_waveforms(&sources).unwrap();
    let params = StftParams {
        frame_len: 256,
        hop: 128,
        window: Window::Hann,
    };
    let est = oracle_irm_separate(&mix, &sources, params).unwrap();
    let scores: Vec<f64> = est
        .iter()
        .zip(&sources)
        .map(|(e, s)| si_sdr_slices(&e.samples, &s.samples).unwrap())
        .collect();
    outcome(
        scores.iter().all(|&v| v >= 20.0),
        format!("per-source SI-SDR {:.2} / {:.2} dB (threshold 20 dB)", scores[0], scores[1]),
    )
}

fn synthesis_fidelity() -> Outcome {
    let corpus = make_toy_corpus(8, 12, 0.5, 11).unwrap();
    let pools = split_pool(&corpus.pool(), 3, 0.25).unwrap();
    let train = build_manifest(&corpus, &pools.train, Split::Train, 3, 100, (0.0, 5.0), 12).unwrap();
    let test = build_manifest(&corpus, &pools.test, Split::Test, 3, 20, (0.0, 5.0), 13).unwrap();
    let mut worst: f64 = 0.0;
    let mut exact_sum = true;
    let mut in_range = true;
    for r in &train.records {
        let m = synthesize(r, &corpus).unwrap();
        let p0 = power(&m.sources[0]).unwrap();
        for i in 1..m.sources.len() {
            in_range &= (0.0..=5.0).contains(&r.snrs_db[i]);
            let measured = snr_db(power(&m.sources[i]).unwrap(), p0);
            worst = worst.max((measured - r.snrs_db[i]).abs());
        }
        exact_sum &= sum_waveforms(&m.sources).unwrap() == m.mixture;
    }
    let disjoint = check_speaker_disjoint(&train, &test, &corpus).is_ok();
    outcome(
        worst <= 1e-6 && exact_sum && in_range && disjoint,
        format!(
            "100 records, worst SNR error {worst:.1e} dB, exact sums: {exact_sum}, disjoint speakers: {disjoint}"
        ),
    )
}

fn remix_conservation() -> Outcome {
    let corpus = make_toy_corpus(6, 6, 0.2, 21).unwrap();
    let m = build_manifest(&corpus, &corpus.pool(), Split::Train, 3, 200, (0.0, 5.0), 22).unwrap();
    let mixtures: Vec<Mixture> = m.records.iter().map(|r| synthesize(r, &corpus).unwrap()).collect();
    let key = |w: &Waveform| w.samples.iter().map(|v| v.to_bits()).collect::<Vec<u64>>();
    let slot_multiset = |batch: &[Mixture], k: usize| {
        let mut v: Vec<_> = batch.iter().map(|b| key(&b.sources[k])).collect();
        v.sort();
        v
    };
    let mut ok = true;
    let mut moved = 0;
    for seed in 0..50u64 {
        let start = (seed as usize * 4) % (mixtures.len() - 4);
        let batch = &mixtures[start..start + 4];
        let out = online_remix(batch, seed).unwrap();
        for k in 0..3 {
            ok &= slot_multiset(batch, k) == slot_multiset(&out, k);
        }
        for (a, b) in batch.iter().zip(&out) {
            ok &= sum_waveforms(&b.sources).unwrap() == b.mixture;
            moved += usize::from(a.mixture != b.mixture);
        }
    }
    outcome(
        ok,
        format!("50 batches of 4, slot multisets and exact sums preserved: {ok}; {moved} mixtures changed"),
    )
}

fn model_numerics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut inverted = 0;
    for _ in 0..100 {
        let frames = rng.random_range(1..120);
        let chunk = 2 * rng.random_range(1..12);
        let feat = rng.random_range(1..6);
        let x = Array2::from_shape_fn((frames, feat), |_| rng.random_range(-1.0..1.0));
        let (chunks, layout): (Array3<f64>, _) = chunk_segment(&x, chunk).unwrap();
        if chunk_merge(&chunks, &layout).unwrap() == x {
            inverted += 1;
        }
    }

    let dims = ModelDims {
        basis: 16,
        kernel: 4,
        feature: 8,
        chunk: 6,
        hidden: 8,
        embed: 8,
        id_hidden: 8,
    };
    let spec = parse_model_spec("TasTas(I, 1, 1)").unwrap().with_sources(2).with_dims(dims);
    let mut model = Model::init(spec, 5, 3).unwrap();
    // Non-zero refinement head so every stage-2 path carries gradient.
    model.stages[1]
        .get_mut("head.w")
        .unwrap()
        .mapv_inplace(|_| rng.random_range(-0.3..0.3));
    let mix = Array2::from_shape_vec((1, 60), noise(60, &mut rng)).unwrap();
    let refs: Vec<Vec<f64>> = (0..2).map(|_| noise(60, &mut rng)).collect();
    let trainable = vec![IDNET.to_string(), stage_name(1), stage_name(2)];
    let loss_of = |m: &Model| {
        let mut g = Graph::new();
        let vars = ModelVars::bind(&mut g, m, &trainable);
        let x = g.constant(mix.clone());
        let out = forward(&mut g, &m.spec, &vars, x, 2).unwrap();
        let a = g.si_sdr(out[1].waves[0], &refs[0]);
        let b = g.si_sdr(out[1].waves[1], &refs[1]);
        let l = g.add(a, b);
        (g, vars, l)
    };
    let (g, vars, l) = loss_of(&model);
    let grads = g.backward(l);
    let picks: &[(Option<usize>, &str)] = &[
        (None, "enc.w"),
        (None, "ff2.w"),
        (Some(0), "enc.w"),
        (Some(0), "dec.w"),
        (Some(0), "in.gamma"),
        (Some(0), "block0.intra.fwd.wih"),
        (Some(0), "block0.inter.bwd.whh"),
        (Some(0), "head.w"),
        (Some(1), "in.w"),
        (Some(1), "block0.intra.proj.w"),
        (Some(1), "block0.inter.fwd.b"),
        (Some(1), "head.w"),
    ];
    let h = 1e-6;
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for (comp, name) in picks {
        let bound = match comp {
            None => vars.idnet.as_ref().unwrap(),
            Some(k) => &vars.stages[*k],
        };
        let analytic = grads.get(bound.var(name)).expect("gradient").clone();
        for idx in [0usize, 5, 11] {
            let (r, c) = ((idx / analytic.ncols()) % analytic.nrows(), idx % analytic.ncols());
            let eval = |delta: f64| {
                let mut m = model.clone();
                let set = match comp {
                    None => m.idnet.as_mut().unwrap(),
                    Some(k) => &mut m.stages[*k],
                };
                set.get_mut(name).unwrap()[[r, c]] += delta;
                let (g, _, l) = loss_of(&m);
                g.scalar(l)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic[[r, c]];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4));
            checked += 1;
        }
    }
    outcome(
        inverted == 100 && checked >= 20 && worst <= 1e-3,
        format!(
            "{inverted}/100 exact chunk inversions; {checked} gradient entries, worst relative error {worst:.1e}"
        ),
    )
}

fn tastas(args: &[&str]) -> Result<String, String> {
    let o = Command::new(env!("CARGO_BIN_EXE_tastas"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if o.status.success() {
        Ok(String::from_utf8_lossy(&o.stdout).into_owned())
    } else {
        Err(format!(
            "`tastas {}` exited {:?}: {}",
            args.first().unwrap_or(&""),
            o.status.code(),
            String::from_utf8_lossy(&o.stderr)
        ))
    }
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

const TINY_DIMS: &[&str] = &[
    "basis=32", "kernel=16", "feature=32", "chunk=16", "hidden=32", "embed=16", "id_hidden=32",
];

fn train_args<'a>(data: &'a Path, out: &'a Path, settings: &[&'a str]) -> Vec<String> {
    let mut v: Vec<String> = [
        "train",
        "--train-manifest",
        p(&data.join("train.jsonl")),
        "--valid-manifest",
        p(&data.join("valid.jsonl")),
        "--out",
        p(out),
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for s in TINY_DIMS.iter().chain(settings) {
        v.push("--set".into());
        v.push(s.to_string());
    }
    v
}

struct ToyRun {
    data: std::path::PathBuf,
    out: std::path::PathBuf,
    took: Duration,
}

fn toy_run(root: &Path) -> Result<ToyRun, String> {
    let data = root.join("toy3");
    let out = root.join("run3");
    tastas(&[
        "synth", "--toy", "--speakers", "8", "--s", "3", "--train", "200", "--valid", "40", "--test",
        "40", "--snr", "0", "5", "--seed", "7", "--out", p(&data), "--no-wav",
    ])?;
    let mut args = train_args(
        &data,
        &out,
        &["segment_len=2000", "batch_size=4", "max_epochs=10", "patience=3", "learning_rate=0.001"],
    );
    args.extend(["--spec".into(), "TasTas(I, 2, 2)".into()]);
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    let t = Instant::now();
    tastas(&refs)?;
    Ok(ToyRun {
        data,
        out,
        took: t.elapsed(),
    })
}

fn freeze_semantics(run: &Result<ToyRun, String>) -> Outcome {
    let run = match run {
        Ok(r) => r,
        Err(e) => return outcome(false, e.clone()),
    };
    let load = |s: &str| Checkpoint::load(&run.out.join(format!("{s}.ckpt"))).unwrap();
    let (a, b, c) = (load("idnet"), load("stage1"), load("stage2"));
    let id1 = a.digest("idnet").unwrap();
    let id_ok = b.digest("idnet").as_ref() == Some(&id1) && c.digest("idnet").as_ref() == Some(&id1);
    let s2 = b.digest("stage1").unwrap();
    let s_ok = c.digest("stage1").as_ref() == Some(&s2);
    // Bit-exact parameter equality, not only equal digests.
    let bits_ok = a.component("idnet").unwrap().params.to_blob()
        == c.component("idnet").unwrap().params.to_blob()
        && b.component("stage1").unwrap().params.to_blob()
            == c.component("stage1").unwrap().params.to_blob();
    outcome(
        id_ok && s_ok && bits_ok,
        format!(
            "ID-Net {}… unchanged after steps 2-3: {id_ok}; stage 1 {}… unchanged after step 3: {s_ok}; blobs bit-equal: {bits_ok}",
            &id1[..12],
            &s2[..12]
        ),
    )
}

fn end_to_end(run: &Result<ToyRun, String>, root: &Path) -> Outcome {
    let run = match run {
        Ok(r) => r,
        Err(e) => return outcome(false, e.clone()),
    };
    let trace = read_trace_csv(&std::fs::read_to_string(run.out.join("loss_trace.csv")).unwrap()).unwrap();
    let mut improved = Vec::new();
    for step in ["idnet", "stage1", "stage2"] {
        let rows: Vec<&EpochRecord> = trace.iter().filter(|r| r.step == step).collect();
        let first = rows[0].valid_loss;
        let best = rows.iter().map(|r| r.valid_loss).fold(f64::INFINITY, f64::min);
        improved.push((step, first, best, best < first));
    }
    let t = Instant::now();
    let ev = root.join("eval3");
    let evald = tastas(&[
        "eval",
        "--checkpoint",
        p(&run.out.join("stage2.ckpt")),
        "--manifest",
        p(&run.data.join("valid.jsonl")),
        "--oracle-irm",
        "--out",
        p(&ev),
    ]);
    if let Err(e) = evald {
        return outcome(false, e);
    }
    let s = EvalSummary::from_json(&std::fs::read_to_string(ev.join("summary.json")).unwrap()).unwrap();
    let (s1, s2) = (s.stage_means[0], s.stage_means[1]);
    let a = improved.iter().all(|x| x.3);
    let b = s.mean_sdri > 0.0;
    let c = s2 >= s1;
    let total = run.took.as_secs_f64() + t.elapsed().as_secs_f64();
    let d = total < 1800.0;
    let steps: Vec<String> = improved
        .iter()
        .map(|(n, f, b, _)| format!("{n} {f:.3}->{b:.3}"))
        .collect();
    outcome(
        a && b && c && d,
        format!(
            "(a) best valid loss below first epoch [{}]: {a}; (b) final {} {:.2} dB > 0: {b}; (c) stage 2 {s2:.2} >= stage 1 {s1:.2} dB: {c}; IRM {:.2} dB; train+eval {total:.0} s < 1800 s: {d}",
            steps.join(", "),
            s.metric,
            s.mean_sdri,
            s.oracle_irm_mean_sdri.unwrap_or(f64::NAN)
        ),
    )
}

fn idnet_checks(run: &Result<ToyRun, String>) -> Outcome {
    let run = match run {
        Ok(r) => r,
        Err(e) => return outcome(false, e.clone()),
    };
    let data = TrainData::load(&run.data.join("train.jsonl"), &run.data.join("valid.jsonl")).unwrap();
    let ck = Checkpoint::load(&run.out.join("idnet.ckpt")).unwrap();
    let params = &ck.component("idnet").unwrap().params;
    let acc = idnet_accuracy(params, &data.id_valid, 2000).unwrap();
    let chance = 1.0 / data.speakers.len() as f64;
    let embs: Vec<_> = data
        .id_valid
        .iter()
        .map(|u| (u.label, id_embed(&u.wave, params).unwrap()))
        .collect();
    let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0, 0.0, 0);
    for i in 0..embs.len() {
        for j in i + 1..embs.len() {
            let c = embs[i].1.cosine(&embs[j].1);
            if embs[i].0 == embs[j].0 {
                intra += c;
                ni += 1;
            } else {
                inter += c;
                nx += 1;
            }
        }
    }
    let (intra, inter) = (intra / ni as f64, inter / nx as f64);
    let toy_chance = 1.0 / 8.0;
    outcome(
        acc > chance && acc > toy_chance && intra > inter,
        format!(
            "held-out accuracy {acc:.3} vs chance {chance:.3} ({} training speakers) and 1/8; mean cosine intra {intra:.3} > inter {inter:.3}",
            data.speakers.len()
        ),
    )
}

fn naive_diagnostic(root: &Path) -> Result<String, String> {
    let data = root.join("toy5");
    tastas(&[
        "synth", "--toy", "--speakers", "12", "--s", "5", "--test-speakers", "5", "--train", "60",
        "--valid", "12", "--test", "4", "--seed", "9", "--out", p(&data), "--no-wav",
    ])?;
    let settings = ["segment_len=2000", "max_epochs=4", "patience=4"];
    let multi = root.join("multi5");
    let naive = root.join("naive5");
    let mut a = train_args(&data, &multi, &settings);
    a.extend(["--spec".into(), "TasTas(I, 1, 1)".into()]);
    let mut b = a.clone();
    b[6] = p(&naive).to_string();
    b.push("--naive".into());
    for args in [&a, &b] {
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        tastas(&refs)?;
    }
    let read = |d: &Path| read_trace_csv(&std::fs::read_to_string(d.join("loss_trace.csv")).unwrap()).unwrap();
    let (tm, tn) = (read(&multi), read(&naive));
    let sep: Vec<EpochRecord> = tm.into_iter().filter(|r| r.step != "idnet").collect();
    let mut body = juxtapose_traces(&[("multi-step", &sep), ("naive joint", &tn)]);
    let delta = |t: &[EpochRecord]| t.last().unwrap().valid_loss - t.first().unwrap().valid_loss;
    body.push_str(&format!(
        "valid loss change over the run: multi-step stage 1 to final {:+.3}, naive {:+.3}\n",
        delta(&sep),
        delta(&tn)
    ));
    body.push_str(
        "Full-scale claim for naive joint training: \"The SI-SDR loss does not decrease at all\".\n",
    );
    Ok(body)
}

fn main() {
    // Cargo passes harness flags such as `--nocapture`; listing asks for none.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let root = tempfile::tempdir().expect("tempdir");
    let mut suite = Suite { failures: 0 };
    let sec = Duration::from_secs;

    suite.check("C1", "PIT oracle equivalence", Some(sec(60)), pit_equivalence);
    suite.check("C2", "SI-SDR properties", Some(sec(10)), si_sdr_properties);
    suite.check("C3", "IRM invariants", Some(sec(10)), irm_invariants);
    suite.check("C4", "IRM oracle bound", Some(sec(10)), irm_bound);
    suite.check("C5", "Mixture-synthesis fidelity", Some(sec(60)), synthesis_fidelity);
    suite.check("C6", "Online-remix conservation", Some(sec(30)), remix_conservation);
    suite.check("C7", "Model numerics", Some(sec(300)), model_numerics);

    let run = toy_run(root.path());
    if let Ok(r) = &run {
        println!("[INFO] toy TasTas(I, 2, 2) training run took {:.0} s", r.took.as_secs_f64());
    }
    suite.check("C8", "Freeze semantics", None, || freeze_semantics(&run));
    suite.check("C9", "Toy end-to-end training", None, || {
        end_to_end(&run, root.path())
    });
    suite.check("C9+", "ID-Net after toy training", None, || idnet_checks(&run));

    match naive_diagnostic(root.path()) {
        Ok(body) => suite.report("C10", "naive joint vs multi-step traces, S=5", &body),
        Err(e) => suite.report("C10", "naive joint vs multi-step traces, S=5", &format!("run failed: {e}")),
    }

    if suite.failures > 0 {
        println!("acceptance: {} criterion/criteria failed", suite.failures);
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}
