//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL line
//! per criterion and exits non-zero if any failed.

use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dspn::acd::{acd_loss, uniqueness_penalty};
use dspn::config::KvConfig;
use dspn::corpus::budget_subsample;
use dspn::corpus::synth::{synth_corpus, GenConfig};
use dspn::gradkernel::{Shape, Tensor};
use dspn::metrics::{evaluate, EvalOptions};
use dspn::model::{B1, B2, B3, T, W1, W2, W3};
use dspn::pyramid::{joint_loss, review_sentiment, rp_loss, PyramidOutput};
use dspn::toy::{ToyInstance, ToyLimits};
use dspn::trainer::{split_validation, train, Checkpoint, RunConfig};
use dspn::{Corpus, Dspn, Objective, Polarity, Review};

type Outcome = Result<String, String>;

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("gradient suite", gradient_suite),
        ("oracle equivalence", oracle_equivalence),
        ("normalization", normalization),
        ("trivial cases", trivial_cases),
        ("synthetic recovery", synthetic_recovery),
        ("determinism", determinism),
        ("budget protocol", budget_protocol),
        ("checkpoint round trip", checkpoint_round_trip),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("[PASS] {} {name}: {detail} ({secs:.1}s)", i + 1),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] {} {name}: {detail} ({secs:.1}s)", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let limits = ToyLimits::default();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for seed in 0..100 {
        let toy = ToyInstance::generate(seed, &limits).map_err(err)?;
        let n_max = toy.reviews.iter().map(Review::len).max().unwrap_or(0);
        ensure(n_max <= 6 && toy.schema.len() <= 3 && toy.model.config.encoder.d_w <= 8, || {
            format!("seed {seed}: toy instance exceeds size limits")
        })?;
        let report = toy
            .check(Objective::Joint { lambda: 0.1 }, 1.0, 1e-5)
            .map_err(err)?;
        checked += report.checked;
        if report.max_rel_error > worst {
            worst = report.max_rel_error;
        }
        ensure(report.passes(1e-4), || {
            format!(
                "seed {seed}: relative error {:.3e} at {:?} (analytic {:.6e}, numeric {:.6e})",
                report.max_rel_error, report.worst, report.worst_analytic, report.worst_numeric
            )
        })?;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.1}s"))?;
    Ok(format!("100 instances, {checked} coordinates, max relative error {worst:.2e}"))
}

fn param<'a>(model: &'a Dspn, name: &str) -> &'a Tensor {
    model.params.value(model.params.id(name).expect("parameter exists"))
}

fn naive_softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

fn mat_vec(w: &Tensor, x: &[f64], b: &[f64]) -> Vec<f64> {
    (0..w.rows())
        .map(|r| (0..w.cols()).map(|c| w.get(r, c) * x[c]).sum::<f64>() + b[r])
        .collect()
}

struct Oracle {
    p: Vec<f64>,
    r: Vec<f64>,
    word: Vec<Vec<f64>>,
    attn: Vec<Vec<f64>>,
    aspect: Vec<Vec<f64>>,
    review: Vec<f64>,
}

fn oracle(model: &Dspn, z: &[f64], h: &Tensor) -> Oracle {
    let (w1, b1, t) = (param(model, W1), param(model, B1), param(model, T));
    let (w2, b2, w3, b3) = (param(model, W2), param(model, B2), param(model, W3), param(model, B3));
    let n_aspects = t.rows();
    let n = h.rows();

    let p = naive_softmax(&mat_vec(w1, z, b1.as_slice()));
    let r: Vec<f64> = (0..t.cols())
        .map(|c| (0..n_aspects).map(|k| p[k] * t.get(k, c)).sum())
        .collect();
    let word: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let hidden: Vec<f64> = mat_vec(w2, h.row(j), b2.as_slice()).into_iter().map(|v| v.max(0.0)).collect();
            mat_vec(w3, &hidden, b3.as_slice())
        })
        .collect();
    let attn: Vec<Vec<f64>> = (0..n_aspects)
        .map(|k| {
            let scores: Vec<f64> = (0..n)
                .map(|j| (0..t.cols()).map(|c| t.get(k, c) * h.get(j, c)).sum())
                .collect();
            naive_softmax(&scores)
        })
        .collect();
    let aspect: Vec<Vec<f64>> = attn
        .iter()
        .map(|a| {
            let pooled: Vec<f64> = (0..3).map(|c| (0..n).map(|j| a[j] * word[j][c]).sum()).collect();
            naive_softmax(&pooled)
        })
        .collect();
    let mixed: Vec<f64> = (0..3).map(|c| (0..n_aspects).map(|k| p[k] * aspect[k][c]).sum()).collect();
    Oracle {
        p,
        r,
        word,
        attn,
        aspect,
        review: naive_softmax(&mixed),
    }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn rows_diff(t: &Tensor, rows: &[Vec<f64>]) -> f64 {
    assert_eq!(t.rows(), rows.len());
    rows.iter().enumerate().map(|(i, r)| max_diff(t.row(i), r)).fold(0.0, f64::max)
}

fn oracle_equivalence() -> Outcome {
    let limits = ToyLimits::default();
    let mut worst = [0.0f64; 6];
    for seed in 0..50 {
        let toy = ToyInstance::generate(1000 + seed, &limits).map_err(err)?;
        let review = &toy.reviews[0];
        let enc = toy.model.encode(review).map_err(err)?;
        let out = toy.model.forward(review).map_err(err)?;
        let o = oracle(&toy.model, &enc.z, &enc.h);
        let am = toy.model.aspect_model();
        let r = am.reconstruct(&out.p).map_err(err)?;
        let diffs = [
            max_diff(&out.p, &o.p),
            max_diff(&r, &o.r),
            rows_diff(&out.word_sent, &o.word),
            rows_diff(&out.attn, &o.attn),
            rows_diff(&out.aspect_sent, &o.aspect),
            max_diff(&out.review_sent, &o.review),
        ];
        for (w, d) in worst.iter_mut().zip(diffs) {
            *w = w.max(d);
        }
    }
    let names = ["p", "r", "word", "attn", "aspect", "review"];
    let summary: Vec<String> = names.iter().zip(worst).map(|(n, w)| format!("{n} {w:.1e}")).collect();
    ensure(worst.iter().all(|&w| w <= 1e-12), || format!("exceeds 1e-12: {}", summary.join(", ")))?;
    Ok(format!("50 instances, max abs diff {}", summary.join(", ")))
}

fn normalization() -> Outcome {
    let limits = ToyLimits {
        scale: 3.0,
        ..ToyLimits::default()
    };
    let mut forwards = 0;
    let mut worst = 0.0f64;
    let mut seed = 5000;
    while forwards < 1000 {
        let toy = ToyInstance::generate(seed, &limits).map_err(err)?;
        seed += 1;
        for review in &toy.reviews {
            if forwards == 1000 {
                break;
            }
            let out = toy.model.forward(review).map_err(err)?;
            forwards += 1;
            let sums = std::iter::once(out.p.iter().sum::<f64>())
                .chain(out.attn.row_iter().map(|r| r.iter().sum()))
                .chain(out.aspect_sent.row_iter().map(|r| r.iter().sum()))
                .chain(std::iter::once(out.review_sent.iter().sum()));
            for s in sums {
                worst = worst.max((s - 1.0).abs());
            }
        }
    }
    ensure(worst <= 1e-10, || format!("a distribution sums to 1 ± {worst:.2e}"))?;
    Ok(format!("{forwards} forwards, max |sum − 1| {worst:.2e}"))
}

fn trivial_cases() -> Outcome {
    let toy = ToyInstance::generate(77, &ToyLimits::default()).map_err(err)?;
    let model = &toy.model;
    let batch: Vec<&Review> = toy.reviews.iter().collect();

    // λ = 0
    let joint0 = model
        .batch_loss(&batch, &toy.labels, &toy.negatives, 0.0, 1.0)
        .map_err(err)?;
    let mut rp = 0.0;
    for (r, gold) in batch.iter().zip(&toy.labels) {
        rp += rp_loss(&model.forward(r).map_err(err)?.review_sent, *gold);
    }
    ensure(joint0 == rp, || format!("λ=0 joint loss {joint0} but L_RP {rp}"))?;
    ensure(joint_loss(123.5, rp, 0.0) == rp, || "joint_loss(·, rp, 0) != rp".into())?;

    // m = 0
    let zs: Vec<Vec<f64>> = batch
        .iter()
        .map(|r| model.encode(r).map(|e| e.z))
        .collect::<Result<_, _>>()
        .map_err(err)?;
    let none = vec![Vec::new(); zs.len()];
    let lambda_acd = 0.7;
    let am = model.aspect_model();
    let loss = acd_loss(&zs, &none, &am, lambda_acd).map_err(err)?;
    let u = uniqueness_penalty(am.t).map_err(err)?;
    ensure(loss == lambda_acd * u, || format!("m=0 ACD loss {loss} but λ_ACD·U {}", lambda_acd * u))?;

    // orthonormal T
    let u_id = uniqueness_penalty(&Tensor::identity(4)).map_err(err)?;
    ensure(u_id == 0.0, || format!("U(I) = {u_id}"))?;
    let (c, s) = (0.6f64, 0.8f64);
    let rot = Tensor::matrix(3, 3, vec![c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0]).map_err(err)?;
    let u_rot = uniqueness_penalty(&rot).map_err(err)?;
    ensure(u_rot < 1e-12, || format!("U(rotation) = {u_rot:e}"))?;

    // uniform prediction
    let uniform = [1.0 / 3.0; 3];
    for gold in Polarity::ALL {
        let l = rp_loss(&uniform, gold);
        ensure((l - 3f64.ln()).abs() <= 1e-12, || format!("uniform rp_loss {l} for {gold}"))?;
    }

    // one-hot p
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 4;
    let aspect_sent = Tensor::from_fn(Shape::Matrix(n, 3), |_| rng.gen_range(0.05..1.0));
    for k in 0..n {
        let mut p = vec![0.0; n];
        p[k] = 1.0;
        let got = review_sentiment(&aspect_sent, &p).map_err(err)?;
        let want = naive_softmax(aspect_sent.row(k));
        let d = max_diff(&got, &want);
        ensure(d <= 1e-15, || format!("one-hot aspect {k}: diff {d:e}"))?;
    }
    Ok(format!("λ=0, m=0 (U={u:.4}), orthonormal T, uniform ln 3, one-hot p"))
}

/// Generated corpus shared by the training-based criteria.
fn synthetic(size: usize, seed: u64) -> Result<(Corpus, dspn::AspectSchema), String> {
    let mut gen = GenConfig::from_kv(&KvConfig::new()).map_err(err)?;
    gen.size = size;
    let corpus = synth_corpus(&gen, seed).map_err(err)?;
    Ok((corpus, gen.schema().map_err(err)?))
}

fn run_config(text: &str) -> Result<RunConfig, String> {
    RunConfig::from_kv(&KvConfig::parse(text).map_err(err)?).map_err(err)
}

fn synthetic_recovery() -> Outcome {
    let start = Instant::now();
    let (corpus, schema) = synthetic(2500, 1)?;
    let train_all = corpus.with_reviews(corpus.reviews[..2000].to_vec());
    let test = corpus.with_reviews(corpus.reviews[2000..].to_vec());
    let aspects = schema.len();
    ensure(aspects == 5, || format!("{aspects} aspects"))?;

    let run = run_config("seed=1\nepochs=40\nlr=0.003\nw1_scale=30\nlabel_source=stars")?;
    let (train_set, val_set) = split_validation(&train_all, run.train.val_fraction, run.train.seed).map_err(err)?;
    let outcome = train(&train_set, &val_set, &schema, &run, None).map_err(err)?;
    let report = evaluate(&outcome.model, &test, &schema, &EvalOptions::default()).map_err(err)?;
    let secs = start.elapsed().as_secs_f64();

    let rp = report.acc_rp.unwrap_or(0.0);
    let acd = report.f1_acd.unwrap_or(0.0);
    let acsa = report.acc_acsa.unwrap_or(0.0);
    let majority = report.acsa_majority.unwrap_or(1.0);
    let detail = format!(
        "vocab {}, RP {rp:.4}, ACD F1 {acd:.4}, ACSA {acsa:.4} vs majority {majority:.4}",
        corpus.vocab.len()
    );
    ensure(rp >= 0.90, || format!("RP below 0.90; {detail}"))?;
    ensure(acd >= 0.85, || format!("ACD F1 below 0.85; {detail}"))?;
    ensure(acsa - majority >= 0.15, || format!("ACSA margin below 15 points; {detail}"))?;
    ensure(secs < 300.0, || format!("took {secs:.0}s; {detail}"))?;
    Ok(detail)
}

fn train_small(workers: usize) -> Result<(Vec<u8>, String, Dspn, Corpus), String> {
    let (corpus, schema) = synthetic(400, 9)?;
    let run = run_config(&format!("seed=4\nepochs=3\nbatch=16\nlr=0.01\nworkers={workers}"))?;
    let (train_set, val_set) = split_validation(&corpus, run.train.val_fraction, run.train.seed).map_err(err)?;
    let outcome = train(&train_set, &val_set, &schema, &run, None).map_err(err)?;
    let bytes = outcome.checkpoint(&run, &schema, &corpus, None).to_bytes();
    let report = evaluate(&outcome.model, &corpus, &schema, &EvalOptions::default()).map_err(err)?;
    Ok((bytes, report.to_json(), outcome.model, corpus))
}

fn determinism() -> Outcome {
    let runs: Vec<(usize, Vec<u8>, String)> = [1, 1, 4, 4]
        .into_iter()
        .map(|w| train_small(w).map(|(b, r, _, _)| (w, b, r)))
        .collect::<Result<_, _>>()?;
    let (_, bytes0, report0) = &runs[0];
    for (w, bytes, report) in &runs[1..] {
        ensure(bytes == bytes0, || format!("checkpoint bytes differ with workers={w}"))?;
        ensure(report == report0, || format!("metric report differs with workers={w}"))?;
    }
    Ok(format!("4 runs (workers 1,1,4,4), checkpoint {} bytes identical, reports identical", bytes0.len()))
}

fn budget_protocol() -> Outcome {
    let (corpus, _) = synthetic(300, 2)?;
    let full = corpus.aspect_label_count();
    let identity = budget_subsample(&corpus, full, 11).map_err(err)?;
    ensure(identity == corpus, || "B = full changed the corpus".into())?;

    let half = full / 2;
    let a = budget_subsample(&corpus, half, 11).map_err(err)?;
    let b = budget_subsample(&corpus, half, 11).map_err(err)?;
    let c = budget_subsample(&corpus, half, 12).map_err(err)?;
    ensure(a.aspect_label_count() == half, || {
        format!("B = {half} left {} labels", a.aspect_label_count())
    })?;
    ensure(a == b, || "same seed gave a different selection".into())?;
    ensure(a != c, || "different seeds gave the same selection".into())?;
    let texts_kept = a.reviews.iter().zip(&corpus.reviews).all(|(x, y)| x.tokens == y.tokens && x.stars == y.stars);
    ensure(texts_kept, || "subsampling touched review text or stars".into())?;
    Ok(format!("{full} labels, B = full identity, B = {half} exact, seed reproducible"))
}

fn same_bits(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn outputs_identical(a: &PyramidOutput, b: &PyramidOutput) -> bool {
    same_bits(&a.p, &b.p)
        && a.word_sent.shape() == b.word_sent.shape()
        && same_bits(a.word_sent.as_slice(), b.word_sent.as_slice())
        && a.attn.shape() == b.attn.shape()
        && same_bits(a.attn.as_slice(), b.attn.as_slice())
        && a.aspect_sent.shape() == b.aspect_sent.shape()
        && same_bits(a.aspect_sent.as_slice(), b.aspect_sent.as_slice())
        && same_bits(&a.review_sent, &b.review_sent)
        && a.detected == b.detected
}

fn checkpoint_round_trip() -> Outcome {
    let (bytes, _, model, corpus) = train_small(1)?;
    let dir = tempfile::tempdir().map_err(err)?;
    let path = dir.path().join("model.ckpt");
    std::fs::write(&path, &bytes).map_err(err)?;
    let loaded = Checkpoint::load(&path).map_err(err)?;
    ensure(loaded.to_bytes() == bytes, || "re-serialized checkpoint differs".into())?;
    let restored = loaded.model(None).map_err(err)?;
    for review in corpus.reviews.iter().take(100) {
        let a = model.forward(review).map_err(err)?;
        let b = restored.forward(review).map_err(err)?;
        ensure(outputs_identical(&a, &b), || format!("review {} differs after reload", review.id))?;
    }
    Ok("100 reviews bitwise identical after save → load".into())
}
