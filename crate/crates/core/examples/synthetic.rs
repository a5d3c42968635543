//! Train on a generated corpus and score all three tasks on held-out reviews.
//!
//! ```text
//! cargo run --release -p dspn-core --example synthetic -- epochs=8 lr=0.01
//! ```
//!
//! Arguments are `key=value` overrides for the run config; `train`, `test`,
//! `gen_seed` and `gen.*` generator keys control the corpus.

use std::time::Instant;

use dspn::config::KvConfig;
use dspn::corpus::synth::{synth_corpus, GenConfig};
use dspn::metrics::{evaluate, EvalOptions};
use dspn::trainer::{split_validation, train_with_progress, RunConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut kv = KvConfig::new();
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').ok_or("arguments are key=value")?;
        kv.set(k, v);
    }
    let take = |kv: &mut KvConfig, key: &str, default: u64| -> Result<u64, Box<dyn std::error::Error>> {
        let v = kv.get_or(key, default)?;
        let mut rest = KvConfig::new();
        for (k, val) in kv.iter().filter(|(k, _)| *k != key) {
            rest.set(k, val);
        }
        *kv = rest;
        Ok(v)
    };
    let n_train = take(&mut kv, "train", 2000)? as usize;
    let n_test = take(&mut kv, "test", 500)? as usize;
    let gen_seed = take(&mut kv, "gen_seed", 1)?;

    let mut gen_kv = KvConfig::new();
    let mut run_kv = KvConfig::new();
    for (k, v) in kv.iter() {
        match k.strip_prefix("gen.") {
            Some(g) => gen_kv.set(g, v),
            None => run_kv.set(k, v),
        }
    }
    let kv = run_kv;
    let mut gen = GenConfig::from_kv(&gen_kv)?;
    gen.size = n_train + n_test;
    let corpus = synth_corpus(&gen, gen_seed)?;
    let schema = gen.schema()?;
    let train_all = corpus.with_reviews(corpus.reviews[..n_train].to_vec());
    let test = corpus.with_reviews(corpus.reviews[n_train..].to_vec());

    let run = RunConfig::from_kv(&kv)?;
    let (train_set, val_set) = split_validation(&train_all, run.train.val_fraction, run.train.seed)?;
    println!("vocab {} | train {} | val {} | test {}", corpus.vocab.len(), train_set.len(), val_set.len(), test.len());

    let start = Instant::now();
    let outcome = train_with_progress(&train_set, &val_set, &schema, &run, None, |r| {
        println!(
            "epoch {:>3} {:?}: loss {:>10.3} acd {:>10.3} rp {:>9.3} | val rp {:.4} acd-f1 {:.4} acsa {:.4} | {:.1}s",
            r.epoch,
            r.phase,
            r.loss,
            r.loss_acd,
            r.loss_rp,
            r.val_acc_rp.unwrap_or(f64::NAN),
            r.val_f1_acd.unwrap_or(f64::NAN),
            r.val_acc_acsa.unwrap_or(f64::NAN),
            start.elapsed().as_secs_f64()
        );
    })?;
    println!("best epoch {}", outcome.best.epoch);
    let report = evaluate(&outcome.model, &test, &schema, &EvalOptions::default())?;
    print!("{report}");

    // ACD F1 across detection thresholds
    let gold: Vec<Vec<usize>> = test
        .reviews
        .iter()
        .map(|r| r.gold_aspects.iter().filter_map(|(n, _)| schema.index_of(n)).collect())
        .collect();
    let ps: Vec<Vec<f64>> = test
        .reviews
        .iter()
        .map(|r| outcome.model.forward(r).map(|o| o.p))
        .collect::<Result<_, _>>()?;
    for th in [1e-4, 1e-3, 1e-2, 0.05, 0.1, 0.2, 0.3] {
        let pred: Vec<Vec<usize>> = ps.iter().map(|p| dspn::acd::detect_aspects(p, th)).collect::<Result<_, _>>()?;
        println!("  threshold {th:<7} ACD F1 {:.4}", dspn::metrics::acd_f1(&pred, &gold)?);
    }
    Ok(())
}
