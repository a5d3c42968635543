//! Shared fixtures for the criterion benchmarks.

use dspn::config::KvConfig;
use dspn::corpus::synth::{synth_corpus, GenConfig};
use dspn::corpus::LabelSource;
use dspn::trainer::RunConfig;
use dspn::{Corpus, Dspn, Polarity, Review};

pub struct Fixture {
    pub corpus: Corpus,
    pub model: Dspn,
    pub labels: Vec<Option<Polarity>>,
}

impl Fixture {
    /// A generated corpus of `size` reviews with `max_len` tokens at most and
    /// a freshly initialised model of width `d_w`.
    pub fn new(size: usize, max_len: usize, d_w: usize) -> Fixture {
        let kv = KvConfig::parse(&format!("size={size}\nmin_len={}\nmax_len={max_len}", max_len / 2)).unwrap();
        let gen = GenConfig::from_kv(&kv).unwrap();
        let corpus = synth_corpus(&gen, 11).unwrap();
        let schema = gen.schema().unwrap();
        let run = RunConfig::from_kv(&KvConfig::parse(&format!("d_w={d_w}")).unwrap()).unwrap();
        let model = Dspn::init(run.model_config(schema.len(), corpus.vocab.len()), &schema, &corpus.vocab, None, 3).unwrap();
        let labels = corpus.reviews.iter().map(|r| LabelSource::Stars.label(r).unwrap()).collect();
        Fixture { corpus, model, labels }
    }

    pub fn batch(&self, n: usize) -> (Vec<&Review>, &[Option<Polarity>]) {
        (self.corpus.reviews[..n].iter().collect(), &self.labels[..n])
    }
}
