//! Topic-structured synthetic collections for toy-scale experiments.
//!
//! Each document belongs to one topic and mixes Zipf-distributed topic
//! words, shared filler words and a few off-topic words. Every document
//! also repeats a small set of rare signature words. A query names one
//! target document through some of its signature and topic words.

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::{index::sample, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{Corpus, Qrels, QuerySet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_docs: usize,
    pub n_queries: usize,
    pub n_topics: usize,
    pub words_per_topic: usize,
    pub filler_words: usize,
    pub rare_words: usize,
    /// Signature words per document.
    pub signature: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Signature words and topic words per query.
    pub query_signature: usize,
    pub query_topic: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_docs: 2048,
            n_queries: 256,
            n_topics: 16,
            words_per_topic: 16,
            filler_words: 32,
            rare_words: 128,
            signature: 2,
            min_len: 8,
            max_len: 12,
            query_signature: 2,
            query_topic: 2,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthData {
    pub corpus: Corpus,
    pub queries: QuerySet,
    pub qrels: Qrels,
    /// Topic of every document, in corpus order.
    pub topics: Vec<usize>,
}

fn zipf(n: usize) -> WeightedIndex<f64> {
    WeightedIndex::new((1..=n).map(|r| 1.0 / r as f64)).expect("positive weights")
}

pub fn doc_id(i: usize) -> String {
    format!("d{i:05}")
}

pub fn query_id(i: usize) -> String {
    format!("q{i:05}")
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    if cfg.n_docs == 0 || cfg.n_topics == 0 || cfg.words_per_topic == 0 || cfg.filler_words == 0 {
        return Err(Error::Usage("synthetic collection sizes must be positive".into()));
    }
    if cfg.min_len < cfg.signature * 2 + 1 || cfg.max_len < cfg.min_len {
        return Err(Error::Usage("document lengths must fit the signature words".into()));
    }
    if cfg.n_queries > cfg.n_docs {
        return Err(Error::Usage(format!("{} queries need as many distinct target documents, only {} exist", cfg.n_queries, cfg.n_docs)));
    }
    if cfg.signature > cfg.rare_words || cfg.query_signature > cfg.signature {
        return Err(Error::Usage("signature sizes exceed the rare-word pool".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let topic_dist = zipf(cfg.words_per_topic);
    let filler_dist = zipf(cfg.filler_words);

    let mut corpus = Corpus::new();
    let mut topics = Vec::with_capacity(cfg.n_docs);
    let mut signatures = Vec::with_capacity(cfg.n_docs);
    let mut topic_words = Vec::with_capacity(cfg.n_docs);
    for i in 0..cfg.n_docs {
        let t = rng.gen_range(0..cfg.n_topics);
        let len = rng.gen_range(cfg.min_len..=cfg.max_len);
        let sig: Vec<String> = sample(&mut rng, cfg.rare_words, cfg.signature).iter().map(|r| format!("r{r}")).collect();
        let mut words: Vec<String> = sig.iter().chain(&sig).cloned().collect();
        let mut own = Vec::new();
        while words.len() < len {
            let x: f64 = rng.gen();
            if x < 0.6 {
                let w = format!("t{t}w{}", topic_dist.sample(&mut rng));
                own.push(w.clone());
                words.push(w);
            } else if x < 0.9 {
                words.push(format!("f{}", filler_dist.sample(&mut rng)));
            } else {
                let other = rng.gen_range(0..cfg.n_topics);
                words.push(format!("t{other}w{}", topic_dist.sample(&mut rng)));
            }
        }
        words.shuffle(&mut rng);
        corpus.push(doc_id(i), words.join(" "))?;
        topics.push(t);
        signatures.push(sig);
        own.sort();
        own.dedup();
        topic_words.push(own);
    }

    let mut queries = QuerySet::new();
    let mut qrels = Qrels::new();
    let targets = sample(&mut rng, cfg.n_docs, cfg.n_queries);
    for (qi, d) in targets.iter().enumerate() {
        let mut words: Vec<String> = signatures[d].choose_multiple(&mut rng, cfg.query_signature).cloned().collect();
        words.extend(topic_words[d].choose_multiple(&mut rng, cfg.query_topic).cloned());
        words.shuffle(&mut rng);
        queries.push(query_id(qi), words.join(" "))?;
        qrels.insert(query_id(qi), doc_id(d), 1);
    }
    Ok(SynthData { corpus, queries, qrels, topics })
}

/// Split queries (and their judgments) into two disjoint parts; the first
/// `n_first` queries in id order go to the first part.
pub fn split_queries(data: &SynthData, n_first: usize) -> Result<((QuerySet, Qrels), (QuerySet, Qrels))> {
    let mut parts = [(QuerySet::new(), Qrels::new()), (QuerySet::new(), Qrels::new())];
    for (i, (id, text)) in data.queries.iter().enumerate() {
        let p = &mut parts[usize::from(i >= n_first)];
        p.0.push(id, text)?;
        if let Some(j) = data.qrels.judged(id) {
            for (d, &g) in j {
                p.1.insert(id, d.as_str(), g);
            }
        }
    }
    let [a, b] = parts;
    Ok((a, b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig { n_docs: 50, n_queries: 10, n_topics: 4, ..SynthConfig::default() }
    }

    #[test]
    fn shapes_and_judgments() {
        let d = generate(&small()).unwrap();
        assert_eq!(d.corpus.len(), 50);
        assert_eq!(d.queries.len(), 10);
        assert_eq!(d.qrels.len(), 10);
        d.qrels.validate(&d.corpus).unwrap();
        for (_, text) in d.corpus.iter() {
            let n = text.split(' ').count();
            assert!((8..=12).contains(&n));
        }
    }

    #[test]
    fn query_words_come_from_the_target() {
        let d = generate(&small()).unwrap();
        for q in d.qrels.queries() {
            let target = d.qrels.positives(q)[0];
            let doc: Vec<&str> = d.corpus.get(target).unwrap().split(' ').collect();
            for w in d.queries.get(q).unwrap().split(' ') {
                assert!(doc.contains(&w), "{w} missing from {target}");
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.corpus, b.corpus);
        let c = generate(&SynthConfig { seed: 8, ..small() }).unwrap();
        assert_ne!(a.corpus, c.corpus);
    }

    #[test]
    fn split_is_disjoint() {
        let d = generate(&small()).unwrap();
        let ((qa, ra), (qb, rb)) = split_queries(&d, 6).unwrap();
        assert_eq!((qa.len(), qb.len()), (6, 4));
        assert_eq!((ra.len(), rb.len()), (6, 4));
        assert!(qa.ids().iter().all(|id| !qb.contains(id)));
    }
}
