//! Teachers for soft-label distillation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::io::{TeacherScores, TrainTriple};
use crate::config::{ModelConfig, TeacherConfig};
use crate::encoder::encoder_forward;
use crate::error::{Error, Result};
use crate::model::{check_architecture, copy_matching, cross_encoder_architecture, init_params, EncoderIds, ModelDims, Retriever};
use crate::pretrain::lr_schedule;
use crate::tensor::{Graph, OptimizerState, ParamId, Params, Scalar, Tensor, Var, MASK_NEG};
use crate::text::{Corpus, Qrels, QuerySet, Vocabulary};

/// Encoder over `[CLS] q [SEP] d [SEP]` with a scalar head on `[CLS]`.
#[derive(Clone, Debug)]
pub struct CrossEncoder<T: Scalar = f32> {
    pub dims: ModelDims,
    pub params: Params<T>,
    pub encoder: EncoderIds,
    pub head_w: ParamId,
    pub head_b: ParamId,
    pub ln_eps: f64,
}

impl<T: Scalar> CrossEncoder<T> {
    pub fn init(dims: ModelDims, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&cross_encoder_architecture(&dims), cfg.init_std, seed)?;
        Self::from_params(dims, params, cfg.ln_eps)
    }

    /// Fresh head on top of a copy of `retriever`'s encoder.
    pub fn from_retriever(retriever: &Retriever<T>, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut ce = Self::init(retriever.dims, cfg, seed)?;
        copy_matching(&mut ce.params, &retriever.params);
        Ok(ce)
    }

    pub fn from_params(dims: ModelDims, params: Params<T>, ln_eps: f64) -> Result<Self> {
        check_architecture(&params, &cross_encoder_architecture(&dims))?;
        let encoder = EncoderIds::resolve(&params, dims.n_layers)?;
        let (head_w, head_b) = (params.id("ce.head.w")?, params.id("ce.head.b")?);
        Ok(CrossEncoder { dims, params, encoder, head_w, head_b, ln_eps })
    }

    /// Relevance scores of pair sequences, shape `[P]`.
    pub fn score_batch(&self, g: &mut Graph<T>, pairs: &[&[u32]]) -> Result<Var> {
        let enc = encoder_forward(g, &self.params, &self.encoder, &self.dims, self.ln_eps, pairs)?;
        let rows: Vec<usize> = (0..pairs.len()).map(|s| enc.segments.row(s, 0)).collect();
        let cls = g.gather_rows(enc.hidden, &rows)?;
        let w = g.param(&self.params, self.head_w)?;
        let b = g.param(&self.params, self.head_b)?;
        let s = g.matmul(cls, w, false)?;
        let s = g.add_row(s, b)?;
        g.reshape(s, vec![pairs.len()])
    }

    pub fn score(&self, pair: &[u32]) -> Result<f64> {
        let mut g = Graph::new();
        let s = self.score_batch(&mut g, &[pair])?;
        Ok(g.value(s)[0].as_f64())
    }
}

/// Cross-entropy of the positive (candidate 0) against each group's
/// candidates, averaged over groups. `group_sizes` partitions `scores`.
pub fn grouped_ranking_loss<T: Scalar>(g: &mut Graph<T>, scores: Var, group_sizes: &[usize]) -> Result<Var> {
    let c = group_sizes.iter().copied().max().unwrap_or(0);
    if c == 0 || group_sizes.contains(&0) {
        return Err(Error::Usage("every candidate group needs at least one score".into()));
    }
    let mut idx = Vec::with_capacity(group_sizes.len() * c);
    let mut mask = Vec::with_capacity(group_sizes.len() * c);
    let mut off = 0;
    for &n in group_sizes {
        for j in 0..c {
            idx.push(off + j.min(n - 1));
            mask.push(if j < n { T::zero() } else { T::lit(MASK_NEG) });
        }
        off += n;
    }
    let x = g.gather_elems(scores, &idx)?;
    let x = g.reshape(x, vec![group_sizes.len(), c])?;
    let m = g.constant(&Tensor::new(vec![group_sizes.len(), c], mask)?)?;
    let x = g.add(x, m)?;
    g.cross_entropy(x, &vec![0; group_sizes.len()])
}

fn text_of<'a>(texts: &'a QuerySet, id: &str, what: &str) -> Result<&'a str> {
    texts.get(id).ok_or_else(|| Error::Validation(format!("unknown {what} id {id}")))
}

fn candidate_pairs(t: &TrainTriple, vocab: &Vocabulary, queries: &QuerySet, corpus: &Corpus, max_len: usize, hard_negatives: usize) -> Result<Vec<Vec<u32>>> {
    let q = text_of(queries, &t.query_id, "query")?;
    std::iter::once(&t.positive)
        .chain(t.negatives.iter().take(hard_negatives))
        .map(|d| Ok(vocab.encode_pair(q, text_of(corpus, d, "document")?, max_len)))
        .collect()
}

/// Train the cross-encoder to rank each triple's positive above its
/// negatives. Returns the loss of every step.
#[allow(clippy::too_many_arguments)]
pub fn train_cross_encoder(
    ce: &mut CrossEncoder<f32>,
    vocab: &Vocabulary,
    queries: &QuerySet,
    corpus: &Corpus,
    triples: &[TrainTriple],
    cfg: &TeacherConfig,
    hard_negatives: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if triples.is_empty() {
        return Err(Error::Usage("cross-encoder training needs at least one triple".into()));
    }
    let groups = triples
        .iter()
        .map(|t| candidate_pairs(t, vocab, queries, corpus, ce.dims.max_len, hard_negatives))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batches = Vec::new();
    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..groups.len()).collect();
        order.shuffle(&mut rng);
        batches.extend(order.chunks(cfg.batch_size.max(1)).map(<[usize]>::to_vec));
    }
    let mut opt = OptimizerState::new(cfg.optimizer.clone(), ce.params.len());
    let total = batches.len();
    let mut losses = Vec::with_capacity(total);
    for (step, batch) in batches.into_iter().enumerate() {
        let pairs: Vec<&[u32]> = batch.iter().flat_map(|&i| groups[i].iter().map(Vec::as_slice)).collect();
        let sizes: Vec<usize> = batch.iter().map(|&i| groups[i].len()).collect();
        ce.params.zero_grad();
        let mut g = Graph::new();
        let s = ce.score_batch(&mut g, &pairs)?;
        let l = grouped_ranking_loss(&mut g, s, &sizes)?;
        g.backward(l, &mut ce.params)?;
        opt.step(&mut ce.params, lr_schedule(step, (total / 10).max(1), total))?;
        losses.push(g.scalar(l)?.as_f64());
    }
    Ok(losses)
}

pub enum Teacher {
    CrossEncoder(CrossEncoder<f32>),
    /// Scores are the qrels grades; unjudged pairs score 0.
    Oracle(Qrels),
}

/// Teacher scores for every `(query, candidate)` of the triples.
pub fn teacher_scores(
    teacher: &Teacher,
    triples: &[TrainTriple],
    vocab: &Vocabulary,
    queries: &QuerySet,
    corpus: &Corpus,
    hard_negatives: usize,
) -> Result<TeacherScores> {
    let mut out = TeacherScores::new();
    for t in triples {
        let cands: Vec<&String> = std::iter::once(&t.positive).chain(t.negatives.iter().take(hard_negatives)).collect();
        match teacher {
            Teacher::Oracle(qrels) => {
                for d in cands {
                    out.insert(t.query_id.clone(), d.clone(), qrels.grade(&t.query_id, d) as f64);
                }
            }
            Teacher::CrossEncoder(ce) => {
                let pairs = candidate_pairs(t, vocab, queries, corpus, ce.dims.max_len, hard_negatives)?;
                for (d, p) in cands.into_iter().zip(&pairs) {
                    out.insert(t.query_id.clone(), d.clone(), ce.score(p)?);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_sigma_is_softmax_of_grades() {
        let mut qrels = Qrels::new();
        qrels.insert("q", "pos", 1);
        let t = vec![TrainTriple { query_id: "q".into(), positive: "pos".into(), negatives: vec!["neg".into()] }];
        let vocab = Vocabulary::build(["a"], 6).unwrap();
        let s = teacher_scores(&Teacher::Oracle(qrels), &t, &vocab, &QuerySet::new(), &Corpus::new(), 8).unwrap();
        let sig = s.sigma("q", &["pos", "neg"]).unwrap();
        assert!((sig[0] - 0.731).abs() < 1e-3 && (sig[1] - 0.269).abs() < 1e-3);
    }

    #[test]
    fn equal_scores_give_even_sigma() {
        let mut s = TeacherScores::new();
        s.insert("q", "a", 0.7);
        s.insert("q", "b", 0.7);
        assert_eq!(s.sigma("q", &["a", "b"]).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn grouped_loss_matches_per_group_cross_entropy() {
        let mut g = Graph::<f64>::new();
        let s = g.constant(&Tensor::new(vec![5], vec![1.0, 0.0, -1.0, 2.0, 0.5]).unwrap()).unwrap();
        let l = grouped_ranking_loss(&mut g, s, &[3, 2]).unwrap();
        let ce = |x: &[f64]| -crate::tensor::log_softmax_vec(x)[0];
        let expect = (ce(&[1.0, 0.0, -1.0]) + ce(&[2.0, 0.5])) / 2.0;
        assert!((g.scalar(l).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn cross_encoder_overfits_eight_pairs() {
        let corpus = Corpus::from_pairs((0..8).map(|i| (format!("d{i}"), format!("topic{i} words about thing{i} and more")))).unwrap();
        let queries = QuerySet::from_pairs((0..4).map(|i| (format!("q{i}"), format!("thing{}", 2 * i)))).unwrap();
        let vocab = Vocabulary::build(corpus.texts().chain(queries.texts()), 64).unwrap();
        let triples: Vec<TrainTriple> = (0..4)
            .map(|i| TrainTriple { query_id: format!("q{i}"), positive: format!("d{}", 2 * i), negatives: vec![format!("d{}", 2 * i + 1)] })
            .collect();
        let dims = ModelDims { n_layers: 1, d: 32, n_heads: 2, d_ff: 64, vocab: vocab.len(), max_len: 24, decoder_heads: 1, dense_dim: 8 };
        let mut ce = CrossEncoder::<f32>::init(dims, &ModelConfig::default(), 1).unwrap();
        let cfg = TeacherConfig { epochs: 150, batch_size: 4, optimizer: crate::tensor::AdamWConfig { lr: 3e-3, ..Default::default() }, ..TeacherConfig::default() };
        train_cross_encoder(&mut ce, &vocab, &queries, &corpus, &triples, &cfg, 8, 0).unwrap();
        let scores = teacher_scores(&Teacher::CrossEncoder(ce), &triples, &vocab, &queries, &corpus, 8).unwrap();
        let correct = triples
            .iter()
            .filter(|t| scores.get(&t.query_id, &t.positive).unwrap() > scores.get(&t.query_id, &t.negatives[0]).unwrap())
            .count();
        assert_eq!(correct, 4, "each positive must outscore its negative (8 labeled pairs)");
    }
}
