//! Three-stage contrastive fine-tuning of the hybrid representation.
//!
//! 1. In-batch negatives.
//! 2. Mined hard negatives plus in-batch documents.
//! 3. Soft labels from a teacher over each query's `{d+, D-}`.

pub mod io;
pub mod mining;
pub mod teacher;

use std::collections::HashSet;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{FinetuneConfig, RepresentationConfig};
use crate::error::{Error, Result};
use crate::model::Retriever;
use crate::pretrain::lr_schedule;
use crate::representation::{represent_batch, score_matrix};
use crate::tensor::{Graph, OptimizerState, Scalar, Tensor, Var, MASK_NEG};
use crate::text::{Qrels, TokenizedCollection};

pub use io::{load_teacher_scores, load_triples, save_teacher_scores, save_triples, TeacherScores, TrainTriple};
pub use mining::{encode_collection, mine_hard_negatives};
pub use teacher::{teacher_scores, train_cross_encoder, CrossEncoder, Teacher};

/// Parameters updated during fine-tuning: everything the representation
/// reads; the pre-training heads stay frozen.
pub fn finetune_trains(name: &str) -> bool {
    !(name.starts_with("dec.") || name.starts_with("mlm."))
}

fn additive_mask<T: Scalar>(rows: usize, cols: usize, hidden: &[Vec<usize>]) -> Option<Vec<T>> {
    if hidden.iter().all(Vec::is_empty) {
        return None;
    }
    let mut m = vec![T::zero(); rows * cols];
    for (r, cs) in hidden.iter().enumerate() {
        for &c in cs {
            m[r * cols + c] = T::lit(MASK_NEG);
        }
    }
    Some(m)
}

/// Mean over rows of `-log softmax(scores / tau)[label]`, with the listed
/// columns of each row removed from its denominator.
pub fn contrastive_loss<T: Scalar>(g: &mut Graph<T>, scores: Var, labels: &[usize], hidden: &[Vec<usize>], temperature: f64) -> Result<Var> {
    let shape = g.shape(scores).to_vec();
    let [b, c] = shape[..] else {
        return Err(Error::shape("contrastive_loss", format!("scores of shape {shape:?}")));
    };
    if labels.len() != b || hidden.len() != b {
        return Err(Error::shape("contrastive_loss", format!("{} labels and {} exclusion rows for {b} queries", labels.len(), hidden.len())));
    }
    if labels.iter().zip(hidden).any(|(l, h)| h.contains(l)) {
        return Err(Error::Validation("a positive is excluded from its own softmax".into()));
    }
    let mut x = g.scale(scores, T::lit(1.0 / temperature))?;
    if let Some(m) = additive_mask(b, c, hidden) {
        let m = g.constant(&Tensor::new(vec![b, c], m)?)?;
        x = g.add(x, m)?;
    }
    g.cross_entropy(x, labels)
}

/// In-batch contrastive loss; `scores[i][j] = <q_i, d_j>` with `d_i` the
/// positive of `q_i`.
pub fn stage1_loss<T: Scalar>(g: &mut Graph<T>, scores: Var, hidden: &[Vec<usize>], temperature: f64) -> Result<Var> {
    let b = g.shape(scores)[0];
    if b < 2 {
        return Err(Error::Usage(format!("in-batch contrastive loss needs at least 2 queries, got {b}")));
    }
    let labels: Vec<usize> = (0..b).collect();
    contrastive_loss(g, scores, &labels, hidden, temperature)
}

/// Contrastive loss over the batch positives (first `B` columns) and the
/// hard negatives (remaining columns).
pub fn stage2_loss<T: Scalar>(g: &mut Graph<T>, scores: Var, hidden: &[Vec<usize>], temperature: f64) -> Result<Var> {
    stage1_loss(g, scores, hidden, temperature)
}

/// `-mean_q sum_d sigma_q[d] log softmax(scores_q / tau)[d]` over each
/// row's candidate columns; other columns must carry `sigma = 0` and are
/// listed in `hidden`.
pub fn kd_loss<T: Scalar>(g: &mut Graph<T>, scores: Var, sigma: &[Vec<T>], hidden: &[Vec<usize>], temperature: f64) -> Result<Var> {
    let shape = g.shape(scores).to_vec();
    let [b, c] = shape[..] else {
        return Err(Error::shape("kd_loss", format!("scores of shape {shape:?}")));
    };
    if sigma.len() != b || sigma.iter().any(|r| r.len() != c) || hidden.len() != b {
        return Err(Error::shape("kd_loss", format!("soft labels do not match scores of shape {shape:?}")));
    }
    for (q, row) in sigma.iter().enumerate() {
        let total: f64 = row.iter().map(|x| x.as_f64()).sum();
        if (total - 1.0).abs() > 1e-6 || row.iter().any(|x| x.as_f64() < 0.0) {
            return Err(Error::Validation(format!("soft labels of query row {q} sum to {total}, not 1")));
        }
        if hidden[q].iter().any(|&j| row[j] != T::zero()) {
            return Err(Error::Validation(format!("soft labels of query row {q} put mass outside its candidates")));
        }
    }
    let mut x = g.scale(scores, T::lit(1.0 / temperature))?;
    if let Some(m) = additive_mask(b, c, hidden) {
        let m = g.constant(&Tensor::new(vec![b, c], m)?)?;
        x = g.add(x, m)?;
    }
    let logp = g.log_softmax(x)?;
    let weighted = g.mul_const(logp, sigma.concat())?;
    let s = g.sum(weighted)?;
    g.scale(s, T::lit(-1.0 / b as f64))
}

/// Everything a training stage reads besides the model.
pub struct FinetuneData<'a> {
    pub queries: &'a TokenizedCollection,
    pub corpus: &'a TokenizedCollection,
    pub qrels: &'a Qrels,
}

impl FinetuneData<'_> {
    fn query(&self, id: &str) -> Result<&[u32]> {
        self.queries.get(id).ok_or_else(|| Error::Validation(format!("unknown query id {id}")))
    }

    fn doc(&self, id: &str) -> Result<&[u32]> {
        self.corpus.get(id).ok_or_else(|| Error::Validation(format!("unknown document id {id}")))
    }

    /// Columns of `docs` that are judged relevant to `query` but are not
    /// column `own`.
    fn false_negatives(&self, query: &str, docs: &[&str], own: Option<usize>) -> Vec<usize> {
        let positives: HashSet<&str> = self.qrels.positives(query).into_iter().collect();
        docs.iter()
            .enumerate()
            .filter(|&(j, d)| Some(j) != own && positives.contains(d))
            .map(|(j, _)| j)
            .collect()
    }
}

/// Shared state of one stage's optimization loop.
struct Trainer<'m> {
    model: &'m mut Retriever<f32>,
    opt: OptimizerState<f32>,
    repr: RepresentationConfig,
    temperature: f64,
    total_steps: usize,
    step: usize,
}

impl<'m> Trainer<'m> {
    fn new(model: &'m mut Retriever<f32>, cfg: &FinetuneConfig, repr: &RepresentationConfig, total_steps: usize) -> Self {
        model.params.set_trainable(finetune_trains);
        let opt = OptimizerState::new(cfg.optimizer.clone(), model.params.len());
        Trainer { model, opt, repr: repr.clone(), temperature: cfg.temperature, total_steps, step: 0 }
    }

    /// Score queries against documents and apply one update.
    fn update(&mut self, queries: &[&[u32]], docs: &[&[u32]], loss: impl FnOnce(&mut Graph<f32>, Var, f64) -> Result<Var>) -> Result<f64> {
        self.model.params.zero_grad();
        let mut g = Graph::new();
        let k = self.repr.sparse_k;
        let q = represent_batch(&mut g, self.model, queries, self.repr.symmetric.then_some(k))?;
        let d = represent_batch(&mut g, self.model, docs, Some(k))?;
        let s = score_matrix(&mut g, q, d)?;
        let l = loss(&mut g, s, self.temperature)?;
        g.backward(l, &mut self.model.params)?;
        let warmup = (self.total_steps / 10).max(1);
        self.opt.step(&mut self.model.params, lr_schedule(self.step, warmup, self.total_steps))?;
        self.step += 1;
        Ok(g.scalar(l)?.as_f64())
    }
}

impl Drop for Trainer<'_> {
    fn drop(&mut self) {
        self.model.params.set_trainable(|_| true);
    }
}

fn epoch_batches<E: Clone>(examples: &[E], batch: usize, epochs: usize, min_batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<E>> {
    let mut out = Vec::new();
    for _ in 0..epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(rng);
        for chunk in order.chunks(batch.max(1)) {
            if chunk.len() < min_batch {
                warn!("dropping a trailing batch of {} examples", chunk.len());
                continue;
            }
            out.push(chunk.iter().map(|&i| examples[i].clone()).collect());
        }
    }
    out
}

/// `(query, positive)` pairs for every judged-relevant pair with text.
pub fn positive_pairs(data: &FinetuneData) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for q in data.qrels.queries() {
        if data.queries.get(q).is_none() {
            warn!("query {q} has judgments but no text; skipped");
            continue;
        }
        for d in data.qrels.positives(q) {
            out.push((q.to_string(), d.to_string()));
        }
    }
    out
}

/// Stage 1: in-batch negatives. Returns the loss of every step.
pub fn train_stage1(model: &mut Retriever<f32>, data: &FinetuneData, cfg: &FinetuneConfig, repr: &RepresentationConfig, seed: u64) -> Result<Vec<f64>> {
    let pairs = positive_pairs(data);
    if pairs.len() < 2 {
        return Err(Error::Usage(format!("stage 1 needs at least 2 relevant pairs, found {}", pairs.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batches = epoch_batches(&pairs, cfg.batch_size, cfg.stage1_epochs, 2, &mut rng);
    let mut trainer = Trainer::new(model, cfg, repr, batches.len());
    let mut losses = Vec::with_capacity(batches.len());
    for batch in batches {
        let qs = batch.iter().map(|(q, _)| data.query(q)).collect::<Result<Vec<_>>>()?;
        let ds = batch.iter().map(|(_, d)| data.doc(d)).collect::<Result<Vec<_>>>()?;
        let doc_ids: Vec<&str> = batch.iter().map(|(_, d)| d.as_str()).collect();
        let hidden: Vec<Vec<usize>> = batch.iter().enumerate().map(|(i, (q, _))| data.false_negatives(q, &doc_ids, Some(i))).collect();
        losses.push(trainer.update(&qs, &ds, |g, s, t| stage1_loss(g, s, &hidden, t))?);
    }
    Ok(losses)
}

fn check_triples(triples: &[TrainTriple]) -> Result<()> {
    for t in triples {
        if t.negatives.contains(&t.positive) {
            return Err(Error::Validation(format!("query {}: positive {} is also listed as a hard negative", t.query_id, t.positive)));
        }
    }
    Ok(())
}

/// Stage 2: hard negatives plus in-batch documents.
pub fn train_stage2(
    model: &mut Retriever<f32>,
    data: &FinetuneData,
    triples: &[TrainTriple],
    cfg: &FinetuneConfig,
    repr: &RepresentationConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    check_triples(triples)?;
    if triples.len() < 2 {
        return Err(Error::Usage(format!("stage 2 needs at least 2 training triples, found {}", triples.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batches = epoch_batches(triples, cfg.batch_size, cfg.stage2_epochs, 2, &mut rng);
    let mut trainer = Trainer::new(model, cfg, repr, batches.len());
    let mut losses = Vec::with_capacity(batches.len());
    for batch in batches {
        let mut doc_ids: Vec<&str> = batch.iter().map(|t| t.positive.as_str()).collect();
        doc_ids.extend(batch.iter().flat_map(|t| t.negatives.iter().take(cfg.hard_negatives).map(String::as_str)));
        let qs = batch.iter().map(|t| data.query(&t.query_id)).collect::<Result<Vec<_>>>()?;
        let ds = doc_ids.iter().map(|d| data.doc(d)).collect::<Result<Vec<_>>>()?;
        let hidden: Vec<Vec<usize>> = batch.iter().enumerate().map(|(i, t)| data.false_negatives(&t.query_id, &doc_ids, Some(i))).collect();
        losses.push(trainer.update(&qs, &ds, |g, s, t| stage2_loss(g, s, &hidden, t))?);
    }
    Ok(losses)
}

/// Stage 3: distillation from teacher scores over each query's `{d+, D-}`.
pub fn train_stage3(
    model: &mut Retriever<f32>,
    data: &FinetuneData,
    triples: &[TrainTriple],
    teacher: &TeacherScores,
    cfg: &FinetuneConfig,
    repr: &RepresentationConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    check_triples(triples)?;
    if triples.is_empty() {
        return Err(Error::Usage("stage 3 needs at least one training triple".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batches = epoch_batches(triples, cfg.batch_size, cfg.stage3_epochs, 1, &mut rng);
    let mut trainer = Trainer::new(model, cfg, repr, batches.len());
    let mut losses = Vec::with_capacity(batches.len());
    for batch in batches {
        let mut doc_ids: Vec<&str> = Vec::new();
        let mut spans = Vec::with_capacity(batch.len());
        let mut sig = Vec::with_capacity(batch.len());
        for t in &batch {
            let cands: Vec<&str> = std::iter::once(t.positive.as_str()).chain(t.negatives.iter().take(cfg.hard_negatives).map(String::as_str)).collect();
            sig.push(teacher.sigma(&t.query_id, &cands)?);
            spans.push((doc_ids.len(), cands.len()));
            doc_ids.extend(cands);
        }
        let c = doc_ids.len();
        let mut sigma = vec![vec![0f32; c]; batch.len()];
        let mut hidden = vec![Vec::new(); batch.len()];
        for (i, (&(start, len), s)) in spans.iter().zip(&sig).enumerate() {
            for (j, &p) in s.iter().enumerate() {
                sigma[i][start + j] = p as f32;
            }
            hidden[i] = (0..c).filter(|&j| j < start || j >= start + len).collect();
            // Renormalize in f32 so the rows pass the sum check exactly.
            let total: f32 = sigma[i].iter().sum();
            sigma[i].iter_mut().for_each(|x| *x /= total);
        }
        let qs = batch.iter().map(|t| data.query(&t.query_id)).collect::<Result<Vec<_>>>()?;
        let ds = doc_ids.iter().map(|d| data.doc(d)).collect::<Result<Vec<_>>>()?;
        losses.push(trainer.update(&qs, &ds, |g, s, t| kd_loss(g, s, &sigma, &hidden, t))?);
    }
    Ok(losses)
}
