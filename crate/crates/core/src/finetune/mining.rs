//! Exact hard-negative mining with the current retriever.

use std::collections::HashSet;

use log::warn;

use super::io::TrainTriple;
use crate::error::Result;
use crate::model::Retriever;
use crate::representation::{represent_document, represent_query, HybridVector};
use crate::retrieval::HybridIndex;
use crate::text::{Qrels, TokenizedCollection};

/// Hybrid vectors for every entry of a collection, in collection order.
pub fn encode_collection(model: &Retriever<f32>, docs: &TokenizedCollection, k: usize) -> Result<Vec<(String, HybridVector)>> {
    docs.iter().map(|(id, seq)| Ok((id.to_string(), represent_document(model, seq, k)?))).collect()
}

/// For every judged query with text: one triple per positive, whose
/// negatives are the top `n` non-relevant documents under brute-force
/// scoring.
pub fn mine_hard_negatives(
    model: &Retriever<f32>,
    queries: &TokenizedCollection,
    corpus: &TokenizedCollection,
    qrels: &Qrels,
    n: usize,
    k: usize,
) -> Result<Vec<TrainTriple>> {
    let index = HybridIndex::build(model.dims.dense_dim, k, &encode_collection(model, corpus, k)?)?;
    let mut out = Vec::new();
    for q in qrels.queries() {
        let positives = qrels.positives(q);
        if positives.is_empty() {
            warn!("query {q} has no relevant documents; skipped");
            continue;
        }
        let Some(seq) = queries.get(q) else {
            warn!("query {q} has judgments but no text; skipped");
            continue;
        };
        let rep = represent_query(model, seq)?;
        let relevant: HashSet<&str> = positives.iter().copied().collect();
        let negatives: Vec<String> = index
            .search(&rep, n + positives.len())?
            .into_iter()
            .map(|(d, _)| d)
            .filter(|d| !relevant.contains(d.as_str()))
            .take(n)
            .collect();
        for p in positives {
            out.push(TrainTriple { query_id: q.to_string(), positive: p.to_string(), negatives: negatives.clone() });
        }
    }
    Ok(out)
}
