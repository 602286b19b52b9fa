//! Exact hybrid index, top-k search and ranking metrics.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use log::warn;

use crate::error::{Error, Result};
use crate::representation::{HybridVector, QueryRepresentation};
use crate::text::data::{data_lines, parse_err, read_utf8};
use crate::text::Qrels;

/// Ranked `(doc id, score)` pairs: score descending, then doc id ascending.
pub type RankedList = Vec<(String, f32)>;

/// Ranked lists keyed by query id.
pub type Run = BTreeMap<String, RankedList>;

/// Dense matrix plus inverted lists over the documents' retained ids.
#[derive(Clone, Debug, PartialEq)]
pub struct HybridIndex {
    dense_dim: usize,
    k: usize,
    doc_ids: Vec<String>,
    dense: Vec<f32>,
    /// vocab id -> `(doc ordinal, weight)`, ordinals ascending.
    postings: BTreeMap<u32, Vec<(u32, f32)>>,
}

impl HybridIndex {
    pub fn build(dense_dim: usize, k: usize, docs: &[(String, HybridVector)]) -> Result<Self> {
        let mut seen = HashSet::with_capacity(docs.len());
        let mut idx = HybridIndex { dense_dim, k, doc_ids: Vec::with_capacity(docs.len()), dense: Vec::with_capacity(docs.len() * dense_dim), postings: BTreeMap::new() };
        for (ord, (id, v)) in docs.iter().enumerate() {
            if !seen.insert(id.as_str()) {
                return Err(Error::Validation(format!("duplicate document id {id}")));
            }
            if v.dense.len() != dense_dim || v.sparse.len() != k {
                return Err(Error::shape("build_index", format!("document {id} has {}+{} entries, index expects {dense_dim}+{k}", v.dense.len(), v.sparse.len())));
            }
            idx.doc_ids.push(id.clone());
            idx.dense.extend_from_slice(&v.dense);
            for &(i, w) in &v.sparse {
                idx.postings.entry(i).or_default().push((ord as u32, w));
            }
        }
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn dense_dim(&self) -> usize {
        self.dense_dim
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn num_postings(&self) -> usize {
        self.postings.values().map(Vec::len).sum()
    }

    /// Exact score of every document, in ordinal order.
    pub fn score_all(&self, q: &QueryRepresentation) -> Result<Vec<f32>> {
        if q.dense.len() != self.dense_dim {
            return Err(Error::shape("search", format!("query dense width {} against index width {}", q.dense.len(), self.dense_dim)));
        }
        let mut sparse = vec![0f64; self.len()];
        for (&i, list) in &self.postings {
            let qv = *q.mu_full.get(i as usize).ok_or_else(|| Error::shape("search", format!("vocabulary id {i} beyond query width {}", q.mu_full.len())))? as f64;
            for &(ord, w) in list {
                sparse[ord as usize] += qv * w as f64;
            }
        }
        Ok(sparse
            .into_iter()
            .enumerate()
            .map(|(ord, s)| {
                let row = &self.dense[ord * self.dense_dim..(ord + 1) * self.dense_dim];
                let dense: f64 = q.dense.iter().zip(row).map(|(&a, &b)| a as f64 * b as f64).sum();
                (dense + s) as f32
            })
            .collect())
    }

    pub fn search(&self, q: &QueryRepresentation, topk: usize) -> Result<RankedList> {
        let scores = self.score_all(q)?;
        Ok(rank(self.doc_ids.iter().map(String::as_str).zip(scores), topk))
    }

    /// Deterministic binary image of the index.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"DPXI");
        for v in [1u32, self.dense_dim as u32, self.k as u32, self.doc_ids.len() as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for id in &self.doc_ids {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
        }
        for x in &self.dense {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out.extend_from_slice(&(self.postings.len() as u32).to_le_bytes());
        for (&i, list) in &self.postings {
            out.extend_from_slice(&i.to_le_bytes());
            out.extend_from_slice(&(list.len() as u32).to_le_bytes());
            for &(ord, w) in list {
                out.extend_from_slice(&ord.to_le_bytes());
                out.extend_from_slice(&w.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { b: bytes, pos: 0 };
        if r.take(4)? != b"DPXI" {
            return Err(Error::Format("not an index file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != 1 {
            return Err(Error::Format(format!("unsupported index version {version}")));
        }
        let (dense_dim, k, n) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let mut doc_ids = Vec::with_capacity(n);
        for _ in 0..n {
            let len = r.u32()? as usize;
            doc_ids.push(String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Format("document id is not UTF-8".into()))?);
        }
        let dense = (0..n * dense_dim).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        let mut postings = BTreeMap::new();
        for _ in 0..r.u32()? {
            let i = r.u32()?;
            let len = r.u32()? as usize;
            let list = (0..len).map(|_| Ok((r.u32()?, r.f32()?))).collect::<Result<Vec<_>>>()?;
            postings.insert(i, list);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after index".into()));
        }
        Ok(HybridIndex { dense_dim, k, doc_ids, dense, postings })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self.b.get(self.pos..self.pos + n).ok_or_else(|| Error::Format("truncated index file".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Sort by score descending then id ascending, keep the first `topk`.
pub fn rank<'a>(scored: impl IntoIterator<Item = (&'a str, f32)>, topk: usize) -> RankedList {
    let mut all: Vec<(&str, f32)> = scored.into_iter().collect();
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    all.truncate(topk);
    all.into_iter().map(|(id, s)| (id.to_string(), s)).collect()
}

/// Mean of a per-query metric over the run's queries that have judgments.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricValue {
    pub mean: f64,
    pub evaluated: usize,
    /// Run queries absent from qrels.
    pub excluded: usize,
}

fn mean_over(run: &Run, qrels: &Qrels, name: &str, per_query: impl Fn(&RankedList, &BTreeMap<String, u32>) -> f64) -> MetricValue {
    let mut sum = 0.0;
    let mut evaluated = 0;
    let mut excluded = 0;
    for (q, list) in run {
        match qrels.judged(q) {
            Some(judged) => {
                sum += per_query(list, judged);
                evaluated += 1;
            }
            None => excluded += 1,
        }
    }
    if excluded > 0 {
        warn!("{name}: {excluded} run queries have no judgments and were excluded");
    }
    MetricValue { mean: if evaluated == 0 { 0.0 } else { sum / evaluated as f64 }, evaluated, excluded }
}

/// Reciprocal rank of the first relevant document within the top `k`.
pub fn reciprocal_rank(list: &RankedList, judged: &BTreeMap<String, u32>, k: usize) -> f64 {
    list.iter()
        .take(k)
        .position(|(d, _)| judged.get(d).is_some_and(|&g| g > 0))
        .map_or(0.0, |r| 1.0 / (r + 1) as f64)
}

/// Fraction of relevant documents retrieved within the top `k`.
pub fn recall(list: &RankedList, judged: &BTreeMap<String, u32>, k: usize) -> f64 {
    let relevant = judged.values().filter(|&&g| g > 0).count();
    if relevant == 0 {
        return 0.0;
    }
    let found = list.iter().take(k).filter(|(d, _)| judged.get(d).is_some_and(|&g| g > 0)).count();
    found as f64 / relevant as f64
}

fn gain(grade: u32) -> f64 {
    2f64.powi(grade as i32) - 1.0
}

/// DCG with gain `2^g - 1` and discount `log2(rank + 1)`, over the ideal DCG.
pub fn ndcg(list: &RankedList, judged: &BTreeMap<String, u32>, k: usize) -> f64 {
    let dcg: f64 = list
        .iter()
        .take(k)
        .enumerate()
        .map(|(r, (d, _))| gain(judged.get(d).copied().unwrap_or(0)) / ((r + 2) as f64).log2())
        .sum();
    let mut ideal: Vec<u32> = judged.values().copied().collect();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = ideal.iter().take(k).enumerate().map(|(r, &g)| gain(g) / ((r + 2) as f64).log2()).sum();
    if idcg == 0.0 {
        0.0
    } else {
        dcg / idcg
    }
}

pub fn mrr_at_k(run: &Run, qrels: &Qrels, k: usize) -> MetricValue {
    mean_over(run, qrels, "mrr", |l, j| reciprocal_rank(l, j, k))
}

pub fn recall_at_k(run: &Run, qrels: &Qrels, k: usize) -> MetricValue {
    mean_over(run, qrels, "recall", |l, j| recall(l, j, k))
}

pub fn ndcg_at_k(run: &Run, qrels: &Qrels, k: usize) -> MetricValue {
    mean_over(run, qrels, "ndcg", |l, j| ndcg(l, j, k))
}

/// The standard metric set, keyed for a metrics JSON file.
pub fn standard_metrics(run: &Run, qrels: &Qrels) -> BTreeMap<String, serde_json::Value> {
    let mrr = mrr_at_k(run, qrels, 10);
    let mut out = BTreeMap::new();
    out.insert("mrr@10".into(), mrr.mean.into());
    out.insert("recall@50".into(), recall_at_k(run, qrels, 50).mean.into());
    out.insert("recall@1000".into(), recall_at_k(run, qrels, 1000).mean.into());
    out.insert("ndcg@10".into(), ndcg_at_k(run, qrels, 10).mean.into());
    out.insert("queries_evaluated".into(), mrr.evaluated.into());
    out.insert("queries_excluded".into(), mrr.excluded.into());
    out
}

/// `query_id<TAB>doc_id<TAB>rank<TAB>score`, ranks from 1.
pub fn save_run(path: &Path, run: &Run) -> Result<()> {
    let mut out = String::new();
    for (q, list) in run {
        for (r, (d, s)) in list.iter().enumerate() {
            out.push_str(&format!("{q}\t{d}\t{}\t{s}\n", r + 1));
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_run(path: &Path) -> Result<Run> {
    let text = read_utf8(path)?;
    let mut rows: BTreeMap<String, Vec<(usize, String, f32)>> = BTreeMap::new();
    for (line_no, line) in data_lines(&text) {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(parse_err(path, line_no, &format!("expected 4 tab-separated fields, found {}", f.len())));
        }
        let rank: usize = f[2].parse().map_err(|_| parse_err(path, line_no, &format!("bad rank {:?}", f[2])))?;
        let score: f32 = f[3].parse().map_err(|_| parse_err(path, line_no, &format!("bad score {:?}", f[3])))?;
        rows.entry(f[0].to_string()).or_default().push((rank, f[1].to_string(), score));
    }
    Ok(rows
        .into_iter()
        .map(|(q, mut v)| {
            v.sort_by_key(|r| r.0);
            (q, v.into_iter().map(|(_, d, s)| (d, s)).collect())
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::representation::score;

    fn hv(dense: &[f32], sparse: &[(u32, f32)]) -> HybridVector {
        HybridVector { dense: dense.to_vec(), sparse: sparse.to_vec() }
    }

    fn judged(pairs: &[(&str, u32)]) -> BTreeMap<String, u32> {
        pairs.iter().map(|&(d, g)| (d.to_string(), g)).collect()
    }

    fn list(ids: &[&str]) -> RankedList {
        ids.iter().enumerate().map(|(i, d)| (d.to_string(), -(i as f32))).collect()
    }

    #[test]
    fn posting_count_and_empty_index() {
        let docs = vec![("a".to_string(), hv(&[1.0], &[(0, 1.0), (3, 2.0)])), ("b".to_string(), hv(&[0.0], &[(3, 1.0), (4, 1.0)]))];
        let idx = HybridIndex::build(1, 2, &docs).unwrap();
        assert_eq!(idx.num_postings(), 4);
        let empty = HybridIndex::build(1, 2, &[]).unwrap();
        let q = QueryRepresentation { dense: vec![1.0], mu_full: vec![0.0; 5] };
        assert!(empty.search(&q, 10).unwrap().is_empty());
        assert_eq!(HybridIndex::build(1, 2, &docs).unwrap().to_bytes(), idx.to_bytes());
        assert_eq!(HybridIndex::from_bytes(&idx.to_bytes()).unwrap(), idx);
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let v = hv(&[1.0], &[(0, 1.0)]);
        assert!(HybridIndex::build(1, 1, &[("a".into(), v.clone()), ("a".into(), v)]).is_err());
    }

    #[test]
    fn search_examples() {
        let q = QueryRepresentation { dense: vec![1.0, 2.0], mu_full: vec![0.1, 0.2, 0.3, 0.4, 0.5] };
        let d = hv(&[0.5, -1.0], &[(2, 0.7), (4, 0.9)]);
        let one = HybridIndex::build(2, 2, &[("d".into(), d.clone())]).unwrap();
        let hits = one.search(&q, 10).unwrap();
        assert_eq!(hits, vec![("d".to_string(), score(&q, &d))]);

        let other = hv(&[0.0, 0.0], &[(0, 0.1), (1, 0.1)]);
        let idx = HybridIndex::build(2, 2, &[("z".into(), d.clone()), ("m".into(), other), ("b".into(), d)]).unwrap();
        let hits = idx.search(&q, 3).unwrap();
        assert_eq!(hits.iter().map(|h| h.0.as_str()).collect::<Vec<_>>(), ["m", "b", "z"]);
        assert_eq!(idx.search(&q, 2).unwrap().len(), 2);
    }

    #[test]
    fn metric_fixtures() {
        let j = judged(&[("a", 1), ("b", 0), ("c", 2)]);
        assert!((ndcg(&list(&["a", "b", "c"]), &j, 3) - 0.688_5).abs() < 1e-4);
        let j1 = judged(&[("r", 1)]);
        assert!((reciprocal_rank(&list(&["x", "y", "r"]), &j1, 10) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(reciprocal_rank(&list(&["x", "y", "r"]), &j1, 2), 0.0);
        assert_eq!(recall(&list(&["a", "x", "c"]), &j, 3), 1.0);
        assert_eq!(recall(&list(&["a", "x", "y"]), &j, 3), 0.5);
    }

    #[test]
    fn unjudged_queries_are_excluded_and_counted() {
        let mut qrels = Qrels::new();
        qrels.insert("q1", "a", 1);
        let mut run = Run::new();
        run.insert("q1".into(), list(&["a"]));
        run.insert("q2".into(), list(&["a"]));
        let m = mrr_at_k(&run, &qrels, 10);
        assert_eq!((m.mean, m.evaluated, m.excluded), (1.0, 1, 1));
        let keys: Vec<String> = standard_metrics(&run, &qrels).into_keys().collect();
        for k in ["mrr@10", "recall@50", "recall@1000", "ndcg@10"] {
            assert!(keys.iter().any(|x| x == k));
        }
    }

    #[test]
    fn run_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut run = Run::new();
        run.insert("q1".into(), vec![("d2".into(), 1.5), ("d1".into(), -0.25)]);
        run.insert("q0".into(), vec![("d9".into(), 3.0)]);
        let p = dir.path().join("run.tsv");
        save_run(&p, &run).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("q0\td9\t1\t3\n"));
        assert_eq!(load_run(&p).unwrap(), run);
    }
}
