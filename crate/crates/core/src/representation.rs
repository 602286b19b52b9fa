//! Hybrid dense + sparse representations and their inner product.
//!
//! A document is `[h_cls W^cls ; top-k(mu)]`, where `mu` is the max-pooled
//! LPU projection of its ordinary tokens. A query keeps its full `mu`; the
//! score sums the query's entries at the document's retained indices.

use std::io::{Read, Write};
use std::path::Path;

use crate::encoder::{encode, encoder_forward, is_ordinary};
use crate::decoder::ot_vocab_scores;
use crate::error::{Error, Result};
use crate::model::Retriever;
use crate::tensor::{gemm, Graph, Scalar, Tensor, Var};
use crate::text::Vocabulary;

#[derive(Clone, Debug, PartialEq)]
pub struct HybridVector {
    pub dense: Vec<f32>,
    /// `(vocab id, weight)`, ids strictly increasing.
    pub sparse: Vec<(u32, f32)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryRepresentation {
    pub dense: Vec<f32>,
    pub mu_full: Vec<f32>,
}

impl QueryRepresentation {
    /// Zero every entry of `mu_full` outside its own top `k`, which turns
    /// [`score`] into the symmetric intersection product.
    pub fn sparsified(&self, k: usize) -> Result<QueryRepresentation> {
        let mut mu = vec![0.0; self.mu_full.len()];
        for (i, w) in sparsify_ot(&self.mu_full, k)? {
            mu[i as usize] = w;
        }
        Ok(QueryRepresentation { dense: self.dense.clone(), mu_full: mu })
    }
}

/// `h^T W^cls` for `W^cls` of shape `[d, d']`.
pub fn project_cls(h: &[f32], w: &Tensor<f32>) -> Result<Vec<f32>> {
    let [d, dp] = w.shape() else {
        return Err(Error::shape("project_cls", format!("projection of shape {:?}", w.shape())));
    };
    if h.len() != *d {
        return Err(Error::shape("project_cls", format!("[{}] x {:?}", h.len(), w.shape())));
    }
    let mut out = vec![0.0; *dp];
    gemm(1, *d, *dp, h, false, w.data(), false, &mut out, false);
    Ok(out)
}

/// The `k` largest entries of `mu` (ties to the lower index), sorted by id.
pub fn sparsify_ot(mu: &[f32], k: usize) -> Result<Vec<(u32, f32)>> {
    if k == 0 || k > mu.len() {
        return Err(Error::Usage(format!("sparsity k = {k} outside 1..={}", mu.len())));
    }
    let mut idx: Vec<usize> = (0..mu.len()).collect();
    let better = |a: &usize, b: &usize| mu[*b].total_cmp(&mu[*a]).then(a.cmp(b));
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, better);
        idx.truncate(k);
    }
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| (i as u32, mu[i])).collect())
}

/// Dense dot product plus `sum_{i in I_d} mu_q[i] * w_d[i]`.
pub fn score(q: &QueryRepresentation, d: &HybridVector) -> f32 {
    let dense: f64 = q.dense.iter().zip(&d.dense).map(|(&a, &b)| a as f64 * b as f64).sum();
    let sparse: f64 = d.sparse.iter().map(|&(i, w)| q.mu_full[i as usize] as f64 * w as f64).sum();
    (dense + sparse) as f32
}

fn pooled_mu(model: &Retriever<f32>, ids: &[u32]) -> Result<(Vec<f32>, Vec<f32>)> {
    let out = encode(model, ids)?;
    let w_cls = model.params.get(model.ids.cls_proj);
    let dense = project_cls(&out.h_cls, w_cls)?;
    let (d, v) = (model.dims.d, model.dims.vocab);
    let lpu = model.params.get(model.ids.lpu).data();
    let mut mu = vec![f32::NEG_INFINITY; v];
    let mut row = vec![0.0; v];
    let mut any = false;
    for (r, _) in out.ot_valid.iter().enumerate().filter(|(_, &ok)| ok) {
        gemm(1, d, v, out.ot_embeddings.row(r), false, lpu, false, &mut row, false);
        for (m, &x) in mu.iter_mut().zip(&row) {
            if x > *m {
                *m = x;
            }
        }
        any = true;
    }
    if !any {
        return Err(Error::Usage("input has no ordinary tokens to represent".into()));
    }
    Ok((dense, mu))
}

fn encode_text(vocab: &Vocabulary, text: &str, max_len: usize) -> Result<Vec<u32>> {
    let ids = vocab.encode(text, max_len);
    if ids.len() < 2 {
        return Err(Error::Usage("cannot represent empty text".into()));
    }
    Ok(ids)
}

/// Representation of an already tokenized document (`[CLS]` first).
pub fn represent_document(model: &Retriever<f32>, ids: &[u32], k: usize) -> Result<HybridVector> {
    let (dense, mu) = pooled_mu(model, ids)?;
    Ok(HybridVector { dense, sparse: sparsify_ot(&mu, k)? })
}

/// Representation of an already tokenized query (`[CLS]` first).
pub fn represent_query(model: &Retriever<f32>, ids: &[u32]) -> Result<QueryRepresentation> {
    let (dense, mu_full) = pooled_mu(model, ids)?;
    Ok(QueryRepresentation { dense, mu_full })
}

pub fn encode_document(model: &Retriever<f32>, vocab: &Vocabulary, text: &str, k: usize) -> Result<HybridVector> {
    represent_document(model, &encode_text(vocab, text, model.dims.max_len)?, k)
}

pub fn encode_query(model: &Retriever<f32>, vocab: &Vocabulary, text: &str) -> Result<QueryRepresentation> {
    represent_query(model, &encode_text(vocab, text, model.dims.max_len)?)
}

/// Differentiable representations of a batch: dense `[B, d']` and the
/// vocabulary part `[B, |V|]`. With `sparsify_k`, entries outside each
/// row's top k are multiplied by a constant zero.
pub fn represent_batch<T: Scalar>(g: &mut Graph<T>, model: &Retriever<T>, seqs: &[&[u32]], sparsify_k: Option<usize>) -> Result<(Var, Var)> {
    let params = &model.params;
    let enc = encoder_forward(g, params, &model.ids.encoder, &model.dims, model.ln_eps, seqs)?;
    let segs = &enc.segments;
    let cls_rows: Vec<usize> = (0..seqs.len()).map(|s| segs.row(s, 0)).collect();
    let cls = g.gather_rows(enc.hidden, &cls_rows)?;
    let w = g.param(params, model.ids.cls_proj)?;
    let dense = g.matmul(cls, w, false)?;

    let rows: Vec<Vec<usize>> = seqs
        .iter()
        .enumerate()
        .map(|(s, ids)| (1..ids.len()).filter(|&p| is_ordinary(ids[p])).map(|p| segs.row(s, p)).collect())
        .collect();
    let pooled = ot_vocab_scores(g, params, model.ids.lpu, enc.hidden, &rows)?;
    let v = model.dims.vocab;
    let mut parts = Vec::with_capacity(seqs.len());
    for (s, p) in pooled.into_iter().enumerate() {
        let p = p.ok_or_else(|| Error::Usage(format!("input {s} has no ordinary tokens to represent")))?;
        parts.push(g.reshape(p, vec![1, v])?);
    }
    let mut mu = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts)? };
    if let Some(k) = sparsify_k {
        let vals: Vec<f32> = g.value(mu).iter().map(|x| x.as_f32()).collect();
        let mut keep = vec![T::zero(); vals.len()];
        for (r, row) in vals.chunks(v).enumerate() {
            for (i, _) in sparsify_ot(row, k)? {
                keep[r * v + i as usize] = T::one();
            }
        }
        mu = g.mul_const(mu, keep)?;
    }
    Ok((dense, mu))
}

/// `[Bq, Bd]` matrix of hybrid scores between two represented batches.
pub fn score_matrix<T: Scalar>(g: &mut Graph<T>, q: (Var, Var), d: (Var, Var)) -> Result<Var> {
    let dense = g.matmul(q.0, d.0, true)?;
    let sparse = g.matmul(q.1, d.1, true)?;
    g.add(dense, sparse)
}

const MAGIC: &[u8; 4] = b"DPXE";
const VERSION: u32 = 1;

/// Bytes one vector occupies in an embedding file, excluding its id.
pub fn hybrid_payload_bytes(dense_dim: usize, k: usize) -> usize {
    dense_dim * 4 + k * (2 + 4)
}

/// Bytes of a plain float32 vector of width `d`.
pub fn dense_payload_bytes(d: usize) -> usize {
    d * 4
}

/// Serialize one vector's payload (dense floats then `(u16, f32)` pairs).
pub fn write_vector(w: &mut impl Write, v: &HybridVector) -> Result<()> {
    for x in &v.dense {
        w.write_all(&x.to_le_bytes())?;
    }
    for &(i, x) in &v.sparse {
        let i = u16::try_from(i).map_err(|_| Error::Format(format!("vocabulary id {i} does not fit in 16 bits")))?;
        w.write_all(&i.to_le_bytes())?;
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

/// Embedding file: header then `(doc id, vector)` records.
pub fn write_embeddings(w: &mut impl Write, dense_dim: usize, k: usize, docs: &[(String, HybridVector)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(dense_dim as u32).to_le_bytes())?;
    w.write_all(&(k as u32).to_le_bytes())?;
    w.write_all(&(docs.len() as u64).to_le_bytes())?;
    for (id, v) in docs {
        if v.dense.len() != dense_dim || v.sparse.len() != k {
            return Err(Error::Format(format!("vector for {id} has {}+{} entries, file expects {dense_dim}+{k}", v.dense.len(), v.sparse.len())));
        }
        w.write_all(&(id.len() as u32).to_le_bytes())?;
        w.write_all(id.as_bytes())?;
        write_vector(w, v)?;
    }
    Ok(())
}

fn take<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| Error::Format(format!("truncated embedding file: {e}")))?;
    Ok(b)
}

pub fn read_embeddings(r: &mut impl Read) -> Result<(usize, usize, Vec<(String, HybridVector)>)> {
    if &take::<4>(r)? != MAGIC {
        return Err(Error::Format("not an embedding file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(r)?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported embedding file version {version}")));
    }
    let dp = u32::from_le_bytes(take(r)?) as usize;
    let k = u32::from_le_bytes(take(r)?) as usize;
    let n = u64::from_le_bytes(take(r)?) as usize;
    let mut docs = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let len = u32::from_le_bytes(take(r)?) as usize;
        let mut id = vec![0u8; len];
        r.read_exact(&mut id).map_err(|e| Error::Format(format!("truncated embedding file: {e}")))?;
        let id = String::from_utf8(id).map_err(|_| Error::Format("document id is not UTF-8".into()))?;
        let dense = (0..dp).map(|_| take(r).map(f32::from_le_bytes)).collect::<Result<Vec<_>>>()?;
        let mut sparse = Vec::with_capacity(k);
        for _ in 0..k {
            let i = u16::from_le_bytes(take(r)?) as u32;
            sparse.push((i, f32::from_le_bytes(take(r)?)));
        }
        if sparse.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::Format(format!("sparse ids of {id} are not strictly increasing")));
        }
        docs.push((id, HybridVector { dense, sparse }));
    }
    Ok((dp, k, docs))
}

pub fn save_embeddings(path: &Path, dense_dim: usize, k: usize, docs: &[(String, HybridVector)]) -> Result<()> {
    let mut buf = Vec::new();
    write_embeddings(&mut buf, dense_dim, k, docs)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_embeddings(path: &Path) -> Result<(usize, usize, Vec<(String, HybridVector)>)> {
    let bytes = std::fs::read(path)?;
    read_embeddings(&mut bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn projection_examples() {
        let eye = Tensor::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(project_cls(&[1.0, -2.0, 3.0], &eye).unwrap(), vec![1.0, -2.0, 3.0]);
        let w = Tensor::new(vec![3, 2], vec![0.5, 1.0, -1.0, 2.0, 0.25, 0.0]).unwrap();
        let a = project_cls(&[1.0, 2.0, 3.0], &w).unwrap();
        let b = project_cls(&[2.0, 4.0, 6.0], &w).unwrap();
        assert_eq!(b, a.iter().map(|x| 2.0 * x).collect::<Vec<_>>());
        let wide = Tensor::zeros(vec![768, 384]);
        assert_eq!(project_cls(&vec![1.0; 768], &wide).unwrap().len(), 384);
    }

    #[test]
    fn sparsify_examples() {
        assert_eq!(sparsify_ot(&[0.1, 0.9, 0.5], 2).unwrap(), vec![(1, 0.9), (2, 0.5)]);
        assert_eq!(sparsify_ot(&[0.1, 0.9, 0.5], 3).unwrap(), vec![(0, 0.1), (1, 0.9), (2, 0.5)]);
        assert_eq!(sparsify_ot(&[1.0, 1.0, 0.0], 1).unwrap(), vec![(0, 1.0)]);
        assert!(sparsify_ot(&[1.0], 0).is_err());
        assert!(sparsify_ot(&[1.0], 2).is_err());
    }

    #[test]
    fn score_examples() {
        let q = QueryRepresentation { dense: vec![1.0, 2.0], mu_full: vec![0.1, 0.2, 0.3, 0.4, 0.5] };
        let d = HybridVector { dense: vec![0.5, -1.0], sparse: vec![(2, 0.7), (4, 0.9)] };
        assert!((score(&q, &d) - (-0.84)).abs() < 1e-6);
        let empty = HybridVector { dense: vec![0.5, -1.0], sparse: vec![] };
        assert_eq!(score(&q, &empty), -1.5);
        let zero_mu = QueryRepresentation { dense: vec![1.0, 2.0], mu_full: vec![0.0; 5] };
        assert_eq!(score(&zero_mu, &d), -1.5);
    }

    #[test]
    fn sparsified_query_scores_the_intersection() {
        let q = QueryRepresentation { dense: vec![0.0], mu_full: vec![5.0, 0.1, 4.0, 0.2] };
        let d = HybridVector { dense: vec![0.0], sparse: vec![(0, 1.0), (1, 1.0)] };
        let qs = q.sparsified(2).unwrap();
        assert_eq!(score(&qs, &d), 5.0);
        assert!((score(&q, &d) - 5.1).abs() < 1e-6);
    }

    #[test]
    fn embedding_file_round_trip() {
        let docs = vec![
            ("d1".to_string(), HybridVector { dense: vec![1.0, -0.5], sparse: vec![(3, 0.25), (700, -1.5)] }),
            ("é2".to_string(), HybridVector { dense: vec![0.0, 2.0], sparse: vec![(0, 1.0), (65535, 2.0)] }),
        ];
        let mut buf = Vec::new();
        write_embeddings(&mut buf, 2, 2, &docs).unwrap();
        assert_eq!(&buf[..4], b"DPXE");
        let (dp, k, back) = read_embeddings(&mut buf.as_slice()).unwrap();
        assert_eq!((dp, k), (2, 2));
        assert_eq!(back, docs);
        let per_record = |id: &str| 4 + id.len() + hybrid_payload_bytes(2, 2);
        assert_eq!(buf.len(), 24 + per_record("d1") + per_record("é2"));
        assert!(read_embeddings(&mut &buf[..buf.len() - 1]).is_err());
    }

    #[test]
    fn wide_ids_are_rejected() {
        let v = HybridVector { dense: vec![], sparse: vec![(70000, 1.0)] };
        assert!(write_vector(&mut Vec::new(), &v).is_err());
    }

    proptest! {
        #[test]
        fn sparsify_matches_full_sort(mu in prop::collection::vec(-4i32..4, 1..40), k_frac in 0.0f64..1.0) {
            let mu: Vec<f32> = mu.into_iter().map(|x| x as f32 * 0.5).collect();
            let k = 1 + ((mu.len() - 1) as f64 * k_frac) as usize;
            let mut order: Vec<usize> = (0..mu.len()).collect();
            order.sort_by(|&a, &b| mu[b].partial_cmp(&mu[a]).unwrap().then(a.cmp(&b)));
            let mut expect: Vec<usize> = order[..k].to_vec();
            expect.sort();
            let got = sparsify_ot(&mu, k).unwrap();
            prop_assert_eq!(got.iter().map(|p| p.0 as usize).collect::<Vec<_>>(), expect);
            prop_assert!(got.iter().all(|&(i, w)| mu[i as usize] == w));
        }
    }
}
