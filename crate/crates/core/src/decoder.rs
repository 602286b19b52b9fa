//! The two pre-training decoders.
//!
//! `[CLS]` decoding: a single attention layer reconstructs every input token
//! from the sentence embedding. Queries come from `H1 = h_cls + p_i`; keys
//! and values from `H2 = [h_cls, e_{x_1} + p_1, ...]`. Each row sees only
//! the columns its [`PositionMask`] row allows: column 0, a sampled subset
//! of the other tokens, and never itself.
//!
//! Ordinary-token decoding: each unmasked ordinary token's hidden state is
//! projected to vocabulary space by the LPU matrix `W^O`, the results are
//! max-pooled per vocabulary entry, and the pooled vector is trained with
//! a bag-of-words cross-entropy over the distinct input tokens.

use crate::encoder::{linear, segmented_attention, Segments};
use crate::error::{Error, Result};
use crate::model::DecoderIds;
use crate::tensor::{Graph, ParamId, Params, Scalar, Var};
use crate::text::PositionMask;

/// The two decoder input streams for a batch, stacked row-wise.
#[derive(Clone, Debug)]
pub struct Streams {
    /// `h_cls + p_i` for every position.
    pub h1: Var,
    /// `h_cls` at position 0, `e_{x_i} + p_i` after.
    pub h2: Var,
    pub segments: Segments,
}

/// Build `H1` and `H2` from the `[B, d]` sentence embeddings and the
/// original (unmasked) inputs.
pub fn build_streams<T: Scalar>(
    g: &mut Graph<T>,
    params: &Params<T>,
    tok: ParamId,
    pos: ParamId,
    cls: Var,
    originals: &[&[u32]],
) -> Result<Streams> {
    if g.shape(cls).first() != Some(&originals.len()) {
        return Err(Error::shape("build_streams", format!("{:?} sentence embeddings for {} inputs", g.shape(cls), originals.len())));
    }
    let segments = Segments::from_lens(originals.iter().map(|s| s.len()).collect());
    let tok = g.param(params, tok)?;
    let pos = g.param(params, pos)?;

    let cls_rows: Vec<usize> = originals.iter().enumerate().flat_map(|(b, s)| std::iter::repeat(b).take(s.len())).collect();
    let all_pos: Vec<usize> = originals.iter().flat_map(|s| 0..s.len()).collect();
    let c = g.gather_rows(cls, &cls_rows)?;
    let p = g.gather_rows(pos, &all_pos)?;
    let h1 = g.add(c, p)?;

    let body_ids: Vec<usize> = originals.iter().flat_map(|s| s[1..].iter().map(|&t| t as usize)).collect();
    let body_pos: Vec<usize> = originals.iter().flat_map(|s| 1..s.len()).collect();
    let e = g.gather_rows(tok, &body_ids)?;
    let p = g.gather_rows(pos, &body_pos)?;
    let body = g.add(e, p)?;
    let mut parts = Vec::with_capacity(2 * originals.len());
    let mut off = 0;
    for (b, s) in originals.iter().enumerate() {
        parts.push(g.slice_rows(cls, b, 1)?);
        if s.len() > 1 {
            parts.push(g.slice_rows(body, off, s.len() - 1)?);
        }
        off += s.len() - 1;
    }
    let h2 = g.concat_rows(&parts)?;
    Ok(Streams { h1, h2, segments })
}

/// Attention output `A = softmax(Q K^T / sqrt(d) + M) V` of the decoder.
pub fn decoder_attention<T: Scalar>(
    g: &mut Graph<T>,
    params: &Params<T>,
    ids: &DecoderIds,
    streams: &Streams,
    masks: &[PositionMask],
    n_heads: usize,
) -> Result<Var> {
    if masks.len() != streams.segments.len() {
        return Err(Error::shape("decoder_attention", format!("{} masks for {} inputs", masks.len(), streams.segments.len())));
    }
    let mut additive = Vec::with_capacity(masks.len());
    for (m, &len) in masks.iter().zip(&streams.segments.lens) {
        if m.len() != len {
            return Err(Error::shape("decoder_attention", format!("mask of size {} for input of length {len}", m.len())));
        }
        if let Some(i) = (0..len).find(|&i| (0..len).all(|j| !m.is_visible(i, j))) {
            return Err(Error::Validation(format!("decoder mask row {i} has no visible column")));
        }
        additive.push(m.additive::<T>());
    }
    let q = linear(g, params, streams.h1, ids.wq, None)?;
    let k = linear(g, params, streams.h2, ids.wk, None)?;
    let v = linear(g, params, streams.h2, ids.wv, None)?;
    segmented_attention(g, q, k, v, n_heads, &streams.segments, &additive)
}

/// Reconstruction loss: mean cross-entropy over positions `1..L` of every
/// input, scored by the tied token-embedding head.
#[allow(clippy::too_many_arguments)]
pub fn decode_cls_loss<T: Scalar>(
    g: &mut Graph<T>,
    params: &Params<T>,
    ids: &DecoderIds,
    tok: ParamId,
    streams: &Streams,
    masks: &[PositionMask],
    dec_labels: &[&[u32]],
    n_heads: usize,
    ln_eps: f64,
) -> Result<Var> {
    let a = decoder_attention(g, params, ids, streams, masks, n_heads)?;
    let a = linear(g, params, a, ids.wo, Some(ids.bo))?;
    let z = g.add(streams.h1, a)?;
    let (lg, lb) = (g.param(params, ids.ln_g)?, g.param(params, ids.ln_b)?);
    let z = g.layer_norm(z, lg, lb, ln_eps)?;

    let segs = &streams.segments;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (s, lab) in dec_labels.iter().enumerate() {
        if lab.len() + 1 != segs.lens[s] {
            return Err(Error::shape("decode_cls_loss", format!("{} labels for input of length {}", lab.len(), segs.lens[s])));
        }
        rows.extend((1..segs.lens[s]).map(|p| segs.row(s, p)));
        labels.extend(lab.iter().map(|&t| t as usize));
    }
    let h = g.gather_rows(z, &rows)?;
    let e = g.param(params, tok)?;
    let logits = g.matmul(h, e, true)?;
    let b = g.param(params, ids.out_bias)?;
    let logits = g.add_row(logits, b)?;
    g.cross_entropy(logits, &labels)
}

/// Per-token vocabulary scores `mu_i = e_i^T W^O` for the given hidden rows.
pub fn ot_project<T: Scalar>(g: &mut Graph<T>, params: &Params<T>, lpu: ParamId, hidden: Var, rows: &[usize]) -> Result<Var> {
    if rows.is_empty() {
        return Err(Error::Usage("no ordinary tokens to project".into()));
    }
    let h = g.gather_rows(hidden, rows)?;
    let w = g.param(params, lpu)?;
    g.matmul(h, w, false)
}

/// Token-wise max-pool of per-token vocabulary scores.
pub fn ot_maxpool<T: Scalar>(g: &mut Graph<T>, mu_tokens: Var) -> Result<Var> {
    g.max_pool_rows(mu_tokens)
}

/// Pooled vocabulary vector for each sequence of a batch, from the hidden
/// rows listed per sequence. Sequences without rows get `None`.
pub fn ot_vocab_scores<T: Scalar>(
    g: &mut Graph<T>,
    params: &Params<T>,
    lpu: ParamId,
    hidden: Var,
    rows_per_seq: &[Vec<usize>],
) -> Result<Vec<Option<Var>>> {
    let all: Vec<usize> = rows_per_seq.iter().flatten().copied().collect();
    if all.is_empty() {
        return Ok(vec![None; rows_per_seq.len()]);
    }
    let mu = ot_project(g, params, lpu, hidden, &all)?;
    let mut out = Vec::with_capacity(rows_per_seq.len());
    let mut off = 0;
    for rows in rows_per_seq {
        if rows.is_empty() {
            out.push(None);
            continue;
        }
        let part = if rows.len() == all.len() { mu } else { g.slice_rows(mu, off, rows.len())? };
        out.push(Some(ot_maxpool(g, part)?));
        off += rows.len();
    }
    Ok(out)
}

/// Bag-of-words loss: for each pooled vector, `-sum_{x in target}
/// log softmax(mu)[x]`; averaged over the batch.
pub fn bow_loss<T: Scalar>(g: &mut Graph<T>, pooled: &[Var], targets: &[Vec<u32>]) -> Result<Var> {
    if pooled.is_empty() || pooled.len() != targets.len() {
        return Err(Error::shape("bow_loss", format!("{} pooled vectors for {} targets", pooled.len(), targets.len())));
    }
    let v = g.shape(pooled[0]).iter().product::<usize>();
    let rows = pooled
        .iter()
        .map(|&p| g.reshape(p, vec![1, v]))
        .collect::<Result<Vec<_>>>()?;
    let stacked = if rows.len() == 1 { rows[0] } else { g.concat_rows(&rows)? };
    let logp = g.log_softmax(stacked)?;
    let mut idx = Vec::new();
    for (b, t) in targets.iter().enumerate() {
        if t.is_empty() {
            return Err(Error::Usage(format!("empty bag-of-words target for input {b}")));
        }
        idx.extend(t.iter().map(|&x| b * v + x as usize));
    }
    let picked = g.gather_elems(logp, &idx)?;
    let s = g.sum(picked)?;
    g.scale(s, T::lit(-1.0 / pooled.len() as f64))
}

/// Unweighted sum of the enabled objectives.
pub fn joint_loss<T: Scalar>(g: &mut Graph<T>, mlm: Var, dec: Option<Var>, bow: Option<Var>) -> Result<Var> {
    for (name, v) in [("L_mlm", Some(mlm)), ("L_dec", dec), ("L_bow", bow)] {
        if let Some(v) = v {
            if !g.scalar(v)?.is_finite() {
                return Err(Error::Numeric { op: format!("joint_loss ({name})") });
            }
        }
    }
    let mut total = mlm;
    for v in [dec, bow].into_iter().flatten() {
        total = g.add(total, v)?;
    }
    Ok(total)
}

/// [`joint_loss`] on plain numbers.
pub fn joint_loss_value(mlm: f64, dec: Option<f64>, bow: Option<f64>) -> Result<f64> {
    for (name, v) in [("L_mlm", Some(mlm)), ("L_dec", dec), ("L_bow", bow)] {
        if v.is_some_and(|v| !v.is_finite()) {
            return Err(Error::Numeric { op: format!("joint_loss ({name})") });
        }
    }
    Ok(mlm + dec.unwrap_or(0.0) + bow.unwrap_or(0.0))
}
