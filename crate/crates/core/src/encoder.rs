//! Pre-LN transformer encoder and its masked-language-model head.
//!
//! A batch of sequences is laid out back to back in one `[T, d]` matrix.
//! Dense layers run on the whole matrix; attention runs per sequence.

use crate::error::{Error, Result};
use crate::model::{EncoderIds, ModelDims, Retriever};
use crate::tensor::{Graph, ParamId, Params, Scalar, Tensor, Var, MASK_NEG};
use crate::text::{CLS, MASK, PAD, SEP};

/// Row ranges of the sequences stacked in a batch matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments {
    pub offsets: Vec<usize>,
    pub lens: Vec<usize>,
}

impl Segments {
    pub fn from_lens(lens: Vec<usize>) -> Self {
        let mut offsets = Vec::with_capacity(lens.len());
        let mut acc = 0;
        for &l in &lens {
            offsets.push(acc);
            acc += l;
        }
        Segments { offsets, lens }
    }

    pub fn total(&self) -> usize {
        self.lens.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.lens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lens.is_empty()
    }

    pub fn row(&self, seq: usize, pos: usize) -> usize {
        self.offsets[seq] + pos
    }
}

/// Multi-head scaled dot-product attention restricted to each segment.
///
/// `masks[s]` is the additive `len x len` mask of segment `s`.
pub(crate) fn segmented_attention<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    n_heads: usize,
    segments: &Segments,
    masks: &[Vec<T>],
) -> Result<Var> {
    let d = g.shape(q)[1];
    let dh = d / n_heads;
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let whole = segments.len() == 1;
    let mut outs = Vec::with_capacity(segments.len());
    for (s, (&off, &len)) in segments.offsets.iter().zip(&segments.lens).enumerate() {
        let (qs, ks, vs) = if whole {
            (q, k, v)
        } else {
            (g.slice_rows(q, off, len)?, g.slice_rows(k, off, len)?, g.slice_rows(v, off, len)?)
        };
        let mut heads = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let (qh, kh, vh) = if n_heads == 1 {
                (qs, ks, vs)
            } else {
                (g.slice_cols(qs, h * dh, dh)?, g.slice_cols(ks, h * dh, dh)?, g.slice_cols(vs, h * dh, dh)?)
            };
            let scores = g.matmul(qh, kh, true)?;
            let scores = g.scale(scores, scale)?;
            let probs = g.softmax_masked(scores, Some(&masks[s]))?;
            heads.push(g.matmul(probs, vh, false)?);
        }
        outs.push(if n_heads == 1 { heads[0] } else { g.concat_cols(&heads)? });
    }
    if whole {
        Ok(outs[0])
    } else {
        g.concat_rows(&outs)
    }
}

pub(crate) fn linear<T: Scalar>(
    g: &mut Graph<T>,
    params: &Params<T>,
    x: Var,
    w: ParamId,
    b: Option<ParamId>,
) -> Result<Var> {
    let wv = g.param(params, w)?;
    let y = g.matmul(x, wv, false)?;
    match b {
        Some(b) => {
            let bv = g.param(params, b)?;
            g.add_row(y, bv)
        }
        None => Ok(y),
    }
}

/// Additive self-attention mask hiding `[PAD]` keys from non-pad queries.
pub fn padding_mask<T: Scalar>(ids: &[u32]) -> Vec<T> {
    let n = ids.len();
    let neg = T::lit(MASK_NEG);
    let mut m = vec![T::zero(); n * n];
    for i in 0..n {
        if ids[i] == PAD {
            continue;
        }
        for j in 0..n {
            if ids[j] == PAD {
                m[i * n + j] = neg;
            }
        }
    }
    m
}

/// Positions whose hidden states count as ordinary-token embeddings.
pub fn is_ordinary(id: u32) -> bool {
    !matches!(id, PAD | CLS | SEP | MASK)
}

/// Encoder output for a batch, stacked row-wise.
#[derive(Clone, Debug)]
pub struct BatchEncoding {
    pub hidden: Var,
    pub segments: Segments,
}

/// Run the encoder over `seqs`, each starting with `[CLS]`.
pub fn encoder_forward<T: Scalar>(
    g: &mut Graph<T>,
    params: &Params<T>,
    ids: &EncoderIds,
    dims: &ModelDims,
    ln_eps: f64,
    seqs: &[&[u32]],
) -> Result<BatchEncoding> {
    if seqs.is_empty() {
        return Err(Error::Usage("cannot encode an empty batch".into()));
    }
    for s in seqs {
        if s.is_empty() || s.len() > dims.max_len {
            return Err(Error::Usage(format!("sequence length {} outside 1..={}", s.len(), dims.max_len)));
        }
        if let Some(&bad) = s.iter().find(|&&t| t as usize >= dims.vocab) {
            return Err(Error::Usage(format!("token id {bad} outside vocabulary of {}", dims.vocab)));
        }
    }
    let segments = Segments::from_lens(seqs.iter().map(|s| s.len()).collect());
    let flat: Vec<usize> = seqs.iter().flat_map(|s| s.iter().map(|&t| t as usize)).collect();
    let positions: Vec<usize> = seqs.iter().flat_map(|s| 0..s.len()).collect();
    let masks: Vec<Vec<T>> = seqs.iter().map(|s| padding_mask(s)).collect();

    let tok = g.param(params, ids.tok)?;
    let pos = g.param(params, ids.pos)?;
    let te = g.gather_rows(tok, &flat)?;
    let pe = g.gather_rows(pos, &positions)?;
    let mut x = g.add(te, pe)?;

    for layer in &ids.layers {
        let (g1, b1) = (g.param(params, layer.ln1_g)?, g.param(params, layer.ln1_b)?);
        let h = g.layer_norm(x, g1, b1, ln_eps)?;
        let q = linear(g, params, h, layer.wq, Some(layer.bq))?;
        let k = linear(g, params, h, layer.wk, Some(layer.bk))?;
        let v = linear(g, params, h, layer.wv, Some(layer.bv))?;
        let a = segmented_attention(g, q, k, v, dims.n_heads, &segments, &masks)?;
        let a = linear(g, params, a, layer.wo, Some(layer.bo))?;
        x = g.add(x, a)?;

        let (g2, b2) = (g.param(params, layer.ln2_g)?, g.param(params, layer.ln2_b)?);
        let h = g.layer_norm(x, g2, b2, ln_eps)?;
        let f = linear(g, params, h, layer.w1, Some(layer.b1))?;
        let f = g.gelu(f)?;
        let f = linear(g, params, f, layer.w2, Some(layer.b2))?;
        x = g.add(x, f)?;
    }
    let (gf, bf) = (g.param(params, ids.lnf_g)?, g.param(params, ids.lnf_b)?);
    let hidden = g.layer_norm(x, gf, bf, ln_eps)?;
    Ok(BatchEncoding { hidden, segments })
}

/// Mean cross-entropy of the tied MLM head at the given hidden rows.
/// No rows yields a constant zero.
pub fn mlm_loss<T: Scalar>(
    g: &mut Graph<T>,
    params: &Params<T>,
    tok: ParamId,
    bias: ParamId,
    hidden: Var,
    rows: &[usize],
    labels: &[u32],
) -> Result<Var> {
    if rows.is_empty() {
        return g.constant(&Tensor::scalar(T::zero()));
    }
    let h = g.gather_rows(hidden, rows)?;
    let e = g.param(params, tok)?;
    let logits = g.matmul(h, e, true)?;
    let b = g.param(params, bias)?;
    let logits = g.add_row(logits, b)?;
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    g.cross_entropy(logits, &labels)
}

/// Plain-value encoder result for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodeOutput<T = f32> {
    /// Final hidden state at position 0.
    pub h_cls: Vec<T>,
    /// Hidden states of positions `1..L`, shape `[L - 1, d]`.
    pub ot_embeddings: Tensor<T>,
    /// Which rows of `ot_embeddings` are ordinary tokens.
    pub ot_valid: Vec<bool>,
}

/// Encode one (possibly masked) sequence outside of any training graph.
pub fn encode<T: Scalar>(model: &Retriever<T>, enc_ids: &[u32]) -> Result<EncodeOutput<T>> {
    let mut g = Graph::new();
    let out = encoder_forward(&mut g, &model.params, &model.ids.encoder, &model.dims, model.ln_eps, &[enc_ids])?;
    let d = model.dims.d;
    let hidden = g.value(out.hidden);
    let l = enc_ids.len();
    Ok(EncodeOutput {
        h_cls: hidden[..d].to_vec(),
        ot_embeddings: Tensor::new(vec![l - 1, d], hidden[d..].to_vec())?,
        ot_valid: enc_ids[1..].iter().map(|&t| is_ordinary(t)).collect(),
    })
}
