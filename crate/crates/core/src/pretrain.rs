//! Pre-training: encoder MLM plus the enabled decoders, summed.

use std::io::Write;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{MaskingConfig, PretrainConfig};
use crate::decoder::{bow_loss, build_streams, decode_cls_loss, joint_loss, ot_vocab_scores};
use crate::encoder::{encoder_forward, is_ordinary, mlm_loss};
use crate::error::{Error, Result};
use crate::model::Retriever;
use crate::tensor::{Graph, OptimizerState, Scalar, Tensor, Var};
use crate::text::MaskedInstance;

/// Which decoders contribute to the objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Objectives {
    pub cls_decoding: bool,
    pub ot_decoding: bool,
}

impl Objectives {
    pub const BOTH: Objectives = Objectives { cls_decoding: true, ot_decoding: true };

    pub fn from_config(cfg: &PretrainConfig) -> Result<Self> {
        if !cfg.cls_decoding && !cfg.ot_decoding {
            return Err(Error::config("pretrain.cls_decoding", "at least one of cls_decoding and ot_decoding must be enabled"));
        }
        Ok(Objectives { cls_decoding: cfg.cls_decoding, ot_decoding: cfg.ot_decoding })
    }

    /// Parameters that receive gradients under these objectives.
    pub fn trains(&self, name: &str) -> bool {
        if name.starts_with("cls.") {
            return false;
        }
        if name.starts_with("dec.") {
            return self.cls_decoding;
        }
        if name.starts_with("lpu.") {
            return self.ot_decoding;
        }
        true
    }
}

/// Loss nodes of one pre-training batch.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub mlm: Var,
    pub dec: Option<Var>,
    pub bow: Option<Var>,
    pub total: Var,
}

/// Plain values of [`LossTerms`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValues {
    pub mlm: f64,
    pub dec: Option<f64>,
    pub bow: Option<f64>,
    pub total: f64,
}

impl LossTerms {
    pub fn values<T: Scalar>(&self, g: &Graph<T>) -> Result<LossValues> {
        let get = |v: Var| g.scalar(v).map(|x| x.as_f64());
        Ok(LossValues {
            mlm: get(self.mlm)?,
            dec: self.dec.map(get).transpose()?,
            bow: self.bow.map(get).transpose()?,
            total: get(self.total)?,
        })
    }
}

/// Record the joint objective for a batch of masked instances.
pub fn batch_loss<T: Scalar>(g: &mut Graph<T>, model: &Retriever<T>, batch: &[MaskedInstance], obj: Objectives) -> Result<LossTerms> {
    let params = &model.params;
    let ids = &model.ids;
    let enc_ids: Vec<&[u32]> = batch.iter().map(|m| m.enc_ids.as_slice()).collect();
    let enc = encoder_forward(g, params, &ids.encoder, &model.dims, model.ln_eps, &enc_ids)?;
    let segs = &enc.segments;

    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (s, m) in batch.iter().enumerate() {
        rows.extend(m.enc_mlm_positions.iter().map(|&p| segs.row(s, p)));
        labels.extend_from_slice(&m.enc_mlm_labels);
    }
    let mlm = mlm_loss(g, params, ids.encoder.tok, ids.mlm_bias, enc.hidden, &rows, &labels)?;

    let dec = if obj.cls_decoding {
        let cls_rows: Vec<usize> = (0..batch.len()).map(|s| segs.row(s, 0)).collect();
        let cls = g.gather_rows(enc.hidden, &cls_rows)?;
        let originals: Vec<&[u32]> = batch.iter().map(|m| m.original.as_slice()).collect();
        let streams = build_streams(g, params, ids.encoder.tok, ids.encoder.pos, cls, &originals)?;
        let masks: Vec<_> = batch.iter().map(|m| m.position_mask()).collect();
        let dec_labels: Vec<&[u32]> = batch.iter().map(|m| m.dec_labels.as_slice()).collect();
        Some(decode_cls_loss(g, params, &ids.decoder, ids.encoder.tok, &streams, &masks, &dec_labels, model.dims.decoder_heads, model.ln_eps)?)
    } else {
        None
    };

    let bow = if obj.ot_decoding {
        let rows_per_seq: Vec<Vec<usize>> = batch
            .iter()
            .enumerate()
            .map(|(s, m)| (1..m.len()).filter(|&p| is_ordinary(m.enc_ids[p])).map(|p| segs.row(s, p)).collect())
            .collect();
        let pooled = ot_vocab_scores(g, params, ids.lpu, enc.hidden, &rows_per_seq)?;
        let mut kept = Vec::new();
        let mut targets = Vec::new();
        for (i, (p, m)) in pooled.into_iter().zip(batch).enumerate() {
            let target = m.bow_target();
            match p {
                Some(p) if !target.is_empty() => {
                    kept.push(p);
                    targets.push(target);
                }
                _ => warn!("instance {i} has no ordinary tokens; skipped in the bag-of-words loss"),
            }
        }
        Some(if kept.is_empty() { g.constant(&Tensor::scalar(T::zero()))? } else { bow_loss(g, &kept, &targets)? })
    } else {
        None
    };

    let total = joint_loss(g, mlm, dec, bow)?;
    Ok(LossTerms { mlm, dec, bow, total })
}

/// Evaluate the objective on a fixed batch without updating anything.
pub fn evaluate<T: Scalar>(model: &Retriever<T>, batch: &[MaskedInstance], obj: Objectives) -> Result<LossValues> {
    let mut g = Graph::new();
    batch_loss(&mut g, model, batch, obj)?.values(&g)
}

/// Mask every document once with a dedicated rng; instances that are too
/// short are dropped.
pub fn mask_batch<R: Rng + ?Sized>(docs: &[&[u32]], masking: &MaskingConfig, rng: &mut R) -> Result<Vec<MaskedInstance>> {
    let mut out = Vec::with_capacity(docs.len());
    for d in docs {
        if let Some(m) = MaskedInstance::sample(d, masking.r_enc, masking.r_dec, rng)? {
            out.push(m);
        }
    }
    Ok(out)
}

/// One row of the per-step loss log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub losses: LossValues,
}

pub const LOSS_CSV_HEADER: &str = "step,l_mlm,l_dec,l_bow,total";

pub fn write_loss_csv(w: &mut impl Write, log: &[StepLog]) -> Result<()> {
    writeln!(w, "{LOSS_CSV_HEADER}")?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for r in log {
        let l = &r.losses;
        writeln!(w, "{},{:.6},{},{},{:.6}", r.step, l.mlm, opt(l.dec), opt(l.bow), l.total)?;
    }
    Ok(())
}

/// Linear warmup to 1, then linear decay to 0 at `total`.
pub fn lr_schedule(step: usize, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        (step + 1) as f64 / warmup as f64
    } else {
        let rest = total.saturating_sub(warmup).max(1);
        1.0 - (step - warmup) as f64 / rest as f64
    }
}

/// Pre-train `model` in place for `cfg.steps` steps over `docs`.
///
/// Batches are drawn from a reshuffled epoch order; masks are resampled at
/// every step. Returns the per-step log (loss before each update).
pub fn pretrain(
    model: &mut Retriever<f32>,
    docs: &[Vec<u32>],
    cfg: &PretrainConfig,
    masking: &MaskingConfig,
    seed: u64,
    mut on_step: impl FnMut(&StepLog),
) -> Result<(Vec<StepLog>, OptimizerState<f32>)> {
    let obj = Objectives::from_config(cfg)?;
    if cfg.batch_size == 0 {
        return Err(Error::config("pretrain.batch_size", "must be positive"));
    }
    let usable: Vec<&[u32]> = docs.iter().map(|d| d.as_slice()).filter(|d| d.len() >= 3).collect();
    if usable.is_empty() {
        return Err(Error::Usage("no pre-training document has at least two tokens".into()));
    }
    model.params.set_trainable(|n| obj.trains(n));
    let mut opt = OptimizerState::new(cfg.optimizer.clone(), model.params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let mut picked = Vec::with_capacity(cfg.batch_size);
        while picked.len() < cfg.batch_size {
            if order.is_empty() {
                order = (0..usable.len()).collect();
                order.shuffle(&mut rng);
            }
            picked.push(usable[order.pop().unwrap()]);
        }
        let batch = mask_batch(&picked, masking, &mut rng)?;

        model.params.zero_grad();
        let mut g = Graph::new();
        let terms = batch_loss(&mut g, model, &batch, obj)?;
        g.backward(terms.total, &mut model.params)?;
        let scale = lr_schedule(step, cfg.warmup_steps, cfg.steps);
        opt.step(&mut model.params, scale)?;

        let row = StepLog { step, lr: cfg.optimizer.lr * scale, losses: terms.values(&g)? };
        on_step(&row);
        log.push(row);
    }
    model.params.set_trainable(|_| true);
    Ok((log, opt))
}
