//! Binary checkpoints: config snapshot, named tensors, optional optimizer.
//!
//! Layout (little-endian): magic `DPXC`, version `u32`, kind string,
//! config TOML string, tensor count `u32`, then per tensor its name,
//! rank `u32`, dims `u32 x rank` and `f32` payload; finally an optimizer
//! flag byte followed, when set, by the step `u64` and per-parameter
//! moments. Strings are `u32` length plus UTF-8 bytes.

use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::finetune::CrossEncoder;
use crate::model::{ModelDims, Retriever};
use crate::tensor::{OptimizerState, Params, Tensor};

const MAGIC: &[u8; 4] = b"DPXC";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Retriever,
    CrossEncoder,
}

impl ModelKind {
    fn as_str(self) -> &'static str {
        match self {
            ModelKind::Retriever => "retriever",
            ModelKind::CrossEncoder => "cross-encoder",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub config: RunConfig,
    pub params: Params<f32>,
    pub optimizer: Option<OptimizerState<f32>>,
}

impl Checkpoint {
    pub fn from_retriever(config: &RunConfig, model: &Retriever<f32>, optimizer: Option<OptimizerState<f32>>) -> Self {
        Checkpoint { kind: ModelKind::Retriever, config: config.clone(), params: model.params.clone(), optimizer }
    }

    pub fn from_cross_encoder(config: &RunConfig, model: &CrossEncoder<f32>) -> Self {
        Checkpoint { kind: ModelKind::CrossEncoder, config: config.clone(), params: model.params.clone(), optimizer: None }
    }

    /// Sizes implied by the config and the stored embedding table.
    pub fn dims(&self) -> Result<ModelDims> {
        let vocab = self.params.by_name("emb.tok")?.shape()[0];
        Ok(ModelDims::new(&self.config.model, vocab, self.config.representation.dense_dim))
    }

    pub fn retriever(&self) -> Result<Retriever<f32>> {
        if self.kind != ModelKind::Retriever {
            return Err(Error::Format(format!("checkpoint holds a {}, not a retriever", self.kind.as_str())));
        }
        Retriever::from_params(self.dims()?, self.params.clone(), self.config.model.ln_eps)
    }

    pub fn cross_encoder(&self) -> Result<CrossEncoder<f32>> {
        if self.kind != ModelKind::CrossEncoder {
            return Err(Error::Format(format!("checkpoint holds a {}, not a cross-encoder", self.kind.as_str())));
        }
        CrossEncoder::from_params(self.dims()?, self.params.clone(), self.config.model.ln_eps)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        put_u32(&mut w, VERSION);
        put_str(&mut w, self.kind.as_str());
        put_str(&mut w, &self.config.to_toml());
        put_u32(&mut w, self.params.len() as u32);
        for (_, name, t) in self.params.iter() {
            put_str(&mut w, name);
            put_u32(&mut w, t.shape().len() as u32);
            for &d in t.shape() {
                put_u32(&mut w, d as u32);
            }
            put_f32s(&mut w, t.data());
        }
        match &self.optimizer {
            None => w.push(0),
            Some(opt) => {
                w.push(1);
                w.extend_from_slice(&opt.step.to_le_bytes());
                put_u32(&mut w, opt.moments.len() as u32);
                for m in &opt.moments {
                    match m {
                        None => w.push(0),
                        Some((m1, m2)) => {
                            w.push(1);
                            put_f32s(&mut w, m1);
                            put_f32s(&mut w, m2);
                        }
                    }
                }
            }
        }
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { b: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let kind = match r.string()?.as_str() {
            "retriever" => ModelKind::Retriever,
            "cross-encoder" => ModelKind::CrossEncoder,
            other => return Err(Error::Format(format!("unknown model kind {other:?}"))),
        };
        let config = RunConfig::from_toml(&r.string()?)?;
        let mut params = Params::new();
        let mut sizes = Vec::new();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().product::<usize>();
            sizes.push(n);
            params.insert(name, Tensor::new(shape, r.f32s(n)?)?)?;
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let step = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
                let count = r.u32()? as usize;
                if count != sizes.len() {
                    return Err(Error::Format(format!("optimizer has {count} slots for {} tensors", sizes.len())));
                }
                let mut moments = Vec::with_capacity(count);
                for &n in &sizes {
                    moments.push(match r.u8()? {
                        0 => None,
                        _ => Some((r.f32s(n)?, r.f32s(n)?)),
                    });
                }
                let mut opt = OptimizerState::new(config.pretrain.optimizer.clone(), count);
                opt.step = step;
                opt.moments = moments;
                Some(opt)
            }
            f => return Err(Error::Format(format!("bad optimizer flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Checkpoint { kind, config, params, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_str(w: &mut Vec<u8>, s: &str) {
    put_u32(w, s.len() as u32);
    w.extend_from_slice(s.as_bytes());
}

fn put_f32s(w: &mut Vec<u8>, xs: &[f32]) {
    w.reserve(xs.len() * 4);
    for x in xs {
        w.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self.b.get(self.pos..self.pos + n).ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("string is not UTF-8".into()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self.take(n * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pretrain::{evaluate, mask_batch, pretrain, Objectives};
    use crate::text::CLS;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model.n_layers = 1;
        cfg.model.d = 16;
        cfg.model.n_heads = 2;
        cfg.model.d_ff = 32;
        cfg.model.max_len = 16;
        cfg.representation.dense_dim = 8;
        cfg.representation.sparse_k = 4;
        cfg.pretrain.steps = 3;
        cfg.pretrain.batch_size = 2;
        cfg
    }

    #[test]
    fn save_load_save_is_byte_identical_and_preserves_loss() {
        let cfg = small_config();
        let dims = ModelDims::new(&cfg.model, 30, cfg.representation.dense_dim);
        let mut m = Retriever::init(dims, &cfg.model, 4).unwrap();
        let docs: Vec<Vec<u32>> = (0..4).map(|i| vec![CLS, 5 + i, 9, 10 + i, 20, 21]).collect();
        let (_, opt) = pretrain(&mut m, &docs, &cfg.pretrain, &cfg.masking, 1, |_| {}).unwrap();

        let ck = Checkpoint::from_retriever(&cfg, &m, Some(opt));
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.optimizer, ck.optimizer);

        let refs: Vec<&[u32]> = docs.iter().map(|d| d.as_slice()).collect();
        let batch = mask_batch(&refs, &cfg.masking, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let before = evaluate(&m, &batch, Objectives::BOTH).unwrap().total;
        let after = evaluate(&back.retriever().unwrap(), &batch, Objectives::BOTH).unwrap().total;
        assert!((before - after).abs() <= 1e-6);
    }

    #[test]
    fn wrong_kind_and_corruption_are_reported() {
        let cfg = small_config();
        let dims = ModelDims::new(&cfg.model, 30, 8);
        let ce = CrossEncoder::<f32>::init(dims, &cfg.model, 0).unwrap();
        let ck = Checkpoint::from_cross_encoder(&cfg, &ce);
        assert!(ck.retriever().is_err());
        assert!(ck.cross_encoder().is_ok());
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(b"nope").is_err());
    }
}
