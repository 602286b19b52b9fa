//! Parameter layout shared by the retriever and the cross-encoder teacher.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{truncated_normal, ParamId, Params, Scalar, Tensor};

/// Concrete sizes of one model instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub n_layers: usize,
    pub d: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub max_len: usize,
    pub decoder_heads: usize,
    pub dense_dim: usize,
}

impl ModelDims {
    pub fn new(cfg: &ModelConfig, vocab: usize, dense_dim: usize) -> Self {
        ModelDims {
            n_layers: cfg.n_layers,
            d: cfg.d,
            n_heads: cfg.n_heads,
            d_ff: cfg.d_ff,
            vocab,
            max_len: cfg.max_len,
            decoder_heads: cfg.decoder_heads,
            dense_dim,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Normal,
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn spec(out: &mut Vec<ParamSpec>, name: impl Into<String>, shape: &[usize], init: Init) {
    out.push(ParamSpec { name: name.into(), shape: shape.to_vec(), init });
}

fn encoder_specs(dims: &ModelDims, out: &mut Vec<ParamSpec>) {
    let (d, f) = (dims.d, dims.d_ff);
    spec(out, "emb.tok", &[dims.vocab, d], Init::Normal);
    spec(out, "emb.pos", &[dims.max_len, d], Init::Normal);
    for l in 0..dims.n_layers {
        let p = format!("enc.{l}");
        spec(out, format!("{p}.ln1.g"), &[d], Init::Ones);
        spec(out, format!("{p}.ln1.b"), &[d], Init::Zeros);
        for w in ["q", "k", "v", "o"] {
            spec(out, format!("{p}.attn.w{w}"), &[d, d], Init::Normal);
            spec(out, format!("{p}.attn.b{w}"), &[d], Init::Zeros);
        }
        spec(out, format!("{p}.ln2.g"), &[d], Init::Ones);
        spec(out, format!("{p}.ln2.b"), &[d], Init::Zeros);
        spec(out, format!("{p}.ffn.w1"), &[d, f], Init::Normal);
        spec(out, format!("{p}.ffn.b1"), &[f], Init::Zeros);
        spec(out, format!("{p}.ffn.w2"), &[f, d], Init::Normal);
        spec(out, format!("{p}.ffn.b2"), &[d], Init::Zeros);
    }
    spec(out, "enc.ln_f.g", &[d], Init::Ones);
    spec(out, "enc.ln_f.b", &[d], Init::Zeros);
}

/// Retriever: encoder, MLM bias, two-stream decoder, LPU and `[CLS]`
/// projection.
pub fn retriever_architecture(dims: &ModelDims) -> Vec<ParamSpec> {
    let d = dims.d;
    let mut out = Vec::new();
    encoder_specs(dims, &mut out);
    spec(&mut out, "mlm.bias", &[dims.vocab], Init::Zeros);
    for w in ["q", "k", "v", "o"] {
        spec(&mut out, format!("dec.w{w}"), &[d, d], Init::Normal);
    }
    spec(&mut out, "dec.bo", &[d], Init::Zeros);
    spec(&mut out, "dec.ln.g", &[d], Init::Ones);
    spec(&mut out, "dec.ln.b", &[d], Init::Zeros);
    spec(&mut out, "dec.bias", &[dims.vocab], Init::Zeros);
    spec(&mut out, "lpu.w", &[d, dims.vocab], Init::Normal);
    spec(&mut out, "cls.w", &[d, dims.dense_dim], Init::Normal);
    out
}

/// Cross-encoder teacher: encoder plus a scalar head on `[CLS]`.
pub fn cross_encoder_architecture(dims: &ModelDims) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    encoder_specs(dims, &mut out);
    spec(&mut out, "ce.head.w", &[dims.d, 1], Init::Normal);
    spec(&mut out, "ce.head.b", &[1], Init::Zeros);
    out
}

/// Fresh parameters: truncated normal for matrices, zeros/ones elsewhere.
pub fn init_params<T: Scalar>(specs: &[ParamSpec], std: f64, seed: u64) -> Result<Params<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Params::new();
    for s in specs {
        let n = s.shape.iter().product();
        let data = match s.init {
            Init::Normal => truncated_normal(&mut rng, n, std),
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
        };
        params.insert(s.name.clone(), Tensor::new(s.shape.clone(), data)?)?;
    }
    Ok(params)
}

/// The name set and shapes of `params` must be exactly `specs`.
pub fn check_architecture<T: Scalar>(params: &Params<T>, specs: &[ParamSpec]) -> Result<()> {
    if params.len() != specs.len() {
        return Err(Error::Format(format!(
            "expected {} tensors for this architecture, found {}",
            specs.len(),
            params.len()
        )));
    }
    for s in specs {
        let t = params
            .by_name(&s.name)
            .map_err(|_| Error::Format(format!("missing tensor `{}`", s.name)))?;
        if t.shape() != s.shape.as_slice() {
            return Err(Error::Format(format!("tensor `{}` has shape {:?}, expected {:?}", s.name, t.shape(), s.shape)));
        }
    }
    Ok(())
}

/// Copy every tensor of `src` whose name and shape also exist in `dst`.
pub fn copy_matching<T: Scalar>(dst: &mut Params<T>, src: &Params<T>) -> usize {
    let mut copied = 0;
    for (_, name, t) in src.iter() {
        if let Ok(id) = dst.id(name) {
            let target = dst.get_mut(id);
            if target.shape() == t.shape() {
                target.data_mut().copy_from_slice(t.data());
                copied += 1;
            }
        }
    }
    copied
}

#[derive(Clone, Debug)]
pub struct LayerIds {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug)]
pub struct EncoderIds {
    pub tok: ParamId,
    pub pos: ParamId,
    pub layers: Vec<LayerIds>,
    pub lnf_g: ParamId,
    pub lnf_b: ParamId,
}

impl EncoderIds {
    pub fn resolve<T: Scalar>(params: &Params<T>, n_layers: usize) -> Result<Self> {
        let layers = (0..n_layers)
            .map(|l| {
                let id = |s: &str| params.id(&format!("enc.{l}.{s}"));
                Ok(LayerIds {
                    ln1_g: id("ln1.g")?,
                    ln1_b: id("ln1.b")?,
                    wq: id("attn.wq")?,
                    bq: id("attn.bq")?,
                    wk: id("attn.wk")?,
                    bk: id("attn.bk")?,
                    wv: id("attn.wv")?,
                    bv: id("attn.bv")?,
                    wo: id("attn.wo")?,
                    bo: id("attn.bo")?,
                    ln2_g: id("ln2.g")?,
                    ln2_b: id("ln2.b")?,
                    w1: id("ffn.w1")?,
                    b1: id("ffn.b1")?,
                    w2: id("ffn.w2")?,
                    b2: id("ffn.b2")?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EncoderIds {
            tok: params.id("emb.tok")?,
            pos: params.id("emb.pos")?,
            layers,
            lnf_g: params.id("enc.ln_f.g")?,
            lnf_b: params.id("enc.ln_f.b")?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct DecoderIds {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln_g: ParamId,
    pub ln_b: ParamId,
    pub out_bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct RetrieverIds {
    pub encoder: EncoderIds,
    pub mlm_bias: ParamId,
    pub decoder: DecoderIds,
    pub lpu: ParamId,
    pub cls_proj: ParamId,
}

impl RetrieverIds {
    pub fn resolve<T: Scalar>(params: &Params<T>, n_layers: usize) -> Result<Self> {
        Ok(RetrieverIds {
            encoder: EncoderIds::resolve(params, n_layers)?,
            mlm_bias: params.id("mlm.bias")?,
            decoder: DecoderIds {
                wq: params.id("dec.wq")?,
                wk: params.id("dec.wk")?,
                wv: params.id("dec.wv")?,
                wo: params.id("dec.wo")?,
                bo: params.id("dec.bo")?,
                ln_g: params.id("dec.ln.g")?,
                ln_b: params.id("dec.ln.b")?,
                out_bias: params.id("dec.bias")?,
            },
            lpu: params.id("lpu.w")?,
            cls_proj: params.id("cls.w")?,
        })
    }
}

/// A retriever: sizes, parameters and resolved parameter handles.
#[derive(Clone, Debug)]
pub struct Retriever<T: Scalar = f32> {
    pub dims: ModelDims,
    pub params: Params<T>,
    pub ids: RetrieverIds,
    pub ln_eps: f64,
}

impl<T: Scalar> Retriever<T> {
    pub fn init(dims: ModelDims, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&retriever_architecture(&dims), cfg.init_std, seed)?;
        Self::from_params(dims, params, cfg.ln_eps)
    }

    pub fn from_params(dims: ModelDims, params: Params<T>, ln_eps: f64) -> Result<Self> {
        check_architecture(&params, &retriever_architecture(&dims))?;
        let ids = RetrieverIds::resolve(&params, dims.n_layers)?;
        Ok(Retriever { dims, params, ids, ln_eps })
    }

    pub fn cast<U: Scalar>(&self) -> Retriever<U> {
        Retriever { dims: self.dims, params: self.params.cast(), ids: self.ids.clone(), ln_eps: self.ln_eps }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> ModelDims {
        ModelDims { n_layers: 2, d: 8, n_heads: 2, d_ff: 16, vocab: 20, max_len: 10, decoder_heads: 1, dense_dim: 4 }
    }

    #[test]
    fn init_is_seed_deterministic_and_shaped() {
        let cfg = ModelConfig::default();
        let a = Retriever::<f32>::init(dims(), &cfg, 3).unwrap();
        let b = Retriever::<f32>::init(dims(), &cfg, 3).unwrap();
        for ((_, _, x), (_, _, y)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(x.data(), y.data());
        }
        assert_eq!(a.params.by_name("lpu.w").unwrap().shape(), &[8, 20]);
        assert_eq!(a.params.by_name("cls.w").unwrap().shape(), &[8, 4]);
        assert!(a.params.by_name("enc.0.ln1.g").unwrap().data().iter().all(|&v| v == 1.0));
        assert!(a.params.by_name("enc.1.attn.bq").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn architecture_check_rejects_wrong_shapes() {
        let specs = retriever_architecture(&dims());
        let mut p: Params<f32> = init_params(&specs, 0.02, 1).unwrap();
        check_architecture(&p, &specs).unwrap();
        let mut other = dims();
        other.vocab = 21;
        assert!(check_architecture(&p, &retriever_architecture(&other)).is_err());
        p.insert("extra", Tensor::zeros(vec![1])).unwrap();
        assert!(check_architecture(&p, &specs).is_err());
    }

    #[test]
    fn teacher_shares_encoder_names() {
        let specs = retriever_architecture(&dims());
        let src: Params<f32> = init_params(&specs, 0.02, 1).unwrap();
        let mut dst: Params<f32> = init_params(&cross_encoder_architecture(&dims()), 0.02, 2).unwrap();
        let n = copy_matching(&mut dst, &src);
        assert_eq!(n, dst.len() - 2);
        assert_eq!(dst.by_name("emb.tok").unwrap().data(), src.by_name("emb.tok").unwrap().data());
    }
}
