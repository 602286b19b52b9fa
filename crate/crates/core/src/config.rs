//! Run configuration: every hyper-parameter in one serializable record.
//!
//! Files are TOML. Missing keys take the desk-profile defaults below.
//!
//! | key                         | desk  | base  |
//! |-----------------------------|-------|-------|
//! | `model.n_layers`            | 2     | 12    |
//! | `model.d`                   | 128   | 768   |
//! | `model.n_heads`             | 4     | 12    |
//! | `model.d_ff`                | 512   | 3072  |
//! | `model.vocab_size`          | 8192  | 30522 |
//! | `model.max_len`             | 128   | 512   |
//! | `model.decoder_heads`       | 1     | 1     |
//! | `masking.r_enc`             | 0.3   | 0.3   |
//! | `masking.r_dec`             | 0.5   | 0.5   |
//! | `representation.dense_dim`  | 64    | 384   |
//! | `representation.sparse_k`   | 64    | 384   |
//! | `finetune.hard_negatives`   | 8     | 8     |
//! | `finetune.batch_size`       | 16    | 16    |
//! | `finetune.temperature`      | 1.0   | 1.0   |

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::AdamWConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Upper bound on the vocabulary built from the corpus.
    pub vocab_size: usize,
    pub max_len: usize,
    pub decoder_heads: usize,
    pub ln_eps: f64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 2,
            d: 128,
            n_heads: 4,
            d_ff: 512,
            vocab_size: 8192,
            max_len: 128,
            decoder_heads: 1,
            ln_eps: 1e-5,
            init_std: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskingConfig {
    pub r_enc: f64,
    pub r_dec: f64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig { r_enc: 0.3, r_dec: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RepresentationConfig {
    /// Output width of the `[CLS]` projection.
    pub dense_dim: usize,
    /// Vocabulary entries kept per document.
    pub sparse_k: usize,
    /// Also sparsify queries and score only the shared entries.
    pub symmetric: bool,
}

impl Default for RepresentationConfig {
    fn default() -> Self {
        RepresentationConfig { dense_dim: 64, sparse_k: 64, symmetric: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub cls_decoding: bool,
    pub ot_decoding: bool,
    pub steps: usize,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub optimizer: AdamWConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            cls_decoding: true,
            ot_decoding: true,
            steps: 500,
            batch_size: 64,
            warmup_steps: 50,
            optimizer: AdamWConfig { lr: 3e-3, ..AdamWConfig::default() },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub batch_size: usize,
    pub hard_negatives: usize,
    pub temperature: f64,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub stage3_epochs: usize,
    pub optimizer: AdamWConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            batch_size: 16,
            hard_negatives: 8,
            temperature: 1.0,
            stage1_epochs: 1,
            stage2_epochs: 1,
            stage3_epochs: 1,
            optimizer: AdamWConfig { lr: 1e-3, ..AdamWConfig::default() },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TeacherKind {
    CrossEncoder,
    /// Scores are the qrels grades; a test fixture.
    Oracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub kind: TeacherKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            kind: TeacherKind::CrossEncoder,
            epochs: 2,
            batch_size: 8,
            optimizer: AdamWConfig { lr: 1e-3, ..AdamWConfig::default() },
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub corpus: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    pub qrels: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub masking: MaskingConfig,
    pub representation: RepresentationConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub teacher: TeacherConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            model: ModelConfig::default(),
            masking: MaskingConfig::default(),
            representation: RepresentationConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            teacher: TeacherConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    /// Small model that trains on one CPU core in minutes.
    pub fn desk() -> Self {
        Self::default()
    }

    /// BERT-base sized encoder with 384 + 384 representation.
    pub fn base() -> Self {
        RunConfig {
            model: ModelConfig {
                n_layers: 12,
                d: 768,
                n_heads: 12,
                d_ff: 3072,
                vocab_size: 30522,
                max_len: 512,
                ..ModelConfig::default()
            },
            representation: RepresentationConfig { dense_dim: 384, sparse_k: 384, symmetric: false },
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config("<file>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let positive = [
            ("model.n_layers", m.n_layers),
            ("model.d", m.d),
            ("model.n_heads", m.n_heads),
            ("model.d_ff", m.d_ff),
            ("model.max_len", m.max_len),
            ("model.decoder_heads", m.decoder_heads),
            ("representation.dense_dim", self.representation.dense_dim),
            ("representation.sparse_k", self.representation.sparse_k),
            ("pretrain.batch_size", self.pretrain.batch_size),
            ("teacher.batch_size", self.teacher.batch_size),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if m.d % m.n_heads != 0 {
            return Err(Error::config("model.n_heads", format!("{} does not divide d = {}", m.n_heads, m.d)));
        }
        if m.d % m.decoder_heads != 0 {
            return Err(Error::config("model.decoder_heads", format!("{} does not divide d = {}", m.decoder_heads, m.d)));
        }
        if m.vocab_size <= crate::text::vocab::NUM_SPECIAL || m.vocab_size > 65536 {
            return Err(Error::config("model.vocab_size", "must lie in 6..=65536 (ids are stored as u16)"));
        }
        if m.max_len < 3 {
            return Err(Error::config("model.max_len", "must be at least 3"));
        }
        for (field, r) in [("masking.r_enc", self.masking.r_enc), ("masking.r_dec", self.masking.r_dec)] {
            if !(r > 0.0 && r < 1.0) {
                return Err(Error::config(field, format!("must lie in (0, 1), got {r}")));
            }
        }
        if self.representation.dense_dim > m.d {
            return Err(Error::config(
                "representation.dense_dim",
                format!("{} exceeds model.d = {}", self.representation.dense_dim, m.d),
            ));
        }
        if self.representation.sparse_k > m.vocab_size {
            return Err(Error::config(
                "representation.sparse_k",
                format!("{} exceeds model.vocab_size = {}", self.representation.sparse_k, m.vocab_size),
            ));
        }
        if !self.pretrain.cls_decoding && !self.pretrain.ot_decoding {
            return Err(Error::config("pretrain.cls_decoding", "at least one of cls_decoding / ot_decoding must be on"));
        }
        if self.finetune.batch_size < 2 {
            return Err(Error::config("finetune.batch_size", "in-batch negatives need at least 2 queries"));
        }
        if !(self.finetune.temperature > 0.0) {
            return Err(Error::config("finetune.temperature", "must be positive"));
        }
        for (field, o) in [
            ("pretrain.optimizer", &self.pretrain.optimizer),
            ("finetune.optimizer", &self.finetune.optimizer),
            ("teacher.optimizer", &self.teacher.optimizer),
        ] {
            if !(o.lr > 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
                return Err(Error::config(field, "lr must be positive and betas in [0, 1)"));
            }
        }
        Ok(())
    }
}
