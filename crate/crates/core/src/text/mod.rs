//! Vocabulary, tokenization, masking and collection loading.

pub mod data;
pub mod masking;
pub mod tokenized;
pub mod vocab;

pub use data::{Corpus, Qrels, QuerySet, TextCollection};
pub use masking::{
    bow_target, mask_for_encoder, sample_decoder_visibility, EncoderMask, MaskedInstance, PositionMask,
};
pub use tokenized::TokenizedCollection;
pub use vocab::{Vocabulary, CLS, MASK, PAD, SEP, UNK};
