//! Collections pre-tokenized into `[CLS]`-prefixed id sequences.

use std::collections::HashMap;

use super::data::TextCollection;
use super::vocab::Vocabulary;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TokenizedCollection {
    ids: Vec<String>,
    seqs: Vec<Vec<u32>>,
    index: HashMap<String, usize>,
}

impl TokenizedCollection {
    /// Tokenize every entry, truncating to `max_len` ids.
    pub fn new(texts: &TextCollection, vocab: &Vocabulary, max_len: usize) -> Self {
        let mut out = TokenizedCollection::default();
        for (id, text) in texts.iter() {
            out.push(id.to_string(), vocab.encode(text, max_len));
        }
        out
    }

    pub fn push(&mut self, id: String, seq: Vec<u32>) {
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.seqs.push(seq);
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&[u32]> {
        self.index.get(id).map(|&i| self.seqs[i].as_slice())
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn seqs(&self) -> &[Vec<u32>] {
        &self.seqs
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[u32])> {
        self.ids.iter().map(String::as_str).zip(self.seqs.iter().map(Vec::as_slice))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::CLS;

    #[test]
    fn tokenizes_in_collection_order() {
        let texts = TextCollection::from_pairs([("b", "x y"), ("a", "y")]).unwrap();
        let vocab = Vocabulary::build(texts.texts(), 10).unwrap();
        let t = TokenizedCollection::new(&texts, &vocab, 8);
        assert_eq!(t.ids(), ["b", "a"]);
        assert_eq!(t.get("a").unwrap(), [CLS, vocab.id("y")]);
        assert!(t.get("c").is_none());
    }
}
