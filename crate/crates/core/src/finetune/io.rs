//! Training triples and teacher scores on disk.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::softmax_vec;
use crate::text::data::{data_lines, parse_err, read_utf8};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainTriple {
    pub query_id: String,
    pub positive: String,
    pub negatives: Vec<String>,
}

/// `query_id<TAB>pos_doc_id<TAB>neg_doc_id[,neg_doc_id...]`.
pub fn save_triples(path: &Path, triples: &[TrainTriple]) -> Result<()> {
    let mut out = String::new();
    for t in triples {
        out.push_str(&format!("{}\t{}\t{}\n", t.query_id, t.positive, t.negatives.join(",")));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_triples(path: &Path) -> Result<Vec<TrainTriple>> {
    let text = read_utf8(path)?;
    let mut out = Vec::new();
    for (line, row) in data_lines(&text) {
        let f: Vec<&str> = row.split('\t').collect();
        if f.len() != 3 || f[0].is_empty() || f[1].is_empty() {
            return Err(parse_err(path, line, "expected query_id, positive doc id and negative list"));
        }
        let negatives: Vec<String> = f[2].split(',').filter(|s| !s.is_empty()).map(str::to_string).collect();
        if negatives.iter().any(|n| n == f[1]) {
            return Err(parse_err(path, line, &format!("positive {} is also a negative", f[1])));
        }
        out.push(TrainTriple { query_id: f[0].to_string(), positive: f[1].to_string(), negatives });
    }
    Ok(out)
}

/// Raw teacher scores per `(query, document)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TeacherScores {
    scores: BTreeMap<(String, String), f64>,
}

impl TeacherScores {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, query_id: impl Into<String>, doc_id: impl Into<String>, score: f64) {
        self.scores.insert((query_id.into(), doc_id.into()), score);
    }

    pub fn get(&self, query_id: &str, doc_id: &str) -> Option<f64> {
        self.scores.get(&(query_id.to_string(), doc_id.to_string())).copied()
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, f64)> {
        self.scores.iter().map(|((q, d), &s)| (q.as_str(), d.as_str(), s))
    }

    /// Softmax of the teacher's scores over `candidates`.
    pub fn sigma(&self, query_id: &str, candidates: &[&str]) -> Result<Vec<f64>> {
        let raw = candidates
            .iter()
            .map(|d| self.get(query_id, d).ok_or_else(|| Error::Validation(format!("no teacher score for ({query_id}, {d})"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(softmax_vec(&raw))
    }
}

/// `query_id<TAB>doc_id<TAB>score`.
pub fn save_teacher_scores(path: &Path, scores: &TeacherScores) -> Result<()> {
    let mut out = String::new();
    for (q, d, s) in scores.iter() {
        out.push_str(&format!("{q}\t{d}\t{s}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_teacher_scores(path: &Path) -> Result<TeacherScores> {
    let text = read_utf8(path)?;
    let mut out = TeacherScores::new();
    for (line, row) in data_lines(&text) {
        let f: Vec<&str> = row.split('\t').collect();
        if f.len() != 3 {
            return Err(parse_err(path, line, &format!("expected 3 tab-separated fields, found {}", f.len())));
        }
        let s: f64 = f[2].parse().map_err(|_| parse_err(path, line, &format!("bad score {:?}", f[2])))?;
        if !s.is_finite() {
            return Err(parse_err(path, line, "score is not finite"));
        }
        out.insert(f[0], f[1], s);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triples_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("triples.tsv");
        let t = vec![
            TrainTriple { query_id: "q1".into(), positive: "d1".into(), negatives: vec!["d2".into(), "d3".into()] },
            TrainTriple { query_id: "q2".into(), positive: "d4".into(), negatives: vec![] },
        ];
        save_triples(&p, &t).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "q1\td1\td2,d3\nq2\td4\t\n");
        assert_eq!(load_triples(&p).unwrap(), t);
        std::fs::write(&p, "q1\td1\td1,d2\n").unwrap();
        assert!(load_triples(&p).unwrap_err().to_string().contains(":1:"));
    }

    #[test]
    fn teacher_scores_round_trip_and_sigma() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("teacher_scores.tsv");
        let mut s = TeacherScores::new();
        s.insert("q1", "d1", 1.0);
        s.insert("q1", "d2", 0.0);
        s.insert("q2", "d1", 0.25);
        save_teacher_scores(&p, &s).unwrap();
        assert_eq!(load_teacher_scores(&p).unwrap(), s);
        let sig = s.sigma("q1", &["d1", "d2"]).unwrap();
        assert!((sig[0] - 0.731_058_6).abs() < 1e-6 && (sig[1] - 0.268_941_4).abs() < 1e-6);
        assert!(s.sigma("q1", &["d9"]).is_err());
    }
}
