//! MS MARCO style TSV collections: `corpus.tsv`, `queries.tsv`, `qrels.tsv`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Id-addressed texts in file order. Used for both documents and queries.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TextCollection {
    ids: Vec<String>,
    texts: Vec<String>,
    lines: Vec<usize>,
    index: HashMap<String, usize>,
}

pub type Corpus = TextCollection;
pub type QuerySet = TextCollection;

impl TextCollection {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, id: impl Into<String>, text: impl Into<String>) -> Result<()> {
        let id = id.into();
        if self.index.contains_key(&id) {
            return Err(Error::Validation(format!("duplicate id `{id}`")));
        }
        self.index.insert(id.clone(), self.ids.len());
        self.lines.push(self.ids.len() + 1);
        self.ids.push(id);
        self.texts.push(text.into());
        Ok(())
    }

    pub fn from_pairs<I, A, B>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (A, B)>,
        A: Into<String>,
        B: Into<String>,
    {
        let mut c = Self::new();
        for (id, text) in pairs {
            c.push(id, text)?;
        }
        Ok(c)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&str> {
        self.index.get(id).map(|&i| self.texts[i].as_str())
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn id_at(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn text_at(&self, i: usize) -> &str {
        &self.texts[i]
    }

    /// Source line of entry `i` (1-based).
    pub fn line_at(&self, i: usize) -> usize {
        self.lines[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.ids.iter().map(String::as_str).zip(self.texts.iter().map(String::as_str))
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.texts.iter().map(String::as_str)
    }

    /// Parse `id<TAB>text` lines.
    pub fn load(path: &Path) -> Result<Self> {
        let content = read_utf8(path)?;
        let mut c = Self::new();
        for (lineno, line) in data_lines(&content) {
            let (id, text) = line.split_once('\t').ok_or_else(|| parse_err(path, lineno, "expected `id<TAB>text`"))?;
            if id.is_empty() {
                return Err(parse_err(path, lineno, "empty id"));
            }
            c.push(id, text).map_err(|e| parse_err(path, lineno, &e.to_string()))?;
            *c.lines.last_mut().expect("just pushed") = lineno;
        }
        if c.is_empty() {
            log::warn!("{} holds no records", path.display());
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        for (id, text) in self.iter() {
            writeln!(f, "{id}\t{text}")?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Graded relevance judgments.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Qrels {
    judgments: BTreeMap<String, BTreeMap<String, u32>>,
}

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, query_id: impl Into<String>, doc_id: impl Into<String>, grade: u32) {
        self.judgments.entry(query_id.into()).or_default().insert(doc_id.into(), grade);
    }

    pub fn len(&self) -> usize {
        self.judgments.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.judgments.is_empty()
    }

    pub fn grade(&self, query_id: &str, doc_id: &str) -> u32 {
        self.judgments.get(query_id).and_then(|m| m.get(doc_id)).copied().unwrap_or(0)
    }

    pub fn judged(&self, query_id: &str) -> Option<&BTreeMap<String, u32>> {
        self.judgments.get(query_id)
    }

    pub fn contains_query(&self, query_id: &str) -> bool {
        self.judgments.contains_key(query_id)
    }

    /// Documents with grade > 0, ascending by id.
    pub fn positives(&self, query_id: &str) -> Vec<&str> {
        self.judgments
            .get(query_id)
            .map(|m| m.iter().filter(|(_, &g)| g > 0).map(|(d, _)| d.as_str()).collect())
            .unwrap_or_default()
    }

    pub fn queries(&self) -> impl Iterator<Item = &str> {
        self.judgments.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, u32)> {
        self.judgments
            .iter()
            .flat_map(|(q, m)| m.iter().map(move |(d, &g)| (q.as_str(), d.as_str(), g)))
    }

    /// Every judged document must exist in `corpus`.
    pub fn validate(&self, corpus: &Corpus) -> Result<()> {
        for (q, d, _) in self.iter() {
            if !corpus.contains(d) {
                return Err(Error::Validation(format!("qrels for query `{q}` reference unknown document `{d}`")));
            }
        }
        Ok(())
    }

    /// Parse `query_id<TAB>0<TAB>doc_id<TAB>grade` lines.
    pub fn load(path: &Path) -> Result<Self> {
        let content = read_utf8(path)?;
        let mut q = Self::new();
        for (lineno, line) in data_lines(&content) {
            let fields: Vec<&str> = line.split('\t').collect();
            let [qid, _iter, did, grade] = fields[..] else {
                return Err(parse_err(path, lineno, "expected 4 tab-separated fields"));
            };
            let grade: u32 = grade
                .trim()
                .parse()
                .map_err(|_| parse_err(path, lineno, &format!("grade `{grade}` is not a non-negative integer")))?;
            q.insert(qid, did, grade);
        }
        if q.is_empty() {
            log::warn!("{} holds no judgments", path.display());
        }
        Ok(q)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        for (q, d, g) in self.iter() {
            writeln!(f, "{q}\t0\t{d}\t{g}")?;
        }
        f.flush()?;
        Ok(())
    }
}

pub(crate) fn read_utf8(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    String::from_utf8(bytes).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg: format!("invalid UTF-8: {e}"),
    })
}

/// Non-blank lines with their 1-based numbers; a trailing CR is dropped.
pub(crate) fn data_lines(content: &str) -> impl Iterator<Item = (usize, &str)> {
    content
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.strip_suffix('\r').unwrap_or(l)))
        .filter(|(_, l)| !l.trim().is_empty())
}

pub(crate) fn parse_err(path: &Path, line: usize, msg: &str) -> Error {
    Error::Parse { path: PathBuf::from(path), line, msg: msg.to_string() }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn loads_queries() {
        let dir = tempfile::tempdir().unwrap();
        let q = QuerySet::load(&write(dir.path(), "q.tsv", "q1\thello world\n")).unwrap();
        assert_eq!(q.len(), 1);
        assert_eq!(q.get("q1"), Some("hello world"));
    }

    #[test]
    fn dangling_qrels_fail_validation() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = Corpus::load(&write(dir.path(), "c.tsv", "d1\tsome text\n")).unwrap();
        let qrels = Qrels::load(&write(dir.path(), "r.tsv", "q1\t0\td9\t1\n")).unwrap();
        assert!(matches!(qrels.validate(&corpus), Err(Error::Validation(_))));
    }

    #[test]
    fn empty_file_is_empty_collection() {
        let dir = tempfile::tempdir().unwrap();
        assert!(Corpus::load(&write(dir.path(), "c.tsv", "")).unwrap().is_empty());
        assert!(Qrels::load(&write(dir.path(), "r.tsv", "")).unwrap().is_empty());
    }

    #[test]
    fn malformed_lines_report_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "c.tsv", "d1\tok\nno tab here\n");
        let err = Corpus::load(&p).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        assert!(err.to_string().contains("c.tsv:2"));

        let p = write(dir.path(), "r.tsv", "q1\t0\td1\tx\n");
        assert!(matches!(Qrels::load(&p), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "c.tsv", "d1\ta\nd1\tb\n");
        assert!(Corpus::load(&p).is_err());
    }

    #[test]
    fn qrels_round_trip_and_positives() {
        let mut q = Qrels::new();
        q.insert("q1", "d2", 1);
        q.insert("q1", "d1", 0);
        q.insert("q2", "d3", 2);
        assert_eq!(q.positives("q1"), vec!["d2"]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("qrels.tsv");
        q.save(&p).unwrap();
        assert_eq!(Qrels::load(&p).unwrap(), q);
    }
}
