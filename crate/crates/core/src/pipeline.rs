//! Run directories and the stages that fill them.
//!
//! Every stage reads its predecessors' files from one directory and writes
//! its own outputs next to them. `manifest.json` lists the config hash, the
//! content hash of every input data file and of every output file; a stage
//! refuses predecessor files whose content no longer matches the manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::config::{RepresentationConfig, RunConfig, TeacherKind};
use crate::error::{Error, Result};
use crate::finetune::{
    load_teacher_scores, load_triples, mine_hard_negatives, save_teacher_scores, save_triples, teacher_scores, train_cross_encoder,
    train_stage1, train_stage2, train_stage3, encode_collection, CrossEncoder, FinetuneData, Teacher,
};
use crate::model::{copy_matching, ModelDims, Retriever};
use crate::pretrain::{pretrain, write_loss_csv, Objectives};
use crate::representation::{load_embeddings, represent_query, save_embeddings};
use crate::retrieval::{load_run, mrr_at_k, save_run, standard_metrics, HybridIndex, Run};
use crate::text::{Corpus, Qrels, QuerySet, TokenizedCollection, Vocabulary};

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG: &str = "config.toml";
pub const VOCAB: &str = "vocab.txt";
pub const PRETRAIN_CKPT: &str = "pretrain.ckpt";
pub const LOSS_CSV: &str = "loss.csv";
pub const TRIPLES: &str = "triples.tsv";
pub const TEACHER_CKPT: &str = "teacher.ckpt";
pub const TEACHER_SCORES: &str = "teacher_scores.tsv";
pub const EMBEDDINGS: &str = "embeddings.bin";
pub const INDEX: &str = "index.bin";
pub const RUN: &str = "run.tsv";
pub const METRICS: &str = "metrics.json";
pub const ABLATION: &str = "ablation.json";

/// Ranked list depth written by `search`.
pub const SEARCH_DEPTH: usize = 1000;

pub fn stage_checkpoint(stage: u8) -> String {
    format!("stage{stage}.ckpt")
}

/// Hex SHA-256 of a file's bytes.
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    /// Input data path -> content hash.
    pub inputs: BTreeMap<String, String>,
    /// Output file name -> content hash.
    pub outputs: BTreeMap<String, String>,
    /// Output file name -> checkpoint it was computed with.
    pub derived_from: BTreeMap<String, String>,
    pub metrics: Option<BTreeMap<String, serde_json::Value>>,
}

/// One run directory under a fixed config. Single writer.
pub struct RunDir {
    root: PathBuf,
    config: RunConfig,
    manifest: Manifest,
}

impl RunDir {
    /// Open or create `root`. An existing run must have been created with
    /// the same config.
    pub fn open(root: &Path, config: &RunConfig) -> Result<Self> {
        config.validate()?;
        fs::create_dir_all(root)?;
        let hash = config.hash();
        let manifest_path = root.join(MANIFEST);
        let manifest = if manifest_path.exists() {
            let m: Manifest = serde_json::from_slice(&fs::read(&manifest_path)?)
                .map_err(|e| Error::Format(format!("{}: {e}", manifest_path.display())))?;
            if m.config_hash != hash {
                return Err(Error::Validation(format!(
                    "{} was created with config hash {}, the current config hashes to {hash}; use a fresh --out-dir",
                    root.display(),
                    m.config_hash
                )));
            }
            m
        } else {
            Manifest { config_hash: hash, ..Manifest::default() }
        };
        let mut run = RunDir { root: root.to_path_buf(), config: config.clone(), manifest };
        if !run.manifest.outputs.contains_key(CONFIG) {
            run.write(CONFIG, config.to_toml().as_bytes())?;
        }
        Ok(run)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn has(&self, name: &str) -> bool {
        self.manifest.outputs.contains_key(name)
    }

    /// Path of a predecessor output, checked against the manifest.
    pub fn require(&self, name: &str, command: &str) -> Result<PathBuf> {
        let path = self.path(name);
        if !path.exists() {
            return Err(Error::MissingArtifact { path, command: command.into() });
        }
        let Some(expected) = self.manifest.outputs.get(name) else {
            return Err(Error::Validation(format!("{} is not listed in {MANIFEST}; rerun `{command}`", path.display())));
        };
        if &content_hash(&fs::read(&path)?) != expected {
            return Err(Error::Validation(format!("{} changed after `{command}` wrote it (hash mismatch)", path.display())));
        }
        Ok(path)
    }

    /// Every listed input and output still has its recorded hash.
    pub fn verify(&self) -> Result<()> {
        for (name, expected) in &self.manifest.outputs {
            let path = self.path(name);
            let bytes = fs::read(&path).map_err(|_| Error::Validation(format!("{} is listed in {MANIFEST} but missing", path.display())))?;
            if &content_hash(&bytes) != expected {
                return Err(Error::Validation(format!("{} does not match its manifest hash", path.display())));
            }
        }
        for (path, expected) in &self.manifest.inputs {
            let bytes = fs::read(path).map_err(|_| Error::Validation(format!("input {path} is listed in {MANIFEST} but missing")))?;
            if &content_hash(&bytes) != expected {
                return Err(Error::Validation(format!("input {path} changed since it was used (hash mismatch)")));
            }
        }
        Ok(())
    }

    fn save_manifest(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest is serializable");
        fs::write(self.path(MANIFEST), text + "\n")?;
        Ok(())
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        fs::write(self.path(name), bytes)?;
        self.manifest.outputs.insert(name.into(), content_hash(bytes));
        self.save_manifest()
    }

    /// Let `save` write `name`, then record its hash.
    fn write_with(&mut self, name: &str, save: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
        let path = self.path(name);
        save(&path)?;
        self.manifest.outputs.insert(name.into(), content_hash(&fs::read(&path)?));
        self.save_manifest()
    }

    fn input(&mut self, field: &str, path: &Option<PathBuf>) -> Result<PathBuf> {
        let path = path.clone().ok_or_else(|| Error::config(format!("data.{field}"), "a path is required for this command"))?;
        let bytes = fs::read(&path).map_err(|e| Error::config(format!("data.{field}"), format!("cannot read {}: {e}", path.display())))?;
        self.manifest.inputs.insert(path.display().to_string(), content_hash(&bytes));
        Ok(path)
    }

    fn corpus(&mut self) -> Result<Corpus> {
        let p = self.config.data.corpus.clone();
        Corpus::load(&self.input("corpus", &p)?)
    }

    fn queries(&mut self) -> Result<QuerySet> {
        let p = self.config.data.queries.clone();
        QuerySet::load(&self.input("queries", &p)?)
    }

    fn qrels(&mut self) -> Result<Qrels> {
        let p = self.config.data.qrels.clone();
        Qrels::load(&self.input("qrels", &p)?)
    }

    fn vocab(&self) -> Result<Vocabulary> {
        Vocabulary::load(&self.require(VOCAB, "build-vocab")?)
    }

    fn retriever(&self, name: &str, command: &str) -> Result<Retriever<f32>> {
        Checkpoint::load(&self.require(name, command)?)?.retriever()
    }

    /// Most trained retriever checkpoint present in the run.
    fn latest_retriever(&self, at_least_stage: u8) -> Result<String> {
        let mut candidates: Vec<String> = (1..=3).rev().filter(|&s| s >= at_least_stage.max(1)).map(stage_checkpoint).collect();
        if at_least_stage == 0 {
            candidates.push(PRETRAIN_CKPT.into());
        }
        candidates.into_iter().find(|c| self.has(c)).ok_or_else(|| {
            let (path, command) = match at_least_stage {
                0 => (PRETRAIN_CKPT.to_string(), "pretrain".to_string()),
                s => (stage_checkpoint(s), format!("finetune --stage {s}")),
            };
            Error::MissingArtifact { path: self.path(&path), command }
        })
    }

    fn tokenize(&self, texts: &Corpus, vocab: &Vocabulary) -> TokenizedCollection {
        TokenizedCollection::new(texts, vocab, self.config.model.max_len)
    }
}

/// `build-vocab`: frequency-ranked vocabulary of the corpus.
pub fn build_vocab(run: &mut RunDir) -> Result<Vocabulary> {
    let corpus = run.corpus()?;
    let vocab = Vocabulary::build(corpus.texts(), run.config.model.vocab_size)?;
    info!("vocabulary of {} tokens from {} documents", vocab.len(), corpus.len());
    run.write_with(VOCAB, |p| vocab.save(p))?;
    Ok(vocab)
}

/// `pretrain`: duplex pre-training from a fresh initialization.
pub fn pretrain_stage(run: &mut RunDir) -> Result<()> {
    let vocab = run.vocab()?;
    let corpus = run.corpus()?;
    let cfg = run.config.clone();
    let docs = run.tokenize(&corpus, &vocab);
    let dims = ModelDims::new(&cfg.model, vocab.len(), cfg.representation.dense_dim);
    let mut model = Retriever::init(dims, &cfg.model, cfg.seed)?;
    let (log, opt) = pretrain(&mut model, docs.seqs(), &cfg.pretrain, &cfg.masking, cfg.seed, |r| {
        if r.step % 50 == 0 {
            info!("step {} lr {:.2e} loss {:.4}", r.step, r.lr, r.losses.total);
        }
    })?;
    let mut csv = Vec::new();
    write_loss_csv(&mut csv, &log)?;
    run.write(LOSS_CSV, &csv)?;
    run.write(PRETRAIN_CKPT, &Checkpoint::from_retriever(&cfg, &model, Some(opt)).to_bytes())
}

/// `finetune --stage {1,2,3}`.
pub fn finetune_stage(run: &mut RunDir, stage: u8) -> Result<Vec<f64>> {
    let (start, start_cmd) = match stage {
        1 => (PRETRAIN_CKPT.to_string(), "pretrain".to_string()),
        2 | 3 => (stage_checkpoint(stage - 1), format!("finetune --stage {}", stage - 1)),
        _ => return Err(Error::Usage(format!("fine-tuning stage must be 1, 2 or 3, got {stage}"))),
    };
    let mut model = run.retriever(&start, &start_cmd)?;
    let triples = if stage >= 2 { Some(load_triples(&run.require(TRIPLES, "mine-negatives")?)?) } else { None };
    let teacher = if stage == 3 { Some(load_teacher_scores(&run.require(TEACHER_SCORES, "teach")?)?) } else { None };
    let vocab = run.vocab()?;
    let (corpus, queries, qrels) = (run.corpus()?, run.queries()?, run.qrels()?);
    let cfg = run.config.clone();
    let (docs, qs) = (run.tokenize(&corpus, &vocab), run.tokenize(&queries, &vocab));
    let data = FinetuneData { queries: &qs, corpus: &docs, qrels: &qrels };
    let seed = cfg.seed.wrapping_add(u64::from(stage));
    let losses = match (triples, teacher) {
        (None, _) => train_stage1(&mut model, &data, &cfg.finetune, &cfg.representation, seed)?,
        (Some(t), None) => train_stage2(&mut model, &data, &t, &cfg.finetune, &cfg.representation, seed)?,
        (Some(t), Some(s)) => train_stage3(&mut model, &data, &t, &s, &cfg.finetune, &cfg.representation, seed)?,
    };
    if let Some(last) = losses.last() {
        info!("stage {stage}: {} steps, final loss {last:.4}", losses.len());
    }
    let name = stage_checkpoint(stage);
    run.write(&name, &Checkpoint::from_retriever(&cfg, &model, None).to_bytes())?;
    run.manifest.derived_from.insert(name, start);
    run.save_manifest()?;
    Ok(losses)
}

/// `mine-negatives`: hard negatives from the latest fine-tuned retriever.
pub fn mine_negatives(run: &mut RunDir) -> Result<()> {
    let source = run.latest_retriever(1)?;
    let model = run.retriever(&source, "finetune --stage 1")?;
    let vocab = run.vocab()?;
    let (corpus, queries, qrels) = (run.corpus()?, run.queries()?, run.qrels()?);
    let (docs, qs) = (run.tokenize(&corpus, &vocab), run.tokenize(&queries, &vocab));
    let cfg = &run.config;
    let triples = mine_hard_negatives(&model, &qs, &docs, &qrels, cfg.finetune.hard_negatives, cfg.representation.sparse_k)?;
    info!("mined {} triples with {source}", triples.len());
    run.write_with(TRIPLES, |p| save_triples(p, &triples))?;
    run.manifest.derived_from.insert(TRIPLES.into(), source);
    run.save_manifest()
}

/// `teach`: teacher scores for every mined candidate.
pub fn teach(run: &mut RunDir) -> Result<()> {
    let triples = load_triples(&run.require(TRIPLES, "mine-negatives")?)?;
    let vocab = run.vocab()?;
    let (corpus, queries, qrels) = (run.corpus()?, run.queries()?, run.qrels()?);
    let cfg = run.config.clone();
    let n = cfg.finetune.hard_negatives;
    let teacher = match cfg.teacher.kind {
        TeacherKind::Oracle => Teacher::Oracle(qrels),
        TeacherKind::CrossEncoder => {
            let base = run.retriever(PRETRAIN_CKPT, "pretrain")?;
            let mut ce = CrossEncoder::from_retriever(&base, &cfg.model, cfg.seed.wrapping_add(10))?;
            let losses = train_cross_encoder(&mut ce, &vocab, &queries, &corpus, &triples, &cfg.teacher, n, cfg.seed.wrapping_add(11))?;
            if let Some(last) = losses.last() {
                info!("cross-encoder: {} steps, final loss {last:.4}", losses.len());
            }
            run.write(TEACHER_CKPT, &Checkpoint::from_cross_encoder(&cfg, &ce).to_bytes())?;
            Teacher::CrossEncoder(ce)
        }
    };
    let scores = teacher_scores(&teacher, &triples, &vocab, &queries, &corpus, n)?;
    run.write_with(TEACHER_SCORES, |p| save_teacher_scores(p, &scores))
}

/// `encode`: hybrid vectors of the corpus with the latest retriever.
pub fn encode(run: &mut RunDir) -> Result<()> {
    let source = run.latest_retriever(0)?;
    let model = run.retriever(&source, "pretrain")?;
    let vocab = run.vocab()?;
    let corpus = run.corpus()?;
    let docs = run.tokenize(&corpus, &vocab);
    let k = run.config.representation.sparse_k;
    let vectors = encode_collection(&model, &docs, k)?;
    info!("encoded {} documents with {source}", vectors.len());
    run.write_with(EMBEDDINGS, |p| save_embeddings(p, model.dims.dense_dim, k, &vectors))?;
    run.manifest.derived_from.insert(EMBEDDINGS.into(), source);
    run.save_manifest()
}

/// `index`: inverted index plus dense matrix over the encoded corpus.
pub fn index(run: &mut RunDir) -> Result<()> {
    let (dense_dim, k, vectors) = load_embeddings(&run.require(EMBEDDINGS, "encode")?)?;
    let index = HybridIndex::build(dense_dim, k, &vectors)?;
    info!("indexed {} documents, {} postings", index.len(), index.num_postings());
    run.write(INDEX, &index.to_bytes())
}

/// Exact top-`depth` search for every query of `queries`.
pub fn search_all(
    model: &Retriever<f32>,
    index: &HybridIndex,
    queries: &TokenizedCollection,
    repr: &RepresentationConfig,
    depth: usize,
) -> Result<Run> {
    let mut out = Run::new();
    for (id, seq) in queries.iter() {
        let mut q = represent_query(model, seq).map_err(|e| Error::Validation(format!("query {id}: {e}")))?;
        if repr.symmetric {
            q = q.sparsified(repr.sparse_k)?;
        }
        out.insert(id.to_string(), index.search(&q, depth)?);
    }
    Ok(out)
}

/// `search`: rank the indexed corpus for every query.
pub fn search(run: &mut RunDir) -> Result<()> {
    let index = HybridIndex::load(&run.require(INDEX, "index")?)?;
    let source = run
        .manifest
        .derived_from
        .get(EMBEDDINGS)
        .cloned()
        .ok_or_else(|| Error::MissingArtifact { path: run.path(EMBEDDINGS), command: "encode".into() })?;
    let model = run.retriever(&source, "encode")?;
    let vocab = run.vocab()?;
    let queries = run.queries()?;
    let qs = run.tokenize(&queries, &vocab);
    let results = search_all(&model, &index, &qs, &run.config.representation, SEARCH_DEPTH)?;
    run.write_with(RUN, |p| save_run(p, &results))
}

/// `eval`: standard metrics of the run file. Refuses a run directory whose
/// files no longer match the manifest.
pub fn eval(run: &mut RunDir) -> Result<BTreeMap<String, serde_json::Value>> {
    run.verify()?;
    let results = load_run(&run.require(RUN, "search")?)?;
    let qrels = run.qrels()?;
    let metrics = standard_metrics(&results, &qrels);
    let text = serde_json::to_string_pretty(&metrics).expect("metrics are serializable");
    run.write(METRICS, (text + "\n").as_bytes())?;
    run.manifest.metrics = Some(metrics.clone());
    run.save_manifest()?;
    Ok(metrics)
}

/// Pre-training objective variants compared by the ablation.
pub const ABLATION_OBJECTIVES: [(&str, Objectives); 3] = [
    ("cls-only", Objectives { cls_decoding: true, ot_decoding: false }),
    ("ot-only", Objectives { cls_decoding: false, ot_decoding: true }),
    ("cls+ot", Objectives::BOTH),
];

/// Representation sizes compared by the ablation for a width-`d` encoder:
/// full width, half width, and half-width dense with the sparse budget cut
/// so the hybrid vector is no larger than a dense `d`-float vector.
pub fn representation_grid(d: usize, symmetric: bool) -> Vec<RepresentationConfig> {
    let half = (d / 2).max(1);
    let equal_storage = ((d - half) * 4 / 6).max(1);
    [(d, d), (half, half), (half, equal_storage)]
        .into_iter()
        .map(|(dense_dim, sparse_k)| RepresentationConfig { dense_dim, sparse_k, symmetric })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub seed: u64,
    pub objectives: String,
    pub dense_dim: usize,
    pub sparse_k: usize,
    pub mrr_at_10: f64,
}

/// Data for an ablation: queries judged in `train` fine-tune, queries
/// judged in `test` are evaluated.
pub struct AblationData<'a> {
    pub corpus: &'a Corpus,
    pub queries: &'a QuerySet,
    pub train: &'a Qrels,
    pub test: &'a Qrels,
}

/// Split judgments by query: the first `fraction` of judged queries (in id
/// order) train, the rest test.
pub fn split_qrels(qrels: &Qrels, fraction: f64) -> (Qrels, Qrels) {
    let ids: Vec<&str> = qrels.queries().collect();
    let n_train = ((ids.len() as f64) * fraction).round() as usize;
    let (mut train, mut test) = (Qrels::new(), Qrels::new());
    for (q, d, g) in qrels.iter() {
        let part = if ids.binary_search(&q).unwrap_or(usize::MAX) < n_train { &mut train } else { &mut test };
        part.insert(q, d, g);
    }
    (train, test)
}

/// For every seed and objective variant: pre-train with a matched budget,
/// then for every representation size fine-tune stage 1 on the training
/// queries and measure MRR@10 on the held-out queries.
pub fn run_ablation(cfg: &RunConfig, data: &AblationData, seeds: &[u64], grid: &[RepresentationConfig]) -> Result<Vec<AblationRow>> {
    if data.test.is_empty() {
        return Err(Error::Usage("the ablation needs held-out judged queries".into()));
    }
    let vocab = Vocabulary::build(data.corpus.texts(), cfg.model.vocab_size)?;
    let docs = TokenizedCollection::new(data.corpus, &vocab, cfg.model.max_len);
    let queries = TokenizedCollection::new(data.queries, &vocab, cfg.model.max_len);
    let mut test_queries = TokenizedCollection::default();
    for q in data.test.queries() {
        match queries.get(q) {
            Some(seq) => test_queries.push(q.to_string(), seq.to_vec()),
            None => warn!("held-out query {q} has no text; skipped"),
        }
    }
    let mut rows = Vec::new();
    for &seed in seeds {
        for (label, obj) in ABLATION_OBJECTIVES {
            let mut pcfg = cfg.pretrain.clone();
            pcfg.cls_decoding = obj.cls_decoding;
            pcfg.ot_decoding = obj.ot_decoding;
            let dims = ModelDims::new(&cfg.model, vocab.len(), cfg.representation.dense_dim);
            let mut base = Retriever::init(dims, &cfg.model, seed)?;
            pretrain(&mut base, docs.seqs(), &pcfg, &cfg.masking, seed, |_| {})?;
            for repr in grid {
                let dims = ModelDims { dense_dim: repr.dense_dim, ..dims };
                let mut model = Retriever::init(dims, &cfg.model, seed)?;
                copy_matching(&mut model.params, &base.params);
                let ft = FinetuneData { queries: &queries, corpus: &docs, qrels: data.train };
                train_stage1(&mut model, &ft, &cfg.finetune, repr, seed.wrapping_add(1))?;
                let index = HybridIndex::build(repr.dense_dim, repr.sparse_k, &encode_collection(&model, &docs, repr.sparse_k)?)?;
                let results = search_all(&model, &index, &test_queries, repr, 10)?;
                let mrr = mrr_at_k(&results, data.test, 10).mean;
                info!("seed {seed} {label} d'={} k={}: MRR@10 {mrr:.4}", repr.dense_dim, repr.sparse_k);
                rows.push(AblationRow { seed, objectives: label.into(), dense_dim: repr.dense_dim, sparse_k: repr.sparse_k, mrr_at_10: mrr });
            }
        }
    }
    Ok(rows)
}

/// `ablate`: the objective-by-representation grid on the configured data,
/// with 3/4 of the judged queries for fine-tuning.
pub fn ablate(run: &mut RunDir, seeds: &[u64]) -> Result<Vec<AblationRow>> {
    let (corpus, queries, qrels) = (run.corpus()?, run.queries()?, run.qrels()?);
    let (train, test) = split_qrels(&qrels, 0.75);
    let cfg = run.config.clone();
    let grid = representation_grid(cfg.model.d, cfg.representation.symmetric);
    let data = AblationData { corpus: &corpus, queries: &queries, train: &train, test: &test };
    let rows = run_ablation(&cfg, &data, seeds, &grid)?;
    let text = serde_json::to_string_pretty(&rows).expect("rows are serializable");
    run.write(ABLATION, (text + "\n").as_bytes())?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_respects_storage_budget() {
        let g = representation_grid(128, false);
        assert_eq!(g.iter().map(|r| (r.dense_dim, r.sparse_k)).collect::<Vec<_>>(), [(128, 128), (64, 64), (64, 42)]);
        assert!(g[2].dense_dim * 4 + g[2].sparse_k * 6 <= 128 * 4);
    }

    #[test]
    fn split_is_by_query_and_disjoint() {
        let mut q = Qrels::new();
        for i in 0..8 {
            q.insert(format!("q{i}"), format!("d{i}"), 1);
            q.insert(format!("q{i}"), "dx", 0);
        }
        let (a, b) = split_qrels(&q, 0.75);
        assert_eq!((a.queries().count(), b.queries().count()), (6, 2));
        assert!(a.queries().all(|x| !b.contains_query(x)));
        assert_eq!(a.len() + b.len(), q.len());
    }

    #[test]
    fn missing_predecessor_names_the_command() {
        let dir = tempfile::tempdir().unwrap();
        let mut run = RunDir::open(dir.path(), &RunConfig::desk()).unwrap();
        match finetune_stage(&mut run, 2) {
            Err(Error::MissingArtifact { command, .. }) => assert_eq!(command, "finetune --stage 1"),
            other => panic!("unexpected {other:?}"),
        }
        match pretrain_stage(&mut run) {
            Err(Error::MissingArtifact { command, .. }) => assert_eq!(command, "build-vocab"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn changed_config_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        RunDir::open(dir.path(), &RunConfig::desk()).unwrap();
        let mut other = RunConfig::desk();
        other.seed += 1;
        assert!(matches!(RunDir::open(dir.path(), &other), Err(Error::Validation(_))));
    }

    #[test]
    fn tampered_output_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let mut run = RunDir::open(dir.path(), &RunConfig::desk()).unwrap();
        run.write("x.txt", b"one").unwrap();
        run.verify().unwrap();
        fs::write(dir.path().join("x.txt"), b"two").unwrap();
        assert!(matches!(run.verify(), Err(Error::Validation(_))));
        assert!(matches!(run.require("x.txt", "make-x"), Err(Error::Validation(_))));
    }
}
