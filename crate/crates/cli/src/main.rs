use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use duplex_core::config::RunConfig;
use duplex_core::pipeline::{self, RunDir};
use duplex_core::synth::{self, SynthConfig};
use duplex_core::{Error, Result};

#[derive(Parser)]
#[command(name = "duplex", version, about = "Duplex masked auto-encoder retrieval: pre-train, fine-tune, index, search, evaluate")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config; omitted keys take the desk defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory holding every artifact and the manifest.
    #[arg(long, global = true, default_value = "run")]
    out_dir: PathBuf,
    /// Overrides `data.corpus`.
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    /// Overrides `data.queries`.
    #[arg(long, global = true)]
    queries: Option<PathBuf>,
    /// Overrides `data.qrels`.
    #[arg(long, global = true)]
    qrels: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a topic-structured toy collection (corpus, queries, qrels) to the out dir.
    Synth {
        #[arg(long, default_value_t = 2048)]
        num_docs: usize,
        #[arg(long, default_value_t = 256)]
        num_queries: usize,
    },
    /// Build the vocabulary from the corpus.
    BuildVocab,
    /// Pre-train the retriever with the enabled decoders.
    Pretrain,
    /// Fine-tune the retriever.
    Finetune {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        stage: u8,
    },
    /// Mine hard negatives with the latest fine-tuned retriever.
    MineNegatives,
    /// Score mined candidates with the teacher.
    Teach,
    /// Encode the corpus into hybrid vectors.
    Encode,
    /// Build the search index over the encoded corpus.
    Index,
    /// Rank the corpus for every query.
    Search,
    /// Compute metrics for the search run.
    Eval,
    /// Objective-by-representation ablation grid on held-out queries.
    Ablate {
        #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3])]
        seeds: Vec<u64>,
    },
}

fn resolve_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::desk(),
    };
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    for (slot, value) in [(&mut cfg.data.corpus, &c.corpus), (&mut cfg.data.queries, &c.queries), (&mut cfg.data.qrels, &c.qrels)] {
        if value.is_some() {
            slot.clone_from(value);
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_synth(c: &Common, docs: usize, queries: usize) -> Result<()> {
    let seed = c.seed.unwrap_or(SynthConfig::default().seed);
    let data = synth::generate(&SynthConfig { n_docs: docs, n_queries: queries, seed, ..SynthConfig::default() })?;
    std::fs::create_dir_all(&c.out_dir)?;
    data.corpus.save(&c.out_dir.join("corpus.tsv"))?;
    data.queries.save(&c.out_dir.join("queries.tsv"))?;
    data.qrels.save(&c.out_dir.join("qrels.tsv"))?;
    println!("wrote {docs} documents and {queries} queries to {}", c.out_dir.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Command::Synth { num_docs, num_queries } = cli.command {
        return write_synth(&cli.common, num_docs, num_queries);
    }
    let cfg = resolve_config(&cli.common)?;
    let mut dir = RunDir::open(&cli.common.out_dir, &cfg)?;
    match cli.command {
        Command::Synth { .. } => unreachable!("handled above"),
        Command::BuildVocab => {
            let vocab = pipeline::build_vocab(&mut dir)?;
            println!("{} tokens", vocab.len());
        }
        Command::Pretrain => pipeline::pretrain_stage(&mut dir)?,
        Command::Finetune { stage } => {
            let losses = pipeline::finetune_stage(&mut dir, stage)?;
            println!("stage {stage}: {} steps", losses.len());
        }
        Command::MineNegatives => pipeline::mine_negatives(&mut dir)?,
        Command::Teach => pipeline::teach(&mut dir)?,
        Command::Encode => pipeline::encode(&mut dir)?,
        Command::Index => pipeline::index(&mut dir)?,
        Command::Search => pipeline::search(&mut dir)?,
        Command::Eval => {
            let metrics = pipeline::eval(&mut dir)?;
            println!("{}", serde_json::to_string_pretty(&metrics).expect("metrics are serializable"));
        }
        Command::Ablate { seeds } => {
            if seeds.is_empty() {
                return Err(Error::Usage("--seeds needs at least one seed".into()));
            }
            println!("seed\tobjectives\tdense_dim\tsparse_k\tmrr@10");
            for r in pipeline::ablate(&mut dir, &seeds)? {
                println!("{}\t{}\t{}\t{}\t{:.4}", r.seed, r.objectives, r.dense_dim, r.sparse_k, r.mrr_at_10);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // One line, so callers can parse the class between the brackets.
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.class());
            log::debug!("{e:?}");
            ExitCode::FAILURE
        }
    }
}
