use std::path::PathBuf;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use radforge::config::Config;
use radforge::curation::CurationStore;
use radforge::export::Composition;
use radforge::metrics::Labeler;
use radforge::pipeline::{self, REASONING_FILE, REFLECTION_FILE, TREE_FILE};
use radforge::{Error, Result};

#[derive(Debug, Parser)]
#[command(
    name = "radforge",
    version,
    about = "Build perception trees, compile reasoning datasets and score reports"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Pipeline config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the verification-gate BLEU-1 threshold.
    #[arg(long, global = true)]
    pub threshold: Option<f64>,
    /// Overrides the export composition.
    #[arg(long, global = true, value_parser = parse_composition)]
    pub composition: Option<Composition>,
}

fn parse_composition(s: &str) -> std::result::Result<Composition, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Prune the knowledge graph and grow the perception tree from the corpus.
    TreeBuild,
    /// Compile and verify reasoning samples.
    Compile {
        /// Tree file; defaults to the one in the output directory.
        #[arg(long)]
        tree: Option<PathBuf>,
    },
    /// Add reflection samples for every verified reasoning sample.
    Reflect {
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Write the conversation-format training file.
    Export {
        #[arg(long)]
        reasoning: Option<PathBuf>,
        #[arg(long)]
        reflection: Option<PathBuf>,
    },
    /// Score predicted reports against references.
    Score {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        references: PathBuf,
        /// `keyword` or a labeler service URL.
        #[arg(long, default_value = "keyword")]
        labeler: String,
        /// How uncertain labels count for CE: `as_negative` or `as_positive`.
        #[arg(long, default_value = "as_negative")]
        uncertain: String,
        #[arg(long, default_value = "scores.json")]
        out: PathBuf,
    },
    /// Convert an `annotation.json` dataset layout into corpus JSONL.
    Import {
        #[arg(long)]
        annotation: PathBuf,
        /// `iu_xray`, `mimic_cxr` or `other`.
        #[arg(long)]
        source: String,
        /// Directory the annotation's image paths are relative to.
        #[arg(long)]
        images_root: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert a split CSV (e.g. the MIMIC-CXR split file) into a split listing.
    ImportSplit {
        #[arg(long)]
        csv: PathBuf,
        /// Column holding report ids.
        #[arg(long, default_value = "study_id")]
        id_column: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the curation API for a tree file.
    CurateServe {
        #[arg(long)]
        tree: Option<PathBuf>,
        /// Defaults to `curation.bind` from the config.
        #[arg(long)]
        bind: Option<String>,
    },
}

impl Cli {
    fn load_config(&self) -> Result<Config> {
        let path = self
            .config
            .as_deref()
            .ok_or_else(|| Error::Config("--config is required for this command".into()))?;
        let mut cfg = Config::load(path)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(t) = self.threshold {
            cfg.gate.threshold = t;
        }
        if let Some(c) = self.composition {
            cfg.export.composition = c;
        }
        Ok(cfg)
    }
}

fn pretty<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializes")
}

pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::TreeBuild => {
            let cfg = cli.load_config()?;
            cfg.validate()?;
            let s = pipeline::cmd_tree_build(&cfg)?;
            println!(
                "tree v{}: {} nodes, {} sentences from {} reports ({} classified, {} unclassified)",
                s.version, s.nodes, s.sentences, s.reports, s.classified, s.unclassified
            );
            for (layer, n) in &s.per_layer {
                println!("  layer {layer}: {n} nodes");
            }
        }
        Command::Compile { tree } => {
            let cfg = cli.load_config()?;
            cfg.validate()?;
            let tree = tree.clone().unwrap_or_else(|| cfg.out(TREE_FILE));
            let m = pipeline::cmd_compile(&cfg, &tree)?;
            println!(
                "attempted {}, passed {}, failed {}, aborted {}",
                m.attempted, m.passed, m.failed, m.aborted
            );
        }
        Command::Reflect { input } => {
            let cfg = cli.load_config()?;
            let input = input.clone().unwrap_or_else(|| cfg.out(REASONING_FILE));
            let m = pipeline::cmd_reflect(&cfg, &input)?;
            println!("{} in, {} out, {} skipped", m.inputs, m.outputs, m.skipped.len());
        }
        Command::Export { reasoning, reflection } => {
            let cfg = cli.load_config()?;
            let reasoning = reasoning.clone().unwrap_or_else(|| cfg.out(REASONING_FILE));
            let reflection = reflection.clone().unwrap_or_else(|| cfg.out(REFLECTION_FILE));
            let m = pipeline::cmd_export(&cfg, &reasoning, Some(&reflection))?;
            println!("{}", pretty(&m));
        }
        Command::Score {
            predictions,
            references,
            labeler,
            uncertain,
            out,
        } => {
            let report = pipeline::cmd_score(
                predictions,
                references,
                &Labeler::parse(labeler)?,
                uncertain.parse()?,
                out,
            )?;
            println!(
                "{}",
                pretty(&serde_json::json!({ "reports": report.reports, "nlg": report.nlg, "ce": report.ce }))
            );
        }
        Command::Import {
            annotation,
            source,
            images_root,
            out,
        } => {
            let got =
                radforge::import::import_annotation_file(annotation, source.parse()?, images_root.as_deref(), out)?;
            println!(
                "{} reports written to {}, {} skipped",
                got.reports.len(),
                out.display(),
                got.skipped.len()
            );
            for id in &got.skipped {
                log::warn!("skipped {id}: empty report or no images");
            }
        }
        Command::ImportSplit { csv, id_column, out } => {
            let s = radforge::import::split_csv_file(csv, id_column, out)?;
            println!(
                "train {}, validation {}, test {}",
                s.train.len(),
                s.validation.len(),
                s.test.len()
            );
        }
        Command::CurateServe { tree, bind } => {
            let (tree, bind) = match (tree, bind) {
                (Some(t), Some(b)) if cli.config.is_none() => (t.clone(), b.clone()),
                _ => {
                    let cfg = cli.load_config()?;
                    (
                        tree.clone().unwrap_or_else(|| cfg.out(TREE_FILE)),
                        bind.clone().unwrap_or_else(|| cfg.curation.bind.clone()),
                    )
                }
            };
            let store = Arc::new(CurationStore::open(&tree)?);
            let rt = tokio::runtime::Runtime::new().map_err(|e| Error::Internal(format!("tokio runtime: {e}")))?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind(&bind)
                    .await
                    .map_err(|e| Error::Config(format!("cannot bind {bind}: {e}")))?;
                eprintln!(
                    "serving {} on http://{}",
                    tree.display(),
                    listener.local_addr().map_err(|e| Error::Internal(e.to_string()))?
                );
                let shutdown = async {
                    let _ = tokio::signal::ctrl_c().await;
                };
                crate::serve::serve(store, listener, shutdown)
                    .await
                    .map_err(|e| Error::Internal(format!("server: {e}")))
            })?;
        }
    }
    Ok(())
}
