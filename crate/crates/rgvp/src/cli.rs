//! Command-line interface.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use rgvp_core::eval::{select_checkpoint, selection_study, EvalReport};
use rgvp_core::model::derive_rng;
use rgvp_core::patchmask::{patches_for_bbox, PatchGrid};
use rgvp_core::scene::{build_relation_vocab, corpus_stats, EntityBox};
use rgvp_core::synth::{generate, Split, SynthConfig};
use rgvp_core::trainer::Ablation;
use rgvp_core::verbalise::verbalise_graph;
use serde::Serialize;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io;
use crate::pipeline::{build_tokenizer, EvalSet, EvalTask};
use crate::run;

#[derive(Debug, Parser)]
#[command(name = "rgvp", version, about = "Relation-grounded vision-language pretraining on synthetic scenes")]
pub struct Cli {
    /// Base random seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for data work (training itself is single-threaded).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic shapes corpus.
    Synth(SynthArgs),
    /// Build relation and token vocabularies and corpus statistics.
    Prepare(PrepareArgs),
    /// Print the verbalised scene graph of one record.
    Verbalise(VerbaliseArgs),
    /// Print the patch mask of a bounding box.
    Mask(MaskArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Pick the best checkpoint of a run by one metric.
    Select(SelectArgs),
    /// Checkpoint-selection study over a run.
    Study(StudyArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// TOML file with generator settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Dataset file or directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Relation vocabulary size.
    #[arg(long, default_value_t = 8)]
    pub relations: usize,
}

#[derive(Debug, Args)]
pub struct VerbaliseArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub id: String,
    #[arg(long, default_value_t = 16)]
    pub k: usize,
    #[arg(long, default_value_t = 112)]
    pub max_tokens: usize,
}

#[derive(Debug, Args)]
pub struct MaskArgs {
    /// `xmin,ymin,xmax,ymax` in pixels.
    #[arg(long, value_delimiter = ',', required = true)]
    pub bbox: Vec<f32>,
    /// Patches per side.
    #[arg(long, default_value_t = 8)]
    pub grid: usize,
    #[arg(long, default_value_t = 64)]
    pub image_size: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset file or directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated subset of vsg,mrc,vma,bbox.
    #[arg(long)]
    pub ablation: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Data directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Any of foils, vsr, retrieval, mrc.
    #[arg(long, value_delimiter = ',', default_value = "foils,vsr,retrieval,mrc")]
    pub task: Vec<String>,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value_t = 36)]
    pub max_tokens: usize,
    #[arg(long, default_value_t = 50)]
    pub retrieval_n: usize,
    /// VSR decision threshold on the match probability.
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub metric: String,
}

#[derive(Debug, Args)]
pub struct StudyArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, default_value = "dev.tr1")]
    pub reference: String,
    /// Output prefix; writes `<out>.json` and `<out>.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn print_json<T: Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "dev" => Ok(Split::Dev),
        "test" => Ok(Split::Test),
        other => Err(Error::Config(format!("unknown split '{other}'"))),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    if let Some(t) = cli.threads {
        log::debug!("threads = {t}");
    }
    match cli.command {
        Command::Synth(a) => {
            let cfg = match &a.config {
                Some(p) => {
                    let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
                }
                None => SynthConfig::default(),
            };
            let corpus = generate(a.n, seed, &cfg);
            io::save_synth(&a.out, &corpus)?;
            log::info!("wrote {} scenes to {}", corpus.records.len(), a.out.display());
            print_json(&corpus_stats(&corpus.records));
        }
        Command::Prepare(a) => {
            let dir = io::data_dir_of(&a.data);
            let corpus = io::load_data_dir(&dir)?;
            let train: Vec<_> = corpus
                .records
                .iter()
                .zip(&corpus.splits)
                .filter(|(_, s)| **s == Split::Train)
                .map(|(r, _)| r.clone())
                .collect();
            let vocab = build_relation_vocab(&train, a.relations)?;
            io::save_relation_vocab(&a.out.join(io::RELATIONS_FILE), &vocab)?;
            io::save_tokens(&a.out.join(io::TOKENS_FILE), &build_tokenizer(&train))?;
            let stats = corpus_stats(&corpus.records);
            io::write_json(&a.out.join("stats.json"), &stats)?;
            print_json(&stats);
        }
        Command::Verbalise(a) => {
            let path = if a.data.is_dir() { a.data.join(io::DATASET_FILE) } else { a.data.clone() };
            let records = io::load_dataset(&path, None)?;
            let r = records
                .iter()
                .find(|r| r.id == a.id)
                .ok_or_else(|| Error::Config(format!("no record with id '{}'", a.id)))?;
            let tok = build_tokenizer(&records);
            let mut rng = derive_rng(seed, 0);
            let v = verbalise_graph(&r.triplets, &r.entities, &tok, a.k, a.max_tokens, &mut rng)?;
            println!("{}", v.text);
        }
        Command::Mask(a) => {
            if a.grid == 0 || a.image_size % a.grid != 0 {
                return Err(Error::Config("image size must be a multiple of --grid".into()));
            }
            if a.bbox.len() != 4 {
                return Err(Error::Config("--bbox takes xmin,ymin,xmax,ymax".into()));
            }
            let grid = PatchGrid::new(a.image_size, a.image_size / a.grid)?;
            let b = EntityBox::new("box", a.bbox[0], a.bbox[1], a.bbox[2], a.bbox[3]);
            print!("{}", patches_for_bbox(&grid, &b)?.render());
        }
        Command::Train(a) => {
            let mut cfg = match &a.config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::default(),
            };
            if let Some(s) = cli.seed {
                cfg.schedule.seed = s;
            }
            if let Some(s) = a.steps {
                cfg.schedule.steps = s;
                cfg.schedule.warmup_steps = cfg.schedule.warmup_steps.min(s);
            }
            if let Some(ab) = &a.ablation {
                cfg.schedule.ablation = Ablation::parse(ab)?;
            }
            let out = run::train_run(&a.data, &a.out, &cfg)?;
            println!("{}", out.final_checkpoint.display());
        }
        Command::Eval(a) => {
            let ck = checkpoint::load(&a.checkpoint)?;
            let corpus = io::load_data_dir(&io::data_dir_of(&a.data))?;
            let split = parse_split(&a.split)?;
            let ids: std::collections::HashSet<&str> = corpus
                .records
                .iter()
                .zip(&corpus.splits)
                .filter(|(_, s)| **s == split)
                .map(|(r, _)| r.id.as_str())
                .collect();
            let records: Vec<_> = corpus.records.iter().filter(|r| ids.contains(r.id.as_str())).cloned().collect();
            let set = EvalSet {
                records: &records,
                foils: corpus.foils.iter().filter(|f| ids.contains(f.image_id.as_str())).collect(),
                vsr: corpus.vsr.iter().filter(|v| ids.contains(v.image_id.as_str())).collect(),
                tokenizer: &ck.tokenizer,
                vocab: &ck.vocab,
                max_tokens: a.max_tokens,
                retrieval_n: a.retrieval_n,
            };
            let mut reports = Vec::new();
            for t in &a.task {
                let task = EvalTask::parse(t)?;
                let (metrics, n) = match task {
                    EvalTask::Vsr => (set.vsr_metrics_at(&ck.state, a.threshold)?, set.vsr.len()),
                    EvalTask::Foils => (set.run(&ck.state, &[task])?, set.foils.len()),
                    EvalTask::Retrieval => (set.run(&ck.state, &[task])?, records.len().min(a.retrieval_n)),
                    EvalTask::Mrc => (set.run(&ck.state, &[task])?, records.iter().map(|r| r.triplets.len()).sum()),
                };
                reports.push(EvalReport { task: t.clone(), metrics, n_examples: n, checkpoint_step: ck.step });
            }
            match &a.out {
                Some(p) => io::write_json(p, &reports)?,
                None => print_json(&reports),
            }
        }
        Command::Select(a) => {
            let cks = run::load_checkpoints(&a.run)?;
            print_json(select_checkpoint(&cks, &a.metric)?);
        }
        Command::Study(a) => {
            let cks = run::load_checkpoints(&a.run)?;
            let study = selection_study(&cks, &a.reference)?;
            let prefix = a.out.unwrap_or_else(|| a.run.join("study"));
            let with_ext = |ext: &str| {
                let mut p = prefix.clone().into_os_string();
                p.push(ext);
                PathBuf::from(p)
            };
            io::write_json(&with_ext(".json"), &study)?;
            io::write_atomic(&with_ext(".csv"), run::plot_csv(&cks).as_bytes())?;
            print_json(&study);
        }
    }
    Ok(())
}

/// Logger filtered by `RGVP_LOG` (default `info`), writing to stderr.
pub fn init_logging() {
    let env = env_logger::Env::new().filter_or("RGVP_LOG", "info");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

