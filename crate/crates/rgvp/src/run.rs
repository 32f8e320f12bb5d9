//! Training run directories.
//!
//! ```text
//! <run>/manifest.json      RunManifest, written before the first step
//! <run>/config.toml        resolved configuration
//! <run>/tokens.txt         tokenizer vocabulary
//! <run>/relations.txt      relation vocabulary
//! <run>/log.jsonl          one line per step
//! <run>/checkpoints/step_NNNNNNN.rgvp
//! <run>/checkpoints.json   CheckpointMeta list with dev/test metrics
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rgvp_core::eval::CheckpointMeta;
use rgvp_core::model::{ModelConfig, ModelState};
use rgvp_core::objectives::{LossBreakdown, LossCounts};
use rgvp_core::synth::Split;
use rgvp_core::trainer::{StepRecord, Task};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io::{self, JsonlAppender};
use crate::pipeline::{self, EvalSet, EvalTask, Prepared};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const LOG_FILE: &str = "log.jsonl";
pub const CHECKPOINTS_FILE: &str = "checkpoints.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FORMAT_VERSION: u32 = 1;

pub const ALL_EVAL_TASKS: [EvalTask; 4] = [EvalTask::Foils, EvalTask::Vsr, EvalTask::Retrieval, EvalTask::Mrc];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub checkpoint_version: u32,
    pub crate_version: String,
    pub seed: u64,
    pub config: RunConfig,
    pub model: ModelConfig,
    pub data: String,
    pub data_sha256: String,
    pub started_unix: u64,
    pub artifacts: BTreeMap<String, String>,
}

/// One line of `log.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub step: usize,
    pub task: Task,
    pub lr: f64,
    pub grad_norm: f64,
    pub cl: f64,
    pub itm: f64,
    pub mlm: f64,
    pub vma: f64,
    pub mrc: f64,
    pub bbox: f64,
    pub total: f64,
    pub counts: LossCounts,
}

impl From<&StepRecord> for LogLine {
    fn from(r: &StepRecord) -> Self {
        let LossBreakdown { cl, itm, mlm, vma, mrc, bbox, total, counts } = r.losses;
        Self { step: r.step, task: r.task, lr: r.lr, grad_norm: r.grad_norm, cl, itm, mlm, vma, mrc, bbox, total, counts }
    }
}

pub fn checkpoint_name(step: usize) -> String {
    format!("{CHECKPOINT_DIR}/step_{step:07}.rgvp")
}

/// Dev and test metrics, keys prefixed `dev.` and `test.`.
pub fn split_metrics(state: &ModelState<f32>, p: &Prepared, cfg: &RunConfig) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for (prefix, split) in [("dev", Split::Dev), ("test", Split::Test)] {
        let set = EvalSet::for_split(p, split, cfg.eval.max_tokens, cfg.eval.retrieval_n);
        if set.records.is_empty() {
            continue;
        }
        let tasks: Vec<EvalTask> = ALL_EVAL_TASKS
            .into_iter()
            .filter(|t| match t {
                EvalTask::Foils => !set.foils.is_empty(),
                EvalTask::Vsr => !set.vsr.is_empty(),
                _ => true,
            })
            .collect();
        for (k, v) in set.run(state, &tasks)? {
            out.insert(format!("{prefix}.{k}"), v);
        }
    }
    Ok(out)
}

pub struct RunOutcome {
    pub final_checkpoint: PathBuf,
    pub checkpoints: Vec<CheckpointMeta>,
    pub state: ModelState<f32>,
}

/// Trains into `out`, checkpointing every `checkpoint_every` steps and at
/// the end. Each checkpoint is evaluated on dev and test.
pub fn train_run(data: &Path, out: &Path, cfg: &RunConfig) -> Result<RunOutcome> {
    let dir = io::data_dir_of(data);
    let corpus = io::load_data_dir(&dir)?;
    let image_size = corpus.records.first().map(|r| r.width as usize).unwrap_or(64);
    let prepared = Prepared::from_synth(corpus, cfg.relations)?;
    train_prepared(&prepared, &dir, image_size, out, cfg)
}

pub fn train_prepared(
    prepared: &Prepared,
    data_dir: &Path,
    image_size: usize,
    out: &Path,
    cfg: &RunConfig,
) -> Result<RunOutcome> {
    let model = cfg.model_config(prepared.tokenizer.vocab_size(), prepared.vocab.len(), image_size)?;
    cfg.schedule.validate()?;
    std::fs::create_dir_all(out.join(CHECKPOINT_DIR)).map_err(|e| Error::io(out, e))?;
    let data_file = data_dir.join(io::DATASET_FILE);
    let data_sha256 = if data_file.exists() { checkpoint::file_sha256(&data_file)? } else { String::new() };
    let artifacts = [
        ("config", CONFIG_FILE),
        ("tokens", io::TOKENS_FILE),
        ("relations", io::RELATIONS_FILE),
        ("log", LOG_FILE),
        ("checkpoints", CHECKPOINTS_FILE),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect();
    let manifest = RunManifest {
        format_version: FORMAT_VERSION,
        checkpoint_version: checkpoint::VERSION,
        crate_version: env!("CARGO_PKG_VERSION").into(),
        seed: cfg.schedule.seed,
        config: cfg.clone(),
        model: model.clone(),
        data: data_dir.display().to_string(),
        data_sha256,
        started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        artifacts,
    };
    io::write_json(&out.join(MANIFEST_FILE), &manifest)?;
    io::write_atomic(&out.join(CONFIG_FILE), cfg.to_toml().as_bytes())?;
    io::save_tokens(&out.join(io::TOKENS_FILE), &prepared.tokenizer)?;
    io::save_relation_vocab(&out.join(io::RELATIONS_FILE), &prepared.vocab)?;

    let mut log = JsonlAppender::create(&out.join(LOG_FILE))?;
    let mut metas: Vec<CheckpointMeta> = Vec::new();
    let every = cfg.schedule.checkpoint_every;
    let total = cfg.schedule.steps;
    let save = |step: usize, state: &ModelState<f32>, metas: &mut Vec<CheckpointMeta>| -> Result<()> {
        let rel = checkpoint_name(step);
        checkpoint::save(&out.join(&rel), state, step, &prepared.tokenizer, &prepared.vocab)?;
        let eval_metrics = split_metrics(state, prepared, cfg)?;
        log::info!("checkpoint {rel}: {eval_metrics:?}");
        metas.push(CheckpointMeta { step, path: rel, eval_metrics });
        io::write_json(&out.join(CHECKPOINTS_FILE), metas)
    };
    let state = pipeline::train(prepared, model, cfg.schedule.clone(), |rec, state| -> Result<()> {
        log.push(&LogLine::from(rec))?;
        if rec.step % 100 == 0 {
            log::debug!("step {} {} total {:.4}", rec.step, rec.task.as_str(), rec.losses.total);
        }
        let done = rec.step + 1;
        if every > 0 && done % every == 0 && done < total {
            save(done, state, &mut metas)?;
        }
        Ok(())
    })?;
    save(total, &state, &mut metas)?;
    Ok(RunOutcome { final_checkpoint: out.join(checkpoint_name(total)), checkpoints: metas, state })
}

pub fn load_checkpoints(run: &Path) -> Result<Vec<CheckpointMeta>> {
    io::read_json(&run.join(CHECKPOINTS_FILE))
}

/// Long-format rows `(step, metric, value)` for plotting.
pub fn plot_csv(checkpoints: &[CheckpointMeta]) -> String {
    let mut s = String::from("step,metric,value\n");
    for c in checkpoints {
        for (k, v) in &c.eval_metrics {
            s.push_str(&format!("{},{},{}\n", c.step, k, v));
        }
    }
    s
}
