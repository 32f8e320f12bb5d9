//! Run configuration file (TOML).
//!
//! Every key is optional; missing keys take the built-in defaults and CLI
//! flags override both. Top-level tables:
//!
//! | table        | keys |
//! |--------------|------|
//! | `[schedule]` | `steps`, `warmup_steps`, `peak_lr`, `adam_betas`, `adam_eps`, `weight_decay`, `lr_schedule` (`constant`/`cosine`), `grad_clip`, `batch_sizes.{captions,entities,mrc,vsg}`, `sampling_ratios.{…}`, `per_image.{entities_per_image,mrc_relations_per_image,vsg_relations_per_image}`, `ablation.{vsg,mrc,vma,bbox}`, `max_tokens_caption`, `max_tokens_vsg`, `objective.{weights.{cl,itm,mlm,vma,mrc,bbox},mask_ratio,giou,negatives}`, `checkpoint_every`, `seed` |
//! | `[model]`    | `patch_size`, `d_model`, `n_heads`, `depth_vision`, `depth_text`, `depth_xmodal`, `mlp_ratio`, `proj_dim`, `temperature`, `dropout`, `mrc_hidden`, `pos_scale` |
//! | `[eval]`     | `max_tokens`, `retrieval_n` |
//!
//! and the scalar `relations` (relation vocabulary size, default 8).
//! Vocabulary size, image size and text length come from the data.

use std::path::Path;

use rgvp_core::model::ModelConfig;
use rgvp_core::trainer::TrainSchedule;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelOverrides {
    pub patch_size: Option<usize>,
    pub d_model: Option<usize>,
    pub n_heads: Option<usize>,
    pub depth_vision: Option<usize>,
    pub depth_text: Option<usize>,
    pub depth_xmodal: Option<usize>,
    pub mlp_ratio: Option<usize>,
    pub proj_dim: Option<usize>,
    pub temperature: Option<f64>,
    pub dropout: Option<f64>,
    pub mrc_hidden: Option<usize>,
    pub pos_scale: Option<f64>,
}

impl ModelOverrides {
    pub fn apply(&self, mut c: ModelConfig) -> ModelConfig {
        macro_rules! set {
            ($($f:ident),*) => {$(if let Some(v) = self.$f { c.$f = v; })*};
        }
        set!(patch_size, d_model, n_heads, depth_vision, depth_text, depth_xmodal, mlp_ratio, proj_dim, temperature, dropout, mrc_hidden, pos_scale);
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Token budget for evaluation sentences.
    pub max_tokens: usize,
    /// Images in the retrieval score matrix.
    pub retrieval_n: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { max_tokens: 36, retrieval_n: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub relations: usize,
    pub schedule: TrainSchedule,
    pub model: ModelOverrides,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            relations: 8,
            schedule: TrainSchedule::default(),
            model: ModelOverrides::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Model config for a corpus with the given vocabulary, relation count
    /// and image size.
    pub fn model_config(&self, vocab_size: usize, relations: usize, image_size: usize) -> Result<ModelConfig> {
        let mut base = ModelConfig::toy(vocab_size, relations);
        base.image_size = image_size;
        base.max_text_len = self.schedule.max_tokens_vsg.max(self.eval.max_tokens);
        let c = self.model.apply(base);
        c.validate()?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn partial_tables_keep_other_defaults() {
        let c = RunConfig::from_toml(
            "[schedule]\nsteps = 10\nwarmup_steps = 2\n[schedule.ablation]\nvsg = true\n[model]\nd_model = 16\n",
        )
        .unwrap();
        assert_eq!(c.schedule.steps, 10);
        assert!(c.schedule.ablation.vsg && !c.schedule.ablation.mrc);
        assert_eq!(c.schedule.batch_sizes.captions, 16);
        assert_eq!(c.model.d_model, Some(16));
        assert_eq!(c.model_config(30, 8, 64).unwrap().d_model, 16);
    }

    #[test]
    fn round_trips_and_rejects_unknown_keys() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert!(RunConfig::from_toml("stepz = 3").is_err());
        assert!(RunConfig::from_toml("[model]\nwidth = 3").is_err());
    }
}
