//! End-to-end glue: corpus preparation, training runs and evaluation suites.

use std::collections::{BTreeMap, HashMap};

use rgvp_core::error::{Error, Result};
use rgvp_core::eval::{auc, itm_scores, mrc_probe, ranking_accuracy, retrieval_recall, vsr_accuracy};
use rgvp_core::model::{ModelConfig, ModelState};
use rgvp_core::objectives::MrcItem;
use rgvp_core::scene::{build_relation_vocab, ImageRecord, RelationVocab};
use rgvp_core::synth::{FoilPair, FoilType, Split, SynthCorpus, VsrItem, RELATIONS};
use rgvp_core::tokenizer::Tokenizer;
use rgvp_core::trainer::{Corpus, StepRecord, TrainSchedule, Trainer};

/// Records partitioned by split plus the shared vocabularies.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Vec<ImageRecord>,
    pub dev: Vec<ImageRecord>,
    pub test: Vec<ImageRecord>,
    pub tokenizer: Tokenizer,
    pub vocab: RelationVocab,
    pub foils: Vec<FoilPair>,
    pub vsr: Vec<VsrItem>,
}

/// Vocabulary over every caption, entity label and relation string, plus
/// the caption determiner.
pub fn build_tokenizer(records: &[ImageRecord]) -> Tokenizer {
    let mut texts: Vec<&str> = vec!["the"];
    texts.extend(RELATIONS);
    for r in records {
        texts.extend(r.captions.iter().map(String::as_str));
        texts.extend(r.entities.iter().map(|e| e.label.as_str()));
        texts.extend(r.triplets.iter().map(|t| t.relation.as_str()));
    }
    Tokenizer::build(texts)
}

impl Prepared {
    /// Vocabularies are built from the training split only.
    pub fn new(
        records: Vec<ImageRecord>,
        splits: &[Split],
        foils: Vec<FoilPair>,
        vsr: Vec<VsrItem>,
        relations: usize,
    ) -> Result<Self> {
        if records.len() != splits.len() {
            return Err(Error::LengthMismatch(records.len(), splits.len()));
        }
        let (mut train, mut dev, mut test) = (Vec::new(), Vec::new(), Vec::new());
        for (r, s) in records.into_iter().zip(splits) {
            match s {
                Split::Train => train.push(r),
                Split::Dev => dev.push(r),
                Split::Test => test.push(r),
            }
        }
        let tokenizer = build_tokenizer(&train);
        let vocab = build_relation_vocab(&train, relations)?;
        Ok(Self { train, dev, test, tokenizer, vocab, foils, vsr })
    }

    pub fn from_synth(c: SynthCorpus, relations: usize) -> Result<Self> {
        Self::new(c.records, &c.splits, c.foils, c.vsr, relations)
    }

    pub fn records(&self, split: Split) -> &[ImageRecord] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    pub fn corpus(&self) -> Corpus<'_> {
        Corpus { records: &self.train, tokenizer: &self.tokenizer, vocab: &self.vocab }
    }

    /// Toy model sized to this corpus.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::toy(self.tokenizer.vocab_size(), self.vocab.len())
    }
}

/// Trains a fresh model for `schedule.steps` steps, calling `on_step` after
/// every update.
pub fn train<E, F>(
    prepared: &Prepared,
    config: ModelConfig,
    schedule: TrainSchedule,
    mut on_step: F,
) -> std::result::Result<ModelState<f32>, E>
where
    E: From<Error>,
    F: FnMut(&StepRecord, &ModelState<f32>) -> std::result::Result<(), E>,
{
    let state = ModelState::init(config, schedule.seed)?;
    let mut trainer = Trainer::new(state, schedule, prepared.corpus())?;
    while !trainer.is_done() {
        let rec = trainer.step()?;
        on_step(&rec, &trainer.state)?;
    }
    Ok(trainer.state)
}

/// Which evaluation families to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalTask {
    Foils,
    Vsr,
    Retrieval,
    Mrc,
}

impl EvalTask {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "foils" => Ok(Self::Foils),
            "vsr" => Ok(Self::Vsr),
            "retrieval" => Ok(Self::Retrieval),
            "mrc" => Ok(Self::Mrc),
            other => Err(Error::Config(format!("unknown eval task '{other}'"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Foils => "foils",
            Self::Vsr => "vsr",
            Self::Retrieval => "retrieval",
            Self::Mrc => "mrc",
        }
    }
}

/// Evaluation inputs for one split.
pub struct EvalSet<'a> {
    pub records: &'a [ImageRecord],
    pub foils: Vec<&'a FoilPair>,
    pub vsr: Vec<&'a VsrItem>,
    pub tokenizer: &'a Tokenizer,
    pub vocab: &'a RelationVocab,
    pub max_tokens: usize,
    /// Images used for the `n × n` retrieval matrix.
    pub retrieval_n: usize,
}

impl<'a> EvalSet<'a> {
    pub fn for_split(p: &'a Prepared, split: Split, max_tokens: usize, retrieval_n: usize) -> Self {
        let records = p.records(split);
        let ids: std::collections::HashSet<&str> = records.iter().map(|r| r.id.as_str()).collect();
        Self {
            records,
            foils: p.foils.iter().filter(|f| ids.contains(f.image_id.as_str())).collect(),
            vsr: p.vsr.iter().filter(|v| ids.contains(v.image_id.as_str())).collect(),
            tokenizer: &p.tokenizer,
            vocab: &p.vocab,
            max_tokens,
            retrieval_n,
        }
    }

    fn image_index(&self) -> HashMap<&str, usize> {
        self.records.iter().enumerate().map(|(i, r)| (r.id.as_str(), i)).collect()
    }

    fn pixels(&self) -> Vec<&[f32]> {
        self.records.iter().map(|r| r.pixels.as_slice()).collect()
    }

    fn image_of(&self, index: &HashMap<&str, usize>, id: &str) -> Result<usize> {
        index
            .get(id)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown image id '{id}'")))
    }

    /// Scores `(image id, sentence)` pairs with the ITM head.
    pub fn score<T: rgvp_core::scalar::Scalar>(
        &self,
        state: &ModelState<T>,
        items: &[(&str, &str)],
    ) -> Result<Vec<f64>> {
        let index = self.image_index();
        let texts: Vec<Vec<u32>> = items
            .iter()
            .map(|(_, s)| self.tokenizer.encode_sentence(s, self.max_tokens))
            .collect();
        let text_refs: Vec<&[u32]> = texts.iter().map(Vec::as_slice).collect();
        let pairs = items
            .iter()
            .enumerate()
            .map(|(k, (id, _))| Ok((k, self.image_of(&index, id)?)))
            .collect::<Result<Vec<_>>>()?;
        itm_scores(state, &self.pixels(), &text_refs, &pairs)
    }

    pub fn foil_metrics<T: rgvp_core::scalar::Scalar>(&self, state: &ModelState<T>) -> Result<BTreeMap<String, f64>> {
        let mut out = BTreeMap::new();
        for ft in [FoilType::RelationSwap, FoilType::EntitySwap] {
            let fs: Vec<&&FoilPair> = self.foils.iter().filter(|f| f.foil_type == ft).collect();
            if fs.is_empty() {
                continue;
            }
            let mut items = Vec::with_capacity(2 * fs.len());
            for f in &fs {
                items.push((f.image_id.as_str(), f.positive.as_str()));
                items.push((f.image_id.as_str(), f.foil.as_str()));
            }
            let s = self.score(state, &items)?;
            let (pos, neg): (Vec<f64>, Vec<f64>) = s.chunks(2).map(|c| (c[0], c[1])).unzip();
            out.insert(format!("foil_{}", ft.as_str()), ranking_accuracy(&pos, &neg)?);
        }
        if out.is_empty() {
            return Err(Error::Empty("no foils for this split"));
        }
        Ok(out)
    }

    pub fn vsr_metrics<T: rgvp_core::scalar::Scalar>(&self, state: &ModelState<T>) -> Result<BTreeMap<String, f64>> {
        self.vsr_metrics_at(state, 0.5)
    }

    /// VSR accuracy at `threshold` plus the threshold-free AUC.
    pub fn vsr_metrics_at<T: rgvp_core::scalar::Scalar>(
        &self,
        state: &ModelState<T>,
        threshold: f64,
    ) -> Result<BTreeMap<String, f64>> {
        let items: Vec<(&str, &str)> = self.vsr.iter().map(|v| (v.image_id.as_str(), v.sentence.as_str())).collect();
        let labels: Vec<bool> = self.vsr.iter().map(|v| v.label).collect();
        let s = self.score(state, &items)?;
        let mut out = BTreeMap::new();
        out.insert("vsr_acc".to_string(), vsr_accuracy(&s, &labels, threshold)?);
        if let Some(a) = auc(&s, &labels) {
            out.insert("vsr_auc".to_string(), a);
        }
        Ok(out)
    }

    pub fn retrieval_metrics<T: rgvp_core::scalar::Scalar>(
        &self,
        state: &ModelState<T>,
    ) -> Result<BTreeMap<String, f64>> {
        let recs: Vec<&ImageRecord> = self
            .records
            .iter()
            .filter(|r| !r.captions.is_empty())
            .take(self.retrieval_n)
            .collect();
        let n = recs.len();
        if n == 0 {
            return Err(Error::Empty("no captioned images for retrieval"));
        }
        let texts: Vec<Vec<u32>> = recs
            .iter()
            .map(|r| self.tokenizer.encode_sentence(&r.captions[0], self.max_tokens))
            .collect();
        let text_refs: Vec<&[u32]> = texts.iter().map(Vec::as_slice).collect();
        let pixels: Vec<&[f32]> = recs.iter().map(|r| r.pixels.as_slice()).collect();
        let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..n).map(move |j| (j, i))).collect();
        let s = itm_scores(state, &pixels, &text_refs, &pairs)?;
        let r = retrieval_recall(&s, n, &[1, 5])?;
        let mut out = BTreeMap::new();
        for (k, v) in r.text {
            out.insert(format!("tr{k}"), v);
        }
        for (k, v) in r.image {
            out.insert(format!("ir{k}"), v);
        }
        Ok(out)
    }

    pub fn mrc_metrics<T: rgvp_core::scalar::Scalar>(&self, state: &ModelState<T>) -> Result<BTreeMap<String, f64>> {
        let mut items = Vec::new();
        for r in self.records {
            for t in &r.triplets {
                let s = &r.entities[t.subject];
                let o = &r.entities[t.object];
                items.push(MrcItem {
                    pixels: &r.pixels,
                    subject: s,
                    object: o,
                    subject_text: self.tokenizer.encode_sentence(&s.label, self.max_tokens),
                    object_text: self.tokenizer.encode_sentence(&o.label, self.max_tokens),
                    target: self.vocab.index_of(&t.relation),
                });
            }
        }
        let mut out = BTreeMap::new();
        out.insert("mrc_probe".to_string(), mrc_probe(state, &items)?);
        Ok(out)
    }

    pub fn run<T: rgvp_core::scalar::Scalar>(
        &self,
        state: &ModelState<T>,
        tasks: &[EvalTask],
    ) -> Result<BTreeMap<String, f64>> {
        let mut out = BTreeMap::new();
        for t in tasks {
            out.extend(match t {
                EvalTask::Foils => self.foil_metrics(state)?,
                EvalTask::Vsr => self.vsr_metrics(state)?,
                EvalTask::Retrieval => self.retrieval_metrics(state)?,
                EvalTask::Mrc => self.mrc_metrics(state)?,
            });
        }
        Ok(out)
    }
}
