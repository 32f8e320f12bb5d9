//! Multi-task pretraining: per-step task sampling, single-task batches and
//! AdamW updates.

use alloc::format;
use alloc::vec::Vec;

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::model::{derive_rng, Forward, ImageInput, ModelState};
use crate::objectives::{
    loss_a, loss_bbox, loss_mrc, loss_vma, BoxItem, EntityItem, LossBreakdown, MrcItem, ObjectiveConfig,
    PairBatch, TextItem,
};
use crate::optim::{clip_global_norm, learning_rate, AdamW, LrSchedule};
use crate::scalar::Scalar;
use crate::scene::{ImageRecord, RelationVocab};
use crate::tokenizer::Tokenizer;
use crate::verbalise::verbalise_graph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Captions,
    Entities,
    Mrc,
    Vsg,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Captions, Task::Entities, Task::Mrc, Task::Vsg];

    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Captions => "captions",
            Task::Entities => "entities",
            Task::Mrc => "mrc",
            Task::Vsg => "vsg",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskMap<T> {
    pub captions: T,
    pub entities: T,
    pub mrc: T,
    pub vsg: T,
}

impl<T: Copy> TaskMap<T> {
    pub fn get(&self, t: Task) -> T {
        match t {
            Task::Captions => self.captions,
            Task::Entities => self.entities,
            Task::Mrc => self.mrc,
            Task::Vsg => self.vsg,
        }
    }
}

/// Auxiliary objectives switched on for a run. All off is the plain
/// caption-only baseline.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub vsg: bool,
    pub mrc: bool,
    pub vma: bool,
    pub bbox: bool,
}

impl Ablation {
    pub const NONE: Ablation = Ablation { vsg: false, mrc: false, vma: false, bbox: false };
    pub const ALL: Ablation = Ablation { vsg: true, mrc: true, vma: true, bbox: true };

    /// Parses a comma-separated subset of `vsg,mrc,vma,bbox` (empty or
    /// `none` for the baseline).
    pub fn parse(s: &str) -> Result<Self> {
        let mut a = Ablation::NONE;
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty() && *p != "none") {
            match part {
                "vsg" => a.vsg = true,
                "mrc" => a.mrc = true,
                "vma" => a.vma = true,
                "bbox" => a.bbox = true,
                "all" => a = Ablation::ALL,
                other => return Err(Error::Config(format!("unknown objective '{other}'"))),
            }
        }
        Ok(a)
    }

    pub fn enables(&self, t: Task) -> bool {
        match t {
            Task::Captions => true,
            Task::Entities => self.vma || self.bbox,
            Task::Mrc => self.mrc,
            Task::Vsg => self.vsg,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerImageCounts {
    pub entities_per_image: usize,
    pub mrc_relations_per_image: usize,
    pub vsg_relations_per_image: usize,
}

impl Default for PerImageCounts {
    fn default() -> Self {
        Self {
            entities_per_image: 4,
            mrc_relations_per_image: 2,
            vsg_relations_per_image: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    pub steps: usize,
    pub warmup_steps: usize,
    pub peak_lr: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub lr_schedule: LrSchedule,
    /// Global gradient-norm cap; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Images per batch for each task.
    pub batch_sizes: TaskMap<usize>,
    pub sampling_ratios: TaskMap<f64>,
    pub per_image: PerImageCounts,
    pub ablation: Ablation,
    pub max_tokens_caption: usize,
    pub max_tokens_vsg: usize,
    pub objective: ObjectiveConfig,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainSchedule {
    /// Desk-scale defaults. Optimizer shape, decay, ratios and per-image
    /// counts follow the paper's recipe; steps, warmup and learning rate are
    /// scaled for a tiny model.
    fn default() -> Self {
        Self {
            steps: 2000,
            warmup_steps: 100,
            peak_lr: 1e-3,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            weight_decay: 0.02,
            lr_schedule: LrSchedule::Constant,
            grad_clip: Some(1.0),
            batch_sizes: TaskMap { captions: 16, entities: 8, mrc: 8, vsg: 16 },
            sampling_ratios: TaskMap { captions: 2.0, entities: 1.5, mrc: 1.0, vsg: 1.0 },
            per_image: PerImageCounts::default(),
            ablation: Ablation::NONE,
            max_tokens_caption: 36,
            max_tokens_vsg: 112,
            objective: ObjectiveConfig::default(),
            checkpoint_every: 500,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    /// Sampling weights with disabled tasks zeroed.
    pub fn effective_ratios(&self) -> [f64; 4] {
        Task::ALL.map(|t| if self.ablation.enables(t) { self.sampling_ratios.get(t) } else { 0.0 })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.warmup_steps > self.steps {
            return bad("warmup_steps exceeds steps");
        }
        if !(self.peak_lr > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("learning rate must be positive and weight decay non-negative");
        }
        let (b1, b2) = self.adam_betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return bad("adam betas must be in [0, 1)");
        }
        for t in Task::ALL {
            let r = self.sampling_ratios.get(t);
            if !(r >= 0.0 && r.is_finite()) {
                return bad("sampling ratios must be finite and non-negative");
            }
            if self.ablation.enables(t) && r == 0.0 {
                return Err(Error::Config(format!("enabled task {} has ratio 0", t.as_str())));
            }
            if self.ablation.enables(t) && self.batch_sizes.get(t) == 0 {
                return Err(Error::Config(format!("enabled task {} has batch size 0", t.as_str())));
            }
        }
        if self.batch_sizes.captions < 2 || (self.ablation.vsg && self.batch_sizes.vsg < 2) {
            return bad("caption and VSG batches need at least 2 images");
        }
        if !(self.objective.mask_ratio > 0.0 && self.objective.mask_ratio < 1.0) {
            return bad("mask_ratio must be in (0, 1)");
        }
        if self.per_image.entities_per_image == 0
            || self.per_image.mrc_relations_per_image == 0
            || self.per_image.vsg_relations_per_image == 0
        {
            return bad("per-image counts must be ≥ 1");
        }
        if self.max_tokens_vsg < self.max_tokens_caption {
            return bad("max_tokens_vsg must be ≥ max_tokens_caption");
        }
        Ok(())
    }
}

/// Samples a task with probability `ratio / Σ ratios`.
pub fn next_task<R: Rng + ?Sized>(ratios: &[f64; 4], rng: &mut R) -> Result<Task> {
    let dist = WeightedIndex::new(ratios).map_err(|_| Error::Config("all task ratios are zero".into()))?;
    Ok(Task::ALL[dist.sample(rng)])
}

/// Record indices eligible for each task.
#[derive(Debug, Clone)]
pub struct Eligible {
    by_task: [Vec<usize>; 4],
}

impl Eligible {
    pub fn new(records: &[ImageRecord]) -> Self {
        let pick = |f: &dyn Fn(&ImageRecord) -> bool| {
            records.iter().enumerate().filter(|(_, r)| f(r)).map(|(i, _)| i).collect()
        };
        Self {
            by_task: [
                pick(&|r| !r.captions.is_empty()),
                pick(&|r| !r.entities.is_empty()),
                pick(&|r| !r.triplets.is_empty()),
                pick(&|r| !r.triplets.is_empty()),
            ],
        }
    }

    pub fn get(&self, t: Task) -> &[usize] {
        &self.by_task[t as usize]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Corpus<'a> {
    pub records: &'a [ImageRecord],
    pub tokenizer: &'a Tokenizer,
    pub vocab: &'a RelationVocab,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntityExample {
    pub record: usize,
    pub entity: usize,
    pub text: TextItem,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationExample {
    pub record: usize,
    pub triplet: usize,
    pub subject_text: Vec<u32>,
    pub object_text: Vec<u32>,
    pub target: usize,
}

/// Single-task batch of record indices and tokenized text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Batch {
    /// Captions and verbalised scene graphs share this shape.
    Pairs { task: Task, items: Vec<(usize, TextItem)> },
    Entities(Vec<EntityExample>),
    Relations(Vec<RelationExample>),
}

impl Batch {
    pub fn task(&self) -> Task {
        match self {
            Batch::Pairs { task, .. } => *task,
            Batch::Entities(_) => Task::Entities,
            Batch::Relations(_) => Task::Mrc,
        }
    }
}

fn masked_text<R: Rng + ?Sized>(tok: &Tokenizer, ids: Vec<u32>, ratio: f64, rng: &mut R) -> Result<TextItem> {
    let (masked, targets) = tok.mask_for_mlm(&ids, ratio, rng)?;
    Ok(TextItem { ids, masked, targets })
}

fn sample_k<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Vec<usize> {
    rand::seq::index::sample(rng, n, k.min(n)).into_vec()
}

/// Builds one batch for `task`: records drawn uniformly without replacement
/// from those carrying the needed annotation.
pub fn make_batch<R: Rng + ?Sized>(
    task: Task,
    corpus: &Corpus<'_>,
    eligible: &Eligible,
    schedule: &TrainSchedule,
    rng: &mut R,
) -> Result<Batch> {
    let pool = eligible.get(task);
    let min = if matches!(task, Task::Captions | Task::Vsg) { 2 } else { 1 };
    if pool.len() < min {
        return Err(Error::Empty("no eligible records for task"));
    }
    let picks: Vec<usize> = sample_k(pool.len(), schedule.batch_sizes.get(task), rng)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    let tok = corpus.tokenizer;
    let ratio = schedule.objective.mask_ratio;
    match task {
        Task::Captions => {
            let mut items = Vec::with_capacity(picks.len());
            for r in picks {
                let cap = corpus.records[r].captions.choose(rng).expect("eligible");
                let ids = tok.encode_sentence(cap, schedule.max_tokens_caption);
                items.push((r, masked_text(tok, ids, ratio, rng)?));
            }
            Ok(Batch::Pairs { task, items })
        }
        Task::Vsg => {
            let mut items = Vec::with_capacity(picks.len());
            for r in picks {
                let rec = &corpus.records[r];
                let v = verbalise_graph(
                    &rec.triplets,
                    &rec.entities,
                    tok,
                    schedule.per_image.vsg_relations_per_image,
                    schedule.max_tokens_vsg,
                    rng,
                )?;
                let ids = tok.encode_sentence(&v.text, schedule.max_tokens_vsg);
                items.push((r, masked_text(tok, ids, ratio, rng)?));
            }
            Ok(Batch::Pairs { task, items })
        }
        Task::Entities => {
            let mut items = Vec::new();
            for r in picks {
                let rec = &corpus.records[r];
                for e in sample_k(rec.entities.len(), schedule.per_image.entities_per_image, rng) {
                    let ids = tok.encode_sentence(&rec.entities[e].label, schedule.max_tokens_caption);
                    items.push(EntityExample { record: r, entity: e, text: masked_text(tok, ids, ratio, rng)? });
                }
            }
            Ok(Batch::Entities(items))
        }
        Task::Mrc => {
            let mut items = Vec::new();
            for r in picks {
                let rec = &corpus.records[r];
                for t in sample_k(rec.triplets.len(), schedule.per_image.mrc_relations_per_image, rng) {
                    let tr = &rec.triplets[t];
                    items.push(RelationExample {
                        record: r,
                        triplet: t,
                        subject_text: tok.encode_sentence(&rec.entities[tr.subject].label, schedule.max_tokens_caption),
                        object_text: tok.encode_sentence(&rec.entities[tr.object].label, schedule.max_tokens_caption),
                        target: corpus.vocab.index_of(&tr.relation),
                    });
                }
            }
            Ok(Batch::Relations(items))
        }
    }
}

/// Builds the loss graph for one batch. The returned scalar node is the
/// weighted total; the breakdown carries the individual values.
pub fn batch_loss<'s, T: Scalar, R: Rng + ?Sized>(
    state: &'s ModelState<T>,
    corpus: &Corpus<'_>,
    batch: &Batch,
    schedule: &TrainSchedule,
    dropout: Option<ChaCha8Rng>,
    rng: &mut R,
) -> Result<(Graph<T>, Var, LossBreakdown)> {
    let mut f = Forward::new(state, dropout);
    let cfg = &schedule.objective;
    let w = &cfg.weights;
    let recs = corpus.records;
    let mut out = LossBreakdown::default();
    let total = match batch {
        Batch::Pairs { items, .. } => {
            let pb = PairBatch {
                images: items
                    .iter()
                    .map(|(r, _)| ImageInput { pixels: &recs[*r].pixels, mask: None })
                    .collect(),
                texts: items.iter().map(|(_, t)| t.clone()).collect(),
            };
            let terms = loss_a(&mut f, &pb, cfg, rng)?;
            out.cl = f.g.scalar(terms.cl).f64();
            out.mlm = f.g.scalar(terms.mlm).f64();
            out.itm = terms.itm.map_or(0.0, |v| f.g.scalar(v).f64());
            out.counts.cl = terms.n_pairs;
            out.counts.itm = terms.n_itm;
            out.counts.mlm = terms.n_mlm;
            terms.combine(&mut f.g, w)
        }
        Batch::Entities(items) => {
            let mut parts = Vec::new();
            if schedule.ablation.vma {
                let ei: Vec<EntityItem<'_>> = items
                    .iter()
                    .map(|e| EntityItem {
                        pixels: &recs[e.record].pixels,
                        entity: &recs[e.record].entities[e.entity],
                        text: e.text.clone(),
                    })
                    .collect();
                if ei.len() >= 2 {
                    let terms = loss_vma(&mut f, &ei, cfg, rng)?;
                    let v = terms.combine(&mut f.g, w);
                    out.vma = f.g.scalar(v).f64();
                    out.counts.vma = terms.n_pairs;
                    parts.push((v, T::of(w.vma)));
                }
            }
            if schedule.ablation.bbox {
                let bi: Vec<BoxItem<'_>> = items
                    .iter()
                    .map(|e| {
                        let rec = &recs[e.record];
                        BoxItem {
                            pixels: &rec.pixels,
                            text: e.text.ids.clone(),
                            target: rec.entities[e.entity].normalized_cxcywh(rec.width, rec.height),
                        }
                    })
                    .collect();
                let v = loss_bbox(&mut f, &bi, cfg.giou)?;
                out.bbox = f.g.scalar(v).f64();
                out.counts.bbox = bi.len();
                parts.push((v, T::of(w.bbox)));
            }
            if parts.is_empty() {
                return Err(Error::Config("entities batch with VMA and BBOX both off".into()));
            }
            f.g.weighted_sum(parts)
        }
        Batch::Relations(items) => {
            let mi: Vec<MrcItem<'_>> = items
                .iter()
                .map(|m| {
                    let rec = &recs[m.record];
                    let t = &rec.triplets[m.triplet];
                    MrcItem {
                        pixels: &rec.pixels,
                        subject: &rec.entities[t.subject],
                        object: &rec.entities[t.object],
                        subject_text: m.subject_text.clone(),
                        object_text: m.object_text.clone(),
                        target: m.target,
                    }
                })
                .collect();
            let v = loss_mrc(&mut f, &mi)?;
            out.mrc = f.g.scalar(v).f64();
            out.counts.mrc = mi.len();
            f.g.weighted_sum(alloc::vec![(v, T::of(w.mrc))])
        }
    };
    out.total = f.g.scalar(total).f64();
    Ok((f.g, total, out))
}

/// One logged optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub task: Task,
    pub lr: f64,
    pub grad_norm: f64,
    pub losses: LossBreakdown,
}

/// Owns the weights and optimizer for one run.
pub struct Trainer<'a> {
    pub state: ModelState<f32>,
    pub schedule: TrainSchedule,
    corpus: Corpus<'a>,
    eligible: Eligible,
    opt: AdamW,
    rng: ChaCha8Rng,
    step: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(state: ModelState<f32>, schedule: TrainSchedule, corpus: Corpus<'a>) -> Result<Self> {
        schedule.validate()?;
        let c = &state.config;
        if c.vocab_size != corpus.tokenizer.vocab_size() {
            return Err(Error::Config(format!(
                "model vocabulary {} differs from tokenizer {}",
                c.vocab_size,
                corpus.tokenizer.vocab_size()
            )));
        }
        if c.relations != corpus.vocab.len() {
            return Err(Error::Config(format!(
                "model has {} relation classes, vocabulary {}",
                c.relations,
                corpus.vocab.len()
            )));
        }
        if let Some(r) = corpus
            .records
            .iter()
            .find(|r| r.width as usize != c.image_size || r.height as usize != c.image_size)
        {
            return Err(Error::Config(format!(
                "record {} is {}×{}, model expects {}",
                r.id, r.width, r.height, c.image_size
            )));
        }
        if schedule.max_tokens_vsg > c.max_text_len {
            return Err(Error::Config("max_tokens_vsg exceeds model max_text_len".into()));
        }
        let opt = AdamW::new(&state.params, schedule.adam_betas, schedule.adam_eps, schedule.weight_decay);
        let rng = derive_rng(schedule.seed, 1 << 40);
        Ok(Self {
            eligible: Eligible::new(corpus.records),
            state,
            corpus,
            opt,
            rng,
            step: 0,
            schedule,
        })
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.schedule.steps
    }

    /// Samples a task and batch and applies one update.
    pub fn step(&mut self) -> Result<StepRecord> {
        let ratios = self.schedule.effective_ratios();
        let task = next_task(&ratios, &mut self.rng)?;
        let batch = make_batch(task, &self.corpus, &self.eligible, &self.schedule, &mut self.rng)?;
        self.train_step(&batch)
    }

    /// Forward, backward and update on a prepared batch.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepRecord> {
        if self.is_done() {
            return Err(Error::Config("schedule already complete".into()));
        }
        let s = &self.schedule;
        let lr = learning_rate(self.step, s.warmup_steps, s.steps, s.peak_lr, s.lr_schedule);
        let dropout = derive_rng(s.seed, self.step as u64);
        let (g, total, losses) = batch_loss(&self.state, &self.corpus, batch, s, Some(dropout), &mut self.rng)?;
        if !losses.is_finite() {
            return Err(Error::NonFinite { step: self.step, detail: format!("{losses:?}") });
        }
        let mut grads: Gradients<f32> = g.backward(total);
        drop(g);
        let grad_norm = match s.grad_clip {
            Some(c) => clip_global_norm(&mut grads, c),
            None => clip_global_norm(&mut grads, f64::INFINITY),
        };
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite { step: self.step, detail: "gradient norm".into() });
        }
        self.opt.step(&mut self.state.params, &grads, lr);
        let rec = StepRecord { step: self.step, task: batch.task(), lr, grad_norm, losses };
        self.step += 1;
        Ok(rec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::build_relation_vocab;
    use crate::synth::{generate, SynthConfig};
    use alloc::string::String;
    use rand::SeedableRng;

    #[test]
    fn degenerate_ratios() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(next_task(&[1.0, 0.0, 0.0, 0.0], &mut rng).unwrap(), Task::Captions);
        }
        assert!(next_task(&[0.0; 4], &mut rng).is_err());
    }

    #[test]
    fn ablation_parsing_and_ratios() {
        assert_eq!(Ablation::parse("").unwrap(), Ablation::NONE);
        let a = Ablation::parse("vsg, mrc").unwrap();
        assert!(a.vsg && a.mrc && !a.vma && !a.bbox);
        assert!(Ablation::parse("foo").is_err());
        let s = TrainSchedule { ablation: a, ..Default::default() };
        assert_eq!(s.effective_ratios(), [2.0, 0.0, 1.0, 1.0]);
        s.validate().unwrap();
        let bad = TrainSchedule { warmup_steps: 3000, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn batches_follow_per_image_counts() {
        let c = generate(30, 2, &SynthConfig::default());
        let texts: Vec<String> = c.records.iter().flat_map(|r| r.captions.clone()).collect();
        let tok = Tokenizer::build(texts.iter().map(String::as_str).chain(crate::synth::RELATIONS));
        let vocab = build_relation_vocab(&c.records, 8).unwrap();
        let corpus = Corpus { records: &c.records, tokenizer: &tok, vocab: &vocab };
        let el = Eligible::new(&c.records);
        let s = TrainSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        match make_batch(Task::Entities, &corpus, &el, &s, &mut rng).unwrap() {
            Batch::Entities(items) => {
                let mut per = alloc::collections::BTreeMap::new();
                for e in &items {
                    *per.entry(e.record).or_insert(0usize) += 1;
                }
                for (r, n) in per {
                    assert_eq!(n, c.records[r].entities.len().min(4));
                }
            }
            _ => unreachable!(),
        }
        match make_batch(Task::Mrc, &corpus, &el, &s, &mut rng).unwrap() {
            Batch::Relations(items) => assert!(items.len() <= 16 && !items.is_empty()),
            _ => unreachable!(),
        }
        match make_batch(Task::Vsg, &corpus, &el, &s, &mut rng).unwrap() {
            Batch::Pairs { items, .. } => {
                for (r, t) in items {
                    let n_sep = t.ids.iter().filter(|&&i| i == crate::tokenizer::SEP).count();
                    assert_eq!(n_sep, c.records[r].triplets.len().min(16));
                }
            }
            _ => unreachable!(),
        }
    }
}
