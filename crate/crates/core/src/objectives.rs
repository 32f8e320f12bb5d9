//! Training losses on top of [`Forward`]: the contrastive / matching / masked
//! language modelling triple, its visually-masked variant, masked relation
//! classification and box regression.

use alloc::vec;
use alloc::vec::Vec;

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{box_loss_and_grad, Graph, Var};
use crate::model::{Forward, ImageInput, Side};
use crate::patchmask::{patches_for_bbox, PatchMask};
use crate::scalar::Scalar;
use crate::scene::EntityBox;

/// ITM logit column of the "match" class.
pub const ITM_MATCH: usize = 0;
pub const ITM_NO_MATCH: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub cl: f64,
    pub itm: f64,
    pub mlm: f64,
    pub vma: f64,
    pub mrc: f64,
    pub bbox: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cl: 1.0,
            itm: 1.0,
            mlm: 1.0,
            vma: 1.0,
            mrc: 1.0,
            bbox: 1.0,
        }
    }
}

/// How the hard negative for each ITM positive is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSampling {
    /// In proportion to the softmax of contrastive similarity.
    Similarity,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveConfig {
    pub weights: LossWeights,
    pub mask_ratio: f64,
    /// Add `1 − GIoU` to the smooth-L1 box loss.
    pub giou: bool,
    pub negatives: NegativeSampling,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            mask_ratio: 0.25,
            giou: true,
            negatives: NegativeSampling::Similarity,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossCounts {
    pub cl: usize,
    pub itm: usize,
    pub mlm: usize,
    pub vma: usize,
    pub mrc: usize,
    pub bbox: usize,
}

/// Per-loss scalars of one step. Components a task does not use are zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cl: f64,
    pub itm: f64,
    pub mlm: f64,
    pub vma: f64,
    pub mrc: f64,
    pub bbox: f64,
    pub total: f64,
    pub counts: LossCounts,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.cl, self.itm, self.mlm, self.vma, self.mrc, self.bbox, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// A text with its MLM-masked copy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextItem {
    pub ids: Vec<u32>,
    pub masked: Vec<u32>,
    /// `(position, original id)` for every masked position.
    pub targets: Vec<(usize, u32)>,
}

/// Aligned image/text pairs: row `i` of each side is a positive.
#[derive(Debug, Clone)]
pub struct PairBatch<'a> {
    pub images: Vec<ImageInput<'a>>,
    pub texts: Vec<TextItem>,
}

/// Graph nodes of the three ALBEF terms. `itm` is `None` when no valid
/// negative exists in the batch (every text identical).
#[derive(Debug, Clone, Copy)]
pub struct AlbefTerms {
    pub cl: Var,
    pub itm: Option<Var>,
    pub mlm: Var,
    pub n_pairs: usize,
    pub n_itm: usize,
    pub n_mlm: usize,
}

impl AlbefTerms {
    /// Weighted sum of the present terms.
    pub fn combine<T: Scalar>(&self, g: &mut Graph<T>, w: &LossWeights) -> Var {
        let mut terms = vec![(self.cl, T::of(w.cl)), (self.mlm, T::of(w.mlm))];
        if let Some(itm) = self.itm {
            terms.push((itm, T::of(w.itm)));
        }
        g.weighted_sum(terms)
    }
}

/// Symmetric InfoNCE over unit-norm embeddings: the mean of the image→text and
/// text→image cross-entropies of `similarity / τ`.
pub fn loss_cl<T: Scalar>(g: &mut Graph<T>, image: Var, text: Var, tau: f64) -> Result<Var> {
    let (n, d) = g.shape(image);
    if g.shape(text) != (n, d) {
        return Err(Error::Shape("image and text embeddings differ in shape".into()));
    }
    if n < 2 {
        return Err(Error::Config("contrastive loss needs at least 2 pairs".into()));
    }
    let inv_tau = T::of(1.0 / tau);
    let s = g.matmul_t(image, text);
    let s = g.scale(s, inv_tau);
    let st = g.matmul_t(text, image);
    let st = g.scale(st, inv_tau);
    let targets: Vec<usize> = (0..n).collect();
    let i2t = g.cross_entropy(s, &targets);
    let t2i = g.cross_entropy(st, &targets);
    Ok(g.weighted_sum(vec![(i2t, T::of(0.5)), (t2i, T::of(0.5))]))
}

/// Mean cross-entropy of ITM logits against match labels. Errors unless
/// both classes are present.
pub fn loss_itm<T: Scalar>(g: &mut Graph<T>, logits: Var, is_match: &[bool]) -> Result<Var> {
    if is_match.is_empty() || is_match.iter().all(|&m| m) || is_match.iter().all(|&m| !m) {
        return Err(Error::Config("ITM batch needs both matching and non-matching pairs".into()));
    }
    let targets: Vec<usize> = is_match
        .iter()
        .map(|&m| if m { ITM_MATCH } else { ITM_NO_MATCH })
        .collect();
    Ok(g.cross_entropy(logits, &targets))
}

/// Mean cross-entropy over masked positions.
pub fn loss_mlm<T: Scalar>(g: &mut Graph<T>, logits: Var, targets: &[usize]) -> Result<Var> {
    if targets.is_empty() {
        return Err(Error::Empty("no masked positions"));
    }
    Ok(g.cross_entropy(logits, targets))
}

/// Draws one index from `candidates` with weights `exp(score − max)`.
fn draw<R: Rng + ?Sized>(
    candidates: &[(usize, f64)],
    mode: NegativeSampling,
    rng: &mut R,
) -> Option<usize> {
    if candidates.is_empty() {
        return None;
    }
    match mode {
        NegativeSampling::Uniform => Some(candidates[rng.random_range(0..candidates.len())].0),
        NegativeSampling::Similarity => {
            let max = candidates
                .iter()
                .map(|c| c.1)
                .fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = candidates.iter().map(|c| num_traits::Float::exp(c.1 - max)).collect();
            let dist = WeightedIndex::new(&w).ok()?;
            Some(candidates[dist.sample(rng)].0)
        }
    }
}

/// Picks, for every image, a negative text and, for every text, a negative
/// image. Pairs whose texts are token-identical are never used as negatives.
/// Returns `(text index, image index)` pairs.
pub fn sample_itm_negatives<R: Rng + ?Sized>(
    sim: &[f64],
    texts: &[&[u32]],
    mode: NegativeSampling,
    rng: &mut R,
) -> Vec<(usize, usize)> {
    let n = texts.len();
    let mut out = Vec::with_capacity(2 * n);
    for i in 0..n {
        let cands: Vec<(usize, f64)> = (0..n)
            .filter(|&j| j != i && texts[j] != texts[i])
            .map(|j| (j, sim[i * n + j]))
            .collect();
        if let Some(j) = draw(&cands, mode, rng) {
            out.push((j, i));
        }
    }
    for j in 0..n {
        let cands: Vec<(usize, f64)> = (0..n)
            .filter(|&i| i != j && texts[i] != texts[j])
            .map(|i| (i, sim[i * n + j]))
            .collect();
        if let Some(i) = draw(&cands, mode, rng) {
            out.push((j, i));
        }
    }
    out
}

/// `L_CL + L_ITM + L_MLM` on a batch of aligned pairs.
pub fn loss_a<T: Scalar, R: Rng + ?Sized>(
    f: &mut Forward<'_, T>,
    batch: &PairBatch<'_>,
    cfg: &ObjectiveConfig,
    rng: &mut R,
) -> Result<AlbefTerms> {
    let n = batch.images.len();
    if n != batch.texts.len() {
        return Err(Error::LengthMismatch(n, batch.texts.len()));
    }
    if n < 2 {
        return Err(Error::Config("ALBEF losses need at least 2 pairs".into()));
    }
    let mut seqs: Vec<&[u32]> = batch.texts.iter().map(|t| t.ids.as_slice()).collect();
    for t in &batch.texts {
        if t.masked.len() != t.ids.len() {
            return Err(Error::LengthMismatch(t.masked.len(), t.ids.len()));
        }
    }
    seqs.extend(batch.texts.iter().map(|t| t.masked.as_slice()));
    let img = f.encode_images(&batch.images)?;
    let txt = f.encode_texts(&seqs)?;

    let img_cls = f.cls(&img);
    let zi = f.contrastive_embed(img_cls, Side::Image)?;
    let txt_cls_rows = (0..n).map(|b| txt.row(b, 0)).collect();
    let txt_cls = f.g.gather_rows(txt.var, txt_cls_rows);
    let zt = f.contrastive_embed(txt_cls, Side::Text)?;
    let tau = f.state.config.temperature;
    let cl = loss_cl(&mut f.g, zi, zt, tau)?;

    let sim: Vec<f64> = {
        let (zi_v, zt_v) = (f.g.value(zi), f.g.value(zt));
        let d = f.g.shape(zi).1;
        let mut s = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let dot: f64 = (0..d).map(|k| zi_v[i * d + k].f64() * zt_v[j * d + k].f64()).sum();
                s[i * n + j] = dot / tau;
            }
        }
        s
    };
    let negatives = sample_itm_negatives(&sim, &seqs[..n], cfg.negatives, rng);

    let mut pairs: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
    pairs.extend(&negatives);
    let n_itm = pairs.len();
    pairs.extend((0..n).map(|i| (n + i, i)));
    let fused = f.fuse(&txt, &img, &pairs)?;

    let itm = if negatives.is_empty() {
        None
    } else {
        let rows = (0..n_itm).map(|p| fused.row(p, 0)).collect();
        let pooled = f.g.gather_rows(fused.var, rows);
        let logits = f.itm_logits(pooled);
        let labels: Vec<bool> = (0..n_itm).map(|p| p < n).collect();
        Some(loss_itm(&mut f.g, logits, &labels)?)
    };

    let mut positions = Vec::new();
    let mut targets = Vec::new();
    for (i, t) in batch.texts.iter().enumerate() {
        for &(p, id) in &t.targets {
            if p >= t.ids.len() {
                return Err(Error::Shape("MLM target beyond sequence".into()));
            }
            positions.push((n_itm + i, p));
            targets.push(id as usize);
        }
    }
    if targets.is_empty() {
        return Err(Error::Empty("no masked positions"));
    }
    let logits = f.mlm_logits(&fused, &positions);
    let mlm = loss_mlm(&mut f.g, logits, &targets)?;
    Ok(AlbefTerms {
        cl,
        itm,
        mlm,
        n_pairs: n,
        n_itm: if itm.is_some() { n_itm } else { 0 },
        n_mlm: targets.len(),
    })
}

/// One entity-text example: the entity's label against its image.
#[derive(Debug, Clone)]
pub struct EntityItem<'a> {
    pub pixels: &'a [f32],
    pub entity: &'a EntityBox,
    pub text: TextItem,
}

/// Patch masks for a list of entities on the model's grid.
pub fn entity_masks<T: Scalar>(f: &Forward<'_, T>, entities: &[&EntityBox]) -> Result<Vec<PatchMask>> {
    let grid = f.state.config.grid();
    entities.iter().map(|e| patches_for_bbox(&grid, e)).collect()
}

/// The ALBEF triple with text = entity label and every vision and
/// cross-modal attention restricted to the entity's patches.
pub fn loss_vma<T: Scalar, R: Rng + ?Sized>(
    f: &mut Forward<'_, T>,
    items: &[EntityItem<'_>],
    cfg: &ObjectiveConfig,
    rng: &mut R,
) -> Result<AlbefTerms> {
    let ents: Vec<&EntityBox> = items.iter().map(|i| i.entity).collect();
    let masks = entity_masks(f, &ents)?;
    let batch = PairBatch {
        images: items
            .iter()
            .zip(&masks)
            .map(|(it, m)| ImageInput {
                pixels: it.pixels,
                mask: Some(m),
            })
            .collect(),
        texts: items.iter().map(|i| i.text.clone()).collect(),
    };
    loss_a(f, &batch, cfg, rng)
}

/// One relation example: subject and object encoded separately, each with
/// its label as text and its own patch mask.
#[derive(Debug, Clone)]
pub struct MrcItem<'a> {
    pub pixels: &'a [f32],
    pub subject: &'a EntityBox,
    pub object: &'a EntityBox,
    pub subject_text: Vec<u32>,
    pub object_text: Vec<u32>,
    /// Relation class (the out-of-vocabulary class is `V`).
    pub target: usize,
}

/// MRC logits (`n × (V + 1)`) for a batch of relation examples.
pub fn mrc_logits<T: Scalar>(f: &mut Forward<'_, T>, items: &[MrcItem<'_>]) -> Result<Var> {
    if items.is_empty() {
        return Err(Error::Empty("MRC batch"));
    }
    let n = items.len();
    let ents: Vec<&EntityBox> = items
        .iter()
        .map(|i| i.subject)
        .chain(items.iter().map(|i| i.object))
        .collect();
    let masks = entity_masks(f, &ents)?;
    let images: Vec<ImageInput<'_>> = ents
        .iter()
        .enumerate()
        .map(|(k, _)| ImageInput {
            pixels: items[k % n].pixels,
            mask: Some(&masks[k]),
        })
        .collect();
    let texts: Vec<&[u32]> = items
        .iter()
        .map(|i| i.subject_text.as_slice())
        .chain(items.iter().map(|i| i.object_text.as_slice()))
        .collect();
    let img = f.encode_images(&images)?;
    let txt = f.encode_texts(&texts)?;
    let pairs: Vec<(usize, usize)> = (0..2 * n).map(|k| (k, k)).collect();
    let fused = f.fuse(&txt, &img, &pairs)?;
    let subj = f.g.gather_rows(fused.var, (0..n).map(|k| fused.row(k, 0)).collect());
    let obj = f.g.gather_rows(fused.var, (n..2 * n).map(|k| fused.row(k, 0)).collect());
    Ok(f.mrc_logits(subj, obj))
}

pub fn loss_mrc<T: Scalar>(f: &mut Forward<'_, T>, items: &[MrcItem<'_>]) -> Result<Var> {
    let classes = f.state.config.relations + 1;
    if let Some(bad) = items.iter().find(|i| i.target >= classes) {
        return Err(Error::Config(alloc::format!(
            "relation class {} outside {} classes",
            bad.target,
            classes
        )));
    }
    let logits = mrc_logits(f, items)?;
    let targets: Vec<usize> = items.iter().map(|i| i.target).collect();
    Ok(f.g.cross_entropy(logits, &targets))
}

/// Box regression example: the entity label against the full image, target
/// in normalized `(cx, cy, w, h)`.
#[derive(Debug, Clone)]
pub struct BoxItem<'a> {
    pub pixels: &'a [f32],
    pub text: Vec<u32>,
    pub target: [f64; 4],
}

fn check_box_target(t: &[f64; 4]) -> Result<()> {
    let (x0, x1) = (t[0] - 0.5 * t[2], t[0] + 0.5 * t[2]);
    let (y0, y1) = (t[1] - 0.5 * t[3], t[1] + 0.5 * t[3]);
    let eps = 1e-9;
    let ok = t.iter().all(|v| v.is_finite())
        && x0 < x1
        && y0 < y1
        && x0 >= -eps
        && y0 >= -eps
        && x1 <= 1.0 + eps
        && y1 <= 1.0 + eps;
    if ok {
        Ok(())
    } else {
        Err(Error::DegenerateBox(alloc::format!("{t:?}")))
    }
}

/// Box loss for a single prediction against a target, both `(cx, cy, w, h)`.
pub fn bbox_loss(pred: [f64; 4], target: [f64; 4], giou: bool) -> Result<f64> {
    check_box_target(&target)?;
    Ok(box_loss_and_grad(&pred, &target, giou).0)
}

/// Predicted boxes (`n × 4`) for entity labels against full images.
pub fn bbox_predict<T: Scalar>(f: &mut Forward<'_, T>, items: &[BoxItem<'_>]) -> Result<Var> {
    if items.is_empty() {
        return Err(Error::Empty("bbox batch"));
    }
    let images: Vec<ImageInput<'_>> = items
        .iter()
        .map(|i| ImageInput {
            pixels: i.pixels,
            mask: None,
        })
        .collect();
    let texts: Vec<&[u32]> = items.iter().map(|i| i.text.as_slice()).collect();
    let img = f.encode_images(&images)?;
    let txt = f.encode_texts(&texts)?;
    let pairs: Vec<(usize, usize)> = (0..items.len()).map(|k| (k, k)).collect();
    let fused = f.fuse(&txt, &img, &pairs)?;
    let pooled = f.cls(&fused);
    Ok(f.bbox(pooled))
}

pub fn loss_bbox<T: Scalar>(f: &mut Forward<'_, T>, items: &[BoxItem<'_>], giou: bool) -> Result<Var> {
    for i in items {
        check_box_target(&i.target)?;
    }
    let pred = bbox_predict(f, items)?;
    let targets: Vec<[T; 4]> = items
        .iter()
        .map(|i| [T::of(i.target[0]), T::of(i.target[1]), T::of(i.target[2]), T::of(i.target[3])])
        .collect();
    Ok(f.g.bbox_loss(pred, &targets, giou))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelState};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn cl_closed_form() {
        let mut g = Graph::<f64>::new(0);
        let e = g.input(vec![1.0, 0.0, 0.0, 1.0], 2, 2);
        let e2 = g.input(vec![1.0, 0.0, 0.0, 1.0], 2, 2);
        let l = loss_cl(&mut g, e, e2, 1.0).unwrap();
        assert!(close(g.scalar(l), (1.0 + (-1.0f64).exp()).ln(), 1e-12));
        assert!(close(g.scalar(l), 0.3133, 1e-4));
    }

    #[test]
    fn cl_uniform_is_ln_n_and_needs_two() {
        let mut g = Graph::<f64>::new(0);
        let a = g.input(vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0], 3, 2);
        let b = g.input(vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0], 3, 2);
        let l = loss_cl(&mut g, a, b, 0.5).unwrap();
        assert!(close(g.scalar(l), 3f64.ln(), 1e-12));
        let one = g.input(vec![1.0, 0.0], 1, 2);
        assert!(loss_cl(&mut g, one, one, 1.0).is_err());
    }

    #[test]
    fn cl_permutation_invariant() {
        let v = [0.6, 0.8, 1.0, 0.0, 0.0, 1.0];
        let w = [0.8, 0.6, 0.0, 1.0, 0.6, -0.8];
        let perm = [2, 0, 1];
        let mut g = Graph::<f64>::new(0);
        let a = g.input(v.to_vec(), 3, 2);
        let b = g.input(w.to_vec(), 3, 2);
        let l1 = loss_cl(&mut g, a, b, 0.3).unwrap();
        let pv: Vec<f64> = perm.iter().flat_map(|&i| v[2 * i..2 * i + 2].to_vec()).collect();
        let pw: Vec<f64> = perm.iter().flat_map(|&i| w[2 * i..2 * i + 2].to_vec()).collect();
        let a = g.input(pv, 3, 2);
        let b = g.input(pw, 3, 2);
        let l2 = loss_cl(&mut g, a, b, 0.3).unwrap();
        assert!(close(g.scalar(l1), g.scalar(l2), 1e-12));
    }

    #[test]
    fn itm_limits() {
        let mut g = Graph::<f64>::new(0);
        let uniform = g.input(vec![0.0; 4], 2, 2);
        let l = loss_itm(&mut g, uniform, &[true, false]).unwrap();
        assert!(close(g.scalar(l), 2f64.ln(), 1e-12));
        let confident = g.input(vec![50.0, -50.0, -50.0, 50.0], 2, 2);
        let l = loss_itm(&mut g, confident, &[true, false]).unwrap();
        assert!(g.scalar(l) < 1e-12);
        assert!(loss_itm(&mut g, uniform, &[true, true]).is_err());
    }

    #[test]
    fn mlm_limits() {
        let mut g = Graph::<f64>::new(0);
        let uniform = g.input(vec![0.0; 7], 1, 7);
        let l = loss_mlm(&mut g, uniform, &[3]).unwrap();
        assert!(close(g.scalar(l), 7f64.ln(), 1e-12));
        assert!(loss_mlm(&mut g, uniform, &[]).is_err());
    }

    #[test]
    fn bbox_values() {
        let b = [0.3, 0.4, 0.2, 0.2];
        assert_eq!(bbox_loss(b, b, true).unwrap(), 0.0);
        // Unit-separated disjoint boxes: the GIoU term alone exceeds 1.
        let (g, _) = crate::graph::giou_term(&[0.1, 0.1, 0.1, 0.1], &[0.9, 0.9, 0.1, 0.1]);
        assert!(g > 1.0);
        let p = [0.2, 0.7, 0.3, 0.1];
        let t = [0.5, 0.4, 0.2, 0.4];
        let swap = |v: [f64; 4]| [v[1], v[0], v[3], v[2]];
        let a = bbox_loss(p, t, true).unwrap();
        let b = bbox_loss(swap(p), swap(t), true).unwrap();
        assert!(close(a, b, 1e-12));
        assert!(bbox_loss(p, [0.5, 0.5, 0.0, 0.2], true).is_err());
    }

    #[test]
    fn negatives_skip_identical_texts_and_are_seeded() {
        let texts: [&[u32]; 3] = [&[0, 5, 1], &[0, 5, 1], &[0, 6, 1]];
        let sim = [1.0, 0.5, 0.2, 0.5, 1.0, 0.1, 0.2, 0.1, 1.0];
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample_itm_negatives(&sim, &texts, NegativeSampling::Similarity, &mut rng)
        };
        let neg = run(4);
        assert_eq!(neg, run(4));
        for &(t, i) in &neg {
            assert_ne!(texts[t], texts[i]);
        }
        assert_eq!(neg.len(), 6);
        let same: [&[u32]; 2] = [&[0, 5, 1], &[0, 5, 1]];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_itm_negatives(&[0.0; 4], &same, NegativeSampling::Uniform, &mut rng).is_empty());
    }

    fn tiny() -> ModelState<f64> {
        let mut c = ModelConfig::toy(12, 3);
        c.image_size = 8;
        c.patch_size = 4;
        c.d_model = 8;
        c.proj_dim = 4;
        c.mrc_hidden = 6;
        c.max_text_len = 8;
        ModelState::init(c, 5).unwrap()
    }

    fn item(ids: &[u32], target_pos: usize) -> TextItem {
        let mut masked = ids.to_vec();
        masked[target_pos] = crate::tokenizer::MASK;
        TextItem {
            ids: ids.to_vec(),
            masked,
            targets: vec![(target_pos, ids[target_pos])],
        }
    }

    #[test]
    fn albef_terms_are_finite() {
        let s = tiny();
        let px: Vec<Vec<f32>> = (0..3)
            .map(|k| (0..8 * 8 * 3).map(|i| ((i * (k + 3)) % 11) as f32 / 11.0).collect())
            .collect();
        let batch = PairBatch {
            images: px.iter().map(|p| ImageInput { pixels: p, mask: None }).collect(),
            texts: vec![item(&[0, 5, 6, 1], 1), item(&[0, 7, 1], 1), item(&[0, 8, 9, 10, 1], 3)],
        };
        let mut f = Forward::new(&s, None);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = loss_a(&mut f, &batch, &ObjectiveConfig::default(), &mut rng).unwrap();
        let total = t.combine(&mut f.g, &LossWeights::default());
        assert!(f.g.scalar(total).is_finite());
        assert_eq!(t.n_itm, 9);
        assert_eq!(t.n_mlm, 3);
        assert!(close(f.g.scalar(t.itm.unwrap()), 2f64.ln(), 0.2));
    }

    #[test]
    fn mrc_uniform_logits_give_ln_classes() {
        let mut s = tiny();
        let id = s.param_id("head.mrc2.w").unwrap();
        s.params[id].data.iter_mut().for_each(|v| *v = 0.0);
        let px = vec![0.5f32; 8 * 8 * 3];
        let a = EntityBox::new("a", 0.0, 0.0, 4.0, 4.0);
        let b = EntityBox::new("b", 4.0, 4.0, 8.0, 8.0);
        let items = [MrcItem {
            pixels: &px,
            subject: &a,
            object: &b,
            subject_text: vec![0, 5, 1],
            object_text: vec![0, 6, 1],
            target: 2,
        }];
        let mut f = Forward::new(&s, None);
        let l = loss_mrc(&mut f, &items).unwrap();
        assert!(close(f.g.scalar(l), 4f64.ln(), 1e-12));
    }
}
