//! Zero-shot scoring with the ITM head, foil / VSR / retrieval metrics, MRC
//! probing and checkpoint selection.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Forward, ImageInput, ModelState};
use crate::objectives::{mrc_logits, MrcItem, ITM_MATCH};
use crate::scalar::Scalar;

/// Pairs fused per tape when scoring.
pub const SCORE_CHUNK: usize = 256;

fn match_probability(l0: f64, l1: f64) -> f64 {
    // softmax([l0, l1])[0]
    1.0 / (1.0 + num_traits::Float::exp(l1 - l0))
}

/// Match probabilities for `(text index, image index)` pairs.
pub fn itm_scores<T: Scalar>(
    state: &ModelState<T>,
    images: &[&[f32]],
    texts: &[&[u32]],
    pairs: &[(usize, usize)],
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(SCORE_CHUNK) {
        let mut img_ids: Vec<usize> = chunk.iter().map(|p| p.1).collect();
        let mut txt_ids: Vec<usize> = chunk.iter().map(|p| p.0).collect();
        img_ids.sort_unstable();
        img_ids.dedup();
        txt_ids.sort_unstable();
        txt_ids.dedup();
        for &(t, i) in chunk {
            if t >= texts.len() || i >= images.len() {
                return Err(Error::Shape(format!("pair ({t}, {i}) out of range")));
            }
        }
        let mut f = Forward::new(state, None);
        let inputs: Vec<ImageInput<'_>> = img_ids
            .iter()
            .map(|&i| ImageInput { pixels: images[i], mask: None })
            .collect();
        let img = f.encode_images(&inputs)?;
        let seqs: Vec<&[u32]> = txt_ids.iter().map(|&t| texts[t]).collect();
        let txt = f.encode_texts(&seqs)?;
        let local: Vec<(usize, usize)> = chunk
            .iter()
            .map(|&(t, i)| {
                (
                    txt_ids.binary_search(&t).expect("collected"),
                    img_ids.binary_search(&i).expect("collected"),
                )
            })
            .collect();
        let fused = f.fuse(&txt, &img, &local)?;
        let pooled = f.cls(&fused);
        let logits = f.itm_logits(pooled);
        let v = f.g.value(logits);
        for k in 0..chunk.len() {
            let (a, b) = (v[2 * k + ITM_MATCH].f64(), v[2 * k + 1 - ITM_MATCH].f64());
            out.push(match_probability(a, b));
        }
    }
    Ok(out)
}

/// Match probability of one image/text pair.
pub fn itm_score<T: Scalar>(state: &ModelState<T>, pixels: &[f32], ids: &[u32]) -> Result<f64> {
    Ok(itm_scores(state, &[pixels], &[ids], &[(0, 0)])?[0])
}

/// Fraction of pairs where the positive outscores the foil; ties count half.
pub fn ranking_accuracy(positive: &[f64], foil: &[f64]) -> Result<f64> {
    if positive.len() != foil.len() {
        return Err(Error::LengthMismatch(positive.len(), foil.len()));
    }
    if positive.is_empty() {
        return Err(Error::Empty("no foil pairs"));
    }
    let wins: f64 = positive
        .iter()
        .zip(foil)
        .map(|(p, f)| if p > f { 1.0 } else if p == f { 0.5 } else { 0.0 })
        .sum();
    Ok(wins / positive.len() as f64)
}

/// Accuracy of predicting `true` iff `score ≥ threshold`.
pub fn vsr_accuracy(scores: &[f64], labels: &[bool], threshold: f64) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch(scores.len(), labels.len()));
    }
    if scores.is_empty() {
        return Err(Error::Empty("no VSR items"));
    }
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| (s >= threshold) == l)
        .count();
    Ok(hits as f64 / scores.len() as f64)
}

/// Area under the ROC curve (probability a random true item outscores a
/// random false one, ties half). `None` if one class is absent.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|p| *p.1).map(|p| *p.0).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|p| !*p.1).map(|p| *p.0).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for p in &pos {
        for n in &neg {
            wins += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
        }
    }
    Some(wins / (pos.len() * neg.len()) as f64)
}

/// `(threshold, accuracy)` over an evenly spaced grid of `points` thresholds
/// in `[0, 1]`.
pub fn threshold_curve(scores: &[f64], labels: &[bool], points: usize) -> Result<Vec<(f64, f64)>> {
    let points = points.max(2);
    (0..points)
        .map(|i| {
            let t = i as f64 / (points - 1) as f64;
            vsr_accuracy(scores, labels, t).map(|a| (t, a))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recall {
    /// `(k, TR@k)`.
    pub text: Vec<(usize, f64)>,
    /// `(k, IR@k)`.
    pub image: Vec<(usize, f64)>,
}

/// Zero-based rank of `target` in `scores`, higher first; equal scores with
/// a lower index rank ahead.
fn rank_of(scores: impl Iterator<Item = f64> + Clone, target: usize) -> usize {
    let s_t = scores.clone().nth(target).expect("target in range");
    scores
        .enumerate()
        .filter(|&(j, s)| j != target && (s > s_t || (s == s_t && j < target)))
        .count()
}

/// TR@k and IR@k for an `n × n` score matrix (row = image, column = text,
/// diagonal = positives), row-major.
pub fn retrieval_recall(scores: &[f64], n: usize, ks: &[usize]) -> Result<Recall> {
    if n == 0 || scores.len() != n * n {
        return Err(Error::Shape(format!("{} scores do not form a square of side {n}", scores.len())));
    }
    let tr_ranks: Vec<usize> = (0..n).map(|i| rank_of(scores[i * n..(i + 1) * n].iter().copied(), i)).collect();
    let ir_ranks: Vec<usize> = (0..n).map(|j| rank_of((0..n).map(|i| scores[i * n + j]), j)).collect();
    let at = |ranks: &[usize], k: usize| ranks.iter().filter(|&&r| r < k).count() as f64 / n as f64;
    Ok(Recall {
        text: ks.iter().map(|&k| (k, at(&tr_ranks, k))).collect(),
        image: ks.iter().map(|&k| (k, at(&ir_ranks, k))).collect(),
    })
}

/// Index of the maximum (first on ties).
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Accuracy of row-wise argmax over `n × classes` logits.
pub fn probe_accuracy(logits: &[f64], classes: usize, targets: &[usize]) -> Result<f64> {
    if targets.is_empty() {
        return Err(Error::Empty("no probe items"));
    }
    if logits.len() != targets.len() * classes {
        return Err(Error::LengthMismatch(logits.len(), targets.len() * classes));
    }
    let hits = targets
        .iter()
        .enumerate()
        .filter(|(i, &t)| argmax(&logits[i * classes..(i + 1) * classes]) == t)
        .count();
    Ok(hits as f64 / targets.len() as f64)
}

/// MRC head accuracy on relation examples.
pub fn mrc_probe<T: Scalar>(state: &ModelState<T>, items: &[MrcItem<'_>]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Empty("no probe items"));
    }
    let classes = state.config.relations + 1;
    let mut logits = Vec::with_capacity(items.len() * classes);
    for chunk in items.chunks(SCORE_CHUNK / 2) {
        let mut f = Forward::new(state, None);
        let l = mrc_logits(&mut f, chunk)?;
        logits.extend(f.g.value(l).iter().map(|v| v.f64()));
    }
    let targets: Vec<usize> = items.iter().map(|i| i.target).collect();
    probe_accuracy(&logits, classes, &targets)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: usize,
    pub path: String,
    #[serde(default)]
    pub eval_metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub metrics: BTreeMap<String, f64>,
    pub n_examples: usize,
    pub checkpoint_step: usize,
}

/// Checkpoint with the highest `metric`; ties go to the later step.
pub fn select_checkpoint<'c>(checkpoints: &'c [CheckpointMeta], metric: &str) -> Result<&'c CheckpointMeta> {
    let mut best: Option<(&CheckpointMeta, f64)> = None;
    for c in checkpoints {
        let v = *c
            .eval_metrics
            .get(metric)
            .ok_or_else(|| Error::MissingMetric(format!("{metric} at step {}", c.step)))?;
        let better = match best {
            None => true,
            Some((b, bv)) => v > bv || (v == bv && c.step > b.step),
        };
        if better {
            best = Some((c, v));
        }
    }
    best.map(|b| b.0).ok_or(Error::Empty("no checkpoints"))
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's ρ: Pearson correlation of average ranks. Errors on length
/// mismatch, fewer than 2 points, or a constant input.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(Error::Config("spearman needs at least 2 points".into()));
    }
    let (rx, ry) = (average_ranks(xs), average_ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Config("spearman of a constant sequence".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Checkpoint-selection study over a run's evaluated checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionStudy {
    pub reference: String,
    /// `(selection metric, chosen step)`.
    pub strategies: Vec<(String, usize)>,
    /// Per strategy, every metric's value at the chosen checkpoint.
    pub cross_matrix: BTreeMap<String, BTreeMap<String, f64>>,
    /// Per metric, ρ against the reference metric across checkpoints
    /// (`None` when undefined, e.g. a constant metric).
    pub spearman: BTreeMap<String, Option<f64>>,
}

pub fn selection_study(checkpoints: &[CheckpointMeta], reference: &str) -> Result<SelectionStudy> {
    let first = checkpoints.first().ok_or(Error::Empty("no checkpoints"))?;
    let metrics: Vec<String> = first.eval_metrics.keys().cloned().collect();
    if !metrics.iter().any(|m| m == reference) {
        return Err(Error::MissingMetric(reference.into()));
    }
    let column = |m: &str| -> Result<Vec<f64>> {
        checkpoints
            .iter()
            .map(|c| {
                c.eval_metrics
                    .get(m)
                    .copied()
                    .ok_or_else(|| Error::MissingMetric(format!("{m} at step {}", c.step)))
            })
            .collect()
    };
    let ref_col = column(reference)?;
    let mut strategies = Vec::new();
    let mut cross = BTreeMap::new();
    let mut rho = BTreeMap::new();
    for m in &metrics {
        let chosen = select_checkpoint(checkpoints, m)?;
        strategies.push((m.clone(), chosen.step));
        cross.insert(m.clone(), chosen.eval_metrics.clone());
        rho.insert(m.clone(), spearman(&column(m)?, &ref_col).ok());
    }
    Ok(SelectionStudy {
        reference: reference.into(),
        strategies,
        cross_matrix: cross,
        spearman: rho,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ranking_ties_and_oracle() {
        assert_eq!(ranking_accuracy(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.5);
        assert_eq!(ranking_accuracy(&[1.0, 0.9], &[0.0, 0.1]).unwrap(), 1.0);
        assert!(ranking_accuracy(&[], &[]).is_err());
    }

    #[test]
    fn vsr_cases() {
        assert_eq!(vsr_accuracy(&[1.0; 4], &[true; 4], 0.5).unwrap(), 1.0);
        assert_eq!(vsr_accuracy(&[0.7; 4], &[true, false, true, false], 0.5).unwrap(), 0.5);
        assert_eq!(auc(&[0.9, 0.1], &[true, false]), Some(1.0));
        assert_eq!(auc(&[0.9], &[true]), None);
        let curve = threshold_curve(&[0.2, 0.8], &[false, true], 11).unwrap();
        assert_eq!(curve.len(), 11);
        assert_eq!(curve[5].1, 1.0);
    }

    #[test]
    fn recall_worked_example() {
        let r = retrieval_recall(&[0.1, 0.9, 0.2, 0.3], 2, &[1, 2]).unwrap();
        assert_eq!(r.text, vec![(1, 0.5), (2, 1.0)]);
        assert!(retrieval_recall(&[0.0; 3], 2, &[1]).is_err());
        let id = retrieval_recall(&[1.0, 0.0, 0.0, 1.0], 2, &[1]).unwrap();
        assert_eq!((id.text[0].1, id.image[0].1), (1.0, 1.0));
    }

    #[test]
    fn recall_tie_rule() {
        // All equal: the true item ranks behind every lower index.
        let r = retrieval_recall(&[0.5; 9], 3, &[1, 2, 3]).unwrap();
        assert_eq!(r.text, vec![(1, 1.0 / 3.0), (2, 2.0 / 3.0), (3, 1.0)]);
    }

    #[test]
    fn spearman_cases() {
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert!(spearman(&[1.0], &[1.0]).is_err());
        assert!(spearman(&[1.0, 2.0], &[1.0]).is_err());
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0]), vec![1.5, 3.0, 1.5]);
    }

    fn meta(step: usize, v: f64) -> CheckpointMeta {
        CheckpointMeta {
            step,
            path: format!("ckpt{step}"),
            eval_metrics: [("tr1".into(), v)].into_iter().collect(),
        }
    }

    #[test]
    fn selection() {
        let cs = [meta(100, 0.1), meta(200, 0.3), meta(300, 0.2)];
        assert_eq!(select_checkpoint(&cs, "tr1").unwrap().step, 200);
        assert_eq!(select_checkpoint(&cs[..1], "tr1").unwrap().step, 100);
        let tie = [meta(100, 0.3), meta(200, 0.3)];
        assert_eq!(select_checkpoint(&tie, "tr1").unwrap().step, 200);
        assert!(select_checkpoint(&cs, "ir1").is_err());
        let study = selection_study(&cs, "tr1").unwrap();
        assert_eq!(study.spearman["tr1"], Some(1.0));
    }

    #[test]
    fn probe_shift_invariant() {
        let logits = [0.1, 2.0, -1.0, 3.0, 0.0, 0.5];
        let shifted: Vec<f64> = logits.iter().map(|v| v + 7.0).collect();
        let t = [1, 0];
        assert_eq!(probe_accuracy(&logits, 3, &t).unwrap(), 1.0);
        assert_eq!(probe_accuracy(&shifted, 3, &t).unwrap(), 1.0);
    }

    proptest! {
        #[test]
        fn monotone_transform_preserves_ranking(pairs in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..40)) {
            let (p, f): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let g = |v: &[f64]| v.iter().map(|x| (3.0 * x).exp() - 2.0).collect::<Vec<_>>();
            prop_assert_eq!(ranking_accuracy(&p, &f).unwrap(), ranking_accuracy(&g(&p), &g(&f)).unwrap());
        }

        #[test]
        fn recall_non_decreasing_in_k(n in 1usize..8, seed in proptest::collection::vec(0u8..5, 64)) {
            let s: Vec<f64> = (0..n * n).map(|i| seed[i] as f64).collect();
            let r = retrieval_recall(&s, n, &[1, 2, 3, 4, 5]).unwrap();
            for w in r.text.windows(2).chain(r.image.windows(2)) {
                prop_assert!(w[0].1 <= w[1].1);
            }
        }
    }
}
