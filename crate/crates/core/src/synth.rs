//! Procedural shape scenes with exact scene graphs, captions and foils.
//!
//! Relations between boxes `A` and `B` (pixels, half-open extents):
//!
//! | relation        | holds when                                                     |
//! |-----------------|----------------------------------------------------------------|
//! | left of         | `A.xmax ≤ B.xmin`                                              |
//! | right of        | `A.xmin ≥ B.xmax`                                              |
//! | above           | `A.ymax ≤ B.ymin` and the x ranges overlap by ≥ 1 px           |
//! | below           | `A.ymin ≥ B.ymax` and the x ranges overlap by ≥ 1 px           |
//! | overlapping     | intersection area > 0 and neither box contains the other       |
//! | inside          | `A` lies within `B` and `A` is strictly smaller                |
//! | same row as     | intersection area = 0 and centres differ by ≤ 1 px in y        |
//! | same column as  | intersection area = 0 and centres differ by ≤ 1 px in x        |
//!
//! Several relations can hold at once; the scene graph records one per ordered
//! pair, the first true one in [`RELATIONS`] order.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::model::derive_rng;
use crate::scene::{EntityBox, ImageRecord, RelationTriplet};

/// Relation vocabulary in priority order.
pub const RELATIONS: [&str; 8] = [
    "inside",
    "overlapping",
    "same row as",
    "same column as",
    "above",
    "below",
    "left of",
    "right of",
];

pub const SHAPES: [&str; 3] = ["circle", "square", "triangle"];

pub const COLORS: [(&str, [f32; 3]); 8] = [
    ("red", [0.95, 0.1, 0.1]),
    ("green", [0.1, 0.8, 0.2]),
    ("blue", [0.15, 0.3, 1.0]),
    ("yellow", [0.95, 0.9, 0.1]),
    ("purple", [0.6, 0.15, 0.85]),
    ("orange", [1.0, 0.55, 0.0]),
    ("white", [1.0, 1.0, 1.0]),
    ("cyan", [0.0, 0.85, 0.9]),
];

const BACKGROUND: [f32; 3] = [0.1, 0.1, 0.12];

fn opposite(rel: &str) -> &'static str {
    match rel {
        "left of" => "right of",
        "right of" => "left of",
        "above" => "below",
        "below" => "above",
        "same row as" => "same column as",
        "same column as" => "same row as",
        "inside" => "overlapping",
        _ => "inside",
    }
}

fn overlap_1d(a0: f32, a1: f32, b0: f32, b1: f32) -> f32 {
    a1.min(b1) - a0.max(b0)
}

fn intersection_area(a: &EntityBox, b: &EntityBox) -> f32 {
    overlap_1d(a.xmin, a.xmax, b.xmin, b.xmax).max(0.0) * overlap_1d(a.ymin, a.ymax, b.ymin, b.ymax).max(0.0)
}

fn within(a: &EntityBox, b: &EntityBox) -> bool {
    b.xmin <= a.xmin && a.xmax <= b.xmax && b.ymin <= a.ymin && a.ymax <= b.ymax
}

fn area(a: &EntityBox) -> f32 {
    (a.xmax - a.xmin) * (a.ymax - a.ymin)
}

/// Whether `relation` holds for subject box `a` and object box `b`.
/// Unknown relation strings never hold.
pub fn relation_holds(relation: &str, a: &EntityBox, b: &EntityBox) -> bool {
    let (ax, ay) = a.centre();
    let (bx, by) = b.centre();
    let disjoint = intersection_area(a, b) == 0.0;
    match relation {
        "left of" => a.xmax <= b.xmin,
        "right of" => a.xmin >= b.xmax,
        "above" => a.ymax <= b.ymin && overlap_1d(a.xmin, a.xmax, b.xmin, b.xmax) >= 1.0,
        "below" => a.ymin >= b.ymax && overlap_1d(a.xmin, a.xmax, b.xmin, b.xmax) >= 1.0,
        "overlapping" => !disjoint && !within(a, b) && !within(b, a),
        "inside" => within(a, b) && area(a) < area(b),
        "same row as" => disjoint && (ay - by).abs() <= 1.0,
        "same column as" => disjoint && (ax - bx).abs() <= 1.0,
        _ => false,
    }
}

pub fn true_relations(a: &EntityBox, b: &EntityBox) -> Vec<&'static str> {
    RELATIONS.iter().copied().filter(|r| relation_holds(r, a, b)).collect()
}

/// The relation the scene graph records for `(a, b)`.
pub fn canonical_relation(a: &EntityBox, b: &EntityBox) -> Option<&'static str> {
    RELATIONS.iter().copied().find(|r| relation_holds(r, a, b))
}

/// Triplets that do not hold geometrically, as human-readable messages.
pub fn verify_scene(record: &ImageRecord) -> Vec<String> {
    let mut out = Vec::new();
    for (i, t) in record.triplets.iter().enumerate() {
        let (Some(a), Some(b)) = (record.entities.get(t.subject), record.entities.get(t.object)) else {
            out.push(format!("triplets[{i}]: entity index out of range"));
            continue;
        };
        if !relation_holds(&t.relation, a, b) {
            out.push(format!(
                "triplets[{i}]: '{} {} {}' is false for the boxes",
                a.label, t.relation, b.label
            ));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub canvas: u32,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: u32,
    pub max_size: u32,
    pub max_captions: usize,
    /// Probability that a new object is placed inside an earlier one.
    pub p_inside: f64,
    /// Probability that a new object overlaps an earlier one.
    pub p_overlap: f64,
    /// Probability that a free object is snapped to an earlier object's row
    /// or column centre.
    pub p_align: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            canvas: 64,
            min_objects: 2,
            max_objects: 4,
            min_size: 10,
            max_size: 20,
            max_captions: 3,
            p_inside: 0.12,
            p_overlap: 0.15,
            p_align: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FoilType {
    RelationSwap,
    EntitySwap,
}

impl FoilType {
    pub fn as_str(&self) -> &'static str {
        match self {
            FoilType::RelationSwap => "relation_swap",
            FoilType::EntitySwap => "entity_swap",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoilPair {
    pub image_id: String,
    pub positive: String,
    pub foil: String,
    pub foil_type: FoilType,
}

/// A sentence with a true/false judgement for the image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VsrItem {
    pub image_id: String,
    pub sentence: String,
    pub label: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Test,
}

/// Every tenth scene goes to test, the one before it to dev.
pub fn split_of(index: usize) -> Split {
    match index % 10 {
        8 => Split::Dev,
        9 => Split::Test,
        _ => Split::Train,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub records: Vec<ImageRecord>,
    pub splits: Vec<Split>,
    /// Foils for dev and test scenes.
    pub foils: Vec<FoilPair>,
    pub vsr: Vec<VsrItem>,
}

#[derive(Debug, Clone, Copy)]
struct Obj {
    shape: usize,
    color: usize,
    x0: i32,
    y0: i32,
    size: i32,
}

impl Obj {
    fn bbox(&self) -> EntityBox {
        EntityBox::new(
            &label(self.color, self.shape),
            self.x0 as f32,
            self.y0 as f32,
            (self.x0 + self.size) as f32,
            (self.y0 + self.size) as f32,
        )
    }
}

fn label(color: usize, shape: usize) -> String {
    format!("{} {}", COLORS[color].0, SHAPES[shape])
}

/// Caption sentence for a triplet, with determiners.
pub fn caption_text(subject: &str, relation: &str, object: &str) -> String {
    format!("the {subject} {relation} the {object}")
}

fn place<R: Rng + ?Sized>(cfg: &SynthConfig, objs: &[Obj], rng: &mut R) -> Option<(i32, i32, i32)> {
    let canvas = cfg.canvas as i32;
    let (lo, hi) = (cfg.min_size as i32, cfg.max_size as i32);
    let boxes: Vec<EntityBox> = objs.iter().map(Obj::bbox).collect();
    let clear_of = |b: &EntityBox, skip: Option<usize>, gap: f32| {
        boxes.iter().enumerate().all(|(i, o)| {
            Some(i) == skip
                || b.xmax + gap <= o.xmin
                || o.xmax + gap <= b.xmin
                || b.ymax + gap <= o.ymin
                || o.ymax + gap <= b.ymin
        })
    };
    let mk = |x: i32, y: i32, s: i32| EntityBox::new("x", x as f32, y as f32, (x + s) as f32, (y + s) as f32);
    let mode: f64 = rng.random();
    if !objs.is_empty() && mode < cfg.p_inside {
        let host = rng.random_range(0..objs.len());
        let h = objs[host];
        let contained = boxes.iter().enumerate().any(|(i, b)| i != host && within(b, &boxes[host]));
        if h.size >= 16 && !contained && !boxes.iter().any(|b| within(&boxes[host], b) && b != &boxes[host]) {
            let s = rng.random_range(5..=h.size - 8);
            let x = rng.random_range(h.x0 + 2..=h.x0 + h.size - s - 2);
            let y = rng.random_range(h.y0 + 2..=h.y0 + h.size - s - 2);
            if clear_of(&mk(x, y, s), Some(host), 0.0) {
                return Some((x, y, s));
            }
        }
        return None;
    }
    if !objs.is_empty() && mode < cfg.p_inside + cfg.p_overlap {
        let host = rng.random_range(0..objs.len());
        let h = objs[host];
        let s = rng.random_range(lo..=hi);
        let x = rng.random_range((h.x0 - s + 3).max(0)..=(h.x0 + h.size - 3).min(canvas - s));
        let y = rng.random_range((h.y0 - s + 3).max(0)..=(h.y0 + h.size - 3).min(canvas - s));
        let b = mk(x, y, s);
        if relation_holds("overlapping", &b, &boxes[host]) && clear_of(&b, Some(host), 2.0) {
            return Some((x, y, s));
        }
        return None;
    }
    let s = rng.random_range(lo..=hi);
    let (mut x, mut y) = (rng.random_range(0..=canvas - s), rng.random_range(0..=canvas - s));
    if !objs.is_empty() && rng.random_bool(cfg.p_align) {
        let o = objs[rng.random_range(0..objs.len())];
        let centre2 = |p: i32, size: i32| 2 * p + size;
        if rng.random_bool(0.5) {
            // Match y-centres exactly when sizes have equal parity, else within 0.5 px.
            y = ((centre2(o.y0, o.size) - s) / 2).clamp(0, canvas - s);
        } else {
            x = ((centre2(o.x0, o.size) - s) / 2).clamp(0, canvas - s);
        }
    }
    let b = mk(x, y, s);
    clear_of(&b, None, 2.0).then_some((x, y, s))
}

fn render(objs: &[Obj], canvas: u32) -> Vec<f32> {
    let n = canvas as usize;
    let mut px = Vec::with_capacity(n * n * 3);
    for _ in 0..n * n {
        px.extend_from_slice(&BACKGROUND);
    }
    for o in objs {
        let rgb = COLORS[o.color].1;
        let s = o.size as f32;
        for y in o.y0..o.y0 + o.size {
            for x in o.x0..o.x0 + o.size {
                // Pixel centre in box-relative units.
                let u = (x - o.x0) as f32 + 0.5;
                let v = (y - o.y0) as f32 + 0.5;
                let inside = match SHAPES[o.shape] {
                    "circle" => {
                        let (dx, dy) = (u - s / 2.0, v - s / 2.0);
                        dx * dx + dy * dy <= s * s / 4.0
                    }
                    "square" => true,
                    _ => (u - s / 2.0).abs() <= v / 2.0,
                };
                if inside {
                    let i = (y as usize * n + x as usize) * 3;
                    px[i..i + 3].copy_from_slice(&rgb);
                }
            }
        }
    }
    // Quantize to 8 bits so images survive a round trip through disk.
    for v in &mut px {
        *v = num_traits::Float::round(*v * 255.0) / 255.0;
    }
    px
}

/// One scene, deterministic in `(seed, index)`.
pub fn generate_scene(cfg: &SynthConfig, seed: u64, index: usize) -> ImageRecord {
    let mut rng = derive_rng(seed, index as u64);
    let target = rng.random_range(cfg.min_objects..=cfg.max_objects.max(cfg.min_objects));
    let mut objs: Vec<Obj> = Vec::new();
    let mut kinds: Vec<(usize, usize)> = (0..COLORS.len())
        .flat_map(|c| (0..SHAPES.len()).map(move |s| (c, s)))
        .collect();
    kinds.shuffle(&mut rng);
    let mut attempts = 0;
    while objs.len() < target {
        attempts += 1;
        if attempts > 400 {
            if objs.len() >= cfg.min_objects {
                break;
            }
            objs.clear();
            attempts = 0;
        }
        if let Some((x0, y0, size)) = place(cfg, &objs, &mut rng) {
            let (color, shape) = kinds[objs.len()];
            objs.push(Obj { shape, color, x0, y0, size });
        }
    }
    // Inner objects are listed (and drawn) after their hosts already.
    let entities: Vec<EntityBox> = objs.iter().map(Obj::bbox).collect();
    let mut triplets = Vec::new();
    for i in 0..entities.len() {
        for j in 0..entities.len() {
            if i != j {
                if let Some(r) = canonical_relation(&entities[i], &entities[j]) {
                    triplets.push(RelationTriplet::new(i, r, j));
                }
            }
        }
    }
    let n_caps = rng.random_range(1..=cfg.max_captions.max(1)).min(triplets.len());
    let picked = rand::seq::index::sample(&mut rng, triplets.len(), n_caps).into_vec();
    let captions = picked
        .iter()
        .map(|&k| {
            let t = &triplets[k];
            caption_text(&entities[t.subject].label, &t.relation, &entities[t.object].label)
        })
        .collect();
    ImageRecord {
        id: format!("scene{index:05}"),
        width: cfg.canvas,
        height: cfg.canvas,
        pixels: render(&objs, cfg.canvas),
        captions,
        entities,
        triplets,
    }
}

/// Splits a caption produced by [`caption_text`] back into its parts.
pub fn parse_caption(caption: &str) -> Option<(String, String, String)> {
    let rest = caption.strip_prefix("the ")?;
    let (subject, rest) = rest.split_once(' ').and_then(|(c, r)| {
        let (s, r) = r.split_once(' ')?;
        Some((format!("{c} {s}"), r))
    })?;
    let (relation, object) = rest.rsplit_once(" the ")?;
    Some((subject, relation.to_string(), object.to_string()))
}

fn labels_absent<R: Rng + ?Sized>(record: &ImageRecord, rng: &mut R) -> String {
    let present: Vec<&str> = record.entities.iter().map(|e| e.label.as_str()).collect();
    let absent: Vec<String> = (0..COLORS.len())
        .flat_map(|c| (0..SHAPES.len()).map(move |s| label(c, s)))
        .filter(|l| !present.contains(&l.as_str()))
        .collect();
    absent.choose(rng).cloned().expect("palette larger than any scene")
}

fn entity_of(record: &ImageRecord, label: &str) -> Option<usize> {
    record.entities.iter().position(|e| e.label == label)
}

/// A relation that is false for the pair: the opposite relation when that is
/// false, otherwise a uniformly chosen false one.
pub fn false_relation<R: Rng + ?Sized>(a: &EntityBox, b: &EntityBox, current: &str, rng: &mut R) -> &'static str {
    let opp = opposite(current);
    if !relation_holds(opp, a, b) {
        return opp;
    }
    let options: Vec<&str> = RELATIONS.iter().copied().filter(|r| !relation_holds(r, a, b)).collect();
    options.choose(rng).copied().expect("some relation is always false")
}

/// Relation-swap and entity-swap foils for every caption of `record`.
pub fn foils_for<R: Rng + ?Sized>(record: &ImageRecord, rng: &mut R) -> Vec<FoilPair> {
    let mut out = Vec::new();
    for cap in &record.captions {
        let Some((s, r, o)) = parse_caption(cap) else { continue };
        let (Some(si), Some(oi)) = (entity_of(record, &s), entity_of(record, &o)) else { continue };
        let fr = false_relation(&record.entities[si], &record.entities[oi], &r, rng);
        out.push(FoilPair {
            image_id: record.id.clone(),
            positive: cap.clone(),
            foil: caption_text(&s, fr, &o),
            foil_type: FoilType::RelationSwap,
        });
        let swapped = labels_absent(record, rng);
        let foil = if rng.random_bool(0.5) {
            caption_text(&swapped, &r, &o)
        } else {
            caption_text(&s, &r, &swapped)
        };
        out.push(FoilPair {
            image_id: record.id.clone(),
            positive: cap.clone(),
            foil,
            foil_type: FoilType::EntitySwap,
        });
    }
    out
}

/// One true and one false spatial statement about `record`.
pub fn vsr_for<R: Rng + ?Sized>(record: &ImageRecord, rng: &mut R) -> Vec<VsrItem> {
    let Some(t) = record.triplets.choose(rng) else { return Vec::new() };
    let e = &record.entities;
    let mut out = vec![VsrItem {
        image_id: record.id.clone(),
        sentence: caption_text(&e[t.subject].label, &t.relation, &e[t.object].label),
        label: true,
    }];
    let f = record.triplets.choose(rng).expect("non-empty");
    let (a, b) = (&e[f.subject], &e[f.object]);
    out.push(VsrItem {
        image_id: record.id.clone(),
        sentence: caption_text(&a.label, false_relation(a, b, &f.relation, rng), &b.label),
        label: false,
    });
    out
}

/// `n` scenes with foils and VSR items for the dev and test splits.
pub fn generate(n: usize, seed: u64, cfg: &SynthConfig) -> SynthCorpus {
    let records: Vec<ImageRecord> = (0..n).map(|i| generate_scene(cfg, seed, i)).collect();
    let splits: Vec<Split> = (0..n).map(split_of).collect();
    let mut rng = derive_rng(seed, u64::MAX);
    let mut foils = Vec::new();
    let mut vsr = Vec::new();
    for (r, s) in records.iter().zip(&splits) {
        if *s != Split::Train {
            foils.extend(foils_for(r, &mut rng));
            vsr.extend(vsr_for(r, &mut rng));
        }
    }
    SynthCorpus {
        records,
        splits,
        foils,
        vsr,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x0: f32, y0: f32, x1: f32, y1: f32) -> EntityBox {
        EntityBox::new("x", x0, y0, x1, y1)
    }

    #[test]
    fn relation_rules() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        let right = b(20.0, 0.0, 30.0, 10.0);
        assert_eq!(true_relations(&a, &right), vec!["same row as", "left of"]);
        assert_eq!(true_relations(&right, &a), vec!["same row as", "right of"]);
        let under = b(2.0, 20.0, 12.0, 30.0);
        assert_eq!(canonical_relation(&a, &under), Some("above"));
        assert_eq!(canonical_relation(&under, &a), Some("below"));
        let diag = b(20.0, 20.0, 30.0, 30.0);
        assert_eq!(canonical_relation(&a, &diag), Some("left of"));
        let inner = b(2.0, 2.0, 5.0, 5.0);
        assert_eq!(canonical_relation(&inner, &a), Some("inside"));
        assert_eq!(canonical_relation(&a, &inner), None);
        let ov = b(5.0, 5.0, 15.0, 15.0);
        assert_eq!(canonical_relation(&a, &ov), Some("overlapping"));
        let col = b(0.0, 40.0, 10.0, 50.0);
        assert_eq!(canonical_relation(&a, &col), Some("same column as"));
        assert!(relation_holds("above", &a, &col));
    }

    #[test]
    fn generated_scenes_verify() {
        let cfg = SynthConfig::default();
        for i in 0..200 {
            let r = generate_scene(&cfg, 7, i);
            r.validate().unwrap();
            assert!(verify_scene(&r).is_empty(), "{:?}", verify_scene(&r));
            assert!(!r.captions.is_empty() && r.captions.len() <= 3);
            for c in &r.captions {
                let (s, rel, o) = parse_caption(c).unwrap();
                let (si, oi) = (entity_of(&r, &s).unwrap(), entity_of(&r, &o).unwrap());
                assert!(r.triplets.contains(&RelationTriplet::new(si, &rel, oi)));
            }
            let labels: Vec<_> = r.entities.iter().map(|e| &e.label).collect();
            let mut dedup = labels.clone();
            dedup.sort();
            dedup.dedup();
            assert_eq!(dedup.len(), labels.len());
        }
    }

    #[test]
    fn corrupted_triplet_is_reported() {
        let mut r = generate_scene(&SynthConfig::default(), 1, 0);
        let t = r.triplets[0].clone();
        let (a, bb) = (&r.entities[t.subject], &r.entities[t.object]);
        let wrong = RELATIONS.iter().find(|x| !relation_holds(x, a, bb)).unwrap();
        r.triplets[0].relation = wrong.to_string();
        assert_eq!(verify_scene(&r).len(), 1);
        r.triplets.clear();
        r.entities.clear();
        assert!(verify_scene(&r).is_empty());
    }

    #[test]
    fn foils_are_false() {
        let c = generate(60, 3, &SynthConfig::default());
        assert!(!c.foils.is_empty());
        for f in &c.foils {
            let r = c.records.iter().find(|r| r.id == f.image_id).unwrap();
            assert_ne!(f.positive, f.foil);
            let (s, rel, o) = parse_caption(&f.foil).unwrap();
            match f.foil_type {
                FoilType::RelationSwap => {
                    let (si, oi) = (entity_of(r, &s).unwrap(), entity_of(r, &o).unwrap());
                    assert!(!relation_holds(&rel, &r.entities[si], &r.entities[oi]));
                }
                FoilType::EntitySwap => {
                    assert!(entity_of(r, &s).is_none() || entity_of(r, &o).is_none());
                }
            }
        }
        for v in &c.vsr {
            let r = c.records.iter().find(|r| r.id == v.image_id).unwrap();
            let (s, rel, o) = parse_caption(&v.sentence).unwrap();
            let (si, oi) = (entity_of(r, &s).unwrap(), entity_of(r, &o).unwrap());
            assert_eq!(relation_holds(&rel, &r.entities[si], &r.entities[oi]), v.label);
        }
    }

    #[test]
    fn all_relations_occur() {
        let cfg = SynthConfig::default();
        let mut seen = alloc::collections::BTreeMap::new();
        for i in 0..1000 {
            for t in generate_scene(&cfg, 11, i).triplets {
                *seen.entry(t.relation).or_insert(0usize) += 1;
            }
        }
        assert_eq!(seen.len(), 8, "{seen:?}");
    }

    #[test]
    fn deterministic() {
        let cfg = SynthConfig::default();
        assert_eq!(generate(20, 5, &cfg), generate(20, 5, &cfg));
        assert_ne!(generate_scene(&cfg, 5, 0), generate_scene(&cfg, 6, 0));
    }
}
