//! Dual-stream encoder: a vision transformer over patch embeddings, a text
//! transformer, and a cross-modal transformer whose layers add cross-attention
//! from text onto image tokens. Task heads sit on top.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{AttnLayout, Graph, Var};
use crate::patchmask::{PatchGrid, PatchMask};
use crate::scalar::Scalar;
use crate::tokenizer::PAD;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub depth_vision: usize,
    pub depth_text: usize,
    pub depth_xmodal: usize,
    /// Hidden width of every transformer MLP, as a multiple of `d_model`.
    pub mlp_ratio: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    /// Relation classes `V`; the MRC head has `V + 1` outputs.
    pub relations: usize,
    pub proj_dim: usize,
    pub temperature: f64,
    pub dropout: f64,
    pub mrc_hidden: usize,
    /// Amplitude of the sin-cos values the position tables start from.
    #[serde(default = "default_pos_scale")]
    pub pos_scale: f64,
}

const TOKEN_EMBED_STD: f64 = 0.5;

fn default_pos_scale() -> f64 {
    0.25
}

impl ModelConfig {
    /// Desk-scale defaults for a 64px canvas.
    pub fn toy(vocab_size: usize, relations: usize) -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            d_model: 32,
            n_heads: 2,
            depth_vision: 1,
            depth_text: 1,
            depth_xmodal: 1,
            mlp_ratio: 2,
            vocab_size,
            max_text_len: 112,
            relations,
            proj_dim: 32,
            temperature: 0.1,
            dropout: 0.1,
            mrc_hidden: 64,
            pos_scale: default_pos_scale(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        PatchGrid::new(self.image_size, self.patch_size)?;
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.depth_vision == 0 || self.depth_text == 0 || self.depth_xmodal == 0 {
            return bad("all encoder depths must be ≥ 1".to_string());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive".to_string());
        }
        if !(self.pos_scale >= 0.0 && self.pos_scale.is_finite()) {
            return bad("pos_scale must be finite and non-negative".to_string());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)".to_string());
        }
        if self.vocab_size < 6 || self.max_text_len < 2 {
            return bad("vocabulary or text length too small".to_string());
        }
        if self.relations == 0 || self.proj_dim == 0 || self.mrc_hidden == 0 || self.mlp_ratio == 0
        {
            return bad("head sizes must be ≥ 1".to_string());
        }
        Ok(())
    }

    pub fn grid(&self) -> PatchGrid {
        PatchGrid::new(self.image_size, self.patch_size).expect("validated grid")
    }

    /// Image token sequence length: `[CLS]` plus one token per patch.
    pub fn image_tokens(&self) -> usize {
        1 + self.grid().n_patches()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let h = d * self.mlp_ratio;
        let norm = 2 * d;
        let attn = norm + 4 * (d * d + d);
        let mlp = norm + (d * h + h) + (h * d + d);
        let layer = attn + mlp;
        let vision = (self.patch_dim() * d + d) + self.image_tokens() * d + self.depth_vision * layer + norm;
        let text = self.vocab_size * d + self.max_text_len * d + self.depth_text * layer + norm;
        let xmodal = self.depth_xmodal * (layer + attn) + norm;
        let heads = 2 * (d * self.proj_dim + self.proj_dim)
            + (d * 2 + 2)
            + (d * self.vocab_size + self.vocab_size)
            + (2 * d * self.mrc_hidden + self.mrc_hidden)
            + (self.mrc_hidden * (self.relations + 1) + self.relations + 1)
            + (d * 4 + 4);
        vision + text + xmodal + heads
    }
}

/// A named parameter tensor. Rank 1 for biases and norms, rank 2 otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T> Param<T> {
    pub fn rows_cols(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => unreachable!("parameters are rank 1 or 2"),
        }
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Linear {
    pub w: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Norm {
    pub g: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct AttnBlock {
    pub norm: Norm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct MlpBlock {
    pub norm: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct EncoderLayer {
    pub attn: AttnBlock,
    pub mlp: MlpBlock,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct FusionLayer {
    pub self_attn: AttnBlock,
    pub cross_attn: AttnBlock,
    pub mlp: MlpBlock,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub patch: Linear,
    pub vis_pos: usize,
    pub vis_layers: Vec<EncoderLayer>,
    pub vis_norm: Norm,
    pub tok_embed: usize,
    pub txt_pos: usize,
    pub txt_layers: Vec<EncoderLayer>,
    pub txt_norm: Norm,
    pub x_layers: Vec<FusionLayer>,
    pub x_norm: Norm,
    pub proj_img: Linear,
    pub proj_txt: Linear,
    pub itm: Linear,
    pub mlm: Linear,
    pub mrc1: Linear,
    pub mrc2: Linear,
    pub bbox: Linear,
}

struct Registry {
    specs: Vec<(String, Vec<usize>)>,
}

impl Registry {
    fn add(&mut self, name: String, shape: Vec<usize>) -> usize {
        self.specs.push((name, shape));
        self.specs.len() - 1
    }
    fn linear(&mut self, name: &str, i: usize, o: usize) -> Linear {
        Linear {
            w: self.add(format!("{name}.w"), vec![i, o]),
            b: self.add(format!("{name}.b"), vec![o]),
        }
    }
    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            g: self.add(format!("{name}.g"), vec![d]),
            b: self.add(format!("{name}.b"), vec![d]),
        }
    }
    fn attn(&mut self, name: &str, d: usize) -> AttnBlock {
        AttnBlock {
            norm: self.norm(&format!("{name}.ln"), d),
            q: self.linear(&format!("{name}.q"), d, d),
            k: self.linear(&format!("{name}.k"), d, d),
            v: self.linear(&format!("{name}.v"), d, d),
            o: self.linear(&format!("{name}.o"), d, d),
        }
    }
    fn mlp(&mut self, name: &str, d: usize, h: usize) -> MlpBlock {
        MlpBlock {
            norm: self.norm(&format!("{name}.ln"), d),
            fc1: self.linear(&format!("{name}.fc1"), d, h),
            fc2: self.linear(&format!("{name}.fc2"), h, d),
        }
    }
    fn encoder_layer(&mut self, name: &str, d: usize, h: usize) -> EncoderLayer {
        EncoderLayer {
            attn: self.attn(&format!("{name}.attn"), d),
            mlp: self.mlp(&format!("{name}.mlp"), d, h),
        }
    }
}

impl Layout {
    fn build(c: &ModelConfig) -> (Self, Vec<(String, Vec<usize>)>) {
        let d = c.d_model;
        let h = d * c.mlp_ratio;
        let mut r = Registry { specs: Vec::new() };
        let patch = r.linear("vision.patch", c.patch_dim(), d);
        let vis_pos = r.add("vision.pos".into(), vec![c.image_tokens(), d]);
        let vis_layers = (0..c.depth_vision)
            .map(|i| r.encoder_layer(&format!("vision.layer{i}"), d, h))
            .collect();
        let vis_norm = r.norm("vision.ln_f", d);
        let tok_embed = r.add("text.tok".into(), vec![c.vocab_size, d]);
        let txt_pos = r.add("text.pos".into(), vec![c.max_text_len, d]);
        let txt_layers = (0..c.depth_text)
            .map(|i| r.encoder_layer(&format!("text.layer{i}"), d, h))
            .collect();
        let txt_norm = r.norm("text.ln_f", d);
        let x_layers = (0..c.depth_xmodal)
            .map(|i| FusionLayer {
                self_attn: r.attn(&format!("xmodal.layer{i}.self"), d),
                cross_attn: r.attn(&format!("xmodal.layer{i}.cross"), d),
                mlp: r.mlp(&format!("xmodal.layer{i}.mlp"), d, h),
            })
            .collect();
        let x_norm = r.norm("xmodal.ln_f", d);
        let proj_img = r.linear("head.proj_image", d, c.proj_dim);
        let proj_txt = r.linear("head.proj_text", d, c.proj_dim);
        let itm = r.linear("head.itm", d, 2);
        let mlm = r.linear("head.mlm", d, c.vocab_size);
        let mrc1 = r.linear("head.mrc1", 2 * d, c.mrc_hidden);
        let mrc2 = r.linear("head.mrc2", c.mrc_hidden, c.relations + 1);
        let bbox = r.linear("head.bbox", d, 4);
        (
            Self {
                patch,
                vis_pos,
                vis_layers,
                vis_norm,
                tok_embed,
                txt_pos,
                txt_layers,
                txt_norm,
                x_layers,
                x_norm,
                proj_img,
                proj_txt,
                itm,
                mlm,
                mrc1,
                mrc2,
                bbox,
            },
            r.specs,
        )
    }
}

/// Architecture config plus the parameter table.
#[derive(Debug, Clone)]
pub struct ModelState<T> {
    pub config: ModelConfig,
    pub params: Vec<Param<T>>,
    layout: Layout,
}

impl<T: Scalar> ModelState<T> {
    /// Fresh weights: norms at identity, biases zero, position tables at
    /// sin-cos values (2-D over the patch grid for vision), token embeddings
    /// `N(0, 0.5²)` and every `in × out` matrix `N(0, 1/in)`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = Layout::build(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = specs
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data = if name == "vision.pos" {
                    vision_pos_table(&config).into_iter().map(|v| T::of(v * config.pos_scale)).collect()
                } else if name == "text.pos" {
                    let d = config.d_model;
                    let mut t = vec![0.0; n];
                    for (p, row) in t.chunks_mut(d).enumerate() {
                        sincos(p as f64, row);
                    }
                    t.into_iter().map(|v| T::of(v * config.pos_scale)).collect()
                } else if name.ends_with(".g") {
                    vec![T::one(); n]
                } else if shape.len() == 1 {
                    vec![T::zero(); n]
                } else {
                    let std = if name == "text.tok" { TOKEN_EMBED_STD } else { 1.0 / (shape[0] as f64).sqrt() };
                    let normal = Normal::new(0.0f64, std).expect("valid std");
                    (0..n).map(|_| T::of(normal.sample(&mut rng))).collect()
                };
                Param { name, shape, data }
            })
            .collect();
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    /// Rebuilds a state from a parameter table (names and shapes must match
    /// the layout derived from `config`).
    pub fn from_params(config: ModelConfig, params: Vec<Param<T>>) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = Layout::build(&config);
        if specs.len() != params.len() {
            return Err(Error::Shape(format!(
                "{} tensors, expected {}",
                params.len(),
                specs.len()
            )));
        }
        for ((name, shape), p) in specs.iter().zip(&params) {
            if *name != p.name || *shape != p.shape {
                return Err(Error::Shape(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    p.name, p.shape, name, shape
                )));
            }
            if p.data.len() != shape.iter().product::<usize>() {
                return Err(Error::Shape(format!("tensor {} data length", p.name)));
            }
        }
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    pub fn cast<U: Scalar>(&self) -> ModelState<U> {
        ModelState {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|&v| U::of(v.f64())).collect(),
                })
                .collect(),
            layout: self.layout.clone(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.data.iter().all(|v| v.is_finite()))
    }

    pub fn param_id(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }
}

/// One image for the vision encoder, optionally restricted to a patch mask.
#[derive(Debug, Clone, Copy)]
pub struct ImageInput<'a> {
    pub pixels: &'a [f32],
    pub mask: Option<&'a PatchMask>,
}

/// Encoded batch of token sequences of equal (padded) length.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub var: Var,
    pub batch: usize,
    pub len: usize,
    /// Positions each sequence may attend to.
    pub allowed: Vec<Vec<usize>>,
}

impl Encoded {
    /// Row index of token `pos` in sequence `b`.
    pub fn row(&self, b: usize, pos: usize) -> usize {
        b * self.len + pos
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Image,
    Text,
}

/// Writes `[sin(p·ω_0), cos(p·ω_0), sin(p·ω_1), …]` with geometric
/// frequencies `ω_k = 100^(-2k/len)`. An odd trailing slot stays zero.
fn sincos(p: f64, out: &mut [f64]) {
    let pairs = out.len() / 2;
    for k in 0..pairs {
        let w = num_traits::Float::powf(100.0f64, -(k as f64) / pairs.max(1) as f64);
        out[2 * k] = num_traits::Float::sin(p * w);
        out[2 * k + 1] = num_traits::Float::cos(p * w);
    }
}

/// `[CLS]` row zero, then per patch the row index encoded in the first half
/// of the channels and the column index in the second half.
fn vision_pos_table(c: &ModelConfig) -> Vec<f64> {
    let grid = c.grid();
    let d = c.d_model;
    let mut t = vec![0.0; c.image_tokens() * d];
    for r in 0..grid.rows {
        for col in 0..grid.cols {
            let row = &mut t[(1 + r * grid.cols + col) * d..][..d];
            let (a, b) = row.split_at_mut(d / 2);
            sincos(r as f64, a);
            sincos(col as f64, b);
        }
    }
    t
}

/// Forward-pass builder over one tape.
pub struct Forward<'a, T: Scalar> {
    pub g: Graph<T>,
    pub state: &'a ModelState<T>,
    dropout: Option<ChaCha8Rng>,
}

impl<'a, T: Scalar> Forward<'a, T> {
    /// `dropout_rng = None` evaluates deterministically with dropout off.
    pub fn new(state: &'a ModelState<T>, dropout_rng: Option<ChaCha8Rng>) -> Self {
        Self {
            g: Graph::new(state.params.len()),
            state,
            dropout: dropout_rng,
        }
    }

    fn p(&mut self, id: usize) -> Var {
        let p = &self.state.params[id];
        let (r, c) = p.rows_cols();
        self.g.param(id, &p.data, r, c)
    }

    fn linear(&mut self, x: Var, l: Linear) -> Var {
        let w = self.p(l.w);
        let b = self.p(l.b);
        let y = self.g.matmul(x, w);
        self.g.add_bias(y, b)
    }

    fn norm(&mut self, x: Var, n: Norm) -> Var {
        let g = self.p(n.g);
        let b = self.p(n.b);
        self.g.layer_norm(x, g, b)
    }

    fn drop(&mut self, x: Var) -> Var {
        let p = self.state.config.dropout;
        match self.dropout.as_mut() {
            Some(rng) if p > 0.0 => self.g.dropout(x, p, || rng.random::<f64>()),
            _ => x,
        }
    }

    fn attn_block(
        &mut self,
        h: Var,
        blk: AttnBlock,
        kv_source: Option<Var>,
        layout: AttnLayout,
    ) -> Var {
        let a = self.norm(h, blk.norm);
        let q = self.linear(a, blk.q);
        let src = kv_source.unwrap_or(a);
        let k = self.linear(src, blk.k);
        let v = self.linear(src, blk.v);
        let att = self.g.attention(q, k, v, layout);
        let o = self.linear(att, blk.o);
        let o = self.drop(o);
        self.g.add(h, o)
    }

    fn mlp_block(&mut self, h: Var, blk: MlpBlock) -> Var {
        let a = self.norm(h, blk.norm);
        let m = self.linear(a, blk.fc1);
        let m = self.g.gelu(m);
        let m = self.linear(m, blk.fc2);
        let m = self.drop(m);
        self.g.add(h, m)
    }

    fn self_layout(&self, batch: usize, len: usize, allowed: &[Vec<usize>]) -> AttnLayout {
        AttnLayout {
            batch,
            q_len: len,
            k_len: len,
            heads: self.state.config.n_heads,
            kv_index: None,
            allowed: allowed.to_vec(),
        }
    }

    /// Vision encoder over a batch of images. With a mask, attention in every
    /// layer reads only the `[CLS]` slot and the allowed patches.
    pub fn encode_images(&mut self, images: &[ImageInput<'_>]) -> Result<Encoded> {
        let c = &self.state.config;
        let grid = c.grid();
        let (size, ps) = (c.image_size, c.patch_size);
        let seq = 1 + grid.n_patches();
        let pd = c.patch_dim();
        if images.is_empty() {
            return Err(Error::Empty("image batch"));
        }
        let mut rows = vec![T::zero(); images.len() * seq * pd];
        let mut allowed = Vec::with_capacity(images.len());
        for (b, img) in images.iter().enumerate() {
            if img.pixels.len() != size * size * 3 {
                return Err(Error::Shape(format!(
                    "image has {} values, model expects {}×{}×3",
                    img.pixels.len(),
                    size,
                    size
                )));
            }
            for pr in 0..grid.rows {
                for pc in 0..grid.cols {
                    let slot = 1 + pr * grid.cols + pc;
                    let base = (b * seq + slot) * pd;
                    for py in 0..ps {
                        let y = pr * ps + py;
                        for px in 0..ps {
                            let x = pc * ps + px;
                            let src = (y * size + x) * 3;
                            let dst = base + (py * ps + px) * 3;
                            for ch in 0..3 {
                                rows[dst + ch] = T::of(img.pixels[src + ch] as f64 * 2.0 - 1.0);
                            }
                        }
                    }
                }
            }
            allowed.push(match img.mask {
                Some(m) => {
                    if m.dims() != (grid.rows, grid.cols) {
                        return Err(Error::Shape("patch mask grid differs from model".into()));
                    }
                    m.allowed_slots()
                }
                None => (0..seq).collect(),
            });
        }
        let l = self.state.layout.clone();
        let x = self.g.input(rows, images.len() * seq, pd);
        let mut h = self.linear(x, l.patch);
        let pos = self.p(l.vis_pos);
        h = self.g.add_tiled(h, pos, seq);
        h = self.drop(h);
        for layer in &l.vis_layers {
            let layout = self.self_layout(images.len(), seq, &allowed);
            h = self.attn_block(h, layer.attn, None, layout);
            h = self.mlp_block(h, layer.mlp);
        }
        h = self.norm(h, l.vis_norm);
        Ok(Encoded {
            var: h,
            batch: images.len(),
            len: seq,
            allowed,
        })
    }

    /// Text encoder. Sequences are right-padded with `[PAD]`, which is never
    /// attended to.
    pub fn encode_texts(&mut self, texts: &[&[u32]]) -> Result<Encoded> {
        let c = &self.state.config;
        if texts.is_empty() {
            return Err(Error::Empty("text batch"));
        }
        let len = texts.iter().map(|t| t.len()).max().unwrap_or(0);
        if len == 0 {
            return Err(Error::Empty("empty token sequence"));
        }
        if len > c.max_text_len {
            return Err(Error::Shape(format!(
                "sequence of {len} tokens exceeds {}",
                c.max_text_len
            )));
        }
        let mut ids = Vec::with_capacity(texts.len() * len);
        let mut allowed = Vec::with_capacity(texts.len());
        for t in texts {
            if t.is_empty() {
                return Err(Error::Empty("empty token sequence"));
            }
            for &id in t.iter() {
                if id as usize >= c.vocab_size {
                    return Err(Error::TokenOutOfRange {
                        id,
                        vocab: c.vocab_size,
                    });
                }
            }
            ids.extend_from_slice(t);
            ids.extend(core::iter::repeat_n(PAD, len - t.len()));
            let keep: Vec<usize> = (0..t.len()).filter(|&i| t[i] != PAD).collect();
            allowed.push(if keep.is_empty() { vec![0] } else { keep });
        }
        let l = self.state.layout.clone();
        let table = self.p(l.tok_embed);
        let mut h = self
            .g
            .gather_rows(table, ids.iter().map(|&i| i as usize).collect());
        let pos = self.p(l.txt_pos);
        h = self.g.add_tiled(h, pos, len);
        h = self.drop(h);
        for layer in &l.txt_layers {
            let layout = self.self_layout(texts.len(), len, &allowed);
            h = self.attn_block(h, layer.attn, None, layout);
            h = self.mlp_block(h, layer.mlp);
        }
        h = self.norm(h, l.txt_norm);
        Ok(Encoded {
            var: h,
            batch: texts.len(),
            len,
            allowed,
        })
    }

    /// Cross-modal encoder over `(text index, image index)` pairs.
    pub fn fuse(&mut self, text: &Encoded, image: &Encoded, pairs: &[(usize, usize)]) -> Result<Encoded> {
        if pairs.is_empty() {
            return Err(Error::Empty("fusion pairs"));
        }
        let d = self.state.config.d_model;
        if self.g.shape(text.var).1 != d || self.g.shape(image.var).1 != d {
            return Err(Error::Shape("encoder widths differ from d_model".into()));
        }
        for &(t, i) in pairs {
            if t >= text.batch || i >= image.batch {
                return Err(Error::Shape(format!("pair ({t}, {i}) out of range")));
            }
        }
        let identity = pairs.len() == text.batch && pairs.iter().enumerate().all(|(k, p)| p.0 == k);
        let mut h = if identity {
            text.var
        } else {
            let rows = pairs
                .iter()
                .flat_map(|&(t, _)| (0..text.len).map(move |p| t * text.len + p))
                .collect();
            self.g.gather_rows(text.var, rows)
        };
        let text_allowed: Vec<Vec<usize>> = pairs.iter().map(|&(t, _)| text.allowed[t].clone()).collect();
        let kv_index: Vec<usize> = pairs.iter().map(|&(_, i)| i).collect();
        let l = self.state.layout.clone();
        for layer in &l.x_layers {
            let layout = self.self_layout(pairs.len(), text.len, &text_allowed);
            h = self.attn_block(h, layer.self_attn, None, layout);
            let cross = AttnLayout {
                batch: pairs.len(),
                q_len: text.len,
                k_len: image.len,
                heads: self.state.config.n_heads,
                kv_index: Some(kv_index.clone()),
                allowed: image.allowed.clone(),
            };
            h = self.attn_block(h, layer.cross_attn, Some(image.var), cross);
            h = self.mlp_block(h, layer.mlp);
        }
        h = self.norm(h, l.x_norm);
        Ok(Encoded {
            var: h,
            batch: pairs.len(),
            len: text.len,
            allowed: text_allowed,
        })
    }

    /// Row 0 of every sequence (`batch × d`).
    pub fn cls(&mut self, enc: &Encoded) -> Var {
        let rows = (0..enc.batch).map(|b| b * enc.len).collect();
        self.g.gather_rows(enc.var, rows)
    }

    /// Linear projection then L2 normalization onto the unit sphere.
    pub fn contrastive_embed(&mut self, x: Var, side: Side) -> Result<Var> {
        let l = match side {
            Side::Image => self.state.layout.proj_img,
            Side::Text => self.state.layout.proj_txt,
        };
        let y = self.linear(x, l);
        self.g.l2_normalize(y)
    }

    /// `(match, no-match)` logits per pooled row.
    pub fn itm_logits(&mut self, pooled: Var) -> Var {
        let l = self.state.layout.itm;
        self.linear(pooled, l)
    }

    /// Vocabulary logits at `(sequence, position)` rows of a fused encoding.
    pub fn mlm_logits(&mut self, fused: &Encoded, positions: &[(usize, usize)]) -> Var {
        let rows = positions.iter().map(|&(b, p)| fused.row(b, p)).collect();
        let x = self.g.gather_rows(fused.var, rows);
        let l = self.state.layout.mlm;
        self.linear(x, l)
    }

    /// Two-layer ReLU MLP over `[subject; object]`, `V + 1` outputs.
    pub fn mrc_logits(&mut self, subject: Var, object: Var) -> Var {
        let l = self.state.layout.clone();
        let x = self.g.concat_cols(subject, object);
        let h = self.linear(x, l.mrc1);
        let h = self.g.relu(h);
        self.linear(h, l.mrc2)
    }

    /// Normalized `(cx, cy, w, h)` in `(0, 1)`.
    pub fn bbox(&mut self, pooled: Var) -> Var {
        let l = self.state.layout.bbox;
        let y = self.linear(pooled, l);
        self.g.sigmoid(y)
    }
}

/// Deterministic per-purpose RNG derived from a base seed.
pub fn derive_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        let mut c = ModelConfig::toy(20, 8);
        c.image_size = 16;
        c.patch_size = 4;
        c.d_model = 8;
        c.proj_dim = 4;
        c.mrc_hidden = 6;
        c.max_text_len = 10;
        c
    }

    #[test]
    fn param_count_matches_closed_form() {
        for c in [cfg(), ModelConfig::toy(50, 8), {
            let mut c = cfg();
            c.depth_vision = 2;
            c.depth_xmodal = 3;
            c
        }] {
            let s = ModelState::<f32>::init(c.clone(), 0).unwrap();
            assert_eq!(s.param_count(), c.param_count());
        }
    }

    #[test]
    fn config_validation() {
        let mut c = cfg();
        c.depth_xmodal = 0;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.temperature = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn shapes() {
        let s = ModelState::<f64>::init(cfg(), 1).unwrap();
        let px = vec![0.3f32; 16 * 16 * 3];
        let mut f = Forward::new(&s, None);
        let img = f.encode_images(&[ImageInput { pixels: &px, mask: None }]).unwrap();
        assert_eq!(f.g.shape(img.var), (17, 8));
        let txt = f.encode_texts(&[&[0, 5, 6, 1]]).unwrap();
        assert_eq!(f.g.shape(txt.var), (4, 8));
        let fused = f.fuse(&txt, &img, &[(0, 0)]).unwrap();
        let pooled = f.cls(&fused);
        assert_eq!(f.g.shape(pooled), (1, 8));
        assert_eq!(&f.g.value(pooled)[..], &f.g.value(fused.var)[..8]);
        let itm = f.itm_logits(pooled);
        assert_eq!(f.g.shape(itm), (1, 2));
        let mlm = f.mlm_logits(&fused, &[(0, 0), (0, 1), (0, 2), (0, 3)]);
        assert_eq!(f.g.shape(mlm), (4, 20));
        let mrc = f.mrc_logits(pooled, pooled);
        assert_eq!(f.g.shape(mrc), (1, 9));
        let bb = f.bbox(pooled);
        assert!(f.g.value(bb).iter().all(|&v| v > 0.0 && v < 1.0));
        let zi = f.contrastive_embed(pooled, Side::Image).unwrap();
        let zt = f.contrastive_embed(pooled, Side::Text).unwrap();
        assert_eq!(f.g.shape(zi), f.g.shape(zt));
        let n: f64 = f.g.value(zi).iter().map(|v| v * v).sum();
        assert!((n.sqrt() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_inputs() {
        let s = ModelState::<f32>::init(cfg(), 1).unwrap();
        let mut f = Forward::new(&s, None);
        assert!(f.encode_texts(&[&[0, 99]]).is_err());
        assert!(f.encode_texts(&[&[0; 11]]).is_err());
        let px = vec![0.3f32; 10];
        assert!(f.encode_images(&[ImageInput { pixels: &px, mask: None }]).is_err());
    }

    #[test]
    fn pad_tokens_do_not_change_other_rows() {
        let s = ModelState::<f64>::init(cfg(), 2).unwrap();
        let mut f = Forward::new(&s, None);
        let a = f.encode_texts(&[&[0, 5, 6, 1]]).unwrap();
        let b = f.encode_texts(&[&[0, 5, 6, 1, PAD, PAD]]).unwrap();
        assert_eq!(&f.g.value(a.var)[..32], &f.g.value(b.var)[..32]);
    }

    #[test]
    fn full_mask_is_a_no_op() {
        let s = ModelState::<f32>::init(cfg(), 3).unwrap();
        let px: Vec<f32> = (0..16 * 16 * 3).map(|i| (i % 7) as f32 / 7.0).collect();
        let full = PatchMask::full(&s.config.grid());
        let mut f = Forward::new(&s, None);
        let a = f.encode_images(&[ImageInput { pixels: &px, mask: None }]).unwrap();
        let b = f.encode_images(&[ImageInput { pixels: &px, mask: Some(&full) }]).unwrap();
        assert_eq!(f.g.value(a.var), f.g.value(b.var));
    }
}
