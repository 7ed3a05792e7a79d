//! Tiny dual transformer encoders with a [CLS] row, global pooling, and a
//! shallow decoder that reconstructs every patch from the visible ones.
//!
//! Image tokens receive position embeddings indexed by their original grid
//! position, so a masked image keeps its geometry. The image embedding is the
//! mean over all output rows ([CLS] included); the text embedding is a
//! linear+tanh pooler applied to the [CLS] row.

mod layers;

pub use layers::{Block, Bound, LayerNorm, Linear};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::{Matrix, ParamId, ParamStore, Tape, Var};
use crate::ot_align::SentenceSegments;
use crate::patching::{MaskMatrix, PatchGeometry, PatchGrid, VisiblePatches};
use layers::normal;

const EMBED_STD: f64 = 0.1;
const TOKEN_STD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub depth: usize,
    pub heads: usize,
    pub dim: usize,
    pub mlp_ratio: f64,
    /// Text only; ignored by the image encoder.
    pub vocab_size: usize,
    pub max_positions: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(invalid(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.max_positions == 0 || !(self.mlp_ratio > 0.0) {
            return Err(invalid("max_positions and mlp_ratio must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

impl Modality {
    fn name(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Text => "text",
        }
    }
}

/// Encoder output: row 0 is [CLS], rows 1.. are local token features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub tokens: Matrix,
    pub modality: Modality,
    /// Original position of each local row (visible patch positions for images).
    pub index_map: Vec<usize>,
    pub segments: Option<SentenceSegments>,
}

impl FeatureSet {
    /// Local rows without [CLS].
    pub fn local(&self) -> Matrix {
        let idx: Vec<usize> = (1..self.tokens.rows()).collect();
        self.tokens.select_rows(&idx)
    }
}

fn bind(params: &ParamStore) -> (Tape, Vec<Var>) {
    let tape = Tape::new();
    let vars = params.bind(&tape);
    (tape, vars)
}

#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub num_patches: usize,
    pub patch_dim: usize,
    patch_embed: Linear,
    pos_embed: ParamId,
    cls: ParamId,
    blocks: Vec<Block>,
    norm: LayerNorm,
}

impl ImageEncoder {
    pub fn new(
        store: &mut ParamStore,
        cfg: &EncoderConfig,
        geometry: PatchGeometry,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let (num_patches, patch_dim) = (geometry.num_patches(), geometry.patch_dim());
        if num_patches > cfg.max_positions {
            return Err(invalid("image encoder needs max_positions >= num_patches"));
        }
        Ok(Self {
            num_patches,
            patch_dim,
            patch_embed: Linear::new(store, "image.patch_embed", patch_dim, cfg.dim, rng),
            pos_embed: store.add("image.pos_embed", normal(rng, num_patches, cfg.dim, EMBED_STD)),
            cls: store.add("image.cls", normal(rng, 1, cfg.dim, EMBED_STD)),
            blocks: (0..cfg.depth)
                .map(|i| {
                    Block::new(
                        store,
                        &format!("image.block{i}"),
                        cfg.dim,
                        cfg.heads,
                        cfg.mlp_ratio,
                        rng,
                    )
                })
                .collect(),
            norm: LayerNorm::new(store, "image.norm", cfg.dim),
        })
    }

    /// (L+1)×D features for the visible patches.
    pub fn forward(&self, b: Bound, visible: &VisiblePatches) -> Result<Var> {
        let t = b.tape;
        let l = visible.patches.rows();
        if l == 0 {
            return Err(Error::NoVisiblePatches);
        }
        if visible.patches.cols() != self.patch_dim {
            return Err(Error::ShapeMismatch {
                op: "encode_image",
                left: (l, self.patch_dim),
                right: visible.patches.shape(),
            });
        }
        if visible.positions.len() != l || visible.positions.iter().any(|&p| p >= self.num_patches) {
            return Err(invalid("visible patch positions inconsistent with the encoder grid"));
        }
        let x = t.constant(visible.patches.clone());
        let e = self.patch_embed.forward(b, x);
        let pos = t.gather_rows(b.var(self.pos_embed), &visible.positions);
        let mut h = t.concat_rows(&[b.var(self.cls), t.add(e, pos)]);
        for block in &self.blocks {
            h = block.forward(b, h);
        }
        Ok(self.norm.forward(b, h))
    }

    pub fn encode(&self, params: &ParamStore, visible: &VisiblePatches) -> Result<FeatureSet> {
        let (tape, vars) = bind(params);
        let out = self.forward(Bound::new(&tape, &vars), visible)?;
        Ok(FeatureSet {
            tokens: tape.value(out),
            modality: Modality::Image,
            index_map: visible.positions.clone(),
            segments: None,
        })
    }
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub vocab_size: usize,
    pub max_positions: usize,
    token_embed: ParamId,
    pos_embed: ParamId,
    cls: ParamId,
    blocks: Vec<Block>,
    norm: LayerNorm,
    pooler: Linear,
}

impl TextEncoder {
    pub fn new(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        if cfg.vocab_size == 0 {
            return Err(invalid("text encoder needs a nonempty vocabulary"));
        }
        Ok(Self {
            vocab_size: cfg.vocab_size,
            max_positions: cfg.max_positions,
            token_embed: store.add("text.token_embed", normal(rng, cfg.vocab_size, cfg.dim, TOKEN_STD)),
            pos_embed: store.add("text.pos_embed", normal(rng, cfg.max_positions, cfg.dim, EMBED_STD)),
            cls: store.add("text.cls", normal(rng, 1, cfg.dim, EMBED_STD)),
            blocks: (0..cfg.depth)
                .map(|i| Block::new(store, &format!("text.block{i}"), cfg.dim, cfg.heads, cfg.mlp_ratio, rng))
                .collect(),
            norm: LayerNorm::new(store, "text.norm", cfg.dim),
            pooler: Linear::new(store, "text.pooler", cfg.dim, cfg.dim, rng),
        })
    }

    pub fn pooler(&self) -> &Linear {
        &self.pooler
    }

    /// (T+1)×D features for the token ids.
    pub fn forward(&self, b: Bound, ids: &[usize]) -> Result<Var> {
        let t = b.tape;
        if ids.is_empty() {
            return Err(Error::EmptyInput);
        }
        if ids.len() > self.max_positions {
            return Err(invalid(format!(
                "{} tokens exceed max_positions {}",
                ids.len(),
                self.max_positions
            )));
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= self.vocab_size) {
            return Err(Error::OutOfVocabulary {
                id,
                vocab_size: self.vocab_size,
            });
        }
        let tok = t.gather_rows(b.var(self.token_embed), ids);
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pos = t.gather_rows(b.var(self.pos_embed), &positions);
        let mut h = t.concat_rows(&[b.var(self.cls), t.add(tok, pos)]);
        for block in &self.blocks {
            h = block.forward(b, h);
        }
        Ok(self.norm.forward(b, h))
    }

    /// `tanh(W·[CLS] + b)` as a 1×D row.
    pub fn pool(&self, b: Bound, features: Var) -> Var {
        let t = b.tape;
        let cls = t.gather_rows(features, &[0]);
        t.tanh(self.pooler.forward(b, cls))
    }

    pub fn encode(&self, params: &ParamStore, ids: &[usize], segments: &SentenceSegments) -> Result<FeatureSet> {
        segments.validate(ids.len())?;
        let (tape, vars) = bind(params);
        let out = self.forward(Bound::new(&tape, &vars), ids)?;
        Ok(FeatureSet {
            tokens: tape.value(out),
            modality: Modality::Text,
            index_map: (0..ids.len()).collect(),
            segments: Some(segments.clone()),
        })
    }
}

/// Mean over all rows of image features, as a 1×D row.
pub fn pool_image(tape: &Tape, features: Var) -> Var {
    tape.mean_rows(features)
}

#[derive(Clone, Debug)]
pub struct ImageDecoder {
    geometry: PatchGeometry,
    num_patches: usize,
    embed: Linear,
    mask_token: ParamId,
    pos_embed: ParamId,
    blocks: Vec<Block>,
    norm: LayerNorm,
    head: Linear,
}

impl ImageDecoder {
    pub fn new(
        store: &mut ParamStore,
        cfg: &EncoderConfig,
        geometry: PatchGeometry,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let (num_patches, patch_dim) = (geometry.num_patches(), geometry.patch_dim());
        Ok(Self {
            geometry,
            num_patches,
            embed: Linear::new(store, "decoder.embed", cfg.dim, cfg.dim, rng),
            mask_token: store.add("decoder.mask_token", normal(rng, 1, cfg.dim, EMBED_STD)),
            pos_embed: store.add("decoder.pos_embed", normal(rng, num_patches, cfg.dim, EMBED_STD)),
            blocks: (0..cfg.depth)
                .map(|i| {
                    Block::new(
                        store,
                        &format!("decoder.block{i}"),
                        cfg.dim,
                        cfg.heads,
                        cfg.mlp_ratio,
                        rng,
                    )
                })
                .collect(),
            norm: LayerNorm::new(store, "decoder.norm", cfg.dim),
            head: Linear::new(store, "decoder.head", cfg.dim, patch_dim, rng),
        })
    }

    /// P×patch_dim reconstruction from (L+1)×D image features whose local
    /// rows sit at `positions`; all other positions start from the mask token.
    pub fn forward(&self, b: Bound, features: Var, positions: &[usize]) -> Result<Var> {
        let t = b.tape;
        let (rows, _) = t.shape(features);
        if rows != positions.len() + 1 {
            return Err(invalid("decoder positions do not match feature rows"));
        }
        let local_idx: Vec<usize> = (1..rows).collect();
        let z = if local_idx.is_empty() {
            None
        } else {
            Some(self.embed.forward(b, t.gather_rows(features, &local_idx)))
        };
        let l = positions.len();
        let mut slot = vec![l; self.num_patches];
        for (k, &p) in positions.iter().enumerate() {
            if p >= self.num_patches {
                return Err(invalid(format!("patch position {p} out of range")));
            }
            slot[p] = k;
        }
        let pool = match z {
            Some(z) => t.concat_rows(&[z, b.var(self.mask_token)]),
            None => b.var(self.mask_token),
        };
        let mut h = t.add(t.gather_rows(pool, &slot), b.var(self.pos_embed));
        for block in &self.blocks {
            h = block.forward(b, h);
        }
        Ok(self.head.forward(b, self.norm.forward(b, h)))
    }
}

/// Architecture of the image encoder, text encoder and decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub geometry: PatchGeometry,
    pub image: EncoderConfig,
    pub text: EncoderConfig,
    pub decoder: EncoderConfig,
}

/// Image encoder, text encoder (with pooler) and reconstruction decoder.
#[derive(Clone, Debug)]
pub struct DualEncoder {
    pub image: ImageEncoder,
    pub text: TextEncoder,
    pub decoder: ImageDecoder,
}

impl DualEncoder {
    /// Registers all weights in `store` under the `image.`, `text.` and `decoder.` prefixes.
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            image: ImageEncoder::new(store, &cfg.image, cfg.geometry, rng)?,
            text: TextEncoder::new(store, &cfg.text, rng)?,
            decoder: ImageDecoder::new(store, &cfg.decoder, cfg.geometry, rng)?,
        })
    }

    /// Global embedding `v̄` (image) or `t̄` (text) of an encoder output.
    pub fn pool_global(&self, params: &ParamStore, f: &FeatureSet) -> Result<Vec<f64>> {
        if f.tokens.rows() < 2 {
            return Err(match f.modality {
                Modality::Image => Error::NoVisiblePatches,
                Modality::Text => Error::EmptyInput,
            });
        }
        match f.modality {
            Modality::Image => Ok(f
                .tokens
                .col_sums()
                .into_iter()
                .map(|s| s / f.tokens.rows() as f64)
                .collect()),
            Modality::Text => {
                let (tape, vars) = bind(params);
                let x = tape.constant(f.tokens.clone());
                let p = self.text.pool(Bound::new(&tape, &vars), x);
                Ok(tape.value(p).into_data())
            }
        }
    }

    /// Reconstructs all `P` patches from image features.
    pub fn decode_image(&self, params: &ParamStore, f: &FeatureSet, mask: &MaskMatrix) -> Result<PatchGrid> {
        if f.modality != Modality::Image {
            return Err(Error::ModalityMismatch {
                expected: Modality::Image.name(),
                found: f.modality.name(),
            });
        }
        if mask.len() != self.decoder.num_patches || mask.visible_positions() != f.index_map {
            return Err(invalid("mask is inconsistent with the feature index map"));
        }
        let (tape, vars) = bind(params);
        let x = tape.constant(f.tokens.clone());
        let out = self.decoder.forward(Bound::new(&tape, &vars), x, &f.index_map)?;
        let g = self.decoder.geometry;
        Ok(PatchGrid {
            patch_size: g.patch_size,
            grid_h: g.grid_h,
            grid_w: g.grid_w,
            channels: g.channels,
            data: tape.value(out),
        })
    }
}
