//! Synthetic paired images and reports with known patch-sentence grounding.
//!
//! The image grid is split into four quadrant regions. Pair `i` draws an
//! ordered tuple of distinct concepts; the concept in slot `j` is drawn into
//! region `j` (its prototype, cut into patches, plus Gaussian noise) and
//! described by sentence `j`: two tokens from the concept's synonym pool and
//! a location token naming region `j`. Unused regions hold noise only.
//!
//! Concept prototypes and token pools come from `world_seed`, so datasets
//! with different `seed`s share one concept world.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::ot_align::SentenceSegments;
use crate::patching::{patchify, Image, PatchGrid};

pub const NUM_REGIONS: usize = 4;
pub const SYNONYMS_PER_CONCEPT: usize = 4;
pub const TOKENS_PER_SENTENCE: usize = 3;

const MANIFEST: &str = "manifest.json";
const IMAGES: &str = "images.f64";

/// Generator parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub world_seed: u64,
    pub num_pairs: usize,
    pub num_concepts: usize,
    pub concepts_per_pair: usize,
    pub noise: f64,
    /// Patches per image side; must be even.
    pub grid_side: usize,
    pub patch_size: usize,
}

impl SyntheticSpec {
    /// 16×16 images cut into 4×4 patches with σ = 0.1 noise.
    pub fn new(seed: u64, num_pairs: usize, num_concepts: usize, concepts_per_pair: usize) -> Self {
        Self {
            seed,
            world_seed: 0,
            num_pairs,
            num_concepts,
            concepts_per_pair,
            noise: 0.1,
            grid_side: 4,
            patch_size: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.concepts_per_pair == 0 || self.concepts_per_pair > self.num_concepts {
            return Err(invalid(format!(
                "need num_concepts ({}) >= concepts_per_pair ({}) >= 1",
                self.num_concepts, self.concepts_per_pair
            )));
        }
        if self.concepts_per_pair > NUM_REGIONS {
            return Err(invalid(format!("at most {NUM_REGIONS} concepts fit in one image")));
        }
        if self.grid_side == 0 || !self.grid_side.is_multiple_of(2) || self.patch_size == 0 {
            return Err(invalid("grid_side must be even and patch_size positive"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(invalid(format!("noise must be non-negative, got {}", self.noise)));
        }
        Ok(())
    }

    pub fn image_side(&self) -> usize {
        self.grid_side * self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side * self.grid_side
    }

    /// Synonym tokens of all concepts followed by one location token per region.
    pub fn vocab_size(&self) -> usize {
        self.num_concepts * SYNONYMS_PER_CONCEPT + NUM_REGIONS
    }

    /// Patch indices (row-major) inside region `r`.
    pub fn region_patches(&self, r: usize) -> Vec<usize> {
        let half = self.grid_side / 2;
        let (r0, c0) = ((r / 2) * half, (r % 2) * half);
        (r0..r0 + half)
            .flat_map(|y| (c0..c0 + half).map(move |x| y * self.grid_side + x))
            .collect()
    }
}

/// Generated pairs. `concept_labels` is for evaluation only.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticPairSet {
    pub spec: SyntheticSpec,
    pub images: Vec<Image>,
    pub token_sequences: Vec<Vec<usize>>,
    pub segments: Vec<SentenceSegments>,
    /// Concept in each slot; slot `j` occupies region `j` and sentence `j`.
    pub concept_labels: Vec<Vec<usize>>,
}

/// Region-sized prototype pixels for every concept.
fn prototypes(spec: &SyntheticSpec) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.world_seed);
    rng.set_stream(1);
    let side = spec.image_side() / 2;
    (0..spec.num_concepts)
        .map(|_| (0..side * side).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect()
}

pub fn make_synthetic(spec: &SyntheticSpec) -> Result<SyntheticPairSet> {
    spec.validate()?;
    let protos = prototypes(spec);
    let side = spec.image_side();
    let half = side / 2;
    let noise = (spec.noise > 0.0).then(|| Normal::new(0.0, spec.noise).expect("checked noise"));
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let k = spec.concepts_per_pair;
    let segments = SentenceSegments::new(
        (0..k)
            .map(|j| j * TOKENS_PER_SENTENCE..(j + 1) * TOKENS_PER_SENTENCE)
            .collect(),
    )?;
    let location = spec.num_concepts * SYNONYMS_PER_CONCEPT;

    let mut set = SyntheticPairSet {
        spec: spec.clone(),
        images: Vec::with_capacity(spec.num_pairs),
        token_sequences: Vec::with_capacity(spec.num_pairs),
        segments: vec![segments; spec.num_pairs],
        concept_labels: Vec::with_capacity(spec.num_pairs),
    };
    for _ in 0..spec.num_pairs {
        let concepts = index::sample(&mut rng, spec.num_concepts, k).into_vec();
        let mut image = Image::zeros(side, side, 1);
        let mut tokens = Vec::with_capacity(k * TOKENS_PER_SENTENCE);
        for (j, &c) in concepts.iter().enumerate() {
            let (y0, x0) = ((j / 2) * half, (j % 2) * half);
            for y in 0..half {
                for x in 0..half {
                    *image.at_mut(y0 + y, x0 + x, 0) = protos[c][y * half + x];
                }
            }
            for _ in 0..TOKENS_PER_SENTENCE - 1 {
                tokens.push(c * SYNONYMS_PER_CONCEPT + rng.random_range(0..SYNONYMS_PER_CONCEPT));
            }
            tokens.push(location + j);
        }
        if let Some(dist) = &noise {
            for v in image.data.iter_mut() {
                *v += dist.sample(&mut rng);
            }
        }
        set.images.push(image);
        set.token_sequences.push(tokens);
        set.concept_labels.push(concepts);
    }
    Ok(set)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    spec: SyntheticSpec,
    height: usize,
    width: usize,
    images: String,
    pairs: Vec<PairEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PairEntry {
    tokens: Vec<usize>,
    segments: SentenceSegments,
    concepts: Vec<usize>,
}

impl SyntheticPairSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn patch_grids(&self) -> Result<Vec<PatchGrid>> {
        self.images
            .iter()
            .map(|im| patchify(im, self.spec.patch_size))
            .collect()
    }

    /// Ground-truth (patch, sentence) cells of pair `i`.
    pub fn ground_truth(&self, i: usize) -> Vec<(usize, usize)> {
        (0..self.concept_labels[i].len())
            .flat_map(|j| self.spec.region_patches(j).into_iter().map(move |p| (p, j)))
            .collect()
    }

    /// Writes `manifest.json` and the images as consecutive little-endian
    /// f64 grids in `images.f64`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let side = self.spec.image_side();
        let manifest = Manifest {
            spec: self.spec.clone(),
            height: side,
            width: side,
            images: IMAGES.to_string(),
            pairs: (0..self.len())
                .map(|i| PairEntry {
                    tokens: self.token_sequences[i].clone(),
                    segments: self.segments[i].clone(),
                    concepts: self.concept_labels[i].clone(),
                })
                .collect(),
        };
        serde_json::to_writer_pretty(BufWriter::new(fs::File::create(dir.join(MANIFEST))?), &manifest)?;
        let mut out = BufWriter::new(fs::File::create(dir.join(IMAGES))?);
        for im in &self.images {
            for v in &im.data {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_reader(BufReader::new(fs::File::open(dir.join(MANIFEST))?))?;
        let mut bytes = Vec::new();
        fs::File::open(dir.join(&manifest.images))?.read_to_end(&mut bytes)?;
        let per_image = manifest.height * manifest.width;
        if bytes.len() != 8 * per_image * manifest.pairs.len() {
            return Err(Error::Format(format!(
                "{} holds {} bytes, expected {}",
                manifest.images,
                bytes.len(),
                8 * per_image * manifest.pairs.len()
            )));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let mut set = SyntheticPairSet {
            spec: manifest.spec,
            images: Vec::with_capacity(manifest.pairs.len()),
            token_sequences: Vec::with_capacity(manifest.pairs.len()),
            segments: Vec::with_capacity(manifest.pairs.len()),
            concept_labels: Vec::with_capacity(manifest.pairs.len()),
        };
        for (i, pair) in manifest.pairs.into_iter().enumerate() {
            let data = values[i * per_image..(i + 1) * per_image].to_vec();
            set.images.push(Image::new(manifest.height, manifest.width, 1, data)?);
            pair.segments.validate(pair.tokens.len())?;
            set.token_sequences.push(pair.tokens);
            set.segments.push(pair.segments);
            set.concept_labels.push(pair.concepts);
        }
        Ok(set)
    }
}
