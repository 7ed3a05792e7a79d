//! Patchification, random patch masking and the semantic-integrity estimator.
//!
//! Mask convention: `true` (1) marks a hidden patch, `false` (0) a visible one.
//! The integrity score of sample `i` is `ŵ_i = ⟨φ, M_i⟩`, turned into a
//! relative weight `w_i = exp(softmax(ŵ)_i)` across the batch.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::{Matrix, Tape, Var};

/// H×W×C image stored row-major with the channel innermost.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(invalid(format!(
                "image buffer has {} values, expected {}x{}x{}",
                data.len(),
                height,
                width,
                channels
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn at_mut(&mut self, y: usize, x: usize, c: usize) -> &mut f64 {
        &mut self.data[(y * self.width + x) * self.channels + c]
    }

    /// Zero mean, unit variance over all pixels. A constant image maps to zeros.
    pub fn standardized(&self) -> Image {
        let n = self.data.len() as f64;
        let mean = self.data.iter().sum::<f64>() / n;
        let var = self.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let sd = var.sqrt();
        let data = if sd > 0.0 {
            self.data.iter().map(|v| (v - mean) / sd).collect()
        } else {
            vec![0.0; self.data.len()]
        };
        Image { data, ..*self }
    }
}

/// Patch layout of an image: a `grid_h × grid_w` grid of square patches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchGeometry {
    pub patch_size: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub channels: usize,
}

impl PatchGeometry {
    pub fn num_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn image_height(&self) -> usize {
        self.grid_h * self.patch_size
    }

    pub fn image_width(&self) -> usize {
        self.grid_w * self.patch_size
    }
}

/// An image cut into `P` square patches, one flattened patch per row.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub patch_size: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub channels: usize,
    /// P × (patch_size² · channels)
    pub data: Matrix,
}

impl PatchGrid {
    pub fn num_patches(&self) -> usize {
        self.data.rows()
    }

    pub fn patch_dim(&self) -> usize {
        self.data.cols()
    }

    pub fn geometry(&self) -> PatchGeometry {
        PatchGeometry {
            patch_size: self.patch_size,
            grid_h: self.grid_h,
            grid_w: self.grid_w,
            channels: self.channels,
        }
    }
}

/// Splits `image` into non-overlapping `patch_size`² patches in row-major scan
/// order; each row flattens one patch as (y, x, channel).
pub fn patchify(image: &Image, patch_size: usize) -> Result<PatchGrid> {
    if patch_size == 0 || !image.height.is_multiple_of(patch_size) || !image.width.is_multiple_of(patch_size) {
        return Err(Error::NotDivisible {
            height: image.height,
            width: image.width,
            patch_size,
        });
    }
    let grid_h = image.height / patch_size;
    let grid_w = image.width / patch_size;
    let dim = patch_size * patch_size * image.channels;
    let mut data = Vec::with_capacity(grid_h * grid_w * dim);
    for gy in 0..grid_h {
        for gx in 0..grid_w {
            for py in 0..patch_size {
                for px in 0..patch_size {
                    for c in 0..image.channels {
                        data.push(image.at(gy * patch_size + py, gx * patch_size + px, c));
                    }
                }
            }
        }
    }
    Ok(PatchGrid {
        patch_size,
        grid_h,
        grid_w,
        channels: image.channels,
        data: Matrix::new(grid_h * grid_w, dim, data)?,
    })
}

/// Inverse of [`patchify`].
pub fn unpatchify(grid: &PatchGrid) -> Image {
    let ps = grid.patch_size;
    let mut img = Image::zeros(grid.grid_h * ps, grid.grid_w * ps, grid.channels);
    for k in 0..grid.num_patches() {
        let (gy, gx) = (k / grid.grid_w, k % grid.grid_w);
        let row = grid.data.row(k);
        let mut idx = 0;
        for py in 0..ps {
            for px in 0..ps {
                for c in 0..grid.channels {
                    *img.at_mut(gy * ps + py, gx * ps + px, c) = row[idx];
                    idx += 1;
                }
            }
        }
    }
    img
}

/// Binary per-patch mask; `true` = hidden.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskMatrix {
    pub entries: Vec<bool>,
    pub seed: u64,
}

impl MaskMatrix {
    pub fn from_entries(entries: Vec<bool>) -> Self {
        Self { entries, seed: 0 }
    }

    /// A mask hiding nothing.
    pub fn none(num_patches: usize) -> Self {
        Self::from_entries(vec![false; num_patches])
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn popcount(&self) -> usize {
        self.entries.iter().filter(|&&m| m).count()
    }

    pub fn visible_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.entries[i]).collect()
    }

    pub fn masked_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.entries[i]).collect()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.entries.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()
    }
}

/// Number of patches hidden at ratio `r`: `round(r·P)`.
pub fn masked_count(num_patches: usize, ratio: f64) -> usize {
    (ratio * num_patches as f64).round() as usize
}

/// Hides exactly `round(r·P)` patches chosen uniformly without replacement.
pub fn sample_mask(num_patches: usize, ratio: f64, seed: u64) -> Result<MaskMatrix> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(invalid(format!("mask ratio {ratio} outside [0, 1]")));
    }
    let k = masked_count(num_patches, ratio);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = vec![false; num_patches];
    for i in index::sample(&mut rng, num_patches, k) {
        entries[i] = true;
    }
    Ok(MaskMatrix { entries, seed })
}

/// Visible patches of one image with their original grid positions.
#[derive(Clone, Debug, PartialEq)]
pub struct VisiblePatches {
    /// L × patch_dim, in original scan order.
    pub patches: Matrix,
    /// Original position of each row.
    pub positions: Vec<usize>,
    pub num_patches: usize,
}

/// Keeps the `L = P − popcount(mask)` visible patches.
pub fn apply_mask(grid: &PatchGrid, mask: &MaskMatrix) -> Result<VisiblePatches> {
    if mask.len() != grid.num_patches() {
        return Err(Error::ShapeMismatch {
            op: "apply_mask",
            left: (grid.num_patches(), grid.patch_dim()),
            right: (mask.len(), 1),
        });
    }
    let positions = mask.visible_positions();
    Ok(VisiblePatches {
        patches: grid.data.select_rows(&positions),
        positions,
        num_patches: grid.num_patches(),
    })
}

/// Learnable position-importance vector φ (1×P).
#[derive(Clone, Debug, PartialEq)]
pub struct IntegrityEstimator {
    pub phi: Matrix,
}

impl IntegrityEstimator {
    /// φ = 0, giving uniform weights `exp(1/N)`.
    pub fn new(num_patches: usize) -> Self {
        Self {
            phi: Matrix::zeros(1, num_patches),
        }
    }

    pub fn num_patches(&self) -> usize {
        self.phi.cols()
    }
}

/// Stacks masks into an N×P 0/1 matrix, checking lengths.
pub fn mask_matrix(masks: &[MaskMatrix], num_patches: usize) -> Result<Matrix> {
    if masks.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut data = Vec::with_capacity(masks.len() * num_patches);
    for m in masks {
        if m.len() != num_patches {
            return Err(Error::ShapeMismatch {
                op: "integrity_weights",
                left: (1, num_patches),
                right: (1, m.len()),
            });
        }
        data.extend(m.as_f64());
    }
    Matrix::new(masks.len(), num_patches, data)
}

/// Differentiable integrity weights: returns an N×1 column `w` with
/// `w_i = exp(softmax(M φᵀ)_i)`.
pub fn integrity_weights_on(tape: &Tape, phi: Var, masks: &[MaskMatrix]) -> Result<Var> {
    let (_, p) = tape.shape(phi);
    let m = tape.constant(mask_matrix(masks, p)?);
    let scores = tape.matmul_nt(phi, m); // 1×N
    let probs = tape.softmax_rows(scores);
    let w = tape.exp(probs);
    Ok(tape.transpose(w))
}

/// Relative semantic-integrity weights for a batch of masks.
pub fn integrity_weights(est: &IntegrityEstimator, masks: &[MaskMatrix]) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let phi = tape.constant(est.phi.clone());
    let w = integrity_weights_on(&tape, phi, masks)?;
    Ok(tape.value(w).into_data())
}
