//! Masked image prediction loss: mean squared error over the entries of
//! masked patches only.

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Tape, Var};
use crate::patching::{MaskMatrix, PatchGrid};

/// Original patches, their reconstruction and the mask used to hide them.
#[derive(Clone, Debug)]
pub struct ReconstructionPair {
    pub original: PatchGrid,
    pub reconstructed: PatchGrid,
    pub mask: MaskMatrix,
}

fn check(original: (usize, usize), reconstructed: (usize, usize), mask: &MaskMatrix) -> Result<()> {
    if original != reconstructed {
        return Err(Error::ShapeMismatch {
            op: "mip_loss",
            left: original,
            right: reconstructed,
        });
    }
    if mask.len() != original.0 {
        return Err(Error::ShapeMismatch {
            op: "mip_loss mask",
            left: original,
            right: (mask.len(), 1),
        });
    }
    Ok(())
}

/// Differentiable loss; `reconstructed` is a P×patch_dim node, `original` a
/// constant target. Returns a constant zero when nothing is masked.
pub fn mip_loss_on(tape: &Tape, original: &Matrix, reconstructed: Var, mask: &MaskMatrix) -> Result<Var> {
    check(original.shape(), tape.shape(reconstructed), mask)?;
    let masked = mask.masked_positions();
    if masked.is_empty() {
        return Ok(tape.constant(Matrix::scalar(0.0)));
    }
    let target = tape.constant(original.select_rows(&masked));
    let pred = tape.gather_rows(reconstructed, &masked);
    Ok(tape.mse(pred, target))
}

pub fn mip_loss(pair: &ReconstructionPair) -> Result<f64> {
    let tape = Tape::new();
    let r = tape.constant(pair.reconstructed.data.clone());
    let l = mip_loss_on(&tape, &pair.original.data, r, &pair.mask)?;
    Ok(tape.scalar(l))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(data: Matrix) -> PatchGrid {
        PatchGrid {
            patch_size: 1,
            grid_h: 1,
            grid_w: data.rows(),
            channels: data.cols(),
            data,
        }
    }

    #[test]
    fn examples() {
        let x = Matrix::from_fn(3, 4, |i, j| (i * 4 + j) as f64);
        let mask = MaskMatrix::from_entries(vec![false, true, false]);
        let same = ReconstructionPair {
            original: grid(x.clone()),
            reconstructed: grid(x.clone()),
            mask: mask.clone(),
        };
        assert_eq!(mip_loss(&same).unwrap(), 0.0);

        let off = ReconstructionPair {
            original: grid(x.clone()),
            reconstructed: grid(x.map(|v| v + 2.0)),
            mask: MaskMatrix::none(3),
        };
        assert_eq!(mip_loss(&off).unwrap(), 0.0);

        let off = ReconstructionPair { mask, ..off };
        assert_eq!(mip_loss(&off).unwrap(), 4.0);
    }

    #[test]
    fn shape_mismatch() {
        let pair = ReconstructionPair {
            original: grid(Matrix::zeros(3, 2)),
            reconstructed: grid(Matrix::zeros(3, 3)),
            mask: MaskMatrix::none(3),
        };
        assert!(mip_loss(&pair).is_err());
        let pair = ReconstructionPair {
            original: grid(Matrix::zeros(3, 2)),
            reconstructed: grid(Matrix::zeros(3, 2)),
            mask: MaskMatrix::none(2),
        };
        assert!(mip_loss(&pair).is_err());
    }
}
