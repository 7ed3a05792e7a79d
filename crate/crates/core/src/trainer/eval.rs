use serde::{Deserialize, Serialize};

use crate::encoders::{pool_image, Bound};
use crate::error::{Error, Result};
use crate::numerics::{cosine_similarity, Matrix, Tape};
use crate::ot_align::{aggregate_sentences, cost_matrix, ipot, IpotConfig};
use crate::patching::{MaskMatrix, VisiblePatches};

use super::data::SyntheticPairSet;
use super::model::Mlip;

/// Pairs encoded per tape during evaluation.
const CHUNK: usize = 64;

/// Top-1 retrieval accuracy in both directions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Retrieval {
    pub top1_v2t: f64,
    pub top1_t2v: f64,
}

/// Unmasked encoder outputs of one pair.
#[derive(Clone, Debug)]
pub struct PairFeatures {
    pub image_global: Vec<f64>,
    pub text_global: Vec<f64>,
    /// P×D local patch features.
    pub image_local: Matrix,
    /// S×D sentence features.
    pub sentences: Matrix,
}

/// Encodes every pair of `data` with all patches visible.
pub fn encode_pairs(model: &Mlip, data: &SyntheticPairSet) -> Result<Vec<PairFeatures>> {
    let grids = data.patch_grids()?;
    let mut out = Vec::with_capacity(data.len());
    for start in (0..data.len()).step_by(CHUNK) {
        let tape = Tape::new();
        let vars = model.params.bind(&tape);
        let b = Bound::new(&tape, &vars);
        for i in start..(start + CHUNK).min(data.len()) {
            let p = grids[i].num_patches();
            let visible = VisiblePatches {
                patches: grids[i].data.clone(),
                positions: MaskMatrix::none(p).visible_positions(),
                num_patches: p,
            };
            let vf = model.net.image.forward(b, &visible)?;
            let tf = model.net.text.forward(b, &data.token_sequences[i])?;
            let image_global = tape.value(pool_image(&tape, vf)).into_data();
            let text_global = tape.value(model.net.text.pool(b, tf)).into_data();
            let vf = tape.value(vf);
            let tf = tape.value(tf);
            let t = data.token_sequences[i].len();
            let sentences = aggregate_sentences(&tf.select_rows(&(1..=t).collect::<Vec<_>>()), &data.segments[i])?;
            out.push(PairFeatures {
                image_global,
                text_global,
                image_local: vf.select_rows(&(1..=p).collect::<Vec<_>>()),
                sentences,
            });
        }
    }
    Ok(out)
}

fn argmax(row: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (j, v) in row.enumerate() {
        if v > best.1 {
            best = (j, v);
        }
    }
    best.0
}

/// Top-1 accuracy from an N×N similarity matrix whose diagonal holds the true pairs.
pub fn top1_from_similarity(sim: &Matrix) -> Retrieval {
    let n = sim.rows();
    let v2t = (0..n).filter(|&i| argmax(sim.row(i).iter().copied()) == i).count();
    let t2v = (0..n).filter(|&j| argmax((0..n).map(|i| sim.get(i, j))) == j).count();
    Retrieval {
        top1_v2t: v2t as f64 / n as f64,
        top1_t2v: t2v as f64 / n as f64,
    }
}

/// Ranks all texts for each image (and vice versa) by cosine similarity of
/// unmasked global embeddings.
pub fn eval_retrieval(model: &Mlip, data: &SyntheticPairSet) -> Result<Retrieval> {
    if data.is_empty() {
        return Err(Error::EmptyInput);
    }
    let feats = encode_pairs(model, data)?;
    let n = feats.len();
    let mut sim = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            sim.set(i, j, cosine_similarity(&feats[i].image_global, &feats[j].text_global)?);
        }
    }
    Ok(top1_from_similarity(&sim))
}

/// Plan mass that IPOT places on `cells` for the given local features.
pub fn alignment_mass(
    image_local: &Matrix,
    sentences: &Matrix,
    cells: &[(usize, usize)],
    cfg: &IpotConfig,
) -> Result<f64> {
    let plan = ipot(&cost_matrix(image_local, sentences)?, cfg)?;
    Ok(cells.iter().map(|&(p, s)| plan.gamma.get(p, s)).sum())
}

/// Mean plan mass on ground-truth (patch, sentence) cells over the dataset.
pub fn eval_alignment(model: &Mlip, data: &SyntheticPairSet, cfg: &IpotConfig) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyInput);
    }
    let feats = encode_pairs(model, data)?;
    let mut total = 0.0;
    for (i, f) in feats.iter().enumerate() {
        total += alignment_mass(&f.image_local, &f.sentences, &data.ground_truth(i), cfg)?;
    }
    Ok(total / feats.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::{make_synthetic, SyntheticSpec, TrainConfig};

    #[test]
    fn top1_counts() {
        let sim = Matrix::from_rows(&[[0.9, 0.1, 0.0], [0.2, 0.1, 0.5], [0.0, 0.3, 0.8]]).unwrap();
        let r = top1_from_similarity(&sim);
        assert!((r.top1_v2t - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.top1_t2v - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn single_pair_is_perfect() {
        let cfg = TrainConfig::micro();
        let model = Mlip::new(cfg.model_config(), 0).unwrap();
        let data = make_synthetic(&SyntheticSpec {
            num_pairs: 1,
            ..cfg.train_spec()
        })
        .unwrap();
        let r = eval_retrieval(&model, &data).unwrap();
        assert_eq!((r.top1_v2t, r.top1_t2v), (1.0, 1.0));
    }

    #[test]
    fn untrained_retrieval_is_near_chance() {
        let cfg = TrainConfig {
            dim: 32,
            ..TrainConfig::desk()
        };
        let model = Mlip::new(cfg.model_config(), 1).unwrap();
        let data = make_synthetic(&SyntheticSpec {
            num_pairs: 100,
            ..cfg.eval_spec()
        })
        .unwrap();
        let r = eval_retrieval(&model, &data).unwrap();
        let bound = 0.01 + 3.0 * (0.01f64 * 0.99 / 100.0).sqrt();
        assert!(r.top1_v2t <= bound && r.top1_t2v <= bound, "{r:?}");
    }

    #[test]
    fn uniform_features_give_ground_truth_fraction() {
        let cfg = TrainConfig::desk();
        let data = make_synthetic(&SyntheticSpec {
            num_pairs: 1,
            ..cfg.train_spec()
        })
        .unwrap();
        let cells = data.ground_truth(0);
        let mass = alignment_mass(
            &Matrix::filled(16, 4, 1.0),
            &Matrix::filled(3, 4, 1.0),
            &cells,
            &IpotConfig::default(),
        )
        .unwrap();
        assert!((mass - cells.len() as f64 / 48.0).abs() < 1e-12);
    }
}
