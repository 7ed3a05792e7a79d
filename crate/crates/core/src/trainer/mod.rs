//! Composite objective, synthetic paired data, the training loop, and
//! retrieval and alignment evaluation.
//!
//! The total loss is `λ1·L_v2t + λ2·L_t2v + λ3·L_spm + λ4·L_mip` over the
//! enabled terms. Learning rate decays linearly per epoch from `lr` to `lr/10`.

mod checkpoint;
mod config;
mod data;
mod eval;
mod model;
mod optim;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{ContrastiveMode, DataConfig, LossToggles, TrainConfig};
pub use data::{
    make_synthetic, SyntheticPairSet, SyntheticSpec, NUM_REGIONS, SYNONYMS_PER_CONCEPT, TOKENS_PER_SENTENCE,
};
pub use eval::{
    alignment_mass, encode_pairs, eval_alignment, eval_retrieval, top1_from_similarity, PairFeatures, Retrieval,
};
pub use model::{
    batch_objective, total_loss, BatchForward, LossBundle, LossSettings, Mlip, PlanMode, Sample, WeightStats,
    TERM_NAMES,
};
pub use optim::Adam;
pub use train::{check_gradients, mask_seed, train, MetricRecord, TrainOutput};
