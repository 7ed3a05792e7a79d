use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoders::Bound;
use crate::error::{invalid, Error, Result};
use crate::numerics::{finite_diff_check, GradCheckReport, Matrix, Tape};
use crate::patching::{sample_mask, PatchGrid};

use super::config::TrainConfig;
use super::data::{make_synthetic, SyntheticPairSet};
use super::eval::eval_retrieval;
use super::model::{batch_objective, LossBundle, LossSettings, Mlip, PlanMode, Sample, WeightStats};
use super::optim::Adam;

/// Pairs used for per-epoch retrieval when no held-out set is given.
const DEFAULT_EVAL_PAIRS: usize = 128;

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MetricRecord {
    Step {
        step: usize,
        epoch: usize,
        lr: f64,
        losses: LossBundle,
    },
    Epoch {
        epoch: usize,
        lr: f64,
        /// Mean of the step losses; weight stats are min/mean/max over steps.
        losses: LossBundle,
        top1_v2t: f64,
        top1_t2v: f64,
    },
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub model: Mlip,
    pub metrics: Vec<MetricRecord>,
}

/// SplitMix64 finalizer folded over `parts`.
pub(crate) fn mix(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// Seed of the mask for sample `sample` of `step` in `epoch`.
pub fn mask_seed(seed: u64, epoch: usize, step: usize, sample: usize) -> u64 {
    mix(&[seed, 1, epoch as u64, step as u64, sample as u64])
}

fn check_data(config: &TrainConfig, data: &SyntheticPairSet, grids: &[PatchGrid]) -> Result<()> {
    let g = config.geometry();
    if let Some(grid) = grids.iter().find(|grid| grid.geometry() != g) {
        return Err(invalid(format!(
            "dataset patch layout {:?} does not match the model {:?}",
            grid.geometry(),
            g
        )));
    }
    let vocab = config.vocab_size();
    if let Some(&id) = data.token_sequences.iter().flatten().find(|&&id| id >= vocab) {
        return Err(Error::OutOfVocabulary { id, vocab_size: vocab });
    }
    Ok(())
}

fn mean_bundle(steps: &[LossBundle]) -> LossBundle {
    let n = steps.len().max(1) as f64;
    let sum = |f: fn(&LossBundle) -> f64| steps.iter().map(f).sum::<f64>() / n;
    LossBundle {
        l_v2t: sum(|b| b.l_v2t),
        l_t2v: sum(|b| b.l_t2v),
        l_spm: sum(|b| b.l_spm),
        l_mip: sum(|b| b.l_mip),
        total: sum(|b| b.total),
        w_stats: WeightStats {
            min: steps.iter().map(|b| b.w_stats.min).fold(f64::INFINITY, f64::min),
            mean: sum(|b| b.w_stats.mean),
            max: steps.iter().map(|b| b.w_stats.max).fold(f64::NEG_INFINITY, f64::max),
        },
    }
}

/// Trains a fresh model on `data`.
///
/// Each epoch shuffles the pairs, draws a new mask per sample, and takes one
/// Adam step per batch. `held_out` (or the first 128 training pairs) is used
/// for the per-epoch retrieval metrics. Every record is passed to `on_record`
/// as it is produced.
pub fn train(
    config: &TrainConfig,
    data: &SyntheticPairSet,
    held_out: Option<&SyntheticPairSet>,
    on_record: &mut dyn FnMut(&MetricRecord),
) -> Result<TrainOutput> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput);
    }
    let grids = data.patch_grids()?;
    check_data(config, data, &grids)?;
    let probe_storage;
    let probe = match held_out {
        Some(h) => h,
        None => {
            let mut p = data.clone();
            let n = data.len().min(DEFAULT_EVAL_PAIRS);
            p.images.truncate(n);
            p.token_sequences.truncate(n);
            p.segments.truncate(n);
            p.concept_labels.truncate(n);
            probe_storage = p;
            &probe_storage
        }
    };

    let mut model = Mlip::new(config.model_config(), config.seed)?;
    let settings = LossSettings::from(config);
    let mut opt = Adam::new(&model.params);
    let p = config.geometry().num_patches();
    let mut metrics = Vec::new();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;

    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(&[config.seed, 0, epoch as u64])));
        let mut bundles = Vec::new();
        for batch in order.chunks(config.batch_size) {
            let samples = batch
                .iter()
                .enumerate()
                .map(|(k, &i)| {
                    Ok(Sample {
                        grid: &grids[i],
                        tokens: &data.token_sequences[i],
                        segments: &data.segments[i],
                        mask: sample_mask(p, config.mask_ratio, mask_seed(config.seed, epoch, step, k))?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let tape = Tape::new();
            let vars = model.params.bind(&tape);
            let fwd = batch_objective(
                Bound::new(&tape, &vars),
                &model,
                &samples,
                &settings,
                PlanMode::Solve,
                step,
            )?;
            let mut grads = tape.backward(fwd.total);
            let grads: Vec<Matrix> = vars
                .iter()
                .zip(model.params.values())
                .map(|(&v, value)| {
                    grads
                        .take(v)
                        .unwrap_or_else(|| Matrix::zeros(value.rows(), value.cols()))
                })
                .collect();
            opt.step(&mut model.params, &grads, lr);
            let record = MetricRecord::Step {
                step,
                epoch,
                lr,
                losses: fwd.bundle,
            };
            on_record(&record);
            metrics.push(record);
            bundles.push(fwd.bundle);
            step += 1;
        }
        let r = eval_retrieval(&model, probe)?;
        let losses = mean_bundle(&bundles);
        info!(
            "epoch {epoch}: total {:.4} v2t {:.4} t2v {:.4} spm {:.4} mip {:.4} top1 {:.3}/{:.3}",
            losses.total, losses.l_v2t, losses.l_t2v, losses.l_spm, losses.l_mip, r.top1_v2t, r.top1_t2v
        );
        let record = MetricRecord::Epoch {
            epoch,
            lr,
            losses,
            top1_v2t: r.top1_v2t,
            top1_t2v: r.top1_t2v,
        };
        on_record(&record);
        metrics.push(record);
    }
    Ok(TrainOutput { model, metrics })
}

/// Finite-difference check of the full objective on one batch of `config`'s
/// training data, with transport plans frozen at the unperturbed point.
///
/// φ is drawn at random first so the integrity weights are not uniform.
pub fn check_gradients(config: &TrainConfig, eps: f64) -> Result<GradCheckReport> {
    config.validate()?;
    let data = make_synthetic(&config.train_spec())?;
    let grids = data.patch_grids()?;
    check_data(config, &data, &grids)?;
    let mut model = Mlip::new(config.model_config(), config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[config.seed, 2]));
    let normal = Normal::new(0.0, 0.5).expect("valid std");
    model
        .params
        .get_mut(model.phi)
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = normal.sample(&mut rng));

    let p = config.geometry().num_patches();
    let n = config.batch_size.min(data.len());
    let samples = (0..n)
        .map(|i| {
            Ok(Sample {
                grid: &grids[i],
                tokens: &data.token_sequences[i],
                segments: &data.segments[i],
                mask: sample_mask(p, config.mask_ratio, mask_seed(config.seed, 0, 0, i))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let settings = LossSettings::from(config);
    let plans = {
        let tape = Tape::new();
        let vars = model.params.bind(&tape);
        batch_objective(
            Bound::new(&tape, &vars),
            &model,
            &samples,
            &settings,
            PlanMode::Solve,
            0,
        )?
        .plans
    };
    let objective = |tape: &Tape, vars: &[crate::numerics::Var]| {
        let fwd = batch_objective(
            Bound::new(tape, vars),
            &model,
            &samples,
            &settings,
            PlanMode::Fixed(&plans),
            0,
        )?;
        Ok(fwd.total)
    };
    finite_diff_check(objective, &model.params, eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::config::{ContrastiveMode, DataConfig, LossToggles};
    use crate::trainer::SyntheticSpec;

    fn tiny() -> TrainConfig {
        TrainConfig {
            dim: 16,
            depth: 1,
            heads: 2,
            batch_size: 8,
            epochs: 2,
            lr: 3e-3,
            data: DataConfig {
                train_pairs: 32,
                eval_pairs: 16,
                num_concepts: 6,
                concepts_per_pair: 2,
                noise: 0.1,
                world_seed: 0,
            },
            ..TrainConfig::desk()
        }
    }

    fn run(cfg: &TrainConfig) -> TrainOutput {
        let data = make_synthetic(&cfg.train_spec()).unwrap();
        train(cfg, &data, None, &mut |_| {}).unwrap()
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let cfg = TrainConfig { epochs: 0, ..tiny() };
        let out = run(&cfg);
        assert!(out.metrics.is_empty());
        let init = Mlip::new(cfg.model_config(), cfg.seed).unwrap();
        assert_eq!(out.model.params.values(), init.params.values());
    }

    #[test]
    fn deterministic_metrics() {
        let a = run(&tiny());
        let b = run(&tiny());
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.model.params.values(), b.model.params.values());
        let steps = a
            .metrics
            .iter()
            .filter(|m| matches!(m, MetricRecord::Step { .. }))
            .count();
        assert_eq!(steps, 8);
        let lrs: Vec<f64> = a
            .metrics
            .iter()
            .filter_map(|m| match m {
                MetricRecord::Epoch { lr, .. } => Some(*lr),
                _ => None,
            })
            .collect();
        assert_eq!(lrs, vec![3e-3, 3e-3 * (1.0 - 0.5 * 0.9)]);
    }

    #[test]
    fn disabled_terms_report_zero_and_leave_weights_untouched() {
        let cfg = TrainConfig {
            losses: LossToggles::MIP_ONLY,
            epochs: 1,
            ..tiny()
        };
        let out = run(&cfg);
        let init = Mlip::new(cfg.model_config(), cfg.seed).unwrap();
        for m in &out.metrics {
            if let MetricRecord::Step { losses, .. } = m {
                assert_eq!((losses.l_v2t, losses.l_t2v, losses.l_spm), (0.0, 0.0, 0.0));
                assert_eq!(losses.total, losses.l_mip);
            }
        }
        for (id, name, value) in out.model.params.iter() {
            let untouched = name.starts_with("text.") || name == "integrity.phi";
            assert_eq!(untouched, value == init.params.get(id), "{name}");
        }
    }

    #[test]
    fn plain_contrastive_ignores_phi() {
        let cfg = TrainConfig {
            losses: LossToggles {
                contrastive: ContrastiveMode::Plain,
                spm: true,
                mip: false,
            },
            epochs: 1,
            ..tiny()
        };
        let out = run(&cfg);
        assert_eq!(out.model.integrity().phi, Matrix::zeros(1, 16));
        let weighted = run(&TrainConfig {
            losses: LossToggles::ALL,
            ..cfg
        });
        assert_ne!(weighted.model.integrity().phi, Matrix::zeros(1, 16));
    }

    #[test]
    fn mip_only_reconstruction_error_decreases() {
        let cfg = TrainConfig {
            losses: LossToggles::MIP_ONLY,
            epochs: 4,
            batch_size: 16,
            data: DataConfig {
                train_pairs: 256,
                ..tiny().data
            },
            ..tiny()
        };
        let out = run(&cfg);
        let mip: Vec<f64> = out
            .metrics
            .iter()
            .filter_map(|m| match m {
                MetricRecord::Epoch { losses, .. } => Some(losses.l_mip),
                _ => None,
            })
            .collect();
        assert!(mip.windows(2).all(|w| w[1] < w[0]), "{mip:?}");
    }

    #[test]
    fn rejects_mismatched_data() {
        let cfg = tiny();
        let other = make_synthetic(&SyntheticSpec {
            grid_side: 2,
            ..cfg.train_spec()
        })
        .unwrap();
        assert!(train(&cfg, &other, None, &mut |_| {}).is_err());
        let empty = make_synthetic(&SyntheticSpec {
            num_pairs: 0,
            ..cfg.train_spec()
        })
        .unwrap();
        assert!(matches!(train(&cfg, &empty, None, &mut |_| {}), Err(Error::EmptyInput)));
    }

    #[test]
    fn metrics_serialize_as_tagged_lines() {
        let out = run(&TrainConfig { epochs: 1, ..tiny() });
        let line = serde_json::to_string(&out.metrics[0]).unwrap();
        assert!(line.starts_with("{\"kind\":\"step\""), "{line}");
        let back: MetricRecord = serde_json::from_str(&line).unwrap();
        assert_eq!(back, out.metrics[0]);
    }

    #[test]
    fn mask_seeds_differ() {
        let a = mask_seed(0, 0, 0, 0);
        assert_ne!(a, mask_seed(0, 0, 0, 1));
        assert_ne!(a, mask_seed(0, 0, 1, 0));
        assert_ne!(a, mask_seed(0, 1, 0, 0));
        assert_ne!(a, mask_seed(1, 0, 0, 0));
    }
}
