//! End-to-end behaviour of the training loop, evaluation and checkpoints.

mod common;

use mlip::numerics::Matrix;
use mlip::ot_align::IpotConfig;
use mlip::trainer::{
    alignment_mass, check_gradients, eval_alignment, eval_retrieval, load_checkpoint, make_synthetic, save_checkpoint,
    train, DataConfig, MetricRecord, SyntheticSpec, TrainConfig,
};

fn small() -> TrainConfig {
    TrainConfig {
        dim: 16,
        depth: 1,
        batch_size: 8,
        epochs: 3,
        lr: 3e-3,
        data: DataConfig {
            train_pairs: 64,
            eval_pairs: 16,
            num_concepts: 6,
            concepts_per_pair: 2,
            noise: 0.1,
            world_seed: 0,
        },
        ..TrainConfig::desk()
    }
}

#[test]
fn micro_gradients_match_finite_differences() {
    let report = check_gradients(&TrainConfig::micro(), 1e-5).unwrap();
    for prefix in ["image.", "text.", "text.pooler", "decoder.", "integrity.phi"] {
        assert!(
            report.params.iter().any(|p| p.name.starts_with(prefix)),
            "{prefix} missing"
        );
    }
    for p in &report.params {
        assert!(p.max_rel_error < 1e-4, "{}: {:e}", p.name, p.max_rel_error);
    }
}

#[test]
fn training_lowers_the_objective() {
    let cfg = TrainConfig { epochs: 6, ..small() };
    let data = make_synthetic(&cfg.train_spec()).unwrap();
    let held = make_synthetic(&cfg.eval_spec()).unwrap();
    let mut records = Vec::new();
    let out = train(&cfg, &data, Some(&held), &mut |r| records.push(r.clone())).unwrap();
    assert_eq!(records, out.metrics);
    let totals: Vec<f64> = out
        .metrics
        .iter()
        .filter_map(|m| match m {
            MetricRecord::Epoch { losses, .. } => Some(losses.total),
            _ => None,
        })
        .collect();
    assert_eq!(totals.len(), 6);
    assert!(totals[5] < totals[0], "{totals:?}");
}

#[test]
fn checkpoint_preserves_evaluation() {
    let cfg = TrainConfig { epochs: 1, ..small() };
    let data = make_synthetic(&cfg.train_spec()).unwrap();
    let held = make_synthetic(&cfg.eval_spec()).unwrap();
    let out = train(&cfg, &data, None, &mut |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &out.model, Some(&cfg)).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    assert_eq!(ck.train.as_ref(), Some(&cfg));
    assert_eq!(ck.model.params.values(), out.model.params.values());
    assert_eq!(
        eval_retrieval(&ck.model, &held).unwrap(),
        eval_retrieval(&out.model, &held).unwrap()
    );
    let ipot = cfg.ipot();
    assert_eq!(
        eval_alignment(&ck.model, &held, &ipot).unwrap(),
        eval_alignment(&out.model, &held, &ipot).unwrap()
    );
}

/// With one patch per region, features that put every concept on its own
/// axis must reach the largest ground-truth mass any feasible plan allows.
#[test]
fn perfect_features_reach_the_transport_optimum() {
    for slots in 1..=4 {
        let spec = SyntheticSpec {
            grid_side: 2,
            ..SyntheticSpec::new(3, 1, 6, slots)
        };
        let data = make_synthetic(&spec).unwrap();
        let cells = data.ground_truth(0);
        let p = spec.num_patches();
        let dim = 5;
        // Background patches point along an axis no sentence uses.
        let image = Matrix::from_fn(p, dim, |i, k| {
            let slot = cells.iter().find(|c| c.0 == i).map_or(4, |c| c.1);
            if k == slot {
                1.0
            } else {
                0.0
            }
        });
        let sentences = Matrix::from_fn(slots, dim, |j, k| if k == j { 1.0 } else { 0.0 });
        let cfg = IpotConfig {
            outer_iters: 500,
            tol: 0.0,
            ..IpotConfig::default()
        };
        let mass = alignment_mass(&image, &sentences, &cells, &cfg).unwrap();
        let gain: Vec<Vec<f64>> = (0..p)
            .map(|i| {
                (0..slots)
                    .map(|j| if cells.contains(&(i, j)) { -1.0 } else { 0.0 })
                    .collect()
            })
            .collect();
        let best = -common::transport_lp(&gain, &vec![1.0 / p as f64; p], &vec![1.0 / slots as f64; slots]);
        assert!((mass - best).abs() < 1e-3, "{slots} slots: {mass} vs {best}");
        assert!(mass > cells.len() as f64 / (p * slots) as f64 || slots == 1);
    }
}
