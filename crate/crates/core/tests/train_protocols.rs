//! Training protocols that need real optimization runs: the single-sequence
//! overfit sanity check and the trained-vs-untrained comparison.

use cyclegraph_core::dataset::{generate_dataset, load_dataset, DatasetSpec, Split};
use cyclegraph_core::encoding::{build_code, EncodingConfig};
use cyclegraph_core::model::{load_checkpoint, CycleNet};
use cyclegraph_core::trainer::{evaluate, masked_loss, train, TrainConfig};

/// Overfit protocol: one sequence, T = 8, 16x16, 500 steps reaches a final
/// training loss below 0.02. The final loss is evaluated exactly, over every
/// (frame, residual time) pair, at the final parameters.
#[test]
fn overfit_single_sequence() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let spec = DatasetSpec {
        count: 1,
        width: 16,
        height: 16,
        period: 8,
        seed: 1,
    };
    generate_dataset(&spec, &data).unwrap();
    let ds = load_dataset(&data, None).unwrap();
    assert_eq!(ds.sequences.len(), 1);

    // 500 steps is the protocol's budget; a large batch with a hotter rate
    // converges well inside it on a single sequence
    let mut cfg = TrainConfig::desk(7);
    cfg.steps = 500;
    cfg.batch_size = 32;
    cfg.learning_rate = 5e-3;
    let out = dir.path().join("run");
    let report = train(&ds, &cfg, &out).unwrap();
    assert_eq!(report.loss_curve.len(), 500);

    let (params, config) = load_checkpoint(&out.join("checkpoint.ckpt")).unwrap();
    let net = CycleNet { config, params };
    let seq = &ds.sequences[0];
    let enc = EncodingConfig::new(8, cfg.harmonics).unwrap();
    let mut total = 0.0f64;
    let mut count = 0usize;
    for t in 0..8u32 {
        for dt in -4i64..=4 {
            let code = build_code(dt as f64, &enc, &seq.wind).unwrap();
            let raw = net
                .forward_raw(&seq.frames[t as usize].to_tensor(), &code.to_tensor(1))
                .unwrap();
            let target = seq.frames[(t as i64 + dt).rem_euclid(8) as usize].to_tensor();
            total += masked_loss(&raw, &target, &seq.mask, cfg.lambda_unit).unwrap();
            count += 1;
        }
    }
    let final_loss = total / count as f64;
    assert!(
        final_loss < 0.02,
        "overfit final training loss {} over 0.02",
        final_loss
    );
    // loss curve should show real optimization, not a flat line
    assert!(report.loss_curve[0] > 3.0 * final_loss);
}

/// An untrained network scores strictly worse than a (briefly) trained one
/// on the same held-out split.
#[test]
fn untrained_scores_worse_than_trained() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let spec = DatasetSpec {
        count: 8,
        width: 16,
        height: 16,
        period: 6,
        seed: 77,
    };
    generate_dataset(&spec, &data).unwrap();
    let train_set = load_dataset(&data, Some(Split::Train)).unwrap();
    let test_set = load_dataset(&data, Some(Split::Test)).unwrap();

    let mut cfg = TrainConfig::desk(13);
    cfg.steps = 300;
    cfg.batch_size = 4;
    let out = dir.path().join("run");
    train(&train_set, &cfg, &out).unwrap();
    let (params, config) = load_checkpoint(&out.join("checkpoint.ckpt")).unwrap();
    let trained = CycleNet { config, params };
    let untrained = CycleNet::init(cfg.model.clone(), 4242).unwrap();

    let e_trained = evaluate(&trained, &test_set, Split::Test, cfg.harmonics).unwrap();
    let e_untrained = evaluate(&untrained, &test_set, Split::Test, cfg.harmonics).unwrap();
    assert!(
        e_trained.masked_mae < e_untrained.masked_mae,
        "trained {} not better than untrained {}",
        e_trained.masked_mae,
        e_untrained.masked_mae
    );

    // evaluation aggregates are invariant to sequence ordering
    let mut reversed = test_set.clone();
    reversed.sequences.reverse();
    let e_rev = evaluate(&trained, &reversed, Split::Test, cfg.harmonics).unwrap();
    assert!((e_rev.masked_mae - e_trained.masked_mae).abs() < 1e-12);
    assert!((e_rev.metrics.mae - e_trained.metrics.mae).abs() < 1e-12);
}
