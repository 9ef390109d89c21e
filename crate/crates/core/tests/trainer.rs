mod common;

use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{dataset, small_spec, small_train_config};
use setn::data_io::SyntheticSpec;
use setn::graph::{sample_subgraph, GnnKind};
use setn::numerics::{Tape, Tensor};
use setn::params::Module;
use setn::text_encoder::{TokenSequence, TrainPolicy};
use setn::trainer::{build_model, embed_stocks, epoch_order, split_dataset, train, TrainConfig};
use setn::SetnError;

#[test]
fn split_sizes_match_the_reference_universe() {
    let ids: Vec<usize> = (0..2437).collect();
    let s = split_dataset(&ids, [0.6996, 0.0997, 0.2007], 0).unwrap();
    assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (1705, 243, 489));

    let ten: Vec<usize> = (0..10).collect();
    let s = split_dataset(&ten, [0.7, 0.1, 0.2], 3).unwrap();
    assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (7, 1, 2));
}

#[test]
fn split_is_a_seeded_partition() {
    let ids: Vec<usize> = (100..400).collect();
    let a = split_dataset(&ids, [0.7, 0.1, 0.2], 9).unwrap();
    let b = split_dataset(&ids, [0.7, 0.1, 0.2], 9).unwrap();
    assert_eq!(a, b);
    let c = split_dataset(&ids, [0.7, 0.1, 0.2], 10).unwrap();
    assert_ne!(a, c);
    let all: HashSet<usize> = a.train.iter().chain(&a.validation).chain(&a.test).copied().collect();
    assert_eq!(all.len(), ids.len());
    assert_eq!(all, ids.iter().copied().collect());
}

#[test]
fn split_rejects_degenerate_input() {
    assert!(split_dataset(&[], [0.7, 0.1, 0.2], 0).is_err());
    assert!(split_dataset(&[1, 2, 3], [0.7, 0.1, 0.2], 0).is_err());
    assert!(split_dataset(&[1, 2, 3, 4], [0.5, 0.5, 0.1], 0).is_err());
    assert!(split_dataset(&[1, 2, 3, 4], [1.0, 0.0, 0.0], 0).is_err());
}

#[test]
fn epoch_order_depends_only_on_seed_and_epoch() {
    let train: Vec<usize> = (0..50).collect();
    assert_eq!(epoch_order(&train, 4, 2), epoch_order(&train, 4, 2));
    assert_ne!(epoch_order(&train, 4, 2), epoch_order(&train, 4, 3));
    let mut sorted = epoch_order(&train, 4, 2);
    sorted.sort_unstable();
    assert_eq!(sorted, train);
}

#[test]
fn default_training_settings() {
    let c = TrainConfig::default();
    assert_eq!(c.epochs, 20);
    assert_eq!(c.learning_rate, 0.001);
    assert_eq!(c.dropout, 0.2);
    assert_eq!(c.pooling, setn::text_encoder::Pooling::Mean);
    assert_eq!(c.hops, 1);
    assert_eq!(c.max_tokens, 512);
    assert_eq!(c.loss, setn::trainer::LossScope::TargetOnly);
    assert_eq!(c.split, [0.7, 0.1, 0.2]);
}

#[test]
fn fixed_seed_training_is_bit_identical() {
    let data = dataset(&small_spec(1));
    let config = TrainConfig { epochs: 2, ..small_train_config(1) };
    let ids: Vec<usize> = (0..data.len()).collect();
    let split = split_dataset(&ids, config.split, config.seed).unwrap();
    let run = || {
        let mut m = build_model(&data, &config).unwrap();
        let logs = train(&mut m, &data, &split, &config).unwrap();
        (m.parameter_hash(), logs)
    };
    let (h1, l1) = run();
    let (h2, l2) = run();
    assert_eq!(h1, h2);
    assert_eq!(l1, l2);
}

#[test]
fn loss_falls_on_separable_data() {
    let spec = SyntheticSpec {
        text_signal: 1.0,
        graph_signal: 1.0,
        ..small_spec(2)
    };
    let data = dataset(&spec);
    let config = TrainConfig {
        epochs: 20,
        encoder_train: TrainPolicy::All,
        ..small_train_config(2)
    };
    let ids: Vec<usize> = (0..data.len()).collect();
    let split = split_dataset(&ids, config.split, config.seed).unwrap();
    let mut m = build_model(&data, &config).unwrap();
    let logs = train(&mut m, &data, &split, &config).unwrap();
    assert_eq!(logs.len(), 20);
    assert!(logs[4].mean_loss < logs[0].mean_loss);
    let (first, last) = (logs[0].mean_loss, logs[19].mean_loss);
    assert!(last < 0.25 * first, "loss {first} -> {last}");
}

#[test]
fn frozen_blocks_never_move() {
    let data = dataset(&small_spec(3));
    for policy in [TrainPolicy::LastBlockOnly, TrainPolicy::None] {
        let config = TrainConfig {
            epochs: 1,
            encoder_train: policy,
            ..small_train_config(3)
        };
        let ids: Vec<usize> = (0..data.len()).collect();
        let split = split_dataset(&ids, config.split, config.seed).unwrap();
        let mut m = build_model(&data, &config).unwrap();
        let before: Vec<(String, bool, Vec<u64>)> = m
            .parameters()
            .iter()
            .map(|p| (p.name.clone(), p.trainable(), p.value.data().iter().map(|v| v.to_bits()).collect()))
            .collect();
        train(&mut m, &data, &split, &config).unwrap();
        let mut frozen = 0;
        for (p, (name, trainable, bits)) in m.parameters().iter().zip(&before) {
            let now: Vec<u64> = p.value.data().iter().map(|v| v.to_bits()).collect();
            if !trainable {
                frozen += 1;
                assert_eq!(&now, bits, "{name} moved under {policy:?}");
            }
        }
        assert!(frozen > 0);
        // The heads always learn.
        assert_ne!(m.parameters().last().unwrap().value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), before.last().unwrap().2);
    }
}

#[test]
fn loss_reads_only_the_target() {
    let data = dataset(&small_spec(4));
    let config = TrainConfig {
        dropout: 0.0,
        ..small_train_config(4)
    };
    let model = build_model(&data, &config).unwrap();
    let target = (0..data.len()).find(|&t| data.graph.in_neighbors(t).len() >= 2).unwrap();
    let sub = sample_subgraph(&data.graph, target).unwrap();
    let tokens: Vec<&TokenSequence> = sub.members.iter().map(|&m| &data.tokens[m]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut tape = Tape::new();
    let (vars, leaves) = model.bind(&mut tape);
    let out = model.forward(&mut tape, &vars, &sub, &tokens, false, &mut rng, None).unwrap();
    let r = &data.records[target];
    let loss = setn::model::compute_loss(&mut tape, &out, r.sector, r.industry).unwrap();

    // Rebuild the loss from the target embedding alone.
    let h: Vec<f64> = tape.value(out.embedding).iter().map(|v| v.max(0.0)).collect();
    let logits = |w: &Tensor, b: &Tensor| -> Vec<f64> {
        (0..b.numel())
            .map(|c| h.iter().enumerate().map(|(k, x)| x * w.get2(k, c)).sum::<f64>() + b.data()[c])
            .collect()
    };
    let ce = |z: Vec<f64>, y: usize| {
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - z[y]
    };
    let manual = ce(logits(&model.sector_head.0.value, &model.sector_head.1.value), r.sector)
        + ce(logits(&model.industry_head.0.value, &model.industry_head.1.value), r.industry);
    assert!((tape.item(loss) - manual).abs() < 1e-10);

    // Neighbors still receive gradient through the GNN weights.
    tape.backward(loss).unwrap();
    let gnn_weight = model.parameters().iter().position(|p| p.name.starts_with("gnn.")).unwrap();
    assert!(tape.grad(leaves[gnn_weight]).unwrap().iter().any(|&g| g != 0.0));
}

#[test]
fn evaluation_leaves_parameters_untouched() {
    let data = dataset(&small_spec(5));
    let config = small_train_config(5);
    let model = build_model(&data, &config).unwrap();
    let before = model.parameter_hash();
    let ids: Vec<usize> = (0..data.len()).collect();
    let a = embed_stocks(&model, &data, &data.graph, config.neighborhood, &ids).unwrap();
    let b = embed_stocks(&model, &data, &data.graph, config.neighborhood, &ids).unwrap();
    assert_eq!(model.parameter_hash(), before);
    assert_eq!(a, b);
}

#[test]
fn non_finite_loss_aborts_with_location() {
    let data = dataset(&small_spec(6));
    let config = TrainConfig {
        epochs: 1,
        gnn: GnnKind::None,
        ..small_train_config(6)
    };
    let ids: Vec<usize> = (0..data.len()).collect();
    let split = split_dataset(&ids, config.split, config.seed).unwrap();
    let mut m = build_model(&data, &config).unwrap();
    let n = m.sector_head.1.value.numel();
    let bias: Vec<f64> = (0..n).map(|c| if c == 0 { 1e308 } else { -1e308 }).collect();
    m.sector_head.1.value = Tensor::vector(bias).unwrap().tracked();
    let first = epoch_order(&split.train, config.seed, 0)
        .into_iter()
        .find(|&t| data.records[t].sector != 0)
        .unwrap();
    match train(&mut m, &data, &split, &config) {
        Err(SetnError::NonFiniteLoss { epoch, target }) => {
            assert_eq!(epoch, 0);
            assert_eq!(target, first);
        }
        other => panic!("expected a non-finite loss, got {other:?}"),
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let data = dataset(&small_spec(7));
    for bad in [
        TrainConfig { hops: 2, ..TrainConfig::default() },
        TrainConfig { max_tokens: 0, ..TrainConfig::default() },
        TrainConfig { learning_rate: 0.0, ..TrainConfig::default() },
        TrainConfig { split: [0.5, 0.2, 0.2], ..TrainConfig::default() },
    ] {
        assert!(bad.validate().is_err());
        assert!(build_model(&data, &bad).is_err());
    }
}
