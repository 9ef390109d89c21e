mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{dataset, five_node_instance, small_spec, small_train_config, tiny_config};
use setn::checkpoint::{decode_model, encode_model, load_model, save_model, FORMAT_VERSION, MAGIC};
use setn::graph::GnnKind;
use setn::model::SetnModel;
use setn::params::Module;
use setn::text_encoder::{TokenSequence, TrainPolicy};
use setn::trainer::{build_model, embed_stocks, split_dataset, train, TrainConfig};
use setn::SetnError;

fn model(kind: GnnKind) -> SetnModel {
    SetnModel::init(tiny_config(kind, TrainPolicy::LastBlockOnly), &mut ChaCha8Rng::seed_from_u64(21)).unwrap()
}

#[test]
fn header_layout() {
    let bytes = encode_model(&model(GnnKind::Gcn), &TrainConfig::default());
    assert_eq!(&bytes[..4], MAGIC);
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), FORMAT_VERSION);
    let json_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let meta: serde_json::Value = serde_json::from_slice(&bytes[16..16 + json_len]).unwrap();
    assert_eq!(meta["model"]["gnn"], "gcn");
    assert_eq!(meta["train"]["epochs"], 20);
}

#[test]
fn round_trip_is_bit_identical() {
    for kind in [GnnKind::Gcn, GnnKind::Gat, GnnKind::None] {
        let m = model(kind);
        let config = TrainConfig { seed: 77, ..TrainConfig::default() };
        let (back, train) = decode_model(&encode_model(&m, &config), None).unwrap();
        assert_eq!(back, m);
        assert_eq!(train, config);
        let (sub, docs) = five_node_instance();
        let tokens: Vec<&TokenSequence> = docs.iter().collect();
        let a = m.embed_stock(&sub, &tokens, None).unwrap();
        let b = back.embed_stock(&sub, &tokens, None).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn trained_model_survives_disk() {
    let data = dataset(&small_spec(11));
    let config = TrainConfig { epochs: 1, ..small_train_config(11) };
    let ids: Vec<usize> = (0..data.len()).collect();
    let split = split_dataset(&ids, config.split, config.seed).unwrap();
    let mut m = build_model(&data, &config).unwrap();
    train(&mut m, &data, &split, &config).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_model(&m, &config, &path).unwrap();
    let (back, _) = load_model(&path, Some(GnnKind::Gcn)).unwrap();
    assert_eq!(back.parameter_hash(), m.parameter_hash());
    let trainable: Vec<bool> = m.parameters().iter().map(|p| p.trainable()).collect();
    assert_eq!(back.parameters().iter().map(|p| p.trainable()).collect::<Vec<_>>(), trainable);
    let a = embed_stocks(&m, &data, &data.graph, config.neighborhood, &ids).unwrap();
    let b = embed_stocks(&back, &data, &data.graph, config.neighborhood, &ids).unwrap();
    assert_eq!(a, b);
}

#[test]
fn truncation_and_corruption_are_detected() {
    let bytes = encode_model(&model(GnnKind::Gcn), &TrainConfig::default());
    for cut in [0, 3, 20, bytes.len() / 2, bytes.len() - 1] {
        match decode_model(&bytes[..cut], None) {
            Err(SetnError::Checkpoint(_)) => {}
            other => panic!("cut at {cut}: {other:?}"),
        }
    }
    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x40;
    assert!(matches!(decode_model(&flipped, None), Err(SetnError::Checkpoint(_))));
    let mut wrong_magic = bytes;
    wrong_magic[0] = b'X';
    assert!(matches!(decode_model(&wrong_magic, None), Err(SetnError::Checkpoint(_))));
}

#[test]
fn kind_mismatch_is_explicit() {
    let bytes = encode_model(&model(GnnKind::Gcn), &TrainConfig::default());
    match decode_model(&bytes, Some(GnnKind::Gat)) {
        Err(SetnError::KindMismatch { expected, found }) => {
            assert_eq!(expected, "gat");
            assert_eq!(found, "gcn");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn missing_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_model(&dir.path().join("absent"), None), Err(SetnError::Io { .. })));
}
