#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use setn::data_io::{generate_synthetic, SyntheticSpec};
use setn::evaluator::{map_at_k, EmbeddingMatrix};
use setn::graph::GnnKind;
use setn::model::ModelConfig;
use setn::text_encoder::{Pooling, TrainPolicy};
use setn::trainer::{build_model, embed_stocks, split_dataset, train, Dataset, TrainConfig};

pub fn gaussian_rows(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect()
}

pub fn random_matrix(n: usize, d: usize, seed: u64) -> EmbeddingMatrix {
    let ids = (0..n).map(|i| format!("S{i:04}")).collect();
    EmbeddingMatrix::new(ids, gaussian_rows(n, d, seed)).unwrap()
}

pub fn tiny_config(gnn: GnnKind, encoder_train: TrainPolicy) -> ModelConfig {
    ModelConfig {
        vocab_size: 12,
        hidden_dim: 4,
        encoder_layers: 2,
        ff_dim: 6,
        gnn,
        gnn_layers: 1,
        residual: true,
        dropout: 0.0,
        pooling: Pooling::Mean,
        encoder_train,
        sector_classes: 3,
        industry_classes: 4,
    }
}

pub fn dataset(spec: &SyntheticSpec) -> Dataset {
    let ds = generate_synthetic(spec).unwrap();
    Dataset::new(ds.records, ds.graph, ds.taxonomy, &ds.vocab, 512).unwrap()
}

/// Small universe that trains in well under a second per epoch.
pub fn small_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        n: 60,
        sector_classes: 4,
        industry_classes: 8,
        vocab_size: 200,
        tokens_per_doc: 10,
        theme_count: 2,
        theme_size: 8,
        seed,
        ..SyntheticSpec::default()
    }
}

pub fn small_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        epochs: 3,
        hidden_dim: 16,
        ff_dim: 32,
        ..TrainConfig::default()
    }
}

/// Trains on `spec` with `config` and returns the sector MAP@5 on the test split.
pub fn test_map5_sector(spec: &SyntheticSpec, config: &TrainConfig) -> f64 {
    let data = dataset(spec);
    let ids: Vec<usize> = (0..data.len()).collect();
    let split = split_dataset(&ids, config.split, config.seed).unwrap();
    let mut model = build_model(&data, config).unwrap();
    train(&mut model, &data, &split, config).unwrap();
    let graph = data.message_graph(config.directed);
    let e = embed_stocks(&model, &data, &graph, config.neighborhood, &split.test).unwrap();
    map_at_k(&e, &data.sector_labels(&split.test), &[5]).unwrap()[0]
}

use setn::graph::Subgraph;
use setn::model::{compute_loss, SetnModel};
use setn::numerics::{Tape, Tensor, Var};
use setn::params::Module;
use setn::text_encoder::TokenSequence;

/// Five stocks: target 0 with in-edges from 1, 2, 3 and an edge 3 -> 4
/// outside the target's neighborhood.
pub fn five_node_instance() -> (Subgraph, Vec<TokenSequence>) {
    let sub = Subgraph {
        target: 0,
        members: vec![0, 1, 2, 3, 4],
        edges: vec![(1, 0), (2, 0), (3, 0), (4, 3)],
    };
    let docs = [
        vec![2, 3, 4, 5],
        vec![2, 6, 7],
        vec![2, 8, 3, 9, 10],
        vec![2, 11],
        vec![2, 4, 4, 6],
    ];
    (sub, docs.iter().map(|d| TokenSequence::new(d.clone()).unwrap()).collect())
}

fn loss_at(model: &SetnModel, params: &[Tensor], sub: &Subgraph, tokens: &[&TokenSequence], labels: (usize, usize)) -> (Tape, Vec<Var>, Var) {
    let mut tape = Tape::new();
    let leaves: Vec<Var> = params.iter().map(|p| tape.leaf(p)).collect();
    let vars = model.vars_from(&leaves);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = model
        .forward(&mut tape, &vars, sub, tokens, false, &mut rng, None)
        .unwrap();
    let loss = compute_loss(&mut tape, &out, labels.0, labels.1).unwrap();
    (tape, leaves, loss)
}

/// Largest relative disagreement between analytic and central-difference
/// gradients of the full loss over every trainable entry. Entries where
/// both gradients are below `1e-6` in magnitude are compared absolutely,
/// since a relative error between two round-off residues is meaningless.
/// Returns `(max error, entries checked)`.
pub fn model_gradient_error(model: &SetnModel, sub: &Subgraph, docs: &[TokenSequence], labels: (usize, usize)) -> (f64, usize) {
    let tokens: Vec<&TokenSequence> = docs.iter().collect();
    let params: Vec<Tensor> = model.parameters().iter().map(|p| p.value.clone()).collect();
    let (mut tape, leaves, loss) = loss_at(model, &params, sub, &tokens, labels);
    tape.backward(loss).unwrap();
    let analytic: Vec<Option<Vec<f64>>> = leaves.iter().map(|&v| tape.grad(v).map(<[f64]>::to_vec)).collect();

    let h = 1e-5;
    let mut work = params.clone();
    let (mut worst, mut checked) = (0.0f64, 0usize);
    for (pi, p) in params.iter().enumerate() {
        if !p.requires_grad() {
            assert!(analytic[pi].as_ref().is_none_or(|g| g.iter().all(|&x| x == 0.0)));
            continue;
        }
        for ei in 0..p.numel() {
            let orig = p.data()[ei];
            work[pi].set(ei, orig + h).unwrap();
            let (t, _, l) = loss_at(model, &work, sub, &tokens, labels);
            let plus = t.item(l);
            work[pi].set(ei, orig - h).unwrap();
            let (t, _, l) = loss_at(model, &work, sub, &tokens, labels);
            let minus = t.item(l);
            work[pi].set(ei, orig).unwrap();
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[pi].as_ref().map_or(0.0, |g| g[ei]);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
            checked += 1;
        }
    }
    (worst, checked)
}

/// Direct transcription of MAP@K: cosine from raw rows, stable sort by
/// descending similarity then row index, precision summed at relevant
/// ranks and divided by min(K, R).
pub fn brute_force_map(rows: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
    let n = rows.len();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let unit: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|x| x / norm(r)).collect()).collect();
    let mut total = 0.0;
    for q in 0..n {
        let mut others: Vec<(usize, f64)> = (0..n)
            .filter(|&j| j != q)
            .map(|j| (j, unit[q].iter().zip(&unit[j]).map(|(a, b)| a * b).sum()))
            .collect();
        others.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let r = (0..n).filter(|&j| j != q && labels[j] == labels[q]).count();
        if r == 0 {
            continue;
        }
        let mut hits = 0.0;
        let mut ap = 0.0;
        for (rank, (j, _)) in others.iter().take(k).enumerate() {
            if labels[*j] == labels[q] {
                hits += 1.0;
                ap += hits / (rank + 1) as f64;
            }
        }
        total += ap / k.min(r) as f64;
    }
    total / n as f64
}

/// Dense reference: relu(N H W + b).
pub fn dense_gcn(sub: &Subgraph, h: &[Vec<f64>], w: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = sub.len();
    let mut a = vec![vec![0.0; n]; n];
    for (i, row) in a.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for &(s, d) in &sub.edges {
        a[d][s] = 1.0;
    }
    let deg: Vec<f64> = a.iter().map(|r| r.iter().sum()).collect();
    let dout = w[0].len();
    let mut out = Vec::new();
    for i in 0..n {
        for c in 0..dout {
            let mut v = b[c];
            for j in 0..n {
                let norm = a[i][j] / (deg[i] * deg[j]).sqrt();
                for (k, hk) in h[j].iter().enumerate() {
                    v += norm * hk * w[k][c];
                }
            }
            out.push(v.max(0.0));
        }
    }
    out
}

/// Dense GAT reference with the same parameter layout.
pub fn dense_gat(sub: &Subgraph, h: &[Vec<f64>], w: &[Vec<f64>], b: &[f64], a: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = sub.len();
    let d = w[0].len();
    let wh: Vec<Vec<f64>> = h
        .iter()
        .map(|r| (0..d).map(|c| r.iter().enumerate().map(|(k, x)| x * w[k][c]).sum()).collect())
        .collect();
    let mut open = vec![vec![false; n]; n];
    for (i, row) in open.iter_mut().enumerate() {
        row[i] = true;
    }
    for &(s, t) in &sub.edges {
        open[t][s] = true;
    }
    let mut alpha = vec![0.0; n * n];
    let mut out = Vec::new();
    for i in 0..n {
        let own: f64 = (0..d).map(|c| a[c] * wh[i][c]).sum();
        let e: Vec<Option<f64>> = (0..n)
            .map(|j| {
                open[i][j].then(|| {
                    let s = own + (0..d).map(|c| a[d + c] * wh[j][c]).sum::<f64>();
                    if s > 0.0 {
                        s
                    } else {
                        0.2 * s
                    }
                })
            })
            .collect();
        let m = e.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = e.iter().flatten().map(|v| (v - m).exp()).sum();
        for j in 0..n {
            if let Some(v) = e[j] {
                alpha[i * n + j] = (v - m).exp() / z;
            }
        }
        for c in 0..d {
            let v: f64 = (0..n).map(|j| alpha[i * n + j] * wh[j][c]).sum::<f64>() + b[c];
            out.push(v.max(0.0));
        }
    }
    (alpha, out)
}

/// Expected MAP@K of a uniformly random ranking over `labels`, averaged
/// over every query.
pub fn label_frequency_map(labels: &[usize], k: usize) -> f64 {
    let n = labels.len();
    let others = (n - 1) as f64;
    let mut total = 0.0;
    for &l in labels {
        let r = labels.iter().filter(|&&x| x == l).count() - 1;
        if r == 0 {
            continue;
        }
        let p = r as f64 / others;
        let q = if n > 2 { r as f64 * (r as f64 - 1.0) / (others * (others - 1.0)) } else { 0.0 };
        let sum: f64 = (1..=k).map(|i| (p + (i as f64 - 1.0) * q) / i as f64).sum();
        total += sum / k.min(r) as f64;
    }
    total / n as f64
}
