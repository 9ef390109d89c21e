//! Dataset splitting, the per-target training loop and batch embedding.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_io::{StockRecord, Taxonomy};
use crate::error::{Result, SetnError};
use crate::evaluator::{map_at_k, EmbeddingMatrix};
use crate::graph::{sample_subgraph_with, to_undirected, GnnKind, Neighborhood, StockGraph};
use crate::model::{compute_loss, ModelConfig, SetnModel, TextCache};
use crate::numerics::{AdamConfig, AdamState, Tape};
use crate::params::Module;
use crate::text_encoder::{tokenize_with_limit, Pooling, TokenSequence, TrainPolicy, Vocab, MAX_TOKENS};

/// What the classification loss is computed over. Only the sampled target
/// contributes; neighbors feed it through message passing.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossScope {
    #[default]
    TargetOnly,
}

/// Every knob of a training run. Defaults: 20 epochs, Adam at learning
/// rate 0.001, dropout 0.2, mean pooling, one-hop neighborhoods, 512-token
/// documents, only the last encoder block trained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub dropout: f64,
    pub pooling: Pooling,
    pub gnn: GnnKind,
    pub gnn_layers: usize,
    pub residual: bool,
    pub directed: bool,
    pub neighborhood: Neighborhood,
    pub hops: usize,
    pub max_tokens: usize,
    pub loss: LossScope,
    pub encoder_train: TrainPolicy,
    pub hidden_dim: usize,
    pub encoder_layers: usize,
    pub ff_dim: usize,
    pub split: [f64; 3],
    pub seed: u64,
    /// Reuse outputs of the frozen part of the encoder across steps.
    pub text_cache: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            epochs: 20,
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            dropout: 0.2,
            pooling: Pooling::Mean,
            gnn: GnnKind::Gcn,
            gnn_layers: 1,
            residual: true,
            directed: true,
            neighborhood: Neighborhood::In,
            hops: 1,
            max_tokens: MAX_TOKENS,
            loss: LossScope::TargetOnly,
            encoder_train: TrainPolicy::LastBlockOnly,
            hidden_dim: 64,
            encoder_layers: 2,
            ff_dim: 128,
            split: [0.7, 0.1, 0.2],
            seed: 0,
            text_cache: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hops != 1 {
            return Err(SetnError::Parameter(format!(
                "only one-hop neighborhoods are supported, got hops = {}",
                self.hops
            )));
        }
        if self.max_tokens == 0 || self.max_tokens > MAX_TOKENS {
            return Err(SetnError::Parameter(format!(
                "max_tokens {} outside 1..={MAX_TOKENS}",
                self.max_tokens
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(SetnError::Parameter(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        check_proportions(&self.split)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    pub fn model_config(&self, vocab_size: usize, taxonomy: &Taxonomy) -> ModelConfig {
        ModelConfig {
            vocab_size,
            hidden_dim: self.hidden_dim,
            encoder_layers: self.encoder_layers,
            ff_dim: self.ff_dim,
            gnn: self.gnn,
            gnn_layers: self.gnn_layers,
            residual: self.residual,
            dropout: self.dropout,
            pooling: self.pooling,
            encoder_train: self.encoder_train,
            sector_classes: taxonomy.sector_count(),
            industry_classes: taxonomy.industry_count(),
        }
    }
}

/// Records, their token sequences, the cause→effect graph and labels.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub records: Vec<StockRecord>,
    pub tokens: Vec<TokenSequence>,
    pub graph: StockGraph,
    pub taxonomy: Taxonomy,
    pub vocab_size: usize,
}

impl Dataset {
    pub fn new(
        records: Vec<StockRecord>,
        graph: StockGraph,
        taxonomy: Taxonomy,
        vocab: &Vocab,
        max_tokens: usize,
    ) -> Result<Self> {
        if graph.node_count() != records.len() {
            return Err(SetnError::Data(format!(
                "graph has {} nodes for {} records",
                graph.node_count(),
                records.len()
            )));
        }
        for (i, r) in records.iter().enumerate() {
            if r.id != i {
                return Err(SetnError::Data(format!("record {} stored at position {i}", r.id)));
            }
            if r.sector >= taxonomy.sector_count() || r.industry >= taxonomy.industry_count() {
                return Err(SetnError::Data(format!("record {} has labels outside the taxonomy", r.ticker)));
            }
        }
        let tokens = records
            .iter()
            .map(|r| tokenize_with_limit(&r.text, vocab, max_tokens))
            .collect();
        Ok(Dataset {
            records,
            tokens,
            graph,
            taxonomy,
            vocab_size: vocab.len(),
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Graph used for message passing under `config`.
    pub fn message_graph(&self, directed: bool) -> StockGraph {
        if directed {
            self.graph.clone()
        } else {
            to_undirected(&self.graph)
        }
    }

    pub fn sector_labels(&self, ids: &[usize]) -> Vec<usize> {
        ids.iter().map(|&i| self.records[i].sector).collect()
    }

    pub fn industry_labels(&self, ids: &[usize]) -> Vec<usize> {
        ids.iter().map(|&i| self.records[i].industry).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

fn check_proportions(p: &[f64; 3]) -> Result<()> {
    if p.iter().any(|&x| !(x > 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(SetnError::Parameter(format!(
            "split proportions {p:?} must be positive and sum to 1"
        )));
    }
    Ok(())
}

/// Seeded shuffle, then contiguous train / validation / test cut. The
/// validation and test sizes are rounded to the nearest integer and the
/// remainder goes to train.
pub fn split_dataset(ids: &[usize], proportions: [f64; 3], seed: u64) -> Result<Split> {
    check_proportions(&proportions)?;
    if ids.is_empty() {
        return Err(SetnError::Data("cannot split an empty id list".into()));
    }
    let n = ids.len();
    let val = (n as f64 * proportions[1]).round() as usize;
    let test = (n as f64 * proportions[2]).round() as usize;
    let train = n.saturating_sub(val + test);
    if train == 0 || val == 0 || test == 0 {
        return Err(SetnError::Parameter(format!(
            "split of {n} ids at {proportions:?} leaves an empty part"
        )));
    }
    let mut order = ids.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    order.shuffle(&mut rng);
    Ok(Split {
        train: order[..train].to_vec(),
        validation: order[train..train + val].to_vec(),
        test: order[train + val..].to_vec(),
    })
}

/// Stream used for epoch `epoch`'s visiting order; a pure function of
/// `(seed, epoch)`.
pub fn epoch_order(train: &[usize], seed: u64, epoch: usize) -> Vec<usize> {
    let mut order = train.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 + 2 * epoch as u64);
    order.shuffle(&mut rng);
    order
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub validation_map5_sector: f64,
    pub validation_map5_industry: f64,
}

/// Fresh model for `data` under `config`, seeded by `config.seed`.
pub fn build_model(data: &Dataset, config: &TrainConfig) -> Result<SetnModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    SetnModel::init(config.model_config(data.vocab_size, &data.taxonomy), &mut rng)
}

/// Runs `config.epochs` passes over `split.train`, one Adam step per
/// target, and logs mean train loss plus validation MAP@5 after each.
pub fn train(model: &mut SetnModel, data: &Dataset, split: &Split, config: &TrainConfig) -> Result<Vec<EpochLog>> {
    train_with(model, data, split, config, |_| {})
}

/// [`train`] with a callback invoked after every epoch.
pub fn train_with(
    model: &mut SetnModel,
    data: &Dataset,
    split: &Split,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    config.validate()?;
    let graph = data.message_graph(config.directed);
    let trainable: Vec<usize> = model
        .parameters()
        .iter()
        .enumerate()
        .filter(|(_, p)| p.trainable())
        .map(|(i, _)| i)
        .collect();
    let sizes: Vec<usize> = trainable
        .iter()
        .map(|&i| model.parameters()[i].value.numel())
        .collect();
    let mut adam = AdamState::new(config.adam(), &sizes);
    let mut cache = if config.text_cache { TextCache::for_model(model) } else { None };
    let mut logs = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed);
        dropout_rng.set_stream(3 + 2 * epoch as u64);
        let mut total = 0.0;
        let order = epoch_order(&split.train, config.seed, epoch);
        for &target in &order {
            let sub = sample_subgraph_with(&graph, target, config.neighborhood)?;
            let tokens: Vec<&TokenSequence> = sub.members.iter().map(|&m| &data.tokens[m]).collect();
            let record = &data.records[target];

            let mut tape = Tape::new();
            let (vars, leaves) = model.bind(&mut tape);
            let out = model.forward(&mut tape, &vars, &sub, &tokens, true, &mut dropout_rng, cache.as_mut())?;
            let loss = compute_loss(&mut tape, &out, record.sector, record.industry)?;
            let value = tape.item(loss);
            if !value.is_finite() {
                return Err(SetnError::NonFiniteLoss { epoch, target });
            }
            total += value;
            tape.backward(loss)?;

            let grads: Vec<Vec<f64>> = trainable
                .iter()
                .zip(&sizes)
                .map(|(&i, &n)| tape.grad(leaves[i]).map_or_else(|| vec![0.0; n], <[f64]>::to_vec))
                .collect();
            let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
            let mut params = model.parameters_mut();
            let mut selected: Vec<&mut crate::numerics::Tensor> = Vec::with_capacity(trainable.len());
            let mut next = trainable.iter().peekable();
            for (i, p) in params.iter_mut().enumerate() {
                if next.peek() == Some(&&i) {
                    next.next();
                    selected.push(&mut p.value);
                }
            }
            adam.step(&mut selected, &grad_refs)?;
        }

        let validation = embed_stocks(model, data, &graph, config.neighborhood, &split.validation)?;
        let sector = map_at_k(&validation, &data.sector_labels(&split.validation), &[5])?[0];
        let industry = map_at_k(&validation, &data.industry_labels(&split.validation), &[5])?[0];
        let log = EpochLog {
            epoch: epoch + 1,
            mean_loss: total / order.len().max(1) as f64,
            validation_map5_sector: sector,
            validation_map5_industry: industry,
        };
        log::info!(
            "epoch {:>3}  loss {:.4}  val MAP@5 sector {:.4} industry {:.4}",
            log.epoch,
            log.mean_loss,
            log.validation_map5_sector,
            log.validation_map5_industry
        );
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}

/// Eval-mode embeddings of `ids`, rows in the given order, keyed by ticker.
pub fn embed_stocks(
    model: &SetnModel,
    data: &Dataset,
    graph: &StockGraph,
    hood: Neighborhood,
    ids: &[usize],
) -> Result<EmbeddingMatrix> {
    let rows: Vec<Vec<f64>> = ids
        .par_iter()
        .map_init(
            || TextCache::for_model(model),
            |cache, &id| {
                let sub = sample_subgraph_with(graph, id, hood)?;
                let tokens: Vec<&TokenSequence> = sub.members.iter().map(|&m| &data.tokens[m]).collect();
                model.embed_stock(&sub, &tokens, cache.as_mut())
            },
        )
        .collect::<Result<_>>()?;
    let tickers = ids.iter().map(|&i| data.records[i].ticker.clone()).collect();
    EmbeddingMatrix::new(tickers, rows)
}
