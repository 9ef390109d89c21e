//! Text encoder, message passing, residual fusion and the two classifier
//! heads, composed into one stock-embedding model.

use std::collections::HashMap;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SetnError};
use crate::graph::{gnn_layer, GnnKind, GnnParams, GnnVars, Subgraph};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{bind_leaves, Module, Parameter, VarCursor};
use crate::text_encoder::{
    pool, EncoderConfig, EncoderVars, Pooling, TextEncoder, TokenSequence, TrainPolicy, MAX_TOKENS,
};

/// Architecture of a [`SetnModel`]; stored verbatim in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub encoder_layers: usize,
    pub ff_dim: usize,
    pub gnn: GnnKind,
    pub gnn_layers: usize,
    pub residual: bool,
    pub dropout: f64,
    pub pooling: Pooling,
    pub encoder_train: TrainPolicy,
    pub sector_classes: usize,
    pub industry_classes: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("hidden_dim", self.hidden_dim),
            ("ff_dim", self.ff_dim),
            ("sector_classes", self.sector_classes),
            ("industry_classes", self.industry_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(SetnError::Parameter(format!("{name} must be positive")));
            }
        }
        if self.gnn != GnnKind::None && self.gnn_layers == 0 {
            return Err(SetnError::Parameter("gnn_layers must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(SetnError::Parameter(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.encoder_train == TrainPolicy::LastBlockOnly && self.encoder_layers == 0 {
            return Err(SetnError::Parameter(
                "last_block_only needs at least one encoder block".into(),
            ));
        }
        Ok(())
    }
}

/// Pooled text encoder, optional GNN stack with residual fusion, and a
/// sector head plus an industry head.
#[derive(Clone, Debug, PartialEq)]
pub struct SetnModel {
    pub config: ModelConfig,
    pub encoder: TextEncoder,
    pub gnn: Vec<GnnParams>,
    pub sector_head: (Parameter, Parameter),
    pub industry_head: (Parameter, Parameter),
}

/// Tape handles for every model parameter.
#[derive(Clone, Debug)]
pub struct ModelVars {
    encoder: EncoderVars,
    gnn: Vec<GnnVars>,
    sector_head: (Var, Var),
    industry_head: (Var, Var),
}

/// Target embedding and both heads' logits, all on the tape.
#[derive(Clone, Copy, Debug)]
pub struct ForwardResult {
    pub embedding: Var,
    pub sector_logits: Var,
    pub industry_logits: Var,
}

impl SetnModel {
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let mut encoder = TextEncoder::init(
            EncoderConfig {
                vocab_size: config.vocab_size,
                hidden_dim: d,
                layers: config.encoder_layers,
                ff_dim: config.ff_dim,
                max_positions: MAX_TOKENS,
            },
            rng,
        );
        encoder.set_trainable(config.encoder_train)?;
        let gnn = match config.gnn {
            GnnKind::None => Vec::new(),
            kind => (0..config.gnn_layers)
                .map(|i| GnnParams::init(&format!("gnn.layer{i}"), kind, d, rng))
                .collect::<Result<_>>()?,
        };
        let head = |name: &str, classes: usize, rng: &mut R| {
            (
                Parameter::glorot(&format!("{name}.weight"), d, classes, rng),
                Parameter::filled(&format!("{name}.bias"), vec![classes], 0.0),
            )
        };
        let sector_head = head("head.sector", config.sector_classes, rng);
        let industry_head = head("head.industry", config.industry_classes, rng);
        Ok(SetnModel {
            config,
            encoder,
            gnn,
            sector_head,
            industry_head,
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.hidden_dim
    }

    pub(crate) fn take_vars(&self, cursor: &mut VarCursor<'_>) -> ModelVars {
        let encoder = self.encoder.take_vars(cursor);
        let gnn = self.gnn.iter().map(|p| p.take_vars(cursor)).collect();
        let sector_head = (cursor.next_var(), cursor.next_var());
        let industry_head = (cursor.next_var(), cursor.next_var());
        ModelVars {
            encoder,
            gnn,
            sector_head,
            industry_head,
        }
    }

    /// Records every parameter as a leaf; the leaves come back in
    /// [`Module::parameters`] order alongside the structured handles.
    pub fn bind(&self, tape: &mut Tape) -> (ModelVars, Vec<Var>) {
        let leaves = bind_leaves(self, tape);
        (self.vars_from(&leaves), leaves)
    }

    /// Structured handles over leaves bound in parameter order.
    pub fn vars_from(&self, leaves: &[Var]) -> ModelVars {
        let mut cursor = VarCursor::new(leaves);
        let vars = self.take_vars(&mut cursor);
        debug_assert_eq!(cursor.consumed(), leaves.len());
        vars
    }

    /// Pooled text vector of one stock, reusing `cache` for the part of the
    /// encoder that is frozen.
    fn text_vector(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        stock: usize,
        tokens: &TokenSequence,
        cache: Option<&mut TextCache>,
    ) -> Result<Var> {
        let prefix = self.encoder.frozen_prefix();
        let layers = self.encoder.blocks.len();
        let pooling = self.config.pooling;
        match (cache, prefix) {
            (Some(cache), Some(start)) => {
                if !cache.matches(start, pooling) {
                    return Err(SetnError::Contract(
                        "text cache built for a different frozen prefix".into(),
                    ));
                }
                let cached = match cache.entries.get(&stock) {
                    Some(t) => t.clone(),
                    None => {
                        let t = self.frozen_text(tokens, start)?;
                        cache.entries.insert(stock, t.clone());
                        t
                    }
                };
                let c = tape.constant(cached);
                if start == layers {
                    Ok(c)
                } else {
                    let h = self.encoder.run_blocks(tape, &vars.encoder, c, start..layers)?;
                    pool(tape, h, pooling)
                }
            }
            _ => {
                let h = self.encoder.encode(tape, &vars.encoder, tokens)?;
                pool(tape, h, pooling)
            }
        }
    }

    /// Output of the frozen embedding and leading blocks, pooled when every
    /// block is frozen.
    fn frozen_text(&self, tokens: &TokenSequence, start: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.encoder.bind(&mut tape);
        let x = self.encoder.embed(&mut tape, &vars, tokens)?;
        let mut h = self.encoder.run_blocks(&mut tape, &vars, x, 0..start)?;
        if start == self.encoder.blocks.len() {
            h = pool(&mut tape, h, self.config.pooling)?;
        }
        tape.tensor(h)
    }

    /// Full forward pass over a one-hop subgraph. `tokens[k]` holds the
    /// document of `sub.members[k]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        sub: &Subgraph,
        tokens: &[&TokenSequence],
        training: bool,
        rng: &mut dyn RngCore,
        mut cache: Option<&mut TextCache>,
    ) -> Result<ForwardResult> {
        if tokens.len() != sub.len() || sub.is_empty() {
            return Err(SetnError::Contract(format!(
                "{} token sequences for a subgraph of {} members",
                tokens.len(),
                sub.len()
            )));
        }
        let encoded = if self.gnn.is_empty() { 1 } else { sub.len() };
        let mut pooled = Vec::with_capacity(encoded);
        for (k, seq) in tokens.iter().take(encoded).enumerate() {
            pooled.push(self.text_vector(tape, vars, sub.members[k], seq, cache.as_deref_mut())?);
        }
        let embedding = if self.gnn.is_empty() {
            pooled[0]
        } else {
            let text = tape.stack_rows(&pooled)?;
            let mut h = text;
            for layer in &vars.gnn {
                h = gnn_layer(tape, h, sub, layer)?;
            }
            let graph_target = tape.select_row(h, 0)?;
            if self.config.residual {
                tape.add(pooled[0], graph_target)?
            } else {
                graph_target
            }
        };

        let activated = tape.relu(embedding);
        let dropped = tape.dropout(activated, self.config.dropout, training, rng)?;
        let d = self.hidden_dim();
        let row = tape.reshape(dropped, vec![1, d])?;
        let sector_logits = tape.linear(row, vars.sector_head.0, vars.sector_head.1)?;
        let industry_logits = tape.linear(row, vars.industry_head.0, vars.industry_head.1)?;
        Ok(ForwardResult {
            embedding,
            sector_logits,
            industry_logits,
        })
    }

    /// Eval-mode embedding of `sub.target` as plain numbers.
    pub fn embed_stock(
        &self,
        sub: &Subgraph,
        tokens: &[&TokenSequence],
        cache: Option<&mut TextCache>,
    ) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let (vars, _) = self.bind(&mut tape);
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&mut tape, &vars, sub, tokens, false, &mut unused, cache)?;
        Ok(tape.value(out.embedding).to_vec())
    }

    /// Order-sensitive FNV-1a hash over every parameter bit pattern.
    pub fn parameter_hash(&self) -> u64 {
        let mut h = Fnv::new();
        for p in self.parameters() {
            for v in p.value.data() {
                h.write(&v.to_le_bytes());
            }
        }
        h.finish()
    }
}

/// Sum of both heads' cross-entropies for a single target.
pub fn compute_loss(tape: &mut Tape, result: &ForwardResult, sector: usize, industry: usize) -> Result<Var> {
    let a = tape.cross_entropy(result.sector_logits, &[sector])?;
    let b = tape.cross_entropy(result.industry_logits, &[industry])?;
    tape.add(a, b)
}

impl Module for SetnModel {
    fn parameters(&self) -> Vec<&Parameter> {
        let mut out = self.encoder.parameters();
        for g in &self.gnn {
            out.extend(g.parameters());
        }
        out.extend([
            &self.sector_head.0,
            &self.sector_head.1,
            &self.industry_head.0,
            &self.industry_head.1,
        ]);
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = self.encoder.parameters_mut();
        for g in &mut self.gnn {
            out.extend(g.parameters_mut());
        }
        out.extend([
            &mut self.sector_head.0,
            &mut self.sector_head.1,
            &mut self.industry_head.0,
            &mut self.industry_head.1,
        ]);
        out
    }
}

/// Per-stock outputs of the frozen part of the encoder. Valid only for the
/// model whose frozen parameters produced it.
#[derive(Clone, Debug, Default)]
pub struct TextCache {
    key: Option<(usize, Pooling)>,
    entries: HashMap<usize, Tensor>,
}

impl TextCache {
    /// Empty cache for `model`, or `None` when its embeddings train.
    pub fn for_model(model: &SetnModel) -> Option<TextCache> {
        model.encoder.frozen_prefix().map(|start| TextCache {
            key: Some((start, model.config.pooling)),
            entries: HashMap::new(),
        })
    }

    fn matches(&self, start: usize, pooling: Pooling) -> bool {
        self.key == Some((start, pooling))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub(crate) struct Fnv(u64);

impl Fnv {
    pub(crate) fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    pub(crate) fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }

    pub(crate) fn finish(&self) -> u64 {
        self.0
    }
}
