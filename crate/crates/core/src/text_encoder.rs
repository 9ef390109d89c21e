//! Vocabulary tokenizer and a compact trainable transformer encoder that
//! turns a business description into one pooled vector.

use std::collections::HashMap;
use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SetnError};
use crate::numerics::{Tape, Var};
use crate::params::{Module, Parameter, VarCursor};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const RESERVED_IDS: usize = 3;
/// Tokens kept per document, CLS included.
pub const MAX_TOKENS: usize = 512;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Token string to dense id map. Ids 0..3 are PAD, UNK and CLS.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary whose `k`-th token gets id `k + 3`.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all: Vec<String> = ["[PAD]", "[UNK]", "[CLS]"].map(String::from).to_vec();
        let mut index = HashMap::new();
        for tok in tokens {
            let tok = tok.into().to_lowercase();
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(SetnError::Data(format!("invalid vocabulary token {tok:?}")));
            }
            if index.insert(tok.clone(), all.len()).is_some() {
                return Err(SetnError::Data(format!("duplicate vocabulary token {tok:?}")));
            }
            all.push(tok);
        }
        if all.len() == RESERVED_IDS {
            return Err(SetnError::Data("vocabulary has no tokens".into()));
        }
        Ok(Vocab { tokens: all, index })
    }

    /// Reads `vocab.txt`: one token per line, line `k` (0-based) is id `k + 3`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| SetnError::io(path, e))?;
        let lines: Vec<&str> = text.lines().collect();
        for (i, line) in lines.iter().enumerate() {
            if line.trim().is_empty() {
                return Err(SetnError::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: "empty vocabulary line".into(),
                });
            }
        }
        Vocab::from_tokens(lines.iter().map(|l| l.trim()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for tok in &self.tokens[RESERVED_IDS..] {
            out.push_str(tok);
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| SetnError::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == RESERVED_IDS
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }
}

/// Token ids of one document: CLS first, at most [`MAX_TOKENS`] long.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence(Vec<usize>);

impl TokenSequence {
    pub fn new(ids: Vec<usize>) -> Result<Self> {
        if ids.is_empty() || ids.len() > MAX_TOKENS {
            return Err(SetnError::Contract(format!(
                "token sequence length {} outside 1..={MAX_TOKENS}",
                ids.len()
            )));
        }
        Ok(TokenSequence(ids))
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Whitespace split, lowercase, vocabulary lookup with UNK fallback, CLS
/// prepended, truncated to [`MAX_TOKENS`].
pub fn tokenize(text: &str, vocab: &Vocab) -> TokenSequence {
    tokenize_with_limit(text, vocab, MAX_TOKENS)
}

/// [`tokenize`] with a tighter length cap, clamped to `1..=MAX_TOKENS`.
pub fn tokenize_with_limit(text: &str, vocab: &Vocab, max_tokens: usize) -> TokenSequence {
    let limit = max_tokens.clamp(1, MAX_TOKENS);
    let mut ids = vec![CLS_ID];
    ids.extend(
        text.split_whitespace()
            .take(limit - 1)
            .map(|w| vocab.id(&w.to_lowercase()).unwrap_or(UNK_ID)),
    );
    TokenSequence(ids)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Cls,
    Mean,
    Max,
}

/// Which encoder parameters receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainPolicy {
    All,
    LastBlockOnly,
    None,
}

/// Reduces `[len×d]` hidden states to a `[d]` vector.
pub fn pool(tape: &mut Tape, hidden: Var, strategy: Pooling) -> Result<Var> {
    match tape.shape(hidden) {
        [0, _] => return Err(SetnError::Contract("pooling an empty sequence".into())),
        [_, _] => {}
        other => {
            return Err(SetnError::Contract(format!(
                "pooling expects [len×d], got {other:?}"
            )))
        }
    }
    match strategy {
        Pooling::Cls => tape.select_row(hidden, 0),
        Pooling::Mean => tape.mean_rows(hidden),
        Pooling::Max => tape.max_rows(hidden),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    pub ff_dim: usize,
    pub max_positions: usize,
}

/// Single-head self-attention plus a two-layer feedforward, each followed
/// by a residual add and layer normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBlock {
    pub query: (Parameter, Parameter),
    pub key: (Parameter, Parameter),
    pub value: (Parameter, Parameter),
    pub output: (Parameter, Parameter),
    pub norm1: (Parameter, Parameter),
    pub ff_in: (Parameter, Parameter),
    pub ff_out: (Parameter, Parameter),
    pub norm2: (Parameter, Parameter),
}

fn affine<R: Rng + ?Sized>(name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> (Parameter, Parameter) {
    (
        Parameter::glorot(&format!("{name}.weight"), fan_in, fan_out, rng),
        Parameter::filled(&format!("{name}.bias"), vec![fan_out], 0.0),
    )
}

fn norm(name: &str, d: usize) -> (Parameter, Parameter) {
    (
        Parameter::filled(&format!("{name}.gain"), vec![d], 1.0),
        Parameter::filled(&format!("{name}.bias"), vec![d], 0.0),
    )
}

impl EncoderBlock {
    fn init<R: Rng + ?Sized>(prefix: &str, d: usize, ff: usize, rng: &mut R) -> Self {
        EncoderBlock {
            query: affine(&format!("{prefix}.query"), d, d, rng),
            key: affine(&format!("{prefix}.key"), d, d, rng),
            value: affine(&format!("{prefix}.value"), d, d, rng),
            output: affine(&format!("{prefix}.output"), d, d, rng),
            norm1: norm(&format!("{prefix}.norm1"), d),
            ff_in: affine(&format!("{prefix}.ff_in"), d, ff, rng),
            ff_out: affine(&format!("{prefix}.ff_out"), ff, d, rng),
            norm2: norm(&format!("{prefix}.norm2"), d),
        }
    }

    fn pairs(&self) -> [&(Parameter, Parameter); 8] {
        [
            &self.query,
            &self.key,
            &self.value,
            &self.output,
            &self.norm1,
            &self.ff_in,
            &self.ff_out,
            &self.norm2,
        ]
    }

    pub fn trainable(&self) -> bool {
        self.parameters().iter().all(|p| p.trainable())
    }

    pub fn set_trainable(&mut self, flag: bool) {
        for p in self.parameters_mut() {
            p.set_trainable(flag);
        }
    }

    fn forward(&self, tape: &mut Tape, vars: &BlockVars, x: Var) -> Result<Var> {
        let d = tape.shape(x)[1];
        let [q, k, v, o, n1, fi, fo, n2] = vars.0;
        let query = tape.linear(x, q.0, q.1)?;
        let key = tape.linear(x, k.0, k.1)?;
        let value = tape.linear(x, v.0, v.1)?;
        let key_t = tape.transpose(key)?;
        let scores = tape.matmul(query, key_t)?;
        let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
        let attn = tape.softmax_rows(scores)?;
        let ctx = tape.matmul(attn, value)?;
        let projected = tape.linear(ctx, o.0, o.1)?;
        let x1 = tape.add(x, projected)?;
        let x1 = layer_norm(tape, x1, n1)?;
        let hidden = tape.linear(x1, fi.0, fi.1)?;
        let hidden = tape.relu(hidden);
        let ff = tape.linear(hidden, fo.0, fo.1)?;
        let x2 = tape.add(x1, ff)?;
        layer_norm(tape, x2, n2)
    }
}

fn layer_norm(tape: &mut Tape, x: Var, (gain, bias): (Var, Var)) -> Result<Var> {
    let n = tape.layer_norm_rows(x, LAYER_NORM_EPS)?;
    let n = tape.mul_row(n, gain)?;
    tape.add_row(n, bias)
}

impl Module for EncoderBlock {
    fn parameters(&self) -> Vec<&Parameter> {
        self.pairs().into_iter().flat_map(|(a, b)| [a, b]).collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        [
            &mut self.query,
            &mut self.key,
            &mut self.value,
            &mut self.output,
            &mut self.norm1,
            &mut self.ff_in,
            &mut self.ff_out,
            &mut self.norm2,
        ]
        .into_iter()
        .flat_map(|(a, b)| [a, b])
        .collect()
    }
}

#[derive(Clone, Copy, Debug)]
struct BlockVars([(Var, Var); 8]);

/// Tape handles for every encoder parameter.
#[derive(Clone, Debug)]
pub struct EncoderVars {
    token_embedding: Var,
    position_embedding: Var,
    blocks: Vec<BlockVars>,
}

/// Token and position embeddings followed by `layers` encoder blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder {
    pub config: EncoderConfig,
    pub token_embedding: Parameter,
    pub position_embedding: Parameter,
    pub blocks: Vec<EncoderBlock>,
}

impl TextEncoder {
    pub fn init<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Self {
        let d = config.hidden_dim;
        let token_embedding =
            Parameter::normal("encoder.token_embedding", vec![config.vocab_size, d], 1.0, rng);
        let position_embedding =
            Parameter::normal("encoder.position_embedding", vec![config.max_positions, d], 0.1, rng);
        let blocks = (0..config.layers)
            .map(|i| EncoderBlock::init(&format!("encoder.block{i}"), d, config.ff_dim, rng))
            .collect();
        TextEncoder {
            config,
            token_embedding,
            position_embedding,
            blocks,
        }
    }

    /// Per-block trainable flags.
    pub fn trainable_flags(&self) -> Vec<bool> {
        self.blocks.iter().map(EncoderBlock::trainable).collect()
    }

    pub fn set_trainable(&mut self, policy: TrainPolicy) -> Result<()> {
        let layers = self.blocks.len();
        if policy == TrainPolicy::LastBlockOnly && layers == 0 {
            return Err(SetnError::Parameter(
                "last_block_only needs at least one encoder block".into(),
            ));
        }
        let embeddings = policy == TrainPolicy::All;
        self.token_embedding.set_trainable(embeddings);
        self.position_embedding.set_trainable(embeddings);
        for (i, block) in self.blocks.iter_mut().enumerate() {
            let flag = match policy {
                TrainPolicy::All => true,
                TrainPolicy::LastBlockOnly => i + 1 == layers,
                TrainPolicy::None => false,
            };
            block.set_trainable(flag);
        }
        Ok(())
    }

    /// Number of leading blocks whose output is a fixed function of the
    /// input, or `None` when the embeddings themselves are trainable.
    pub fn frozen_prefix(&self) -> Option<usize> {
        if self.token_embedding.trainable() || self.position_embedding.trainable() {
            return None;
        }
        Some(self.blocks.iter().take_while(|b| !b.trainable()).count())
    }

    pub(crate) fn take_vars(&self, cursor: &mut VarCursor<'_>) -> EncoderVars {
        let token_embedding = cursor.next_var();
        let position_embedding = cursor.next_var();
        let blocks = self
            .blocks
            .iter()
            .map(|_| {
                let mut pair = || (cursor.next_var(), cursor.next_var());
                BlockVars([pair(), pair(), pair(), pair(), pair(), pair(), pair(), pair()])
            })
            .collect();
        EncoderVars {
            token_embedding,
            position_embedding,
            blocks,
        }
    }

    /// Binds this encoder alone on a tape.
    pub fn bind(&self, tape: &mut Tape) -> EncoderVars {
        let vars = crate::params::bind_leaves(self, tape);
        self.take_vars(&mut VarCursor::new(&vars))
    }

    /// Sum of token and position embeddings, `[len×d]`.
    pub fn embed(&self, tape: &mut Tape, vars: &EncoderVars, tokens: &TokenSequence) -> Result<Var> {
        if let Some(&bad) = tokens.ids().iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(SetnError::Data(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        if tokens.len() > self.config.max_positions {
            return Err(SetnError::Data(format!(
                "sequence of {} tokens exceeds {} positions",
                tokens.len(),
                self.config.max_positions
            )));
        }
        let tok = tape.gather_rows(vars.token_embedding, tokens.ids())?;
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let pos = tape.gather_rows(vars.position_embedding, &positions)?;
        tape.add(tok, pos)
    }

    /// Runs blocks `range` over hidden states `x`.
    pub fn run_blocks(&self, tape: &mut Tape, vars: &EncoderVars, x: Var, range: Range<usize>) -> Result<Var> {
        let mut h = x;
        for i in range {
            h = self.blocks[i].forward(tape, &vars.blocks[i], h)?;
        }
        Ok(h)
    }

    /// Hidden states `[len×d]` after all blocks.
    pub fn encode(&self, tape: &mut Tape, vars: &EncoderVars, tokens: &TokenSequence) -> Result<Var> {
        let x = self.embed(tape, vars, tokens)?;
        self.run_blocks(tape, vars, x, 0..self.blocks.len())
    }
}

impl Module for TextEncoder {
    fn parameters(&self) -> Vec<&Parameter> {
        let mut out = vec![&self.token_embedding, &self.position_embedding];
        for b in &self.blocks {
            out.extend(b.parameters());
        }
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding];
        for b in &mut self.blocks {
            out.extend(b.parameters_mut());
        }
        out
    }
}
