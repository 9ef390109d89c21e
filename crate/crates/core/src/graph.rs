//! Directed stock graph, one-hop subgraph sampling and the two message
//! passing layers.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SetnError};
use crate::numerics::{Tape, Tensor, Var, LEAKY_RELU_SLOPE};
use crate::params::{Module, Parameter, VarCursor};

/// Node/edge store over dense stock ids. An edge `(src, dst)` reads
/// "src causes dst".
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StockGraph {
    n: usize,
    edges: Vec<(usize, usize)>,
    directed: bool,
    in_adj: Vec<Vec<usize>>,
    out_adj: Vec<Vec<usize>>,
}

impl StockGraph {
    /// Builds a graph, dropping duplicate edges and self-loops. An
    /// undirected graph stores both orientations of every edge.
    pub fn new(n: usize, edges: impl IntoIterator<Item = (usize, usize)>, directed: bool) -> Result<Self> {
        let mut set = BTreeSet::new();
        for (s, d) in edges {
            if s >= n || d >= n {
                return Err(SetnError::Data(format!(
                    "edge ({s}, {d}) outside node range 0..{n}"
                )));
            }
            if s == d {
                continue;
            }
            set.insert((s, d));
            if !directed {
                set.insert((d, s));
            }
        }
        let edges: Vec<(usize, usize)> = set.into_iter().collect();
        let mut in_adj = vec![Vec::new(); n];
        let mut out_adj = vec![Vec::new(); n];
        for &(s, d) in &edges {
            out_adj[s].push(d);
            in_adj[d].push(s);
        }
        for list in &mut in_adj {
            list.sort_unstable();
        }
        Ok(StockGraph {
            n,
            edges,
            directed,
            in_adj,
            out_adj,
        })
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    /// Sorted, duplicate-free edge list.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn is_directed(&self) -> bool {
        self.directed
    }

    pub fn in_neighbors(&self, node: usize) -> &[usize] {
        &self.in_adj[node]
    }

    pub fn out_neighbors(&self, node: usize) -> &[usize] {
        &self.out_adj[node]
    }

    pub fn has_edge(&self, src: usize, dst: usize) -> bool {
        self.out_adj
            .get(src)
            .is_some_and(|list| list.binary_search(&dst).is_ok())
    }

    /// Same nodes with every edge flipped.
    pub fn reversed(&self) -> StockGraph {
        StockGraph::new(self.n, self.edges.iter().map(|&(s, d)| (d, s)), self.directed)
            .expect("flipped edges stay in range")
    }
}

/// Symmetrized copy with the directed flag cleared.
pub fn to_undirected(g: &StockGraph) -> StockGraph {
    StockGraph::new(g.n, g.edges.iter().copied(), false).expect("edges already validated")
}

/// Which neighbors of a target feed its message passing on a directed graph.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Neighborhood {
    /// Sources of edges into the target (causes).
    #[default]
    In,
    /// Destinations of edges out of the target (effects), with edges flipped
    /// so their messages still flow toward the target.
    Out,
}

/// Target plus its one-hop neighborhood, with locally re-indexed edges.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Subgraph {
    pub target: usize,
    /// Global ids; the target is always at local index 0.
    pub members: Vec<usize>,
    /// Local `(src, dst)` pairs of every graph edge between members.
    pub edges: Vec<(usize, usize)>,
}

impl Subgraph {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// One-hop subgraph around `target`: in-neighbors on a directed graph, all
/// neighbors on an undirected one.
pub fn sample_subgraph(g: &StockGraph, target: usize) -> Result<Subgraph> {
    sample_subgraph_with(g, target, Neighborhood::In)
}

pub fn sample_subgraph_with(g: &StockGraph, target: usize, hood: Neighborhood) -> Result<Subgraph> {
    if target >= g.n {
        return Err(SetnError::Data(format!(
            "target {target} outside node range 0..{}",
            g.n
        )));
    }
    let mut neighbors: Vec<usize> = match (g.directed, hood) {
        (true, Neighborhood::In) => g.in_adj[target].clone(),
        (true, Neighborhood::Out) => g.out_adj[target].clone(),
        (false, _) => g.in_adj[target].clone(),
    };
    neighbors.sort_unstable();
    let mut members = Vec::with_capacity(neighbors.len() + 1);
    members.push(target);
    members.extend(neighbors);

    let local = |id: usize| members.iter().position(|&m| m == id);
    let mut edges = Vec::new();
    for (li, &m) in members.iter().enumerate() {
        for &dst in &g.out_adj[m] {
            if let Some(lj) = local(dst) {
                match hood {
                    Neighborhood::Out if g.directed => edges.push((lj, li)),
                    _ => edges.push((li, lj)),
                }
            }
        }
    }
    edges.sort_unstable();
    Ok(Subgraph {
        target,
        members,
        edges,
    })
}

/// Dense `D̂^{-1/2} Â D̂^{-1/2}` with `Â = A + I`, `Â[i][j] = 1` for an edge
/// `j → i`, and `D̂` the row sums of `Â`.
pub fn gcn_normalize(sub: &Subgraph) -> Tensor {
    let n = sub.len();
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        a[i * n + i] = 1.0;
    }
    for &(s, d) in &sub.edges {
        a[d * n + s] = 1.0;
    }
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| 1.0 / a[i * n..(i + 1) * n].iter().sum::<f64>().sqrt())
        .collect();
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] *= inv_sqrt[i] * inv_sqrt[j];
        }
    }
    Tensor::new(vec![n, n], a).expect("normalized adjacency is finite")
}

/// Row `i` open at column `j` when `j == i` or there is an edge `j → i`.
pub fn attention_mask(sub: &Subgraph) -> Vec<bool> {
    let n = sub.len();
    let mut mask = vec![false; n * n];
    for i in 0..n {
        mask[i * n + i] = true;
    }
    for &(s, d) in &sub.edges {
        mask[d * n + s] = true;
    }
    mask
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GnnKind {
    Gcn,
    Gat,
    None,
}

impl GnnKind {
    pub fn as_str(self) -> &'static str {
        match self {
            GnnKind::Gcn => "gcn",
            GnnKind::Gat => "gat",
            GnnKind::None => "none",
        }
    }
}

/// Weight `[d×d]`, bias `[d]` and, for attention layers, `a [2d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GnnParams {
    pub weight: Parameter,
    pub bias: Parameter,
    pub attention: Option<Parameter>,
}

/// Tape handles for one [`GnnParams`].
#[derive(Clone, Copy, Debug)]
pub struct GnnVars {
    pub weight: Var,
    pub bias: Var,
    pub attention: Option<Var>,
}

impl GnnParams {
    pub fn init<R: Rng + ?Sized>(prefix: &str, kind: GnnKind, d: usize, rng: &mut R) -> Result<Self> {
        let attention = match kind {
            GnnKind::Gcn => None,
            GnnKind::Gat => Some(Parameter::glorot(&format!("{prefix}.attention"), 2 * d, 1, rng)),
            GnnKind::None => {
                return Err(SetnError::Parameter("no GNN parameters for kind none".into()))
            }
        };
        let attention = attention.map(|mut p| {
            p.value = Tensor::new(vec![2 * d], p.value.into_data())
                .expect("same entry count")
                .tracked();
            p
        });
        Ok(GnnParams {
            weight: Parameter::glorot(&format!("{prefix}.weight"), d, d, rng),
            bias: Parameter::filled(&format!("{prefix}.bias"), vec![d], 0.0),
            attention,
        })
    }

    pub fn kind(&self) -> GnnKind {
        if self.attention.is_some() {
            GnnKind::Gat
        } else {
            GnnKind::Gcn
        }
    }

    pub fn dim(&self) -> usize {
        self.bias.value.numel()
    }

    pub(crate) fn take_vars(&self, cursor: &mut VarCursor<'_>) -> GnnVars {
        GnnVars {
            weight: cursor.next_var(),
            bias: cursor.next_var(),
            attention: self.attention.as_ref().map(|_| cursor.next_var()),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> GnnVars {
        let vars = crate::params::bind_leaves(self, tape);
        self.take_vars(&mut VarCursor::new(&vars))
    }
}

impl Module for GnnParams {
    fn parameters(&self) -> Vec<&Parameter> {
        let mut out = vec![&self.weight, &self.bias];
        out.extend(self.attention.as_ref());
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = vec![&mut self.weight, &mut self.bias];
        out.extend(self.attention.as_mut());
        out
    }
}

fn check_rows(tape: &Tape, h: Var, sub: &Subgraph, op: &'static str) -> Result<()> {
    match tape.shape(h) {
        &[n, _] if n == sub.len() => Ok(()),
        other => Err(SetnError::dim(op, other, &[sub.len()])),
    }
}

/// `ReLU(gcn_normalize(sub) · H · W + b)`.
pub fn gcn_layer(tape: &mut Tape, h: Var, sub: &Subgraph, p: &GnnVars) -> Result<Var> {
    check_rows(tape, h, sub, "gcn_layer")?;
    let norm = tape.constant(gcn_normalize(sub));
    let hw = tape.matmul(h, p.weight)?;
    let agg = tape.matmul(norm, hw)?;
    let out = tape.add_row(agg, p.bias)?;
    Ok(tape.relu(out))
}

/// Attention coefficients `α [n×n]`: row `i` is a softmax of
/// `LeakyReLU(a₁·Wh_i + a₂·Wh_j)` over `j` in the in-neighbors of `i` and `i`
/// itself, zero elsewhere. Also returns `W·H`.
pub fn gat_attention(tape: &mut Tape, h: Var, sub: &Subgraph, p: &GnnVars) -> Result<(Var, Var)> {
    check_rows(tape, h, sub, "gat_layer")?;
    let a = p
        .attention
        .ok_or_else(|| SetnError::Parameter("attention layer without attention vector".into()))?;
    let wh = tape.matmul(h, p.weight)?;
    let d = tape.shape(wh)[1];
    if tape.shape(a) != [2 * d] {
        return Err(SetnError::dim("gat_layer attention", tape.shape(a), &[2 * d]));
    }
    let halves = tape.reshape(a, vec![2, d])?;
    let halves_t = tape.transpose(halves)?;
    let scores = tape.matmul(wh, halves_t)?;
    let scores_t = tape.transpose(scores)?;
    let own = tape.select_row(scores_t, 0)?;
    let other = tape.select_row(scores_t, 1)?;
    let logits = tape.add_outer(own, other)?;
    let logits = tape.leaky_relu(logits, LEAKY_RELU_SLOPE);
    let mask = attention_mask(sub);
    let alpha = tape.masked_softmax_rows(logits, Some(&mask))?;
    Ok((alpha, wh))
}

/// `ReLU(Σ_j α_ij W h_j + b)` per node.
pub fn gat_layer(tape: &mut Tape, h: Var, sub: &Subgraph, p: &GnnVars) -> Result<Var> {
    let (alpha, wh) = gat_attention(tape, h, sub, p)?;
    let agg = tape.matmul(alpha, wh)?;
    let out = tape.add_row(agg, p.bias)?;
    Ok(tape.relu(out))
}

/// Dispatches on whether the layer carries an attention vector.
pub fn gnn_layer(tape: &mut Tape, h: Var, sub: &Subgraph, p: &GnnVars) -> Result<Var> {
    if p.attention.is_some() {
        gat_layer(tape, h, sub, p)
    } else {
        gcn_layer(tape, h, sub, p)
    }
}
