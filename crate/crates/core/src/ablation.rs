//! Grid runs over architecture switches: one trained model per cell, all
//! cells sharing the seed and split.

use std::collections::BTreeMap;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Result, SetnError};
use crate::evaluator::{evaluate_map, MapReport};
use crate::graph::GnnKind;
use crate::text_encoder::TrainPolicy;
use crate::trainer::{build_model, embed_stocks, split_dataset, train, Dataset, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    GraphType,
    EncoderPolicy,
    GnnKind,
    Residual,
}

impl FromStr for Axis {
    type Err = SetnError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "graph_type" | "graph" => Ok(Axis::GraphType),
            "encoder_policy" | "encoder_train" => Ok(Axis::EncoderPolicy),
            "gnn_kind" | "gnn" => Ok(Axis::GnnKind),
            "residual" => Ok(Axis::Residual),
            other => Err(SetnError::Parameter(format!("unknown ablation axis {other:?}"))),
        }
    }
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::GraphType => "graph_type",
            Axis::EncoderPolicy => "encoder_policy",
            Axis::GnnKind => "gnn_kind",
            Axis::Residual => "residual",
        }
    }

    /// Setting labels in row order, best-known configuration first.
    fn values(self) -> &'static [&'static str] {
        match self {
            Axis::GraphType => &["directed", "undirected"],
            Axis::EncoderPolicy => &["last_block_only", "none"],
            Axis::GnnKind => &["gcn", "gat"],
            Axis::Residual => &["on", "off"],
        }
    }

    fn apply(self, value: &str, config: &mut TrainConfig) {
        match (self, value) {
            (Axis::GraphType, v) => config.directed = v == "directed",
            (Axis::EncoderPolicy, "none") => config.encoder_train = TrainPolicy::None,
            (Axis::EncoderPolicy, _) => config.encoder_train = TrainPolicy::LastBlockOnly,
            (Axis::GnnKind, "gat") => config.gnn = GnnKind::Gat,
            (Axis::GnnKind, _) => config.gnn = GnnKind::Gcn,
            (Axis::Residual, v) => config.residual = v == "on",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub settings: BTreeMap<String, String>,
    pub map: MapReport,
}

/// Cartesian grid over `axes`, every cell trained from `base` and scored on
/// the test split.
pub fn run_ablation(data: &Dataset, base: &TrainConfig, axes: &[Axis], ks: &[usize]) -> Result<Vec<AblationRow>> {
    if axes.is_empty() {
        return Err(SetnError::Parameter("ablation needs at least one axis".into()));
    }
    let mut axes = axes.to_vec();
    axes.dedup();
    let mut cells: Vec<Vec<(Axis, &str)>> = vec![Vec::new()];
    for &axis in &axes {
        cells = cells
            .into_iter()
            .flat_map(|cell| {
                axis.values().iter().map(move |&v| {
                    let mut c = cell.clone();
                    c.push((axis, v));
                    c
                })
            })
            .collect();
    }
    let ids: Vec<usize> = (0..data.len()).collect();
    let split = split_dataset(&ids, base.split, base.seed)?;

    cells
        .par_iter()
        .map(|cell| {
            let mut config = base.clone();
            for &(axis, value) in cell {
                axis.apply(value, &mut config);
            }
            let label = cell
                .iter()
                .map(|(a, v)| format!("{}={v}", a.name()))
                .collect::<Vec<_>>()
                .join(",");
            let run = || -> Result<MapReport> {
                let mut model = build_model(data, &config)?;
                train(&mut model, data, &split, &config)?;
                let graph = data.message_graph(config.directed);
                let e = embed_stocks(&model, data, &graph, config.neighborhood, &split.test)?;
                evaluate_map(
                    &e,
                    &data.sector_labels(&split.test),
                    &data.industry_labels(&split.test),
                    ks,
                )
            };
            let map = run().map_err(|e| SetnError::Ablation {
                cell: label,
                source: Box::new(e),
            })?;
            let settings = cell
                .iter()
                .map(|(a, v)| (a.name().to_string(), v.to_string()))
                .collect();
            Ok(AblationRow { settings, map })
        })
        .collect()
}
