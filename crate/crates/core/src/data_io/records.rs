use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::taxonomy::Taxonomy;
use crate::error::{Result, SetnError};
use crate::evaluator::ThemeSet;
use crate::graph::StockGraph;

/// One listed company: its description and both taxonomy labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StockRecord {
    /// Dense id, equal to the record's line index in `nodes.jsonl`.
    pub id: usize,
    pub ticker: String,
    pub text: String,
    pub sector: usize,
    pub industry: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeLine {
    ticker: String,
    text: String,
    topix17: String,
    topix33: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ThemeLine {
    theme: String,
    members: Vec<String>,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| SetnError::io(path, e))
}

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> SetnError {
    SetnError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Reads JSON-lines node records. Ids follow line order, skipping blank
/// lines; labels are resolved by name through `taxonomy`.
pub fn load_nodes(path: &Path, taxonomy: &Taxonomy) -> Result<Vec<StockRecord>> {
    let text = read(path)?;
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let node: NodeLine =
            serde_json::from_str(raw).map_err(|e| parse_error(path, line_no, e.to_string()))?;
        if !seen.insert(node.ticker.clone()) {
            return Err(parse_error(path, line_no, format!("duplicate ticker {:?}", node.ticker)));
        }
        let sector = taxonomy.sector_id(&node.topix17).ok_or_else(|| {
            parse_error(path, line_no, format!("unknown sector label {:?}", node.topix17))
        })?;
        let industry = taxonomy.industry_id(&node.topix33).ok_or_else(|| {
            parse_error(path, line_no, format!("unknown industry label {:?}", node.topix33))
        })?;
        records.push(StockRecord {
            id: records.len(),
            ticker: node.ticker,
            text: node.text,
            sector,
            industry,
        });
    }
    Ok(records)
}

pub fn save_nodes(path: &Path, records: &[StockRecord], taxonomy: &Taxonomy) -> Result<()> {
    let mut out = String::new();
    for r in records {
        let line = NodeLine {
            ticker: r.ticker.clone(),
            text: r.text.clone(),
            topix17: taxonomy.sectors()[r.sector].clone(),
            topix33: taxonomy.industries()[r.industry].clone(),
        };
        out.push_str(&serde_json::to_string(&line).expect("strings serialize"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| SetnError::io(path, e))
}

/// A record whose industry belongs to a different sector than the one it
/// is labeled with.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaxonomyViolation {
    pub id: usize,
    pub ticker: String,
    pub industry: String,
    pub sector: String,
    pub expected_sector: String,
}

pub fn validate_taxonomy(records: &[StockRecord], taxonomy: &Taxonomy) -> Vec<TaxonomyViolation> {
    records
        .iter()
        .filter(|r| taxonomy.sector_of(r.industry) != r.sector)
        .map(|r| TaxonomyViolation {
            id: r.id,
            ticker: r.ticker.clone(),
            industry: taxonomy.industries()[r.industry].clone(),
            sector: taxonomy.sectors()[r.sector].clone(),
            expected_sector: taxonomy.sectors()[taxonomy.sector_of(r.industry)].clone(),
        })
        .collect()
}

/// Reads `src<TAB>dst` integer pairs into a directed graph over `n` nodes.
pub fn load_edges(path: &Path, n: usize) -> Result<StockGraph> {
    let text = read(path)?;
    let mut edges = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let mut parts = raw.split('\t');
        let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(parse_error(path, line_no, "expected two tab-separated node ids"));
        };
        let parse = |s: &str| {
            s.trim()
                .parse::<usize>()
                .map_err(|e| parse_error(path, line_no, format!("bad node id {s:?}: {e}")))
        };
        let (src, dst) = (parse(a)?, parse(b)?);
        if src >= n || dst >= n {
            return Err(parse_error(
                path,
                line_no,
                format!("edge ({src}, {dst}) outside node range 0..{n}"),
            ));
        }
        edges.push((src, dst));
    }
    StockGraph::new(n, edges, true)
}

pub fn save_edges(path: &Path, graph: &StockGraph) -> Result<()> {
    let mut out = String::new();
    for (s, d) in graph.edges() {
        out.push_str(&format!("{s}\t{d}\n"));
    }
    fs::write(path, out).map_err(|e| SetnError::io(path, e))
}

/// Themes whose in-universe membership falls below `min_size`, as counted
/// by [`load_themes`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ThemeLoadStats {
    pub kept: usize,
    pub dropped: usize,
}

/// Reads JSON-lines themes, keeping only members in `universe` (tickers)
/// and only themes with at least `min_size` such members.
pub fn load_themes(
    path: &Path,
    universe: &HashSet<String>,
    min_size: usize,
) -> Result<(ThemeSet, ThemeLoadStats)> {
    let text = read(path)?;
    let mut themes = ThemeSet::default();
    let mut stats = ThemeLoadStats::default();
    let mut names = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let theme: ThemeLine =
            serde_json::from_str(raw).map_err(|e| parse_error(path, line_no, e.to_string()))?;
        if !names.insert(theme.theme.clone()) {
            return Err(parse_error(path, line_no, format!("duplicate theme {:?}", theme.theme)));
        }
        let mut seen = HashSet::new();
        let members: Vec<String> = theme
            .members
            .into_iter()
            .filter(|m| universe.contains(m) && seen.insert(m.clone()))
            .collect();
        if members.len() >= min_size.max(2) {
            themes.insert(theme.theme, members)?;
            stats.kept += 1;
        } else {
            stats.dropped += 1;
        }
    }
    if stats.dropped > 0 {
        log::warn!(
            "dropped {} of {} themes below {} members",
            stats.dropped,
            stats.kept + stats.dropped,
            min_size
        );
    }
    Ok((themes, stats))
}

pub fn save_themes(path: &Path, themes: &ThemeSet) -> Result<()> {
    let mut out = String::new();
    for (name, members) in themes.iter() {
        let line = ThemeLine {
            theme: name.to_string(),
            members: members.to_vec(),
        };
        out.push_str(&serde_json::to_string(&line).expect("strings serialize"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| SetnError::io(path, e))
}

/// Ticker to dense id.
pub fn ticker_index(records: &[StockRecord]) -> HashMap<String, usize> {
    records.iter().map(|r| (r.ticker.clone(), r.id)).collect()
}
