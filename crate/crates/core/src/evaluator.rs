//! Cosine retrieval, MAP@K over taxonomy labels and the thematic-fund
//! clustering metric.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};

use serde::Serialize;

use crate::error::{Result, SetnError};

/// Stock embeddings, one row per id. Rows are kept in the order given;
/// similarity ties resolve toward the earlier row.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    ids: Vec<String>,
    dim: usize,
    data: Vec<f64>,
    unit: Vec<f64>,
    index: HashMap<String, usize>,
}

impl EmbeddingMatrix {
    pub fn new(ids: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        if ids.len() != rows.len() {
            return Err(SetnError::Data(format!(
                "{} ids for {} embedding rows",
                ids.len(),
                rows.len()
            )));
        }
        let dim = rows.first().map_or(0, Vec::len);
        let mut index = HashMap::with_capacity(ids.len());
        let mut data = Vec::with_capacity(ids.len() * dim);
        let mut unit = Vec::with_capacity(ids.len() * dim);
        for (i, (id, row)) in ids.iter().zip(&rows).enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(SetnError::Data(format!("duplicate embedding id {id:?}")));
            }
            if row.len() != dim {
                return Err(SetnError::dim("embedding row", &[row.len()], &[dim]));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(SetnError::Data(format!("non-finite embedding for {id:?}")));
            }
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(SetnError::Data(format!("zero-norm embedding for {id:?}")));
            }
            data.extend_from_slice(row);
            unit.extend(row.iter().map(|v| v / norm));
        }
        Ok(EmbeddingMatrix {
            ids,
            dim,
            data,
            unit,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn cosine(&self, a: usize, b: usize) -> f64 {
        let (d, u) = (self.dim, &self.unit);
        u[a * d..(a + 1) * d]
            .iter()
            .zip(&u[b * d..(b + 1) * d])
            .map(|(x, y)| x * y)
            .sum()
    }

    /// Every other row ordered by descending cosine to `query`, ties by row.
    pub fn ranking(&self, query: usize) -> Vec<(usize, f64)> {
        let mut scored: Vec<(usize, f64)> = (0..self.len())
            .filter(|&j| j != query)
            .map(|j| (j, self.cosine(query, j)))
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
        scored
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Neighbor {
    pub id: String,
    pub similarity: f64,
}

/// Top-`k` most cosine-similar stocks to `query`, excluding itself.
pub fn cosine_knn(e: &EmbeddingMatrix, query: &str, k: usize) -> Result<Vec<Neighbor>> {
    let q = e
        .position(query)
        .ok_or_else(|| SetnError::Data(format!("unknown query id {query:?}")))?;
    if k >= e.len() {
        return Err(SetnError::Parameter(format!(
            "k = {k} needs more than {} stocks",
            e.len()
        )));
    }
    Ok(e.ranking(q)
        .into_iter()
        .take(k)
        .map(|(j, similarity)| Neighbor {
            id: e.ids[j].clone(),
            similarity,
        })
        .collect())
}

/// `Σ_{k≤K} P@k·rel_k / min(K, R)`, or 0 when nothing is relevant.
pub fn average_precision_at_k(relevance: &[bool], total_relevant: usize, k: usize) -> f64 {
    if total_relevant == 0 || k == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &rel) in relevance.iter().take(k).enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    sum / k.min(total_relevant) as f64
}

/// Mean AP@K over every row as a query, relevance meaning equal label.
/// Returns one value per entry of `ks`.
pub fn map_at_k(e: &EmbeddingMatrix, labels: &[usize], ks: &[usize]) -> Result<Vec<f64>> {
    if labels.len() != e.len() {
        return Err(SetnError::Data(format!(
            "{} labels for {} embeddings",
            labels.len(),
            e.len()
        )));
    }
    if let Some(&bad) = ks.iter().find(|&&k| k == 0) {
        return Err(SetnError::Parameter(format!("K must be positive, got {bad}")));
    }
    if e.is_empty() {
        return Err(SetnError::Data("MAP over an empty universe".into()));
    }
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    let kmax = ks.iter().copied().max().unwrap_or(0);
    let mut sums = vec![0.0; ks.len()];
    for q in 0..e.len() {
        let relevance: Vec<bool> = e
            .ranking(q)
            .into_iter()
            .take(kmax)
            .map(|(j, _)| labels[j] == labels[q])
            .collect();
        let r = counts[&labels[q]] - 1;
        for (s, &k) in sums.iter_mut().zip(ks) {
            *s += average_precision_at_k(&relevance, r, k);
        }
    }
    Ok(sums.into_iter().map(|s| s / e.len() as f64).collect())
}

/// MAP@K for each requested K under both taxonomies.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MapReport {
    pub ks: Vec<usize>,
    pub sector: Vec<f64>,
    pub industry: Vec<f64>,
}

impl MapReport {
    pub fn sector_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.sector[i])
    }

    pub fn industry_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.industry[i])
    }
}

pub fn evaluate_map(e: &EmbeddingMatrix, sector: &[usize], industry: &[usize], ks: &[usize]) -> Result<MapReport> {
    Ok(MapReport {
        ks: ks.to_vec(),
        sector: map_at_k(e, sector, ks)?,
        industry: map_at_k(e, industry, ks)?,
    })
}

/// Named stock groups; each theme has at least two distinct members.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ThemeSet {
    themes: Vec<(String, Vec<String>)>,
}

impl ThemeSet {
    pub fn insert(&mut self, name: String, members: Vec<String>) -> Result<()> {
        if self.themes.iter().any(|(n, _)| *n == name) {
            return Err(SetnError::Data(format!("duplicate theme {name:?}")));
        }
        let unique: HashSet<&String> = members.iter().collect();
        if unique.len() != members.len() {
            return Err(SetnError::Data(format!("theme {name:?} repeats a member")));
        }
        if members.len() < 2 {
            return Err(SetnError::Data(format!("theme {name:?} has fewer than 2 members")));
        }
        self.themes.push((name, members));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.themes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.themes.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[String])> {
        self.themes.iter().map(|(n, m)| (n.as_str(), m.as_slice()))
    }

    /// Copy keeping only members in `universe` and themes with at least
    /// `min_size` of them.
    pub fn restricted(&self, universe: &HashSet<String>, min_size: usize) -> ThemeSet {
        let themes = self
            .themes
            .iter()
            .map(|(n, m)| {
                let kept: Vec<String> = m.iter().filter(|x| universe.contains(*x)).cloned().collect();
                (n.clone(), kept)
            })
            .filter(|(_, m)| m.len() >= min_size.max(2))
            .collect();
        ThemeSet { themes }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ThemeScore {
    pub theme: String,
    pub size: usize,
    pub value: f64,
    /// Expected value under uniformly random embeddings.
    pub random_guess: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ThemeReport {
    pub per_theme: Vec<ThemeScore>,
    pub overall: f64,
    pub random_guess: f64,
}

/// Expected per-theme score of random embeddings: each of the `m` members
/// retrieves `m` stocks out of the `n - 1` others, `m - 1` of which share
/// the theme. With the query counted, the expectation is `1/m + (m-1)²/(m(n-1))`.
pub fn random_theme_baseline(n: usize, m: usize, include_self: bool) -> f64 {
    let (n, m) = (n as f64, m as f64);
    if include_self {
        1.0 / m + (m - 1.0) * (m - 1.0) / (m * (n - 1.0))
    } else {
        (m - 1.0) / (n - 1.0)
    }
}

/// For every member of a theme of size `m`, retrieve the `m` closest
/// stocks and count theme members among them; a theme scores the hit
/// total over `m²`, and the overall score is the mean over themes. The
/// query itself is excluded from retrieval unless `include_self`.
pub fn theme_metric(e: &EmbeddingMatrix, themes: &ThemeSet, include_self: bool) -> Result<ThemeReport> {
    let mut per_theme = Vec::with_capacity(themes.len());
    for (name, members) in themes.iter() {
        let rows: Vec<usize> = members
            .iter()
            .map(|m| {
                e.position(m)
                    .ok_or_else(|| SetnError::Data(format!("theme {name:?} member {m:?} has no embedding")))
            })
            .collect::<Result<_>>()?;
        let member_set: HashSet<usize> = rows.iter().copied().collect();
        let m = rows.len();
        let mut hits = 0usize;
        for &q in &rows {
            let retrieved = if include_self { m - 1 } else { m };
            if include_self {
                hits += 1;
            }
            hits += e
                .ranking(q)
                .into_iter()
                .take(retrieved)
                .filter(|(j, _)| member_set.contains(j))
                .count();
        }
        per_theme.push(ThemeScore {
            theme: name.to_string(),
            size: m,
            value: hits as f64 / (m * m) as f64,
            random_guess: random_theme_baseline(e.len(), m, include_self),
        });
    }
    let mean = |f: fn(&ThemeScore) -> f64| {
        if per_theme.is_empty() {
            0.0
        } else {
            per_theme.iter().map(f).sum::<f64>() / per_theme.len() as f64
        }
    };
    let overall = mean(|s| s.value);
    let random_guess = mean(|s| s.random_guess);
    Ok(ThemeReport {
        per_theme,
        overall,
        random_guess,
    })
}
