//! Seeded synthetic universes with tunable text, graph and direction signal.
//!
//! Labels come first. Each document picks a topic industry (its own with
//! probability `text_signal`, otherwise a random one) and draws a fixed
//! share of its tokens from that topic's industry and sector word pools,
//! the rest from a shared background pool.
//!
//! Every stock receives `in_degree` incoming edges. An edge is informative
//! with probability `graph_signal`, otherwise its source is uniform. An
//! informative edge comes, with probability `direction_signal`, from a small
//! fixed set of "driver" stocks owned by the target's industry (drivers
//! belong to other sectors), and otherwise from a random same-industry
//! stock. Driver edges identify the target's industry only when read in
//! the cause→effect direction: a driver's own out-edges fan into many
//! industries.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::records::{save_edges, save_nodes, save_themes, StockRecord};
use super::taxonomy::Taxonomy;
use crate::error::{Result, SetnError};
use crate::evaluator::ThemeSet;
use crate::graph::StockGraph;
use crate::text_encoder::Vocab;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n: usize,
    pub sector_classes: usize,
    pub industry_classes: usize,
    /// Tokens outside the reserved ids.
    pub vocab_size: usize,
    pub tokens_per_doc: usize,
    pub in_degree: usize,
    pub drivers_per_industry: usize,
    /// Share of a document's tokens drawn from its topic's word pools.
    pub topic_fraction: f64,
    pub text_signal: f64,
    pub graph_signal: f64,
    pub direction_signal: f64,
    pub theme_count: usize,
    pub theme_size: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n: 300,
            sector_classes: 17,
            industry_classes: 33,
            vocab_size: 600,
            tokens_per_doc: 16,
            in_degree: 4,
            drivers_per_industry: 3,
            topic_fraction: 0.8,
            text_signal: 0.6,
            graph_signal: 0.6,
            direction_signal: 0.0,
            theme_count: 6,
            theme_size: 20,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(SetnError::Parameter(m));
        if self.sector_classes == 0 || self.industry_classes < self.sector_classes {
            return fail(format!(
                "need 1 <= sector classes ({}) <= industry classes ({})",
                self.sector_classes, self.industry_classes
            ));
        }
        if self.industry_classes > self.n {
            return fail(format!(
                "{} industries cannot all appear among {} stocks",
                self.industry_classes, self.n
            ));
        }
        if self.n < 2 {
            return fail("need at least 2 stocks".into());
        }
        if self.tokens_per_doc == 0 || self.tokens_per_doc >= crate::text_encoder::MAX_TOKENS {
            return fail(format!("tokens_per_doc {} outside 1..512", self.tokens_per_doc));
        }
        for (name, p) in [
            ("topic_fraction", self.topic_fraction),
            ("text_signal", self.text_signal),
            ("graph_signal", self.graph_signal),
            ("direction_signal", self.direction_signal),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("{name} {p} outside [0, 1]"));
            }
        }
        let (ind, sec, bg) = self.pool_sizes();
        if ind == 0 || sec == 0 || bg == 0 {
            return fail(format!(
                "vocab_size {} too small for {} industries and {} sectors",
                self.vocab_size, self.industry_classes, self.sector_classes
            ));
        }
        if self.theme_count > 0 && (self.theme_size < 2 || self.theme_size > self.n) {
            return fail(format!("theme_size {} outside 2..={}", self.theme_size, self.n));
        }
        if self.sector_classes > 1 || self.direction_signal == 0.0 {
            Ok(())
        } else {
            fail("driver stocks need a second sector".into())
        }
    }

    /// Words per industry pool, per sector pool, and in the background pool.
    fn pool_sizes(&self) -> (usize, usize, usize) {
        let quarter = self.vocab_size / 4;
        let ind = quarter / self.industry_classes;
        let sec = quarter / self.sector_classes;
        let bg = self
            .vocab_size
            .saturating_sub(ind * self.industry_classes + sec * self.sector_classes);
        (ind, sec, bg)
    }
}

/// Everything a training run needs, plus the themes.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub records: Vec<StockRecord>,
    pub graph: StockGraph,
    pub themes: ThemeSet,
    pub taxonomy: Taxonomy,
    pub vocab: Vocab,
}

impl SyntheticDataset {
    /// Writes nodes.jsonl, edges.tsv, themes.jsonl, vocab.txt and taxonomy.json.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| SetnError::io(dir, e))?;
        save_nodes(&dir.join("nodes.jsonl"), &self.records, &self.taxonomy)?;
        save_edges(&dir.join("edges.tsv"), &self.graph)?;
        save_themes(&dir.join("themes.jsonl"), &self.themes)?;
        self.vocab.save(&dir.join("vocab.txt"))?;
        self.taxonomy.save(&dir.join("taxonomy.json"))
    }
}

fn word(prefix: char, i: usize) -> String {
    format!("{prefix}{i:04}")
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n;
    let (n_ind, n_sec) = (spec.industry_classes, spec.sector_classes);

    // Surjective industry -> sector map.
    let mut industry_sector: Vec<usize> = (0..n_ind).map(|i| i % n_sec).collect();
    industry_sector[n_sec..].iter_mut().for_each(|s| *s = rng.random_range(0..n_sec));
    industry_sector.shuffle(&mut rng);
    let taxonomy = Taxonomy::new(
        (0..n_sec).map(|s| format!("SECTOR {s:02}")).collect(),
        (0..n_ind).map(|i| (format!("Industry {i:02}"), industry_sector[i])).collect(),
    )?;

    // Every industry appears at least once.
    let mut industry: Vec<usize> = (0..n).map(|i| if i < n_ind { i } else { rng.random_range(0..n_ind) }).collect();
    industry.shuffle(&mut rng);
    let sector: Vec<usize> = industry.iter().map(|&i| industry_sector[i]).collect();

    // Word pools: industry words, sector words, background words.
    let (ind_pool, sec_pool, bg_pool) = spec.pool_sizes();
    let ind_words = |i: usize| (0..ind_pool).map(move |k| word('i', i * ind_pool + k));
    let sec_words = |s: usize| (0..sec_pool).map(move |k| word('s', s * sec_pool + k));
    let mut vocab_words: Vec<String> = Vec::new();
    for i in 0..n_ind {
        vocab_words.extend(ind_words(i));
    }
    for s in 0..n_sec {
        vocab_words.extend(sec_words(s));
    }
    vocab_words.extend((0..bg_pool).map(|k| word('b', k)));
    let vocab = Vocab::from_tokens(vocab_words)?;

    let mut records = Vec::with_capacity(n);
    for id in 0..n {
        let topic = if rng.random::<f64>() < spec.text_signal {
            industry[id]
        } else {
            rng.random_range(0..n_ind)
        };
        let mut tokens = Vec::with_capacity(spec.tokens_per_doc);
        for _ in 0..spec.tokens_per_doc {
            let w = if rng.random::<f64>() < spec.topic_fraction {
                if rng.random::<bool>() {
                    word('i', topic * ind_pool + rng.random_range(0..ind_pool))
                } else {
                    word('s', industry_sector[topic] * sec_pool + rng.random_range(0..sec_pool))
                }
            } else {
                word('b', rng.random_range(0..bg_pool))
            };
            tokens.push(w);
        }
        records.push(StockRecord {
            id,
            ticker: format!("S{id:04}"),
            text: tokens.join(" "),
            sector: sector[id],
            industry: industry[id],
        });
    }

    // Driver sets: per industry, stocks from other sectors.
    let mut drivers: Vec<Vec<usize>> = Vec::with_capacity(n_ind);
    for ind in 0..n_ind {
        let candidates: Vec<usize> = (0..n).filter(|&v| sector[v] != industry_sector[ind]).collect();
        let mut set: Vec<usize> = candidates
            .choose_multiple(&mut rng, spec.drivers_per_industry.min(candidates.len()))
            .copied()
            .collect();
        set.sort_unstable();
        drivers.push(set);
    }
    let members: Vec<Vec<usize>> = (0..n_ind)
        .map(|ind| (0..n).filter(|&v| industry[v] == ind).collect())
        .collect();

    let mut edges = BTreeSet::new();
    for v in 0..n {
        for _ in 0..spec.in_degree {
            let informative = rng.random::<f64>() < spec.graph_signal;
            let pool: Vec<usize> = if informative {
                if rng.random::<f64>() < spec.direction_signal {
                    drivers[industry[v]].clone()
                } else {
                    members[industry[v]].clone()
                }
            } else {
                Vec::new()
            };
            let pool: Vec<usize> = pool.into_iter().filter(|&u| u != v).collect();
            let src = match pool.choose(&mut rng) {
                Some(&u) => u,
                None => {
                    let u = rng.random_range(0..n - 1);
                    if u >= v {
                        u + 1
                    } else {
                        u
                    }
                }
            };
            edges.insert((src, v));
        }
    }
    let graph = StockGraph::new(n, edges, true)?;

    // Themes: even-numbered ones mostly from one sector, odd ones uniform.
    let mut themes = ThemeSet::default();
    for t in 0..spec.theme_count {
        let mut chosen: BTreeSet<usize> = BTreeSet::new();
        if t % 2 == 0 {
            let anchor = rng.random_range(0..n_sec);
            let pool: Vec<usize> = (0..n).filter(|&v| sector[v] == anchor).collect();
            let want = (spec.theme_size * 3 / 4).min(pool.len());
            chosen.extend(pool.choose_multiple(&mut rng, want).copied());
        }
        while chosen.len() < spec.theme_size {
            chosen.insert(rng.random_range(0..n));
        }
        let members = chosen.into_iter().map(|v| records[v].ticker.clone()).collect();
        themes.insert(format!("theme{t:02}"), members)?;
    }

    Ok(SyntheticDataset {
        records,
        graph,
        themes,
        taxonomy,
        vocab,
    })
}
