use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SetnError};

/// Tokyo Stock Exchange sector (17) and industry (33) names, spelled as in
/// the exchange's classification table, typos included.
const TSE_TABLE: [(&str, &[&str]); 17] = [
    ("FOODS", &["Fishery, Agriculture & Forestry", "Foods"]),
    ("ENERGY RESOURCES", &["Mining", "Oil and Coal Products"]),
    (
        "CONSTRUCTION&MATERIALS",
        &["Construction", "Metal Products", "Glass and Ceramics Products"],
    ),
    (
        "RAW MATERIALS&CHEMICALS",
        &["Textiles and Apparels", "Pulp and Paper", "Chemicals"],
    ),
    ("PHAMACEUTICAL", &["Pharmaceutical"]),
    (
        "AUTOMOBILES&TRANSPORTATION EQUIPMENT",
        &["Rubber Products", "Transportation Equipment"],
    ),
    ("STEEL&NONFERROUS METALS", &["Iron and Steel", "Nonferrous Metals"]),
    ("MACHINERY", &["Machinery"]),
    (
        "ELECTRIC APPLIANCES&PRECISION INSTRUMENTS",
        &["Electric Appliances", "Precision Instruments"],
    ),
    (
        "IT&SERVICES, OTHERS",
        &["Other Products", "Information & Communication", "Services"],
    ),
    ("ELECTRIC POWERT&GAS", &["Electric Power and Gas"]),
    (
        "TRANSPORTATION&LOGISTICS",
        &[
            "Land Transportation",
            "Marine Transportation",
            "Air Transportation",
            "Warehousing and Harbor Transportation",
        ],
    ),
    ("COMMERCIAL&WHOLESALE TRADE", &["Wholesale Trade"]),
    ("RETAIL TRADE", &["Retail Trade"]),
    ("BANKS", &["Banks"]),
    (
        "FINANCIAL(EXCEPT BANKS)",
        &[
            "Securities and Commodities Futures",
            "Insurance",
            "Other Financing Business",
        ],
    ),
    ("REAL ESTATE", &["Real Estate"]),
];

/// Corrected spellings accepted for the sector names above.
const SECTOR_ALIASES: [(&str, &str); 2] = [
    ("PHARMACEUTICAL", "PHAMACEUTICAL"),
    ("ELECTRIC POWER&GAS", "ELECTRIC POWERT&GAS"),
];

/// Case, punctuation and `&`/`and` insensitive key.
pub fn normalize_label(name: &str) -> String {
    name.replace('&', " and ")
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Two-level label hierarchy: every industry belongs to exactly one sector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Taxonomy {
    sectors: Vec<String>,
    industries: Vec<String>,
    industry_sector: Vec<usize>,
    sector_index: HashMap<String, usize>,
    industry_index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaxonomyFile {
    sectors: Vec<String>,
    industries: Vec<IndustryEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndustryEntry {
    name: String,
    sector: String,
}

impl Taxonomy {
    /// Builds a taxonomy from sector names and `(industry, sector index)`
    /// pairs. Every sector must own at least one industry.
    pub fn new(sectors: Vec<String>, industries: Vec<(String, usize)>) -> Result<Self> {
        let mut sector_index = HashMap::new();
        for (i, s) in sectors.iter().enumerate() {
            if sector_index.insert(normalize_label(s), i).is_some() {
                return Err(SetnError::Data(format!("duplicate sector name {s:?}")));
            }
        }
        let mut industry_index = HashMap::new();
        let mut names = Vec::with_capacity(industries.len());
        let mut map = Vec::with_capacity(industries.len());
        let mut owned = vec![false; sectors.len()];
        for (i, (name, sector)) in industries.into_iter().enumerate() {
            if sector >= sectors.len() {
                return Err(SetnError::Data(format!(
                    "industry {name:?} maps to missing sector {sector}"
                )));
            }
            if industry_index.insert(normalize_label(&name), i).is_some() {
                return Err(SetnError::Data(format!("duplicate industry name {name:?}")));
            }
            owned[sector] = true;
            names.push(name);
            map.push(sector);
        }
        if let Some(empty) = owned.iter().position(|o| !o) {
            return Err(SetnError::Data(format!(
                "sector {:?} has no industries",
                sectors[empty]
            )));
        }
        if names.is_empty() {
            return Err(SetnError::Data("taxonomy has no industries".into()));
        }
        Ok(Taxonomy {
            sectors,
            industries: names,
            industry_sector: map,
            sector_index,
            industry_index,
        })
    }

    /// The Tokyo Stock Exchange 17-sector / 33-industry classification.
    pub fn tse() -> Self {
        let sectors = TSE_TABLE.iter().map(|(s, _)| s.to_string()).collect();
        let industries = TSE_TABLE
            .iter()
            .enumerate()
            .flat_map(|(si, (_, inds))| inds.iter().map(move |i| (i.to_string(), si)))
            .collect();
        let mut t = Taxonomy::new(sectors, industries).expect("built-in table is consistent");
        for (alias, canonical) in SECTOR_ALIASES {
            let id = t.sector_index[&normalize_label(canonical)];
            t.sector_index.insert(normalize_label(alias), id);
        }
        t
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| SetnError::io(path, e))?;
        let file: TaxonomyFile = serde_json::from_str(&text).map_err(|e| SetnError::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        let lookup: HashMap<String, usize> = file
            .sectors
            .iter()
            .enumerate()
            .map(|(i, s)| (normalize_label(s), i))
            .collect();
        let industries = file
            .industries
            .into_iter()
            .map(|e| {
                lookup
                    .get(&normalize_label(&e.sector))
                    .map(|&s| (e.name.clone(), s))
                    .ok_or_else(|| {
                        SetnError::Data(format!("industry {:?} names unknown sector {:?}", e.name, e.sector))
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        Taxonomy::new(file.sectors, industries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = TaxonomyFile {
            sectors: self.sectors.clone(),
            industries: self
                .industries
                .iter()
                .zip(&self.industry_sector)
                .map(|(n, &s)| IndustryEntry {
                    name: n.clone(),
                    sector: self.sectors[s].clone(),
                })
                .collect(),
        };
        let text = serde_json::to_string_pretty(&file).expect("plain strings serialize");
        fs::write(path, text + "\n").map_err(|e| SetnError::io(path, e))
    }

    pub fn sector_count(&self) -> usize {
        self.sectors.len()
    }

    pub fn industry_count(&self) -> usize {
        self.industries.len()
    }

    pub fn sectors(&self) -> &[String] {
        &self.sectors
    }

    pub fn industries(&self) -> &[String] {
        &self.industries
    }

    pub fn sector_of(&self, industry: usize) -> usize {
        self.industry_sector[industry]
    }

    pub fn sector_id(&self, name: &str) -> Option<usize> {
        self.sector_index.get(&normalize_label(name)).copied()
    }

    pub fn industry_id(&self, name: &str) -> Option<usize> {
        self.industry_index.get(&normalize_label(name)).copied()
    }
}
