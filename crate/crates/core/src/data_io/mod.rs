//! Input formats, the built-in taxonomy, synthetic universes and
//! embedding export.

mod export;
mod records;
mod synthetic;
mod taxonomy;

pub use export::{export_embeddings, import_binary, import_tsv, ExportFormat, BINARY_MAGIC};
pub use records::{
    load_edges, load_nodes, load_themes, save_edges, save_nodes, save_themes, ticker_index,
    validate_taxonomy, StockRecord, TaxonomyViolation, ThemeLoadStats,
};
pub use synthetic::{generate_synthetic, SyntheticDataset, SyntheticSpec};
pub use taxonomy::{normalize_label, Taxonomy};
