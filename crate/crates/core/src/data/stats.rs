use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::Serialize;

use super::record::{Category, InstructionRecord};

/// Instruction counts per category in the published training mix.
pub const REFERENCE_CATEGORY_COUNTS: [(Category, usize); 6] = [
    (Category::Conversation, 101_175),
    (Category::Description, 98_821),
    (Category::MultipleChoice, 29_987),
    (Category::FreeResponse, 7_981),
    (Category::TextOnly, 3_040),
    (Category::Guardrail, 16_000),
];

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct DatasetStats {
    pub records: usize,
    pub per_category: BTreeMap<Category, usize>,
    pub turns: usize,
    pub unique_images: usize,
    /// Mean width and height over readable referenced images.
    pub mean_width: f64,
    pub mean_height: f64,
    /// References that could not be opened as images.
    pub dangling: Vec<String>,
}

/// Counts records, turns and images. With `image_dir`, each unique reference
/// is opened to measure it; unreadable ones are listed, not fatal.
pub fn dataset_stats(records: &[InstructionRecord], image_dir: Option<&Path>) -> DatasetStats {
    let mut stats = DatasetStats::default();
    let mut images = BTreeSet::new();
    for r in records {
        stats.records += 1;
        *stats.per_category.entry(r.category).or_default() += 1;
        stats.turns += r.turns.len();
        images.extend(r.images.iter().cloned());
    }
    stats.unique_images = images.len();
    if let Some(dir) = image_dir {
        let (mut w, mut h, mut n) = (0.0, 0.0, 0usize);
        for name in &images {
            match image::image_dimensions(dir.join(name)) {
                Ok((iw, ih)) => {
                    w += iw as f64;
                    h += ih as f64;
                    n += 1;
                }
                Err(_) => stats.dangling.push(name.clone()),
            }
        }
        if n > 0 {
            stats.mean_width = w / n as f64;
            stats.mean_height = h / n as f64;
        }
    }
    stats
}
