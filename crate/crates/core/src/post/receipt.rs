use std::collections::{BTreeMap, HashMap};
use std::io::Read;

use serde::{Deserialize, Serialize};

use super::Detection;

#[derive(Debug, thiserror::Error)]
pub enum CatalogError {
    #[error("catalog csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("catalog: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub class_id: usize,
    pub name: String,
    /// Minor currency units.
    pub unit_price_minor: u64,
    #[serde(default)]
    pub threshold: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Catalog {
    entries: BTreeMap<usize, CatalogEntry>,
}

impl Catalog {
    pub fn new(entries: Vec<CatalogEntry>) -> Result<Self, CatalogError> {
        let mut map = BTreeMap::new();
        for e in entries {
            if let Some(t) = e.threshold {
                if !(0.0..=1.0).contains(&t) {
                    return Err(CatalogError::Invalid(format!(
                        "class {} threshold {t}",
                        e.class_id
                    )));
                }
            }
            let id = e.class_id;
            if map.insert(id, e).is_some() {
                return Err(CatalogError::Invalid(format!("duplicate class_id {id}")));
            }
        }
        Ok(Catalog { entries: map })
    }

    /// CSV with header `class_id,name,unit_price_minor,threshold`; the
    /// threshold column may be empty or absent.
    pub fn from_csv<R: Read>(reader: R) -> Result<Self, CatalogError> {
        let mut rdr = csv::ReaderBuilder::new()
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let entries = rdr
            .deserialize()
            .collect::<Result<Vec<CatalogEntry>, _>>()?;
        Self::new(entries)
    }

    pub fn to_csv(&self) -> Result<String, CatalogError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for e in self.entries.values() {
            w.serialize(e)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| CatalogError::Invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv writer emits utf-8"))
    }

    pub fn get(&self, class_id: usize) -> Option<&CatalogEntry> {
        self.entries.get(&class_id)
    }

    pub fn entries(&self) -> impl Iterator<Item = &CatalogEntry> {
        self.entries.values()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReceiptLine {
    pub class_id: usize,
    pub name: String,
    pub unit_price: u64,
    pub count: u64,
    pub line_total: u64,
    /// Set for classes missing from the catalog; priced at zero.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub unknown: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Receipt {
    pub image_id: String,
    pub lines: Vec<ReceiptLine>,
    pub total: u64,
    pub threshold_used: f64,
}

/// Groups detections by class after per-class threshold overrides.
/// Lines are ordered by class id.
pub fn build_receipt(
    dets: &[Detection],
    catalog: &Catalog,
    image_id: &str,
    threshold_used: f64,
) -> Receipt {
    let mut counts: HashMap<usize, u64> = HashMap::new();
    for d in dets {
        let min = catalog
            .get(d.class_id)
            .and_then(|e| e.threshold)
            .unwrap_or(0.0);
        if d.score >= min {
            *counts.entry(d.class_id).or_default() += 1;
        }
    }
    let mut ids: Vec<usize> = counts.keys().copied().collect();
    ids.sort_unstable();
    let lines: Vec<ReceiptLine> = ids
        .into_iter()
        .map(|id| {
            let count = counts[&id];
            match catalog.get(id) {
                Some(e) => ReceiptLine {
                    class_id: id,
                    name: e.name.clone(),
                    unit_price: e.unit_price_minor,
                    count,
                    line_total: e.unit_price_minor * count,
                    unknown: false,
                },
                None => ReceiptLine {
                    class_id: id,
                    name: format!("unknown-{id}"),
                    unit_price: 0,
                    count,
                    line_total: 0,
                    unknown: true,
                },
            }
        })
        .collect();
    let total = lines.iter().map(|l| l.line_total).sum();
    Receipt {
        image_id: image_id.to_string(),
        lines,
        total,
        threshold_used,
    }
}
