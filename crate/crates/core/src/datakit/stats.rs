//! Per-source and per-type counts of a curated dataset.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::record::SampleRecord;

/// Data types with a fixed row in every table, in display order.
pub const KNOWN_DATA_TYPES: [&str; 3] = ["ScienceQA", "General VQA", "OCR"];
pub const OTHER_DATA_TYPE: &str = "other";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StatsTable {
    pub per_source: BTreeMap<String, usize>,
    /// Always holds every known type plus `other`, zero if absent.
    pub per_type: BTreeMap<String, usize>,
    pub total: usize,
    pub warnings: Vec<String>,
}

impl StatsTable {
    pub fn type_count(&self, name: &str) -> usize {
        self.per_type.get(name).copied().unwrap_or(0)
    }
}

fn canonical_type(tag: &str) -> Option<&'static str> {
    let key: String = tag
        .chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect();
    KNOWN_DATA_TYPES.into_iter().find(|known| {
        let k: String = known
            .chars()
            .filter(|c| c.is_alphanumeric())
            .flat_map(char::to_lowercase)
            .collect();
        k == key
    })
}

pub fn dataset_stats<'a>(records: impl IntoIterator<Item = &'a SampleRecord>) -> StatsTable {
    let mut table = StatsTable::default();
    for t in KNOWN_DATA_TYPES.iter().chain([&OTHER_DATA_TYPE]) {
        table.per_type.insert(t.to_string(), 0);
    }
    let mut unknown = BTreeMap::<String, usize>::new();
    for r in records {
        table.total += 1;
        *table.per_source.entry(r.source.clone()).or_default() += 1;
        let ty = match canonical_type(&r.data_type) {
            Some(t) => t,
            None => {
                *unknown.entry(r.data_type.clone()).or_default() += 1;
                OTHER_DATA_TYPE
            }
        };
        *table.per_type.get_mut(ty).expect("seeded") += 1;
    }
    table.warnings = unknown
        .into_iter()
        .map(|(tag, n)| format!("unknown data type {tag:?} ({n} records) counted as other"))
        .collect();
    table
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datakit::record::TaskType;

    fn rec(source: &str, ty: &str) -> SampleRecord {
        SampleRecord {
            id: format!("{source}-{ty}"),
            image: String::new(),
            question: String::new(),
            reasoning: String::new(),
            final_answer: String::new(),
            ground_truth: "x".into(),
            task_type: TaskType::ClosedEnded,
            source: source.into(),
            data_type: ty.into(),
            verdicts: vec![],
        }
    }

    #[test]
    fn counts_by_source_and_type() {
        let data: Vec<_> = [("AI2D", "ScienceQA"), ("AI2D", "ScienceQA"), ("GQA", "General VQA"), ("GQA", "general_vqa"), ("GQA", "General VQA")]
            .iter()
            .map(|(s, t)| rec(s, t))
            .collect();
        let t = dataset_stats(&data);
        assert_eq!(t.total, 5);
        assert_eq!(t.per_source["AI2D"], 2);
        assert_eq!(t.per_source["GQA"], 3);
        assert_eq!(t.type_count("OCR"), 0);
        assert_eq!(t.type_count("General VQA"), 3);
        assert!(t.warnings.is_empty());
    }

    #[test]
    fn empty_dataset() {
        let t = dataset_stats(&[]);
        assert_eq!(t.total, 0);
        assert_eq!(t.per_type.len(), 4);
    }

    #[test]
    fn unknown_type_goes_to_other() {
        let t = dataset_stats(&[rec("X", "Charts")]);
        assert_eq!(t.type_count("other"), 1);
        assert_eq!(t.warnings.len(), 1);
    }

    #[test]
    fn seven_source_table_sums() {
        let rows = [
            ("ScienceQA", "ScienceQA", 3),
            ("AI2D", "ScienceQA", 2),
            ("GQA", "General VQA", 4),
            ("LLaVA-COCO", "General VQA", 1),
            ("OCR-VQA", "OCR", 2),
            ("TextVQA", "OCR", 3),
            ("ChartQA", "OCR", 1),
        ];
        let data: Vec<_> = rows
            .iter()
            .flat_map(|(s, t, n)| (0..*n).map(move |_| rec(s, t)))
            .collect();
        let t = dataset_stats(&data);
        assert_eq!(t.per_source.len(), 7);
        assert_eq!(t.total, t.per_source.values().sum::<usize>());
        assert_eq!(t.total, t.per_type.values().sum::<usize>());
        assert_eq!(t.type_count("OCR"), 6);
    }
}
