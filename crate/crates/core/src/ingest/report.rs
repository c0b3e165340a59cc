use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Per-dataset ingest counters.
///
/// Conservation: `read = accepted + dropped_point_count + dropped_outdoor +
/// dropped_schema`. `kept_unknown_scene` is a subset of `accepted`;
/// `derived_mcq` counts multiple-choice items built from accepted clips and
/// sits outside the identity.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetCounts {
    pub read: u64,
    pub accepted: u64,
    pub dropped_point_count: u64,
    pub dropped_outdoor: u64,
    pub dropped_schema: u64,
    pub kept_unknown_scene: u64,
    pub injected_invalid: u64,
    pub derived_mcq: u64,
    pub mcq_pool_too_small: u64,
}

impl DatasetCounts {
    pub fn is_conserved(&self) -> bool {
        self.read == self.accepted + self.dropped_point_count + self.dropped_outdoor + self.dropped_schema
    }

    pub fn merge(&mut self, other: &DatasetCounts) {
        self.read += other.read;
        self.accepted += other.accepted;
        self.dropped_point_count += other.dropped_point_count;
        self.dropped_outdoor += other.dropped_outdoor;
        self.dropped_schema += other.dropped_schema;
        self.kept_unknown_scene += other.kept_unknown_scene;
        self.injected_invalid += other.injected_invalid;
        self.derived_mcq += other.derived_mcq;
        self.mcq_pool_too_small += other.mcq_pool_too_small;
    }

    /// Samples emitted downstream: accepted records plus derived items.
    pub fn emitted(&self) -> u64 {
        self.accepted + self.derived_mcq
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub datasets: BTreeMap<String, DatasetCounts>,
    /// Declared record counts from the corpus manifest, where given.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub expected_counts: BTreeMap<String, u64>,
}

impl IngestReport {
    pub fn dataset_mut(&mut self, name: &str) -> &mut DatasetCounts {
        self.datasets.entry(name.to_string()).or_default()
    }

    /// Associative and commutative combination of partial reports.
    pub fn merge(&mut self, other: &IngestReport) {
        for (name, counts) in &other.datasets {
            self.dataset_mut(name).merge(counts);
        }
        for (name, n) in &other.expected_counts {
            *self.expected_counts.entry(name.clone()).or_default() += n;
        }
    }

    pub fn total(&self) -> DatasetCounts {
        let mut total = DatasetCounts::default();
        for c in self.datasets.values() {
            total.merge(c);
        }
        total
    }

    pub fn is_conserved(&self) -> bool {
        self.datasets.values().all(DatasetCounts::is_conserved)
    }

    /// Datasets whose read count disagrees with the manifest's declared count.
    pub fn expected_count_mismatches(&self) -> Vec<(String, u64, u64)> {
        self.expected_counts
            .iter()
            .filter_map(|(name, &expected)| {
                let read = self.datasets.get(name).map_or(0, |c| c.read);
                (read != expected).then(|| (name.clone(), expected, read))
            })
            .collect()
    }
}
