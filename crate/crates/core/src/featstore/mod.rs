//! Feature records, the on-disk feature formats, continual task-stream
//! construction and synthetic Gaussian-cluster data.

mod io;
pub(crate) mod stream;
mod synthetic;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{ClassId, RecordId};

pub use io::{load_features, read_binary, read_csv, save_features, write_binary, write_csv, FileFormat};
pub use stream::{build_task_stream, MixRatio, StreamConfig, TaskSpec, TaskStream};
pub use synthetic::{gen_synthetic, synthetic_centers, SyntheticSpec};

/// One embedded sample. `true_class` is hidden from the algorithms and only
/// read by the labeling oracle and the evaluator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub id: RecordId,
    pub vector: Vec<f32>,
    pub true_class: Option<ClassId>,
}

/// A validated collection of feature records sharing one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    dim: usize,
    records: Vec<FeatureRecord>,
    by_id: HashMap<RecordId, usize>,
    class_index: BTreeMap<ClassId, Vec<RecordId>>,
}

impl FeatureSet {
    /// Validates dimension, finiteness, id uniqueness and label presence
    /// (all records labeled or none) and builds the class index.
    pub fn new(dim: usize, records: Vec<FeatureRecord>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Format("dimension must be positive".into()));
        }
        let labeled = records.first().is_none_or(|r| r.true_class.is_some());
        let mut by_id = HashMap::with_capacity(records.len());
        let mut class_index: BTreeMap<ClassId, Vec<RecordId>> = BTreeMap::new();
        for (pos, record) in records.iter().enumerate() {
            if record.vector.len() != dim {
                return Err(Error::Dimension {
                    expected: dim,
                    actual: record.vector.len(),
                    context: Some(format!("record {}", record.id)),
                });
            }
            if record.vector.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data { id: record.id });
            }
            if record.true_class.is_some() != labeled {
                return Err(Error::InvalidData(format!(
                    "record {} breaks all-or-none label presence",
                    record.id
                )));
            }
            if by_id.insert(record.id, pos).is_some() {
                return Err(Error::InvalidData(format!("duplicate record id {}", record.id)));
            }
            if let Some(class) = record.true_class {
                class_index.entry(class).or_default().push(record.id);
            }
        }
        Ok(Self {
            dim,
            records,
            by_id,
            class_index,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[FeatureRecord] {
        &self.records
    }

    pub fn is_labeled(&self) -> bool {
        self.records.first().is_some_and(|r| r.true_class.is_some())
    }

    pub fn get(&self, id: RecordId) -> Option<&FeatureRecord> {
        self.by_id.get(&id).map(|&pos| &self.records[pos])
    }

    /// Vector of a record known to exist; panics otherwise.
    pub fn vector(&self, id: RecordId) -> &[f32] {
        &self.records[self.by_id[&id]].vector
    }

    pub fn true_class(&self, id: RecordId) -> Option<ClassId> {
        self.get(id).and_then(|r| r.true_class)
    }

    pub fn class_index(&self) -> &BTreeMap<ClassId, Vec<RecordId>> {
        &self.class_index
    }

    pub fn class_ids(&self) -> Vec<ClassId> {
        self.class_index.keys().copied().collect()
    }

    /// A copy of the set with every vector multiplied by `factor`.
    pub fn scaled(&self, factor: f32) -> Result<Self> {
        let records = self
            .records
            .iter()
            .map(|r| FeatureRecord {
                id: r.id,
                vector: r.vector.iter().map(|v| v * factor).collect(),
                true_class: r.true_class,
            })
            .collect();
        Self::new(self.dim, records)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: RecordId, vector: Vec<f32>, class: Option<ClassId>) -> FeatureRecord {
        FeatureRecord {
            id,
            vector,
            true_class: class,
        }
    }

    #[test]
    fn class_index_covers_records() {
        let fs = FeatureSet::new(
            2,
            vec![
                rec(5, vec![0.0, 1.0], Some(1)),
                rec(6, vec![1.0, 1.0], Some(0)),
                rec(7, vec![2.0, 1.0], Some(1)),
            ],
        )
        .unwrap();
        assert_eq!(fs.class_index()[&1], vec![5, 7]);
        assert_eq!(fs.class_index()[&0], vec![6]);
        assert_eq!(fs.true_class(6), Some(0));
        assert_eq!(fs.vector(7), &[2.0, 1.0]);
    }

    #[test]
    fn rejects_bad_records() {
        let dup = FeatureSet::new(1, vec![rec(1, vec![0.0], Some(0)), rec(1, vec![1.0], Some(0))]);
        assert!(matches!(dup, Err(Error::InvalidData(_))));

        let nan = FeatureSet::new(1, vec![rec(3, vec![f32::NAN], Some(0))]);
        assert!(matches!(nan, Err(Error::Data { id: 3 })));

        let short = FeatureSet::new(2, vec![rec(1, vec![0.0], Some(0))]);
        assert!(matches!(short, Err(Error::Dimension { expected: 2, actual: 1, .. })));

        let mixed = FeatureSet::new(1, vec![rec(1, vec![0.0], Some(0)), rec(2, vec![0.0], None)]);
        assert!(mixed.is_err());
    }
}
