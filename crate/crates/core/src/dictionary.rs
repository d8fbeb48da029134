//! On-line feature dictionary: a FIFO of recent labeled unit features.
//!
//! Entries are copied in and never modified. Once the dictionary is full,
//! each insert evicts the entry with the smallest insertion counter.

use std::collections::VecDeque;
use std::fmt;
use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{norm, DenseMatrix};

/// Stored features must be unit vectors to within this tolerance.
pub const UNIT_TOLERANCE: f64 = 1e-6;

/// Paper-scale capacity: 40 times 128 proposals.
pub const PAPER_CAPACITY: usize = 40 * 128;

/// Proposal label. Background is classifier class 0, `Id(c)` is class `c`
/// (1-based), and unlabeled persons have no class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum IdentityLabel {
    Background,
    Unlabeled,
    Id(u32),
}

impl IdentityLabel {
    /// Classifier class index, if the label has one.
    pub fn class_index(self) -> Option<usize> {
        match self {
            IdentityLabel::Background => Some(0),
            IdentityLabel::Unlabeled => None,
            IdentityLabel::Id(c) => Some(c as usize),
        }
    }

    pub fn is_identity(self, class: u32) -> bool {
        self == IdentityLabel::Id(class)
    }
}

impl fmt::Display for IdentityLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IdentityLabel::Background => write!(f, "B"),
            IdentityLabel::Unlabeled => write!(f, "-1"),
            IdentityLabel::Id(c) => write!(f, "{c}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DictEntry {
    pub feature: Vec<f64>,
    pub label: IdentityLabel,
    pub insertion_counter: u64,
}

/// Negatives for one anchor identity, in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeSet {
    pub features: DenseMatrix,
    pub labels: Vec<IdentityLabel>,
}

impl NegativeSet {
    pub fn empty(dim: usize) -> Self {
        Self { features: DenseMatrix::zeros(0, dim), labels: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct FeatureDictionary {
    capacity: usize,
    entries: VecDeque<DictEntry>,
    next_counter: u64,
}

impl FeatureDictionary {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::ZeroCapacity);
        }
        Ok(Self { capacity, entries: VecDeque::with_capacity(capacity), next_counter: 0 })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries from oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = &DictEntry> {
        self.entries.iter()
    }

    /// Copies `feature` in with the next insertion counter, evicting the
    /// oldest entry when full. Returns the counter assigned.
    pub fn insert(&mut self, feature: &[f64], label: IdentityLabel) -> Result<u64> {
        let n = norm(feature);
        if !((n - 1.0).abs() <= UNIT_TOLERANCE) {
            return Err(Error::UnnormalizedFeature { norm: n });
        }
        if let Some(first) = self.entries.front() {
            if first.feature.len() != feature.len() {
                return Err(Error::ShapeMismatch {
                    expected: format!("feature of length {}", first.feature.len()),
                    got: format!("{}", feature.len()),
                });
            }
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        let counter = self.next_counter;
        self.next_counter += 1;
        self.entries.push_back(DictEntry { feature: feature.to_vec(), label, insertion_counter: counter });
        Ok(counter)
    }

    /// Every stored entry not labeled `Id(anchor_id)`, oldest first.
    /// Background and unlabeled entries are always included.
    pub fn negatives_for(&self, anchor_id: u32) -> Vec<(&[f64], IdentityLabel)> {
        self.entries
            .iter()
            .filter(|e| !e.label.is_identity(anchor_id))
            .map(|e| (e.feature.as_slice(), e.label))
            .collect()
    }

    /// [`negatives_for`](Self::negatives_for) packed into a shareable matrix.
    pub fn negative_set(&self, anchor_id: u32, dim: usize) -> Arc<NegativeSet> {
        let mut set = NegativeSet::empty(dim);
        for (f, label) in self.negatives_for(anchor_id) {
            set.features.push_row(f);
            set.labels.push(label);
        }
        Arc::new(set)
    }

    /// CSV dump of `insertion_counter,label,f0..f3` for golden comparisons.
    pub fn write_snapshot_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["insertion_counter", "label", "f0", "f1", "f2", "f3"])?;
        for e in &self.entries {
            let mut rec = vec![e.insertion_counter.to_string(), e.label.to_string()];
            for i in 0..4 {
                rec.push(e.feature.get(i).map(|v| v.to_string()).unwrap_or_default());
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit(i: usize) -> Vec<f64> {
        let mut v = vec![0.0; 4];
        v[i % 4] = 1.0;
        v
    }

    #[test]
    fn capacity_rules() {
        assert!(matches!(FeatureDictionary::new(0), Err(Error::ZeroCapacity)));
        assert_eq!(FeatureDictionary::new(PAPER_CAPACITY).unwrap().capacity(), 5120);
        let mut d = FeatureDictionary::new(1).unwrap();
        d.insert(&unit(0), IdentityLabel::Id(1)).unwrap();
        d.insert(&unit(1), IdentityLabel::Id(2)).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.iter().next().unwrap().label, IdentityLabel::Id(2));
    }

    #[test]
    fn fifo_eviction() {
        let mut d = FeatureDictionary::new(3).unwrap();
        for (i, c) in [1, 2, 3].into_iter().enumerate() {
            d.insert(&unit(i), IdentityLabel::Id(c)).unwrap();
            assert_eq!(d.len(), i + 1);
        }
        d.insert(&unit(3), IdentityLabel::Id(4)).unwrap();
        let labels: Vec<_> = d.iter().map(|e| e.label).collect();
        assert_eq!(labels, vec![IdentityLabel::Id(2), IdentityLabel::Id(3), IdentityLabel::Id(4)]);
        let counters: Vec<_> = d.iter().map(|e| e.insertion_counter).collect();
        assert_eq!(counters, vec![1, 2, 3]);
    }

    #[test]
    fn rejects_unnormalized() {
        let mut d = FeatureDictionary::new(3).unwrap();
        assert!(matches!(
            d.insert(&[1.0, 1.0], IdentityLabel::Background),
            Err(Error::UnnormalizedFeature { .. })
        ));
        assert!(d.is_empty());
    }

    #[test]
    fn negatives_exclude_anchor_only() {
        let mut d = FeatureDictionary::new(10).unwrap();
        d.insert(&unit(0), IdentityLabel::Id(5)).unwrap();
        d.insert(&unit(1), IdentityLabel::Background).unwrap();
        d.insert(&unit(2), IdentityLabel::Unlabeled).unwrap();
        d.insert(&unit(3), IdentityLabel::Id(7)).unwrap();
        let negs = d.negatives_for(5);
        let labels: Vec<_> = negs.iter().map(|n| n.1).collect();
        assert_eq!(labels, vec![IdentityLabel::Background, IdentityLabel::Unlabeled, IdentityLabel::Id(7)]);
        assert!(FeatureDictionary::new(4).unwrap().negatives_for(1).is_empty());
        let set = d.negative_set(7, 4);
        assert_eq!(set.len(), 3);
        assert_eq!(set.features.row(2), unit(2).as_slice());
    }

    #[test]
    fn negative_count_oracle() {
        // 5120 mixed entries; count = total - entries labeled with the anchor
        let mut d = FeatureDictionary::new(PAPER_CAPACITY).unwrap();
        let mut labels = Vec::new();
        for i in 0..PAPER_CAPACITY {
            let label = match i % 7 {
                0 => IdentityLabel::Background,
                1 => IdentityLabel::Unlabeled,
                k => IdentityLabel::Id(((i * 31 + k) % 13) as u32 + 1),
            };
            labels.push(label);
            d.insert(&unit(i), label).unwrap();
        }
        for c in 1..=13u32 {
            let own = labels.iter().filter(|l| **l == IdentityLabel::Id(c)).count();
            assert_eq!(d.negatives_for(c).len(), PAPER_CAPACITY - own);
        }
    }

    #[test]
    fn replay_oracle_at_capacity_640() {
        let mut d = FeatureDictionary::new(640).unwrap();
        let mut log = Vec::new();
        for i in 0..10_000u32 {
            let label = IdentityLabel::Id(i % 97 + 1);
            d.insert(&unit(i as usize), label).unwrap();
            log.push((i as u64, label));
        }
        let got: Vec<_> = d.iter().map(|e| (e.insertion_counter, e.label)).collect();
        assert_eq!(got, log[log.len() - 640..]);
    }

    #[test]
    fn snapshot_csv() {
        let mut d = FeatureDictionary::new(2).unwrap();
        d.insert(&[0.6, 0.8, 0.0, 0.0, 0.0], IdentityLabel::Id(3)).unwrap();
        d.insert(&unit(1).iter().chain(&[0.0]).copied().collect::<Vec<_>>(), IdentityLabel::Unlabeled).unwrap();
        d.insert(&[1.0, 0.0, 0.0, 0.0, 0.0], IdentityLabel::Background).unwrap();
        let mut buf = Vec::new();
        d.write_snapshot_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "insertion_counter,label,f0,f1,f2,f3\n1,-1,0,1,0,0\n2,B,1,0,0,0\n");
    }

    proptest! {
        #[test]
        fn contents_are_insertion_suffix(
            capacity in 1usize..50,
            labels in proptest::collection::vec(0u32..6, 0..200),
        ) {
            let mut d = FeatureDictionary::new(capacity).unwrap();
            let mut all = Vec::new();
            for (i, &l) in labels.iter().enumerate() {
                let label = match l { 0 => IdentityLabel::Background, 1 => IdentityLabel::Unlabeled, c => IdentityLabel::Id(c) };
                d.insert(&unit(i), label).unwrap();
                all.push((i as u64, label));
            }
            let keep = all.len().min(capacity);
            let got: Vec<_> = d.iter().map(|e| (e.insertion_counter, e.label)).collect();
            prop_assert_eq!(&got[..], &all[all.len() - keep..]);
            for c in 2..6 {
                prop_assert!(d.negatives_for(c).iter().all(|n| n.1 != IdentityLabel::Id(c)));
            }
        }
    }
}
