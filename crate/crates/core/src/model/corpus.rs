//! Labeled training samples and the cumulative corpus.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::domain::{ProductId, QueryId, RelevanceLabel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleProvenance {
    Initial,
    Sampled,
    Correction,
    Refined,
    Probe,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub query_id: QueryId,
    pub query_text: String,
    pub product_id: ProductId,
    pub label: RelevanceLabel,
    pub provenance: SampleProvenance,
    pub cycle: u64,
}

impl Sample {
    pub fn dedup_key(&self) -> (String, ProductId, RelevanceLabel) {
        (self.query_text.to_lowercase(), self.product_id.clone(), self.label)
    }
}

/// Cumulative corpus. Samples are never removed; corrections rewrite labels
/// in place and keep sample identity.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub samples: Vec<Sample>,
}

impl Corpus {
    pub fn new(samples: Vec<Sample>) -> Self {
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Appends samples whose dedup key is new; returns the number dropped.
    pub fn merge(&mut self, incoming: &[Sample]) -> usize {
        let mut keys: BTreeSet<_> = self.samples.iter().map(Sample::dedup_key).collect();
        let mut ids: BTreeSet<String> = self.samples.iter().map(|s| s.id.clone()).collect();
        let mut dropped = 0;
        for s in incoming {
            if keys.insert(s.dedup_key()) && ids.insert(s.id.clone()) {
                self.samples.push(s.clone());
            } else {
                dropped += 1;
            }
        }
        dropped
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(id: &str, q: &str, p: &str, l: u8) -> Sample {
        Sample {
            id: id.into(),
            query_id: "q".into(),
            query_text: q.into(),
            product_id: p.into(),
            label: RelevanceLabel::new(l).unwrap(),
            provenance: SampleProvenance::Sampled,
            cycle: 1,
        }
    }

    #[test]
    fn merge_dedups_exact_keys_only() {
        let mut c = Corpus::new(vec![s("a", "shoes", "p1", 3)]);
        let dropped = c.merge(&[s("b", "Shoes", "p1", 3), s("c", "shoes", "p1", 2), s("d", "shoes", "p2", 3)]);
        assert_eq!(dropped, 1);
        assert_eq!(c.len(), 3);
    }
}
