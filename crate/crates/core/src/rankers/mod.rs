//! Ranking models: linear RankSVM with local learning, RankNet behind a
//! spatial transformer, and the binary-classifier baseline.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::pairgen::OrderedPair;

pub mod classifier;
pub mod linalg;
pub mod ranknet;
pub mod ranksvm;

/// Row-per-item feature matrix addressed by item id.
#[derive(Clone, Debug, Default)]
pub struct FeatureTable {
    index: HashMap<u64, usize>,
    ids: Vec<u64>,
    data: Vec<f64>,
    dim: usize,
}

impl FeatureTable {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ..Default::default()
        }
    }

    /// Inserts or replaces the row for `id`.
    pub fn insert(&mut self, id: u64, row: &[f64]) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::InvalidInput(format!(
                "feature row for item {id} has length {}, table expects {}",
                row.len(),
                self.dim
            )));
        }
        match self.index.get(&id) {
            Some(&i) => self.data[i * self.dim..(i + 1) * self.dim].copy_from_slice(row),
            None => {
                self.index.insert(id, self.ids.len());
                self.ids.push(id);
                self.data.extend_from_slice(row);
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: u64) -> bool {
        self.index.contains_key(&id)
    }

    pub fn position(&self, id: u64) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn row(&self, pos: usize) -> &[f64] {
        &self.data[pos * self.dim..(pos + 1) * self.dim]
    }

    pub fn get(&self, id: u64) -> Result<&[f64]> {
        self.position(id)
            .map(|p| self.row(p))
            .ok_or_else(|| Error::InvalidInput(format!("no features for item {id}")))
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Copy restricted to the given ids, in the given order.
    pub fn subset(&self, ids: &[u64]) -> Result<FeatureTable> {
        let mut out = FeatureTable::new(self.dim);
        for &id in ids {
            if !out.contains(id) {
                out.insert(id, self.get(id)?)?;
            }
        }
        Ok(out)
    }
}

/// Distinct item ids referenced by `pairs`, in first-seen order.
pub fn pair_items(pairs: &[OrderedPair]) -> Vec<u64> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for p in pairs {
        for id in [p.item_a, p.item_b] {
            if seen.insert(id) {
                out.push(id);
            }
        }
    }
    out
}
