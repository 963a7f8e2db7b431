//! Identity-id ranges and the three disjoint splits.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::pairgen::identity_of;

/// First identity id of each population inside one scenario.
pub const GENERATOR_BASE: u64 = 0;
pub const REAL_BASE: u64 = 100_000;
pub const VALIDATION_BASE: u64 = 200_000;
pub const TEST_BASE: u64 = 300_000;
pub const SYNTH_BASE: u64 = 400_000;
pub const SYNTH_TEST_BASE: u64 = 500_000;
pub const POPULATION_CAPACITY: u64 = 100_000;

/// Identity ids used to fit the generator, to train rankers, and to test.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub generator: BTreeSet<u64>,
    pub train: BTreeSet<u64>,
    pub test: BTreeSet<u64>,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(generator: BTreeSet<u64>, train: BTreeSet<u64>, test: BTreeSet<u64>, seed: u64) -> Result<Self> {
        let s = Self {
            generator,
            train,
            test,
            seed,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, set) in [
            ("generator", &self.generator),
            ("train", &self.train),
            ("test", &self.test),
        ] {
            if set.is_empty() {
                return Err(Error::Config(format!("{name} split is empty")));
            }
        }
        let clash = |a: &BTreeSet<u64>, b: &BTreeSet<u64>| a.intersection(b).next().copied();
        if let Some(id) = clash(&self.generator, &self.train)
            .or_else(|| clash(&self.generator, &self.test))
            .or_else(|| clash(&self.train, &self.test))
        {
            return Err(Error::Config(format!("identity {id} appears in two splits")));
        }
        Ok(())
    }

    pub fn in_test(&self, item: u64) -> bool {
        self.test.contains(&identity_of(item))
    }

    pub fn in_train(&self, item: u64) -> bool {
        self.train.contains(&identity_of(item))
    }

    pub fn in_generator(&self, item: u64) -> bool {
        self.generator.contains(&identity_of(item))
    }
}

/// `count` consecutive ids starting at `base`.
pub fn id_range(base: u64, count: usize) -> Result<BTreeSet<u64>> {
    if count as u64 > POPULATION_CAPACITY {
        return Err(Error::Config(format!(
            "population of {count} identities exceeds the per-population capacity {POPULATION_CAPACITY}"
        )));
    }
    Ok((base..base + count as u64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlapping_splits_rejected() {
        let g = id_range(GENERATOR_BASE, 3).unwrap();
        let t = id_range(REAL_BASE, 3).unwrap();
        let mut test = id_range(TEST_BASE, 3).unwrap();
        assert!(SplitSpec::new(g.clone(), t.clone(), test.clone(), 0).is_ok());
        test.insert(REAL_BASE + 1);
        assert!(SplitSpec::new(g.clone(), t.clone(), test, 0).is_err());
        assert!(SplitSpec::new(g, BTreeSet::new(), id_range(TEST_BASE, 1).unwrap(), 0).is_err());
    }

    #[test]
    fn item_membership() {
        let s = SplitSpec::new(
            id_range(GENERATOR_BASE, 2).unwrap(),
            id_range(REAL_BASE, 2).unwrap(),
            id_range(TEST_BASE, 2).unwrap(),
            0,
        )
        .unwrap();
        assert!(s.in_test(TEST_BASE * 4 + 3));
        assert!(s.in_train(REAL_BASE * 4));
        assert!(!s.in_train(TEST_BASE * 4));
    }
}
