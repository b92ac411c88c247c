use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::schema::GroupMask;

/// Predictions `f(S)` for coalitions `S` of `n` groups.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CoalitionTable {
    n: usize,
    horizon: usize,
    entries: HashMap<u32, Vec<f64>>,
    /// Forward passes spent filling the table.
    pub evaluations: u64,
}

impl CoalitionTable {
    pub fn new(n: usize, horizon: usize) -> Result<Self> {
        if n > 32 {
            return Err(Error::TooManyGroups { n, cap: 32 });
        }
        Ok(Self {
            n,
            horizon,
            entries: HashMap::new(),
            evaluations: 0,
        })
    }

    /// Builds a complete table by evaluating `f` on every coalition.
    pub fn from_fn(n: usize, horizon: usize, mut f: impl FnMut(GroupMask) -> Vec<f64>) -> Result<Self> {
        let mut t = Self::new(n, horizon)?;
        for bits in 0..1u64 << n {
            let m = GroupMask::from_bits(bits as u32, n)?;
            t.insert(m, f(m))?;
        }
        Ok(t)
    }

    pub fn n_groups(&self) -> usize {
        self.n
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, mask: GroupMask, values: Vec<f64>) -> Result<()> {
        if mask.n() != self.n || values.len() != self.horizon {
            return Err(Error::invalid(format!(
                "entry {mask:?} with {} values does not fit a table of {} groups x {}",
                values.len(),
                self.n,
                self.horizon
            )));
        }
        self.entries.insert(mask.bits(), values);
        Ok(())
    }

    pub fn get(&self, mask: GroupMask) -> Option<&[f64]> {
        self.get_bits(mask.bits())
    }

    pub fn get_bits(&self, bits: u32) -> Option<&[f64]> {
        self.entries.get(&bits).map(|v| v.as_slice())
    }

    pub(crate) fn require(&self, bits: u32) -> Result<&[f64]> {
        self.get_bits(bits).ok_or(Error::IncompleteTable(bits))
    }

    pub fn full(&self) -> Option<&[f64]> {
        self.get(GroupMask::full(self.n))
    }

    pub fn empty(&self) -> Option<&[f64]> {
        self.get(GroupMask::empty(self.n))
    }

    pub fn is_complete(&self) -> bool {
        self.entries.len() == 1usize << self.n
    }

    pub fn iter(&self) -> impl Iterator<Item = (GroupMask, &[f64])> + '_ {
        self.entries
            .iter()
            .map(|(b, v)| (GroupMask::from_bits(*b, self.n).expect("stored mask"), v.as_slice()))
    }

    /// Elementwise sum of two tables over the same coalitions.
    pub fn add(&self, other: &CoalitionTable) -> Result<CoalitionTable> {
        if self.n != other.n || self.horizon != other.horizon || self.len() != other.len() {
            return Err(Error::invalid("tables have different layouts"));
        }
        let mut out = Self::new(self.n, self.horizon)?;
        for (bits, a) in &self.entries {
            let b = other.require(*bits)?;
            out.entries.insert(*bits, a.iter().zip(b).map(|(x, y)| x + y).collect());
        }
        Ok(out)
    }
}
