//! Sparse vectors over the canonical type enumeration.
//!
//! Types of the countable space are identified with their index in the
//! model's canonical enumeration (0, 1, 2, ...). Structured spaces (e.g.
//! ladder pairs `(n, m)`) are mapped into this enumeration by an injective
//! pairing owned by the model.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Index of a type in the canonical enumeration of the model's type space.
pub type TypeId = u32;

/// Compensated (Kahan) accumulator for h-weighted inner products.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    c: f64,
}

impl KahanSum {
    pub fn add(&mut self, x: f64) {
        let y = x - self.c;
        let t = self.sum + y;
        self.c = (t - self.sum) - y;
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum
    }
}

/// Finite real-valued map `TypeId -> f64` with no explicit zero entries.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SparseVec {
    entries: BTreeMap<TypeId, f64>,
}

impl SparseVec {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(it: impl IntoIterator<Item = (TypeId, f64)>) -> Self {
        let mut v = Self::new();
        for (x, val) in it {
            v.set(x, val);
        }
        v
    }

    pub fn get(&self, x: TypeId) -> f64 {
        self.entries.get(&x).copied().unwrap_or(0.0)
    }

    /// Sets an entry; zero values are removed (no explicit zeros).
    pub fn set(&mut self, x: TypeId, val: f64) {
        if val == 0.0 {
            self.entries.remove(&x);
        } else {
            self.entries.insert(x, val);
        }
    }

    pub fn add(&mut self, x: TypeId, val: f64) {
        let new = self.get(x) + val;
        self.set(x, new);
    }

    pub fn iter(&self) -> impl Iterator<Item = (TypeId, f64)> + '_ {
        self.entries.iter().map(|(&x, &v)| (x, v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Weighted sum `sum_x v_x * w(x)` with compensated summation.
    pub fn weighted_sum(&self, w: impl Fn(TypeId) -> f64) -> f64 {
        let mut acc = KahanSum::default();
        for (x, v) in self.iter() {
            acc.add(v * w(x));
        }
        acc.value()
    }

    /// The norm of B_h: `sum_x |v_x| h(x)`.
    pub fn norm_h(&self, h: impl Fn(TypeId) -> f64) -> f64 {
        self.weighted_sum_abs(h)
    }

    fn weighted_sum_abs(&self, w: impl Fn(TypeId) -> f64) -> f64 {
        let mut acc = KahanSum::default();
        for (x, v) in self.iter() {
            acc.add(v.abs() * w(x));
        }
        acc.value()
    }

    /// Sum of probabilities / entries (unweighted).
    pub fn total(&self) -> f64 {
        let mut acc = KahanSum::default();
        for (_, v) in self.iter() {
            acc.add(v);
        }
        acc.value()
    }
}

impl FromIterator<(TypeId, f64)> for SparseVec {
    fn from_iter<I: IntoIterator<Item = (TypeId, f64)>>(it: I) -> Self {
        Self::from_entries(it)
    }
}

/// Nonnegative-integer sparse vector: offspring draws and small populations.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CountsVec {
    entries: BTreeMap<TypeId, u64>,
}

impl CountsVec {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(it: impl IntoIterator<Item = (TypeId, u64)>) -> Self {
        let mut v = Self::new();
        for (x, c) in it {
            v.add(x, c);
        }
        v
    }

    pub fn unit(x: TypeId) -> Self {
        Self::from_entries([(x, 1)])
    }

    pub fn get(&self, x: TypeId) -> u64 {
        self.entries.get(&x).copied().unwrap_or(0)
    }

    pub fn add(&mut self, x: TypeId, c: u64) {
        if c == 0 {
            return;
        }
        // Saturating: broods this large only appear in deep-rung return
        // excursions, where the count is consumed as an f64 h-mass and the
        // relative saturation error is ~1e-19.
        let e = self.entries.entry(x).or_insert(0);
        *e = e.saturating_add(c);
    }

    pub fn set(&mut self, x: TypeId, c: u64) {
        if c == 0 {
            self.entries.remove(&x);
        } else {
            self.entries.insert(x, c);
        }
    }

    /// Removes one individual of type `x`; panics if there is none.
    pub fn remove_one(&mut self, x: TypeId) {
        let c = self.get(x);
        assert!(c > 0, "remove_one on empty coordinate {x}");
        self.set(x, c - 1);
    }

    pub fn iter(&self) -> impl Iterator<Item = (TypeId, u64)> + '_ {
        self.entries.iter().map(|(&x, &c)| (x, c))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.entries.values().sum()
    }

    /// h-weighted sum `sum_x c_x h(x)`.
    pub fn h_sum(&self, h: impl Fn(TypeId) -> f64) -> f64 {
        let mut acc = KahanSum::default();
        for (x, c) in self.iter() {
            acc.add(c as f64 * h(x));
        }
        acc.value()
    }

    pub fn merge(&mut self, other: &CountsVec) {
        for (x, c) in other.iter() {
            self.add(x, c);
        }
    }
}

/// Large sparse population vector (counts may exceed u64 on long horizons).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PopVec {
    entries: BTreeMap<TypeId, u128>,
}

impl PopVec {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn unit(x: TypeId) -> Self {
        Self::from_entries([(x, 1)])
    }

    pub fn from_entries(it: impl IntoIterator<Item = (TypeId, u128)>) -> Self {
        let mut v = Self::new();
        for (x, c) in it {
            v.add(x, c).expect("population count overflow");
        }
        v
    }

    pub fn from_counts(c: &CountsVec) -> Self {
        Self::from_entries(c.iter().map(|(x, c)| (x, c as u128)))
    }

    pub fn get(&self, x: TypeId) -> u128 {
        self.entries.get(&x).copied().unwrap_or(0)
    }

    pub fn add(&mut self, x: TypeId, c: u128) -> Result<(), ()> {
        if c == 0 {
            return Ok(());
        }
        let e = self.entries.entry(x).or_insert(0);
        *e = e.checked_add(c).ok_or(())?;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (TypeId, u128)> + '_ {
        self.entries.iter().map(|(&x, &c)| (x, c))
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn h_sum(&self, h: impl Fn(TypeId) -> f64) -> f64 {
        let mut acc = KahanSum::default();
        for (x, c) in self.iter() {
            acc.add(c as f64 * h(x));
        }
        acc.value()
    }
}
