//! Offspring distributions: exact mean rows, samplers, size-biasing and
//! moment oracles.
//!
//! Four families cover the gallery and the construction machinery:
//! finite pmfs over offspring vectors, finitely many independent Poisson
//! coordinates (plus a deterministic part), infinite independent-Poisson
//! rows enumerated with a certified h-mass tail bound, and a heavy-tailed
//! single-coordinate law with `P(L = k)` proportional to
//! `k^-2 (log k)^-2` for `k >= 2`.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::types::{CountsVec, KahanSum, PopVec, SparseVec, TypeId};

/// log_+(t) = max(log t, 0); the t = 0 summand contributes 0.
pub fn log_plus(t: f64) -> f64 {
    if t > 1.0 {
        t.ln()
    } else {
        0.0
    }
}

/// Result of a moment-oracle query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CondValue {
    /// Closed form or summation accurate to well below test tolerances.
    Exact(f64),
    /// Analytically divergent expectation.
    Diverging,
    /// No exact path; caller may fall back to Monte Carlo.
    NeedsMc,
}

/// One offspring draw, with the h-mass bound on any truncated coordinates
/// (zero for laws with finitely many nonzero coordinates).
#[derive(Debug, Clone)]
pub struct Draw {
    pub counts: CountsVec,
    pub tail_bias: f64,
}

#[derive(Clone)]
pub enum OffspringLaw {
    /// Finite list of (offspring vector, probability) atoms; probabilities sum to 1.
    FinitePmf(FinitePmf),
    /// Deterministic counts plus independent Poisson counts on finitely many
    /// coordinates (a coordinate may carry both).
    IndepPoisson(IndepPoisson),
    /// Infinitely many independent Poisson coordinates, enumerated with a
    /// certified h-mass tail bound.
    PoissonRow(PoissonRow),
    /// P(L_child = k) proportional to k^-2 (log k)^-2, k >= 2.
    HeavyTail(Arc<HeavyTailLaw>),
}

#[derive(Debug, Clone)]
pub struct FinitePmf {
    pub atoms: Vec<(CountsVec, f64)>,
}

#[derive(Debug, Clone, Default)]
pub struct IndepPoisson {
    pub det: CountsVec,
    /// (coordinate, Poisson mean); coordinates distinct.
    pub poisson: Vec<(TypeId, f64)>,
}

#[derive(Clone)]
pub struct PoissonRow {
    /// i-th nonzero coordinate of the row: (type, Poisson mean). Types are
    /// strictly increasing in i.
    pub coords: Arc<dyn Fn(usize) -> (TypeId, f64) + Send + Sync>,
    /// Upper bound on sum_{j >= i} mean_j * h(type_j).
    pub h_tail: Arc<dyn Fn(usize) -> f64 + Send + Sync>,
}

impl OffspringLaw {
    pub fn deterministic(counts: CountsVec) -> Self {
        OffspringLaw::FinitePmf(FinitePmf {
            atoms: vec![(counts, 1.0)],
        })
    }

    /// Whether a draw a.s. has finitely many nonzero coordinates.
    pub fn finite_support(&self) -> bool {
        !matches!(self, OffspringLaw::PoissonRow(_))
    }

    /// Exact mean at one coordinate.
    pub fn mean_coord(&self, y: TypeId) -> f64 {
        match self {
            OffspringLaw::FinitePmf(f) => {
                let mut acc = KahanSum::default();
                for (c, p) in &f.atoms {
                    acc.add(c.get(y) as f64 * p);
                }
                acc.value()
            }
            OffspringLaw::IndepPoisson(ip) => {
                let mut m = ip.det.get(y) as f64;
                for &(t, lam) in &ip.poisson {
                    if t == y {
                        m += lam;
                    }
                }
                m
            }
            OffspringLaw::PoissonRow(row) => {
                let mut i = 0usize;
                loop {
                    let (t, lam) = (row.coords)(i);
                    if t == y {
                        return lam;
                    }
                    if t > y {
                        return 0.0;
                    }
                    i += 1;
                    if i > 1_000_000 {
                        return 0.0;
                    }
                }
            }
            OffspringLaw::HeavyTail(h) => {
                if y == h.child {
                    h.mean
                } else {
                    0.0
                }
            }
        }
    }

    /// Exact mean row restricted to the enumeration prefix, plus the exact
    /// dropped h-mass when `h` is supplied. Errors with an uncertified-tail
    /// condition if coordinates are dropped and no h is available.
    pub fn mean_row(
        &self,
        prefix: usize,
        h: Option<&dyn Fn(TypeId) -> f64>,
    ) -> Result<(SparseVec, f64)> {
        match self {
            OffspringLaw::PoissonRow(row) => {
                let mut v = SparseVec::new();
                let mut i = 0usize;
                loop {
                    let (t, lam) = (row.coords)(i);
                    if (t as usize) >= prefix {
                        return Ok((v, (row.h_tail)(i)));
                    }
                    v.add(t, lam);
                    i += 1;
                }
            }
            _ => {
                let full = self.full_mean_row();
                let mut v = SparseVec::new();
                let mut tail = KahanSum::default();
                let mut dropped = false;
                for (t, m) in full.iter() {
                    if (t as usize) < prefix {
                        v.add(t, m);
                    } else {
                        dropped = true;
                        if let Some(h) = h {
                            tail.add(m * h(t));
                        }
                    }
                }
                if dropped && h.is_none() {
                    return Err(Error::UncertifiedTail(
                        "mean row drops coordinates and no h is available for a tail bound"
                            .into(),
                    ));
                }
                Ok((v, tail.value()))
            }
        }
    }

    /// Full mean row for laws with finitely many nonzero mean coordinates.
    /// Panics for `PoissonRow` (use `mean_row` with a prefix).
    pub fn full_mean_row(&self) -> SparseVec {
        match self {
            OffspringLaw::FinitePmf(f) => {
                let mut v = SparseVec::new();
                for (c, p) in &f.atoms {
                    for (t, k) in c.iter() {
                        v.add(t, k as f64 * p);
                    }
                }
                v
            }
            OffspringLaw::IndepPoisson(ip) => {
                let mut v = SparseVec::new();
                for (t, k) in ip.det.iter() {
                    v.add(t, k as f64);
                }
                for &(t, lam) in &ip.poisson {
                    v.add(t, lam);
                }
                v
            }
            OffspringLaw::HeavyTail(h) => SparseVec::from_entries([(h.child, h.mean)]),
            OffspringLaw::PoissonRow(_) => {
                panic!("full_mean_row on an infinite Poisson row")
            }
        }
    }

    /// Restricts the law to coordinates `< prefix`, turning an infinite row
    /// into a finite independent-Poisson law (the truncated-model device).
    pub fn restrict(&self, prefix: usize) -> OffspringLaw {
        match self {
            OffspringLaw::FinitePmf(f) => {
                let mut atoms: Vec<(CountsVec, f64)> = Vec::new();
                for (c, p) in &f.atoms {
                    let rc =
                        CountsVec::from_entries(c.iter().filter(|&(t, _)| (t as usize) < prefix));
                    if let Some(slot) = atoms.iter_mut().find(|(a, _)| *a == rc) {
                        slot.1 += p;
                    } else {
                        atoms.push((rc, *p));
                    }
                }
                OffspringLaw::FinitePmf(FinitePmf { atoms })
            }
            OffspringLaw::IndepPoisson(ip) => OffspringLaw::IndepPoisson(IndepPoisson {
                det: CountsVec::from_entries(ip.det.iter().filter(|&(t, _)| (t as usize) < prefix)),
                poisson: ip
                    .poisson
                    .iter()
                    .copied()
                    .filter(|&(t, _)| (t as usize) < prefix)
                    .collect(),
            }),
            OffspringLaw::PoissonRow(row) => {
                let mut poisson = Vec::new();
                let mut i = 0usize;
                loop {
                    let (t, lam) = (row.coords)(i);
                    if (t as usize) >= prefix {
                        break;
                    }
                    poisson.push((t, lam));
                    i += 1;
                }
                OffspringLaw::IndepPoisson(IndepPoisson {
                    det: CountsVec::new(),
                    poisson,
                })
            }
            OffspringLaw::HeavyTail(h) => {
                if (h.child as usize) < prefix {
                    self.clone()
                } else {
                    OffspringLaw::deterministic(CountsVec::new())
                }
            }
        }
    }

    /// Atom list when the law is an explicit finite pmf.
    pub fn atoms(&self) -> Option<&[(CountsVec, f64)]> {
        match self {
            OffspringLaw::FinitePmf(f) => Some(&f.atoms),
            _ => None,
        }
    }

    /// One draw. `rel_eps` is the relative h-mass cutoff for infinite rows;
    /// `tail_bias` reports the h-mass dropped by the cutoff.
    pub fn sample<R: Rng>(&self, rng: &mut R, rel_eps: f64) -> Draw {
        match self {
            OffspringLaw::FinitePmf(f) => Draw {
                counts: sample_atom(&f.atoms, rng).clone(),
                tail_bias: 0.0,
            },
            OffspringLaw::IndepPoisson(ip) => {
                let mut counts = ip.det.clone();
                for &(t, lam) in &ip.poisson {
                    counts.add(t, poisson_u64(lam, rng));
                }
                Draw {
                    counts,
                    tail_bias: 0.0,
                }
            }
            OffspringLaw::PoissonRow(row) => {
                let n = row.cutoff_index(rel_eps);
                let mut counts = CountsVec::new();
                for i in 0..n {
                    let (t, lam) = (row.coords)(i);
                    counts.add(t, poisson_u64(lam, rng));
                }
                Draw {
                    counts,
                    tail_bias: (row.h_tail)(n),
                }
            }
            OffspringLaw::HeavyTail(h) => Draw {
                counts: CountsVec::from_entries([(h.child, h.sample_one(rng) as u64)]),
                tail_bias: 0.0,
            },
        }
    }

    /// Draws `L` biased by `L_y` (the Kesten spine-parent offspring law).
    ///
    /// Finite pmfs are reweighted exactly; independent-Poisson coordinates
    /// use the conjugacy "Poisson biased by its own count = 1 + Poisson";
    /// the heavy-tailed law uses an exact rejection sampler.
    pub fn sample_biased<R: Rng>(&self, y: TypeId, rng: &mut R, rel_eps: f64) -> Result<Draw> {
        match self {
            OffspringLaw::FinitePmf(f) => {
                let weights: Vec<f64> = f.atoms.iter().map(|(c, p)| p * c.get(y) as f64).collect();
                let total: f64 = weights.iter().sum();
                if total <= 0.0 {
                    return Err(Error::Unsupported(format!(
                        "biasing by coordinate {y} with zero mean"
                    )));
                }
                let mut u = rng.random::<f64>() * total;
                let mut idx = f.atoms.len() - 1;
                for (i, w) in weights.iter().enumerate() {
                    if u < *w {
                        idx = i;
                        break;
                    }
                    u -= w;
                }
                Ok(Draw {
                    counts: f.atoms[idx].0.clone(),
                    tail_bias: 0.0,
                })
            }
            OffspringLaw::IndepPoisson(ip) => {
                let d = ip.det.get(y);
                let lam_y: f64 = ip
                    .poisson
                    .iter()
                    .filter(|&&(t, _)| t == y)
                    .map(|&(_, l)| l)
                    .sum();
                if d == 0 && lam_y <= 0.0 {
                    return Err(Error::Unsupported(format!(
                        "biasing by coordinate {y} with zero mean"
                    )));
                }
                let mut counts = ip.det.clone();
                for &(t, lam) in &ip.poisson {
                    counts.add(t, poisson_u64(lam, rng));
                }
                // (d + N) biased by (d + N): with prob d/(d+lam) unchanged,
                // otherwise one extra (N biased by N = 1 + N).
                if lam_y > 0.0 && rng.random::<f64>() >= d as f64 / (d as f64 + lam_y) {
                    counts.add(y, 1);
                }
                Ok(Draw {
                    counts,
                    tail_bias: 0.0,
                })
            }
            OffspringLaw::PoissonRow(row) => {
                let n = row.cutoff_index(rel_eps);
                let mut counts = CountsVec::new();
                let mut seen_y = false;
                for i in 0..n {
                    let (t, lam) = (row.coords)(i);
                    counts.add(t, poisson_u64(lam, rng));
                    if t == y {
                        seen_y = true;
                    }
                }
                if !seen_y {
                    // biased coordinate beyond the cutoff: include it exactly
                    let lam = self.mean_coord(y);
                    if lam <= 0.0 {
                        return Err(Error::Unsupported(format!(
                            "biasing by coordinate {y} with zero mean"
                        )));
                    }
                    counts.add(y, poisson_u64(lam, rng));
                }
                counts.add(y, 1);
                Ok(Draw {
                    counts,
                    tail_bias: (row.h_tail)(n),
                })
            }
            OffspringLaw::HeavyTail(h) => {
                if y != h.child {
                    return Err(Error::Unsupported(format!(
                        "biasing by coordinate {y} with zero mean"
                    )));
                }
                Ok(Draw {
                    counts: CountsVec::from_entries([(h.child, h.sample_size_biased(rng) as u64)]),
                    tail_bias: 0.0,
                })
            }
        }
    }

    /// Adds to `acc` the sum of `n` independent draws (one aggregated draw
    /// per (type, count) pair in the forward simulation).
    pub fn aggregate_sample<R: Rng>(&self, n: u128, rng: &mut R, acc: &mut PopVec) -> Result<()> {
        let overflow = |_: ()| Error::Overflow { generation: 0 };
        match self {
            OffspringLaw::FinitePmf(f) => {
                let mut remaining = n;
                let mut rem_p = 1.0f64;
                for (i, (c, p)) in f.atoms.iter().enumerate() {
                    let m = if i + 1 == f.atoms.len() {
                        remaining
                    } else {
                        let cond = (p / rem_p).clamp(0.0, 1.0);
                        binomial_u128(remaining, cond, rng)
                    };
                    for (t, k) in c.iter() {
                        let add = m.checked_mul(k as u128).ok_or(Error::Overflow {
                            generation: 0,
                        })?;
                        acc.add(t, add).map_err(overflow)?;
                    }
                    remaining -= m;
                    rem_p -= p;
                    if remaining == 0 {
                        break;
                    }
                }
                Ok(())
            }
            OffspringLaw::IndepPoisson(ip) => {
                for (t, k) in ip.det.iter() {
                    let add = n
                        .checked_mul(k as u128)
                        .ok_or(Error::Overflow { generation: 0 })?;
                    acc.add(t, add).map_err(overflow)?;
                }
                for &(t, lam) in &ip.poisson {
                    acc.add(t, poisson_u128(n as f64 * lam, rng)).map_err(overflow)?;
                }
                Ok(())
            }
            OffspringLaw::HeavyTail(h) => {
                acc.add(h.child, h.sample_sum(n, rng)).map_err(overflow)
            }
            OffspringLaw::PoissonRow(_) => Err(Error::Unsupported(
                "forward simulation of an infinite-support offspring law; request a truncated model"
                    .into(),
            )),
        }
    }

    /// Enumerates the support as (vector, probability) pairs; Poisson
    /// coordinates are cut at per-coordinate tail mass `tail_eps`. None for
    /// laws without an enumerable support.
    pub fn enumerate_support(&self, tail_eps: f64) -> Option<Vec<(CountsVec, f64)>> {
        match self {
            OffspringLaw::FinitePmf(f) => Some(f.atoms.clone()),
            OffspringLaw::IndepPoisson(ip) => {
                let mut acc: Vec<(CountsVec, f64)> = vec![(ip.det.clone(), 1.0)];
                for &(t, lam) in &ip.poisson {
                    let pmf = poisson_pmf_table(lam, tail_eps);
                    let mut next = Vec::with_capacity(acc.len() * pmf.len());
                    for (c, p) in &acc {
                        for (k, pk) in pmf.iter().enumerate() {
                            let mut c2 = c.clone();
                            c2.add(t, k as u64);
                            next.push((c2, p * pk));
                        }
                    }
                    acc = next;
                }
                Some(acc)
            }
            _ => None,
        }
    }

    /// Exact per-coordinate variance, when available.
    pub fn variance_coord(&self, y: TypeId) -> CondValue {
        match self {
            OffspringLaw::FinitePmf(f) => {
                let mut m = 0.0;
                let mut m2 = 0.0;
                for (c, p) in &f.atoms {
                    let k = c.get(y) as f64;
                    m += k * p;
                    m2 += k * k * p;
                }
                CondValue::Exact(m2 - m * m)
            }
            OffspringLaw::IndepPoisson(ip) => CondValue::Exact(
                ip.poisson
                    .iter()
                    .filter(|&&(t, _)| t == y)
                    .map(|&(_, l)| l)
                    .sum(),
            ),
            OffspringLaw::PoissonRow(_) => CondValue::Exact(self.mean_coord(y)),
            OffspringLaw::HeavyTail(h) => {
                if y == h.child {
                    CondValue::Diverging
                } else {
                    CondValue::Exact(0.0)
                }
            }
        }
    }

    /// Nonzero-mean coordinates below the prefix, in enumeration order.
    pub fn coords(&self, prefix: usize) -> Vec<TypeId> {
        match self {
            OffspringLaw::PoissonRow(row) => {
                let mut out = Vec::new();
                let mut i = 0usize;
                loop {
                    let (t, _) = (row.coords)(i);
                    if (t as usize) >= prefix {
                        break;
                    }
                    out.push(t);
                    i += 1;
                }
                out
            }
            _ => self
                .full_mean_row()
                .iter()
                .map(|(t, _)| t)
                .filter(|&t| (t as usize) < prefix)
                .collect(),
        }
    }

    /// E[g(L h)] for a nonnegative test function g, when an exact summation
    /// path exists (finite pmf, or at most two Poisson coordinates).
    pub fn e_g_of_lh(&self, h: &dyn Fn(TypeId) -> f64, g: &dyn Fn(f64) -> f64) -> CondValue {
        match self {
            OffspringLaw::FinitePmf(f) => {
                let mut acc = KahanSum::default();
                for (c, p) in &f.atoms {
                    acc.add(p * g(c.h_sum(h)));
                }
                CondValue::Exact(acc.value())
            }
            OffspringLaw::IndepPoisson(ip) => {
                let base = ip.det.h_sum(h);
                match ip.poisson.len() {
                    0 => CondValue::Exact(g(base)),
                    1 => {
                        let (t, lam) = ip.poisson[0];
                        let a = h(t);
                        let pmf = poisson_pmf_table(lam, 1e-13);
                        let mut acc = KahanSum::default();
                        for (k, pk) in pmf.iter().enumerate() {
                            acc.add(pk * g(base + a * k as f64));
                        }
                        CondValue::Exact(acc.value())
                    }
                    2 => {
                        let (t1, l1) = ip.poisson[0];
                        let (t2, l2) = ip.poisson[1];
                        let (a1, a2) = (h(t1), h(t2));
                        let p1 = poisson_pmf_table(l1, 1e-13);
                        let p2 = poisson_pmf_table(l2, 1e-13);
                        let mut acc = KahanSum::default();
                        for (k1, q1) in p1.iter().enumerate() {
                            for (k2, q2) in p2.iter().enumerate() {
                                acc.add(q1 * q2 * g(base + a1 * k1 as f64 + a2 * k2 as f64));
                            }
                        }
                        CondValue::Exact(acc.value())
                    }
                    _ => CondValue::NeedsMc,
                }
            }
            OffspringLaw::PoissonRow(_) => CondValue::NeedsMc,
            OffspringLaw::HeavyTail(ht) => {
                // g is used with xlog-type growth in the conditions module;
                // E[K g'(K)] with g ~ t log t diverges for this law.
                let _ = (h, g);
                let _ = ht;
                CondValue::Diverging
            }
        }
    }

    /// E[(Lh) log_+(Lh)]. Same dispatch as `e_g_of_lh` with g(t) = t log_+ t,
    /// except that independent Poisson coordinates whose mean is too large for
    /// a pmf table switch to the delta-method expansion
    /// E[S log S] = mu log mu + Var(S)/(2 mu) + O(Var^2/mu^3),
    /// whose relative error is below 1e-8 at the triggering means.
    pub fn e_xlogx_of_lh(&self, h: &dyn Fn(TypeId) -> f64) -> CondValue {
        const TABLE_MAX_MEAN: f64 = 2.0e4;
        if let OffspringLaw::IndepPoisson(ip) = self {
            let heavy = ip
                .poisson
                .iter()
                .any(|&(t, lam)| lam > TABLE_MAX_MEAN && h(t) > 0.0);
            if heavy {
                let mut mu = ip.det.h_sum(h);
                let mut var = 0.0;
                for &(t, lam) in &ip.poisson {
                    let a = h(t);
                    mu += a * lam;
                    var += a * a * lam;
                }
                return CondValue::Exact(mu * log_plus(mu) + var / (2.0 * mu));
            }
        }
        self.e_g_of_lh(h, &|t| t * log_plus(t))
    }

    /// E[L_y log_+(L_y * scale)] at one coordinate.
    pub fn e_coord_log(&self, y: TypeId, scale: f64) -> CondValue {
        let g = |k: f64| k * log_plus(k * scale);
        match self {
            OffspringLaw::FinitePmf(f) => {
                let mut acc = KahanSum::default();
                for (c, p) in &f.atoms {
                    acc.add(p * g(c.get(y) as f64));
                }
                CondValue::Exact(acc.value())
            }
            OffspringLaw::IndepPoisson(ip) => {
                let d = ip.det.get(y) as f64;
                let lam: f64 = ip
                    .poisson
                    .iter()
                    .filter(|&&(t, _)| t == y)
                    .map(|&(_, l)| l)
                    .sum();
                if lam == 0.0 {
                    return CondValue::Exact(g(d));
                }
                if lam > 2.0e4 {
                    let mu = d + lam;
                    return CondValue::Exact(mu * log_plus(mu * scale) + lam / (2.0 * mu));
                }
                let pmf = poisson_pmf_table(lam, 1e-13);
                let mut acc = KahanSum::default();
                for (k, pk) in pmf.iter().enumerate() {
                    acc.add(pk * g(d + k as f64));
                }
                CondValue::Exact(acc.value())
            }
            OffspringLaw::PoissonRow(_) => {
                let lam = self.mean_coord(y);
                if lam == 0.0 {
                    return CondValue::Exact(0.0);
                }
                if lam > 2.0e4 {
                    return CondValue::Exact(lam * log_plus(lam * scale) + 0.5);
                }
                let pmf = poisson_pmf_table(lam, 1e-13);
                let mut acc = KahanSum::default();
                for (k, pk) in pmf.iter().enumerate() {
                    acc.add(pk * g(k as f64));
                }
                CondValue::Exact(acc.value())
            }
            OffspringLaw::HeavyTail(h) => {
                if y == h.child {
                    CondValue::Diverging
                } else {
                    CondValue::Exact(0.0)
                }
            }
        }
    }

    /// E[L_y ∧ cap] (the capped mean matrix entry).
    pub fn capped_mean(&self, y: TypeId, cap: f64) -> CondValue {
        if cap < 0.0 {
            return CondValue::Exact(0.0);
        }
        match self {
            OffspringLaw::FinitePmf(f) => {
                let mut acc = KahanSum::default();
                for (c, p) in &f.atoms {
                    acc.add(p * (c.get(y) as f64).min(cap));
                }
                CondValue::Exact(acc.value())
            }
            OffspringLaw::IndepPoisson(ip) => {
                let d = ip.det.get(y) as f64;
                let lam: f64 = ip
                    .poisson
                    .iter()
                    .filter(|&&(t, _)| t == y)
                    .map(|&(_, l)| l)
                    .sum();
                if lam == 0.0 {
                    return CondValue::Exact(d.min(cap));
                }
                let pmf = poisson_pmf_table(lam, 1e-14);
                let mut acc = KahanSum::default();
                let mut mass = 0.0;
                for (k, pk) in pmf.iter().enumerate() {
                    acc.add(pk * (d + k as f64).min(cap));
                    mass += pk;
                }
                // residual pmf mass sits above the cap for any realistic cap
                acc.add((1.0 - mass).max(0.0) * cap.min(d + pmf.len() as f64));
                CondValue::Exact(acc.value())
            }
            OffspringLaw::PoissonRow(_) => {
                let lam = self.mean_coord(y);
                if lam == 0.0 {
                    return CondValue::Exact(0.0);
                }
                let pmf = poisson_pmf_table(lam, 1e-14);
                let mut acc = KahanSum::default();
                for (k, pk) in pmf.iter().enumerate() {
                    acc.add(pk * (k as f64).min(cap));
                }
                CondValue::Exact(acc.value())
            }
            OffspringLaw::HeavyTail(h) => {
                if y != h.child {
                    return CondValue::Exact(0.0);
                }
                if cap <= 2.0 {
                    return CondValue::Exact(cap);
                }
                if cap > 65_536.0 {
                    return CondValue::NeedsMc;
                }
                let kcap = cap.floor() as u64;
                let mut acc = KahanSum::default();
                let mut below = 0.0;
                for k in 2..=kcap {
                    let p = h.pmf(k as f64);
                    acc.add(k as f64 * p);
                    below += p;
                }
                acc.add(cap * (1.0 - below).max(0.0));
                CondValue::Exact(acc.value())
            }
        }
    }
}

impl PoissonRow {
    /// Smallest cutoff index with relative dropped h-mass <= rel_eps.
    pub fn cutoff_index(&self, rel_eps: f64) -> usize {
        let total = (self.h_tail)(0);
        let target = rel_eps * total;
        let mut n = 1usize;
        while (self.h_tail)(n) > target {
            n *= 2;
            if n > 1 << 30 {
                break;
            }
        }
        // binary refine
        let mut lo = n / 2;
        let mut hi = n;
        while lo + 1 < hi {
            let mid = (lo + hi) / 2;
            if (self.h_tail)(mid) > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        hi
    }
}

fn sample_atom<'a, R: Rng>(atoms: &'a [(CountsVec, f64)], rng: &mut R) -> &'a CountsVec {
    let mut u = rng.random::<f64>();
    for (c, p) in atoms {
        if u < *p {
            return c;
        }
        u -= p;
    }
    &atoms.last().expect("empty pmf").0
}

/// Poisson pmf values 0..=K with total mass >= 1 - tail_eps.
pub fn poisson_pmf_table(lambda: f64, tail_eps: f64) -> Vec<f64> {
    assert!(lambda >= 0.0);
    if lambda == 0.0 {
        return vec![1.0];
    }
    let mut pmf = vec![(-lambda).exp()];
    let mut total = pmf[0];
    let mut k = 0usize;
    while total < 1.0 - tail_eps {
        let next = pmf[k] * lambda / (k as f64 + 1.0);
        pmf.push(next);
        total += next;
        k += 1;
        if k > 10_000_000 {
            break;
        }
    }
    pmf
}

/// Poisson draw; exact (rand_distr) for lambda <= 1e12, Gaussian beyond
/// (relative error < 1e-6 there, far below any test tolerance).
pub fn poisson_u64<R: Rng>(lambda: f64, rng: &mut R) -> u64 {
    poisson_u128(lambda, rng) as u64
}

pub fn poisson_u128<R: Rng>(lambda: f64, rng: &mut R) -> u128 {
    if lambda <= 0.0 {
        return 0;
    }
    if lambda <= 1e12 {
        let d = rand_distr::Poisson::new(lambda).expect("valid lambda");
        let v: f64 = d.sample(rng);
        v as u128
    } else {
        let g: f64 = StandardNormal.sample(rng);
        let v = lambda + lambda.sqrt() * g;
        if v < 0.0 {
            0
        } else {
            v.round() as u128
        }
    }
}

/// Binomial draw for u128 trials: exact (rand_distr) when n fits u64 and the
/// variance is moderate; Gaussian when npq is huge; Poisson when n exceeds
/// u64 with tiny p.
pub fn binomial_u128<R: Rng>(n: u128, p: f64, rng: &mut R) -> u128 {
    if p <= 0.0 || n == 0 {
        return 0;
    }
    if p >= 1.0 {
        return n;
    }
    let nf = n as f64;
    let np = nf * p;
    let npq = np * (1.0 - p);
    if npq > 1e10 {
        let g: f64 = StandardNormal.sample(rng);
        let v = np + npq.sqrt() * g;
        let v = v.round();
        if v < 0.0 {
            0
        } else if v >= nf {
            n
        } else {
            v as u128
        }
    } else if n <= u64::MAX as u128 {
        let d = rand_distr::Binomial::new(n as u64, p).expect("valid binomial");
        d.sample(rng) as u128
    } else {
        // n > u64::MAX and npq <= 1e10 forces p < 1e-9: Poisson limit
        poisson_u128(np, rng)
    }
}

// ---------------------------------------------------------------------------
// Heavy-tailed law: P(K = k) = k^-2 (log k)^-2 / C, k >= 2.
// ---------------------------------------------------------------------------

/// Boundary below which class statistics are computed by direct summation.
const HEAVY_DIRECT_LIMIT: u64 = 1 << 21;
/// Largest dyadic class exponent tracked by the aggregated sampler.
const HEAVY_MAX_EXP: u32 = 120;
/// Class counts at or below this size are sampled individually (exact);
/// larger classes use a per-class Gaussian for the bounded within-class sum.
const HEAVY_CLASS_EXACT: u128 = 256;

#[derive(Debug, Clone)]
struct HeavyClass {
    lo: u128,
    hi: u128, // exclusive
    prob: f64,
    mean: f64,
    var: f64,
}

#[derive(Debug)]
pub struct HeavyTailLaw {
    pub child: TypeId,
    /// Normalization C = sum_{k>=2} k^-2 (log k)^-2.
    pub norm: f64,
    pub mean: f64,
    /// Singleton classes k = 2..64 then dyadic classes [2^j, 2^{j+1}).
    classes: Vec<HeavyClass>,
}

fn heavy_t(x: f64) -> f64 {
    let l = x.ln();
    1.0 / (x * x * l * l)
}

/// Simpson quadrature of f on [a, b].
fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
    let n = panels * 2;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

impl HeavyTailLaw {
    pub fn new(child: TypeId) -> Arc<Self> {
        let mut classes = Vec::new();
        // singletons
        for k in 2u64..64 {
            let t = heavy_t(k as f64);
            classes.push(HeavyClass {
                lo: k as u128,
                hi: k as u128 + 1,
                prob: t,
                mean: k as f64,
                var: 0.0,
            });
        }
        // dyadic, direct sums while below the limit
        let mut j = 6u32;
        while (1u64 << (j + 1)) <= HEAVY_DIRECT_LIMIT {
            let lo = 1u64 << j;
            let hi = 1u64 << (j + 1);
            let mut mass = KahanSum::default();
            let mut m1 = KahanSum::default();
            let mut m2 = KahanSum::default();
            for k in lo..hi {
                let t = heavy_t(k as f64);
                mass.add(t);
                m1.add(k as f64 * t);
                m2.add(k as f64 * k as f64 * t);
            }
            let (mass, m1, m2) = (mass.value(), m1.value(), m2.value());
            classes.push(HeavyClass {
                lo: lo as u128,
                hi: hi as u128,
                prob: mass,
                mean: m1 / mass,
                var: m2 / mass - (m1 / mass) * (m1 / mass),
            });
            j += 1;
        }
        // dyadic beyond the direct limit: shifted-integral class statistics
        while j <= HEAVY_MAX_EXP {
            let lo = 2f64.powi(j as i32);
            let hi = 2.0 * lo;
            let (a, b) = (lo - 0.5, hi - 0.5);
            let mass = simpson(heavy_t, a, b, 64);
            // integral of x * t(x) has the exact antiderivative -1/ln x
            let m1 = 1.0 / a.ln() - 1.0 / b.ln();
            let m2 = simpson(|x| x * x * heavy_t(x), a, b, 64);
            classes.push(HeavyClass {
                lo: lo as u128,
                hi: hi as u128,
                prob: mass,
                mean: m1 / mass,
                var: m2 / mass - (m1 / mass) * (m1 / mass),
            });
            j += 1;
        }
        let norm: f64 = classes.iter().map(|c| c.prob).sum();
        let mean: f64 = classes.iter().map(|c| c.prob * c.mean).sum::<f64>() / norm;
        for c in &mut classes {
            c.prob /= norm;
        }
        Arc::new(Self {
            child,
            norm,
            mean,
            classes,
        })
    }

    pub fn pmf(&self, k: f64) -> f64 {
        heavy_t(k) / self.norm
    }

    /// Exact draw by rejection from the floor of a Pareto(1) proposal.
    pub fn sample_one<R: Rng>(&self, rng: &mut R) -> u128 {
        loop {
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            let x = 2.0 / u;
            let kf = x.floor();
            let k = kf as u128;
            // proposal pmf q(k) = 2/(k(k+1)); acceptance (1+1/k)/(2 B ln^2 k)
            let l = kf.ln();
            let accept = (1.0 + 1.0 / kf) / (2.0 * 1.5611 * l * l);
            if rng.random::<f64>() < accept {
                return k;
            }
        }
    }

    /// Exact draw of K biased by K (pmf proportional to k^-1 (log k)^-2).
    pub fn sample_size_biased<R: Rng>(&self, rng: &mut R) -> u128 {
        // proposal: continuous density ln2 / (x ln^2 x) on (2, inf),
        // inverse cdf x = exp(ln 2 / (1 - u)); floor and reject.
        loop {
            let u: f64 = rng.random();
            let x = (2f64.ln() / (1.0 - u).max(1e-300)).exp();
            if !x.is_finite() {
                continue;
            }
            let kf = x.floor();
            let k = kf as u128;
            let l = kf.ln();
            let l1 = (kf + 1.0).ln();
            let q = 2f64.ln() * (1.0 / l - 1.0 / l1); // proposal pmf at k
            let t = 1.0 / (kf * l * l); // target, unnormalized
            let accept = t / (2.90 * q);
            debug_assert!(accept <= 1.0 + 1e-9);
            if rng.random::<f64>() < accept {
                return k;
            }
        }
    }

    /// Sum of `n` independent draws. Exact for small n; for large n a
    /// stratified multinomial over bounded classes, with per-class Gaussian
    /// sums only where the class count exceeds HEAVY_CLASS_EXACT.
    pub fn sample_sum<R: Rng>(&self, n: u128, rng: &mut R) -> u128 {
        if n <= 10_000 {
            let mut s: u128 = 0;
            for _ in 0..n {
                s += self.sample_one(rng);
            }
            return s;
        }
        let mut total: u128 = 0;
        let mut remaining = n;
        let mut rem_p = 1.0f64;
        let last = self.classes.len() - 1;
        for (i, c) in self.classes.iter().enumerate() {
            let m = if i == last {
                remaining
            } else {
                let cond = (c.prob / rem_p).clamp(0.0, 1.0);
                binomial_u128(remaining, cond, rng)
            };
            remaining -= m;
            rem_p -= c.prob;
            if m == 0 {
                continue;
            }
            if c.hi == c.lo + 1 {
                total += m * c.lo;
            } else if m <= HEAVY_CLASS_EXACT {
                for _ in 0..m {
                    total += self.sample_class(c, rng);
                }
            } else {
                let g: f64 = StandardNormal.sample(rng);
                let s = m as f64 * c.mean + (m as f64 * c.var).sqrt() * g;
                let s = s.round().max(m as f64 * c.lo as f64);
                total += s as u128;
            }
            if remaining == 0 {
                break;
            }
        }
        total
    }

    /// Class-conditional draw by rejection from the uniform proposal.
    fn sample_class<R: Rng>(&self, c: &HeavyClass, rng: &mut R) -> u128 {
        let bound = heavy_t(c.lo as f64);
        loop {
            let k = rng.random_range(c.lo..c.hi);
            if rng.random::<f64>() < heavy_t(k as f64) / bound {
                return k;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn poisson_pmf_table_sums_to_one() {
        let pmf = poisson_pmf_table(2.0, 1e-13);
        let s: f64 = pmf.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn finite_pmf_mean_row() {
        let law = OffspringLaw::FinitePmf(FinitePmf {
            atoms: vec![
                (CountsVec::new(), 0.2),
                (CountsVec::from_entries([(0, 1)]), 0.3),
                (CountsVec::from_entries([(0, 1), (1, 1)]), 0.5),
            ],
        });
        let row = law.full_mean_row();
        assert!((row.get(0) - 0.8).abs() < 1e-15);
        assert!((row.get(1) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn poisson_biased_is_one_plus_poisson() {
        // single-type Poisson(m): Y biased by itself has mean 1 + m
        let law = OffspringLaw::IndepPoisson(IndepPoisson {
            det: CountsVec::new(),
            poisson: vec![(0, 2.0)],
        });
        let mut rng = stream(7, &[1]);
        let n = 200_000u32;
        let mut sum = 0u64;
        for _ in 0..n {
            sum += law.sample_biased(0, &mut rng, 1e-6).unwrap().counts.get(0);
        }
        let mean = sum as f64 / n as f64;
        let se = (2.0f64 / n as f64).sqrt(); // Var(1+Poi(2)) = 2
        assert!(
            (mean - 3.0).abs() < 4.0 * se,
            "biased Poisson mean {mean} not near 3"
        );
    }

    #[test]
    fn det_plus_poisson_biased_mean() {
        // L_y = 1 + Poi(l): biased by L_y has mean (E L^2)/(E L)
        let lam = 1.5f64;
        let law = OffspringLaw::IndepPoisson(IndepPoisson {
            det: CountsVec::from_entries([(0, 1)]),
            poisson: vec![(0, lam)],
        });
        let m = 1.0 + lam;
        let m2 = lam + (1.0 + lam) * (1.0 + lam); // E[(1+N)^2], N~Poi(lam)
        let expect = m2 / m;
        let mut rng = stream(8, &[1]);
        let n = 200_000u32;
        let mut sum = 0u64;
        for _ in 0..n {
            sum += law.sample_biased(0, &mut rng, 1e-6).unwrap().counts.get(0);
        }
        let mean = sum as f64 / n as f64;
        assert!(
            (mean - expect).abs() < 0.02,
            "biased det+poisson mean {mean} vs {expect}"
        );
    }

    #[test]
    fn capped_mean_poisson_2_cap_3() {
        // E[Poi(2) ∧ 3] = 3 - 9 e^{-2}
        let law = OffspringLaw::IndepPoisson(IndepPoisson {
            det: CountsVec::new(),
            poisson: vec![(0, 2.0)],
        });
        match law.capped_mean(0, 3.0) {
            CondValue::Exact(v) => {
                assert!((v - (3.0 - 9.0 * (-2.0f64).exp())).abs() < 1e-10, "{v}");
            }
            other => panic!("expected exact value, got {other:?}"),
        }
    }

    #[test]
    fn capped_mean_monotone_endpoint() {
        let law = OffspringLaw::IndepPoisson(IndepPoisson {
            det: CountsVec::new(),
            poisson: vec![(0, 2.0)],
        });
        match law.capped_mean(0, 1e9) {
            CondValue::Exact(v) => assert!((v - 2.0).abs() < 1e-9),
            other => panic!("expected exact value, got {other:?}"),
        }
        // deterministic L = 2, cap 1 -> 1
        let det = OffspringLaw::deterministic(CountsVec::from_entries([(0, 2)]));
        match det.capped_mean(0, 1.0) {
            CondValue::Exact(v) => assert!((v - 1.0).abs() < 1e-15),
            other => panic!("expected exact value, got {other:?}"),
        }
    }

    #[test]
    fn heavy_tail_normalization_and_mean() {
        let law = HeavyTailLaw::new(0);
        // C = sum k^-2 log^-2 k: direct partial sum as an independent check
        let mut c = 0.0;
        for k in 2..2_000_000u64 {
            c += heavy_t(k as f64);
        }
        assert!((law.norm - c).abs() < 1e-3, "{} vs {}", law.norm, c);
        assert!(law.mean > 2.5 && law.mean < 3.5, "mean {}", law.mean);
        let probs: f64 = law.classes.iter().map(|cl| cl.prob).sum();
        assert!((probs - 1.0).abs() < 1e-12);
    }

    #[test]
    fn heavy_tail_sampler_matches_pmf() {
        let law = HeavyTailLaw::new(0);
        let mut rng = stream(11, &[2]);
        let n = 200_000u32;
        let mut count2 = 0u32;
        let mut count3 = 0u32;
        for _ in 0..n {
            match law.sample_one(&mut rng) {
                2 => count2 += 1,
                3 => count3 += 1,
                _ => {}
            }
        }
        let p2 = law.pmf(2.0);
        let p3 = law.pmf(3.0);
        let se2 = (p2 * (1.0 - p2) / n as f64).sqrt();
        let se3 = (p3 * (1.0 - p3) / n as f64).sqrt();
        assert!((count2 as f64 / n as f64 - p2).abs() < 4.0 * se2);
        assert!((count3 as f64 / n as f64 - p3).abs() < 4.0 * se3);
    }

    #[test]
    fn heavy_tail_aggregate_mean() {
        let law = HeavyTailLaw::new(0);
        let mut rng = stream(12, &[3]);
        let n: u128 = 1_000_000;
        let s = law.sample_sum(n, &mut rng);
        let mean = s as f64 / n as f64;
        // infinite variance: just check rough agreement
        assert!(
            (mean - law.mean).abs() < 0.5,
            "aggregate mean {mean} vs {}",
            law.mean
        );
    }

    #[test]
    fn aggregate_finite_pmf_matches_mean() {
        let law = OffspringLaw::FinitePmf(FinitePmf {
            atoms: vec![
                (CountsVec::new(), 0.25),
                (CountsVec::from_entries([(0, 2)]), 0.75),
            ],
        });
        let mut rng = stream(13, &[4]);
        let mut acc = PopVec::new();
        law.aggregate_sample(1_000_000, &mut rng, &mut acc).unwrap();
        let m = acc.get(0) as f64 / 1e6;
        assert!((m - 1.5).abs() < 0.01, "{m}");
    }
}
