//! Forward population simulation: Z(n), the additive martingale W_n, the
//! type-distribution error, (local) extinction detection and the capped mean
//! matrix device.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::law::CondValue;
use crate::model::{Model, PerronTriple};
use crate::rng::{kind, stream};
use crate::types::{CountsVec, KahanSum, PopVec, TypeId};

#[derive(Debug, Clone)]
pub struct PopulationState {
    pub n: u32,
    pub counts: PopVec,
    /// W_n = rho^-n Z(n)h.
    pub w: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TerminalStatus {
    #[serde(rename = "horizon-reached")]
    HorizonReached,
    #[serde(rename = "extinct")]
    Extinct,
}

impl std::fmt::Display for TerminalStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TerminalStatus::HorizonReached => "horizon-reached",
            TerminalStatus::Extinct => "extinct",
        })
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    /// States for n = 0.. up to extinction or the horizon.
    pub states: Vec<PopulationState>,
    pub status: TerminalStatus,
    pub replica: u64,
    pub seed: u64,
}

impl Trajectory {
    /// Z(n), empty if the process is already extinct by n.
    pub fn counts_at(&self, n: usize) -> Result<&PopVec> {
        static EMPTY: std::sync::OnceLock<PopVec> = std::sync::OnceLock::new();
        match self.states.get(n) {
            Some(s) => Ok(&s.counts),
            None if self.status == TerminalStatus::Extinct => {
                Ok(EMPTY.get_or_init(PopVec::new))
            }
            None => Err(Error::Config(format!(
                "generation {n} beyond the simulated horizon"
            ))),
        }
    }

    pub fn w_at(&self, n: usize) -> Result<f64> {
        match self.states.get(n) {
            Some(s) => Ok(s.w),
            None if self.status == TerminalStatus::Extinct => Ok(0.0),
            None => Err(Error::Config(format!(
                "generation {n} beyond the simulated horizon"
            ))),
        }
    }
}

/// Simulates one population trajectory. Every offspring law encountered must
/// have a.s. finitely many nonzero coordinates; infinite-row models must be
/// truncated first.
pub fn run<R: rand::Rng>(
    model: &Model,
    triple: &PerronTriple,
    z0: &CountsVec,
    horizon: u32,
    rng: &mut R,
) -> Result<Trajectory> {
    let mut counts = PopVec::from_counts(z0);
    let mut states = Vec::with_capacity(horizon as usize + 1);
    let mut scale = 1.0f64;
    states.push(PopulationState {
        n: 0,
        counts: counts.clone(),
        w: counts.h_sum(|x| triple.h_at(x)),
    });
    let mut status = TerminalStatus::HorizonReached;
    for n in 1..=horizon {
        let mut next = PopVec::new();
        for (x, c) in counts.iter() {
            let law = model.law(x)?;
            if !law.finite_support() {
                return Err(Error::Unsupported(format!(
                    "type {x} has an infinite-support offspring law; simulate a truncated model"
                )));
            }
            law.aggregate_sample(c, rng, &mut next)
                .map_err(|e| match e {
                    Error::Overflow { .. } => Error::Overflow { generation: n },
                    other => other,
                })?;
        }
        counts = next;
        scale /= triple.rho;
        let w = scale * counts.h_sum(|x| triple.h_at(x));
        states.push(PopulationState {
            n,
            counts: counts.clone(),
            w,
        });
        if counts.is_empty() {
            status = TerminalStatus::Extinct;
            break;
        }
    }
    Ok(Trajectory {
        states,
        status,
        replica: 0,
        seed: 0,
    })
}

/// Independent replicas in parallel, each on its own derived stream;
/// aggregation order is by replica index, so results are deterministic.
pub fn run_replicas(
    model: &Model,
    triple: &PerronTriple,
    z0: &CountsVec,
    horizon: u32,
    replicas: u64,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    (0..replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream(seed, &[kind::FORWARD, r]);
            let mut traj = run(model, triple, z0, horizon, &mut rng)?;
            traj.replica = r;
            traj.seed = seed;
            Ok(traj)
        })
        .collect()
}

/// ||rho^-n Z(n) - w_ref htilde||_h. Exact over the full type space: the
/// contribution of types outside Z(n)'s support is w_ref (1 - sum of pi
/// there), using that pi is a probability distribution.
pub fn type_error(traj: &Trajectory, triple: &PerronTriple, n: usize, w_ref: f64) -> Result<f64> {
    let counts = traj.counts_at(n)?;
    let scale = triple.rho.powi(-(n as i32));
    let mut acc = KahanSum::default();
    let mut pi_covered = KahanSum::default();
    for (x, c) in counts.iter() {
        let v = scale * c as f64;
        acc.add((v - w_ref * triple.htilde_at(x)).abs() * triple.h_at(x));
        pi_covered.add(triple.pi_at(x));
    }
    match triple.support {
        Some(ntypes) => {
            for x in 0..ntypes as TypeId {
                if counts.get(x) == 0 {
                    acc.add(w_ref.abs() * triple.pi_at(x));
                }
            }
        }
        None => {
            acc.add(w_ref.abs() * (1.0 - pi_covered.value()).max(0.0));
        }
    }
    Ok(acc.value())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum LocalStatus {
    #[serde(rename = "extinct")]
    Extinct,
    #[serde(rename = "locally-extinct-at-horizon")]
    LocallyExtinctAtHorizon,
    #[serde(rename = "surviving")]
    Surviving,
}

impl std::fmt::Display for LocalStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LocalStatus::Extinct => "extinct",
            LocalStatus::LocallyExtinctAtHorizon => "locally-extinct-at-horizon",
            LocalStatus::Surviving => "surviving",
        })
    }
}

/// Finite-horizon proxy for local extinction: all watched types vanish over
/// the trailing `window` generations while the population survives.
pub fn local_extinction_status(
    traj: &Trajectory,
    watch: &[TypeId],
    window: u32,
) -> Result<LocalStatus> {
    if watch.is_empty() {
        return Err(Error::EmptyWatchSet);
    }
    if traj.status == TerminalStatus::Extinct {
        return Ok(LocalStatus::Extinct);
    }
    let len = traj.states.len();
    let tail_start = len.saturating_sub(window as usize + 1);
    let watched_clear = traj.states[tail_start..]
        .iter()
        .all(|s| watch.iter().all(|&x| s.counts.get(x) == 0));
    let alive = !traj.states.last().expect("nonempty trajectory").counts.is_empty();
    if watched_clear && alive {
        Ok(LocalStatus::LocallyExtinctAtHorizon)
    } else {
        Ok(LocalStatus::Surviving)
    }
}

// ---------------------------------------------------------------------------
// Capped mean matrix: the entrywise-truncated means behind the
// almost-sure lower bound on generation growth.
// ---------------------------------------------------------------------------

#[derive(Clone)]
pub struct CappedMatrix {
    pub model: Model,
    pub triple: PerronTriple,
    /// Generation index in the cap rule c_y(n) = rho2^n h_y htilde_y^2.
    pub n: u32,
    pub rho1: f64,
    pub rho2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CappedValue {
    Exact(f64),
    /// Monte-Carlo fallback with a 95% confidence half-width.
    Mc { mean: f64, ci_half: f64, samples: u64 },
}

impl CappedValue {
    pub fn value(&self) -> f64 {
        match self {
            CappedValue::Exact(v) => *v,
            CappedValue::Mc { mean, .. } => *mean,
        }
    }
}

impl CappedMatrix {
    /// Defaults: rho2 = (1+rho)/2 and rho1 = (rho^2 rho2)^(1/3), which lies
    /// in the admissible region for every rho > 1.
    pub fn new(model: Model, triple: PerronTriple, n: u32) -> Result<Self> {
        let rho = triple.rho;
        let rho2 = (1.0 + rho) / 2.0;
        let rho1 = (rho * rho * rho2).cbrt();
        Self::with_params(model, triple, n, rho1, rho2)
    }

    pub fn with_params(
        model: Model,
        triple: PerronTriple,
        n: u32,
        rho1: f64,
        rho2: f64,
    ) -> Result<Self> {
        let rho = triple.rho;
        if rho <= 1.0 {
            return Err(Error::Config(format!("capped matrix needs rho > 1, got {rho}")));
        }
        if !(rho1 > rho.sqrt() && rho1 < rho) {
            return Err(Error::Config(format!(
                "rho1={rho1} outside (sqrt(rho), rho) = ({}, {rho})",
                rho.sqrt()
            )));
        }
        if !(rho2 > 1.0 && rho2 < rho) {
            return Err(Error::Config(format!("rho2={rho2} outside (1, rho={rho})")));
        }
        if rho1 * rho1 / rho2 <= rho {
            return Err(Error::Config(format!(
                "rho1^2/rho2 = {} must exceed rho = {rho}",
                rho1 * rho1 / rho2
            )));
        }
        Ok(Self {
            model,
            triple,
            n,
            rho1,
            rho2,
        })
    }

    pub fn cap(&self, y: TypeId) -> f64 {
        let ht = self.triple.htilde_at(y);
        self.rho2.powi(self.n as i32) * self.triple.h_at(y) * ht * ht
    }

    /// E[L^(x)_y ∧ c_y(n)], exact when the law provides a path, otherwise a
    /// Monte-Carlo estimate with its confidence interval.
    pub fn capped_mean(&self, x: TypeId, y: TypeId, seed: u64) -> Result<CappedValue> {
        let law = self.model.law(x)?;
        let cap = self.cap(y);
        match law.capped_mean(y, cap) {
            CondValue::Exact(v) => Ok(CappedValue::Exact(v)),
            CondValue::Diverging => unreachable!("capped moments are bounded"),
            CondValue::NeedsMc => {
                let samples: u64 = 100_000;
                let mut rng = stream(seed, &[kind::CONDITION_MC, x as u64, y as u64]);
                let mut acc = KahanSum::default();
                let mut acc2 = KahanSum::default();
                for _ in 0..samples {
                    let d = law.sample(&mut rng, 1e-6);
                    let v = (d.counts.get(y) as f64).min(cap);
                    acc.add(v);
                    acc2.add(v * v);
                }
                let mean = acc.value() / samples as f64;
                let var = (acc2.value() / samples as f64 - mean * mean).max(0.0);
                Ok(CappedValue::Mc {
                    mean,
                    ci_half: 1.96 * (var / samples as f64).sqrt(),
                    samples,
                })
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Witness event of the examples section: a lone first-generation type-1
// child whose chain of ladder descendants never emits a type-0 child.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct WitnessEstimate {
    pub frequency: f64,
    pub se: f64,
    pub replicas: u64,
    /// One-sided horizon-truncation bias: the within-horizon event is more
    /// probable than the asymptotic one by at most this much.
    pub bias_bound: f64,
    pub horizon: u32,
}

/// Estimates the probability of the witnessing event on the ext_vs_w model
/// truncated at `depth` types. The chain individual of type g at generation
/// g is the unique one (type-g individuals first appear at generation g via
/// the distinguished chain), so only the chain's offspring need simulating.
pub fn ext_witness_frequency(depth: usize, replicas: u64, seed: u64) -> Result<WitnessEstimate> {
    let model = crate::model::gallery("ext_vs_w", &serde_json::json!({}))?.truncated(depth)?;
    let horizon = depth as u32;
    let hits: u64 = (0..replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream(seed, &[kind::WITNESS, r]);
            let root = model.law(0).expect("type 0").sample(&mut rng, 1e-9);
            if root.counts.get(1) != 1 || root.counts.get(0) != 0 {
                return 0u64;
            }
            for g in 1..horizon.min(depth as u32 - 1) {
                let d = model.law(g).expect("chain type").sample(&mut rng, 1e-9);
                if d.counts.get(0) != 0 {
                    return 0;
                }
            }
            1
        })
        .sum();
    let f = hits as f64 / replicas as f64;
    let se = (f * (1.0 - f) / replicas as f64).sqrt();
    // untested tail means: sum_{g >= horizon-1} 2 (2/3)^{g+1}
    let tail: f64 = 6.0 * (2.0f64 / 3.0).powi(horizon as i32);
    let bias_bound = (-5.0f64).exp() * (tail.exp() - 1.0);
    Ok(WitnessEstimate {
        frequency: f,
        se,
        replicas,
        bias_bound,
        horizon,
    })
}

/// Empirical mean of W_n across replicas, with its standard error.
pub fn mean_w(trajs: &[Trajectory], n: usize) -> Result<(f64, f64)> {
    let mut acc = KahanSum::default();
    let mut acc2 = KahanSum::default();
    for t in trajs {
        let w = t.w_at(n)?;
        acc.add(w);
        acc2.add(w * w);
    }
    let r = trajs.len() as f64;
    let mean = acc.value() / r;
    let var = (acc2.value() / r - mean * mean).max(0.0);
    Ok((mean, (var / r).sqrt()))
}
