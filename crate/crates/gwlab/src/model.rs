//! Model abstraction: type spaces, offspring laws, mean-matrix access, the
//! spinal-chain construction and the example gallery.

use std::sync::Arc;

use rand::Rng;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::law::{FinitePmf, HeavyTailLaw, IndepPoisson, OffspringLaw, PoissonRow};
use crate::types::{CountsVec, KahanSum, SparseVec, TypeId};

pub const ZETA2: f64 = 1.6449340668482264;
pub const ZETA3: f64 = 1.2020569031595943;

/// Stream-splitting rule recorded in every model description and provenance
/// block: one 64-bit experiment seed, expanded per (kind, replica,
/// generation) path into independent ChaCha8 streams.
pub const SEED_POLICY: &str = "splitmix64-path/chacha8:(kind,replica,generation)";

/// Eigenvector access: dense table on a finite type space, or a closed form
/// on a countable one.
#[derive(Clone)]
pub enum HFun {
    Table(Arc<Vec<f64>>),
    Fun(Arc<dyn Fn(TypeId) -> f64 + Send + Sync>),
}

impl HFun {
    pub fn table(v: Vec<f64>) -> Self {
        HFun::Table(Arc::new(v))
    }

    pub fn func(f: impl Fn(TypeId) -> f64 + Send + Sync + 'static) -> Self {
        HFun::Fun(Arc::new(f))
    }

    pub fn get(&self, x: TypeId) -> f64 {
        match self {
            HFun::Table(t) => t.get(x as usize).copied().unwrap_or(0.0),
            HFun::Fun(f) => f(x),
        }
    }
}

/// Perron data (rho, h, htilde), normalized htilde.h = 1 in the positive
/// recurrent case; pi(x) = htilde_x h_x is the spinal stationary law.
#[derive(Clone)]
pub struct PerronTriple {
    pub rho: f64,
    pub h: HFun,
    pub htilde: HFun,
    /// |htilde.h - 1| as certified on the declared support or probe prefix.
    pub norm_residual: f64,
    /// Number of types when the space is finite.
    pub support: Option<usize>,
}

impl PerronTriple {
    pub fn h_at(&self, x: TypeId) -> f64 {
        self.h.get(x)
    }

    pub fn htilde_at(&self, x: TypeId) -> f64 {
        self.htilde.get(x)
    }

    pub fn pi_at(&self, x: TypeId) -> f64 {
        self.h.get(x) * self.htilde.get(x)
    }
}

#[derive(Clone)]
enum LawTable {
    Finite(Arc<Vec<OffspringLaw>>),
    Infinite(Arc<dyn Fn(TypeId) -> OffspringLaw + Send + Sync>),
}

#[derive(Clone)]
pub struct Model {
    pub name: String,
    pub params: Value,
    /// Enumeration prefix this model was truncated to, if any.
    pub truncation: Option<usize>,
    laws: LawTable,
    pub analytic: Option<PerronTriple>,
}

impl Model {
    pub fn finite(
        name: &str,
        params: Value,
        laws: Vec<OffspringLaw>,
        analytic: Option<PerronTriple>,
    ) -> Self {
        Model {
            name: name.to_string(),
            params,
            truncation: None,
            laws: LawTable::Finite(Arc::new(laws)),
            analytic,
        }
    }

    pub fn infinite(
        name: &str,
        params: Value,
        law_fn: Arc<dyn Fn(TypeId) -> OffspringLaw + Send + Sync>,
        analytic: Option<PerronTriple>,
    ) -> Self {
        Model {
            name: name.to_string(),
            params,
            truncation: None,
            laws: LawTable::Infinite(law_fn),
            analytic,
        }
    }

    /// Number of types when the space is finite.
    pub fn n_types(&self) -> Option<usize> {
        match &self.laws {
            LawTable::Finite(v) => Some(v.len()),
            LawTable::Infinite(_) => None,
        }
    }

    pub fn law(&self, x: TypeId) -> Result<OffspringLaw> {
        match &self.laws {
            LawTable::Finite(v) => v
                .get(x as usize)
                .cloned()
                .ok_or(Error::UnknownType(x)),
            LawTable::Infinite(f) => Ok(f(x)),
        }
    }

    /// Exact mean row (M_xy)_{y < prefix} plus an upper bound on the omitted
    /// h-mass sum_{y >= prefix} M_xy h_y.
    pub fn mean_row(&self, x: TypeId, prefix: usize) -> Result<(SparseVec, f64)> {
        let law = self.law(x)?;
        match &self.analytic {
            Some(t) => {
                let h = t.h.clone();
                law.mean_row(prefix, Some(&move |y| h.get(y)))
            }
            None => law.mean_row(prefix, None),
        }
    }

    /// Spinal kernel row p_xy = M_xy h_y / (rho h_x) restricted to the
    /// prefix, plus the omitted probability mass. Errors when the omitted
    /// mass exceeds `tol`.
    pub fn spinal_transition(
        &self,
        triple: &PerronTriple,
        x: TypeId,
        prefix: usize,
        tol: f64,
    ) -> Result<(SparseVec, f64)> {
        let law = self.law(x)?;
        let h = triple.h.clone();
        let (row, tail) = law.mean_row(prefix, Some(&move |y| h.get(y)))?;
        let hx = triple.h_at(x);
        if hx <= 0.0 {
            return Err(Error::UnknownType(x));
        }
        let scale = 1.0 / (triple.rho * hx);
        let p: SparseVec = row
            .iter()
            .map(|(y, m)| (y, m * triple.h_at(y) * scale))
            .collect();
        let p_tail = tail * scale;
        if p_tail > tol {
            return Err(Error::UncertifiedTail(format!(
                "spinal row {x}: omitted probability mass {p_tail:.3e} exceeds tolerance {tol:.3e}"
            )));
        }
        Ok((p, p_tail))
    }

    /// One step of the spinal chain by sequential inversion, exact even for
    /// infinite kernel rows.
    pub fn spinal_step<R: Rng>(
        &self,
        triple: &PerronTriple,
        x: TypeId,
        rng: &mut R,
    ) -> Result<TypeId> {
        let law = self.law(x)?;
        let hx = triple.h_at(x);
        let scale = 1.0 / (triple.rho * hx);
        let u: f64 = rng.random();
        let mut cum = 0.0;
        match &law {
            OffspringLaw::PoissonRow(row) => {
                let mut last = None;
                for i in 0..100_000_000usize {
                    let (t, lam) = (row.coords)(i);
                    if lam > 0.0 {
                        cum += lam * triple.h_at(t) * scale;
                        last = Some(t);
                        if cum > u {
                            return Ok(t);
                        }
                    }
                    // clamp to the last reachable type once the certified
                    // remaining mass cannot move cum past u anyway
                    if (row.h_tail)(i + 1) * scale < 1e-14 {
                        break;
                    }
                }
                last.ok_or_else(|| Error::Numeric {
                    msg: format!("spinal inversion did not terminate from type {x}"),
                    residual: 1.0 - cum,
                })
            }
            _ => {
                let row = law.full_mean_row();
                let mut last = None;
                for (t, m) in row.iter() {
                    cum += m * triple.h_at(t) * scale;
                    last = Some(t);
                    if cum > u {
                        return Ok(t);
                    }
                }
                last.ok_or_else(|| {
                    Error::Structure(format!("type {x} has an empty mean row; no spinal step"))
                })
            }
        }
    }

    /// Finite model on the enumeration prefix, with every offspring law
    /// restricted to it (dropped coordinates simply disappear).
    pub fn truncated(&self, prefix: usize) -> Result<Model> {
        if prefix == 0 {
            return Err(Error::Config("truncation prefix must be positive".into()));
        }
        let mut laws = Vec::with_capacity(prefix);
        for x in 0..prefix {
            laws.push(self.law(x as TypeId)?.restrict(prefix));
        }
        Ok(Model {
            name: self.name.clone(),
            params: self.params.clone(),
            truncation: Some(prefix),
            laws: LawTable::Finite(Arc::new(laws)),
            analytic: self.analytic.clone(),
        })
    }

    /// Serializable model description.
    pub fn describe(&self) -> Value {
        json!({
            "name": self.name,
            "params": self.params,
            "truncation": self.truncation,
            "seed_policy": SEED_POLICY,
        })
    }
}

// ---------------------------------------------------------------------------
// Ladder pairing: 0 <-> 0, (n, m) with 1 <= m <= n <-> 1 + n(n-1)/2 + (m-1).
// ---------------------------------------------------------------------------

pub fn ladder_index(n: u32, m: u32) -> TypeId {
    debug_assert!(n >= 1 && (1..=n).contains(&m));
    let n = n as u64;
    (1 + n * (n - 1) / 2 + (m as u64 - 1)) as TypeId
}

pub fn ladder_unindex(id: TypeId) -> Option<(u32, u32)> {
    if id == 0 {
        return None;
    }
    let r = (id - 1) as u64;
    let mut n = ((2.0 * r as f64).sqrt() as u64).max(1);
    while n * (n - 1) / 2 > r {
        n -= 1;
    }
    while n * (n + 1) / 2 <= r {
        n += 1;
    }
    let m = r - n * (n - 1) / 2 + 1;
    Some((n as u32, m as u32))
}

fn ladder_q(n: u32) -> f64 {
    1.0 / ((n as f64).powi(3) * ZETA3)
}

/// h value shared by every type of rung n: h_(n,m) = e^(gamma (n-1)).
///
/// With h proportional to pi (all rung scales equal to q_n), every summand
/// of the x log x condition has its log_+ argument of order q_n, so the sum
/// converges outright and the intended dichotomy (x log x fails, the
/// return-functional condition holds) is lost. Growing the rung scale like
/// e^(gamma n) makes the rung-n summands of order gamma n q_n each, so the
/// x log x sum diverges like a harmonic series while the return functional
/// from type 0 stays summable (sum_n q_n gamma n < infinity). The spinal
/// kernel, pi, and all h-mass tail bounds are unchanged by this choice.
fn ladder_scale(n: u32, gamma: f64) -> f64 {
    (gamma * (n as f64 - 1.0)).exp()
}

// ---------------------------------------------------------------------------
// Spinal-chain construction.
// ---------------------------------------------------------------------------

/// A spinal Markov chain plus the free parameters of the construction
/// M_xy = rho p_xy h_x / h_y, htilde_x = pi_x / h_x.
pub struct SpinalChainSpec {
    /// Row x of the kernel as an explicit list (must sum to 1).
    pub kernel: Arc<dyn Fn(TypeId) -> Vec<(TypeId, f64)> + Send + Sync>,
    /// Stationary probability distribution of the kernel.
    pub pi: Arc<dyn Fn(TypeId) -> f64 + Send + Sync>,
    pub rho: f64,
    pub h: Arc<dyn Fn(TypeId) -> f64 + Send + Sync>,
    /// Number of types when the chain's state space is finite.
    pub support: Option<usize>,
}

/// Builds an offspring law for type x with the prescribed mean row.
pub type OffspringFactory = Arc<dyn Fn(TypeId, &SparseVec) -> OffspringLaw + Send + Sync>;

fn constructed_row(spec: &SpinalChainSpec, x: TypeId) -> SparseVec {
    let hx = (spec.h)(x);
    (spec.kernel)(x)
        .into_iter()
        .map(|(y, p)| (y, spec.rho * p * hx / (spec.h)(y)))
        .collect()
}

/// The construction of the examples section: fixes a spinal chain first and
/// builds the branching process around it. The default factory realizes
/// each mean row as independent Poisson coordinates. Kernel rows, pi
/// stationarity and the factory's mean rows are validated on the first
/// `probe` types.
pub fn build_from_spinal(
    spec: SpinalChainSpec,
    factory: Option<OffspringFactory>,
    probe: usize,
) -> Result<Model> {
    let tol = 1e-9;
    let probe = match spec.support {
        Some(n) => probe.min(n),
        None => probe,
    };
    for x in 0..probe {
        let x = x as TypeId;
        let row = (spec.kernel)(x);
        let total: f64 = row.iter().map(|&(_, p)| p).sum();
        if (total - 1.0).abs() > tol || row.iter().any(|&(_, p)| p < 0.0) {
            return Err(Error::Config(format!(
                "kernel row {x} is not a probability vector (sum {total})"
            )));
        }
        if (spec.h)(x) <= 0.0 || (spec.pi)(x) <= 0.0 {
            return Err(Error::Config(format!("h and pi must be positive (type {x})")));
        }
    }
    // stationarity on the probe prefix: the flow from unprobed states bounds
    // the admissible defect
    let mut pi_mass = KahanSum::default();
    let mut inflow = vec![0.0f64; probe];
    for x in 0..probe {
        let x = x as TypeId;
        pi_mass.add((spec.pi)(x));
        for (y, p) in (spec.kernel)(x) {
            if (y as usize) < probe {
                inflow[y as usize] += (spec.pi)(x) * p;
            }
        }
    }
    let tail_mass = (1.0 - pi_mass.value()).max(0.0);
    for (y, r) in inflow.iter().enumerate() {
        let py = (spec.pi)(y as TypeId);
        if *r > py + tol || *r < py - tail_mass - tol {
            return Err(Error::Config(format!(
                "pi is not stationary for the kernel at type {y}: inflow {r}, pi {py}"
            )));
        }
    }

    let factory: OffspringFactory = factory.unwrap_or_else(|| {
        Arc::new(|_x, row: &SparseVec| {
            OffspringLaw::IndepPoisson(IndepPoisson {
                det: CountsVec::new(),
                poisson: row.iter().collect(),
            })
        })
    });

    // mean-row agreement between the factory's laws and the constructed M
    let spec = Arc::new(spec);
    for x in 0..probe {
        let x = x as TypeId;
        let row = constructed_row(&spec, x);
        let law = factory(x, &row);
        for (y, m) in row.iter() {
            let got = law.mean_coord(y);
            if (got - m).abs() > tol * (1.0 + m.abs()) {
                return Err(Error::MeanMismatch {
                    x,
                    y,
                    law: got,
                    constructed: m,
                });
            }
        }
    }

    let norm_residual = match spec.support {
        Some(n) => {
            let mut s = KahanSum::default();
            for x in 0..n {
                s.add((spec.pi)(x as TypeId));
            }
            (s.value() - 1.0).abs()
        }
        None => tail_mass,
    };
    let h_spec = spec.clone();
    let ht_spec = spec.clone();
    let triple = PerronTriple {
        rho: spec.rho,
        h: HFun::func(move |x| (h_spec.h)(x)),
        htilde: HFun::func(move |x| (ht_spec.pi)(x) / (ht_spec.h)(x)),
        norm_residual,
        support: spec.support,
    };
    let law_spec = spec.clone();
    let law_fn: Arc<dyn Fn(TypeId) -> OffspringLaw + Send + Sync> = Arc::new(move |x| {
        let row = constructed_row(&law_spec, x);
        factory(x, &row)
    });
    Ok(match spec.support {
        Some(n) => {
            let laws = (0..n).map(|x| law_fn(x as TypeId)).collect();
            Model {
                name: "from_spinal".into(),
                params: json!({"rho": spec.rho}),
                truncation: None,
                laws: LawTable::Finite(Arc::new(laws)),
                analytic: Some(triple),
            }
        }
        None => Model {
            name: "from_spinal".into(),
            params: json!({"rho": spec.rho}),
            truncation: None,
            laws: LawTable::Infinite(law_fn),
            analytic: Some(triple),
        },
    })
}

// ---------------------------------------------------------------------------
// Gallery.
// ---------------------------------------------------------------------------

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct SingleTypeParams {
    law: String,
    #[serde(default)]
    k: Option<u64>,
    #[serde(default)]
    mean: Option<f64>,
    #[serde(default)]
    p: Option<f64>,
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct FiniteMatrixParams {
    #[serde(default)]
    preset: Option<String>,
    #[serde(default)]
    means: Option<Vec<Vec<f64>>>,
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct LadderParams {
    #[serde(default = "default_ladder_rho")]
    rho: f64,
    /// Per-rung growth exponent of h (see the gallery comment).
    #[serde(default = "default_ladder_gamma")]
    gamma: f64,
}

fn default_ladder_rho() -> f64 {
    1.5
}

fn default_ladder_gamma() -> f64 {
    1.0
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct EmptyParams {}

fn parse<T: serde::de::DeserializeOwned>(params: &Value) -> Result<T> {
    serde_json::from_value(params.clone())
        .map_err(|e| Error::Config(format!("invalid gallery params: {e}")))
}

fn single_type_triple(rho: f64) -> PerronTriple {
    PerronTriple {
        rho,
        h: HFun::table(vec![1.0]),
        htilde: HFun::table(vec![1.0]),
        norm_residual: 0.0,
        support: Some(1),
    }
}

/// Named example models with analytic Perron data and documented defaults.
pub fn gallery(name: &str, params: &Value) -> Result<Model> {
    match name {
        "single_type" => {
            let p: SingleTypeParams = parse(params)?;
            let (law, rho) = match p.law.as_str() {
                "deterministic" => {
                    let k = p
                        .k
                        .ok_or_else(|| Error::Config("deterministic law needs k".into()))?;
                    (
                        OffspringLaw::deterministic(CountsVec::from_entries([(0, k)])),
                        k as f64,
                    )
                }
                "poisson" => {
                    let m = p
                        .mean
                        .ok_or_else(|| Error::Config("poisson law needs mean".into()))?;
                    (
                        OffspringLaw::IndepPoisson(IndepPoisson {
                            det: CountsVec::new(),
                            poisson: vec![(0, m)],
                        }),
                        m,
                    )
                }
                "bernoulli" => {
                    let pr = p
                        .p
                        .ok_or_else(|| Error::Config("bernoulli law needs p".into()))?;
                    if !(0.0..=1.0).contains(&pr) {
                        return Err(Error::Config(format!("bernoulli p={pr} out of [0,1]")));
                    }
                    (
                        OffspringLaw::FinitePmf(FinitePmf {
                            atoms: vec![
                                (CountsVec::new(), 1.0 - pr),
                                (CountsVec::from_entries([(0, 1)]), pr),
                            ],
                        }),
                        pr,
                    )
                }
                "log_pareto" => {
                    let heavy = HeavyTailLaw::new(0);
                    let rho = heavy.mean;
                    (OffspringLaw::HeavyTail(heavy), rho)
                }
                other => {
                    return Err(Error::Config(format!("unknown single_type law '{other}'")))
                }
            };
            Ok(Model::finite(
                "single_type",
                params.clone(),
                vec![law],
                Some(single_type_triple(rho)),
            ))
        }
        "finite_matrix" => {
            let p: FiniteMatrixParams = parse(params)?;
            match (p.preset.as_deref(), p.means) {
                (Some("all_ones_2"), None) => {
                    let laws = poisson_matrix_laws(&[vec![1.0, 1.0], vec![1.0, 1.0]]);
                    let triple = PerronTriple {
                        rho: 2.0,
                        h: HFun::table(vec![1.0, 1.0]),
                        htilde: HFun::table(vec![0.5, 0.5]),
                        norm_residual: 0.0,
                        support: Some(2),
                    };
                    Ok(Model::finite(
                        "finite_matrix",
                        params.clone(),
                        laws,
                        Some(triple),
                    ))
                }
                (Some("poisson_3"), None) => {
                    let row = vec![1.0, 1.0, 1.0];
                    let laws = poisson_matrix_laws(&[row.clone(), row.clone(), row]);
                    let triple = PerronTriple {
                        rho: 3.0,
                        h: HFun::table(vec![1.0, 1.0, 1.0]),
                        htilde: HFun::table(vec![1.0 / 3.0; 3]),
                        norm_residual: 0.0,
                        support: Some(3),
                    };
                    Ok(Model::finite(
                        "finite_matrix",
                        params.clone(),
                        laws,
                        Some(triple),
                    ))
                }
                (Some("bounded_2"), None) => {
                    // two types with offspring support <= 2 per coordinate:
                    // small enough for exact genealogy enumeration
                    let law_a = OffspringLaw::FinitePmf(FinitePmf {
                        atoms: vec![
                            (CountsVec::new(), 0.2),
                            (CountsVec::from_entries([(0, 1)]), 0.3),
                            (CountsVec::from_entries([(0, 1), (1, 1)]), 0.5),
                        ],
                    });
                    let law_b = OffspringLaw::FinitePmf(FinitePmf {
                        atoms: vec![
                            (CountsVec::from_entries([(0, 1)]), 0.4),
                            (CountsVec::from_entries([(1, 2)]), 0.6),
                        ],
                    });
                    Ok(Model::finite(
                        "finite_matrix",
                        params.clone(),
                        vec![law_a, law_b],
                        None,
                    ))
                }
                (None, Some(means)) => {
                    let n = means.len();
                    if n == 0 || means.iter().any(|r| r.len() != n) {
                        return Err(Error::Config(
                            "means must be a nonempty square matrix".into(),
                        ));
                    }
                    if means.iter().flatten().any(|&m| m < 0.0 || !m.is_finite()) {
                        return Err(Error::Config("means must be finite and >= 0".into()));
                    }
                    Ok(Model::finite(
                        "finite_matrix",
                        params.clone(),
                        poisson_matrix_laws(&means),
                        None,
                    ))
                }
                _ => Err(Error::Config(
                    "finite_matrix needs exactly one of preset or means".into(),
                )),
            }
        }
        "ladder" => {
            let p: LadderParams = parse(params)?;
            let rho = p.rho;
            let gamma = p.gamma;
            if rho <= 1.0 {
                return Err(Error::Config(format!("ladder rho={rho} must exceed 1")));
            }
            if gamma < 0.0 {
                return Err(Error::Config(format!("ladder gamma={gamma} must be >= 0")));
            }
            let c = 1.0 + ZETA2 / ZETA3;
            let law_fn: Arc<dyn Fn(TypeId) -> OffspringLaw + Send + Sync> =
                Arc::new(move |x| match ladder_unindex(x) {
                    None => OffspringLaw::PoissonRow(PoissonRow {
                        // M_{0,(n,1)} = rho q_n / s_n keeps the row's h-mass
                        // at rho: M h = rho q_n for every rung
                        coords: Arc::new(move |i| {
                            let n = i as u32 + 1;
                            (ladder_index(n, 1), rho * ladder_q(n) / ladder_scale(n, gamma))
                        }),
                        h_tail: Arc::new(move |i| {
                            // sum_{n > i} rho q_n <= rho / (2 i^2 zeta(3))
                            if i == 0 {
                                rho
                            } else {
                                rho / (2.0 * (i as f64) * (i as f64) * ZETA3)
                            }
                        }),
                    }),
                    Some((n, m)) if m < n => OffspringLaw::IndepPoisson(IndepPoisson {
                        det: CountsVec::new(),
                        poisson: vec![(ladder_index(n, m + 1), rho)],
                    }),
                    Some((n, _)) => OffspringLaw::IndepPoisson(IndepPoisson {
                        det: CountsVec::new(),
                        poisson: vec![(0, rho * ladder_scale(n, gamma))],
                    }),
                });
            let triple = PerronTriple {
                rho,
                h: HFun::func(move |x| match ladder_unindex(x) {
                    None => 1.0,
                    Some((n, _)) => ladder_scale(n, gamma),
                }),
                htilde: HFun::func(move |x| match ladder_unindex(x) {
                    None => 1.0 / c,
                    Some((n, _)) => ladder_q(n) / (c * ladder_scale(n, gamma)),
                }),
                norm_residual: 0.0,
                support: None,
            };
            Ok(Model::infinite("ladder", params.clone(), law_fn, Some(triple)))
        }
        "ext_vs_w" => {
            let _: EmptyParams = parse(params)?;
            // Offspring laws exactly as printed in the examples section:
            // L^(n) = delta_{n+1} + Poi(2 (2/3)^{n+1}) delta_0 for n >= 1 and
            // L^(0) = Poi(1) delta_1 + Poi(4/3) delta_0. Note these means are
            // M_{n,0} = 2 (2/3)^{n+1}, twice what the spinal construction
            // with rho = 4/3, p = 1/2 would give; the actual Perron data of
            // this mean matrix is rho = 2, h_n = (2/3)^n, htilde_n =
            // (2/3) 2^{-n} (so pi_n = (2/3) 3^{-n} and the spinal kernel is
            // p_{n,n+1} = 1/3, p_{n,0} = 2/3), which is what we expose.
            let lam = |n: u32| 2.0 * (2.0f64 / 3.0).powi(n as i32 + 1);
            let law_fn: Arc<dyn Fn(TypeId) -> OffspringLaw + Send + Sync> =
                Arc::new(move |n| {
                    if n == 0 {
                        OffspringLaw::IndepPoisson(IndepPoisson {
                            det: CountsVec::new(),
                            poisson: vec![(0, lam(0)), (1, 1.0)],
                        })
                    } else {
                        OffspringLaw::IndepPoisson(IndepPoisson {
                            det: CountsVec::unit(n + 1),
                            poisson: vec![(0, lam(n))],
                        })
                    }
                });
            let triple = PerronTriple {
                rho: 2.0,
                h: HFun::func(|n| (2.0f64 / 3.0).powi(n as i32)),
                htilde: HFun::func(|n| (2.0 / 3.0) * 0.5f64.powi(n as i32)),
                norm_residual: 0.0,
                support: None,
            };
            Ok(Model::infinite("ext_vs_w", params.clone(), law_fn, Some(triple)))
        }
        other => Err(Error::Config(format!("unknown gallery model '{other}'"))),
    }
}

fn poisson_matrix_laws(means: &[Vec<f64>]) -> Vec<OffspringLaw> {
    means
        .iter()
        .map(|row| {
            OffspringLaw::IndepPoisson(IndepPoisson {
                det: CountsVec::new(),
                poisson: row
                    .iter()
                    .enumerate()
                    .filter(|&(_, &m)| m > 0.0)
                    .map(|(j, &m)| (j as TypeId, m))
                    .collect(),
            })
        })
        .collect()
}
