//! The spine process (X_n, Y_n, Z^(k)) and the Kesten marked forest.
//!
//! Along the spine, the parent of type x with spine child of type y
//! reproduces according to L^(x) biased by L^(x)_y; off-spine individuals
//! reproduce unbiased. The reweighted martingale is
//! W~_n = rho^-n (h(X_n) + sum_{k<=n} Z^(k)(n-k)h).

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::law::log_plus;
use crate::model::{Model, PerronTriple};
use crate::types::{CountsVec, KahanSum, PopVec, TypeId};

#[derive(Debug, Clone, Serialize)]
pub struct SpineRecord {
    /// X_0, ..., X_N.
    pub x_path: Vec<TypeId>,
    /// Y_1, ..., Y_N with Y_k = h(X_k) + Z^(k)(0)h.
    pub y_values: Vec<f64>,
    /// Z^(k)(0) for k = 1..N: the spine parent's biased brood minus the
    /// spine child itself.
    pub side_seeds: Vec<CountsVec>,
    /// Largest relative tail bias incurred by truncated biased sampling
    /// (zero for exactly-biased laws).
    pub tail_bias: f64,
}

impl SpineRecord {
    pub fn len(&self) -> usize {
        self.y_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y_values.is_empty()
    }
}

/// One spine step from `x`: the child type and the parent's biased brood.
fn spine_step<R: Rng>(
    model: &Model,
    triple: &PerronTriple,
    x: TypeId,
    rng: &mut R,
) -> Result<(TypeId, CountsVec, f64)> {
    let y = model.spinal_step(triple, x, rng)?;
    let draw = model.law(x)?.sample_biased(y, rng, 1e-9)?;
    Ok((y, draw.counts, draw.tail_bias))
}

pub fn sample_spine<R: Rng>(
    model: &Model,
    triple: &PerronTriple,
    x0: TypeId,
    horizon: u32,
    rng: &mut R,
) -> Result<SpineRecord> {
    let mut rec = SpineRecord {
        x_path: vec![x0],
        y_values: Vec::with_capacity(horizon as usize),
        side_seeds: Vec::with_capacity(horizon as usize),
        tail_bias: 0.0,
    };
    let mut x = x0;
    for _ in 0..horizon {
        let (y, brood, bias) = spine_step(model, triple, x, rng)?;
        // Y_k = h(X_k) + (L - e_{X_k})h = Lh
        let yk = brood.h_sum(|t| triple.h_at(t));
        let mut seed = brood;
        seed.remove_one(y);
        rec.x_path.push(y);
        rec.y_values.push(yk);
        rec.side_seeds.push(seed);
        rec.tail_bias = rec.tail_bias.max(bias);
        x = y;
    }
    Ok(rec)
}

/// W~_0, ..., W~_horizon. Each side subpopulation Z^(k) evolves as an
/// independent unbiased branching process from its seed, advanced lazily one
/// generation at a time. Z^(0)(0) = 0 because the initial population is the
/// spine root alone.
pub fn tilde_w_trajectory<R: Rng>(
    spine: &SpineRecord,
    model: &Model,
    triple: &PerronTriple,
    horizon: u32,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if (horizon as usize) > spine.len() {
        return Err(Error::Config(format!(
            "horizon {horizon} exceeds the spine length {}",
            spine.len()
        )));
    }
    let mut out = Vec::with_capacity(horizon as usize + 1);
    out.push(triple.h_at(spine.x_path[0]));
    let mut side: Vec<PopVec> = Vec::new();
    let mut scale = 1.0f64;
    for n in 1..=horizon as usize {
        // advance every existing side population by one generation
        for pop in side.iter_mut() {
            let mut next = PopVec::new();
            for (x, c) in pop.iter() {
                let law = model.law(x)?;
                if !law.finite_support() {
                    return Err(Error::Unsupported(format!(
                        "type {x} has an infinite-support offspring law; simulate a truncated model"
                    )));
                }
                law.aggregate_sample(c, rng, &mut next)?;
            }
            *pop = next;
        }
        side.push(PopVec::from_counts(&spine.side_seeds[n - 1]));
        scale /= triple.rho;
        let mut acc = KahanSum::default();
        acc.add(triple.h_at(spine.x_path[n]));
        for pop in &side {
            acc.add(pop.h_sum(|t| triple.h_at(t)));
        }
        out.push(scale * acc.value());
    }
    Ok(out)
}

/// One sample of the return functional from `x`:
/// log_+(sum_{k<=T1} rho^-k Y_k) with T1 the spine's first return time to
/// `x`, censored at `cap` steps.
pub fn return_functional_sample<R: Rng>(
    model: &Model,
    triple: &PerronTriple,
    x: TypeId,
    cap: u32,
    rng: &mut R,
) -> Result<(f64, bool)> {
    assert!(cap >= 1, "return-functional cap must be at least 1");
    let mut cur = x;
    let mut acc = KahanSum::default();
    let mut scale = 1.0f64;
    for _ in 0..cap {
        let (y, brood, _) = spine_step(model, triple, cur, rng)?;
        scale /= triple.rho;
        acc.add(scale * brood.h_sum(|t| triple.h_at(t)));
        if y == x {
            return Ok((log_plus(acc.value()), false));
        }
        cur = y;
    }
    Ok((log_plus(acc.value()), true))
}

// ---------------------------------------------------------------------------
// Kesten marked forest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize)]
pub struct KNode {
    pub ty: TypeId,
    pub parent: Option<usize>,
}

/// The marked forest up to generation n. Children of one parent are stored
/// in type order (the canonical ordering shared with the enumeration
/// oracle), so forest shapes compare directly across samplers.
#[derive(Debug, Clone, Serialize)]
pub struct KestenState {
    pub nodes: Vec<KNode>,
    /// Node ids per generation, in canonical order.
    pub gens: Vec<Vec<usize>>,
    /// Marked vertex at the latest generation.
    pub mark: usize,
    pub tail_bias: f64,
}

impl KestenState {
    /// Roots from z0 in type order; the mark is chosen proportional to
    /// h(type of root).
    pub fn init<R: Rng>(triple: &PerronTriple, z0: &CountsVec, rng: &mut R) -> Result<Self> {
        if z0.is_empty() {
            return Err(Error::Config("empty initial population".into()));
        }
        let mut nodes = Vec::new();
        for (x, c) in z0.iter() {
            for _ in 0..c {
                nodes.push(KNode { ty: x, parent: None });
            }
        }
        let total_h: f64 = nodes.iter().map(|v| triple.h_at(v.ty)).sum();
        let mut u: f64 = rng.random::<f64>() * total_h;
        let mut mark = nodes.len() - 1;
        for (i, v) in nodes.iter().enumerate() {
            u -= triple.h_at(v.ty);
            if u < 0.0 {
                mark = i;
                break;
            }
        }
        let gens = vec![(0..nodes.len()).collect()];
        Ok(Self {
            nodes,
            gens,
            mark,
            tail_bias: 0.0,
        })
    }

    pub fn generation(&self) -> usize {
        self.gens.len() - 1
    }

    pub fn mark_type(&self) -> TypeId {
        self.nodes[self.mark].ty
    }

    /// Type counts of the latest generation (the unmarked population view).
    pub fn front_counts(&self) -> CountsVec {
        let mut c = CountsVec::new();
        for &v in self.gens.last().expect("nonempty") {
            c.add(self.nodes[v].ty, 1);
        }
        c
    }
}

/// One generation of the Kesten construction: the marked vertex reproduces
/// with the L_y-biased law (y the next spinal type) and the new mark is
/// uniform among its type-y children; everyone else reproduces unbiased.
pub fn sample_kesten_step<R: Rng>(
    state: &KestenState,
    model: &Model,
    triple: &PerronTriple,
    rng: &mut R,
) -> Result<KestenState> {
    let mut next = state.clone();
    let front = state.gens.last().expect("nonempty").clone();
    let mut new_gen = Vec::new();
    let mut new_mark = None;
    for &v in &front {
        let ty = state.nodes[v].ty;
        let law = model.law(ty)?;
        let brood = if v == state.mark {
            let y = model.spinal_step(triple, ty, rng)?;
            let draw = law.sample_biased(y, rng, 1e-9)?;
            next.tail_bias = next.tail_bias.max(draw.tail_bias);
            // uniform mark among the type-y children of the spine parent
            let n_y = draw.counts.get(y);
            debug_assert!(n_y >= 1, "biased draw has at least one type-y child");
            let pick = rng.random_range(0..n_y);
            // children are appended in type order below; locate the pick
            let mut seen = 0u64;
            let mut offset = 0usize;
            for (t, c) in draw.counts.iter() {
                if t == y {
                    offset += pick as usize;
                    break;
                }
                seen += c;
                offset = seen as usize;
            }
            new_mark = Some(next.nodes.len() + offset);
            draw.counts
        } else {
            law.sample(rng, 1e-9).counts
        };
        for (t, c) in brood.iter() {
            for _ in 0..c {
                new_gen.push(next.nodes.len());
                next.nodes.push(KNode {
                    ty: t,
                    parent: Some(v),
                });
            }
        }
    }
    next.mark = new_mark.expect("mark always reproduces");
    next.gens.push(new_gen);
    Ok(next)
}

/// Serializes spine replicas as JSON lines: x_path, y_values and the
/// associated W~ trajectory per record.
pub fn write_spine_jsonl<W: std::io::Write>(
    out: &mut W,
    records: &[(SpineRecord, Vec<f64>)],
) -> Result<()> {
    #[derive(Serialize)]
    struct Line<'a> {
        x_path: &'a [TypeId],
        y_values: &'a [f64],
        tilde_w: &'a [f64],
        tail_bias: f64,
    }
    for (rec, tw) in records {
        let line = Line {
            x_path: &rec.x_path,
            y_values: &rec.y_values,
            tilde_w: tw,
            tail_bias: rec.tail_bias,
        };
        serde_json::to_writer(&mut *out, &line)
            .map_err(|e| Error::Config(format!("jsonl serialization: {e}")))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::gallery;
    use crate::rng::{kind, stream};
    use serde_json::json;

    fn single(lawspec: serde_json::Value) -> (Model, PerronTriple) {
        let m = gallery("single_type", &lawspec).unwrap();
        let t = m.analytic.clone().unwrap();
        (m, t)
    }

    #[test]
    fn deterministic_spine_is_constant() {
        let (m, t) = single(json!({"law": "deterministic", "k": 2}));
        let mut rng = stream(1, &[kind::SPINE, 0]);
        let rec = sample_spine(&m, &t, 0, 10, &mut rng).unwrap();
        assert_eq!(rec.x_path, vec![0; 11]);
        for &y in &rec.y_values {
            assert_eq!(y, 2.0);
        }
        for s in &rec.side_seeds {
            assert_eq!(s.total(), 1);
        }
    }

    #[test]
    fn poisson_y1_is_one_plus_poisson() {
        let (m, t) = single(json!({"law": "poisson", "mean": 2.0}));
        let reps = 40_000u64;
        let mut acc = KahanSum::default();
        let mut acc2 = KahanSum::default();
        for r in 0..reps {
            let mut rng = stream(11, &[kind::SPINE, r]);
            let rec = sample_spine(&m, &t, 0, 1, &mut rng).unwrap();
            let y = rec.y_values[0];
            assert!(y >= 1.0);
            acc.add(y);
            acc2.add(y * y);
        }
        let mean = acc.value() / reps as f64;
        let var = acc2.value() / reps as f64 - mean * mean;
        // 1 + Poisson(2): mean 3, variance 2
        let se_mean = (2.0 / reps as f64).sqrt();
        assert!((mean - 3.0).abs() < 4.0 * se_mean, "Y1 mean {mean}");
        assert!((var - 2.0).abs() < 0.1, "Y1 variance {var}");
    }

    #[test]
    fn ext_vs_w_first_step_law() {
        // the spinal kernel from type 0 puts mass 1/3 on type 1 and 2/3 on
        // the return to type 0 (matches spinal_transition)
        let m = gallery("ext_vs_w", &json!({})).unwrap();
        let t = m.analytic.clone().unwrap();
        let (row, _) = m.spinal_transition(&t, 0, 4, 1e-9).unwrap();
        assert!((row.get(1) - 1.0 / 3.0).abs() < 1e-12);
        let reps = 30_000u64;
        let mut ones = 0u64;
        for r in 0..reps {
            let mut rng = stream(12, &[kind::SPINE, r]);
            let rec = sample_spine(&m, &t, 0, 1, &mut rng).unwrap();
            match rec.x_path[1] {
                1 => ones += 1,
                0 => {}
                other => panic!("unexpected first spine step {other}"),
            }
        }
        let f = ones as f64 / reps as f64;
        let se = (f * (1.0 - f) / reps as f64).sqrt();
        assert!((f - 1.0 / 3.0).abs() < 4.0 * se, "P(X1=1) = {f}");
    }

    #[test]
    fn tilde_w_deterministic_is_one() {
        let (m, t) = single(json!({"law": "deterministic", "k": 2}));
        let mut rng = stream(2, &[kind::SPINE, 0]);
        let rec = sample_spine(&m, &t, 0, 8, &mut rng).unwrap();
        let tw = tilde_w_trajectory(&rec, &m, &t, 8, &mut rng).unwrap();
        assert_eq!(tw.len(), 9);
        for &w in &tw {
            assert!((w - 1.0).abs() < 1e-12, "tilde W = {w}");
        }
    }

    #[test]
    fn tilde_w_starts_at_h_and_dominates_yn() {
        let m = gallery("finite_matrix", &json!({"preset": "all_ones_2"})).unwrap();
        let t = m.analytic.clone().unwrap();
        for r in 0..200u64 {
            let mut rng = stream(3, &[kind::SPINE, r]);
            let rec = sample_spine(&m, &t, 1, 6, &mut rng).unwrap();
            let tw = tilde_w_trajectory(&rec, &m, &t, 6, &mut rng).unwrap();
            assert!((tw[0] - t.h_at(1)).abs() < 1e-12);
            for n in 1..=6usize {
                let floor = t.rho.powi(-(n as i32)) * rec.y_values[n - 1];
                assert!(tw[n] >= floor - 1e-12, "tilde W_{n} below rho^-n Y_n");
            }
        }
    }

    #[test]
    fn tilde_w_matches_size_biased_mean_poisson() {
        // under the reweighted law, E[W~_2] = E[W_2^2]/E[W_2] = 1.75 for
        // single-type Poisson(2)
        let (m, t) = single(json!({"law": "poisson", "mean": 2.0}));
        let reps = 40_000u64;
        let mut acc = KahanSum::default();
        for r in 0..reps {
            let mut rng = stream(13, &[kind::SPINE, r]);
            let rec = sample_spine(&m, &t, 0, 2, &mut rng).unwrap();
            let tw = tilde_w_trajectory(&rec, &m, &t, 2, &mut rng).unwrap();
            acc.add(tw[2]);
        }
        let mean = acc.value() / reps as f64;
        assert!((mean - 1.75).abs() < 0.03, "E[tilde W_2] = {mean}");
    }

    #[test]
    fn return_functional_deterministic() {
        let (m, t) = single(json!({"law": "deterministic", "k": 2}));
        let mut rng = stream(4, &[kind::RETURN_FUNCTIONAL, 0]);
        let (v, censored) = return_functional_sample(&m, &t, 0, 100, &mut rng).unwrap();
        assert_eq!(v, 0.0);
        assert!(!censored);
    }

    #[test]
    fn return_functional_ext_vs_w_censoring() {
        let m = gallery("ext_vs_w", &json!({})).unwrap();
        let t = m.analytic.clone().unwrap();
        let reps = 20_000u64;
        let mut censored = 0u64;
        let mut acc = KahanSum::default();
        for r in 0..reps {
            let mut rng = stream(14, &[kind::RETURN_FUNCTIONAL, r]);
            let (v, c) = return_functional_sample(&m, &t, 0, 1000, &mut rng).unwrap();
            assert!(v.is_finite() && v >= 0.0);
            if c {
                censored += 1;
            } else {
                acc.add(v);
            }
        }
        // the return probability is 2/3 per step, so censoring at cap 1000
        // is essentially impossible
        assert_eq!(censored, 0);
        let mean = acc.value() / reps as f64;
        assert!(mean.is_finite() && mean < 5.0, "mean {mean}");
    }

    #[test]
    fn kesten_init_mark_proportional_to_h() {
        // custom 2x2 with Mh = 2h for h = (2, 1)
        let m = gallery(
            "finite_matrix",
            &json!({"means": [[1.0, 2.0], [1.0, 0.0]]}),
        )
        .unwrap();
        let t = crate::spectral::perron_truncated(&m, 2, 1e-12).unwrap();
        assert!((t.rho - 2.0).abs() < 1e-9);
        assert!((t.h_at(0) / t.h_at(1) - 2.0).abs() < 1e-9);
        let z0 = CountsVec::from_entries([(0, 1), (1, 1)]);
        let reps = 30_000u64;
        let mut at_a = 0u64;
        for r in 0..reps {
            let mut rng = stream(5, &[kind::KESTEN, r]);
            let st = KestenState::init(&t, &z0, &mut rng).unwrap();
            if st.mark_type() == 0 {
                at_a += 1;
            }
        }
        let f = at_a as f64 / reps as f64;
        let se = (f * (1.0 - f) / reps as f64).sqrt();
        assert!((f - 2.0 / 3.0).abs() < 4.0 * se, "P(mark at A) = {f}");
    }

    #[test]
    fn kesten_mark_path_follows_spinal_kernel() {
        let m = gallery("finite_matrix", &json!({"preset": "bounded_2"})).unwrap();
        let t = crate::spectral::perron_truncated(&m, 2, 1e-12).unwrap();
        let (row, _) = m.spinal_transition(&t, 0, 2, 1e-12).unwrap();
        let reps = 20_000u64;
        let mut to_b = 0u64;
        for r in 0..reps {
            let mut rng = stream(6, &[kind::KESTEN, r]);
            let st = KestenState::init(&t, &CountsVec::unit(0), &mut rng).unwrap();
            let st = sample_kesten_step(&st, &m, &t, &mut rng).unwrap();
            // the marked vertex's type path is the spinal chain
            assert_eq!(st.generation(), 1);
            if st.mark_type() == 1 {
                to_b += 1;
            }
        }
        let f = to_b as f64 / reps as f64;
        let se = (f * (1.0 - f) / reps as f64).sqrt();
        assert!((f - row.get(1)).abs() < 4.0 * se, "P(X1=B) = {f}");
    }

    #[test]
    fn kesten_forest_mass_is_size_biased() {
        // E_Q[Z(2)h] = rho^2 E[W_2^2]/E[W_2] = 7 for single-type Poisson(2)
        let (m, t) = single(json!({"law": "poisson", "mean": 2.0}));
        let reps = 40_000u64;
        let mut acc = KahanSum::default();
        let mut acc2 = KahanSum::default();
        for r in 0..reps {
            let mut rng = stream(7, &[kind::KESTEN, r]);
            let mut st = KestenState::init(&t, &CountsVec::unit(0), &mut rng).unwrap();
            for _ in 0..2 {
                st = sample_kesten_step(&st, &m, &t, &mut rng).unwrap();
            }
            let mass = st.front_counts().h_sum(|x| t.h_at(x));
            acc.add(mass);
            acc2.add(mass * mass);
        }
        let mean = acc.value() / reps as f64;
        let var = (acc2.value() / reps as f64 - mean * mean).max(0.0);
        let se = (var / reps as f64).sqrt();
        assert!((mean - 7.0).abs() < 4.0 * se, "E_Q[Z(2)h] = {mean}, se {se}");
    }

    #[test]
    fn size_bias_identity_exact_vs_sampler() {
        // E[F(Y1) | X0=A, X1=y] = E[L_y F(Lh)] / M_xy for finite-support laws
        let m = gallery("finite_matrix", &json!({"preset": "bounded_2"})).unwrap();
        let t = crate::spectral::perron_truncated(&m, 2, 1e-12).unwrap();
        let law = m.law(0).unwrap();
        let atoms = law.atoms().unwrap();
        for y in [0u32, 1u32] {
            let m_xy = law.mean_coord(y);
            if m_xy == 0.0 {
                continue;
            }
            let mut exact = 0.0;
            for (counts, p) in atoms {
                let lh = counts.h_sum(|x| t.h_at(x));
                exact += p * counts.get(y) as f64 * lh;
            }
            exact /= m_xy;
            let reps = 30_000u64;
            let mut acc = KahanSum::default();
            for r in 0..reps {
                let mut rng = stream(8, &[kind::SPINE, y as u64, r]);
                let d = law.sample_biased(y, &mut rng, 1e-9).unwrap();
                acc.add(d.counts.h_sum(|x| t.h_at(x)));
            }
            let mc = acc.value() / reps as f64;
            assert!((mc - exact).abs() < 0.02, "y={y}: mc {mc} vs exact {exact}");
        }
    }

    #[test]
    fn jsonl_export_roundtrip() {
        let (m, t) = single(json!({"law": "poisson", "mean": 2.0}));
        let mut rng = stream(9, &[kind::SPINE, 0]);
        let rec = sample_spine(&m, &t, 0, 3, &mut rng).unwrap();
        let tw = tilde_w_trajectory(&rec, &m, &t, 3, &mut rng).unwrap();
        let mut buf = Vec::new();
        write_spine_jsonl(&mut buf, &[(rec.clone(), tw)]).unwrap();
        let line: serde_json::Value =
            serde_json::from_slice(buf.split(|&b| b == b'\n').next().unwrap()).unwrap();
        assert_eq!(line["x_path"].as_array().unwrap().len(), 4);
        assert_eq!(line["tilde_w"].as_array().unwrap().len(), 4);
    }
}
