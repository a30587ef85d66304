//! Exact enumeration of forward genealogies and Kesten marked forests on
//! tiny models. Serves as ground truth for the samplers: the reweighting
//! identity and the recursive construction are computed independently and
//! compared in total variation.
//!
//! Forests are ordered: children of a vertex are listed by (type index,
//! birth index), so atom identity is well-defined.

use std::collections::HashMap;
use std::rc::Rc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Model, PerronTriple};
use crate::spine::KestenState;
use crate::types::{CountsVec, KahanSum, TypeId};

pub const DEFAULT_BUDGET: u64 = 10_000_000;

/// One vertex of an ordered typed genealogy.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct Tree {
    pub ty: TypeId,
    pub children: Vec<Tree>,
}

pub type Forest = Vec<Tree>;

#[derive(Debug, Clone, Serialize)]
pub struct ForestAtom {
    pub forest: Forest,
    pub prob: f64,
}

/// A forest together with the marked generation-n vertex, addressed by the
/// child-index path (root index first).
#[derive(Debug, Clone, Serialize)]
pub struct MarkedForestAtom {
    pub forest: Forest,
    pub mark: Vec<usize>,
    pub prob: f64,
}

struct Enumerator<'a> {
    model: &'a Model,
    budget: u64,
    work: u64,
    memo: HashMap<(TypeId, u32), Rc<Vec<(Tree, f64)>>>,
}

impl<'a> Enumerator<'a> {
    fn new(model: &'a Model, budget: u64) -> Self {
        Self {
            model,
            budget,
            work: 0,
            memo: HashMap::new(),
        }
    }

    fn charge(&mut self, amount: u64) -> Result<()> {
        self.work += amount;
        if self.work > self.budget {
            Err(Error::Budget {
                atoms: self.work as usize,
                budget: self.budget as usize,
            })
        } else {
            Ok(())
        }
    }

    fn law_atoms(&self, ty: TypeId) -> Result<Vec<(CountsVec, f64)>> {
        let law = self.model.law(ty)?;
        law.atoms().map(<[_]>::to_vec).ok_or_else(|| {
            Error::Unsupported(format!(
                "type {ty} has an unbounded offspring law; exact enumeration needs finite support"
            ))
        })
    }

    /// All subtrees of one vertex of type `ty`, expanded `depth` more
    /// generations, with their probabilities.
    fn vertex(&mut self, ty: TypeId, depth: u32) -> Result<Rc<Vec<(Tree, f64)>>> {
        if let Some(v) = self.memo.get(&(ty, depth)) {
            return Ok(v.clone());
        }
        let out = if depth == 0 {
            vec![(
                Tree {
                    ty,
                    children: Vec::new(),
                },
                1.0,
            )]
        } else {
            let mut out = Vec::new();
            for (counts, p) in self.law_atoms(ty)? {
                let combos = self.children_product(&counts, depth - 1)?;
                for (children, q) in combos {
                    out.push((Tree { ty, children }, p * q));
                }
            }
            out
        };
        self.charge(out.len() as u64)?;
        let rc = Rc::new(out);
        self.memo.insert((ty, depth), rc.clone());
        Ok(rc)
    }

    /// Cartesian product of the subtree choices for a brood given by type
    /// counts, children in type order.
    fn children_product(&mut self, counts: &CountsVec, depth: u32) -> Result<Vec<(Vec<Tree>, f64)>> {
        let mut partial: Vec<(Vec<Tree>, f64)> = vec![(Vec::new(), 1.0)];
        for (t, c) in counts.iter() {
            let opts = self.vertex(t, depth)?;
            for _ in 0..c {
                self.charge(partial.len() as u64 * opts.len() as u64)?;
                let mut next = Vec::with_capacity(partial.len() * opts.len());
                for (ch, q) in &partial {
                    for (sub, r) in opts.iter() {
                        let mut ch2 = ch.clone();
                        ch2.push(sub.clone());
                        next.push((ch2, q * r));
                    }
                }
                partial = next;
            }
        }
        Ok(partial)
    }

    /// Subtree of a spine vertex of type `ty`: the marked path descends via
    /// the spinal kernel, the parent reproduces with the L_y-biased law and
    /// the mark is uniform among type-y children. Per (law atom, child
    /// slot) the combined weight collapses to p * h_y / (rho h_ty).
    fn spine_vertex(
        &mut self,
        triple: &PerronTriple,
        ty: TypeId,
        depth: u32,
    ) -> Result<Vec<(Tree, Vec<usize>, f64)>> {
        if depth == 0 {
            return Ok(vec![(
                Tree {
                    ty,
                    children: Vec::new(),
                },
                Vec::new(),
                1.0,
            )]);
        }
        let h_ty = triple.h_at(ty);
        let mut out = Vec::new();
        for (counts, p) in self.law_atoms(ty)? {
            let slot_types: Vec<TypeId> = counts
                .iter()
                .flat_map(|(t, c)| std::iter::repeat(t).take(c as usize))
                .collect();
            for (slot, &y) in slot_types.iter().enumerate() {
                let hy = triple.h_at(y);
                if hy <= 0.0 {
                    continue;
                }
                let w = p * hy / (triple.rho * h_ty);
                let spine_opts = self.spine_vertex(triple, y, depth - 1)?;
                // build the brood left to right, inserting the spine
                // subtree at its slot and unbiased subtrees elsewhere
                for (spine_sub, sub_path, sp) in &spine_opts {
                    let mut states: Vec<(Vec<Tree>, f64)> = vec![(Vec::new(), sp * w)];
                    for (i, &t) in slot_types.iter().enumerate() {
                        if i == slot {
                            for (ch, _) in states.iter_mut() {
                                ch.push(spine_sub.clone());
                            }
                        } else {
                            let opts = self.vertex(t, depth - 1)?;
                            self.charge(states.len() as u64 * opts.len() as u64)?;
                            let mut next = Vec::with_capacity(states.len() * opts.len());
                            for (ch, q) in &states {
                                for (sub, r) in opts.iter() {
                                    let mut ch2 = ch.clone();
                                    ch2.push(sub.clone());
                                    next.push((ch2, q * r));
                                }
                            }
                            states = next;
                        }
                    }
                    for (children, q) in states {
                        let mut path = Vec::with_capacity(sub_path.len() + 1);
                        path.push(slot);
                        path.extend(sub_path.iter().copied());
                        out.push((Tree { ty, children }, path, q));
                    }
                }
            }
        }
        self.charge(out.len() as u64)?;
        Ok(out)
    }
}

fn roots_in_order(z0: &CountsVec) -> Vec<TypeId> {
    z0.iter()
        .flat_map(|(t, c)| std::iter::repeat(t).take(c as usize))
        .collect()
}

/// The complete distribution over genealogies of `z0` up to generation `n`.
pub fn enumerate_forward(
    model: &Model,
    z0: &CountsVec,
    n: u32,
    budget: Option<u64>,
) -> Result<Vec<ForestAtom>> {
    if z0.is_empty() {
        return Err(Error::Config("empty initial population".into()));
    }
    let mut en = Enumerator::new(model, budget.unwrap_or(DEFAULT_BUDGET));
    let mut partial: Vec<(Forest, f64)> = vec![(Vec::new(), 1.0)];
    for ty in roots_in_order(z0) {
        let opts = en.vertex(ty, n)?;
        en.charge(partial.len() as u64 * opts.len() as u64)?;
        let mut next = Vec::with_capacity(partial.len() * opts.len());
        for (f, p) in &partial {
            for (t, q) in opts.iter() {
                let mut f2 = f.clone();
                f2.push(t.clone());
                next.push((f2, p * q));
            }
        }
        partial = next;
    }
    Ok(partial
        .into_iter()
        .map(|(forest, prob)| ForestAtom { forest, prob })
        .collect())
}

fn gen_n_vertices(forest: &Forest, n: u32) -> Vec<(Vec<usize>, TypeId)> {
    fn walk(t: &Tree, depth: u32, path: &mut Vec<usize>, out: &mut Vec<(Vec<usize>, TypeId)>) {
        if depth == 0 {
            out.push((path.clone(), t.ty));
            return;
        }
        for (i, c) in t.children.iter().enumerate() {
            path.push(i);
            walk(c, depth - 1, path, out);
            path.pop();
        }
    }
    let mut out = Vec::new();
    for (i, t) in forest.iter().enumerate() {
        let mut path = vec![i];
        walk(t, n, &mut path, &mut out);
        path.pop();
    }
    out
}

/// Type counts of generation n of a forest.
pub fn counts_at(forest: &Forest, n: u32) -> CountsVec {
    let mut c = CountsVec::new();
    for (_, ty) in gen_n_vertices(forest, n) {
        c.add(ty, 1);
    }
    c
}

/// W_n of a forest: rho^-n times the h-mass of generation n.
pub fn w_of_forest(forest: &Forest, triple: &PerronTriple, n: u32) -> f64 {
    let mass = counts_at(forest, n).h_sum(|x| triple.h_at(x));
    triple.rho.powi(-(n as i32)) * mass
}

pub fn mark_type(atom: &MarkedForestAtom) -> TypeId {
    let mut node = &atom.forest[atom.mark[0]];
    for &i in &atom.mark[1..] {
        node = &node.children[i];
    }
    node.ty
}

/// The marked-forest distribution by the reweighting identity: every
/// generation-n vertex v of every forward atom carries the weight
/// prob * h(x^v) / (rho^n Z(0)h).
pub fn kesten_exact_reweight(
    model: &Model,
    triple: &PerronTriple,
    z0: &CountsVec,
    n: u32,
    budget: Option<u64>,
) -> Result<Vec<MarkedForestAtom>> {
    let z0h = z0.h_sum(|x| triple.h_at(x));
    let scale = triple.rho.powi(-(n as i32)) / z0h;
    let mut out = Vec::new();
    for atom in enumerate_forward(model, z0, n, budget)? {
        for (path, ty) in gen_n_vertices(&atom.forest, n) {
            out.push(MarkedForestAtom {
                forest: atom.forest.clone(),
                mark: path,
                prob: atom.prob * triple.h_at(ty) * scale,
            });
        }
    }
    Ok(out)
}

/// The marked-forest distribution by unrolling the recursive construction:
/// the initial mark is h-proportional among the roots, then each step takes
/// a spinal move with biased reproduction and uniform re-marking.
pub fn kesten_exact_recursive(
    model: &Model,
    triple: &PerronTriple,
    z0: &CountsVec,
    n: u32,
    budget: Option<u64>,
) -> Result<Vec<MarkedForestAtom>> {
    if z0.is_empty() {
        return Err(Error::Config("empty initial population".into()));
    }
    let roots = roots_in_order(z0);
    let z0h = z0.h_sum(|x| triple.h_at(x));
    let mut en = Enumerator::new(model, budget.unwrap_or(DEFAULT_BUDGET));
    let mut out = Vec::new();
    for (root_idx, &root_ty) in roots.iter().enumerate() {
        let w_root = triple.h_at(root_ty) / z0h;
        let spine_opts = en.spine_vertex(triple, root_ty, n)?;
        // unbiased expansions of the other roots, combined around the
        // spine root
        for (spine_sub, sub_path, sp) in &spine_opts {
            let mut mark = Vec::with_capacity(sub_path.len() + 1);
            mark.push(root_idx);
            mark.extend(sub_path.iter().copied());
            let mut states: Vec<(Forest, f64)> = vec![(Vec::new(), sp * w_root)];
            for (i, &ty) in roots.iter().enumerate() {
                if i == root_idx {
                    for (f, _) in states.iter_mut() {
                        f.push(spine_sub.clone());
                    }
                } else {
                    let opts = en.vertex(ty, n)?;
                    en.charge(states.len() as u64 * opts.len() as u64)?;
                    let mut next = Vec::with_capacity(states.len() * opts.len());
                    for (f, q) in &states {
                        for (sub, r) in opts.iter() {
                            let mut f2 = f.clone();
                            f2.push(sub.clone());
                            next.push((f2, q * r));
                        }
                    }
                    states = next;
                }
            }
            for (forest, prob) in states {
                out.push(MarkedForestAtom {
                    forest,
                    mark: mark.clone(),
                    prob,
                });
            }
        }
    }
    Ok(out)
}

/// Total-variation distance between two marked-forest distributions given
/// as atom lists (atoms may repeat; they are aggregated by identity).
pub fn tv_marked(a: &[MarkedForestAtom], b: &[MarkedForestAtom]) -> f64 {
    use std::collections::BTreeMap;
    let mut keys: BTreeMap<(Forest, Vec<usize>), (f64, f64)> = BTreeMap::new();
    for atom in a {
        keys.entry((atom.forest.clone(), atom.mark.clone()))
            .or_insert((0.0, 0.0))
            .0 += atom.prob;
    }
    for atom in b {
        keys.entry((atom.forest.clone(), atom.mark.clone()))
            .or_insert((0.0, 0.0))
            .1 += atom.prob;
    }
    let mut acc = KahanSum::default();
    for (pa, pb) in keys.values() {
        acc.add((pa - pb).abs());
    }
    0.5 * acc.value()
}

/// Converts a sampled Kesten state to the canonical (forest, mark path)
/// encoding used by the exact atoms.
pub fn from_kesten_state(state: &KestenState) -> (Forest, Vec<usize>) {
    let n_nodes = state.nodes.len();
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n_nodes];
    let mut roots = Vec::new();
    for (v, node) in state.nodes.iter().enumerate() {
        match node.parent {
            Some(p) => children[p].push(v),
            None => roots.push(v),
        }
    }
    fn build(v: usize, state: &KestenState, children: &[Vec<usize>]) -> Tree {
        Tree {
            ty: state.nodes[v].ty,
            children: children[v].iter().map(|&c| build(c, state, children)).collect(),
        }
    }
    let forest: Forest = roots.iter().map(|&r| build(r, state, &children)).collect();
    // path to the mark via parent pointers
    let mut rev = Vec::new();
    let mut cur = state.mark;
    while let Some(p) = state.nodes[cur].parent {
        let idx = children[p].iter().position(|&c| c == cur).expect("child of its parent");
        rev.push(idx);
        cur = p;
    }
    rev.push(roots.iter().position(|&r| r == cur).expect("root"));
    rev.reverse();
    (forest, rev)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::gallery;
    use crate::spectral::perron_truncated;
    use serde_json::json;

    fn bounded() -> (Model, PerronTriple) {
        let m = gallery("finite_matrix", &json!({"preset": "bounded_2"})).unwrap();
        let t = perron_truncated(&m, 2, 1e-13).unwrap();
        (m, t)
    }

    #[test]
    fn bernoulli_one_step_atoms() {
        let m = gallery("single_type", &json!({"law": "bernoulli", "p": 0.3})).unwrap();
        let atoms = enumerate_forward(&m, &CountsVec::unit(0), 1, None).unwrap();
        assert_eq!(atoms.len(), 2);
        let mut probs: Vec<(usize, f64)> = atoms
            .iter()
            .map(|a| (a.forest[0].children.len(), a.prob))
            .collect();
        probs.sort_by_key(|&(k, _)| k);
        assert!((probs[0].1 - 0.7).abs() < 1e-15);
        assert!((probs[1].1 - 0.3).abs() < 1e-15);
    }

    #[test]
    fn forward_probabilities_sum_to_one() {
        let (m, _) = bounded();
        for n in 1..=3u32 {
            let atoms = enumerate_forward(&m, &CountsVec::unit(0), n, None).unwrap();
            let mut acc = KahanSum::default();
            for a in &atoms {
                acc.add(a.prob);
            }
            assert!((acc.value() - 1.0).abs() < 1e-12, "n={n}");
        }
    }

    #[test]
    fn forward_martingale_identity() {
        let (m, t) = bounded();
        let z0 = CountsVec::from_entries([(0, 1), (1, 1)]);
        let atoms = enumerate_forward(&m, &z0, 2, None).unwrap();
        let z0h = z0.h_sum(|x| t.h_at(x));
        let mut acc = KahanSum::default();
        for a in &atoms {
            acc.add(a.prob * w_of_forest(&a.forest, &t, 2));
        }
        assert!((acc.value() - z0h).abs() < 1e-12);
    }

    #[test]
    fn forward_mean_matches_matrix_powers() {
        let (m, _) = bounded();
        // M and M^3 applied to e_A
        let row = |x: u32| m.law(x).unwrap().full_mean_row();
        let m00 = row(0).get(0);
        let m01 = row(0).get(1);
        let m10 = row(1).get(0);
        let m11 = row(1).get(1);
        let mut ez = [1.0f64, 0.0];
        for _ in 0..3 {
            ez = [ez[0] * m00 + ez[1] * m10, ez[0] * m01 + ez[1] * m11];
        }
        let atoms = enumerate_forward(&m, &CountsVec::unit(0), 3, None).unwrap();
        let mut got = [KahanSum::default(), KahanSum::default()];
        for a in &atoms {
            let c = counts_at(&a.forest, 3);
            got[0].add(a.prob * c.get(0) as f64);
            got[1].add(a.prob * c.get(1) as f64);
        }
        assert!((got[0].value() - ez[0]).abs() < 1e-12);
        assert!((got[1].value() - ez[1]).abs() < 1e-12);
    }

    #[test]
    fn reweight_n0_is_h_proportional_root_mark() {
        let (m, t) = bounded();
        let atoms = kesten_exact_reweight(&m, &t, &CountsVec::unit(0), 0, None).unwrap();
        assert_eq!(atoms.len(), 1);
        assert_eq!(atoms[0].mark, vec![0]);
        assert!((atoms[0].prob - 1.0).abs() < 1e-14);
    }

    #[test]
    fn marked_probabilities_sum_to_one() {
        let (m, t) = bounded();
        let z0 = CountsVec::from_entries([(0, 1), (1, 1)]);
        for n in 0..=2u32 {
            for atoms in [
                kesten_exact_reweight(&m, &t, &z0, n, None).unwrap(),
                kesten_exact_recursive(&m, &t, &z0, n, None).unwrap(),
            ] {
                let mut acc = KahanSum::default();
                for a in &atoms {
                    acc.add(a.prob);
                }
                assert!((acc.value() - 1.0).abs() < 1e-10, "n={n}: {}", acc.value());
            }
        }
    }

    #[test]
    fn reweight_equals_recursive_exactly() {
        let (m, t) = bounded();
        for (z0, n) in [
            (CountsVec::unit(0), 2u32),
            (CountsVec::unit(1), 2),
            (CountsVec::from_entries([(0, 1), (1, 1)]), 2),
            (CountsVec::unit(0), 3),
        ] {
            let a = kesten_exact_reweight(&m, &t, &z0, n, None).unwrap();
            let b = kesten_exact_recursive(&m, &t, &z0, n, None).unwrap();
            assert!(tv_marked(&a, &b) < 1e-12, "TV at n={n}: {}", tv_marked(&a, &b));
        }
        // also on a single-type random model
        let m2 = gallery("single_type", &json!({"law": "bernoulli", "p": 0.35})).unwrap();
        let t2 = m2.analytic.clone().unwrap();
        let a = kesten_exact_reweight(&m2, &t2, &CountsVec::unit(0), 3, None).unwrap();
        let b = kesten_exact_recursive(&m2, &t2, &CountsVec::unit(0), 3, None).unwrap();
        assert!(tv_marked(&a, &b) < 1e-12);
    }

    #[test]
    fn deterministic_two_children_marks_equiprobable() {
        let m = gallery("single_type", &json!({"law": "deterministic", "k": 2})).unwrap();
        let t = m.analytic.clone().unwrap();
        let atoms = kesten_exact_recursive(&m, &t, &CountsVec::unit(0), 2, None).unwrap();
        assert_eq!(atoms.len(), 4);
        for a in &atoms {
            assert!((a.prob - 0.25).abs() < 1e-14);
        }
    }

    #[test]
    fn marked_type_marginal_is_spinal_chain() {
        let (m, t) = bounded();
        let z0 = CountsVec::from_entries([(0, 1), (1, 1)]);
        let z0h = z0.h_sum(|x| t.h_at(x));
        // two-step spinal chain from the h-weighted start
        let p0 = m.spinal_transition(&t, 0, 2, 1e-12).unwrap().0;
        let p1 = m.spinal_transition(&t, 1, 2, 1e-12).unwrap().0;
        let nu = [t.h_at(0) / z0h, t.h_at(1) / z0h];
        let step = |v: [f64; 2]| {
            [
                v[0] * p0.get(0) + v[1] * p1.get(0),
                v[0] * p0.get(1) + v[1] * p1.get(1),
            ]
        };
        let expect = step(step(nu));
        let atoms = kesten_exact_reweight(&m, &t, &z0, 2, None).unwrap();
        let mut got = [KahanSum::default(), KahanSum::default()];
        for a in &atoms {
            got[mark_type(a) as usize].add(a.prob);
        }
        for y in 0..2 {
            assert!(
                (got[y].value() - expect[y]).abs() < 1e-12,
                "marginal at {y}: {} vs {}",
                got[y].value(),
                expect[y]
            );
        }
    }

    #[test]
    fn size_biased_w_law() {
        // E_Q[F(W~_n)] = E[W_n F(W_n)] / Z(0)h for F = id and square
        let (m, t) = bounded();
        let z0 = CountsVec::unit(0);
        let n = 2u32;
        let fwd = enumerate_forward(&m, &z0, n, None).unwrap();
        let marked = kesten_exact_reweight(&m, &t, &z0, n, None).unwrap();
        let z0h = z0.h_sum(|x| t.h_at(x));
        for pow in [1, 2] {
            let mut lhs = KahanSum::default();
            for a in &marked {
                lhs.add(a.prob * w_of_forest(&a.forest, &t, n).powi(pow));
            }
            let mut rhs = KahanSum::default();
            for a in &fwd {
                let w = w_of_forest(&a.forest, &t, n);
                rhs.add(a.prob * w * w.powi(pow) / z0h);
            }
            assert!(
                (lhs.value() - rhs.value()).abs() < 1e-12,
                "pow {pow}: {} vs {}",
                lhs.value(),
                rhs.value()
            );
        }
    }

    #[test]
    fn budget_is_enforced() {
        let (m, _) = bounded();
        let err = enumerate_forward(&m, &CountsVec::unit(0), 3, Some(10)).unwrap_err();
        assert!(matches!(err, Error::Budget { .. }));
    }

    #[test]
    fn unsupported_law_is_rejected() {
        let m = gallery("single_type", &json!({"law": "poisson", "mean": 1.0})).unwrap();
        let err = enumerate_forward(&m, &CountsVec::unit(0), 1, None).unwrap_err();
        assert!(matches!(err, Error::Unsupported(_)));
    }

    #[test]
    fn kesten_sampler_state_roundtrip() {
        use crate::rng::{kind, stream};
        let (m, t) = bounded();
        let mut rng = stream(1, &[kind::KESTEN, 0]);
        let mut st = KestenState::init(&t, &CountsVec::unit(0), &mut rng).unwrap();
        for _ in 0..2 {
            st = crate::spine::sample_kesten_step(&st, &m, &t, &mut rng).unwrap();
        }
        let (forest, mark) = from_kesten_state(&st);
        assert_eq!(forest.len(), 1);
        assert_eq!(mark.len(), 3);
        // the mark addresses a generation-2 vertex of the forest
        let vs = gen_n_vertices(&forest, 2);
        assert!(vs.iter().any(|(p, _)| *p == mark));
    }
}
