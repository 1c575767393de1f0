//! Halfspaces, polytopes, affine maps and the small linear programs built on
//! them.

use minilp::{ComparisonOp, OptimizationDirection, Problem};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// The closed halfspace `{x : normalᵀx + offset ≥ 0}`. Used for equality
/// constraints too, where it stands for the hyperplane `normalᵀx + offset = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct Halfspace {
    pub normal: DVector<f64>,
    pub offset: f64,
}

impl Halfspace {
    pub fn new(normal: DVector<f64>, offset: f64) -> Self {
        Self { normal, offset }
    }

    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        self.normal.dot(x) + self.offset
    }

    pub fn flipped(&self) -> Self {
        Self::new(-&self.normal, -self.offset)
    }

    /// Unit-normal copy, or `None` for a zero normal.
    pub fn normalized(&self) -> Option<Self> {
        let n = self.normal.norm();
        (n > 0.0).then(|| Self::new(&self.normal / n, self.offset / n))
    }

    /// Signed Euclidean distance to the boundary, positive inside.
    pub fn signed_distance(&self, x: &DVector<f64>) -> f64 {
        let n = self.normal.norm();
        if n == 0.0 {
            if self.offset >= 0.0 {
                f64::INFINITY
            } else {
                f64::NEG_INFINITY
            }
        } else {
            self.eval(x) / n
        }
    }
}

/// An affine map `x ↦ lin·x + offset`.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    pub lin: DMatrix<f64>,
    pub offset: DVector<f64>,
}

impl Affine {
    pub fn new(lin: DMatrix<f64>, offset: DVector<f64>) -> Self {
        Self { lin, offset }
    }

    pub fn identity(n: usize) -> Self {
        Self::new(DMatrix::identity(n, n), DVector::zeros(n))
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.lin * x + &self.offset
    }

    /// `self ∘ inner`.
    pub fn after(&self, inner: &Affine) -> Affine {
        Affine::new(&self.lin * &inner.lin, &self.lin * &inner.offset + &self.offset)
    }

    /// Preimage of a halfspace of the output space.
    pub fn pullback(&self, h: &Halfspace) -> Halfspace {
        Halfspace::new(self.lin.tr_mul(&h.normal), h.normal.dot(&self.offset) + h.offset)
    }

    pub fn in_dim(&self) -> usize {
        self.lin.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.lin.nrows()
    }
}

/// Outcome of optimizing a linear objective.
#[derive(Clone, Debug)]
pub enum LpOutcome {
    Optimal { x: DVector<f64>, value: f64 },
    Infeasible,
    Unbounded,
}

/// A polyhedron given by inequalities, possibly unbounded.
#[derive(Clone, Debug, PartialEq)]
pub struct Polytope {
    dim: usize,
    halfspaces: Vec<Halfspace>,
}

impl Polytope {
    pub fn new(dim: usize) -> Self {
        Self { dim, halfspaces: Vec::new() }
    }

    pub fn from_halfspaces(dim: usize, halfspaces: Vec<Halfspace>) -> Self {
        Self { dim, halfspaces }
    }

    pub fn from_box(lo: &[f64], hi: &[f64]) -> Self {
        let dim = lo.len();
        let mut p = Self::new(dim);
        for j in 0..dim {
            let mut e = DVector::zeros(dim);
            e[j] = 1.0;
            p.push(Halfspace::new(e.clone(), -lo[j]));
            p.push(Halfspace::new(-e, hi[j]));
        }
        p
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn halfspaces(&self) -> &[Halfspace] {
        &self.halfspaces
    }

    pub fn push(&mut self, h: Halfspace) {
        debug_assert_eq!(h.normal.len(), self.dim);
        self.halfspaces.push(h);
    }

    pub fn with(mut self, extra: impl IntoIterator<Item = Halfspace>) -> Self {
        self.halfspaces.extend(extra);
        self
    }

    /// Smallest signed distance to a facet; `+∞` with no constraints.
    pub fn min_slack(&self, x: &DVector<f64>) -> f64 {
        self.halfspaces
            .iter()
            .map(|h| h.signed_distance(x))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        self.min_slack(x) >= -tol
    }

    /// Point maximizing the smallest facet distance `s` (capped at `cap`),
    /// subject to the extra equalities. Returns the point and the slack
    /// recomputed at it; `None` when the LP is infeasible.
    pub fn max_slack_point(&self, equalities: &[Halfspace], cap: f64) -> Option<(DVector<f64>, f64)> {
        let sol = solve(self.dim, &self.halfspaces, equalities, Objective::Slack(cap)).ok()?;
        let x = sol.0;
        let slack = self.min_slack(&x).min(cap);
        Some((x, slack))
    }

    /// A strictly interior point with slack at least `min_slack`, if any.
    pub fn interior_point(&self, equalities: &[Halfspace], min_slack: f64) -> Option<DVector<f64>> {
        let (x, s) = self.max_slack_point(equalities, 1.0)?;
        let eq_ok = equalities
            .iter()
            .all(|e| e.signed_distance(&x).abs() <= 1e-8 * (1.0 + x.amax()));
        (s >= min_slack && eq_ok).then_some(x)
    }

    /// A point of the closed polytope (constraints violated by at most `tol`).
    pub fn feasible_point(&self, equalities: &[Halfspace], tol: f64) -> Option<DVector<f64>> {
        let (x, s) = self.max_slack_point(equalities, 1.0)?;
        let eq_ok = equalities
            .iter()
            .all(|e| e.signed_distance(&x).abs() <= tol.max(1e-8) * (1.0 + x.amax()));
        (s >= -tol && eq_ok).then_some(x)
    }

    pub fn optimize(&self, equalities: &[Halfspace], objective: &DVector<f64>, maximize: bool) -> LpOutcome {
        match solve(self.dim, &self.halfspaces, equalities, Objective::Linear(objective, maximize)) {
            Ok((x, value)) => LpOutcome::Optimal { x, value },
            Err(minilp::Error::Infeasible) => LpOutcome::Infeasible,
            Err(minilp::Error::Unbounded) => LpOutcome::Unbounded,
        }
    }

    /// Parameter range `[t_min, t_max]` keeping `x + t·d` inside, with each
    /// constraint tightened by `margin`.
    pub fn chord(&self, x: &DVector<f64>, d: &DVector<f64>, margin: f64) -> (f64, f64) {
        let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
        for h in &self.halfspaces {
            let n = h.normal.norm();
            if n == 0.0 {
                continue;
            }
            let slack = h.eval(x) - margin * n;
            let rate = h.normal.dot(d);
            if rate > 1e-300 {
                lo = lo.max(-slack / rate);
            } else if rate < -1e-300 {
                hi = hi.min(slack / -rate);
            }
        }
        (lo, hi)
    }

    /// Vertices of a bounded polytope by brute force over `dim`-subsets of
    /// constraints. Fails when the subset count exceeds `max_subsets`.
    pub fn vertices(&self, tol: f64, max_subsets: usize) -> Result<Vec<DVector<f64>>> {
        let d = self.dim;
        let m = self.halfspaces.len();
        if binomial(m, d) > max_subsets as f64 {
            return Err(Error::EnumerationLimit { units: m, limit: max_subsets });
        }
        let rows: Vec<Halfspace> = self
            .halfspaces
            .iter()
            .map(|h| h.normalized().unwrap_or_else(|| h.clone()))
            .collect();
        let mut out: Vec<DVector<f64>> = Vec::new();
        let mut idx: Vec<usize> = (0..d).collect();
        if d > m {
            return Ok(out);
        }
        loop {
            let a = DMatrix::from_fn(d, d, |r, c| rows[idx[r]].normal[c]);
            let b = DVector::from_fn(d, |r, _| -rows[idx[r]].offset);
            if let Some(x) = a.lu().solve(&b) {
                let scale = 1.0 + x.amax();
                if x.iter().all(|v| v.is_finite())
                    && rows.iter().all(|h| h.eval(&x) >= -tol * scale)
                    && !out.iter().any(|v| (v - &x).amax() <= tol * scale)
                {
                    out.push(x);
                }
            }
            // next combination
            let mut i = d;
            loop {
                if i == 0 {
                    return Ok(out);
                }
                i -= 1;
                if idx[i] != i + m - d {
                    break;
                }
            }
            idx[i] += 1;
            for j in i + 1..d {
                idx[j] = idx[j - 1] + 1;
            }
        }
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

enum Objective<'a> {
    Slack(f64),
    Linear(&'a DVector<f64>, bool),
}

// Constraints are rescaled to unit normals so the slack variable measures
// Euclidean distance and the solver tolerance is uniform across rows.
fn solve(
    dim: usize,
    ineqs: &[Halfspace],
    eqs: &[Halfspace],
    objective: Objective<'_>,
) -> std::result::Result<(DVector<f64>, f64), minilp::Error> {
    let (direction, obj, slack_cap) = match objective {
        Objective::Slack(cap) => (OptimizationDirection::Maximize, None, Some(cap)),
        Objective::Linear(c, true) => (OptimizationDirection::Maximize, Some(c), None),
        Objective::Linear(c, false) => (OptimizationDirection::Minimize, Some(c), None),
    };
    let mut lp = Problem::new(direction);
    let vars: Vec<_> = (0..dim)
        .map(|j| lp.add_var(obj.map_or(0.0, |c| c[j]), (f64::NEG_INFINITY, f64::INFINITY)))
        .collect();
    let s = slack_cap.map(|cap| lp.add_var(1.0, (f64::NEG_INFINITY, cap)));
    for h in ineqs {
        match h.normalized() {
            Some(u) => {
                let mut terms: Vec<_> = vars
                    .iter()
                    .zip(u.normal.iter())
                    .filter(|(_, &a)| a != 0.0)
                    .map(|(&v, &a)| (v, a))
                    .collect();
                if let Some(s) = s {
                    terms.push((s, -1.0));
                }
                lp.add_constraint(terms.as_slice(), ComparisonOp::Ge, -u.offset);
            }
            None => {
                if h.offset < 0.0 {
                    return Err(minilp::Error::Infeasible);
                }
            }
        }
    }
    for h in eqs {
        match h.normalized() {
            Some(u) => {
                let terms: Vec<_> = vars
                    .iter()
                    .zip(u.normal.iter())
                    .filter(|(_, &a)| a != 0.0)
                    .map(|(&v, &a)| (v, a))
                    .collect();
                lp.add_constraint(terms.as_slice(), ComparisonOp::Eq, -u.offset);
            }
            None => {
                if h.offset != 0.0 {
                    return Err(minilp::Error::Infeasible);
                }
            }
        }
    }
    let sol = lp.solve()?;
    let x = DVector::from_fn(dim, |j, _| *sol.var_value(vars[j]));
    if !sol.objective().is_finite() || x.iter().any(|v| !v.is_finite()) {
        return Err(minilp::Error::Unbounded);
    }
    Ok((x, sol.objective()))
}

/// Orthonormal basis (as columns) of the directions orthogonal to every
/// given normal.
pub fn null_space_basis(dim: usize, normals: &[DVector<f64>]) -> DMatrix<f64> {
    if normals.is_empty() {
        return DMatrix::identity(dim, dim);
    }
    let a = DMatrix::from_fn(normals.len(), dim, |r, c| normals[r][c]);
    let svd = a.svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors");
    let smax = svd.singular_values.max();
    let rank = svd
        .singular_values
        .iter()
        .filter(|&&s| s > 1e-12 * smax.max(1e-300))
        .count();
    // full V is needed; pad with the orthogonal complement of the row space
    let full = if v_t.nrows() < dim {
        let mut m = DMatrix::zeros(dim, dim);
        m.view_mut((0, 0), (v_t.nrows(), dim)).copy_from(&v_t);
        complete_basis(m, v_t.nrows())
    } else {
        v_t
    };
    full.rows(rank, dim - rank).transpose()
}

fn complete_basis(mut m: DMatrix<f64>, filled: usize) -> DMatrix<f64> {
    let dim = m.ncols();
    let mut row = filled;
    for j in 0..dim {
        if row == dim {
            break;
        }
        let mut e = DVector::zeros(dim);
        e[j] = 1.0;
        for r in 0..row {
            let q = m.row(r).transpose();
            e -= &q * q.dot(&e);
        }
        let n = e.norm();
        if n > 1e-8 {
            m.set_row(row, &(e / n).transpose());
            row += 1;
        }
    }
    m
}

/// Hit-and-run sampler over the interior of a polytope intersected with an
/// affine subspace.
pub struct HitAndRun<'a> {
    poly: &'a Polytope,
    basis: DMatrix<f64>,
    current: DVector<f64>,
    margin: f64,
}

impl<'a> HitAndRun<'a> {
    /// Starts from the max-slack point. `None` if the set has no interior
    /// relative to the subspace.
    pub fn new(poly: &'a Polytope, equalities: &[Halfspace], margin: f64) -> Option<Self> {
        let start = poly.interior_point(equalities, margin.max(1e-9))?;
        let normals: Vec<_> = equalities.iter().map(|e| e.normal.clone()).collect();
        let basis = null_space_basis(poly.dim(), &normals);
        Some(Self { poly, basis, current: start, margin })
    }

    pub fn start_from(&mut self, x: DVector<f64>) {
        self.current = x;
    }

    pub fn current(&self) -> &DVector<f64> {
        &self.current
    }

    /// Dimension of the affine subspace being sampled.
    pub fn dims(&self) -> usize {
        self.basis.ncols()
    }

    pub fn step<R: Rng>(&mut self, rng: &mut R) -> DVector<f64> {
        if self.basis.ncols() == 0 {
            return self.current.clone();
        }
        let z = DVector::from_fn(self.basis.ncols(), |_, _| rng.sample::<f64, _>(StandardNormal));
        let d = &self.basis * z;
        let (lo, hi) = self.poly.chord(&self.current, &d, self.margin);
        if lo.is_finite() && hi.is_finite() && hi > lo {
            let t = rng.gen_range(lo..=hi);
            self.current = &self.current + d * t;
        }
        self.current.clone()
    }

    /// `n` samples after `burn_in` steps, keeping every `thin`-th point.
    pub fn sample<R: Rng>(&mut self, rng: &mut R, n: usize, burn_in: usize, thin: usize) -> Vec<DVector<f64>> {
        for _ in 0..burn_in {
            self.step(rng);
        }
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            for _ in 1..thin.max(1) {
                self.step(rng);
            }
            out.push(self.step(rng));
        }
        out
    }
}

/// Halton sequence with a Cranley–Patterson random shift.
#[derive(Clone, Debug)]
pub struct Halton {
    shift: Vec<f64>,
    index: u64,
}

const PRIMES: [u64; 32] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89,
    97, 101, 103, 107, 109, 113, 127, 131,
];

impl Halton {
    pub fn new<R: Rng>(dim: usize, rng: &mut R) -> Self {
        assert!(dim <= PRIMES.len(), "Halton sampler supports up to 32 dimensions");
        Self { shift: (0..dim).map(|_| rng.gen()).collect(), index: 0 }
    }

    /// Next point of the unit cube.
    pub fn next_unit(&mut self) -> Vec<f64> {
        self.index += 1;
        self.shift
            .iter()
            .zip(PRIMES)
            .map(|(s, p)| (radical_inverse(self.index, p) + s).fract())
            .collect()
    }

    /// Next point of the box `[lo, hi]`.
    pub fn next_in_box(&mut self, lo: &[f64], hi: &[f64]) -> DVector<f64> {
        let u = self.next_unit();
        DVector::from_fn(lo.len(), |j, _| lo[j] + u[j] * (hi[j] - lo[j]))
    }
}

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while i > 0 {
        r += (i % base) as f64 * f;
        i /= base;
        f *= inv;
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn box_interior_point() {
        let p = Polytope::from_box(&[0.0, 0.0], &[2.0, 4.0]);
        let (x, s) = p.max_slack_point(&[], 10.0).unwrap();
        assert!((s - 1.0).abs() < 1e-9);
        assert!((x[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn empty_and_thin_sets() {
        let mut p = Polytope::from_box(&[0.0], &[1.0]);
        p.push(Halfspace::new(dvector![1.0], -2.0));
        assert!(p.max_slack_point(&[], 1.0).is_none_or(|(_, s)| s < 0.0));
        let thin = Polytope::from_box(&[0.0, 0.0], &[1.0, 0.0]);
        assert!(thin.interior_point(&[], 1e-9).is_none());
        assert!(thin.feasible_point(&[], 1e-9).is_some());
    }

    #[test]
    fn equality_constrained_interior() {
        let p = Polytope::from_box(&[-1.0, -1.0], &[1.0, 1.0]);
        let eq = Halfspace::new(dvector![1.0, -1.0], 0.5);
        let x = p.interior_point(std::slice::from_ref(&eq), 1e-9).unwrap();
        assert!(eq.eval(&x).abs() < 1e-9);
        let far = Halfspace::new(dvector![1.0, 0.0], -3.0);
        assert!(p.interior_point(&[far], 1e-9).is_none());
    }

    #[test]
    fn optimize_linear() {
        let p = Polytope::from_box(&[-1.0, 2.0], &[3.0, 5.0]);
        match p.optimize(&[], &dvector![1.0, -1.0], true) {
            LpOutcome::Optimal { value, .. } => assert!((value - 1.0).abs() < 1e-9),
            other => panic!("{other:?}"),
        }
        let half = Polytope::from_halfspaces(1, vec![Halfspace::new(dvector![1.0], 0.0)]);
        let r = half.optimize(&[], &dvector![1.0], true);
        assert!(matches!(r, LpOutcome::Unbounded), "{r:?}");
    }

    #[test]
    fn square_vertices() {
        let p = Polytope::from_box(&[0.0, 0.0], &[1.0, 2.0]);
        let v = p.vertices(1e-9, 1000).unwrap();
        assert_eq!(v.len(), 4);
        let tri = Polytope::from_box(&[0.0, 0.0], &[1.0, 1.0])
            .with([Halfspace::new(dvector![-1.0, -1.0], 1.0)]);
        assert_eq!(tri.vertices(1e-9, 1000).unwrap().len(), 3);
    }

    #[test]
    fn hit_and_run_stays_inside_subspace() {
        let p = Polytope::from_box(&[-1.0, -1.0, -1.0], &[1.0, 1.0, 1.0]);
        let eq = Halfspace::new(dvector![1.0, 1.0, 1.0], -0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = HitAndRun::new(&p, std::slice::from_ref(&eq), 1e-9).unwrap();
        for x in s.sample(&mut rng, 200, 10, 2) {
            assert!(p.contains(&x, 0.0));
            assert!(eq.eval(&x).abs() < 1e-9);
        }
    }

    #[test]
    fn null_space_is_orthogonal() {
        let b = null_space_basis(3, &[dvector![1.0, 2.0, 0.0]]);
        assert_eq!(b.ncols(), 2);
        assert!((b.tr_mul(&b) - DMatrix::identity(2, 2)).amax() < 1e-12);
        assert!((b.tr_mul(&dvector![1.0, 2.0, 0.0])).amax() < 1e-12);
    }

    #[test]
    fn halton_covers_unit_square() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut h = Halton::new(2, &mut rng);
        let pts: Vec<_> = (0..1024).map(|_| h.next_unit()).collect();
        for q in 0..4 {
            let (a, b) = (q % 2, q / 2);
            let n = pts
                .iter()
                .filter(|p| (p[0] * 2.0) as usize == a && (p[1] * 2.0) as usize == b)
                .count();
            assert!((n as i64 - 256).abs() < 20, "{n}");
        }
    }
}
