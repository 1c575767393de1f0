//! Numeric checks of the identifiability conditions on a box `Ω`.
//!
//! For every hidden layer `k`:
//! - `P.a`: `M^k` has full row rank;
//! - `P.b`: every hyperplane `{M^k_i x + b^k_i = 0}` meets the interior of `Ω_{k+1}`;
//! - `P.c`: on every region `D` of `g_k` meeting `{y_i = 0} ∩ Ω_k`, column `i` of `V^k(D)` is nonzero;
//! - `P.d`: no hyperplane piece `H ∩ Ω̊_{k+1}` lies inside the boundaries of the preimages `h_k^{-1}(D)`.
//!
//! `P.d` is decided on a finite candidate set with sampled coverage tests.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Halfspace, HitAndRun, LpOutcome};
use crate::net::NetworkParams;
use crate::regions::{
    self, enumerate_regions, pushforward_domain, stack, stack_pattern, DomainSpec, EnumOptions, Pushforward,
    PushforwardOptions, Region,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Condition {
    #[serde(rename = "P.a")]
    A,
    #[serde(rename = "P.b")]
    B,
    #[serde(rename = "P.c")]
    C,
    #[serde(rename = "P.d")]
    D,
}

impl Condition {
    pub const ALL: [Condition; 4] = [Condition::A, Condition::B, Condition::C, Condition::D];

    pub fn label(self) -> &'static str {
        match self {
            Condition::A => "P.a",
            Condition::B => "P.b",
            Condition::C => "P.c",
            Condition::D => "P.d",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.label() == s)
            .ok_or_else(|| Error::Parse(format!("unknown condition `{s}`")))
    }
}

impl std::fmt::Display for Condition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Undetermined,
    Fail,
}

impl Verdict {
    /// Fail dominates undetermined, which dominates pass.
    pub fn combine(self, other: Verdict) -> Verdict {
        self.max(other)
    }

    pub fn exit_code(self) -> i32 {
        match self {
            Verdict::Pass => 0,
            Verdict::Fail => 1,
            Verdict::Undetermined => 2,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Tolerances {
    /// Relative singular-value threshold for full row rank.
    pub rank: f64,
    /// Smallest column norm counted as nonzero.
    pub column: f64,
    /// Distance below which a point is on a boundary.
    pub membership: f64,
    /// Slack required of strictly interior points.
    pub interior: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { rank: 1e-10, column: 1e-10, membership: 1e-8, interior: 1e-9 }
    }
}

#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub tol: Tolerances,
    pub seed: u64,
    /// Points sampled on each hyperplane candidate.
    pub coverage_samples: usize,
    pub enumeration: EnumOptions,
    pub pushforward: PushforwardOptions,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            tol: Tolerances::default(),
            seed: 0,
            coverage_samples: 512,
            enumeration: EnumOptions::default(),
            pushforward: PushforwardOptions::default(),
        }
    }
}

/// Evidence attached to a verdict.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Witness {
    Rank { singular_values: Vec<f64>, rows: usize, cols: usize },
    /// Interior points of `Ω_{k+1}` on each hyperplane, with their preimages.
    Crossings { points: Vec<Vec<f64>>, inputs: Vec<Vec<f64>> },
    /// Range of the pre-activation of `neuron` over `Ω_{k+1}`.
    ConstantSign { neuron: usize, min: f64, max: f64 },
    /// `point` lies in `{y_i = 0} ∩ D ∩ Ω_k` while column `coordinate` of
    /// `V^k(D)` vanishes; `input` maps to `point` under `f_k`.
    DeadColumn { pattern: Vec<u8>, coordinate: usize, column_norm: f64, point: Vec<f64>, input: Vec<f64> },
    /// A hyperplane of `R^{n_{k+1}}` whose sampled interior points all lie
    /// on preimage boundaries.
    CoveredHyperplane { normal: Vec<f64>, offset: f64, samples: usize, on_boundary: usize },
    /// Per-candidate coverage fractions.
    Candidates { tested: usize, max_fraction: f64 },
    None,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerCheck {
    pub condition: Condition,
    pub k: usize,
    pub verdict: Verdict,
    /// `exact`, `sampled`, or `algebraic`.
    pub mode: String,
    pub detail: String,
    pub witness: Witness,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConditionReport {
    pub seed: u64,
    pub tolerances: Tolerances,
    pub checks: Vec<LayerCheck>,
    pub verdict: Verdict,
}

impl ConditionReport {
    pub fn get(&self, condition: Condition, k: usize) -> Option<&LayerCheck> {
        self.checks.iter().find(|c| c.condition == condition && c.k == k)
    }

    /// `(condition, k)` of every failed check.
    pub fn failures(&self) -> Vec<(Condition, usize)> {
        self.checks
            .iter()
            .filter(|c| c.verdict == Verdict::Fail)
            .map(|c| (c.condition, c.k))
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One line per check.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&format!(
                "{} k={} {:?} [{}] {}\n",
                c.condition,
                c.k,
                c.verdict,
                c.mode,
                c.detail
            ));
        }
        out.push_str(&format!("overall: {:?}\n", self.verdict));
        out
    }
}

/// Singular values of `M^k` in decreasing order.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Full row rank test with a dimension-scaled relative threshold.
pub fn full_row_rank(m: &DMatrix<f64>, rank_tol: f64) -> bool {
    let (r, c) = m.shape();
    if r > c {
        return false;
    }
    let s = singular_values(m);
    let smax = s.first().copied().unwrap_or(0.0);
    let smin = s.get(r - 1).copied().unwrap_or(0.0);
    smax > 0.0 && smin >= rank_tol * smax * r.max(c) as f64
}

pub fn check_p_a(params: &NetworkParams, tol: &Tolerances) -> Vec<LayerCheck> {
    (1..params.depth())
        .map(|k| {
            let m = params.weight(k);
            let (r, c) = m.shape();
            let s = singular_values(m);
            let ok = full_row_rank(m, tol.rank);
            let detail = if r > c {
                format!("M^{k} is {r}x{c}, more rows than columns")
            } else {
                format!("sigma_min = {:.3e}", s.get(r - 1).copied().unwrap_or(0.0))
            };
            LayerCheck {
                condition: Condition::A,
                k,
                verdict: if ok { Verdict::Pass } else { Verdict::Fail },
                mode: "algebraic".into(),
                detail,
                witness: Witness::Rank { singular_values: s, rows: r, cols: c },
            }
        })
        .collect()
}

fn check_layer(params: &NetworkParams, k: usize) -> Result<()> {
    let depth = params.depth();
    if k == 0 || k >= depth {
        return Err(Error::LayerIndex { k, depth });
    }
    Ok(())
}

pub fn check_p_b(params: &NetworkParams, domain: &DomainSpec, k: usize, opts: &CheckOptions) -> Result<LayerCheck> {
    check_layer(params, k)?;
    let push = pushforward_domain(params, domain, k + 1, &opts.pushforward)?;
    p_b_with(params, domain, k, &push, opts)
}

fn p_b_with(params: &NetworkParams, domain: &DomainSpec, k: usize, push: &Pushforward, opts: &CheckOptions) -> Result<LayerCheck> {
    let m = params.weight(k);
    let b = params.bias(k);
    let mk = |verdict, mode: &str, detail: String, witness| LayerCheck {
        condition: Condition::B,
        k,
        verdict,
        mode: mode.into(),
        detail,
        witness,
    };
    match push {
        Pushforward::Exact { cells, .. } => {
            if cells.is_empty() {
                return Ok(mk(Verdict::Fail, "exact", "empty pushforward".into(), Witness::None));
            }
            let mut points = Vec::new();
            let mut inputs = Vec::new();
            for i in 0..m.nrows() {
                let row = m.row(i).transpose();
                let mut found = None;
                for cell in cells.iter().filter(|c| c.full_rank()) {
                    let eq = cell.map.pullback(&Halfspace::new(row.clone(), b[i]));
                    if let Some(x) = cell.source.interior_point(&[eq], opts.tol.interior) {
                        found = Some((cell.map.apply(&x), x));
                        break;
                    }
                }
                match found {
                    Some((y, x)) => {
                        points.push(y.iter().copied().collect());
                        inputs.push(x.iter().copied().collect());
                    }
                    None => {
                        let (lo, hi) = preactivation_range(push, &row, b[i]);
                        let constant = lo >= 0.0 || hi <= 0.0;
                        let verdict = if constant { Verdict::Fail } else { Verdict::Undetermined };
                        let detail = format!("neuron {i}: pre-activation over Omega_{} spans [{lo:.6e}, {hi:.6e}]", k + 1);
                        return Ok(mk(verdict, "exact", detail, Witness::ConstantSign { neuron: i, min: lo, max: hi }));
                    }
                }
            }
            Ok(mk(
                Verdict::Pass,
                "exact",
                format!("{} hyperplanes cross the interior", m.nrows()),
                Witness::Crossings { points, inputs },
            ))
        }
        Pushforward::Sampled { .. } => p_b_sampled(params, domain, k, opts),
    }
}

fn preactivation_range(push: &Pushforward, row: &DVector<f64>, bias: f64) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    if let Pushforward::Exact { cells, .. } = push {
        for cell in cells {
            let h = cell.map.pullback(&Halfspace::new(row.clone(), bias));
            if let LpOutcome::Optimal { value, .. } = cell.source.optimize(&[], &h.normal, false) {
                lo = lo.min(value + h.offset);
            }
            if let LpOutcome::Optimal { value, .. } = cell.source.optimize(&[], &h.normal, true) {
                hi = hi.max(value + h.offset);
            }
        }
    }
    (lo, hi)
}

// Bisection on segments between quasi-random points of Ω; a crossing counts
// when f_{k+1} has full-rank Jacobian there.
fn p_b_sampled(params: &NetworkParams, domain: &DomainSpec, k: usize, opts: &CheckOptions) -> Result<LayerCheck> {
    let m = params.weight(k);
    let b = params.bias(k);
    let pts = domain.halton_points(256, opts.seed);
    let layers = stack(params, params.depth(), k + 1);
    let mut points = Vec::new();
    let mut inputs = Vec::new();
    for i in 0..m.nrows() {
        let row = m.row(i).transpose();
        let pre = |x: &DVector<f64>| -> Result<f64> { Ok(row.dot(&params.eval_f_k(k + 1, x)?) + b[i]) };
        let mut hit = None;
        'search: for w in pts.windows(2) {
            let (mut a, mut c) = (w[0].clone(), w[1].clone());
            let (fa, fc) = (pre(&a)?, pre(&c)?);
            if fa * fc >= 0.0 {
                continue;
            }
            let sa = fa.signum();
            for _ in 0..80 {
                let mid = (&a + &c) * 0.5;
                if pre(&mid)?.signum() == sa {
                    a = mid;
                } else {
                    c = mid;
                }
            }
            let x = (&a + &c) * 0.5;
            let pattern = stack_pattern(&layers, &x);
            if let Some((_, _, map)) = regions::cell_for_pattern(&layers, x.len(), &pattern) {
                if crate::conditions::full_row_rank(&map.lin, opts.tol.rank) {
                    hit = Some((params.eval_f_k(k + 1, &x)?, x));
                    break 'search;
                }
            }
        }
        match hit {
            Some((y, x)) => {
                points.push(y.iter().copied().collect());
                inputs.push(x.iter().copied().collect());
            }
            None => {
                return Ok(LayerCheck {
                    condition: Condition::B,
                    k,
                    verdict: Verdict::Undetermined,
                    mode: "sampled".into(),
                    detail: format!("no interior crossing found for neuron {i}"),
                    witness: Witness::None,
                })
            }
        }
    }
    Ok(LayerCheck {
        condition: Condition::B,
        k,
        verdict: Verdict::Pass,
        mode: "sampled".into(),
        detail: "crossings found by bisection".into(),
        witness: Witness::Crossings { points, inputs },
    })
}

pub fn check_p_c(params: &NetworkParams, domain: &DomainSpec, k: usize, regions: &[Region], opts: &CheckOptions) -> Result<LayerCheck> {
    check_layer(params, k)?;
    let push = pushforward_domain(params, domain, k, &opts.pushforward)?;
    p_c_with(k, regions, &push, opts)
}

fn p_c_with(k: usize, regions: &[Region], push: &Pushforward, opts: &CheckOptions) -> Result<LayerCheck> {
    let mk = |verdict, mode: &str, detail: String, witness| LayerCheck {
        condition: Condition::C,
        k,
        verdict,
        mode: mode.into(),
        detail,
        witness,
    };
    let suspects: Vec<(&Region, usize, f64)> = regions
        .iter()
        .flat_map(|r| {
            (0..r.v.ncols())
                .map(move |i| (r, i, r.v.column(i).norm()))
                .filter(|(_, _, n)| *n < opts.tol.column)
        })
        .collect();
    if suspects.is_empty() {
        return Ok(mk(Verdict::Pass, "exact", "no vanishing column in any region".into(), Witness::None));
    }
    let cells = match push {
        Pushforward::Exact { cells, .. } => cells,
        Pushforward::Sampled { .. } => {
            return Ok(mk(
                Verdict::Undetermined,
                "sampled",
                format!("{} vanishing columns, intersection not decidable from samples", suspects.len()),
                Witness::None,
            ))
        }
    };
    for (region, i, norm) in &suspects {
        let dim = region.v.ncols();
        let mut e = DVector::zeros(dim);
        e[*i] = 1.0;
        let axis = Halfspace::new(e, 0.0);
        for cell in cells {
            let mut poly = cell.source.clone();
            for f in &region.halfspaces {
                poly.push(cell.map.pullback(&f.halfspace()));
            }
            let eq = cell.map.pullback(&axis);
            if let Some(x) = poly.feasible_point(&[eq], opts.tol.interior) {
                let y = cell.map.apply(&x);
                return Ok(mk(
                    Verdict::Fail,
                    "exact",
                    format!("region {:?} meets y_{i} = 0 inside Omega_{k} with zero column {i}", bits(region)),
                    Witness::DeadColumn {
                        pattern: bits(region),
                        coordinate: *i,
                        column_norm: *norm,
                        point: y.iter().copied().collect(),
                        input: x.iter().copied().collect(),
                    },
                ));
            }
        }
    }
    Ok(mk(
        Verdict::Pass,
        "exact",
        format!("{} vanishing columns, none on a coordinate hyperplane inside Omega_{k}", suspects.len()),
        Witness::None,
    ))
}

fn bits(r: &Region) -> Vec<u8> {
    r.flat_pattern().iter().map(|&b| b as u8).collect()
}

/// Candidate hyperplanes of `R^{n_{k+1}}` that can carry preimage
/// boundaries: region facets pulled back through every activation pattern of
/// `h_k`, plus the hyperplanes where `h_k` itself folds.
pub fn boundary_candidates(params: &NetworkParams, k: usize, regions: &[Region]) -> Vec<Halfspace> {
    let m = params.weight(k);
    let b = params.bias(k);
    let n = m.nrows();
    let mut raw: Vec<Halfspace> = Vec::new();
    if regions.len() > 1 {
        for i in 0..n {
            raw.push(Halfspace::new(m.row(i).transpose(), b[i]));
        }
    }
    let mut facets: Vec<Halfspace> = Vec::new();
    for r in regions {
        for f in &r.halfspaces {
            facets.push(f.halfspace());
        }
    }
    for code in 0..(1usize << n.min(20)) {
        let s: Vec<f64> = (0..n).map(|i| ((code >> i) & 1) as f64).collect();
        let sm = DMatrix::from_fn(n, m.ncols(), |i, j| s[i] * m[(i, j)]);
        let sb = DVector::from_fn(n, |i, _| s[i] * b[i]);
        for f in &facets {
            raw.push(Halfspace::new(sm.tr_mul(&f.normal), f.normal.dot(&sb) + f.offset));
        }
    }
    let mut out: Vec<Halfspace> = Vec::new();
    let mut keys: HashMap<Vec<i64>, ()> = HashMap::new();
    for h in raw {
        let Some(mut u) = h.normalized() else { continue };
        // canonical sign: first nonzero normal entry positive
        if let Some(first) = u.normal.iter().find(|v| v.abs() > 1e-12) {
            if *first < 0.0 {
                u = u.flipped();
            }
        }
        let key: Vec<i64> = u
            .normal
            .iter()
            .chain(std::iter::once(&u.offset))
            .map(|v| (v * 1e8).round() as i64)
            .collect();
        if keys.insert(key, ()).is_none() {
            out.push(u);
        }
    }
    out
}

/// Whether `y` lies on the boundary of some preimage `h_k^{-1}(D)`, probed
/// across the hyperplane with unit normal `n`.
fn on_preimage_boundary(params: &NetworkParams, k: usize, y: &DVector<f64>, n: &DVector<f64>) -> bool {
    let eps = 1e-7 * (1.0 + y.norm());
    let tail = stack(params, k, 1);
    let region_at = |z: DVector<f64>| {
        let h = params.layer(k).pre_activation(&z).map(|v| v.max(0.0));
        stack_pattern(&tail, &h)
    };
    region_at(y + n * eps) != region_at(y - n * eps)
}

pub fn check_p_d(params: &NetworkParams, domain: &DomainSpec, k: usize, regions: &[Region], opts: &CheckOptions) -> Result<LayerCheck> {
    check_layer(params, k)?;
    let push = pushforward_domain(params, domain, k + 1, &opts.pushforward)?;
    p_d_with(params, k, regions, &push, opts)
}

fn p_d_with(params: &NetworkParams, k: usize, regions: &[Region], push: &Pushforward, opts: &CheckOptions) -> Result<LayerCheck> {
    let mk = |verdict, mode: &str, detail: String, witness| LayerCheck {
        condition: Condition::D,
        k,
        verdict,
        mode: mode.into(),
        detail,
        witness,
    };
    if regions.len() <= 1 {
        return Ok(mk(Verdict::Pass, "exact", "g_k is affine, no preimage boundaries".into(), Witness::None));
    }
    let cells = match push {
        Pushforward::Exact { cells, .. } => cells,
        Pushforward::Sampled { .. } => {
            return Ok(mk(
                Verdict::Undetermined,
                "sampled",
                "interior of Omega_{k+1} unavailable without exact pushforward".into(),
                Witness::None,
            ))
        }
    };
    let full: Vec<_> = cells.iter().filter(|c| c.full_rank()).collect();
    let candidates = boundary_candidates(params, k, regions);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut tested = 0;
    let mut max_fraction: f64 = 0.0;
    let mut undetermined = None;
    for cand in &candidates {
        let meeting: Vec<_> = full
            .iter()
            .filter_map(|c| {
                let eq = c.map.pullback(cand);
                c.source.interior_point(std::slice::from_ref(&eq), opts.tol.interior).map(|_| (c, eq))
            })
            .collect();
        if meeting.is_empty() {
            continue;
        }
        tested += 1;
        let per_cell = opts.coverage_samples.div_ceil(meeting.len());
        let mut total = 0;
        let mut covered = 0;
        let mut cleared = false;
        for (cell, eq) in &meeting {
            let Some(mut sampler) = HitAndRun::new(&cell.source, std::slice::from_ref(eq), opts.tol.interior) else {
                continue;
            };
            for x in sampler.sample(&mut rng, per_cell, 20, 3) {
                let y = cell.map.apply(&x);
                total += 1;
                if on_preimage_boundary(params, k, &y, &cand.normal) {
                    covered += 1;
                } else {
                    cleared = true;
                }
            }
            if cleared {
                break;
            }
        }
        if total == 0 {
            undetermined = Some(cand.clone());
            continue;
        }
        max_fraction = max_fraction.max(covered as f64 / total as f64);
        if !cleared {
            return Ok(mk(
                Verdict::Fail,
                "sampled",
                format!("all {total} sampled points of a candidate hyperplane lie on preimage boundaries"),
                Witness::CoveredHyperplane {
                    normal: cand.normal.iter().copied().collect(),
                    offset: cand.offset,
                    samples: total,
                    on_boundary: covered,
                },
            ));
        }
    }
    if let Some(c) = undetermined {
        return Ok(mk(
            Verdict::Undetermined,
            "sampled",
            format!("could not sample candidate with normal {:?}", c.normal.as_slice()),
            Witness::None,
        ));
    }
    Ok(mk(
        Verdict::Pass,
        "sampled",
        format!("{} candidates met the interior, each with uncovered samples", tested),
        Witness::Candidates { tested, max_fraction },
    ))
}

/// Runs every condition at every hidden layer.
pub fn check_p(params: &NetworkParams, domain: &DomainSpec, opts: &CheckOptions) -> Result<ConditionReport> {
    let depth = params.depth();
    let mut checks = check_p_a(params, &opts.tol);
    let mut pushes = Vec::new();
    for k in 0..=depth {
        pushes.push(if k == 0 { None } else { Some(pushforward_domain(params, domain, k, &opts.pushforward)?) });
    }
    for k in 1..depth {
        let enum_opts = EnumOptions { seed: opts.seed, ..opts.enumeration.clone() };
        let regions = enumerate_regions(params, k, domain, &enum_opts)?;
        let next = pushes[k + 1].as_ref().expect("computed");
        let here = pushes[k].as_ref().expect("computed");
        checks.push(p_b_with(params, domain, k, next, opts)?);
        checks.push(p_c_with(k, &regions, here, opts)?);
        checks.push(p_d_with(params, k, &regions, next, opts)?);
    }
    checks.sort_by_key(|c| (c.k, c.condition));
    let verdict = checks.iter().fold(Verdict::Pass, |v, c| v.combine(c.verdict));
    Ok(ConditionReport { seed: opts.seed, tolerances: opts.tol.clone(), checks, verdict })
}
