//! Layer-by-layer parameter recovery from query access.
//!
//! Each level works in a chart: a polytope of input points on which every
//! layer recovered so far is active, and the affine map sending those points
//! to the coordinates of the next unknown layer. Fold hyperplanes of the
//! residual are located along random chords, kept when they fold everywhere
//! they cross the chart, oriented, and peeled.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conditions::{full_row_rank, Condition};
use crate::error::{Error, Result};
use crate::geometry::{Affine, Halfspace, HitAndRun, Polytope};
use crate::net::{Architecture, Layer, NetworkFile, NetworkParams};
use crate::oracle::Oracle;
use crate::regions::{BoundaryHyperplane, DomainSpec};

#[derive(Clone, Debug)]
pub struct RecoveryOptions {
    pub seed: u64,
    /// Maximum number of oracle queries.
    pub budget: u64,
    /// Relative size a derivative jump must reach to count as a fold.
    pub jump_tol: f64,
    /// Points probed on a candidate before it counts as a full hyperplane.
    pub full_test_points: usize,
    /// Chords scanned per expected neuron in the first round.
    pub segments_per_neuron: usize,
    /// Rounds of chord scanning; each doubles the number of chords.
    pub max_rounds: usize,
    /// Distance kept from chart facets, relative to the box radius.
    pub margin_rel: f64,
    /// Relative residual allowed for the final affine fit.
    pub fit_tol: f64,
    pub parallel: bool,
}

impl Default for RecoveryOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            budget: 1_000_000,
            jump_tol: 1e-6,
            full_test_points: 64,
            segments_per_neuron: 8,
            max_rounds: 6,
            margin_rel: 1e-4,
            fit_tol: 1e-6,
            parallel: true,
        }
    }
}

/// A measured kink of the function along a line.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FoldObservation {
    /// Kink location in input space.
    pub point: DVector<f64>,
    /// Kink location in chart coordinates.
    pub y: DVector<f64>,
    /// Unit probe direction in chart coordinates.
    pub direction: DVector<f64>,
    /// Directional derivative before and after the kink.
    pub left: DVector<f64>,
    pub right: DVector<f64>,
    /// `right − left`.
    pub jump: DVector<f64>,
    /// Estimated unit normal of the fold in chart coordinates.
    pub normal: Option<DVector<f64>>,
}

/// Group of fold observations sharing one hyperplane.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FoldCluster {
    pub hyperplane: BoundaryHyperplane,
    pub members: usize,
    pub full: bool,
    /// RMS distance of refined fold points from the fitted hyperplane.
    pub residual: f64,
}

#[derive(Clone, Debug)]
pub struct RecoveredLayer {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    /// Fit residual per row.
    pub residuals: Vec<f64>,
    /// Refined fold points per row, probed along the oriented normal.
    pub folds: Vec<Vec<FoldObservation>>,
}

impl RecoveredLayer {
    pub fn hyperplanes(&self) -> Vec<BoundaryHyperplane> {
        (0..self.weights.nrows())
            .map(|i| BoundaryHyperplane {
                normal: self.weights.row(i).transpose(),
                offset: self.bias[i],
                oriented: true,
            })
            .collect()
    }
}

/// Where one level of recovery probes the function.
#[derive(Clone, Debug)]
pub struct Chart {
    /// Admissible input points.
    pub polytope: Polytope,
    /// Input points to chart coordinates.
    pub map: Affine,
    /// Pseudo-inverse of `map.lin`.
    pub lift: DMatrix<f64>,
    /// Distance kept from the polytope facets, in input units.
    pub margin: f64,
    lift_norm: f64,
}

impl Chart {
    pub fn from_box(domain: &DomainSpec, margin_rel: f64) -> Self {
        let n = domain.dim();
        Self::new(domain.polytope(), Affine::identity(n), margin_rel * domain.radius())
    }

    pub fn new(polytope: Polytope, map: Affine, margin: f64) -> Self {
        let lift = map.lin.clone().pseudo_inverse(1e-14).unwrap_or_else(|_| DMatrix::zeros(map.in_dim(), map.out_dim()));
        let lift_norm = lift.singular_values().max().max(1e-300);
        Self { polytope, map, lift, margin, lift_norm }
    }

    pub fn dim(&self) -> usize {
        self.map.out_dim()
    }

    /// Largest step in chart coordinates that stays within the margin.
    fn max_step(&self) -> f64 {
        self.margin / (4.0 * self.lift_norm)
    }

    fn sampler(&self) -> Option<HitAndRun<'_>> {
        HitAndRun::new(&self.polytope, &[], self.margin)
    }

    fn lifted(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.lift * u
    }

    /// Restricts to points where `layer(map(x)) ≥ margin` and composes.
    pub fn peel(&self, weights: &DMatrix<f64>, bias: &DVector<f64>, margin: f64) -> Chart {
        let step = Affine::new(weights.clone(), bias.clone());
        let map = step.after(&self.map);
        let mut poly = self.polytope.clone();
        for i in 0..weights.nrows() {
            let h = Halfspace::new(map.lin.row(i).transpose(), map.offset[i] - margin);
            poly.push(h);
        }
        Chart::new(poly, map, self.margin)
    }
}

/// Queries the function of the layers below a chart, by lifting chart
/// coordinates to input points.
pub struct ResidualOracle<'a> {
    oracle: &'a dyn Oracle,
    chart: Chart,
}

impl<'a> ResidualOracle<'a> {
    pub fn new(oracle: &'a dyn Oracle, chart: Chart) -> Self {
        Self { oracle, chart }
    }

    pub fn chart(&self) -> &Chart {
        &self.chart
    }

    pub fn lift(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.chart.lift * (y - &self.chart.map.offset)
    }

    pub fn accepts(&self, y: &DVector<f64>) -> bool {
        let x = self.lift(y);
        (self.chart.map.apply(&x) - y).amax() <= 1e-9 * (1.0 + y.amax()) && self.chart.polytope.contains(&x, 0.0)
    }

    pub fn query(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        if y.len() != self.chart.dim() {
            return Err(Error::Shape(format!("expected {} coordinates, got {}", self.chart.dim(), y.len())));
        }
        if !self.accepts(y) {
            return Err(Error::QueryRejected("point outside the all-active region".into()));
        }
        self.oracle.query(&self.lift(y))
    }
}

struct Probe<'a> {
    oracle: &'a dyn Oracle,
    start: u64,
    budget: u64,
    local: AtomicU64,
}

impl<'a> Probe<'a> {
    fn new(oracle: &'a dyn Oracle, budget: u64) -> Self {
        Self { oracle, start: oracle.queries(), budget, local: AtomicU64::new(0) }
    }

    fn f(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let used = self.local.fetch_add(1, Ordering::SeqCst);
        if used >= self.budget {
            return Err(Error::BudgetExhausted(used));
        }
        self.oracle.query(x)
    }

    fn used(&self) -> u64 {
        self.oracle.queries().saturating_sub(self.start)
    }
}

fn derive_seed(base: u64, a: u64, b: u64, c: u64) -> u64 {
    let mut z = base ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F) ^ c.wrapping_mul(0x1656_67B1_9E37_79F9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn random_unit<R: Rng>(rng: &mut R, d: usize) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let n = v.norm();
        if n > 1e-6 {
            return v / n;
        }
    }
}

fn canonical(a: &DVector<f64>, c: f64) -> (DVector<f64>, f64) {
    match a.iter().find(|v| v.abs() > 1e-9) {
        Some(v) if *v < 0.0 => (-a, -c),
        _ => (a.clone(), c),
    }
}

fn same_hyperplane(a: &DVector<f64>, c: f64, b: &DVector<f64>, e: f64, dir_tol: f64, off_tol: f64) -> bool {
    let dot = a.dot(b);
    dot.abs() >= 1.0 - dir_tol && (c - dot.signum() * e).abs() <= off_tol * (1.0 + c.abs())
}

/// One-sided slopes of `t ↦ f(x + t·dir)` on either side of `t = 0`,
/// from the lines through `±h, ±2h`, and where those lines meet.
fn line_probe(probe: &Probe, x: &DVector<f64>, dir: &DVector<f64>, h: f64) -> Result<(DVector<f64>, DVector<f64>, f64)> {
    let at = |t: f64| probe.f(&(x + dir * t));
    let (m2, m1, p1, p2) = (at(-2.0 * h)?, at(-h)?, at(h)?, at(2.0 * h)?);
    let left = (&m1 - &m2) / h;
    let right = (&p2 - &p1) / h;
    let ds = &left - &right;
    let n2 = ds.norm_squared();
    let t = if n2 > 0.0 { ds.dot(&(&p1 - &m1 - &right * h - &left * h)) / n2 } else { 0.0 };
    Ok((left, right, t))
}

fn is_jump(left: &DVector<f64>, right: &DVector<f64>, tol: f64) -> bool {
    (right - left).norm() >= tol * (1.0 + left.norm() + right.norm())
}

/// Measures the derivative jump of the oracle at `x` along `u`.
///
/// Returns `None` when the one-sided slopes agree to `jump_tol` or the kink
/// lies farther than `h` from `x`.
pub fn probe_jump(oracle: &dyn Oracle, x: &DVector<f64>, u: &DVector<f64>, h: f64, jump_tol: f64) -> Result<Option<FoldObservation>> {
    let probe = Probe::new(oracle, u64::MAX);
    let dir = u / u.norm();
    let (left, right, t) = line_probe(&probe, x, &dir, h)?;
    if !is_jump(&left, &right, jump_tol) || t.abs() > h {
        return Ok(None);
    }
    let point = x + &dir * t;
    Ok(Some(FoldObservation {
        y: point.clone(),
        point,
        direction: dir,
        jump: &right - &left,
        left,
        right,
        normal: None,
    }))
}

/// Jacobian in chart coordinates at `x`, from matching forward and backward
/// differences. `None` when no step size gives a consistent estimate.
fn jacobian(probe: &Probe, chart: &Chart, x: &DVector<f64>, mut h: f64) -> Result<Option<DMatrix<f64>>> {
    let d = chart.dim();
    let f0 = probe.f(x)?;
    for _ in 0..4 {
        let mut jac = DMatrix::zeros(f0.len(), d);
        let mut ok = true;
        for j in 0..d {
            let w = chart.lift.column(j).into_owned() * h;
            let fp = probe.f(&(x + &w))?;
            let fm = probe.f(&(x - &w))?;
            let fwd = (&fp - &f0) / h;
            let bwd = (&f0 - &fm) / h;
            if (&fwd - &bwd).norm() > 1e-7 * (1.0 + fwd.norm()) {
                ok = false;
                break;
            }
            jac.set_column(j, &fwd);
        }
        if ok {
            return Ok(Some(jac));
        }
        h /= 8.0;
    }
    Ok(None)
}

struct Kink {
    t: f64,
    lo: f64,
    hi: f64,
    left: DVector<f64>,
    right: DVector<f64>,
}

/// Kinks of `t ↦ f(x0 + t·w)` on `[t0, t1]` by recursive line intersection.
fn scan_line(probe: &Probe, x0: &DVector<f64>, w: &DVector<f64>, t0: f64, t1: f64) -> Result<Vec<Kink>> {
    let at = |t: f64| probe.f(&(x0 + w * t));
    let span = t1 - t0;
    let h = 1e-6 * (1.0 + span);
    let fa = at(t0)?;
    let fb = at(t1)?;
    let sa = (at(t0 + h)? - &fa) / h;
    let sb = (&fb - at(t1 - h)?) / h;
    let scale = 1.0 + fa.amax().max(fb.amax());
    let mut kinks = Vec::new();
    let mut stack = vec![(t0, t1, fa, fb, sa, sb, 0usize)];
    while let Some((a, b, fa, fb, sa, sb, depth)) = stack.pop() {
        let len = b - a;
        let tol = 1e-9 * scale * (1.0 + len);
        let slope_tol = 1e-9 * (1.0 + sa.norm() + sb.norm());
        if (&sa - &sb).norm() <= slope_tol && (&fb - &fa - &sa * len).norm() <= tol {
            continue;
        }
        let ds = &sa - &sb;
        let n2 = ds.norm_squared();
        let hh = h.min(len / 8.0);
        if n2 > 0.0 {
            let rhs = &fb - &fa - &sb * len;
            let tau = ds.dot(&rhs) / n2;
            let resid = (&ds * tau - &rhs).norm();
            if resid <= tol && tau > hh && tau < len - hh {
                let fm = at(a + tau)?;
                if (&fm - (&fa + &sa * tau)).norm() <= tol {
                    let mut t = a + tau;
                    let rho = (1e-3 * len).min(tau / 4.0).min((len - tau) / 4.0);
                    let (l, r, shift) = line_probe(probe, &(x0 + w * t), w, rho)?;
                    if shift.abs() <= rho && is_jump(&l, &r, 1e-9) {
                        t += shift;
                    }
                    kinks.push(Kink { t, lo: a, hi: b, left: sa, right: sb });
                    continue;
                }
            }
        }
        if depth >= 48 || len < 1e-9 * (1.0 + span) {
            continue;
        }
        // off-center split so kinks at symmetric points are not hit exactly
        let m = a + len * 0.487_6;
        let (l2, l1, r1, r2) = (at(m - 2.0 * hh)?, at(m - hh)?, at(m + hh)?, at(m + 2.0 * hh)?);
        let lm = (&l1 - &l2) / hh;
        let rm = (&r2 - &r1) / hh;
        let dm = &lm - &rm;
        let n2 = dm.norm_squared();
        if n2 > 0.0 && (&lm - &rm).norm() > slope_tol {
            let rhs = &r1 - &l1 - &rm * hh - &lm * hh;
            let tau = dm.dot(&rhs) / n2;
            if tau.abs() <= hh {
                kinks.push(Kink { t: m + tau, lo: m - hh, hi: m + hh, left: lm.clone(), right: rm.clone() });
            }
        }
        stack.push((m + hh, b, r1, fb, rm, sb, depth + 1));
        stack.push((a, m - hh, fa, l1, sa, lm, depth + 1));
    }
    kinks.sort_by(|p, q| p.t.total_cmp(&q.t));
    Ok(kinks)
}

/// Scans one random chord of the chart and estimates a fold normal at each
/// kink from the Jacobians on both sides.
fn scan_segment(probe: &Probe, chart: &Chart, seed: u64, jump_tol: f64) -> Result<Vec<FoldObservation>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let Some(mut sampler) = chart.sampler() else { return Ok(Vec::new()) };
    for _ in 0..20 {
        sampler.step(&mut rng);
    }
    let x0 = sampler.current().clone();
    let u = random_unit(&mut rng, chart.dim());
    let w = chart.lifted(&u);
    let (t0, t1) = chart.polytope.chord(&x0, &w, chart.margin);
    scan_chord(probe, chart, &x0, &w, t0, t1, jump_tol)
}

/// Edges of the chart polytope, pulled towards its center so that every
/// point keeps the margin. A hyperplane meeting the interior crosses at
/// least one of them.
fn edge_chords(chart: &Chart) -> Vec<(DVector<f64>, DVector<f64>)> {
    let poly = &chart.polytope;
    let Some((center, slack)) = poly.max_slack_point(&[], f64::INFINITY) else { return Vec::new() };
    if slack <= 2.0 * chart.margin {
        return Vec::new();
    }
    let Ok(verts) = poly.vertices(1e-9, 200_000) else { return Vec::new() };
    let d = poly.dim();
    let active: Vec<Vec<usize>> = verts
        .iter()
        .map(|v| {
            let scale = 1.0 + v.amax();
            poly.halfspaces()
                .iter()
                .enumerate()
                .filter(|(_, h)| h.signed_distance(v).abs() <= 1e-9 * scale)
                .map(|(i, _)| i)
                .collect()
        })
        .collect();
    let tau = (2.0 * chart.margin / slack).min(0.5);
    let shrink = |v: &DVector<f64>| &center + (v - &center) * (1.0 - tau);
    let mut out = Vec::new();
    for i in 0..verts.len() {
        for j in i + 1..verts.len() {
            let common: Vec<&Halfspace> =
                active[i].iter().filter(|f| active[j].contains(f)).map(|f| &poly.halfspaces()[*f]).collect();
            if common.len() + 1 < d {
                continue;
            }
            if d > 1 {
                let normals = DMatrix::from_fn(common.len(), d, |r, c| common[r].normal[c] / common[r].normal.norm());
                let rank = normals.singular_values().iter().filter(|s| **s > 1e-9).count();
                if rank != d - 1 {
                    continue;
                }
            }
            let a = shrink(&verts[i]);
            let b = shrink(&verts[j]);
            out.push((a.clone(), b - a));
        }
    }
    out
}

fn scan_edge(probe: &Probe, chart: &Chart, start: &DVector<f64>, span: &DVector<f64>, jump_tol: f64) -> Result<Vec<FoldObservation>> {
    let len = (&chart.map.lin * span).norm();
    if len < 1e-9 {
        return Ok(Vec::new());
    }
    scan_chord(probe, chart, start, &(span / len), 0.0, len, jump_tol)
}

/// Kinks along `x0 + t·w`, `t ∈ [t0, t1]`, with fold normals estimated from
/// the Jacobians on both sides.
fn scan_chord(
    probe: &Probe,
    chart: &Chart,
    x0: &DVector<f64>,
    w: &DVector<f64>,
    t0: f64,
    t1: f64,
    jump_tol: f64,
) -> Result<Vec<FoldObservation>> {
    if !(t0.is_finite() && t1.is_finite()) || t1 - t0 < 1e-6 {
        return Ok(Vec::new());
    }
    let u = &chart.map.lin * w;
    let step_cap = chart.max_step().min(chart.margin / (4.0 * w.norm()));
    let mut out = Vec::new();
    for k in scan_line(probe, x0, w, t0, t1)? {
        if !is_jump(&k.left, &k.right, jump_tol) {
            continue;
        }
        let point = x0 + w * k.t;
        let jump = &k.right - &k.left;
        let delta = ((k.t - k.lo).min(k.hi - k.t) / 2.0).min(step_cap);
        let mut normal = None;
        if delta > 1e-9 {
            let jp = jacobian(probe, chart, &(&point + w * delta), delta / 4.0)?;
            let jm = jacobian(probe, chart, &(&point - w * delta), delta / 4.0)?;
            if let (Some(jp), Some(jm)) = (jp, jm) {
                let diff = jp - jm;
                if (&diff * &u - &jump).norm() <= 1e-6 * (1.0 + jump.norm()) {
                    let svd = diff.clone().svd(false, true);
                    let vt = svd.v_t.expect("requested");
                    let (mut imax, mut smax, mut s2) = (0, 0.0, 0.0);
                    for (i, s) in svd.singular_values.iter().enumerate() {
                        if *s > smax {
                            s2 = smax;
                            smax = *s;
                            imax = i;
                        } else if *s > s2 {
                            s2 = *s;
                        }
                    }
                    if smax > 0.0 && s2 <= 1e-6 * smax {
                        let a = vt.row(imax).transpose();
                        normal = Some(a.normalize());
                    }
                }
            }
        }
        out.push(FoldObservation {
            y: chart.map.apply(&point),
            point,
            direction: u.clone(),
            left: k.left,
            right: k.right,
            jump,
            normal,
        });
    }
    Ok(out)
}

fn scan_round(probe: &Probe, chart: &Chart, seeds: &[u64], opts: &RecoveryOptions) -> Result<Vec<FoldObservation>> {
    let run = |s: &u64| scan_segment(probe, chart, *s, opts.jump_tol);
    let parts: Vec<Result<Vec<FoldObservation>>> =
        if opts.parallel { seeds.par_iter().map(run).collect() } else { seeds.iter().map(run).collect() };
    let mut out = Vec::new();
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn scan_edges(probe: &Probe, chart: &Chart, opts: &RecoveryOptions) -> Result<(usize, Vec<FoldObservation>)> {
    let edges = edge_chords(chart);
    let run = |e: &(DVector<f64>, DVector<f64>)| scan_edge(probe, chart, &e.0, &e.1, opts.jump_tol);
    let parts: Vec<Result<Vec<FoldObservation>>> =
        if opts.parallel { edges.par_iter().map(run).collect() } else { edges.iter().map(run).collect() };
    let mut out = Vec::new();
    for p in parts {
        out.extend(p?);
    }
    Ok((edges.len(), out))
}

/// Kinks along random chords of the box.
pub fn locate_folds(oracle: &dyn Oracle, domain: &DomainSpec, segments: usize, opts: &RecoveryOptions) -> Result<Vec<FoldObservation>> {
    let chart = Chart::from_box(domain, opts.margin_rel);
    let probe = Probe::new(oracle, opts.budget);
    let seeds: Vec<u64> = (0..segments as u64).map(|i| derive_seed(opts.seed, 0, 0, i)).collect();
    scan_round(&probe, &chart, &seeds, opts)
}

/// Greedy clustering of observations by their `(normal, offset)` key.
fn cluster(obs: &[FoldObservation]) -> Vec<(DVector<f64>, f64, usize)> {
    let mut out: Vec<(DVector<f64>, f64, usize)> = Vec::new();
    for o in obs {
        let Some(n) = &o.normal else { continue };
        let (a, c) = canonical(n, -n.dot(&o.y));
        match out.iter_mut().find(|(b, e, _)| same_hyperplane(&a, c, b, *e, 1e-6, 1e-5)) {
            Some(entry) => entry.2 += 1,
            None => out.push((a, c, 1)),
        }
    }
    out.sort_by(|p, q| q.2.cmp(&p.2));
    out
}

/// Total least squares hyperplane through the rows of `pts`, aligned with `a`.
fn tls_fit(pts: &[DVector<f64>], a: &DVector<f64>) -> (DVector<f64>, f64, f64) {
    let n = pts.len();
    let d = a.len();
    let mean = pts.iter().fold(DVector::zeros(d), |s, p| s + p) / n as f64;
    let normal = if n > d {
        let centered = DMatrix::from_fn(n, d, |i, j| pts[i][j] - mean[j]);
        let svd = centered.svd(false, true);
        let vt = svd.v_t.expect("requested");
        let imin = svd.singular_values.imin();
        let v = vt.row(imin).transpose();
        if v.dot(a) < 0.0 {
            -v
        } else {
            v
        }
    } else {
        a.clone()
    };
    let c = -normal.dot(&mean);
    let rms = (pts.iter().map(|p| (normal.dot(p) + c).powi(2)).sum::<f64>() / n as f64).sqrt();
    (normal, c, rms)
}

struct FullFold {
    normal: DVector<f64>,
    offset: f64,
    residual: f64,
    folds: Vec<FoldObservation>,
}

/// Probes points spread over `{aᵀy + c = 0}` inside the chart; `Some` with
/// refined fold points if every one of them folds.
fn full_test(probe: &Probe, chart: &Chart, a: &DVector<f64>, c: f64, seed: u64, opts: &RecoveryOptions) -> Result<Option<FullFold>> {
    let eq = chart.map.pullback(&Halfspace::new(a.clone(), c));
    if eq.normal.norm() == 0.0 {
        return Ok(None);
    }
    let Some(mut sampler) = HitAndRun::new(&chart.polytope, std::slice::from_ref(&eq), chart.margin) else {
        return Ok(None);
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = if sampler.dims() == 0 { 1 } else { opts.full_test_points };
    let points = sampler.sample(&mut rng, n, 30, 3);
    let dir = chart.lifted(a);
    let mut folds = Vec::with_capacity(n);
    for x in points {
        let y = chart.map.apply(&x);
        let mut h = (1e-5 * (1.0 + y.norm())).min(chart.max_step() / 2.0);
        let mut found = None;
        for _ in 0..2 {
            let (left, right, t) = line_probe(probe, &x, &dir, h)?;
            log::trace!("probe x={:?} h={h:e} left={:?} right={:?} t={t:e}", x.as_slice(), left.as_slice(), right.as_slice());
            if is_jump(&left, &right, opts.jump_tol) && t.abs() <= h {
                found = Some((left, right, t));
                break;
            }
            h /= 10.0;
        }
        let Some((left, right, t)) = found else {
            log::debug!("candidate a={:?} c={c:.6}: no fold at probe point {} of {n}", a.as_slice(), folds.len());
            return Ok(None);
        };
        let point = &x + &dir * t;
        folds.push(FoldObservation {
            y: chart.map.apply(&point),
            point,
            direction: a.clone(),
            jump: &right - &left,
            left,
            right,
            normal: Some(a.clone()),
        });
    }
    let ys: Vec<_> = folds.iter().map(|f| f.y.clone()).collect();
    let (mut normal, mut offset, mut residual) = tls_fit(&ys, a);
    let dist: Vec<f64> = ys.iter().map(|y| (normal.dot(y) + offset).abs()).collect();
    let mut sorted = dist.clone();
    sorted.sort_by(f64::total_cmp);
    let cut = (20.0 * sorted[sorted.len() / 2]).max(1e-12);
    let kept: Vec<_> = ys.iter().zip(&dist).filter(|(_, d)| **d <= cut).map(|(y, _)| y.clone()).collect();
    if kept.len() < ys.len() && kept.len() > a.len() {
        (normal, offset, residual) = tls_fit(&kept, a);
    }
    Ok(Some(FullFold { normal, offset, residual, folds }))
}

/// Clusters observations and keeps the hyperplanes that fold across the
/// whole chart.
pub fn fit_fold_hyperplanes(
    oracle: &dyn Oracle,
    domain: &DomainSpec,
    observations: &[FoldObservation],
    opts: &RecoveryOptions,
) -> Result<Vec<FoldCluster>> {
    let chart = Chart::from_box(domain, opts.margin_rel);
    let probe = Probe::new(oracle, opts.budget);
    let mut out = Vec::new();
    for (i, (a, c, members)) in cluster(observations).into_iter().enumerate() {
        let full = full_test(&probe, &chart, &a, c, derive_seed(opts.seed, 1, 0, i as u64), opts)?;
        let (normal, offset, residual, is_full) = match full {
            Some(f) => (f.normal, f.offset, f.residual, true),
            None => (a, c, f64::NAN, false),
        };
        out.push(FoldCluster {
            hyperplane: BoundaryHyperplane { normal, offset, oriented: false },
            members,
            full: is_full,
            residual,
        });
    }
    Ok(out)
}

/// Counters for one recovered layer.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct LayerStats {
    pub k: usize,
    pub segments: usize,
    pub kinks: usize,
    pub clusters: usize,
    pub full: usize,
    pub partial: usize,
    pub queries: u64,
    pub max_residual: f64,
}

/// Sign per hyperplane so that the fold appears on entering the positive
/// side. Decides from the coefficients of the Jacobians on both sides in the
/// basis of the hyperplane normals.
fn orient(probe: &Probe, chart: &Chart, full: &[FullFold]) -> Result<Vec<f64>> {
    let a = DMatrix::from_fn(full.len(), chart.dim(), |i, j| full[i].normal[j]);
    let gram = (&a * a.transpose()).try_inverse().ok_or(Error::RankDeficient { layer: 0 })?;
    let proj = a.transpose() * gram;
    let mut signs = Vec::with_capacity(full.len());
    for (i, f) in full.iter().enumerate() {
        let dir = chart.lifted(&f.normal);
        let mut votes: Vec<f64> = Vec::new();
        for fold in f.folds.iter().take(12) {
            if votes.len() >= 3 {
                break;
            }
            let delta = (1e-4 * (1.0 + fold.y.norm())).min(chart.max_step());
            let jp = jacobian(probe, chart, &(&fold.point + &dir * delta), delta / 4.0)?;
            let jm = jacobian(probe, chart, &(&fold.point - &dir * delta), delta / 4.0)?;
            let (Some(jp), Some(jm)) = (jp, jm) else { continue };
            let np = (&jp * &proj).column(i).norm();
            let nm = (&jm * &proj).column(i).norm();
            let big = np.max(nm);
            if big > 0.0 && np.min(nm) <= 1e-6 * big {
                votes.push(if np > nm { 1.0 } else { -1.0 });
            }
        }
        if votes.is_empty() || votes.iter().any(|v| *v != votes[0]) {
            return Err(Error::OrientationUnresolved(i));
        }
        signs.push(votes[0]);
    }
    Ok(signs)
}

/// Recovers the layer whose neurons fold the chart's residual function.
fn recover_level(
    probe: &Probe,
    chart: &Chart,
    width: usize,
    k: usize,
    level: u64,
    opts: &RecoveryOptions,
    stats: &mut LayerStats,
) -> Result<RecoveredLayer> {
    let before = probe.used();
    stats.k = k;
    let mut obs: Vec<FoldObservation> = Vec::new();
    let mut confirmed: Vec<FullFold> = Vec::new();
    let mut rejected: Vec<(DVector<f64>, f64)> = Vec::new();
    let mut segments = opts.segments_per_neuron * width.max(1);
    let mut next_seed = 0u64;
    let (edges, edge_obs) = scan_edges(probe, chart, opts)?;
    stats.segments += edges;
    obs.extend(edge_obs);
    for round in 0..opts.max_rounds {
        let seeds: Vec<u64> = (0..segments).map(|_| {
            next_seed += 1;
            derive_seed(opts.seed, level, 0, next_seed)
        }).collect();
        stats.segments += seeds.len();
        obs.extend(scan_round(probe, chart, &seeds, opts)?);
        let clusters = cluster(&obs);
        stats.clusters = clusters.len();
        for (j, (a, c, _)) in clusters.into_iter().enumerate() {
            let known = confirmed.iter().any(|f| same_hyperplane(&a, c, &f.normal, f.offset, 1e-6, 1e-5))
                || rejected.iter().any(|(b, e)| same_hyperplane(&a, c, b, *e, 1e-6, 1e-5));
            if known {
                continue;
            }
            let seed = derive_seed(opts.seed, level, 1 + round as u64, j as u64);
            match full_test(probe, chart, &a, c, seed, opts)? {
                Some(f) => {
                    let dup = confirmed.iter().any(|g| same_hyperplane(&f.normal, f.offset, &g.normal, g.offset, 1e-8, 1e-7));
                    if !dup {
                        confirmed.push(f);
                    }
                }
                None => rejected.push((a, c)),
            }
            log::debug!("layer {k} round {round}: {} confirmed, {} rejected", confirmed.len(), rejected.len());
        }
        if confirmed.len() >= width {
            break;
        }
        segments *= 2;
    }
    stats.kinks = obs.len();
    stats.full = confirmed.len();
    stats.partial = rejected.len();
    if confirmed.len() != width {
        stats.queries = probe.used() - before;
        return Err(Error::IdentifiabilityEvidenceMissing { layer: k, found: confirmed.len(), expected: width });
    }
    stats.queries = probe.used() - before;
    let signs = orient(probe, chart, &confirmed).map_err(|e| match e {
        Error::RankDeficient { .. } => Error::RankDeficient { layer: k },
        other => other,
    })?;
    let d = chart.dim();
    let weights = DMatrix::from_fn(width, d, |i, j| signs[i] * confirmed[i].normal[j]);
    let bias = DVector::from_fn(width, |i, _| signs[i] * confirmed[i].offset);
    if !full_row_rank(&weights, 1e-10) {
        return Err(Error::RankDeficient { layer: k });
    }
    let residuals: Vec<f64> = confirmed.iter().map(|f| f.residual).collect();
    stats.max_residual = residuals.iter().copied().fold(0.0, f64::max);
    let folds = confirmed
        .into_iter()
        .zip(&signs)
        .map(|(f, s)| {
            f.folds
                .into_iter()
                .map(|mut o| {
                    if *s < 0.0 {
                        let (l, r) = (o.left.clone(), o.right.clone());
                        o.left = -r;
                        o.right = -l;
                        o.direction = -o.direction;
                        o.normal = o.normal.map(|n| -n);
                    }
                    o
                })
                .collect()
        })
        .collect();
    stats.queries = probe.used() - before;
    Ok(RecoveredLayer { weights, bias, residuals, folds })
}

/// Recovers the input layer of `arch` up to permutation and positive scaling.
pub fn recover_first_layer(oracle: &dyn Oracle, arch: &Architecture, domain: &DomainSpec, opts: &RecoveryOptions) -> Result<RecoveredLayer> {
    let chart = Chart::from_box(domain, opts.margin_rel);
    let probe = Probe::new(oracle, opts.budget);
    let k = arch.depth() - 1;
    recover_level(&probe, &chart, arch.width(k), k, 0, opts, &mut LayerStats::default())
}

/// The chart and residual oracle of the layers below `layer`.
pub fn peel_layer<'a>(oracle: &'a dyn Oracle, chart: &Chart, layer: &RecoveredLayer, margin: f64) -> (ResidualOracle<'a>, Chart) {
    let next = chart.peel(&layer.weights, &layer.bias, margin);
    (ResidualOracle::new(oracle, next.clone()), next)
}

/// Least squares affine map `y ≈ A x + b`, with the maximum absolute residual.
pub fn fit_affine(inputs: &[DVector<f64>], outputs: &[DVector<f64>]) -> Result<(DMatrix<f64>, DVector<f64>, f64)> {
    let (Some(x0), Some(y0)) = (inputs.first(), outputs.first()) else {
        return Err(Error::Shape("no samples to fit".into()));
    };
    let (n, p, q) = (inputs.len(), x0.len(), y0.len());
    if outputs.len() != n {
        return Err(Error::Shape("input and output counts differ".into()));
    }
    let design = DMatrix::from_fn(n, p + 1, |i, j| if j < p { inputs[i][j] } else { 1.0 });
    let target = DMatrix::from_fn(n, q, |i, j| outputs[i][j]);
    let svd = design.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let rank = svd.singular_values.iter().filter(|s| **s > 1e-10 * smax * (n.max(p + 1) as f64)).count();
    if rank < p + 1 {
        return Err(Error::RankDeficient { layer: 0 });
    }
    let coef = svd.solve(&target, 1e-12 * smax).map_err(|e| Error::Shape(e.to_string()))?;
    let resid = (&design * &coef - &target).amax();
    let a = coef.rows(0, p).transpose();
    let b = coef.row(p).transpose();
    Ok((a, b, resid))
}

/// Fits the output layer on features `σ(M̂ map(x) + b̂)` of chart points.
fn recover_last_affine(probe: &Probe, chart: &Chart, last: &RecoveredLayer, opts: &RecoveryOptions) -> Result<(DMatrix<f64>, DVector<f64>, f64)> {
    let width = last.weights.nrows();
    let n = 8 * (width + 1) + 32;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, 99, 0, 0));
    let mut sampler = chart.sampler().ok_or_else(|| Error::Domain("chart has no interior".into()))?;
    let mut xs = sampler.sample(&mut rng, n, 30, 3);
    // points just inside the active side of every fold keep each feature alive
    for (i, folds) in last.folds.iter().enumerate() {
        let a = last.weights.row(i).transpose();
        let dir = chart.lifted(&a);
        let step = chart.max_step();
        for f in folds.iter().take(width + 2) {
            for s in [step, -step] {
                xs.push(&f.point + &dir * s);
            }
        }
    }
    let mut feats = Vec::with_capacity(n);
    let mut outs = Vec::with_capacity(n);
    for x in &xs {
        let y = chart.map.apply(x);
        feats.push((&last.weights * y + &last.bias).map(|v| v.max(0.0)));
        outs.push(probe.f(x)?);
    }
    let (a, b, resid) = fit_affine(&feats, &outs)?;
    let scale = 1.0 + outs.iter().map(|o| o.amax()).fold(0.0, f64::max);
    if resid > opts.fit_tol * scale {
        return Err(Error::NotAffine(resid));
    }
    Ok((a, b, resid))
}

/// Serializable summary of a recovery run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub network: Option<NetworkFile>,
    pub queries: u64,
    pub layers: Vec<LayerStats>,
    pub final_residual: Option<f64>,
    pub error: Option<String>,
    /// Layer at which recovery stopped.
    pub failed_layer: Option<usize>,
    /// Conditions whose failure would explain the stop.
    pub suspects: Vec<(Condition, usize)>,
    pub equivalent: Option<bool>,
}

impl RecoveryReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Clone, Debug)]
pub struct Recovery {
    pub params: NetworkParams,
    pub layers: Vec<RecoveredLayer>,
    pub report: RecoveryReport,
}

/// Failure of a recovery run together with what was learned before it.
#[derive(Debug)]
pub struct RecoveryFailure {
    pub error: Error,
    pub report: RecoveryReport,
}

impl std::fmt::Display for RecoveryFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.error)?;
        if !self.report.suspects.is_empty() {
            let s: Vec<String> = self.report.suspects.iter().map(|(c, k)| format!("{c}@k={k}")).collect();
            write!(f, " (suspected: {})", s.join(", "))?;
        }
        Ok(())
    }
}

/// Conditions whose failure could stop recovery at layer `k` with `err`.
pub fn suspects(err: &Error, k: usize, depth: usize) -> Vec<(Condition, usize)> {
    let upstream = |v: &mut Vec<(Condition, usize)>| {
        if k + 1 < depth {
            v.push((Condition::C, k + 1));
            v.push((Condition::D, k + 1));
        }
    };
    let mut v = Vec::new();
    match err {
        Error::IdentifiabilityEvidenceMissing { found, expected, .. } if found < expected => {
            v.push((Condition::B, k));
            v.push((Condition::C, k));
            upstream(&mut v);
        }
        Error::IdentifiabilityEvidenceMissing { .. } => {
            v.push((Condition::D, k));
            upstream(&mut v);
        }
        Error::RankDeficient { .. } => v.push((Condition::A, k)),
        Error::OrientationUnresolved(_) => v.push((Condition::C, k)),
        Error::NotAffine(_) => upstream(&mut v),
        _ => {}
    }
    v
}

/// Recovers every layer of a network with architecture `arch` from queries
/// on `domain`.
pub fn recover_network(
    oracle: &dyn Oracle,
    arch: &Architecture,
    domain: &DomainSpec,
    opts: &RecoveryOptions,
) -> std::result::Result<Recovery, RecoveryFailure> {
    let probe = Probe::new(oracle, opts.budget);
    let depth = arch.depth();
    let mut report = RecoveryReport {
        network: None,
        queries: 0,
        layers: Vec::new(),
        final_residual: None,
        error: None,
        failed_layer: None,
        suspects: Vec::new(),
        equivalent: None,
    };
    let fail = |error: Error, k: usize, mut report: RecoveryReport, probe: &Probe| {
        report.queries = probe.used();
        report.error = Some(error.to_string());
        report.failed_layer = Some(k);
        report.suspects = suspects(&error, k, depth);
        RecoveryFailure { error, report }
    };
    if arch.input_dim() != oracle.input_dim() || arch.output_dim() != oracle.output_dim() {
        let e = Error::ArchitectureMismatch(format!(
            "oracle maps R^{} to R^{}, architecture is {arch}",
            oracle.input_dim(),
            oracle.output_dim()
        ));
        return Err(fail(e, depth, report, &probe));
    }
    let mut chart = Chart::from_box(domain, opts.margin_rel);
    let mut layers: Vec<RecoveredLayer> = Vec::new();
    for k in (1..depth).rev() {
        let level = (depth - 1 - k) as u64;
        let mut stats = LayerStats::default();
        let outcome = recover_level(&probe, &chart, arch.width(k), k, level, opts, &mut stats);
        report.layers.push(stats);
        match outcome {
            Ok(layer) => {
                if k > 1 {
                    let margin = opts.margin_rel * (1.0 + domain.radius());
                    let next = chart.peel(&layer.weights, &layer.bias, margin);
                    if next.polytope.interior_point(&[], next.margin).is_none() {
                        let e = Error::Domain(format!("no input activates every neuron of layer {k}"));
                        return Err(fail(e, k, report, &probe));
                    }
                    layers.push(layer);
                    chart = next;
                } else {
                    layers.push(layer);
                }
            }
            Err(e) => return Err(fail(e, k, report, &probe)),
        }
    }
    let last = layers.last().expect("depth is at least two");
    let (a, b, resid) = match recover_last_affine(&probe, &chart, last, opts) {
        Ok(v) => v,
        Err(e) => return Err(fail(e, 0, report, &probe)),
    };
    let mut net_layers: Vec<Layer> = layers.iter().map(|l| Layer::new(l.weights.clone(), l.bias.clone())).collect();
    net_layers.push(Layer::new(a, b));
    let params = match NetworkParams::new(arch.clone(), net_layers) {
        Ok(p) => p,
        Err(e) => return Err(fail(e, 0, report, &probe)),
    };
    report.final_residual = Some(resid);
    report.network = Some(NetworkFile::from(&params));
    report.queries = probe.used();
    Ok(Recovery { params, layers, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equivalence::check_equivalent;
    use crate::oracle::catalog;
    use crate::oracle::QueryOracle;
    use nalgebra::{dmatrix, dvector};

    fn relu_oracle() -> QueryOracle {
        QueryOracle::from_fn(1, 1, DomainSpec::symmetric(1, 10.0), |x| Ok(dvector![x[0].max(0.0)]))
    }

    #[test]
    fn jump_of_a_single_relu() {
        let o = relu_oracle();
        let f = probe_jump(&o, &dvector![0.0], &dvector![1.0], 1e-5, 1e-6).unwrap().unwrap();
        assert!((f.jump[0] - 1.0).abs() < 1e-9);
        assert!(f.point[0].abs() < 1e-12);
        assert!(probe_jump(&o, &dvector![3.0], &dvector![1.0], 1e-5, 1e-6).unwrap().is_none());
        let back = probe_jump(&o, &dvector![0.0], &dvector![-1.0], 1e-5, 1e-6).unwrap().unwrap();
        assert!((back.jump[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn kink_found_along_a_line() {
        let o = relu_oracle();
        let obs = locate_folds(&o, &DomainSpec::symmetric(1, 10.0), 4, &RecoveryOptions::default()).unwrap();
        assert!(!obs.is_empty());
        for f in &obs {
            assert!(f.point[0].abs() < 1e-10, "{f:?}");
            assert!((f.normal.as_ref().unwrap()[0].abs() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn affine_fit_of_identity() {
        let xs: Vec<_> = (0..10).map(|i| dvector![i as f64, (i * i) as f64 * 0.1]).collect();
        let (a, b, r) = fit_affine(&xs, &xs).unwrap();
        assert!((a - DMatrix::identity(2, 2)).amax() < 1e-10);
        assert!(b.amax() < 1e-10);
        assert!(r < 1e-10);
    }

    #[test]
    fn comparative_network_recovered() {
        let teacher = catalog::comparative();
        let domain = DomainSpec::symmetric(2, 10.0);
        let o = QueryOracle::from_params(teacher.clone(), domain.clone());
        let rec = recover_network(&o, teacher.arch(), &domain, &RecoveryOptions::default()).unwrap();
        assert!(check_equivalent(&rec.params, &teacher, 1e-6).unwrap().is_some());
        assert_eq!(rec.report.queries, o.queries());
        let first = &rec.layers[0];
        let mut rows: Vec<(f64, f64)> = (0..2).map(|i| (first.weights[(i, 0)], first.weights[(i, 1)])).collect();
        rows.sort_by(|p, q| q.0.total_cmp(&p.0));
        assert!((rows[0].0 - 1.0).abs() < 1e-8 && rows[0].1.abs() < 1e-8);
        assert!(rows[1].0.abs() < 1e-8 && (rows[1].1 - 1.0).abs() < 1e-8);
    }

    #[test]
    fn residual_matches_lower_network() {
        let teacher = catalog::comparative();
        let domain = DomainSpec::symmetric(2, 10.0);
        let o = QueryOracle::from_params(teacher.clone(), domain.clone());
        let layer = RecoveredLayer {
            weights: DMatrix::identity(2, 2),
            bias: DVector::zeros(2),
            residuals: vec![0.0; 2],
            folds: vec![Vec::new(), Vec::new()],
        };
        let chart = Chart::from_box(&domain, 1e-3);
        let (res, _) = peel_layer(&o, &chart, &layer, 0.01);
        for y in [dvector![1.0, 2.0], dvector![5.0, 0.5], dvector![9.0, 9.0]] {
            assert_eq!(res.query(&y).unwrap(), teacher.eval_g_k(2, &y).unwrap());
        }
        assert!(matches!(res.query(&dvector![-1.0, 2.0]), Err(Error::QueryRejected(_))));
    }

    #[test]
    fn example2_on_restricted_box_fails() {
        let s = catalog::scenario(catalog::ScenarioId::Ex2Pair);
        let o = QueryOracle::from_params(s.params[0].clone(), s.domain.clone());
        let err = recover_network(&o, s.params[0].arch(), &s.domain, &RecoveryOptions::default()).unwrap_err();
        assert!(matches!(err.error, Error::IdentifiabilityEvidenceMissing { found: 0, expected: 1, .. }));
        assert_eq!(err.report.failed_layer, Some(1));
    }

    #[test]
    fn example4_reports_extra_hyperplane() {
        let p = catalog::example4();
        let domain = DomainSpec::symmetric(1, 10.0);
        let o = QueryOracle::from_params(p.clone(), domain.clone());
        let err = recover_network(&o, p.arch(), &domain, &RecoveryOptions::default()).unwrap_err();
        assert!(matches!(err.error, Error::IdentifiabilityEvidenceMissing { layer: 2, found: 2, expected: 1 }));
        assert!(err.report.suspects.contains(&(Condition::D, 2)));
    }

    #[test]
    fn budget_is_enforced() {
        let teacher = catalog::comparative();
        let domain = DomainSpec::symmetric(2, 10.0);
        let o = QueryOracle::from_params(teacher.clone(), domain.clone());
        let opts = RecoveryOptions { budget: 50, ..Default::default() };
        let err = recover_network(&o, teacher.arch(), &domain, &opts).unwrap_err();
        assert!(matches!(err.error, Error::BudgetExhausted(_)));
        assert!(o.queries() <= 50);
    }

    #[test]
    fn shallow_network_recovered() {
        let p = NetworkParams::from_layers(vec![
            (dmatrix![0.6, 0.8; -1.0, 0.5], dvector![0.5, 1.0]),
            (dmatrix![1.0, -2.0], dvector![0.3]),
        ])
        .unwrap();
        let domain = DomainSpec::symmetric(2, 10.0);
        let o = QueryOracle::from_params(p.clone(), domain.clone());
        let rec = recover_network(&o, p.arch(), &domain, &RecoveryOptions::default()).unwrap();
        assert!(check_equivalent(&rec.params, &p, 1e-6).unwrap().is_some());
    }
}
