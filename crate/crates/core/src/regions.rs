//! Linear regions of the tail maps `g_k`, first-layer hyperplanes, and the
//! pushforward domains `Ω_k = f_k(Ω)`.

use std::collections::HashSet;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Affine, Halfspace, Halton, LpOutcome, Polytope};
use crate::net::{Layer, NetworkParams};

/// Slack a cell's interior point must have to count as full-dimensional.
pub const INTERIOR_SLACK: f64 = 1e-9;

/// Radius of the box standing in for the whole input space.
pub const BIG_BOX_RADIUS: f64 = 1e6;

/// An axis-aligned query box `Ω = [lo, hi]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl DomainSpec {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::Domain("lo and hi must have the same nonzero length".into()));
        }
        if lo.iter().zip(&hi).any(|(a, b)| !(a < b) || !a.is_finite() || !b.is_finite()) {
            return Err(Error::Domain(format!("need lo < hi componentwise, got {lo:?} / {hi:?}")));
        }
        Ok(Self { lo, hi })
    }

    /// `[-r, r]^dim`.
    pub fn symmetric(dim: usize, r: f64) -> Self {
        Self::new(vec![-r; dim], vec![r; dim]).expect("valid box")
    }

    /// The stand-in for `R^dim`.
    pub fn big_box(dim: usize) -> Self {
        Self::symmetric(dim, BIG_BOX_RADIUS)
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn polytope(&self) -> Polytope {
        Polytope::from_box(&self.lo, &self.hi)
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        x.len() == self.dim() && x.iter().enumerate().all(|(j, v)| *v >= self.lo[j] && *v <= self.hi[j])
    }

    pub fn center(&self) -> DVector<f64> {
        DVector::from_fn(self.dim(), |j, _| 0.5 * (self.lo[j] + self.hi[j]))
    }

    /// Largest half-width.
    pub fn radius(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(a, b)| 0.5 * (b - a)).fold(0.0, f64::max)
    }

    /// Quasi-random points of the box.
    pub fn halton_points(&self, n: usize, seed: u64) -> Vec<DVector<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut h = Halton::new(self.dim(), &mut rng);
        (0..n).map(|_| h.next_in_box(&self.lo, &self.hi)).collect()
    }
}

/// Side of a region constraint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sense {
    #[serde(rename = "≥")]
    Ge,
    #[serde(rename = "≤")]
    Le,
}

/// `aᵀy + c ≥ 0` or `aᵀy + c ≤ 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionFacet {
    pub a: DVector<f64>,
    pub c: f64,
    pub sense: Sense,
}

impl RegionFacet {
    pub fn halfspace(&self) -> Halfspace {
        let h = Halfspace::new(self.a.clone(), self.c);
        match self.sense {
            Sense::Ge => h,
            Sense::Le => h.flipped(),
        }
    }
}

/// A linear region `D` of `g_k` together with its affine piece `(V, c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    pub k: usize,
    /// Activation bits of layers `k-1, …, 1`.
    pub pattern: Vec<Vec<bool>>,
    pub halfspaces: Vec<RegionFacet>,
    pub v: DMatrix<f64>,
    pub c: DVector<f64>,
    /// A point with slack at least [`INTERIOR_SLACK`], when certified.
    pub interior: Option<DVector<f64>>,
}

impl Region {
    pub fn flat_pattern(&self) -> Vec<bool> {
        self.pattern.iter().flatten().copied().collect()
    }

    pub fn polytope(&self) -> Polytope {
        let dim = self.v.ncols();
        Polytope::from_halfspaces(dim, self.halfspaces.iter().map(|f| f.halfspace()).collect())
    }

    pub fn contains(&self, y: &DVector<f64>, tol: f64) -> bool {
        self.halfspaces.iter().all(|f| f.halfspace().signed_distance(y) >= -tol)
    }

    pub fn eval(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.v * y + &self.c
    }
}

/// A hyperplane `{x : aᵀx + c = 0}` with `‖a‖ = 1`. When `oriented`, the
/// active side is `aᵀx + c > 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryHyperplane {
    pub normal: DVector<f64>,
    pub offset: f64,
    pub oriented: bool,
}

impl BoundaryHyperplane {
    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        self.normal.dot(x) + self.offset
    }

    pub fn flipped(&self) -> Self {
        Self { normal: -&self.normal, offset: -self.offset, oriented: self.oriented }
    }
}

/// Limits for pattern enumeration.
#[derive(Clone, Debug)]
pub struct EnumOptions {
    /// Largest total number of hidden units the enumeration accepts.
    pub max_units: usize,
    /// Quasi-random seed points used to start the frontier search.
    pub seed_points: usize,
    pub seed: u64,
}

impl Default for EnumOptions {
    fn default() -> Self {
        Self { max_units: 24, seed_points: 256, seed: 0 }
    }
}

/// One activation cell of a ReLU stack over a polytope.
#[derive(Clone, Debug)]
pub struct Cell {
    /// Bits of the stack's layers, first applied layer first.
    pub pattern: Vec<bool>,
    /// Pattern constraints (without the enclosing polytope), each written
    /// as `±(aᵀx + c) ≥ 0`.
    pub constraints: Vec<Halfspace>,
    /// Whether each constraint comes from an active bit.
    pub senses: Vec<bool>,
    /// Output of the stack (after the last ReLU) on this cell.
    pub map: Affine,
    pub interior: Option<DVector<f64>>,
}

/// Layers `from-1, …, to` of `params` in application order.
pub fn stack(params: &NetworkParams, from: usize, to: usize) -> Vec<&Layer> {
    (to..from).rev().map(|k| params.layer(k)).collect()
}

/// Activation bits of a ReLU stack at `x`.
pub fn stack_pattern(layers: &[&Layer], x: &DVector<f64>) -> Vec<bool> {
    let mut bits = Vec::new();
    let mut a = x.clone();
    for l in layers {
        let pre = l.pre_activation(&a);
        bits.extend(pre.iter().map(|&v| v >= 0.0));
        a = pre.map(|v| v.max(0.0));
    }
    bits
}

/// Constraints and affine output of the cell with the given pattern; `None`
/// when a neuron with constant pre-activation contradicts its bit.
pub fn cell_for_pattern(layers: &[&Layer], dim: usize, pattern: &[bool]) -> Option<(Vec<Halfspace>, Vec<bool>, Affine)> {
    let mut map = Affine::identity(dim);
    let mut constraints = Vec::new();
    let mut senses = Vec::new();
    let mut bit = 0;
    for l in layers {
        let pre = Affine::new(&l.weights * &map.lin, &l.weights * &map.offset + &l.bias);
        let mut lin = pre.lin.clone();
        let mut off = pre.offset.clone();
        for i in 0..pre.out_dim() {
            let active = pattern[bit];
            bit += 1;
            let row = pre.lin.row(i).transpose();
            let c = pre.offset[i];
            if row.iter().all(|&v| v == 0.0) {
                if active != (c >= 0.0) {
                    return None;
                }
            } else {
                senses.push(active);
                if active {
                    constraints.push(Halfspace::new(row, c));
                } else {
                    constraints.push(Halfspace::new(-row, -c));
                }
            }
            if !active {
                lin.row_mut(i).fill(0.0);
                off[i] = 0.0;
            }
        }
        map = Affine::new(lin, off);
    }
    Some((constraints, senses, map))
}

fn certify(layers: &[&Layer], domain: &Polytope, pattern: Vec<bool>) -> Option<Cell> {
    let (constraints, senses, map) = cell_for_pattern(layers, domain.dim(), &pattern)?;
    let poly = domain.clone().with(constraints.iter().cloned());
    let interior = poly.interior_point(&[], INTERIOR_SLACK)?;
    Some(Cell { pattern, constraints, senses, map, interior: Some(interior) })
}

fn total_units(layers: &[&Layer]) -> usize {
    layers.iter().map(|l| l.bias.len()).sum()
}

/// Full-dimensional activation cells of a ReLU stack inside `domain`, found
/// by breadth-first single-bit flips from the patterns at `seeds`.
pub fn enumerate_cells(
    layers: &[&Layer],
    domain: &Polytope,
    seeds: &[DVector<f64>],
    opts: &EnumOptions,
) -> Result<Vec<Cell>> {
    let units = total_units(layers);
    if units > opts.max_units {
        return Err(Error::EnumerationLimit { units, limit: opts.max_units });
    }
    if units == 0 {
        let interior = domain.interior_point(&[], INTERIOR_SLACK);
        return Ok(vec![Cell {
            pattern: Vec::new(),
            constraints: Vec::new(),
            senses: Vec::new(),
            map: Affine::identity(domain.dim()),
            interior,
        }]);
    }
    let mut seen: HashSet<Vec<bool>> = HashSet::new();
    let mut wave: Vec<Vec<bool>> = Vec::new();
    for x in seeds {
        let p = stack_pattern(layers, x);
        if seen.insert(p.clone()) {
            wave.push(p);
        }
    }
    if let Some((x, _)) = domain.max_slack_point(&[], 1.0) {
        let p = stack_pattern(layers, &x);
        if seen.insert(p.clone()) {
            wave.push(p);
        }
    }
    let mut cells = Vec::new();
    while !wave.is_empty() {
        let found: Vec<Cell> = wave
            .into_par_iter()
            .filter_map(|p| certify(layers, domain, p))
            .collect();
        let mut next = Vec::new();
        for cell in &found {
            for b in 0..units {
                let mut q = cell.pattern.clone();
                q[b] = !q[b];
                if seen.insert(q.clone()) {
                    next.push(q);
                }
            }
        }
        cells.extend(found);
        wave = next;
    }
    cells.sort_by(|a, b| a.pattern.cmp(&b.pattern));
    Ok(cells)
}

/// Exhaustive counterpart of [`enumerate_cells`] over all `2^m` patterns.
pub fn enumerate_cells_brute(layers: &[&Layer], domain: &Polytope, max_units: usize) -> Result<Vec<Cell>> {
    let units = total_units(layers);
    if units > max_units {
        return Err(Error::EnumerationLimit { units, limit: max_units });
    }
    let mut cells: Vec<Cell> = (0u64..(1u64 << units))
        .into_par_iter()
        .filter_map(|code| {
            let pattern: Vec<bool> = (0..units).map(|b| code >> (units - 1 - b) & 1 == 1).collect();
            certify(layers, domain, pattern)
        })
        .collect();
    cells.sort_by(|a, b| a.pattern.cmp(&b.pattern));
    Ok(cells)
}

fn split_pattern(params: &NetworkParams, k: usize, flat: &[bool]) -> Vec<Vec<bool>> {
    let mut out = Vec::new();
    let mut pos = 0;
    for layer in (1..k).rev() {
        let n = params.arch().width(layer);
        out.push(flat[pos..pos + n].to_vec());
        pos += n;
    }
    out
}

fn region_from_cell(params: &NetworkParams, k: usize, cell: Cell) -> Region {
    let m0 = params.weight(0);
    let out = Affine::new(m0.clone(), params.bias(0).clone()).after(&cell.map);
    let halfspaces = region_facets(&cell);
    Region {
        k,
        pattern: split_pattern(params, k, &cell.pattern),
        halfspaces,
        v: out.lin,
        c: out.offset,
        interior: cell.interior,
    }
}

fn region_facets(cell: &Cell) -> Vec<RegionFacet> {
    cell.constraints
        .iter()
        .zip(&cell.senses)
        .map(|(h, &active)| {
            if active {
                RegionFacet { a: h.normal.clone(), c: h.offset, sense: Sense::Ge }
            } else {
                RegionFacet { a: -&h.normal, c: -h.offset, sense: Sense::Le }
            }
        })
        .collect()
}

/// Axis-aligned box around `Ω_k` padded on each side by half its extent
/// (at least 1).
pub fn enumeration_box(lo: &[f64], hi: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let pad: Vec<f64> = lo.iter().zip(hi).map(|(a, b)| (0.5 * (b - a)).max(1.0)).collect();
    (
        lo.iter().zip(&pad).map(|(a, p)| a - p).collect(),
        hi.iter().zip(&pad).map(|(b, p)| b + p).collect(),
    )
}

/// Linear regions of `g_k` meeting the padded bounding box of `Ω_k`.
pub fn enumerate_regions(params: &NetworkParams, k: usize, domain: &DomainSpec, opts: &EnumOptions) -> Result<Vec<Region>> {
    let depth = params.depth();
    if k == 0 || k >= depth {
        return Err(Error::LayerIndex { k, depth });
    }
    let push = pushforward_domain(params, domain, k, &PushforwardOptions { seed: opts.seed, ..Default::default() })?;
    let (blo, bhi) = push.bounding_box();
    let (lo, hi) = enumeration_box(&blo, &bhi);
    let boxp = Polytope::from_box(&lo, &hi);
    let layers = stack(params, k, 1);
    let mut seeds = DomainSpec::new(lo.clone(), hi.clone())?.halton_points(opts.seed_points, opts.seed);
    seeds.extend(push.sample_points(opts.seed_points, opts.seed));
    let cells = enumerate_cells(&layers, &boxp, &seeds, opts)?;
    Ok(cells.into_iter().map(|c| region_from_cell(params, k, c)).collect())
}

/// Brute-force enumeration over all patterns (test oracle).
pub fn enumerate_regions_brute(params: &NetworkParams, k: usize, domain: &DomainSpec, max_units: usize) -> Result<Vec<Region>> {
    let depth = params.depth();
    if k == 0 || k >= depth {
        return Err(Error::LayerIndex { k, depth });
    }
    let push = pushforward_domain(params, domain, k, &PushforwardOptions::default())?;
    let (blo, bhi) = push.bounding_box();
    let (lo, hi) = enumeration_box(&blo, &bhi);
    let layers = stack(params, k, 1);
    let cells = enumerate_cells_brute(&layers, &Polytope::from_box(&lo, &hi), max_units)?;
    Ok(cells.into_iter().map(|c| region_from_cell(params, k, c)).collect())
}

/// The region whose pattern is the activation of `g_k`'s hidden layers at `y`.
pub fn region_of(params: &NetworkParams, k: usize, y: &DVector<f64>) -> Result<Region> {
    let depth = params.depth();
    if k == 0 || k >= depth {
        return Err(Error::LayerIndex { k, depth });
    }
    if y.len() != params.arch().width(k) {
        return Err(Error::Shape(format!("point has length {}, expected {}", y.len(), params.arch().width(k))));
    }
    let layers = stack(params, k, 1);
    let pattern = stack_pattern(&layers, y);
    let (constraints, senses, map) =
        cell_for_pattern(&layers, y.len(), &pattern).expect("pattern taken at a point is consistent");
    let cell = Cell { pattern, constraints, senses, map, interior: None };
    Ok(region_from_cell(params, k, cell))
}

/// Unit-normal hyperplanes of the first hidden layer, oriented so the active
/// side is positive.
pub fn first_layer_hyperplanes(params: &NetworkParams) -> Result<Vec<BoundaryHyperplane>> {
    layer_hyperplanes(params, params.depth() - 1)
}

/// Unit-normal hyperplanes `{M^k_i x + b^k_i = 0}` of layer `k`.
pub fn layer_hyperplanes(params: &NetworkParams, k: usize) -> Result<Vec<BoundaryHyperplane>> {
    let m = params.weight(k);
    let b = params.bias(k);
    (0..m.nrows())
        .map(|i| {
            let row = m.row(i).transpose();
            let n = row.norm();
            if n == 0.0 {
                return Err(Error::NormalizationImpossible { k, row: i });
            }
            Ok(BoundaryHyperplane { normal: row / n, offset: b[i] / n, oriented: true })
        })
        .collect()
}

/// One cell of `Ω` on which `f_k` is affine, with its image.
#[derive(Clone, Debug)]
pub struct PushforwardCell {
    pub pattern: Vec<bool>,
    /// The cell in input space (box plus pattern constraints).
    pub source: Polytope,
    /// `f_k` restricted to the cell.
    pub map: Affine,
    /// Images of the cell's vertices; empty when too many to enumerate.
    pub image_vertices: Vec<DVector<f64>>,
    pub interior: DVector<f64>,
}

impl PushforwardCell {
    /// Whether the image has nonempty interior in `R^{n_k}`.
    pub fn full_rank(&self) -> bool {
        let lin = &self.map.lin;
        lin.nrows() <= lin.ncols() && lin.rank(1e-10 * lin.amax().max(1e-300)) == lin.nrows()
    }
}

/// `Ω_k` as a union of affine images of cells, or a sample cloud.
#[derive(Clone, Debug)]
pub enum Pushforward {
    Exact { k: usize, cells: Vec<PushforwardCell> },
    Sampled { k: usize, points: Vec<DVector<f64>>, interior: Vec<bool> },
}

#[derive(Clone, Debug)]
pub struct PushforwardOptions {
    /// Largest input dimension handled exactly.
    pub exact_dim_cap: usize,
    pub max_units: usize,
    pub samples: usize,
    pub seed: u64,
}

impl Default for PushforwardOptions {
    fn default() -> Self {
        Self { exact_dim_cap: 6, max_units: 24, samples: 4096, seed: 0 }
    }
}

impl Pushforward {
    pub fn is_exact(&self) -> bool {
        matches!(self, Pushforward::Exact { .. })
    }

    /// Componentwise bounds of `Ω_k`.
    pub fn bounding_box(&self) -> (Vec<f64>, Vec<f64>) {
        match self {
            Pushforward::Exact { cells, .. } => {
                let dim = cells[0].map.out_dim();
                let mut lo = vec![f64::INFINITY; dim];
                let mut hi = vec![f64::NEG_INFINITY; dim];
                for cell in cells {
                    for j in 0..dim {
                        let row = cell.map.lin.row(j).transpose();
                        let off = cell.map.offset[j];
                        let (a, b) = if cell.image_vertices.is_empty() {
                            let min = match cell.source.optimize(&[], &row, false) {
                                LpOutcome::Optimal { value, .. } => value + off,
                                _ => f64::NEG_INFINITY,
                            };
                            let max = match cell.source.optimize(&[], &row, true) {
                                LpOutcome::Optimal { value, .. } => value + off,
                                _ => f64::INFINITY,
                            };
                            (min, max)
                        } else {
                            cell.image_vertices
                                .iter()
                                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v[j]), b.max(v[j])))
                        };
                        lo[j] = lo[j].min(a);
                        hi[j] = hi[j].max(b);
                    }
                }
                (lo, hi)
            }
            Pushforward::Sampled { points, .. } => {
                let dim = points[0].len();
                let mut lo = vec![f64::INFINITY; dim];
                let mut hi = vec![f64::NEG_INFINITY; dim];
                for p in points {
                    for j in 0..dim {
                        lo[j] = lo[j].min(p[j]);
                        hi[j] = hi[j].max(p[j]);
                    }
                }
                (lo, hi)
            }
        }
    }

    /// Points of `Ω_k`: images of interior points and vertices (exact) or the
    /// stored cloud (sampled), at most about `n`.
    pub fn sample_points(&self, n: usize, _seed: u64) -> Vec<DVector<f64>> {
        match self {
            Pushforward::Exact { cells, .. } => {
                let mut out = Vec::new();
                for c in cells {
                    out.push(c.map.apply(&c.interior));
                    out.extend(c.image_vertices.iter().cloned());
                }
                out.truncate(n.max(cells.len()));
                out
            }
            Pushforward::Sampled { points, .. } => points.iter().take(n).cloned().collect(),
        }
    }
}

/// Computes `Ω_k = f_k(Ω)`.
pub fn pushforward_domain(
    params: &NetworkParams,
    domain: &DomainSpec,
    k: usize,
    opts: &PushforwardOptions,
) -> Result<Pushforward> {
    let depth = params.depth();
    if k > depth {
        return Err(Error::LayerIndex { k, depth });
    }
    if domain.dim() != params.arch().input_dim() {
        return Err(Error::Shape(format!(
            "domain has dimension {}, network input {}",
            domain.dim(),
            params.arch().input_dim()
        )));
    }
    let layers = stack(params, depth, k);
    let units = total_units(&layers);
    if domain.dim() > opts.exact_dim_cap || units > opts.max_units {
        warn!("pushforward to layer {k}: exact mode cap exceeded, using {} samples", opts.samples);
        let xs = domain.halton_points(opts.samples, opts.seed);
        let points = xs.iter().map(|x| params.eval_f_k(k, x)).collect::<Result<Vec<_>>>()?;
        let interior = xs
            .iter()
            .map(|x| x.iter().enumerate().all(|(j, v)| *v > domain.lo[j] && *v < domain.hi[j]))
            .collect();
        return Ok(Pushforward::Sampled { k, points, interior });
    }
    let boxp = domain.polytope();
    let seeds = domain.halton_points(256, opts.seed);
    let enum_opts = EnumOptions { max_units: opts.max_units, seed_points: 0, seed: opts.seed };
    let cells = enumerate_cells(&layers, &boxp, &seeds, &enum_opts)?;
    let cells = cells
        .into_iter()
        .map(|c| {
            let source = boxp.clone().with(c.constraints.iter().cloned());
            let image_vertices = source
                .vertices(1e-9, 200_000)
                .map(|vs| vs.iter().map(|v| c.map.apply(v)).collect())
                .unwrap_or_default();
            PushforwardCell {
                pattern: c.pattern,
                source,
                map: c.map,
                image_vertices,
                interior: c.interior.expect("certified cell"),
            }
        })
        .collect();
    Ok(Pushforward::Exact { k, cells })
}

/// Serializable region record.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RegionRecord {
    pub pattern: Vec<u8>,
    #[serde(rename = "V")]
    pub v: Vec<Vec<f64>>,
    pub c: Vec<f64>,
    pub halfspaces: Vec<FacetRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FacetRecord {
    pub a: Vec<f64>,
    pub c: f64,
    pub sense: Sense,
}

impl From<&Region> for RegionRecord {
    fn from(r: &Region) -> Self {
        Self {
            pattern: r.flat_pattern().iter().map(|&b| b as u8).collect(),
            v: crate::net::matrix_to_rows(&r.v),
            c: r.c.iter().copied().collect(),
            halfspaces: r
                .halfspaces
                .iter()
                .map(|f| FacetRecord { a: f.a.iter().copied().collect(), c: f.c, sense: f.sense })
                .collect(),
        }
    }
}

/// JSON dump of a region list.
pub fn regions_to_json(regions: &[Region]) -> String {
    let records: Vec<RegionRecord> = regions.iter().map(RegionRecord::from).collect();
    serde_json::to_string_pretty(&records).expect("regions serialize")
}

/// Index pairs of regions whose patterns differ in exactly one bit.
pub fn adjacent_pairs(regions: &[Region]) -> Vec<(usize, usize)> {
    let pats: Vec<Vec<bool>> = regions.iter().map(|r| r.flat_pattern()).collect();
    let mut out = Vec::new();
    for i in 0..pats.len() {
        for j in i + 1..pats.len() {
            if pats[i].iter().zip(&pats[j]).filter(|(a, b)| a != b).count() == 1 {
                out.push((i, j));
            }
        }
    }
    out
}
