//! Permutation and positive rescaling of hidden neurons, the normalized
//! representative, and equivalence testing.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{Layer, NetworkParams};

/// Per-layer permutations `φ_k` and positive scales `λ^k`, `k = 0..=K`.
///
/// `perms[k][i]` is the new position of neuron `i` of layer `k`. Applying the
/// witness sends `M^k[i, j]` to position `(φ_k(i), φ_{k+1}(j))` scaled by
/// `λ^k_i / λ^{k+1}_j`, and `b^k_i` to `φ_k(i)` scaled by `λ^k_i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceWitness {
    pub perms: Vec<Vec<usize>>,
    pub scales: Vec<Vec<f64>>,
}

impl EquivalenceWitness {
    /// Identity witness for the widths `n_0, …, n_K`.
    pub fn identity_for(params: &NetworkParams) -> Self {
        let widths: Vec<usize> = (0..=params.depth()).map(|k| params.arch().width(k)).collect();
        Self {
            perms: widths.iter().map(|&n| (0..n).collect()).collect(),
            scales: widths.iter().map(|&n| vec![1.0; n]).collect(),
        }
    }

    pub fn depth(&self) -> usize {
        self.perms.len() - 1
    }

    pub fn is_identity(&self, tol: f64) -> bool {
        self.perms
            .iter()
            .all(|p| p.iter().enumerate().all(|(i, &j)| i == j))
            && self.scales.iter().flatten().all(|&s| (s - 1.0).abs() <= tol)
    }

    /// Checks sizes against `params` and the witness invariants.
    pub fn validate(&self, params: &NetworkParams) -> Result<()> {
        let depth = params.depth();
        if self.perms.len() != depth + 1 || self.scales.len() != depth + 1 {
            return Err(Error::Witness(format!(
                "expected {} layers, got {} perms and {} scale vectors",
                depth + 1,
                self.perms.len(),
                self.scales.len()
            )));
        }
        for k in 0..=depth {
            let n = params.arch().width(k);
            let (perm, scale) = (&self.perms[k], &self.scales[k]);
            if perm.len() != n || scale.len() != n {
                return Err(Error::Witness(format!("layer {k} has width {n}")));
            }
            let mut seen = vec![false; n];
            for &p in perm {
                if p >= n || seen[p] {
                    return Err(Error::Witness(format!("layer {k}: not a permutation")));
                }
                seen[p] = true;
            }
            if scale.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
                return Err(Error::Witness(format!("layer {k}: scales must be positive")));
            }
            if k == 0 || k == depth {
                if perm.iter().enumerate().any(|(i, &p)| i != p) {
                    return Err(Error::Witness(format!("layer {k}: permutation must be the identity")));
                }
                if scale.iter().any(|&s| (s - 1.0).abs() > 1e-12) {
                    return Err(Error::Witness(format!("layer {k}: scales must equal 1")));
                }
            }
        }
        Ok(())
    }

    fn check_compatible(&self, other: &Self) -> Result<()> {
        let same = self.perms.len() == other.perms.len()
            && self.perms.iter().zip(&other.perms).all(|(a, b)| a.len() == b.len());
        if !same {
            return Err(Error::Witness("witness sizes differ".into()));
        }
        Ok(())
    }

    /// The witness equivalent to applying `self` and then `then`.
    pub fn compose(&self, then: &Self) -> Result<Self> {
        self.check_compatible(then)?;
        let mut perms = Vec::with_capacity(self.perms.len());
        let mut scales = Vec::with_capacity(self.perms.len());
        for k in 0..self.perms.len() {
            let (p1, s1) = (&self.perms[k], &self.scales[k]);
            let (p2, s2) = (&then.perms[k], &then.scales[k]);
            perms.push(p1.iter().map(|&i| p2[i]).collect());
            scales.push((0..p1.len()).map(|i| s2[p1[i]] * s1[i]).collect());
        }
        Ok(Self { perms, scales })
    }

    pub fn invert(&self) -> Self {
        let mut perms = Vec::with_capacity(self.perms.len());
        let mut scales = Vec::with_capacity(self.perms.len());
        for (p, s) in self.perms.iter().zip(&self.scales) {
            let mut inv = vec![0; p.len()];
            let mut sc = vec![0.0; p.len()];
            for (i, &j) in p.iter().enumerate() {
                inv[j] = i;
                sc[j] = 1.0 / s[i];
            }
            perms.push(inv);
            scales.push(sc);
        }
        Self { perms, scales }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("witness serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }
}

/// Applies the permutation and rescaling given by `w`.
pub fn apply_transform(params: &NetworkParams, w: &EquivalenceWitness) -> Result<NetworkParams> {
    w.validate(params)?;
    let depth = params.depth();
    let mut layers = Vec::with_capacity(depth);
    for k in (0..depth).rev() {
        let m = params.weight(k);
        let b = params.bias(k);
        let (po, so) = (&w.perms[k], &w.scales[k]);
        let (pi, si) = (&w.perms[k + 1], &w.scales[k + 1]);
        let mut mt = DMatrix::zeros(m.nrows(), m.ncols());
        let mut bt = DVector::zeros(b.len());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                mt[(po[i], pi[j])] = so[i] * m[(i, j)] / si[j];
            }
            bt[po[i]] = so[i] * b[i];
        }
        layers.push(Layer::new(mt, bt));
    }
    NetworkParams::new(params.arch().clone(), layers)
}

/// Rescales every hidden layer to unit-norm rows. Returns the normalized
/// parameters and the witness taking `params` to them.
pub fn normalize(params: &NetworkParams) -> Result<(NetworkParams, EquivalenceWitness)> {
    let depth = params.depth();
    let mut w = EquivalenceWitness::identity_for(params);
    for k in (1..depth).rev() {
        let m = params.weight(k);
        let next = w.scales[k + 1].clone();
        for i in 0..m.nrows() {
            let norm = m
                .row(i)
                .iter()
                .zip(&next)
                .map(|(v, s)| (v / s).powi(2))
                .sum::<f64>()
                .sqrt();
            if norm == 0.0 {
                return Err(Error::NormalizationImpossible { k, row: i });
            }
            w.scales[k][i] = 1.0 / norm;
        }
    }
    Ok((apply_transform(params, &w)?, w))
}

/// True when every hidden row has unit norm within `tol`.
pub fn is_normalized(params: &NetworkParams, tol: f64) -> bool {
    (1..params.depth()).all(|k| {
        params
            .weight(k)
            .row_iter()
            .all(|r| (r.norm() - 1.0).abs() <= tol)
    })
}

/// Searches for a witness taking `p1` to `p2`.
pub fn check_equivalent(p1: &NetworkParams, p2: &NetworkParams, tol: f64) -> Result<Option<EquivalenceWitness>> {
    if p1.arch() != p2.arch() {
        return Err(Error::ArchitectureMismatch(format!("{} vs {}", p1.arch(), p2.arch())));
    }
    let (n1, w1) = normalize(p1)?;
    let (n2, w2) = normalize(p2)?;
    let depth = p1.depth();
    let mut perm = EquivalenceWitness::identity_for(p1);

    for k in (0..depth).rev() {
        let m1 = n1.weight(k);
        let m2 = n2.weight(k);
        let b1 = n1.bias(k);
        let b2 = n2.bias(k);
        let inner = &perm.perms[k + 1];
        // rows of layer k of the first network expressed in the second
        // network's input ordering
        let mut r1 = DMatrix::zeros(m1.nrows(), m1.ncols());
        for i in 0..m1.nrows() {
            for j in 0..m1.ncols() {
                r1[(i, inner[j])] = m1[(i, j)];
            }
        }
        let n = m1.nrows();
        let cost = DMatrix::from_fn(n, n, |i, p| {
            (r1.row(i) - m2.row(p)).norm() + (b1[i] - b2[p]).abs()
        });
        let limit = |i: usize, p: usize| {
            let scale = r1.row(i).amax().max(m2.row(p).amax()).max(b1[i].abs()).max(b2[p].abs());
            tol * (1.0 + scale)
        };
        if k == 0 {
            if (0..n).any(|i| cost[(i, i)] > limit(i, i)) {
                return Ok(None);
            }
            continue;
        }
        let assignment = hungarian(&cost);
        if assignment.iter().enumerate().any(|(i, &p)| cost[(i, p)] > limit(i, p)) {
            return Ok(None);
        }
        perm.perms[k] = assignment;
    }

    let w = w1.compose(&perm)?.compose(&w2.invert())?;
    let mapped = apply_transform(p1, &w)?;
    let scale = p2
        .layers()
        .iter()
        .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
        .fold(0.0f64, |a, v| a.max(v.abs()));
    let gap = max_param_gap(&mapped, p2);
    Ok((gap <= tol * (1.0 + scale)).then_some(w))
}

/// Largest absolute entry-wise difference between two parameter sets of the
/// same architecture.
pub fn max_param_gap(p1: &NetworkParams, p2: &NetworkParams) -> f64 {
    p1.layers()
        .iter()
        .zip(p2.layers())
        .map(|(a, b)| (&a.weights - &b.weights).amax().max((&a.bias - &b.bias).amax()))
        .fold(0.0, f64::max)
}

/// Minimum-cost perfect matching on a square cost matrix. Returns the column
/// assigned to each row.
pub fn hungarian(cost: &DMatrix<f64>) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "cost matrix must be square");
    // potentials and matching use 1-based indices with 0 as a sentinel column
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if row_of[j] > 0 {
            assignment[row_of[j] - 1] = j - 1;
        }
    }
    assignment
}

/// A random witness for `params`: uniform permutations and log-uniform
/// scales in `[1/scale_range, scale_range]`.
pub fn random_witness<R: rand::Rng>(params: &NetworkParams, rng: &mut R, scale_range: f64) -> EquivalenceWitness {
    use rand::seq::SliceRandom;
    let mut w = EquivalenceWitness::identity_for(params);
    let log_r = scale_range.ln();
    for k in 1..params.depth() {
        w.perms[k].shuffle(rng);
        for s in w.scales[k].iter_mut() {
            *s = rng.gen_range(-log_r..=log_r).exp();
        }
    }
    w
}
