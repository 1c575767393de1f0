//! Fully-connected feedforward ReLU networks.
//!
//! Layers are indexed in reverse: the input layer is `K`, the output layer
//! is `0`, and `M^k` maps layer `k + 1` to layer `k`. Weights are stored in
//! that same order, `M^{K-1}` first, which is the opposite of most ML
//! serialization formats.
//!
//! The network function is `f = h_0 ∘ h_1 ∘ … ∘ h_{K-1}` where
//! `h_k(x) = σ(M^k x + b^k)` for `k ≥ 1` and `h_0` is affine.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Layer widths `[n_K, n_{K-1}, …, n_0]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Architecture {
    widths: Vec<usize>,
}

impl Architecture {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 3 {
            return Err(Error::Shape(format!(
                "depth must be at least 2, got widths {widths:?}"
            )));
        }
        if widths.contains(&0) {
            return Err(Error::Shape(format!("zero width in {widths:?}")));
        }
        Ok(Self { widths })
    }

    /// Number of weight layers `K`.
    pub fn depth(&self) -> usize {
        self.widths.len() - 1
    }

    /// Width `n_k` of layer `k`.
    pub fn width(&self, k: usize) -> usize {
        self.widths[self.depth() - k]
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        self.widths[self.widths.len() - 1]
    }

    /// Widths listed input first.
    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    /// Hidden widths `n_{K-1}, …, n_1`.
    pub fn hidden_widths(&self) -> &[usize] {
        &self.widths[1..self.widths.len() - 1]
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.widths.iter().map(|w| w.to_string()).collect();
        write!(f, "{}", parts.join("-"))
    }
}

/// One affine layer `x ↦ M x + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Layer {
    pub fn new(weights: DMatrix<f64>, bias: DVector<f64>) -> Self {
        Self { weights, bias }
    }

    pub fn pre_activation(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.weights * x + &self.bias
    }
}

/// Network parameters `(M, b)`. Immutable once constructed.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    arch: Architecture,
    // layers[j] holds M^{K-1-j}
    layers: Vec<Layer>,
}

/// Per-hidden-layer activation bits, ordered from layer `K-1` down to `1`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ActivationPattern {
    pub layers: Vec<Vec<bool>>,
}

impl ActivationPattern {
    /// Bits flattened in layer order.
    pub fn bits(&self) -> Vec<bool> {
        self.layers.iter().flatten().copied().collect()
    }
}

impl NetworkParams {
    /// Builds parameters from layers given in storage order (`M^{K-1}` first).
    pub fn new(arch: Architecture, layers: Vec<Layer>) -> Result<Self> {
        let depth = arch.depth();
        if layers.len() != depth {
            return Err(Error::Shape(format!(
                "expected {depth} layers, got {}",
                layers.len()
            )));
        }
        for (j, layer) in layers.iter().enumerate() {
            let k = depth - 1 - j;
            let (rows, cols) = layer.weights.shape();
            if rows != arch.width(k) || cols != arch.width(k + 1) {
                return Err(Error::Shape(format!(
                    "M^{k} has shape {rows}x{cols}, expected {}x{}",
                    arch.width(k),
                    arch.width(k + 1)
                )));
            }
            if layer.bias.len() != arch.width(k) {
                return Err(Error::Shape(format!(
                    "b^{k} has length {}, expected {}",
                    layer.bias.len(),
                    arch.width(k)
                )));
            }
            if layer.weights.iter().chain(layer.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("layer {k}")));
            }
        }
        Ok(Self { arch, layers })
    }

    /// Builds parameters from `(M, b)` pairs in storage order, inferring the
    /// architecture.
    pub fn from_layers(layers: Vec<(DMatrix<f64>, DVector<f64>)>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::Shape("no layers".into()))?;
        let mut widths = vec![first.0.ncols()];
        widths.extend(layers.iter().map(|(m, _)| m.nrows()));
        let arch = Architecture::new(widths)?;
        let layers = layers.into_iter().map(|(m, b)| Layer::new(m, b)).collect();
        Self::new(arch, layers)
    }

    /// Builds parameters from row-major nested vectors in storage order.
    pub fn from_rows(layers: &[(Vec<Vec<f64>>, Vec<f64>)]) -> Result<Self> {
        let mut out = Vec::with_capacity(layers.len());
        for (rows, bias) in layers {
            out.push((matrix_from_rows(rows)?, DVector::from_vec(bias.clone())));
        }
        Self::from_layers(out)
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn depth(&self) -> usize {
        self.arch.depth()
    }

    /// Layer `k`, i.e. `(M^k, b^k)`.
    pub fn layer(&self, k: usize) -> &Layer {
        &self.layers[self.depth() - 1 - k]
    }

    pub fn weight(&self, k: usize) -> &DMatrix<f64> {
        &self.layer(k).weights
    }

    pub fn bias(&self, k: usize) -> &DVector<f64> {
        &self.layer(k).bias
    }

    /// Layers in storage order, `M^{K-1}` first.
    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn into_layers(self) -> Vec<Layer> {
        self.layers
    }

    fn check_input(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.arch.input_dim() {
            return Err(Error::Shape(format!(
                "input has length {}, expected {}",
                x.len(),
                self.arch.input_dim()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("input point".into()));
        }
        Ok(())
    }

    fn check_k(&self, k: usize) -> Result<()> {
        if k > self.depth() {
            return Err(Error::LayerIndex { k, depth: self.depth() });
        }
        Ok(())
    }

    /// `f_{M,b}(x)`.
    pub fn forward(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_input(x)?;
        Ok(self.forward_unchecked(x))
    }

    /// `f_{M,b}(x)` without shape validation.
    pub fn forward_unchecked(&self, x: &DVector<f64>) -> DVector<f64> {
        self.apply_range(self.depth(), 0, x.clone())
    }

    // applies h_{from-1}, …, h_{to} to a point of layer `from`
    fn apply_range(&self, from: usize, to: usize, mut x: DVector<f64>) -> DVector<f64> {
        for k in (to..from).rev() {
            x = self.layer(k).pre_activation(&x);
            if k >= 1 {
                x.apply(|v| *v = v.max(0.0));
            }
        }
        x
    }

    /// `f_k(x) = h_k ∘ … ∘ h_{K-1}(x)`; `f_K` is the identity.
    pub fn eval_f_k(&self, k: usize, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_k(k)?;
        self.check_input(x)?;
        Ok(self.apply_range(self.depth(), k, x.clone()))
    }

    /// `g_k(y) = h_0 ∘ … ∘ h_{k-1}(y)`; `g_0` is the identity.
    pub fn eval_g_k(&self, k: usize, y: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_k(k)?;
        if y.len() != self.arch.width(k) {
            return Err(Error::Shape(format!(
                "layer-{k} point has length {}, expected {}",
                y.len(),
                self.arch.width(k)
            )));
        }
        Ok(self.apply_range(k, 0, y.clone()))
    }

    /// Activation bits at every hidden layer; a zero pre-activation counts as
    /// active.
    pub fn activation_pattern(&self, x: &DVector<f64>) -> Result<ActivationPattern> {
        self.check_input(x)?;
        let mut layers = Vec::with_capacity(self.depth() - 1);
        let mut a = x.clone();
        for k in (1..self.depth()).rev() {
            let pre = self.layer(k).pre_activation(&a);
            layers.push(pre.iter().map(|&v| v >= 0.0).collect());
            a = pre.map(|v| v.max(0.0));
        }
        Ok(ActivationPattern { layers })
    }

    /// Serializes to the JSON network format.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&NetworkFile::from(self)).expect("network serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: NetworkFile =
            serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        file.into_params()
    }
}

/// On-disk layout of a network.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NetworkFile {
    pub depth: usize,
    pub widths: Vec<usize>,
    pub layers: Vec<LayerFile>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerFile {
    pub k: usize,
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl From<&NetworkParams> for NetworkFile {
    fn from(p: &NetworkParams) -> Self {
        let depth = p.depth();
        let layers = (0..depth)
            .rev()
            .map(|k| LayerFile {
                k,
                weights: matrix_to_rows(p.weight(k)),
                bias: p.bias(k).iter().copied().collect(),
            })
            .collect();
        Self {
            depth,
            widths: p.arch().widths().to_vec(),
            layers,
        }
    }
}

impl NetworkFile {
    pub fn into_params(self) -> Result<NetworkParams> {
        let arch = Architecture::new(self.widths.clone())?;
        if arch.depth() != self.depth {
            return Err(Error::Shape(format!(
                "depth {} disagrees with {} widths",
                self.depth,
                self.widths.len()
            )));
        }
        if self.layers.len() != self.depth {
            return Err(Error::Shape(format!(
                "expected {} layers, found {}",
                self.depth,
                self.layers.len()
            )));
        }
        let mut layers = Vec::with_capacity(self.depth);
        for (j, lf) in self.layers.into_iter().enumerate() {
            let expected_k = self.depth - 1 - j;
            if lf.k != expected_k {
                return Err(Error::Shape(format!(
                    "layer entry {j} has k = {}, expected {expected_k}",
                    lf.k
                )));
            }
            let rows = arch.width(expected_k);
            let cols = arch.width(expected_k + 1);
            if lf.weights.len() != rows || lf.weights.iter().any(|r| r.len() != cols) {
                return Err(Error::Shape(format!(
                    "M^{expected_k} must be {rows}x{cols}"
                )));
            }
            let m = matrix_from_rows(&lf.weights)?;
            layers.push(Layer::new(m, DVector::from_vec(lf.bias)));
        }
        NetworkParams::new(arch, layers)
    }
}

pub(crate) fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub(crate) fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, |r| r.len());
    if nrows == 0 || ncols == 0 {
        return Err(Error::Shape("empty matrix".into()));
    }
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Shape("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::catalog::{self, ScenarioId};
    use nalgebra::dvector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn comparative() -> NetworkParams {
        catalog::scenario(ScenarioId::Comparative).params[0].clone()
    }

    fn random_params(rng: &mut ChaCha8Rng, widths: Vec<usize>) -> NetworkParams {
        let arch = Architecture::new(widths).unwrap();
        let layers = (0..arch.depth())
            .rev()
            .map(|k| {
                Layer::new(
                    DMatrix::from_fn(arch.width(k), arch.width(k + 1), |_, _| {
                        rng.gen_range(-1.0..1.0)
                    }),
                    DVector::from_fn(arch.width(k), |_, _| rng.gen_range(-1.0..1.0)),
                )
            })
            .collect();
        NetworkParams::new(arch, layers).unwrap()
    }

    #[test]
    fn example4_values() {
        let p = catalog::scenario(ScenarioId::Ex4).params[0].clone();
        assert_eq!(p.forward(&dvector![0.5]).unwrap()[0], -0.5);
        assert_eq!(p.forward(&dvector![2.0]).unwrap()[0], 0.0);
    }

    #[test]
    fn zero_network_is_zero() {
        let arch = Architecture::new(vec![3, 2, 2]).unwrap();
        let layers = (0..2)
            .rev()
            .map(|k| Layer::new(DMatrix::zeros(arch.width(k), arch.width(k + 1)), DVector::zeros(arch.width(k))))
            .collect();
        let p = NetworkParams::new(arch, layers).unwrap();
        let y = p.forward(&dvector![1.0, -2.0, 3.0]).unwrap();
        assert_eq!(y, DVector::zeros(2));
        let pat = p.activation_pattern(&dvector![1.0, -2.0, 3.0]).unwrap();
        assert!(pat.bits().iter().all(|&b| b));
    }

    #[test]
    fn comparative_values() {
        let p = comparative();
        assert_eq!(p.forward(&dvector![0.0, 0.0]).unwrap()[0], 2.0);
        assert_eq!(p.eval_f_k(2, &dvector![-1.0, 3.0]).unwrap(), dvector![0.0, 3.0]);
        assert_eq!(p.eval_g_k(2, &dvector![2.0, 1.0]).unwrap()[0], 2.0);
        let pat = p.activation_pattern(&dvector![3.0, 1.0]).unwrap();
        assert_eq!(pat.layers, vec![vec![true, true], vec![true, true]]);
    }

    #[test]
    fn identity_conventions() {
        let p = comparative();
        let x = dvector![0.3, -0.7];
        assert_eq!(p.eval_f_k(3, &x).unwrap(), x);
        assert_eq!(p.eval_g_k(0, &dvector![1.5]).unwrap(), dvector![1.5]);
        assert!(matches!(p.eval_f_k(4, &x), Err(Error::LayerIndex { .. })));
        assert!(matches!(p.eval_g_k(4, &x), Err(Error::LayerIndex { .. })));
    }

    #[test]
    fn example3_tail_and_example2_pattern() {
        let ex3 = catalog::example3(1.0);
        assert_eq!(ex3.eval_g_k(2, &dvector![3.0]).unwrap()[0], 1.0);
        let ex2 = catalog::example2(1.0);
        let pat = ex2.activation_pattern(&dvector![5.0]).unwrap();
        assert_eq!(pat.layers, vec![vec![true]]);
    }

    #[test]
    fn output_layer_is_not_rectified() {
        let p = NetworkParams::from_rows(&[
            (vec![vec![1.0]], vec![0.0]),
            (vec![vec![1.0]], vec![-5.0]),
        ])
        .unwrap();
        assert_eq!(p.forward(&dvector![1.0]).unwrap()[0], -4.0);
    }

    #[test]
    fn shape_errors() {
        let p = comparative();
        assert!(matches!(p.forward(&dvector![1.0]), Err(Error::Shape(_))));
        let bad = NetworkParams::from_rows(&[
            (vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0.0]),
            (vec![vec![1.0, 1.0]], vec![0.0]),
        ]);
        assert!(bad.is_err());
        let nan = NetworkParams::from_rows(&[
            (vec![vec![f64::NAN]], vec![0.0]),
            (vec![vec![1.0]], vec![0.0]),
        ]);
        assert!(matches!(nan, Err(Error::NonFinite(_))));
    }

    #[test]
    fn f_k_at_zero_agrees_with_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = random_params(&mut rng, vec![3, 4, 3, 2]);
        for _ in 0..100 {
            let x = DVector::from_fn(3, |_, _| rng.gen_range(-3.0..3.0));
            assert_eq!(p.eval_f_k(0, &x).unwrap(), p.forward(&x).unwrap());
        }
    }

    #[test]
    fn composition_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..1000 {
            let widths = match trial % 3 {
                0 => vec![2, 3, 1],
                1 => vec![3, 3, 2, 2],
                _ => vec![4, 3, 3, 2, 1],
            };
            let p = random_params(&mut rng, widths);
            let x = DVector::from_fn(p.arch().input_dim(), |_, _| rng.gen_range(-5.0..5.0));
            let full = p.forward(&x).unwrap();
            for k in 0..=p.depth() {
                let y = p.eval_f_k(k, &x).unwrap();
                let z = p.eval_g_k(k, &y).unwrap();
                assert!((z - &full).amax() <= 1e-12);
            }
        }
    }

    #[test]
    fn locally_affine_on_constant_pattern_balls() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_params(&mut rng, vec![2, 4, 3, 1]);
        let mut checked = 0;
        while checked < 20 {
            let c = DVector::from_fn(2, |_, _| rng.gen_range(-2.0..2.0));
            let pat = p.activation_pattern(&c).unwrap();
            let r = 1e-3;
            let pts: Vec<DVector<f64>> = (0..12)
                .map(|_| &c + DVector::from_fn(2, |_, _| rng.gen_range(-r..r)))
                .collect();
            if pts.iter().any(|x| p.activation_pattern(x).unwrap() != pat) {
                continue;
            }
            // least-squares affine fit through the sampled values
            let a = DMatrix::from_fn(pts.len(), 3, |i, j| if j < 2 { pts[i][j] } else { 1.0 });
            let b = DVector::from_fn(pts.len(), |i, _| p.forward(&pts[i]).unwrap()[0]);
            let sol = a.clone().svd(true, true).solve(&b, 1e-14).unwrap();
            let resid = (a * sol - b).amax();
            assert!(resid <= 1e-9, "residual {resid}");
            checked += 1;
        }
    }

    #[test]
    fn json_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_params(&mut rng, vec![3, 3, 2, 1]);
        let q = NetworkParams::from_json(&p.to_json()).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn malformed_documents_rejected() {
        assert!(matches!(NetworkParams::from_json("{"), Err(Error::Parse(_))));
        let doc = r#"{"depth": 2, "widths": [2, 3, 1], "layers": [
            {"k": 1, "weights": [[0, 2], [1, -1]], "bias": [0, 0, 0]},
            {"k": 0, "weights": [[1, 1, 1]], "bias": [0]}]}"#;
        assert!(matches!(NetworkParams::from_json(doc), Err(Error::Shape(_))));
    }
}
