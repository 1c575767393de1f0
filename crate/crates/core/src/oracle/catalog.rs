//! Reference networks with known identifiability behaviour.
//!
//! Each scenario carries exact parameters, the query box and the conditions
//! expected to fail.

use nalgebra::{dmatrix, dvector, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::conditions::Condition;
use crate::error::{Error, Result};
use crate::net::{NetworkFile, NetworkParams};
use crate::regions::DomainSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScenarioId {
    /// Three hidden neurons summing to zero; sign flip of the first layer.
    Ex1,
    /// A bias shift invisible on `[1, 5]`; parameters `a = 1` and `a = 2`.
    Ex2Pair,
    /// A dead intermediate layer hides `a`; parameters `a = 1` and `a = 2`.
    Ex3Pair,
    /// A kink at `x = 1` produced by two different parameterizations.
    Ex4,
    /// Two-layer network satisfying every condition.
    Comparative,
}

impl ScenarioId {
    pub const ALL: [ScenarioId; 5] =
        [ScenarioId::Ex1, ScenarioId::Ex2Pair, ScenarioId::Ex3Pair, ScenarioId::Ex4, ScenarioId::Comparative];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioId::Ex1 => "ex1",
            ScenarioId::Ex2Pair => "ex2",
            ScenarioId::Ex3Pair => "ex3",
            ScenarioId::Ex4 => "ex4",
            ScenarioId::Comparative => "comparative",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|id| id.name() == name)
            .ok_or_else(|| Error::UnknownScenario(name.to_string()))
    }
}

/// A condition expected to fail at layer `k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExpectedFailure {
    pub condition: Condition,
    pub k: usize,
}

#[derive(Clone, Debug)]
pub struct Scenario {
    pub id: ScenarioId,
    /// The first network is the primary one; further entries are the
    /// alternatives realizing the same function.
    pub params: Vec<NetworkParams>,
    pub domain: DomainSpec,
    /// Expected failures; the first entry is the designated one. Empty means
    /// every condition holds.
    pub expect: Vec<ExpectedFailure>,
}

/// `f(x) = σ(x + a) − a`.
pub fn example2(a: f64) -> NetworkParams {
    NetworkParams::from_layers(vec![(dmatrix![1.0], dvector![a]), (dmatrix![1.0], dvector![-a])])
        .expect("valid parameters")
}

/// `f(x) = σ(x − 1)` for every `a > 0`.
pub fn example3(a: f64) -> NetworkParams {
    NetworkParams::from_layers(vec![
        (dmatrix![1.0], dvector![a]),
        (dmatrix![1.0], dvector![-1.0 - a]),
        (dmatrix![1.0], dvector![0.0]),
    ])
    .expect("valid parameters")
}

pub fn example1() -> NetworkParams {
    example1_with(dmatrix![0.0, 2.0; 1.0, -1.0; -1.0, -1.0])
}

/// Example 1 with the first layer negated.
pub fn example1_alt() -> NetworkParams {
    example1_with(-dmatrix![0.0, 2.0; 1.0, -1.0; -1.0, -1.0])
}

fn example1_with(m1: DMatrix<f64>) -> NetworkParams {
    NetworkParams::from_layers(vec![(m1, DVector::zeros(3)), (dmatrix![1.0, 1.0, 1.0], dvector![0.0])])
        .expect("valid parameters")
}

pub fn example4() -> NetworkParams {
    NetworkParams::from_layers(vec![
        (dmatrix![1.0], dvector![0.0]),
        (dmatrix![-1.0], dvector![1.0]),
        (dmatrix![-1.0], dvector![0.0]),
    ])
    .expect("valid parameters")
}

pub fn example4_alt() -> NetworkParams {
    NetworkParams::from_layers(vec![
        (dmatrix![-1.0], dvector![1.0]),
        (dmatrix![-1.0], dvector![1.0]),
        (dmatrix![1.0], dvector![-1.0]),
    ])
    .expect("valid parameters")
}

pub fn comparative() -> NetworkParams {
    NetworkParams::from_layers(vec![
        (DMatrix::identity(2, 2), DVector::zeros(2)),
        (dmatrix![1.0, -1.0; -1.0, 2.0], dvector![-1.0, 2.0]),
        (dmatrix![1.0, 1.0], dvector![0.0]),
    ])
    .expect("valid parameters")
}

/// Closed form of Example 2.
pub fn example2_f(a: f64, x: f64) -> f64 {
    if x < -a {
        -a
    } else {
        x
    }
}

/// Closed form of Example 3.
pub fn example3_f(x: f64) -> f64 {
    (x - 1.0).max(0.0)
}

/// Closed form of Example 4.
pub fn example4_f(x: f64) -> f64 {
    if x <= 1.0 {
        x.max(0.0) - 1.0
    } else {
        0.0
    }
}

/// Affine pieces `(V², c²)` of the comparative network's `g_2`, keyed by the
/// sign pattern of the two neurons of layer 1 (`+1` active, `-1` inactive).
pub fn comparative_table() -> Vec<((i8, i8), [f64; 2], f64)> {
    vec![
        ((1, 1), [0.0, 1.0], 1.0),
        ((1, -1), [1.0, -1.0], -1.0),
        ((-1, 1), [-1.0, 2.0], 2.0),
        ((-1, -1), [0.0, 0.0], 0.0),
    ]
}

pub fn scenario(id: ScenarioId) -> Scenario {
    use Condition::*;
    let fail = |condition, k| ExpectedFailure { condition, k };
    match id {
        ScenarioId::Ex1 => Scenario {
            id,
            params: vec![example1(), example1_alt()],
            domain: DomainSpec::big_box(2),
            expect: vec![fail(A, 1)],
        },
        ScenarioId::Ex2Pair => Scenario {
            id,
            params: vec![example2(1.0), example2(2.0)],
            domain: DomainSpec::new(vec![1.0], vec![5.0]).expect("valid box"),
            expect: vec![fail(B, 1)],
        },
        ScenarioId::Ex3Pair => Scenario {
            id,
            params: vec![example3(1.0), example3(2.0)],
            domain: DomainSpec::big_box(1),
            // the kink at 1 also hides a full hyperplane inside the
            // preimage boundaries, so the last condition fails as well
            expect: vec![fail(C, 2), fail(D, 2)],
        },
        ScenarioId::Ex4 => Scenario {
            id,
            params: vec![example4(), example4_alt()],
            domain: DomainSpec::big_box(1),
            expect: vec![fail(D, 2)],
        },
        ScenarioId::Comparative => Scenario {
            id,
            params: vec![comparative()],
            domain: DomainSpec::symmetric(2, 10.0),
            expect: vec![],
        },
    }
}

/// On-disk scenario: a network file plus the box and expected verdicts.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScenarioFile {
    #[serde(flatten)]
    pub network: NetworkFile,
    pub omega: DomainSpec,
    #[serde(default)]
    pub expect: BTreeMap<String, String>,
}

impl ScenarioFile {
    pub fn new(params: &NetworkParams, domain: &DomainSpec, expect: &[ExpectedFailure]) -> Self {
        Self {
            network: NetworkFile::from(params),
            omega: domain.clone(),
            expect: expect
                .iter()
                .map(|e| (e.condition.label().to_string(), format!("fail@k={}", e.k)))
                .collect(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn params(&self) -> Result<NetworkParams> {
        self.network.clone().into_params()
    }

    pub fn domain(&self) -> Result<DomainSpec> {
        DomainSpec::new(self.omega.lo.clone(), self.omega.hi.clone())
    }

    pub fn expected_failures(&self) -> Result<Vec<ExpectedFailure>> {
        self.expect
            .iter()
            .map(|(cond, verdict)| {
                let condition = Condition::parse(cond)?;
                let k = verdict
                    .strip_prefix("fail@k=")
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Parse(format!("bad expectation `{verdict}`")))?;
                Ok(ExpectedFailure { condition, k })
            })
            .collect()
    }
}

/// Scenario files as `(file name, contents)` pairs, one per catalog network.
pub fn scenario_files() -> Vec<(String, ScenarioFile)> {
    let mut out = Vec::new();
    for id in ScenarioId::ALL {
        let s = scenario(id);
        let names: Vec<String> = match id {
            ScenarioId::Ex2Pair => vec!["ex2_a1".into(), "ex2_a2".into()],
            ScenarioId::Ex3Pair => vec!["ex3_a1".into(), "ex3_a2".into()],
            _ => vec![id.name().to_string(), format!("{}_alt", id.name())],
        };
        for (p, name) in s.params.iter().zip(names) {
            out.push((format!("{name}.json"), ScenarioFile::new(p, &s.domain, &s.expect)));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equivalence::check_equivalent;
    use crate::oracle::functional_distance;

    fn grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
    }

    #[test]
    fn closed_forms_match() {
        for x in grid(-10.0, 10.0, 1000) {
            let v = dvector![x];
            for a in [1.0, 2.0, 0.5] {
                assert!((example2(a).forward(&v).unwrap()[0] - example2_f(a, x)).abs() <= 1e-12);
                assert!((example3(a).forward(&v).unwrap()[0] - example3_f(x)).abs() <= 1e-12);
            }
            assert!((example4().forward(&v).unwrap()[0] - example4_f(x)).abs() <= 1e-12);
            assert!((example4_alt().forward(&v).unwrap()[0] - example4_f(x)).abs() <= 1e-12);
        }
    }

    #[test]
    fn example1_pair_same_function_not_equivalent() {
        let s = scenario(ScenarioId::Ex1);
        let d = functional_distance(&s.params[0], &s.params[1], &DomainSpec::symmetric(2, 10.0), 1000, 1).unwrap();
        assert!(d.sup <= 1e-12);
        assert!(check_equivalent(&s.params[0], &s.params[1], 1e-6).unwrap().is_none());
        assert_eq!(s.params[0].weight(1), &dmatrix![0.0, 2.0; 1.0, -1.0; -1.0, -1.0]);
    }

    #[test]
    fn scenario_names_round_trip() {
        for id in ScenarioId::ALL {
            assert_eq!(ScenarioId::parse(id.name()).unwrap(), id);
        }
        assert!(matches!(ScenarioId::parse("ex9"), Err(Error::UnknownScenario(_))));
    }

    #[test]
    fn scenario_file_round_trip() {
        for (_, f) in scenario_files() {
            let back = ScenarioFile::from_json(&f.to_json()).unwrap();
            assert_eq!(back.params().unwrap(), f.params().unwrap());
            assert_eq!(back.domain().unwrap(), f.domain().unwrap());
            assert_eq!(back.expected_failures().unwrap().len(), f.expect.len());
        }
    }
}
