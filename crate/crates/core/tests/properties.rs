use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use relu_ident::conditions::Verdict;
use relu_ident::equivalence::{
    apply_transform, check_equivalent, hungarian, is_normalized, max_param_gap, normalize, random_witness,
    EquivalenceWitness,
};
use relu_ident::oracle::{functional_distance, make_teacher, parse_vector_line, Oracle, QueryOracle, TeacherMode};
use relu_ident::recovery::{recover_network, RecoveryOptions};
use relu_ident::regions::{region_of, DomainSpec};
use relu_ident::{Architecture, NetworkParams};

fn arch() -> impl Strategy<Value = Architecture> {
    (1usize..=4, prop::collection::vec(1usize..=5, 1..=3), 1usize..=2).prop_map(|(i, h, o)| {
        let mut w = vec![i];
        w.extend(h);
        w.push(o);
        Architecture::new(w).unwrap()
    })
}

fn net() -> impl Strategy<Value = NetworkParams> {
    (arch(), any::<u64>()).prop_map(|(a, s)| make_teacher(&a, s, TeacherMode::Gaussian))
}

fn param_scale(p: &NetworkParams) -> f64 {
    p.layers().iter().map(|l| l.weights.amax().max(l.bias.amax())).fold(1.0, f64::max)
}

fn scale(p: &NetworkParams) -> f64 {
    let d = DomainSpec::symmetric(p.arch().input_dim(), 10.0);
    d.halton_points(64, 0).iter().map(|x| p.forward(x).unwrap().amax()).fold(1.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn transform_preserves_function(p in net(), seed in any::<u64>()) {
        let w = random_witness(&p, &mut ChaCha8Rng::seed_from_u64(seed), 4.0);
        let q = apply_transform(&p, &w).unwrap();
        let d = DomainSpec::symmetric(p.arch().input_dim(), 10.0);
        let gap = functional_distance(&p, &q, &d, 300, seed).unwrap();
        prop_assert!(gap.sup <= 1e-9 * scale(&p));
    }

    #[test]
    fn inverse_witness_undoes_transform(p in net(), seed in any::<u64>()) {
        let w = random_witness(&p, &mut ChaCha8Rng::seed_from_u64(seed), 4.0);
        let q = apply_transform(&p, &w).unwrap();
        let back = apply_transform(&q, &w.invert()).unwrap();
        prop_assert!(max_param_gap(&p, &back) <= 1e-12 * param_scale(&p));
        let composed = w.compose(&w.invert()).unwrap();
        prop_assert!(composed.is_identity(1e-12));
    }

    #[test]
    fn equivalence_is_detected(p in net(), seed in any::<u64>()) {
        let w = random_witness(&p, &mut ChaCha8Rng::seed_from_u64(seed), 4.0);
        let q = apply_transform(&p, &w).unwrap();
        let found = check_equivalent(&p, &q, 1e-9).unwrap();
        prop_assert!(found.is_some());
        let r = apply_transform(&p, &found.unwrap()).unwrap();
        prop_assert!(max_param_gap(&r, &q) <= 1e-9 * param_scale(&q));
    }

    #[test]
    fn normalization_is_idempotent(p in net()) {
        let (n, w) = normalize(&p).unwrap();
        prop_assert!(is_normalized(&n, 1e-12));
        prop_assert_eq!(apply_transform(&p, &w).unwrap(), n.clone());
        let (n2, w2) = normalize(&n).unwrap();
        prop_assert!(w2.is_identity(1e-12));
        prop_assert!(max_param_gap(&n, &n2) <= 1e-12 * param_scale(&n));
    }

    #[test]
    fn json_round_trips_exactly(p in net(), seed in any::<u64>()) {
        prop_assert_eq!(NetworkParams::from_json(&p.to_json()).unwrap(), p.clone());
        let w = random_witness(&p, &mut ChaCha8Rng::seed_from_u64(seed), 4.0);
        prop_assert_eq!(EquivalenceWitness::from_json(&w.to_json()).unwrap(), w);
    }

    #[test]
    fn region_of_agrees_with_g_k(p in net(), x in prop::collection::vec(-10.0f64..10.0, 4)) {
        let x = DVector::from_iterator(p.arch().input_dim(), x.into_iter().take(p.arch().input_dim()));
        for k in 1..p.depth() {
            let y = p.eval_f_k(k, &x).unwrap();
            let r = region_of(&p, k, &y).unwrap();
            let want = p.eval_g_k(k, &y).unwrap();
            prop_assert!((r.eval(&y) - &want).amax() <= 1e-9 * (1.0 + want.amax() + y.amax()));
        }
    }

    #[test]
    fn verdicts_combine_as_a_lattice(a in 0usize..3, b in 0usize..3, c in 0usize..3) {
        let v = [Verdict::Pass, Verdict::Undetermined, Verdict::Fail];
        let (a, b, c) = (v[a], v[b], v[c]);
        prop_assert_eq!(a.combine(b), b.combine(a));
        prop_assert_eq!(a.combine(b).combine(c), a.combine(b.combine(c)));
        prop_assert_eq!(a.combine(Verdict::Fail), Verdict::Fail);
        prop_assert_eq!(a.combine(Verdict::Pass), a);
    }

    #[test]
    fn hungarian_is_optimal(n in 1usize..=5, entries in prop::collection::vec(-5.0f64..5.0, 25)) {
        let cost = DMatrix::from_fn(n, n, |i, j| entries[i * 5 + j]);
        let assign = hungarian(&cost);
        let total: f64 = assign.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum();
        let mut best = f64::INFINITY;
        permutations(n, &mut |perm| {
            best = best.min(perm.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum());
        });
        prop_assert!(total <= best + 1e-9);
    }

    #[test]
    fn vector_lines_round_trip(v in prop::collection::vec(any::<f64>().prop_filter("finite", |x| x.is_finite()), 0..6)) {
        let line = v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ");
        prop_assert_eq!(parse_vector_line(&line).unwrap(), v);
    }
}

fn permutations(n: usize, f: &mut dyn FnMut(&[usize])) {
    fn rec(a: &mut Vec<usize>, k: usize, f: &mut dyn FnMut(&[usize])) {
        if k == a.len() {
            f(a);
            return;
        }
        for i in k..a.len() {
            a.swap(k, i);
            rec(a, k + 1, f);
            a.swap(k, i);
        }
    }
    rec(&mut (0..n).collect(), 0, f);
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 16, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn query_count_matches_oracle(seed in 0u64..10_000, budget in prop_oneof![Just(u64::MAX), 20u64..3000]) {
        let arch = Architecture::new(vec![2, 2, 2, 1]).unwrap();
        let p = make_teacher(&arch, seed, TeacherMode::NormalizedGaussian);
        let d = DomainSpec::symmetric(2, 10.0);
        let o = QueryOracle::from_params(p, d.clone());
        let before = o.queries();
        let opts = RecoveryOptions { seed, budget, ..Default::default() };
        let reported = match recover_network(&o, &arch, &d, &opts) {
            Ok(r) => r.report.queries,
            Err(f) => f.report.queries,
        };
        prop_assert_eq!(reported, o.queries() - before);
        prop_assert!(reported <= budget);
    }
}
