//! Pairs of networks that compute the same function without being equivalent.

use relu_ident::equivalence::check_equivalent;
use relu_ident::oracle::catalog::{example2, example3, scenario, ScenarioId};
use relu_ident::oracle::functional_distance;
use relu_ident::regions::DomainSpec;
use relu_ident::NetworkParams;

fn compare(name: &str, a: &NetworkParams, b: &NetworkParams, domain: &DomainSpec) -> relu_ident::Result<()> {
    let gap = functional_distance(a, b, domain, 1000, 1)?;
    let eq = check_equivalent(a, b, 1e-6)?.is_some();
    println!("{name:<24} sup gap {:.2e}  equivalent: {eq}", gap.sup);
    Ok(())
}

fn main() -> relu_ident::Result<()> {
    let ex1 = scenario(ScenarioId::Ex1);
    compare("ex1: M^1 vs -M^1", &ex1.params[0], &ex1.params[1], &DomainSpec::symmetric(2, 10.0))?;
    compare("ex2: a=1 vs a=2 on [1,5]", &example2(1.0), &example2(2.0), &DomainSpec::new(vec![1.0], vec![5.0])?)?;
    compare("ex2: a=1 vs a=2 on [-5,5]", &example2(1.0), &example2(2.0), &DomainSpec::symmetric(1, 5.0))?;
    compare("ex3: a=1 vs a=2", &example3(1.0), &example3(2.0), &DomainSpec::symmetric(1, 10.0))?;
    let ex4 = scenario(ScenarioId::Ex4);
    compare("ex4: b0=0 vs b0=-1", &ex4.params[0], &ex4.params[1], &DomainSpec::symmetric(1, 10.0))?;
    Ok(())
}
