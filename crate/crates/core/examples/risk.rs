//! Monte Carlo risk of students against a teacher under uniform inputs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use relu_ident::equivalence::{apply_transform, random_witness};
use relu_ident::oracle::catalog::example2;
use relu_ident::oracle::{estimate_risk, make_teacher, TeacherMode};
use relu_ident::regions::DomainSpec;
use relu_ident::{Architecture, NetworkParams};

fn main() -> relu_ident::Result<()> {
    let arch = Architecture::new(vec![2, 3, 1])?;
    let teacher = make_teacher(&arch, 4, TeacherMode::Gaussian);
    let domain = DomainSpec::symmetric(2, 10.0);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let equivalent = apply_transform(&teacher, &random_witness(&teacher, &mut rng, 3.0))?;
    let mut layers = teacher.layers().to_vec();
    layers[0].bias[0] += 0.5;
    let perturbed = NetworkParams::new(arch, layers)?;

    for (name, student) in [("equivalent", &equivalent), ("bias +0.5", &perturbed)] {
        let r = estimate_risk(&teacher, student, &domain, 100_000, 2)?;
        println!("{name:<12} risk {:.3e} +- {:.1e}", r.mean, r.stderr);
    }
    let r = estimate_risk(&example2(1.0), &example2(2.0), &DomainSpec::new(vec![1.0], vec![5.0])?, 10_000, 3)?;
    println!("ex2 pair on [1,5]: risk {:.3e} +- {:.1e}", r.mean, r.stderr);
    Ok(())
}
