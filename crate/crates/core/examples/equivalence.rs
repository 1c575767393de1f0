//! Permutes and rescales hidden neurons, then finds the witness again.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use relu_ident::equivalence::{apply_transform, check_equivalent, random_witness};
use relu_ident::oracle::{functional_distance, make_teacher, TeacherMode};
use relu_ident::regions::DomainSpec;
use relu_ident::Architecture;

fn main() -> relu_ident::Result<()> {
    let arch = Architecture::new(vec![3, 4, 3, 1])?;
    let net = make_teacher(&arch, 7, TeacherMode::Gaussian);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let witness = random_witness(&net, &mut rng, 3.0);
    let moved = apply_transform(&net, &witness)?;

    let gap = functional_distance(&net, &moved, &DomainSpec::symmetric(3, 10.0), 1000, 1)?;
    println!("sup gap {:.3e}, mean gap {:.3e}", gap.sup, gap.mean);

    let found = check_equivalent(&net, &moved, 1e-9)?.expect("transformed network is equivalent");
    println!("recovered witness agrees with the applied one: {}", found.compose(&witness.invert())?.is_identity(1e-9));
    println!("{}", found.to_json());
    Ok(())
}
