//! Rescales every hidden neuron to a unit incoming weight row.

use relu_ident::equivalence::{apply_transform, is_normalized, normalize};
use relu_ident::oracle::{functional_distance, make_teacher, TeacherMode};
use relu_ident::regions::DomainSpec;
use relu_ident::Architecture;

fn main() -> relu_ident::Result<()> {
    let arch = Architecture::new(vec![2, 3, 3, 1])?;
    let net = make_teacher(&arch, 3, TeacherMode::Gaussian);
    let (unit, witness) = normalize(&net)?;
    for k in (1..arch.depth()).rev() {
        let norms: Vec<String> = unit.weight(k).row_iter().map(|r| format!("{:.15}", r.norm())).collect();
        println!("row norms of M^{k}: {}", norms.join(", "));
    }
    println!("normalized: {}", is_normalized(&unit, 1e-12));
    let gap = functional_distance(&net, &unit, &DomainSpec::symmetric(2, 10.0), 1000, 2)?;
    println!("sup gap to the original {:.3e}", gap.sup);
    let again = apply_transform(&net, &witness)?;
    println!("witness reproduces it: {}", again == unit);
    Ok(())
}
