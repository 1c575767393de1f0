//! Recovers a random teacher from queries alone and verifies the result.
//!
//! `cargo run --release --example recover_teacher -- [WIDTHS] [SEED]`,
//! e.g. `3-3-2-1 40`.

use relu_ident::cli::parse_arch;
use relu_ident::conditions::{check_p, CheckOptions, Verdict};
use relu_ident::equivalence::check_equivalent;
use relu_ident::oracle::{make_teacher, Oracle, QueryOracle, TeacherMode};
use relu_ident::recovery::{recover_network, RecoveryOptions};
use relu_ident::regions::DomainSpec;

fn main() -> relu_ident::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let arch = parse_arch(args.get(1).map(String::as_str).unwrap_or("3-3-2-1"))?;
    let mut seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1);
    let domain = DomainSpec::symmetric(arch.input_dim(), 10.0);

    // look for a teacher satisfying the conditions
    let teacher = loop {
        let t = make_teacher(&arch, seed, TeacherMode::NormalizedGaussian);
        if check_p(&t, &domain, &CheckOptions::default())?.verdict == Verdict::Pass {
            break t;
        }
        seed += 1;
    };
    println!("teacher seed {seed}, architecture {arch}");

    let oracle = QueryOracle::from_params(teacher.clone(), domain.clone());
    match recover_network(&oracle, &arch, &domain, &RecoveryOptions::default()) {
        Ok(rec) => {
            for l in &rec.report.layers {
                println!(
                    "layer {}: {} kinks, {} full hyperplanes, max residual {:.2e}",
                    l.k, l.kinks, l.full, l.max_residual
                );
            }
            let eq = check_equivalent(&rec.params, &teacher, 1e-9)?.is_some();
            println!("queries {}, equivalent to teacher: {eq}", oracle.queries());
        }
        Err(fail) => println!("{fail}"),
    }
    Ok(())
}
