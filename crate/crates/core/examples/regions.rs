//! Lists the linear regions of `g_2` for the two-hidden-layer catalog network.

use relu_ident::oracle::catalog::{scenario, ScenarioId};
use relu_ident::regions::{adjacent_pairs, enumerate_regions, EnumOptions};

fn main() -> relu_ident::Result<()> {
    let s = scenario(ScenarioId::Comparative);
    let net = &s.params[0];
    let regions = enumerate_regions(net, 2, &s.domain, &EnumOptions::default())?;
    println!("{:>8} {:>12} {:>4} {:>6}", "pattern", "V", "c", "facets");
    for r in &regions {
        let bits: String = r.flat_pattern().iter().map(|b| if *b { '+' } else { '-' }).collect();
        println!(
            "{bits:>8} {:>12} {:>4} {:>6}",
            format!("({}, {})", r.v[(0, 0)], r.v[(0, 1)]),
            r.c[0],
            r.halfspaces.len()
        );
    }
    println!("adjacent pairs: {:?}", adjacent_pairs(&regions));
    let layer1 = enumerate_regions(net, 1, &s.domain, &EnumOptions::default())?;
    println!("g_1 has {} region(s)", layer1.len());
    Ok(())
}
