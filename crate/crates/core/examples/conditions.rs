//! Checks the identifiability conditions on every catalog scenario.

use relu_ident::conditions::{check_p, CheckOptions};
use relu_ident::oracle::catalog::{scenario, ScenarioId};

fn main() -> relu_ident::Result<()> {
    for id in ScenarioId::ALL {
        let s = scenario(id);
        let report = check_p(&s.params[0], &s.domain, &CheckOptions::default())?;
        let expected: Vec<String> = s.expect.iter().map(|e| format!("{}@k={}", e.condition, e.k)).collect();
        println!("== {} (expected failures: {:?})", id.name(), expected);
        print!("{}", report.summary());
    }
    Ok(())
}
