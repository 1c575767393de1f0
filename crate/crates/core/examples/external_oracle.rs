//! Recovers a network hidden behind a separate process.
//!
//! The example re-runs itself with `serve` as the oracle: that child reads
//! one input vector per line on stdin and prints one output per line.

use std::io::{BufRead, Write};

use nalgebra::DVector;
use relu_ident::equivalence::check_equivalent;
use relu_ident::oracle::catalog::{scenario, ScenarioId};
use relu_ident::oracle::{parse_vector_line, Oracle, ProcessOracle};
use relu_ident::recovery::{recover_network, RecoveryOptions};

fn serve() {
    let net = &scenario(ScenarioId::Comparative).params[0];
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for line in std::io::stdin().lock().lines() {
        let x = DVector::from_vec(parse_vector_line(&line.expect("stdin")).expect("numbers"));
        let y = net.forward_unchecked(&x);
        writeln!(out, "{:?}", y[0]).expect("stdout");
        out.flush().expect("stdout");
    }
}

fn main() -> relu_ident::Result<()> {
    if std::env::args().nth(1).as_deref() == Some("serve") {
        serve();
        return Ok(());
    }
    let s = scenario(ScenarioId::Comparative);
    let exe = std::env::current_exe()?;
    let oracle = ProcessOracle::spawn(exe.to_str().expect("utf-8 path"), &["serve".into()], s.domain.clone(), 1, 2)?;
    let arch = s.params[0].arch().clone();
    let rec = recover_network(&oracle, &arch, &s.domain, &RecoveryOptions::default()).map_err(|f| f.error)?;
    println!("{} queries answered by the child processes", oracle.queries());
    println!("equivalent to the hidden network: {}", check_equivalent(&rec.params, &s.params[0], 1e-9)?.is_some());
    Ok(())
}
