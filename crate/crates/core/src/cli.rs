//! Command-line frontend: `reluid <subcommand>`.
//!
//! Exit codes: 0 success or pass, 1 definite failure, 2 undetermined or
//! budget exhausted.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use serde_json::json;

use crate::conditions::{check_p, CheckOptions, Tolerances, Verdict};
use crate::equivalence::{check_equivalent, normalize};
use crate::error::{Error, Result};
use crate::net::{Architecture, NetworkParams};
use crate::oracle::catalog::{self, ScenarioFile, ScenarioId};
use crate::oracle::{estimate_risk, functional_distance, parse_vector_line, Oracle, ProcessOracle, QueryOracle};
use crate::recovery::{locate_folds, recover_network, RecoveryOptions};
use crate::regions::{enumerate_regions, DomainSpec, EnumOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_UNDETERMINED: i32 = 2;

const DEFAULT_SEED: u64 = 20_240_601;

#[derive(Debug, Parser)]
#[command(name = "reluid", version, about = "Identifiability checks and parameter recovery for deep ReLU networks")]
pub struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Evaluate a network on points read one per line.
    Eval {
        net: PathBuf,
        points: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check the identifiability conditions on a box.
    Check {
        net: PathBuf,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        tol: CheckTol,
    },
    /// Decide whether two networks are equivalent; writes the witness.
    Equiv {
        a: PathBuf,
        b: PathBuf,
        #[arg(long = "tol-equiv", default_value_t = 1e-6, allow_negative_numbers = true)]
        tol_equiv: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rescale hidden rows to unit norm.
    Normalize {
        net: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the witness mapping the input to the output.
        #[arg(long)]
        witness: Option<PathBuf>,
    },
    /// Recover parameters from queries to a teacher file or an external process.
    Recover(RecoverArgs),
    /// Reproduce a catalog example.
    Demo {
        id: String,
        /// Parameter values for the one-parameter families (ex2, ex3).
        #[arg(long = "a", allow_negative_numbers = true)]
        a: Vec<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Monte Carlo squared-loss risk of a student against a teacher.
    Risk {
        teacher: PathBuf,
        student: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    /// Box bounds for one input coordinate; repeat once per dimension.
    #[arg(long = "box", num_args = 2, value_names = ["LO", "HI"], action = clap::ArgAction::Append, allow_negative_numbers = true)]
    pub bounds: Vec<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CheckTol {
    #[arg(long = "tol-rank", default_value_t = 1e-10, allow_negative_numbers = true)]
    pub rank: f64,
    #[arg(long = "tol-column", default_value_t = 1e-10, allow_negative_numbers = true)]
    pub column: f64,
    #[arg(long = "tol-membership", default_value_t = 1e-8, allow_negative_numbers = true)]
    pub membership: f64,
    #[arg(long = "tol-interior", default_value_t = 1e-9, allow_negative_numbers = true)]
    pub interior: f64,
}

#[derive(Debug, Args)]
pub struct RecoverArgs {
    /// Teacher network answering the queries.
    #[arg(long, conflicts_with = "oracle_cmd", required_unless_present = "oracle_cmd")]
    pub teacher: Option<PathBuf>,
    /// External oracle program and its arguments, given after `--`. It reads
    /// one input vector per line and answers with one output vector per line.
    #[arg(last = true, value_name = "ORACLE_CMD")]
    pub oracle_cmd: Vec<String>,
    /// Layer widths from input to output, e.g. 3-3-2-1. Defaults to the teacher's.
    #[arg(long)]
    pub arch: Option<String>,
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 1_000_000)]
    pub budget: u64,
    /// Number of oracle processes (or threads for a teacher file).
    #[arg(long, default_value_t = 1)]
    pub parallel: usize,
    #[arg(long = "tol-jump", default_value_t = 1e-6, allow_negative_numbers = true)]
    pub tol_jump: f64,
    #[arg(long = "tol-fit", default_value_t = 1e-6, allow_negative_numbers = true)]
    pub tol_fit: f64,
    #[arg(long = "tol-equiv", default_value_t = 1e-5, allow_negative_numbers = true)]
    pub tol_equiv: f64,
    /// Where to write the JSON report.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidOption(format!("--{name} must be positive, got {v}")))
    }
}

fn read(path: &Path) -> Result<String> {
    Ok(std::fs::read_to_string(path)?)
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => Ok(std::fs::write(p, text)?),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

/// A network file, optionally carrying its query box.
fn load_network(path: &Path) -> Result<(NetworkParams, Option<DomainSpec>)> {
    let text = read(path)?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Parse(e.to_string()))?;
    if value.get("omega").is_some() {
        let f = ScenarioFile::from_json(&text)?;
        Ok((f.params()?, Some(f.domain()?)))
    } else {
        Ok((NetworkParams::from_json(&text)?, None))
    }
}

fn domain_from(bounds: &[f64], fallback: Option<DomainSpec>, dim: usize) -> Result<DomainSpec> {
    if bounds.is_empty() {
        return fallback.ok_or_else(|| Error::Domain("no box given; pass --box LO HI once per input dimension".into()));
    }
    let lo: Vec<f64> = bounds.chunks(2).map(|c| c[0]).collect();
    let hi: Vec<f64> = bounds.chunks(2).map(|c| c[1]).collect();
    // a single pair applies to every coordinate
    let (lo, hi) = if lo.len() == 1 && dim > 1 { (vec![lo[0]; dim], vec![hi[0]; dim]) } else { (lo, hi) };
    if lo.len() != dim {
        return Err(Error::Shape(format!("{} box ranges for input dimension {dim}", lo.len())));
    }
    DomainSpec::new(lo, hi)
}

fn seed_or_default(seed: Option<u64>) -> u64 {
    seed.unwrap_or_else(|| {
        eprintln!("seed: {DEFAULT_SEED}");
        DEFAULT_SEED
    })
}

fn exit_for(err: &Error) -> i32 {
    match err {
        Error::BudgetExhausted(_) => EXIT_UNDETERMINED,
        _ => EXIT_FAIL,
    }
}

pub fn run(cli: Cli) -> i32 {
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_for(&e)
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => {
            init_logging(cli.verbose);
            run(cli)
        }
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                EXIT_FAIL
            } else {
                EXIT_OK
            }
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Eval { net, points, out } => cmd_eval(&net, &points, out.as_deref()),
        Command::Check { net, common, tol } => cmd_check(&net, &common, &tol),
        Command::Equiv { a, b, tol_equiv, out } => cmd_equiv(&a, &b, tol_equiv, out.as_deref()),
        Command::Normalize { net, out, witness } => cmd_normalize(&net, out.as_deref(), witness.as_deref()),
        Command::Recover(args) => cmd_recover(&args),
        Command::Demo { id, a, seed } => cmd_demo(&id, &a, seed),
        Command::Risk { teacher, student, common, samples } => cmd_risk(&teacher, &student, &common, samples),
    }
}

fn format_row(v: &DVector<f64>) -> String {
    v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(" ")
}

pub fn cmd_eval(net: &Path, points: &Path, out: Option<&Path>) -> Result<i32> {
    let (params, _) = load_network(net)?;
    let mut rows = Vec::new();
    for (i, line) in read(points)?.lines().enumerate() {
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let x = DVector::from_vec(parse_vector_line(line)?);
        let y = params.forward(&x).map_err(|e| Error::Shape(format!("line {}: {e}", i + 1)))?;
        rows.push(format_row(&y));
    }
    let text = rows.join("\n");
    match out {
        Some(p) => std::fs::write(p, if text.is_empty() { text } else { text + "\n" })?,
        None if !text.is_empty() => println!("{text}"),
        None => {}
    }
    Ok(EXIT_OK)
}

pub fn cmd_check(net: &Path, common: &Common, tol: &CheckTol) -> Result<i32> {
    for (name, v) in [("tol-rank", tol.rank), ("tol-column", tol.column), ("tol-membership", tol.membership), ("tol-interior", tol.interior)] {
        positive(name, v)?;
    }
    let (params, omega) = load_network(net)?;
    let domain = domain_from(&common.bounds, omega, params.arch().input_dim())?;
    let opts = CheckOptions {
        tol: Tolerances { rank: tol.rank, column: tol.column, membership: tol.membership, interior: tol.interior },
        seed: seed_or_default(common.seed),
        ..Default::default()
    };
    let report = check_p(&params, &domain, &opts)?;
    print!("{}", report.summary());
    for (c, k) in report.failures() {
        println!("{c} fail k={k}");
    }
    if let Some(p) = &common.out {
        std::fs::write(p, report.to_json())?;
    }
    Ok(report.verdict.exit_code())
}

pub fn cmd_equiv(a: &Path, b: &Path, tol: f64, out: Option<&Path>) -> Result<i32> {
    positive("tol-equiv", tol)?;
    let (pa, _) = load_network(a)?;
    let (pb, _) = load_network(b)?;
    if pa.arch() != pb.arch() {
        println!("not equivalent: architectures {} and {} differ", pa.arch(), pb.arch());
        return Ok(EXIT_FAIL);
    }
    match check_equivalent(&pa, &pb, tol)? {
        Some(w) => {
            println!("equivalent");
            write_or_print(out, &w.to_json())?;
            Ok(EXIT_OK)
        }
        None => {
            println!("not equivalent");
            Ok(EXIT_FAIL)
        }
    }
}

pub fn cmd_normalize(net: &Path, out: Option<&Path>, witness: Option<&Path>) -> Result<i32> {
    let (params, _) = load_network(net)?;
    let (normalized, w) = normalize(&params)?;
    write_or_print(out, &normalized.to_json())?;
    if let Some(p) = witness {
        std::fs::write(p, w.to_json())?;
    }
    Ok(EXIT_OK)
}

pub fn cmd_recover(args: &RecoverArgs) -> Result<i32> {
    positive("tol-jump", args.tol_jump)?;
    positive("tol-fit", args.tol_fit)?;
    positive("tol-equiv", args.tol_equiv)?;
    if args.budget == 0 {
        return Err(Error::InvalidOption("--budget must be at least 1".into()));
    }
    let seed = seed_or_default(args.common.seed);
    let teacher = match &args.teacher {
        Some(p) => Some(load_network(p)?),
        None => None,
    };
    let arch = match (&args.arch, &teacher) {
        (Some(s), _) => parse_arch(s)?,
        (None, Some((t, _))) => t.arch().clone(),
        (None, None) => return Err(Error::InvalidOption("--arch is required with an external oracle".into())),
    };
    let omega = teacher.as_ref().and_then(|(_, d)| d.clone());
    let domain = domain_from(&args.common.bounds, omega, arch.input_dim())?;
    let oracle: Box<dyn Oracle> = match &teacher {
        Some((t, _)) => Box::new(QueryOracle::from_params(t.clone(), domain.clone()).with_budget(args.budget)),
        None => {
            let (prog, rest) = args.oracle_cmd.split_first().ok_or_else(|| Error::InvalidOption("missing oracle command after --".into()))?;
            Box::new(
                ProcessOracle::spawn(prog, rest, domain.clone(), arch.output_dim(), args.parallel)?.with_budget(args.budget),
            )
        }
    };
    let opts = RecoveryOptions {
        seed,
        budget: args.budget,
        jump_tol: args.tol_jump,
        fit_tol: args.tol_fit,
        parallel: args.parallel > 1 || teacher.is_some(),
        ..Default::default()
    };
    let config = json!({
        "arch": arch.to_string(),
        "box": {"lo": domain.lo, "hi": domain.hi},
        "seed": seed,
        "budget": args.budget,
        "tol_jump": args.tol_jump,
        "tol_fit": args.tol_fit,
        "tol_equiv": args.tol_equiv,
    });
    let (code, report) = match recover_network(oracle.as_ref(), &arch, &domain, &opts) {
        Ok(mut rec) => {
            let mut code = EXIT_OK;
            if let Some((t, _)) = &teacher {
                let eq = check_equivalent(&rec.params, t, args.tol_equiv)?.is_some();
                rec.report.equivalent = Some(eq);
                println!("recovered network {} teacher", if eq { "is equivalent to" } else { "is NOT equivalent to" });
                if !eq {
                    code = EXIT_FAIL;
                }
            } else {
                println!("recovered network with {} queries", rec.report.queries);
            }
            write_or_print(args.common.out.as_deref(), &rec.params.to_json())?;
            (code, rec.report)
        }
        Err(fail) => {
            eprintln!("recovery failed: {fail}");
            if let Some((t, _)) = &teacher {
                if let Ok(r) = check_p(t, &domain, &CheckOptions { seed, ..Default::default() }) {
                    for (c, k) in r.failures() {
                        eprintln!("teacher violates {c} at k={k}");
                    }
                }
            }
            let code = if matches!(fail.error, Error::BudgetExhausted(_)) {
                eprintln!("budget exhausted");
                EXIT_UNDETERMINED
            } else {
                EXIT_FAIL
            };
            (code, fail.report)
        }
    };
    if let Some(p) = &args.report {
        let doc = json!({"config": config, "report": report});
        std::fs::write(p, serde_json::to_string_pretty(&doc).expect("report serializes"))?;
    }
    Ok(code)
}

pub fn parse_arch(s: &str) -> Result<Architecture> {
    let widths = s
        .split(['-', ',', 'x'])
        .map(|w| w.trim().parse::<usize>().map_err(|e| Error::Parse(format!("bad width `{w}`: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    Architecture::new(widths)
}

pub fn cmd_risk(teacher: &Path, student: &Path, common: &Common, samples: usize) -> Result<i32> {
    let (t, omega) = load_network(teacher)?;
    let (s, _) = load_network(student)?;
    let domain = domain_from(&common.bounds, omega, t.arch().input_dim())?;
    let r = estimate_risk(&t, &s, &domain, samples, seed_or_default(common.seed))?;
    let text = format!("risk {:.6e} stderr {:.6e} n {}", r.mean, r.stderr, r.n);
    write_or_print(common.out.as_deref(), &text)?;
    Ok(EXIT_OK)
}

fn grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

fn print_samples(nets: &[(String, NetworkParams)], xs: &[f64]) {
    let header: Vec<String> = nets.iter().map(|(n, _)| format!("{n:>12}")).collect();
    println!("{:>8} {}", "x", header.join(" "));
    for &x in xs {
        let vals: Vec<String> = nets
            .iter()
            .map(|(_, p)| format!("{:>12.6}", p.forward_unchecked(&DVector::from_element(1, x))[0]))
            .collect();
        println!("{x:>8.3} {}", vals.join(" "));
    }
}

fn print_pairwise(nets: &[(String, NetworkParams)], domain: &DomainSpec) -> Result<()> {
    for i in 0..nets.len() {
        for j in i + 1..nets.len() {
            let d = functional_distance(&nets[i].1, &nets[j].1, domain, 2000, 1)?;
            let eq = check_equivalent(&nets[i].1, &nets[j].1, 1e-9)?.is_some();
            println!(
                "{} vs {}: sup gap {:.3e}, {}",
                nets[i].0,
                nets[j].0,
                d.sup,
                if eq { "equivalent" } else { "not equivalent" }
            );
        }
    }
    Ok(())
}

pub fn cmd_demo(id: &str, a: &[f64], seed: Option<u64>) -> Result<i32> {
    let id = ScenarioId::parse(id)?;
    let seed = seed.unwrap_or(DEFAULT_SEED);
    let s = catalog::scenario(id);
    let values = if a.is_empty() { vec![1.0, 2.0] } else { a.to_vec() };
    let nets: Vec<(String, NetworkParams)> = match id {
        ScenarioId::Ex2Pair => values.iter().map(|&v| (format!("a={v}"), catalog::example2(v))).collect(),
        ScenarioId::Ex3Pair => values.iter().map(|&v| (format!("a={v}"), catalog::example3(v))).collect(),
        ScenarioId::Ex1 => vec![("M1".into(), s.params[0].clone()), ("-M1".into(), s.params[1].clone())],
        ScenarioId::Ex4 => vec![("b0=0".into(), s.params[0].clone()), ("b0=-1".into(), s.params[1].clone())],
        ScenarioId::Comparative => vec![("net".into(), s.params[0].clone())],
    };
    println!("== {} on box lo={:?} hi={:?}", id.name(), s.domain.lo, s.domain.hi);
    let view = match id {
        ScenarioId::Ex2Pair => s.domain.clone(),
        _ => DomainSpec::symmetric(s.domain.dim(), 10.0),
    };
    if s.domain.dim() == 1 {
        print_samples(&nets, &grid(view.lo[0], view.hi[0], 9));
    }
    if nets.len() > 1 {
        print_pairwise(&nets, &view)?;
    }
    if id == ScenarioId::Comparative {
        println!("regions of g_2 (pattern: V, c):");
        let mut regions = enumerate_regions(&s.params[0], 2, &s.domain, &EnumOptions::default())?;
        regions.sort_by_key(|r| std::cmp::Reverse(r.flat_pattern()));
        for r in &regions {
            let bits: String = r.flat_pattern().iter().map(|b| if *b { '+' } else { '-' }).collect();
            println!("  {bits}: V = ({}, {}), c = {}", r.v[(0, 0)], r.v[(0, 1)], r.c[0]);
        }
        let o = QueryOracle::from_params(s.params[0].clone(), s.domain.clone());
        let folds = locate_folds(&o, &s.domain, 12, &RecoveryOptions { seed, ..Default::default() })?;
        println!("fold points (x1, x2):");
        for f in &folds {
            println!("  {:.6} {:.6}", f.point[0], f.point[1]);
        }
    }
    let report = check_p(&nets[0].1, &s.domain, &CheckOptions { seed, ..Default::default() })?;
    println!("conditions for {}:", nets[0].0);
    print!("{}", report.summary());
    let verdict_ok = match s.expect.first() {
        None => report.verdict == Verdict::Pass,
        Some(e) => report.failures().contains(&(e.condition, e.k)),
    };
    Ok(if verdict_ok { EXIT_OK } else { EXIT_FAIL })
}
