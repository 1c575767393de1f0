//! Black-box access to network functions, teacher generation, and the
//! functional comparisons built on sampling.

pub mod catalog;

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::equivalence::normalize;
use crate::error::{Error, Result};
use crate::geometry::Halton;
use crate::net::{Architecture, Layer, NetworkParams};
use crate::regions::DomainSpec;

/// Query access to a vector function on a box.
pub trait Oracle: Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn domain(&self) -> &DomainSpec;
    /// Evaluates the function; counts as one query.
    fn query(&self, x: &DVector<f64>) -> Result<DVector<f64>>;
    /// Queries answered so far.
    fn queries(&self) -> u64;
}

type EvalFn = dyn Fn(&DVector<f64>) -> Result<DVector<f64>> + Send + Sync;

/// An [`Oracle`] wrapping a closure, with a query counter and optional budget.
pub struct QueryOracle {
    eval: Box<EvalFn>,
    domain: DomainSpec,
    input_dim: usize,
    output_dim: usize,
    counter: AtomicU64,
    budget: Option<u64>,
    teacher: Option<NetworkParams>,
}

impl QueryOracle {
    pub fn from_fn<F>(input_dim: usize, output_dim: usize, domain: DomainSpec, f: F) -> Self
    where
        F: Fn(&DVector<f64>) -> Result<DVector<f64>> + Send + Sync + 'static,
    {
        Self {
            eval: Box::new(f),
            domain,
            input_dim,
            output_dim,
            counter: AtomicU64::new(0),
            budget: None,
            teacher: None,
        }
    }

    /// Oracle answering with a known network, kept as the ground truth.
    pub fn from_params(params: NetworkParams, domain: DomainSpec) -> Self {
        let p = params.clone();
        let mut o = Self::from_fn(params.arch().input_dim(), params.arch().output_dim(), domain, move |x| {
            Ok(p.forward_unchecked(x))
        });
        o.teacher = Some(params);
        o
    }

    pub fn with_budget(mut self, budget: u64) -> Self {
        self.budget = Some(budget);
        self
    }

    pub fn teacher(&self) -> Option<&NetworkParams> {
        self.teacher.as_ref()
    }
}

impl Oracle for QueryOracle {
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn output_dim(&self) -> usize {
        self.output_dim
    }

    fn domain(&self) -> &DomainSpec {
        &self.domain
    }

    fn query(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.input_dim {
            return Err(Error::Shape(format!("query has length {}, expected {}", x.len(), self.input_dim)));
        }
        if !self.domain.contains(x) {
            return Err(Error::OutsideDomain);
        }
        take_query(&self.counter, self.budget)?;
        (self.eval)(x)
    }

    fn queries(&self) -> u64 {
        self.counter.load(Ordering::SeqCst)
    }
}

fn take_query(counter: &AtomicU64, budget: Option<u64>) -> Result<()> {
    match budget {
        None => {
            counter.fetch_add(1, Ordering::SeqCst);
            Ok(())
        }
        Some(b) => counter
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| (n < b).then_some(n + 1))
            .map(|_| ())
            .map_err(Error::BudgetExhausted),
    }
}

struct Worker {
    _child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

/// An [`Oracle`] backed by external processes speaking a line protocol: one
/// whitespace- or comma-separated input vector per line in, one output
/// vector per line out.
pub struct ProcessOracle {
    workers: Vec<Mutex<Worker>>,
    domain: DomainSpec,
    output_dim: usize,
    counter: AtomicU64,
    budget: Option<u64>,
}

impl ProcessOracle {
    /// Spawns `parallel` copies of `program args…`.
    pub fn spawn(program: &str, args: &[String], domain: DomainSpec, output_dim: usize, parallel: usize) -> Result<Self> {
        let mut workers = Vec::new();
        for _ in 0..parallel.max(1) {
            let mut child = Command::new(program)
                .args(args)
                .stdin(Stdio::piped())
                .stdout(Stdio::piped())
                .spawn()?;
            let stdin = child.stdin.take().ok_or_else(|| Error::Oracle("no stdin".into()))?;
            let stdout = BufReader::new(child.stdout.take().ok_or_else(|| Error::Oracle("no stdout".into()))?);
            workers.push(Mutex::new(Worker { _child: child, stdin, stdout }));
        }
        Ok(Self { workers, domain, output_dim, counter: AtomicU64::new(0), budget: None })
    }

    pub fn with_budget(mut self, budget: u64) -> Self {
        self.budget = Some(budget);
        self
    }

    fn ask(worker: &mut Worker, x: &DVector<f64>) -> Result<Vec<f64>> {
        let line: Vec<String> = x.iter().map(|v| format!("{v:?}")).collect();
        writeln!(worker.stdin, "{}", line.join(" "))?;
        worker.stdin.flush()?;
        let mut reply = String::new();
        if worker.stdout.read_line(&mut reply)? == 0 {
            return Err(Error::Oracle("oracle process closed its output".into()));
        }
        parse_vector_line(&reply)
    }
}

/// Parses one line of numbers separated by whitespace and/or commas.
pub fn parse_vector_line(line: &str) -> Result<Vec<f64>> {
    line.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|e| Error::Parse(format!("`{s}`: {e}"))))
        .collect()
}

impl Oracle for ProcessOracle {
    fn input_dim(&self) -> usize {
        self.domain.dim()
    }

    fn output_dim(&self) -> usize {
        self.output_dim
    }

    fn domain(&self) -> &DomainSpec {
        &self.domain
    }

    fn query(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if !self.domain.contains(x) {
            return Err(Error::OutsideDomain);
        }
        take_query(&self.counter, self.budget)?;
        loop {
            for w in &self.workers {
                if let Ok(mut guard) = w.try_lock() {
                    let y = Self::ask(&mut guard, x)?;
                    if y.len() != self.output_dim {
                        return Err(Error::Oracle(format!(
                            "oracle returned {} values, expected {}",
                            y.len(),
                            self.output_dim
                        )));
                    }
                    return Ok(DVector::from_vec(y));
                }
            }
            std::thread::yield_now();
        }
    }

    fn queries(&self) -> u64 {
        self.counter.load(Ordering::SeqCst)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TeacherMode {
    Gaussian,
    NormalizedGaussian,
}

/// Standard normal weights and biases, deterministic in `seed`.
pub fn make_teacher(arch: &Architecture, seed: u64, mode: TeacherMode) -> NetworkParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = (0..arch.depth())
        .rev()
        .map(|k| {
            let (r, c) = (arch.width(k), arch.width(k + 1));
            let m = DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal));
            let b = DVector::from_fn(r, |_, _| rng.sample(StandardNormal));
            Layer::new(m, b)
        })
        .collect();
    let params = NetworkParams::new(arch.clone(), layers).expect("shapes follow the architecture");
    match mode {
        TeacherMode::Gaussian => params,
        TeacherMode::NormalizedGaussian => normalize(&params).expect("gaussian rows are nonzero").0,
    }
}

/// Sup and mean of `‖f_1 − f_2‖_∞` over quasi-random points of a box.
#[derive(Clone, Copy, Debug)]
pub struct Distance {
    pub sup: f64,
    pub mean: f64,
}

pub fn functional_distance(p1: &NetworkParams, p2: &NetworkParams, domain: &DomainSpec, n: usize, seed: u64) -> Result<Distance> {
    if p1.arch().input_dim() != p2.arch().input_dim() || p1.arch().output_dim() != p2.arch().output_dim() {
        return Err(Error::Shape("networks have different input or output dimensions".into()));
    }
    let mut sup = 0.0f64;
    let mut sum = 0.0;
    for x in domain.halton_points(n, seed) {
        let gap = (p1.forward(&x)? - p2.forward(&x)?).amax();
        sup = sup.max(gap);
        sum += gap;
    }
    Ok(Distance { sup, mean: sum / n.max(1) as f64 })
}

/// Monte-Carlo risk estimate.
#[derive(Clone, Copy, Debug)]
pub struct RiskEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

pub type Loss = fn(&DVector<f64>, &DVector<f64>) -> f64;

pub fn squared_loss(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm_squared()
}

/// Risk of `student` against labels produced by `teacher` with inputs drawn
/// by `sample`.
pub fn estimate_risk_with<S>(teacher: &NetworkParams, student: &NetworkParams, mut sample: S, loss: Loss, n: usize, seed: u64) -> Result<RiskEstimate>
where
    S: FnMut(&mut ChaCha8Rng) -> DVector<f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n {
        let x = sample(&mut rng);
        let l = loss(&student.forward(&x)?, &teacher.forward(&x)?);
        sum += l;
        sum_sq += l * l;
    }
    let nf = n as f64;
    let mean = sum / nf;
    let var = ((sum_sq / nf - mean * mean) * nf / (nf - 1.0).max(1.0)).max(0.0);
    Ok(RiskEstimate { mean, stderr: (var / nf).sqrt(), n })
}

/// Squared-loss risk with inputs uniform on the box.
pub fn estimate_risk(teacher: &NetworkParams, student: &NetworkParams, domain: &DomainSpec, n: usize, seed: u64) -> Result<RiskEstimate> {
    let d = domain.clone();
    estimate_risk_with(
        teacher,
        student,
        move |rng| DVector::from_fn(d.dim(), |j, _| rng.gen_range(d.lo[j]..=d.hi[j])),
        squared_loss,
        n,
        seed,
    )
}

/// Quasi-random sampler over a box with a seeded shift.
pub fn halton_sampler(domain: &DomainSpec, seed: u64) -> impl FnMut() -> DVector<f64> + '_ {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut h = Halton::new(domain.dim(), &mut rng);
    move || h.next_in_box(&domain.lo, &domain.hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equivalence::{apply_transform, is_normalized, random_witness};
    use crate::oracle::catalog::{example2, ScenarioId};
    use nalgebra::dvector;

    #[test]
    fn teachers_are_deterministic() {
        let arch = Architecture::new(vec![3, 3, 2, 1]).unwrap();
        assert_eq!(make_teacher(&arch, 9, TeacherMode::Gaussian), make_teacher(&arch, 9, TeacherMode::Gaussian));
        assert_ne!(make_teacher(&arch, 9, TeacherMode::Gaussian), make_teacher(&arch, 10, TeacherMode::Gaussian));
        assert!(is_normalized(&make_teacher(&arch, 9, TeacherMode::NormalizedGaussian), 1e-12));
    }

    #[test]
    fn counter_and_domain() {
        let o = QueryOracle::from_params(example2(1.0), DomainSpec::new(vec![-5.0], vec![5.0]).unwrap());
        assert_eq!(o.query(&dvector![0.5]).unwrap()[0], 0.5);
        assert!(matches!(o.query(&dvector![6.0]), Err(Error::OutsideDomain)));
        assert_eq!(o.queries(), 1);
        let o = o.with_budget(2);
        o.query(&dvector![0.0]).unwrap();
        assert!(matches!(o.query(&dvector![0.0]), Err(Error::BudgetExhausted(2))));
        assert_eq!(o.queries(), 2);
    }

    #[test]
    fn concurrent_queries_are_counted() {
        use rayon::prelude::*;
        let o = QueryOracle::from_params(example2(1.0), DomainSpec::symmetric(1, 5.0));
        (0..1000).into_par_iter().for_each(|i| {
            o.query(&dvector![i as f64 / 1000.0]).unwrap();
        });
        assert_eq!(o.queries(), 1000);
    }

    #[test]
    fn distance_of_transformed_network_is_zero() {
        let arch = Architecture::new(vec![3, 4, 2]).unwrap();
        let p = make_teacher(&arch, 1, TeacherMode::Gaussian);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = apply_transform(&p, &random_witness(&p, &mut rng, 4.0)).unwrap();
        let d = functional_distance(&p, &q, &DomainSpec::symmetric(3, 5.0), 1000, 3).unwrap();
        assert!(d.sup <= 1e-9);
    }

    #[test]
    fn example2_pair_distance_depends_on_domain() {
        let s = catalog::scenario(ScenarioId::Ex2Pair);
        let d = functional_distance(&s.params[0], &s.params[1], &s.domain, 1000, 1).unwrap();
        assert!(d.sup <= 1e-12);
        let wide = DomainSpec::symmetric(1, 5.0);
        let d = functional_distance(&s.params[0], &s.params[1], &wide, 1000, 1).unwrap();
        assert!(d.sup >= 1.0 - 1e-9);
    }

    #[test]
    fn risk_of_equivalent_and_perturbed_students() {
        let arch = Architecture::new(vec![2, 2, 1]).unwrap();
        let t = make_teacher(&arch, 4, TeacherMode::Gaussian);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = apply_transform(&t, &random_witness(&t, &mut rng, 3.0)).unwrap();
        let dom = DomainSpec::symmetric(2, 10.0);
        let r = estimate_risk(&t, &s, &dom, 10_000, 6).unwrap();
        assert!(r.mean <= 1e-16 + 3.0 * r.stderr);
        let mut layers: Vec<Layer> = t.layers().to_vec();
        layers[1].bias[0] += 0.5;
        let pert = NetworkParams::new(arch, layers).unwrap();
        let r = estimate_risk(&t, &pert, &dom, 100_000, 7).unwrap();
        assert!(r.mean > 5.0 * r.stderr);
    }

    #[test]
    fn line_parser() {
        assert_eq!(parse_vector_line("1, 2.5  -3\n").unwrap(), vec![1.0, 2.5, -3.0]);
        assert!(parse_vector_line("1 x").is_err());
        assert!(parse_vector_line("").unwrap().is_empty());
    }
}
