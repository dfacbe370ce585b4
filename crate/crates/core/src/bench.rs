//! Wall-clock and work-counter benchmark of single attention calls, with
//! a log-log slope fit per mechanism.

use std::path::Path;
use std::time::Instant;

use crate::attention::{self, AttnCounters, LogBase};
use crate::error::{Error, Result};
use crate::lam::{self, LRule, LamOptions};
use crate::model::Mechanism;
use crate::ops::Eager;
use crate::random::{random_matrix, rng};
use crate::tensor::{Exec, Tensor};

pub const CSV_HEADER: [&str; 8] = [
    "mechanism",
    "n",
    "L",
    "d_model",
    "wall_ns",
    "dot_products",
    "peak_score_elements",
    "seed",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchRecord {
    pub mechanism: Mechanism,
    pub n: usize,
    /// Band size for `lam`; 0 for mechanisms without one.
    pub l: usize,
    pub d_model: usize,
    /// Median over the timed repetitions.
    pub wall_ns: u64,
    pub dot_products: u64,
    pub peak_score_elements: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Skipped {
    pub mechanism: Mechanism,
    pub n: usize,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub n_list: Vec<usize>,
    pub mechanisms: Vec<Mechanism>,
    pub l_rule: LRule,
    pub log_base: LogBase,
    pub d_model: usize,
    /// Timed repetitions after one untimed warm-up; at least 5.
    pub repeats: usize,
    pub seed: u64,
    /// Dense score matrices above this many bytes are skipped.
    pub max_score_bytes: u64,
    pub exec: Exec,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            n_list: vec![512, 1024, 2048, 4096, 8192, 16384],
            mechanisms: Mechanism::ALL.to_vec(),
            l_rule: LRule::Fixed(32),
            log_base: LogBase::Two,
            d_model: 16,
            repeats: 5,
            seed: 0,
            max_score_bytes: 3 << 30,
            exec: Exec::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchOutcome {
    pub records: Vec<BenchRecord>,
    pub skipped: Vec<Skipped>,
    /// Least-squares slope of `ln wall_ns` against `ln n`, per mechanism;
    /// `None` with fewer than two points.
    pub slopes: Vec<(Mechanism, Option<f64>)>,
}

impl BenchOutcome {
    pub fn slope(&self, m: Mechanism) -> Option<f64> {
        self.slopes.iter().find(|s| s.0 == m).and_then(|s| s.1)
    }
}

/// Ordinary least-squares slope of `y` on `x`.
pub fn fit_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let k = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / k;
    let my = points.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Slope of `ln wall_ns` against `ln n` for the records of `m`.
pub fn loglog_slope(records: &[BenchRecord], m: Mechanism) -> Option<f64> {
    let pts: Vec<(f64, f64)> = records
        .iter()
        .filter(|r| r.mechanism == m)
        .map(|r| ((r.n as f64).ln(), (r.wall_ns.max(1) as f64).ln()))
        .collect();
    fit_slope(&pts)
}

fn median(mut xs: Vec<u64>) -> u64 {
    xs.sort_unstable();
    let k = xs.len();
    if k % 2 == 1 {
        xs[k / 2]
    } else {
        (xs[k / 2 - 1] + xs[k / 2]) / 2
    }
}

/// One attention call of `mechanism`, returning its counters.
fn run_once(
    mechanism: Mechanism,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    l: usize,
    seed: u64,
    exec: Exec,
) -> Result<(Tensor, AttnCounters)> {
    let mut c = AttnCounters::default();
    let mut ops = Eager::new(exec);
    let out = match mechanism {
        Mechanism::Full => attention::full_attend(&mut ops, q, k, v, None, &mut c)?,
        Mechanism::Lam => lam::lam_attend(
            &mut ops,
            q,
            k,
            v,
            l,
            LamOptions {
                exec,
                mask_padding: true,
            },
            &mut c,
        )?,
        Mechanism::Prob => attention::prob_attend(&mut ops, q, k, v, seed, LogBase::Two, &mut c)?,
    };
    Ok((out, c))
}

/// Bytes of the largest score tensor `mechanism` materializes at length `n`.
pub fn score_bytes(mechanism: Mechanism, n: usize, l: usize) -> u64 {
    let n = n as u64;
    let elements = match mechanism {
        Mechanism::Full => n * n,
        Mechanism::Lam => n.div_ceil(l as u64) * l as u64 * (2 * l as u64 - 1),
        Mechanism::Prob => {
            let u = attention::prob_budget(n as usize, LogBase::Two) as u64;
            u * n
        }
    };
    elements * 8
}

pub fn bench_cell(mechanism: Mechanism, n: usize, opts: &BenchOptions) -> Result<BenchRecord> {
    let l = opts.l_rule.band(n, opts.log_base);
    let mut r = rng(opts.seed ^ (n as u64).wrapping_mul(0x9e37_79b9));
    let q = random_matrix(&mut r, n, opts.d_model);
    let k = random_matrix(&mut r, n, opts.d_model);
    let v = random_matrix(&mut r, n, opts.d_model);
    let (_, counters) = run_once(mechanism, &q, &k, &v, l, opts.seed, opts.exec)?;
    let mut times = Vec::with_capacity(opts.repeats);
    for _ in 0..opts.repeats.max(5) {
        let start = Instant::now();
        let out = run_once(mechanism, &q, &k, &v, l, opts.seed, opts.exec)?;
        let ns = start.elapsed().as_nanos().max(1) as u64;
        std::hint::black_box(out);
        times.push(ns);
    }
    Ok(BenchRecord {
        mechanism,
        n,
        l: if mechanism == Mechanism::Lam { l } else { 0 },
        d_model: opts.d_model,
        wall_ns: median(times),
        dot_products: counters.dot_products,
        peak_score_elements: counters.peak_score_elements,
        seed: opts.seed,
    })
}

/// Every `(mechanism, n)` cell in order. Cells whose score tensor would
/// exceed `max_score_bytes`, or whose allocation fails, are skipped with a
/// reason instead of aborting the run.
pub fn run(opts: &BenchOptions) -> Result<BenchOutcome> {
    if opts.n_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(format!(
            "n values must be strictly ascending: {:?}",
            opts.n_list
        )));
    }
    if opts.n_list.first() == Some(&0) || opts.d_model == 0 {
        return Err(Error::InvalidArgument(
            "n and d_model must be positive".into(),
        ));
    }
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for &m in &opts.mechanisms {
        for &n in &opts.n_list {
            let l = opts.l_rule.band(n, opts.log_base);
            let bytes = score_bytes(m, n, l);
            if bytes > opts.max_score_bytes {
                skipped.push(Skipped {
                    mechanism: m,
                    n,
                    reason: format!(
                        "score tensor needs {bytes} bytes, limit {}",
                        opts.max_score_bytes
                    ),
                });
                continue;
            }
            match bench_cell(m, n, opts) {
                Ok(rec) => records.push(rec),
                Err(Error::InvalidArgument(msg)) if msg.contains("allocate") => {
                    skipped.push(Skipped {
                        mechanism: m,
                        n,
                        reason: format!("out of memory: {msg}"),
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }
    let slopes = opts
        .mechanisms
        .iter()
        .map(|&m| (m, loglog_slope(&records, m)))
        .collect();
    Ok(BenchOutcome {
        records,
        skipped,
        slopes,
    })
}

pub fn write_csv(path: impl AsRef<Path>, records: &[BenchRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_records(file, records).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        e => e,
    })
}

pub fn write_records(out: impl std::io::Write, records: &[BenchRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::io("<bench csv>", e.into());
    w.write_record(CSV_HEADER).map_err(io)?;
    for r in records {
        w.write_record([
            r.mechanism.to_string(),
            r.n.to_string(),
            r.l.to_string(),
            r.d_model.to_string(),
            r.wall_ns.to_string(),
            r.dot_products.to_string(),
            r.peak_score_elements.to_string(),
            r.seed.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io("<bench csv>", e))
}

/// Peak resident set size of this process in bytes, where the platform exposes it.
pub fn peak_rss_bytes() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}
