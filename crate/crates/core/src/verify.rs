//! Self-checks run by `lam verify`: the local kernel against its dense
//! oracle, softmax masking, work counters, permutation behaviour, and
//! analytic gradients against finite differences.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::attention::{
    self, full_attend, masked_full_attention_counted, multi_head, permute_rows, Attention,
    AttnConfig, AttnCounters, HeadWeights,
};
use crate::autodiff::{finite_diff_grad, relative_error, Graph, NodeId};
use crate::error::{Error, Result};
use crate::lam::{self, lam_attend, BlockLayout, BlockedAttn, LamCounters, LamOptions};
use crate::model::{positional_encoding, ForecastModel, Mechanism, ModelConfig};
use crate::ops::Ops;
use crate::random::{random_matrix, random_permutation, rng, SeededRng};
use crate::tensor::{self, Exec, Tensor};

pub const EQUIVALENCE_TOL: f64 = 1e-10;
pub const ROW_SUM_TOL: f64 = 1e-12;
pub const GRADIENT_TOL: f64 = 1e-6;
pub const FD_STEP: f64 = 1e-5;
pub const EQUIVARIANCE_TOL: f64 = 1e-10;
pub const NON_EQUIVARIANCE_MIN: f64 = 1e-3;

/// Deliberate defects for checking that the suites notice them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Leave the padded key slots of block 0 unmasked.
    SkipPadMask,
}

impl FromStr for Fault {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "skip-pad-mask" => Ok(Fault::SkipPadMask),
            _ => Err(Error::InvalidArgument(format!(
                "unknown fault `{s}` (skip-pad-mask)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VerifyOptions {
    /// Randomized equivalence cases. Gradient suites run `⌈trials/10⌉`
    /// trials per check and the permutation suite `⌈trials/20⌉`.
    pub trials: usize,
    pub seed: u64,
    pub fault: Option<Fault>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            trials: 200,
            seed: 0,
            fault: None,
        }
    }
}

impl VerifyOptions {
    fn lam_options(&self) -> LamOptions {
        LamOptions {
            mask_padding: self.fault != Some(Fault::SkipPadMask),
            ..LamOptions::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub cases: usize,
    /// Worst observed value of the suite's measured quantity.
    pub worst: f64,
    pub tolerance: f64,
    /// One line per failing case.
    pub failures: Vec<String>,
}

impl fmt::Display for SuiteResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<14} {}  cases={:<5} worst={:.3e} tol={:.1e}",
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.cases,
            self.worst,
            self.tolerance
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub suites: Vec<SuiteResult>,
    pub warnings: Vec<String>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed)
    }
}

/// One randomized kernel case.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Case {
    pub n: usize,
    pub l: usize,
    pub d_q: usize,
    pub d_v: usize,
    pub seed: u64,
}

/// Hand-picked shapes that hit `L = 1`, `L = n`, `n < 2L` and `L ∤ n`.
pub fn edge_cases(seed: u64) -> Vec<Case> {
    [
        (2, 1),
        (2, 2),
        (3, 2),
        (7, 1),
        (7, 7),
        (7, 4),
        (12, 5),
        (16, 4),
        (100, 33),
        (128, 1),
        (128, 128),
        (127, 64),
    ]
    .iter()
    .enumerate()
    .map(|(i, &(n, l))| Case {
        n,
        l,
        d_q: 1 + i % 16,
        d_v: 16 - i % 16,
        seed: seed.wrapping_add(1_000_000 + i as u64),
    })
    .collect()
}

/// `trials` cases with `n ∈ [2,128]`, `L ∈ [1,n]`, `d_q, d_v ∈ [1,16]`.
pub fn random_cases(trials: usize, seed: u64) -> Vec<Case> {
    let mut r = rng(seed);
    (0..trials)
        .map(|k| {
            let n = r.random_range(2..=128);
            Case {
                n,
                l: r.random_range(1..=n),
                d_q: r.random_range(1..=16),
                d_v: r.random_range(1..=16),
                seed: seed.wrapping_add(k as u64),
            }
        })
        .collect()
}

fn case_inputs(c: &Case) -> (Tensor, Tensor, Tensor) {
    let mut r = rng(c.seed);
    let q = random_matrix(&mut r, c.n, c.d_q);
    let k = random_matrix(&mut r, c.n, c.d_q);
    let v = random_matrix(&mut r, c.n, c.d_v);
    (q, k, v)
}

/// Kernel-versus-oracle comparison of one case.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseOutcome {
    pub case: Case,
    pub max_dev: f64,
    /// Rows whose deviation exceeds the tolerance.
    pub bad_rows: Vec<usize>,
    pub lam: LamCounters,
    pub oracle: AttnCounters,
}

pub fn run_case(c: &Case, opts: LamOptions) -> Result<CaseOutcome> {
    let (q, k, v) = case_inputs(c);
    let mut lam_c = LamCounters::default();
    let mut oracle_c = AttnCounters::default();
    let got = lam::lam_forward_with(&q, &k, &v, c.l, &mut lam_c, opts)?;
    let want = masked_full_attention_counted(&q, &k, &v, c.l, &mut oracle_c)?;
    let mut max_dev: f64 = 0.0;
    let mut bad_rows = Vec::new();
    for i in 0..c.n {
        let dev = got
            .row(i)
            .iter()
            .zip(want.row(i))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if !(dev <= EQUIVALENCE_TOL) {
            bad_rows.push(i);
        }
        max_dev = max_dev.max(if dev.is_nan() { f64::INFINITY } else { dev });
    }
    Ok(CaseOutcome {
        case: *c,
        max_dev,
        bad_rows,
        lam: lam_c,
        oracle: oracle_c,
    })
}

fn all_cases(opts: &VerifyOptions) -> Vec<Case> {
    if opts.trials == 0 {
        return Vec::new();
    }
    let mut cases = edge_cases(opts.seed);
    cases.extend(random_cases(opts.trials, opts.seed));
    cases
}

fn summarize(
    name: &'static str,
    tolerance: f64,
    cases: usize,
    worst: f64,
    failures: Vec<String>,
) -> SuiteResult {
    SuiteResult {
        name,
        passed: failures.is_empty(),
        cases,
        worst,
        tolerance,
        failures,
    }
}

/// Blocked kernel against the dense band-masked oracle.
pub fn equivalence_suite(opts: &VerifyOptions) -> Result<SuiteResult> {
    let cases = all_cases(opts);
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    for c in &cases {
        let out = run_case(c, opts.lam_options())?;
        worst = worst.max(out.max_dev);
        if !out.bad_rows.is_empty() {
            failures.push(format!(
                "n={} L={} d_q={} d_v={}: max dev {:.3e} on rows {:?}",
                c.n, c.l, c.d_q, c.d_v, out.max_dev, out.bad_rows
            ));
        }
    }
    Ok(summarize(
        "equivalence",
        EQUIVALENCE_TOL,
        cases.len(),
        worst,
        failures,
    ))
}

/// Row sums of every softmax, and exact zeros wherever the band or the
/// start of the sequence rules a key out.
pub fn masking_suite(opts: &VerifyOptions) -> Result<SuiteResult> {
    let cases = all_cases(opts);
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    for c in &cases {
        let (q, k, v) = case_inputs(c);
        let blocked = BlockedAttn::new(&q, &k, &v, c.l, opts.lam_options())?;
        let ts = blocked.weights()?;
        let w = blocked.layout.key_width();
        let mut leaks = 0;
        let mut case_worst: f64 = 0.0;
        for r in 0..blocked.layout.s {
            for i1 in 0..c.l {
                let row = &ts.data()[(r * c.l + i1) * w..(r * c.l + i1 + 1) * w];
                case_worst = case_worst.max((row.iter().sum::<f64>() - 1.0).abs());
                for (j1, &p) in row.iter().enumerate() {
                    let allowed = (i1..i1 + c.l).contains(&j1) && lam::key_source(r, j1, c.l) >= 0;
                    if !allowed && p != 0.0 {
                        leaks += 1;
                    }
                }
            }
        }
        let mask = attention::band_mask(c.n, c.l)?;
        let mut scores = tensor::matmul_batched(&q, &k.transpose_last2()?)?;
        scores.add_inplace(&mask)?;
        let dense = tensor::softmax_lastdim(&scores)?;
        for i in 0..c.n {
            case_worst = case_worst.max((dense.row(i).iter().sum::<f64>() - 1.0).abs());
            for (j, &p) in dense.row(i).iter().enumerate() {
                if mask.at2(i, j) == f64::NEG_INFINITY && p != 0.0 {
                    leaks += 1;
                }
            }
        }
        worst = worst.max(case_worst);
        if leaks > 0 || !(case_worst <= ROW_SUM_TOL) {
            failures.push(format!(
                "n={} L={}: {leaks} nonzero weights on masked keys, row-sum error {case_worst:.3e}",
                c.n, c.l
            ));
        }
    }
    Ok(summarize(
        "masking",
        ROW_SUM_TOL,
        cases.len(),
        worst,
        failures,
    ))
}

/// Exact dot-product and score-element counts.
pub fn counter_suite(opts: &VerifyOptions) -> Result<SuiteResult> {
    let cases = all_cases(opts);
    let mut failures = Vec::new();
    let mut worst: f64 = 0.0;
    for c in &cases {
        let out = run_case(c, opts.lam_options())?;
        let lay = BlockLayout::new(c.n, c.l)?;
        let (n, l) = (c.n as u64, c.l as u64);
        let rho = lay.remainder as u64;
        let expected_peak = lay.s as u64 * l * (2 * l - 1) + rho * (rho + l - 1);
        let mut bad = Vec::new();
        if c.n % c.l == 0 && out.lam.dot_products != (2 * l - 1) * n {
            bad.push(format!(
                "dot products {} ≠ (2L−1)n = {}",
                out.lam.dot_products,
                (2 * l - 1) * n
            ));
        }
        if out.lam.dot_products > (2 * l - 1) * (n + l) {
            bad.push(format!(
                "dot products {} > (2L−1)(n+L)",
                out.lam.dot_products
            ));
        }
        if out.lam.peak_score_elements != expected_peak || out.lam.dot_products != expected_peak {
            bad.push(format!(
                "peak {} / dots {} ≠ sL(2L−1) + ρ(ρ+L−1) = {expected_peak}",
                out.lam.peak_score_elements, out.lam.dot_products
            ));
        }
        if out.oracle.dot_products != n * n || out.oracle.peak_score_elements != n * n {
            bad.push(format!(
                "oracle counted {:?}, expected n² = {}",
                out.oracle,
                n * n
            ));
        }
        worst = worst.max(out.lam.dot_products as f64 / ((2 * l - 1) * n) as f64);
        if !bad.is_empty() {
            failures.push(format!("n={} L={}: {}", c.n, c.l, bad.join("; ")));
        }
    }
    Ok(summarize("counters", 1.0, cases.len(), worst, failures))
}

/// Outcome of one permutation trial.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PermutationTrial {
    pub full_dev: f64,
    pub lam_dev: f64,
}

/// `MH(πX) − π·MH(X)` for full and local multi-head attention on one
/// random input and permutation.
pub fn permutation_trial(seed: u64) -> Result<PermutationTrial> {
    let mut r = rng(seed);
    let n = r.random_range(6..=32);
    let d = 8;
    let cfg = AttnConfig::new(n, d, d, r.random_range(2..=n / 2), 2)?;
    let w = HeadWeights::random(&cfg, &mut r);
    let x = random_matrix(&mut r, n, d);
    let pi = loop {
        let p = random_permutation(&mut r, n);
        if p.iter().enumerate().any(|(i, &v)| i != v) {
            break p;
        }
    };
    let px = permute_rows(&x, &pi)?;
    let dev = |kind: Attention| -> Result<f64> {
        let a = multi_head(&px, &px, &px, &w, kind)?;
        let b = permute_rows(&multi_head(&x, &x, &x, &w, kind)?, &pi)?;
        a.max_abs_diff(&b)
    };
    Ok(PermutationTrial {
        full_dev: dev(Attention::Full)?,
        lam_dev: dev(Attention::lam(cfg.l))?,
    })
}

fn ceil_div(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

/// Full attention commutes with row permutations; the local mechanism
/// generally does not (at least 90% of trials must show it).
pub fn equivariance_suite(opts: &VerifyOptions) -> Result<SuiteResult> {
    let trials = ceil_div(opts.trials, 20);
    let mut worst: f64 = 0.0;
    let mut broken = 0;
    let mut failures = Vec::new();
    for t in 0..trials {
        let out = permutation_trial(opts.seed.wrapping_add(500 + t as u64))?;
        worst = worst.max(out.full_dev);
        if !(out.full_dev <= EQUIVARIANCE_TOL) {
            failures.push(format!(
                "trial {t}: full attention deviates by {:.3e}",
                out.full_dev
            ));
        }
        if out.lam_dev > NON_EQUIVARIANCE_MIN {
            broken += 1;
        }
    }
    if trials > 0 && broken * 10 < trials * 9 {
        failures.push(format!(
            "local attention non-equivariant in only {broken}/{trials} trials"
        ));
    }
    Ok(summarize(
        "equivariance",
        EQUIVARIANCE_TOL,
        trials,
        worst,
        failures,
    ))
}

/// `PE(0,·) = 1`, amplitude bound, and loss of equivariance once PE is added.
pub fn positional_suite(opts: &VerifyOptions) -> Result<SuiteResult> {
    let trials = ceil_div(opts.trials, 20);
    let mut failures = Vec::new();
    let mut worst: f64 = f64::INFINITY;
    for t in 0..trials {
        let mut r = rng(opts.seed.wrapping_add(900 + t as u64));
        let (n, d_model) = (r.random_range(4..=32), 2 * r.random_range(2..=4));
        let pe = positional_encoding(n, d_model);
        if pe.row(0).iter().any(|&v| v != 1.0) || pe.data().iter().any(|v| v.abs() > 2f64.sqrt()) {
            failures.push(format!("trial {t}: PE value contract violated"));
        }
        let dev = pe_equivariance_gap(n, d_model, r.random())?;
        worst = worst.min(dev.with_pe);
        if !(dev.without_pe <= EQUIVARIANCE_TOL) || !(dev.with_pe > 1e-6) {
            failures.push(format!(
                "trial {t}: deviation without PE {:.3e}, with PE {:.3e}",
                dev.without_pe, dev.with_pe
            ));
        }
    }
    Ok(summarize(
        "positional",
        1e-6,
        trials,
        if trials == 0 { 0.0 } else { worst },
        failures,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeGap {
    pub without_pe: f64,
    pub with_pe: f64,
}

/// Permutation deviation of the model's pre-projection output, with and
/// without positional encoding, for full attention.
pub fn pe_equivariance_gap(n: usize, d_model: usize, seed: u64) -> Result<PeGap> {
    let mut cfg = ModelConfig::new(Mechanism::Full, 2, d_model, 1, n, 1, 2);
    cfg.seed = seed;
    let mut r = rng(seed ^ 0xa5a5);
    let x = random_matrix(&mut r, n, 2);
    let pi = random_permutation(&mut r, n);
    let px = permute_rows(&x, &pi)?;
    let mut gap = |pe: bool| -> Result<f64> {
        cfg.positional_encoding = pe;
        let model = ForecastModel::new(cfg)?;
        let a = model.forward_hidden(&px)?;
        let b = permute_rows(&model.forward_hidden(&x)?, &pi)?;
        a.max_abs_diff(&b)
    };
    Ok(PeGap {
        without_pe: gap(false)?,
        with_pe: gap(true)?,
    })
}

type Builder = dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>;

/// Largest relative error between tape gradients and central differences
/// of `mse(build(inputs), target)` over every input.
pub fn graph_gradient_error(inputs: &[Tensor], target_seed: u64, build: &Builder) -> Result<f64> {
    let eval =
        |xs: &[Tensor], target: Option<&Tensor>| -> Result<(Graph, Vec<NodeId>, NodeId, Tensor)> {
            let mut g = Graph::new();
            let ids: Vec<NodeId> = xs.iter().map(|t| g.param(t)).collect();
            let out = build(&mut g, &ids)?;
            let target = match target {
                Some(t) => t.clone(),
                None => {
                    let shape = g.get(out).shape().to_vec();
                    let mut r = rng(target_seed);
                    let data = (0..shape.iter().product())
                        .map(|_| r.random_range(-1.0..1.0))
                        .collect();
                    Tensor::new(shape, data)?
                }
            };
            let loss = g.mse(out, &target)?;
            Ok((g, ids, loss, target))
        };
    let (g, ids, loss, target) = eval(inputs, None)?;
    let grads = g.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (k, id) in ids.iter().enumerate() {
        let analytic = grads
            .get(*id)
            .ok_or_else(|| Error::Contract("missing gradient".into()))?;
        let numeric = finite_diff_grad(
            |t| {
                let mut xs = inputs.to_vec();
                xs[k] = t.clone();
                eval(&xs, Some(&target)).map_or(f64::NAN, |(g, _, loss, _)| g.get(loss).data()[0])
            },
            &inputs[k],
            FD_STEP,
        )?;
        worst = worst.max(relative_error(analytic, &numeric)?);
    }
    Ok(worst)
}

/// The differentiable operations and attention kernels, each as a graph
/// builder with random inputs of matching shapes.
pub fn gradient_checks(r: &mut SeededRng) -> Vec<(&'static str, Vec<Tensor>, Box<Builder>)> {
    let mut m = |rows: usize, cols: usize| random_matrix(r, rows, cols);
    let batched =
        |t: Tensor, s: usize, a: usize, b: usize| t.reshape(&[s, a, b]).expect("sizes match");
    let lam_n = 7;
    let mut checks: Vec<(&'static str, Vec<Tensor>, Box<Builder>)> = vec![
        (
            "matmul",
            vec![m(3, 4), m(4, 2)],
            Box::new(|g: &mut Graph, x: &[NodeId]| g.matmul(&x[0], &x[1])),
        ),
        (
            "matmul_batched",
            vec![batched(m(6, 4), 2, 3, 4), batched(m(8, 2), 2, 4, 2)],
            Box::new(|g: &mut Graph, x: &[NodeId]| g.matmul(&x[0], &x[1])),
        ),
        (
            "transpose",
            vec![batched(m(6, 4), 2, 3, 4)],
            Box::new(|g: &mut Graph, x: &[NodeId]| g.transpose(&x[0])),
        ),
        (
            "reshape",
            vec![m(4, 3)],
            Box::new(|g: &mut Graph, x: &[NodeId]| g.reshape(x[0], &[2, 6])),
        ),
        (
            "gather_rows",
            vec![m(5, 3)],
            Box::new(|g: &mut Graph, x: &[NodeId]| {
                g.gather_rows(&x[0], &[-2, -1, 0, 3, 3, 4, 1], 0.0)
            }),
        ),
        (
            "concat_rows",
            vec![m(2, 3), m(4, 3)],
            Box::new(|g: &mut Graph, x: &[NodeId]| g.concat_rows(&[x[0], x[1]])),
        ),
        (
            "concat_cols",
            vec![m(3, 2), m(3, 4)],
            Box::new(|g: &mut Graph, x: &[NodeId]| g.concat_cols(&[x[0], x[1]])),
        ),
        (
            "add",
            vec![m(3, 4), m(3, 4)],
            Box::new(|g: &mut Graph, x: &[NodeId]| g.add(x[0], &x[1])),
        ),
        (
            "add_bias",
            vec![m(3, 4), m(1, 4).reshape(&[4]).expect("4 entries")],
            Box::new(|g: &mut Graph, x: &[NodeId]| g.add_bias(x[0], &x[1])),
        ),
        (
            "scale",
            vec![m(3, 4)],
            Box::new(|g: &mut Graph, x: &[NodeId]| Ok(g.scale(x[0], -0.7))),
        ),
        (
            "softmax",
            vec![m(4, 5)],
            Box::new(|g: &mut Graph, x: &[NodeId]| g.softmax(x[0])),
        ),
        (
            "masked_softmax",
            vec![m(4, 4)],
            Box::new(|g: &mut Graph, x: &[NodeId]| {
                let masked = g.add_const(x[0], &attention::band_mask(4, 2)?)?;
                g.softmax(masked)
            }),
        ),
        (
            "leaky_relu",
            vec![m(4, 5)],
            Box::new(|g: &mut Graph, x: &[NodeId]| Ok(g.leaky_relu(x[0], 0.1))),
        ),
        (
            "sum_mean",
            vec![m(3, 3)],
            Box::new(|g: &mut Graph, x: &[NodeId]| {
                let s = g.sum(x[0]);
                let s = g.reshape(s, &[1, 1])?;
                let mu = g.mean(x[0]);
                let mu = g.reshape(mu, &[1, 1])?;
                g.concat_rows(&[s, mu])
            }),
        ),
        (
            "full_attention",
            vec![m(6, 3), m(6, 3), m(6, 2)],
            Box::new(|g: &mut Graph, x: &[NodeId]| {
                full_attend(g, &x[0], &x[1], &x[2], None, &mut AttnCounters::default())
            }),
        ),
    ];
    checks.push((
        "lam_attention",
        vec![m(lam_n, 3), m(lam_n, 3), m(lam_n, 2)],
        Box::new(|g: &mut Graph, x: &[NodeId]| {
            lam_attend(
                g,
                &x[0],
                &x[1],
                &x[2],
                3,
                LamOptions::default(),
                &mut LamCounters::default(),
            )
        }),
    ));
    checks
}

/// Tape gradients of the tiny forecaster against finite differences, or
/// `None` when the sample sits within one step of a LeakyReLU kink: there the
/// loss is not differentiable across `[x−h, x+h]` and the central difference
/// measures the kink, not the gradient. Detected by a second difference at
/// `h/100` that disagrees with the first; a wrong analytic gradient still
/// shows, since both differences then agree with each other.
pub fn model_gradient_check(mechanism: Mechanism, seed: u64) -> Result<Option<f64>> {
    let mut cfg = ModelConfig::new(mechanism, 2, 4, 1, 8, 2, 2);
    cfg.l = 3;
    cfg.seed = seed;
    let model = ForecastModel::new(cfg)?;
    let mut r = rng(seed ^ 0x77);
    let x = random_matrix(&mut r, 8, 2);
    let target = random_matrix(&mut r, 2, 2);
    let (_, _, grads) = model.loss_and_grads(&x, &target)?;
    let tensors: Vec<Tensor> = model
        .params
        .named()
        .into_iter()
        .map(|(_, t)| t.clone())
        .collect();
    let grads = grads.named();
    let mut worst: f64 = 0.0;
    for k in 0..tensors.len() {
        let numeric = |h: f64| {
            finite_diff_grad(
                |t| {
                    let mut ts = tensors.clone();
                    ts[k] = t.clone();
                    let run = || -> Result<f64> {
                        let m = ForecastModel {
                            config: cfg,
                            params: model.params.with_tensors(ts)?,
                        };
                        crate::data::mse(
                            &m.forward_with(&x, cfg.attention(), Exec::Sequential)?,
                            &target,
                        )
                    };
                    run().unwrap_or(f64::NAN)
                },
                &tensors[k],
                h,
            )
        };
        let coarse = numeric(FD_STEP)?;
        if relative_error(&numeric(FD_STEP / 100.0)?, &coarse)? > GRADIENT_TOL {
            return Ok(None);
        }
        worst = worst.max(relative_error(grads[k].1, &coarse)?);
    }
    Ok(Some(worst))
}

/// [`model_gradient_check`] on `seed`, redrawing past kink-straddling
/// samples. Returns the error and how many samples were redrawn.
pub fn model_gradient_error(mechanism: Mechanism, seed: u64) -> Result<(f64, usize)> {
    for redraws in 0..100 {
        let s = seed.wrapping_add(redraws as u64 * 0x1_0000_0001);
        if let Some(err) = model_gradient_check(mechanism, s)? {
            return Ok((err, redraws));
        }
    }
    Err(Error::Contract(format!(
        "every sample near seed {seed} straddles a kink"
    )))
}

pub fn gradient_suite(opts: &VerifyOptions) -> Result<SuiteResult> {
    let trials = ceil_div(opts.trials, 10);
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    let mut cases = 0;
    for t in 0..trials {
        let seed = opts.seed.wrapping_add(2000 + t as u64);
        let mut r = rng(seed);
        for (name, inputs, build) in gradient_checks(&mut r) {
            let err = graph_gradient_error(&inputs, seed, build.as_ref())?;
            cases += 1;
            worst = worst.max(err);
            if !(err <= GRADIENT_TOL) {
                failures.push(format!("trial {t} {name}: relative error {err:.3e}"));
            }
        }
        for mech in [Mechanism::Full, Mechanism::Lam] {
            let (err, _) = model_gradient_error(mech, seed)?;
            cases += 1;
            worst = worst.max(err);
            if !(err <= GRADIENT_TOL) {
                failures.push(format!("trial {t} model/{mech}: relative error {err:.3e}"));
            }
        }
    }
    Ok(summarize("gradients", GRADIENT_TOL, cases, worst, failures))
}

/// Every suite, in a fixed order.
pub fn run_all(opts: &VerifyOptions) -> Result<VerifyReport> {
    let mut warnings = Vec::new();
    if opts.trials == 0 {
        warnings.push("trials = 0: no cases run, every suite passes vacuously".to_string());
    }
    if let Some(fault) = opts.fault {
        warnings.push(format!("fault injected: {fault:?}"));
    }
    let suites = vec![
        equivalence_suite(opts)?,
        masking_suite(opts)?,
        counter_suite(opts)?,
        equivariance_suite(opts)?,
        positional_suite(opts)?,
        gradient_suite(opts)?,
    ];
    Ok(VerifyReport { suites, warnings })
}
