//! Series sources, standardization, chronological splits, sliding windows
//! and the error metrics.

use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::random;
use crate::tensor::Tensor;

/// A multivariate series, time along rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub names: Vec<String>,
    /// `length × d`.
    pub values: Tensor,
}

impl Series {
    pub fn new(names: Vec<String>, values: Tensor) -> Result<Self> {
        let (_, d) = values.dims2("Series")?;
        if names.len() != d {
            return Err(Error::InvalidArgument(format!(
                "{} names for {d} features",
                names.len()
            )));
        }
        Ok(Self { names, values })
    }

    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn features(&self) -> usize {
        self.values.shape()[1]
    }

    /// The last `rows` samples.
    pub fn tail(&self, rows: usize) -> Result<Tensor> {
        if rows > self.len() {
            return Err(Error::TooShort {
                length: self.len(),
                msg: format!("need at least {rows} rows"),
            });
        }
        let d = self.features();
        let start = (self.len() - rows) * d;
        Tensor::new(vec![rows, d], self.values.data()[start..].to_vec())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    Sines,
    TrendSeason,
    ArNoise,
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sines" => Ok(SynthKind::Sines),
            "trend_season" => Ok(SynthKind::TrendSeason),
            "ar_noise" => Ok(SynthKind::ArNoise),
            _ => Err(Error::InvalidArgument(format!(
                "unknown series kind `{s}` (sines, trend_season, ar_noise)"
            ))),
        }
    }
}

/// Default additive noise level of each generator.
pub fn default_noise(kind: SynthKind) -> f64 {
    match kind {
        SynthKind::Sines => 0.1,
        SynthKind::TrendSeason => 0.1,
        SynthKind::ArNoise => 1.0,
    }
}

pub fn synth_series(kind: SynthKind, length: usize, d: usize, seed: u64) -> Series {
    synth_series_with_noise(kind, length, d, seed, default_noise(kind))
}

/// Deterministic synthetic series.
///
/// * `sines`: per feature, three sinusoids with periods `12·(1+f/10)·{1, √5, π}`.
/// * `trend_season`: one daily-like season (period 24) plus linear drift.
/// * `ar_noise`: `x_t = 0.8·x_{t−1} + ε_t`.
pub fn synth_series_with_noise(
    kind: SynthKind,
    length: usize,
    d: usize,
    seed: u64,
    noise: f64,
) -> Series {
    let mut rng = random::rng(seed);
    let normal = Normal::new(0.0, noise.max(0.0)).expect("finite std");
    let mut values = vec![0.0; length * d];
    for f in 0..d {
        let base = 12.0 * (1.0 + f as f64 / 10.0);
        let periods = [base, base * 5f64.sqrt(), base * std::f64::consts::PI];
        let amps = [1.0, 0.6, 0.4];
        let phases: Vec<f64> = (0..3)
            .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
            .collect();
        let slope = rng.random_range(-2.0..2.0) / length.max(1) as f64;
        let mut prev = 0.0;
        for t in 0..length {
            let tf = t as f64;
            let wave =
                |k: usize| amps[k] * (std::f64::consts::TAU * tf / periods[k] + phases[k]).sin();
            let eps = if noise > 0.0 {
                normal.sample(&mut rng)
            } else {
                0.0
            };
            let x = match kind {
                SynthKind::Sines => wave(0) + wave(1) + wave(2) + eps,
                SynthKind::TrendSeason => {
                    (std::f64::consts::TAU * tf / 24.0 + phases[0]).sin() + slope * tf + eps
                }
                SynthKind::ArNoise => {
                    prev = 0.8 * prev + eps;
                    prev
                }
            };
            values[t * d + f] = x;
        }
    }
    let names = (0..d).map(|f| format!("x{f}")).collect();
    Series {
        names,
        values: Tensor::from_parts(vec![length, d], values),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DroppedRow {
    /// 1-based line number in the file.
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct CsvData {
    pub series: Series,
    pub has_timestamp: bool,
    pub dropped: Vec<DroppedRow>,
}

/// Reads a CSV with one header row. A first column whose first data cell
/// is not numeric is taken as a timestamp and skipped. Rows with any
/// non-numeric or non-finite cell are dropped and reported.
pub fn load_csv(path: impl AsRef<Path>) -> Result<CsvData> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let headers = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    let width = headers.len();

    let mut has_timestamp = None;
    let mut values = Vec::new();
    let mut dropped = Vec::new();
    let mut rows = 0;
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != width {
            return Err(parse_err(
                line,
                format!("ragged row: {} fields, header has {width}", rec.len()),
            ));
        }
        let skip = *has_timestamp
            .get_or_insert_with(|| rec.get(0).is_some_and(|c| c.parse::<f64>().is_err()));
        let start = usize::from(skip);
        let parsed: std::result::Result<Vec<f64>, String> = rec
            .iter()
            .skip(start)
            .map(|c| match c.parse::<f64>() {
                Ok(x) if x.is_finite() => Ok(x),
                _ => Err(format!("non-numeric cell `{c}`")),
            })
            .collect();
        match parsed {
            Ok(row) => {
                values.extend(row);
                rows += 1;
            }
            Err(reason) => dropped.push(DroppedRow { line, reason }),
        }
    }
    let has_timestamp = has_timestamp.unwrap_or(false);
    let d = width - usize::from(has_timestamp);
    if d == 0 {
        return Err(parse_err(1, "no numeric columns".into()));
    }
    let names = headers
        .iter()
        .skip(usize::from(has_timestamp))
        .map(str::to_string)
        .collect();
    Ok(CsvData {
        series: Series::new(names, Tensor::from_parts(vec![rows, d], values))?,
        has_timestamp,
        dropped,
    })
}

/// Writes a header of `names` followed by the rows of `values`.
pub fn write_csv(path: impl AsRef<Path>, names: &[String], values: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let (_, d) = values.dims2("write_csv")?;
    if names.len() != d {
        return Err(Error::InvalidArgument(format!(
            "{} names for {d} columns",
            names.len()
        )));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let io = |e: csv::Error| Error::io(path, e.into());
    w.write_record(names).map_err(io)?;
    for row in values.data().chunks(d) {
        w.write_record(row.iter().map(|x| x.to_string()))
            .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Per-feature affine standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct Scaler {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl Scaler {
    pub fn identity(d: usize) -> Self {
        Self {
            means: vec![0.0; d],
            stds: vec![1.0; d],
        }
    }

    /// Fits mean and population standard deviation on `rows` of `x`.
    pub fn fit(x: &Tensor, rows: Range<usize>) -> Result<Self> {
        let (_, d) = x.dims2("Scaler::fit")?;
        let count = rows.len() as f64;
        if rows.is_empty() {
            return Err(Error::InvalidArgument(
                "cannot fit a scaler on zero rows".into(),
            ));
        }
        let mut means = vec![0.0; d];
        for i in rows.clone() {
            means.iter_mut().zip(x.row(i)).for_each(|(m, v)| *m += v);
        }
        means.iter_mut().for_each(|m| *m /= count);
        let mut vars = vec![0.0; d];
        for i in rows {
            for (f, v) in x.row(i).iter().enumerate() {
                vars[f] += (v - means[f]).powi(2);
            }
        }
        let mut stds = Vec::with_capacity(d);
        for (index, v) in vars.into_iter().enumerate() {
            let std = (v / count).sqrt();
            if !(std > 1e-12 * means[index].abs().max(1.0)) {
                return Err(Error::ZeroVariance { index });
            }
            stds.push(std);
        }
        Ok(Self { means, stds })
    }

    pub fn transform(&self, x: &Tensor) -> Result<Tensor> {
        self.apply(x, |v, m, s| (v - m) / s)
    }

    pub fn inverse(&self, x: &Tensor) -> Result<Tensor> {
        self.apply(x, |v, m, s| v * s + m)
    }

    fn apply(&self, x: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor> {
        let (_, d) = x.dims2("Scaler")?;
        if d != self.means.len() {
            return Err(Error::InvalidArgument(format!(
                "scaler has {} features, input has {d}",
                self.means.len()
            )));
        }
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(d) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = f(*v, self.means[j], self.stds[j]);
            }
        }
        Ok(out)
    }
}

/// Chronological split: the first `train` fraction is for fitting, of
/// which the last `val_of_train` share is held out for validation; the rest
/// is test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fractions {
    pub train: f64,
    pub val_of_train: f64,
}

impl Default for Fractions {
    fn default() -> Self {
        Self {
            train: 0.7,
            val_of_train: 0.15,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    /// Input length.
    pub n: usize,
    /// Forecast horizon.
    pub m: usize,
    pub train_stride: usize,
    /// Stride on validation and test; `m` gives non-overlapping forecasts.
    pub eval_stride: usize,
}

impl WindowSpec {
    pub fn new(n: usize, m: usize) -> Self {
        Self {
            n,
            m,
            train_stride: 1,
            eval_stride: m.max(1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn idx(self) -> usize {
        self as usize
    }
}

/// `⌊(len − n − m)/stride⌋ + 1` windows fit in a split of length `len`.
pub fn window_count(len: usize, n: usize, m: usize, stride: usize) -> usize {
    if len < n + m || stride == 0 {
        0
    } else {
        (len - n - m) / stride + 1
    }
}

/// Standardized series cut into `(input, target)` windows per split.
#[derive(Debug, Clone)]
pub struct WindowedDataset {
    pub names: Vec<String>,
    /// Standardized values, `length × d`.
    pub data: Tensor,
    pub spec: WindowSpec,
    pub fractions: Fractions,
    pub scaler: Scaler,
    ranges: [Range<usize>; 3],
    starts: [Vec<usize>; 3],
}

fn split_ranges(len: usize, fr: Fractions) -> Result<[Range<usize>; 3]> {
    let ok = (0.0..=1.0).contains(&fr.train) && (0.0..1.0).contains(&fr.val_of_train);
    if !ok {
        return Err(Error::InvalidArgument(format!(
            "bad split fractions {fr:?}"
        )));
    }
    let fit_end = (len as f64 * fr.train).floor() as usize;
    let val_len = (fit_end as f64 * fr.val_of_train).floor() as usize;
    let train_end = fit_end - val_len;
    Ok([0..train_end, train_end..fit_end, fit_end..len])
}

impl WindowedDataset {
    /// Fits the scaler on the training split only and applies it everywhere.
    pub fn standardize_split_window(
        raw: &Series,
        spec: WindowSpec,
        fractions: Fractions,
    ) -> Result<Self> {
        let ranges = split_ranges(raw.len(), fractions)?;
        let scaler = Scaler::fit(&raw.values, ranges[0].clone()).map_err(|e| match e {
            Error::InvalidArgument(_) => Error::TooShort {
                length: raw.len(),
                msg: "empty training split".into(),
            },
            e => e,
        })?;
        let data = scaler.transform(&raw.values)?;
        Self::build(raw.names.clone(), data, spec, fractions, scaler, ranges)
    }

    /// Uses `series` as already standardized (identity scaler).
    pub fn from_standardized(
        series: &Series,
        spec: WindowSpec,
        fractions: Fractions,
    ) -> Result<Self> {
        let ranges = split_ranges(series.len(), fractions)?;
        let scaler = Scaler::identity(series.features());
        Self::build(
            series.names.clone(),
            series.values.clone(),
            spec,
            fractions,
            scaler,
            ranges,
        )
    }

    fn build(
        names: Vec<String>,
        data: Tensor,
        spec: WindowSpec,
        fractions: Fractions,
        scaler: Scaler,
        ranges: [Range<usize>; 3],
    ) -> Result<Self> {
        if spec.n == 0 || spec.m == 0 || spec.train_stride == 0 || spec.eval_stride == 0 {
            return Err(Error::InvalidArgument(format!("bad window spec {spec:?}")));
        }
        let starts = [0, 1, 2].map(|s| {
            let r: &Range<usize> = &ranges[s];
            let stride = if s == 0 {
                spec.train_stride
            } else {
                spec.eval_stride
            };
            let count = window_count(r.len(), spec.n, spec.m, stride);
            (0..count).map(|k| r.start + k * stride).collect::<Vec<_>>()
        });
        if starts[0].is_empty() {
            return Err(Error::TooShort {
                length: data.shape()[0],
                msg: format!(
                    "training split of {} rows holds no window of n + m = {}",
                    ranges[0].len(),
                    spec.n + spec.m
                ),
            });
        }
        Ok(Self {
            names,
            data,
            spec,
            fractions,
            scaler,
            ranges,
            starts,
        })
    }

    pub fn features(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn range(&self, split: Split) -> Range<usize> {
        self.ranges[split.idx()].clone()
    }

    pub fn starts(&self, split: Split) -> &[usize] {
        &self.starts[split.idx()]
    }

    pub fn len(&self, split: Split) -> usize {
        self.starts[split.idx()].len()
    }

    pub fn is_empty(&self, split: Split) -> bool {
        self.len(split) == 0
    }

    fn rows(&self, start: usize, count: usize) -> Tensor {
        let d = self.features();
        Tensor::from_parts(
            vec![count, d],
            self.data.data()[start * d..(start + count) * d].to_vec(),
        )
    }

    /// Window `k` of `split`: `(n×d input, m×d target)`.
    pub fn window(&self, split: Split, k: usize) -> (Tensor, Tensor) {
        let s = self.starts[split.idx()][k];
        (
            self.rows(s, self.spec.n),
            self.rows(s + self.spec.n, self.spec.m),
        )
    }

    /// Plain-text description of the windowing and scaling.
    pub fn manifest(&self) -> String {
        let join = |v: &[f64]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut s = String::new();
        let _ = writeln!(s, "n={}", self.spec.n);
        let _ = writeln!(s, "m={}", self.spec.m);
        let _ = writeln!(s, "stride={}", self.spec.train_stride);
        let _ = writeln!(s, "eval_stride={}", self.spec.eval_stride);
        let _ = writeln!(
            s,
            "fractions={},{}",
            self.fractions.train, self.fractions.val_of_train
        );
        let _ = writeln!(s, "features={}", self.names.join(","));
        let _ = writeln!(s, "scaler_means={}", join(&self.scaler.means));
        let _ = writeln!(s, "scaler_stds={}", join(&self.scaler.stds));
        for (name, split) in [
            ("train", Split::Train),
            ("val", Split::Val),
            ("test", Split::Test),
        ] {
            let r = self.range(split);
            let _ = writeln!(s, "{name}_rows={}..{}", r.start, r.end);
            let _ = writeln!(s, "{name}_windows={}", self.len(split));
        }
        s
    }
}

fn check_same(pred: &Tensor, target: &Tensor, op: &'static str) -> Result<()> {
    pred.same_shape(target, op)
}

pub fn mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    check_same(pred, target, "mse")?;
    let n = pred.numel().max(1) as f64;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / n)
}

pub fn mae(pred: &Tensor, target: &Tensor) -> Result<f64> {
    check_same(pred, target, "mae")?;
    let n = pred.numel().max(1) as f64;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n)
}
