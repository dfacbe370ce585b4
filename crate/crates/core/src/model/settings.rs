//! Flat `key=value` training configuration.
//!
//! ```text
//! # comment
//! kind=lam
//! n=96
//! m=24
//! L=28
//! ```
//!
//! Recognised keys: `kind n m d_model N h L lr epochs batch seed`, plus
//! `alpha wiring patience stride eval_stride pe`. `L` defaults to
//! `4⌈log₂ n⌉`, `eval_stride` to `m`.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use super::{CrossWiring, Mechanism, ModelConfig};
use crate::data::WindowSpec;
use crate::error::{Error, Result};
use crate::lam::default_l;
use crate::model::train::TrainOptions;
use crate::tensor::Exec;

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub mechanism: Mechanism,
    pub n: usize,
    pub m: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub l: Option<usize>,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub alpha: f64,
    pub wiring: CrossWiring,
    pub patience: usize,
    pub stride: usize,
    pub eval_stride: Option<usize>,
    pub positional_encoding: bool,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            mechanism: Mechanism::Lam,
            n: 96,
            m: 24,
            d_model: 16,
            layers: 2,
            heads: 2,
            l: None,
            lr: 1e-3,
            epochs: 20,
            batch: 32,
            seed: 0,
            alpha: 0.01,
            wiring: CrossWiring::AsWritten,
            patience: 3,
            stride: 1,
            eval_stride: None,
            positional_encoding: true,
        }
    }
}

fn value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::InvalidArgument(format!("bad value `{raw}` for key `{key}`")))
}

fn flag(key: &str, raw: &str) -> Result<bool> {
    match raw {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::InvalidArgument(format!(
            "bad value `{raw}` for key `{key}`"
        ))),
    }
}

impl Settings {
    pub fn parse(text: &str) -> Result<Self> {
        let mut s = Settings::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, raw) = line.split_once('=').ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "line {}: expected key=value, got `{line}`",
                    lineno + 1
                ))
            })?;
            let (key, raw) = (key.trim(), raw.trim());
            match key {
                "kind" => s.mechanism = raw.parse()?,
                "n" => s.n = value(key, raw)?,
                "m" => s.m = value(key, raw)?,
                "d_model" => s.d_model = value(key, raw)?,
                "N" => s.layers = value(key, raw)?,
                "h" => s.heads = value(key, raw)?,
                "L" => s.l = Some(value(key, raw)?),
                "lr" => s.lr = value(key, raw)?,
                "epochs" => s.epochs = value(key, raw)?,
                "batch" => s.batch = value(key, raw)?,
                "seed" => s.seed = value(key, raw)?,
                "alpha" => s.alpha = value(key, raw)?,
                "wiring" => s.wiring = raw.parse()?,
                "patience" => s.patience = value(key, raw)?,
                "stride" => s.stride = value(key, raw)?,
                "eval_stride" => s.eval_stride = Some(value(key, raw)?),
                "pe" => s.positional_encoding = flag(key, raw)?,
                other => return Err(Error::UnknownKey(other.to_string())),
            }
        }
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "lr must be finite and ≥ 0, got {}",
                self.lr
            )));
        }
        if self.batch == 0 || self.stride == 0 || self.eval_stride == Some(0) {
            return Err(Error::InvalidArgument(
                "batch and strides must be positive".into(),
            ));
        }
        self.model_config(1).validate()
    }

    pub fn band(&self) -> usize {
        self.l.unwrap_or_else(|| default_l(self.n))
    }

    pub fn model_config(&self, d_features: usize) -> ModelConfig {
        ModelConfig {
            mechanism: self.mechanism,
            d_features,
            d_model: self.d_model,
            layers: self.layers,
            n: self.n,
            m: self.m,
            heads: self.heads,
            l: self.band(),
            alpha: self.alpha,
            seed: self.seed,
            wiring: self.wiring,
            positional_encoding: self.positional_encoding,
        }
    }

    pub fn window_spec(&self) -> WindowSpec {
        WindowSpec {
            n: self.n,
            m: self.m,
            train_stride: self.stride,
            eval_stride: self.eval_stride.unwrap_or(self.m.max(1)),
        }
    }

    pub fn train_options(&self, exec: Exec) -> TrainOptions {
        TrainOptions {
            epochs: self.epochs,
            lr: self.lr,
            batch: self.batch,
            patience: self.patience,
            exec,
        }
    }

    /// Text that [`Settings::parse`] reads back to `self`.
    pub fn to_text(&self) -> String {
        let mut t = String::new();
        let _ = writeln!(t, "kind={}", self.mechanism);
        let _ = writeln!(t, "n={}", self.n);
        let _ = writeln!(t, "m={}", self.m);
        let _ = writeln!(t, "d_model={}", self.d_model);
        let _ = writeln!(t, "N={}", self.layers);
        let _ = writeln!(t, "h={}", self.heads);
        if let Some(l) = self.l {
            let _ = writeln!(t, "L={l}");
        }
        let _ = writeln!(t, "lr={}", self.lr);
        let _ = writeln!(t, "epochs={}", self.epochs);
        let _ = writeln!(t, "batch={}", self.batch);
        let _ = writeln!(t, "seed={}", self.seed);
        let _ = writeln!(t, "alpha={}", self.alpha);
        let _ = writeln!(t, "wiring={}", self.wiring);
        let _ = writeln!(t, "patience={}", self.patience);
        let _ = writeln!(t, "stride={}", self.stride);
        if let Some(e) = self.eval_stride {
            let _ = writeln!(t, "eval_stride={e}");
        }
        let _ = writeln!(t, "pe={}", self.positional_encoding);
        t
    }
}
