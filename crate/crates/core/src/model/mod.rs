//! Encoder-decoder forecaster with a pluggable attention mechanism.
//!
//! ```text
//! E   = x·W_emb + b_emb (+ PE)                 n × d_model
//! enc = EncoderLayer^N(E)
//! y   = DecoderLayer^N(E; enc)
//! out = W_timeᵀ · (y·W_out + b_out)            m × d_features
//! ```
//!
//! Encoder layer: `R = X + MHA(X, X, X)`, then two LeakyReLU affine maps.
//! Decoder layer: `R1 = Y + MHA(Y, Y, Y)`, `R2 = R1 + MHA(enc, enc, R1)`,
//! then two LeakyReLU affine maps. [`CrossWiring::Conventional`] switches
//! the second block to `MHA(R1, enc, enc)`.

pub mod checkpoint;
pub mod settings;
pub mod train;

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::attention::{
    self, Attention, AttnConfig, AttnCounters, HeadParams, HeadWeights, LogBase,
};
use crate::autodiff::{Gradients, Graph, NodeId};
use crate::error::{Error, Result};
use crate::lam::{LRule, LamOptions};
use crate::ops::{self, Eager, Ops};
use crate::random;
use crate::tensor::{Activation, Exec, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mechanism {
    Full,
    Lam,
    Prob,
}

impl Mechanism {
    pub const ALL: [Mechanism; 3] = [Mechanism::Full, Mechanism::Lam, Mechanism::Prob];
}

impl FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Mechanism::Full),
            "lam" => Ok(Mechanism::Lam),
            "prob" => Ok(Mechanism::Prob),
            _ => Err(Error::InvalidArgument(format!(
                "unknown mechanism `{s}` (full, lam, prob)"
            ))),
        }
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mechanism::Full => "full",
            Mechanism::Lam => "lam",
            Mechanism::Prob => "prob",
        })
    }
}

/// Where the decoder's second attention block takes its operands from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CrossWiring {
    /// Queries and keys from the encoder output, values from the decoder.
    #[default]
    AsWritten,
    /// Queries from the decoder, keys and values from the encoder.
    Conventional,
}

impl FromStr for CrossWiring {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "as_written" => Ok(CrossWiring::AsWritten),
            "conventional" => Ok(CrossWiring::Conventional),
            _ => Err(Error::InvalidArgument(format!(
                "unknown wiring `{s}` (as_written, conventional)"
            ))),
        }
    }
}

impl fmt::Display for CrossWiring {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CrossWiring::AsWritten => "as_written",
            CrossWiring::Conventional => "conventional",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub mechanism: Mechanism,
    pub d_features: usize,
    pub d_model: usize,
    /// Encoder layers, and as many decoder layers.
    pub layers: usize,
    pub n: usize,
    pub m: usize,
    pub heads: usize,
    /// Band size of the local mechanism.
    pub l: usize,
    /// LeakyReLU slope.
    pub alpha: f64,
    pub seed: u64,
    pub wiring: CrossWiring,
    pub positional_encoding: bool,
}

impl ModelConfig {
    /// Defaults for everything but the shapes; `L` from the `4⌈log₂ n⌉` rule.
    pub fn new(
        mechanism: Mechanism,
        d_features: usize,
        d_model: usize,
        layers: usize,
        n: usize,
        m: usize,
        heads: usize,
    ) -> Self {
        Self {
            mechanism,
            d_features,
            d_model,
            layers,
            n,
            m,
            heads,
            l: LRule::default().band(n, LogBase::Two),
            alpha: 0.01,
            seed: 0,
            wiring: CrossWiring::default(),
            positional_encoding: true,
        }
    }

    pub fn d_a(&self) -> usize {
        self.d_model / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.layers == 0 {
            return bad("N must be at least 1".into());
        }
        if self.m == 0 || self.m > self.n {
            return bad(format!(
                "need n ≥ m ≥ 1, got n = {}, m = {}",
                self.n, self.m
            ));
        }
        if self.d_features == 0 || self.d_model == 0 {
            return bad("feature widths must be positive".into());
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!(
                "h = {} must divide d_model = {}",
                self.heads, self.d_model
            ));
        }
        if !(1..=self.n).contains(&self.l) {
            return bad(format!("L = {} outside 1..={}", self.l, self.n));
        }
        if !self.alpha.is_finite() {
            return bad("alpha must be finite".into());
        }
        Ok(())
    }

    pub fn attention(&self) -> Attention {
        match self.mechanism {
            Mechanism::Full => Attention::Full,
            Mechanism::Lam => Attention::lam(self.l),
            Mechanism::Prob => Attention::prob(self.seed),
        }
    }

    fn attn_config(&self) -> Result<AttnConfig> {
        AttnConfig::new(self.n, self.d_model, self.d_model, self.l, self.heads)
    }
}

/// `PE(i, j) = sin(i / 10000^{j/d}) + cos(i / 10000^{j/d})`.
pub fn positional_encoding(n: usize, d_model: usize) -> Tensor {
    let mut data = Vec::with_capacity(n * d_model);
    for i in 0..n {
        for j in 0..d_model {
            let arg = i as f64 / 10000f64.powf(j as f64 / d_model as f64);
            data.push(arg.sin() + arg.cos());
        }
    }
    Tensor::from_parts(vec![n, d_model], data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineParams<V> {
    /// `d_in × d_out`.
    pub w: V,
    pub b: V,
}

#[derive(Debug, Clone)]
pub struct EncoderParams<V> {
    pub attn: HeadParams<V>,
    pub ff1: AffineParams<V>,
    pub ff2: AffineParams<V>,
}

#[derive(Debug, Clone)]
pub struct DecoderParams<V> {
    pub self_attn: HeadParams<V>,
    pub cross_attn: HeadParams<V>,
    pub ff1: AffineParams<V>,
    pub ff2: AffineParams<V>,
}

/// Every parameter of the forecaster. `V = Tensor` holds the weights;
/// other `V` are the same weights bound into an [`Ops`] backend.
#[derive(Debug, Clone)]
pub struct Params<V> {
    pub embed: AffineParams<V>,
    pub encoders: Vec<EncoderParams<V>>,
    pub decoders: Vec<DecoderParams<V>>,
    pub out: AffineParams<V>,
    /// `n × m`.
    pub time: V,
}

fn map_affine<V, U>(a: &AffineParams<V>, f: &mut impl FnMut(&V) -> U) -> AffineParams<U> {
    AffineParams {
        w: f(&a.w),
        b: f(&a.b),
    }
}

fn map_heads<V, U>(h: &HeadParams<V>, f: &mut impl FnMut(&V) -> U) -> HeadParams<U> {
    HeadParams {
        wq: h.wq.iter().map(&mut *f).collect(),
        wk: h.wk.iter().map(&mut *f).collect(),
        wv: h.wv.iter().map(&mut *f).collect(),
        wo: f(&h.wo),
    }
}

fn visit_heads<'a, V>(prefix: &str, h: &'a HeadParams<V>, out: &mut Vec<(String, &'a V)>) {
    for (name, list) in [("wq", &h.wq), ("wk", &h.wk), ("wv", &h.wv)] {
        for (i, v) in list.iter().enumerate() {
            out.push((format!("{prefix}.{name}.{i}"), v));
        }
    }
    out.push((format!("{prefix}.wo"), &h.wo));
}

fn visit_affine<'a, V>(prefix: &str, a: &'a AffineParams<V>, out: &mut Vec<(String, &'a V)>) {
    out.push((format!("{prefix}.w"), &a.w));
    out.push((format!("{prefix}.b"), &a.b));
}

impl<V> Params<V> {
    /// Applies `f` to every entry, in [`Params::named`] order.
    pub fn map<U>(&self, mut f: impl FnMut(&V) -> U) -> Params<U> {
        let f = &mut f;
        Params {
            embed: map_affine(&self.embed, f),
            encoders: self
                .encoders
                .iter()
                .map(|e| EncoderParams {
                    attn: map_heads(&e.attn, f),
                    ff1: map_affine(&e.ff1, f),
                    ff2: map_affine(&e.ff2, f),
                })
                .collect(),
            decoders: self
                .decoders
                .iter()
                .map(|d| DecoderParams {
                    self_attn: map_heads(&d.self_attn, f),
                    cross_attn: map_heads(&d.cross_attn, f),
                    ff1: map_affine(&d.ff1, f),
                    ff2: map_affine(&d.ff2, f),
                })
                .collect(),
            out: map_affine(&self.out, f),
            time: f(&self.time),
        }
    }

    /// Every entry with a stable dotted name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &V)> {
        let mut out = Vec::new();
        visit_affine("embed", &self.embed, &mut out);
        for (i, e) in self.encoders.iter().enumerate() {
            visit_heads(&format!("enc{i}.attn"), &e.attn, &mut out);
            visit_affine(&format!("enc{i}.ff1"), &e.ff1, &mut out);
            visit_affine(&format!("enc{i}.ff2"), &e.ff2, &mut out);
        }
        for (i, d) in self.decoders.iter().enumerate() {
            visit_heads(&format!("dec{i}.self"), &d.self_attn, &mut out);
            visit_heads(&format!("dec{i}.cross"), &d.cross_attn, &mut out);
            visit_affine(&format!("dec{i}.ff1"), &d.ff1, &mut out);
            visit_affine(&format!("dec{i}.ff2"), &d.ff2, &mut out);
        }
        visit_affine("out", &self.out, &mut out);
        out.push(("time".into(), &self.time));
        out
    }
}

impl Params<Tensor> {
    /// Rebuilds the structure of `self` from tensors given in [`Params::named`] order.
    pub fn with_tensors(&self, tensors: Vec<Tensor>) -> Result<Params<Tensor>> {
        let expected = self.named().len();
        if tensors.len() != expected {
            return Err(Error::Contract(format!(
                "{} tensors for {expected} parameters",
                tensors.len()
            )));
        }
        let mut it = tensors.into_iter();
        let mut bad = None;
        let out = self.map(|old| {
            let t = it.next().expect("length checked");
            if t.shape() != old.shape() && bad.is_none() {
                bad = Some((old.shape().to_vec(), t.shape().to_vec()));
            }
            t
        });
        match bad {
            Some((left, right)) => Err(Error::Shape {
                op: "Params::with_tensors",
                left,
                right,
            }),
            None => Ok(out),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        // Field by field, in `named` order.
        fn push_affine<'a>(a: &'a mut AffineParams<Tensor>, out: &mut Vec<&'a mut Tensor>) {
            out.push(&mut a.w);
            out.push(&mut a.b);
        }
        fn push_heads<'a>(h: &'a mut HeadParams<Tensor>, out: &mut Vec<&'a mut Tensor>) {
            out.extend(h.wq.iter_mut());
            out.extend(h.wk.iter_mut());
            out.extend(h.wv.iter_mut());
            out.push(&mut h.wo);
        }
        push_affine(&mut self.embed, &mut out);
        for e in &mut self.encoders {
            push_heads(&mut e.attn, &mut out);
            push_affine(&mut e.ff1, &mut out);
            push_affine(&mut e.ff2, &mut out);
        }
        for d in &mut self.decoders {
            push_heads(&mut d.self_attn, &mut out);
            push_heads(&mut d.cross_attn, &mut out);
            push_affine(&mut d.ff1, &mut out);
            push_affine(&mut d.ff2, &mut out);
        }
        push_affine(&mut self.out, &mut out);
        out.push(&mut self.time);
        out
    }

    pub fn numel(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }
}

fn random_affine(d_in: usize, d_out: usize, rng: &mut impl Rng) -> AffineParams<Tensor> {
    AffineParams {
        w: attention::init_uniform(&[d_in, d_out], d_in, rng),
        b: Tensor::zeros(&[d_out]),
    }
}

fn random_heads(cfg: &AttnConfig, rng: &mut impl Rng) -> HeadParams<Tensor> {
    let w = HeadWeights::random(cfg, rng);
    HeadParams {
        wq: w.wq,
        wk: w.wk,
        wv: w.wv,
        wo: w.wo,
    }
}

/// Captured operands of a forward pass, for diagnostics.
#[derive(Debug, Default, Clone)]
pub struct Probe {
    /// `(layer label, per-head (Q_i, K_i))` for every attention block.
    pub blocks: Vec<(String, Vec<(Tensor, Tensor)>)>,
}

#[derive(Debug, Clone)]
pub struct ForecastModel {
    pub config: ModelConfig,
    pub params: Params<Tensor>,
}

/// Parameter totals per block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamBreakdown {
    pub blocks: Vec<(String, usize)>,
    pub total: usize,
}

impl ForecastModel {
    /// Weights drawn from `config.seed`: affine and attention matrices
    /// uniform in `±1/√fan_in`, biases zero.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let ac = config.attn_config()?;
        let mut rng = random::rng(config.seed);
        let (d, f) = (config.d_model, config.d_features);
        let embed = random_affine(f, d, &mut rng);
        let encoders = (0..config.layers)
            .map(|_| EncoderParams {
                attn: random_heads(&ac, &mut rng),
                ff1: random_affine(d, d, &mut rng),
                ff2: random_affine(d, d, &mut rng),
            })
            .collect();
        let decoders = (0..config.layers)
            .map(|_| DecoderParams {
                self_attn: random_heads(&ac, &mut rng),
                cross_attn: random_heads(&ac, &mut rng),
                ff1: random_affine(d, d, &mut rng),
                ff2: random_affine(d, d, &mut rng),
            })
            .collect();
        let out = random_affine(d, f, &mut rng);
        let time = attention::init_uniform(&[config.n, config.m], config.n, &mut rng);
        Ok(Self {
            config,
            params: Params {
                embed,
                encoders,
                decoders,
                out,
                time,
            },
        })
    }

    pub fn count_parameters(&self) -> usize {
        self.params.numel()
    }

    pub fn parameter_breakdown(&self) -> ParamBreakdown {
        let mut blocks: Vec<(String, usize)> = Vec::new();
        for (name, t) in self.params.named() {
            let block = match name.split('.').collect::<Vec<_>>().as_slice() {
                [b, "wq" | "wk" | "wv" | "wo", ..] => b.to_string(),
                [layer, block, ..] if layer.starts_with("enc") || layer.starts_with("dec") => {
                    format!("{layer}.{block}")
                }
                [b, ..] => b.to_string(),
                [] => unreachable!(),
            };
            match blocks.last_mut() {
                Some((last, count)) if *last == block => *count += t.numel(),
                _ => blocks.push((block, t.numel())),
            }
        }
        let total = blocks.iter().map(|b| b.1).sum();
        ParamBreakdown { blocks, total }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (n, d) = x.dims2("forward")?;
        if (n, d) != (self.config.n, self.config.d_features) {
            return Err(Error::Shape {
                op: "forward",
                left: vec![self.config.n, self.config.d_features],
                right: x.shape().to_vec(),
            });
        }
        if !x.all_finite() {
            return Err(Error::NonFinite("forward input".into()));
        }
        Ok(())
    }

    /// `m × d_features` forecast for the `n × d_features` window `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_with(x, self.config.attention(), Exec::default())
    }

    /// Forward pass with an explicit attention kernel.
    pub fn forward_with(&self, x: &Tensor, kind: Attention, exec: Exec) -> Result<Tensor> {
        self.check_input(x)?;
        let mut ops = Eager::new(exec);
        let p = self.params.map(|t| ops.param(t));
        let x = ops.constant(x.clone());
        let mut counters = AttnCounters::default();
        let hidden = hidden_pass(&mut ops, &self.config, &p, &x, kind, &mut counters, None)?;
        time_projection(&mut ops, &p, &hidden)
    }

    /// The `n × d_features` output before the time projection.
    pub fn forward_hidden(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut ops = Eager::default();
        let p = self.params.map(|t| ops.param(t));
        let x = ops.constant(x.clone());
        let mut counters = AttnCounters::default();
        hidden_pass(
            &mut ops,
            &self.config,
            &p,
            &x,
            self.config.attention(),
            &mut counters,
            None,
        )
    }

    /// Forward pass that also records the per-head queries and keys of
    /// every attention block and the attention work done.
    pub fn forward_probed(&self, x: &Tensor) -> Result<(Tensor, Probe, AttnCounters)> {
        self.check_input(x)?;
        let mut ops = Eager::default();
        let p = self.params.map(|t| ops.param(t));
        let x = ops.constant(x.clone());
        let mut counters = AttnCounters::default();
        let mut probe = Probe::default();
        let hidden = hidden_pass(
            &mut ops,
            &self.config,
            &p,
            &x,
            self.config.attention(),
            &mut counters,
            Some(&mut probe),
        )?;
        Ok((time_projection(&mut ops, &p, &hidden)?, probe, counters))
    }

    /// MSE of the forecast against `target` and its gradient for every parameter.
    pub fn loss_and_grads(
        &self,
        x: &Tensor,
        target: &Tensor,
    ) -> Result<(f64, Tensor, Params<Tensor>)> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let p: Params<NodeId> = self.params.map(|t| g.param(t));
        let xv = g.constant(x.clone());
        let mut counters = AttnCounters::default();
        let hidden = hidden_pass(
            &mut g,
            &self.config,
            &p,
            &xv,
            self.config.attention(),
            &mut counters,
            None,
        )?;
        let pred = time_projection(&mut g, &p, &hidden)?;
        let loss = g.mse(pred, target)?;
        let grads: Gradients = g.backward(loss)?;
        let grads = p.map(|id| {
            grads
                .get(*id)
                .cloned()
                .expect("every parameter has a gradient")
        });
        Ok((g.get(loss).data()[0], g.get(pred).clone(), grads))
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_block<O: Ops>(
    ops: &mut O,
    q: &O::Value,
    k: &O::Value,
    v: &O::Value,
    w: &HeadParams<O::Value>,
    kind: Attention,
    counters: &mut AttnCounters,
    probe: &mut Option<&mut Probe>,
    label: String,
) -> Result<O::Value> {
    let mut heads = Vec::new();
    let sink = probe.as_ref().map(|_| &mut heads);
    let a = attention::multi_head_attend(ops, q, k, v, w, kind, counters, sink)?;
    if let Some(p) = probe.as_deref_mut() {
        p.blocks.push((label, heads));
    }
    Ok(a)
}

fn feed_forward<O: Ops>(
    ops: &mut O,
    x: &O::Value,
    ff1: &AffineParams<O::Value>,
    ff2: &AffineParams<O::Value>,
    alpha: f64,
) -> Result<O::Value> {
    let act = Activation::LeakyRelu(alpha);
    let h = ops::affine(ops, x, &ff1.w, &ff1.b, act)?;
    ops::affine(ops, &h, &ff2.w, &ff2.b, act)
}

/// One encoder layer on any backend.
pub fn encoder_layer<O: Ops>(
    ops: &mut O,
    x: &O::Value,
    p: &EncoderParams<O::Value>,
    kind: Attention,
    alpha: f64,
    counters: &mut AttnCounters,
) -> Result<O::Value> {
    encoder_layer_probed(ops, x, p, kind, alpha, counters, &mut None, 0)
}

#[allow(clippy::too_many_arguments)]
fn encoder_layer_probed<O: Ops>(
    ops: &mut O,
    x: &O::Value,
    p: &EncoderParams<O::Value>,
    kind: Attention,
    alpha: f64,
    counters: &mut AttnCounters,
    probe: &mut Option<&mut Probe>,
    index: usize,
) -> Result<O::Value> {
    let a = attention_block(
        ops,
        x,
        x,
        x,
        &p.attn,
        kind,
        counters,
        probe,
        format!("enc{index}.attn"),
    )?;
    let r = ops.add(a, x)?;
    feed_forward(ops, &r, &p.ff1, &p.ff2, alpha)
}

/// One decoder layer on any backend.
#[allow(clippy::too_many_arguments)]
pub fn decoder_layer<O: Ops>(
    ops: &mut O,
    y: &O::Value,
    enc: &O::Value,
    p: &DecoderParams<O::Value>,
    kind: Attention,
    wiring: CrossWiring,
    alpha: f64,
    counters: &mut AttnCounters,
) -> Result<O::Value> {
    decoder_layer_probed(ops, y, enc, p, kind, wiring, alpha, counters, &mut None, 0)
}

#[allow(clippy::too_many_arguments)]
fn decoder_layer_probed<O: Ops>(
    ops: &mut O,
    y: &O::Value,
    enc: &O::Value,
    p: &DecoderParams<O::Value>,
    kind: Attention,
    wiring: CrossWiring,
    alpha: f64,
    counters: &mut AttnCounters,
    probe: &mut Option<&mut Probe>,
    index: usize,
) -> Result<O::Value> {
    let a1 = attention_block(
        ops,
        y,
        y,
        y,
        &p.self_attn,
        kind,
        counters,
        probe,
        format!("dec{index}.self"),
    )?;
    let r1 = ops.add(a1, y)?;
    let label = format!("dec{index}.cross");
    let a2 = match wiring {
        CrossWiring::AsWritten => attention_block(
            ops,
            enc,
            enc,
            &r1,
            &p.cross_attn,
            kind,
            counters,
            probe,
            label,
        )?,
        CrossWiring::Conventional => attention_block(
            ops,
            &r1,
            enc,
            enc,
            &p.cross_attn,
            kind,
            counters,
            probe,
            label,
        )?,
    };
    let r2 = ops.add(a2, &r1)?;
    feed_forward(ops, &r2, &p.ff1, &p.ff2, alpha)
}

/// Embedding, encoders, decoders and the feature projection: `n × d_features`.
fn hidden_pass<O: Ops>(
    ops: &mut O,
    cfg: &ModelConfig,
    p: &Params<O::Value>,
    x: &O::Value,
    kind: Attention,
    counters: &mut AttnCounters,
    mut probe: Option<&mut Probe>,
) -> Result<O::Value> {
    let mut e = ops::affine(ops, x, &p.embed.w, &p.embed.b, Activation::None)?;
    if cfg.positional_encoding {
        e = ops.add_const(e, &positional_encoding(cfg.n, cfg.d_model))?;
    }
    let mut h = e.clone();
    for (i, layer) in p.encoders.iter().enumerate() {
        h = encoder_layer_probed(ops, &h, layer, kind, cfg.alpha, counters, &mut probe, i)?;
    }
    let mut y = e;
    for (i, layer) in p.decoders.iter().enumerate() {
        y = decoder_layer_probed(
            ops, &y, &h, layer, kind, cfg.wiring, cfg.alpha, counters, &mut probe, i,
        )?;
    }
    ops::affine(ops, &y, &p.out.w, &p.out.b, Activation::None)
}

fn time_projection<O: Ops>(
    ops: &mut O,
    p: &Params<O::Value>,
    hidden: &O::Value,
) -> Result<O::Value> {
    let wt = ops.transpose(&p.time)?;
    ops.matmul(&wt, hidden)
}

/// Largest output difference between the blocked local kernel and its
/// dense masked evaluation inside the same model.
pub fn lam_kernel_deviation(model: &ForecastModel, x: &Tensor) -> Result<f64> {
    let l = model.config.l;
    let blocked = model.forward_with(
        x,
        Attention::Lam {
            l,
            opts: LamOptions::default(),
        },
        Exec::default(),
    )?;
    let dense = model.forward_with(x, Attention::MaskedFull { l }, Exec::default())?;
    blocked.max_abs_diff(&dense)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::full_attention;
    use crate::autodiff::{finite_diff_grad, relative_error};
    use crate::random::random_matrix;
    use crate::tensor::leaky_relu;

    fn tiny(mechanism: Mechanism, seed: u64) -> ForecastModel {
        let mut cfg = ModelConfig::new(mechanism, 2, 4, 1, 8, 2, 2);
        cfg.l = 3;
        cfg.seed = seed;
        ForecastModel::new(cfg).unwrap()
    }

    fn zero_all(p: &mut Params<Tensor>) {
        for t in p.tensors_mut() {
            t.map_inplace(|_| 0.0);
        }
    }

    #[test]
    fn positional_encoding_values() {
        let pe = positional_encoding(50, 6);
        assert!(pe.row(0).iter().all(|&v| v == 1.0));
        assert!((pe.at2(1, 0) - (1f64.sin() + 1f64.cos())).abs() < 1e-15);
        assert!((pe.at2(1, 0) - 1.38177).abs() < 1e-5);
        assert!(pe.data().iter().all(|v| v.abs() <= 2f64.sqrt()));
    }

    #[test]
    fn zero_weights_annihilate_layers() {
        let mut model = tiny(Mechanism::Full, 1);
        zero_all(&mut model.params);
        let mut ops = Eager::default();
        let x = random_matrix(&mut random::rng(2), 8, 4);
        let enc = random_matrix(&mut random::rng(3), 8, 4);
        let mut c = AttnCounters::default();
        let out = encoder_layer(
            &mut ops,
            &x,
            &model.params.encoders[0],
            Attention::Full,
            0.3,
            &mut c,
        )
        .unwrap();
        assert_eq!(out.shape(), &[8, 4]);
        assert_eq!(out.max_abs(), 0.0);
        let out = decoder_layer(
            &mut ops,
            &x,
            &enc,
            &model.params.decoders[0],
            Attention::Full,
            CrossWiring::AsWritten,
            0.3,
            &mut c,
        )
        .unwrap();
        assert_eq!(out.max_abs(), 0.0);
    }

    fn identity_heads(d: usize) -> HeadParams<Tensor> {
        HeadParams {
            wq: vec![Tensor::eye(d)],
            wk: vec![Tensor::eye(d)],
            wv: vec![Tensor::eye(d)],
            wo: Tensor::eye(d),
        }
    }

    fn identity_affine(d: usize) -> AffineParams<Tensor> {
        AffineParams {
            w: Tensor::eye(d),
            b: Tensor::zeros(&[d]),
        }
    }

    #[test]
    fn encoder_with_identity_maps() {
        let d = 3;
        let p = EncoderParams {
            attn: identity_heads(d),
            ff1: identity_affine(d),
            ff2: identity_affine(d),
        };
        let x = random_matrix(&mut random::rng(7), 6, d);
        let alpha = 0.2;
        let out = encoder_layer(
            &mut Eager::default(),
            &x,
            &p,
            Attention::Full,
            alpha,
            &mut AttnCounters::default(),
        )
        .unwrap();
        let mut want = full_attention(&x, &x, &x, None).unwrap();
        want.add_inplace(&x).unwrap();
        let want = want.map(|v| leaky_relu(leaky_relu(v, alpha), alpha));
        assert!(out.max_abs_diff(&want).unwrap() < 1e-14);
    }

    #[test]
    fn zero_encoder_output_averages_values() {
        let d = 3;
        let p = DecoderParams {
            self_attn: HeadParams {
                wo: Tensor::zeros(&[d, d]),
                ..identity_heads(d)
            },
            cross_attn: identity_heads(d),
            ff1: identity_affine(d),
            ff2: identity_affine(d),
        };
        let y = random_matrix(&mut random::rng(8), 5, d);
        let enc = Tensor::zeros(&[5, d]);
        let out = decoder_layer(
            &mut Eager::default(),
            &y,
            &enc,
            &p,
            Attention::Full,
            CrossWiring::AsWritten,
            1.0,
            &mut AttnCounters::default(),
        )
        .unwrap();
        // First block adds nothing; second adds the column means of y.
        for i in 0..5 {
            for j in 0..d {
                let mean: f64 = (0..5).map(|r| y.at2(r, j)).sum::<f64>() / 5.0;
                assert!((out.at2(i, j) - (y.at2(i, j) + mean)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn identity_pipeline_reproduces_embedding() {
        let mut cfg = ModelConfig::new(Mechanism::Lam, 3, 3, 2, 5, 5, 1);
        cfg.alpha = 1.0;
        let mut model = ForecastModel::new(cfg).unwrap();
        let p = &mut model.params;
        p.embed = identity_affine(3);
        p.out = identity_affine(3);
        p.time = Tensor::eye(5);
        for e in &mut p.encoders {
            e.attn.wo = Tensor::zeros(&[3, 3]);
            e.ff1 = identity_affine(3);
            e.ff2 = identity_affine(3);
        }
        for dl in &mut p.decoders {
            dl.self_attn.wo = Tensor::zeros(&[3, 3]);
            dl.cross_attn.wo = Tensor::zeros(&[3, 3]);
            dl.ff1 = identity_affine(3);
            dl.ff2 = identity_affine(3);
        }
        let x = random_matrix(&mut random::rng(4), 5, 3);
        let out = model.forward(&x).unwrap();
        let mut want = x.clone();
        want.add_inplace(&positional_encoding(5, 3)).unwrap();
        assert!(out.max_abs_diff(&want).unwrap() < 1e-14);
    }

    #[test]
    fn shapes_for_every_mechanism() {
        for mech in Mechanism::ALL {
            let model = tiny(mech, 3);
            let x = random_matrix(&mut random::rng(5), 8, 2);
            let y = model.forward(&x).unwrap();
            assert_eq!(y.shape(), &[2, 2]);
            assert_eq!(y, model.forward(&x).unwrap());
            assert_eq!(y, tiny(mech, 3).forward(&x).unwrap());
        }
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let model = tiny(Mechanism::Lam, 0);
        assert!(model.forward(&Tensor::zeros(&[7, 2])).is_err());
        let mut x = Tensor::zeros(&[8, 2]);
        x.data_mut()[3] = f64::INFINITY;
        assert!(matches!(model.forward(&x), Err(Error::NonFinite(_))));
        let mut cfg = model.config;
        cfg.m = 9;
        assert!(ForecastModel::new(cfg).is_err());
        cfg.m = 2;
        cfg.layers = 0;
        assert!(ForecastModel::new(cfg).is_err());
    }

    #[test]
    fn parameter_counts() {
        let model = tiny(Mechanism::Lam, 0);
        let d = 4;
        let mha = 3 * d * d + d * d;
        let ff = 2 * (d * d + d);
        let want = (2 * d + d) + (mha + ff) + (2 * mha + ff) + (d * 2 + 2) + 8 * 2;
        assert_eq!(model.count_parameters(), want);
        let b = model.parameter_breakdown();
        assert_eq!(b.total, want);
        assert!(b.blocks.contains(&("time".to_string(), 16)));
        assert!(b.blocks.contains(&("enc0.attn".to_string(), mha)));

        let mut deeper = model.config;
        deeper.layers = 2;
        let extra = ForecastModel::new(deeper).unwrap().count_parameters() - want;
        assert_eq!(extra, 3 * mha + 2 * ff);
    }

    #[test]
    fn kernel_swap_is_invisible() {
        let mut cfg = ModelConfig::new(Mechanism::Lam, 2, 4, 2, 13, 3, 2);
        cfg.l = 4;
        let model = ForecastModel::new(cfg).unwrap();
        let x = random_matrix(&mut random::rng(1), 13, 2);
        assert!(lam_kernel_deviation(&model, &x).unwrap() <= 1e-10);
    }

    #[test]
    fn model_gradients_match_finite_differences() {
        for mech in [Mechanism::Full, Mechanism::Lam] {
            let model = tiny(mech, 11);
            let mut r = random::rng(12);
            let x = random_matrix(&mut r, 8, 2);
            let target = random_matrix(&mut r, 2, 2);
            let (_, _, grads) = model.loss_and_grads(&x, &target).unwrap();
            let names = model.params.named().len();
            for k in 0..names {
                let numeric = finite_diff_grad(
                    |t| {
                        let mut tensors: Vec<Tensor> = model
                            .params
                            .named()
                            .into_iter()
                            .map(|(_, t)| t.clone())
                            .collect();
                        tensors[k] = t.clone();
                        let m = ForecastModel {
                            config: model.config,
                            params: model.params.with_tensors(tensors).unwrap(),
                        };
                        crate::data::mse(&m.forward(&x).unwrap(), &target).unwrap()
                    },
                    model.params.named()[k].1,
                    1e-5,
                )
                .unwrap();
                let analytic = grads.named()[k].1;
                let err = relative_error(analytic, &numeric).unwrap();
                assert!(err <= 1e-6, "{mech} {}: {err}", model.params.named()[k].0);
            }
        }
    }

    #[test]
    fn positional_encoding_breaks_equivariance() {
        let mut cfg = ModelConfig::new(Mechanism::Full, 2, 4, 1, 8, 2, 2);
        cfg.positional_encoding = false;
        let plain = ForecastModel::new(cfg).unwrap();
        cfg.positional_encoding = true;
        let with_pe = ForecastModel::new(cfg).unwrap();
        let mut r = random::rng(3);
        let x = random_matrix(&mut r, 8, 2);
        let pi = random::random_permutation(&mut r, 8);
        let px = attention::permute_rows(&x, &pi).unwrap();
        let dev = |m: &ForecastModel| {
            let a = m.forward_hidden(&px).unwrap();
            let b = attention::permute_rows(&m.forward_hidden(&x).unwrap(), &pi).unwrap();
            a.max_abs_diff(&b).unwrap()
        };
        assert!(dev(&plain) <= 1e-10);
        assert!(dev(&with_pe) > 1e-6);
    }
}
