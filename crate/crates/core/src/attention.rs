//! Reference attention mechanisms: full (optionally masked) attention, the
//! band mask and the masked-full oracle for the local kernel, multi-head
//! wrapping, the probabilistic query-selection baseline, and diagnostics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lam::{self, LamOptions};
use crate::ops::{Eager, Ops};
use crate::tensor::{self, Tensor};

/// Base of the logarithm in the `L` and `u` rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LogBase {
    #[default]
    Two,
    E,
}

impl LogBase {
    pub fn log(self, x: f64) -> f64 {
        match self {
            LogBase::Two => x.log2(),
            LogBase::E => x.ln(),
        }
    }

    /// `⌈log n⌉`, with exact powers of two handled without float drift.
    pub fn ceil_log(self, n: usize) -> usize {
        match self {
            LogBase::Two if n >= 1 => (usize::BITS - (n - 1).leading_zeros()) as usize,
            _ => self.log(n.max(1) as f64).ceil().max(0.0) as usize,
        }
    }
}

/// Attention shape record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnConfig {
    pub n: usize,
    pub d_q: usize,
    pub d_v: usize,
    /// Neighbourhood size of the local mechanism.
    pub l: usize,
    pub h: usize,
    pub d_a: usize,
}

impl AttnConfig {
    /// Uses the usual `h·d_a = d_v` split; fails if `h` does not divide `d_v`.
    pub fn new(n: usize, d_q: usize, d_v: usize, l: usize, h: usize) -> Result<Self> {
        if h == 0 || !d_v.is_multiple_of(h) {
            return Err(Error::InvalidArgument(format!(
                "h = {h} must divide d_v = {d_v}"
            )));
        }
        let cfg = Self {
            n,
            d_q,
            d_v,
            l,
            h,
            d_a: d_v / h,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.n >= 1
            && (1..=self.n).contains(&self.l)
            && self.d_q >= 1
            && self.d_v >= 1
            && self.h >= 1
            && self.d_a >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "invalid attention config {self:?}"
            )))
        }
    }
}

/// Score work performed by one attention call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AttnCounters {
    /// Query-key dot products.
    pub dot_products: u64,
    /// Score-tensor elements materialized (pre-softmax scores).
    pub peak_score_elements: u64,
}

impl AttnCounters {
    pub fn merge(&mut self, other: AttnCounters) {
        self.dot_products += other.dot_products;
        self.peak_score_elements += other.peak_score_elements;
    }
}

/// Which mechanism a multi-head layer runs per head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Attention {
    Full,
    Lam {
        l: usize,
        opts: LamOptions,
    },
    /// The local mechanism evaluated densely through the band mask.
    MaskedFull {
        l: usize,
    },
    Prob {
        seed: u64,
        log_base: LogBase,
    },
}

impl Attention {
    pub fn lam(l: usize) -> Self {
        Attention::Lam {
            l,
            opts: LamOptions::default(),
        }
    }

    pub fn prob(seed: u64) -> Self {
        Attention::Prob {
            seed,
            log_base: LogBase::Two,
        }
    }
}

/// `M[i,j] = 0` for `i−L+1 ≤ j ≤ i`, `-inf` elsewhere.
pub fn band_mask(n: usize, l: usize) -> Result<Tensor> {
    if !(1..=n).contains(&l) {
        return Err(Error::InvalidArgument(format!(
            "band size L = {l} outside 1..={n}"
        )));
    }
    let mut m = Tensor::full(&[n, n], f64::NEG_INFINITY);
    for i in 0..n {
        let lo = (i + 1).saturating_sub(l);
        for j in lo..=i {
            m.data_mut()[i * n + j] = 0.0;
        }
    }
    Ok(m)
}

fn check_qkv(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(usize, usize)> {
    let (n, d_q) = q.dims2("attention")?;
    let (nk, dk) = k.dims2("attention")?;
    let (nv, _) = v.dims2("attention")?;
    if dk != d_q || nk != nv {
        return Err(Error::Shape {
            op: "attention",
            left: q.shape().to_vec(),
            right: k.shape().to_vec(),
        });
    }
    if nv != n {
        return Err(Error::Shape {
            op: "attention",
            left: q.shape().to_vec(),
            right: v.shape().to_vec(),
        });
    }
    Ok((n, d_q))
}

/// `softmax((QKᵀ + mask)/√d_q)·V` on any [`Ops`] backend.
pub fn full_attend<O: Ops>(
    ops: &mut O,
    q: &O::Value,
    k: &O::Value,
    v: &O::Value,
    mask: Option<&Tensor>,
    counters: &mut AttnCounters,
) -> Result<O::Value> {
    let (n, d_q) = check_qkv(ops.value(q), ops.value(k), ops.value(v))?;
    let kt = ops.transpose(k)?;
    let before = tensor::dot_products();
    let scores = ops.matmul(q, &kt)?;
    counters.dot_products += tensor::dot_products() - before;
    counters.peak_score_elements += (n * n) as u64;
    let scores = match mask {
        Some(m) => ops.add_const(scores, m)?,
        None => scores,
    };
    let scores = ops.scale(scores, 1.0 / (d_q as f64).sqrt());
    let weights = ops.softmax(scores)?;
    ops.matmul(&weights, v)
}

pub fn full_attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    full_attend(
        &mut Eager::default(),
        q,
        k,
        v,
        mask,
        &mut AttnCounters::default(),
    )
}

/// Ground-truth local attention, computed densely in `Θ(n²)`.
pub fn masked_full_attention_oracle(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    l: usize,
) -> Result<Tensor> {
    masked_full_attention_counted(q, k, v, l, &mut AttnCounters::default())
}

pub fn masked_full_attention_counted(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    l: usize,
    counters: &mut AttnCounters,
) -> Result<Tensor> {
    let (n, _) = q.dims2("masked_full_attention_oracle")?;
    let mask = band_mask(n, l)?;
    full_attend(&mut Eager::default(), q, k, v, Some(&mask), counters)
}

/// Runs `kind` on already-projected inputs.
pub fn attend<O: Ops>(
    ops: &mut O,
    kind: Attention,
    q: &O::Value,
    k: &O::Value,
    v: &O::Value,
    counters: &mut AttnCounters,
) -> Result<O::Value> {
    match kind {
        Attention::Full => full_attend(ops, q, k, v, None, counters),
        Attention::Lam { l, opts } => lam::lam_attend(ops, q, k, v, l, opts, counters),
        Attention::MaskedFull { l } => {
            let mask = band_mask(ops.value(q).shape()[0], l)?;
            full_attend(ops, q, k, v, Some(&mask), counters)
        }
        Attention::Prob { seed, log_base } => prob_attend(ops, q, k, v, seed, log_base, counters),
    }
}

/// Number of queries kept and keys sampled: `min(n, 5⌈log n⌉)`, at least one.
pub fn prob_budget(n: usize, base: LogBase) -> usize {
    (5 * base.ceil_log(n)).clamp(1, n.max(1))
}

/// Max-minus-mean sparsity of each query over `sample` seeded random keys.
fn query_sparsity(q: &Tensor, k: &Tensor, sample: usize, seed: u64) -> Result<Vec<f64>> {
    let (n, d) = q.dims2("prob_attention")?;
    let (nk, _) = k.dims2("prob_attention")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx: Vec<isize> = (0..n * sample)
        .map(|_| rng.random_range(0..nk) as isize)
        .collect();
    let sampled = tensor::gather_rows_padded(k, &idx, 0.0)?
        .reshape(&[n, sample, d])?
        .transpose_last2()?;
    let qb = q.clone().reshape(&[n, 1, d])?;
    let scores = tensor::matmul_batched(&qb, &sampled)?;
    let scale = 1.0 / (d as f64).sqrt();
    Ok(scores
        .data()
        .chunks(sample)
        .map(|row| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mean = row.iter().sum::<f64>() / sample as f64;
            (max - mean) * scale
        })
        .collect())
}

/// Query indices chosen by the sparsity measurement, ascending.
pub fn prob_select(q: &Tensor, k: &Tensor, seed: u64, base: LogBase) -> Result<Vec<usize>> {
    let (n, _) = q.dims2("prob_attention")?;
    let u = prob_budget(n, base);
    if u >= n {
        return Ok((0..n).collect());
    }
    let m = query_sparsity(q, k, prob_budget(k.shape()[0], base), seed)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| m[b].total_cmp(&m[a]).then(a.cmp(&b)));
    let mut chosen = order[..u].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Probabilistic attention: selected queries attend to every key, the rest
/// output the uniform average of the values.
pub fn prob_attend<O: Ops>(
    ops: &mut O,
    q: &O::Value,
    k: &O::Value,
    v: &O::Value,
    seed: u64,
    base: LogBase,
    counters: &mut AttnCounters,
) -> Result<O::Value> {
    let (n, d_q) = check_qkv(ops.value(q), ops.value(k), ops.value(v))?;
    let before = tensor::dot_products();
    let chosen = prob_select(ops.value(q), ops.value(k), seed, base)?;
    let sampled = tensor::dot_products() - before;
    counters.dot_products += sampled;
    counters.peak_score_elements += sampled;
    let u = chosen.len();

    let sel: Vec<isize> = chosen.iter().map(|&i| i as isize).collect();
    let q_sel = ops.gather_rows(q, &sel, 0.0)?;
    let kt = ops.transpose(k)?;
    let before = tensor::dot_products();
    let scores = ops.matmul(&q_sel, &kt)?;
    counters.dot_products += tensor::dot_products() - before;
    counters.peak_score_elements += (u * n) as u64;
    let scores = ops.scale(scores, 1.0 / (d_q as f64).sqrt());
    let weights = ops.softmax(scores)?;
    let selected_out = ops.matmul(&weights, v)?;
    if u == n {
        return Ok(selected_out);
    }

    // The uniform row is softmax of a zero score row, the same arithmetic a
    // zero query goes through in full attention.
    let uniform = tensor::softmax_lastdim(&Tensor::zeros(&[1, n]))?;
    let uniform = ops.constant(uniform);
    let mean_row = ops.matmul(&uniform, v)?;
    let stacked = ops.concat_rows(&[selected_out, mean_row])?;
    let mut route = vec![u as isize; n];
    for (pos, &i) in chosen.iter().enumerate() {
        route[i] = pos as isize;
    }
    ops.gather_rows(&stacked, &route, 0.0)
}

pub fn prob_attention(q: &Tensor, k: &Tensor, v: &Tensor, seed: u64) -> Result<Tensor> {
    prob_attend(
        &mut Eager::default(),
        q,
        k,
        v,
        seed,
        LogBase::Two,
        &mut AttnCounters::default(),
    )
}

/// Per-head projections `W_i^Q, W_i^K` (`d_a×d_q`), `W_i^V` (`d_a×d_v`)
/// and the shared output map `W^O` (`h·d_a × d_v`).
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub wq: Vec<Tensor>,
    pub wk: Vec<Tensor>,
    pub wv: Vec<Tensor>,
    pub wo: Tensor,
}

/// Uniform in `±1/√fan_in`.
pub fn init_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let numel = shape.iter().product();
    let data = (0..numel)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

impl HeadWeights {
    pub fn random(cfg: &AttnConfig, rng: &mut impl Rng) -> Self {
        let mut proj = |d_in: usize| -> Vec<Tensor> {
            (0..cfg.h)
                .map(|_| init_uniform(&[cfg.d_a, d_in], d_in, rng))
                .collect()
        };
        let wq = proj(cfg.d_q);
        let wk = proj(cfg.d_q);
        let wv = proj(cfg.d_v);
        let wo = init_uniform(&[cfg.h * cfg.d_a, cfg.d_v], cfg.h * cfg.d_a, rng);
        Self { wq, wk, wv, wo }
    }

    pub fn heads(&self) -> usize {
        self.wq.len()
    }
}

/// Multi-head weights bound to values of some [`Ops`] backend.
#[derive(Debug, Clone)]
pub struct HeadParams<V> {
    pub wq: Vec<V>,
    pub wk: Vec<V>,
    pub wv: Vec<V>,
    pub wo: V,
}

impl<V> HeadParams<V> {
    pub fn bind<O: Ops<Value = V>>(ops: &mut O, w: &HeadWeights) -> Self {
        let mut bind_all = |ts: &[Tensor]| ts.iter().map(|t| ops.param(t)).collect::<Vec<_>>();
        let wq = bind_all(&w.wq);
        let wk = bind_all(&w.wk);
        let wv = bind_all(&w.wv);
        let wo = ops.param(&w.wo);
        Self { wq, wk, wv, wo }
    }
}

/// Optional sink for the projected queries and keys of each head.
pub type HeadProbe<'a> = Option<&'a mut Vec<(Tensor, Tensor)>>;

/// `Concat(head_1, …, head_h)·W^O` with `head_i = attn(Q W_iᵀ, K W_iᵀ, V W_iᵀ)`.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attend<O: Ops>(
    ops: &mut O,
    q: &O::Value,
    k: &O::Value,
    v: &O::Value,
    w: &HeadParams<O::Value>,
    kind: Attention,
    counters: &mut AttnCounters,
    mut probe: HeadProbe<'_>,
) -> Result<O::Value> {
    let mut heads = Vec::with_capacity(w.wq.len());
    for i in 0..w.wq.len() {
        let head_kind = match kind {
            Attention::Prob { seed, log_base } => Attention::Prob {
                seed: seed.wrapping_add(i as u64),
                log_base,
            },
            other => other,
        };
        let wq = ops.transpose(&w.wq[i])?;
        let wk = ops.transpose(&w.wk[i])?;
        let wv = ops.transpose(&w.wv[i])?;
        let qi = ops.matmul(q, &wq)?;
        let ki = ops.matmul(k, &wk)?;
        let vi = ops.matmul(v, &wv)?;
        if let Some(p) = probe.as_deref_mut() {
            p.push((ops.value(&qi).clone(), ops.value(&ki).clone()));
        }
        heads.push(attend(ops, head_kind, &qi, &ki, &vi, counters)?);
    }
    let cat = ops.concat_cols(&heads)?;
    ops.matmul(&cat, &w.wo)
}

pub fn multi_head(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    w: &HeadWeights,
    kind: Attention,
) -> Result<Tensor> {
    let mut ops = Eager::default();
    let params = HeadParams::bind(&mut ops, w);
    multi_head_attend(
        &mut ops,
        q,
        k,
        v,
        &params,
        kind,
        &mut AttnCounters::default(),
        None,
    )
}

/// Parameter count of one multi-head layer: the count implied by the
/// matrix shapes, and the closed form `d_a(2d_q + (h+1)d_v)` as printed in
/// the source derivation. They agree only when `h = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MultiHeadParamCount {
    pub exact: usize,
    pub printed_formula: usize,
}

pub fn count_multihead_params(cfg: &AttnConfig) -> MultiHeadParamCount {
    let AttnConfig {
        d_q, d_v, h, d_a, ..
    } = *cfg;
    MultiHeadParamCount {
        exact: h * d_a * (2 * d_q + d_v) + h * d_a * d_v,
        printed_formula: d_a * (2 * d_q + (h + 1) * d_v),
    }
}

/// Mean over rows of the unmasked attention mass falling inside the band
/// `i−L+1 ≤ j ≤ i`.
pub fn attention_band_mass(q: &Tensor, k: &Tensor, l: usize) -> Result<f64> {
    let rows = attention_band_mass_rows(q, k, l)?;
    Ok(rows.iter().sum::<f64>() / rows.len() as f64)
}

/// Band mass of each query row separately.
pub fn attention_band_mass_rows(q: &Tensor, k: &Tensor, l: usize) -> Result<Vec<f64>> {
    let (n, d_q) = q.dims2("attention_band_mass")?;
    let kt = k.transpose_last2()?;
    let scores = tensor::matmul_batched(q, &kt)?;
    let (_, nk) = scores.dims2("attention_band_mass")?;
    let weights = tensor::softmax_lastdim_with(
        scores.map(|x| x / (d_q as f64).sqrt()),
        tensor::Exec::default(),
    )?;
    Ok((0..n)
        .map(|i| {
            let lo = (i + 1).saturating_sub(l);
            let hi = i.min(nk.saturating_sub(1));
            if lo <= hi {
                weights.row(i)[lo..=hi].iter().sum::<f64>()
            } else {
                0.0
            }
        })
        .collect())
}

/// `out[i] = X[pi[i]]`.
pub fn permute_rows(x: &Tensor, pi: &[usize]) -> Result<Tensor> {
    let (n, _) = x.dims2("permute_rows")?;
    let mut seen = vec![false; n];
    if pi.len() != n
        || !pi
            .iter()
            .all(|&p| p < n && !std::mem::replace(&mut seen[p], true))
    {
        return Err(Error::InvalidArgument(format!(
            "not a permutation of 0..{n}: {pi:?}"
        )));
    }
    let idx: Vec<isize> = pi.iter().map(|&p| p as isize).collect();
    tensor::gather_rows_padded(x, &idx, 0.0)
}

pub fn invert_permutation(pi: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; pi.len()];
    for (i, &p) in pi.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::{random_matrix, rng};

    #[test]
    fn band_mask_examples() {
        let m = band_mask(3, 1).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m.at2(i, j) == 0.0, i == j);
            }
        }
        let m = band_mask(3, 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m.at2(i, j) == 0.0, j <= i);
            }
        }
        let m = band_mask(6, 2).unwrap();
        assert_eq!(m.row(0).iter().filter(|x| **x == 0.0).count(), 1);
        for i in 1..6 {
            let kept: Vec<usize> = (0..6).filter(|&j| m.at2(i, j) == 0.0).collect();
            assert_eq!(kept, vec![i - 1, i]);
        }
        assert!(band_mask(3, 0).is_err());
        assert!(band_mask(3, 4).is_err());
    }

    #[test]
    fn band_mask_row_counts() {
        for n in 1..10 {
            for l in 1..=n {
                let m = band_mask(n, l).unwrap();
                for i in 0..n {
                    let finite = m.row(i).iter().filter(|x| x.is_finite()).count();
                    assert_eq!(finite, (i + 1).min(l));
                }
            }
        }
    }

    #[test]
    fn full_attention_single_row_returns_v() {
        let mut r = rng(1);
        let (q, k, v) = (
            random_matrix(&mut r, 1, 3),
            random_matrix(&mut r, 1, 3),
            random_matrix(&mut r, 1, 2),
        );
        assert_eq!(full_attention(&q, &k, &v, None).unwrap(), v);
    }

    #[test]
    fn zero_keys_average_values() {
        let mut r = rng(2);
        let q = random_matrix(&mut r, 5, 3);
        let v = random_matrix(&mut r, 5, 2);
        let out = full_attention(&q, &Tensor::zeros(&[5, 3]), &v, None).unwrap();
        for c in 0..2 {
            let mean: f64 = (0..5).map(|i| v.at2(i, c)).sum::<f64>() / 5.0;
            for i in 0..5 {
                assert!((out.at2(i, c) - mean).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn masked_attention_matches_per_row_brute_force() {
        let mut r = rng(3);
        let (q, k, v) = (
            random_matrix(&mut r, 4, 2),
            random_matrix(&mut r, 4, 2),
            random_matrix(&mut r, 4, 2),
        );
        let out = full_attention(&q, &k, &v, Some(&band_mask(4, 2).unwrap())).unwrap();
        for i in 0..4usize {
            let lo = i.saturating_sub(1);
            let s: Vec<f64> = (lo..=i)
                .map(|j| (q.row(i)[0] * k.row(j)[0] + q.row(i)[1] * k.row(j)[1]) / 2f64.sqrt())
                .collect();
            let z: f64 = s.iter().map(|x| x.exp()).sum();
            for c in 0..2 {
                let want: f64 = (lo..=i)
                    .zip(&s)
                    .map(|(j, x)| x.exp() / z * v.at2(j, c))
                    .sum();
                assert!((out.at2(i, c) - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn oracle_special_cases() {
        let mut r = rng(4);
        let (q, k, v) = (
            random_matrix(&mut r, 6, 3),
            random_matrix(&mut r, 6, 3),
            random_matrix(&mut r, 6, 2),
        );
        assert_eq!(masked_full_attention_oracle(&q, &k, &v, 1).unwrap(), v);

        let causal = Tensor::from_rows(
            &(0..6)
                .map(|i| {
                    (0..6)
                        .map(|j| if j <= i { 0.0 } else { f64::NEG_INFINITY })
                        .collect()
                })
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let a = masked_full_attention_oracle(&q, &k, &v, 6).unwrap();
        let b = full_attention(&q, &k, &v, Some(&causal)).unwrap();
        assert_eq!(a, b);

        // L = 2: a two-term softmax over V_{i-1}, V_i.
        let out = masked_full_attention_oracle(&q, &k, &v, 2).unwrap();
        let dot = |i: usize, j: usize| {
            (0..3).map(|t| q.at2(i, t) * k.at2(j, t)).sum::<f64>() / 3f64.sqrt()
        };
        for i in 1..6 {
            let w = 1.0 / (1.0 + (dot(i, i) - dot(i, i - 1)).exp());
            for c in 0..2 {
                let want = w * v.at2(i - 1, c) + (1.0 - w) * v.at2(i, c);
                assert!((out.at2(i, c) - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn multi_head_examples() {
        let mut r = rng(5);
        let (q, k, v) = (
            random_matrix(&mut r, 5, 3),
            random_matrix(&mut r, 5, 3),
            random_matrix(&mut r, 5, 3),
        );
        let w = HeadWeights {
            wq: vec![Tensor::eye(3)],
            wk: vec![Tensor::eye(3)],
            wv: vec![Tensor::eye(3)],
            wo: Tensor::eye(3),
        };
        let a = multi_head(&q, &k, &v, &w, Attention::Full).unwrap();
        let b = full_attention(&q, &k, &v, None).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-15);

        let cfg = AttnConfig::new(5, 3, 2, 2, 2).unwrap();
        let v2 = random_matrix(&mut r, 5, 2);
        let mut w = HeadWeights::random(&cfg, &mut r);
        w.wo = Tensor::zeros(&[2, 2]);
        let out = multi_head(&q, &k, &v2, &w, Attention::Full).unwrap();
        assert_eq!(out, Tensor::zeros(&[5, 2]));
    }

    #[test]
    fn multi_head_param_counts() {
        let c = count_multihead_params(&AttnConfig::new(4, 1, 1, 1, 1).unwrap());
        assert_eq!(c.exact, 4);
        assert_eq!(c.printed_formula, 4);
        for (d_q, d_v, d_a) in [(3, 5, 2), (7, 1, 4), (2, 2, 2)] {
            let cfg = AttnConfig {
                n: 4,
                d_q,
                d_v,
                l: 1,
                h: 1,
                d_a,
            };
            let c = count_multihead_params(&cfg);
            assert_eq!(c.exact, d_a * (2 * d_q + 2 * d_v));
            assert_eq!(c.exact, c.printed_formula);
        }
        let c = count_multihead_params(&AttnConfig::new(16, 64, 64, 4, 8).unwrap());
        assert_eq!(c.exact, 16384);
        assert_eq!(c.printed_formula, 8 * (128 + 9 * 64));
    }

    #[test]
    fn prob_attention_saturated_equals_full() {
        let mut r = rng(6);
        // n = 8: u = 5·3 = 15 ≥ 8.
        let (q, k, v) = (
            random_matrix(&mut r, 8, 3),
            random_matrix(&mut r, 8, 3),
            random_matrix(&mut r, 8, 2),
        );
        let a = prob_attention(&q, &k, &v, 11).unwrap();
        let b = full_attention(&q, &k, &v, None).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() <= 1e-12);
    }

    #[test]
    fn prob_attention_unselected_rows_are_uniform_average() {
        let mut r = rng(7);
        let n = 64;
        let (q, k, v) = (
            random_matrix(&mut r, n, 4),
            random_matrix(&mut r, n, 4),
            random_matrix(&mut r, n, 3),
        );
        let chosen = prob_select(&q, &k, 99, LogBase::Two).unwrap();
        assert_eq!(chosen.len(), 30);
        let out = prob_attention(&q, &k, &v, 99).unwrap();
        let w = 1.0 / n as f64;
        let mean: Vec<f64> = (0..3)
            .map(|c| (0..n).fold(0.0, |acc, j| acc + w * v.at2(j, c)))
            .collect();
        let full = full_attention(&q, &k, &v, None).unwrap();
        for i in 0..n {
            if chosen.contains(&i) {
                assert!(out
                    .row(i)
                    .iter()
                    .zip(full.row(i))
                    .all(|(a, b)| (a - b).abs() < 1e-12));
            } else {
                assert_eq!(out.row(i), mean.as_slice());
            }
        }
    }

    #[test]
    fn prob_attention_zero_queries_give_column_mean() {
        let mut r = rng(8);
        let n = 40;
        let (k, v) = (random_matrix(&mut r, n, 3), random_matrix(&mut r, n, 2));
        let out = prob_attention(&Tensor::zeros(&[n, 3]), &k, &v, 3).unwrap();
        for c in 0..2 {
            let mean: f64 = (0..n).map(|i| v.at2(i, c)).sum::<f64>() / n as f64;
            for i in 0..n {
                assert!((out.at2(i, c) - mean).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn band_mass_examples() {
        let mut r = rng(9);
        let q = random_matrix(&mut r, 1, 2);
        assert_eq!(
            attention_band_mass(&q, &random_matrix(&mut r, 1, 2), 1).unwrap(),
            1.0
        );

        let n = 7;
        let q = random_matrix(&mut r, n, 3);
        for l in 1..=n {
            let got = attention_band_mass(&q, &Tensor::zeros(&[n, 3]), l).unwrap();
            let want = (0..n)
                .map(|i| (i + 1).min(l) as f64 / n as f64)
                .sum::<f64>()
                / n as f64;
            assert!((got - want).abs() < 1e-14);
        }

        let k = random_matrix(&mut r, n, 3);
        let mut prev = 0.0;
        for l in 1..=n {
            let m = attention_band_mass(&q, &k, l).unwrap();
            assert!(m >= prev - 1e-15 && m > 0.0 && m <= 1.0 + 1e-12);
            prev = m;
        }
    }

    #[test]
    fn permutation_examples() {
        let x = Tensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        assert_eq!(permute_rows(&x, &[0, 1]).unwrap(), x);
        assert_eq!(permute_rows(&x, &[1, 0]).unwrap().data(), &[2.0, 1.0]);
        assert!(permute_rows(&x, &[1, 1]).is_err());
        assert!(permute_rows(&x, &[0]).is_err());

        let mut r = rng(10);
        let x = random_matrix(&mut r, 6, 2);
        let pi = [3, 0, 5, 1, 4, 2];
        let back = permute_rows(&permute_rows(&x, &pi).unwrap(), &invert_permutation(&pi)).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn ceil_log_values() {
        assert_eq!(LogBase::Two.ceil_log(1), 0);
        assert_eq!(LogBase::Two.ceil_log(2), 1);
        assert_eq!(LogBase::Two.ceil_log(256), 8);
        assert_eq!(LogBase::Two.ceil_log(257), 9);
        assert_eq!(LogBase::Two.ceil_log(1000), 10);
        assert_eq!(LogBase::E.ceil_log(1000), 7);
    }
}
