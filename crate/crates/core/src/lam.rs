//! Local attention in `Θ(nL)` time and memory.
//!
//! Queries are cut into `s = ⌊n/L⌋` blocks of `L` rows. Block `r` can only
//! see keys `(r−1)L+1 ..= (r+1)L−1`, so keys and values are cut into
//! overlapping blocks of `2L−1` rows (zero-filled before row 0). One batched
//! product then yields every score the band mask keeps, plus `L−1` extra
//! per row that the local mask `T_M` removes again:
//!
//! ```text
//! T_A = T_Q · T_Kᵀ                       s × L × (2L−1)
//! T_S = softmax((T_A + T_M) / √d_q)
//! T_R = T_S · T_V                        s × L × d_v
//! ```
//!
//! Rows `sL..n` (fewer than `L`) are computed as one small direct slab.
//!
//! Index maps: row `i` lives at `(r, i1) = (i div L, i mod L)`; key `j` seen
//! from block `r` sits at `j1 = j − (r−1)L − 1`. For these, `i−L+1 ≤ j ≤ i`
//! iff `i1 ≤ j1 ≤ i1+L−1`.
//!
//! In block 0 the first `L−1` key slots are padding. A padded key scores 0,
//! not `-inf`, so `T_M` also masks every slot whose source row is negative;
//! without that, rows `i < L−1` leak weight onto the padding.

use std::str::FromStr;

use crate::attention::{AttnCounters, LogBase};
use crate::error::{Error, Result};
use crate::ops::{Eager, Ops};
use crate::tensor::{self, Exec, Tensor};

pub type LamCounters = AttnCounters;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LamOptions {
    pub exec: Exec,
    /// Mask key slots that fall before row 0. Only switched off to check
    /// that the verification suite catches the resulting leak.
    pub mask_padding: bool,
}

impl Default for LamOptions {
    fn default() -> Self {
        Self {
            exec: Exec::default(),
            mask_padding: true,
        }
    }
}

/// `(r, i1)` with `i = r·L + i1`.
pub fn index_map(i: usize, l: usize) -> (usize, usize) {
    let i1 = i % l;
    ((i - i1) / l, i1)
}

/// Key slot `j1 = j − (r−1)L − 1` of key `j` inside block `r`.
pub fn key_slot(j: usize, r: usize, l: usize) -> isize {
    j as isize - (r as isize - 1) * l as isize - 1
}

/// Source key row of slot `j1` in block `r`; negative for padding.
pub fn key_source(r: usize, j1: usize, l: usize) -> isize {
    (r as isize - 1) * l as isize + 1 + j1 as isize
}

/// Block geometry for a sequence of length `n` and band `L`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockLayout {
    pub n: usize,
    pub l: usize,
    /// Number of full blocks, `⌊n/L⌋`.
    pub s: usize,
    /// Rows `s·L..n` handled by the direct slab.
    pub remainder: usize,
}

impl BlockLayout {
    pub fn new(n: usize, l: usize) -> Result<Self> {
        if !(1..=n).contains(&l) {
            return Err(Error::InvalidArgument(format!(
                "band size L = {l} outside 1..={n}"
            )));
        }
        Ok(Self {
            n,
            l,
            s: n / l,
            remainder: n % l,
        })
    }

    pub fn key_width(&self) -> usize {
        2 * self.l - 1
    }

    pub fn blocked_rows(&self) -> usize {
        self.s * self.l
    }

    pub fn query_indices(&self) -> Vec<isize> {
        (0..self.blocked_rows() as isize).collect()
    }

    pub fn key_indices(&self) -> Vec<isize> {
        (0..self.s)
            .flat_map(|r| (0..self.key_width()).map(move |j1| key_source(r, j1, self.l)))
            .collect()
    }

    pub fn remainder_query_indices(&self) -> Vec<isize> {
        (self.blocked_rows() as isize..self.n as isize).collect()
    }

    /// Keys `sL−L+1 .. n` seen by the remainder rows.
    pub fn remainder_key_indices(&self) -> Vec<isize> {
        let start = (self.blocked_rows() + 1).saturating_sub(self.l);
        (start as isize..self.n as isize).collect()
    }

    /// Score elements the kernel materializes: `s·L·(2L−1)` plus the slab.
    pub fn score_elements(&self) -> u64 {
        let slab = self.remainder * (self.remainder + self.l - 1);
        (self.s * self.l * self.key_width() + slab) as u64
    }

    /// Dot products the kernel performs; equal to `(2L−1)·n` when `L | n`.
    pub fn dot_products(&self) -> u64 {
        self.score_elements()
    }
}

/// `T_M`: `s × L × (2L−1)`, zero where `i1 ≤ j1 ≤ i1+L−1` and the key slot
/// maps to a real row, `-inf` elsewhere.
pub fn local_mask(s: usize, l: usize) -> Tensor {
    local_mask_with(s, l, true)
}

pub fn local_mask_with(s: usize, l: usize, mask_padding: bool) -> Tensor {
    let w = 2 * l - 1;
    let mut m = Tensor::full(&[s, l, w], f64::NEG_INFINITY);
    let data = m.data_mut();
    for r in 0..s {
        for i1 in 0..l {
            for j1 in i1..i1 + l {
                if !mask_padding || key_source(r, j1, l) >= 0 {
                    data[(r * l + i1) * w + j1] = 0.0;
                }
            }
        }
    }
    m
}

/// Band mask of the remainder slab: rows `sL+a`, keys `sL−L+1+b`.
fn slab_mask(rows: usize, l: usize) -> Tensor {
    let cols = rows + l - 1;
    let mut m = Tensor::full(&[rows, cols], f64::NEG_INFINITY);
    for a in 0..rows {
        for b in a..a + l {
            m.data_mut()[a * cols + b] = 0.0;
        }
    }
    m
}

fn layout_for(t: &Tensor, l: usize) -> Result<BlockLayout> {
    let (n, _) = t.dims2("lam split")?;
    BlockLayout::new(n, l)
}

/// `T_Q[r, i1, ·] = Q[rL + i1, ·]`, rows `0..sL`.
pub fn split_queries(q: &Tensor, l: usize) -> Result<Tensor> {
    let lay = layout_for(q, l)?;
    let d = q.shape()[1];
    tensor::gather_rows_padded(q, &lay.query_indices(), 0.0)?.reshape(&[lay.s, l, d])
}

/// `T_K[r, j1, ·] = K[(r−1)L + 1 + j1, ·]`, zero before row 0.
pub fn split_keys(k: &Tensor, l: usize) -> Result<Tensor> {
    let lay = layout_for(k, l)?;
    let d = k.shape()[1];
    tensor::gather_rows_padded(k, &lay.key_indices(), 0.0)?.reshape(&[lay.s, lay.key_width(), d])
}

/// Same layout as [`split_keys`]; padding rows are zero.
pub fn split_values(v: &Tensor, l: usize) -> Result<Tensor> {
    split_keys(v, l)
}

/// The blocked operands of one local-attention call.
#[derive(Debug, Clone)]
pub struct BlockedAttn {
    pub layout: BlockLayout,
    pub tq: Tensor,
    pub tk: Tensor,
    pub tv: Tensor,
    pub tm: Tensor,
}

impl BlockedAttn {
    pub fn new(q: &Tensor, k: &Tensor, v: &Tensor, l: usize, opts: LamOptions) -> Result<Self> {
        check_shapes(q, k, v)?;
        let layout = layout_for(q, l)?;
        Ok(Self {
            layout,
            tq: split_queries(q, l)?,
            tk: split_keys(k, l)?,
            tv: split_values(v, l)?,
            tm: local_mask_with(layout.s, l, opts.mask_padding),
        })
    }

    pub fn remainder_rows(&self) -> usize {
        self.layout.remainder
    }

    /// `T_S = softmax((T_A + T_M)/√d_q)`, `s × L × (2L−1)`.
    pub fn weights(&self) -> Result<Tensor> {
        let d_q = self.tq.shape()[2];
        let mut scores = tensor::matmul_batched(&self.tq, &self.tk.transpose_last2()?)?;
        scores.add_inplace(&self.tm)?;
        scores.map_inplace(|x| x * (1.0 / (d_q as f64).sqrt()));
        tensor::softmax_lastdim_with(scores, Exec::default())
    }

    /// Output rows `rL .. (r+1)L`, computed from block `r` alone.
    pub fn block_output(&self, r: usize) -> Result<Tensor> {
        let take = |t: &Tensor| -> Result<Tensor> {
            let (_, a, b) = t.dims3("block")?;
            Tensor::new(vec![a, b], t.data()[r * a * b..(r + 1) * a * b].to_vec())
        };
        let d_q = self.tq.shape()[2];
        let mut scores = tensor::matmul_batched_with(
            &take(&self.tq)?,
            &take(&self.tk)?.transpose_last2()?,
            Exec::Sequential,
        )?;
        scores.add_inplace(&take(&self.tm)?)?;
        scores.map_inplace(|x| x * (1.0 / (d_q as f64).sqrt()));
        let weights = tensor::softmax_lastdim_with(scores, Exec::Sequential)?;
        tensor::matmul_batched_with(&weights, &take(&self.tv)?, Exec::Sequential)
    }
}

fn check_shapes(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(usize, usize)> {
    let (n, d_q) = q.dims2("lam_forward")?;
    let (nk, dk) = k.dims2("lam_forward")?;
    let (nv, _) = v.dims2("lam_forward")?;
    if nk != n || dk != d_q {
        return Err(Error::Shape {
            op: "lam_forward",
            left: q.shape().to_vec(),
            right: k.shape().to_vec(),
        });
    }
    if nv != n {
        return Err(Error::Shape {
            op: "lam_forward",
            left: q.shape().to_vec(),
            right: v.shape().to_vec(),
        });
    }
    Ok((n, d_q))
}

/// Local attention on any [`Ops`] backend.
pub fn lam_attend<O: Ops>(
    ops: &mut O,
    q: &O::Value,
    k: &O::Value,
    v: &O::Value,
    l: usize,
    opts: LamOptions,
    counters: &mut LamCounters,
) -> Result<O::Value> {
    let (n, d_q) = check_shapes(ops.value(q), ops.value(k), ops.value(v))?;
    let d_v = ops.value(v).shape()[1];
    let lay = BlockLayout::new(n, l)?;
    let (s, w) = (lay.s, lay.key_width());
    let scale = 1.0 / (d_q as f64).sqrt();

    let key_idx = lay.key_indices();
    let tq = ops.gather_rows(q, &lay.query_indices(), 0.0)?;
    let tq = ops.reshape(tq, &[s, l, d_q])?;
    let tk = ops.gather_rows(k, &key_idx, 0.0)?;
    let tk = ops.reshape(tk, &[s, w, d_q])?;
    let tk_t = ops.transpose(&tk)?;
    let tv = ops.gather_rows(v, &key_idx, 0.0)?;
    let tv = ops.reshape(tv, &[s, w, d_v])?;

    let before = tensor::dot_products();
    let ta = ops.matmul(&tq, &tk_t)?;
    counters.dot_products += tensor::dot_products() - before;
    counters.peak_score_elements += (s * l * w) as u64;

    let ta = ops.add_const(ta, &local_mask_with(s, l, opts.mask_padding))?;
    let ta = ops.scale(ta, scale);
    let ts = ops.softmax(ta)?;
    let tr = ops.matmul(&ts, &tv)?;
    let blocked = ops.reshape(tr, &[s * l, d_v])?;
    if lay.remainder == 0 {
        return Ok(blocked);
    }

    let key_idx = lay.remainder_key_indices();
    let qr = ops.gather_rows(q, &lay.remainder_query_indices(), 0.0)?;
    let kr = ops.gather_rows(k, &key_idx, 0.0)?;
    let kr_t = ops.transpose(&kr)?;
    let vr = ops.gather_rows(v, &key_idx, 0.0)?;
    let before = tensor::dot_products();
    let scores = ops.matmul(&qr, &kr_t)?;
    counters.dot_products += tensor::dot_products() - before;
    counters.peak_score_elements += (lay.remainder * key_idx.len()) as u64;
    let scores = ops.add_const(scores, &slab_mask(lay.remainder, l))?;
    let scores = ops.scale(scores, scale);
    let weights = ops.softmax(scores)?;
    let tail = ops.matmul(&weights, &vr)?;
    ops.concat_rows(&[blocked, tail])
}

/// Local attention of `Q, K, V` (`n×d_q`, `n×d_q`, `n×d_v`) with band `L`.
pub fn lam_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    l: usize,
    counters: &mut LamCounters,
) -> Result<Tensor> {
    lam_forward_with(q, k, v, l, counters, LamOptions::default())
}

pub fn lam_forward_with(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    l: usize,
    counters: &mut LamCounters,
    opts: LamOptions,
) -> Result<Tensor> {
    lam_attend(&mut Eager::new(opts.exec), q, k, v, l, opts, counters)
}

/// How the band size is derived from the sequence length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LRule {
    /// `4⌈log n⌉`
    #[default]
    FourCeilLog,
    /// `⌈4 log n⌉`
    CeilFourLog,
    Fixed(usize),
}

impl LRule {
    /// Band size for length `n`, clamped to `1..=n`.
    pub fn band(self, n: usize, base: LogBase) -> usize {
        let raw = match self {
            LRule::FourCeilLog => 4 * base.ceil_log(n),
            LRule::CeilFourLog => (4.0 * base.log(n.max(1) as f64)).ceil() as usize,
            LRule::Fixed(k) => k,
        };
        raw.clamp(1, n.max(1))
    }
}

impl FromStr for LRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "4ceil" => Ok(LRule::FourCeilLog),
            "ceil4" => Ok(LRule::CeilFourLog),
            _ => s
                .strip_prefix("fixed:")
                .and_then(|k| k.parse().ok())
                .filter(|&k: &usize| k >= 1)
                .map(LRule::Fixed)
                .ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "L rule `{s}`: expected 4ceil, ceil4 or fixed:<k>"
                    ))
                }),
        }
    }
}

/// `min(n, 4⌈log₂ n⌉)`, and 1 for `n = 1`.
pub fn default_l(n: usize) -> usize {
    LRule::default().band(n, LogBase::Two)
}
