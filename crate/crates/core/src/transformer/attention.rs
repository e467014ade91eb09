//! Scaled dot-product attention over explicit per-query visibility sets.
//!
//! Keys outside a query's set take no part in its softmax at all, so a
//! one-key window needs no masking arithmetic and causal attention never
//! touches −∞.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{softmax_in_place, Tensor};

/// How far back each position may attend.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Context {
    FullCausal,
    Window(usize),
}

impl Context {
    /// Earliest visible position (0-based) for query `t`.
    pub fn first_visible(self, t: usize) -> usize {
        match self {
            Context::FullCausal => 0,
            Context::Window(k) => (t + 1).saturating_sub(k),
        }
    }
}

/// `sets[t]` lists the key rows query row `t` may attend to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Visibility {
    sets: Vec<Vec<usize>>,
}

impl Visibility {
    pub fn new(sets: Vec<Vec<usize>>) -> Result<Self> {
        if let Some(t) = sets.iter().position(Vec::is_empty) {
            return Err(Error::contract(format!("query {t} has an empty visibility set")));
        }
        Ok(Self { sets })
    }

    pub fn full(t: usize) -> Self {
        Self {
            sets: (0..t).map(|_| (0..t).collect()).collect(),
        }
    }

    pub fn for_context(ctx: Context, t: usize) -> Self {
        Self::time_major(ctx, t, 1)
    }

    /// `batch` independent sequences of length `steps`, laid out time-major
    /// (row `s·batch + b` is step `s` of sequence `b`).
    pub fn time_major(ctx: Context, steps: usize, batch: usize) -> Self {
        let mut sets = Vec::with_capacity(steps * batch);
        for s in 0..steps {
            for b in 0..batch {
                sets.push((ctx.first_visible(s)..=s).map(|p| p * batch + b).collect());
            }
        }
        Self { sets }
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn set(&self, t: usize) -> &[usize] {
        &self.sets[t]
    }

    fn total(&self) -> usize {
        self.sets.iter().map(Vec::len).sum()
    }
}

fn check_shapes<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, heads: usize, vis: &Visibility) -> Result<()> {
    let d = q.cols();
    if q.shape().len() != 2
        || k.shape() != v.shape()
        || k.cols() != d
        || heads == 0
        || d % heads != 0
        || vis.len() != q.rows()
        || vis.sets.iter().flatten().any(|&s| s >= k.rows())
    {
        return Err(Error::Dimension {
            op: "attention",
            left: q.shape().to_vec(),
            right: k.shape().to_vec(),
        });
    }
    Ok(())
}

/// Single-head attention: `out[t] = Σ_{s∈vis[t]} softmax_s(q_t·k_s/√d)·v_s`.
pub fn scaled_dot_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    vis: &Visibility,
) -> Result<Tensor<T>> {
    Ok(multi_head_forward(q, k, v, 1, vis)?.0)
}

/// Returns the output and the attention weights, flattened as
/// `[head][query][visible key]`.
pub(crate) fn multi_head_forward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    vis: &Visibility,
) -> Result<(Tensor<T>, Vec<T>)> {
    check_shapes(q, k, v, heads, vis)?;
    let d = q.cols();
    let dh = d / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut out = Tensor::zeros(q.shape());
    let mut probs = Vec::with_capacity(heads * vis.total());
    let mut scores = Vec::new();
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for t in 0..q.rows() {
            let qt = &q.row(t)[cols.clone()];
            scores.clear();
            scores.extend(vis.set(t).iter().map(|&s| {
                let ks = &k.row(s)[cols.clone()];
                qt.iter().zip(ks).map(|(&a, &b)| a * b).sum::<T>() * scale
            }));
            softmax_in_place(&mut scores);
            let orow = &mut out.row_mut(t)[cols.clone()];
            for (&s, &p) in vis.set(t).iter().zip(&scores) {
                for (o, &vv) in orow.iter_mut().zip(&v.row(s)[cols.clone()]) {
                    *o += p * vv;
                }
            }
            probs.extend_from_slice(&scores);
        }
    }
    Ok((out, probs))
}

pub(crate) fn multi_head_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    vis: &Visibility,
    probs: &[T],
    gout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let d = q.cols();
    let dh = d / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut dq = Tensor::zeros(q.shape());
    let mut dk = Tensor::zeros(k.shape());
    let mut dv = Tensor::zeros(v.shape());
    let mut off = 0;
    let mut dp = Vec::new();
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for t in 0..q.rows() {
            let set = vis.set(t);
            let p = &probs[off..off + set.len()];
            off += set.len();
            let g = &gout.row(t)[cols.clone()];
            dp.clear();
            for (&s, &ps) in set.iter().zip(p) {
                let vs = &v.row(s)[cols.clone()];
                dp.push(g.iter().zip(vs).map(|(&a, &b)| a * b).sum::<T>());
                for (o, &gv) in dv.row_mut(s)[cols.clone()].iter_mut().zip(g) {
                    *o += ps * gv;
                }
            }
            let mean: T = p.iter().zip(&dp).map(|(&a, &b)| a * b).sum();
            for (i, &s) in set.iter().enumerate() {
                let ds = p[i] * (dp[i] - mean) * scale;
                if ds == T::zero() {
                    continue;
                }
                for c in cols.clone() {
                    let kv = k.row(s)[c];
                    let qv = q.row(t)[c];
                    dq.row_mut(t)[c] += ds * kv;
                    dk.row_mut(s)[c] += ds * qv;
                }
            }
        }
    }
    (dq, dk, dv)
}
