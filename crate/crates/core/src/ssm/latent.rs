//! Discrete-latent and discrete-regression math: symlog squashing, two-hot
//! bins, categorical KL and straight-through categorical sampling.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::{log_softmax_lastdim, softmax_lastdim, Tensor};

pub fn symlog(v: f64) -> f64 {
    v.signum() * v.abs().ln_1p()
}

pub fn symexp(v: f64) -> f64 {
    v.signum() * v.abs().exp_m1()
}

/// Strictly increasing bin centers, symmetric about zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Bins(Vec<f64>);

impl Bins {
    pub fn new(centers: Vec<f64>) -> Result<Self> {
        if centers.len() < 2 || centers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::contract("bins must be at least two strictly increasing centers"));
        }
        let n = centers.len();
        if (0..n).any(|i| (centers[i] + centers[n - 1 - i]).abs() > 1e-12) {
            return Err(Error::contract("bins must be symmetric about zero"));
        }
        Ok(Self(centers))
    }

    /// `n` (odd) centers evenly spaced on `[−symlog(limit), symlog(limit)]`.
    pub fn symlog_spaced(n: usize, limit: f64) -> Result<Self> {
        if n < 3 || n % 2 == 0 {
            return Err(Error::contract("bin count must be odd and at least 3"));
        }
        let hi = symlog(limit);
        let half = (n - 1) / 2;
        let centers = (0..n)
            .map(|i| {
                let k = i as f64 - half as f64;
                hi * k / half as f64
            })
            .collect();
        Self::new(centers)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn centers(&self) -> &[f64] {
        &self.0
    }

    /// Two-hot weights of `v` after clipping it into the bin range.
    pub fn twohot_encode(&self, v: f64) -> Vec<f64> {
        let b = &self.0;
        let n = b.len();
        let mut w = vec![0.0; n];
        let v = v.clamp(b[0], b[n - 1]);
        // first center strictly above v
        let hi = b.partition_point(|&c| c <= v);
        if hi == 0 {
            w[0] = 1.0;
        } else if hi == n {
            w[n - 1] = 1.0;
        } else {
            let lo = hi - 1;
            let span = b[hi] - b[lo];
            w[hi] = (v - b[lo]) / span;
            w[lo] = (b[hi] - v) / span;
        }
        w
    }

    pub fn twohot_decode(&self, weights: &[f64]) -> f64 {
        weights.iter().zip(&self.0).map(|(w, c)| w * c).sum()
    }

    /// `symexp(Σ softmax(logits)·bins)`, row by row.
    pub fn expected_value<T: Scalar>(&self, logits: &Tensor<T>) -> Vec<f64> {
        let p = softmax_lastdim(logits);
        (0..p.rows())
            .map(|i| {
                let w: Vec<f64> = p.row(i).iter().map(|v| v.as_f64()).collect();
                symexp(self.twohot_decode(&w))
            })
            .collect()
    }

    /// Two-hot targets for `symlog(values)`, one row per value.
    pub fn targets<T: Scalar>(&self, values: &[f64]) -> Tensor<T> {
        let data = values
            .iter()
            .flat_map(|&v| self.twohot_encode(symlog(v)))
            .map(T::of)
            .collect();
        Tensor::from_parts(vec![values.len(), self.len()], data)
    }
}

/// Σ over rows of KL(Cat(softmax p) ‖ Cat(softmax q)).
pub fn kl_categorical<T: Scalar>(p_logits: &Tensor<T>, q_logits: &Tensor<T>) -> Result<f64> {
    p_logits.same_shape("kl_categorical", q_logits)?;
    let lp = log_softmax_lastdim(p_logits);
    let lq = log_softmax_lastdim(q_logits);
    Ok(lp
        .data()
        .iter()
        .zip(lq.data())
        .map(|(&a, &b)| {
            let a = a.as_f64();
            a.exp() * (a - b.as_f64())
        })
        .sum::<f64>()
        .max(0.0))
}

/// `(1 − unimix)·softmax(logits) + unimix/C` per row.
pub fn mixed_probs<T: Scalar>(logits: &Tensor<T>, unimix: f64) -> Tensor<T> {
    let c = T::of(logits.cols() as f64);
    let u = T::of(unimix);
    softmax_lastdim(logits).map(|p| (T::one() - u) * p + u / c)
}

/// Index drawn from a probability row by inverse CDF.
pub fn sample_index<R: Rng + ?Sized, T: Scalar>(probs: &[T], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p.as_f64();
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// One-hot sample per row of `probs`.
pub fn sample_one_hot<R: Rng + ?Sized, T: Scalar>(probs: &Tensor<T>, rng: &mut R) -> Tensor<T> {
    let c = probs.cols();
    let mut out = Tensor::zeros(probs.shape());
    for i in 0..probs.rows() {
        let k = sample_index(probs.row(i), rng);
        out.data_mut()[i * c + k] = T::one();
    }
    out
}

/// Straight-through categorical sample of `[L×C]` logits: the returned
/// state is one-hot per group, with the mixed probabilities alongside.
pub fn sample_categorical_st<R: Rng + ?Sized, T: Scalar>(
    logits: &Tensor<T>,
    unimix: f64,
    rng: &mut R,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if !(0.0..1.0).contains(&unimix) {
        return Err(Error::contract(format!("unimix {unimix} outside [0, 1)")));
    }
    let probs = mixed_probs(logits, unimix);
    Ok((sample_one_hot(&probs, rng), probs))
}

/// How stochastic latents enter downstream computation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentMode {
    /// One-hot samples with straight-through gradients.
    Sample,
    /// The mixed probabilities themselves (smooth; used for gradient checks).
    Expected,
}

/// Graph-side latent: `[n × groups·classes]` logits in, `(z, probs, log probs)`
/// out, each `[n·groups × classes]` except `z` which keeps the flat layout.
pub struct GraphLatent {
    pub z: Var,
    pub probs: Var,
    pub log_probs: Var,
}

pub fn graph_latent<R: Rng + ?Sized, T: Scalar>(
    g: &Graph<T>,
    logits: Var,
    classes: usize,
    unimix: f64,
    mode: LatentMode,
    rng: &mut R,
) -> Result<GraphLatent> {
    let shape = g.shape(logits);
    let n = shape[0];
    let flat = shape[1];
    if flat % classes != 0 {
        return Err(Error::Dimension {
            op: "graph_latent",
            left: shape,
            right: vec![classes],
        });
    }
    let rows = g.reshape(logits, &[n * flat / classes, classes])?;
    let sm = g.softmax(rows);
    let probs = g.offset(
        g.scale(sm, T::of(1.0 - unimix)),
        T::of(unimix / classes as f64),
    );
    let log_probs = g.ln(probs);
    let z_rows = match mode {
        LatentMode::Expected => probs,
        LatentMode::Sample => {
            let onehot = sample_one_hot(&g.value(probs), rng);
            let onehot = g.constant(onehot);
            // value: onehot + (p − p) = onehot exactly; gradient: that of p
            let st = g.sub(probs, g.detach(probs))?;
            g.add(onehot, st)?
        }
    };
    let z = g.reshape(z_rows, &[n, flat])?;
    Ok(GraphLatent { z, probs, log_probs })
}
