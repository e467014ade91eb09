//! Post-LN transformer encoder without masks, positional encoding or dropout
//! by default, with a configurable attention context.
//!
//! Each layer computes
//! `y = LN(x + MHA(x))`, `out = LN(y + W2·silu(W1·y + b1) + b2)`,
//! where `MHA` uses separate bias-free Q/K/V projections and an output
//! projection `Wo`. [`Context::Window`]`(1)` is the single-token naive
//! variant; [`Context::FullCausal`] attends over the whole prefix.
//!
//! Two evaluation routes exist: [`encoder_forward`] records the whole
//! sequence on a [`Graph`] for training, and [`cache::encoder_step`]
//! consumes one token at a time against stored key/value rows.

pub mod attention;
pub mod cache;

use std::rc::Rc;

use rand::Rng;

pub use attention::{scaled_dot_attention, Context, Visibility};
pub use cache::{encoder_step, encoder_step_batch, EncoderCache};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{glorot, init_dense, ParameterStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub context: Context,
    pub positional_encoding: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 2,
            d_ff: 128,
            n_layers: 2,
            context: Context::FullCausal,
            positional_encoding: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::contract(format!("encoder config: {msg}")));
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.n_layers == 0 {
            return bad("all extents must be positive");
        }
        if self.d_model % self.n_heads != 0 {
            return bad("n_heads must divide d_model");
        }
        if self.context == Context::Window(0) {
            return bad("window must be at least 1");
        }
        Ok(())
    }
}

/// Parameter paths of one encoder layer.
#[derive(Clone, Debug)]
pub struct EncoderLayerParams {
    pub wq: String,
    pub wk: String,
    pub wv: String,
    pub wo: String,
    pub ffn1: String,
    pub ffn2: String,
    pub ln1: String,
    pub ln2: String,
}

impl EncoderLayerParams {
    pub fn at(prefix: &str, layer: usize) -> Self {
        let p = format!("{prefix}.layer{layer}");
        Self {
            wq: format!("{p}.wq"),
            wk: format!("{p}.wk"),
            wv: format!("{p}.wv"),
            wo: format!("{p}.wo"),
            ffn1: format!("{p}.ffn1"),
            ffn2: format!("{p}.ffn2"),
            ln1: format!("{p}.ln1"),
            ln2: format!("{p}.ln2"),
        }
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(
        &self,
        store: &mut ParameterStore<T>,
        cfg: &EncoderConfig,
        rng: &mut R,
    ) -> Result<()> {
        let d = cfg.d_model;
        for name in [&self.wq, &self.wk, &self.wv, &self.wo] {
            store.insert(name.clone(), glorot(d, d, rng))?;
        }
        init_dense(store, &self.ffn1, d, cfg.d_ff, rng)?;
        init_dense(store, &self.ffn2, cfg.d_ff, d, rng)?;
        for ln in [&self.ln1, &self.ln2] {
            store.insert(format!("{ln}.gamma"), Tensor::full(&[d], T::one()))?;
            store.insert(format!("{ln}.beta"), Tensor::zeros(&[d]))?;
        }
        Ok(())
    }
}

pub fn init_encoder<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParameterStore<T>,
    prefix: &str,
    cfg: &EncoderConfig,
    rng: &mut R,
) -> Result<Vec<EncoderLayerParams>> {
    cfg.validate()?;
    (0..cfg.n_layers)
        .map(|l| {
            let p = EncoderLayerParams::at(prefix, l);
            p.init(store, cfg, rng)?;
            Ok(p)
        })
        .collect()
}

/// Sinusoidal encoding of absolute position `pos` (0-based).
pub fn positional_encoding<T: Scalar>(pos: usize, d: usize) -> Vec<T> {
    (0..d)
        .map(|i| {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let a = pos as f64 / rate;
            T::of(if i % 2 == 0 { a.sin() } else { a.cos() })
        })
        .collect()
}

pub fn encoder_layer_forward<T: Scalar>(
    g: &Graph<T>,
    store: &ParameterStore<T>,
    p: &EncoderLayerParams,
    x: Var,
    n_heads: usize,
    vis: Rc<Visibility>,
) -> Result<Var> {
    let eps = T::of(LN_EPS);
    let wq = g.param(store, &p.wq)?;
    let wk = g.param(store, &p.wk)?;
    let wv = g.param(store, &p.wv)?;
    let wo = g.param(store, &p.wo)?;
    let q = g.matmul(x, wq)?;
    let k = g.matmul(x, wk)?;
    let v = g.matmul(x, wv)?;
    let att = g.attention(q, k, v, n_heads, vis)?;
    let att = g.matmul(att, wo)?;
    let res = g.add(x, att)?;
    let y = layer_norm_named(g, store, &p.ln1, res, eps)?;
    let hidden = g.silu(g.linear(store, &p.ffn1, y)?);
    let ff = g.linear(store, &p.ffn2, hidden)?;
    let res = g.add(y, ff)?;
    layer_norm_named(g, store, &p.ln2, res, eps)
}

fn layer_norm_named<T: Scalar>(
    g: &Graph<T>,
    store: &ParameterStore<T>,
    prefix: &str,
    x: Var,
    eps: T,
) -> Result<Var> {
    let gamma = g.param(store, &format!("{prefix}.gamma"))?;
    let beta = g.param(store, &format!("{prefix}.beta"))?;
    g.layer_norm(x, gamma, beta, eps)
}

/// Runs the layer stack over `batch` time-major sequences of `steps` tokens
/// (`tokens` is `[steps·batch × d_model]`).
pub fn encoder_forward<T: Scalar>(
    g: &Graph<T>,
    store: &ParameterStore<T>,
    prefix: &str,
    cfg: &EncoderConfig,
    tokens: Var,
    steps: usize,
    batch: usize,
) -> Result<Var> {
    if steps == 0 || batch == 0 {
        return Err(Error::contract("encoder_forward on an empty sequence"));
    }
    let shape = g.shape(tokens);
    if shape != [steps * batch, cfg.d_model] {
        return Err(Error::Dimension {
            op: "encoder_forward",
            left: shape,
            right: vec![steps * batch, cfg.d_model],
        });
    }
    let mut x = tokens;
    if cfg.positional_encoding {
        let mut pe = Vec::with_capacity(steps * batch * cfg.d_model);
        for s in 0..steps {
            let row = positional_encoding::<T>(s, cfg.d_model);
            for _ in 0..batch {
                pe.extend_from_slice(&row);
            }
        }
        let pe = g.constant(Tensor::from_parts(vec![steps * batch, cfg.d_model], pe));
        x = g.add(x, pe)?;
    }
    let vis = Rc::new(Visibility::time_major(cfg.context, steps, batch));
    for l in 0..cfg.n_layers {
        let p = EncoderLayerParams::at(prefix, l);
        x = encoder_layer_forward(g, store, &p, x, cfg.n_heads, vis.clone())?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests;
