//! Incremental encoder evaluation against stored key/value rows.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::scalar::{silu, Scalar};
use crate::tensor::{layer_norm, linear, softmax_in_place, Tensor};

use super::{positional_encoding, Context, EncoderConfig, EncoderLayerParams, LN_EPS};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerCache<T> {
    keys: VecDeque<Vec<T>>,
    values: VecDeque<Vec<T>>,
}

impl<T> LayerCache<T> {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

/// Per-layer key/value rows of every token consumed so far (the last `k`
/// under `Window(k)`).
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderCache<T> {
    layers: Vec<LayerCache<T>>,
    position: usize,
    window: Option<usize>,
}

impl<T: Scalar> EncoderCache<T> {
    pub fn new(cfg: &EncoderConfig) -> Self {
        Self {
            layers: (0..cfg.n_layers)
                .map(|_| LayerCache {
                    keys: VecDeque::new(),
                    values: VecDeque::new(),
                })
                .collect(),
            position: 0,
            window: match cfg.context {
                Context::FullCausal => None,
                Context::Window(k) => Some(k),
            },
        }
    }

    /// Tokens consumed so far.
    pub fn position(&self) -> usize {
        self.position
    }

    pub fn layers(&self) -> &[LayerCache<T>] {
        &self.layers
    }

    /// Rows currently held by the largest layer cache.
    pub fn max_rows(&self) -> usize {
        self.layers.iter().map(LayerCache::len).max().unwrap_or(0)
    }
}

/// Feeds one token and returns the encoder output at its position.
pub fn encoder_step<T: Scalar>(
    store: &ParameterStore<T>,
    prefix: &str,
    cfg: &EncoderConfig,
    cache: &mut EncoderCache<T>,
    token: &[T],
) -> Result<Vec<T>> {
    let x = Tensor::new(vec![1, token.len()], token.to_vec())?;
    let out = encoder_step_batch(store, prefix, cfg, std::slice::from_mut(cache), &x)?;
    Ok(out.into_data())
}

/// Feeds row `i` of `tokens` to `caches[i]`, for all `i` at once.
pub fn encoder_step_batch<T: Scalar>(
    store: &ParameterStore<T>,
    prefix: &str,
    cfg: &EncoderConfig,
    caches: &mut [EncoderCache<T>],
    tokens: &Tensor<T>,
) -> Result<Tensor<T>> {
    let d = cfg.d_model;
    if tokens.shape() != [caches.len(), d] {
        return Err(Error::Dimension {
            op: "encoder_step",
            left: tokens.shape().to_vec(),
            right: vec![caches.len(), d],
        });
    }
    if let Some(c) = caches.iter().find(|c| c.layers.len() != cfg.n_layers) {
        return Err(Error::contract(format!(
            "cache has {} layers, encoder has {}",
            c.layers.len(),
            cfg.n_layers
        )));
    }
    let mut x = tokens.clone();
    if cfg.positional_encoding {
        for (i, c) in caches.iter().enumerate() {
            let pe = positional_encoding::<T>(c.position, d);
            for (v, p) in x.row_mut(i).iter_mut().zip(pe) {
                *v += p;
            }
        }
    }
    let eps = T::of(LN_EPS);
    let heads = cfg.n_heads;
    let dh = d / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let zero_bias = Tensor::zeros(&[d]);
    for l in 0..cfg.n_layers {
        let p = EncoderLayerParams::at(prefix, l);
        let q = x.matmul(store.get(&p.wq)?)?;
        let k = x.matmul(store.get(&p.wk)?)?;
        let v = x.matmul(store.get(&p.wv)?)?;
        let mut att = Tensor::zeros(&[caches.len(), d]);
        let mut scores = Vec::new();
        for (i, c) in caches.iter_mut().enumerate() {
            let lc = &mut c.layers[l];
            lc.keys.push_back(k.row(i).to_vec());
            lc.values.push_back(v.row(i).to_vec());
            if let Some(w) = c.window {
                while lc.keys.len() > w {
                    lc.keys.pop_front();
                    lc.values.pop_front();
                }
            }
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let qi = &q.row(i)[cols.clone()];
                scores.clear();
                scores.extend(
                    lc.keys
                        .iter()
                        .map(|kr| qi.iter().zip(&kr[cols.clone()]).map(|(&a, &b)| a * b).sum::<T>() * scale),
                );
                softmax_in_place(&mut scores);
                let orow = &mut att.row_mut(i)[cols.clone()];
                for (vr, &pr) in lc.values.iter().zip(&scores) {
                    for (o, &vv) in orow.iter_mut().zip(&vr[cols.clone()]) {
                        *o += pr * vv;
                    }
                }
            }
        }
        let att = linear(&att, store.get(&p.wo)?, &zero_bias)?;
        let res = x.zip_map(&att, |a, b| a + b)?;
        let y = layer_norm(
            &res,
            store.get(&format!("{}.gamma", p.ln1))?,
            store.get(&format!("{}.beta", p.ln1))?,
            eps,
        )?;
        let hidden = linear(&y, store.get(&format!("{}.w", p.ffn1))?, store.get(&format!("{}.b", p.ffn1))?)?
            .map(silu);
        let ff = linear(&hidden, store.get(&format!("{}.w", p.ffn2))?, store.get(&format!("{}.b", p.ffn2))?)?;
        let res = y.zip_map(&ff, |a, b| a + b)?;
        x = layer_norm(
            &res,
            store.get(&format!("{}.gamma", p.ln2))?,
            store.get(&format!("{}.beta", p.ln2))?,
            eps,
        )?;
    }
    for c in caches.iter_mut() {
        c.position += 1;
    }
    Ok(x)
}
