//! The world model: observation encoder, an `h`-free posterior over discrete
//! latents, a prior from the deterministic state, two interchangeable
//! deterministic-state backbones (GRU and transformer), prediction heads and
//! the training loss.

pub mod latent;
mod loss;
mod nets;


pub use latent::{kl_categorical, sample_categorical_st, symexp, symlog, Bins, LatentMode};
pub use loss::{LossBreakdown, SegmentBatch, WmForward};
pub use nets::{Decoded, History, WorldModel};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::transformer::EncoderConfig;

/// Flat real-valued observation.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    features: Vec<f64>,
}

impl Observation {
    pub fn new(features: Vec<f64>) -> Result<Self> {
        if features.is_empty() || features.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("observation must be non-empty and finite"));
        }
        Ok(Self { features })
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

/// A discrete action, stored as its index and encoded one-hot on demand.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ActionVec {
    index: usize,
    n: usize,
}

impl ActionVec {
    pub fn new(index: usize, n: usize) -> Result<Self> {
        if index >= n {
            return Err(Error::contract(format!("action {index} out of {n}")));
        }
        Ok(Self { index, n })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn one_hot<T: Scalar>(&self) -> Vec<T> {
        let mut v = vec![T::zero(); self.n];
        v[self.index] = T::one();
        v
    }
}

/// `[groups × classes]` rows, one-hot when sampled or probabilities when
/// taken in expectation.
#[derive(Clone, Debug, PartialEq)]
pub struct StochState<T> {
    rows: Tensor<T>,
}

impl<T: Scalar> StochState<T> {
    pub fn new(rows: Tensor<T>) -> Result<Self> {
        if rows.shape().len() != 2 {
            return Err(Error::contract("stochastic state must be [groups × classes]"));
        }
        let tol = (64.0 * T::epsilon().as_f64()).max(1e-9);
        for i in 0..rows.rows() {
            let r = rows.row(i);
            let s: f64 = r.iter().map(|v| v.as_f64()).sum();
            if (s - 1.0).abs() > tol || r.iter().any(|v| v.as_f64() < 0.0) {
                return Err(Error::contract(format!("latent group {i} sums to {s}")));
            }
        }
        Ok(Self { rows })
    }

    /// One group per `classes` entries of `flat`.
    pub fn from_flat(flat: &[T], classes: usize) -> Result<Self> {
        if classes == 0 || flat.len() % classes != 0 {
            return Err(Error::contract("latent length is not a multiple of the class count"));
        }
        Self::new(Tensor::new(vec![flat.len() / classes, classes], flat.to_vec())?)
    }

    pub fn rows(&self) -> &Tensor<T> {
        &self.rows
    }

    pub fn flat(&self) -> &[T] {
        self.rows.data()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetState<T> {
    pub h: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T> {
    pub h: DetState<T>,
    pub z: StochState<T>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Backbone {
    Rssm,
    Tssm(EncoderConfig),
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldModelConfig {
    pub backbone: Backbone,
    pub groups: usize,
    pub classes: usize,
    pub d_obs: usize,
    pub d_model: usize,
    pub d_embed: usize,
    /// Width of every hidden MLP layer.
    pub d_hidden: usize,
    pub n_actions: usize,
    pub unimix: f64,
    pub free_bits: f64,
    pub kl_dyn: f64,
    pub kl_rep: f64,
    pub reward_bins: Bins,
}

impl Default for WorldModelConfig {
    fn default() -> Self {
        Self {
            backbone: Backbone::Tssm(EncoderConfig::default()),
            groups: 8,
            classes: 8,
            d_obs: 6,
            d_model: 64,
            d_embed: 64,
            d_hidden: 64,
            n_actions: 4,
            unimix: 0.01,
            free_bits: 1.0,
            kl_dyn: 0.5,
            kl_rep: 0.1,
            reward_bins: Bins::symlog_spaced(41, 20.0).expect("static bins"),
        }
    }
}

impl WorldModelConfig {
    pub fn latent_dim(&self) -> usize {
        self.groups * self.classes
    }

    /// Width of `[h, z]`, the input of every head.
    pub fn feature_dim(&self) -> usize {
        self.d_model + self.latent_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::contract(format!("world model config: {msg}")));
        let extents = [
            self.groups,
            self.classes,
            self.d_obs,
            self.d_model,
            self.d_embed,
            self.d_hidden,
            self.n_actions,
        ];
        if extents.contains(&0) {
            return bad("all extents must be positive".into());
        }
        if !(0.0..1.0).contains(&self.unimix) {
            return bad(format!("unimix {} outside [0, 1)", self.unimix));
        }
        if self.free_bits < 0.0 || !self.free_bits.is_finite() {
            return bad(format!("free_bits {} must be finite and non-negative", self.free_bits));
        }
        if let Backbone::Tssm(enc) = &self.backbone {
            enc.validate()?;
            if enc.d_model != self.d_model {
                return bad(format!(
                    "encoder width {} differs from d_model {}",
                    enc.d_model, self.d_model
                ));
            }
        }
        Ok(())
    }
}
