//! Parameter layout and forward passes of the world-model networks.
//!
//! Every network is written once against [`Graph`]; the tensor-level
//! methods evaluate the same code on a throwaway graph. The transformer's
//! incremental path is the exception: it runs on key/value caches.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{init_dense, ParameterStore};
use crate::scalar::{sigmoid, Scalar};
use crate::tensor::{linear, Tensor};
use crate::transformer::{encoder_forward, encoder_step_batch, init_encoder, EncoderCache, EncoderConfig};

use super::latent::symlog;
use super::{ActionVec, Backbone, DetState, StochState, WorldModelConfig};

pub(crate) const ENCODER: &str = "wm.tssm.enc";
const EMBED: &str = "wm.tssm.embed";
const H_INIT: &str = "wm.tssm.h_init";

/// Stateless handle over a validated [`WorldModelConfig`]; parameters live in
/// a [`ParameterStore`] under the `wm.` prefix.
#[derive(Clone, Debug)]
pub struct WorldModel {
    cfg: WorldModelConfig,
}

/// Head outputs for a batch of `[h, z]` rows.
#[derive(Clone, Debug)]
pub struct Decoded<T> {
    /// Predicted observation in symlog space, `[n × d_obs]`.
    pub obs: Tensor<T>,
    pub reward_logits: Tensor<T>,
    pub cont_prob: Vec<T>,
}

/// Deterministic-state context of `n` sequences: the current `h` rows and,
/// for the transformer, each sequence's key/value cache.
#[derive(Clone, Debug, PartialEq)]
pub struct History<T> {
    h: Tensor<T>,
    caches: Vec<EncoderCache<T>>,
}

impl<T: Scalar> History<T> {
    pub fn h(&self) -> &Tensor<T> {
        &self.h
    }

    pub fn len(&self) -> usize {
        self.h.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn state(&self, i: usize) -> DetState<T> {
        DetState {
            h: self.h.row(i).to_vec(),
        }
    }

    pub fn caches(&self) -> &[EncoderCache<T>] {
        &self.caches
    }

    /// Copies of the listed sequences, in order (repeats allowed).
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        if idx.is_empty() || idx.iter().any(|&i| i >= self.len()) {
            return Err(Error::contract("history selection out of range"));
        }
        let d = self.h.cols();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.h.row(i));
        }
        Ok(Self {
            h: Tensor::new(vec![idx.len(), d], data)?,
            caches: if self.caches.is_empty() {
                Vec::new()
            } else {
                idx.iter().map(|&i| self.caches[i].clone()).collect()
            },
        })
    }

    /// Appends the sequences of `other`.
    pub fn extend(&mut self, other: Self) -> Result<()> {
        if other.h.cols() != self.h.cols() || other.caches.is_empty() != self.caches.is_empty() {
            return Err(Error::contract("histories from different backbones"));
        }
        let rows = self.len() + other.len();
        let mut data = std::mem::replace(&mut self.h, Tensor::scalar(T::zero())).into_data();
        let d = other.h.cols();
        data.extend(other.h.into_data());
        self.h = Tensor::new(vec![rows, d], data)?;
        self.caches.extend(other.caches);
        Ok(())
    }
}

fn mlp<T: Scalar>(g: &Graph<T>, store: &ParameterStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let hidden = g.silu(g.linear(store, &format!("{prefix}.l1"), x)?);
    g.linear(store, &format!("{prefix}.l2"), hidden)
}

fn eval<T: Scalar>(f: impl FnOnce(&Graph<T>) -> Result<Var>) -> Result<Tensor<T>> {
    let g = Graph::new();
    let v = f(&g)?;
    let out = g.value(v).clone();
    Ok(out)
}

fn check_cols<T: Scalar>(op: &'static str, t: &Tensor<T>, cols: usize) -> Result<()> {
    if t.shape().len() != 2 || t.cols() != cols {
        return Err(Error::Dimension {
            op,
            left: t.shape().to_vec(),
            right: vec![t.rows(), cols],
        });
    }
    Ok(())
}

impl WorldModel {
    pub fn new(cfg: WorldModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &WorldModelConfig {
        &self.cfg
    }

    /// Prefix of the backbone-specific parameters.
    pub fn backbone_prefix(&self) -> &'static str {
        match self.cfg.backbone {
            Backbone::Rssm => "wm.gru",
            Backbone::Tssm(_) => "wm.tssm",
        }
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParameterStore<T>, rng: &mut R) -> Result<()> {
        let c = &self.cfg;
        let lat = c.latent_dim();
        let feat = c.feature_dim();
        let mut mlp_init = |store: &mut ParameterStore<T>, p: &str, i: usize, o: usize| -> Result<()> {
            init_dense(store, &format!("{p}.l1"), i, c.d_hidden, rng)?;
            init_dense(store, &format!("{p}.l2"), c.d_hidden, o, rng)
        };
        mlp_init(store, "wm.enc", c.d_obs, c.d_embed)?;
        mlp_init(store, "wm.prior", c.d_model, lat)?;
        mlp_init(store, "wm.dec", feat, c.d_obs)?;
        mlp_init(store, "wm.rew", feat, c.reward_bins.len())?;
        mlp_init(store, "wm.cont", feat, 1)?;
        init_dense(store, "wm.post", c.d_embed, lat, rng)?;
        // uniform reward predictions until data says otherwise
        store.get_mut("wm.rew.l2.w")?.data_mut().fill(T::zero());
        let step_in = lat + c.n_actions;
        match &c.backbone {
            Backbone::Rssm => {
                for gate in ["u", "r", "c"] {
                    init_dense(store, &format!("wm.gru.{gate}"), step_in + c.d_model, c.d_model, rng)?;
                }
            }
            Backbone::Tssm(enc) => {
                init_dense(store, EMBED, step_in, c.d_model, rng)?;
                store.insert(H_INIT, Tensor::zeros(&[1, c.d_model]))?;
                init_encoder(store, ENCODER, enc, rng)?;
            }
        }
        Ok(())
    }

    // ---- graph-level networks ----

    /// Embedding of symlog-transformed observations `[n × d_obs]`.
    pub fn g_encode<T: Scalar>(&self, g: &Graph<T>, store: &ParameterStore<T>, x: Var) -> Result<Var> {
        mlp(g, store, "wm.enc", x)
    }

    /// Posterior logits from the embedding alone.
    pub fn g_posterior<T: Scalar>(&self, g: &Graph<T>, store: &ParameterStore<T>, embed: Var) -> Result<Var> {
        g.linear(store, "wm.post", embed)
    }

    pub fn g_prior<T: Scalar>(&self, g: &Graph<T>, store: &ParameterStore<T>, h: Var) -> Result<Var> {
        mlp(g, store, "wm.prior", h)
    }

    /// One GRU transition for a batch of rows.
    pub fn g_gru<T: Scalar>(
        &self,
        g: &Graph<T>,
        store: &ParameterStore<T>,
        h: Var,
        z: Var,
        a: Var,
    ) -> Result<Var> {
        let uin = g.concat_cols(&[z, a, h])?;
        let u = g.sigmoid(g.linear(store, "wm.gru.u", uin)?);
        let r = g.sigmoid(g.linear(store, "wm.gru.r", uin)?);
        let rh = g.mul(r, h)?;
        let cin = g.concat_cols(&[z, a, rh])?;
        let cand = g.tanh(g.linear(store, "wm.gru.c", cin)?);
        // u⊙h + (1−u)⊙c
        let diff = g.sub(h, cand)?;
        g.add(cand, g.mul(u, diff)?)
    }

    /// Deterministic states of `batch` time-major sequences of `steps`
    /// `(z, a)` rows; row `t·batch + b` of the result is `h_{t+1}` of
    /// sequence `b`, computed from rows strictly before `t`.
    pub fn g_backbone<T: Scalar>(
        &self,
        g: &Graph<T>,
        store: &ParameterStore<T>,
        z: Var,
        a: Var,
        steps: usize,
        batch: usize,
    ) -> Result<Var> {
        let d = self.cfg.d_model;
        if steps == 0 || batch == 0 {
            return Err(Error::contract("backbone over an empty sequence"));
        }
        match &self.cfg.backbone {
            Backbone::Rssm => {
                let mut h = g.constant(Tensor::zeros(&[batch, d]));
                let mut rows = vec![h];
                for t in 0..steps - 1 {
                    let zt = g.slice_rows(z, t * batch, batch)?;
                    let at = g.slice_rows(a, t * batch, batch)?;
                    h = self.g_gru(g, store, h, zt, at)?;
                    rows.push(h);
                }
                g.concat_rows(&rows)
            }
            Backbone::Tssm(enc) => self.g_tssm(g, store, enc, z, a, steps, batch),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn g_tssm<T: Scalar>(
        &self,
        g: &Graph<T>,
        store: &ParameterStore<T>,
        enc: &EncoderConfig,
        z: Var,
        a: Var,
        steps: usize,
        batch: usize,
    ) -> Result<Var> {
        let init = g.param(store, H_INIT)?;
        let first = g.gather_rows(init, &vec![0; batch])?;
        if steps == 1 {
            return Ok(first);
        }
        let tokens = g.linear(store, EMBED, g.concat_cols(&[z, a])?)?;
        let history = g.slice_rows(tokens, 0, (steps - 1) * batch)?;
        let out = encoder_forward(g, store, ENCODER, enc, history, steps - 1, batch)?;
        g.concat_rows(&[first, out])
    }

    /// Observation, reward and continue heads over `[h, z]` rows; the last
    /// returns logits.
    pub fn g_heads<T: Scalar>(
        &self,
        g: &Graph<T>,
        store: &ParameterStore<T>,
        feat: Var,
    ) -> Result<(Var, Var, Var)> {
        Ok((
            mlp(g, store, "wm.dec", feat)?,
            mlp(g, store, "wm.rew", feat)?,
            mlp(g, store, "wm.cont", feat)?,
        ))
    }

    // ---- tensor-level evaluation ----

    /// Embeds raw observations `[n × d_obs]` (symlog is applied here).
    pub fn encode_obs<T: Scalar>(&self, store: &ParameterStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        check_cols("encode_obs", x, self.cfg.d_obs)?;
        let xs = x.map(|v| T::of(symlog(v.as_f64())));
        eval(|g| self.g_encode(g, store, g.constant(xs)))
    }

    /// Posterior logits `[n × L·C]`. Takes the embedding only: there is no
    /// deterministic-state input.
    pub fn posterior_logits<T: Scalar>(&self, store: &ParameterStore<T>, embed: &Tensor<T>) -> Result<Tensor<T>> {
        check_cols("posterior_logits", embed, self.cfg.d_embed)?;
        eval(|g| self.g_posterior(g, store, g.constant(embed.clone())))
    }

    pub fn prior_logits<T: Scalar>(&self, store: &ParameterStore<T>, h: &Tensor<T>) -> Result<Tensor<T>> {
        check_cols("prior_logits", h, self.cfg.d_model)?;
        eval(|g| self.g_prior(g, store, g.constant(h.clone())))
    }

    pub fn decode<T: Scalar>(&self, store: &ParameterStore<T>, h: &Tensor<T>, z: &Tensor<T>) -> Result<Decoded<T>> {
        check_cols("decode", h, self.cfg.d_model)?;
        check_cols("decode", z, self.cfg.latent_dim())?;
        let g = Graph::new();
        let feat = g.concat_cols(&[g.constant(h.clone()), g.constant(z.clone())])?;
        let (obs, rew, cont) = self.g_heads(&g, store, feat)?;
        let out = Decoded {
            obs: g.value(obs).clone(),
            reward_logits: g.value(rew).clone(),
            cont_prob: g.value(cont).data().iter().map(|&l| sigmoid(l)).collect(),
        };
        Ok(out)
    }

    /// Expected reward and continue probability per `[h, z]` row, without
    /// the observation decoder.
    pub fn predict_outcome<T: Scalar>(
        &self,
        store: &ParameterStore<T>,
        h: &Tensor<T>,
        z: &Tensor<T>,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        check_cols("predict_outcome", h, self.cfg.d_model)?;
        check_cols("predict_outcome", z, self.cfg.latent_dim())?;
        let g = Graph::new();
        let feat = g.concat_cols(&[g.constant(h.clone()), g.constant(z.clone())])?;
        let rew = mlp(&g, store, "wm.rew", feat)?;
        let cont = mlp(&g, store, "wm.cont", feat)?;
        let rewards = self.cfg.reward_bins.expected_value(&g.value(rew));
        let conts = g.value(cont).data().iter().map(|&l| sigmoid(l).as_f64()).collect();
        Ok((rewards, conts))
    }

    /// Expected reward per row of a [`Decoded`] batch.
    pub fn expected_reward<T: Scalar>(&self, d: &Decoded<T>) -> Vec<f64> {
        self.cfg.reward_bins.expected_value(&d.reward_logits)
    }

    /// Single GRU transition.
    pub fn rssm_step<T: Scalar>(
        &self,
        store: &ParameterStore<T>,
        h_prev: &DetState<T>,
        z_prev: &StochState<T>,
        a_prev: &ActionVec,
    ) -> Result<DetState<T>> {
        let h = Tensor::new(vec![1, h_prev.h.len()], h_prev.h.clone())?;
        let z = Tensor::new(vec![1, z_prev.flat().len()], z_prev.flat().to_vec())?;
        let a = Tensor::new(vec![1, a_prev.n()], a_prev.one_hot())?;
        Ok(DetState {
            h: self.rssm_step_batch(store, &h, &z, &a)?.into_data(),
        })
    }

    fn rssm_step_batch<T: Scalar>(
        &self,
        store: &ParameterStore<T>,
        h: &Tensor<T>,
        z: &Tensor<T>,
        a: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        eval(|g| {
            self.g_gru(
                g,
                store,
                g.constant(h.clone()),
                g.constant(z.clone()),
                g.constant(a.clone()),
            )
        })
    }

    /// Feeds `(z_prev, a_prev)` to a transformer cache and returns the next
    /// deterministic state.
    pub fn tssm_step_incremental<T: Scalar>(
        &self,
        store: &ParameterStore<T>,
        cache: &mut EncoderCache<T>,
        z_prev: &StochState<T>,
        a_prev: &ActionVec,
    ) -> Result<DetState<T>> {
        let z = Tensor::new(vec![1, z_prev.flat().len()], z_prev.flat().to_vec())?;
        let a = Tensor::new(vec![1, a_prev.n()], a_prev.one_hot())?;
        let out = self.tssm_step_batch(store, std::slice::from_mut(cache), &z, &a)?;
        Ok(DetState { h: out.into_data() })
    }

    fn tssm_step_batch<T: Scalar>(
        &self,
        store: &ParameterStore<T>,
        caches: &mut [EncoderCache<T>],
        z: &Tensor<T>,
        a: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let Backbone::Tssm(enc) = &self.cfg.backbone else {
            return Err(Error::contract("transformer step on a recurrent world model"));
        };
        let tok_in = Tensor::concat_cols(&[z, a])?;
        let tokens = linear(&tok_in, store.get(&format!("{EMBED}.w"))?, store.get(&format!("{EMBED}.b"))?)?;
        encoder_step_batch(store, ENCODER, enc, caches, &tokens)
    }

    /// Empty histories of `n` sequences, holding `h_1`.
    pub fn begin<T: Scalar>(&self, store: &ParameterStore<T>, n: usize) -> Result<History<T>> {
        if n == 0 {
            return Err(Error::contract("history of zero sequences"));
        }
        let d = self.cfg.d_model;
        Ok(match &self.cfg.backbone {
            Backbone::Rssm => History {
                h: Tensor::zeros(&[n, d]),
                caches: Vec::new(),
            },
            Backbone::Tssm(enc) => {
                let init = store.get(H_INIT)?;
                check_cols("h_init", init, d)?;
                let data = (0..n).flat_map(|_| init.data().iter().copied()).collect();
                History {
                    h: Tensor::new(vec![n, d], data)?,
                    caches: (0..n).map(|_| EncoderCache::new(enc)).collect(),
                }
            }
        })
    }

    /// Consumes one `(z, a)` row per sequence and moves every `h` forward.
    pub fn advance<T: Scalar>(
        &self,
        store: &ParameterStore<T>,
        hist: &mut History<T>,
        z: &Tensor<T>,
        a: &Tensor<T>,
    ) -> Result<()> {
        let n = hist.len();
        check_cols("advance", z, self.cfg.latent_dim())?;
        check_cols("advance", a, self.cfg.n_actions)?;
        if z.rows() != n || a.rows() != n {
            return Err(Error::Dimension {
                op: "advance",
                left: vec![z.rows(), a.rows()],
                right: vec![n, n],
            });
        }
        hist.h = match &self.cfg.backbone {
            Backbone::Rssm => self.rssm_step_batch(store, &hist.h, z, a)?,
            Backbone::Tssm(_) => self.tssm_step_batch(store, &mut hist.caches, z, a)?,
        };
        Ok(())
    }

    /// `h_1..h_T` of one sequence through the parallel (training) path.
    pub fn forward_sequence<T: Scalar>(
        &self,
        store: &ParameterStore<T>,
        z_seq: &[StochState<T>],
        a_seq: &[ActionVec],
    ) -> Result<Vec<DetState<T>>> {
        if z_seq.len() != a_seq.len() {
            return Err(Error::contract(format!(
                "{} latents but {} actions",
                z_seq.len(),
                a_seq.len()
            )));
        }
        if z_seq.is_empty() {
            return Err(Error::contract("empty sequence"));
        }
        let steps = z_seq.len();
        let z = Tensor::new(
            vec![steps, self.cfg.latent_dim()],
            z_seq.iter().flat_map(|s| s.flat().iter().copied()).collect(),
        )?;
        let a = Tensor::new(
            vec![steps, self.cfg.n_actions],
            a_seq.iter().flat_map(|s| s.one_hot::<T>()).collect(),
        )?;
        let h = eval(|g| self.g_backbone(g, store, g.constant(z), g.constant(a), steps, 1))?;
        Ok((0..steps).map(|t| DetState { h: h.row(t).to_vec() }).collect())
    }
}
