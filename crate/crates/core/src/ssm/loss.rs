//! World-model training loss over time-major segment batches.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParameterStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::latent::{graph_latent, symlog, GraphLatent, LatentMode};
use super::nets::{History, WorldModel};

/// `batch` sequences of `steps` entries laid out time-major: row
/// `t·batch + b` is entry `t` of sequence `b`. Entry `t` holds the
/// observation, the action taken there, and the reward and continue flag
/// received on arriving there.
#[derive(Clone, Debug)]
pub struct SegmentBatch<T> {
    pub steps: usize,
    pub batch: usize,
    pub obs: Tensor<T>,
    pub actions: Tensor<T>,
    pub rewards: Vec<f64>,
    pub conts: Vec<f64>,
}

impl<T: Scalar> SegmentBatch<T> {
    pub fn new(
        steps: usize,
        batch: usize,
        obs: Tensor<T>,
        actions: Tensor<T>,
        rewards: Vec<f64>,
        conts: Vec<f64>,
    ) -> Result<Self> {
        let n = steps * batch;
        if n == 0 || obs.rows() != n || actions.rows() != n || rewards.len() != n || conts.len() != n {
            return Err(Error::contract(format!(
                "segment batch of {steps}x{batch} with {} obs, {} actions, {} rewards, {} continues",
                obs.rows(),
                actions.rows(),
                rewards.len(),
                conts.len()
            )));
        }
        Ok(Self {
            steps,
            batch,
            obs,
            actions,
            rewards,
            conts,
        })
    }

    pub fn rows(&self) -> usize {
        self.steps * self.batch
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub recon: f64,
    pub reward: f64,
    pub cont: f64,
    /// Free-bits-clamped dynamics KL.
    pub kl_dyn: f64,
    /// Free-bits-clamped representation KL.
    pub kl_rep: f64,
    pub total: f64,
}

/// Loss node plus the values needed downstream.
pub struct WmForward<T> {
    pub loss: Var,
    pub breakdown: LossBreakdown,
    /// Posterior latents `[rows × L·C]` as used by the backbone.
    pub post_z: Tensor<T>,
}

impl WorldModel {
    /// Records the full world-model loss on `g`.
    pub fn loss<T: Scalar, R: Rng + ?Sized>(
        &self,
        g: &Graph<T>,
        store: &ParameterStore<T>,
        batch: &SegmentBatch<T>,
        mode: LatentMode,
        rng: &mut R,
    ) -> Result<WmForward<T>> {
        self.loss_impl(g, store, None, batch, mode, rng)
    }

    /// [`WorldModel::loss`] with every stop-gradient branch evaluated under
    /// `anchor` instead of `store`. At `store == anchor` value and gradient
    /// coincide with the plain loss, which makes the result a well-defined
    /// function for finite-difference checks. Use [`LatentMode::Expected`].
    pub fn loss_anchored<T: Scalar, R: Rng + ?Sized>(
        &self,
        g: &Graph<T>,
        store: &ParameterStore<T>,
        anchor: &ParameterStore<T>,
        batch: &SegmentBatch<T>,
        mode: LatentMode,
        rng: &mut R,
    ) -> Result<WmForward<T>> {
        self.loss_impl(g, store, Some(anchor), batch, mode, rng)
    }

    /// Posterior and prior latents plus deterministic states.
    fn latents<T: Scalar, R: Rng + ?Sized>(
        &self,
        g: &Graph<T>,
        store: &ParameterStore<T>,
        target: Var,
        batch: &SegmentBatch<T>,
        mode: LatentMode,
        rng: &mut R,
    ) -> Result<(GraphLatent, Var, GraphLatent)> {
        let cfg = self.config();
        let embed = self.g_encode(g, store, target)?;
        let post_logits = self.g_posterior(g, store, embed)?;
        let post = graph_latent(g, post_logits, cfg.classes, cfg.unimix, mode, rng)?;
        let actions = g.constant(batch.actions.clone());
        let h = self.g_backbone(g, store, post.z, actions, batch.steps, batch.batch)?;
        let prior_logits = self.g_prior(g, store, h)?;
        let prior = graph_latent(g, prior_logits, cfg.classes, cfg.unimix, LatentMode::Expected, rng)?;
        Ok((post, h, prior))
    }

    fn loss_impl<T: Scalar, R: Rng + ?Sized>(
        &self,
        g: &Graph<T>,
        store: &ParameterStore<T>,
        anchor: Option<&ParameterStore<T>>,
        batch: &SegmentBatch<T>,
        mode: LatentMode,
        rng: &mut R,
    ) -> Result<WmForward<T>> {
        let cfg = self.config();
        if batch.steps < 2 {
            return Err(Error::contract(format!("segment of {} steps is too short", batch.steps)));
        }
        let n = batch.rows();
        let lat_dim = cfg.latent_dim();

        let target = g.constant(batch.obs.map(|v| T::of(symlog(v.as_f64()))));
        let (post, h, prior) = self.latents(g, store, target, batch, mode, rng)?;
        let (sg_post_p, sg_post_lp, sg_prior_lp) = match anchor {
            None => (g.detach(post.probs), g.detach(post.log_probs), g.detach(prior.log_probs)),
            Some(a) => {
                let ga = Graph::new();
                let ta = ga.constant(batch.obs.map(|v| T::of(symlog(v.as_f64()))));
                let (pa, _, qa) = self.latents(&ga, a, ta, batch, mode, rng)?;
                let c = |v: Var| g.constant(ga.value(v).clone());
                (c(pa.probs), c(pa.log_probs), c(qa.log_probs))
            }
        };

        let fb = T::of(cfg.free_bits);
        let kl = |p: Var, lp: Var, lq: Var| -> Result<Var> {
            let el = g.mul(p, g.sub(lp, lq)?)?;
            let per_step = g.sum_rows(g.reshape(el, &[n, lat_dim])?);
            Ok(g.mean(g.max_scalar(per_step, fb)))
        };
        let kl_dyn = kl(sg_post_p, sg_post_lp, prior.log_probs)?;
        let kl_rep = kl(post.probs, post.log_probs, sg_prior_lp)?;

        let feat = g.concat_cols(&[h, post.z])?;
        let (obs_pred, rew_logits, cont_logit) = self.g_heads(g, store, feat)?;

        let recon = g.mean(g.sum_rows(g.square(g.sub(obs_pred, target)?)));

        let rew_target = g.constant(cfg.reward_bins.targets(&batch.rewards));
        let rew_ll = g.sum_rows(g.mul(rew_target, g.log_softmax(rew_logits))?);
        let reward = g.scale(g.mean(rew_ll), -T::one());

        // binary cross-entropy on logits: softplus(l) − c·l
        let c = g.constant(Tensor::new(vec![n, 1], batch.conts.iter().map(|&v| T::of(v)).collect())?);
        let cont = g.mean(g.sub(g.softplus(cont_logit), g.mul(c, cont_logit)?)?);

        let mut total = g.add(recon, reward)?;
        total = g.add(total, cont)?;
        total = g.add(total, g.scale(kl_dyn, T::of(cfg.kl_dyn)))?;
        total = g.add(total, g.scale(kl_rep, T::of(cfg.kl_rep)))?;

        let item = |v: Var| g.item(v).as_f64();
        let mut breakdown = LossBreakdown {
            recon: item(recon),
            reward: item(reward),
            cont: item(cont),
            kl_dyn: item(kl_dyn),
            kl_rep: item(kl_rep),
            total: 0.0,
        };
        breakdown.total = breakdown.recon
            + breakdown.reward
            + breakdown.cont
            + cfg.kl_dyn * breakdown.kl_dyn
            + cfg.kl_rep * breakdown.kl_rep;
        let post_z = g.value(post.z).clone();
        Ok(WmForward {
            loss: total,
            breakdown,
            post_z,
        })
    }

    /// Replays `post_z` and the batch actions through the incremental path
    /// and returns one history (with its latent) per entry whose continue
    /// flag is set, i.e. every non-terminal entry.
    pub fn posterior_starts<T: Scalar>(
        &self,
        store: &ParameterStore<T>,
        batch: &SegmentBatch<T>,
        post_z: &Tensor<T>,
    ) -> Result<Option<(History<T>, Tensor<T>)>> {
        let b = batch.batch;
        let lat = self.config().latent_dim();
        if post_z.shape() != [batch.rows(), lat] {
            return Err(Error::Dimension {
                op: "posterior_starts",
                left: post_z.shape().to_vec(),
                right: vec![batch.rows(), lat],
            });
        }
        let mut hist = self.begin(store, b)?;
        let mut starts: Option<History<T>> = None;
        let mut z_rows = Vec::new();
        for t in 0..batch.steps {
            let live: Vec<usize> = (0..b).filter(|&i| batch.conts[t * b + i] > 0.5).collect();
            if !live.is_empty() {
                let snap = hist.select(&live)?;
                match starts.as_mut() {
                    Some(s) => s.extend(snap)?,
                    None => starts = Some(snap),
                }
                for &i in &live {
                    z_rows.extend_from_slice(post_z.row(t * b + i));
                }
            }
            if t + 1 < batch.steps {
                let zt = slice_rows(post_z, t * b, b);
                let at = slice_rows(&batch.actions, t * b, b);
                self.advance(store, &mut hist, &zt, &at)?;
            }
        }
        Ok(match starts {
            Some(s) => {
                let z = Tensor::new(vec![s.len(), lat], z_rows)?;
                Some((s, z))
            }
            None => None,
        })
    }
}

fn slice_rows<T: Scalar>(t: &Tensor<T>, start: usize, len: usize) -> Tensor<T> {
    let c = t.cols();
    Tensor::from_parts(vec![len, c], t.data()[start * c..(start + len) * c].to_vec())
}
