//! Latent rollouts under the current policy, at most three per start state.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agent::{choose_action, ActMode, Agent};
use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::scalar::Scalar;
use crate::ssm::latent::{mixed_probs, sample_index};
use crate::ssm::{ActionVec, DetState, History, ModelState, StochState, WorldModel};
use crate::tensor::Tensor;

/// Hard ceiling on rollouts drawn from one start state.
pub const MAX_ROLLOUTS_PER_START: usize = 3;

/// One rollout viewed on its own.
#[derive(Clone, Debug, PartialEq)]
pub struct ImaginedRollout<T> {
    pub start: usize,
    pub states: Vec<ModelState<T>>,
    pub actions: Vec<ActionVec>,
    pub predicted_rewards: Vec<f64>,
    pub predicted_continues: Vec<f64>,
}

/// `n` rollouts of `horizon` transitions stored time-major: feature row
/// `t·n + i` is state `t` (0..=horizon) of rollout `i`; action, reward and
/// continue `t·n + i` belong to transition `t + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Imagination<T> {
    pub horizon: usize,
    pub n: usize,
    /// Start-state index of every rollout.
    pub start_of: Vec<usize>,
    /// `[h, z]` rows, `[(horizon+1)·n × feature_dim]`.
    pub feats: Tensor<T>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    /// Predicted continue probabilities.
    pub conts: Vec<f64>,
}

impl<T: Scalar> Imagination<T> {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Rollout `i` split back into model states (`d_model` is the width of h).
    pub fn rollout(&self, i: usize, d_model: usize, classes: usize, n_actions: usize) -> Result<ImaginedRollout<T>> {
        if i >= self.n {
            return Err(Error::contract(format!("rollout {i} of {}", self.n)));
        }
        let states = (0..=self.horizon)
            .map(|t| {
                let row = self.feats.row(t * self.n + i);
                Ok(ModelState {
                    h: DetState {
                        h: row[..d_model].to_vec(),
                    },
                    z: StochState::from_flat(&row[d_model..], classes)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let pick = |v: &[f64]| (0..self.horizon).map(|t| v[t * self.n + i]).collect::<Vec<_>>();
        Ok(ImaginedRollout {
            start: self.start_of[i],
            states,
            actions: (0..self.horizon)
                .map(|t| ActionVec::new(self.actions[t * self.n + i], n_actions))
                .collect::<Result<_>>()?,
            predicted_rewards: pick(&self.rewards),
            predicted_continues: pick(&self.conts),
        })
    }

    /// Number of rollouts drawn from each start state index.
    pub fn per_start_counts(&self, n_starts: usize) -> Vec<usize> {
        let mut c = vec![0; n_starts];
        for &s in &self.start_of {
            c[s] += 1;
        }
        c
    }
}

/// Anything that turns start states into rollouts.
pub trait Imaginer<T: Scalar> {
    /// `starts` holds one history per start state and `start_z` the matching
    /// latent rows.
    fn imagine(
        &mut self,
        store: &ParameterStore<T>,
        starts: &History<T>,
        start_z: &Tensor<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Imagination<T>>;
}

/// Rolls the world model forward under the actor.
#[derive(Clone, Debug)]
pub struct LatentImaginer {
    pub wm: WorldModel,
    pub agent: Agent,
    pub horizon: usize,
    /// Rollouts requested per start (clamped to the ceiling).
    pub per_start: usize,
}

impl<T: Scalar> Imaginer<T> for LatentImaginer {
    fn imagine(
        &mut self,
        store: &ParameterStore<T>,
        starts: &History<T>,
        start_z: &Tensor<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Imagination<T>> {
        imagine(&self.wm, &self.agent, store, starts, start_z, self.horizon, self.per_start, rng)
    }
}

/// Every start state yields `min(per_start, 3)` rollouts of `horizon` steps,
/// each on its own random stream seeded from `rng`.
#[allow(clippy::too_many_arguments)]
pub fn imagine<T: Scalar, R: Rng + ?Sized>(
    wm: &WorldModel,
    agent: &Agent,
    store: &ParameterStore<T>,
    starts: &History<T>,
    start_z: &Tensor<T>,
    horizon: usize,
    per_start: usize,
    rng: &mut R,
) -> Result<Imagination<T>> {
    if horizon < 1 {
        return Err(Error::contract("imagination horizon must be at least 1"));
    }
    if per_start == 0 {
        return Err(Error::contract("at least one rollout per start is required"));
    }
    let cfg = wm.config();
    if start_z.shape() != [starts.len(), cfg.latent_dim()] {
        return Err(Error::Dimension {
            op: "imagine",
            left: start_z.shape().to_vec(),
            right: vec![starts.len(), cfg.latent_dim()],
        });
    }
    let k = per_start.min(MAX_ROLLOUTS_PER_START);
    let start_of: Vec<usize> = (0..starts.len()).flat_map(|s| std::iter::repeat(s).take(k)).collect();
    let n = start_of.len();
    let mut streams: Vec<ChaCha8Rng> = (0..n).map(|_| ChaCha8Rng::seed_from_u64(rng.gen())).collect();

    let mut hist = starts.select(&start_of)?;
    let mut z = {
        let c = start_z.cols();
        let mut d = Vec::with_capacity(n * c);
        for &s in &start_of {
            d.extend_from_slice(start_z.row(s));
        }
        Tensor::new(vec![n, c], d)?
    };
    let f = cfg.feature_dim();
    let mut feats = Vec::with_capacity((horizon + 1) * n * f);
    let mut actions = Vec::with_capacity(horizon * n);
    let mut rewards = Vec::with_capacity(horizon * n);
    let mut conts = Vec::with_capacity(horizon * n);
    let n_act = cfg.n_actions;
    for _ in 0..horizon {
        let feat = Tensor::concat_cols(&[hist.h(), &z])?;
        let logits = agent.actor_logits(store, &feat)?;
        let mut a = Tensor::zeros(&[n, n_act]);
        for (i, stream) in streams.iter_mut().enumerate() {
            let ai = choose_action(logits.row(i), ActMode::Sample, stream);
            a.row_mut(i)[ai] = T::one();
            actions.push(ai);
        }
        feats.extend_from_slice(feat.data());

        wm.advance(store, &mut hist, &z, &a)?;
        let prior = wm.prior_logits(store, hist.h())?.reshape(&[n * cfg.groups, cfg.classes])?;
        let probs = mixed_probs(&prior, cfg.unimix);
        let mut next = Tensor::zeros(&[n, cfg.latent_dim()]);
        for (i, stream) in streams.iter_mut().enumerate() {
            for g in 0..cfg.groups {
                let c = sample_index(probs.row(i * cfg.groups + g), stream);
                next.row_mut(i)[g * cfg.classes + c] = T::one();
            }
        }
        z = next;
        let (r, c) = wm.predict_outcome(store, hist.h(), &z)?;
        rewards.extend(r);
        conts.extend(c);
    }
    feats.extend_from_slice(Tensor::concat_cols(&[hist.h(), &z])?.data());

    let out = Imagination {
        horizon,
        n,
        start_of,
        feats: Tensor::new(vec![(horizon + 1) * n, f], feats)?,
        actions,
        rewards,
        conts,
    };
    assert!(
        out.per_start_counts(starts.len()).iter().all(|&c| c == k),
        "imagination exceeded its per-start budget"
    );
    Ok(out)
}

/// Wraps an [`Imaginer`] and tallies how many rollouts each start state got.
#[derive(Clone, Debug)]
pub struct CountingImaginer<I> {
    pub inner: I,
    pub calls: usize,
    pub starts: usize,
    pub rollouts: usize,
    /// Histogram: `per_start_hist[k]` start states received `k` rollouts.
    pub per_start_hist: Vec<usize>,
}

impl<I> CountingImaginer<I> {
    pub fn new(inner: I) -> Self {
        Self {
            inner,
            calls: 0,
            starts: 0,
            rollouts: 0,
            per_start_hist: Vec::new(),
        }
    }
}

impl<T: Scalar, I: Imaginer<T>> Imaginer<T> for CountingImaginer<I> {
    fn imagine(
        &mut self,
        store: &ParameterStore<T>,
        starts: &History<T>,
        start_z: &Tensor<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Imagination<T>> {
        let out = self.inner.imagine(store, starts, start_z, rng)?;
        self.calls += 1;
        self.starts += starts.len();
        self.rollouts += out.len();
        for c in out.per_start_counts(starts.len()) {
            if self.per_start_hist.len() <= c {
                self.per_start_hist.resize(c + 1, 0);
            }
            self.per_start_hist[c] += 1;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::ActorCriticConfig;
    use crate::ssm::{Backbone, Bins, WorldModelConfig};
    use crate::transformer::{Context, EncoderConfig};

    fn setup(backbone: Backbone) -> (WorldModel, Agent, ParameterStore<f64>) {
        let cfg = WorldModelConfig {
            backbone,
            groups: 2,
            classes: 3,
            d_obs: 3,
            d_model: 4,
            d_embed: 4,
            d_hidden: 5,
            n_actions: 3,
            reward_bins: Bins::symlog_spaced(7, 20.0).unwrap(),
            ..WorldModelConfig::default()
        };
        let wm = WorldModel::new(cfg).unwrap();
        let agent = Agent::new(ActorCriticConfig::default(), wm.config().feature_dim(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParameterStore::new();
        wm.init(&mut store, &mut rng).unwrap();
        agent.init(&mut store, &mut rng).unwrap();
        (wm, agent, store)
    }

    fn starts(wm: &WorldModel, store: &ParameterStore<f64>, n: usize) -> (History<f64>, Tensor<f64>) {
        let mut hist = wm.begin(store, n).unwrap();
        let mut z = Tensor::zeros(&[n, 6]);
        let mut a = Tensor::zeros(&[n, 3]);
        for i in 0..n {
            z.row_mut(i)[i % 3] = 1.0;
            z.row_mut(i)[3 + (i + 1) % 3] = 1.0;
            a.row_mut(i)[i % 3] = 1.0;
        }
        wm.advance(store, &mut hist, &z, &a).unwrap();
        (hist, z)
    }

    fn backbones() -> Vec<Backbone> {
        let enc = EncoderConfig {
            d_model: 4,
            n_heads: 2,
            d_ff: 6,
            n_layers: 1,
            context: Context::FullCausal,
            positional_encoding: false,
        };
        vec![Backbone::Rssm, Backbone::Tssm(enc)]
    }

    #[test]
    fn three_rollouts_per_start() {
        for b in backbones() {
            let (wm, agent, store) = setup(b);
            let (hist, z) = starts(&wm, &store, 4);
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let out = imagine(&wm, &agent, &store, &hist, &z, 5, 3, &mut rng).unwrap();
            assert_eq!(out.len(), 12);
            assert_eq!(out.per_start_counts(4), vec![3; 4]);
            for i in 0..12 {
                let r = out.rollout(i, 4, 3, 3).unwrap();
                assert_eq!(r.states.len(), 6);
                assert_eq!(r.actions.len(), 5);
                assert!(r.predicted_continues.iter().all(|c| (0.0..=1.0).contains(c)));
                assert_eq!(r.states[0].z.flat(), z.row(r.start));
            }
            // asking for more never yields more
            let out = imagine(&wm, &agent, &store, &hist, &z, 2, 10, &mut rng).unwrap();
            assert_eq!(out.per_start_counts(4), vec![3; 4]);
        }
    }

    #[test]
    fn horizon_one_and_errors() {
        let (wm, agent, store) = setup(backbones().remove(1));
        let (hist, z) = starts(&wm, &store, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = imagine(&wm, &agent, &store, &hist, &z, 1, 3, &mut rng).unwrap();
        assert_eq!(out.rollout(0, 4, 3, 3).unwrap().states.len(), 2);
        assert!(imagine(&wm, &agent, &store, &hist, &z, 0, 3, &mut rng).is_err());
        let fewer = imagine(&wm, &agent, &store, &hist, &z, 1, 2, &mut rng).unwrap();
        assert_eq!(fewer.len(), 4);
    }

    #[test]
    fn identical_seeds_identical_rollouts() {
        for b in backbones() {
            let (wm, agent, store) = setup(b);
            let (hist, z) = starts(&wm, &store, 3);
            let a = imagine(&wm, &agent, &store, &hist, &z, 6, 3, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
            let b = imagine(&wm, &agent, &store, &hist, &z, 6, 3, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
            assert_eq!(a, b);
            let c = imagine(&wm, &agent, &store, &hist, &z, 6, 3, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
            assert_ne!(a.actions, c.actions);
        }
    }

    #[test]
    fn counter_sees_every_call() {
        let (wm, agent, store) = setup(backbones().remove(0));
        let (hist, z) = starts(&wm, &store, 5);
        let mut im = CountingImaginer::new(LatentImaginer {
            wm: wm.clone(),
            agent,
            horizon: 3,
            per_start: 3,
        });
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..4 {
            Imaginer::<f64>::imagine(&mut im, &store, &hist, &z, &mut rng).unwrap();
        }
        assert_eq!((im.calls, im.starts, im.rollouts), (4, 20, 60));
        assert_eq!(im.per_start_hist, vec![0, 0, 0, 20]);
    }
}
