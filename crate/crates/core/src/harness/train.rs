//! The collect → world-model step → imagine → actor-critic step loop, and
//! greedy evaluation.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agent::{choose_action, AcLosses, ActMode, Agent, ReturnNormalizer};
use crate::envs::{EnvConfig, EnvState};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::imagine::{Imaginer, LatentImaginer, MAX_ROLLOUTS_PER_START};
use crate::params::{AdamConfig, ParameterStore};
use crate::replay::{segment_batch, ReplayBuffer, Trajectory};
use crate::ssm::latent::{mixed_probs, sample_index};
use crate::ssm::{ActionVec, History, LatentMode, LossBreakdown, Observation, WorldModel};
use crate::tensor::Tensor;

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::metrics::{MetricsRow, MetricsWriter};

/// Scalar used for training and evaluation.
pub type Real = f32;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.tdv3";

/// Stateless handles for the two networks of a run.
#[derive(Clone, Debug)]
pub struct Models {
    pub wm: WorldModel,
    pub agent: Agent,
}

impl Models {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let wm = WorldModel::new(cfg.world_model.clone())?;
        let agent = Agent::new(cfg.agent.clone(), cfg.world_model.feature_dim(), cfg.env.n_actions())?;
        Ok(Self { wm, agent })
    }

    pub fn init(&self, rng: &mut ChaCha8Rng) -> Result<ParameterStore<Real>> {
        let mut store = ParameterStore::new();
        self.wm.init(&mut store, rng)?;
        self.agent.init(&mut store, rng)?;
        Ok(store)
    }

    /// Samples one one-hot latent row per posterior-logit row.
    fn sample_latents(&self, logits: &Tensor<Real>, rng: &mut ChaCha8Rng) -> Result<Tensor<Real>> {
        let cfg = self.wm.config();
        let n = logits.rows();
        let probs = mixed_probs(&logits.reshape(&[n * cfg.groups, cfg.classes])?, cfg.unimix);
        let mut z = Tensor::zeros(&[n, cfg.latent_dim()]);
        for i in 0..n {
            for g in 0..cfg.groups {
                let c = sample_index(probs.row(i * cfg.groups + g), rng);
                z.row_mut(i)[g * cfg.classes + c] = 1.0;
            }
        }
        Ok(z)
    }

    /// Posterior latents for a batch of raw observations.
    pub fn observe(&self, store: &ParameterStore<Real>, obs: &[&Observation], rng: &mut ChaCha8Rng) -> Result<Tensor<Real>> {
        let d = self.wm.config().d_obs;
        let x = Tensor::new(
            vec![obs.len(), d],
            obs.iter().flat_map(|o| o.features().iter().map(|&v| v as Real)).collect(),
        )?;
        let logits = self.wm.posterior_logits(store, &self.wm.encode_obs(store, &x)?)?;
        self.sample_latents(&logits, rng)
    }

    fn actor_logits(&self, store: &ParameterStore<Real>, hist: &History<Real>, z: &Tensor<Real>) -> Result<Tensor<Real>> {
        self.agent.actor_logits(store, &Tensor::concat_cols(&[hist.h(), z])?)
    }
}

/// Mean episode return with a 95% normal-approximation interval.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    pub episodes: usize,
    pub mean: f64,
    /// `1.96·s/√n` with the sample standard deviation `s` (0 for one episode).
    pub half_width: f64,
}

impl EvalResult {
    pub fn from_returns(returns: &[f64]) -> Result<Self> {
        let n = returns.len();
        if n == 0 {
            return Err(Error::contract("evaluation needs at least one episode"));
        }
        let mean = returns.iter().sum::<f64>() / n as f64;
        let half_width = if n > 1 {
            let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            1.96 * (var / n as f64).sqrt()
        } else {
            0.0
        };
        Ok(Self {
            episodes: n,
            mean,
            half_width,
        })
    }

    pub fn ci(&self) -> (f64, f64) {
        (self.mean - self.half_width, self.mean + self.half_width)
    }
}

/// Runs `episodes` greedy episodes in lockstep. Latents are still sampled
/// from the posterior; episode seeds and latent draws come from `seed`.
pub fn evaluate_store(
    env: &EnvConfig,
    models: &Models,
    store: &ParameterStore<Real>,
    episodes: usize,
    seed: u64,
) -> Result<EvalResult> {
    if episodes == 0 {
        return Err(Error::contract("evaluation needs at least one episode"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut states = Vec::with_capacity(episodes);
    let mut obs = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let (s, o) = env.reset(rng.gen())?;
        states.push(s);
        obs.push(o);
    }
    let mut returns = vec![0.0; episodes];
    let mut hist = models.wm.begin(store, episodes)?;
    let n_act = env.n_actions();
    while states.iter().any(|s| !s.done) {
        let z = models.observe(store, &obs.iter().collect::<Vec<_>>(), &mut rng)?;
        let logits = models.actor_logits(store, &hist, &z)?;
        let mut a = Tensor::zeros(&[episodes, n_act]);
        for i in 0..episodes {
            let act = choose_action(logits.row(i), ActMode::Greedy, &mut rng);
            a.row_mut(i)[act] = 1.0;
            if !states[i].done {
                let tr = env.step(&states[i], act)?;
                returns[i] += tr.reward;
                states[i] = tr.state;
                obs[i] = tr.obs;
            }
        }
        models.wm.advance(store, &mut hist, &z, &a)?;
    }
    EvalResult::from_returns(&returns)
}

/// Greedy evaluation of a saved checkpoint.
pub fn evaluate(checkpoint: &Path, episodes: usize, seed: u64) -> Result<EvalResult> {
    let ck = Checkpoint::load(checkpoint)?;
    let cfg = RunConfig::parse(&ck.config_text)?;
    let models = Models::new(&cfg)?;
    let mut store = models.init(&mut ChaCha8Rng::seed_from_u64(0))?;
    ck.load_into(&mut store)?;
    evaluate_store(&cfg.env, &models, &store, episodes, seed)
}

/// One live environment plus the model state that tracks it.
struct Collector {
    env: EnvConfig,
    state: EnvState,
    obs: Observation,
    hist: History<Real>,
    last_reward: f64,
    observations: Vec<Observation>,
    actions: Vec<ActionVec>,
    rewards: Vec<f64>,
    rng: ChaCha8Rng,
}

impl Collector {
    fn new(env: &EnvConfig, models: &Models, store: &ParameterStore<Real>, mut rng: ChaCha8Rng) -> Result<Self> {
        let (state, obs) = env.reset(rng.gen())?;
        Ok(Self {
            env: env.clone(),
            state,
            obs,
            hist: models.wm.begin(store, 1)?,
            last_reward: 0.0,
            observations: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            rng,
        })
    }

    /// One environment step; returns the finished episode, if any.
    fn step(&mut self, models: &Models, store: &ParameterStore<Real>, uniform: bool) -> Result<Option<Trajectory>> {
        let n_act = self.env.n_actions();
        let z = models.observe(store, &[&self.obs], &mut self.rng)?;
        let action = if uniform {
            self.rng.gen_range(0..n_act)
        } else {
            let logits = models.actor_logits(store, &self.hist, &z)?;
            choose_action(logits.row(0), ActMode::Sample, &mut self.rng)
        };
        let av = ActionVec::new(action, n_act)?;
        let tr = self.env.step(&self.state, action)?;
        self.observations.push(std::mem::replace(&mut self.obs, tr.obs));
        self.actions.push(av.clone());
        self.rewards.push(self.last_reward);
        self.last_reward = tr.reward;
        self.state = tr.state;
        models.wm.advance(store, &mut self.hist, &z, &Tensor::new(vec![1, n_act], av.one_hot())?)?;
        if !self.state.done {
            return Ok(None);
        }
        // terminal entry: its action is never consumed
        let mut observations = std::mem::take(&mut self.observations);
        let mut actions = std::mem::take(&mut self.actions);
        let mut rewards = std::mem::take(&mut self.rewards);
        observations.push(self.obs.clone());
        actions.push(ActionVec::new(0, n_act)?);
        rewards.push(self.last_reward);
        let mut continues = vec![1.0; observations.len()];
        *continues.last_mut().expect("non-empty") = 0.0;
        let traj = Trajectory::new(observations, actions, rewards, continues)?;

        let (state, obs) = self.env.reset(self.rng.gen())?;
        self.state = state;
        self.obs = obs;
        self.hist = models.wm.begin(store, 1)?;
        self.last_reward = 0.0;
        Ok(Some(traj))
    }
}

/// What a finished run produced.
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub final_row: Option<MetricsRow>,
    pub env_steps: u64,
    pub train_steps: u64,
    pub episodes: u64,
}

struct Learner<'a, I> {
    cfg: &'a RunConfig,
    models: &'a Models,
    imaginer: I,
    norm: ReturnNormalizer,
    wm_adam: AdamConfig,
    ac_adam: AdamConfig,
    rng: ChaCha8Rng,
}

impl<I: Imaginer<Real>> Learner<'_, I> {
    fn step(&mut self, store: &mut ParameterStore<Real>, buffer: &ReplayBuffer) -> Result<(LossBreakdown, AcLosses)> {
        let r = &self.cfg.replay;
        let wm = &self.models.wm;
        let segs = buffer.sample_segments(r.batch, r.seg_len, &mut self.rng)?;
        let batch = segment_batch::<Real>(&segs)?;
        let g = Graph::new();
        let fwd = wm.loss(&g, store, &batch, LatentMode::Sample, &mut self.rng)?;
        let mut grads = g.backward(fwd.loss, store)?;
        grads.clip_global_norm(self.cfg.optim.clip as Real);
        store.adam_step(&grads, &self.wm_adam)?;
        drop(g);

        let Some((mut starts, mut start_z)) = wm.posterior_starts(store, &batch, &fwd.post_z)? else {
            return Ok((fwd.breakdown, AcLosses { policy: 0.0, critic: 0.0 }));
        };
        if r.imagine_starts > 0 && starts.len() > r.imagine_starts {
            let mut keep = sample_indices(&mut self.rng, starts.len(), r.imagine_starts).into_vec();
            keep.sort_unstable();
            let lat = start_z.cols();
            let rows = keep.iter().flat_map(|&i| start_z.row(i).to_vec()).collect();
            start_z = Tensor::new(vec![keep.len(), lat], rows)?;
            starts = starts.select(&keep)?;
        }
        let im = self.imaginer.imagine(store, &starts, &start_z, &mut self.rng)?;
        assert!(
            im.per_start_counts(starts.len()).iter().all(|&c| c <= MAX_ROLLOUTS_PER_START),
            "more than {MAX_ROLLOUTS_PER_START} imagined rollouts for a start state"
        );
        let ac = self.models.agent.update(
            store,
            wm.backbone_prefix(),
            &im,
            &mut self.norm,
            &self.ac_adam,
            self.cfg.optim.clip,
        )?;
        Ok((fwd.breakdown, ac))
    }
}

/// Trains with the plain latent imaginer.
pub fn run_train(cfg: &RunConfig, out: &Path) -> Result<TrainSummary> {
    run_train_with(cfg, out, |im| im).map(|(s, _)| s)
}

/// Trains with the latent imaginer wrapped by `wrap` (e.g. a counter) and
/// hands the wrapper back afterwards. Writes `metrics.csv` and
/// `checkpoint.tdv3` into `out`.
pub fn run_train_with<I, F>(cfg: &RunConfig, out: &Path, wrap: F) -> Result<(TrainSummary, I)>
where
    I: Imaginer<Real>,
    F: FnOnce(LatentImaginer) -> I,
{
    let started = Instant::now();
    let models = Models::new(cfg)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let s = &cfg.schedule;
    let mut root = ChaCha8Rng::seed_from_u64(s.seed);
    let mut store = models.init(&mut ChaCha8Rng::seed_from_u64(root.gen()))?;
    let mut collector = Collector::new(&cfg.env, &models, &store, ChaCha8Rng::seed_from_u64(root.gen()))?;
    let eval_seed: u64 = root.gen();
    let imaginer = wrap(LatentImaginer {
        wm: models.wm.clone(),
        agent: models.agent.clone(),
        horizon: cfg.replay.horizon,
        per_start: cfg.replay.imagine_per_start,
    });
    let mut learner = Learner {
        cfg,
        models: &models,
        imaginer,
        norm: ReturnNormalizer::new(cfg.agent.return_decay),
        wm_adam: AdamConfig::with_lr(cfg.optim.wm_lr),
        ac_adam: AdamConfig::with_lr(cfg.optim.ac_lr),
        rng: ChaCha8Rng::seed_from_u64(root.gen()),
    };
    let metrics_path = out.join(METRICS_FILE);
    let mut metrics = MetricsWriter::create(&metrics_path)?;
    let mut buffer = ReplayBuffer::new(cfg.replay.capacity, cfg.replay.priority_floor)?;

    let mut last = (LossBreakdown::default(), AcLosses { policy: 0.0, critic: 0.0 });
    let mut final_row = None;
    let (mut train_steps, mut episodes, mut debt) = (0u64, 0u64, 0.0f64);
    let mut ready = false;
    let mut env_steps = s.total_env_steps as u64;
    for step in 1..=s.total_env_steps {
        let warmup = step <= s.prefill;
        if let Some(t) = collector.step(&models, &store, warmup)? {
            buffer.add_trajectory(t)?;
            episodes += 1;
            ready = buffer.items().any(|t| t.len() >= cfg.replay.seg_len);
        }
        if !warmup && ready {
            debt += s.train_ratio;
            while debt >= 1.0 {
                debt -= 1.0;
                last = learner.step(&mut store, &buffer)?;
                train_steps += 1;
            }
        }
        if step % s.eval_every == 0 {
            let ev = evaluate_store(&cfg.env, &models, &store, s.eval_episodes, eval_seed)?;
            let row = MetricsRow {
                env_step: step as u64,
                episode_return_mean: ev.mean,
                wm: last.0,
                policy_loss: last.1.policy,
                critic_loss: last.1.critic,
                wall_ms: if s.record_wall_clock {
                    started.elapsed().as_millis() as u64
                } else {
                    0
                },
            };
            metrics.append(&row)?;
            final_row = Some(row);
            if s.stop_return.is_some_and(|target| ev.mean >= target) {
                env_steps = step as u64;
                break;
            }
        }
    }
    let checkpoint_path = out.join(CHECKPOINT_FILE);
    Checkpoint::from_store(&cfg.to_text(), &store).save(&checkpoint_path)?;
    let summary = TrainSummary {
        metrics_path,
        checkpoint_path,
        final_row,
        env_steps,
        train_steps,
        episodes,
    };
    Ok((summary, learner.imaginer))
}

/// Seed precedence: explicit value, then the `TDV3_SEED` environment
/// variable, then the config file.
pub fn apply_seed_override(cfg: &mut RunConfig, explicit: Option<u64>) -> Result<()> {
    if let Some(seed) = explicit {
        cfg.schedule.seed = seed;
    } else if let Ok(raw) = std::env::var("TDV3_SEED") {
        cfg.schedule.seed = raw.trim().parse().map_err(|_| Error::Config {
            key: "TDV3_SEED".into(),
            msg: format!("`{raw}` is not an unsigned integer"),
        })?;
    }
    Ok(())
}
