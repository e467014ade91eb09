//! Synthetic memory tasks with flat observations.
//!
//! Observations are `n_symbols + 2` wide: a symbol one-hot, then a
//! cue-phase flag and a query-phase flag. Step indices are 1-based.
//!
//! * `DelayedRecall`: the cue symbol is shown at step 1, steps 2..=delay
//!   are all-zero padding, and step `delay + 1` raises the query flag. The
//!   action taken there earns 1 if it names the cue, and the episode ends.
//! * `RepeatSequence`: `k = episode_len − delay` cues are shown at steps
//!   1..=k and queried, in order, at steps `delay + 1 ..= episode_len`. The
//!   single reward of 1 arrives after the last query iff every answer matched.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ssm::Observation;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnvKind {
    DelayedRecall,
    RepeatSequence,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvConfig {
    pub kind: EnvKind,
    pub delay: usize,
    pub n_symbols: usize,
    pub episode_len: usize,
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            kind: EnvKind::DelayedRecall,
            delay: 16,
            n_symbols: 4,
            episode_len: 17,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EnvState {
    /// Index of the observation most recently emitted.
    pub step_index: usize,
    cues: Vec<usize>,
    all_matched: bool,
    pub done: bool,
}

impl EnvState {
    /// The (first) cue symbol.
    pub fn hidden_cue(&self) -> usize {
        self.cues[0]
    }

    pub fn cues(&self) -> &[usize] {
        &self.cues
    }
}

/// One environment transition.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: EnvState,
    pub obs: Observation,
    pub reward: f64,
    pub cont: f64,
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| {
            Err(Error::Config {
                key: format!("env.{key}"),
                msg,
            })
        };
        if self.delay < 1 {
            return bad("delay", "must be at least 1".into());
        }
        if self.n_symbols < 2 {
            return bad("n_symbols", "must be at least 2".into());
        }
        if self.episode_len <= self.delay {
            return bad(
                "episode_len",
                format!("{} must exceed delay {}", self.episode_len, self.delay),
            );
        }
        if self.kind == EnvKind::RepeatSequence && self.episode_len - self.delay > self.delay {
            return bad(
                "episode_len",
                format!("sequence of {} cues does not fit before the first query", self.episode_len - self.delay),
            );
        }
        Ok(())
    }

    pub fn obs_dim(&self) -> usize {
        self.n_symbols + 2
    }

    pub fn n_actions(&self) -> usize {
        self.n_symbols
    }

    /// Number of cue symbols per episode.
    pub fn sequence_len(&self) -> usize {
        match self.kind {
            EnvKind::DelayedRecall => 1,
            EnvKind::RepeatSequence => self.episode_len - self.delay,
        }
    }

    /// Decision steps per episode (the terminal observation not counted).
    pub fn steps_per_episode(&self) -> usize {
        self.delay + self.sequence_len()
    }

    pub fn reset(&self, seed: u64) -> Result<(EnvState, Observation)> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cues = (0..self.sequence_len())
            .map(|_| rng.gen_range(0..self.n_symbols))
            .collect();
        let state = EnvState {
            step_index: 1,
            cues,
            all_matched: true,
            done: false,
        };
        let obs = self.observe(&state);
        Ok((state, obs))
    }

    fn observe(&self, s: &EnvState) -> Observation {
        let mut f = vec![0.0; self.obs_dim()];
        let k = self.sequence_len();
        let t = s.step_index;
        if !s.done {
            if t <= k {
                f[s.cues[t - 1]] = 1.0;
                f[self.n_symbols] = 1.0;
            } else if t > self.delay {
                f[self.n_symbols + 1] = 1.0;
            }
        }
        Observation::new(f).expect("finite by construction")
    }

    pub fn step(&self, state: &EnvState, action: usize) -> Result<Transition> {
        if state.done {
            return Err(Error::contract("step on a finished episode"));
        }
        if action >= self.n_actions() {
            return Err(Error::contract(format!("action {action} out of {}", self.n_actions())));
        }
        let mut s = state.clone();
        let t = s.step_index;
        let mut reward = 0.0;
        if t > self.delay {
            let q = t - self.delay - 1;
            s.all_matched &= action == s.cues[q];
            if q + 1 == self.sequence_len() {
                s.done = true;
                if s.all_matched {
                    reward = 1.0;
                }
            }
        }
        s.step_index = t + 1;
        let obs = self.observe(&s);
        let cont = if s.done { 0.0 } else { 1.0 };
        Ok(Transition {
            state: s,
            obs,
            reward,
            cont,
        })
    }

    /// `(optimal, uniformly random)` expected episode return.
    pub fn oracle_returns(&self) -> Result<(f64, f64)> {
        self.validate()?;
        let m = self.n_symbols as f64;
        Ok((1.0, m.powi(-(self.sequence_len() as i32))))
    }
}
