//! Episode storage with return-prioritised segment sampling.

use std::collections::VecDeque;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::ssm::{ActionVec, Observation, SegmentBatch};
use crate::tensor::Tensor;

/// Entry `t` is the observation `x_t`, the action taken there, and the reward
/// and continue flag received on arriving at `x_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    observations: Vec<Observation>,
    actions: Vec<ActionVec>,
    rewards: Vec<f64>,
    continues: Vec<f64>,
    episode_return: f64,
}

impl Trajectory {
    pub fn new(
        observations: Vec<Observation>,
        actions: Vec<ActionVec>,
        rewards: Vec<f64>,
        continues: Vec<f64>,
    ) -> Result<Self> {
        let n = observations.len();
        if n == 0 {
            return Err(Error::contract("empty trajectory"));
        }
        if actions.len() != n || rewards.len() != n || continues.len() != n {
            return Err(Error::contract(format!(
                "trajectory lengths differ: {n} observations, {} actions, {} rewards, {} continues",
                actions.len(),
                rewards.len(),
                continues.len()
            )));
        }
        if continues.iter().any(|&c| c != 0.0 && c != 1.0) || continues[..n - 1].contains(&0.0) {
            return Err(Error::contract("continue flags must be 1 everywhere but a terminal last entry"));
        }
        Ok(Self {
            episode_return: rewards.iter().sum(),
            observations,
            actions,
            rewards,
            continues,
        })
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn actions(&self) -> &[ActionVec] {
        &self.actions
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn continues(&self) -> &[f64] {
        &self.continues
    }

    pub fn episode_return(&self) -> f64 {
        self.episode_return
    }

    pub fn terminated(&self) -> bool {
        self.continues[self.len() - 1] == 0.0
    }

    /// Entries `start .. start + len`.
    pub fn segment(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.len() {
            return Err(Error::contract(format!(
                "segment {start}..{} of a {}-entry trajectory",
                start + len,
                self.len()
            )));
        }
        let r = start..start + len;
        Self::new(
            self.observations[r.clone()].to_vec(),
            self.actions[r.clone()].to_vec(),
            self.rewards[r.clone()].to_vec(),
            self.continues[r].to_vec(),
        )
    }
}

/// Stacks equally long segments time-major.
pub fn segment_batch<T: Scalar>(segments: &[Trajectory]) -> Result<SegmentBatch<T>> {
    let Some(first) = segments.first() else {
        return Err(Error::contract("no segments"));
    };
    let steps = first.len();
    if segments.iter().any(|s| s.len() != steps) {
        return Err(Error::contract("segments differ in length"));
    }
    let b = segments.len();
    let d_obs = first.observations[0].len();
    let n_act = first.actions[0].n();
    let mut obs = Vec::with_capacity(steps * b * d_obs);
    let mut act = Vec::with_capacity(steps * b * n_act);
    let mut rewards = Vec::with_capacity(steps * b);
    let mut conts = Vec::with_capacity(steps * b);
    for t in 0..steps {
        for s in segments {
            let o = &s.observations[t];
            if o.len() != d_obs || s.actions[t].n() != n_act {
                return Err(Error::contract("segments differ in observation or action width"));
            }
            obs.extend(o.features().iter().map(|&v| T::of(v)));
            act.extend(s.actions[t].one_hot::<T>());
            rewards.push(s.rewards[t]);
            conts.push(s.continues[t]);
        }
    }
    SegmentBatch::new(
        steps,
        b,
        Tensor::new(vec![steps * b, d_obs], obs)?,
        Tensor::new(vec![steps * b, n_act], act)?,
        rewards,
        conts,
    )
}

#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Trajectory>,
    priority_floor: f64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, priority_floor: f64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::contract("replay capacity must be positive"));
        }
        if !(priority_floor > 0.0 && priority_floor.is_finite()) {
            return Err(Error::contract(format!("priority floor {priority_floor} must be positive")));
        }
        Ok(Self {
            capacity,
            items: VecDeque::with_capacity(capacity),
            priority_floor,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn items(&self) -> impl Iterator<Item = &Trajectory> {
        self.items.iter()
    }

    /// Stores `t`, evicting the oldest trajectory when full.
    pub fn add_trajectory(&mut self, t: Trajectory) -> Result<()> {
        if t.is_empty() {
            return Err(Error::contract("empty trajectory"));
        }
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
        Ok(())
    }

    /// Sampling probability of every stored trajectory for segments of
    /// `seg_len` (zero for trajectories that are too short).
    pub fn probabilities(&self, seg_len: usize) -> Result<Vec<f64>> {
        if self.items.is_empty() {
            return Err(Error::contract("sampling from an empty replay buffer"));
        }
        let eligible = |t: &Trajectory| t.len() >= seg_len;
        let min = self
            .items
            .iter()
            .filter(|t| eligible(t))
            .map(Trajectory::episode_return)
            .fold(f64::INFINITY, f64::min);
        if min == f64::INFINITY {
            return Err(Error::contract(format!("no stored trajectory has {seg_len} entries")));
        }
        let w: Vec<f64> = self
            .items
            .iter()
            .map(|t| {
                if eligible(t) {
                    t.episode_return() - min + self.priority_floor
                } else {
                    0.0
                }
            })
            .collect();
        let total: f64 = w.iter().sum();
        Ok(w.into_iter().map(|v| v / total).collect())
    }

    /// Index of a trajectory drawn by priority.
    pub fn sample_index<R: Rng + ?Sized>(&self, seg_len: usize, rng: &mut R) -> Result<usize> {
        let p = self.probabilities(seg_len)?;
        let dist = WeightedIndex::new(&p).map_err(|e| Error::contract(e.to_string()))?;
        Ok(dist.sample(rng))
    }

    /// `batch` segments of `seg_len` entries, each from a trajectory drawn by
    /// priority with a uniform start offset.
    pub fn sample_segments<R: Rng + ?Sized>(&self, batch: usize, seg_len: usize, rng: &mut R) -> Result<Vec<Trajectory>> {
        if seg_len == 0 || batch == 0 {
            return Err(Error::contract("segment length and batch must be positive"));
        }
        let p = self.probabilities(seg_len)?;
        let dist = WeightedIndex::new(&p).map_err(|e| Error::contract(e.to_string()))?;
        (0..batch)
            .map(|_| {
                let t = &self.items[dist.sample(rng)];
                let start = rng.gen_range(0..=t.len() - seg_len);
                t.segment(start, seg_len)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn traj(rewards: &[f64]) -> Trajectory {
        let n = rewards.len();
        let mut conts = vec![1.0; n];
        conts[n - 1] = 0.0;
        Trajectory::new(
            (0..n).map(|i| Observation::new(vec![i as f64, 1.0]).unwrap()).collect(),
            (0..n).map(|i| ActionVec::new(i % 2, 2).unwrap()).collect(),
            rewards.to_vec(),
            conts,
        )
        .unwrap()
    }

    fn fixture(returns: &[f64], len: usize) -> ReplayBuffer {
        let mut buf = ReplayBuffer::new(10, 0.1).unwrap();
        for &r in returns {
            let mut rw = vec![0.0; len];
            rw[len - 1] = r;
            buf.add_trajectory(traj(&rw)).unwrap();
        }
        buf
    }

    #[test]
    fn fifo_and_returns() {
        let mut buf = ReplayBuffer::new(2, 0.1).unwrap();
        buf.add_trajectory(traj(&[0.0, 1.0])).unwrap();
        assert_eq!(buf.len(), 1);
        buf.add_trajectory(traj(&[0.0, 2.0, 0.5])).unwrap();
        buf.add_trajectory(traj(&[3.0])).unwrap();
        let rets: Vec<f64> = buf.items().map(Trajectory::episode_return).collect();
        assert_eq!(rets, vec![2.5, 3.0]);
        assert!(Trajectory::new(vec![], vec![], vec![], vec![]).is_err());
    }

    #[test]
    fn sampling_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let buf = ReplayBuffer::new(3, 0.1).unwrap();
        assert!(buf.sample_segments(1, 2, &mut rng).is_err());
        let buf = fixture(&[1.0], 3);
        assert!(buf.sample_segments(1, 4, &mut rng).is_err());
        assert!(ReplayBuffer::new(3, 0.0).is_err());
    }

    #[test]
    fn single_trajectory_always_chosen() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let buf = fixture(&[7.0], 5);
        for s in buf.sample_segments(50, 3, &mut rng).unwrap() {
            assert_eq!(s.len(), 3);
            let start = s.observations()[0].features()[0] as usize;
            assert!(start <= 2);
        }
    }

    fn chi_within_3_sigma(counts: &[usize], p: &[f64], n: usize) {
        for (&k, &pi) in counts.iter().zip(p) {
            let sigma = (n as f64 * pi * (1.0 - pi)).sqrt();
            assert!((k as f64 - n as f64 * pi).abs() <= 3.0 * sigma, "{counts:?} vs {p:?}");
        }
    }

    #[test]
    fn prioritised_frequencies() {
        let buf = fixture(&[1.0, 5.0, 3.0], 4);
        let p = buf.probabilities(4).unwrap();
        let expect = [0.1 / 6.3, 4.1 / 6.3, 2.1 / 6.3];
        for (a, b) in p.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[buf.sample_index(4, &mut rng).unwrap()] += 1;
        }
        chi_within_3_sigma(&counts, &expect, n);
    }

    #[test]
    fn equal_returns_sample_uniformly() {
        let buf = fixture(&[2.0, 2.0, 2.0, 2.0], 3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[buf.sample_index(3, &mut rng).unwrap()] += 1;
        }
        chi_within_3_sigma(&counts, &[0.25; 4], n);
    }

    #[test]
    fn short_trajectories_are_skipped() {
        let mut buf = fixture(&[10.0], 2);
        buf.add_trajectory(traj(&[0.0, 0.0, 0.0, 1.0])).unwrap();
        assert_eq!(buf.probabilities(3).unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn batch_is_time_major() {
        let a = traj(&[0.0, 1.0, 2.0]);
        let b = traj(&[5.0, 6.0, 7.0]);
        let sb = segment_batch::<f64>(&[a, b]).unwrap();
        assert_eq!((sb.steps, sb.batch), (3, 2));
        assert_eq!(sb.rewards, vec![0.0, 5.0, 1.0, 6.0, 2.0, 7.0]);
        assert_eq!(sb.conts, vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(sb.obs.row(2), &[1.0, 1.0]);
        assert_eq!(sb.actions.row(2), &[0.0, 1.0]);
    }
}
