//! Named parameter collection with freeze marking and adaptive-moment updates.

use std::collections::{BTreeMap, BTreeSet};
use std::hash::{Hash, Hasher};

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Tensor<T>,
    m: Tensor<T>,
    v: Tensor<T>,
    steps: u64,
}

impl<T: Scalar> Param<T> {
    fn new(value: Tensor<T>) -> Self {
        let zeros = Tensor::zeros(value.shape());
        Self {
            m: zeros.clone(),
            v: zeros,
            value,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }
}

/// Parameters keyed by dot-separated path. A frozen prefix `p` covers `p`
/// itself and every name below `p.`.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore<T> {
    entries: BTreeMap<String, Param<T>>,
    frozen: BTreeSet<String>,
}

#[derive(Clone, Debug)]
pub struct GradResult<T> {
    pub loss_value: T,
    pub grads: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> GradResult<T> {
    pub fn global_norm(&self) -> T {
        self.grads
            .values()
            .flat_map(|g| g.data().iter())
            .map(|&v| v * v)
            .sum::<T>()
            .sqrt()
    }

    /// Rescales all gradients so their global norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: T) -> T {
        let norm = self.global_norm();
        if norm > max_norm {
            let s = max_norm / norm;
            for g in self.grads.values_mut() {
                for v in g.data_mut() {
                    *v *= s;
                }
            }
        }
        norm
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

fn covers(prefix: &str, name: &str) -> bool {
    name == prefix || (name.starts_with(prefix) && name.as_bytes().get(prefix.len()) == Some(&b'.'))
}

impl<T: Scalar> ParameterStore<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
            frozen: BTreeSet::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter `{name}`")));
        }
        self.entries.insert(name, Param::new(value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, p)| (k.as_str(), &p.value))
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(|p| p.value.numel()).sum()
    }

    pub fn freeze(&mut self, prefix: &str) -> Result<()> {
        if !self.entries.keys().any(|k| covers(prefix, k)) {
            return Err(Error::contract(format!(
                "freeze prefix `{prefix}` matches no parameter"
            )));
        }
        self.frozen.insert(prefix.to_string());
        Ok(())
    }

    pub fn unfreeze(&mut self, prefix: &str) {
        self.frozen.remove(prefix);
    }

    pub fn frozen_paths(&self) -> impl Iterator<Item = &str> {
        self.frozen.iter().map(String::as_str)
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.iter().any(|p| covers(p, name))
    }

    /// Adaptive-moment update of every non-frozen entry that has a gradient.
    pub fn adam_step(&mut self, grads: &GradResult<T>, cfg: &AdamConfig) -> Result<()> {
        let b1 = T::of(cfg.beta1);
        let b2 = T::of(cfg.beta2);
        let lr = T::of(cfg.lr);
        let eps = T::of(cfg.eps);
        for (name, g) in &grads.grads {
            if self.is_frozen(name) {
                continue;
            }
            let p = self
                .entries
                .get_mut(name)
                .ok_or_else(|| Error::contract(format!("gradient for unknown `{name}`")))?;
            p.value.same_shape("adam_step", g)?;
            p.steps += 1;
            let bc1 = T::one() - b1.powi(p.steps as i32);
            let bc2 = T::one() - b2.powi(p.steps as i32);
            let (m, v, w) = (p.m.data_mut(), p.v.data_mut(), p.value.data_mut());
            for i in 0..g.numel() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                w[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Hash over the exact bytes of every tensor under `prefix`.
    pub fn fingerprint(&self, prefix: &str) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (name, p) in &self.entries {
            if prefix.is_empty() || covers(prefix, name) {
                name.hash(&mut h);
                for v in p.value.data() {
                    v.as_f64().to_bits().hash(&mut h);
                }
            }
        }
        h.finish()
    }

    /// Copies every tensor of `other` into `self`, requiring the same name
    /// set and shapes. Reports the first offending name in sorted order.
    pub fn assign_from(&mut self, other: &ParameterStore<T>) -> Result<()> {
        for (name, p) in &self.entries {
            match other.entries.get(name) {
                None => {
                    return Err(Error::Mismatch {
                        name: name.clone(),
                        detail: format!("missing (expected shape {:?})", p.value.shape()),
                    })
                }
                Some(o) if o.value.shape() != p.value.shape() => {
                    return Err(Error::Mismatch {
                        name: name.clone(),
                        detail: format!(
                            "shape {:?} does not match expected {:?}",
                            o.value.shape(),
                            p.value.shape()
                        ),
                    })
                }
                _ => {}
            }
        }
        if let Some(extra) = other.entries.keys().find(|k| !self.entries.contains_key(*k)) {
            return Err(Error::Mismatch {
                name: extra.clone(),
                detail: "unexpected tensor".into(),
            });
        }
        for (name, p) in self.entries.iter_mut() {
            p.value = other.entries[name].value.clone();
        }
        Ok(())
    }
}

/// Adds `{name}.w` (uniform ±sqrt(6/(fan_in+fan_out))) and `{name}.b` (zeros).
pub fn init_dense<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParameterStore<T>,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<()> {
    store.insert(format!("{name}.w"), glorot(fan_in, fan_out, rng))?;
    store.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]))
}

pub fn glorot<T: Scalar, R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| T::of(rng.gen_range(-limit..=limit)))
        .collect();
    Tensor::from_parts(vec![fan_in, fan_out], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParameterStore<f64> {
        let mut s = ParameterStore::new();
        s.insert("wm.a", Tensor::vector(vec![1.0, 2.0])).unwrap();
        s.insert("wm.ab", Tensor::vector(vec![3.0])).unwrap();
        s.insert("actor.w", Tensor::vector(vec![0.5])).unwrap();
        s
    }

    fn grads(entries: &[(&str, Vec<f64>)]) -> GradResult<f64> {
        GradResult {
            loss_value: 0.0,
            grads: entries
                .iter()
                .map(|(k, v)| (k.to_string(), Tensor::vector(v.clone())))
                .collect(),
        }
    }

    #[test]
    fn prefix_matching_respects_path_boundaries() {
        let mut s = store();
        s.freeze("wm.a").unwrap();
        assert!(s.is_frozen("wm.a"));
        assert!(!s.is_frozen("wm.ab"));
        assert!(s.freeze("nothing").is_err());
        assert!(s.insert("wm.a", Tensor::scalar(0.0)).is_err());
    }

    #[test]
    fn zero_grad_leaves_fresh_parameters_unchanged() {
        let mut s = store();
        let before = s.fingerprint("");
        s.adam_step(&grads(&[("wm.a", vec![0.0, 0.0])]), &AdamConfig::default())
            .unwrap();
        assert_eq!(before, s.fingerprint(""));
    }

    #[test]
    fn frozen_entry_is_bit_identical_after_step() {
        let mut s = store();
        let g = grads(&[("wm.a", vec![1.0, -1.0]), ("actor.w", vec![2.0])]);
        s.adam_step(&g, &AdamConfig::default()).unwrap();
        let wm_before = s.get("wm.a").unwrap().clone();
        s.freeze("wm").unwrap();
        for _ in 0..5 {
            s.adam_step(&g, &AdamConfig::default()).unwrap();
        }
        assert_eq!(
            s.get("wm.a").unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            wm_before.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_ne!(s.get("actor.w").unwrap().data()[0], 0.5);
    }

    #[test]
    fn single_scalar_step_matches_hand_formula() {
        let mut s = ParameterStore::<f64>::new();
        s.insert("p", Tensor::vector(vec![0.7])).unwrap();
        let cfg = AdamConfig {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        // two steps so that the second starts from known nonzero moments
        s.adam_step(&grads(&[("p", vec![0.3])]), &cfg).unwrap();
        s.adam_step(&grads(&[("p", vec![-0.2])]), &cfg).unwrap();

        let mut p: f64 = 0.7;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for (t, g) in [(1, 0.3f64), (2, -0.2)] {
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            p -= 0.01 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((s.get("p").unwrap().data()[0] - p).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut s = store();
        let err = s
            .adam_step(&grads(&[("wm.a", vec![1.0])]), &AdamConfig::default())
            .unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = grads(&[("a", vec![300.0, 400.0])]);
        let before = g.clip_global_norm(100.0);
        assert_eq!(before, 500.0);
        assert!((g.global_norm() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn assign_from_names_first_offender() {
        let mut a = store();
        let mut b = ParameterStore::new();
        b.insert("actor.w", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let err = a.assign_from(&b).unwrap_err();
        match err {
            Error::Mismatch { name, .. } => assert_eq!(name, "actor.w"),
            e => panic!("{e}"),
        }
    }
}
