//! Quick invariant checks runnable from the command line.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::check_param_gradients;
use crate::graph::Graph;
use crate::params::ParameterStore;
use crate::replay::{ReplayBuffer, Trajectory};
use crate::ssm::{kl_categorical, symexp, symlog, ActionVec, Backbone, Bins, LatentMode, Observation, WorldModel};
use crate::tensor::{softmax_lastdim, Tensor};
use crate::transformer::{encoder_forward, encoder_step, init_encoder, Context, EncoderCache, EncoderConfig};

use super::checkpoint::Checkpoint;
use super::config::RunConfig;

#[derive(Clone, Debug)]
pub struct SelfCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, run: impl FnOnce() -> Result<(bool, String)>) -> SelfCheck {
    match run() {
        Ok((passed, detail)) => SelfCheck { name, passed, detail },
        Err(e) => SelfCheck {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

/// Runs every check and reports each outcome.
pub fn selftest() -> Vec<SelfCheck> {
    vec![
        check("symlog_roundtrip", symlog_roundtrip),
        check("twohot_roundtrip", twohot_roundtrip),
        check("kl_self_zero", kl_self_zero),
        check("softmax_shift", softmax_shift),
        check("cached_encoder_matches_parallel", cached_encoder),
        check("replay_priorities", replay_priorities),
        check("world_model_gradients", wm_gradients),
        check("checkpoint_roundtrip", checkpoint_roundtrip),
        check("config_roundtrip", || {
            let cfg = RunConfig::default();
            Ok((RunConfig::parse(&cfg.to_text())? == cfg, String::new()))
        }),
    ]
}

fn symlog_roundtrip() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let worst = (0..1000)
        .map(|_| {
            let x: f64 = rng.gen_range(-1e6..1e6) * 10f64.powi(rng.gen_range(-6..0));
            (symexp(symlog(x)) - x).abs() / x.abs().max(1.0)
        })
        .fold(0.0, f64::max);
    Ok((worst <= 1e-12, format!("max error {worst:.3e}")))
}

fn twohot_roundtrip() -> Result<(bool, String)> {
    let bins = Bins::symlog_spaced(41, 20.0)?;
    let (lo, hi) = (bins.centers()[0], bins.centers()[40]);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let worst = (0..1000)
        .map(|_| {
            let v = rng.gen_range(lo..hi);
            (bins.twohot_decode(&bins.twohot_encode(v)) - v).abs()
        })
        .fold(0.0, f64::max);
    Ok((worst <= 1e-9, format!("max error {worst:.3e}")))
}

fn kl_self_zero() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let logits = Tensor::<f64>::new(vec![8, 5], (0..40).map(|_| rng.gen_range(-5.0..5.0)).collect())?;
    let kl = kl_categorical(&logits, &logits)?;
    Ok((kl.abs() <= 1e-10, format!("KL {kl:.3e}")))
}

fn softmax_shift() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::<f64>::new(vec![4, 6], (0..24).map(|_| rng.gen_range(-3.0..3.0)).collect())?;
    let shifted = x.map(|v| v + 17.25);
    let d = softmax_lastdim(&x)
        .data()
        .iter()
        .zip(softmax_lastdim(&shifted).data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok((d <= 1e-12, format!("max difference {d:.3e}")))
}

fn cached_encoder() -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for context in [Context::FullCausal, Context::Window(1)] {
        let cfg = EncoderConfig {
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            n_layers: 2,
            context,
            positional_encoding: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParameterStore::<f64>::new();
        init_encoder(&mut store, "enc", &cfg, &mut rng)?;
        let steps = 16;
        let tokens = Tensor::new(vec![steps, 8], (0..steps * 8).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
        let g = Graph::new();
        let par = encoder_forward(&g, &store, "enc", &cfg, g.constant(tokens.clone()), steps, 1)?;
        let par = g.value(par).clone();
        let mut cache = EncoderCache::new(&cfg);
        for t in 0..steps {
            let out = encoder_step(&store, "enc", &cfg, &mut cache, tokens.row(t))?;
            for (a, b) in out.iter().zip(par.row(t)) {
                worst = worst.max((a - b).abs() / b.abs().max(1.0));
            }
        }
    }
    Ok((worst <= 1e-6, format!("max relative error {worst:.3e}")))
}

fn replay_priorities() -> Result<(bool, String)> {
    let mut buf = ReplayBuffer::new(3, 0.1)?;
    for r in [1.0, 5.0, 3.0] {
        let obs = vec![Observation::new(vec![0.0])?; 2];
        let act = vec![ActionVec::new(0, 1)?; 2];
        buf.add_trajectory(Trajectory::new(obs, act, vec![0.0, r], vec![1.0, 0.0])?)?;
    }
    let expect = [0.1 / 6.3, 4.1 / 6.3, 2.1 / 6.3];
    let n = 20_000;
    let mut counts = [0usize; 3];
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..n {
        counts[buf.sample_index(2, &mut rng)?] += 1;
    }
    let ok = counts.iter().zip(expect).all(|(&c, p)| {
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        (c as f64 - n as f64 * p).abs() <= 3.0 * sigma
    });
    Ok((ok, format!("counts {counts:?} of {n}")))
}

fn wm_gradients() -> Result<(bool, String)> {
    let mut cfg = RunConfig::default();
    cfg.env.delay = 2;
    cfg.env.episode_len = 3;
    let enc = EncoderConfig {
        d_model: 8,
        n_heads: 2,
        d_ff: 8,
        n_layers: 1,
        context: Context::FullCausal,
        positional_encoding: false,
    };
    let wm_cfg = crate::ssm::WorldModelConfig {
        backbone: Backbone::Tssm(enc),
        groups: 2,
        classes: 3,
        d_model: 8,
        d_embed: 4,
        d_hidden: 5,
        reward_bins: Bins::symlog_spaced(7, 20.0)?,
        d_obs: cfg.env.obs_dim(),
        n_actions: cfg.env.n_actions(),
        ..cfg.world_model.clone()
    };
    let wm = WorldModel::new(wm_cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParameterStore::<f64>::new();
    wm.init(&mut store, &mut rng)?;
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for n in &names {
        for v in store.get_mut(n)?.data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
    let (steps, b) = (3, 2);
    let d = cfg.env.obs_dim();
    let n_act = cfg.env.n_actions();
    let obs = Tensor::new(vec![steps * b, d], (0..steps * b * d).map(|_| rng.gen_range(0.0..1.0)).collect())?;
    let mut act = Tensor::zeros(&[steps * b, n_act]);
    for r in 0..steps * b {
        act.row_mut(r)[rng.gen_range(0..n_act)] = 1.0;
    }
    let batch = crate::ssm::SegmentBatch::new(steps, b, obs, act, vec![0.0, 0.0, 0.5, -1.0, 1.0, 0.0], vec![1.0, 1.0, 1.0, 1.0, 1.0, 0.0])?;
    let report = check_param_gradients(
        &store,
        |s| {
            let g = Graph::new();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let out = wm.loss_anchored(&g, s, &store, &batch, LatentMode::Expected, &mut rng)?;
            Ok((g, out.loss))
        },
        1e-6,
    )?;
    Ok((
        report.passes(1e-4),
        format!("{} entries, max relative error {:.3e}", report.checked, report.max_rel_err),
    ))
}

fn checkpoint_roundtrip() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParameterStore::<f32>::new();
    store.insert("x", Tensor::new(vec![64], (0..64).map(|_| rng.gen::<f32>() - 0.5).collect())?)?;
    let back: ParameterStore<f32> = Checkpoint::from_bytes(&Checkpoint::from_store("", &store).to_bytes()?)?.to_store()?;
    let same = store
        .get("x")?
        .data()
        .iter()
        .zip(back.get("x")?.data())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    Ok((same, String::new()))
}
