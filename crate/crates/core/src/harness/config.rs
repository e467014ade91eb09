//! Run configuration and its flat `key=value` text form.
//!
//! One setting per line, dotted keys, `#` starts a comment. Keys that are
//! absent keep their defaults; unknown or repeated keys are errors naming
//! the key. Bin grids accept either `symlog:N:LIMIT` or an explicit
//! comma-separated list of centers, and are always written as the list so
//! that text produced by [`RunConfig::to_text`] parses back to an equal
//! value.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::agent::{ActorCriticConfig, FreezeScope};
use crate::envs::{EnvConfig, EnvKind};
use crate::error::{Error, Result};
use crate::ssm::{Backbone, Bins, WorldModelConfig};
use crate::transformer::{Context, EncoderConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayConfig {
    /// Stored episodes.
    pub capacity: usize,
    pub priority_floor: f64,
    /// Entries per training segment.
    pub seg_len: usize,
    /// Segments per world-model batch.
    pub batch: usize,
    /// Imagination horizon.
    pub horizon: usize,
    pub imagine_per_start: usize,
    /// Start states kept per batch for imagination (0 keeps all).
    pub imagine_starts: usize,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self {
            capacity: 500,
            priority_floor: 0.1,
            seg_len: 16,
            batch: 16,
            horizon: 15,
            imagine_per_start: 3,
            imagine_starts: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub total_env_steps: usize,
    /// Training steps per environment step.
    pub train_ratio: f64,
    /// Environment steps collected with a uniform policy before training.
    pub prefill: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub seed: u64,
    /// Fill the `wall_ms` column; off by default so metrics stay
    /// reproducible byte for byte.
    pub record_wall_clock: bool,
    /// End the run early at the first evaluation whose mean return reaches
    /// this value.
    pub stop_return: Option<f64>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            total_env_steps: 50_000,
            train_ratio: 0.25,
            prefill: 1000,
            eval_every: 2500,
            eval_episodes: 64,
            seed: 0,
            record_wall_clock: false,
            stop_return: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub wm_lr: f64,
    /// Shared by actor and critic.
    pub ac_lr: f64,
    /// Global gradient-norm clip for every update.
    pub clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            wm_lr: 1e-3,
            ac_lr: 3e-4,
            clip: 100.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub world_model: WorldModelConfig,
    pub agent: ActorCriticConfig,
    pub replay: ReplayConfig,
    pub schedule: ScheduleConfig,
    pub optim: OptimConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let env = EnvConfig::default();
        let enc = EncoderConfig {
            d_model: 32,
            n_heads: 2,
            d_ff: 64,
            n_layers: 1,
            context: Context::FullCausal,
            positional_encoding: false,
        };
        let world_model = WorldModelConfig {
            backbone: Backbone::Tssm(enc),
            groups: 4,
            classes: 4,
            d_obs: env.obs_dim(),
            d_model: 32,
            d_embed: 32,
            d_hidden: 64,
            n_actions: env.n_actions(),
            reward_bins: Bins::symlog_spaced(41, 20.0).expect("static bins"),
            ..WorldModelConfig::default()
        };
        let agent = ActorCriticConfig {
            d_hidden: 64,
            ..ActorCriticConfig::default()
        };
        Self {
            env,
            world_model,
            agent,
            replay: ReplayConfig::default(),
            schedule: ScheduleConfig::default(),
            optim: OptimConfig::default(),
        }
    }
}

fn backbone_name(b: &Backbone) -> String {
    match b {
        Backbone::Rssm => "rssm".into(),
        Backbone::Tssm(e) => match e.context {
            Context::FullCausal => "tssm_causal".into(),
            Context::Window(k) => format!("tssm_window{k}"),
        },
    }
}

fn parse_context(s: &str) -> Option<Option<Context>> {
    match s {
        "rssm" => Some(None),
        "tssm_causal" => Some(Some(Context::FullCausal)),
        _ => s
            .strip_prefix("tssm_window")
            .and_then(|k| k.parse().ok())
            .map(|k| Some(Context::Window(k))),
    }
}

fn bins_text(b: &Bins) -> String {
    b.centers().iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_bins(s: &str) -> std::result::Result<Bins, String> {
    if let Some(rest) = s.strip_prefix("symlog:") {
        let (n, limit) = rest.split_once(':').ok_or("expected symlog:N:LIMIT")?;
        let n = n.parse().map_err(|e| format!("bin count: {e}"))?;
        let limit = limit.parse().map_err(|e| format!("limit: {e}"))?;
        return Bins::symlog_spaced(n, limit).map_err(|e| e.to_string());
    }
    let centers = s
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| format!("`{v}`: {e}")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Bins::new(centers).map_err(|e| e.to_string())
}

/// Raw values by key, consumed as they are parsed.
struct Pairs(BTreeMap<String, String>);

impl Pairs {
    fn take<V: FromStr>(&mut self, key: &str, slot: &mut V) -> Result<()>
    where
        V::Err: Display,
    {
        self.take_with(key, slot, |s| s.parse::<V>().map_err(|e| e.to_string()))
    }

    fn take_with<V>(
        &mut self,
        key: &str,
        slot: &mut V,
        parse: impl FnOnce(&str) -> std::result::Result<V, String>,
    ) -> Result<()> {
        if let Some(raw) = self.0.remove(key) {
            *slot = parse(&raw).map_err(|msg| Error::Config {
                key: key.into(),
                msg: format!("cannot parse `{raw}`: {msg}"),
            })?;
        }
        Ok(())
    }
}

impl RunConfig {
    /// Same run with a different backbone; encoder settings of a transformer
    /// backbone are kept (or taken from the defaults when switching from
    /// the recurrent one).
    pub fn with_backbone(mut self, context: Option<Context>) -> Self {
        self.world_model.backbone = match context {
            None => Backbone::Rssm,
            Some(c) => {
                let mut enc = match self.world_model.backbone {
                    Backbone::Tssm(e) => e,
                    Backbone::Rssm => EncoderConfig {
                        d_model: self.world_model.d_model,
                        ..EncoderConfig::default()
                    },
                };
                enc.context = c;
                Backbone::Tssm(enc)
            }
        };
        self
    }

    pub fn backbone_name(&self) -> String {
        backbone_name(&self.world_model.backbone)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |key: &str, msg: String| Err(Error::Config { key: key.into(), msg });
        self.env.validate()?;
        let wm = &self.world_model;
        if wm.d_obs != self.env.obs_dim() || wm.n_actions != self.env.n_actions() {
            return cfg_err(
                "world_model",
                format!(
                    "observation/action widths {}/{} do not match the environment's {}/{}",
                    wm.d_obs,
                    wm.n_actions,
                    self.env.obs_dim(),
                    self.env.n_actions()
                ),
            );
        }
        wm.validate().map_err(|e| Error::Config {
            key: "world_model".into(),
            msg: e.to_string(),
        })?;
        self.agent.validate().map_err(|e| Error::Config {
            key: "agent".into(),
            msg: e.to_string(),
        })?;
        let r = &self.replay;
        for (key, v) in [
            ("replay.capacity", r.capacity),
            ("replay.batch", r.batch),
            ("replay.horizon", r.horizon),
            ("replay.imagine_per_start", r.imagine_per_start),
        ] {
            if v == 0 {
                return cfg_err(key, "must be positive".into());
            }
        }
        let longest = self.env.steps_per_episode() + 1;
        if r.seg_len < 2 || r.seg_len > longest {
            return cfg_err(
                "replay.seg_len",
                format!("{} outside 2..={longest} (entries per episode)", r.seg_len),
            );
        }
        if !(r.priority_floor > 0.0 && r.priority_floor.is_finite()) {
            return cfg_err("replay.priority_floor", format!("{} must be positive", r.priority_floor));
        }
        let s = &self.schedule;
        if !(s.train_ratio > 0.0 && s.train_ratio.is_finite()) {
            return cfg_err("schedule.train_ratio", format!("{} must be positive", s.train_ratio));
        }
        if s.eval_every == 0 {
            return cfg_err("schedule.eval_every", "must be positive".into());
        }
        if s.eval_episodes == 0 {
            return cfg_err("schedule.eval_episodes", "must be positive".into());
        }
        if s.stop_return.is_some_and(|v| !v.is_finite()) {
            return cfg_err("schedule.stop_return", "must be finite".into());
        }
        let o = &self.optim;
        for (key, v) in [
            ("optim.wm_lr", o.wm_lr),
            ("optim.ac_lr", o.ac_lr),
            ("optim.clip", o.clip),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return cfg_err(key, format!("{v} must be positive"));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = Vec::new();
        let mut put = |k: &str, v: String| out.push(format!("{k}={v}"));
        let e = &self.env;
        put(
            "env.kind",
            match e.kind {
                EnvKind::DelayedRecall => "delayed_recall",
                EnvKind::RepeatSequence => "repeat_sequence",
            }
            .into(),
        );
        put("env.delay", e.delay.to_string());
        put("env.n_symbols", e.n_symbols.to_string());
        put("env.episode_len", e.episode_len.to_string());
        put("env.seed", e.seed.to_string());

        let w = &self.world_model;
        put("world_model.backbone", backbone_name(&w.backbone));
        if let Backbone::Tssm(enc) = &w.backbone {
            put("world_model.n_heads", enc.n_heads.to_string());
            put("world_model.d_ff", enc.d_ff.to_string());
            put("world_model.n_layers", enc.n_layers.to_string());
            put("world_model.positional_encoding", enc.positional_encoding.to_string());
        }
        put("world_model.groups", w.groups.to_string());
        put("world_model.classes", w.classes.to_string());
        put("world_model.d_model", w.d_model.to_string());
        put("world_model.d_embed", w.d_embed.to_string());
        put("world_model.d_hidden", w.d_hidden.to_string());
        put("world_model.unimix", w.unimix.to_string());
        put("world_model.free_bits", w.free_bits.to_string());
        put("world_model.kl_dyn", w.kl_dyn.to_string());
        put("world_model.kl_rep", w.kl_rep.to_string());
        put("world_model.reward_bins", bins_text(&w.reward_bins));

        let a = &self.agent;
        put("agent.gamma", a.gamma.to_string());
        put("agent.lambda", a.lambda.to_string());
        put("agent.entropy_scale", a.entropy_scale.to_string());
        put("agent.d_hidden", a.d_hidden.to_string());
        put("agent.return_decay", a.return_decay.to_string());
        put(
            "agent.freeze",
            match a.freeze {
                FreezeScope::WorldModel => "world_model",
                FreezeScope::Backbone => "backbone",
            }
            .into(),
        );
        put("agent.critic_bins", bins_text(&a.critic_bins));

        let r = &self.replay;
        put("replay.capacity", r.capacity.to_string());
        put("replay.priority_floor", r.priority_floor.to_string());
        put("replay.seg_len", r.seg_len.to_string());
        put("replay.batch", r.batch.to_string());
        put("replay.horizon", r.horizon.to_string());
        put("replay.imagine_per_start", r.imagine_per_start.to_string());
        put("replay.imagine_starts", r.imagine_starts.to_string());

        let s = &self.schedule;
        put("schedule.total_env_steps", s.total_env_steps.to_string());
        put("schedule.train_ratio", s.train_ratio.to_string());
        put("schedule.prefill", s.prefill.to_string());
        put("schedule.eval_every", s.eval_every.to_string());
        put("schedule.eval_episodes", s.eval_episodes.to_string());
        put("schedule.seed", s.seed.to_string());
        put("schedule.record_wall_clock", s.record_wall_clock.to_string());
        put(
            "schedule.stop_return",
            s.stop_return.map_or_else(|| "off".to_string(), |v| v.to_string()),
        );

        let o = &self.optim;
        put("optim.wm_lr", o.wm_lr.to_string());
        put("optim.ac_lr", o.ac_lr.to_string());
        put("optim.clip", o.clip.to_string());
        out.push(String::new());
        out.join("\n")
    }

    /// Parses config text on top of the defaults and validates the result.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config {
                    key: line.into(),
                    msg: format!("line {} is not key=value", i + 1),
                });
            };
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if map.insert(k.clone(), v).is_some() {
                return Err(Error::Config {
                    key: k,
                    msg: "given more than once".into(),
                });
            }
        }
        let mut p = Pairs(map);
        let mut cfg = RunConfig::default();

        let e = &mut cfg.env;
        p.take_with("env.kind", &mut e.kind, |s| match s {
            "delayed_recall" => Ok(EnvKind::DelayedRecall),
            "repeat_sequence" => Ok(EnvKind::RepeatSequence),
            _ => Err("expected delayed_recall or repeat_sequence".into()),
        })?;
        let len_given = p.0.contains_key("env.episode_len");
        p.take("env.delay", &mut e.delay)?;
        p.take("env.n_symbols", &mut e.n_symbols)?;
        p.take("env.episode_len", &mut e.episode_len)?;
        if !len_given && e.kind == EnvKind::DelayedRecall {
            e.episode_len = e.delay + 1;
        }
        p.take("env.seed", &mut e.seed)?;

        let w = &mut cfg.world_model;
        let mut context = match &w.backbone {
            Backbone::Rssm => None,
            Backbone::Tssm(e) => Some(e.context),
        };
        p.take_with("world_model.backbone", &mut context, |s| {
            parse_context(s).ok_or_else(|| "expected rssm, tssm_causal or tssm_window<k>".into())
        })?;
        let mut enc = match w.backbone {
            Backbone::Tssm(e) => e,
            Backbone::Rssm => EncoderConfig::default(),
        };
        p.take("world_model.n_heads", &mut enc.n_heads)?;
        p.take("world_model.d_ff", &mut enc.d_ff)?;
        p.take("world_model.n_layers", &mut enc.n_layers)?;
        p.take("world_model.positional_encoding", &mut enc.positional_encoding)?;
        p.take("world_model.groups", &mut w.groups)?;
        p.take("world_model.classes", &mut w.classes)?;
        p.take("world_model.d_model", &mut w.d_model)?;
        p.take("world_model.d_embed", &mut w.d_embed)?;
        p.take("world_model.d_hidden", &mut w.d_hidden)?;
        p.take("world_model.unimix", &mut w.unimix)?;
        p.take("world_model.free_bits", &mut w.free_bits)?;
        p.take("world_model.kl_dyn", &mut w.kl_dyn)?;
        p.take("world_model.kl_rep", &mut w.kl_rep)?;
        p.take_with("world_model.reward_bins", &mut w.reward_bins, parse_bins)?;
        enc.d_model = w.d_model;
        w.backbone = match context {
            None => Backbone::Rssm,
            Some(c) => Backbone::Tssm(EncoderConfig { context: c, ..enc }),
        };
        w.d_obs = cfg.env.obs_dim();
        w.n_actions = cfg.env.n_actions();

        let a = &mut cfg.agent;
        p.take("agent.gamma", &mut a.gamma)?;
        p.take("agent.lambda", &mut a.lambda)?;
        p.take("agent.entropy_scale", &mut a.entropy_scale)?;
        p.take("agent.d_hidden", &mut a.d_hidden)?;
        p.take("agent.return_decay", &mut a.return_decay)?;
        p.take_with("agent.freeze", &mut a.freeze, |s| match s {
            "world_model" => Ok(FreezeScope::WorldModel),
            "backbone" => Ok(FreezeScope::Backbone),
            _ => Err("expected world_model or backbone".into()),
        })?;
        p.take_with("agent.critic_bins", &mut a.critic_bins, parse_bins)?;

        let r = &mut cfg.replay;
        p.take("replay.capacity", &mut r.capacity)?;
        p.take("replay.priority_floor", &mut r.priority_floor)?;
        p.take("replay.seg_len", &mut r.seg_len)?;
        p.take("replay.batch", &mut r.batch)?;
        p.take("replay.horizon", &mut r.horizon)?;
        p.take("replay.imagine_per_start", &mut r.imagine_per_start)?;
        p.take("replay.imagine_starts", &mut r.imagine_starts)?;

        let s = &mut cfg.schedule;
        p.take("schedule.total_env_steps", &mut s.total_env_steps)?;
        p.take("schedule.train_ratio", &mut s.train_ratio)?;
        p.take("schedule.prefill", &mut s.prefill)?;
        p.take("schedule.eval_every", &mut s.eval_every)?;
        p.take("schedule.eval_episodes", &mut s.eval_episodes)?;
        p.take("schedule.seed", &mut s.seed)?;
        p.take("schedule.record_wall_clock", &mut s.record_wall_clock)?;
        p.take_with("schedule.stop_return", &mut s.stop_return, |v| match v {
            "off" => Ok(None),
            _ => v.parse().map(Some).map_err(|_| "expected a number or off".into()),
        })?;

        let o = &mut cfg.optim;
        p.take("optim.wm_lr", &mut o.wm_lr)?;
        p.take("optim.ac_lr", &mut o.ac_lr)?;
        p.take("optim.clip", &mut o.clip)?;

        if let Some(key) = p.0.keys().next() {
            return Err(Error::Config {
                key: key.clone(),
                msg: "unknown key".into(),
            });
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}
