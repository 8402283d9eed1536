use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::distr::Open01;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{Actor, ReplayBuffer, SacAgent, SacConfig, Transition, UpdateReport};
use crate::calibrate::{EmbeddingContext, LayerFeatures, Standardizer};
use crate::nnkit::{load_checkpoint, save_checkpoint};
use crate::quantcore::BitPalette;
use crate::rlenv::{action_to_bits, BitAllocEnv, EpisodeOutcome, EpisodeRecord};
use crate::rng::{substream, Rng};
use crate::{Error, Result};

const STATIC_DIMS: usize = 9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub episodes: usize,
    pub sac: SacConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episodes: 300,
            sac: SacConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    #[serde(flatten)]
    pub record: EpisodeRecord,
    pub warmup: bool,
    pub updates: usize,
    pub best_reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub episode: usize,
    pub update: u64,
    #[serde(flatten)]
    pub report: UpdateReport,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogEntry {
    Episode(EpisodeLog),
    Update(UpdateRecord),
}

/// Metadata stored next to a policy checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyManifest {
    pub source_model: String,
    pub palette: BitPalette,
    /// Feature statistics of the source model over all 11 state dims; the
    /// context dims carry identity statistics since they enter unscaled.
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub episodes_trained: usize,
    pub best_reward: Option<f64>,
    pub best_bits: Option<Vec<u8>>,
    pub log_std_min: f64,
    pub log_std_max: f64,
    pub config_hash: Option<String>,
}

impl PolicyManifest {
    /// Statistics of the static feature dims.
    pub fn standardizer(&self) -> Result<Standardizer> {
        if self.mu.len() < STATIC_DIMS || self.sigma.len() != self.mu.len() {
            return Err(Error::Shape(format!(
                "manifest statistics must cover at least {STATIC_DIMS} dims (got {} / {})",
                self.mu.len(),
                self.sigma.len()
            )));
        }
        Ok(Standardizer {
            mu: self.mu[..STATIC_DIMS].to_vec(),
            sigma: self.sigma[..STATIC_DIMS].to_vec(),
        })
    }
}

fn full_stats(st: &Standardizer) -> (Vec<f64>, Vec<f64>) {
    let mut mu = st.mu.clone();
    let mut sigma = st.sigma.clone();
    mu.extend([0.0, 0.0]);
    sigma.extend([1.0, 1.0]);
    (mu, sigma)
}

/// Greedy allocation of `actor` over layers described by their raw static
/// features, standardized with `standardizer` (the source model's statistics
/// when transferring). Context features evolve exactly as in training.
pub fn apply_policy(
    actor: &Actor<f32>,
    raw: &[Vec<f64>],
    standardizer: &Standardizer,
    palette: &BitPalette,
) -> Result<Vec<u8>> {
    if raw.is_empty() {
        return Err(Error::Invalid("no layers to allocate".into()));
    }
    if standardizer.mu.len() != STATIC_DIMS || raw.iter().any(|r| r.len() != STATIC_DIMS) {
        return Err(Error::Shape(format!("policy input expects {STATIC_DIMS} static feature dims")));
    }
    let names = (0..raw.len()).map(|i| i.to_string()).collect();
    let features = LayerFeatures::with_standardizer(names, raw.to_vec(), standardizer.clone())?;
    let mut ctx = EmbeddingContext::first(raw.len());
    let mut bits = Vec::with_capacity(raw.len());
    for i in 0..raw.len() {
        let u = actor.greedy_action(&features.state(i, &ctx))?;
        let b = action_to_bits(u, palette);
        bits.push(b);
        ctx.advance(b);
    }
    Ok(bits)
}

const POLICY_FILE: &str = "policy.rmpn";
const MANIFEST_FILE: &str = "policy.json";

pub fn save_policy(dir: impl AsRef<Path>, actor: &Actor<f32>, manifest: &PolicyManifest) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_checkpoint(&actor.net, dir.join(POLICY_FILE))?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_vec_pretty(manifest)?).map_err(|e| Error::io(&path, e))
}

pub fn load_policy(dir: impl AsRef<Path>) -> Result<(Actor<f32>, PolicyManifest)> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: PolicyManifest = serde_json::from_slice(&text)?;
    let net = load_checkpoint(dir.join(POLICY_FILE))?;
    let actor = Actor::from_net(net, manifest.log_std_min, manifest.log_std_max)?;
    Ok((actor, manifest))
}

/// Episode-level SAC training loop with warm-up, deferred terminal rewards
/// and best-so-far tracking.
#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: TrainConfig,
    env: BitAllocEnv,
    agent: SacAgent<f32>,
    replay: ReplayBuffer,
    explore_rng: Rng,
    update_rng: Rng,
    episodes_done: usize,
    best: Option<EpisodeOutcome>,
    log: Vec<LogEntry>,
}

impl Trainer {
    pub fn new(env: BitAllocEnv, cfg: TrainConfig, seed: u64) -> Result<Self> {
        cfg.sac.validate()?;
        let agent = SacAgent::new(cfg.sac.clone(), &mut substream(seed, "sac-init"))?;
        Ok(Self {
            replay: ReplayBuffer::new(cfg.sac.replay_capacity)?,
            explore_rng: substream(seed, "explore"),
            update_rng: substream(seed, "update"),
            cfg,
            env,
            agent,
            episodes_done: 0,
            best: None,
            log: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn env(&self) -> &BitAllocEnv {
        &self.env
    }

    pub fn agent(&self) -> &SacAgent<f32> {
        &self.agent
    }

    pub fn replay(&self) -> &ReplayBuffer {
        &self.replay
    }

    pub fn episodes_done(&self) -> usize {
        self.episodes_done
    }

    /// Best allocation seen in any training episode.
    pub fn best(&self) -> Option<&EpisodeOutcome> {
        self.best.as_ref()
    }

    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    pub fn episode_logs(&self) -> impl Iterator<Item = &EpisodeLog> {
        self.log.iter().filter_map(|e| match e {
            LogEntry::Episode(ep) => Some(ep),
            LogEntry::Update(_) => None,
        })
    }

    /// Plays one episode, commits its transitions and runs the scheduled
    /// gradient updates.
    pub fn run_episode(&mut self) -> Result<&EpisodeLog> {
        let start = Instant::now();
        let episode = self.episodes_done + 1;
        let warmup = episode <= self.cfg.sac.warmup_episodes;
        let mut state = self.env.reset();
        let mut pending = Vec::with_capacity(self.env.n_layers());
        let outcome = loop {
            let u = if warmup {
                self.explore_rng.sample::<f64, _>(Open01)
            } else {
                self.agent.actor.sample_action(&state, false, &mut self.explore_rng)?.0
            };
            let step = self.env.step(u)?;
            pending.push(Transition {
                state,
                action: u,
                reward: 0.0,
                next_state: step.observation.clone(),
                done: step.done,
            });
            state = step.observation;
            if let Some(outcome) = step.outcome {
                break outcome;
            }
        };
        if let Some(last) = pending.last_mut() {
            last.reward = outcome.reward;
        }
        for t in pending {
            self.replay.push(t)?;
        }

        let mut updates = 0;
        if !warmup {
            let n = self.cfg.sac.updates_per_episode.unwrap_or(self.env.n_layers());
            for _ in 0..n {
                if self.replay.len() < self.cfg.sac.batch_size {
                    break;
                }
                let batch = self.replay.sample(self.cfg.sac.batch_size, &mut self.update_rng)?;
                let report = self.agent.update(&batch, &mut self.update_rng)?;
                updates += 1;
                self.log.push(LogEntry::Update(UpdateRecord {
                    episode,
                    update: self.agent.updates,
                    report,
                }));
            }
        }

        if self.best.as_ref().is_none_or(|b| outcome.reward > b.reward) {
            self.best = Some(outcome.clone());
        }
        self.episodes_done = episode;
        let best_reward = self.best.as_ref().map_or(outcome.reward, |b| b.reward);
        self.log.push(LogEntry::Episode(EpisodeLog {
            record: EpisodeRecord {
                episode,
                outcome,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            },
            warmup,
            updates,
            best_reward,
        }));
        match self.log.last() {
            Some(LogEntry::Episode(ep)) => Ok(ep),
            _ => unreachable!("episode entry was just pushed"),
        }
    }

    /// Runs the remaining episodes of the configured budget.
    pub fn train(&mut self) -> Result<()> {
        while self.episodes_done < self.cfg.episodes {
            self.run_episode()?;
        }
        Ok(())
    }

    /// Deterministic allocation of the current policy on the training env.
    pub fn greedy_bits(&self) -> Result<Vec<u8>> {
        let f = self.env.features();
        apply_policy(&self.agent.actor, &f.raw, &f.standardizer, &self.env.config().palette)
    }

    pub fn greedy_outcome(&self) -> Result<EpisodeOutcome> {
        self.env.evaluate(&self.greedy_bits()?)
    }

    pub fn manifest(&self, source_model: &str, config_hash: Option<String>) -> PolicyManifest {
        let (mu, sigma) = full_stats(&self.env.features().standardizer);
        PolicyManifest {
            source_model: source_model.to_string(),
            palette: self.env.config().palette.clone(),
            mu,
            sigma,
            episodes_trained: self.episodes_done,
            best_reward: self.best.as_ref().map(|b| b.reward),
            best_bits: self.best.as_ref().map(|b| b.bits.clone()),
            log_std_min: self.cfg.sac.log_std_min,
            log_std_max: self.cfg.sac.log_std_max,
            config_hash,
        }
    }

    pub fn write_log(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::new();
        for entry in &self.log {
            serde_json::to_writer(&mut out, entry)?;
            out.push(b'\n');
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }
}
