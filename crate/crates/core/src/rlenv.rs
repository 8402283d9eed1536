//! The bit-allocation MDP: one decision per layer, context features that
//! track earlier decisions, and a single terminal reward.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::calibrate::{CalibrationStats, EmbeddingContext, LayerFeatures, Standardizer};
use crate::oracles::{Oracle, OracleKind};
use crate::quantcore::{mean_bits, BitPalette, DEFAULT_GROUP_SIZE};
use crate::scalefold::compute_fold_scales;
use crate::tinylm::TinyModel;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub budget_soft: f64,
    pub budget_hard: f64,
    pub q_plus: f64,
    pub q_minus: f64,
    pub b_lin: f64,
    pub b_quad: f64,
    /// Carries the linear zone's penalty at the hard budget into the
    /// quadratic zone so the penalty is continuous.
    pub continuous_penalty: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            budget_soft: 4.0,
            budget_hard: 4.25,
            q_plus: 10.0,
            q_minus: 5.0,
            b_lin: 2.0,
            b_quad: 20.0,
            continuous_penalty: false,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.budget_soft < self.budget_hard) {
            return Err(Error::Config("budget_soft must be below budget_hard".into()));
        }
        if [self.q_plus, self.q_minus, self.b_lin, self.b_quad]
            .iter()
            .any(|c| !(c.is_finite() && *c > 0.0))
        {
            return Err(Error::Config("reward coefficients must be positive".into()));
        }
        Ok(())
    }
}

/// Quality term: linear gain below the baseline perplexity, half-slope
/// loss above it.
pub fn quality_reward(ppl: f64, ppl_base: f64, cfg: &RewardConfig) -> Result<f64> {
    if !(ppl > 0.0 && ppl_base > 0.0) || !ppl.is_finite() || !ppl_base.is_finite() {
        return Err(Error::Invalid(format!("perplexities must be positive (got {ppl} and {ppl_base})")));
    }
    let ratio = ppl / ppl_base;
    Ok(if ratio <= 1.0 {
        cfg.q_plus * (1.0 - ratio)
    } else {
        -cfg.q_minus * (ratio - 1.0)
    })
}

/// Budget term: free up to the soft budget, linear up to the hard budget,
/// quadratic beyond.
pub fn budget_penalty(avg_bits: f64, cfg: &RewardConfig) -> f64 {
    if avg_bits <= cfg.budget_soft {
        0.0
    } else if avg_bits <= cfg.budget_hard {
        -cfg.b_lin * (avg_bits - cfg.budget_soft)
    } else {
        let quad = -cfg.b_quad * (avg_bits - cfg.budget_hard).powi(2);
        if cfg.continuous_penalty {
            quad - cfg.b_lin * (cfg.budget_hard - cfg.budget_soft)
        } else {
            quad
        }
    }
}

/// `(r_q, r_b, r_q + r_b)`.
pub fn composite_reward(ppl: f64, ppl_base: f64, avg_bits: f64, cfg: &RewardConfig) -> Result<(f64, f64, f64)> {
    let q = quality_reward(ppl, ppl_base, cfg)?;
    let b = budget_penalty(avg_bits, cfg);
    Ok((q, b, q + b))
}

/// Maps a squashed action to the nearest palette width; exact midpoints go
/// to the lower width.
pub fn action_to_bits(u: f64, palette: &BitPalette) -> u8 {
    let (lo, hi) = (f64::from(palette.min()), f64::from(palette.max()));
    let b = lo + u.clamp(0.0, 1.0) * (hi - lo);
    let mut best = palette.bits()[0];
    let mut best_d = f64::INFINITY;
    for &p in palette.bits() {
        let d = (f64::from(p) - b).abs();
        if d < best_d {
            best = p;
            best_d = d;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub palette: BitPalette,
    pub reward: RewardConfig,
    pub oracle: OracleKind,
    /// Proxy oracle sensitivity.
    pub kappa: f64,
    pub group_size: usize,
    pub fold: bool,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            palette: BitPalette::default(),
            reward: RewardConfig::default(),
            oracle: OracleKind::ExactPpl,
            kappa: 1.0,
            group_size: DEFAULT_GROUP_SIZE,
            fold: true,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        self.reward.validate()?;
        if self.group_size == 0 {
            return Err(Error::Config("group_size must be at least 1".into()));
        }
        if !(self.kappa.is_finite() && self.kappa >= 0.0) {
            return Err(Error::Config("kappa must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Terminal evaluation of a full allocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub bits: Vec<u8>,
    pub avg_bits: f64,
    pub ppl: f64,
    pub r_q: f64,
    pub r_b: f64,
    #[serde(rename = "R")]
    pub reward: f64,
}

/// One line of the episode log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    #[serde(flatten)]
    pub outcome: EpisodeOutcome,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub bits: u8,
    pub outcome: Option<EpisodeOutcome>,
}

/// Episodic environment over an ordered set of layers.
#[derive(Debug, Clone)]
pub struct BitAllocEnv {
    cfg: EnvConfig,
    features: LayerFeatures,
    oracle: Oracle,
    cursor: usize,
    ctx: EmbeddingContext,
    bits: Vec<u8>,
    done: bool,
}

impl BitAllocEnv {
    /// Environment over `layers` (all quantizable layers when `None`).
    /// Folding parameters, when enabled, are derived from `stats`.
    pub fn new(
        model: TinyModel,
        stats: &CalibrationStats,
        evaluation: Vec<Vec<u32>>,
        cfg: EnvConfig,
        layers: Option<Vec<usize>>,
    ) -> Result<Self> {
        cfg.validate()?;
        let layers = layers.unwrap_or_else(|| (0..model.n_layers()).collect());
        let features = if layers.len() >= 2 {
            LayerFeatures::for_layers(&model, stats, &layers)?
        } else {
            single_layer_features(&model, stats, &layers)?
        };
        let fold = if cfg.fold {
            Some(compute_fold_scales(stats, model.blocks.len())?)
        } else {
            None
        };
        let oracle = Oracle::new(
            cfg.oracle,
            model,
            evaluation,
            fold,
            layers.clone(),
            cfg.palette.clone(),
            cfg.group_size,
            cfg.kappa,
        )?;
        Ok(Self::from_parts(cfg, features, oracle))
    }

    pub fn from_parts(cfg: EnvConfig, features: LayerFeatures, oracle: Oracle) -> Self {
        let n = features.len();
        Self {
            cfg,
            features,
            oracle,
            cursor: 0,
            ctx: EmbeddingContext::first(n),
            bits: Vec::with_capacity(n),
            done: true,
        }
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn features(&self) -> &LayerFeatures {
        &self.features
    }

    /// Re-expresses the observations with another model's feature
    /// statistics (zero-shot transfer).
    pub fn restandardize(&mut self, standardizer: Standardizer) -> Result<()> {
        let f = &self.features;
        self.features = LayerFeatures::with_standardizer(f.names.clone(), f.raw.clone(), standardizer)?;
        Ok(())
    }

    pub fn oracle(&self) -> &Oracle {
        &self.oracle
    }

    pub fn n_layers(&self) -> usize {
        self.features.len()
    }

    pub fn ppl_base(&self) -> f64 {
        self.oracle.ppl_base()
    }

    pub fn reset(&mut self) -> Vec<f64> {
        self.cursor = 0;
        self.ctx = EmbeddingContext::first(self.n_layers());
        self.bits.clear();
        self.done = false;
        self.features.state(0, &self.ctx)
    }

    /// Applies the squashed action `u` to the current layer.
    pub fn step(&mut self, u: f64) -> Result<StepResult> {
        if self.done {
            return Err(Error::EpisodeDone);
        }
        if !u.is_finite() {
            return Err(Error::NonFinite("action".into()));
        }
        let b = action_to_bits(u, &self.cfg.palette);
        self.bits.push(b);
        self.ctx.advance(b);
        self.cursor += 1;
        let n = self.n_layers();
        if self.cursor < n {
            return Ok(StepResult {
                observation: self.features.state(self.cursor, &self.ctx),
                reward: 0.0,
                done: false,
                bits: b,
                outcome: None,
            });
        }
        self.done = true;
        let outcome = self.evaluate(&self.bits)?;
        Ok(StepResult {
            observation: self.features.state(n - 1, &self.ctx),
            reward: outcome.reward,
            done: true,
            bits: b,
            outcome: Some(outcome),
        })
    }

    /// Scores a complete allocation with the configured oracle.
    pub fn evaluate(&self, bits: &[u8]) -> Result<EpisodeOutcome> {
        let res = self.oracle.evaluate(bits)?;
        let avg = mean_bits(bits);
        let (r_q, r_b, reward) = composite_reward(res.ppl, self.oracle.ppl_base(), avg, &self.cfg.reward)?;
        Ok(EpisodeOutcome {
            bits: bits.to_vec(),
            avg_bits: avg,
            ppl: res.ppl,
            r_q,
            r_b,
            reward,
        })
    }

    /// Runs a whole episode with the given action sequence.
    pub fn rollout(&mut self, actions: &[f64]) -> Result<(EpisodeOutcome, f64)> {
        let t = Instant::now();
        self.reset();
        let mut outcome = None;
        for &u in actions {
            outcome = self.step(u)?.outcome;
        }
        let outcome = outcome.ok_or_else(|| Error::Invalid("action sequence shorter than the episode".into()))?;
        Ok((outcome, t.elapsed().as_secs_f64() * 1e3))
    }
}

/// A lone layer cannot be standardized across layers; its static features
/// are used centered (all zeros).
fn single_layer_features(model: &TinyModel, stats: &CalibrationStats, layers: &[usize]) -> Result<LayerFeatures> {
    let [idx] = layers else {
        return Err(Error::Invalid("environment needs at least one layer".into()));
    };
    let rec = model.layer_record(*idx)?;
    let raw = crate::calibrate::static_features(&rec, &stats.layers[*idx], 0, 1).to_vec();
    Ok(LayerFeatures {
        names: vec![rec.name],
        standardized: vec![vec![0.0; raw.len()]],
        standardizer: crate::calibrate::Standardizer {
            mu: raw.clone(),
            sigma: vec![0.0; raw.len()],
        },
        raw: vec![raw],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibrate::collect_act_scales;
    use crate::tinylm::{generate_model, Corpus, TinyModelSpec};

    fn env(cfg: EnvConfig, layers: Option<Vec<usize>>) -> BitAllocEnv {
        let spec = TinyModelSpec {
            vocab_size: 64,
            d_model: 32,
            n_heads: 2,
            n_blocks: 1,
            d_ff: 64,
            max_seq_len: 32,
            seed: 8,
            ..Default::default()
        };
        let model = generate_model(&spec).unwrap();
        let corpus = Corpus::synthetic(64, 4, 4, 24, 1.2, 8).unwrap();
        let stats = collect_act_scales(&model, &corpus.calibration, 4).unwrap();
        BitAllocEnv::new(model, &stats, corpus.evaluation, cfg, layers).unwrap()
    }

    #[test]
    fn quality_reward_values() {
        let c = RewardConfig::default();
        assert_eq!(quality_reward(5.0, 5.0, &c).unwrap(), 0.0);
        assert!((quality_reward(1.1, 1.0, &c).unwrap() + 0.5).abs() < 1e-12);
        assert!((quality_reward(0.9, 1.0, &c).unwrap() - 1.0).abs() < 1e-12);
        assert!(quality_reward(0.0, 1.0, &c).is_err());
        assert!(quality_reward(1.0, -1.0, &c).is_err());
    }

    #[test]
    fn budget_penalty_zones() {
        let c = RewardConfig::default();
        assert_eq!(budget_penalty(3.8, &c), 0.0);
        assert!((budget_penalty(4.1, &c) + 0.2).abs() < 1e-12);
        assert!((budget_penalty(4.25, &c) + 0.5).abs() < 1e-12);
        assert!((budget_penalty(4.5, &c) + 1.25).abs() < 1e-12);
        // the printed penalty jumps back up just above the hard budget
        assert!(budget_penalty(4.25 + 1e-9, &c) > -1e-12);
        let cont = RewardConfig {
            continuous_penalty: true,
            ..c
        };
        assert!((budget_penalty(4.25 + 1e-9, &cont) + 0.5).abs() < 1e-9);
        assert!((budget_penalty(4.5, &cont) + 1.75).abs() < 1e-12);
    }

    #[test]
    fn reward_probe_table() {
        let c = RewardConfig::default();
        let probes = [
            (0.5, 3.0),
            (0.9, 3.9),
            (1.0, 4.0),
            (1.0, 4.1),
            (1.1, 4.25),
            (1.2, 4.3),
            (0.8, 4.5),
            (2.0, 5.0),
            (1.05, 3.5),
            (0.95, 4.2),
            (1.5, 6.0),
            (0.99, 8.0),
        ];
        for (ratio, avg) in probes {
            let q: f64 = if ratio <= 1.0 { 10.0 * (1.0 - ratio) } else { -5.0 * (ratio - 1.0) };
            let b: f64 = if avg <= 4.0 {
                0.0
            } else if avg <= 4.25 {
                -2.0 * (avg - 4.0)
            } else {
                -20.0 * (avg - 4.25) * (avg - 4.25)
            };
            let (rq, rb, r) = composite_reward(ratio * 3.0, 3.0, avg, &c).unwrap();
            assert!((rq - q).abs() < 1e-9 && (rb - b).abs() < 1e-9 && (r - q - b).abs() < 1e-9);
        }
    }

    #[test]
    fn penalty_non_increasing_within_zones() {
        let c = RewardConfig::default();
        let mut last = 0.0;
        for k in 1..=25 {
            let p = budget_penalty(4.0 + k as f64 * 0.01, &c);
            assert!(p <= last);
            last = p;
        }
        let mut last = f64::INFINITY;
        for k in 1..=100 {
            let p = budget_penalty(4.25 + k as f64 * 0.05, &c);
            assert!(p <= last);
            last = p;
        }
    }

    #[test]
    fn action_mapping() {
        let p = BitPalette::default();
        assert_eq!(action_to_bits(0.01, &p), 3);
        assert_eq!(action_to_bits(0.5, &p), 4);
        assert_eq!(action_to_bits(0.25, &p), 3);
        assert_eq!(action_to_bits(0.75, &p), 4);
        assert_eq!(action_to_bits(0.99, &p), 5);
        let wide = BitPalette::new(vec![3, 4, 5, 6]).unwrap();
        assert_eq!(action_to_bits(1.0, &wide), 6);
    }

    #[test]
    fn context_tracks_decisions() {
        let mut e = env(EnvConfig { oracle: OracleKind::Proxy, ..Default::default() }, Some(vec![0, 1, 2]));
        let s0 = e.reset();
        assert_eq!(s0.len(), 11);
        assert_eq!((s0[9], s0[10]), (0.0, 0.0));
        assert_eq!(e.reset(), s0);
        let r1 = e.step(0.01).unwrap();
        assert_eq!((r1.bits, r1.reward, r1.done), (3, 0.0, false));
        assert_eq!(r1.observation[9], 3.0 / 8.0);
        assert_eq!(r1.observation[10], 3.0 / 8.0);
        let r2 = e.step(0.5).unwrap();
        assert_eq!(r2.observation[10], 3.5 / 8.0);
        let r3 = e.step(0.99).unwrap();
        assert!(r3.done);
        let out = r3.outcome.unwrap();
        assert_eq!(out.bits, vec![3, 4, 5]);
        assert_eq!(out.avg_bits, 4.0);
        assert_eq!(r3.observation[10], 4.0 / 8.0);
        assert_eq!(r3.reward, out.reward);
        assert!(matches!(e.step(0.5), Err(Error::EpisodeDone)));
    }

    #[test]
    fn single_layer_episode() {
        let mut e = env(EnvConfig { oracle: OracleKind::Proxy, ..Default::default() }, Some(vec![4]));
        e.reset();
        let r = e.step(0.5).unwrap();
        assert!(r.done);
        assert!(r.outcome.is_some());
    }

    #[test]
    fn all_eight_bits_hits_the_budget_cliff() {
        let cfg = EnvConfig {
            palette: BitPalette::new(vec![8]).unwrap(),
            ..Default::default()
        };
        let mut e = env(cfg, None);
        let (out, _) = e.rollout(&[0.5; 7]).unwrap();
        assert!(out.r_q.abs() < 0.05, "{}", out.r_q);
        assert!((out.r_b + 20.0 * 3.75f64.powi(2)).abs() < 1e-9);
        let (again, _) = e.rollout(&[0.5; 7]).unwrap();
        assert_eq!(again.reward, out.reward);
        assert!(e.rollout(&[0.5; 3]).is_err());
    }

    #[test]
    fn episode_record_json_keys() {
        let rec = EpisodeRecord {
            episode: 3,
            outcome: EpisodeOutcome {
                bits: vec![3, 4],
                avg_bits: 3.5,
                ppl: 10.0,
                r_q: 0.0,
                r_b: 0.0,
                reward: 0.0,
            },
            wall_ms: 1.0,
        };
        let v = serde_json::to_value(&rec).unwrap();
        for k in ["episode", "bits", "avg_bits", "ppl", "r_q", "r_b", "R", "wall_ms"] {
            assert!(v.get(k).is_some(), "{k}");
        }
    }
}
