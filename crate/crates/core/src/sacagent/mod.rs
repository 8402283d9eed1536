//! Soft actor-critic over the bit-allocation environment.
//!
//! The actor emits a Gaussian over a pre-squash action `x`; the environment
//! receives `u = sigmoid(x)`. Two critics score `(state, u)` pairs and each
//! has a Polyak-averaged target copy. The entropy temperature is learned.
//!
//! Networks are generic over [`Real`] so the gradient code can be checked in
//! `f64`; training runs in `f32`.

mod replay;
mod trainer;

pub use replay::{Batch, ReplayBuffer, Transition};
pub use trainer::{
    apply_policy, load_policy, save_policy, EpisodeLog, LogEntry, PolicyManifest, TrainConfig, Trainer, UpdateRecord,
};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::calibrate::EMBEDDING_DIM;
use crate::nnkit::{polyak_update, AdamConfig, AdamState, DenseNet, GradientSet, Real, Tape};
use crate::{Error, Result};

pub const STATE_DIM: usize = EMBEDDING_DIM;
const LOG_GUARD: f64 = 1e-8;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SacConfig {
    pub hidden: Vec<usize>,
    /// Number of leading hidden layers followed by a layer norm.
    pub normalized_hidden: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub alpha_lr: f64,
    pub gamma: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub replay_capacity: usize,
    pub init_alpha: f64,
    pub target_entropy: f64,
    pub grad_clip: f64,
    pub log_std_min: f64,
    pub log_std_max: f64,
    pub warmup_episodes: usize,
    /// Gradient updates after each episode; `None` means one per layer.
    pub updates_per_episode: Option<usize>,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            hidden: vec![512, 512, 256],
            normalized_hidden: 2,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            alpha_lr: 3e-4,
            gamma: 0.99,
            tau: 0.005,
            batch_size: 128,
            replay_capacity: 30_000,
            init_alpha: 0.2,
            target_entropy: -1.0,
            grad_clip: 1.0,
            log_std_min: -5.0,
            log_std_max: 2.0,
            warmup_episodes: 20,
            updates_per_episode: None,
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden layer sizes must be non-empty and positive");
        }
        if self.normalized_hidden > self.hidden.len() {
            return bad("normalized_hidden exceeds the number of hidden layers");
        }
        for (name, lr) in [("actor_lr", self.actor_lr), ("critic_lr", self.critic_lr), ("alpha_lr", self.alpha_lr)] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad("tau must lie in [0, 1]");
        }
        if self.batch_size == 0 || self.replay_capacity < self.batch_size {
            return bad("replay capacity must be at least the (positive) batch size");
        }
        if !(self.init_alpha.is_finite() && self.init_alpha > 0.0) {
            return bad("init_alpha must be positive");
        }
        if !(self.grad_clip.is_finite() && self.grad_clip > 0.0) {
            return bad("grad_clip must be positive");
        }
        if !(self.log_std_min < self.log_std_max) {
            return bad("log_std_min must be below log_std_max");
        }
        if !self.target_entropy.is_finite() {
            return bad("target_entropy must be finite");
        }
        Ok(())
    }

    fn adam(lr: f64) -> AdamConfig {
        AdamConfig {
            learning_rate: lr,
            ..AdamConfig::default()
        }
    }

    fn sizes(&self, input: usize, output: usize) -> Vec<usize> {
        let mut s = vec![input];
        s.extend(&self.hidden);
        s.push(output);
        s
    }
}

fn to_real<T: Real>(xs: &[f64]) -> Vec<T> {
    xs.iter().map(|&x| T::lit(x)).collect()
}

fn to_f64<T: Real>(x: T) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gaussian policy head: `net` maps a state to `(mean, raw log-std)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Actor<T = f32> {
    pub net: DenseNet<T>,
    pub log_std_min: f64,
    pub log_std_max: f64,
}

/// One reparameterized draw of the squashed policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SquashedSample {
    pub x: f64,
    pub u: f64,
    pub log_prob: f64,
}

/// Draws `u = sigmoid(mu + exp(log_std) * eps)` and its log-density.
pub fn squash(mu: f64, log_std: f64, eps: f64) -> SquashedSample {
    let x = mu + log_std.exp() * eps;
    let u = sigmoid(x);
    let log_prob = -0.5 * eps * eps - log_std - HALF_LN_2PI - (u * (1.0 - u) + LOG_GUARD).ln();
    SquashedSample { x, u, log_prob }
}

impl<T: Real> Actor<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &SacConfig, rng: &mut R) -> Result<Self> {
        let net = DenseNet::new(&cfg.sizes(STATE_DIM, 2), cfg.normalized_hidden, rng)?;
        Self::from_net(net, cfg.log_std_min, cfg.log_std_max)
    }

    pub fn from_net(net: DenseNet<T>, log_std_min: f64, log_std_max: f64) -> Result<Self> {
        if net.input_dim() != STATE_DIM || net.output_dim() != 2 {
            return Err(Error::Shape(format!(
                "actor must map {STATE_DIM} inputs to 2 outputs, got {} -> {}",
                net.input_dim(),
                net.output_dim()
            )));
        }
        Ok(Self {
            net,
            log_std_min,
            log_std_max,
        })
    }

    fn clamp_log_std(&self, raw: f64) -> (f64, bool) {
        if raw < self.log_std_min {
            (self.log_std_min, false)
        } else if raw > self.log_std_max {
            (self.log_std_max, false)
        } else {
            (raw, true)
        }
    }

    /// `(mean, clamped log-std)` for one state.
    pub fn head(&self, state: &[f64]) -> Result<(f64, f64)> {
        check_state(state)?;
        let out = self.net.forward(&to_real::<T>(state))?;
        Ok((to_f64(out[0]), self.clamp_log_std(to_f64(out[1])).0))
    }

    /// Squashed action for one state. Deterministic mode returns
    /// `sigmoid(mean)` and no log-probability.
    pub fn sample_action<R: Rng + ?Sized>(
        &self,
        state: &[f64],
        deterministic: bool,
        rng: &mut R,
    ) -> Result<(f64, Option<f64>)> {
        let (mu, log_std) = self.head(state)?;
        if deterministic {
            return Ok((sigmoid(mu), None));
        }
        let eps: f64 = rng.sample(StandardNormal);
        let s = squash(mu, log_std, eps);
        Ok((s.u, Some(s.log_prob)))
    }

    pub fn greedy_action(&self, state: &[f64]) -> Result<f64> {
        Ok(sigmoid(self.head(state)?.0))
    }

    fn forward_heads(&self, states: &[T], batch: usize) -> Result<(Vec<(f64, f64, bool)>, Tape<T>)> {
        let (out, tape) = self.net.forward_batch(states, batch)?;
        let heads = out
            .chunks_exact(2)
            .map(|o| {
                let (ls, free) = self.clamp_log_std(to_f64(o[1]));
                (to_f64(o[0]), ls, free)
            })
            .collect();
        Ok((heads, tape))
    }
}

fn check_state(state: &[f64]) -> Result<()> {
    if state.len() != STATE_DIM {
        return Err(Error::Shape(format!("state of length {} (expected {STATE_DIM})", state.len())));
    }
    Ok(())
}

/// Twin critics over `state ++ [u]` and their target copies.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticPair<T = f32> {
    pub q1: DenseNet<T>,
    pub q2: DenseNet<T>,
    pub target1: DenseNet<T>,
    pub target2: DenseNet<T>,
}

impl<T: Real> CriticPair<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &SacConfig, rng: &mut R) -> Result<Self> {
        let sizes = cfg.sizes(STATE_DIM + 1, 1);
        let q1 = DenseNet::new(&sizes, cfg.normalized_hidden, rng)?;
        let q2 = DenseNet::new(&sizes, cfg.normalized_hidden, rng)?;
        Ok(Self {
            target1: q1.clone(),
            target2: q2.clone(),
            q1,
            q2,
        })
    }
}

/// Concatenates each state row with its action.
fn critic_input<T: Real>(states: &[T], actions: &[f64]) -> Vec<T> {
    let mut x = Vec::with_capacity(actions.len() * (STATE_DIM + 1));
    for (row, &u) in states.chunks_exact(STATE_DIM).zip(actions) {
        x.extend_from_slice(row);
        x.push(T::lit(u));
    }
    x
}

/// Learned entropy temperature, parameterized in log space.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyTemp {
    pub log_alpha: f64,
    pub target_entropy: f64,
}

impl EntropyTemp {
    pub fn new(init_alpha: f64, target_entropy: f64) -> Self {
        Self {
            log_alpha: init_alpha.ln(),
            target_entropy,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    /// Loss `mean(-alpha (log_pi + target))` and its derivative in `log_alpha`.
    pub fn loss_and_grad(&self, log_probs: &[f64]) -> (f64, f64) {
        let n = log_probs.len().max(1) as f64;
        let m = log_probs.iter().map(|lp| lp + self.target_entropy).sum::<f64>() / n;
        let a = self.alpha();
        (-a * m, -a * m)
    }
}

/// Bootstrapped critic targets `r + gamma (1 - d) (min_q - alpha log_pi)`.
pub fn bellman_targets(
    rewards: &[f64],
    dones: &[bool],
    next_q1: &[f64],
    next_q2: &[f64],
    next_log_probs: &[f64],
    alpha: f64,
    gamma: f64,
) -> Vec<f64> {
    rewards
        .iter()
        .zip(dones)
        .zip(next_q1.iter().zip(next_q2))
        .zip(next_log_probs)
        .map(|(((&r, &d), (&a, &b)), &lp)| {
            if d {
                r
            } else {
                r + gamma * (a.min(b) - alpha * lp)
            }
        })
        .collect()
}

/// Critic targets for `batch`, drawing one next action per sample from the
/// current actor and scoring it with the target critics.
pub fn critic_target<T: Real, R: Rng + ?Sized>(
    batch: &Batch,
    critics: &CriticPair<T>,
    actor: &Actor<T>,
    alpha: f64,
    gamma: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let n = batch.len();
    let next: Vec<T> = to_real(&batch.next_states);
    let (heads, _) = actor.forward_heads(&next, n)?;
    let mut u = Vec::with_capacity(n);
    let mut lp = Vec::with_capacity(n);
    for &(mu, ls, _) in &heads {
        let eps: f64 = rng.sample(StandardNormal);
        let s = squash(mu, ls, eps);
        u.push(s.u);
        lp.push(s.log_prob);
    }
    let x = critic_input(&next, &u);
    let (o1, _) = critics.target1.forward_batch(&x, n)?;
    let (o2, _) = critics.target2.forward_batch(&x, n)?;
    let q1: Vec<f64> = o1.into_iter().map(to_f64).collect();
    let q2: Vec<f64> = o2.into_iter().map(to_f64).collect();
    Ok(bellman_targets(&batch.rewards, &batch.dones, &q1, &q2, &lp, alpha, gamma))
}

/// Value and parameter gradient of the actor loss
/// `mean(alpha log_pi(u|s) - min(Q1, Q2)(s, u))` for fixed noise `eps`.
#[derive(Debug, Clone)]
pub struct ActorObjective<T> {
    pub loss: f64,
    pub grads: GradientSet<T>,
    pub log_probs: Vec<f64>,
}

pub fn actor_objective<T: Real>(
    actor: &Actor<T>,
    q1: &DenseNet<T>,
    q2: &DenseNet<T>,
    states: &[T],
    eps: &[f64],
    alpha: f64,
) -> Result<ActorObjective<T>> {
    let n = eps.len();
    if n == 0 || states.len() != n * STATE_DIM {
        return Err(Error::Shape(format!("{} state values for {n} noise draws", states.len())));
    }
    let (heads, tape) = actor.forward_heads(states, n)?;
    let samples: Vec<SquashedSample> = heads.iter().zip(eps).map(|(&(mu, ls, _), &e)| squash(mu, ls, e)).collect();
    let u: Vec<f64> = samples.iter().map(|s| s.u).collect();
    let x = critic_input(states, &u);
    let (o1, t1) = q1.forward_batch(&x, n)?;
    let (o2, t2) = q2.forward_batch(&x, n)?;
    let first: Vec<bool> = o1.iter().zip(&o2).map(|(a, b)| a <= b).collect();
    let sel1: Vec<T> = first.iter().map(|&f| if f { T::one() } else { T::zero() }).collect();
    let sel2: Vec<T> = first.iter().map(|&f| if f { T::zero() } else { T::one() }).collect();
    let (_, g1) = q1.backward_batch(&t1, &sel1)?;
    let (_, g2) = q2.backward_batch(&t2, &sel2)?;

    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut upstream = Vec::with_capacity(2 * n);
    for b in 0..n {
        let s = samples[b];
        let (_, ls, free) = heads[b];
        let (q, dq_du) = if first[b] {
            (to_f64(o1[b]), to_f64(g1[b * (STATE_DIM + 1) + STATE_DIM]))
        } else {
            (to_f64(o2[b]), to_f64(g2[b * (STATE_DIM + 1) + STATE_DIM]))
        };
        loss += (alpha * s.log_prob - q) * inv_n;
        let du_dx = s.u * (1.0 - s.u);
        let g = du_dx * (1.0 - 2.0 * s.u) / (du_dx + LOG_GUARD);
        let dx_dls = ls.exp() * eps[b];
        let d_mu = alpha * (-g) - dq_du * du_dx;
        let d_ls = alpha * (-1.0 - g * dx_dls) - dq_du * du_dx * dx_dls;
        upstream.push(T::lit(d_mu * inv_n));
        upstream.push(T::lit(if free { d_ls * inv_n } else { 0.0 }));
    }
    let (grads, _) = actor.net.backward_batch(&tape, &upstream)?;
    Ok(ActorObjective {
        loss,
        grads,
        log_probs: samples.iter().map(|s| s.log_prob).collect(),
    })
}

/// Mean squared error of `net` against `targets` and its gradient.
pub fn critic_objective<T: Real>(net: &DenseNet<T>, inputs: &[T], targets: &[f64]) -> Result<(f64, GradientSet<T>)> {
    let n = targets.len();
    let (out, tape) = net.forward_batch(inputs, n)?;
    let mut loss = 0.0;
    let upstream: Vec<T> = out
        .iter()
        .zip(targets)
        .map(|(&q, &y)| {
            let d = to_f64(q) - y;
            loss += d * d / n as f64;
            T::lit(2.0 * d / n as f64)
        })
        .collect();
    let (grads, _) = net.backward_batch(&tape, &upstream)?;
    Ok((loss, grads))
}

/// Losses and diagnostics of one gradient update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateReport {
    pub critic1: f64,
    pub critic2: f64,
    pub actor: f64,
    pub alpha_loss: f64,
    pub alpha: f64,
    pub mean_entropy: f64,
}

/// Networks, target copies, temperature and optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct SacAgent<T = f32> {
    pub cfg: SacConfig,
    pub actor: Actor<T>,
    pub critics: CriticPair<T>,
    pub temp: EntropyTemp,
    actor_opt: AdamState<T>,
    q1_opt: AdamState<T>,
    q2_opt: AdamState<T>,
    alpha_opt: AdamState<f64>,
    pub updates: u64,
}

impl<T: Real> SacAgent<T> {
    pub fn new<R: Rng + ?Sized>(cfg: SacConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let actor = Actor::new(&cfg, rng)?;
        let critics = CriticPair::new(&cfg, rng)?;
        Ok(Self {
            actor_opt: AdamState::for_net(SacConfig::adam(cfg.actor_lr), &actor.net),
            q1_opt: AdamState::for_net(SacConfig::adam(cfg.critic_lr), &critics.q1),
            q2_opt: AdamState::for_net(SacConfig::adam(cfg.critic_lr), &critics.q2),
            alpha_opt: AdamState::new(SacConfig::adam(cfg.alpha_lr), &[1]),
            temp: EntropyTemp::new(cfg.init_alpha, cfg.target_entropy),
            actor,
            critics,
            cfg,
            updates: 0,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.temp.alpha()
    }

    /// One update: critic targets, both critics, the actor, the temperature,
    /// then the target networks.
    pub fn update<R: Rng + ?Sized>(&mut self, batch: &Batch, rng: &mut R) -> Result<UpdateReport> {
        let n = batch.len();
        if n == 0 {
            return Err(Error::Invalid("empty batch".into()));
        }
        let tag = self.updates + 1;
        let finite = |name: &str, v: f64| -> Result<f64> {
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::NonFinite(format!("{name} loss at update {tag}")))
            }
        };
        let alpha = self.alpha();
        let y = critic_target(batch, &self.critics, &self.actor, alpha, self.cfg.gamma, rng)?;

        let states: Vec<T> = to_real(&batch.states);
        let x = critic_input(&states, &batch.actions);
        let (l1, mut g1) = critic_objective(&self.critics.q1, &x, &y)?;
        let (l2, mut g2) = critic_objective(&self.critics.q2, &x, &y)?;
        finite("critic1", l1)?;
        finite("critic2", l2)?;
        g1.clip_global_norm(self.cfg.grad_clip);
        g2.clip_global_norm(self.cfg.grad_clip);
        self.q1_opt.step_net(&mut self.critics.q1, &g1)?;
        self.q2_opt.step_net(&mut self.critics.q2, &g2)?;

        let eps: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let mut obj = actor_objective(&self.actor, &self.critics.q1, &self.critics.q2, &states, &eps, alpha)?;
        finite("actor", obj.loss)?;
        obj.grads.clip_global_norm(self.cfg.grad_clip);
        self.actor_opt.step_net(&mut self.actor.net, &obj.grads)?;

        let (alpha_loss, g) = self.temp.loss_and_grad(&obj.log_probs);
        finite("alpha", alpha_loss)?;
        let mut ga = GradientSet {
            names: vec!["log_alpha".into()],
            tensors: vec![vec![g]],
        };
        ga.clip_global_norm(self.cfg.grad_clip);
        let mut la = [self.temp.log_alpha];
        self.alpha_opt.apply(vec![&mut la[..]], &ga)?;
        self.temp.log_alpha = la[0];

        let tau = T::lit(self.cfg.tau);
        polyak_update(&mut self.critics.target1, &self.critics.q1, tau)?;
        polyak_update(&mut self.critics.target2, &self.critics.q2, tau)?;
        self.updates += 1;
        Ok(UpdateReport {
            critic1: l1,
            critic2: l2,
            actor: obj.loss,
            alpha_loss,
            alpha: self.alpha(),
            mean_entropy: -obj.log_probs.iter().sum::<f64>() / n as f64,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn tiny_cfg() -> SacConfig {
        SacConfig {
            hidden: vec![16, 16],
            normalized_hidden: 1,
            batch_size: 4,
            replay_capacity: 64,
            ..Default::default()
        }
    }

    fn batch(n: usize, seed: u64) -> Batch {
        let mut rng = substream(seed, "batch");
        let ts: Vec<Transition> = (0..n)
            .map(|i| Transition {
                state: (0..STATE_DIM).map(|_| rng.random_range(-1.0..1.0)).collect(),
                action: rng.random_range(0.05..0.95),
                reward: if i % 3 == 0 { rng.random_range(-1.0..0.0) } else { 0.0 },
                next_state: (0..STATE_DIM).map(|_| rng.random_range(-1.0..1.0)).collect(),
                done: i % 3 == 0,
            })
            .collect();
        Batch::from_transitions(&ts.iter().collect::<Vec<_>>())
    }

    fn normal_cdf(z: f64) -> f64 {
        // Abramowitz-Stegun 7.1.26 is too coarse here; integrate the density.
        let (a, b) = (-10.0f64, z);
        let steps = 20_000;
        let h = (b - a) / steps as f64;
        let f = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut s = f(a) + f(b);
        for k in 1..steps {
            s += f(a + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }

    #[test]
    fn log_prob_matches_cdf_derivative() {
        for &(mu, ls) in &[(0.0, 0.0), (0.7, -0.5), (-1.2, 0.4)] {
            let sigma: f64 = f64::exp(ls);
            let cdf = |u: f64| normal_cdf(((u / (1.0 - u)).ln() - mu) / sigma);
            for k in 1..20 {
                let u = k as f64 / 20.0;
                let x = (u / (1.0 - u)).ln();
                let eps = (x - mu) / sigma;
                let lp = squash(mu, ls, eps).log_prob;
                let h = 1e-4;
                let dens = (cdf(u + h) - cdf(u - h)) / (2.0 * h);
                assert!((lp - dens.ln()).abs() < 1e-3, "mu={mu} ls={ls} u={u}: {lp} vs {}", dens.ln());
            }
        }
    }

    #[test]
    fn deterministic_zero_mean_gives_half() {
        let mut rng = substream(1, "t");
        let mut actor: Actor<f64> = Actor::new(&tiny_cfg(), &mut rng).unwrap();
        for l in actor.net.layers_mut().last_mut().into_iter() {
            l.weight.iter_mut().for_each(|w| *w = 0.0);
            l.bias.iter_mut().for_each(|b| *b = 0.0);
        }
        let (u, lp) = actor.sample_action(&[0.3; STATE_DIM], true, &mut rng).unwrap();
        assert_eq!(u, 0.5);
        assert!(lp.is_none());
    }

    #[test]
    fn small_sigma_approaches_greedy() {
        let s = squash(0.4, -5.0, 1.5);
        assert!((s.u - sigmoid(0.4)).abs() < 0.01 * 1.5);
        let s = squash(0.4, -20.0, 1.5);
        assert!((s.u - sigmoid(0.4)).abs() < 1e-8);
    }

    #[test]
    fn log_std_is_clamped() {
        let mut rng = substream(2, "t");
        let mut actor: Actor<f64> = Actor::new(&tiny_cfg(), &mut rng).unwrap();
        let last = actor.net.layers_mut().last_mut().unwrap();
        last.bias[1] = 40.0;
        assert_eq!(actor.head(&[0.0; STATE_DIM]).unwrap().1, 2.0);
        let last = actor.net.layers_mut().last_mut().unwrap();
        last.bias[1] = -40.0;
        assert_eq!(actor.head(&[0.0; STATE_DIM]).unwrap().1, -5.0);
        assert!(actor.head(&[0.0; 3]).is_err());
    }

    #[test]
    fn bellman_target_cases() {
        let y = bellman_targets(&[-1.5, 0.0], &[true, false], &[3.0, 2.0], &[4.0, 1.0], &[0.5, -0.25], 0.2, 0.99);
        assert_eq!(y[0], -1.5);
        let hand = 0.0 + 0.99 * (1.0 - 0.2 * -0.25);
        assert!((y[1] - hand).abs() < 1e-12);
        let y = bellman_targets(&[0.7], &[false], &[3.0], &[4.0], &[0.5], 0.2, 0.0);
        assert_eq!(y[0], 0.7);
    }

    #[test]
    fn critic_target_respects_done_and_gamma() {
        let mut rng = substream(3, "t");
        let agent: SacAgent<f64> = SacAgent::new(tiny_cfg(), &mut rng).unwrap();
        let b = batch(6, 4);
        let y = critic_target(&b, &agent.critics, &agent.actor, 0.2, 0.99, &mut rng).unwrap();
        for i in 0..6 {
            if b.dones[i] {
                assert_eq!(y[i], b.rewards[i]);
            }
        }
        let y = critic_target(&b, &agent.critics, &agent.actor, 0.2, 0.0, &mut rng).unwrap();
        assert_eq!(y, b.rewards);
    }

    #[test]
    fn alpha_gradient_sign() {
        let t = EntropyTemp::new(0.2, -1.0);
        // mean log pi = 2 > 1 = -target: descent must raise log_alpha.
        let (_, g) = t.loss_and_grad(&[1.5, 2.5]);
        assert!(g < 0.0);
        let (_, g) = t.loss_and_grad(&[-0.5, 0.0]);
        assert!(g > 0.0);
    }

    #[test]
    fn updates_are_deterministic() {
        let run = || {
            let mut rng = substream(5, "agent");
            let mut agent: SacAgent<f32> = SacAgent::new(tiny_cfg(), &mut rng).unwrap();
            let b = batch(8, 6);
            let mut urng = substream(5, "update");
            let r1 = agent.update(&b, &mut urng).unwrap();
            let r2 = agent.update(&b, &mut urng).unwrap();
            (agent, r1, r2)
        };
        let (a, r1, r2) = run();
        let (b, s1, s2) = run();
        assert_eq!(a, b);
        assert_eq!((r1, r2), (s1, s2));
        assert_eq!(a.updates, 2);
        assert_ne!(a.critics.q1, a.critics.target1);
    }

    #[test]
    fn update_step_is_bounded() {
        let cfg = tiny_cfg();
        let lr = cfg.actor_lr;
        let mut rng = substream(7, "agent");
        let mut agent: SacAgent<f32> = SacAgent::new(cfg, &mut rng).unwrap();
        let b = batch(8, 8);
        let mut urng = substream(7, "update");
        for t in 1..=20 {
            let before = agent.clone();
            agent.update(&b, &mut urng).unwrap();
            // Worst case of |m_hat| / sqrt(v_hat) under the Adam recursions.
            let (b1, b2) = (0.9f64, 0.999f64);
            let geo: f64 = (0..t).map(|k| (b1 * b1 / b2).powi(k)).sum();
            let bound = (1.0 - b1) / (1.0 - b1.powi(t)) * ((1.0 - b2.powi(t)) / (1.0 - b2)).sqrt() * geo.sqrt();
            for (old, new) in [(&before.actor.net, &agent.actor.net), (&before.critics.q1, &agent.critics.q1)] {
                for ((_, p), (_, q)) in old.params().iter().zip(new.params().iter()) {
                    for (x, y) in p.iter().zip(q.iter()) {
                        assert!(f64::from((x - y).abs()) <= lr * bound * 1.001 + 1e-7);
                    }
                }
            }
        }
        assert!(agent.alpha() > 0.0);
    }

    #[test]
    fn actor_gradient_matches_finite_differences() {
        let mut rng = substream(9, "agent");
        let agent: SacAgent<f64> = SacAgent::new(tiny_cfg(), &mut rng).unwrap();
        let b = batch(5, 10);
        let states: Vec<f64> = b.states.clone();
        let eps: Vec<f64> = (0..5).map(|_| rng.sample(StandardNormal)).collect();
        let obj = actor_objective(&agent.actor, &agent.critics.q1, &agent.critics.q2, &states, &eps, 0.3).unwrap();
        let loss = |a: &Actor<f64>| {
            actor_objective(a, &agent.critics.q1, &agent.critics.q2, &states, &eps, 0.3)
                .unwrap()
                .loss
        };
        let mut probe = agent.actor.clone();
        let h = 1e-6;
        for (t, tensor) in obj.grads.tensors.iter().enumerate() {
            for i in (0..tensor.len()).step_by(7) {
                let orig = probe.net.params_mut()[t][i];
                probe.net.params_mut()[t][i] = orig + h;
                let lp = loss(&probe);
                probe.net.params_mut()[t][i] = orig - h;
                let lm = loss(&probe);
                probe.net.params_mut()[t][i] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let an = tensor[i];
                assert!((fd - an).abs() <= 1e-5 * (1.0 + fd.abs().max(an.abs())), "{} [{i}]: {an} vs {fd}", obj.grads.names[t]);
            }
        }
    }
}
