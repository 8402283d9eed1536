use rand::Rng;
use serde::{Deserialize, Serialize};

use super::STATE_DIM;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    /// Squashed action in (0, 1).
    pub action: f64,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

/// Column-major view of sampled transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub next_states: Vec<f64>,
    pub dones: Vec<bool>,
}

impl Batch {
    pub fn from_transitions(ts: &[&Transition]) -> Self {
        let mut b = Batch {
            states: Vec::with_capacity(ts.len() * STATE_DIM),
            actions: Vec::with_capacity(ts.len()),
            rewards: Vec::with_capacity(ts.len()),
            next_states: Vec::with_capacity(ts.len() * STATE_DIM),
            dones: Vec::with_capacity(ts.len()),
        };
        for t in ts {
            b.states.extend(&t.state);
            b.actions.push(t.action);
            b.rewards.push(t.reward);
            b.next_states.extend(&t.next_state);
            b.dones.push(t.done);
        }
        b
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Fixed-capacity ring buffer; the oldest transition is overwritten first.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 16)),
            next: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// Stores `t`. Rewards only arrive at the end of an episode, so a
    /// non-terminal transition must carry zero reward.
    pub fn push(&mut self, t: Transition) -> Result<()> {
        if t.state.len() != STATE_DIM || t.next_state.len() != STATE_DIM {
            return Err(Error::Shape(format!("transition states must have {STATE_DIM} dims")));
        }
        if !t.done && t.reward != 0.0 {
            return Err(Error::Invalid("non-terminal transition with nonzero reward".into()));
        }
        if !(t.reward.is_finite() && t.action.is_finite()) {
            return Err(Error::NonFinite("transition".into()));
        }
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
        Ok(())
    }

    /// `n` transitions drawn uniformly with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Batch> {
        if self.items.len() < n {
            return Err(Error::Invalid(format!(
                "replay buffer holds {} transitions, batch needs {n}",
                self.items.len()
            )));
        }
        let picks: Vec<&Transition> = (0..n).map(|_| &self.items[rng.random_range(0..self.items.len())]).collect();
        Ok(Batch::from_transitions(&picks))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn t(i: usize, done: bool) -> Transition {
        Transition {
            state: vec![i as f64; STATE_DIM],
            action: 0.5,
            reward: if done { -1.0 } else { 0.0 },
            next_state: vec![0.0; STATE_DIM],
            done,
        }
    }

    #[test]
    fn ring_overwrites_oldest() {
        let mut rb = ReplayBuffer::new(3).unwrap();
        for i in 0..5 {
            rb.push(t(i, false)).unwrap();
            assert!(rb.len() <= 3);
        }
        let firsts: Vec<f64> = rb.iter().map(|x| x.state[0]).collect();
        assert_eq!(firsts, vec![3.0, 4.0, 2.0]);
    }

    #[test]
    fn rejects_rewarded_non_terminal() {
        let mut rb = ReplayBuffer::new(3).unwrap();
        let mut bad = t(0, false);
        bad.reward = 1.0;
        assert!(rb.push(bad).is_err());
        assert!(rb.push(t(0, true)).is_ok());
    }

    #[test]
    fn sampling_needs_enough_items() {
        let mut rb = ReplayBuffer::new(10).unwrap();
        let mut rng = substream(1, "replay");
        rb.push(t(0, false)).unwrap();
        assert!(rb.sample(2, &mut rng).is_err());
        rb.push(t(1, true)).unwrap();
        let b = rb.sample(2, &mut rng).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(b.states.len(), 2 * STATE_DIM);
    }
}
