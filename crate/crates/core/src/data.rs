//! Agent replay storage and expert observation sets.

use alloc::collections::VecDeque;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::error::{check_dim, Error, Result};
use crate::nn::Matrix;
use crate::rng::Rng;

/// One agent step.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    /// Ground-truth reward; kept only when training on the true reward.
    pub r_env: Option<f64>,
    pub s_next: Vec<f64>,
    /// Terminal state reached; the value target does not bootstrap past it.
    pub done: bool,
}

/// A state transition `(s, s′)`, the only expert signal.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationPair {
    pub s: Vec<f64>,
    pub s_next: Vec<f64>,
}

impl ObservationPair {
    pub fn new(s: Vec<f64>, s_next: Vec<f64>) -> Self {
        Self { s, s_next }
    }
}

impl From<&Transition> for ObservationPair {
    fn from(t: &Transition) -> Self {
        Self::new(t.s.clone(), t.s_next.clone())
    }
}

/// Row-stacks `[s | s′]` for a batch of pairs.
pub fn pair_matrix<'a>(pairs: impl IntoIterator<Item = (&'a [f64], &'a [f64])>, state_dim: usize) -> Matrix {
    let mut data = Vec::new();
    let mut rows = 0;
    for (s, s_next) in pairs {
        data.extend_from_slice(s);
        data.extend_from_slice(s_next);
        rows += 1;
    }
    Matrix::from_vec(rows, 2 * state_dim, data)
}

/// FIFO ring of transitions.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    state_dim: usize,
    action_dim: usize,
    storage: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, state_dim: usize, action_dim: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            state_dim,
            action_dim,
            storage: VecDeque::with_capacity(capacity.min(1 << 16)),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    /// Appends, evicting the oldest entry once full.
    pub fn push(&mut self, t: Transition) -> Result<()> {
        check_dim("transition state", self.state_dim, t.s.len())?;
        check_dim("transition next state", self.state_dim, t.s_next.len())?;
        check_dim("transition action", self.action_dim, t.a.len())?;
        if self.storage.len() == self.capacity {
            self.storage.pop_front();
        }
        self.storage.push_back(t);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.storage.iter()
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.storage.get(i)
    }

    /// `n` uniform draws with replacement.
    pub fn sample_batch(&self, rng: &mut Rng, n: usize) -> Result<Vec<&Transition>> {
        self.sample_recent(rng, n, 0)
    }

    /// Uniform draws from the `window` most recent transitions; a window of
    /// zero, or one at least as long as the buffer, covers everything.
    pub fn sample_recent(&self, rng: &mut Rng, n: usize, window: usize) -> Result<Vec<&Transition>> {
        if self.storage.is_empty() {
            return Err(Error::Empty { what: "replay buffer" });
        }
        let len = self.storage.len();
        let start = if window == 0 { 0 } else { len.saturating_sub(window) };
        Ok((0..n).map(|_| &self.storage[rng.random_range(start..len)]).collect())
    }
}

/// Expert state transitions with their provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertObservationSet {
    pub env_id: String,
    pub state_dim: usize,
    pub collection_seed: u64,
    pub noise_std: f64,
    pub mean_return: f64,
    pub pairs: Vec<ObservationPair>,
}

impl ExpertObservationSet {
    pub fn validate(&self) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::Empty { what: "expert observation set" });
        }
        for p in &self.pairs {
            check_dim("expert pair state", self.state_dim, p.s.len())?;
            check_dim("expert pair next state", self.state_dim, p.s_next.len())?;
        }
        Ok(())
    }

    /// `n` uniform draws with replacement.
    pub fn sample_batch(&self, rng: &mut Rng, n: usize) -> Result<Vec<&ObservationPair>> {
        if self.pairs.is_empty() {
            return Err(Error::Empty { what: "expert observation set" });
        }
        let len = self.pairs.len();
        Ok((0..n).map(|_| &self.pairs[rng.random_range(0..len)]).collect())
    }
}
