//! Prioritized replay of n-step windows.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReplayConfig {
    pub capacity: usize,
    pub n_step: usize,
    pub batch_size: usize,
    pub min_history: usize,
    /// Sampling probability is proportional to `priority ^ exponent`.
    pub priority_exponent: f64,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        ReplayConfig {
            capacity: 100_000,
            n_step: 4,
            batch_size: 32,
            min_history: 20_000,
            priority_exponent: 1.0,
        }
    }
}

impl ReplayConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_step == 0 || self.batch_size == 0 {
            return Err(Error::Config("n_step and batch_size must be >= 1".into()));
        }
        if self.capacity <= self.n_step {
            return Err(Error::Config(format!(
                "replay capacity {} must exceed n_step {}",
                self.capacity, self.n_step
            )));
        }
        if !(self.priority_exponent >= 0.0) {
            return Err(Error::Config("priority_exponent must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Stored {
    phi: Vec<f64>,
    cumulant: f64,
    next_phi: Vec<f64>,
    terminal: bool,
}

/// An n-step window starting at one stored transition.
#[derive(Clone, Debug, PartialEq)]
pub struct NStepSample {
    pub slot: usize,
    pub phi: Vec<f64>,
    /// `C_{t+1}, ..., C_{t+m}` with `m <= n`.
    pub cumulants: Vec<f64>,
    /// Features of `S_{t+m}`, absent when the window ends in a terminal.
    pub bootstrap: Option<Vec<f64>>,
}

/// Binary tree of priority sums over a power-of-two number of leaves.
#[derive(Clone, Debug)]
struct SumTree {
    leaves: usize,
    nodes: Vec<f64>,
}

impl SumTree {
    fn new(capacity: usize) -> Self {
        let leaves = capacity.next_power_of_two();
        SumTree {
            leaves,
            nodes: vec![0.0; 2 * leaves],
        }
    }

    fn total(&self) -> f64 {
        self.nodes[1]
    }

    fn set(&mut self, i: usize, value: f64) {
        let mut n = i + self.leaves;
        self.nodes[n] = value;
        while n > 1 {
            n /= 2;
            self.nodes[n] = self.nodes[2 * n] + self.nodes[2 * n + 1];
        }
    }

    /// Leaf whose cumulative range contains `u`, skipping zero leaves.
    fn find(&self, mut u: f64) -> usize {
        let mut n = 1;
        while n < self.leaves {
            let left = self.nodes[2 * n];
            if u < left || self.nodes[2 * n + 1] <= 0.0 {
                n *= 2;
            } else {
                u -= left;
                n = 2 * n + 1;
            }
        }
        n - self.leaves
    }
}

/// Ring buffer of transitions sampled as n-step windows.
///
/// A window becomes sampleable once it holds `n_step` transitions or ends in
/// a terminal; windows never extend past a terminal. New windows enter at the
/// highest priority seen so far.
#[derive(Clone, Debug)]
pub struct PrioritizedReplay {
    cfg: ReplayConfig,
    slots: Vec<Option<Stored>>,
    head: usize,
    len: usize,
    tree: SumTree,
    priorities: Vec<f64>,
    pending: std::collections::VecDeque<usize>,
    max_priority: f64,
}

impl PrioritizedReplay {
    pub fn new(cfg: ReplayConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(PrioritizedReplay {
            slots: vec![None; cfg.capacity],
            tree: SumTree::new(cfg.capacity),
            priorities: vec![0.0; cfg.capacity],
            pending: Default::default(),
            head: 0,
            len: 0,
            max_priority: 1.0,
            cfg,
        })
    }

    pub fn config(&self) -> &ReplayConfig {
        &self.cfg
    }

    /// Stored transitions.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn ready(&self) -> bool {
        self.len >= self.cfg.min_history && self.tree.total() > 0.0
    }

    pub fn priority(&self, slot: usize) -> f64 {
        self.priorities[slot]
    }

    pub fn max_priority(&self) -> f64 {
        self.max_priority
    }

    pub fn push(&mut self, phi: Vec<f64>, cumulant: f64, next_phi: Vec<f64>, terminal: bool) {
        let slot = self.head;
        let cap = self.cfg.capacity;
        if self.slots[slot].is_some() {
            // the oldest window disappears with its first transition
            self.set_priority_raw(slot, 0.0);
            self.pending.retain(|&p| p != slot);
        }
        self.slots[slot] = Some(Stored {
            phi,
            cumulant,
            next_phi,
            terminal,
        });
        self.head = (slot + 1) % cap;
        self.len = (self.len + 1).min(cap);
        self.pending.push_back(slot);

        while let Some(&start) = self.pending.front() {
            let span = (slot + cap - start) % cap + 1;
            if terminal || span >= self.cfg.n_step {
                self.pending.pop_front();
                let p = self.max_priority;
                self.set_priority_raw(start, p);
            } else {
                break;
            }
        }
    }

    fn set_priority_raw(&mut self, slot: usize, p: f64) {
        self.priorities[slot] = p;
        let weight = if p == 0.0 {
            0.0
        } else {
            p.powf(self.cfg.priority_exponent)
        };
        self.tree.set(slot, weight);
    }

    pub fn update_priority(&mut self, slot: usize, priority: f64) {
        if self.slots[slot].is_none() || self.pending.contains(&slot) {
            return;
        }
        self.set_priority_raw(slot, priority);
        if priority > self.max_priority {
            self.max_priority = priority;
        }
    }

    /// The n-step window starting at `slot`.
    pub fn window(&self, slot: usize) -> Result<NStepSample> {
        let cap = self.cfg.capacity;
        let first = self.slots[slot]
            .as_ref()
            .ok_or_else(|| Error::Range(format!("replay slot {slot} is empty")))?;
        let mut cumulants = Vec::with_capacity(self.cfg.n_step);
        let mut i = slot;
        loop {
            let t = self.slots[i]
                .as_ref()
                .ok_or_else(|| Error::Range(format!("window at {slot} is incomplete")))?;
            cumulants.push(t.cumulant);
            if t.terminal {
                return Ok(NStepSample {
                    slot,
                    phi: first.phi.clone(),
                    cumulants,
                    bootstrap: None,
                });
            }
            if cumulants.len() == self.cfg.n_step {
                return Ok(NStepSample {
                    slot,
                    phi: first.phi.clone(),
                    cumulants,
                    bootstrap: Some(t.next_phi.clone()),
                });
            }
            i = (i + 1) % cap;
            if i == self.head {
                return Err(Error::Range(format!("window at {slot} is incomplete")));
            }
        }
    }

    /// Draws `batch_size` windows with probability proportional to priority.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<NStepSample>> {
        if !self.ready() {
            return Err(Error::Range(format!(
                "replay holds {} of {} required transitions",
                self.len, self.cfg.min_history
            )));
        }
        let total = self.tree.total();
        (0..self.cfg.batch_size)
            .map(|_| {
                let u = rng.gen::<f64>() * total;
                self.window(self.tree.find(u))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(capacity: usize, n_step: usize) -> ReplayConfig {
        ReplayConfig {
            capacity,
            n_step,
            batch_size: 8,
            min_history: 1,
            priority_exponent: 1.0,
        }
    }

    fn push(r: &mut PrioritizedReplay, i: usize, terminal: bool) {
        r.push(vec![i as f64], i as f64, vec![i as f64 + 1.0], terminal);
    }

    #[test]
    fn windows_complete_after_n_or_terminal() {
        let mut r = PrioritizedReplay::new(cfg(16, 3)).unwrap();
        push(&mut r, 0, false);
        push(&mut r, 1, false);
        assert_eq!(r.tree.total(), 0.0);
        push(&mut r, 2, false);
        assert_eq!(r.priority(0), 1.0);
        let w = r.window(0).unwrap();
        assert_eq!(w.cumulants, vec![0.0, 1.0, 2.0]);
        assert_eq!(w.bootstrap, Some(vec![3.0]));
        push(&mut r, 3, true);
        // 1, 2 and 3 all complete at the terminal
        for s in 1..4 {
            assert_eq!(r.priority(s), 1.0);
        }
        let w = r.window(2).unwrap();
        assert_eq!(w.cumulants, vec![2.0, 3.0]);
        assert_eq!(w.bootstrap, None);
        push(&mut r, 4, false);
        assert_eq!(r.priority(4), 0.0);
    }

    #[test]
    fn sampling_never_crosses_terminal() {
        let mut r = PrioritizedReplay::new(cfg(64, 4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut terminal_at = vec![];
        for i in 0..200 {
            let term = rng.gen_bool(0.2);
            if term {
                terminal_at.push(i);
            }
            push(&mut r, i, term);
        }
        for _ in 0..200 {
            for w in r.sample(&mut rng).unwrap() {
                let start = w.phi[0] as usize;
                let end = start + w.cumulants.len() - 1;
                // a terminal may only be the last transition in the window
                assert!(!terminal_at.iter().any(|&t| t >= start && t < end));
                assert_eq!(w.bootstrap.is_none(), terminal_at.contains(&end));
                assert!(w.cumulants.len() == 4 || w.bootstrap.is_none());
            }
        }
    }

    #[test]
    fn new_windows_get_max_priority() {
        let mut r = PrioritizedReplay::new(cfg(16, 1)).unwrap();
        push(&mut r, 0, false);
        r.update_priority(0, 5.0);
        push(&mut r, 1, false);
        assert_eq!(r.priority(1), 5.0);
        assert_eq!(r.max_priority(), 5.0);
    }

    #[test]
    fn proportional_sampling() {
        let mut r = PrioritizedReplay::new(ReplayConfig { batch_size: 1, ..cfg(4, 1) }).unwrap();
        for i in 0..4 {
            push(&mut r, i, false);
        }
        for (s, p) in [1.0, 2.0, 3.0, 4.0].into_iter().enumerate() {
            r.update_priority(s, p);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut counts = [0usize; 4];
        let n = 100_000;
        for _ in 0..n {
            counts[r.sample(&mut rng).unwrap()[0].slot] += 1;
        }
        for (s, c) in counts.iter().enumerate() {
            let expect = (s + 1) as f64 / 10.0;
            assert!((*c as f64 / n as f64 - expect).abs() < 0.01, "{counts:?}");
        }
    }

    #[test]
    fn zero_priority_never_sampled() {
        let mut r = PrioritizedReplay::new(ReplayConfig { batch_size: 1, ..cfg(4, 1) }).unwrap();
        for i in 0..4 {
            push(&mut r, i, false);
        }
        r.update_priority(0, 0.0);
        r.update_priority(3, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            let s = r.sample(&mut rng).unwrap()[0].slot;
            assert!(s == 1 || s == 2);
        }
    }

    #[test]
    fn min_history_gate() {
        let mut r = PrioritizedReplay::new(ReplayConfig { min_history: 5, ..cfg(16, 1) }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for i in 0..4 {
            push(&mut r, i, false);
            assert!(r.sample(&mut rng).is_err());
        }
        push(&mut r, 4, false);
        assert!(r.sample(&mut rng).is_ok());
    }

    #[test]
    fn ring_overwrite() {
        let mut r = PrioritizedReplay::new(cfg(5, 2)).unwrap();
        for i in 0..12 {
            push(&mut r, i, false);
        }
        assert_eq!(r.len(), 5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            for w in r.sample(&mut rng).unwrap() {
                let start = w.phi[0] as usize;
                assert!((7..=10).contains(&start), "{start}");
                assert_eq!(w.cumulants, vec![start as f64, start as f64 + 1.0]);
            }
        }
    }

    #[test]
    fn bad_config() {
        assert!(PrioritizedReplay::new(cfg(4, 4)).is_err());
        assert!(PrioritizedReplay::new(cfg(4, 0)).is_err());
    }
}
