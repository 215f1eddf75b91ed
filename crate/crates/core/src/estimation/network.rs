//! Simulated inter-agent radio: topology, random drops and fixed delay.

use std::collections::VecDeque;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SharePacket;
use crate::error::{Error, Result};

/// Who hears whom. Lists are "receives from".
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Topology {
    /// Both ring neighbors.
    Ring,
    /// Only the predecessor on the ring.
    DirectedRing,
    /// One ring neighbor per step, alternating successor and predecessor.
    Rotating,
    Complete,
    Custom { receives_from: Vec<Vec<usize>> },
}

impl Topology {
    /// Senders agent `i` hears at `step`, in ascending order.
    pub fn sources(&self, i: usize, n: usize, step: u64) -> Vec<usize> {
        let next = (i + 1) % n;
        let prev = (i + n - 1) % n;
        let mut v = match self {
            _ if n < 2 => vec![],
            Topology::Ring => vec![prev, next],
            Topology::DirectedRing => vec![prev],
            Topology::Rotating => vec![if step.is_multiple_of(2) { next } else { prev }],
            Topology::Complete => (0..n).filter(|&j| j != i).collect(),
            Topology::Custom { receives_from } => receives_from[i].clone(),
        };
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if let Topology::Custom { receives_from } = self {
            if receives_from.len() != n {
                return Err(Error::InvalidConfig(format!(
                    "custom topology lists {} agents, scenario has {n}",
                    receives_from.len()
                )));
            }
            for (i, list) in receives_from.iter().enumerate() {
                if let Some(&bad) = list.iter().find(|&&j| j >= n || j == i) {
                    return Err(Error::InvalidConfig(format!(
                        "agent {i} cannot receive from agent {bad}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Whether information from every agent eventually reaches every other,
    /// taking the union of the per-step graphs over two steps.
    pub fn is_connected(&self, n: usize) -> bool {
        (0..n).all(|root| {
            let mut seen = vec![false; n];
            seen[root] = true;
            let mut stack = vec![root];
            while let Some(j) = stack.pop() {
                for i in 0..n {
                    let hears = (0..2).any(|s| self.sources(i, n, s).contains(&j));
                    if hears && !seen[i] {
                        seen[i] = true;
                        stack.push(i);
                    }
                }
            }
            seen.iter().all(|&s| s)
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub topology: Topology,
    pub drop_prob: f64,
    /// Delivery delay in estimator steps.
    pub delay_steps: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            topology: Topology::Ring,
            drop_prob: 0.0,
            delay_steps: 0,
        }
    }
}

/// Stateful link layer. Delayed packets wait in a FIFO of per-step inboxes.
#[derive(Debug, Clone)]
pub struct Network {
    cfg: NetworkConfig,
    n: usize,
    rng: ChaCha8Rng,
    pending: VecDeque<Vec<Vec<SharePacket>>>,
}

impl Network {
    pub fn new(cfg: NetworkConfig, n: usize, rng: ChaCha8Rng) -> Result<Self> {
        if !(0.0..=1.0).contains(&cfg.drop_prob) {
            return Err(Error::InvalidConfig(format!(
                "drop_prob must lie in [0, 1], got {}",
                cfg.drop_prob
            )));
        }
        cfg.topology.validate(n)?;
        if n > 1 && !cfg.topology.is_connected(n) {
            log::warn!("communication topology is not connected");
        }
        Ok(Self {
            cfg,
            n,
            rng,
            pending: VecDeque::new(),
        })
    }

    /// Hands this step's outbox to the radio and returns what each agent
    /// receives now. Every (receiver, sender) link draws one uniform number
    /// per step, so the drop pattern depends only on the seed.
    pub fn exchange(&mut self, outbox: &[SharePacket], step: u64) -> Result<Vec<Vec<SharePacket>>> {
        let mut by_sender: Vec<Option<&SharePacket>> = vec![None; self.n];
        for p in outbox {
            let slot = by_sender.get_mut(p.sender).ok_or_else(|| {
                Error::InvalidConfig(format!("packet from unknown agent {}", p.sender))
            })?;
            *slot = Some(p);
        }
        let mut inboxes = vec![Vec::new(); self.n];
        for (i, inbox) in inboxes.iter_mut().enumerate() {
            for j in self.cfg.topology.sources(i, self.n, step) {
                let u: f64 = self.rng.random();
                if let Some(p) = by_sender[j] {
                    if u >= self.cfg.drop_prob {
                        inbox.push(*p);
                    }
                }
            }
        }
        self.pending.push_back(inboxes);
        if self.pending.len() > self.cfg.delay_steps {
            Ok(self.pending.pop_front().expect("non-empty"))
        } else {
            Ok(vec![Vec::new(); self.n])
        }
    }
}
