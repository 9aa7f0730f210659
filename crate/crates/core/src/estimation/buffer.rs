use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dynamics::{Action, ReducedState};
use crate::geometry::RingIndex;

/// One observed real-system step `(x_k, u_k, x_{k+1})`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub episode: usize,
    pub tick: usize,
    pub x: ReducedState,
    pub u: Action,
    pub next: ReducedState,
}

/// Ordered multiset of transitions collected from the real system.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TransitionBuffer {
    transitions: Vec<Transition>,
}

impl TransitionBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, t: Transition) {
        self.transitions.push(t);
    }

    pub fn extend(&mut self, other: &TransitionBuffer) {
        self.transitions.extend_from_slice(&other.transitions);
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Transition> {
        self.transitions.iter()
    }

    pub fn as_slice(&self) -> &[Transition] {
        &self.transitions
    }

    /// Transitions grouped by the ring they start in.
    pub fn by_ring(&self) -> BTreeMap<RingIndex, Vec<Transition>> {
        let mut out: BTreeMap<RingIndex, Vec<Transition>> = BTreeMap::new();
        for t in &self.transitions {
            out.entry(t.x.ring).or_default().push(*t);
        }
        out
    }

    pub fn count_by_ring(&self) -> BTreeMap<RingIndex, usize> {
        self.by_ring()
            .into_iter()
            .map(|(k, v)| (k, v.len()))
            .collect()
    }

    /// Keeps at most `per_ring` transitions from each ring, in order.
    pub fn take_per_ring(&self, per_ring: usize) -> TransitionBuffer {
        let mut counts: BTreeMap<RingIndex, usize> = BTreeMap::new();
        let transitions = self
            .transitions
            .iter()
            .filter(|t| {
                let c = counts.entry(t.x.ring).or_default();
                *c += 1;
                *c <= per_ring
            })
            .copied()
            .collect();
        TransitionBuffer { transitions }
    }

    /// Deterministic split: every `k`-th transition goes to the second buffer.
    pub fn split_every(&self, k: usize) -> (TransitionBuffer, TransitionBuffer) {
        let (mut a, mut b) = (TransitionBuffer::new(), TransitionBuffer::new());
        for (i, t) in self.transitions.iter().enumerate() {
            if k > 0 && i % k == k - 1 {
                b.push(*t);
            } else {
                a.push(*t);
            }
        }
        (a, b)
    }
}

impl FromIterator<Transition> for TransitionBuffer {
    fn from_iter<I: IntoIterator<Item = Transition>>(iter: I) -> Self {
        TransitionBuffer {
            transitions: iter.into_iter().collect(),
        }
    }
}

impl<'a> IntoIterator for &'a TransitionBuffer {
    type Item = &'a Transition;
    type IntoIter = std::slice::Iter<'a, Transition>;

    fn into_iter(self) -> Self::IntoIter {
        self.transitions.iter()
    }
}
