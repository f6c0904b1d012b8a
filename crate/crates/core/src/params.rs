//! Named parameter table. Every module registers its tensors under a
//! hierarchical name; the table drives checkpointing, the optimizer and the
//! parameter census. Registration order is construction order, so it is
//! stable for a given config.

use crate::rng::{seeded, Rng};
use crate::tensor::Tensor;

/// Parameter initializer. The zeros mode skips RNG draws entirely, which
/// keeps census-only model builds cheap even at the 200M-parameter sizes.
pub struct Init {
    rng: Rng,
    zeros: bool,
}

impl Init {
    pub fn seeded(seed: u64) -> Init {
        Init {
            rng: seeded(seed, 0x1217),
            zeros: false,
        }
    }

    pub fn zeros() -> Init {
        Init {
            rng: seeded(0, 0),
            zeros: true,
        }
    }

    pub fn param(&mut self, shape: &[usize], std: f64) -> Tensor {
        if self.zeros {
            Tensor::zeros_param(shape)
        } else {
            Tensor::randn_param(shape, std, &mut self.rng)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Persistent state that is not optimized (running stats, CMVN).
    Buffer,
}

#[derive(Default)]
pub struct ParamTable {
    pub entries: Vec<(String, Tensor, ParamKind)>,
}

impl ParamTable {
    pub fn new() -> ParamTable {
        ParamTable::default()
    }

    pub fn push(&mut self, name: String, tensor: Tensor, kind: ParamKind) {
        debug_assert!(
            !self.entries.iter().any(|(n, _, _)| n == &name),
            "duplicate parameter name {name}"
        );
        self.entries.push((name, tensor, kind));
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries
            .iter()
            .filter(|(_, _, k)| *k == ParamKind::Trainable)
            .map(|(n, t, _)| (n.as_str(), t))
    }

    pub fn total_trainable(&self) -> usize {
        self.trainable().map(|(_, t)| t.numel()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, t, _)| t)
    }

    pub fn zero_grads(&self) {
        for (_, t) in self.trainable() {
            t.zero_grad();
        }
    }
}
