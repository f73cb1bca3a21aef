//! Counter-based random streams keyed by `(seed, agent, iteration)`.
//!
//! Each stream is a ChaCha12 keystream: the seed picks the key, the agent
//! picks the 64-bit nonce and the iteration picks a disjoint window of the
//! block counter. Draws therefore do not depend on the order in which agents
//! are processed.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// Words reserved per iteration window (2^36 32-bit words).
const WINDOW_BITS: u32 = 36;

/// Identifies one stream under a seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamId {
    pub agent: u64,
    pub iteration: u64,
}

impl StreamId {
    pub fn new(agent: usize, iteration: usize) -> Self {
        Self {
            agent: agent as u64,
            iteration: iteration as u64,
        }
    }
}

/// Streams that do not belong to an agent (data shuffling, audits, ...)
/// live at the top of the agent range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Partition,
    Synthetic,
    Audit,
    Corpus,
}

impl Purpose {
    fn agent_slot(self) -> u64 {
        u64::MAX
            - match self {
                Purpose::Partition => 0,
                Purpose::Synthetic => 1,
                Purpose::Audit => 2,
                Purpose::Corpus => 3,
            }
    }
}

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    id: StreamId,
    inner: ChaCha12Rng,
}

impl RngStream {
    pub fn new(seed: u64, id: StreamId) -> Self {
        assert!(
            id.iteration < 1 << (68 - WINDOW_BITS),
            "iteration index exceeds the stream counter space"
        );
        let mut inner = ChaCha12Rng::seed_from_u64(seed);
        inner.set_stream(id.agent);
        inner.set_word_pos(u128::from(id.iteration) << WINDOW_BITS);
        Self { seed, id, inner }
    }

    pub fn for_agent(seed: u64, agent: usize, iteration: usize) -> Self {
        Self::new(seed, StreamId::new(agent, iteration))
    }

    pub fn auxiliary(seed: u64, purpose: Purpose, index: u64) -> Self {
        Self::new(
            seed,
            StreamId {
                agent: purpose.agent_slot(),
                iteration: index,
            },
        )
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn id(&self) -> StreamId {
        self.id
    }

    /// Uniform draw on the open interval (0, 1).
    pub fn open_unit(&mut self) -> f64 {
        ((self.inner.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
