//! Counter-based random streams.
//!
//! Every draw in a run comes from a stream keyed by the tuple
//! `(master seed, replication, level, counter)`. The tuple is written
//! verbatim into the 256-bit ChaCha key, so distinct tuples give
//! independent streams and any single (replication, level, iteration) can
//! be replayed without touching the others.
//!
//! Counter convention: the initial sample uses counter 0 and the samples
//! drawn during iteration `k` use counter `k + 1`. Level tags `1..=M` are the
//! oracle levels; [`SELECTOR_LEVEL`] is reserved for post-processing draws
//! such as the random iterate index.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Level tag used for draws that are not oracle samples.
pub const SELECTOR_LEVEL: u64 = 0;

/// Replication tags at or above this value are reserved for calibration runs.
pub const CALIBRATION_REPLICATION: u64 = 1 << 63;

pub fn stream(master: u64, replication: u64, level: u64, counter: u64) -> StreamRng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&master.to_le_bytes());
    key[8..16].copy_from_slice(&replication.to_le_bytes());
    key[16..24].copy_from_slice(&level.to_le_bytes());
    key[24..32].copy_from_slice(&counter.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Stream factory for one replication of one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Streams {
    pub master: u64,
    pub replication: u64,
}

impl Streams {
    pub fn new(master: u64, replication: u64) -> Self {
        Self { master, replication }
    }

    /// Stream for oracle level `level` (1-based) at `counter`.
    pub fn level(&self, level: usize, counter: u64) -> StreamRng {
        stream(self.master, self.replication, level as u64, counter)
    }

    pub fn selector(&self, counter: u64) -> StreamRng {
        stream(self.master, self.replication, SELECTOR_LEVEL, counter)
    }
}
