//! Deterministic random substreams.
//!
//! Every random decision in a run draws from its own ChaCha8 stream whose
//! 32-byte seed is
//!
//! ```text
//! SHA-256( "fedsmc/stream/v1" || master_seed || purpose_tag || client || round )
//! ```
//!
//! with the integers encoded as little-endian `u64` and `purpose_tag` a single
//! byte (see [`Purpose`]). Streams for different (purpose, client, round)
//! triples are independent, and a stream does not depend on which aggregation
//! strategy is running, so FedAvg, DP and SMC runs with the same master seed
//! see identical local-training shuffles.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Stream = ChaCha8Rng;

const DOMAIN: &[u8] = b"fedsmc/stream/v1";

/// What a substream is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Purpose {
    InitWeights,
    ClusterAssignment,
    LocalShuffle,
    Coefficients,
    DpNoise,
    DataFeatures,
    DataSplit,
}

impl Purpose {
    fn tag(self) -> u8 {
        match self {
            Purpose::InitWeights => 1,
            Purpose::ClusterAssignment => 2,
            Purpose::LocalShuffle => 3,
            Purpose::Coefficients => 4,
            Purpose::DpNoise => 5,
            Purpose::DataFeatures => 6,
            Purpose::DataSplit => 7,
        }
    }
}

/// Derives the stream for `(purpose, client, round)` under `master_seed`.
///
/// Use `client = 0` / `round = 0` for run-wide streams.
pub fn substream(master_seed: u64, purpose: Purpose, client: u64, round: u64) -> Stream {
    let mut h = Sha256::new();
    h.update(DOMAIN);
    h.update(master_seed.to_le_bytes());
    h.update([purpose.tag()]);
    h.update(client.to_le_bytes());
    h.update(round.to_le_bytes());
    let digest = h.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}
