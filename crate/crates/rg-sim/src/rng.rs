//! Deterministic RNG streams.
//!
//! Every random draw in the simulator comes from a stream derived from
//! (master seed, frame, agent, purpose), so parallel evaluation order can
//! never change what is drawn.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    BoxPlacement,
    BoxAttributes,
    AgentPlacement,
    Lidar,
    Camera,
    PoseNoise,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::BoxPlacement => 1,
            Stream::BoxAttributes => 2,
            Stream::AgentPlacement => 3,
            Stream::Lidar => 4,
            Stream::Camera => 5,
            Stream::PoseNoise => 6,
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// RNG for one (seed, frame, agent, purpose) tuple.
pub fn stream_rng(master: u64, frame: u64, agent: u64, stream: Stream) -> ChaCha8Rng {
    let mixed = splitmix(
        splitmix(master ^ frame.wrapping_mul(0xA24B_AED4_963E_E407))
            ^ agent.wrapping_mul(0x9FB2_1C65_1E98_DF25)
            ^ stream.tag(),
    );
    ChaCha8Rng::seed_from_u64(mixed)
}
