//! Seeded RNG substreams.
//!
//! Every (round, phase, actor) triple gets its own ChaCha8 stream derived
//! from the master seed, so results never depend on call order across
//! agents.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Decision or sampling phase a substream belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    Setup,
    Post,
    Bid,
    Select,
    Plan,
    Execute,
    Pay,
    Belief,
    Autarky,
    Evolution,
}

impl Phase {
    fn tag(self) -> u64 {
        match self {
            Phase::Setup => 1,
            Phase::Post => 2,
            Phase::Bid => 3,
            Phase::Select => 4,
            Phase::Plan => 5,
            Phase::Execute => 6,
            Phase::Pay => 7,
            Phase::Belief => 8,
            Phase::Autarky => 9,
            Phase::Evolution => 10,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream for `(round, phase, actor)` under `master_seed`.
pub fn substream(master_seed: u64, round: u32, phase: Phase, actor: u64) -> SimRng {
    let mut h = splitmix64(master_seed);
    h = splitmix64(h ^ u64::from(round));
    h = splitmix64(h ^ phase.tag());
    h = splitmix64(h ^ actor);
    ChaCha8Rng::seed_from_u64(h)
}

pub fn seeded(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}
