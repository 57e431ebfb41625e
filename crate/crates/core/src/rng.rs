//! Named, independent random streams for one training run.
//!
//! Every consumer of randomness draws from its own ChaCha stream derived from
//! the run seed, so enabling or disabling one subsystem (for example advice
//! decisions) never shifts the draws seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    /// Episode resets (agent/goal/key placement).
    Environment,
    /// Student action sampling.
    StudentPolicy,
    /// Advice gating draws and teacher action sampling.
    Advising,
    /// Parameter initialization.
    Init,
    /// Minibatch shuffling for the student update.
    StudentMinibatch,
    /// Minibatch shuffling for the teacher critic update.
    TeacherMinibatch,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Environment => 1,
            Stream::StudentPolicy => 2,
            Stream::Advising => 3,
            Stream::Init => 4,
            Stream::StudentMinibatch => 5,
            Stream::TeacherMinibatch => 6,
        }
    }
}

/// Build the generator for `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.id());
    rng
}

/// The full set of streams owned by a run.
#[derive(Debug, Clone)]
pub struct RngStreams {
    pub environment: Rng,
    pub student: Rng,
    pub advising: Rng,
    pub init: Rng,
    pub student_minibatch: Rng,
    pub teacher_minibatch: Rng,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        Self {
            environment: stream_rng(seed, Stream::Environment),
            student: stream_rng(seed, Stream::StudentPolicy),
            advising: stream_rng(seed, Stream::Advising),
            init: stream_rng(seed, Stream::Init),
            student_minibatch: stream_rng(seed, Stream::StudentMinibatch),
            teacher_minibatch: stream_rng(seed, Stream::TeacherMinibatch),
        }
    }
}
