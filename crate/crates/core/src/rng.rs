//! Keyed random streams.
//!
//! Every random quantity in a run is drawn from a ChaCha8 stream addressed by
//! `(master seed, replica, slot)`. Slot 0 is reserved for scheduling events
//! (gossip wake-ups); agent `i` draws from slot `i + 1`. Streams never share
//! state, so replicas can run concurrently and any draw can be replayed from
//! its coordinates.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Slot used for algorithm-level events (agent wake-ups, partner choice).
pub const EVENT_SLOT: u32 = 0;

/// Coordinates of a random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamKey {
    pub seed: u64,
    pub replica: u32,
    pub slot: u32,
}

impl StreamKey {
    pub fn new(seed: u64, replica: u32, slot: u32) -> Self {
        Self { seed, replica, slot }
    }

    /// Key of agent `agent`'s private stream.
    pub fn agent(seed: u64, replica: u32, agent: usize) -> Self {
        Self::new(seed, replica, agent as u32 + 1)
    }

    pub fn events(seed: u64, replica: u32) -> Self {
        Self::new(seed, replica, EVENT_SLOT)
    }

    fn stream_id(&self) -> u64 {
        ((self.replica as u64) << 32) | self.slot as u64
    }
}

/// A positioned random stream that counts the 64-bit words it has consumed.
#[derive(Debug, Clone)]
pub struct Stream {
    key: StreamKey,
    rng: ChaCha8Rng,
    words: u64,
}

impl Stream {
    pub fn new(key: StreamKey) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(key.seed);
        rng.set_stream(key.stream_id());
        Self { key, rng, words: 0 }
    }

    /// Re-open `key` positioned after `words` consumed 64-bit words.
    pub fn at(key: StreamKey, words: u64) -> Self {
        let mut s = Self::new(key);
        // ChaCha word positions count 32-bit words.
        s.rng.set_word_pos(words as u128 * 2);
        s.words = words;
        s
    }

    pub fn key(&self) -> StreamKey {
        self.key
    }

    /// Number of 64-bit words drawn so far.
    pub fn position(&self) -> u64 {
        self.words
    }

    /// Uniform draw on `[0, 1)`; consumes exactly one word.
    pub fn uniform(&mut self) -> f64 {
        self.words += 1;
        self.rng.random::<f64>()
    }

    /// Uniform draw on `[lo, hi)`; consumes exactly one word.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal draw by Box-Muller; consumes exactly two words.
    pub fn normal(&mut self) -> f64 {
        // 1 - u keeps the logarithm argument in (0, 1].
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform index in `0..n` by multiply-shift; consumes exactly one word.
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0);
        self.words += 1;
        let w = self.rng.next_u64();
        ((w as u128 * n as u128) >> 64) as usize
    }
}

/// Independent per-agent streams for one replica.
#[derive(Debug, Clone)]
pub struct AgentStreams {
    streams: Vec<Stream>,
}

impl AgentStreams {
    pub fn new(seed: u64, replica: u32, n: usize) -> Self {
        Self {
            streams: (0..n)
                .map(|i| Stream::new(StreamKey::agent(seed, replica, i)))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.streams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.streams.is_empty()
    }

    pub fn get_mut(&mut self, agent: usize) -> &mut Stream {
        &mut self.streams[agent]
    }
}

/// Deterministic 64-bit mixer (splitmix64 finalizer) for deriving sub-seeds.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replay_from_position() {
        let key = StreamKey::agent(7, 3, 2);
        let mut a = Stream::new(key);
        for _ in 0..5 {
            a.normal();
        }
        let pos = a.position();
        assert_eq!(pos, 10);
        let next = a.uniform();
        let mut b = Stream::at(key, pos);
        assert_eq!(b.uniform().to_bits(), next.to_bits());
    }

    #[test]
    fn streams_are_distinct() {
        let mut a = Stream::new(StreamKey::agent(1, 0, 0));
        let mut b = Stream::new(StreamKey::agent(1, 0, 1));
        let mut c = Stream::new(StreamKey::agent(1, 1, 0));
        let (x, y, z) = (a.uniform(), b.uniform(), c.uniform());
        assert_ne!(x, y);
        assert_ne!(x, z);
    }

    #[test]
    fn normal_moments() {
        let mut s = Stream::new(StreamKey::new(11, 0, 5));
        let n = 200_000;
        let (mut m1, mut m2) = (0.0, 0.0);
        for _ in 0..n {
            let z = s.normal();
            m1 += z;
            m2 += z * z;
        }
        m1 /= n as f64;
        m2 /= n as f64;
        assert!(m1.abs() < 5.0 / (n as f64).sqrt());
        assert!((m2 - 1.0).abs() < 5.0 * (2.0 / n as f64).sqrt());
    }

    #[test]
    fn index_in_range() {
        let mut s = Stream::new(StreamKey::events(3, 0));
        let mut counts = [0usize; 5];
        for _ in 0..50_000 {
            counts[s.index(5)] += 1;
        }
        for c in counts {
            assert!((c as f64 - 10_000.0).abs() < 500.0);
        }
    }
}
