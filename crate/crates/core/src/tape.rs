//! Deterministic random tape: an infinite read-only bit source addressed by
//! (seed, domain, position).
//!
//! Every consumer of randomness in this crate reads from a [`RandomTape`].
//! A tape is just a 64-bit seed; bits are produced by a counter-mode mixer,
//! so any position can be read without generating its predecessors. Readers
//! carry an explicit cursor and mutate nothing but that cursor, which makes
//! replay trivial: two readers over equal seeds and domains see identical
//! bit streams.
//!
//! Domains partition the tape into independent streams. Protocol code keeps
//! shared randomness (filter hashing, public partition/tree draws) in
//! domains both parties read, and Alice-private randomness (her key
//! sequence) in domains the decoder never touches.

/// SplitMix64 finalizer; the core bit mixer for the tape.
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// Mixes a trial index into a base seed. Used by the harness to fan one
/// experiment seed out into per-trial seeds.
pub fn derive_trial_seed(base_seed: u64, trial: u64) -> u64 {
    mix64(base_seed ^ mix64(trial.wrapping_add(1).wrapping_mul(GOLDEN)))
}

/// Stream domains used across the crate. Values are arbitrary but fixed;
/// changing them changes every seeded result.
pub mod domain {
    /// Tabulated hash for the fingerprint filter.
    pub const FINGERPRINT_HASH: u64 = 1;
    /// Tabulated hash for the sticky toy filter (separate range).
    pub const STICKY_HASH: u64 = 2;
    /// Alice's private key sequence. The decoder must never read this.
    pub const ALICE_KEYS: u64 = 100;
    /// Public randomness: universe partition.
    pub const PUBLIC_PARTITION: u64 = 200;
    /// Public randomness: obfuscating tree shape and labels.
    pub const PUBLIC_TREE: u64 = 201;
    /// Scratch randomness for tests and estimators.
    pub const HARNESS: u64 = 900;
}

/// A deterministic infinite tape of random bits, identified by its seed.
///
/// Copyable and cheap; the bits live nowhere, they are recomputed on read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RandomTape {
    seed: u64,
}

impl RandomTape {
    pub fn new(seed: u64) -> Self {
        RandomTape { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Sequential reader over the given domain, starting at bit 0.
    pub fn reader(&self, domain: u64) -> TapeReader {
        TapeReader {
            base: mix64(self.seed ^ mix64(domain ^ 0xd6e8_feb8_6659_fd93)),
            cursor: 0,
        }
    }

    /// Reader over a per-item substream. Used for tabulated hash functions,
    /// where each universe key owns a dedicated stretch of tape.
    pub fn item_reader(&self, domain: u64, item: u64) -> TapeReader {
        TapeReader {
            base: mix64(
                mix64(self.seed ^ mix64(domain ^ 0xd6e8_feb8_6659_fd93))
                    ^ item.wrapping_add(1).wrapping_mul(GOLDEN),
            ),
            cursor: 0,
        }
    }
}

/// Cursor into one tape stream. Reads advance the cursor and touch nothing
/// else.
#[derive(Debug, Clone)]
pub struct TapeReader {
    base: u64,
    cursor: u64,
}

impl TapeReader {
    #[inline]
    fn word(&self, index: u64) -> u64 {
        mix64(self.base.wrapping_add(index.wrapping_add(1).wrapping_mul(GOLDEN)))
    }

    /// Current bit position.
    pub fn cursor(&self) -> u64 {
        self.cursor
    }

    #[inline]
    pub fn read_bit(&mut self) -> bool {
        let word = self.word(self.cursor / 64);
        let bit = (word >> (self.cursor % 64)) & 1;
        self.cursor += 1;
        bit == 1
    }

    /// Reads `width` bits (MSB of the result first on the tape). `width <= 64`.
    pub fn read_bits(&mut self, width: u32) -> u64 {
        debug_assert!(width <= 64);
        let mut value = 0u64;
        for _ in 0..width {
            value = (value << 1) | u64::from(self.read_bit());
        }
        value
    }

    /// Exactly uniform draw from `[0, bound)` by rejection on
    /// `ceil(log2(bound))`-bit reads.
    pub fn uniform_below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "uniform_below: bound must be positive");
        if bound == 1 {
            return 0;
        }
        let width = 64 - (bound - 1).leading_zeros();
        loop {
            let value = self.read_bits(width);
            if value < bound {
                return value;
            }
        }
    }

    /// Uniform f64 in [0, 1) with 53 bits of precision.
    pub fn uniform_f64(&mut self) -> f64 {
        (self.read_bits(53) as f64) * (1.0 / (1u64 << 53) as f64)
    }

    /// First `count` steps of a Fisher-Yates shuffle over `items`; returns
    /// the sampled prefix. With `count == items.len()` this is a full
    /// uniform shuffle; otherwise a uniform ordered sample without
    /// replacement.
    pub fn sample_distinct(&mut self, items: &mut [u64], count: usize) -> Vec<u64> {
        let len = items.len();
        assert!(count <= len);
        for i in 0..count {
            let j = i + self.uniform_below((len - i) as u64) as usize;
            items.swap(i, j);
        }
        items[..count].to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_seeds_equal_streams() {
        let a = RandomTape::new(42);
        let b = RandomTape::new(42);
        let mut ra = a.reader(7);
        let mut rb = b.reader(7);
        for _ in 0..1000 {
            assert_eq!(ra.read_bit(), rb.read_bit());
        }
    }

    #[test]
    fn different_domains_differ() {
        let tape = RandomTape::new(42);
        let bits_a: Vec<bool> = (0..256).map(|_| false).collect();
        let mut ra = tape.reader(1);
        let mut rb = tape.reader(2);
        let a: Vec<bool> = bits_a.iter().map(|_| ra.read_bit()).collect();
        let b: Vec<bool> = bits_a.iter().map(|_| rb.read_bit()).collect();
        assert_ne!(a, b);
    }

    #[test]
    fn reading_moves_only_the_cursor() {
        let tape = RandomTape::new(3);
        let mut r = tape.reader(0);
        let first: Vec<u64> = (0..16).map(|_| r.read_bits(8)).collect();
        let mut r2 = tape.reader(0);
        let second: Vec<u64> = (0..16).map(|_| r2.read_bits(8)).collect();
        assert_eq!(first, second);
        assert_eq!(r.cursor(), 128);
    }

    #[test]
    fn uniform_below_is_in_range_and_unbiased_enough() {
        let tape = RandomTape::new(11);
        let mut r = tape.reader(domain::HARNESS);
        let bound = 6u64;
        let mut counts = [0u64; 6];
        let trials = 60_000;
        for _ in 0..trials {
            let v = r.uniform_below(bound);
            counts[v as usize] += 1;
        }
        let expected = trials as f64 / bound as f64;
        for &c in &counts {
            // 5 sigma of a binomial with p = 1/6
            let sigma = (expected * (1.0 - 1.0 / bound as f64)).sqrt();
            assert!((c as f64 - expected).abs() < 5.0 * sigma, "counts {counts:?}");
        }
    }

    #[test]
    fn sample_distinct_is_distinct_and_in_domain() {
        let tape = RandomTape::new(5);
        let mut r = tape.reader(domain::HARNESS);
        let mut items: Vec<u64> = (0..20).collect();
        let sample = r.sample_distinct(&mut items, 8);
        assert_eq!(sample.len(), 8);
        let mut sorted = sample.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 8);
        assert!(sample.iter().all(|&x| x < 20));
    }
}
