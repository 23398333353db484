//! Deterministic random streams.
//!
//! Every sampling operation in this crate takes an explicit [`RngStream`];
//! there is no global RNG state. A stream is a ChaCha8 counter-based
//! generator keyed by a 64-bit seed. Independent sub-streams are derived
//! from the parent's *seed* (not its consumption state) with the
//! [`mix64`]/[`derive_seed`] mix, so parallel workers never overlap and the
//! derivation is reproducible from the seed alone.
//!
//! Gaussian variates use the Box–Muller transform on top of the stream
//! rather than a table-driven method, so the exact output sequence is a
//! documented function of the seed.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;

/// SplitMix64 finalizer. Bijective on `u64`.
///
/// `z ^= z >> 30; z *= 0xbf58476d1ce4e5b9; z ^= z >> 27; z *= 0x94d049bb133111eb; z ^= z >> 31`
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derives a sub-seed from a root seed and a list of tags.
///
/// `h_0 = mix64(seed)`, `h_{i+1} = mix64(h_i ^ mix64(tag_i))`. Used for
/// per-cell/per-trial/per-sample streams; two derivations collide only if
/// their full tag paths collide.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    let mut h = mix64(seed);
    for &t in tags {
        h = mix64(h ^ mix64(t));
    }
    h
}

/// Spaces at most this large use an explicit Fisher–Yates partial shuffle
/// for without-replacement sampling; larger spaces use rejection sampling.
pub const FISHER_YATES_MAX_SPACE: u64 = 1 << 24;

/// A seeded, counter-based random stream.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    rng: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl RngStream {
    pub fn from_seed(seed: u64) -> Self {
        RngStream {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            spare_normal: None,
        }
    }

    /// The seed this stream was created with.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// An independent stream derived from this stream's seed and `tag`.
    ///
    /// Derivation ignores how much of `self` has been consumed, so
    /// `substream` calls can be issued from parallel workers in any order.
    pub fn substream(&self, tag: u64) -> RngStream {
        RngStream::from_seed(derive_seed(self.seed, &[tag]))
    }

    /// Like [`substream`](Self::substream) with a multi-part tag.
    pub fn substream_tagged(&self, tags: &[u64]) -> RngStream {
        RngStream::from_seed(derive_seed(self.seed, tags))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`, unbiased via rejection.
    pub fn range(&mut self, n: u64) -> u64 {
        assert!(n > 0, "range over empty interval");
        // Reject the tail of the 2^64 space that does not divide evenly.
        let zone = u64::MAX - (u64::MAX - n + 1) % n;
        loop {
            let v = self.next_u64();
            if v <= zone {
                return v % n;
            }
        }
    }

    /// Standard normal via Box–Muller; generates pairs, caches the second.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // u1 in (0, 1] so the log is finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// In-place Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.range((i + 1) as u64) as usize;
            xs.swap(i, j);
        }
    }

    /// Samples `k` distinct values uniformly from `0..space`.
    ///
    /// Uses a partial Fisher–Yates shuffle over the explicit index space when
    /// `space <= 2^24`, and rejection sampling with a seen-set otherwise.
    pub fn sample_distinct(&mut self, space: u64, k: usize) -> Vec<u64> {
        assert!(k as u64 <= space, "cannot draw {k} distinct from {space}");
        if space <= FISHER_YATES_MAX_SPACE {
            let mut pool: Vec<u32> = (0..space as u32).collect();
            let n = pool.len();
            for i in 0..k.min(n.saturating_sub(1)) {
                let j = i + self.range((n - i) as u64) as usize;
                pool.swap(i, j);
            }
            pool[..k].iter().map(|&v| v as u64).collect()
        } else {
            let mut seen = HashSet::with_capacity(k);
            let mut out = Vec::with_capacity(k);
            while out.len() < k {
                let v = self.range(space);
                if seen.insert(v) {
                    out.push(v);
                }
            }
            out
        }
    }
}
