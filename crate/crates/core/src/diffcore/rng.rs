//! Seeded random streams.
//!
//! Every stream is a ChaCha8 generator keyed by the run seed, with the
//! ChaCha stream id selecting the purpose. Uniforms take the top 53 bits of a
//! `u64`; normals use Box-Muller evaluated with the pure-Rust `libm`, so the
//! produced values do not depend on the host's math library.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Purpose of a random stream. Consumers never share a stream, so adding
/// draws in one place leaves the others untouched.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stream {
    Init = 0,
    Masking = 1,
    Dropout = 2,
    Reparam = 3,
    Data = 4,
}

impl Stream {
    pub const ALL: [Stream; 5] = [
        Stream::Init,
        Stream::Masking,
        Stream::Dropout,
        Stream::Reparam,
        Stream::Data,
    ];

    pub fn id(self) -> u64 {
        self as u64
    }

    pub fn from_id(id: u64) -> Option<Stream> {
        Self::ALL.into_iter().find(|s| s.id() == id)
    }
}

/// Snapshot of a stream position, enough to resume it exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64, stream: Stream) -> Self {
        Self::with_stream_id(seed, stream.id())
    }

    pub fn with_stream_id(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            stream: self.stream,
            word_pos: self.inner.get_word_pos(),
        }
    }

    pub fn from_state(state: RngState) -> Self {
        let mut rng = Self::with_stream_id(state.seed, state.stream);
        rng.inner.set_word_pos(state.word_pos);
        rng
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        // 1 - u lies in (0, 1], keeping the logarithm finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(std::f64::consts::TAU * u2)
    }

    /// Uniform integer in `[0, n)`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        // Rejection keeps the draw exactly uniform.
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.inner.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `k` distinct indices drawn uniformly from `0..n`, in draw order.
    pub fn sample_without_replacement(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot draw {k} from {n}");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}

/// One stream per purpose, all derived from a single run seed.
#[derive(Clone, Debug)]
pub struct RngStreams {
    pub init: Rng,
    pub masking: Rng,
    pub dropout: Rng,
    pub reparam: Rng,
    pub data: Rng,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        RngStreams {
            init: Rng::new(seed, Stream::Init),
            masking: Rng::new(seed, Stream::Masking),
            dropout: Rng::new(seed, Stream::Dropout),
            reparam: Rng::new(seed, Stream::Reparam),
            data: Rng::new(seed, Stream::Data),
        }
    }

    pub fn states(&self) -> Vec<RngState> {
        vec![
            self.init.state(),
            self.masking.state(),
            self.dropout.state(),
            self.reparam.state(),
            self.data.state(),
        ]
    }

    pub fn from_states(states: &[RngState]) -> Option<Self> {
        let pick = |s: Stream| {
            states
                .iter()
                .find(|st| st.stream == s.id())
                .map(|st| Rng::from_state(*st))
        };
        Some(RngStreams {
            init: pick(Stream::Init)?,
            masking: pick(Stream::Masking)?,
            dropout: pick(Stream::Dropout)?,
            reparam: pick(Stream::Reparam)?,
            data: pick(Stream::Data)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(7, Stream::Masking);
        let mut b = Rng::new(7, Stream::Masking);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn purposes_are_independent() {
        let mut a = Rng::new(7, Stream::Masking);
        let mut b = Rng::new(7, Stream::Dropout);
        let xs: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        assert_ne!(xs, ys);
    }

    #[test]
    fn state_round_trip_resumes_stream() {
        let mut a = Rng::new(3, Stream::Reparam);
        for _ in 0..13 {
            a.normal();
        }
        let mut b = Rng::from_state(a.state());
        for _ in 0..50 {
            assert_eq!(a.uniform().to_bits(), b.uniform().to_bits());
        }
    }

    #[test]
    fn normal_moments() {
        let mut rng = Rng::new(11, Stream::Init);
        let n = 200_000;
        let xs: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn sample_without_replacement_is_distinct() {
        let mut rng = Rng::new(5, Stream::Masking);
        for n in 1..40 {
            let k = n / 2 + 1;
            let mut s = rng.sample_without_replacement(n, k);
            s.sort_unstable();
            s.dedup();
            assert_eq!(s.len(), k);
            assert!(s.iter().all(|&i| i < n));
        }
    }
}
