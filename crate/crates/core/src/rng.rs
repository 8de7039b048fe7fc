//! Seeded, counter-keyed randomness.
//!
//! Every random draw in the crate comes from a ChaCha8 generator whose key is
//! the user seed and whose stream id encodes what the draw is for. Dropout
//! masks use the stream `(step, site, pass_index)`, so the two passes of a
//! dropout-twice forward are independent yet individually replayable.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, RoseError};
use crate::tensor::Tensor;

/// Non-dropout consumers. The high bit keeps them disjoint from dropout streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Purpose {
    Init = 1,
    Directions = 2,
    TrainData = 3,
    EvalData = 4,
    Shuffle = 5,
    Perturb = 6,
}

const PURPOSE_BIT: u64 = 1 << 63;
const MAX_SITES: u64 = 1 << 15;

/// Generator for a fixed purpose; `salt` separates independent draws of the
/// same purpose (e.g. epochs of shuffling).
pub fn seeded(seed: u64, purpose: Purpose, salt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(PURPOSE_BIT | ((purpose as u64) << 48) | (salt & ((1 << 48) - 1)));
    rng
}

/// Key of one dropout stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RngStream {
    pub seed: u64,
    pub step: u64,
    pub pass_index: u8,
}

impl RngStream {
    pub fn new(seed: u64, step: u64, pass_index: u8) -> Result<Self> {
        if pass_index > 1 {
            return Err(RoseError::config(format!(
                "pass_index must be 0 or 1, got {pass_index}"
            )));
        }
        if step >= 1 << 46 {
            return Err(RoseError::config(format!(
                "step {step} exceeds stream key range"
            )));
        }
        Ok(RngStream {
            seed,
            step,
            pass_index,
        })
    }

    /// Same seed and step, the other pass.
    pub fn sibling(&self) -> Self {
        RngStream {
            pass_index: 1 - self.pass_index,
            ..*self
        }
    }

    /// Generator for dropout site `site` of this pass.
    pub fn site(&self, site: usize) -> ChaCha8Rng {
        debug_assert!((site as u64) < MAX_SITES);
        let stream = (self.step << 16) | ((site as u64 % MAX_SITES) << 1) | self.pass_index as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

/// Inverted-dropout mask: entries are `0` (dropped, probability `rate`) or
/// `1/(1-rate)` (kept), so the expected entry is 1.
pub fn dropout_mask(rng: &RngStream, site: usize, shape: &[usize], rate: f64) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(RoseError::config(format!(
            "dropout rate must lie in [0, 1), got {rate}"
        )));
    }
    let keep = 1.0 / (1.0 - rate);
    let n: usize = shape.iter().product();
    let mut gen = rng.site(site);
    let data = (0..n)
        .map(|_| {
            if gen.random::<f64>() >= rate {
                keep
            } else {
                0.0
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_rate_keeps_everything() {
        let s = RngStream::new(3, 7, 0).unwrap();
        let m = dropout_mask(&s, 0, &[16, 8], 0.0).unwrap();
        assert!(m.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn rate_one_rejected() {
        let s = RngStream::new(3, 7, 0).unwrap();
        assert!(dropout_mask(&s, 0, &[4], 1.0).is_err());
        assert!(dropout_mask(&s, 0, &[4], -0.1).is_err());
        assert!(RngStream::new(3, 7, 2).is_err());
    }

    #[test]
    fn same_key_same_mask() {
        let s = RngStream::new(11, 42, 1).unwrap();
        let a = dropout_mask(&s, 2, &[32, 16], 0.1).unwrap();
        let b = dropout_mask(&s, 2, &[32, 16], 0.1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn passes_and_sites_differ() {
        let s = RngStream::new(11, 42, 0).unwrap();
        let a = dropout_mask(&s, 0, &[64, 16], 0.5).unwrap();
        let b = dropout_mask(&s.sibling(), 0, &[64, 16], 0.5).unwrap();
        let c = dropout_mask(&s, 1, &[64, 16], 0.5).unwrap();
        assert_ne!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn keep_fraction_at_half_rate() {
        let s = RngStream::new(2024, 1, 0).unwrap();
        let m = dropout_mask(&s, 0, &[1000, 1000], 0.5).unwrap();
        let kept = m.data().iter().filter(|&&v| v != 0.0).count() as f64 / 1e6;
        assert!((kept - 0.5).abs() < 0.002, "keep fraction {kept}");
        assert!(m.data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn purposes_are_disjoint_streams() {
        let mut a = seeded(5, Purpose::Init, 0);
        let mut b = seeded(5, Purpose::Directions, 0);
        let mut c = seeded(5, Purpose::Init, 1);
        let x: u64 = a.random();
        assert_ne!(x, b.random::<u64>());
        assert_ne!(x, c.random::<u64>());
    }
}
