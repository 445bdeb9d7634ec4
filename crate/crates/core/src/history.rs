//! Bit-level encoding of joint treatment/covariate histories.
//!
//! A history over horizon `K` consists of treatments `a_0..a_K` and
//! intermediate covariates `l_1..l_K` (the baseline covariate `l_0` lives
//! outside the index, in the stratum). Histories are packed big-endian in
//! time order `(a_0, l_1, a_1, l_2, a_2, ..., l_K, a_K)`, so for `K = 1` the
//! code of `(a_0, l_1, a_1)` is `4*a_0 + 2*l_1 + a_1`. With this layout the
//! time-order-last set bit is the least significant set bit of the code, and
//! zero-padding a prefix is a plain shift.

use crate::error::{Error, Result};

/// Largest horizon for which full-table (2^(2K+1) cell) operations are
/// permitted. Markov-mode paths have no such bound.
pub const MAX_EXACT_HORIZON: usize = 16;

/// Largest horizon representable in a packed `u64` code.
pub const MAX_HORIZON: usize = 31;

/// Number of probability-table cells, `d_1 = 2^(2K+1)`.
pub fn d1(horizon: usize) -> u64 {
    1u64 << (2 * horizon + 1)
}

/// Total length of the per-stage `phi` (equivalently `eta`) blocks,
/// `d_2 = sum_{k=0}^{K-1} 2^(2k+1)`.
pub fn d2(horizon: usize) -> u64 {
    (0..horizon).map(|k| 2u64 << (2 * k)).sum()
}

/// Number of blip cells at stage `k`: pairs `(a-bar_{k-1}, l-bar_{1:k})`.
pub fn blip_cells(stage: usize) -> u64 {
    1u64 << (2 * stage)
}

/// Number of nuisance cells at stage `k`: pairs `(a-bar_k, l-bar_{1:k})`.
pub fn nuisance_cells(stage: usize) -> u64 {
    2u64 << (2 * stage)
}

/// A joint treatment/covariate history with its packed code.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct HistoryIndex {
    horizon: usize,
    code: u64,
}

/// Identifies one bit of a history: the treatment at a stage, or the
/// covariate observed at a stage (covariate stages start at 1).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HistoryBit {
    Treatment(usize),
    Covariate(usize),
}

impl HistoryIndex {
    fn check_horizon(horizon: usize) -> Result<()> {
        if horizon > MAX_HORIZON {
            return Err(Error::HorizonTooLarge(horizon, MAX_HORIZON));
        }
        Ok(())
    }

    /// Builds a history from separate treatment and covariate bit-strings.
    /// `treatments` must have length `K+1` and `covariates` length `K`.
    pub fn from_bits(treatments: &[u8], covariates: &[u8]) -> Result<Self> {
        if treatments.is_empty() {
            return Err(Error::LengthMismatch {
                kind: "treatment",
                expected: 1,
                got: 0,
            });
        }
        let horizon = treatments.len() - 1;
        Self::check_horizon(horizon)?;
        if covariates.len() != horizon {
            return Err(Error::LengthMismatch {
                kind: "covariate",
                expected: horizon,
                got: covariates.len(),
            });
        }
        let mut code = 0u64;
        for (k, &a) in treatments.iter().enumerate() {
            validate_bit(a)?;
            if k > 0 {
                validate_bit(covariates[k - 1])?;
                code = (code << 1) | u64::from(covariates[k - 1]);
            }
            code = (code << 1) | u64::from(a);
        }
        Ok(Self { horizon, code })
    }

    /// Builds a history directly from a packed code.
    pub fn from_code(horizon: usize, code: u64) -> Result<Self> {
        Self::check_horizon(horizon)?;
        if code >= d1(horizon) {
            return Err(Error::CodeOutOfRange { code, horizon });
        }
        Ok(Self { horizon, code })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn code(&self) -> u64 {
        self.code
    }

    fn treatment_shift(&self, stage: usize) -> u32 {
        (2 * (self.horizon - stage)) as u32
    }

    fn covariate_shift(&self, stage: usize) -> u32 {
        (2 * (self.horizon - stage) + 1) as u32
    }

    /// Treatment bit `a_k`.
    pub fn treatment(&self, stage: usize) -> Result<u8> {
        if stage > self.horizon {
            return Err(Error::StageOutOfRange {
                stage,
                horizon: self.horizon,
            });
        }
        Ok(((self.code >> self.treatment_shift(stage)) & 1) as u8)
    }

    /// Covariate bit `l_k`, for `1 <= k <= K`.
    pub fn covariate(&self, stage: usize) -> Result<u8> {
        if stage == 0 || stage > self.horizon {
            return Err(Error::StageOutOfRange {
                stage,
                horizon: self.horizon,
            });
        }
        Ok(((self.code >> self.covariate_shift(stage)) & 1) as u8)
    }

    pub fn treatments(&self) -> Vec<u8> {
        (0..=self.horizon)
            .map(|k| self.treatment(k).unwrap())
            .collect()
    }

    pub fn covariates(&self) -> Vec<u8> {
        (1..=self.horizon)
            .map(|k| self.covariate(k).unwrap())
            .collect()
    }

    /// The time-order-last bit equal to 1, or `None` for the all-zero
    /// history. Clearing it always yields a strictly smaller code.
    pub fn last_one_position(&self) -> Option<HistoryBit> {
        if self.code == 0 {
            return None;
        }
        let j = self.code.trailing_zeros() as usize;
        if j % 2 == 0 {
            Some(HistoryBit::Treatment(self.horizon - j / 2))
        } else {
            Some(HistoryBit::Covariate(self.horizon - (j - 1) / 2))
        }
    }

    /// Clears the time-order-last set bit.
    pub fn clear_last_one(&self) -> Self {
        Self {
            horizon: self.horizon,
            code: self.code & self.code.wrapping_sub(1),
        }
    }

    /// The blip index at stage `k`: the packed prefix through `l_k`,
    /// an integer in `[0, 4^k)`.
    pub fn blip_prefix(&self, stage: usize) -> u64 {
        self.code >> self.covariate_shift(stage).min(63)
    }

    /// The nuisance index at stage `k`: the packed prefix through `a_k`,
    /// an integer in `[0, 2*4^k)`.
    pub fn nuisance_prefix(&self, stage: usize) -> u64 {
        self.code >> self.treatment_shift(stage)
    }
}

fn validate_bit(b: u8) -> Result<()> {
    if b > 1 {
        return Err(Error::InvalidData(format!("expected a bit, got {b}")));
    }
    Ok(())
}

/// Packs treatment and covariate bit-strings into the interleaved code.
pub fn encode(treatments: &[u8], covariates: &[u8]) -> Result<u64> {
    Ok(HistoryIndex::from_bits(treatments, covariates)?.code())
}

/// Inverse of [`encode`]: recovers `(treatments, covariates)` from a code.
pub fn decode(horizon: usize, code: u64) -> Result<(Vec<u8>, Vec<u8>)> {
    let h = HistoryIndex::from_code(horizon, code)?;
    Ok((h.treatments(), h.covariates()))
}

/// Extends a partial history with zeros up to the given horizon. The prefix
/// either ends at a treatment (`treatments.len() == covariates.len() + 1`) or
/// at a covariate (`treatments.len() == covariates.len()`); the empty prefix
/// yields the all-zero history.
pub fn zero_pad(treatments: &[u8], covariates: &[u8], horizon: usize) -> Result<HistoryIndex> {
    let nt = treatments.len();
    let nc = covariates.len();
    if nt != nc && nt != nc + 1 {
        return Err(Error::LengthMismatch {
            kind: "prefix treatment",
            expected: nc,
            got: nt,
        });
    }
    if nt > horizon + 1 || nc > horizon {
        return Err(Error::StageOutOfRange {
            stage: nt.max(nc),
            horizon,
        });
    }
    let mut t = treatments.to_vec();
    let mut c = covariates.to_vec();
    t.resize(horizon + 1, 0);
    c.resize(horizon, 0);
    HistoryIndex::from_bits(&t, &c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_matches_k1_convention() {
        // 4*a_0 + 2*l_1 + a_1
        assert_eq!(encode(&[1, 1], &[1]).unwrap(), 7);
        assert_eq!(encode(&[0, 0], &[0]).unwrap(), 0);
        assert_eq!(encode(&[1, 0], &[0]).unwrap(), 4);
        assert_eq!(encode(&[0, 1], &[1]).unwrap(), 3);
    }

    #[test]
    fn encode_k2_msb() {
        // a_0 is the most significant of the 5 bits
        assert_eq!(encode(&[1, 0, 0], &[0, 0]).unwrap(), 16);
    }

    #[test]
    fn encode_rejects_length_mismatch() {
        assert!(encode(&[1, 1], &[1, 0]).is_err());
        assert!(encode(&[], &[]).is_err());
        assert!(encode(&[2, 0], &[0]).is_err());
    }

    #[test]
    fn zero_pad_examples() {
        let h = zero_pad(&[1], &[1], 2).unwrap();
        assert_eq!(h.treatments(), vec![1, 0, 0]);
        assert_eq!(h.covariates(), vec![1, 0]);

        let h = zero_pad(&[], &[], 1).unwrap();
        assert_eq!(h.code(), 0);

        let h = zero_pad(&[0, 1], &[1], 3).unwrap();
        assert_eq!(h.treatments(), vec![0, 1, 0, 0]);
        assert_eq!(h.covariates(), vec![1, 0, 0]);
    }

    #[test]
    fn zero_pad_rejects_long_prefix() {
        assert!(zero_pad(&[1, 0, 0], &[1, 0], 1).is_err());
    }

    #[test]
    fn last_one_examples() {
        let h = HistoryIndex::from_bits(&[1, 0], &[0]).unwrap();
        assert_eq!(h.last_one_position(), Some(HistoryBit::Treatment(0)));

        let h = HistoryIndex::from_bits(&[0, 0], &[0]).unwrap();
        assert_eq!(h.last_one_position(), None);

        let h = HistoryIndex::from_bits(&[1, 1, 0], &[0, 0]).unwrap();
        assert_eq!(h.last_one_position(), Some(HistoryBit::Treatment(1)));

        let h = HistoryIndex::from_bits(&[0, 0], &[1]).unwrap();
        assert_eq!(h.last_one_position(), Some(HistoryBit::Covariate(1)));
    }

    #[test]
    fn roundtrip_and_bijection_exhaustive() {
        for horizon in 0..=6usize {
            let n = d1(horizon);
            let mut seen = vec![false; n as usize];
            for code in 0..n {
                let (t, c) = decode(horizon, code).unwrap();
                let back = encode(&t, &c).unwrap();
                assert_eq!(back, code, "K={horizon} code={code}");
                assert!(!seen[back as usize]);
                seen[back as usize] = true;
            }
            assert!(seen.iter().all(|&s| s));
        }
    }

    #[test]
    fn clearing_reaches_zero_within_bit_budget() {
        for horizon in 0..=4usize {
            for code in 0..d1(horizon) {
                let mut h = HistoryIndex::from_code(horizon, code).unwrap();
                let mut steps = 0;
                while h.last_one_position().is_some() {
                    let prev = h.code();
                    h = h.clear_last_one();
                    assert!(h.code() < prev);
                    steps += 1;
                }
                assert!(steps <= 2 * horizon + 1);
            }
        }
    }

    #[test]
    fn prefixes_match_bit_layout() {
        // K=2, history (a0,l1,a1,l2,a2) = (1,0,1,1,0) -> code 0b10110
        let h = HistoryIndex::from_bits(&[1, 1, 0], &[0, 1]).unwrap();
        assert_eq!(h.code(), 0b10110);
        assert_eq!(h.nuisance_prefix(0), 0b1);
        assert_eq!(h.blip_prefix(1), 0b10);
        assert_eq!(h.nuisance_prefix(1), 0b101);
        assert_eq!(h.blip_prefix(2), 0b1011);
        assert_eq!(h.nuisance_prefix(2), 0b10110);
    }

    #[test]
    fn dimension_bookkeeping() {
        assert_eq!(d1(1), 8);
        assert_eq!(d2(1), 2);
        assert_eq!(d1(2), 32);
        assert_eq!(d2(2), 10);
        // theta cells + phi cells + 1 (gop) == d1
        for k in 0..=8 {
            let theta: u64 = (0..=k).map(|s| blip_cells(s)).sum();
            let phi: u64 = (0..k).map(|s| nuisance_cells(s)).sum();
            assert_eq!(theta + phi + 1, d1(k));
            assert_eq!(phi, d2(k));
        }
    }
}
