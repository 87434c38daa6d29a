//! Analytic multiply-accumulate counts for the three operators.
//!
//! All formulas are exact integers (arbitrary precision, no floating point):
//!
//! - convolutional:  `H*W*S * k^3 * C`
//! - self-attention: `2 * (H*W*S)^2 * C`
//! - relational:     `2 * (H*W*S) * k^3 * C` — always exactly twice the
//!   convolutional count at equal dimensions.
//!
//! Counts cover only each operator's aggregation term; pointwise projections
//! and normalization are accounted separately by the network-level report in
//! [`crate::model`].

use num_bigint::BigUint;

use crate::error::{Error, Result};

/// Dimensions of one operator application. `k` is the window extent
/// (default 3).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OpDims {
    pub h: u64,
    pub w: u64,
    pub s: u64,
    pub c: u64,
    pub k: u64,
}

impl OpDims {
    pub fn new(h: u64, w: u64, s: u64, c: u64) -> Result<Self> {
        Self::with_k(h, w, s, c, 3)
    }

    pub fn with_k(h: u64, w: u64, s: u64, c: u64, k: u64) -> Result<Self> {
        for (v, name) in [(h, "H"), (w, "W"), (s, "S"), (c, "C"), (k, "k")] {
            if v == 0 {
                return Err(Error::InvalidArg(format!("{name} must be >= 1")));
            }
        }
        Ok(OpDims { h, w, s, c, k })
    }

    fn n(&self) -> BigUint {
        BigUint::from(self.h) * BigUint::from(self.w) * BigUint::from(self.s)
    }

    fn k3(&self) -> BigUint {
        BigUint::from(self.k).pow(3)
    }
}

/// `H*W*S * k^3 * C`
pub fn macs_conv(d: OpDims) -> BigUint {
    d.n() * d.k3() * BigUint::from(d.c)
}

/// `2 * (H*W*S)^2 * C`
pub fn macs_selfattn(d: OpDims) -> BigUint {
    let n = d.n();
    BigUint::from(2u32) * &n * &n * BigUint::from(d.c)
}

/// `2 * H*W*S * k^3 * C`
pub fn macs_rcblock(d: OpDims) -> BigUint {
    BigUint::from(2u32) * macs_conv(d)
}

/// Smallest token count `N = H*W*S` at which global self-attention costs
/// more than the relational window: `2 N^2 C > 2 N k^3 C` iff `N > k^3`,
/// so the crossover is `k^3 + 1`, independent of `C`.
pub fn crossover_resolution(c: u64, k: u64) -> Result<BigUint> {
    for (v, name) in [(c, "C"), (k, "k")] {
        if v == 0 {
            return Err(Error::InvalidArg(format!("{name} must be >= 1")));
        }
    }
    Ok(BigUint::from(k).pow(3) + 1u32)
}

/// CSV sweep over the cartesian product of the given token counts, channel
/// counts, and window extents; columns `N,C,k,conv,selfattn,rcblock`.
/// Each `N` is expanded as dims `(N, 1, 1)`.
pub fn sweep_csv(ns: &[u64], cs: &[u64], ks: &[u64]) -> Result<String> {
    let mut out = String::from("N,C,k,conv,selfattn,rcblock\n");
    for &n in ns {
        for &c in cs {
            for &k in ks {
                let d = OpDims::with_k(n, 1, 1, c, k)?;
                out.push_str(&format!(
                    "{n},{c},{k},{},{},{}\n",
                    macs_conv(d),
                    macs_selfattn(d),
                    macs_rcblock(d)
                ));
            }
        }
    }
    Ok(out)
}
