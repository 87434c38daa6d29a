//! Numeric operators: sliding-window 3D convolution (depthwise and
//! pointwise), the global self-attention reference, the 3D relational
//! convolution, pooling, normalization, and the classification loss.
//!
//! Every operator records a backward rule on the [`crate::tensor::Tape`];
//! per-output-location computation is pure and independent.

mod attention;
mod conv;
mod nn;
mod relconv;

pub use attention::{self_attention_global, AttnProj};
pub use conv::{conv3d_depthwise, conv3d_pointwise, Conv3dSpec};
pub use nn::{channel_norm, global_avg_pool, silu, softmax_cross_entropy};
pub use relconv::{relconv3d, relconv3d_inspect, RelConvInspection, RelConvProj, RelConvSpec, WeightMode};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Border policy for windowed operators.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Mirror-padded windows; output extent is `ceil(dim / stride)`.
    Same,
    /// Windows fully inside the input; output extent is
    /// `floor((dim - k) / stride) + 1`.
    Valid,
}

/// Reflects an out-of-range index back into `[0, n)` without repeating the
/// border sample: for a row `a b c d`, index -1 maps to `b` and index `n`
/// maps to `c`. Total for every `n >= 1` (an extent of 1 always maps to 0).
#[inline]
pub fn mirror_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * n - 2;
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - j;
    }
    j as usize
}

/// Window geometry shared by the depthwise and relational convolutions.
#[derive(Clone, Copy, Debug)]
pub(crate) struct WindowGeom {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: Padding,
    pub in_dims: [usize; 3],
    pub out_dims: [usize; 3],
}

impl WindowGeom {
    pub fn new(
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: Padding,
        in_dims: [usize; 3],
    ) -> Result<Self> {
        for (&s, axis) in stride.iter().zip(["h", "w", "s"]) {
            if s == 0 {
                return Err(Error::InvalidArg(format!("stride along {axis} must be >= 1")));
            }
        }
        for &k in &kernel {
            if k == 0 {
                return Err(Error::InvalidArg("kernel extent must be >= 1".into()));
            }
        }
        let out_dims = match padding {
            Padding::Same => {
                for &k in &kernel {
                    if k % 2 == 0 {
                        return Err(Error::InvalidArg(format!(
                            "same padding requires odd kernel extents, got {kernel:?}"
                        )));
                    }
                }
                [
                    in_dims[0].div_ceil(stride[0]),
                    in_dims[1].div_ceil(stride[1]),
                    in_dims[2].div_ceil(stride[2]),
                ]
            }
            Padding::Valid => {
                let mut out = [0usize; 3];
                for a in 0..3 {
                    if kernel[a] > in_dims[a] {
                        return Err(Error::InvalidArg(format!(
                            "kernel {:?} larger than input {:?} in valid mode",
                            kernel, in_dims
                        )));
                    }
                    out[a] = (in_dims[a] - kernel[a]) / stride[a] + 1;
                }
                out
            }
        };
        Ok(WindowGeom { kernel, stride, padding, in_dims, out_dims })
    }

    pub fn out_len(&self) -> usize {
        self.out_dims[0] * self.out_dims[1] * self.out_dims[2]
    }

    /// Input coordinate for window tap `(m, n, z)` of output `(i, j, l)`,
    /// mirror-folded back in range under `Same` padding.
    #[inline]
    pub fn src(&self, out: [usize; 3], tap: [usize; 3]) -> [usize; 3] {
        match self.padding {
            Padding::Same => {
                let mut p = [0usize; 3];
                for a in 0..3 {
                    let center = (out[a] * self.stride[a]) as isize;
                    let off = tap[a] as isize - (self.kernel[a] / 2) as isize;
                    p[a] = mirror_index(center + off, self.in_dims[a]);
                }
                p
            }
            Padding::Valid => [
                out[0] * self.stride[0] + tap[0],
                out[1] * self.stride[1] + tap[1],
                out[2] * self.stride[2] + tap[2],
            ],
        }
    }
}

/// Shape helper: interprets a rank-4 tensor as `[H, W, S, C]`.
pub(crate) fn feature_dims<T: crate::tensor::Element>(
    t: &crate::tensor::Tensor<T>,
) -> Result<([usize; 3], usize)> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "expected rank-4 feature map [H,W,S,C], got {:?}",
            s
        )));
    }
    Ok(([s[0], s[1], s[2]], s[3]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mirror_basics() {
        // row: 0 1 2 3 — reflect without repeating the edge
        assert_eq!(mirror_index(-1, 4), 1);
        assert_eq!(mirror_index(-2, 4), 2);
        assert_eq!(mirror_index(4, 4), 2);
        assert_eq!(mirror_index(5, 4), 1);
        assert_eq!(mirror_index(2, 4), 2);
        assert_eq!(mirror_index(-1, 1), 0);
        assert_eq!(mirror_index(3, 1), 0);
        assert_eq!(mirror_index(-1, 2), 1);
    }

    #[test]
    fn same_out_dims_are_ceil() {
        let g = WindowGeom::new([3, 3, 3], [2, 2, 2], Padding::Same, [27, 27, 100]).unwrap();
        assert_eq!(g.out_dims, [14, 14, 50]);
    }

    #[test]
    fn valid_out_dims() {
        let g = WindowGeom::new([3, 3, 3], [1, 1, 1], Padding::Valid, [5, 5, 5]).unwrap();
        assert_eq!(g.out_dims, [3, 3, 3]);
        assert!(WindowGeom::new([7, 3, 3], [1, 1, 1], Padding::Valid, [5, 5, 5]).is_err());
    }

    #[test]
    fn same_requires_odd_kernel() {
        assert!(WindowGeom::new([2, 3, 3], [1, 1, 1], Padding::Same, [5, 5, 5]).is_err());
    }

    proptest! {
        #[test]
        fn mirror_stays_in_range(i in -100isize..100, n in 1usize..12) {
            let j = mirror_index(i, n);
            prop_assert!(j < n);
        }

        #[test]
        fn mirror_is_identity_inside(n in 1usize..12) {
            for i in 0..n {
                prop_assert_eq!(mirror_index(i as isize, n), i);
            }
        }
    }
}
