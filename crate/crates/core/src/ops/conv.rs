//! Depthwise and pointwise 3D convolution.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{feature_dims, Padding, WindowGeom};
use crate::tensor::tape::{BackwardRule, GradSink};
use crate::tensor::{Element, Tape, Tensor, ValueId};

/// Stride and border policy of a depthwise convolution; the kernel tensor
/// `[k_h, k_w, k_s, C]` travels separately as a tape value.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Conv3dSpec {
    pub stride: [usize; 3],
    pub padding: Padding,
}

impl Default for Conv3dSpec {
    fn default() -> Self {
        Conv3dSpec { stride: [1, 1, 1], padding: Padding::Same }
    }
}

/// Per-channel spatial-spectral aggregation:
/// `O(i,j,l,c) = sum_{m,n,z} I(i+m, j+n, l+z, c) * K(m,n,z,c)`
/// with mirror `same` padding or `valid` cropping.
pub fn conv3d_depthwise<T: Element>(
    tape: &mut Tape<T>,
    input: ValueId,
    kernel: ValueId,
    spec: &Conv3dSpec,
) -> Result<ValueId> {
    let (in_dims, channels) = feature_dims(tape.value(input))?;
    let kshape = tape.value(kernel).shape().to_vec();
    if kshape.len() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "depthwise kernel must be [k_h,k_w,k_s,C], got {kshape:?}"
        )));
    }
    if kshape[3] != channels {
        return Err(Error::ShapeMismatch(format!(
            "kernel channels {} != input channels {channels}",
            kshape[3]
        )));
    }
    let geom = WindowGeom::new([kshape[0], kshape[1], kshape[2]], spec.stride, spec.padding, in_dims)?;

    let out = depthwise_forward(tape.value(input), tape.value(kernel), &geom, channels);
    Ok(tape.push(out, Box::new(DepthwiseRule { input, kernel, geom, channels })))
}

fn depthwise_forward<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    geom: &WindowGeom,
    channels: usize,
) -> Tensor<T> {
    let [oh, ow, os] = geom.out_dims;
    let [kh, kw, ks] = geom.kernel;
    let [_, iw, is_] = [geom.in_dims[0], geom.in_dims[1], geom.in_dims[2]];
    let x = input.data();
    let k = kernel.data();
    let mut out = vec![T::zero(); oh * ow * os * channels];
    for i in 0..oh {
        for j in 0..ow {
            for l in 0..os {
                let out_base = ((i * ow + j) * os + l) * channels;
                for m in 0..kh {
                    for n in 0..kw {
                        for z in 0..ks {
                            let [si, sj, sl] = geom.src([i, j, l], [m, n, z]);
                            let in_base = ((si * iw + sj) * is_ + sl) * channels;
                            let k_base = ((m * kw + n) * ks + z) * channels;
                            for c in 0..channels {
                                out[out_base + c] =
                                    out[out_base + c] + x[in_base + c] * k[k_base + c];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[oh, ow, os, channels], out).expect("sized above")
}

struct DepthwiseRule {
    input: ValueId,
    kernel: ValueId,
    geom: WindowGeom,
    channels: usize,
}

impl<T: Element> BackwardRule<T> for DepthwiseRule {
    fn backward(&self, _out: &Tensor<T>, g: &[T], values: &[Tensor<T>], sink: &mut GradSink<T>) {
        let geom = &self.geom;
        let c_n = self.channels;
        let [oh, ow, os] = geom.out_dims;
        let [kh, kw, ks] = geom.kernel;
        let iw = geom.in_dims[1];
        let is_ = geom.in_dims[2];
        let x = values[self.input.0].data();
        let k = values[self.kernel.0].data();
        let mut dx = vec![T::zero(); x.len()];
        let mut dk = vec![T::zero(); k.len()];
        for i in 0..oh {
            for j in 0..ow {
                for l in 0..os {
                    let out_base = ((i * ow + j) * os + l) * c_n;
                    for m in 0..kh {
                        for n in 0..kw {
                            for z in 0..ks {
                                let [si, sj, sl] = geom.src([i, j, l], [m, n, z]);
                                let in_base = ((si * iw + sj) * is_ + sl) * c_n;
                                let k_base = ((m * kw + n) * ks + z) * c_n;
                                for c in 0..c_n {
                                    let gv = g[out_base + c];
                                    dx[in_base + c] = dx[in_base + c] + gv * k[k_base + c];
                                    dk[k_base + c] = dk[k_base + c] + gv * x[in_base + c];
                                }
                            }
                        }
                    }
                }
            }
        }
        sink.add(self.input, dx);
        sink.add(self.kernel, dk);
    }
}

/// Per-location affine map over channels. The input may have any rank >= 1;
/// its last axis is the channel axis: `y = x W + b` with `W: [C_in, C_out]`
/// and `b: [C_out]`.
pub fn conv3d_pointwise<T: Element>(
    tape: &mut Tape<T>,
    input: ValueId,
    weight: ValueId,
    bias: ValueId,
) -> Result<ValueId> {
    let in_shape = tape.value(input).shape().to_vec();
    let c_in = *in_shape.last().unwrap();
    let wshape = tape.value(weight).shape().to_vec();
    if wshape.len() != 2 || wshape[0] != c_in {
        return Err(Error::ShapeMismatch(format!(
            "pointwise weight must be [{c_in}, C_out], got {wshape:?}"
        )));
    }
    let c_out = wshape[1];
    let bshape = tape.value(bias).shape().to_vec();
    if bshape != [c_out] {
        return Err(Error::ShapeMismatch(format!(
            "pointwise bias must be [{c_out}], got {bshape:?}"
        )));
    }

    let locations = tape.value(input).len() / c_in;
    let x = tape.value(input).data();
    let w = tape.value(weight).data();
    let b = tape.value(bias).data();
    let mut out = vec![T::zero(); locations * c_out];
    for p in 0..locations {
        let xb = p * c_in;
        let ob = p * c_out;
        for co in 0..c_out {
            out[ob + co] = b[co];
        }
        for ci in 0..c_in {
            let xv = x[xb + ci];
            let wb = ci * c_out;
            for co in 0..c_out {
                out[ob + co] = out[ob + co] + xv * w[wb + co];
            }
        }
    }
    let mut out_shape = in_shape.clone();
    *out_shape.last_mut().unwrap() = c_out;
    let out = Tensor::from_vec(&out_shape, out)?;
    Ok(tape.push(out, Box::new(PointwiseRule { input, weight, bias, c_in, c_out, locations })))
}

struct PointwiseRule {
    input: ValueId,
    weight: ValueId,
    bias: ValueId,
    c_in: usize,
    c_out: usize,
    locations: usize,
}

impl<T: Element> BackwardRule<T> for PointwiseRule {
    fn backward(&self, _out: &Tensor<T>, g: &[T], values: &[Tensor<T>], sink: &mut GradSink<T>) {
        let x = values[self.input.0].data();
        let w = values[self.weight.0].data();
        let (c_in, c_out) = (self.c_in, self.c_out);
        let mut dx = vec![T::zero(); x.len()];
        let mut dw = vec![T::zero(); w.len()];
        let mut db = vec![T::zero(); c_out];
        for p in 0..self.locations {
            let xb = p * c_in;
            let ob = p * c_out;
            for co in 0..c_out {
                db[co] = db[co] + g[ob + co];
            }
            for ci in 0..c_in {
                let wb = ci * c_out;
                let mut acc = T::zero();
                for co in 0..c_out {
                    let gv = g[ob + co];
                    acc = acc + gv * w[wb + co];
                    dw[wb + co] = dw[wb + co] + gv * x[xb + ci];
                }
                dx[xb + ci] = dx[xb + ci] + acc;
            }
        }
        sink.add(self.input, dx);
        sink.add(self.weight, dw);
        sink.add(self.bias, db);
    }
}
