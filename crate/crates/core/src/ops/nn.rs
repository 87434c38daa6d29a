//! Activation, normalization, pooling, and the classification loss.

use crate::error::{Error, Result};
use crate::ops::feature_dims;
use crate::tensor::tape::{BackwardRule, GradSink};
use crate::tensor::{elem, Element, Tape, Tensor, ValueId};

/// Smooth ramp activation `x * sigmoid(x)`.
pub fn silu<T: Element>(tape: &mut Tape<T>, input: ValueId) -> ValueId {
    let x = tape.value(input);
    let data: Vec<T> = x.data().iter().map(|&v| v * sigmoid(v)).collect();
    let out = Tensor::from_vec(x.shape(), data).expect("same shape");
    tape.push(out, Box::new(SiluRule { input }))
}

#[inline]
fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

struct SiluRule {
    input: ValueId,
}

impl<T: Element> BackwardRule<T> for SiluRule {
    fn backward(&self, _out: &Tensor<T>, g: &[T], values: &[Tensor<T>], sink: &mut GradSink<T>) {
        let x = values[self.input.0].data();
        let dx = g
            .iter()
            .zip(x)
            .map(|(&gv, &xv)| {
                let s = sigmoid(xv);
                gv * s * (T::one() + xv * (T::one() - s))
            })
            .collect();
        sink.add(self.input, dx);
    }
}

/// Pre-normalization over the spatial-spectral extent: each channel of a
/// `[H, W, S, C]` map is standardized to mean 0 / population variance 1 over
/// its `H*W*S` locations, then scaled and shifted by the learned `[C]`
/// parameters.
pub fn channel_norm<T: Element>(
    tape: &mut Tape<T>,
    input: ValueId,
    scale: ValueId,
    shift: ValueId,
) -> Result<ValueId> {
    let (dims, c_n) = feature_dims(tape.value(input))?;
    for (id, what) in [(scale, "scale"), (shift, "shift")] {
        if tape.value(id).shape() != [c_n] {
            return Err(Error::ShapeMismatch(format!(
                "norm {what} must be [{c_n}], got {:?}",
                tape.value(id).shape()
            )));
        }
    }
    let locations = dims[0] * dims[1] * dims[2];
    let x = tape.value(input).data();
    let inv_n = T::one() / elem::<T>(locations as f64);
    let eps = elem::<T>(1e-5);

    let mut mean = vec![T::zero(); c_n];
    for p in 0..locations {
        for c in 0..c_n {
            mean[c] = mean[c] + x[p * c_n + c];
        }
    }
    for m in mean.iter_mut() {
        *m = *m * inv_n;
    }
    let mut inv_std = vec![T::zero(); c_n];
    for p in 0..locations {
        for c in 0..c_n {
            let d = x[p * c_n + c] - mean[c];
            inv_std[c] = inv_std[c] + d * d;
        }
    }
    for v in inv_std.iter_mut() {
        *v = T::one() / (*v * inv_n + eps).sqrt();
    }

    let sc = tape.value(scale).data();
    let sh = tape.value(shift).data();
    let mut out = vec![T::zero(); x.len()];
    for p in 0..locations {
        for c in 0..c_n {
            let xhat = (x[p * c_n + c] - mean[c]) * inv_std[c];
            out[p * c_n + c] = sc[c] * xhat + sh[c];
        }
    }
    let out = Tensor::from_vec(tape.value(input).shape(), out)?;
    Ok(tape.push(
        out,
        Box::new(ChannelNormRule { input, scale, shift, mean, inv_std, locations, c_n }),
    ))
}

struct ChannelNormRule<T> {
    input: ValueId,
    scale: ValueId,
    shift: ValueId,
    mean: Vec<T>,
    inv_std: Vec<T>,
    locations: usize,
    c_n: usize,
}

impl<T: Element> BackwardRule<T> for ChannelNormRule<T> {
    fn backward(&self, _out: &Tensor<T>, g: &[T], values: &[Tensor<T>], sink: &mut GradSink<T>) {
        let x = values[self.input.0].data();
        let sc = values[self.scale.0].data();
        let (n, c_n) = (self.locations, self.c_n);
        let inv_n = T::one() / elem::<T>(n as f64);

        let mut dscale = vec![T::zero(); c_n];
        let mut dshift = vec![T::zero(); c_n];
        // Per-channel sums of dxhat and dxhat * xhat.
        let mut sum_dxh = vec![T::zero(); c_n];
        let mut sum_dxh_xh = vec![T::zero(); c_n];
        for p in 0..n {
            for c in 0..c_n {
                let xhat = (x[p * c_n + c] - self.mean[c]) * self.inv_std[c];
                let gv = g[p * c_n + c];
                dscale[c] = dscale[c] + gv * xhat;
                dshift[c] = dshift[c] + gv;
                let dxh = gv * sc[c];
                sum_dxh[c] = sum_dxh[c] + dxh;
                sum_dxh_xh[c] = sum_dxh_xh[c] + dxh * xhat;
            }
        }
        let mut dx = vec![T::zero(); x.len()];
        for p in 0..n {
            for c in 0..c_n {
                let xhat = (x[p * c_n + c] - self.mean[c]) * self.inv_std[c];
                let dxh = g[p * c_n + c] * sc[c];
                dx[p * c_n + c] = self.inv_std[c]
                    * (dxh - sum_dxh[c] * inv_n - xhat * sum_dxh_xh[c] * inv_n);
            }
        }
        sink.add(self.input, dx);
        sink.add(self.scale, dscale);
        sink.add(self.shift, dshift);
    }
}

/// Mean over all `H*W*S` locations per channel: `[H,W,S,C] -> [C]`.
pub fn global_avg_pool<T: Element>(tape: &mut Tape<T>, input: ValueId) -> Result<ValueId> {
    let (dims, c_n) = feature_dims(tape.value(input))?;
    let locations = dims[0] * dims[1] * dims[2];
    let inv_n = T::one() / elem::<T>(locations as f64);
    let x = tape.value(input).data();
    let mut out = vec![T::zero(); c_n];
    for p in 0..locations {
        for c in 0..c_n {
            out[c] = out[c] + x[p * c_n + c];
        }
    }
    for v in out.iter_mut() {
        *v = *v * inv_n;
    }
    let out = Tensor::from_vec(&[c_n], out)?;
    Ok(tape.push(out, Box::new(GapRule { input, locations, c_n })))
}

struct GapRule {
    input: ValueId,
    locations: usize,
    c_n: usize,
}

impl<T: Element> BackwardRule<T> for GapRule {
    fn backward(&self, _out: &Tensor<T>, g: &[T], _values: &[Tensor<T>], sink: &mut GradSink<T>) {
        let inv_n = T::one() / elem::<T>(self.locations as f64);
        let mut dx = vec![T::zero(); self.locations * self.c_n];
        for p in 0..self.locations {
            for c in 0..self.c_n {
                dx[p * self.c_n + c] = g[c] * inv_n;
            }
        }
        sink.add(self.input, dx);
    }
}

/// Mean negative log-softmax of the true class over a batch of logits
/// `[B, K]`; labels are 1-based class indices. Stabilized by per-row max
/// subtraction.
pub fn softmax_cross_entropy<T: Element>(
    tape: &mut Tape<T>,
    logits: ValueId,
    labels: &[usize],
) -> Result<ValueId> {
    let shape = tape.value(logits).shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::ShapeMismatch(format!("logits must be [B,K], got {shape:?}")));
    }
    let (b_n, k_n) = (shape[0], shape[1]);
    if labels.len() != b_n {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for batch of {b_n}",
            labels.len()
        )));
    }
    for &l in labels {
        if l == 0 || l > k_n {
            return Err(Error::InvalidArg(format!("label {l} outside 1..={k_n}")));
        }
    }

    let x = tape.value(logits).data();
    let mut probs = vec![T::zero(); b_n * k_n];
    let mut loss = T::zero();
    for r in 0..b_n {
        let row = &x[r * k_n..(r + 1) * k_n];
        let mut mx = row[0];
        for &v in row {
            if v > mx {
                mx = v;
            }
        }
        let mut denom = T::zero();
        for (k, &v) in row.iter().enumerate() {
            let e = (v - mx).exp();
            probs[r * k_n + k] = e;
            denom = denom + e;
        }
        for k in 0..k_n {
            probs[r * k_n + k] = probs[r * k_n + k] / denom;
        }
        let true_k = labels[r] - 1;
        loss = loss - ((row[true_k] - mx) - denom.ln());
    }
    loss = loss / elem::<T>(b_n as f64);
    Ok(tape.push(
        Tensor::scalar(loss),
        Box::new(CrossEntropyRule { logits, labels: labels.to_vec(), probs, b_n, k_n }),
    ))
}

struct CrossEntropyRule<T> {
    logits: ValueId,
    labels: Vec<usize>,
    probs: Vec<T>,
    b_n: usize,
    k_n: usize,
}

impl<T: Element> BackwardRule<T> for CrossEntropyRule<T> {
    fn backward(&self, _out: &Tensor<T>, g: &[T], _values: &[Tensor<T>], sink: &mut GradSink<T>) {
        let scale = g[0] / elem::<T>(self.b_n as f64);
        let mut dx = vec![T::zero(); self.b_n * self.k_n];
        for r in 0..self.b_n {
            let true_k = self.labels[r] - 1;
            for k in 0..self.k_n {
                let p = self.probs[r * self.k_n + k];
                let y = if k == true_k { T::one() } else { T::zero() };
                dx[r * self.k_n + k] = (p - y) * scale;
            }
        }
        sink.add(self.logits, dx);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::grad_check;
    use crate::tensor::Fill;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::new(shape, Fill::Uniform { seed, lo: -1.0, hi: 1.0 }).unwrap()
    }

    #[test]
    fn gap_constant_input() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[2, 2, 2, 3], vec![4.5; 24]).unwrap());
        let y = global_avg_pool(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.5, 4.5, 4.5]);
    }

    #[test]
    fn gap_single_location_is_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = global_avg_pool(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn gap_matches_loop_mean() {
        let x = rand_t(&[3, 4, 2, 3], 31);
        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone());
        let y = global_avg_pool(&mut tape, xid).unwrap();
        for c in 0..3 {
            let mut acc = 0.0;
            for p in 0..24 {
                acc += x.data()[p * 3 + c];
            }
            assert!((tape.value(y).data()[c] - acc / 24.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ce_uniform_logits_is_ln_k() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::from_vec(&[1, 4], vec![0.3; 4]).unwrap());
        let loss = softmax_cross_entropy(&mut tape, logits, &[2]).unwrap();
        let v = tape.value(loss).scalar_value().unwrap();
        assert!((v - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_confident_correct_logit_tends_to_zero() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::from_vec(&[1, 3], vec![50.0, 0.0, 0.0]).unwrap());
        let loss = softmax_cross_entropy(&mut tape, logits, &[1]).unwrap();
        assert!(tape.value(loss).scalar_value().unwrap() < 1e-12);
    }

    #[test]
    fn ce_matches_direct_formula() {
        let x = rand_t(&[3, 5], 41);
        let labels = [2usize, 5, 1];
        let mut tape = Tape::new();
        let logits = tape.leaf(x.clone());
        let loss = softmax_cross_entropy(&mut tape, logits, &labels).unwrap();
        let mut want = 0.0;
        for r in 0..3 {
            let row = &x.data()[r * 5..(r + 1) * 5];
            let denom: f64 = row.iter().map(|v| v.exp()).sum();
            want -= (row[labels[r] - 1].exp() / denom).ln();
        }
        want /= 3.0;
        assert!((tape.value(loss).scalar_value().unwrap() - want).abs() < 1e-7);
    }

    #[test]
    fn ce_label_out_of_range() {
        let mut tape = Tape::<f32>::new();
        let logits = tape.leaf(Tensor::zeros(&[1, 3]).unwrap());
        assert!(softmax_cross_entropy(&mut tape, logits, &[0]).is_err());
        assert!(softmax_cross_entropy(&mut tape, logits, &[4]).is_err());
    }

    #[test]
    fn ce_grad_check() {
        let x = rand_t(&[2, 4], 43);
        let err = grad_check(
            |tape, xid| softmax_cross_entropy(tape, xid, &[3, 1]),
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "err {err}");
    }

    #[test]
    fn silu_grad_check() {
        let x = rand_t(&[8], 45);
        let err = grad_check(
            |tape, xid| {
                let y = silu(tape, xid);
                Ok(tape.sum_all(y))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "err {err}");
    }

    #[test]
    fn norm_standardizes_each_channel() {
        let x = rand_t(&[3, 3, 2, 4], 47);
        let mut tape = Tape::new();
        let xid = tape.leaf(x);
        let sc = tape.leaf(Tensor::from_vec(&[4], vec![1.0; 4]).unwrap());
        let sh = tape.leaf(Tensor::zeros(&[4]).unwrap());
        let y = channel_norm(&mut tape, xid, sc, sh).unwrap();
        let out = tape.value(y).data();
        for c in 0..4 {
            let vals: Vec<f64> = (0..18).map(|p| out[p * 4 + c]).collect();
            let mean: f64 = vals.iter().sum::<f64>() / 18.0;
            let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 18.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4); // epsilon skews variance slightly
        }
    }

    #[test]
    fn norm_grad_check() {
        let x = rand_t(&[2, 2, 2, 3], 49);
        let sc = rand_t(&[3], 50);
        let sh = rand_t(&[3], 51);
        let (scc, shc) = (sc.clone(), sh.clone());
        let err = grad_check(
            move |tape, xid| {
                let s = tape.leaf(scc.clone());
                let b = tape.leaf(shc.clone());
                let y = channel_norm(tape, xid, s, b)?;
                // Weight the output so gradients are not uniform.
                let w = tape.exp(y);
                Ok(tape.sum_all(w))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "input err {err}");
        let xc = x.clone();
        let err = grad_check(
            move |tape, sid| {
                let xid = tape.leaf(xc.clone());
                let b = tape.leaf(sh.clone());
                let y = channel_norm(tape, xid, sid, b)?;
                let w = tape.exp(y);
                Ok(tape.sum_all(w))
            },
            &sc,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "scale err {err}");
    }

    #[test]
    fn gap_grad_check() {
        let x = rand_t(&[2, 3, 2, 2], 53);
        let err = grad_check(
            |tape, xid| {
                let y = global_avg_pool(tape, xid)?;
                let e = tape.exp(y);
                Ok(tape.sum_all(e))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "err {err}");
    }
}
