//! 3D relational convolution: a sliding window whose output is an
//! attention-weighted sum of value projections, with the window's center
//! pixel supplying the query.
//!
//! For output location `(i,j,l)` and channel `c`, with `q = x_center W_Q`,
//! `k_w = x_w W_K`, `v_w = x_w W_V` over window taps `w`:
//!
//! ```text
//! weight(w,c) = exp(-(q_c + k_{w,c})) / Norm_c
//! Norm_c      = sum_w exp(-(q_c + k_{w,c}))
//! O(i,j,l,c)  = sum_w weight(w,c) * v_{w,c}
//! ```
//!
//! Weights are strictly positive and sum to one over the window. The
//! exponents are stabilized by subtracting the per-channel maximum before
//! exponentiation, which leaves the normalized weights unchanged. Because
//! the query enters every tap of a window identically, the normalization
//! cancels it exactly; it is still computed as written.
//!
//! The default mode runs one softmax per channel. `Shared { heads }`
//! instead sums exponents over each group of `C / heads` channels, giving
//! one weight per window tap per head.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{feature_dims, Padding, WindowGeom};
use crate::tensor::tape::{BackwardRule, GradSink};
use crate::tensor::{Element, Tape, Tensor, ValueId};

/// How window weights relate to channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum WeightMode {
    /// Each channel runs its own window softmax (the default).
    PerChannel,
    /// Exponents are summed over channel groups; all channels of a group
    /// share one weight per tap. `heads` must divide the channel count.
    Shared { heads: usize },
}

/// Window geometry and weighting mode; the projection matrices travel
/// separately as tape values.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RelConvSpec {
    pub window: [usize; 3],
    pub stride: [usize; 3],
    pub padding: Padding,
    pub weight_mode: WeightMode,
}

impl Default for RelConvSpec {
    fn default() -> Self {
        RelConvSpec {
            window: [3, 3, 3],
            stride: [1, 1, 1],
            padding: Padding::Same,
            weight_mode: WeightMode::PerChannel,
        }
    }
}

/// Learned pointwise query/key/value projections, each `[C, C]`.
#[derive(Clone, Copy, Debug)]
pub struct RelConvProj {
    pub wq: ValueId,
    pub wk: ValueId,
    pub wv: ValueId,
}

/// Records a relational convolution on the tape. `proj: None` uses the raw
/// features as query, key, and value.
pub fn relconv3d<T: Element>(
    tape: &mut Tape<T>,
    input: ValueId,
    proj: Option<&RelConvProj>,
    spec: &RelConvSpec,
) -> Result<ValueId> {
    let x = tape.value(input);
    let proj_vals = match proj {
        Some(p) => {
            validate_projections(x, tape.value(p.wq), tape.value(p.wk), tape.value(p.wv))?;
            Some((
                tape.value(p.wq).data().to_vec(),
                tape.value(p.wk).data().to_vec(),
                tape.value(p.wv).data().to_vec(),
            ))
        }
        None => None,
    };
    let fwd = forward_core(x, proj_vals.as_ref().map(|(q, k, v)| (&q[..], &k[..], &v[..])), spec)?;
    let ForwardCore { output, weights, vmap, geom, channels, groups } = fwd;
    let rule = RelConvRule {
        input,
        proj: proj.copied(),
        geom,
        channels,
        groups,
        weights,
        vmap,
    };
    Ok(tape.push(output, Box::new(rule)))
}

/// Forward pass that also exposes the dynamic window weights, for
/// verification and kernel visualization.
pub struct RelConvInspection<T: Element> {
    pub output: Tensor<T>,
    pub out_dims: [usize; 3],
    pub window: [usize; 3],
    /// Weight groups per tap: the channel count in per-channel mode,
    /// otherwise the head count.
    pub groups: usize,
    /// Row-major `[out_location][tap][group]` window weights.
    pub weights: Vec<T>,
}

impl<T: Element> RelConvInspection<T> {
    /// Window weights of one output location and group, tap-major.
    pub fn weights_at(&self, loc: usize, group: usize) -> Vec<T> {
        let taps = self.window[0] * self.window[1] * self.window[2];
        (0..taps)
            .map(|w| self.weights[(loc * taps + w) * self.groups + group])
            .collect()
    }
}

pub fn relconv3d_inspect<T: Element>(
    input: &Tensor<T>,
    proj: Option<(&Tensor<T>, &Tensor<T>, &Tensor<T>)>,
    spec: &RelConvSpec,
) -> Result<RelConvInspection<T>> {
    let proj_slices = match proj {
        Some((wq, wk, wv)) => {
            validate_projections(input, wq, wk, wv)?;
            Some((wq.data(), wk.data(), wv.data()))
        }
        None => None,
    };
    let fwd = forward_core(input, proj_slices, spec)?;
    Ok(RelConvInspection {
        output: fwd.output,
        out_dims: fwd.geom.out_dims,
        window: fwd.geom.kernel,
        groups: fwd.groups,
        weights: fwd.weights,
    })
}

fn validate_projections<T: Element>(
    x: &Tensor<T>,
    wq: &Tensor<T>,
    wk: &Tensor<T>,
    wv: &Tensor<T>,
) -> Result<()> {
    let (_, c) = feature_dims(x)?;
    for (w, name) in [(wq, "W_Q"), (wk, "W_K"), (wv, "W_V")] {
        if w.shape() != [c, c] {
            return Err(Error::ShapeMismatch(format!(
                "{name} must be square [{c}, {c}], got {:?}",
                w.shape()
            )));
        }
    }
    Ok(())
}

struct ForwardCore<T: Element> {
    output: Tensor<T>,
    /// `[out_location][tap][group]`
    weights: Vec<T>,
    /// Projected values at every input location, `None` when the raw
    /// features serve as values.
    vmap: Option<Vec<T>>,
    geom: WindowGeom,
    channels: usize,
    groups: usize,
}

fn forward_core<T: Element>(
    x: &Tensor<T>,
    proj: Option<(&[T], &[T], &[T])>,
    spec: &RelConvSpec,
) -> Result<ForwardCore<T>> {
    let (in_dims, channels) = feature_dims(x)?;
    for &k in &spec.window {
        if k % 2 == 0 {
            return Err(Error::InvalidArg(format!(
                "window extents must be odd so a center pixel exists, got {:?}",
                spec.window
            )));
        }
    }
    let groups = match spec.weight_mode {
        WeightMode::PerChannel => channels,
        WeightMode::Shared { heads } => {
            if heads == 0 || channels % heads != 0 {
                return Err(Error::InvalidArg(format!(
                    "heads {heads} must divide channel count {channels}"
                )));
            }
            heads
        }
    };
    let gs = channels / groups;
    let geom = WindowGeom::new(spec.window, spec.stride, spec.padding, in_dims)?;

    let xd = x.data();
    let n_in = in_dims[0] * in_dims[1] * in_dims[2];
    let (qmap, kmap, vmap) = match proj {
        Some((wq, wk, wv)) => (
            Some(project(xd, wq, n_in, channels)),
            Some(project(xd, wk, n_in, channels)),
            Some(project(xd, wv, n_in, channels)),
        ),
        None => (None, None, None),
    };
    let q = qmap.as_deref().unwrap_or(xd);
    let k = kmap.as_deref().unwrap_or(xd);
    let v = vmap.as_deref().unwrap_or(xd);

    let [kh, kw, ks] = geom.kernel;
    let taps = kh * kw * ks;
    let p_out = geom.out_len();
    let mut out = vec![T::zero(); p_out * channels];
    let mut weights = vec![T::zero(); p_out * taps * groups];
    let mut srcs = vec![0usize; taps];
    let mut exps = vec![T::zero(); taps];

    let [oh, ow, os] = geom.out_dims;
    for i in 0..oh {
        for j in 0..ow {
            for l in 0..os {
                let p = (i * ow + j) * os + l;
                let center = center_location(&geom, [i, j, l], in_dims);
                let mut t = 0;
                for m in 0..kh {
                    for n in 0..kw {
                        for z in 0..ks {
                            let [si, sj, sl] = geom.src([i, j, l], [m, n, z]);
                            srcs[t] = (si * in_dims[1] + sj) * in_dims[2] + sl;
                            t += 1;
                        }
                    }
                }
                for g in 0..groups {
                    let c0 = g * gs;
                    // Exponent -(q + k), summed over the group's channels.
                    let mut q_sum = T::zero();
                    for c in c0..c0 + gs {
                        q_sum = q_sum + q[center * channels + c];
                    }
                    let mut mx = T::neg_infinity();
                    for (t, &s) in srcs.iter().enumerate() {
                        let mut k_sum = T::zero();
                        for c in c0..c0 + gs {
                            k_sum = k_sum + k[s * channels + c];
                        }
                        let e = -(q_sum + k_sum);
                        exps[t] = e;
                        if e > mx {
                            mx = e;
                        }
                    }
                    let mut norm = T::zero();
                    for e in exps.iter_mut() {
                        *e = (*e - mx).exp();
                        norm = norm + *e;
                    }
                    for (t, &s) in srcs.iter().enumerate() {
                        let a = exps[t] / norm;
                        weights[(p * taps + t) * groups + g] = a;
                        for c in c0..c0 + gs {
                            out[p * channels + c] =
                                out[p * channels + c] + a * v[s * channels + c];
                        }
                    }
                }
            }
        }
    }
    let output = Tensor::from_vec(
        &[geom.out_dims[0], geom.out_dims[1], geom.out_dims[2], channels],
        out,
    )?;
    Ok(ForwardCore { output, weights, vmap, geom, channels, groups })
}

/// Flat input index of the window center for one output location.
#[inline]
fn center_location(geom: &WindowGeom, out: [usize; 3], in_dims: [usize; 3]) -> usize {
    let (ci, cj, cl) = match geom.padding {
        Padding::Same => (
            out[0] * geom.stride[0],
            out[1] * geom.stride[1],
            out[2] * geom.stride[2],
        ),
        Padding::Valid => (
            out[0] * geom.stride[0] + geom.kernel[0] / 2,
            out[1] * geom.stride[1] + geom.kernel[1] / 2,
            out[2] * geom.stride[2] + geom.kernel[2] / 2,
        ),
    };
    (ci * in_dims[1] + cj) * in_dims[2] + cl
}

fn project<T: Element>(x: &[T], w: &[T], n: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * c];
    for p in 0..n {
        let xb = p * c;
        for ci in 0..c {
            let xv = x[xb + ci];
            let wb = ci * c;
            for co in 0..c {
                out[xb + co] = out[xb + co] + xv * w[wb + co];
            }
        }
    }
    out
}

struct RelConvRule<T: Element> {
    input: ValueId,
    proj: Option<RelConvProj>,
    geom: WindowGeom,
    channels: usize,
    groups: usize,
    /// `[out_location][tap][group]`, saved by the forward pass.
    weights: Vec<T>,
    /// Projected values, `None` when projections are disabled.
    vmap: Option<Vec<T>>,
}

impl<T: Element> BackwardRule<T> for RelConvRule<T> {
    fn backward(&self, out: &Tensor<T>, g: &[T], values: &[Tensor<T>], sink: &mut GradSink<T>) {
        let geom = &self.geom;
        let channels = self.channels;
        let groups = self.groups;
        let gs = channels / groups;
        let [kh, kw, ks] = geom.kernel;
        let taps = kh * kw * ks;
        let in_dims = geom.in_dims;
        let n_in = in_dims[0] * in_dims[1] * in_dims[2];

        let x = values[self.input.0].data();
        let v = self.vmap.as_deref().unwrap_or(x);
        let _ = out;

        // Gradients w.r.t. the projected key/value maps. The query map's
        // gradient is identically zero: the query shifts all exponents of a
        // window equally, so the normalized weights do not depend on it.
        let mut dk_map = vec![T::zero(); n_in * channels];
        let mut dv_map = vec![T::zero(); n_in * channels];

        let [oh, ow, os] = geom.out_dims;
        let mut srcs = vec![0usize; taps];
        let mut s_dot = vec![T::zero(); taps];
        for i in 0..oh {
            for j in 0..ow {
                for l in 0..os {
                    let p = (i * ow + j) * os + l;
                    let mut t = 0;
                    for m in 0..kh {
                        for n in 0..kw {
                            for z in 0..ks {
                                let [si, sj, sl] = geom.src([i, j, l], [m, n, z]);
                                srcs[t] = (si * in_dims[1] + sj) * in_dims[2] + sl;
                                t += 1;
                            }
                        }
                    }
                    for grp in 0..groups {
                        let c0 = grp * gs;
                        // dL/da_w = sum_{c in group} g_c * v_{w,c}
                        let mut sum_as = T::zero();
                        for (t, &s) in srcs.iter().enumerate() {
                            let a = self.weights[(p * taps + t) * groups + grp];
                            let mut dot = T::zero();
                            for c in c0..c0 + gs {
                                dot = dot + g[p * channels + c] * v[s * channels + c];
                            }
                            s_dot[t] = dot;
                            sum_as = sum_as + a * dot;
                        }
                        for (t, &s) in srcs.iter().enumerate() {
                            let a = self.weights[(p * taps + t) * groups + grp];
                            // Softmax backward, then d e_w / d k_{w,c} = -1.
                            let de = a * (s_dot[t] - sum_as);
                            for c in c0..c0 + gs {
                                dk_map[s * channels + c] = dk_map[s * channels + c] - de;
                                dv_map[s * channels + c] =
                                    dv_map[s * channels + c] + g[p * channels + c] * a;
                            }
                        }
                    }
                }
            }
        }

        match &self.proj {
            Some(proj) => {
                let wk = values[proj.wk.0].data();
                let wv = values[proj.wv.0].data();
                let mut dx = vec![T::zero(); n_in * channels];
                let mut dwk = vec![T::zero(); channels * channels];
                let mut dwv = vec![T::zero(); channels * channels];
                for p in 0..n_in {
                    let b = p * channels;
                    for ci in 0..channels {
                        let xv = x[b + ci];
                        let wb = ci * channels;
                        let mut acc = T::zero();
                        for co in 0..channels {
                            let gk = dk_map[b + co];
                            let gv = dv_map[b + co];
                            acc = acc + gk * wk[wb + co] + gv * wv[wb + co];
                            dwk[wb + co] = dwk[wb + co] + xv * gk;
                            dwv[wb + co] = dwv[wb + co] + xv * gv;
                        }
                        dx[b + ci] = dx[b + ci] + acc;
                    }
                }
                sink.add(self.input, dx);
                sink.add(proj.wk, dwk);
                sink.add(proj.wv, dwv);
                // W_Q receives an exact zero gradient; the tape zero-fills
                // trainable tensors no contribution reaches.
            }
            None => {
                for (dk, dv) in dk_map.iter_mut().zip(&dv_map) {
                    *dk = *dk + *dv;
                }
                sink.add(self.input, dk_map);
            }
        }
    }
}
