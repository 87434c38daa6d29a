//! Global self-attention over a flattened feature map.
//!
//! Reference operator: used for oracle tests and MACs comparison, not inside
//! the trained network. The map `[H,W,S,C]` flattens to `N x C` tokens with
//! `N = H*W*S`; `O = softmax(Q K^T / sqrt(d_k)) V` reshapes back, with
//! `d_k = C` (single head).

use crate::error::{Error, Result};
use crate::ops::feature_dims;
use crate::tensor::tape::{BackwardRule, GradSink};
use crate::tensor::{elem, Element, Tape, Tensor, ValueId};

/// Learned projections, each `[C, C]`.
#[derive(Clone, Copy, Debug)]
pub struct AttnProj {
    pub wq: ValueId,
    pub wk: ValueId,
    pub wv: ValueId,
}

pub fn self_attention_global<T: Element>(
    tape: &mut Tape<T>,
    input: ValueId,
    proj: &AttnProj,
) -> Result<ValueId> {
    let x = tape.value(input);
    let (dims, c) = feature_dims(x)?;
    for (id, name) in [(proj.wq, "W_Q"), (proj.wk, "W_K"), (proj.wv, "W_V")] {
        if tape.value(id).shape() != [c, c] {
            return Err(Error::ShapeMismatch(format!(
                "{name} must be [{c}, {c}], got {:?}",
                tape.value(id).shape()
            )));
        }
    }
    let n = dims[0] * dims[1] * dims[2];
    let xd = x.data();
    let q = matmul(xd, tape.value(proj.wq).data(), n, c, c);
    let k = matmul(xd, tape.value(proj.wk).data(), n, c, c);
    let v = matmul(xd, tape.value(proj.wv).data(), n, c, c);
    let scale = T::one() / elem::<T>(c as f64).sqrt();

    // Attention rows: softmax(Q K^T * scale), stabilized per row.
    let mut attn = vec![T::zero(); n * n];
    for i in 0..n {
        let mut mx = T::neg_infinity();
        for j in 0..n {
            let mut dot = T::zero();
            for d in 0..c {
                dot = dot + q[i * c + d] * k[j * c + d];
            }
            let s = dot * scale;
            if !s.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite attention score at row {i}, col {j}"
                )));
            }
            attn[i * n + j] = s;
            if s > mx {
                mx = s;
            }
        }
        let mut norm = T::zero();
        for j in 0..n {
            let e = (attn[i * n + j] - mx).exp();
            attn[i * n + j] = e;
            norm = norm + e;
        }
        for j in 0..n {
            attn[i * n + j] = attn[i * n + j] / norm;
        }
    }

    let out = matmul(&attn, &v, n, n, c);
    let out = Tensor::from_vec(x.shape(), out)?;
    Ok(tape.push(out, Box::new(AttnRule { input, proj: *proj, n, c, q, k, v, attn })))
}

/// `a: [m x k]`, `b: [k x n]` -> `[m x n]`, all row-major slices.
fn matmul<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            let bb = p * n;
            for j in 0..n {
                out[i * n + j] = out[i * n + j] + av * b[bb + j];
            }
        }
    }
    out
}

/// `a^T b` where `a: [k x m]`, `b: [k x n]` -> `[m x n]`.
fn matmul_tn<T: Element>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for p in 0..k {
        for i in 0..m {
            let av = a[p * m + i];
            let bb = p * n;
            for j in 0..n {
                out[i * n + j] = out[i * n + j] + av * b[bb + j];
            }
        }
    }
    out
}

/// `a b^T` where `a: [m x k]`, `b: [n x k]` -> `[m x n]`.
fn matmul_nt<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = T::zero();
            for p in 0..k {
                acc = acc + a[i * k + p] * b[j * k + p];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

struct AttnRule<T> {
    input: ValueId,
    proj: AttnProj,
    n: usize,
    c: usize,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    attn: Vec<T>,
}

impl<T: Element> BackwardRule<T> for AttnRule<T> {
    fn backward(&self, _out: &Tensor<T>, g: &[T], values: &[Tensor<T>], sink: &mut GradSink<T>) {
        let (n, c) = (self.n, self.c);
        let scale = T::one() / elem::<T>(c as f64).sqrt();
        // dV = A^T g ; dA = g V^T
        let dv = matmul_tn(&self.attn, g, n, n, c);
        let da = matmul_nt(g, &self.v, n, c, n);
        // Row softmax backward: dS_ij = A_ij (dA_ij - sum_j A_ij dA_ij)
        let mut ds = vec![T::zero(); n * n];
        for i in 0..n {
            let mut dot = T::zero();
            for j in 0..n {
                dot = dot + self.attn[i * n + j] * da[i * n + j];
            }
            for j in 0..n {
                ds[i * n + j] = self.attn[i * n + j] * (da[i * n + j] - dot) * scale;
            }
        }
        // dQ = dS K ; dK = dS^T Q
        let dq = matmul(&ds, &self.k, n, n, c);
        let dk = matmul_tn(&ds, &self.q, n, n, c);

        let x = values[self.input.0].data();
        let wq = values[self.proj.wq.0].data();
        let wk = values[self.proj.wk.0].data();
        let wv = values[self.proj.wv.0].data();
        // dX = dQ Wq^T + dK Wk^T + dV Wv^T
        let mut dx = matmul_nt(&dq, wq, n, c, c);
        for (acc, v) in dx.iter_mut().zip(matmul_nt(&dk, wk, n, c, c)) {
            *acc = *acc + v;
        }
        for (acc, v) in dx.iter_mut().zip(matmul_nt(&dv, wv, n, c, c)) {
            *acc = *acc + v;
        }
        sink.add(self.input, dx);
        sink.add(self.proj.wq, matmul_tn(x, &dq, n, c, c));
        sink.add(self.proj.wk, matmul_tn(x, &dk, n, c, c));
        sink.add(self.proj.wv, matmul_tn(x, &dv, n, c, c));
    }
}
