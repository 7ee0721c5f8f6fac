use crate::error::{shape_err, Result};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::{Scalar, Tensor};

/// out[m,n] += Σ_k A[m,k]·B[k,n] with optional transposes of the stored operands.
///
/// `a` is stored as [m,k] (or [k,m] when `ta`), `b` as [k,n] (or [n,k] when `tb`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
) {
    let at = |i: usize, p: usize| if ta { a[p * m + i] } else { a[i * k + p] };
    if !tb {
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = at(i, p);
                if av == T::zero() {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    } else {
        for i in 0..m {
            for j in 0..n {
                let brow = &b[j * k..(j + 1) * k];
                let mut s = T::zero();
                for (p, &bv) in brow.iter().enumerate() {
                    s += at(i, p) * bv;
                }
                out[i * n + j] += s;
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// y[...,j] = Σ_i x[...,i]·W[i,j] + b[j]
    pub fn linear(&self, x: &Var<T>, w: &Var<T>, b: Option<&Var<T>>) -> Result<Var<T>> {
        let (xd, wd) = (x.dims(), w.dims());
        if wd.len() != 2 || xd.is_empty() || *xd.last().unwrap() != wd[0] {
            return shape_err(format!("linear: input {xd:?} incompatible with weight {wd:?}"));
        }
        let (cin, cout) = (wd[0], wd[1]);
        if let Some(b) = b {
            if b.dims() != [cout] {
                return shape_err(format!("linear: bias {:?} for weight {wd:?}", b.dims()));
            }
        }
        let rows = x.value().len() / cin;
        let mut out_dims = xd.to_vec();
        *out_dims.last_mut().unwrap() = cout;
        let mut out = vec![T::zero(); rows * cout];
        if let Some(b) = b {
            for r in 0..rows {
                out[r * cout..(r + 1) * cout].copy_from_slice(b.value().data());
            }
        }
        gemm(x.value().data(), w.value().data(), &mut out, rows, cin, cout, false, false);

        let (xv, wv) = (x.rc(), w.rc());
        let out = Tensor::from_vec(&out_dims, out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.record(
            "linear",
            &inputs,
            out,
            Box::new(move |g, needs| {
                let gx = needs[0].then(|| {
                    let mut d = vec![T::zero(); rows * cin];
                    gemm(g.data(), wv.data(), &mut d, rows, cout, cin, false, true);
                    Tensor::from_vec(xv.dims(), d)
                });
                let gw = needs[1].then(|| {
                    let mut d = vec![T::zero(); cin * cout];
                    gemm(xv.data(), g.data(), &mut d, cin, rows, cout, true, false);
                    Tensor::from_vec(&[cin, cout], d)
                });
                let mut res = vec![gx, gw];
                if needs.len() == 3 {
                    res.push(needs[2].then(|| {
                        let mut d = vec![T::zero(); cout];
                        for r in g.data().chunks(cout) {
                            for (a, &v) in d.iter_mut().zip(r) {
                                *a += v;
                            }
                        }
                        Tensor::from_vec(&[cout], d)
                    }));
                }
                res
            }),
        ))
    }

    /// Batched matmul over all leading axes: [..., M, K] × [..., K, N] → [..., M, N].
    /// With `transpose_b`, `b` is stored as [..., N, K].
    pub fn bmm(&self, a: &Var<T>, b: &Var<T>, transpose_b: bool) -> Result<Var<T>> {
        let (ad, bd) = (a.dims().to_vec(), b.dims().to_vec());
        let nd = ad.len();
        if nd < 2 || bd.len() != nd || ad[..nd - 2] != bd[..nd - 2] {
            return shape_err(format!("bmm: incompatible {ad:?} and {bd:?}"));
        }
        let (m, k) = (ad[nd - 2], ad[nd - 1]);
        let (kb, n) = if transpose_b { (bd[nd - 1], bd[nd - 2]) } else { (bd[nd - 2], bd[nd - 1]) };
        if k != kb {
            return shape_err(format!("bmm: inner dims differ in {ad:?} and {bd:?}"));
        }
        let batch: usize = ad[..nd - 2].iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            gemm(
                &a.value().data()[bi * m * k..(bi + 1) * m * k],
                &b.value().data()[bi * k * n..(bi + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
                false,
                transpose_b,
            );
        }
        let mut od = ad[..nd - 2].to_vec();
        od.extend([m, n]);
        let (av, bv) = (a.rc(), b.rc());
        Ok(self.record(
            "bmm",
            &[a, b],
            Tensor::from_vec(&od, out),
            Box::new(move |g, needs| {
                let ga = needs[0].then(|| {
                    let mut d = vec![T::zero(); batch * m * k];
                    for bi in 0..batch {
                        let gs = &g.data()[bi * m * n..(bi + 1) * m * n];
                        let bs = &bv.data()[bi * k * n..(bi + 1) * k * n];
                        // dA = G·Bᵀ  (B stored [k,n]) or G·B (B stored [n,k])
                        gemm(gs, bs, &mut d[bi * m * k..(bi + 1) * m * k], m, n, k, false, !transpose_b);
                    }
                    Tensor::from_vec(av.dims(), d)
                });
                let gb = needs[1].then(|| {
                    let mut d = vec![T::zero(); batch * k * n];
                    for bi in 0..batch {
                        let gs = &g.data()[bi * m * n..(bi + 1) * m * n];
                        let as_ = &av.data()[bi * m * k..(bi + 1) * m * k];
                        let dst = &mut d[bi * k * n..(bi + 1) * k * n];
                        if transpose_b {
                            // dB[n,k] = Gᵀ·A
                            gemm(gs, as_, dst, n, m, k, true, false);
                        } else {
                            // dB[k,n] = Aᵀ·G
                            gemm(as_, gs, dst, k, m, n, true, false);
                        }
                    }
                    Tensor::from_vec(bv.dims(), d)
                });
                vec![ga, gb]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_affine_shift() {
        let tape = Tape::<f64>::inference();
        let x = tape.constant(Tensor::from_vec(&[2], vec![1.0, 2.0]));
        let w = tape.constant(Tensor::eye(2));
        let y = tape.linear(&x, &w, None).unwrap();
        assert_eq!(y.value().data(), &[1.0, 2.0]);
        let b = tape.constant(Tensor::from_vec(&[2], vec![1.0, 1.0]));
        let y = tape.linear(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.value().data(), &[2.0, 3.0]);
    }

    #[test]
    fn shape_error_names_both_shapes() {
        let tape = Tape::<f32>::inference();
        let x = tape.constant(Tensor::zeros(&[4, 3]));
        let w = tape.constant(Tensor::zeros(&[2, 5]));
        let msg = tape.linear(&x, &w, None).unwrap_err().to_string();
        assert!(msg.contains("[4, 3]") && msg.contains("[2, 5]"), "{msg}");
    }

    #[test]
    fn hand_jacobian_of_sum_wx() {
        // loss = Σ_j (x·W)_j  →  dW[i,j] = x[i]
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_vec(&[1, 3], vec![1.0, -2.0, 0.5]));
        let w = tape.leaf(Tensor::from_fn(&[3, 2], |i| i as f64));
        let loss = tape.sum(&tape.linear(&x, &w, None).unwrap());
        let g = tape.backward(&loss).unwrap().wrt(&w);
        assert_eq!(g.data(), &[1.0, 1.0, -2.0, -2.0, 0.5, 0.5]);
    }
}
