use std::rc::Rc;

use crate::error::{shape_err, Result};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::{Scalar, Tensor};

pub const LAYERNORM_EPS: f64 = 1e-5;

impl<T: Scalar> Tape<T> {
    pub fn sum(&self, x: &Var<T>) -> Var<T> {
        let d = x.dims().to_vec();
        self.record(
            "sum",
            &[x],
            Tensor::scalar(x.value().sum()),
            Box::new(move |g, _| vec![Some(Tensor::full(&d, g.item()))]),
        )
    }

    pub fn mean(&self, x: &Var<T>) -> Var<T> {
        let n = T::of_usize(x.value().len().max(1));
        let s = self.sum(x);
        self.mul_scalar(&s, T::one() / n)
    }

    /// Softmax along the last axis with max subtraction.
    pub fn softmax(&self, x: &Var<T>) -> Result<Var<T>> {
        let n = *x.dims().last().unwrap_or(&0);
        if n == 0 {
            return shape_err(format!("softmax over empty axis of {:?}", x.dims()));
        }
        let mut out = x.value().data().to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        let y = Rc::new(Tensor::from_vec(x.dims(), out));
        let yv = Rc::clone(&y);
        Ok(self.record(
            "softmax",
            &[x],
            (*y).clone(),
            Box::new(move |g, _| {
                let mut gx = vec![T::zero(); g.len()];
                for ((gr, yr), dst) in g.data().chunks(n).zip(yv.data().chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for ((d, &gi), &yi) in dst.iter_mut().zip(gr).zip(yr) {
                        *d = yi * (gi - dot);
                    }
                }
                vec![Some(Tensor::from_vec(g.dims(), gx))]
            }),
        ))
    }

    /// Normalizes each token over the last axis, then applies gamma/beta.
    pub fn layernorm(&self, x: &Var<T>, gamma: &Var<T>, beta: &Var<T>, eps: f64) -> Result<Var<T>> {
        let c = *x.dims().last().unwrap_or(&0);
        if c == 0 || gamma.dims() != [c] || beta.dims() != [c] {
            return shape_err(format!(
                "layernorm: input {:?}, gamma {:?}, beta {:?}",
                x.dims(),
                gamma.dims(),
                beta.dims()
            ));
        }
        let eps = T::of(eps);
        let cn = T::of_usize(c);
        let rows = x.value().len() / c;
        let mut xhat = vec![T::zero(); rows * c];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * c];
        let (gv, bv) = (gamma.rc(), beta.rc());
        for r in 0..rows {
            let row = &x.value().data()[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() / cn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let dims = x.dims().to_vec();
        Ok(self.record(
            "layernorm",
            &[x, gamma, beta],
            Tensor::from_vec(&dims, out),
            Box::new(move |g, needs| {
                let mut gx = needs[0].then(|| vec![T::zero(); rows * c]);
                let mut gg = vec![T::zero(); c];
                let mut gb = vec![T::zero(); c];
                for r in 0..rows {
                    let gr = &g.data()[r * c..(r + 1) * c];
                    let hr = &xhat[r * c..(r + 1) * c];
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in 0..c {
                        gg[j] += gr[j] * hr[j];
                        gb[j] += gr[j];
                        let dh = gr[j] * gv.data()[j];
                        s1 += dh;
                        s2 += dh * hr[j];
                    }
                    if let Some(gx) = gx.as_mut() {
                        for j in 0..c {
                            let dh = gr[j] * gv.data()[j];
                            gx[r * c + j] = rstd[r] * (dh - s1 / cn - hr[j] * s2 / cn);
                        }
                    }
                }
                vec![
                    gx.map(|v| Tensor::from_vec(&dims, v)),
                    needs[1].then(|| Tensor::from_vec(&[c], gg)),
                    needs[2].then(|| Tensor::from_vec(&[c], gb)),
                ]
            }),
        ))
    }

    /// x / max(‖x‖₂, eps) along the last axis.
    pub fn l2_normalize(&self, x: &Var<T>, eps: f64) -> Var<T> {
        let c = *x.dims().last().unwrap_or(&1);
        let eps = T::of(eps);
        let rows = x.value().len() / c.max(1);
        let mut norms = vec![T::zero(); rows];
        let mut out = x.value().data().to_vec();
        for (r, row) in out.chunks_mut(c).enumerate() {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            norms[r] = n;
            let d = n.max(eps);
            row.iter_mut().for_each(|v| *v = *v / d);
        }
        let y = Rc::new(Tensor::from_vec(x.dims(), out));
        let yv = Rc::clone(&y);
        self.record(
            "l2_normalize",
            &[x],
            (*y).clone(),
            Box::new(move |g, _| {
                let mut gx = vec![T::zero(); g.len()];
                for r in 0..rows {
                    let gr = &g.data()[r * c..(r + 1) * c];
                    let yr = &yv.data()[r * c..(r + 1) * c];
                    let dst = &mut gx[r * c..(r + 1) * c];
                    if norms[r] > eps {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            dst[j] = (gr[j] - yr[j] * dot) / norms[r];
                        }
                    } else {
                        for j in 0..c {
                            dst[j] = gr[j] / eps;
                        }
                    }
                }
                vec![Some(Tensor::from_vec(g.dims(), gx))]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_closed_form_and_shift_invariance() {
        let tape = Tape::<f64>::inference();
        let x = tape.constant(Tensor::from_vec(&[2], vec![0.0, 2f64.ln()]));
        let y = tape.softmax(&x).unwrap();
        assert!((y.value().data()[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((y.value().data()[1] - 2.0 / 3.0).abs() < 1e-12);

        let u = tape.softmax(&tape.constant(Tensor::full(&[4], 3.3))).unwrap();
        assert!(u.value().data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let z = Tensor::from_vec(&[3], vec![0.3, -1.2, 4.0]);
        let a = tape.softmax(&tape.constant(z.clone())).unwrap();
        let b = tape.softmax(&tape.constant(z.map(|v| v + 17.0))).unwrap();
        for (p, q) in a.value().data().iter().zip(b.value().data()) {
            assert!((p - q).abs() < 1e-7);
        }
    }

    #[test]
    fn layernorm_hand_values() {
        let tape = Tape::<f64>::inference();
        let g = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let y = tape.layernorm(&tape.constant(Tensor::from_vec(&[2], vec![1.0, 3.0])), &g, &b, LAYERNORM_EPS).unwrap();
        assert!((y.value().data()[0] + 1.0).abs() < 2e-3);
        assert!((y.value().data()[1] - 1.0).abs() < 2e-3);

        let flat = tape.layernorm(&tape.constant(Tensor::full(&[2], 7.0)), &g, &b, LAYERNORM_EPS).unwrap();
        assert_eq!(flat.value().data(), &[0.0, 0.0]);
    }

    #[test]
    fn layernorm_mean_equals_beta() {
        let tape = Tape::<f64>::inference();
        let x = tape.constant(Tensor::from_fn(&[3, 5], |i| ((i * 37) % 11) as f64 - 4.0));
        let beta = Tensor::from_vec(&[5], vec![0.5; 5]);
        let y = tape
            .layernorm(&x, &tape.constant(Tensor::ones(&[5])), &tape.constant(beta), LAYERNORM_EPS)
            .unwrap();
        for row in y.value().data().chunks(5) {
            assert!((row.iter().sum::<f64>() / 5.0 - 0.5).abs() < 1e-12);
        }
    }
}
